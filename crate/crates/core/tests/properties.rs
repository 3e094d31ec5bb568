use proptest::prelude::*;

use vbrnn::data::{self, Dataset, SplitTag};
use vbrnn::grad::backprop;
use vbrnn::model::{encode, draw_noise, Model, ModelConfig, Observation, VisibleKind, VisibleTrajectory};
use vbrnn::numkit::RngState;
use vbrnn::objectives::{
    loglik_deterministic, sequence_particle_bound, step_particle_objective, variational_objective_deterministic,
    McNoise, ObjectiveId,
};
use vbrnn::oracle::{enumerate_exact_elbo, enumerate_exact_loglik, mixture_exact_loglik, EnumerationBudget, NoiseGrid};
use vbrnn::trainer::{initial_checkpoint, Checkpoint, TrainConfig};

fn model(vocab: usize, hidden: usize, particles: usize, sigma: f64, seed: u64) -> Model {
    let cfg = ModelConfig::new(VisibleKind::Categorical { vocab }, hidden, particles).with_sigma(sigma);
    let mut m = Model::zeros(cfg).unwrap();
    let mut rng = RngState::new(seed);
    for (_, b) in m.params.blocks_mut() {
        for v in b.iter_mut() {
            *v = rng.uniform_range(-1.5, 1.5);
        }
    }
    m
}

fn tokens(vocab: usize, len: usize, seed: u64) -> VisibleTrajectory {
    let mut rng = RngState::with_stream(seed, 9);
    VisibleTrajectory::Tokens((0..len).map(|_| rng.below(vocab)).collect())
}

fn shape() -> impl Strategy<Value = (usize, usize, usize, u64)> {
    (2usize..6, 1usize..5, 1usize..10, any::<u64>())
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn variational_route_equals_loglik((v, h, t, seed) in shape()) {
        let m = model(v, h, 1, 0.0, seed);
        let x = tokens(v, t, seed);
        let a = variational_objective_deterministic(&m, &x).unwrap().value;
        let b = loglik_deterministic(&m, &x).unwrap().value;
        prop_assert!((a - b).abs() <= 1e-12);
    }

    #[test]
    fn single_particle_forms_agree((v, h, t, seed) in shape()) {
        let m = model(v, h, 1, 0.0, seed);
        let x = tokens(v, t, seed);
        let d = loglik_deterministic(&m, &x).unwrap().value;
        prop_assert!((step_particle_objective(&m, &x).unwrap().value - d).abs() <= 1e-12);
        prop_assert!((sequence_particle_bound(&m, &x).unwrap().value - d).abs() <= 1e-12);
    }

    #[test]
    fn particle_objectives_ignore_labels((v, h, t, seed) in shape(), l in 2usize..5, shift in 1usize..4) {
        let m = model(v, h, l, 0.0, seed);
        let x = tokens(v, t, seed);
        let mut p = m.clone();
        p.params.h1.rotate_left(shift % l);
        for f in [step_particle_objective, sequence_particle_bound] {
            let a = f(&m, &x).unwrap().value;
            let b = f(&p, &x).unwrap().value;
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn sequence_bound_is_the_mixture((v, h, t, seed) in shape(), l in 2usize..5) {
        let m = model(v, h, l, 0.0, seed);
        let x = tokens(v, t, seed);
        let a = sequence_particle_bound(&m, &x).unwrap().value;
        let b = mixture_exact_loglik(&m, &x).unwrap();
        prop_assert!((a - b).abs() <= 1e-12, "{} vs {}", a, b);
    }

    #[test]
    fn exact_bound_below_exact_loglik(
        v in 2usize..4, h in 1usize..3, t in 1usize..5, grid in 2usize..4,
        sigma in 0.05f64..1.0, seed in any::<u64>(),
    ) {
        let m = model(v, h, 1, sigma, seed);
        let x = tokens(v, t, seed);
        let g = NoiseGrid::with_size(grid).unwrap();
        let budget = EnumerationBudget::default();
        let ll = enumerate_exact_loglik(&m, &x, &g, &budget).unwrap();
        let elbo = enumerate_exact_elbo(&m, &x, &g, &budget).unwrap();
        prop_assert!(elbo <= ll + 1e-12);
    }

    #[test]
    fn hidden_states_stay_bounded((v, h, t, seed) in shape(), sigma in 0.0f64..2.0) {
        let m = model(v, h, 1, sigma, seed);
        let x = tokens(v, t, seed);
        let mut rng = RngState::new(seed);
        let noise = if sigma > 0.0 { draw_noise(&mut rng, t, h) } else { Vec::new() };
        let path = m.unroll_with_noise(&x, 0, &noise).unwrap();
        prop_assert_eq!(&path, &m.unroll_with_noise(&x, 0, &noise).unwrap());
        for (i, s) in path.states.iter().enumerate().skip(1) {
            for (j, hj) in s.iter().enumerate() {
                let slack = noise.get(i - 1).map_or(0.0, |e| (sigma * e[j]).abs());
                prop_assert!(hj.abs() <= 1.0 + slack);
            }
        }
    }

    #[test]
    fn one_hot_round_trip(vocab in 1usize..50, k in 0usize..50) {
        prop_assume!(k < vocab);
        let e = encode(&VisibleKind::Categorical { vocab }, Observation::Token(k));
        let arg = (0..vocab).max_by(|&a, &b| e[a].partial_cmp(&e[b]).unwrap()).unwrap();
        prop_assert_eq!(arg, k);
        prop_assert_eq!(e.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn noisy_gradient_fixed_by_seed((v, h, t, seed) in shape(), n_mc in 1usize..4) {
        let m = model(v, h, 1, 0.3, seed);
        let x = tokens(v, t, seed);
        let draw = || McNoise::draw(&mut RngState::new(seed), n_mc, t, h);
        let a = backprop(ObjectiveId::NoisyElbo, &m, &x, Some(&draw())).unwrap();
        let b = backprop(ObjectiveId::NoisyElbo, &m, &x, Some(&draw())).unwrap();
        prop_assert_eq!(a.grads, b.grads);
        prop_assert_eq!(a.value, b.value);
    }

    #[test]
    fn token_files_round_trip(seqs in prop::collection::vec(prop::collection::vec(0usize..7, 1..9), 1..12)) {
        let kind = VisibleKind::Categorical { vocab: 7 };
        let d = Dataset::new(seqs.into_iter().map(VisibleTrajectory::Tokens).collect(), kind, SplitTag::Train).unwrap();
        let text = data::format_sequences(&d).unwrap();
        let back = data::parse_sequences(&text, std::path::Path::new("mem"), kind).unwrap();
        prop_assert_eq!(&back.sequences, &d.sequences);
        prop_assert_eq!(data::format_sequences(&back).unwrap(), text);
    }

    #[test]
    fn split_partitions(n in 1usize..60, seed in any::<u64>(), w in prop::array::uniform3(0.05f64..1.0)) {
        let total: f64 = w.iter().sum();
        let f = (w[0] / total, w[1] / total, 1.0 - w[0] / total - w[1] / total);
        let kind = VisibleKind::Categorical { vocab: 100 };
        let seqs = (0..n).map(|i| VisibleTrajectory::Tokens(vec![i % 100, i / 100])).collect();
        let d = Dataset::new(seqs, kind, SplitTag::Train).unwrap();
        match data::split(&d, f, &mut RngState::new(seed)) {
            Ok((x, y, z)) => {
                prop_assert!(!x.is_empty() && !y.is_empty() && !z.is_empty());
                let mut all: Vec<_> = x.sequences.iter().chain(&y.sequences).chain(&z.sequences).cloned().collect();
                all.sort_by_key(|s| match s {
                    VisibleTrajectory::Tokens(t) => t[1] * 100 + t[0],
                    VisibleTrajectory::Reals { .. } => unreachable!(),
                });
                prop_assert_eq!(all, d.sequences);
            }
            Err(e) => prop_assert!(matches!(e, vbrnn::Error::Dataset(_)), "{e}"),
        }
    }

    #[test]
    fn checkpoint_bytes_round_trip(h in 1usize..5, l in 1usize..4, seed in any::<u64>()) {
        let cfg = TrainConfig { seed, ..TrainConfig::default() };
        let mcfg = ModelConfig::new(VisibleKind::Categorical { vocab: 4 }, h, l);
        let ck = initial_checkpoint(&cfg, &mcfg).unwrap();
        let bytes = ck.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        prop_assert_eq!(&back, &ck);
        prop_assert_eq!(back.to_bytes(), bytes);
    }
}
