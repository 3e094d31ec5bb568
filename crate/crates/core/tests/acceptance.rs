//! End-to-end acceptance checks. Each test prints one `PASS`/`FAIL` line to
//! stderr (visible without `--nocapture`) before asserting.

use std::fs;
use std::io::Write;
use std::path::Path;
use std::process::Command;
use std::time::{Duration, Instant};

use vbrnn::cli::{
    compare_split, compare_train_config, dominance_dataset, dominance_margins, train_cell, train_noise_free,
};
use vbrnn::data::{gen_bimodal, BimodalSpec};
use vbrnn::model::{Model, ModelConfig, VisibleKind, VisibleTrajectory};
use vbrnn::numkit::RngState;
use vbrnn::objectives::{
    loglik_deterministic, objective_gap_report, sequence_particle_bound, step_particle_objective,
    variational_objective_deterministic, ParticleEmissionTable,
};
use vbrnn::oracle::{jensen_gap_report, mixture_exact_loglik, EnumerationBudget, NoiseGrid};
use vbrnn::trainer::{self, TrainConfig};

fn report(id: u32, name: &str, pass: bool, detail: String) {
    let verdict = if pass { "PASS" } else { "FAIL" };
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "acceptance {id:>2} {verdict} {name}: {detail}");
}

fn random_model(cfg: ModelConfig, rng: &mut RngState) -> Model {
    let mut m = Model::zeros(cfg).unwrap();
    for (_, block) in m.params.blocks_mut() {
        for v in block.iter_mut() {
            *v = rng.uniform_range(-1.0, 1.0);
        }
    }
    m
}

fn random_tokens(vocab: usize, t_len: usize, rng: &mut RngState) -> VisibleTrajectory {
    VisibleTrajectory::Tokens((0..t_len).map(|_| rng.below(vocab)).collect())
}

#[test]
fn criterion_01_objective_equivalence() {
    let start = Instant::now();
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = RngState::new(seed);
        let m = random_model(ModelConfig::new(VisibleKind::Categorical { vocab: 8 }, 4, 1), &mut rng);
        let x = random_tokens(8, 16, &mut rng);
        let a = variational_objective_deterministic(&m, &x).unwrap().value;
        let b = loglik_deterministic(&m, &x).unwrap().value;
        worst = worst.max((a - b).abs());
    }
    let elapsed = start.elapsed();
    let pass = worst <= 1e-12 && elapsed < Duration::from_secs(10);
    report(1, "variational objective equals log-likelihood", pass, format!("max |diff| {worst:.3e}, {elapsed:.2?}"));
    assert!(pass);
}

#[test]
fn criterion_02_jensen_bound() {
    let start = Instant::now();
    let budget = EnumerationBudget::default();
    let sigmas = [0.1, 0.2, 0.4];
    let mut violations = 0;
    let mut strict = 0;
    let mut min_gap = f64::INFINITY;
    for seed in 0..100u64 {
        let mut rng = RngState::new(1000 + seed);
        let hidden = 1 + rng.below(2);
        let t_len = 2 + rng.below(3);
        let grid = NoiseGrid::with_size(2 + rng.below(2)).unwrap();
        let sigma = sigmas[rng.below(3)];
        let cfg = ModelConfig::new(VisibleKind::Categorical { vocab: 3 }, hidden, 1).with_sigma(sigma);
        let m = random_model(cfg, &mut rng);
        let x = random_tokens(3, t_len, &mut rng);
        let r = jensen_gap_report(&m, &x, &grid, &budget).unwrap();
        min_gap = min_gap.min(r.gap);
        if r.exact_elbo > r.exact_loglik + 1e-12 {
            violations += 1;
        }
        if r.gap > 1e-9 {
            strict += 1;
        }
    }
    let elapsed = start.elapsed();
    let pass = violations == 0 && strict >= 95 && elapsed < Duration::from_secs(60);
    report(
        2,
        "exact ELBO never exceeds exact log-likelihood",
        pass,
        format!("violations {violations}, strict gaps {strict}/100, min gap {min_gap:.3e}, {elapsed:.2?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_03_noise_free_optimality() {
    let start = Instant::now();
    let budget = EnumerationBudget::default();
    let sigmas = [0.1, 0.2, 0.4, 0.8];
    let mut min_margin = f64::INFINITY;
    let mut worst_shortfall = 0.0f64;
    for seed in 0..10u64 {
        let data = dominance_dataset(4, seed).unwrap();
        let model = train_noise_free(&data, 2, seed, 10000, 0.01).unwrap();
        // everything but the branch token is predictable, so the supremum is
        // the empirical branch entropy
        let n = data.len() as f64;
        let n_a = data.sequences.iter().filter(|x| matches!(x, VisibleTrajectory::Tokens(t) if t[1] == 1)).count() as f64;
        let sup: f64 = [n_a, n - n_a].iter().filter(|&&c| c > 0.0).map(|&c| c * (c / n).ln()).sum();
        let value: f64 = data.sequences.iter().map(|x| loglik_deterministic(&model, x).unwrap().value).sum();
        worst_shortfall = worst_shortfall.max(sup - value);
        for grid in [NoiseGrid::two_point(), NoiseGrid::three_point()] {
            for (_, base, elbo) in dominance_margins(&model, &data, &sigmas, &grid, &budget).unwrap() {
                min_margin = min_margin.min(base - elbo);
            }
        }
    }
    let elapsed = start.elapsed();
    let converged = worst_shortfall < 0.01;
    let pass = converged && min_margin >= -1e-9 && elapsed < Duration::from_secs(120);
    report(
        3,
        "noise-free ELBO dominates noisy exact ELBO on trained models",
        pass,
        format!("min margin {min_margin:.3e}, worst shortfall from training optimum {worst_shortfall:.3e} nats, {elapsed:.2?}"),
    );
    assert!(pass);
}

#[test]
fn criterion_04_single_particle_reduction() {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = RngState::new(2000 + seed);
        let vocab = 2 + rng.below(7);
        let t_len = 1 + rng.below(16);
        let m = random_model(ModelConfig::new(VisibleKind::Categorical { vocab }, 1 + rng.below(6), 1), &mut rng);
        let x = random_tokens(vocab, t_len, &mut rng);
        let direct = loglik_deterministic(&m, &x).unwrap().value;
        let step = step_particle_objective(&m, &x).unwrap().value;
        let seq = sequence_particle_bound(&m, &x).unwrap().value;
        worst = worst.max((step - direct).abs()).max((seq - direct).abs());
    }
    let pass = worst <= 1e-12;
    report(4, "single-particle objectives reduce to log-likelihood", pass, format!("max |diff| {worst:.3e}"));
    assert!(pass);
}

#[test]
fn criterion_05_sequence_bound_tightness() {
    let mut worst = 0.0f64;
    for seed in 0..100u64 {
        let mut rng = RngState::new(3000 + seed);
        let l = 2 + (seed % 3) as usize;
        let vocab = 2 + rng.below(5);
        let t_len = 1 + rng.below(12);
        let m = random_model(ModelConfig::new(VisibleKind::Categorical { vocab }, 1 + rng.below(4), l), &mut rng);
        let x = random_tokens(vocab, t_len, &mut rng);
        let bound = sequence_particle_bound(&m, &x).unwrap().value;
        let oracle = mixture_exact_loglik(&m, &x).unwrap();
        worst = worst.max((bound - oracle).abs());
    }
    let pass = worst <= 1e-12;
    report(5, "sequence bound equals mixture likelihood", pass, format!("max |diff| {worst:.3e}"));
    assert!(pass);
}

#[test]
fn criterion_06_worked_gap_example() {
    let table = ParticleEmissionTable::from_particle_probs(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
    let g = table.gap_report();
    // step: 2·ln 0.5; sequence: ln((0.09 + 0.09) / 2)
    let step = 2.0 * 0.5f64.ln();
    let seq = 0.09f64.ln();
    let errs = [
        (g.step_form - -1.386294).abs(),
        (g.sequence_form - -2.407946).abs(),
        (g.gap - 1.021652).abs(),
    ];
    let pass = errs.iter().all(|e| *e <= 1e-6)
        && (g.step_form - step).abs() <= 1e-9
        && (g.sequence_form - seq).abs() <= 1e-9
        && (g.gap - (step - seq)).abs() <= 1e-9;
    report(
        6,
        "step-vs-sequence gap worked example",
        pass,
        format!("step {:.6}, sequence {:.6}, gap {:.6}", g.step_form, g.sequence_form, g.gap),
    );
    assert!(pass);
}

#[test]
fn criterion_06_gap_from_model_is_consistent() {
    let mut rng = RngState::new(4);
    let m = random_model(ModelConfig::new(VisibleKind::Categorical { vocab: 4 }, 3, 3), &mut rng);
    let x = random_tokens(4, 7, &mut rng);
    let g = objective_gap_report(&m, &x).unwrap();
    let step = step_particle_objective(&m, &x).unwrap().value;
    let seq = sequence_particle_bound(&m, &x).unwrap().value;
    assert!((g.gap - (step - seq)).abs() <= 1e-12);
}

#[test]
fn criterion_07_gradient_correctness() {
    let dir = tempfile::tempdir().unwrap();
    let start = Instant::now();
    let out = Command::new(env!("CARGO_BIN_EXE_vbrnn"))
        .args(["grad-check", "--trials", "20", "--seed", "0", "--out"])
        .arg(dir.path())
        .output()
        .unwrap();
    let elapsed = start.elapsed();
    let code = out.status.code();
    let pass = code == Some(0) && elapsed < Duration::from_secs(60);
    report(
        7,
        "grad-check with 20 trials",
        pass,
        format!("exit {code:?}, {} {elapsed:.2?}", String::from_utf8_lossy(&out.stdout).trim()),
    );
    assert!(pass, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn criterion_08_learnability() {
    let spec = BimodalSpec {
        t_len: 8,
        vocab: 3,
        branch_step: 3,
        rho: 0.5,
    };
    let (train, _) = gen_bimodal(&spec, 2000, &mut RngState::new(80)).unwrap();
    let (held_out, _) = gen_bimodal(&spec, 500, &mut RngState::new(81)).unwrap();
    let target = spec.optimal_loglik_per_step() - 0.05;
    let cfg = TrainConfig {
        learning_rate: 0.01,
        batch_size: 32,
        max_epochs: 200,
        eval_every: 5,
        seed: 8,
        ..TrainConfig::default()
    };
    let mcfg = ModelConfig::new(VisibleKind::Categorical { vocab: 3 }, 8, 1);
    let start = Instant::now();
    let outcome = trainer::train(&cfg, &mcfg, &train, &held_out).unwrap();
    let elapsed = start.elapsed();
    let reached = outcome
        .metrics
        .iter()
        .find(|r| r.split == "valid" && r.per_step_value >= target)
        .map(|r| r.epoch);
    let best = trainer::evaluate(&outcome.best, &held_out, vbrnn::objectives::ObjectiveId::Loglik)
        .unwrap()
        .per_step_value();
    let pass = reached.is_some() && best >= target && elapsed < Duration::from_secs(60);
    report(
        8,
        "bimodal data learned to near the analytic optimum",
        pass,
        format!(
            "optimum {:.6}/step, best held-out {best:.6}/step, first within 0.05 at epoch {reached:?}, {elapsed:.2?}",
            spec.optimal_loglik_per_step()
        ),
    );
    assert!(pass);
}

#[test]
fn criterion_09_particle_trend() {
    let spec = BimodalSpec {
        t_len: 8,
        vocab: 3,
        branch_step: 3,
        rho: 0.5,
    };
    let mut wins = 0;
    let mut lines = Vec::new();
    for seed in 0..5u64 {
        let (d, _) = gen_bimodal(&spec, 1000, &mut RngState::new(900 + seed)).unwrap();
        let splits = compare_split(&d, seed).unwrap();
        let cfg = compare_train_config(seed, 60, 0.03, 32);
        let one = train_cell(&cfg, 1, 2, &splits).unwrap();
        let four = train_cell(&cfg, 4, 2, &splits).unwrap();
        let wide = train_cell(&cfg, 1, 8, &splits).unwrap();
        if four.step_objective >= one.step_objective - 0.01 {
            wins += 1;
        }
        lines.push(format!(
            "seed {seed}: L1h2 {:.5} L4h2 {:.5} L1h8 {:.5}",
            one.step_objective, four.step_objective, wide.step_objective
        ));
    }
    let pass = wins >= 4;
    report(
        9,
        "four particles at hidden 2 match one particle",
        pass,
        format!("{wins}/5 seeds within 0.01 nats/step; {}", lines.join("; ")),
    );
    assert!(pass);
}

fn run_all(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let bin = env!("CARGO_BIN_EXE_vbrnn");
    let run = |args: &[&str]| {
        let o = Command::new(bin).args(args).output().unwrap();
        assert_eq!(o.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&o.stderr));
        o.stdout
    };
    let p = |name: &str| dir.join(name).to_str().unwrap().to_string();
    let mut stdout = Vec::new();
    for (name, seed) in [("train.txt", "1"), ("valid.txt", "2"), ("data.txt", "3")] {
        stdout.extend(run(&[
            "gen-data", "--kind", "bimodal", "--n", "40", "--t", "6", "--t0", "3", "--rho", "0.3", "--seed", seed,
            "--out", &p(name),
        ]));
    }
    fs::write(
        dir.join("run.cfg"),
        "visible = categorical\nwidth = 3\nhidden_dim = 3\nn_particles = 2\nobjective = step_particle\n\
         learning_rate = 0.05\nbatch_size = 8\nmax_epochs = 4\nseed = 3\ntrain_data = train.txt\nvalid_data = valid.txt\n",
    )
    .unwrap();
    stdout.extend(run(&["train", "--config", &p("run.cfg"), "--out", &p("run")]));
    fs::write(
        dir.join("noisy.cfg"),
        "visible = categorical\nwidth = 3\nhidden_dim = 2\nobjective = noisy_elbo\nsigma = 0.2\nlearn_sigma = true\n\
         n_mc = 2\nmax_epochs = 3\nseed = 4\ntrain_data = train.txt\nvalid_data = valid.txt\n",
    )
    .unwrap();
    stdout.extend(run(&["train", "--config", &p("noisy.cfg"), "--out", &p("noisy")]));
    stdout.extend(run(&[
        "evaluate", "--checkpoint", &p("noisy/final.ckpt"), "--data", &p("valid.txt"), "--objective", "noisy_elbo",
        "--out", &p("eval.csv"),
    ]));
    stdout.extend(run(&["grad-check", "--trials", "4", "--seed", "2", "--out", &p("gc")]));
    stdout.extend(run(&["bound-check", "--trials", "3", "--seed", "5", "--out", &p("bc")]));
    stdout.extend(run(&[
        "particle-compare", "--data", &p("data.txt"), "--seed", "1", "--epochs", "3", "--out", &p("pc"),
    ]));

    let mut files = vec![("stdout".to_string(), stdout)];
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(dir).unwrap().to_str().unwrap().to_string();
                files.push((rel, fs::read(&path).unwrap()));
            }
        }
    }
    files.sort();
    files
}

#[test]
fn criterion_10_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let fa = run_all(a.path());
    let fb = run_all(b.path());
    let names: Vec<&str> = fa.iter().map(|(n, _)| n.as_str()).collect();
    // stdout echoes the output paths, which differ between the two directories
    let strip = |(n, bytes): &(String, Vec<u8>), root: &Path| {
        let text = String::from_utf8_lossy(bytes).replace(root.to_str().unwrap(), "<dir>");
        (n.clone(), text.into_bytes())
    };
    let same = fa.len() == fb.len()
        && fa
            .iter()
            .zip(&fb)
            .all(|(x, y)| strip(x, a.path()) == strip(y, b.path()));
    let pass = same && names.len() >= 15;
    report(
        10,
        "reruns produce byte-identical outputs",
        pass,
        format!("{} files compared: {}", names.len(), names.join(" ")),
    );
    assert!(pass);
}
