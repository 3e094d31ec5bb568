//! Training objectives and bounds.
//!
//! * [`loglik_deterministic`]: `Σ_t log p(x^t|h^t)` along `F(X)`.
//! * [`variational_objective_deterministic`]: the variational bound with the
//!   inference model set to the generative conditional; evaluated by its own
//!   accumulation of `log p(H,X) − log q(H|X)` so that equality with the
//!   log-likelihood is checked rather than assumed.
//! * [`noisy_elbo_estimate`]: Monte-Carlo bound under location-scale noise.
//! * [`step_particle_objective`]: `Σ_t log((1/L) Σ_l p(x^t|h_l^t))`.
//! * [`sequence_particle_bound`]: `log((1/L) Σ_l Π_t p(x^t|h_l^t))`.

use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::model::{HiddenPath, Model, VisibleTrajectory};
use crate::numkit::{log_sum_exp_nonempty, RngState, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ObjectiveId {
    Loglik,
    StepParticle,
    SequenceParticle,
    NoisyElbo,
}

impl ObjectiveId {
    pub const ALL: [ObjectiveId; 4] = [
        ObjectiveId::Loglik,
        ObjectiveId::StepParticle,
        ObjectiveId::SequenceParticle,
        ObjectiveId::NoisyElbo,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ObjectiveId::Loglik => "loglik",
            ObjectiveId::StepParticle => "step_particle",
            ObjectiveId::SequenceParticle => "sequence_particle",
            ObjectiveId::NoisyElbo => "noisy_elbo",
        }
    }

    /// Checks the objective against the model's dynamics.
    pub fn check_model(&self, model: &Model) -> Result<()> {
        match self {
            ObjectiveId::NoisyElbo if !model.is_stochastic() => Err(Error::contract(
                "objective noisy_elbo requires sigma > 0; use loglik for deterministic dynamics",
            )),
            ObjectiveId::StepParticle | ObjectiveId::SequenceParticle if model.is_stochastic() => {
                Err(Error::contract(format!(
                    "objective {} requires deterministic dynamics (sigma = 0)",
                    self.name()
                )))
            }
            _ => Ok(()),
        }
    }
}

impl fmt::Display for ObjectiveId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ObjectiveId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        ObjectiveId::ALL
            .into_iter()
            .find(|o| o.name() == s)
            .ok_or_else(|| Error::contract(format!("unknown objective `{s}`")))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ObjectiveReport {
    /// Mean per-sequence objective in nats.
    pub value: f64,
    pub per_timestep: Vec<f64>,
    /// Per-particle sequence log-weights; sequence form only.
    pub per_particle_logweights: Vec<f64>,
    pub n_sequences: usize,
    /// Total number of observed steps across the sequences.
    pub n_steps: usize,
    /// Monte-Carlo standard error of `value`, when sampled.
    pub std_error: Option<f64>,
}

impl ObjectiveReport {
    fn single(per_timestep: Vec<f64>) -> Self {
        let value = per_timestep.iter().sum();
        ObjectiveReport {
            value,
            n_steps: per_timestep.len(),
            per_timestep,
            per_particle_logweights: Vec::new(),
            n_sequences: 1,
            std_error: None,
        }
    }

    /// Objective per observed step: total nats over total steps.
    pub fn per_step_value(&self) -> f64 {
        self.value * self.n_sequences as f64 / self.n_steps as f64
    }

    /// Dataset mean of single-sequence reports. `per_timestep` is averaged
    /// over the sequences that reach each step.
    pub fn mean_of(reports: &[ObjectiveReport]) -> Result<Self> {
        if reports.is_empty() {
            return Err(Error::EmptyInput("objective batch"));
        }
        let n = reports.len();
        let mut total = 0.0;
        let mut n_steps = 0;
        let max_t = reports.iter().map(|r| r.per_timestep.len()).max().unwrap_or(0);
        let mut sums = vec![0.0; max_t];
        let mut counts = vec![0usize; max_t];
        for r in reports {
            total += r.value * r.n_sequences as f64;
            n_steps += r.n_steps;
            for (t, v) in r.per_timestep.iter().enumerate() {
                sums[t] += v;
                counts[t] += 1;
            }
        }
        let n_sequences: usize = reports.iter().map(|r| r.n_sequences).sum();
        Ok(ObjectiveReport {
            value: total / n_sequences as f64,
            per_timestep: sums.iter().zip(&counts).map(|(s, &c)| s / c as f64).collect(),
            per_particle_logweights: if n == 1 {
                reports[0].per_particle_logweights.clone()
            } else {
                Vec::new()
            },
            n_sequences,
            n_steps,
            std_error: None,
        })
    }
}

/// `log p(x^t | h_l^t)` for every step and particle, stored step-major.
#[derive(Clone, Debug, PartialEq)]
pub struct ParticleEmissionTable {
    t_len: usize,
    n_particles: usize,
    logp: Vec<f64>,
}

impl ParticleEmissionTable {
    pub fn from_step_major(t_len: usize, n_particles: usize, logp: Vec<f64>) -> Result<Self> {
        if t_len == 0 || n_particles == 0 {
            return Err(Error::EmptyInput("particle emission table"));
        }
        Error::check_dim("particle emission table", t_len * n_particles, logp.len())?;
        if !logp.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("particle emission table"));
        }
        Ok(ParticleEmissionTable {
            t_len,
            n_particles,
            logp,
        })
    }

    /// Builds a table from emission probabilities given one row per particle.
    pub fn from_particle_probs(rows: &[Vec<f64>]) -> Result<Self> {
        let n_particles = rows.len();
        let t_len = rows.first().map_or(0, Vec::len);
        let mut logp = vec![0.0; t_len * n_particles];
        for (l, row) in rows.iter().enumerate() {
            Error::check_dim("particle row", t_len, row.len())?;
            for (t, p) in row.iter().enumerate() {
                logp[t * n_particles + l] = p.ln();
            }
        }
        Self::from_step_major(t_len, n_particles, logp)
    }

    pub fn from_model(model: &Model, x: &VisibleTrajectory) -> Result<Self> {
        let paths = model.unroll_all_particles(x)?.paths;
        let l_count = paths.len();
        let mut logp = vec![0.0; x.len() * l_count];
        for (l, path) in paths.iter().enumerate() {
            for (t, h) in path.states.iter().enumerate() {
                logp[t * l_count + l] = model.emission_logprob(h, x.step(t))?;
            }
        }
        Self::from_step_major(x.len(), l_count, logp)
    }

    pub fn t_len(&self) -> usize {
        self.t_len
    }

    pub fn n_particles(&self) -> usize {
        self.n_particles
    }

    pub fn get(&self, t: usize, l: usize) -> f64 {
        self.logp[t * self.n_particles + l]
    }

    pub fn step(&self, t: usize) -> &[f64] {
        &self.logp[t * self.n_particles..(t + 1) * self.n_particles]
    }

    /// Σ_t [lse_l logp_{l,t} − ln L].
    pub fn step_form(&self) -> ObjectiveReport {
        let ln_l = (self.n_particles as f64).ln();
        let per_t = (0..self.t_len)
            .map(|t| log_sum_exp_nonempty(self.step(t)) - ln_l)
            .collect();
        ObjectiveReport::single(per_t)
    }

    /// Per-particle sequence log-weights `w_l = Σ_t logp_{l,t}`.
    pub fn log_weights(&self) -> Vec<f64> {
        let mut w = vec![0.0; self.n_particles];
        for t in 0..self.t_len {
            for (wl, v) in w.iter_mut().zip(self.step(t)) {
                *wl += v;
            }
        }
        w
    }

    /// lse_l(w_l) − ln L. The per-step entries are the mixture's predictive
    /// terms `log p(x^t | x^{<t})`, which telescope to the value.
    pub fn sequence_form(&self) -> ObjectiveReport {
        let ln_l = (self.n_particles as f64).ln();
        let mut cumulative = vec![0.0; self.n_particles];
        let mut previous = 0.0;
        let mut per_t = Vec::with_capacity(self.t_len);
        for t in 0..self.t_len {
            for (c, v) in cumulative.iter_mut().zip(self.step(t)) {
                *c += v;
            }
            let current = log_sum_exp_nonempty(&cumulative) - ln_l;
            per_t.push(current - previous);
            previous = current;
        }
        let weights = self.log_weights();
        let value = log_sum_exp_nonempty(&weights) - ln_l;
        ObjectiveReport {
            value,
            per_timestep: per_t,
            per_particle_logweights: weights,
            n_sequences: 1,
            n_steps: self.t_len,
            std_error: None,
        }
    }

    pub fn gap_report(&self) -> GapReport {
        let step_form = self.step_form().value;
        let sequence_form = self.sequence_form().value;
        GapReport {
            step_form,
            sequence_form,
            gap: step_form - sequence_form,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GapReport {
    pub step_form: f64,
    pub sequence_form: f64,
    pub gap: f64,
}

fn path_emissions(model: &Model, path: &HiddenPath, x: &VisibleTrajectory) -> Result<Vec<f64>> {
    path.states
        .iter()
        .enumerate()
        .map(|(t, h)| model.emission_logprob(h, x.step(t)))
        .collect()
}

/// Log-likelihood along the deterministic unroll of particle 0.
pub fn loglik_deterministic(model: &Model, x: &VisibleTrajectory) -> Result<ObjectiveReport> {
    let path = model.unroll_deterministic(x, 0)?;
    Ok(ObjectiveReport::single(path_emissions(model, &path, x)?))
}

/// A point-mass conditional `δ(h − location)`.
struct DeltaConditional {
    location: Vec<f64>,
}

impl DeltaConditional {
    fn sample(&self) -> Vec<f64> {
        self.location.clone()
    }

    /// Log-ratio of two point masses evaluated at `h`: zero when both sit at
    /// `h`, `−∞` when `h` is outside the numerator's support.
    fn log_ratio(&self, denominator: &DeltaConditional, h: &[f64]) -> f64 {
        if self.location == h && denominator.location == h {
            0.0
        } else {
            f64::NEG_INFINITY
        }
    }
}

/// Inference model whose per-step conditional copies the generative one.
struct MatchedInference<'a> {
    generative: &'a Model,
}

impl MatchedInference<'_> {
    fn conditional(&self, h_prev: &[f64], x_prev: crate::model::Observation<'_>) -> DeltaConditional {
        DeltaConditional {
            location: self.generative.location(h_prev, x_prev),
        }
    }
}

/// The variational bound `E_q[log p(H,X) − log q(H|X)]` with
/// `q(h^t|x^{t−1},h^{t−1}) = p(h^t|x^{t−1},h^{t−1})`. Since `q` is a point
/// mass the expectation is a single evaluation at the sampled trajectory.
pub fn variational_objective_deterministic(
    model: &Model,
    x: &VisibleTrajectory,
) -> Result<ObjectiveReport> {
    model.check_sequence(x)?;
    let q = MatchedInference { generative: model };
    let mut h_prev: Vec<f64> = model.params.h1[0].to_vec();
    let mut per_t = Vec::with_capacity(x.len());
    per_t.push(model.emission_logprob(&h_prev, x.step(0))?);
    for t in 1..x.len() {
        let q_step = q.conditional(&h_prev, x.step(t - 1));
        let h = q_step.sample();
        let p_step = DeltaConditional {
            location: model.location(&h_prev, x.step(t - 1)),
        };
        let transition_term = p_step.log_ratio(&q_step, &h);
        per_t.push(transition_term + model.emission_logprob(&h, x.step(t))?);
        h_prev = h;
    }
    Ok(ObjectiveReport::single(per_t))
}

/// Recorded noise for `n_mc` Monte-Carlo unrolls: `draws[s][t−2] = ε^t`.
#[derive(Clone, Debug, PartialEq)]
pub struct McNoise {
    pub draws: Vec<Vec<Vector>>,
}

impl McNoise {
    pub fn draw(rng: &mut RngState, n_mc: usize, t_len: usize, hidden_dim: usize) -> Self {
        McNoise {
            draws: (0..n_mc)
                .map(|_| crate::model::draw_noise(rng, t_len, hidden_dim))
                .collect(),
        }
    }

    pub fn n_mc(&self) -> usize {
        self.draws.len()
    }
}

/// Average of `Σ_t log p(x^t|h^t)` over replayed noisy unrolls.
pub fn noisy_elbo_with_noise(
    model: &Model,
    x: &VisibleTrajectory,
    noise: &McNoise,
) -> Result<ObjectiveReport> {
    ObjectiveId::NoisyElbo.check_model(model)?;
    let n = noise.n_mc();
    if n == 0 {
        return Err(Error::contract("noisy ELBO needs at least one sample"));
    }
    let mut per_t = vec![0.0; x.len()];
    let mut totals = Vec::with_capacity(n);
    for record in &noise.draws {
        let path = model.unroll_with_noise(x, 0, record)?;
        let terms = path_emissions(model, &path, x)?;
        for (acc, v) in per_t.iter_mut().zip(&terms) {
            *acc += v / n as f64;
        }
        totals.push(terms.iter().sum::<f64>());
    }
    let mean = totals.iter().sum::<f64>() / n as f64;
    let std_error = (n > 1).then(|| {
        let var = totals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64;
        (var / n as f64).sqrt()
    });
    Ok(ObjectiveReport {
        value: mean,
        n_steps: x.len(),
        per_timestep: per_t,
        per_particle_logweights: Vec::new(),
        n_sequences: 1,
        std_error,
    })
}

pub fn noisy_elbo_estimate(
    model: &Model,
    x: &VisibleTrajectory,
    rng: &mut RngState,
    n_mc: usize,
) -> Result<ObjectiveReport> {
    ObjectiveId::NoisyElbo.check_model(model)?;
    model.check_sequence(x)?;
    if n_mc == 0 {
        return Err(Error::contract("n_mc must be ≥ 1"));
    }
    let noise = McNoise::draw(rng, n_mc, x.len(), model.hidden_dim());
    noisy_elbo_with_noise(model, x, &noise)
}

fn deterministic_table(model: &Model, x: &VisibleTrajectory) -> Result<ParticleEmissionTable> {
    if model.is_stochastic() {
        return Err(Error::contract("particle objectives require sigma = 0"));
    }
    ParticleEmissionTable::from_model(model, x)
}

pub fn step_particle_objective(model: &Model, x: &VisibleTrajectory) -> Result<ObjectiveReport> {
    Ok(deterministic_table(model, x)?.step_form())
}

pub fn sequence_particle_bound(model: &Model, x: &VisibleTrajectory) -> Result<ObjectiveReport> {
    Ok(deterministic_table(model, x)?.sequence_form())
}

/// Step form minus sequence form, both from one shared emission table.
pub fn objective_gap_report(model: &Model, x: &VisibleTrajectory) -> Result<GapReport> {
    Ok(deterministic_table(model, x)?.gap_report())
}

/// Evaluates a deterministic objective on one sequence. `noise` is required
/// for the noisy bound.
pub fn evaluate(
    objective: ObjectiveId,
    model: &Model,
    x: &VisibleTrajectory,
    noise: Option<&McNoise>,
) -> Result<ObjectiveReport> {
    objective.check_model(model)?;
    match objective {
        ObjectiveId::Loglik => loglik_deterministic(model, x),
        ObjectiveId::StepParticle => step_particle_objective(model, x),
        ObjectiveId::SequenceParticle => sequence_particle_bound(model, x),
        ObjectiveId::NoisyElbo => match noise {
            Some(n) => noisy_elbo_with_noise(model, x, n),
            None => Err(Error::contract("noisy_elbo evaluation needs a noise record")),
        },
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{ModelConfig, VisibleKind};
    use crate::numkit::Matrix;

    fn random_model(cfg: ModelConfig, seed: u64) -> Model {
        let mut m = Model::zeros(cfg).unwrap();
        let mut rng = RngState::new(seed);
        for (_, b) in m.params.blocks_mut() {
            for v in b.iter_mut() {
                *v = rng.uniform_range(-1.0, 1.0);
            }
        }
        m
    }

    fn tokens(v: &[usize]) -> VisibleTrajectory {
        VisibleTrajectory::tokens(v.to_vec()).unwrap()
    }

    #[test]
    fn zero_model_is_uniform() {
        let m = Model::zeros(ModelConfig::new(VisibleKind::Categorical { vocab: 4 }, 3, 1)).unwrap();
        let x = tokens(&[0, 3, 1]);
        let direct = loglik_deterministic(&m, &x).unwrap();
        assert!((direct.value + 3.0 * 4f64.ln()).abs() < 1e-12);
        let var = variational_objective_deterministic(&m, &x).unwrap();
        assert!((var.value + 3.0 * 4f64.ln()).abs() < 1e-12);
        let one = loglik_deterministic(&m, &tokens(&[2])).unwrap();
        assert_eq!(one.per_timestep.len(), 1);
        assert!((one.value + 4f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn variational_route_matches_direct() {
        let mut worst: f64 = 0.0;
        for seed in 0..100 {
            let m = random_model(ModelConfig::new(VisibleKind::Categorical { vocab: 5 }, 3, 1), seed);
            let mut rng = RngState::new(1000 + seed);
            let x = tokens(&(0..9).map(|_| rng.below(5)).collect::<Vec<_>>());
            let a = loglik_deterministic(&m, &x).unwrap().value;
            let b = variational_objective_deterministic(&m, &x).unwrap().value;
            worst = worst.max((a - b).abs());
        }
        assert!(worst <= 1e-12, "{worst}");
    }

    #[test]
    fn table_worked_example() {
        let table = ParticleEmissionTable::from_particle_probs(&[vec![0.9, 0.1], vec![0.1, 0.9]]).unwrap();
        let step = table.step_form();
        let seq = table.sequence_form();
        // independent arithmetic: each step averages to 0.5, each particle multiplies to 0.09
        assert!((step.value - 2.0 * 0.5f64.ln()).abs() < 1e-12);
        assert!((seq.value - 0.09f64.ln()).abs() < 1e-12);
        assert!((step.value + 1.386294).abs() < 1e-6);
        assert!((seq.value + 2.407946).abs() < 1e-6);
        let gap = table.gap_report();
        assert!((gap.gap - (2.0 * 0.5f64.ln() - 0.09f64.ln())).abs() < 1e-12);
        assert!((gap.gap - 1.021652).abs() < 1e-6);
        let telescoped: f64 = seq.per_timestep.iter().sum();
        assert!((telescoped - seq.value).abs() < 1e-12);
    }

    #[test]
    fn dominant_particle_limit() {
        let table = ParticleEmissionTable::from_step_major(2, 3, vec![-1.0, -400.0, -500.0, -2.0, -300.0, -450.0]).unwrap();
        let seq = table.sequence_form();
        assert!((seq.value - (-3.0 - 3f64.ln())).abs() < 1e-12);
    }

    #[test]
    fn duplicate_particle_recomposition() {
        // three particles where the third duplicates the first
        let rows = vec![vec![0.7, 0.2, 0.5], vec![0.1, 0.6, 0.3], vec![0.7, 0.2, 0.5]];
        let t3 = ParticleEmissionTable::from_particle_probs(&rows).unwrap();
        let t2 = ParticleEmissionTable::from_particle_probs(&rows[..2]).unwrap();
        let a: f64 = 0.7 * 0.2 * 0.5;
        let b: f64 = 0.1 * 0.6 * 0.3;
        assert!((t2.sequence_form().value - ((a + b) / 2.0).ln()).abs() < 1e-12);
        assert!((t3.sequence_form().value - ((2.0 * a + b) / 3.0).ln()).abs() < 1e-12);
    }

    #[test]
    fn single_particle_reductions() {
        for seed in 0..20 {
            let m = random_model(ModelConfig::new(VisibleKind::Categorical { vocab: 4 }, 3, 1), seed);
            let x = tokens(&[0, 1, 3, 3, 2, 0]);
            let d = loglik_deterministic(&m, &x).unwrap().value;
            assert!((step_particle_objective(&m, &x).unwrap().value - d).abs() <= 1e-12);
            assert!((sequence_particle_bound(&m, &x).unwrap().value - d).abs() <= 1e-12);
            assert!(objective_gap_report(&m, &x).unwrap().gap.abs() <= 1e-12);
        }
    }

    #[test]
    fn identical_particles_reduce_to_one() {
        let mut m = random_model(ModelConfig::new(VisibleKind::Categorical { vocab: 3 }, 2, 3), 4);
        let row = m.params.h1[0].clone();
        m.params.h1 = vec![row.clone(), row.clone(), row];
        let x = tokens(&[2, 0, 1, 1]);
        let d = loglik_deterministic(&m, &x).unwrap().value;
        assert!((step_particle_objective(&m, &x).unwrap().value - d).abs() <= 1e-12);
        assert!((sequence_particle_bound(&m, &x).unwrap().value - d).abs() <= 1e-12);
        assert!(objective_gap_report(&m, &x).unwrap().gap.abs() <= 1e-12);
    }

    #[test]
    fn particle_permutation_invariance() {
        let m = random_model(ModelConfig::new(VisibleKind::Categorical { vocab: 3 }, 2, 4), 8);
        let mut p = m.clone();
        p.params.h1.reverse();
        let x = tokens(&[1, 0, 2, 2, 1]);
        for f in [step_particle_objective, sequence_particle_bound] {
            let a = f(&m, &x).unwrap().value;
            let b = f(&p, &x).unwrap().value;
            assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn noisy_elbo_contracts() {
        let m = random_model(ModelConfig::new(VisibleKind::Categorical { vocab: 3 }, 2, 1), 2);
        let x = tokens(&[1, 0, 2, 2]);
        let mut rng = RngState::new(0);
        assert!(matches!(noisy_elbo_estimate(&m, &x, &mut rng, 4), Err(Error::Contract(_))));

        let tiny = m.with_noise_sigma(1e-12).unwrap();
        let est = noisy_elbo_estimate(&tiny, &x, &mut rng, 1).unwrap();
        let det = loglik_deterministic(&m, &x).unwrap().value;
        assert!((est.value - det).abs() < 1e-6);

        let noisy = m.with_noise_sigma(0.5).unwrap();
        let a = noisy_elbo_estimate(&noisy, &x, &mut RngState::new(3), 16).unwrap();
        let b = noisy_elbo_estimate(&noisy, &x, &mut RngState::new(3), 16).unwrap();
        assert_eq!(a, b);
        assert!(a.std_error.unwrap() > 0.0);
    }

    #[test]
    fn gaussian_objectives() {
        let mut m = Model::zeros(ModelConfig::new(VisibleKind::Gaussian { dim: 2 }, 2, 1)).unwrap();
        m.params.w_eh = Matrix::identity(2);
        let x = VisibleTrajectory::reals(2, vec![Vector::zeros(2), Vector::zeros(2)]).unwrap();
        let r = loglik_deterministic(&m, &x).unwrap();
        let expect = -2.0 * (2.0 * std::f64::consts::PI).ln();
        assert!((r.value - expect).abs() < 1e-12);
    }

    #[test]
    fn objective_id_round_trip() {
        for o in ObjectiveId::ALL {
            assert_eq!(o.name().parse::<ObjectiveId>().unwrap(), o);
        }
        assert!("bogus".parse::<ObjectiveId>().is_err());
    }

    #[test]
    fn batch_mean() {
        let a = ObjectiveReport::single(vec![-1.0, -2.0]);
        let b = ObjectiveReport::single(vec![-3.0]);
        let m = ObjectiveReport::mean_of(&[a, b]).unwrap();
        assert_eq!(m.value, -3.0);
        assert_eq!(m.n_steps, 3);
        assert_eq!(m.per_step_value(), -2.0);
        assert_eq!(m.per_timestep, vec![-2.0, -2.0]);
    }
}
