//! Initialization, mini-batch optimization, evaluation and checkpoints.
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! b"PRNN0001"                      8-byte magic
//! u32 header_len                   length of the text block
//! header                           `key=value\n` lines, see `Checkpoint::header`
//! f64 × n_params                   parameters in `Parameters::blocks` order
//! f64 × n_moments, f64 × n_moments optimizer first and second moments
//! u32 crc32                        CRC-32 of every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::Write;
use std::path::Path;
use std::str::FromStr;
use std::time::Instant;

use rand::seq::SliceRandom;

use crate::data::Dataset;
use crate::error::{CheckpointError, Error, Result};
use crate::grad::backprop;
use crate::model::{Model, ModelConfig, Parameters, VisibleKind};
use crate::numkit::{fmt_sci, RngState};
use crate::objectives::{self, McNoise, ObjectiveId, ObjectiveReport};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"PRNN0001";
pub const CHECKPOINT_VERSION: u32 = 1;
pub const DEFAULT_CLIP_NORM: f64 = 5.0;
/// Monte-Carlo samples per sequence when evaluating the noisy bound.
pub const EVAL_MC_SAMPLES: usize = 16;

const STREAM_INIT: u64 = 0;
const STREAM_TRAIN: u64 = 1;
const STREAM_EVAL: u64 = 2;

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

pub const METRICS_HEADER: &str = "epoch,split,objective_id,value,per_step_value,sigma,n_particles,seed,wall_ms";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum OptimizerKind {
    Sgd,
    Adam,
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Sgd => "sgd",
            OptimizerKind::Adam => "adam",
        })
    }
}

impl FromStr for OptimizerKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd" => Ok(OptimizerKind::Sgd),
            "adam" => Ok(OptimizerKind::Adam),
            _ => Err(Error::contract(format!("unknown optimizer `{s}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum SigmaSchedule {
    Fixed(f64),
    /// Per-dimension learned scale starting at the given value.
    Learned(f64),
}

impl SigmaSchedule {
    pub fn initial(&self) -> f64 {
        match *self {
            SigmaSchedule::Fixed(s) | SigmaSchedule::Learned(s) => s,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub objective: ObjectiveId,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub seed: u64,
    pub eval_every: usize,
    /// Evaluations without validation improvement before stopping; 0 disables.
    pub patience: usize,
    pub optimizer: OptimizerKind,
    pub sigma: SigmaSchedule,
    /// Noise samples per sequence per step of the noisy bound.
    pub n_mc: usize,
    pub clip_norm: f64,
    /// Record wall-clock milliseconds; off keeps metrics byte-reproducible.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            objective: ObjectiveId::Loglik,
            learning_rate: 0.01,
            batch_size: 32,
            max_epochs: 100,
            seed: 0,
            eval_every: 1,
            patience: 0,
            optimizer: OptimizerKind::Adam,
            sigma: SigmaSchedule::Fixed(0.0),
            n_mc: 1,
            clip_norm: DEFAULT_CLIP_NORM,
            record_wall_time: false,
        }
    }
}

fn config_err(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

impl TrainConfig {
    /// Applies the sigma schedule to `model_cfg` and checks the combination.
    pub fn resolve_model_config(&self, model_cfg: &ModelConfig) -> Result<ModelConfig> {
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return Err(config_err("learning_rate", "must be finite and ≥ 0"));
        }
        if self.batch_size == 0 {
            return Err(config_err("batch_size", "must be ≥ 1"));
        }
        if self.max_epochs == 0 {
            return Err(config_err("max_epochs", "must be ≥ 1"));
        }
        if self.eval_every == 0 {
            return Err(config_err("eval_every", "must be ≥ 1"));
        }
        if self.n_mc == 0 {
            return Err(config_err("n_mc", "must be ≥ 1"));
        }
        if self.clip_norm.is_nan() || self.clip_norm <= 0.0 {
            return Err(config_err("clip_norm", "must be > 0"));
        }
        let mut cfg = model_cfg.clone();
        cfg.noise_sigma = self.sigma.initial();
        cfg.learn_sigma = matches!(self.sigma, SigmaSchedule::Learned(_));
        if !(cfg.noise_sigma >= 0.0 && cfg.noise_sigma.is_finite()) {
            return Err(config_err("sigma", "must be finite and ≥ 0"));
        }
        let stochastic = cfg.noise_sigma > 0.0;
        match self.objective {
            ObjectiveId::NoisyElbo if !stochastic => {
                return Err(config_err("sigma", "objective noisy_elbo requires sigma > 0"))
            }
            ObjectiveId::StepParticle | ObjectiveId::SequenceParticle if stochastic => {
                return Err(config_err(
                    "sigma",
                    format!("objective {} requires sigma = 0", self.objective),
                ))
            }
            _ => {}
        }
        if cfg.learn_sigma && self.objective != ObjectiveId::NoisyElbo {
            return Err(config_err("learn_sigma", "a learned sigma only affects the noisy_elbo objective"));
        }
        cfg.validate().map_err(|e| config_err("model", e.to_string()))?;
        Ok(cfg)
    }
}

/// Uniform(−1/√fan_in, 1/√fan_in) weights, zero biases, initial states
/// uniform in (−1, 1), `log σ = ln σ₀` when learned. Draw order: W_hh, W_xh,
/// W_eh, then the initial-state rows.
pub fn init_params(cfg: &ModelConfig, rng: &mut RngState) -> Result<Model> {
    cfg.validate()?;
    let mut p = Parameters::zeros(cfg);
    let fill = |m: &mut [f64], fan_in: usize, rng: &mut RngState| {
        let s = 1.0 / (fan_in as f64).sqrt();
        for w in m.iter_mut() {
            *w = rng.uniform_range(-s, s);
        }
    };
    fill(p.w_hh.as_mut_slice(), cfg.hidden_dim, rng);
    fill(p.w_xh.as_mut_slice(), cfg.visible.width(), rng);
    fill(p.w_eh.as_mut_slice(), cfg.hidden_dim, rng);
    for row in &mut p.h1 {
        for v in row.iter_mut() {
            *v = rng.uniform_range(-1.0, 1.0);
        }
    }
    if let Some(ls) = &mut p.log_sigma {
        ls.fill(cfg.noise_sigma.ln());
    }
    Model::new(cfg.clone(), p)
}

#[derive(Clone, Debug, PartialEq)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, n: usize) -> Self {
        let moments = if kind == OptimizerKind::Adam { n } else { 0 };
        OptimizerState {
            kind,
            step: 0,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
        }
    }

    /// One descent step on `theta` for the loss gradient `grad`.
    pub fn apply(&mut self, theta: &mut [f64], grad: &[f64], lr: f64) {
        self.step += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for (t, g) in theta.iter_mut().zip(grad) {
                    *t -= lr * g;
                }
            }
            OptimizerKind::Adam => {
                let c1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
                let c2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
                for i in 0..theta.len() {
                    let g = grad[i];
                    self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
                    self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
                    let m_hat = self.m[i] / c1;
                    let v_hat = self.v[i] / c2;
                    theta[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                }
            }
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub model: Model,
    pub optimizer: OptimizerState,
    /// Training stream (shuffles and Monte-Carlo noise).
    pub rng: RngState,
    /// Completed epochs.
    pub epoch: usize,
    pub best_valid: f64,
    pub stale_evals: usize,
    pub seed: u64,
}

impl PartialEq for Checkpoint {
    fn eq(&self, other: &Self) -> bool {
        self.model == other.model
            && self.optimizer == other.optimizer
            && self.rng.seed() == other.rng.seed()
            && self.rng.stream() == other.rng.stream()
            && self.rng.position() == other.rng.position()
            && self.epoch == other.epoch
            && self.best_valid.to_bits() == other.best_valid.to_bits()
            && self.stale_evals == other.stale_evals
            && self.seed == other.seed
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricRow {
    pub epoch: usize,
    pub split: String,
    pub objective: ObjectiveId,
    pub value: f64,
    pub per_step_value: f64,
    pub sigma: f64,
    pub n_particles: usize,
    pub seed: u64,
    pub wall_ms: u64,
}

impl MetricRow {
    pub fn to_csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{}",
            self.epoch,
            self.split,
            self.objective,
            fmt_sci(self.value),
            fmt_sci(self.per_step_value),
            fmt_sci(self.sigma),
            self.n_particles,
            self.seed,
            self.wall_ms
        )
    }
}

pub fn format_metrics(rows: &[MetricRow]) -> String {
    let mut out = String::from(METRICS_HEADER);
    out.push('\n');
    for r in rows {
        out.push_str(&r.to_csv());
        out.push('\n');
    }
    out
}

pub fn write_metrics_csv(rows: &[MetricRow], path: &Path) -> Result<()> {
    fs::write(path, format_metrics(rows))?;
    Ok(())
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters with the best validation objective.
    pub best: Checkpoint,
    pub last: Checkpoint,
    pub metrics: Vec<MetricRow>,
    pub clipped_batches: usize,
}

fn mean_sigma(model: &Model) -> f64 {
    let s = model.sigma();
    s.iter().sum::<f64>() / s.len() as f64
}

/// Dataset mean of `objective`. The noisy bound uses a fixed evaluation
/// stream derived from `seed`, so repeated calls agree exactly.
pub fn evaluate_model(
    model: &Model,
    data: &Dataset,
    objective: ObjectiveId,
    seed: u64,
) -> Result<ObjectiveReport> {
    if data.kind != model.config.visible {
        return Err(Error::contract(format!(
            "dataset kind {:?} does not match model kind {:?}",
            data.kind, model.config.visible
        )));
    }
    objective.check_model(model)?;
    let mut rng = RngState::new(seed).substream(STREAM_EVAL);
    let reports = data
        .sequences
        .iter()
        .map(|x| {
            let noise = (objective == ObjectiveId::NoisyElbo)
                .then(|| McNoise::draw(&mut rng, EVAL_MC_SAMPLES, x.len(), model.hidden_dim()));
            objectives::evaluate(objective, model, x, noise.as_ref())
        })
        .collect::<Result<Vec<_>>>()?;
    ObjectiveReport::mean_of(&reports)
}

pub fn evaluate(ckpt: &Checkpoint, data: &Dataset, objective: ObjectiveId) -> Result<ObjectiveReport> {
    evaluate_model(&ckpt.model, data, objective, ckpt.seed)
}

/// Fresh checkpoint at epoch 0 with seeded initial parameters.
pub fn initial_checkpoint(cfg: &TrainConfig, model_cfg: &ModelConfig) -> Result<Checkpoint> {
    let resolved = cfg.resolve_model_config(model_cfg)?;
    let root = RngState::new(cfg.seed);
    let model = init_params(&resolved, &mut root.substream(STREAM_INIT))?;
    let n = model.params.n_scalars();
    Ok(Checkpoint {
        model,
        optimizer: OptimizerState::new(cfg.optimizer, n),
        rng: root.substream(STREAM_TRAIN),
        epoch: 0,
        best_valid: f64::NEG_INFINITY,
        stale_evals: 0,
        seed: cfg.seed,
    })
}

pub fn train(cfg: &TrainConfig, model_cfg: &ModelConfig, data: &Dataset, valid: &Dataset) -> Result<TrainOutcome> {
    let start = initial_checkpoint(cfg, model_cfg)?;
    resume(cfg, start, data, valid)
}

/// Continues training from `ckpt` until `cfg.max_epochs` or early stop.
pub fn resume(cfg: &TrainConfig, ckpt: Checkpoint, data: &Dataset, valid: &Dataset) -> Result<TrainOutcome> {
    cfg.resolve_model_config(&ckpt.model.config)?;
    cfg.objective.check_model(&ckpt.model)?;
    for d in [data, valid] {
        if d.kind != ckpt.model.config.visible {
            return Err(config_err("train_data", "dataset kind does not match the model"));
        }
    }
    if ckpt.optimizer.kind != cfg.optimizer {
        return Err(config_err("optimizer", "checkpoint was trained with a different optimizer"));
    }
    let clock = Instant::now();
    let wall = |c: &Instant| if cfg.record_wall_time { c.elapsed().as_millis() as u64 } else { 0 };

    let mut state = ckpt;
    let mut best = state.clone();
    let mut metrics = Vec::new();
    let mut clipped_batches = 0;
    let mut theta = state.model.params.to_flat();
    let mut order: Vec<usize> = (0..data.len()).collect();

    while state.epoch < cfg.max_epochs {
        let epoch = state.epoch + 1;
        order.sort_unstable();
        order.shuffle(&mut state.rng);
        let mut clipped_here = 0;
        let mut max_norm: f64 = 0.0;
        for (batch, chunk) in order.chunks(cfg.batch_size).enumerate() {
            let mut sum = vec![0.0; theta.len()];
            let mut value = 0.0;
            for &i in chunk {
                let x = &data.sequences[i];
                let noise = (cfg.objective == ObjectiveId::NoisyElbo)
                    .then(|| McNoise::draw(&mut state.rng, cfg.n_mc, x.len(), state.model.hidden_dim()));
                let g = backprop(cfg.objective, &state.model, x, noise.as_ref()).map_err(|e| match e {
                    Error::NonFinite(_) => Error::NumericAbort {
                        what: "forward pass",
                        epoch,
                        batch,
                        block: "-".into(),
                    },
                    other => other,
                })?;
                value += g.value;
                for (s, v) in sum.iter_mut().zip(g.grads.to_flat()) {
                    *s += v;
                }
            }
            let scale = 1.0 / chunk.len() as f64;
            if !value.is_finite() {
                return Err(Error::NumericAbort {
                    what: "objective",
                    epoch,
                    batch,
                    block: "-".into(),
                });
            }
            if let Some(i) = sum.iter().position(|g| !g.is_finite()) {
                return Err(Error::NumericAbort {
                    what: "gradient",
                    epoch,
                    batch,
                    block: state.model.params.locate(i),
                });
            }
            // ascend the objective: descend its negation
            let mut grad: Vec<f64> = sum.iter().map(|g| -g * scale).collect();
            let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            max_norm = max_norm.max(norm);
            if norm > cfg.clip_norm {
                let shrink = cfg.clip_norm / norm;
                grad.iter_mut().for_each(|g| *g *= shrink);
                clipped_here += 1;
            }
            state.optimizer.apply(&mut theta, &grad, cfg.learning_rate);
            state.model.params.set_flat(&theta)?;
            if let Some(block) = state.model.params.first_non_finite() {
                return Err(Error::NumericAbort {
                    what: "parameter",
                    epoch,
                    batch,
                    block,
                });
            }
        }
        state.epoch = epoch;
        clipped_batches += clipped_here;

        let row = |split: &str, value: f64, per_step: f64, model: &Model| MetricRow {
            epoch,
            split: split.into(),
            objective: cfg.objective,
            value,
            per_step_value: per_step,
            sigma: mean_sigma(model),
            n_particles: model.n_particles(),
            seed: cfg.seed,
            wall_ms: wall(&clock),
        };
        if clipped_here > 0 {
            metrics.push(row("clip", clipped_here as f64, max_norm, &state.model));
        }
        if epoch.is_multiple_of(cfg.eval_every) || epoch == cfg.max_epochs {
            let tr = evaluate_model(&state.model, data, cfg.objective, state.seed)?;
            let va = evaluate_model(&state.model, valid, cfg.objective, state.seed)?;
            metrics.push(row("train", tr.value, tr.per_step_value(), &state.model));
            metrics.push(row("valid", va.value, va.per_step_value(), &state.model));
            if va.value > state.best_valid {
                state.best_valid = va.value;
                state.stale_evals = 0;
                best = state.clone();
            } else {
                state.stale_evals += 1;
            }
            if cfg.patience > 0 && state.stale_evals >= cfg.patience {
                break;
            }
        }
    }
    best.best_valid = state.best_valid;
    Ok(TrainOutcome {
        best,
        last: state,
        metrics,
        clipped_batches,
    })
}

impl Checkpoint {
    fn header(&self, version: u32) -> String {
        let cfg = &self.model.config;
        let kv: Vec<(&str, String)> = vec![
            ("format_version", version.to_string()),
            ("visible", cfg.visible.name().into()),
            ("width", cfg.visible.width().to_string()),
            ("hidden_dim", cfg.hidden_dim.to_string()),
            ("n_particles", cfg.n_particles.to_string()),
            ("noise_sigma", format!("{:?}", cfg.noise_sigma)),
            ("learn_sigma", cfg.learn_sigma.to_string()),
            ("optimizer", self.optimizer.kind.to_string()),
            ("optimizer_step", self.optimizer.step.to_string()),
            ("rng_seed", self.rng.seed().to_string()),
            ("rng_stream", self.rng.stream().to_string()),
            ("rng_position", self.rng.position().to_string()),
            ("epoch", self.epoch.to_string()),
            ("best_valid", format!("{:?}", self.best_valid)),
            ("stale_evals", self.stale_evals.to_string()),
            ("seed", self.seed.to_string()),
            ("n_params", self.model.params.n_scalars().to_string()),
            ("n_moments", self.optimizer.m.len().to_string()),
        ];
        kv.into_iter().map(|(k, v)| format!("{k}={v}\n")).collect()
    }

    fn encode(&self, version: u32) -> Vec<u8> {
        let header = self.header(version);
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(header.as_bytes());
        let reals = self
            .model
            .params
            .to_flat()
            .into_iter()
            .chain(self.optimizer.m.iter().copied())
            .chain(self.optimizer.v.iter().copied());
        for x in reals {
            out.extend_from_slice(&x.to_le_bytes());
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        self.encode(CHECKPOINT_VERSION)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const MIN: usize = 8 + 4 + 4;
        if bytes.len() < MIN {
            return Err(CheckpointError::Truncated {
                expected: MIN,
                actual: bytes.len(),
            }
            .into());
        }
        let body = &bytes[..bytes.len() - 4];
        let stored = u32::from_le_bytes(bytes[bytes.len() - 4..].try_into().unwrap());
        let computed = crc32fast::hash(body);
        if stored != computed {
            if let Some(expected) = expected_len(bytes) {
                if expected > bytes.len() {
                    return Err(CheckpointError::Truncated {
                        expected,
                        actual: bytes.len(),
                    }
                    .into());
                }
            }
            return Err(CheckpointError::Checksum { stored, computed }.into());
        }
        if &bytes[..8] != CHECKPOINT_MAGIC {
            return Err(CheckpointError::BadMagic.into());
        }
        let header_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        let header_end = 12 + header_len;
        if header_end > body.len() {
            return Err(CheckpointError::Truncated {
                expected: header_end + 4,
                actual: bytes.len(),
            }
            .into());
        }
        let text = std::str::from_utf8(&bytes[12..header_end])
            .map_err(|_| CheckpointError::Header("header is not UTF-8".into()))?;
        let kv = parse_kv(text)?;
        let version: u32 = field(&kv, "format_version")?;
        if version != CHECKPOINT_VERSION {
            return Err(CheckpointError::Version(version).into());
        }
        let width: usize = field(&kv, "width")?;
        let visible = match kv.get("visible").map(String::as_str) {
            Some("categorical") => VisibleKind::Categorical { vocab: width },
            Some("gaussian") => VisibleKind::Gaussian { dim: width },
            other => return Err(CheckpointError::Header(format!("bad visible kind {other:?}")).into()),
        };
        let config = ModelConfig {
            visible,
            hidden_dim: field(&kv, "hidden_dim")?,
            n_particles: field(&kv, "n_particles")?,
            noise_sigma: field(&kv, "noise_sigma")?,
            learn_sigma: field(&kv, "learn_sigma")?,
        };
        config
            .validate()
            .map_err(|e| CheckpointError::Header(e.to_string()))?;
        let n_params: usize = field(&kv, "n_params")?;
        let n_moments: usize = field(&kv, "n_moments")?;
        let expected = header_end + 8 * (n_params + 2 * n_moments) + 4;
        if expected != bytes.len() {
            return Err(CheckpointError::Truncated {
                expected,
                actual: bytes.len(),
            }
            .into());
        }
        let reals: Vec<f64> = body[header_end..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        let mut params = Parameters::zeros(&config);
        if params.n_scalars() != n_params {
            return Err(CheckpointError::Header(format!(
                "n_params={n_params} does not match the configuration ({})",
                params.n_scalars()
            ))
            .into());
        }
        params.set_flat(&reals[..n_params])?;
        let model = Model::new(config, params)?;
        let kind: OptimizerKind = kv
            .get("optimizer")
            .ok_or_else(|| CheckpointError::Header("missing optimizer".into()))?
            .parse()
            .map_err(|e: Error| CheckpointError::Header(e.to_string()))?;
        let optimizer = OptimizerState {
            kind,
            step: field(&kv, "optimizer_step")?,
            m: reals[n_params..n_params + n_moments].to_vec(),
            v: reals[n_params + n_moments..].to_vec(),
        };
        Ok(Checkpoint {
            model,
            optimizer,
            rng: RngState::restore(field(&kv, "rng_seed")?, field(&kv, "rng_stream")?, field(&kv, "rng_position")?),
            epoch: field(&kv, "epoch")?,
            best_valid: field(&kv, "best_valid")?,
            stale_evals: field(&kv, "stale_evals")?,
            seed: field(&kv, "seed")?,
        })
    }
}

fn expected_len(bytes: &[u8]) -> Option<usize> {
    let header_len = u32::from_le_bytes(bytes.get(8..12)?.try_into().ok()?) as usize;
    let text = std::str::from_utf8(bytes.get(12..12 + header_len)?).ok()?;
    let kv = parse_kv(text).ok()?;
    let n_params: usize = kv.get("n_params")?.parse().ok()?;
    let n_moments: usize = kv.get("n_moments")?.parse().ok()?;
    Some(12 + header_len + 8 * (n_params + 2 * n_moments) + 4)
}

fn parse_kv(text: &str) -> std::result::Result<BTreeMap<String, String>, CheckpointError> {
    text.lines()
        .map(|l| {
            l.split_once('=')
                .map(|(k, v)| (k.to_string(), v.to_string()))
                .ok_or_else(|| CheckpointError::Header(format!("malformed line `{l}`")))
        })
        .collect()
}

fn field<T: FromStr>(kv: &BTreeMap<String, String>, key: &str) -> std::result::Result<T, CheckpointError> {
    kv.get(key)
        .ok_or_else(|| CheckpointError::Header(format!("missing key `{key}`")))?
        .parse()
        .map_err(|_| CheckpointError::Header(format!("bad value for `{key}`")))
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: &Path) -> Result<()> {
    let mut f = fs::File::create(path)?;
    f.write_all(&ckpt.to_bytes())?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    Checkpoint::from_bytes(&fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{gen_bimodal, BimodalSpec};
    use crate::model::VisibleKind;

    fn toy(n: usize, seed: u64) -> Dataset {
        let spec = BimodalSpec {
            t_len: 6,
            vocab: 3,
            branch_step: 3,
            rho: 0.5,
        };
        gen_bimodal(&spec, n, &mut RngState::new(seed)).unwrap().0
    }

    fn small_cfg() -> (TrainConfig, ModelConfig) {
        let cfg = TrainConfig {
            learning_rate: 0.05,
            batch_size: 4,
            max_epochs: 5,
            ..TrainConfig::default()
        };
        (cfg, ModelConfig::new(VisibleKind::Categorical { vocab: 3 }, 3, 1))
    }

    #[test]
    fn init_properties() {
        let cfg = ModelConfig::new(VisibleKind::Categorical { vocab: 100 }, 100, 4);
        let a = init_params(&cfg, &mut RngState::new(0)).unwrap();
        let b = init_params(&cfg, &mut RngState::new(0)).unwrap();
        assert_eq!(a, b);
        for m in [&a.params.w_hh, &a.params.w_xh, &a.params.w_eh] {
            assert!(m.as_slice().iter().all(|w| w.abs() <= 0.1));
        }
        assert!(a.params.b_h.iter().all(|&v| v == 0.0));
        for i in 0..4 {
            for j in i + 1..4 {
                let d: f64 = a.params.h1[i].iter().zip(a.params.h1[j].iter()).map(|(x, y)| (x - y).abs()).sum();
                assert!(d > 1e-12);
            }
        }
        let mut learned = ModelConfig::new(VisibleKind::Categorical { vocab: 3 }, 2, 1).with_sigma(0.25);
        learned.learn_sigma = true;
        let m = init_params(&learned, &mut RngState::new(1)).unwrap();
        assert!(m.params.log_sigma.unwrap().iter().all(|&v| (v - 0.25f64.ln()).abs() < 1e-15));
    }

    #[test]
    fn adam_first_step_is_sign() {
        let mut opt = OptimizerState::new(OptimizerKind::Adam, 1);
        let mut theta = [0.0];
        opt.apply(&mut theta, &[0.5], 0.1);
        // m̂ = g, v̂ = g², so Δ = −lr·g/(|g| + ε)
        let expect = -0.1 * 0.5 / (0.5 + 1e-8);
        assert!((theta[0] - expect).abs() < 1e-15);
        assert!((theta[0] + 0.1).abs() < 1e-7);

        let mut sgd = OptimizerState::new(OptimizerKind::Sgd, 1);
        let mut theta = [1.0];
        sgd.apply(&mut theta, &[0.5], 0.1);
        assert!((theta[0] - 0.95).abs() < 1e-15);
    }

    #[test]
    fn zero_learning_rate_freezes() {
        let (mut cfg, mcfg) = small_cfg();
        cfg.learning_rate = 0.0;
        let data = toy(12, 0);
        let out = train(&cfg, &mcfg, &data, &toy(4, 1)).unwrap();
        let init = initial_checkpoint(&cfg, &mcfg).unwrap();
        assert_eq!(out.last.model.params, init.model.params);
        let train_vals: Vec<f64> = out.metrics.iter().filter(|r| r.split == "train").map(|r| r.value).collect();
        assert!(train_vals.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn deterministic_metrics_and_final_eval() {
        let (cfg, mcfg) = small_cfg();
        let data = toy(16, 0);
        let valid = toy(6, 1);
        let a = train(&cfg, &mcfg, &data, &valid).unwrap();
        let b = train(&cfg, &mcfg, &data, &valid).unwrap();
        assert_eq!(format_metrics(&a.metrics), format_metrics(&b.metrics));
        let last_train = a.metrics.iter().rev().find(|r| r.split == "train").unwrap();
        let ev = evaluate(&a.last, &data, cfg.objective).unwrap();
        assert!((ev.value - last_train.value).abs() < 1e-9);
        assert_eq!(evaluate(&a.last, &data, cfg.objective).unwrap(), ev);
        let bests: Vec<f64> = a
            .metrics
            .iter()
            .filter(|r| r.split == "valid")
            .scan(f64::NEG_INFINITY, |best, r| {
                *best = best.max(r.value);
                Some(*best)
            })
            .collect();
        assert!(bests.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(a.best.best_valid, *bests.last().unwrap());
    }

    #[test]
    fn evaluation_has_no_side_effects() {
        let (cfg, mcfg) = small_cfg();
        let ckpt = initial_checkpoint(&cfg, &mcfg).unwrap();
        let before = ckpt.to_bytes();
        evaluate(&ckpt, &toy(5, 3), ObjectiveId::Loglik).unwrap();
        assert_eq!(ckpt.to_bytes(), before);
    }

    #[test]
    fn uniform_model_scores_log_v() {
        let (cfg, mut mcfg) = small_cfg();
        mcfg.hidden_dim = 2;
        let mut ckpt = initial_checkpoint(&cfg, &mcfg).unwrap();
        ckpt.model.params.fill(0.0);
        let r = evaluate(&ckpt, &toy(7, 2), ObjectiveId::Loglik).unwrap();
        assert!((r.per_step_value() + 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn kind_mismatch_is_fatal() {
        let (cfg, _) = small_cfg();
        let g = ModelConfig::new(VisibleKind::Gaussian { dim: 2 }, 2, 1);
        let ckpt = initial_checkpoint(&cfg, &g).unwrap();
        assert!(evaluate(&ckpt, &toy(3, 0), ObjectiveId::Loglik).is_err());
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let (mut cfg, mcfg) = small_cfg();
        cfg.max_epochs = 6;
        let data = toy(16, 0);
        let valid = toy(6, 1);
        let full = train(&cfg, &mcfg, &data, &valid).unwrap();

        let mut half_cfg = cfg.clone();
        half_cfg.max_epochs = 3;
        let half = train(&half_cfg, &mcfg, &data, &valid).unwrap();
        let restored = Checkpoint::from_bytes(&half.last.to_bytes()).unwrap();
        let rest = resume(&cfg, restored, &data, &valid).unwrap();

        let mut joined = half.metrics.clone();
        joined.extend(rest.metrics);
        assert_eq!(format_metrics(&joined), format_metrics(&full.metrics));
        assert_eq!(rest.last, full.last);
    }

    #[test]
    fn noisy_training_with_learned_sigma() {
        let (mut cfg, mcfg) = small_cfg();
        cfg.objective = ObjectiveId::NoisyElbo;
        cfg.sigma = SigmaSchedule::Learned(0.3);
        cfg.n_mc = 2;
        let out = train(&cfg, &mcfg, &toy(8, 0), &toy(4, 1)).unwrap();
        assert!(out.last.model.params.log_sigma.is_some());
        let again = train(&cfg, &mcfg, &toy(8, 0), &toy(4, 1)).unwrap();
        assert_eq!(out.last, again.last);
    }

    #[test]
    fn config_contradictions() {
        let (mut cfg, mcfg) = small_cfg();
        cfg.objective = ObjectiveId::NoisyElbo;
        match cfg.resolve_model_config(&mcfg) {
            Err(Error::Config { key, .. }) => assert_eq!(key, "sigma"),
            other => panic!("{other:?}"),
        }
        cfg.objective = ObjectiveId::StepParticle;
        cfg.sigma = SigmaSchedule::Fixed(0.2);
        assert!(cfg.resolve_model_config(&mcfg).is_err());
        cfg.sigma = SigmaSchedule::Fixed(0.0);
        cfg.batch_size = 0;
        assert!(cfg.resolve_model_config(&mcfg).is_err());
    }

    #[test]
    fn checkpoint_round_trip_and_corruption() {
        let (cfg, mut mcfg) = small_cfg();
        mcfg.n_particles = 3;
        let out = train(&cfg, &mcfg, &toy(8, 0), &toy(4, 1)).unwrap();
        let bytes = out.last.to_bytes();
        let back = Checkpoint::from_bytes(&bytes).unwrap();
        assert_eq!(back, out.last);
        for (a, b) in back.model.params.to_flat().iter().zip(out.last.model.params.to_flat()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }

        let mut corrupt = bytes.clone();
        let mid = corrupt.len() - 40;
        corrupt[mid] ^= 0x01;
        assert!(matches!(
            Checkpoint::from_bytes(&corrupt),
            Err(Error::Checkpoint(CheckpointError::Checksum { .. }))
        ));

        let v99 = out.last.encode(99);
        assert!(matches!(
            Checkpoint::from_bytes(&v99),
            Err(Error::Checkpoint(CheckpointError::Version(99)))
        ));

        let cut = &bytes[..bytes.len() - 17];
        assert!(matches!(
            Checkpoint::from_bytes(cut),
            Err(Error::Checkpoint(CheckpointError::Truncated { .. }))
        ));
        assert!(matches!(
            Checkpoint::from_bytes(&bytes[..10]),
            Err(Error::Checkpoint(CheckpointError::Truncated { .. }))
        ));

        let mut magic = bytes.clone();
        magic[0] = b'X';
        let body_len = magic.len() - 4;
        let crc = crc32fast::hash(&magic[..body_len]);
        magic[body_len..].copy_from_slice(&crc.to_le_bytes());
        assert!(matches!(
            Checkpoint::from_bytes(&magic),
            Err(Error::Checkpoint(CheckpointError::BadMagic))
        ));
    }

    #[test]
    fn checkpoint_file_io() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        let (cfg, mcfg) = small_cfg();
        let ckpt = initial_checkpoint(&cfg, &mcfg).unwrap();
        save_checkpoint(&ckpt, &path).unwrap();
        assert_eq!(load_checkpoint(&path).unwrap(), ckpt);
        assert_eq!(&fs::read(&path).unwrap()[..8], CHECKPOINT_MAGIC);
    }
}
