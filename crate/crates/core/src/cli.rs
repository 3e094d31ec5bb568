//! Batch commands behind the `vbrnn` executable.
//!
//! Exit codes: 0 success, 2 usage or configuration error, 3 numeric failure
//! (including a failed verification suite).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::data::{self, BimodalSpec, Dataset, SplitTag};
use crate::error::{Error, Result};
use crate::grad::{backprop, finite_diff, grad_compare, DEFAULT_FD_STEP};
use crate::model::{Model, ModelConfig, VisibleKind, VisibleTrajectory};
use crate::numkit::{fmt_sci, RngState};
use crate::objectives::{self, McNoise, ObjectiveId};
use crate::oracle::{self, EnumerationBudget, NoiseGrid};
use crate::trainer::{self, OptimizerKind, SigmaSchedule, TrainConfig};

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_NUMERIC: i32 = 3;

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const EXACT_TOLERANCE: f64 = 1e-12;
pub const DOMINANCE_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Parser)]
#[command(name = "vbrnn", version, about = "Recurrent sequence models trained as variational bounds")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic token dataset.
    GenData(GenDataArgs),
    /// Train a model from a run configuration file.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Evaluate(EvaluateArgs),
    /// Compare backpropagated gradients with central finite differences.
    GradCheck(GradCheckArgs),
    /// Check objective identities and bounds against exact enumeration.
    BoundCheck(BoundCheckArgs),
    /// Train a grid of (particles, hidden size) cells on one dataset.
    ParticleCompare(ParticleCompareArgs),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum DataKind {
    Bimodal,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_enum, default_value = "bimodal")]
    pub kind: DataKind,
    #[arg(long)]
    pub n: usize,
    #[arg(long)]
    pub t: usize,
    #[arg(long, default_value_t = 3)]
    pub t0: usize,
    #[arg(long)]
    pub rho: f64,
    #[arg(long, default_value_t = 3)]
    pub vocab: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "loglik")]
    pub objective: String,
    /// Also write the CSV report to this file.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GradCheckArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct BoundCheckArgs {
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub trials: u64,
    #[arg(long, default_value_t = 4)]
    pub tmax: usize,
    #[arg(long, default_value_t = 2)]
    pub hdim: usize,
    #[arg(long, default_value_t = 3)]
    pub grid: usize,
    #[arg(long, value_delimiter = ',', default_value = "0,0.1,0.2,0.4")]
    pub sigmas: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value = ".")]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ParticleCompareArgs {
    #[arg(long, value_delimiter = ',', default_value = "1,4")]
    pub particles: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_value = "2,8")]
    pub hdims: Vec<usize>,
    #[arg(long)]
    pub data: PathBuf,
    /// Vocabulary size; inferred from the largest token when omitted.
    #[arg(long)]
    pub vocab: Option<usize>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 60)]
    pub epochs: usize,
    #[arg(long, default_value_t = 0.03)]
    pub lr: f64,
    #[arg(long, default_value_t = 32)]
    pub batch_size: usize,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Status {
    Pass,
    Fail,
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::NumericAbort { .. } | Error::NonFinite(_) => EXIT_NUMERIC,
        _ => EXIT_USAGE,
    }
}

/// Parses `args` (including the program name), runs the command and returns
/// the process exit code. Messages go to `out`, errors to stderr.
pub fn main_with_args<I, T>(args: I, out: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
        }
    };
    match run(cli.command, out) {
        Ok(Status::Pass) => EXIT_OK,
        Ok(Status::Fail) => EXIT_NUMERIC,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(command: Command, out: &mut dyn Write) -> Result<Status> {
    match command {
        Command::GenData(a) => cmd_gen_data(&a, out),
        Command::Train(a) => cmd_train(&a, out),
        Command::Evaluate(a) => cmd_evaluate(&a, out),
        Command::GradCheck(a) => cmd_grad_check(&a, out),
        Command::BoundCheck(a) => cmd_bound_check(&a, out),
        Command::ParticleCompare(a) => cmd_particle_compare(&a, out),
    }
}

fn usage(key: &str, message: impl Into<String>) -> Error {
    Error::Config {
        key: key.into(),
        message: message.into(),
    }
}

pub fn cmd_gen_data(a: &GenDataArgs, out: &mut dyn Write) -> Result<Status> {
    let spec = BimodalSpec {
        t_len: a.t,
        vocab: a.vocab,
        branch_step: a.t0,
        rho: a.rho,
    };
    spec.validate().map_err(|e| usage("gen-data", e.to_string()))?;
    if a.n == 0 {
        return Err(usage("n", "must be ≥ 1"));
    }
    let (d, mode_a) = data::gen_bimodal(&spec, a.n, &mut RngState::new(a.seed))?;
    data::save_sequences(&d, &a.out)?;
    let n = d.len();
    writeln!(
        out,
        "wrote {n} sequences to {}\nmode_a {mode_a} ({})\nmode_b {} ({})",
        a.out.display(),
        fmt_sci(mode_a as f64 / n as f64),
        n - mode_a,
        fmt_sci((n - mode_a) as f64 / n as f64)
    )?;
    Ok(Status::Pass)
}

/// Parsed `key = value` run configuration.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub train_data: PathBuf,
    pub valid_data: PathBuf,
    pub resume: Option<PathBuf>,
}

const CONFIG_KEYS: &[&str] = &[
    "visible",
    "width",
    "hidden_dim",
    "n_particles",
    "objective",
    "sigma",
    "learn_sigma",
    "learning_rate",
    "batch_size",
    "max_epochs",
    "seed",
    "eval_every",
    "patience",
    "optimizer",
    "n_mc",
    "clip_norm",
    "record_wall_time",
    "train_data",
    "valid_data",
    "resume",
];

impl RunConfig {
    /// Relative data paths are resolved against `base`.
    pub fn parse(text: &str, base: &Path) -> Result<Self> {
        let mut kv = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| usage(line, format!("line {}: expected `key = value`", i + 1)))?;
            let (k, v) = (k.trim(), v.trim());
            if !CONFIG_KEYS.contains(&k) {
                return Err(usage(k, "unknown key"));
            }
            if kv.insert(k.to_string(), v.to_string()).is_some() {
                return Err(usage(k, "duplicate key"));
            }
        }
        let d = TrainConfig::default();
        let width: usize = req(&kv, "width")?;
        let visible = match req::<String>(&kv, "visible")?.as_str() {
            "categorical" => VisibleKind::Categorical { vocab: width },
            "gaussian" => VisibleKind::Gaussian { dim: width },
            other => return Err(usage("visible", format!("expected categorical or gaussian, got `{other}`"))),
        };
        let sigma: f64 = opt(&kv, "sigma", 0.0)?;
        let learn_sigma: bool = opt(&kv, "learn_sigma", false)?;
        let objective: ObjectiveId = req::<String>(&kv, "objective")?
            .parse()
            .map_err(|e: Error| usage("objective", e.to_string()))?;
        let optimizer: OptimizerKind = opt::<String>(&kv, "optimizer", "adam".into())?
            .parse()
            .map_err(|e: Error| usage("optimizer", e.to_string()))?;
        let train = TrainConfig {
            objective,
            learning_rate: opt(&kv, "learning_rate", d.learning_rate)?,
            batch_size: opt(&kv, "batch_size", d.batch_size)?,
            max_epochs: opt(&kv, "max_epochs", d.max_epochs)?,
            seed: opt(&kv, "seed", d.seed)?,
            eval_every: opt(&kv, "eval_every", d.eval_every)?,
            patience: opt(&kv, "patience", d.patience)?,
            optimizer,
            sigma: if learn_sigma {
                SigmaSchedule::Learned(sigma)
            } else {
                SigmaSchedule::Fixed(sigma)
            },
            n_mc: opt(&kv, "n_mc", d.n_mc)?,
            clip_norm: opt(&kv, "clip_norm", d.clip_norm)?,
            record_wall_time: opt(&kv, "record_wall_time", d.record_wall_time)?,
        };
        let model = ModelConfig::new(visible, req(&kv, "hidden_dim")?, opt(&kv, "n_particles", 1)?).with_sigma(sigma);
        let resolved = train.resolve_model_config(&model)?;
        let path = |key: &str| -> Result<PathBuf> { Ok(base.join(req::<String>(&kv, key)?)) };
        Ok(RunConfig {
            model: resolved,
            train,
            train_data: path("train_data")?,
            valid_data: path("valid_data")?,
            resume: kv.get("resume").map(|p| base.join(p)),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| usage("config", format!("{}: {e}", path.display())))?;
        Self::parse(&text, path.parent().unwrap_or(Path::new(".")))
    }
}

fn req<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str) -> Result<T> {
    let v = kv.get(key).ok_or_else(|| usage(key, "missing required key"))?;
    v.parse().map_err(|_| usage(key, format!("invalid value `{v}`")))
}

fn opt<T: std::str::FromStr>(kv: &BTreeMap<String, String>, key: &str, default: T) -> Result<T> {
    match kv.get(key) {
        None => Ok(default),
        Some(_) => req(kv, key),
    }
}

pub fn cmd_train(a: &TrainArgs, out: &mut dyn Write) -> Result<Status> {
    let rc = RunConfig::load(&a.config)?;
    let load = |p: &Path, tag: SplitTag| -> Result<Dataset> {
        let mut d = data::load_sequences(p, rc.model.visible)?;
        d.split = tag;
        Ok(d)
    };
    let train_set = load(&rc.train_data, SplitTag::Train)?;
    let valid_set = load(&rc.valid_data, SplitTag::Valid)?;
    let outcome = match &rc.resume {
        Some(p) => trainer::resume(&rc.train, trainer::load_checkpoint(p)?, &train_set, &valid_set)?,
        None => trainer::train(&rc.train, &rc.model, &train_set, &valid_set)?,
    };
    fs::create_dir_all(&a.out)?;
    trainer::save_checkpoint(&outcome.best, &a.out.join("best.ckpt"))?;
    trainer::save_checkpoint(&outcome.last, &a.out.join("final.ckpt"))?;
    trainer::write_metrics_csv(&outcome.metrics, &a.out.join("metrics.csv"))?;
    writeln!(
        out,
        "epochs {}\nbest_valid {}\nclipped_batches {}\nwrote {}",
        outcome.last.epoch,
        fmt_sci(outcome.best.best_valid),
        outcome.clipped_batches,
        a.out.display()
    )?;
    Ok(Status::Pass)
}

pub fn cmd_evaluate(a: &EvaluateArgs, out: &mut dyn Write) -> Result<Status> {
    let objective: ObjectiveId = a.objective.parse().map_err(|e: Error| usage("objective", e.to_string()))?;
    let ckpt = trainer::load_checkpoint(&a.checkpoint)?;
    let d = data::load_sequences(&a.data, ckpt.model.config.visible)?;
    let r = trainer::evaluate(&ckpt, &d, objective)?;
    let text = format!(
        "objective,value,per_step_value,n_sequences,n_steps\n{},{},{},{},{}\n",
        objective,
        fmt_sci(r.value),
        fmt_sci(r.per_step_value()),
        r.n_sequences,
        r.n_steps
    );
    if let Some(p) = &a.out {
        fs::write(p, &text)?;
    }
    out.write_all(text.as_bytes())?;
    Ok(Status::Pass)
}

/// Model with every parameter uniform in `(−scale, scale)`; learned log-scales
/// uniform in `(−1.5, −0.5)`.
pub fn random_model(cfg: ModelConfig, rng: &mut RngState, scale: f64) -> Result<Model> {
    let mut m = Model::zeros(cfg)?;
    for (name, block) in m.params.blocks_mut() {
        for v in block.iter_mut() {
            *v = if name == "log_sigma" {
                rng.uniform_range(-1.5, -0.5)
            } else {
                rng.uniform_range(-scale, scale)
            };
        }
    }
    Ok(m)
}

pub fn random_sequence(kind: &VisibleKind, t_len: usize, rng: &mut RngState) -> VisibleTrajectory {
    match *kind {
        VisibleKind::Categorical { vocab } => VisibleTrajectory::Tokens((0..t_len).map(|_| rng.below(vocab)).collect()),
        VisibleKind::Gaussian { dim } => VisibleTrajectory::Reals {
            dim,
            steps: (0..t_len).map(|_| rng.sample_gauss(dim)).collect(),
        },
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckRow {
    pub trial: u64,
    pub seed: u64,
    pub objective: ObjectiveId,
    pub visible: VisibleKind,
    pub hidden_dim: usize,
    pub n_particles: usize,
    pub t_len: usize,
    pub n_params: usize,
    pub max_rel_err: f64,
    pub worst_param: String,
}

impl GradCheckRow {
    pub fn passed(&self) -> bool {
        self.max_rel_err <= GRAD_TOLERANCE
    }
}

/// One random configuration checked under every objective.
pub fn grad_check_trial(trial: u64, seed: u64) -> Result<Vec<GradCheckRow>> {
    let mut rng = RngState::new(seed);
    let visible = if rng.bernoulli(0.5) {
        VisibleKind::Categorical { vocab: 2 + rng.below(3) }
    } else {
        VisibleKind::Gaussian { dim: 1 + rng.below(2) }
    };
    let hidden = 1 + rng.below(6);
    let t_len = 2 + rng.below(11);
    let x = random_sequence(&visible, t_len, &mut rng);
    let mut rows = Vec::new();
    for objective in ObjectiveId::ALL {
        let mut cfg = ModelConfig::new(visible, hidden, 1);
        match objective {
            ObjectiveId::StepParticle | ObjectiveId::SequenceParticle => cfg.n_particles = 1 + rng.below(4),
            ObjectiveId::NoisyElbo => {
                cfg = cfg.with_sigma(rng.uniform_range(0.1, 0.5));
                cfg.learn_sigma = rng.bernoulli(0.5);
            }
            ObjectiveId::Loglik => {}
        }
        let model = random_model(cfg, &mut rng, 1.0)?;
        let noise = (objective == ObjectiveId::NoisyElbo).then(|| McNoise::draw(&mut rng, 2, t_len, hidden));
        let analytic = backprop(objective, &model, &x, noise.as_ref())?;
        let numeric = finite_diff(objective, &model, &x, noise.as_ref(), DEFAULT_FD_STEP)?;
        let cmp = grad_compare(&analytic, &numeric)?;
        rows.push(GradCheckRow {
            trial,
            seed,
            objective,
            visible,
            hidden_dim: hidden,
            n_particles: model.n_particles(),
            t_len,
            n_params: model.params.n_scalars(),
            max_rel_err: cmp.max_rel_err,
            worst_param: cmp.worst_param,
        });
    }
    Ok(rows)
}

pub fn cmd_grad_check(a: &GradCheckArgs, out: &mut dyn Write) -> Result<Status> {
    let mut csv =
        String::from("trial,seed,objective,visible,width,hidden_dim,n_particles,t_len,n_params,max_rel_err,worst_param,pass\n");
    let mut worst = 0.0f64;
    let mut failures = 0;
    for trial in 0..a.trials {
        for r in grad_check_trial(trial, a.seed.wrapping_add(trial))? {
            worst = worst.max(r.max_rel_err);
            failures += usize::from(!r.passed());
            writeln!(
                csv,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.trial,
                r.seed,
                r.objective,
                r.visible.name(),
                r.visible.width(),
                r.hidden_dim,
                r.n_particles,
                r.t_len,
                r.n_params,
                fmt_sci(r.max_rel_err),
                r.worst_param,
                r.passed()
            )
            .expect("write to string");
        }
    }
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("grad_check.csv"), csv)?;
    writeln!(
        out,
        "grad-check trials {} worst_rel_err {} failures {failures}",
        a.trials,
        fmt_sci(worst)
    )?;
    Ok(if failures == 0 { Status::Pass } else { Status::Fail })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BoundCheck {
    Equivalence,
    Jensen,
    Dominance,
    Mixture,
}

impl BoundCheck {
    pub fn name(&self) -> &'static str {
        match self {
            BoundCheck::Equivalence => "equivalence",
            BoundCheck::Jensen => "jensen",
            BoundCheck::Dominance => "dominance",
            BoundCheck::Mixture => "mixture",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct BoundRow {
    pub trial: u64,
    pub check: BoundCheck,
    pub sigma: f64,
    pub a: f64,
    pub b: f64,
    pub passed: bool,
}

impl BoundRow {
    pub fn delta(&self) -> f64 {
        self.a - self.b
    }
}

/// Toy data used for the noise-free dominance check: bimodal, vocabulary 3,
/// branching at step 2.
pub fn dominance_dataset(t_len: usize, seed: u64) -> Result<Dataset> {
    let spec = BimodalSpec {
        t_len,
        vocab: 3,
        branch_step: 2,
        rho: 0.5,
    };
    Ok(data::gen_bimodal(&spec, 16, &mut RngState::new(seed))?.0)
}

/// Trains a noise-free single-particle model on `data` with full-batch Adam.
pub fn train_noise_free(data: &Dataset, hidden_dim: usize, seed: u64, epochs: usize, lr: f64) -> Result<Model> {
    let cfg = TrainConfig {
        learning_rate: lr,
        batch_size: data.len(),
        max_epochs: epochs,
        eval_every: epochs,
        seed,
        ..TrainConfig::default()
    };
    let mcfg = ModelConfig::new(data.kind, hidden_dim, 1);
    Ok(trainer::train(&cfg, &mcfg, data, data)?.last.model)
}

/// Dataset-summed `(ELBO at σ = 0, exact ELBO at σ)` for each positive σ.
pub fn dominance_margins(
    model: &Model,
    data: &Dataset,
    sigmas: &[f64],
    grid: &NoiseGrid,
    budget: &EnumerationBudget,
) -> Result<Vec<(f64, f64, f64)>> {
    let base: f64 = data
        .sequences
        .iter()
        .map(|x| objectives::variational_objective_deterministic(model, x).map(|r| r.value))
        .sum::<Result<f64>>()?;
    sigmas
        .iter()
        .filter(|&&s| s > 0.0)
        .map(|&s| {
            let noisy = model.with_noise_sigma(s)?;
            let e = data
                .sequences
                .iter()
                .map(|x| oracle::enumerate_exact_elbo(&noisy, x, grid, budget))
                .sum::<Result<f64>>()?;
            Ok((s, base, e))
        })
        .collect()
}

pub fn bound_check_trial(trial: u64, a: &BoundCheckArgs) -> Result<Vec<BoundRow>> {
    let grid = NoiseGrid::with_size(a.grid)?;
    let budget = EnumerationBudget::default();
    let seed = a.seed.wrapping_add(trial);
    let mut rng = RngState::new(seed);
    let kind = VisibleKind::Categorical { vocab: 3 };
    let t_len = 2 + rng.below(a.tmax - 1);
    let x = random_sequence(&kind, t_len, &mut rng);
    let mut rows = Vec::new();

    let model = random_model(ModelConfig::new(kind, a.hdim, 1), &mut rng, 1.0)?;
    let var = objectives::variational_objective_deterministic(&model, &x)?.value;
    let direct = objectives::loglik_deterministic(&model, &x)?.value;
    rows.push(BoundRow {
        trial,
        check: BoundCheck::Equivalence,
        sigma: 0.0,
        a: var,
        b: direct,
        passed: (var - direct).abs() <= EXACT_TOLERANCE,
    });

    for &s in &a.sigmas {
        let m = model.with_noise_sigma(s)?;
        let r = oracle::jensen_gap_report(&m, &x, &grid, &budget)?;
        let ok = if s == 0.0 { r.gap.abs() <= EXACT_TOLERANCE } else { r.gap >= -EXACT_TOLERANCE };
        rows.push(BoundRow {
            trial,
            check: BoundCheck::Jensen,
            sigma: s,
            a: r.exact_loglik,
            b: r.exact_elbo,
            passed: ok,
        });
    }

    let toy = dominance_dataset(a.tmax, seed)?;
    let trained = train_noise_free(&toy, a.hdim, seed, 400, 0.05)?;
    for (s, base, e) in dominance_margins(&trained, &toy, &a.sigmas, &grid, &budget)? {
        rows.push(BoundRow {
            trial,
            check: BoundCheck::Dominance,
            sigma: s,
            a: base,
            b: e,
            passed: base - e >= -DOMINANCE_TOLERANCE,
        });
    }

    let l = 2 + (trial % 3) as usize;
    let multi = random_model(ModelConfig::new(kind, a.hdim, l), &mut rng, 1.0)?;
    let seq = objectives::sequence_particle_bound(&multi, &x)?.value;
    let mix = oracle::mixture_exact_loglik(&multi, &x)?;
    rows.push(BoundRow {
        trial,
        check: BoundCheck::Mixture,
        sigma: 0.0,
        a: seq,
        b: mix,
        passed: (seq - mix).abs() <= EXACT_TOLERANCE,
    });
    Ok(rows)
}

pub fn cmd_bound_check(a: &BoundCheckArgs, out: &mut dyn Write) -> Result<Status> {
    if a.tmax < 3 {
        return Err(usage("tmax", "must be ≥ 3"));
    }
    if a.hdim == 0 {
        return Err(usage("hdim", "must be ≥ 1"));
    }
    if a.sigmas.is_empty() || a.sigmas.iter().any(|s| !(s.is_finite() && *s >= 0.0)) {
        return Err(usage("sigmas", "expected a list of finite values ≥ 0"));
    }
    NoiseGrid::with_size(a.grid).map_err(|e| usage("grid", e.to_string()))?;
    EnumerationBudget::default().check(a.grid, a.hdim, a.tmax)?;

    let mut csv = String::from("trial,check,sigma,value_a,value_b,delta,pass\n");
    let mut failures = 0;
    let mut worst_equiv = 0.0f64;
    for trial in 0..a.trials {
        for r in bound_check_trial(trial, a)? {
            failures += usize::from(!r.passed);
            if r.check == BoundCheck::Equivalence {
                worst_equiv = worst_equiv.max(r.delta().abs());
            }
            writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                r.trial,
                r.check.name(),
                fmt_sci(r.sigma),
                fmt_sci(r.a),
                fmt_sci(r.b),
                fmt_sci(r.delta()),
                r.passed
            )
            .expect("write to string");
        }
    }
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("bound_check.csv"), csv)?;
    writeln!(
        out,
        "bound-check trials {} max_equivalence_delta {} failures {failures}",
        a.trials,
        fmt_sci(worst_equiv)
    )?;
    Ok(if failures == 0 { Status::Pass } else { Status::Fail })
}

#[derive(Clone, Debug, PartialEq)]
pub struct CellResult {
    pub n_particles: usize,
    pub hidden_dim: usize,
    /// Held-out per-step values.
    pub step_objective: f64,
    pub sequence_bound: f64,
}

impl CellResult {
    pub fn gap(&self) -> f64 {
        self.step_objective - self.sequence_bound
    }
}

/// Train/valid/test split used by the particle comparison.
pub fn compare_split(d: &Dataset, seed: u64) -> Result<(Dataset, Dataset, Dataset)> {
    data::split(d, (0.7, 0.15, 0.15), &mut RngState::new(seed).substream(0x5eed))
}

pub fn compare_train_config(seed: u64, epochs: usize, lr: f64, batch_size: usize) -> TrainConfig {
    TrainConfig {
        objective: ObjectiveId::StepParticle,
        learning_rate: lr,
        batch_size,
        max_epochs: epochs,
        seed,
        ..TrainConfig::default()
    }
}

/// Trains one cell with the step-form objective and scores the
/// best-validation checkpoint on `test`.
pub fn train_cell(
    cfg: &TrainConfig,
    n_particles: usize,
    hidden_dim: usize,
    splits: &(Dataset, Dataset, Dataset),
) -> Result<CellResult> {
    let (tr, va, te) = splits;
    let mcfg = ModelConfig::new(tr.kind, hidden_dim, n_particles);
    let outcome = trainer::train(cfg, &mcfg, tr, va)?;
    let step = trainer::evaluate(&outcome.best, te, ObjectiveId::StepParticle)?;
    let seq = trainer::evaluate(&outcome.best, te, ObjectiveId::SequenceParticle)?;
    Ok(CellResult {
        n_particles,
        hidden_dim,
        step_objective: step.per_step_value(),
        sequence_bound: seq.per_step_value(),
    })
}

fn load_tokens_infer(path: &Path, vocab: Option<usize>) -> Result<Dataset> {
    if let Some(v) = vocab {
        return data::load_sequences(path, VisibleKind::Categorical { vocab: v });
    }
    let wide = data::load_sequences(path, VisibleKind::Categorical { vocab: usize::MAX })?;
    let max = wide
        .sequences
        .iter()
        .flat_map(|s| match s {
            VisibleTrajectory::Tokens(t) => t.clone(),
            VisibleTrajectory::Reals { .. } => Vec::new(),
        })
        .max()
        .unwrap_or(0);
    Dataset::new(wide.sequences, VisibleKind::Categorical { vocab: (max + 1).max(2) }, SplitTag::Train)
}

pub fn cmd_particle_compare(a: &ParticleCompareArgs, out: &mut dyn Write) -> Result<Status> {
    if a.particles.is_empty() || a.particles.contains(&0) {
        return Err(usage("particles", "expected a list of values ≥ 1"));
    }
    if a.hdims.is_empty() || a.hdims.contains(&0) {
        return Err(usage("hdims", "expected a list of values ≥ 1"));
    }
    let d = load_tokens_infer(&a.data, a.vocab)?;
    let splits = compare_split(&d, a.seed)?;
    let cfg = compare_train_config(a.seed, a.epochs, a.lr, a.batch_size);
    let mut csv = String::from("n_particles,hidden_dim,seed,epochs,step_objective,sequence_bound,gap\n");
    for &h in &a.hdims {
        for &l in &a.particles {
            let c = train_cell(&cfg, l, h, &splits)?;
            writeln!(
                csv,
                "{},{},{},{},{},{},{}",
                l,
                h,
                a.seed,
                a.epochs,
                fmt_sci(c.step_objective),
                fmt_sci(c.sequence_bound),
                fmt_sci(c.gap())
            )
            .expect("write to string");
        }
    }
    fs::create_dir_all(&a.out)?;
    fs::write(a.out.join("particle_compare.csv"), &csv)?;
    out.write_all(csv.as_bytes())?;
    Ok(Status::Pass)
}
