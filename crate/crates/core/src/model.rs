//! The recurrent generative model.
//!
//! Hidden dynamics are `h^t = tanh(W_hh·h^{t−1} + W_xh·enc(x^{t−1}) + b_h) + σ⊙ε^t`
//! for `t ≥ 2`, with the initial state `h¹` a learned parameter (one row per
//! particle). The tanh output is the location of the transition; noise is
//! added after the nonlinearity. Emissions are categorical (softmax of
//! `W_eh·h + b_e`) or unit-covariance Gaussian with mean `W_eh·h + b_e`.

use crate::error::{Error, Result};
use crate::numkit::{log_softmax, Matrix, RngState, Vector};

const HALF_LN_2PI: f64 = 0.918_938_533_204_672_7;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VisibleKind {
    Categorical { vocab: usize },
    Gaussian { dim: usize },
}

impl VisibleKind {
    /// Width of `enc(x)` and of the emission layer.
    pub fn width(&self) -> usize {
        match *self {
            VisibleKind::Categorical { vocab } => vocab,
            VisibleKind::Gaussian { dim } => dim,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            VisibleKind::Categorical { .. } => "categorical",
            VisibleKind::Gaussian { .. } => "gaussian",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    pub visible: VisibleKind,
    pub hidden_dim: usize,
    pub n_particles: usize,
    /// Shared noise scale; 0 means deterministic dynamics.
    pub noise_sigma: f64,
    /// When set, `Parameters::log_sigma` holds a learned per-dimension scale
    /// that overrides `noise_sigma`.
    pub learn_sigma: bool,
}

impl ModelConfig {
    pub fn new(visible: VisibleKind, hidden_dim: usize, n_particles: usize) -> Self {
        ModelConfig {
            visible,
            hidden_dim,
            n_particles,
            noise_sigma: 0.0,
            learn_sigma: false,
        }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Self {
        self.noise_sigma = sigma;
        self
    }

    pub fn validate(&self) -> Result<()> {
        match self.visible {
            VisibleKind::Categorical { vocab } if vocab < 2 => {
                return Err(Error::contract(format!("vocabulary size {vocab} < 2")))
            }
            VisibleKind::Gaussian { dim } if dim < 1 => {
                return Err(Error::contract("gaussian visible dimension must be ≥ 1"))
            }
            _ => {}
        }
        if self.hidden_dim < 1 {
            return Err(Error::contract("hidden_dim must be ≥ 1"));
        }
        if self.n_particles < 1 {
            return Err(Error::contract("n_particles must be ≥ 1"));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::contract(format!("noise sigma {} must be finite and ≥ 0", self.noise_sigma)));
        }
        if self.learn_sigma && self.noise_sigma <= 0.0 {
            return Err(Error::contract("a learned sigma needs a positive initial value"));
        }
        Ok(())
    }
}

/// All trainable quantities. Also used as gradient storage, since gradients
/// have exactly the same shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Parameters {
    pub w_hh: Matrix,
    pub w_xh: Matrix,
    pub b_h: Vector,
    /// Learned initial hidden state, one per particle.
    pub h1: Vec<Vector>,
    pub w_eh: Matrix,
    pub b_e: Vector,
    pub log_sigma: Option<Vector>,
}

impl Parameters {
    pub fn zeros(cfg: &ModelConfig) -> Self {
        let h = cfg.hidden_dim;
        let v = cfg.visible.width();
        Parameters {
            w_hh: Matrix::zeros(h, h),
            w_xh: Matrix::zeros(h, v),
            b_h: Vector::zeros(h),
            h1: (0..cfg.n_particles).map(|_| Vector::zeros(h)).collect(),
            w_eh: Matrix::zeros(v, h),
            b_e: Vector::zeros(v),
            log_sigma: cfg.learn_sigma.then(|| Vector::zeros(h)),
        }
    }

    pub fn check_shapes(&self, cfg: &ModelConfig) -> Result<()> {
        let h = cfg.hidden_dim;
        let v = cfg.visible.width();
        Error::check_dim("W_hh rows", h, self.w_hh.rows())?;
        Error::check_dim("W_hh cols", h, self.w_hh.cols())?;
        Error::check_dim("W_xh rows", h, self.w_xh.rows())?;
        Error::check_dim("W_xh cols", v, self.w_xh.cols())?;
        Error::check_dim("b_h", h, self.b_h.len())?;
        Error::check_dim("h1 particles", cfg.n_particles, self.h1.len())?;
        for row in &self.h1 {
            Error::check_dim("h1 row", h, row.len())?;
        }
        Error::check_dim("W_eh rows", v, self.w_eh.rows())?;
        Error::check_dim("W_eh cols", h, self.w_eh.cols())?;
        Error::check_dim("b_e", v, self.b_e.len())?;
        match (&self.log_sigma, cfg.learn_sigma) {
            (Some(s), true) => Error::check_dim("log_sigma", h, s.len())?,
            (None, false) => {}
            _ => return Err(Error::contract("log_sigma presence disagrees with learn_sigma")),
        }
        Ok(())
    }

    /// Named views of every parameter block in canonical order.
    pub fn blocks(&self) -> Vec<(String, &[f64])> {
        let mut out: Vec<(String, &[f64])> = vec![
            ("w_hh".into(), self.w_hh.as_slice()),
            ("w_xh".into(), self.w_xh.as_slice()),
            ("b_h".into(), self.b_h.as_slice()),
        ];
        for (l, row) in self.h1.iter().enumerate() {
            out.push((format!("h1[{l}]"), row.as_slice()));
        }
        out.push(("w_eh".into(), self.w_eh.as_slice()));
        out.push(("b_e".into(), self.b_e.as_slice()));
        if let Some(s) = &self.log_sigma {
            out.push(("log_sigma".into(), s.as_slice()));
        }
        out
    }

    pub fn blocks_mut(&mut self) -> Vec<(String, &mut [f64])> {
        let mut out: Vec<(String, &mut [f64])> = vec![
            ("w_hh".into(), self.w_hh.as_mut_slice()),
            ("w_xh".into(), self.w_xh.as_mut_slice()),
            ("b_h".into(), &mut self.b_h[..]),
        ];
        for (l, row) in self.h1.iter_mut().enumerate() {
            out.push((format!("h1[{l}]"), &mut row[..]));
        }
        out.push(("w_eh".into(), self.w_eh.as_mut_slice()));
        out.push(("b_e".into(), &mut self.b_e[..]));
        if let Some(s) = &mut self.log_sigma {
            out.push(("log_sigma".into(), &mut s[..]));
        }
        out
    }

    pub fn n_scalars(&self) -> usize {
        self.blocks().iter().map(|(_, b)| b.len()).sum()
    }

    pub fn to_flat(&self) -> Vec<f64> {
        self.blocks().into_iter().flat_map(|(_, b)| b.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, flat: &[f64]) -> Result<()> {
        Error::check_dim("flat parameter vector", self.n_scalars(), flat.len())?;
        let mut offset = 0;
        for (_, block) in self.blocks_mut() {
            block.copy_from_slice(&flat[offset..offset + block.len()]);
            offset += block.len();
        }
        Ok(())
    }

    /// Name of the block holding flat index `i`, e.g. `w_hh[3]`.
    pub fn locate(&self, mut i: usize) -> String {
        for (name, block) in self.blocks() {
            if i < block.len() {
                return format!("{name}[{i}]");
            }
            i -= block.len();
        }
        "<out of range>".into()
    }

    /// First block containing a non-finite entry.
    pub fn first_non_finite(&self) -> Option<String> {
        self.blocks()
            .into_iter()
            .find(|(_, b)| b.iter().any(|x| !x.is_finite()))
            .map(|(n, _)| n)
    }

    pub fn fill(&mut self, value: f64) {
        for (_, b) in self.blocks_mut() {
            b.fill(value);
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Observation<'a> {
    Token(usize),
    Real(&'a [f64]),
}

/// One observed sequence `x¹…x^T`, `T ≥ 1`.
#[derive(Clone, Debug, PartialEq)]
pub enum VisibleTrajectory {
    Tokens(Vec<usize>),
    Reals { dim: usize, steps: Vec<Vector> },
}

impl VisibleTrajectory {
    pub fn tokens(tokens: Vec<usize>) -> Result<Self> {
        if tokens.is_empty() {
            return Err(Error::EmptyInput("visible trajectory"));
        }
        Ok(VisibleTrajectory::Tokens(tokens))
    }

    pub fn reals(dim: usize, steps: Vec<Vector>) -> Result<Self> {
        if steps.is_empty() {
            return Err(Error::EmptyInput("visible trajectory"));
        }
        for s in &steps {
            Error::check_dim("visible step", dim, s.len())?;
        }
        Ok(VisibleTrajectory::Reals { dim, steps })
    }

    pub fn len(&self) -> usize {
        match self {
            VisibleTrajectory::Tokens(t) => t.len(),
            VisibleTrajectory::Reals { steps, .. } => steps.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn step(&self, t: usize) -> Observation<'_> {
        match self {
            VisibleTrajectory::Tokens(tok) => Observation::Token(tok[t]),
            VisibleTrajectory::Reals { steps, .. } => Observation::Real(&steps[t]),
        }
    }

    pub fn check_kind(&self, kind: &VisibleKind) -> Result<()> {
        match (self, kind) {
            (VisibleTrajectory::Tokens(tok), VisibleKind::Categorical { vocab }) => {
                match tok.iter().find(|&&x| x >= *vocab) {
                    Some(&token) => Err(Error::TokenOutOfRange { token, vocab: *vocab }),
                    None => Ok(()),
                }
            }
            (VisibleTrajectory::Reals { dim, .. }, VisibleKind::Gaussian { dim: d }) => {
                Error::check_dim("visible dimension", *d, *dim)
            }
            _ => Err(Error::contract(format!(
                "{} model given {} data",
                kind.name(),
                match self {
                    VisibleTrajectory::Tokens(_) => "token",
                    VisibleTrajectory::Reals { .. } => "real-valued",
                }
            ))),
        }
    }
}

/// `enc(x)`: one-hot for tokens, identity for real vectors.
pub fn encode(kind: &VisibleKind, x: Observation<'_>) -> Vec<f64> {
    match (kind, x) {
        (VisibleKind::Categorical { vocab }, Observation::Token(k)) => {
            let mut v = vec![0.0; *vocab];
            v[k] = 1.0;
            v
        }
        (_, Observation::Real(r)) => r.to_vec(),
        (VisibleKind::Gaussian { .. }, Observation::Token(_)) => {
            panic!("token observation for a gaussian model")
        }
    }
}

/// One particle's hidden path.
#[derive(Clone, Debug, PartialEq)]
pub struct HiddenPath {
    /// `h¹…h^T`.
    pub states: Vec<Vector>,
    /// `ε²…ε^T`; empty for deterministic unrolls.
    pub noise: Vec<Vector>,
    /// Transition locations `tanh(·)` for `t = 2…T`.
    pub(crate) locations: Vec<Vector>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HiddenTrajectories {
    pub paths: Vec<HiddenPath>,
}

/// Parameters together with the configuration they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: Parameters,
}

impl Model {
    pub fn new(config: ModelConfig, params: Parameters) -> Result<Self> {
        config.validate()?;
        params.check_shapes(&config)?;
        if let Some(block) = params.first_non_finite() {
            return Err(Error::Contract(format!("non-finite parameters in {block}")));
        }
        Ok(Model { config, params })
    }

    pub fn zeros(config: ModelConfig) -> Result<Self> {
        let params = Parameters::zeros(&config);
        Model::new(config, params)
    }

    pub fn hidden_dim(&self) -> usize {
        self.config.hidden_dim
    }

    pub fn n_particles(&self) -> usize {
        self.params.h1.len()
    }

    /// Effective per-dimension noise scale.
    pub fn sigma(&self) -> Vec<f64> {
        match &self.params.log_sigma {
            Some(ls) => ls.iter().map(|x| x.exp()).collect(),
            None => vec![self.config.noise_sigma; self.config.hidden_dim],
        }
    }

    pub fn is_stochastic(&self) -> bool {
        self.sigma().iter().any(|&s| s > 0.0)
    }

    /// Replace the shared noise scale; leaves learned scales untouched.
    pub fn with_noise_sigma(&self, sigma: f64) -> Result<Model> {
        let mut config = self.config.clone();
        config.noise_sigma = sigma;
        Model::new(config, self.params.clone())
    }

    pub fn check_sequence(&self, x: &VisibleTrajectory) -> Result<()> {
        x.check_kind(&self.config.visible)
    }

    fn check_particle(&self, particle: usize) -> Result<()> {
        if particle < self.n_particles() {
            Ok(())
        } else {
            Err(Error::contract(format!(
                "particle {particle} out of range for {} particles",
                self.n_particles()
            )))
        }
    }

    /// Transition location `tanh(W_hh·h + W_xh·enc(x) + b_h)`.
    pub(crate) fn location(&self, h_prev: &[f64], x_prev: Observation<'_>) -> Vec<f64> {
        let p = &self.params;
        let mut a = p.b_h.to_vec();
        p.w_hh.matvec_acc(h_prev, &mut a);
        match x_prev {
            Observation::Token(k) => {
                for (ai, w) in a.iter_mut().zip(p.w_xh.column(k)) {
                    *ai += w;
                }
            }
            Observation::Real(r) => p.w_xh.matvec_acc(r, &mut a),
        }
        a.iter_mut().for_each(|v| *v = v.tanh());
        a
    }

    /// Emission layer output: logits (categorical) or mean (gaussian).
    pub(crate) fn emission_layer(&self, h: &[f64]) -> Vec<f64> {
        let mut z = self.params.b_e.to_vec();
        self.params.w_eh.matvec_acc(h, &mut z);
        z
    }

    /// `log p(x|z)` for an emission-layer output `z`, plus `∂/∂z`.
    pub(crate) fn emission_from_layer(&self, z: &[f64], x: Observation<'_>) -> Result<(f64, Vec<f64>)> {
        match x {
            Observation::Token(k) => {
                let lp = log_softmax(z)?;
                let mut dz: Vec<f64> = lp.iter().map(|v| -v.exp()).collect();
                dz[k] += 1.0;
                Ok((lp[k], dz))
            }
            Observation::Real(r) => {
                let dz: Vec<f64> = r.iter().zip(z).map(|(xi, mi)| xi - mi).collect();
                let sq: f64 = dz.iter().map(|d| d * d).sum();
                let lp = -(r.len() as f64) * HALF_LN_2PI - 0.5 * sq;
                if lp.is_finite() {
                    Ok((lp, dz))
                } else {
                    Err(Error::NonFinite("emission log-density"))
                }
            }
        }
    }

    fn check_observation(&self, x: Observation<'_>) -> Result<()> {
        match (x, self.config.visible) {
            (Observation::Token(k), VisibleKind::Categorical { vocab }) => {
                if k < vocab {
                    Ok(())
                } else {
                    Err(Error::TokenOutOfRange { token: k, vocab })
                }
            }
            (Observation::Real(r), VisibleKind::Gaussian { dim }) => {
                Error::check_dim("observation", dim, r.len())
            }
            _ => Err(Error::contract("observation kind does not match the model")),
        }
    }

    /// One hidden update. `eps` must be given exactly when the dynamics are
    /// stochastic.
    pub fn transition_step(
        &self,
        h_prev: &[f64],
        x_prev: Observation<'_>,
        eps: Option<&[f64]>,
    ) -> Result<Vector> {
        Error::check_dim("h_prev", self.hidden_dim(), h_prev.len())?;
        self.check_observation(x_prev)?;
        let mut h = self.location(h_prev, x_prev);
        match (eps, self.is_stochastic()) {
            (Some(e), true) => {
                Error::check_dim("eps", self.hidden_dim(), e.len())?;
                for ((hi, ei), si) in h.iter_mut().zip(e).zip(self.sigma()) {
                    *hi += si * ei;
                }
            }
            (None, false) => {}
            (Some(_), false) => return Err(Error::contract("noise given for deterministic dynamics")),
            (None, true) => return Err(Error::contract("stochastic dynamics need a noise draw")),
        }
        Vector::new(h)
    }

    pub fn emission_logprob(&self, h: &[f64], x: Observation<'_>) -> Result<f64> {
        Error::check_dim("hidden state", self.hidden_dim(), h.len())?;
        self.check_observation(x)?;
        Ok(self.emission_from_layer(&self.emission_layer(h), x)?.0)
    }

    fn unroll_inner(&self, x: &VisibleTrajectory, particle: usize, noise: &[Vector]) -> Result<HiddenPath> {
        let t_len = x.len();
        let sigma = self.sigma();
        let mut states = Vec::with_capacity(t_len);
        let mut locations = Vec::with_capacity(t_len.saturating_sub(1));
        states.push(self.params.h1[particle].clone());
        for t in 1..t_len {
            let loc = self.location(&states[t - 1], x.step(t - 1));
            let mut h = loc.clone();
            if let Some(eps) = noise.get(t - 1) {
                for ((hi, ei), si) in h.iter_mut().zip(eps.iter()).zip(&sigma) {
                    *hi += si * ei;
                }
            }
            locations.push(Vector::new(loc)?);
            states.push(Vector::new(h)?);
        }
        Ok(HiddenPath {
            states,
            noise: noise.to_vec(),
            locations,
        })
    }

    /// `F(X)` for one particle; noise scale is ignored.
    pub fn unroll_deterministic(&self, x: &VisibleTrajectory, particle: usize) -> Result<HiddenPath> {
        self.check_sequence(x)?;
        self.check_particle(particle)?;
        self.unroll_inner(x, particle, &[])
    }

    /// Non-centered noisy unroll with a fresh `ε^t ~ N(0, I)` per step.
    pub fn unroll_noisy(
        &self,
        x: &VisibleTrajectory,
        rng: &mut RngState,
        particle: usize,
    ) -> Result<HiddenPath> {
        if !self.is_stochastic() {
            return Err(Error::contract(
                "noisy unroll with sigma = 0; use the deterministic unroll",
            ));
        }
        self.check_sequence(x)?;
        self.check_particle(particle)?;
        let noise = draw_noise(rng, x.len(), self.hidden_dim());
        self.unroll_inner(x, particle, &noise)
    }

    /// Replays a recorded noise sequence (`T − 1` vectors).
    pub fn unroll_with_noise(
        &self,
        x: &VisibleTrajectory,
        particle: usize,
        noise: &[Vector],
    ) -> Result<HiddenPath> {
        self.check_sequence(x)?;
        self.check_particle(particle)?;
        Error::check_dim("noise record length", x.len() - 1, noise.len())?;
        for e in noise {
            Error::check_dim("noise vector", self.hidden_dim(), e.len())?;
        }
        self.unroll_inner(x, particle, noise)
    }

    pub fn unroll_all_particles(&self, x: &VisibleTrajectory) -> Result<HiddenTrajectories> {
        self.check_sequence(x)?;
        Ok(HiddenTrajectories {
            paths: (0..self.n_particles())
                .map(|l| self.unroll_inner(x, l, &[]))
                .collect::<Result<_>>()?,
        })
    }
}

/// `T − 1` standard-normal vectors for the transitions of a length-`T` sequence.
pub fn draw_noise(rng: &mut RngState, t_len: usize, hidden_dim: usize) -> Vec<Vector> {
    (1..t_len).map(|_| rng.sample_gauss(hidden_dim)).collect()
}
