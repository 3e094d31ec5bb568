//! Brute-force ground truth on tiny instances.
//!
//! Gaussian hidden noise is replaced by a moment-matched discrete grid, so
//! the marginal likelihood `log Σ_paths p(path)·p(X|path)` and the bound
//! `Σ_paths p(path)·log p(X|path)` become finite sums. The enumeration walks
//! the noise tree depth-first so shared prefixes are computed once.

use crate::error::{Error, Result};
use crate::model::{Model, Observation, VisibleKind, VisibleTrajectory};
use crate::numkit::{log_sum_exp_nonempty, matvec};

/// Discrete stand-in for `p(ε)` applied independently to every hidden
/// coordinate at every transition.
#[derive(Clone, Debug, PartialEq)]
pub struct NoiseGrid {
    /// `(value, log probability)` pairs.
    points: Vec<(f64, f64)>,
}

const MOMENT_TOL: f64 = 1e-12;

impl NoiseGrid {
    /// Validates that the grid is a distribution with zero mean and unit
    /// variance.
    pub fn new(points: Vec<(f64, f64)>) -> Result<Self> {
        let grid = NoiseGrid { points };
        let (total, mean, var) = grid.moments();
        if grid.points.is_empty() || (total - 1.0).abs() > MOMENT_TOL {
            return Err(Error::contract(format!("noise grid probabilities sum to {total}")));
        }
        if mean.abs() > MOMENT_TOL {
            return Err(Error::contract(format!("noise grid mean {mean} is not zero")));
        }
        if (var - 1.0).abs() > MOMENT_TOL {
            return Err(Error::contract(format!("noise grid variance {var} is not one")));
        }
        Ok(grid)
    }

    /// `{−1, +1}` with equal mass.
    pub fn two_point() -> Self {
        NoiseGrid {
            points: vec![(-1.0, 0.5f64.ln()), (1.0, 0.5f64.ln())],
        }
    }

    /// `{−√3, 0, +√3}` with masses `{1/6, 2/3, 1/6}`.
    pub fn three_point() -> Self {
        let r = 3f64.sqrt();
        let tail = (1.0f64 / 6.0).ln();
        NoiseGrid {
            points: vec![(-r, tail), (0.0, (2.0f64 / 3.0).ln()), (r, tail)],
        }
    }

    /// Point mass at zero. The one grid without unit variance: every path is
    /// the noise-free path.
    pub fn degenerate() -> Self {
        NoiseGrid {
            points: vec![(0.0, 0.0)],
        }
    }

    pub fn with_size(n: usize) -> Result<Self> {
        match n {
            1 => Ok(Self::degenerate()),
            2 => Ok(Self::two_point()),
            3 => Ok(Self::three_point()),
            _ => Err(Error::contract(format!("no built-in noise grid with {n} points"))),
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    /// (total mass, mean, variance).
    pub fn moments(&self) -> (f64, f64, f64) {
        let total: f64 = self.points.iter().map(|(_, lp)| lp.exp()).sum();
        let mean: f64 = self.points.iter().map(|(v, lp)| v * lp.exp()).sum();
        let second: f64 = self.points.iter().map(|(v, lp)| v * v * lp.exp()).sum();
        (total, mean, second - mean * mean)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct EnumerationBudget {
    pub max_paths: u128,
}

impl Default for EnumerationBudget {
    fn default() -> Self {
        EnumerationBudget { max_paths: 1_000_000 }
    }
}

impl EnumerationBudget {
    /// `grid^(hidden·(T−1))`, saturating.
    pub fn required_paths(grid_size: usize, hidden_dim: usize, t_len: usize) -> u128 {
        let exponent = hidden_dim.saturating_mul(t_len.saturating_sub(1));
        let mut total: u128 = 1;
        for _ in 0..exponent {
            total = total.saturating_mul(grid_size as u128);
            if total == u128::MAX {
                break;
            }
        }
        total
    }

    pub fn check(&self, grid_size: usize, hidden_dim: usize, t_len: usize) -> Result<u128> {
        let required = Self::required_paths(grid_size, hidden_dim, t_len);
        if required > self.max_paths {
            Err(Error::BudgetExceeded {
                required,
                max: self.max_paths,
            })
        } else {
            Ok(required)
        }
    }
}

/// One enumerated noise path: its log probability and `Σ_t log p(x^t|h^t)`.
#[derive(Clone, Copy, Debug)]
struct PathTerm {
    log_prob: f64,
    log_lik: f64,
}

struct Enumerator<'a> {
    model: &'a Model,
    x: &'a VisibleTrajectory,
    sigma: Vec<f64>,
    /// Per-step joint noise settings across hidden coordinates.
    combos: Vec<(Vec<f64>, f64)>,
    out: Vec<PathTerm>,
}

impl Enumerator<'_> {
    fn walk(&mut self, t: usize, h_prev: &[f64], log_prob: f64, log_lik: f64) -> Result<()> {
        if t == self.x.len() {
            self.out.push(PathTerm { log_prob, log_lik });
            return Ok(());
        }
        let loc = self.model.location(h_prev, self.x.step(t - 1));
        for c in 0..self.combos.len() {
            let (eps, lp) = &self.combos[c];
            let h: Vec<f64> = loc
                .iter()
                .zip(eps)
                .zip(&self.sigma)
                .map(|((m, e), s)| m + s * e)
                .collect();
            let emit = self.model.emission_logprob(&h, self.x.step(t))?;
            let lp = *lp;
            self.walk(t + 1, &h, log_prob + lp, log_lik + emit)?;
        }
        Ok(())
    }
}

fn joint_combos(grid: &NoiseGrid, dims: usize) -> Vec<(Vec<f64>, f64)> {
    let mut combos = vec![(Vec::with_capacity(dims), 0.0)];
    for _ in 0..dims {
        let mut next = Vec::with_capacity(combos.len() * grid.len());
        for (prefix, lp) in &combos {
            for &(v, p) in grid.points() {
                let mut e = prefix.clone();
                e.push(v);
                next.push((e, lp + p));
            }
        }
        combos = next;
    }
    combos
}

fn enumerate(
    model: &Model,
    x: &VisibleTrajectory,
    grid: &NoiseGrid,
    budget: &EnumerationBudget,
) -> Result<Vec<PathTerm>> {
    model.check_sequence(x)?;
    // Deterministic dynamics: every grid point yields the same path.
    let effective = if model.is_stochastic() {
        grid.clone()
    } else {
        NoiseGrid::degenerate()
    };
    let required = budget.check(effective.len(), model.hidden_dim(), x.len())?;
    let h1 = model.params.h1[0].to_vec();
    let first = model.emission_logprob(&h1, x.step(0))?;
    let mut walker = Enumerator {
        model,
        x,
        sigma: model.sigma(),
        combos: joint_combos(&effective, model.hidden_dim()),
        out: Vec::with_capacity(required as usize),
    };
    walker.walk(1, &h1, 0.0, first)?;
    Ok(walker.out)
}

/// `log Σ_paths exp(log p(path) + log p(X|path))` for particle 0.
pub fn enumerate_exact_loglik(
    model: &Model,
    x: &VisibleTrajectory,
    grid: &NoiseGrid,
    budget: &EnumerationBudget,
) -> Result<f64> {
    Ok(exact_pair(model, x, grid, budget)?.0)
}

/// `Σ_paths p(path) · log p(X|path)`, the bound taken exactly.
pub fn enumerate_exact_elbo(
    model: &Model,
    x: &VisibleTrajectory,
    grid: &NoiseGrid,
    budget: &EnumerationBudget,
) -> Result<f64> {
    Ok(exact_pair(model, x, grid, budget)?.1)
}

fn exact_pair(
    model: &Model,
    x: &VisibleTrajectory,
    grid: &NoiseGrid,
    budget: &EnumerationBudget,
) -> Result<(f64, f64)> {
    let terms = enumerate(model, x, grid, budget)?;
    let joint: Vec<f64> = terms.iter().map(|p| p.log_prob + p.log_lik).collect();
    let loglik = log_sum_exp_nonempty(&joint);
    let mut elbo = 0.0;
    for p in &terms {
        elbo += p.log_prob.exp() * p.log_lik;
    }
    Ok((loglik, elbo))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JensenReport {
    pub exact_loglik: f64,
    pub exact_elbo: f64,
    pub gap: f64,
}

pub fn jensen_gap_report(
    model: &Model,
    x: &VisibleTrajectory,
    grid: &NoiseGrid,
    budget: &EnumerationBudget,
) -> Result<JensenReport> {
    let (exact_loglik, exact_elbo) = exact_pair(model, x, grid, budget)?;
    Ok(JensenReport {
        exact_loglik,
        exact_elbo,
        gap: exact_loglik - exact_elbo,
    })
}

/// Non-negative number `mant · 2^exp2` with an unbounded exponent.
#[derive(Clone, Copy, Debug)]
struct Scaled {
    mant: f64,
    exp2: i64,
}

fn pow2(e: i64) -> f64 {
    debug_assert!((-1022..=1023).contains(&e));
    f64::from_bits(((1023 + e) as u64) << 52)
}

impl Scaled {
    const ONE: Scaled = Scaled { mant: 1.0, exp2: 0 };

    /// `exp(y)` without overflow or underflow.
    fn exp(y: f64) -> Self {
        let k = (y / std::f64::consts::LN_2).floor();
        let r = y - k * std::f64::consts::LN_2;
        Scaled {
            mant: r.exp(),
            exp2: k as i64,
        }
        .normalized()
    }

    fn normalized(mut self) -> Self {
        if self.mant == 0.0 {
            return self;
        }
        let e = self.mant.log2().floor() as i64;
        self.mant *= pow2(-e);
        self.exp2 += e;
        self
    }

    fn mul(self, other: Scaled) -> Self {
        Scaled {
            mant: self.mant * other.mant,
            exp2: self.exp2 + other.exp2,
        }
        .normalized()
    }

    fn div_f64(self, d: f64) -> Self {
        Scaled {
            mant: self.mant / d,
            exp2: self.exp2,
        }
        .normalized()
    }
}

fn emission_prob(kind: &VisibleKind, layer: &[f64], x: Observation<'_>) -> Scaled {
    match x {
        Observation::Token(k) => {
            let max = layer.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let denom: f64 = layer.iter().map(|z| (z - max).exp()).sum();
            Scaled::exp(layer[k] - max).div_f64(denom)
        }
        Observation::Real(r) => {
            let sq: f64 = r.iter().zip(layer).map(|(a, b)| (a - b) * (a - b)).sum();
            let norm = (2.0 * std::f64::consts::PI).powf(kind.width() as f64 / 2.0);
            Scaled::exp(-0.5 * sq).div_f64(norm)
        }
    }
}

/// `log((1/L) Σ_l Π_t p(x^t|h_l^t))` by direct products of probabilities
/// carried with an extended exponent. Shares no reduction code with the
/// log-domain particle objectives.
pub fn mixture_exact_loglik(model: &Model, x: &VisibleTrajectory) -> Result<f64> {
    model.check_sequence(x)?;
    if model.is_stochastic() {
        return Err(Error::contract("mixture likelihood is defined for sigma = 0"));
    }
    let p = &model.params;
    let kind = model.config.visible;
    let mut products = Vec::with_capacity(model.n_particles());
    for h1 in &p.h1 {
        let mut h = h1.to_vec();
        let mut prod = Scaled::ONE;
        for t in 0..x.len() {
            if t > 0 {
                let mut a = matvec(&p.w_hh, &h)?.into_inner();
                let xin: Vec<f64> = match x.step(t - 1) {
                    Observation::Token(k) => {
                        let mut v = vec![0.0; kind.width()];
                        v[k] = 1.0;
                        v
                    }
                    Observation::Real(r) => r.to_vec(),
                };
                let b = matvec(&p.w_xh, &xin)?;
                for ((ai, bi), ci) in a.iter_mut().zip(b.iter()).zip(p.b_h.iter()) {
                    *ai = (*ai + bi + ci).tanh();
                }
                h = a;
            }
            let layer: Vec<f64> = matvec(&p.w_eh, &h)?
                .iter()
                .zip(p.b_e.iter())
                .map(|(z, b)| z + b)
                .collect();
            prod = prod.mul(emission_prob(&kind, &layer, x.step(t)));
        }
        products.push(prod);
    }
    let top = products.iter().map(|s| s.exp2).max().expect("at least one particle");
    let mut sum = 0.0;
    for s in &products {
        let shift = s.exp2 - top;
        if shift >= -1022 {
            sum += s.mant * pow2(shift);
        }
    }
    Ok(sum.ln() + top as f64 * std::f64::consts::LN_2 - (products.len() as f64).ln())
}
