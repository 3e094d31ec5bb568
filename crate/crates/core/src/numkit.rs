//! Dense double-precision kernels: vectors, row-major matrices, log-domain
//! reductions and a reproducible random stream.
//!
//! Every reduction accumulates left to right so results are bit-stable
//! across runs and platforms with IEEE-754 doubles.

use std::ops::{Deref, DerefMut};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

#[derive(Clone, Debug, PartialEq)]
pub struct Vector(Vec<f64>);

impl Vector {
    pub fn new(data: Vec<f64>) -> Result<Self> {
        if data.iter().all(|x| x.is_finite()) {
            Ok(Vector(data))
        } else {
            Err(Error::NonFinite("vector"))
        }
    }

    pub fn zeros(len: usize) -> Self {
        Vector(vec![0.0; len])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

impl Deref for Vector {
    type Target = [f64];
    fn deref(&self) -> &[f64] {
        &self.0
    }
}

impl DerefMut for Vector {
    fn deref_mut(&mut self) -> &mut [f64] {
        &mut self.0
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Error::check_dim("matrix storage", rows * cols, data.len())?;
        if !data.iter().all(|x| x.is_finite()) {
            return Err(Error::NonFinite("matrix"));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Matrix::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, value: f64) {
        self.data[r * self.cols + c] = value;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> impl Iterator<Item = f64> + '_ {
        (0..self.rows).map(move |r| self.data[r * self.cols + c])
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    /// `out += self · v` without shape checks; callers validate once up front.
    pub(crate) fn matvec_acc(&self, v: &[f64], out: &mut [f64]) {
        for (r, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (w, x) in self.row(r).iter().zip(v) {
                acc += w * x;
            }
            *o += acc;
        }
    }

    /// `out += selfᵀ · v`.
    pub(crate) fn matvec_t_acc(&self, v: &[f64], out: &mut [f64]) {
        for (c, o) in out.iter_mut().enumerate() {
            let mut acc = 0.0;
            for (r, x) in v.iter().enumerate() {
                acc += self.data[r * self.cols + c] * x;
            }
            *o += acc;
        }
    }

    /// `self += scale · a ⊗ b`.
    pub(crate) fn add_outer(&mut self, scale: f64, a: &[f64], b: &[f64]) {
        for (r, &ar) in a.iter().enumerate() {
            let row = &mut self.data[r * self.cols..(r + 1) * self.cols];
            for (w, &bc) in row.iter_mut().zip(b) {
                *w += scale * ar * bc;
            }
        }
    }
}

pub fn matvec(m: &Matrix, v: &[f64]) -> Result<Vector> {
    Error::check_dim("matvec", m.cols, v.len())?;
    let mut out = vec![0.0; m.rows];
    m.matvec_acc(v, &mut out);
    Ok(Vector(out))
}

/// `log Σ exp(v_i)`, shifted by the maximum so inputs up to ±1e6 neither
/// overflow nor lose the dominant term.
pub fn log_sum_exp(v: &[f64]) -> Result<f64> {
    if v.is_empty() {
        return Err(Error::EmptyInput("log_sum_exp"));
    }
    Ok(log_sum_exp_nonempty(v))
}

pub(crate) fn log_sum_exp_nonempty(v: &[f64]) -> f64 {
    let max = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    let mut acc = 0.0;
    for &x in v {
        acc += (x - max).exp();
    }
    max + acc.ln()
}

/// Normalized probabilities `exp(v_i − lse(v))`.
pub fn softmax(v: &[f64]) -> Vec<f64> {
    let lse = log_sum_exp_nonempty(v);
    v.iter().map(|x| (x - lse).exp()).collect()
}

pub fn log_softmax(logits: &[f64]) -> Result<Vector> {
    if logits.is_empty() {
        return Err(Error::EmptyInput("log_softmax"));
    }
    if !logits.iter().all(|x| x.is_finite()) {
        return Err(Error::NonFinite("log_softmax logits"));
    }
    let lse = log_sum_exp_nonempty(logits);
    Ok(Vector(logits.iter().map(|x| x - lse).collect()))
}

/// C-style `%.12e` formatting, e.g. `-1.386294361120e+00`.
pub fn fmt_sci(x: f64) -> String {
    if !x.is_finite() {
        return format!("{x}");
    }
    let s = format!("{x:.12e}");
    let (mant, exp) = s.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let sign = if exp < 0 { '-' } else { '+' };
    format!("{mant}e{sign}{:02}", exp.abs())
}

/// Seedable random stream backed by ChaCha8.
///
/// A state is identified by `(seed, stream, word position)`. Independent
/// substreams share the seed and differ in the ChaCha stream id; child
/// stream ids are derived with [`mix_stream`], so they are stable forever.
#[derive(Clone, Debug)]
pub struct RngState {
    seed: u64,
    stream: u64,
    inner: ChaCha8Rng,
}

/// SplitMix64 finalizer applied to `parent + key + 1`.
pub fn mix_stream(parent: u64, key: u64) -> u64 {
    let mut z = parent.wrapping_add(key).wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RngState {
    pub fn new(seed: u64) -> Self {
        Self::with_stream(seed, 0)
    }

    pub fn with_stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        RngState {
            seed,
            stream,
            inner,
        }
    }

    /// Independent child stream; does not advance `self`.
    pub fn substream(&self, key: u64) -> Self {
        Self::with_stream(self.seed, mix_stream(self.stream, key))
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn stream(&self) -> u64 {
        self.stream
    }

    pub fn position(&self) -> u128 {
        self.inner.get_word_pos()
    }

    pub fn restore(seed: u64, stream: u64, position: u128) -> Self {
        let mut state = Self::with_stream(seed, stream);
        state.inner.set_word_pos(position);
        state
    }

    /// Uniform in [0, 1) with 53 random bits.
    pub fn uniform(&mut self) -> f64 {
        (self.inner.next_u64() >> 11) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    /// Uniform integer in `0..n`.
    pub fn below(&mut self, n: usize) -> usize {
        assert!(n > 0, "below(0)");
        (self.uniform() * n as f64) as usize
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// `n` standard-normal draws by the Box–Muller transform.
    ///
    /// Draws are produced in pairs from two uniforms `u1 ∈ (0,1]`, `u2 ∈ [0,1)`:
    /// `√(−2 ln u1)·cos(2πu2)` then `√(−2 ln u1)·sin(2πu2)`. For odd `n` the
    /// final sine is discarded, so the stream advances by `2⌈n/2⌉` uniforms.
    pub fn sample_gauss(&mut self, n: usize) -> Vector {
        let mut out = Vec::with_capacity(n + 1);
        while out.len() < n {
            let u1 = 1.0 - self.uniform();
            let u2 = self.uniform();
            let r = (-2.0 * u1.ln()).sqrt();
            let theta = 2.0 * std::f64::consts::PI * u2;
            out.push(r * theta.cos());
            out.push(r * theta.sin());
        }
        out.truncate(n);
        Vector(out)
    }
}

impl RngCore for RngState {
    fn next_u32(&mut self) -> u32 {
        self.inner.next_u32()
    }

    fn next_u64(&mut self) -> u64 {
        self.inner.next_u64()
    }

    fn fill_bytes(&mut self, dest: &mut [u8]) {
        self.inner.fill_bytes(dest)
    }

    fn try_fill_bytes(&mut self, dest: &mut [u8]) -> std::result::Result<(), rand::Error> {
        self.inner.try_fill_bytes(dest)
    }
}
