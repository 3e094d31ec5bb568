//! Datasets: the bimodal sequence generator and the text file formats.
//!
//! Token files hold one sequence per line as space-separated decimal ids.
//! Real-valued files start with a `dim=D,T=T` header followed by one
//! sequence per line of `D·T` comma-separated reals in `%.12e` form.

use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;

use crate::error::{Error, Result};
use crate::model::{VisibleKind, VisibleTrajectory};
use crate::numkit::{fmt_sci, RngState, Vector};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SplitTag {
    Train,
    Valid,
    Test,
}

impl fmt::Display for SplitTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SplitTag::Train => "train",
            SplitTag::Valid => "valid",
            SplitTag::Test => "test",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub sequences: Vec<VisibleTrajectory>,
    pub kind: VisibleKind,
    pub split: SplitTag,
}

impl Dataset {
    pub fn new(sequences: Vec<VisibleTrajectory>, kind: VisibleKind, split: SplitTag) -> Result<Self> {
        if sequences.is_empty() {
            return Err(Error::Dataset("empty dataset".into()));
        }
        for s in &sequences {
            s.check_kind(&kind)?;
        }
        Ok(Dataset {
            sequences,
            kind,
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    pub fn total_steps(&self) -> usize {
        self.sequences.iter().map(VisibleTrajectory::len).sum()
    }
}

/// Sequences whose next-token distribution is two-peaked at one step.
///
/// Tokens before `branch_step` are 0. At `branch_step` (1-based) the token
/// is 1 with probability `rho`, else 2. From there on the sequence follows
/// pattern A (`1, 1, 1, …`) or pattern B (`2, 1, 2, 1, …`), so every later
/// token is determined by the branch token.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BimodalSpec {
    pub t_len: usize,
    pub vocab: usize,
    pub branch_step: usize,
    pub rho: f64,
}

impl BimodalSpec {
    pub fn validate(&self) -> Result<()> {
        if self.vocab < 3 {
            return Err(Error::contract(format!("bimodal data needs vocab ≥ 3, got {}", self.vocab)));
        }
        if !(1 < self.branch_step && self.branch_step < self.t_len) {
            return Err(Error::contract(format!(
                "branch step must satisfy 1 < t0 < T, got t0 = {}, T = {}",
                self.branch_step, self.t_len
            )));
        }
        if !(0.0..=1.0).contains(&self.rho) {
            return Err(Error::contract(format!("rho must lie in [0, 1], got {}", self.rho)));
        }
        Ok(())
    }

    pub fn sequence(&self, mode_a: bool) -> Vec<usize> {
        (1..=self.t_len)
            .map(|t| {
                if t < self.branch_step {
                    0
                } else if mode_a {
                    1
                } else if (t - self.branch_step).is_multiple_of(2) {
                    2
                } else {
                    1
                }
            })
            .collect()
    }

    /// Best achievable expected log-likelihood per sequence: `−H(ρ)` from the
    /// branch step; every other token is predictable.
    pub fn optimal_loglik_per_sequence(&self) -> f64 {
        let h = |p: f64| if p > 0.0 { -p * p.ln() } else { 0.0 };
        -(h(self.rho) + h(1.0 - self.rho))
    }

    pub fn optimal_loglik_per_step(&self) -> f64 {
        self.optimal_loglik_per_sequence() / self.t_len as f64
    }
}

/// `n` bimodal sequences and the number that took mode A.
pub fn gen_bimodal(spec: &BimodalSpec, n: usize, rng: &mut RngState) -> Result<(Dataset, usize)> {
    spec.validate()?;
    if n == 0 {
        return Err(Error::contract("n must be ≥ 1"));
    }
    let mut mode_a = 0;
    let mut sequences = Vec::with_capacity(n);
    for _ in 0..n {
        let a = rng.bernoulli(spec.rho);
        mode_a += a as usize;
        sequences.push(VisibleTrajectory::tokens(spec.sequence(a))?);
    }
    let d = Dataset::new(sequences, VisibleKind::Categorical { vocab: spec.vocab }, SplitTag::Train)?;
    Ok((d, mode_a))
}

fn parse_err(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

pub fn load_sequences(path: &Path, kind: VisibleKind) -> Result<Dataset> {
    let text = fs::read_to_string(path)?;
    parse_sequences(&text, path, kind)
}

pub fn parse_sequences(text: &str, path: &Path, kind: VisibleKind) -> Result<Dataset> {
    let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l));
    let mut sequences = Vec::new();
    match kind {
        VisibleKind::Categorical { vocab } => {
            for (n, line) in lines {
                if line.trim().is_empty() {
                    return Err(parse_err(path, n, "blank line"));
                }
                let mut toks = Vec::new();
                for field in line.split_whitespace() {
                    let tok: usize = field
                        .parse()
                        .map_err(|_| parse_err(path, n, format!("invalid token `{field}`")))?;
                    if tok >= vocab {
                        return Err(parse_err(
                            path,
                            n,
                            format!("token {tok} out of range for vocabulary of size {vocab}"),
                        ));
                    }
                    toks.push(tok);
                }
                sequences.push(VisibleTrajectory::Tokens(toks));
            }
        }
        VisibleKind::Gaussian { dim } => {
            let Some((n, header)) = lines.next() else {
                return Err(Error::Dataset("empty dataset".into()));
            };
            let (d, t) = parse_header(header).ok_or_else(|| parse_err(path, n, "expected header `dim=D,T=T`"))?;
            if d != dim {
                return Err(parse_err(path, n, format!("file has dim={d}, model expects {dim}")));
            }
            if t == 0 {
                return Err(parse_err(path, n, "T must be ≥ 1"));
            }
            for (n, line) in lines {
                let values: Vec<f64> = line
                    .split(',')
                    .map(|f| {
                        f.trim()
                            .parse::<f64>()
                            .ok()
                            .filter(|v| v.is_finite())
                            .ok_or_else(|| parse_err(path, n, format!("invalid real `{f}`")))
                    })
                    .collect::<Result<_>>()?;
                if values.len() != d * t {
                    return Err(parse_err(
                        path,
                        n,
                        format!("expected {} values, found {}", d * t, values.len()),
                    ));
                }
                let steps = values
                    .chunks(d)
                    .map(|c| Vector::new(c.to_vec()))
                    .collect::<Result<Vec<_>>>()?;
                sequences.push(VisibleTrajectory::Reals { dim: d, steps });
            }
        }
    }
    if sequences.is_empty() {
        return Err(Error::Dataset("empty dataset".into()));
    }
    Dataset::new(sequences, kind, SplitTag::Train)
}

fn parse_header(line: &str) -> Option<(usize, usize)> {
    let (a, b) = line.trim().split_once(',')?;
    let d = a.trim().strip_prefix("dim=")?.parse().ok()?;
    let t = b.trim().strip_prefix("T=")?.parse().ok()?;
    Some((d, t))
}

/// Canonical text form of a dataset.
pub fn format_sequences(d: &Dataset) -> Result<String> {
    let mut out = String::new();
    match d.kind {
        VisibleKind::Categorical { .. } => {
            for s in &d.sequences {
                let VisibleTrajectory::Tokens(toks) = s else {
                    return Err(Error::contract("real sequence in a token dataset"));
                };
                let line: Vec<String> = toks.iter().map(usize::to_string).collect();
                out.push_str(&line.join(" "));
                out.push('\n');
            }
        }
        VisibleKind::Gaussian { dim } => {
            let t_len = d.sequences[0].len();
            if d.sequences.iter().any(|s| s.len() != t_len) {
                return Err(Error::contract("real-valued files need equal-length sequences"));
            }
            out.push_str(&format!("dim={dim},T={t_len}\n"));
            for s in &d.sequences {
                let VisibleTrajectory::Reals { steps, .. } = s else {
                    return Err(Error::contract("token sequence in a real-valued dataset"));
                };
                let line: Vec<String> = steps.iter().flat_map(|v| v.iter().map(|x| fmt_sci(*x))).collect();
                out.push_str(&line.join(","));
                out.push('\n');
            }
        }
    }
    Ok(out)
}

pub fn save_sequences(d: &Dataset, path: &Path) -> Result<()> {
    fs::write(path, format_sequences(d)?)?;
    Ok(())
}

/// Seeded shuffle, then a contiguous cut. Sizes use largest remainders so
/// each differs from its exact fraction by less than one sequence.
pub fn split(d: &Dataset, fractions: (f64, f64, f64), rng: &mut RngState) -> Result<(Dataset, Dataset, Dataset)> {
    let f = [fractions.0, fractions.1, fractions.2];
    if f.iter().any(|&x| x.is_nan() || x <= 0.0) || (f.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::contract(format!(
            "split fractions must be positive and sum to 1, got {:?}",
            fractions
        )));
    }
    let n = d.len();
    let exact: Vec<f64> = f.iter().map(|x| x * n as f64).collect();
    let mut sizes: Vec<usize> = exact.iter().map(|x| x.floor() as usize).collect();
    let mut order = [0usize, 1, 2];
    order.sort_by(|&a, &b| {
        let ra = exact[a] - exact[a].floor();
        let rb = exact[b] - exact[b].floor();
        rb.partial_cmp(&ra).unwrap().then(a.cmp(&b))
    });
    let mut left = n - sizes.iter().sum::<usize>();
    for &i in order.iter().cycle() {
        if left == 0 {
            break;
        }
        sizes[i] += 1;
        left -= 1;
    }
    if sizes.contains(&0) {
        return Err(Error::Dataset(format!(
            "{n} sequences are too few for three non-empty splits"
        )));
    }
    let mut seqs = d.sequences.clone();
    seqs.shuffle(rng);
    let valid_start = sizes[0];
    let test_start = sizes[0] + sizes[1];
    let test = seqs.split_off(test_start);
    let valid = seqs.split_off(valid_start);
    Ok((
        Dataset::new(seqs, d.kind, SplitTag::Train)?,
        Dataset::new(valid, d.kind, SplitTag::Valid)?,
        Dataset::new(test, d.kind, SplitTag::Test)?,
    ))
}
