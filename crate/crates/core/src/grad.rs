//! Reverse-mode gradients through the unrolled recurrence, a central
//! finite-difference oracle, and a comparator between the two.

use crate::error::{Error, Result};
use crate::model::{HiddenPath, Model, Observation, Parameters, VisibleTrajectory};
use crate::numkit::softmax;
use crate::objectives::{self, McNoise, ObjectiveId, ParticleEmissionTable};

pub const DEFAULT_FD_STEP: f64 = 1e-5;
pub const REL_ERR_FLOOR: f64 = 1e-8;

/// Gradient of an objective, stored with the parameters' shapes.
#[derive(Clone, Debug, PartialEq)]
pub struct GradientBundle {
    pub grads: Parameters,
    pub value: f64,
}

impl GradientBundle {
    pub fn first_non_finite(&self) -> Option<String> {
        self.grads.first_non_finite()
    }

    pub fn global_norm(&self) -> f64 {
        self.grads.to_flat().iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Accumulates `Σ_t weights[t] · ∂ log p(x^t|h^t) / ∂θ` for one path.
fn backprop_path(
    model: &Model,
    x: &VisibleTrajectory,
    path: &HiddenPath,
    particle: usize,
    weights: &[f64],
    grads: &mut Parameters,
) -> Result<()> {
    let p = &model.params;
    let hidden = model.hidden_dim();
    let sigma = model.sigma();
    let mut dh_future = vec![0.0; hidden];
    for t in (0..x.len()).rev() {
        let h = &path.states[t];
        let mut dh = std::mem::take(&mut dh_future);
        let w = weights[t];
        if w != 0.0 {
            let z = model.emission_layer(h);
            let (_, dz) = model.emission_from_layer(&z, x.step(t))?;
            grads.w_eh.add_outer(w, &dz, h);
            for (g, d) in grads.b_e.iter_mut().zip(&dz) {
                *g += w * d;
            }
            let scaled: Vec<f64> = dz.iter().map(|d| w * d).collect();
            p.w_eh.matvec_t_acc(&scaled, &mut dh);
        }
        if t == 0 {
            for (g, d) in grads.h1[particle].iter_mut().zip(&dh) {
                *g += d;
            }
            break;
        }
        if let (Some(eps), Some(g_ls)) = (path.noise.get(t - 1), grads.log_sigma.as_mut()) {
            // h = loc + exp(log σ)·ε
            for i in 0..hidden {
                g_ls[i] += dh[i] * sigma[i] * eps[i];
            }
        }
        let loc = &path.locations[t - 1];
        let da: Vec<f64> = dh.iter().zip(loc.iter()).map(|(d, m)| d * (1.0 - m * m)).collect();
        grads.w_hh.add_outer(1.0, &da, &path.states[t - 1]);
        match x.step(t - 1) {
            Observation::Token(k) => {
                for (r, d) in da.iter().enumerate() {
                    let v = grads.w_xh.get(r, k) + d;
                    grads.w_xh.set(r, k, v);
                }
            }
            Observation::Real(r) => grads.w_xh.add_outer(1.0, &da, r),
        }
        for (g, d) in grads.b_h.iter_mut().zip(&da) {
            *g += d;
        }
        dh_future = vec![0.0; hidden];
        p.w_hh.matvec_t_acc(&da, &mut dh_future);
    }
    Ok(())
}

/// Exact gradient of `objective` on one sequence. The noisy bound is
/// differentiated pathwise with `noise` held fixed.
pub fn backprop(
    objective: ObjectiveId,
    model: &Model,
    x: &VisibleTrajectory,
    noise: Option<&McNoise>,
) -> Result<GradientBundle> {
    objective.check_model(model)?;
    model.check_sequence(x)?;
    let mut grads = Parameters::zeros(&model.config);
    let t_len = x.len();
    let value = match objective {
        ObjectiveId::Loglik => {
            let path = model.unroll_deterministic(x, 0)?;
            backprop_path(model, x, &path, 0, &vec![1.0; t_len], &mut grads)?;
            objectives::loglik_deterministic(model, x)?.value
        }
        ObjectiveId::StepParticle | ObjectiveId::SequenceParticle => {
            let paths = model.unroll_all_particles(x)?.paths;
            let table = ParticleEmissionTable::from_model(model, x)?;
            let n = table.n_particles();
            // responsibilities r[l][t] = ∂ value / ∂ log p(x^t|h_l^t)
            let mut resp = vec![vec![0.0; t_len]; n];
            let value = if objective == ObjectiveId::StepParticle {
                for t in 0..t_len {
                    for (row, r) in resp.iter_mut().zip(softmax(table.step(t))) {
                        row[t] = r;
                    }
                }
                table.step_form().value
            } else {
                for (l, r) in softmax(&table.log_weights()).into_iter().enumerate() {
                    resp[l].fill(r);
                }
                table.sequence_form().value
            };
            for (l, path) in paths.iter().enumerate() {
                backprop_path(model, x, path, l, &resp[l], &mut grads)?;
            }
            value
        }
        ObjectiveId::NoisyElbo => {
            let noise = noise.ok_or_else(|| Error::contract("noisy_elbo gradient needs a noise record"))?;
            let n = noise.n_mc();
            if n == 0 {
                return Err(Error::contract("noisy ELBO needs at least one sample"));
            }
            let weights = vec![1.0 / n as f64; t_len];
            for record in &noise.draws {
                let path = model.unroll_with_noise(x, 0, record)?;
                backprop_path(model, x, &path, 0, &weights, &mut grads)?;
            }
            objectives::noisy_elbo_with_noise(model, x, noise)?.value
        }
    };
    Ok(GradientBundle { grads, value })
}

/// Central differences of a scalar function of a flat parameter vector.
pub fn finite_diff_fn(mut f: impl FnMut(&[f64]) -> f64, theta: &[f64], step: f64) -> Vec<f64> {
    assert!(step > 0.0, "finite-difference step must be positive");
    let mut probe = theta.to_vec();
    (0..theta.len())
        .map(|i| {
            probe[i] = theta[i] + step;
            let up = f(&probe);
            probe[i] = theta[i] - step;
            let down = f(&probe);
            probe[i] = theta[i];
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// Finite-difference gradient of `objective`; the same noise record is
/// replayed on both sides of every perturbation.
pub fn finite_diff(
    objective: ObjectiveId,
    model: &Model,
    x: &VisibleTrajectory,
    noise: Option<&McNoise>,
    step: f64,
) -> Result<GradientBundle> {
    if step.is_nan() || step <= 0.0 {
        return Err(Error::contract("finite-difference step must be positive"));
    }
    let value = objectives::evaluate(objective, model, x, noise)?.value;
    let mut probe = model.clone();
    let flat = model.params.to_flat();
    let eval = |theta: &[f64]| {
        probe.params.set_flat(theta).expect("same shape");
        objectives::evaluate(objective, &probe, x, noise)
            .map(|r| r.value)
            .unwrap_or(f64::NAN)
    };
    let g = finite_diff_fn(eval, &flat, step);
    let mut grads = Parameters::zeros(&model.config);
    grads.set_flat(&g)?;
    Ok(GradientBundle { grads, value })
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCompare {
    pub max_rel_err: f64,
    /// Location of the worst entry, e.g. `w_hh[4]`.
    pub worst_param: String,
}

/// Relative error per scalar `|a−b| / max(1e−8, |a|+|b|)`; reports the maximum.
pub fn grad_compare(a: &GradientBundle, b: &GradientBundle) -> Result<GradCompare> {
    let ba = a.grads.blocks();
    let bb = b.grads.blocks();
    Error::check_dim("gradient block count", ba.len(), bb.len())?;
    let mut out = GradCompare {
        max_rel_err: 0.0,
        worst_param: ba.first().map(|(n, _)| format!("{n}[0]")).unwrap_or_default(),
    };
    for ((name_a, va), (name_b, vb)) in ba.iter().zip(&bb) {
        if name_a != name_b {
            return Err(Error::contract(format!("gradient blocks differ: {name_a} vs {name_b}")));
        }
        Error::check_dim("gradient block", va.len(), vb.len())?;
        for (i, (x, y)) in va.iter().zip(vb.iter()).enumerate() {
            let rel = (x - y).abs() / REL_ERR_FLOOR.max(x.abs() + y.abs());
            if rel > out.max_rel_err || rel.is_nan() {
                out.max_rel_err = if rel.is_nan() { f64::INFINITY } else { rel };
                out.worst_param = format!("{name_a}[{i}]");
            }
        }
    }
    Ok(out)
}
