//! Central finite-difference check of analytic gradients.

use alloc::vec;
use alloc::vec::Vec;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::model::ToyModel;
use super::task::Sample;
use crate::error::{Error, Result};

pub const DEFAULT_STEP: f64 = 1e-6;
/// Lower bound of the relative-error denominator. Finite differences of a
/// loss of order one carry an absolute rounding error near `1e-10` at step
/// `1e-6`, so gradients smaller than the floor are compared absolutely.
pub const DEFAULT_FLOOR: f64 = 1e-4;

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter index with the largest error.
    pub worst_index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub checked: usize,
}

impl GradCheckReport {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.max_rel_error <= tolerance
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares `grad` against central differences of `loss` at `indices`.
pub fn check<F>(params: &[f64], grad: &[f64], indices: &[usize], step: f64, floor: f64, mut loss: F) -> Result<GradCheckReport>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    if grad.len() != params.len() {
        return Err(Error::Shape("gradient and parameter lengths differ".into()));
    }
    if indices.is_empty() {
        return Err(Error::InsufficientData("no parameters to check".into()));
    }
    let mut p = params.to_vec();
    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst_index: indices[0],
        analytic: grad[indices[0]],
        numeric: f64::NAN,
        checked: indices.len(),
    };
    for &i in indices {
        let orig = p[i];
        p[i] = orig + step;
        let up = loss(&p)?;
        p[i] = orig - step;
        let down = loss(&p)?;
        p[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let err = relative_error(grad[i], numeric, floor);
        if err > report.max_rel_error || report.numeric.is_nan() {
            report.max_rel_error = err;
            report.worst_index = i;
            report.analytic = grad[i];
            report.numeric = numeric;
        }
    }
    Ok(report)
}

/// Picks `count` parameter indices: one from every tensor, the rest
/// uniformly without replacement.
pub fn sample_indices(model: &ToyModel, count: usize, seed: u64) -> Vec<usize> {
    let layout = model.param_layout();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out: Vec<usize> = layout
        .tensors()
        .iter()
        .map(|(_, r)| r.start + index::sample(&mut rng, r.len(), 1).index(0))
        .collect();
    let rest = count.saturating_sub(out.len());
    for i in index::sample(&mut rng, layout.total(), rest.min(layout.total())) {
        if !out.contains(&i) {
            out.push(i);
        }
    }
    out.sort_unstable();
    out
}

/// Gradient check of the mean cross-entropy of `model` on `samples`.
pub fn grad_check(model: &ToyModel, samples: &[Sample], count: usize, seed: u64) -> Result<GradCheckReport> {
    let mut grad = vec![0.0; model.params().len()];
    model.loss_and_grad(samples, &mut grad)?;
    let indices = sample_indices(model, count, seed);
    let cfg = *model.config();
    check(model.params(), &grad, &indices, DEFAULT_STEP, DEFAULT_FLOOR, |p| {
        ToyModel::from_params(&cfg, p.to_vec())?.loss(samples)
    })
}

/// Least-squares linear readout `y = W x + b`, the exactly quadratic case.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearProbe {
    pub inputs: Vec<Vec<f64>>,
    pub targets: Vec<Vec<f64>>,
}

impl LinearProbe {
    pub fn param_count(&self) -> usize {
        let (i, o) = (self.inputs[0].len(), self.targets[0].len());
        o * i + o
    }

    /// Mean of `0.5 * |W x + b - y|^2`.
    pub fn loss(&self, p: &[f64]) -> f64 {
        let (ni, no) = (self.inputs[0].len(), self.targets[0].len());
        let mut total = 0.0;
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            for o in 0..no {
                let pred: f64 = (0..ni).map(|i| p[o * ni + i] * x[i]).sum::<f64>() + p[no * ni + o];
                total += 0.5 * (pred - y[o]) * (pred - y[o]);
            }
        }
        total / self.inputs.len() as f64
    }

    pub fn gradient(&self, p: &[f64]) -> Vec<f64> {
        let (ni, no) = (self.inputs[0].len(), self.targets[0].len());
        let mut g = vec![0.0; self.param_count()];
        let scale = 1.0 / self.inputs.len() as f64;
        for (x, y) in self.inputs.iter().zip(&self.targets) {
            for o in 0..no {
                let pred: f64 = (0..ni).map(|i| p[o * ni + i] * x[i]).sum::<f64>() + p[no * ni + o];
                let r = (pred - y[o]) * scale;
                for i in 0..ni {
                    g[o * ni + i] += r * x[i];
                }
                g[no * ni + o] += r;
            }
        }
        g
    }
}
