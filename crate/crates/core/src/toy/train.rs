use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{Optimizer, ToyConfig};
use super::model::ToyModel;
use super::task::{sample, Sample, TaskKind};
use crate::error::{Error, Result};

/// Seed offset of the training data stream relative to the model seed.
const DATA_STREAM: u64 = 0x7261_696e;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainReport {
    /// Mean batch loss after every step.
    pub losses: Vec<f64>,
}

/// Trains a freshly initialized model on a seeded stream of `task` samples.
pub fn train(cfg: &ToyConfig, task: TaskKind) -> Result<(ToyModel, TrainReport)> {
    train_with(cfg, task, |_, _| {})
}

/// As [`train`], calling `on_step(step, loss)` after every update.
pub fn train_with<F: FnMut(usize, f64)>(
    cfg: &ToyConfig,
    task: TaskKind,
    mut on_step: F,
) -> Result<(ToyModel, TrainReport)> {
    task.validate(cfg)?;
    let mut model = ToyModel::init(cfg)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ DATA_STREAM);
    let n = model.params().len();
    let mut grad = vec![0.0; n];
    let mut m1 = vec![0.0; n];
    let mut m2 = vec![0.0; n];
    let mut losses = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let batch: Vec<Sample> = (0..cfg.batch).map(|_| sample(cfg, task, &mut rng)).collect();
        grad.fill(0.0);
        let loss = model.loss_and_grad(&batch, &mut grad)?;
        if !loss.is_finite() || grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::Divergence(step));
        }
        let lr = cfg.learning_rate;
        let p = model.params_mut();
        match cfg.optimizer {
            Optimizer::Sgd { momentum } => {
                for i in 0..n {
                    m1[i] = momentum * m1[i] + grad[i];
                    p[i] -= lr * m1[i];
                }
            }
            Optimizer::Adam { beta1, beta2, eps } => {
                let t = (step + 1) as i32;
                let c1 = 1.0 - libm::pow(beta1, t as f64);
                let c2 = 1.0 - libm::pow(beta2, t as f64);
                for i in 0..n {
                    m1[i] = beta1 * m1[i] + (1.0 - beta1) * grad[i];
                    m2[i] = beta2 * m2[i] + (1.0 - beta2) * grad[i] * grad[i];
                    p[i] -= lr * (m1[i] / c1) / (libm::sqrt(m2[i] / c2) + eps);
                }
            }
        }
        losses.push(loss);
        on_step(step, loss);
    }
    Ok((model, TrainReport { losses }))
}

/// Fraction of `samples` answered correctly.
pub fn accuracy(model: &ToyModel, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for s in samples {
        if model.predict(s)? == s.answer {
            hits += 1;
        }
    }
    Ok(hits as f64 / samples.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::toy::task::dataset;

    fn tiny(steps: usize) -> ToyConfig {
        ToyConfig {
            d_model: 16,
            layers: 2,
            heads: 4,
            d_ff: 16,
            grid_rows: 3,
            grid_cols: 3,
            question_len: 2,
            steps,
            batch: 4,
            ..ToyConfig::default()
        }
    }

    #[test]
    fn same_seed_same_parameters() {
        let (a, ra) = train(&tiny(3), TaskKind::FindPatch).unwrap();
        let (b, rb) = train(&tiny(3), TaskKind::FindPatch).unwrap();
        assert_eq!(a.params(), b.params());
        assert_eq!(ra, rb);
        let (c, _) = train(&ToyConfig { seed: 1, ..tiny(3) }, TaskKind::FindPatch).unwrap();
        assert_ne!(a.params(), c.params());
    }

    #[test]
    fn untrained_model_is_near_chance() {
        let cfg = tiny(0);
        let (m, r) = train(&cfg, TaskKind::FindPatch).unwrap();
        assert!(r.losses.is_empty());
        let acc = accuracy(&m, &dataset(&cfg, TaskKind::FindPatch, 2000, 1)).unwrap();
        // binomial sd at n = 2000 is under 0.008
        assert!((acc - 1.0 / cfg.symbols as f64).abs() < 0.06, "{acc}");
    }

    #[test]
    fn divergence_is_reported() {
        let cfg = ToyConfig {
            learning_rate: 1e300,
            optimizer: Optimizer::Sgd { momentum: 0.0 },
            ..tiny(5)
        };
        assert!(matches!(train(&cfg, TaskKind::FindPatch), Err(Error::Divergence(_))));
    }

    #[test]
    fn sgd_reduces_loss() {
        let cfg = ToyConfig {
            learning_rate: 0.05,
            optimizer: Optimizer::Sgd { momentum: 0.9 },
            ..tiny(60)
        };
        let (_, r) = train(&cfg, TaskKind::FindPatch).unwrap();
        let head: f64 = r.losses[..10].iter().sum();
        let tail: f64 = r.losses[50..].iter().sum();
        assert!(tail < head);
    }
}
