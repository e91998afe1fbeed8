//! Full-batch gradient descent shared by every trainer in the crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    /// Undo a step that raised the loss and halve the learning rate.
    #[serde(default = "default_true")]
    pub halve_on_increase: bool,
}

fn default_true() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            epochs: 500,
            lr: 0.5,
            halve_on_increase: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub seed: u64,
    pub epochs: usize,
    pub lr: f64,
    pub final_lr: f64,
    pub initial_loss: f64,
    pub final_loss: f64,
}

/// Minimizes `objective` from `init`. The objective returns the loss and its
/// gradient at the given parameters.
pub fn gradient_descent<F>(init: Vec<f64>, cfg: &TrainConfig, mut objective: F) -> Result<(Vec<f64>, TrainReport)>
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    if !(cfg.lr > 0.0 && cfg.lr.is_finite()) {
        return Err(Error::invalid(format!("learning rate {} must be positive", cfg.lr)));
    }
    let mut params = init;
    let (mut loss, mut grad) = objective(&params);
    check_finite(loss, 0)?;
    let initial_loss = loss;
    let mut lr = cfg.lr;
    for epoch in 1..=cfg.epochs {
        let candidate: Vec<f64> = params.iter().zip(&grad).map(|(p, g)| p - lr * g).collect();
        let (next_loss, next_grad) = objective(&candidate);
        if cfg.halve_on_increase && !(next_loss <= loss) {
            lr *= 0.5;
            if lr < 1e-300 {
                return Err(Error::Divergence("learning rate underflow".into()));
            }
            continue;
        }
        check_finite(next_loss, epoch)?;
        params = candidate;
        loss = next_loss;
        grad = next_grad;
    }
    Ok((
        params,
        TrainReport {
            seed: cfg.seed,
            epochs: cfg.epochs,
            lr: cfg.lr,
            final_lr: lr,
            initial_loss,
            final_loss: loss,
        },
    ))
}

fn check_finite(loss: f64, epoch: usize) -> Result<()> {
    if loss.is_finite() {
        Ok(())
    } else {
        Err(Error::Divergence(format!("loss {loss} at epoch {epoch}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn minimizes_quadratic() {
        let cfg = TrainConfig {
            epochs: 200,
            lr: 0.1,
            ..Default::default()
        };
        let (p, rep) = gradient_descent(vec![0.0, 0.0], &cfg, |p| {
            let loss = (p[0] - 3.0).powi(2) + (p[1] + 1.0).powi(2);
            (loss, vec![2.0 * (p[0] - 3.0), 2.0 * (p[1] + 1.0)])
        })
        .unwrap();
        assert!((p[0] - 3.0).abs() < 1e-6 && (p[1] + 1.0).abs() < 1e-6);
        assert!(rep.final_loss < rep.initial_loss);
    }

    #[test]
    fn halving_recovers_from_large_step() {
        let cfg = TrainConfig {
            epochs: 100,
            lr: 10.0,
            ..Default::default()
        };
        let (p, rep) = gradient_descent(vec![1.0], &cfg, |p| (p[0] * p[0], vec![2.0 * p[0]])).unwrap();
        assert!(p[0].abs() < 1e-3);
        assert!(rep.final_lr < 10.0);
    }

    #[test]
    fn divergence_detected_without_halving() {
        let cfg = TrainConfig {
            epochs: 5000,
            lr: 10.0,
            halve_on_increase: false,
            ..Default::default()
        };
        let res = gradient_descent(vec![1.0], &cfg, |p| (p[0] * p[0], vec![2.0 * p[0]]));
        assert!(matches!(res, Err(Error::Divergence(_))));
    }
}
