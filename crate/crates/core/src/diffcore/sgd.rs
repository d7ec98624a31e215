use crate::error::{Error, Result};

/// SGD with classical momentum: `v ← μ v − lr g`, `p ← p + v`.
#[derive(Debug, Clone, PartialEq)]
pub struct SgdState {
    learning_rate: f64,
    momentum: f64,
    velocity: Vec<Vec<f64>>,
}

impl SgdState {
    pub fn new(learning_rate: f64, momentum: f64) -> Result<Self> {
        if !(learning_rate > 0.0 && learning_rate.is_finite()) {
            return Err(Error::validation(format!(
                "learning rate must be positive, got {learning_rate}"
            )));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::validation(format!(
                "momentum must lie in [0, 1), got {momentum}"
            )));
        }
        Ok(SgdState {
            learning_rate,
            momentum,
            velocity: Vec::new(),
        })
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn momentum(&self) -> f64 {
        self.momentum
    }

    pub fn velocity(&self) -> &[Vec<f64>] {
        &self.velocity
    }

    /// Applies one update to every parameter buffer. Velocity buffers are
    /// created on the first call and must keep the same shapes afterwards.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(Error::Dimension {
                op: "sgd_step",
                left: (params.len(), 0),
                right: (grads.len(), 0),
            });
        }
        for (p, g) in params.iter().zip(grads) {
            if p.len() != g.len() {
                return Err(Error::Dimension {
                    op: "sgd_step",
                    left: (p.len(), 1),
                    right: (g.len(), 1),
                });
            }
        }
        if self.velocity.is_empty() {
            self.velocity = params.iter().map(|p| vec![0.0; p.len()]).collect();
        } else if self.velocity.len() != params.len()
            || self.velocity.iter().zip(params.iter()).any(|(v, p)| v.len() != p.len())
        {
            return Err(Error::Dimension {
                op: "sgd_velocity",
                left: (self.velocity.len(), 0),
                right: (params.len(), 0),
            });
        }

        for ((p, g), v) in params.iter_mut().zip(grads).zip(&mut self.velocity) {
            for ((pi, gi), vi) in p.iter_mut().zip(g.iter()).zip(v.iter_mut()) {
                *vi = self.momentum * *vi - self.learning_rate * gi;
                *pi += *vi;
            }
        }
        Ok(())
    }
}
