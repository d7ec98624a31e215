use crate::error::{Error, Result};

/// Linear growth of the number of sampled discriminators from `k_min` at
/// step 0 to `k_max` at `total_steps`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CurriculumSchedule {
    k_min: usize,
    k_max: usize,
    total_steps: u64,
}

impl CurriculumSchedule {
    pub fn new(k_min: usize, k_max: usize, total_steps: u64) -> Result<Self> {
        if k_min < 1 || k_min > k_max {
            return Err(Error::validation(format!(
                "curriculum needs 1 <= k_min <= k_max, got {k_min}..{k_max}"
            )));
        }
        Ok(CurriculumSchedule {
            k_min,
            k_max,
            total_steps,
        })
    }

    pub fn k_min(&self) -> usize {
        self.k_min
    }

    pub fn k_max(&self) -> usize {
        self.k_max
    }

    pub fn total_steps(&self) -> u64 {
        self.total_steps
    }
}

/// `k_min + floor(step · (k_max − k_min) / total_steps)`, computed in
/// integers. Steps past the end clamp to `k_max`; a zero-length schedule is
/// already at `k_max`.
pub fn curriculum_k(step: i64, sched: &CurriculumSchedule) -> Result<usize> {
    if step < 0 {
        return Err(Error::validation(format!("negative step {step}")));
    }
    let step = step as u64;
    if sched.total_steps == 0 || step >= sched.total_steps {
        return Ok(sched.k_max);
    }
    let span = (sched.k_max - sched.k_min) as u128;
    let inc = (step as u128 * span) / sched.total_steps as u128;
    Ok(sched.k_min + inc as usize)
}

/// Sigmoid ramp `λ(p) = λ_max · (2 / (1 + e^{−γ p}) − 1)` for the reversal
/// weight.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LambdaSchedule {
    pub gamma: f64,
    pub lambda_max: f64,
}

impl Default for LambdaSchedule {
    fn default() -> Self {
        LambdaSchedule {
            gamma: 10.0,
            lambda_max: 1.0,
        }
    }
}

impl LambdaSchedule {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma >= 0.0 && self.gamma.is_finite()) {
            return Err(Error::validation(format!("gamma must be >= 0, got {}", self.gamma)));
        }
        if !(self.lambda_max >= 0.0 && self.lambda_max.is_finite()) {
            return Err(Error::validation(format!(
                "lambda_max must be >= 0, got {}",
                self.lambda_max
            )));
        }
        Ok(())
    }
}

pub fn lambda_at(progress: f64, sched: &LambdaSchedule) -> Result<f64> {
    if !(0.0..=1.0).contains(&progress) {
        return Err(Error::validation(format!(
            "progress must lie in [0, 1], got {progress}"
        )));
    }
    sched.validate()?;
    Ok(sched.lambda_max * (2.0 / (1.0 + (-sched.gamma * progress).exp()) - 1.0))
}
