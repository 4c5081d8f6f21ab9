//! Learning-rate and teacher-update schedules.

use crate::error::{Error, Result};

pub const POLY_POWER: f64 = 0.9;

/// `base (1 - iter / total)^0.9`.
pub fn poly_lr(base: f64, iter: usize, total: usize) -> Result<f64> {
    if total == 0 {
        return Err(Error::InvalidArgument("total iterations must be positive".into()));
    }
    if iter > total {
        return Err(Error::InvalidArgument(format!(
            "iteration {iter} beyond total {total}"
        )));
    }
    Ok(base * (1.0 - iter as f64 / total as f64).powf(POLY_POWER))
}

/// `teacher = m teacher + (1 - m) student`, elementwise.
pub fn ema_update(teacher: &mut [f64], student: &[f64], momentum: f64) -> Result<()> {
    if teacher.len() != student.len() {
        return Err(Error::Shape(format!(
            "teacher has {} parameters, student {}",
            teacher.len(),
            student.len()
        )));
    }
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::InvalidArgument(format!("momentum {momentum} outside [0, 1]")));
    }
    for (t, &s) in teacher.iter_mut().zip(student) {
        *t = momentum * *t + (1.0 - momentum) * s;
    }
    Ok(())
}

/// Momentum for the `k`-th teacher update after warm start: `min(1 - 1/(k+1), m)`.
///
/// The first update copies the student; later ones approach `m`.
pub fn ramped_momentum(k: usize, target: f64) -> f64 {
    (1.0 - 1.0 / (k as f64 + 1.0)).min(target)
}
