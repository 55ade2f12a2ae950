//! Learning-rate schedules.

/// Multiplier for factorized layers during the first `warmup_epochs`
/// epochs: rises linearly from 0.1 at epoch 0 toward 1, then stays at 1.
pub fn warmup_multiplier(epoch: usize, warmup_epochs: usize) -> f64 {
    if epoch >= warmup_epochs {
        1.0
    } else {
        0.1 + 0.9 * epoch as f64 / warmup_epochs as f64
    }
}

/// Step decay: `base · factor^m` where `m` counts milestones `<= epoch`.
pub fn step_lr(base: f64, epoch: usize, milestones: &[usize], factor: f64) -> f64 {
    let m = milestones.iter().filter(|&&s| s <= epoch).count();
    base * factor.powi(m as i32)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_values() {
        assert!((warmup_multiplier(0, 3) - 0.1).abs() < 1e-15);
        assert!((warmup_multiplier(1, 3) - 0.4).abs() < 1e-15);
        assert_eq!(warmup_multiplier(3, 3), 1.0);
        assert_eq!(warmup_multiplier(0, 0), 1.0);
    }

    #[test]
    fn step_decay() {
        assert_eq!(step_lr(0.1, 0, &[2, 4], 0.1), 0.1);
        assert!((step_lr(0.1, 2, &[2, 4], 0.1) - 0.01).abs() < 1e-15);
        assert!((step_lr(0.1, 9, &[2, 4], 0.1) - 0.001).abs() < 1e-15);
    }
}
