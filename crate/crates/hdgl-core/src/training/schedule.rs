//! One-cycle learning-rate policy: linear rise to the peak over the warmup
//! steps, then linear decay back to the initial rate by the final step.

use crate::error::{Error, Result};

pub fn one_cycle_lr(
    step: usize,
    total_steps: usize,
    lr_initial: f64,
    lr_max: f64,
    warmup_fraction: f64,
) -> Result<f64> {
    if step >= total_steps {
        return Err(Error::InvalidInput(format!(
            "step {step} out of range 0..{total_steps}"
        )));
    }
    let warmup = (warmup_fraction * total_steps as f64).floor() as usize;
    if step <= warmup {
        if warmup == 0 {
            return Ok(lr_max);
        }
        return Ok(lr_initial + (lr_max - lr_initial) * step as f64 / warmup as f64);
    }
    let span = total_steps - 1 - warmup;
    if span == 0 {
        return Ok(lr_initial);
    }
    Ok(lr_max - (lr_max - lr_initial) * (step - warmup) as f64 / span as f64)
}

#[cfg(test)]
mod tests {
    use super::*;

    const INIT: f64 = 0.0005;
    const MAX: f64 = 0.0009;

    #[test]
    fn starts_at_initial_rate() {
        let lr = one_cycle_lr(0, 100, INIT, MAX, 0.2).unwrap();
        assert!((lr - INIT).abs() < 1e-15);
    }

    #[test]
    fn peaks_at_warmup_boundary() {
        let lr = one_cycle_lr(20, 100, INIT, MAX, 0.2).unwrap();
        assert!((lr - MAX).abs() < 1e-15);
    }

    #[test]
    fn decays_back_to_initial_by_final_step() {
        let lr = one_cycle_lr(99, 100, INIT, MAX, 0.2).unwrap();
        assert!((lr - INIT).abs() < 1e-15);
    }

    #[test]
    fn out_of_range_step_is_rejected() {
        assert!(one_cycle_lr(100, 100, INIT, MAX, 0.2).is_err());
    }

    #[test]
    fn piecewise_linear_with_single_peak() {
        let total = 57;
        let lrs: Vec<f64> = (0..total)
            .map(|s| one_cycle_lr(s, total, INIT, MAX, 0.2).unwrap())
            .collect();
        let peak = (0.2 * total as f64).floor() as usize;
        let max = lrs.iter().cloned().fold(f64::MIN, f64::max);
        assert!((lrs[peak] - max).abs() < 1e-15);
        assert_eq!(lrs.iter().filter(|&&v| (v - max).abs() < 1e-15).count(), 1);
        for (i, w) in lrs.windows(2).enumerate() {
            if i < peak {
                assert!(w[1] > w[0]);
            } else {
                assert!(w[1] < w[0]);
            }
        }
        // Continuity: adjacent steps never jump more than the larger slope.
        let rise = (MAX - INIT) / peak as f64;
        let fall = (MAX - INIT) / (total - 1 - peak) as f64;
        let bound = rise.max(fall) + 1e-15;
        for w in lrs.windows(2) {
            assert!((w[1] - w[0]).abs() <= bound);
        }
    }
}
