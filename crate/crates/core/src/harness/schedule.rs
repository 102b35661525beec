//! One-cycle learning rate: linear ramp to a peak over the warm
//! fraction of steps, then linear decay to a final floor.

use super::config::TrainConfig;
use crate::error::{Error, Result};

/// Learning rate at `step` of `total_steps`. The ramp peaks at step
/// ceil(warm_frac * total_steps) and the decay ends exactly at the final
/// step's floor value.
pub fn one_cycle_lr(step: usize, total_steps: usize, cfg: &TrainConfig) -> Result<f64> {
    if total_steps == 0 || step >= total_steps {
        return Err(Error::Contract(format!(
            "step {} out of range for {} total steps",
            step, total_steps
        )));
    }
    let warm = (cfg.warm_frac * total_steps as f64).ceil() as usize;
    if step <= warm {
        if warm == 0 {
            return Ok(cfg.lr_peak);
        }
        return Ok(cfg.lr_low + (cfg.lr_peak - cfg.lr_low) * step as f64 / warm as f64);
    }
    // step > warm implies total_steps - 1 > warm, so the span is nonzero.
    let span = (total_steps - 1 - warm) as f64;
    Ok(cfg.lr_peak + (cfg.lr_final - cfg.lr_peak) * (step - warm) as f64 / span)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cfg() -> TrainConfig {
        TrainConfig::default()
    }

    #[test]
    fn starts_at_the_low_rate() {
        assert_eq!(one_cycle_lr(0, 1000, &cfg()).unwrap(), 2e-4);
    }

    #[test]
    fn peaks_at_the_warm_boundary() {
        let total = 1000;
        let warm = 300; // ceil(0.3 * 1000)
        assert!((one_cycle_lr(warm, total, &cfg()).unwrap() - 5e-4).abs() < 1e-12);
        // One step earlier is below the peak by one ramp increment.
        let before = one_cycle_lr(warm - 1, total, &cfg()).unwrap();
        assert!(before < 5e-4);
        assert!((5e-4 - before) < (5e-4 - 2e-4) / 300.0 + 1e-12);
    }

    #[test]
    fn ends_at_the_final_rate() {
        assert!((one_cycle_lr(999, 1000, &cfg()).unwrap() - 2e-5).abs() < 1e-12);
    }

    #[test]
    fn ramp_peaks_even_when_total_is_tiny() {
        // total=2: warm=1, so step 1 is both peak and last step.
        assert_eq!(one_cycle_lr(0, 2, &cfg()).unwrap(), 2e-4);
        assert_eq!(one_cycle_lr(1, 2, &cfg()).unwrap(), 5e-4);
        assert_eq!(one_cycle_lr(0, 1, &cfg()).unwrap(), 2e-4);
    }

    #[test]
    fn out_of_range_step_is_contract_error() {
        assert!(one_cycle_lr(1000, 1000, &cfg()).is_err());
        assert!(one_cycle_lr(0, 0, &cfg()).is_err());
    }

    #[test]
    fn schedule_is_continuous() {
        let total = 173;
        let c = cfg();
        let warm = (c.warm_frac * total as f64).ceil();
        let up_slope = (c.lr_peak - c.lr_low) / warm;
        let down_slope = (c.lr_peak - c.lr_final) / (total as f64 - 1.0 - warm);
        let bound = up_slope.max(down_slope) + 1e-15;
        let mut prev = one_cycle_lr(0, total, &c).unwrap();
        let mut rose = false;
        let mut fell = false;
        for s in 1..total {
            let lr = one_cycle_lr(s, total, &c).unwrap();
            assert!((lr - prev).abs() <= bound, "jump at step {}", s);
            if lr > prev {
                assert!(!fell, "rises again after falling at step {}", s);
                rose = true;
            }
            if lr < prev {
                fell = true;
            }
            prev = lr;
        }
        assert!(rose && fell);
    }
}
