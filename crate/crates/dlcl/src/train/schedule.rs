//! Warmup + inverse-square-root learning-rate schedule.

use serde::{Deserialize, Serialize};

/// Linear warmup from `lr_init` to `lr_max` over `warmup` steps, then decay
/// proportional to the inverse square root of the step count.
#[derive(Clone, Copy, Debug, Serialize, Deserialize)]
pub struct SchedulerConfig {
    pub lr_max: f64,
    pub warmup: usize,
    pub lr_init: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            lr_max: 1e-3,
            warmup: 400,
            lr_init: 1e-7,
        }
    }
}

/// Learning rate at optimizer update `step` (1-based). The boundary step sits
/// on the decay branch so `lr_at(warmup) == lr_max` exactly and
/// `lr_at(4 * warmup) == lr_max / 2` exactly.
pub fn lr_at(step: usize, cfg: &SchedulerConfig) -> f64 {
    assert!(step >= 1, "schedule steps are 1-based");
    if step < cfg.warmup {
        cfg.lr_init + (cfg.lr_max - cfg.lr_init) * step as f64 / cfg.warmup as f64
    } else {
        cfg.lr_max * (cfg.warmup as f64 / step as f64).sqrt()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_endpoint_is_exact() {
        let cfg = SchedulerConfig {
            lr_max: 7e-4,
            warmup: 4000,
            lr_init: 1e-7,
        };
        assert_eq!(lr_at(4000, &cfg), 7e-4);
    }

    #[test]
    fn four_warmups_halve_the_rate_exactly() {
        let cfg = SchedulerConfig {
            lr_max: 7e-4,
            warmup: 4000,
            lr_init: 1e-7,
        };
        assert_eq!(lr_at(16000, &cfg), 3.5e-4);
    }

    #[test]
    fn first_step_of_base_setting() {
        let cfg = SchedulerConfig {
            lr_max: 7e-4,
            warmup: 4000,
            lr_init: 1e-7,
        };
        let want = 1e-7 + (7e-4 - 1e-7) / 4000.0;
        assert_eq!(lr_at(1, &cfg), want);
    }

    #[test]
    fn continuous_at_warmup_boundary() {
        let cfg = SchedulerConfig {
            lr_max: 2e-3,
            warmup: 16000,
            lr_init: 1e-7,
        };
        let linear = cfg.lr_init + (cfg.lr_max - cfg.lr_init) * cfg.warmup as f64 / cfg.warmup as f64;
        let decay = lr_at(cfg.warmup, &cfg);
        assert!((linear - decay).abs() <= 1e-15 * cfg.lr_max);
    }

    #[test]
    fn rate_rises_then_falls() {
        let cfg = SchedulerConfig::default();
        assert!(lr_at(1, &cfg) < lr_at(cfg.warmup / 2, &cfg));
        assert!(lr_at(cfg.warmup / 2, &cfg) < lr_at(cfg.warmup, &cfg));
        assert!(lr_at(cfg.warmup, &cfg) > lr_at(2 * cfg.warmup, &cfg));
    }
}
