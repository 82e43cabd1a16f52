/// Linear warmup followed by step-wise exponential decay, in tokens seen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LrSchedule {
    pub lr_start: f64,
    pub lr_max: f64,
    pub lr_end: f64,
    pub warmup_tokens: u64,
    pub decay_interval_tokens: u64,
    pub decay_factor: f64,
}

impl Default for LrSchedule {
    fn default() -> Self {
        LrSchedule {
            lr_start: 1e-6,
            lr_max: 6e-4,
            lr_end: 1e-6,
            warmup_tokens: 1 << 22,
            decay_interval_tokens: 1 << 24,
            decay_factor: 0.9,
        }
    }
}

impl LrSchedule {
    pub fn lr_at(&self, tokens_seen: u64) -> f64 {
        if tokens_seen < self.warmup_tokens {
            let frac = tokens_seen as f64 / self.warmup_tokens as f64;
            return self.lr_start + (self.lr_max - self.lr_start) * frac;
        }
        let after = tokens_seen - self.warmup_tokens;
        let steps = if self.decay_interval_tokens == 0 {
            0
        } else {
            after / self.decay_interval_tokens
        };
        let lr = self.lr_max * self.decay_factor.powf(steps as f64);
        lr.max(self.lr_end).min(self.lr_max)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn sched() -> LrSchedule {
        LrSchedule {
            lr_start: 1e-5,
            lr_max: 1e-3,
            lr_end: 2e-4,
            warmup_tokens: 1000,
            decay_interval_tokens: 500,
            decay_factor: 0.9,
        }
    }

    #[test]
    fn boundaries() {
        let s = sched();
        assert_eq!(s.lr_at(0), 1e-5);
        assert_eq!(s.lr_at(1000), 1e-3);
        assert!((s.lr_at(1500) - 1e-3 * 0.9).abs() < 1e-18);
        assert!((s.lr_at(1499) - 1e-3).abs() < 1e-18);
        // floored at lr_end far out
        assert_eq!(s.lr_at(1_000_000), 2e-4);
    }

    #[test]
    fn zero_warmup_starts_at_max() {
        let s = LrSchedule {
            warmup_tokens: 0,
            ..sched()
        };
        assert_eq!(s.lr_at(0), 1e-3);
    }

    proptest! {
        #[test]
        fn monotone_and_bounded(a in 0u64..20_000, b in 0u64..20_000) {
            let s = sched();
            let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
            let (la, lb) = (s.lr_at(lo), s.lr_at(hi));
            let floor = s.lr_start.min(s.lr_end);
            prop_assert!(la >= floor && la <= s.lr_max);
            prop_assert!(la > 0.0);
            if hi <= s.warmup_tokens {
                prop_assert!(la <= lb);
            }
            if lo >= s.warmup_tokens {
                prop_assert!(la >= lb);
            }
        }
    }
}
