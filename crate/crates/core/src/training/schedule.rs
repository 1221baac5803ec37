//! Step-indexed schedules for scheduled sampling, the retrieval-loss weight,
//! the ranking margin and the learning rate.

use std::f64::consts::PI;

use serde::{Deserialize, Serialize};

/// How the probability of feeding gold neighbors evolves.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase", tag = "kind", content = "value")]
pub enum SamplingSchedule {
    /// Cosine from 1 to 0 over the anneal fraction of training.
    Anneal,
    /// Constant probability (1 = always gold, 0 = never).
    Fixed(f64),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedules {
    pub total_steps: u64,
    pub lr_max: f64,
    /// Final learning rate as a fraction of `lr_max`.
    pub lr_min_ratio: f64,
    pub warmup_steps: u64,
    pub alpha_max: f64,
    /// Fraction of training over which the retrieval-loss weight ramps up.
    pub alpha_ramp: f64,
    pub tau_max: f64,
    /// Fraction of training over which gold-neighbor feeding is annealed away.
    pub sampling_anneal: f64,
    pub sampling: SamplingSchedule,
}

impl Schedules {
    pub fn desk(total_steps: u64) -> Self {
        Self {
            total_steps,
            lr_max: 5e-3,
            lr_min_ratio: 0.1,
            warmup_steps: 0,
            alpha_max: 1e-2,
            alpha_ramp: 0.2,
            tau_max: 4.0,
            sampling_anneal: 0.9,
            sampling: SamplingSchedule::Anneal,
        }
    }

    /// Values used for the published large-scale runs.
    pub fn paper(total_steps: u64) -> Self {
        Self { alpha_max: 1e-9, ..Self::desk(total_steps) }
    }

    fn steps(&self, fraction: f64) -> f64 {
        (fraction * self.total_steps as f64).round()
    }

    /// Linear ramp from 0 at `step = 0` to 1 at `step >= span`.
    fn ramp(step: u64, span: f64) -> f64 {
        if span <= 0.0 || step as f64 >= span {
            1.0
        } else {
            step as f64 / span
        }
    }

    pub fn p_ss(&self, step: u64) -> f64 {
        match self.sampling {
            SamplingSchedule::Fixed(p) => p,
            SamplingSchedule::Anneal => {
                let x = Self::ramp(step, self.steps(self.sampling_anneal));
                if x >= 1.0 {
                    0.0
                } else {
                    0.5 * (1.0 + (PI * x).cos())
                }
            }
        }
    }

    pub fn alpha_ret(&self, step: u64) -> f64 {
        self.alpha_max * Self::ramp(step, self.steps(self.alpha_ramp))
    }

    pub fn tau(&self, step: u64) -> f64 {
        self.tau_max * Self::ramp(step, self.total_steps as f64)
    }

    pub fn lr(&self, step: u64) -> f64 {
        let lr_min = self.lr_max * self.lr_min_ratio;
        if step < self.warmup_steps {
            return self.lr_max * (step + 1) as f64 / self.warmup_steps as f64;
        }
        let span = self.total_steps.saturating_sub(self.warmup_steps);
        let x = Self::ramp(step - self.warmup_steps, span as f64);
        if x <= 0.0 {
            self.lr_max
        } else if x >= 1.0 {
            lr_min
        } else {
            lr_min + (self.lr_max - lr_min) * 0.5 * (1.0 + (PI * x).cos())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn endpoints_are_exact() {
        let s = Schedules::desk(1000);
        assert_eq!(s.p_ss(0), 1.0);
        assert_eq!(s.p_ss(900), 0.0);
        assert_eq!(s.p_ss(1000), 0.0);
        assert_eq!(s.alpha_ret(0), 0.0);
        assert_eq!(s.alpha_ret(200), s.alpha_max);
        assert_eq!(s.alpha_ret(999), s.alpha_max);
        assert_eq!(s.tau(0), 0.0);
        assert_eq!(s.tau(1000), s.tau_max);
        assert_eq!(s.lr(0), 5e-3);
        assert_eq!(s.lr(1000), 5e-3 * 0.1);
        assert_eq!(Schedules::paper(10).alpha_max, 1e-9);
    }

    #[test]
    fn schedules_are_monotone_and_bounded() {
        let s = Schedules::desk(357);
        for t in 1..=400 {
            assert!(s.p_ss(t) <= s.p_ss(t - 1));
            assert!(s.alpha_ret(t) >= s.alpha_ret(t - 1));
            assert!(s.tau(t) >= s.tau(t - 1));
            assert!(s.lr(t) <= s.lr(t - 1));
            assert!((0.0..=1.0).contains(&s.p_ss(t)));
            assert!(s.lr(t) >= 0.1 * s.lr_max);
        }
        assert!((s.p_ss(161) - 0.5).abs() < 0.01);
    }

    #[test]
    fn fixed_sampling_and_warmup() {
        let mut s = Schedules::desk(100);
        s.sampling = SamplingSchedule::Fixed(1.0);
        assert!((0..100).all(|t| s.p_ss(t) == 1.0));
        s.warmup_steps = 10;
        assert_eq!(s.lr(9), s.lr_max);
        assert!(s.lr(0) < s.lr(5));
        assert_eq!(s.lr(10), s.lr_max);
    }
}
