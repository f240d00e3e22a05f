use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SchedulerConfig {
    pub factor: f64,
    pub patience: u32,
    pub rel_threshold: f64,
    pub min_lr: f64,
}

impl Default for SchedulerConfig {
    fn default() -> Self {
        SchedulerConfig {
            factor: 0.5,
            patience: 5,
            rel_threshold: 1e-4,
            min_lr: 1e-8,
        }
    }
}

/// Reduce-on-plateau learning rate, minimizing the monitored loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlateauScheduler {
    pub config: SchedulerConfig,
    pub lr: f64,
    pub best: f64,
    pub bad_epochs: u32,
}

impl PlateauScheduler {
    pub fn new(config: SchedulerConfig, lr: f64) -> Self {
        PlateauScheduler {
            config,
            lr,
            best: f64::INFINITY,
            bad_epochs: 0,
        }
    }

    /// Feeds one epoch's loss and returns the learning rate for the next.
    pub fn step(&mut self, epoch_loss: f64) -> f64 {
        if epoch_loss < self.best * (1.0 - self.config.rel_threshold) {
            self.best = epoch_loss;
            self.bad_epochs = 0;
        } else {
            self.bad_epochs += 1;
        }
        if self.bad_epochs > self.config.patience {
            self.lr = (self.lr * self.config.factor).max(self.config.min_lr);
            self.bad_epochs = 0;
        }
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn decreasing_losses_keep_lr() {
        let mut s = PlateauScheduler::new(SchedulerConfig::default(), 1e-5);
        for k in 0..50 {
            assert_eq!(s.step(1.0 / (k + 1) as f64), 1e-5);
        }
    }

    #[test]
    fn halves_once_after_six_flat_epochs() {
        let mut s = PlateauScheduler::new(SchedulerConfig::default(), 1e-5);
        s.step(1.0);
        let trace: Vec<f64> = (0..6).map(|_| s.step(1.0)).collect();
        assert_eq!(&trace[..5], &[1e-5; 5]);
        assert_eq!(trace[5], 5e-6);
        // counter reset: five more flat epochs do not reduce again
        for _ in 0..5 {
            assert_eq!(s.step(1.0), 5e-6);
        }
    }

    #[test]
    fn tiny_improvements_count_as_flat() {
        let mut s = PlateauScheduler::new(SchedulerConfig::default(), 1.0);
        s.step(1.0);
        for _ in 0..6 {
            s.step(1.0 - 1e-6);
        }
        assert_eq!(s.lr, 0.5);
    }

    #[test]
    fn never_below_min_lr() {
        let mut s = PlateauScheduler::new(SchedulerConfig::default(), 1e-5);
        for _ in 0..1000 {
            assert!(s.step(1.0) >= 1e-8);
        }
        assert_eq!(s.lr, 1e-8);
    }
}
