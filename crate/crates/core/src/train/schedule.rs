//! Early stopping and reduce-on-plateau, both monitoring a loss to minimize.

#[derive(Debug, Clone, PartialEq)]
pub struct EarlyStopping {
    pub patience: usize,
    pub min_delta: f64,
    best: f64,
    best_epoch: usize,
    epoch: usize,
    stale: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize, min_delta: f64) -> Self {
        Self {
            patience,
            min_delta,
            best: f64::INFINITY,
            best_epoch: 0,
            epoch: 0,
            stale: 0,
        }
    }

    /// Records the next epoch's value; returns true if it is a new best.
    pub fn update(&mut self, value: f64) -> bool {
        self.epoch += 1;
        if value < self.best - self.min_delta {
            self.best = value;
            self.best_epoch = self.epoch;
            self.stale = 0;
            true
        } else {
            self.stale += 1;
            false
        }
    }

    pub fn should_stop(&self) -> bool {
        self.stale >= self.patience
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// 1-based epoch of the best value, 0 before any update.
    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }

    pub fn epoch(&self) -> usize {
        self.epoch
    }
}

/// Multiplies the learning rate by `factor` once the monitored value has not
/// improved for more than `patience` epochs, then starts counting again.
#[derive(Debug, Clone, PartialEq)]
pub struct ReduceLrOnPlateau {
    pub factor: f64,
    pub patience: usize,
    pub min_lr: f64,
    pub min_delta: f64,
    lr: f64,
    best: f64,
    stale: usize,
}

impl ReduceLrOnPlateau {
    pub fn new(lr: f64, factor: f64, patience: usize, min_lr: f64, min_delta: f64) -> Self {
        Self {
            factor,
            patience,
            min_lr,
            min_delta,
            lr,
            best: f64::INFINITY,
            stale: 0,
        }
    }

    pub fn step(&mut self, value: f64) -> f64 {
        if value < self.best - self.min_delta {
            self.best = value;
            self.stale = 0;
        } else {
            self.stale += 1;
            if self.stale > self.patience {
                self.lr = (self.lr * self.factor).max(self.min_lr);
                self.stale = 0;
            }
        }
        self.lr
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn plateau_sequence_stops_at_twelve() {
        let mut es = EarlyStopping::new(10, 1e-6);
        let seq = std::iter::once(1.0).chain(std::iter::repeat(0.9).take(11));
        let mut stopped_at = None;
        for v in seq {
            es.update(v);
            if es.should_stop() {
                stopped_at = Some(es.epoch());
                break;
            }
        }
        assert_eq!(stopped_at, Some(12));
        assert_eq!(es.best_epoch(), 2);
    }

    #[test]
    fn tiny_decrease_is_not_improvement() {
        let mut es = EarlyStopping::new(1, 1e-6);
        assert!(es.update(1.0));
        assert!(!es.update(1.0 - 5e-7));
        assert!(es.should_stop());
    }

    #[test]
    fn plateau_reduction() {
        let mut s = ReduceLrOnPlateau::new(1e-4, 0.1, 5, 0.0, 1e-6);
        let lrs: Vec<f64> = [1.0, 1.0, 1.0, 1.0, 1.0, 1.0, 1.0].iter().map(|&v| s.step(v)).collect();
        assert_eq!(&lrs[..6], &[1e-4; 6]);
        assert!((lrs[6] - 1e-5).abs() < 1e-18);
    }
}
