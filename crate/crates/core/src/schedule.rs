//! Reduce-on-plateau learning-rate schedule with delayed validation and
//! early stopping.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PlateauConfig {
    pub learning_rate: f64,
    pub factor: f64,
    /// Validated epochs without improvement that trigger a reduction.
    pub patience: usize,
    /// Training stops instead of performing this many-th-plus-one
    /// reduction.
    pub max_reductions: usize,
    /// First epoch (0-based) that is validated.
    pub validation_start_epoch: usize,
    /// Hard epoch cap.
    pub max_epochs: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.002,
            factor: 0.3,
            patience: 10,
            max_reductions: 3,
            validation_start_epoch: 30,
            max_epochs: 300,
        }
    }
}

impl PlateauConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.factor > 0.0 && self.factor < 1.0) {
            return Err(Error::Config(alloc::format!(
                "plateau factor must lie in (0, 1), got {}",
                self.factor
            )));
        }
        if self.patience == 0 {
            return Err(Error::Config("plateau patience must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        Ok(())
    }
}

/// What the schedule decided after a validated epoch.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlateauEvent {
    /// New best score; the caller saves the best checkpoint.
    Improved,
    NoImprovement,
    /// Learning rate multiplied by the factor.
    Reduced,
    /// The next reduction would exceed the limit: stop training.
    Stop,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlateauState {
    pub best_score: Option<f64>,
    pub best_epoch: Option<usize>,
    pub epochs_since_improvement: usize,
    pub reductions_done: usize,
    pub stopped: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlateauSchedule {
    pub cfg: PlateauConfig,
    pub state: PlateauState,
}

impl PlateauSchedule {
    pub fn new(cfg: PlateauConfig) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            state: PlateauState {
                best_score: None,
                best_epoch: None,
                epochs_since_improvement: 0,
                reductions_done: 0,
                stopped: false,
            },
        })
    }

    pub fn resume(cfg: PlateauConfig, state: PlateauState) -> Result<Self> {
        cfg.validate()?;
        Ok(Self { cfg, state })
    }

    /// `learning_rate · factor^reductions_done`.
    pub fn lr(&self) -> f64 {
        self.cfg.learning_rate * num_traits::Float::powi(self.cfg.factor, self.state.reductions_done as i32)
    }

    pub fn should_validate(&self, epoch: usize) -> bool {
        epoch >= self.cfg.validation_start_epoch
    }

    /// Records the validation score of `epoch`. Improvement means strictly
    /// greater than the best so far.
    pub fn observe(&mut self, epoch: usize, score: f64) -> PlateauEvent {
        let s = &mut self.state;
        if s.stopped {
            return PlateauEvent::Stop;
        }
        if s.best_score.is_none_or(|b| score > b) {
            s.best_score = Some(score);
            s.best_epoch = Some(epoch);
            s.epochs_since_improvement = 0;
            return PlateauEvent::Improved;
        }
        s.epochs_since_improvement += 1;
        if s.epochs_since_improvement < self.cfg.patience {
            return PlateauEvent::NoImprovement;
        }
        s.epochs_since_improvement = 0;
        if s.reductions_done >= self.cfg.max_reductions {
            s.stopped = true;
            PlateauEvent::Stop
        } else {
            s.reductions_done += 1;
            PlateauEvent::Reduced
        }
    }

    /// Whether training may run `epoch`.
    pub fn may_run(&self, epoch: usize) -> bool {
        !self.state.stopped && epoch < self.cfg.max_epochs
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use alloc::vec::Vec;

    /// Runs the schedule over scripted scores; returns the learning rate
    /// in effect at each validated epoch and the events.
    fn script(scores: &[f64]) -> (PlateauSchedule, Vec<f64>, Vec<PlateauEvent>) {
        let mut s = PlateauSchedule::new(PlateauConfig::default()).unwrap();
        let (mut lrs, mut events) = (Vec::new(), Vec::new());
        let mut epoch = 0;
        while s.may_run(epoch) {
            if s.should_validate(epoch) {
                let score = scores.get(epoch - 30).copied().unwrap_or(0.0);
                lrs.push(s.lr());
                events.push(s.observe(epoch, score));
            }
            epoch += 1;
        }
        (s, lrs, events)
    }

    #[test]
    fn plateau_reductions_then_stop() {
        let scores = [0.5, 0.7, 0.6];
        let (s, lrs, events) = script(&scores);
        let mut distinct: Vec<f64> = Vec::new();
        for &lr in &lrs {
            if distinct.last() != Some(&lr) {
                distinct.push(lr);
            }
        }
        let want = [0.002, 6e-4, 1.8e-4, 5.4e-5];
        assert_eq!(distinct.len(), 4);
        for (a, b) in distinct.iter().zip(want) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
        assert_eq!(events.iter().filter(|e| **e == PlateauEvent::Reduced).count(), 3);
        assert_eq!(events.last(), Some(&PlateauEvent::Stop));
        assert!(s.state.stopped);
        assert_eq!(s.state.best_epoch, Some(31));
        // Improvement at epoch 31, then 4 × 10 stagnant epochs.
        assert_eq!(lrs.len(), 2 + 40);
    }

    #[test]
    fn nothing_is_validated_before_the_start_epoch() {
        let s = PlateauSchedule::new(PlateauConfig::default()).unwrap();
        assert!((0..30).all(|e| !s.should_validate(e)));
        assert!(s.should_validate(30));
    }

    #[test]
    fn ties_do_not_count_as_improvement() {
        let mut s = PlateauSchedule::new(PlateauConfig::default()).unwrap();
        assert_eq!(s.observe(30, 0.5), PlateauEvent::Improved);
        assert_eq!(s.observe(31, 0.5), PlateauEvent::NoImprovement);
        assert_eq!(s.state.best_epoch, Some(30));
    }

    #[test]
    fn max_epochs_caps_training() {
        let s = PlateauSchedule::new(PlateauConfig {
            max_epochs: 3,
            ..PlateauConfig::default()
        })
        .unwrap();
        assert!(s.may_run(2) && !s.may_run(3));
    }

    #[test]
    fn bad_factors_are_rejected() {
        for f in [0.0, 1.0, -0.3] {
            assert!(PlateauSchedule::new(PlateauConfig {
                factor: f,
                ..PlateauConfig::default()
            })
            .is_err());
        }
    }
}
