use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Learning-rate decay on plateau plus early stopping, driven by one
/// monitored loss per epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScheduleConfig {
    pub initial_lr: f64,
    pub plateau_factor: f64,
    pub plateau_patience: usize,
    pub early_stop_patience: usize,
    pub max_epochs: usize,
}

impl ScheduleConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.plateau_factor > 0.0 && self.plateau_factor < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "plateau_factor must lie in (0, 1), got {}",
                self.plateau_factor
            )));
        }
        if self.plateau_patience == 0 || self.early_stop_patience == 0 {
            return Err(Error::InvalidConfig("patience values must be at least 1".into()));
        }
        if !(self.initial_lr > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "initial_lr must be positive, got {}",
                self.initial_lr
            )));
        }
        Ok(())
    }
}

/// What the loop should do after an epoch.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Decision {
    /// Learning rate for the next epoch.
    pub lr: f64,
    pub improved: bool,
    pub stop: bool,
}

#[derive(Clone, Debug)]
pub struct Schedule {
    config: ScheduleConfig,
    lr: f64,
    best: f64,
    since_best: usize,
    since_decay: usize,
}

impl Schedule {
    pub fn new(config: ScheduleConfig) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            lr: config.initial_lr,
            best: f64::INFINITY,
            since_best: 0,
            since_decay: 0,
        })
    }

    pub fn lr(&self) -> f64 {
        self.lr
    }

    pub fn best(&self) -> f64 {
        self.best
    }

    /// Records the monitored loss of the epoch just finished.
    pub fn observe(&mut self, loss: f64) -> Decision {
        let improved = loss < self.best;
        if improved {
            self.best = loss;
            self.since_best = 0;
            self.since_decay = 0;
        } else {
            self.since_best += 1;
            self.since_decay += 1;
            if self.since_decay >= self.config.plateau_patience {
                self.lr *= self.config.plateau_factor;
                self.since_decay = 0;
            }
        }
        Decision {
            lr: self.lr,
            improved,
            stop: self.since_best >= self.config.early_stop_patience,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub lr: f64,
    pub seconds: f64,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub records: Vec<EpochRecord>,
    /// Epoch whose weights were kept.
    pub best_epoch: Option<usize>,
    pub stopped_early: bool,
}

impl TrainHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,lr,seconds\n");
        for r in &self.records {
            s.push_str(&format!(
                "{},{},{},{},{:.3}\n",
                r.epoch, r.train_loss, r.val_loss, r.lr, r.seconds
            ));
        }
        s
    }
}

/// Losses reported by one epoch of work.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EpochLosses {
    pub train: f64,
    pub val: f64,
}

/// Runs `epoch(index, lr)` until early stopping or `max_epochs`, monitoring
/// the validation loss. `epoch` sees the learning rate chosen by the
/// schedule; it is responsible for keeping its own best snapshot, which
/// coincides with epochs whose validation loss strictly improved.
pub fn fit<F>(config: ScheduleConfig, mut epoch: F) -> Result<TrainHistory>
where
    F: FnMut(usize, f64) -> Result<EpochLosses>,
{
    let mut schedule = Schedule::new(config)?;
    let mut history = TrainHistory::default();
    for e in 0..config.max_epochs {
        let lr = schedule.lr();
        let start = std::time::Instant::now();
        let losses = epoch(e, lr)?;
        let seconds = start.elapsed().as_secs_f64();
        history.records.push(EpochRecord {
            epoch: e,
            train_loss: losses.train,
            val_loss: losses.val,
            lr,
            seconds,
        });
        let d = schedule.observe(losses.val);
        if d.improved {
            history.best_epoch = Some(e);
        }
        if d.stop {
            history.stopped_early = true;
            break;
        }
    }
    Ok(history)
}
