//! The training log and checkpoint sink of a run directory.
//!
//! `log.jsonl` holds one JSON object per line, tagged by `kind`: `step`
//! records carry the loss components, `epoch` records the mean loss,
//! learning rate, and (from the first validated epoch on) the validation
//! metrics and the schedule's decision; `note` records explain anything
//! unusual. Nothing time-dependent is logged, so reruns are byte-identical.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use fccdn_core::data::ChannelStats;
use fccdn_core::training::{EpochRecord, StepRecord, TrainSink, TrainState};
use fccdn_core::NetworkConfig;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};

pub const LOG_FILE: &str = "log.jsonl";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const ABORT_CHECKPOINT: &str = "abort.ckpt";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Step(StepRecord),
    Epoch(EpochRecord),
    Note { message: String },
}

pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .enumerate()
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))
        })
        .collect()
}

/// Writes the log and the best/last checkpoints into a run directory.
pub struct RunDirSink {
    dir: PathBuf,
    log: BufWriter<File>,
    network: NetworkConfig,
    stats: ChannelStats,
    pub best_written: bool,
}

impl RunDirSink {
    /// `append` continues an existing log (resumed runs).
    pub fn new(dir: &Path, network: &NetworkConfig, stats: &ChannelStats, append: bool) -> Result<Self> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let path = dir.join(LOG_FILE);
        let file = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(&path)
            .map_err(|e| Error::io(&path, e))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            log: BufWriter::new(file),
            network: network.clone(),
            stats: stats.clone(),
            best_written: append && dir.join(BEST_CHECKPOINT).exists(),
        })
    }

    pub fn record(&mut self, rec: &LogRecord) -> Result<()> {
        let path = self.dir.join(LOG_FILE);
        let line = serde_json::to_string(rec).expect("log records serialize");
        writeln!(self.log, "{line}").map_err(|e| Error::io(&path, e))
    }

    pub fn flush(&mut self) -> Result<()> {
        let path = self.dir.join(LOG_FILE);
        self.log.flush().map_err(|e| Error::io(&path, e))
    }

    pub fn save(&self, name: &str, state: &TrainState<f32>) -> Result<()> {
        Checkpoint::from_state(&self.network, Some(&self.stats), state).save(&self.dir.join(name))
    }
}

fn core_err(e: Error) -> fccdn_core::Error {
    match e {
        Error::Core(c) => c,
        other => fccdn_core::Error::Data(other.to_string()),
    }
}

impl TrainSink<f32> for RunDirSink {
    fn on_step(&mut self, rec: &StepRecord) -> fccdn_core::Result<()> {
        self.record(&LogRecord::Step(rec.clone())).map_err(core_err)
    }

    fn on_epoch(&mut self, rec: &EpochRecord) -> fccdn_core::Result<()> {
        match &rec.validation {
            Some(v) => log::info!(
                "epoch {} step {} lr {:.3e} loss {:.4} val F1 {:.4} ({:?})",
                rec.epoch,
                rec.step,
                rec.lr,
                rec.mean_loss,
                v.f1,
                rec.event.expect("validated epochs carry an event")
            ),
            None => log::info!(
                "epoch {} step {} lr {:.3e} loss {:.4}",
                rec.epoch,
                rec.step,
                rec.lr,
                rec.mean_loss
            ),
        }
        self.record(&LogRecord::Epoch(rec.clone())).map_err(core_err)?;
        self.flush().map_err(core_err)
    }

    fn save_best(&mut self, state: &TrainState<f32>) -> fccdn_core::Result<()> {
        self.best_written = true;
        self.save(BEST_CHECKPOINT, state).map_err(core_err)
    }

    fn save_last(&mut self, state: &TrainState<f32>) -> fccdn_core::Result<()> {
        self.save(LAST_CHECKPOINT, state).map_err(core_err)
    }

    fn dump_state(&mut self, state: &TrainState<f32>, detail: &str) -> fccdn_core::Result<()> {
        log::error!("non-finite loss: {detail}");
        self.record(&LogRecord::Note {
            message: format!("non-finite loss, state dumped to {ABORT_CHECKPOINT}: {detail}"),
        })
        .map_err(core_err)?;
        self.flush().map_err(core_err)?;
        self.save(ABORT_CHECKPOINT, state).map_err(core_err)
    }
}
