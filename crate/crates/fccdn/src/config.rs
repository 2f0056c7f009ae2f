//! The resolved configuration of one command run.
//!
//! Values come from defaults, then an optional TOML file, then command-line
//! flags. The resolved result is written to `<out>/config.toml`, and
//! `--config <out>/config.toml` replays the run. Every section and field is
//! optional in the file:
//!
//! ```toml
//! [paths]      # manifest, stats, out, checkpoint, resume, source
//! [network]    # fccdn_core::NetworkConfig
//! [train]      # fccdn_core::training::TrainConfig
//! [augment]    # fccdn_core::data::AugmentationConfig
//! [inference]  # split, batch_size, tile, overlap, render_errors
//! [synth]      # n, size, seed, split, [synth.scene]
//! [prepare]    # size, overlap, split, seed
//! ```
//!
//! `FCCDN_OUTPUT_ROOT`, when set, is prepended to relative output
//! directories.

use std::path::{Path, PathBuf};

use fccdn_core::data::{AugmentationConfig, Split, SynthConfig};
use fccdn_core::training::TrainConfig;
use fccdn_core::NetworkConfig;
use serde::{Deserialize, Serialize};

use crate::error::{read, write, Error, Result};

pub const CONFIG_FILE: &str = "config.toml";
pub const OUTPUT_ROOT_ENV: &str = "FCCDN_OUTPUT_ROOT";

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub manifest: Option<PathBuf>,
    /// Normalization statistics; defaults to `stats.txt` beside the
    /// manifest, then to the checkpoint's embedded copy.
    pub stats: Option<PathBuf>,
    /// Output (run) directory.
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    /// Training snapshot to continue from.
    pub resume: Option<PathBuf>,
    /// Source directory of `prepare`.
    pub source: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InferenceConfig {
    /// `train`, `validation`, `test` or `all`.
    pub split: String,
    pub batch_size: usize,
    /// Tiled prediction window; whole images when unset.
    pub tile: Option<usize>,
    pub overlap: usize,
    pub render_errors: bool,
}

impl Default for InferenceConfig {
    fn default() -> Self {
        Self {
            split: "test".into(),
            batch_size: 8,
            tile: None,
            overlap: 32,
            render_errors: false,
        }
    }
}

impl InferenceConfig {
    /// `None` selects every split.
    pub fn split(&self) -> Result<Option<Split>> {
        if self.split == "all" {
            return Ok(None);
        }
        Split::parse(&self.split)
            .map(Some)
            .ok_or_else(|| Error::Usage(format!("unknown split `{}`", self.split)))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthSection {
    pub n: usize,
    pub size: usize,
    pub seed: u64,
    /// Train:validation:test ratio.
    pub split: String,
    pub scene: SynthConfig,
}

impl Default for SynthSection {
    fn default() -> Self {
        Self {
            n: 64,
            size: 64,
            seed: 7,
            split: "7:1:2".into(),
            scene: SynthConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PrepareSection {
    pub size: usize,
    pub overlap: usize,
    pub split: String,
    pub seed: u64,
}

impl Default for PrepareSection {
    fn default() -> Self {
        Self {
            size: 256,
            overlap: 0,
            split: "7:1:2".into(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub paths: Paths,
    pub network: NetworkConfig,
    pub train: TrainConfig,
    pub augment: AugmentationConfig,
    pub inference: InferenceConfig,
    pub synth: SynthSection,
    pub prepare: PrepareSection,
}

impl RunConfig {
    pub fn from_toml(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Usage(format!("{}: {e}", path.display())))
    }

    /// Defaults overlaid with the file, if any.
    pub fn load(path: Option<&Path>) -> Result<Self> {
        match path {
            None => Ok(Self::default()),
            Some(p) => {
                let bytes = read(p).map_err(|e| Error::Usage(e.to_string()))?;
                let text = String::from_utf8(bytes)
                    .map_err(|_| Error::Usage(format!("{}: not UTF-8", p.display())))?;
                Self::from_toml(&text, p)
            }
        }
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run configuration serializes")
    }

    /// Writes `<out>/config.toml`.
    pub fn echo(&self) -> Result<PathBuf> {
        let path = self.out_dir()?.join(CONFIG_FILE);
        write(&path, self.to_toml().as_bytes())?;
        Ok(path)
    }

    pub fn out_dir(&self) -> Result<&Path> {
        self.paths
            .out
            .as_deref()
            .ok_or_else(|| Error::Usage("an output directory is required (--out)".into()))
    }

    pub fn require<'a>(p: &'a Option<PathBuf>, flag: &str) -> Result<&'a Path> {
        p.as_deref()
            .ok_or_else(|| Error::Usage(format!("missing required path (--{flag})")))
    }

    /// Applies the output-root override to a relative output directory.
    pub fn resolve_output_root(&mut self, root: Option<&Path>) {
        if let (Some(root), Some(out)) = (root, self.paths.out.as_mut()) {
            if out.is_relative() {
                *out = root.join(&*out);
            }
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.network.validate()?;
        self.train.validate()?;
        self.inference.split()?;
        if self.inference.batch_size == 0 {
            return Err(Error::Usage("inference batch size must be at least 1".into()));
        }
        if let Some(t) = self.inference.tile {
            if t == 0 || t % 16 != 0 || self.inference.overlap >= t {
                return Err(Error::Usage(format!(
                    "tile {t} must be a positive multiple of 16 larger than the overlap"
                )));
            }
        }
        parse_ratio(&self.synth.split)?;
        parse_ratio(&self.prepare.split)?;
        Ok(())
    }
}

/// `"7:1:2"` → `[7, 1, 2]`.
pub fn parse_ratio(s: &str) -> Result<[u32; 3]> {
    let parts: Vec<_> = s.split(':').map(|p| p.trim().parse::<u32>()).collect();
    match parts.as_slice() {
        [Ok(a), Ok(b), Ok(c)] if a + b + c > 0 => Ok([*a, *b, *c]),
        _ => Err(Error::Usage(format!(
            "split ratio `{s}` must look like 7:1:2 with a positive sum"
        ))),
    }
}
