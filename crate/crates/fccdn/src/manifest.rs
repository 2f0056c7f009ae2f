//! Dataset manifests and normalization statistics on disk.
//!
//! A manifest is a JSON-lines file, one sample per line:
//!
//! ```text
//! {"id":"synth_00000","split":"train","t1":"synth_00000/t1.png","t2":"synth_00000/t2.png","change":"synth_00000/change.png","seg1":"synth_00000/seg1.png","seg2":"synth_00000/seg2.png"}
//! ```
//!
//! Paths are relative to the manifest's directory; `change`, `seg1` and
//! `seg2` may be absent. The statistics file is plain text with one
//! `channel mean std` line per channel after a `#` header.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use fccdn_core::data::{ChannelStats, ImagePair, Split};
use fccdn_core::training::PairSource;
use serde::{Deserialize, Serialize};

use crate::error::{read, write, Error, Result};
use crate::png_io;

pub const MANIFEST_FILE: &str = "manifest.jsonl";
pub const STATS_FILE: &str = "stats.txt";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestEntry {
    pub id: String,
    pub split: Split,
    pub t1: PathBuf,
    pub t2: PathBuf,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub change: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg1: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seg2: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Manifest {
    /// Directory the entry paths are relative to.
    pub root: PathBuf,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = String::from_utf8(read(path)?).map_err(|_| Error::format(path, "not UTF-8"))?;
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let e: ManifestEntry = serde_json::from_str(line)
                .map_err(|e| Error::format(path, format!("line {}: {e}", i + 1)))?;
            entries.push(e);
        }
        let m = Self {
            root: path.parent().map(Path::to_path_buf).unwrap_or_default(),
            entries,
        };
        m.check_unique().map_err(|msg| Error::format(path, msg))?;
        Ok(m)
    }

    fn check_unique(&self) -> std::result::Result<(), String> {
        let mut seen = BTreeSet::new();
        for e in &self.entries {
            if !seen.insert(&e.id) {
                return Err(format!("duplicate sample id `{}`", e.id));
            }
        }
        Ok(())
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.check_unique().map_err(|msg| Error::format(path, msg))?;
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("manifest entries serialize"));
            out.push('\n');
        }
        write(path, out.as_bytes())
    }

    pub fn split(&self, split: Split) -> SplitView<'_> {
        SplitView {
            manifest: self,
            entries: self.entries.iter().filter(|e| e.split == split).collect(),
        }
    }

    pub fn all(&self) -> SplitView<'_> {
        SplitView {
            manifest: self,
            entries: self.entries.iter().collect(),
        }
    }

    /// Reads the images and labels of one entry.
    pub fn load_pair(&self, e: &ManifestEntry) -> Result<ImagePair> {
        let p = |rel: &Path| self.root.join(rel);
        let label = |rel: &Option<PathBuf>| rel.as_ref().map(|r| png_io::read_label(&p(r))).transpose();
        let pair = ImagePair {
            id: e.id.clone(),
            t1: png_io::read_rgb(&p(&e.t1))?,
            t2: png_io::read_rgb(&p(&e.t2))?,
            change: label(&e.change)?,
            seg1: label(&e.seg1)?,
            seg2: label(&e.seg2)?,
        };
        pair.validate().map_err(|err| Error::format(&p(&e.t1), err.to_string()))?;
        Ok(pair)
    }
}

/// The entries of one split, loaded from disk on access.
pub struct SplitView<'a> {
    manifest: &'a Manifest,
    pub entries: Vec<&'a ManifestEntry>,
}

impl SplitView<'_> {
    pub fn load_all(&self) -> Result<Vec<ImagePair>> {
        self.entries.iter().map(|e| self.manifest.load_pair(e)).collect()
    }

    pub fn load(&self, index: usize) -> Result<ImagePair> {
        self.manifest.load_pair(self.entries[index])
    }
}

impl PairSource for SplitView<'_> {
    fn len(&self) -> usize {
        self.entries.len()
    }

    fn get(&self, index: usize) -> fccdn_core::Result<ImagePair> {
        self.load(index)
            .map_err(|e| fccdn_core::Error::Data(e.to_string()))
    }
}

pub fn save_stats(path: &Path, stats: &ChannelStats) -> Result<()> {
    let mut out = String::from("# channel mean std\n");
    for (c, (m, s)) in stats.mean.iter().zip(&stats.std).enumerate() {
        out.push_str(&format!("{c} {m:?} {s:?}\n"));
    }
    write(path, out.as_bytes())
}

pub fn load_stats(path: &Path) -> Result<ChannelStats> {
    let text = String::from_utf8(read(path)?).map_err(|_| Error::format(path, "not UTF-8"))?;
    let mut mean = Vec::new();
    let mut std = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let bad = || Error::format(path, format!("line {}: expected `channel mean std`", i + 1));
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 3 || f[0].parse::<usize>().ok() != Some(mean.len()) {
            return Err(bad());
        }
        mean.push(f[1].parse::<f64>().map_err(|_| bad())?);
        std.push(f[2].parse::<f64>().map_err(|_| bad())?);
    }
    let stats = ChannelStats { mean, std };
    stats
        .validate(stats.mean.len())
        .map_err(|e| Error::format(path, e.to_string()))?;
    Ok(stats)
}

/// Writes a pair's images and labels under `root/<id>/` and returns its
/// manifest entry.
pub fn write_pair(root: &Path, pair: &ImagePair, split: Split) -> Result<ManifestEntry> {
    let rel = |name: &str| PathBuf::from(&pair.id).join(name);
    let t1 = rel("t1.png");
    let t2 = rel("t2.png");
    png_io::write_rgb(&root.join(&t1), &pair.t1)?;
    png_io::write_rgb(&root.join(&t2), &pair.t2)?;
    let label = |m: &Option<fccdn_core::data::Mask8>, name: &str| -> Result<Option<PathBuf>> {
        let Some(m) = m else { return Ok(None) };
        let r = rel(name);
        if m.data.iter().all(|&v| v <= 1) {
            png_io::write_label(&root.join(&r), m)?;
        } else {
            let k = m.data.iter().copied().max().unwrap_or(0) as usize + 1;
            png_io::write_class_mask(&root.join(&r), m, k)?;
        }
        Ok(Some(r))
    };
    Ok(ManifestEntry {
        id: pair.id.clone(),
        split,
        t1,
        t2,
        change: label(&pair.change, "change.png")?,
        seg1: label(&pair.seg1, "seg1.png")?,
        seg2: label(&pair.seg2, "seg2.png")?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use fccdn_core::data::{gen_synthetic, SynthConfig};

    #[test]
    fn manifest_round_trip_and_pairs_reload() {
        let d = tempfile::tempdir().unwrap();
        let pairs = gen_synthetic(3, 32, 1, &SynthConfig::default()).unwrap();
        let entries = pairs
            .iter()
            .zip([Split::Train, Split::Validation, Split::Test])
            .map(|(p, s)| write_pair(d.path(), p, s).unwrap())
            .collect();
        let path = d.path().join(MANIFEST_FILE);
        Manifest {
            root: d.path().into(),
            entries,
        }
        .save(&path)
        .unwrap();
        let m = Manifest::load(&path).unwrap();
        assert_eq!(m.entries.len(), 3);
        assert_eq!(m.split(Split::Validation).entries[0].id, pairs[1].id);
        assert_eq!(m.all().load_all().unwrap(), pairs);
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let d = tempfile::tempdir().unwrap();
        let path = d.path().join(MANIFEST_FILE);
        let line = r#"{"id":"a","split":"train","t1":"a/t1.png","t2":"a/t2.png"}"#;
        std::fs::write(&path, format!("{line}\n{line}\n")).unwrap();
        assert!(Manifest::load(&path).is_err());
    }

    #[test]
    fn stats_round_trip_exactly() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join(STATS_FILE);
        let s = ChannelStats {
            mean: vec![0.1 + 0.2, 100.0 / 3.0, 7.0],
            std: vec![1.0 / 7.0, 55.5, 1e-3],
        };
        save_stats(&p, &s).unwrap();
        assert_eq!(load_stats(&p).unwrap(), s);
    }

    #[test]
    fn zero_std_in_stats_file_is_an_error() {
        let d = tempfile::tempdir().unwrap();
        let p = d.path().join(STATS_FILE);
        std::fs::write(&p, "0 1.0 0.0\n").unwrap();
        assert!(load_stats(&p).is_err());
    }
}
