//! The five pipeline commands. Each takes a fully resolved [`RunConfig`],
//! echoes it to the output directory first, and never modifies its inputs.

use std::path::{Path, PathBuf};

use fccdn_core::data::{
    gen_synthetic, split_assignments, tile_origins, ChannelStats, ImagePair, Split, StatsAccumulator,
};
use fccdn_core::inference::{self, Prediction};
use fccdn_core::metrics::{ConfusionCounts, MetricsReport};
use fccdn_core::training::{self, PairSource, SplitValidator, TrainState};
use fccdn_core::{Network, ParamStore};
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{parse_ratio, RunConfig};
use crate::error::{write, Error, Result};
use crate::manifest::{self, Manifest, SplitView, MANIFEST_FILE, STATS_FILE};
use crate::png_io;
use crate::runlog::{LogRecord, RunDirSink, BEST_CHECKPOINT, LAST_CHECKPOINT};

pub const SUMMARY_FILE: &str = "summary.json";
pub const METRICS_FILE: &str = "metrics.json";

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(v).expect("reports serialize");
    s.push('\n');
    write(path, s.as_bytes())
}

fn save_dataset(out: &Path, entries: Vec<manifest::ManifestEntry>, stats: Option<ChannelStats>) -> Result<()> {
    Manifest {
        root: out.to_path_buf(),
        entries,
    }
    .save(&out.join(MANIFEST_FILE))?;
    if let Some(s) = stats {
        manifest::save_stats(&out.join(STATS_FILE), &s)?;
    }
    Ok(())
}

/// Writes a synthetic dataset: one directory per sample, the manifest, and
/// the training-split statistics.
pub fn cmd_synth(cfg: &RunConfig) -> Result<()> {
    let s = &cfg.synth;
    if s.size == 0 || !s.size.is_multiple_of(16) {
        return Err(Error::Usage(format!(
            "image size {} is not a positive multiple of 16",
            s.size
        )));
    }
    let out = cfg.out_dir()?;
    cfg.echo()?;
    let pairs = gen_synthetic(s.n, s.size, s.seed, &s.scene)?;
    let splits = split_assignments(s.n, parse_ratio(&s.split)?, s.seed)?;
    let mut acc = StatsAccumulator::default();
    let mut entries = Vec::with_capacity(pairs.len());
    for (p, &split) in pairs.iter().zip(&splits) {
        if split == Split::Train {
            acc.add_pair(p)?;
        }
        entries.push(manifest::write_pair(out, p, split)?);
    }
    save_dataset(out, entries, acc.finish().ok())?;
    log::info!("wrote {} synthetic pairs to {}", pairs.len(), out.display());
    Ok(())
}

const T1_DIRS: [&str; 2] = ["t1", "A"];
const T2_DIRS: [&str; 2] = ["t2", "B"];
const LABEL_DIRS: [&str; 1] = ["label"];
const SEG1_DIRS: [&str; 1] = ["seg1"];
const SEG2_DIRS: [&str; 1] = ["seg2"];

fn find_dir(src: &Path, names: &[&str]) -> Option<PathBuf> {
    names.iter().map(|n| src.join(n)).find(|p| p.is_dir())
}

/// Tiles a directory of image triples into a dataset.
///
/// Expected layout: `<source>/{t1|A}/<name>.png`, `<source>/{t2|B}/<name>.png`,
/// `<source>/label/<name>.png`, optionally `<source>/seg1/` and
/// `<source>/seg2/`. Images are assigned to splits before tiling, so tiles
/// of one image never straddle splits.
pub fn cmd_prepare(cfg: &RunConfig) -> Result<()> {
    let p = &cfg.prepare;
    let src = RunConfig::require(&cfg.paths.source, "source")?;
    if p.size == 0 || !p.size.is_multiple_of(16) || p.overlap >= p.size {
        return Err(Error::Usage(format!(
            "tile size {} must be a positive multiple of 16 larger than the overlap {}",
            p.size, p.overlap
        )));
    }
    let ratio = parse_ratio(&p.split)?;
    let t1_dir = find_dir(src, &T1_DIRS);
    let names: Vec<String> = match &t1_dir {
        Some(d) => {
            let mut v: Vec<String> = std::fs::read_dir(d)
                .map_err(|e| Error::io(d, e))?
                .filter_map(|e| e.ok())
                .map(|e| e.file_name().to_string_lossy().into_owned())
                .filter(|n| n.to_ascii_lowercase().ends_with(".png"))
                .collect();
            v.sort();
            v
        }
        None => Vec::new(),
    };
    if names.is_empty() {
        return Err(Error::Usage(format!(
            "{}: no PNG images found under t1/ (or A/)",
            src.display()
        )));
    }
    let t1_dir = t1_dir.expect("names found");
    let t2_dir = find_dir(src, &T2_DIRS)
        .ok_or_else(|| Error::Usage(format!("{}: missing t2/ (or B/)", src.display())))?;
    let label_dir = find_dir(src, &LABEL_DIRS);
    let seg_dirs = (find_dir(src, &SEG1_DIRS), find_dir(src, &SEG2_DIRS));

    let out = cfg.out_dir()?;
    cfg.echo()?;

    // Load and check everything first, reporting every bad file.
    let mut problems = Vec::new();
    let mut pairs = Vec::new();
    for name in &names {
        let stem = name.rsplit_once('.').map_or(name.as_str(), |(s, _)| s);
        let load = || -> Result<ImagePair> {
            let lab = |d: &Option<PathBuf>| d.as_ref().map(|d| png_io::read_label(&d.join(name))).transpose();
            let pair = ImagePair {
                id: stem.to_string(),
                t1: png_io::read_rgb(&t1_dir.join(name))?,
                t2: png_io::read_rgb(&t2_dir.join(name))?,
                change: lab(&label_dir)?,
                seg1: lab(&seg_dirs.0)?,
                seg2: lab(&seg_dirs.1)?,
            };
            pair.validate()
                .map_err(|e| Error::format(&t1_dir.join(name), e.to_string()))?;
            if pair.width() < p.size || pair.height() < p.size {
                return Err(Error::format(
                    &t1_dir.join(name),
                    format!("{}x{} is smaller than the tile size {}", pair.width(), pair.height(), p.size),
                ));
            }
            Ok(pair)
        };
        match load() {
            Ok(pair) => pairs.push(pair),
            Err(e) => problems.push(e.to_string()),
        }
    }
    if !problems.is_empty() {
        for msg in &problems {
            eprintln!("error: {msg}");
        }
        return Err(Error::Format {
            path: src.to_path_buf(),
            msg: format!("{} of {} source images are unusable", problems.len(), names.len()),
        });
    }

    let splits = split_assignments(pairs.len(), ratio, p.seed)?;
    let mut acc = StatsAccumulator::default();
    let mut entries = Vec::new();
    for (pair, &split) in pairs.iter().zip(&splits) {
        for y in tile_origins(pair.height(), p.size, p.overlap)? {
            for x in tile_origins(pair.width(), p.size, p.overlap)? {
                let tile = pair.crop(x, y, p.size);
                if split == Split::Train {
                    acc.add_pair(&tile)?;
                }
                entries.push(manifest::write_pair(out, &tile, split)?);
            }
        }
    }
    let n = entries.len();
    save_dataset(out, entries, acc.finish().ok())?;
    log::info!("wrote {n} tiles from {} images to {}", pairs.len(), out.display());
    Ok(())
}

fn load_manifest(cfg: &RunConfig) -> Result<Manifest> {
    Manifest::load(RunConfig::require(&cfg.paths.manifest, "manifest")?)
}

/// Explicit stats file, then the checkpoint's copy, then `stats.txt` beside
/// the manifest.
fn resolve_stats(cfg: &RunConfig, embedded: Option<&ChannelStats>, m: &Manifest) -> Result<Option<ChannelStats>> {
    if let Some(p) = &cfg.paths.stats {
        return manifest::load_stats(p).map(Some);
    }
    if let Some(s) = embedded {
        return Ok(Some(s.clone()));
    }
    let beside = m.root.join(STATS_FILE);
    if beside.exists() {
        return manifest::load_stats(&beside).map(Some);
    }
    Ok(None)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub epochs: usize,
    pub steps: u64,
    pub final_lr: f64,
    pub best_val_f1: Option<f64>,
    pub best_epoch: Option<usize>,
    pub reductions: usize,
    pub stopped_by_schedule: bool,
}

/// Trains a model; writes `config.toml`, `log.jsonl`, `best.ckpt`,
/// `last.ckpt` and `summary.json` to the run directory.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainSummary> {
    let m = load_manifest(cfg)?;
    let train_view = m.split(Split::Train);
    let val_view = m.split(Split::Validation);
    if train_view.is_empty() {
        return Err(fccdn_core::Error::EmptySplit("train".into()).into());
    }
    if val_view.is_empty() {
        return Err(fccdn_core::Error::EmptySplit("validation".into()).into());
    }
    let stats = match resolve_stats(cfg, None, &m)? {
        Some(s) => s,
        None => ChannelStats::compute(&train_view.load_all()?)?,
    };
    let net = Network::new(&cfg.network)?;
    let out = cfg.out_dir()?;
    let mut state = match &cfg.paths.resume {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            if ck.network != cfg.network {
                return Err(fccdn_core::Error::Incompatible(
                    "the snapshot was trained with a different network configuration".into(),
                )
                .into());
            }
            ck.train_state(&net)?
        }
        None => TrainState::new(&net, &cfg.train)?,
    };
    cfg.echo()?;
    let mut sink = RunDirSink::new(out, &cfg.network, &stats, cfg.paths.resume.is_some())?;
    let mut validator = SplitValidator {
        pairs: &val_view,
        stats: &stats,
        batch_size: cfg.inference.batch_size,
    };
    log::info!(
        "training {} parameters on {} pairs ({} for validation)",
        net.param_count(),
        train_view.len(),
        val_view.len()
    );
    let res = training::train(
        &net,
        &cfg.train,
        &cfg.augment,
        &stats,
        &train_view,
        &mut validator,
        &mut sink,
        &mut state,
    );
    if let Err(e) = res {
        sink.flush()?;
        return Err(e.into());
    }
    if !sink.best_written {
        sink.record(&LogRecord::Note {
            message: format!("no validated epoch; {BEST_CHECKPOINT} holds the final weights"),
        })?;
        sink.save(BEST_CHECKPOINT, &state)?;
    }
    sink.flush()?;
    let summary = TrainSummary {
        epochs: state.epoch,
        steps: state.step,
        final_lr: state.current_lr,
        best_val_f1: state.plateau.best_score,
        best_epoch: state.plateau.best_epoch,
        reductions: state.plateau.reductions_done,
        stopped_by_schedule: state.plateau.stopped,
    };
    write_json(&out.join(SUMMARY_FILE), &summary)?;
    debug_assert!(out.join(LAST_CHECKPOINT).exists());
    Ok(summary)
}

fn view<'a>(cfg: &RunConfig, m: &'a Manifest) -> Result<SplitView<'a>> {
    Ok(match cfg.inference.split()? {
        Some(s) => m.split(s),
        None => m.all(),
    })
}

struct Loaded {
    net: Network,
    params: ParamStore<f32>,
    stats: ChannelStats,
}

fn load_model(cfg: &RunConfig, m: &Manifest) -> Result<Loaded> {
    let ck = Checkpoint::load(RunConfig::require(&cfg.paths.checkpoint, "checkpoint")?)?;
    let net = Network::new(&ck.network)?;
    let params = ck.params(&net)?;
    let stats = resolve_stats(cfg, ck.stats.as_ref(), m)?.ok_or_else(|| {
        Error::Usage("no normalization statistics: pass --stats or use a checkpoint that embeds them".into())
    })?;
    Ok(Loaded { net, params, stats })
}

/// Segmentation quality of single-class heads, under both label readings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationReport {
    pub direct: MetricsReport,
    pub flipped: MetricsReport,
    /// The larger of the two F1 scores.
    pub f1: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub split: String,
    pub samples: usize,
    pub counts: ConfusionCounts,
    pub metrics: MetricsReport,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub segmentation: Option<SegmentationReport>,
}

/// Scores a checkpoint on a labelled split, prints the report and writes it
/// to `<out>/metrics.json`.
pub fn cmd_eval(cfg: &RunConfig) -> Result<EvalReport> {
    let m = load_manifest(cfg)?;
    let v = view(cfg, &m)?;
    let model = load_model(cfg, &m)?;
    let out = cfg.out_dir()?;
    cfg.echo()?;
    let bs = cfg.inference.batch_size;
    let counts = training::confusion(&model.net, &model.params, &v, &model.stats, bs)?;
    let has_seg_labels = v.entries.iter().all(|e| e.seg1.is_some() && e.seg2.is_some());
    let binary_heads = model.net.seg_head.as_ref().is_some_and(|_| model.net.cfg.num_seg_classes == 1);
    let segmentation = if binary_heads && has_seg_labels {
        let [d, f] = inference::segmentation_confusion(&model.net, &model.params, &v, &model.stats, bs)?;
        let (direct, flipped) = (d.report(), f.report());
        Some(SegmentationReport {
            f1: direct.f1.max(flipped.f1),
            direct,
            flipped,
        })
    } else {
        None
    };
    let report = EvalReport {
        split: cfg.inference.split.clone(),
        samples: v.len(),
        counts,
        metrics: counts.report(),
        segmentation,
    };
    write_json(&out.join(METRICS_FILE), &report)?;
    println!("{}", serde_json::to_string_pretty(&report).expect("reports serialize"));
    Ok(report)
}

/// Writes `{id}_seg1.png` and `{id}_seg2.png`: 1-bit masks for a
/// single-class head, palette class-index images otherwise.
pub fn export_segmentations(out: &Path, id: &str, pred: &Prediction<f32>, classes: usize) -> Result<()> {
    let (Some(s1), Some(s2)) = (&pred.seg1, &pred.seg2) else {
        return Err(fccdn_core::Error::MissingSegHeads.into());
    };
    for (m, suffix) in [(s1, "seg1"), (s2, "seg2")] {
        let path = out.join(format!("{id}_{suffix}.png"));
        if classes == 1 {
            png_io::write_mask_1bit(&path, m)?;
        } else {
            png_io::write_class_mask(&path, m, classes)?;
        }
    }
    Ok(())
}

fn largest_tile(h: usize, w: usize) -> Option<usize> {
    let t = h.min(w) / 16 * 16;
    (t > 0).then_some(t)
}

/// Predicts every pair of the split: `{id}_change.png`, segmentation masks
/// when the model has heads, `{id}_errors.png` on request, and
/// `metrics.json` when every pair is labelled.
pub fn cmd_predict(cfg: &RunConfig) -> Result<Option<MetricsReport>> {
    let m = load_manifest(cfg)?;
    let v = view(cfg, &m)?;
    let model = load_model(cfg, &m)?;
    let out = cfg.out_dir()?;
    cfg.echo()?;
    let inf = &cfg.inference;
    let mut counts = ConfusionCounts::default();
    let mut labelled = 0usize;
    for i in 0..v.len() {
        let pair = v.load(i)?;
        let (h, w) = (pair.height(), pair.width());
        let whole = h % 16 == 0 && w % 16 == 0;
        let pred = match inf.tile {
            Some(t) => {
                inference::predict_tiled(&model.net, &model.params, &pair.t1, &pair.t2, &model.stats, t, inf.overlap)?
            }
            None if whole => inference::predict(&model.net, &model.params, &pair.t1, &pair.t2, &model.stats)?,
            None => {
                let t = largest_tile(h, w).ok_or_else(|| {
                    Error::format(&m.root.join(&v.entries[i].t1), "image smaller than 16 pixels")
                })?;
                let overlap = inf.overlap.min(t - 16);
                inference::predict_tiled(&model.net, &model.params, &pair.t1, &pair.t2, &model.stats, t, overlap)?
            }
        };
        png_io::write_mask_1bit(&out.join(format!("{}_change.png", pair.id)), &pred.change)?;
        if model.net.seg_head.is_some() {
            export_segmentations(out, &pair.id, &pred, model.net.cfg.num_seg_classes)?;
        }
        if let Some(label) = &pair.change {
            let (img, c) = inference::render_error_mask(&pred.change, label)?;
            counts += c;
            labelled += 1;
            if inf.render_errors {
                png_io::write_rgb(&out.join(format!("{}_errors.png", pair.id)), &img)?;
            }
        } else if inf.render_errors {
            log::warn!("{}: no change label, skipping the error rendering", pair.id);
        }
    }
    if labelled > 0 && labelled == v.len() {
        let report = EvalReport {
            split: inf.split.clone(),
            samples: labelled,
            counts,
            metrics: counts.report(),
            segmentation: None,
        };
        write_json(&out.join(METRICS_FILE), &report)?;
        return Ok(Some(report.metrics));
    }
    Ok(None)
}
