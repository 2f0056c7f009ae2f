use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use fccdn::checkpoint::Checkpoint;
use fccdn::manifest::{self, Manifest, ManifestEntry, MANIFEST_FILE, STATS_FILE};
use fccdn::runlog::{read_log, LogRecord};
use fccdn_core::data::{ChannelStats, Image8, ImagePair, Split};
use fccdn_core::params::ParamKind;
use fccdn_core::{Network, NetworkConfig};
use serde_json::Value;

fn fccdn(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fccdn"))
        .args(args)
        .env_remove("FCCDN_OUTPUT_ROOT")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let o = fccdn(args);
    assert!(
        o.status.success(),
        "fccdn {args:?} failed: {}",
        String::from_utf8_lossy(&o.stderr)
    );
    o
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn synth(out: &Path, n: usize, size: usize) {
    ok(&["synth", "--out", s(out), "--n", &n.to_string(), "--size", &size.to_string(), "--seed", "5"]);
}

/// Tiny model, batch 2; `extra` must set `--max-epochs`.
fn train(data: &Path, run: &Path, extra: &[&str]) {
    let manifest = data.join(MANIFEST_FILE);
    let mut args: Vec<String> = [
        "train",
        "--manifest",
        s(&manifest),
        "--out",
        s(run),
        "--width-multiplier",
        "0.125",
        "--batch-size",
        "2",
        "--validation-start-epoch",
        "1",
    ]
    .iter()
    .map(|a| a.to_string())
    .collect();
    args.extend(extra.iter().map(|a| a.to_string()));
    ok(&args.iter().map(String::as_str).collect::<Vec<_>>());
}

fn files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<_> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().path()).collect();
    v.sort();
    v
}

#[test]
fn synth_with_no_samples_succeeds() {
    let d = tempfile::tempdir().unwrap();
    let out = d.path().join("empty");
    synth(&out, 0, 64);
    assert!(Manifest::load(&out.join(MANIFEST_FILE)).unwrap().entries.is_empty());
    assert!(out.join("config.toml").exists());
}

#[test]
fn usage_errors_exit_with_two() {
    let d = tempfile::tempdir().unwrap();
    let o = fccdn(&["synth", "--out", s(&d.path().join("x")), "--n", "2", "--size", "40"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("multiple of 16"));

    let src = d.path().join("src");
    std::fs::create_dir_all(src.join("t1")).unwrap();
    let o = fccdn(&["prepare", "--source", s(&src), "--out", s(&d.path().join("y"))]);
    assert_eq!(o.status.code(), Some(2));

    let o = fccdn(&["train", "--frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn prepare_tiles_source_images() {
    let d = tempfile::tempdir().unwrap();
    let src = d.path().join("src");
    let pairs = fccdn_core::data::gen_synthetic(3, 64, 1, &Default::default()).unwrap();
    for p in &pairs {
        let name = format!("{}.png", p.id);
        fccdn::png_io::write_rgb(&src.join("t1").join(&name), &p.t1).unwrap();
        fccdn::png_io::write_rgb(&src.join("t2").join(&name), &p.t2).unwrap();
        fccdn::png_io::write_label(&src.join("label").join(&name), p.change.as_ref().unwrap()).unwrap();
    }
    let out = d.path().join("tiles");
    ok(&["prepare", "--source", s(&src), "--out", s(&out), "--size", "32", "--overlap", "0", "--split", "1:1:1"]);
    let m = Manifest::load(&out.join(MANIFEST_FILE)).unwrap();
    assert_eq!(m.entries.len(), 12);
    // every tile of a source image lands in the same split
    for p in &pairs {
        let splits: Vec<_> = m.entries.iter().filter(|e| e.id.starts_with(&p.id)).map(|e| e.split).collect();
        assert_eq!(splits.len(), 4);
        assert!(splits.iter().all(|&x| x == splits[0]));
    }
    let tile = m.load_pair(&m.entries[0]).unwrap();
    assert_eq!((tile.width(), tile.height()), (32, 32));
}

#[test]
fn train_eval_predict_round_trip() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    synth(&data, 20, 32);
    let run = d.path().join("run");
    train(&data, &run, &["--max-epochs", "2"]);
    for f in ["best.ckpt", "last.ckpt", "log.jsonl", "config.toml", "summary.json"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let log = read_log(&run.join("log.jsonl")).unwrap();
    let epochs: Vec<_> = log
        .iter()
        .filter_map(|r| match r {
            LogRecord::Epoch(e) => Some(e),
            _ => None,
        })
        .collect();
    assert_eq!(epochs.len(), 2);
    assert!(epochs.iter().all(|e| e.validation.is_some() == (e.epoch >= 1)));

    let ev = d.path().join("eval");
    let o = ok(&[
        "eval",
        "--manifest",
        s(&data.join(MANIFEST_FILE)),
        "--checkpoint",
        s(&run.join("best.ckpt")),
        "--split",
        "test",
        "--out",
        s(&ev),
    ]);
    let printed: Value = serde_json::from_slice(&o.stdout).unwrap();
    let saved: Value = serde_json::from_str(&std::fs::read_to_string(ev.join("metrics.json")).unwrap()).unwrap();
    assert_eq!(printed, saved);
    assert!(printed["segmentation"]["f1"].as_f64().is_some());

    let pr = d.path().join("pred");
    ok(&[
        "predict",
        "--manifest",
        s(&data.join(MANIFEST_FILE)),
        "--checkpoint",
        s(&run.join("last.ckpt")),
        "--split",
        "test",
        "--render-errors",
        "--out",
        s(&pr),
    ]);
    let m = Manifest::load(&data.join(MANIFEST_FILE)).unwrap();
    let test: Vec<&ManifestEntry> = m.entries.iter().filter(|e| e.split == Split::Test).collect();
    assert!(!test.is_empty());
    for e in test {
        for suffix in ["change", "seg1", "seg2", "errors"] {
            assert!(pr.join(format!("{}_{suffix}.png", e.id)).exists(), "{}_{suffix}", e.id);
        }
        let errors = fccdn::png_io::read_rgb(&pr.join(format!("{}_errors.png", e.id))).unwrap();
        assert_eq!((errors.width, errors.height), (32, 32));
    }
    // the error renderings count the same pixels as the saved metrics
    let metrics: Value = serde_json::from_str(&std::fs::read_to_string(pr.join("metrics.json")).unwrap()).unwrap();
    let mut white = 0u64;
    for e in m.entries.iter().filter(|e| e.split == Split::Test) {
        let img = fccdn::png_io::read_rgb(&pr.join(format!("{}_errors.png", e.id))).unwrap();
        white += img.data.chunks(3).filter(|p| p == &[255, 255, 255]).count() as u64;
    }
    assert_eq!(metrics["counts"]["tp"].as_u64(), Some(white));
}

/// A dataset whose change labels are all ones and a model whose change
/// head is a constant 1: predictions are perfect.
#[test]
fn perfect_predictions_score_one() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    let mut entries = Vec::new();
    for (i, p) in fccdn_core::data::gen_synthetic(4, 32, 2, &Default::default()).unwrap().into_iter().enumerate() {
        let pair = ImagePair {
            change: Some(Image8::mask(32, 32, vec![1; 32 * 32]).unwrap()),
            ..p
        };
        let split = if i == 0 { Split::Train } else { Split::Test };
        entries.push(manifest::write_pair(&data, &pair, split).unwrap());
    }
    Manifest {
        root: data.clone(),
        entries,
    }
    .save(&data.join(MANIFEST_FILE))
    .unwrap();
    manifest::save_stats(&data.join(STATS_FILE), &ChannelStats::identity(3)).unwrap();

    let cfg = NetworkConfig::fcs(0.125);
    let net = Network::new(&cfg).unwrap();
    let mut params = net.init_params::<f32>(0);
    let ids: Vec<_> = params
        .iter()
        .filter(|(_, s, _)| matches!(s.kind, ParamKind::Weight | ParamKind::Bias))
        .map(|(id, _, _)| id)
        .collect();
    for id in ids {
        params.get_mut(id).data_mut().fill(0.0);
    }
    let bias = params.find("change_head.conv.bias").unwrap();
    params.get_mut(bias).data_mut().fill(20.0);
    let ck = d.path().join("oracle.ckpt");
    Checkpoint::from_params(&cfg, None, &params).save(&ck).unwrap();

    let o = ok(&[
        "eval",
        "--manifest",
        s(&data.join(MANIFEST_FILE)),
        "--checkpoint",
        s(&ck),
        "--split",
        "test",
        "--out",
        s(&d.path().join("eval")),
    ]);
    let r: Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(r["samples"], 3);
    assert_eq!(r["metrics"]["f1"].as_f64(), Some(1.0));
    assert_eq!(r["metrics"]["iou"].as_f64(), Some(1.0));
    assert_eq!(r["counts"]["tp"].as_u64(), Some(3 * 32 * 32));
}

#[test]
fn rerunning_the_echoed_config_is_byte_identical() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    synth(&data, 20, 32);
    let a = d.path().join("a");
    train(&data, &a, &["--max-epochs", "2", "--seed", "3"]);
    let b = d.path().join("b");
    ok(&["train", "--config", s(&a.join("config.toml")), "--out", s(&b)]);

    let pred = |run: &Path, out: &Path| {
        ok(&[
            "predict",
            "--manifest",
            s(&data.join(MANIFEST_FILE)),
            "--checkpoint",
            s(&run.join("best.ckpt")),
            "--split",
            "all",
            "--out",
            s(out),
        ]);
    };
    pred(&a, &a.join("pred"));
    pred(&b, &b.join("pred"));

    for f in ["log.jsonl", "best.ckpt", "last.ckpt", "summary.json"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f} differs");
    }
    let (fa, fb) = (files(&a.join("pred")), files(&b.join("pred")));
    assert_eq!(fa.len(), fb.len());
    for (x, y) in fa.iter().zip(&fb) {
        assert_eq!(x.file_name(), y.file_name());
        if x.extension().is_some_and(|e| e == "png") {
            assert_eq!(std::fs::read(x).unwrap(), std::fs::read(y).unwrap(), "{x:?} differs");
        }
    }
}

#[test]
fn resuming_from_last_continues_the_run() {
    let d = tempfile::tempdir().unwrap();
    let data = d.path().join("data");
    synth(&data, 12, 32);
    let run = d.path().join("run");
    train(&data, &run, &["--max-epochs", "1"]);
    let first = read_log(&run.join("log.jsonl")).unwrap().len();
    train(
        &data,
        &run,
        &["--max-epochs", "2", "--resume", run.join("last.ckpt").to_str().unwrap()],
    );
    let log = read_log(&run.join("log.jsonl")).unwrap();
    assert!(log.len() > first);
    let summary: Value = serde_json::from_str(&std::fs::read_to_string(run.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["epochs"], 2);
}
