use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;
use wavecp::tensorio::{load_dataset, read_index, Intensity, ManifestWriter};
use wavecp::trainer::Checkpoint;
use wavecp::{Volume, VolumeKind};

fn wavecp(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wavecp"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exit code")
}

fn ok(args: &[&str]) {
    let out = wavecp(args);
    assert_eq!(code(&out), 0, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn synth(dir: &Path, extra: &[&str]) {
    let mut args = vec!["synth", "--out", p(dir), "--count", "8", "--shape", "16,16", "--classes", "3", "--labeled", "0.5", "--seed", "3"];
    args.extend_from_slice(extra);
    ok(&args);
}

const TINY: [&str; 8] = [
    "--set", "model.base_width=4",
    "--set", "model.depth=2",
    "--set", "train.pretrain_iterations=3",
    "--set", "train.pairs=2",
];

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut v: Vec<_> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| {
            let e = e.unwrap();
            (e.file_name().into_string().unwrap(), std::fs::read(e.path()).unwrap())
        })
        .collect();
    v.sort();
    v
}

#[test]
fn synth_counts_determinism_and_refusals() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    ok(&["synth", "--out", p(&a), "--count", "40", "--shape", "64,64", "--classes", "4", "--labeled", "0.1", "--seed", "7"]);
    let ds = load_dataset(&a).unwrap();
    assert_eq!(ds.len(), 40);
    assert_eq!(ds.labeled_indices().len(), 4);

    let b = tmp.path().join("b");
    ok(&["synth", "--out", p(&b), "--count", "40", "--shape", "64,64", "--classes", "4", "--labeled", "0.1", "--seed", "7"]);
    assert_eq!(files(&a), files(&b));

    let refused = wavecp(&["synth", "--out", p(&a), "--count", "4"]);
    assert_eq!(code(&refused), 1);
    let zero = wavecp(&["synth", "--out", p(&tmp.path().join("c")), "--labeled", "0"]);
    assert_eq!(code(&zero), 1);
    let bad_flag = wavecp(&["synth", "--bogus"]);
    assert_eq!(code(&bad_flag), 1);
}

#[test]
fn pretrain_train_eval_pipeline() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);

    let pre = tmp.path().join("pre");
    let mut args = vec!["pretrain", "--data", p(&data), "--out", p(&pre), "--log-every", "1"];
    args.extend_from_slice(&TINY);
    ok(&args);
    let ckpt = Checkpoint::load(&pre.join("checkpoint.safetensors")).unwrap();
    assert_eq!(ckpt.student, ckpt.teacher);
    let log = std::fs::read_to_string(pre.join("train_log.jsonl")).unwrap();
    assert_eq!(log.lines().count(), 3);
    let echoed: Value = serde_json::from_str(&std::fs::read_to_string(pre.join("config.json")).unwrap()).unwrap();
    assert_eq!(echoed["model"]["base_width"], 4);

    let ssl = tmp.path().join("ssl");
    let init = pre.join("checkpoint.safetensors");
    ok(&[
        "train", "--data", p(&data), "--init", p(&init), "--out", p(&ssl), "--log-every", "1",
        "--set", "train.ssl_iterations=4", "--set", "train.eval_interval=2", "--set", "train.ema_lambda=0.95",
    ]);
    let log: Vec<Value> = std::fs::read_to_string(ssl.join("train_log.jsonl"))
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    assert_eq!(log.len(), 4);
    assert!(log.iter().all(|r| r["ema_lambda"] == 0.95 && r["phase"] == "ssl"));
    let ckpt = Checkpoint::load(&ssl.join("checkpoint.safetensors")).unwrap();
    assert_eq!(ckpt.history.len(), 2);
    assert_eq!(ckpt.iteration, 4);

    // Resume from its own checkpoint.
    let own = ssl.join("checkpoint.safetensors");
    let resumed = tmp.path().join("ssl");
    ok(&["train", "--data", p(&data), "--init", p(&own), "--out", p(&resumed), "--log-every", "1", "--set", "train.ssl_iterations=6"]);
    let log = std::fs::read_to_string(resumed.join("train_log.jsonl")).unwrap();
    let iters: Vec<u64> = log.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()["iteration"].as_u64().unwrap()).collect();
    assert_eq!(iters, vec![1, 2, 3, 4, 5, 6]);

    let mismatch = wavecp(&["train", "--data", p(&data), "--init", p(&init), "--out", p(&tmp.path().join("x")), "--set", "model.depth=3"]);
    assert_eq!(code(&mismatch), 1);

    // Evaluation report.
    let r1 = tmp.path().join("r1.json");
    let r2 = tmp.path().join("r2.json");
    ok(&["eval", "--data", p(&data), "--checkpoint", p(&own), "--out", p(&r1)]);
    ok(&["eval", "--data", p(&data), "--checkpoint", p(&own), "--out", p(&r2)]);
    assert_eq!(std::fs::read(&r1).unwrap(), std::fs::read(&r2).unwrap());
    let report: Value = serde_json::from_slice(&std::fs::read(&r1).unwrap()).unwrap();
    let classes = report["per_class"].as_object().unwrap();
    assert_eq!(classes.len(), 2);
    for m in classes.values() {
        for key in ["dice", "jaccard", "hd95", "asd"] {
            assert!(m.get(key).is_some(), "{key}");
        }
    }

    let missing = wavecp(&["pretrain", "--data", p(&tmp.path().join("nope")), "--out", p(&tmp.path().join("y"))]);
    assert_eq!(code(&missing), 2);
}

#[test]
fn eval_requires_labels_and_scores_predictions() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    let ds = load_dataset(&data).unwrap();

    let unl = tmp.path().join("unl");
    let mut w = ManifestWriter::create(&unl, 3, 2, Intensity::MinMax).unwrap();
    w.add_sample("only", &[("image", &ds.sample(0).image)]).unwrap();
    w.finish().unwrap();
    let out = wavecp(&["eval", "--data", p(&unl), "--predictions", p(&data)]);
    assert_eq!(code(&out), 1);

    // Ground truth scored against itself.
    let out = wavecp(&["eval", "--data", p(&data), "--predictions", p(&data)]);
    assert_eq!(code(&out), 0);
    let report: Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(report["mean"]["dice"], 100.0);
    assert_eq!(report["mean"]["hd95"], 0.0);
}

#[test]
fn decompose_writes_complementary_bands() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let mut w = ManifestWriter::create(&data, 2, 2, Intensity::Raw).unwrap();
    let flat = Volume::new(vec![1, 6, 10], VolumeKind::Image, vec![0.3; 60]).unwrap();
    let ramp = Volume::new(vec![1, 6, 10], VolumeKind::Image, (0..60).map(|i| ((i * 7) % 11) as f32).collect()).unwrap();
    w.add_sample("flat", &[("image", &flat)]).unwrap();
    w.add_sample("ramp", &[("image", &ramp)]).unwrap();
    w.finish().unwrap();

    let out = tmp.path().join("bands");
    ok(&["decompose", "--data", p(&data), "--out", p(&out), "--family", "db2"]);
    let index = read_index(&out).unwrap();
    assert_eq!(index.metadata["family"], "db2");
    for rec in &index.samples {
        let raw = index.load_volume(&out, rec, "image").unwrap();
        let low = index.load_volume(&out, rec, "low").unwrap();
        let high = index.load_volume(&out, rec, "high").unwrap();
        for k in 0..raw.data().len() {
            assert!((low.data()[k] + high.data()[k] - raw.data()[k]).abs() <= 1e-5);
            if rec.id == "flat" {
                assert!(high.data()[k].abs() <= 1e-6);
            }
        }
    }
    let bad = wavecp(&["decompose", "--data", p(&data), "--out", p(&tmp.path().join("z")), "--family", "sym4"]);
    assert_eq!(code(&bad), 1);
}

#[test]
fn mix_demo_masks_and_sources() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, &[]);
    let ds = load_dataset(&data).unwrap();

    let a = tmp.path().join("a");
    ok(&["mix-demo", "--data", p(&data), "--out", p(&a), "--ratio", "0.5", "--seed", "9"]);
    let index = read_index(&a).unwrap();
    assert_eq!(index.metadata["zero_count"], 64);
    let rec = index.samples.iter().find(|r| r.id == "inward").unwrap();
    let mask = index.load_volume(&a, rec, "mask").unwrap();
    assert_eq!(mask.data().iter().filter(|&&m| m == 0.0).count(), 64);

    let b = tmp.path().join("b");
    ok(&["mix-demo", "--data", p(&data), "--out", p(&b), "--ratio", "0.5", "--seed", "9"]);
    assert_eq!(files(&a), files(&b));

    let full = tmp.path().join("full");
    ok(&["mix-demo", "--data", p(&data), "--out", p(&full), "--full-mask"]);
    let index = read_index(&full).unwrap();
    let j = index.metadata["sources"]["j"].as_str().unwrap();
    let rec = index.samples.iter().find(|r| r.id == "inward").unwrap();
    let x_in = index.load_volume(&full, rec, "image").unwrap();
    let source = ds.samples().iter().find(|s| s.id == j).unwrap();
    assert_eq!(x_in.data(), source.image.data());
}
