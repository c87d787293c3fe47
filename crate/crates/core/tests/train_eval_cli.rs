use std::path::Path;
use std::process::{Command, Output};

use tokentrack::data::io::read_suite;
use tokentrack::eval::{evaluate_ope, evaluate_sequence};
use tokentrack::tracker::TrackResult;
use tokentrack::train::{train_one_shot, TrainConfig};
use tokentrack::{BoundingBox, Rng};

fn cli(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tokentrack")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = cli(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(cli(&["track", "--bogus"]).status.code(), Some(2));
    assert_eq!(cli(&["frobnicate"]).status.code(), Some(2));
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = cli(&[
        "track",
        "--ckpt",
        p(&dir.path().join("absent.ckpt")),
        "--seq",
        p(dir.path()),
        "--out",
        p(&dir.path().join("t.txt")),
    ]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: io:"));
}

#[test]
fn ground_truth_tracks_score_perfectly() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("suite.txt");
    std::fs::write(&spec, "count = 3\nlength = 10\nmotions = linear,sinusoidal\n").unwrap();
    let data = dir.path().join("data");
    ok(&["generate-data", "--spec", p(&spec), "--out", p(&data), "--seed", "4"]);
    let tracks = dir.path().join("tracks");
    std::fs::create_dir(&tracks).unwrap();
    for seq in read_suite(&data).unwrap() {
        let r = TrackResult {
            scores: vec![1.0; seq.boxes.len()],
            boxes: seq.boxes,
        };
        std::fs::write(tracks.join(format!("{}.txt", seq.name)), r.to_text()).unwrap();
    }
    let report = dir.path().join("report.json");
    let curve = dir.path().join("curve.csv");
    let stdout = ok(&["eval", "--tracks", p(&tracks), "--seqs", p(&data), "--report", p(&report), "--curve", p(&curve)]);
    assert!(stdout.starts_with("AUC=1.000 P=1.000 Pnorm=1.000 mIoU=1.000 sequences=3"), "{stdout}");
    let json: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(json["sequences"].as_array().unwrap().len(), 3);
    assert!(std::fs::read_to_string(&curve).unwrap().lines().count() >= 21);
}

fn naive_iou(a: &BoundingBox, b: &BoundingBox) -> f64 {
    let w = (a.x_max.min(b.x_max) - a.x_min.max(b.x_min)).max(0.0);
    let h = (a.y_max.min(b.y_max) - a.y_min.max(b.y_min)).max(0.0);
    let inter = w * h;
    inter / (a.width() * a.height() + b.width() * b.height() - inter)
}

fn random_box(rng: &mut Rng) -> BoundingBox {
    BoundingBox::from_center(rng.uniform_range(10.0, 54.0), rng.uniform_range(10.0, 54.0), rng.uniform_range(4.0, 16.0), rng.uniform_range(4.0, 16.0))
}

#[test]
fn metrics_match_a_frame_major_recount() {
    let mut rng = Rng::new(11);
    let mut runs = Vec::new();
    for s in 0..5 {
        let gt: Vec<BoundingBox> = (0..40).map(|_| random_box(&mut rng)).collect();
        // jitter around the truth so every IoU bin gets visited
        let pred: Vec<BoundingBox> = gt
            .iter()
            .map(|g| {
                let (cx, cy) = g.center();
                let d = rng.uniform_range(0.0, 8.0);
                BoundingBox::from_center(cx + d, cy - d / 2.0, g.width(), g.height())
            })
            .collect();
        runs.push((format!("s{s}"), pred, gt));
    }
    let rep = evaluate_ope(&runs).unwrap();
    let mut auc = 0.0;
    let mut prec = 0.0;
    let mut miou = 0.0;
    for (_, pred, gt) in &runs {
        let n = gt.len() as f64;
        let mut frame_auc = 0.0;
        for (a, b) in pred.iter().zip(gt) {
            let iou = naive_iou(a, b);
            // thresholds 0, 0.05, ..., 0.95 strictly exceeded, plus exact overlap at 1
            let passed = (0..20).filter(|&i| iou > i as f64 / 20.0).count() + usize::from(iou >= 1.0);
            frame_auc += passed as f64 / 21.0;
            miou += iou / n;
            let ((px, py), (gx, gy)) = (a.center(), b.center());
            if ((px - gx).powi(2) + (py - gy).powi(2)).sqrt() <= 20.0 {
                prec += 1.0 / n;
            }
        }
        auc += frame_auc / n;
    }
    let m = runs.len() as f64;
    assert!((rep.auc - auc / m).abs() < 1e-12);
    assert!((rep.precision - prec / m).abs() < 1e-12);
    assert!((rep.mean_iou - miou / m).abs() < 1e-12);
}

#[test]
fn half_hits_give_half_auc() {
    let gt = vec![BoundingBox::new(10.0, 10.0, 20.0, 20.0); 10];
    let far = BoundingBox::new(40.0, 40.0, 50.0, 50.0);
    let mut pred = gt.clone();
    pred[5..].fill(far);
    let e = evaluate_sequence("half", &pred, &gt).unwrap();
    assert!((e.auc - 0.5).abs() < 1e-15);
    assert!((e.mean_iou - 0.5).abs() < 1e-15);
    let miss = evaluate_sequence("miss", &vec![far; 10], &gt).unwrap();
    assert_eq!((miss.auc, miss.mean_iou, miss.precision), (0.0, 0.0, 0.0));
    assert!(evaluate_sequence("short", &pred[..3], &gt).is_err());
    assert!(evaluate_ope(&[]).is_err());
}

#[test]
fn short_training_run_reduces_loss() {
    let seqs = tokentrack::data::synth::SuiteSpec {
        count: 8,
        ..Default::default()
    }
    .generate(21)
    .unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        clips_per_epoch: 200,
        batch_size: 1,
        warmup_steps: 20,
        ..TrainConfig::default()
    };
    let out = train_one_shot(&cfg, &seqs, |_| {}).unwrap();
    let h = &out.history;
    assert_eq!(h.len(), 200);
    let mean = |r: std::ops::Range<usize>| h[r.clone()].iter().map(|l| l.loss).sum::<f64>() / r.len() as f64;
    let (early, late) = (mean(0..40), mean(160..200));
    assert!(late <= 0.7 * early, "loss {early:.3} -> {late:.3}");
    assert!(h.iter().all(|l| l.grad_norm.is_finite() && l.loss.is_finite()));
}

#[test]
fn train_and_track_are_reproducible_through_the_cli() {
    let dir = tempfile::tempdir().unwrap();
    let spec = dir.path().join("suite.txt");
    std::fs::write(&spec, "count = 2\nlength = 12\n").unwrap();
    let data = dir.path().join("data");
    ok(&["generate-data", "--spec", p(&spec), "--out", p(&data), "--seed", "5"]);
    let config = dir.path().join("train.txt");
    std::fs::write(&config, "epochs = 1\nclips_per_epoch = 4\nbatch_size = 2\nwarmup_steps = 1\n").unwrap();
    let mut bytes = Vec::new();
    let mut tracks = Vec::new();
    for run in ["a", "b"] {
        let ckpt = dir.path().join(format!("{run}.ckpt"));
        ok(&["train", "--data", p(&data), "--tasks", "rgb", "--out", p(&ckpt), "--config", p(&config), "--seed", "3", "--log-every", "0"]);
        bytes.push(std::fs::read(&ckpt).unwrap());
        let out = dir.path().join(format!("tracks_{run}"));
        ok(&["track", "--ckpt", p(&ckpt), "--seq", p(&data), "--out", p(&out)]);
        let mut files: Vec<_> = std::fs::read_dir(&out).unwrap().map(|e| e.unwrap().path()).collect();
        files.sort();
        tracks.push(files.iter().map(|f| std::fs::read_to_string(f).unwrap()).collect::<Vec<_>>());
    }
    assert_eq!(bytes[0], bytes[1]);
    assert_eq!(tracks[0], tracks[1]);
    assert_eq!(tracks[0].len(), 2);
    // a different seed gives a different checkpoint
    let other = dir.path().join("c.ckpt");
    ok(&["train", "--data", p(&data), "--tasks", "rgb", "--out", p(&other), "--config", p(&config), "--seed", "4", "--log-every", "0"]);
    assert_ne!(std::fs::read(&other).unwrap(), bytes[0]);
}

#[test]
fn bad_train_config_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("train.txt");
    std::fs::write(&config, "epochs = 1\nnot_a_key = 2\n").unwrap();
    let out = cli(&["train", "--data", p(dir.path()), "--out", p(&dir.path().join("x.ckpt")), "--config", p(&config)]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: config:"));
}
