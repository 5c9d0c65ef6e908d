//! The `ratrack` binary driven through files only.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use ratrack::contrastive::TrainConfig;
use ratrack::data::{read_mot, save_model, write_mot};
use ratrack::evaluation::micro_scenes;
use ratrack::ram::{RamKind, RamModel};

fn ratrack(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ratrack")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = ratrack(args);
    assert_eq!(out.status.code(), Some(0), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(args: &[&str]) -> i32 {
    ratrack(args).status.code().unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn rows(path: &Path) -> usize {
    fs::read_to_string(path).unwrap().lines().count()
}

// small, fast settings shared by the pipeline tests
const SMALL: [&str; 10] = [
    "--set",
    "scenario.n_frames=40",
    "--set",
    "scenario.n_objects=4",
    "--set",
    "train.model_dim=16",
    "--set",
    "train.heads=2",
    "--set",
    "train.ffn_dim=32",
];

#[test]
fn frozen_scenario_is_pinned_and_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let msg = ok(&["synth", "--seed", "7", "--out", p(&a)]);
    assert!(msg.contains("4800 gt boxes, 4413 detections"), "{msg}");
    assert_eq!(rows(&a.join("gt.txt")), 4800);
    assert_eq!(rows(&a.join("det.txt")), 4413);
    ok(&["synth", "--seed", "7", "--out", p(&b)]);
    assert_eq!(fs::read(a.join("gt.txt")).unwrap(), fs::read(b.join("gt.txt")).unwrap());
    assert_eq!(fs::read(a.join("det.txt")).unwrap(), fs::read(b.join("det.txt")).unwrap());

    let c = dir.path().join("c");
    ok(&["synth", "--seed", "8", "--out", p(&c)]);
    assert_ne!(fs::read(a.join("gt.txt")).unwrap(), fs::read(c.join("gt.txt")).unwrap());
}

#[test]
fn noiseless_synth_detections_equal_ground_truth() {
    let dir = tempfile::tempdir().unwrap();
    let mut args = vec!["synth", "--seed", "3", "--out", p(dir.path())];
    args.extend(SMALL);
    args.extend(["--set", "scenario.dropout=0", "--set", "scenario.noise_sigma=0", "--set", "scenario.clutter_rate=0"]);
    ok(&args);
    let gt = read_mot(dir.path().join("gt.txt")).unwrap();
    let det = read_mot(dir.path().join("det.txt")).unwrap();
    let mut gt_boxes: Vec<_> = gt.trajectories.iter().flat_map(|t| t.points.iter().copied()).collect();
    let mut det_boxes: Vec<_> =
        det.detections.values().flat_map(|ds| ds.iter().map(|d| (d.frame, d.bbox))).collect();
    let key = |(f, b): &(usize, ratrack::BBox)| (*f, b.x.to_bits(), b.y.to_bits());
    gt_boxes.sort_by_key(key);
    det_boxes.sort_by_key(key);
    assert_eq!(gt_boxes, det_boxes);
}

#[test]
fn zero_epochs_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut synth = vec!["synth", "--seed", "5", "--out", p(d)];
    synth.extend(SMALL);
    ok(&synth);
    let model = d.join("m.json");
    let gt = d.join("gt.txt");
    let mut train = vec!["train", "--seed", "11", "--data", p(&gt), "--out", p(&model)];
    train.extend(SMALL);
    train.extend(["--set", "train.epochs=0"]);
    ok(&train);

    let cfg = TrainConfig { epochs: 0, model_dim: 16, heads: 2, ffn_dim: 32, seed: 11, ..TrainConfig::default() };
    let fresh = RamModel::init(RamKind::Stram, cfg.dims(), 11).unwrap();
    let reference = d.join("fresh.json");
    save_model(&reference, &fresh, 11, Some(&cfg)).unwrap();
    assert_eq!(fs::read(&model).unwrap(), fs::read(&reference).unwrap());
    assert_eq!(fs::read_to_string(d.join("m.loss.csv")).unwrap(), "epoch,l_t,l_s,l_st\n");
}

#[test]
fn synth_train_track_eval_compose() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut synth = vec!["synth", "--seed", "9", "--out", p(d)];
    synth.extend(SMALL);
    ok(&synth);
    let (gt, det) = (d.join("gt.txt"), d.join("det.txt"));

    for kind in ["tram", "sram", "stram"] {
        let model = d.join(format!("{kind}.json"));
        let mut train = vec![
            "train", "--seed", "1", "--kind", kind, "--data", p(&gt), "--out", p(&model), "--frames", "1:20",
        ];
        train.extend(SMALL);
        train.extend(["--set", "train.epochs=2"]);
        let msg = ok(&train);
        assert!(msg.contains("epoch 2:"), "{msg}");
        assert_eq!(rows(&d.join(format!("{kind}.loss.csv"))), 3);

        let out = d.join(format!("{kind}_tracks.txt"));
        let msg = ok(&["track", "--det", p(&det), "--model", p(&model), "--out", p(&out), "--frames", "21:"]);
        assert!(msg.contains("over 20 frames"), "{msg}");
        let csv = d.join(format!("{kind}.csv"));
        let table = ok(&["eval", "--gt", p(&gt), "--results", p(&out), "--frames", "21:40", "--csv", p(&csv)]);
        assert!(table.contains("MOTA") && table.contains("IDF1"), "{table}");
        let text = fs::read_to_string(&csv).unwrap();
        assert!(text.starts_with("mota,idf1,idp,idr,fp,fn,ids,gt_count,mt,ml\n"), "{text}");
    }

    // the same inputs give the same files
    let (a, b) = (d.join("base_a.txt"), d.join("base_b.txt"));
    ok(&["track", "--det", p(&det), "--out", p(&a)]);
    ok(&["track", "--det", p(&det), "--out", p(&b), "--set", "ram_kind=none"]);
    assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
}

#[test]
fn single_noiseless_object_gives_one_trajectory() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&[
        "synth", "--seed", "4", "--out", p(d),
        "--set", "scenario.n_objects=1", "--set", "scenario.n_frames=60",
        "--set", "scenario.dropout=0", "--set", "scenario.noise_sigma=0", "--set", "scenario.clutter_rate=0",
    ]);
    let out = d.join("tracks.txt");
    let msg = ok(&["track", "--det", p(&d.join("det.txt")), "--out", p(&out)]);
    assert!(msg.starts_with("1 tracks over 60 frames"), "{msg}");
    let tracks = read_mot(&out).unwrap().trajectories;
    assert_eq!(tracks.len(), 1);
    assert_eq!(tracks[0].points.len(), 60);
}

fn eval_csv(gt: &Path, results: &Path, dir: &Path) -> Vec<f64> {
    let csv = dir.join("metrics.csv");
    ok(&["eval", "--gt", p(gt), "--results", p(results), "--csv", p(&csv)]);
    let text = fs::read_to_string(&csv).unwrap();
    text.lines().nth(1).unwrap().split(',').map(|v| v.parse().unwrap()).collect()
}

#[test]
fn eval_reference_cases() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let mut synth = vec!["synth", "--seed", "2", "--out", p(d)];
    synth.extend(SMALL);
    ok(&synth);
    let gt = d.join("gt.txt");

    let same = eval_csv(&gt, &gt, d);
    assert_eq!((same[0], same[1], same[6]), (1.0, 1.0, 0.0));

    let empty = d.join("empty.txt");
    fs::write(&empty, "").unwrap();
    let none = eval_csv(&gt, &empty, d);
    assert_eq!((none[0], none[1]), (0.0, 0.0));

    let swap = micro_scenes::all().into_iter().find(|s| s.name == "swap").unwrap();
    let (sg, sh) = (d.join("swap_gt.txt"), d.join("swap_hyp.txt"));
    write_mot(&swap.gt, &sg).unwrap();
    write_mot(&swap.hyp, &sh).unwrap();
    let m = eval_csv(&sg, &sh, d);
    assert!((m[0] - (1.0 - 4.0 / 6.0)).abs() < 1e-12, "{m:?}");
    assert!((m[1] - 2.0 / 3.0).abs() < 1e-12, "{m:?}");
    assert_eq!(m[6], 4.0);
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let missing = d.join("missing.txt");

    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["--version"]), 0);
    assert_eq!(code(&["synth", "--out", p(d)]), 1, "seed is mandatory");
    assert_eq!(code(&["bogus"]), 1);
    assert_eq!(code(&["synth", "--seed", "1", "--out", p(d), "--set", "scenario.n_objectz=3"]), 1);
    assert_eq!(code(&["synth", "--seed", "1", "--out", p(d), "--set", "scenario.dropout=2"]), 1);
    assert_eq!(code(&["eval", "--gt", p(&missing), "--results", p(&missing)]), 2);
    assert_eq!(code(&["track", "--det", p(&missing), "--out", p(&d.join("o.txt"))]), 2);
    assert_eq!(code(&["synth", "--seed", "1", "--out", p(d), "--config", p(&missing)]), 2);

    let bad = d.join("bad.txt");
    fs::write(&bad, "1,1,0,0,10\n").unwrap();
    assert_eq!(code(&["eval", "--gt", p(&bad), "--results", p(&bad)]), 2);

    let mut synth = vec!["synth", "--seed", "1", "--out", p(d)];
    synth.extend(SMALL);
    ok(&synth);
    let model = d.join("m.json");
    let gt = d.join("gt.txt");
    let mut train = vec!["train", "--seed", "1", "--kind", "tram", "--data", p(&gt), "--out", p(&model)];
    train.extend(SMALL);
    train.extend(["--set", "train.epochs=0"]);
    ok(&train);
    let det = d.join("det.txt");
    let out = d.join("o.txt");
    // model and config disagree
    assert_eq!(code(&["track", "--det", p(&det), "--model", p(&model), "--out", p(&out), "--set", "ram_kind=stram"]), 1);
    assert_eq!(code(&["track", "--det", p(&det), "--model", p(&model), "--out", p(&out), "--set", "ram_kind=none"]), 1);
    assert_eq!(code(&["track", "--det", p(&det), "--out", p(&out), "--set", "ram_kind=sram"]), 1);
    // a corrupt model file
    fs::write(&model, "{\"format\": \"something else\"}").unwrap();
    assert_eq!(code(&["track", "--det", p(&det), "--model", p(&model), "--out", p(&out)]), 2);
    // training needs trajectory rows
    assert_eq!(code(&["train", "--seed", "1", "--data", p(&det), "--out", p(&model)]), 1);
}

#[test]
fn config_command_prints_loadable_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("run.toml");
    fs::write(&path, ok(&["config"])).unwrap();
    let mut args = vec!["synth", "--seed", "1", "--out", p(dir.path()), "--config", p(&path)];
    args.extend(["--set", "scenario.n_frames=5"]);
    let msg = ok(&args);
    assert!(msg.contains("gt boxes"), "{msg}");
}
