use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use scalenet::checkpoint::Checkpoint;
use scalenet::config::cnn_desk;
use scalenet::export::{image_path, write_poses, ExportMeta, PoseRow};
use scalenet::images::write_png;
use scalenet::manifest::DatasetManifest;
use scalenet::run::{read_report, TRAIN_LOG};
use scalenet_core::geometry::CameraId;
use scalenet_core::imaging::Rgb8Image;
use scalenet_core::model::DistanceModel;
use scalenet_core::synthgen::default_rig;
use scalenet_core::training::TrainerState;

fn scalenet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_scalenet")).args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = scalenet(args);
    assert!(out.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn unknown_preset_lists_available_ones() {
    let dir = tempfile::tempdir().unwrap();
    let out = scalenet(&["train", "--preset", "cnn-huge", "--manifest", "m.json", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cnn-huge") && err.contains("cnn-paper") && err.contains("lstm-b19"), "{err}");
}

#[test]
fn cnn_paper_preset_resolves() {
    let json = ok(&["presets", "cnn-paper"]);
    let v: serde_json::Value = serde_json::from_str(&json).unwrap();
    assert_eq!(v["train"]["batch_size"], 75);
    assert_eq!(v["train"]["base_lr"], 1e-4);
    assert_eq!(v["train"]["total_iterations"], 100_000);
    let names = ok(&["presets"]);
    assert!(names.lines().count() >= 22);
}

#[test]
fn missing_manifest_is_a_data_error() {
    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("nope.json");
    let out = scalenet(&["train", "--preset", "cnn-desk", "--manifest", s(&missing), "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(3));
}

#[test]
fn malformed_config_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("run.json");
    std::fs::write(&cfg, "{\"name\": 3}").unwrap();
    let out = scalenet(&["train", "--config", s(&cfg), "--manifest", "m.json", "--out", s(dir.path())]);
    assert_eq!(out.status.code(), Some(2));
}

fn files_under(root: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.push(p.strip_prefix(root).unwrap().to_path_buf());
            }
        }
    }
    out.sort();
    out
}

#[test]
fn synthgen_then_prepare_gives_six_maps_and_is_repeatable() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    for out in [&a, &b] {
        ok(&["synthgen", "--maps", "6", "--frames", "6", "--episode-frames", "3", "--supersample", "1", "--seed", "5", "--out", s(out)]);
    }
    let files = files_under(&a);
    assert_eq!(files, files_under(&b));
    for f in &files {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{}", f.display());
    }
    let manifest = dir.path().join("m.json");
    ok(&["prepare", "--export", s(&a), "--out", s(&manifest)]);
    let m = DatasetManifest::load(&manifest).unwrap();
    assert_eq!(m.map_tags().len(), 6);
    assert_eq!(m.frames.len(), 6 * 6 * 2);
}

/// An export driving straight at exactly 1 m per frame, with blank images.
fn straight_export(root: &Path, frames: u64) {
    let rig = default_rig();
    let mut meta = ExportMeta::new("straight");
    for cam in &rig {
        meta.add_camera(cam.id, &cam.model, &cam.mount);
    }
    meta.write(root).unwrap();
    let mut rows = Vec::new();
    for k in 0..frames {
        for cam in &rig {
            let x = if cam.id == CameraId::Left { 0.0 } else { 1.0 };
            rows.push(PoseRow {
                frame_index: k,
                camera_id: cam.id,
                timestamp: k as f64 * 0.1,
                pose: [1.0, 0.0, 0.0, x, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0, k as f64],
                weather_tag: "clear".into(),
            });
            let mut img = Rgb8Image::new(cam.model.width(), cam.model.height());
            img.data.fill(90);
            write_png(&image_path(root, "ep000", cam.id, k), &img).unwrap();
        }
    }
    write_poses(&root.join("episodes/ep000/poses.csv"), &rows).unwrap();
}

#[test]
fn eval_of_exact_predictions_has_zero_sigma() {
    let dir = tempfile::tempdir().unwrap();
    let export = dir.path().join("export");
    straight_export(&export, 8);
    let manifest = dir.path().join("m.json");
    ok(&["prepare", "--export", s(&export), "--split", "test", "--out", s(&manifest)]);

    // A network whose last layer ignores its input and outputs 1 m.
    let run = cnn_desk();
    let mut model = DistanceModel::new_cnn(run.cnn.clone(), 0).unwrap();
    let last = model.cnn.params().entries.len();
    model.cnn.params_mut().data_mut(last - 2).fill(0.0);
    model.cnn.params_mut().data_mut(last - 1).fill(1.0);
    let ck_path = dir.path().join("const.ckpt");
    Checkpoint {
        state: TrainerState::new(run.train.clone(), model).unwrap(),
        run,
    }
    .save(&ck_path)
    .unwrap();

    let out = dir.path().join("eval");
    ok(&["eval", "--checkpoint", s(&ck_path), "--manifest", s(&manifest), "--out", s(&out)]);
    let report = read_report(&out).unwrap().report;
    assert_eq!(report.pooled.n, 14);
    assert_eq!(report.pooled.mu, 0.0);
    assert_eq!(report.pooled.sigma, 0.0);
    for f in ["predictions.csv", "stamp.json", "plots/error_histogram.png", "plots/worst_pairs.png", "plots/trajectory_straight_ep000.png"] {
        assert!(out.join(f).is_file(), "{f} missing");
    }
    let csv = std::fs::read_to_string(out.join("predictions.csv")).unwrap();
    assert!(csv.starts_with("sequence,camera,frame_i,frame_j,gt_m,pred_m,error_m\n"));

    let table = ok(&["report", s(&out)]);
    assert!(table.contains("cnn-desk") && table.contains("straight/ep000"));
}

#[test]
fn zero_iteration_run_saves_the_initialization() {
    let dir = tempfile::tempdir().unwrap();
    let export = dir.path().join("export");
    straight_export(&export, 4);
    let manifest = dir.path().join("m.json");
    ok(&["prepare", "--export", s(&export), "--out", s(&manifest)]);
    let out = dir.path().join("run");
    ok(&["train", "--preset", "cnn-desk", "--iterations", "0", "--seed", "9", "--manifest", s(&manifest), "--out", s(&out)]);
    let ck = Checkpoint::load(&out.join("final.ckpt")).unwrap();
    assert_eq!(ck.state.step, 0);
    let fresh = DistanceModel::<f32>::new_cnn(ck.run.cnn.clone(), 9).unwrap();
    assert_eq!(ck.model().param_fingerprint(), fresh.param_fingerprint());
    assert_eq!(std::fs::read_to_string(out.join(TRAIN_LOG)).unwrap(), "step,lr,loss,wall_time_s\n");
    assert!(out.join("stamp.json").is_file());
}

#[test]
fn lstm_training_needs_a_cnn_to_start_from() {
    let dir = tempfile::tempdir().unwrap();
    let export = dir.path().join("export");
    straight_export(&export, 8);
    let manifest = dir.path().join("m.json");
    ok(&["prepare", "--export", s(&export), "--out", s(&manifest)]);
    let out = scalenet(&["train", "--preset", "lstm-desk", "--manifest", s(&manifest), "--out", s(&dir.path().join("r"))]);
    assert_eq!(out.status.code(), Some(2));
}
