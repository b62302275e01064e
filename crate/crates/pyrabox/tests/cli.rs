use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use pyrabox::formats::annotations::{write_annotations, Annotation};
use pyrabox::formats::ppm::write_ppm;
use pyrabox_core::synthetic::{synthetic_dataset, SyntheticConfig};

fn pyrabox(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_pyrabox")).args(args).output().expect("binary runs")
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// A few generated images written as PPM files plus their annotation file.
fn write_dataset(dir: &Path, n: usize) -> String {
    let recs = synthetic_dataset(11, n, &SyntheticConfig::default());
    let mut blocks = Vec::new();
    for r in &recs {
        let name = format!("{:02}.ppm", blocks.len());
        write_ppm(&dir.join(&name), &r.image).unwrap();
        blocks.push(Annotation { path: name, faces: r.faces.clone() });
    }
    let ann = dir.join("faces.txt");
    write_annotations(&ann, &blocks).unwrap();
    ann.to_str().unwrap().to_string()
}

#[test]
fn help_lists_every_config_key() {
    let o = pyrabox(&["--help"]);
    assert!(o.status.success());
    let text = String::from_utf8_lossy(&o.stdout);
    for key in [
        "input_size", "width_factor", "lfpn_start", "lfpn_merge", "cpm_width", "s_pa", "K ", "threshold", "lambda ",
        "lambda_k", "variance", "lr_schedule", "batch_size", "seed",
    ] {
        assert!(text.contains(key), "--help misses {key}");
    }
}

#[test]
fn anchor_dump_line_count() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("a.jsonl");
    let o = pyrabox(&["anchors", "--out", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let lines = fs::read_to_string(&out).unwrap().lines().count();
    let expect: usize = (0..6).map(|l| (640usize >> (2 + l)).pow(2)).sum();
    assert_eq!(lines, expect);
}

#[test]
fn usage_errors_exit_one() {
    let o = pyrabox(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:"));

    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"input_size": 160, "lfpn_strat": 2}"#).unwrap();
    let o = pyrabox(&["anchors", "--config", cfg.to_str().unwrap(), "--out", "/dev/null"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).starts_with("error:") && stderr(&o).contains("lfpn_strat"), "{}", stderr(&o));

    fs::write(&cfg, r#"{"input_size": 100}"#).unwrap();
    let o = pyrabox(&["anchors", "--config", cfg.to_str().unwrap(), "--out", "/dev/null"]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
}

#[test]
fn malformed_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let ann = dir.path().join("bad.txt");
    fs::write(&ann, "a.ppm\n3\n1 2 3 4\n").unwrap();
    let det = dir.path().join("d.txt");
    fs::write(&det, "").unwrap();
    let o = pyrabox(&["eval", "--detections", det.to_str().unwrap(), "--annotations", ann.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = stderr(&o);
    assert!(err.starts_with("error:") && err.contains("line 4"), "{err}");

    // two tensors with the same name
    let mut bytes = b"PYBX".to_vec();
    bytes.extend(1u32.to_le_bytes());
    bytes.extend(2u32.to_le_bytes());
    for _ in 0..2 {
        bytes.extend(1u16.to_le_bytes());
        bytes.push(b'w');
        bytes.extend([0u8, 1]);
        bytes.extend(1u32.to_le_bytes());
        bytes.extend(0.5f32.to_le_bytes());
    }
    let model = dir.path().join("dup.bin");
    fs::write(&model, bytes).unwrap();
    let good_ann = write_dataset(dir.path(), 1);
    let out = dir.path().join("out.txt");
    let o = pyrabox(&[
        "infer", "--preset", "toy", "--annotations", &good_ann, "--images-root", dir.path().to_str().unwrap(), "--model",
        model.to_str().unwrap(), "--out", out.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("duplicate tensor name w"), "{}", stderr(&o));

    fs::write(dir.path().join("00.ppm"), b"P6\n160 160\n255\n\x00\x01").unwrap();
    let o = pyrabox(&["label", "--preset", "toy", "--annotations", &good_ann, "--images-root", dir.path().to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
}

#[test]
fn gradcheck_exits_zero() {
    let o = pyrabox(&["gradcheck", "--seed", "7"]);
    assert!(o.status.success(), "{}", stderr(&o));
    let table = String::from_utf8_lossy(&o.stdout);
    assert!(table.contains("cpm_heads_loss") && !table.contains("FAIL"));
}

#[test]
fn label_reports_levels() {
    let dir = tempfile::tempdir().unwrap();
    let ann = write_dataset(dir.path(), 3);
    let out = dir.path().join("s.json");
    let o = pyrabox(&[
        "label", "--preset", "toy", "--annotations", &ann, "--images-root", dir.path().to_str().unwrap(), "--out",
        out.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(v["images"], 3);
    assert_eq!(v["levels"].as_array().unwrap().len(), 3);
    assert!(v["levels"][0]["positives"].as_u64().unwrap() > 0);
}

#[test]
fn sample_outputs_repeat_for_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let ann = write_dataset(dir.path(), 4);
    let run = |out: &str| {
        let out_dir = dir.path().join(out);
        let o = pyrabox(&[
            "sample", "--preset", "toy", "--annotations", &ann, "--images-root", dir.path().to_str().unwrap(), "--n",
            "300", "--seed", "5", "--max-crops", "3", "--out-dir", out_dir.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        ["histogram.csv", "annotations.txt", "crop_00002.ppm"].map(|f| fs::read(out_dir.join(f)).unwrap())
    };
    let (a, b) = (run("a"), run("b"));
    assert_eq!(a, b);
    let hist = String::from_utf8(a[0].clone()).unwrap();
    assert!(hist.starts_with("size_lo,size_hi,pre,post\n"));
    assert!(!dir.path().join("a").join("crop_00003.ppm").exists());
}

#[test]
fn train_infer_eval_round() {
    let dir = tempfile::tempdir().unwrap();
    let root = dir.path().to_str().unwrap();
    let ann = write_dataset(dir.path(), 2);
    let model = dir.path().join("m.bin");
    let train = |seed: &str| {
        let o = pyrabox(&[
            "train", "--preset", "toy", "--annotations", &ann, "--images-root", root, "--steps", "3", "--seed", seed,
            "--out", model.to_str().unwrap(),
        ]);
        assert!(o.status.success(), "{}", stderr(&o));
        fs::read(&model).unwrap()
    };
    let first = train("3");
    assert_eq!(first, train("3"));
    assert_ne!(first, train("4"));

    let dets = dir.path().join("d.txt");
    let o = pyrabox(&[
        "infer", "--preset", "toy", "--annotations", &ann, "--images-root", root, "--model", model.to_str().unwrap(),
        "--out", dets.to_str().unwrap(),
    ]);
    assert!(o.status.success(), "{}", stderr(&o));
    let csv = dir.path().join("pr.csv");
    let o = pyrabox(&["eval", "--detections", dets.to_str().unwrap(), "--annotations", &ann, "--out", csv.to_str().unwrap()]);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("recall,precision\n") && text.lines().last().unwrap().starts_with("AP,"));
}

#[test]
fn diverging_training_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.json");
    fs::write(&cfg, r#"{"lr_schedule": [[10, 1e12]], "batch_size": 1}"#).unwrap();
    let o = pyrabox(&[
        "train", "--preset", "toy", "--config", cfg.to_str().unwrap(), "--synthetic", "4", "--holdout", "0", "--out",
        dir.path().join("m.bin").to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).starts_with("error:") && stderr(&o).contains("non-finite"));
}
