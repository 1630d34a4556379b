use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_decompseg"));
    cmd.env("RUST_LOG", "warn").env_remove("DECOMPSEG_OUT_ROOT");
    cmd
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().unwrap()
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "`{}` failed: {}",
        args.join(" "),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn s(p: &Path) -> String {
    p.to_string_lossy().into_owned()
}

/// Contents of every file under `dir`, keyed by relative path.
fn tree(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

fn synth(dir: &Path, n: &str) -> (String, String) {
    ok(&["gen-synth", "--n", n, "--size", "64", "--seed", "3", "--out", &s(dir)]);
    (s(&dir.join("train.jsonl")), s(&dir.join("val.jsonl")))
}

#[test]
fn usage_errors_exit_with_two() {
    assert_eq!(run(&["train-classifier", "--bogus"]).status.code(), Some(2));
    assert_eq!(run(&["eval", "--manifest", "m.jsonl"]).status.code(), Some(2));
    assert_eq!(run(&["gen-synth", "--n", "0"]).status.code(), Some(2));
    assert_eq!(run(&[]).status.code(), Some(2));
}

#[test]
fn joint_training_without_a_classifier_is_a_runtime_error() {
    let tmp = tempfile::tempdir().unwrap();
    let (train, _) = synth(&tmp.path().join("data"), "8");
    let out = run(&["train", "--train", &train, "--scale", "desk", "--out", &s(&tmp.path().join("j"))]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("train-classifier must run first"));
}

#[test]
fn synthetic_data_is_reproducible_and_lands_under_the_out_root() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    synth(&a, "12");
    synth(&b, "12");
    // Only the persisted config names the output directory.
    let strip = |t: BTreeMap<PathBuf, Vec<u8>>, root: &Path| -> BTreeMap<PathBuf, Vec<u8>> {
        t.into_iter()
            .map(|(k, v)| match k.extension().and_then(|e| e.to_str()) {
                Some("toml" | "jsonl") => (k, String::from_utf8(v).unwrap().replace(&s(root), "").into_bytes()),
                _ => (k, v),
            })
            .collect()
    };
    assert_eq!(strip(tree(&a), &a), strip(tree(&b), &b));

    let root = tmp.path().join("root");
    let out = bin()
        .env("DECOMPSEG_OUT_ROOT", &root)
        .args(["gen-synth", "--n", "4", "--size", "32"])
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(root.join("synth").join("train.jsonl").is_file());
    assert!(root.join("synth").join("config.toml").is_file());
}

#[test]
fn pipeline_commands_are_reproducible_and_leave_inputs_untouched() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let (train, val) = synth(&data, "12");
    let before = tree(&data);

    let cls = tmp.path().join("cls");
    let out = ok(&[
        "train-classifier", "--train", &train, "--val", &val, "--scale", "desk", "--epochs", "1", "--batch-size", "4",
        "--max-steps", "2", "--out", &s(&cls),
    ]);
    assert!(!out.is_empty());
    assert!(cls.join("last").join("classifier.safetensors").is_file());

    let joint = tmp.path().join("joint");
    ok(&[
        "train", "--train", &train, "--val", &val, "--classifier", &s(&cls), "--scale", "desk", "--epochs", "1",
        "--max-steps", "2", "--lambda-m", "0.5", "--out", &s(&joint),
    ]);
    let config = joint.join("config.toml");
    let text = fs::read_to_string(&config).unwrap();
    assert!(text.contains("lambda_m = 0.5"), "{text}");

    // Rerunning from the stored configuration reproduces the weights.
    let again = tmp.path().join("again");
    ok(&["train", "--config", &s(&config), "--out", &s(&again)]);
    for file in ["encoder.safetensors", "mask_decoder.safetensors", "image_decoder.safetensors"] {
        assert_eq!(
            fs::read(joint.join("last").join(file)).unwrap(),
            fs::read(again.join("last").join(file)).unwrap(),
            "{file}"
        );
    }

    let report = tmp.path().join("report");
    let table = ok(&[
        "eval", "--checkpoint", &s(&joint), "--manifest", &val, "--samples", "2", "--out", &s(&report),
    ]);
    assert!(table.contains("IoU"), "{table}");
    assert!(table.lines().any(|l| l.starts_with("bg")), "{table}");
    let metrics: serde_json::Value = serde_json::from_slice(&fs::read(report.join("metrics.json")).unwrap()).unwrap();
    assert!(metrics["seg_metrics"]["mean_iou"].is_number());

    let img = data.join("images").join(fs::read_dir(data.join("images")).unwrap().next().unwrap().unwrap().file_name());
    let pred = tmp.path().join("pred");
    let printed = ok(&["predict", "--checkpoint", &s(&joint), "--image", &s(&img), "--out", &s(&pred)]);
    let stem = img.file_stem().unwrap().to_string_lossy().into_owned();
    let labels = image::open(pred.join(format!("{stem}_labels.png"))).unwrap();
    assert_eq!((labels.width(), labels.height()), (64, 64));
    assert!(pred.join(format!("{stem}_overlay.png")).is_file());
    assert!(!printed.is_empty());

    assert_eq!(tree(&data), before);
}

#[test]
fn architecture_check_passes_at_paper_scale() {
    let table = ok(&["check-arch"]);
    assert!(table.contains("Conv(c=C_out, k=3, s=1)"), "{table}");
    let json: serde_json::Value = serde_json::from_str(&ok(&["check-arch", "--json"])).unwrap();
    assert_eq!(json["mismatches"].as_array().map(Vec::len), Some(0));
}
