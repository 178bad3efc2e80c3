use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn gdcunet(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gdcunet")).args(args).current_dir(cwd).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn params_setting_three_is_smallest_and_rows_add_up() {
    let dir = tempfile::tempdir().unwrap();
    let mut totals = Vec::new();
    for s in 1..=6 {
        let o = gdcunet(&["params", "--setting", &s.to_string()], dir.path());
        assert!(o.status.success());
        let text = stdout(&o);
        let mut sum = 0usize;
        let mut total = 0usize;
        for line in text.lines().skip(2) {
            let last: usize = line.split_whitespace().last().unwrap().parse().unwrap();
            if line.starts_with("total") {
                total = last;
            } else {
                sum += last;
            }
        }
        assert_eq!(sum, total, "setting {s}");
        totals.push(total);
    }
    let min = *totals.iter().min().unwrap();
    assert_eq!(totals[2], min);

    let full = stdout(&gdcunet(&["params", "--setting", "5"], dir.path()));
    let abl = stdout(&gdcunet(&["params", "--setting", "5", "--ablation"], dir.path()));
    let total = |t: &str| -> usize { t.lines().last().unwrap().split_whitespace().last().unwrap().parse().unwrap() };
    assert!(total(&abl) < total(&full));
}

#[test]
fn params_rejects_unknown_setting() {
    let dir = tempfile::tempdir().unwrap();
    let o = gdcunet(&["params", "--setting", "7"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_scope_and_mutation() {
    let dir = tempfile::tempdir().unwrap();
    let o = gdcunet(&["gradcheck", "--scope", "warp"], dir.path());
    assert!(o.status.success(), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(text.contains("PASS warp"));
    assert!(!text.contains("loss"));

    let bad = gdcunet(&["gradcheck", "--scope", "warp", "--inject-sign-flip", "warp"], dir.path());
    assert!(!bad.status.success());
    assert!(stdout(&bad).contains("FAIL warp"));

    let unknown = gdcunet(&["gradcheck", "--scope", "bogus"], dir.path());
    assert_eq!(unknown.status.code(), Some(2));
}

#[test]
fn train_without_data_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = gdcunet(&["train", "--epochs", "1"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn train_eval_inspect_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = gdcunet(
        &[
            "train", "--synthetic", "--resolution", "32", "--train-count", "3", "--test-count", "2", "--epochs", "2",
            "--setting", "5", "--out", "run",
        ],
        d,
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["best.gdcu", "final.gdcu", "epochs.csv", "manifest.json"] {
        assert!(d.join("run").join(f).is_file(), "missing {f}");
    }
    let log = csv_rows(&d.join("run/epochs.csv"));
    assert_eq!(log[0], ["epoch", "lr", "train_loss", "test_iou", "test_dice"]);
    assert_eq!(log.len(), 3);
    assert_eq!(log[1][1].parse::<f64>().unwrap(), 1e-4);

    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("run/manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["safd"]["kernel_size"], 5);
    assert_eq!(manifest["safd"]["heads"], 4);
    assert_eq!(manifest["safd"]["hidden_dim"], 64);
    assert_eq!(manifest["train"]["lr_init"], 1e-4);

    // rerun from the manifest reproduces the artifacts
    let again = gdcunet(&["train", "--manifest", "run/manifest.json", "--out", "rerun"], d);
    assert!(again.status.success());
    assert_eq!(fs::read(d.join("run/final.gdcu")).unwrap(), fs::read(d.join("rerun/final.gdcu")).unwrap());
    assert_eq!(fs::read(d.join("run/epochs.csv")).unwrap(), fs::read(d.join("rerun/epochs.csv")).unwrap());

    // evaluation with mask export; the mean row is the column mean
    let e = gdcunet(
        &[
            "eval", "--checkpoint", "run/final.gdcu", "--synthetic", "--resolution", "32", "--count", "3",
            "--out", "m.csv", "--export-masks", "pred",
        ],
        d,
    );
    assert!(e.status.success(), "{}", String::from_utf8_lossy(&e.stderr));
    assert_eq!(fs::read_dir(d.join("pred")).unwrap().count(), 3);
    let rows = csv_rows(&d.join("m.csv"));
    assert_eq!(rows.len(), 5);
    let mean_iou: f64 = rows[1..4].iter().map(|r| r[1].parse::<f64>().unwrap()).sum::<f64>() / 3.0;
    assert!((rows[4][1].parse::<f64>().unwrap() - mean_iou).abs() < 1e-12);

    // resolution not divisible by the pooling depth
    let odd = gdcunet(&["eval", "--checkpoint", "run/final.gdcu", "--synthetic", "--resolution", "30", "--count", "1"], d);
    assert!(!odd.status.success());

    // feature maps at a tap
    let s = gdcunet(&["synth", "--count", "1", "--size", "32", "--out", "syn"], d);
    assert!(s.status.success());
    let taps = stdout(&gdcunet(&["inspect", "--checkpoint", "run/final.gdcu", "--list-taps"], d));
    assert!(taps.lines().any(|t| t == "enc2.safd"));
    let img = "syn/images/synth_0000.png";
    let i = gdcunet(&["inspect", "--checkpoint", "run/final.gdcu", "--image", img, "--tap", "enc2.safd", "--out", "fm"], d);
    assert!(i.status.success(), "{}", String::from_utf8_lossy(&i.stderr));
    let csvs: Vec<_> = fs::read_dir(d.join("fm")).unwrap().filter_map(|e| {
        let p = e.unwrap().path();
        (p.extension().unwrap() == "csv").then_some(p)
    }).collect();
    assert_eq!(csvs.len(), 64);
    for c in &csvs {
        let total: u64 = csv_rows(c)[1..].iter().map(|r| r[1].parse::<u64>().unwrap()).sum();
        assert_eq!(total, 8 * 8);
    }
    let first = fs::read(d.join("fm/enc2_safd_c000.png")).unwrap();
    let i2 = gdcunet(&["inspect", "--checkpoint", "run/final.gdcu", "--image", img, "--tap", "enc2.safd", "--out", "fm"], d);
    assert!(i2.status.success());
    assert_eq!(fs::read(d.join("fm/enc2_safd_c000.png")).unwrap(), first);

    let bad = gdcunet(&["inspect", "--checkpoint", "run/final.gdcu", "--image", img, "--tap", "nope"], d);
    assert_eq!(bad.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&bad.stderr).contains("enc2.safd"));
}

#[test]
fn eval_on_directory_dataset() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    assert!(gdcunet(&["synth", "--count", "2", "--size", "32", "--out", "ds"], d).status.success());
    assert!(gdcunet(
        &["train", "--data", "ds", "--resolution", "32", "--epochs", "1", "--split-ratio", "0.5", "--out", "r"],
        d
    )
    .status
    .success());
    let e = gdcunet(&["eval", "--checkpoint", "r/best.gdcu", "--data", "ds", "--resolution", "32", "--out", "m.csv"], d);
    assert!(e.status.success());
    assert_eq!(csv_rows(&d.join("m.csv")).len(), 4);

    fs::remove_file(d.join("ds/masks/synth_0001.png")).unwrap();
    let u = gdcunet(&["eval", "--checkpoint", "r/best.gdcu", "--data", "ds", "--resolution", "32"], d);
    assert!(!u.status.success());
    assert!(String::from_utf8_lossy(&u.stderr).contains("synth_0001"));
}
