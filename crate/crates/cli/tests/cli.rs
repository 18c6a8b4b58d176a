use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use rank::dataset::{load_dataset, random_split, save_dataset, MultiViewDataset, Split};
use rank::model::{save_checkpoint, ModelConfig, RankModel};
use rank::nd::{Matrix, RngStream};
use tempfile::TempDir;

fn rank(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_rank"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = rank(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn code(args: &[&str]) -> i32 {
    rank(args).status.code().expect("exit code")
}

fn s(p: &Path) -> &str {
    p.to_str().expect("utf-8 path")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

fn synth(dir: &Path, name: &str, extra: &[&str]) -> PathBuf {
    let out = dir.join(name);
    let mut args = vec!["--seed", "1", "--out", s(&out), "synth"];
    args.extend(extra);
    ok(&args);
    out
}

fn csv_rows(path: &Path) -> Vec<Vec<String>> {
    fs::read_to_string(path)
        .unwrap()
        .lines()
        .map(|l| l.split(',').map(str::to_owned).collect())
        .collect()
}

const SMALL_NET: [&str; 6] = ["--hidden", "8", "--embed-dim", "4", "--batch-size", "32"];

#[test]
fn synth_writes_manifest_and_six_csvs_deterministically() {
    let tmp = TempDir::new().unwrap();
    let args = ["--n", "200", "--views", "2", "--classes", "4"];
    let a = synth(tmp.path(), "a", &args);
    let b = synth(tmp.path(), "b", &args);
    let mut names: Vec<String> = fs::read_dir(&a)
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert_eq!(names.iter().filter(|n| n.ends_with(".csv")).count(), 6);
    assert!(names.contains(&"manifest.json".to_owned()));
    for n in &names {
        assert_eq!(
            fs::read(a.join(n)).unwrap(),
            fs::read(b.join(n)).unwrap(),
            "{n}"
        );
    }
}

#[test]
fn synth_split_is_seventy_fifteen_fifteen() {
    let tmp = TempDir::new().unwrap();
    let d = load_dataset(&synth(tmp.path(), "d", &["--n", "100"])).unwrap();
    let count = |s| d.indices(s).len();
    assert_eq!(
        (count(Split::Train), count(Split::Val), count(Split::Test)),
        (70, 15, 15)
    );
}

#[test]
fn inject_hides_the_requested_fractions() {
    let tmp = TempDir::new().unwrap();
    let d = synth(tmp.path(), "d", &["--n", "400", "--views", "2"]);
    let i = tmp.path().join("i");
    ok(&[
        "--seed",
        "5",
        "--out",
        s(&i),
        "inject",
        "--data",
        s(&d),
        "--view-missing",
        "0.5",
        "--label-missing",
        "0.5",
    ]);
    let before = load_dataset(&d).unwrap();
    let after = load_dataset(&i).unwrap();
    assert!(after.view_mask().data().iter().sum::<f64>() / after.view_mask().len() as f64 >= 0.5);
    let train = before.indices(Split::Train);
    for j in 0..before.n_classes() {
        for positive in [1.0, 0.0] {
            let group: Vec<usize> = train
                .iter()
                .copied()
                .filter(|&r| before.labels()[(r, j)] == positive)
                .collect();
            let hidden = group
                .iter()
                .filter(|&&r| after.label_mask()[(r, j)] == 0.0)
                .count();
            assert_eq!(hidden, (0.5 * group.len() as f64).round() as usize);
        }
    }
    for r in before.indices(Split::Test) {
        assert!(after.label_mask().row(r).iter().all(|&g| g == 1.0));
    }
}

#[test]
fn inject_with_zero_rates_copies_the_matrices() {
    let tmp = TempDir::new().unwrap();
    let d = synth(tmp.path(), "d", &["--n", "60", "--views", "2"]);
    let i = tmp.path().join("i");
    ok(&[
        "--out",
        s(&i),
        "inject",
        "--data",
        s(&d),
        "--view-missing",
        "0",
        "--label-missing",
        "0",
    ]);
    for f in [
        "view_0.csv",
        "view_1.csv",
        "Y.csv",
        "W.csv",
        "G.csv",
        "split.csv",
    ] {
        assert_eq!(
            fs::read(d.join(f)).unwrap(),
            fs::read(i.join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn heavy_view_loss_still_leaves_a_view_per_sample() {
    let tmp = TempDir::new().unwrap();
    let d = synth(tmp.path(), "d", &["--n", "300", "--views", "2"]);
    let i = tmp.path().join("i");
    ok(&[
        "--out",
        s(&i),
        "inject",
        "--data",
        s(&d),
        "--view-missing",
        "0.7",
    ]);
    for row in csv_rows(&i.join("W.csv")) {
        assert!(row.iter().any(|w| w.parse::<f64>().unwrap() == 1.0));
    }
}

#[test]
fn malformed_manifest_names_the_field() {
    let tmp = TempDir::new().unwrap();
    let d = synth(tmp.path(), "d", &["--n", "40"]);
    let text = fs::read_to_string(d.join("manifest.json")).unwrap();
    let broken = text.replacen("\"n\": 40", "\"n\": \"forty\"", 1);
    assert_ne!(text, broken);
    fs::write(d.join("manifest.json"), broken).unwrap();
    let out = rank(&["--out", s(&tmp.path().join("i")), "inject", "--data", s(&d)]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("manifest.json") && err.contains('n'), "{err}");
}

#[test]
fn missing_dataset_is_an_io_error() {
    let tmp = TempDir::new().unwrap();
    let missing = tmp.path().join("nowhere");
    assert_eq!(
        code(&[
            "--out",
            s(&tmp.path().join("o")),
            "inject",
            "--data",
            s(&missing)
        ]),
        2
    );
}

#[test]
fn help_and_usage_exit_codes() {
    assert_eq!(code(&["--help"]), 0);
    assert_eq!(code(&["train", "--help"]), 0);
    assert_eq!(code(&["frobnicate"]), 1);
    assert_eq!(code(&["synth", "--n", "lots"]), 1);
}

#[test]
fn zero_epochs_write_only_the_initial_checkpoint() {
    let tmp = TempDir::new().unwrap();
    let d = synth(tmp.path(), "d", &["--n", "40", "--views", "2"]);
    let r = tmp.path().join("r");
    let mut args = vec!["--out", s(&r), "train", "--data", s(&d), "--epochs", "0"];
    args.extend(SMALL_NET);
    ok(&args);
    assert!(r.join("checkpoint/manifest.json").exists());
    assert!(!r.join("history.csv").exists());
    assert!(!r.join("metrics.json").exists());
    assert!(!r.join("final").exists());
}

#[test]
fn ablating_the_collaborative_loss_swaps_the_history_column() {
    let tmp = TempDir::new().unwrap();
    let d = synth(tmp.path(), "d", &["--n", "60", "--views", "2"]);
    let r = tmp.path().join("r");
    let mut args = vec![
        "--out",
        s(&r),
        "train",
        "--data",
        s(&d),
        "--epochs",
        "2",
        "--ablate",
        "no-mcce",
    ];
    args.extend(SMALL_NET);
    ok(&args);
    let header = &csv_rows(&r.join("history.csv"))[0];
    assert!(header.contains(&"l_mbce".to_owned()));
    assert!(!header.contains(&"l_mcce".to_owned()));
    assert_eq!(csv_rows(&r.join("history.csv")).len(), 3);
}

#[test]
fn repeated_runs_report_mean_and_stddev() {
    let tmp = TempDir::new().unwrap();
    let d = synth(tmp.path(), "d", &["--n", "60", "--views", "2"]);
    let r = tmp.path().join("r");
    let mut args = vec![
        "--out",
        s(&r),
        "train",
        "--data",
        s(&d),
        "--epochs",
        "2",
        "--repeat",
        "3",
        "--seeds",
        "1,2,3",
    ];
    args.extend(SMALL_NET);
    ok(&args);
    let m = json(&r.join("metrics.json"));
    assert_eq!(m["runs"].as_array().unwrap().len(), 3);
    let aps: Vec<f64> = m["runs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|run| run["test"]["ap"].as_f64().unwrap())
        .collect();
    let mean = aps.iter().sum::<f64>() / 3.0;
    let sd = (aps.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / 2.0).sqrt();
    assert!((m["mean"]["ap"].as_f64().unwrap() - mean).abs() < 1e-12);
    assert!((m["stddev"]["ap"].as_f64().unwrap() - sd).abs() < 1e-12);
    for seed in 1..=3 {
        assert!(r.join(format!("run_{seed}/history.csv")).exists());
    }
}

#[test]
fn train_rejects_conflicting_or_duplicate_settings() {
    let tmp = TempDir::new().unwrap();
    let d = synth(tmp.path(), "d", &["--n", "40", "--views", "2"]);
    let r = tmp.path().join("r");
    let base = ["--out", s(&r), "train", "--data", s(&d), "--epochs", "1"];
    let with = |extra: &[&str]| {
        let mut a = base.to_vec();
        a.extend(extra);
        code(&a)
    };
    assert_eq!(
        with(&["--ablate", "no-discriminator", "--fusion", "dynamic"]),
        1
    );
    assert_eq!(with(&["--fusion", "masked-average"]), 1);
    assert_eq!(with(&["--repeat", "2", "--seeds", "4,4"]), 1);
    assert_eq!(with(&["--repeat", "3", "--seeds", "1,2"]), 1);
    assert_eq!(with(&["--lr", "0"]), 1);
    assert_eq!(with(&["--beta", "1.5"]), 1);
    assert!(!r.exists());
}

/// One view equal to the labels and a network that copies it through.
fn perfect_fixture(dir: &Path) -> (PathBuf, PathBuf) {
    let (n, c) = (40, 4);
    let mut rng = RngStream::new(3);
    let mut y = Matrix::from_fn(n, c, |_, _| if rng.uniform() < 0.4 { 1.0 } else { 0.0 });
    for i in 0..n {
        y[(i, i % c)] = 1.0;
    }
    let split = random_split(n, &mut rng);
    let ds = MultiViewDataset::new(
        vec![y.clone()],
        y,
        Matrix::ones(n, 1),
        Matrix::ones(n, c),
        split,
        3,
    )
    .unwrap();
    let data = dir.join("perfect");
    save_dataset(&ds, &data).unwrap();

    let mut cfg = ModelConfig::new(vec![c], c, 0);
    cfg.hidden = vec![c];
    cfg.embed_dim = c;
    let mut model = RankModel::init(cfg).unwrap();
    for layer in &mut model.encoders[0].layers {
        layer.weight = Matrix::identity(c);
        layer.bias = Matrix::zeros(1, c);
    }
    let cls = &mut model.classifier.layers[0];
    cls.weight = Matrix::identity(c).map(|v| 20.0 * v);
    cls.bias = Matrix::filled(1, c, -10.0);
    let ckpt = dir.join("ckpt");
    save_checkpoint(&model, 0, &ckpt).unwrap();
    (data, ckpt)
}

#[test]
fn eval_of_a_perfect_model_is_perfect_and_repeatable() {
    let tmp = TempDir::new().unwrap();
    let (data, ckpt) = perfect_fixture(tmp.path());
    let run = |name: &str| {
        let out = tmp.path().join(name);
        ok(&[
            "--out",
            s(&out),
            "eval",
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&data),
        ]);
        fs::read(out.join("metrics.json")).unwrap()
    };
    let first = run("e1");
    assert_eq!(first, run("e2"));
    let m: serde_json::Value = serde_json::from_slice(&first).unwrap();
    assert_eq!(m["metrics"]["ap"].as_f64(), Some(1.0));
    assert_eq!(m["metrics"]["oe"].as_f64(), Some(0.0));
}

#[test]
fn eval_counts_match_split_sizes() {
    let tmp = TempDir::new().unwrap();
    let (data, ckpt) = perfect_fixture(tmp.path());
    let ds = load_dataset(&data).unwrap();
    for (flag, split) in [("test", Split::Test), ("val", Split::Val)] {
        let out = ok(&[
            "eval",
            "--checkpoint",
            s(&ckpt),
            "--data",
            s(&data),
            "--split",
            flag,
        ]);
        let m: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
        assert_eq!(
            m["metrics"]["n_eval"].as_u64(),
            Some(ds.indices(split).len() as u64)
        );
    }
}

#[test]
fn eval_rejects_a_mismatched_dataset() {
    let tmp = TempDir::new().unwrap();
    let (_, ckpt) = perfect_fixture(tmp.path());
    let other = synth(tmp.path(), "other", &["--n", "40", "--views", "2"]);
    assert_eq!(
        code(&["eval", "--checkpoint", s(&ckpt), "--data", s(&other)]),
        1
    );
}

#[test]
fn gradcheck_passes_by_default_and_fails_the_negative_control() {
    let out = ok(&["gradcheck", "--instances", "20"]);
    let text = String::from_utf8_lossy(&out.stdout);
    assert_eq!(
        text.lines().filter(|l| l.ends_with("PASS")).count(),
        7,
        "{text}"
    );
    assert_eq!(
        code(&["gradcheck", "--instances", "2", "--negative-control"]),
        1
    );
    ok(&["gradcheck", "--toy", "--tol", "1e-9"]);
}

#[test]
fn correlation_subsets_and_truncation() {
    let tmp = TempDir::new().unwrap();
    let d = synth(tmp.path(), "d", &["--n", "300", "--classes", "12"]);
    let c = tmp.path().join("c");
    let labels = "0,1,2,3,4,5,6,7,8,9";
    ok(&[
        "--out",
        s(&c),
        "correlation",
        "--data",
        s(&d),
        "--labels",
        labels,
    ]);
    let rows = csv_rows(&c.join("correlation.csv"));
    assert_eq!(rows.len(), 11);
    assert!(rows.iter().all(|r| r.len() == 10));

    ok(&[
        "--out",
        s(&c),
        "correlation",
        "--data",
        s(&d),
        "--sigma",
        "1",
        "--truncate",
    ]);
    for row in &csv_rows(&c.join("correlation.csv"))[1..] {
        assert!(row.iter().all(|v| v.parse::<f64>().unwrap() == 0.0));
    }
    assert_eq!(
        code(&[
            "--out",
            s(&c),
            "correlation",
            "--data",
            s(&d),
            "--labels",
            "0,12"
        ]),
        1
    );
}

#[test]
fn hidden_labels_keep_the_correlation_sign_pattern() {
    let tmp = TempDir::new().unwrap();
    let d = synth(
        tmp.path(),
        "d",
        &["--n", "1000", "--views", "2", "--classes", "10"],
    );
    let i = tmp.path().join("i");
    ok(&[
        "--out",
        s(&i),
        "inject",
        "--data",
        s(&d),
        "--view-missing",
        "0",
        "--label-missing",
        "0.5",
    ]);
    let pattern = |data: &Path, name: &str| {
        let out = tmp.path().join(name);
        ok(&["--out", s(&out), "correlation", "--data", s(data)]);
        csv_rows(&out.join("correlation.csv"))[1..]
            .iter()
            .map(|r| {
                r.iter()
                    .map(|v| v.parse::<f64>().unwrap() > 0.1)
                    .collect::<Vec<_>>()
            })
            .collect::<Vec<_>>()
    };
    let (full, masked) = (pattern(&d, "cf"), pattern(&i, "cm"));
    let (mut agree, mut total) = (0, 0);
    for a in 0..10 {
        for b in 0..10 {
            if a != b {
                total += 1;
                agree += usize::from(full[a][b] == masked[a][b]);
            }
        }
    }
    assert!(agree as f64 >= 0.8 * total as f64, "{agree}/{total}");
}
