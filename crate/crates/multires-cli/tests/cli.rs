//! End-to-end tests of the `multires` binary: artifact layout, exit codes,
//! determinism, and agreement between the text and CSV report views.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::Output;

fn multires(args: &[&str]) -> Output {
    std::process::Command::new(env!("CARGO_BIN_EXE_multires"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn run_ok(args: &[&str]) -> String {
    let out = multires(args);
    assert!(
        out.status.success(),
        "command {args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn exit_code(out: &Output) -> i32 {
    out.status.code().expect("no signal")
}

fn read(path: &Path) -> String {
    std::fs::read_to_string(path)
        .unwrap_or_else(|e| panic!("reading {}: {e}", path.display()))
}

/// Small dataset used by most tests: 3×3 coarse cells of 3×3 pixels.
fn generate_small(dir: &Path, seed: &str) {
    run_ok(&[
        "generate",
        "--out",
        dir.to_str().unwrap(),
        "--seeds",
        seed,
        "--grid-side",
        "3",
        "--coarse-labeled",
        "4",
        "--fine-labeled",
        "4",
    ]);
}

const LAYER_FILES: [&str; 5] = [
    "fine_labeled.csv",
    "fine_unlabeled.csv",
    "fine_test.csv",
    "coarse1_labeled.csv",
    "coarse1_unlabeled.csv",
];

fn data_rows(path: &Path) -> usize {
    read(path).lines().skip(1).filter(|l| !l.is_empty()).count()
}

#[test]
fn generate_writes_five_deterministic_files() {
    let tmp = tempfile::tempdir().unwrap();
    let a = tmp.path().join("a");
    let b = tmp.path().join("b");
    let c = tmp.path().join("c");
    generate_small(&a, "0");
    generate_small(&b, "0");
    generate_small(&c, "1");
    for name in LAYER_FILES {
        let bytes_a = read(&a.join(name));
        assert_eq!(bytes_a, read(&b.join(name)), "{name} differs across runs");
        assert!(!bytes_a.is_empty());
    }
    assert_ne!(
        read(&a.join("fine_unlabeled.csv")),
        read(&c.join("fine_unlabeled.csv")),
        "different seeds produced identical features"
    );
}

#[test]
fn generate_core_grid_has_900_fine_rows() {
    let tmp = tempfile::tempdir().unwrap();
    let dir = tmp.path().join("data");
    run_ok(&[
        "generate",
        "--out",
        dir.to_str().unwrap(),
        "--seeds",
        "0",
        "--grid-side",
        "10",
        "--ratio",
        "3",
        "--coarse-labeled",
        "0",
        "--fine-labeled",
        "0",
    ]);
    let fine_rows = data_rows(&dir.join("fine_labeled.csv")) + data_rows(&dir.join("fine_unlabeled.csv"));
    assert_eq!(fine_rows, 900);
    assert_eq!(data_rows(&dir.join("coarse1_unlabeled.csv")), 100);
}

#[test]
fn train_writes_deterministic_metrics_and_checkpoints() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate_small(&data, "0");
    let run = |out: &PathBuf| {
        run_ok(&[
            "train",
            "--data-dir",
            data.to_str().unwrap(),
            "--out",
            out.to_str().unwrap(),
            "--method",
            "onlyfine",
            "--epochs",
            "5",
            "--seeds",
            "3",
        ]);
    };
    let out1 = tmp.path().join("run1");
    let out2 = tmp.path().join("run2");
    run(&out1);
    run(&out2);
    let metrics = read(&out1.join("metrics.txt"));
    assert!(metrics.starts_with("method onlyfine\nseed 3\nlambda none\nepochs 5\n"));
    assert_eq!(metrics, read(&out2.join("metrics.txt")));
    assert_eq!(
        read(&out1.join("fine.model")),
        read(&out2.join("fine.model"))
    );
}

#[test]
fn unknown_method_is_a_usage_error() {
    let out = multires(&["train", "--method", "bogus", "--data-dir", "x", "--out", "y"]);
    assert_eq!(exit_code(&out), 2);
}

#[test]
fn missing_csv_is_a_runtime_error_naming_the_file() {
    let tmp = tempfile::tempdir().unwrap();
    let out = multires(&[
        "train",
        "--data-dir",
        tmp.path().to_str().unwrap(),
        "--out",
        tmp.path().join("run").to_str().unwrap(),
        "--method",
        "onlyfine",
    ]);
    assert_eq!(exit_code(&out), 1);
    let stderr = String::from_utf8_lossy(&out.stderr);
    assert!(
        stderr.contains("fine_labeled.csv"),
        "stderr does not name the missing file: {stderr}"
    );
}

/// Every fixed-precision number appearing in a report's text view.
fn numbers_in(text: &str) -> Vec<String> {
    let mut found = vec![];
    for token in text.split(|c: char| c == ',' || c.is_whitespace()) {
        if token.contains('.') && token.parse::<f64>().is_ok() {
            found.push(token.to_string());
        }
    }
    found
}

#[test]
fn compare_single_method_has_zero_std_and_matching_views() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate_small(&data, "0");
    let out_dir = tmp.path().join("report");
    let stdout = run_ok(&[
        "compare",
        "--data-dir",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--method",
        "onlyfine",
        "--seeds",
        "3",
        "--epochs",
        "5",
    ]);
    let csv = read(&out_dir.join("compare.csv"));
    let text = read(&out_dir.join("compare.txt"));
    assert_eq!(stdout, text, "stdout and compare.txt differ");
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("method,mean_accuracy,std_accuracy"));
    let row: Vec<&str> = lines.next().unwrap().split(',').collect();
    assert_eq!(row[0], "onlyfine");
    assert_eq!(row[2], "0.000000", "single seed must have zero std");
    assert_eq!(numbers_in(&text), numbers_in(&csv));
}

#[test]
fn compare_views_agree_and_sort_by_mean() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate_small(&data, "0");
    let out_dir = tmp.path().join("report");
    run_ok(&[
        "compare",
        "--data-dir",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--method",
        "onlyfine,multires-mil,propagate",
        "--seeds",
        "0,1",
        "--lambda",
        "1",
        "--epochs",
        "5",
    ]);
    let csv = read(&out_dir.join("compare.csv"));
    let text = read(&out_dir.join("compare.txt"));
    assert_eq!(numbers_in(&text), numbers_in(&csv));
    let means: Vec<f64> = csv
        .lines()
        .skip(1)
        .map(|l| l.split(',').nth(1).unwrap().parse().unwrap())
        .collect();
    assert_eq!(means.len(), 3);
    assert!(
        means.windows(2).all(|w| w[0] >= w[1]),
        "rows are not sorted by mean accuracy: {means:?}"
    );

    // identical invocation → byte-identical report
    let out_dir2 = tmp.path().join("report2");
    run_ok(&[
        "compare",
        "--data-dir",
        data.to_str().unwrap(),
        "--out",
        out_dir2.to_str().unwrap(),
        "--method",
        "onlyfine,multires-mil,propagate",
        "--seeds",
        "0,1",
        "--lambda",
        "1",
        "--epochs",
        "5",
    ]);
    assert_eq!(csv, read(&out_dir2.join("compare.csv")));
}

#[test]
fn sweep_full_budget_matches_compare_and_overbudget_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate_small(&data, "0"); // fine labeled pool = 4
    let cmp_dir = tmp.path().join("cmp");
    let sweep_dir = tmp.path().join("sweep");
    run_ok(&[
        "compare",
        "--data-dir",
        data.to_str().unwrap(),
        "--out",
        cmp_dir.to_str().unwrap(),
        "--method",
        "onlyfine",
        "--seeds",
        "5",
        "--epochs",
        "5",
    ]);
    run_ok(&[
        "sweep-labels",
        "--data-dir",
        data.to_str().unwrap(),
        "--out",
        sweep_dir.to_str().unwrap(),
        "--budgets",
        "4",
        "--method",
        "onlyfine",
        "--seeds",
        "5",
        "--epochs",
        "5",
    ]);
    let cmp_mean = read(&cmp_dir.join("compare.csv"))
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .nth(1)
        .unwrap()
        .to_string();
    let sweep_csv = read(&sweep_dir.join("sweep.csv"));
    let sweep_row: Vec<String> = sweep_csv
        .lines()
        .nth(1)
        .unwrap()
        .split(',')
        .map(str::to_string)
        .collect();
    assert_eq!(sweep_row[0], "4");
    assert_eq!(sweep_row[1], "onlyfine");
    assert_eq!(
        sweep_row[2], cmp_mean,
        "full-budget sweep disagrees with compare"
    );

    let over = multires(&[
        "sweep-labels",
        "--data-dir",
        data.to_str().unwrap(),
        "--budgets",
        "4000",
        "--method",
        "onlyfine",
        "--seeds",
        "5",
        "--epochs",
        "5",
    ]);
    assert_eq!(exit_code(&over), 1);
    assert!(String::from_utf8_lossy(&over.stderr).contains("budget"));
}

#[test]
fn model_complexity_emits_the_2x2_grid() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate_small(&data, "0");
    let out_dir = tmp.path().join("grid");
    run_ok(&[
        "model-complexity",
        "--data-dir",
        data.to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--seeds",
        "0",
        "--epochs",
        "4",
        "--lambda",
        "1",
        "--hidden-dim",
        "4",
    ]);
    let csv = read(&out_dir.join("complexity.csv"));
    let rows: Vec<Vec<&str>> = csv.lines().skip(1).map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    let cells: Vec<(String, String)> = rows
        .iter()
        .map(|r| (r[0].to_string(), r[1].to_string()))
        .collect();
    assert_eq!(
        cells,
        vec![
            ("logreg".into(), "onlyfine".into()),
            ("logreg".into(), "multires-attention".into()),
            ("mlp1".into(), "onlyfine".into()),
            ("mlp1".into(), "multires-attention".into()),
        ]
    );
    for row in &rows {
        assert!(row[2].parse::<f64>().unwrap().is_finite());
    }
}

fn train_attention_run(data: &Path, out: &Path, epochs: &str) {
    run_ok(&[
        "train",
        "--data-dir",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--method",
        "multires-attention",
        "--epochs",
        epochs,
        "--lambda",
        "1",
    ]);
}

#[test]
fn export_attention_weights_form_simplexes() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate_small(&data, "0");
    let run_dir = tmp.path().join("run");
    train_attention_run(&data, &run_dir, "5");
    let csv_path = tmp.path().join("attention.csv");
    run_ok(&[
        "export-attention",
        "--checkpoint",
        run_dir.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--out",
        csv_path.to_str().unwrap(),
    ]);

    let csv = read(&csv_path);
    let mut lines = csv.lines();
    assert_eq!(
        lines.next(),
        Some("coarse_id,fine_id,loc0,loc1,attention_weight")
    );
    let mut groups: BTreeMap<usize, Vec<f64>> = BTreeMap::new();
    for line in lines.filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        assert_eq!(fields.len(), 5);
        let coarse_id: usize = fields[0].parse().unwrap();
        let weight: f64 = fields[4].parse().unwrap();
        assert!(weight > 0.0);
        groups.entry(coarse_id).or_default().push(weight);
    }
    assert!(!groups.is_empty());
    // 3×3 cells: fully unlabeled groups have 9 members; cells donating one
    // labeled pixel have 8
    assert!(groups.values().any(|w| w.len() == 9));
    for (coarse_id, weights) in &groups {
        assert!(weights.len() == 8 || weights.len() == 9);
        let sum: f64 = weights.iter().sum();
        assert!(
            (sum - 1.0).abs() < 1e-9,
            "group {coarse_id} weights sum to {sum}"
        );
    }
}

#[test]
fn export_attention_requires_an_attention_run() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate_small(&data, "0");
    let run_dir = tmp.path().join("run");
    run_ok(&[
        "train",
        "--data-dir",
        data.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--method",
        "onlyfine",
        "--epochs",
        "3",
    ]);
    let out = multires(&[
        "export-attention",
        "--checkpoint",
        run_dir.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--out",
        tmp.path().join("attention.csv").to_str().unwrap(),
    ]);
    assert_eq!(exit_code(&out), 1);
    assert!(String::from_utf8_lossy(&out.stderr).contains("attention"));
}

#[test]
fn config_file_fills_settings_and_flags_override() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    generate_small(&data, "0");
    let conf = tmp.path().join("run.toml");
    std::fs::write(&conf, "epochs = 3\nmethod = \"onlyfine\"\n").unwrap();

    let from_file = tmp.path().join("from_file");
    run_ok(&[
        "train",
        "--config",
        conf.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--out",
        from_file.to_str().unwrap(),
    ]);
    assert!(read(&from_file.join("metrics.txt")).contains("\nepochs 3\n"));

    let overridden = tmp.path().join("overridden");
    run_ok(&[
        "train",
        "--config",
        conf.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--out",
        overridden.to_str().unwrap(),
        "--epochs",
        "5",
    ]);
    assert!(read(&overridden.join("metrics.txt")).contains("\nepochs 5\n"));
}

#[test]
fn exported_attention_favors_truly_positive_members() {
    use multires_core::data::Label;
    use multires_core::io::save_dataset;
    use multires_core::synth::{generate_synthetic, SynthConfig};

    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    std::fs::create_dir_all(&data).unwrap();
    let synth = generate_synthetic(&SynthConfig::default(), 0).unwrap();
    save_dataset(&data, &synth.dataset).unwrap();

    let run_dir = tmp.path().join("run");
    run_ok(&[
        "train",
        "--data-dir",
        data.to_str().unwrap(),
        "--out",
        run_dir.to_str().unwrap(),
        "--method",
        "multires-attention",
        "--lambda",
        "10",
    ]);
    let csv_path = tmp.path().join("attention.csv");
    run_ok(&[
        "export-attention",
        "--checkpoint",
        run_dir.to_str().unwrap(),
        "--data-dir",
        data.to_str().unwrap(),
        "--out",
        csv_path.to_str().unwrap(),
    ]);

    // Within truly positive coarse cells, compare average attention on truly
    // positive vs truly negative fine members.
    let mut positive = (0.0, 0usize);
    let mut negative = (0.0, 0usize);
    for line in read(&csv_path).lines().skip(1).filter(|l| !l.is_empty()) {
        let fields: Vec<&str> = line.split(',').collect();
        let coarse_id: usize = fields[0].parse().unwrap();
        let fine_id: usize = fields[1].parse().unwrap();
        let weight: f64 = fields[4].parse().unwrap();
        if synth.coarse_truth[&coarse_id] != Label::Positive {
            continue;
        }
        match synth.fine_truth[&fine_id] {
            Label::Positive => {
                positive.0 += weight;
                positive.1 += 1;
            }
            Label::Negative => {
                negative.0 += weight;
                negative.1 += 1;
            }
            Label::Unlabeled => unreachable!("generator assigns every pixel a class"),
        }
    }
    assert!(positive.1 > 0 && negative.1 > 0);
    let mean_pos = positive.0 / positive.1 as f64;
    let mean_neg = negative.0 / negative.1 as f64;
    println!("attention probe: mean_pos={mean_pos} mean_neg={mean_neg}");
    assert!(
        mean_pos > mean_neg,
        "attention does not favor positive members: {mean_pos} vs {mean_neg}"
    );
}

#[test]
fn config_file_with_unknown_key_is_a_usage_error() {
    let tmp = tempfile::tempdir().unwrap();
    let conf = tmp.path().join("bad.toml");
    std::fs::write(&conf, "no_such_setting = true\n").unwrap();
    let out = multires(&[
        "train",
        "--config",
        conf.to_str().unwrap(),
        "--data-dir",
        "x",
        "--out",
        "y",
        "--method",
        "onlyfine",
    ]);
    assert_eq!(exit_code(&out), 2);
}
