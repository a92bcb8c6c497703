//! End-to-end tests of the `gdf` binary: artifact layout, exit codes, and
//! run-to-run determinism.

use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::tempdir;

fn gdf(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_gdf"))
        .current_dir(dir)
        .args(args)
        .output()
        .expect("binary runs")
}

fn assert_exit(out: &Output, code: i32) {
    assert_eq!(
        out.status.code(),
        Some(code),
        "stdout: {}\nstderr: {}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

fn json_file(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).expect("file exists")).expect("valid json")
}

#[test]
fn simulate_is_reproducible_and_writes_artifacts() {
    let dir = tempdir().unwrap();
    for out in ["a", "b"] {
        let r = gdf(
            dir.path(),
            &[
                "simulate", "--model", "gram-product", "--n", "40", "--seed", "5", "--out", out,
            ],
        );
        assert_exit(&r, 0);
    }
    let a = fs::read(dir.path().join("a/array.gda")).unwrap();
    let b = fs::read(dir.path().join("b/array.gda")).unwrap();
    assert!(!a.is_empty());
    assert_eq!(a, b);
    assert!(dir.path().join("a/model.json").is_file());
    // A different seed changes the sample.
    let r = gdf(
        dir.path(),
        &[
            "simulate", "--model", "gram-product", "--n", "40", "--seed", "6", "--out", "c",
        ],
    );
    assert_exit(&r, 0);
    assert_ne!(a, fs::read(dir.path().join("c/array.gda")).unwrap());
}

#[test]
fn usage_errors_exit_two() {
    let dir = tempdir().unwrap();
    let r = gdf(
        dir.path(),
        &["simulate", "--model", "gram-product", "--n", "0", "--out", "o"],
    );
    assert_exit(&r, 2);
    let r = gdf(
        dir.path(),
        &["simulate", "--model", "no-such-model", "--n", "5", "--out", "o"],
    );
    assert_exit(&r, 2);
    let stderr = String::from_utf8_lossy(&r.stderr).into_owned();
    assert!(stderr.contains("no-such-model"), "stderr: {stderr}");
    let r = gdf(dir.path(), &["verify", "--only", "nope", "--out", "o"]);
    assert_exit(&r, 2);
    let r = gdf(dir.path(), &["recover", "--out", "o"]);
    assert_exit(&r, 2); // missing artifact
}

#[test]
fn corrupt_array_is_a_format_error() {
    let dir = tempdir().unwrap();
    fs::create_dir(dir.path().join("o")).unwrap();
    fs::write(dir.path().join("o/array.gda"), "BADMAGIC 3\n").unwrap();
    let r = gdf(dir.path(), &["recover", "--out", "o"]);
    assert_exit(&r, 3);
}

#[test]
fn non_psd_sample_exits_four() {
    let dir = tempdir().unwrap();
    // A pure random-sign kernel is weakly exchangeable but not PSD.
    let model = r#"{"f":{"Sum":[[1.0,"WSign"]]},"g":{"Constant":1.0},"bounded":false}"#;
    let r = gdf(
        dir.path(),
        &["simulate", "--model", model, "--n", "12", "--seed", "3", "--out", "o"],
    );
    assert_exit(&r, 4);
}

#[test]
fn full_rank_kernel_below_working_size_exits_five() {
    let dir = tempdir().unwrap();
    // The min kernel has infinite rank; each feature keeps an O(1/n)
    // private component, so small n pushes the clipped spectral mass
    // over the model-mismatch gate.
    let r = gdf(
        dir.path(),
        &[
            "simulate", "--model", "gram-min-excess", "--n", "100", "--seed", "11", "--out", "o",
        ],
    );
    assert_exit(&r, 0);
    let r = gdf(dir.path(), &["recover", "--out", "o"]);
    assert_exit(&r, 5);
}

#[test]
fn decompose_product_kernel_is_rank_one() {
    let dir = tempdir().unwrap();
    let r = gdf(
        dir.path(),
        &["decompose", "--model", "gram-product", "--out", "o"],
    );
    assert_exit(&r, 0);
    let spectrum = json_file(&dir.path().join("o/spectrum.json"));
    let lambda = spectrum["lambda"].as_array().unwrap();
    assert_eq!(lambda.len(), 1);
    // E[x^2] for the midpoint raster of f(x,y) = xy at level 8.
    assert!((lambda[0].as_f64().unwrap() - 1.0 / 3.0).abs() < 1e-3);
    let ball = json_file(&dir.path().join("o/unit_ball.json"));
    assert_eq!(ball["pass"], serde_json::Value::Bool(true));
    assert!(dir.path().join("o/spectrum.phi").is_file());
    assert!(dir.path().join("o/kernel.gdk").is_file());
}

#[test]
fn decompose_reads_a_kernel_file() {
    let dir = tempdir().unwrap();
    let r = gdf(
        dir.path(),
        &["decompose", "--model", "gram-min", "--m", "6", "--out", "o"],
    );
    assert_exit(&r, 0);
    // Re-decompose from the written kernel: identical spectrum bytes.
    let r = gdf(
        dir.path(),
        &["decompose", "--kernel", "o/kernel.gdk", "--out", "o2"],
    );
    assert_exit(&r, 0);
    assert_eq!(
        fs::read(dir.path().join("o/spectrum.json")).unwrap(),
        fs::read(dir.path().join("o2/spectrum.json")).unwrap()
    );
}

#[test]
fn recover_diagonal_only_array_finds_pure_excess() {
    let dir = tempdir().unwrap();
    let model = r#"{"f":{"Lift":{"Constant":0.0}},"g":{"Constant":0.7},"bounded":true}"#;
    let r = gdf(
        dir.path(),
        &["simulate", "--model", model, "--n", "50", "--seed", "2", "--out", "o"],
    );
    assert_exit(&r, 0);
    let r = gdf(dir.path(), &["recover", "--out", "o"]);
    assert_exit(&r, 0);
    let summary = json_file(&dir.path().join("o/excess_summary.json"));
    assert!((summary["median"].as_f64().unwrap() - 0.7).abs() < 1e-6);
    assert_eq!(summary["below_tolerance"].as_u64(), Some(0));
}

#[test]
fn deficient_diagonal_is_caught_at_the_psd_gate() {
    let dir = tempdir().unwrap();
    // g(x) = 0.5 x^2 < ||h(x)||^2 = x^2: a diagonal too small to carry the
    // features makes the whole array indefinite, so the failure surfaces
    // as a PSD rejection, not as negative recovered excesses.
    let model = r#"{"f":{"Lift":"ProductXY"},"g":{"Poly":[0.0,0.0,0.5]},"bounded":true}"#;
    let r = gdf(
        dir.path(),
        &["simulate", "--model", model, "--n", "120", "--seed", "4", "--out", "o"],
    );
    assert_exit(&r, 4);
}

#[test]
fn staged_flow_verifies_and_tightened_budget_fails() {
    let dir = tempdir().unwrap();
    for args in [
        vec!["simulate", "--model", "gram-product-excess", "--n", "200", "--seed", "9", "--out", "o"],
        vec!["decompose", "--out", "o"],
        vec!["recover", "--out", "o"],
    ] {
        assert_exit(&gdf(dir.path(), &args), 0);
    }
    let r = gdf(dir.path(), &["verify", "--seed", "9", "--out", "o"]);
    assert_exit(&r, 0);
    let report = json_file(&dir.path().join("o/report.json"));
    assert_eq!(report["pass"], serde_json::Value::Bool(true));
    let names: Vec<&str> = report["stages"]
        .as_array()
        .unwrap()
        .iter()
        .map(|s| s["name"].as_str().unwrap())
        .collect();
    assert_eq!(
        names,
        [
            "truncation",
            "tower",
            "alignment",
            "positivity",
            "dependence",
            "exchangeability",
            "ustat",
            "unit-ball"
        ]
    );

    // An unattainable transport budget turns the alignment check into a
    // reported failure, not a hard error.
    let cfg = r#"{"tolerances": {"psd": 1e-9, "rank": 1e-12, "negative": 1e-8,
        "consistency": 1e-9, "unit_ball": 1e-6, "w2": 1e-15, "ustat": 1e-3}}"#;
    fs::write(dir.path().join("tight.json"), cfg).unwrap();
    let r = gdf(
        dir.path(),
        &[
            "verify", "--config", "tight.json", "--seed", "9", "--out", "o", "--only", "alignment",
        ],
    );
    assert_exit(&r, 1);
    let stdout = String::from_utf8_lossy(&r.stdout).into_owned();
    assert!(stdout.contains("alignment: FAIL"), "stdout: {stdout}");
}

#[test]
fn align_recovers_identity_on_matching_clouds() {
    let dir = tempdir().unwrap();
    for args in [
        vec!["simulate", "--model", "gram-product", "--n", "80", "--seed", "1", "--out", "o"],
        vec!["recover", "--out", "o"],
    ] {
        assert_exit(&gdf(dir.path(), &args), 0);
    }
    let r = gdf(
        dir.path(),
        &[
            "align",
            "--cloud-a",
            "o/recovered.jsonl",
            "--cloud-b",
            "o/recovered.jsonl",
            "--paired",
            "--out",
            "o",
        ],
    );
    assert_exit(&r, 0);
    let alignment = json_file(&dir.path().join("o/alignment.json"));
    assert!(alignment["residual"].as_f64().unwrap() < 1e-12);
}

#[test]
fn pipeline_runs_are_byte_identical() {
    let dir = tempdir().unwrap();
    for out in ["p1", "p2"] {
        let r = gdf(
            dir.path(),
            &[
                "pipeline", "--model", "mix-product-min", "--n", "150", "--seed", "21", "--out",
                out, "--quiet",
            ],
        );
        assert_exit(&r, 0);
    }
    let mut names: Vec<String> = fs::read_dir(dir.path().join("p1"))
        .unwrap()
        .map(|e| e.unwrap().file_name().into_string().unwrap())
        .collect();
    names.sort();
    assert!(names.contains(&"report.json".to_string()));
    for name in names {
        if name == "timings.json" {
            continue; // wall-clock sidecar, excluded from the contract
        }
        let a = fs::read(dir.path().join("p1").join(&name)).unwrap();
        let b = fs::read(dir.path().join("p2").join(&name)).unwrap();
        assert_eq!(a, b, "artifact {name} differs between identical runs");
    }
}
