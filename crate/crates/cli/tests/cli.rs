use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_tvcsl"));
    c.env_remove("RUST_LOG");
    c
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().expect("spawn tvcsl")
}

fn heart_csv() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/stanford_heart.csv")
}

fn manifest(dir: &Path) -> serde_json::Value {
    let s = std::fs::read_to_string(dir.join("manifest.json")).expect("manifest.json");
    serde_json::from_str(&s).unwrap()
}

fn manifests_in(dir: &Path) -> usize {
    std::fs::read_dir(dir)
        .unwrap()
        .filter(|e| e.as_ref().unwrap().file_name().to_string_lossy().contains("manifest"))
        .count()
}

#[test]
fn simulate_writes_data_truth_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["simulate", "--n", "200", "--seed", "7", "--out", "d.csv"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));

    let data = std::fs::read_to_string(dir.path().join("d.csv")).unwrap();
    let mut lines = data.lines();
    assert_eq!(lines.next().unwrap(), "id,x1,x2,x3,adoption_time,observed_time,event");
    assert_eq!(lines.count(), 200);
    let truth = std::fs::read_to_string(dir.path().join("d.truth.csv")).unwrap();
    assert_eq!(truth.lines().next().unwrap(), "id,tau_true,eta0_true");
    assert_eq!(truth.lines().count(), 201);

    assert_eq!(manifests_in(dir.path()), 1);
    let m = manifest(dir.path());
    assert_eq!(m["seeds"], serde_json::json!([7]));
    assert_eq!(m["outputs"].as_array().unwrap().len(), 2);
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(dir.path(), &["frobnicate"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("Usage"));

    let out = run_in(dir.path(), &["simulate", "--n", "0", "--seed", "1", "--out", "d.csv"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn missing_input_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = run_in(
        dir.path(),
        &["fit", "--method", "s-lasso", "--data", "absent.csv", "--seed", "1", "--out", "r.json"],
    );
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.csv"));
}

#[test]
fn identical_invocations_give_identical_manifests() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let args = ["simulate", "--n", "150", "--seed", "11", "--rate-floor", "0.1", "--out", "s.csv"];
    assert!(run_in(a.path(), &args).status.success());
    // Environment must not leak into the run.
    let out = bin()
        .current_dir(b.path())
        .env("RUST_LOG", "trace")
        .args(args)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(out.stderr.is_empty());

    let mut ma = manifest(a.path());
    let mut mb = manifest(b.path());
    ma.as_object_mut().unwrap().remove("wall_time_seconds");
    mb.as_object_mut().unwrap().remove("wall_time_seconds");
    assert_eq!(ma, mb);
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    for t in ["1", "2"] {
        let out = run_in(
            dir.path(),
            &["--threads", t, "simulate", "--n", "400", "--seed", "5", "--out", &format!("t{t}/d.csv")],
        );
        assert!(out.status.success());
    }
    let a = std::fs::read(dir.path().join("t1/d.csv")).unwrap();
    let b = std::fs::read(dir.path().join("t2/d.csv")).unwrap();
    assert_eq!(a, b);
}

#[test]
fn fit_both_methods_on_simulated_data() {
    let dir = tempfile::tempdir().unwrap();
    assert!(run_in(dir.path(), &["simulate", "--n", "300", "--seed", "2", "--out", "data/d.csv"])
        .status
        .success());
    for method in ["s-lasso", "tv-csl"] {
        let out_file = format!("fit-{method}/r.json");
        let out = run_in(
            dir.path(),
            &["fit", "--method", method, "--data", "data/d.csv", "--seed", "4", "--out", &out_file],
        );
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
        let doc: serde_json::Value =
            serde_json::from_str(&std::fs::read_to_string(dir.path().join(&out_file)).unwrap()).unwrap();
        assert_eq!(doc["method"], method);
        assert_eq!(doc["hte"]["beta"].as_array().unwrap().len(), 3);
        assert_eq!(manifests_in(&dir.path().join(format!("fit-{method}"))), 1);
    }
}

#[test]
fn benchmark_writes_panels_summary_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("grid.toml"),
        "n = [120]\nreps = 4\nmethods = [\"s_lasso\"]\neta_bases = [\"linear\"]\nhte_bases = [\"linear\"]\ntest_size = 100\n",
    )
    .unwrap();
    // Flags override the file.
    let out = run_in(
        dir.path(),
        &["benchmark", "--grid", "grid.toml", "--out-dir", "bench", "--reps", "2", "--seed", "9"],
    );
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let bench = dir.path().join("bench");
    let panel = std::fs::read_to_string(bench.join("panel_eta-linear_hte-linear_prop-correct.csv")).unwrap();
    let mut lines = panel.lines();
    assert_eq!(
        lines.next().unwrap(),
        "n,method,eta_basis,hte_basis,propensity,emse_mean,emse_mc_se,reps_ok,reps_failed"
    );
    assert!(lines.next().unwrap().starts_with("120,s_lasso,linear,linear,none,"));
    let summary: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(bench.join("summary.json")).unwrap()).unwrap();
    assert_eq!(summary["grid"]["reps"], 2);
    assert_eq!(summary["grid"]["base_seed"], 9);
    assert_eq!(manifests_in(&bench), 1);
    assert_eq!(manifest(&bench)["seeds"], serde_json::json!([9, 10]));
}

#[test]
fn bad_grid_is_a_runtime_error() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("grid.toml"), "n = [100]\nreps = 2\nbogus = 1\n").unwrap();
    let out = run_in(dir.path(), &["benchmark", "--grid", "grid.toml", "--out-dir", "b"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn heart_summary_and_table3() {
    let dir = tempfile::tempdir().unwrap();
    let data = heart_csv();
    let data = data.to_str().unwrap();
    let out = run_in(dir.path(), &["analyze-heart", "--data", data, "--analysis", "summary", "--out", "s"]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let summary = std::fs::read_to_string(dir.path().join("s/summary.csv")).unwrap();
    assert_eq!(summary.lines().count(), 5);
    assert!(summary.lines().any(|l| l.starts_with("age,45.16")));

    let out = run_in(dir.path(), &["analyze-heart", "--data", data, "--analysis", "table3", "--out", "t"]);
    assert!(out.status.success());
    for f in ["table3_fixed.csv", "table3_time_varying.csv"] {
        let s = std::fs::read_to_string(dir.path().join("t").join(f)).unwrap();
        assert_eq!(s.lines().next().unwrap(), "term,coef,se,p");
        assert_eq!(s.lines().count(), 8);
    }
    assert_eq!(manifests_in(&dir.path().join("t")), 1);
}
