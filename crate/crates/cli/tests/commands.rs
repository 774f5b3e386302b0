//! Every subcommand of the binary, run end to end on small problems.

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("alis-cmd-{name}-{}", std::process::id()));
    let _ = std::fs::remove_dir_all(&dir);
    std::fs::create_dir_all(&dir).unwrap();
    dir
}

fn alis(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alis"))
        .arg("--cache-dir")
        .arg(dir.join("cache"))
        .args(args)
        .current_dir(dir)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    assert!(o.status.success(), "stderr: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn config(dir: &Path, name: &str, json: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, json).unwrap();
    path.to_string_lossy().into_owned()
}

#[test]
fn run_writes_a_checkable_sweep_table() {
    let dir = scratch("run");
    let cfg = config(
        &dir,
        "run.json",
        r#"{"problem": {"kind": "linear", "d_x": 8, "d_y": 6, "seed": 2},
            "methods": [{"kind": "pca"}, {"kind": "lis", "alpha": 1.0}],
            "sampling": {"source": {"kind": "exact", "n_per_alpha": 40}, "alphas": [1.0]},
            "sweep": {"variable": "rank", "values": [2, 4]},
            "metric": "w2", "replicates": 2}"#,
    );
    let out = dir.join("sweep.csv");
    stdout(&alis(&dir, &["--out", out.to_str().unwrap(), "run", &cfg]));
    let table = alis_cli::parse_sweep_csv(&std::fs::read_to_string(&out).unwrap()).unwrap();
    assert_eq!(table.x, [2.0, 4.0]);
    assert_eq!(table.methods, ["pca", "lis_1"]);
    let summary = stdout(&alis(&dir, &["check-csv", out.to_str().unwrap()]));
    assert!(summary.starts_with("2 rows over dim"), "{summary}");
}

#[test]
fn compare_optimizers_writes_csv() {
    let dir = scratch("compare");
    let cfg = config(
        &dir,
        "cmp.json",
        r#"{"problem": {"kind": "linear", "d_x": 10, "d_y": 8, "seed": 3},
            "method": {"kind": "lis", "alpha": 0.5},
            "gradient": "exact",
            "sampling": {"source": {"kind": "exact", "n_per_alpha": 50}, "alphas": [0.5]},
            "s_values": [1, 2, 4]}"#,
    );
    let out = dir.join("cmp.csv");
    stdout(&alis(&dir, &["--out", out.to_str().unwrap(), "compare-optimizers", &cfg]));
    let text = std::fs::read_to_string(out).unwrap();
    assert!(text.starts_with("s,j_full,j_incremental,j_nepv,"));
    assert_eq!(text.lines().count(), 4);
}

#[test]
fn ces_saves_a_result_directory() {
    let dir = scratch("ces");
    let cfg = config(
        &dir,
        "ces.json",
        r#"{"problem": {"kind": "linexp", "d_x": 6, "d_y": 6, "seed": 1},
            "ces": {"ensemble_size": 40, "alpha_stops": [0.5, 1.0], "r": 3, "s": 3,
                    "mcmc": {"n_samples": 2000}, "thin": 5}}"#,
    );
    let out = dir.join("result");
    stdout(&alis(&dir, &["--seed", "4", "--out", out.to_str().unwrap(), "ces", &cfg]));
    let summary = std::fs::read_to_string(out.join("summary.csv")).unwrap();
    assert!(summary.starts_with("r,s,param_error,"));
    assert!(summary.lines().nth(1).unwrap().starts_with("3,3,"));
    for f in ["chain.csv", "full_samples.csv", "u_r.bin", "v_s.bin"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
}

#[test]
fn cache_build_list_clear() {
    let dir = scratch("cache");
    let cfg = config(
        &dir,
        "ref.json",
        r#"{"problem": {"kind": "linexp", "d_x": 3, "d_y": 3, "seed": 6},
            "methods": [{"kind": "lis", "alpha": 1.0}],
            "sampling": {"source": {"kind": "eki", "ensemble_size": 20}, "alphas": [1.0]},
            "sweep": {"variable": "rank", "values": [1]},
            "metric": "hellinger",
            "reference": {"n_samples": 1000, "thin": 10, "pilot_ensemble": 20}}"#,
    );
    let built = stdout(&alis(&dir, &["cache", "build", &cfg]));
    assert!(built.contains("100 samples"), "{built}");
    let listed = stdout(&alis(&dir, &["cache", "list"]));
    assert_eq!(listed.lines().count(), 1);
    assert_eq!(built.split_whitespace().next(), listed.split_whitespace().next());
    assert!(stdout(&alis(&dir, &["cache", "clear"])).starts_with("removed 3 files"));
    assert!(stdout(&alis(&dir, &["cache", "list"])).is_empty());
}

#[test]
fn malformed_config_fails_cleanly() {
    let dir = scratch("bad");
    let cfg = config(&dir, "bad.json", r#"{"problem": {"kind": "nonsense"}}"#);
    let o = alis(&dir, &["run", &cfg]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("bad.json"));
}

#[test]
fn shipped_configs_are_valid() {
    use alis_cli::config::load;
    use alis_cli::{CesRunConfig, CompareConfig, ExperimentConfig};
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        let name = path.file_name().unwrap().to_string_lossy().into_owned();
        if name.starts_with("ces_") {
            load::<CesRunConfig>(&path).unwrap();
        } else if name.starts_with("compare_") {
            load::<CompareConfig>(&path).unwrap().validate().unwrap();
        } else {
            load::<ExperimentConfig>(&path)
                .unwrap()
                .validate()
                .unwrap_or_else(|e| panic!("{name}: {e:#}"));
        }
        n += 1;
    }
    assert!(n >= 9);
}
