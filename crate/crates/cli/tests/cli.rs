use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_lvglass"));
    c.env_remove("LVGLASS_OUT_DIR");
    c
}

fn run_in(dir: &Path, args: &[&str]) -> Output {
    bin().current_dir(dir).args(args).output().unwrap()
}

fn schema_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../schemas")
}

fn read_json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn assert_valid(command: &str, doc: &serde_json::Value) {
    let schema = read_json(&schema_dir().join(format!("{command}.schema.json")));
    let validator = jsonschema::validator_for(&schema).unwrap();
    let errors: Vec<String> = validator.iter_errors(doc).map(|e| format!("{} at {}", e, e.instance_path)).collect();
    assert!(errors.is_empty(), "{command}: {errors:?}");
}

fn code(o: &Output) -> i32 {
    o.status.code().unwrap()
}

#[test]
fn version_is_the_schema_version() {
    let o = bin().arg("--version").output().unwrap();
    assert_eq!(code(&o), 0);
    assert_eq!(String::from_utf8_lossy(&o.stdout).trim(), "lvglass 1.0.0");
}

#[test]
fn frontier_grid_ends_near_the_alpha_zero_anchor() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["frontier", "--kappa-grid", "0.05:0.7:0.05"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = std::fs::read_to_string(dir.path().join("frontier.csv")).unwrap();
    let rows: Vec<Vec<f64>> = text
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(|v| v.parse().unwrap()).collect())
        .collect();
    assert!((13..=14).contains(&rows.len()));
    let last = rows.last().unwrap();
    assert!((last[0] - 0.7).abs() < 1e-9 && last[1].abs() < 0.05, "{last:?}");
    assert!(rows.iter().all(|r| (r[3] - 1.0).abs() < 1e-9));
    assert!(rows.windows(2).all(|w| w[1][1] < w[0][1]));
}

#[test]
fn frontier_json_hits_the_anchor_and_validates() {
    let dir = tempfile::tempdir().unwrap();
    let k = std::f64::consts::FRAC_1_SQRT_2.to_string();
    let grid = format!("{k}:{k}:0.1");
    let o = run_in(dir.path(), &["frontier", "--kappa-grid", &grid, "--format", "json"]);
    assert_eq!(code(&o), 0);
    let doc = read_json(&dir.path().join("frontier.json"));
    assert_valid("frontier", &doc);
    assert!(doc["result"]["points"][0]["alpha"].as_f64().unwrap().abs() < 1e-8);
}

#[test]
fn temperature_above_phi_is_a_validation_error() {
    let dir = tempfile::tempdir().unwrap();
    for cmd in ["gibbs-sample", "free-energy"] {
        let o = run_in(dir.path(), &[cmd, "--temperature", "0.5", "--phi", "0.3"]);
        assert_eq!(code(&o), 2);
        assert!(String::from_utf8_lossy(&o.stderr).contains("T < phi"));
    }
    assert_eq!(std::fs::read_dir(dir.path()).unwrap().count(), 0);
}

#[test]
fn unknown_flags_exit_with_usage() {
    let o = bin().args(["sde", "--no-such-flag", "1"]).output().unwrap();
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));
    assert_eq!(code(&bin().args(["no-such-command"]).output().unwrap()), 2);
}

/// `log ∫₀ᵃ exp(βαhx + γx²) x^{φβ−1} e^{−βx²/2 + βx} dx − γD − βαh²/2` by composite Simpson.
fn decoupled_oracle(beta: f64, alpha: f64, phi: f64, a: f64, h: f64, gamma: f64, d: f64) -> f64 {
    let m = 400_000;
    let step = a / m as f64;
    let f = |x: f64| {
        if x == 0.0 {
            0.0
        } else {
            ((phi * beta - 1.0) * x.ln() - beta * x * x / 2.0 + beta * x + beta * alpha * h * x + gamma * x * x).exp()
        }
    };
    let inner: f64 = (1..m).map(|i| f(i as f64 * step) * if i % 2 == 1 { 4.0 } else { 2.0 }).sum();
    let integral = (f(0.0) + inner + f(a)) * step / 3.0;
    integral.ln() - gamma * d - 0.5 * beta * alpha * h * h
}

#[test]
fn parisi_eval_without_coupling_is_the_decoupled_integral() {
    let dir = tempfile::tempdir().unwrap();
    let args = r#"{"beta": 2.0, "kappa": 0.0, "alpha": 0.5, "phi": 1.0, "a": 4.0, "h": 0.3,
                   "gamma": -0.3, "lambdas": [0.2, 0.7], "atoms": [0.0, 0.5, 1.2]}"#;
    std::fs::write(dir.path().join("args.json"), args).unwrap();
    let o = run_in(dir.path(), &["parisi-eval", "--args", "args.json"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc = read_json(&dir.path().join("parisi_eval.json"));
    assert_valid("parisi-eval", &doc);
    let got = doc["result"]["objective"].as_f64().unwrap();
    let want = decoupled_oracle(2.0, 0.5, 1.0, 4.0, 0.3, -0.3, 1.2);
    assert!((got - want).abs() < 1e-9, "{got} vs {want}");
}

#[test]
fn parisi_eval_rejects_bad_files() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.json"), r#"{"beta": 2.0, "kappa": 0.3}"#).unwrap();
    assert_eq!(code(&run_in(dir.path(), &["parisi-eval", "--args", "bad.json"])), 2);
    let unsorted = r#"{"beta": 2.0, "kappa": 0.3, "alpha": 0.0, "phi": 1.0, "a": 4.0,
                       "lambdas": [0.7, 0.2], "atoms": [0.0, 0.5, 1.2]}"#;
    std::fs::write(dir.path().join("unsorted.json"), unsorted).unwrap();
    assert_eq!(code(&run_in(dir.path(), &["parisi-eval", "--args", "unsorted.json"])), 2);
    assert_eq!(code(&run_in(dir.path(), &["parisi-eval", "--args", "missing.json"])), 2);
}

#[test]
fn identical_seeds_give_identical_bytes_for_any_job_count() {
    let dir = tempfile::tempdir().unwrap();
    let base = ["lambda-sim", "--n", "40", "--draws", "6", "--seed", "17"];
    let a = run_in(dir.path(), &[&base[..], &["-o", "a.csv", "--jobs", "1"]].concat());
    let b = run_in(dir.path(), &[&base[..], &["-o", "b.csv", "--jobs", "3"]].concat());
    let c = run_in(dir.path(), &["lambda-sim", "--n", "40", "--draws", "6", "--seed", "18", "-o", "c.csv"]);
    assert!([&a, &b, &c].iter().all(|o| code(o) == 0));
    let read = |n: &str| std::fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_ne!(read("a.csv"), read("c.csv"));
    let text = String::from_utf8(read("a.csv")).unwrap();
    assert!(text.starts_with("# schema: lvglass/lambda-sim 1.0.0\n# seed: 17\n"));

    let gibbs = ["gibbs-sample", "--n", "2", "--kappa", "0.3", "--samples", "2000", "--burn-in", "500", "--chains", "3"];
    assert_eq!(code(&run_in(dir.path(), &[&gibbs[..], &["-o", "g1.json", "--jobs", "1"]].concat())), 0);
    assert_eq!(code(&run_in(dir.path(), &[&gibbs[..], &["-o", "g2.json", "--jobs", "2"]].concat())), 0);
    assert_eq!(read("g1.json"), read("g2.json"));
}

#[test]
fn config_values_yield_to_flags() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(
        dir.path().join("run.cfg"),
        "# lambda run\nn = 30\nkappa = 0.4\ndraws = 2\nseed = 5\nformat = json\n",
    )
    .unwrap();
    let o = run_in(dir.path(), &["lambda-sim", "--config", "run.cfg", "--kappa", "0.6"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let doc = read_json(&dir.path().join("lambda_sim.json"));
    assert_valid("lambda-sim", &doc);
    assert_eq!(doc["params"]["n"], 30);
    assert_eq!(doc["params"]["kappa"].as_f64(), Some(0.6));
    assert_eq!(doc["seed"], 5);
    std::fs::write(dir.path().join("bad.cfg"), "no_such_key = 1\n").unwrap();
    assert_eq!(code(&run_in(dir.path(), &["lambda-sim", "--config", "bad.cfg"])), 2);
}

#[test]
fn output_directory_comes_from_the_environment() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("results");
    let o = bin()
        .current_dir(dir.path())
        .env("LVGLASS_OUT_DIR", &out)
        .args(["frontier", "--kappa-grid", "0.3:0.4:0.1"])
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let names: Vec<String> = std::fs::read_dir(&out)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert_eq!(names, vec!["frontier.csv".to_string()]);
}

#[test]
fn json_outputs_validate_against_the_shipped_schemas() {
    let dir = tempfile::tempdir().unwrap();
    let runs: [(&str, &[&str]); 5] = [
        ("sde", &["--n", "2", "--kappa", "0.3", "--t-end", "20", "--dt", "0.01"]),
        ("gibbs-sample", &["--n", "1", "--kappa", "0.3", "--samples", "2000", "--chains", "2", "--write-samples"]),
        ("free-energy", &["--n", "2", "--kappa", "0.3", "--method", "quadrature", "--replicas", "2"]),
        ("rpc-verify", &["--branching", "100", "--replicas", "4", "--leaf", "linear", "--value", "0.1"]),
        ("lambda-sim", &["--n", "10", "--draws", "2", "--format", "json"]),
    ];
    for (cmd, extra) in runs {
        let o = run_in(dir.path(), &[&[cmd][..], extra].concat());
        assert_eq!(code(&o), 0, "{cmd}: {}", String::from_utf8_lossy(&o.stderr));
        assert_valid(cmd, &read_json(&dir.path().join(format!("{}.json", cmd.replace('-', "_")))));
    }
    let trace = std::fs::read_to_string(dir.path().join("sde.csv")).unwrap();
    assert!(trace.lines().any(|l| l == "t,x_1,x_2"));
    let samples = std::fs::read_to_string(dir.path().join("gibbs_sample.csv")).unwrap();
    assert_eq!(samples.lines().filter(|l| !l.starts_with('#')).count(), 1 + 2 * 2000);
    // nothing but the artifacts: temporary files are renamed away
    assert!(std::fs::read_dir(dir.path()).unwrap().all(|e| {
        let name = e.unwrap().file_name().to_string_lossy().into_owned();
        name.ends_with(".json") || name.ends_with(".csv")
    }));
}

#[test]
fn empty_observable_list_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(code(&run_in(dir.path(), &["sde", "--observables", ""])), 2);
    assert_eq!(code(&run_in(dir.path(), &["sde", "--observables", "variance"])), 2);
}

#[test]
fn saddle_search_out_of_budget_reports_non_convergence() {
    let dir = tempfile::tempdir().unwrap();
    let o = run_in(dir.path(), &["parisi-opt", "--kappa", "0.3", "--max-evals", "3", "--inner-sweeps", "1", "--tol", "1e-12"]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    let doc = read_json(&dir.path().join("parisi_opt.json"));
    assert_valid("parisi-opt", &doc);
    assert_eq!(doc["result"]["converged"], false);
    assert!(doc["result"]["value"].is_null());
    let o = run_in(dir.path(), &["parisi-opt", "--kappa", "0.8", "--alpha", "0.5"]);
    assert_eq!(code(&o), 2);
}
