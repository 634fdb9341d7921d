use serde_json::Value;
use std::path::Path;
use std::process::Command;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_carleman-lab"));
    c.env_remove("CARLEMAN_LAB_CONFIG");
    c
}

fn run(args: &[&str], out: &Path) -> i32 {
    bin()
        .args(args)
        .arg("--output-dir")
        .arg(out)
        .output()
        .expect("binary runs")
        .status
        .code()
        .expect("exit code")
}

fn json(path: &Path) -> Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn check_psi_defaults_pass_with_four_entries() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["check-psi"], dir.path()), 0);
    let r = json(&dir.path().join("check-psi.json"));
    assert_eq!(r["suite"], "check-psi");
    let checks = r["checks"].as_array().unwrap();
    assert_eq!(checks.len(), 4);
    for c in checks {
        for key in ["name", "min_margin", "argmin", "pass"] {
            assert!(c.get(key).is_some(), "{key} missing in {c}");
        }
    }
    assert!(r.get("versions").is_some() && r.get("seed").is_some() && r.get("params").is_some());
    let csv = std::fs::read_to_string(dir.path().join("check-psi.psi_gradient_bound.kappa_2.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), "x1,x2,t,margin");
    assert_eq!(csv.lines().count(), 10_001);
}

#[test]
fn serial_reports_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    assert_eq!(run(&["--serial", "--seed", "9", "check-cutoffs"], a.path()), 0);
    assert_eq!(run(&["--serial", "--seed", "9", "check-cutoffs"], b.path()), 0);
    let ra = std::fs::read(a.path().join("check-cutoffs.json")).unwrap();
    let rb = std::fs::read(b.path().join("check-cutoffs.json")).unwrap();
    assert_eq!(ra, rb);
    let c = tempfile::tempdir().unwrap();
    assert_eq!(run(&["--seed", "9", "check-cutoffs"], c.path()), 0);
    assert_eq!(ra, std::fs::read(c.path().join("check-cutoffs.json")).unwrap());
}

#[test]
fn configuration_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cases = [
        ("[field]\nlambda = 2.0\nLambda = 1.0\n", "check-psi"),
        ("[field]\nfamily = \"nonexistent\"\n", "check-psi"),
        ("not valid = = toml\n", "check-psi"),
        ("[lemma34.field]\nfamily = \"identity\"\nE = 1.0\n", "check-lemma34"),
        ("[carleman.field14]\nfamily = \"identity\"\nE = 1.0\n", "check-carleman"),
    ];
    for (text, cmd) in cases {
        let cfg = dir.path().join("bad.toml");
        std::fs::write(&cfg, text).unwrap();
        let code = run(&["--config", cfg.to_str().unwrap(), cmd], dir.path());
        assert_eq!(code, 2, "{text}");
    }
    assert_eq!(run(&["no-such-command"], dir.path()), 2);
}

#[test]
fn check_failure_exits_1() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("tight.toml");
    std::fs::write(&cfg, "[calibrate]\nd_grid = [1.0]\n").unwrap();
    assert_eq!(run(&["--config", cfg.to_str().unwrap(), "calibrate-d"], dir.path()), 1);
    let r = json(&dir.path().join("calibrate-d.json"));
    assert_eq!(r["pass"], false);
}

#[test]
fn config_path_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("env.toml");
    std::fs::write(&cfg, "seed = 77\n[psi]\nkappas = [3.0]\nsamples = 100\n").unwrap();
    let status = bin()
        .env("CARLEMAN_LAB_CONFIG", &cfg)
        .args(["check-psi", "--output-dir"])
        .arg(dir.path())
        .status()
        .unwrap();
    assert_eq!(status.code(), Some(0));
    let r = json(&dir.path().join("check-psi.json"));
    assert_eq!(r["seed"], 77);
    assert_eq!(r["params"]["kappas"], serde_json::json!([3.0]));
}

#[test]
fn cone_flags_override_config() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(run(&["check-cone", "--l", "3", "--samples", "50", "--r-min", "0.2"], dir.path()), 0);
    let r = json(&dir.path().join("check-cone.json"));
    assert_eq!(r["params"]["ls"], serde_json::json!([3.0]));
    assert_eq!(r["params"]["r_min"], 0.2);
}

#[test]
fn report_all_has_one_entry_per_suite() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("quick.toml");
    std::fs::write(
        &cfg,
        "[psi]\nsamples = 500\n[lemma33]\nsamples = 500\n[lemma34]\nsamples = 300\n\
         [carleman]\nseeds = [1]\ngammas = [1.0]\nnodes = 12\nmax_drift = 0.2\n",
    )
    .unwrap();
    assert_eq!(run(&["--config", cfg.to_str().unwrap(), "report-all"], dir.path()), 0);
    let r = json(&dir.path().join("report-all.json"));
    let names: Vec<&str> = r["suites"].as_array().unwrap().iter().map(|s| s["suite"].as_str().unwrap()).collect();
    assert_eq!(
        names,
        [
            "check-psi",
            "check-mollify",
            "check-cone",
            "check-lemma33",
            "check-lemma34",
            "check-identity",
            "check-carleman",
            "check-cutoffs",
            "calibrate-d"
        ]
    );
    assert_eq!(r["pass"], true);
}
