use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn grm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_grm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn manifest_outputs(path: &Path) -> Vec<String> {
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap();
    v["outputs"]
        .as_array()
        .unwrap()
        .iter()
        .map(|a| a["path"].as_str().unwrap().to_string())
        .collect()
}

#[test]
fn simulate_calibrate_score_evaluate() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let data = d.join("data");
    let o = grm(&["--seed", "3", "simulate", "--out-dir", p(&data), "--persons", "120", "--items", "5", "--categories", "3"]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["responses.csv", "truth_items.json", "truth_abilities.csv", "manifest.json"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let items = d.join("fit/items.json");
    let o = grm(&["calibrate", "--method", "mml", "--responses", p(&data.join("responses.csv")), "--out", p(&items)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let outputs = manifest_outputs(&d.join("fit/items.manifest.json"));
    for f in ["items.json", "items.abilities.csv", "items.diagnostics.json"] {
        assert!(outputs.iter().any(|o| o.ends_with(f)), "{f} missing from {outputs:?}");
        assert!(d.join("fit").join(f).exists());
    }

    let scores = d.join("scores.csv");
    let o = grm(&["score", "--method", "eap", "--items", p(&items), "--responses", p(&data.join("responses.csv")), "--out", p(&scores)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let text = fs::read_to_string(&scores).unwrap();
    assert!(text.starts_with("person_id,theta,sd,flag"));
    assert_eq!(text.lines().count(), 121);

    let eval = d.join("eval");
    let o = grm(&[
        "evaluate", "--responses", p(&data.join("responses.csv")), "--out-dir", p(&eval),
        "--calibration", "mml", "--scoring", "eap", "--scoring", "wle", "--folds", "2",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(eval.join("deviance.json")).unwrap()).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 2);
    assert!(eval.join("manifest.json").exists());

    let transfer = d.join("transfer");
    let o = grm(&[
        "evaluate", "--responses", p(&data.join("responses.csv")), "--out-dir", p(&transfer),
        "--items", p(&items), "--calibrated-by", "mml", "--scoring", "mml",
    ]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(transfer.join("transfer.json").exists());
}

#[test]
fn malformed_input_exits_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    fs::write(&bad, "person_id,a,b\np1,0,1\np2,1\n").unwrap();
    let o = grm(&["calibrate", "--method", "mml", "--responses", p(&bad), "--out", p(&dir.path().join("i.json"))]);
    assert_eq!(code(&o), 2);
    assert!(String::from_utf8_lossy(&o.stderr).contains(":3:"));

    let o = grm(&["calibrate", "--method", "nope", "--responses", p(&bad), "--out", "x.json"]);
    assert_eq!(code(&o), 2);

    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "folds = 1\n").unwrap();
    let o = grm(&["--config", p(&cfg), "evaluate", "--responses", p(&bad), "--out-dir", p(dir.path())]);
    assert_eq!(code(&o), 2);
}

#[test]
fn non_convergence_exits_with_3_and_keeps_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = grm(&["simulate", "--out-dir", p(d), "--persons", "200", "--items", "4", "--categories", "3"]);
    assert_eq!(code(&o), 0);
    let cfg = d.join("cfg.toml");
    fs::write(&cfg, "[evaluation.mml]\nmax_em_iterations = 1\n").unwrap();
    let items = d.join("out/items.json");
    let o = grm(&["--config", p(&cfg), "calibrate", "--method", "mml", "--responses", p(&d.join("responses.csv")), "--out", p(&items)]);
    assert_eq!(code(&o), 3, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(items.exists());
    assert!(d.join("out/items.manifest.json").exists());
}

#[test]
fn bayes_calibration_writes_draws_and_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = grm(&["simulate", "--out-dir", p(d), "--persons", "40", "--items", "3", "--categories", "3"]);
    assert_eq!(code(&o), 0);
    let cfg = d.join("cfg.toml");
    fs::write(&cfg, "seed = 2\n[evaluation.bayes]\nchains = 2\nwarmup = 100\nsamples_per_chain = 100\n").unwrap();
    let items = d.join("items.json");
    let draws = d.join("draws.csv");
    let o = grm(&[
        "--config", p(&cfg), "--threads", "1", "calibrate", "--method", "bayes",
        "--responses", p(&d.join("responses.csv")), "--out", p(&items),
        "--draws", p(&draws), "--draws-format", "csv",
    ]);
    assert!(matches!(code(&o), 0 | 3), "{}", String::from_utf8_lossy(&o.stderr));
    let header = fs::read_to_string(&draws).unwrap();
    assert!(header.lines().next().unwrap().starts_with("chain,iteration,lambda["));
    assert_eq!(header.lines().count(), 201);
    let diag: serde_json::Value = serde_json::from_str(&fs::read_to_string(d.join("items.diagnostics.json")).unwrap()).unwrap();
    assert!(diag["parameters"][0]["rhat"].is_number());
    assert_eq!(diag["sampler"].as_array().unwrap().len(), 2);
}

#[test]
fn minimal_study_runs() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let cfg = d.join("study.toml");
    fs::write(&cfg, "persons = 50\nitems = 5\nfolds = 2\ncategories = 3\ncalibrations = [\"mml\"]\n").unwrap();
    let out = d.join("out");
    let o = grm(&["--config", p(&cfg), "--seed", "1", "study", "--out-dir", p(&out)]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert!(v["inputs"][0]["path"].as_str().unwrap().ends_with("study.toml"));
    assert_eq!(v["seeds"]["truth"], 1);
    for f in manifest_outputs(&out.join("manifest.json")) {
        assert!(Path::new(&f).exists(), "{f}");
    }
}
