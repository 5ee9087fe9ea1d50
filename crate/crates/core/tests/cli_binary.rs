use std::path::Path;
use std::process::Command;

fn dgsi(args: &[&str]) -> std::process::Output {
    Command::new(env!("CARGO_BIN_EXE_dgsi")).args(args).output().unwrap()
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let p = dir.join(name);
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

fn expression_config(output: &str) -> String {
    format!(
        r#"{{
        "schema_version": 1,
        "model": {{"kind": "expression", "inputs": 3, "outputs": ["{output}"]}},
        "blocks": {{
            "independent": [{{"index": 3, "margin": {{"family": "uniform", "a": 0, "b": 1}}}}],
            "dependent": [{{"indices": [1, 2], "model": {{"type": "gaussian_copula",
                "correlation": [[1, 0.4], [0.4, 1]],
                "margins": [{{"family": "uniform", "a": 0, "b": 1}}, {{"family": "uniform", "a": 0, "b": 1}}]}}}}]
        }},
        "subsets": "all",
        "sampling": {{"m": 2000, "generator": "sobol", "seed": 4}}
    }}"#
    )
}

#[test]
fn successful_run_writes_all_files() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &expression_config("x1 + 2*x2*x3"));
    let out = dir.path().join("out");
    let o = dgsi(&["--config", &cfg, "--out", out.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["indices.csv", "indices.json", "audit.json"] {
        assert!(out.join(f).exists(), "{f} missing");
    }
    let csv = std::fs::read_to_string(out.join("indices.csv")).unwrap();
    // 7 subsets, scalar output: first and total rows each.
    assert_eq!(csv.lines().count(), 1 + 7 * 2);
    let audit: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("audit.json")).unwrap()).unwrap();
    assert_eq!(audit["r_min"], 2);
    assert_eq!(audit["routes"].as_array().unwrap().len(), 7);
    assert!(audit["wall_time_seconds"].as_f64().unwrap() >= 0.0);
}

#[test]
fn csv_is_identical_across_thread_counts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &expression_config("exp(x1) * x2 + x3^2"));
    let mut csvs = Vec::new();
    for t in ["1", "3"] {
        let out = dir.path().join(format!("t{t}"));
        let o = dgsi(&["--config", &cfg, "--out", out.to_str().unwrap(), "--threads", t, "--format", "csv"]);
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(!out.join("indices.json").exists());
        csvs.push(std::fs::read(out.join("indices.csv")).unwrap());
    }
    assert_eq!(csvs[0], csvs[1]);
}

#[test]
fn seed_flag_overrides_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &expression_config("x1 + x2 + x3"));
    let run = |seed: &str, sub: &str| {
        let out = dir.path().join(sub);
        let o = dgsi(&["--config", &cfg, "--out", out.to_str().unwrap(), "--seed", seed]);
        assert_eq!(o.status.code(), Some(0));
        std::fs::read(out.join("indices.csv")).unwrap()
    };
    assert_ne!(run("1", "a"), run("2", "b"));
    assert_eq!(run("1", "c"), run("1", "d"));
}

#[test]
fn invalid_config_exits_2_with_all_errors() {
    let dir = tempfile::tempdir().unwrap();
    let body = expression_config("x1 + x4").replace("\"m\": 2000", "\"m\": 50");
    let cfg = write(dir.path(), "c.json", &body);
    let o = dgsi(&["--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("below the minimum"), "{err}");
    assert!(err.contains("x4"), "{err}");

    let bad = write(dir.path(), "bad.json", "{ not json");
    assert_eq!(dgsi(&["--config", &bad]).status.code(), Some(2));
    assert_eq!(dgsi(&["--config", dir.path().join("missing.json").to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn parse_error_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &expression_config("x1 + "));
    let o = dgsi(&["--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("column"));
}

#[test]
fn constant_model_exits_3() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &expression_config("1 + 0*x1"));
    let o = dgsi(&["--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn failing_model_exits_4() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "c.json", &expression_config("log(x1 - 0.5)"));
    let o = dgsi(&["--config", &cfg, "--out", dir.path().join("o").to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(4), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn bundled_configs_validate() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs");
    for entry in std::fs::read_dir(dir).unwrap() {
        let p = entry.unwrap().path();
        let text = std::fs::read_to_string(&p).unwrap();
        if let Err(e) = dgsi::cli::validate_config(&text) {
            panic!("{}: {e:?}", p.display());
        }
    }
}
