use std::path::Path;
use std::process::{Command, Output};

fn caforge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_caforge"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = caforge(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_is_deterministic_and_validated() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let common = [
        "gen",
        "--setting",
        "B",
        "--n",
        "2",
        "--m",
        "2",
        "--count",
        "500",
        "--seed",
        "7",
    ];
    ok(&[&common[..], &["--out-dir", path(&a)]].concat());
    ok(&[&common[..], &["--out-dir", path(&b)]].concat());
    let manifest = std::fs::read_to_string(a.join("manifest.json")).unwrap();
    assert_eq!(manifest, std::fs::read_to_string(b.join("manifest.json")).unwrap());
    let json: serde_json::Value = serde_json::from_str(&manifest).unwrap();
    assert_eq!(json["count"], 500);
    assert_eq!(json["bundles"], 3);
    assert_eq!(json["sha256"].as_str().unwrap().len(), 64);
    // header (26 bytes) plus 500 × 2 × 3 doubles
    assert_eq!(
        std::fs::metadata(a.join("profiles.bin")).unwrap().len(),
        26 + 500 * 6 * 8
    );
    let preview = std::fs::read_to_string(a.join("preview.csv")).unwrap();
    assert_eq!(preview.lines().next().unwrap(), "profile,bidder,bundle,value");
    assert_eq!(preview.lines().count(), 1 + 100 * 6);

    let out = caforge(&[
        "gen",
        "--setting",
        "A",
        "--n",
        "2",
        "--m",
        "2",
        "--count",
        "0",
        "--out-dir",
        path(&a),
    ]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn invalid_setting_c_scale_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = caforge(&[
        "train",
        "--setting",
        "C",
        "--n",
        "3",
        "--m",
        "2",
        "--mech",
        "canet",
        "--out-dir",
        path(dir.path()),
    ]);
    assert_eq!(out.status.code(), Some(2), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(!dir.path().join("run.json").exists());
}

#[test]
fn env_vars_override_flags() {
    let dir = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_caforge"))
        .args([
            "gen",
            "--n",
            "2",
            "--m",
            "2",
            "--count",
            "10",
            "--out-dir",
            path(dir.path()),
        ])
        .env("CAFORGE_SETTING", "C")
        .env("CAFORGE_SEED", "3")
        .output()
        .unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let json: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(dir.path().join("manifest.json")).unwrap()).unwrap();
    assert_eq!(json["setting"], "C");
    assert_eq!(json["seed"], 3);
}

#[test]
fn missing_checkpoint_is_an_io_error() {
    let out = caforge(&[
        "eval",
        "--setting",
        "A",
        "--n",
        "2",
        "--m",
        "2",
        "--mech",
        "canet",
        "--checkpoint",
        "/nonexistent/final.json",
    ]);
    assert_eq!(out.status.code(), Some(4));
}

#[test]
fn eval_baselines_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let results = dir.path().join("results.csv");
    let run = |mech: &str| {
        let metrics = dir.path().join(format!("{mech}.json"));
        ok(&[
            "eval",
            "--setting",
            "A",
            "--n",
            "2",
            "--m",
            "2",
            "--mech",
            mech,
            "--samples",
            "400",
            "--inner-steps",
            "20",
            "--search-samples",
            "50",
            "--restarts",
            "2",
            "--results",
            path(&results),
            "--metrics-out",
            path(&metrics),
        ]);
        let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(metrics).unwrap()).unwrap();
        v
    };
    let vcg = run("vcg");
    assert!((vcg["metrics"]["revenue"].as_f64().unwrap() - 2.0 / 3.0).abs() < 0.05);
    assert!(vcg["metrics"]["regret_max"].as_f64().unwrap() <= 1e-3);
    assert_eq!(vcg["metrics"]["ir_violations"], 0);
    let local = run("local_ama");
    assert!(local["ama_params"]["weights"].as_array().unwrap().len() == 2);
    assert!(local["metrics"]["regret_max"].as_f64().unwrap() <= 1e-3);

    let text = std::fs::read_to_string(&results).unwrap();
    assert!(text.starts_with("# caforge-results v1\n"));
    assert_eq!(text.lines().count(), 4);

    let out_dir = dir.path().join("tables");
    let md = ok(&["report", "--results", path(&results), "--out-dir", path(&out_dir)]);
    assert!(md.contains("| vcg |") && md.contains("| local_ama |"));
    assert_eq!(md, std::fs::read_to_string(out_dir.join("table.md")).unwrap());
    assert!(out_dir.join("table.csv").exists());

    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "not a results file\n").unwrap();
    assert_eq!(caforge(&["report", "--results", path(&bad)]).status.code(), Some(2));
}

#[test]
fn train_then_eval_checkpoint_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "gen",
        "--setting",
        "A",
        "--n",
        "2",
        "--m",
        "2",
        "--count",
        "256",
        "--seed",
        "1",
        "--out-dir",
        path(&data),
    ]);
    let config = dir.path().join("train.toml");
    std::fs::write(
        &config,
        "batch_size = 32\ninner_steps = 3\nvalidate_every = 0\ncheckpoint_every = 2\n",
    )
    .unwrap();
    let train = |name: &str| {
        let out = dir.path().join(name);
        ok(&[
            "train",
            "--setting",
            "A",
            "--n",
            "2",
            "--m",
            "2",
            "--mech",
            "canet",
            "--hidden",
            "8,8",
            "--iters",
            "3",
            "--seed",
            "5",
            "--config",
            path(&config),
            "--dataset",
            path(&data.join("manifest.json")),
            "--out-dir",
            path(&out),
        ]);
        out
    };
    let a = train("run_a");
    let b = train("run_b");
    let run: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(a.join("run.json")).unwrap()).unwrap();
    assert_eq!(run["train"]["batch_size"], 32);
    assert_eq!(run["train"]["iterations"], 3);
    assert_eq!(run["train"]["seed"], 5);
    assert_eq!(run["network"]["architecture"]["hidden"], serde_json::json!([8, 8]));
    for f in ["run.json", "summary.json", "final.bin", "checkpoint_2.bin"] {
        assert_eq!(
            std::fs::read(a.join(f)).unwrap(),
            std::fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }

    let eval = |ckpt: &Path| {
        ok(&[
            "eval",
            "--setting",
            "A",
            "--n",
            "2",
            "--m",
            "2",
            "--mech",
            "canet",
            "--checkpoint",
            path(ckpt),
            "--samples",
            "100",
            "--inner-steps",
            "5",
        ])
    };
    let ea = eval(&a.join("final.json"));
    let eb = eval(&b.join("final.json"));
    let strip = |s: &str| s.replace(path(&a), "").replace(path(&b), "");
    assert_eq!(strip(&ea), strip(&eb));

    let wrong = caforge(&[
        "eval",
        "--setting",
        "A",
        "--n",
        "2",
        "--m",
        "3",
        "--mech",
        "canet",
        "--checkpoint",
        path(&a.join("final.json")),
    ]);
    assert_eq!(wrong.status.code(), Some(2));
    let kind = caforge(&[
        "eval",
        "--setting",
        "A",
        "--n",
        "2",
        "--m",
        "2",
        "--mech",
        "caformer",
        "--checkpoint",
        path(&a.join("final.json")),
    ]);
    assert_eq!(kind.status.code(), Some(2));
}
