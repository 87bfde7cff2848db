use std::process::Command;

fn cpclab(args: &[&str], out: &std::path::Path) -> i32 {
    Command::new(env!("CARGO_BIN_EXE_cpclab"))
        .args(args)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
        .status
        .code()
        .unwrap()
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cpclab(&["verify", "--suite", "lemma1"], dir.path()), 0);
    assert_eq!(cpclab(&["verify", "--suite", "lemma1", "--corrupt-subset-map"], dir.path()), 1);
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"sead": 1}"#).unwrap();
    assert_eq!(cpclab(&["verify", "--config", bad.to_str().unwrap()], dir.path()), 2);
    std::fs::write(&bad, r#"{"k_list": [3, 2]}"#).unwrap();
    assert_eq!(cpclab(&["experiment", "--config", bad.to_str().unwrap()], dir.path()), 2);
    assert_eq!(cpclab(&["verify", "--config", "/no/such/config.json"], dir.path()), 2);
}

#[test]
fn lemma1_report_and_manifest() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cpclab(&["verify", "--suite", "lemma1", "--seed", "9"], dir.path()), 0);
    let report_dir = dir.path().join("verify/lemma1");
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(report_dir.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["config"]["seed"], 9);
    assert_eq!(report["passed"], true);
    let records = report["results"]["records"].as_array().unwrap();
    assert_eq!(records.len(), 4);
    assert!(records.iter().all(|r| r["measured"].as_f64().unwrap() <= 1e-8));
    assert!(cpclab_cli::report::verify_manifest(&report_dir).unwrap().is_empty());
}

#[test]
fn featurespace_dense_writes_artifacts() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(cpclab(&["featurespace", "--map", "dense_seeded"], dir.path()), 0);
    let root = dir.path().join("featurespace");
    for f in ["dense_seeded/cosine_pixel.csv", "dense_seeded/cosine_feature.pgm", "dense_seeded/gap.csv", "report.json"] {
        assert!(root.join(f).exists(), "{f}");
    }
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(root.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["results"][0]["pixel"]["classification"], "entangled");
    assert_eq!(report["results"][0]["feature"]["classification"], "disentangled");
    let (shape, values) = cpclab_core::io::read_pgm(
        &root.join("dense_seeded/cosine_feature.pgm"),
        &root.join("dense_seeded/cosine_feature.json"),
    )
    .unwrap();
    assert_eq!((shape.height, shape.width), (4, 4));
    for i in 0..4 {
        assert!((values[i * 4 + i] - 1.0).abs() < 1e-9);
    }
}
