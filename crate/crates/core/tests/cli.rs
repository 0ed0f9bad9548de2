use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use tempfile::tempdir;

fn fixtures() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

fn opilex(out: &Path, args: &[&str]) -> Output {
    let config = fixtures().join("e2e_config.json");
    Command::new(env!("CARGO_BIN_EXE_opilex"))
        .args(["--config", config.to_str().unwrap(), "--threads", "1", "--output", out.to_str().unwrap()])
        .args(args)
        .output()
        .expect("run opilex")
}

fn files_under(dir: &Path) -> Vec<PathBuf> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir).unwrap() {
        let path = entry.unwrap().path();
        if path.is_dir() {
            out.extend(files_under(&path));
        } else {
            out.push(path);
        }
    }
    out.sort();
    out
}

#[test]
fn kappa_prints_six_decimals() {
    let out = tempdir().unwrap();
    for (file, want) in [("kappa_perfect.csv", "1.000000"), ("kappa_worked.csv", "-0.200000")] {
        let o = Command::new(env!("CARGO_BIN_EXE_opilex"))
            .args(["kappa", fixtures().join(file).to_str().unwrap(), "--output", out.path().to_str().unwrap()])
            .output()
            .unwrap();
        assert!(o.status.success());
        assert_eq!(String::from_utf8(o.stdout).unwrap().trim(), want);
    }
    assert!(out.path().join("kappa.manifest.json").exists());
}

#[test]
fn exit_codes() {
    let out = tempdir().unwrap();
    let missing = Command::new(env!("CARGO_BIN_EXE_opilex"))
        .args(["--config", "/no/such/config.json", "stats"])
        .output()
        .unwrap();
    assert_eq!(missing.status.code(), Some(1));
    let no_config = Command::new(env!("CARGO_BIN_EXE_opilex")).arg("trends").output().unwrap();
    assert_eq!(no_config.status.code(), Some(1));

    let cfg = out.path().join("config.json");
    fs::write(&cfg, r#"{"inputs": ["absent.ndjson"], "years": {"first": 2018, "last": 2018}, "salt": "s"}"#).unwrap();
    let data = Command::new(env!("CARGO_BIN_EXE_opilex")).args(["--config", cfg.to_str().unwrap(), "stats"]).output().unwrap();
    assert_eq!(data.status.code(), Some(2));

    let bad_annotations = out.path().join("ann.csv");
    fs::write(&bad_annotations, "subject,r1,r2\ns1,A\n").unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_opilex"))
        .args(["kappa", bad_annotations.to_str().unwrap(), "--output", out.path().to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn outputs_never_contain_raw_author_names() {
    let out = tempdir().unwrap();
    for cmd in [&["ingest"][..], &["stats"], &["trends"], &["associate"], &["discover"]] {
        let o = opilex(out.path(), cmd);
        assert!(o.status.success(), "{cmd:?}: {}", String::from_utf8_lossy(&o.stderr));
    }
    let raw: Vec<String> = (0..40).map(|i| format!("user{i:02}")).collect();
    for file in files_under(out.path()) {
        let text = fs::read_to_string(&file).unwrap();
        for name in &raw {
            assert!(!text.contains(name.as_str()), "{} leaks {name}", file.display());
        }
        assert!(!text.contains("fixture-salt"), "{} leaks the salt", file.display());
    }
}

#[test]
fn manifest_records_config_and_input_hashes() {
    let out = tempdir().unwrap();
    assert!(opilex(out.path(), &["stats"]).status.success());
    let manifest: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.path().join("stats.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["command"], "stats");
    assert_eq!(manifest["version"], env!("CARGO_PKG_VERSION"));
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    let inputs = manifest["inputs"].as_array().unwrap();
    assert!(inputs[0]["path"].as_str().unwrap().ends_with("dump_500.ndjson"));
    assert_eq!(inputs[0]["sha256"].as_str().unwrap().len(), 64);
    assert!(manifest["outputs"][0]["path"].as_str().unwrap().ends_with("stats.csv"));
    let stats = fs::read_to_string(out.path().join("stats.csv")).unwrap();
    assert_eq!(stats, "year,n_comments,n_authors,n_subreddits,author_prevalence\n2017,241,40,6,\n2018,259,40,6,\n");
}

#[test]
fn single_thread_training_is_deterministic() {
    let (a, b) = (tempdir().unwrap(), tempdir().unwrap());
    for out in [&a, &b] {
        let o = opilex(out.path(), &["train"]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    assert_eq!(fs::read(a.path().join("model.bin")).unwrap(), fs::read(b.path().join("model.bin")).unwrap());
}

#[test]
fn expand_then_import_review() {
    let out = tempdir().unwrap();
    assert!(opilex(out.path(), &["train"]).status.success());
    let o = opilex(out.path(), &["expand", "--domain", "roa", "--neighbours", "5"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let review = out.path().join("review_roa.csv");
    let text = fs::read_to_string(&review).unwrap();
    let mut lines = text.lines();
    let mut edited = format!("{}\n", lines.next().unwrap());
    for line in lines {
        let head = line.rsplitn(3, ',').nth(2).unwrap();
        edited.push_str(&format!("{head},1,Intranasal\n"));
    }
    fs::write(&review, edited).unwrap();
    let o = opilex(out.path(), &["lexicon-import", review.to_str().unwrap(), "--domain", "roa"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let lexicon = fs::read_to_string(out.path().join("lexicon_roa.csv")).unwrap();
    assert!(lexicon.starts_with("domain,category,primary_category,term,seed\n"));
    assert!(lexicon.lines().skip(1).all(|l| l.starts_with("roa,Intranasal,Inhalation,")));
}

#[test]
fn interactive_discovery_pauses_for_review() {
    let out = tempdir().unwrap();
    let o = opilex(out.path(), &["discover", "--interactive"]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("review pending"));
    let round1 = out.path().join("discovery/2017_round_1.csv");
    assert!(round1.exists());
    assert!(!out.path().join("discovery/2017.json").exists());
}

#[test]
fn rho_override_and_threads_env() {
    let out = tempdir().unwrap();
    let config = fixtures().join("e2e_config.json");
    let o = Command::new(env!("CARGO_BIN_EXE_opilex"))
        .env("OPILEX_THREADS", "2")
        .args(["--config", config.to_str().unwrap(), "--output", out.path().to_str().unwrap(), "associate", "--rho", "2"])
        .output()
        .unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.path().join("associations.csv")).unwrap();
    assert!(csv.lines().skip(1).all(|l| l.split(',').nth(4) == Some("2")));
    let manifest = fs::read_to_string(out.path().join("associate.manifest.json")).unwrap();
    assert!(manifest.contains("\"threads\": 2"));
}

#[test]
fn example_config_parses() {
    let example = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../config.example.json");
    let o = Command::new(env!("CARGO_BIN_EXE_opilex")).args(["--config", example.to_str().unwrap(), "stats"]).output().unwrap();
    // Parsing succeeds; the placeholder dumps do not exist.
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
}
