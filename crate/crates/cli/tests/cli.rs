use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn quick() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quick.toml")
}

fn sbmcond(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbmcond"))
        .args(args)
        .arg("--out")
        .arg(out)
        .env_remove("SBMCOND_OUT")
        .output()
        .expect("binary runs")
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn combinatorics_needs_no_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = sbmcond(&["verify", "combinatorics"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = json(&dir.path().join("combinatorics.json"));
    assert_eq!(report["passed"], true);
    assert_eq!(report["checks"].as_array().unwrap().len(), 7);
    assert_eq!(report["config_hash"].as_str().unwrap().len(), 64);
    assert!(String::from_utf8_lossy(&out.stdout).contains("[PASS]"));
}

#[test]
fn artifacts_are_byte_identical_on_rerun() {
    let cfg = quick();
    let cfg = cfg.to_str().unwrap();
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for (dir, workers) in [(a.path(), "1"), (b.path(), "3")] {
        for cmd in [&["solve-pde"][..], &["simulate-sbm", "--runs", "4"], &["grow-backbone", "--keep", "2"], &["verify", "3.2"]] {
            let mut args = vec!["--config", cfg, "--workers", workers];
            args.extend_from_slice(cmd);
            let out = sbmcond(&args, dir);
            assert!(out.status.success(), "{cmd:?}: {}", String::from_utf8_lossy(&out.stderr));
        }
    }
    let mut names: Vec<_> = fs::read_dir(a.path()).unwrap().map(|e| e.unwrap().file_name()).collect();
    names.sort();
    assert_eq!(names.len(), 11, "{names:?}");
    for name in names {
        let x = fs::read(a.path().join(&name)).unwrap();
        let y = fs::read(b.path().join(&name)).unwrap();
        assert!(x == y, "{name:?} differs between runs");
    }
}

#[test]
fn artifacts_carry_hash_and_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick();
    let out = sbmcond(&["--config", cfg.to_str().unwrap(), "--seed", "99", "simulate-sbm", "--runs", "2"], dir.path());
    assert!(out.status.success());
    let meta = json(&dir.path().join("sbm.json"));
    assert_eq!(meta["seed"], 99);
    let hash = meta["config_hash"].as_str().unwrap().to_string();
    let csv = fs::read_to_string(dir.path().join("measures.csv")).unwrap();
    assert_eq!(csv.lines().next().unwrap(), format!("# config_hash={hash} seed=99"));
    assert_eq!(csv.lines().nth(1).unwrap(), "run,k,x,y,mass");
    let echoed = fs::read_to_string(dir.path().join("config.toml")).unwrap();
    assert!(echoed.contains("seed = 99"));
}

#[test]
fn field_csv_reads_back() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = quick();
    assert!(sbmcond(&["--config", cfg.to_str().unwrap(), "solve-pde"], dir.path()).status.success());
    let text = fs::read_to_string(dir.path().join("g.csv")).unwrap();
    let g = sbmcond::ScalarField::read_csv(text.as_bytes()).unwrap();
    let solve = json(&dir.path().join("solve.json"));
    let at = g.at(sbmcond::Point::ORIGIN);
    assert!((at - solve["g"].as_f64().unwrap()).abs() < 1e-12);
}

#[test]
fn schema_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "schema_version = 1\nseed = 1\n[particles]\nn = 16\nbogus = 3\n").unwrap();
    let out = sbmcond(&["--config", bad.to_str().unwrap(), "solve-pde"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("particles"), "{err}");
    assert!(err.contains("bogus"), "{err}");

    fs::write(&bad, "schema_version = 1\nseed = 1\n[pde]\nh = -0.1\n[scenario]\nkind = \"dirichlet-f\"\nf = { kind = \"constant\", value = 1.0 }\n").unwrap();
    let out = sbmcond(&["--config", bad.to_str().unwrap(), "solve-pde"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("pde.h"));
}

#[test]
fn hard_failure_sets_exit_code() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = fs::read_to_string(quick()).unwrap().replace("se_rel_max = 0.1", "se_rel_max = 0.0001");
    let path = dir.path().join("strict.toml");
    fs::write(&path, cfg).unwrap();
    let out = sbmcond(&["--config", path.to_str().unwrap(), "verify", "anchor"], dir.path());
    assert_eq!(out.status.code(), Some(1));
    let report = json(&dir.path().join("anchor.json"));
    assert_eq!(report["passed"], false);
}

#[test]
fn default_output_dir_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from-env");
    let out = Command::new(env!("CARGO_BIN_EXE_sbmcond"))
        .args(["verify", "combinatorics"])
        .env("SBMCOND_OUT", &target)
        .output()
        .unwrap();
    assert!(out.status.success());
    assert!(target.join("combinatorics.json").exists());
}
