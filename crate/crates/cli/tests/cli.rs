use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn spinbath(dir: &Path, config: &str, args: &[&str]) -> Output {
    let path = dir.join("experiment.toml");
    std::fs::write(&path, config).unwrap();
    Command::new(env!("CARGO_BIN_EXE_spinbath"))
        .args(args)
        .arg("--config")
        .arg(&path)
        .arg("--jobs")
        .arg("1")
        .env_remove("SPINBATH_OUTPUT_DIR")
        .output()
        .unwrap()
}

fn written(out: &Output) -> Vec<PathBuf> {
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout.clone()).unwrap().lines().map(PathBuf::from).collect()
}

fn data_rows(path: &Path) -> Vec<Vec<f64>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .map(|l| l.split(',').map(|f| f.parse().unwrap_or(f64::NAN)).collect())
        .collect()
}

const SMALL_RUN: &str = r#"
[model]
j = 1.0
alpha = 0.2
gamma = 0.6
[lattice]
length = 3
beta = 1.0
slices = 10
[schedule]
thermalization = 200
measurement = 2000
seed = 5
replicas = 2
checkpoint_every = 500
"#;

#[test]
fn rerun_reproduces_tables_byte_for_byte() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    let fa = written(&spinbath(dir.path(), SMALL_RUN, &["run", "--out", a.to_str().unwrap()]));
    let fb = written(&spinbath(dir.path(), SMALL_RUN, &["run", "--out", b.to_str().unwrap()]));
    let tables: Vec<_> = fa.iter().filter(|p| p.extension().unwrap() == "csv").collect();
    assert_eq!(tables.len(), 2);
    for t in tables {
        let twin = b.join(t.file_name().unwrap());
        assert!(fb.contains(&twin));
        assert_eq!(std::fs::read(t).unwrap(), std::fs::read(&twin).unwrap());
    }
}

#[test]
fn every_output_names_the_config_hash() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let hash = String::from_utf8(spinbath(dir.path(), SMALL_RUN, &["config"]).stdout).unwrap();
    let hash = hash.lines().next().unwrap().trim_start_matches("# config_hash=").to_string();
    let files = written(&spinbath(dir.path(), SMALL_RUN, &["run", "--out", out.to_str().unwrap()]));
    for f in &files {
        let name = f.file_name().unwrap().to_str().unwrap();
        let text = std::fs::read_to_string(f).unwrap();
        let file_hash = text.lines().find_map(|l| l.strip_prefix("# config_hash=").or(l.strip_prefix("config_hash = "))).unwrap();
        let file_hash = file_hash.split_whitespace().next().unwrap();
        assert_eq!(file_hash, hash);
        assert!(name.contains(file_hash), "{name}");
    }
    let hist = files.iter().find(|f| f.to_str().unwrap().contains("hist-")).unwrap();
    let total: f64 = data_rows(hist).iter().map(|r| r[1]).sum();
    assert!((total - 1.0).abs() < 1e-6);
}

#[test]
fn resume_from_final_checkpoint_gives_same_tables() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let first = written(&spinbath(dir.path(), SMALL_RUN, &["run", "--out", out.to_str().unwrap()]));
    let table = first.iter().find(|p| p.to_str().unwrap().contains("run-")).unwrap();
    let before = std::fs::read(table).unwrap();
    assert!(std::fs::read_dir(&out).unwrap().any(|e| e.unwrap().file_name().to_str().unwrap().starts_with("checkpoints-")));
    written(&spinbath(dir.path(), SMALL_RUN, &["run", "--resume", "--out", out.to_str().unwrap()]));
    assert_eq!(before, std::fs::read(table).unwrap());
}

#[test]
fn output_dir_comes_from_environment() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("from-env");
    let path = dir.path().join("k.toml");
    std::fs::write(&path, "[model]\nalpha = 0.0\n[lattice]\nlength = 2\nbeta = 2.0\nslices = 8\n").unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_spinbath"))
        .args(["kernel", "--config"])
        .arg(&path)
        .env("SPINBATH_OUTPUT_DIR", &target)
        .output()
        .unwrap();
    let files = written(&out);
    assert!(files.iter().all(|f| f.starts_with(&target)));
}

#[test]
fn kernel_dump_vanishes_without_coupling() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg = "[model]\nalpha = 0.0\n[lattice]\nlength = 2\nbeta = 2.0\nslices = 8\n";
    let files = written(&spinbath(dir.path(), cfg, &["kernel", "--out", out.to_str().unwrap()]));
    let rows = data_rows(&files[0]);
    assert_eq!(rows.len(), 7);
    assert!(rows.iter().all(|r| r[1] == 0.0 && r[2] == 0.0));
}

#[test]
fn vmf_sweep_emits_mirrored_branches() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg = r#"
        [model]
        j = 2.6
        alpha = 0.3
        [vmf]
        solver = "polaron"
        [sweep]
        gamma = [0.45, 0.5, 0.55]
    "#;
    let files = written(&spinbath(dir.path(), cfg, &["vmf", "--out", out.to_str().unwrap()]));
    let rows = data_rows(&files[0]);
    let chosen: Vec<&Vec<f64>> = rows.iter().filter(|r| r[10] == 1.0).collect();
    assert_eq!(chosen.len(), 3);
    assert!((chosen[0][5] + chosen[2][5]).abs() < 1e-6);
    assert!((chosen[0][7] - chosen[2][7]).abs() < 1e-8);
    assert!(chosen[2][5] < 0.0);
}

#[test]
fn oracle_recovers_free_spin() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg = r#"
        [model]
        bath = "discrete"
        modes = [[1.5, 0.0]]
        [oracle]
        boson_cutoff = 4
    "#;
    let files = written(&spinbath(dir.path(), cfg, &["oracle", "--out", out.to_str().unwrap()]));
    let row = &data_rows(&files[0])[0];
    assert!((row[5] + 0.5).abs() < 1e-10);
    assert!((row[7] + 1.0).abs() < 1e-10);
}

#[test]
fn invalid_configs_fail_with_diagnostics() {
    let dir = tempfile::tempdir().unwrap();
    for (cfg, needle) in [("[model]\ngamma = 1.5\n", "gamma"), ("[model]\ngama = 0.4\n", "gama")] {
        let out = spinbath(dir.path(), cfg, &["run"]);
        assert!(!out.status.success());
        let err = String::from_utf8_lossy(&out.stderr);
        assert!(err.contains(needle), "{err}");
    }
}

#[test]
fn flags_override_file_values() {
    let dir = tempfile::tempdir().unwrap();
    let out = spinbath(dir.path(), SMALL_RUN, &["config", "--seed", "99", "--set", "model.gamma=0.4"]);
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.contains("seed = 99"));
    assert!(text.contains("gamma = 0.4"));
}

#[test]
fn scan_writes_one_row_per_grid_point() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("o");
    let cfg = r#"
        [model]
        alpha = 0.0
        [lattice]
        slice_width = 0.25
        [schedule]
        thermalization = 100
        measurement = 500
        [sweep]
        j = [1.0, 3.0]
        length = [2, 4]
        [scan]
        aspect_ratio = 0.5
    "#;
    let files = written(&spinbath(dir.path(), cfg, &["scan", "--out", out.to_str().unwrap()]));
    let rows = data_rows(&files[0]);
    assert_eq!(rows.len(), 4);
    assert_eq!(rows.iter().map(|r| r[4]).collect::<Vec<_>>(), [2.0, 2.0, 4.0, 4.0]);
    assert_eq!(rows[3][5], 2.0);
    assert_eq!(files.iter().filter(|f| f.to_str().unwrap().contains("hist-")).count(), 4);
}
