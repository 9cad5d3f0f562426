use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn lodric(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lodric"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn scratch_dir(name: &str) -> PathBuf {
    let dir = PathBuf::from(env!("CARGO_TARGET_TMPDIR")).join(name);
    fs::create_dir_all(&dir).unwrap();
    dir
}

#[test]
fn lists_presets() {
    let out = lodric(&["presets"]);
    assert!(out.status.success());
    let text = String::from_utf8(out.stdout).unwrap();
    for name in ["grid", "lshape", "stripes", "grid-full"] {
        assert!(text.lines().any(|l| l.starts_with(name)), "missing {name}");
    }
}

#[test]
fn run_writes_csv() {
    let dir = scratch_dir("run_writes_csv");
    let config = dir.join("small.toml");
    fs::write(
        &config,
        "preset = \"lshape\"\n[levels]\nreference = 3\ncoarse_max = 1\n\
         [solver]\nn_steps = 8\n[output]\ncsv = \"small.csv\"\n",
    )
    .unwrap();
    let out = lodric(&["run", config.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(dir.join("small.csv")).unwrap();
    assert!(csv.contains("# preset = lshape"));
    assert_eq!(csv.lines().filter(|l| !l.starts_with('#')).count(), 3);
}

#[test]
fn bad_config_fails_with_message() {
    let dir = scratch_dir("bad_config");
    let config = dir.join("bad.toml");
    fs::write(&config, "[solver]\nn_steps = 0\n").unwrap();
    let out = lodric(&["run", config.to_str().unwrap()]);
    assert!(!out.status.success());
    assert!(String::from_utf8(out.stderr).unwrap().contains("n_steps"));
    let missing = lodric(&["run", dir.join("absent.toml").to_str().unwrap()]);
    assert!(!missing.status.success());
}

#[test]
fn dumps_coefficient_grid() {
    let dir = scratch_dir("dump_kappa");
    let config = dir.join("stripes.toml");
    fs::write(&config, "preset = \"stripes\"\n").unwrap();
    let target = dir.join("kappa.txt");
    let out = lodric(&["dump-kappa", config.to_str().unwrap(), target.to_str().unwrap()]);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(fs::metadata(&target).unwrap().len() > 0);
}
