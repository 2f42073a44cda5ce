use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn vkdet(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_vkdet"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn out_arg(dir: &Path) -> String {
    dir.display().to_string()
}

fn tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    fn walk(root: &Path, dir: &Path, out: &mut BTreeMap<PathBuf, Vec<u8>>) {
        for e in fs::read_dir(dir).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                walk(root, &p, out);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), fs::read(&p).unwrap());
            }
        }
    }
    let mut out = BTreeMap::new();
    walk(root, root, &mut out);
    out
}

#[test]
fn synth_is_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = vkdet(&["synth", "--seed", "7", "--out", &out_arg(d.path())]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    }
    let ta = tree(a.path());
    assert!(!ta.is_empty());
    assert_eq!(ta, tree(b.path()));
}

#[test]
fn perfect_detections_give_full_marks() {
    let dir = tempfile::tempdir().unwrap();
    let out = out_arg(dir.path());
    assert!(vkdet(&["synth", "--out", &out]).status.success());
    let gt = fs::read_to_string(dir.path().join("gt_test.tsv")).unwrap();
    let dets: String = gt
        .lines()
        .filter(|l| !l.trim().is_empty() && !l.starts_with('#'))
        .map(|l| {
            let f: Vec<&str> = l.split('\t').collect();
            format!("{}\t{}\t{}\t{}\t{}\t{}\t1\t1\t1\t1\n", f[0], f[5], f[1], f[2], f[3], f[4])
        })
        .collect();
    fs::write(dir.path().join("detections.tsv"), dets).unwrap();
    let o = vkdet(&["eval", "--out", &out]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let stdout = String::from_utf8(o.stdout).unwrap();
    let values: Vec<&str> = stdout.lines().nth(1).unwrap().split_whitespace().collect();
    assert_eq!(values, ["100.0", "100.0", "100.0", "100.0"], "{stdout}");
}

#[test]
fn missing_input_exits_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = vkdet(&["eval", "--out", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(2), "{}", String::from_utf8_lossy(&o.stderr));
    let o = vkdet(&["synth", "--config", "/nonexistent/vkdet.toml", "--out", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn version_mismatch_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "format_version = 99\n").unwrap();
    let o = vkdet(&["synth", "--config", &cfg.display().to_string(), "--out", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(3), "{}", String::from_utf8_lossy(&o.stderr));
}

#[test]
fn invalid_config_exits_four_naming_the_key() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[synth]\nnum_images = 0\n").unwrap();
    let o = vkdet(&["synth", "--config", &cfg.display().to_string(), "--out", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("num_images"));

    let o = vkdet(&["infer", "--tau=-1", "--out", &out_arg(dir.path())]);
    assert_eq!(o.status.code(), Some(4));
    assert!(String::from_utf8_lossy(&o.stderr).contains("tau"));
}
