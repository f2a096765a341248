//! Shared fixtures for the binary-level tests.

#![allow(dead_code)]

use std::path::{Path, PathBuf};
use std::process::{Command, Output};

pub const TINY: &str = r#"
name = "tiny"
task = "triage"
template = '{text} {soft:"this"} patient {soft:"should go to"} {mask} .'
full_epochs = 1

[verbalizer]
soft = true

[head]
hidden_dims = [8]

[data.synthetic]
n = 140
seed = 3
[data.synthetic.profile]
signal_rate = 0.8
slots = 4

[plm.pretrain]
corpus_lines = 60
[plm.pretrain.mlm]
epochs = 1
batch_size = 8
[plm.pretrain.mlm.encoder]
hidden_dim = 16
layers = 1
heads = 2
ffn_dim = 32
max_len = 96

[train]
epochs = 1
grad_accum_steps = 1
plm_frozen = true
"#;

pub fn promptlab(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_promptlab"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

pub fn write_config(dir: &Path, head: &str, tail: &str) -> PathBuf {
    let path = dir.join("exp.toml");
    std::fs::write(&path, format!("{head}\n{TINY}\n{tail}")).unwrap();
    path
}

pub fn ok(out: &Output) {
    assert!(
        out.status.success(),
        "exit {:?}\nstdout: {}\nstderr: {}",
        out.status.code(),
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
}

/// Header plus the first `k` columns of each row, re-encoded as CSV.
pub fn structure(path: &Path, k: usize) -> String {
    let mut r = csv::Reader::from_path(path).unwrap();
    let mut w = csv::WriterBuilder::new().flexible(true).from_writer(Vec::new());
    w.write_record(r.headers().unwrap()).unwrap();
    for row in r.records() {
        let row = row.unwrap();
        w.write_record(row.iter().take(k)).unwrap();
    }
    String::from_utf8(w.into_inner().unwrap()).unwrap()
}

pub fn golden(name: &str) -> String {
    std::fs::read_to_string(Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/golden").join(name)).unwrap()
}

pub fn column(path: &Path, name: &str) -> Vec<String> {
    let mut r = csv::Reader::from_path(path).unwrap();
    let i = r.headers().unwrap().iter().position(|h| h == name).unwrap();
    r.records().map(|row| row.unwrap()[i].to_string()).collect()
}

pub fn json_files(dir: &Path) -> Vec<PathBuf> {
    let mut v: Vec<PathBuf> = std::fs::read_dir(dir)
        .unwrap()
        .map(|e| e.unwrap().path())
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    v.sort();
    v
}

pub const TABLE1_VARIANTS: &str = r#"
[[variants]]
label = "ft-manual-manual"
template = "{text} this patient should go to {mask} ."
verbalizer = { soft = false }
plm_frozen = false
[[variants]]
label = "ft-manual-soft"
template = "{text} this patient should go to {mask} ."
plm_frozen = false
[[variants]]
label = "ft-mixed-manual"
verbalizer = { soft = false }
plm_frozen = false
[[variants]]
label = "ft-mixed-soft"
plm_frozen = false
[[variants]]
label = "ft-soft-manual"
template = "{text} {soft} {soft} {soft} {mask}"
verbalizer = { soft = false }
plm_frozen = false
[[variants]]
label = "ft-soft-soft"
template = "{text} {soft} {soft} {soft} {mask}"
plm_frozen = false
[[variants]]
label = "fz-manual-soft"
template = "{text} this patient should go to {mask} ."
[[variants]]
label = "fz-mixed-manual"
verbalizer = { soft = false }
[[variants]]
label = "fz-mixed-soft"
[[variants]]
label = "fz-soft-manual"
template = "{text} {soft} {soft} {soft} {mask}"
verbalizer = { soft = false }
[[variants]]
label = "fz-soft-soft"
template = "{text} {soft} {soft} {soft} {mask}"
[[variants]]
label = "classic"
paradigm = "classic"
"#;

/// The twelve-setup run behind the prompt-combination table; returns the output dir.
pub fn run_combinations(dir: &Path) -> PathBuf {
    let cfg = write_config(dir, "sample_sizes = [8]\nseeds = [0, 1]", TABLE1_VARIANTS);
    let out = dir.join("out");
    ok(&promptlab(&["run", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    ok(&promptlab(&["report", out.to_str().unwrap()]));
    out
}

/// A two-point sweep at full width: 2 soft tokens and a 2000-unit head.
pub fn run_sweep(dir: &Path) -> PathBuf {
    let tail = r#"
[sweep]
soft_token_counts = [2]
soft_verbalizer = [false]
hidden_dims = [[2000]]
samples_per_class = 2
"#;
    let text = format!("seeds = [0]\n{TINY}\n{tail}")
        .replace("hidden_dim = 16", "hidden_dim = 768")
        .replace("heads = 2", "heads = 12")
        .replace("[plm.pretrain.mlm]\nepochs = 1", "[plm.pretrain.mlm]\nepochs = 0");
    let cfg = dir.join("exp.toml");
    std::fs::write(&cfg, text).unwrap();
    let out = dir.join("out");
    ok(&promptlab(&["sweep", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    ok(&promptlab(&["report", out.to_str().unwrap()]));
    out
}

/// The default five-template comparison over two seeds.
pub fn run_compare(dir: &Path) -> PathBuf {
    let cfg = write_config(dir, "seeds = [0, 1]", "[compare]\nsample_size = 4\n");
    let out = dir.join("out");
    ok(&promptlab(&["compare-templates", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]));
    ok(&promptlab(&["report", out.to_str().unwrap()]));
    out
}
