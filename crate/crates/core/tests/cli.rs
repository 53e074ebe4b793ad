use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn duotts(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_duotts")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let o = duotts(args);
    assert!(o.status.success(), "{args:?} failed: {}", String::from_utf8_lossy(&o.stderr));
    String::from_utf8(o.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

const TINY: &str = r#"
seed = 3

[tokenizer]
hidden = 16
acoustic_dim = 8
adapter_dim = 8
n_layers = 4
n_entries = 64

[tokenizer.frontend]
n_filters = 16
teacher_dim = 8
d_latent = 8

[tokenizer_train]
steps = 12
batch_size = 2
quantizer_warmup = 4
log_every = 4

[tokenizer_stage2]
steps = 6

[model]
n_layers = 4
n_entries = 64
backbone_dim = 32
backbone_blocks = 1
backbone_heads = 2
backbone_ff = 32
decoder_dim = 16
decoder_blocks = 1
decoder_heads = 2
decoder_ff = 16

[train]
steps = 6
batch_size = 2

[engine]
max_frames = 6
"#;

#[test]
fn exit_codes() {
    assert_eq!(duotts(&["--help"]).status.code(), Some(0));
    assert_eq!(duotts(&["bench", "latency", "--mode", "sideways"]).status.code(), Some(2));
    assert_eq!(duotts(&["frobnicate"]).status.code(), Some(2));
    let o = duotts(&["eval", "intelligibility", "--wav", "/nonexistent.wav", "--text", "1", "--speaker", "1"]);
    assert_eq!(o.status.code(), Some(1));
    let err = String::from_utf8(o.stderr).unwrap();
    assert_eq!(err.trim_end().lines().count(), 1, "{err}");
}

#[test]
fn unknown_config_key_fails() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.toml");
    fs::write(&cfg, "[model]\nbackbone_dimm = 3\n").unwrap();
    let o = duotts(&["--config", p(&cfg), "bench", "latency"]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("backbone_dimm"));
}

#[test]
fn bench_latency_prints_step_counts() {
    let out = ok(&["bench", "latency", "--mode", "dual", "--layers", "16", "--frames", "2"]);
    assert!(out.contains("backbone=1 decoder=15"), "{out}");
    let out = ok(&["bench", "latency", "--mode", "delay", "--layers", "4", "--frames", "2"]);
    assert!(out.contains("backbone=4 decoder=0"), "{out}");
}

#[test]
fn roundtrip_on_untrained_tokenizer() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = dir.path().join("corpus");
    ok(&["corpus", "gen", "--n", "3", "--out", p(&corpus)]);
    let report = dir.path().join("r.json");
    ok(&["eval", "roundtrip", "--manifest", p(&corpus.join("manifest.jsonl")), "--out", p(&report)]);
    let v: serde_json::Value = serde_json::from_str(&fs::read_to_string(&report).unwrap()).unwrap();
    assert!(v["report"]["recon_error"].as_f64().unwrap() > 0.0);
    assert_eq!(v["stamp"]["seed"], 0);
}

fn pipeline(root: &Path) {
    let cfg = root.join("run.toml");
    fs::write(&cfg, TINY).unwrap();
    let c = p(&cfg);
    let mono = root.join("mono");
    let dlg = root.join("dlg");
    ok(&["--config", c, "corpus", "gen", "--n", "4", "--max-tokens", "2", "--out", p(&mono)]);
    ok(&["--config", c, "corpus", "gen", "--kind", "dialogue", "--n", "3", "--out", p(&dlg)]);
    let tok1 = root.join("tok1");
    let tok2 = root.join("tok2");
    let mono_m = mono.join("manifest.jsonl");
    let dlg_m = dlg.join("manifest.jsonl");
    ok(&["--config", c, "tokenizer", "train", "--stage", "1", "--manifest", p(&mono_m), "--out", p(&tok1)]);
    let s1 = tok1.join("tokenizer.ckpt");
    ok(&["--config", c, "tokenizer", "train", "--stage", "2", "--init", p(&s1), "--manifest", p(&mono_m), "--out", p(&tok2)]);
    let tok = tok2.join("tokenizer.ckpt");

    let grid = root.join("m0.grid");
    let wav = root.join("m0.wav");
    ok(&["--config", c, "tokenizer", "encode", "--tokenizer", p(&tok), "--in", p(&mono.join("wav/m00000.wav")), "--out", p(&grid)]);
    ok(&["--config", c, "tokenizer", "decode", "--tokenizer", p(&tok), "--in", p(&grid), "--out", p(&wav)]);

    let pre = root.join("pre");
    let post = root.join("post");
    ok(&["--config", c, "tts", "train", "--stage", "pretrain", "--tokenizer", p(&tok), "--manifest", p(&mono_m), "--out", p(&pre)]);
    let o = duotts(&["--config", c, "tts", "train", "--stage", "pretrain", "--tokenizer", p(&tok), "--manifest", p(&dlg_m), "--out", p(&root.join("bad"))]);
    assert_eq!(o.status.code(), Some(1), "dialogues must not feed pretrain");
    ok(&[
        "--config", c, "tts", "train", "--stage", "posttrain", "--tokenizer", p(&tok), "--init", p(&pre.join("model.ckpt")),
        "--manifest", p(&dlg_m), "--decoder-subsample", "frame", "--out", p(&post),
    ]);
    let model = post.join("model.ckpt");
    ok(&["--config", c, "tts", "dialogue", "--model", p(&model), "--tokenizer", p(&tok), "--manifest", p(&dlg_m), "--out", p(&root.join("talk"))]);
    ok(&[
        "--config", c, "tts", "clone", "--model", p(&model), "--tokenizer", p(&tok), "--prompt-wav", p(&wav), "--prompt-text", "1",
        "--text", "2,3", "--out", p(&root.join("clone.wav")),
    ]);
    ok(&["--config", c, "eval", "roundtrip", "--tokenizer", p(&tok), "--manifest", p(&mono_m), "--out", p(&root.join("rt.json"))]);
}

fn artifacts(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let path = e.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else if path.file_name().unwrap() != "timing.json" {
                out.insert(path.strip_prefix(root).unwrap().to_path_buf(), fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn pipeline_is_byte_reproducible() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    pipeline(a.path());
    pipeline(b.path());
    let (fa, fb) = (artifacts(a.path()), artifacts(b.path()));
    assert_eq!(fa.keys().collect::<Vec<_>>(), fb.keys().collect::<Vec<_>>());
    for (k, v) in &fa {
        assert!(v == &fb[k], "{} differs between runs", k.display());
    }
    for must in ["talk/turns.jsonl", "talk/stamp.json", "clone.wav.stamp.json", "post/model.ckpt", "tok2/tokenizer.ckpt"] {
        assert!(fa.contains_key(Path::new(must)), "missing {must}");
    }
    assert!(a.path().join("talk/timing.json").exists());
}
