// Drives the tokvid binary through every subcommand on a miniature run.

use std::path::Path;
use std::process::{Command, Output};

#[allow(dead_code)]
mod end_to_end {
    include!("../examples/end_to_end.rs");
}

use end_to_end::miniature;
use tokvid::train::Stage;

fn tokvid(args: &[&str]) -> Output {
    let out = Command::new(env!("CARGO_BIN_EXE_tokvid"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("tokvid runs");
    if !out.status.success() {
        eprintln!("tokvid {args:?}\n{}", String::from_utf8_lossy(&out.stderr));
    }
    out
}

fn ok(args: &[&str]) -> String {
    let out = tokvid(args);
    assert_eq!(out.status.code(), Some(0), "tokvid {args:?}");
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn frame_bytes(dir: &Path) -> Vec<Vec<u8>> {
    let mut names: Vec<_> = std::fs::read_dir(dir.join("frames")).unwrap().map(|e| e.unwrap().path()).collect();
    names.sort();
    names.iter().map(|p| std::fs::read(p).unwrap()).collect()
}

#[test]
fn subcommands_end_to_end() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();

    let raw = root.join("raw");
    let text = ok(&["preprocess", "--synth", "3", "32", "32", "12", "5", "--out", s(&raw)]);
    assert!(text.contains("3 clips"));
    assert!(raw.join("manifest.tsv").exists());

    let mut configs = Vec::new();
    for stage in [Stage::Tok, Stage::Wm, Stage::Vdec] {
        let path = root.join(format!("{}.toml", stage.name()));
        miniature(stage, root).save(&path).unwrap();
        configs.push(path);
    }
    let [tok, wm, vdec] = [s(&configs[0]), s(&configs[1]), s(&configs[2])];

    // the manifest route needs a tokenizer config for the preprocessing
    let pre = root.join("pre");
    ok(&["preprocess", "--config", tok, "--manifest", s(&raw.join("manifest.tsv")), "--out", s(&pre)]);
    assert!(pre.join("manifest.tsv").exists());

    assert!(ok(&["train-tok", "--config", tok]).contains("tok finished at step 12"));
    ok(&["train-wm", "--config", wm]);
    ok(&["train-vdec", "--config", vdec]);

    let ck = |name: &str| root.join(name).join("final");
    let (t, w, v) = (ck("tok"), ck("wm"), ck("vdec"));
    let checkpoints = ["--tokenizer", s(&t), "--world-model", s(&w), "--video-decoder", s(&v)];
    let input = raw.join("clip_0000");
    let mut outs = Vec::new();
    for run in ["gen_a", "gen_b"] {
        let out = root.join(run);
        let mut args = vec!["generate", "--input", s(&input), "--top-k", "5", "--seed", "9", "--out", s(&out)];
        args.extend(checkpoints);
        assert!(ok(&args).contains("14 frames"));
        outs.push(out);
    }
    let a = frame_bytes(&outs[0]);
    assert_eq!(a.len(), 14);
    assert_eq!(a, frame_bytes(&outs[1]));
    assert!(outs[0].join("run.toml").exists());

    let eval = root.join("eval");
    let text = ok(&["evaluate", "--kind", "transcoding", "--config", tok, "--tokenizer", s(&t), "--out", s(&eval)]);
    assert!(text.contains("metric=PSNR"));
    let mut args = vec!["evaluate", "--kind", "generation", "--config", wm, "--top-k", "5", "--out", s(&eval)];
    args.extend(checkpoints);
    assert!(ok(&args).contains("metric=FVD"));

    let sweep = root.join("sweep");
    let mut args = vec!["sweep", "--axis", "top-k", "--values", "1,5", "--config", wm, "--out", s(&sweep)];
    args.extend(checkpoints);
    ok(&args);
    assert!(sweep.join("sweep.txt").exists());
}

#[test]
fn errors_map_to_exit_codes() {
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let tok = root.join("tok.toml");
    miniature(Stage::Tok, root).save(&tok).unwrap();

    // a tokenizer configuration cannot drive world-model training
    assert_eq!(tokvid(&["train-wm", "--config", s(&tok)]).status.code(), Some(2));
    let bad = root.join("bad.toml");
    std::fs::write(&bad, "stage = ").unwrap();
    assert_eq!(tokvid(&["train-tok", "--config", s(&bad)]).status.code(), Some(2));
    assert_eq!(tokvid(&["preprocess", "--synth", "1", "8", "8", "4", "0"]).status.code(), Some(2));
    assert_eq!(tokvid(&["generate"]).status.code(), Some(2));
    let missing = root.join("missing");
    let code = tokvid(&["generate", "--input", s(&missing), "--tokenizer", s(&missing)]).status.code();
    assert_eq!(code, Some(1));
}
