use std::path::Path;
use std::process::{Command, Output};

fn svtrv2(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svtrv2"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = svtrv2(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_train_eval_decode_bench() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let manifest = ok(&[
        "synth",
        "--profile",
        "regular",
        "--n",
        "24",
        "--seed",
        "5",
        "--out",
        s(&data),
    ]);
    let manifest = manifest.trim();
    assert!(Path::new(manifest).exists());
    assert!(data.join("charset.txt").exists());

    let config = dir.path().join("train.cfg");
    std::fs::write(
        &config,
        "# tiny run\nlr = 1e-3\ntotal_epochs = 1\nwarmup_epochs = 0.5\nvalidate = false\n",
    )
    .unwrap();
    let run = dir.path().join("run");
    ok(&[
        "train",
        "--config",
        s(&config),
        "--data",
        manifest,
        "--out",
        s(&run),
        "--batch-size",
        "8",
        "--seed",
        "2",
    ]);
    for f in ["phase_a.ckpt", "phase_b.ckpt", "inference.ckpt"] {
        assert!(run.join(f).exists(), "{f} missing");
    }
    let ckpt = run.join("inference.ckpt");

    let report = dir.path().join("eval.csv");
    let eval = ok(&["eval", "--ckpt", s(&ckpt), "--data", manifest, "--report", s(&report)]);
    assert!(eval.starts_with("scope,key,correct,total,accuracy\noverall,all,"));
    assert!(eval.contains(",24,"));
    assert_eq!(std::fs::read_to_string(&report).unwrap(), eval);

    let image = data.join("images").read_dir().unwrap().next().unwrap().unwrap().path();
    let rearr = dir.path().join("frm.csv");
    let line = ok(&[
        "decode",
        "--ckpt",
        s(&ckpt),
        "--image",
        s(&image),
        "--dump-rearrangement",
        s(&rearr),
    ]);
    let (_, conf) = line.trim_end_matches('\n').split_once('\t').unwrap();
    let conf: f64 = conf.parse().unwrap();
    assert!((0.0..=1.0).contains(&conf));
    let dump = std::fs::read_to_string(&rearr).unwrap();
    assert!(dump.starts_with("matrix,grid_row,row,col,value\n"));

    let sgm = dir.path().join("sgm.csv");
    let phase_b = run.join("phase_b.ckpt");
    ok(&[
        "decode",
        "--ckpt",
        s(&phase_b),
        "--image",
        s(&image),
        "--dump-sgm-attn",
        s(&sgm),
        "--label",
        "abc",
    ]);
    assert!(std::fs::read_to_string(&sgm)
        .unwrap()
        .starts_with("side,position,char,cell_row,cell_col,value\n"));

    let bench = ok(&["bench", "--ckpt", s(&ckpt), "--data", manifest]);
    assert!(bench.starts_with("length,count,avg_ms\n"));
    assert!(bench.contains("\nmean,,"));
    assert!(bench.contains("\nfps,,"));
}

#[test]
fn errors_exit_nonzero() {
    let out = svtrv2(&["eval", "--ckpt", "/nonexistent.ckpt", "--data", "/nonexistent.tsv"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("error:"));
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    std::fs::write(&cfg, "lambda1 = -1\n").unwrap();
    let out = svtrv2(&["train", "--config", s(&cfg)]);
    assert!(!out.status.success());
}

#[test]
fn gradcheck_passes() {
    let out = ok(&["gradcheck"]);
    assert!(out.lines().count() >= 22);
    assert!(out.lines().all(|l| l.starts_with("PASS")));
}
