use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn panmorph(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_panmorph"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = panmorph(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

/// Small and fast: 32x64 images, narrow networks.
const TINY: &str = "height = 32\nwidth = 64\nenc_widths = [4, 8, 8, 8]\nbranch_width = 8\ngate_width = 8\n\
deform_width = 4\ndisc_width = 4\npretrain_its = 5\nmax_its = 6\ncheckpoint_every = 2\n";

fn tree(root: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.push((rel, fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

#[test]
fn help_lists_every_flag() {
    let flags: &[(&str, &[&str])] = &[
        ("gen-data", &["--config", "--out", "--seed", "--counts", "--force", "--profile"]),
        ("pretrain", &["--config", "--data", "--out", "--seed", "--profile"]),
        (
            "adapt",
            &["--config", "--data", "--pretrained", "--out", "--max-its", "--stop-at", "--resume", "--seed", "--profile"],
        ),
        ("eval", &["--config", "--data", "--checkpoint", "--out"]),
        ("viz", &["--what", "--checkpoint", "--inputs", "--fixed", "--out"]),
        ("viz-deform", &["--checkpoint", "--inputs", "--fixed", "--out"]),
        ("viz-gating", &["--checkpoint", "--inputs", "--out"]),
    ];
    let top = ok(&["--help"]);
    for (cmd, expected) in flags {
        assert!(top.contains(cmd), "top-level help misses {cmd}");
        let help = ok(&[cmd, "--help"]);
        for f in *expected {
            assert!(help.contains(f), "{cmd} --help misses {f}");
        }
    }
}

#[test]
fn gen_data_counts_determinism_and_refusal() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, TINY).unwrap();
    let a = dir.path().join("a");
    let b = dir.path().join("b");
    for out in [&a, &b] {
        ok(&["gen-data", "--config", s(&cfg), "--out", s(out), "--seed", "1", "--counts", "10,10,10"]);
    }
    assert_eq!(tree(&a), tree(&b));
    let images = tree(&a).iter().filter(|(p, _)| p.contains("images")).count();
    assert_eq!(images, 30);
    for d in ["pin_src_0", "pan_src_0", "target"] {
        assert!(a.join(d).is_dir());
    }
    assert!(!a.join("target/labels").exists());

    let refused = panmorph(&["gen-data", "--config", s(&cfg), "--out", s(&a)]);
    assert_eq!(refused.status.code(), Some(2));
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&a), "--counts", "2,2,2", "--force"]);
    let images = tree(&a).iter().filter(|(p, _)| p.contains("images")).count();
    assert_eq!(images, 6);
}

#[test]
fn bad_input_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    fs::write(&bad, "eta = 1.5\n").unwrap();
    let out = panmorph(&["gen-data", "--config", s(&bad), "--out", s(&dir.path().join("x"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(!dir.path().join("x").exists(), "nothing is written before the config validates");

    let cfg = dir.path().join("cfg.toml");
    fs::write(&cfg, TINY).unwrap();
    let data = dir.path().join("data");
    ok(&["gen-data", "--config", s(&cfg), "--out", s(&data), "--counts", "2,2,2"]);
    let out = panmorph(&[
        "adapt",
        "--config",
        s(&cfg),
        "--data",
        s(&data),
        "--pretrained",
        s(&dir.path().join("missing.pmck")),
        "--out",
        s(&dir.path().join("run")),
    ]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.pmck"));
}

#[test]
fn pipeline_resume_eval_and_viz() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let cfg = p("cfg.toml");
    fs::write(&cfg, TINY).unwrap();
    let c = s(&cfg);
    ok(&["gen-data", "--config", c, "--out", s(&p("data")), "--counts", "3,3,3"]);
    ok(&["pretrain", "--config", c, "--data", s(&p("data")), "--out", s(&p("pre"))]);
    let pre = p("pre/pretrained.pmck");
    assert!(pre.is_file());

    let data = p("data");
    let adapt = |out: &str, extra: &[&str]| {
        let out = p(out);
        let mut args = vec!["adapt", "--config", c, "--data", s(&data), "--out", s(&out)];
        args.extend_from_slice(extra);
        ok(&args);
    };
    adapt("full", &["--pretrained", s(&pre)]);
    adapt("part", &["--pretrained", s(&pre), "--stop-at", "3"]);
    let ckpt = p("part/checkpoints/ckpt_000003.pmck");
    assert!(ckpt.is_file());
    assert!(!p("part/final.pmck").exists());
    adapt("part", &["--resume", s(&ckpt)]);
    let full = fs::read_to_string(p("full/ledger.csv")).unwrap();
    assert_eq!(full, fs::read_to_string(p("part/ledger.csv")).unwrap());
    assert_eq!(full.lines().filter(|l| !l.starts_with('#')).count(), 1 + 6);
    assert_eq!(fs::read(p("full/final.pmck")).unwrap(), fs::read(p("part/final.pmck")).unwrap());

    let table = ok(&[
        "eval",
        "--config",
        c,
        "--data",
        s(&p("data")),
        "--checkpoint",
        s(&p("full/final.pmck")),
        "--out",
        s(&p("eval")),
    ]);
    assert!(table.contains("| model |"));
    let metrics = fs::read_to_string(p("eval/metrics.csv")).unwrap();
    assert!(metrics.starts_with("metric,value\nmiou,"));
    assert_eq!(metrics.lines().filter(|l| l.starts_with("miou_angle_")).count(), 8);

    let inputs = [p("data/pin_src_0/images/0000.png"), p("data/pin_src_0/images/0001.png")];
    let fixed = p("data/pan_src_0/images/0000.png");
    ok(&[
        "viz-deform",
        "--checkpoint",
        s(&p("full/final.pmck")),
        "--inputs",
        s(&inputs[0]),
        s(&inputs[1]),
        "--fixed",
        s(&fixed),
        "--out",
        s(&p("viz")),
    ]);
    ok(&[
        "viz",
        "--what",
        "gating",
        "--checkpoint",
        s(&p("full/final.pmck")),
        "--inputs",
        s(&inputs[0]),
        s(&inputs[1]),
        "--out",
        s(&p("viz")),
    ]);
    let mut written: Vec<String> = fs::read_dir(p("viz"))
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    written.sort();
    assert_eq!(written, ["0000_deform.png", "0000_gating.png", "0001_deform.png", "0001_gating.png"]);
}

#[test]
fn paper_profile_recorded_in_ledger_header() {
    let dir = tempfile::tempdir().unwrap();
    let p = |name: &str| dir.path().join(name);
    let cfg = p("cfg.toml");
    fs::write(&cfg, TINY.replace("max_its = 6\n", "")).unwrap();
    let c = s(&cfg);
    ok(&["gen-data", "--config", c, "--out", s(&p("data")), "--counts", "2,2,2"]);
    ok(&["pretrain", "--config", c, "--data", s(&p("data")), "--out", s(&p("pre"))]);
    ok(&[
        "adapt",
        "--config",
        c,
        "--profile",
        "paper",
        "--data",
        s(&p("data")),
        "--pretrained",
        s(&p("pre/pretrained.pmck")),
        "--out",
        s(&p("run")),
        "--stop-at",
        "1",
    ]);
    let ledger = fs::read_to_string(p("run/ledger.csv")).unwrap();
    for line in ["# alpha = 20.0", "# profile = \"paper\"", "# gamma = 0.999", "# eta = 0.95", "# max_its = 40000"] {
        assert!(ledger.contains(line), "ledger header misses {line}");
    }
}
