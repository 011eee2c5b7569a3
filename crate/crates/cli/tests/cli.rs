use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const SMALL: &[&str] = &[
    "--set", "image_size=16",
    "--set", "count=6",
    "--set", "depth=2",
    "--set", "base_channels=4",
    "--set", "learning_rate=0.001",
    "--epochs", "2",
];

fn fcce(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_fcce")).args(args).env_remove("FCCE_THREADS").output().unwrap()
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

/// Subcommand, then the small defaults, then the caller's arguments, so
/// later `--set` pairs win.
fn with_small<'a>(args: &[&'a str]) -> Vec<&'a str> {
    args[..1].iter().chain(SMALL).chain(&args[1..]).copied().collect()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn gen_data_then_fcm() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    let out = fcce(&with_small(&["gen-data", "--out", path(&data)]));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["manifest.txt", "img_0000.pgm", "lbl_0005.pgm", "mem_0003.bin"] {
        assert!(data.join(f).exists(), "{f}");
    }

    let fcm_out = tmp.path().join("fcm");
    let out = fcce(&["fcm", "--input", path(&data.join("img_0002.pgm")), "--out", path(&fcm_out)]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let csv = fs::read_to_string(fcm_out.join("fcm.csv")).unwrap();
    let mut lines = csv.lines();
    assert_eq!(lines.next(), Some("iter,objective"));
    let objective: Vec<f64> = lines.map(|l| l.split(',').nth(1).unwrap().parse().unwrap()).collect();
    assert!(objective.len() >= 2);
    assert!(objective.windows(2).all(|w| w[1] <= w[0] + 1e-9));
    assert!(fcm_out.join("memberships.bin").exists());
    assert!(fcm_out.join("fcm_labels.pgm").exists());
}

#[test]
fn train_then_eval_from_disk() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    assert_eq!(code(&fcce(&with_small(&["gen-data", "--out", path(&data)]))), 0);

    let run = tmp.path().join("run");
    let out = fcce(&with_small(&[
        "train", "--data", path(&data), "--out", path(&run), "--loss", "fcce", "--set", "membership_source=fcm_fixed",
    ]));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let metrics = fs::read_to_string(run.join("metrics.csv")).unwrap();
    assert_eq!(metrics.lines().count(), 3);
    assert!(metrics.starts_with("epoch,loss,AC,DC,IoU,AC_val,DC_val,IoU_val"));
    assert!(fs::read_to_string(run.join("config.txt")).unwrap().contains("membership_source = fcm_fixed"));

    let eval = tmp.path().join("eval");
    let ckpt = run.join("best.ckpt");
    let out = fcce(&with_small(&["eval", "--data", path(&data), "--checkpoint", path(&ckpt), "--out", path(&eval)]));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(eval.join("pred_0000.pgm").exists() && eval.join("pred_0005.pgm").exists());
    assert!(fs::read_to_string(eval.join("eval.csv")).unwrap().starts_with("images,AC,DC,IoU"));
}

#[test]
fn train_is_byte_reproducible() {
    let tmp = tempfile::tempdir().unwrap();
    let runs: Vec<_> = (0..2).map(|k| tmp.path().join(format!("r{k}"))).collect();
    for r in &runs {
        let out = fcce(&with_small(&["train", "--out", path(r), "--seed", "5", "--set", "dropout=0.2"]));
        assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    }
    for f in ["metrics.csv", "best.ckpt"] {
        assert_eq!(fs::read(runs[0].join(f)).unwrap(), fs::read(runs[1].join(f)).unwrap(), "{f}");
    }
}

#[test]
fn gradcheck_reports_every_mode() {
    let out = fcce(&["gradcheck", "--instances", "3"]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let text = String::from_utf8(out.stdout).unwrap();
    assert!(text.starts_with("mode,max_rel_err\n"));
    for mode in ["cce", "fcce_blend", "deep_supervision", "conv2d_same", "composite"] {
        assert!(text.lines().any(|l| l.starts_with(&format!("{mode},"))), "{mode}");
    }
}

#[test]
fn ablate_writes_table() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fcce(&with_small(&["ablate", "--out", path(tmp.path()), "--seeds", "0,1,2", "--lambdas", "0.5"]));
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let table = fs::read_to_string(tmp.path().join("ablation.csv")).unwrap();
    assert_eq!(table.lines().count(), 7);
    assert!(String::from_utf8(out.stdout).unwrap().contains("fcce_wins"));
}

#[test]
fn configuration_errors_exit_2() {
    let tmp = tempfile::tempdir().unwrap();
    let o = path(tmp.path());
    for args in [
        vec!["train", "--out", o, "--set", "colour=red"],
        vec!["train", "--out", o, "--epochs", "0"],
        vec!["train", "--out", o, "--config", "/nonexistent/run.cfg"],
        vec!["train", "--out", o, "--model", "resnet"],
        vec!["ablate", "--out", o, "--seeds", "1,2"],
        vec!["train", "--out", o, "--data", "/nonexistent/data"],
        vec!["train", "--bogus-flag"],
    ] {
        let out = fcce(&args);
        assert_eq!(code(&out), 2, "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    }
    let out = Command::new(env!("CARGO_BIN_EXE_fcce")).args(["gradcheck", "--instances", "1"]).env("FCCE_THREADS", "lots").output().unwrap();
    assert_eq!(code(&out), 2);
}

#[test]
fn numeric_failure_exits_3() {
    let tmp = tempfile::tempdir().unwrap();
    let out = fcce(&with_small(&["train", "--out", path(tmp.path()), "--set", "learning_rate=1e30"]));
    assert_eq!(code(&out), 3, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn thread_override_is_accepted() {
    let tmp = tempfile::tempdir().unwrap();
    let out = Command::new(env!("CARGO_BIN_EXE_fcce"))
        .args(with_small(&["gen-data", "--out", path(tmp.path())]))
        .env("FCCE_THREADS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}
