use std::fs;
use std::path::Path;
use std::process::{Command, Output};

fn kdseg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_kdseg"))
        .args(args)
        .env("KDSEG_LOG", "error")
        .output()
        .expect("spawn kdseg")
}

fn ok(args: &[&str]) -> String {
    let out = kdseg(args);
    assert!(out.status.success(), "kdseg {args:?} failed: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn gen(dir: &Path, classes: &str) {
    let d = dir.to_str().unwrap();
    ok(&["gen", "--classes", classes, "--images", "60", "--size", "32", "--seed", "3", "--out", d]);
}

fn run(data: &Path, out: &Path, extra: &[&str]) {
    let mut args = vec![
        "run",
        "--data",
        data.to_str().unwrap(),
        "--out",
        out.to_str().unwrap(),
        "--steps-per-class",
        "2",
        "--crop",
        "32",
        "--batch-size",
        "2",
    ];
    args.extend_from_slice(extra);
    ok(&args);
}

#[test]
fn gen_then_verify() {
    let tmp = tempfile::tempdir().unwrap();
    let d = tmp.path().join("d");
    gen(&d, "6");
    let ds = d.to_str().unwrap();
    let base = ["gen", "--classes", "6", "--images", "60", "--size", "32", "--seed", "3", "--out", ds];
    let mut verify = base.to_vec();
    verify.push("--verify");
    assert!(ok(&verify).contains("verified"));

    let mut other_seed = verify.clone();
    other_seed[8] = "4";
    assert_eq!(kdseg(&other_seed).status.code(), Some(1));

    let victim = d.join("labels/img00010.pgm");
    let mut bytes = fs::read(&victim).unwrap();
    *bytes.last_mut().unwrap() ^= 1;
    fs::write(&victim, bytes).unwrap();
    let out = kdseg(&verify);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).contains("labels/img00010.pgm"));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(kdseg(&["gen", "--classes", "6"]).status.code(), Some(2));
    assert_eq!(kdseg(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(kdseg(&["run", "--data", "x", "--out", "y", "--mode", "maybe"]).status.code(), Some(2));
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("never");
    let o = out.to_str().unwrap();
    for bad in [
        vec!["--lambda", "-1"],
        vec!["--scenario", "add-everything"],
        vec!["--crop", "30"],
        vec!["--dec-branches", "5"],
    ] {
        let mut args = vec!["run", "--data", "missing", "--out", o];
        args.extend(bad.iter().copied());
        assert_eq!(kdseg(&args).status.code(), Some(2), "{bad:?}");
        assert!(!out.exists(), "{bad:?} left an output directory");
    }
}

#[test]
fn runtime_errors_exit_one_without_output() {
    let tmp = tempfile::tempdir().unwrap();
    let out = tmp.path().join("run");
    let nowhere = tmp.path().join("nowhere");
    let args = ["run", "--data", nowhere.to_str().unwrap(), "--out", out.to_str().unwrap()];
    let o = kdseg(&args);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("nowhere"));
    assert!(!out.exists());
}

#[test]
fn runs_are_deterministic_and_self_describing() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, "6");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    let flags = ["--distill", "cls-t", "--freeze", "encoder"];
    run(&data, &a, &flags);
    run(&data, &b, &flags);
    for name in ["M0.ckpt", "M1.ckpt", "metrics.csv", "train.log", "plan.txt", "config.toml"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let config = fs::read_to_string(a.join("config.toml")).unwrap();
    assert!(config.contains("scenario = \"add-last-1\""));
    assert!(config.contains("freeze = \"encoder\""));
    let csv = fs::read_to_string(a.join("metrics.csv")).unwrap();
    assert_eq!(csv.lines().count(), 3);
    assert!(csv.lines().nth(2).unwrap().starts_with("E_F cls-t,1,"));

    // A second run into a used directory is refused.
    let args = ["run", "--data", data.to_str().unwrap(), "--out", a.to_str().unwrap()];
    assert_eq!(kdseg(&args).status.code(), Some(2));
}

#[test]
fn zero_lambda_is_fine_tuning() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, "6");
    let (a, b, c) = (tmp.path().join("a"), tmp.path().join("b"), tmp.path().join("c"));
    run(&data, &a, &[]);
    run(&data, &b, &["--distill", "none", "--lambda", "0"]);
    run(&data, &c, &["--distill", "enc", "--lambda", "0"]);
    let m1 = fs::read(a.join("M1.ckpt")).unwrap();
    assert_eq!(fs::read(b.join("M1.ckpt")).unwrap(), m1);
    assert_eq!(fs::read(c.join("M1.ckpt")).unwrap(), m1);
}

#[test]
fn report_merges_runs() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("d");
    gen(&data, "6");
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    run(&data, &a, &[]);
    run(&data, &b, &["--distill", "cls-t", "--name", "distilled"]);

    let single = tmp.path().join("single.csv");
    ok(&["report", "--runs", a.to_str().unwrap(), "--out", single.to_str().unwrap()]);
    assert_eq!(fs::read(&single).unwrap(), fs::read(a.join("metrics.csv")).unwrap());

    let both = tmp.path().join("both.csv");
    let csv_b = b.join("metrics.csv");
    ok(&["report", "--runs", a.to_str().unwrap(), csv_b.to_str().unwrap(), "--out", both.to_str().unwrap()]);
    let text = fs::read_to_string(&both).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 5);
    let header: Vec<&str> = lines[0].split(',').collect();
    assert_eq!(header[..2], ["method", "step"]);
    assert_eq!(header[header.len() - 5..], ["mIoU old", "mIoU new", "mIoU", "mPA", "mCA"]);
    assert_eq!(header.len(), 2 + 6 + 5);
    assert!(lines[3].starts_with("distilled,0,") && lines[4].starts_with("distilled,1,"));

    let other = tmp.path().join("d5");
    gen(&other, "5");
    let c = tmp.path().join("c");
    run(&other, &c, &[]);
    let bad = tmp.path().join("bad.csv");
    let o = kdseg(&[
        "report",
        "--runs",
        a.to_str().unwrap(),
        c.to_str().unwrap(),
        "--out",
        bad.to_str().unwrap(),
    ]);
    assert_eq!(o.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&o.stderr).contains("classes"));
    assert!(!bad.exists());
}
