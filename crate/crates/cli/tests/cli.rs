use std::path::Path;
use std::process::{Command, Output};

const TINY: [&str; 16] = [
    "--set",
    "stem_channels=8",
    "--set",
    "block_channels=8,8,8,12",
    "--set",
    "pathway_width=8",
    "--set",
    "rcb_inner=4",
    "--set",
    "offset_head_width=8",
    "--set",
    "head_width=8",
    "--batch-size",
    "2",
    "--crop",
    "32x32",
];

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_alignseg"))
        .args(args)
        .env_remove("ALIGNSEG_SEED")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed:\n{}\n{}",
        String::from_utf8_lossy(&out.stdout),
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn gen(dir: &Path) {
    ok(&["gen-data", "--out", s(dir), "--train", "4", "--val", "2", "--size", "32x32", "--seed", "3"]);
}

#[test]
fn gen_data_is_deterministic_and_refuses_to_overwrite() {
    let tmp = tempfile::tempdir().unwrap();
    let (a, b) = (tmp.path().join("a"), tmp.path().join("b"));
    gen(&a);
    gen(&b);
    for f in ["manifest.txt", "images/train_00003.ppm", "labels/val_00001.pgm"] {
        assert_eq!(std::fs::read(a.join(f)).unwrap(), std::fs::read(b.join(f)).unwrap(), "{f}");
    }
    assert!(!run(&["gen-data", "--out", s(&a)]).status.success());
}

#[test]
fn train_resume_eval_and_viz() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    let full = tmp.path().join("full");
    let part = tmp.path().join("part");
    let mut args = vec!["train", "--data", s(&data), "--max-iter", "4", "--eval-every", "2"];
    args.extend(TINY);
    let with_out = |out: &Path, extra: &[&str]| {
        let mut a: Vec<String> = args.iter().map(|x| x.to_string()).collect();
        a.extend(["--out".to_string(), s(out).to_string()]);
        a.extend(extra.iter().map(|x| x.to_string()));
        a
    };
    let full_args = with_out(&full, &[]);
    ok(&full_args.iter().map(String::as_str).collect::<Vec<_>>());
    let part_args = with_out(&part, &["--stop-after", "1"]);
    ok(&part_args.iter().map(String::as_str).collect::<Vec<_>>());
    assert!(!part.join("metrics.txt").exists());
    ok(&["train", "--data", s(&data), "--out", s(&part), "--resume"]);
    for f in ["log.csv", "last.bin", "metrics.txt", "resolved.cfg"] {
        assert_eq!(std::fs::read(full.join(f)).unwrap(), std::fs::read(part.join(f)).unwrap(), "{f}");
    }
    let log = std::fs::read_to_string(full.join("log.csv")).unwrap();
    assert!(log.starts_with("iter,lr,loss,miou\n"));
    assert_eq!(log.lines().count(), 5);

    // The resolved configuration replays the run exactly.
    let replay = tmp.path().join("replay");
    ok(&["train", "--data", s(&data), "--out", s(&replay), "--config", s(&full.join("resolved.cfg"))]);
    assert_eq!(std::fs::read(full.join("last.bin")).unwrap(), std::fs::read(replay.join("last.bin")).unwrap());

    let ckpt = full.join("last.bin");
    let report = ok(&["eval", "--ckpt", s(&ckpt), "--data", s(&data), "--ms", "--flip"]);
    assert!(report.contains("miou") && report.contains("boundary_f"), "{report}");

    let viz = tmp.path().join("viz");
    let image = data.join("images/val_00000.ppm");
    let listing = ok(&["viz-offsets", "--ckpt", s(&ckpt), "--image", s(&image), "--out", s(&viz)]);
    assert!(listing.contains("step1.delta_f") && listing.contains("context.delta"), "{listing}");
    assert!(viz.join("step4.delta_a.ppm").exists());

    let other = tmp.path().join("other");
    ok(&["gen-data", "--out", s(&other), "--train", "1", "--val", "1", "--size", "32x32", "--classes", "4"]);
    let out = run(&["eval", "--ckpt", s(&ckpt), "--data", s(&other)]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("classes"));
}

#[test]
fn unknown_keys_and_flags_are_errors() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    let out = run(&["train", "--data", s(&data), "--out", s(&tmp.path().join("r")), "--set", "lr=1"]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("lr0"));
    assert!(!run(&["train", "--data", s(&data), "--out", "x", "--learning-rate", "1"]).status.success());
}

#[test]
fn flags_override_the_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    gen(&data);
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "max_iter = 50\nlr0 = 0.5\n").unwrap();
    let out = tmp.path().join("r");
    let mut args = vec!["train", "--data", s(&data), "--out", s(&out), "--config", s(&cfg), "--max-iter", "1"];
    args.extend(TINY);
    ok(&args);
    let resolved = std::fs::read_to_string(out.join("resolved.cfg")).unwrap();
    assert!(resolved.contains("max_iter = 1\n") && resolved.contains("lr0 = 0.5\n"), "{resolved}");
}

#[test]
fn grad_check_exit_status() {
    let out = ok(&["grad-check", "--scope", "ops"]);
    assert!(out.lines().filter(|l| l.starts_with("PASS")).count() >= 10, "{out}");
    let bad = run(&["grad-check", "--scope", "ops", "--corrupt", "conv2d"]);
    assert!(!bad.status.success());
    assert!(String::from_utf8_lossy(&bad.stdout).contains("FAIL conv2d"));
}

#[test]
fn bench_prints_csv() {
    let out = ok(&["bench", "--op", "align", "--sizes", "8x8x4,16x16x4", "--reps", "2", "--warmup", "0"]);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "op,C,H,W,ms_per_call,GB_per_s");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("align,4,8,8,"));
    assert!(!run(&["bench", "--op", "rgs", "--sizes", "7x8x4"]).status.success());
    ok(&["--sequential", "bench", "--op", "conv", "--sizes", "8x8x4", "--reps", "1"]);
}
