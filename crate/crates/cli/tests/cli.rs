use std::fs;
use std::path::Path;
use std::process::{Command, Output};

const TINY: &[&str] = &[
    "--set",
    "task.train_samples=48",
    "--set",
    "task.test_samples=24",
    "--set",
    "task.frames=10",
    "--set",
    "task.d_f=4",
    "--set",
    "model.d_h=8",
    "--set",
    "model.heads=2",
    "--set",
    "model.bank_size=4",
    "--set",
    "probe.epochs=2",
];

fn mmixer(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mmixer"))
        .args(args)
        .env_remove("MMIXER_SEED")
        .env_remove("RUST_LOG")
        .output()
        .expect("binary runs")
}

fn text(bytes: &[u8]) -> String {
    String::from_utf8_lossy(bytes).into_owned()
}

fn train(out: &Path, extra: &[&str]) -> Output {
    let mut args = vec!["train", "--out", out.to_str().unwrap()];
    args.extend_from_slice(TINY);
    args.extend_from_slice(extra);
    mmixer(&args)
}

fn field<'a>(stdout: &'a str, key: &str) -> &'a str {
    stdout
        .lines()
        .find_map(|l| l.strip_prefix(key).map(str::trim))
        .unwrap_or_else(|| panic!("no '{key}' in output:\n{stdout}"))
}

#[test]
fn train_writes_artifacts_and_eval_reproduces_them() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train(&out, &["--task", "xor", "--content", "cfem", "--fusion", "bank", "--epochs", "2", "--seed", "1"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    for f in ["metrics.csv", "best.mmx", "last.mmx", "final.mmx", "run.cfg"] {
        assert!(out.join(f).is_file(), "missing {f}");
    }
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "step,split,loss,acc,acc_c0,acc_c1");
    // Epoch 0 has a test row only; each epoch after adds train then test.
    assert_eq!(lines.len(), 1 + 1 + 2 * 2);
    assert!(lines[1].starts_with("0,test,"));
    assert!(lines[2].starts_with("6,train,"), "{}", lines[2]);
    assert!(lines[5].starts_with("12,test,"), "{}", lines[5]);
    let final_acc = lines[5].split(',').nth(3).unwrap();
    assert_eq!(field(&text(&o.stdout), "final test accuracy:"), final_acc);

    let eval_csv = dir.path().join("eval.csv");
    let ckpt = out.join("final.mmx");
    let e = mmixer(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--csv", eval_csv.to_str().unwrap()]);
    assert!(e.status.success(), "{}", text(&e.stderr));
    let stdout = text(&e.stdout);
    assert_eq!(field(&stdout, "top1:"), final_acc);
    assert!(stdout.contains("probe stream 1 accuracy:"), "{stdout}");
    // Per-class recall weighted by class counts gives top-1.
    let samples: f64 = field(&stdout, "samples:").parse().unwrap();
    let mut weighted = 0.0;
    for k in 0..2 {
        let v = field(&stdout, &format!("acc_c{k}:"));
        let (acc, n) = v.split_once(" (n=").unwrap();
        weighted += acc.parse::<f64>().unwrap() * n.trim_end_matches(')').parse::<f64>().unwrap();
    }
    assert!((weighted / samples - final_acc.parse::<f64>().unwrap()).abs() < 1e-12);
    let written = fs::read_to_string(eval_csv).unwrap();
    assert_eq!(written.lines().nth(1).unwrap(), lines[5]);
}

#[test]
fn same_seed_gives_identical_metrics_bytes() {
    let dir = tempfile::tempdir().unwrap();
    let run = |name: &str, seed: &str| {
        let out = dir.path().join(name);
        let o = train(&out, &["--epochs", "2", "--seed", seed, "--no-probes"]);
        assert!(o.status.success(), "{}", text(&o.stderr));
        fs::read(out.join("metrics.csv")).unwrap()
    };
    let a = run("a", "4");
    assert_eq!(a, run("b", "4"));
    assert_ne!(a, run("c", "5"));
}

#[test]
fn zero_epochs_writes_the_initial_evaluation_only() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    let o = train(&out, &["--epochs", "0"]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let csv = fs::read_to_string(out.join("metrics.csv")).unwrap();
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines.len(), 2);
    assert!(lines[1].starts_with("0,test,"));
}

#[test]
fn seed_precedence_is_file_then_env_then_flag() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("c.cfg");
    fs::write(&cfg, "seed = 1\n[train]\nepochs = 0\n").unwrap();
    let seed_of = |out: &Path| {
        let text = fs::read_to_string(out.join("run.cfg")).unwrap();
        text.lines().find_map(|l| l.strip_prefix("seed = ").map(str::to_string)).unwrap()
    };
    let base = |out: &Path| {
        let mut c = Command::new(env!("CARGO_BIN_EXE_mmixer"));
        c.args(["train", "--config", cfg.to_str().unwrap(), "--out", out.to_str().unwrap()]).args(TINY);
        c
    };
    let a = dir.path().join("a");
    assert!(base(&a).env_remove("MMIXER_SEED").output().unwrap().status.success());
    assert_eq!(seed_of(&a), "1");
    let b = dir.path().join("b");
    assert!(base(&b).env("MMIXER_SEED", "5").output().unwrap().status.success());
    assert_eq!(seed_of(&b), "5");
    let c = dir.path().join("c");
    assert!(base(&c).env("MMIXER_SEED", "5").args(["--seed", "9"]).output().unwrap().status.success());
    assert_eq!(seed_of(&c), "9");
}

#[test]
fn missing_files_exit_2_with_the_path() {
    let o = mmixer(&["eval", "--checkpoint", "/nonexistent/dir/final.mmx"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("/nonexistent/dir/final.mmx"));
    let o = mmixer(&["train", "--config", "/nonexistent/run.cfg"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("/nonexistent/run.cfg"));
}

#[test]
fn unknown_keys_and_bad_configs_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.cfg");
    fs::write(&cfg, "[train]\nepochs = 1\nlearning_rate = 0.1\n").unwrap();
    let o = mmixer(&["train", "--config", cfg.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("train.learning_rate"), "{}", text(&o.stderr));

    let out = dir.path().join("never");
    let o = mmixer(&["train", "--out", out.to_str().unwrap(), "--d-h", "9"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("d_h"), "{}", text(&o.stderr));
    assert!(!out.exists(), "validation must precede any output");

    let o = mmixer(&["train", "--content", "fancy"]);
    assert_eq!(o.status.code(), Some(2));
    let o = mmixer(&["frobnicate"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn gradcheck_passes_and_catches_an_injected_fault() {
    let o = mmixer(&["gradcheck"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", text(&o.stdout), text(&o.stderr));
    assert!(text(&o.stdout).contains("gradcheck passed"));
    let o = mmixer(&["gradcheck", "--inject-fault"]);
    assert_eq!(o.status.code(), Some(1));
    let err = text(&o.stderr);
    assert!(err.contains("FAILED") && err.contains("mcu"), "{err}");
}

#[test]
fn eval_rejects_an_incompatible_task() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("run");
    assert!(train(&out, &["--epochs", "0"]).status.success());
    let ckpt = out.join("final.mmx");
    let o = mmixer(&["eval", "--checkpoint", ckpt.to_str().unwrap(), "--set", "task.frames=12"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(text(&o.stderr).contains("task.frames"), "{}", text(&o.stderr));
}

#[test]
fn gen_data_writes_a_reusable_cache() {
    let dir = tempfile::tempdir().unwrap();
    let cache = dir.path().join("data.bin");
    let mut args = vec!["gen-data", "--path", cache.to_str().unwrap(), "--seed", "3"];
    args.extend_from_slice(TINY);
    let o = mmixer(&args);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert!(text(&o.stdout).contains("72 samples"));
    let before = fs::read(&cache).unwrap();

    let out = dir.path().join("run");
    let o = train(&out, &["--epochs", "1", "--seed", "3", "--no-probes", "--data-cache", cache.to_str().unwrap()]);
    assert!(o.status.success(), "{}", text(&o.stderr));
    assert_eq!(fs::read(&cache).unwrap(), before);
}

#[test]
fn ablate_prints_and_writes_one_row_per_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("ab");
    let mut args = vec![
        "ablate",
        "--out",
        out.to_str().unwrap(),
        "--epochs",
        "1",
        "--seeds",
        "2",
        "--rows",
        "cfem+bank,self+concat",
    ];
    args.extend_from_slice(TINY);
    let o = mmixer(&args);
    assert!(o.status.success(), "{}", text(&o.stderr));
    let stdout = text(&o.stdout);
    let lines: Vec<&str> = stdout.lines().collect();
    assert_eq!(lines[0], "content\tfusion\ttest_acc\tstream0_acc\tstream1_acc\tsplit_hash");
    assert_eq!(lines.len(), 3);
    assert!(lines[1].starts_with("cfem\tbank\t") && lines[2].starts_with("self\tconcat\t"));
    let hash = |l: &str| l.rsplit('\t').next().unwrap().to_string();
    assert_eq!(hash(lines[1]), hash(lines[2]));
    assert_eq!(fs::read_to_string(out.join("ablation.tsv")).unwrap(), stdout);
}
