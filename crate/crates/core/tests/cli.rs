use std::path::Path;
use std::process::{Command, Output};

fn dynmoe(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_dynmoe"))
        .args(args)
        .current_dir(cwd)
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

/// Generates a small corpus and a tiny config file in `dir`.
fn setup(dir: &Path) -> String {
    let o = dynmoe(
        &[
            "gen-corpus",
            "--out-dir",
            "corpus",
            "--seed",
            "3",
            "--bytes",
            "60000",
        ],
        dir,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let data_line = stdout(&o);
    assert!(data_line.starts_with("data = prose="), "{data_line}");
    let cfg = format!(
        "layers = 2\nhidden_dim = 32\nheads = 2\nhead_dim = 16\ncontext_length = 32\nexperts = 4\n\
         ffn_dim = 64\ninit_std = 0.02\nsteps = 12\nbatch_size = 2\nseq_len = 16\nwarmup_steps = 3\n\
         stats_interval = 4\ncheckpoint_interval = 5\neval_tokens = 512\n{data_line}"
    );
    std::fs::write(dir.join("tiny.conf"), cfg).unwrap();
    "tiny.conf".to_string()
}

fn checksum_line(o: &Output) -> String {
    stdout(o)
        .lines()
        .last()
        .unwrap()
        .split_whitespace()
        .next()
        .unwrap()
        .to_string()
}

#[test]
fn usage_errors_and_help() {
    let dir = tempfile::tempdir().unwrap();
    let o = dynmoe(&["train", "--no-such-flag"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stderr(&o).contains("Usage"), "{}", stderr(&o));

    let o = dynmoe(&["--help"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    for sub in [
        "train",
        "eval",
        "sweep-p",
        "analyze",
        "inspect-checkpoint",
        "gen-corpus",
    ] {
        assert!(stdout(&o).contains(sub), "help lacks {sub}");
    }

    let o = dynmoe(&["frobnicate"], dir.path());
    assert_eq!(o.status.code(), Some(1));
}

#[test]
fn bad_config_names_the_key() {
    let dir = tempfile::tempdir().unwrap();
    std::fs::write(dir.path().join("bad.conf"), "layers = 2\nbogus_key = 7\n").unwrap();
    let o = dynmoe(&["train", "--config", "bad.conf"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("bogus_key"), "{}", stderr(&o));

    std::fs::write(dir.path().join("bad2.conf"), "p = 1.5\n").unwrap();
    let o = dynmoe(&["train", "--config", "bad2.conf"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("p"), "{}", stderr(&o));

    let o = dynmoe(
        &["inspect-checkpoint", "--checkpoint", "missing.dmoe"],
        dir.path(),
    );
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn end_to_end_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let conf = setup(d);

    let a = dynmoe(
        &["train", "--config", &conf, "--seed", "4", "--out-dir", "a"],
        d,
    );
    assert!(a.status.success(), "{}", stderr(&a));
    let b = dynmoe(
        &["train", "--config", &conf, "--seed", "4", "--out-dir", "b"],
        d,
    );
    assert!(b.status.success(), "{}", stderr(&b));
    assert_eq!(checksum_line(&a), checksum_line(&b));
    assert_eq!(
        std::fs::read(d.join("a/final.dmoe")).unwrap(),
        std::fs::read(d.join("b/final.dmoe")).unwrap()
    );
    let c = dynmoe(
        &["train", "--config", &conf, "--seed", "5", "--out-dir", "c"],
        d,
    );
    assert_ne!(checksum_line(&a), checksum_line(&c));
    for f in [
        "metrics.jsonl",
        "training.dat",
        "ckpt-000005.dmoe",
        "ckpt-000010.dmoe",
    ] {
        assert!(d.join("a").join(f).exists(), "missing {f}");
    }

    let o = dynmoe(&["inspect-checkpoint", "--checkpoint", "a/final.dmoe"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    let text = stdout(&o);
    assert!(text.contains("step 12\n"), "{text}");
    assert!(text.contains(&format!("file_sha256 {}", checksum_line(&a))));
    let (_, embedded) = text.split_once("--- config ---\n").unwrap();
    let cfg = dynmoe::config::RunConfig::from_text(embedded).unwrap();
    assert_eq!(cfg.to_text(), embedded);
    assert_eq!(cfg.train.seed, 4);
    assert_eq!(cfg.model.layers, 2);

    let o = dynmoe(
        &[
            "sweep-p",
            "--checkpoint",
            "a/final.dmoe",
            "--p",
            "0.1,0.2,0.3,0.4,0.5,0.6,0.7",
            "--out-dir",
            "sw",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    let report = dynmoe::analysis::read_sweep_csv(&d.join("sw/sweep.csv")).unwrap();
    assert_eq!(report.rows.len(), 7);
    assert_eq!(stdout(&o).lines().count(), 8);

    let o = dynmoe(
        &[
            "analyze",
            "--checkpoint",
            "a/final.dmoe",
            "--out-dir",
            "an",
            "--metrics",
            "a/metrics.jsonl",
            "--dump",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    for f in [
        "layers.csv",
        "tokens.csv",
        "tokens_top.csv",
        "sources.csv",
        "byte_classes.csv",
        "training.dat",
    ] {
        assert!(d.join("an").join(f).exists(), "missing {f}");
    }
    assert!(stdout(&o).contains("layer 1 mean_experts"));

    let o = dynmoe(&["eval", "--checkpoint", "a/final.dmoe"], d);
    assert!(o.status.success(), "{}", stderr(&o));
    assert!(stdout(&o).starts_with("eval_loss_nats "));

    let o = dynmoe(
        &[
            "train",
            "--checkpoint",
            "a/ckpt-000005.dmoe",
            "--out-dir",
            "r",
        ],
        d,
    );
    assert!(o.status.success(), "{}", stderr(&o));
    assert_eq!(checksum_line(&o), checksum_line(&a));

    let o = dynmoe(&["train", "--checkpoint", "a/final.dmoe", "--seed", "1"], d);
    assert_eq!(o.status.code(), Some(1));
}
