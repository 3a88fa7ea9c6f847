use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dynmoe::config::{parse_flat, RunConfig};
use dynmoe::trainer::checkpoint::Checkpoint;
use dynmoe::trainer::data::{Corpus, DataSpec};
use dynmoe::trainer::metrics::read_metrics;
use dynmoe::trainer::{checkpoint_path, run_to_completion, train, Trainer};
use dynmoe::Error;

fn tiny(steps: u64) -> RunConfig {
    let mut cfg = RunConfig::default();
    let overrides = parse_flat(&format!(
        "layers = 2\nhidden_dim = 32\nheads = 2\nhead_dim = 16\ncontext_length = 32\n\
         experts = 4\nffn_dim = 64\ninit_std = 0.02\nbatch_size = 4\nseq_len = 16\n\
         warmup_steps = 10\nstats_interval = 5\ncheckpoint_interval = 10\nsteps = {steps}\n"
    ))
    .unwrap();
    cfg.apply(&overrides).unwrap();
    cfg
}

fn text_corpus(dir: &Path) -> Vec<DataSpec> {
    dynmoe::corpus::write_corpus(dir, 7, 60_000).unwrap()
}

#[test]
fn learns_an_alternating_sequence() {
    let mut cfg = tiny(200);
    cfg.set("lr_peak", 1e-2).unwrap();
    cfg.set("lr_final", 1e-3).unwrap();
    let corpus = Corpus::from_bytes(vec![("ab".into(), 1.0, b"ab".repeat(4000))], 0.1).unwrap();
    let mut trainer = Trainer::with_corpus(cfg, corpus).unwrap();
    let mut last = Vec::new();
    while !trainer.is_done() {
        let rec = trainer.train_step().unwrap();
        last.push(rec.losses.loss_lm);
    }
    let tail: f64 = last[last.len() - 20..].iter().sum::<f64>() / 20.0;
    assert!(tail < 0.2, "final loss {tail}");
    assert!(last[0] > 4.0, "initial loss {}", last[0]);
}

#[test]
fn metrics_and_checkpoints_on_schedule() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(23);
    cfg.train.data = text_corpus(&dir.path().join("data"));
    let out = dir.path().join("run");
    let outcome = train(&cfg, &out).unwrap();
    assert_eq!(outcome.history.len(), 23);

    let (config_line, records) = read_metrics(&outcome.metrics_log).unwrap();
    assert_eq!(config_line.as_deref(), Some(cfg.to_text().as_str()));
    let steps: Vec<u64> = records.iter().map(|r| r.step).collect();
    assert_eq!(steps, vec![5, 10, 15, 20, 23]);
    let window: f64 = outcome.history[20..]
        .iter()
        .map(|r| r.losses.loss_lm)
        .sum::<f64>()
        / 3.0;
    assert!((records[4].loss_lm - window).abs() < 1e-12);
    for r in &records {
        assert!(r.loss_lm.is_finite() && r.loss_b.is_finite() && r.loss_d.is_finite());
        assert_eq!(r.mean_experts_per_layer.len(), 2);
        assert!((1.0..=4.0).contains(&r.mean_experts));
    }

    assert!(checkpoint_path(&out, 10).exists());
    assert!(checkpoint_path(&out, 20).exists());
    assert!(!checkpoint_path(&out, 23).exists());
    let fin = Checkpoint::load(&outcome.final_checkpoint).unwrap();
    assert_eq!(fin.step, 23);
    assert_eq!(RunConfig::from_text(&fin.config_text).unwrap(), cfg);
}

#[test]
fn source_mixture_follows_ratios() {
    let corpus = Corpus::from_bytes(
        vec![
            ("major".into(), 0.7, b"x".repeat(1000)),
            ("minor".into(), 0.3, b"y".repeat(1000)),
        ],
        0.1,
    )
    .unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut counts = [0usize; 2];
    for _ in 0..100 {
        let b = corpus.sample_batch(&mut rng, 100, 8).unwrap();
        for (i, &s) in b.sources.iter().enumerate() {
            counts[s] += 1;
            let want = if s == 0 { b'x' } else { b'y' } as u32;
            assert!(b.inputs[i * 8..(i + 1) * 8].iter().all(|&t| t == want));
        }
    }
    let share = counts[0] as f64 / 10_000.0;
    assert!((share - 0.7).abs() <= 0.02, "major share {share}");
}

#[test]
fn divergence_aborts_and_keeps_last_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(50);
    cfg.train.data = text_corpus(&dir.path().join("data"));
    cfg.set("checkpoint_interval", 1).unwrap();
    cfg.set("warmup_steps", 0).unwrap();
    cfg.set("lr_peak", 1e30).unwrap();
    cfg.set("grad_clip", 1e30).unwrap();
    let out = dir.path().join("run");
    let mut trainer = Trainer::new(cfg).unwrap();
    let err = run_to_completion(&mut trainer, &out, |_| {})
        .err()
        .expect("run should abort");
    assert!(matches!(err, Error::Numeric(_)), "{err}");
    assert!(!out.join("final.dmoe").exists());

    let failed_at = trainer.step();
    assert!((1..50).contains(&failed_at));
    let last = checkpoint_path(&out, failed_at);
    let ckpt = Checkpoint::load(&last).unwrap();
    assert_eq!(ckpt.step, failed_at);
    assert!(!checkpoint_path(&out, failed_at + 1).exists());
}

#[test]
fn resumed_run_matches_uninterrupted() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny(20);
    cfg.train.data = text_corpus(&dir.path().join("data"));

    let whole = train(&cfg, &dir.path().join("whole")).unwrap();

    let mut first = Trainer::new(cfg.clone()).unwrap();
    for _ in 0..10 {
        first.train_step().unwrap();
    }
    let path = dir.path().join("mid.dmoe");
    first.checkpoint().save(&path).unwrap();
    let mut resumed = Trainer::resume(&Checkpoint::load(&path).unwrap()).unwrap();
    let second = run_to_completion(&mut resumed, &dir.path().join("second"), |_| {}).unwrap();

    let a = std::fs::read(&whole.final_checkpoint).unwrap();
    let b = std::fs::read(&second.final_checkpoint).unwrap();
    assert!(a == b, "resumed checkpoint differs");
    for (x, y) in whole.history[10..].iter().zip(&second.history) {
        assert_eq!(x.losses, y.losses);
    }
    assert!(resumed.set_total_steps(5).is_err());
}

#[test]
fn missing_data_is_reported() {
    let mut cfg = tiny(20);
    cfg.train.data = vec!["prose=/nonexistent/x.txt:1".parse().unwrap()];
    assert!(Trainer::new(cfg).is_err());
    let short = Corpus::from_bytes(vec![("s".into(), 1.0, b"abc".to_vec())], 0.1);
    if let Ok(c) = short {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert!(matches!(
            c.sample_batch(&mut rng, 1, 16),
            Err(Error::Data(_))
        ));
    }
}
