use dynmoe::analysis::{
    emit_stats_report, emit_sweep_report, evaluate, layer_profile, read_dump_csv, read_layer_csv,
    read_sweep_csv, read_token_csv, recount, sweep_p, token_profile, write_dump_csv, RoutingStats,
};
use dynmoe::model::{init_model, ModelConfig, ModelState};
use dynmoe::router::RoutingPolicy;
use dynmoe::trainer::data::{Corpus, TaggedSequence};
use dynmoe::Error;

fn config(policy: RoutingPolicy) -> ModelConfig {
    ModelConfig {
        layers: 3,
        hidden: 32,
        heads: 2,
        head_dim: 16,
        vocab: 256,
        context: 64,
        experts: 6,
        policy,
        ffn_dim: 48,
        init_std: 0.3,
    }
}

fn model(policy: RoutingPolicy) -> ModelState<f32> {
    init_model(&config(policy), 9).unwrap()
}

fn windows(tokens_per_source: usize) -> (Vec<TaggedSequence>, Vec<String>) {
    let sources = dynmoe::corpus::generate(2, 200_000)
        .into_iter()
        .map(|(tag, text)| (tag, 1.0, text.into_bytes()))
        .collect();
    let corpus = Corpus::from_bytes(sources, 0.1).unwrap();
    (corpus.eval_windows(32, tokens_per_source), corpus.tags())
}

#[test]
fn top_k_means_are_exactly_k() {
    let m = model(RoutingPolicy::TopK { k: 2 });
    let (w, tags) = windows(600);
    let r = evaluate(&m, &w, &tags, m.config.policy, None).unwrap();
    for row in layer_profile(&r.stats) {
        assert_eq!(row.mean_experts, 2.0);
    }
    assert_eq!(r.stats.global_mean(), 2.0);
    assert!(token_profile(&r.stats, 1)
        .rows
        .iter()
        .all(|t| t.mean_experts == 2.0));
}

#[test]
fn dump_recount_and_shards_agree() {
    let m = model(RoutingPolicy::TopP { threshold: 0.4 });
    let (w, tags) = windows(3500);
    let mut dump = Vec::new();
    let whole = evaluate(&m, &w, &tags, m.config.policy, Some(&mut dump)).unwrap();
    assert!(
        whole.stats.total_tokens() >= 10_000,
        "{}",
        whole.stats.total_tokens()
    );
    assert_eq!(dump.len() as u64, whole.stats.total_tokens());

    let mut activated = vec![0u64; 3];
    for rec in &dump {
        for (l, sel) in rec.selected.iter().enumerate() {
            assert!(!sel.is_empty() && sel.len() <= 6);
            activated[l] += sel.len() as u64;
        }
    }
    assert_eq!(activated, whole.stats.layer_activated);
    assert_eq!(recount(&dump, 3, 6).unwrap(), whole.stats);

    let mut merged = RoutingStats::new(3, 6);
    let mut shard_dump = Vec::new();
    for chunk in w.chunks(7) {
        let part = evaluate(&m, chunk, &tags, m.config.policy, Some(&mut shard_dump)).unwrap();
        merged.merge(&part.stats).unwrap();
    }
    assert_eq!(merged, whole.stats);
    assert_eq!(shard_dump, dump);

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("dump.csv");
    write_dump_csv(&path, &dump).unwrap();
    let back = read_dump_csv(&path, 3).unwrap();
    assert_eq!(back, dump);
}

#[test]
fn sweep_at_model_threshold_matches_eval() {
    let m = model(RoutingPolicy::TopP { threshold: 0.4 });
    let (w, tags) = windows(400);
    let direct = evaluate(&m, &w, &tags, m.config.policy, None).unwrap();
    let report = sweep_p(&m, &w, &tags, &[0.4]).unwrap();
    assert_eq!(report.rows.len(), 1);
    assert_eq!(report.rows[0].eval_loss_nats, direct.loss_nats);
    assert_eq!(report.rows[0].mean_experts, direct.stats.global_mean());

    let full = sweep_p(&m, &w, &tags, &[0.7, 0.1, 0.4]).unwrap();
    let ps: Vec<f64> = full.rows.iter().map(|r| r.p).collect();
    assert_eq!(ps, vec![0.1, 0.4, 0.7]);
    for pair in full.rows.windows(2) {
        assert!(pair[0].mean_experts <= pair[1].mean_experts);
    }
}

#[test]
fn sweep_rejects_bad_input() {
    let (w, tags) = windows(100);
    let m = model(RoutingPolicy::TopP { threshold: 0.4 });
    for bad in [&[][..], &[0.0][..], &[1.0][..], &[0.3, 1.5][..]] {
        assert!(
            matches!(sweep_p(&m, &w, &tags, bad), Err(Error::Config { .. })),
            "{bad:?}"
        );
    }
    let k = model(RoutingPolicy::TopK { k: 2 });
    assert!(matches!(
        sweep_p(&k, &w, &tags, &[0.4]),
        Err(Error::Contract(_))
    ));
    assert!(evaluate(&m, &[], &tags, m.config.policy, None).is_err());
}

#[test]
fn reports_parse_back_and_are_deterministic() {
    let m = model(RoutingPolicy::TopP { threshold: 0.4 });
    let (w, tags) = windows(800);
    let stats = evaluate(&m, &w, &tags, m.config.policy, None)
        .unwrap()
        .stats;
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let files_a = emit_stats_report(&stats, a.path(), 1).unwrap();
    let files_b = emit_stats_report(&stats, b.path(), 1).unwrap();
    for (fa, fb) in files_a.iter().zip(&files_b) {
        assert_eq!(
            std::fs::read(fa).unwrap(),
            std::fs::read(fb).unwrap(),
            "{}",
            fa.display()
        );
    }

    let tokens = read_token_csv(&a.path().join("tokens.csv")).unwrap();
    assert_eq!(tokens, token_profile(&stats, 1).rows);
    let occ: u64 = tokens.iter().map(|t| t.occurrences).sum();
    assert_eq!(occ, stats.total_tokens());
    let activated: f64 = tokens
        .iter()
        .map(|t| t.occurrences as f64 * t.mean_experts * 3.0)
        .sum();
    let want: u64 = stats.layer_activated.iter().sum();
    assert!((activated - want as f64).abs() < 1e-6 * want as f64);

    let layers = read_layer_csv(&a.path().join("layers.csv")).unwrap();
    assert_eq!(layers, layer_profile(&stats));

    let report = sweep_p(&m, &w, &tags, &[0.2, 0.5]).unwrap();
    emit_sweep_report(&report, a.path()).unwrap();
    assert_eq!(read_sweep_csv(&a.path().join("sweep.csv")).unwrap(), report);
}
