use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use dynmoe::analysis::{self, layer_profile, layer_trend};
use dynmoe::config::RunConfig;
use dynmoe::model::ModelState;
use dynmoe::trainer::checkpoint::{file_sha256, Checkpoint};
use dynmoe::trainer::data::TaggedSequence;
use dynmoe::trainer::data::{ingest_corpus, DataSpec};
use dynmoe::trainer::metrics::read_metrics;
use dynmoe::trainer::{load_model, run_to_completion, Trainer};
use dynmoe::{corpus, Error, Result};

#[derive(Parser)]
#[command(
    name = "dynmoe",
    version,
    about = "Train and analyze top-p / top-k routed MoE language models"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model, or resume one with --checkpoint.
    Train(TrainArgs),
    /// Evaluate a checkpoint on the validation split.
    Eval(EvalArgs),
    /// Evaluate a top-p checkpoint under several routing thresholds.
    SweepP(SweepArgs),
    /// Per-layer, per-token, per-source routing reports.
    Analyze(AnalyzeArgs),
    /// Print checkpoint metadata and its embedded configuration.
    InspectCheckpoint(InspectArgs),
    /// Write the synthetic three-source text corpus.
    GenCorpus(GenCorpusArgs),
}

#[derive(Args)]
struct Overrides {
    /// Flat `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    steps: Option<u64>,
    /// top-k or top-p.
    #[arg(long)]
    routing: Option<String>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    p: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Corpus source `<tag>=<path>:<ratio>`; repeatable.
    #[arg(long = "data")]
    data: Vec<String>,
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    overrides: Overrides,
    #[arg(long, default_value = "run")]
    out_dir: PathBuf,
    /// Resume from this checkpoint; its embedded configuration is used.
    #[arg(long, conflicts_with_all = ["config", "seed", "routing", "k", "p", "alpha", "beta"])]
    checkpoint: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Replace the corpus recorded in the checkpoint; repeatable.
    #[arg(long = "data")]
    data: Vec<String>,
    /// Also write the routing report here.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// Comma-separated thresholds; defaults to the configured sweep.
    #[arg(long, value_delimiter = ',')]
    p: Vec<f64>,
    #[arg(long = "data")]
    data: Vec<String>,
    #[arg(long, default_value = ".")]
    out_dir: PathBuf,
}

#[derive(Args)]
struct AnalyzeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long = "data")]
    data: Vec<String>,
    #[arg(long, default_value = "analysis")]
    out_dir: PathBuf,
    /// Minimum occurrences for the token table; defaults to the configured value.
    #[arg(long)]
    min_occurrences: Option<u64>,
    /// Training metrics log to convert into experts-over-training plot data.
    #[arg(long)]
    metrics: Option<PathBuf>,
    /// Also write the per-position routing dump.
    #[arg(long)]
    dump: bool,
}

#[derive(Args)]
struct InspectArgs {
    #[arg(long)]
    checkpoint: PathBuf,
}

#[derive(Args)]
struct GenCorpusArgs {
    #[arg(long, default_value = "corpus")]
    out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Approximate total size in bytes.
    #[arg(long, default_value_t = 1_000_000)]
    bytes: usize,
}

fn run_config(o: &Overrides) -> Result<RunConfig> {
    let mut cfg = match &o.config {
        Some(path) => RunConfig::from_file(path)?,
        None => RunConfig::default(),
    };
    let mut settings = std::collections::BTreeMap::new();
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            settings.insert(k.to_string(), v);
        }
    };
    put("seed", o.seed.map(|v| v.to_string()));
    put("steps", o.steps.map(|v| v.to_string()));
    put("routing", o.routing.clone());
    put("k", o.k.map(|v| v.to_string()));
    put("p", o.p.map(|v| v.to_string()));
    put("alpha", o.alpha.map(|v| v.to_string()));
    put("beta", o.beta.map(|v| v.to_string()));
    if !o.data.is_empty() {
        put("data", Some(o.data.join(",")));
    }
    cfg.apply(&settings)?;
    Ok(cfg)
}

fn data_override(cfg: &mut RunConfig, data: &[String]) -> Result<()> {
    if !data.is_empty() {
        cfg.train.data = data
            .iter()
            .map(|d| d.parse())
            .collect::<Result<Vec<DataSpec>>>()?;
    }
    Ok(())
}

type Loaded = (RunConfig, ModelState<f32>, Vec<TaggedSequence>, Vec<String>);

fn load_for_analysis(checkpoint: &Path, data: &[String]) -> Result<Loaded> {
    let ckpt = Checkpoint::load(checkpoint)?;
    let (mut cfg, model) = load_model(&ckpt)?;
    data_override(&mut cfg, data)?;
    let corpus = ingest_corpus(&cfg.train.data, cfg.train.val_fraction)?;
    let windows = corpus.eval_windows(cfg.train.seq_len, cfg.analysis.eval_tokens);
    Ok((cfg, model, windows, corpus.tags()))
}

fn train(a: &TrainArgs) -> Result<()> {
    let mut trainer = match &a.checkpoint {
        Some(path) => {
            let ckpt = Checkpoint::load(path)?;
            let mut t = Trainer::resume(&ckpt)?;
            if let Some(steps) = a.overrides.steps {
                t.set_total_steps(steps)?;
            }
            t
        }
        None => Trainer::new(run_config(&a.overrides)?)?,
    };
    let total = trainer.config().train.steps;
    let interval = trainer.config().train.stats_interval;
    eprintln!(
        "training {} / {} steps, routing {}",
        trainer.step(),
        total,
        trainer.config().model.policy
    );
    let outcome = run_to_completion(&mut trainer, &a.out_dir, |r| {
        if (r.step + 1) % interval == 0 || r.step + 1 == total {
            eprintln!(
                "step {:>6}  loss_lm {:.4}  loss_b {:.4}  loss_d {:.4}  lr {:.3e}  experts {:.3}",
                r.step + 1,
                r.losses.loss_lm,
                r.losses.loss_balance,
                r.losses.loss_dynamic,
                r.lr,
                r.mean_experts
            );
        }
    })?;
    let (_, records) = read_metrics(&outcome.metrics_log)?;
    analysis::write_training_dat(&a.out_dir.join("training.dat"), &records)?;
    println!(
        "{}  {}",
        file_sha256(&outcome.final_checkpoint)?,
        outcome.final_checkpoint.display()
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let (cfg, model, windows, tags) = load_for_analysis(&a.checkpoint, &a.data)?;
    let r = analysis::evaluate(&model, &windows, &tags, cfg.model.policy, None)?;
    println!("eval_loss_nats {:.6}", r.loss_nats);
    println!("predicted_tokens {}", r.predicted_tokens);
    println!("mean_experts {:.6}", r.stats.global_mean());
    for (tag, t) in &r.stats.sources {
        println!(
            "source {tag} tokens {} mean_experts {:.6}",
            t.tokens,
            t.mean()
        );
    }
    if let Some(dir) = &a.out_dir {
        for f in analysis::emit_stats_report(&r.stats, dir, cfg.analysis.min_occurrences)? {
            eprintln!("wrote {}", f.display());
        }
    }
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let (cfg, model, windows, tags) = load_for_analysis(&a.checkpoint, &a.data)?;
    let ps = if a.p.is_empty() {
        cfg.analysis.sweep_p.clone()
    } else {
        a.p.clone()
    };
    let report = analysis::sweep_p(&model, &windows, &tags, &ps)?;
    println!("p,mean_experts,eval_loss_nats");
    for r in &report.rows {
        println!("{},{:.6},{:.6}", r.p, r.mean_experts, r.eval_loss_nats);
    }
    for f in analysis::emit_sweep_report(&report, &a.out_dir)? {
        eprintln!("wrote {}", f.display());
    }
    Ok(())
}

fn analyze(a: &AnalyzeArgs) -> Result<()> {
    let (cfg, model, windows, tags) = load_for_analysis(&a.checkpoint, &a.data)?;
    let mut dump = Vec::new();
    let r = analysis::evaluate(
        &model,
        &windows,
        &tags,
        cfg.model.policy,
        a.dump.then_some(&mut dump),
    )?;
    let min = a.min_occurrences.unwrap_or(cfg.analysis.min_occurrences);
    for f in analysis::emit_stats_report(&r.stats, &a.out_dir, min)? {
        eprintln!("wrote {}", f.display());
    }
    if a.dump {
        let path = a.out_dir.join("dump.csv");
        analysis::write_dump_csv(&path, &dump)?;
        eprintln!("wrote {}", path.display());
    }
    if let Some(metrics) = &a.metrics {
        let (_, records) = read_metrics(metrics)?;
        let path = a.out_dir.join("training.dat");
        analysis::write_training_dat(&path, &records)?;
        eprintln!("wrote {}", path.display());
    }
    let profile = layer_profile(&r.stats);
    for row in &profile {
        println!("layer {} mean_experts {:.4}", row.layer, row.mean_experts);
    }
    match layer_trend(&profile) {
        Some(rho) => println!("layer_trend_spearman {rho:.4}"),
        None => println!("layer_trend_spearman undefined"),
    }
    Ok(())
}

fn inspect(a: &InspectArgs) -> Result<()> {
    let ckpt = Checkpoint::load(&a.checkpoint)?;
    let (_, model) = load_model(&ckpt)?;
    let params: usize = model.named_params().iter().map(|(_, t)| t.numel()).sum();
    println!("format_version {}", ckpt.version);
    println!("step {}", ckpt.step);
    println!("tensors {}", ckpt.tensors.len());
    println!("parameters {params}");
    println!("model_checksum {}", model.checksum());
    println!("file_sha256 {}", file_sha256(&a.checkpoint)?);
    println!("--- config ---");
    print!("{}", ckpt.config_text);
    Ok(())
}

fn gen_corpus(a: &GenCorpusArgs) -> Result<()> {
    let specs = corpus::write_corpus(&a.out_dir, a.seed, a.bytes)?;
    let line = specs
        .iter()
        .map(|s| s.to_string())
        .collect::<Vec<_>>()
        .join(",");
    println!("data = {line}");
    Ok(())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::SweepP(a) => sweep(a),
        Command::Analyze(a) => analyze(a),
        Command::InspectCheckpoint(a) => inspect(a),
        Command::GenCorpus(a) => gen_corpus(a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match dispatch(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            if let Error::Config { .. } = e {
                eprintln!("hint: see `dynmoe --help` and the configuration reference in README.md");
            }
            ExitCode::from(2)
        }
    }
}
