//! Training loop: batching, loss assembly, AdamW, checkpoints and routing
//! instrumentation.
//!
//! A run is bit-deterministic for a fixed seed: parameters are initialized
//! from generator stream 0 of the seed, batches are drawn from stream 1, and
//! the stream position is stored in every checkpoint so a resumed run draws
//! the same batches as an uninterrupted one.

pub mod checkpoint;
pub mod data;
pub mod metrics;
pub mod optim;
pub mod schedule;

use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::config::RunConfig;
use crate::error::{Error, Result};
use crate::model::{init_model, ModelState};
use crate::numerics::{ParamBindings, Tape, Tensor};
use crate::objectives::{combine, LayerRouting, LossBreakdown, LossWeights};

use checkpoint::{Checkpoint, RngState, FORMAT_VERSION};
use data::{ingest_corpus, Corpus, DataSpec};
use metrics::{MetricsWindow, MetricsWriter};
use optim::{clip_global_norm, AdamW, AdamWConfig};
use schedule::LrSchedule;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub steps: u64,
    /// Sequences per batch.
    pub batch_size: usize,
    pub seq_len: usize,
    pub lr_peak: f64,
    pub lr_final: f64,
    pub warmup_steps: u64,
    pub adam: AdamWConfig,
    /// Global gradient-norm clip; 0 disables clipping.
    pub grad_clip: f64,
    pub weights: LossWeights,
    pub seed: u64,
    /// 0 disables periodic checkpoints (the final one is always written).
    pub checkpoint_interval: u64,
    pub stats_interval: u64,
    pub data: Vec<DataSpec>,
    pub val_fraction: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            steps: 5000,
            batch_size: 4,
            seq_len: 64,
            lr_peak: 3e-3,
            lr_final: 3e-4,
            warmup_steps: 250,
            adam: AdamWConfig::default(),
            grad_clip: 1.0,
            weights: LossWeights::default(),
            seed: 0,
            checkpoint_interval: 1000,
            stats_interval: 50,
            data: Vec::new(),
            val_fraction: 0.1,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 {
            return Err(Error::config("steps", "must be positive"));
        }
        if self.warmup_steps >= self.steps {
            return Err(Error::config(
                "warmup_steps",
                format!("must be below steps ({})", self.steps),
            ));
        }
        if !(self.lr_peak > 0.0 && self.lr_peak.is_finite()) {
            return Err(Error::config("lr_peak", "must be positive"));
        }
        if !(self.lr_final >= 0.0 && self.lr_final <= self.lr_peak) {
            return Err(Error::config("lr_final", "must lie in [0, lr_peak]"));
        }
        if self.batch_size == 0 {
            return Err(Error::config("batch_size", "must be positive"));
        }
        if self.seq_len == 0 {
            return Err(Error::config("seq_len", "must be positive"));
        }
        if self.stats_interval == 0 {
            return Err(Error::config("stats_interval", "must be positive"));
        }
        for (key, v) in [
            ("adam_beta1", self.adam.beta1),
            ("adam_beta2", self.adam.beta2),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::config(key, "must lie in [0, 1)"));
            }
        }
        if !(self.adam.eps >= 0.0) {
            return Err(Error::config("adam_eps", "must be nonnegative"));
        }
        if !(self.adam.weight_decay >= 0.0) {
            return Err(Error::config("weight_decay", "must be nonnegative"));
        }
        if !(self.grad_clip >= 0.0) {
            return Err(Error::config("grad_clip", "must be nonnegative"));
        }
        if !(self.weights.alpha >= 0.0) {
            return Err(Error::config("alpha", "must be nonnegative"));
        }
        if !(self.weights.beta >= 0.0) {
            return Err(Error::config("beta", "must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.val_fraction) {
            return Err(Error::config("val_fraction", "must lie in [0, 1)"));
        }
        Ok(())
    }

    pub fn schedule(&self) -> LrSchedule {
        LrSchedule {
            peak: self.lr_peak,
            final_lr: self.lr_final,
            warmup_steps: self.warmup_steps,
            total_steps: self.steps,
        }
    }
}

/// Learning rate for update `step` (0-based).
pub fn lr_at(step: u64, cfg: &TrainConfig) -> f64 {
    cfg.schedule().at(step)
}

/// Everything measured during one optimizer step.
#[derive(Clone, Debug, PartialEq)]
pub struct StepRecord {
    pub step: u64,
    pub losses: LossBreakdown,
    pub lr: f64,
    pub mean_experts: f64,
    pub mean_experts_per_layer: Vec<f64>,
    pub grad_norm: f64,
}

pub struct Trainer {
    config: RunConfig,
    model: ModelState<f32>,
    optimizer: AdamW<f32>,
    rng: ChaCha8Rng,
    step: u64,
    corpus: Corpus,
    decay: Vec<bool>,
}

fn decay_mask(model: &ModelState<f32>) -> Vec<bool> {
    model
        .named_params()
        .iter()
        .map(|(_, t)| t.shape().len() >= 2)
        .collect()
}

impl Trainer {
    /// Fresh run reading the corpus named in the config.
    pub fn new(config: RunConfig) -> Result<Self> {
        let corpus = ingest_corpus(&config.train.data, config.train.val_fraction)?;
        Self::with_corpus(config, corpus)
    }

    pub fn with_corpus(config: RunConfig, corpus: Corpus) -> Result<Self> {
        config.validate()?;
        let model = init_model::<f32>(&config.model, config.train.seed)?;
        let shapes: Vec<Vec<usize>> = model
            .named_params()
            .iter()
            .map(|(_, t)| t.shape().to_vec())
            .collect();
        let shape_refs: Vec<&[usize]> = shapes.iter().map(|s| s.as_slice()).collect();
        let optimizer = AdamW::new(config.train.adam, &shape_refs);
        let mut rng = ChaCha8Rng::seed_from_u64(config.train.seed);
        rng.set_stream(1);
        let decay = decay_mask(&model);
        Ok(Trainer {
            config,
            model,
            optimizer,
            rng,
            step: 0,
            corpus,
            decay,
        })
    }

    /// Restores a run; the configuration is the one stored in the checkpoint.
    pub fn resume(ckpt: &Checkpoint) -> Result<Self> {
        let config = RunConfig::from_text(&ckpt.config_text)?;
        let corpus = ingest_corpus(&config.train.data, config.train.val_fraction)?;
        Self::resume_with_corpus(ckpt, corpus)
    }

    pub fn resume_with_corpus(ckpt: &Checkpoint, corpus: Corpus) -> Result<Self> {
        let config = RunConfig::from_text(&ckpt.config_text)?;
        let shell = ModelState::<f32>::zeros(&config.model)?;
        let names: Vec<String> = shell.named_params().into_iter().map(|(n, _)| n).collect();
        let fetch = |prefix: &str| -> Result<Vec<Tensor<f32>>> {
            names
                .iter()
                .map(|n| {
                    ckpt.tensor(&format!("{prefix}.{n}"))
                        .cloned()
                        .ok_or_else(|| {
                            Error::Contract(format!("checkpoint lacks tensor {prefix}.{n}"))
                        })
                })
                .collect()
        };
        let model = ModelState::from_params(&config.model, fetch("model")?)?;
        let optimizer = AdamW {
            config: config.train.adam,
            first_moment: fetch("adam_m")?,
            second_moment: fetch("adam_v")?,
        };
        let decay = decay_mask(&model);
        Ok(Trainer {
            rng: ckpt.rng.restore()?,
            step: ckpt.step,
            config,
            model,
            optimizer,
            corpus,
            decay,
        })
    }

    pub fn config(&self) -> &RunConfig {
        &self.config
    }

    pub fn model(&self) -> &ModelState<f32> {
        &self.model
    }

    pub fn corpus(&self) -> &Corpus {
        &self.corpus
    }

    /// Number of completed optimizer steps.
    pub fn step(&self) -> u64 {
        self.step
    }

    /// Changes the planned run length, which also rescales the decay part of
    /// the learning-rate schedule.
    pub fn set_total_steps(&mut self, steps: u64) -> Result<()> {
        if steps < self.step {
            return Err(Error::config(
                "steps",
                format!("checkpoint is already at step {}", self.step),
            ));
        }
        let mut config = self.config.clone();
        config.train.steps = steps;
        config.validate()?;
        self.config = config;
        Ok(())
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.train.steps
    }

    /// Samples a batch, runs forward/backward on the combined loss, clips and
    /// applies one AdamW update.
    pub fn train_step(&mut self) -> Result<StepRecord> {
        let tc = &self.config.train;
        let lr = lr_at(self.step, tc);
        let batch = self
            .corpus
            .sample_batch(&mut self.rng, tc.batch_size, tc.seq_len)?;
        let targets: Vec<usize> = batch.targets.iter().map(|&t| t as usize).collect();

        let (mut grads, losses, per_layer) = {
            let mut tape = Tape::new();
            let mut bindings = ParamBindings::new();
            let fwd = self
                .model
                .forward(&mut tape, &mut bindings, &batch.inputs, batch.batch)?;
            let lm = tape.cross_entropy(fwd.logits, &targets)?;
            let layers: Vec<LayerRouting<'_>> = fwd
                .layers
                .iter()
                .map(|l| LayerRouting {
                    probs: l.probs,
                    decisions: &l.decisions,
                })
                .collect();
            let (total, losses) = combine(&mut tape, lm, &layers, tc.weights)?;
            tape.backward(total)?;
            let per_layer: Vec<f64> = fwd
                .layers
                .iter()
                .map(|l| {
                    l.decisions.iter().map(|d| d.num_selected()).sum::<usize>() as f64
                        / l.decisions.len() as f64
                })
                .collect();
            let grads: Vec<Tensor<f32>> = self
                .model
                .named_params()
                .iter()
                .map(|(_, t)| {
                    bindings
                        .get(*t)
                        .and_then(|v| tape.take_grad(v))
                        .unwrap_or_else(|| Tensor::zeros(t.shape()))
                })
                .collect();
            (grads, losses, per_layer)
        };

        let grad_norm = clip_global_norm(&mut grads, tc.grad_clip);
        if !grad_norm.is_finite() {
            return Err(Error::Numeric(format!(
                "non-finite gradient norm at step {}",
                self.step
            )));
        }
        let mut params = self.model.params_mut();
        self.optimizer
            .step(&mut params, &grads, &self.decay, lr, self.step)?;

        let record = StepRecord {
            step: self.step,
            losses,
            lr,
            mean_experts: per_layer.iter().sum::<f64>() / per_layer.len().max(1) as f64,
            mean_experts_per_layer: per_layer,
            grad_norm,
        };
        self.step += 1;
        Ok(record)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let params = self.model.named_params();
        let mut tensors = Vec::with_capacity(params.len() * 3);
        for (name, t) in &params {
            tensors.push((format!("model.{name}"), (*t).clone()));
        }
        for ((name, _), m) in params.iter().zip(&self.optimizer.first_moment) {
            tensors.push((format!("adam_m.{name}"), m.clone()));
        }
        for ((name, _), v) in params.iter().zip(&self.optimizer.second_moment) {
            tensors.push((format!("adam_v.{name}"), v.clone()));
        }
        Checkpoint {
            version: FORMAT_VERSION,
            step: self.step,
            rng: RngState::capture(&self.rng),
            config_text: self.config.to_text(),
            tensors,
        }
    }
}

/// Rebuilds the model stored in a checkpoint (no optimizer state needed).
pub fn load_model(ckpt: &Checkpoint) -> Result<(RunConfig, ModelState<f32>)> {
    let config = RunConfig::from_text(&ckpt.config_text)?;
    let shell = ModelState::<f32>::zeros(&config.model)?;
    let tensors = shell
        .named_params()
        .into_iter()
        .map(|(n, _)| {
            ckpt.tensor(&format!("model.{n}"))
                .cloned()
                .ok_or_else(|| Error::Contract(format!("checkpoint lacks tensor model.{n}")))
        })
        .collect::<Result<Vec<_>>>()?;
    let model = ModelState::from_params(&config.model, tensors)?;
    Ok((config, model))
}

pub struct TrainOutcome {
    pub final_checkpoint: PathBuf,
    pub metrics_log: PathBuf,
    /// Records of the steps run in this invocation.
    pub history: Vec<StepRecord>,
}

pub fn checkpoint_path(out_dir: &Path, step: u64) -> PathBuf {
    out_dir.join(format!("ckpt-{step:06}.dmoe"))
}

/// Runs `trainer` to completion, writing periodic checkpoints, a final
/// `final.dmoe` and the metrics log into `out_dir`. A NaN or other numeric
/// failure aborts the run; the last checkpoint on disk is left untouched.
pub fn run_to_completion(
    trainer: &mut Trainer,
    out_dir: &Path,
    mut on_step: impl FnMut(&StepRecord),
) -> Result<TrainOutcome> {
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let metrics_log = out_dir.join("metrics.jsonl");
    let mut writer = MetricsWriter::open(&metrics_log, &trainer.config.to_text())?;
    let mut window = MetricsWindow::default();
    let tc = trainer.config.train.clone();
    let mut history = Vec::new();
    while !trainer.is_done() {
        let rec = trainer.train_step()?;
        window.push(&rec);
        on_step(&rec);
        let done = trainer.step();
        if done.is_multiple_of(tc.stats_interval) || done == tc.steps {
            writer.write(&window.flush(done))?;
        }
        if tc.checkpoint_interval > 0
            && done.is_multiple_of(tc.checkpoint_interval)
            && done < tc.steps
        {
            trainer.checkpoint().save(&checkpoint_path(out_dir, done))?;
        }
        history.push(rec);
    }
    let final_checkpoint = out_dir.join("final.dmoe");
    trainer.checkpoint().save(&final_checkpoint)?;
    Ok(TrainOutcome {
        final_checkpoint,
        metrics_log,
        history,
    })
}

/// Fresh training run from a configuration.
pub fn train(config: &RunConfig, out_dir: &Path) -> Result<TrainOutcome> {
    let mut trainer = Trainer::new(config.clone())?;
    run_to_completion(&mut trainer, out_dir, |_| {})
}
