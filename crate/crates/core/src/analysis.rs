//! Routing instrumentation: activated-expert counters per layer, per token
//! and per source, the inference-time threshold sweep, and the CSV /
//! plot-data reports built from them.

use std::collections::BTreeMap;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelState;
use crate::numerics::{ParamBindings, Scalar, Tape};
use crate::router::RoutingPolicy;
use crate::trainer::data::TaggedSequence;
use crate::trainer::metrics::MetricsRecord;

/// Token and activated-expert totals for one key.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Tally {
    /// Token positions seen.
    pub tokens: u64,
    /// Routing decisions made (tokens × layers).
    pub decisions: u64,
    /// Sum of activated experts over those decisions.
    pub activated: u64,
}

impl Tally {
    fn add(&mut self, other: &Tally) {
        self.tokens += other.tokens;
        self.decisions += other.decisions;
        self.activated += other.activated;
    }

    /// Mean activated experts per routing decision.
    pub fn mean(&self) -> f64 {
        self.activated as f64 / self.decisions as f64
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct RoutingStats {
    pub layers: usize,
    pub experts: usize,
    /// `[layer][expert]` selection counts.
    pub expert_hits: Vec<Vec<u64>>,
    pub layer_tokens: Vec<u64>,
    pub layer_activated: Vec<u64>,
    pub tokens: BTreeMap<u32, Tally>,
    pub sources: BTreeMap<String, Tally>,
}

impl RoutingStats {
    pub fn new(layers: usize, experts: usize) -> Self {
        RoutingStats {
            layers,
            experts,
            expert_hits: vec![vec![0; experts]; layers],
            layer_tokens: vec![0; layers],
            layer_activated: vec![0; layers],
            tokens: BTreeMap::new(),
            sources: BTreeMap::new(),
        }
    }

    pub fn total_tokens(&self) -> u64 {
        self.tokens.values().map(|t| t.tokens).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.total_tokens() == 0
    }

    /// Records one token position: its id, source tag and the decision of
    /// every layer.
    pub fn record(&mut self, token: u32, source: &str, selected: &[&[usize]]) -> Result<()> {
        if selected.len() != self.layers {
            return Err(Error::Shape(format!(
                "{} layer decisions for a {}-layer model",
                selected.len(),
                self.layers
            )));
        }
        let mut tally = Tally {
            tokens: 1,
            decisions: self.layers as u64,
            activated: 0,
        };
        for (l, experts) in selected.iter().enumerate() {
            for &e in *experts {
                let hits = self.expert_hits[l]
                    .get_mut(e)
                    .ok_or_else(|| Error::Shape(format!("expert {e} out of range")))?;
                *hits += 1;
            }
            self.layer_tokens[l] += 1;
            self.layer_activated[l] += experts.len() as u64;
            tally.activated += experts.len() as u64;
        }
        self.tokens.entry(token).or_default().add(&tally);
        self.sources
            .entry(source.to_string())
            .or_default()
            .add(&tally);
        Ok(())
    }

    /// Adds `other` into `self`.
    pub fn merge(&mut self, other: &RoutingStats) -> Result<()> {
        if (self.layers, self.experts) != (other.layers, other.experts) {
            return Err(Error::Shape(format!(
                "cannot merge stats of {}x{} and {}x{} (layers x experts)",
                self.layers, self.experts, other.layers, other.experts
            )));
        }
        for (a, b) in self.expert_hits.iter_mut().zip(&other.expert_hits) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
        for l in 0..self.layers {
            self.layer_tokens[l] += other.layer_tokens[l];
            self.layer_activated[l] += other.layer_activated[l];
        }
        for (k, v) in &other.tokens {
            self.tokens.entry(*k).or_default().add(v);
        }
        for (k, v) in &other.sources {
            self.sources.entry(k.clone()).or_default().add(v);
        }
        Ok(())
    }

    pub fn layer_mean(&self, layer: usize) -> f64 {
        self.layer_activated[layer] as f64 / self.layer_tokens[layer] as f64
    }

    /// Mean activated experts over every (token, layer) decision.
    pub fn global_mean(&self) -> f64 {
        let tokens: u64 = self.layer_tokens.iter().sum();
        let activated: u64 = self.layer_activated.iter().sum();
        activated as f64 / tokens as f64
    }
}

/// The routing of one evaluated token position.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct PositionRecord {
    pub source: String,
    pub token: u32,
    /// Selected experts, one list per layer.
    pub selected: Vec<Vec<usize>>,
}

#[derive(Clone, Debug)]
pub struct EvalResult {
    pub stats: RoutingStats,
    /// Mean next-token cross-entropy in nats.
    pub loss_nats: f64,
    pub predicted_tokens: u64,
}

/// Runs the model in inference mode over `windows` (each `seq + 1` tokens,
/// input plus shifted target) under `policy`, accumulating routing counters
/// and the next-token loss. Every window is its own forward pass, so results
/// do not depend on how the dataset is sharded.
pub fn evaluate<F: Scalar>(
    model: &ModelState<F>,
    windows: &[TaggedSequence],
    tags: &[String],
    policy: RoutingPolicy,
    mut dump: Option<&mut Vec<PositionRecord>>,
) -> Result<EvalResult> {
    if windows.is_empty() {
        return Err(Error::Data("empty evaluation dataset".into()));
    }
    let cfg = &model.config;
    let mut stats = RoutingStats::new(cfg.layers, cfg.experts);
    let mut loss_sum = 0.0;
    let mut predicted = 0u64;
    for w in windows {
        if w.tokens.len() < 2 {
            return Err(Error::Data(
                "evaluation window shorter than two tokens".into(),
            ));
        }
        let tag = tags
            .get(w.source)
            .ok_or_else(|| Error::Data(format!("window refers to unknown source #{}", w.source)))?;
        let inputs = &w.tokens[..w.tokens.len() - 1];
        let targets: Vec<usize> = w.tokens[1..].iter().map(|&t| t as usize).collect();
        let mut tape = Tape::new();
        let mut bindings = ParamBindings::new();
        let out = model.forward_with_policy(&mut tape, &mut bindings, inputs, 1, policy)?;
        let loss = tape.cross_entropy(out.logits, &targets)?;
        loss_sum += tape.value(loss).item().as_f64() * targets.len() as f64;
        predicted += targets.len() as u64;
        for (pos, &token) in inputs.iter().enumerate() {
            let selected: Vec<&[usize]> = out
                .layers
                .iter()
                .map(|l| l.decisions[pos].selected())
                .collect();
            stats.record(token, tag, &selected)?;
            if let Some(d) = dump.as_deref_mut() {
                d.push(PositionRecord {
                    source: tag.clone(),
                    token,
                    selected: selected.iter().map(|s| s.to_vec()).collect(),
                });
            }
        }
    }
    Ok(EvalResult {
        stats,
        loss_nats: loss_sum / predicted as f64,
        predicted_tokens: predicted,
    })
}

/// Routing counters over `windows` under the model's own policy.
pub fn collect_stats<F: Scalar>(
    model: &ModelState<F>,
    windows: &[TaggedSequence],
    tags: &[String],
) -> Result<RoutingStats> {
    Ok(evaluate(model, windows, tags, model.config.policy, None)?.stats)
}

/// Re-aggregates a per-position dump.
pub fn recount(records: &[PositionRecord], layers: usize, experts: usize) -> Result<RoutingStats> {
    let mut stats = RoutingStats::new(layers, experts);
    for r in records {
        let sel: Vec<&[usize]> = r.selected.iter().map(|s| s.as_slice()).collect();
        stats.record(r.token, &r.source, &sel)?;
    }
    Ok(stats)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub p: f64,
    pub mean_experts: f64,
    pub eval_loss_nats: f64,
    pub layer_means: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SweepReport {
    pub rows: Vec<SweepRow>,
}

/// Evaluates a top-p model with its threshold overridden by each value in
/// `p_values`; rows come back sorted by `p`.
pub fn sweep_p<F: Scalar>(
    model: &ModelState<F>,
    windows: &[TaggedSequence],
    tags: &[String],
    p_values: &[f64],
) -> Result<SweepReport> {
    if !model.config.policy.is_top_p() {
        return Err(Error::Contract(format!(
            "threshold sweep needs a top-p model, checkpoint uses {}",
            model.config.policy
        )));
    }
    if p_values.is_empty() {
        return Err(Error::config("p", "no threshold values given"));
    }
    if let Some(bad) = p_values.iter().find(|p| !(**p > 0.0 && **p < 1.0)) {
        return Err(Error::config("p", format!("{bad} is outside (0, 1)")));
    }
    let mut ps = p_values.to_vec();
    ps.sort_by(f64::total_cmp);
    let mut rows = Vec::with_capacity(ps.len());
    for p in ps {
        let policy = model.config.policy.with_threshold(p)?;
        let r = evaluate(model, windows, tags, policy, None)?;
        rows.push(SweepRow {
            p,
            mean_experts: r.stats.global_mean(),
            eval_loss_nats: r.loss_nats,
            layer_means: (0..r.stats.layers).map(|l| r.stats.layer_mean(l)).collect(),
        });
    }
    Ok(SweepReport { rows })
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerRow {
    pub layer: usize,
    pub mean_experts: f64,
    pub token_count: u64,
}

/// Mean activated experts for layers `0..L`; empty when no tokens were seen.
pub fn layer_profile(stats: &RoutingStats) -> Vec<LayerRow> {
    if stats.is_empty() {
        return Vec::new();
    }
    (0..stats.layers)
        .map(|l| LayerRow {
            layer: l,
            mean_experts: stats.layer_mean(l),
            token_count: stats.layer_tokens[l],
        })
        .collect()
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenRow {
    pub token_id: u32,
    pub occurrences: u64,
    pub mean_experts: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenProfile {
    /// Sorted by mean activated experts, highest first; ties by token id.
    pub rows: Vec<TokenRow>,
}

impl TokenProfile {
    fn decile_len(&self) -> usize {
        self.rows.len().div_ceil(10)
    }

    pub fn top_decile(&self) -> &[TokenRow] {
        &self.rows[..self.decile_len()]
    }

    pub fn bottom_decile(&self) -> &[TokenRow] {
        &self.rows[self.rows.len() - self.decile_len()..]
    }
}

pub fn token_profile(stats: &RoutingStats, min_occurrences: u64) -> TokenProfile {
    let mut rows: Vec<TokenRow> = stats
        .tokens
        .iter()
        .filter(|(_, t)| t.tokens >= min_occurrences.max(1))
        .map(|(&id, t)| TokenRow {
            token_id: id,
            occurrences: t.tokens,
            mean_experts: t.mean(),
        })
        .collect();
    rows.sort_by(|a, b| {
        b.mean_experts
            .total_cmp(&a.mean_experts)
            .then(a.token_id.cmp(&b.token_id))
    });
    TokenProfile { rows }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum ByteClass {
    Letter,
    Digit,
    Punctuation,
    Whitespace,
    /// Control bytes and bytes of multi-byte UTF-8 sequences.
    Other,
}

impl ByteClass {
    pub fn of(byte: u8) -> Self {
        if byte.is_ascii_alphabetic() {
            ByteClass::Letter
        } else if byte.is_ascii_digit() {
            ByteClass::Digit
        } else if byte.is_ascii_punctuation() {
            ByteClass::Punctuation
        } else if byte.is_ascii_whitespace() {
            ByteClass::Whitespace
        } else {
            ByteClass::Other
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            ByteClass::Letter => "letter",
            ByteClass::Digit => "digit",
            ByteClass::Punctuation => "punctuation",
            ByteClass::Whitespace => "whitespace",
            ByteClass::Other => "other",
        }
    }
}

/// Totals per byte class, for token ids below 256.
pub fn byte_class_profile(stats: &RoutingStats) -> BTreeMap<ByteClass, Tally> {
    let mut out: BTreeMap<ByteClass, Tally> = BTreeMap::new();
    for (&id, t) in &stats.tokens {
        if let Ok(b) = u8::try_from(id) {
            out.entry(ByteClass::of(b)).or_default().add(t);
        }
    }
    out
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && v[idx[j + 1]] == v[idx[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            r[k] = avg;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; `None` when either
/// side is constant or fewer than two points are given.
pub fn spearman(x: &[f64], y: &[f64]) -> Option<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return None;
    }
    let (rx, ry) = (ranks(x), ranks(y));
    let n = x.len() as f64;
    let (mx, my) = (rx.iter().sum::<f64>() / n, ry.iter().sum::<f64>() / n);
    let mut sxy = 0.0;
    let mut sxx = 0.0;
    let mut syy = 0.0;
    for (a, b) in rx.iter().zip(&ry) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return None;
    }
    Some(sxy / (sxx * syy).sqrt())
}

/// Spearman correlation between layer index and mean activated experts.
pub fn layer_trend(rows: &[LayerRow]) -> Option<f64> {
    let x: Vec<f64> = rows.iter().map(|r| r.layer as f64).collect();
    let y: Vec<f64> = rows.iter().map(|r| r.mean_experts).collect();
    spearman(&x, &y)
}

/// Printable form of a byte token: the character itself or an escape such as
/// `\n`, `\x20`, `\xc3`.
pub fn byte_repr(token: u32) -> String {
    match u8::try_from(token) {
        Ok(b' ') => "\\x20".to_string(),
        Ok(b) => b.escape_ascii().to_string(),
        Err(_) => format!("<{token}>"),
    }
}

fn csv_writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::Writer::from_writer(file))
}

fn finish(mut w: csv::Writer<std::fs::File>, path: &Path) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_layer_csv(path: &Path, rows: &[LayerRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["layer", "mean_experts", "token_count"])?;
    for r in rows {
        w.write_record([
            r.layer.to_string(),
            r.mean_experts.to_string(),
            r.token_count.to_string(),
        ])?;
    }
    finish(w, path)
}

pub fn read_layer_csv(path: &Path) -> Result<Vec<LayerRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(LayerRow {
            layer: parse_field(&rec, 0, path)?,
            mean_experts: parse_field(&rec, 1, path)?,
            token_count: parse_field(&rec, 2, path)?,
        });
    }
    Ok(out)
}

pub fn write_token_csv(path: &Path, rows: &[TokenRow]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["token_id", "byte_repr", "occurrences", "mean_experts"])?;
    for r in rows {
        w.write_record([
            r.token_id.to_string(),
            byte_repr(r.token_id),
            r.occurrences.to_string(),
            r.mean_experts.to_string(),
        ])?;
    }
    finish(w, path)
}

pub fn read_token_csv(path: &Path) -> Result<Vec<TokenRow>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        out.push(TokenRow {
            token_id: parse_field(&rec, 0, path)?,
            occurrences: parse_field(&rec, 2, path)?,
            mean_experts: parse_field(&rec, 3, path)?,
        });
    }
    Ok(out)
}

pub fn write_sweep_csv(path: &Path, report: &SweepReport) -> Result<()> {
    let layers = report.rows.first().map_or(0, |r| r.layer_means.len());
    let mut w = csv_writer(path)?;
    let mut header = vec![
        "p".to_string(),
        "mean_experts".into(),
        "eval_loss_nats".into(),
    ];
    header.extend((0..layers).map(|i| format!("layer{i}_mean")));
    w.write_record(&header)?;
    for r in &report.rows {
        let mut rec = vec![
            r.p.to_string(),
            r.mean_experts.to_string(),
            r.eval_loss_nats.to_string(),
        ];
        rec.extend(r.layer_means.iter().map(|m| m.to_string()));
        w.write_record(&rec)?;
    }
    finish(w, path)
}

pub fn read_sweep_csv(path: &Path) -> Result<SweepReport> {
    let mut r = csv::Reader::from_path(path)?;
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        rows.push(SweepRow {
            p: parse_field(&rec, 0, path)?,
            mean_experts: parse_field(&rec, 1, path)?,
            eval_loss_nats: parse_field(&rec, 2, path)?,
            layer_means: (3..rec.len())
                .map(|i| parse_field(&rec, i, path))
                .collect::<Result<_>>()?,
        });
    }
    Ok(SweepReport { rows })
}

pub fn write_source_csv(path: &Path, stats: &RoutingStats) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["source", "token_count", "mean_experts"])?;
    for (tag, t) in &stats.sources {
        w.write_record([tag.clone(), t.tokens.to_string(), t.mean().to_string()])?;
    }
    finish(w, path)
}

pub fn write_byte_class_csv(path: &Path, stats: &RoutingStats) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["byte_class", "occurrences", "mean_experts"])?;
    for (class, t) in byte_class_profile(stats) {
        w.write_record([
            class.name().to_string(),
            t.tokens.to_string(),
            t.mean().to_string(),
        ])?;
    }
    finish(w, path)
}

/// Per-position decision dump: `source,token_id,layer,experts` with the
/// selected experts space separated in routing order.
pub fn write_dump_csv(path: &Path, records: &[PositionRecord]) -> Result<()> {
    let mut w = csv_writer(path)?;
    w.write_record(["source", "token_id", "layer", "experts"])?;
    for r in records {
        for (l, sel) in r.selected.iter().enumerate() {
            let experts = sel
                .iter()
                .map(|e| e.to_string())
                .collect::<Vec<_>>()
                .join(" ");
            w.write_record([
                r.source.clone(),
                r.token.to_string(),
                l.to_string(),
                experts,
            ])?;
        }
    }
    finish(w, path)
}

pub fn read_dump_csv(path: &Path, layers: usize) -> Result<Vec<PositionRecord>> {
    let mut r = csv::Reader::from_path(path)?;
    let mut out: Vec<PositionRecord> = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let layer: usize = parse_field(&rec, 2, path)?;
        let experts = rec[3]
            .split_whitespace()
            .map(|s| s.parse().map_err(|_| bad_field(path, &rec, 3)))
            .collect::<Result<Vec<usize>>>()?;
        if layer == 0 {
            out.push(PositionRecord {
                source: rec[0].to_string(),
                token: parse_field(&rec, 1, path)?,
                selected: Vec::with_capacity(layers),
            });
        }
        match out.last_mut() {
            Some(p) if p.selected.len() == layer => p.selected.push(experts),
            _ => return Err(bad_field(path, &rec, 2)),
        }
    }
    Ok(out)
}

fn bad_field(path: &Path, rec: &csv::StringRecord, i: usize) -> Error {
    Error::Data(format!(
        "{}: bad value `{}` in column {} of line {}",
        path.display(),
        rec.get(i).unwrap_or(""),
        i + 1,
        rec.position().map_or(0, |p| p.line())
    ))
}

fn parse_field<T: std::str::FromStr>(rec: &csv::StringRecord, i: usize, path: &Path) -> Result<T> {
    rec.get(i)
        .and_then(|s| s.parse().ok())
        .ok_or_else(|| bad_field(path, rec, i))
}

/// Whitespace-delimited plot data with a `#` header line.
pub fn write_plot_data(path: &Path, columns: &[&str], rows: &[Vec<f64>]) -> Result<()> {
    let mut out = format!("# {}\n", columns.join(" "));
    for r in rows {
        let line = r
            .iter()
            .map(|v| v.to_string())
            .collect::<Vec<_>>()
            .join(" ");
        out.push_str(&line);
        out.push('\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(out.as_bytes()))
        .map_err(|e| Error::io(path, e))
}

/// Experts-over-training plot data from a metrics log.
pub fn write_training_dat(path: &Path, records: &[MetricsRecord]) -> Result<()> {
    let layers = records
        .first()
        .map_or(0, |r| r.mean_experts_per_layer.len());
    let mut cols = vec!["step".to_string(), "mean_experts".into(), "loss_lm".into()];
    cols.extend((0..layers).map(|i| format!("layer{i}")));
    let cols: Vec<&str> = cols.iter().map(String::as_str).collect();
    let rows: Vec<Vec<f64>> = records
        .iter()
        .map(|r| {
            let mut v = vec![r.step as f64, r.mean_experts, r.loss_lm];
            v.extend(&r.mean_experts_per_layer);
            v
        })
        .collect();
    write_plot_data(path, &cols, &rows)
}

/// Writes the stats tables into `dir`; returns the created files.
pub fn emit_stats_report(
    stats: &RoutingStats,
    dir: &Path,
    min_occurrences: u64,
) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let layers = layer_profile(stats);
    let tokens = token_profile(stats, min_occurrences);
    let files = [
        "layers.csv",
        "layers.dat",
        "tokens.csv",
        "tokens_top.csv",
        "tokens_bottom.csv",
        "sources.csv",
        "byte_classes.csv",
    ]
    .map(|f| dir.join(f));
    write_layer_csv(&files[0], &layers)?;
    let rows: Vec<Vec<f64>> = layers
        .iter()
        .map(|r| vec![r.layer as f64, r.mean_experts])
        .collect();
    write_plot_data(&files[1], &["layer", "mean_experts"], &rows)?;
    write_token_csv(&files[2], &tokens.rows)?;
    let (top, bottom) = if tokens.rows.is_empty() {
        (&[][..], &[][..])
    } else {
        (tokens.top_decile(), tokens.bottom_decile())
    };
    write_token_csv(&files[3], top)?;
    write_token_csv(&files[4], bottom)?;
    write_source_csv(&files[5], stats)?;
    write_byte_class_csv(&files[6], stats)?;
    Ok(files.to_vec())
}

pub fn emit_sweep_report(report: &SweepReport, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let csv_path = dir.join("sweep.csv");
    let dat_path = dir.join("sweep.dat");
    write_sweep_csv(&csv_path, report)?;
    let rows: Vec<Vec<f64>> = report
        .rows
        .iter()
        .map(|r| vec![r.p, r.mean_experts, r.eval_loss_nats])
        .collect();
    write_plot_data(&dat_path, &["p", "mean_experts", "eval_loss_nats"], &rows)?;
    Ok(vec![csv_path, dat_path])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> RoutingStats {
        let mut s = RoutingStats::new(2, 4);
        s.record(b'a' as u32, "x", &[&[0, 1, 2], &[3]]).unwrap();
        s.record(b'a' as u32, "y", &[&[1], &[0, 2]]).unwrap();
        s.record(b'1' as u32, "x", &[&[2, 3], &[1]]).unwrap();
        s
    }

    #[test]
    fn single_token_mean() {
        let mut s = RoutingStats::new(1, 4);
        s.record(7, "src", &[&[0, 1, 3]]).unwrap();
        assert_eq!(s.total_tokens(), 1);
        let p = token_profile(&s, 1);
        assert_eq!(
            p.rows,
            vec![TokenRow {
                token_id: 7,
                occurrences: 1,
                mean_experts: 3.0
            }]
        );
    }

    #[test]
    fn min_occurrence_filter() {
        let s = toy();
        let p = token_profile(&s, 2);
        assert_eq!(p.rows.len(), 1);
        assert_eq!(p.rows[0].token_id, b'a' as u32);
        assert_eq!(p.rows[0].mean_experts, 7.0 / 4.0);
    }

    #[test]
    fn counters_agree() {
        let mut s = toy();
        assert_eq!(s.layer_tokens, vec![3, 3]);
        assert_eq!(s.layer_activated, vec![6, 4]);
        assert_eq!(s.expert_hits[0], vec![1, 2, 2, 1]);
        assert_eq!(s.sources["x"].activated, 7);
        assert_eq!(s.global_mean(), 10.0 / 6.0);
        assert!(s.record(0, "x", &[&[5], &[0]]).is_err());
    }

    #[test]
    fn spearman_known_values() {
        assert_eq!(spearman(&[0.0, 1.0, 2.0], &[3.0, 2.0, 1.0]), Some(-1.0));
        assert_eq!(
            spearman(&[0.0, 1.0, 2.0, 3.0], &[1.0, 4.0, 9.0, 16.0]),
            Some(1.0)
        );
        assert_eq!(spearman(&[0.0, 1.0], &[2.0, 2.0]), None);
        let r = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[2.0, 1.0, 4.0, 3.0, 5.0]).unwrap();
        assert!((r - 0.8).abs() < 1e-12);
    }

    #[test]
    fn byte_classes_and_repr() {
        assert_eq!(ByteClass::of(b'q'), ByteClass::Letter);
        assert_eq!(ByteClass::of(b'7'), ByteClass::Digit);
        assert_eq!(ByteClass::of(b';'), ByteClass::Punctuation);
        assert_eq!(ByteClass::of(b'\n'), ByteClass::Whitespace);
        assert_eq!(ByteClass::of(0xC3), ByteClass::Other);
        assert_eq!(byte_repr(b'\n' as u32), "\\n");
        assert_eq!(byte_repr(b' ' as u32), "\\x20");
        assert_eq!(byte_repr(0xC3), "\\xc3");
        assert_eq!(byte_repr(b'A' as u32), "A");
    }

    #[test]
    fn empty_stats_give_header_only_csv() {
        let dir = tempfile::tempdir().unwrap();
        let files = emit_stats_report(&RoutingStats::new(3, 4), dir.path(), 1).unwrap();
        let layers = std::fs::read_to_string(&files[0]).unwrap();
        assert_eq!(layers, "layer,mean_experts,token_count\n");
        let tokens = std::fs::read_to_string(&files[2]).unwrap();
        assert_eq!(tokens, "token_id,byte_repr,occurrences,mean_experts\n");
    }

    #[test]
    fn dump_roundtrip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("dump.csv");
        let recs = vec![
            PositionRecord {
                source: "a".into(),
                token: 10,
                selected: vec![vec![2, 0], vec![1]],
            },
            PositionRecord {
                source: "b,c".into(),
                token: 32,
                selected: vec![vec![3], vec![0, 1, 2]],
            },
        ];
        write_dump_csv(&path, &recs).unwrap();
        assert_eq!(read_dump_csv(&path, 2).unwrap(), recs);
    }
}
