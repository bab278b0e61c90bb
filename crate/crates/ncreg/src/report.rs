//! Output documents: the registration report, metric tables, training
//! history and checkpoint metadata.

use std::fmt::Write as _;

use ncreg_core::{LossBreakdown, MetricReport, RegistrationResult, TrainHistory};
use serde::Serialize;

use crate::cloud_io::fmt_f64;
use crate::error::{CliError, CliResult};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LossDoc {
    pub global_alignment: f64,
    pub neighborhood_consensus: f64,
    pub spatial_consistency: f64,
    pub total: f64,
}

impl From<&LossBreakdown> for LossDoc {
    fn from(l: &LossBreakdown) -> Self {
        Self {
            global_alignment: l.global_alignment,
            neighborhood_consensus: l.neighborhood_consensus,
            spatial_consistency: l.spatial_consistency,
            total: l.total,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IterationDoc {
    pub iteration: usize,
    /// Increment of this iteration, homogeneous and row-major.
    pub increment: [[f64; 4]; 4],
    pub losses: LossDoc,
    pub inlier_weights: Vec<f64>,
}

/// What `ncreg register` writes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RegisterReport {
    pub source: String,
    pub target: String,
    pub source_points: usize,
    pub target_points: usize,
    /// Maps source coordinates onto the target, homogeneous and row-major.
    pub transform: [[f64; 4]; 4],
    pub iterations: Vec<IterationDoc>,
    pub total_loss: f64,
    pub config_hash: String,
    pub weights_sha256: String,
    /// Seed of the run configuration; registration itself draws no randomness.
    pub seed: u64,
}

impl RegisterReport {
    pub fn iteration_docs(result: &RegistrationResult) -> Vec<IterationDoc> {
        result
            .per_iteration
            .iter()
            .enumerate()
            .map(|(i, r)| IterationDoc {
                iteration: i + 1,
                increment: r.increment.to_rows(),
                losses: LossDoc::from(&r.losses),
                inlier_weights: r.weights.clone(),
            })
            .collect()
    }

    pub fn to_json(&self) -> CliResult<String> {
        let mut s = serde_json::to_string_pretty(self)
            .map_err(|e| CliError::Config(format!("report is not serializable: {e}")))?;
        s.push('\n');
        Ok(s)
    }
}

pub const METRIC_COLUMNS: [&str; 6] = ["mae_r", "mae_t", "mie_r", "mie_t", "chamfer", "gimbal_lock"];

fn metric_fields(m: &MetricReport) -> [String; 6] {
    [
        fmt_f64(m.mae_r),
        fmt_f64(m.mae_t),
        fmt_f64(m.mie_r),
        fmt_f64(m.mie_t),
        fmt_f64(m.chamfer),
        m.gimbal_lock.to_string(),
    ]
}

fn csv_string(rows: Vec<Vec<String>>) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.write_record(&r).expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("utf8")
}

pub fn mean_metrics(rows: &[MetricReport]) -> MetricReport {
    let n = rows.len().max(1) as f64;
    let mut m = MetricReport::default();
    for r in rows {
        m.mae_r += r.mae_r / n;
        m.mae_t += r.mae_t / n;
        m.mie_r += r.mie_r / n;
        m.mie_t += r.mie_t / n;
        m.chamfer += r.chamfer / n;
        m.gimbal_lock |= r.gimbal_lock;
    }
    m
}

/// One row per `(pair id, seed, metrics)`, sorted by id, then a `mean` row.
pub fn eval_csv(rows: &[(usize, u64, MetricReport)]) -> String {
    let mut rows = rows.to_vec();
    rows.sort_by_key(|r| r.0);
    let mut out = vec![["pair", "seed"]
        .into_iter()
        .chain(METRIC_COLUMNS)
        .map(String::from)
        .collect::<Vec<_>>()];
    for (id, seed, m) in &rows {
        let mut r = vec![id.to_string(), seed.to_string()];
        r.extend(metric_fields(m));
        out.push(r);
    }
    let metrics: Vec<MetricReport> = rows.iter().map(|r| r.2).collect();
    let mut mean = vec!["mean".to_string(), String::new()];
    mean.extend(metric_fields(&mean_metrics(&metrics)));
    out.push(mean);
    csv_string(out)
}

/// Per-method means in the column order MAE(R), MAE(t), MIE(R), MIE(t).
pub fn bench_csv(rows: &[(String, MetricReport)]) -> String {
    let mut out = vec![["method", "MAE(R)", "MAE(t)", "MIE(R)", "MIE(t)"]
        .into_iter()
        .map(String::from)
        .collect::<Vec<_>>()];
    for (name, m) in rows {
        out.push(vec![
            name.clone(),
            fmt_f64(m.mae_r),
            fmt_f64(m.mae_t),
            fmt_f64(m.mie_r),
            fmt_f64(m.mie_t),
        ]);
    }
    csv_string(out)
}

pub fn history_csv(history: &TrainHistory) -> String {
    let mut header: Vec<String> = [
        "epoch",
        "learning_rate",
        "global_alignment",
        "neighborhood_consensus",
        "spatial_consistency",
        "total",
        "skipped",
    ]
    .into_iter()
    .map(String::from)
    .collect();
    header.extend(METRIC_COLUMNS.iter().map(|c| format!("holdout_{c}")));
    let mut out = vec![header];
    for e in &history.epochs {
        let mut r = vec![
            (e.epoch + 1).to_string(),
            fmt_f64(e.learning_rate),
            fmt_f64(e.loss.global_alignment),
            fmt_f64(e.loss.neighborhood_consensus),
            fmt_f64(e.loss.spatial_consistency),
            fmt_f64(e.loss.total),
            e.skipped.to_string(),
        ];
        match &e.holdout {
            Some(m) => r.extend(metric_fields(m)),
            None => r.extend(std::iter::repeat_n(String::new(), METRIC_COLUMNS.len())),
        }
        out.push(r);
    }
    csv_string(out)
}

/// `key = value` lines stored next to a weights file.
pub fn checkpoint_meta(epochs: usize, config_hash: &str, seed: u64, pairs: usize) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "epoch = {epochs}");
    let _ = writeln!(s, "config_hash = \"{config_hash}\"");
    let _ = writeln!(s, "seed = {seed}");
    let _ = writeln!(s, "training_pairs = {pairs}");
    s
}
