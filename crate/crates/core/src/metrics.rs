//! Evaluation suite: minimum average / final displacement error over K
//! predictions and grid-cell accuracy, plus whole-dataset model evaluation.
//!
//! Metric arithmetic runs in double precision over plain arrays; everything
//! here is a pure function safe to call from any thread.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{Backbone, ModelError};
use crate::rng::derive_seed;
use crate::world::Dataset;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("ragged metric input: {0}")]
    Ragged(String),
    #[error("checkpoint/dataset mismatch: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Model(#[from] ModelError),
}

fn dist(a: (f64, f64), b: (f64, f64)) -> f64 {
    ((a.0 - b.0).powi(2) + (a.1 - b.1).powi(2)).sqrt()
}

/// Minimum average displacement error over K predictions per sample: the
/// minimum is taken over each prediction's summed displacement, then
/// normalized by `N * (T - h)`.
pub fn min_ade_k(
    truths: &[Vec<(f64, f64)>],
    preds: &[Vec<Vec<(f64, f64)>>],
) -> Result<f64, MetricsError> {
    check_shapes(truths, preds)?;
    let horizon = truths[0].len();
    let mut total = 0.0;
    for (truth, pred_set) in truths.iter().zip(preds) {
        let best = pred_set
            .iter()
            .map(|p| {
                truth
                    .iter()
                    .zip(p)
                    .map(|(&a, &b)| dist(a, b))
                    .sum::<f64>()
            })
            .fold(f64::INFINITY, f64::min);
        total += best;
    }
    Ok(total / (truths.len() as f64 * horizon as f64))
}

/// Minimum final displacement error over K predictions per sample.
pub fn min_fde_k(
    truths: &[Vec<(f64, f64)>],
    preds: &[Vec<Vec<(f64, f64)>>],
) -> Result<f64, MetricsError> {
    check_shapes(truths, preds)?;
    let mut total = 0.0;
    for (truth, pred_set) in truths.iter().zip(preds) {
        let last = *truth.last().unwrap();
        let best = pred_set
            .iter()
            .map(|p| dist(last, *p.last().unwrap()))
            .fold(f64::INFINITY, f64::min);
        total += best;
    }
    Ok(total / truths.len() as f64)
}

fn check_shapes(
    truths: &[Vec<(f64, f64)>],
    preds: &[Vec<Vec<(f64, f64)>>],
) -> Result<(), MetricsError> {
    if truths.is_empty() || truths.len() != preds.len() {
        return Err(MetricsError::Ragged(format!(
            "{} truths vs {} prediction sets",
            truths.len(),
            preds.len()
        )));
    }
    let horizon = truths[0].len();
    if horizon == 0 {
        return Err(MetricsError::Ragged("empty horizon".into()));
    }
    for (i, (t, ps)) in truths.iter().zip(preds).enumerate() {
        if t.len() != horizon {
            return Err(MetricsError::Ragged(format!(
                "truth {i} has {} steps",
                t.len()
            )));
        }
        if ps.is_empty() {
            return Err(MetricsError::Ragged(format!(
                "sample {i} has no predictions"
            )));
        }
        for (k, p) in ps.iter().enumerate() {
            if p.len() != horizon {
                return Err(MetricsError::Ragged(format!(
                    "sample {i} prediction {k} has {} steps, expected {horizon}",
                    p.len()
                )));
            }
        }
    }
    Ok(())
}

/// Fraction of timesteps whose predicted cell equals the true cell,
/// micro-averaged over all `(sample, step)` pairs.
pub fn grid_acc(pred_cells: &[Vec<usize>], true_cells: &[Vec<usize>]) -> Result<f64, MetricsError> {
    if pred_cells.len() != true_cells.len() || pred_cells.is_empty() {
        return Err(MetricsError::Ragged(format!(
            "{} predictions vs {} truths",
            pred_cells.len(),
            true_cells.len()
        )));
    }
    let mut hits = 0usize;
    let mut total = 0usize;
    for (p, t) in pred_cells.iter().zip(true_cells) {
        if p.len() != t.len() {
            return Err(MetricsError::Ragged(
                "cell sequences differ in length".into(),
            ));
        }
        total += t.len();
        hits += p.iter().zip(t).filter(|(a, b)| a == b).count();
    }
    Ok(hits as f64 / total as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SampleEval {
    pub record_id: usize,
    pub ade: f64,
    pub fde: f64,
    pub correct_steps: usize,
    pub total_steps: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EvalReport {
    pub method: String,
    pub seed: u64,
    pub dataset: String,
    pub k: usize,
    pub n: usize,
    pub grid_acc: f64,
    pub min_ade: f64,
    pub min_fde: f64,
    pub per_sample: Vec<SampleEval>,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str = "method,seed,dataset,k,grid_acc,min_ade,min_fde";

    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{}",
            self.method, self.seed, self.dataset, self.k, self.grid_acc, self.min_ade, self.min_fde
        )
    }

    pub fn parse_csv_row(row: &str) -> Option<EvalReport> {
        let parts: Vec<&str> = row.split(',').collect();
        if parts.len() != 7 {
            return None;
        }
        Some(EvalReport {
            method: parts[0].to_string(),
            seed: parts[1].parse().ok()?,
            dataset: parts[2].to_string(),
            k: parts[3].parse().ok()?,
            grid_acc: parts[4].parse().ok()?,
            min_ade: parts[5].parse().ok()?,
            min_fde: parts[6].parse().ok()?,
            n: 0,
            per_sample: Vec::new(),
        })
    }
}

/// Run the model over every record's original view and score the decodes.
/// The first decode is greedy and supplies the cells for grid accuracy;
/// `k > 1` adds seeded sampled decodes for the minimum-over-K metrics.
pub fn evaluate(
    model: &Backbone<f32>,
    dataset: &Dataset,
    dataset_name: &str,
    k: usize,
    seed: u64,
) -> Result<EvalReport, MetricsError> {
    let cfg = &dataset.manifest.config;
    if model.cfg.grid != cfg.grid {
        return Err(MetricsError::ConfigMismatch(format!(
            "checkpoint grid {:?} vs dataset grid {:?}",
            model.cfg.grid, cfg.grid
        )));
    }
    if model.cfg.obs_len != cfg.obs_len || model.cfg.total_len != cfg.total_len {
        return Err(MetricsError::ConfigMismatch(format!(
            "checkpoint window {}/{} vs dataset {}/{}",
            model.cfg.obs_len, model.cfg.total_len, cfg.obs_len, cfg.total_len
        )));
    }
    if k == 0 {
        return Err(MetricsError::Ragged("k must be at least 1".into()));
    }
    let h = cfg.obs_len;

    struct PerRecord {
        record_id: usize,
        truth: Vec<(f64, f64)>,
        decodes: Vec<Vec<(f64, f64)>>,
        greedy_cells: Vec<usize>,
        true_cells: Vec<usize>,
    }

    let rows: Vec<Result<PerRecord, MetricsError>> = dataset
        .records
        .par_iter()
        .map(|rec| {
            let view = rec.original();
            let obs_cells = &view.cells[..h];
            let decode_seed = derive_seed(seed, &[0x6576616c, rec.record_id as u64]);
            let decoded = model.predict(&view.features_obs, obs_cells, k, decode_seed)?;
            Ok(PerRecord {
                record_id: rec.record_id,
                truth: view.pixels[h..].to_vec(),
                decodes: decoded.iter().map(|d| d.points.clone()).collect(),
                greedy_cells: decoded[0].cells.clone(),
                true_cells: view.cells[h..].to_vec(),
            })
        })
        .collect();

    let mut truths = Vec::new();
    let mut preds = Vec::new();
    let mut pred_cells = Vec::new();
    let mut true_cells = Vec::new();
    let mut per_sample = Vec::new();
    for row in rows {
        let r = row?;
        let ade = min_ade_k(std::slice::from_ref(&r.truth), std::slice::from_ref(&r.decodes))?;
        let fde = min_fde_k(std::slice::from_ref(&r.truth), std::slice::from_ref(&r.decodes))?;
        let correct = r
            .greedy_cells
            .iter()
            .zip(&r.true_cells)
            .filter(|(a, b)| a == b)
            .count();
        per_sample.push(SampleEval {
            record_id: r.record_id,
            ade,
            fde,
            correct_steps: correct,
            total_steps: r.true_cells.len(),
        });
        truths.push(r.truth);
        preds.push(r.decodes);
        pred_cells.push(r.greedy_cells);
        true_cells.push(r.true_cells);
    }

    Ok(EvalReport {
        method: String::new(),
        seed,
        dataset: dataset_name.to_string(),
        k,
        n: truths.len(),
        grid_acc: grid_acc(&pred_cells, &true_cells)?,
        min_ade: min_ade_k(&truths, &preds)?,
        min_fde: min_fde_k(&truths, &preds)?,
        per_sample,
    })
}
