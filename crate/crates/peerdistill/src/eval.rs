//! Top-1 error for the deployment network and the peer ensemble.

use crate::data::IndexedDataset;
use crate::error::{Error, Result};
use crate::graph::{DeployNet, PeerGraph};
use ndarray::Array2;
use serde::Serialize;

/// Batch size used when sweeping a dataset.
const EVAL_BATCH: usize = 256;

/// Argmax per row; ties resolve to the lowest class index.
pub fn predictions(logits: &Array2<f64>) -> Vec<usize> {
    logits
        .rows()
        .into_iter()
        .map(|row| {
            let mut best = 0;
            let mut best_v = f64::NEG_INFINITY;
            for (i, &v) in row.iter().enumerate() {
                if v > best_v {
                    best_v = v;
                    best = i;
                }
            }
            best
        })
        .collect()
}

/// Percentage of misclassified rows.
pub fn error_from_logits(logits: &Array2<f64>, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    if logits.nrows() != labels.len() {
        return Err(Error::invalid("logit rows and labels disagree"));
    }
    let wrong = predictions(logits)
        .iter()
        .zip(labels)
        .filter(|(p, l)| p != l)
        .count();
    Ok(100.0 * wrong as f64 / labels.len() as f64)
}

/// Top-1 error of the standalone deployment network, in percent.
pub fn top1_error(model: &DeployNet, data: &IndexedDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let mut wrong = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (images, labels) = data.batch(chunk);
        let logits = model.forward(&images)?;
        wrong += predictions(&logits)
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p != l)
            .count();
    }
    Ok(100.0 * wrong as f64 / data.len() as f64)
}

/// Top-1 error of one peer inside the full graph, in percent.
pub fn peer_top1_error(graph: &PeerGraph, peer: usize, data: &IndexedDataset) -> Result<f64> {
    if peer >= graph.peer_count() {
        return Err(Error::invalid(format!("no peer {peer}")));
    }
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let mut wrong = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (images, labels) = data.batch(chunk);
        let (outputs, _) = graph.forward(&images)?;
        wrong += predictions(&outputs[peer].logits)
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p != l)
            .count();
    }
    Ok(100.0 * wrong as f64 / data.len() as f64)
}

/// Top-1 error of the averaged-logits ensemble over all peers, in percent.
pub fn ensemble_top1_error(graph: &PeerGraph, data: &IndexedDataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::invalid("cannot evaluate an empty dataset"));
    }
    let m = graph.peer_count() as f64;
    let mut wrong = 0usize;
    let indices: Vec<usize> = (0..data.len()).collect();
    for chunk in indices.chunks(EVAL_BATCH) {
        let (images, labels) = data.batch(chunk);
        let (outputs, _) = graph.forward(&images)?;
        let mut mean = outputs[0].logits.clone();
        for out in &outputs[1..] {
            mean += &out.logits;
        }
        mean /= m;
        wrong += predictions(&mean)
            .iter()
            .zip(&labels)
            .filter(|(p, l)| p != l)
            .count();
    }
    Ok(100.0 * wrong as f64 / data.len() as f64)
}

/// One row of a results table: a method evaluated over several seeds.
#[derive(Debug, Clone, Serialize)]
pub struct SummaryRow {
    pub method: String,
    pub seeds: Vec<u64>,
    pub errors: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

impl SummaryRow {
    pub fn new(method: impl Into<String>, seeds: Vec<u64>, errors: Vec<f64>) -> Self {
        let n = errors.len().max(1) as f64;
        let mean = errors.iter().sum::<f64>() / n;
        let var = errors.iter().map(|e| (e - mean) * (e - mean)).sum::<f64>() / n;
        SummaryRow {
            method: method.into(),
            seeds,
            errors,
            mean,
            std: var.sqrt(),
        }
    }
}

/// Plain-text rendering, one `method  mean ± std` line per row.
pub fn render_table(rows: &[SummaryRow]) -> String {
    let width = rows.iter().map(|r| r.method.len()).max().unwrap_or(6).max(6);
    let mut out = String::new();
    out.push_str(&format!("{:width$}  top-1 error (%)\n", "method", width = width));
    for row in rows {
        out.push_str(&format!(
            "{:width$}  {:.2} ± {:.2}\n",
            row.method,
            row.mean,
            row.std,
            width = width
        ));
    }
    out
}
