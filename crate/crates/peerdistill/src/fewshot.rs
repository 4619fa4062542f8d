//! Prototypical episodic evaluation of representation quality.
//!
//! Episodes draw a handful of classes, compute per-class prototypes from
//! support embeddings, and classify queries by nearest prototype. The model
//! under test only has to map images to embedding rows; by default the
//! deployment peer's pooled features are used, with the contrastive head as
//! a config switch.

use crate::data::{sample_episode, IndexedDataset};
use crate::error::{Error, Result};
use crate::graph::PeerGraph;
use ndarray::{Array2, Axis};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;
use serde::Serialize;
use sha2::{Digest, Sha256};

/// Which representation of the deployment peer feeds the episodes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmbedSource {
    /// Pooled convolutional features of the deployment network (the
    /// representation that ships).
    DeployGap,
    /// The auxiliary contrastive projection head.
    ContrastiveHead,
}

impl std::str::FromStr for EmbedSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gap" => Ok(EmbedSource::DeployGap),
            "head" => Ok(EmbedSource::ContrastiveHead),
            other => Err(Error::invalid(format!(
                "unknown embedding source '{other}' (expected gap|head)"
            ))),
        }
    }
}

/// Embed every instance of a dataset with the deployment peer, one row per
/// instance. Doing this once up front makes the 600-episode sweep cheap.
pub fn embed_dataset(
    graph: &PeerGraph,
    source: EmbedSource,
    data: &IndexedDataset,
) -> Result<Array2<f64>> {
    if data.is_empty() {
        return Err(Error::invalid("cannot embed an empty dataset"));
    }
    let deploy = graph.export_deployment();
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut rows: Option<Array2<f64>> = None;
    for chunk in indices.chunks(256) {
        let (images, _) = data.batch(chunk);
        let batch_rows = match source {
            EmbedSource::DeployGap => deploy.forward_with_features(&images)?.1,
            EmbedSource::ContrastiveHead => {
                let (outputs, _) = graph.forward(&images)?;
                outputs[graph.peer_count() - 1].embeddings.clone()
            }
        };
        rows = Some(match rows {
            None => batch_rows,
            Some(acc) => ndarray::concatenate(Axis(0), &[acc.view(), batch_rows.view()])
                .expect("row dims agree across batches"),
        });
    }
    Ok(rows.unwrap())
}

/// Content-hashed pseudo-random unit embeddings: a chance-level reference
/// model. Identical images map to identical rows.
pub fn random_embeddings(data: &IndexedDataset, dim: usize) -> Result<Array2<f64>> {
    if dim == 0 {
        return Err(Error::invalid("embedding dim must be positive"));
    }
    let mut out = Array2::zeros((data.len(), dim));
    for i in 0..data.len() {
        let mut hasher = Sha256::new();
        for v in data.image(i).iter() {
            hasher.update(v.to_le_bytes());
        }
        let digest = hasher.finalize();
        let mut seed = [0u8; 32];
        seed.copy_from_slice(&digest);
        let mut rng = ChaCha20Rng::from_seed(seed);
        let v: Vec<f64> = (0..dim).map(|_| crate::init::standard_normal(&mut rng)).collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-12);
        for (j, x) in v.iter().enumerate() {
            out[[i, j]] = x / norm;
        }
    }
    Ok(out)
}

/// Arithmetic mean of each class's support embeddings. `groups` holds row
/// indices into `embeddings`, one list per episode class.
pub fn compute_prototypes(embeddings: &Array2<f64>, groups: &[Vec<usize>]) -> Result<Array2<f64>> {
    if groups.is_empty() {
        return Err(Error::invalid("need at least one class"));
    }
    let d = embeddings.ncols();
    let mut protos = Array2::zeros((groups.len(), d));
    for (g, group) in groups.iter().enumerate() {
        if group.is_empty() {
            return Err(Error::invalid(format!("class {g} has no support instances")));
        }
        for &row in group {
            for j in 0..d {
                protos[[g, j]] += embeddings[[row, j]];
            }
        }
        for j in 0..d {
            protos[[g, j]] /= group.len() as f64;
        }
    }
    Ok(protos)
}

/// Nearest prototype by squared Euclidean distance; ties break to the lowest
/// class index.
pub fn classify_queries(queries: &Array2<f64>, prototypes: &Array2<f64>) -> Result<Vec<usize>> {
    if prototypes.nrows() == 0 {
        return Err(Error::invalid("prototypes must be non-empty"));
    }
    let mut out = Vec::with_capacity(queries.nrows());
    for q in queries.rows() {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (c, p) in prototypes.rows().into_iter().enumerate() {
            let d: f64 = q
                .iter()
                .zip(p.iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            if d < best_d {
                best_d = d;
                best = c;
            }
        }
        out.push(best);
    }
    Ok(out)
}

/// Mean episodic accuracy with its 95% confidence interval.
#[derive(Debug, Clone, Serialize)]
pub struct FewShotResult {
    pub way: usize,
    pub shot: usize,
    pub episodes: usize,
    pub mean: f64,
    pub ci: f64,
}

/// Run the episodic protocol over precomputed embeddings (one row per
/// dataset instance). Accuracy is in percent; the interval is
/// `1.96 * std / sqrt(episodes)`, zero for a single episode.
pub fn episodic_accuracy<R: Rng + ?Sized>(
    embeddings: &Array2<f64>,
    dataset: &IndexedDataset,
    way: usize,
    shot: usize,
    query_per_class: usize,
    episodes: usize,
    rng: &mut R,
) -> Result<FewShotResult> {
    if episodes < 1 {
        return Err(Error::invalid("need at least one episode"));
    }
    if embeddings.nrows() != dataset.len() {
        return Err(Error::invalid(
            "need exactly one embedding row per dataset instance",
        ));
    }
    let mut accuracies = Vec::with_capacity(episodes);
    for _ in 0..episodes {
        let ep = sample_episode(dataset, way, shot, query_per_class, rng)?;
        let protos = compute_prototypes(embeddings, &ep.support)?;
        let mut correct = 0usize;
        let mut total = 0usize;
        for (class_pos, queries) in ep.query.iter().enumerate() {
            let mut q = Array2::zeros((queries.len(), embeddings.ncols()));
            for (r, &idx) in queries.iter().enumerate() {
                q.row_mut(r).assign(&embeddings.row(idx));
            }
            let preds = classify_queries(&q, &protos)?;
            correct += preds.iter().filter(|&&p| p == class_pos).count();
            total += queries.len();
        }
        accuracies.push(100.0 * correct as f64 / total as f64);
    }
    let n = accuracies.len();
    let mean = accuracies.iter().sum::<f64>() / n as f64;
    let ci = if n < 2 {
        0.0
    } else {
        let var = accuracies
            .iter()
            .map(|a| (a - mean) * (a - mean))
            .sum::<f64>()
            / (n - 1) as f64;
        1.96 * var.sqrt() / (n as f64).sqrt()
    };
    Ok(FewShotResult {
        way,
        shot,
        episodes,
        mean,
        ci,
    })
}
