//! Memory banks and NCE-based contrastive losses.
//!
//! Each peer owns a bank holding one unit embedding per training instance.
//! A directional loss contrasts an anchor embedding from one peer against the
//! same instance's real-time embedding from another peer (the positive) and
//! `K` different-label embeddings read from that peer's bank (the negatives).
//! Pairs of peers contribute both directions; the total sums over all
//! unordered pairs.

use crate::error::{Error, Result};
use crate::init::standard_normal;
use crate::losses::{floored, LOG_FLOOR};
use ndarray::{Array2, ArrayView2};
use rand::Rng;
use rand_chacha::ChaCha20Rng;
use rand::SeedableRng;

/// When the momentum blend of a bank update cancels to (near) zero there is
/// no direction to renormalize; the fresh embedding is stored instead.
const BLEND_NORM_FLOOR: f64 = 1e-9;

/// A unit-L2-norm vector in the contrastive embedding space.
#[derive(Debug, Clone, PartialEq)]
pub struct Embedding(Vec<f64>);

impl Embedding {
    /// Wrap a vector that is already unit norm (within 1e-5).
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("embedding must be non-empty"));
        }
        let norm = l2_norm(&values);
        if (norm - 1.0).abs() > 1e-5 {
            return Err(Error::invalid(format!(
                "embedding norm {norm} deviates from 1 by more than 1e-5"
            )));
        }
        Ok(Embedding(values))
    }

    /// Normalize an arbitrary nonzero vector onto the unit sphere.
    pub fn normalized(mut values: Vec<f64>) -> Result<Self> {
        let norm = l2_norm(&values);
        if norm < BLEND_NORM_FLOOR {
            return Err(Error::invalid("cannot normalize a (near-)zero vector"));
        }
        for v in &mut values {
            *v /= norm;
        }
        Ok(Embedding(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }
}

fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `K` negative embeddings read from a bank, all with labels different from
/// the anchor's.
#[derive(Debug, Clone)]
pub struct NegativeSample {
    pub indices: Vec<usize>,
    pub embeddings: Array2<f64>,
}

impl NegativeSample {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

/// Per-peer store of one unit embedding per training instance.
///
/// Labels are fixed at construction; rows are refreshed by a momentum blend
/// with the latest real-time embedding. The NCE normalizer estimate `z` is
/// computed once from the first batch and then frozen.
#[derive(Debug, Clone)]
pub struct MemoryBank {
    slots: Array2<f64>,
    labels: Vec<usize>,
    class_counts: Vec<usize>,
    rho: f64,
    z: Option<f64>,
}

impl MemoryBank {
    /// Create a bank of `n` random unit rows, deterministic under `seed`.
    pub fn init(n: usize, d: usize, labels: Vec<usize>, rho: f64, seed: u64) -> Result<Self> {
        if n < 2 {
            return Err(Error::invalid(format!("bank needs n >= 2, got {n}")));
        }
        if d < 1 {
            return Err(Error::invalid("bank needs d >= 1"));
        }
        if labels.len() != n {
            return Err(Error::invalid(format!(
                "got {} labels for {n} slots",
                labels.len()
            )));
        }
        if !(0.0..=1.0).contains(&rho) {
            return Err(Error::invalid(format!("rho must lie in [0,1], got {rho}")));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let mut slots = Array2::zeros((n, d));
        for mut row in slots.rows_mut() {
            loop {
                let v: Vec<f64> = (0..d).map(|_| standard_normal(&mut rng)).collect();
                let norm = l2_norm(&v);
                if norm > BLEND_NORM_FLOOR {
                    for (dst, x) in row.iter_mut().zip(v) {
                        *dst = x / norm;
                    }
                    break;
                }
            }
        }
        let class_counts = count_classes(&labels);
        Ok(MemoryBank {
            slots,
            labels,
            class_counts,
            rho,
            z: None,
        })
    }

    pub fn len(&self) -> usize {
        self.slots.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.slots.ncols()
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn slots(&self) -> ArrayView2<'_, f64> {
        self.slots.view()
    }

    pub fn z(&self) -> Option<f64> {
        self.z
    }

    /// Momentum-blend a fresh embedding into one slot and renormalize.
    pub fn update(&mut self, index: usize, v: &Embedding) -> Result<()> {
        if index >= self.len() {
            return Err(Error::invalid(format!(
                "bank index {index} out of range for {} slots",
                self.len()
            )));
        }
        if v.dim() != self.dim() {
            return Err(Error::invalid(format!(
                "embedding dim {} does not match bank dim {}",
                v.dim(),
                self.dim()
            )));
        }
        let mut blended: Vec<f64> = self
            .slots
            .row(index)
            .iter()
            .zip(v.as_slice())
            .map(|(&old, &new)| (1.0 - self.rho) * old + self.rho * new)
            .collect();
        let norm = l2_norm(&blended);
        if norm < BLEND_NORM_FLOOR {
            blended = v.as_slice().to_vec();
        } else {
            for x in &mut blended {
                *x /= norm;
            }
        }
        for (dst, x) in self.slots.row_mut(index).iter_mut().zip(blended) {
            *dst = x;
        }
        Ok(())
    }

    /// Draw `k` negatives uniformly with replacement from the slots whose
    /// label differs from `anchor_label`.
    pub fn sample_negatives<R: Rng + ?Sized>(
        &self,
        anchor_label: usize,
        k: usize,
        rng: &mut R,
    ) -> Result<NegativeSample> {
        if k < 1 {
            return Err(Error::invalid("need k >= 1 negatives"));
        }
        let same = self.class_counts.get(anchor_label).copied().unwrap_or(0);
        if same == self.len() {
            return Err(Error::NoNegatives { anchor_label });
        }
        let n = self.len();
        let mut indices = Vec::with_capacity(k);
        let mut embeddings = Array2::zeros((k, self.dim()));
        for slot in 0..k {
            // Rejection sampling keeps the draw uniform over eligible slots.
            let idx = loop {
                let cand = rng.gen_range(0..n);
                if self.labels[cand] != anchor_label {
                    break cand;
                }
            };
            indices.push(idx);
            embeddings.row_mut(slot).assign(&self.slots.row(idx));
        }
        Ok(NegativeSample {
            indices,
            embeddings,
        })
    }

    /// Indices of every slot whose label differs from `anchor_label`.
    pub fn eligible_negatives(&self, anchor_label: usize) -> Vec<usize> {
        (0..self.len())
            .filter(|&i| self.labels[i] != anchor_label)
            .collect()
    }

    /// Estimate the NCE normalizer as `n * mean exp(dot / tau)` over all
    /// (anchor, slot) pairs. The first call freezes the value; later calls
    /// return the stored estimate unchanged.
    pub fn estimate_z(&mut self, anchors: &Array2<f64>, tau: f64) -> Result<f64> {
        if let Some(z) = self.z {
            return Ok(z);
        }
        if anchors.nrows() == 0 {
            return Err(Error::invalid("z estimation needs at least one anchor"));
        }
        if tau <= 0.0 {
            return Err(Error::invalid(format!("tau must be positive, got {tau}")));
        }
        let mut acc = 0.0;
        for a in anchors.rows() {
            for s in self.slots.rows() {
                acc += (dot(a.as_slice().unwrap(), s.as_slice().unwrap()) / tau).exp();
            }
        }
        let pairs = (anchors.nrows() * self.len()) as f64;
        let z = self.len() as f64 * acc / pairs;
        self.z = Some(z);
        Ok(z)
    }

    /// Raw state for checkpointing.
    pub fn snapshot(&self) -> (Array2<f64>, Vec<usize>, f64, Option<f64>) {
        (self.slots.clone(), self.labels.clone(), self.rho, self.z)
    }

    /// Rebuild a bank from checkpointed state.
    pub fn from_snapshot(
        slots: Array2<f64>,
        labels: Vec<usize>,
        rho: f64,
        z: Option<f64>,
    ) -> Result<Self> {
        if slots.nrows() != labels.len() {
            return Err(Error::invalid("snapshot slot/label count mismatch"));
        }
        let class_counts = count_classes(&labels);
        Ok(MemoryBank {
            slots,
            labels,
            class_counts,
            rho,
            z,
        })
    }
}

fn count_classes(labels: &[usize]) -> Vec<usize> {
    let max = labels.iter().copied().max().unwrap_or(0);
    let mut counts = vec![0usize; max + 1];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}


/// Probability that `candidate` matches `anchor` as the positive pair:
/// `exp(anchor . candidate / tau) / z`.
pub fn match_probability(
    anchor: &Embedding,
    candidate: &Embedding,
    tau: f64,
    z: f64,
) -> Result<f64> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    if z <= 0.0 || !z.is_finite() {
        return Err(Error::invalid(format!("z must be positive, got {z}")));
    }
    Ok((dot(anchor.as_slice(), candidate.as_slice()) / tau).exp() / z)
}

/// Posterior probability that a candidate was drawn from the positive
/// distribution rather than from `k` uniform noise samples over `n` slots:
/// `p / (p + k/n)`.
pub fn nce_posterior(p_p: f64, k: usize, n: usize) -> Result<f64> {
    if n < 1 {
        return Err(Error::invalid("n must be >= 1"));
    }
    if !p_p.is_finite() || p_p < 0.0 {
        return Err(Error::invalid(format!("p_p must be >= 0, got {p_p}")));
    }
    let noise = k as f64 / n as f64;
    let denom = p_p + noise;
    if denom == 0.0 {
        return Err(Error::invalid("posterior undefined: p_p + k/n = 0"));
    }
    Ok(p_p / denom)
}

/// Exact per-anchor normalizer: the sum of `exp(dot / tau)` over every bank
/// slot. Used by the full-enumeration test mode.
pub fn exact_z(anchor: &[f64], slots: ArrayView2<'_, f64>, tau: f64) -> f64 {
    slots
        .rows()
        .into_iter()
        .map(|s| (dot(anchor, s.as_slice().unwrap()) / tau).exp())
        .sum()
}

/// One direction of the contrastive loss:
/// `-log h(anchor, positive) - sum_k log(1 - h(anchor, negative_k))`
/// where `h` is the NCE posterior of the match probability. Logs are floored.
pub fn directional_contrastive_loss(
    anchor: &Embedding,
    positive: &Embedding,
    negatives: &NegativeSample,
    tau: f64,
    z: f64,
    n: usize,
) -> Result<f64> {
    if negatives.is_empty() {
        return Err(Error::invalid("negatives must be non-empty"));
    }
    if tau <= 0.0 || z <= 0.0 {
        return Err(Error::invalid("tau and z must be positive"));
    }
    if n < 1 {
        return Err(Error::invalid("n must be >= 1"));
    }
    Ok(directional_loss_raw(
        anchor.as_slice(),
        positive.as_slice(),
        negatives.embeddings.view(),
        tau,
        z,
        n,
        negatives.len(),
    ))
}

/// Loss on raw vectors; `k_posterior` is the `K` inside the NCE posterior
/// (equal to the number of drawn negatives in sampled mode, and to the
/// eligible count in enumeration mode).
pub(crate) fn directional_loss_raw(
    anchor: &[f64],
    positive: &[f64],
    negatives: ArrayView2<'_, f64>,
    tau: f64,
    z: f64,
    n: usize,
    k_posterior: usize,
) -> f64 {
    let noise = k_posterior as f64 / n as f64;
    let h = |cand: &[f64]| {
        let p = (dot(anchor, cand) / tau).exp() / z;
        p / (p + noise)
    };
    let mut loss = -floored(h(positive)).ln();
    for neg in negatives.rows() {
        loss -= floored(1.0 - h(neg.as_slice().unwrap())).ln();
    }
    loss
}

/// Loss plus analytic gradients with respect to the anchor and the positive.
/// Bank-resident negatives are constants and receive no gradient.
pub(crate) fn directional_loss_grad(
    anchor: &[f64],
    positive: &[f64],
    negatives: ArrayView2<'_, f64>,
    tau: f64,
    z: f64,
    n: usize,
    k_posterior: usize,
) -> (f64, Vec<f64>, Vec<f64>) {
    let d = anchor.len();
    let noise = k_posterior as f64 / n as f64;
    let mut d_anchor = vec![0.0; d];
    let mut d_positive = vec![0.0; d];

    let p_pos = (dot(anchor, positive) / tau).exp() / z;
    let h_pos = p_pos / (p_pos + noise);
    let mut loss = -floored(h_pos).ln();
    if h_pos > LOG_FLOOR {
        // d(-ln h)/d anchor = -(1 - h) * positive / tau, symmetrically for
        // the positive side.
        let scale = -(1.0 - h_pos) / tau;
        for i in 0..d {
            d_anchor[i] += scale * positive[i];
            d_positive[i] += scale * anchor[i];
        }
    }

    for neg in negatives.rows() {
        let nv = neg.as_slice().unwrap();
        let p = (dot(anchor, nv) / tau).exp() / z;
        let h = p / (p + noise);
        let one_minus = 1.0 - h;
        loss -= floored(one_minus).ln();
        if one_minus > LOG_FLOOR {
            // d(-ln(1-h))/d anchor = h * negative / tau.
            let scale = h / tau;
            for i in 0..d {
                d_anchor[i] += scale * nv[i];
            }
        }
    }

    (loss, d_anchor, d_positive)
}

/// How negatives are obtained for the batch-level losses.
pub enum NegativeMode<'a> {
    /// Draw `k` negatives per anchor from the target bank using the frozen
    /// constant-z estimate. The training path.
    Sampled { k: usize, rng: &'a mut ChaCha20Rng },
    /// Enumerate every eligible slot and use the exact per-anchor z.
    /// Deterministic; used by verification and tests.
    Enumerate,
}

/// Both directions of the contrastive loss between two peers, each averaged
/// over the batch: `L(f_a, f_b) = L(a->b) + L(b->a)`.
///
/// Direction `a->b` takes anchors from `a_out`, positives from `b_out`, and
/// negatives plus the normalizer from `bank_b`; the reverse direction is
/// symmetric.
pub fn pairwise_loss(
    a_out: &Array2<f64>,
    b_out: &Array2<f64>,
    labels: &[usize],
    bank_a: &MemoryBank,
    bank_b: &MemoryBank,
    tau: f64,
    mode: &mut NegativeMode<'_>,
) -> Result<f64> {
    let fwd = directional_batch(a_out, b_out, labels, bank_b, tau, mode)?;
    let bwd = directional_batch(b_out, a_out, labels, bank_a, tau, mode)?;
    Ok(fwd + bwd)
}

fn directional_batch(
    anchors: &Array2<f64>,
    positives: &Array2<f64>,
    labels: &[usize],
    target_bank: &MemoryBank,
    tau: f64,
    mode: &mut NegativeMode<'_>,
) -> Result<f64> {
    let b = anchors.nrows();
    if b == 0 || b != positives.nrows() || b != labels.len() {
        return Err(Error::invalid("batch size mismatch across peers"));
    }
    let n = target_bank.len();
    let mut total = 0.0;
    for i in 0..b {
        let anchor = anchors.row(i);
        let anchor = anchor.as_slice().unwrap();
        let positive = positives.row(i);
        let positive = positive.as_slice().unwrap();
        total += match mode {
            NegativeMode::Sampled { k, rng } => {
                let z = target_bank
                    .z()
                    .ok_or_else(|| Error::invalid("bank z estimate has not been set"))?;
                let negs = target_bank.sample_negatives(labels[i], *k, *rng)?;
                directional_loss_raw(anchor, positive, negs.embeddings.view(), tau, z, n, *k)
            }
            NegativeMode::Enumerate => {
                let eligible = target_bank.eligible_negatives(labels[i]);
                if eligible.is_empty() {
                    return Err(Error::NoNegatives {
                        anchor_label: labels[i],
                    });
                }
                let z = exact_z(anchor, target_bank.slots(), tau);
                let negs = rows_at(target_bank.slots(), &eligible);
                directional_loss_raw(anchor, positive, negs.view(), tau, z, n, eligible.len())
            }
        };
    }
    Ok(total / b as f64)
}

fn rows_at(slots: ArrayView2<'_, f64>, indices: &[usize]) -> Array2<f64> {
    let mut out = Array2::zeros((indices.len(), slots.ncols()));
    for (row, &idx) in indices.iter().enumerate() {
        out.row_mut(row).assign(&slots.row(idx));
    }
    out
}

/// Sum of `pairwise_loss` over all unordered peer pairs; `M` peers yield
/// `M * (M-1) / 2` pairwise terms.
pub fn total_contrastive_loss(
    peer_outputs: &[Array2<f64>],
    banks: &[MemoryBank],
    labels: &[usize],
    tau: f64,
    mode: &mut NegativeMode<'_>,
) -> Result<f64> {
    let m = peer_outputs.len();
    if m < 2 {
        return Err(Error::invalid(format!(
            "contrastive term needs at least 2 peers, got {m}"
        )));
    }
    if banks.len() != m {
        return Err(Error::invalid("one bank per peer required"));
    }
    let mut total = 0.0;
    for a in 0..m {
        for b in (a + 1)..m {
            total += pairwise_loss(
                &peer_outputs[a],
                &peer_outputs[b],
                labels,
                &banks[a],
                &banks[b],
                tau,
                mode,
            )?;
        }
    }
    Ok(total)
}

/// Training-path total loss with gradients into every peer's embedding rows.
/// Returns the loss and one `(batch, d)` gradient matrix per peer.
pub fn total_contrastive_with_grad(
    peer_outputs: &[Array2<f64>],
    banks: &[MemoryBank],
    labels: &[usize],
    tau: f64,
    k: usize,
    rng: &mut ChaCha20Rng,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let m = peer_outputs.len();
    if m < 2 {
        return Err(Error::invalid(format!(
            "contrastive term needs at least 2 peers, got {m}"
        )));
    }
    let b = peer_outputs[0].nrows();
    let d = peer_outputs[0].ncols();
    let bf = b as f64;
    let mut grads: Vec<Array2<f64>> = (0..m).map(|_| Array2::zeros((b, d))).collect();
    let mut total = 0.0;

    for a in 0..m {
        for t in (a + 1)..m {
            for (anchor_peer, pos_peer) in [(a, t), (t, a)] {
                let bank = &banks[pos_peer];
                let z = bank
                    .z()
                    .ok_or_else(|| Error::invalid("bank z estimate has not been set"))?;
                let n = bank.len();
                let mut dir_loss = 0.0;
                for i in 0..b {
                    let anchor_row = peer_outputs[anchor_peer].row(i);
                    let pos_row = peer_outputs[pos_peer].row(i);
                    let negs = bank.sample_negatives(labels[i], k, rng)?;
                    let (loss, d_anchor, d_pos) = directional_loss_grad(
                        anchor_row.as_slice().unwrap(),
                        pos_row.as_slice().unwrap(),
                        negs.embeddings.view(),
                        tau,
                        z,
                        n,
                        k,
                    );
                    dir_loss += loss;
                    for j in 0..d {
                        grads[anchor_peer][[i, j]] += d_anchor[j] / bf;
                        grads[pos_peer][[i, j]] += d_pos[j] / bf;
                    }
                }
                total += dir_loss / bf;
            }
        }
    }
    Ok((total, grads))
}
