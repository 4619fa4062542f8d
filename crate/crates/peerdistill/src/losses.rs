//! Classification and distillation losses.
//!
//! Pure, stateless functions: temperature softmax, cross-entropy against hard
//! labels, the softened ensemble teacher built from averaged peer logits, the
//! KL alignment term, and the weighted combination of all three objectives.

use crate::error::{Error, Result};
use ndarray::{Array1, Array2, ArrayView1};

/// Floor applied inside every `log` so degenerate distributions produce large
/// but finite losses.
pub const LOG_FLOOR: f64 = 1e-12;

/// Clamp a probability-like value to the logarithm floor. Unlike `f64::max`
/// this lets non-finite values pass through, so a poisoned forward pass
/// surfaces as a non-finite loss instead of a silently clamped one.
pub(crate) fn floored(x: f64) -> f64 {
    if x < LOG_FLOOR {
        LOG_FLOOR
    } else {
        x
    }
}

/// Raw classifier outputs for one instance, length `C >= 2`, all finite.
#[derive(Debug, Clone, PartialEq)]
pub struct Logits(Vec<f64>);

impl Logits {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "logits need at least 2 classes, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("logits contain a non-finite entry"));
        }
        Ok(Logits(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// A probability distribution over `C` classes: entries nonnegative and
/// summing to one within 1e-6.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbDist(Vec<f64>);

impl ProbDist {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(format!(
                "distribution needs at least 2 classes, got {}",
                values.len()
            )));
        }
        if values.iter().any(|v| !v.is_finite() || *v < 0.0) {
            return Err(Error::invalid("distribution entries must be finite and >= 0"));
        }
        let sum: f64 = values.iter().sum();
        if (sum - 1.0).abs() > 1e-6 {
            return Err(Error::invalid(format!(
                "distribution sums to {sum}, expected 1 within 1e-6"
            )));
        }
        Ok(ProbDist(values))
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// Per-step scalar loss components together with the weights that combined
/// them. Invariant: `total = ce + t^2 * kl + beta * contrastive`.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossBundle {
    pub ce: f64,
    pub kl: f64,
    pub contrastive: f64,
    pub total: f64,
    pub t: f64,
    pub beta: f64,
}

impl LossBundle {
    /// Recompute the weighted sum and check it against the stored total.
    pub fn verify_total(&self, tol: f64) -> bool {
        let recomputed = self.ce + self.t * self.t * self.kl + self.beta * self.contrastive;
        (recomputed - self.total).abs() <= tol
    }
}

/// Temperature softmax of a logit vector, stabilized by a max shift.
pub fn softmax(logits: &Logits, temperature: f64) -> Result<ProbDist> {
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    Ok(ProbDist(softmax_slice(logits.as_slice(), temperature)))
}

/// Softmax on a raw slice. Internal building block, assumes finite input.
pub(crate) fn softmax_slice(z: &[f64], temperature: f64) -> Vec<f64> {
    let max = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = z.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = out.iter().sum();
    for v in &mut out {
        *v /= sum;
    }
    out
}

/// Row-wise temperature softmax over a `(batch, C)` matrix.
pub fn softmax_rows(z: &Array2<f64>, temperature: f64) -> Array2<f64> {
    let mut out = Array2::zeros(z.raw_dim());
    for (i, row) in z.rows().into_iter().enumerate() {
        let p = softmax_slice(row.as_slice().expect("standard layout"), temperature);
        out.row_mut(i).assign(&Array1::from(p));
    }
    out
}

/// Cross-entropy of a distribution against a hard label: `-log p[label]`,
/// floored so a zero probability stays finite.
pub fn cross_entropy(probs: &ProbDist, label: usize) -> Result<f64> {
    if label >= probs.len() {
        return Err(Error::invalid(format!(
            "label {label} out of range for {} classes",
            probs.len()
        )));
    }
    Ok(-floored(probs.as_slice()[label]).ln())
}

/// Softened ensemble teacher: softmax of the arithmetic mean of peer logits
/// at temperature `t`.
pub fn ensemble_soft_targets(all_logits: &[Logits], temperature: f64) -> Result<ProbDist> {
    if all_logits.is_empty() {
        return Err(Error::invalid("ensemble over an empty peer list"));
    }
    if temperature <= 0.0 || !temperature.is_finite() {
        return Err(Error::invalid(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    let c = all_logits[0].len();
    if all_logits.iter().any(|l| l.len() != c) {
        return Err(Error::invalid("peer logit lengths differ"));
    }
    let m = all_logits.len() as f64;
    let mut mean = vec![0.0; c];
    for l in all_logits {
        for (acc, v) in mean.iter_mut().zip(l.as_slice()) {
            *acc += v / m;
        }
    }
    Ok(ProbDist(softmax_slice(&mean, temperature)))
}

/// KL divergence `sum_c teacher_c * log(teacher_c / student_c)`. The teacher
/// is treated as a constant target; the student side is floored.
pub fn kl_divergence(teacher: &ProbDist, student: &ProbDist) -> Result<f64> {
    if teacher.len() != student.len() {
        return Err(Error::invalid(format!(
            "distribution lengths differ: {} vs {}",
            teacher.len(),
            student.len()
        )));
    }
    Ok(kl_slices(teacher.as_slice(), student.as_slice()))
}

pub(crate) fn kl_slices(teacher: &[f64], student: &[f64]) -> f64 {
    teacher
        .iter()
        .zip(student)
        .map(|(&t, &s)| {
            if t <= 0.0 {
                0.0
            } else {
                t * (t.ln() - floored(s).ln())
            }
        })
        .sum()
}

/// Weighted combination of the three objectives:
/// `total = ce + t^2 * kl + beta * contrastive`.
pub fn combine(ce: f64, kl: f64, contrastive: f64, t: f64, beta: f64) -> Result<LossBundle> {
    if t <= 0.0 || !t.is_finite() {
        return Err(Error::invalid(format!("t must be positive, got {t}")));
    }
    if beta < 0.0 || !beta.is_finite() {
        return Err(Error::invalid(format!("beta must be >= 0, got {beta}")));
    }
    Ok(LossBundle {
        ce,
        kl,
        contrastive,
        total: ce + t * t * kl + beta * contrastive,
        t,
        beta,
    })
}

/// Mean cross-entropy over a batch of logit rows plus its gradient with
/// respect to the logits (already divided by the batch size).
pub fn ce_batch_with_grad(logits: &Array2<f64>, labels: &[usize]) -> (f64, Array2<f64>) {
    let b = logits.nrows();
    assert_eq!(b, labels.len(), "batch size mismatch");
    let probs = softmax_rows(logits, 1.0);
    let mut grad = probs.clone();
    let mut loss = 0.0;
    for (i, &y) in labels.iter().enumerate() {
        loss += -floored(probs[[i, y]]).ln();
        grad[[i, y]] -= 1.0;
    }
    let bf = b as f64;
    grad.mapv_inplace(|v| v / bf);
    (loss / bf, grad)
}

/// Per-row dot product helper used by the KL gradients.
fn row_dot(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// Batched KL term of the distillation objective.
///
/// Teacher rows are the softened ensemble distribution of all peers, student
/// rows the softened distribution of the last peer. Returns the batch-mean KL
/// and the gradients of that mean with respect to every peer's logits: the
/// student peer always receives a gradient; the remaining entries are `None`
/// when `detach_teacher` is set and the teacher-path gradient otherwise.
pub fn kl_batch_with_grad(
    all_logits: &[Array2<f64>],
    t: f64,
    detach_teacher: bool,
) -> (f64, Vec<Option<Array2<f64>>>) {
    let m = all_logits.len();
    assert!(m >= 1, "need at least one peer");
    let b = all_logits[0].nrows();
    let c = all_logits[0].ncols();
    let bf = b as f64;

    let mut mean_logits = Array2::<f64>::zeros((b, c));
    for l in all_logits {
        mean_logits += &(l / m as f64);
    }
    let teacher = softmax_rows(&mean_logits, t);
    let student = softmax_rows(&all_logits[m - 1], t);

    let mut loss = 0.0;
    for i in 0..b {
        loss += kl_slices(
            teacher.row(i).as_slice().unwrap(),
            student.row(i).as_slice().unwrap(),
        );
    }
    loss /= bf;

    // Student side: d(mean KL)/dz_M = (student - teacher) / (T * B).
    let mut grads: Vec<Option<Array2<f64>>> = vec![None; m];
    let dstudent = (&student - &teacher) / (t * bf);
    grads[m - 1] = Some(dstudent);

    if !detach_teacher {
        // Teacher side: g_c = (ln t_c - ln s_c + 1) / B, pushed back through
        // the temperature softmax of the mean logits, then split across peers.
        let mut dmean = Array2::<f64>::zeros((b, c));
        for i in 0..b {
            let trow = teacher.row(i);
            let srow = student.row(i);
            let g = Array1::from_iter(
                trow.iter()
                    .zip(srow.iter())
                    .map(|(&tc, &sc)| (floored(tc).ln() - floored(sc).ln() + 1.0) / bf),
            );
            let inner = row_dot(g.view(), trow);
            for cidx in 0..c {
                dmean[[i, cidx]] = trow[cidx] * (g[cidx] - inner) / t;
            }
        }
        let share = dmean / m as f64;
        for g in grads.iter_mut().take(m - 1) {
            *g = Some(share.clone());
        }
        // The student peer also sits inside the ensemble mean.
        if let Some(gm) = grads[m - 1].as_mut() {
            *gm += &share;
        }
    }

    (loss, grads)
}
