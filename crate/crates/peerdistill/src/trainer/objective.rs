//! Per-step loss assembly: summed cross-entropy over peers, the softened
//! distillation term into the deployment peer, and the weighted contrastive
//! term, with gradients routed back to each peer's logits and embeddings.

use crate::config::TrainConfig;
use crate::contrastive::{total_contrastive_with_grad, MemoryBank};
use crate::error::Result;
use crate::graph::PeerOutput;
use crate::losses::{ce_batch_with_grad, combine, kl_batch_with_grad, LossBundle};
use ndarray::Array2;
use rand_chacha::ChaCha20Rng;

/// Loss values plus the gradients that enter the graph backward pass.
pub(crate) struct StepGrads {
    pub bundle: LossBundle,
    pub dlogits: Vec<Array2<f64>>,
    pub dembeds: Vec<Array2<f64>>,
}

/// Assemble the full objective for one batch. The gradients already carry
/// the temperature-squared and beta weights, so the caller feeds them to the
/// backward pass unscaled.
pub(crate) fn objective(
    outputs: &[PeerOutput],
    labels: &[usize],
    banks: &[MemoryBank],
    cfg: &TrainConfig,
    rng: &mut ChaCha20Rng,
) -> Result<StepGrads> {
    let m = outputs.len();
    let mut dlogits = Vec::with_capacity(m);
    let mut ce_total = 0.0;
    for out in outputs {
        let (ce, grad) = ce_batch_with_grad(&out.logits, labels);
        ce_total += ce;
        dlogits.push(grad);
    }

    let mut kl = 0.0;
    if cfg.distill {
        let all_logits: Vec<Array2<f64>> = outputs.iter().map(|o| o.logits.clone()).collect();
        let (kl_value, kl_grads) = kl_batch_with_grad(&all_logits, cfg.temperature, cfg.kl_detach);
        kl = kl_value;
        let t2 = cfg.temperature * cfg.temperature;
        for (peer, grad) in kl_grads.into_iter().enumerate() {
            if let Some(g) = grad {
                dlogits[peer] += &(g * t2);
            }
        }
    }

    let b = outputs[0].logits.nrows();
    let d = outputs[0].embeddings.ncols();
    let mut dembeds: Vec<Array2<f64>> = (0..m).map(|_| Array2::zeros((b, d))).collect();
    let mut contrastive = 0.0;
    if cfg.beta > 0.0 {
        let embeds: Vec<Array2<f64>> =
            outputs.iter().map(|o| o.embeddings.clone()).collect();
        let (value, grads) =
            total_contrastive_with_grad(&embeds, banks, labels, cfg.tau, cfg.negatives, rng)?;
        contrastive = value;
        for (peer, grad) in grads.into_iter().enumerate() {
            dembeds[peer] = grad * cfg.beta;
        }
    }

    let bundle = combine(ce_total, kl, contrastive, cfg.temperature, cfg.beta)?;
    Ok(StepGrads {
        bundle,
        dlogits,
        dembeds,
    })
}
