//! Joint optimization of the peer ensemble: forward all peers, assemble the
//! objective, backpropagate, step the optimizer, then refresh the memory
//! banks at the batch's slots.

mod checkpoint;
mod objective;

pub use checkpoint::{restore_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub(crate) use objective::objective;

use crate::config::TrainConfig;
use crate::contrastive::{Embedding, MemoryBank};
use crate::data::{augment_batch, IndexedDataset};
use crate::error::{Error, Result};
use crate::eval::{peer_top1_error, predictions, SummaryRow};
use crate::graph::{DeployNet, PeerGraph};
use ndarray::{concatenate, Array4, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;
use std::time::Instant;

/// Everything that evolves during training.
#[derive(Debug)]
pub struct TrainState {
    pub graph: PeerGraph,
    pub banks: Vec<MemoryBank>,
    pub(crate) velocity: PeerGraph,
    pub epoch: usize,
    pub(crate) rng: ChaCha20Rng,
}

impl TrainState {
    /// Fresh state for the given config. `train_labels` are the labels of
    /// the instances the banks index, in slot order.
    pub fn new(cfg: &TrainConfig, train_labels: Vec<usize>) -> Result<Self> {
        let spec = cfg.backbone_spec();
        let graph = PeerGraph::build(&spec, cfg.peers, cfg.share_stem, cfg.seed)?;
        let velocity = graph.zeros_like();
        let banks = if cfg.beta > 0.0 {
            (0..cfg.peers)
                .map(|peer| {
                    MemoryBank::init(
                        train_labels.len(),
                        cfg.embed_dim,
                        train_labels.clone(),
                        cfg.rho,
                        cfg.seed.wrapping_add(0xBA4C).wrapping_add(peer as u64),
                    )
                })
                .collect::<Result<Vec<_>>>()?
        } else {
            Vec::new()
        };
        // The graph build consumed the raw seed; the training stream gets
        // its own derivation so the two never overlap.
        let rng = ChaCha20Rng::seed_from_u64(cfg.seed.wrapping_add(0x7472_6169));
        Ok(TrainState {
            graph,
            banks,
            velocity,
            epoch: 0,
            rng,
        })
    }
}

/// Outcome of one optimization step.
#[derive(Debug)]
pub struct StepReport {
    pub losses: crate::losses::LossBundle,
    /// Correct deployment-peer predictions on this batch, pre-step.
    pub deploy_correct: usize,
}

/// One batch: forward, objective, backward, parameter step, bank refresh.
/// `slots` are the bank positions of the batch instances.
pub fn train_step(
    state: &mut TrainState,
    images: &Array4<f64>,
    labels: &[usize],
    slots: &[usize],
    cfg: &TrainConfig,
    lr: f64,
) -> Result<StepReport> {
    let (outputs, cache) = state.graph.forward(images)?;
    let m = outputs.len();

    if cfg.beta > 0.0 && state.banks[0].z().is_none() {
        // The normalizer is estimated once, from the first batch each bank
        // sees, and stays constant afterwards.
        for peer in 0..m {
            let others: Vec<_> = (0..m)
                .filter(|&a| a != peer)
                .map(|a| outputs[a].embeddings.view())
                .collect();
            let anchors = concatenate(Axis(0), &others).expect("same embedding dim");
            state.banks[peer].estimate_z(&anchors, cfg.tau)?;
        }
    }

    let step = objective(&outputs, labels, &state.banks, cfg, &mut state.rng)?;
    let bundle = step.bundle;
    if !bundle.total.is_finite() {
        return Err(Error::NonFiniteLoss {
            ce: bundle.ce,
            kl: bundle.kl,
            contrastive: bundle.contrastive,
        });
    }

    let grads = state.graph.backward(&cache, &step.dlogits, &step.dembeds)?;

    let mut weights = state.graph.param_slices_mut();
    let mut velocity = state.velocity.param_slices_mut();
    let grad_slices = grads.param_slices();
    for ((w, v), g) in weights.iter_mut().zip(velocity.iter_mut()).zip(grad_slices) {
        for i in 0..w.len() {
            let gi = g[i] + cfg.weight_decay * w[i];
            v[i] = cfg.momentum * v[i] + gi;
            w[i] -= lr * v[i];
        }
    }

    if cfg.beta > 0.0 {
        for peer in 0..m {
            for (row, &slot) in slots.iter().enumerate() {
                let v = Embedding::normalized(outputs[peer].embeddings.row(row).to_vec())?;
                state.banks[peer].update(slot, &v)?;
            }
        }
    }

    let preds = predictions(&outputs[m - 1].logits);
    let deploy_correct = preds.iter().zip(labels).filter(|(p, l)| p == l).count();

    Ok(StepReport {
        losses: bundle,
        deploy_correct,
    })
}

/// One epoch's aggregated metrics, written as one line-delimited record.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub ce: f64,
    pub kl: f64,
    pub contrastive: f64,
    pub total: f64,
    /// Deployment-peer error on the (augmented) training batches, percent.
    pub train_error: f64,
    /// Deployment-peer error on the held-out set, percent.
    pub eval_error: f64,
    pub wall_time_s: f64,
}

impl EpochRecord {
    /// Equality that ignores wall time, for determinism comparisons.
    pub fn same_numbers(&self, other: &EpochRecord) -> bool {
        self.epoch == other.epoch
            && self.ce == other.ce
            && self.kl == other.kl
            && self.contrastive == other.contrastive
            && self.total == other.total
            && self.train_error == other.train_error
            && self.eval_error == other.eval_error
    }
}

/// A finished (or zero-epoch) training run.
pub struct FitReport {
    pub history: Vec<EpochRecord>,
    pub state: TrainState,
    pub deploy: DeployNet,
    pub best_epoch: Option<usize>,
}

fn append_record(dir: &Path, record: &EpochRecord) -> Result<()> {
    let path = dir.join("metrics.jsonl");
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| Error::io(path.display().to_string(), e))?;
    let line = serde_json::to_string(record).expect("record serializes");
    writeln!(file, "{line}").map_err(|e| Error::io(path.display().to_string(), e))
}

/// Run the configured number of epochs. When `out_dir` is given, per-epoch
/// metrics, the best-by-held-out checkpoint, and the final checkpoint are
/// written there. With no validation fraction the held-out set is `test`.
pub fn fit(
    cfg: &TrainConfig,
    train: &IndexedDataset,
    test: &IndexedDataset,
    out_dir: Option<&Path>,
) -> Result<FitReport> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    let policy = cfg.augment_policy()?;

    // `rows[slot]` is the dataset row behind each bank slot; a validation
    // split removes its rows from the training side entirely.
    let n = train.len();
    let n_val = (n as f64 * cfg.validation_fraction).round() as usize;
    let (rows, holdout): (Vec<usize>, Option<IndexedDataset>) = if n_val > 0 {
        let mut all: Vec<usize> = (0..n).collect();
        let mut split_rng = ChaCha20Rng::seed_from_u64(cfg.data_seed.wrapping_add(0x7370_6C69));
        all.shuffle(&mut split_rng);
        let (val_rows, train_rows) = all.split_at(n_val);
        let mut val_rows = val_rows.to_vec();
        val_rows.sort_unstable();
        let mut train_rows = train_rows.to_vec();
        train_rows.sort_unstable();
        (train_rows, Some(train.subset(&val_rows)?))
    } else {
        ((0..n).collect(), None)
    };
    let eval_data = holdout.as_ref().unwrap_or(test);

    let bank_labels: Vec<usize> = rows.iter().map(|&r| train.labels[r]).collect();
    let mut state = TrainState::new(cfg, bank_labels)?;

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir.display().to_string(), e))?;
    }

    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64)> = None;
    let mut slots: Vec<usize> = (0..rows.len()).collect();

    for epoch in 0..cfg.epochs {
        let started = Instant::now();
        let lr = cfg.lr_at(epoch);
        slots.shuffle(&mut state.rng);

        let mut sums = [0.0f64; 4];
        let mut correct = 0usize;
        for chunk in slots.chunks(cfg.batch_size) {
            let batch_rows: Vec<usize> = chunk.iter().map(|&s| rows[s]).collect();
            let (images, labels) = train.batch(&batch_rows);
            let images = augment_batch(&images, policy, &mut state.rng);
            let report = train_step(&mut state, &images, &labels, chunk, cfg, lr)?;
            let b = chunk.len() as f64;
            sums[0] += report.losses.ce * b;
            sums[1] += report.losses.kl * b;
            sums[2] += report.losses.contrastive * b;
            sums[3] += report.losses.total * b;
            correct += report.deploy_correct;
        }
        state.epoch = epoch + 1;

        let n_train = rows.len() as f64;
        let eval_error = peer_top1_error(&state.graph, cfg.peers - 1, eval_data)?;
        let record = EpochRecord {
            epoch,
            ce: sums[0] / n_train,
            kl: sums[1] / n_train,
            contrastive: sums[2] / n_train,
            total: sums[3] / n_train,
            train_error: 100.0 * (1.0 - correct as f64 / n_train),
            eval_error,
            wall_time_s: started.elapsed().as_secs_f64(),
        };
        if let Some(dir) = out_dir {
            append_record(dir, &record)?;
        }
        let improved = best.map(|(_, e)| eval_error < e).unwrap_or(true);
        if improved {
            best = Some((epoch, eval_error));
            if let Some(dir) = out_dir {
                save_checkpoint(&state, cfg, &dir.join("best.ckpt"))?;
            }
        }
        history.push(record);
    }

    if let Some(dir) = out_dir {
        save_checkpoint(&state, cfg, &dir.join("final.ckpt"))?;
    }
    let deploy = state.graph.export_deployment();
    Ok(FitReport {
        history,
        state,
        deploy,
        best_epoch: best.map(|(e, _)| e),
    })
}

/// One `fit` per seed plus a mean and standard deviation over the final
/// deployment-peer test errors.
pub struct MultiSeedReport {
    pub seeds: Vec<u64>,
    pub runs: Vec<FitReport>,
    pub summary: SummaryRow,
}

pub fn fit_multi(
    cfg: &TrainConfig,
    seeds: &[u64],
    train: &IndexedDataset,
    test: &IndexedDataset,
    out_dir: Option<&Path>,
) -> Result<MultiSeedReport> {
    if seeds.is_empty() {
        return Err(Error::invalid("need at least one seed"));
    }
    let mut runs = Vec::with_capacity(seeds.len());
    let mut errors = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let mut one = cfg.clone();
        one.seed = seed;
        let run_dir = out_dir.map(|d| d.join(format!("seed-{seed}")));
        let report = fit(&one, train, test, run_dir.as_deref())?;
        errors.push(peer_top1_error(&report.state.graph, cfg.peers - 1, test)?);
        runs.push(report);
    }
    let summary = SummaryRow::new("deploy", seeds.to_vec(), errors);
    Ok(MultiSeedReport {
        seeds: seeds.to_vec(),
        runs,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{synthetic, Split};
    use crate::verify::naive_objective_total;
    use ndarray::Array2;

    fn tiny_cfg() -> TrainConfig {
        TrainConfig {
            dataset: "synthetic".to_string(),
            classes: 4,
            resolution: 8,
            channels: 1,
            train_per_class: 8,
            test_per_class: 4,
            noise: 0.6,
            shift: 1,
            contrast_jitter: 0.2,
            augment: "none".to_string(),
            peers: 2,
            stage_widths: vec![4, 6, 6],
            embed_dim: 8,
            proj_depth: 2,
            branch_stages: 2,
            negatives: 4,
            epochs: 2,
            batch_size: 8,
            lr: 0.05,
            schedule: "constant".to_string(),
            seed: 11,
            ..TrainConfig::default()
        }
    }

    fn tiny_data(cfg: &TrainConfig) -> (IndexedDataset, IndexedDataset) {
        let spec = cfg.synthetic_spec();
        (
            synthetic(&spec, Split::Train).unwrap(),
            synthetic(&spec, Split::Test).unwrap(),
        )
    }

    #[test]
    fn degenerate_objective_is_pure_cross_entropy() {
        let mut cfg = tiny_cfg();
        cfg.beta = 0.0;
        cfg.distill = false;
        let (train, _) = tiny_data(&cfg);
        let mut state = TrainState::new(&cfg, train.labels.clone()).unwrap();
        let slots: Vec<usize> = (0..8).collect();
        let (images, labels) = train.batch(&slots);
        let report = train_step(&mut state, &images, &labels, &slots, &cfg, 0.01).unwrap();
        assert_eq!(report.losses.kl, 0.0);
        assert_eq!(report.losses.contrastive, 0.0);
        assert_eq!(report.losses.total, report.losses.ce);
    }

    #[test]
    fn step_total_matches_naive_recomputation() {
        let cfg = tiny_cfg();
        let (train, _) = tiny_data(&cfg);
        let mut state = TrainState::new(&cfg, train.labels.clone()).unwrap();
        let slots: Vec<usize> = (0..8).collect();
        let (images, labels) = train.batch(&slots);

        // Same forward as inside the step, on the pre-step parameters.
        let (outputs, _) = state.graph.forward(&images).unwrap();
        let logits: Vec<Array2<f64>> = outputs.iter().map(|o| o.logits.clone()).collect();
        let embeds: Vec<Array2<f64>> = outputs.iter().map(|o| o.embeddings.clone()).collect();

        let mut rng_clone = state.rng.clone();
        let report = train_step(&mut state, &images, &labels, &slots, &cfg, 0.01).unwrap();
        let naive = naive_objective_total(
            &logits,
            &embeds,
            &labels,
            &state.banks,
            cfg.temperature,
            cfg.beta,
            cfg.tau,
            cfg.negatives,
            cfg.distill,
            &mut rng_clone,
        )
        .unwrap();
        assert!(
            (report.losses.total - naive).abs() < 1e-9,
            "step {} vs naive {}",
            report.losses.total,
            naive
        );
        // The bundle's own arithmetic also has to hold.
        let b = &report.losses;
        let assembled = b.ce + b.t * b.t * b.kl + b.beta * b.contrastive;
        assert!((b.total - assembled).abs() < 1e-12);
    }

    #[test]
    fn identical_seeds_take_identical_steps() {
        let cfg = tiny_cfg();
        let (train, _) = tiny_data(&cfg);
        let slots: Vec<usize> = (0..8).collect();
        let (images, labels) = train.batch(&slots);
        let mut totals = Vec::new();
        for _ in 0..2 {
            let mut state = TrainState::new(&cfg, train.labels.clone()).unwrap();
            let mut run = Vec::new();
            for _ in 0..3 {
                let r = train_step(&mut state, &images, &labels, &slots, &cfg, 0.01).unwrap();
                run.push((r.losses.ce, r.losses.kl, r.losses.contrastive, r.losses.total));
            }
            totals.push(run);
        }
        assert_eq!(totals[0], totals[1]);
    }

    #[test]
    fn untouched_bank_slots_stay_put() {
        let cfg = tiny_cfg();
        let (train, _) = tiny_data(&cfg);
        let mut state = TrainState::new(&cfg, train.labels.clone()).unwrap();
        let slots: Vec<usize> = (0..8).collect();
        let (images, labels) = train.batch(&slots);
        let before: Vec<Array2<f64>> =
            state.banks.iter().map(|b| b.slots().to_owned()).collect();
        train_step(&mut state, &images, &labels, &slots, &cfg, 0.01).unwrap();
        for (bank, old) in state.banks.iter().zip(&before) {
            for row in 8..bank.len() {
                assert_eq!(bank.slots().row(row), old.row(row), "slot {row} moved");
            }
            let mut moved = 0;
            for row in 0..8 {
                if bank.slots().row(row) != old.row(row) {
                    moved += 1;
                }
            }
            assert!(moved > 0, "batch slots should refresh");
        }
    }

    #[test]
    fn beta_zero_leaves_projection_heads_out_of_the_update() {
        let mut cfg = tiny_cfg();
        cfg.beta = 0.0;
        cfg.weight_decay = 0.0;
        let (train, _) = tiny_data(&cfg);
        let mut state = TrainState::new(&cfg, train.labels.clone()).unwrap();
        let slots: Vec<usize> = (0..8).collect();
        let (images, labels) = train.batch(&slots);
        let before = state.graph.param_vector();
        train_step(&mut state, &images, &labels, &slots, &cfg, 0.01).unwrap();
        let after = state.graph.param_vector();
        // Projection parameters sit untouched while classifier weights move.
        let moved: usize = before
            .iter()
            .zip(&after)
            .filter(|(a, b)| a != b)
            .count();
        assert!(moved > 0);
        let proj_params: usize = (0..cfg.peers)
            .map(|p| state.graph.proj_param_count(p))
            .sum();
        let still: usize = before
            .iter()
            .zip(&after)
            .filter(|(a, b)| a == b)
            .count();
        assert!(
            still >= proj_params,
            "at least the {proj_params} projection parameters stay fixed, {still} did"
        );
    }

    #[test]
    fn non_finite_loss_reports_components() {
        let cfg = tiny_cfg();
        let (train, _) = tiny_data(&cfg);
        let mut state = TrainState::new(&cfg, train.labels.clone()).unwrap();
        let slots: Vec<usize> = (0..8).collect();
        let (images, labels) = train.batch(&slots);
        // A clean step first so the bank normalizers are in place.
        train_step(&mut state, &images, &labels, &slots, &cfg, 0.01).unwrap();
        // Then poison the parameters so the forward pass blows up.
        let count = state.graph.param_count();
        state
            .graph
            .set_param_vector(&vec![f64::INFINITY; count])
            .unwrap();
        let err = train_step(&mut state, &images, &labels, &slots, &cfg, 0.01).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }), "got {err}");
    }

    #[test]
    fn zero_epochs_returns_initialized_graph_and_empty_history() {
        let mut cfg = tiny_cfg();
        cfg.epochs = 0;
        let (train, test) = tiny_data(&cfg);
        let report = fit(&cfg, &train, &test, None).unwrap();
        assert!(report.history.is_empty());
        assert!(report.best_epoch.is_none());
        let fresh = TrainState::new(&cfg, train.labels.clone()).unwrap();
        assert_eq!(report.state.graph.param_vector(), fresh.graph.param_vector());
    }

    #[test]
    fn short_run_reduces_cross_entropy() {
        let cfg = tiny_cfg();
        let (train, test) = tiny_data(&cfg);
        let report = fit(&cfg, &train, &test, None).unwrap();
        assert_eq!(report.history.len(), 2);
        assert!(
            report.history[1].ce < report.history[0].ce,
            "ce {} then {}",
            report.history[0].ce,
            report.history[1].ce
        );
        for r in &report.history {
            assert!(r.total.is_finite());
        }
    }

    #[test]
    fn fit_writes_metrics_and_checkpoints() {
        let cfg = tiny_cfg();
        let (train, test) = tiny_data(&cfg);
        let dir = tempfile::tempdir().unwrap();
        let report = fit(&cfg, &train, &test, Some(dir.path())).unwrap();
        assert!(dir.path().join("best.ckpt").exists());
        assert!(dir.path().join("final.ckpt").exists());
        let text = std::fs::read_to_string(dir.path().join("metrics.jsonl")).unwrap();
        let lines: Vec<EpochRecord> = text
            .lines()
            .map(|l| serde_json::from_str(l).unwrap())
            .collect();
        assert_eq!(lines.len(), report.history.len());
        assert!(lines[0].same_numbers(&report.history[0]));
    }

    #[test]
    fn validation_split_changes_the_holdout() {
        let mut cfg = tiny_cfg();
        cfg.validation_fraction = 0.25;
        cfg.epochs = 1;
        let (train, test) = tiny_data(&cfg);
        let with_val = fit(&cfg, &train, &test, None).unwrap();
        cfg.validation_fraction = 0.0;
        let without = fit(&cfg, &train, &test, None).unwrap();
        // 24 training instances instead of 32, so the loss trajectories split.
        assert_ne!(
            with_val.history[0].ce, without.history[0].ce,
            "holdout should change the batches"
        );
    }

    #[test]
    fn multi_seed_produces_summary_over_runs() {
        let mut cfg = tiny_cfg();
        cfg.epochs = 1;
        let (train, test) = tiny_data(&cfg);
        let report = fit_multi(&cfg, &[1, 2, 3], &train, &test, None).unwrap();
        assert_eq!(report.runs.len(), 3);
        assert_eq!(report.summary.errors.len(), 3);
        for run in &report.runs {
            assert_eq!(run.history.len(), 1);
        }
        let mean = report.summary.errors.iter().sum::<f64>() / 3.0;
        assert!((report.summary.mean - mean).abs() < 1e-12);
    }

    #[test]
    fn checkpoint_round_trips_bitwise() {
        let cfg = tiny_cfg();
        let (train, _) = tiny_data(&cfg);
        let mut state = TrainState::new(&cfg, train.labels.clone()).unwrap();
        let slots: Vec<usize> = (0..8).collect();
        let (images, labels) = train.batch(&slots);
        train_step(&mut state, &images, &labels, &slots, &cfg, 0.01).unwrap();

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        save_checkpoint(&state, &cfg, &path).unwrap();
        let (mut restored, stored_cfg) = restore_checkpoint(&path, Some(&cfg)).unwrap();
        assert_eq!(stored_cfg, cfg);
        assert_eq!(restored.graph.param_vector(), state.graph.param_vector());
        assert_eq!(
            restored.velocity.param_vector(),
            state.velocity.param_vector()
        );

        // One more step on each copy must agree bitwise.
        let next: Vec<usize> = (8..16).collect();
        let (images2, labels2) = train.batch(&next);
        let a = train_step(&mut state, &images2, &labels2, &next, &cfg, 0.01).unwrap();
        let b = train_step(&mut restored, &images2, &labels2, &next, &cfg, 0.01).unwrap();
        assert_eq!(a.losses.total.to_bits(), b.losses.total.to_bits());
        assert_eq!(state.graph.param_vector(), restored.graph.param_vector());
    }

    #[test]
    fn checkpoint_rejects_config_mismatch() {
        let cfg = tiny_cfg();
        let (train, _) = tiny_data(&cfg);
        let state = TrainState::new(&cfg, train.labels.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        save_checkpoint(&state, &cfg, &path).unwrap();
        let mut other = cfg.clone();
        other.beta = 0.5;
        let err = restore_checkpoint(&path, Some(&other)).unwrap_err();
        assert!(matches!(err, Error::ConfigMismatch(_)), "got {err}");
        assert!(err.to_string().contains("beta"), "message: {err}");
    }

    #[test]
    fn checkpoint_rejects_corruption() {
        let cfg = tiny_cfg();
        let (train, _) = tiny_data(&cfg);
        let state = TrainState::new(&cfg, train.labels.clone()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("state.ckpt");
        save_checkpoint(&state, &cfg, &path).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0xFF;
        std::fs::write(&path, &bytes).unwrap();
        let err = restore_checkpoint(&path, None).unwrap_err();
        assert!(matches!(err, Error::Integrity(_)), "got {err}");
    }
}
