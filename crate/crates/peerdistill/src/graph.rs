//! The M-peer training graph: an optionally shared convolutional stem, per
//! peer branch stages, linear classifiers, and contrastive projection heads.
//!
//! Peer M (the last index) is the deployment network; `export_deployment`
//! strips everything else. Gradients are accumulated into a zeroed clone of
//! the graph so a shared stem collects contributions from every branch.

use crate::error::{Error, Result};
use crate::nn::{
    gap_backward, gap_forward, l2norm_backward, l2norm_forward, maxpool2_backward,
    maxpool2_forward, relu, relu_grad, Conv3x3, ConvCache, Linear, PoolCache,
};
use ndarray::{Array1, Array2, Array4};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

/// Architecture description for one peer network.
#[derive(Debug, Clone, PartialEq)]
pub struct BackboneSpec {
    pub in_channels: usize,
    pub resolution: usize,
    /// Output channels of each convolutional stage. Spatial extent halves
    /// after every stage except the last.
    pub stage_widths: Vec<usize>,
    pub classes: usize,
    /// Dimension of the contrastive embedding space.
    pub embed_dim: usize,
    /// Number of linear layers in the projection head.
    pub proj_depth: usize,
    /// How many trailing stages belong to the per-peer branches.
    pub branch_stages: usize,
}

impl BackboneSpec {
    pub fn validate(&self) -> Result<()> {
        let s = self.stage_widths.len();
        if s < 3 {
            return Err(Error::invalid(format!(
                "backbone needs at least 3 stages so the trailing stages can branch, got {s}"
            )));
        }
        if self.branch_stages < 1 || self.branch_stages >= s {
            return Err(Error::invalid(format!(
                "branch_stages must lie in [1, {}], got {}",
                s - 1,
                self.branch_stages
            )));
        }
        if self.stage_widths.iter().any(|&w| w == 0) {
            return Err(Error::invalid("stage widths must be positive"));
        }
        if self.in_channels == 0 || self.embed_dim == 0 || self.proj_depth == 0 {
            return Err(Error::invalid(
                "in_channels, embed_dim and proj_depth must be positive",
            ));
        }
        if self.classes < 2 {
            return Err(Error::invalid("need at least 2 classes"));
        }
        let pools = s - 1;
        let divisor = 1usize << pools;
        if self.resolution % divisor != 0 || self.resolution / divisor == 0 {
            return Err(Error::invalid(format!(
                "resolution {} does not survive {pools} halvings",
                self.resolution
            )));
        }
        Ok(())
    }

    fn stem_len(&self) -> usize {
        self.stage_widths.len() - self.branch_stages
    }
}

/// Per-peer forward result.
#[derive(Debug, Clone)]
pub struct PeerOutput {
    /// `(batch, classes)` raw classifier outputs.
    pub logits: Array2<f64>,
    /// `(batch, embed_dim)` unit rows in the contrastive space.
    pub embeddings: Array2<f64>,
}

#[derive(Debug, Clone)]
pub(crate) struct Branch {
    pub stages: Vec<Conv3x3>,
    pub classifier: Linear,
    pub proj: Vec<Linear>,
}

#[derive(Debug, Clone)]
pub struct PeerGraph {
    pub(crate) spec: BackboneSpec,
    pub(crate) m: usize,
    pub(crate) share_stem: bool,
    /// One entry when the stem is shared, otherwise one per peer.
    pub(crate) stems: Vec<Vec<Conv3x3>>,
    pub(crate) branches: Vec<Branch>,
}

struct StageCache {
    conv: ConvCache,
    post_relu: Array4<f64>,
    pool: Option<PoolCache>,
}

struct BranchCache {
    stages: Vec<StageCache>,
    /// Spatial extent entering global average pooling.
    spatial: (usize, usize),
    features: Array2<f64>,
    proj_inputs: Vec<Array2<f64>>,
    /// Post-rectifier activations between projection layers.
    proj_relu: Vec<Array2<f64>>,
    norms: Array1<f64>,
    normalized: Array2<f64>,
}

/// Forward-pass state consumed by `backward`.
pub struct GraphCache {
    stems: Vec<Vec<StageCache>>,
    branches: Vec<BranchCache>,
    batch: usize,
}

impl PeerGraph {
    /// Deterministically initialize `m` peers under `seed`.
    pub fn build(spec: &BackboneSpec, m: usize, share_stem: bool, seed: u64) -> Result<Self> {
        spec.validate()?;
        if m < 1 {
            return Err(Error::invalid(format!("need at least 1 peer, got {m}")));
        }
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let stem_count = if share_stem { 1 } else { m };
        let mut stems = Vec::with_capacity(stem_count);
        for _ in 0..stem_count {
            stems.push(build_stages(
                spec.in_channels,
                &spec.stage_widths[..spec.stem_len()],
                &mut rng,
            ));
        }
        let branch_in = spec.stage_widths[spec.stem_len() - 1];
        let last_width = *spec.stage_widths.last().unwrap();
        let mut branches = Vec::with_capacity(m);
        for _ in 0..m {
            let stages = build_stages(branch_in, &spec.stage_widths[spec.stem_len()..], &mut rng);
            let classifier = Linear::new(last_width, spec.classes, &mut rng);
            let mut proj = Vec::with_capacity(spec.proj_depth);
            let mut dim = last_width;
            for _ in 0..spec.proj_depth {
                proj.push(Linear::new(dim, spec.embed_dim, &mut rng));
                dim = spec.embed_dim;
            }
            branches.push(Branch {
                stages,
                classifier,
                proj,
            });
        }
        Ok(PeerGraph {
            spec: spec.clone(),
            m,
            share_stem,
            stems,
            branches,
        })
    }

    pub fn peer_count(&self) -> usize {
        self.m
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }

    pub fn share_stem(&self) -> bool {
        self.share_stem
    }

    fn stem_index(&self, peer: usize) -> usize {
        if self.share_stem {
            0
        } else {
            peer
        }
    }

    /// Run all peers on a batch. Returns per-peer outputs plus the cache
    /// needed for `backward`.
    pub fn forward(&self, x: &Array4<f64>) -> Result<(Vec<PeerOutput>, GraphCache)> {
        let (batch, c, h, w) = x.dim();
        if c != self.spec.in_channels || h != self.spec.resolution || w != self.spec.resolution {
            return Err(Error::invalid(format!(
                "input {c}x{h}x{w} does not match spec {}x{}x{}",
                self.spec.in_channels, self.spec.resolution, self.spec.resolution
            )));
        }
        let total_stages = self.spec.stage_widths.len();
        let stem_len = self.spec.stem_len();

        let mut stem_caches = Vec::with_capacity(self.stems.len());
        let mut stem_outputs = Vec::with_capacity(self.stems.len());
        for stem in &self.stems {
            let (out, caches) = run_stages(stem, x, 0, total_stages)?;
            stem_caches.push(caches);
            stem_outputs.push(out);
        }

        let mut outputs = Vec::with_capacity(self.m);
        let mut branch_caches = Vec::with_capacity(self.m);
        for (peer, branch) in self.branches.iter().enumerate() {
            let stem_out = &stem_outputs[self.stem_index(peer)];
            let (conv_out, stage_caches) =
                run_stages(&branch.stages, stem_out, stem_len, total_stages)?;
            let (_, _, fh, fw) = conv_out.dim();
            let features = gap_forward(&conv_out);

            let logits = branch.classifier.forward(&features);

            let mut proj_inputs = Vec::with_capacity(branch.proj.len());
            let mut proj_relu = Vec::new();
            let mut cur = features.clone();
            for (l, layer) in branch.proj.iter().enumerate() {
                proj_inputs.push(cur.clone());
                let a = layer.forward(&cur);
                if l + 1 < branch.proj.len() {
                    let r = relu(&a);
                    proj_relu.push(r.clone());
                    cur = r;
                } else {
                    cur = a;
                }
            }
            let (normalized, norms) = l2norm_forward(&cur);

            outputs.push(PeerOutput {
                logits,
                embeddings: normalized.clone(),
            });
            branch_caches.push(BranchCache {
                stages: stage_caches,
                spatial: (fh, fw),
                features,
                proj_inputs,
                proj_relu,
                norms,
                normalized,
            });
        }

        Ok((
            outputs,
            GraphCache {
                stems: stem_caches,
                branches: branch_caches,
                batch,
            },
        ))
    }

    /// Backpropagate per-peer logit and embedding gradients through the
    /// whole graph. Returns a zeroed clone of the graph filled with the
    /// accumulated parameter gradients.
    pub fn backward(
        &self,
        cache: &GraphCache,
        dlogits: &[Array2<f64>],
        dembeds: &[Array2<f64>],
    ) -> Result<PeerGraph> {
        if dlogits.len() != self.m || dembeds.len() != self.m {
            return Err(Error::invalid("need one gradient pair per peer"));
        }
        let mut grads = self.zeros_like();
        let stem_len = self.spec.stem_len();
        let branch_in = self.spec.stage_widths[stem_len - 1];
        let res_at_branch = self.spec.resolution >> stem_len;
        let mut stem_out_grads: Vec<Array4<f64>> = self
            .stems
            .iter()
            .map(|_| Array4::zeros((cache.batch, branch_in, res_at_branch, res_at_branch)))
            .collect();

        for (peer, branch) in self.branches.iter().enumerate() {
            let bc = &cache.branches[peer];

            // Classifier path.
            let mut dfeat =
                branch
                    .classifier
                    .backward(&bc.features, &dlogits[peer], &mut grads.branches[peer].classifier);

            // Projection path: unit-normalization, then the linear stack.
            let mut dcur = l2norm_backward(&bc.normalized, &bc.norms, &dembeds[peer]);
            for l in (0..branch.proj.len()).rev() {
                if l + 1 < branch.proj.len() {
                    dcur = relu_grad(&bc.proj_relu[l], &dcur);
                }
                dcur = branch.proj[l].backward(
                    &bc.proj_inputs[l],
                    &dcur,
                    &mut grads.branches[peer].proj[l],
                );
            }
            dfeat += &dcur;

            let mut dspatial = gap_backward(bc.spatial.0, bc.spatial.1, &dfeat);
            dspatial = backward_stages(
                &branch.stages,
                &bc.stages,
                dspatial,
                &mut grads.branches[peer].stages,
            );
            stem_out_grads[self.stem_index(peer)] += &dspatial;
        }

        for (idx, stem) in self.stems.iter().enumerate() {
            backward_stages(
                stem,
                &cache.stems[idx],
                stem_out_grads[idx].clone(),
                &mut grads.stems[idx],
            );
        }
        Ok(grads)
    }

    /// Same structure with all parameters zero; the gradient container.
    pub fn zeros_like(&self) -> PeerGraph {
        PeerGraph {
            spec: self.spec.clone(),
            m: self.m,
            share_stem: self.share_stem,
            stems: self
                .stems
                .iter()
                .map(|s| s.iter().map(Conv3x3::zeros_like).collect())
                .collect(),
            branches: self
                .branches
                .iter()
                .map(|b| Branch {
                    stages: b.stages.iter().map(Conv3x3::zeros_like).collect(),
                    classifier: b.classifier.zeros_like(),
                    proj: b.proj.iter().map(Linear::zeros_like).collect(),
                })
                .collect(),
        }
    }

    /// All parameters in canonical traversal order: stems first, then each
    /// branch's stages, classifier, and projection layers; weights before
    /// biases within a layer.
    pub fn param_slices(&self) -> Vec<&[f64]> {
        let mut out = Vec::new();
        for stem in &self.stems {
            for stage in stem {
                out.push(stage.w.as_slice().unwrap());
                out.push(stage.b.as_slice().unwrap());
            }
        }
        for branch in &self.branches {
            for stage in &branch.stages {
                out.push(stage.w.as_slice().unwrap());
                out.push(stage.b.as_slice().unwrap());
            }
            out.push(branch.classifier.w.as_slice().unwrap());
            out.push(branch.classifier.b.as_slice().unwrap());
            for layer in &branch.proj {
                out.push(layer.w.as_slice().unwrap());
                out.push(layer.b.as_slice().unwrap());
            }
        }
        out
    }

    pub fn param_slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut out = Vec::new();
        for stem in &mut self.stems {
            for stage in stem {
                out.push(stage.w.as_slice_mut().unwrap());
                out.push(stage.b.as_slice_mut().unwrap());
            }
        }
        for branch in &mut self.branches {
            for stage in &mut branch.stages {
                out.push(stage.w.as_slice_mut().unwrap());
                out.push(stage.b.as_slice_mut().unwrap());
            }
            out.push(branch.classifier.w.as_slice_mut().unwrap());
            out.push(branch.classifier.b.as_slice_mut().unwrap());
            for layer in &mut branch.proj {
                out.push(layer.w.as_slice_mut().unwrap());
                out.push(layer.b.as_slice_mut().unwrap());
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_slices().iter().map(|s| s.len()).sum()
    }

    /// Parameters in one peer's projection head.
    pub fn proj_param_count(&self, peer: usize) -> usize {
        self.branches[peer]
            .proj
            .iter()
            .map(Linear::param_count)
            .sum()
    }

    /// Flatten all parameters into one vector (canonical order).
    pub fn param_vector(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.param_count());
        for s in self.param_slices() {
            out.extend_from_slice(s);
        }
        out
    }

    /// Overwrite all parameters from a flat vector in canonical order.
    pub fn set_param_vector(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.param_count() {
            return Err(Error::invalid(format!(
                "expected {} parameters, got {}",
                self.param_count(),
                flat.len()
            )));
        }
        let mut offset = 0;
        for slice in self.param_slices_mut() {
            slice.copy_from_slice(&flat[offset..offset + slice.len()]);
            offset += slice.len();
        }
        Ok(())
    }

    /// Keep only what deployment needs: peer M's stem, branch stages, and
    /// classifier. The projection head is dropped.
    pub fn export_deployment(&self) -> DeployNet {
        let peer = self.m - 1;
        let branch = &self.branches[peer];
        DeployNet {
            spec: self.spec.clone(),
            stem: self.stems[self.stem_index(peer)].clone(),
            stages: branch.stages.clone(),
            classifier: branch.classifier.clone(),
        }
    }
}

/// The standalone deployment network: peer M without its projection head.
#[derive(Debug, Clone)]
pub struct DeployNet {
    pub(crate) spec: BackboneSpec,
    pub(crate) stem: Vec<Conv3x3>,
    pub(crate) stages: Vec<Conv3x3>,
    pub(crate) classifier: Linear,
}

impl DeployNet {
    /// Logits for a batch.
    pub fn forward(&self, x: &Array4<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_with_features(x)?.0)
    }

    /// Logits plus the pooled features feeding the classifier (the
    /// representation used for few-shot evaluation).
    pub fn forward_with_features(&self, x: &Array4<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        let (_, c, h, w) = x.dim();
        if c != self.spec.in_channels || h != self.spec.resolution || w != self.spec.resolution {
            return Err(Error::invalid(format!(
                "input {c}x{h}x{w} does not match spec {}x{}x{}",
                self.spec.in_channels, self.spec.resolution, self.spec.resolution
            )));
        }
        let total = self.spec.stage_widths.len();
        let (stem_out, _) = run_stages(&self.stem, x, 0, total)?;
        let (conv_out, _) = run_stages(&self.stages, &stem_out, self.stem.len(), total)?;
        let features = gap_forward(&conv_out);
        let logits = self.classifier.forward(&features);
        Ok((logits, features))
    }

    pub fn param_count(&self) -> usize {
        let stem: usize = self.stem.iter().map(Conv3x3::param_count).sum();
        let stages: usize = self.stages.iter().map(Conv3x3::param_count).sum();
        stem + stages + self.classifier.param_count()
    }

    pub fn classes(&self) -> usize {
        self.spec.classes
    }

    pub fn spec(&self) -> &BackboneSpec {
        &self.spec
    }
}

fn build_stages(in_channels: usize, widths: &[usize], rng: &mut ChaCha20Rng) -> Vec<Conv3x3> {
    let mut stages = Vec::with_capacity(widths.len());
    let mut c = in_channels;
    for &width in widths {
        stages.push(Conv3x3::new(c, width, rng));
        c = width;
    }
    stages
}

/// Run conv + relu (+ pool except after the globally last stage) for a run
/// of stages starting at global index `first`.
fn run_stages(
    stages: &[Conv3x3],
    x: &Array4<f64>,
    first: usize,
    total: usize,
) -> Result<(Array4<f64>, Vec<StageCache>)> {
    let mut caches = Vec::with_capacity(stages.len());
    let mut cur = x.clone();
    for (i, stage) in stages.iter().enumerate() {
        let (a, conv_cache) = stage.forward(&cur)?;
        let r = relu(&a);
        let global = first + i;
        if global + 1 < total {
            let (p, pool_cache) = maxpool2_forward(&r)?;
            caches.push(StageCache {
                conv: conv_cache,
                post_relu: r,
                pool: Some(pool_cache),
            });
            cur = p;
        } else {
            caches.push(StageCache {
                conv: conv_cache,
                post_relu: r.clone(),
                pool: None,
            });
            cur = r;
        }
    }
    Ok((cur, caches))
}

fn backward_stages(
    stages: &[Conv3x3],
    caches: &[StageCache],
    mut dy: Array4<f64>,
    grads: &mut [Conv3x3],
) -> Array4<f64> {
    for i in (0..stages.len()).rev() {
        let cache = &caches[i];
        let dr = match &cache.pool {
            Some(pool) => maxpool2_backward(pool, &dy),
            None => dy,
        };
        let da = relu_grad(&cache.post_relu, &dr);
        dy = stages[i].backward(&cache.conv, &da, &mut grads[i]);
    }
    dy
}
