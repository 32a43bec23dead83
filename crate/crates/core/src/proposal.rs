//! Overlap-score network over the sparse 2D temporal map.
//!
//! Clip features are projected to the hidden size, pooled into the map,
//! split into the three compact sub-maps and run through one stack of
//! convolutions whose weights are shared by all three. The outputs are
//! written back to their map positions and scored by a per-cell linear head
//! followed by a sigmoid.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{check_segment, ClipFeatureSequence, VideoSample};
use crate::detection::coord_to_interval;
use crate::error::{Error, Result};
use crate::map::{stacked_pool_with_sources, Bin, CompactLayout, SamplingConfig, ValidityMask};
use crate::metrics::iou;
use crate::nn::{ops, xavier_uniform, Graph, ParameterStore, Tensor, Var};
use crate::train::{fit, TrainOptions};

pub const PREFIX: &str = "proposal.";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ProposalArch {
    pub input_dim: usize,
    pub hidden: usize,
    pub kernel_size: usize,
    pub conv_layers: usize,
}

impl ProposalArch {
    /// Hidden size 512 and four 9x9 convolutions.
    pub fn new(input_dim: usize) -> Self {
        ProposalArch {
            input_dim,
            hidden: 512,
            kernel_size: 9,
            conv_layers: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 {
            return Err(Error::config("input and hidden sizes must be positive"));
        }
        if self.kernel_size.is_multiple_of(2) {
            return Err(Error::config(format!(
                "kernel size must be odd, got {}",
                self.kernel_size
            )));
        }
        if self.conv_layers == 0 {
            return Err(Error::config(
                "the proposal network needs at least one conv layer",
            ));
        }
        Ok(())
    }
}

fn conv_weight(layer: usize) -> String {
    format!("{PREFIX}conv{layer}.weight")
}

fn conv_bias(layer: usize) -> String {
    format!("{PREFIX}conv{layer}.bias")
}

const PROJ_W: &str = "proposal.proj.weight";
const PROJ_B: &str = "proposal.proj.bias";
const HEAD_W: &str = "proposal.head.weight";
const HEAD_B: &str = "proposal.head.bias";

#[derive(Debug, Clone, PartialEq)]
pub struct ProposalNetParams {
    arch: ProposalArch,
    store: ParameterStore,
}

impl ProposalNetParams {
    /// Xavier-uniform weights and zero biases from a seeded generator.
    pub fn init(arch: ProposalArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, k) = (arch.input_dim, arch.hidden, arch.kernel_size);
        let mut store = ParameterStore::new();
        store.insert(PROJ_W, xavier_uniform(&[d, h], d, h, &mut rng))?;
        store.insert(PROJ_B, Tensor::zeros(&[h]))?;
        for l in 0..arch.conv_layers {
            store.insert(
                conv_weight(l),
                xavier_uniform(&[k, k, h, h], k * k * h, k * k * h, &mut rng),
            )?;
            store.insert(conv_bias(l), Tensor::zeros(&[h]))?;
        }
        store.insert(HEAD_W, xavier_uniform(&[h, 1], h, 1, &mut rng))?;
        store.insert(HEAD_B, Tensor::zeros(&[1]))?;
        store.round_to_f32();
        Ok(ProposalNetParams { arch, store })
    }

    /// Rebuilds parameters from a store, inferring the architecture from shapes.
    pub fn from_store(store: ParameterStore) -> Result<Self> {
        let missing = |name: &str| Error::validation(name, "missing from checkpoint");
        let proj = store.get(PROJ_W).map_err(|_| missing(PROJ_W))?;
        if proj.rank() != 2 {
            return Err(Error::validation(PROJ_W, "expected a matrix"));
        }
        let (d, h) = (proj.shape()[0], proj.shape()[1]);
        let mut conv_layers = 0;
        let mut kernel_size = 1;
        while store.contains(&conv_weight(conv_layers)) {
            let w = store.get(&conv_weight(conv_layers))?;
            if w.rank() != 4 {
                return Err(Error::validation(
                    conv_weight(conv_layers),
                    "expected K x K x H x H",
                ));
            }
            kernel_size = w.shape()[0];
            conv_layers += 1;
        }
        let arch = ProposalArch {
            input_dim: d,
            hidden: h,
            kernel_size,
            conv_layers,
        };
        arch.validate()?;
        let expected = ProposalNetParams::init(arch, 0)?;
        if store.len() != expected.store.len() {
            return Err(Error::validation(
                "checkpoint",
                "unexpected proposal tensors",
            ));
        }
        for (name, t) in expected.store.iter() {
            let got = store.get(name).map_err(|_| missing(name))?;
            if got.shape() != t.shape() {
                return Err(Error::validation(
                    name,
                    format!("shape {:?}, expected {:?}", got.shape(), t.shape()),
                ));
            }
        }
        Ok(ProposalNetParams { arch, store })
    }

    /// Parameters from explicit tensors (testing and tooling).
    pub fn from_parts(arch: ProposalArch, store: ParameterStore) -> Self {
        ProposalNetParams { arch, store }
    }

    pub fn arch(&self) -> &ProposalArch {
        &self.arch
    }

    pub fn store(&self) -> &ParameterStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParameterStore {
        &mut self.store
    }

    pub fn into_store(self) -> ParameterStore {
        self.store
    }

    pub fn conv_weight_name(layer: usize) -> String {
        conv_weight(layer)
    }

    pub fn conv_bias_name(layer: usize) -> String {
        conv_bias(layer)
    }
}

/// Index tables and masks for one sampling config, reusable across videos.
#[derive(Debug, Clone)]
pub struct ProposalPlan {
    cfg: SamplingConfig,
    candidates: ValidityMask,
    candidate_cells: Rc<Vec<bool>>,
    bin_shapes: [(usize, usize); 3],
    bin_masks: [Rc<Vec<bool>>; 3],
    gather: [Rc<Vec<u32>>; 3],
    scatter: [Rc<Vec<u32>>; 3],
}

impl ProposalPlan {
    pub fn new(cfg: &SamplingConfig) -> Result<Self> {
        cfg.validate()?;
        let layout = CompactLayout::new(cfg);
        let candidates = ValidityMask::for_config(cfg);
        Ok(ProposalPlan {
            cfg: *cfg,
            candidate_cells: Rc::new(candidates.as_slice().to_vec()),
            candidates,
            bin_shapes: Bin::ALL.map(|b| (layout.bin(b).rows, layout.bin(b).cols)),
            bin_masks: Bin::ALL.map(|b| Rc::new(layout.bin(b).mask.clone())),
            gather: Bin::ALL.map(|b| Rc::new(layout.bin(b).full_of_compact.clone())),
            scatter: Bin::ALL.map(|b| Rc::new(layout.bin(b).compact_of_full.clone())),
        })
    }

    pub fn config(&self) -> &SamplingConfig {
        &self.cfg
    }

    pub fn candidates(&self) -> &ValidityMask {
        &self.candidates
    }
}

fn check_clips(cfg: &SamplingConfig, input_dim: usize, clips: &Tensor) -> Result<()> {
    if clips.shape() != [cfg.num_clips(), input_dim] {
        return Err(Error::shape(format!(
            "clip features should be {} x {}, got {:?}",
            cfg.num_clips(),
            input_dim,
            clips.shape()
        )));
    }
    Ok(())
}

/// Projection followed by stacked max pooling: the `N x N x H` map node.
pub(crate) fn record_feature_map(
    graph: &mut Graph,
    store: &ParameterStore,
    weight: &str,
    bias: &str,
    cfg: &SamplingConfig,
    clips: &Tensor,
) -> Result<Var> {
    let n = cfg.num_clips();
    let x = graph.input(clips.clone());
    let w = graph.param(store, weight)?;
    let b = graph.param(store, bias)?;
    let projected = graph.linear(x, w, b)?;
    let h = graph.value(projected).shape()[1];
    let (_, sources) = stacked_pool_with_sources(cfg, graph.value(projected))?;
    graph.select(projected, Rc::new(sources), 1, &[n, n, h])
}

/// Records the forward pass and returns the `N x N x 1` score node.
pub fn record_forward(
    graph: &mut Graph,
    arch: &ProposalArch,
    store: &ParameterStore,
    plan: &ProposalPlan,
    clips: &Tensor,
) -> Result<Var> {
    arch.validate()?;
    let cfg = &plan.cfg;
    check_clips(cfg, arch.input_dim, clips)?;
    let n = cfg.num_clips();
    let h = arch.hidden;

    let map = record_feature_map(graph, store, PROJ_W, PROJ_B, cfg, clips)?;

    let mut recovered: Option<Var> = None;
    for bin in Bin::ALL {
        let b = bin as usize;
        let (rows, cols) = plan.bin_shapes[b];
        let mut x = graph.select(map, plan.gather[b].clone(), h, &[rows, cols, h])?;
        for l in 0..arch.conv_layers {
            let k = graph.param(store, &conv_weight(l))?;
            let bias = graph.param(store, &conv_bias(l))?;
            // masked conv: invalid cells read as zero and stay zero
            x = graph.conv(x, k, bias, Some(plan.bin_masks[b].clone()))?;
            if l + 1 < arch.conv_layers {
                x = graph.relu(x);
            }
        }
        let back = graph.select(x, plan.scatter[b].clone(), h, &[n, n, h])?;
        recovered = Some(match recovered {
            None => back,
            Some(acc) => graph.add(acc, back)?,
        });
    }
    let recovered = recovered.expect("three bins");

    let hw = graph.param(store, HEAD_W)?;
    let hb = graph.param(store, HEAD_B)?;
    let logits = graph.linear(recovered, hw, hb)?;
    let probs = graph.sigmoid(logits);
    graph.mask_cells(probs, plan.candidate_cells.clone())
}

/// `N x N` overlap scores; zero at invalid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct OverlapScoreMap {
    scores: Vec<f64>,
    mask: ValidityMask,
}

impl OverlapScoreMap {
    pub fn new(scores: Vec<f64>, mask: ValidityMask) -> Result<Self> {
        let n = mask.size();
        if scores.len() != n * n {
            return Err(Error::shape(format!("overlap map needs {} scores", n * n)));
        }
        Ok(OverlapScoreMap { scores, mask })
    }

    pub fn num_clips(&self) -> usize {
        self.mask.size()
    }

    pub fn score(&self, i: usize, j: usize) -> f64 {
        self.scores[i * self.num_clips() + j]
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn scores_mut(&mut self) -> &mut [f64] {
        &mut self.scores
    }

    pub fn mask(&self) -> &ValidityMask {
        &self.mask
    }
}

pub fn proposal_forward(
    params: &ProposalNetParams,
    clips: &ClipFeatureSequence,
    cfg: &SamplingConfig,
) -> Result<OverlapScoreMap> {
    let plan = ProposalPlan::new(cfg)?;
    forward_with_plan(params, &clips.to_tensor(), &plan)
}

pub fn forward_with_plan(
    params: &ProposalNetParams,
    clips: &Tensor,
    plan: &ProposalPlan,
) -> Result<OverlapScoreMap> {
    let mut graph = Graph::new();
    let out = record_forward(&mut graph, &params.arch, &params.store, plan, clips)?;
    OverlapScoreMap::new(graph.value(out).data().to_vec(), plan.candidates.clone())
}

/// Soft target: 0 up to `t_min`, linear on `(t_min, t_max)`, 1 from `t_max`.
#[allow(clippy::neg_cmp_op_on_partial_ord)]
pub fn scaled_label(iou: f64, t_min: f64, t_max: f64) -> Result<f64> {
    if !(t_min < t_max) || !(0.0..=1.0).contains(&t_min) || !(0.0..=1.0).contains(&t_max) {
        return Err(Error::config(format!(
            "label thresholds need 0 <= t_min < t_max <= 1, got {t_min}, {t_max}"
        )));
    }
    if !(0.0..=1.0).contains(&iou) {
        return Err(Error::Degenerate(format!("IoU {iou} outside [0, 1]")));
    }
    Ok(if iou <= t_min {
        0.0
    } else if iou >= t_max {
        1.0
    } else {
        (iou - t_min) / (t_max - t_min)
    })
}

/// Soft overlap targets over the candidate cells; zero elsewhere.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelMap {
    targets: Vec<f64>,
    mask: ValidityMask,
}

impl LabelMap {
    pub fn target(&self, i: usize, j: usize) -> f64 {
        self.targets[i * self.mask.size() + j]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn mask(&self) -> &ValidityMask {
        &self.mask
    }

    pub fn to_tensor(&self) -> Tensor {
        let n = self.mask.size();
        Tensor::new(vec![n, n, 1], self.targets.clone()).expect("n x n targets")
    }
}

/// Per candidate: the max IoU against the ground truth, mapped through [`scaled_label`].
pub fn scaled_iou_labels(
    cfg: &SamplingConfig,
    segments: &[[f64; 2]],
    duration: f64,
) -> Result<LabelMap> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::config(format!(
            "video duration must be positive, got {duration}"
        )));
    }
    for (k, s) in segments.iter().enumerate() {
        check_segment(*s, duration)
            .map_err(|msg| Error::validation(format!("segments[{k}]"), msg))?;
    }
    let n = cfg.num_clips();
    let mask = ValidityMask::for_config(cfg);
    let mut targets = vec![0.0; n * n];
    for i in 0..n {
        for j in i..n {
            if !mask.get(i, j) {
                continue;
            }
            let cand = coord_to_interval(cfg, i, j, duration)?;
            let best = segments.iter().map(|s| iou(cand, *s)).fold(0.0, f64::max);
            targets[i * n + j] = scaled_label(best, cfg.t_min(), cfg.t_max())?;
        }
    }
    Ok(LabelMap { targets, mask })
}

/// BCE over candidate cells.
pub fn proposal_loss(scores: &OverlapScoreMap, labels: &LabelMap) -> Result<f64> {
    if scores.mask != labels.mask {
        return Err(Error::shape("score and label masks differ"));
    }
    let n = scores.num_clips();
    let pred = Tensor::new(vec![n, n], scores.scores.clone())?;
    let target = Tensor::new(vec![n, n], labels.targets.clone())?;
    ops::bce_loss(&pred, &target, labels.mask.as_slice())
}

/// Forward pass plus BCE loss node for one video.
pub fn record_loss(
    arch: &ProposalArch,
    store: &ParameterStore,
    plan: &ProposalPlan,
    clips: &Tensor,
    labels: &LabelMap,
) -> Result<(Graph, Var)> {
    if labels.mask != plan.candidates {
        return Err(Error::shape("label map was built for a different config"));
    }
    let mut graph = Graph::new();
    let scores = record_forward(&mut graph, arch, store, plan, clips)?;
    let loss = graph.bce(scores, labels.to_tensor(), plan.candidate_cells.clone())?;
    Ok((graph, loss))
}

/// Trains the proposal network with Adam; returns the parameters and the
/// per-epoch mean loss.
pub fn train_proposal(
    dataset: &[VideoSample],
    cfg: &SamplingConfig,
    arch: ProposalArch,
    opts: &TrainOptions,
) -> Result<(ProposalNetParams, Vec<f64>)> {
    if dataset.is_empty() {
        return Err(Error::config("proposal training needs at least one video"));
    }
    opts.validate()?;
    let plan = ProposalPlan::new(cfg)?;
    let mut prepared = Vec::with_capacity(dataset.len());
    for v in dataset {
        let clips = v.features.to_tensor();
        check_clips(cfg, arch.input_dim, &clips)?;
        let labels = scaled_iou_labels(cfg, &v.segments(), v.duration)?;
        prepared.push((clips, labels));
    }
    let mut params = ProposalNetParams::init(arch, opts.seed)?;
    let history = fit(
        &mut params.store,
        &prepared,
        opts,
        |store, (clips, labels)| record_loss(&arch, store, &plan, clips, labels),
    )?;
    Ok((params, history))
}
