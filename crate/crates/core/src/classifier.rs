//! Proposal classifier trained independently of the overlap network.
//!
//! Proposal features are built the same way (projection plus stacked max
//! pooling) with their own projection weights, then scored per cell by a
//! linear layer and a softmax. There are no convolutions.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::dataset::{check_segment, ClipFeatureSequence, Instance, VideoSample};
use crate::detection::coord_to_interval;
use crate::error::{Error, Result};
use crate::map::{SamplingConfig, ValidityMask};
use crate::metrics::iou;
use crate::nn::{ops, xavier_uniform, Graph, ParameterStore, Tensor, Var};
use crate::proposal::record_feature_map;
use crate::train::{fit, TrainOptions};

pub const PREFIX: &str = "classifier.";
/// Minimum IoU (exclusive) for a candidate to become a training sample.
pub const LABEL_IOU: f64 = 0.5;

const PROJ_W: &str = "classifier.proj.weight";
const PROJ_B: &str = "classifier.proj.bias";
const HEAD_W: &str = "classifier.head.weight";
const HEAD_B: &str = "classifier.head.bias";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ClassifierArch {
    pub input_dim: usize,
    pub hidden: usize,
    pub num_classes: usize,
}

impl ClassifierArch {
    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.hidden == 0 || self.num_classes == 0 {
            return Err(Error::config("classifier sizes must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierParams {
    arch: ClassifierArch,
    store: ParameterStore,
}

impl ClassifierParams {
    pub fn init(arch: ClassifierArch, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, h, c) = (arch.input_dim, arch.hidden, arch.num_classes);
        let mut store = ParameterStore::new();
        store.insert(PROJ_W, xavier_uniform(&[d, h], d, h, &mut rng))?;
        store.insert(PROJ_B, Tensor::zeros(&[h]))?;
        store.insert(HEAD_W, xavier_uniform(&[h, c], h, c, &mut rng))?;
        store.insert(HEAD_B, Tensor::zeros(&[c]))?;
        store.round_to_f32();
        Ok(ClassifierParams { arch, store })
    }

    pub fn from_store(store: ParameterStore) -> Result<Self> {
        let get = |name: &str| {
            store
                .get(name)
                .map_err(|_| Error::validation(name, "missing from checkpoint"))
        };
        let proj = get(PROJ_W)?;
        let head = get(HEAD_W)?;
        if proj.rank() != 2 || head.rank() != 2 {
            return Err(Error::validation(
                "checkpoint",
                "classifier weights must be matrices",
            ));
        }
        let arch = ClassifierArch {
            input_dim: proj.shape()[0],
            hidden: proj.shape()[1],
            num_classes: head.shape()[1],
        };
        arch.validate()?;
        if store.len() != 4 {
            return Err(Error::validation(
                "checkpoint",
                "unexpected classifier tensors",
            ));
        }
        for (name, shape) in [
            (PROJ_B, vec![arch.hidden]),
            (HEAD_W, vec![arch.hidden, arch.num_classes]),
            (HEAD_B, vec![arch.num_classes]),
        ] {
            let t = get(name)?;
            if t.shape() != shape {
                return Err(Error::validation(
                    name,
                    format!("shape {:?}, expected {:?}", t.shape(), shape),
                ));
            }
        }
        Ok(ClassifierParams { arch, store })
    }

    pub fn arch(&self) -> &ClassifierArch {
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
}

/// Records the `N x N x C` logits node.
pub fn record_logits(
    graph: &mut Graph,
    arch: &ClassifierArch,
    store: &ParameterStore,
    cfg: &SamplingConfig,
    clips: &Tensor,
) -> Result<Var> {
    arch.validate()?;
    if clips.shape() != [cfg.num_clips(), arch.input_dim] {
        return Err(Error::shape(format!(
            "clip features should be {} x {}, got {:?}",
            cfg.num_clips(),
            arch.input_dim,
            clips.shape()
        )));
    }
    let map = record_feature_map(graph, store, PROJ_W, PROJ_B, cfg, clips)?;
    let w = graph.param(store, HEAD_W)?;
    let b = graph.param(store, HEAD_B)?;
    graph.linear(map, w, b)
}

/// `N x N x C` class probabilities.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassScoreMap {
    num_classes: usize,
    probs: Vec<f64>,
    mask: ValidityMask,
}

impl ClassScoreMap {
    pub fn new(num_classes: usize, probs: Vec<f64>, mask: ValidityMask) -> Result<Self> {
        let n = mask.size();
        if num_classes == 0 || probs.len() != n * n * num_classes {
            return Err(Error::shape(format!(
                "class map needs {n} x {n} x {num_classes} values"
            )));
        }
        Ok(ClassScoreMap {
            num_classes,
            probs,
            mask,
        })
    }

    pub fn num_clips(&self) -> usize {
        self.mask.size()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn mask(&self) -> &ValidityMask {
        &self.mask
    }

    pub fn probs(&self, i: usize, j: usize) -> &[f64] {
        let k = (i * self.num_clips() + j) * self.num_classes;
        &self.probs[k..k + self.num_classes]
    }
}

/// Class probabilities per cell. Non-candidate cells hold the uniform distribution.
pub fn classifier_forward(
    params: &ClassifierParams,
    clips: &ClipFeatureSequence,
    cfg: &SamplingConfig,
) -> Result<ClassScoreMap> {
    let mut graph = Graph::new();
    let logits = record_logits(
        &mut graph,
        &params.arch,
        &params.store,
        cfg,
        &clips.to_tensor(),
    )?;
    let c = params.arch.num_classes;
    let mut probs = ops::softmax(graph.value(logits)).into_data();
    let mask = ValidityMask::for_config(cfg);
    for (cell, row) in probs.chunks_mut(c).enumerate() {
        if !mask.as_slice()[cell] {
            row.fill(1.0 / c as f64);
        }
    }
    ClassScoreMap::new(c, probs, mask)
}

/// Class targets; `mask` marks the cells used for training.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassLabelMap {
    n: usize,
    labels: Vec<usize>,
    mask: Vec<bool>,
}

impl ClassLabelMap {
    pub fn label(&self, i: usize, j: usize) -> Option<usize> {
        let k = i * self.n + j;
        self.mask[k].then_some(self.labels[k])
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn mask(&self) -> &[bool] {
        &self.mask
    }

    pub fn count(&self) -> usize {
        self.mask.iter().filter(|&&m| m).count()
    }
}

/// A candidate is labelled iff its best IoU with a ground-truth instance is
/// strictly above 0.5; the label is that instance's class (first instance
/// wins ties).
pub fn assign_class_labels(
    cfg: &SamplingConfig,
    instances: &[Instance],
    duration: f64,
) -> Result<ClassLabelMap> {
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::config(format!(
            "video duration must be positive, got {duration}"
        )));
    }
    for (k, inst) in instances.iter().enumerate() {
        check_segment(inst.segment, duration)
            .map_err(|msg| Error::validation(format!("instances[{k}]"), msg))?;
    }
    let n = cfg.num_clips();
    let candidates = ValidityMask::for_config(cfg);
    let mut labels = vec![0; n * n];
    let mut mask = vec![false; n * n];
    for i in 0..n {
        for j in i..n {
            if !candidates.get(i, j) {
                continue;
            }
            let cand = coord_to_interval(cfg, i, j, duration)?;
            let mut best: Option<(usize, f64)> = None;
            for inst in instances {
                let o = iou(cand, inst.segment);
                if best.is_none_or(|(_, b)| o > b) {
                    best = Some((inst.class, o));
                }
            }
            if let Some((class, o)) = best {
                if o > LABEL_IOU {
                    labels[i * n + j] = class;
                    mask[i * n + j] = true;
                }
            }
        }
    }
    Ok(ClassLabelMap { n, labels, mask })
}

/// Forward pass plus cross-entropy node over the labelled cells.
pub fn record_loss(
    arch: &ClassifierArch,
    store: &ParameterStore,
    cfg: &SamplingConfig,
    clips: &Tensor,
    labels: &ClassLabelMap,
) -> Result<(Graph, Var)> {
    if labels.n != cfg.num_clips() {
        return Err(Error::shape("label map was built for a different config"));
    }
    let mut graph = Graph::new();
    let logits = record_logits(&mut graph, arch, store, cfg, clips)?;
    let loss = graph.softmax_ce(
        logits,
        Rc::new(labels.labels.clone()),
        Rc::new(labels.mask.clone()),
    )?;
    Ok((graph, loss))
}

/// Trains the classifier with Adam on every labelled candidate cell.
pub fn train_classifier(
    dataset: &[VideoSample],
    cfg: &SamplingConfig,
    arch: ClassifierArch,
    opts: &TrainOptions,
) -> Result<(ClassifierParams, Vec<f64>)> {
    opts.validate()?;
    let mut prepared = Vec::new();
    for v in dataset {
        for inst in &v.instances {
            if inst.class >= arch.num_classes {
                return Err(Error::config(format!(
                    "video {} has class {} but the classifier has {} classes",
                    v.video_id, inst.class, arch.num_classes
                )));
            }
        }
        let labels = assign_class_labels(cfg, &v.instances, v.duration)?;
        if labels.count() > 0 {
            prepared.push((v.features.to_tensor(), labels));
        }
    }
    if prepared.is_empty() {
        return Err(Error::config(
            "no candidate overlaps a ground-truth action by more than 0.5",
        ));
    }
    let mut params = ClassifierParams::init(arch, opts.seed)?;
    let history = fit(
        &mut params.store,
        &prepared,
        opts,
        |store, (clips, labels)| record_loss(&arch, store, cfg, clips, labels),
    )?;
    Ok((params, history))
}

/// Fraction of labelled training cells whose argmax class is correct.
pub fn label_accuracy(
    params: &ClassifierParams,
    dataset: &[VideoSample],
    cfg: &SamplingConfig,
) -> Result<f64> {
    let (mut correct, mut total) = (0usize, 0usize);
    for v in dataset {
        let labels = assign_class_labels(cfg, &v.instances, v.duration)?;
        let probs = classifier_forward(params, &v.features, cfg)?;
        let n = cfg.num_clips();
        for i in 0..n {
            for j in i..n {
                if let Some(label) = labels.label(i, j) {
                    let p = probs.probs(i, j);
                    let argmax =
                        (0..p.len()).fold(0, |best, c| if p[c] > p[best] { c } else { best });
                    total += 1;
                    correct += usize::from(argmax == label);
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::Degenerate("no labelled cells".into()));
    }
    Ok(correct as f64 / total as f64)
}
