use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::annotations::{write_annotations, write_json};
use super::config::RunConfig;
use super::features::write_features;
use crate::dataset::{ClipFeatureSequence, GroundTruthSet, Instance, VideoAnnotation, VideoSample};
use crate::error::{Error, Result};

/// Parameters of the synthetic generator. Action clips carry the unit basis
/// vector of their class plus `N(0, noise^2)`; background clips are pure noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub videos: usize,
    pub num_clips: usize,
    pub input_dim: usize,
    pub num_classes: usize,
    pub min_actions: usize,
    pub max_actions: usize,
    /// Action length range in clips.
    pub min_len: usize,
    pub max_len: usize,
    pub noise: f64,
    /// Video duration in seconds.
    pub duration: f64,
    pub seed: u64,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            videos: 20,
            num_clips: 16,
            input_dim: 8,
            num_classes: 3,
            min_actions: 1,
            max_actions: 2,
            min_len: 2,
            max_len: 8,
            noise: 0.1,
            duration: 16.0,
            seed: 0,
        }
    }
}

impl SynthSpec {
    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::config(msg));
        if self.videos == 0 || self.num_clips == 0 || self.input_dim == 0 || self.num_classes == 0 {
            return fail(
                "video count, clip count, feature dimension and class count must be ≥ 1".into(),
            );
        }
        if self.min_actions == 0 || self.min_actions > self.max_actions {
            return fail(format!(
                "actions per video must satisfy 1 ≤ min ≤ max, got {}..{}",
                self.min_actions, self.max_actions
            ));
        }
        if self.min_len == 0 || self.min_len > self.max_len {
            return fail(format!(
                "action length must satisfy 1 ≤ min ≤ max, got {}..{}",
                self.min_len, self.max_len
            ));
        }
        if self.input_dim < self.num_classes {
            return fail(format!(
                "feature dimension {} cannot hold {} class directions",
                self.input_dim, self.num_classes
            ));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return fail(format!("noise level must be ≥ 0, got {}", self.noise));
        }
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return fail(format!("duration must be positive, got {}", self.duration));
        }
        // consecutive actions are separated by at least one background clip
        let needed = self.min_actions * self.min_len + self.min_actions - 1;
        if needed > self.num_clips {
            return fail(format!(
                "cannot pack {} actions of at least {} clips into {} clips",
                self.min_actions, self.min_len, self.num_clips
            ));
        }
        Ok(())
    }

    pub fn class_names(&self) -> Vec<String> {
        let width = (self.num_classes - 1).max(1).to_string().len();
        (0..self.num_classes)
            .map(|c| format!("class_{c:0width$}"))
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub samples: Vec<VideoSample>,
    pub gts: GroundTruthSet,
}

/// Clip-index spans `(start, len)` of `k` actions with at least one clip between them.
fn place_actions(rng: &mut ChaCha8Rng, spec: &SynthSpec, k: usize) -> Vec<(usize, usize)> {
    let n = spec.num_clips;
    let mut lens = Vec::with_capacity(k);
    let mut budget = n - (k - 1);
    for a in 0..k {
        // leave room for the remaining actions at their minimum length
        let reserve = (k - a - 1) * spec.min_len;
        let hi = spec.max_len.min(budget - reserve);
        let len = rng.random_range(spec.min_len..=hi);
        budget -= len;
        lens.push(len);
    }
    // spread the free clips over k + 1 gaps
    let mut gaps = vec![0usize; k + 1];
    for _ in 0..budget {
        gaps[rng.random_range(0..=k)] += 1;
    }
    let mut spans = Vec::with_capacity(k);
    let mut at = gaps[0];
    for (a, &len) in lens.iter().enumerate() {
        spans.push((at, len));
        at += len + 1 + gaps[a + 1];
    }
    spans
}

pub fn generate_dataset(spec: &SynthSpec) -> Result<SynthDataset> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let normal = Normal::new(0.0, spec.noise).map_err(|e| Error::config(e.to_string()))?;
    let (n, d) = (spec.num_clips, spec.input_dim);
    let tau = spec.duration / n as f64;
    let id_width = (spec.videos - 1).max(1).to_string().len().max(4);
    let mut samples = Vec::with_capacity(spec.videos);
    let mut videos = BTreeMap::new();
    for v in 0..spec.videos {
        let video_id = format!("video_{v:0id_width$}");
        let max_k = spec.max_actions.min((n + 1) / (spec.min_len + 1));
        let k = rng.random_range(spec.min_actions..=max_k.max(spec.min_actions));
        let spans = place_actions(&mut rng, spec, k);
        let mut clip_class = vec![None; n];
        let mut instances = Vec::with_capacity(k);
        for &(start, len) in &spans {
            let class = rng.random_range(0..spec.num_classes);
            clip_class[start..start + len]
                .iter_mut()
                .for_each(|c| *c = Some(class));
            instances.push(Instance {
                class,
                segment: [start as f64 * tau, (start + len) as f64 * tau],
            });
        }
        let mut data = Vec::with_capacity(n * d);
        for cls in &clip_class {
            for f in 0..d {
                let base = if *cls == Some(f) { 1.0 } else { 0.0 };
                data.push((base + normal.sample(&mut rng)) as f32);
            }
        }
        let features = ClipFeatureSequence::new(n, d, data)?;
        videos.insert(
            video_id.clone(),
            VideoAnnotation {
                duration: spec.duration,
                instances: instances.clone(),
            },
        );
        samples.push(VideoSample {
            video_id,
            duration: spec.duration,
            features,
            instances,
        });
    }
    Ok(SynthDataset {
        spec: spec.clone(),
        samples,
        gts: GroundTruthSet {
            classes: spec.class_names(),
            videos,
        },
    })
}

/// Writes `features/<id>.s2dt`, `annotations.json` and a `config.json` whose
/// data sizes match the dataset; other keys are copied from `base`.
pub fn write_dataset(dir: impl AsRef<Path>, data: &SynthDataset, base: &RunConfig) -> Result<()> {
    let dir = dir.as_ref();
    let features_dir = dir.join("features");
    fs::create_dir_all(&features_dir)?;
    for s in &data.samples {
        write_features(
            features_dir.join(format!("{}.s2dt", s.video_id)),
            &s.features,
        )?;
    }
    write_annotations(dir.join("annotations.json"), &data.gts)?;
    let mut cfg = base.clone();
    cfg.num_clips = data.spec.num_clips;
    cfg.input_dim = Some(data.spec.input_dim);
    cfg.num_classes = Some(data.spec.num_classes);
    cfg.features_dir = "features".into();
    cfg.annotations = "annotations.json".into();
    write_json(dir.join("config.json"), &cfg)
}
