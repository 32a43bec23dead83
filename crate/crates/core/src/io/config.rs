use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::annotations::read_annotations;
use super::features::read_features;
use crate::classifier::ClassifierArch;
use crate::dataset::{GroundTruthSet, VideoSample};
use crate::detection::{DecodeOptions, NmsMode};
use crate::error::{Error, Result};
use crate::map::SamplingConfig;
use crate::proposal::ProposalArch;
use crate::train::TrainOptions;

/// Flat JSON run configuration. Unset keys take their defaults; relative
/// paths are resolved against the directory of the config file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub num_clips: usize,
    /// Inferred from the feature files when unset.
    pub input_dim: Option<usize>,
    pub hidden_size: usize,
    /// Inferred from the annotation labels when unset.
    pub num_classes: Option<usize>,
    pub kernel_size: usize,
    pub conv_layers: usize,
    pub t_min: f64,
    pub t_max: f64,
    pub nms_threshold: f64,
    pub top_k: usize,
    pub class_agnostic_nms: bool,
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub seed: u64,

    pub features_dir: PathBuf,
    pub annotations: PathBuf,
    pub proposal_checkpoint: PathBuf,
    pub classifier_checkpoint: PathBuf,
    pub proposal_history: PathBuf,
    pub classifier_history: PathBuf,
    pub predictions: PathBuf,
    pub proposals: PathBuf,
    pub report: PathBuf,

    #[serde(skip)]
    base_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            num_clips: 256,
            input_dim: None,
            hidden_size: 512,
            num_classes: None,
            kernel_size: 9,
            conv_layers: 4,
            t_min: 0.5,
            t_max: 1.0,
            nms_threshold: 0.5,
            top_k: 100,
            class_agnostic_nms: false,
            lr: 1e-3,
            batch_size: 32,
            epochs: 10,
            seed: 0,
            features_dir: "features".into(),
            annotations: "annotations.json".into(),
            proposal_checkpoint: "proposal.s2dp".into(),
            classifier_checkpoint: "classifier.s2dp".into(),
            proposal_history: "proposal_history.csv".into(),
            classifier_history: "classifier_history.csv".into(),
            predictions: "predictions.json".into(),
            proposals: "proposals.json".into(),
            report: "report.json".into(),
            base_dir: PathBuf::new(),
        }
    }
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self> {
        let de = &mut serde_json::Deserializer::from_str(text);
        let cfg: RunConfig = serde_path_to_error::deserialize(de).map_err(|e| {
            let path = e.path().to_string();
            Error::validation(
                if path == "." { "$".to_string() } else { path },
                e.into_inner().to_string(),
            )
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Io(std::io::Error::new(
                e.kind(),
                format!("{}: {e}", path.display()),
            ))
        })?;
        let mut cfg = Self::parse(&text)?;
        cfg.base_dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn with_base_dir(mut self, dir: impl Into<PathBuf>) -> Self {
        self.base_dir = dir.into();
        self
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        self.base_dir.join(p)
    }

    pub fn validate(&self) -> Result<()> {
        fn wrap(key: &'static str) -> impl Fn(Error) -> Error {
            move |e| Error::validation(key, e.to_string())
        }
        SamplingConfig::with_thresholds(self.num_clips, self.t_min, self.t_max)
            .map_err(wrap("num_clips/t_min/t_max"))?;
        if self.input_dim == Some(0) {
            return Err(Error::validation("input_dim", "must be positive"));
        }
        if self.num_classes == Some(0) {
            return Err(Error::validation("num_classes", "must be positive"));
        }
        self.proposal_arch(1)
            .validate()
            .map_err(wrap("hidden_size/kernel_size/conv_layers"))?;
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(Error::validation(
                "nms_threshold",
                format!("must lie in [0, 1], got {}", self.nms_threshold),
            ));
        }
        if self.top_k == 0 {
            return Err(Error::validation("top_k", "must be positive"));
        }
        self.train_options()
            .validate()
            .map_err(wrap("lr/batch_size"))?;
        Ok(())
    }

    pub fn sampling(&self) -> Result<SamplingConfig> {
        SamplingConfig::with_thresholds(self.num_clips, self.t_min, self.t_max)
    }

    pub fn proposal_arch(&self, input_dim: usize) -> ProposalArch {
        ProposalArch {
            input_dim,
            hidden: self.hidden_size,
            kernel_size: self.kernel_size,
            conv_layers: self.conv_layers,
        }
    }

    pub fn classifier_arch(&self, input_dim: usize, num_classes: usize) -> ClassifierArch {
        ClassifierArch {
            input_dim,
            hidden: self.hidden_size,
            num_classes,
        }
    }

    pub fn train_options(&self) -> TrainOptions {
        TrainOptions {
            lr: self.lr,
            batch_size: self.batch_size,
            epochs: self.epochs,
            seed: self.seed,
        }
    }

    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions {
            top_k: self.top_k,
            nms_threshold: self.nms_threshold,
            nms_mode: if self.class_agnostic_nms {
                NmsMode::ClassAgnostic
            } else {
                NmsMode::PerClass
            },
        }
    }
}

/// Reads the annotations plus `features_dir/<video_id>.s2dt` for every video.
/// Feature files whose clip count or dimension disagree with the config are
/// rejected, not resampled.
pub fn load_dataset(cfg: &RunConfig) -> Result<(Vec<VideoSample>, GroundTruthSet)> {
    let gts = read_annotations(cfg.resolve(&cfg.annotations))?;
    if let Some(c) = cfg.num_classes {
        if gts.classes.len() > c {
            return Err(Error::validation(
                "num_classes",
                format!(
                    "annotations use {} labels but num_classes is {c}",
                    gts.classes.len()
                ),
            ));
        }
    }
    let dir = cfg.resolve(&cfg.features_dir);
    let mut dim = cfg.input_dim;
    let mut samples = Vec::with_capacity(gts.videos.len());
    for (vid, ann) in &gts.videos {
        let path = dir.join(format!("{vid}.s2dt"));
        let features = read_features(&path)?;
        if features.num_clips() != cfg.num_clips {
            return Err(Error::validation(
                path.display().to_string(),
                format!(
                    "has {} clips, config expects {}",
                    features.num_clips(),
                    cfg.num_clips
                ),
            ));
        }
        match dim {
            Some(d) if d != features.dim() => {
                return Err(Error::validation(
                    path.display().to_string(),
                    format!("has feature dimension {}, expected {d}", features.dim()),
                ))
            }
            _ => dim = Some(features.dim()),
        }
        samples.push(VideoSample {
            video_id: vid.clone(),
            duration: ann.duration,
            features,
            instances: ann.instances.clone(),
        });
    }
    Ok((samples, gts))
}
