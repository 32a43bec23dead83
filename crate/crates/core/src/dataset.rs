//! In-memory containers shared by training, inference and evaluation.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::nn::Tensor;

/// Per-clip input features, one `f32` row per clip.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipFeatureSequence {
    num_clips: usize,
    dim: usize,
    data: Vec<f32>,
}

impl ClipFeatureSequence {
    pub fn new(num_clips: usize, dim: usize, data: Vec<f32>) -> Result<Self> {
        if num_clips == 0 || dim == 0 {
            return Err(Error::shape(format!(
                "feature sequence needs positive sizes, got {num_clips} x {dim}"
            )));
        }
        if data.len() != num_clips * dim {
            return Err(Error::shape(format!(
                "{num_clips} x {dim} features need {} values, got {}",
                num_clips * dim,
                data.len()
            )));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("feature sequence contains non-finite values"));
        }
        Ok(ClipFeatureSequence {
            num_clips,
            dim,
            data,
        })
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        if t.rank() != 2 {
            return Err(Error::shape(format!(
                "features must be N x D, got {:?}",
                t.shape()
            )));
        }
        Self::new(
            t.shape()[0],
            t.shape()[1],
            t.data().iter().map(|&v| v as f32).collect(),
        )
    }

    pub fn num_clips(&self) -> usize {
        self.num_clips
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![self.num_clips, self.dim],
            self.data.iter().map(|&v| v as f64).collect(),
        )
        .expect("dimensions checked on construction")
    }
}

/// A labelled action instance, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Instance {
    pub class: usize,
    pub segment: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoAnnotation {
    pub duration: f64,
    pub instances: Vec<Instance>,
}

/// Ground truth for a set of videos, keyed by video id.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruthSet {
    /// Class names indexed by class id (sorted order).
    pub classes: Vec<String>,
    pub videos: BTreeMap<String, VideoAnnotation>,
}

impl GroundTruthSet {
    pub fn is_empty(&self) -> bool {
        self.videos.is_empty()
    }

    pub fn instance_count(&self) -> usize {
        self.videos.values().map(|v| v.instances.len()).sum()
    }

    pub fn class_id(&self, label: &str) -> Option<usize> {
        self.classes
            .binary_search_by(|c| c.as_str().cmp(label))
            .ok()
    }
}

/// One training or inference video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoSample {
    pub video_id: String,
    pub duration: f64,
    pub features: ClipFeatureSequence,
    pub instances: Vec<Instance>,
}

impl VideoSample {
    pub fn segments(&self) -> Vec<[f64; 2]> {
        self.instances.iter().map(|i| i.segment).collect()
    }
}

/// Checks that a segment is non-empty and lies within `[0, duration]`.
pub fn check_segment(segment: [f64; 2], duration: f64) -> std::result::Result<(), String> {
    let [start, end] = segment;
    if !start.is_finite() || !end.is_finite() {
        return Err("segment bounds must be finite".into());
    }
    if start >= end {
        return Err(format!("start ≥ end ({start} ≥ {end})"));
    }
    if start < 0.0 || end > duration {
        return Err(format!(
            "segment [{start}, {end}] outside video duration {duration}"
        ));
    }
    Ok(())
}
