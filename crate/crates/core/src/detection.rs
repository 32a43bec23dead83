//! Score fusion, map-to-time conversion, NMS and top-k decoding.

use std::cmp::Ordering;

use crate::classifier::{classifier_forward, ClassScoreMap, ClassifierParams};
use crate::dataset::ClipFeatureSequence;
use crate::error::{Error, Result};
use crate::map::{SamplingConfig, ValidityMask};
use crate::metrics::iou;
use crate::proposal::{proposal_forward, OverlapScoreMap, ProposalNetParams};

/// A scored temporal segment. `class` is `None` for class-agnostic proposals.
#[derive(Debug, Clone, PartialEq)]
pub struct Detection {
    pub video_id: String,
    pub class: Option<usize>,
    pub start: f64,
    pub end: f64,
    pub score: f64,
}

impl Detection {
    pub fn segment(&self) -> [f64; 2] {
        [self.start, self.end]
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }
}

/// Ranking order: score descending, then earlier start, then shorter, then class.
pub fn rank_order(a: &Detection, b: &Detection) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then(a.start.total_cmp(&b.start))
        .then(a.length().total_cmp(&b.length()))
        .then(a.class.cmp(&b.class))
}

/// `P_over * P_class`, `N x N x C`, zero at invalid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedScoreMap {
    num_classes: usize,
    values: Vec<f64>,
    mask: ValidityMask,
}

impl FusedScoreMap {
    pub fn new(num_classes: usize, values: Vec<f64>, mask: ValidityMask) -> Result<Self> {
        let n = mask.size();
        if num_classes == 0 || values.len() != n * n * num_classes {
            return Err(Error::shape(format!(
                "fused map needs {n} x {n} x {num_classes} values, got {}",
                values.len()
            )));
        }
        Ok(FusedScoreMap {
            num_classes,
            values,
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

    pub fn scores(&self, i: usize, j: usize) -> &[f64] {
        let k = (i * self.num_clips() + j) * self.num_classes;
        &self.values[k..k + self.num_classes]
    }
}

pub fn fuse_scores(over: &OverlapScoreMap, class: &ClassScoreMap) -> Result<FusedScoreMap> {
    let n = over.num_clips();
    if class.num_clips() != n || class.mask() != over.mask() {
        return Err(Error::shape(format!(
            "overlap map has {n} clips, class map has {}",
            class.num_clips()
        )));
    }
    let c = class.num_classes();
    let mut values = vec![0.0; n * n * c];
    for i in 0..n {
        for j in i..n {
            if !over.mask().get(i, j) {
                continue;
            }
            let p = over.score(i, j);
            let k = (i * n + j) * c;
            for (dst, &q) in values[k..k + c].iter_mut().zip(class.probs(i, j)) {
                *dst = p * q;
            }
        }
    }
    FusedScoreMap::new(c, values, over.mask().clone())
}

/// Seconds spanned by cell `(i, j)`: `[i * tau, (j + 1) * tau]` with `tau = duration / N`.
pub fn coord_to_interval(
    cfg: &SamplingConfig,
    i: usize,
    j: usize,
    duration: f64,
) -> Result<[f64; 2]> {
    let n = cfg.num_clips();
    if i >= n || j >= n || j < i {
        return Err(Error::Index(format!(
            "({i}, {j}) is not a map coordinate for N={n}"
        )));
    }
    if !(duration > 0.0 && duration.is_finite()) {
        return Err(Error::config(format!(
            "video duration must be positive, got {duration}"
        )));
    }
    let tau = duration / n as f64;
    Ok([i as f64 * tau, (j + 1) as f64 * tau])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NmsMode {
    #[default]
    PerClass,
    ClassAgnostic,
}

/// Greedy NMS over items already in [`rank_order`], stopping after `limit` keeps.
fn greedy_nms(
    sorted: Vec<Detection>,
    threshold: f64,
    mode: NmsMode,
    limit: usize,
) -> Vec<Detection> {
    let mut kept: Vec<Detection> = Vec::new();
    for cand in sorted {
        if kept.len() >= limit {
            break;
        }
        let suppressed = kept.iter().any(|k| {
            (mode == NmsMode::ClassAgnostic || k.class == cand.class)
                && iou(k.segment(), cand.segment()) > threshold
        });
        if !suppressed {
            kept.push(cand);
        }
    }
    kept
}

/// Greedy non-maximum suppression. An item is dropped when its tIoU with an
/// already kept item of the same group is strictly greater than `threshold`.
pub fn nms(candidates: &[Detection], threshold: f64, mode: NmsMode) -> Vec<Detection> {
    let mut sorted = candidates.to_vec();
    sorted.sort_by(rank_order);
    greedy_nms(sorted, threshold, mode, usize::MAX)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    pub top_k: usize,
    pub nms_threshold: f64,
    pub nms_mode: NmsMode,
}

impl Default for DecodeOptions {
    fn default() -> Self {
        DecodeOptions {
            top_k: 100,
            nms_threshold: 0.5,
            nms_mode: NmsMode::PerClass,
        }
    }
}

impl DecodeOptions {
    fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::config("top_k must be positive"));
        }
        if !(0.0..=1.0).contains(&self.nms_threshold) {
            return Err(Error::config(format!(
                "NMS threshold must lie in [0, 1], got {}",
                self.nms_threshold
            )));
        }
        Ok(())
    }
}

fn finish(mut cands: Vec<Detection>, opts: &DecodeOptions, mode: NmsMode) -> Vec<Detection> {
    cands.sort_by(rank_order);
    // greedy NMS in global rank order only compares within a group, so it
    // equals per-group NMS followed by a merge, and may stop at top_k
    greedy_nms(cands, opts.nms_threshold, mode, opts.top_k)
}

/// Class-labelled detections from a fused map.
pub fn decode_detections(
    video_id: &str,
    fused: &FusedScoreMap,
    cfg: &SamplingConfig,
    duration: f64,
    opts: &DecodeOptions,
) -> Result<Vec<Detection>> {
    opts.validate()?;
    let n = cfg.num_clips();
    if fused.num_clips() != n {
        return Err(Error::shape(format!(
            "fused map has {} clips, config expects {n}",
            fused.num_clips()
        )));
    }
    let mut cands = Vec::new();
    for i in 0..n {
        for j in i..n {
            if !fused.mask().get(i, j) {
                continue;
            }
            let [start, end] = coord_to_interval(cfg, i, j, duration)?;
            for (c, &score) in fused.scores(i, j).iter().enumerate() {
                if score > 0.0 {
                    cands.push(Detection {
                        video_id: video_id.to_string(),
                        class: Some(c),
                        start,
                        end,
                        score,
                    });
                }
            }
        }
    }
    Ok(finish(cands, opts, opts.nms_mode))
}

/// Class-agnostic proposals ranked by overlap score alone.
pub fn decode_proposals(
    video_id: &str,
    over: &OverlapScoreMap,
    cfg: &SamplingConfig,
    duration: f64,
    opts: &DecodeOptions,
) -> Result<Vec<Detection>> {
    opts.validate()?;
    let n = cfg.num_clips();
    if over.num_clips() != n {
        return Err(Error::shape(format!(
            "overlap map has {} clips, config expects {n}",
            over.num_clips()
        )));
    }
    let mut cands = Vec::new();
    for i in 0..n {
        for j in i..n {
            let score = over.score(i, j);
            if !over.mask().get(i, j) || score <= 0.0 {
                continue;
            }
            let [start, end] = coord_to_interval(cfg, i, j, duration)?;
            cands.push(Detection {
                video_id: video_id.to_string(),
                class: None,
                start,
                end,
                score,
            });
        }
    }
    Ok(finish(cands, opts, NmsMode::ClassAgnostic))
}

/// Ranked proposals and detections for one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoOutputs {
    pub proposals: Vec<Detection>,
    pub detections: Vec<Detection>,
}

/// Runs both networks on one video and decodes class-agnostic proposals and
/// class-labelled detections.
pub fn infer_video(
    video_id: &str,
    proposal: &ProposalNetParams,
    classifier: &ClassifierParams,
    features: &ClipFeatureSequence,
    cfg: &SamplingConfig,
    duration: f64,
    opts: &DecodeOptions,
) -> Result<VideoOutputs> {
    let over = proposal_forward(proposal, features, cfg)?;
    let class = classifier_forward(classifier, features, cfg)?;
    let fused = fuse_scores(&over, &class)?;
    Ok(VideoOutputs {
        proposals: decode_proposals(video_id, &over, cfg, duration, opts)?,
        detections: decode_detections(video_id, &fused, cfg, duration, opts)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(class: usize, s: f64, e: f64, score: f64) -> Detection {
        Detection {
            video_id: "v".into(),
            class: Some(class),
            start: s,
            end: e,
            score,
        }
    }

    fn cfg8() -> SamplingConfig {
        SamplingConfig::new(8).unwrap()
    }

    #[test]
    fn interval_examples() {
        assert_eq!(coord_to_interval(&cfg8(), 0, 7, 8.0).unwrap(), [0.0, 8.0]);
        assert_eq!(coord_to_interval(&cfg8(), 0, 3, 8.0).unwrap(), [0.0, 4.0]);
        let big = SamplingConfig::default();
        assert_eq!(coord_to_interval(&big, 0, 0, 128.0).unwrap(), [0.0, 0.5]);
        assert!(coord_to_interval(&cfg8(), 3, 2, 8.0).is_err());
        assert!(coord_to_interval(&cfg8(), 0, 2, 0.0).is_err());
    }

    #[test]
    fn nms_examples() {
        // [0,10] vs [2,10]: IoU 0.8; [0,10] vs [4,14]: 6/14
        let kept = nms(
            &[d(0, 0.0, 10.0, 0.9), d(0, 2.0, 10.0, 0.8)],
            0.5,
            NmsMode::PerClass,
        );
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].score, 0.9);

        let disjoint = [
            d(0, 0.0, 1.0, 0.2),
            d(0, 2.0, 3.0, 0.9),
            d(0, 5.0, 6.0, 0.5),
        ];
        assert_eq!(nms(&disjoint, 0.5, NmsMode::PerClass).len(), 3);

        // [0,3] vs [1,4]: inter 2, union 4 -> IoU exactly 0.5 survives
        let boundary = [d(0, 0.0, 3.0, 0.9), d(0, 1.0, 4.0, 0.8)];
        assert_eq!(nms(&boundary, 0.5, NmsMode::PerClass).len(), 2);
    }

    #[test]
    fn nms_groups_by_class() {
        let items = [d(0, 0.0, 10.0, 0.9), d(1, 0.0, 10.0, 0.8)];
        assert_eq!(nms(&items, 0.5, NmsMode::PerClass).len(), 2);
        assert_eq!(nms(&items, 0.5, NmsMode::ClassAgnostic).len(), 1);
    }

    #[test]
    fn rank_ties_prefer_earlier_then_shorter() {
        let mut items = [
            d(0, 2.0, 3.0, 0.5),
            d(0, 1.0, 5.0, 0.5),
            d(0, 1.0, 2.0, 0.5),
        ];
        items.sort_by(rank_order);
        assert_eq!(items[0].segment(), [1.0, 2.0]);
        assert_eq!(items[1].segment(), [1.0, 5.0]);
    }

    #[test]
    fn zero_top_k_is_config_error() {
        let opts = DecodeOptions {
            top_k: 0,
            ..Default::default()
        };
        let c = cfg8();
        let fused = FusedScoreMap::new(1, vec![0.0; 64], ValidityMask::for_config(&c)).unwrap();
        assert!(matches!(
            decode_detections("v", &fused, &c, 8.0, &opts),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn decode_single_and_empty() {
        let c = cfg8();
        let mask = ValidityMask::for_config(&c);
        let mut values = vec![0.0; 64 * 2];
        let fused = FusedScoreMap::new(2, values.clone(), mask.clone()).unwrap();
        assert!(
            decode_detections("v", &fused, &c, 8.0, &DecodeOptions::default())
                .unwrap()
                .is_empty()
        );

        values[(2 * 8 + 5) * 2 + 1] = 0.7;
        let fused = FusedScoreMap::new(2, values, mask).unwrap();
        let out = decode_detections("v", &fused, &c, 16.0, &DecodeOptions::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(
            (out[0].class, out[0].start, out[0].end, out[0].score),
            (Some(1), 4.0, 12.0, 0.7)
        );
    }

    #[test]
    fn decode_overlapping_pair() {
        // no two N=8 candidates overlap by more than 0.5, so use N=16:
        // (0,3) -> [0,4] and (1,4) -> [1,5] have IoU 3/5
        let c = SamplingConfig::new(16).unwrap();
        let mut values = vec![0.0; 256];
        values[3] = 0.9;
        values[16 + 4] = 0.7;
        let fused = FusedScoreMap::new(1, values, ValidityMask::for_config(&c)).unwrap();
        let out = decode_detections("v", &fused, &c, 16.0, &DecodeOptions::default()).unwrap();
        assert_eq!(out.len(), 1);
        assert_eq!(out[0].score, 0.9);
    }
}
