//! Temporal IoU, average recall (AR@AN, AUC) and mean average precision.
//!
//! Matching is one-to-one at every tIoU threshold: a ground-truth instance
//! is claimed by at most one proposal or detection, processed in rank order,
//! and each prediction takes the unmatched instance it overlaps most.

use std::collections::BTreeMap;

use crate::dataset::GroundTruthSet;
use crate::detection::Detection;
use crate::error::{Error, Result};

#[allow(clippy::neg_cmp_op_on_partial_ord)] // also rejects NaN
/// Temporal intersection over union of two `[start, end]` segments.
pub fn segment_iou(a: [f64; 2], b: [f64; 2]) -> Result<f64> {
    for s in [a, b] {
        if !(s[0] < s[1]) {
            return Err(Error::Degenerate(format!(
                "segment [{}, {}] has no positive length",
                s[0], s[1]
            )));
        }
    }
    Ok(iou(a, b))
}

pub(crate) fn iou(a: [f64; 2], b: [f64; 2]) -> f64 {
    let inter = (a[1].min(b[1]) - a[0].max(b[0])).max(0.0);
    let union = (a[1] - a[0]) + (b[1] - b[0]) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalProtocol {
    pub tiou_thresholds: Vec<f64>,
    /// Largest AN on the AR curve; also the per-video proposal cap.
    pub max_proposals: usize,
}

impl Default for EvalProtocol {
    /// tIoU 0.50:0.05:0.95 and AN up to 100.
    fn default() -> Self {
        EvalProtocol {
            tiou_thresholds: (0..10).map(|k| (50 + 5 * k) as f64 / 100.0).collect(),
            max_proposals: 100,
        }
    }
}

impl EvalProtocol {
    pub fn single(threshold: f64) -> Self {
        EvalProtocol {
            tiou_thresholds: vec![threshold],
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.tiou_thresholds.is_empty() {
            return Err(Error::config(
                "evaluation needs at least one tIoU threshold",
            ));
        }
        if self.tiou_thresholds.iter().any(|&t| !(t > 0.0 && t <= 1.0)) {
            return Err(Error::config("tIoU thresholds must lie in (0, 1]"));
        }
        if self.tiou_thresholds.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::config("tIoU thresholds must be strictly increasing"));
        }
        if self.max_proposals == 0 {
            return Err(Error::config("max_proposals must be positive"));
        }
        Ok(())
    }
}

fn ranked(dets: &[Detection]) -> Vec<&Detection> {
    let mut out: Vec<&Detection> = dets.iter().collect();
    out.sort_by(|a, b| b.score.total_cmp(&a.score));
    out
}

/// Greedy one-to-one assignment. Returns, per prediction in the given order,
/// whether it claimed a ground-truth segment.
fn greedy_match(
    preds: impl Iterator<Item = [f64; 2]>,
    gts: &[[f64; 2]],
    threshold: f64,
) -> Vec<bool> {
    let mut taken = vec![false; gts.len()];
    preds
        .map(|p| {
            let mut best: Option<(usize, f64)> = None;
            for (g, gt) in gts.iter().enumerate() {
                if taken[g] {
                    continue;
                }
                let o = iou(p, *gt);
                if o >= threshold && best.is_none_or(|(_, b)| o > b) {
                    best = Some((g, o));
                }
            }
            if let Some((g, _)) = best {
                taken[g] = true;
                true
            } else {
                false
            }
        })
        .collect()
}

/// Average recall for every AN in `1..=max_an` (entry `an - 1`).
pub fn recall_curve(
    proposals: &BTreeMap<String, Vec<Detection>>,
    gts: &GroundTruthSet,
    max_an: usize,
    protocol: &EvalProtocol,
) -> Result<Vec<f64>> {
    protocol.validate()?;
    let total = gts.instance_count();
    if total == 0 {
        return Err(Error::Degenerate(
            "ground truth has no instances; recall is undefined".into(),
        ));
    }
    let mut curve = vec![0.0; max_an];
    for &thr in &protocol.tiou_thresholds {
        let mut hits = vec![0usize; max_an];
        for (vid, ann) in &gts.videos {
            let Some(props) = proposals.get(vid) else {
                continue;
            };
            let segs: Vec<[f64; 2]> = ann.instances.iter().map(|i| i.segment).collect();
            let ranked = ranked(props);
            let matched = greedy_match(ranked.iter().take(max_an).map(|d| d.segment()), &segs, thr);
            for (rank, &m) in matched.iter().enumerate() {
                if m {
                    hits[rank] += 1;
                }
            }
        }
        let mut cum = 0;
        for (an, h) in hits.iter().enumerate() {
            cum += h;
            curve[an] += cum as f64 / total as f64;
        }
    }
    let k = protocol.tiou_thresholds.len() as f64;
    curve.iter_mut().for_each(|v| *v /= k);
    Ok(curve)
}

/// AR@AN: recall over the top `an` proposals per video, averaged over thresholds.
pub fn average_recall_at(
    proposals: &BTreeMap<String, Vec<Detection>>,
    gts: &GroundTruthSet,
    an: usize,
    protocol: &EvalProtocol,
) -> Result<f64> {
    if an == 0 {
        // still reject an empty ground truth
        recall_curve(proposals, gts, 0, protocol)?;
        return Ok(0.0);
    }
    Ok(recall_curve(proposals, gts, an, protocol)?[an - 1])
}

/// Area under the AR-AN curve as a percentage: mean of AR@1..=max_proposals, times 100.
pub fn ar_auc(
    proposals: &BTreeMap<String, Vec<Detection>>,
    gts: &GroundTruthSet,
    protocol: &EvalProtocol,
) -> Result<f64> {
    let curve = recall_curve(proposals, gts, protocol.max_proposals, protocol)?;
    Ok(100.0 * curve.iter().sum::<f64>() / curve.len() as f64)
}

/// Every-point interpolated AP from cumulative precision and recall.
pub fn interpolated_ap(precision: &[f64], recall: &[f64]) -> f64 {
    let mut mprec = Vec::with_capacity(precision.len() + 2);
    mprec.push(0.0);
    mprec.extend_from_slice(precision);
    mprec.push(0.0);
    let mut mrec = Vec::with_capacity(recall.len() + 2);
    mrec.push(0.0);
    mrec.extend_from_slice(recall);
    mrec.push(1.0);
    for i in (0..mprec.len() - 1).rev() {
        mprec[i] = mprec[i].max(mprec[i + 1]);
    }
    (1..mrec.len())
        .filter(|&i| mrec[i] != mrec[i - 1])
        .map(|i| (mrec[i] - mrec[i - 1]) * mprec[i])
        .sum()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionMetrics {
    /// Mean over evaluated classes and thresholds.
    pub map: f64,
    pub thresholds: Vec<f64>,
    /// Class id -> AP per threshold, for classes with at least one instance.
    pub ap: BTreeMap<usize, Vec<f64>>,
}

impl DetectionMetrics {
    /// Class id -> AP averaged over thresholds.
    pub fn per_class(&self) -> BTreeMap<usize, f64> {
        self.ap
            .iter()
            .map(|(&c, v)| (c, v.iter().sum::<f64>() / v.len() as f64))
            .collect()
    }

    /// mAP at a single threshold index.
    pub fn map_at(&self, threshold_index: usize) -> f64 {
        self.ap.values().map(|v| v[threshold_index]).sum::<f64>() / self.ap.len() as f64
    }
}

/// Class-wise AP over tIoU thresholds and its mean.
pub fn mean_average_precision(
    detections: &BTreeMap<String, Vec<Detection>>,
    gts: &GroundTruthSet,
    protocol: &EvalProtocol,
) -> Result<DetectionMetrics> {
    protocol.validate()?;
    let mut by_class: BTreeMap<usize, BTreeMap<&str, Vec<[f64; 2]>>> = BTreeMap::new();
    for (vid, ann) in &gts.videos {
        for inst in &ann.instances {
            by_class
                .entry(inst.class)
                .or_default()
                .entry(vid.as_str())
                .or_default()
                .push(inst.segment);
        }
    }
    if by_class.is_empty() {
        return Err(Error::Degenerate(
            "ground truth has no instances; mAP is undefined".into(),
        ));
    }

    let mut ap = BTreeMap::new();
    for (&class, class_gts) in &by_class {
        let npos: usize = class_gts.values().map(Vec::len).sum();
        let mut preds: Vec<(&str, &Detection)> = detections
            .iter()
            .filter(|(vid, _)| gts.videos.contains_key(vid.as_str()))
            .flat_map(|(vid, ds)| ds.iter().map(move |d| (vid.as_str(), d)))
            .filter(|(_, d)| d.class == Some(class))
            .collect();
        preds.sort_by(|a, b| b.1.score.total_cmp(&a.1.score));

        let mut per_threshold = Vec::with_capacity(protocol.tiou_thresholds.len());
        for &thr in &protocol.tiou_thresholds {
            let mut taken: BTreeMap<&str, Vec<bool>> = class_gts
                .iter()
                .map(|(v, s)| (*v, vec![false; s.len()]))
                .collect();
            let (mut tp, mut fp) = (0usize, 0usize);
            let mut precision = Vec::with_capacity(preds.len());
            let mut recall = Vec::with_capacity(preds.len());
            for (vid, det) in &preds {
                let mut best: Option<(usize, f64)> = None;
                if let (Some(segs), Some(used)) = (class_gts.get(vid), taken.get(vid)) {
                    for (g, seg) in segs.iter().enumerate() {
                        if used[g] {
                            continue;
                        }
                        let o = iou(det.segment(), *seg);
                        if o >= thr && best.is_none_or(|(_, b)| o > b) {
                            best = Some((g, o));
                        }
                    }
                }
                match best {
                    Some((g, _)) => {
                        taken.get_mut(vid).unwrap()[g] = true;
                        tp += 1;
                    }
                    None => fp += 1,
                }
                precision.push(tp as f64 / (tp + fp) as f64);
                recall.push(tp as f64 / npos as f64);
            }
            per_threshold.push(interpolated_ap(&precision, &recall));
        }
        ap.insert(class, per_threshold);
    }
    let map = ap.values().flat_map(|v| v.iter()).sum::<f64>()
        / (ap.len() * protocol.tiou_thresholds.len()) as f64;
    Ok(DetectionMetrics {
        map,
        thresholds: protocol.tiou_thresholds.clone(),
        ap,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{Instance, VideoAnnotation};

    fn det(vid: &str, class: Option<usize>, s: f64, e: f64, score: f64) -> Detection {
        Detection {
            video_id: vid.into(),
            class,
            start: s,
            end: e,
            score,
        }
    }

    fn gts(items: &[(&str, usize, [f64; 2])]) -> GroundTruthSet {
        let mut set = GroundTruthSet {
            classes: vec!["a".into(), "b".into()],
            ..Default::default()
        };
        for &(vid, class, segment) in items {
            set.videos
                .entry(vid.to_string())
                .or_insert_with(|| VideoAnnotation {
                    duration: 100.0,
                    instances: vec![],
                })
                .instances
                .push(Instance { class, segment });
        }
        set
    }

    #[test]
    fn iou_examples() {
        assert_eq!(segment_iou([1.0, 3.0], [1.0, 3.0]).unwrap(), 1.0);
        assert_eq!(segment_iou([0.0, 1.0], [2.0, 3.0]).unwrap(), 0.0);
        assert!((segment_iou([0.0, 2.0], [1.0, 3.0]).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(segment_iou([2.0, 2.0], [1.0, 3.0]).is_err());
    }

    #[test]
    fn default_protocol() {
        let p = EvalProtocol::default();
        assert_eq!(p.tiou_thresholds.len(), 10);
        assert_eq!(p.tiou_thresholds[0], 0.5);
        assert_eq!(p.tiou_thresholds[9], 0.95);
        p.validate().unwrap();
    }

    #[test]
    fn recall_single_gt_iou_point_six() {
        let g = gts(&[("v", 0, [0.0, 10.0])]);
        let props = BTreeMap::from([("v".to_string(), vec![det("v", None, 0.0, 6.0, 0.9)])]);
        let ar = average_recall_at(&props, &g, 100, &EvalProtocol::default()).unwrap();
        assert!((ar - 0.3).abs() < 1e-12);
        assert_eq!(
            average_recall_at(&props, &g, 0, &EvalProtocol::default()).unwrap(),
            0.0
        );
    }

    #[test]
    fn empty_ground_truth_is_an_error() {
        let g = GroundTruthSet::default();
        let props = BTreeMap::new();
        assert!(average_recall_at(&props, &g, 10, &EvalProtocol::default()).is_err());
        assert!(mean_average_precision(&props, &g, &EvalProtocol::default()).is_err());
    }

    #[test]
    fn auc_rank_51() {
        let g = gts(&[("v", 0, [10.0, 20.0])]);
        let mut props: Vec<Detection> = (0..50)
            .map(|k| {
                det(
                    "v",
                    None,
                    50.0 + k as f64 * 0.1,
                    60.0 + k as f64 * 0.1,
                    1.0 - k as f64 * 0.01,
                )
            })
            .collect();
        props.push(det("v", None, 10.0, 20.0, 0.4));
        let props = BTreeMap::from([("v".to_string(), props)]);
        let auc = ar_auc(&props, &g, &EvalProtocol::default()).unwrap();
        assert!((auc - 50.0).abs() < 1e-9);
    }

    #[test]
    fn map_single_detection() {
        let g = gts(&[("v", 0, [0.0, 10.0])]);
        let dets = BTreeMap::from([("v".to_string(), vec![det("v", Some(0), 0.0, 9.0, 0.8)])]);
        let m = mean_average_precision(&dets, &g, &EvalProtocol::default()).unwrap();
        assert!((m.map - 0.9).abs() < 1e-12);
        assert_eq!(m.ap[&0][8], 1.0);
        assert_eq!(m.ap[&0][9], 0.0);
    }

    #[test]
    fn map_wrong_class_is_zero() {
        let g = gts(&[("v", 0, [0.0, 10.0])]);
        let dets = BTreeMap::from([("v".to_string(), vec![det("v", Some(1), 0.0, 10.0, 0.8)])]);
        let m = mean_average_precision(&dets, &g, &EvalProtocol::default()).unwrap();
        assert_eq!(m.map, 0.0);
    }

    #[test]
    fn duplicate_detection_is_false_positive() {
        let g = gts(&[("v", 0, [0.0, 10.0])]);
        let dets = BTreeMap::from([(
            "v".to_string(),
            vec![
                det("v", Some(0), 0.0, 10.0, 0.9),
                det("v", Some(0), 0.0, 10.0, 0.8),
            ],
        )]);
        let m = mean_average_precision(&dets, &g, &EvalProtocol::single(0.5)).unwrap();
        assert_eq!(m.map, 1.0);
        let props = BTreeMap::from([("v".to_string(), dets["v"].clone())]);
        let ar = average_recall_at(&props, &g, 2, &EvalProtocol::single(0.5)).unwrap();
        assert_eq!(ar, 1.0);
    }

    #[test]
    fn ap_interpolation() {
        // TP, FP, TP with two positives
        let ap = interpolated_ap(&[1.0, 0.5, 2.0 / 3.0], &[0.5, 0.5, 1.0]);
        assert!((ap - (0.5 * 1.0 + 0.5 * 2.0 / 3.0)).abs() < 1e-12);
        assert_eq!(interpolated_ap(&[], &[]), 0.0);
    }
}
