use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::{check_segment, GroundTruthSet, Instance, VideoAnnotation};
use crate::detection::Detection;
use crate::error::{Error, Result};

#[derive(Debug, Serialize, Deserialize)]
struct AnnotationFile {
    database: BTreeMap<String, RawVideo>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawVideo {
    duration: f64,
    #[serde(default)]
    annotations: Vec<RawInstance>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RawInstance {
    label: String,
    segment: [f64; 2],
}

/// One row of the predictions file. `label` is absent for class-agnostic proposals.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PredictionEntry {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    pub segment: [f64; 2],
    pub score: f64,
}

/// Evaluation summary. Recall figures are percentages, mAP is a fraction.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(rename = "AR@100", default, skip_serializing_if = "Option::is_none")]
    pub ar_at_100: Option<f64>,
    #[serde(rename = "AUC", default, skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
    #[serde(rename = "mAP", default, skip_serializing_if = "Option::is_none")]
    pub map: Option<f64>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub per_class_ap: BTreeMap<String, f64>,
}

fn parse_json<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T> {
    let de = &mut serde_json::Deserializer::from_str(text);
    serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        Error::validation(
            if path == "." { "$".to_string() } else { path },
            e.into_inner().to_string(),
        )
    })
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| {
        Error::Io(std::io::Error::new(
            e.kind(),
            format!("{}: {e}", path.display()),
        ))
    })
}

/// Parses the annotation schema; class ids follow sorted label order.
pub fn parse_annotations(text: &str) -> Result<GroundTruthSet> {
    let raw: AnnotationFile = parse_json(text)?;
    let classes: Vec<String> = raw
        .database
        .values()
        .flat_map(|v| v.annotations.iter().map(|a| a.label.clone()))
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let mut gts = GroundTruthSet {
        classes,
        videos: BTreeMap::new(),
    };
    for (vid, video) in raw.database {
        if !(video.duration.is_finite() && video.duration > 0.0) {
            return Err(Error::validation(
                format!("database.{vid}.duration"),
                format!("duration must be positive, got {}", video.duration),
            ));
        }
        let mut instances = Vec::with_capacity(video.annotations.len());
        for (k, a) in video.annotations.iter().enumerate() {
            check_segment(a.segment, video.duration).map_err(|msg| {
                Error::validation(format!("database.{vid}.annotations[{k}].segment"), msg)
            })?;
            instances.push(Instance {
                class: gts.class_id(&a.label).expect("label collected above"),
                segment: a.segment,
            });
        }
        gts.videos.insert(
            vid,
            VideoAnnotation {
                duration: video.duration,
                instances,
            },
        );
    }
    Ok(gts)
}

pub fn read_annotations(path: impl AsRef<Path>) -> Result<GroundTruthSet> {
    parse_annotations(&read_text(path.as_ref())?)
}

pub fn gts_to_json(gts: &GroundTruthSet) -> serde_json::Value {
    let database = gts
        .videos
        .iter()
        .map(|(vid, v)| {
            let video = RawVideo {
                duration: v.duration,
                annotations: v
                    .instances
                    .iter()
                    .map(|i| RawInstance {
                        label: gts.classes[i.class].clone(),
                        segment: i.segment,
                    })
                    .collect(),
            };
            (vid.clone(), video)
        })
        .collect();
    serde_json::to_value(AnnotationFile { database }).expect("annotation types serialize")
}

pub fn write_annotations(path: impl AsRef<Path>, gts: &GroundTruthSet) -> Result<()> {
    write_json(path, &gts_to_json(gts))
}

/// Parses predictions, resolving labels against the ground-truth class list.
pub fn parse_predictions(
    text: &str,
    classes: &[String],
) -> Result<BTreeMap<String, Vec<Detection>>> {
    let raw: BTreeMap<String, Vec<PredictionEntry>> = parse_json(text)?;
    let mut out = BTreeMap::new();
    for (vid, entries) in raw {
        let mut dets = Vec::with_capacity(entries.len());
        for (k, e) in entries.into_iter().enumerate() {
            let at = |field: &str| format!("{vid}[{k}].{field}");
            let [start, end] = e.segment;
            if !(start.is_finite() && end.is_finite() && start < end) {
                return Err(Error::validation(
                    at("segment"),
                    format!("start ≥ end ({start} ≥ {end})"),
                ));
            }
            if !e.score.is_finite() {
                return Err(Error::validation(at("score"), "score must be finite"));
            }
            let class = match &e.label {
                None => None,
                Some(label) => match classes.binary_search(label) {
                    Ok(c) => Some(c),
                    Err(_) => {
                        return Err(Error::validation(
                            at("label"),
                            format!("unknown label {label:?}"),
                        ))
                    }
                },
            };
            dets.push(Detection {
                video_id: vid.clone(),
                class,
                start,
                end,
                score: e.score,
            });
        }
        out.insert(vid, dets);
    }
    Ok(out)
}

pub fn read_predictions(
    path: impl AsRef<Path>,
    classes: &[String],
) -> Result<BTreeMap<String, Vec<Detection>>> {
    parse_predictions(&read_text(path.as_ref())?, classes)
}

/// Writes `{video_id: [{"label", "segment", "score"}]}`. Detections without a
/// class are written without a label.
pub fn write_predictions(
    path: impl AsRef<Path>,
    predictions: &BTreeMap<String, Vec<Detection>>,
    classes: &[String],
) -> Result<()> {
    let mut out: BTreeMap<&str, Vec<PredictionEntry>> = BTreeMap::new();
    for (vid, dets) in predictions {
        let entries = dets
            .iter()
            .map(|d| {
                let label = match d.class {
                    None => None,
                    Some(c) => Some(
                        classes
                            .get(c)
                            .cloned()
                            .ok_or_else(|| Error::Index(format!("class {c} has no label")))?,
                    ),
                };
                Ok(PredictionEntry {
                    label,
                    segment: d.segment(),
                    score: d.score,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        out.insert(vid, entries);
    }
    write_json(path, &out)
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::State(e.to_string()))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}
