//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use s2dtan::dataset::{GroundTruthSet, Instance, VideoAnnotation};
use s2dtan::detection::Detection;
use s2dtan::nn::{ParameterStore, Tensor};
use s2dtan::proposal::ProposalArch;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Stride used for spans of `len` clips in an `n`-clip map.
pub fn stride_for(n: usize, len: usize) -> usize {
    if 4 * len <= n {
        1
    } else if 2 * len <= n {
        2
    } else {
        4
    }
}

/// Every `(i, j)` that is sampled, by scanning the whole upper triangle.
pub fn brute_candidates(n: usize) -> Vec<(usize, usize)> {
    let mut out = Vec::new();
    for i in 0..n {
        for j in i..n {
            let s = stride_for(n, j - i + 1);
            if i % s == 0 && (j + 1) % s == 0 {
                out.push((i, j));
            }
        }
    }
    out
}

pub fn is_candidate(n: usize, i: usize, j: usize) -> bool {
    if j < i || j >= n {
        return false;
    }
    let s = stride_for(n, j - i + 1);
    i.is_multiple_of(s) && (j + 1).is_multiple_of(s)
}

/// Direct per-cell max over clips `i..=j`, zero at non-candidates.
pub fn direct_pool(n: usize, h: usize, projected: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; n * n * h];
    for i in 0..n {
        for j in i..n {
            if !is_candidate(n, i, j) {
                continue;
            }
            for c in 0..h {
                out[(i * n + j) * h + c] = (i..=j)
                    .map(|t| projected[t * h + c])
                    .fold(f64::NEG_INFINITY, f64::max);
            }
        }
    }
    out
}

fn get<'a>(store: &'a ParameterStore, name: &str) -> &'a [f64] {
    store.get(name).unwrap().data()
}

/// Dense reference of the proposal network: a dilated convolution evaluated
/// directly on full-map coordinates, one length bin at a time.
pub fn dense_proposal_scores(
    store: &ParameterStore,
    arch: &ProposalArch,
    n: usize,
    clips: &[f64],
) -> Vec<f64> {
    dense_proposal_forward(store, arch, n, clips).0
}

/// Distance of the parameters from the nearest non-differentiable point of the
/// network: the smallest ReLU pre-activation magnitude and the smallest gap
/// between two projected clip values of one channel (a potential max switch).
pub fn kink_margin(store: &ParameterStore, arch: &ProposalArch, n: usize, clips: &[f64]) -> f64 {
    dense_proposal_forward(store, arch, n, clips).1
}

pub fn projection_margin(n: usize, h: usize, projected: &[f64]) -> f64 {
    let mut margin = f64::INFINITY;
    for c in 0..h {
        for a in 0..n {
            for b in a + 1..n {
                margin = margin.min((projected[a * h + c] - projected[b * h + c]).abs());
            }
        }
    }
    margin
}

pub fn project(
    store: &ParameterStore,
    prefix: &str,
    n: usize,
    d: usize,
    clips: &[f64],
) -> (usize, Vec<f64>) {
    let w = get(store, &format!("{prefix}proj.weight"));
    let b = get(store, &format!("{prefix}proj.bias"));
    let h = b.len();
    let mut projected = vec![0.0; n * h];
    for t in 0..n {
        for c in 0..h {
            projected[t * h + c] =
                b[c] + (0..d).map(|f| clips[t * d + f] * w[f * h + c]).sum::<f64>();
        }
    }
    (h, projected)
}

fn dense_proposal_forward(
    store: &ParameterStore,
    arch: &ProposalArch,
    n: usize,
    clips: &[f64],
) -> (Vec<f64>, f64) {
    let (d, h, k) = (arch.input_dim, arch.hidden, arch.kernel_size);
    let r = (k / 2) as isize;
    let (_, projected) = project(store, "proposal.", n, d, clips);
    let mut margin = projection_margin(n, h, &projected);
    let pooled = direct_pool(n, h, &projected);

    let mut summed = vec![0.0; n * n * h];
    for stride in [1usize, 2, 4] {
        let in_bin = |i: isize, j: isize| {
            i >= 0
                && j >= 0
                && (i as usize) < n
                && (j as usize) < n
                && is_candidate(n, i as usize, j as usize)
                && stride_for(n, j as usize - i as usize + 1) == stride
        };
        let mut x: Vec<f64> = (0..n * n * h)
            .map(|idx| {
                let cell = idx / h;
                if in_bin((cell / n) as isize, (cell % n) as isize) {
                    pooled[idx]
                } else {
                    0.0
                }
            })
            .collect();
        for l in 0..arch.conv_layers {
            let kw = get(store, &format!("proposal.conv{l}.weight"));
            let kb = get(store, &format!("proposal.conv{l}.bias"));
            let mut y = vec![0.0; n * n * h];
            for i in 0..n as isize {
                for j in 0..n as isize {
                    if !in_bin(i, j) {
                        continue;
                    }
                    for co in 0..h {
                        let mut acc = kb[co];
                        for a in -r..=r {
                            for bb in -r..=r {
                                let (ii, jj) = (i + stride as isize * a, j + stride as isize * bb);
                                if !in_bin(ii, jj) {
                                    continue;
                                }
                                let src = (ii as usize * n + jj as usize) * h;
                                let kbase = (((a + r) as usize * k + (bb + r) as usize) * h) * h;
                                for ci in 0..h {
                                    acc += x[src + ci] * kw[kbase + ci * h + co];
                                }
                            }
                        }
                        if l + 1 < arch.conv_layers {
                            margin = margin.min(acc.abs());
                            acc = acc.max(0.0);
                        }
                        y[(i as usize * n + j as usize) * h + co] = acc;
                    }
                }
            }
            x = y;
        }
        for (s, v) in summed.iter_mut().zip(&x) {
            *s += v;
        }
    }

    let hw = get(store, "proposal.head.weight");
    let hb = get(store, "proposal.head.bias")[0];
    let scores = (0..n * n)
        .map(|cell| {
            if !is_candidate(n, cell / n, cell % n) {
                return 0.0;
            }
            let z = hb + (0..h).map(|c| summed[cell * h + c] * hw[c]).sum::<f64>();
            1.0 / (1.0 + (-z).exp())
        })
        .collect();
    (scores, margin)
}

pub fn interval_iou(a: [f64; 2], b: [f64; 2]) -> f64 {
    let inter = (a[1].min(b[1]) - a[0].max(b[0])).max(0.0);
    let union = (a[1] - a[0]) + (b[1] - b[0]) - inter;
    inter / union
}

/// Greedy NMS by repeated arg-max over the survivors.
pub fn brute_nms(cands: &[Detection], threshold: f64, class_agnostic: bool) -> Vec<Detection> {
    let mut alive: Vec<Detection> = cands.to_vec();
    let mut kept = Vec::new();
    while !alive.is_empty() {
        let mut best = 0;
        for (k, d) in alive.iter().enumerate() {
            let b = &alive[best];
            let better = d.score > b.score
                || (d.score == b.score
                    && (d.start < b.start
                        || (d.start == b.start
                            && (d.end - d.start < b.end - b.start
                                || (d.end - d.start == b.end - b.start && d.class < b.class)))));
            if better {
                best = k;
            }
        }
        let top = alive.remove(best);
        alive.retain(|d| {
            let same_group = class_agnostic || d.class == top.class;
            !(same_group && interval_iou([top.start, top.end], [d.start, d.end]) > threshold)
        });
        kept.push(top);
    }
    kept
}

/// Recall of one threshold and AN, recomputed from scratch.
fn brute_recall(
    props: &BTreeMap<String, Vec<Detection>>,
    gts: &GroundTruthSet,
    an: usize,
    thr: f64,
) -> f64 {
    let mut hit = 0usize;
    let mut total = 0usize;
    for (vid, ann) in &gts.videos {
        total += ann.instances.len();
        let mut mine: Vec<&Detection> = props
            .get(vid)
            .map(|v| v.iter().collect())
            .unwrap_or_default();
        mine.sort_by(|a, b| b.score.partial_cmp(&a.score).unwrap());
        let mut used = vec![false; ann.instances.len()];
        for p in mine.into_iter().take(an) {
            let mut pick = None;
            let mut best = -1.0;
            for (g, inst) in ann.instances.iter().enumerate() {
                let o = interval_iou([p.start, p.end], inst.segment);
                if !used[g] && o >= thr && o > best {
                    best = o;
                    pick = Some(g);
                }
            }
            if let Some(g) = pick {
                used[g] = true;
                hit += 1;
            }
        }
    }
    hit as f64 / total as f64
}

pub fn brute_ar(
    props: &BTreeMap<String, Vec<Detection>>,
    gts: &GroundTruthSet,
    an: usize,
    thresholds: &[f64],
) -> f64 {
    thresholds
        .iter()
        .map(|&t| brute_recall(props, gts, an, t))
        .sum::<f64>()
        / thresholds.len() as f64
}

pub fn brute_auc(
    props: &BTreeMap<String, Vec<Detection>>,
    gts: &GroundTruthSet,
    thresholds: &[f64],
) -> f64 {
    100.0
        * (1..=100)
            .map(|an| brute_ar(props, gts, an, thresholds))
            .sum::<f64>()
        / 100.0
}

/// AP with the precision at each recall step replaced by the best precision
/// at any later rank.
pub fn brute_ap(
    dets: &BTreeMap<String, Vec<Detection>>,
    gts: &GroundTruthSet,
    class: usize,
    thr: f64,
) -> f64 {
    let mut all: Vec<(&str, &Detection)> = dets
        .iter()
        .flat_map(|(v, ds)| ds.iter().map(move |d| (v.as_str(), d)))
        .filter(|(_, d)| d.class == Some(class))
        .collect();
    all.sort_by(|a, b| b.1.score.partial_cmp(&a.1.score).unwrap());
    let npos: usize = gts
        .videos
        .values()
        .flat_map(|v| &v.instances)
        .filter(|i| i.class == class)
        .count();
    let mut used: BTreeMap<(&str, usize), bool> = BTreeMap::new();
    let mut tp = 0usize;
    let mut precision = Vec::new();
    let mut recall = Vec::new();
    for (k, (vid, d)) in all.iter().enumerate() {
        let mut pick = None;
        let mut best = -1.0;
        if let Some(ann) = gts.videos.get(*vid) {
            for (g, inst) in ann.instances.iter().enumerate() {
                if inst.class != class || used.contains_key(&(*vid, g)) {
                    continue;
                }
                let o = interval_iou([d.start, d.end], inst.segment);
                if o >= thr && o > best {
                    best = o;
                    pick = Some(g);
                }
            }
        }
        if let Some(g) = pick {
            used.insert((*vid, g), true);
            tp += 1;
        }
        precision.push(tp as f64 / (k + 1) as f64);
        recall.push(tp as f64 / npos as f64);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for k in 0..recall.len() {
        if recall[k] > prev_recall {
            let p = precision[k..].iter().cloned().fold(0.0, f64::max);
            ap += (recall[k] - prev_recall) * p;
            prev_recall = recall[k];
        }
    }
    ap
}

pub fn brute_map(
    dets: &BTreeMap<String, Vec<Detection>>,
    gts: &GroundTruthSet,
    thresholds: &[f64],
) -> f64 {
    let classes: Vec<usize> = {
        let mut c: Vec<usize> = gts
            .videos
            .values()
            .flat_map(|v| v.instances.iter().map(|i| i.class))
            .collect();
        c.sort();
        c.dedup();
        c
    };
    let mut sum = 0.0;
    for &c in &classes {
        for &t in thresholds {
            sum += brute_ap(dets, gts, c, t);
        }
    }
    sum / (classes.len() * thresholds.len()) as f64
}

/// A small random evaluation instance: up to `max_gt` ground truths per video
/// and up to `max_props` predictions with distinct scores.
pub fn random_instance(
    rng: &mut ChaCha8Rng,
    videos: usize,
    max_gt: usize,
    max_props: usize,
    classes: usize,
) -> (BTreeMap<String, Vec<Detection>>, GroundTruthSet) {
    let mut gts = GroundTruthSet {
        classes: (0..classes).map(|c| format!("c{c}")).collect(),
        videos: BTreeMap::new(),
    };
    let mut preds = BTreeMap::new();
    let duration = 20.0;
    let seg = |rng: &mut ChaCha8Rng| {
        let a = rng.random_range(0..19) as f64;
        let len = rng.random_range(1..=6) as f64;
        [a, (a + len).min(duration)]
    };
    let mut score_pool: Vec<f64> = (0..videos * max_props)
        .map(|k| (k + 1) as f64 / 1000.0)
        .collect();
    for v in 0..videos {
        let vid = format!("v{v}");
        let instances = (0..rng.random_range(1..=max_gt))
            .map(|_| Instance {
                class: rng.random_range(0..classes),
                segment: seg(rng),
            })
            .collect();
        gts.videos.insert(
            vid.clone(),
            VideoAnnotation {
                duration,
                instances,
            },
        );
        let dets = (0..rng.random_range(0..=max_props))
            .map(|_| {
                let s = seg(rng);
                let pick = rng.random_range(0..score_pool.len());
                Detection {
                    video_id: vid.clone(),
                    class: Some(rng.random_range(0..classes)),
                    start: s[0],
                    end: s[1],
                    score: score_pool.swap_remove(pick),
                }
            })
            .collect();
        preds.insert(vid, dets);
    }
    (preds, gts)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-scale..scale))
}

/// Replaces zero-initialised biases with random values so that gradient
/// checks do not sit exactly on a ReLU kink.
pub fn randomize_biases(store: &mut ParameterStore, rng: &mut ChaCha8Rng) {
    let names: Vec<String> = store
        .names()
        .filter(|n| n.ends_with(".bias"))
        .map(str::to_string)
        .collect();
    for name in names {
        for v in store.get_mut(&name).unwrap().data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
}
