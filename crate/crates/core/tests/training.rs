mod common;

use std::collections::{BTreeMap, BTreeSet};

use s2dtan::classifier::{label_accuracy, train_classifier, ClassifierArch, ClassifierParams};
use s2dtan::io::{generate_dataset, SynthSpec};
use s2dtan::map::SamplingConfig;
use s2dtan::nn::Graph;
use s2dtan::proposal::{
    proposal_forward, proposal_loss, record_forward, scaled_iou_labels, scaled_label,
    train_proposal, ProposalArch, ProposalNetParams, ProposalPlan,
};
use s2dtan::train::TrainOptions;
use s2dtan::Error;

fn arch(d: usize, h: usize) -> ProposalArch {
    ProposalArch {
        input_dim: d,
        hidden: h,
        kernel_size: 3,
        conv_layers: 4,
    }
}

#[test]
fn scaled_label_pieces() {
    assert_eq!(scaled_label(0.3, 0.5, 1.0).unwrap(), 0.0);
    assert_eq!(scaled_label(0.5, 0.5, 1.0).unwrap(), 0.0);
    assert!((scaled_label(0.75, 0.5, 1.0).unwrap() - 0.5).abs() < 1e-15);
    assert_eq!(scaled_label(1.0, 0.5, 1.0).unwrap(), 1.0);
    assert!(scaled_label(0.7, 0.6, 0.6).is_err());
}

#[test]
fn loss_ignores_invalid_cells() {
    let spec = SynthSpec {
        videos: 1,
        ..SynthSpec::default()
    };
    let data = generate_dataset(&spec).unwrap();
    let s = &data.samples[0];
    let cfg = SamplingConfig::new(16).unwrap();
    let params = ProposalNetParams::init(arch(8, 4), 0).unwrap();
    let scores = proposal_forward(&params, &s.features, &cfg).unwrap();
    let labels = scaled_iou_labels(&cfg, &s.segments(), s.duration).unwrap();
    let base = proposal_loss(&scores, &labels).unwrap();
    let mut tweaked = scores.clone();
    for (cell, v) in tweaked.scores_mut().iter_mut().enumerate() {
        if !labels.mask().as_slice()[cell] {
            *v = 0.123 + cell as f64 * 1e-3;
        }
    }
    assert_eq!(proposal_loss(&tweaked, &labels).unwrap(), base);
}

#[test]
fn conv_weights_are_shared_across_bins() {
    let cfg = SamplingConfig::new(16).unwrap();
    let a = arch(3, 2);
    let params = ProposalNetParams::init(a, 0).unwrap();
    let plan = ProposalPlan::new(&cfg).unwrap();
    let mut graph = Graph::new();
    let clips = common::random_tensor(&mut common::rng(0), &[16, 3], 1.0);
    record_forward(&mut graph, &a, params.store(), &plan, &clips).unwrap();
    let trace = graph.trace();
    let param_of: BTreeMap<usize, String> = trace
        .iter()
        .filter_map(|e| e.param.clone().map(|p| (e.id, p)))
        .collect();
    let convs: Vec<_> = trace.iter().filter(|e| e.kind == "conv").collect();
    assert_eq!(convs.len(), 3 * a.conv_layers);
    for l in 0..a.conv_layers {
        let kernels: BTreeSet<usize> = (0..3)
            .map(|bin| convs[bin * a.conv_layers + l].inputs[1])
            .collect();
        assert_eq!(kernels.len(), 1, "layer {l} uses different kernel nodes");
        let id = *kernels.iter().next().unwrap();
        assert_eq!(param_of[&id], ProposalNetParams::conv_weight_name(l));
    }
    // one node per parameter tensor
    assert_eq!(param_of.len(), params.store().len());
}

#[test]
fn zero_epochs_returns_initialisation() {
    let data = generate_dataset(&SynthSpec {
        videos: 3,
        ..SynthSpec::default()
    })
    .unwrap();
    let cfg = SamplingConfig::new(16).unwrap();
    let opts = TrainOptions {
        epochs: 0,
        seed: 5,
        ..TrainOptions::default()
    };
    let (p, hist) = train_proposal(&data.samples, &cfg, arch(8, 4), &opts).unwrap();
    assert!(hist.is_empty());
    assert_eq!(p, ProposalNetParams::init(arch(8, 4), 5).unwrap());
    let carch = ClassifierArch {
        input_dim: 8,
        hidden: 4,
        num_classes: 3,
    };
    let (c, _) = train_classifier(&data.samples, &cfg, carch, &opts).unwrap();
    assert_eq!(c, ClassifierParams::init(carch, 5).unwrap());
}

#[test]
fn training_is_deterministic() {
    let data = generate_dataset(&SynthSpec {
        videos: 4,
        ..SynthSpec::default()
    })
    .unwrap();
    let cfg = SamplingConfig::new(16).unwrap();
    let opts = TrainOptions {
        epochs: 3,
        batch_size: 2,
        seed: 9,
        ..TrainOptions::default()
    };
    let a = train_proposal(&data.samples, &cfg, arch(8, 4), &opts).unwrap();
    let b = train_proposal(&data.samples, &cfg, arch(8, 4), &opts).unwrap();
    assert_eq!(a, b);
}

#[test]
fn empty_dataset_is_config_error() {
    let cfg = SamplingConfig::new(16).unwrap();
    let err = train_proposal(&[], &cfg, arch(8, 4), &TrainOptions::default()).unwrap_err();
    assert!(matches!(err, Error::Config(_)));
}

/// Mean binary entropy of the soft targets: the smallest reachable BCE.
fn label_entropy(data: &s2dtan::io::SynthDataset, cfg: &SamplingConfig) -> f64 {
    let mut total = 0.0;
    for s in &data.samples {
        let labels = scaled_iou_labels(cfg, &s.segments(), s.duration).unwrap();
        let mask = labels.mask().as_slice();
        let mut h = 0.0;
        for (&y, &m) in labels.targets().iter().zip(mask) {
            if m && y > 0.0 && y < 1.0 {
                h -= y * y.ln() + (1.0 - y) * (1.0 - y).ln();
            }
        }
        total += h / labels.mask().count() as f64;
    }
    total / data.samples.len() as f64
}

#[test]
fn proposal_network_overfits() {
    // one action per video keeps the soft-label entropy floor below a tenth
    // of the initial loss
    let data = generate_dataset(&SynthSpec {
        videos: 8,
        max_actions: 1,
        seed: 1,
        ..SynthSpec::default()
    })
    .unwrap();
    let cfg = SamplingConfig::new(16).unwrap();
    let opts = TrainOptions {
        epochs: 200,
        ..TrainOptions::default()
    };
    let (_, hist) = train_proposal(&data.samples, &cfg, arch(8, 32), &opts).unwrap();
    let last = *hist.last().unwrap();
    assert!(last < 0.1 * hist[0], "{} -> {last}", hist[0]);
    assert!(last - label_entropy(&data, &cfg) < 0.01);
}

#[test]
fn classifier_separates_synthetic_classes() {
    let data = generate_dataset(&SynthSpec::default()).unwrap();
    let cfg = SamplingConfig::new(16).unwrap();
    let carch = ClassifierArch {
        input_dim: 8,
        hidden: 32,
        num_classes: 3,
    };
    let opts = TrainOptions {
        epochs: 200,
        ..TrainOptions::default()
    };
    let (c, _) = train_classifier(&data.samples, &cfg, carch, &opts).unwrap();
    let acc = label_accuracy(&c, &data.samples, &cfg).unwrap();
    assert!(acc >= 0.95, "accuracy {acc}");
}
