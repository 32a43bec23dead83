//! Command-line front end. `run` returns the process exit code: 0 on
//! success, 1 on usage or validation errors, 2 on I/O errors.

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::classifier::train_classifier;
use crate::detection::{infer_video, Detection};
use crate::error::{Error, Result};
use crate::io::{
    generate_dataset, load_classifier, load_dataset, load_proposal, read_annotations,
    read_predictions, save_classifier, save_proposal, write_dataset, write_json, write_predictions,
    MetricsReport, RunConfig, SynthSpec,
};
use crate::map::{candidate_counts, compact_shapes, pooling_layer_count, Bin, CompactLayout};
use crate::metrics::{ar_auc, average_recall_at, mean_average_precision, EvalProtocol};
use crate::proposal::train_proposal;

#[derive(Debug, Parser)]
#[command(
    name = "s2dtan",
    version,
    about = "Temporal action localization on a sparse 2D temporal map"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// Run configuration (flat JSON).
    #[arg(long)]
    config: PathBuf,
    /// Overrides the configured seed.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a synthetic dataset with features, annotations and a config.
    Synth {
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
        /// Generator settings (JSON); defaults are used when omitted.
        #[arg(long)]
        spec: Option<PathBuf>,
        /// Base run configuration copied into the generated config.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train the proposal network.
    TrainProposal(Common),
    /// Train the proposal classifier.
    TrainClassifier(Common),
    /// Write ranked proposals and detections for every annotated video.
    Infer(Common),
    /// Evaluate proposals: AR@100 and AUC.
    EvalProposals(Common),
    /// Evaluate detections: mAP over tIoU thresholds.
    EvalDetections(Common),
    /// Print candidate counts, compact shapes and validity-mask statistics.
    InspectMap(Common),
}

pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 1 } else { 0 };
        }
    };
    match execute(cli.command) {
        Ok(summary) => {
            print!("{summary}");
            0
        }
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = RunConfig::load(&common.config)?;
    if let Some(seed) = common.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

fn execute(command: Command) -> Result<String> {
    match command {
        Command::Synth {
            out,
            spec,
            config,
            seed,
        } => synth(&out, spec.as_deref(), config.as_deref(), seed),
        Command::TrainProposal(c) => train_proposal_cmd(&load_config(&c)?),
        Command::TrainClassifier(c) => train_classifier_cmd(&load_config(&c)?),
        Command::Infer(c) => infer(&load_config(&c)?),
        Command::EvalProposals(c) => eval_proposals(&load_config(&c)?),
        Command::EvalDetections(c) => eval_detections(&load_config(&c)?),
        Command::InspectMap(c) => inspect_map(&load_config(&c)?),
    }
}

fn synth(
    out: &Path,
    spec: Option<&Path>,
    config: Option<&Path>,
    seed: Option<u64>,
) -> Result<String> {
    let mut spec: SynthSpec = match spec {
        Some(path) => {
            let text = fs::read_to_string(path)?;
            let de = &mut serde_json::Deserializer::from_str(&text);
            serde_path_to_error::deserialize(de).map_err(|e| Error::Validation {
                path: e.path().to_string(),
                msg: e.into_inner().to_string(),
            })?
        }
        None => SynthSpec::default(),
    };
    let base = match config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = seed {
        spec.seed = seed;
    }
    let data = generate_dataset(&spec)?;
    write_dataset(out, &data, &base)?;
    Ok(format!(
        "wrote {} videos ({} actions) to {}\n",
        data.samples.len(),
        data.gts.instance_count(),
        out.display()
    ))
}

fn write_history(path: &Path, history: &[f64]) -> Result<()> {
    let mut csv = String::from("epoch,loss\n");
    for (e, loss) in history.iter().enumerate() {
        writeln!(csv, "{},{loss}", e + 1).expect("writing to a String");
    }
    fs::write(path, csv)?;
    Ok(())
}

fn dataset_dims(
    cfg: &RunConfig,
) -> Result<(
    Vec<crate::dataset::VideoSample>,
    crate::dataset::GroundTruthSet,
    usize,
)> {
    let (samples, gts) = load_dataset(cfg)?;
    let dim = match (cfg.input_dim, samples.first()) {
        (Some(d), _) => d,
        (None, Some(s)) => s.features.dim(),
        (None, None) => return Err(Error::validation("annotations", "dataset has no videos")),
    };
    Ok((samples, gts, dim))
}

fn train_proposal_cmd(cfg: &RunConfig) -> Result<String> {
    let (samples, _, dim) = dataset_dims(cfg)?;
    let (params, history) = train_proposal(
        &samples,
        &cfg.sampling()?,
        cfg.proposal_arch(dim),
        &cfg.train_options(),
    )?;
    save_proposal(cfg.resolve(&cfg.proposal_checkpoint), &params)?;
    write_history(&cfg.resolve(&cfg.proposal_history), &history)?;
    Ok(format!(
        "proposal network: {} epochs, final loss {}\n",
        history.len(),
        last(&history)
    ))
}

fn train_classifier_cmd(cfg: &RunConfig) -> Result<String> {
    let (samples, gts, dim) = dataset_dims(cfg)?;
    let classes = cfg.num_classes.unwrap_or(gts.classes.len());
    if classes == 0 {
        return Err(Error::validation(
            "annotations",
            "no labelled instances to train on",
        ));
    }
    let (params, history) = train_classifier(
        &samples,
        &cfg.sampling()?,
        cfg.classifier_arch(dim, classes),
        &cfg.train_options(),
    )?;
    save_classifier(cfg.resolve(&cfg.classifier_checkpoint), &params)?;
    write_history(&cfg.resolve(&cfg.classifier_history), &history)?;
    Ok(format!(
        "classifier: {} epochs, final loss {}\n",
        history.len(),
        last(&history)
    ))
}

fn last(history: &[f64]) -> String {
    history
        .last()
        .map_or_else(|| "n/a".to_string(), |l| format!("{l:.6}"))
}

fn infer(cfg: &RunConfig) -> Result<String> {
    let proposal = load_proposal(cfg.resolve(&cfg.proposal_checkpoint))?;
    let classifier = load_classifier(cfg.resolve(&cfg.classifier_checkpoint))?;
    let (samples, gts) = load_dataset(cfg)?;
    let mut classes = gts.classes.clone();
    let num_classes = classifier.arch().num_classes;
    if classes.len() > num_classes {
        return Err(Error::validation(
            "annotations",
            format!(
                "{} labels but the classifier predicts {num_classes} classes",
                classes.len()
            ),
        ));
    }
    for c in classes.len()..num_classes {
        classes.push(format!("class_{c}"));
    }
    let sampling = cfg.sampling()?;
    let opts = cfg.decode_options();
    let mut proposals = BTreeMap::new();
    let mut detections = BTreeMap::new();
    for s in &samples {
        let out = infer_video(
            &s.video_id,
            &proposal,
            &classifier,
            &s.features,
            &sampling,
            s.duration,
            &opts,
        )?;
        proposals.insert(s.video_id.clone(), out.proposals);
        detections.insert(s.video_id.clone(), out.detections);
    }
    write_predictions(cfg.resolve(&cfg.proposals), &proposals, &classes)?;
    write_predictions(cfg.resolve(&cfg.predictions), &detections, &classes)?;
    Ok(format!("wrote predictions for {} videos\n", samples.len()))
}

fn eval_proposals(cfg: &RunConfig) -> Result<String> {
    let gts = read_annotations(cfg.resolve(&cfg.annotations))?;
    let proposals: BTreeMap<String, Vec<Detection>> =
        read_predictions(cfg.resolve(&cfg.proposals), &gts.classes)?;
    let protocol = EvalProtocol::default();
    let ar = 100.0 * average_recall_at(&proposals, &gts, protocol.max_proposals, &protocol)?;
    let auc = ar_auc(&proposals, &gts, &protocol)?;
    let report = MetricsReport {
        ar_at_100: Some(ar),
        auc: Some(auc),
        ..MetricsReport::default()
    };
    write_json(cfg.resolve(&cfg.report), &report)?;
    Ok(format!("AR@100 {ar:.2}  AUC {auc:.2}\n"))
}

fn eval_detections(cfg: &RunConfig) -> Result<String> {
    let gts = read_annotations(cfg.resolve(&cfg.annotations))?;
    let detections = read_predictions(cfg.resolve(&cfg.predictions), &gts.classes)?;
    let metrics = mean_average_precision(&detections, &gts, &EvalProtocol::default())?;
    let report = MetricsReport {
        map: Some(metrics.map),
        per_class_ap: metrics
            .per_class()
            .into_iter()
            .map(|(c, ap)| (gts.classes[c].clone(), ap))
            .collect(),
        ..MetricsReport::default()
    };
    write_json(cfg.resolve(&cfg.report), &report)?;
    Ok(format!(
        "mAP {:.4} over {} classes\n",
        metrics.map,
        metrics.ap.len()
    ))
}

fn inspect_map(cfg: &RunConfig) -> Result<String> {
    let sampling = cfg.sampling()?;
    let n = sampling.num_clips();
    let counts = candidate_counts(&sampling);
    let shapes = compact_shapes(&sampling);
    let layout = CompactLayout::new(&sampling);
    let mut out = String::new();
    let w = &mut out;
    writeln!(w, "num_clips {n}").ok();
    writeln!(
        w,
        "bins: short len <= {}, medium len <= {}, long len <= {n}",
        sampling.short_bound(),
        sampling.medium_bound()
    )
    .ok();
    writeln!(w, "pooling layers {}", pooling_layer_count(&sampling)).ok();
    let total: usize = counts.iter().sum();
    writeln!(
        w,
        "candidates {total} of {} upper-triangle cells",
        n * (n + 1) / 2
    )
    .ok();
    for bin in Bin::ALL {
        let (rows, cols) = shapes[bin as usize];
        let valid = layout.bin(bin).valid_cells();
        writeln!(
            w,
            "{:<6} stride {} candidates {:>6} compact ({rows},{cols}) valid {valid}/{} ({:.1}%)",
            bin.name(),
            bin.stride(),
            counts[bin as usize],
            rows * cols,
            100.0 * valid as f64 / (rows * cols) as f64
        )
        .ok();
    }
    Ok(out)
}
