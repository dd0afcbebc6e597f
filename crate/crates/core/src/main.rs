use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use evtsem::error::Error;
use evtsem::evaluation::{localization_score, VideoEvents};
use evtsem::events_io::read_events_jsonl;
use evtsem::matching::{total_loss, MatchReport};
use evtsem::pipeline::{self, PipelineConfig, PipelineError, Preset};
use evtsem::retrieval::TopKMode;
use evtsem::synthetic::{gen_synthetic, SyntheticSpec};

const EXIT_USAGE: u8 = 1;
const EXIT_DATA: u8 = 2;
const EXIT_INTERNAL: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "evtsem",
    version,
    about = "Event clustering, sentence retrieval, fusion, matching and evaluation over precomputed features",
    after_help = "Defaults: k=40 retrieved sentences; clusters 10 (anet) or 20 (yc2); \
frame budget F=100 (anet) or F=200 (yc2); IoU thresholds 0.3,0.5,0.7,0.9"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Write a seeded synthetic dataset (features, bank, ground truth)
    GenSynthetic(SynthArgs),
    /// Cluster frames into pseudo-events; writes clusters.json
    Cluster(RunArgs),
    /// Retrieve top-k sentences per pseudo-event; writes retrieval.json
    Retrieve(RunArgs),
    /// Fuse frames with retrieved sentences; writes enhanced/<video>.tsem
    Enhance(RunArgs),
    /// Run cluster, retrieve and enhance in one go
    Pipeline(RunArgs),
    /// Hungarian matching and set-prediction loss per video, as JSON
    MatchLoss(MatchArgs),
    /// Precision, recall and F1 over temporal IoU thresholds
    Eval(EvalArgs),
}

#[derive(Copy, Clone, Debug, ValueEnum)]
enum PresetArg {
    Anet,
    Yc2,
}

impl From<PresetArg> for Preset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Anet => Preset::Anet,
            PresetArg::Yc2 => Preset::Yc2,
        }
    }
}

#[derive(Args, Debug, Default)]
struct ConfigArgs {
    /// JSON config file; flags given on the command line win over it
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Defaults for clusters and frame budget: anet (10, 100) or yc2 (20, 200)
    #[arg(long, value_enum)]
    preset: Option<PresetArg>,
    /// Seed for weight initialization
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    /// Output directory
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
    /// Sentences retrieved per pseudo-event [default: 40]
    #[arg(long, value_name = "COUNT")]
    k: Option<usize>,
    /// Clusters per video [default: 10 (anet), 20 (yc2)]
    #[arg(long, value_name = "COUNT")]
    clusters: Option<usize>,
    /// Longest allowed segment in frames [default: ceil(frames / clusters)]
    #[arg(long, value_name = "COUNT")]
    tmax: Option<usize>,
    /// Frames per video after subsampling or padding [default: 100 (anet), 200 (yc2)]
    #[arg(long, value_name = "COUNT")]
    frame_budget: Option<usize>,
    /// Softmax-weighted pooling of retrieved sentences instead of the mean
    #[arg(long, value_name = "BOOL", action = clap::ArgAction::Set)]
    soft_topk: Option<bool>,
    /// Temporal IoU thresholds [default: 0.3,0.5,0.7,0.9]
    #[arg(long, value_name = "CSV", value_delimiter = ',')]
    iou_thresholds: Option<Vec<f64>>,
}

#[derive(Args, Debug)]
struct RunArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Frame features: one .tsem file or a directory of them
    #[arg(long, value_name = "PATH")]
    frames: Option<PathBuf>,
    /// Sentence embeddings (.tsem)
    #[arg(long, value_name = "PATH")]
    bank: Option<PathBuf>,
    /// Sentence manifest (JSON)
    #[arg(long, value_name = "PATH")]
    bank_manifest: Option<PathBuf>,
    /// Directory of trained fusion weights
    #[arg(long, value_name = "DIR")]
    weights: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    /// JSON file with generator settings; flags win over it
    #[arg(long, value_name = "PATH")]
    config: Option<PathBuf>,
    #[arg(long, value_name = "DIR")]
    out: PathBuf,
    #[arg(long, value_name = "U64")]
    seed: Option<u64>,
    #[arg(long, value_name = "COUNT")]
    videos: Option<usize>,
    /// Frames per video
    #[arg(long, value_name = "COUNT")]
    frames: Option<usize>,
    #[arg(long, value_name = "COUNT")]
    dim: Option<usize>,
    /// Events per video
    #[arg(long, value_name = "COUNT")]
    events: Option<usize>,
    #[arg(long, value_name = "COUNT")]
    bank_size: Option<usize>,
    /// Noise standard deviation relative to the prototype norm
    #[arg(long, value_name = "FLOAT")]
    noise: Option<f64>,
}

#[derive(Args, Debug)]
struct MatchArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Predicted events (JSON lines, confidences and count logits optional)
    #[arg(long, value_name = "PATH")]
    preds: PathBuf,
    /// Ground-truth events (JSON lines)
    #[arg(long, value_name = "PATH")]
    gts: PathBuf,
}

#[derive(Copy, Clone, Debug, Default, ValueEnum)]
enum Format {
    #[default]
    Json,
    Csv,
}

#[derive(Args, Debug)]
struct EvalArgs {
    #[command(flatten)]
    common: ConfigArgs,
    /// Predicted events (JSON lines)
    #[arg(long, value_name = "PATH")]
    preds: PathBuf,
    /// Ground-truth events (JSON lines)
    #[arg(long, value_name = "PATH")]
    gts: PathBuf,
    #[arg(long, value_enum, default_value_t = Format::Json)]
    format: Format,
}

#[derive(Debug)]
enum Failure {
    Usage(String),
    Data(String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        match e {
            Error::InvalidParam(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

impl From<PipelineError> for Failure {
    fn from(e: PipelineError) -> Self {
        match e.source {
            Error::InvalidParam(_) => Failure::Usage(e.to_string()),
            _ => Failure::Data(e.to_string()),
        }
    }
}

fn build_config(c: &ConfigArgs) -> Result<PipelineConfig, Failure> {
    let mut cfg = match &c.config {
        Some(path) => PipelineConfig::from_json_file(path)?,
        None => PipelineConfig::preset(c.preset.map(Preset::from).unwrap_or_default()),
    };
    if let (Some(_), Some(p)) = (&c.config, c.preset) {
        let p = Preset::from(p);
        cfg.cluster.n_clusters = p.n_clusters();
        cfg.frame_budget = p.frame_budget();
    }
    if let Some(v) = c.seed {
        cfg.seed = v;
    }
    if let Some(v) = &c.out {
        cfg.out_dir = v.clone();
    }
    if let Some(v) = c.k {
        cfg.retrieval.k = v;
    }
    if let Some(v) = c.clusters {
        cfg.cluster.n_clusters = v;
        cfg.cluster.adaptive = None;
    }
    if let Some(v) = c.tmax {
        cfg.cluster.t_max = Some(v);
    }
    if let Some(v) = c.frame_budget {
        cfg.frame_budget = v;
    }
    if let Some(v) = c.soft_topk {
        cfg.retrieval.mode = if v { TopKMode::Soft } else { TopKMode::Hard };
    }
    if let Some(v) = &c.iou_thresholds {
        cfg.eval.iou_thresholds = v.clone();
    }
    Ok(cfg)
}

fn run_config(a: &RunArgs) -> Result<PipelineConfig, Failure> {
    let mut cfg = build_config(&a.common)?;
    if let Some(v) = &a.frames {
        cfg.frames = v.clone();
    }
    if let Some(v) = &a.bank {
        cfg.bank = v.clone();
    }
    if let Some(v) = &a.bank_manifest {
        cfg.bank_manifest = v.clone();
    }
    if a.weights.is_some() {
        cfg.weights = a.weights.clone();
    }
    Ok(cfg)
}

fn print_json<T: Serialize>(value: &T) -> Result<(), Failure> {
    let text = serde_json::to_string_pretty(value).map_err(|e| Failure::Data(e.to_string()))?;
    println!("{text}");
    Ok(())
}

fn gen(a: &SynthArgs) -> Result<(), Failure> {
    let mut spec: SyntheticSpec = match &a.config {
        Some(p) => {
            let text = fs::read_to_string(p).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| Failure::Data(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    let overrides = [
        (a.videos, &mut spec.n_videos),
        (a.frames, &mut spec.frames),
        (a.dim, &mut spec.dim),
        (a.events, &mut spec.events),
        (a.bank_size, &mut spec.bank_size),
    ];
    for (flag, field) in overrides {
        if let Some(v) = flag {
            *field = v;
        }
    }
    if let Some(v) = a.seed {
        spec.seed = v;
    }
    if let Some(v) = a.noise {
        spec.noise = v;
    }
    gen_synthetic(&spec, &a.out)?;
    println!("wrote synthetic dataset to {}", a.out.display());
    Ok(())
}

#[derive(Serialize)]
struct VideoLoss {
    video_id: String,
    #[serde(flatten)]
    report: MatchReport,
}

fn paired<'a>(
    preds: &'a [VideoEvents],
    gts: &'a [VideoEvents],
) -> Result<Vec<(&'a VideoEvents, Option<&'a VideoEvents>)>, Failure> {
    for p in preds {
        if !gts.iter().any(|g| g.video_id == p.video_id) {
            return Err(Failure::Data(format!("video {} has no ground truth", p.video_id)));
        }
    }
    Ok(gts
        .iter()
        .map(|g| (g, preds.iter().find(|p| p.video_id == g.video_id)))
        .collect())
}

fn match_loss(a: &MatchArgs) -> Result<(), Failure> {
    let cfg = build_config(&a.common)?;
    let preds = read_events_jsonl(&a.preds)?;
    let gts = read_events_jsonl(&a.gts)?;
    let mut out = Vec::new();
    for (g, p) in paired(&preds, &gts)? {
        let events = p.map(|p| p.events.as_slice()).unwrap_or(&[]);
        let logits = p.and_then(|p| p.count_logits.as_deref());
        let report = total_loss(events, &g.events, None, logits, &cfg.loss)?;
        out.push(VideoLoss {
            video_id: g.video_id.clone(),
            report,
        });
    }
    print_json(&out)
}

fn eval(a: &EvalArgs) -> Result<(), Failure> {
    let cfg = build_config(&a.common)?;
    let preds = read_events_jsonl(&a.preds)?;
    let gts = read_events_jsonl(&a.gts)?;
    let score = localization_score(&preds, &gts, &cfg.eval)?;
    match a.format {
        Format::Json => print_json(&score),
        Format::Csv => {
            print!("{}", score.to_csv());
            Ok(())
        }
    }
}

fn report_outputs(out: &Path, files: &[&str]) {
    for f in files {
        println!("{}", out.join(f).display());
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::GenSynthetic(a) => gen(&a),
        Command::Cluster(a) => {
            let cfg = run_config(&a)?;
            pipeline::run_cluster_stage(&cfg)?;
            report_outputs(&cfg.out_dir, &[pipeline::CLUSTERS_FILE]);
            Ok(())
        }
        Command::Retrieve(a) => {
            let cfg = run_config(&a)?;
            pipeline::run_retrieve_stage(&cfg)?;
            report_outputs(&cfg.out_dir, &[pipeline::RETRIEVAL_FILE]);
            Ok(())
        }
        Command::Enhance(a) => {
            let cfg = run_config(&a)?;
            for rec in pipeline::run_enhance_stage(&cfg)? {
                report_outputs(&cfg.out_dir, &[rec.path.as_str()]);
            }
            Ok(())
        }
        Command::Pipeline(a) => {
            let cfg = run_config(&a)?;
            pipeline::run_pipeline(&cfg)?;
            report_outputs(
                &cfg.out_dir,
                &[
                    pipeline::CLUSTERS_FILE,
                    pipeline::RETRIEVAL_FILE,
                    pipeline::ENHANCED_DIR,
                    pipeline::MANIFEST_FILE,
                ],
            );
            Ok(())
        }
        Command::MatchLoss(a) => match_loss(&a),
        Command::Eval(a) => eval(&a),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(EXIT_USAGE)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    match std::panic::catch_unwind(|| dispatch(cli.command)) {
        Ok(Ok(())) => ExitCode::SUCCESS,
        Ok(Err(Failure::Usage(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_USAGE)
        }
        Ok(Err(Failure::Data(msg))) => {
            eprintln!("error: {msg}");
            ExitCode::from(EXIT_DATA)
        }
        Err(_) => ExitCode::from(EXIT_INTERNAL),
    }
}
