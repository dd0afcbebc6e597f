//! End-to-end orchestration: frame budgeting, clustering, retrieval and
//! enhancement over a set of videos, with on-disk artifacts and a run
//! manifest of checksums.
//!
//! Output directory layout:
//!
//! ```text
//! clusters.json          per-video segments, pooling weights, frame plan
//! retrieval.json         per-event top-k sentences with scores
//! enhanced/<video>.tsem  enhanced frame features (budget × d)
//! manifest.json          config hash, seed, per-stage checksums, status
//! ```
//!
//! Each stage can run on its own and reads the previous stage's artifact;
//! the fused run produces the same bytes.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::cluster::{self, ClusterParams, ClusterSet, Segment};
use crate::error::{Error, Result};
use crate::evaluation::EvalConfig;
use crate::fusion::{fuse_forward, FusionWeights, WeightInit};
use crate::matching::{EventTuple, LossConfig};
use crate::par::{self, Execution};
use crate::retrieval::{self, RetrievalParams, SentenceBank, TopK, TopKMode};
use crate::tensorio::{self, FeatureMatrix};

pub const CLUSTERS_FILE: &str = "clusters.json";
pub const RETRIEVAL_FILE: &str = "retrieval.json";
pub const ENHANCED_DIR: &str = "enhanced";
pub const MANIFEST_FILE: &str = "manifest.json";

/// Dataset-style defaults for cluster count and frame budget.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    /// 10 clusters, 100-frame budget.
    #[default]
    Anet,
    /// 20 clusters, 200-frame budget.
    Yc2,
}

impl Preset {
    pub fn n_clusters(self) -> usize {
        match self {
            Preset::Anet => 10,
            Preset::Yc2 => 20,
        }
    }

    pub fn frame_budget(self) -> usize {
        match self {
            Preset::Anet => 100,
            Preset::Yc2 => 200,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub init: WeightInit,
    pub kernel_width: usize,
    pub biases: bool,
}

impl Default for FusionConfig {
    fn default() -> Self {
        Self {
            init: WeightInit::Seeded,
            kernel_width: 1,
            biases: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    /// A single `TSEM` file or a directory of `<video_id>.tsem` files.
    pub frames: PathBuf,
    pub bank: PathBuf,
    pub bank_manifest: PathBuf,
    /// Directory holding `weights.json`; seeded weights are used when absent.
    pub weights: Option<PathBuf>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub frame_budget: usize,
    pub cluster: ClusterParams,
    pub retrieval: RetrievalParams,
    pub fusion: FusionConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self::preset(Preset::default())
    }
}

impl PipelineConfig {
    pub fn preset(p: Preset) -> Self {
        Self {
            frames: PathBuf::new(),
            bank: PathBuf::new(),
            bank_manifest: PathBuf::new(),
            weights: None,
            out_dir: PathBuf::from("out"),
            seed: 0,
            frame_budget: p.frame_budget(),
            cluster: ClusterParams::with_clusters(p.n_clusters()),
            retrieval: RetrievalParams::default(),
            fusion: FusionConfig::default(),
            loss: LossConfig::default(),
            eval: EvalConfig::default(),
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }

    pub fn validate(&self) -> Result<()> {
        if self.frame_budget == 0 {
            return Err(Error::param("frame budget must be >= 1"));
        }
        if self.retrieval.k == 0 {
            return Err(Error::param("k must be >= 1"));
        }
        self.cluster.validate()?;
        self.loss.validate()?;
        self.eval.validate()
    }

    /// SHA-256 of the canonical JSON form, ignoring the output directory.
    pub fn hash(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        let json = serde_json::to_string(&c).expect("config serializes");
        hex::encode(Sha256::digest(json.as_bytes()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Load,
    Cluster,
    Retrieve,
    Enhance,
    Manifest,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Stage::Load => "load",
            Stage::Cluster => "cluster",
            Stage::Retrieve => "retrieve",
            Stage::Enhance => "enhance",
            Stage::Manifest => "manifest",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Error)]
#[error("stage {stage} failed: {source}")]
pub struct PipelineError {
    pub stage: Stage,
    #[source]
    pub source: Error,
}

trait AtStage<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, PipelineError>;
}

impl<T> AtStage<T> for Result<T> {
    fn at(self, stage: Stage) -> std::result::Result<T, PipelineError> {
        self.map_err(|source| PipelineError { stage, source })
    }
}

/// Fixed-length frame sequence plus the original row behind each slot.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePlan {
    pub frames: FeatureMatrix,
    /// `None` marks a zero padding row.
    pub source_rows: Vec<Option<usize>>,
    pub valid: usize,
}

impl FramePlan {
    pub fn mask(&self) -> Vec<u8> {
        self.source_rows.iter().map(|r| u8::from(r.is_some())).collect()
    }
}

/// Rows `round(i (L−1) / (F−1))` for `i in 0..F`, half rounded up, in
/// exact integer arithmetic.
pub fn subsample_indices(l: usize, f: usize) -> Vec<usize> {
    if f == 1 {
        return vec![0];
    }
    let (num, den) = (l as u128 - 1, f as u128 - 1);
    (0..f as u128)
        .map(|i| ((2 * i * num + den) / (2 * den)) as usize)
        .collect()
}

/// Evenly subsamples longer sequences, zero-pads shorter ones at the end.
pub fn subsample_or_pad(frames: &FeatureMatrix, budget: usize) -> Result<FramePlan> {
    let l = frames.rows();
    if l == 0 {
        return Err(Error::Degenerate("video has no frames".into()));
    }
    if budget == 0 {
        return Err(Error::param("frame budget must be >= 1"));
    }
    if l > budget {
        let idx = subsample_indices(l, budget);
        return Ok(FramePlan {
            frames: frames.select_rows(&idx)?,
            source_rows: idx.into_iter().map(Some).collect(),
            valid: budget,
        });
    }
    let pad = FeatureMatrix::zeros(budget - l, frames.cols());
    Ok(FramePlan {
        frames: FeatureMatrix::vconcat(&[frames, &pad])?,
        source_rows: (0..budget).map(|i| (i < l).then_some(i)).collect(),
        valid: l,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoClusters {
    pub video_id: String,
    pub original_frames: usize,
    pub frame_budget: usize,
    pub valid_frames: usize,
    pub source_rows: Vec<Option<usize>>,
    pub n_clusters: usize,
    pub t_max: usize,
    /// Per valid frame: index into `segments`.
    pub assignment: Vec<usize>,
    pub segments: Vec<Segment>,
    pub weights: Vec<f64>,
}

impl VideoClusters {
    pub fn cluster_set(&self) -> ClusterSet {
        ClusterSet {
            assignment: self.assignment.clone(),
            segments: self.segments.clone(),
            weights: self.weights.clone(),
        }
    }

    /// Segments as events in seconds of the original video (1 fps):
    /// `[first source frame, last source frame + 1]`.
    pub fn events(&self) -> Vec<EventTuple> {
        self.segments
            .iter()
            .map(|s| {
                let start = self.source_rows[s.start].unwrap_or(s.start) as f64;
                let end = self.source_rows[s.end].unwrap_or(s.end) as f64 + 1.0;
                EventTuple {
                    start,
                    end,
                    confidence: None,
                }
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterArtifact {
    pub videos: Vec<VideoClusters>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedSentence {
    pub sentence_id: String,
    pub row: usize,
    pub score: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub weight: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievedEvent {
    pub event_id: usize,
    pub sentences: Vec<RetrievedSentence>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoRetrieval {
    pub video_id: String,
    pub events: Vec<RetrievedEvent>,
}

impl VideoRetrieval {
    fn topk(&self, mode: TopKMode) -> TopK {
        let indices = self
            .events
            .iter()
            .map(|e| e.sentences.iter().map(|s| s.row).collect())
            .collect();
        let scores = self
            .events
            .iter()
            .map(|e| e.sentences.iter().map(|s| s.score).collect())
            .collect();
        let weights = (mode == TopKMode::Soft).then(|| {
            self.events
                .iter()
                .map(|e| e.sentences.iter().map(|s| s.weight.unwrap_or(0.0)).collect())
                .collect()
        });
        TopK {
            k: self.events.first().map_or(0, |e| e.sentences.len()),
            indices,
            scores,
            weights,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalArtifact {
    pub k: usize,
    pub mode: TopKMode,
    pub temperature: f64,
    pub videos: Vec<VideoRetrieval>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactRecord {
    pub path: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StageStatus {
    Complete,
    Partial,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: Stage,
    pub status: StageStatus,
    pub artifacts: Vec<ArtifactRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VideoPlanRecord {
    pub video_id: String,
    pub original_frames: usize,
    pub frame_budget: usize,
    /// `identity`, `subsample` or `pad`.
    pub action: String,
    pub source_rows: Vec<Option<usize>>,
    pub valid_mask: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub seed: u64,
    pub complete: bool,
    pub videos: Vec<VideoPlanRecord>,
    pub stages: Vec<StageRecord>,
}

/// Loads one file or every `*.tsem` in a directory, sorted by video id.
pub fn load_videos(path: &Path) -> Result<Vec<(String, FeatureMatrix)>> {
    let meta = fs::metadata(path).map_err(|e| Error::io(path, e))?;
    let mut files: Vec<PathBuf> = if meta.is_dir() {
        fs::read_dir(path)
            .map_err(|e| Error::io(path, e))?
            .filter_map(|entry| entry.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "tsem"))
            .collect()
    } else {
        vec![path.to_path_buf()]
    };
    files.sort();
    if files.is_empty() {
        return Err(Error::Degenerate(format!(
            "no .tsem files under {}",
            path.display()
        )));
    }
    files
        .into_iter()
        .map(|f| {
            let id = f
                .file_stem()
                .map(|s| s.to_string_lossy().into_owned())
                .unwrap_or_default();
            Ok((id, tensorio::read_features(&f)?))
        })
        .collect()
}

pub fn cluster_video(video_id: &str, frames: &FeatureMatrix, cfg: &PipelineConfig) -> Result<VideoClusters> {
    let plan = subsample_or_pad(frames, cfg.frame_budget)?;
    let valid = plan.frames.row_block(0, plan.valid)?;
    let mut params = cfg.cluster.clone();
    // short videos cannot hold more clusters than frames
    params.n_clusters = params.n_clusters.min(plan.valid);
    if let Some(r) = params.adaptive.as_mut() {
        r.max = r.max.min(plan.valid);
        r.min = r.min.min(r.max);
    }
    let n_clusters = match params.adaptive {
        Some(r) => cluster::adaptive_cluster_count(&valid, r.min, r.max)?,
        None => params.n_clusters,
    };
    params.n_clusters = n_clusters;
    params.adaptive = None;
    let t_max = params
        .t_max
        .unwrap_or_else(|| cluster::default_t_max(plan.valid, n_clusters));
    params.t_max = Some(t_max);
    let cs = cluster::agglomerate_with(&valid, &params, Execution::Sequential)?;
    Ok(VideoClusters {
        video_id: video_id.to_string(),
        original_frames: frames.rows(),
        frame_budget: cfg.frame_budget,
        valid_frames: plan.valid,
        source_rows: plan.source_rows,
        n_clusters,
        t_max,
        assignment: cs.assignment,
        segments: cs.segments,
        weights: cs.weights,
    })
}

pub fn retrieve_video(
    frames: &FeatureMatrix,
    clusters: &VideoClusters,
    bank: &SentenceBank,
    params: &RetrievalParams,
    budget: usize,
) -> Result<VideoRetrieval> {
    let plan = subsample_or_pad(frames, budget)?;
    let valid = plan.frames.row_block(0, plan.valid)?;
    let pooled = cluster::pool_clusters(&valid, &clusters.cluster_set())?;
    let sims = retrieval::cosine_similarity_matrix_with(&pooled.matrix, bank, Execution::Sequential)?;
    let topk = retrieval::top_k(&sims, params.k.min(bank.len()), params.mode, params.temperature)?;
    let events = topk
        .indices
        .iter()
        .enumerate()
        .map(|(i, idx)| RetrievedEvent {
            event_id: i,
            sentences: idx
                .iter()
                .enumerate()
                .map(|(r, &row)| RetrievedSentence {
                    sentence_id: bank.manifest()[row].sentence_id.clone(),
                    row,
                    score: topk.scores[i][r],
                    weight: topk.weights.as_ref().map(|w| w[i][r]),
                })
                .collect(),
        })
        .collect();
    Ok(VideoRetrieval {
        video_id: clusters.video_id.clone(),
        events,
    })
}

pub fn enhance_video(
    frames: &FeatureMatrix,
    retrieved: &VideoRetrieval,
    bank: &SentenceBank,
    weights: &FusionWeights,
    mode: TopKMode,
    budget: usize,
) -> Result<FeatureMatrix> {
    let plan = subsample_or_pad(frames, budget)?;
    let f_q = retrieval::pool_topk(&retrieved.topk(mode), bank, mode)?;
    Ok(fuse_forward(&plan.frames, &f_q, weights)?.f_out)
}

fn check_exists(path: &Path, what: &str) -> Result<()> {
    if path.as_os_str().is_empty() {
        return Err(Error::param(format!("no {what} path configured")));
    }
    if !path.exists() {
        return Err(Error::io(
            path,
            std::io::Error::new(std::io::ErrorKind::NotFound, format!("{what} not found")),
        ));
    }
    Ok(())
}

fn load_bank(cfg: &PipelineConfig) -> Result<SentenceBank> {
    check_exists(&cfg.bank, "sentence bank")?;
    check_exists(&cfg.bank_manifest, "bank manifest")?;
    SentenceBank::load(&cfg.bank, &cfg.bank_manifest)
}

fn load_weights(cfg: &PipelineConfig, d: usize) -> Result<FusionWeights> {
    let w = match &cfg.weights {
        Some(dir) => {
            check_exists(dir, "weights directory")?;
            FusionWeights::load(dir)?
        }
        None => match cfg.fusion.init {
            WeightInit::Seeded => {
                FusionWeights::seeded(d, cfg.seed, cfg.fusion.kernel_width, cfg.fusion.biases)?
            }
            WeightInit::Identity => FusionWeights::identity(d),
        },
    };
    if w.dim() != d {
        return Err(Error::shape(format!(
            "weights have dim {}, features have dim {d}",
            w.dim()
        )));
    }
    Ok(w)
}

fn write_bytes(dir: &Path, rel: &str, bytes: &[u8]) -> Result<ArtifactRecord> {
    let path = dir.join(rel);
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(&path, bytes).map_err(|e| Error::io(&path, e))?;
    Ok(ArtifactRecord {
        path: rel.to_string(),
        sha256: hex::encode(Sha256::digest(bytes)),
    })
}

fn write_json<T: Serialize>(dir: &Path, rel: &str, value: &T) -> Result<ArtifactRecord> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    write_bytes(dir, rel, text.as_bytes())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_str(&text)?)
}

/// Runs `f` on every video, possibly in parallel; results keep input order
/// and the first failure in that order is reported.
fn per_video<T, F>(n: usize, f: F) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(usize) -> Result<T> + Sync + Send,
{
    par::map_indexed(Execution::default(), n, f).into_iter().collect()
}

fn plan_records(clusters: &ClusterArtifact) -> Vec<VideoPlanRecord> {
    clusters
        .videos
        .iter()
        .map(|v| VideoPlanRecord {
            video_id: v.video_id.clone(),
            original_frames: v.original_frames,
            frame_budget: v.frame_budget,
            action: match v.original_frames.cmp(&v.frame_budget) {
                std::cmp::Ordering::Greater => "subsample",
                std::cmp::Ordering::Less => "pad",
                std::cmp::Ordering::Equal => "identity",
            }
            .to_string(),
            source_rows: v.source_rows.clone(),
            valid_mask: v.source_rows.iter().map(|r| u8::from(r.is_some())).collect(),
        })
        .collect()
}

struct Inputs {
    videos: Vec<(String, FeatureMatrix)>,
}

fn load_inputs(cfg: &PipelineConfig) -> Result<Inputs> {
    cfg.validate()?;
    check_exists(&cfg.frames, "frame features")?;
    Ok(Inputs {
        videos: load_videos(&cfg.frames)?,
    })
}

fn cluster_all(cfg: &PipelineConfig, inputs: &Inputs) -> Result<ClusterArtifact> {
    let videos = per_video(inputs.videos.len(), |i| {
        let (id, frames) = &inputs.videos[i];
        cluster_video(id, frames, cfg)
    })?;
    Ok(ClusterArtifact { videos })
}

fn retrieve_all(
    cfg: &PipelineConfig,
    inputs: &Inputs,
    clusters: &ClusterArtifact,
    bank: &SentenceBank,
) -> Result<RetrievalArtifact> {
    let videos = per_video(inputs.videos.len(), |i| {
        let (id, frames) = &inputs.videos[i];
        let vc = clusters
            .videos
            .iter()
            .find(|v| &v.video_id == id)
            .ok_or_else(|| Error::Format(format!("no clusters for video {id}")))?;
        retrieve_video(frames, vc, bank, &cfg.retrieval, cfg.frame_budget)
    })?;
    Ok(RetrievalArtifact {
        k: cfg.retrieval.k.min(bank.len()),
        mode: cfg.retrieval.mode,
        temperature: cfg.retrieval.temperature,
        videos,
    })
}

fn enhance_all(
    cfg: &PipelineConfig,
    inputs: &Inputs,
    retrieved: &RetrievalArtifact,
    bank: &SentenceBank,
) -> Result<Vec<ArtifactRecord>> {
    let weights = load_weights(cfg, bank.dim())?;
    let encoded = per_video(inputs.videos.len(), |i| {
        let (id, frames) = &inputs.videos[i];
        let vr = retrieved
            .videos
            .iter()
            .find(|v| &v.video_id == id)
            .ok_or_else(|| Error::Format(format!("no retrieval for video {id}")))?;
        let out = enhance_video(frames, vr, bank, &weights, retrieved.mode, cfg.frame_budget)?;
        tensorio::encode_features(&out)
    })?;
    inputs
        .videos
        .iter()
        .zip(encoded)
        .map(|((id, _), bytes)| write_bytes(&cfg.out_dir, &format!("{ENHANCED_DIR}/{id}.tsem"), &bytes))
        .collect()
}

fn manifest_path(cfg: &PipelineConfig) -> PathBuf {
    cfg.out_dir.join(MANIFEST_FILE)
}

/// Loads the manifest left by an earlier stage of the same config, if any.
fn existing_manifest(cfg: &PipelineConfig) -> RunManifest {
    let fresh = RunManifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        complete: false,
        videos: Vec::new(),
        stages: Vec::new(),
    };
    match read_json::<RunManifest>(&manifest_path(cfg)) {
        Ok(m) if m.config_hash == fresh.config_hash => m,
        _ => fresh,
    }
}

fn record_stage(manifest: &mut RunManifest, record: StageRecord) {
    manifest.stages.retain(|s| s.stage != record.stage);
    manifest.stages.push(record);
    manifest.stages.sort_by_key(|s| s.stage as u8);
    let done = |st: Stage| {
        manifest
            .stages
            .iter()
            .any(|s| s.stage == st && s.status == StageStatus::Complete)
    };
    manifest.complete = done(Stage::Cluster) && done(Stage::Retrieve) && done(Stage::Enhance);
}

fn save_manifest(cfg: &PipelineConfig, manifest: &RunManifest) -> std::result::Result<(), PipelineError> {
    write_json(&cfg.out_dir, MANIFEST_FILE, manifest)
        .map(|_| ())
        .at(Stage::Manifest)
}

fn failed(stage: Stage, err: &Error) -> StageRecord {
    StageRecord {
        stage,
        status: StageStatus::Partial,
        artifacts: Vec::new(),
        error: Some(err.to_string()),
    }
}

fn complete(stage: Stage, artifacts: Vec<ArtifactRecord>) -> StageRecord {
    StageRecord {
        stage,
        status: StageStatus::Complete,
        artifacts,
        error: None,
    }
}

/// Records a failure in the manifest (best effort) and returns the error.
fn abort<T>(
    cfg: &PipelineConfig,
    manifest: &mut RunManifest,
    stage: Stage,
    err: Error,
) -> std::result::Result<T, PipelineError> {
    record_stage(manifest, failed(stage, &err));
    if fs::create_dir_all(&cfg.out_dir).is_ok() {
        let _ = save_manifest(cfg, manifest);
    }
    Err(PipelineError { stage, source: err })
}

/// Clustering stage alone: writes `clusters.json`.
pub fn run_cluster_stage(cfg: &PipelineConfig) -> std::result::Result<ClusterArtifact, PipelineError> {
    let inputs = load_inputs(cfg).at(Stage::Load)?;
    let mut manifest = existing_manifest(cfg);
    let clusters = match cluster_all(cfg, &inputs) {
        Ok(c) => c,
        Err(e) => return abort(cfg, &mut manifest, Stage::Cluster, e),
    };
    let rec = write_json(&cfg.out_dir, CLUSTERS_FILE, &clusters).at(Stage::Cluster)?;
    manifest.videos = plan_records(&clusters);
    record_stage(&mut manifest, complete(Stage::Cluster, vec![rec]));
    save_manifest(cfg, &manifest)?;
    Ok(clusters)
}

/// Retrieval stage alone: reads `clusters.json`, writes `retrieval.json`.
pub fn run_retrieve_stage(cfg: &PipelineConfig) -> std::result::Result<RetrievalArtifact, PipelineError> {
    let inputs = load_inputs(cfg).at(Stage::Load)?;
    let bank = load_bank(cfg).at(Stage::Load)?;
    let mut manifest = existing_manifest(cfg);
    let clusters: ClusterArtifact = read_json(&cfg.out_dir.join(CLUSTERS_FILE)).at(Stage::Retrieve)?;
    let retrieved = match retrieve_all(cfg, &inputs, &clusters, &bank) {
        Ok(r) => r,
        Err(e) => return abort(cfg, &mut manifest, Stage::Retrieve, e),
    };
    let rec = write_json(&cfg.out_dir, RETRIEVAL_FILE, &retrieved).at(Stage::Retrieve)?;
    record_stage(&mut manifest, complete(Stage::Retrieve, vec![rec]));
    save_manifest(cfg, &manifest)?;
    Ok(retrieved)
}

/// Enhancement stage alone: reads `retrieval.json`, writes `enhanced/`.
pub fn run_enhance_stage(cfg: &PipelineConfig) -> std::result::Result<Vec<ArtifactRecord>, PipelineError> {
    let inputs = load_inputs(cfg).at(Stage::Load)?;
    let bank = load_bank(cfg).at(Stage::Load)?;
    let mut manifest = existing_manifest(cfg);
    let retrieved: RetrievalArtifact = read_json(&cfg.out_dir.join(RETRIEVAL_FILE)).at(Stage::Enhance)?;
    let recs = match enhance_all(cfg, &inputs, &retrieved, &bank) {
        Ok(r) => r,
        Err(e) => return abort(cfg, &mut manifest, Stage::Enhance, e),
    };
    record_stage(&mut manifest, complete(Stage::Enhance, recs.clone()));
    save_manifest(cfg, &manifest)?;
    Ok(recs)
}

/// Everything a full run produced, in memory.
#[derive(Debug, Clone)]
pub struct PipelineOutput {
    pub clusters: ClusterArtifact,
    pub retrieval: RetrievalArtifact,
    pub manifest: RunManifest,
}

/// Cluster, retrieve and enhance every video, writing all artifacts and the
/// manifest. Identical configs produce byte-identical output directories.
pub fn run_pipeline(cfg: &PipelineConfig) -> std::result::Result<PipelineOutput, PipelineError> {
    let inputs = load_inputs(cfg).at(Stage::Load)?;
    let bank = load_bank(cfg).at(Stage::Load)?;
    fs::create_dir_all(&cfg.out_dir)
        .map_err(|e| Error::io(&cfg.out_dir, e))
        .at(Stage::Load)?;
    let mut manifest = RunManifest {
        config_hash: cfg.hash(),
        seed: cfg.seed,
        complete: false,
        videos: Vec::new(),
        stages: Vec::new(),
    };

    let clusters = match cluster_all(cfg, &inputs) {
        Ok(c) => c,
        Err(e) => return abort(cfg, &mut manifest, Stage::Cluster, e),
    };
    let rec = match write_json(&cfg.out_dir, CLUSTERS_FILE, &clusters) {
        Ok(r) => r,
        Err(e) => return abort(cfg, &mut manifest, Stage::Cluster, e),
    };
    manifest.videos = plan_records(&clusters);
    record_stage(&mut manifest, complete(Stage::Cluster, vec![rec]));

    let retrieved = match retrieve_all(cfg, &inputs, &clusters, &bank) {
        Ok(r) => r,
        Err(e) => return abort(cfg, &mut manifest, Stage::Retrieve, e),
    };
    let rec = match write_json(&cfg.out_dir, RETRIEVAL_FILE, &retrieved) {
        Ok(r) => r,
        Err(e) => return abort(cfg, &mut manifest, Stage::Retrieve, e),
    };
    record_stage(&mut manifest, complete(Stage::Retrieve, vec![rec]));

    let recs = match enhance_all(cfg, &inputs, &retrieved, &bank) {
        Ok(r) => r,
        Err(e) => return abort(cfg, &mut manifest, Stage::Enhance, e),
    };
    record_stage(&mut manifest, complete(Stage::Enhance, recs));
    save_manifest(cfg, &manifest)?;

    Ok(PipelineOutput {
        clusters,
        retrieval: retrieved,
        manifest,
    })
}
