//! Seeded synthetic datasets whose correct segmentation and retrieval are
//! known by construction.
//!
//! Every video is a run of constant "prototype" blocks plus Gaussian noise.
//! The sentence bank holds every prototype verbatim together with random
//! distractors, in shuffled order. Ground-truth events are the block
//! boundaries in seconds at one frame per second.
//!
//! Files written under the output directory:
//!
//! ```text
//! features/<video>.tsem   L × d frame features
//! bank.tsem               M × d sentence embeddings
//! bank_manifest.json      row → sentence id
//! gt.jsonl                ground-truth events per video
//! synthetic.json          generator settings, blocks and prototype rows
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::evaluation::VideoEvents;
use crate::events_io::write_events_jsonl;
use crate::matching::EventTuple;
use crate::tensorio::{self, FeatureMatrix, SeededRng, SentenceEntry};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SyntheticSpec {
    pub n_videos: usize,
    /// Frames per video.
    pub frames: usize,
    pub dim: usize,
    /// Events (prototype blocks) per video.
    pub events: usize,
    /// Bank rows; must be at least `n_videos * events`.
    pub bank_size: usize,
    /// Noise standard deviation relative to the prototype norm.
    pub noise: f64,
    pub seed: u64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        Self {
            n_videos: 4,
            frames: 60,
            dim: 32,
            events: 3,
            bank_size: 64,
            noise: 0.0,
            seed: 0,
        }
    }
}

impl SyntheticSpec {
    pub fn validate(&self) -> Result<()> {
        if self.n_videos == 0 || self.frames == 0 || self.dim == 0 || self.events == 0 {
            return Err(Error::param("synthetic counts must be positive"));
        }
        if self.events > self.frames {
            return Err(Error::param(format!(
                "{} events do not fit in {} frames",
                self.events, self.frames
            )));
        }
        if self.bank_size < self.n_videos * self.events {
            return Err(Error::param(format!(
                "bank size {} is smaller than the {} prototypes",
                self.bank_size,
                self.n_videos * self.events
            )));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(Error::param("noise must be finite and >= 0"));
        }
        Ok(())
    }

    /// Shortest block a video may contain.
    pub fn min_block(&self) -> usize {
        (self.frames / (2 * self.events)).max(1)
    }
}

/// One constant block of a synthetic video, inclusive frame range.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Block {
    pub start: usize,
    pub end: usize,
    /// Bank row holding this block's prototype.
    pub bank_row: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticVideo {
    pub video_id: String,
    pub blocks: Vec<Block>,
}

impl SyntheticVideo {
    pub fn gt_events(&self) -> Vec<EventTuple> {
        self.blocks
            .iter()
            .map(|b| EventTuple {
                start: b.start as f64,
                end: (b.end + 1) as f64,
                confidence: None,
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SyntheticManifest {
    pub spec: SyntheticSpec,
    pub videos: Vec<SyntheticVideo>,
}

/// In-memory dataset; [`write_dataset`] puts it on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub manifest: SyntheticManifest,
    pub features: Vec<FeatureMatrix>,
    pub bank: FeatureMatrix,
    pub bank_entries: Vec<SentenceEntry>,
}

pub fn video_id(v: usize) -> String {
    format!("video_{v:04}")
}

/// Splits `total` frames into `parts` blocks of at least `min_len` frames.
fn block_lengths(rng: &mut SeededRng, total: usize, parts: usize, min_len: usize) -> Vec<usize> {
    let spare = total - parts * min_len;
    // stars and bars: choose parts-1 bar slots among spare+parts-1
    let mut slots: Vec<usize> = (0..spare + parts - 1).collect();
    rng.shuffle(&mut slots);
    let mut bars = slots[..parts - 1].to_vec();
    bars.sort_unstable();
    let mut lens = Vec::with_capacity(parts);
    let mut prev = 0;
    for (i, &b) in bars.iter().enumerate() {
        lens.push(b - i - prev + min_len);
        prev = b - i;
    }
    lens.push(spare - prev + min_len);
    lens
}

fn gaussian_row(rng: &mut SeededRng, d: usize) -> Vec<f64> {
    (0..d).map(|_| rng.standard_normal()).collect()
}

/// Builds the dataset. The bank uses random stream 0 and video `v` uses
/// stream `v + 1`, so videos are independent of each other's lengths.
pub fn generate(spec: &SyntheticSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let d = spec.dim;
    let n_proto = spec.n_videos * spec.events;

    let mut bank_rng = SeededRng::with_stream(spec.seed, 0);
    let protos: Vec<Vec<f64>> = (0..n_proto).map(|_| gaussian_row(&mut bank_rng, d)).collect();
    let distractors: Vec<Vec<f64>> = (n_proto..spec.bank_size)
        .map(|_| gaussian_row(&mut bank_rng, d))
        .collect();
    // order[r] = source index placed at bank row r
    let mut order: Vec<usize> = (0..spec.bank_size).collect();
    bank_rng.shuffle(&mut order);
    let mut row_of = vec![0; spec.bank_size];
    for (r, &src) in order.iter().enumerate() {
        row_of[src] = r;
    }
    let bank_rows: Vec<&[f64]> = order
        .iter()
        .map(|&src| {
            if src < n_proto {
                protos[src].as_slice()
            } else {
                distractors[src - n_proto].as_slice()
            }
        })
        .collect();
    let bank = FeatureMatrix::from_rows(&bank_rows)?;
    let bank_entries = order
        .iter()
        .enumerate()
        .map(|(r, &src)| {
            let (sentence_id, text) = if src < n_proto {
                (
                    format!("{}_event{}", video_id(src / spec.events), src % spec.events),
                    "prototype".to_string(),
                )
            } else {
                (format!("distractor_{}", src - n_proto), "distractor".to_string())
            };
            SentenceEntry {
                row: r,
                sentence_id,
                text,
            }
        })
        .collect();

    let mut videos = Vec::with_capacity(spec.n_videos);
    let mut features = Vec::with_capacity(spec.n_videos);
    for v in 0..spec.n_videos {
        let mut rng = SeededRng::with_stream(spec.seed, v as u64 + 1);
        let lens = block_lengths(&mut rng, spec.frames, spec.events, spec.min_block());
        let mut blocks = Vec::with_capacity(spec.events);
        let mut data = Vec::with_capacity(spec.frames * d);
        let mut start = 0;
        for (e, &len) in lens.iter().enumerate() {
            let p = &protos[v * spec.events + e];
            let std = spec.noise * tensorio::norm(p) / (d as f64).sqrt();
            for _ in 0..len {
                for &x in p {
                    let n = if std > 0.0 { std * rng.standard_normal() } else { 0.0 };
                    data.push(x + n);
                }
            }
            blocks.push(Block {
                start,
                end: start + len - 1,
                bank_row: row_of[v * spec.events + e],
            });
            start += len;
        }
        features.push(FeatureMatrix::new(spec.frames, d, data)?);
        videos.push(SyntheticVideo {
            video_id: video_id(v),
            blocks,
        });
    }

    Ok(SyntheticDataset {
        manifest: SyntheticManifest {
            spec: spec.clone(),
            videos,
        },
        features,
        bank,
        bank_entries,
    })
}

pub fn write_dataset(ds: &SyntheticDataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let feat_dir = dir.join("features");
    fs::create_dir_all(&feat_dir).map_err(|e| Error::io(&feat_dir, e))?;
    for (video, f) in ds.manifest.videos.iter().zip(&ds.features) {
        tensorio::write_features(f, feat_dir.join(format!("{}.tsem", video.video_id)))?;
    }
    tensorio::write_features(&ds.bank, dir.join("bank.tsem"))?;
    tensorio::write_sentence_manifest(&ds.bank_entries, dir.join("bank_manifest.json"))?;
    let gts: Vec<VideoEvents> = ds
        .manifest
        .videos
        .iter()
        .map(|v| VideoEvents::new(v.video_id.clone(), v.gt_events()))
        .collect();
    write_events_jsonl(&gts, dir.join("gt.jsonl"))?;
    let path = dir.join("synthetic.json");
    let mut text = serde_json::to_string_pretty(&ds.manifest)?;
    text.push('\n');
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

pub fn gen_synthetic(spec: &SyntheticSpec, dir: impl AsRef<Path>) -> Result<SyntheticDataset> {
    let ds = generate(spec)?;
    write_dataset(&ds, dir)?;
    Ok(ds)
}
