//! Event localization scoring: precision and recall at several temporal IoU
//! thresholds, averaged over videos and then thresholds, with F1 taken from
//! the averaged values.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matching::{hungarian, EventTuple};
use crate::par::{self, Execution};
use crate::tensorio::FeatureMatrix;

pub const DEFAULT_IOU_THRESHOLDS: [f64; 4] = [0.3, 0.5, 0.7, 0.9];

/// How a prediction earns credit at a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchingProtocol {
    /// Best IoU against any event on the other side; events may be reused.
    #[default]
    MaxIou,
    /// Maximum one-to-one matching among pairs above the threshold.
    Exclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Averaging {
    /// Per-video ratios averaged over videos.
    #[default]
    Macro,
    /// Counts pooled over all videos before dividing.
    Micro,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    pub iou_thresholds: Vec<f64>,
    pub protocol: MatchingProtocol,
    pub averaging: Averaging,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            iou_thresholds: DEFAULT_IOU_THRESHOLDS.to_vec(),
            protocol: MatchingProtocol::default(),
            averaging: Averaging::default(),
        }
    }
}

impl EvalConfig {
    pub fn validate(&self) -> Result<()> {
        if self.iou_thresholds.is_empty() {
            return Err(Error::param("at least one IoU threshold is required"));
        }
        if self.iou_thresholds.iter().any(|t| !(*t > 0.0 && *t <= 1.0)) {
            return Err(Error::param("IoU thresholds must lie in (0, 1]"));
        }
        if self.iou_thresholds.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::param("IoU thresholds must be strictly increasing"));
        }
        Ok(())
    }
}

/// Events of one video, as read from a JSON-lines file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEvents {
    pub video_id: String,
    pub events: Vec<EventTuple>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub count_logits: Option<Vec<f64>>,
}

impl VideoEvents {
    pub fn new(video_id: impl Into<String>, events: Vec<EventTuple>) -> Self {
        Self {
            video_id: video_id.into(),
            events,
            count_logits: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdScore {
    pub iou_threshold: f64,
    pub precision: f64,
    pub recall: f64,
}

/// All values are percentages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationScore {
    pub per_threshold: Vec<ThresholdScore>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

impl LocalizationScore {
    /// `threshold,precision,recall,f1` rows, then an `average` row.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("threshold,precision,recall,f1\n");
        for t in &self.per_threshold {
            let _ = writeln!(
                out,
                "{},{},{},{}",
                t.iou_threshold,
                t.precision,
                t.recall,
                harmonic(t.precision, t.recall)
            );
        }
        let _ = writeln!(out, "average,{},{},{}", self.precision, self.recall, self.f1);
        out
    }
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

/// Plain temporal IoU. Identical points score 1, distinct points 0.
pub fn iou_1d(a: &EventTuple, b: &EventTuple) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.length() + b.length() - inter;
    if union > 0.0 {
        inter / union
    } else if a.start == b.start && a.end == b.end {
        1.0
    } else {
        0.0
    }
}

/// Per-threshold counts for one video.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
struct Counts {
    hits_pred: usize,
    n_pred: usize,
    hits_gt: usize,
    n_gt: usize,
}

impl Counts {
    fn precision(&self) -> f64 {
        match (self.n_pred, self.n_gt) {
            (0, 0) => 1.0,
            (0, _) => 0.0,
            (n, _) => self.hits_pred as f64 / n as f64,
        }
    }

    fn recall(&self) -> f64 {
        if self.n_gt == 0 {
            1.0
        } else {
            self.hits_gt as f64 / self.n_gt as f64
        }
    }
}

fn video_counts(preds: &[EventTuple], gts: &[EventTuple], cfg: &EvalConfig) -> Vec<Counts> {
    let ious: Vec<Vec<f64>> = preds
        .iter()
        .map(|p| gts.iter().map(|g| iou_1d(p, g)).collect())
        .collect();
    cfg.iou_thresholds
        .iter()
        .map(|&tau| {
            let (hits_pred, hits_gt) = match cfg.protocol {
                MatchingProtocol::MaxIou => {
                    let hp = ious.iter().filter(|row| row.iter().any(|&v| v >= tau)).count();
                    let hg = (0..gts.len())
                        .filter(|&j| ious.iter().any(|row| row[j] >= tau))
                        .count();
                    (hp, hg)
                }
                MatchingProtocol::Exclusive => {
                    let m = exclusive_matches(&ious, gts.len(), tau);
                    (m, m)
                }
            };
            Counts {
                hits_pred,
                n_pred: preds.len(),
                hits_gt,
                n_gt: gts.len(),
            }
        })
        .collect()
}

fn exclusive_matches(ious: &[Vec<f64>], n_gt: usize, tau: f64) -> usize {
    if ious.is_empty() || n_gt == 0 {
        return 0;
    }
    let cost = FeatureMatrix::from_fn(ious.len(), n_gt, |i, j| {
        if ious[i][j] >= tau {
            0.0
        } else {
            1.0
        }
    })
    .expect("finite costs");
    hungarian(&cost)
        .into_iter()
        .filter(|&(i, j)| ious[i][j] >= tau)
        .count()
}

pub fn localization_score(
    preds: &[VideoEvents],
    gts: &[VideoEvents],
    cfg: &EvalConfig,
) -> Result<LocalizationScore> {
    localization_score_with(preds, gts, cfg, Execution::default())
}

/// Scores every ground-truth video; videos without predictions count as empty.
pub fn localization_score_with(
    preds: &[VideoEvents],
    gts: &[VideoEvents],
    cfg: &EvalConfig,
    exec: Execution,
) -> Result<LocalizationScore> {
    cfg.validate()?;
    let gt_map = index_videos(gts, "ground truth")?;
    let pred_map = index_videos(preds, "predictions")?;
    if let Some(id) = pred_map.keys().find(|id| !gt_map.contains_key(*id)) {
        return Err(Error::param(format!(
            "prediction video {id} has no ground truth"
        )));
    }
    for v in preds.iter().chain(gts) {
        for e in &v.events {
            e.validate()?;
        }
    }
    let videos: Vec<(&str, &[EventTuple])> = gt_map
        .iter()
        .map(|(id, v)| (*id, v.events.as_slice()))
        .collect();
    let per_video: Vec<Vec<Counts>> = par::map_indexed(exec, videos.len(), |i| {
        let (id, gt) = videos[i];
        let p = pred_map.get(id).map_or(&[][..], |v| v.events.as_slice());
        video_counts(p, gt, cfg)
    });

    let n_videos = per_video.len();
    let mut per_threshold = Vec::with_capacity(cfg.iou_thresholds.len());
    for (t, &tau) in cfg.iou_thresholds.iter().enumerate() {
        let (precision, recall) = if n_videos == 0 {
            (0.0, 0.0)
        } else {
            match cfg.averaging {
                Averaging::Macro => {
                    let p: f64 = per_video.iter().map(|v| v[t].precision()).sum();
                    let r: f64 = per_video.iter().map(|v| v[t].recall()).sum();
                    (p / n_videos as f64, r / n_videos as f64)
                }
                Averaging::Micro => {
                    let total = per_video.iter().fold(Counts::default(), |acc, v| Counts {
                        hits_pred: acc.hits_pred + v[t].hits_pred,
                        n_pred: acc.n_pred + v[t].n_pred,
                        hits_gt: acc.hits_gt + v[t].hits_gt,
                        n_gt: acc.n_gt + v[t].n_gt,
                    });
                    (total.precision(), total.recall())
                }
            }
        };
        per_threshold.push(ThresholdScore {
            iou_threshold: tau,
            precision: 100.0 * precision,
            recall: 100.0 * recall,
        });
    }
    let k = per_threshold.len() as f64;
    let precision = per_threshold.iter().map(|t| t.precision).sum::<f64>() / k;
    let recall = per_threshold.iter().map(|t| t.recall).sum::<f64>() / k;
    Ok(LocalizationScore {
        per_threshold,
        precision,
        recall,
        f1: harmonic(precision, recall),
    })
}

fn index_videos<'a>(
    videos: &'a [VideoEvents],
    what: &str,
) -> Result<BTreeMap<&'a str, &'a VideoEvents>> {
    let mut map = BTreeMap::new();
    for v in videos {
        if map.insert(v.video_id.as_str(), v).is_some() {
            return Err(Error::param(format!(
                "duplicate video {} in {what}",
                v.video_id
            )));
        }
    }
    Ok(map)
}
