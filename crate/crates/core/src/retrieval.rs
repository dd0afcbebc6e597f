//! Event semantic retrieval: cosine scoring of pseudo-events against a
//! sentence bank, top-k selection and pooling of the selected embeddings.

use std::cmp::Ordering;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::tensorio::{self, dot, norm, FeatureMatrix, SentenceEntry};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TopKMode {
    /// Unweighted mean of the selected rows.
    #[default]
    Hard,
    /// Softmax-weighted mean of the selected rows, `softmax(score / temperature)`.
    Soft,
}

/// Text embeddings with their sentence ids. Row norms are cached.
#[derive(Debug, Clone)]
pub struct SentenceBank {
    embeddings: FeatureMatrix,
    manifest: Vec<SentenceEntry>,
    norms: Vec<f64>,
}

impl SentenceBank {
    pub fn new(embeddings: FeatureMatrix, manifest: Vec<SentenceEntry>) -> Result<Self> {
        if manifest.len() != embeddings.rows() {
            return Err(Error::shape(format!(
                "manifest has {} entries for {} embeddings",
                manifest.len(),
                embeddings.rows()
            )));
        }
        let norms: Vec<f64> = embeddings.row_iter().map(norm).collect();
        if let Some(r) = norms.iter().position(|&n| n == 0.0) {
            return Err(Error::Degenerate(format!("bank row {r} has zero norm")));
        }
        Ok(Self {
            embeddings,
            manifest,
            norms,
        })
    }

    /// Bank with generated ids `s{row}` and empty text.
    pub fn unlabeled(embeddings: FeatureMatrix) -> Result<Self> {
        let manifest = (0..embeddings.rows())
            .map(|row| SentenceEntry {
                row,
                sentence_id: format!("s{row}"),
                text: String::new(),
            })
            .collect();
        Self::new(embeddings, manifest)
    }

    pub fn load(embeddings: impl AsRef<Path>, manifest: impl AsRef<Path>) -> Result<Self> {
        Self::new(
            tensorio::read_features(embeddings)?,
            tensorio::read_sentence_manifest(manifest)?,
        )
    }

    pub fn embeddings(&self) -> &FeatureMatrix {
        &self.embeddings
    }

    pub fn manifest(&self) -> &[SentenceEntry] {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.embeddings.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.embeddings.rows() == 0
    }

    pub fn dim(&self) -> usize {
        self.embeddings.cols()
    }
}

/// Per-event selection from a similarity matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopK {
    pub k: usize,
    /// `c` rows of `k` bank indices, best first.
    pub indices: Vec<Vec<usize>>,
    /// Matching similarities, non-increasing per row.
    pub scores: Vec<Vec<f64>>,
    /// Softmax weights over each row's scores (soft mode only).
    pub weights: Option<Vec<Vec<f64>>>,
}

/// Selection plus the pooled (`c×d`) and stacked (`c` blocks of `k×d`) features.
#[derive(Debug, Clone, PartialEq)]
pub struct RetrievalResult {
    pub topk: TopK,
    pub pooled: FeatureMatrix,
    pub stacked: Vec<FeatureMatrix>,
}

pub fn cosine_similarity_matrix(events: &FeatureMatrix, bank: &SentenceBank) -> Result<FeatureMatrix> {
    cosine_similarity_matrix_with(events, bank, Execution::default())
}

/// `S[i][j] = ⟨e_i, t_j⟩ / (‖e_i‖ ‖t_j‖)`, rows computed independently and
/// clamped to `[-1, 1]`.
pub fn cosine_similarity_matrix_with(
    events: &FeatureMatrix,
    bank: &SentenceBank,
    exec: Execution,
) -> Result<FeatureMatrix> {
    if events.cols() != bank.dim() {
        return Err(Error::shape(format!(
            "event dim {} vs bank dim {}",
            events.cols(),
            bank.dim()
        )));
    }
    let event_norms: Vec<f64> = events.row_iter().map(norm).collect();
    if let Some(r) = event_norms.iter().position(|&n| n == 0.0) {
        return Err(Error::Degenerate(format!("event row {r} has zero norm")));
    }
    let m = bank.len();
    let mut data = vec![0.0; events.rows() * m];
    par::fill_chunks(exec, &mut data, m, |i, out| {
        let e = events.row(i);
        let en = event_norms[i];
        for (j, o) in out.iter_mut().enumerate() {
            let s = dot(e, bank.embeddings.row(j)) / (en * bank.norms[j]);
            *o = s.clamp(-1.0, 1.0);
        }
    });
    FeatureMatrix::new(events.rows(), m, data)
}

/// Descending score, then ascending index.
fn rank_order(row: &[f64]) -> impl Fn(&usize, &usize) -> Ordering + '_ {
    move |&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b))
}

/// The `k` best columns of every row of `sims`; ties go to the smaller index.
pub fn top_k(sims: &FeatureMatrix, k: usize, mode: TopKMode, temperature: f64) -> Result<TopK> {
    let m = sims.cols();
    if k == 0 || k > m {
        return Err(Error::param(format!("k = {k} must lie in 1..={m}")));
    }
    if mode == TopKMode::Soft && !(temperature > 0.0 && temperature.is_finite()) {
        return Err(Error::param(format!(
            "soft top-k needs a positive temperature, got {temperature}"
        )));
    }
    let mut indices = Vec::with_capacity(sims.rows());
    let mut scores = Vec::with_capacity(sims.rows());
    for row in sims.row_iter() {
        let mut idx: Vec<usize> = (0..m).collect();
        let order = rank_order(row);
        if k < m {
            idx.select_nth_unstable_by(k - 1, &order);
            idx.truncate(k);
        }
        idx.sort_unstable_by(&order);
        scores.push(idx.iter().map(|&j| row[j]).collect::<Vec<_>>());
        indices.push(idx);
    }
    let weights = match mode {
        TopKMode::Hard => None,
        TopKMode::Soft => Some(
            scores
                .iter()
                .map(|s| softmax_scaled(s, temperature))
                .collect(),
        ),
    };
    Ok(TopK {
        k,
        indices,
        scores,
        weights,
    })
}

/// `softmax(x / temperature)`, max-subtracted.
pub fn softmax_scaled(x: &[f64], temperature: f64) -> Vec<f64> {
    let peak = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = x.iter().map(|v| ((v - peak) / temperature).exp()).collect();
    let total: f64 = e.iter().sum();
    e.into_iter().map(|v| v / total).collect()
}

/// Pools each event's selected embeddings into one row.
pub fn pool_topk(topk: &TopK, bank: &SentenceBank, mode: TopKMode) -> Result<FeatureMatrix> {
    let d = bank.dim();
    let mut data = vec![0.0; topk.indices.len() * d];
    for (i, idx) in topk.indices.iter().enumerate() {
        let weights: Vec<f64> = match (mode, &topk.weights) {
            (TopKMode::Hard, _) => vec![1.0 / idx.len() as f64; idx.len()],
            (TopKMode::Soft, Some(w)) => w[i].clone(),
            (TopKMode::Soft, None) => {
                return Err(Error::param("soft pooling needs soft top-k weights"))
            }
        };
        let out = &mut data[i * d..(i + 1) * d];
        for (&j, w) in idx.iter().zip(weights) {
            if j >= bank.len() {
                return Err(Error::shape(format!("bank index {j} out of {}", bank.len())));
            }
            for (o, v) in out.iter_mut().zip(bank.embeddings.row(j)) {
                *o += w * v;
            }
        }
    }
    FeatureMatrix::new(topk.indices.len(), d, data)
}

/// `k×d` block of selected embeddings per event.
pub fn stack_topk(topk: &TopK, bank: &SentenceBank) -> Result<Vec<FeatureMatrix>> {
    topk.indices
        .iter()
        .map(|idx| bank.embeddings.select_rows(idx))
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetrievalParams {
    pub k: usize,
    pub mode: TopKMode,
    pub temperature: f64,
}

impl Default for RetrievalParams {
    fn default() -> Self {
        Self {
            k: 40,
            mode: TopKMode::Hard,
            temperature: 1.0,
        }
    }
}

/// Scoring, selection and pooling in one call. `k` is clamped to the bank size.
pub fn retrieve(
    events: &FeatureMatrix,
    bank: &SentenceBank,
    params: &RetrievalParams,
) -> Result<RetrievalResult> {
    let sims = cosine_similarity_matrix(events, bank)?;
    let topk = top_k(&sims, params.k.min(bank.len()), params.mode, params.temperature)?;
    let pooled = pool_topk(&topk, bank, params.mode)?;
    let stacked = stack_topk(&topk, bank)?;
    Ok(RetrievalResult {
        topk,
        pooled,
        stacked,
    })
}
