//! Event-set matching and the training losses built on it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::FeatureMatrix;

/// Temporal event in seconds. `confidence` is the foreground probability and
/// is only carried by predictions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EventTuple {
    pub start: f64,
    pub end: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub confidence: Option<f64>,
}

impl EventTuple {
    pub fn new(start: f64, end: f64) -> Result<Self> {
        let e = Self {
            start,
            end,
            confidence: None,
        };
        e.validate()?;
        Ok(e)
    }

    pub fn with_confidence(start: f64, end: f64, confidence: f64) -> Result<Self> {
        let e = Self {
            start,
            end,
            confidence: Some(confidence),
        };
        e.validate()?;
        Ok(e)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.start.is_finite() && self.end.is_finite()) || self.start < 0.0 || self.start > self.end {
            return Err(Error::param(format!(
                "event [{}, {}] must satisfy 0 <= start <= end",
                self.start, self.end
            )));
        }
        if let Some(c) = self.confidence {
            if !(0.0..=1.0).contains(&c) {
                return Err(Error::param(format!("confidence {c} outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn length(&self) -> f64 {
        self.end - self.start
    }

    pub fn center(&self) -> f64 {
        0.5 * (self.start + self.end)
    }
}

/// `(center − span/2, center + span/2)`, clamped to `[0, duration]` when a
/// duration is given (and to `>= 0` otherwise).
pub fn center_span_to_interval(center: f64, span: f64, duration: Option<f64>) -> Result<EventTuple> {
    if !(span >= 0.0 && span.is_finite() && center.is_finite()) {
        return Err(Error::param(format!("invalid center {center} / span {span}")));
    }
    let hi = duration.unwrap_or(f64::INFINITY);
    let start = (center - span / 2.0).clamp(0.0, hi);
    let end = (center + span / 2.0).clamp(0.0, hi);
    EventTuple::new(start, end)
}

/// Generalized temporal IoU: `IoU − (hull − union) / hull`.
///
/// Identical points score 1; distinct points have no union and score
/// `−gap / hull = −1`.
pub fn giou_1d(a: &EventTuple, b: &EventTuple) -> f64 {
    let inter = (a.end.min(b.end) - a.start.max(b.start)).max(0.0);
    let union = a.length() + b.length() - inter;
    let hull = a.end.max(b.end) - a.start.min(b.start);
    if hull == 0.0 {
        return 1.0;
    }
    let iou = if union > 0.0 { inter / union } else { 0.0 };
    // hull − union is the gap between the segments, zero when they overlap
    let gap = (a.start.max(b.start) - a.end.min(b.end)).max(0.0);
    iou - gap / hull
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Weight of the localization term in the matching cost.
    pub alpha_match: f64,
    pub alpha_cls: f64,
    pub alpha_loc: f64,
    pub alpha_count: f64,
    pub alpha_cap: f64,
    pub focal_alpha: f64,
    pub focal_gamma: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            alpha_match: 1.0,
            alpha_cls: 2.0,
            alpha_loc: 5.0,
            alpha_count: 1.0,
            alpha_cap: 1.0,
            focal_alpha: 0.25,
            focal_gamma: 2.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha_match,
            self.alpha_cls,
            self.alpha_loc,
            self.alpha_count,
            self.alpha_cap,
            self.focal_gamma,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::param("loss weights must be finite and >= 0"));
        }
        if !(0.0..=1.0).contains(&self.focal_alpha) {
            return Err(Error::param("focal_alpha must lie in [0, 1]"));
        }
        Ok(())
    }
}

pub const PROB_CLAMP: f64 = 1e-7;

/// Sigmoid focal loss for a single foreground probability.
pub fn focal_loss(p: f64, positive: bool, cfg: &LossConfig) -> f64 {
    let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
    if positive {
        -cfg.focal_alpha * (1.0 - p).powf(cfg.focal_gamma) * p.ln()
    } else {
        -(1.0 - cfg.focal_alpha) * p.powf(cfg.focal_gamma) * (1.0 - p).ln()
    }
}

fn confidence(pred: &EventTuple) -> f64 {
    pred.confidence.unwrap_or(1.0)
}

/// Focal term for the prediction as foreground plus `alpha_match · (1 − gIoU)`.
pub fn match_cost(pred: &EventTuple, gt: &EventTuple, cfg: &LossConfig) -> f64 {
    focal_loss(confidence(pred), true, cfg) + cfg.alpha_match * (1.0 - giou_1d(pred, gt))
}

/// Minimum-cost one-to-one matching between rows and columns of `costs`.
///
/// Returns `min(rows, cols)` `(row, col)` pairs sorted by row. Among optimal
/// matchings the one whose per-row column sequence is lexicographically
/// smallest is returned (with unmatched rows, when `rows > cols`, ranked after
/// every real column).
pub fn hungarian(costs: &FeatureMatrix) -> Vec<(usize, usize)> {
    let (n, m) = costs.shape();
    if n == 0 || m == 0 {
        return Vec::new();
    }
    // pad to rows <= cols with zero-cost placeholder columns
    let width = m.max(n);
    let cost: Vec<Vec<f64>> = (0..n)
        .map(|i| {
            let mut r = costs.row(i).to_vec();
            r.resize(width, 0.0);
            r
        })
        .collect();
    let solution = lexicographic_assignment(&cost);
    solution
        .into_iter()
        .enumerate()
        .filter(|&(_, j)| j < m)
        .collect()
}

pub fn assignment_cost(costs: &FeatureMatrix, pairs: &[(usize, usize)]) -> f64 {
    pairs.iter().map(|&(i, j)| costs.get(i, j)).sum()
}

struct Solved {
    col_of_row: Vec<usize>,
    u: Vec<f64>,
    v: Vec<f64>,
}

/// Shortest-augmenting-path Hungarian method for `rows <= cols`.
fn solve(cost: &[Vec<f64>]) -> Solved {
    let n = cost.len();
    let m = cost[0].len();
    // 1-based potentials; column 0 is the virtual source
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; m + 1];
    let mut row_of_col = vec![0usize; m + 1];
    let mut way = vec![0usize; m + 1];
    for i in 1..=n {
        row_of_col[0] = i;
        let mut j0 = 0;
        let mut minv = vec![f64::INFINITY; m + 1];
        let mut used = vec![false; m + 1];
        loop {
            used[j0] = true;
            let i0 = row_of_col[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0;
            for j in 1..=m {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=m {
                if used[j] {
                    u[row_of_col[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if row_of_col[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            row_of_col[j0] = row_of_col[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut col_of_row = vec![0; n];
    for j in 1..=m {
        if row_of_col[j] != 0 {
            col_of_row[row_of_col[j] - 1] = j - 1;
        }
    }
    Solved {
        col_of_row,
        u: u[1..].to_vec(),
        v: v[1..].to_vec(),
    }
}

fn optimum(cost: &[Vec<f64>]) -> (Vec<usize>, f64) {
    if cost.is_empty() {
        return (Vec::new(), 0.0);
    }
    let s = solve(cost);
    let total = s.col_of_row.iter().enumerate().map(|(i, &j)| cost[i][j]).sum();
    (s.col_of_row, total)
}

/// Optimal assignment, then fixes rows in order to the smallest column that
/// still admits an optimum. Candidate columns must have zero reduced cost
/// under the optimal duals, which keeps re-solves rare.
fn lexicographic_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let m = cost[0].len();
    let solved = solve(cost);
    let best: f64 = solved
        .col_of_row
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i][j])
        .sum();
    let scale = cost
        .iter()
        .flatten()
        .fold(1.0f64, |acc, c| acc.max(c.abs()));
    let tol = 1e-12 * scale * n as f64;

    let mut current = solved.col_of_row.clone();
    let mut fixed_cost = 0.0;
    let mut used = vec![false; m];
    for i in 0..n {
        let mut candidates: Vec<usize> = (0..m)
            .filter(|&j| !used[j] && j < current[i])
            .filter(|&j| (cost[i][j] - solved.u[i] - solved.v[j]).abs() <= tol)
            .collect();
        candidates.sort_unstable();
        for j in candidates {
            let free_cols: Vec<usize> = (0..m).filter(|&c| !used[c] && c != j).collect();
            let sub: Vec<Vec<f64>> = ((i + 1)..n)
                .map(|r| free_cols.iter().map(|&c| cost[r][c]).collect())
                .collect();
            let (sub_cols, sub_total) = optimum(&sub);
            if fixed_cost + cost[i][j] + sub_total <= best + tol {
                current[i] = j;
                for (k, &sc) in sub_cols.iter().enumerate() {
                    current[i + 1 + k] = free_cols[sc];
                }
                break;
            }
        }
        used[current[i]] = true;
        fixed_cost += cost[i][current[i]];
    }
    current
}

/// Index of the largest logit; ties go to the smaller index.
pub fn decode_event_count(logits: &[f64]) -> Result<usize> {
    if logits.is_empty() {
        return Err(Error::param("event-count logits are empty"));
    }
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate().skip(1) {
        if v > logits[best] {
            best = i;
        }
    }
    Ok(best)
}

/// `−log softmax(logits)[target]`.
pub fn cross_entropy(logits: &[f64], target: usize) -> Result<f64> {
    if target >= logits.len() {
        return Err(Error::shape(format!(
            "target {target} outside {} classes",
            logits.len()
        )));
    }
    let peak = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = peak + logits.iter().map(|v| (v - peak).exp()).sum::<f64>().ln();
    Ok(lse - logits[target])
}

/// Optional caption supervision: token logits per prediction, token ids per
/// ground-truth event.
#[derive(Debug, Clone, Copy)]
pub struct CaptionInputs<'a> {
    /// One `T×V` matrix per prediction.
    pub logits: &'a [FeatureMatrix],
    /// One token sequence per ground-truth event.
    pub refs: &'a [Vec<usize>],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairCost {
    pub pred: usize,
    pub gt: usize,
    pub cls: f64,
    pub loc: f64,
    pub giou: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchReport {
    pub assignment: Vec<(usize, usize)>,
    pub unmatched_preds: Vec<usize>,
    pub unmatched_gts: Vec<usize>,
    pub pair_costs: Vec<PairCost>,
    pub l_cls: f64,
    pub l_loc: f64,
    pub l_count: f64,
    pub l_cap: f64,
    pub l_total: f64,
}

/// Hungarian matching under [`match_cost`] followed by the weighted loss
/// `α_cls L_cls + α_loc L_loc + α_count L_count + α_cap L_cap`.
///
/// * `L_cls`: focal loss over all predictions (matched as foreground,
///   unmatched as background), divided by `max(1, #gt)`.
/// * `L_loc`: `Σ (1 − gIoU)` over matched pairs, divided by `max(1, #gt)`.
/// * `L_count`: cross-entropy of `count_logits` against `#gt` (0 when absent).
/// * `L_cap`: mean token cross-entropy over matched pairs (0 when absent).
pub fn total_loss(
    preds: &[EventTuple],
    gts: &[EventTuple],
    captions: Option<CaptionInputs<'_>>,
    count_logits: Option<&[f64]>,
    cfg: &LossConfig,
) -> Result<MatchReport> {
    cfg.validate()?;
    for e in preds.iter().chain(gts) {
        e.validate()?;
    }
    let costs = FeatureMatrix::from_fn(preds.len(), gts.len(), |i, j| {
        match_cost(&preds[i], &gts[j], cfg)
    })?;
    let assignment = hungarian(&costs);
    let mut pred_matched = vec![false; preds.len()];
    let mut gt_matched = vec![false; gts.len()];
    let mut pair_costs = Vec::with_capacity(assignment.len());
    for &(i, j) in &assignment {
        pred_matched[i] = true;
        gt_matched[j] = true;
        let giou = giou_1d(&preds[i], &gts[j]);
        pair_costs.push(PairCost {
            pred: i,
            gt: j,
            cls: focal_loss(confidence(&preds[i]), true, cfg),
            loc: 1.0 - giou,
            giou,
        });
    }
    let norm = gts.len().max(1) as f64;
    let background: f64 = preds
        .iter()
        .zip(&pred_matched)
        .filter(|(_, &m)| !m)
        .map(|(p, _)| focal_loss(confidence(p), false, cfg))
        .sum();
    let l_cls = (pair_costs.iter().map(|p| p.cls).sum::<f64>() + background) / norm;
    let l_loc = pair_costs.iter().map(|p| p.loc).sum::<f64>() / norm;

    let l_count = match count_logits {
        Some(logits) => {
            if gts.len() >= logits.len() {
                return Err(Error::shape(format!(
                    "{} ground-truth events but count head covers 0..{}",
                    gts.len(),
                    logits.len()
                )));
            }
            cross_entropy(logits, gts.len())?
        }
        None => 0.0,
    };

    let l_cap = match captions {
        Some(c) => caption_loss(c, &assignment, preds.len(), gts.len())?,
        None => 0.0,
    };

    let l_total = cfg.alpha_cls * l_cls
        + cfg.alpha_loc * l_loc
        + cfg.alpha_count * l_count
        + cfg.alpha_cap * l_cap;

    Ok(MatchReport {
        unmatched_preds: (0..preds.len()).filter(|&i| !pred_matched[i]).collect(),
        unmatched_gts: (0..gts.len()).filter(|&j| !gt_matched[j]).collect(),
        assignment,
        pair_costs,
        l_cls,
        l_loc,
        l_count,
        l_cap,
        l_total,
    })
}

fn caption_loss(
    c: CaptionInputs<'_>,
    assignment: &[(usize, usize)],
    n_pred: usize,
    n_gt: usize,
) -> Result<f64> {
    if c.logits.len() != n_pred || c.refs.len() != n_gt {
        return Err(Error::shape(format!(
            "caption inputs cover {} predictions and {} references, expected {n_pred} and {n_gt}",
            c.logits.len(),
            c.refs.len()
        )));
    }
    let mut total = 0.0;
    let mut tokens = 0usize;
    for &(i, j) in assignment {
        let logits = &c.logits[i];
        let refs = &c.refs[j];
        if logits.rows() != refs.len() {
            return Err(Error::shape(format!(
                "prediction {i} has {} token steps, reference {j} has {} tokens",
                logits.rows(),
                refs.len()
            )));
        }
        for (t, &tok) in refs.iter().enumerate() {
            total += cross_entropy(logits.row(t), tok)?;
        }
        tokens += refs.len();
    }
    Ok(if tokens == 0 { 0.0 } else { total / tokens as f64 })
}
