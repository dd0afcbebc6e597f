//! Event context clustering.
//!
//! Frames are grouped by Ward-linkage agglomerative clustering on Euclidean
//! distance, split into temporally contiguous segments whose span never
//! exceeds `t_max`, and each segment is pooled with weights that grow towards
//! its boundaries.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::tensorio::FeatureMatrix;

pub const DEFAULT_SIGMA_FRACTION: f64 = 0.25;
const TIE_TOLERANCE: f64 = 1e-12;

pub const DEFAULT_EPSILON: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdaptiveRange {
    pub min: usize,
    pub max: usize,
}

impl Default for AdaptiveRange {
    fn default() -> Self {
        Self { min: 5, max: 10 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClusterParams {
    pub n_clusters: usize,
    /// Maximum segment span in frames (seconds at 1 fps). `None` resolves to
    /// `ceil(L / c)` for the clustered sequence.
    pub t_max: Option<usize>,
    /// When set, the cluster count is chosen from this range per video.
    pub adaptive: Option<AdaptiveRange>,
    pub sigma_fraction: f64,
    pub epsilon: f64,
}

impl Default for ClusterParams {
    fn default() -> Self {
        Self {
            n_clusters: 10,
            t_max: None,
            adaptive: None,
            sigma_fraction: DEFAULT_SIGMA_FRACTION,
            epsilon: DEFAULT_EPSILON,
        }
    }
}

impl ClusterParams {
    pub fn with_clusters(n_clusters: usize) -> Self {
        Self {
            n_clusters,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_clusters == 0 {
            return Err(Error::param("n_clusters must be >= 1"));
        }
        if self.t_max == Some(0) {
            return Err(Error::param("t_max must be >= 1"));
        }
        if let Some(r) = self.adaptive {
            if r.min == 0 || r.min > r.max {
                return Err(Error::param(format!(
                    "adaptive range [{}, {}] is empty",
                    r.min, r.max
                )));
            }
        }
        if !(self.sigma_fraction > 0.0 && self.sigma_fraction <= 1.0) {
            return Err(Error::param("sigma_fraction must lie in (0, 1]"));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::param("epsilon must be positive"));
        }
        Ok(())
    }
}

/// Inclusive frame range `start..=end`. `cluster_id` is the Ward cluster the
/// segment was cut from; several segments may share it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub start: usize,
    pub end: usize,
    pub cluster_id: usize,
}

impl Segment {
    pub fn len(&self) -> usize {
        self.end - self.start + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClusterSet {
    /// Per-frame index into `segments`.
    pub assignment: Vec<usize>,
    /// Sorted by start frame; they tile `0..L` without gaps.
    pub segments: Vec<Segment>,
    /// Per-frame pooling weight; each segment's weights sum to 1.
    pub weights: Vec<f64>,
}

impl ClusterSet {
    pub fn from_segments(segments: Vec<Segment>, sigma_fraction: f64, epsilon: f64) -> Self {
        let n_frames = segments.last().map_or(0, |s| s.end + 1);
        let mut assignment = vec![0; n_frames];
        let mut weights = vec![0.0; n_frames];
        for (i, seg) in segments.iter().enumerate() {
            let w = boundary_weights(seg.len(), sigma_fraction, epsilon);
            for (f, wf) in (seg.start..=seg.end).zip(w) {
                assignment[f] = i;
                weights[f] = wf;
            }
        }
        Self {
            assignment,
            segments,
            weights,
        }
    }

    pub fn len(&self) -> usize {
        self.segments.len()
    }

    pub fn is_empty(&self) -> bool {
        self.segments.is_empty()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PseudoEventFeatures {
    pub matrix: FeatureMatrix,
    /// Segment index each row was pooled from.
    pub provenance: Vec<usize>,
}

/// Raw Ward partition before temporal enforcement.
#[derive(Debug, Clone, PartialEq)]
pub struct WardPartition {
    /// Cluster labels numbered by first appearance in time.
    pub assignment: Vec<usize>,
    /// Cost (increase in within-cluster sum of squares) of each merge performed.
    pub merge_costs: Vec<f64>,
}

/// One agglomeration step: cluster `absorbed` joins `kept`. Clusters are
/// named by their smallest frame index, so `kept < absorbed`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Merge {
    pub kept: usize,
    pub absorbed: usize,
    pub cost: f64,
}

/// Full Ward merge sequence down to a single cluster.
///
/// Pair costs are maintained with the Lance-Williams recurrence on
/// `Δ(a, b) = n_a n_b / (n_a + n_b) · ‖μ_a − μ_b‖²`. Each step merges the
/// cheapest pair; equal costs resolve to the lexicographically smallest
/// `(kept, absorbed)` pair, where costs within a relative `1e-12` of the
/// minimum count as equal.
pub fn ward_merges(frames: &FeatureMatrix, exec: Execution) -> Vec<Merge> {
    let n = frames.rows();
    if n < 2 {
        return Vec::new();
    }
    // Δ for singletons is half the squared distance
    let rows: Vec<Vec<f64>> = par::map_indexed(exec, n, |i| {
        let a = frames.row(i);
        (0..n)
            .map(|j| {
                if j <= i {
                    0.0
                } else {
                    0.5 * a
                        .iter()
                        .zip(frames.row(j))
                        .map(|(x, y)| (x - y) * (x - y))
                        .sum::<f64>()
                }
            })
            .collect()
    });
    let mut cost = vec![0.0; n * n];
    for (i, r) in rows.into_iter().enumerate() {
        for j in (i + 1)..n {
            cost[i * n + j] = r[j];
            cost[j * n + i] = r[j];
        }
    }

    let scale = cost.iter().fold(0.0_f64, |m, &c| m.max(c));
    let mut size = vec![1usize; n];
    let mut active: Vec<usize> = (0..n).collect();
    let mut merges = Vec::with_capacity(n - 1);

    while active.len() > 1 {
        let mut min = f64::INFINITY;
        for (p, &a) in active.iter().enumerate() {
            for &b in &active[p + 1..] {
                min = min.min(cost[a * n + b]);
            }
        }
        // costs equal up to recurrence rounding count as ties
        let cutoff = min + TIE_TOLERANCE * min.abs().max(scale);
        let (a, b) = active
            .iter()
            .enumerate()
            .flat_map(|(p, &a)| active[p + 1..].iter().map(move |&b| (a, b)))
            .find(|&(a, b)| cost[a * n + b] <= cutoff)
            .expect("at least one active pair");
        let delta = cost[a * n + b];
        let (na, nb) = (size[a] as f64, size[b] as f64);
        for &k in &active {
            if k == a || k == b {
                continue;
            }
            let nk = size[k] as f64;
            let updated = ((na + nk) * cost[a * n + k] + (nb + nk) * cost[b * n + k]
                - nk * delta)
                / (na + nb + nk);
            cost[a * n + k] = updated;
            cost[k * n + a] = updated;
        }
        size[a] += size[b];
        active.retain(|&k| k != b);
        merges.push(Merge {
            kept: a,
            absorbed: b,
            cost: delta,
        });
    }
    merges
}

/// Replays the first `n - c` merges and labels clusters by first appearance.
pub fn cut_merges(merges: &[Merge], n: usize, c: usize) -> Vec<usize> {
    let mut parent: Vec<usize> = (0..n).collect();
    for m in merges.iter().take(n.saturating_sub(c)) {
        parent[m.absorbed] = m.kept;
    }
    let root = |mut i: usize| {
        while parent[i] != i {
            i = parent[i];
        }
        i
    };
    let mut label = vec![usize::MAX; n];
    let mut next = 0;
    (0..n)
        .map(|i| {
            let r = root(i);
            if label[r] == usize::MAX {
                label[r] = next;
                next += 1;
            }
            label[r]
        })
        .collect()
}

pub fn ward_partition(frames: &FeatureMatrix, c: usize) -> Result<WardPartition> {
    ward_partition_with(frames, c, Execution::default())
}

pub fn ward_partition_with(
    frames: &FeatureMatrix,
    c: usize,
    exec: Execution,
) -> Result<WardPartition> {
    let n = frames.rows();
    if n == 0 {
        return Err(Error::Degenerate("no frames to cluster".into()));
    }
    if c == 0 || c > n {
        return Err(Error::param(format!(
            "cluster count {c} must lie in 1..={n} frames"
        )));
    }
    let merges = ward_merges(frames, exec);
    Ok(WardPartition {
        assignment: cut_merges(&merges, n, c),
        merge_costs: merges.iter().take(n - c).map(|m| m.cost).collect(),
    })
}

/// Ward clustering followed by temporal enforcement and boundary weighting.
pub fn agglomerate(frames: &FeatureMatrix, params: &ClusterParams) -> Result<ClusterSet> {
    agglomerate_with(frames, params, Execution::default())
}

pub fn agglomerate_with(
    frames: &FeatureMatrix,
    params: &ClusterParams,
    exec: Execution,
) -> Result<ClusterSet> {
    let times: Vec<f64> = (0..frames.rows()).map(|i| i as f64).collect();
    agglomerate_timed_with(frames, &times, params, exec)
}

/// As [`agglomerate`], with explicit per-frame timestamps in seconds.
pub fn agglomerate_timed(
    frames: &FeatureMatrix,
    times: &[f64],
    params: &ClusterParams,
) -> Result<ClusterSet> {
    agglomerate_timed_with(frames, times, params, Execution::default())
}

fn agglomerate_timed_with(
    frames: &FeatureMatrix,
    times: &[f64],
    params: &ClusterParams,
    exec: Execution,
) -> Result<ClusterSet> {
    params.validate()?;
    let n = frames.rows();
    if n == 0 {
        return Err(Error::Degenerate("no frames to cluster".into()));
    }
    let c = match params.adaptive {
        Some(r) => adaptive_cluster_count(frames, r.min, r.max)?,
        None => params.n_clusters,
    };
    if c > n {
        return Err(Error::param(format!(
            "cluster count {c} exceeds frame count {n}"
        )));
    }
    let t_max = params.t_max.unwrap_or_else(|| default_t_max(n, c));
    let raw = ward_partition_with(frames, c, exec)?;
    let segments = enforce_temporal_timed(&raw.assignment, times, t_max as f64)?;
    Ok(ClusterSet::from_segments(
        segments,
        params.sigma_fraction,
        params.epsilon,
    ))
}

pub fn default_t_max(n_frames: usize, c: usize) -> usize {
    n_frames.div_ceil(c.max(1)).max(1)
}

/// Splits a raw per-frame labelling into contiguous segments of span `<= t_max`
/// with frame `i` at time `i`.
pub fn enforce_temporal(raw_assignment: &[usize], t_max: usize) -> Vec<Segment> {
    let times: Vec<f64> = (0..raw_assignment.len()).map(|i| i as f64).collect();
    enforce_temporal_timed(raw_assignment, &times, t_max as f64)
        .expect("index times are strictly increasing")
}

/// Splits a raw labelling into segments that are contiguous in frame index
/// and span at most `t_max` seconds.
///
/// Each maximal run of equal labels is one candidate. A run that spans too
/// long is cut at its largest internal time gap, recursively; once all gaps
/// in a run are equal it is cut into the fewest near-equal pieces that fit.
pub fn enforce_temporal_timed(
    raw_assignment: &[usize],
    times: &[f64],
    t_max: f64,
) -> Result<Vec<Segment>> {
    if times.len() != raw_assignment.len() {
        return Err(Error::shape(format!(
            "{} timestamps for {} frames",
            times.len(),
            raw_assignment.len()
        )));
    }
    if times.iter().any(|t| !t.is_finite()) || times.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::param("timestamps must be finite and strictly increasing"));
    }
    if t_max.is_nan() || t_max < 0.0 {
        return Err(Error::param("t_max must be non-negative"));
    }
    let mut segments = Vec::new();
    let mut start = 0;
    for i in 1..=raw_assignment.len() {
        if i == raw_assignment.len() || raw_assignment[i] != raw_assignment[start] {
            split_run(times, start, i - 1, t_max, raw_assignment[start], &mut segments);
            start = i;
        }
    }
    Ok(segments)
}

fn split_run(times: &[f64], lo: usize, hi: usize, t_max: f64, id: usize, out: &mut Vec<Segment>) {
    if times[hi] - times[lo] <= t_max {
        out.push(Segment {
            start: lo,
            end: hi,
            cluster_id: id,
        });
        return;
    }
    let mut widest = (f64::NEG_INFINITY, lo);
    let mut narrowest = f64::INFINITY;
    for i in lo..hi {
        let g = times[i + 1] - times[i];
        if g > widest.0 {
            widest = (g, i);
        }
        narrowest = narrowest.min(g);
    }
    if widest.0 > narrowest {
        split_run(times, lo, widest.1, t_max, id, out);
        split_run(times, widest.1 + 1, hi, t_max, id, out);
        return;
    }
    let gap = widest.0;
    let per_piece = (t_max / gap).floor() as usize + 1;
    let n = hi - lo + 1;
    let pieces = n.div_ceil(per_piece);
    let (base, extra) = (n / pieces, n % pieces);
    let mut s = lo;
    for p in 0..pieces {
        let len = base + usize::from(p < extra);
        out.push(Segment {
            start: s,
            end: s + len - 1,
            cluster_id: id,
        });
        s += len;
    }
}

/// Inverted-bell pooling weights over a segment of `n` frames.
///
/// `g_i = exp(−(i − (n−1)/2)² / 2σ²)` with `σ = sigma_fraction · n`, then
/// `w_i ∝ max(g) − g_i + epsilon`, normalized to sum to one. Endpoints get
/// the largest weight, the midpoint the smallest.
pub fn boundary_weights(n: usize, sigma_fraction: f64, epsilon: f64) -> Vec<f64> {
    if n == 0 {
        return Vec::new();
    }
    let mid = (n as f64 - 1.0) / 2.0;
    let sigma = sigma_fraction * n as f64;
    let bell: Vec<f64> = (0..n)
        .map(|i| {
            let x = i as f64 - mid;
            (-(x * x) / (2.0 * sigma * sigma)).exp()
        })
        .collect();
    let peak = bell.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let raw: Vec<f64> = bell.iter().map(|g| peak - g + epsilon).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// Weighted average of each segment's frames.
pub fn pool_clusters(frames: &FeatureMatrix, cs: &ClusterSet) -> Result<PseudoEventFeatures> {
    if cs.assignment.len() != frames.rows() || cs.weights.len() != frames.rows() {
        return Err(Error::shape(format!(
            "cluster set covers {} frames, matrix has {}",
            cs.assignment.len(),
            frames.rows()
        )));
    }
    let d = frames.cols();
    let mut data = vec![0.0; cs.segments.len() * d];
    for (i, seg) in cs.segments.iter().enumerate() {
        let out = &mut data[i * d..(i + 1) * d];
        for f in seg.start..=seg.end {
            let w = cs.weights[f];
            for (o, v) in out.iter_mut().zip(frames.row(f)) {
                *o += w * v;
            }
        }
    }
    Ok(PseudoEventFeatures {
        matrix: FeatureMatrix::new(cs.segments.len(), d, data)?,
        provenance: (0..cs.segments.len()).collect(),
    })
}

/// Picks the cluster count in `[c_min, c_max]` whose contiguous runs best
/// separate the frames.
///
/// The score is a variance-ratio criterion over the runs produced by cutting
/// the Ward tree at `c`: `(B / (k − 1)) / (W / (L − k))` with `B` the
/// between-run and `W` the within-run sum of squares and `k` the run count.
/// A partition with `B = 0` scores 0; one with `W = 0` scores +∞. The first
/// (smallest) `c` attaining the maximum wins.
pub fn adaptive_cluster_count(frames: &FeatureMatrix, c_min: usize, c_max: usize) -> Result<usize> {
    let n = frames.rows();
    if c_min == 0 || c_min > c_max || c_max > n {
        return Err(Error::param(format!(
            "adaptive range [{c_min}, {c_max}] invalid for {n} frames"
        )));
    }
    if c_min == c_max {
        return Ok(c_min);
    }
    let merges = ward_merges(frames, Execution::default());
    let mut best = (f64::NEG_INFINITY, c_min);
    for c in c_min..=c_max {
        let labels = cut_merges(&merges, n, c);
        let runs = enforce_temporal(&labels, usize::MAX);
        let score = variance_ratio(frames, &runs);
        if score > best.0 {
            best = (score, c);
        }
    }
    Ok(best.1)
}

pub(crate) fn variance_ratio(frames: &FeatureMatrix, runs: &[Segment]) -> f64 {
    let n = frames.rows();
    let k = runs.len();
    let global = frames.mean_rows();
    let mut between = 0.0;
    let mut within = 0.0;
    for seg in runs {
        let len = seg.len() as f64;
        let mut mean = vec![0.0; frames.cols()];
        for f in seg.start..=seg.end {
            for (m, v) in mean.iter_mut().zip(frames.row(f)) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= len);
        between += len * sq_dist(&mean, &global);
        for f in seg.start..=seg.end {
            within += sq_dist(frames.row(f), &mean);
        }
    }
    let total = between + within;
    if k <= 1 || between <= 1e-12 * total || total == 0.0 {
        return 0.0;
    }
    if within <= 1e-12 * total || k >= n {
        return f64::INFINITY;
    }
    (between / (k - 1) as f64) / (within / (n - k) as f64)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
