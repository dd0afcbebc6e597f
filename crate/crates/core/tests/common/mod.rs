//! Reference implementations written for clarity rather than speed. None of
//! them call into the library code they check.

#![allow(dead_code)]

use evtsem::fusion::{fuse_forward, FusionWeights};
use evtsem::matching::EventTuple;
use evtsem::tensorio::{FeatureMatrix, SeededRng};

pub fn gaussian_rows(rng: &mut SeededRng, rows: usize, cols: usize) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| (0..cols).map(|_| rng.standard_normal()).collect())
        .collect()
}

pub fn gaussian_matrix(rng: &mut SeededRng, rows: usize, cols: usize) -> FeatureMatrix {
    FeatureMatrix::from_rows(&gaussian_rows(rng, rows, cols)).unwrap()
}

fn first_appearance(cluster_of: &[usize]) -> Vec<usize> {
    let mut map = std::collections::HashMap::new();
    cluster_of
        .iter()
        .map(|&c| {
            let next = map.len();
            *map.entry(c).or_insert(next)
        })
        .collect()
}

/// Ward agglomeration recomputing every pair cost from centroids at every
/// step. Clusters are named by their smallest member; the first pair in
/// `(name_a, name_b)` order among the cheapest wins.
pub fn naive_ward(frames: &[Vec<f64>], c: usize) -> Vec<usize> {
    let mut clusters: Vec<Vec<usize>> = (0..frames.len()).map(|i| vec![i]).collect();
    while clusters.len() > c {
        let centroid = |m: &[usize]| -> Vec<f64> {
            let d = frames[0].len();
            let mut s = vec![0.0; d];
            for &i in m {
                for (acc, x) in s.iter_mut().zip(&frames[i]) {
                    *acc += x;
                }
            }
            s.iter().map(|v| v / m.len() as f64).collect()
        };
        let mut best: Option<(f64, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                let (ma, mb) = (centroid(&clusters[a]), centroid(&clusters[b]));
                let (na, nb) = (clusters[a].len() as f64, clusters[b].len() as f64);
                let dist: f64 = ma.iter().zip(&mb).map(|(x, y)| (x - y).powi(2)).sum();
                let cost = na * nb / (na + nb) * dist;
                if best.is_none_or(|(bc, _, _)| cost < bc) {
                    best = Some((cost, a, b));
                }
            }
        }
        let (_, a, b) = best.unwrap();
        let absorbed = clusters.remove(b);
        clusters[a].extend(absorbed);
    }
    label_clusters(frames.len(), &clusters)
}

fn label_clusters(n: usize, clusters: &[Vec<usize>]) -> Vec<usize> {
    let mut of = vec![0; n];
    for (k, m) in clusters.iter().enumerate() {
        for &i in m {
            of[i] = k;
        }
    }
    first_appearance(&of)
}

/// Ward agglomeration on integer features with costs compared as exact
/// rationals `‖n_b S_a − n_a S_b‖² / (n_a n_b (n_a + n_b))`, so ties are
/// real ties.
pub fn exact_ward(frames: &[Vec<i64>], c: usize) -> Vec<usize> {
    let mut clusters: Vec<Vec<usize>> = (0..frames.len()).map(|i| vec![i]).collect();
    while clusters.len() > c {
        let sum = |m: &[usize]| -> Vec<i128> {
            let mut s = vec![0i128; frames[0].len()];
            for &i in m {
                for (acc, &x) in s.iter_mut().zip(&frames[i]) {
                    *acc += x as i128;
                }
            }
            s
        };
        let mut best: Option<(i128, i128, usize, usize)> = None;
        for a in 0..clusters.len() {
            for b in (a + 1)..clusters.len() {
                let (sa, sb) = (sum(&clusters[a]), sum(&clusters[b]));
                let (na, nb) = (clusters[a].len() as i128, clusters[b].len() as i128);
                let num: i128 = sa.iter().zip(&sb).map(|(x, y)| (nb * x - na * y).pow(2)).sum();
                let den = na * nb * (na + nb);
                let better = match best {
                    None => true,
                    Some((bn, bd, _, _)) => num * bd < bn * den,
                };
                if better {
                    best = Some((num, den, a, b));
                }
            }
        }
        let (_, _, a, b) = best.unwrap();
        let absorbed = clusters.remove(b);
        clusters[a].extend(absorbed);
    }
    label_clusters(frames.len(), &clusters)
}

/// Fewest segments a labelling needs when each segment may hold at most
/// `t_max + 1` consecutive frames of one label.
pub fn min_segments(raw: &[usize], t_max: usize) -> usize {
    let mut total = 0;
    let mut run: usize = 1;
    for i in 1..=raw.len() {
        if i < raw.len() && raw[i] == raw[i - 1] {
            run += 1;
        } else {
            total += run.div_ceil(t_max + 1);
            run = 1;
        }
    }
    total
}

pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    dot / (na * nb)
}

/// Full stable sort by score descending, ties by index, then truncation.
pub fn full_sort_topk(scores: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].partial_cmp(&scores[a]).unwrap().then(a.cmp(&b)));
    idx.truncate(k);
    idx
}

/// Minimum assignment cost over every injective map from the smaller side.
pub fn brute_force_assignment(costs: &[Vec<f64>]) -> f64 {
    let rows = costs.len();
    let cols = costs.first().map_or(0, |r| r.len());
    if rows == 0 || cols == 0 {
        return 0.0;
    }
    let transpose = rows > cols;
    let (n, m) = if transpose { (cols, rows) } else { (rows, cols) };
    let at = |i: usize, j: usize| if transpose { costs[j][i] } else { costs[i][j] };
    fn go(
        i: usize,
        n: usize,
        m: usize,
        used: &mut Vec<bool>,
        acc: f64,
        at: &dyn Fn(usize, usize) -> f64,
        best: &mut f64,
    ) {
        if i == n {
            *best = best.min(acc);
            return;
        }
        for j in 0..m {
            if !used[j] {
                used[j] = true;
                go(i + 1, n, m, used, acc + at(i, j), at, best);
                used[j] = false;
            }
        }
    }
    let mut best = f64::INFINITY;
    go(0, n, m, &mut vec![false; m], 0.0, &at, &mut best);
    best
}

/// Every permutation's cost for a square matrix, summed in row order.
pub fn permutation_costs(costs: &[Vec<f64>]) -> Vec<f64> {
    let n = costs.len();
    let mut out = Vec::new();
    let mut perm: Vec<usize> = (0..n).collect();
    fn heap(k: usize, perm: &mut Vec<usize>, costs: &[Vec<f64>], out: &mut Vec<f64>) {
        if k <= 1 {
            out.push(perm.iter().enumerate().map(|(i, &j)| costs[i][j]).sum());
            return;
        }
        heap(k - 1, perm, costs, out);
        for i in 0..k - 1 {
            if k.is_multiple_of(2) {
                perm.swap(i, k - 1);
            } else {
                perm.swap(0, k - 1);
            }
            heap(k - 1, perm, costs, out);
        }
    }
    heap(n, &mut perm, costs, &mut out);
    out
}

pub fn oracle_iou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

pub fn oracle_giou(a: (f64, f64), b: (f64, f64)) -> f64 {
    let inter = (a.1.min(b.1) - a.0.max(b.0)).max(0.0);
    let union = (a.1 - a.0) + (b.1 - b.0) - inter;
    let hull = a.1.max(b.1) - a.0.min(b.0);
    inter / union - (hull - union) / hull
}

/// Threshold-wise precision and recall for one video under max-IoU
/// matching, as percentages.
pub fn oracle_video_pr(preds: &[(f64, f64)], gts: &[(f64, f64)], tau: f64) -> (f64, f64) {
    let hit = |x: &(f64, f64), others: &[(f64, f64)]| others.iter().any(|o| oracle_iou(*x, *o) >= tau);
    let precision = if preds.is_empty() {
        if gts.is_empty() {
            100.0
        } else {
            0.0
        }
    } else {
        100.0 * preds.iter().filter(|p| hit(p, gts)).count() as f64 / preds.len() as f64
    };
    let recall = if gts.is_empty() {
        100.0
    } else {
        100.0 * gts.iter().filter(|g| hit(g, preds)).count() as f64 / gts.len() as f64
    };
    (precision, recall)
}

/// Round-half-up `i (L−1) / (F−1)` computed in floating point.
pub fn linspace_indices(l: usize, f: usize) -> Vec<usize> {
    if f == 1 {
        return vec![0];
    }
    (0..f)
        .map(|i| (i as f64 * (l - 1) as f64 / (f - 1) as f64 + 0.5).floor() as usize)
        .collect()
}

/// Inverted-bell weights straight from the formula.
pub fn oracle_weights(n: usize, sigma_fraction: f64, epsilon: f64) -> Vec<f64> {
    let mid = (n as f64 - 1.0) / 2.0;
    let s = sigma_fraction * n as f64;
    let g: Vec<f64> = (0..n)
        .map(|i| (-((i as f64 - mid).powi(2)) / (2.0 * s * s)).exp())
        .collect();
    let top = g.iter().cloned().fold(f64::MIN, f64::max);
    let z: f64 = g.iter().map(|v| top - v + epsilon).sum();
    g.iter().map(|v| (top - v + epsilon) / z).collect()
}

pub fn event(start: f64, end: f64) -> EventTuple {
    EventTuple::new(start, end).unwrap()
}

/// Relative error with a floor so that structurally zero gradients compare
/// on an absolute scale.
pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6)
}

fn perturbed(m: &FeatureMatrix, idx: usize, delta: f64) -> FeatureMatrix {
    let mut data = m.data().to_vec();
    data[idx] += delta;
    FeatureMatrix::new(m.rows(), m.cols(), data).unwrap()
}

fn objective(f_v: &FeatureMatrix, f_q: &FeatureMatrix, w: &FusionWeights, up: &FeatureMatrix) -> f64 {
    let out = fuse_forward(f_v, f_q, w).unwrap().f_out;
    out.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
}

/// Central differences of `⟨up, F_out⟩` for every input, weight and bias
/// entry, keyed by parameter name, in row-major order.
pub fn numeric_gradients(
    f_v: &FeatureMatrix,
    f_q: &FeatureMatrix,
    w: &FusionWeights,
    up: &FeatureMatrix,
    h: f64,
) -> Vec<(&'static str, Vec<f64>)> {
    let diff = |plus: f64, minus: f64| (plus - minus) / (2.0 * h);
    let mut out = Vec::new();
    out.push((
        "f_v",
        (0..f_v.data().len())
            .map(|i| diff(objective(&perturbed(f_v, i, h), f_q, w, up), objective(&perturbed(f_v, i, -h), f_q, w, up)))
            .collect(),
    ));
    out.push((
        "f_q",
        (0..f_q.data().len())
            .map(|i| diff(objective(f_v, &perturbed(f_q, i, h), w, up), objective(f_v, &perturbed(f_q, i, -h), w, up)))
            .collect(),
    ));
    type Slot = fn(&mut FusionWeights) -> &mut FeatureMatrix;
    let slots: [(&'static str, Slot); 4] = [
        ("w_v", |w| &mut w.w_v),
        ("w_q", |w| &mut w.w_q),
        ("w_merge", |w| &mut w.w_merge),
        ("w_conv", |w| &mut w.w_conv),
    ];
    for (name, slot) in slots {
        let len = slot(&mut w.clone()).data().len();
        let grads = (0..len)
            .map(|i| {
                let mut wp = w.clone();
                let m = slot(&mut wp);
                *m = perturbed(m, i, h);
                let mut wm = w.clone();
                let m = slot(&mut wm);
                *m = perturbed(m, i, -h);
                diff(objective(f_v, f_q, &wp, up), objective(f_v, f_q, &wm, up))
            })
            .collect();
        out.push((name, grads));
    }
    if w.biases.is_some() {
        type BSlot = fn(&mut FusionWeights) -> &mut Vec<f64>;
        let bslots: [(&'static str, BSlot); 4] = [
            ("b_v", |w| &mut w.biases.as_mut().unwrap().b_v),
            ("b_q", |w| &mut w.biases.as_mut().unwrap().b_q),
            ("b_merge", |w| &mut w.biases.as_mut().unwrap().b_merge),
            ("b_conv", |w| &mut w.biases.as_mut().unwrap().b_conv),
        ];
        for (name, slot) in bslots {
            let len = slot(&mut w.clone()).len();
            let grads = (0..len)
                .map(|i| {
                    let mut wp = w.clone();
                    slot(&mut wp)[i] += h;
                    let mut wm = w.clone();
                    slot(&mut wm)[i] -= h;
                    diff(objective(f_v, f_q, &wp, up), objective(f_v, f_q, &wm, up))
                })
                .collect();
            out.push((name, grads));
        }
    }
    out
}

/// Largest relative error between `fuse_backward` and central differences.
pub fn max_gradient_error(
    f_v: &FeatureMatrix,
    f_q: &FeatureMatrix,
    w: &FusionWeights,
    up: &FeatureMatrix,
    h: f64,
) -> f64 {
    let trace = fuse_forward(f_v, f_q, w).unwrap();
    let g = evtsem::fusion::fuse_backward(&trace, f_v, f_q, w, up).unwrap();
    let mut analytic: Vec<(&str, Vec<f64>)> = vec![
        ("f_v", g.f_v.data().to_vec()),
        ("f_q", g.f_q.data().to_vec()),
        ("w_v", g.w_v.data().to_vec()),
        ("w_q", g.w_q.data().to_vec()),
        ("w_merge", g.w_merge.data().to_vec()),
        ("w_conv", g.w_conv.data().to_vec()),
    ];
    if let Some(b) = &g.biases {
        analytic.push(("b_v", b.b_v.clone()));
        analytic.push(("b_q", b.b_q.clone()));
        analytic.push(("b_merge", b.b_merge.clone()));
        analytic.push(("b_conv", b.b_conv.clone()));
    }
    let numeric = numeric_gradients(f_v, f_q, w, up, h);
    assert_eq!(analytic.len(), numeric.len());
    let mut worst: f64 = 0.0;
    for ((na, a), (nn, n)) in analytic.iter().zip(&numeric) {
        assert_eq!(na, nn);
        assert_eq!(a.len(), n.len(), "{na}");
        for (x, y) in a.iter().zip(n) {
            worst = worst.max(rel_err(*x, *y));
        }
    }
    worst
}

/// Seeded instance for gradient checks: inputs, weights with non-zero
/// biases, and an upstream gradient.
pub fn gradient_instance(
    l: usize,
    c: usize,
    d: usize,
    kernel_width: usize,
    seed: u64,
) -> (FeatureMatrix, FeatureMatrix, FusionWeights, FeatureMatrix) {
    let mut rng = SeededRng::new(seed);
    let f_v = gaussian_matrix(&mut rng, l, d);
    let f_q = gaussian_matrix(&mut rng, c, d);
    let mut w = FusionWeights::seeded(d, seed, kernel_width, true).unwrap();
    if let Some(b) = w.biases.as_mut() {
        for v in [&mut b.b_v, &mut b.b_q, &mut b.b_merge, &mut b.b_conv] {
            for x in v.iter_mut() {
                *x = 0.1 * rng.standard_normal();
            }
        }
    }
    let up = gaussian_matrix(&mut rng, l, d);
    (f_v, f_q, w, up)
}
