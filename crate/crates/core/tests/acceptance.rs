//! Acceptance suite. Runs every criterion, prints one PASS/FAIL line each and
//! exits non-zero if any failed. Tolerances are pinned as constants below.

mod common;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, ExitCode};
use std::time::{Duration, Instant};

use evtsem::cluster::{self, ClusterParams};
use evtsem::evaluation::{iou_1d, localization_score, EvalConfig, VideoEvents, DEFAULT_IOU_THRESHOLDS};
use evtsem::fusion::{column_softmax, fuse_forward, row_softmax};
use evtsem::matching::{
    assignment_cost, focal_loss, giou_1d, hungarian, total_loss, CaptionInputs, EventTuple, LossConfig,
};
use evtsem::pipeline::{self, PipelineConfig, Preset};
use evtsem::retrieval::{cosine_similarity_matrix, top_k, SentenceBank, TopKMode};
use evtsem::synthetic::{gen_synthetic, SyntheticDataset, SyntheticSpec};
use evtsem::tensorio::{self, FeatureMatrix, SeededRng};

use common::*;

const CLUSTER_RUNS: usize = 200;
const CLUSTER_MAX_FRAMES: usize = 20;
const CLUSTER_TIME_LIMIT: Duration = Duration::from_secs(10);
const TEMPORAL_RUNS: usize = 1000;
const RETRIEVAL_RUNS: usize = 500;
const SCALE_TOL: f64 = 1e-12;
const FD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-4;
const SOFTMAX_TOL: f64 = 1e-9;
const HUNGARIAN_RUNS: usize = 1000;
const LOSS_TOL: f64 = 1e-9;
const FOCAL_TOL: f64 = 1e-6;
const GIOU_PAIRS: usize = 100_000;
const GIOU_TOL: f64 = 1e-12;
const EVAL_DATASETS: usize = 100;
const SYNTH_NOISE: f64 = 0.1;
const SYNTH_F1_FLOOR: f64 = 90.0;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn clustering_oracle() -> Outcome {
    let start = Instant::now();
    let mut mismatches = 0;
    for run in 0..CLUSTER_RUNS {
        let mut rng = SeededRng::new(1000 + run as u64);
        let l = rng.below(1, CLUSTER_MAX_FRAMES + 1);
        let d = rng.below(1, 5);
        let c = rng.below(1, l + 1);
        // even runs: continuous features; odd runs: small integers full of ties
        let (frames, expected) = if run % 2 == 0 {
            let rows = gaussian_rows(&mut rng, l, d);
            let oracle = naive_ward(&rows, c);
            (FeatureMatrix::from_rows(&rows).unwrap(), oracle)
        } else {
            let rows: Vec<Vec<i64>> = (0..l)
                .map(|_| (0..d).map(|_| rng.below(0, 4) as i64 - 1).collect())
                .collect();
            let oracle = exact_ward(&rows, c);
            let float: Vec<Vec<f64>> = rows.iter().map(|r| r.iter().map(|&x| x as f64).collect()).collect();
            (FeatureMatrix::from_rows(&float).unwrap(), oracle)
        };
        let got = cluster::ward_partition(&frames, c).unwrap().assignment;
        if got != expected {
            mismatches += 1;
        }
    }
    let elapsed = start.elapsed();
    outcome(
        mismatches == 0 && elapsed < CLUSTER_TIME_LIMIT,
        format!("{mismatches}/{CLUSTER_RUNS} partitions differ from the naive reference, {elapsed:.2?}"),
    )
}

fn temporal_constraint() -> Outcome {
    let mut violations = 0;
    let mut segments = 0;
    for run in 0..TEMPORAL_RUNS {
        let mut rng = SeededRng::new(2000 + run as u64);
        let l = rng.below(1, 61);
        let frames = gaussian_matrix(&mut rng, l, 3);
        let c = rng.below(1, l + 1);
        if run % 2 == 0 {
            let t_max = rng.below(1, l + 1);
            let params = ClusterParams {
                t_max: Some(t_max),
                ..ClusterParams::with_clusters(c)
            };
            let cs = cluster::agglomerate(&frames, &params).unwrap();
            segments += cs.segments.len();
            violations += cs.segments.iter().filter(|s| s.end - s.start > t_max).count();
        } else {
            let mut t = 0.0;
            let times: Vec<f64> = (0..l)
                .map(|_| {
                    t += 0.1 + 3.0 * rng.uniform();
                    t
                })
                .collect();
            let t_max = 10.0 * rng.uniform();
            let raw = cluster::ward_partition(&frames, c).unwrap().assignment;
            let segs = cluster::enforce_temporal_timed(&raw, &times, t_max).unwrap();
            segments += segs.len();
            violations += segs.iter().filter(|s| times[s.end] - times[s.start] > t_max).count();
        }
    }
    outcome(
        violations == 0,
        format!("{violations} violations over {segments} segments in {TEMPORAL_RUNS} runs"),
    )
}

fn retrieval_oracle() -> Outcome {
    let mut order_mismatch = 0;
    let mut worst_scale: f64 = 0.0;
    for run in 0..RETRIEVAL_RUNS {
        let mut rng = SeededRng::new(3000 + run as u64);
        let c = rng.below(1, 9);
        let m = rng.below(1, 1001);
        let d = rng.below(1, 17);
        let mut bank_rows = gaussian_rows(&mut rng, m, d);
        if run % 3 == 0 {
            // duplicated rows force exact score ties
            for j in 1..m {
                if rng.uniform() < 0.3 {
                    bank_rows[j] = bank_rows[rng.below(0, j)].clone();
                }
            }
        }
        let bank = SentenceBank::unlabeled(FeatureMatrix::from_rows(&bank_rows).unwrap()).unwrap();
        let events = gaussian_matrix(&mut rng, c, d);
        let k = rng.below(1, m + 1);
        let sims = cosine_similarity_matrix(&events, &bank).unwrap();
        let tk = top_k(&sims, k, TopKMode::Hard, 1.0).unwrap();
        for (i, got) in tk.indices.iter().enumerate() {
            if *got != full_sort_topk(sims.row(i), k) {
                order_mismatch += 1;
            }
        }
        let alpha = 10f64.powf(6.0 * rng.uniform() - 3.0);
        let scaled = cosine_similarity_matrix(&events.scaled(alpha).unwrap(), &bank).unwrap();
        for (a, b) in sims.data().iter().zip(scaled.data()) {
            worst_scale = worst_scale.max((a - b).abs());
        }
    }
    outcome(
        order_mismatch == 0 && worst_scale <= SCALE_TOL,
        format!("{order_mismatch} rows differ from full sort; scale deviation {worst_scale:.1e}"),
    )
}

fn fusion_gradients() -> Outcome {
    let mut worst: f64 = 0.0;
    let mut details = Vec::new();
    for (l, c, d) in [(2, 1, 1), (4, 3, 5), (7, 2, 8)] {
        for kw in [1, 3] {
            let (f_v, f_q, w, up) = gradient_instance(l, c, d, kw, (l * 100 + c * 10 + d) as u64);
            let e = max_gradient_error(&f_v, &f_q, &w, &up, FD_STEP);
            details.push(format!("({l},{c},{d})k{kw}={e:.1e}"));
            worst = worst.max(e);
        }
    }
    let mut worst_sum: f64 = 0.0;
    let mut rng = SeededRng::new(4000);
    for _ in 0..100 {
        let (r, c) = (rng.below(1, 12), rng.below(1, 12));
        let scale = 10f64.powf(3.0 * rng.uniform());
        let m = gaussian_matrix(&mut rng, r, c).scaled(scale).unwrap();
        for s in column_softmax(&m).column_sums() {
            worst_sum = worst_sum.max((s - 1.0).abs());
        }
        for row in row_softmax(&m).row_iter() {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    for (l, c, d) in [(2, 1, 1), (4, 3, 5), (7, 2, 8)] {
        let (f_v, f_q, w, _) = gradient_instance(l, c, d, 1, 7);
        let t = fuse_forward(&f_v, &f_q, &w).unwrap();
        for s in t.m_col.column_sums() {
            worst_sum = worst_sum.max((s - 1.0).abs());
        }
        for row in t.m_row.row_iter() {
            worst_sum = worst_sum.max((row.iter().sum::<f64>() - 1.0).abs());
        }
    }
    outcome(
        worst < GRAD_TOL && worst_sum <= SOFTMAX_TOL,
        format!("max rel err {worst:.1e} [{}]; softmax sum deviation {worst_sum:.1e}", details.join(" ")),
    )
}

fn hungarian_oracle() -> Outcome {
    let mut wrong = 0;
    for run in 0..HUNGARIAN_RUNS {
        let mut rng = SeededRng::new(5000 + run as u64);
        let n = rng.below(1, 7);
        let costs: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                (0..n)
                    .map(|_| {
                        if run % 2 == 0 {
                            10.0 * rng.uniform()
                        } else {
                            rng.below(0, 4) as f64
                        }
                    })
                    .collect()
            })
            .collect();
        let m = FeatureMatrix::from_rows(&costs).unwrap();
        let got = assignment_cost(&m, &hungarian(&m));
        let best = brute_force_assignment(&costs);
        if got != best {
            wrong += 1;
        }
    }
    outcome(wrong == 0, format!("{wrong}/{HUNGARIAN_RUNS} assignments above the brute-force minimum"))
}

fn loss_fixed_points() -> Outcome {
    let cfg = LossConfig::default();
    let mut worst: f64 = 0.0;
    for run in 0..50 {
        let mut rng = SeededRng::new(6000 + run as u64);
        let n = rng.below(1, 8);
        let gts: Vec<EventTuple> = (0..n)
            .map(|_| {
                let s = 100.0 * rng.uniform();
                event(s, s + 0.5 + 20.0 * rng.uniform())
            })
            .collect();
        let preds: Vec<EventTuple> = gts
            .iter()
            .map(|g| EventTuple::with_confidence(g.start, g.end, 1.0).unwrap())
            .collect();
        let mut count = vec![0.0; n + 3];
        count[n] = 100.0;
        let vocab = 6;
        let refs: Vec<Vec<usize>> = (0..n)
            .map(|_| (0..rng.below(1, 5)).map(|_| rng.below(0, vocab)).collect())
            .collect();
        let logits: Vec<FeatureMatrix> = refs
            .iter()
            .map(|r| FeatureMatrix::from_fn(r.len(), vocab, |t, v| if v == r[t] { 100.0 } else { 0.0 }).unwrap())
            .collect();
        let caps = CaptionInputs {
            logits: &logits,
            refs: &refs,
        };
        let report = total_loss(&preds, &gts, Some(caps), Some(&count), &cfg).unwrap();
        worst = worst.max(report.l_total);
    }
    let focal = focal_loss(0.5, true, &cfg);
    let expected = -0.25 * 0.25 * 0.5f64.ln();
    let focal_err = (focal - expected).abs();
    outcome(
        worst < LOSS_TOL && focal_err <= FOCAL_TOL,
        format!("max L_total {worst:.1e}; focal(0.5) = {focal:.6} (error {focal_err:.1e})"),
    )
}

fn giou_algebra() -> Outcome {
    let mut rng = SeededRng::new(7000);
    let mut bad = 0;
    let mut worst_oracle: f64 = 0.0;
    for _ in 0..GIOU_PAIRS {
        let mut seg = || {
            let s = 20.0 * rng.uniform();
            (s, s + 1e-3 + 10.0 * rng.uniform())
        };
        let (a, b) = (seg(), seg());
        let (ea, eb) = (event(a.0, a.1), event(b.0, b.1));
        let g = giou_1d(&ea, &eb);
        if g > iou_1d(&ea, &eb) || g != giou_1d(&eb, &ea) {
            bad += 1;
        }
        worst_oracle = worst_oracle.max((g - oracle_giou(a, b)).abs());
    }
    let neg = giou_1d(&event(0.0, 1.0), &event(2.0, 3.0));
    let pos = giou_1d(&event(0.0, 4.0), &event(2.0, 6.0));
    let hand = (neg + 1.0 / 3.0).abs().max((pos - 1.0 / 3.0).abs());
    outcome(
        bad == 0 && hand <= GIOU_TOL && worst_oracle <= GIOU_TOL,
        format!("{bad} pairs break gIoU <= IoU or symmetry; hand values off by {hand:.1e}; oracle gap {worst_oracle:.1e}"),
    )
}

fn evaluation_protocol() -> Outcome {
    let cfg = EvalConfig::default();
    let half_pred = vec![VideoEvents::new("v", vec![event(0.0, 5.0)])];
    let half_gt = vec![VideoEvents::new("v", vec![event(0.0, 10.0)])];
    let half = localization_score(&half_pred, &half_gt, &cfg).unwrap();
    let half_p: Vec<f64> = half.per_threshold.iter().map(|t| t.precision).collect();
    let half_ok = half_p == vec![100.0, 100.0, 0.0, 0.0] && half.precision == 50.0;

    let mut rng = SeededRng::new(8000);
    let mut identity_ok = true;
    let mut monotone_breaks = 0;
    let mut oracle_gap: f64 = 0.0;
    let fine = EvalConfig {
        iou_thresholds: (1..=20).map(|i| i as f64 / 20.0).collect(),
        ..EvalConfig::default()
    };
    for _ in 0..EVAL_DATASETS {
        let videos = rng.below(1, 6);
        let mut preds = Vec::new();
        let mut gts = Vec::new();
        for v in 0..videos {
            let seg = |rng: &mut SeededRng| {
                let s = 50.0 * rng.uniform();
                (s, s + 0.5 + 20.0 * rng.uniform())
            };
            let g: Vec<(f64, f64)> = (0..rng.below(0, 5)).map(|_| seg(&mut rng)).collect();
            let p: Vec<(f64, f64)> = (0..rng.below(0, 5)).map(|_| seg(&mut rng)).collect();
            let id = format!("v{v}");
            gts.push(VideoEvents::new(&id, g.iter().map(|&(s, e)| event(s, e)).collect()));
            preds.push(VideoEvents::new(&id, p.iter().map(|&(s, e)| event(s, e)).collect()));
        }
        let same = localization_score(&gts, &gts, &cfg).unwrap();
        identity_ok &= same.precision == 100.0 && same.recall == 100.0 && same.f1 == 100.0;
        let s = localization_score(&preds, &gts, &fine).unwrap();
        for w in s.per_threshold.windows(2) {
            if w[1].precision > w[0].precision || w[1].recall > w[0].recall {
                monotone_breaks += 1;
            }
        }
        for t in &s.per_threshold {
            let (mut p, mut r) = (0.0, 0.0);
            for (pv, gv) in preds.iter().zip(&gts) {
                let pe: Vec<(f64, f64)> = pv.events.iter().map(|e| (e.start, e.end)).collect();
                let ge: Vec<(f64, f64)> = gv.events.iter().map(|e| (e.start, e.end)).collect();
                let (vp, vr) = oracle_video_pr(&pe, &ge, t.iou_threshold);
                p += vp;
                r += vr;
            }
            let n = gts.len() as f64;
            oracle_gap = oracle_gap.max((p / n - t.precision).abs()).max((r / n - t.recall).abs());
        }
    }
    outcome(
        half_ok && identity_ok && monotone_breaks == 0 && oracle_gap <= 1e-9,
        format!(
            "half-overlap precision {half_p:?} avg {}; identity 100: {identity_ok}; {monotone_breaks} monotonicity breaks; oracle gap {oracle_gap:.1e}",
            half.precision
        ),
    )
}

fn synthetic_config(dir: &Path, spec: &SyntheticSpec) -> PipelineConfig {
    let mut cfg = PipelineConfig::preset(Preset::Anet);
    cfg.frames = dir.join("features");
    cfg.bank = dir.join("bank.tsem");
    cfg.bank_manifest = dir.join("bank_manifest.json");
    cfg.out_dir = dir.join("out");
    cfg.frame_budget = spec.frames;
    cfg.cluster.n_clusters = spec.events;
    cfg.cluster.t_max = Some(spec.frames);
    cfg.retrieval.k = 5;
    cfg
}

fn run_synthetic(spec: &SyntheticSpec, dir: &Path) -> (SyntheticDataset, pipeline::PipelineOutput) {
    let ds = gen_synthetic(spec, dir).unwrap();
    let out = pipeline::run_pipeline(&synthetic_config(dir, spec)).unwrap();
    (ds, out)
}

fn synthetic_end_to_end() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let clean = SyntheticSpec {
        n_videos: 8,
        frames: 60,
        dim: 32,
        events: 4,
        bank_size: 100,
        noise: 0.0,
        seed: 11,
    };
    let (ds, out) = run_synthetic(&clean, &tmp.path().join("clean"));
    let mut exact = true;
    let (mut hits, mut total) = (0, 0);
    for ((v, vc), vr) in ds.manifest.videos.iter().zip(&out.clusters.videos).zip(&out.retrieval.videos) {
        exact &= vc.events() == v.gt_events();
        for (b, e) in v.blocks.iter().zip(&vr.events) {
            total += 1;
            hits += usize::from(e.sentences[0].row == b.bank_row);
        }
    }
    let top1 = 100.0 * hits as f64 / total as f64;

    let noisy = SyntheticSpec {
        n_videos: 20,
        noise: SYNTH_NOISE,
        seed: 12,
        ..clean
    };
    let (ds, out) = run_synthetic(&noisy, &tmp.path().join("noisy"));
    let preds: Vec<VideoEvents> = out
        .clusters
        .videos
        .iter()
        .map(|v| VideoEvents::new(&v.video_id, v.events()))
        .collect();
    let gts: Vec<VideoEvents> = ds
        .manifest
        .videos
        .iter()
        .map(|v| VideoEvents::new(&v.video_id, v.gt_events()))
        .collect();
    let cfg = EvalConfig {
        iou_thresholds: vec![0.5],
        ..EvalConfig::default()
    };
    let f1 = localization_score(&preds, &gts, &cfg).unwrap().f1;
    outcome(
        exact && top1 == 100.0 && f1 >= SYNTH_F1_FLOOR,
        format!("noise 0: boundaries exact {exact}, top-1 {top1:.1}%; noise {SYNTH_NOISE}: F1@0.5 = {f1:.2}"),
    )
}

fn read_tree(root: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().to_path_buf(), std::fs::read(&p).unwrap());
            }
        }
    }
    out
}

/// 2×2 matrix [[1, -2], [0.5, 3]] as a TSEM byte string.
const GOLDEN_TSEM: [u8; 36] = [
    b'T', b'S', b'E', b'M', 1, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 2, 0, 0, 0, 0x00, 0x00, 0x80, 0x3f, 0x00, 0x00,
    0x00, 0xc0, 0x00, 0x00, 0x00, 0x3f, 0x00, 0x00, 0x40, 0x40,
];

fn determinism_and_format() -> Outcome {
    let tmp = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec {
        n_videos: 3,
        frames: 50,
        dim: 16,
        events: 3,
        bank_size: 40,
        noise: 0.05,
        seed: 21,
    };
    let data = tmp.path().join("data");
    gen_synthetic(&spec, &data).unwrap();
    let mut cfg = synthetic_config(&data, &spec);
    cfg.frame_budget = 40;
    let mut trees = Vec::new();
    for run in ["a", "b"] {
        cfg.out_dir = tmp.path().join(run);
        pipeline::run_pipeline(&cfg).unwrap();
        trees.push(read_tree(&cfg.out_dir));
    }
    let identical = trees[0] == trees[1] && trees[0].len() == 3 + spec.n_videos;

    let m = FeatureMatrix::from_rows(&[[1.0, -2.0], [0.5, 3.0]]).unwrap();
    let encoded = tensorio::encode_features(&m).unwrap();
    let decoded = tensorio::decode_features(&GOLDEN_TSEM).unwrap();
    let golden = encoded == GOLDEN_TSEM && decoded == m;
    outcome(
        identical && golden,
        format!("{} files byte-identical across runs: {identical}; golden TSEM bytes: {golden}", trees[0].len()),
    )
}

fn config_fidelity() -> Outcome {
    let anet = PipelineConfig::preset(Preset::Anet);
    let yc2 = PipelineConfig::preset(Preset::Yc2);
    let defaults_ok = anet.retrieval.k == 40
        && (anet.cluster.n_clusters, anet.frame_budget) == (10, 100)
        && (yc2.cluster.n_clusters, yc2.frame_budget) == (20, 200)
        && anet.eval.iou_thresholds == DEFAULT_IOU_THRESHOLDS
        && PipelineConfig::default() == anet;
    let bin = env!("CARGO_BIN_EXE_evtsem");
    let help = |args: &[&str]| {
        let o = Command::new(bin).args(args).output().unwrap();
        (o.status.code(), String::from_utf8_lossy(&o.stdout).into_owned())
    };
    let (top_code, top) = help(&["--help"]);
    let (sub_code, sub) = help(&["pipeline", "--help"]);
    let wanted = ["k=40", "clusters 10 (anet) or 20 (yc2)", "F=100", "F=200", "0.3,0.5,0.7,0.9"];
    let missing: Vec<&str> = wanted.iter().copied().filter(|w| !top.contains(w)).collect();
    let sub_ok = ["[default: 40]", "[default: 10 (anet), 20 (yc2)]", "[default: 100 (anet), 200 (yc2)]", "[default: 0.3,0.5,0.7,0.9]"]
        .iter()
        .all(|w| sub.contains(w));
    outcome(
        defaults_ok && missing.is_empty() && sub_ok && top_code == Some(0) && sub_code == Some(0),
        format!("shipped defaults ok: {defaults_ok}; missing from --help: {missing:?}; subcommand help ok: {sub_ok}"),
    )
}

type Criterion = (&'static str, fn() -> Outcome);

fn main() -> ExitCode {
    let criteria: [Criterion; 11] = [
        ("clustering oracle", clustering_oracle),
        ("temporal constraint", temporal_constraint),
        ("retrieval oracle", retrieval_oracle),
        ("fusion gradients", fusion_gradients),
        ("hungarian oracle", hungarian_oracle),
        ("loss fixed points", loss_fixed_points),
        ("giou algebra", giou_algebra),
        ("evaluation protocol", evaluation_protocol),
        ("synthetic end-to-end", synthetic_end_to_end),
        ("determinism and format", determinism_and_format),
        ("config defaults", config_fidelity),
    ];
    let mut failed = 0;
    for (i, (name, run)) in criteria.iter().enumerate() {
        let o = run();
        let tag = if o.pass { "PASS" } else { "FAIL" };
        println!("acceptance {:>2} {tag} {name}: {}", i + 1, o.detail);
        failed += usize::from(!o.pass);
    }
    println!("acceptance: {}/{} passed", criteria.len() - failed, criteria.len());
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
