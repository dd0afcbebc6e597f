//! Context-aware feature enhancement: query-guided dual attention between
//! frame features and retrieved semantics, with an exact analytic backward
//! pass.
//!
//! Forward, with `L` frames, `c` queries and width `d`:
//!
//! ```text
//! P      = F_v W_v (+ b_v)                    L×d
//! Q      = F_q W_q (+ b_q)                    c×d
//! M      = P Qᵀ / √d                          L×c
//! A      = column_softmax(M)   (columns sum to 1)
//! R      = row_softmax(M)      (rows sum to 1)
//! F_v'   = A F_q                              L×d
//! F_q'   = R Aᵀ F_v                           L×d
//! F̄      = [F_v | F_v' | F_q'] W_merge (+ b)  L×d
//! F_g    = mean of the rows of F_q, replicated to L rows
//! F_out  = conv1d([F_g | F̄], W_conv) (+ b)    L×d
//! ```
//!
//! The convolution runs along time with zero "same" padding; width 1 is a
//! per-frame linear map `2d → d`.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensorio::{self, seeded_gaussian_matrix, FeatureMatrix, SeededRng};

#[derive(Debug, Clone, PartialEq)]
pub struct FusionBiases {
    pub b_v: Vec<f64>,
    pub b_q: Vec<f64>,
    pub b_merge: Vec<f64>,
    pub b_conv: Vec<f64>,
}

impl FusionBiases {
    fn zeros(d: usize) -> Self {
        Self {
            b_v: vec![0.0; d],
            b_q: vec![0.0; d],
            b_merge: vec![0.0; d],
            b_conv: vec![0.0; d],
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionWeights {
    /// `d×d` projection of the frame features.
    pub w_v: FeatureMatrix,
    /// `d×d` projection of the queries.
    pub w_q: FeatureMatrix,
    /// `3d×d` merge projection.
    pub w_merge: FeatureMatrix,
    /// `(kernel_width · 2d)×d`; block `o` holds the tap at time offset `o − kernel_width/2`.
    pub w_conv: FeatureMatrix,
    pub kernel_width: usize,
    pub biases: Option<FusionBiases>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightInit {
    /// Gaussian entries with standard deviation `1/√d`.
    #[default]
    Seeded,
    /// Identity projections; see [`FusionWeights::identity`].
    Identity,
}

impl FusionWeights {
    /// Gaussian weights with scale `1/√d`; biases, when requested, start at zero.
    pub fn seeded(d: usize, seed: u64, kernel_width: usize, with_biases: bool) -> Result<Self> {
        check_kernel(kernel_width)?;
        let scale = 1.0 / (d as f64).sqrt();
        let mut rng = SeededRng::new(seed);
        let w = Self {
            w_v: seeded_gaussian_matrix(&mut rng, d, d, scale)?,
            w_q: seeded_gaussian_matrix(&mut rng, d, d, scale)?,
            w_merge: seeded_gaussian_matrix(&mut rng, 3 * d, d, scale)?,
            w_conv: seeded_gaussian_matrix(&mut rng, kernel_width * 2 * d, d, scale)?,
            kernel_width,
            biases: with_biases.then(|| FusionBiases::zeros(d)),
        };
        Ok(w)
    }

    /// `W_v = W_q = I`, `W_merge = [I; I; I]`, `W_conv = [I; I]` (width 1), no biases,
    /// so that `F_out = F_g + F_v + F_v' + F_q'`.
    pub fn identity(d: usize) -> Self {
        let eye = FeatureMatrix::identity(d);
        let stack3 = FeatureMatrix::vconcat(&[&eye, &eye, &eye]).expect("same width");
        let stack2 = FeatureMatrix::vconcat(&[&eye, &eye]).expect("same width");
        Self {
            w_v: eye.clone(),
            w_q: eye,
            w_merge: stack3,
            w_conv: stack2,
            kernel_width: 1,
            biases: None,
        }
    }

    pub fn dim(&self) -> usize {
        self.w_v.rows()
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        check_kernel(self.kernel_width)?;
        let want = [
            ("w_v", &self.w_v, (d, d)),
            ("w_q", &self.w_q, (d, d)),
            ("w_merge", &self.w_merge, (3 * d, d)),
            ("w_conv", &self.w_conv, (self.kernel_width * 2 * d, d)),
        ];
        for (name, m, shape) in want {
            if m.shape() != shape {
                return Err(Error::shape(format!(
                    "{name} is {:?}, expected {shape:?}",
                    m.shape()
                )));
            }
        }
        if let Some(b) = &self.biases {
            for (name, v) in [
                ("b_v", &b.b_v),
                ("b_q", &b.b_q),
                ("b_merge", &b.b_merge),
                ("b_conv", &b.b_conv),
            ] {
                if v.len() != d {
                    return Err(Error::shape(format!("{name} has length {}, expected {d}", v.len())));
                }
                if v.iter().any(|x| !x.is_finite()) {
                    return Err(Error::Degenerate(format!("{name} is not finite")));
                }
            }
        }
        Ok(())
    }

    /// Writes one `TSEM` file per weight plus `weights.json` into `dir`.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut files = Vec::new();
        for (name, m) in self.named_matrices() {
            let file = format!("{name}.tsem");
            tensorio::write_features(&m, dir.join(&file))?;
            files.push(WeightFile {
                name: name.to_string(),
                file,
            });
        }
        let manifest = WeightManifest {
            dim: self.dim(),
            kernel_width: self.kernel_width,
            biases: self.biases.is_some(),
            files,
        };
        let path = dir.join(WEIGHT_MANIFEST);
        fs::write(&path, serde_json::to_string_pretty(&manifest)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let path = dir.join(WEIGHT_MANIFEST);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let manifest: WeightManifest = serde_json::from_str(&text)?;
        let get = |name: &str| -> Result<FeatureMatrix> {
            let entry = manifest
                .files
                .iter()
                .find(|f| f.name == name)
                .ok_or_else(|| Error::Format(format!("weight manifest lacks {name}")))?;
            tensorio::read_features(dir.join(&entry.file))
        };
        let vector = |name: &str| -> Result<Vec<f64>> { Ok(get(name)?.into_data()) };
        let biases = if manifest.biases {
            Some(FusionBiases {
                b_v: vector("b_v")?,
                b_q: vector("b_q")?,
                b_merge: vector("b_merge")?,
                b_conv: vector("b_conv")?,
            })
        } else {
            None
        };
        let w = Self {
            w_v: get("w_v")?,
            w_q: get("w_q")?,
            w_merge: get("w_merge")?,
            w_conv: get("w_conv")?,
            kernel_width: manifest.kernel_width,
            biases,
        };
        w.validate()?;
        if w.dim() != manifest.dim {
            return Err(Error::Format(format!(
                "manifest dim {} but weights have dim {}",
                manifest.dim,
                w.dim()
            )));
        }
        Ok(w)
    }

    fn named_matrices(&self) -> Vec<(&'static str, FeatureMatrix)> {
        let mut out = vec![
            ("w_v", self.w_v.clone()),
            ("w_q", self.w_q.clone()),
            ("w_merge", self.w_merge.clone()),
            ("w_conv", self.w_conv.clone()),
        ];
        if let Some(b) = &self.biases {
            let d = self.dim();
            for (name, v) in [
                ("b_v", &b.b_v),
                ("b_q", &b.b_q),
                ("b_merge", &b.b_merge),
                ("b_conv", &b.b_conv),
            ] {
                out.push((name, FeatureMatrix::new(1, d, v.clone()).expect("validated")));
            }
        }
        out
    }
}

pub const WEIGHT_MANIFEST: &str = "weights.json";

#[derive(Debug, Serialize, Deserialize)]
struct WeightManifest {
    dim: usize,
    kernel_width: usize,
    biases: bool,
    files: Vec<WeightFile>,
}

#[derive(Debug, Serialize, Deserialize)]
struct WeightFile {
    name: String,
    file: String,
}

fn check_kernel(k: usize) -> Result<()> {
    if k.is_multiple_of(2) {
        return Err(Error::param(format!("kernel width must be odd, got {k}")));
    }
    Ok(())
}

/// Every intermediate of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct FusionTrace {
    pub m_raw: FeatureMatrix,
    pub m_col: FeatureMatrix,
    pub m_row: FeatureMatrix,
    pub f_v_prime: FeatureMatrix,
    pub f_q_prime: FeatureMatrix,
    pub f_bar: FeatureMatrix,
    pub f_g: Vec<f64>,
    pub f_out: FeatureMatrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FusionGradients {
    pub f_v: FeatureMatrix,
    pub f_q: FeatureMatrix,
    pub w_v: FeatureMatrix,
    pub w_q: FeatureMatrix,
    pub w_merge: FeatureMatrix,
    pub w_conv: FeatureMatrix,
    /// Present only when the weights carry biases.
    pub biases: Option<FusionBiases>,
}

/// Softmax down each column.
pub fn column_softmax(m: &FeatureMatrix) -> FeatureMatrix {
    row_softmax(&m.transpose()).transpose()
}

/// Softmax along each row, max-subtracted.
pub fn row_softmax(m: &FeatureMatrix) -> FeatureMatrix {
    let mut out = m.clone();
    let cols = m.cols();
    if cols == 0 {
        return out;
    }
    for row in out.data_mut().chunks_mut(cols) {
        let peak = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for v in row.iter_mut() {
            *v = (*v - peak).exp();
            total += *v;
        }
        row.iter_mut().for_each(|v| *v /= total);
    }
    out
}

fn linear(x: &FeatureMatrix, w: &FeatureMatrix, b: Option<&[f64]>) -> Result<FeatureMatrix> {
    let y = x.matmul(w)?;
    match b {
        Some(b) => y.add_row_vector(b),
        None => Ok(y),
    }
}

/// Rows of `x` stacked with their time-shifted neighbours: row `t` is
/// `[x[t−h] | … | x[t+h]]` with zeros past either end.
fn unfold_time(x: &FeatureMatrix, kernel_width: usize) -> FeatureMatrix {
    if kernel_width == 1 {
        return x.clone();
    }
    let (l, w) = x.shape();
    let h = kernel_width / 2;
    let mut out = FeatureMatrix::zeros(l, kernel_width * w);
    for t in 0..l {
        let row = out.row_mut(t);
        for o in 0..kernel_width {
            let src = t as isize + o as isize - h as isize;
            if src >= 0 && (src as usize) < l {
                row[o * w..(o + 1) * w].copy_from_slice(x.row(src as usize));
            }
        }
    }
    out
}

/// Adjoint of [`unfold_time`].
fn fold_time(u: &FeatureMatrix, kernel_width: usize, width: usize) -> FeatureMatrix {
    if kernel_width == 1 {
        return u.clone();
    }
    let l = u.rows();
    let h = kernel_width / 2;
    let mut out = FeatureMatrix::zeros(l, width);
    for t in 0..l {
        for o in 0..kernel_width {
            let src = t as isize + o as isize - h as isize;
            if src >= 0 && (src as usize) < l {
                let g = &u.row(t)[o * width..(o + 1) * width];
                for (a, b) in out.row_mut(src as usize).iter_mut().zip(g) {
                    *a += b;
                }
            }
        }
    }
    out
}

fn check_inputs(f_v: &FeatureMatrix, f_q: &FeatureMatrix, w: &FusionWeights) -> Result<usize> {
    w.validate()?;
    let d = w.dim();
    if f_v.cols() != d || f_q.cols() != d {
        return Err(Error::shape(format!(
            "frame dim {} and query dim {} must equal weight dim {d}",
            f_v.cols(),
            f_q.cols()
        )));
    }
    if f_v.rows() == 0 || f_q.rows() == 0 {
        return Err(Error::shape("fusion needs at least one frame and one query"));
    }
    Ok(d)
}

pub fn fuse_forward(f_v: &FeatureMatrix, f_q: &FeatureMatrix, w: &FusionWeights) -> Result<FusionTrace> {
    let d = check_inputs(f_v, f_q, w)?;
    let l = f_v.rows();
    let b = w.biases.as_ref();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    let p = linear(f_v, &w.w_v, b.map(|b| b.b_v.as_slice()))?;
    let q = linear(f_q, &w.w_q, b.map(|b| b.b_q.as_slice()))?;
    let m_raw = p.matmul_transposed(&q)?.scaled(inv_sqrt_d)?;
    let m_col = column_softmax(&m_raw);
    let m_row = row_softmax(&m_raw);

    let f_v_prime = m_col.matmul(f_q)?;
    let attended = m_col.transposed_matmul(f_v)?;
    let f_q_prime = m_row.matmul(&attended)?;

    let merged_in = FeatureMatrix::hconcat(&[f_v, &f_v_prime, &f_q_prime])?;
    let f_bar = linear(&merged_in, &w.w_merge, b.map(|b| b.b_merge.as_slice()))?;

    let f_g = f_q.mean_rows();
    let global = FeatureMatrix::from_fn(l, d, |_, j| f_g[j])?;
    let conv_in = FeatureMatrix::hconcat(&[&global, &f_bar])?;
    let f_out = linear(
        &unfold_time(&conv_in, w.kernel_width),
        &w.w_conv,
        b.map(|b| b.b_conv.as_slice()),
    )?;

    Ok(FusionTrace {
        m_raw,
        m_col,
        m_row,
        f_v_prime,
        f_q_prime,
        f_bar,
        f_g,
        f_out,
    })
}

/// Backward of softmax along rows: `dX = Y ⊙ (dY − rowsum(dY ⊙ Y))`.
fn row_softmax_backward(y: &FeatureMatrix, dy: &FeatureMatrix) -> Result<FeatureMatrix> {
    let (r, c) = y.shape();
    let mut data = Vec::with_capacity(r * c);
    for i in 0..r {
        let (yr, gr) = (y.row(i), dy.row(i));
        let inner: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
        data.extend(yr.iter().zip(gr).map(|(a, b)| a * (b - inner)));
    }
    FeatureMatrix::new(r, c, data)
}

fn column_softmax_backward(y: &FeatureMatrix, dy: &FeatureMatrix) -> Result<FeatureMatrix> {
    Ok(row_softmax_backward(&y.transpose(), &dy.transpose())?.transpose())
}

/// Exact gradients of `⟨upstream, F_out⟩` with respect to both inputs and
/// every weight. `trace` must come from [`fuse_forward`] on the same inputs.
pub fn fuse_backward(
    trace: &FusionTrace,
    f_v: &FeatureMatrix,
    f_q: &FeatureMatrix,
    w: &FusionWeights,
    upstream: &FeatureMatrix,
) -> Result<FusionGradients> {
    let d = check_inputs(f_v, f_q, w)?;
    let (l, c) = (f_v.rows(), f_q.rows());
    if upstream.shape() != (l, d) {
        return Err(Error::shape(format!(
            "upstream gradient is {:?}, expected {:?}",
            upstream.shape(),
            (l, d)
        )));
    }
    if trace.m_raw.shape() != (l, c) {
        return Err(Error::shape("trace does not match inputs"));
    }
    let b = w.biases.as_ref();
    let inv_sqrt_d = 1.0 / (d as f64).sqrt();

    // conv
    let global = FeatureMatrix::from_fn(l, d, |_, j| trace.f_g[j])?;
    let conv_in = FeatureMatrix::hconcat(&[&global, &trace.f_bar])?;
    let unfolded = unfold_time(&conv_in, w.kernel_width);
    let g_w_conv = unfolded.transposed_matmul(upstream)?;
    let g_b_conv = upstream.column_sums();
    let g_conv_in = fold_time(&upstream.matmul_transposed(&w.w_conv)?, w.kernel_width, 2 * d);
    let g_global = g_conv_in.column_block(0, d)?;
    let g_f_bar = g_conv_in.column_block(d, d)?;

    // F_g = mean of F_q rows
    let g_fg = g_global.column_sums();
    let mut g_f_q = FeatureMatrix::from_fn(c, d, |_, j| g_fg[j] / c as f64)?;

    // merge
    let merged_in = FeatureMatrix::hconcat(&[f_v, &trace.f_v_prime, &trace.f_q_prime])?;
    let g_w_merge = merged_in.transposed_matmul(&g_f_bar)?;
    let g_b_merge = g_f_bar.column_sums();
    let g_merged_in = g_f_bar.matmul_transposed(&w.w_merge)?;
    let mut g_f_v = g_merged_in.column_block(0, d)?;
    let g_f_v_prime = g_merged_in.column_block(d, d)?;
    let g_f_q_prime = g_merged_in.column_block(2 * d, d)?;

    // F_v' = A F_q
    let mut g_a = g_f_v_prime.matmul_transposed(f_q)?;
    g_f_q = g_f_q.add(&trace.m_col.transposed_matmul(&g_f_v_prime)?)?;

    // F_q' = R T, T = Aᵀ F_v
    let attended = trace.m_col.transposed_matmul(f_v)?;
    let g_r = g_f_q_prime.matmul_transposed(&attended)?;
    let g_attended = trace.m_row.transposed_matmul(&g_f_q_prime)?;
    g_a = g_a.add(&f_v.matmul_transposed(&g_attended)?)?;
    g_f_v = g_f_v.add(&trace.m_col.matmul(&g_attended)?)?;

    // softmaxes
    let g_m = row_softmax_backward(&trace.m_row, &g_r)?
        .add(&column_softmax_backward(&trace.m_col, &g_a)?)?
        .scaled(inv_sqrt_d)?;

    // M = P Qᵀ / √d
    let p = linear(f_v, &w.w_v, b.map(|b| b.b_v.as_slice()))?;
    let q = linear(f_q, &w.w_q, b.map(|b| b.b_q.as_slice()))?;
    let g_p = g_m.matmul(&q)?;
    let g_q = g_m.transposed_matmul(&p)?;

    let g_w_v = f_v.transposed_matmul(&g_p)?;
    let g_w_q = f_q.transposed_matmul(&g_q)?;
    g_f_v = g_f_v.add(&g_p.matmul_transposed(&w.w_v)?)?;
    g_f_q = g_f_q.add(&g_q.matmul_transposed(&w.w_q)?)?;

    let biases = b.map(|_| FusionBiases {
        b_v: g_p.column_sums(),
        b_q: g_q.column_sums(),
        b_merge: g_b_merge,
        b_conv: g_b_conv,
    });

    Ok(FusionGradients {
        f_v: g_f_v,
        f_q: g_f_q,
        w_v: g_w_v,
        w_q: g_w_q,
        w_merge: g_w_merge,
        w_conv: g_w_conv,
        biases,
    })
}
