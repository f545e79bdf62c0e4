//! Evaluation metrics: plug-in discrete mutual information and entropy,
//! entropy-normalized MI over matched dimensions, the mutual information gap
//! (MIG), the M1-M4 conditioning diagnostics, and the Fréchet distance
//! between Gaussian fits of two feature sets.
//!
//! Continuous variables are discretized into equal-width bins (default 20)
//! before any information quantity is computed; when the inputs are already
//! discrete and the bins align, the binned estimate equals the exact
//! discrete MI. Covariances use the population (1/N) convention.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::stage1::Stage1Model;
use crate::stage2::Stage2Model;
use crate::tensor::Tensor;

pub const DEFAULT_BINS: usize = 20;

/// Joint count table over (row value, column value).
#[derive(Debug, Clone)]
pub struct Histogram2 {
    counts: Vec<f64>,
    rows: usize,
    cols: usize,
}

impl Histogram2 {
    pub fn new(rows: usize, cols: usize) -> Self {
        Histogram2 {
            counts: vec![0.0; rows * cols],
            rows,
            cols,
        }
    }

    pub fn from_labels(a: &[usize], b: &[usize], rows: usize, cols: usize) -> Result<Self> {
        if a.len() != b.len() {
            return Err(Error::dim("label vectors differ in length".to_string()));
        }
        let mut h = Histogram2::new(rows, cols);
        for (&x, &y) in a.iter().zip(b) {
            if x >= rows || y >= cols {
                return Err(Error::dim(format!("label ({x}, {y}) outside {rows}x{cols}")));
            }
            h.counts[x * cols + y] += 1.0;
        }
        Ok(h)
    }

    pub fn add(&mut self, r: usize, c: usize, w: f64) {
        self.counts[r * self.cols + c] += w;
    }

    pub fn total(&self) -> f64 {
        self.counts.iter().sum()
    }

    pub fn transposed(&self) -> Histogram2 {
        let mut t = Histogram2::new(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.counts[c * self.rows + r] = self.counts[r * self.cols + c];
            }
        }
        t
    }

    pub fn row_marginal(&self) -> Vec<f64> {
        let mut out = vec![0.0; self.rows];
        for r in 0..self.rows {
            for c in 0..self.cols {
                out[r] += self.counts[r * self.cols + c];
            }
        }
        out
    }

    pub fn col_marginal(&self) -> Vec<f64> {
        self.transposed().row_marginal()
    }
}

/// Entropy in nats of the distribution proportional to `counts`
/// (`0 log 0 = 0`).
pub fn entropy(counts: &[f64]) -> Result<f64> {
    if counts.iter().any(|&c| c < 0.0) {
        return Err(Error::domain("negative count".to_string()));
    }
    let total: f64 = counts.iter().sum();
    if total <= 0.0 {
        return Err(Error::domain("entropy of empty counts".to_string()));
    }
    let mut h = 0.0;
    for &c in counts {
        if c > 0.0 {
            let p = c / total;
            h -= p * p.ln();
        }
    }
    Ok(h)
}

/// Plug-in mutual information in nats of a joint count table.
pub fn discrete_mi(h: &Histogram2) -> Result<f64> {
    let total = h.total();
    if total <= 0.0 {
        return Err(Error::domain("mutual information of empty counts".to_string()));
    }
    let pr = h.row_marginal();
    let pc = h.col_marginal();
    let mut mi = 0.0;
    for r in 0..h.rows {
        for c in 0..h.cols {
            let pj = h.counts[r * h.cols + c] / total;
            if pj > 0.0 {
                mi += pj * (pj * total * total / (pr[r] * pc[c])).ln();
            }
        }
    }
    Ok(mi.max(0.0))
}

/// Equal-width binning of a column into `bins` bins over its observed range.
/// A constant column maps everything to bin 0.
pub fn bin_equal_width(values: &[f64], bins: usize) -> Vec<usize> {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return vec![0; values.len()];
    }
    let width = (hi - lo) / bins as f64;
    values
        .iter()
        .map(|&v| (((v - lo) / width) as usize).min(bins - 1))
        .collect()
}

fn column<T: Scalar>(x: &Tensor<T>, j: usize) -> Result<Vec<f64>> {
    let (n, d) = x.dims2("column")?;
    if j >= d {
        return Err(Error::dim(format!("column {j} out of {d}")));
    }
    Ok((0..n).map(|i| x.data()[i * d + j].to64()).collect())
}

#[derive(Debug, Clone)]
pub struct NormalizedMi {
    pub value: f64,
    /// Factor dimensions skipped because their binned entropy was zero.
    pub skipped: Vec<usize>,
}

/// Entropy-normalized MI over matched dimensions:
/// `mean_i I(latent_i; factor_i) / H(factor_i)`, both sides binned.
/// Zero-entropy factor dimensions are excluded from the mean and reported.
pub fn normalized_mi<T: Scalar>(
    latents: &Tensor<T>,
    factors: &Tensor<T>,
    bins: usize,
) -> Result<NormalizedMi> {
    let (n, dl) = latents.dims2("normalized_mi latents")?;
    let (nf, df) = factors.dims2("normalized_mi factors")?;
    if n != nf || dl != df {
        return Err(Error::dim(format!(
            "latents [{n} x {dl}] vs factors [{nf} x {df}]"
        )));
    }
    if bins < 2 {
        return Err(Error::contract("need at least 2 bins".to_string()));
    }
    let mut total = 0.0;
    let mut used = 0usize;
    let mut skipped = Vec::new();
    for j in 0..dl {
        let lb = bin_equal_width(&column(latents, j)?, bins);
        let fb = bin_equal_width(&column(factors, j)?, bins);
        let joint = Histogram2::from_labels(&lb, &fb, bins, bins)?;
        let hf = entropy(&joint.col_marginal())?;
        if hf <= 0.0 {
            skipped.push(j);
            continue;
        }
        total += discrete_mi(&joint)? / hf;
        used += 1;
    }
    if used == 0 {
        return Err(Error::domain("every factor dimension has zero entropy".to_string()));
    }
    Ok(NormalizedMi {
        value: total / used as f64,
        skipped,
    })
}

/// Mutual information gap: for each discrete ground-truth factor, the gap
/// between the two latent dimensions with the highest (binned) MI,
/// normalized by the factor's entropy, averaged over factors.
pub fn mig<T: Scalar>(latents: &Tensor<T>, factors: &[Vec<usize>], bins: usize) -> Result<f64> {
    let (n, k_l) = latents.dims2("mig latents")?;
    if k_l < 2 {
        return Err(Error::contract("mig needs at least 2 latent dimensions".to_string()));
    }
    if factors.is_empty() {
        return Err(Error::contract("mig needs at least one factor".to_string()));
    }
    let latent_bins: Vec<Vec<usize>> = (0..k_l)
        .map(|j| Ok(bin_equal_width(&column(latents, j)?, bins)))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for f in factors {
        if f.len() != n {
            return Err(Error::dim("factor length mismatch".to_string()));
        }
        let n_vals = f.iter().copied().max().unwrap_or(0) + 1;
        let mut f_counts = vec![0.0; n_vals];
        for &v in f {
            f_counts[v] += 1.0;
        }
        let hf = entropy(&f_counts)?;
        if hf <= 0.0 {
            return Err(Error::domain("constant ground-truth factor".to_string()));
        }
        let mut mis: Vec<f64> = latent_bins
            .iter()
            .map(|lb| {
                let joint = Histogram2::from_labels(lb, f, bins, n_vals)?;
                discrete_mi(&joint)
            })
            .collect::<Result<_>>()?;
        mis.sort_by(|a, b| b.partial_cmp(a).unwrap());
        total += (mis[0] - mis[1]) / hf;
    }
    Ok(total / factors.len() as f64)
}

/// Fréchet distance mode: diagonal covariances (the default) or full
/// covariances via symmetric eigendecomposition.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrechetMode {
    Diag,
    Full,
}

/// Fréchet distance between Gaussian fits of two feature sets:
/// `|mu_a - mu_b|^2 + Tr(Sa + Sb - 2 (Sa^1/2 Sb Sa^1/2)^1/2)`. In diag mode
/// the trace term reduces to `sum_d (sigma_a,d - sigma_b,d)^2`.
pub fn frechet_gaussian<T: Scalar>(
    feat_a: &Tensor<T>,
    feat_b: &Tensor<T>,
    mode: FrechetMode,
) -> Result<f64> {
    let (na, da) = feat_a.dims2("frechet feat_a")?;
    let (nb, db) = feat_b.dims2("frechet feat_b")?;
    if da != db {
        return Err(Error::dim(format!("feature dims {da} vs {db}")));
    }
    if na < 2 || nb < 2 {
        return Err(Error::contract("need at least 2 samples per side".to_string()));
    }
    let mean = |x: &Tensor<T>, n: usize, d: usize| -> Vec<f64> {
        let mut m = vec![0.0; d];
        for i in 0..n {
            for j in 0..d {
                m[j] += x.data()[i * d + j].to64();
            }
        }
        m.iter_mut().for_each(|v| *v /= n as f64);
        m
    };
    let ma = mean(feat_a, na, da);
    let mb = mean(feat_b, nb, db);
    let mean_sq: f64 = ma.iter().zip(&mb).map(|(a, b)| (a - b) * (a - b)).sum();

    match mode {
        FrechetMode::Diag => {
            let var = |x: &Tensor<T>, n: usize, m: &[f64]| -> Vec<f64> {
                let mut v = vec![0.0; da];
                for i in 0..n {
                    for j in 0..da {
                        let diff = x.data()[i * da + j].to64() - m[j];
                        v[j] += diff * diff;
                    }
                }
                v.iter_mut().for_each(|t| *t /= n as f64);
                v
            };
            let va = var(feat_a, na, &ma);
            let vb = var(feat_b, nb, &mb);
            let trace: f64 = va
                .iter()
                .zip(&vb)
                .map(|(a, b)| {
                    let d = a.sqrt() - b.sqrt();
                    d * d
                })
                .sum();
            Ok(mean_sq + trace)
        }
        FrechetMode::Full => {
            let cov = |x: &Tensor<T>, n: usize, m: &[f64]| -> Vec<f64> {
                let mut s = vec![0.0; da * da];
                for i in 0..n {
                    for p in 0..da {
                        let dp = x.data()[i * da + p].to64() - m[p];
                        for q in p..da {
                            let dq = x.data()[i * da + q].to64() - m[q];
                            s[p * da + q] += dp * dq;
                        }
                    }
                }
                for p in 0..da {
                    for q in p..da {
                        s[p * da + q] /= n as f64;
                        s[q * da + p] = s[p * da + q];
                    }
                }
                s
            };
            let sa = cov(feat_a, na, &ma);
            let sb = cov(feat_b, nb, &mb);
            let sa_sqrt = sqrtm_sym(&sa, da)?;
            let inner = matmul_sq(&matmul_sq(&sa_sqrt, &sb, da), &sa_sqrt, da);
            let cross_sqrt = sqrtm_sym(&inner, da)?;
            let tr = |s: &[f64]| (0..da).map(|i| s[i * da + i]).sum::<f64>();
            Ok(mean_sq + tr(&sa) + tr(&sb) - 2.0 * tr(&cross_sqrt))
        }
    }
}

fn matmul_sq(a: &[f64], b: &[f64], d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d * d];
    for i in 0..d {
        for k in 0..d {
            let aik = a[i * d + k];
            for j in 0..d {
                out[i * d + j] += aik * b[k * d + j];
            }
        }
    }
    out
}

/// Principal square root of a symmetric PSD matrix via cyclic Jacobi
/// eigendecomposition. Slightly negative eigenvalues from sampling noise are
/// clamped to zero.
fn sqrtm_sym(s: &[f64], d: usize) -> Result<Vec<f64>> {
    let (vals, vecs) = jacobi_eigen(s, d)?;
    let mut out = vec![0.0; d * d];
    for k in 0..d {
        let lam = vals[k].max(0.0).sqrt();
        for i in 0..d {
            for j in 0..d {
                out[i * d + j] += lam * vecs[i * d + k] * vecs[j * d + k];
            }
        }
    }
    Ok(out)
}

/// Cyclic Jacobi eigenvalue iteration for symmetric matrices. Returns
/// (eigenvalues, column eigenvectors).
fn jacobi_eigen(s: &[f64], d: usize) -> Result<(Vec<f64>, Vec<f64>)> {
    let mut a = s.to_vec();
    let mut v = vec![0.0; d * d];
    for i in 0..d {
        v[i * d + i] = 1.0;
    }
    let off = |a: &[f64]| -> f64 {
        let mut t = 0.0;
        for i in 0..d {
            for j in 0..d {
                if i != j {
                    t += a[i * d + j] * a[i * d + j];
                }
            }
        }
        t
    };
    let scale: f64 = s.iter().map(|x| x * x).sum::<f64>().max(1e-300);
    for _sweep in 0..100 {
        if off(&a) <= 1e-24 * scale {
            break;
        }
        for p in 0..d {
            for q in (p + 1)..d {
                let apq = a[p * d + q];
                if apq.abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q * d + q] - a[p * d + p]) / (2.0 * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let c = 1.0 / (t * t + 1.0).sqrt();
                let sn = t * c;
                for k in 0..d {
                    let akp = a[k * d + p];
                    let akq = a[k * d + q];
                    a[k * d + p] = c * akp - sn * akq;
                    a[k * d + q] = sn * akp + c * akq;
                }
                for k in 0..d {
                    let apk = a[p * d + k];
                    let aqk = a[q * d + k];
                    a[p * d + k] = c * apk - sn * aqk;
                    a[q * d + k] = sn * apk + c * aqk;
                }
                for k in 0..d {
                    let vkp = v[k * d + p];
                    let vkq = v[k * d + q];
                    v[k * d + p] = c * vkp - sn * vkq;
                    v[k * d + q] = sn * vkp + c * vkq;
                }
            }
        }
    }
    let vals: Vec<f64> = (0..d).map(|i| a[i * d + i]).collect();
    if vals.iter().any(|v| !v.is_finite()) {
        return Err(Error::numeric("eigen iteration produced non-finite values".to_string()));
    }
    Ok((vals, v))
}

// ── simple reconstruction errors ─────────────────────────────────────────

pub fn mse<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::dim("mse shape mismatch".to_string()));
    }
    let n = a.len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| {
            let d = x.to64() - y.to64();
            d * d
        })
        .sum::<f64>()
        / n)
}

pub fn l1<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<f64> {
    if a.dims() != b.dims() {
        return Err(Error::dim("l1 shape mismatch".to_string()));
    }
    let n = a.len() as f64;
    Ok(a.data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x.to64() - y.to64()).abs())
        .sum::<f64>()
        / n)
}

/// Pearson correlation of two equal-length samples.
pub fn pearson(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::contract("pearson needs two equal samples of length >= 2".to_string()));
    }
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut va = 0.0;
    let mut vb = 0.0;
    for (&x, &y) in a.iter().zip(b) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    if va <= 0.0 || vb <= 0.0 {
        return Err(Error::domain("zero-variance sample in pearson".to_string()));
    }
    Ok(cov / (va * vb).sqrt())
}

// ── conditioning diagnostics ─────────────────────────────────────────────

/// The four conditioning metrics. Everything is re-encoded by the frozen
/// stage-1 encoder mean `E`; each value is the entropy-normalized MI of the
/// listed codes against `C_R = E(x)`:
/// M1 from `E(y)`, M2 from `E(refine(y, z))`, M3 from `E(refine(y, eps))`
/// with prior-drawn `eps`, M4 from `E(refine(eps_img, z))` with a noise
/// image in the `y` slot.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct ConditioningMetrics {
    pub m1: f64,
    pub m2: f64,
    pub m3: f64,
    pub m4: f64,
}

use serde::Serialize;

pub fn conditioning_metrics<T: Scalar>(
    stage1: &Stage1Model<T>,
    stage2: &Stage2Model<T>,
    images: &Tensor<T>,
    seed: u64,
    bins: usize,
) -> Result<ConditioningMetrics> {
    let (n, _pixels) = images.dims2("conditioning_metrics images")?;
    let mut rng = Rng::seed_from_u64(seed);

    let y = stage1.produce_y(images)?;
    let z_post = stage2.encode_residual(images, &y)?.mean;
    let x_hat = stage2.refine(&y, &z_post)?;
    let eps_z: Tensor<T> = rng.normal_tensor(&[n, stage2.z_dim]);
    let x_prior_z = stage2.refine(&y, &eps_z)?;
    let eps_img: Tensor<T> = rng.normal_tensor(&[n, stage2.pixels()]);
    let x_noise_y = stage2.refine(&eps_img, &z_post)?;

    let c_r = stage1.encode(images)?.mean;
    let c_y = stage1.encode(&y)?.mean;
    let c_x = stage1.encode(&x_hat)?.mean;
    let c_zeps = stage1.encode(&x_prior_z)?.mean;
    let c_yeps = stage1.encode(&x_noise_y)?.mean;

    Ok(ConditioningMetrics {
        m1: normalized_mi(&c_y, &c_r, bins)?.value,
        m2: normalized_mi(&c_x, &c_r, bins)?.value,
        m3: normalized_mi(&c_zeps, &c_r, bins)?.value,
        m4: normalized_mi(&c_yeps, &c_r, bins)?.value,
    })
}

/// Per-factor best-match normalized MI between latent codes and discrete
/// ground-truth factors: `mean_f max_k I(latent_k; f) / H(f)`. This is the
/// MIG numerator without the gap, reported alongside MIG.
pub fn factor_code_mi<T: Scalar>(
    latents: &Tensor<T>,
    factors: &[Vec<usize>],
    bins: usize,
) -> Result<f64> {
    let (n, k_l) = latents.dims2("factor_code_mi latents")?;
    if factors.is_empty() {
        return Err(Error::contract("needs at least one factor".to_string()));
    }
    let latent_bins: Vec<Vec<usize>> = (0..k_l)
        .map(|j| Ok(bin_equal_width(&column(latents, j)?, bins)))
        .collect::<Result<_>>()?;
    let mut total = 0.0;
    for f in factors {
        if f.len() != n {
            return Err(Error::dim("factor length mismatch".to_string()));
        }
        let n_vals = f.iter().copied().max().unwrap_or(0) + 1;
        let mut f_counts = vec![0.0; n_vals];
        for &v in f {
            f_counts[v] += 1.0;
        }
        let hf = entropy(&f_counts)?;
        let best = latent_bins
            .iter()
            .map(|lb| {
                let joint = Histogram2::from_labels(lb, f, bins, n_vals)?;
                discrete_mi(&joint)
            })
            .collect::<Result<Vec<_>>>()?
            .into_iter()
            .fold(0.0f64, f64::max);
        total += best / hf;
    }
    Ok(total / factors.len() as f64)
}
