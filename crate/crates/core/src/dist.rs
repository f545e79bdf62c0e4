//! Probability primitives: diagonal Gaussians (KL to the standard-normal
//! prior, reparameterized sampling, log density), the Bernoulli pixel
//! likelihood, and a diagonal Gaussian mixture fit by EM.
//!
//! Each Gaussian/Bernoulli op has a tape form (for losses) and a plain form
//! that evaluates the same graph on a throwaway tape.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;
pub const VAR_FLOOR: f64 = 1e-6;

const LN_2PI: f64 = 1.8378770664093453;

/// Mean/log-variance pair of a diagonal Gaussian over `[N x d]`.
/// Log-variances are clamped to `[-10, 10]` at construction.
#[derive(Debug, Clone)]
pub struct GaussianParams<T> {
    pub mean: Tensor<T>,
    pub logvar: Tensor<T>,
}

impl<T: Scalar> GaussianParams<T> {
    pub fn new(mean: Tensor<T>, logvar: Tensor<T>) -> Result<Self> {
        if mean.dims() != logvar.dims() {
            return Err(Error::dim(format!(
                "mean {:?} and logvar {:?} shapes differ",
                mean.dims(),
                logvar.dims()
            )));
        }
        let lo = T::of(LOGVAR_MIN);
        let hi = T::of(LOGVAR_MAX);
        let logvar = logvar.map(|v| v.max(lo).min(hi));
        Ok(GaussianParams { mean, logvar })
    }

    pub fn standard(dims: &[usize]) -> Self {
        GaussianParams {
            mean: Tensor::zeros(dims),
            logvar: Tensor::zeros(dims),
        }
    }
}

// ── tape forms ───────────────────────────────────────────────────────────

/// Per-sample `KL[N(mu, sigma^2) || N(0, I)]` over the last axis:
/// `1/2 sum_d (mu^2 + sigma^2 - 1 - log sigma^2)`. In: `[N x d]`, out: `[N]`.
pub fn kl_std_normal_node<T: Scalar>(
    tape: &mut Tape<T>,
    mean: NodeId,
    logvar: NodeId,
) -> Result<NodeId> {
    let mu2 = tape.square(mean)?;
    let var = tape.exp(logvar)?;
    let sum1 = tape.add(mu2, var)?;
    let inner = tape.sub(sum1, logvar)?; // mu^2 + var - logvar
    let inner = tape.affine(inner, 1.0, -1.0)?; // ... - 1
    let rank = tape.value(inner).rank();
    let summed = tape.sum(inner, &[rank - 1], false)?;
    tape.affine(summed, 0.5, 0.0)
}

/// Reparameterized sample `mean + exp(logvar / 2) * noise`.
pub fn reparam_node<T: Scalar>(
    tape: &mut Tape<T>,
    mean: NodeId,
    logvar: NodeId,
    noise: NodeId,
) -> Result<NodeId> {
    let half = tape.affine(logvar, 0.5, 0.0)?;
    let std = tape.exp(half)?;
    let scaled = tape.mul(std, noise)?;
    tape.add(mean, scaled)
}

/// Per-sample diagonal Gaussian log density over the last axis. Out: `[N]`.
pub fn gaussian_logpdf_node<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    mean: NodeId,
    logvar: NodeId,
) -> Result<NodeId> {
    let diff = tape.sub(x, mean)?;
    let sq = tape.square(diff)?;
    let var = tape.exp(logvar)?;
    let maha = tape.div(sq, var)?;
    let t1 = tape.add(maha, logvar)?;
    let inner = tape.affine(t1, 1.0, LN_2PI)?;
    let rank = tape.value(inner).rank();
    let summed = tape.sum(inner, &[rank - 1], false)?;
    tape.affine(summed, -0.5, 0.0)
}

/// Per-sample Bernoulli log likelihood of `x` in `[0,1]` under `logits`,
/// summed over the last axis. Softplus form, stable for any logit magnitude.
pub fn bernoulli_logpmf_node<T: Scalar>(
    tape: &mut Tape<T>,
    x: NodeId,
    logits: NodeId,
) -> Result<NodeId> {
    {
        let xv = tape.value(x);
        if xv.data().iter().any(|&v| v < T::zero() || v > T::one()) {
            return Err(Error::domain("bernoulli target outside [0, 1]".to_string()));
        }
        if xv.dims() != tape.value(logits).dims() {
            return Err(Error::dim("bernoulli target/logits shape mismatch".to_string()));
        }
    }
    // log pmf = -x * softplus(-l) - (1 - x) * softplus(l)
    let neg_l = tape.neg(logits)?;
    let sp_neg = tape.softplus(neg_l)?;
    let sp_pos = tape.softplus(logits)?;
    let term1 = tape.mul(x, sp_neg)?;
    let one_minus_x = tape.affine(x, -1.0, 1.0)?;
    let term2 = tape.mul(one_minus_x, sp_pos)?;
    let total = tape.add(term1, term2)?;
    let rank = tape.value(total).rank();
    let summed = tape.sum(total, &[rank - 1], false)?;
    tape.affine(summed, -1.0, 0.0)
}

// ── plain forms ──────────────────────────────────────────────────────────

pub fn diag_gaussian_kl<T: Scalar>(q: &GaussianParams<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let m = tape.constant(q.mean.clone());
    let lv = tape.constant(q.logvar.clone());
    let node = kl_std_normal_node(&mut tape, m, lv)?;
    Ok(tape.value(node).clone())
}

pub fn reparam_sample<T: Scalar>(q: &GaussianParams<T>, noise: &Tensor<T>) -> Result<Tensor<T>> {
    if noise.dims() != q.mean.dims() {
        return Err(Error::dim("noise shape must match mean".to_string()));
    }
    let mut tape = Tape::new();
    let m = tape.constant(q.mean.clone());
    let lv = tape.constant(q.logvar.clone());
    let n = tape.constant(noise.clone());
    let node = reparam_node(&mut tape, m, lv, n)?;
    Ok(tape.value(node).clone())
}

pub fn gaussian_logpdf<T: Scalar>(x: &Tensor<T>, q: &GaussianParams<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xid = tape.constant(x.clone());
    let m = tape.constant(q.mean.clone());
    let lv = tape.constant(q.logvar.clone());
    let node = gaussian_logpdf_node(&mut tape, xid, m, lv)?;
    Ok(tape.value(node).clone())
}

pub fn bernoulli_logpmf<T: Scalar>(x: &Tensor<T>, logits: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let xid = tape.constant(x.clone());
    let lid = tape.constant(logits.clone());
    let node = bernoulli_logpmf_node(&mut tape, xid, lid)?;
    Ok(tape.value(node).clone())
}

// ── Gaussian mixture ─────────────────────────────────────────────────────

/// Diagonal-covariance Gaussian mixture. Weights sum to 1 within 1e-9;
/// variances are floored at 1e-6.
#[derive(Debug, Clone)]
pub struct Gmm<T> {
    pub weights: Tensor<T>, // [K]
    pub means: Tensor<T>,   // [K x d]
    pub vars: Tensor<T>,    // [K x d]
}

impl<T: Scalar> Gmm<T> {
    pub fn k(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.means.dims()[1]
    }

    /// Weight sum within 1e-9 at f64; narrower scalars get the equivalent
    /// tolerance in their own epsilon (a cast f32 simplex cannot sum closer
    /// than ~K ulps).
    pub fn validate(&self) -> Result<()> {
        let total: f64 = self.weights.data().iter().map(|v| v.to64()).sum();
        let tol = 1e-9f64.max(2.0 * self.k() as f64 * T::epsilon().to64());
        if (total - 1.0).abs() > tol {
            return Err(Error::domain(format!("mixture weights sum to {total}")));
        }
        if self.vars.data().iter().any(|v| v.to64() < VAR_FLOOR * 0.999) {
            return Err(Error::domain("mixture variance below floor".to_string()));
        }
        Ok(())
    }

    pub fn entries(&self) -> Vec<(String, Tensor<T>)> {
        vec![
            ("weights".to_string(), self.weights.clone()),
            ("means".to_string(), self.means.clone()),
            ("vars".to_string(), self.vars.clone()),
        ]
    }

    pub fn from_entries(mut entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let weights = crate::io::take_entry(&mut entries, "weights")?;
        let means = crate::io::take_entry(&mut entries, "means")?;
        let vars = crate::io::take_entry(&mut entries, "vars")?;
        let g = Gmm { weights, means, vars };
        g.validate()?;
        Ok(g)
    }

    /// Per-(sample, component) log of `pi_k N(x; mu_k, sigma_k^2)` in f64.
    fn weighted_log_components(&self, x: &Tensor<T>) -> Result<Vec<Vec<f64>>> {
        let (n, d) = x.dims2("gmm data")?;
        if d != self.dim() {
            return Err(Error::dim(format!("gmm dim {} but data dim {d}", self.dim())));
        }
        let k = self.k();
        let mut comps = Vec::with_capacity(k);
        for c in 0..k {
            let logw = self.weights.data()[c].to64().max(1e-300).ln();
            let mu: Vec<f64> = (0..d).map(|j| self.means.data()[c * d + j].to64()).collect();
            let var: Vec<f64> = (0..d).map(|j| self.vars.data()[c * d + j].to64()).collect();
            comps.push((logw, mu, var));
        }
        let mut out = vec![vec![0.0f64; k]; n];
        for i in 0..n {
            let row = x.row(i)?;
            for (c, (logw, mu, var)) in comps.iter().enumerate() {
                let mut lp = *logw;
                for j in 0..d {
                    let diff = row[j].to64() - mu[j];
                    lp -= 0.5 * (LN_2PI + var[j].ln() + diff * diff / var[j]);
                }
                out[i][c] = lp;
            }
        }
        Ok(out)
    }

    /// Mixture log density per sample, `[N]`.
    pub fn logpdf(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let lw = self.weighted_log_components(x)?;
        let data: Vec<T> = lw.iter().map(|row| T::of(logsumexp_slice(row))).collect();
        Tensor::new(vec![lw.len()], data)
    }

    /// Posterior responsibilities, `[N x K]`; rows sum to 1.
    pub fn responsibilities(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let lw = self.weighted_log_components(x)?;
        let k = self.k();
        let mut data = Vec::with_capacity(lw.len() * k);
        for row in &lw {
            let lse = logsumexp_slice(row);
            for &v in row {
                data.push(T::of((v - lse).exp()));
            }
        }
        Tensor::new(vec![lw.len(), k], data)
    }

    /// Mean of the highest-responsibility component per sample, `[N x d]`.
    /// This is the `Y` assigned to each `x`.
    pub fn map_mean(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let lw = self.weighted_log_components(x)?;
        let d = self.dim();
        let mut data = Vec::with_capacity(lw.len() * d);
        for row in &lw {
            let best = argmax_slice(row);
            data.extend_from_slice(&self.means.data()[best * d..(best + 1) * d]);
        }
        Tensor::new(vec![lw.len(), d], data)
    }
}

fn logsumexp_slice(row: &[f64]) -> f64 {
    let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

fn argmax_slice(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// EM fit with distance-weighted (k-means++-style) seeding. Returns the model
/// and the per-iteration log-likelihood trace (one entry per E-step, mean per
/// sample), non-decreasing up to rounding. A component that loses all its
/// responsibility mass is re-seeded from the point farthest from the current
/// means.
pub fn gmm_em_fit<T: Scalar>(
    data: &Tensor<T>,
    k: usize,
    iters: usize,
    seed: u64,
) -> Result<(Gmm<T>, Vec<f64>)> {
    let (n, d) = data.dims2("gmm_em_fit data")?;
    if k == 0 || n < k {
        return Err(Error::contract(format!("gmm_em_fit: N={n} must be >= K={k} >= 1")));
    }
    let mut rng = Rng::seed_from_u64(seed);
    let x64: Vec<Vec<f64>> = (0..n)
        .map(|i| data.row(i).unwrap().iter().map(|v| v.to64()).collect())
        .collect();

    // global variance, reused as the starting spread and for re-seeds
    let mut global_mean = vec![0.0f64; d];
    for row in &x64 {
        for j in 0..d {
            global_mean[j] += row[j];
        }
    }
    for v in &mut global_mean {
        *v /= n as f64;
    }
    let mut global_var = vec![0.0f64; d];
    for row in &x64 {
        for j in 0..d {
            let diff = row[j] - global_mean[j];
            global_var[j] += diff * diff;
        }
    }
    for v in &mut global_var {
        *v = (*v / n as f64).max(VAR_FLOOR);
    }

    // k-means++-style seeding
    let mut centers: Vec<usize> = vec![rng.uniform_usize(n)];
    while centers.len() < k {
        let dists: Vec<f64> = (0..n)
            .map(|i| {
                centers
                    .iter()
                    .map(|&c| sq_dist(&x64[i], &x64[c]))
                    .fold(f64::INFINITY, f64::min)
            })
            .collect();
        let total: f64 = dists.iter().sum();
        let next = if total <= 0.0 {
            rng.uniform_usize(n)
        } else {
            let mut u = rng.uniform_f64(0.0, total);
            let mut pick = n - 1;
            for (i, &w) in dists.iter().enumerate() {
                if u < w {
                    pick = i;
                    break;
                }
                u -= w;
            }
            pick
        };
        centers.push(next);
    }

    let mut weights = vec![1.0 / k as f64; k];
    let mut means: Vec<Vec<f64>> = centers.iter().map(|&c| x64[c].clone()).collect();
    let mut vars: Vec<Vec<f64>> = vec![global_var.clone(); k];

    let mut trace = Vec::with_capacity(iters);
    let mut resp = vec![vec![0.0f64; k]; n];
    for _ in 0..iters {
        // E-step
        let mut ll = 0.0f64;
        for i in 0..n {
            let mut row = vec![0.0f64; k];
            for (c, lp_out) in row.iter_mut().enumerate() {
                let mut lp = weights[c].max(1e-300).ln();
                for j in 0..d {
                    let diff = x64[i][j] - means[c][j];
                    lp -= 0.5 * (LN_2PI + vars[c][j].ln() + diff * diff / vars[c][j]);
                }
                *lp_out = lp;
            }
            let lse = logsumexp_slice(&row);
            ll += lse;
            for c in 0..k {
                resp[i][c] = (row[c] - lse).exp();
            }
        }
        trace.push(ll / n as f64);

        // M-step
        for c in 0..k {
            let nk: f64 = (0..n).map(|i| resp[i][c]).sum();
            if nk < 1e-8 {
                let far = (0..n)
                    .max_by(|&a, &b| {
                        let da = means
                            .iter()
                            .map(|m| sq_dist(&x64[a], m))
                            .fold(f64::INFINITY, f64::min);
                        let db = means
                            .iter()
                            .map(|m| sq_dist(&x64[b], m))
                            .fold(f64::INFINITY, f64::min);
                        da.partial_cmp(&db).unwrap()
                    })
                    .unwrap();
                means[c] = x64[far].clone();
                vars[c] = global_var.clone();
                weights[c] = 1.0 / n as f64;
                continue;
            }
            weights[c] = nk / n as f64;
            for j in 0..d {
                means[c][j] = (0..n).map(|i| resp[i][c] * x64[i][j]).sum::<f64>() / nk;
            }
            for j in 0..d {
                let v: f64 = (0..n)
                    .map(|i| {
                        let diff = x64[i][j] - means[c][j];
                        resp[i][c] * diff * diff
                    })
                    .sum::<f64>()
                    / nk;
                vars[c][j] = v.max(VAR_FLOOR);
            }
        }
        let wsum: f64 = weights.iter().sum();
        for w in &mut weights {
            *w /= wsum;
        }
    }

    let gmm = Gmm {
        weights: Tensor::new(vec![k], weights.iter().map(|&w| T::of(w)).collect())?,
        means: Tensor::new(vec![k, d], means.concat().iter().map(|&v| T::of(v)).collect())?,
        vars: Tensor::new(vec![k, d], vars.concat().iter().map(|&v| T::of(v)).collect())?,
    };
    gmm.validate()?;
    Ok((gmm, trace))
}

/// Draws one sample from the mixture.
pub fn gmm_sample<T: Scalar>(gmm: &Gmm<T>, rng: &mut Rng) -> Result<Tensor<T>> {
    let k = gmm.k();
    let d = gmm.dim();
    let mut u = rng.uniform_f64(0.0, 1.0);
    let mut pick = k - 1;
    for c in 0..k {
        let w = gmm.weights.data()[c].to64();
        if u < w {
            pick = c;
            break;
        }
        u -= w;
    }
    let data: Vec<T> = (0..d)
        .map(|j| {
            let mu = gmm.means.data()[pick * d + j].to64();
            let sd = gmm.vars.data()[pick * d + j].to64().sqrt();
            T::of(mu + sd * rng.normal_f64())
        })
        .collect();
    Tensor::new(vec![d], data)
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}
