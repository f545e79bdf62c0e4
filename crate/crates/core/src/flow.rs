//! The tractable variant: a Gaussian mixture realizes the coarse stage and a
//! conditional affine coupling flow models the data given the mixture's
//! assigned mean image.
//!
//! Each coupling layer passes one half of the dimensions through unchanged
//! (the mask alternates between layers) and transforms the other half as
//! `x_b <- x_b * exp(s) + t`, where the scale and shift networks read the
//! masked half concatenated with the conditioning input `y`. Scales go
//! through `tanh * cap` for stability; the final layer of each net starts at
//! zero, so a fresh flow is exactly the identity with zero log-determinant.

use crate::dist::{gmm_em_fit, Gmm};
use crate::error::{Error, Result};
use crate::nn::{minibatches, AdamState, DenseIds, DenseLayer, Mlp, ParamVisitor, TrainError};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MsflowConfig {
    pub components: usize,
    pub layers: usize,
    pub em_iters: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
    pub hidden: usize,
    pub scale_cap: f64,
}

impl Default for MsflowConfig {
    fn default() -> Self {
        MsflowConfig {
            components: 10,
            layers: 6,
            em_iters: 40,
            epochs: 10,
            batch: 128,
            lr: 1e-3,
            seed: 0,
            hidden: 128,
            scale_cap: 3.0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct CouplingLayer<T> {
    pub s_net: Mlp<T>,
    pub t_net: Mlp<T>,
    /// true = pass-through dimension for this layer.
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
pub struct ConditionalFlow<T> {
    pub layers: Vec<CouplingLayer<T>>,
    pub dim: usize,
    pub y_dim: usize,
    pub scale_cap: f64,
}

pub struct FlowIds {
    pub layers: Vec<(Vec<DenseIds>, Vec<DenseIds>)>,
}

impl<T: Scalar> ConditionalFlow<T> {
    /// Alternating-halves masks; scale/shift nets end in a zero layer so the
    /// fresh flow is the identity.
    pub fn init(dim: usize, y_dim: usize, cfg: &MsflowConfig, rng: &mut Rng) -> Result<Self> {
        if dim == 0 || cfg.layers == 0 {
            return Err(Error::contract("flow needs dim >= 1 and layers >= 1".to_string()));
        }
        if cfg.scale_cap <= 0.0 {
            return Err(Error::domain("scale_cap must be positive".to_string()));
        }
        let mut layers = Vec::with_capacity(cfg.layers);
        for l in 0..cfg.layers {
            let mask: Vec<bool> = (0..dim).map(|i| (i < dim / 2) == (l % 2 == 0)).collect();
            let mut s_net = Mlp::init(&[dim + y_dim, cfg.hidden, dim], rng);
            let mut t_net = Mlp::init(&[dim + y_dim, cfg.hidden, dim], rng);
            let last = s_net.layers.len() - 1;
            s_net.layers[last] = DenseLayer::zeroed(cfg.hidden, dim);
            t_net.layers[last] = DenseLayer::zeroed(cfg.hidden, dim);
            layers.push(CouplingLayer { s_net, t_net, mask });
        }
        Ok(ConditionalFlow {
            layers,
            dim,
            y_dim,
            scale_cap: cfg.scale_cap,
        })
    }

    pub fn split_ids(&self, ids: &[NodeId]) -> FlowIds {
        let mut it = ids.iter().copied();
        FlowIds {
            layers: self
                .layers
                .iter()
                .map(|l| {
                    let s = l.s_net.bind_ids(&mut it);
                    let t = l.t_net.bind_ids(&mut it);
                    (s, t)
                })
                .collect(),
        }
    }

    fn mask_tensors(&self, layer: usize) -> (Tensor<T>, Tensor<T>) {
        let m = Tensor::from_fn(&[1, self.dim], |i| {
            if self.layers[layer].mask[i] {
                T::one()
            } else {
                T::zero()
            }
        });
        let anti = m.map(|v| T::one() - v);
        (m, anti)
    }

    fn check_dims(&self, x: &[usize], y: &[usize]) -> Result<()> {
        if x.len() != 2 || x[1] != self.dim {
            return Err(Error::dim(format!("flow input {x:?}, want [B x {}]", self.dim)));
        }
        if y.len() != 2 || y[1] != self.y_dim || y[0] != x[0] {
            return Err(Error::dim(format!(
                "flow condition {y:?}, want [{} x {}]",
                x[0], self.y_dim
            )));
        }
        Ok(())
    }

    /// Forward graph: returns `(u, logdet)` nodes, logdet per sample `[B]`.
    pub fn forward_nodes(
        &self,
        tape: &mut Tape<T>,
        ids: &FlowIds,
        x: NodeId,
        y: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        self.check_dims(tape.value(x).dims(), tape.value(y).dims())?;
        let b = tape.value(x).dims()[0];
        let mut h = x;
        let mut logdet = tape.constant(Tensor::zeros(&[b]));
        for (l, (layer, (s_ids, t_ids))) in self.layers.iter().zip(&ids.layers).enumerate() {
            let (m, anti) = self.mask_tensors(l);
            let mid = tape.constant(m);
            let aid = tape.constant(anti);
            let xa = tape.mul(h, mid)?;
            let inp = tape.concat_last(xa, y)?;
            let s_raw = layer.s_net.forward(tape, s_ids, inp)?;
            let s_tanh = tape.tanh(s_raw)?;
            let s_capped = tape.affine(s_tanh, self.scale_cap, 0.0)?;
            let s_eff = tape.mul(s_capped, aid)?;
            let t_raw = layer.t_net.forward(tape, t_ids, inp)?;
            let t_eff = tape.mul(t_raw, aid)?;
            let scale = tape.exp(s_eff)?;
            let scaled = tape.mul(h, scale)?;
            h = tape.add(scaled, t_eff)?;
            let ld_layer = tape.sum(s_eff, &[1], false)?;
            logdet = tape.add(logdet, ld_layer)?;
        }
        Ok((h, logdet))
    }

    /// Log density graph: `log N(u; 0, I) + logdet`, per sample `[B]`.
    pub fn logpdf_nodes(
        &self,
        tape: &mut Tape<T>,
        ids: &FlowIds,
        x: NodeId,
        y: NodeId,
    ) -> Result<NodeId> {
        let (u, logdet) = self.forward_nodes(tape, ids, x, y)?;
        let zeros = tape.constant(Tensor::zeros(&[1, self.dim]));
        let base = crate::dist::gaussian_logpdf_node(tape, u, zeros, zeros)?;
        tape.add(base, logdet)
    }

    /// `(u, logdet)` values for a batch.
    pub fn forward(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut tape = Tape::new();
        let ids = self.split_ids(&self.bind(&mut tape));
        let xid = tape.constant(x.clone());
        let yid = tape.constant(y.clone());
        let (u, logdet) = self.forward_nodes(&mut tape, &ids, xid, yid)?;
        Ok((tape.value(u).clone(), tape.value(logdet).clone()))
    }

    /// Exact inverse, layer by layer in reverse.
    pub fn inverse(&self, u: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_dims(u.dims(), y.dims())?;
        let b = u.dims()[0];
        let mut h = u.clone();
        for (l, layer) in self.layers.iter().enumerate().rev() {
            let (m, anti) = self.mask_tensors(l);
            let xa = h.mul(&m)?;
            let inp = concat_cols(&xa, y)?;
            let s_raw = layer.s_net.forward_plain(&inp)?;
            let cap = T::of(self.scale_cap);
            let s_eff = s_raw.map(|v| v.tanh() * cap).mul(&anti)?;
            let t_eff = layer.t_net.forward_plain(&inp)?.mul(&anti)?;
            // x = (u - t) * exp(-s); pass-through dims have s = t = 0
            let shifted = h.sub(&t_eff)?;
            let unscaled = shifted.zip_broadcast(&s_eff, |v, s| v * (-s).exp())?;
            h = unscaled;
        }
        debug_assert_eq!(h.dims(), &[b, self.dim]);
        h.check_finite("flow inverse")?;
        Ok(h)
    }

    /// Per-sample conditional log density values.
    pub fn logpdf(&self, x: &Tensor<T>, y: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let ids = self.split_ids(&self.bind(&mut tape));
        let xid = tape.constant(x.clone());
        let yid = tape.constant(y.clone());
        let lp = self.logpdf_nodes(&mut tape, &ids, xid, yid)?;
        Ok(tape.value(lp).clone())
    }

    pub fn entries(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![(
            "meta".to_string(),
            Tensor::new(
                vec![4],
                vec![
                    T::of(self.layers.len() as f64),
                    T::of(self.dim as f64),
                    T::of(self.y_dim as f64),
                    T::of(self.scale_cap),
                ],
            )
            .expect("meta tensor"),
        )];
        self.visit(&mut |n, t| out.push((n.to_string(), t.clone())));
        out
    }

    pub fn from_entries(mut entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let meta = crate::io::take_entry(&mut entries, "meta")?;
        if meta.len() != 4 {
            return Err(Error::format("flow meta entry malformed".to_string()));
        }
        let layers = meta.data()[0].to64() as usize;
        let dim = meta.data()[1].to64() as usize;
        let y_dim = meta.data()[2].to64() as usize;
        let scale_cap = meta.data()[3].to64();
        let hidden = entries
            .iter()
            .find(|(n, _)| n == "layer0.s.l0.w")
            .map(|(_, t)| t.dims()[0])
            .ok_or_else(|| Error::format("flow container missing layer0.s.l0.w".to_string()))?;
        let cfg = MsflowConfig {
            layers,
            hidden,
            scale_cap,
            ..Default::default()
        };
        let mut rng = Rng::seed_from_u64(0);
        let mut flow = ConditionalFlow::init(dim, y_dim, &cfg, &mut rng)?;
        flow.load_entries(&entries)?;
        Ok(flow)
    }
}

/// Entries of the combined container: the mixture under `gmm.` and the flow
/// (with its meta) under `flow.`.
pub fn container_entries<T: Scalar>(
    gmm: &Gmm<T>,
    flow: &ConditionalFlow<T>,
) -> Vec<(String, Tensor<T>)> {
    let mut entries: Vec<(String, Tensor<T>)> = gmm
        .entries()
        .into_iter()
        .map(|(n, t)| (format!("gmm.{n}"), t))
        .collect();
    entries.extend(flow.entries().into_iter().map(|(n, t)| (format!("flow.{n}"), t)));
    entries
}

/// Splits a combined container back into its mixture and flow parts.
pub fn from_container_entries<T: Scalar>(
    entries: &[(String, Tensor<T>)],
) -> Result<(Gmm<T>, ConditionalFlow<T>)> {
    let strip = |prefix: &str| -> Vec<(String, Tensor<T>)> {
        entries
            .iter()
            .filter(|(n, _)| n.starts_with(prefix))
            .map(|(n, t)| (n[prefix.len()..].to_string(), t.clone()))
            .collect()
    };
    let gmm = Gmm::from_entries(strip("gmm."))?;
    let flow = ConditionalFlow::from_entries(strip("flow."))?;
    Ok((gmm, flow))
}

fn concat_cols<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (ra, ca) = a.dims2("concat lhs")?;
    let (rb, cb) = b.dims2("concat rhs")?;
    if ra != rb {
        return Err(Error::dim("concat row mismatch".to_string()));
    }
    let mut data = Vec::with_capacity(ra * (ca + cb));
    for i in 0..ra {
        data.extend_from_slice(a.row(i)?);
        data.extend_from_slice(b.row(i)?);
    }
    Tensor::new(vec![ra, ca + cb], data)
}

impl<T: Scalar> ParamVisitor<T> for ConditionalFlow<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            l.s_net.visit(&mut |n, t| f(&format!("layer{i}.s.{n}"), t));
            l.t_net.visit(&mut |n, t| f(&format!("layer{i}.t.{n}"), t));
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.s_net.visit_mut(&mut |n, t| f(&format!("layer{i}.s.{n}"), t));
            l.t_net.visit_mut(&mut |n, t| f(&format!("layer{i}.t.{n}"), t));
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct FlowEpochLog {
    pub epoch: usize,
    pub mean_logpdf: f64,
}

/// Fits the mixture by EM, assigns each sample the mean of its
/// highest-responsibility component as `y`, and trains the conditional flow
/// by maximum likelihood on `(x, y)` pairs.
pub fn train_msflow<T: Scalar>(
    cfg: &MsflowConfig,
    images: &Tensor<T>,
) -> std::result::Result<(Gmm<T>, ConditionalFlow<T>, Vec<FlowEpochLog>), TrainError<ConditionalFlow<T>>>
{
    let (n, d) = images.dims2("train_msflow images").map_err(TrainError::Failed)?;
    let (gmm, _trace) =
        gmm_em_fit(images, cfg.components, cfg.em_iters, cfg.seed).map_err(TrainError::Failed)?;
    let y_all = gmm.map_mean(images).map_err(TrainError::Failed)?;

    let mut rng = Rng::seed_from_u64(cfg.seed.wrapping_add(1));
    let mut flow = ConditionalFlow::init(d, d, cfg, &mut rng).map_err(TrainError::Failed)?;
    let mut adam = AdamState::new(cfg.lr);
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let checkpoint = flow.clone();
        let mut acc = 0.0f64;
        let mut batches = 0usize;
        for idx in minibatches(n, cfg.batch, &mut rng) {
            let x = images.select_rows(&idx).map_err(TrainError::Failed)?;
            let y = y_all.select_rows(&idx).map_err(TrainError::Failed)?;
            let step = (|| -> Result<f64> {
                let mut tape = Tape::new();
                let ids_flat = flow.bind(&mut tape);
                let ids = flow.split_ids(&ids_flat);
                let xid = tape.constant(x);
                let yid = tape.constant(y);
                let lp = flow.logpdf_nodes(&mut tape, &ids, xid, yid)?;
                let mean_lp = tape.mean_all(lp)?;
                let loss = tape.affine(mean_lp, -1.0, 0.0)?;
                let grads = tape.backward(loss)?;
                let gvec: Vec<Tensor<T>> =
                    ids_flat.iter().map(|&id| grads.wrt(&tape, id)).collect();
                let value = tape.value(mean_lp).item()?.to64();
                adam.step(&mut flow, &gvec)?;
                Ok(value)
            })();
            match step {
                Ok(v) => {
                    acc += v;
                    batches += 1;
                }
                Err(e @ Error::Numeric(_)) => {
                    return Err(TrainError::Diverged {
                        last_good: Box::new(checkpoint),
                        epoch,
                        source: e,
                    })
                }
                Err(e) => return Err(TrainError::Failed(e)),
            }
        }
        logs.push(FlowEpochLog {
            epoch,
            mean_logpdf: acc / batches.max(1) as f64,
        });
    }
    Ok((gmm, flow, logs))
}

/// Finite-difference Jacobian log-determinant of the forward map at one
/// input row; oracle for the analytic logdet at small dimension.
pub fn numerical_logdet<T: Scalar>(
    flow: &ConditionalFlow<T>,
    x: &Tensor<T>,
    y: &Tensor<T>,
    h: f64,
) -> Result<f64> {
    let (b, d) = x.dims2("numerical_logdet x")?;
    if b != 1 {
        return Err(Error::contract("numerical_logdet takes a single row".to_string()));
    }
    let mut jac = vec![0.0f64; d * d];
    for j in 0..d {
        let mut plus = x.clone();
        plus.data_mut()[j] += T::of(h);
        let mut minus = x.clone();
        minus.data_mut()[j] -= T::of(h);
        let (up, _) = flow.forward(&plus, y)?;
        let (um, _) = flow.forward(&minus, y)?;
        for i in 0..d {
            jac[i * d + j] = (up.data()[i].to64() - um.data()[i].to64()) / (2.0 * h);
        }
    }
    // log |det| by Gaussian elimination with partial pivoting
    let mut logdet = 0.0f64;
    for col in 0..d {
        let mut pivot = col;
        for r in col + 1..d {
            if jac[r * d + col].abs() > jac[pivot * d + col].abs() {
                pivot = r;
            }
        }
        if jac[pivot * d + col] == 0.0 {
            return Err(Error::numeric("singular numerical Jacobian".to_string()));
        }
        if pivot != col {
            for k in 0..d {
                jac.swap(col * d + k, pivot * d + k);
            }
        }
        logdet += jac[col * d + col].abs().ln();
        for r in col + 1..d {
            let factor = jac[r * d + col] / jac[col * d + col];
            for k in col..d {
                jac[r * d + k] -= factor * jac[col * d + k];
            }
        }
    }
    Ok(logdet)
}

/// Mean per-sample standard-normal log density of `x`, for comparison
/// against `flow.logpdf` at identity initialization.
pub fn std_normal_logpdf<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, d) = x.dims2("std_normal_logpdf")?;
    let data: Vec<T> = (0..n)
        .map(|i| {
            let row = x.row(i).unwrap();
            let s: f64 = row.iter().map(|v| v.to64() * v.to64()).sum();
            T::of(-0.5 * (d as f64 * LN_2PI + s))
        })
        .collect();
    Tensor::new(vec![n], data)
}
