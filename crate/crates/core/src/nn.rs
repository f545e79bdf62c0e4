//! Layers and optimizer: dense layers, adaptive instance normalization with a
//! FiLM parameter generator, and Adam.
//!
//! Models expose their parameters as an ordered, named list (see
//! [`ParamVisitor`]); training binds them onto a tape in that order, and Adam
//! and the MSMD container address them by the same order and names.

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;

pub const DEFAULT_EPS_NORM: f64 = 1e-5;

/// Ordered traversal of a model's parameter tensors.
pub trait ParamVisitor<T: Scalar> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>));
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>));

    fn named_params(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = Vec::new();
        self.visit(&mut |name, t| out.push((name.to_string(), t.clone())));
        out
    }

    fn param_count(&self) -> usize {
        let mut n = 0;
        self.visit(&mut |_, _| n += 1);
        n
    }

    /// Registers every parameter as a differentiable leaf, in visit order.
    fn bind(&self, tape: &mut Tape<T>) -> Vec<NodeId> {
        let mut ids = Vec::new();
        self.visit(&mut |_, t| ids.push(tape.leaf(t.clone())));
        ids
    }

    /// Overwrites parameters from a named-entry list (MSMD load).
    fn load_entries(&mut self, entries: &[(String, Tensor<T>)]) -> Result<()> {
        let mut missing = Vec::new();
        self.visit_mut(&mut |name, t| {
            match entries.iter().find(|(n, _)| n == name) {
                Some((_, v)) if v.dims() == t.dims() => *t = v.clone(),
                _ => missing.push(name.to_string()),
            }
        });
        if missing.is_empty() {
            Ok(())
        } else {
            Err(Error::format(format!("container missing/mismatched entries: {missing:?}")))
        }
    }
}

/// Fully connected layer, `W: [out x in]`, `b: [out]`.
#[derive(Debug, Clone)]
pub struct DenseLayer<T> {
    pub w: Tensor<T>,
    pub b: Tensor<T>,
}

impl<T: Scalar> DenseLayer<T> {
    /// Fan-in-scaled uniform initialization, `U(-sqrt(3/in), sqrt(3/in))`.
    pub fn init(input: usize, output: usize, rng: &mut Rng) -> Self {
        let limit = (3.0 / input as f64).sqrt();
        DenseLayer {
            w: rng.uniform_tensor(&[output, input], -limit, limit),
            b: Tensor::zeros(&[output]),
        }
    }

    /// All-zero weights and bias; the layer outputs zero for every input.
    pub fn zeroed(input: usize, output: usize) -> Self {
        DenseLayer {
            w: Tensor::zeros(&[output, input]),
            b: Tensor::zeros(&[output]),
        }
    }

    pub fn in_dim(&self) -> usize {
        self.w.dims()[1]
    }

    pub fn out_dim(&self) -> usize {
        self.w.dims()[0]
    }

    /// `x [B x in] -> x W^T + b [B x out]` on the tape.
    pub fn forward(&self, tape: &mut Tape<T>, ids: &DenseIds, x: NodeId) -> Result<NodeId> {
        let wt = tape.transpose(ids.w)?;
        let xw = tape.matmul(x, wt)?;
        tape.add(xw, ids.b)
    }

    /// Tape-free forward pass for inference paths.
    pub fn forward_plain(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        x.matmul(&self.w.transpose2()?)?.add(&self.b)
    }
}

/// Tape ids of one dense layer's parameters, in visit order (w, b).
#[derive(Debug, Clone, Copy)]
pub struct DenseIds {
    pub w: NodeId,
    pub b: NodeId,
}

impl DenseIds {
    pub fn take(ids: &mut impl Iterator<Item = NodeId>) -> Self {
        DenseIds {
            w: ids.next().expect("dense w id"),
            b: ids.next().expect("dense b id"),
        }
    }
}

impl<T: Scalar> ParamVisitor<T> for DenseLayer<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        f("w", &self.w);
        f("b", &self.b);
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        f("w", &mut self.w);
        f("b", &mut self.b);
    }
}

/// Multi-layer perceptron: ReLU after every layer except the last.
#[derive(Debug, Clone)]
pub struct Mlp<T> {
    pub layers: Vec<DenseLayer<T>>,
}

impl<T: Scalar> Mlp<T> {
    /// `sizes = [in, h1, ..., out]`.
    pub fn init(sizes: &[usize], rng: &mut Rng) -> Self {
        assert!(sizes.len() >= 2, "Mlp needs at least one layer");
        let layers = sizes
            .windows(2)
            .map(|w| DenseLayer::init(w[0], w[1], rng))
            .collect();
        Mlp { layers }
    }

    pub fn in_dim(&self) -> usize {
        self.layers.first().expect("non-empty mlp").in_dim()
    }

    pub fn out_dim(&self) -> usize {
        self.layers.last().expect("non-empty mlp").out_dim()
    }

    pub fn bind_ids(&self, ids: &mut impl Iterator<Item = NodeId>) -> Vec<DenseIds> {
        self.layers.iter().map(|_| DenseIds::take(ids)).collect()
    }

    pub fn forward(
        &self,
        tape: &mut Tape<T>,
        ids: &[DenseIds],
        x: NodeId,
    ) -> Result<NodeId> {
        let mut h = x;
        for (i, (layer, lid)) in self.layers.iter().zip(ids).enumerate() {
            h = layer.forward(tape, lid, h)?;
            if i + 1 < self.layers.len() {
                h = tape.relu(h)?;
            }
        }
        Ok(h)
    }

    pub fn forward_plain(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut h = x.clone();
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward_plain(&h)?;
            if i + 1 < self.layers.len() {
                h = h.map(|v| if v > T::zero() { v } else { T::zero() });
            }
        }
        Ok(h)
    }
}

impl<T: Scalar> Mlp<T> {
    /// Rebuilds an MLP from container entries named `{prefix}l{i}.w` /
    /// `{prefix}l{i}.b` for consecutive `i`.
    pub fn from_entries(prefix: &str, entries: &[(String, Tensor<T>)]) -> crate::error::Result<Self> {
        let mut layers = Vec::new();
        let mut i = 0;
        loop {
            let wn = format!("{prefix}l{i}.w");
            let bn = format!("{prefix}l{i}.b");
            let w = entries.iter().find(|(n, _)| *n == wn);
            let b = entries.iter().find(|(n, _)| *n == bn);
            match (w, b) {
                (Some((_, w)), Some((_, b))) => {
                    layers.push(DenseLayer { w: w.clone(), b: b.clone() });
                    i += 1;
                }
                (None, None) => break,
                _ => {
                    return Err(Error::format(format!("container has partial layer {prefix}l{i}")))
                }
            }
        }
        if layers.is_empty() {
            return Err(Error::format(format!("container has no layers under {prefix:?}")));
        }
        Ok(Mlp { layers })
    }
}

impl<T: Scalar> ParamVisitor<T> for Mlp<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        for (i, l) in self.layers.iter().enumerate() {
            f(&format!("l{i}.w"), &l.w);
            f(&format!("l{i}.b"), &l.b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            f(&format!("l{i}.w"), &mut l.w);
            f(&format!("l{i}.b"), &mut l.b);
        }
    }
}

// ── instance normalization ──────────────────────────────────────────────

/// Per-(sample, channel) statistics over the spatial extent of a
/// `[N x C x S]` slab: mean and `sqrt(var + eps_norm)`. Returns `[N x C]`
/// tensors. `S = 1` is allowed and gives `mu = y`, `sigma = sqrt(eps_norm)`.
pub fn instance_stats<T: Scalar>(
    tape: &mut Tape<T>,
    y: NodeId,
    eps_norm: f64,
) -> Result<(NodeId, NodeId)> {
    if eps_norm <= 0.0 {
        return Err(Error::domain("eps_norm must be positive".to_string()));
    }
    let dims = tape.value(y).dims().to_vec();
    if dims.len() != 3 {
        return Err(Error::dim(format!("instance stats expect [N x C x S], got {dims:?}")));
    }
    let mu_keep = tape.mean(y, &[2], true)?; // [N, C, 1]
    let centered = tape.sub(y, mu_keep)?;
    let sq = tape.square(centered)?;
    let var = tape.mean(sq, &[2], false)?; // [N, C]
    let var_eps = tape.affine(var, 1.0, eps_norm)?;
    let sigma = tape.sqrt(var_eps)?;
    let mu = tape.reshape(mu_keep, &[dims[0], dims[1]])?;
    Ok((mu, sigma))
}

/// Adaptive instance normalization:
/// `gamma * (y - mu(y)) / sigma(y) + beta`, per (sample, channel) slab.
/// `y: [N x C x S]`, `gamma`/`beta`: `[N x C]`. `eps_norm = 0` is accepted
/// here (exact normalization of a non-constant slab) even though
/// [`instance_stats`] requires it positive.
pub fn adain<T: Scalar>(
    tape: &mut Tape<T>,
    y: NodeId,
    gamma: NodeId,
    beta: NodeId,
    eps_norm: f64,
) -> Result<NodeId> {
    let dims = tape.value(y).dims().to_vec();
    if dims.len() != 3 {
        return Err(Error::dim(format!("adain expects [N x C x S], got {dims:?}")));
    }
    let (n, c) = (dims[0], dims[1]);
    for (name, id) in [("gamma", gamma), ("beta", beta)] {
        let d = tape.value(id).dims();
        if d != [n, c] {
            return Err(Error::dim(format!("adain {name} shape {d:?}, want [{n}, {c}]")));
        }
    }
    if eps_norm < 0.0 {
        return Err(Error::domain("eps_norm must be non-negative".to_string()));
    }
    let mu_keep = tape.mean(y, &[2], true)?;
    let centered = tape.sub(y, mu_keep)?;
    let sq = tape.square(centered)?;
    let var = tape.mean(sq, &[2], true)?; // [N, C, 1]
    let var_eps = tape.affine(var, 1.0, eps_norm)?;
    let sigma = tape.sqrt(var_eps)?;
    let normalized = tape.div(centered, sigma)?;
    let g3 = tape.reshape(gamma, &[n, c, 1])?;
    let b3 = tape.reshape(beta, &[n, c, 1])?;
    let scaled = tape.mul(normalized, g3)?;
    tape.add(scaled, b3)
}

// ── FiLM generator ──────────────────────────────────────────────────────

/// Maps the correlated code `z` to per-channel `(gamma, beta)` for each
/// modulated layer. The trunk is an ordinary ReLU MLP; each per-layer head is
/// zero-initialized and `gamma = 1 + head_gamma(z)`, so a freshly built
/// generator emits `gamma = 1`, `beta = 0` for every `z` — the modulated
/// decoder starts exactly `z`-independent.
#[derive(Debug, Clone)]
pub struct FilmGenerator<T> {
    pub trunk: Mlp<T>,
    pub heads: Vec<DenseLayer<T>>,
    channels: usize,
}

impl<T: Scalar> FilmGenerator<T> {
    pub fn init(
        z_dim: usize,
        hidden: usize,
        channels: usize,
        num_layers: usize,
        rng: &mut Rng,
    ) -> Self {
        let trunk = Mlp::init(&[z_dim, hidden], rng);
        let heads = (0..num_layers)
            .map(|_| DenseLayer::zeroed(hidden, 2 * channels))
            .collect();
        FilmGenerator { trunk, heads, channels }
    }

    pub fn num_layers(&self) -> usize {
        self.heads.len()
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn bind_ids(&self, ids: &mut impl Iterator<Item = NodeId>) -> FilmIds {
        FilmIds {
            trunk: self.trunk.bind_ids(ids),
            heads: self.heads.iter().map(|_| DenseIds::take(ids)).collect(),
        }
    }

    /// `(gamma, beta)` node pairs for every modulated layer; each `[B x C]`.
    pub fn generate(
        &self,
        tape: &mut Tape<T>,
        ids: &FilmIds,
        z: NodeId,
    ) -> Result<Vec<(NodeId, NodeId)>> {
        let h = self.trunk.forward(tape, &ids.trunk, z)?;
        let h = tape.relu(h)?;
        let c = self.channels;
        let mut out = Vec::with_capacity(self.heads.len());
        for (head, hid) in self.heads.iter().zip(&ids.heads) {
            let raw = head.forward(tape, hid, h)?; // [B, 2C]
            let gamma_raw = tape.slice_last(raw, 0, c)?;
            let beta = tape.slice_last(raw, c, 2 * c)?;
            let gamma = tape.affine(gamma_raw, 1.0, 1.0)?;
            out.push((gamma, beta));
        }
        Ok(out)
    }
}

impl<T: Scalar> FilmGenerator<T> {
    /// Rebuilds a generator from entries named `{prefix}trunk.*` and
    /// `{prefix}head{i}.{w,b}`.
    pub fn from_entries(
        prefix: &str,
        entries: &[(String, Tensor<T>)],
    ) -> crate::error::Result<Self> {
        let trunk = Mlp::from_entries(&format!("{prefix}trunk."), entries)?;
        let mut heads = Vec::new();
        let mut i = 0;
        while let Some((_, w)) = entries.iter().find(|(n, _)| *n == format!("{prefix}head{i}.w")) {
            let bn = format!("{prefix}head{i}.b");
            let (_, b) = entries
                .iter()
                .find(|(n, _)| *n == bn)
                .ok_or_else(|| Error::format(format!("missing {bn}")))?;
            heads.push(DenseLayer { w: w.clone(), b: b.clone() });
            i += 1;
        }
        if heads.is_empty() {
            return Err(Error::format("film generator has no heads".to_string()));
        }
        let channels = heads[0].out_dim() / 2;
        Ok(FilmGenerator { trunk, heads, channels })
    }
}

#[derive(Debug, Clone)]
pub struct FilmIds {
    pub trunk: Vec<DenseIds>,
    pub heads: Vec<DenseIds>,
}

impl<T: Scalar> ParamVisitor<T> for FilmGenerator<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.trunk.visit(&mut |n, t| f(&format!("trunk.{n}"), t));
        for (i, h) in self.heads.iter().enumerate() {
            f(&format!("head{i}.w"), &h.w);
            f(&format!("head{i}.b"), &h.b);
        }
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.trunk.visit_mut(&mut |n, t| f(&format!("trunk.{n}"), t));
        for (i, h) in self.heads.iter_mut().enumerate() {
            f(&format!("head{i}.w"), &mut h.w);
            f(&format!("head{i}.b"), &mut h.b);
        }
    }
}

/// One-layer FiLM modulation: `adain(y, gamma(z), beta(z))` using head
/// `layer` of the generator.
pub fn film_modulate<T: Scalar>(
    tape: &mut Tape<T>,
    y: NodeId,
    z: NodeId,
    gen: &FilmGenerator<T>,
    gen_ids: &FilmIds,
    layer: usize,
    eps_norm: f64,
) -> Result<NodeId> {
    let dims = tape.value(y).dims();
    if dims.len() != 3 || dims[1] != gen.channels() {
        return Err(Error::dim(format!(
            "film_modulate: slab {dims:?} does not match generator channels {}",
            gen.channels()
        )));
    }
    let pairs = gen.generate(tape, gen_ids, z)?;
    let (gamma, beta) = pairs
        .get(layer)
        .copied()
        .ok_or_else(|| Error::contract(format!("film layer {layer} out of range")))?;
    adain(tape, y, gamma, beta, eps_norm)
}

// ── training plumbing ───────────────────────────────────────────────────

/// Error from a training loop. Divergence carries the last parameters that
/// produced a finite loss so the caller can checkpoint them.
#[derive(Debug)]
pub enum TrainError<M> {
    Diverged {
        last_good: Box<M>,
        epoch: usize,
        source: crate::error::Error,
    },
    Failed(crate::error::Error),
}

impl<M> From<crate::error::Error> for TrainError<M> {
    fn from(e: crate::error::Error) -> Self {
        TrainError::Failed(e)
    }
}

impl<M> std::fmt::Display for TrainError<M> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            TrainError::Diverged { epoch, source, .. } => {
                write!(f, "training diverged at epoch {epoch}: {source}")
            }
            TrainError::Failed(e) => write!(f, "{e}"),
        }
    }
}

/// Shuffled minibatch index sets. A trailing batch smaller than 2 is dropped
/// (cross-sample estimators need at least two rows).
pub fn minibatches(n: usize, batch: usize, rng: &mut Rng) -> Vec<Vec<usize>> {
    let order = rng.permutation(n);
    let mut out = Vec::new();
    let mut start = 0;
    while start < n {
        let end = (start + batch).min(n);
        if end - start >= 2 {
            out.push(order[start..end].to_vec());
        }
        start = end;
    }
    out
}

// ── Adam ────────────────────────────────────────────────────────────────

/// Bias-corrected Adam. Moment accumulators are laid out in the same order
/// as the model's parameter visit.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    step: u64,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(lr: f64) -> Self {
        AdamState {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    /// One update over a model's parameters. `grads` must be in visit order.
    pub fn step<M: ParamVisitor<T>>(&mut self, model: &mut M, grads: &[Tensor<T>]) -> Result<()> {
        for g in grads {
            g.check_finite("adam gradient")?;
        }
        if self.m.is_empty() {
            let mut shapes = Vec::new();
            model.visit(&mut |_, t| shapes.push(t.dims().to_vec()));
            if shapes.len() != grads.len() {
                return Err(Error::contract(format!(
                    "adam: {} gradients for {} parameters",
                    grads.len(),
                    shapes.len()
                )));
            }
            self.m = shapes.iter().map(|d| Tensor::zeros(d)).collect();
            self.v = shapes.iter().map(|d| Tensor::zeros(d)).collect();
        } else if self.m.len() != grads.len() {
            return Err(Error::contract("adam: gradient count changed".to_string()));
        }
        self.step += 1;
        let t = self.step as f64;
        let b1 = T::of(self.beta1);
        let b2 = T::of(self.beta2);
        let one = T::one();
        let corr1 = T::of(1.0 - self.beta1.powf(t));
        let corr2 = T::of(1.0 - self.beta2.powf(t));
        let lr = T::of(self.lr);
        let eps = T::of(self.eps_opt);
        let mut k = 0usize;
        let mut status = Ok(());
        model.visit_mut(&mut |name, p| {
            if status.is_err() {
                return;
            }
            let g = &grads[k];
            if g.dims() != p.dims() {
                status = Err(Error::contract(format!(
                    "adam: gradient shape {:?} for parameter {name} {:?}",
                    g.dims(),
                    p.dims()
                )));
                return;
            }
            let m = &mut self.m[k];
            let v = &mut self.v[k];
            for i in 0..g.len() {
                let gi = g.data()[i];
                let mi = b1 * m.data()[i] + (one - b1) * gi;
                let vi = b2 * v.data()[i] + (one - b2) * gi * gi;
                m.data_mut()[i] = mi;
                v.data_mut()[i] = vi;
                let m_hat = mi / corr1;
                let v_hat = vi / corr2;
                p.data_mut()[i] = p.data()[i] - lr * m_hat / (v_hat.sqrt() + eps);
            }
            k += 1;
        });
        status
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tape::grad_check;

    fn t64(dims: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(dims.to_vec(), data.to_vec()).unwrap()
    }

    fn stats_of(y: Tensor<f64>, eps: f64) -> (Tensor<f64>, Tensor<f64>) {
        let mut tape = Tape::new();
        let yid = tape.constant(y);
        let (mu, sigma) = instance_stats(&mut tape, yid, eps).unwrap();
        (tape.value(mu).clone(), tape.value(sigma).clone())
    }

    #[test]
    fn constant_slab_stats() {
        let eps = 1e-5;
        let (mu, sigma) = stats_of(Tensor::full(&[1, 1, 4], 3.25), eps);
        assert!((mu.item().unwrap() - 3.25).abs() < 1e-12);
        assert!((sigma.item().unwrap() - eps.sqrt()).abs() < 1e-12);
    }

    #[test]
    fn two_point_slab_stats() {
        let eps = 1e-5;
        let (mu, sigma) = stats_of(t64(&[1, 1, 2], &[1.0, 3.0]), eps);
        assert!((mu.item().unwrap() - 2.0).abs() < 1e-12);
        assert!((sigma.item().unwrap() - (1.0 + eps).sqrt()).abs() < 1e-12);
    }

    #[test]
    fn single_spatial_point_stats() {
        let eps = 1e-5;
        let (mu, sigma) = stats_of(t64(&[1, 2, 1], &[0.7, -0.4]), eps);
        assert_eq!(mu.data(), &[0.7, -0.4]);
        for &s in sigma.data() {
            assert!((s - eps.sqrt()).abs() < 1e-12);
        }
    }

    fn run_adain(y: Tensor<f64>, g: Tensor<f64>, b: Tensor<f64>, eps: f64) -> Tensor<f64> {
        let mut tape = Tape::new();
        let yid = tape.constant(y);
        let gid = tape.constant(g);
        let bid = tape.constant(b);
        let out = adain(&mut tape, yid, gid, bid, eps).unwrap();
        tape.value(out).clone()
    }

    #[test]
    fn adain_direct_evaluation() {
        // y=[1,3], gamma=2, beta=5, eps=0 -> [3,7]
        let out = run_adain(
            t64(&[1, 1, 2], &[1.0, 3.0]),
            t64(&[1, 1], &[2.0]),
            t64(&[1, 1], &[5.0]),
            0.0,
        );
        assert!((out.data()[0] - 3.0).abs() < 1e-12);
        assert!((out.data()[1] - 7.0).abs() < 1e-12);
    }

    #[test]
    fn adain_identity_on_standardized_slab() {
        let y = t64(&[1, 1, 4], &[-1.0, 1.0, -1.0, 1.0]);
        let out = run_adain(y.clone(), t64(&[1, 1], &[1.0]), t64(&[1, 1], &[0.0]), 0.0);
        for (a, b) in out.data().iter().zip(y.data()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn adain_output_statistics() {
        // output slab: mean = beta, std = gamma * sigma_y / sqrt(sigma_y^2 + eps)
        let mut rng = Rng::seed_from_u64(11);
        let eps = 1e-3;
        for _ in 0..20 {
            let y: Tensor<f64> = rng.normal_tensor(&[2, 3, 8]);
            let gamma: Tensor<f64> = rng.uniform_tensor(&[2, 3], 0.5, 2.0);
            let beta: Tensor<f64> = rng.uniform_tensor(&[2, 3], -1.0, 1.0);
            let out = run_adain(y.clone(), gamma.clone(), beta.clone(), eps);
            for n in 0..2 {
                for c in 0..3 {
                    let slab: Vec<f64> =
                        (0..8).map(|s| out.data()[(n * 3 + c) * 8 + s]).collect();
                    let mean = slab.iter().sum::<f64>() / 8.0;
                    let var = slab.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 8.0;
                    let yin: Vec<f64> =
                        (0..8).map(|s| y.data()[(n * 3 + c) * 8 + s]).collect();
                    let ymean = yin.iter().sum::<f64>() / 8.0;
                    let yvar = yin.iter().map(|v| (v - ymean) * (v - ymean)).sum::<f64>() / 8.0;
                    let g = gamma.data()[n * 3 + c];
                    let b = beta.data()[n * 3 + c];
                    assert!((mean - b).abs() < 1e-5, "mean {mean} vs beta {b}");
                    let expect_std = g * yvar.sqrt() / (yvar + eps).sqrt();
                    assert!((var.sqrt() - expect_std).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn adain_invariant_to_input_affine_rescaling() {
        let mut rng = Rng::seed_from_u64(5);
        for _ in 0..20 {
            let y: Tensor<f64> = rng.normal_tensor(&[1, 2, 6]);
            let gamma: Tensor<f64> = rng.uniform_tensor(&[1, 2], 0.5, 1.5);
            let beta: Tensor<f64> = rng.uniform_tensor(&[1, 2], -0.5, 0.5);
            let a = rng.uniform_f64(0.1, 3.0);
            let b = rng.uniform_f64(-2.0, 2.0);
            let y2 = y.map(|v| a * v + b);
            let o1 = run_adain(y, gamma.clone(), beta.clone(), 0.0);
            let o2 = run_adain(y2, gamma, beta, 0.0);
            for (u, v) in o1.data().iter().zip(o2.data()) {
                assert!((u - v).abs() < 1e-9, "{u} vs {v}");
            }
        }
    }

    #[test]
    fn film_generator_is_identity_at_init() {
        let mut rng = Rng::seed_from_u64(3);
        let gen: FilmGenerator<f64> = FilmGenerator::init(4, 16, 3, 2, &mut rng);
        let mut tape = Tape::new();
        let ids: Vec<NodeId> = gen.bind(&mut tape);
        let fids = gen.bind_ids(&mut ids.into_iter());
        for z_seed in 0..3u64 {
            let z = Rng::seed_from_u64(z_seed).normal_tensor::<f64>(&[2, 4]);
            let zid = tape.constant(z);
            let pairs = gen.generate(&mut tape, &fids, zid).unwrap();
            for (g, b) in pairs {
                assert!(tape.value(g).data().iter().all(|&v| v == 1.0));
                assert!(tape.value(b).data().iter().all(|&v| v == 0.0));
            }
        }
    }

    #[test]
    fn film_modulated_output_changes_after_training_step() {
        let mut rng = Rng::seed_from_u64(9);
        let mut gen: FilmGenerator<f64> = FilmGenerator::init(2, 8, 2, 1, &mut rng);
        let y = rng.normal_tensor::<f64>(&[1, 2, 4]);
        let z1 = t64(&[1, 2], &[1.0, -1.0]);
        let z2 = t64(&[1, 2], &[-1.0, 2.0]);

        let run = |gen: &FilmGenerator<f64>, z: &Tensor<f64>| -> Tensor<f64> {
            let mut tape = Tape::new();
            let ids = gen.bind(&mut tape);
            let fids = gen.bind_ids(&mut ids.into_iter());
            let yid = tape.constant(y.clone());
            let zid = tape.constant(z.clone());
            let out = film_modulate(&mut tape, yid, zid, gen, &fids, 0, 1e-5).unwrap();
            tape.value(out).clone()
        };

        assert_eq!(run(&gen, &z1), run(&gen, &z2));

        let mut tape = Tape::new();
        let ids = gen.bind(&mut tape);
        let fids = gen.bind_ids(&mut ids.clone().into_iter());
        let yid = tape.constant(y.clone());
        let zid = tape.constant(z1.clone());
        let out = film_modulate(&mut tape, yid, zid, &gen, &fids, 0, 1e-5).unwrap();
        let sq = tape.square(out).unwrap();
        let loss = tape.mean_all(sq).unwrap();
        let grads = tape.backward(loss).unwrap();
        let gvec: Vec<Tensor<f64>> = ids.iter().map(|&id| grads.wrt(&tape, id)).collect();
        let mut adam = AdamState::new(0.05);
        adam.step(&mut gen, &gvec).unwrap();

        assert_ne!(run(&gen, &z1), run(&gen, &z2));
    }

    #[test]
    fn adam_zero_gradient_keeps_params() {
        let mut rng = Rng::seed_from_u64(1);
        let mut layer: DenseLayer<f64> = DenseLayer::init(3, 2, &mut rng);
        let before = layer.named_params();
        let grads = vec![Tensor::zeros(&[2, 3]), Tensor::zeros(&[2])];
        let mut adam = AdamState::new(0.1);
        adam.step(&mut layer, &grads).unwrap();
        assert_eq!(layer.named_params(), before);
        assert_eq!(adam.step_count(), 1);
    }

    #[test]
    fn adam_first_step_magnitude_on_quadratic() {
        // f(x) = x^2/2 at x0 = 1: first bias-corrected update is ~ lr * sign(g)
        struct One(Tensor<f64>);
        impl ParamVisitor<f64> for One {
            fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<f64>)) {
                f("x", &self.0);
            }
            fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<f64>)) {
                f("x", &mut self.0);
            }
        }
        let mut p = One(Tensor::scalar(1.0));
        let grad = Tensor::scalar(1.0);
        let mut adam = AdamState::new(0.1);
        adam.step(&mut p, &[grad]).unwrap();
        let x1 = p.0.item().unwrap();
        assert!((1.0 - x1 - 0.1).abs() < 1e-6, "update {}", 1.0 - x1);
    }

    #[test]
    fn adam_rejects_non_finite_gradient() {
        let mut rng = Rng::seed_from_u64(1);
        let mut layer: DenseLayer<f64> = DenseLayer::init(2, 2, &mut rng);
        let bad = Tensor::from_parts(vec![2, 2], vec![f64::NAN; 4]);
        let mut adam = AdamState::new(0.1);
        let r = adam.step(&mut layer, &[bad, Tensor::zeros(&[2])]);
        assert!(matches!(r, Err(crate::error::Error::Numeric(_))));
    }

    #[test]
    fn dense_and_adain_pass_grad_check() {
        let mut rng = Rng::seed_from_u64(21);
        let x = rng.normal_tensor::<f64>(&[2, 3]);
        let layer: DenseLayer<f64> = DenseLayer::init(3, 4, &mut rng);
        let w = layer.w.clone();
        let err = grad_check(
            |tape, wid| {
                let b = tape.constant(layer.b.clone());
                let xid = tape.constant(x.clone());
                let ids = DenseIds { w: wid, b };
                let out = layer.forward(tape, &ids, xid)?;
                let act = tape.tanh(out)?;
                tape.mean_all(act)
            },
            &w,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "dense grad err {err}");

        let y = rng.normal_tensor::<f64>(&[2, 2, 5]);
        let gamma = rng.uniform_tensor::<f64>(&[2, 2], 0.5, 1.5);
        let beta = rng.uniform_tensor::<f64>(&[2, 2], -0.5, 0.5);
        let err = grad_check(
            |tape, yid| {
                let g = tape.constant(gamma.clone());
                let b = tape.constant(beta.clone());
                let out = adain(tape, yid, g, b, 1e-5)?;
                let sq = tape.square(out)?;
                tape.mean_all(sq)
            },
            &y,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "adain grad err {err}");
    }
}
