//! Stage one: a beta-TCVAE over the independent factors `C`.
//!
//! The encoder maps pixels to a diagonal Gaussian over `C`; the decoder maps
//! codes to Bernoulli pixel logits. The KL term of the ELBO is split into
//! index-code mutual information, total correlation, and dimension-wise KL,
//! with only the total correlation up-weighted by beta:
//! `loss = -recon + mi + beta * tc + dwkl`.
//!
//! The aggregate-posterior terms are estimated from the minibatch with
//! stratified weights: sample `i`'s own density enters with weight `1/N`
//! (its share in the dataset-level aggregate posterior) and the other `B-1`
//! batch terms with weight `(N-1)/(N(B-1))`. The weights sum to one, so the
//! estimate is exact when all posteriors coincide, and the three terms
//! telescope algebraically to `log q(c|x) - log p(c)` for beta = 1.

use crate::dist;
use crate::error::{Error, Result};
use crate::nn::{minibatches, AdamState, DenseIds, Mlp, ParamVisitor, TrainError};
use crate::rng::Rng;
use crate::scalar::Scalar;
use crate::tape::{NodeId, Tape};
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};

const LN_2PI: f64 = 1.8378770664093453;

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Stage1Config {
    pub beta: f64,
    pub c_dim: usize,
    pub hidden: usize,
    pub epochs: usize,
    pub batch: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Stage1Config {
            beta: 4.0,
            c_dim: 10,
            hidden: 256,
            epochs: 15,
            batch: 256,
            lr: 1e-3,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct Stage1Model<T> {
    pub encoder: Mlp<T>, // pixels -> hidden -> hidden -> 2*c_dim
    pub decoder: Mlp<T>, // c -> hidden -> hidden -> pixel logits
    pub beta: f64,
    pub c_dim: usize,
}

pub struct Stage1Ids {
    pub enc: Vec<DenseIds>,
    pub dec: Vec<DenseIds>,
}

#[derive(Debug, Clone, Copy, Serialize)]
pub struct TcvaeTerms {
    pub recon: f64,
    pub mi: f64,
    pub tc: f64,
    pub dwkl: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub recon: f64,
    pub mi: f64,
    pub tc: f64,
    pub dwkl: f64,
    pub total: f64,
}

pub struct TcvaeNodes {
    pub recon: NodeId,
    pub mi: NodeId,
    pub tc: NodeId,
    pub dwkl: NodeId,
    pub total: NodeId,
}

impl<T: Scalar> Stage1Model<T> {
    pub fn init(pixels: usize, cfg: &Stage1Config, rng: &mut Rng) -> Self {
        let encoder = Mlp::init(&[pixels, cfg.hidden, cfg.hidden, 2 * cfg.c_dim], rng);
        let decoder = Mlp::init(&[cfg.c_dim, cfg.hidden, cfg.hidden, pixels], rng);
        Stage1Model {
            encoder,
            decoder,
            beta: cfg.beta,
            c_dim: cfg.c_dim,
        }
    }

    pub fn pixels(&self) -> usize {
        self.encoder.in_dim()
    }

    pub fn split_ids(&self, ids: &[NodeId]) -> Stage1Ids {
        let mut it = ids.iter().copied();
        Stage1Ids {
            enc: self.encoder.bind_ids(&mut it),
            dec: self.decoder.bind_ids(&mut it),
        }
    }

    /// Encoder graph: pixels `[B x P]` to `(mean, logvar)` nodes over `C`.
    pub fn encode_nodes(
        &self,
        tape: &mut Tape<T>,
        ids: &Stage1Ids,
        x: NodeId,
    ) -> Result<(NodeId, NodeId)> {
        let full = self.encoder.forward(tape, &ids.enc, x)?;
        let mean = tape.slice_last(full, 0, self.c_dim)?;
        let logvar_raw = tape.slice_last(full, self.c_dim, 2 * self.c_dim)?;
        let logvar = tape.clamp(logvar_raw, dist::LOGVAR_MIN, dist::LOGVAR_MAX)?;
        Ok((mean, logvar))
    }

    pub fn decode_nodes(
        &self,
        tape: &mut Tape<T>,
        ids: &Stage1Ids,
        c: NodeId,
    ) -> Result<NodeId> {
        self.decoder.forward(tape, &ids.dec, c)
    }

    /// Posterior parameters for a batch of images `[B x P]`.
    pub fn encode(&self, x: &Tensor<T>) -> Result<dist::GaussianParams<T>> {
        let mut tape = Tape::new();
        let ids = self.split_ids(&self.bind(&mut tape));
        let xid = tape.constant(x.clone());
        let (mean, logvar) = self.encode_nodes(&mut tape, &ids, xid)?;
        dist::GaussianParams::new(tape.value(mean).clone(), tape.value(logvar).clone())
    }

    /// Pixel logits for a batch of codes `[B x C]`.
    pub fn decode(&self, c: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let ids = self.split_ids(&self.bind(&mut tape));
        let cid = tape.constant(c.clone());
        let logits = self.decode_nodes(&mut tape, &ids, cid)?;
        Ok(tape.value(logits).clone())
    }

    /// Decoded posterior means: `y = sigmoid(decode(mean(encode(x))))`,
    /// pixels in (0, 1). Deterministic per input.
    pub fn produce_y(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let q = self.encode(x)?;
        let logits = self.decode(&q.mean)?;
        Ok(logits.map(sigmoid))
    }

    /// Full loss graph. `x: [B x P]` and `noise: [B x C]` enter as
    /// constants; gradients flow to the bound parameters.
    pub fn tcvae_nodes(
        &self,
        tape: &mut Tape<T>,
        ids: &Stage1Ids,
        x: NodeId,
        noise: NodeId,
        dataset_size: usize,
    ) -> Result<TcvaeNodes> {
        let b = tape.value(x).dims()[0];
        if b < 2 {
            return Err(Error::contract(
                "tcvae loss needs batch size >= 2 for cross-sample terms".to_string(),
            ));
        }
        if dataset_size < b {
            return Err(Error::contract(format!(
                "dataset size {dataset_size} smaller than batch {b}"
            )));
        }
        let c_dim = self.c_dim;
        let (mean, logvar) = self.encode_nodes(tape, ids, x)?;
        let c = dist::reparam_node(tape, mean, logvar, noise)?;
        let logits = self.decode_nodes(tape, ids, c)?;
        let recon_rows = dist::bernoulli_logpmf_node(tape, x, logits)?;
        let recon = tape.mean_all(recon_rows)?;

        // log q(c_i | x_i), [B]
        let log_q_own = dist::gaussian_logpdf_node(tape, c, mean, logvar)?;

        // per-dimension cross densities log q(c_i,d | x_j), [B x B x C]
        let c3 = tape.reshape(c, &[b, 1, c_dim])?;
        let m3 = tape.reshape(mean, &[1, b, c_dim])?;
        let lv3 = tape.reshape(logvar, &[1, b, c_dim])?;
        let diff = tape.sub(c3, m3)?;
        let sq = tape.square(diff)?;
        let var3 = tape.exp(lv3)?;
        let maha = tape.div(sq, var3)?;
        let inner = tape.add(maha, lv3)?;
        let inner = tape.affine(inner, 1.0, LN_2PI)?;
        let log_per_dim = tape.affine(inner, -0.5, 0.0)?;

        // stratified weights: own term 1/N, others (N-1)/(N(B-1))
        let n = dataset_size as f64;
        let w_own = (1.0 / n).ln();
        let w_other = ((n - 1.0) / (n * (b as f64 - 1.0))).ln();
        let logw = Tensor::from_fn(&[b, b], |idx| {
            let (i, j) = (idx / b, idx % b);
            if i == j {
                T::of(w_own)
            } else {
                T::of(w_other)
            }
        });
        let logw_id = tape.constant(logw);

        // log q(c_i): weighted logsumexp over the joint densities
        let log_joint = tape.sum(log_per_dim, &[2], false)?; // [B x B]
        let log_joint_w = tape.add(log_joint, logw_id)?;
        let log_q = tape.logsumexp(log_joint_w, &[1], false)?; // [B]

        // sum_d log q(c_i,d): weighted logsumexp per dimension
        let logw3 = tape.reshape(logw_id, &[b, b, 1])?;
        let log_per_dim_w = tape.add(log_per_dim, logw3)?;
        let log_q_dim = tape.logsumexp(log_per_dim_w, &[1], false)?; // [B x C]
        let log_q_prod = tape.sum(log_q_dim, &[1], false)?; // [B]

        // log p(c_i) under the standard-normal prior
        let zeros = tape.constant(Tensor::zeros(&[1, c_dim]));
        let log_p = dist::gaussian_logpdf_node(tape, c, zeros, zeros)?;

        let mi_rows = tape.sub(log_q_own, log_q)?;
        let tc_rows = tape.sub(log_q, log_q_prod)?;
        let dwkl_rows = tape.sub(log_q_prod, log_p)?;
        let mi = tape.mean_all(mi_rows)?;
        let tc = tape.mean_all(tc_rows)?;
        let dwkl = tape.mean_all(dwkl_rows)?;

        let neg_recon = tape.affine(recon, -1.0, 0.0)?;
        let beta_tc = tape.affine(tc, self.beta, 0.0)?;
        let t1 = tape.add(neg_recon, mi)?;
        let t2 = tape.add(t1, beta_tc)?;
        let total = tape.add(t2, dwkl)?;

        Ok(TcvaeNodes { recon, mi, tc, dwkl, total })
    }

    /// Loss term values for a batch (no parameter update).
    pub fn tcvae_loss(
        &self,
        batch: &Tensor<T>,
        dataset_size: usize,
        noise: &Tensor<T>,
    ) -> Result<TcvaeTerms> {
        let mut tape = Tape::new();
        let ids = self.split_ids(&self.bind(&mut tape));
        let x = tape.constant(batch.clone());
        let n = tape.constant(noise.clone());
        let nodes = self.tcvae_nodes(&mut tape, &ids, x, n, dataset_size)?;
        Ok(TcvaeTerms {
            recon: tape.value(nodes.recon).item()?.to64(),
            mi: tape.value(nodes.mi).item()?.to64(),
            tc: tape.value(nodes.tc).item()?.to64(),
            dwkl: tape.value(nodes.dwkl).item()?.to64(),
            total: tape.value(nodes.total).item()?.to64(),
        })
    }
}

impl<T: Scalar> Stage1Model<T> {
    /// Named tensors for the MSMD container, plus a `meta` entry holding
    /// `[c_dim, beta]`.
    pub fn entries(&self) -> Vec<(String, Tensor<T>)> {
        let mut out = vec![(
            "meta".to_string(),
            Tensor::new(vec![2], vec![T::of(self.c_dim as f64), T::of(self.beta)])
                .expect("meta tensor"),
        )];
        out.extend(self.named_params());
        out
    }

    pub fn from_entries(mut entries: Vec<(String, Tensor<T>)>) -> Result<Self> {
        let meta = crate::io::take_entry(&mut entries, "meta")?;
        if meta.len() != 2 {
            return Err(Error::Format("stage1 meta entry malformed".to_string()));
        }
        Ok(Stage1Model {
            encoder: Mlp::from_entries("enc.", &entries)?,
            decoder: Mlp::from_entries("dec.", &entries)?,
            c_dim: meta.data()[0].to64() as usize,
            beta: meta.data()[1].to64(),
        })
    }
}

impl<T: Scalar> ParamVisitor<T> for Stage1Model<T> {
    fn visit(&self, f: &mut dyn FnMut(&str, &Tensor<T>)) {
        self.encoder.visit(&mut |n, t| f(&format!("enc.{n}"), t));
        self.decoder.visit(&mut |n, t| f(&format!("dec.{n}"), t));
    }
    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut Tensor<T>)) {
        self.encoder.visit_mut(&mut |n, t| f(&format!("enc.{n}"), t));
        self.decoder.visit_mut(&mut |n, t| f(&format!("dec.{n}"), t));
    }
}

fn sigmoid<T: Scalar>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

/// Trains a stage-1 model on images `[N x P]`. All randomness comes from
/// `cfg.seed`. Divergence aborts with the last finite-loss parameters.
pub fn train_stage1<T: Scalar>(
    cfg: &Stage1Config,
    images: &Tensor<T>,
) -> std::result::Result<(Stage1Model<T>, Vec<EpochLog>), TrainError<Stage1Model<T>>> {
    let (n, pixels) = images.dims2("train_stage1 images").map_err(TrainError::Failed)?;
    let mut rng = Rng::seed_from_u64(cfg.seed);
    let mut model = Stage1Model::init(pixels, cfg, &mut rng);
    let mut adam = AdamState::new(cfg.lr);
    let mut logs = Vec::with_capacity(cfg.epochs);

    for epoch in 0..cfg.epochs {
        let checkpoint = model.clone();
        let mut acc = [0.0f64; 5];
        let mut batches = 0usize;
        for idx in minibatches(n, cfg.batch, &mut rng) {
            let x = images.select_rows(&idx).map_err(TrainError::Failed)?;
            let noise: Tensor<T> = rng.normal_tensor(&[idx.len(), model.c_dim]);
            let step = (|| -> Result<TcvaeTerms> {
                let mut tape = Tape::new();
                let ids_flat = model.bind(&mut tape);
                let ids = model.split_ids(&ids_flat);
                let xid = tape.constant(x);
                let nid = tape.constant(noise);
                let nodes = model.tcvae_nodes(&mut tape, &ids, xid, nid, n)?;
                let grads = tape.backward(nodes.total)?;
                let gvec: Vec<Tensor<T>> =
                    ids_flat.iter().map(|&id| grads.wrt(&tape, id)).collect();
                let terms = TcvaeTerms {
                    recon: tape.value(nodes.recon).item()?.to64(),
                    mi: tape.value(nodes.mi).item()?.to64(),
                    tc: tape.value(nodes.tc).item()?.to64(),
                    dwkl: tape.value(nodes.dwkl).item()?.to64(),
                    total: tape.value(nodes.total).item()?.to64(),
                };
                adam.step(&mut model, &gvec)?;
                Ok(terms)
            })();
            match step {
                Ok(terms) => {
                    acc[0] += terms.recon;
                    acc[1] += terms.mi;
                    acc[2] += terms.tc;
                    acc[3] += terms.dwkl;
                    acc[4] += terms.total;
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
        let k = batches.max(1) as f64;
        logs.push(EpochLog {
            epoch,
            recon: acc[0] / k,
            mi: acc[1] / k,
            tc: acc[2] / k,
            dwkl: acc[3] / k,
            total: acc[4] / k,
        });
    }
    Ok((model, logs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::sample_dataset;
    use crate::nn::DenseLayer;
    use crate::tape::grad_check;

    fn tiny_cfg() -> Stage1Config {
        Stage1Config {
            beta: 4.0,
            c_dim: 3,
            hidden: 24,
            epochs: 2,
            batch: 16,
            lr: 1e-3,
            seed: 7,
        }
    }

    fn tiny_model(pixels: usize, seed: u64) -> Stage1Model<f64> {
        let mut rng = Rng::seed_from_u64(seed);
        Stage1Model::init(pixels, &tiny_cfg(), &mut rng)
    }

    #[test]
    fn encode_decode_smoke_no_nan() {
        let m = tiny_model(16, 1);
        let x = Tensor::<f64>::zeros(&[2, 16]);
        let q = m.encode(&x).unwrap();
        let logits = m.decode(&q.mean).unwrap();
        logits.check_finite("smoke").unwrap();
    }

    #[test]
    fn decode_is_deterministic() {
        let m = tiny_model(16, 2);
        let mut rng = Rng::seed_from_u64(5);
        let c = rng.normal_tensor::<f64>(&[3, 3]);
        assert_eq!(m.decode(&c).unwrap(), m.decode(&c).unwrap());
    }

    #[test]
    fn batched_encode_equals_per_row() {
        let m = tiny_model(16, 3);
        let mut rng = Rng::seed_from_u64(6);
        let x = rng.uniform_tensor::<f64>(&[4, 16], 0.0, 1.0);
        let q_all = m.encode(&x).unwrap();
        for i in 0..4 {
            let xi = x.select_rows(&[i]).unwrap();
            let qi = m.encode(&xi).unwrap();
            for j in 0..3 {
                let a = q_all.mean.data()[i * 3 + j];
                let b = qi.mean.data()[j];
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn beta_one_total_matches_plain_kl_estimator() {
        // mi + tc + dwkl telescopes to log q(c|x) - log p(c)
        let mut m = tiny_model(16, 4);
        m.beta = 1.0;
        let mut rng = Rng::seed_from_u64(9);
        let x = rng.uniform_tensor::<f64>(&[8, 16], 0.0, 1.0);
        let noise = rng.normal_tensor::<f64>(&[8, 3]);
        let terms = m.tcvae_loss(&x, 100, &noise).unwrap();

        // independent computation of the un-decomposed estimator
        let q = m.encode(&x).unwrap();
        let c = dist::reparam_sample(&q, &noise).unwrap();
        let log_q = dist::gaussian_logpdf(&c, &q).unwrap();
        let prior = dist::GaussianParams::standard(&[8, 3]);
        let log_p = dist::gaussian_logpdf(&c, &prior).unwrap();
        let kl_est = (0..8).map(|i| log_q.data()[i] - log_p.data()[i]).sum::<f64>() / 8.0;
        let decomposed = terms.mi + terms.tc + terms.dwkl;
        assert!(
            (decomposed - kl_est).abs() < 1e-6,
            "decomposed {decomposed} vs plain {kl_est}"
        );
        assert!((terms.total - (-terms.recon + decomposed)).abs() < 1e-9);
    }

    #[test]
    fn prior_encoder_gives_near_zero_terms() {
        // zero the encoder head: mean = 0, logvar = 0 for every input
        let mut m = tiny_model(256, 11);
        let last = m.encoder.layers.len() - 1;
        m.encoder.layers[last] = DenseLayer::zeroed(24, 6);
        let ds = sample_dataset::<f64>(256, 3).unwrap();
        let x = ds.images_flat();
        let mut rng = Rng::seed_from_u64(1);
        let noise = rng.normal_tensor::<f64>(&[256, 3]);
        let terms = m.tcvae_loss(&x, 256, &noise).unwrap();
        assert!(terms.mi.abs() < 0.05, "mi {}", terms.mi);
        assert!(terms.tc.abs() < 0.05, "tc {}", terms.tc);
        assert!(terms.dwkl.abs() < 0.05, "dwkl {}", terms.dwkl);
    }

    #[test]
    fn tcvae_terms_pass_grad_check() {
        let m = tiny_model(9, 12);
        let mut rng = Rng::seed_from_u64(14);
        let x = rng.uniform_tensor::<f64>(&[4, 9], 0.05, 0.95);
        let noise = rng.normal_tensor::<f64>(&[4, 3]);
        // gradient w.r.t. the first encoder weight matrix, through tc alone
        let w0 = m.encoder.layers[0].w.clone();
        let err = grad_check(
            |tape, wid| {
                let mut ids_flat = m.bind(tape);
                ids_flat[0] = wid;
                let ids = m.split_ids(&ids_flat);
                let xid = tape.constant(x.clone());
                let nid = tape.constant(noise.clone());
                let nodes = m.tcvae_nodes(tape, &ids, xid, nid, 64)?;
                Ok(nodes.tc)
            },
            &w0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "tc grad err {err}");

        // and through the full loss
        let err = grad_check(
            |tape, wid| {
                let mut ids_flat = m.bind(tape);
                ids_flat[0] = wid;
                let ids = m.split_ids(&ids_flat);
                let xid = tape.constant(x.clone());
                let nid = tape.constant(noise.clone());
                let nodes = m.tcvae_nodes(tape, &ids, xid, nid, 64)?;
                Ok(nodes.total)
            },
            &w0,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-4, "total grad err {err}");
    }

    #[test]
    fn batch_of_one_is_contract_error() {
        let m = tiny_model(16, 5);
        let x = Tensor::<f64>::zeros(&[1, 16]);
        let noise = Tensor::<f64>::zeros(&[1, 3]);
        assert!(matches!(
            m.tcvae_loss(&x, 100, &noise),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn training_is_seed_deterministic() {
        let ds = sample_dataset::<f32>(64, 2).unwrap();
        let x = ds.images_flat();
        let mut cfg = tiny_cfg();
        cfg.epochs = 2;
        let (m1, _) = train_stage1(&cfg, &x).unwrap();
        let (m2, _) = train_stage1(&cfg, &x).unwrap();
        assert_eq!(m1.named_params(), m2.named_params());
    }

    #[test]
    fn training_improves_heldout_elbo() {
        let ds = sample_dataset::<f32>(300, 8).unwrap();
        let train = ds.slice(0, 256).unwrap().images_flat();
        let test = ds.slice(256, 300).unwrap().images_flat();
        let mut cfg = tiny_cfg();
        cfg.epochs = 12;
        cfg.batch = 64;
        cfg.c_dim = 4;
        cfg.hidden = 48;

        let mut rng = Rng::seed_from_u64(cfg.seed);
        let initial = Stage1Model::<f32>::init(256, &cfg, &mut rng);
        let noise = Rng::seed_from_u64(77).normal_tensor::<f32>(&[44, 4]);
        let before = initial.tcvae_loss(&test, 300, &noise).unwrap();
        let (trained, logs) = train_stage1(&cfg, &train).unwrap();
        let after = trained.tcvae_loss(&test, 300, &noise).unwrap();
        // total is the negative (penalized) ELBO: lower is better
        assert!(
            after.total < before.total,
            "held-out loss did not improve: {} -> {}",
            before.total,
            after.total
        );
        assert_eq!(logs.len(), cfg.epochs);
    }

    #[test]
    fn higher_beta_lowers_tc() {
        // median over 3 seeds of the final tc at beta = 50 vs beta = 1
        let ds = sample_dataset::<f32>(512, 21).unwrap();
        let x = ds.images_flat();
        let mut base = tiny_cfg();
        base.epochs = 60;
        base.batch = 64;
        base.c_dim = 4;
        base.hidden = 64;
        base.lr = 2e-3;

        let run = |beta: f64, seed: u64| -> f64 {
            let mut cfg = base.clone();
            cfg.beta = beta;
            cfg.seed = seed;
            let (m, _) = train_stage1::<f32>(&cfg, &x).unwrap();
            let noise = Rng::seed_from_u64(5).normal_tensor::<f32>(&[x.dims()[0], 4]);
            m.tcvae_loss(&x, x.dims()[0], &noise).unwrap().tc
        };
        let median = |mut v: Vec<f64>| -> f64 {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        let tc_low = median((0..3).map(|s| run(1.0, s)).collect());
        let tc_high = median((0..3).map(|s| run(50.0, s)).collect());
        assert!(
            tc_high < tc_low,
            "beta=50 median tc {tc_high} not below beta=1 median tc {tc_low}"
        );
    }

    #[test]
    fn produce_y_in_unit_range_and_deterministic() {
        let m = tiny_model(16, 30);
        let mut rng = Rng::seed_from_u64(2);
        let x = rng.uniform_tensor::<f64>(&[5, 16], 0.0, 1.0);
        let y = m.produce_y(&x).unwrap();
        assert!(y.data().iter().all(|&v| (0.0..=1.0).contains(&v)));
        assert_eq!(y, m.produce_y(&x).unwrap());
    }

    #[test]
    fn divergent_lr_aborts_with_checkpoint() {
        let ds = sample_dataset::<f32>(64, 2).unwrap();
        let mut cfg = tiny_cfg();
        cfg.lr = 1e18;
        cfg.epochs = 30;
        match train_stage1(&cfg, &ds.images_flat()) {
            Err(TrainError::Diverged { last_good, .. }) => {
                last_good.encoder.layers[0].w.check_finite("checkpoint").unwrap();
            }
            Ok(_) => panic!("expected divergence at lr=1e18"),
            Err(e) => panic!("unexpected failure {e}"),
        }
    }
}
