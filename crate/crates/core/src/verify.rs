//! Finite-difference verification suite (64-bit, h = 1e-5): every registered
//! tape op at 10 random points each, and every loss in the repo against
//! small model instances, parameter tensor by parameter tensor. Shared by the
//! `grad-check` command and the acceptance tests.

use crate::dist;
use crate::error::Result;
use crate::flow::{ConditionalFlow, MsflowConfig};
use crate::nn::{Mlp, ParamVisitor};
use crate::pendulum::{CondGaussian, PendulumVae};
use crate::rng::Rng;
use crate::stage1::{Stage1Config, Stage1Model};
use crate::stage2::{Stage2Config, Stage2Model};
use crate::tape::{grad_check, NodeId, Tape};
use crate::tensor::Tensor;

pub const GRAD_TOLERANCE: f64 = 1e-4;
pub const FD_STEP: f64 = 1e-5;

/// One named check and its measured max relative error.
#[derive(Debug, Clone)]
pub struct GradReport {
    pub name: String,
    pub max_rel_err: f64,
}

/// Runs the op suite and the loss suite; errors bubble up, values are
/// reported per check.
pub fn gradient_suite() -> Result<Vec<GradReport>> {
    let mut out = Vec::new();
    op_suite(&mut out)?;
    loss_suite(&mut out)?;
    Ok(out)
}

pub fn max_error(reports: &[GradReport]) -> f64 {
    reports.iter().map(|r| r.max_rel_err).fold(0.0, f64::max)
}

fn check<F>(out: &mut Vec<GradReport>, name: &str, x: &Tensor<f64>, f: F) -> Result<()>
where
    F: Fn(&mut Tape<f64>, NodeId) -> Result<NodeId>,
{
    let err = grad_check(f, x, FD_STEP)?;
    out.push(GradReport {
        name: name.to_string(),
        max_rel_err: err,
    });
    Ok(())
}

/// Every registered op, 10 random points each. ReLU and clamp inputs are
/// kept away from their kinks, where the FD quotient is meaningless.
fn op_suite(out: &mut Vec<GradReport>) -> Result<()> {
    let mut rng = Rng::seed_from_u64(0xC0FFEE);
    for point in 0..10 {
        let w = rng.normal_tensor::<f64>(&[2, 3]);
        let probe = rng.normal_tensor::<f64>(&[2, 3]);
        let pos = rng.uniform_tensor::<f64>(&[2, 3], 0.2, 3.0);
        let away_from_zero = probe.map(|v| if v.abs() < 0.2 { v + 0.4 } else { v });
        let other = rng.normal_tensor::<f64>(&[2, 3]);
        let vec3 = rng.normal_tensor::<f64>(&[3]);
        let tag = |name: &str| format!("op/{name}/{point}");

        let weighted = |tape: &mut Tape<f64>, id: NodeId, w: &Tensor<f64>| -> Result<NodeId> {
            let wid = tape.constant(w.clone());
            let prod = tape.mul(id, wid)?;
            tape.sum_all(prod)
        };

        check(out, &tag("add"), &probe, |t, x| {
            let o = t.constant(other.clone());
            let r = t.add(x, o)?;
            weighted(t, r, &w)
        })?;
        check(out, &tag("add_broadcast"), &vec3, |t, x| {
            let o = t.constant(other.clone());
            let r = t.add(o, x)?;
            weighted(t, r, &w)
        })?;
        check(out, &tag("sub"), &probe, |t, x| {
            let o = t.constant(other.clone());
            let r = t.sub(o, x)?;
            weighted(t, r, &w)
        })?;
        check(out, &tag("mul"), &probe, |t, x| {
            let o = t.constant(other.clone());
            let r = t.mul(x, o)?;
            weighted(t, r, &w)
        })?;
        check(out, &tag("mul_broadcast"), &vec3, |t, x| {
            let o = t.constant(other.clone());
            let r = t.mul(o, x)?;
            weighted(t, r, &w)
        })?;
        check(out, &tag("div"), &probe, |t, x| {
            let o = t.constant(pos.clone());
            let r = t.div(x, o)?;
            weighted(t, r, &w)
        })?;
        check(out, &tag("div_denominator"), &pos, |t, x| {
            let o = t.constant(other.clone());
            let r = t.div(o, x)?;
            weighted(t, r, &w)
        })?;
        check(out, &tag("neg"), &probe, |t, x| {
            let r = t.neg(x)?;
            weighted(t, r, &w)
        })?;
        check(out, &tag("exp"), &probe, |t, x| {
            let r = t.exp(x)?;
            weighted(t, r, &w)
        })?;
        check(out, &tag("log"), &pos, |t, x| {
            let r = t.log(x)?;
            weighted(t, r, &w)
        })?;
        check(out, &tag("tanh"), &probe, |t, x| {
            let r = t.tanh(x)?;
            weighted(t, r, &w)
        })?;
        check(out, &tag("relu"), &away_from_zero, |t, x| {
            let r = t.relu(x)?;
            weighted(t, r, &w)
        })?;
        check(out, &tag("softplus"), &probe, |t, x| {
            let r = t.softplus(x)?;
            weighted(t, r, &w)
        })?;
        check(out, &tag("sigmoid"), &probe, |t, x| {
            let r = t.sigmoid(x)?;
            weighted(t, r, &w)
        })?;
        check(out, &tag("square"), &probe, |t, x| {
            let r = t.square(x)?;
            weighted(t, r, &w)
        })?;
        check(out, &tag("sqrt"), &pos, |t, x| {
            let r = t.sqrt(x)?;
            weighted(t, r, &w)
        })?;
        // clamp probed strictly inside and strictly outside the window
        check(out, &tag("clamp"), &probe, |t, x| {
            let r = t.clamp(x, -0.75, 0.75)?;
            weighted(t, r, &w)
        })?;
        check(out, &tag("affine"), &probe, |t, x| {
            let r = t.affine(x, 1.7, -0.3)?;
            weighted(t, r, &w)
        })?;
        check(out, &tag("matmul_lhs"), &probe, |t, x| {
            let o = t.constant(Tensor::from_fn(&[3, 4], |i| ((i % 5) as f64 - 2.0) * 0.3));
            let r = t.matmul(x, o)?;
            let wm = Tensor::from_fn(&[2, 4], |i| (i as f64 + 1.0) * 0.25);
            weighted(t, r, &wm)
        })?;
        check(out, &tag("matmul_rhs"), &probe, |t, x| {
            let o = t.constant(Tensor::from_fn(&[4, 2], |i| ((i % 7) as f64 - 3.0) * 0.2));
            let r = t.matmul(o, x)?;
            let wm = Tensor::from_fn(&[4, 3], |i| (i as f64 + 1.0) * 0.2);
            weighted(t, r, &wm)
        })?;
        check(out, &tag("transpose"), &probe, |t, x| {
            let r = t.transpose(x)?;
            let wm = Tensor::from_fn(&[3, 2], |i| (i as f64 - 2.5) * 0.4);
            weighted(t, r, &wm)
        })?;
        check(out, &tag("sum_axis"), &probe, |t, x| {
            let r = t.sum(x, &[0], false)?;
            let wm = Tensor::from_fn(&[3], |i| (i as f64 + 0.5) * 0.3);
            weighted(t, r, &wm)
        })?;
        check(out, &tag("mean_axis"), &probe, |t, x| {
            let r = t.mean(x, &[1], true)?;
            let wm = Tensor::from_fn(&[2, 1], |i| (i as f64 + 1.0) * 0.6);
            weighted(t, r, &wm)
        })?;
        check(out, &tag("reshape"), &probe, |t, x| {
            let r = t.reshape(x, &[3, 2])?;
            let wm = Tensor::from_fn(&[3, 2], |i| (i as f64 - 1.0) * 0.7);
            weighted(t, r, &wm)
        })?;
        check(out, &tag("concat_last"), &probe, |t, x| {
            let o = t.constant(other.clone());
            let r = t.concat_last(x, o)?;
            let wm = Tensor::from_fn(&[2, 6], |i| (i as f64 - 3.0) * 0.2);
            weighted(t, r, &wm)
        })?;
        check(out, &tag("slice_last"), &probe, |t, x| {
            let r = t.slice_last(x, 1, 3)?;
            let wm = Tensor::from_fn(&[2, 2], |i| (i as f64 + 0.3) * 0.5);
            weighted(t, r, &wm)
        })?;
        check(out, &tag("logsumexp"), &probe, |t, x| {
            let r = t.logsumexp(x, &[1], false)?;
            let wm = Tensor::from_fn(&[2], |i| (i as f64 + 1.0) * 0.4);
            weighted(t, r, &wm)
        })?;
    }
    Ok(())
}

/// Checks `loss(model)` against finite differences with respect to every
/// parameter tensor of `model`, one report per tensor.
fn check_all_params<M, F>(
    out: &mut Vec<GradReport>,
    label: &str,
    model: &M,
    loss: F,
) -> Result<()>
where
    M: ParamVisitor<f64>,
    F: Fn(&mut Tape<f64>, &[NodeId]) -> Result<NodeId>,
{
    let named = model.named_params();
    for (k, (name, tensor)) in named.iter().enumerate() {
        let err = grad_check(
            |tape, xid| {
                let mut ids = model.bind(tape);
                ids[k] = xid;
                loss(tape, &ids)
            },
            tensor,
            FD_STEP,
        )?;
        out.push(GradReport {
            name: format!("{label}/{name}"),
            max_rel_err: err,
        });
    }
    Ok(())
}

fn loss_suite(out: &mut Vec<GradReport>) -> Result<()> {
    let mut rng = Rng::seed_from_u64(0xFEED);

    // stage 1: beta-TCVAE loss
    let s1cfg = Stage1Config {
        c_dim: 3,
        hidden: 10,
        beta: 4.0,
        ..Default::default()
    };
    let s1: Stage1Model<f64> = Stage1Model::init(9, &s1cfg, &mut rng);
    let x1 = rng.uniform_tensor::<f64>(&[4, 9], 0.05, 0.95);
    let n1 = rng.normal_tensor::<f64>(&[4, 3]);
    check_all_params(out, "loss/tcvae", &s1, |tape, ids| {
        let split = s1.split_ids(ids);
        let xid = tape.constant(x1.clone());
        let nid = tape.constant(n1.clone());
        let nodes = s1.tcvae_nodes(tape, &split, xid, nid, 64)?;
        Ok(nodes.total)
    })?;

    // stage 2: conditional refinement loss
    let s2cfg = Stage2Config {
        z_dim: 2,
        slab_s: 4,
        hidden: 12,
        enc_hidden: 8,
        film_hidden: 6,
        ..Default::default()
    };
    let s2: Stage2Model<f64> = Stage2Model::init(9, &s2cfg, &mut rng)?;
    let x2 = rng.uniform_tensor::<f64>(&[3, 9], 0.1, 0.9);
    let y2 = rng.uniform_tensor::<f64>(&[3, 9], 0.1, 0.9);
    let n2 = rng.normal_tensor::<f64>(&[3, 2]);
    check_all_params(out, "loss/stage2", &s2, |tape, ids| {
        let split = s2.split_ids(ids);
        let xid = tape.constant(x2.clone());
        let yid = tape.constant(y2.clone());
        let nid = tape.constant(n2.clone());
        let (_, _, total) = s2.loss_nodes(tape, &split, xid, yid, nid)?;
        Ok(total)
    })?;

    // conditional flow log density
    let fcfg = MsflowConfig {
        layers: 2,
        hidden: 8,
        ..Default::default()
    };
    let mut flow: ConditionalFlow<f64> = ConditionalFlow::init(4, 2, &fcfg, &mut rng)?;
    for l in &mut flow.layers {
        let last = l.s_net.layers.len() - 1;
        l.s_net.layers[last] = crate::nn::DenseLayer::init(8, 4, &mut rng);
        l.t_net.layers[last] = crate::nn::DenseLayer::init(8, 4, &mut rng);
    }
    let xf = rng.normal_tensor::<f64>(&[3, 4]);
    let yf = rng.normal_tensor::<f64>(&[3, 2]);
    check_all_params(out, "loss/flow_logpdf", &flow, |tape, ids| {
        let split = flow.split_ids(ids);
        let xid = tape.constant(xf.clone());
        let yid = tape.constant(yf.clone());
        let lp = flow.logpdf_nodes(tape, &split, xid, yid)?;
        tape.mean_all(lp)
    })?;

    // pendulum fits: conditional-Gaussian MLE and the residual VAE
    let t_len = 8;
    let cg: CondGaussian<f64> = CondGaussian::init(&[1, 6, t_len], &mut rng);
    let lx = rng.uniform_tensor::<f64>(&[4, 1], 1.0, 3.0);
    let ty = rng.normal_tensor::<f64>(&[4, t_len]);
    check_all_params(out, "loss/pendulum_gaussian", &cg, |tape, ids| {
        let mut it = ids.iter().copied();
        let mlp_ids = cg.mlp.bind_ids(&mut it);
        let lv = it.next().expect("logvar id");
        let xid = tape.constant(lx.clone());
        let tid = tape.constant(ty.clone());
        let mean = cg.mlp.forward(tape, &mlp_ids, xid)?;
        let lp = dist::gaussian_logpdf_node(tape, tid, mean, lv)?;
        let m = tape.mean_all(lp)?;
        tape.affine(m, -1.0, 0.0)
    })?;

    let vae = PendulumVae {
        enc: Mlp::init(&[2 * t_len, 6, 2], &mut rng),
        dec: Mlp::init(&[1 + t_len, 6, t_len], &mut rng),
        dec_logvar: Tensor::zeros(&[1]),
    };
    let theta = rng.normal_tensor::<f64>(&[4, t_len]);
    let y1 = rng.normal_tensor::<f64>(&[4, t_len]);
    let nz = rng.normal_tensor::<f64>(&[4, 1]);
    check_all_params(out, "loss/pendulum_vae", &vae, |tape, ids| {
        let mut it = ids.iter().copied();
        let enc_ids = vae.enc.bind_ids(&mut it);
        let dec_ids = vae.dec.bind_ids(&mut it);
        let dec_lv = it.next().expect("dec logvar id");
        let theta_id = tape.constant(theta.clone());
        let y1_id = tape.constant(y1.clone());
        let noise_id = tape.constant(nz.clone());
        let resid = tape.sub(theta_id, y1_id)?;
        let enc_in = tape.concat_last(resid, y1_id)?;
        let full = vae.enc.forward(tape, &enc_ids, enc_in)?;
        let mean = tape.slice_last(full, 0, 1)?;
        let logvar_raw = tape.slice_last(full, 1, 2)?;
        let logvar = tape.clamp(logvar_raw, dist::LOGVAR_MIN, dist::LOGVAR_MAX)?;
        let z = dist::reparam_node(tape, mean, logvar, noise_id)?;
        let dec_in = tape.concat_last(z, y1_id)?;
        let theta_mean = vae.dec.forward(tape, &dec_ids, dec_in)?;
        let lp = dist::gaussian_logpdf_node(tape, theta_id, theta_mean, dec_lv)?;
        let recon = tape.mean_all(lp)?;
        let kl_rows = dist::kl_std_normal_node(tape, mean, logvar)?;
        let kl = tape.mean_all(kl_rows)?;
        let neg = tape.affine(recon, -1.0, 0.0)?;
        tape.add(neg, kl)
    })?;

    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn full_suite_stays_under_tolerance() {
        let reports = gradient_suite().unwrap();
        assert!(reports.len() > 200, "suite too small: {}", reports.len());
        let worst = reports
            .iter()
            .max_by(|a, b| a.max_rel_err.partial_cmp(&b.max_rel_err).unwrap())
            .unwrap();
        assert!(
            worst.max_rel_err < GRAD_TOLERANCE,
            "{} exceeded tolerance: {}",
            worst.name,
            worst.max_rel_err
        );
    }
}
