use crate::config::*;
use crate::{Cli, CliError, Command, Precision};
use msgen_core::data::SynthDataset;
use msgen_core::dsep::{appendix_instance, Var};
use msgen_core::flow::ConditionalFlow;
use msgen_core::io::{load_msmd, save_msmd, save_tensor};
use msgen_core::metrics::{
    conditioning_metrics, factor_code_mi, frechet_gaussian, l1, mig, FrechetMode,
};
use msgen_core::nn::TrainError;
use msgen_core::pendulum::{
    sample_pendulum_dataset, train_hierarchy, traverse as pendulum_traverse, PendulumDataset,
    PendulumHierarchy, TraverseVar,
};
use msgen_core::stage1::{train_stage1, Stage1Model};
use msgen_core::stage2::{reconstruct, train_stage2, Stage2Model};
use msgen_core::tensor::Tensor;
use msgen_core::Scalar;
use serde::Serialize;
use std::path::Path;

macro_rules! with_precision {
    ($cli:expr, $f:ident) => {
        match $cli.precision {
            Precision::F32 => $f::<f32>($cli),
            Precision::F64 => $f::<f64>($cli),
        }
    };
}

pub fn run(cli: &Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenData => gen_data(cli),
        Command::GenPendulum => gen_pendulum(cli),
        Command::TrainStage1 => with_precision!(cli, cmd_train_stage1),
        Command::TrainStage2 => with_precision!(cli, cmd_train_stage2),
        Command::TrainMsflow => with_precision!(cli, cmd_train_msflow),
        Command::TrainPendulum => with_precision!(cli, cmd_train_pendulum),
        Command::EvalMetrics => with_precision!(cli, cmd_eval_metrics),
        Command::Traverse => with_precision!(cli, cmd_traverse),
        Command::DsepDemo => dsep_demo(cli),
        Command::GradCheck => grad_check(cli),
    }
}

fn write_jsonl<S: Serialize>(path: &Path, rows: &[S]) -> Result<(), CliError> {
    let mut out = String::new();
    for row in rows {
        out.push_str(&serde_json::to_string(row).map_err(|e| CliError { code: 1, message: e.to_string() })?);
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| CliError { code: 1, message: e.to_string() })?;
    Ok(())
}

fn gen_data(cli: &Cli) -> Result<(), CliError> {
    let cfg: GenDataCfg = cli.parse_config(false)?;
    let out = cli.prepare_out(&cfg)?;
    let ds: SynthDataset<f32> = msgen_core::data::sample_dataset(cfg.n, cfg.seed)?;
    ds.save(&out)?;
    println!("wrote {} images to {}", cfg.n, out.display());
    Ok(())
}

fn gen_pendulum(cli: &Cli) -> Result<(), CliError> {
    let cfg: GenPendulumCfg = cli.parse_config(false)?;
    let out = cli.prepare_out(&cfg)?;
    let ds = sample_pendulum_dataset(cfg.n, cfg.seed)?;
    ds.save(&out)?;
    println!("wrote {} trajectories to {}", cfg.n, out.display());
    Ok(())
}

/// Writes a divergence checkpoint and maps the error to exit code 3.
fn handle_train_error<M, F>(e: TrainError<M>, out: &Path, save: F) -> CliError
where
    F: FnOnce(&M, &Path) -> Result<(), msgen_core::Error>,
{
    match e {
        TrainError::Diverged { last_good, epoch, .. } => {
            let path = out.join("checkpoint.msmd");
            match save(&last_good, &path) {
                Ok(()) => CliError::diverged(&path, epoch),
                Err(save_err) => CliError {
                    code: 3,
                    message: format!("training diverged and checkpoint save failed: {save_err}"),
                },
            }
        }
        TrainError::Failed(err) => err.into(),
    }
}

fn cmd_train_stage1<T: Scalar>(cli: &Cli) -> Result<(), CliError> {
    let cfg: TrainStage1Cfg = cli.parse_config(true)?;
    let out = cli.prepare_out(&cfg)?;
    let ds: SynthDataset<T> = SynthDataset::load(&cfg.data)?;
    let (model, logs) = train_stage1(&cfg.core(), &ds.images_flat())
        .map_err(|e| handle_train_error(e, &out, |m: &Stage1Model<T>, p| save_msmd(p, &m.entries())))?;
    save_msmd(out.join("stage1.msmd"), &model.entries())?;
    write_jsonl(&out.join("train_log.jsonl"), &logs)?;
    let last = logs.last().map(|l| l.total).unwrap_or(f64::NAN);
    println!("stage1 trained ({} epochs, final loss {last:.4}); model at {}", logs.len(), out.join("stage1.msmd").display());
    Ok(())
}

fn cmd_train_stage2<T: Scalar>(cli: &Cli) -> Result<(), CliError> {
    let cfg: TrainStage2Cfg = cli.parse_config(true)?;
    let out = cli.prepare_out(&cfg)?;
    let ds: SynthDataset<T> = SynthDataset::load(&cfg.data)?;
    let stage1: Stage1Model<T> = Stage1Model::from_entries(load_msmd(&cfg.stage1)?)?;
    let (model, logs) = train_stage2(&cfg.core(), &ds.images_flat(), &stage1)
        .map_err(|e| handle_train_error(e, &out, |m: &Stage2Model<T>, p| save_msmd(p, &m.entries())))?;
    save_msmd(out.join("stage2.msmd"), &model.entries())?;
    write_jsonl(&out.join("train_log.jsonl"), &logs)?;
    let last = logs.last().map(|l| l.total).unwrap_or(f64::NAN);
    println!("stage2 trained ({} epochs, final loss {last:.4}); model at {}", logs.len(), out.join("stage2.msmd").display());
    Ok(())
}

fn cmd_train_msflow<T: Scalar>(cli: &Cli) -> Result<(), CliError> {
    let cfg: TrainMsflowCfg = cli.parse_config(true)?;
    let out = cli.prepare_out(&cfg)?;
    let ds: SynthDataset<T> = SynthDataset::load(&cfg.data)?;
    let save_flow = |f: &ConditionalFlow<T>, p: &Path| save_msmd(p, &f.entries());
    let (gmm, flow, logs) = msgen_core::flow::train_msflow(&cfg.core(), &ds.images_flat())
        .map_err(|e| handle_train_error(e, &out, save_flow))?;
    save_msmd(
        out.join("msflow.msmd"),
        &msgen_core::flow::container_entries(&gmm, &flow),
    )?;
    write_jsonl(&out.join("train_log.jsonl"), &logs)?;
    let last = logs.last().map(|l| l.mean_logpdf).unwrap_or(f64::NAN);
    println!("msflow trained ({} epochs, final mean log density {last:.2}); model at {}", logs.len(), out.join("msflow.msmd").display());
    Ok(())
}

fn cmd_train_pendulum<T: Scalar>(cli: &Cli) -> Result<(), CliError> {
    let cfg: TrainPendulumCfg = cli.parse_config(true)?;
    let out = cli.prepare_out(&cfg)?;
    let ds = PendulumDataset::load(&cfg.data)?;
    let h: PendulumHierarchy<T> = train_hierarchy(&cfg.core(), &ds)?;
    save_msmd(out.join("pendulum.msmd"), &h.entries())?;
    println!("pendulum hierarchy trained; model at {}", out.join("pendulum.msmd").display());
    Ok(())
}

#[derive(Serialize)]
struct MetricsReport {
    mig: f64,
    normalized_mi: f64,
    m1: f64,
    m2: f64,
    m3: f64,
    m4: f64,
    frechet_recon: f64,
    frechet_stage1: f64,
    l1: f64,
}

fn cmd_eval_metrics<T: Scalar>(cli: &Cli) -> Result<(), CliError> {
    let cfg: EvalMetricsCfg = cli.parse_config(true)?;
    if !(0.0 < cfg.holdout && cfg.holdout < 1.0) {
        return Err(CliError::invalid_config("holdout must be in (0, 1)"));
    }
    let out = cli.prepare_out(&cfg)?;
    let ds: SynthDataset<T> = SynthDataset::load(&cfg.data)?;
    let stage1: Stage1Model<T> = Stage1Model::from_entries(load_msmd(&cfg.stage1)?)?;
    let stage2: Stage2Model<T> = Stage2Model::from_entries(load_msmd(&cfg.stage2)?)?;

    let split = ((1.0 - cfg.holdout) * ds.len() as f64) as usize;
    let test = ds.slice(split, ds.len())?;
    let x = test.images_flat();
    let (y, x_hat) = reconstruct(&stage1, &stage2, &x)?;

    let codes = stage1.encode(&x)?.mean;
    let factors = test.independent_factors();
    let cm = conditioning_metrics(&stage1, &stage2, &x, cfg.seed, cfg.bins)?;

    let report = MetricsReport {
        mig: mig(&codes, &factors, cfg.bins)?,
        normalized_mi: factor_code_mi(&codes, &factors, cfg.bins)?,
        m1: cm.m1,
        m2: cm.m2,
        m3: cm.m3,
        m4: cm.m4,
        frechet_recon: frechet_gaussian(&x, &x_hat, FrechetMode::Diag)?,
        frechet_stage1: frechet_gaussian(&x, &y, FrechetMode::Diag)?,
        l1: l1(&x, &x_hat)?,
    };
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError { code: 1, message: e.to_string() })?;
    std::fs::write(out.join("metrics.json"), &text)
        .map_err(|e| CliError { code: 1, message: e.to_string() })?;
    println!("{text}");
    Ok(())
}

fn cmd_traverse<T: Scalar>(cli: &Cli) -> Result<(), CliError> {
    let raw: serde_json::Value = cli.parse_config(true)?;
    let kind = raw
        .get("kind")
        .and_then(|k| k.as_str())
        .ok_or_else(|| CliError::invalid_config("traverse config needs a \"kind\" key"))?
        .to_string();
    let mut rest = raw.clone();
    rest.as_object_mut().map(|o| o.remove("kind"));
    match kind.as_str() {
        "stage2" => {
            let cfg: TraverseStage2Cfg =
                serde_json::from_value(rest).map_err(CliError::invalid_config)?;
            traverse_stage2::<T>(cli, &cfg)
        }
        "pendulum" => {
            let cfg: TraversePendulumCfg =
                serde_json::from_value(rest).map_err(CliError::invalid_config)?;
            traverse_pendulum::<T>(cli, &cfg)
        }
        other => Err(CliError::invalid_config(format!("unknown traverse kind {other:?}"))),
    }
}

/// Sweeps each code dimension of one base image over a symmetric span and
/// dumps the stage-1 and refined image grids, `[c_dim x steps x pixels]`.
fn traverse_stage2<T: Scalar>(cli: &Cli, cfg: &TraverseStage2Cfg) -> Result<(), CliError> {
    let out = cli.prepare_out(cfg)?;
    if cfg.steps < 2 {
        return Err(CliError::invalid_config("steps must be >= 2"));
    }
    let ds: SynthDataset<T> = SynthDataset::load(&cfg.data)?;
    if cfg.row >= ds.len() {
        return Err(CliError::invalid_config(format!(
            "row {} out of dataset size {}",
            cfg.row,
            ds.len()
        )));
    }
    let stage1: Stage1Model<T> = Stage1Model::from_entries(load_msmd(&cfg.stage1)?)?;
    let stage2: Stage2Model<T> = Stage2Model::from_entries(load_msmd(&cfg.stage2)?)?;

    let x = ds.images_flat().select_rows(&[cfg.row])?;
    let base_code = stage1.encode(&x)?.mean;
    let y_base = stage1.produce_y(&x)?;
    let z = stage2.encode_residual(&x, &y_base)?.mean;
    let c_dim = stage1.c_dim;
    let pixels = stage2.pixels();

    let mut y_grid = Vec::with_capacity(c_dim * cfg.steps * pixels);
    let mut xhat_grid = Vec::with_capacity(c_dim * cfg.steps * pixels);
    for d in 0..c_dim {
        for s in 0..cfg.steps {
            let v = -cfg.span + 2.0 * cfg.span * s as f64 / (cfg.steps - 1) as f64;
            let code = base_code.with_flat(d, T::of(v))?;
            let y = stage1.decode(&code)?.map(sigmoid_scalar);
            let x_hat = stage2.refine(&y, &z)?;
            y_grid.extend_from_slice(y.data());
            xhat_grid.extend_from_slice(x_hat.data());
        }
    }
    let dims = vec![c_dim, cfg.steps, pixels];
    save_tensor(out.join("y_grid.mstn"), &Tensor::new(dims.clone(), y_grid)?)?;
    save_tensor(out.join("xhat_grid.mstn"), &Tensor::new(dims, xhat_grid)?)?;
    println!(
        "wrote {} x {} traversal grids to {}",
        c_dim,
        cfg.steps,
        out.display()
    );
    Ok(())
}

fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    let one = T::one();
    if x >= T::zero() {
        one / (one + (-x).exp())
    } else {
        let e = x.exp();
        e / (one + e)
    }
}

fn traverse_pendulum<T: Scalar>(cli: &Cli, cfg: &TraversePendulumCfg) -> Result<(), CliError> {
    let out = cli.prepare_out(cfg)?;
    if cfg.steps < 1 {
        return Err(CliError::invalid_config("steps must be >= 1"));
    }
    let which = match cfg.which.as_str() {
        "L" => TraverseVar::Length,
        "B" => TraverseVar::Damping,
        "Z" => TraverseVar::Z,
        other => {
            return Err(CliError::invalid_config(format!(
                "which must be L, B or Z, got {other:?}"
            )))
        }
    };
    let ds = PendulumDataset::load(&cfg.data)?;
    let h: PendulumHierarchy<T> = PendulumHierarchy::from_entries(load_msmd(&cfg.model)?)?;
    let grid: Vec<f64> = if cfg.steps == 1 {
        vec![cfg.from]
    } else {
        (0..cfg.steps)
            .map(|i| cfg.from + (cfg.to - cfg.from) * i as f64 / (cfg.steps - 1) as f64)
            .collect()
    };
    let t = pendulum_traverse(&h, which, &grid, &ds)?;
    save_tensor(out.join("y0.mstn"), &t.y0)?;
    save_tensor(out.join("y1.mstn"), &t.y1)?;
    save_tensor(out.join("theta.mstn"), &t.theta)?;
    println!("wrote {} traversal rows to {}", grid.len(), out.display());
    Ok(())
}

#[derive(Serialize)]
struct DsepRow {
    c: u32,
    z: u32,
    p: String,
}

#[derive(Serialize)]
struct DsepMarginalRow {
    value: u32,
    p: String,
}

#[derive(Serialize)]
struct DsepReport {
    p_cz_given_x4: Vec<DsepRow>,
    p_c_given_x4: Vec<DsepMarginalRow>,
    p_z_given_x4: Vec<DsepMarginalRow>,
    p_cz_given_x4_y1: Vec<DsepRow>,
    ci_c_z_given_x4: bool,
    ci_c_z_given_x4_y1: bool,
}

fn dsep_demo(cli: &Cli) -> Result<(), CliError> {
    let out = cli.prepare_out(&serde_json::json!({}))?;
    let dj = appendix_instance();
    let cond_x = dj.condition(&[(Var::X, 4)])?;
    let cond_xy = dj.condition(&[(Var::X, 4), (Var::Y, 1)])?;
    let rows = |t: &msgen_core::dsep::JointTable| -> Vec<DsepRow> {
        t.marginal2_rows(Var::C, Var::Z)
            .into_iter()
            .map(|(c, z, p)| DsepRow { c, z, p: p.to_string() })
            .collect()
    };
    let marginal = |t: &msgen_core::dsep::JointTable, v: Var| -> Vec<DsepMarginalRow> {
        t.marginal1_rows(v)
            .into_iter()
            .map(|(value, p)| DsepMarginalRow { value, p: p.to_string() })
            .collect()
    };
    let report = DsepReport {
        p_cz_given_x4: rows(&cond_x),
        p_c_given_x4: marginal(&cond_x, Var::C),
        p_z_given_x4: marginal(&cond_x, Var::Z),
        p_cz_given_x4_y1: rows(&cond_xy),
        ci_c_z_given_x4: dj.check_ci(Var::C, Var::Z, &[(Var::X, 4)])?,
        ci_c_z_given_x4_y1: dj.check_ci(Var::C, Var::Z, &[(Var::X, 4), (Var::Y, 1)])?,
    };
    let text = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError { code: 1, message: e.to_string() })?;
    std::fs::write(out.join("dsep.json"), &text)
        .map_err(|e| CliError { code: 1, message: e.to_string() })?;
    println!("{text}");
    Ok(())
}

fn grad_check(cli: &Cli) -> Result<(), CliError> {
    let out = cli.prepare_out(&serde_json::json!({}))?;
    let reports = msgen_core::verify::gradient_suite()?;
    let mut by_group: std::collections::BTreeMap<String, (usize, f64)> = Default::default();
    for r in &reports {
        let group = r.name.split('/').take(2).collect::<Vec<_>>().join("/");
        let entry = by_group.entry(group).or_insert((0, 0.0));
        entry.0 += 1;
        entry.1 = entry.1.max(r.max_rel_err);
    }
    for (group, (count, worst)) in &by_group {
        println!("{group}: {count} checks, worst rel err {worst:.3e}");
    }
    let max = msgen_core::verify::max_error(&reports);
    let tol = msgen_core::verify::GRAD_TOLERANCE;
    println!("max relative error = {max:.3e} ({} 1e-4)", if max < tol { "<" } else { ">=" });
    std::fs::write(
        out.join("grad_check.json"),
        serde_json::to_string_pretty(&serde_json::json!({
            "checks": reports.len(),
            "max_rel_err": max,
            "tolerance": tol,
            "pass": max < tol,
        }))
        .map_err(|e| CliError { code: 1, message: e.to_string() })?,
    )
    .map_err(|e| CliError { code: 1, message: e.to_string() })?;
    if max < tol {
        Ok(())
    } else {
        Err(CliError { code: 1, message: format!("gradient suite failed: {max:.3e} >= {tol}") })
    }
}
