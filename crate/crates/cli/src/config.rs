//! Command config documents. Every struct rejects unknown keys; defaults
//! match the library's training defaults. A `--seed` flag on the command
//! line overrides the `seed` key after parsing.

use msgen_core::flow::MsflowConfig;
use msgen_core::pendulum::HierarchyConfig;
use msgen_core::stage1::Stage1Config;
use msgen_core::stage2::Stage2Config;
use serde::{Deserialize, Serialize};

fn d_n_data() -> usize {
    5000
}
fn d_n_pendulum() -> usize {
    1000
}
fn d_beta() -> f64 {
    4.0
}
fn d_c_dim() -> usize {
    10
}
fn d_hidden_s1() -> usize {
    256
}
fn d_epochs_s1() -> usize {
    30
}
fn d_batch() -> usize {
    256
}
fn d_lr() -> f64 {
    1e-3
}
fn d_z_dim() -> usize {
    5
}
fn d_epochs_s2() -> usize {
    20
}
fn d_sigma_x() -> f64 {
    0.1
}
fn d_slab_s() -> usize {
    16
}
fn d_hidden_s2() -> usize {
    256
}
fn d_enc_hidden() -> usize {
    128
}
fn d_film_hidden() -> usize {
    64
}
fn d_components() -> usize {
    10
}
fn d_layers() -> usize {
    6
}
fn d_em_iters() -> usize {
    40
}
fn d_epochs_flow() -> usize {
    10
}
fn d_batch_flow() -> usize {
    128
}
fn d_hidden_flow() -> usize {
    128
}
fn d_scale_cap() -> f64 {
    3.0
}
fn d_epochs_pend() -> usize {
    150
}
fn d_batch_pend() -> usize {
    64
}
fn d_lr_pend() -> f64 {
    2e-3
}
fn d_hidden_pend() -> usize {
    96
}
fn d_bins() -> usize {
    20
}
fn d_holdout() -> f64 {
    0.2
}
fn d_steps() -> usize {
    7
}
fn d_span() -> f64 {
    2.0
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GenDataCfg {
    #[serde(default = "d_n_data")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize, Default)]
#[serde(deny_unknown_fields)]
pub struct GenPendulumCfg {
    #[serde(default = "d_n_pendulum")]
    pub n: usize,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainStage1Cfg {
    pub data: String,
    #[serde(default = "d_beta")]
    pub beta: f64,
    #[serde(default = "d_c_dim")]
    pub c_dim: usize,
    #[serde(default = "d_hidden_s1")]
    pub hidden: usize,
    #[serde(default = "d_epochs_s1")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
}

impl TrainStage1Cfg {
    pub fn core(&self) -> Stage1Config {
        Stage1Config {
            beta: self.beta,
            c_dim: self.c_dim,
            hidden: self.hidden,
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            seed: self.seed,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainStage2Cfg {
    pub data: String,
    pub stage1: String,
    #[serde(default = "d_z_dim")]
    pub z_dim: usize,
    #[serde(default = "d_epochs_s2")]
    pub epochs: usize,
    #[serde(default = "d_batch")]
    pub batch: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_sigma_x")]
    pub sigma_x: f64,
    #[serde(default = "d_slab_s")]
    pub slab_s: usize,
    #[serde(default = "d_hidden_s2")]
    pub hidden: usize,
    #[serde(default = "d_enc_hidden")]
    pub enc_hidden: usize,
    #[serde(default = "d_film_hidden")]
    pub film_hidden: usize,
}

impl TrainStage2Cfg {
    pub fn core(&self) -> Stage2Config {
        Stage2Config {
            z_dim: self.z_dim,
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            seed: self.seed,
            sigma_x: self.sigma_x,
            slab_s: self.slab_s,
            hidden: self.hidden,
            enc_hidden: self.enc_hidden,
            film_hidden: self.film_hidden,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainMsflowCfg {
    pub data: String,
    #[serde(default = "d_components")]
    pub components: usize,
    #[serde(default = "d_layers")]
    pub layers: usize,
    #[serde(default = "d_em_iters")]
    pub em_iters: usize,
    #[serde(default = "d_epochs_flow")]
    pub epochs: usize,
    #[serde(default = "d_batch_flow")]
    pub batch: usize,
    #[serde(default = "d_lr")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_hidden_flow")]
    pub hidden: usize,
    #[serde(default = "d_scale_cap")]
    pub scale_cap: f64,
}

impl TrainMsflowCfg {
    pub fn core(&self) -> MsflowConfig {
        MsflowConfig {
            components: self.components,
            layers: self.layers,
            em_iters: self.em_iters,
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            seed: self.seed,
            hidden: self.hidden,
            scale_cap: self.scale_cap,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainPendulumCfg {
    pub data: String,
    #[serde(default = "d_epochs_pend")]
    pub epochs: usize,
    #[serde(default = "d_batch_pend")]
    pub batch: usize,
    #[serde(default = "d_lr_pend")]
    pub lr: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_hidden_pend")]
    pub hidden: usize,
}

impl TrainPendulumCfg {
    pub fn core(&self) -> HierarchyConfig {
        HierarchyConfig {
            epochs: self.epochs,
            batch: self.batch,
            lr: self.lr,
            seed: self.seed,
            hidden: self.hidden,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalMetricsCfg {
    pub data: String,
    pub stage1: String,
    pub stage2: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "d_bins")]
    pub bins: usize,
    #[serde(default = "d_holdout")]
    pub holdout: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraverseStage2Cfg {
    pub data: String,
    pub stage1: String,
    pub stage2: String,
    #[serde(default)]
    pub row: usize,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default = "d_span")]
    pub span: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TraversePendulumCfg {
    pub data: String,
    pub model: String,
    pub which: String, // "L" | "B" | "Z"
    pub from: f64,
    pub to: f64,
    #[serde(default = "d_steps")]
    pub steps: usize,
    #[serde(default)]
    pub seed: u64,
}
