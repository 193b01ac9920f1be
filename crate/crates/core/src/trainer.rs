//! Adam with step decay over the three-branch (DA) and single-branch (SB)
//! objectives.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tape, Tensor, TensorError};
use crate::dataset_io::{BatchIter, CropMode, DatasetError, ImageStore, Preprocess, TripletBatch};
use crate::losses::{
    ground_truth_tensors, log_header, log_line, total_da_loss, total_sb_loss, BtConfig, DaWeights, LearnableScales, LossError,
    DA_COMPONENTS, SB_COMPONENTS,
};
use crate::model::{ArchConfig, Checkpoint, ForwardOutput, LossScales, Mode, ModelError, ModelParams, Network, Profile};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("config line {line}: {reason}")]
    ConfigParse { line: usize, reason: String },
    #[error("non-finite gradient for {param}")]
    NonFiniteGradient { param: String },
    #[error("non-finite loss {value} at step {step}")]
    NonFiniteLoss { step: usize, value: f64 },
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Loss(#[from] LossError),
    #[error(transparent)]
    Data(#[from] DatasetError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> TrainError + '_ {
    move |source| TrainError::Io {
        path: path.display().to_string(),
        source,
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Regime {
    /// Real, fog and night branches with Barlow Twins and L2 coupling.
    Da,
    /// Real images and the pose loss only.
    Sb,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Da => "da",
            Regime::Sb => "sb",
        })
    }
}

impl FromStr for Regime {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "da" => Ok(Regime::Da),
            "sb" => Ok(Regime::Sb),
            _ => Err(TrainError::Config(format!("unknown regime {s:?} (da, sb)"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// Small backbone on 64 x 64 crops, minutes on a laptop CPU.
    Desk,
    /// Full-scale indoor schedule.
    Indoor,
    /// Full-scale outdoor schedule.
    Outdoor,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Desk, Preset::Indoor, Preset::Outdoor];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Desk => "desk",
            Preset::Indoor => "indoor",
            Preset::Outdoor => "outdoor",
        }
    }

    pub fn preprocess(self) -> Preprocess {
        match self {
            Preset::Desk => Preprocess::DESK,
            Preset::Indoor | Preset::Outdoor => Preprocess::FULL,
        }
    }
}

impl fmt::Display for Preset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Preset {
    type Err = TrainError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| TrainError::Config(format!("unknown preset {s:?} (desk, indoor, outdoor)")))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub regime: Regime,
    pub preset: Preset,
    pub profile: Profile,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub step_size: usize,
    pub gamma: f64,
    pub bt: BtConfig,
    pub weights: DaWeights,
    /// Epochs at the start of DA training during which the Barlow Twins and
    /// L2 consistency terms are switched off.
    pub consistency_warmup: usize,
    pub adam: AdamConfig,
    pub latent_dim: usize,
    pub heads: usize,
    pub attention_dropout: f64,
    pub seed: u64,
}

/// Config keys in file order.
pub const KEYS: [&str; 24] = [
    "regime",
    "preset",
    "profile",
    "epochs",
    "batch_size",
    "lr",
    "weight_decay",
    "step_size",
    "gamma",
    "lambda",
    "alpha1",
    "alpha2",
    "bt_eps",
    "weight_bt",
    "weight_l2",
    "weight_aug_pose",
    "consistency_warmup",
    "beta1",
    "beta2",
    "adam_eps",
    "latent_dim",
    "heads",
    "attention_dropout",
    "seed",
];

impl Default for TrainConfig {
    fn default() -> Self {
        Self::preset(Preset::Desk)
    }
}

impl TrainConfig {
    pub fn preset(preset: Preset) -> Self {
        // From random initialisation the consistency terms stall pose
        // learning, so the desk preset enables them after the first decay.
        let (profile, epochs, batch_size, step_size, gamma, latent_dim, consistency_warmup) = match preset {
            Preset::Desk => (Profile::DeskSmall, 60, 16, 20, 0.5, 32, 20),
            Preset::Indoor => (Profile::MobileNetV3Large, 120, 32, 20, 0.5, 512, 0),
            Preset::Outdoor => (Profile::MobileNetV3Large, 600, 64, 150, 0.1, 256, 0),
        };
        Self {
            regime: Regime::Da,
            preset,
            profile,
            epochs,
            batch_size,
            lr: 1e-3,
            weight_decay: 1e-4,
            step_size,
            gamma,
            bt: BtConfig::default(),
            weights: DaWeights::default(),
            consistency_warmup,
            adam: AdamConfig::default(),
            latent_dim,
            heads: 7,
            attention_dropout: 0.0025,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::Config(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be positive, got {}", self.lr));
        }
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return bad(format!("gamma must be in (0, 1], got {}", self.gamma));
        }
        if self.epochs == 0 {
            return bad("epochs must be at least 1".into());
        }
        if self.step_size == 0 {
            return bad("step_size must be at least 1".into());
        }
        if self.batch_size == 0 || (self.regime == Regime::Da && self.batch_size < 2) {
            return bad(format!("batch_size {} too small for regime {}", self.batch_size, self.regime));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be non-negative, got {}", self.weight_decay));
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || !(self.adam.eps > 0.0) {
            return bad("adam betas must be in [0, 1) and eps positive".into());
        }
        if !(0.0..1.0).contains(&self.attention_dropout) {
            return bad(format!("attention_dropout must be in [0, 1), got {}", self.attention_dropout));
        }
        self.bt.validate()?;
        Network::new(self.arch_config())?;
        Ok(())
    }

    /// Backbone for the profile with the head settings of this config.
    pub fn arch_config(&self) -> ArchConfig {
        let mut a = self.profile.config();
        a.latent_dim = self.latent_dim;
        a.mha_heads = self.heads;
        a.attention_dropout = self.attention_dropout;
        a
    }

    pub fn preprocess(&self) -> Preprocess {
        self.preset.preprocess()
    }

    /// Loss weights in effect during `epoch`.
    pub fn weights_at(&self, epoch: usize) -> DaWeights {
        if epoch < self.consistency_warmup {
            DaWeights {
                bt: 0.0,
                l2: 0.0,
                ..self.weights
            }
        } else {
            self.weights
        }
    }

    pub fn get(&self, key: &str) -> Option<String> {
        Some(match key {
            "regime" => self.regime.to_string(),
            "preset" => self.preset.to_string(),
            "profile" => self.profile.to_string(),
            "epochs" => self.epochs.to_string(),
            "batch_size" => self.batch_size.to_string(),
            "lr" => self.lr.to_string(),
            "weight_decay" => self.weight_decay.to_string(),
            "step_size" => self.step_size.to_string(),
            "gamma" => self.gamma.to_string(),
            "lambda" => self.bt.lambda.to_string(),
            "alpha1" => self.bt.alpha1.to_string(),
            "alpha2" => self.bt.alpha2.to_string(),
            "bt_eps" => self.bt.eps.to_string(),
            "weight_bt" => self.weights.bt.to_string(),
            "weight_l2" => self.weights.l2.to_string(),
            "weight_aug_pose" => self.weights.aug_pose.to_string(),
            "consistency_warmup" => self.consistency_warmup.to_string(),
            "beta1" => self.adam.beta1.to_string(),
            "beta2" => self.adam.beta2.to_string(),
            "adam_eps" => self.adam.eps.to_string(),
            "latent_dim" => self.latent_dim.to_string(),
            "heads" => self.heads.to_string(),
            "attention_dropout" => self.attention_dropout.to_string(),
            "seed" => self.seed.to_string(),
            _ => return None,
        })
    }

    /// Sets one field from its text form. `preset` only records the name;
    /// use [`TrainConfig::resolve`] to expand a preset.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), TrainError> {
        fn num<T: FromStr>(key: &str, v: &str) -> Result<T, TrainError>
        where
            T::Err: fmt::Display,
        {
            v.parse::<T>().map_err(|e| TrainError::Config(format!("{key} = {v:?}: {e}")))
        }
        match key {
            "regime" => self.regime = value.parse()?,
            "preset" => self.preset = value.parse()?,
            "profile" => self.profile = value.parse()?,
            "epochs" => self.epochs = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "lr" => self.lr = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "step_size" => self.step_size = num(key, value)?,
            "gamma" => self.gamma = num(key, value)?,
            "lambda" => self.bt.lambda = num(key, value)?,
            "alpha1" => self.bt.alpha1 = num(key, value)?,
            "alpha2" => self.bt.alpha2 = num(key, value)?,
            "bt_eps" => self.bt.eps = num(key, value)?,
            "weight_bt" => self.weights.bt = num(key, value)?,
            "weight_l2" => self.weights.l2 = num(key, value)?,
            "weight_aug_pose" => self.weights.aug_pose = num(key, value)?,
            "consistency_warmup" => self.consistency_warmup = num(key, value)?,
            "beta1" => self.adam.beta1 = num(key, value)?,
            "beta2" => self.adam.beta2 = num(key, value)?,
            "adam_eps" => self.adam.eps = num(key, value)?,
            "latent_dim" => self.latent_dim = num(key, value)?,
            "heads" => self.heads = num(key, value)?,
            "attention_dropout" => self.attention_dropout = num(key, value)?,
            "seed" => self.seed = num(key, value)?,
            _ => return Err(TrainError::Config(format!("unknown key {key:?}"))),
        }
        Ok(())
    }

    /// `key = value` lines in a fixed order.
    pub fn to_kv_text(&self) -> String {
        KEYS.iter()
            .map(|k| format!("{k} = {}\n", self.get(k).expect("known key")))
            .collect()
    }

    /// Parses `key = value` lines; `#` starts a comment.
    pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, TrainError> {
        let mut out = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| TrainError::ConfigParse {
                line: i + 1,
                reason: format!("expected key = value, got {line:?}"),
            })?;
            let (k, v) = (k.trim(), v.trim());
            if !KEYS.contains(&k) {
                return Err(TrainError::ConfigParse {
                    line: i + 1,
                    reason: format!("unknown key {k:?}"),
                });
            }
            out.push((k.to_string(), v.to_string()));
        }
        Ok(out)
    }

    /// Flags over config file over preset over built-in defaults. The preset
    /// comes from the flags, else the file, else desk.
    pub fn resolve(file: &[(String, String)], flags: &[(String, String)]) -> Result<Self, TrainError> {
        let pick = |list: &[(String, String)]| list.iter().rev().find(|(k, _)| k == "preset").map(|(_, v)| v.clone());
        let preset = match pick(flags).or_else(|| pick(file)) {
            Some(p) => p.parse()?,
            None => Preset::Desk,
        };
        let mut cfg = Self::preset(preset);
        for (k, v) in file.iter().chain(flags) {
            if k != "preset" {
                cfg.set(k, v)?;
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

/// `lr * gamma^floor(epoch / step_size)`.
pub fn lr_schedule(epoch: usize, cfg: &TrainConfig) -> f64 {
    cfg.lr * cfg.gamma.powi((epoch / cfg.step_size.max(1)) as i32)
}

/// Names under which the loss scales take part in optimisation.
pub const SCALE_PARAMS: [&str; 2] = ["loss.s_x", "loss.s_q"];

#[derive(Clone, Debug, Default, PartialEq)]
pub struct OptimizerState {
    pub step: u64,
    pub m: BTreeMap<String, Vec<f64>>,
    pub v: BTreeMap<String, Vec<f64>>,
}

/// One Adam update with L2 weight decay folded into the gradient. A
/// non-finite gradient aborts before anything is modified.
pub fn adam_step<'a>(
    params: impl IntoIterator<Item = (&'a str, &'a mut Tensor)>,
    grads: &BTreeMap<String, Tensor>,
    state: &mut OptimizerState,
    lr: f64,
    adam: &AdamConfig,
    weight_decay: f64,
) -> Result<(), TrainError> {
    let params: Vec<(&str, &mut Tensor)> = params.into_iter().collect();
    for (name, p) in &params {
        if let Some(g) = grads.get(*name) {
            if !g.is_finite() {
                return Err(TrainError::NonFiniteGradient { param: name.to_string() });
            }
            if g.shape() != p.shape() {
                return Err(TrainError::Config(format!(
                    "gradient for {name} has shape {:?}, parameter {:?}",
                    g.shape(),
                    p.shape()
                )));
            }
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - adam.beta1.powi(t);
    let c2 = 1.0 - adam.beta2.powi(t);
    for (name, p) in params {
        let n = p.numel();
        let m = state.m.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let v = state.v.entry(name.to_string()).or_insert_with(|| vec![0.0; n]);
        let g = grads.get(name).map(Tensor::data);
        let data: Vec<f64> = p
            .data()
            .iter()
            .enumerate()
            .map(|(i, &w)| {
                let gi = g.map_or(0.0, |g| g[i]) + weight_decay * w;
                m[i] = adam.beta1 * m[i] + (1.0 - adam.beta1) * gi;
                v[i] = adam.beta2 * v[i] + (1.0 - adam.beta2) * gi * gi;
                w - lr * (m[i] / c1) / ((v[i] / c2).sqrt() + adam.eps)
            })
            .collect();
        *p = Tensor::new(p.shape().to_vec(), data)?;
    }
    Ok(())
}

/// Loss value, components and gradients for one batch.
#[derive(Clone, Debug)]
pub struct LossEval {
    pub total: f64,
    pub components: Vec<(&'static str, f64)>,
    /// Keyed by parameter path, plus [`SCALE_PARAMS`].
    pub grads: BTreeMap<String, Tensor>,
}

fn stack_rows(parts: &[&Tensor]) -> Result<Tensor, TensorError> {
    let mut shape = parts[0].shape().to_vec();
    shape[0] = parts.iter().map(|t| t.shape()[0]).sum();
    let data = parts.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(shape, data)
}

fn branch<'t>(out: &ForwardOutput<'t>, k: usize, n: usize) -> Result<ForwardOutput<'t>, TensorError> {
    Ok(ForwardOutput {
        feature: out.feature.rows(k * n, n)?,
        latent_t: out.latent_t.rows(k * n, n)?,
        latent_r: out.latent_r.rows(k * n, n)?,
        t: out.t.rows(k * n, n)?,
        q_raw: out.q_raw.rows(k * n, n)?,
    })
}

/// Forward and backward for one batch. DA runs the real, fog and night
/// crops as one stacked batch (real rows first) through shared weights.
pub fn loss_and_gradients(
    net: &Network,
    params: &ModelParams,
    scales: LossScales,
    batch: &TripletBatch,
    cfg: &TrainConfig,
    mode: Mode,
) -> Result<LossEval, TrainError> {
    let tape = Tape::new();
    let bound = params.bind(&tape, true);
    let s = LearnableScales {
        s_x: tape.leaf(Tensor::scalar(scales.s_x)),
        s_q: tape.leaf(Tensor::scalar(scales.s_q)),
    };
    let (gt_t, gt_q) = ground_truth_tensors(&batch.labels);
    let (gt_t, gt_q) = (tape.constant(gt_t), tape.constant(gt_q));
    let n = batch.labels.len();
    let breakdown = match cfg.regime {
        Regime::Da => {
            let images = tape.constant(stack_rows(&[&batch.real, &batch.fog, &batch.night])?);
            let out = net.forward(&bound, images, mode)?;
            let branches = [branch(&out, 0, n)?, branch(&out, 1, n)?, branch(&out, 2, n)?];
            total_da_loss(&branches, gt_t, gt_q, &cfg.bt, s, &cfg.weights)?
        }
        Regime::Sb => {
            let out = net.forward(&bound, tape.constant(batch.real.clone()), mode)?;
            total_sb_loss(&out, gt_t, gt_q, s)?
        }
    };
    let total = breakdown.total.value().item().unwrap_or(f64::NAN);
    let components = breakdown.values();
    let g = breakdown.total.backward()?;
    let mut grads = BTreeMap::new();
    for (name, var) in bound.iter() {
        let grad = g.get(var).cloned().unwrap_or_else(|| Tensor::zeros(&var.shape()));
        grads.insert(name.clone(), grad);
    }
    for (name, var) in SCALE_PARAMS.iter().zip([s.s_x, s.s_q]) {
        grads.insert(name.to_string(), g.get(&var).cloned().unwrap_or_else(|| Tensor::scalar(0.0)));
    }
    Ok(LossEval { total, components, grads })
}

fn mix(seed: u64, stream: u64, index: u64) -> u64 {
    // splitmix64 finaliser over a combined key.
    let mut z = seed ^ stream.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ index.wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Seed of the attention dropout mask at a global step.
pub fn dropout_seed(seed: u64, step: usize) -> u64 {
    mix(seed, 2, step as u64)
}

/// Seed of the shuffle and crop stream of an epoch.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    mix(seed, 1, epoch as u64)
}

/// Result of one optimisation step.
#[derive(Clone, Debug)]
pub struct StepReport {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub components: Vec<(&'static str, f64)>,
}

/// Parameters, loss scales and optimizer state of a run.
pub struct Trainer {
    pub cfg: TrainConfig,
    pub net: Network,
    pub params: ModelParams,
    pub scales: LossScales,
    pub opt: OptimizerState,
    pub step: usize,
    pub epoch: usize,
}

impl Trainer {
    pub fn new(cfg: TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let net = Network::new(cfg.arch_config())?;
        let params = net.init_params(cfg.seed);
        Ok(Self {
            cfg,
            net,
            params,
            scales: LossScales::default(),
            opt: OptimizerState::default(),
            step: 0,
            epoch: 0,
        })
    }

    pub fn component_names(&self) -> &'static [&'static str] {
        match self.cfg.regime {
            Regime::Da => &DA_COMPONENTS,
            Regime::Sb => &SB_COMPONENTS,
        }
    }

    pub fn evaluate(&self, batch: &TripletBatch, mode: Mode) -> Result<LossEval, TrainError> {
        loss_and_gradients(&self.net, &self.params, self.scales, batch, &self.cfg, mode)
    }

    /// One forward, one backward, one Adam update at learning rate `lr`
    /// with the configured loss weights.
    pub fn step_with(&mut self, batch: &TripletBatch, mode: Mode, lr: f64) -> Result<StepReport, TrainError> {
        let eval = self.evaluate(batch, mode)?;
        self.apply(eval, lr)
    }

    fn apply(&mut self, eval: LossEval, lr: f64) -> Result<StepReport, TrainError> {
        if !eval.total.is_finite() {
            return Err(TrainError::NonFiniteLoss {
                step: self.step,
                value: eval.total,
            });
        }
        let mut s_x = Tensor::scalar(self.scales.s_x);
        let mut s_q = Tensor::scalar(self.scales.s_q);
        let named = self
            .params
            .iter_mut()
            .map(|(k, v)| (k.as_str(), v))
            .chain([(SCALE_PARAMS[0], &mut s_x), (SCALE_PARAMS[1], &mut s_q)]);
        adam_step(named, &eval.grads, &mut self.opt, lr, &self.cfg.adam, self.cfg.weight_decay)?;
        self.scales = LossScales {
            s_x: s_x.data()[0],
            s_q: s_q.data()[0],
        };
        let report = StepReport {
            step: self.step,
            lr,
            total: eval.total,
            components: eval.components,
        };
        self.step += 1;
        Ok(report)
    }

    /// A training step at the scheduled learning rate and loss weights with
    /// the run's dropout stream.
    pub fn step(&mut self, batch: &TripletBatch) -> Result<StepReport, TrainError> {
        let lr = lr_schedule(self.epoch, &self.cfg);
        let mode = Mode::Train {
            dropout_seed: dropout_seed(self.cfg.seed, self.step),
        };
        let cfg = TrainConfig {
            weights: self.cfg.weights_at(self.epoch),
            ..self.cfg.clone()
        };
        let eval = loss_and_gradients(&self.net, &self.params, self.scales, batch, &cfg, mode)?;
        self.apply(eval, lr)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        let mut ck = Checkpoint::new(self.net.config().clone(), self.params.clone(), self.scales);
        let meta = [
            ("epoch", self.epoch.to_string()),
            ("step", self.step.to_string()),
            ("regime", self.cfg.regime.to_string()),
            ("preset", self.cfg.preset.to_string()),
            ("seed", self.cfg.seed.to_string()),
            ("adam_beta1", self.cfg.adam.beta1.to_string()),
            ("adam_beta2", self.cfg.adam.beta2.to_string()),
            ("adam_eps", self.cfg.adam.eps.to_string()),
        ];
        ck.meta = meta.into_iter().map(|(k, v)| (k.to_string(), v)).collect();
        ck
    }

    /// Runs every remaining epoch over `store`. With `out_dir`, writes
    /// `config.txt`, `loss.log` (one row per step), `latest` after each
    /// epoch and `final` at the end.
    pub fn run(&mut self, store: &ImageStore, out_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
        if store.preprocess != self.cfg.preprocess() {
            return Err(TrainError::Config(format!(
                "store preprocessing {:?} does not match preset {}",
                store.preprocess, self.cfg.preset
            )));
        }
        let mut log = log_header(self.component_names());
        log.push('\n');
        let mut writer = match out_dir {
            Some(dir) => {
                fs::create_dir_all(dir).map_err(io_err(dir))?;
                let cfg_path = dir.join("config.txt");
                fs::write(&cfg_path, self.cfg.to_kv_text()).map_err(io_err(&cfg_path))?;
                let log_path = dir.join("loss.log");
                let mut w = BufWriter::new(fs::File::create(&log_path).map_err(io_err(&log_path))?);
                w.write_all(log.as_bytes()).map_err(io_err(&log_path))?;
                Some((w, log_path))
            }
            None => None,
        };
        let augmented = self.cfg.regime == Regime::Da;
        while self.epoch < self.cfg.epochs {
            let iter = BatchIter::new(store, self.cfg.batch_size, epoch_seed(self.cfg.seed, self.epoch), CropMode::Train, augmented)?;
            let mut sum = 0.0;
            let mut count = 0;
            for batch in iter {
                let r = self.step(&batch?)?;
                let line = log_line(r.step, r.total, &r.components);
                if let Some((w, p)) = writer.as_mut() {
                    writeln!(w, "{line}").map_err(io_err(p))?;
                }
                log.push_str(&line);
                log.push('\n');
                sum += r.total;
                count += 1;
            }
            self.epoch += 1;
            info!(
                "epoch {}/{} lr {:.3e} mean loss {:.5}",
                self.epoch,
                self.cfg.epochs,
                lr_schedule(self.epoch - 1, &self.cfg),
                sum / count.max(1) as f64
            );
            if let Some((w, p)) = writer.as_mut() {
                w.flush().map_err(io_err(p))?;
                if let Some(dir) = out_dir {
                    self.checkpoint().save(&dir.join("latest"))?;
                }
            }
        }
        let checkpoint = self.checkpoint();
        let final_path = out_dir.map(|d| d.join("final"));
        if let Some(p) = &final_path {
            checkpoint.save(p)?;
        }
        Ok(TrainOutcome {
            checkpoint,
            log,
            final_path,
        })
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub checkpoint: Checkpoint,
    /// Full loss log text, identical to `loss.log` when written.
    pub log: String,
    pub final_path: Option<PathBuf>,
}

fn train_regime(store: &ImageStore, cfg: &TrainConfig, regime: Regime, out_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    if cfg.regime != regime {
        return Err(TrainError::Config(format!("config regime is {}, expected {regime}", cfg.regime)));
    }
    Trainer::new(cfg.clone())?.run(store, out_dir)
}

/// Three-branch training; `store` must hold real, fog and night images.
pub fn train_da(store: &ImageStore, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    train_regime(store, cfg, Regime::Da, out_dir)
}

/// Single-branch baseline on the real images of `store`.
pub fn train_sb(store: &ImageStore, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    train_regime(store, cfg, Regime::Sb, out_dir)
}

pub fn train(store: &ImageStore, cfg: &TrainConfig, out_dir: Option<&Path>) -> Result<TrainOutcome, TrainError> {
    train_regime(store, cfg, cfg.regime, out_dir)
}
