//! Training objectives: redundancy reduction between domain embeddings,
//! latent consistency, the learnable-weight pose loss and their sum.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::autodiff::{Tensor, TensorError, Var};
use crate::model::ForwardOutput;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum LossError {
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("predicted quaternion norm {norm:e} is too small to normalise")]
    DegenerateQuaternion { norm: f64 },
    #[error("expected {expected} branches, got {got}")]
    MissingBranch { expected: usize, got: usize },
    #[error("invalid loss configuration: {0}")]
    InvalidConfig(String),
}

const MIN_QUAT_NORM: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BtConfig {
    pub lambda: f64,
    pub alpha1: f64,
    pub alpha2: f64,
    pub eps: f64,
}

impl Default for BtConfig {
    fn default() -> Self {
        Self {
            lambda: 5.1e-3,
            alpha1: 1e-7,
            alpha2: 1e-3,
            eps: 1e-5,
        }
    }
}

impl BtConfig {
    pub fn validate(&self) -> Result<(), LossError> {
        for (name, v) in [("lambda", self.lambda), ("alpha1", self.alpha1), ("alpha2", self.alpha2), ("eps", self.eps)] {
            if !(v > 0.0 && v.is_finite()) {
                return Err(LossError::InvalidConfig(format!("{name} must be positive, got {v}")));
            }
        }
        Ok(())
    }
}

/// The two learnable log-variance weights, as tape variables.
#[derive(Clone, Copy, Debug)]
pub struct LearnableScales<'t> {
    pub s_x: Var<'t>,
    pub s_q: Var<'t>,
}

/// `C = std(z_a)^T std(z_b) / N` with per-dimension batch standardisation.
pub fn cross_correlation<'t>(z_a: Var<'t>, z_b: Var<'t>, eps: f64) -> Result<Var<'t>, LossError> {
    let (sa, sb) = (z_a.shape(), z_b.shape());
    if sa.len() != 2 || sa != sb {
        return Err(TensorError::ShapeMismatch {
            op: "cross_correlation",
            left: sa,
            right: sb,
        }
        .into());
    }
    let a = z_a.batch_standardize(eps)?;
    let b = z_b.batch_standardize(eps)?;
    standardized_correlation(a, b)
}

/// `a^T b / N` for embeddings that are already standardised.
pub fn standardized_correlation<'t>(a: Var<'t>, b: Var<'t>) -> Result<Var<'t>, LossError> {
    let n = a.shape()[0];
    Ok(a.transpose()?.matmul(&b)?.scale(1.0 / n as f64))
}

#[derive(Clone, Copy, Debug)]
pub struct BtTerms<'t> {
    pub invariance: Var<'t>,
    pub redundancy: Var<'t>,
    pub total: Var<'t>,
}

/// `alpha1 * sum_i (1 - C_ii)^2 + alpha2 * lambda * sum_{i != j} C_ij^2`.
pub fn barlow_twins_loss<'t>(z_a: Var<'t>, z_b: Var<'t>, cfg: &BtConfig) -> Result<BtTerms<'t>, LossError> {
    let c = cross_correlation(z_a, z_b, cfg.eps)?;
    Ok(barlow_twins_from_correlation(c, cfg)?)
}

/// The loss for a given correlation matrix.
pub fn barlow_twins_from_correlation<'t>(c: Var<'t>, cfg: &BtConfig) -> Result<BtTerms<'t>, TensorError> {
    let diag = c.diag()?;
    let invariance = diag.add_scalar(-1.0).square().sum();
    let redundancy = c.square().sum().sub(&diag.square().sum())?;
    let total = invariance.scale(cfg.alpha1).add(&redundancy.scale(cfg.alpha2 * cfg.lambda))?;
    Ok(BtTerms {
        invariance,
        redundancy,
        total,
    })
}

/// Batch mean of squared Euclidean distances between paired rows.
pub fn latent_l2_loss<'t>(z_a: Var<'t>, z_b: Var<'t>) -> Result<Var<'t>, LossError> {
    let (sa, sb) = (z_a.shape(), z_b.shape());
    if sa.len() != 2 || sa != sb {
        return Err(TensorError::ShapeMismatch {
            op: "latent_l2_loss",
            left: sa,
            right: sb,
        }
        .into());
    }
    let n = sa[0] as f64;
    Ok(z_a.sub(&z_b)?.square().sum().scale(1.0 / n))
}

#[derive(Clone, Copy, Debug)]
pub struct PoseTerms<'t> {
    /// Batch mean of `|t - t_gt|`.
    pub l_x: Var<'t>,
    /// Batch mean of `|q_gt - q / |q||`.
    pub l_q: Var<'t>,
    pub total: Var<'t>,
}

/// `L_x exp(-s_x) + s_x + L_q exp(-s_q) + s_q` with batch-mean residual norms.
/// `t` is `[N,3]`, `q_raw` `[N,4]`; ground truth likewise.
pub fn pose_loss<'t>(
    t: Var<'t>,
    q_raw: Var<'t>,
    gt_t: Var<'t>,
    gt_q: Var<'t>,
    scales: LearnableScales<'t>,
) -> Result<PoseTerms<'t>, LossError> {
    let q_unit = q_raw.row_normalize(MIN_QUAT_NORM).map_err(|e| match e {
        TensorError::DegenerateNorm { norm } => LossError::DegenerateQuaternion { norm },
        e => e.into(),
    })?;
    let l_x = t.sub(&gt_t)?.row_norm()?.mean();
    let l_q = gt_q.sub(&q_unit)?.row_norm()?.mean();
    let wx = l_x.mul(&scales.s_x.neg().exp())?.add(&scales.s_x)?;
    let wq = l_q.mul(&scales.s_q.neg().exp())?.add(&scales.s_q)?;
    Ok(PoseTerms {
        l_x,
        l_q,
        total: wx.add(&wq)?,
    })
}

/// Multipliers on the three groups of terms in the combined objective.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DaWeights {
    pub bt: f64,
    pub l2: f64,
    /// Pose terms of the augmented (fog, night) branches.
    pub aug_pose: f64,
}

impl Default for DaWeights {
    fn default() -> Self {
        Self {
            bt: 1.0,
            l2: 1.0,
            aug_pose: 1.0,
        }
    }
}

/// Column order of the component log.
pub const DA_COMPONENTS: [&str; 11] = [
    "bt_t_fog",
    "bt_t_night",
    "bt_r_fog",
    "bt_r_night",
    "l2_t_fog",
    "l2_t_night",
    "l2_r_fog",
    "l2_r_night",
    "pose_real",
    "pose_fog",
    "pose_night",
];

pub const SB_COMPONENTS: [&str; 1] = ["pose_real"];

#[derive(Clone, Debug)]
pub struct LossBreakdown<'t> {
    pub total: Var<'t>,
    /// Named sub-losses in log column order.
    pub components: Vec<(&'static str, Var<'t>)>,
}

impl LossBreakdown<'_> {
    pub fn values(&self) -> Vec<(&'static str, f64)> {
        self.components
            .iter()
            .map(|(n, v)| (*n, v.value().item().unwrap_or(f64::NAN)))
            .collect()
    }

    pub fn get(&self, name: &str) -> Option<f64> {
        self.components
            .iter()
            .find(|(n, _)| *n == name)
            .and_then(|(_, v)| v.value().item())
    }
}

/// Combined objective over `[real, fog, night]` branch outputs sharing one
/// ground truth.
pub fn total_da_loss<'t>(
    branches: &[ForwardOutput<'t>],
    gt_t: Var<'t>,
    gt_q: Var<'t>,
    cfg: &BtConfig,
    scales: LearnableScales<'t>,
    weights: &DaWeights,
) -> Result<LossBreakdown<'t>, LossError> {
    let [real, fog, night] = branches else {
        return Err(LossError::MissingBranch {
            expected: 3,
            got: branches.len(),
        });
    };
    let bt = |a: Var<'t>, b: Var<'t>| -> Result<Var<'t>, LossError> { Ok(barlow_twins_loss(a, b, cfg)?.total) };
    let pose = |b: &ForwardOutput<'t>| -> Result<Var<'t>, LossError> { Ok(pose_loss(b.t, b.q_raw, gt_t, gt_q, scales)?.total) };
    let components = vec![
        ("bt_t_fog", bt(real.latent_t, fog.latent_t)?),
        ("bt_t_night", bt(real.latent_t, night.latent_t)?),
        ("bt_r_fog", bt(real.latent_r, fog.latent_r)?),
        ("bt_r_night", bt(real.latent_r, night.latent_r)?),
        ("l2_t_fog", latent_l2_loss(real.latent_t, fog.latent_t)?),
        ("l2_t_night", latent_l2_loss(real.latent_t, night.latent_t)?),
        ("l2_r_fog", latent_l2_loss(real.latent_r, fog.latent_r)?),
        ("l2_r_night", latent_l2_loss(real.latent_r, night.latent_r)?),
        ("pose_real", pose(real)?),
        ("pose_fog", pose(fog)?),
        ("pose_night", pose(night)?),
    ];
    let mut total: Option<Var<'t>> = None;
    for (name, v) in &components {
        let w = if name.starts_with("bt_") {
            weights.bt
        } else if name.starts_with("l2_") {
            weights.l2
        } else if *name == "pose_real" {
            1.0
        } else {
            weights.aug_pose
        };
        let term = if w == 1.0 { *v } else { v.scale(w) };
        total = Some(match total {
            None => term,
            Some(acc) => acc.add(&term)?,
        });
    }
    Ok(LossBreakdown {
        total: total.expect("eleven components"),
        components,
    })
}

/// Single-branch objective: the pose loss on real images only.
pub fn total_sb_loss<'t>(
    real: &ForwardOutput<'t>,
    gt_t: Var<'t>,
    gt_q: Var<'t>,
    scales: LearnableScales<'t>,
) -> Result<LossBreakdown<'t>, LossError> {
    let total = pose_loss(real.t, real.q_raw, gt_t, gt_q, scales)?.total;
    Ok(LossBreakdown {
        total,
        components: vec![("pose_real", total)],
    })
}

/// Ground-truth rows as constant tensors: `([N,3], [N,4])`.
pub fn ground_truth_tensors(poses: &[crate::pose::PoseLabel]) -> (Tensor, Tensor) {
    let n = poses.len();
    let t = Tensor::from_fn(&[n, 3], |i| poses[i / 3].t[i % 3]);
    let q = Tensor::from_fn(&[n, 4], |i| poses[i / 4].q[i % 4]);
    (t, q)
}

/// Tab-separated header: `step`, `total`, then component names.
pub fn log_header(names: &[&str]) -> String {
    let mut s = String::from("step\ttotal");
    for n in names {
        s.push('\t');
        s.push_str(n);
    }
    s
}

/// One log row in shortest round-trip float form.
pub fn log_line(step: usize, total: f64, components: &[(&str, f64)]) -> String {
    let mut s = format!("{step}\t{total:e}");
    for (_, v) in components {
        let _ = write!(s, "\t{v:e}");
    }
    s
}

/// Parses a log produced by [`log_header`] / [`log_line`].
pub fn parse_log(text: &str) -> Result<(Vec<String>, Vec<Vec<f64>>), String> {
    let mut lines = text.lines().filter(|l| !l.trim().is_empty());
    let header: Vec<String> = lines
        .next()
        .ok_or("empty log")?
        .split('\t')
        .map(str::to_string)
        .collect();
    let rows = lines
        .enumerate()
        .map(|(i, l)| {
            let row: Vec<f64> = l
                .split('\t')
                .map(|f| f.parse::<f64>().map_err(|e| format!("line {}: {e}", i + 2)))
                .collect::<Result<_, _>>()?;
            if row.len() != header.len() {
                return Err(format!("line {}: {} fields, expected {}", i + 2, row.len(), header.len()));
            }
            Ok(row)
        })
        .collect::<Result<_, String>>()?;
    Ok((header, rows))
}
