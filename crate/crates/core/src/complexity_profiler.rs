//! Analytic cost model: FLOPs, output activations, parameters and weight
//! memory per layer, computed from the resolved architecture alone.
//!
//! Counting follows the common PyTorch flop-counter conventions: one
//! multiply-accumulate is one FLOP, bias additions and elementwise
//! nonlinearities are free, affine normalisation costs two FLOPs and
//! pooling one FLOP per input element, and activations are the output elements of convolution,
//! dense and batched matrix-product layers.

use std::fmt::Write as _;

use thiserror::Error;

use crate::evaluator::align;
use crate::model::{ArchConfig, ArchPlan, ConvUnit, MlpPlan, ModelError, Profile, Stage};

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("nothing to compare")]
    Empty,
}

pub const BYTES_PER_PARAM: u64 = 4;

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct LayerCost {
    pub path: String,
    pub flops: u64,
    pub activations: u64,
    pub params: u64,
    pub bytes: u64,
}

impl LayerCost {
    fn new(path: impl Into<String>, flops: u64, activations: u64, params: u64) -> Self {
        Self {
            path: path.into(),
            flops,
            activations,
            params,
            bytes: params * BYTES_PER_PARAM,
        }
    }

    fn absorb(&mut self, other: &LayerCost) {
        self.flops += other.flops;
        self.activations += other.activations;
        self.params += other.params;
        self.bytes += other.bytes;
    }
}

/// Convolution (plain or depthwise) with its normalisation or bias.
pub fn conv_cost(u: &ConvUnit) -> LayerCost {
    let out = (u.c_out * u.out_hw[0] * u.out_hw[1]) as u64;
    let per_out = if u.depthwise { 1 } else { u.c_in } * u.kernel * u.kernel;
    let weights = (u.c_out * per_out) as u64;
    let mut flops = out * per_out as u64;
    // Affine normalisation: a scale and a shift per element and channel.
    // A plain conv carries a bias instead.
    let extra = if u.batch_norm {
        flops += 2 * out;
        2 * u.c_out
    } else {
        u.c_out
    };
    LayerCost::new(u.name.clone(), flops, out, weights + extra as u64)
}

pub fn dense_cost(path: impl Into<String>, d_in: usize, d_out: usize) -> LayerCost {
    let (i, o) = (d_in as u64, d_out as u64);
    LayerCost::new(path, i * o, o, i * o + o)
}

/// Reduction over `numel` inputs with no learnable state.
pub fn pool_cost(path: impl Into<String>, numel: usize) -> LayerCost {
    LayerCost::new(path, numel as u64, 0, 0)
}

/// Single-token multi-head attention of width `embed`: four projections
/// plus the score and mixing products.
pub fn attention_cost(path: impl Into<String>, embed: usize, heads: usize) -> LayerCost {
    let e = embed as u64;
    let proj = dense_cost("", embed, embed);
    let scores = heads as u64;
    LayerCost::new(path, 4 * proj.flops + 2 * e, 4 * proj.activations + scores + e, 4 * proj.params)
}

fn mlp_costs(mlp: &MlpPlan, out: &mut Vec<LayerCost>) {
    for (name, i, o) in mlp.layers() {
        out.push(dense_cost(name, i, o));
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct CostProfile {
    pub name: String,
    pub layers: Vec<LayerCost>,
}

impl CostProfile {
    pub fn total(&self) -> LayerCost {
        let mut t = LayerCost {
            path: "total".into(),
            ..Default::default()
        };
        self.layers.iter().for_each(|l| t.absorb(l));
        t
    }

    pub fn gflops(&self) -> f64 {
        self.total().flops as f64 / 1e9
    }

    pub fn params_m(&self) -> f64 {
        self.total().params as f64 / 1e6
    }

    pub fn activations_m(&self) -> f64 {
        self.total().activations as f64 / 1e6
    }

    pub fn memory_mb(&self) -> f64 {
        self.total().bytes as f64 / 1e6
    }

    /// Per-layer table followed by the total row.
    pub fn layer_table(&self) -> String {
        let mut lines = vec![["layer", "flops", "activations", "params", "bytes"].map(String::from).to_vec()];
        for l in self.layers.iter().chain(std::iter::once(&self.total())) {
            lines.push(vec![
                l.path.clone(),
                l.flops.to_string(),
                l.activations.to_string(),
                l.params.to_string(),
                l.bytes.to_string(),
            ]);
        }
        align(&lines)
    }
}

/// Costs of every layer for a batch of one.
pub fn profile(config: &ArchConfig) -> Result<CostProfile, ProfileError> {
    let plan = ArchPlan::resolve(config)?;
    let mut layers = Vec::new();
    for stage in &plan.stages {
        match stage {
            Stage::Conv(c) => layers.push(conv_cost(c)),
            Stage::Block(b) => {
                layers.extend(b.expand.iter().map(conv_cost));
                layers.extend(b.depthwise.iter().map(conv_cost));
                if let Some(se) = &b.se {
                    let mut c = pool_cost(se.name.clone(), se.channels * se.hw[0] * se.hw[1]);
                    c.absorb(&dense_cost("", se.channels, se.squeeze));
                    c.absorb(&dense_cost("", se.squeeze, se.channels));
                    layers.push(c);
                }
                layers.push(conv_cost(&b.project));
            }
        }
    }
    let [c, h, w] = plan.feature;
    let heads = &plan.heads;
    layers.push(pool_cost("gap", c * h * w));
    mlp_costs(&heads.latent_t, &mut layers);
    mlp_costs(&heads.latent_r, &mut layers);
    mlp_costs(&heads.translation, &mut layers);
    mlp_costs(&heads.value, &mut layers);
    layers.push(pool_cost("rotation.smp", c * h * w));
    layers.push(pool_cost("rotation.sap", c * h * w));
    layers.push(attention_cost(heads.attention.name.clone(), heads.attention.embed, heads.attention.heads));
    mlp_costs(&heads.rotation, &mut layers);
    Ok(CostProfile {
        name: config.profile.name().to_string(),
        layers,
    })
}

/// Built-in full-scale or desk architecture by name.
pub fn profile_named(name: &str) -> Result<CostProfile, ProfileError> {
    let p: Profile = name.parse()?;
    profile(&p.config())
}

/// One summary line per profile.
pub fn summary_table(profiles: &[CostProfile]) -> String {
    let mut lines = vec![["profile", "GFLOPs", "params (M)", "activations (M)", "memory (MB)"].map(String::from).to_vec()];
    for p in profiles {
        lines.push(vec![
            p.name.clone(),
            format!("{:.4}", p.gflops()),
            format!("{:.4}", p.params_m()),
            format!("{:.4}", p.activations_m()),
            format!("{:.1}", p.memory_mb()),
        ]);
    }
    align(&lines)
}

pub fn summary_csv(profiles: &[CostProfile]) -> String {
    let mut out = String::from("profile,gflops,params_m,activations_m,memory_mb\n");
    for p in profiles {
        let _ = writeln!(
            out,
            "{},{:.6},{:.6},{:.6},{:.1}",
            p.name,
            p.gflops(),
            p.params_m(),
            p.activations_m(),
            p.memory_mb()
        );
    }
    out
}

/// `row / column` ratios of each cost for every ordered pair.
#[derive(Clone, Debug, PartialEq)]
pub struct RatioTable {
    pub names: Vec<String>,
    /// `[flops, params, activations, bytes]` per `(row, column)`.
    pub ratios: Vec<Vec<[f64; 4]>>,
}

impl RatioTable {
    pub fn get(&self, a: &str, b: &str) -> Option<[f64; 4]> {
        let i = self.names.iter().position(|n| n == a)?;
        let j = self.names.iter().position(|n| n == b)?;
        Some(self.ratios[i][j])
    }

    pub fn to_table(&self) -> String {
        let mut lines = vec![["a / b", "flops", "params", "activations", "bytes"].map(String::from).to_vec()];
        for (i, a) in self.names.iter().enumerate() {
            for (j, b) in self.names.iter().enumerate() {
                if i == j {
                    continue;
                }
                let mut l = vec![format!("{a} / {b}")];
                l.extend(self.ratios[i][j].iter().map(|r| format!("{r:.3}")));
                lines.push(l);
            }
        }
        align(&lines)
    }
}

pub fn compare(profiles: &[CostProfile]) -> Result<RatioTable, ProfileError> {
    if profiles.is_empty() {
        return Err(ProfileError::Empty);
    }
    let v: Vec<[f64; 4]> = profiles
        .iter()
        .map(|p| {
            let t = p.total();
            [t.flops, t.params, t.activations, t.bytes].map(|x| x as f64)
        })
        .collect();
    let ratios = v
        .iter()
        .map(|a| v.iter().map(|b| std::array::from_fn(|k| a[k] / b[k])).collect())
        .collect();
    Ok(RatioTable {
        names: profiles.iter().map(|p| p.name.clone()).collect(),
        ratios,
    })
}
