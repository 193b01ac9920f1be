use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::autodiff::{Tape, Tensor, TensorError, Var};
use crate::pose::{normalize_canonical, PoseLabel};

use super::config::{Activation, ArchConfig};
use super::params::{BoundParams, ModelParams};
use super::plan::{ArchPlan, ConvUnit, MlpPlan, SeUnit, Stage};
use super::ModelError;

/// Train mode samples an attention dropout mask from `dropout_seed`; eval
/// mode is deterministic.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Eval,
    Train { dropout_seed: u64 },
}

/// Everything one forward pass produces, batched along the first axis.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput<'t> {
    /// `[N,C_f,H_f,W_f]`
    pub feature: Var<'t>,
    /// `[N,D]`
    pub latent_t: Var<'t>,
    /// `[N,D]`
    pub latent_r: Var<'t>,
    /// `[N,3]`
    pub t: Var<'t>,
    /// `[N,4]`, unnormalised
    pub q_raw: Var<'t>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Network {
    config: ArchConfig,
    plan: ArchPlan,
}

const EVAL_CHUNK: usize = 32;

fn activate<'t>(x: Var<'t>, act: Option<Activation>) -> Var<'t> {
    match act {
        Some(Activation::Relu6) => x.relu6(),
        Some(Activation::HSwish) => x.h_swish(),
        None => x,
    }
}

impl Network {
    pub fn new(config: ArchConfig) -> Result<Self, ModelError> {
        let plan = ArchPlan::resolve(&config)?;
        Ok(Self { config, plan })
    }

    pub fn config(&self) -> &ArchConfig {
        &self.config
    }

    pub fn plan(&self) -> &ArchPlan {
        &self.plan
    }

    pub fn init_params(&self, seed: u64) -> ModelParams {
        ModelParams::init(&self.plan, seed)
    }

    fn check_input(&self, shape: &[usize]) -> Result<(), ModelError> {
        let want = self.plan.input;
        let ok = match shape.len() {
            3 => shape == want,
            4 => shape[1..] == want && shape[0] > 0,
            _ => false,
        };
        if ok {
            Ok(())
        } else {
            Err(ModelError::InputShape {
                expected: want.to_vec(),
                got: shape.to_vec(),
            })
        }
    }

    fn conv<'t>(&self, x: Var<'t>, u: &ConvUnit, p: &BoundParams<'t>) -> Result<Var<'t>, ModelError> {
        let w = p.get(&format!("{}.weight", u.name))?;
        let y = if u.batch_norm {
            // Inference-form normalisation: a learned per-channel affine.
            let zero = x.tape().constant(Tensor::zeros(&[u.c_out]));
            let y = if u.depthwise {
                x.depthwise_conv2d(&w, &zero, u.stride, u.padding)?
            } else {
                x.conv2d(&w, &zero, u.stride, u.padding)?
            };
            let gamma = p.get(&format!("{}.bn.gamma", u.name))?;
            let beta = p.get(&format!("{}.bn.beta", u.name))?;
            y.channel_affine(&gamma, &beta)?
        } else {
            let b = p.get(&format!("{}.bias", u.name))?;
            if u.depthwise {
                x.depthwise_conv2d(&w, &b, u.stride, u.padding)?
            } else {
                x.conv2d(&w, &b, u.stride, u.padding)?
            }
        };
        Ok(activate(y, u.activation))
    }

    fn dense<'t>(x: Var<'t>, name: &str, p: &BoundParams<'t>) -> Result<Var<'t>, ModelError> {
        let w = p.get(&format!("{name}.weight"))?;
        let b = p.get(&format!("{name}.bias"))?;
        Ok(x.dense(&w, &b)?)
    }

    fn mlp<'t>(x: Var<'t>, plan: &MlpPlan, p: &BoundParams<'t>) -> Result<Var<'t>, ModelError> {
        let n = plan.dims.len() - 1;
        let mut x = x;
        for (i, (name, _, _)) in plan.layers().enumerate() {
            x = Self::dense(x, &name, p)?;
            if i + 1 < n {
                x = x.h_swish();
            }
        }
        Ok(x)
    }

    /// Channel gate `h_sigmoid(fc2(relu(fc1(GAP(x)))))` applied to `x`.
    pub fn se_block<'t>(x: Var<'t>, se: &SeUnit, p: &BoundParams<'t>) -> Result<Var<'t>, ModelError> {
        let squeezed = x.global_avg_pool()?;
        let h = Self::dense(squeezed, &format!("{}.fc1", se.name), p)?.relu();
        let gate = Self::dense(h, &format!("{}.fc2", se.name), p)?.h_sigmoid();
        Ok(x.scale_channels(&gate)?)
    }

    /// `[N,3,H,W]` (or `[3,H,W]`) images to `[N,C_f,H_f,W_f]` features.
    pub fn backbone_forward<'t>(&self, p: &BoundParams<'t>, images: Var<'t>) -> Result<Var<'t>, ModelError> {
        let shape = images.shape();
        self.check_input(&shape)?;
        let mut x = if shape.len() == 3 {
            images.reshape(&[1, shape[0], shape[1], shape[2]])?
        } else {
            images
        };
        for stage in &self.plan.stages {
            x = match stage {
                Stage::Conv(u) => self.conv(x, u, p)?,
                Stage::Block(b) => {
                    let input = x;
                    let mut y = x;
                    if let Some(e) = &b.expand {
                        y = self.conv(y, e, p)?;
                    }
                    if let Some(d) = &b.depthwise {
                        y = self.conv(y, d, p)?;
                    }
                    // Conv blocks gate after their single convolution.
                    if b.depthwise.is_none() {
                        y = self.conv(y, &b.project, p)?;
                    }
                    if let Some(se) = &b.se {
                        y = Self::se_block(y, se, p)?;
                    }
                    if b.depthwise.is_some() {
                        y = self.conv(y, &b.project, p)?;
                    }
                    if b.residual {
                        y = y.add(&input)?;
                    }
                    y
                }
            };
        }
        Ok(x)
    }

    pub fn encode_latents<'t>(&self, feature: Var<'t>, p: &BoundParams<'t>) -> Result<(Var<'t>, Var<'t>), ModelError> {
        let g = feature.global_avg_pool()?;
        let h = &self.plan.heads;
        Ok((Self::mlp(g, &h.latent_t, p)?, Self::mlp(g, &h.latent_r, p)?))
    }

    pub fn translation_head<'t>(&self, latent_t: Var<'t>, p: &BoundParams<'t>) -> Result<Var<'t>, ModelError> {
        Self::mlp(latent_t, &self.plan.heads.translation, p)
    }

    /// Value from the rotation latent, query from channel-max and key from
    /// channel-mean of the feature map, each a single token of width
    /// `H_f*W_f`.
    pub fn rotation_head<'t>(
        &self,
        latent_r: Var<'t>,
        feature: Var<'t>,
        p: &BoundParams<'t>,
        mode: Mode,
    ) -> Result<Var<'t>, ModelError> {
        let heads = &self.plan.heads;
        let att = &heads.attention;
        let value = Self::mlp(latent_r, &heads.value, p)?;
        let query = feature.spatial_channel_max_pool()?;
        let key = feature.spatial_channel_avg_pool()?;
        let batch = value.shape()[0];
        let token = |v: Var<'t>, which: &str| -> Result<Var<'t>, ModelError> {
            Ok(Self::dense(v, &att.projection(which), p)?.reshape(&[batch, 1, att.embed])?)
        };
        let (q, k, v) = (token(query, "q")?, token(key, "k")?, token(value, "v")?);
        let mask = match mode {
            Mode::Train { dropout_seed } if att.dropout > 0.0 => {
                let mut rng = ChaCha8Rng::seed_from_u64(dropout_seed);
                let keep = 1.0 - att.dropout;
                Some(Tensor::from_fn(&[batch, att.heads, 1, 1], |_| {
                    if rng.gen::<f64>() < att.dropout {
                        0.0
                    } else {
                        1.0 / keep
                    }
                }))
            }
            _ => None,
        };
        let attended = q
            .attention(&k, &v, att.heads, mask.as_ref())
            .map_err(|e| match e {
                TensorError::HeadsDoNotDivide { .. } => ModelError::Config {
                    layer: att.name.clone(),
                    reason: e.to_string(),
                },
                e => e.into(),
            })?
            .reshape(&[batch, att.embed])?;
        let out = Self::dense(attended, &att.projection("out"), p)?;
        Self::mlp(out, &heads.rotation, p)
    }

    pub fn forward<'t>(&self, p: &BoundParams<'t>, images: Var<'t>, mode: Mode) -> Result<ForwardOutput<'t>, ModelError> {
        let feature = self.backbone_forward(p, images)?;
        let (latent_t, latent_r) = self.encode_latents(feature, p)?;
        let t = self.translation_head(latent_t, p)?;
        let q_raw = self.rotation_head(latent_r, feature, p, mode)?;
        Ok(ForwardOutput {
            feature,
            latent_t,
            latent_r,
            t,
            q_raw,
        })
    }

    /// Eval-mode poses (unit, `w >= 0` quaternions) and latents for a batch
    /// of images, computed in parallel chunks.
    pub fn infer(&self, params: &ModelParams, images: &Tensor) -> Result<Inference, ModelError> {
        self.check_input(images.shape())?;
        let images = if images.rank() == 3 {
            let s = images.shape();
            images.reshape(&[1, s[0], s[1], s[2]])?
        } else {
            images.clone()
        };
        let n = images.shape()[0];
        let per = images.numel() / n;
        let mut item_shape = images.shape().to_vec();
        let chunks: Vec<_> = (0..n).step_by(EVAL_CHUNK).collect();
        let parts = chunks
            .par_iter()
            .map(|&start| {
                let len = EVAL_CHUNK.min(n - start);
                let mut shape = item_shape.clone();
                shape[0] = len;
                let slice = images.data()[start * per..(start + len) * per].to_vec();
                let tape = Tape::new();
                let bound = params.bind(&tape, false);
                let x = tape.constant(Tensor::new(shape, slice)?);
                let out = self.forward(&bound, x, Mode::Eval)?;
                Ok::<_, ModelError>((out.t.value(), out.q_raw.value(), out.latent_t.value(), out.latent_r.value()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        item_shape.clear();
        let mut res = Inference::default();
        for (t, q, lt, lr) in parts {
            for (tr, qr) in t.data().chunks(3).zip(q.data().chunks(4)) {
                let q = normalize_canonical([qr[0], qr[1], qr[2], qr[3]]).ok_or(TensorError::DegenerateNorm {
                    norm: qr.iter().map(|v| v * v).sum::<f64>().sqrt(),
                })?;
                res.poses.push(PoseLabel::new([tr[0], tr[1], tr[2]], q));
            }
            let d = lt.shape()[1];
            res.latent_t.extend(lt.data().chunks(d).map(<[f64]>::to_vec));
            res.latent_r.extend(lr.data().chunks(d).map(<[f64]>::to_vec));
        }
        Ok(res)
    }

    pub fn predict(&self, params: &ModelParams, images: &Tensor) -> Result<Vec<PoseLabel>, ModelError> {
        Ok(self.infer(params, images)?.poses)
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Inference {
    pub poses: Vec<PoseLabel>,
    pub latent_t: Vec<Vec<f64>>,
    pub latent_r: Vec<Vec<f64>>,
}
