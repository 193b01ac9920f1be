//! Resolution of an [`ArchConfig`] into concrete layers with known shapes.

use crate::autodiff::kernels::ConvGeom;

use super::config::{Activation, ArchConfig, BlockKind};
use super::ModelError;

#[derive(Clone, Debug, PartialEq)]
pub struct ConvUnit {
    pub name: String,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
    pub depthwise: bool,
    pub batch_norm: bool,
    pub activation: Option<Activation>,
    pub in_hw: [usize; 2],
    pub out_hw: [usize; 2],
}

impl ConvUnit {
    pub fn weight_shape(&self) -> Vec<usize> {
        if self.depthwise {
            vec![self.c_out, self.kernel, self.kernel]
        } else {
            vec![self.c_out, self.c_in, self.kernel, self.kernel]
        }
    }

    pub fn fan_in(&self) -> usize {
        let per_out = if self.depthwise { 1 } else { self.c_in };
        per_out * self.kernel * self.kernel
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SeUnit {
    pub name: String,
    pub channels: usize,
    pub squeeze: usize,
    pub hw: [usize; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct BlockPlan {
    pub name: String,
    pub expand: Option<ConvUnit>,
    pub depthwise: Option<ConvUnit>,
    pub se: Option<SeUnit>,
    pub project: ConvUnit,
    pub residual: bool,
}

#[derive(Clone, Debug, PartialEq)]
pub enum Stage {
    Conv(ConvUnit),
    Block(BlockPlan),
}

/// Dense layers with h-swish between consecutive layers and none after the last.
#[derive(Clone, Debug, PartialEq)]
pub struct MlpPlan {
    pub name: String,
    pub dims: Vec<usize>,
}

impl MlpPlan {
    fn new(name: &str, input: usize, hidden: Option<usize>, output: usize) -> Self {
        let mut dims = vec![input];
        dims.extend(hidden);
        dims.push(output);
        Self {
            name: name.to_string(),
            dims,
        }
    }

    pub fn layer_name(&self, i: usize) -> String {
        format!("{}.{i}", self.name)
    }

    pub fn layers(&self) -> impl Iterator<Item = (String, usize, usize)> + '_ {
        self.dims
            .windows(2)
            .enumerate()
            .map(|(i, w)| (self.layer_name(i), w[0], w[1]))
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct AttentionPlan {
    pub name: String,
    pub embed: usize,
    pub heads: usize,
    pub dropout: f64,
}

impl AttentionPlan {
    pub const PROJECTIONS: [&'static str; 4] = ["q", "k", "v", "out"];

    pub fn projection(&self, which: &str) -> String {
        format!("{}.{which}", self.name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadPlan {
    pub latent_t: MlpPlan,
    pub latent_r: MlpPlan,
    pub translation: MlpPlan,
    pub value: MlpPlan,
    pub attention: AttentionPlan,
    pub rotation: MlpPlan,
}

impl HeadPlan {
    pub fn mlps(&self) -> [&MlpPlan; 5] {
        [&self.latent_t, &self.latent_r, &self.translation, &self.value, &self.rotation]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ArchPlan {
    pub input: [usize; 3],
    pub stages: Vec<Stage>,
    /// `[C_f, H_f, W_f]`
    pub feature: [usize; 3],
    pub heads: HeadPlan,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// He-normal with the given fan-in.
    Conv { fan_in: usize },
    /// Uniform in `+-1/sqrt(fan_in)`.
    Dense { fan_in: usize },
    Zeros,
    Ones,
    Values(&'static [f64]),
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub init: Init,
}

struct Cursor<'a> {
    config: &'a ArchConfig,
    channels: usize,
    hw: [usize; 2],
}

impl Cursor<'_> {
    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        name: String,
        c_out: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        depthwise: bool,
        activation: Option<Activation>,
    ) -> Result<ConvUnit, ModelError> {
        let fail = |reason: String| ModelError::Config {
            layer: name.clone(),
            reason,
        };
        if stride == 0 {
            return Err(fail("stride must be at least 1".into()));
        }
        if c_out == 0 || kernel == 0 {
            return Err(fail("zero channels or kernel".into()));
        }
        if depthwise && c_out != self.channels {
            return Err(fail(format!("depthwise width {c_out} != input width {}", self.channels)));
        }
        let h = ConvGeom::out_extent(self.hw[0], kernel, stride, padding);
        let w = ConvGeom::out_extent(self.hw[1], kernel, stride, padding);
        let (Some(h), Some(w)) = (h, w) else {
            return Err(fail(format!(
                "kernel {kernel} (padding {padding}) does not fit {}x{}",
                self.hw[0], self.hw[1]
            )));
        };
        let unit = ConvUnit {
            name,
            c_in: self.channels,
            c_out,
            kernel,
            stride,
            padding,
            depthwise,
            batch_norm: self.config.batch_norm,
            activation,
            in_hw: self.hw,
            out_hw: [h, w],
        };
        self.channels = c_out;
        self.hw = [h, w];
        Ok(unit)
    }

    fn se(&self, name: String) -> Result<SeUnit, ModelError> {
        let reduction = self.config.se_reduction;
        if reduction == 0 || reduction > self.channels {
            return Err(ModelError::Config {
                layer: name,
                reason: format!("reduction {reduction} exceeds {} channels", self.channels),
            });
        }
        if self.config.se_divisor <= 1 && self.channels % reduction != 0 {
            return Err(ModelError::Config {
                layer: name,
                reason: format!("{} channels not divisible by reduction {reduction}", self.channels),
            });
        }
        Ok(SeUnit {
            name,
            channels: self.channels,
            squeeze: self.config.se_squeeze(self.channels),
            hw: self.hw,
        })
    }
}

impl ArchPlan {
    pub fn resolve(config: &ArchConfig) -> Result<Self, ModelError> {
        let [h, w] = config.input_size;
        if h == 0 || w == 0 {
            return Err(ModelError::Config {
                layer: "input".into(),
                reason: "empty input size".into(),
            });
        }
        let mut cur = Cursor {
            config,
            channels: 3,
            hw: [h, w],
        };
        let mut stages = Vec::new();
        let st = &config.stem;
        stages.push(Stage::Conv(cur.conv(
            "stem".into(),
            st.out_channels,
            st.kernel,
            st.stride,
            st.kernel / 2,
            false,
            Some(st.activation),
        )?));

        for (i, spec) in config.blocks.iter().enumerate() {
            let name = format!("blocks.{i}");
            let c_in = cur.channels;
            let pad = spec.padding();
            let act = Some(spec.activation);
            let block = match spec.kind {
                BlockKind::Conv => {
                    let project = cur.conv(format!("{name}.conv"), spec.out_channels, spec.kernel, spec.stride, pad, false, act)?;
                    let se = spec.se.then(|| cur.se(format!("{name}.se"))).transpose()?;
                    BlockPlan { name, expand: None, depthwise: None, se, project, residual: false }
                }
                BlockKind::DepthwiseSeparable => {
                    let dw = cur.conv(format!("{name}.dw"), c_in, spec.kernel, spec.stride, pad, true, act)?;
                    let se = spec.se.then(|| cur.se(format!("{name}.se"))).transpose()?;
                    let project = cur.conv(format!("{name}.project"), spec.out_channels, 1, 1, 0, false, act)?;
                    BlockPlan { name, expand: None, depthwise: Some(dw), se, project, residual: false }
                }
                BlockKind::SeBottleneck => {
                    let expand = if spec.expand != c_in {
                        Some(cur.conv(format!("{name}.expand"), spec.expand, 1, 1, 0, false, act)?)
                    } else {
                        None
                    };
                    let dw = cur.conv(format!("{name}.dw"), spec.expand, spec.kernel, spec.stride, pad, true, act)?;
                    let se = spec.se.then(|| cur.se(format!("{name}.se"))).transpose()?;
                    let project = cur.conv(format!("{name}.project"), spec.out_channels, 1, 1, 0, false, None)?;
                    let residual = spec.stride == 1 && c_in == spec.out_channels;
                    BlockPlan { name, expand, depthwise: Some(dw), se, project, residual }
                }
            };
            stages.push(Stage::Block(block));
        }
        if let Some(fc) = &config.final_conv {
            stages.push(Stage::Conv(cur.conv("final".into(), fc.out_channels, 1, 1, 0, false, Some(fc.activation))?));
        }

        let feature = [cur.channels, cur.hw[0], cur.hw[1]];
        let spatial = cur.hw[0] * cur.hw[1];
        if config.mha_embed != spatial {
            return Err(ModelError::Config {
                layer: "rotation.attention".into(),
                reason: format!(
                    "attention width {} must equal the feature map area {}x{}",
                    config.mha_embed, cur.hw[0], cur.hw[1]
                ),
            });
        }
        if config.mha_heads == 0 || config.mha_embed % config.mha_heads != 0 {
            return Err(ModelError::Config {
                layer: "rotation.attention".into(),
                reason: format!(
                    "attention width {} is not divisible by {} heads",
                    config.mha_embed, config.mha_heads
                ),
            });
        }
        if config.latent_dim == 0 {
            return Err(ModelError::Config {
                layer: "latent".into(),
                reason: "latent dimension must be positive".into(),
            });
        }
        let d = config.latent_dim;
        let hidden = config.head_hidden_layer.then_some(d);
        let e = config.mha_embed;
        let heads = HeadPlan {
            latent_t: MlpPlan::new("latent_t", feature[0], hidden, d),
            latent_r: MlpPlan::new("latent_r", feature[0], hidden, d),
            translation: MlpPlan::new("translation", d, hidden, 3),
            value: MlpPlan::new("rotation.value", d, hidden, e),
            attention: AttentionPlan {
                name: "rotation.attention".into(),
                embed: e,
                heads: config.mha_heads,
                dropout: config.attention_dropout,
            },
            rotation: MlpPlan::new("rotation.head", e, hidden, 4),
        };
        Ok(Self {
            input: [3, h, w],
            stages,
            feature,
            heads,
        })
    }

    pub fn conv_units(&self) -> Vec<&ConvUnit> {
        let mut out = Vec::new();
        for stage in &self.stages {
            match stage {
                Stage::Conv(c) => out.push(c),
                Stage::Block(b) => {
                    out.extend(b.expand.iter());
                    out.extend(b.depthwise.iter());
                    out.push(&b.project);
                }
            }
        }
        out
    }

    /// Every learnable tensor with its shape and initialiser, in a stable order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let mut specs = Vec::new();
        let mut push = |name: String, shape: Vec<usize>, init: Init| specs.push(ParamSpec { name, shape, init });
        let conv = |u: &ConvUnit, push: &mut dyn FnMut(String, Vec<usize>, Init)| {
            push(format!("{}.weight", u.name), u.weight_shape(), Init::Conv { fan_in: u.fan_in() });
            if u.batch_norm {
                push(format!("{}.bn.gamma", u.name), vec![u.c_out], Init::Ones);
                push(format!("{}.bn.beta", u.name), vec![u.c_out], Init::Zeros);
            } else {
                push(format!("{}.bias", u.name), vec![u.c_out], Init::Zeros);
            }
        };
        let dense = |name: String, i: usize, o: usize, push: &mut dyn FnMut(String, Vec<usize>, Init)| {
            push(format!("{name}.weight"), vec![i, o], Init::Dense { fan_in: i });
            push(format!("{name}.bias"), vec![o], Init::Zeros);
        };
        for stage in &self.stages {
            match stage {
                Stage::Conv(c) => conv(c, &mut push),
                Stage::Block(b) => {
                    if let Some(e) = &b.expand {
                        conv(e, &mut push);
                    }
                    if let Some(d) = &b.depthwise {
                        conv(d, &mut push);
                    }
                    if let Some(se) = &b.se {
                        dense(format!("{}.fc1", se.name), se.channels, se.squeeze, &mut push);
                        dense(format!("{}.fc2", se.name), se.squeeze, se.channels, &mut push);
                    }
                    conv(&b.project, &mut push);
                }
            }
        }
        let h = &self.heads;
        for mlp in [&h.latent_t, &h.latent_r, &h.translation, &h.value] {
            for (name, i, o) in mlp.layers() {
                dense(name, i, o, &mut push);
            }
        }
        for p in AttentionPlan::PROJECTIONS {
            dense(h.attention.projection(p), h.attention.embed, h.attention.embed, &mut push);
        }
        for (name, i, o) in h.rotation.layers() {
            dense(name, i, o, &mut push);
        }
        // Start the raw quaternion near the identity rotation.
        let last = format!("{}.bias", h.rotation.layer_name(h.rotation.dims.len() - 2));
        if let Some(s) = specs.iter_mut().find(|s| s.name == last) {
            s.init = Init::Values(&[1.0, 0.0, 0.0, 0.0]);
        }
        specs
    }

    pub fn num_params(&self) -> usize {
        self.param_specs().iter().map(|s| s.shape.iter().product::<usize>()).sum()
    }
}
