//! Dense residual network (DRN) and an RCAN-style sibling, built from
//! declarative configs.
//!
//! DRN topology: shallow 3x3 conv (3 -> F), `D` dense residual blocks,
//! upsampler, output 3x3 conv (F -> 3). Each block receives its own input and
//! the input of the preceding block; the first block uses the shallow
//! features for both.

mod io;
pub mod layers;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Parameter, Scalar, Shape, Tensor};
use layers::{
    Conv, DenseBlockCache, DenseResidualBlock, RcabCache, ResidualAttentionBlock, Upsampler,
    UpsamplerCache,
};

pub use io::{
    decode_weights, encode_weights, load_weights, read_container, save_weights, write_container,
    Container,
};

pub const DEFAULT_ATTENTION_REDUCTION: usize = 16;

fn check_scale(scale: usize) -> Result<()> {
    if !(2..=4).contains(&scale) {
        return Err(Error::invalid(format!("scale {scale} not in {{2, 3, 4}}")));
    }
    Ok(())
}

fn check_reduction(features: usize, reduction: usize) -> Result<()> {
    if reduction == 0 || features < reduction || !features.is_multiple_of(reduction) {
        return Err(Error::invalid(format!(
            "attention reduction {reduction} must divide features {features}"
        )));
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DrnConfig {
    pub features: usize,
    pub depth: usize,
    pub block_size: usize,
    pub scale: usize,
    #[serde(default = "default_reduction")]
    pub attention_reduction: usize,
}

fn default_reduction() -> usize {
    DEFAULT_ATTENTION_REDUCTION
}

impl DrnConfig {
    /// F=128, D=18, L=3.
    pub fn star(scale: usize) -> Self {
        DrnConfig {
            features: 128,
            depth: 18,
            block_size: 3,
            scale,
            attention_reduction: 16,
        }
    }

    /// Desk-scale preset, F=16, D=2, L=2.
    pub fn tiny(scale: usize) -> Self {
        DrnConfig {
            features: 16,
            depth: 2,
            block_size: 2,
            scale,
            attention_reduction: 4,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_scale(self.scale)?;
        if self.features == 0 || self.depth == 0 || self.block_size == 0 {
            return Err(Error::invalid(format!(
                "DRN extents must be positive: {self:?}"
            )));
        }
        check_reduction(self.features, self.attention_reduction)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RcanConfig {
    pub features: usize,
    pub groups: usize,
    pub blocks_per_group: usize,
    #[serde(default = "default_reduction")]
    pub attention_reduction: usize,
    pub scale: usize,
}

impl RcanConfig {
    /// 128 features, 5 groups of 10 blocks.
    pub fn star(scale: usize) -> Self {
        RcanConfig {
            features: 128,
            groups: 5,
            blocks_per_group: 10,
            attention_reduction: 16,
            scale,
        }
    }

    /// Original RCAN: 64 features, 10 groups of 20 blocks.
    pub fn original(scale: usize) -> Self {
        RcanConfig {
            features: 64,
            groups: 10,
            blocks_per_group: 20,
            attention_reduction: 16,
            scale,
        }
    }

    pub fn tiny(scale: usize) -> Self {
        RcanConfig {
            features: 16,
            groups: 2,
            blocks_per_group: 2,
            attention_reduction: 4,
            scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        check_scale(self.scale)?;
        if self.features == 0 || self.groups == 0 || self.blocks_per_group == 0 {
            return Err(Error::invalid(format!(
                "RCAN extents must be positive: {self:?}"
            )));
        }
        check_reduction(self.features, self.attention_reduction)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "arch", rename_all = "lowercase")]
pub enum ModelConfig {
    Drn(DrnConfig),
    Rcan(RcanConfig),
}

impl ModelConfig {
    pub fn scale(&self) -> usize {
        match self {
            ModelConfig::Drn(c) => c.scale,
            ModelConfig::Rcan(c) => c.scale,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            ModelConfig::Drn(c) => c.validate(),
            ModelConfig::Rcan(c) => c.validate(),
        }
    }

    /// Named presets: `drn-star`, `drn-tiny`, `rcan-star`, `rcan`, `rcan-tiny`.
    pub fn preset(name: &str, scale: usize) -> Result<Self> {
        let cfg = match name {
            "drn-star" => ModelConfig::Drn(DrnConfig::star(scale)),
            "drn-tiny" => ModelConfig::Drn(DrnConfig::tiny(scale)),
            "rcan-star" => ModelConfig::Rcan(RcanConfig::star(scale)),
            "rcan" => ModelConfig::Rcan(RcanConfig::original(scale)),
            "rcan-tiny" => ModelConfig::Rcan(RcanConfig::tiny(scale)),
            other => {
                return Err(Error::invalid(format!(
                    "unknown preset {other:?} (drn-star, drn-tiny, rcan-star, rcan, rcan-tiny)"
                )))
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
struct Drn<T> {
    conv_in: Conv<T>,
    blocks: Vec<DenseResidualBlock<T>>,
    upsampler: Upsampler<T>,
    conv_out: Conv<T>,
}

#[derive(Clone, Debug)]
struct ResidualGroup<T> {
    blocks: Vec<ResidualAttentionBlock<T>>,
    conv: Conv<T>,
}

#[derive(Clone, Debug)]
struct Rcan<T> {
    conv_in: Conv<T>,
    groups: Vec<ResidualGroup<T>>,
    body_conv: Conv<T>,
    upsampler: Upsampler<T>,
    conv_out: Conv<T>,
}

#[derive(Clone, Debug)]
#[allow(clippy::large_enum_variant)]
enum Network<T> {
    Drn(Drn<T>),
    Rcan(Rcan<T>),
}

/// Activations saved by [`Model::forward_train`] for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardCache<T> {
    input: Tensor<T>,
    shallow: Tensor<T>,
    body: BodyCache<T>,
    upsampler: UpsamplerCache<T>,
    upsampled: Tensor<T>,
}

#[derive(Clone, Debug)]
enum BodyCache<T> {
    Drn(Vec<DenseBlockCache<T>>),
    Rcan {
        groups: Vec<GroupCache<T>>,
        body_in: Tensor<T>,
    },
}

#[derive(Clone, Debug)]
struct GroupCache<T> {
    blocks: Vec<RcabCache<T>>,
    conv_in: Tensor<T>,
}

/// An instantiated network together with the config it was built from.
#[derive(Clone, Debug)]
pub struct Model<T = f32> {
    config: ModelConfig,
    net: Network<T>,
}

impl<T: Scalar> Model<T> {
    pub fn build(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = match config {
            ModelConfig::Drn(c) => Network::Drn(Drn {
                conv_in: Conv::new("conv_in", 3, c.features, 3, &mut rng),
                blocks: (0..c.depth)
                    .map(|i| {
                        DenseResidualBlock::new(
                            &format!("blocks.{i}"),
                            c.features,
                            c.block_size,
                            c.attention_reduction,
                            &mut rng,
                        )
                    })
                    .collect(),
                upsampler: Upsampler::new("upsampler", c.features, c.scale, &mut rng),
                conv_out: Conv::new("conv_out", c.features, 3, 3, &mut rng),
            }),
            ModelConfig::Rcan(c) => Network::Rcan(Rcan {
                conv_in: Conv::new("conv_in", 3, c.features, 3, &mut rng),
                groups: (0..c.groups)
                    .map(|g| ResidualGroup {
                        blocks: (0..c.blocks_per_group)
                            .map(|b| {
                                ResidualAttentionBlock::new(
                                    &format!("groups.{g}.blocks.{b}"),
                                    c.features,
                                    c.attention_reduction,
                                    &mut rng,
                                )
                            })
                            .collect(),
                        conv: Conv::new(
                            &format!("groups.{g}.conv"),
                            c.features,
                            c.features,
                            3,
                            &mut rng,
                        ),
                    })
                    .collect(),
                body_conv: Conv::new("body_conv", c.features, c.features, 3, &mut rng),
                upsampler: Upsampler::new("upsampler", c.features, c.scale, &mut rng),
                conv_out: Conv::new("conv_out", c.features, 3, 3, &mut rng),
            }),
        };
        Ok(Model {
            config: config.clone(),
            net,
        })
    }

    pub fn build_drn(config: &DrnConfig, seed: u64) -> Result<Self> {
        Self::build(&ModelConfig::Drn(config.clone()), seed)
    }

    pub fn build_rcan(config: &RcanConfig, seed: u64) -> Result<Self> {
        Self::build(&ModelConfig::Rcan(config.clone()), seed)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn scale(&self) -> usize {
        self.config.scale()
    }

    fn check_input(&self, x: &Tensor<T>) -> Result<()> {
        let s = x.shape();
        if s.c != 3 {
            return Err(Error::invalid(format!(
                "model expects 3 input channels, got {s:?}"
            )));
        }
        if s.h == 0 || s.w == 0 || s.n == 0 {
            return Err(Error::invalid(format!("empty model input {s:?}")));
        }
        Ok(())
    }

    fn run(&self, x: &Tensor<T>, keep: bool) -> Result<(Tensor<T>, Option<ForwardCache<T>>)> {
        self.check_input(x)?;
        let (conv_in, upsampler, conv_out) = match &self.net {
            Network::Drn(d) => (&d.conv_in, &d.upsampler, &d.conv_out),
            Network::Rcan(r) => (&r.conv_in, &r.upsampler, &r.conv_out),
        };
        let shallow = conv_in.forward(x)?;
        let (features, body) = match &self.net {
            Network::Drn(d) => {
                let mut caches = Vec::new();
                // block i sees the input of block i-1; block 0 uses the shallow features
                let mut pred = shallow.clone();
                let mut h = shallow.clone();
                for block in &d.blocks {
                    let (out, cache) = block.forward(&h, &pred, keep)?;
                    caches.extend(cache);
                    pred = std::mem::replace(&mut h, out);
                }
                (h, BodyCache::Drn(caches))
            }
            Network::Rcan(r) => {
                let mut groups = Vec::new();
                let mut h = shallow.clone();
                for group in &r.groups {
                    let mut g = h.clone();
                    let mut blocks = Vec::new();
                    for block in &group.blocks {
                        let (out, cache) = block.forward(&g, keep)?;
                        blocks.extend(cache);
                        g = out;
                    }
                    let out = group.conv.forward(&g)?.add(&h)?;
                    if keep {
                        groups.push(GroupCache { blocks, conv_in: g });
                    }
                    h = out;
                }
                let out = r.body_conv.forward(&h)?.add(&shallow)?;
                (out, BodyCache::Rcan { groups, body_in: h })
            }
        };
        let (upsampled, up_cache) = upsampler.forward(&features, keep)?;
        let y = conv_out.forward(&upsampled)?;
        let cache = up_cache.map(|upsampler| ForwardCache {
            input: x.clone(),
            shallow,
            body,
            upsampler,
            upsampled,
        });
        Ok((y, cache))
    }

    /// Raw (unclamped) inference output, `(N, 3, H*s, W*s)`.
    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.run(x, false)?.0)
    }

    /// Inference output clamped to `[0, 1]`.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        Ok(self.forward(x)?.clamp01())
    }

    /// Unclamped output plus the activations needed by [`Model::backward`].
    pub fn forward_train(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ForwardCache<T>)> {
        let (y, cache) = self.run(x, true)?;
        Ok((y, cache.expect("cache requested")))
    }

    /// Accumulate parameter gradients for `grad_out` and return the gradient
    /// with respect to the input image.
    pub fn backward(&mut self, cache: &ForwardCache<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
        let (upsampler, conv_out) = match &mut self.net {
            Network::Drn(d) => (&mut d.upsampler, &mut d.conv_out),
            Network::Rcan(r) => (&mut r.upsampler, &mut r.conv_out),
        };
        let g = conv_out.backward(grad_out, &cache.upsampled)?;
        let g_features = upsampler.backward(&g, &cache.upsampler)?;
        let g_shallow = match (&mut self.net, &cache.body) {
            (Network::Drn(d), BodyCache::Drn(blocks)) => {
                // grads[i] is the gradient w.r.t. the input of block i (grads[0] = shallow)
                let depth = d.blocks.len();
                let mut grads: Vec<Tensor<T>> =
                    vec![Tensor::zeros(cache.shallow.shape()); depth + 1];
                grads[depth] = g_features;
                for i in (0..depth).rev() {
                    let (gx, gp) = d.blocks[i].backward(&grads[i + 1], &blocks[i])?;
                    grads[i].add_assign(&gx)?;
                    let pred = i.saturating_sub(1);
                    grads[pred].add_assign(&gp)?;
                }
                grads.swap_remove(0)
            }
            (Network::Rcan(r), BodyCache::Rcan { groups, body_in }) => {
                let mut g_shallow = g_features.clone();
                let mut g = r.body_conv.backward(&g_features, body_in)?;
                for (group, gc) in r.groups.iter_mut().zip(groups).rev() {
                    let mut gb = group.conv.backward(&g, &gc.conv_in)?;
                    for (block, bc) in group.blocks.iter_mut().zip(&gc.blocks).rev() {
                        gb = block.backward(&gb, bc)?;
                    }
                    gb.add_assign(&g)?;
                    g = gb;
                }
                g_shallow.add_assign(&g)?;
                g_shallow
            }
            _ => {
                return Err(Error::invalid(
                    "forward cache does not belong to this architecture",
                ))
            }
        };
        let conv_in = match &mut self.net {
            Network::Drn(d) => &mut d.conv_in,
            Network::Rcan(r) => &mut r.conv_in,
        };
        conv_in.backward(&g_shallow, &cache.input)
    }

    /// Parameters in a fixed, name-stable order.
    pub fn parameters(&self) -> Vec<&Parameter<T>> {
        let mut out = Vec::new();
        match &self.net {
            Network::Drn(d) => {
                d.conv_in.params(&mut out);
                d.blocks.iter().for_each(|b| b.params(&mut out));
                d.upsampler.params(&mut out);
                d.conv_out.params(&mut out);
            }
            Network::Rcan(r) => {
                r.conv_in.params(&mut out);
                for g in &r.groups {
                    g.blocks.iter().for_each(|b| b.params(&mut out));
                    g.conv.params(&mut out);
                }
                r.body_conv.params(&mut out);
                r.upsampler.params(&mut out);
                r.conv_out.params(&mut out);
            }
        }
        out
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out = Vec::new();
        match &mut self.net {
            Network::Drn(d) => {
                d.conv_in.params_mut(&mut out);
                d.blocks.iter_mut().for_each(|b| b.params_mut(&mut out));
                d.upsampler.params_mut(&mut out);
                d.conv_out.params_mut(&mut out);
            }
            Network::Rcan(r) => {
                r.conv_in.params_mut(&mut out);
                for g in &mut r.groups {
                    g.blocks.iter_mut().for_each(|b| b.params_mut(&mut out));
                    g.conv.params_mut(&mut out);
                }
                r.body_conv.params_mut(&mut out);
                r.upsampler.params_mut(&mut out);
                r.conv_out.params_mut(&mut out);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.parameters().iter().map(|p| p.numel()).sum()
    }

    pub fn zero_grads(&mut self) {
        self.parameters_mut()
            .into_iter()
            .for_each(|p| p.zero_grad());
    }

    pub fn parameter(&self, name: &str) -> Option<&Parameter<T>> {
        self.parameters().into_iter().find(|p| p.name == name)
    }

    pub fn parameter_mut(&mut self, name: &str) -> Option<&mut Parameter<T>> {
        self.parameters_mut().into_iter().find(|p| p.name == name)
    }

    /// Same architecture and weights in another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        let mut out = Model::<U>::build(&self.config, 0).expect("config already validated");
        for (dst, src) in out.parameters_mut().into_iter().zip(self.parameters()) {
            *dst = src.cast();
        }
        out
    }
}

/// Expected output shape for an input shape.
pub fn output_shape(input: Shape, scale: usize) -> Shape {
    Shape::new(input.n, 3, input.h * scale, input.w * scale)
}
