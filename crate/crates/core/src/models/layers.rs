//! Building blocks shared by the DRN and RCAN-style networks.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;
use crate::tensor::ops::{
    concat_channels, conv2d, conv2d_backward, global_avg_pool, global_avg_pool_backward,
    pixel_shuffle, pixel_unshuffle, relu, relu_backward, scale_channels, scale_channels_backward,
    sigmoid, sigmoid_backward, split_channels,
};
use crate::tensor::{Parameter, Scalar, Tensor};

/// Square stride-1 convolution with "same" zero padding.
#[derive(Clone, Debug)]
pub struct Conv<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
    padding: usize,
}

impl<T: Scalar> Conv<T> {
    /// Kaiming-uniform weights (`bound = sqrt(6 / fan_in)`), zero bias.
    pub fn new(name: &str, c_in: usize, c_out: usize, kernel: usize, rng: &mut ChaCha8Rng) -> Self {
        let fan_in = (c_in * kernel * kernel) as f64;
        let bound = (6.0 / fan_in).sqrt();
        let n = c_out * c_in * kernel * kernel;
        let values = (0..n)
            .map(|_| T::from_f64_lossy(rng.random_range(-bound..bound)))
            .collect();
        let weight =
            Tensor::from_vec([c_out, c_in, kernel, kernel], values).expect("length matches shape");
        Conv {
            weight: Parameter::new(format!("{name}.weight"), weight),
            bias: Parameter::new(format!("{name}.bias"), Tensor::zeros([1, c_out, 1, 1])),
            padding: kernel / 2,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d(x, &self.weight, &self.bias, 1, self.padding)
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>, input: &Tensor<T>) -> Result<Tensor<T>> {
        conv2d_backward(
            grad_out,
            input,
            &mut self.weight,
            &mut self.bias,
            1,
            self.padding,
        )
    }

    pub fn params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        out.push(&self.weight);
        out.push(&self.bias);
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<T>>) {
        out.push(&mut self.weight);
        out.push(&mut self.bias);
    }
}

/// Squeeze-and-excitation style gate: pool, bottleneck, sigmoid, rescale.
#[derive(Clone, Debug)]
pub struct ChannelAttention<T> {
    pub down: Conv<T>,
    pub up: Conv<T>,
}

#[derive(Clone, Debug)]
pub struct AttentionCache<T> {
    input: Tensor<T>,
    pooled: Tensor<T>,
    hidden: Tensor<T>,
    gate: Tensor<T>,
}

impl<T: Scalar> ChannelAttention<T> {
    pub fn new(name: &str, features: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Self {
        let mid = features / reduction;
        ChannelAttention {
            down: Conv::new(&format!("{name}.down"), features, mid, 1, rng),
            up: Conv::new(&format!("{name}.up"), mid, features, 1, rng),
        }
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        keep: bool,
    ) -> Result<(Tensor<T>, Option<AttentionCache<T>>)> {
        let pooled = global_avg_pool(x)?;
        let hidden = relu(&self.down.forward(&pooled)?);
        let gate = sigmoid(&self.up.forward(&hidden)?);
        let y = scale_channels(x, &gate)?;
        let cache = keep.then(|| AttentionCache {
            input: x.clone(),
            pooled,
            hidden,
            gate,
        });
        Ok((y, cache))
    }

    pub fn backward(
        &mut self,
        grad_out: &Tensor<T>,
        cache: &AttentionCache<T>,
    ) -> Result<Tensor<T>> {
        let (mut grad_in, grad_gate) =
            scale_channels_backward(grad_out, &cache.input, &cache.gate)?;
        let g = sigmoid_backward(&grad_gate, &cache.gate)?;
        let g = self.up.backward(&g, &cache.hidden)?;
        let g = relu_backward(&g, &cache.hidden)?;
        let g = self.down.backward(&g, &cache.pooled)?;
        grad_in.add_assign(&global_avg_pool_backward(&g, cache.input.shape())?)?;
        Ok(grad_in)
    }

    pub fn params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        self.down.params(out);
        self.up.params(out);
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<T>>) {
        self.down.params_mut(out);
        self.up.params_mut(out);
    }
}

/// One "double layer" stage: conv3x3, ReLU, conv3x3, ReLU.
#[derive(Clone, Debug)]
pub struct DoubleConv<T> {
    pub first: Conv<T>,
    pub second: Conv<T>,
}

#[derive(Clone, Debug)]
struct DoubleConvCache<T> {
    input: Tensor<T>,
    mid: Tensor<T>,
    out: Tensor<T>,
}

impl<T: Scalar> DoubleConv<T> {
    fn new(name: &str, features: usize, rng: &mut ChaCha8Rng) -> Self {
        DoubleConv {
            first: Conv::new(&format!("{name}.conv_a"), features, features, 3, rng),
            second: Conv::new(&format!("{name}.conv_b"), features, features, 3, rng),
        }
    }

    fn forward(&self, x: &Tensor<T>) -> Result<(Tensor<T>, Tensor<T>)> {
        let mid = relu(&self.first.forward(x)?);
        let out = relu(&self.second.forward(&mid)?);
        Ok((mid, out))
    }

    fn backward(&mut self, grad_out: &Tensor<T>, cache: &DoubleConvCache<T>) -> Result<Tensor<T>> {
        let g = relu_backward(grad_out, &cache.out)?;
        let g = self.second.backward(&g, &cache.mid)?;
        let g = relu_backward(&g, &cache.mid)?;
        self.first.backward(&g, &cache.input)
    }
}

/// Dense residual block: `L` double-conv stages whose outputs are
/// concatenated, fused back to `F` channels, gated by channel attention and
/// added to the block input.
///
/// The input of the previous block (`pred`) is added to the inputs of the
/// first two stages.
#[derive(Clone, Debug)]
pub struct DenseResidualBlock<T> {
    pub stages: Vec<DoubleConv<T>>,
    pub fuse: Conv<T>,
    pub attention: ChannelAttention<T>,
}

#[derive(Clone, Debug)]
pub struct DenseBlockCache<T> {
    stages: Vec<DoubleConvCache<T>>,
    concat: Tensor<T>,
    attention: AttentionCache<T>,
}

impl<T: Scalar> DenseResidualBlock<T> {
    pub fn new(
        name: &str,
        features: usize,
        stages: usize,
        reduction: usize,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let stage_layers = (0..stages)
            .map(|s| DoubleConv::new(&format!("{name}.stages.{s}"), features, rng))
            .collect();
        DenseResidualBlock {
            stages: stage_layers,
            fuse: Conv::new(&format!("{name}.fuse"), features * stages, features, 1, rng),
            attention: ChannelAttention::new(
                &format!("{name}.attention"),
                features,
                reduction,
                rng,
            ),
        }
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        pred: &Tensor<T>,
        keep: bool,
    ) -> Result<(Tensor<T>, Option<DenseBlockCache<T>>)> {
        let mut caches = Vec::with_capacity(self.stages.len());
        let mut outs: Vec<Tensor<T>> = Vec::with_capacity(self.stages.len());
        for (s, stage) in self.stages.iter().enumerate() {
            let base = if s == 0 { x } else { &outs[s - 1] };
            let input = if s < 2 { base.add(pred)? } else { base.clone() };
            let (mid, out) = stage.forward(&input)?;
            if keep {
                caches.push(DoubleConvCache {
                    input,
                    mid,
                    out: out.clone(),
                });
            }
            outs.push(out);
        }
        let refs: Vec<&Tensor<T>> = outs.iter().collect();
        let concat = concat_channels(&refs)?;
        let fused = self.fuse.forward(&concat)?;
        let (gated, att_cache) = self.attention.forward(&fused, keep)?;
        let y = gated.add(x)?;
        let cache = att_cache.map(|attention| DenseBlockCache {
            stages: caches,
            concat,
            attention,
        });
        Ok((y, cache))
    }

    /// Returns gradients with respect to `(x, pred)`.
    pub fn backward(
        &mut self,
        grad_out: &Tensor<T>,
        cache: &DenseBlockCache<T>,
    ) -> Result<(Tensor<T>, Tensor<T>)> {
        let mut grad_x = grad_out.clone();
        let mut grad_pred = Tensor::zeros(grad_out.shape());
        let g = self.attention.backward(grad_out, &cache.attention)?;
        let g = self.fuse.backward(&g, &cache.concat)?;
        let widths = vec![grad_out.shape().c; self.stages.len()];
        let mut stage_grads = split_channels(&g, &widths)?;
        for s in (0..self.stages.len()).rev() {
            let g_in = self.stages[s].backward(&stage_grads[s], &cache.stages[s])?;
            if s < 2 {
                grad_pred.add_assign(&g_in)?;
            }
            if s == 0 {
                grad_x.add_assign(&g_in)?;
            } else {
                stage_grads[s - 1].add_assign(&g_in)?;
            }
        }
        Ok((grad_x, grad_pred))
    }

    pub fn params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        for s in &self.stages {
            s.first.params(out);
            s.second.params(out);
        }
        self.fuse.params(out);
        self.attention.params(out);
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<T>>) {
        for s in &mut self.stages {
            s.first.params_mut(out);
            s.second.params_mut(out);
        }
        self.fuse.params_mut(out);
        self.attention.params_mut(out);
    }
}

/// Residual channel-attention block: conv, ReLU, conv, attention, skip.
#[derive(Clone, Debug)]
pub struct ResidualAttentionBlock<T> {
    pub first: Conv<T>,
    pub second: Conv<T>,
    pub attention: ChannelAttention<T>,
}

#[derive(Clone, Debug)]
pub struct RcabCache<T> {
    input: Tensor<T>,
    mid: Tensor<T>,
    attention: AttentionCache<T>,
}

impl<T: Scalar> ResidualAttentionBlock<T> {
    pub fn new(name: &str, features: usize, reduction: usize, rng: &mut ChaCha8Rng) -> Self {
        ResidualAttentionBlock {
            first: Conv::new(&format!("{name}.conv_a"), features, features, 3, rng),
            second: Conv::new(&format!("{name}.conv_b"), features, features, 3, rng),
            attention: ChannelAttention::new(
                &format!("{name}.attention"),
                features,
                reduction,
                rng,
            ),
        }
    }

    pub fn forward(&self, x: &Tensor<T>, keep: bool) -> Result<(Tensor<T>, Option<RcabCache<T>>)> {
        let mid = relu(&self.first.forward(x)?);
        let body = self.second.forward(&mid)?;
        let (gated, att) = self.attention.forward(&body, keep)?;
        let y = gated.add(x)?;
        Ok((
            y,
            att.map(|attention| RcabCache {
                input: x.clone(),
                mid,
                attention,
            }),
        ))
    }

    pub fn backward(&mut self, grad_out: &Tensor<T>, cache: &RcabCache<T>) -> Result<Tensor<T>> {
        let g = self.attention.backward(grad_out, &cache.attention)?;
        let g = self.second.backward(&g, &cache.mid)?;
        let g = relu_backward(&g, &cache.mid)?;
        let mut grad_in = self.first.backward(&g, &cache.input)?;
        grad_in.add_assign(grad_out)?;
        Ok(grad_in)
    }

    pub fn params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        self.first.params(out);
        self.second.params(out);
        self.attention.params(out);
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<T>>) {
        self.first.params_mut(out);
        self.second.params_mut(out);
        self.attention.params_mut(out);
    }
}

/// conv3x3 to `F*s*s`, pixel shuffle, ReLU; ×4 cascades two ×2 stages.
#[derive(Clone, Debug)]
pub struct Upsampler<T> {
    pub stages: Vec<Conv<T>>,
    factors: Vec<usize>,
}

#[derive(Clone, Debug)]
pub struct UpsamplerCache<T> {
    inputs: Vec<Tensor<T>>,
    outputs: Vec<Tensor<T>>,
}

impl<T: Scalar> Upsampler<T> {
    pub fn new(name: &str, features: usize, scale: usize, rng: &mut ChaCha8Rng) -> Self {
        let factors = if scale == 4 { vec![2, 2] } else { vec![scale] };
        let stages = factors
            .iter()
            .enumerate()
            .map(|(i, &f)| Conv::new(&format!("{name}.{i}"), features, features * f * f, 3, rng))
            .collect();
        Upsampler { stages, factors }
    }

    pub fn forward(
        &self,
        x: &Tensor<T>,
        keep: bool,
    ) -> Result<(Tensor<T>, Option<UpsamplerCache<T>>)> {
        let mut cache = UpsamplerCache {
            inputs: Vec::new(),
            outputs: Vec::new(),
        };
        let mut h = x.clone();
        for (conv, &f) in self.stages.iter().zip(&self.factors) {
            let y = relu(&pixel_shuffle(&conv.forward(&h)?, f)?);
            if keep {
                cache.inputs.push(h);
                cache.outputs.push(y.clone());
            }
            h = y;
        }
        Ok((h, keep.then_some(cache)))
    }

    pub fn backward(
        &mut self,
        grad_out: &Tensor<T>,
        cache: &UpsamplerCache<T>,
    ) -> Result<Tensor<T>> {
        let mut g = grad_out.clone();
        for i in (0..self.stages.len()).rev() {
            let gr = relu_backward(&g, &cache.outputs[i])?;
            let gs = pixel_unshuffle(&gr, self.factors[i])?;
            g = self.stages[i].backward(&gs, &cache.inputs[i])?;
        }
        Ok(g)
    }

    pub fn params<'a>(&'a self, out: &mut Vec<&'a Parameter<T>>) {
        self.stages.iter().for_each(|c| c.params(out));
    }

    pub fn params_mut<'a>(&'a mut self, out: &mut Vec<&'a mut Parameter<T>>) {
        self.stages.iter_mut().for_each(|c| c.params_mut(out));
    }
}
