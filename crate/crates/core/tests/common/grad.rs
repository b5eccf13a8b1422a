//! Finite-difference checks for every differentiable primitive and layer.
//! Each returns the largest relative error found.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use srforge::metrics::{l1_loss, mixed_loss, ms_ssim, ms_ssim_with_grad};
use srforge::models::layers::{
    ChannelAttention, DenseResidualBlock, ResidualAttentionBlock, Upsampler,
};
use srforge::tensor::ops::*;
use srforge::{DrnConfig, Model, ModelConfig, Parameter, RcanConfig, Shape, Tensor};

use super::{fd_check, project, rand_away_from_zero, rand_tensor};

fn param(name: &str, t: Tensor<f64>) -> Parameter<f64> {
    Parameter::new(name, t)
}

/// Random batch/channel/spatial extents bounded by (2, 4, 7, 7).
fn rand_dims(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    (
        rng.random_range(1..=2),
        rng.random_range(1..=4),
        rng.random_range(2..=7),
        rng.random_range(2..=7),
    )
}

pub fn conv2d_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, ci, _, _) = rand_dims(&mut rng);
    let co = rng.random_range(1..=4);
    let k = if rng.random_bool(0.5) { 3 } else { 1 };
    let stride = rng.random_range(1..=2);
    let padding = if rng.random_bool(0.5) { k / 2 } else { 0 };
    // pick extents whose output size is integral
    let pick = |rng: &mut ChaCha8Rng| loop {
        let s = rng.random_range(k.max(2)..=7);
        if (s + 2 * padding - k) % stride == 0 {
            return s;
        }
    };
    let (h, w) = (pick(&mut rng), pick(&mut rng));
    let x = rand_tensor([n, ci, h, w], &mut rng, -1.0, 1.0);
    let wt = rand_tensor([co, ci, k, k], &mut rng, -1.0, 1.0);
    let b = rand_tensor([1, co, 1, 1], &mut rng, -1.0, 1.0);
    let mut weight = param("w", wt.clone());
    let mut bias = param("b", b.clone());
    let y = conv2d(&x, &weight, &bias, stride, padding).unwrap();
    let r = rand_tensor(y.shape(), &mut rng, -1.0, 1.0);
    let gx = conv2d_backward(&r, &x, &mut weight, &mut bias, stride, padding).unwrap();
    fd_check(
        &[x, wt, b],
        |v| {
            let y = conv2d(
                &v[0],
                &param("w", v[1].clone()),
                &param("b", v[2].clone()),
                stride,
                padding,
            )
            .unwrap();
            project(&y, &r)
        },
        &[gx, weight.grad.clone(), bias.grad.clone()],
        None,
    )
}

pub fn relu_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, h, w) = rand_dims(&mut rng);
    let x = rand_away_from_zero([n, c, h, w], &mut rng, 0.05);
    let r = rand_tensor(x.shape(), &mut rng, -1.0, 1.0);
    let g = relu_backward(&r, &x).unwrap();
    fd_check(&[x], |v| project(&relu(&v[0]), &r), &[g], None)
}

pub fn sigmoid_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, h, w) = rand_dims(&mut rng);
    let x = rand_tensor([n, c, h, w], &mut rng, -4.0, 4.0);
    let r = rand_tensor(x.shape(), &mut rng, -1.0, 1.0);
    let g = sigmoid_backward(&r, &sigmoid(&x)).unwrap();
    fd_check(&[x], |v| project(&sigmoid(&v[0]), &r), &[g], None)
}

pub fn global_avg_pool_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, h, w) = rand_dims(&mut rng);
    let x = rand_tensor([n, c, h, w], &mut rng, -1.0, 1.0);
    let r = rand_tensor([n, c, 1, 1], &mut rng, -1.0, 1.0);
    let g = global_avg_pool_backward(&r, x.shape()).unwrap();
    fd_check(
        &[x],
        |v| project(&global_avg_pool(&v[0]).unwrap(), &r),
        &[g],
        None,
    )
}

pub fn concat_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, _, h, w) = rand_dims(&mut rng);
    let widths: Vec<usize> = (0..rng.random_range(1..=3))
        .map(|_| rng.random_range(1..=4))
        .collect();
    let xs: Vec<Tensor<f64>> = widths
        .iter()
        .map(|&c| rand_tensor([n, c, h, w], &mut rng, -1.0, 1.0))
        .collect();
    let total: usize = widths.iter().sum();
    let r = rand_tensor([n, total, h, w], &mut rng, -1.0, 1.0);
    let grads = split_channels(&r, &widths).unwrap();
    fd_check(
        &xs,
        |v| {
            let refs: Vec<&Tensor<f64>> = v.iter().collect();
            project(&concat_channels(&refs).unwrap(), &r)
        },
        &grads,
        None,
    )
}

pub fn pixel_shuffle_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = rng.random_range(1..=3);
    let (n, c, h, w) = rand_dims(&mut rng);
    let c = c.min(2);
    let x = rand_tensor([n, c * s * s, h.min(4), w.min(4)], &mut rng, -1.0, 1.0);
    let y = pixel_shuffle(&x, s).unwrap();
    let r = rand_tensor(y.shape(), &mut rng, -1.0, 1.0);
    let g = pixel_unshuffle(&r, s).unwrap();
    fd_check(
        &[x],
        |v| project(&pixel_shuffle(&v[0], s).unwrap(), &r),
        &[g],
        None,
    )
}

pub fn scale_channels_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, h, w) = rand_dims(&mut rng);
    let x = rand_tensor([n, c, h, w], &mut rng, -1.0, 1.0);
    let gate = rand_tensor([n, c, 1, 1], &mut rng, 0.0, 1.0);
    let r = rand_tensor(x.shape(), &mut rng, -1.0, 1.0);
    let (gx, gg) = scale_channels_backward(&r, &x, &gate).unwrap();
    fd_check(
        &[x, gate],
        |v| project(&scale_channels(&v[0], &v[1]).unwrap(), &r),
        &[gx, gg],
        None,
    )
}

pub fn l1_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (n, c, h, w) = rand_dims(&mut rng);
    let t = rand_tensor([n, c, h, w], &mut rng, 0.0, 1.0);
    let p = t
        .add(&rand_away_from_zero(t.shape(), &mut rng, 0.01))
        .unwrap();
    let (_, g) = l1_loss(&p, &t).unwrap();
    fd_check(&[p], |v| l1_loss(&v[0], &t).unwrap().0, &[g], None)
}

/// Smooth target plus a perturbed prediction, 48x48 (three MS-SSIM scales).
fn ssim_pair(rng: &mut ChaCha8Rng, channels: usize) -> (Tensor<f64>, Tensor<f64>) {
    let (fy, fx) = (rng.random_range(0.1..0.4), rng.random_range(0.1..0.4));
    let t = Tensor::from_fn([1, channels, 48, 48], |_, c, y, x| {
        0.5 + 0.3 * ((y as f64 * fy + c as f64).sin() * (x as f64 * fx).cos())
    });
    let noise = rand_tensor(t.shape(), rng, -0.1, 0.1);
    (t.add(&noise).unwrap(), t)
}

fn sampled_entries(len: usize, count: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
    (0..count).map(|_| rng.random_range(0..len)).collect()
}

pub fn ms_ssim_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, t) = ssim_pair(&mut rng, 2);
    let (_, g) = ms_ssim_with_grad(&p, &t).unwrap();
    let idx = sampled_entries(p.len(), 200, &mut rng);
    fd_check(&[p], |v| ms_ssim(&v[0], &t).unwrap(), &[g], Some(&[idx]))
}

pub fn mixed_loss_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (p, t) = ssim_pair(&mut rng, 1);
    let alpha = rng.random_range(0.2..0.9);
    let (_, g) = mixed_loss(&p, &t, alpha).unwrap();
    let idx = sampled_entries(p.len(), 200, &mut rng);
    fd_check(
        &[p],
        |v| mixed_loss(&v[0], &t, alpha).unwrap().0.total,
        &[g],
        Some(&[idx]),
    )
}

pub fn channel_attention_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut layer = ChannelAttention::<f64>::new("ca", 4, 2, &mut rng);
    let x = rand_tensor([2, 4, 5, 6], &mut rng, -1.0, 1.0);
    let (y, cache) = layer.forward(&x, true).unwrap();
    let r = rand_tensor(y.shape(), &mut rng, -1.0, 1.0);
    let g = layer.backward(&r, &cache.unwrap()).unwrap();
    fd_check(
        &[x],
        |v| project(&layer.forward(&v[0], false).unwrap().0, &r),
        &[g],
        None,
    )
}

pub fn dense_block_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut block = DenseResidualBlock::<f64>::new("b", 4, 3, 2, &mut rng);
    let x = rand_tensor([1, 4, 5, 5], &mut rng, -1.0, 1.0);
    let pred = rand_tensor([1, 4, 5, 5], &mut rng, -1.0, 1.0);
    let (y, cache) = block.forward(&x, &pred, true).unwrap();
    let r = rand_tensor(y.shape(), &mut rng, -1.0, 1.0);
    let (gx, gp) = block.backward(&r, &cache.unwrap()).unwrap();
    fd_check(
        &[x, pred],
        |v| project(&block.forward(&v[0], &v[1], false).unwrap().0, &r),
        &[gx, gp],
        None,
    )
}

pub fn residual_attention_block_case(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut block = ResidualAttentionBlock::<f64>::new("b", 4, 2, &mut rng);
    let x = rand_tensor([2, 4, 5, 4], &mut rng, -1.0, 1.0);
    let (y, cache) = block.forward(&x, true).unwrap();
    let r = rand_tensor(y.shape(), &mut rng, -1.0, 1.0);
    let g = block.backward(&r, &cache.unwrap()).unwrap();
    fd_check(
        &[x],
        |v| project(&block.forward(&v[0], false).unwrap().0, &r),
        &[g],
        None,
    )
}

pub fn upsampler_case(seed: u64, scale: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut up = Upsampler::<f64>::new("u", 2, scale, &mut rng);
    let x = rand_tensor([1, 2, 3, 4], &mut rng, -1.0, 1.0);
    let (y, cache) = up.forward(&x, true).unwrap();
    let r = rand_tensor(y.shape(), &mut rng, -1.0, 1.0);
    let g = up.backward(&r, &cache.unwrap()).unwrap();
    fd_check(
        &[x],
        |v| project(&up.forward(&v[0], false).unwrap().0, &r),
        &[g],
        None,
    )
}

/// Every parameter and input entry of a whole model under an L1 loss.
pub fn model_case(config: &ModelConfig, seed: u64, lr_size: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model::<f64>::build(config, seed).unwrap();
    // non-zero biases so that no unit sits exactly at a ReLU kink
    for p in model.parameters_mut() {
        if p.name.ends_with(".bias") {
            p.value = rand_tensor(p.value.shape(), &mut rng, -0.1, 0.1);
        }
    }
    let s = config.scale();
    let x = rand_tensor([1, 3, lr_size, lr_size], &mut rng, 0.0, 1.0);
    let target = rand_tensor(
        Shape::new(1, 3, lr_size * s, lr_size * s),
        &mut rng,
        0.0,
        1.0,
    );
    let (y, cache) = model.forward_train(&x).unwrap();
    let (_, gy) = l1_loss(&y, &target).unwrap();
    model.zero_grads();
    let gx = model.backward(&cache, &gy).unwrap();
    let mut inputs = vec![x];
    let mut analytic = vec![gx];
    for p in model.parameters() {
        inputs.push(p.value.clone());
        analytic.push(p.grad.clone());
    }
    fd_check(
        &inputs,
        |v| {
            let mut m = model.clone();
            for (p, val) in m.parameters_mut().into_iter().zip(&v[1..]) {
                p.value = val.clone();
            }
            l1_loss(&m.forward(&v[0]).unwrap(), &target).unwrap().0
        },
        &analytic,
        None,
    )
}

pub fn tiny_drn_config() -> ModelConfig {
    ModelConfig::Drn(DrnConfig {
        features: 4,
        depth: 1,
        block_size: 2,
        scale: 2,
        attention_reduction: 2,
    })
}

pub fn tiny_rcan_config() -> ModelConfig {
    ModelConfig::Rcan(RcanConfig {
        features: 4,
        groups: 2,
        blocks_per_group: 1,
        attention_reduction: 2,
        scale: 3,
    })
}

/// All primitive and layer checks as `(name, max relative error)`.
pub fn all_op_checks() -> Vec<(&'static str, f64)> {
    let seeds = 0..4u64;
    let worst = |f: fn(u64) -> f64| seeds.clone().map(f).fold(0.0, f64::max);
    vec![
        ("conv2d", worst(conv2d_case)),
        ("relu", worst(relu_case)),
        ("sigmoid", worst(sigmoid_case)),
        ("global_avg_pool", worst(global_avg_pool_case)),
        ("concat_channels", worst(concat_case)),
        ("pixel_shuffle", worst(pixel_shuffle_case)),
        ("scale_channels", worst(scale_channels_case)),
        ("l1_loss", worst(l1_case)),
        ("channel_attention", worst(channel_attention_case)),
        ("dense_residual_block", worst(dense_block_case)),
        (
            "residual_attention_block",
            worst(residual_attention_block_case),
        ),
        ("upsampler x3", upsampler_case(1, 3)),
        ("upsampler x4", upsampler_case(2, 4)),
        ("ms_ssim", ms_ssim_case(1).max(ms_ssim_case(2))),
        ("mixed_loss", mixed_loss_case(3)),
    ]
}
