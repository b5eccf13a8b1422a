//! Adam training loop over random augmented crops with the mixed
//! L1/MS-SSIM objective, per-epoch validation through the tiled inference
//! path, checkpointing and exact resume.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{random_crop_aug, DatasetManifest, ImagePair, Split};
use crate::ensemble::{model_ensemble, Bicubic, EnsembleSpec, Upscaler};
use crate::error::{Error, Result, WeightsError};
use crate::metrics::{mixed_loss, psnr, ssim, ImageMetrics, MetricReport, DEFAULT_ALPHA};
use crate::models::{load_weights, read_container, save_weights, write_container, Model};
use crate::seed;
use crate::tensor::{Parameter, Tensor};

pub const STATE_MAGIC: [u8; 4] = *b"SROS";
pub const BEST_CHECKPOINT: &str = "best.srfw";

#[derive(Copy, Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moment estimates, one pair per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<Tensor<f32>>,
    pub v: Vec<Tensor<f32>>,
}

impl AdamState {
    pub fn new(params: &[&Parameter<f32>]) -> Self {
        AdamState {
            step: 0,
            m: params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
            v: params
                .iter()
                .map(|p| Tensor::zeros(p.value.shape()))
                .collect(),
        }
    }
}

/// One bias-corrected Adam update using each parameter's accumulated `grad`.
pub fn adam_step(
    params: &mut [&mut Parameter<f32>],
    state: &mut AdamState,
    cfg: &AdamConfig,
) -> Result<()> {
    if state.m.len() != params.len() || state.v.len() != params.len() {
        return Err(Error::invalid(format!(
            "optimizer state has {} slots for {} parameters",
            state.m.len(),
            params.len()
        )));
    }
    if let Some((p, _)) = params
        .iter()
        .zip(&state.m)
        .find(|(p, m)| p.value.shape() != m.shape())
    {
        return Err(Error::invalid(format!(
            "optimizer moment shape mismatch for {}",
            p.name
        )));
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    for ((p, m), v) in params.iter_mut().zip(&mut state.m).zip(&mut state.v) {
        let Parameter { value, grad, .. } = &mut **p;
        for (((w, &g), m), v) in value
            .data_mut()
            .iter_mut()
            .zip(grad.data())
            .zip(m.data_mut())
            .zip(v.data_mut())
        {
            let g = g as f64;
            let mn = cfg.beta1 * *m as f64 + (1.0 - cfg.beta1) * g;
            let vn = cfg.beta2 * *v as f64 + (1.0 - cfg.beta2) * g * g;
            *m = mn as f32;
            *v = vn as f32;
            let update = cfg.lr * (mn / c1) / ((vn / c2).sqrt() + cfg.eps);
            *w = (*w as f64 - update) as f32;
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub adam: AdamConfig,
    /// Multiply the learning rate by `lr_decay` every `lr_decay_every` epochs.
    #[serde(default = "default_decay")]
    pub lr_decay: f64,
    #[serde(default = "default_decay_every")]
    pub lr_decay_every: usize,
    /// LR crop side; the HR crop is `crop * scale`.
    #[serde(default = "default_crop")]
    pub crop: usize,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    #[serde(default)]
    pub seed: u64,
    /// Save a resumable checkpoint every this many epochs (0: only at the end).
    #[serde(default)]
    pub checkpoint_every: usize,
    /// Inference settings for per-epoch validation.
    #[serde(default = "validation_spec")]
    pub validation: EnsembleSpec,
}

fn default_batch() -> usize {
    16
}

fn default_decay() -> f64 {
    0.5
}

fn default_decay_every() -> usize {
    30
}

fn default_crop() -> usize {
    120
}

fn default_alpha() -> f64 {
    DEFAULT_ALPHA
}

fn validation_spec() -> EnsembleSpec {
    EnsembleSpec {
        self_ensemble: false,
        ..EnsembleSpec::default()
    }
}

impl TrainConfig {
    pub fn new(epochs: usize) -> Self {
        TrainConfig {
            epochs,
            batch_size: default_batch(),
            adam: AdamConfig::default(),
            lr_decay: default_decay(),
            lr_decay_every: default_decay_every(),
            crop: default_crop(),
            alpha: default_alpha(),
            seed: 0,
            checkpoint_every: 0,
            validation: validation_spec(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let a = &self.adam;
        if self.batch_size == 0 || self.crop == 0 || self.lr_decay_every == 0 {
            return Err(Error::invalid(
                "batch size, crop and decay interval must be positive",
            ));
        }
        if a.lr.is_nan()
            || a.lr < 0.0
            || self.lr_decay.is_nan()
            || self.lr_decay <= 0.0
            || a.eps.is_nan()
            || a.eps <= 0.0
        {
            return Err(Error::invalid(
                "learning rate must be nonnegative, decay and eps positive",
            ));
        }
        if !(0.0..1.0).contains(&a.beta1) || !(0.0..1.0).contains(&a.beta2) {
            return Err(Error::invalid("Adam betas must lie in [0, 1)"));
        }
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(Error::invalid(format!(
                "loss alpha {} outside [0, 1]",
                self.alpha
            )));
        }
        Ok(())
    }

    /// Step-decayed learning rate for a 0-based epoch.
    pub fn lr_at(&self, epoch: usize) -> f64 {
        self.adam.lr * self.lr_decay.powi((epoch / self.lr_decay_every) as i32)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub train_loss: f64,
    pub train_l1: f64,
    pub train_ms_ssim: f64,
    pub val_psnr: Option<f64>,
    pub val_ssim: Option<f64>,
    pub wall_secs: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_psnr: Option<f64>,
    pub best_checkpoint: Option<PathBuf>,
    pub last_checkpoint: Option<PathBuf>,
}

impl TrainReport {
    /// The report with wall-clock times zeroed, for reproducibility checks.
    pub fn without_timing(&self) -> Self {
        let mut r = self.clone();
        r.epochs.iter_mut().for_each(|e| e.wall_secs = 0.0);
        r
    }
}

/// Training and validation pairs.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub train: Vec<ImagePair>,
    pub val: Vec<ImagePair>,
}

impl TrainData {
    pub fn from_manifest(manifest: &DatasetManifest) -> Result<Self> {
        Ok(TrainData {
            train: manifest.load_split(Split::Train)?,
            val: manifest.load_split(Split::Val)?,
        })
    }
}

/// Everything needed to continue training exactly where it stopped.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    /// Next epoch to run (0-based).
    pub epoch: usize,
    pub adam: AdamState,
    pub history: Vec<EpochRecord>,
    pub best_epoch: Option<usize>,
    pub best_val_psnr: Option<f64>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct StateMeta {
    epoch: usize,
    step: u64,
    history: Vec<EpochRecord>,
    best_epoch: Option<usize>,
    best_val_psnr: Option<f64>,
}

pub fn encode_state(state: &TrainState, names: &[String]) -> Vec<u8> {
    let meta = StateMeta {
        epoch: state.epoch,
        step: state.adam.step,
        history: state.history.clone(),
        best_epoch: state.best_epoch,
        best_val_psnr: state.best_val_psnr,
    };
    let json = serde_json::to_string(&meta).expect("state serializes");
    let labels: Vec<String> = names
        .iter()
        .flat_map(|n| [format!("m.{n}"), format!("v.{n}")])
        .collect();
    let moments = state
        .adam
        .m
        .iter()
        .zip(&state.adam.v)
        .flat_map(|(m, v)| [m.clone(), v.clone()]);
    let tensors: Vec<(&str, Tensor<f32>)> =
        labels.iter().map(String::as_str).zip(moments).collect();
    write_container(STATE_MAGIC, 0, &json, &tensors)
}

pub fn decode_state(bytes: &[u8], model: &Model<f32>) -> Result<TrainState> {
    let c = read_container(bytes, STATE_MAGIC)?;
    let meta: StateMeta = serde_json::from_str(&c.json)
        .map_err(|e| WeightsError::Corrupt(format!("optimizer state: {e}")))?;
    let params = model.parameters();
    if c.tensors.len() != 2 * params.len() {
        return Err(WeightsError::CountMismatch {
            found: c.tensors.len() as u32,
            expected: 2 * params.len(),
        }
        .into());
    }
    let (mut m, mut v) = (Vec::new(), Vec::new());
    for (p, pair) in params.iter().zip(c.tensors.chunks_exact(2)) {
        for ((name, t), (prefix, dst)) in pair.iter().zip([("m.", &mut m), ("v.", &mut v)]) {
            let expected = format!("{prefix}{}", p.name);
            if *name != expected {
                return Err(WeightsError::NameMismatch {
                    expected,
                    found: name.clone(),
                }
                .into());
            }
            if t.shape() != p.value.shape() {
                return Err(WeightsError::ShapeMismatch {
                    name: name.clone(),
                    expected: p.value.shape().dims(),
                    found: t.shape().dims(),
                }
                .into());
            }
            dst.push(t.clone());
        }
    }
    Ok(TrainState {
        epoch: meta.epoch,
        adam: AdamState {
            step: meta.step,
            m,
            v,
        },
        history: meta.history,
        best_epoch: meta.best_epoch,
        best_val_psnr: meta.best_val_psnr,
    })
}

/// Weights and optimizer-state paths of the checkpoint taken after `epochs`
/// completed epochs.
pub fn checkpoint_paths(dir: &Path, epochs: usize) -> (PathBuf, PathBuf) {
    (
        dir.join(format!("epoch-{epochs:04}.srfw")),
        dir.join(format!("epoch-{epochs:04}.sros")),
    )
}

fn save_checkpoint(dir: &Path, model: &Model<f32>, state: &TrainState) -> Result<PathBuf> {
    let (wp, sp) = checkpoint_paths(dir, state.epoch);
    save_weights(model, &wp)?;
    let names: Vec<String> = model.parameters().iter().map(|p| p.name.clone()).collect();
    fs::write(&sp, encode_state(state, &names)).map_err(|e| Error::io(&sp, e))?;
    Ok(wp)
}

/// Load a checkpoint written by [`train`]; `weights` is the `.srfw` file and
/// the optimizer state is read from the sibling `.sros` file.
pub fn load_checkpoint(weights: &Path) -> Result<(Model<f32>, TrainState)> {
    let model = load_weights(weights)?;
    let sp = weights.with_extension("sros");
    let bytes = fs::read(&sp).map_err(|e| Error::io(&sp, e))?;
    let state = decode_state(&bytes, &model)?;
    Ok((model, state))
}

fn check_data(model: &Model<f32>, data: &TrainData, cfg: &TrainConfig) -> Result<()> {
    if data.train.is_empty() {
        return Err(Error::invalid("training set is empty"));
    }
    for p in data.train.iter().chain(&data.val) {
        if p.scale() != model.scale() {
            return Err(Error::invalid(format!(
                "pair {} is x{}, model is x{}",
                p.id,
                p.scale(),
                model.scale()
            )));
        }
    }
    let smallest = data
        .train
        .iter()
        .map(|p| p.lr.shape().h.min(p.lr.shape().w))
        .min()
        .unwrap_or(0);
    if cfg.crop > smallest {
        return Err(Error::invalid(format!(
            "crop {} exceeds the smallest training LR side {smallest}",
            cfg.crop
        )));
    }
    Ok(())
}

/// Train from scratch (fresh optimizer state).
pub fn train(
    model: &mut Model<f32>,
    data: &TrainData,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    let state = TrainState {
        epoch: 0,
        adam: AdamState::new(&model.parameters()),
        history: Vec::new(),
        best_epoch: None,
        best_val_psnr: None,
    };
    train_from(model, state, data, cfg, checkpoint_dir)
}

/// Continue training from `state` up to `cfg.epochs`.
pub fn train_from(
    model: &mut Model<f32>,
    mut state: TrainState,
    data: &TrainData,
    cfg: &TrainConfig,
    checkpoint_dir: Option<&Path>,
) -> Result<TrainReport> {
    cfg.validate()?;
    check_data(model, data, cfg)?;
    if let Some(dir) = checkpoint_dir {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut best_checkpoint = checkpoint_dir
        .map(|d| d.join(BEST_CHECKPOINT))
        .filter(|p| p.exists());
    let mut last_checkpoint = None;
    let adam_at = |epoch| AdamConfig {
        lr: cfg.lr_at(epoch),
        ..cfg.adam
    };
    while state.epoch < cfg.epochs {
        let epoch = state.epoch;
        let started = Instant::now();
        let mut rng = ChaCha8Rng::seed_from_u64(seed::derive_index(
            seed::derive(cfg.seed, "train-epoch"),
            epoch as u64,
        ));
        let mut order: Vec<usize> = (0..data.train.len()).collect();
        order.shuffle(&mut rng);
        let crops: Vec<(Tensor<f32>, Tensor<f32>)> = order
            .iter()
            .map(|&i| random_crop_aug(&data.train[i], cfg.crop, &mut rng))
            .collect::<Result<_>>()?;
        let (mut loss, mut l1, mut ms) = (0.0, 0.0, 0.0);
        for (step, (batch, ids)) in crops
            .chunks(cfg.batch_size)
            .zip(order.chunks(cfg.batch_size))
            .enumerate()
        {
            let lr = Tensor::stack(&batch.iter().map(|(l, _)| l.clone()).collect::<Vec<_>>())?;
            let hr = Tensor::stack(&batch.iter().map(|(_, h)| h.clone()).collect::<Vec<_>>())?;
            let (pred, cache) = model.forward_train(&lr)?;
            let (parts, grad) = mixed_loss(&pred, &hr, cfg.alpha)?;
            if !parts.total.is_finite() || !grad.all_finite() {
                let names: Vec<&str> = ids.iter().map(|&i| data.train[i].id.as_str()).collect();
                return Err(Error::NonFiniteLoss {
                    epoch,
                    step,
                    detail: format!(
                        "batch {names:?}, total {}, l1 {}, ms-ssim {}",
                        parts.total, parts.l1, parts.ms_ssim
                    ),
                });
            }
            model.zero_grads();
            model.backward(&cache, &grad)?;
            adam_step(
                &mut model.parameters_mut(),
                &mut state.adam,
                &adam_at(epoch),
            )?;
            let w = batch.len() as f64;
            loss += parts.total * w;
            l1 += parts.l1 * w;
            ms += parts.ms_ssim * w;
        }
        let n = crops.len() as f64;
        let (val_psnr, val_ssim) = if data.val.is_empty() {
            (None, None)
        } else {
            let r = evaluate(&[&*model], &data.val, &cfg.validation);
            (Some(r.mean_psnr), Some(r.mean_ssim))
        };
        state.history.push(EpochRecord {
            epoch,
            lr: cfg.lr_at(epoch),
            train_loss: loss / n,
            train_l1: l1 / n,
            train_ms_ssim: ms / n,
            val_psnr,
            val_ssim,
            wall_secs: started.elapsed().as_secs_f64(),
        });
        state.epoch += 1;
        if let Some(p) = val_psnr {
            if state.best_val_psnr.is_none_or(|b| p > b) {
                state.best_val_psnr = Some(p);
                state.best_epoch = Some(epoch);
                if let Some(dir) = checkpoint_dir {
                    let path = dir.join(BEST_CHECKPOINT);
                    save_weights(model, &path)?;
                    best_checkpoint = Some(path);
                }
            }
        }
        if let Some(dir) = checkpoint_dir {
            let periodic =
                cfg.checkpoint_every > 0 && state.epoch.is_multiple_of(cfg.checkpoint_every);
            if periodic || state.epoch == cfg.epochs {
                last_checkpoint = Some(save_checkpoint(dir, model, &state)?);
            }
        }
    }
    Ok(TrainReport {
        epochs: state.history,
        best_epoch: state.best_epoch,
        best_val_psnr: state.best_val_psnr,
        best_checkpoint,
        last_checkpoint,
    })
}

/// Per-pair PSNR/SSIM of the (ensembled, clamped) reconstructions.
pub fn evaluate<U: Upscaler>(
    models: &[U],
    pairs: &[ImagePair],
    spec: &EnsembleSpec,
) -> MetricReport {
    let mut images = Vec::new();
    let mut failures = Vec::new();
    for p in pairs {
        let scored = model_ensemble(models, spec, &p.lr)
            .and_then(|sr| Ok((psnr(&sr, &p.hr)?, ssim(&sr, &p.hr)?)));
        match scored {
            Ok((psnr, ssim)) => images.push(ImageMetrics {
                id: p.id.clone(),
                psnr,
                ssim,
            }),
            Err(e) => failures.push((p.id.clone(), e.to_string())),
        }
    }
    MetricReport::from_images(images, failures)
}

/// Evaluate one manifest split; pairs that fail to load are reported as
/// failures instead of aborting.
pub fn evaluate_split<U: Upscaler>(
    models: &[U],
    manifest: &DatasetManifest,
    split: Split,
    spec: &EnsembleSpec,
) -> MetricReport {
    let mut pairs = Vec::new();
    let mut failures = Vec::new();
    for rec in manifest.split(split) {
        match manifest.load_pair(rec) {
            Ok(p) => pairs.push(p),
            Err(e) => failures.push((rec.id.clone(), e.to_string())),
        }
    }
    let mut report = evaluate(models, &pairs, spec);
    failures.extend(report.failures);
    report.failures = failures;
    report
}

/// Bicubic-upscaling reference on the same pairs.
pub fn bicubic_baseline(pairs: &[ImagePair], scale: usize) -> MetricReport {
    evaluate(&[Bicubic(scale)], pairs, &EnsembleSpec::plain())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar_param(v: f32, g: f32) -> Parameter<f32> {
        let mut p = Parameter::new("w", Tensor::full([1, 1, 1, 1], v));
        p.grad.fill(g);
        p
    }

    #[test]
    fn zero_gradient_leaves_parameters() {
        let mut p = scalar_param(0.7, 0.0);
        let mut s = AdamState::new(&[&p]);
        for _ in 0..5 {
            adam_step(&mut [&mut p], &mut s, &AdamConfig::default()).unwrap();
        }
        assert_eq!(p.value.data()[0], 0.7);
    }

    #[test]
    fn two_steps_match_hand_algebra() {
        let cfg = AdamConfig {
            lr: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        };
        let mut p = scalar_param(1.0, 0.5);
        let mut s = AdamState::new(&[&p]);
        adam_step(&mut [&mut p], &mut s, &cfg).unwrap();
        // m1 = 0.05, v1 = 0.00025, mhat = 0.5, vhat = 0.25: step = 0.1 * 0.5 / (0.5 + 1e-8)
        let w1 = 1.0 - 0.1 * 0.5 / (0.5 + 1e-8);
        assert!((p.value.data()[0] as f64 - w1).abs() < 1e-7);
        p.grad.fill(-1.0);
        adam_step(&mut [&mut p], &mut s, &cfg).unwrap();
        let m2 = 0.9 * 0.05 + -0.1;
        let v2 = 0.999 * 0.00025 + 0.001 * 1.0;
        let mhat = m2 / (1.0 - 0.81);
        let vhat = v2 / (1.0 - 0.999f64 * 0.999);
        let w2 = w1 - 0.1 * mhat / (vhat.sqrt() + 1e-8);
        assert!((p.value.data()[0] as f64 - w2).abs() < 1e-6);
        assert!((s.m[0].data()[0] as f64 - m2).abs() < 1e-7);
    }

    #[test]
    fn constant_gradient_step_tends_to_lr() {
        let cfg = AdamConfig {
            lr: 1e-3,
            ..AdamConfig::default()
        };
        let mut p = scalar_param(0.0, -2.0);
        let mut s = AdamState::new(&[&p]);
        let mut prev = 0.0f32;
        for _ in 0..2000 {
            adam_step(&mut [&mut p], &mut s, &cfg).unwrap();
            let step = p.value.data()[0] - prev;
            prev = p.value.data()[0];
            assert!((step as f64 - 1e-3).abs() < 1e-5);
        }
    }

    #[test]
    fn schedule_halves() {
        let mut c = TrainConfig::new(100);
        c.adam.lr = 1e-3;
        assert_eq!(c.lr_at(29), 1e-3);
        assert_eq!(c.lr_at(30), 5e-4);
        assert_eq!(c.lr_at(65), 2.5e-4);
        c.batch_size = 0;
        assert!(c.validate().is_err());
    }
}
