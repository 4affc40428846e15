//! Adam + triangular cyclic LR training on paired images with an L1 loss.

use std::io::Write;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{forward_record, GradientSet, Graph};
use crate::degrade::{item_rng, make_pairs, DegradeParams, ImagePair};
use crate::error::{Error, Result};
use crate::fanet::{NetworkConfig, NetworkWeights};
use crate::metrics::{psnr, ssim};
use crate::scalar::Scalar;
use crate::tensor::{Shape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub lr_max: f64,
    pub base_lr: f64,
    /// Full triangle length in steps.
    pub lr_period: usize,
    pub betas: (f64, f64),
    pub eps: f64,
    pub crop: usize,
    pub hflip: bool,
    pub rotate: bool,
    pub seed: u64,
    pub network: NetworkConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            batch_size: 8,
            lr_max: 4e-4,
            base_lr: 4e-5,
            lr_period: 200,
            betas: (0.5, 0.999),
            eps: 1e-8,
            crop: 64,
            hflip: true,
            rotate: true,
            seed: 42,
            network: NetworkConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Full-scale recipe: batch 72 on 256x256 crops.
    pub fn full_scale() -> Self {
        Self {
            batch_size: 72,
            crop: 256,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        // A zero learning rate is allowed as a frozen run.
        let frozen = self.lr_max == 0.0 && self.base_lr == 0.0;
        if !frozen && !(self.base_lr > 0.0 && self.base_lr <= self.lr_max) {
            return Err(Error::Config(format!(
                "need 0 < base_lr ({}) <= lr_max ({})",
                self.base_lr, self.lr_max
            )));
        }
        let (b1, b2) = self.betas;
        if !((0.0..1.0).contains(&b1) && (0.0..1.0).contains(&b2)) {
            return Err(Error::Config(format!("betas {:?} must lie in [0, 1)", self.betas)));
        }
        if self.batch_size == 0 || self.crop == 0 || self.lr_period == 0 {
            return Err(Error::Config("batch size, crop and lr period must be positive".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config("eps must be positive".into()));
        }
        self.network.validate()
    }

    pub fn lr(&self, step: usize) -> f64 {
        cyclic_lr(step, self.base_lr, self.lr_max, self.lr_period)
    }
}

/// Triangular schedule: `base` at multiples of `period`, `max` half-way between.
pub fn cyclic_lr(step: usize, base: f64, max: f64, period: usize) -> f64 {
    let pos = (step % period) as f64 / period as f64;
    base + (max - base) * (1.0 - (2.0 * pos - 1.0).abs())
}

/// Adam moments for one parameter list.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam<T = f32> {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Tensor<T>>,
    pub v: Vec<Tensor<T>>,
    pub t: u64,
}

impl<T: Scalar> Adam<T> {
    pub fn new(shapes: impl IntoIterator<Item = Shape>, betas: (f64, f64), eps: f64) -> Self {
        let (m, v) = shapes.into_iter().map(|s| (Tensor::zeros(s), Tensor::zeros(s))).unzip();
        Self {
            beta1: betas.0,
            beta2: betas.1,
            eps,
            m,
            v,
            t: 0,
        }
    }

    /// One bias-corrected update; gradient `i` applies to `params[i]`.
    pub fn step(&mut self, params: Vec<&mut Tensor<T>>, grads: &GradientSet<T>, lr: f64) -> Result<()> {
        if params.len() != self.m.len() {
            return Err(Error::Param(format!(
                "optimizer holds {} slots, got {} params",
                self.m.len(),
                params.len()
            )));
        }
        for (i, p) in params.iter().enumerate() {
            let g = grads
                .get(i)
                .ok_or_else(|| Error::Param(format!("missing gradient {i}")))?;
            if g.shape() != p.shape() {
                return Err(Error::Shape {
                    op: "adam_step",
                    lhs: p.shape(),
                    rhs: g.shape(),
                });
            }
        }
        self.t += 1;
        let (b1, b2) = (T::of(self.beta1), T::of(self.beta2));
        let c1 = T::of(1.0 - self.beta1.powi(self.t as i32));
        let c2 = T::of(1.0 - self.beta2.powi(self.t as i32));
        let (lr, eps) = (T::of(lr), T::of(self.eps));
        for (i, p) in params.into_iter().enumerate() {
            let g = grads.get(i).expect("checked above").data();
            let m = self.m[i].data_mut();
            let v = self.v[i].data_mut();
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = b1 * m[j] + (T::one() - b1) * g[j];
                v[j] = b2 * v[j] + (T::one() - b2) * g[j] * g[j];
                let m_hat = m[j] / c1;
                let v_hat = v[j] / c2;
                *w -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

/// Updates every network parameter in place.
pub fn adam_step<T: Scalar>(
    weights: &mut NetworkWeights<T>,
    grads: &GradientSet<T>,
    state: &mut Adam<T>,
    lr: f64,
) -> Result<()> {
    state.step(weights.params_mut(), grads, lr)
}

pub fn hflip<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let w = x.shape().w;
    Tensor::from_fn(x.shape(), |n, c, y, xx| x.at(n, c, y, w - 1 - xx))
}

/// Quarter turn counter-clockwise: `out[y][x] = in[x][w - 1 - y]`.
pub fn rot90<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, s.w, s.h), |n, c, y, xx| {
        x.at(n, c, xx, s.w - 1 - y)
    })
}

/// Random flip and quarter-turn count, shared by both images of a pair.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augmentation {
    pub flip: bool,
    pub quarter_turns: u8,
}

impl Augmentation {
    pub fn sample(rng: &mut impl Rng, flip: bool, rotate: bool) -> Self {
        Self {
            flip: flip && rng.random_bool(0.5),
            quarter_turns: if rotate { rng.random_range(0..4) } else { 0 },
        }
    }

    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        let mut out = if self.flip { hflip(x) } else { x.clone() };
        for _ in 0..self.quarter_turns {
            out = rot90(&out);
        }
        out
    }
}

pub fn augment<T: Scalar>(
    clean: &Tensor<T>,
    degraded: &Tensor<T>,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    crate::tensor::same_shape("augment", clean, degraded)?;
    let a = Augmentation::sample(rng, true, true);
    Ok((a.apply(clean), a.apply(degraded)))
}

fn crop<T: Scalar>(x: &Tensor<T>, y0: usize, x0: usize, size: usize) -> Tensor<T> {
    let s = x.shape();
    Tensor::from_fn(Shape::new(s.n, s.c, size, size), |n, c, y, xx| {
        x.at(n, c, y0 + y, x0 + xx)
    })
}

/// Co-located square crops of both images.
pub fn random_crop_pair<T: Scalar>(
    clean: &Tensor<T>,
    degraded: &Tensor<T>,
    size: usize,
    rng: &mut impl Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    crate::tensor::same_shape("random_crop_pair", clean, degraded)?;
    let s = clean.shape();
    if size > s.h || size > s.w {
        return Err(Error::Config(format!("crop {size} larger than {}x{} source", s.h, s.w)));
    }
    let y0 = rng.random_range(0..=s.h - size);
    let x0 = rng.random_range(0..=s.w - size);
    Ok((crop(clean, y0, x0, size), crop(degraded, y0, x0, size)))
}

fn stack<T: Scalar>(items: &[Tensor<T>]) -> Result<Tensor<T>> {
    let s = items[0].shape();
    let data = items.iter().flat_map(|t| t.data().iter().copied()).collect();
    Tensor::new(Shape::new(items.iter().map(|t| t.shape().n).sum(), s.c, s.h, s.w), data)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct StepLog {
    pub step: usize,
    pub lr: f64,
    pub loss: f64,
}

#[derive(Clone, Debug)]
pub struct TrainResult<T = f32> {
    pub weights: NetworkWeights<T>,
    pub log: Vec<StepLog>,
}

impl<T> TrainResult<T> {
    pub fn losses(&self) -> Vec<f64> {
        self.log.iter().map(|l| l.loss).collect()
    }
}

/// Trains freshly initialized weights on `dataset`.
pub fn train<T: Scalar>(config: &TrainConfig, dataset: &[ImagePair<T>]) -> Result<TrainResult<T>> {
    let weights = NetworkWeights::seeded(config.network.clone(), config.seed)?;
    train_from(config, dataset, weights, None)
}

/// Continues from `weights`, optionally writing one JSON object per step to `log`.
pub fn train_from<T: Scalar>(
    config: &TrainConfig,
    dataset: &[ImagePair<T>],
    mut weights: NetworkWeights<T>,
    mut log: Option<&mut dyn Write>,
) -> Result<TrainResult<T>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut adam = Adam::new(
        weights.param_tensors().iter().map(Tensor::shape),
        config.betas,
        config.eps,
    );
    // Sampling has its own stream so it never perturbs initialization.
    let mut sampler = item_rng(config.seed, 1 << 32);
    let mut history = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let mut clean = Vec::with_capacity(config.batch_size);
        let mut degraded = Vec::with_capacity(config.batch_size);
        for _ in 0..config.batch_size {
            let pair = &dataset[sampler.random_range(0..dataset.len())];
            let (c, d) = random_crop_pair(&pair.clean, &pair.degraded, config.crop, &mut sampler)?;
            let aug = Augmentation::sample(&mut sampler, config.hflip, config.rotate);
            clean.push(aug.apply(&c));
            degraded.push(aug.apply(&d));
        }
        let (clean, degraded) = (stack(&clean)?, stack(&degraded)?);

        let (_, out, mut tape) = forward_record(&weights, &weights.param_tensors(), degraded)?;
        let target = tape.constant(clean);
        let loss = tape.l1_loss(&out, &target)?;
        let value = tape.value(&loss).data()[0].f64();
        if !value.is_finite() {
            return Err(Error::NonFinite { step, value });
        }
        let grads = tape.backward_scalar(loss)?;
        let lr = config.lr(step);
        adam_step(&mut weights, &grads, &mut adam, lr)?;

        let entry = StepLog { step, lr, loss: value };
        if let Some(w) = log.as_deref_mut() {
            serde_json::to_writer(&mut *w, &entry).map_err(std::io::Error::from)?;
            w.write_all(b"\n")?;
        }
        history.push(entry);
    }
    Ok(TrainResult { weights, log: history })
}

/// Held-out fidelity before and after enhancement.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub psnr_degraded: f64,
    pub psnr_enhanced: f64,
    pub ssim_degraded: f64,
    pub ssim_enhanced: f64,
}

impl Evaluation {
    pub fn psnr_gain(&self) -> f64 {
        self.psnr_enhanced - self.psnr_degraded
    }

    pub fn ssim_gain(&self) -> f64 {
        self.ssim_enhanced - self.ssim_degraded
    }
}

/// Mean per-image PSNR/SSIM of degraded and enhanced images against clean.
pub fn evaluate<T: Scalar>(weights: &NetworkWeights<T>, pairs: &[ImagePair<T>]) -> Result<Evaluation> {
    if pairs.is_empty() {
        return Err(Error::Config("evaluation set is empty".into()));
    }
    let mut e = Evaluation {
        psnr_degraded: 0.0,
        psnr_enhanced: 0.0,
        ssim_degraded: 0.0,
        ssim_enhanced: 0.0,
    };
    for p in pairs {
        let enhanced = weights.forward(&p.degraded)?;
        e.psnr_degraded += psnr(&p.clean, &p.degraded)?;
        e.psnr_enhanced += psnr(&p.clean, &enhanced)?;
        e.ssim_degraded += ssim(&p.clean, &p.degraded)?;
        e.ssim_enhanced += ssim(&p.clean, &enhanced)?;
    }
    let n = pairs.len() as f64;
    e.psnr_degraded /= n;
    e.psnr_enhanced /= n;
    e.ssim_degraded /= n;
    e.ssim_enhanced /= n;
    Ok(e)
}

/// Synthetic train/held-out split used by the desk-scale run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeskConfig {
    pub pairs: usize,
    pub size: usize,
    pub holdout: usize,
    pub degrade: DegradeParams,
    pub train: TrainConfig,
}

impl Default for DeskConfig {
    fn default() -> Self {
        Self {
            pairs: 64,
            size: 64,
            holdout: 16,
            degrade: DegradeParams::default(),
            train: TrainConfig::default(),
        }
    }
}

/// Offset between the training and held-out data seeds.
const HOLDOUT_SEED_OFFSET: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug)]
pub struct DeskReport<T = f32> {
    pub result: TrainResult<T>,
    pub evaluation: Evaluation,
}

pub fn desk_datasets<T: Scalar>(cfg: &DeskConfig) -> Result<(Vec<ImagePair<T>>, Vec<ImagePair<T>>)> {
    let seed = cfg.train.seed;
    Ok((
        make_pairs(cfg.pairs, cfg.size, &cfg.degrade, seed)?,
        make_pairs(
            cfg.holdout,
            cfg.size,
            &cfg.degrade,
            seed.wrapping_add(HOLDOUT_SEED_OFFSET),
        )?,
    ))
}

/// Generates data, trains, and scores the held-out pairs.
pub fn desk_run<T: Scalar>(cfg: &DeskConfig, log: Option<&mut dyn Write>) -> Result<DeskReport<T>> {
    let (train_set, holdout) = desk_datasets::<T>(cfg)?;
    let weights = NetworkWeights::seeded(cfg.train.network.clone(), cfg.train.seed)?;
    let result = train_from(&cfg.train, &train_set, weights, log)?;
    let evaluation = evaluate(&result.weights, &holdout)?;
    Ok(DeskReport { result, evaluation })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub alpha: f64,
    pub final_loss: f64,
    pub evaluation: Evaluation,
}

/// Runs the desk task once per alpha value, everything else fixed.
pub fn alpha_sweep(cfg: &DeskConfig, alphas: &[f64]) -> Result<Vec<SweepRow>> {
    let (train_set, holdout) = desk_datasets::<f32>(cfg)?;
    alphas
        .iter()
        .map(|&alpha| {
            let mut c = cfg.train.clone();
            c.network.alpha = alpha;
            let result = train(&c, &train_set)?;
            Ok(SweepRow {
                alpha,
                final_loss: result.log.last().map_or(f64::NAN, |l| l.loss),
                evaluation: evaluate(&result.weights, &holdout)?,
            })
        })
        .collect()
}

/// The ten alpha values 0.0, 0.1, ..., 0.9.
pub fn default_alphas() -> Vec<f64> {
    (0..10).map(|i| i as f64 / 10.0).collect()
}
