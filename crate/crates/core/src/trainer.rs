//! SGD training for the initial model and each incremental step.

use std::fmt;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use crate::data::Sample;
use crate::distill::{self, ClassMask, DistillConfig, Taps, IGNORE_INDEX};
use crate::error::{Error, Result};
use crate::metrics::ConfusionMatrix;
use crate::segnet::{FreezePolicy, ModelSnapshot, SegModel, DOWNSAMPLE};
use crate::tensor::kernels::bilinear_forward;
use crate::tensor::{Tape, Tensor};

/// Stream offset separating epoch shuffles from per-batch augmentation.
const SHUFFLE_STREAM: u64 = 1 << 63;

#[derive(Clone, Debug, PartialEq)]
pub struct AugmentSpec {
    pub flip_prob: f64,
    pub scale_min: f64,
    pub scale_max: f64,
}

impl Default for AugmentSpec {
    fn default() -> Self {
        AugmentSpec { flip_prob: 0.5, scale_min: 0.5, scale_max: 1.5 }
    }
}

impl AugmentSpec {
    /// Crop only.
    pub fn none() -> Self {
        AugmentSpec { flip_prob: 0.0, scale_min: 1.0, scale_max: 1.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Param(format!("flip probability {} not in [0, 1]", self.flip_prob)));
        }
        if !(self.scale_min > 0.0 && self.scale_min <= self.scale_max && self.scale_max.is_finite()) {
            return Err(Error::Param(format!(
                "scale range [{}, {}] is empty or non-positive",
                self.scale_min, self.scale_max
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub lr_start: f64,
    pub lr_end: f64,
    pub power: f64,
    pub steps_per_class: usize,
    pub weight_decay: f64,
    /// Heavy-ball momentum; 0 gives plain SGD.
    pub momentum: f64,
    pub batch_size: usize,
    pub crop: usize,
    pub seed: u64,
    pub distill: DistillConfig,
    pub freeze: FreezePolicy,
    pub augment: AugmentSpec,
    /// Emit a log line every this many steps (and after the last one).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr_start: 0.1,
            lr_end: 1e-6,
            power: 0.9,
            steps_per_class: 200,
            weight_decay: 1e-4,
            momentum: 0.0,
            batch_size: 4,
            crop: 64,
            seed: 7,
            distill: DistillConfig::fine_tuning(),
            freeze: FreezePolicy::None,
            augment: AugmentSpec::default(),
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr_end > 0.0 && self.lr_start >= self.lr_end && self.lr_start.is_finite()) {
            return Err(Error::Param(format!(
                "need lr_start >= lr_end > 0, got {} and {}",
                self.lr_start, self.lr_end
            )));
        }
        if !(self.power > 0.0 && self.power.is_finite()) {
            return Err(Error::Param(format!("power must be positive, got {}", self.power)));
        }
        if !(self.weight_decay >= 0.0 && self.weight_decay.is_finite()) {
            return Err(Error::Param(format!("weight decay must be >= 0, got {}", self.weight_decay)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Param(format!("momentum must be in [0, 1), got {}", self.momentum)));
        }
        if self.batch_size == 0 {
            return Err(Error::Param("batch size must be at least 1".into()));
        }
        if self.crop == 0 || !self.crop.is_multiple_of(DOWNSAMPLE) {
            return Err(Error::Param(format!(
                "crop must be a positive multiple of {DOWNSAMPLE}, got {}",
                self.crop
            )));
        }
        if self.log_every == 0 {
            return Err(Error::Param("log interval must be at least 1".into()));
        }
        self.augment.validate()?;
        self.distill.validate()
    }
}

/// `lr_end + (lr_start − lr_end)·(1 − step/total)^power`.
pub fn poly_lr(step: usize, total: usize, lr_start: f64, lr_end: f64, power: f64) -> Result<f64> {
    if total == 0 {
        return Err(Error::Param("poly_lr needs a positive step total".into()));
    }
    if step > total {
        return Err(Error::Param(format!("step {step} beyond total {total}")));
    }
    let frac = 1.0 - step as f64 / total as f64;
    Ok(lr_end + (lr_start - lr_end) * frac.powf(power))
}

pub fn hflip_image(image: &Tensor<f32>) -> Tensor<f32> {
    let [h, w, c] = image.shape()[..] else { panic!("expected H×W×C") };
    let src = image.data();
    Tensor::from_fn(&[h, w, c], |i| {
        let (y, x, ch) = (i / (w * c), (i / c) % w, i % c);
        src[(y * w + (w - 1 - x)) * c + ch]
    })
}

pub fn hflip_labels(labels: &[u8], width: usize) -> Vec<u8> {
    labels.chunks(width).flat_map(|row| row.iter().rev().copied()).collect()
}

/// Bilinear resize, half-pixel centres.
pub fn resize_image(image: &Tensor<f32>, oh: usize, ow: usize) -> Tensor<f32> {
    let [h, w, c] = image.shape()[..] else { panic!("expected H×W×C") };
    let data = bilinear_forward(image.data(), (1, h, w, c), (oh, ow));
    Tensor::new(vec![oh, ow, c], data).expect("resize shape")
}

/// Nearest-neighbour resize, half-pixel centres.
pub fn resize_labels(labels: &[u8], h: usize, w: usize, oh: usize, ow: usize) -> Vec<u8> {
    let src = |i: usize, n: usize, on: usize| (((i as f64 + 0.5) * n as f64 / on as f64) as usize).min(n - 1);
    let xs: Vec<usize> = (0..ow).map(|x| src(x, w, ow)).collect();
    let mut out = Vec::with_capacity(oh * ow);
    for y in 0..oh {
        let row = &labels[src(y, h, oh) * w..][..w];
        out.extend(xs.iter().map(|&x| row[x]));
    }
    out
}

/// `crop × crop` window at `(y0, x0)`; image zero-padded and labels
/// ignore-padded where the window leaves the source.
pub fn crop_window(
    image: &Tensor<f32>,
    labels: &[u8],
    y0: usize,
    x0: usize,
    crop: usize,
) -> (Tensor<f32>, Vec<u8>) {
    let [h, w, c] = image.shape()[..] else { panic!("expected H×W×C") };
    let mut img = vec![0f32; crop * crop * c];
    let mut lab = vec![IGNORE_INDEX; crop * crop];
    for y in 0..crop.min(h.saturating_sub(y0)) {
        let sy = y0 + y;
        let n = crop.min(w.saturating_sub(x0));
        img[y * crop * c..][..n * c].copy_from_slice(&image.data()[(sy * w + x0) * c..][..n * c]);
        lab[y * crop..][..n].copy_from_slice(&labels[sy * w + x0..][..n]);
    }
    (Tensor::new(vec![crop, crop, c], img).expect("crop shape"), lab)
}

/// Random flip, scale and crop. Draws from `rng` in a fixed order, so the
/// result depends only on the rng state.
pub fn augment<R: Rng>(
    image: &Tensor<f32>,
    labels: &[u8],
    spec: &AugmentSpec,
    crop: usize,
    rng: &mut R,
) -> Result<(Tensor<f32>, Vec<u8>)> {
    let [h, w, _] = image.shape()[..] else {
        return Err(Error::shape("augment", format!("expected H×W×C, got {:?}", image.shape())));
    };
    if labels.len() != h * w {
        return Err(Error::shape("augment", format!("{} labels for a {h}×{w} image", labels.len())));
    }
    let flip = rng.gen_bool(spec.flip_prob);
    let scale = if spec.scale_min < spec.scale_max {
        rng.gen_range(spec.scale_min..=spec.scale_max)
    } else {
        spec.scale_min
    };
    let (mut img, mut lab) =
        if flip { (hflip_image(image), hflip_labels(labels, w)) } else { (image.clone(), labels.to_vec()) };
    let oh = ((h as f64 * scale).round() as usize).max(1);
    let ow = ((w as f64 * scale).round() as usize).max(1);
    if (oh, ow) != (h, w) {
        img = resize_image(&img, oh, ow);
        lab = resize_labels(&lab, h, w, oh, ow);
    }
    let y0 = rng.gen_range(0..=oh.saturating_sub(crop));
    let x0 = rng.gen_range(0..=ow.saturating_sub(crop));
    Ok(crop_window(&img, &lab, y0, x0, crop))
}

/// Sample order: sequential passes over a per-epoch seeded permutation.
#[derive(Clone, Debug)]
pub struct BatchPlan {
    len: usize,
    batch: usize,
    seed: u64,
    epoch: Option<(usize, Vec<usize>)>,
}

impl BatchPlan {
    pub fn new(len: usize, batch: usize, seed: u64) -> Self {
        BatchPlan { len, batch, seed, epoch: None }
    }

    fn permutation(&mut self, epoch: usize) -> &[usize] {
        if self.epoch.as_ref().map(|(e, _)| *e) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.len).collect();
            let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
            rng.set_stream(SHUFFLE_STREAM | epoch as u64);
            order.shuffle(&mut rng);
            self.epoch = Some((epoch, order));
        }
        &self.epoch.as_ref().unwrap().1
    }

    /// Sample indices of batch `step`.
    pub fn batch(&mut self, step: usize) -> Vec<usize> {
        let len = self.len;
        (0..self.batch)
            .map(|j| {
                let pos = step * self.batch + j;
                self.permutation(pos / len)[pos % len]
            })
            .collect()
    }
}

/// Builds the augmented batch for optimizer step `step`.
pub fn make_batch(samples: &[&Sample], step: usize, cfg: &TrainConfig) -> Result<(Tensor<f32>, Vec<u8>)> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(step as u64);
    let mut images = Vec::with_capacity(samples.len());
    let mut labels = Vec::with_capacity(samples.len() * cfg.crop * cfg.crop);
    for s in samples {
        let (img, lab) = augment(&s.image, &s.labels, &cfg.augment, cfg.crop, &mut rng)
            .map_err(|e| e.context(format!("sample {}", s.id)))?;
        images.push(img);
        labels.extend(lab);
    }
    Ok((Tensor::stack(&images)?, labels))
}

/// Plain SGD with decoupled weight decay and optional momentum.
#[derive(Clone, Debug, Default)]
pub struct Sgd {
    velocity: Vec<Option<Vec<f32>>>,
}

impl Sgd {
    /// `p ← p·(1 − lr·wd) − lr·v` with `v ← μ·v + g`. Parameters without a
    /// gradient (frozen) are left untouched.
    pub fn step(
        &mut self,
        model: &mut SegModel,
        grads: &[Option<&Tensor<f32>>],
        lr: f64,
        weight_decay: f64,
        momentum: f64,
    ) {
        self.velocity.resize(model.params().len(), None);
        let decay = (1.0 - lr * weight_decay) as f32;
        let lr = lr as f32;
        let mu = momentum as f32;
        for ((p, g), vel) in model.params_mut().iter_mut().zip(grads).zip(&mut self.velocity) {
            let Some(g) = g.filter(|_| p.trainable) else { continue };
            let data = p.value.data_mut();
            if mu == 0.0 {
                for (w, &d) in data.iter_mut().zip(g.data()) {
                    *w = *w * decay - lr * d;
                }
            } else {
                let v = vel.get_or_insert_with(|| vec![0.0; data.len()]);
                for ((w, &d), v) in data.iter_mut().zip(g.data()).zip(v.iter_mut()) {
                    *v = mu * *v + d;
                    *w = *w * decay - lr * *v;
                }
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogLine {
    pub step: usize,
    pub lr: f64,
    pub ce: f64,
    pub distill: f64,
    pub total: f64,
}

impl fmt::Display for LogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "step {} lr {:.6e} ce {:.6} distill {:.6} total {:.6}",
            self.step, self.lr, self.ce, self.distill, self.total
        )
    }
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct TrainReport {
    /// Optimizer steps executed.
    pub steps: usize,
    pub log: Vec<LogLine>,
}

struct Teacher<'a> {
    model: &'a ModelSnapshot,
    mask: ClassMask,
}

fn run(
    model: &mut SegModel,
    data: &[Sample],
    total: usize,
    cfg: &TrainConfig,
    teacher: Option<Teacher<'_>>,
) -> Result<TrainReport> {
    let mut report = TrainReport::default();
    let mut plan = BatchPlan::new(data.len(), cfg.batch_size, cfg.seed);
    let mut sgd = Sgd::default();
    let distilling = teacher.is_some() && !cfg.distill.is_fine_tuning();
    let c = model.num_classes();
    for step in 0..total {
        let lr = poly_lr(step, total, cfg.lr_start, cfg.lr_end, cfg.power)?;
        let picked: Vec<&Sample> = plan.batch(step).into_iter().map(|i| &data[i]).collect();
        let (images, labels) = make_batch(&picked, step, cfg)?;

        let mut tape = Tape::new();
        let input = tape.constant(images.clone());
        let out = model.forward(&mut tape, input)?;
        let ce = distill::loss_ce(&mut tape, out.logits, &labels, c, IGNORE_INDEX)?;
        let mut dist = None;
        if let (true, Some(t)) = (distilling, &teacher) {
            let values = t.model.forward(&images)?;
            let [d1, d2, d3, d4] = values.dilations;
            let taps = Taps {
                features: tape.constant(values.features),
                dilations: [d1, d2, d3, d4].map(|d| tape.constant(d)),
                logits: tape.constant(distill::widen_logits(&values.logits, c)?),
            };
            let student = Taps { features: out.features, dilations: out.dilations, logits: out.logits };
            dist = distill::distill_loss(&mut tape, &cfg.distill, &student, &taps, &t.mask)?;
        }
        let loss = distill::total_loss(&mut tape, ce, dist, cfg.distill.lambda_d)?;
        tape.backward(loss)?;

        let grads: Vec<Option<&Tensor<f32>>> = out.params.iter().map(|&v| tape.grad(v)).collect();
        sgd.step(model, &grads, lr, cfg.weight_decay, cfg.momentum);
        report.steps += 1;

        if report.steps % cfg.log_every == 0 || report.steps == total {
            let line = LogLine {
                step: report.steps,
                lr,
                ce: tape.value(ce).item() as f64,
                distill: dist.map_or(0.0, |d| tape.value(d).item() as f64),
                total: tape.value(loss).item() as f64,
            };
            log::info!("{line}");
            report.log.push(line);
        }
    }
    Ok(report)
}

/// Trains `model` on `D_0` for `|S_0|·steps_per_class` steps. Labels must
/// already be output channels.
pub fn train_initial(model: &mut SegModel, data: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("initial training set is empty".into()));
    }
    let total = model.num_classes() * cfg.steps_per_class;
    run(model, data, total, cfg, None)
}

/// One incremental step: `student` has `added` more channels than
/// `teacher`. Applies `cfg.freeze` to the student and trains for
/// `added·steps_per_class` steps.
pub fn train_incremental(
    teacher: &ModelSnapshot,
    student: &mut SegModel,
    data: &[Sample],
    added: usize,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if added == 0 || student.num_classes() != teacher.num_classes() + added {
        return Err(Error::Scenario(format!(
            "student has {} channels, teacher {} plus {added} new",
            student.num_classes(),
            teacher.num_classes()
        )));
    }
    if data.is_empty() {
        return Err(Error::Data("incremental training set is empty".into()));
    }
    student.apply_freeze(cfg.freeze);
    let mask = ClassMask::leading(teacher.num_classes(), student.num_classes());
    run(student, data, added * cfg.steps_per_class, cfg, Some(Teacher { model: teacher, mask }))
}

/// Per-pixel argmax of the model's logits, batched.
pub fn predict(model: &SegModel, images: &Tensor<f32>) -> Result<Vec<u8>> {
    let logits = model.evaluate(images)?.logits;
    let c = model.num_classes();
    Ok(logits
        .data()
        .chunks(c)
        .map(|row| {
            let mut best = 0;
            for (k, &v) in row.iter().enumerate() {
                if v > row[best] {
                    best = k;
                }
            }
            best as u8
        })
        .collect())
}

/// Confusion matrix of `model` over whole images. Labels must be output
/// channels or `IGNORE_INDEX`.
pub fn evaluate(model: &SegModel, data: &[Sample], batch_size: usize) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(model.num_classes());
    for chunk in data.chunks(batch_size.max(1)) {
        let images: Vec<Tensor<f32>> = chunk.iter().map(|s| s.image.clone()).collect();
        let pred = predict(model, &Tensor::stack(&images)?)?;
        let gt: Vec<u8> = chunk.iter().flat_map(|s| s.labels.iter().copied()).collect();
        cm.accumulate(&pred, &gt, IGNORE_INDEX)?;
    }
    Ok(cm)
}

/// Mean cross-entropy over whole, unaugmented images.
pub fn mean_ce(model: &SegModel, data: &[Sample]) -> Result<f64> {
    let images: Vec<Tensor<f32>> = data.iter().map(|s| s.image.clone()).collect();
    let labels: Vec<u8> = data.iter().flat_map(|s| s.labels.iter().copied()).collect();
    let mut tape = Tape::new();
    let input = tape.constant(Tensor::stack(&images)?);
    let out = model.snapshot().model().forward(&mut tape, input)?;
    let ce = distill::loss_ce(&mut tape, out.logits, &labels, model.num_classes(), IGNORE_INDEX)?;
    Ok(tape.value(ce).item() as f64)
}
