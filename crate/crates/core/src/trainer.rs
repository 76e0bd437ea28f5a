//! Two-scale training: augmentation, the fused-pair loss, SGD with a
//! polynomial learning-rate decay, and per-epoch validation.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{bail, Error, Result};
use crate::fusion::{argmax_prediction, fuse_pair_on};
use crate::labels::{LabelMap, IGNORE_ID};
use crate::segnet::{image_var, Network, OUTPUT_STRIDE};
use crate::synth::{crop_window, scheduled_class, window_start, ClassIndex, ConfusionMatrix, Dataset};
use crate::tensor::kernels::bilinear_forward;
use crate::tensor::{Parameter, Sgd, Tape, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub base_lr: f64,
    pub poly_exponent: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    /// Optimisation steps per epoch; defaults to the training set size.
    pub steps_per_epoch: Option<usize>,
    /// `[height, width]` of training crops.
    pub crop: [usize; 2],
    /// Lower and upper scale of the trained pair.
    pub train_scales: [f64; 2],
    pub aug_scale_range: [f64; 2],
    pub aux_weight: f64,
    pub seed: u64,
    pub flip_prob: f64,
    pub blur_prob: f64,
    pub blur_sigma: [f64; 2],
    /// Per-channel multiplicative jitter amplitude.
    pub brightness: f64,
    /// Cycle the class every crop must contain.
    pub class_uniform: bool,
    /// Iterations between loss records; 0 logs epochs only.
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            base_lr: 0.01,
            poly_exponent: 2.0,
            momentum: 0.9,
            weight_decay: 5e-4,
            epochs: 30,
            steps_per_epoch: None,
            crop: [64, 64],
            train_scales: [0.5, 1.0],
            aug_scale_range: [0.5, 2.0],
            aux_weight: 0.4,
            seed: 1,
            flip_prob: 0.5,
            blur_prob: 0.3,
            blur_sigma: [0.3, 1.0],
            brightness: 0.1,
            class_uniform: true,
            log_every: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.base_lr > 0.0 && self.base_lr.is_finite()) {
            bail!(Config, "base_lr must be positive, got {}", self.base_lr);
        }
        if self.poly_exponent.is_nan() || self.poly_exponent < 0.0 {
            bail!(Config, "poly_exponent must be non-negative");
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail!(Config, "momentum must lie in [0, 1), got {}", self.momentum);
        }
        if [self.weight_decay, self.aux_weight].iter().any(|v| v.is_nan() || *v < 0.0) {
            bail!(Config, "weight_decay and aux_weight must be non-negative");
        }
        let [lo, hi] = self.train_scales;
        if !(lo > 0.0 && lo < hi) {
            bail!(Config, "train_scales must be an increasing positive pair, got {:?}", self.train_scales);
        }
        for s in self.train_scales {
            Network::<f32>::scaled_size(self.crop[0], self.crop[1], s).map_err(|e| {
                Error::Config(format!(
                    "crop {:?} is not divisible by the output stride {OUTPUT_STRIDE} at scale {s}: {e}",
                    self.crop
                ))
            })?;
        }
        let [a, b] = self.aug_scale_range;
        if !(a > 0.0 && a <= b) {
            bail!(Config, "aug_scale_range must be an ordered positive range");
        }
        let [s0, s1] = self.blur_sigma;
        if !(s0 > 0.0 && s0 <= s1) {
            bail!(Config, "blur_sigma must be an ordered positive range");
        }
        for (name, p) in [("flip_prob", self.flip_prob), ("blur_prob", self.blur_prob)] {
            if !(0.0..=1.0).contains(&p) {
                bail!(Config, "{name} must be a probability, got {p}");
            }
        }
        if !(0.0..1.0).contains(&self.brightness) {
            bail!(Config, "brightness must lie in [0, 1)");
        }
        if self.steps_per_epoch == Some(0) {
            bail!(Config, "steps_per_epoch must be positive");
        }
        Ok(())
    }
}

/// `base_lr · (1 − iter/max_iter)^exponent`.
pub fn poly_lr(base_lr: f64, iter: u64, max_iter: u64, exponent: f64) -> Result<f64> {
    if max_iter == 0 {
        bail!(Usage, "max_iter must be at least 1");
    }
    if iter > max_iter {
        bail!(Usage, "iteration {iter} is past max_iter {max_iter}");
    }
    Ok(base_lr * (1.0 - iter as f64 / max_iter as f64).powf(exponent))
}

#[derive(Debug, Clone)]
pub struct TrainState {
    pub iteration: u64,
    pub epoch: usize,
    pub max_iter: u64,
    pub rng: ChaCha8Rng,
    pub loss_sum: f64,
    pub loss_count: u64,
}

impl TrainState {
    pub fn new(seed: u64, max_iter: u64) -> Self {
        Self {
            iteration: 0,
            epoch: 0,
            max_iter,
            rng: ChaCha8Rng::seed_from_u64(seed),
            loss_sum: 0.0,
            loss_count: 0,
        }
    }

    fn take_mean_loss(&mut self) -> f64 {
        let mean = if self.loss_count == 0 {
            0.0
        } else {
            self.loss_sum / self.loss_count as f64
        };
        self.loss_sum = 0.0;
        self.loss_count = 0;
        mean
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutcome {
    pub loss: f64,
    pub lr: f64,
}

/// One optimisation step on an already augmented crop.
pub fn train_step(
    net: &mut Network,
    sgd: &mut Sgd,
    image: &Tensor<f32>,
    label: &LabelMap,
    config: &TrainConfig,
    state: &mut TrainState,
) -> Result<StepOutcome> {
    let lr = poly_lr(config.base_lr, state.iteration, state.max_iter, config.poly_exponent)?;
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, true);
    let x = image_var(&mut tape, image)?;
    let lo = net.forward_at_scale_on(&mut tape, &bound, x, config.train_scales[0])?;
    let hi = net.forward_at_scale_on(&mut tape, &bound, x, config.train_scales[1])?;
    let fused = fuse_pair_on(&mut tape, lo.logits, lo.attention, hi.logits)?;
    let fused = match tape.value(fused).shape()[2..] == [label.height(), label.width()] {
        true => fused,
        false => tape.bilinear_resize(fused, label.height(), label.width())?,
    };
    let mut total = tape.cross_entropy_ignore(fused, label, IGNORE_ID)?;
    if let (Some(aux), true) = (hi.aux_logits, config.aux_weight > 0.0) {
        let aux = match tape.value(aux).shape()[2..] == [label.height(), label.width()] {
            true => aux,
            false => tape.bilinear_resize(aux, label.height(), label.width())?,
        };
        let aux_loss = tape.cross_entropy_ignore(aux, label, IGNORE_ID)?;
        let weighted = tape.affine(aux_loss, config.aux_weight as f32, 0.0);
        total = tape.add(total, weighted)?;
    }
    let loss = tape.value(total).data()[0] as f64;
    if !loss.is_finite() {
        bail!(
            Divergence,
            "loss became {loss} at iteration {} (epoch {}, lr {lr:.3e}); lower base_lr",
            state.iteration,
            state.epoch
        );
    }
    tape.backward(total)?;
    net.zero_grad();
    net.accumulate_grads(&tape, &bound)?;
    let mut params: Vec<&mut Parameter> = net.params_mut().iter_mut().collect();
    sgd.step(
        &mut params,
        lr as f32,
        config.momentum as f32,
        config.weight_decay as f32,
    )?;
    state.iteration += 1;
    state.loss_sum += loss;
    state.loss_count += 1;
    Ok(StepOutcome { loss, lr })
}

/// Counted convolution multiply-accumulates of one forward pass per scale
/// on a `height × width` input.
pub fn forward_macs(net: &Network, height: usize, width: usize, scales: &[f64]) -> Result<u64> {
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let x = image_var(&mut tape, &Tensor::zeros(&[3, height, width])?)?;
    for &s in scales {
        net.forward_at_scale_on(&mut tape, &bound, x, s)?;
    }
    Ok(tape.conv_macs())
}

fn nearest_index(input: usize, output: usize, o: usize) -> usize {
    (((o as f64 + 0.5) * input as f64 / output as f64).floor() as usize).min(input - 1)
}

/// Resizes labels by nearest neighbour on pixel centres.
pub fn resize_labels_nearest(label: &LabelMap, out_h: usize, out_w: usize) -> Result<LabelMap> {
    let (h, w) = (label.height(), label.width());
    let data = (0..out_h * out_w)
        .map(|i| label.get(nearest_index(h, out_h, i / out_w), nearest_index(w, out_w, i % out_w)))
        .collect();
    LabelMap::new(out_h, out_w, label.num_classes(), data)
}

/// Mirrors image and labels left to right.
pub fn flip_horizontal(image: &Tensor<f32>, label: &LabelMap) -> Result<(Tensor<f32>, LabelMap)> {
    let (h, w) = (label.height(), label.width());
    let img = Tensor::from_fn(image.shape(), |i| {
        let (row, x) = (i / w, i % w);
        image.data()[row * w + (w - 1 - x)]
    })?;
    let lab = (0..h * w).map(|i| label.data()[(i / w) * w + (w - 1 - i % w)]).collect();
    Ok((img, LabelMap::new(h, w, label.num_classes(), lab)?))
}

/// Separable Gaussian blur with edge clamping.
pub fn gaussian_blur(image: &Tensor<f32>, sigma: f64) -> Tensor<f32> {
    let [_, planes, h, w] = image.dims4();
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let norm: f64 = kernel.iter().sum();
    let kernel: Vec<f32> = kernel.iter().map(|k| (k / norm) as f32).collect();
    let pass = |src: &[f32], horizontal: bool| -> Vec<f32> {
        let mut out = vec![0.0f32; src.len()];
        for p in 0..planes {
            let plane = &src[p * h * w..(p + 1) * h * w];
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for (k, d) in kernel.iter().zip(-radius..=radius) {
                        let (sy, sx) = if horizontal {
                            (y, (x as isize + d).clamp(0, w as isize - 1) as usize)
                        } else {
                            ((y as isize + d).clamp(0, h as isize - 1) as usize, x)
                        };
                        acc += k * plane[sy * w + sx];
                    }
                    out[p * h * w + y * w + x] = acc;
                }
            }
        }
        out
    };
    let once = pass(image.data(), true);
    let twice = pass(&once, false);
    Tensor::new(image.shape(), twice).expect("same shape")
}

/// Random scale, flip, blur and brightness jitter, then a crop (padded with
/// zeros and ignore labels) to `config.crop`. A `focus` pixel is tracked
/// through the geometric steps and kept inside the crop.
pub fn augment(
    image: &Tensor<f32>,
    label: &LabelMap,
    config: &TrainConfig,
    focus: Option<(usize, usize)>,
    rng: &mut impl Rng,
) -> Result<(Tensor<f32>, LabelMap)> {
    let (h, w) = (label.height(), label.width());
    if image.shape() != [3, h, w] {
        bail!(Dimension, "image {:?} does not match {h}x{w} labels", image.shape());
    }
    let [a, b] = config.aug_scale_range;
    let s = if a == b { a } else { rng.gen_range(a..=b) };
    let (nh, nw) = (
        ((h as f64 * s).round() as usize).max(1),
        ((w as f64 * s).round() as usize).max(1),
    );
    let (mut img, mut lab) = if (nh, nw) == (h, w) {
        (image.clone(), label.clone())
    } else {
        (
            Tensor::new(&[3, nh, nw], bilinear_forward(image.data(), 3, (h, w), (nh, nw)))?,
            resize_labels_nearest(label, nh, nw)?,
        )
    };
    let mut focus = focus.map(|(fy, fx)| {
        let class = label.get(fy, fx);
        let map = |v: usize, from: usize, to: usize| {
            (((v as f64 + 0.5) * to as f64 / from as f64 - 0.5).round().max(0.0) as usize).min(to - 1)
        };
        let (cy, cx) = (map(fy, h, nh), map(fx, w, nw));
        // Shrinking can drop the exact pixel; prefer a nearby one with the class.
        let near = (cy.saturating_sub(2)..(cy + 3).min(nh))
            .flat_map(|y| (cx.saturating_sub(2)..(cx + 3).min(nw)).map(move |x| (y, x)))
            .filter(|&(y, x)| lab.get(y, x) == class)
            .min_by_key(|&(y, x)| y.abs_diff(cy) + x.abs_diff(cx));
        near.unwrap_or((cy, cx))
    });
    if rng.gen_bool(config.flip_prob) {
        (img, lab) = flip_horizontal(&img, &lab)?;
        focus = focus.map(|(y, x)| (y, nw - 1 - x));
    }
    if rng.gen_bool(config.blur_prob) {
        let [s0, s1] = config.blur_sigma;
        let sigma = if s0 == s1 { s0 } else { rng.gen_range(s0..=s1) };
        img = gaussian_blur(&img, sigma);
    }
    if config.brightness > 0.0 {
        let hw = nh * nw;
        for c in 0..3 {
            let f = 1.0 + rng.gen_range(-config.brightness..=config.brightness) as f32;
            for v in &mut img.data_mut()[c * hw..(c + 1) * hw] {
                *v = (*v * f).clamp(0.0, 1.0);
            }
        }
    }
    let [ch, cw] = config.crop;
    let top = window_start(nh, ch, focus.map(|f| f.0), rng);
    let left = window_start(nw, cw, focus.map(|f| f.1), rng);
    crop_window(&img, &lab, top, left, (ch, cw))
}

/// Single-scale (r = 1) confusion matrix over a dataset.
pub fn evaluate_single_scale(net: &Network, ds: &Dataset) -> Result<ConfusionMatrix> {
    let mut cm = ConfusionMatrix::new(ds.num_classes as usize);
    for s in &ds.samples {
        let out = net.forward_at_scale(&s.image, 1.0)?;
        let pred = argmax_prediction(&out.logits)?;
        cm.add(&pred, &s.label, IGNORE_ID)?;
    }
    Ok(cm)
}

/// One line of the metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub epoch: usize,
    pub iter: u64,
    pub lr: f64,
    pub loss: f64,
    pub miou: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainSummary {
    pub iterations: u64,
    pub epoch_loss: Vec<f64>,
    pub epoch_miou: Vec<Option<f64>>,
    pub first_loss: Option<f64>,
}

fn emit(log: &mut dyn Write, rec: &MetricsRecord) -> Result<()> {
    let line = serde_json::to_string(rec).map_err(|e| Error::Data(e.to_string()))?;
    writeln!(log, "{line}")?;
    Ok(())
}

/// Trains `net` in place, writing one JSON record per line to `log`.
pub fn train(
    net: &mut Network,
    data: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
    log: &mut dyn Write,
) -> Result<TrainSummary> {
    config.validate()?;
    if data.is_empty() {
        bail!(Data, "training set is empty");
    }
    if data.num_classes as usize != net.num_classes() {
        bail!(
            Config,
            "dataset has {} classes but the network predicts {}",
            data.num_classes,
            net.num_classes()
        );
    }
    let steps = config.steps_per_epoch.unwrap_or(data.len());
    let max_iter = (config.epochs * steps) as u64;
    let mut summary = TrainSummary::default();
    if max_iter == 0 {
        return Ok(summary);
    }
    let index = ClassIndex::new(data);
    let mut state = TrainState::new(config.seed, max_iter);
    let mut sgd = Sgd::new();
    let (mut epoch_sum, mut last_lr) = (0.0, config.base_lr);
    for epoch in 0..config.epochs {
        state.epoch = epoch + 1;
        for _ in 0..steps {
            let draw = if config.class_uniform {
                let class = scheduled_class(state.iteration, data.num_classes);
                index.draw(data, class, &mut state.rng)
            } else {
                crate::synth::Draw {
                    index: state.rng.gen_range(0..data.len()),
                    focus: None,
                }
            };
            let sample = &data.samples[draw.index];
            let (img, lab) = augment(&sample.image, &sample.label, config, draw.focus, &mut state.rng)?;
            let out = train_step(net, &mut sgd, &img, &lab, config, &mut state)?;
            summary.first_loss.get_or_insert(out.loss);
            epoch_sum += out.loss;
            last_lr = out.lr;
            if config.log_every > 0 && state.iteration.is_multiple_of(config.log_every as u64) {
                let loss = state.take_mean_loss();
                emit(log, &MetricsRecord { epoch: state.epoch, iter: state.iteration, lr: out.lr, loss, miou: None })?;
            }
        }
        let loss = epoch_sum / steps as f64;
        epoch_sum = 0.0;
        state.take_mean_loss();
        let miou = val.map(|v| evaluate_single_scale(net, v).map(|cm| cm.mean_iou())).transpose()?;
        log::info!("epoch {} loss {loss:.4} miou {miou:?}", state.epoch);
        emit(log, &MetricsRecord { epoch: state.epoch, iter: state.iteration, lr: last_lr, loss, miou })?;
        summary.epoch_loss.push(loss);
        summary.epoch_miou.push(miou);
    }
    summary.iterations = state.iteration;
    Ok(summary)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn poly_schedule_reference_points() {
        assert_eq!(poly_lr(0.01, 0, 100, 2.0).unwrap(), 0.01);
        assert_eq!(poly_lr(0.01, 100, 100, 2.0).unwrap(), 0.0);
        assert!((poly_lr(0.01, 50, 100, 2.0).unwrap() - 0.0025).abs() < 1e-15);
        assert!(matches!(poly_lr(0.01, 101, 100, 2.0), Err(Error::Usage(_))));
    }

    #[test]
    fn defaults_validate() {
        TrainConfig::default().validate().unwrap();
        let odd = TrainConfig {
            crop: [60, 60],
            ..Default::default()
        };
        assert!(matches!(odd.validate(), Err(Error::Config(_))));
        let bad_lr = TrainConfig {
            base_lr: 0.0,
            ..Default::default()
        };
        assert!(bad_lr.validate().is_err());
    }

    #[test]
    fn nearest_labels_only_copy_ids() {
        let lab = LabelMap::new(2, 2, 3, vec![0, 1, 2, IGNORE_ID]).unwrap();
        let up = resize_labels_nearest(&lab, 4, 4).unwrap();
        assert_eq!(&up.data()[..4], &[0, 0, 1, 1]);
        assert_eq!(&up.data()[12..], &[2, 2, IGNORE_ID, IGNORE_ID]);
    }

    #[test]
    fn blur_preserves_constants() {
        let t = Tensor::full(&[3, 5, 6], 0.4f32).unwrap();
        let b = gaussian_blur(&t, 0.8);
        assert!(b.data().iter().all(|v| (v - 0.4).abs() < 1e-6));
    }
}
