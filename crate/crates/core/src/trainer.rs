//! Training engine: seeded optimization with early stopping, method
//! dispatch, adversarial update scheduling, ROC-AUC evaluation, and random
//! hyperparameter search.
//!
//! Determinism contract: everything downstream of a `TrainConfig` (parameter
//! init, batch order, background shuffles, adversarial batch draws) runs on
//! independent ChaCha streams derived from the config seed, so runs are
//! reproducible and methods share the same data order where their
//! definitions coincide. Validation loss for early stopping is the
//! classification term only, computed on clean inputs; AUC evaluation is
//! always on clean stored images.

use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::{ImageSample, Split};
use crate::error::{Error, Result};
use crate::grid::BitGrid;
use crate::losses::{
    actdiff_loss, adversarial_losses, cross_entropy, gradmask_penalty, rrr_penalty, Method,
};
use crate::model::{BackboneConfig, ConvNet, Discriminator, DiscriminatorConfig, LogitModel};
use crate::splits::dilate_mask;
use crate::tape::{Tape, Var};
use crate::tensor::{Scalar, Tensor};

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct TrainConfig {
    pub method: Method,
    pub learning_rate: f64,
    /// Weight of the active method's regularizer.
    pub lambda: f64,
    pub disc_learning_rate: f64,
    /// Discriminator updates per encoder update.
    pub disc_update_ratio: usize,
    /// Gaussian dilation applied to masks before training (0 disables).
    pub mask_dilation_sigma: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
    pub seed: u64,
    pub backbone: BackboneConfig,
    pub discriminator: DiscriminatorConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            method: Method::Baseline,
            learning_rate: 3.11e-4,
            lambda: 0.0,
            disc_learning_rate: 1e-2,
            disc_update_ratio: 10,
            mask_dilation_sigma: 1.0,
            batch_size: 16,
            max_epochs: 100,
            patience: 20,
            seed: 0,
            backbone: BackboneConfig::default(),
            discriminator: DiscriminatorConfig::default(),
        }
    }
}

impl TrainConfig {
    /// Per-method defaults for the synthetic shortcut task at desk scale.
    pub fn synthetic_defaults(method: Method) -> Self {
        let mut cfg = TrainConfig { method, ..Default::default() };
        match method {
            Method::Baseline => {
                cfg.learning_rate = 3.11e-4;
            }
            Method::Masked => {
                cfg.learning_rate = 3e-4;
            }
            Method::ActDiff => {
                cfg.learning_rate = 3.11e-4;
                cfg.lambda = 1.15e-1;
            }
            Method::Adversarial => {
                cfg.learning_rate = 3.71e-4;
                cfg.lambda = 10.0;
                cfg.disc_update_ratio = 10;
                cfg.disc_learning_rate = 1e-2;
            }
            Method::GradMask => {
                cfg.learning_rate = 1e-3;
                cfg.lambda = 2.03e-1;
            }
            Method::Rrr => {
                cfg.learning_rate = 1e-4;
                cfg.lambda = 7.56;
            }
        }
        cfg
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if self.lambda < 0.0 || !self.lambda.is_finite() {
            return Err(Error::Config("lambda must be non-negative".into()));
        }
        if self.method == Method::Adversarial {
            if !(self.disc_learning_rate > 0.0) {
                return Err(Error::Config("disc_learning_rate must be positive".into()));
            }
            if self.disc_update_ratio < 1 {
                return Err(Error::Config("disc_update_ratio must be >= 1".into()));
            }
        }
        if self.mask_dilation_sigma < 0.0 {
            return Err(Error::Config("mask_dilation_sigma must be >= 0".into()));
        }
        if self.batch_size < 1 || self.max_epochs < 1 || self.patience < 1 {
            return Err(Error::Config("batch_size, max_epochs, patience must be >= 1".into()));
        }
        self.backbone.validate()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub valid_auc: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub epochs: Vec<EpochRecord>,
    /// 1-based epoch with the lowest validation loss.
    pub best_epoch: usize,
    pub best_valid_loss: f64,
    pub best_valid_auc: f64,
    pub stopped_epoch: usize,
    pub encoder_steps: usize,
    pub disc_steps: usize,
}

impl TrainHistory {
    pub fn to_csv(&self, path: &Path) -> Result<()> {
        let mut wtr = csv::Writer::from_path(path)?;
        wtr.write_record(["epoch", "train_loss", "valid_loss", "valid_auc"])?;
        for e in &self.epochs {
            wtr.write_record([
                e.epoch.to_string(),
                format!("{:.9}", e.train_loss),
                format!("{:.9}", e.valid_loss),
                format!("{:.9}", e.valid_auc),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Stream tags for the independent RNGs derived from one config seed.
mod stream {
    pub const INIT: u64 = 1;
    pub const DATA: u64 = 2;
    pub const MASK: u64 = 3;
    pub const DISC_INIT: u64 = 4;
    pub const DISC_DATA: u64 = 5;
}

/// SplitMix64: decorrelates the per-purpose seeds derived from one run seed.
pub fn derive_seed(seed: u64, tag: u64) -> u64 {
    let mut z = seed ^ tag.wrapping_mul(0x9E3779B97F4A7C15);
    z = z.wrapping_add(0x9E3779B97F4A7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58476D1CE4E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D049BB133111EB);
    z ^ (z >> 31)
}

fn stream_rng(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(derive_seed(seed, tag))
}

// ---- Adam ----------------------------------------------------------------------

pub struct Adam<T> {
    lr: T,
    beta1: T,
    beta2: T,
    eps: T,
    t: i32,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
}

impl<T: Scalar> Adam<T> {
    pub fn new(lr: f64) -> Self {
        Adam {
            lr: T::from_f64(lr),
            beta1: T::from_f64(0.9),
            beta2: T::from_f64(0.999),
            eps: T::from_f64(1e-8),
            t: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> usize {
        self.t as usize
    }

    pub fn step(&mut self, params: &mut [Tensor<T>], grads: &[Tensor<T>]) {
        if self.m.is_empty() {
            self.m = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
            self.v = params.iter().map(|p| Tensor::zeros(p.shape())).collect();
        }
        self.t += 1;
        let b1 = self.beta1;
        let b2 = self.beta2;
        let bc1 = T::ONE - T::from_f64(self.beta1.to_f64().powi(self.t));
        let bc2 = T::ONE - T::from_f64(self.beta2.to_f64().powi(self.t));
        for ((p, g), (m, v)) in
            params.iter_mut().zip(grads).zip(self.m.iter_mut().zip(self.v.iter_mut()))
        {
            for ((pv, &gv), (mv, vv)) in
                p.data_mut().iter_mut().zip(g.data()).zip(m.data_mut().iter_mut().zip(v.data_mut()))
            {
                *mv = b1 * *mv + (T::ONE - b1) * gv;
                *vv = b2 * *vv + (T::ONE - b2) * gv * gv;
                let mhat = *mv / bc1;
                let vhat = *vv / bc2;
                *pv = *pv - self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}

// ---- AUC ------------------------------------------------------------------------

/// Rank-based (Mann–Whitney) area under the ROC curve; ties contribute 1/2.
pub fn auc_from_scores(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() || scores.is_empty() {
        return Err(Error::Config("scores and labels must be equal-length, non-empty".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Config("AUC needs both classes present".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap_or(std::cmp::Ordering::Equal));
    // Average ranks across tied score groups.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0; // 1-based
        for &idx in &order[i..=j] {
            if labels[idx] == 1 {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    Ok((rank_sum_pos - n_pos as f64 * (n_pos as f64 + 1.0) / 2.0) / (n_pos as f64 * n_neg as f64))
}

/// Positive-class score (logit contrast) for each sample, batched.
pub fn model_scores<T: Scalar, M: LogitModel<T> + ?Sized>(
    model: &M,
    samples: &[&ImageSample],
    batch_size: usize,
) -> Result<Vec<f64>> {
    let mut scores = Vec::with_capacity(samples.len());
    for chunk in samples.chunks(batch_size.max(1)) {
        let (h, w) = (chunk[0].height(), chunk[0].width());
        let mut batch = Tensor::zeros(&[chunk.len(), 1, h, w]);
        for (j, s) in chunk.iter().enumerate() {
            for (d, &v) in batch.data_mut()[j * h * w..(j + 1) * h * w]
                .iter_mut()
                .zip(s.image.data())
            {
                *d = T::from_f64(v as f64);
            }
        }
        let mut tape = Tape::new();
        let x = tape.leaf(batch);
        let logits = model.logits(&mut tape, x)?;
        let vals = tape.value(logits);
        let k = vals.shape()[1];
        for j in 0..chunk.len() {
            scores
                .push(vals.data()[j * k + 1].to_f64() - vals.data()[j * k].to_f64());
        }
    }
    Ok(scores)
}

/// Best-threshold-free generalization metric on a split's clean images.
pub fn evaluate_auc<T: Scalar, M: LogitModel<T> + ?Sized>(
    model: &M,
    samples: &[&ImageSample],
    batch_size: usize,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("empty evaluation split".into()));
    }
    let scores = model_scores(model, samples, batch_size)?;
    let labels: Vec<u8> = samples.iter().map(|s| s.label).collect();
    auc_from_scores(&scores, &labels)
}

// ---- training -----------------------------------------------------------------

struct PreparedSample<T> {
    image: Tensor<T>,   // [H,W]
    seg: Tensor<T>,     // [H,W] {0,1}, dilated
    keep_out: Tensor<T>, // 1 - seg
    mask: BitGrid,      // dilated
    label: u8,
}

struct Prepared<T> {
    train: Vec<PreparedSample<T>>,
    valid_images: Vec<Tensor<T>>,
    valid_labels: Vec<usize>,
    h: usize,
    w: usize,
}

fn prepare<T: Scalar>(config: &TrainConfig, samples: &[ImageSample]) -> Result<Prepared<T>> {
    let train: Vec<&ImageSample> =
        samples.iter().filter(|s| s.split == Some(Split::Train)).collect();
    let valid: Vec<&ImageSample> =
        samples.iter().filter(|s| s.split == Some(Split::Valid)).collect();
    if train.is_empty() || valid.is_empty() {
        return Err(Error::Data("training needs non-empty train and valid splits".into()));
    }
    let (h, w) = (train[0].height(), train[0].width());
    for s in train.iter().chain(&valid) {
        if (s.height(), s.width()) != (h, w) {
            return Err(Error::Data(format!("sample {} has inconsistent size", s.id)));
        }
    }
    if config.method.needs_masks() {
        if let Some(bad) = train.iter().find(|s| s.mask.count_ones() == 0) {
            return Err(Error::Data(format!(
                "method `{}` requires masks but sample {} has an empty one",
                config.method, bad.id
            )));
        }
    }
    let mut prepared = Vec::with_capacity(train.len());
    for s in train {
        let mask = if config.method.needs_masks() && config.mask_dilation_sigma > 0.0 {
            dilate_mask(&s.mask, config.mask_dilation_sigma)?
        } else {
            s.mask.clone()
        };
        let seg: Tensor<T> = mask.to_tensor();
        let keep_out = seg.map(|v| T::ONE - v);
        prepared.push(PreparedSample {
            image: s.image.cast(),
            seg,
            keep_out,
            mask,
            label: s.label,
        });
    }
    let valid_images = valid.iter().map(|s| s.image.cast()).collect();
    let valid_labels = valid.iter().map(|s| s.label as usize).collect();
    Ok(Prepared { train: prepared, valid_images, valid_labels, h, w })
}

fn stack<T: Scalar>(images: &[&Tensor<T>], h: usize, w: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(&[images.len(), 1, h, w]);
    for (j, img) in images.iter().enumerate() {
        out.data_mut()[j * h * w..(j + 1) * h * w].copy_from_slice(img.data());
    }
    out
}

/// Fresh background shuffle of each image in the batch (one independent
/// permutation per presentation).
fn shuffled_batch<T: Scalar>(
    batch: &[&PreparedSample<T>],
    h: usize,
    w: usize,
    rng: &mut ChaCha8Rng,
) -> Result<Tensor<T>> {
    let mut out = Tensor::zeros(&[batch.len(), 1, h, w]);
    for (j, s) in batch.iter().enumerate() {
        let masked = crate::transforms::shuffle_outside_mask(&s.image, &s.mask, rng)?;
        out.data_mut()[j * h * w..(j + 1) * h * w].copy_from_slice(masked.data());
    }
    Ok(out)
}

fn batch_labels<T>(batch: &[&PreparedSample<T>]) -> Vec<usize> {
    batch.iter().map(|s| s.label as usize).collect()
}

fn stack_keep_out<T: Scalar>(batch: &[&PreparedSample<T>], h: usize, w: usize) -> Tensor<T> {
    let mut out = Tensor::zeros(&[batch.len(), 1, h, w]);
    for (j, s) in batch.iter().enumerate() {
        out.data_mut()[j * h * w..(j + 1) * h * w].copy_from_slice(s.keep_out.data());
    }
    out
}

fn mean_valid_ce<T: Scalar>(net: &ConvNet<T>, prep: &Prepared<T>, batch_size: usize) -> Result<f64> {
    let mut total = 0.0;
    let mut count = 0usize;
    let n = prep.valid_images.len();
    let mut i = 0;
    while i < n {
        let m = batch_size.min(n - i);
        let refs: Vec<&Tensor<T>> = prep.valid_images[i..i + m].iter().collect();
        let x = stack(&refs, prep.h, prep.w);
        let labels = &prep.valid_labels[i..i + m];
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let out = net.forward_fresh(&mut tape, xv)?;
        let ce = cross_entropy(&mut tape, out.logits, labels)?;
        total += tape.value(ce).item().to_f64() * m as f64;
        count += m;
        i += m;
    }
    Ok(total / count as f64)
}

fn valid_auc<T: Scalar>(net: &ConvNet<T>, prep: &Prepared<T>, batch_size: usize) -> Result<f64> {
    let mut scores = Vec::with_capacity(prep.valid_images.len());
    let n = prep.valid_images.len();
    let mut i = 0;
    while i < n {
        let m = batch_size.min(n - i);
        let refs: Vec<&Tensor<T>> = prep.valid_images[i..i + m].iter().collect();
        let x = stack(&refs, prep.h, prep.w);
        let mut tape = Tape::new();
        let xv = tape.leaf(x);
        let out = net.forward_fresh(&mut tape, xv)?;
        let vals = tape.value(out.logits);
        for j in 0..m {
            scores.push(vals.data()[j * 2 + 1].to_f64() - vals.data()[j * 2].to_f64());
        }
        i += m;
    }
    let labels: Vec<u8> = prep.valid_labels.iter().map(|&l| l as u8).collect();
    auc_from_scores(&scores, &labels)
}

/// Trains one model; returns the best-validation-loss snapshot and the full
/// history. Fully deterministic given the config (including its seed).
pub fn train<T: Scalar>(
    config: &TrainConfig,
    samples: &[ImageSample],
) -> Result<(ConvNet<T>, TrainHistory)> {
    config.validate()?;
    let prep = prepare::<T>(config, samples)?;
    let mut net = ConvNet::<T>::new(config.backbone.clone(), derive_seed(config.seed, stream::INIT))?;
    let mut adam = Adam::<T>::new(config.learning_rate);
    let mut rng_data = stream_rng(config.seed, stream::DATA);
    let mut rng_mask = stream_rng(config.seed, stream::MASK);
    let mut rng_disc_data = stream_rng(config.seed, stream::DISC_DATA);

    let mut disc = if config.method == Method::Adversarial {
        Some(Discriminator::<T>::new(
            config.discriminator.clone(),
            config.backbone.embedding_dim(),
            derive_seed(config.seed, stream::DISC_INIT),
        )?)
    } else {
        None
    };
    let mut disc_adam = Adam::<T>::new(config.disc_learning_rate);

    let lambda = T::from_f64(config.lambda);
    let (h, w) = (prep.h, prep.w);
    let n_train = prep.train.len();
    let mut order: Vec<usize> = (0..n_train).collect();

    let mut history = TrainHistory {
        epochs: Vec::new(),
        best_epoch: 0,
        best_valid_loss: f64::INFINITY,
        best_valid_auc: 0.0,
        stopped_epoch: 0,
        encoder_steps: 0,
        disc_steps: 0,
    };
    let mut best_params: Vec<Tensor<T>> = net.params().to_vec();

    for epoch in 1..=config.max_epochs {
        order.shuffle(&mut rng_data);
        let mut epoch_loss = 0.0;
        let mut seen = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let batch: Vec<&PreparedSample<T>> = chunk.iter().map(|&i| &prep.train[i]).collect();
            let labels = batch_labels(&batch);
            let clean_refs: Vec<&Tensor<T>> = batch.iter().map(|s| &s.image).collect();

            // Adversarial: k discriminator updates on fresh batches first.
            if let Some(disc) = disc.as_mut() {
                for _ in 0..config.disc_update_ratio {
                    let idx: Vec<usize> =
                        (0..config.batch_size.min(n_train)).map(|_| rng_disc_data.gen_range(0..n_train)).collect();
                    let dbatch: Vec<&PreparedSample<T>> =
                        idx.iter().map(|&i| &prep.train[i]).collect();
                    let drefs: Vec<&Tensor<T>> = dbatch.iter().map(|s| &s.image).collect();
                    let clean_x = stack(&drefs, h, w);
                    let masked_x = shuffled_batch(&dbatch, h, w, &mut rng_mask)?;
                    disc.refresh_spectral_estimates();
                    let mut tape = Tape::new();
                    // Encoder frozen: embeddings enter as constants.
                    let (ec, em) = {
                        let cx = tape.leaf(clean_x);
                        let mx = tape.leaf(masked_x);
                        let oc = net.forward_fresh(&mut tape, cx)?;
                        let om = net.forward_fresh(&mut tape, mx)?;
                        let ec = tape.detach(oc.pre_activation);
                        let em = tape.detach(om.pre_activation);
                        (ec, em)
                    };
                    let dvars = disc.bind(&mut tape);
                    let pm = disc.forward(&mut tape, &dvars, em)?;
                    let pc = disc.forward(&mut tape, &dvars, ec)?;
                    let (dloss, _) = adversarial_losses(&mut tape, pm, pc, lambda)?;
                    let grads = tape.grad(dloss, &dvars);
                    let gvals: Vec<Tensor<T>> =
                        grads.iter().map(|&g| tape.value(g).clone()).collect();
                    let mut dparams = disc.params().to_vec();
                    disc_adam.step(&mut dparams, &gvals);
                    disc.set_params(dparams)?;
                    history.disc_steps += 1;
                }
            }

            // Encoder update.
            let mut tape = Tape::new();
            let pvars = net.bind(&mut tape);
            let loss = match config.method {
                Method::Baseline => {
                    let x = tape.leaf(stack(&clean_refs, h, w));
                    let out = net.forward(&mut tape, &pvars, x)?;
                    cross_entropy(&mut tape, out.logits, &labels)?
                }
                Method::Masked => {
                    let x = tape.leaf(shuffled_batch(&batch, h, w, &mut rng_mask)?);
                    let out = net.forward(&mut tape, &pvars, x)?;
                    cross_entropy(&mut tape, out.logits, &labels)?
                }
                Method::ActDiff => {
                    let xc = tape.leaf(stack(&clean_refs, h, w));
                    let xm = tape.leaf(shuffled_batch(&batch, h, w, &mut rng_mask)?);
                    let oc = net.forward(&mut tape, &pvars, xc)?;
                    let om = net.forward(&mut tape, &pvars, xm)?;
                    let ce = cross_entropy(&mut tape, oc.logits, &labels)?;
                    let pen =
                        actdiff_loss(&mut tape, om.pre_activation, oc.pre_activation, lambda)?;
                    tape.add(ce, pen)
                }
                Method::Rrr => {
                    let x = tape.leaf(stack(&clean_refs, h, w));
                    let keep = tape.leaf(stack_keep_out(&batch, h, w));
                    let out = net.forward(&mut tape, &pvars, x)?;
                    let ce = cross_entropy(&mut tape, out.logits, &labels)?;
                    let pen = rrr_penalty(&mut tape, x, out.logits, keep, lambda)?;
                    tape.add(ce, pen)
                }
                Method::GradMask => {
                    let x = tape.leaf(stack(&clean_refs, h, w));
                    let keep = tape.leaf(stack_keep_out(&batch, h, w));
                    let out = net.forward(&mut tape, &pvars, x)?;
                    let ce = cross_entropy(&mut tape, out.logits, &labels)?;
                    let pen = gradmask_penalty(&mut tape, x, out.logits, keep, lambda)?;
                    tape.add(ce, pen)
                }
                Method::Adversarial => {
                    let disc = disc.as_mut().expect("adversarial method has a discriminator");
                    let xc = tape.leaf(stack(&clean_refs, h, w));
                    let xm = tape.leaf(shuffled_batch(&batch, h, w, &mut rng_mask)?);
                    let oc = net.forward(&mut tape, &pvars, xc)?;
                    let om = net.forward(&mut tape, &pvars, xm)?;
                    let ce = cross_entropy(&mut tape, oc.logits, &labels)?;
                    disc.refresh_spectral_estimates();
                    let dvars = disc.bind(&mut tape);
                    let pm = disc.forward(&mut tape, &dvars, om.pre_activation)?;
                    let pc = disc.forward(&mut tape, &dvars, oc.pre_activation)?;
                    // Discriminator parameters stay frozen here; gradients
                    // flow through its input back into the encoder.
                    let (_, enc_term) = adversarial_losses(&mut tape, pm, pc, lambda)?;
                    tape.add(ce, enc_term)
                }
            };
            let grads = tape.grad(loss, &pvars);
            let gvals: Vec<Tensor<T>> = grads.iter().map(|&g| tape.value(g).clone()).collect();
            let mut params = net.params().to_vec();
            adam.step(&mut params, &gvals);
            net.set_params(params)?;
            history.encoder_steps += 1;
            epoch_loss += tape.value(loss).item().to_f64() * batch.len() as f64;
            seen += batch.len();
        }

        let vloss = mean_valid_ce(&net, &prep, config.batch_size)?;
        let vauc = valid_auc(&net, &prep, config.batch_size)?;
        history.epochs.push(EpochRecord {
            epoch,
            train_loss: epoch_loss / seen as f64,
            valid_loss: vloss,
            valid_auc: vauc,
        });
        if vloss < history.best_valid_loss {
            history.best_valid_loss = vloss;
            history.best_valid_auc = vauc;
            history.best_epoch = epoch;
            best_params = net.params().to_vec();
        }
        history.stopped_epoch = epoch;
        if epoch - history.best_epoch >= config.patience {
            break;
        }
    }

    net.set_params(best_params)?;
    Ok((net, history))
}

// ---- random hyperparameter search ------------------------------------------------

/// Search ranges mirroring the published protocol: log-uniform learning rate
/// and λ, uniform discriminator ratio and mask dilation σ.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SearchSpace {
    pub method: Method,
    pub lr_min: f64,
    pub lr_max: f64,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub disc_ratio_min: usize,
    pub disc_ratio_max: usize,
    pub disc_lr_min: f64,
    pub disc_lr_max: f64,
    pub dilation_min: f64,
    pub dilation_max: f64,
    pub base: TrainConfig,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            method: Method::Baseline,
            lr_min: 1e-5,
            lr_max: 1e-2,
            lambda_min: 1e-4,
            lambda_max: 10.0,
            disc_ratio_min: 2,
            disc_ratio_max: 10,
            disc_lr_min: 1e-4,
            disc_lr_max: 1e-2,
            dilation_min: 0.0,
            dilation_max: 2.0,
            base: TrainConfig::default(),
        }
    }
}

impl SearchSpace {
    pub fn for_method(method: Method) -> Self {
        SearchSpace { method, base: TrainConfig { method, ..Default::default() }, ..Default::default() }
    }

    /// Expanded λ floor for probing where the representation-matching
    /// penalty stops binding.
    pub fn wide_lambda(method: Method) -> Self {
        SearchSpace { lambda_min: 1e-16, ..Self::for_method(method) }
    }

    fn sample(&self, rng: &mut ChaCha8Rng) -> TrainConfig {
        let log_uniform = |rng: &mut ChaCha8Rng, lo: f64, hi: f64| {
            (rng.gen_range(lo.ln()..=hi.ln())).exp()
        };
        // Fixed draw order keeps trials reproducible across methods.
        let lr = log_uniform(rng, self.lr_min, self.lr_max);
        let lambda = log_uniform(rng, self.lambda_min, self.lambda_max);
        let ratio = rng.gen_range(self.disc_ratio_min..=self.disc_ratio_max);
        let disc_lr = log_uniform(rng, self.disc_lr_min, self.disc_lr_max);
        let dilation = rng.gen_range(self.dilation_min..=self.dilation_max);

        let mut cfg = TrainConfig { method: self.method, ..self.base.clone() };
        cfg.learning_rate = lr;
        if !matches!(self.method, Method::Baseline | Method::Masked) {
            cfg.lambda = lambda;
        }
        if self.method == Method::Adversarial {
            cfg.disc_update_ratio = ratio;
            cfg.disc_learning_rate = disc_lr;
        }
        if self.method.needs_masks() {
            cfg.mask_dilation_sigma = dilation;
        }
        cfg
    }
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TrialRecord {
    pub trial: usize,
    pub method: Method,
    pub learning_rate: f64,
    pub lambda: f64,
    pub disc_update_ratio: usize,
    pub disc_learning_rate: f64,
    pub mask_dilation_sigma: f64,
    pub best_valid_auc: f64,
    pub best_valid_loss: f64,
    pub best_epoch: usize,
}

/// Seeded random search over the published ranges: trains each sampled
/// config and selects the one with the highest best-epoch validation AUC.
pub fn random_search<T: Scalar>(
    space: &SearchSpace,
    budget: usize,
    seed: u64,
    samples: &[ImageSample],
) -> Result<(TrainConfig, Vec<TrialRecord>)> {
    if budget < 1 {
        return Err(Error::Config("search budget must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, 0xA11CE));
    let mut best: Option<(f64, TrainConfig)> = None;
    let mut table = Vec::with_capacity(budget);
    for trial in 0..budget {
        let cfg = space.sample(&mut rng);
        let (_, hist) = train::<T>(&cfg, samples)?;
        table.push(TrialRecord {
            trial,
            method: cfg.method,
            learning_rate: cfg.learning_rate,
            lambda: cfg.lambda,
            disc_update_ratio: cfg.disc_update_ratio,
            disc_learning_rate: cfg.disc_learning_rate,
            mask_dilation_sigma: cfg.mask_dilation_sigma,
            best_valid_auc: hist.best_valid_auc,
            best_valid_loss: hist.best_valid_loss,
            best_epoch: hist.best_epoch,
        });
        if best.as_ref().map(|(a, _)| hist.best_valid_auc > *a).unwrap_or(true) {
            best = Some((hist.best_valid_auc, cfg));
        }
    }
    let (_, cfg) = best.expect("budget >= 1");
    Ok((cfg, table))
}

pub fn write_trials_csv(path: &Path, trials: &[TrialRecord]) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record([
        "trial",
        "method",
        "learning_rate",
        "lambda",
        "disc_update_ratio",
        "disc_learning_rate",
        "mask_dilation_sigma",
        "best_valid_auc",
        "best_valid_loss",
        "best_epoch",
    ])?;
    for t in trials {
        wtr.write_record([
            t.trial.to_string(),
            t.method.to_string(),
            format!("{:.6e}", t.learning_rate),
            format!("{:.6e}", t.lambda),
            t.disc_update_ratio.to_string(),
            format!("{:.6e}", t.disc_learning_rate),
            format!("{:.4}", t.mask_dilation_sigma),
            format!("{:.6}", t.best_valid_auc),
            format!("{:.9}", t.best_valid_loss),
            t.best_epoch.to_string(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}
