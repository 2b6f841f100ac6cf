//! Multi-task loss, SGD with momentum, the epoch loop and bagging.
//!
//! Every random choice (split, shuffle order, augmentation, dropout,
//! bootstrap draws) comes from a stream derived from the run seed and the
//! position in the run, so a resumed run or a run with a different worker
//! count reproduces an uninterrupted single-threaded run bit for bit.

use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::augment::{
    center_crop_or_mirror_pad, curriculum_size_for_epoch, random_augment, AugmentConfig,
    CurriculumSchedule,
};
use crate::error::{Error, Result};
use crate::infer::{predict_case, prepare_slice, threshold_argmax, ClaheOptions, Model};
use crate::metrics::dice;
use crate::network::{
    init_parameters, stack_batch, Checkpoint, Feat, Gradients, Mode, NetworkConfig, ParameterSet,
    Scalar, UNet,
};
use crate::preprocess::{extract_slices, Slice2D};
use crate::volume::{load_labels, load_volume, Ablation, CaseRecord, LabelVolume, Volume3D};

pub const LOG_FILE: &str = "train_log.jsonl";
pub const LAST_CHECKPOINT: &str = "last.ckpt";
pub const BEST_CHECKPOINT: &str = "best.ckpt";
pub const FINAL_CHECKPOINT: &str = "final.ckpt";
pub const SPLIT_FILE: &str = "split.json";
pub const RESAMPLE_FILE: &str = "resample.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr0: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Multiplier applied every `lr_decay_every` epochs.
    pub lr_decay_factor: f64,
    pub lr_decay_every: usize,
    /// Weight of the classification loss.
    pub lambda: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Fraction of cases used for training; the rest validate.
    pub train_fraction: f64,
    pub seed: u64,
    pub curriculum: CurriculumSchedule,
    pub augment: AugmentConfig,
    pub network: NetworkConfig,
    /// CLAHE before normalization (contrast baseline); off by default.
    pub clahe: Option<ClaheOptions>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr0: 0.001,
            momentum: 0.99,
            weight_decay: 0.0005,
            lr_decay_factor: 0.5,
            lr_decay_every: 50,
            lambda: 1.0,
            batch_size: 8,
            epochs: 120,
            train_fraction: 0.8,
            seed: 0,
            curriculum: CurriculumSchedule::default(),
            augment: AugmentConfig::default(),
            network: NetworkConfig::default(),
            clahe: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.lr0.is_finite() && self.lr0 >= 0.0) {
            return bad(format!("lr0 must be >= 0, got {}", self.lr0));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return bad(format!("momentum must be in [0, 1), got {}", self.momentum));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return bad(format!("weight_decay must be >= 0, got {}", self.weight_decay));
        }
        if !(self.lr_decay_factor > 0.0 && self.lr_decay_factor <= 1.0) || self.lr_decay_every == 0 {
            return bad("lr decay needs a factor in (0, 1] and a period >= 1".into());
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return bad(format!("lambda must be >= 0, got {}", self.lambda));
        }
        if self.batch_size == 0 || self.epochs == 0 {
            return bad("batch_size and epochs must be >= 1".into());
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad(format!("train_fraction must be in (0, 1), got {}", self.train_fraction));
        }
        self.curriculum.validate()?;
        self.augment.validate()?;
        self.network.validate()?;
        let smallest = self.curriculum.stages.iter().map(|s| s.crop_size).min().unwrap_or(0);
        if let Some(&l) = self.network.spp_levels.iter().max() {
            if l > smallest / 16 {
                return bad(format!(
                    "crop size {smallest} leaves a {}x{0} classifier map, smaller than pyramid level {l}",
                    smallest / 16
                ));
            }
        }
        if let Some(c) = &self.clahe {
            if c.tiles[0] == 0 || c.tiles[1] == 0 || !(c.clip_limit > 0.0) {
                return bad("clahe needs positive tiles and clip_limit".into());
            }
        }
        Ok(())
    }
}

/// `lr0 * factor^floor(epoch / period)`.
pub fn lr_at(cfg: &TrainConfig, epoch: usize) -> f64 {
    cfg.lr0 * cfg.lr_decay_factor.powi((epoch / cfg.lr_decay_every) as i32)
}

/// Mean over pixels and batch of `-log softmax(true class)`.
pub fn segmentation_loss<T: Scalar>(logits: &Feat<T>, masks: &[u8]) -> Result<f64> {
    Ok(segmentation_loss_grad(logits, masks)?.0)
}

/// Segmentation loss and its gradient w.r.t. the logits.
pub fn segmentation_loss_grad<T: Scalar>(logits: &Feat<T>, masks: &[u8]) -> Result<(f64, Feat<T>)> {
    let plane = logits.plane();
    if masks.len() != plane {
        return Err(Error::Shape(format!(
            "mask has {} pixels, logits cover {} ({}x{}x{})",
            masks.len(),
            plane,
            logits.n,
            logits.h,
            logits.w
        )));
    }
    if let Some(&m) = masks.iter().find(|&&m| m as usize >= logits.c) {
        return Err(Error::Shape(format!("mask label {m} has no logit channel")));
    }
    let mut grad = Feat::zeros(logits.c, logits.n, logits.h, logits.w);
    let inv = 1.0 / plane as f64;
    let mut total = 0.0;
    let mut p = vec![0f64; logits.c];
    for i in 0..plane {
        let max = (0..logits.c)
            .map(|c| Scalar::to_f64(logits.data[c * plane + i]))
            .fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0.0;
        for (c, pc) in p.iter_mut().enumerate() {
            *pc = (Scalar::to_f64(logits.data[c * plane + i]) - max).exp();
            denom += *pc;
        }
        let t = masks[i] as usize;
        total += denom.ln() - (Scalar::to_f64(logits.data[t * plane + i]) - max);
        for (c, pc) in p.iter().enumerate() {
            let onehot = if c == t { 1.0 } else { 0.0 };
            grad.data[c * plane + i] = T::of((pc / denom - onehot) * inv);
        }
    }
    Ok((total * inv, grad))
}

/// Stable binary cross-entropy of one logit.
pub fn bce_with_logit(z: f64, y: f64) -> f64 {
    z.max(0.0) - z * y + (-z.abs()).exp().ln_1p()
}

/// Mean sigmoid cross-entropy over the batch.
pub fn classification_loss<T: Scalar>(logits: &[T], labels: &[u8]) -> Result<f64> {
    Ok(classification_loss_grad(logits, labels)?.0)
}

pub fn classification_loss_grad<T: Scalar>(logits: &[T], labels: &[u8]) -> Result<(f64, Vec<T>)> {
    if logits.len() != labels.len() || logits.is_empty() {
        return Err(Error::Shape(format!(
            "{} class logits for {} labels",
            logits.len(),
            labels.len()
        )));
    }
    let n = logits.len() as f64;
    let mut total = 0.0;
    let mut grad = Vec::with_capacity(logits.len());
    for (&z, &y) in logits.iter().zip(labels) {
        if y > 1 {
            return Err(Error::Shape(format!("class label must be 0 or 1, got {y}")));
        }
        let (z, y) = (Scalar::to_f64(z), y as f64);
        total += bce_with_logit(z, y);
        let s = if z >= 0.0 {
            1.0 / (1.0 + (-z).exp())
        } else {
            z.exp() / (1.0 + z.exp())
        };
        grad.push(T::of((s - y) / n));
    }
    Ok((total / n, grad))
}

/// `L_S + lambda * L_C`.
pub fn total_loss(ls: f64, lc: f64, lambda: f64) -> f64 {
    ls + lambda * lc
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState<T> {
    /// One buffer per parameter tensor, same length as its data.
    pub velocity: Vec<Vec<T>>,
    pub epoch: usize,
    pub lr: f64,
}

impl<T: Scalar> OptimizerState<T> {
    pub fn new(params: &ParameterSet<T>, cfg: &TrainConfig) -> Self {
        OptimizerState {
            velocity: params.zeros_like(),
            epoch: 0,
            lr: lr_at(cfg, 0),
        }
    }

    pub fn set_epoch(&mut self, epoch: usize, cfg: &TrainConfig) {
        self.epoch = epoch;
        self.lr = lr_at(cfg, epoch);
    }
}

/// `g = grad + wd*w` (weights only), `v = momentum*v + g`, `w -= lr*v`.
/// Nothing is modified if any gradient is non-finite.
pub fn sgd_step<T: Scalar>(
    params: &mut ParameterSet<T>,
    grads: &Gradients<T>,
    opt: &mut OptimizerState<T>,
    cfg: &TrainConfig,
) -> Result<()> {
    if grads.len() != params.tensors.len() || opt.velocity.len() != params.tensors.len() {
        return Err(Error::Training("gradient/velocity buffers do not match parameters".into()));
    }
    for (t, g) in params.tensors.iter().zip(grads) {
        if g.len() != t.data.len() {
            return Err(Error::Training(format!("gradient for `{}` has the wrong length", t.name)));
        }
        if g.iter().any(|v| !v.is_finite()) {
            return Err(Error::Training(format!("non-finite gradient for `{}`", t.name)));
        }
    }
    let lr = T::of(opt.lr);
    let mom = T::of(cfg.momentum);
    let wd = T::of(cfg.weight_decay);
    for ((t, g), v) in params.tensors.iter_mut().zip(grads).zip(opt.velocity.iter_mut()) {
        if !t.kind.trainable() {
            continue;
        }
        let decays = t.kind.decays();
        for ((w, &gi), vi) in t.data.iter_mut().zip(g).zip(v.iter_mut()) {
            let step = if decays { gi + wd * *w } else { gi };
            *vi = mom * *vi + step;
            *w = *w - lr * *vi;
        }
    }
    Ok(())
}

/// Shuffles case indices with `seed`; the first `ceil(fraction * n)`
/// (at most `n - 1`) train, the rest validate.
pub fn split_indices(n: usize, fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    if n < 2 {
        return Err(Error::Config(format!("a train/validation split needs at least 2 cases, got {n}")));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[seed, streams::SPLIT])));
    let n_train = ((fraction * n as f64).ceil() as usize).clamp(1, n - 1);
    let val = idx.split_off(n_train);
    Ok((idx, val))
}

pub fn split_cases(cases: &[CaseRecord], fraction: f64, seed: u64) -> Result<(Vec<CaseRecord>, Vec<CaseRecord>)> {
    let (t, v) = split_indices(cases.len(), fraction, seed)?;
    Ok((
        t.iter().map(|&i| cases[i].clone()).collect(),
        v.iter().map(|&i| cases[i].clone()).collect(),
    ))
}

/// `n` draws with replacement from `0..n`.
pub fn bootstrap_resample<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<usize> {
    (0..n).map(|_| rng.gen_range(0..n)).collect()
}

mod streams {
    pub const SPLIT: u64 = 1;
    pub const INIT: u64 = 2;
    pub const SHUFFLE: u64 = 3;
    pub const AUGMENT: u64 = 4;
    pub const DROPOUT: u64 = 5;
    pub const BOOTSTRAP: u64 = 6;
    pub const MODEL: u64 = 7;
}

/// Mixes a path of integers into one seed (splitmix64 finalizer per step).
pub fn derive_seed(parts: &[u64]) -> u64 {
    let mut h: u64 = 0x243f_6a88_85a3_08d3;
    for &p in parts {
        h ^= p;
        h = h.wrapping_add(0x9e37_79b9_7f4a_7c15);
        let mut z = h;
        z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
        h = z ^ (z >> 31);
    }
    h
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub lr: f64,
    pub crop_size: usize,
    #[serde(rename = "train_L")]
    pub train_l: f64,
    #[serde(rename = "train_L_S")]
    pub train_l_s: f64,
    #[serde(rename = "train_L_C")]
    pub train_l_c: f64,
    pub val_dice: f64,
    /// Case-level pre/post accuracy on the validation split.
    pub val_accuracy: f64,
}

/// Runtime options that do not change the result.
#[derive(Debug, Clone)]
pub struct TrainOptions {
    pub out_dir: PathBuf,
    /// Continue from `last.ckpt` in `out_dir`.
    pub resume: bool,
    /// Stop after this many completed epochs (simulated interruption).
    pub halt_after: Option<usize>,
    /// Threads preparing augmented batches.
    pub workers: usize,
    pub verbose: bool,
}

impl TrainOptions {
    pub fn new(out_dir: impl Into<PathBuf>) -> Self {
        TrainOptions {
            out_dir: out_dir.into(),
            resume: false,
            halt_after: None,
            workers: 1,
            verbose: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub out_dir: PathBuf,
    pub log: Vec<EpochRecord>,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
    /// False when stopped early by `halt_after`.
    pub completed: bool,
    pub best_val_dice: f64,
}

impl TrainOutcome {
    pub fn final_checkpoint(&self) -> PathBuf {
        self.out_dir.join(FINAL_CHECKPOINT)
    }
    pub fn best_checkpoint(&self) -> PathBuf {
        self.out_dir.join(BEST_CHECKPOINT)
    }
}

struct ValCase {
    volume: Volume3D,
    mask: LabelVolume,
    ablation: Ablation,
}

fn require_labels(cases: &[CaseRecord]) -> Result<()> {
    for c in cases {
        if c.mask.is_none() || c.ablation.is_none() {
            return Err(Error::Config(format!(
                "case `{}` lacks a mask or ablation label; every training case needs both",
                c.case_id
            )));
        }
    }
    Ok(())
}

fn load_training_slices(cases: &[CaseRecord], clahe: Option<&ClaheOptions>) -> Result<Vec<Slice2D>> {
    let mut out = Vec::new();
    for c in cases {
        let vol = load_volume(&c.volume)?;
        let mask = load_labels(c.mask.as_ref().expect("checked"))?;
        for s in extract_slices(c, &vol, Some(&mask))? {
            out.push(prepare_slice(&s, clahe)?);
        }
    }
    Ok(out)
}

fn load_val_cases(cases: &[CaseRecord]) -> Result<Vec<ValCase>> {
    cases
        .iter()
        .map(|c| {
            Ok(ValCase {
                volume: load_volume(&c.volume)?,
                mask: load_labels(c.mask.as_ref().expect("checked"))?,
                ablation: c.ablation.expect("checked"),
            })
        })
        .collect()
}

fn make_sample(s: &Slice2D, cfg: &TrainConfig, crop: usize, seed: u64) -> Result<Slice2D> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    center_crop_or_mirror_pad(&random_augment(s, &cfg.augment, &mut rng), crop)
}

fn make_batch(
    slices: &[Slice2D],
    idx: &[usize],
    cfg: &TrainConfig,
    epoch: usize,
    crop: usize,
    workers: usize,
) -> Result<Vec<Slice2D>> {
    let seed_for = |i: usize| derive_seed(&[cfg.seed, streams::AUGMENT, cfg.augment.seed, epoch as u64, i as u64]);
    if workers <= 1 || idx.len() < 2 {
        return idx.iter().map(|&i| make_sample(&slices[i], cfg, crop, seed_for(i))).collect();
    }
    let per = idx.len().div_ceil(workers);
    std::thread::scope(|scope| {
        let handles: Vec<_> = idx
            .chunks(per)
            .map(|part| {
                scope.spawn(move || {
                    part.iter()
                        .map(|&i| make_sample(&slices[i], cfg, crop, seed_for(i)))
                        .collect::<Result<Vec<_>>>()
                })
            })
            .collect();
        let mut out = Vec::with_capacity(idx.len());
        for h in handles {
            out.extend(h.join().map_err(|_| Error::Training("augmentation worker panicked".into()))??);
        }
        Ok(out)
    })
}

struct StepLosses {
    total: f64,
    seg: f64,
    cls: f64,
}

fn train_step(
    net: &UNet,
    params: &mut ParameterSet<f32>,
    opt: &mut OptimizerState<f32>,
    batch: &[Slice2D],
    cfg: &TrainConfig,
    dropout_seed: u64,
) -> Result<StepLosses> {
    let (h, w) = (batch[0].height, batch[0].width);
    let images: Vec<&[f32]> = batch.iter().map(|s| s.pixels.as_slice()).collect();
    let x = stack_batch::<f32>(&images, h, w)?;
    let mut masks = Vec::with_capacity(batch.len() * h * w);
    let mut labels = Vec::with_capacity(batch.len());
    for s in batch {
        masks.extend_from_slice(s.mask.as_ref().expect("training slices carry masks"));
        labels.push(s.ablation_label.expect("training slices carry labels"));
    }
    let (out, cache) = net.forward(params, &x, Mode::Train { dropout_seed })?;
    let (ls, d_seg) = segmentation_loss_grad(&out.seg_logits, &masks)?;
    let (lc, mut d_cls) = classification_loss_grad(&out.class_logits, &labels)?;
    let lam = cfg.lambda as f32;
    for d in d_cls.iter_mut() {
        *d *= lam;
    }
    let grads = net.backward(params, &cache, &d_seg, &d_cls);
    net.update_running_stats(params, &cache);
    sgd_step(params, &grads, opt, cfg)?;
    let total = total_loss(ls, lc, cfg.lambda);
    if !total.is_finite() {
        return Err(Error::Training(format!("loss became non-finite ({total})")));
    }
    Ok(StepLosses { total, seg: ls, cls: lc })
}

fn validate(net_params: &ParameterSet<f32>, clahe: Option<ClaheOptions>, val: &[ValCase]) -> Result<(f64, f64)> {
    let model = Model::new(net_params.clone(), clahe)?;
    let models = std::slice::from_ref(&model);
    let mut dice_sum = 0.0;
    let mut correct = 0usize;
    for c in val {
        let pred = predict_case(models, &c.volume)?;
        dice_sum += dice(&threshold_argmax(&pred.probability), &c.mask)?;
        correct += usize::from(pred.ablation() == c.ablation);
    }
    Ok((dice_sum / val.len() as f64, correct as f64 / val.len() as f64))
}

fn checkpoint_meta(cfg: &TrainConfig, val_dice: Option<f64>) -> Result<serde_json::Value> {
    Ok(serde_json::json!({
        "clahe": cfg.clahe,
        "train_config": serde_json::to_value(cfg)?,
        "val_dice": val_dice,
    }))
}

fn write_log(path: &Path, log: &[EpochRecord]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    for r in log {
        writeln!(f, "{}", serde_json::to_string(r)?).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn read_log(path: &Path) -> Result<Vec<EpochRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| serde_json::from_str(l).map_err(Error::from))
        .collect()
}

fn same_run(a: &TrainConfig, b: &TrainConfig) -> bool {
    // the epoch budget may be extended on resume
    TrainConfig { epochs: 0, ..a.clone() } == TrainConfig { epochs: 0, ..b.clone() }
}

/// Splits `cases`, then trains on the training part.
pub fn train_loop(cases: &[CaseRecord], cfg: &TrainConfig, opts: &TrainOptions) -> Result<TrainOutcome> {
    cfg.validate()?;
    require_labels(cases)?;
    let (train, val) = split_cases(cases, cfg.train_fraction, cfg.seed)?;
    train_on_split(&train, &val, cfg, opts)
}

/// Trains on `train` (duplicates allowed) and selects by Dice on `val`.
pub fn train_on_split(
    train: &[CaseRecord],
    val: &[CaseRecord],
    cfg: &TrainConfig,
    opts: &TrainOptions,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    require_labels(train)?;
    require_labels(val)?;
    if train.is_empty() || val.is_empty() {
        return Err(Error::Config("training and validation sets must be non-empty".into()));
    }
    let dir = &opts.out_dir;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let train_ids: Vec<String> = train.iter().map(|c| c.case_id.clone()).collect();
    let val_ids: Vec<String> = val.iter().map(|c| c.case_id.clone()).collect();
    let split_path = dir.join(SPLIT_FILE);
    fs::write(
        &split_path,
        serde_json::to_vec_pretty(&serde_json::json!({"train": train_ids, "val": val_ids}))?,
    )
    .map_err(|e| Error::io(&split_path, e))?;

    let slices = load_training_slices(train, cfg.clahe.as_ref())?;
    let val_cases = load_val_cases(val)?;
    if slices.is_empty() {
        return Err(Error::Config("training cases contain no slices".into()));
    }

    let net = UNet::new(&cfg.network)?;
    let mut params = init_parameters(&cfg.network, derive_seed(&[cfg.seed, streams::INIT]))?;
    let mut opt = OptimizerState::new(&params, cfg);
    let mut log = Vec::new();
    let mut start = 0;
    let log_path = dir.join(LOG_FILE);
    let last_path = dir.join(LAST_CHECKPOINT);

    if opts.resume {
        let ck = Checkpoint::load(&last_path)?;
        let stored: TrainConfig = ck
            .meta
            .get("train_config")
            .cloned()
            .map(serde_json::from_value)
            .transpose()?
            .ok_or_else(|| Error::Checkpoint("checkpoint carries no training config".into()))?;
        if !same_run(&stored, cfg) {
            return Err(Error::Config(
                "resume config differs from the interrupted run (only `epochs` may change)".into(),
            ));
        }
        net.check(&ck.params)?;
        start = ck.epoch;
        opt.velocity = ck
            .velocity
            .ok_or_else(|| Error::Checkpoint("last checkpoint has no optimizer state".into()))?;
        params = ck.params;
        log = read_log(&log_path)?;
        if log.len() < start {
            return Err(Error::Checkpoint(format!(
                "log has {} epochs but the checkpoint is at epoch {start}",
                log.len()
            )));
        }
        log.truncate(start);
    }
    let mut best = log.iter().map(|r| r.val_dice).fold(f64::NEG_INFINITY, f64::max);

    let mut completed = true;
    for epoch in start..cfg.epochs {
        opt.set_epoch(epoch, cfg);
        let crop = curriculum_size_for_epoch(&cfg.curriculum, epoch)?;
        let mut order: Vec<usize> = (0..slices.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, streams::SHUFFLE, epoch as u64])));
        let (mut sum_l, mut sum_s, mut sum_c) = (0.0, 0.0, 0.0);
        let mut n_batches = 0;
        for (b, idx) in order.chunks(cfg.batch_size).enumerate() {
            let batch = make_batch(&slices, idx, cfg, epoch, crop, opts.workers)?;
            let drop_seed = derive_seed(&[cfg.seed, streams::DROPOUT, epoch as u64, b as u64]);
            let l = train_step(&net, &mut params, &mut opt, &batch, cfg, drop_seed)?;
            sum_l += l.total;
            sum_s += l.seg;
            sum_c += l.cls;
            n_batches += 1;
        }
        let nb = n_batches as f64;
        let (val_dice, val_accuracy) = validate(&params, cfg.clahe, &val_cases)?;
        let rec = EpochRecord {
            epoch,
            lr: opt.lr,
            crop_size: crop,
            train_l: sum_l / nb,
            train_l_s: sum_s / nb,
            train_l_c: sum_c / nb,
            val_dice,
            val_accuracy,
        };
        if opts.verbose {
            eprintln!(
                "epoch {:>3}  lr {:.2e}  crop {}  L {:.4}  L_S {:.4}  L_C {:.4}  val dice {:.4}  val acc {:.2}",
                epoch, rec.lr, crop, rec.train_l, rec.train_l_s, rec.train_l_c, val_dice, val_accuracy
            );
        }
        log.push(rec);
        write_log(&log_path, &log)?;
        if val_dice > best {
            best = val_dice;
            let mut ck = Checkpoint::new(params.clone(), epoch + 1);
            ck.meta = checkpoint_meta(cfg, Some(val_dice))?;
            ck.save(&dir.join(BEST_CHECKPOINT))?;
        }
        let mut last = Checkpoint::new(params.clone(), epoch + 1);
        last.velocity = Some(opt.velocity.clone());
        last.meta = checkpoint_meta(cfg, Some(val_dice))?;
        last.save(&last_path)?;
        if opts.halt_after == Some(epoch + 1) && epoch + 1 < cfg.epochs {
            completed = false;
            break;
        }
    }
    if completed {
        let mut fin = Checkpoint::new(params, cfg.epochs);
        fin.meta = checkpoint_meta(cfg, log.last().map(|r| r.val_dice))?;
        fin.save(&dir.join(FINAL_CHECKPOINT))?;
    }
    Ok(TrainOutcome {
        out_dir: dir.clone(),
        log,
        train_ids,
        val_ids,
        completed,
        best_val_dice: best,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleRecord {
    pub model: usize,
    pub seed: u64,
    /// Drawn training cases in draw order, with repeats.
    pub case_ids: Vec<String>,
    pub unique_cases: usize,
}

/// Trains `n_models` networks, each on a bootstrap resample of the training
/// split, into `out_dir/model_<k>`. All models share the validation split.
pub fn train_bagging(
    cases: &[CaseRecord],
    cfg: &TrainConfig,
    n_models: usize,
    opts: &TrainOptions,
) -> Result<Vec<TrainOutcome>> {
    if n_models < 2 {
        return Err(Error::Config(format!("bagging needs at least 2 models, got {n_models}")));
    }
    cfg.validate()?;
    require_labels(cases)?;
    let (train, val) = split_cases(cases, cfg.train_fraction, cfg.seed)?;
    let mut out = Vec::with_capacity(n_models);
    for k in 0..n_models {
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(&[cfg.seed, streams::BOOTSTRAP, k as u64]));
        let draw = bootstrap_resample(train.len(), &mut rng);
        let resampled: Vec<CaseRecord> = draw.iter().map(|&i| train[i].clone()).collect();
        let model_cfg = TrainConfig {
            seed: derive_seed(&[cfg.seed, streams::MODEL, k as u64]),
            ..cfg.clone()
        };
        let model_opts = TrainOptions {
            out_dir: opts.out_dir.join(format!("model_{k}")),
            ..opts.clone()
        };
        fs::create_dir_all(&model_opts.out_dir).map_err(|e| Error::io(&model_opts.out_dir, e))?;
        let mut unique = draw.clone();
        unique.sort_unstable();
        unique.dedup();
        let record = ResampleRecord {
            model: k,
            seed: model_cfg.seed,
            case_ids: resampled.iter().map(|c| c.case_id.clone()).collect(),
            unique_cases: unique.len(),
        };
        let rpath = model_opts.out_dir.join(RESAMPLE_FILE);
        fs::write(&rpath, serde_json::to_vec_pretty(&record)?).map_err(|e| Error::io(&rpath, e))?;
        out.push(train_on_split(&resampled, &val, &model_cfg, &model_opts)?);
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::ParamKind;
    use proptest::prelude::*;
    use rand::Rng;

    #[test]
    fn analytic_losses() {
        let zeros = Feat::<f64>::zeros(2, 1, 4, 4);
        let ls = segmentation_loss(&zeros, &[1; 16]).unwrap();
        assert!((ls - std::f64::consts::LN_2).abs() < 1e-12);
        assert!((classification_loss(&[0.0f64], &[1]).unwrap() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(classification_loss(&[1e4f64], &[1]).unwrap().abs() < 1e-12);
        let want = 2.0 + (1.0 + (-2.0f64).exp()).ln();
        assert!((classification_loss(&[2.0f64], &[0]).unwrap() - want).abs() < 1e-12);
        assert!((want - 2.126928).abs() < 1e-6);
        assert_eq!(total_loss(0.7, 0.3, 1.0), 0.7 + 0.3);
        assert_eq!(total_loss(0.7, 0.3, 0.0), 0.7);
        assert_eq!(total_loss(1.0, 0.5, 2.0), 2.0);
        assert!(segmentation_loss(&zeros, &[0; 15]).is_err());
    }

    #[test]
    fn perfect_segmentation_has_zero_loss() {
        let mut f = Feat::<f64>::zeros(2, 1, 2, 2);
        let mask = [0u8, 1, 1, 0];
        for (i, &m) in mask.iter().enumerate() {
            f.data[(m as usize) * 4 + i] = 1e3;
        }
        assert!(segmentation_loss(&f, &mask).unwrap().abs() < 1e-12);
    }

    #[test]
    fn segmentation_loss_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let f = Feat::<f64> {
            data: (0..2 * 2 * 16).map(|_| rng.gen_range(-3.0..3.0)).collect(),
            ..Feat::zeros(2, 2, 4, 4)
        };
        let mask: Vec<u8> = (0..32).map(|_| rng.gen_range(0..2)).collect();
        let mut want = 0.0;
        for i in 0..32 {
            let (a, b) = (f.data[i], f.data[32 + i]);
            let p = if mask[i] == 1 { b.exp() / (a.exp() + b.exp()) } else { a.exp() / (a.exp() + b.exp()) };
            want -= p.ln();
        }
        want /= 32.0;
        assert!((segmentation_loss(&f, &mask).unwrap() - want).abs() < 1e-6);
    }

    #[test]
    fn loss_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let f = Feat::<f64> {
            data: (0..2 * 8).map(|_| rng.gen_range(-2.0..2.0)).collect(),
            ..Feat::zeros(2, 2, 2, 2)
        };
        let mask: Vec<u8> = (0..8).map(|_| rng.gen_range(0..2)).collect();
        let (_, g) = segmentation_loss_grad(&f, &mask).unwrap();
        for i in 0..f.data.len() {
            let (mut p, mut m) = (f.clone(), f.clone());
            p.data[i] += 1e-6;
            m.data[i] -= 1e-6;
            let num = (segmentation_loss(&p, &mask).unwrap() - segmentation_loss(&m, &mask).unwrap()) / 2e-6;
            assert!((num - g.data[i]).abs() < 1e-8);
        }
        let z = [0.3f64, -1.7, 4.0];
        let y = [1u8, 0, 0];
        let (_, g) = classification_loss_grad(&z, &y).unwrap();
        for i in 0..3 {
            let (mut p, mut m) = (z, z);
            p[i] += 1e-6;
            m[i] -= 1e-6;
            let num = (classification_loss(&p, &y).unwrap() - classification_loss(&m, &y).unwrap()) / 2e-6;
            assert!((num - g[i]).abs() < 1e-8);
        }
    }

    fn one_weight(v: f64) -> ParameterSet<f64> {
        let cfg = NetworkConfig::default();
        ParameterSet {
            config: cfg,
            tensors: vec![crate::network::ParamTensor {
                name: "w".into(),
                shape: vec![1],
                kind: ParamKind::Weight,
                data: vec![v],
            }],
        }
    }

    #[test]
    fn sgd_hand_example() {
        let cfg = TrainConfig::default();
        let mut p = one_weight(1.0);
        let mut opt = OptimizerState::new(&p, &cfg);
        sgd_step(&mut p, &vec![vec![1.0]], &mut opt, &cfg).unwrap();
        assert_eq!(opt.velocity[0][0], 1.0005);
        assert_eq!(p.tensors[0].data[0], 0.9989995);

        let still = TrainConfig { weight_decay: 0.0, ..cfg.clone() };
        let mut p = one_weight(0.25);
        let mut opt = OptimizerState::new(&p, &still);
        sgd_step(&mut p, &vec![vec![0.0]], &mut opt, &still).unwrap();
        assert_eq!(p.tensors[0].data[0], 0.25);

        let mut p = one_weight(1.0);
        let mut opt = OptimizerState::new(&p, &cfg);
        let err = sgd_step(&mut p, &vec![vec![f64::NAN]], &mut opt, &cfg).unwrap_err();
        assert!(err.to_string().contains("`w`"));
        assert_eq!(p.tensors[0].data[0], 1.0);
    }

    #[test]
    fn bias_and_bn_skip_weight_decay() {
        let cfg = TrainConfig::default();
        for kind in [ParamKind::Bias, ParamKind::BnScale, ParamKind::BnShift] {
            let mut p = one_weight(1.0);
            p.tensors[0].kind = kind;
            let mut opt = OptimizerState::new(&p, &cfg);
            sgd_step(&mut p, &vec![vec![0.0]], &mut opt, &cfg).unwrap();
            assert_eq!(p.tensors[0].data[0], 1.0);
        }
    }

    #[test]
    fn lr_schedule() {
        let cfg = TrainConfig::default();
        assert_eq!(lr_at(&cfg, 0), 0.001);
        assert_eq!(lr_at(&cfg, 49), 0.001);
        assert_eq!(lr_at(&cfg, 50), 0.0005);
        assert_eq!(lr_at(&cfg, 100), 0.00025);
    }

    #[test]
    fn splits() {
        let (t, v) = split_indices(100, 0.8, 1).unwrap();
        assert_eq!((t.len(), v.len()), (80, 20));
        let (t, v) = split_indices(5, 0.8, 1).unwrap();
        assert_eq!((t.len(), v.len()), (4, 1));
        assert_eq!(split_indices(2, 0.8, 1).unwrap().0.len(), 1);
        assert_eq!(split_indices(20, 0.8, 9).unwrap(), split_indices(20, 0.8, 9).unwrap());
        assert_ne!(split_indices(20, 0.8, 9).unwrap(), split_indices(20, 0.8, 10).unwrap());
        assert!(matches!(split_indices(0, 0.8, 1), Err(Error::Config(_))));
        let mut all = [t, v].concat();
        all.sort_unstable();
        assert_eq!(all, (0..5).collect::<Vec<_>>());
    }

    #[test]
    fn bootstrap_unique_fraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut total = 0.0;
        for _ in 0..1000 {
            let mut d = bootstrap_resample(100, &mut rng);
            d.sort_unstable();
            d.dedup();
            total += d.len() as f64 / 100.0;
        }
        let mean = total / 1000.0;
        assert!((0.55..=0.72).contains(&mean), "{mean}");
    }

    #[test]
    fn seeds_are_position_sensitive() {
        assert_ne!(derive_seed(&[1, 2]), derive_seed(&[2, 1]));
        assert_ne!(derive_seed(&[0]), derive_seed(&[0, 0]));
        assert_eq!(derive_seed(&[5, 6, 7]), derive_seed(&[5, 6, 7]));
    }

    #[test]
    fn config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { lr0: -1.0, ..Default::default() },
            TrainConfig { momentum: 1.0, ..Default::default() },
            TrainConfig { lambda: -0.1, ..Default::default() },
            TrainConfig { batch_size: 0, ..Default::default() },
            TrainConfig { train_fraction: 1.0, ..Default::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))));
        }
        let small_crop = TrainConfig {
            curriculum: CurriculumSchedule::single(32, 1),
            ..Default::default()
        };
        assert!(small_crop.validate().is_err());
    }

    fn tiny_batch(n: usize, seed: u64) -> Vec<Slice2D> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|k| {
                let mut px = vec![0f32; 64 * 64];
                let mut mask = vec![0u8; 64 * 64];
                let (cy, cx) = (rng.gen_range(20..44) as f32, rng.gen_range(20..44) as f32);
                for y in 0..64 {
                    for x in 0..64 {
                        let inside = (y as f32 - cy).powi(2) + (x as f32 - cx).powi(2) < 100.0;
                        px[y * 64 + x] = if inside { 1.0 } else { 0.0 } + rng.gen_range(-0.3..0.3);
                        mask[y * 64 + x] = u8::from(inside);
                    }
                }
                crate::preprocess::normalize_in_place(&mut px);
                let mut s = Slice2D::from_pixels(64, 64, px).unwrap().with_mask(mask).unwrap();
                s.ablation_label = Some((k % 2) as u8);
                s
            })
            .collect()
    }

    fn tiny_cfg(lambda: f64) -> TrainConfig {
        TrainConfig {
            lambda,
            network: NetworkConfig {
                base_width: 4,
                fc_hidden: 16,
                ..Default::default()
            },
            curriculum: CurriculumSchedule::single(64, 20),
            ..Default::default()
        }
    }

    #[test]
    fn loss_decreases_on_fixed_batch() {
        let cfg = tiny_cfg(1.0);
        let net = UNet::new(&cfg.network).unwrap();
        let mut p = init_parameters(&cfg.network, 1).unwrap();
        let mut opt = OptimizerState::new(&p, &cfg);
        let batch = tiny_batch(4, 2);
        let losses: Vec<f64> = (0..20)
            .map(|i| train_step(&net, &mut p, &mut opt, &batch, &cfg, i).unwrap().total)
            .collect();
        assert!(losses[19] < losses[0], "{losses:?}");
    }

    #[test]
    fn lambda_zero_leaves_classifier_gradients_zero() {
        let cfg = tiny_cfg(0.0);
        let net = UNet::new(&cfg.network).unwrap();
        let p = init_parameters(&cfg.network, 1).unwrap();
        let batch = tiny_batch(2, 3);
        let images: Vec<&[f32]> = batch.iter().map(|s| s.pixels.as_slice()).collect();
        let x = stack_batch::<f32>(&images, 64, 64).unwrap();
        let masks: Vec<u8> = batch.iter().flat_map(|s| s.mask.clone().unwrap()).collect();
        let (out, cache) = net.forward(&p, &x, Mode::Train { dropout_seed: 1 }).unwrap();
        let (_, d_seg) = segmentation_loss_grad(&out.seg_logits, &masks).unwrap();
        let (_, d_cls) = classification_loss_grad(&out.class_logits, &[0, 1]).unwrap();
        let zero: Vec<f32> = d_cls.iter().map(|d| d * 0.0).collect();
        let g0 = net.backward(&p, &cache, &d_seg, &zero);
        for id in net.classifier_ids() {
            assert!(g0[id].iter().all(|&v| v == 0.0));
        }
        let g1 = net.backward(&p, &cache, &d_seg, &d_cls);
        for id in net.classifier_ids() {
            assert!(g1[id].iter().any(|&v| v != 0.0));
        }
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn losses_non_negative(z in proptest::collection::vec(-50.0f64..50.0, 1..16), seed in any::<u64>()) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y: Vec<u8> = z.iter().map(|_| rng.gen_range(0..2)).collect();
            prop_assert!(classification_loss(&z, &y).unwrap() >= 0.0);
            let f = Feat::<f64> { data: z.iter().chain(z.iter().rev()).cloned().collect(), ..Feat::zeros(2, 1, 1, z.len()) };
            prop_assert!(segmentation_loss(&f, &y).unwrap() >= 0.0);
        }

        #[test]
        fn total_loss_linear_in_lambda(ls in 0.0f64..10.0, lc in 0.0f64..10.0, a in 0.0f64..5.0, b in 0.0f64..5.0) {
            let lhs = total_loss(ls, lc, a + b) - total_loss(ls, lc, a);
            prop_assert!((lhs - b * lc).abs() < 1e-9);
        }
    }
}
