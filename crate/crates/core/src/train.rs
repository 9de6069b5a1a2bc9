//! Contrastive pre-training, supervised fine-tuning and linear evaluation.
//!
//! All randomness is drawn from streams keyed by `(seed, domain, ...)`, so a
//! run is reproducible regardless of how many threads rayon uses.

use std::collections::{BTreeMap, BTreeSet};
use std::io::Write;
use std::path::Path;

use image::RgbImage;
use ndarray::{s, Array2, Axis};
use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{subsample_labels, ClassId, MagnifiedSample, SplitPlan};
use crate::error::{Error, Result};
use crate::eval::{aggregate, evaluate, image_level_accuracy, AggregateReport, EvalReport, PredictionRecord};
use crate::loss::{nt_xent_with_grad, ContrastiveBatch, LossConfig};
use crate::magnification::MagnificationFactor;
use crate::model::{
    build_optimizer, embedding_spread, head_dims_for, images_to_batch, softmax, softmax_cross_entropy,
    Checkpoint, ClassifierHead, EncoderAdapter, HeadState, MetricRecord, OptimizerKind, Params,
    ProjectionHead, RngState,
};
use crate::rng::{self, domain};
use crate::sampler::{default_ordered_lookup, sample_pair, PairStrategy, StrategyKind};
use crate::transforms::{apply_independent, apply_uniform, resize, sample_params, transform, AugmentationPolicy};

/// Embedding spread below this for [`COLLAPSE_EPOCHS`] epochs aborts pre-training.
pub const COLLAPSE_THRESHOLD: f64 = 1e-6;
pub const COLLAPSE_EPOCHS: usize = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub encoder: String,
    pub strategy: StrategyKind,
    /// Used by the fixed strategy only.
    pub fixed_pair: [MagnificationFactor; 2],
    pub epochs: usize,
    /// Specimens per batch; each contributes two views.
    pub batch_size: usize,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
    pub temperature: f64,
    pub exclude_positive: bool,
    pub input_size: usize,
    pub head_bias: bool,
    /// Projection-head widths; `None` uses the registered widths of the encoder.
    pub head_dims: Option<Vec<usize>>,
    /// One augmentation draw for both views; `false` draws per view.
    pub shared_transform: bool,
    /// Its `output_size` is replaced by `input_size`.
    pub augmentation: AugmentationPolicy,
    pub seed: u64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            encoder: "toy64".into(),
            strategy: StrategyKind::Ordered,
            fixed_pair: [MagnificationFactor::X200, MagnificationFactor::X400],
            epochs: 20,
            batch_size: 16,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
            temperature: 0.1,
            exclude_positive: false,
            input_size: 32,
            head_bias: true,
            head_dims: None,
            shared_transform: true,
            augmentation: AugmentationPolicy::pretrain(32),
            seed: 0,
        }
    }
}

impl PretrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs < 1 {
            return Err(Error::Config("pretrain.epochs must be at least 1".into()));
        }
        if self.batch_size < 2 {
            return Err(Error::Config("pretrain.batch_size must be at least 2".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("pretrain.learning_rate must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config("pretrain.temperature must be positive".into()));
        }
        self.pair_strategy()?;
        self.policy().validate()
    }

    pub fn pair_strategy(&self) -> Result<PairStrategy> {
        match self.strategy {
            StrategyKind::Fixed => PairStrategy::fixed(self.fixed_pair[0], self.fixed_pair[1]),
            StrategyKind::Ordered => PairStrategy::ordered(default_ordered_lookup()),
            StrategyKind::Random => Ok(PairStrategy::RandomPair),
        }
    }

    pub fn policy(&self) -> AugmentationPolicy {
        AugmentationPolicy {
            output_size: self.input_size as u32,
            ..self.augmentation.clone()
        }
    }

    pub fn loss(&self) -> LossConfig {
        LossConfig {
            temperature: self.temperature,
            exclude_positive: self.exclude_positive,
        }
    }
}

/// Handed to the per-epoch callback of [`pretrain_with`].
pub struct EpochEnd<'a> {
    pub epoch: usize,
    pub loss: f64,
    pub spread: f64,
    pub encoder: &'a EncoderAdapter,
    pub head: &'a ProjectionHead,
}

#[derive(Debug, Clone)]
pub struct PretrainRun {
    pub checkpoint: Checkpoint,
    /// Mean batch loss per epoch.
    pub loss_curve: Vec<f64>,
    /// Every specimen that appeared in a training batch.
    pub seen_specimens: BTreeSet<String>,
}

pub fn pretrain(cfg: &PretrainConfig, data: &[MagnifiedSample], encoder: EncoderAdapter) -> Result<PretrainRun> {
    pretrain_with(cfg, data, encoder, |_| Ok(()))
}

/// Gradients and loss of one contrastive step.
fn contrastive_step(
    encoder: &EncoderAdapter,
    head: &ProjectionHead,
    views: &[(RgbImage, RgbImage)],
    loss_cfg: &LossConfig,
) -> Result<(f64, f64, (crate::model::EncoderNet, ProjectionHead))> {
    let v1: Vec<&RgbImage> = views.iter().map(|v| &v.0).collect();
    let v2: Vec<&RgbImage> = views.iter().map(|v| &v.1).collect();
    let (h1, c1) = encoder.forward_train(&images_to_batch(&v1)?)?;
    let (h2, c2) = encoder.forward_train(&images_to_batch(&v2)?)?;
    let (z1, p1) = head.forward_train(&h1)?;
    let (z2, p2) = head.forward_train(&h2)?;
    let n = z1.nrows();
    let batch = ContrastiveBatch::from_views(&z1, &z2, loss_cfg.temperature)?.with_config(loss_cfg)?;
    let spread = embedding_spread(&batch.z);
    let (loss, dz) = nt_xent_with_grad(&batch)?;
    let (mut g_head, dh1) = head.backward(&p1, &dz.slice(s![..n, ..]).to_owned());
    let (g_head2, dh2) = head.backward(&p2, &dz.slice(s![n.., ..]).to_owned());
    g_head.accumulate(&g_head2);
    let mut g_enc = encoder.backward(&c1, &dh1);
    g_enc.accumulate(&encoder.backward(&c2, &dh2));
    Ok((loss, spread, (g_enc, g_head)))
}

/// Pre-training with a callback after every epoch (logging, periodic
/// checkpoints). Never reads labels.
pub fn pretrain_with<F>(
    cfg: &PretrainConfig,
    data: &[MagnifiedSample],
    encoder: EncoderAdapter,
    mut on_epoch: F,
) -> Result<PretrainRun>
where
    F: FnMut(&EpochEnd) -> Result<()>,
{
    cfg.validate()?;
    if data.len() < 2 {
        return Err(Error::Config(format!(
            "pre-training needs at least 2 specimens, got {}",
            data.len()
        )));
    }
    if let Some(s) = data.iter().find(|s| !s.is_complete()) {
        return Err(Error::IncompleteSample(s.specimen_id.clone()));
    }
    if encoder.input_size() != cfg.input_size {
        return Err(Error::Config(format!(
            "encoder expects {} px input but pretrain.input_size is {}",
            encoder.input_size(),
            cfg.input_size
        )));
    }
    let strategy = cfg.pair_strategy()?;
    let policy = cfg.policy();
    let loss_cfg = cfg.loss();
    let dims = match &cfg.head_dims {
        Some(d) => d.clone(),
        None => head_dims_for(&encoder.name)?,
    };
    let mut init = rng::stream(cfg.seed, &[domain::INIT, 1]);
    let head = ProjectionHead::from_dims(encoder.feature_dim(), &dims, cfg.head_bias, &mut init)?;
    let mut model = (encoder, head);
    let mut opt = build_optimizer(cfg.optimizer, cfg.learning_rate);

    let mut loss_curve = Vec::with_capacity(cfg.epochs);
    let mut metrics = Vec::with_capacity(cfg.epochs);
    let mut seen = BTreeSet::new();
    let mut low_spread = 0;
    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(cfg.seed, &[domain::PRETRAIN, epoch as u64]);
        let mut order: Vec<usize> = (0..data.len()).collect();
        order.shuffle(&mut r);
        let (mut loss_sum, mut spread_sum, mut batches) = (0.0, 0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            if chunk.len() < 2 {
                continue;
            }
            // draws stay sequential; only the pixel work runs in parallel
            let jobs = chunk
                .iter()
                .map(|&i| {
                    let pair = sample_pair(&strategy, &data[i], &mut r)?;
                    let params = sample_params(&policy, pair.view1.dimensions(), &mut r);
                    let second = (!cfg.shared_transform).then(|| sample_params(&policy, pair.view2.dimensions(), &mut r));
                    Ok((pair, (params, second)))
                })
                .collect::<Result<Vec<_>>>()?;
            seen.extend(jobs.iter().map(|(p, _)| p.specimen_id.clone()));
            let views = jobs
                .par_iter()
                .map(|(pair, (params, second))| {
                    let t = match second {
                        Some(p2) => apply_independent(params, p2, pair)?,
                        None => apply_uniform(params, pair)?,
                    };
                    Ok(((*t.view1).clone(), (*t.view2).clone()))
                })
                .collect::<Result<Vec<_>>>()?;
            let (loss, spread, grads) = contrastive_step(&model.0, &model.1, &views, &loss_cfg)?;
            opt.step(&mut model, &grads);
            loss_sum += loss;
            spread_sum += spread;
            batches += 1;
        }
        let loss = loss_sum / batches.max(1) as f64;
        let spread = spread_sum / batches.max(1) as f64;
        log::info!("pretrain epoch {epoch}: loss {loss:.6} spread {spread:.3e}");
        loss_curve.push(loss);
        metrics.push(MetricRecord {
            epoch,
            split: "pretrain".into(),
            loss: Some(loss),
            ila: None,
            pla: None,
        });
        low_spread = if spread < COLLAPSE_THRESHOLD { low_spread + 1 } else { 0 };
        if low_spread >= COLLAPSE_EPOCHS {
            return Err(Error::CollapseDetected {
                std: spread,
                epochs: low_spread,
            });
        }
        on_epoch(&EpochEnd {
            epoch,
            loss,
            spread,
            encoder: &model.0,
            head: &model.1,
        })?;
    }

    let (encoder, head) = model;
    let mut checkpoint = Checkpoint::new(encoder, HeadState::Projection(head));
    checkpoint.config = serde_json::json!({
        "stage": "pretrain",
        "pretrain": cfg,
        "loss": {
            "temperature": cfg.temperature,
            "exclude_positive": cfg.exclude_positive,
            "reduction": "mean over all 2N anchors",
        },
    });
    checkpoint.epoch = cfg.epochs;
    checkpoint.rng = RngState {
        seed: cfg.seed,
        next_epoch: cfg.epochs as u64,
    };
    checkpoint.metrics = metrics;
    Ok(PretrainRun {
        checkpoint,
        loss_curve,
        seen_specimens: seen,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FinetuneMode {
    /// Encoder and classifier both train.
    Full,
    /// Encoder frozen; only the classifier trains.
    Linear,
}

impl std::str::FromStr for FinetuneMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "full" => Ok(FinetuneMode::Full),
            "linear" => Ok(FinetuneMode::Linear),
            other => Err(Error::Config(format!("unknown fine-tune mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FinetuneConfig {
    pub mode: FinetuneMode,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub input_size: usize,
    pub dropout: f64,
    pub label_fraction: f64,
    pub epochs: usize,
    /// Stop after this many epochs without a validation improvement; 0 disables.
    pub patience: usize,
    /// Random crop, flips, affine and colour jitter in full mode.
    pub augment: bool,
    pub train_magnifications: Vec<MagnificationFactor>,
    pub eval_magnifications: Vec<MagnificationFactor>,
    pub seed: u64,
}

impl Default for FinetuneConfig {
    fn default() -> Self {
        Self {
            mode: FinetuneMode::Full,
            learning_rate: 1e-3,
            batch_size: 32,
            input_size: 32,
            dropout: 0.3,
            label_fraction: 1.0,
            epochs: 30,
            patience: 10,
            augment: true,
            train_magnifications: MagnificationFactor::ALL.to_vec(),
            eval_magnifications: MagnificationFactor::ALL.to_vec(),
            seed: 0,
        }
    }
}

impl FinetuneConfig {
    pub fn linear() -> Self {
        Self {
            mode: FinetuneMode::Linear,
            learning_rate: 1e-2,
            epochs: 100,
            patience: 30,
            augment: false,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.label_fraction > 0.0 && self.label_fraction <= 1.0) {
            return Err(Error::FractionOutOfRange(self.label_fraction));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout must lie in [0, 1), got {}", self.dropout)));
        }
        if self.epochs < 1 || self.batch_size < 1 {
            return Err(Error::Config("finetune epochs and batch_size must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("finetune.learning_rate must be positive".into()));
        }
        if self.train_magnifications.is_empty() || self.eval_magnifications.is_empty() {
            return Err(Error::Config("at least one magnification is needed for training and evaluation".into()));
        }
        Ok(())
    }
}

/// Specimen ids for one fold: the test fold, the next fold for validation,
/// the remaining folds for training, and the labeled part of those.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldSplit {
    pub fold: usize,
    pub validation_fold: usize,
    pub test: BTreeSet<String>,
    pub validation: BTreeSet<String>,
    pub train: BTreeSet<String>,
    pub labeled: BTreeSet<String>,
}

pub fn fold_split(plan: &SplitPlan, fold: usize, label_fraction: f64) -> Result<FoldSplit> {
    if plan.k < 3 {
        return Err(Error::Config(format!(
            "fine-tuning needs at least 3 folds (test, validation, train), plan has {}",
            plan.k
        )));
    }
    if fold >= plan.k {
        return Err(Error::Config(format!("fold {fold} out of range for k = {}", plan.k)));
    }
    if !plan.has_fraction(label_fraction) {
        return Err(Error::EmptyLabelSubset(format!(
            "fraction {label_fraction} is not materialised in the split plan"
        )));
    }
    let validation_fold = (fold + 1) % plan.k;
    let train_folds: BTreeSet<usize> = (0..plan.k).filter(|&f| f != fold && f != validation_fold).collect();
    let train = plan.members_of(&train_folds);
    let labeled = subsample_labels(plan, &train_folds, label_fraction, plan.seed)?;
    if labeled.is_empty() {
        return Err(Error::EmptyLabelSubset(format!("fold {fold}, fraction {label_fraction}")));
    }
    Ok(FoldSplit {
        fold,
        validation_fold,
        test: plan.fold_members(fold),
        validation: plan.fold_members(validation_fold),
        train,
        labeled,
    })
}

/// Owned copies (images are shared) of the samples whose ids are in `ids`.
pub fn select(data: &[MagnifiedSample], ids: &BTreeSet<String>) -> Vec<MagnifiedSample> {
    data.iter().filter(|s| ids.contains(&s.specimen_id)).cloned().collect()
}

/// One classification example: a specimen imaged at one magnification.
#[derive(Clone)]
struct Item<'a> {
    sample: &'a MagnifiedSample,
    mf: MagnificationFactor,
    label: ClassId,
}

fn items<'a>(
    data: &'a [MagnifiedSample],
    ids: &BTreeSet<String>,
    mfs: &[MagnificationFactor],
) -> Result<Vec<Item<'a>>> {
    let mut out = Vec::new();
    for s in data.iter().filter(|s| ids.contains(&s.specimen_id)) {
        let label = s.label();
        for &mf in mfs {
            if s.image(mf).is_none() {
                return Err(Error::IncompleteSample(s.specimen_id.clone()));
            }
            out.push(Item { sample: s, mf, label });
        }
    }
    Ok(out)
}

fn resized(items: &[Item], size: usize) -> Vec<RgbImage> {
    items
        .par_iter()
        .map(|it| resize(it.sample.image(it.mf).expect("checked"), size as u32))
        .collect()
}

/// Eval-mode features, encoded in chunks to bound memory.
pub fn encode_all(encoder: &EncoderAdapter, images: &[RgbImage]) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((images.len(), encoder.feature_dim()));
    for (c, chunk) in images.chunks(64).enumerate() {
        let refs: Vec<&RgbImage> = chunk.iter().collect();
        let h = encoder.encode_images(&refs)?;
        out.slice_mut(s![c * 64..c * 64 + chunk.len(), ..]).assign(&h);
    }
    Ok(out)
}

fn predictions(items: &[Item], probs: &Array2<f64>) -> Vec<PredictionRecord> {
    items
        .iter()
        .zip(probs.rows())
        .map(|(it, p)| {
            PredictionRecord::new(
                it.sample.specimen_id.clone(),
                it.sample.patient_id.clone(),
                it.mf,
                None,
                it.label,
                p.to_vec(),
            )
        })
        .collect()
}

/// Eval-mode predictions of `encoder` + `head` for the specimens in `ids`,
/// one record per (specimen, magnification).
pub fn predict(
    encoder: &EncoderAdapter,
    head: &ClassifierHead,
    data: &[MagnifiedSample],
    ids: &BTreeSet<String>,
    magnifications: &[MagnificationFactor],
) -> Result<Vec<PredictionRecord>> {
    let its = items(data, ids, magnifications)?;
    let images = resized(&its, encoder.input_size());
    let probs = softmax(&head.logits(&encode_all(encoder, &images)?)?);
    Ok(predictions(&its, &probs))
}

#[derive(Debug, Clone)]
pub struct FinetuneRun {
    pub checkpoint: Checkpoint,
    pub report: EvalReport,
    pub predictions: Vec<PredictionRecord>,
    pub history: Vec<MetricRecord>,
    /// Epoch whose weights were kept (best validation ILA).
    pub best_epoch: usize,
    pub trained_specimens: BTreeSet<String>,
    pub split: FoldSplit,
}

fn n_classes(data: &[MagnifiedSample]) -> usize {
    data.iter().map(|s| s.label() + 1).max().unwrap_or(2).max(2)
}

/// Fine-tunes (or linearly evaluates) `init` on one fold and reports on its
/// test fold. Weights are selected by validation ILA.
pub fn finetune(
    cfg: &FinetuneConfig,
    init: &EncoderAdapter,
    plan: &SplitPlan,
    fold: usize,
    data: &[MagnifiedSample],
) -> Result<FinetuneRun> {
    cfg.validate()?;
    if init.input_size() != cfg.input_size {
        return Err(Error::Config(format!(
            "encoder expects {} px input but finetune.input_size is {}",
            init.input_size(),
            cfg.input_size
        )));
    }
    let split = fold_split(plan, fold, cfg.label_fraction)?;
    let classes = n_classes(data);
    let train_items = items(data, &split.labeled, &cfg.train_magnifications)?;
    if train_items.is_empty() {
        return Err(Error::EmptyLabelSubset(format!(
            "no labeled images of fold {fold} are present in the data"
        )));
    }
    let val_items = items(data, &split.validation, &cfg.eval_magnifications)?;
    let test_items = items(data, &split.test, &cfg.eval_magnifications)?;
    let val_images = resized(&val_items, cfg.input_size);
    let test_images = resized(&test_items, cfg.input_size);
    let mut init_rng = rng::stream(cfg.seed, &[domain::INIT, 2, fold as u64]);
    let head = ClassifierHead::new(init.feature_dim(), classes, cfg.dropout, &mut init_rng);

    let labels: Vec<ClassId> = train_items.iter().map(|i| i.label).collect();
    let val_labels: Vec<ClassId> = val_items.iter().map(|i| i.label).collect();
    let val_accuracy = |probs: &Array2<f64>| -> f64 {
        if val_items.is_empty() {
            return 0.0;
        }
        image_level_accuracy(&predictions(&val_items, probs)).unwrap_or(0.0)
    };
    let mut history = Vec::new();
    let mut trained = BTreeSet::new();
    let mut best: Option<(f64, usize, EncoderAdapter, ClassifierHead)> = None;
    let mut opt = build_optimizer(OptimizerKind::Adam, cfg.learning_rate);

    // linear mode works on cached features; the encoder is never touched
    let frozen = if cfg.mode == FinetuneMode::Linear {
        let train_images = resized(&train_items, cfg.input_size);
        Some((encode_all(init, &train_images)?, encode_all(init, &val_images)?))
    } else {
        None
    };
    let mut encoder = init.clone();
    let mut head = head;
    let policy = AugmentationPolicy::finetune(cfg.input_size as u32);

    for epoch in 0..cfg.epochs {
        let mut r = rng::stream(cfg.seed, &[domain::FINETUNE, fold as u64, epoch as u64]);
        let mut order: Vec<usize> = (0..train_items.len()).collect();
        order.shuffle(&mut r);
        let (mut loss_sum, mut batches) = (0.0, 0);
        for chunk in order.chunks(cfg.batch_size) {
            let y: Vec<ClassId> = chunk.iter().map(|&i| labels[i]).collect();
            trained.extend(chunk.iter().map(|&i| train_items[i].sample.specimen_id.clone()));
            let loss = match &frozen {
                Some((feats, _)) => {
                    let h = feats.select(Axis(0), chunk);
                    let (logits, mask) = head.forward_train(&h, &mut r)?;
                    let (loss, dlogits) = softmax_cross_entropy(&logits, &y);
                    let (g, _) = head.backward(&h, &mask, &dlogits);
                    opt.step(&mut head, &g);
                    loss
                }
                None => {
                    let params: Vec<_> = chunk
                        .iter()
                        .map(|&i| {
                            let img = train_items[i].sample.image(train_items[i].mf).expect("checked");
                            cfg.augment.then(|| sample_params(&policy, img.dimensions(), &mut r))
                        })
                        .collect();
                    let imgs = chunk
                        .par_iter()
                        .zip(&params)
                        .map(|(&i, p)| {
                            let img = train_items[i].sample.image(train_items[i].mf).expect("checked");
                            match p {
                                Some(p) => transform(p, img),
                                None => Ok(resize(img, cfg.input_size as u32)),
                            }
                        })
                        .collect::<Result<Vec<_>>>()?;
                    let refs: Vec<&RgbImage> = imgs.iter().collect();
                    let (h, cache) = encoder.forward_train(&images_to_batch(&refs)?)?;
                    let (logits, mask) = head.forward_train(&h, &mut r)?;
                    let (loss, dlogits) = softmax_cross_entropy(&logits, &y);
                    let (g_head, dh) = head.backward(&h, &mask, &dlogits);
                    let g_enc = encoder.backward(&cache, &dh);
                    opt.step(&mut (&mut encoder, &mut head), &(g_enc, g_head));
                    loss
                }
            };
            loss_sum += loss;
            batches += 1;
        }
        let val_feats = match &frozen {
            Some((_, v)) => v.clone(),
            None => encode_all(&encoder, &val_images)?,
        };
        let val_probs = softmax(&head.logits(&val_feats)?);
        let val_ila = val_accuracy(&val_probs);
        let val_pla = if val_items.is_empty() {
            None
        } else {
            crate::eval::patient_level_accuracy(&predictions(&val_items, &val_probs)).ok()
        };
        let train_loss = loss_sum / batches.max(1) as f64;
        log::info!("finetune fold {fold} epoch {epoch}: loss {train_loss:.5} val ila {val_ila:.4}");
        history.push(MetricRecord {
            epoch,
            split: "train".into(),
            loss: Some(train_loss),
            ila: None,
            pla: None,
        });
        history.push(MetricRecord {
            epoch,
            split: "val".into(),
            loss: Some(softmax_cross_entropy(&head.logits(&val_feats)?, &val_labels).0)
                .filter(|_| !val_items.is_empty()),
            ila: Some(val_ila),
            pla: val_pla,
        });
        let improved = best.as_ref().is_none_or(|b| val_ila > b.0);
        if improved {
            let kept_encoder = if frozen.is_some() { None } else { Some(encoder.clone()) };
            best = Some((
                val_ila,
                epoch,
                kept_encoder.unwrap_or_else(|| init.clone()),
                head.clone(),
            ));
        } else if cfg.patience > 0 && epoch - best.as_ref().map_or(0, |b| b.1) >= cfg.patience {
            break;
        }
    }

    let (_, best_epoch, encoder, head) = best.expect("at least one epoch");
    let test_probs = softmax(&head.logits(&encode_all(&encoder, &test_images)?)?);
    let preds = predictions(&test_items, &test_probs);
    let report = evaluate(&preds, fold)?;
    history.push(MetricRecord {
        epoch: best_epoch,
        split: "test".into(),
        loss: None,
        ila: Some(report.ila),
        pla: Some(report.pla),
    });
    let mut checkpoint = Checkpoint::new(encoder, HeadState::Classifier(head));
    checkpoint.config = serde_json::json!({
        "stage": match cfg.mode { FinetuneMode::Full => "finetune", FinetuneMode::Linear => "lineval" },
        "finetune": cfg,
        "fold": fold,
        "validation_fold": split.validation_fold,
        "labeled_specimens": split.labeled.len(),
    });
    checkpoint.epoch = best_epoch + 1;
    checkpoint.rng = RngState {
        seed: cfg.seed,
        next_epoch: best_epoch as u64 + 1,
    };
    checkpoint.metrics = history.clone();
    Ok(FinetuneRun {
        checkpoint,
        report,
        predictions: preds,
        history,
        best_epoch,
        trained_specimens: trained,
        split,
    })
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CrossValidation {
    pub reports: Vec<EvalReport>,
    pub aggregate: AggregateReport,
}

/// One independent fine-tune and evaluation per fold.
pub fn cross_validate(
    cfg: &FinetuneConfig,
    init: &EncoderAdapter,
    plan: &SplitPlan,
    data: &[MagnifiedSample],
) -> Result<CrossValidation> {
    let reports = (0..plan.k)
        .map(|fold| Ok(finetune(cfg, init, plan, fold, data)?.report))
        .collect::<Result<Vec<_>>>()?;
    let aggregate = aggregate(&reports)?;
    Ok(CrossValidation { reports, aggregate })
}

/// Append-only JSON-lines metric log.
pub struct MetricLog {
    file: std::fs::File,
}

impl MetricLog {
    pub fn create(path: &Path) -> Result<Self> {
        let file = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { file })
    }

    pub fn append(&mut self, record: &MetricRecord) -> Result<()> {
        let mut line = serde_json::to_vec(record)?;
        line.push(b'\n');
        self.file.write_all(&line)?;
        Ok(())
    }
}

pub fn read_metric_log(path: &Path) -> Result<Vec<MetricRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

/// Per-class mean of a metric keyed by specimen, handy for reports.
pub fn per_class_counts(data: &[MagnifiedSample]) -> BTreeMap<ClassId, usize> {
    let mut out = BTreeMap::new();
    for s in data {
        *out.entry(s.label()).or_insert(0) += 1;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{build_folds, generate_synthetic, LabelAudit, SynthConfig};
    use crate::model::params_hash;

    fn synth(n: usize, seed: u64) -> Vec<MagnifiedSample> {
        let cfg = SynthConfig {
            n_specimens: n,
            n_patients: n / 2,
            image_size: 32,
            seed,
            ..SynthConfig::default()
        };
        generate_synthetic(&cfg).unwrap().samples()
    }

    fn tiny_pretrain(epochs: usize) -> PretrainConfig {
        PretrainConfig {
            encoder: "toy16".into(),
            epochs,
            batch_size: 4,
            input_size: 16,
            ..PretrainConfig::default()
        }
    }

    fn toy16() -> EncoderAdapter {
        EncoderAdapter::build("toy16", 16, &mut rng::stream(0, &[])).unwrap()
    }

    fn toy(size: usize, seed: u64) -> EncoderAdapter {
        EncoderAdapter::build("toy8", size, &mut rng::stream(seed, &[])).unwrap()
    }

    #[test]
    fn zero_epochs_rejected() {
        let data = synth(8, 0);
        assert!(matches!(
            pretrain(&tiny_pretrain(0), &data, toy16()),
            Err(Error::Config(_))
        ));
    }

    #[test]
    fn pretrain_is_deterministic_and_label_free() {
        let mut data = synth(8, 1);
        let audit = LabelAudit::new();
        crate::dataset::instrument(&mut data, &audit);
        let a = pretrain(&tiny_pretrain(2), &data, toy16()).unwrap();
        let b = pretrain(&tiny_pretrain(2), &data, toy16()).unwrap();
        assert_eq!(a.loss_curve, b.loss_curve);
        assert_eq!(a.checkpoint.encoder_hash(), b.checkpoint.encoder_hash());
        assert_eq!(audit.reads(), 0);
        assert_eq!(a.seen_specimens.len(), 8);
    }

    #[test]
    fn per_view_draws_and_head_override() {
        let data = synth(8, 1);
        let shared = pretrain(&tiny_pretrain(2), &data, toy16()).unwrap();
        let split = PretrainConfig {
            shared_transform: false,
            ..tiny_pretrain(2)
        };
        let split = pretrain(&split, &data, toy16()).unwrap();
        assert_ne!(shared.loss_curve, split.loss_curve);

        let cfg = PretrainConfig {
            head_dims: Some(vec![12, 6]),
            ..tiny_pretrain(1)
        };
        let run = pretrain(&cfg, &data, toy16()).unwrap();
        let head = run.checkpoint.projection_head().unwrap();
        assert_eq!((head.hidden.output_dim(), head.output_dim()), (12, 6));
        let bad = PretrainConfig {
            head_dims: Some(vec![1]),
            ..tiny_pretrain(1)
        };
        assert!(pretrain(&bad, &data, toy16()).is_err());
    }

    #[test]
    fn linear_mode_freezes_encoder() {
        let data = synth(20, 2);
        let plan = build_folds(&data, 5, 0).unwrap();
        let enc = toy(16, 3);
        let before = params_hash(&enc);
        let cfg = FinetuneConfig {
            input_size: 16,
            epochs: 3,
            ..FinetuneConfig::linear()
        };
        let run = finetune(&cfg, &enc, &plan, 0, &data).unwrap();
        assert_eq!(run.checkpoint.encoder_hash(), before);
        assert!(run.trained_specimens.is_disjoint(&run.split.test));
        assert!(run.trained_specimens.is_disjoint(&run.split.validation));
    }

    #[test]
    fn full_mode_updates_encoder() {
        let data = synth(20, 2);
        let plan = build_folds(&data, 5, 0).unwrap();
        let enc = toy(16, 3);
        let cfg = FinetuneConfig {
            input_size: 16,
            epochs: 2,
            patience: 0,
            ..FinetuneConfig::default()
        };
        let run = finetune(&cfg, &enc, &plan, 1, &data).unwrap();
        assert_eq!(run.report.fold, 1);
        assert_eq!(run.report.n_images, run.split.test.len() * 4);
        assert!(run.trained_specimens.is_subset(&run.split.labeled));
    }

    #[test]
    fn full_fraction_uses_all_train_specimens() {
        let data = synth(20, 4);
        let plan = build_folds(&data, 5, 0).unwrap();
        let split = fold_split(&plan, 2, 1.0).unwrap();
        assert_eq!(split.labeled, split.train);
        assert!(matches!(fold_split(&plan, 2, 0.33), Err(Error::EmptyLabelSubset(_))));
    }

    #[test]
    fn metric_log_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("metrics.jsonl");
        let mut log = MetricLog::create(&path).unwrap();
        let rec = MetricRecord {
            epoch: 3,
            split: "val".into(),
            loss: None,
            ila: Some(0.5),
            pla: Some(0.25),
        };
        log.append(&rec).unwrap();
        log.append(&rec).unwrap();
        assert_eq!(read_metric_log(&path).unwrap(), vec![rec.clone(), rec]);
    }
}
