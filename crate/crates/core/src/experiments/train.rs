//! Training loops: backbone pretraining on the source domain and adapter
//! training on the target domain.

use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::data::{generate_dataset, Corruption, Dataset, Sample, SyntheticTaskConfig};
use crate::allocation::{AdapterDims, RankPlan, RegimeRanks};
use crate::cka::Thresholds;
use crate::encoder::{
    build_encoder, grids_to_tokens, tokens_to_grids, Backbone, EncoderConfig, EncoderState, ImageBatch, Phase,
    RgbdImage, SegmentationModel,
};
use crate::error::{Error, Result};
use crate::fusion_loss::{sigmoid, total_loss, BoundaryCounts, Grid, IouCounts, LossWeights, SegMetrics, DEFAULT_BOUNDARY_TOL};
use crate::optimizer::{AdamW, AdamWConfig};
use crate::Matrix;

pub const DEFAULT_SEEDS: [u64; 5] = [42, 123, 456, 789, 1024];
const EVAL_BATCH: usize = 32;
const AUGMENT_STREAM: u64 = 0x9e37_79b9_7f4a_7c15;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps_opt: f64,
    pub seeds: Vec<u64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 16,
            learning_rate: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            eps_opt: 1e-8,
            seeds: DEFAULT_SEEDS.to_vec(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if self.seeds.is_empty() {
            return Err(Error::Config("at least one seed is required".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be >= 1".into()));
        }
        if self.weight_decay < 0.0 || !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("invalid optimizer hyper-parameters".into()));
        }
        Ok(())
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            learning_rate: self.learning_rate,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.eps_opt,
        }
    }
}

/// One logged row of training history.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    /// `train` (running metrics over the epoch's batches) or `test`.
    pub split: String,
    pub miou: f64,
    pub boundary_f1: f64,
    pub loss_dice: f64,
    pub loss_bce: f64,
    pub loss_edge: f64,
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
struct LossSums {
    dice: f64,
    bce: f64,
    edge: f64,
    n: usize,
}

impl LossSums {
    fn mean(&self) -> (f64, f64, f64) {
        let n = self.n.max(1) as f64;
        (self.dice / n, self.bce / n, self.edge / n)
    }
}

/// Accumulates segmentation metrics over images.
#[derive(Clone, Debug)]
pub struct MetricAccumulator {
    iou: IouCounts,
    boundary: BoundaryCounts,
}

impl Default for MetricAccumulator {
    fn default() -> Self {
        Self {
            iou: IouCounts::new(2),
            boundary: BoundaryCounts::default(),
        }
    }
}

impl MetricAccumulator {
    pub fn add_logits(&mut self, logits: &Grid<f64>, mask: &Grid<u8>) -> Result<()> {
        let pred = Grid::new(logits.height, logits.width, logits.data.iter().map(|&v| u8::from(v > 0.0)).collect())?;
        self.iou.add(&pred, mask)?;
        self.boundary.add(&pred, mask, DEFAULT_BOUNDARY_TOL)
    }

    /// mIoU is 0 when neither prediction nor target has foreground.
    pub fn metrics(&self) -> SegMetrics {
        SegMetrics {
            miou: self.iou.miou().unwrap_or(0.0),
            boundary_f1: self.boundary.f1(),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Evaluation {
    pub metrics: SegMetrics,
    /// Metrics over samples flagged as containing a transparent analog.
    pub transparent: Option<SegMetrics>,
    pub loss_dice: f64,
    pub loss_bce: f64,
    pub loss_edge: f64,
}

/// Forward-only evaluation in fixed batches.
pub fn evaluate(model: &SegmentationModel, data: &Dataset, weights: &LossWeights) -> Result<Evaluation> {
    let mut all = MetricAccumulator::default();
    let mut transparent = MetricAccumulator::default();
    let mut sums = LossSums::default();
    for chunk in data.samples.chunks(EVAL_BATCH) {
        let images: Vec<RgbdImage> = chunk.iter().map(|s| s.image.clone()).collect();
        let logits = model.predict_logits(&images)?;
        for (s, l) in chunk.iter().zip(&logits) {
            all.add_logits(l, &s.mask)?;
            if s.transparent {
                transparent.add_logits(l, &s.mask)?;
            }
            let probs = Grid::new(l.height, l.width, l.data.iter().map(|&v| sigmoid(v)).collect())?;
            let t = total_loss(&probs, &s.mask, weights)?.value;
            sums.dice += t.dice;
            sums.bce += t.bce;
            sums.edge += t.edge;
            sums.n += 1;
        }
    }
    let (d, b, e) = sums.mean();
    Ok(Evaluation {
        metrics: all.metrics(),
        transparent: data.samples.iter().any(|s| s.transparent).then(|| transparent.metrics()),
        loss_dice: d,
        loss_bce: b,
        loss_edge: e,
    })
}

struct StepResult {
    dice: f64,
    bce: f64,
    edge: f64,
    grads: Vec<Matrix>,
}

/// Mean loss over the batch and gradients for the phase's trainable tensors.
fn batch_gradients(
    model: &SegmentationModel,
    samples: &[&Sample],
    phase: Phase,
    weights: &LossWeights,
    metrics: &mut MetricAccumulator,
) -> Result<StepResult> {
    let images: Vec<RgbdImage> = samples.iter().map(|s| s.image.clone()).collect();
    let batch = ImageBatch::new(model.config(), &images)?;
    let graph = model.graph_from_batch(&batch, phase, phase == Phase::Adapt);
    let logit_grids = tokens_to_grids(model.config(), graph.tape.value(graph.logits));
    let inv_b = 1.0 / samples.len() as f64;
    let mut seeds = Vec::with_capacity(samples.len());
    let (mut dice, mut bce, mut edge) = (0.0, 0.0, 0.0);
    for (s, logits) in samples.iter().zip(&logit_grids) {
        metrics.add_logits(logits, &s.mask)?;
        let probs = Grid::new(logits.height, logits.width, logits.data.iter().map(|&v| sigmoid(v)).collect())?;
        let loss = total_loss(&probs, &s.mask, weights)?;
        dice += loss.value.dice * inv_b;
        bce += loss.value.bce * inv_b;
        edge += loss.value.edge * inv_b;
        let dlogit: Vec<f64> = loss
            .grad
            .data
            .iter()
            .zip(&probs.data)
            .map(|(&g, &p)| g * p * (1.0 - p) * inv_b)
            .collect();
        seeds.push(Grid::new(logits.height, logits.width, dlogit)?);
    }
    let seed = grids_to_tokens(model.config(), &seeds);
    let mut grads = graph.tape.backward(graph.logits, seed);
    let grads = graph
        .trainable
        .iter()
        .map(|&v| {
            grads.take(v).unwrap_or_else(|| {
                let (r, c) = graph.tape.value(v).shape();
                Matrix::zeros(r, c)
            })
        })
        .collect();
    Ok(StepResult { dice, bce, edge, grads })
}

/// Mean total loss over `samples` and its gradients with respect to the
/// parameters trained in `phase`, in [`SegmentationModel::trainable_slices_mut`] order.
pub fn loss_and_gradients(
    model: &SegmentationModel,
    samples: &[&Sample],
    phase: Phase,
    weights: &LossWeights,
) -> Result<(f64, Vec<Matrix>)> {
    let r = batch_gradients(model, samples, phase, weights, &mut MetricAccumulator::default())?;
    Ok((r.dice + r.bce + weights.lambda_edge * r.edge, r.grads))
}

/// One pass over `data` in a seeded order; returns the train-split record.
fn run_epoch(
    model: &mut SegmentationModel,
    opt: &mut AdamW,
    data: &Dataset,
    phase: Phase,
    weights: &LossWeights,
    batch_size: usize,
    rng: &mut ChaCha8Rng,
    epoch: usize,
) -> Result<EpochRecord> {
    let mut order: Vec<usize> = (0..data.len()).collect();
    order.shuffle(rng);
    let mut metrics = MetricAccumulator::default();
    let mut sums = LossSums::default();
    for (b, chunk) in order.chunks(batch_size).enumerate() {
        let samples: Vec<&Sample> = chunk.iter().map(|&i| &data.samples[i]).collect();
        let step = batch_gradients(model, &samples, phase, weights, &mut metrics)?;
        if !(step.dice.is_finite() && step.bce.is_finite() && step.edge.is_finite()) {
            return Err(Error::NanLoss {
                epoch,
                batch: b,
                dice: step.dice,
                bce: step.bce,
                edge: step.edge,
            });
        }
        sums.dice += step.dice;
        sums.bce += step.bce;
        sums.edge += step.edge;
        sums.n += 1;
        let grad_refs: Vec<&[f64]> = step.grads.iter().map(Matrix::data).collect();
        let mut params = model.trainable_slices_mut(phase);
        opt.step(&mut params, &grad_refs)?;
    }
    let (d, bce, e) = sums.mean();
    let m = metrics.metrics();
    Ok(EpochRecord {
        epoch,
        split: "train".into(),
        miou: m.miou,
        boundary_f1: m.boundary_f1,
        loss_dice: d,
        loss_bce: bce,
        loss_edge: e,
    })
}

fn test_record(epoch: usize, e: &Evaluation) -> EpochRecord {
    EpochRecord {
        epoch,
        split: "test".into(),
        miou: e.metrics.miou,
        boundary_f1: e.metrics.boundary_f1,
        loss_dice: e.loss_dice,
        loss_bce: e.loss_bce,
        loss_edge: e.loss_edge,
    }
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    pub model: SegmentationModel,
    /// Test record at epoch 0 (zero-shot), train records per epoch, and a
    /// final test record.
    pub history: Vec<EpochRecord>,
    pub zero_shot: Evaluation,
    pub final_eval: Evaluation,
    pub wall_clock_s: f64,
}

/// Trains the adapters, depth stream and fusion of `model` on `train` and
/// evaluates on `test`. The backbone is never modified.
pub fn train_adapters(
    mut model: SegmentationModel,
    train: &Dataset,
    test: &Dataset,
    cfg: &TrainConfig,
    seed: u64,
    weights: &LossWeights,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    let start = Instant::now();
    let frozen_before = model.encoder.frozen.hash();
    let zero_shot = evaluate(&model, test, weights)?;
    let mut history = vec![test_record(0, &zero_shot)];
    let sizes: Vec<usize> = model.trainable_slices_mut(Phase::Adapt).iter().map(|s| s.len()).collect();
    let mut opt = AdamW::new(cfg.optimizer(), &sizes);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for epoch in 1..=cfg.epochs {
        history.push(run_epoch(&mut model, &mut opt, train, Phase::Adapt, weights, cfg.batch_size, &mut rng, epoch)?);
    }
    let final_eval = if cfg.epochs == 0 {
        zero_shot.clone()
    } else {
        let e = evaluate(&model, test, weights)?;
        history.push(test_record(cfg.epochs, &e));
        e
    };
    debug_assert_eq!(frozen_before, model.encoder.frozen.hash());
    Ok(TrainOutcome {
        model,
        history,
        zero_shot,
        final_eval,
        wall_clock_s: start.elapsed().as_secs_f64(),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PretrainConfig {
    pub encoder: EncoderConfig,
    pub task_seed: u64,
    pub train_size: usize,
    pub test_size: usize,
    pub max_epochs: usize,
    pub batch_size: usize,
    /// Peak learning rate, reached after `warmup_epochs` and cosine-decayed
    /// to zero at `max_epochs`.
    pub learning_rate: f64,
    pub warmup_epochs: usize,
    /// Photometric augmentation redrawn every epoch.
    pub augmentation: Corruption,
    /// Held-out source mIoU required.
    pub threshold: f64,
    /// Training stops early once held-out mIoU reaches this value.
    pub stop_at: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            encoder: EncoderConfig::default(),
            task_seed: 2024,
            train_size: 512,
            test_size: 128,
            max_epochs: 30,
            batch_size: 16,
            learning_rate: 3e-3,
            warmup_epochs: 3,
            augmentation: Corruption::NONE,
            threshold: 0.9,
            stop_at: 0.93,
        }
    }
}

impl PretrainConfig {
    /// Learning rate used during `epoch` (1-based).
    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        if epoch <= self.warmup_epochs {
            return self.learning_rate * epoch as f64 / (self.warmup_epochs + 1) as f64;
        }
        let span = (self.max_epochs - self.warmup_epochs).max(1) as f64;
        let progress = (epoch - self.warmup_epochs - 1) as f64 / span;
        0.5 * self.learning_rate * (1.0 + (std::f64::consts::PI * progress).cos())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    pub epochs_run: usize,
    pub source_miou: f64,
    pub history: Vec<EpochRecord>,
}

/// Placeholder plan used while the backbone trains; adapters are bypassed.
fn bypass_plan(cfg: &EncoderConfig) -> Result<RankPlan> {
    RankPlan::from_ranks(
        &vec![1; cfg.layer_count],
        Thresholds::default(),
        RegimeRanks::new(1, 1, 1)?,
        AdapterDims {
            d_model: cfg.d_model,
            extras: 0,
        },
    )
}

/// Trains the full backbone on source-domain scenes until the held-out source
/// mIoU reaches `stop_at` (or `max_epochs`), then freezes it.
pub fn pretrain_frozen_backbone(cfg: &PretrainConfig) -> Result<(Backbone, PretrainReport)> {
    let train = generate_dataset(&SyntheticTaskConfig::source(cfg.task_seed), cfg.train_size)?;
    let test = generate_dataset(&SyntheticTaskConfig::source(cfg.task_seed.wrapping_add(1)), cfg.test_size)?;
    let state = build_encoder(&cfg.encoder, &bypass_plan(&cfg.encoder)?)?;
    let mut model = SegmentationModel::new(state, false);
    let weights = LossWeights::default();
    let sizes: Vec<usize> = model.trainable_slices_mut(Phase::Pretrain).iter().map(|s| s.len()).collect();
    let mut opt = AdamW::new(
        AdamWConfig {
            learning_rate: cfg.learning_rate,
            weight_decay: 0.0,
            ..AdamWConfig::default()
        },
        &sizes,
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.encoder.seed);
    let mut history = Vec::new();
    let mut source_miou = 0.0;
    let mut epochs_run = 0;
    for epoch in 1..=cfg.max_epochs {
        opt.config.learning_rate = cfg.learning_rate_at(epoch);
        let epoch_data = if cfg.augmentation.is_zero() {
            train.clone()
        } else {
            train.augmented(&cfg.augmentation, cfg.task_seed ^ (epoch as u64).wrapping_mul(AUGMENT_STREAM))
        };
        history.push(run_epoch(&mut model, &mut opt, &epoch_data, Phase::Pretrain, &weights, cfg.batch_size, &mut rng, epoch)?);
        let e = evaluate_frozen(&model, &test, &weights)?;
        history.push(test_record(epoch, &e));
        source_miou = e.metrics.miou;
        epochs_run = epoch;
        if source_miou >= cfg.stop_at {
            break;
        }
    }
    if source_miou < cfg.threshold {
        return Err(Error::PretrainingFailed {
            miou: source_miou,
            threshold: cfg.threshold,
        });
    }
    Ok((
        model.encoder.frozen,
        PretrainReport {
            epochs_run,
            source_miou,
            history,
        },
    ))
}

/// Evaluation of the bare backbone (adapters bypassed).
pub fn evaluate_frozen(model: &SegmentationModel, data: &Dataset, weights: &LossWeights) -> Result<Evaluation> {
    let mut bare = model.clone();
    bare.encoder.zero_adapters();
    evaluate(&bare, data, weights)
}

/// Segmentation model over a pretrained backbone with fresh adapters for
/// `plan`, seeded by `seed`.
pub fn adapted_model(backbone: &Backbone, cfg: &EncoderConfig, plan: &RankPlan, seed: u64, with_depth: bool) -> Result<SegmentationModel> {
    let enc_cfg = EncoderConfig { seed, ..cfg.clone() };
    let state = EncoderState::with_backbone(enc_cfg, backbone.clone(), plan)?;
    Ok(SegmentationModel::new(state, with_depth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn warmup_then_cosine_schedule() {
        let cfg = PretrainConfig {
            learning_rate: 1.0,
            warmup_epochs: 3,
            max_epochs: 13,
            ..PretrainConfig::default()
        };
        assert_eq!(cfg.learning_rate_at(1), 0.25);
        assert_eq!(cfg.learning_rate_at(3), 0.75);
        assert_eq!(cfg.learning_rate_at(4), 1.0);
        assert!((cfg.learning_rate_at(9) - 0.5).abs() < 1e-12);
        assert!(cfg.learning_rate_at(13) < cfg.learning_rate_at(12));
        assert!(cfg.learning_rate_at(13) > 0.0);
    }

    #[test]
    fn train_config_validation() {
        assert!(TrainConfig::default().validate().is_ok());
        for bad in [
            TrainConfig { learning_rate: 0.0, ..TrainConfig::default() },
            TrainConfig { learning_rate: f64::NAN, ..TrainConfig::default() },
            TrainConfig { seeds: vec![], ..TrainConfig::default() },
            TrainConfig { batch_size: 0, ..TrainConfig::default() },
            TrainConfig { beta1: 1.0, ..TrainConfig::default() },
            TrainConfig { weight_decay: -1.0, ..TrainConfig::default() },
        ] {
            assert!(matches!(bad.validate(), Err(Error::Config(_))), "{bad:?}");
        }
    }

    fn tiny_model() -> SegmentationModel {
        let cfg = EncoderConfig {
            layer_count: 2,
            d_model: 8,
            head_count: 2,
            patch_size: 4,
            image_size: 32,
            seed: 2,
        };
        let plan = RankPlan::from_ranks(
            &[2, 1],
            Thresholds::default(),
            RegimeRanks::new(2, 1, 1).unwrap(),
            AdapterDims { d_model: 8, extras: 0 },
        )
        .unwrap();
        SegmentationModel::new(build_encoder(&cfg, &plan).unwrap(), true)
    }

    #[test]
    fn gradients_follow_trainable_order() {
        let mut model = tiny_model();
        let data = generate_dataset(&SyntheticTaskConfig::target(4), 2).unwrap();
        let samples: Vec<&Sample> = data.samples.iter().collect();
        let (loss, grads) = loss_and_gradients(&model, &samples, Phase::Adapt, &LossWeights::default()).unwrap();
        assert!(loss.is_finite() && loss > 0.0);
        let sizes: Vec<usize> = model.trainable_slices_mut(Phase::Adapt).iter().map(|s| s.len()).collect();
        assert_eq!(grads.iter().map(|g| g.data().len()).collect::<Vec<_>>(), sizes);
        // B starts at zero, so A receives no gradient at step 0 but B does.
        assert!(grads.iter().any(|g| g.max_abs() > 0.0));
    }

    #[test]
    fn zero_epochs_reports_zero_shot() {
        let data = generate_dataset(&SyntheticTaskConfig::target(6), 4).unwrap();
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::default() };
        let out = train_adapters(tiny_model(), &data, &data, &cfg, 1, &LossWeights::default()).unwrap();
        assert_eq!(out.history.len(), 1);
        assert_eq!(out.zero_shot, out.final_eval);
        assert_eq!(out.model, tiny_model());
    }

    #[test]
    fn failed_pretraining_is_reported() {
        let cfg = PretrainConfig {
            encoder: tiny_model().config().clone(),
            train_size: 4,
            test_size: 2,
            max_epochs: 1,
            threshold: 1.01,
            stop_at: 1.01,
            ..PretrainConfig::default()
        };
        assert!(matches!(pretrain_frozen_backbone(&cfg), Err(Error::PretrainingFailed { .. })));
    }
}
