//! The training loop: seeded augmentation, SGD with warmup+cosine schedule,
//! per-step metrics, periodic validation and checkpointing.

use std::io::Write;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::{ChaCha12Rng, ChaCha20Rng};
use serde::{Deserialize, Serialize};

use super::eval::{evaluate, EvalConfig, EvalReport};
use super::optim::{lr_schedule, Sgd, SgdConfig};
use crate::assign::{assign, AssignConfig, Assignment};
use crate::datamodel::{Dataset, Sample};
use crate::error::{Error, Result};
use crate::loss::{deeploc_loss, DetectionBatchLoss, LossWeights};
use crate::model::{save_checkpoint, Detector};
use crate::nn::Mode;
use crate::preprocess::{mix_augment, sample_seed, AugmentConfig};
use crate::tensor::Tensor;

/// Optimization recipe.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Final LR as a fraction of the peak (cosine end point).
    pub lr_final_factor: f64,
    pub warmup_epochs: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    pub conf_threshold: f64,
    pub nms_iou: f64,
    pub seed: u64,
    pub val_every: usize,
    pub checkpoint_every: usize,
    /// Optional hard cap on optimizer steps (scaled-down runs).
    #[serde(default)]
    pub max_steps: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 100,
            batch_size: 32,
            lr: 1e-2,
            lr_final_factor: 0.1,
            warmup_epochs: 3.0,
            momentum: 0.937,
            weight_decay: 5e-4,
            conf_threshold: 1e-3,
            nms_iou: 0.65,
            seed: 0,
            val_every: 1,
            checkpoint_every: 1,
            max_steps: None,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainResult {
    pub steps: usize,
    pub epochs_run: usize,
    pub best_val_map50: f64,
    pub best_epoch: usize,
    pub last_val: Option<EvalReport>,
}

#[derive(Serialize)]
struct StepLine<'a> {
    #[serde(rename = "type")]
    kind: &'a str,
    step: usize,
    epoch: usize,
    lr: f64,
    loss_loc: f64,
    loss_obj: f64,
    loss_cls: f64,
    loss_total: f64,
}

#[derive(Serialize)]
struct ValLine<'a> {
    #[serde(rename = "type")]
    kind: &'a str,
    epoch: usize,
    step: usize,
    map50: f64,
    map50_95: f64,
    precision: f64,
    recall: f64,
    f1: f64,
}

/// Train `detector` on `train_ids`, validating on `val_ids`. Writes
/// `metrics.jsonl` and checkpoints under `out_dir`; returns the summary.
#[allow(clippy::too_many_arguments)]
pub fn train(
    detector: &Detector<f32>,
    dataset: &Dataset,
    train_ids: &[String],
    val_ids: &[String],
    aug: &AugmentConfig,
    loss_weights: &LossWeights,
    assign_cfg: &AssignConfig,
    cfg: &TrainConfig,
    out_dir: &Path,
) -> Result<TrainResult> {
    if train_ids.is_empty() {
        return Err(Error::Dataset("training split is empty".into()));
    }
    std::fs::create_dir_all(out_dir)?;
    let ckpt_dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir)?;
    let mut metrics = std::io::BufWriter::new(std::fs::File::create(out_dir.join("metrics.jsonl"))?);

    let mut opt = Sgd::new(
        &detector.store,
        SgdConfig {
            momentum: cfg.momentum,
            weight_decay: cfg.weight_decay,
        },
    );
    let eval_cfg = EvalConfig {
        conf_threshold: cfg.conf_threshold,
        nms_iou: cfg.nms_iou,
    };
    let names: Vec<String> = dataset.schema.merged_names.clone();
    let input_size = detector.config.input_size;
    let steps_per_epoch = train_ids.len().div_ceil(cfg.batch_size);

    let mut step = 0usize;
    let mut best_val = f64::MIN;
    let mut best_epoch = 0usize;
    let mut last_val: Option<EvalReport> = None;
    let mut epochs_run = 0usize;
    let mut done = false;

    for epoch in 0..cfg.epochs {
        if done {
            break;
        }
        epochs_run = epoch + 1;
        let mut order: Vec<&String> = train_ids.iter().collect();
        let mut shuffle_rng =
            ChaCha20Rng::seed_from_u64(cfg.seed ^ (epoch as u64).wrapping_mul(0x9e3779b97f4a7c15));
        order.shuffle(&mut shuffle_rng);

        // the remaining ids form the augmentation pool
        for chunk in order.chunks(cfg.batch_size) {
            let mut samples: Vec<Sample> = Vec::with_capacity(chunk.len());
            let mut batch_ids: Vec<String> = Vec::with_capacity(chunk.len());
            for id in chunk {
                let raw = dataset.load_sample(id)?;
                let pool = PoolAdapter {
                    dataset,
                    ids: train_ids,
                };
                let mut rng = ChaCha12Rng::seed_from_u64(sample_seed(cfg.seed, id, epoch));
                samples.push(mix_augment(&raw, &pool, aug, &mut rng));
                batch_ids.push((*id).clone());
            }
            let images = super::samples_to_batch::<f32>(&samples);
            let targets: Vec<Vec<crate::geometry::BoundingBox>> =
                samples.iter().map(|s| s.boxes.clone()).collect();
            let assignments: Vec<Assignment> = targets
                .iter()
                .map(|t| assign(t, &detector.config.anchors, input_size, assign_cfg))
                .collect();

            let heads = detector.forward(&images, Mode::Train)?;
            let (total, record): (Tensor<f32>, DetectionBatchLoss) = deeploc_loss(
                &heads,
                &targets,
                &assignments,
                &detector.config.anchors,
                input_size,
                detector.config.num_categories,
                loss_weights,
            )
            .map_err(|e| match e {
                Error::NonFinite { .. } => Error::NonFiniteLoss {
                    step,
                    batch_ids: batch_ids.clone(),
                },
                other => other,
            })?;
            if !record.total.is_finite() {
                return Err(Error::NonFiniteLoss {
                    step,
                    batch_ids: batch_ids.clone(),
                });
            }

            opt.zero_grads();
            total.backward();
            let epoch_f = epoch as f64 + (step % steps_per_epoch) as f64 / steps_per_epoch as f64;
            let lr = lr_schedule(
                cfg.lr,
                cfg.lr_final_factor,
                cfg.warmup_epochs,
                cfg.epochs as f64,
                epoch_f,
            );
            opt.step(lr);
            step += 1;

            serde_json::to_writer(
                &mut metrics,
                &StepLine {
                    kind: "step",
                    step,
                    epoch,
                    lr,
                    loss_loc: record.loc,
                    loss_obj: record.obj,
                    loss_cls: record.cls,
                    loss_total: record.total,
                },
            )
            .expect("metrics serialize");
            metrics.write_all(b"\n")?;

            if cfg.max_steps.is_some_and(|m| step >= m) {
                done = true;
                break;
            }
        }

        let is_last = done || epoch + 1 == cfg.epochs;
        if (epoch + 1) % cfg.val_every == 0 || is_last {
            let mut it = val_ids.iter().map(|id| dataset.load_sample(id));
            let report = evaluate(detector, &mut it, &names, &eval_cfg, cfg.batch_size.min(8))?;
            serde_json::to_writer(
                &mut metrics,
                &ValLine {
                    kind: "val",
                    epoch,
                    step,
                    map50: report.map50,
                    map50_95: report.map50_95,
                    precision: report.precision,
                    recall: report.recall,
                    f1: report.f1,
                },
            )
            .expect("metrics serialize");
            metrics.write_all(b"\n")?;
            if report.map50 > best_val {
                best_val = report.map50;
                best_epoch = epoch;
                save_checkpoint(&ckpt_dir.join("best.ckpt"), detector, epoch, Some(&opt.state()))?;
            }
            last_val = Some(report);
        }
        if (epoch + 1) % cfg.checkpoint_every == 0 || is_last {
            save_checkpoint(
                &ckpt_dir.join(format!("epoch_{epoch:04}.ckpt")),
                detector,
                epoch,
                Some(&opt.state()),
            )?;
        }
    }
    metrics.flush()?;

    Ok(TrainResult {
        steps: step,
        epochs_run,
        best_val_map50: best_val.max(0.0),
        best_epoch,
        last_val,
    })
}

struct PoolAdapter<'a> {
    dataset: &'a Dataset,
    ids: &'a [String],
}

impl crate::preprocess::SamplePool for PoolAdapter<'_> {
    fn len(&self) -> usize {
        self.ids.len()
    }
    fn get(&self, index: usize) -> Result<Sample> {
        self.dataset.load_sample(&self.ids[index])
    }
}
