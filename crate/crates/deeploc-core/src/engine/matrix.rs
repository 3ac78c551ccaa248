//! Experiment matrix: build/evaluate a list of placement variants and emit a
//! comparison table (structure, accuracy and timing columns).

use std::path::Path;
use std::time::Instant;

use serde::Serialize;

use super::eval::{evaluate, EvalConfig};
use super::train::{train, TrainConfig};
use crate::assign::AssignConfig;
use crate::datamodel::Dataset;
use crate::error::Result;
use crate::loss::LossWeights;
use crate::model::{Detector, ModelConfig};
use crate::nn::Mode;
use crate::preprocess::AugmentConfig;
use crate::tensor::no_grad;

#[derive(Debug, Clone, Serialize)]
pub struct MatrixRow {
    pub name: String,
    pub params: usize,
    pub gflops: f64,
    pub layers: usize,
    pub per_category_ap50: Vec<f64>,
    pub map50: f64,
    pub map50_95: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    /// Single-image forward latency (ms), including decode+NMS.
    pub single_image_ms: f64,
    /// Per-image latency in a batched forward (ms).
    pub batch_avg_ms: f64,
}

pub struct MatrixOptions {
    pub seed: u64,
    pub eval: EvalConfig,
    /// Optional quick-training pass per variant before evaluation.
    pub train: Option<(TrainConfig, AugmentConfig, LossWeights)>,
    pub timing_batch: usize,
}

impl Default for MatrixOptions {
    fn default() -> Self {
        MatrixOptions {
            seed: 0,
            eval: EvalConfig::default(),
            train: None,
            timing_batch: 4,
        }
    }
}

/// Evaluate each variant; failures are recorded and do not stop the matrix.
pub fn run_matrix(
    variants: &[(String, ModelConfig)],
    dataset: &Dataset,
    eval_ids: &[String],
    opts: &MatrixOptions,
    out_dir: &Path,
) -> Result<Vec<(String, std::result::Result<MatrixRow, String>)>> {
    assert!(!variants.is_empty(), "matrix needs at least one variant");
    std::fs::create_dir_all(out_dir)?;
    let mut rows = Vec::new();
    for (name, cfg) in variants {
        let row = run_variant(name, cfg, dataset, eval_ids, opts, out_dir);
        rows.push((name.clone(), row.map_err(|e| e.to_string())));
    }
    write_csv(&rows, dataset, out_dir)?;
    Ok(rows)
}

fn run_variant(
    name: &str,
    cfg: &ModelConfig,
    dataset: &Dataset,
    eval_ids: &[String],
    opts: &MatrixOptions,
    out_dir: &Path,
) -> Result<MatrixRow> {
    let detector = Detector::<f32>::build(cfg, opts.seed)?;
    let params = detector.param_count();
    let gflops = detector.flops_estimate() as f64 / 1e9;
    let layers = detector.num_nodes();

    if let Some((tcfg, aug, weights)) = &opts.train {
        let run_dir = out_dir.join(format!("train_{name}"));
        train(
            &detector,
            dataset,
            eval_ids,
            eval_ids,
            aug,
            weights,
            &AssignConfig::default(),
            tcfg,
            &run_dir,
        )?;
    }

    let names = dataset.schema.merged_names.clone();
    let mut it = eval_ids.iter().map(|id| dataset.load_sample(id));
    let report = evaluate(&detector, &mut it, &names, &opts.eval, 4)?;

    // timing: one warmup, then single-image and batched forwards
    let s = cfg.input_size;
    let single = super::samples_to_batch::<f32>(&[dataset.load_sample(&eval_ids[0])?]
        .iter()
        .map(|smp| fit(smp, s))
        .collect::<Vec<_>>());
    let batch_samples: Vec<crate::datamodel::Sample> = eval_ids
        .iter()
        .cycle()
        .take(opts.timing_batch)
        .map(|id| dataset.load_sample(id).map(|smp| fit(&smp, s)))
        .collect::<Result<Vec<_>>>()?;
    let batch = super::samples_to_batch::<f32>(&batch_samples);
    let _g = no_grad();
    detector.forward(&single, Mode::Eval)?; // warmup
    let t0 = Instant::now();
    let heads = detector.forward(&single, Mode::Eval)?;
    let raws = [heads[0].value(), heads[1].value(), heads[2].value()];
    let decoded = crate::model::decode_all(
        &raws,
        &cfg.anchors,
        cfg.num_categories,
        opts.eval.conf_threshold,
    );
    for d in &decoded {
        crate::geometry::nms(d, opts.eval.nms_iou, opts.eval.conf_threshold);
    }
    let single_image_ms = t0.elapsed().as_secs_f64() * 1e3;
    let t1 = Instant::now();
    detector.forward(&batch, Mode::Eval)?;
    let batch_avg_ms = t1.elapsed().as_secs_f64() * 1e3 / opts.timing_batch as f64;

    Ok(MatrixRow {
        name: name.to_string(),
        params,
        gflops,
        layers,
        per_category_ap50: report.per_category.iter().map(|c| c.ap50).collect(),
        map50: report.map50,
        map50_95: report.map50_95,
        precision: report.precision,
        recall: report.recall,
        f1: report.f1,
        single_image_ms,
        batch_avg_ms,
    })
}

fn fit(sample: &crate::datamodel::Sample, size: usize) -> crate::datamodel::Sample {
    use rand::SeedableRng;
    let mut rng = rand_chacha::ChaCha12Rng::seed_from_u64(0);
    crate::preprocess::mix_augment(
        sample,
        &Vec::<crate::datamodel::Sample>::new(),
        &AugmentConfig::identity(size),
        &mut rng,
    )
}

fn write_csv(
    rows: &[(String, std::result::Result<MatrixRow, String>)],
    dataset: &Dataset,
    out_dir: &Path,
) -> Result<()> {
    let mut csv = String::from("model,params,gflops,layers");
    for name in &dataset.schema.merged_names {
        csv.push_str(&format!(",ap50_{name}"));
    }
    csv.push_str(",map50,map50_95,precision,recall,f1,t_single_ms,t_batch_avg_ms\n");
    for (name, row) in rows {
        match row {
            Ok(r) => {
                csv.push_str(&format!("{},{},{:.4},{}", r.name, r.params, r.gflops, r.layers));
                for ap in &r.per_category_ap50 {
                    csv.push_str(&format!(",{ap:.6}"));
                }
                csv.push_str(&format!(
                    ",{:.6},{:.6},{:.6},{:.6},{:.6},{:.3},{:.3}\n",
                    r.map50, r.map50_95, r.precision, r.recall, r.f1, r.single_image_ms,
                    r.batch_avg_ms
                ));
            }
            Err(e) => {
                csv.push_str(&format!("{name},error: {},,,,,,,,,,,\n", e.replace(',', ";")));
            }
        }
    }
    std::fs::write(out_dir.join("matrix.csv"), csv)?;
    Ok(())
}
