//! Detection evaluation: greedy matching, all-points average precision,
//! PR curves and the F1 operating point.

use serde::Serialize;

use crate::datamodel::Sample;
use crate::error::{Error, Result};
use crate::geometry::{iou, nms, CornerBox};
use crate::model::{decode_all, Detector};
use crate::nn::Mode;
use crate::preprocess::{mix_augment, AugmentConfig};
use crate::tensor::{no_grad, Scalar};

/// Evaluation-time thresholds.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct EvalConfig {
    pub conf_threshold: f64,
    pub nms_iou: f64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            conf_threshold: 1e-3,
            nms_iou: 0.65,
        }
    }
}

/// A detection or ground-truth box tied to an image index.
#[derive(Debug, Clone, Copy)]
pub struct ImageBox {
    pub image: usize,
    pub bbox: CornerBox,
}

#[derive(Debug, Clone, Serialize)]
pub struct CategoryMetrics {
    pub name: String,
    pub labels: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub ap50: f64,
    pub ap50_95: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct PrCurve {
    pub category: usize,
    /// (recall, precision) samples at IoU 0.5, one per detection rank.
    pub points: Vec<(f64, f64)>,
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalReport {
    pub per_category: Vec<CategoryMetrics>,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub map50: f64,
    pub map50_95: f64,
    /// Confidence threshold maximizing the mean F1.
    pub operating_confidence: f64,
    pub pr_curves: Vec<PrCurve>,
    pub total_labels: usize,
    pub images: usize,
}

/// Greedy confidence-ordered matching of one category's detections to ground
/// truth at `iou_thr`; returns per-detection TP flags aligned with the sorted
/// detection order.
fn match_category(
    dets_sorted: &[ImageBox],
    gts: &[ImageBox],
    iou_thr: f64,
) -> Vec<bool> {
    let mut gt_used = vec![false; gts.len()];
    let mut tp = vec![false; dets_sorted.len()];
    for (di, det) in dets_sorted.iter().enumerate() {
        let mut best = -1.0;
        let mut best_gt = None;
        for (gi, gt) in gts.iter().enumerate() {
            if gt.image != det.image || gt_used[gi] {
                continue;
            }
            let v = iou(&gt.bbox, &det.bbox);
            if v > best {
                best = v;
                best_gt = Some(gi);
            }
        }
        if let Some(gi) = best_gt {
            if best >= iou_thr {
                gt_used[gi] = true;
                tp[di] = true;
            }
        }
    }
    tp
}

/// The IoU thresholds of the 0.5:0.05:0.95 sweep.
pub fn coco_iou_thresholds() -> Vec<f64> {
    (0..10).map(|k| 0.5 + 0.05 * k as f64).collect()
}

/// Compute the full report from flat detection/GT lists.
pub fn compute_metrics(
    detections: &[ImageBox],
    ground_truth: &[ImageBox],
    num_categories: usize,
    category_names: &[String],
    images: usize,
) -> EvalReport {
    let thresholds = coco_iou_thresholds();
    let mut per_category = Vec::new();
    let mut pr_curves = Vec::new();

    // per-category sorted detections (stable on confidence ties)
    let mut sorted_dets: Vec<Vec<ImageBox>> = vec![Vec::new(); num_categories];
    let mut gts: Vec<Vec<ImageBox>> = vec![Vec::new(); num_categories];
    for d in detections {
        if d.bbox.category_id < num_categories {
            sorted_dets[d.bbox.category_id].push(*d);
        }
    }
    for g in ground_truth {
        gts[g.bbox.category_id].push(*g);
    }
    for dets in sorted_dets.iter_mut() {
        dets.sort_by(|a, b| {
            b.bbox
                .confidence
                .partial_cmp(&a.bbox.confidence)
                .unwrap_or(std::cmp::Ordering::Equal)
        });
    }

    // tp flags at every threshold, per category
    let mut tp50: Vec<Vec<bool>> = Vec::with_capacity(num_categories);
    let mut ap50_per_cat = vec![0.0; num_categories];
    let mut ap5095_per_cat = vec![0.0; num_categories];
    for c in 0..num_categories {
        let mut ap_sum = 0.0;
        let mut first_ap50 = 0.0;
        let mut first_points = Vec::new();
        for (ti, &thr) in thresholds.iter().enumerate() {
            let tp = match_category(&sorted_dets[c], &gts[c], thr);
            let (ap, points) = average_precision_points(&tp, gts[c].len());
            if ti == 0 {
                first_ap50 = ap;
                first_points = points;
                tp50.push(tp);
            }
            ap_sum += ap;
        }
        ap50_per_cat[c] = first_ap50;
        ap5095_per_cat[c] = ap_sum / thresholds.len() as f64;
        pr_curves.push(PrCurve {
            category: c,
            points: first_points,
        });
    }

    // F1 operating point over candidate confidences (IoU 0.5 matching)
    let mut candidates: Vec<f64> = detections.iter().map(|d| d.bbox.confidence).collect();
    candidates.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
    candidates.dedup();
    if candidates.is_empty() {
        candidates.push(1.0);
    }
    let active: Vec<usize> = (0..num_categories).filter(|&c| !gts[c].is_empty()).collect();
    let mut best_f1 = -1.0;
    let mut best_conf = candidates[0];
    let mut best_prf: Vec<(f64, f64, f64)> = vec![(0.0, 0.0, 0.0); num_categories];
    for &conf in &candidates {
        let mut prf = vec![(0.0, 0.0, 0.0); num_categories];
        let mut f1_sum = 0.0;
        for &c in &active {
            let n_keep = sorted_dets[c]
                .iter()
                .take_while(|d| d.bbox.confidence >= conf)
                .count();
            let tp_count = tp50[c][..n_keep].iter().filter(|&&t| t).count();
            let fp_count = n_keep - tp_count;
            let p = if n_keep > 0 {
                tp_count as f64 / (tp_count + fp_count) as f64
            } else {
                0.0
            };
            let r = tp_count as f64 / gts[c].len() as f64;
            let f1 = if p + r > 0.0 { 2.0 * p * r / (p + r) } else { 0.0 };
            prf[c] = (p, r, f1);
            f1_sum += f1;
        }
        let mean_f1 = if active.is_empty() { 0.0 } else { f1_sum / active.len() as f64 };
        if mean_f1 > best_f1 {
            best_f1 = mean_f1;
            best_conf = conf;
            best_prf = prf;
        }
    }

    for c in 0..num_categories {
        let (p, r, f1) = best_prf[c];
        per_category.push(CategoryMetrics {
            name: category_names
                .get(c)
                .cloned()
                .unwrap_or_else(|| format!("category_{c}")),
            labels: gts[c].len(),
            precision: p,
            recall: r,
            f1,
            ap50: ap50_per_cat[c],
            ap50_95: ap5095_per_cat[c],
        });
    }

    let mean = |f: &dyn Fn(usize) -> f64| -> f64 {
        if active.is_empty() {
            0.0
        } else {
            active.iter().map(|&c| f(c)).sum::<f64>() / active.len() as f64
        }
    };
    EvalReport {
        precision: mean(&|c| best_prf[c].0),
        recall: mean(&|c| best_prf[c].1),
        f1: mean(&|c| best_prf[c].2),
        map50: mean(&|c| ap50_per_cat[c]),
        map50_95: mean(&|c| ap5095_per_cat[c]),
        operating_confidence: best_conf,
        per_category,
        pr_curves,
        total_labels: ground_truth.len(),
        images,
    }
}

/// AP plus the per-rank PR samples.
pub fn average_precision_points(tp: &[bool], n_gt: usize) -> (f64, Vec<(f64, f64)>) {
    if n_gt == 0 {
        return (0.0, Vec::new());
    }
    let mut points = Vec::with_capacity(tp.len());
    let mut cum = 0usize;
    for (k, &hit) in tp.iter().enumerate() {
        if hit {
            cum += 1;
        }
        points.push((cum as f64 / n_gt as f64, cum as f64 / (k + 1) as f64));
    }
    // envelope from the right; area of recall increments
    let mut ap = 0.0;
    let mut env = 0.0f64;
    let mut acc = Vec::with_capacity(points.len());
    for &(r, p) in points.iter().rev() {
        env = env.max(p);
        acc.push((r, env));
    }
    acc.reverse();
    let mut last_r = 0.0;
    for &(r, p_env) in &acc {
        if r > last_r {
            ap += (r - last_r) * p_env;
            last_r = r;
        }
    }
    (ap, points)
}

/// Run the detector over samples and produce the report. Samples are
/// letterboxed to the model input size; ground truth follows the same map.
pub fn evaluate<T: Scalar>(
    detector: &Detector<T>,
    samples: &mut dyn Iterator<Item = Result<Sample>>,
    category_names: &[String],
    cfg: &EvalConfig,
    batch_size: usize,
) -> Result<EvalReport> {
    let _guard = no_grad();
    let input = detector.config.input_size;
    let aug = AugmentConfig::identity(input);
    let num_categories = detector.config.num_categories;
    let mut detections: Vec<ImageBox> = Vec::new();
    let mut ground_truth: Vec<ImageBox> = Vec::new();
    let mut image_index = 0usize;

    let mut batch_samples: Vec<Sample> = Vec::new();
    let mut flush = |batch: &mut Vec<Sample>,
                     detections: &mut Vec<ImageBox>,
                     ground_truth: &mut Vec<ImageBox>,
                     image_index: &mut usize|
     -> Result<()> {
        if batch.is_empty() {
            return Ok(());
        }
        let x = super::samples_to_batch::<T>(batch);
        let heads = detector.forward(&x, Mode::Eval)?;
        let raws = [heads[0].value(), heads[1].value(), heads[2].value()];
        let decoded = decode_all(
            &raws,
            &detector.config.anchors,
            num_categories,
            cfg.conf_threshold,
        );
        for (i, sample) in batch.iter().enumerate() {
            let img = *image_index + i;
            for b in nms(&decoded[i], cfg.nms_iou, cfg.conf_threshold) {
                detections.push(ImageBox { image: img, bbox: b });
            }
            for g in &sample.boxes {
                ground_truth.push(ImageBox {
                    image: img,
                    bbox: g.to_corner(input as f64, input as f64),
                });
            }
        }
        *image_index += batch.len();
        batch.clear();
        Ok(())
    };

    use rand::SeedableRng;
    let mut pool_rng = rand_chacha::ChaCha12Rng::seed_from_u64(0);
    for sample in samples {
        let sample = sample?;
        let fitted = mix_augment(&sample, &Vec::<Sample>::new(), &aug, &mut pool_rng);
        batch_samples.push(fitted);
        if batch_samples.len() == batch_size {
            flush(
                &mut batch_samples,
                &mut detections,
                &mut ground_truth,
                &mut image_index,
            )?;
        }
    }
    flush(
        &mut batch_samples,
        &mut detections,
        &mut ground_truth,
        &mut image_index,
    )?;

    if image_index == 0 {
        return Err(Error::Dataset("evaluation split is empty".into()));
    }
    Ok(compute_metrics(
        &detections,
        &ground_truth,
        num_categories,
        category_names,
        image_index,
    ))
}

/// Persist report as JSON plus a per-category CSV; PR curves as CSVs.
pub fn save_report(dir: &std::path::Path, report: &EvalReport) -> Result<()> {
    std::fs::create_dir_all(dir)?;
    std::fs::write(
        dir.join("eval.json"),
        serde_json::to_string_pretty(report).expect("report serializes"),
    )?;
    let mut csv = String::from("class,labels,precision,recall,f1,ap50,ap50_95\n");
    csv.push_str(&format!(
        "all,{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
        report.total_labels, report.precision, report.recall, report.f1, report.map50,
        report.map50_95
    ));
    for c in &report.per_category {
        csv.push_str(&format!(
            "{},{},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            c.name, c.labels, c.precision, c.recall, c.f1, c.ap50, c.ap50_95
        ));
    }
    std::fs::write(dir.join("eval.csv"), csv)?;
    for curve in &report.pr_curves {
        let mut s = String::from("recall,precision\n");
        for (r, p) in &curve.points {
            s.push_str(&format!("{r:.6},{p:.6}\n"));
        }
        std::fs::write(dir.join(format!("pr_category_{}.csv", curve.category)), s)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn det(image: usize, x: f64, y: f64, s: f64, cat: usize, conf: f64) -> ImageBox {
        ImageBox {
            image,
            bbox: CornerBox::new(x, y, x + s, y + s).with_score(cat, conf),
        }
    }

    #[test]
    fn single_true_positive_is_perfect_ap() {
        let gt = vec![det(0, 0.0, 0.0, 10.0, 0, 1.0)];
        // IoU 0.6 against the GT
        let d = vec![ImageBox {
            image: 0,
            bbox: CornerBox::new(0.0, 0.0, 10.0, 6.0).with_score(0, 0.9),
        }];
        assert!(iou(&d[0].bbox, &gt[0].bbox) > 0.5);
        let r = compute_metrics(&d, &gt, 1, &["c".into()], 1);
        assert_eq!(r.map50, 1.0);
    }

    #[test]
    fn below_threshold_is_zero_ap() {
        let gt = vec![det(0, 0.0, 0.0, 10.0, 0, 1.0)];
        let d = vec![ImageBox {
            image: 0,
            bbox: CornerBox::new(0.0, 0.0, 10.0, 4.0).with_score(0, 0.9),
        }];
        assert!(iou(&d[0].bbox, &gt[0].bbox) < 0.5);
        let r = compute_metrics(&d, &gt, 1, &["c".into()], 1);
        assert_eq!(r.map50, 0.0);
    }

    /// Cutoff-enumeration oracle: recompute matching from scratch for every
    /// distinct confidence cutoff and integrate the envelope.
    fn ap_cutoff_oracle(dets: &[ImageBox], gts: &[ImageBox], thr: f64) -> f64 {
        if gts.is_empty() {
            return 0.0;
        }
        let mut sorted: Vec<ImageBox> = dets.to_vec();
        sorted.sort_by(|a, b| b.bbox.confidence.partial_cmp(&a.bbox.confidence).unwrap());
        let mut cutoffs: Vec<f64> = sorted.iter().map(|d| d.bbox.confidence).collect();
        cutoffs.dedup();
        let mut points = Vec::new();
        for &c in &cutoffs {
            let prefix: Vec<ImageBox> = sorted
                .iter()
                .cloned()
                .take_while(|d| d.bbox.confidence >= c)
                .collect();
            let tp = match_category(&prefix, gts, thr);
            let tp_count = tp.iter().filter(|&&t| t).count();
            points.push((
                tp_count as f64 / gts.len() as f64,
                tp_count as f64 / prefix.len() as f64,
            ));
        }
        let mut env = 0.0;
        let mut acc = Vec::new();
        for &(r, p) in points.iter().rev() {
            env = env.max(p);
            acc.push((r, env));
        }
        acc.reverse();
        let mut ap = 0.0;
        let mut last_r = 0.0;
        for &(r, p) in &acc {
            if r > last_r {
                ap += (r - last_r) * p;
                last_r = r;
            }
        }
        ap
    }

    fn random_instance(
        rng: &mut impl Rng,
        n_det: usize,
        n_gt: usize,
        images: usize,
    ) -> (Vec<ImageBox>, Vec<ImageBox>) {
        let make_box = |rng: &mut dyn rand::RngCore| {
            let x = rng.random_range(0.0..80.0);
            let y = rng.random_range(0.0..80.0);
            let w = rng.random_range(5.0..25.0);
            let h = rng.random_range(5.0..25.0);
            CornerBox::new(x, y, x + w, y + h)
        };
        let gts: Vec<ImageBox> = (0..n_gt)
            .map(|_| ImageBox {
                image: rng.random_range(0..images),
                bbox: make_box(rng).with_score(0, 1.0),
            })
            .collect();
        let dets: Vec<ImageBox> = (0..n_det)
            .map(|_| {
                // half the detections perturb a GT, half are random
                if rng.random::<bool>() && !gts.is_empty() {
                    let g = gts[rng.random_range(0..gts.len())];
                    let dx = rng.random_range(-6.0..6.0);
                    let dy = rng.random_range(-6.0..6.0);
                    ImageBox {
                        image: g.image,
                        bbox: CornerBox::new(
                            g.bbox.x1 + dx,
                            g.bbox.y1 + dy,
                            g.bbox.x2 + dx,
                            g.bbox.y2 + dy,
                        )
                        .with_score(0, rng.random::<f64>()),
                    }
                } else {
                    ImageBox {
                        image: rng.random_range(0..images),
                        bbox: make_box(rng).with_score(0, rng.random::<f64>()),
                    }
                }
            })
            .collect();
        (dets, gts)
    }

    #[test]
    fn ap_matches_cutoff_enumeration_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..100 {
            let (dets, gts) = random_instance(&mut rng, 30, 10, 3);
            let mut sorted = dets.clone();
            sorted.sort_by(|a, b| b.bbox.confidence.partial_cmp(&a.bbox.confidence).unwrap());
            let tp = match_category(&sorted, &gts, 0.5);
            let (ap, _) = average_precision_points(&tp, gts.len());
            let want = ap_cutoff_oracle(&dets, &gts, 0.5);
            assert!((ap - want).abs() < 1e-9, "ap={ap} want={want}");
        }
    }

    #[test]
    fn ap_is_order_invariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let (dets, gts) = random_instance(&mut rng, 25, 8, 2);
        let r1 = compute_metrics(&dets, &gts, 1, &["c".into()], 2);
        let mut shuffled = dets.clone();
        shuffled.shuffle(&mut rng);
        let r2 = compute_metrics(&shuffled, &gts, 1, &["c".into()], 2);
        assert!((r1.map50 - r2.map50).abs() < 1e-12);
        assert!((r1.map50_95 - r2.map50_95).abs() < 1e-12);
    }

    #[test]
    fn map5095_never_exceeds_map50() {
        let mut rng = ChaCha8Rng::seed_from_u64(35);
        for _ in 0..50 {
            let (dets, gts) = random_instance(&mut rng, 20, 6, 2);
            let r = compute_metrics(&dets, &gts, 1, &["c".into()], 2);
            assert!(
                r.map50_95 <= r.map50 + 1e-12,
                "{} > {}",
                r.map50_95,
                r.map50
            );
        }
    }

    #[test]
    fn gt_as_detections_scores_perfectly() {
        let mut rng = ChaCha8Rng::seed_from_u64(37);
        let (_, gts) = random_instance(&mut rng, 0, 12, 3);
        let dets: Vec<ImageBox> = gts
            .iter()
            .map(|g| {
                let mut d = *g;
                d.bbox.confidence = 1.0;
                d
            })
            .collect();
        let r = compute_metrics(&dets, &gts, 1, &["c".into()], 3);
        assert_eq!(r.map50, 1.0);
        assert_eq!(r.map50_95, 1.0);
        assert_eq!(r.precision, 1.0);
        assert_eq!(r.recall, 1.0);
        assert_eq!(r.f1, 1.0);
    }

    #[test]
    fn low_confidence_extra_detection_never_raises_ap() {
        let mut rng = ChaCha8Rng::seed_from_u64(39);
        for _ in 0..30 {
            let (mut dets, gts) = random_instance(&mut rng, 10, 5, 2);
            let r1 = compute_metrics(&dets, &gts, 1, &["c".into()], 2);
            let min_conf = dets
                .iter()
                .map(|d| d.bbox.confidence)
                .fold(f64::MAX, f64::min);
            dets.push(ImageBox {
                image: 0,
                bbox: CornerBox::new(200.0, 200.0, 210.0, 210.0)
                    .with_score(0, min_conf * 0.5),
            });
            let r2 = compute_metrics(&dets, &gts, 1, &["c".into()], 2);
            assert!(r2.map50 <= r1.map50 + 1e-12);
        }
    }

    #[test]
    fn categories_without_labels_are_excluded_from_means() {
        let gt = vec![det(0, 0.0, 0.0, 10.0, 0, 1.0)];
        let d = vec![det(0, 0.0, 0.0, 10.0, 0, 0.9)];
        let r = compute_metrics(&d, &gt, 4, &[], 1);
        assert_eq!(r.map50, 1.0); // only category 0 counts
    }
}
