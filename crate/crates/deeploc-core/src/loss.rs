//! Composite detection loss: objectness, localization and classification
//! terms over the Center-Prior candidates, with per-head and per-component
//! weights.

use ndarray::{Array2, ArrayD, IxDyn};
use serde::{Deserialize, Serialize};

use crate::assign::{AnchorSet, Assignment};
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;
use crate::tensor::{bce_with_logits, concat, select_cells, CellIndex, Scalar, Tensor};

/// Loss combination weights.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct LossWeights {
    /// Objectness weight per FPN head (strides 8/16/32).
    pub head_weights: [f64; 3],
    pub lambda_loc: f64,
    pub lambda_obj: f64,
    pub lambda_cls: f64,
    /// When a head has no matched target the objectness term is literally
    /// zero; this flag switches to background supervision (BCE against an
    /// all-zero target map) instead.
    #[serde(default)]
    pub background_obj_when_unmatched: bool,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            head_weights: [4.0, 1.0, 0.4],
            lambda_loc: 0.05,
            lambda_obj: 0.7,
            lambda_cls: 0.3,
            background_obj_when_unmatched: false,
        }
    }
}

/// Decomposed batch loss. `total = batch_size * (λ_loc*loc + λ_obj*obj + λ_cls*cls)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionBatchLoss {
    pub loc: f64,
    pub obj: f64,
    pub cls: f64,
    pub total: f64,
}

const CIOU_EPS: f64 = 1e-7;

/// Differentiable CIoU between decoded candidate corners and constant target
/// corners, both `(N, 1)` column tensors. Returns the CIoU *value*
/// (IoU minus penalty), so the localization loss is `1 - value`.
#[allow(clippy::too_many_arguments)]
fn tensor_ciou<T: Scalar>(
    px1: &Tensor<T>,
    py1: &Tensor<T>,
    px2: &Tensor<T>,
    py2: &Tensor<T>,
    gx1: &Tensor<T>,
    gy1: &Tensor<T>,
    gx2: &Tensor<T>,
    gy2: &Tensor<T>,
    alpha_override: Option<&ArrayD<T>>,
) -> (Tensor<T>, ArrayD<T>) {
    let eps = T::cast(CIOU_EPS);
    let half = T::cast(0.5);
    let iw = px2.minimum(gx2).sub(&px1.maximum(gx1)).relu();
    let ih = py2.minimum(gy2).sub(&py1.maximum(gy1)).relu();
    let inter = iw.mul(&ih);
    let area_p = px2.sub(px1).mul(&py2.sub(py1));
    let area_g = gx2.sub(gx1).mul(&gy2.sub(gy1));
    let union = area_p.add(&area_g).sub(&inter).affine(T::one(), eps);
    let iou = inter.div(&union);

    let dcx = px1.add(px2).affine(half, T::zero()).sub(&gx1.add(gx2).affine(half, T::zero()));
    let dcy = py1.add(py2).affine(half, T::zero()).sub(&gy1.add(gy2).affine(half, T::zero()));
    let rho2 = dcx.square().add(&dcy.square());
    let cw = px2.maximum(gx2).sub(&px1.minimum(gx1));
    let ch = py2.maximum(gy2).sub(&py1.minimum(gy1));
    let c2 = cw.square().add(&ch.square()).affine(T::one(), eps);

    let k = T::cast(4.0 / (std::f64::consts::PI * std::f64::consts::PI));
    let pw = px2.sub(px1);
    let ph = py2.sub(py1);
    let gw = gx2.sub(gx1);
    let gh = gy2.sub(gy1);
    let t_pred = pw.div(&ph.affine(T::one(), eps)).atan();
    let t_gt = gw.div(&gh.affine(T::one(), eps)).atan();
    let v = t_gt.sub(&t_pred).square().affine(k, T::zero());
    // alpha carries no gradient
    let alpha = match alpha_override {
        Some(a) => Tensor::constant(a.clone()),
        None => {
            let one_minus_iou = iou.affine(-T::one(), T::one());
            v.div(&one_minus_iou.add(&v).affine(T::one(), eps)).detach()
        }
    };
    let alpha_vals = alpha.value();
    (iou.sub(&rho2.div(&c2).add(&alpha.mul(&v))), alpha_vals)
}

/// One head's gathered candidate metadata.
struct HeadCandidates<T: Scalar> {
    cells: Vec<CellIndex>,
    /// target corners (pixels) per candidate
    gt: Array2<f64>,
    /// anchor (w, h) per candidate
    anchor_wh: Array2<f64>,
    /// cell (x, y) per candidate
    cell_xy: Array2<f64>,
    categories: Vec<usize>,
    _marker: std::marker::PhantomData<T>,
}

fn gather_candidates<T: Scalar>(
    head: usize,
    assignments: &[Assignment],
    targets: &[Vec<BoundingBox>],
    anchors: &AnchorSet,
    input_size: usize,
) -> HeadCandidates<T> {
    let mut cells = Vec::new();
    let mut gt = Vec::new();
    let mut anchor_wh = Vec::new();
    let mut cell_xy = Vec::new();
    let mut categories = Vec::new();
    for (b, assignment) in assignments.iter().enumerate() {
        for e in assignment.entries.iter().filter(|e| e.head == head) {
            let t = &targets[b][e.target_index];
            let corner = t.to_corner(input_size as f64, input_size as f64);
            cells.push(CellIndex {
                batch: b,
                anchor: e.anchor,
                cell_y: e.cell_y,
                cell_x: e.cell_x,
            });
            gt.extend_from_slice(&[corner.x1, corner.y1, corner.x2, corner.y2]);
            let (aw, ah) = anchors.anchors[head][e.anchor];
            anchor_wh.extend_from_slice(&[aw, ah]);
            cell_xy.extend_from_slice(&[e.cell_x as f64, e.cell_y as f64]);
            categories.push(t.category_id);
        }
    }
    let n = cells.len();
    HeadCandidates {
        cells,
        gt: Array2::from_shape_vec((n, 4), gt).unwrap(),
        anchor_wh: Array2::from_shape_vec((n, 2), anchor_wh).unwrap(),
        cell_xy: Array2::from_shape_vec((n, 2), cell_xy).unwrap(),
        categories,
        _marker: std::marker::PhantomData,
    }
}

fn column<T: Scalar>(data: &Array2<f64>, col: usize) -> Tensor<T> {
    let n = data.nrows();
    Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[n, 1]), |ix| {
        T::cast(data[[ix[0], col]])
    }))
}

/// Values excluded from gradient flow (the objectness CIoU targets and the
/// CIoU trade-off alphas). Freezing them makes the loss a plain
/// differentiable function, which is what finite differences must probe.
#[derive(Debug, Clone, Default)]
pub struct LossStops<T: Scalar> {
    /// Per head: objectness target map `(B, 3, 1, H, W)`.
    pub obj_targets: Vec<Option<ArrayD<T>>>,
    /// Per head: per-candidate alpha `(N, 1)`.
    pub alphas: Vec<Option<ArrayD<T>>>,
}

/// The composite loss over a batch. `raws` are the three raw head maps
/// `(B, 3*(5+C), H, W)`; `targets` and `assignments` are per image.
///
/// Per head: objectness BCE over the full map against a target holding the
/// (detached, clamped) CIoU of each decoded candidate at assigned positions;
/// localization `mean(1 - CIoU)` over candidates; classification BCE against
/// one-hot categories. Heads without candidates contribute zero loss terms
/// unless `background_obj_when_unmatched` is set.
pub fn deeploc_loss<T: Scalar>(
    raws: &[Tensor<T>; 3],
    targets: &[Vec<BoundingBox>],
    assignments: &[Assignment],
    anchors: &AnchorSet,
    input_size: usize,
    num_categories: usize,
    weights: &LossWeights,
) -> Result<(Tensor<T>, DetectionBatchLoss)> {
    deeploc_loss_with_stops(
        raws,
        targets,
        assignments,
        anchors,
        input_size,
        num_categories,
        weights,
        None,
    )
    .map(|(t, r, _)| (t, r))
}

/// Loss with optional frozen stop-gradient values; returns the stops actually
/// used so a finite-difference pass can pin them.
#[allow(clippy::too_many_arguments)]
pub fn deeploc_loss_with_stops<T: Scalar>(
    raws: &[Tensor<T>; 3],
    targets: &[Vec<BoundingBox>],
    assignments: &[Assignment],
    anchors: &AnchorSet,
    input_size: usize,
    num_categories: usize,
    weights: &LossWeights,
    stops: Option<&LossStops<T>>,
) -> Result<(Tensor<T>, DetectionBatchLoss, LossStops<T>)> {
    let batch = targets.len();
    assert_eq!(assignments.len(), batch);
    let k = 5 + num_categories;

    let mut loc_terms: Vec<Tensor<T>> = Vec::new();
    let mut obj_terms: Vec<Tensor<T>> = Vec::new();
    let mut cls_terms: Vec<Tensor<T>> = Vec::new();
    let mut used_stops = LossStops {
        obj_targets: vec![None, None, None],
        alphas: vec![None, None, None],
    };

    for head in 0..3 {
        let raw = &raws[head];
        if raw.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite { head });
        }
        let shape = raw.shape();
        let (b, h, w) = (shape[0], shape[2], shape[3]);
        assert_eq!(shape[1], 3 * k, "head {head}: channel mismatch");
        assert_eq!(b, batch, "head {head}: batch mismatch");
        let stride = anchors.strides[head] as f64;
        let grid = raw.reshape(&[b, 3, k, h, w]);

        let cand = gather_candidates::<T>(head, assignments, targets, anchors, input_size);
        let n = cand.cells.len();

        // objectness logits over the whole map
        let obj_logits = grid.narrow(2, 4, 1); // (B, 3, 1, H, W)

        if n == 0 {
            if weights.background_obj_when_unmatched {
                let zeros = Tensor::zeros(&obj_logits.shape());
                obj_terms.push(
                    bce_with_logits(&obj_logits, &zeros)
                        .mean_all()
                        .affine(T::cast(weights.head_weights[head]), T::zero()),
                );
            }
            continue;
        }

        let sel = select_cells(&grid, &cand.cells); // (N, K)
        // decode candidates in-graph
        let anchor_w = column::<T>(&cand.anchor_wh, 0);
        let anchor_h = column::<T>(&cand.anchor_wh, 1);
        let cell_x = column::<T>(&cand.cell_xy, 0);
        let cell_y = column::<T>(&cand.cell_xy, 1);
        let two = T::cast(2.0);
        let s = T::cast(stride);
        let cx = sel
            .narrow(1, 0, 1)
            .sigmoid()
            .affine(two, T::cast(-0.5))
            .add(&cell_x)
            .affine(s, T::zero());
        let cy = sel
            .narrow(1, 1, 1)
            .sigmoid()
            .affine(two, T::cast(-0.5))
            .add(&cell_y)
            .affine(s, T::zero());
        let pw = sel.narrow(1, 2, 1).sigmoid().affine(two, T::zero()).square().mul(&anchor_w);
        let ph = sel.narrow(1, 3, 1).sigmoid().affine(two, T::zero()).square().mul(&anchor_h);
        let half = T::cast(0.5);
        let px1 = cx.sub(&pw.affine(half, T::zero()));
        let px2 = cx.add(&pw.affine(half, T::zero()));
        let py1 = cy.sub(&ph.affine(half, T::zero()));
        let py2 = cy.add(&ph.affine(half, T::zero()));

        let gx1 = column::<T>(&cand.gt, 0);
        let gy1 = column::<T>(&cand.gt, 1);
        let gx2 = column::<T>(&cand.gt, 2);
        let gy2 = column::<T>(&cand.gt, 3);
        let alpha_in = stops.and_then(|s| s.alphas[head].as_ref());
        let (ciou, alpha_used) =
            tensor_ciou(&px1, &py1, &px2, &py2, &gx1, &gy1, &gx2, &gy2, alpha_in); // (N,1)
        used_stops.alphas[head] = Some(alpha_used);

        // localization: mean(1 - CIoU) over candidates
        loc_terms.push(ciou.affine(-T::one(), T::one()).mean_all());

        // objectness target: detached CIoU clamped to [0,1] at assigned
        // positions, max-merged at duplicates, zero elsewhere
        let obj_target = match stops.and_then(|s| s.obj_targets[head].as_ref()) {
            Some(t) => t.clone(),
            None => {
                let ciou_vals = ciou.value();
                let mut obj_target = ArrayD::<T>::zeros(IxDyn(&[b, 3, 1, h, w]));
                for (i, c) in cand.cells.iter().enumerate() {
                    let v = ciou_vals[[i, 0]].max(T::zero()).min(T::one());
                    let slot = &mut obj_target[[c.batch, c.anchor, 0, c.cell_y, c.cell_x]];
                    if v > *slot {
                        *slot = v;
                    }
                }
                obj_target
            }
        };
        used_stops.obj_targets[head] = Some(obj_target.clone());
        obj_terms.push(
            bce_with_logits(&obj_logits, &Tensor::constant(obj_target))
                .mean_all()
                .affine(T::cast(weights.head_weights[head]), T::zero()),
        );

        // classification: BCE against one-hot categories at candidates
        let cls_logits = sel.narrow(1, 5, num_categories);
        let mut one_hot = ArrayD::<T>::zeros(IxDyn(&[n, num_categories]));
        for (i, &cat) in cand.categories.iter().enumerate() {
            one_hot[[i, cat]] = T::one();
        }
        cls_terms.push(bce_with_logits(&cls_logits, &Tensor::constant(one_hot)).mean_all());
    }

    let sum_terms = |terms: Vec<Tensor<T>>| -> Tensor<T> {
        match terms.len() {
            0 => Tensor::scalar(T::zero()),
            1 => terms.into_iter().next().unwrap(),
            _ => {
                let stacked = concat(&terms, 0);
                stacked.sum_all()
            }
        }
    };
    let loc = sum_terms(loc_terms);
    let obj = sum_terms(obj_terms);
    let cls = sum_terms(cls_terms);

    let bsz = T::cast(batch as f64);
    let total = loc
        .affine(T::cast(weights.lambda_loc), T::zero())
        .add(&obj.affine(T::cast(weights.lambda_obj), T::zero()))
        .add(&cls.affine(T::cast(weights.lambda_cls), T::zero()))
        .affine(bsz, T::zero());

    let record = DetectionBatchLoss {
        loc: loc.item().as_f64(),
        obj: obj.item().as_f64(),
        cls: cls.item().as_f64(),
        total: total.item().as_f64(),
    };
    if !record.total.is_finite() {
        return Err(Error::NonFinite { head: 3 });
    }
    Ok((total, record, used_stops))
}

/// Line-by-line scalar reference of the loss over plain f64 arrays;
/// structured as the per-head branches of the training algorithm, entirely
/// independent of the tensor path.
pub mod reference {
    use super::*;

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    fn bce(logit: f64, target: f64) -> f64 {
        logit.max(0.0) - logit * target + (1.0 + (-logit.abs()).exp()).ln()
    }

    fn ciou_value(p: [f64; 4], g: [f64; 4]) -> f64 {
        let iw = (p[2].min(g[2]) - p[0].max(g[0])).max(0.0);
        let ih = (p[3].min(g[3]) - p[1].max(g[1])).max(0.0);
        let inter = iw * ih;
        let ap = (p[2] - p[0]) * (p[3] - p[1]);
        let ag = (g[2] - g[0]) * (g[3] - g[1]);
        let union = ap + ag - inter + CIOU_EPS;
        let iou = inter / union;
        let rho2 = ((p[0] + p[2] - g[0] - g[2]) / 2.0).powi(2)
            + ((p[1] + p[3] - g[1] - g[3]) / 2.0).powi(2);
        let cw = p[2].max(g[2]) - p[0].min(g[0]);
        let ch = p[3].max(g[3]) - p[1].min(g[1]);
        let c2 = cw * cw + ch * ch + CIOU_EPS;
        let k = 4.0 / (std::f64::consts::PI * std::f64::consts::PI);
        let v = k
            * (((g[2] - g[0]) / (g[3] - g[1] + CIOU_EPS)).atan()
                - ((p[2] - p[0]) / (p[3] - p[1] + CIOU_EPS)).atan())
            .powi(2);
        let alpha = v / ((1.0 - iou) + v + CIOU_EPS);
        iou - (rho2 / c2 + alpha * v)
    }

    /// Scalar oracle mirroring the head loop of the training algorithm.
    #[allow(clippy::too_many_arguments)]
    pub fn deeploc_loss_reference(
        raws: &[ArrayD<f64>; 3],
        targets: &[Vec<BoundingBox>],
        assignments: &[Assignment],
        anchors: &AnchorSet,
        input_size: usize,
        num_categories: usize,
        weights: &LossWeights,
    ) -> DetectionBatchLoss {
        let batch = targets.len();
        let k = 5 + num_categories;
        let mut loc_sum = 0.0;
        let mut obj_sum = 0.0;
        let mut cls_sum = 0.0;
        for head in 0..3 {
            let raw = &raws[head];
            let (h, w) = (raw.shape()[2], raw.shape()[3]);
            let stride = anchors.strides[head] as f64;

            // collect candidates of this head
            struct Cand {
                b: usize,
                a: usize,
                y: usize,
                x: usize,
                gt: [f64; 4],
                cat: usize,
            }
            let mut cands = Vec::new();
            for (b, assignment) in assignments.iter().enumerate() {
                for e in assignment.entries.iter().filter(|e| e.head == head) {
                    let t = &targets[b][e.target_index];
                    let c = t.to_corner(input_size as f64, input_size as f64);
                    cands.push(Cand {
                        b,
                        a: e.anchor,
                        y: e.cell_y,
                        x: e.cell_x,
                        gt: [c.x1, c.y1, c.x2, c.y2],
                        cat: t.category_id,
                    });
                }
            }

            if cands.is_empty() {
                if weights.background_obj_when_unmatched {
                    let mut s = 0.0;
                    for b in 0..batch {
                        for a in 0..3 {
                            for y in 0..h {
                                for x in 0..w {
                                    s += bce(raw[[b, a * k + 4, y, x]], 0.0);
                                }
                            }
                        }
                    }
                    obj_sum += weights.head_weights[head] * s / (batch * 3 * h * w) as f64;
                }
                continue;
            }

            // decode each candidate and its CIoU
            let mut obj_target = vec![0.0f64; batch * 3 * h * w];
            let mut loc = 0.0;
            let mut cls = 0.0;
            for c in &cands {
                let at = |i: usize| raw[[c.b, c.a * k + i, c.y, c.x]];
                let (aw, ah) = anchors.anchors[head][c.a];
                let px = (2.0 * sigmoid(at(0)) - 0.5 + c.x as f64) * stride;
                let py = (2.0 * sigmoid(at(1)) - 0.5 + c.y as f64) * stride;
                let pw = (2.0 * sigmoid(at(2))).powi(2) * aw;
                let ph = (2.0 * sigmoid(at(3))).powi(2) * ah;
                let p = [px - pw / 2.0, py - ph / 2.0, px + pw / 2.0, py + ph / 2.0];
                let ciou = ciou_value(p, c.gt);
                loc += 1.0 - ciou;
                let slot = &mut obj_target[((c.b * 3 + c.a) * h + c.y) * w + c.x];
                let clamped = ciou.clamp(0.0, 1.0);
                if clamped > *slot {
                    *slot = clamped;
                }
                for cat in 0..num_categories {
                    let target = if cat == c.cat { 1.0 } else { 0.0 };
                    cls += bce(at(5 + cat), target);
                }
            }
            loc_sum += loc / cands.len() as f64;
            cls_sum += cls / (cands.len() * num_categories) as f64;

            let mut obj = 0.0;
            for b in 0..batch {
                for a in 0..3 {
                    for y in 0..h {
                        for x in 0..w {
                            obj += bce(
                                raw[[b, a * k + 4, y, x]],
                                obj_target[((b * 3 + a) * h + y) * w + x],
                            );
                        }
                    }
                }
            }
            obj_sum += weights.head_weights[head] * obj / (batch * 3 * h * w) as f64;
        }
        let total = batch as f64
            * (weights.lambda_loc * loc_sum
                + weights.lambda_obj * obj_sum
                + weights.lambda_cls * cls_sum);
        DetectionBatchLoss {
            loc: loc_sum,
            obj: obj_sum,
            cls: cls_sum,
            total,
        }
    }
}
