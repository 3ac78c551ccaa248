//! Box representations, IoU/CIoU computation and non-maximum suppression.
//!
//! Everything here is pure scalar math in `f64`; the tensor graph has its own
//! differentiable CIoU built from the same formulas (see `loss`).

use std::f64::consts::PI;

/// Epsilon added to the squared enclosing diagonal and to aspect-ratio
/// denominators. The union is guarded by a zero test instead so that
/// identical boxes yield an exact IoU of 1.
pub const GEOM_EPS: f64 = 1e-7;

/// Axis-aligned box in normalized center format (coordinates relative to the
/// image size, all in `[0, 1]`).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BoundingBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    pub category_id: usize,
    /// Detection confidence; `1.0` for ground-truth boxes.
    pub confidence: f64,
}

/// Axis-aligned box in absolute corner format (pixels).
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct CornerBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
    pub category_id: usize,
    pub confidence: f64,
}

impl BoundingBox {
    pub fn new(cx: f64, cy: f64, w: f64, h: f64, category_id: usize) -> Self {
        Self {
            cx,
            cy,
            w,
            h,
            category_id,
            confidence: 1.0,
        }
    }

    pub fn is_valid(&self) -> bool {
        self.w > 0.0 && self.h > 0.0 && self.cx.is_finite() && self.cy.is_finite()
    }

    /// Convert to absolute corner format for an `img_w` x `img_h` raster.
    pub fn to_corner(&self, img_w: f64, img_h: f64) -> CornerBox {
        CornerBox {
            x1: (self.cx - self.w / 2.0) * img_w,
            y1: (self.cy - self.h / 2.0) * img_h,
            x2: (self.cx + self.w / 2.0) * img_w,
            y2: (self.cy + self.h / 2.0) * img_h,
            category_id: self.category_id,
            confidence: self.confidence,
        }
    }
}

impl CornerBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Self {
        Self {
            x1,
            y1,
            x2,
            y2,
            category_id: 0,
            confidence: 1.0,
        }
    }

    pub fn with_score(mut self, category_id: usize, confidence: f64) -> Self {
        self.category_id = category_id;
        self.confidence = confidence;
        self
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn is_valid(&self) -> bool {
        self.x2 > self.x1 && self.y2 > self.y1
    }

    /// Convert to normalized center format for an `img_w` x `img_h` raster.
    pub fn to_center(&self, img_w: f64, img_h: f64) -> BoundingBox {
        BoundingBox {
            cx: (self.x1 + self.x2) / 2.0 / img_w,
            cy: (self.y1 + self.y2) / 2.0 / img_h,
            w: (self.x2 - self.x1) / img_w,
            h: (self.y2 - self.y1) / img_h,
            category_id: self.category_id,
            confidence: self.confidence,
        }
    }
}

/// Decomposition of the CIoU penalty.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CIoUComponents {
    /// Plain intersection-over-union in `[0, 1]`.
    pub iou: f64,
    /// Squared distance between box centers.
    pub rho2: f64,
    /// Squared diagonal of the smallest enclosing box (epsilon-guarded).
    pub c2: f64,
    /// Aspect-ratio consistency term.
    pub v: f64,
    /// Trade-off weight `v / ((1 - iou) + v)`, zero when degenerate.
    pub alpha: f64,
}

/// Intersection-over-union of two corner boxes. Zero-area or disjoint pairs
/// yield 0; never fails.
pub fn iou(a: &CornerBox, b: &CornerBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union > 0.0 {
        inter / union
    } else {
        0.0
    }
}

/// Complete-IoU loss `1 - IoU + rho^2/c^2 + alpha*v` with its components.
pub fn ciou_loss(pred: &CornerBox, gt: &CornerBox) -> (f64, CIoUComponents) {
    let (loss, comps, _, _) = ciou_loss_with_grad(pred, gt);
    (loss, comps)
}

/// CIoU loss with the trade-off weight pinned to `alpha`. This is the scalar
/// function whose finite differences the analytic gradient reproduces, since
/// `alpha` carries no gradient.
pub fn ciou_loss_with_fixed_alpha(pred: &CornerBox, gt: &CornerBox, alpha: f64) -> f64 {
    let (_, c) = ciou_loss(pred, gt);
    1.0 - c.iou + c.rho2 / c.c2 + alpha * c.v
}

/// CIoU loss together with its analytic gradient with respect to the four
/// `pred` corners and the four `gt` corners. `alpha` is treated as a constant
/// during differentiation.
pub fn ciou_loss_with_grad(
    pred: &CornerBox,
    gt: &CornerBox,
) -> (f64, CIoUComponents, [f64; 4], [f64; 4]) {
    let (ax1, ay1, ax2, ay2) = (pred.x1, pred.y1, pred.x2, pred.y2);
    let (gx1, gy1, gx2, gy2) = (gt.x1, gt.y1, gt.x2, gt.y2);
    let (w, h) = (ax2 - ax1, ay2 - ay1);
    let (gw, gh) = (gx2 - gx1, gy2 - gy1);

    // Intersection / union.
    let iw = (ax2.min(gx2) - ax1.max(gx1)).max(0.0);
    let ih = (ay2.min(gy2) - ay1.max(gy1)).max(0.0);
    let inter = iw * ih;
    let union = w * h + gw * gh - inter;
    let iou = if union > 0.0 { inter / union } else { 0.0 };

    // Squared center distance over squared enclosing diagonal.
    let dcx = (ax1 + ax2 - gx1 - gx2) / 2.0;
    let dcy = (ay1 + ay2 - gy1 - gy2) / 2.0;
    let rho2 = dcx * dcx + dcy * dcy;
    let cw = ax2.max(gx2) - ax1.min(gx1);
    let ch = ay2.max(gy2) - ay1.min(gy1);
    let c2 = cw * cw + ch * ch + GEOM_EPS;

    // Aspect-ratio consistency.
    let k = 4.0 / (PI * PI);
    let t = (w / (h + GEOM_EPS)).atan();
    let tg = (gw / (gh + GEOM_EPS)).atan();
    let v = k * (tg - t) * (tg - t);
    let denom = (1.0 - iou) + v;
    let alpha = if denom > 0.0 { v / denom } else { 0.0 };

    let loss = 1.0 - iou + rho2 / c2 + alpha * v;
    let comps = CIoUComponents {
        iou,
        rho2,
        c2,
        v,
        alpha,
    };

    // Gradient. All max/min kinks take the sub-gradient of the branch that is
    // strictly active; ties route to the pred side.
    let mut gp = [0.0f64; 4];
    let mut gg = [0.0f64; 4];

    let overlap = iw > 0.0 && ih > 0.0;
    // d(inter)/d(coordinate)
    let di_ax1 = if overlap && ax1 >= gx1 { -ih } else { 0.0 };
    let di_ax2 = if overlap && ax2 <= gx2 { ih } else { 0.0 };
    let di_ay1 = if overlap && ay1 >= gy1 { -iw } else { 0.0 };
    let di_ay2 = if overlap && ay2 <= gy2 { iw } else { 0.0 };
    let di_gx1 = if overlap && gx1 > ax1 { -ih } else { 0.0 };
    let di_gx2 = if overlap && gx2 < ax2 { ih } else { 0.0 };
    let di_gy1 = if overlap && gy1 > ay1 { -iw } else { 0.0 };
    let di_gy2 = if overlap && gy2 < ay2 { iw } else { 0.0 };

    if union > 0.0 {
        let u2 = union * union;
        // d(iou)/dq = (dI*U - I*dU)/U^2 with dU = dA - dI.
        let diou = |di: f64, darea: f64| (di * union - inter * (darea - di)) / u2;
        gp[0] += -diou(di_ax1, -h);
        gp[1] += -diou(di_ay1, -w);
        gp[2] += -diou(di_ax2, h);
        gp[3] += -diou(di_ay2, w);
        gg[0] += -diou(di_gx1, -gh);
        gg[1] += -diou(di_gy1, -gw);
        gg[2] += -diou(di_gx2, gh);
        gg[3] += -diou(di_gy2, gw);
    }

    // d(rho2/c2): quotient rule; enclosing-box kinks routed like above.
    let c4 = c2 * c2;
    let de_ax1 = if ax1 <= gx1 { -1.0 } else { 0.0 }; // d(cw)/d(ax1)
    let de_ax2 = if ax2 >= gx2 { 1.0 } else { 0.0 };
    let de_ay1 = if ay1 <= gy1 { -1.0 } else { 0.0 };
    let de_ay2 = if ay2 >= gy2 { 1.0 } else { 0.0 };
    let de_gx1 = if gx1 < ax1 { -1.0 } else { 0.0 };
    let de_gx2 = if gx2 > ax2 { 1.0 } else { 0.0 };
    let de_gy1 = if gy1 < ay1 { -1.0 } else { 0.0 };
    let de_gy2 = if gy2 > ay2 { 1.0 } else { 0.0 };
    let dterm = |drho2: f64, dc2: f64| (drho2 * c2 - rho2 * dc2) / c4;
    gp[0] += dterm(dcx, 2.0 * cw * de_ax1);
    gp[1] += dterm(dcy, 2.0 * ch * de_ay1);
    gp[2] += dterm(dcx, 2.0 * cw * de_ax2);
    gp[3] += dterm(dcy, 2.0 * ch * de_ay2);
    gg[0] += dterm(-dcx, 2.0 * cw * de_gx1);
    gg[1] += dterm(-dcy, 2.0 * ch * de_gy1);
    gg[2] += dterm(-dcx, 2.0 * cw * de_gx2);
    gg[3] += dterm(-dcy, 2.0 * ch * de_gy2);

    // alpha * dv, with alpha constant.
    let dv_dt = -2.0 * k * (tg - t);
    let dv_dtg = 2.0 * k * (tg - t);
    let hp = h + GEOM_EPS;
    let ghp = gh + GEOM_EPS;
    let dt_dw = hp / (hp * hp + w * w);
    let dt_dh = -w / (hp * hp + w * w);
    let dtg_dgw = ghp / (ghp * ghp + gw * gw);
    let dtg_dgh = -gw / (ghp * ghp + gw * gw);
    gp[0] += alpha * dv_dt * dt_dw * -1.0;
    gp[2] += alpha * dv_dt * dt_dw * 1.0;
    gp[1] += alpha * dv_dt * dt_dh * -1.0;
    gp[3] += alpha * dv_dt * dt_dh * 1.0;
    gg[0] += alpha * dv_dtg * dtg_dgw * -1.0;
    gg[2] += alpha * dv_dtg * dtg_dgw * 1.0;
    gg[1] += alpha * dv_dtg * dtg_dgh * -1.0;
    gg[3] += alpha * dv_dtg * dtg_dgh * 1.0;

    (loss, comps, gp, gg)
}

/// Per-category non-maximum suppression over plain IoU.
///
/// Boxes below `conf_threshold` are discarded first; survivors are processed
/// in descending confidence order (stable on ties) and a box is dropped when
/// it overlaps an already kept box of the same category by more than
/// `iou_threshold`. The kept boxes come back sorted by descending confidence.
pub fn nms(dets: &[CornerBox], iou_threshold: f64, conf_threshold: f64) -> Vec<CornerBox> {
    assert!(
        iou_threshold > 0.0 && iou_threshold < 1.0,
        "iou_threshold must lie in (0, 1), got {iou_threshold}"
    );
    let mut order: Vec<usize> = (0..dets.len())
        .filter(|&i| dets[i].confidence >= conf_threshold)
        .collect();
    order.sort_by(|&a, &b| {
        dets[b]
            .confidence
            .partial_cmp(&dets[a].confidence)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });

    let mut kept: Vec<CornerBox> = Vec::new();
    for &i in &order {
        let candidate = &dets[i];
        let suppressed = kept
            .iter()
            .any(|k| k.category_id == candidate.category_id && iou(k, candidate) > iou_threshold);
        if !suppressed {
            kept.push(*candidate);
        }
    }
    kept
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn bx(x1: f64, y1: f64, x2: f64, y2: f64) -> CornerBox {
        CornerBox::new(x1, y1, x2, y2)
    }

    /// Rasterization oracle: count subcell centers inside each box on a fine
    /// grid spanning both boxes.
    fn iou_raster_oracle(a: &CornerBox, b: &CornerBox, n: usize) -> f64 {
        let x_lo = a.x1.min(b.x1);
        let x_hi = a.x2.max(b.x2);
        let y_lo = a.y1.min(b.y1);
        let y_hi = a.y2.max(b.y2);
        let (mut inter, mut na, mut nb) = (0u64, 0u64, 0u64);
        for i in 0..n {
            let y = y_lo + (y_hi - y_lo) * (i as f64 + 0.5) / n as f64;
            for j in 0..n {
                let x = x_lo + (x_hi - x_lo) * (j as f64 + 0.5) / n as f64;
                let in_a = x > a.x1 && x < a.x2 && y > a.y1 && y < a.y2;
                let in_b = x > b.x1 && x < b.x2 && y > b.y1 && y < b.y2;
                if in_a {
                    na += 1;
                }
                if in_b {
                    nb += 1;
                }
                if in_a && in_b {
                    inter += 1;
                }
            }
        }
        inter as f64 / (na + nb - inter) as f64
    }

    /// Independent scalar CIoU oracle parameterized by centers and sizes
    /// instead of corners.
    fn ciou_center_oracle(pred: &CornerBox, gt: &CornerBox) -> f64 {
        let (pcx, pcy) = ((pred.x1 + pred.x2) / 2.0, (pred.y1 + pred.y2) / 2.0);
        let (gcx, gcy) = ((gt.x1 + gt.x2) / 2.0, (gt.y1 + gt.y2) / 2.0);
        let (pw, ph) = (pred.width(), pred.height());
        let (gw, gh) = (gt.width(), gt.height());
        let ix = ((pcx + pw / 2.0).min(gcx + gw / 2.0) - (pcx - pw / 2.0).max(gcx - gw / 2.0))
            .max(0.0);
        let iy = ((pcy + ph / 2.0).min(gcy + gh / 2.0) - (pcy - ph / 2.0).max(gcy - gh / 2.0))
            .max(0.0);
        let inter = ix * iy;
        let union = pw * ph + gw * gh - inter;
        let iou = if union > 0.0 { inter / union } else { 0.0 };
        let rho2 = (pcx - gcx).powi(2) + (pcy - gcy).powi(2);
        let cw = (pcx + pw / 2.0).max(gcx + gw / 2.0) - (pcx - pw / 2.0).min(gcx - gw / 2.0);
        let ch = (pcy + ph / 2.0).max(gcy + gh / 2.0) - (pcy - ph / 2.0).min(gcy - gh / 2.0);
        let c2 = cw * cw + ch * ch + GEOM_EPS;
        let v = 4.0 / (PI * PI)
            * ((gw / (gh + GEOM_EPS)).atan() - (pw / (ph + GEOM_EPS)).atan()).powi(2);
        let denom = (1.0 - iou) + v;
        let alpha = if denom > 0.0 { v / denom } else { 0.0 };
        1.0 - iou + rho2 / c2 + alpha * v
    }

    fn random_box(rng: &mut impl Rng) -> CornerBox {
        let x1 = rng.random_range(-2.0..2.0);
        let y1 = rng.random_range(-2.0..2.0);
        let w = rng.random_range(0.2..3.0);
        let h = rng.random_range(0.2..3.0);
        bx(x1, y1, x1 + w, y1 + h)
    }

    #[test]
    fn iou_identity_and_disjoint() {
        let a = bx(0.0, 0.0, 1.0, 1.0);
        assert_eq!(iou(&a, &a), 1.0);
        let b = bx(2.0, 2.0, 3.0, 3.0);
        assert_eq!(iou(&a, &b), 0.0);
    }

    #[test]
    fn iou_overlap_matches_hand_value_and_raster_oracle() {
        let a = bx(0.0, 0.0, 2.0, 2.0);
        let b = bx(1.0, 1.0, 3.0, 3.0);
        // intersection 1, union 7
        assert_relative_eq!(iou(&a, &b), 1.0 / 7.0, max_relative = 1e-12);
        let oracle = iou_raster_oracle(&a, &b, 1500);
        assert!((oracle - 1.0 / 7.0).abs() < 2e-3, "oracle={oracle}");
    }

    #[test]
    fn iou_zero_area_box_is_zero() {
        let degenerate = bx(1.0, 1.0, 1.0, 2.0);
        let a = bx(0.0, 0.0, 2.0, 2.0);
        assert_eq!(iou(&degenerate, &a), 0.0);
        assert_eq!(iou(&degenerate, &degenerate), 0.0);
    }

    #[test]
    fn ciou_identical_boxes_is_exactly_zero() {
        let a = bx(0.3, -1.0, 2.7, 4.5);
        let (loss, c) = ciou_loss(&a, &a);
        assert!(loss.abs() < 1e-9, "loss={loss}");
        assert_eq!(c.iou, 1.0);
        assert_eq!(c.rho2, 0.0);
        assert_eq!(c.v, 0.0);
        assert_eq!(c.alpha, 0.0);
    }

    #[test]
    fn ciou_equal_aspect_case() {
        let (loss, c) = ciou_loss(&bx(0.0, 0.0, 2.0, 2.0), &bx(1.0, 1.0, 3.0, 3.0));
        // iou = 1/7, rho2 = 2, c2 = 18 (+eps), v = 0
        assert_relative_eq!(c.iou, 1.0 / 7.0, max_relative = 1e-12);
        assert_relative_eq!(c.rho2, 2.0, max_relative = 1e-12);
        assert_relative_eq!(c.c2, 18.0, max_relative = 1e-6);
        assert!(c.v < 1e-15);
        assert!(c.alpha < 1e-15);
        assert_relative_eq!(loss, 1.0 - 1.0 / 7.0 + 2.0 / 18.0, epsilon = 1e-6);
        assert!((loss - 0.96825).abs() < 1e-5);
        assert_relative_eq!(
            loss,
            ciou_center_oracle(&bx(0.0, 0.0, 2.0, 2.0), &bx(1.0, 1.0, 3.0, 3.0)),
            epsilon = 1e-12
        );
    }

    #[test]
    fn ciou_aspect_penalty_case() {
        let pred = bx(0.0, 0.0, 1.0, 1.0);
        let gt = bx(0.0, 0.0, 1.0, 2.0);
        let (loss, c) = ciou_loss(&pred, &gt);
        assert_relative_eq!(c.iou, 0.5, max_relative = 1e-12);
        assert_relative_eq!(c.rho2, 0.25, max_relative = 1e-12);
        assert_relative_eq!(c.c2, 5.0, max_relative = 1e-6);
        assert!((c.v - 0.041957).abs() < 1e-5);
        assert!((c.alpha - 0.077417).abs() < 1e-5);
        assert!((loss - 0.553248).abs() < 1e-5);
        assert_relative_eq!(loss, ciou_center_oracle(&pred, &gt), epsilon = 1e-12);
    }

    #[test]
    fn ciou_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let step = 1e-5;
        for _ in 0..100 {
            let pred = random_box(&mut rng);
            let gt = random_box(&mut rng);
            let (_, comps, gp, gg) = ciou_loss_with_grad(&pred, &gt);
            let alpha = comps.alpha;
            for coord in 0..8 {
                let perturb = |eps: f64| {
                    let mut p = pred;
                    let mut g = gt;
                    let target = if coord < 4 { &mut p } else { &mut g };
                    match coord % 4 {
                        0 => target.x1 += eps,
                        1 => target.y1 += eps,
                        2 => target.x2 += eps,
                        _ => target.y2 += eps,
                    }
                    ciou_loss_with_fixed_alpha(&p, &g, alpha)
                };
                let fd = (perturb(step) - perturb(-step)) / (2.0 * step);
                let analytic = if coord < 4 { gp[coord] } else { gg[coord % 4] };
                let rel = (analytic - fd).abs() / analytic.abs().max(fd.abs()).max(1.0);
                assert!(
                    rel < 1e-4,
                    "coord {coord}: analytic={analytic} fd={fd} rel={rel} pred={pred:?} gt={gt:?}"
                );
            }
        }
    }

    #[test]
    fn nms_dominance_and_categories() {
        let hi = bx(0.0, 0.0, 10.0, 10.0).with_score(0, 0.9);
        let lo = bx(0.5, 0.0, 10.0, 10.0).with_score(0, 0.8); // iou ~ 0.905
        assert!(iou(&hi, &lo) > 0.65);
        let kept = nms(&[lo, hi], 0.65, 0.0);
        assert_eq!(kept.len(), 1);
        assert_eq!(kept[0].confidence, 0.9);

        let other_cat = lo.with_score(1, 0.8);
        let kept = nms(&[hi, other_cat], 0.65, 0.0);
        assert_eq!(kept.len(), 2);
    }

    #[test]
    fn nms_confidence_threshold_and_empty() {
        assert!(nms(&[], 0.5, 0.0).is_empty());
        let weak = bx(0.0, 0.0, 1.0, 1.0).with_score(0, 1e-4);
        assert!(nms(&[weak], 0.5, 1e-3).is_empty());
    }

    /// Brute-force suppression oracle: quadratic scan, no sorting shortcuts.
    fn nms_oracle(dets: &[CornerBox], thr: f64, conf: f64) -> Vec<CornerBox> {
        let mut idx: Vec<usize> = (0..dets.len())
            .filter(|&i| dets[i].confidence >= conf)
            .collect();
        idx.sort_by(|&a, &b| {
            dets[b]
                .confidence
                .partial_cmp(&dets[a].confidence)
                .unwrap()
                .then(a.cmp(&b))
        });
        let mut keep_flags = vec![false; dets.len()];
        for (pos, &i) in idx.iter().enumerate() {
            let mut ok = true;
            for &j in &idx[..pos] {
                if keep_flags[j]
                    && dets[j].category_id == dets[i].category_id
                    && iou(&dets[j], &dets[i]) > thr
                {
                    ok = false;
                    break;
                }
            }
            keep_flags[i] = ok;
        }
        let mut out: Vec<CornerBox> = idx
            .into_iter()
            .filter(|&i| keep_flags[i])
            .map(|i| dets[i])
            .collect();
        out.sort_by(|a, b| b.confidence.partial_cmp(&a.confidence).unwrap());
        out
    }

    #[test]
    fn nms_matches_bruteforce_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for _ in 0..20 {
            let dets: Vec<CornerBox> = (0..20)
                .map(|_| {
                    random_box(&mut rng).with_score(rng.random_range(0..3), rng.random::<f64>())
                })
                .collect();
            let got = nms(&dets, 0.5, 0.05);
            let want = nms_oracle(&dets, 0.5, 0.05);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn center_corner_roundtrip() {
        let b = BoundingBox::new(0.31, 0.72, 0.125, 0.4, 2);
        let rt = b.to_corner(640.0, 480.0).to_center(640.0, 480.0);
        assert!((rt.cx - b.cx).abs() < 1e-9);
        assert!((rt.cy - b.cy).abs() < 1e-9);
        assert!((rt.w - b.w).abs() < 1e-9);
        assert!((rt.h - b.h).abs() < 1e-9);
    }

    proptest! {
        #[test]
        fn iou_symmetric_and_reflexive(
            x1 in -5.0..5.0f64, y1 in -5.0..5.0f64, w in 0.1..4.0f64, h in 0.1..4.0f64,
            x1b in -5.0..5.0f64, y1b in -5.0..5.0f64, wb in 0.1..4.0f64, hb in 0.1..4.0f64,
        ) {
            let a = bx(x1, y1, x1 + w, y1 + h);
            let b = bx(x1b, y1b, x1b + wb, y1b + hb);
            prop_assert!((iou(&a, &b) - iou(&b, &a)).abs() < 1e-12);
            prop_assert_eq!(iou(&a, &a), 1.0);
            let i = iou(&a, &b);
            prop_assert!((0.0..=1.0).contains(&i));
        }

        #[test]
        fn ciou_dominates_one_minus_iou(
            x1 in -5.0..5.0f64, y1 in -5.0..5.0f64, w in 0.1..4.0f64, h in 0.1..4.0f64,
            x1b in -5.0..5.0f64, y1b in -5.0..5.0f64, wb in 0.1..4.0f64, hb in 0.1..4.0f64,
        ) {
            let a = bx(x1, y1, x1 + w, y1 + h);
            let b = bx(x1b, y1b, x1b + wb, y1b + hb);
            let (loss, c) = ciou_loss(&a, &b);
            prop_assert!(loss >= 1.0 - c.iou - 1e-12);
            prop_assert!(loss.is_finite());
        }

        #[test]
        fn iou_invariant_under_translation_and_scale(
            x1 in -5.0..5.0f64, y1 in -5.0..5.0f64, w in 0.1..4.0f64, h in 0.1..4.0f64,
            x1b in -5.0..5.0f64, y1b in -5.0..5.0f64, wb in 0.1..4.0f64, hb in 0.1..4.0f64,
            tx in -10.0..10.0f64, ty in -10.0..10.0f64, s in 0.1..10.0f64,
        ) {
            let a = bx(x1, y1, x1 + w, y1 + h);
            let b = bx(x1b, y1b, x1b + wb, y1b + hb);
            let map = |r: &CornerBox| bx(
                (r.x1 + tx) * s, (r.y1 + ty) * s, (r.x2 + tx) * s, (r.y2 + ty) * s,
            );
            let (_, c0) = ciou_loss(&a, &b);
            let (_, c1) = ciou_loss(&map(&a), &map(&b));
            prop_assert!((c0.iou - c1.iou).abs() < 1e-9);
            // v and alpha are scale invariant only up to the epsilon guard in
            // the aspect-ratio denominator
            prop_assert!((c0.v - c1.v).abs() < 1e-4);
            prop_assert!((c0.alpha - c1.alpha).abs() < 1e-4);
            // rho2/c2 is scale free up to the epsilon in c2
            prop_assert!((c0.rho2 / c0.c2 - c1.rho2 / c1.c2).abs() < 1e-6);
        }

        #[test]
        fn nms_subset_and_idempotent(seed in 0u64..500) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let dets: Vec<CornerBox> = (0..12)
                .map(|_| random_box(&mut rng).with_score(rng.random_range(0..2), rng.random::<f64>()))
                .collect();
            let once = nms(&dets, 0.5, 0.0);
            for k in &once {
                prop_assert!(dets.iter().any(|d| d == k));
            }
            let twice = nms(&once, 0.5, 0.0);
            prop_assert_eq!(once, twice);
        }
    }
}
