//! Anchor table and Center-Prior assignment of ground-truth boxes to
//! (head, cell, anchor) training candidates.

use serde::{Deserialize, Serialize};

use crate::geometry::BoundingBox;

/// Per-scale anchor templates (pixel width/height) plus stride metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorSet {
    /// Three (width, height) pairs per scale, small to large.
    pub anchors: [[(f64, f64); 3]; 3],
    pub strides: [usize; 3],
}

impl Default for AnchorSet {
    /// The shipped anchor table for 640-pixel inputs.
    fn default() -> Self {
        AnchorSet {
            anchors: [
                [(12.0, 16.0), (19.0, 36.0), (40.0, 28.0)],
                [(36.0, 75.0), (76.0, 55.0), (72.0, 146.0)],
                [(142.0, 110.0), (192.0, 243.0), (459.0, 401.0)],
            ],
            strides: [8, 16, 32],
        }
    }
}

impl AnchorSet {
    /// Anchor table scaled by a factor (for inputs that are not 640 wide).
    pub fn scaled(&self, factor: f64) -> AnchorSet {
        let mut out = self.clone();
        for scale in &mut out.anchors {
            for a in scale.iter_mut() {
                a.0 *= factor;
                a.1 *= factor;
            }
        }
        out
    }

    pub fn num_heads(&self) -> usize {
        3
    }

    pub fn num_anchors(&self) -> usize {
        3
    }
}

/// Tunable predicates of the Center Prior.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AssignConfig {
    /// Upper bound (exclusive) on max(w_t/w_a, w_a/w_t, h_t/h_a, h_a/h_t).
    pub ratio_threshold: f64,
    /// Cell-fraction radius admitting the nearer horizontal/vertical
    /// neighbor cells.
    pub center_radius: f64,
}

impl Default for AssignConfig {
    fn default() -> Self {
        AssignConfig {
            ratio_threshold: 4.0,
            center_radius: 0.5,
        }
    }
}

/// One training candidate: a target replicated onto a (head, cell, anchor).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub struct AssignmentEntry {
    pub head: usize,
    pub cell_y: usize,
    pub cell_x: usize,
    pub anchor: usize,
    pub target_index: usize,
}

/// All candidates for one image.
#[derive(Debug, Clone, Default)]
pub struct Assignment {
    pub entries: Vec<AssignmentEntry>,
}

/// Size-compatibility predicate of the Center Prior.
pub fn ratio_ok(
    target_w: f64,
    target_h: f64,
    anchor_w: f64,
    anchor_h: f64,
    threshold: f64,
) -> bool {
    let rw = (target_w / anchor_w).max(anchor_w / target_w);
    let rh = (target_h / anchor_h).max(anchor_h / target_h);
    rw.max(rh) < threshold
}

/// Center Prior assignment. Targets are normalized boxes; for each head, every
/// size-compatible anchor is replicated to the cell containing the target
/// center plus the nearer horizontal and nearer vertical neighbor cells
/// admitted by `center_radius`. An empty overall assignment is permitted.
pub fn assign(
    targets: &[BoundingBox],
    anchors: &AnchorSet,
    input_size: usize,
    cfg: &AssignConfig,
) -> Assignment {
    let mut entries = Vec::new();
    for (ti, target) in targets.iter().enumerate() {
        let tw = target.w * input_size as f64;
        let th = target.h * input_size as f64;
        for (head, stride) in anchors.strides.iter().enumerate() {
            let grid = input_size / stride;
            let gx = target.cx * grid as f64;
            let gy = target.cy * grid as f64;
            let cx = (gx.floor() as isize).clamp(0, grid as isize - 1);
            let cy = (gy.floor() as isize).clamp(0, grid as isize - 1);
            let fx = gx - gx.floor();
            let fy = gy - gy.floor();

            let mut cells: Vec<(isize, isize)> = vec![(cy, cx)];
            if fx < cfg.center_radius && cx > 0 {
                cells.push((cy, cx - 1));
            } else if fx > 1.0 - cfg.center_radius && cx + 1 < grid as isize {
                cells.push((cy, cx + 1));
            }
            if fy < cfg.center_radius && cy > 0 {
                cells.push((cy - 1, cx));
            } else if fy > 1.0 - cfg.center_radius && cy + 1 < grid as isize {
                cells.push((cy + 1, cx));
            }

            for (anchor, &(aw, ah)) in anchors.anchors[head].iter().enumerate() {
                if !ratio_ok(tw, th, aw, ah, cfg.ratio_threshold) {
                    continue;
                }
                for &(y, x) in &cells {
                    entries.push(AssignmentEntry {
                        head,
                        cell_y: y as usize,
                        cell_x: x as usize,
                        anchor,
                        target_index: ti,
                    });
                }
            }
        }
    }
    if entries.is_empty() && !targets.is_empty() {
        log::debug!("assignment is empty for {} targets", targets.len());
    }
    Assignment { entries }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::collections::BTreeSet;

    /// Exhaustive oracle: enumerate all heads x cells x anchors and evaluate
    /// the two predicates directly per cell.
    fn assign_oracle(
        targets: &[BoundingBox],
        anchors: &AnchorSet,
        input_size: usize,
        cfg: &AssignConfig,
    ) -> BTreeSet<AssignmentEntry> {
        let mut out = BTreeSet::new();
        for (ti, t) in targets.iter().enumerate() {
            let tw = t.w * input_size as f64;
            let th = t.h * input_size as f64;
            for head in 0..3 {
                let stride = anchors.strides[head];
                let grid = input_size / stride;
                let gx = t.cx * grid as f64;
                let gy = t.cy * grid as f64;
                for anchor in 0..3 {
                    let (aw, ah) = anchors.anchors[head][anchor];
                    if !ratio_ok(tw, th, aw, ah, cfg.ratio_threshold) {
                        continue;
                    }
                    for cy in 0..grid {
                        for cx in 0..grid {
                            // containing cell
                            let containing = (gx.floor().clamp(0.0, grid as f64 - 1.0) as usize
                                == cx)
                                && (gy.floor().clamp(0.0, grid as f64 - 1.0) as usize == cy);
                            // nearer horizontal neighbor within radius
                            let fx = gx - gx.floor();
                            let fy = gy - gy.floor();
                            let same_row = gy.floor().clamp(0.0, grid as f64 - 1.0) as usize == cy;
                            let same_col = gx.floor().clamp(0.0, grid as f64 - 1.0) as usize == cx;
                            let base_x = gx.floor().clamp(0.0, grid as f64 - 1.0) as isize;
                            let base_y = gy.floor().clamp(0.0, grid as f64 - 1.0) as isize;
                            let h_neighbor = same_row
                                && ((fx < cfg.center_radius && cx as isize == base_x - 1)
                                    || (fx > 1.0 - cfg.center_radius
                                        && cx as isize == base_x + 1));
                            let v_neighbor = same_col
                                && ((fy < cfg.center_radius && cy as isize == base_y - 1)
                                    || (fy > 1.0 - cfg.center_radius
                                        && cy as isize == base_y + 1));
                            if containing || h_neighbor || v_neighbor {
                                out.insert(AssignmentEntry {
                                    head,
                                    cell_y: cy,
                                    cell_x: cx,
                                    anchor,
                                    target_index: ti,
                                });
                            }
                        }
                    }
                }
            }
        }
        out
    }

    fn random_targets(rng: &mut impl Rng, n: usize) -> Vec<BoundingBox> {
        (0..n)
            .map(|_| {
                let w = rng.random_range(0.01..0.6);
                let h = rng.random_range(0.01..0.6);
                let cx = rng.random_range(w / 2.0..1.0 - w / 2.0);
                let cy = rng.random_range(h / 2.0..1.0 - h / 2.0);
                BoundingBox::new(cx, cy, w, h, rng.random_range(0..4))
            })
            .collect()
    }

    #[test]
    fn anchor_shaped_target_assigns_first_anchor_with_neighbors() {
        let anchors = AnchorSet::default();
        let cfg = AssignConfig::default();
        // 12x16 px target centered inside cell (10, 10) of the stride-8 head,
        // off-center so both neighbor rules fire
        let cx = (10.0 + 0.3) * 8.0 / 640.0;
        let cy = (10.0 + 0.7) * 8.0 / 640.0;
        let t = BoundingBox::new(cx, cy, 12.0 / 640.0, 16.0 / 640.0, 0);
        let a = assign(&[t], &anchors, 640, &cfg);
        let head0_anchor0: Vec<_> = a
            .entries
            .iter()
            .filter(|e| e.head == 0 && e.anchor == 0)
            .collect();
        assert_eq!(head0_anchor0.len(), 3, "{head0_anchor0:?}");
        assert!(head0_anchor0
            .iter()
            .any(|e| e.cell_y == 10 && e.cell_x == 10));
        assert!(head0_anchor0.iter().any(|e| e.cell_x == 9)); // fx=0.3 -> left
        assert!(head0_anchor0.iter().any(|e| e.cell_y == 11)); // fy=0.7 -> down
    }

    #[test]
    fn oversized_ratio_yields_no_assignment() {
        let anchors = AnchorSet::default();
        // 10x the widest anchor fails the ratio test everywhere
        let t = BoundingBox::new(0.5, 0.5, 4590.0 / 640.0 / 10.0 * 10.0, 0.1, 0);
        let a = assign(
            &[BoundingBox::new(0.5, 0.5, t.w.min(0.99), 0.0005, 0)],
            &anchors,
            640,
            &AssignConfig::default(),
        );
        assert!(a.entries.is_empty());
    }

    #[test]
    fn matches_bruteforce_oracle_on_random_instances() {
        let anchors = AnchorSet::default();
        let cfg = AssignConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(101);
        for _ in 0..50 {
            let n = rng.random_range(1..8);
            let targets = random_targets(&mut rng, n);
            let got: BTreeSet<_> = assign(&targets, &anchors, 640, &cfg)
                .entries
                .into_iter()
                .collect();
            let want = assign_oracle(&targets, &anchors, 640, &cfg);
            assert_eq!(got, want);
        }
    }

    #[test]
    fn shrinking_thresholds_is_monotone() {
        let anchors = AnchorSet::default();
        let mut rng = ChaCha8Rng::seed_from_u64(102);
        for _ in 0..20 {
            let targets = random_targets(&mut rng, 5);
            let base = AssignConfig::default();
            let tight = AssignConfig {
                ratio_threshold: 2.0,
                center_radius: 0.2,
            };
            let full: BTreeSet<_> = assign(&targets, &anchors, 640, &base)
                .entries
                .into_iter()
                .collect();
            let small: BTreeSet<_> = assign(&targets, &anchors, 640, &tight)
                .entries
                .into_iter()
                .collect();
            assert!(small.is_subset(&full));
        }
    }

    #[test]
    fn permutation_equivariance() {
        let anchors = AnchorSet::default();
        let cfg = AssignConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(103);
        let targets = random_targets(&mut rng, 6);
        let mut reversed = targets.clone();
        reversed.reverse();
        let fwd = assign(&targets, &anchors, 640, &cfg);
        let rev = assign(&reversed, &anchors, 640, &cfg);
        let remap: BTreeSet<_> = rev
            .entries
            .into_iter()
            .map(|mut e| {
                e.target_index = targets.len() - 1 - e.target_index;
                e
            })
            .collect();
        let fwd: BTreeSet<_> = fwd.entries.into_iter().collect();
        assert_eq!(fwd, remap);
    }

    #[test]
    fn every_entry_satisfies_predicates() {
        let anchors = AnchorSet::default();
        let cfg = AssignConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(104);
        let targets = random_targets(&mut rng, 10);
        let a = assign(&targets, &anchors, 640, &cfg);
        for e in &a.entries {
            let t = &targets[e.target_index];
            let (aw, ah) = anchors.anchors[e.head][e.anchor];
            assert!(ratio_ok(t.w * 640.0, t.h * 640.0, aw, ah, cfg.ratio_threshold));
            let grid = 640 / anchors.strides[e.head];
            let gx = t.cx * grid as f64;
            let gy = t.cy * grid as f64;
            // the cell center must be within one cell of the target center
            assert!((gx - (e.cell_x as f64 + 0.5)).abs() < 1.0);
            assert!((gy - (e.cell_y as f64 + 0.5)).abs() < 1.0);
        }
    }
}
