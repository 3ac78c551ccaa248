//! Image preprocessing (CLAHE, unsharp masking) and the MIX training
//! augmentation: letterbox resize, mosaic, mixup, rotation and horizontal
//! flip, with label geometry transformed by the same maps.

use ndarray::{Array2, Array3};
use rand::Rng;
use rand_distr::{Beta, Distribution};
use serde::{Deserialize, Serialize};

use crate::datamodel::Sample;
use crate::error::{Error, Result};
use crate::geometry::BoundingBox;

pub type ImageU8 = Array3<u8>;

/// CLAHE parameters: tiles per side and the relative clip limit.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ClaheConfig {
    pub window_size: usize,
    pub clip_limit: f64,
}

impl Default for ClaheConfig {
    fn default() -> Self {
        ClaheConfig {
            window_size: 8,
            clip_limit: 4.0,
        }
    }
}

/// Contrast-limited adaptive histogram equalization on a single channel,
/// over a `ws x ws` tile grid with bilinear LUT interpolation between tiles.
pub fn clahe_gray(image: &Array2<u8>, cfg: &ClaheConfig) -> Result<Array2<u8>> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let ws = cfg.window_size;
    if ws < 1 || cfg.clip_limit < 1.0 {
        return Err(Error::Config(
            "clahe requires window_size >= 1 and clip_limit >= 1".into(),
        ));
    }
    if h < ws || w < ws {
        return Err(Error::Config(format!(
            "image {h}x{w} smaller than the {ws}x{ws} tile grid"
        )));
    }
    // pad to tile multiples by edge replication
    let tile_h = h.div_ceil(ws);
    let tile_w = w.div_ceil(ws);
    let (ph, pw) = (tile_h * ws, tile_w * ws);
    let padded = Array2::from_shape_fn((ph, pw), |(y, x)| image[[y.min(h - 1), x.min(w - 1)]]);

    // per-tile clipped histogram -> LUT
    let area = tile_h * tile_w;
    let scale = 255.0 / area as f64;
    let clip = ((cfg.clip_limit * area as f64 / 256.0) as usize).max(1);
    let mut luts = vec![[0u8; 256]; ws * ws];
    for ty in 0..ws {
        for tx in 0..ws {
            let mut hist = [0usize; 256];
            for y in ty * tile_h..(ty + 1) * tile_h {
                for x in tx * tile_w..(tx + 1) * tile_w {
                    hist[padded[[y, x]] as usize] += 1;
                }
            }
            // clip and redistribute the excess
            let mut excess = 0usize;
            for bin in hist.iter_mut() {
                if *bin > clip {
                    excess += *bin - clip;
                    *bin = clip;
                }
            }
            let add = excess / 256;
            let mut residual = excess % 256;
            for bin in hist.iter_mut() {
                *bin += add;
            }
            if residual > 0 {
                let step = (256 / residual).max(1);
                let mut i = 0;
                while residual > 0 && i < 256 {
                    hist[i] += 1;
                    residual -= 1;
                    i += step;
                }
            }
            let lut = &mut luts[ty * ws + tx];
            let mut cdf = 0usize;
            for v in 0..256 {
                cdf += hist[v];
                lut[v] = (cdf as f64 * scale).round().clamp(0.0, 255.0) as u8;
            }
        }
    }

    // bilinear interpolation between the four surrounding tile LUTs
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        let fy = (y as f64 + 0.5) / tile_h as f64 - 0.5;
        let ty0 = fy.floor().clamp(0.0, ws as f64 - 1.0) as usize;
        let ty1 = (ty0 + 1).min(ws - 1);
        let wy = (fy - ty0 as f64).clamp(0.0, 1.0);
        for x in 0..w {
            let fx = (x as f64 + 0.5) / tile_w as f64 - 0.5;
            let tx0 = fx.floor().clamp(0.0, ws as f64 - 1.0) as usize;
            let tx1 = (tx0 + 1).min(ws - 1);
            let wx = (fx - tx0 as f64).clamp(0.0, 1.0);
            let v = image[[y, x]] as usize;
            let v00 = luts[ty0 * ws + tx0][v] as f64;
            let v01 = luts[ty0 * ws + tx1][v] as f64;
            let v10 = luts[ty1 * ws + tx0][v] as f64;
            let v11 = luts[ty1 * ws + tx1][v] as f64;
            let top = v00 * (1.0 - wx) + v01 * wx;
            let bot = v10 * (1.0 - wx) + v11 * wx;
            out[[y, x]] = (top * (1.0 - wy) + bot * wy).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// CLAHE on a (3, H, W) raster: equalize the luminance and reapply per
/// channel (replicated grayscale collapses to plain per-channel CLAHE).
pub fn clahe(image: &ImageU8, cfg: &ClaheConfig) -> Result<ImageU8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let luma = Array2::from_shape_fn((h, w), |(y, x)| {
        let r = image[[0, y, x]] as f64;
        let g = image[[1, y, x]] as f64;
        let b = image[[2, y, x]] as f64;
        (0.299 * r + 0.587 * g + 0.114 * b).round().clamp(0.0, 255.0) as u8
    });
    let eq = clahe_gray(&luma, cfg)?;
    let mut out = image.clone();
    for y in 0..h {
        for x in 0..w {
            let before = luma[[y, x]] as f64;
            let after = eq[[y, x]] as f64;
            if before < 0.5 {
                for c in 0..3 {
                    out[[c, y, x]] = after.round() as u8;
                }
            } else {
                let ratio = after / before;
                for c in 0..3 {
                    out[[c, y, x]] =
                        (image[[c, y, x]] as f64 * ratio).round().clamp(0.0, 255.0) as u8;
                }
            }
        }
    }
    Ok(out)
}

/// Smoothing kernel choice for unsharp masking.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum UnsharpFilter {
    Median,
    Gaussian,
}

fn median_filter(image: &Array2<u8>, k: usize) -> Array2<u8> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let r = (k / 2) as isize;
    let mut out = Array2::<u8>::zeros((h, w));
    let mut window = Vec::with_capacity(k * k);
    for y in 0..h {
        for x in 0..w {
            window.clear();
            for dy in -r..=r {
                for dx in -r..=r {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                    window.push(image[[yy, xx]]);
                }
            }
            window.sort_unstable();
            out[[y, x]] = window[window.len() / 2];
        }
    }
    out
}

fn gaussian_filter(image: &Array2<u8>, k: usize) -> Array2<u8> {
    let sigma = 0.3 * ((k as f64 - 1.0) * 0.5 - 1.0) + 0.8;
    let r = (k / 2) as isize;
    let mut kernel = Vec::with_capacity(k);
    let mut sum = 0.0;
    for i in -r..=r {
        let v = (-(i * i) as f64 / (2.0 * sigma * sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in kernel.iter_mut() {
        *v /= sum;
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    // horizontal then vertical pass, border replicate
    let mut tmp = Array2::<f64>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let xx = (x as isize + i as isize - r).clamp(0, w as isize - 1) as usize;
                acc += image[[y, xx]] as f64 * kv;
            }
            tmp[[y, x]] = acc;
        }
    }
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (i, kv) in kernel.iter().enumerate() {
                let yy = (y as isize + i as isize - r).clamp(0, h as isize - 1) as usize;
                acc += tmp[[yy, x]] * kv;
            }
            out[[y, x]] = acc.round().clamp(0.0, 255.0) as u8;
        }
    }
    out
}

/// Unsharp masking on one channel:
/// `clamp(image + amount * (image - smooth(image)))`.
pub fn unsharp_mask_gray(
    image: &Array2<u8>,
    filter: UnsharpFilter,
    amount: f64,
    kernel: usize,
) -> Result<Array2<u8>> {
    if kernel % 2 == 0 || kernel < 3 {
        return Err(Error::Config(format!(
            "unsharp kernel must be odd and >= 3, got {kernel}"
        )));
    }
    let smooth = match filter {
        UnsharpFilter::Median => median_filter(image, kernel),
        UnsharpFilter::Gaussian => gaussian_filter(image, kernel),
    };
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let mut out = Array2::<u8>::zeros((h, w));
    for y in 0..h {
        for x in 0..w {
            let v = image[[y, x]] as f64;
            let s = smooth[[y, x]] as f64;
            out[[y, x]] = (v + amount * (v - s)).round().clamp(0.0, 255.0) as u8;
        }
    }
    Ok(out)
}

/// Unsharp masking channelwise on a (3, H, W) raster.
pub fn unsharp_mask(
    image: &ImageU8,
    filter: UnsharpFilter,
    amount: f64,
    kernel: usize,
) -> Result<ImageU8> {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = ImageU8::zeros((3, h, w));
    for c in 0..3 {
        let channel = Array2::from_shape_fn((h, w), |(y, x)| image[[c, y, x]]);
        let done = unsharp_mask_gray(&channel, filter, amount, kernel)?;
        for y in 0..h {
            for x in 0..w {
                out[[c, y, x]] = done[[y, x]];
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// MIX augmentation
// ---------------------------------------------------------------------------

/// Training augmentation parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub target_size: usize,
    pub p_mosaic: f64,
    pub p_mixup: f64,
    /// Maximum absolute rotation in degrees.
    pub rot_deg: f64,
    pub p_hflip: f64,
    pub seed: u64,
    /// Letterbox/rotation fill value.
    #[serde(default = "default_pad_value")]
    pub pad_value: u8,
}

fn default_pad_value() -> u8 {
    114
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            target_size: 640,
            p_mosaic: 0.15,
            p_mixup: 0.15,
            rot_deg: 15.0,
            p_hflip: 0.5,
            seed: 0,
            pad_value: 114,
        }
    }
}

impl AugmentConfig {
    /// Identity pipeline: letterbox resize only.
    pub fn identity(target_size: usize) -> Self {
        AugmentConfig {
            target_size,
            p_mosaic: 0.0,
            p_mixup: 0.0,
            rot_deg: 0.0,
            p_hflip: 0.0,
            seed: 0,
            pad_value: 114,
        }
    }
}

/// Source of extra samples for mosaic/mixup.
pub trait SamplePool {
    fn len(&self) -> usize;
    fn is_empty(&self) -> bool {
        self.len() == 0
    }
    fn get(&self, index: usize) -> Result<Sample>;
}

impl SamplePool for Vec<Sample> {
    fn len(&self) -> usize {
        Vec::len(self)
    }
    fn get(&self, index: usize) -> Result<Sample> {
        Ok(self[index].clone())
    }
}

/// Deterministic per-sample seed: FNV-1a over the global seed, image id and
/// epoch.
pub fn sample_seed(global_seed: u64, image_id: &str, epoch: usize) -> u64 {
    let mut h: u64 = 0xcbf29ce484222325;
    let mut eat = |byte: u8| {
        h ^= byte as u64;
        h = h.wrapping_mul(0x100000001b3);
    };
    for b in global_seed.to_le_bytes() {
        eat(b);
    }
    for b in image_id.as_bytes() {
        eat(*b);
    }
    for b in (epoch as u64).to_le_bytes() {
        eat(b);
    }
    h
}

fn resize_bilinear(image: &ImageU8, out_h: usize, out_w: usize) -> ImageU8 {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let mut out = ImageU8::zeros((3, out_h, out_w));
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    for y in 0..out_h {
        let fy = ((y as f64 + 0.5) * sy - 0.5).clamp(0.0, h as f64 - 1.0);
        let y0 = fy.floor() as usize;
        let y1 = (y0 + 1).min(h - 1);
        let wy = fy - y0 as f64;
        for x in 0..out_w {
            let fx = ((x as f64 + 0.5) * sx - 0.5).clamp(0.0, w as f64 - 1.0);
            let x0 = fx.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let wx = fx - x0 as f64;
            for c in 0..3 {
                let v00 = image[[c, y0, x0]] as f64;
                let v01 = image[[c, y0, x1]] as f64;
                let v10 = image[[c, y1, x0]] as f64;
                let v11 = image[[c, y1, x1]] as f64;
                let top = v00 * (1.0 - wx) + v01 * wx;
                let bot = v10 * (1.0 - wx) + v11 * wx;
                out[[c, y, x]] = (top * (1.0 - wy) + bot * wy).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Boxes carried in absolute pixel corners during composition.
#[derive(Debug, Clone, Copy)]
struct PixBox {
    x1: f64,
    y1: f64,
    x2: f64,
    y2: f64,
    category_id: usize,
}

/// Letterbox `sample` into a `rw x rh` rectangle placed at `(ox, oy)` of the
/// canvas; returns transformed boxes.
fn letterbox_into(
    canvas: &mut ImageU8,
    sample: &Sample,
    ox: usize,
    oy: usize,
    rw: usize,
    rh: usize,
    boxes: &mut Vec<PixBox>,
) {
    let (h, w) = (sample.image.shape()[1], sample.image.shape()[2]);
    let scale = (rw as f64 / w as f64).min(rh as f64 / h as f64);
    let nw = ((w as f64 * scale).round() as usize).clamp(1, rw);
    let nh = ((h as f64 * scale).round() as usize).clamp(1, rh);
    let resized = resize_bilinear(&sample.image, nh, nw);
    let px = ox + (rw - nw) / 2;
    let py = oy + (rh - nh) / 2;
    for c in 0..3 {
        for y in 0..nh {
            for x in 0..nw {
                canvas[[c, py + y, px + x]] = resized[[c, y, x]];
            }
        }
    }
    let fx = nw as f64 / w as f64;
    let fy = nh as f64 / h as f64;
    for b in &sample.boxes {
        let corner = b.to_corner(w as f64, h as f64);
        boxes.push(PixBox {
            x1: corner.x1 * fx + px as f64,
            y1: corner.y1 * fy + py as f64,
            x2: corner.x2 * fx + px as f64,
            y2: corner.y2 * fy + py as f64,
            category_id: b.category_id,
        });
    }
}

fn rotate_canvas(image: &ImageU8, theta: f64, fill: u8) -> ImageU8 {
    let (h, w) = (image.shape()[1], image.shape()[2]);
    let (cy, cx) = ((h as f64 - 1.0) / 2.0, (w as f64 - 1.0) / 2.0);
    let (sin, cos) = theta.sin_cos();
    let mut out = ImageU8::zeros((3, h, w));
    for y in 0..h {
        for x in 0..w {
            // inverse map: rotate by -theta around the center
            let dx = x as f64 - cx;
            let dy = y as f64 - cy;
            let sx = cos * dx + sin * dy + cx;
            let sy = -sin * dx + cos * dy + cy;
            if sx < 0.0 || sy < 0.0 || sx > w as f64 - 1.0 || sy > h as f64 - 1.0 {
                for c in 0..3 {
                    out[[c, y, x]] = fill;
                }
                continue;
            }
            let x0 = sx.floor() as usize;
            let y0 = sy.floor() as usize;
            let x1 = (x0 + 1).min(w - 1);
            let y1 = (y0 + 1).min(h - 1);
            let wx = sx - x0 as f64;
            let wy = sy - y0 as f64;
            for c in 0..3 {
                let v00 = image[[c, y0, x0]] as f64;
                let v01 = image[[c, y0, x1]] as f64;
                let v10 = image[[c, y1, x0]] as f64;
                let v11 = image[[c, y1, x1]] as f64;
                let top = v00 * (1.0 - wx) + v01 * wx;
                let bot = v10 * (1.0 - wx) + v11 * wx;
                out[[c, y, x]] = (top * (1.0 - wy) + bot * wy).round().clamp(0.0, 255.0) as u8;
            }
        }
    }
    out
}

/// Axis-aligned hull of the four rotated corners.
fn rotate_box(b: &PixBox, theta: f64, cx: f64, cy: f64) -> PixBox {
    let (sin, cos) = theta.sin_cos();
    let corners = [
        (b.x1, b.y1),
        (b.x2, b.y1),
        (b.x1, b.y2),
        (b.x2, b.y2),
    ];
    let mut x_min = f64::MAX;
    let mut x_max = f64::MIN;
    let mut y_min = f64::MAX;
    let mut y_max = f64::MIN;
    for (x, y) in corners {
        let dx = x - cx;
        let dy = y - cy;
        // forward map matches the image resampling's inverse map
        let rx = cos * dx - sin * dy + cx;
        let ry = sin * dx + cos * dy + cy;
        x_min = x_min.min(rx);
        x_max = x_max.max(rx);
        y_min = y_min.min(ry);
        y_max = y_max.max(ry);
    }
    PixBox {
        x1: x_min,
        y1: y_min,
        x2: x_max,
        y2: y_max,
        category_id: b.category_id,
    }
}

/// Build one augmented canvas (letterbox or mosaic, then rotation and flip).
fn build_canvas(
    primary: &Sample,
    pool: &dyn SamplePool,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> (ImageU8, Vec<PixBox>) {
    let s = cfg.target_size;
    let mut boxes: Vec<PixBox> = Vec::new();
    let use_mosaic = rng.random::<f64>() < cfg.p_mosaic && pool.len() >= 3;
    let mut canvas = if use_mosaic {
        // 2S x 2S canvas split at a random point; primary top-left, three
        // pool draws in the other quadrants; downscaled to S afterwards
        let mut big = ImageU8::from_elem((3, 2 * s, 2 * s), cfg.pad_value);
        let qx = rng.random_range((s / 2)..(3 * s / 2));
        let qy = rng.random_range((s / 2)..(3 * s / 2));
        let quads = [
            (0usize, 0usize, qx, qy),
            (qx, 0, 2 * s - qx, qy),
            (0, qy, qx, 2 * s - qy),
            (qx, qy, 2 * s - qx, 2 * s - qy),
        ];
        letterbox_into(&mut big, primary, quads[0].0, quads[0].1, quads[0].2, quads[0].3, &mut boxes);
        for quad in &quads[1..] {
            let idx = rng.random_range(0..pool.len());
            if let Ok(sample) = pool.get(idx) {
                letterbox_into(&mut big, &sample, quad.0, quad.1, quad.2, quad.3, &mut boxes);
            }
        }
        for b in &mut boxes {
            b.x1 *= 0.5;
            b.y1 *= 0.5;
            b.x2 *= 0.5;
            b.y2 *= 0.5;
        }
        resize_bilinear(&big, s, s)
    } else {
        let mut c = ImageU8::from_elem((3, s, s), cfg.pad_value);
        letterbox_into(&mut c, primary, 0, 0, s, s, &mut boxes);
        c
    };

    // rotation
    if cfg.rot_deg > 0.0 {
        let theta = rng.random_range(-cfg.rot_deg..cfg.rot_deg).to_radians();
        canvas = rotate_canvas(&canvas, theta, cfg.pad_value);
        let c = (s as f64 - 1.0) / 2.0;
        for b in boxes.iter_mut() {
            *b = rotate_box(b, theta, c, c);
        }
    }

    // horizontal flip
    if rng.random::<f64>() < cfg.p_hflip {
        let flipped = ImageU8::from_shape_fn((3, s, s), |(c, y, x)| canvas[[c, y, s - 1 - x]]);
        canvas = flipped;
        for b in boxes.iter_mut() {
            let (x1, x2) = (s as f64 - b.x2, s as f64 - b.x1);
            b.x1 = x1;
            b.x2 = x2;
        }
    }
    (canvas, boxes)
}

/// The MIX augmentation: mosaic (p), rotation, horizontal flip (p), then
/// mixup (p) blending two canvases with a Beta(8,8) weight and unioned
/// labels. Output is exactly `target_size^2` with normalized boxes; boxes
/// clipped below 10% of their transformed area or under 2 px are dropped.
pub fn mix_augment(
    primary: &Sample,
    pool: &dyn SamplePool,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Sample {
    let s = cfg.target_size;
    let (mut canvas, mut boxes) = build_canvas(primary, pool, cfg, rng);

    if rng.random::<f64>() < cfg.p_mixup && !pool.is_empty() {
        let idx = rng.random_range(0..pool.len());
        if let Ok(other) = pool.get(idx) {
            let (other_canvas, other_boxes) = build_canvas(&other, pool, cfg, rng);
            let lambda = Beta::new(8.0, 8.0).unwrap().sample(rng);
            for c in 0..3 {
                for y in 0..s {
                    for x in 0..s {
                        let a = canvas[[c, y, x]] as f64;
                        let b = other_canvas[[c, y, x]] as f64;
                        canvas[[c, y, x]] =
                            (a * lambda + b * (1.0 - lambda)).round().clamp(0.0, 255.0) as u8;
                    }
                }
            }
            boxes.extend(other_boxes);
        }
    }

    // clip to the canvas, drop degenerate leftovers
    let mut out_boxes = Vec::new();
    for b in &boxes {
        let area_before = (b.x2 - b.x1).max(0.0) * (b.y2 - b.y1).max(0.0);
        let x1 = b.x1.clamp(0.0, s as f64);
        let y1 = b.y1.clamp(0.0, s as f64);
        let x2 = b.x2.clamp(0.0, s as f64);
        let y2 = b.y2.clamp(0.0, s as f64);
        let (w, h) = (x2 - x1, y2 - y1);
        if w < 2.0 || h < 2.0 {
            continue;
        }
        if area_before > 0.0 && (w * h) / area_before < 0.10 {
            continue;
        }
        let mut bb = BoundingBox::new(
            (x1 + x2) / 2.0 / s as f64,
            (y1 + y2) / 2.0 / s as f64,
            w / s as f64,
            h / s as f64,
            b.category_id,
        );
        bb.confidence = 1.0;
        out_boxes.push(bb);
    }

    Sample {
        image_id: primary.image_id.clone(),
        image: canvas,
        boxes: out_boxes,
    }
}
