//! Shifted-window attention: the Swin block, patch merging, and the
//! cross-stage-partial wrapper (SWCSP) inserted before detection heads.

use ndarray::{Array3, ArrayD, IxDyn};

use super::{Conv2dLayer, LayerNorm, LinearLayer, Mode, Scope};
use crate::error::{Error, Result};
use crate::tensor::{bmm, concat, gather_columns, softmax_last, Scalar, Tensor};

/// Hyperparameters of one Swin attention block.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SwinParams {
    /// Window side in tokens.
    pub window: usize,
    /// Per-head query dimension.
    pub head_dim: usize,
    /// MLP expansion ratio.
    pub mlp_ratio: usize,
    /// Learned relative position bias per window.
    pub rel_pos_bias: bool,
}

impl Default for SwinParams {
    fn default() -> Self {
        SwinParams {
            window: 7,
            head_dim: 32,
            mlp_ratio: 4,
            rel_pos_bias: true,
        }
    }
}

const MASK_NEG: f64 = -100.0;

/// Window-attention transformer block over a CNN feature map; every spatial
/// position is one token. Pre-norm MSA and MLP with residual connections;
/// features are zero-padded to window multiples and cropped back, padded
/// positions are masked out of attention.
pub struct SwinBlock<T: Scalar> {
    pub dim: usize,
    pub heads: usize,
    pub window: usize,
    pub shift: bool,
    ln1: LayerNorm<T>,
    qkv: LinearLayer<T>,
    proj: LinearLayer<T>,
    rel_table: Option<Tensor<T>>, // (heads, (2w-1)^2)
    rel_index: Vec<usize>,        // (w^2 * w^2)
    ln2: LayerNorm<T>,
    fc1: LinearLayer<T>,
    fc2: LinearLayer<T>,
}

impl<T: Scalar> SwinBlock<T> {
    pub fn new(scope: &Scope<T>, dim: usize, params: SwinParams, shift: bool) -> Self {
        assert!(
            dim % params.head_dim == 0,
            "embed dim {dim} must be a multiple of head_dim {}",
            params.head_dim
        );
        let heads = dim / params.head_dim;
        let w = params.window;
        let mut rel_index = Vec::with_capacity(w * w * w * w);
        for yi in 0..w {
            for xi in 0..w {
                for yj in 0..w {
                    for xj in 0..w {
                        let dy = yi as isize - yj as isize + (w as isize - 1);
                        let dx = xi as isize - xj as isize + (w as isize - 1);
                        rel_index.push((dy * (2 * w as isize - 1) + dx) as usize);
                    }
                }
            }
        }
        let rel_table = params.rel_pos_bias.then(|| {
            scope.trunc_normal("rel_bias", &[heads, (2 * w - 1) * (2 * w - 1)], 0.02)
        });
        SwinBlock {
            dim,
            heads,
            window: w,
            shift,
            ln1: LayerNorm::new(&scope.sub("ln1"), dim),
            qkv: LinearLayer::new(&scope.sub("qkv"), dim, 3 * dim, true),
            proj: LinearLayer::new(&scope.sub("proj"), dim, dim, true),
            rel_table,
            rel_index,
            ln2: LayerNorm::new(&scope.sub("ln2"), dim),
            fc1: LinearLayer::new(&scope.sub("fc1"), dim, params.mlp_ratio * dim, true),
            fc2: LinearLayer::new(&scope.sub("fc2"), params.mlp_ratio * dim, dim, true),
        }
    }

    /// Attention mask covering the cyclic-shift regions and padded positions:
    /// `(windows, n, n)` additive logits (0 or -100).
    fn build_mask(
        &self,
        hp: usize,
        wp: usize,
        h: usize,
        w_real: usize,
        shift: usize,
    ) -> Option<ArrayD<T>> {
        let w = self.window;
        let n = w * w;
        let (nh, nw) = (hp / w, wp / w);
        let pad = hp > h || wp > w_real;
        if shift == 0 && !pad {
            return None;
        }
        // region id at partition coordinates; usize::MAX marks padding
        let id_at = |py: usize, px: usize| -> usize {
            let oy = (py + shift) % hp;
            let ox = (px + shift) % wp;
            if oy >= h || ox >= w_real {
                return usize::MAX;
            }
            let band = |p: usize, extent: usize| -> usize {
                if shift == 0 || p < extent - w {
                    0
                } else if p < extent - shift {
                    1
                } else {
                    2
                }
            };
            band(py, hp) * 3 + band(px, wp)
        };
        let mut mask = Array3::<T>::zeros((nh * nw, n, n));
        for wy in 0..nh {
            for wx in 0..nw {
                let wi = wy * nw + wx;
                let ids: Vec<usize> = (0..n)
                    .map(|t| id_at(wy * w + t / w, wx * w + t % w))
                    .collect();
                for i in 0..n {
                    for j in 0..n {
                        if ids[j] == usize::MAX || ids[i] != ids[j] {
                            mask[[wi, i, j]] = T::cast(MASK_NEG);
                        }
                    }
                }
            }
        }
        Some(mask.into_dyn())
    }

    pub fn forward(&self, x: &Tensor<T>, _mode: Mode) -> Tensor<T> {
        let shape = x.shape();
        let (b, c, h, w_real) = (shape[0], shape[1], shape[2], shape[3]);
        assert_eq!(c, self.dim, "swin block dim mismatch");
        let w = self.window;
        let hp = h.div_ceil(w) * w;
        let wp = w_real.div_ceil(w) * w;
        let single_window = hp == w && wp == w;
        let shift = if self.shift && !single_window { w / 2 } else { 0 };

        let mut t = x.pad_hw(hp - h, wp - w_real);
        if shift > 0 {
            t = t.roll(2, -(shift as isize)).roll(3, -(shift as isize));
        }
        let (nh, nw) = (hp / w, wp / w);
        let n = w * w;
        let g = b * nh * nw;
        // (B,C,Hp,Wp) -> (G, N, C)
        let tokens = t
            .reshape(&[b, c, nh, w, nw, w])
            .permute(&[0, 2, 4, 3, 5, 1])
            .reshape(&[g, n, c]);

        // --- windowed MSA ---
        let normed = self.ln1.forward(&tokens);
        let qkv = self.qkv.forward(&normed); // (G, N, 3C)
        let heads = self.heads;
        let d = c / heads;
        let split_heads = |t: &Tensor<T>| -> Tensor<T> {
            t.reshape(&[g, n, heads, d])
                .permute(&[0, 2, 1, 3])
                .reshape(&[g * heads, n, d])
        };
        let q = split_heads(&qkv.narrow(2, 0, c)).affine(T::cast(1.0 / (d as f64).sqrt()), T::zero());
        let k = split_heads(&qkv.narrow(2, c, c));
        let v = split_heads(&qkv.narrow(2, 2 * c, c));
        let mut attn = bmm(&q, &k.permute(&[0, 2, 1])); // (G*h, N, N)

        if let Some(table) = &self.rel_table {
            let bias = gather_columns(table, &self.rel_index).reshape(&[1, 1, heads, n, n]);
            attn = attn.reshape(&[b, nh * nw, heads, n, n]).add(&bias).reshape(&[
                g * heads,
                n,
                n,
            ]);
        }
        if let Some(mask) = self.build_mask(hp, wp, h, w_real, shift) {
            let m = Tensor::constant(
                mask.into_shape_with_order(IxDyn(&[1, nh * nw, 1, n, n])).unwrap(),
            );
            attn = attn.reshape(&[b, nh * nw, heads, n, n]).add(&m).reshape(&[
                g * heads,
                n,
                n,
            ]);
        }
        let attn = softmax_last(&attn);
        let ctx = bmm(&attn, &v); // (G*h, N, d)
        let merged = ctx
            .reshape(&[g, heads, n, d])
            .permute(&[0, 2, 1, 3])
            .reshape(&[g, n, c]);
        let msa = self.proj.forward(&merged);
        let tokens = tokens.add(&msa);

        // --- MLP ---
        let mlp = self.fc2.forward(&self.fc1.forward(&self.ln2.forward(&tokens)).silu());
        let tokens = tokens.add(&mlp);

        // (G, N, C) -> (B,C,Hp,Wp) -> unshift -> crop
        let mut out = tokens
            .reshape(&[b, nh, nw, w, w, c])
            .permute(&[0, 5, 1, 3, 2, 4])
            .reshape(&[b, c, hp, wp]);
        if shift > 0 {
            out = out.roll(2, shift as isize).roll(3, shift as isize);
        }
        out.narrow(2, 0, h).narrow(3, 0, w_real)
    }

    pub fn flops(&self, h: usize, w_real: usize) -> u64 {
        let w = self.window;
        let hp = h.div_ceil(w) * w;
        let wp = w_real.div_ceil(w) * w;
        let tokens = hp * wp;
        let c = self.dim;
        let n = (w * w) as u64;
        let windows = (tokens / (w * w)) as u64;
        let qkv = self.qkv.flops(tokens) + self.proj.flops(tokens);
        // scores and weighted sum per window
        let attn = 2 * windows * (self.heads as u64) * n * n * ((c / self.heads) as u64) * 2;
        let mlp = self.fc1.flops(tokens) + self.fc2.flops(tokens);
        qkv + attn + mlp
    }
}

/// Token downsampling: 2x2 neighborhoods concatenated channelwise (4C) then
/// linearly reduced to 2C. `(B,C,H,W) -> (B,2C,H/2,W/2)`; H and W must be even.
pub struct PatchMerge<T: Scalar> {
    reduce: LinearLayer<T>,
    pub channels: usize,
}

impl<T: Scalar> PatchMerge<T> {
    pub fn new(scope: &Scope<T>, channels: usize) -> Self {
        PatchMerge {
            reduce: LinearLayer::new(&scope.sub("reduce"), 4 * channels, 2 * channels, false),
            channels,
        }
    }

    /// Weight layout: (4C, 2C); the 4C input blocks are ordered
    /// (even y, even x), (odd y, even x), (even y, odd x), (odd y, odd x).
    pub fn reduce_weight(&self) -> &Tensor<T> {
        &self.reduce.weight
    }

    pub fn forward(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let s = x.shape();
        let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::Shape(format!(
                "patch merge requires even spatial dims, got {h}x{w}"
            )));
        }
        let gathered = x
            .reshape(&[b, c, h / 2, 2, w / 2, 2])
            .permute(&[0, 5, 3, 1, 2, 4])
            .reshape(&[b, 4 * c, h / 2, w / 2]);
        let reduced = self
            .reduce
            .forward(&gathered.permute(&[0, 2, 3, 1]))
            .permute(&[0, 3, 1, 2]);
        Ok(reduced)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.reduce.flops((h / 2) * (w / 2))
    }
}

/// Cross-stage-partial Swin wrapper: the channel halves are split, `depth`
/// alternating (unshifted/shifted) Swin blocks transform the second half, and
/// a biased 1x1 convolution fuses the concatenation.
pub struct Swcsp<T: Scalar> {
    pub blocks: Vec<SwinBlock<T>>,
    fuse: Conv2dLayer<T>,
    half: usize,
    pub channels: usize,
}

impl<T: Scalar> Swcsp<T> {
    pub fn new(scope: &Scope<T>, channels: usize, params: SwinParams, depth: usize) -> Self {
        assert!(channels % 2 == 0, "SWCSP needs an even channel count");
        assert!(depth >= 1);
        let half = channels / 2;
        let blocks = (0..depth)
            .map(|i| SwinBlock::new(&scope.sub(&format!("block{i}")), half, params, i % 2 == 1))
            .collect();
        let fuse = Conv2dLayer::new(&scope.sub("fuse"), channels, channels, 1, 1, true);
        Swcsp {
            blocks,
            fuse,
            half,
            channels,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let untouched = x.narrow(1, 0, self.half);
        let mut transformed = x.narrow(1, self.half, self.half);
        for blk in &self.blocks {
            transformed = blk.forward(&transformed, mode);
        }
        self.fuse.forward(&concat(&[untouched, transformed], 1))
    }

    /// Identity 1x1 fuse kernel (test hook for the pass-through check).
    pub fn set_identity_fuse(&self) {
        self.fuse.weight.update_data(|w| {
            w.fill(T::zero());
            for i in 0..self.channels {
                w[[i, i, 0, 0]] = T::one();
            }
        });
        if let Some(b) = &self.fuse.bias {
            b.update_data(|d| d.fill(T::zero()));
        }
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let mut f = self.fuse.flops(h, w);
        for blk in &self.blocks {
            f += blk.flops(h, w);
        }
        f
    }
}
