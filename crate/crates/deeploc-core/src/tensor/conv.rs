//! Convolution, pooling and upsampling kernels.
//!
//! conv2d lowers to im2col + GEMM. Work is split over fixed-size output-row
//! chunks (not over available threads) so results are bit-identical across
//! runs regardless of the rayon pool.

use ndarray::{s, Array2, Array3, Array4, ArrayView3, ArrayViewMut3, Axis, Ix4};
use rayon::prelude::*;

use super::{Scalar, Tensor};

/// Output rows per parallel chunk in the im2col GEMM.
const CONV_CHUNK_ROWS: usize = 16;

fn conv_out_len(input: usize, k: usize, stride: usize, pad: usize) -> usize {
    (input + 2 * pad - k) / stride + 1
}

/// Valid output-x range for kernel offset `kx`: all `ox` with
/// `0 <= ox*stride + kx - pad < w`.
fn ox_bounds(w: usize, wo: usize, kx: usize, stride: usize, pad: usize) -> (usize, usize) {
    let lo = if kx >= pad {
        0
    } else {
        (pad - kx).div_ceil(stride)
    };
    let hi_excl = w + pad;
    if hi_excl <= kx {
        return (0, 0);
    }
    let hi = ((hi_excl - kx - 1) / stride + 1).min(wo);
    (lo.min(hi), hi)
}

/// Lower `rows` output rows (starting at `oy0`) of one image into a column
/// matrix of shape `(cin*k*k, rows*wo)`.
fn im2col_rows<T: Scalar>(
    x: &ArrayView3<T>,
    k: usize,
    stride: usize,
    pad: usize,
    wo: usize,
    oy0: usize,
    rows: usize,
) -> Array2<T> {
    let (cin, h, w) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let mut col = Array2::<T>::zeros((cin * k * k, rows * wo));
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row_idx = (c * k + ky) * k + kx;
                let (ox_lo, ox_hi) = ox_bounds(w, wo, kx, stride, pad);
                if ox_lo >= ox_hi {
                    continue;
                }
                let ix_lo = ox_lo * stride + kx - pad;
                let mut dst = col.row_mut(row_idx);
                for r in 0..rows {
                    let oy = oy0 + r;
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let src = x.slice(s![c, iy as usize, ix_lo..; stride]);
                    let n = ox_hi - ox_lo;
                    dst.slice_mut(s![r * wo + ox_lo..r * wo + ox_hi])
                        .assign(&src.slice(s![..n]));
                }
            }
        }
    }
    col
}

/// Scatter-add a column-matrix gradient back into the input image.
fn col2im_add<T: Scalar>(
    colgrad: &Array2<T>,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
    dx: &mut ArrayViewMut3<T>,
) {
    let (_, h, w) = (dx.shape()[0], dx.shape()[1], dx.shape()[2]);
    let cin = dx.shape()[0];
    for c in 0..cin {
        for ky in 0..k {
            for kx in 0..k {
                let row_idx = (c * k + ky) * k + kx;
                let src = colgrad.row(row_idx);
                let (ox_lo, ox_hi) = ox_bounds(w, wo, kx, stride, pad);
                if ox_lo >= ox_hi {
                    continue;
                }
                let ix_lo = ox_lo * stride + kx - pad;
                for oy in 0..ho {
                    let iy = (oy * stride + ky) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let n = ox_hi - ox_lo;
                    let mut dst = dx.slice_mut(s![c, iy as usize, ix_lo..; stride]);
                    let mut dst = dst.slice_mut(s![..n]);
                    dst += &src.slice(s![oy * wo + ox_lo..oy * wo + ox_hi]);
                }
            }
        }
    }
}

/// 2-D convolution with square kernel, same bias/stride/padding semantics as
/// the usual NCHW formulation. Weights are `(cout, cin, k, k)`.
pub fn conv2d<T: Scalar>(
    x: &Tensor<T>,
    weight: &Tensor<T>,
    bias: Option<&Tensor<T>>,
    stride: usize,
    pad: usize,
) -> Tensor<T> {
    let xv = x.value().into_dimensionality::<Ix4>().expect("conv2d input 4-D");
    let wv = weight
        .value()
        .into_dimensionality::<Ix4>()
        .expect("conv2d weight 4-D");
    let (bsize, cin, h, w) = xv.dim();
    let (cout, cin_w, k, k2) = wv.dim();
    assert_eq!(k, k2, "conv2d expects square kernels");
    assert_eq!(cin, cin_w, "conv2d channel mismatch: input {cin}, weight {cin_w}");
    let ho = conv_out_len(h, k, stride, pad);
    let wo = conv_out_len(w, k, stride, pad);

    let w_mat = wv
        .to_shape((cout, cin * k * k))
        .expect("weight reshape")
        .to_owned();
    let bias_v = bias.map(|b| b.value());

    let mut out = Array4::<T>::zeros((bsize, cout, ho, wo));
    // Chunk work along (batch, output-row blocks); fixed granularity.
    let row_chunks = ho.div_ceil(CONV_CHUNK_ROWS);
    let mut jobs: Vec<(usize, usize, usize)> = Vec::new();
    for b in 0..bsize {
        for rc in 0..row_chunks {
            let oy0 = rc * CONV_CHUNK_ROWS;
            let rows = CONV_CHUNK_ROWS.min(ho - oy0);
            jobs.push((b, oy0, rows));
        }
    }
    {
        // Hand each job a disjoint output slice through a raw pointer wrapper.
        struct SendPtr<T>(*mut T);
        unsafe impl<T> Send for SendPtr<T> {}
        unsafe impl<T> Sync for SendPtr<T> {}
        let out_ptr = SendPtr(out.as_mut_ptr());
        let out_ref = &out_ptr;
        let out_strides: Vec<usize> = vec![cout * ho * wo, ho * wo, wo, 1];
        jobs.par_iter().for_each(|&(b, oy0, rows)| {
            let xb = xv.index_axis(Axis(0), b);
            let col = im2col_rows(&xb, k, stride, pad, wo, oy0, rows);
            let prod = w_mat.dot(&col); // (cout, rows*wo)
            let base = out_ref.0;
            for oc in 0..cout {
                let off = b * out_strides[0] + oc * out_strides[1] + oy0 * out_strides[2];
                let dst = unsafe { std::slice::from_raw_parts_mut(base.add(off), rows * wo) };
                let src = prod.row(oc);
                let src_sl = src.as_slice().unwrap();
                match &bias_v {
                    Some(bv) => {
                        let bval = bv[[oc]];
                        for (d, &s) in dst.iter_mut().zip(src_sl) {
                            *d = s + bval;
                        }
                    }
                    None => dst.copy_from_slice(src_sl),
                }
            }
        });
    }

    let mut parents = vec![x.clone(), weight.clone()];
    if let Some(b) = bias {
        parents.push(b.clone());
    }
    let has_bias = bias.is_some();
    Tensor::from_op(
        out.into_dyn(),
        parents,
        Box::new(move |pv, _, g| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let xv = pv[0].view().into_dimensionality::<Ix4>().unwrap();
            let wv = pv[1].view().into_dimensionality::<Ix4>().unwrap();
            let (bsize, cin, _h, _w) = xv.dim();
            let (cout, _, k, _) = wv.dim();
            let (ho, wo) = (g4.shape()[2], g4.shape()[3]);
            let w_mat = wv.to_shape((cout, cin * k * k)).unwrap().to_owned();

            // dW: per-image partials summed in batch order.
            let partials: Vec<Array2<T>> = (0..bsize)
                .into_par_iter()
                .map(|b| {
                    let xb = xv.index_axis(Axis(0), b);
                    let col = im2col_rows(&xb, k, stride, pad, wo, 0, ho);
                    let gb = g4
                        .index_axis(Axis(0), b)
                        .to_shape((cout, ho * wo))
                        .unwrap()
                        .to_owned();
                    gb.dot(&col.t())
                })
                .collect();
            let mut dw_mat = Array2::<T>::zeros((cout, cin * k * k));
            for p in partials {
                dw_mat += &p;
            }
            let dw = dw_mat
                .into_shape_with_order((cout, cin, k, k))
                .unwrap()
                .into_dyn();

            // dX: disjoint per-image writes.
            let (_, _, h, w) = xv.dim();
            let mut dx = Array4::<T>::zeros(xv.dim());
            dx.as_slice_mut()
                .unwrap()
                .par_chunks_mut(cin * h * w)
                .enumerate()
                .for_each(|(b, chunk)| {
                    let gb = g4
                        .index_axis(Axis(0), b)
                        .to_shape((cout, ho * wo))
                        .unwrap()
                        .to_owned();
                    let colgrad = w_mat.t().dot(&gb); // (cin*k*k, ho*wo)
                    let mut dxb = ArrayViewMut3::from_shape((cin, h, w), chunk).unwrap();
                    col2im_add(&colgrad, k, stride, pad, ho, wo, &mut dxb);
                });

            let mut grads = vec![Some(dx.into_dyn()), Some(dw)];
            if has_bias {
                let db = g4.sum_axis(Axis(3)).sum_axis(Axis(2)).sum_axis(Axis(0));
                grads.push(Some(db.into_dyn()));
            }
            grads
        }),
    )
}

/// Max pooling with square window; out-of-bounds taps are ignored.
pub fn max_pool2d<T: Scalar>(x: &Tensor<T>, k: usize, stride: usize, pad: usize) -> Tensor<T> {
    let xv = x.value().into_dimensionality::<Ix4>().expect("pool input 4-D");
    let (bsize, cin, h, w) = xv.dim();
    let ho = conv_out_len(h, k, stride, pad);
    let wo = conv_out_len(w, k, stride, pad);
    let mut out = Array4::<T>::zeros((bsize, cin, ho, wo));
    let mut argmax = vec![0u32; bsize * cin * ho * wo];
    {
        let arg_chunks: Vec<&mut [u32]> = argmax.chunks_mut(ho * wo).collect();
        out.as_slice_mut()
            .unwrap()
            .par_chunks_mut(ho * wo)
            .zip(arg_chunks)
            .enumerate()
            .for_each(|(plane, (out_plane, arg_plane))| {
                let b = plane / cin;
                let c = plane % cin;
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut best = T::neg_infinity();
                        let mut best_idx = 0u32;
                        for ky in 0..k {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..k {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                let v = xv[[b, c, iy as usize, ix as usize]];
                                if v > best {
                                    best = v;
                                    best_idx = (iy as usize * w + ix as usize) as u32;
                                }
                            }
                        }
                        out_plane[oy * wo + ox] = best;
                        arg_plane[oy * wo + ox] = best_idx;
                    }
                }
            });
    }
    let xshape = [bsize, cin, h, w];
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |_, _, g| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let (ho, wo) = (g4.shape()[2], g4.shape()[3]);
            let mut dx = Array4::<T>::zeros((xshape[0], xshape[1], xshape[2], xshape[3]));
            for b in 0..xshape[0] {
                for c in 0..xshape[1] {
                    let plane = (b * xshape[1] + c) * ho * wo;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let idx = argmax[plane + oy * wo + ox] as usize;
                            let (iy, ix) = (idx / xshape[3], idx % xshape[3]);
                            dx[[b, c, iy, ix]] = dx[[b, c, iy, ix]] + g4[[b, c, oy, ox]];
                        }
                    }
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    )
}

/// Nearest-neighbor 2x upsampling on the last two axes.
pub fn upsample_nearest_2x<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    let xv = x.value().into_dimensionality::<Ix4>().expect("upsample input 4-D");
    let (bsize, cin, h, w) = xv.dim();
    let mut out = Array4::<T>::zeros((bsize, cin, 2 * h, 2 * w));
    for b in 0..bsize {
        for c in 0..cin {
            for y in 0..h {
                for x_ in 0..w {
                    let v = xv[[b, c, y, x_]];
                    out[[b, c, 2 * y, 2 * x_]] = v;
                    out[[b, c, 2 * y, 2 * x_ + 1]] = v;
                    out[[b, c, 2 * y + 1, 2 * x_]] = v;
                    out[[b, c, 2 * y + 1, 2 * x_ + 1]] = v;
                }
            }
        }
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |_, _, g| {
            let g4 = g.view().into_dimensionality::<Ix4>().unwrap();
            let (bsize, cin, h2, w2) = g4.dim();
            let (h, w) = (h2 / 2, w2 / 2);
            let mut dx = Array4::<T>::zeros((bsize, cin, h, w));
            for b in 0..bsize {
                for c in 0..cin {
                    for y in 0..h {
                        for x_ in 0..w {
                            dx[[b, c, y, x_]] = g4[[b, c, 2 * y, 2 * x_]]
                                + g4[[b, c, 2 * y, 2 * x_ + 1]]
                                + g4[[b, c, 2 * y + 1, 2 * x_]]
                                + g4[[b, c, 2 * y + 1, 2 * x_ + 1]];
                        }
                    }
                }
            }
            vec![Some(dx.into_dyn())]
        }),
    )
}

/// Max along one axis (kept as size 1); gradient routes to the argmax.
pub fn max_axis_keepdim<T: Scalar>(x: &Tensor<T>, axis: usize) -> Tensor<T> {
    let xv = x.value().as_standard_layout().to_owned();
    let out = xv.map_axis(Axis(axis), |lane| {
        lane.iter().cloned().fold(T::neg_infinity(), T::max)
    });
    let argmax: Vec<usize> = xv
        .lanes(Axis(axis))
        .into_iter()
        .map(|lane| {
            let mut bi = 0;
            let mut bv = T::neg_infinity();
            for (i, &v) in lane.iter().enumerate() {
                if v > bv {
                    bv = v;
                    bi = i;
                }
            }
            bi
        })
        .collect();
    let out = out.insert_axis(Axis(axis));
    let xshape = x.shape();
    Tensor::from_op(
        out,
        vec![x.clone()],
        Box::new(move |_, _, g| {
            let gr = g
                .view()
                .remove_axis(Axis(axis))
                .as_standard_layout()
                .to_owned();
            let mut dx = ndarray::ArrayD::<T>::zeros(ndarray::IxDyn(&xshape));
            for ((mut lane, &gv), &ai) in dx
                .lanes_mut(Axis(axis))
                .into_iter()
                .zip(gr.iter())
                .zip(argmax.iter())
            {
                lane[ai] = gv;
            }
            vec![Some(dx)]
        }),
    )
}

/// Average pooling over the full spatial extent: (B,C,H,W) -> (B,C,1,1).
pub fn avg_pool2d<T: Scalar>(x: &Tensor<T>) -> Tensor<T> {
    x.mean_axes(&[2, 3])
}

#[allow(dead_code)]
type Dummy = Array3<f32>;
