//! Central finite-difference verification of analytic gradients.

use ndarray::ArrayD;

use super::{no_grad, Tensor};

/// Outcome of a gradient check.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub checked: usize,
    pub worst: Option<(usize, usize, f64, f64)>, // (input, coord, analytic, numeric)
}

impl GradCheckReport {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_rel_err < tol
    }
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-3)
}

/// Compare analytic gradients of `f` (a scalar-valued tensor function)
/// against central finite differences at `inputs`.
///
/// `max_coords_per_input` caps how many coordinates are probed per input
/// (deterministically strided over the tensor); `None` checks all.
pub fn gradcheck<F>(
    f: F,
    inputs: &[ArrayD<f64>],
    eps: f64,
    max_coords_per_input: Option<usize>,
) -> GradCheckReport
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    let params: Vec<Tensor<f64>> = inputs.iter().map(|a| Tensor::param(a.clone())).collect();
    let out = f(&params);
    assert_eq!(out.len(), 1, "gradcheck target must be scalar");
    out.backward();
    let analytic: Vec<ArrayD<f64>> = params
        .iter()
        .map(|p| {
            p.grad()
                .unwrap_or_else(|| ArrayD::zeros(p.data().raw_dim()))
        })
        .collect();

    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let _g = no_grad();
        let consts: Vec<Tensor<f64>> = xs.iter().map(|a| Tensor::constant(a.clone())).collect();
        f(&consts).item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (pi, input) in inputs.iter().enumerate() {
        let n = input.len();
        let coords: Vec<usize> = match max_coords_per_input {
            Some(cap) if cap < n => {
                // deterministic stride covering the tensor
                let step = n.div_ceil(cap);
                (0..n).step_by(step).collect()
            }
            _ => (0..n).collect(),
        };
        for ci in coords {
            let orig = work[pi].as_slice_mut().unwrap()[ci];
            work[pi].as_slice_mut().unwrap()[ci] = orig + eps;
            let fp = eval(&work);
            work[pi].as_slice_mut().unwrap()[ci] = orig - eps;
            let fm = eval(&work);
            work[pi].as_slice_mut().unwrap()[ci] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            let a = analytic[pi].as_slice().unwrap()[ci];
            let e = rel_err(a, numeric);
            report.checked += 1;
            if e > report.max_rel_err {
                report.max_rel_err = e;
                report.worst = Some((pi, ci, a, numeric));
            }
        }
    }
    report
}

/// Like [`gradcheck`] but also probes standing module parameters (their
/// values are perturbed in place for the numeric pass and restored after).
pub fn gradcheck_with_params<F>(
    f: F,
    inputs: &[ArrayD<f64>],
    params: &[Tensor<f64>],
    eps: f64,
    max_coords: Option<usize>,
) -> GradCheckReport
where
    F: Fn(&[Tensor<f64>]) -> Tensor<f64>,
{
    for p in params {
        p.zero_grad();
    }
    let input_tensors: Vec<Tensor<f64>> = inputs.iter().map(|a| Tensor::param(a.clone())).collect();
    let out = f(&input_tensors);
    assert_eq!(out.len(), 1, "gradcheck target must be scalar");
    out.backward();

    let analytic_inputs: Vec<ArrayD<f64>> = input_tensors
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| ArrayD::zeros(p.data().raw_dim())))
        .collect();
    let analytic_params: Vec<ArrayD<f64>> = params
        .iter()
        .map(|p| p.grad().unwrap_or_else(|| ArrayD::zeros(p.data().raw_dim())))
        .collect();

    let eval = |xs: &[ArrayD<f64>]| -> f64 {
        let _g = no_grad();
        let consts: Vec<Tensor<f64>> = xs.iter().map(|a| Tensor::constant(a.clone())).collect();
        f(&consts).item()
    };

    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        checked: 0,
        worst: None,
    };
    let record = |slot: usize, coord: usize, a: f64, n: f64, report: &mut GradCheckReport| {
        let e = rel_err(a, n);
        report.checked += 1;
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst = Some((slot, coord, a, n));
        }
    };

    let pick = |n: usize| -> Vec<usize> {
        match max_coords {
            Some(cap) if cap < n => {
                let step = n.div_ceil(cap);
                (0..n).step_by(step).collect()
            }
            _ => (0..n).collect(),
        }
    };

    let mut work: Vec<ArrayD<f64>> = inputs.to_vec();
    for (pi, input) in inputs.iter().enumerate() {
        for ci in pick(input.len()) {
            let orig = work[pi].as_slice_mut().unwrap()[ci];
            work[pi].as_slice_mut().unwrap()[ci] = orig + eps;
            let fp = eval(&work);
            work[pi].as_slice_mut().unwrap()[ci] = orig - eps;
            let fm = eval(&work);
            work[pi].as_slice_mut().unwrap()[ci] = orig;
            let numeric = (fp - fm) / (2.0 * eps);
            record(
                pi,
                ci,
                analytic_inputs[pi].as_slice().unwrap()[ci],
                numeric,
                &mut report,
            );
        }
    }
    for (pi, p) in params.iter().enumerate() {
        let n = p.len();
        for ci in pick(n) {
            let mut orig = 0.0;
            p.update_data(|d| {
                let s = d.as_slice_mut().unwrap();
                orig = s[ci];
                s[ci] = orig + eps;
            });
            let fp = eval(&work);
            p.update_data(|d| d.as_slice_mut().unwrap()[ci] = orig - eps);
            let fm = eval(&work);
            p.update_data(|d| d.as_slice_mut().unwrap()[ci] = orig);
            let numeric = (fp - fm) / (2.0 * eps);
            record(
                inputs.len() + pi,
                ci,
                analytic_params[pi].as_slice().unwrap()[ci],
                numeric,
                &mut report,
            );
        }
    }
    report
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::{bmm, concat, conv2d, max_pool2d, softmax_last, upsample_nearest_2x};
    use ndarray::IxDyn;
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;

    fn rand_arr(shape: &[usize], seed: u64) -> ArrayD<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ArrayD::from_shape_vec(
            IxDyn(shape),
            (0..shape.iter().product::<usize>())
                .map(|_| rng.random_range(-1.0..1.0))
                .collect(),
        )
        .unwrap()
    }

    #[test]
    fn elementwise_chain_gradcheck() {
        let r = gradcheck(
            |xs| {
                let y = xs[0].silu().mul(&xs[1].sigmoid()).add(&xs[0].atan());
                y.square().mean_all()
            },
            &[rand_arr(&[3, 4], 1), rand_arr(&[3, 4], 2)],
            1e-6,
            None,
        );
        assert!(r.passes(1e-6), "{r:?}");
    }

    #[test]
    fn division_and_sqrt_gradcheck() {
        let mut a = rand_arr(&[5], 3);
        a.mapv_inplace(|v| v.abs() + 0.5);
        let r = gradcheck(
            |xs| xs[0].sqrt().div(&xs[1].square().affine(1.0, 1.0)).sum_all(),
            &[a, rand_arr(&[5], 4)],
            1e-6,
            None,
        );
        assert!(r.passes(1e-6), "{r:?}");
    }

    #[test]
    fn conv_pool_upsample_gradcheck() {
        let r = gradcheck(
            |xs| {
                let y = conv2d(&xs[0], &xs[1], Some(&xs[2]), 1, 1);
                let y = max_pool2d(&y, 2, 2, 0);
                let y = upsample_nearest_2x(&y);
                y.square().mean_all()
            },
            &[
                rand_arr(&[2, 2, 6, 6], 5),
                rand_arr(&[3, 2, 3, 3], 6),
                rand_arr(&[3], 7),
            ],
            1e-6,
            None,
        );
        assert!(r.passes(1e-5), "{r:?}");
    }

    #[test]
    fn strided_conv_gradcheck() {
        let r = gradcheck(
            |xs| conv2d(&xs[0], &xs[1], None, 2, 1).square().sum_all(),
            &[rand_arr(&[1, 2, 7, 7], 8), rand_arr(&[4, 2, 3, 3], 9)],
            1e-6,
            None,
        );
        assert!(r.passes(1e-5), "{r:?}");
    }

    #[test]
    fn softmax_bmm_concat_gradcheck() {
        let r = gradcheck(
            |xs| {
                let attn = softmax_last(&bmm(&xs[0], &xs[1]));
                let both = concat(&[attn.clone(), attn], 2);
                both.square().mean_all()
            },
            &[rand_arr(&[2, 3, 4], 10), rand_arr(&[2, 4, 3], 11)],
            1e-6,
            None,
        );
        assert!(r.passes(1e-5), "{r:?}");
    }

    #[test]
    fn movement_ops_gradcheck() {
        let r = gradcheck(
            |xs| {
                let y = xs[0]
                    .permute(&[0, 2, 1])
                    .reshape(&[2, 12])
                    .narrow(1, 3, 6)
                    .roll(1, 2)
                    .pad_hw(1, 2);
                y.square().sum_all()
            },
            &[rand_arr(&[2, 3, 4], 12)],
            1e-6,
            None,
        );
        assert!(r.passes(1e-6), "{r:?}");
    }

    #[test]
    fn minmax_clamp_gradcheck() {
        let r = gradcheck(
            |xs| {
                let m = xs[0].maximum(&xs[1]).minimum(&xs[0].affine(0.5, 0.1));
                m.clamp(-0.4, 0.6).square().sum_all()
            },
            &[rand_arr(&[17], 13), rand_arr(&[17], 14)],
            1e-7,
            None,
        );
        assert!(r.passes(1e-5), "{r:?}");
    }
}
