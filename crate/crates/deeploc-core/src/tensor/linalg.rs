//! Dense matrix products for the attention path.

use ndarray::{ArrayD, Ix2, Ix3, IxDyn};

use super::{Scalar, Tensor};

/// 2-D matrix product `(m, k) x (k, n) -> (m, n)`.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let av = a.value().into_dimensionality::<Ix2>().expect("matmul lhs 2-D");
    let bv = b.value().into_dimensionality::<Ix2>().expect("matmul rhs 2-D");
    assert_eq!(av.shape()[1], bv.shape()[0], "matmul inner dim mismatch");
    let out = av.dot(&bv).into_dyn();
    Tensor::from_op(
        out,
        vec![a.clone(), b.clone()],
        Box::new(move |parents, _, g| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let av = parents[0].view().into_dimensionality::<Ix2>().unwrap();
            let bv = parents[1].view().into_dimensionality::<Ix2>().unwrap();
            let ga = g2.dot(&bv.t()).into_dyn();
            let gb = av.t().dot(&g2).into_dyn();
            vec![Some(ga), Some(gb)]
        }),
    )
}

/// Batched matrix product `(g, m, k) x (g, k, n) -> (g, m, n)`.
pub fn bmm<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Tensor<T> {
    let av = a.value().into_dimensionality::<Ix3>().expect("bmm lhs 3-D");
    let bv = b.value().into_dimensionality::<Ix3>().expect("bmm rhs 3-D");
    let (g, m, k) = (av.shape()[0], av.shape()[1], av.shape()[2]);
    let (gb, kb, n) = (bv.shape()[0], bv.shape()[1], bv.shape()[2]);
    assert_eq!(g, gb, "bmm batch mismatch");
    assert_eq!(k, kb, "bmm inner dim mismatch");

    let mut out = ndarray::Array3::<T>::zeros((g, m, n));
    for i in 0..g {
        let prod = av.index_axis(ndarray::Axis(0), i).dot(&bv.index_axis(ndarray::Axis(0), i));
        out.index_axis_mut(ndarray::Axis(0), i).assign(&prod);
    }
    Tensor::from_op(
        out.into_dyn(),
        vec![a.clone(), b.clone()],
        Box::new(move |parents, _, grad| {
            let g3 = grad.view().into_dimensionality::<Ix3>().unwrap();
            let av = parents[0].view().into_dimensionality::<Ix3>().unwrap();
            let bv = parents[1].view().into_dimensionality::<Ix3>().unwrap();
            let batches = av.shape()[0];
            let mut ga = ndarray::Array3::<T>::zeros((batches, av.shape()[1], av.shape()[2]));
            let mut gb = ndarray::Array3::<T>::zeros((batches, bv.shape()[1], bv.shape()[2]));
            for i in 0..batches {
                let gi = g3.index_axis(ndarray::Axis(0), i);
                let ai = av.index_axis(ndarray::Axis(0), i);
                let bi = bv.index_axis(ndarray::Axis(0), i);
                ga.index_axis_mut(ndarray::Axis(0), i).assign(&gi.dot(&bi.t()));
                gb.index_axis_mut(ndarray::Axis(0), i).assign(&ai.t().dot(&gi));
            }
            vec![Some(ga.into_dyn()), Some(gb.into_dyn())]
        }),
    )
}

/// Fully connected layer over the last axis: `x (.., in) x w (in, out) + b`.
pub fn linear<T: Scalar>(x: &Tensor<T>, w: &Tensor<T>, b: Option<&Tensor<T>>) -> Tensor<T> {
    let xs = x.shape();
    let (d_in, d_out) = {
        let ws = w.shape();
        (ws[0], ws[1])
    };
    assert_eq!(*xs.last().unwrap(), d_in, "linear input dim mismatch");
    let rows: usize = xs[..xs.len() - 1].iter().product();
    let flat = x.reshape(&[rows, d_in]);
    let mut out = matmul(&flat, w);
    if let Some(b) = b {
        out = out.add(b);
    }
    let mut out_shape = xs;
    *out_shape.last_mut().unwrap() = d_out;
    out.reshape(&out_shape)
}

#[allow(dead_code)]
fn shape_of<T: Scalar>(t: &Tensor<T>) -> IxDyn {
    IxDyn(&t.shape())
}

#[allow(dead_code)]
type Dummy = ArrayD<f32>;

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{array, IxDyn};

    #[test]
    fn matmul_forward_and_grad() {
        let a = Tensor::param(array![[1.0f64, 2.0], [3.0, 4.0]].into_dyn());
        let b = Tensor::param(array![[5.0f64, 6.0], [7.0, 8.0]].into_dyn());
        let c = matmul(&a, &b);
        assert_eq!(c.value(), array![[19.0, 22.0], [43.0, 50.0]].into_dyn());
        c.sum_all().backward();
        // dA = 1 * B^T (row sums of B)
        assert_eq!(a.grad().unwrap(), array![[11.0, 15.0], [11.0, 15.0]].into_dyn());
        assert_eq!(b.grad().unwrap(), array![[4.0, 4.0], [6.0, 6.0]].into_dyn());
    }

    #[test]
    fn bmm_matches_loop() {
        let a = Tensor::param(
            ndarray::ArrayD::from_shape_vec(IxDyn(&[2, 2, 3]), (0..12).map(|x| x as f64).collect())
                .unwrap(),
        );
        let b = Tensor::param(
            ndarray::ArrayD::from_shape_vec(IxDyn(&[2, 3, 2]), (0..12).map(|x| x as f64).collect())
                .unwrap(),
        );
        let c = bmm(&a, &b);
        let (av, bv, cv) = (a.value(), b.value(), c.value());
        for g in 0..2 {
            for m in 0..2 {
                for n in 0..2 {
                    let mut s = 0.0;
                    for k in 0..3 {
                        s += av[[g, m, k]] * bv[[g, k, n]];
                    }
                    assert!((cv[[g, m, n]] - s).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn linear_keeps_leading_shape() {
        let x = Tensor::param(ndarray::ArrayD::<f64>::zeros(IxDyn(&[4, 7, 3])));
        let w = Tensor::param(ndarray::ArrayD::<f64>::zeros(IxDyn(&[3, 5])));
        let b = Tensor::param(ndarray::ArrayD::<f64>::zeros(IxDyn(&[5])));
        let y = linear(&x, &w, Some(&b));
        assert_eq!(y.shape(), vec![4, 7, 5]);
    }
}
