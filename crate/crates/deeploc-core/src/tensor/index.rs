//! Gather/scatter ops used by the attention bias table and the loss.

use ndarray::{Array2, ArrayD, IxDyn};

use super::{Scalar, Tensor};

/// Gather columns of a `(rows, m)` table: result `(rows, idx.len())` with
/// `out[r, j] = table[r, idx[j]]`. Backward scatter-adds into the table.
pub fn gather_columns<T: Scalar>(table: &Tensor<T>, idx: &[usize]) -> Tensor<T> {
    let tv = table.value();
    assert_eq!(tv.ndim(), 2, "gather_columns expects a 2-D table");
    let (rows, m) = (tv.shape()[0], tv.shape()[1]);
    let mut out = Array2::<T>::zeros((rows, idx.len()));
    for (j, &i) in idx.iter().enumerate() {
        assert!(i < m, "gather index {i} out of range {m}");
        for r in 0..rows {
            out[[r, j]] = tv[[r, i]];
        }
    }
    let idx_v = idx.to_vec();
    Tensor::from_op(
        out.into_dyn(),
        vec![table.clone()],
        Box::new(move |_, _, g| {
            let mut dt = ArrayD::<T>::zeros(IxDyn(&[rows, m]));
            for (j, &i) in idx_v.iter().enumerate() {
                for r in 0..rows {
                    dt[[r, i]] = dt[[r, i]] + g[[r, j]];
                }
            }
            vec![Some(dt)]
        }),
    )
}

/// Position of one assigned candidate inside a head's raw output.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CellIndex {
    pub batch: usize,
    pub anchor: usize,
    pub cell_y: usize,
    pub cell_x: usize,
}

/// Gather the per-attribute vectors of selected cells from a raw head map
/// laid out as `(B, A, K, H, W)`: result `(N, K)` for N selected cells.
pub fn select_cells<T: Scalar>(x: &Tensor<T>, cells: &[CellIndex]) -> Tensor<T> {
    let xv = x.value();
    assert_eq!(xv.ndim(), 5, "select_cells expects (B, A, K, H, W)");
    let karity = xv.shape()[2];
    let mut out = Array2::<T>::zeros((cells.len(), karity));
    for (n, c) in cells.iter().enumerate() {
        for kk in 0..karity {
            out[[n, kk]] = xv[[c.batch, c.anchor, kk, c.cell_y, c.cell_x]];
        }
    }
    let cells_v = cells.to_vec();
    let shape = x.shape();
    Tensor::from_op(
        out.into_dyn(),
        vec![x.clone()],
        Box::new(move |_, _, g| {
            let mut dx = ArrayD::<T>::zeros(IxDyn(&shape));
            for (n, c) in cells_v.iter().enumerate() {
                for kk in 0..shape[2] {
                    let slot = &mut dx[[c.batch, c.anchor, kk, c.cell_y, c.cell_x]];
                    *slot = *slot + g[[n, kk]];
                }
            }
            vec![Some(dx)]
        }),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn gather_columns_forward_backward() {
        let t = Tensor::param(array![[1.0f64, 2.0, 3.0], [4.0, 5.0, 6.0]].into_dyn());
        let g = gather_columns(&t, &[2, 0, 2]);
        assert_eq!(g.value(), array![[3.0, 1.0, 3.0], [6.0, 4.0, 6.0]].into_dyn());
        g.sum_all().backward();
        // column 2 gathered twice -> grad 2
        assert_eq!(t.grad().unwrap(), array![[1.0, 0.0, 2.0], [1.0, 0.0, 2.0]].into_dyn());
    }

    #[test]
    fn select_cells_roundtrip() {
        let mut data = ArrayD::<f64>::zeros(IxDyn(&[1, 2, 3, 4, 4]));
        data[[0, 1, 0, 2, 3]] = 7.0;
        data[[0, 1, 1, 2, 3]] = 8.0;
        data[[0, 1, 2, 2, 3]] = 9.0;
        let x = Tensor::param(data);
        let sel = select_cells(
            &x,
            &[CellIndex {
                batch: 0,
                anchor: 1,
                cell_y: 2,
                cell_x: 3,
            }],
        );
        assert_eq!(sel.value(), array![[7.0, 8.0, 9.0]].into_dyn());
        sel.sum_all().backward();
        let g = x.grad().unwrap();
        assert_eq!(g[[0, 1, 0, 2, 3]], 1.0);
        assert_eq!(g[[0, 0, 0, 2, 3]], 0.0);
    }
}
