//! Training, evaluation and experiment orchestration.

pub mod eval;
pub mod matrix;
pub mod optim;
pub mod synthetic;
pub mod train;

use ndarray::{ArrayD, IxDyn};

use crate::datamodel::Sample;
use crate::tensor::{Scalar, Tensor};

/// Stack samples into a normalized (B, 3, S, S) input tensor.
pub fn samples_to_batch<T: Scalar>(samples: &[Sample]) -> Tensor<T> {
    assert!(!samples.is_empty());
    let (c, h, w) = {
        let s = samples[0].image.shape();
        (s[0], s[1], s[2])
    };
    let b = samples.len();
    let mut data = ArrayD::<T>::zeros(IxDyn(&[b, c, h, w]));
    for (i, s) in samples.iter().enumerate() {
        assert_eq!(s.image.shape(), [c, h, w]);
        for cc in 0..c {
            for y in 0..h {
                for x in 0..w {
                    data[[i, cc, y, x]] = T::cast(s.image[[cc, y, x]] as f64 / 255.0);
                }
            }
        }
    }
    Tensor::constant(data)
}
