//! Channel/spatial attention gates: GAM and CBAM.

use super::{Activation, ConvBlock, LinearLayer, Mode, Scope};
use crate::tensor::{avg_pool2d, concat, max_axis_keepdim, Scalar, Tensor};

/// Which attention gate to insert.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttentionKind {
    Gam,
    Cbam,
}

/// Global attention mechanism.
///
/// Channel stage: 3-D permutation puts channels last, a two-layer MLP
/// (C -> C/r -> C, ReLU between) produces per-position channel logits,
/// sigmoid-gates the input. Spatial stage: two 7x7 convolutions
/// (C -> C/r -> C) with BN+ReLU between, sigmoid-gating the channel-stage
/// output.
pub struct Gam<T: Scalar> {
    fc1: LinearLayer<T>,
    fc2: LinearLayer<T>,
    spatial1: ConvBlock<T>,
    spatial2: ConvBlock<T>,
    pub channels: usize,
}

impl<T: Scalar> Gam<T> {
    pub fn new(scope: &Scope<T>, channels: usize, reduction: usize) -> Self {
        assert!(
            channels % reduction == 0,
            "attention reduction {reduction} must divide channel count {channels}"
        );
        let hidden = channels / reduction;
        Gam {
            fc1: LinearLayer::new(&scope.sub("fc1"), channels, hidden, true),
            fc2: LinearLayer::new(&scope.sub("fc2"), hidden, channels, true),
            spatial1: ConvBlock::conv_bn(&scope.sub("sp1"), channels, hidden, 7, 1, Activation::ReLU),
            spatial2: ConvBlock::plain(&scope.sub("sp2"), hidden, channels, 7, 1, Activation::None),
            channels,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        // channel gate
        let permuted = x.permute(&[0, 2, 3, 1]); // (B,H,W,C)
        let logits = self.fc2.forward(&self.fc1.forward(&permuted).relu());
        let gate_c = logits.permute(&[0, 3, 1, 2]).sigmoid();
        let xc = x.mul(&gate_c);
        // spatial gate
        let s = self.spatial2.forward(&self.spatial1.forward(&xc, mode), mode);
        xc.mul(&s.sigmoid())
    }

    /// Force both gates to ~1 (zero gate weights, large positive bias); the
    /// block then acts as the identity.
    pub fn make_passthrough(&self) {
        for t in [&self.fc1.weight, &self.fc2.weight] {
            t.update_data(|d| d.fill(T::zero()));
        }
        for t in [&self.fc1.bias, &self.fc2.bias] {
            if let Some(b) = t {
                b.update_data(|d| d.fill(T::zero()));
            }
        }
        if let Some(b) = &self.fc2.bias {
            b.update_data(|d| d.fill(T::cast(40.0)));
        }
        self.spatial1.conv.weight.update_data(|d| d.fill(T::zero()));
        self.spatial2.conv.weight.update_data(|d| d.fill(T::zero()));
        if let Some(b) = &self.spatial2.conv.bias {
            b.update_data(|d| d.fill(T::cast(40.0)));
        }
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.fc1.flops(h * w) + self.fc2.flops(h * w) + self.spatial1.flops(h, w)
            + self.spatial2.flops(h, w)
    }
}

/// Convolutional block attention: channel gate from pooled statistics, then a
/// spatial gate from channelwise statistics.
pub struct Cbam<T: Scalar> {
    fc1: LinearLayer<T>,
    fc2: LinearLayer<T>,
    spatial: ConvBlock<T>,
    pub channels: usize,
}

impl<T: Scalar> Cbam<T> {
    pub fn new(scope: &Scope<T>, channels: usize, reduction: usize) -> Self {
        assert!(
            channels % reduction == 0,
            "attention reduction {reduction} must divide channel count {channels}"
        );
        let hidden = channels / reduction;
        Cbam {
            fc1: LinearLayer::new(&scope.sub("fc1"), channels, hidden, true),
            fc2: LinearLayer::new(&scope.sub("fc2"), hidden, channels, true),
            spatial: ConvBlock::plain(&scope.sub("spatial"), 2, 1, 7, 1, Activation::None),
            channels,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, _mode: Mode) -> Tensor<T> {
        let c = self.channels;
        // channel gate: shared MLP over avg- and max-pooled descriptors
        let avg = avg_pool2d(x).reshape(&[x.shape()[0], c]);
        let mx = max_axis_keepdim(&max_axis_keepdim(x, 2), 3).reshape(&[x.shape()[0], c]);
        let mlp = |v: &Tensor<T>| self.fc2.forward(&self.fc1.forward(v).relu());
        let gate_c = mlp(&avg)
            .add(&mlp(&mx))
            .sigmoid()
            .reshape(&[x.shape()[0], c, 1, 1]);
        let xc = x.mul(&gate_c);
        // spatial gate: channelwise mean/max map through a 7x7 conv
        let mean_c = xc.mean_axes(&[1]);
        let max_c = max_axis_keepdim(&xc, 1);
        let stat = concat(&[mean_c, max_c], 1);
        let gate_s = self.spatial.forward(&stat, Mode::Eval).sigmoid();
        xc.mul(&gate_s)
    }

    /// Force both gates to ~1; the block then acts as the identity.
    pub fn make_passthrough(&self) {
        for t in [&self.fc1.weight, &self.fc2.weight] {
            t.update_data(|d| d.fill(T::zero()));
        }
        if let Some(b) = &self.fc1.bias {
            b.update_data(|d| d.fill(T::zero()));
        }
        if let Some(b) = &self.fc2.bias {
            b.update_data(|d| d.fill(T::cast(40.0)));
        }
        self.spatial.conv.weight.update_data(|d| d.fill(T::zero()));
        if let Some(b) = &self.spatial.conv.bias {
            b.update_data(|d| d.fill(T::cast(40.0)));
        }
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        2 * (self.fc1.flops(1) + self.fc2.flops(1)) + self.spatial.flops(h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::{ParamStore, Scope};
    use crate::tensor::gradcheck::gradcheck_with_params;
    use ndarray::{ArrayD, IxDyn};
    use rand::prelude::*;
    use rand_chacha::ChaCha8Rng;
    use std::rc::Rc;

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
    fn gam_zero_input_zero_output_and_shape() {
        let store = ParamStore::<f64>::new(2);
        let root = Scope::root(Rc::clone(&store));
        let gam = Gam::new(&root.sub("gam"), 64, 4);
        let x = Tensor::constant(ArrayD::zeros(IxDyn(&[2, 64, 14, 14])));
        let y = gam.forward(&x, Mode::Eval);
        assert_eq!(y.shape(), vec![2, 64, 14, 14]);
        assert!(y.value().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn gam_gates_shrink_magnitudes() {
        let store = ParamStore::<f64>::new(4);
        let root = Scope::root(Rc::clone(&store));
        let gam = Gam::new(&root.sub("gam"), 8, 4);
        let x = Tensor::constant(rand_arr(&[1, 8, 6, 6], 5));
        let y = gam.forward(&x, Mode::Eval);
        for (xv, yv) in x.value().iter().zip(y.value().iter()) {
            if *xv != 0.0 {
                assert!(yv.abs() < xv.abs(), "gating must strictly shrink: {yv} vs {xv}");
            }
        }
    }

    #[test]
    fn gam_passthrough_gates_identity() {
        let store = ParamStore::<f64>::new(6);
        let root = Scope::root(Rc::clone(&store));
        let gam = Gam::new(&root.sub("gam"), 8, 4);
        gam.make_passthrough();
        let x = Tensor::constant(rand_arr(&[1, 8, 5, 5], 7));
        let y = gam.forward(&x, Mode::Eval);
        for (xv, yv) in x.value().iter().zip(y.value().iter()) {
            assert!((xv - yv).abs() < 1e-6, "{xv} vs {yv}");
        }
    }

    #[test]
    fn cbam_zero_input_and_passthrough() {
        let store = ParamStore::<f64>::new(8);
        let root = Scope::root(Rc::clone(&store));
        let cbam = Cbam::new(&root.sub("cbam"), 128, 4);
        let x = Tensor::constant(ArrayD::zeros(IxDyn(&[2, 128, 7, 7])));
        let y = cbam.forward(&x, Mode::Eval);
        assert_eq!(y.shape(), vec![2, 128, 7, 7]);
        assert!(y.value().iter().all(|&v| v == 0.0));

        cbam.make_passthrough();
        let x = Tensor::constant(rand_arr(&[1, 128, 4, 4], 9));
        let y = cbam.forward(&x, Mode::Eval);
        for (xv, yv) in x.value().iter().zip(y.value().iter()) {
            assert!((xv - yv).abs() < 1e-6);
        }
    }

    #[test]
    fn cbam_and_gam_differ_on_same_input() {
        let store = ParamStore::<f64>::new(10);
        let root = Scope::root(Rc::clone(&store));
        let gam = Gam::new(&root.sub("gam"), 8, 4);
        let cbam = Cbam::new(&root.sub("cbam"), 8, 4);
        let x = Tensor::constant(rand_arr(&[1, 8, 6, 6], 11));
        let yg = gam.forward(&x, Mode::Eval).value();
        let yc = cbam.forward(&x, Mode::Eval).value();
        let diff = yg
            .iter()
            .zip(yc.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(diff > 1e-6, "sequential CBAM must differ from GAM");
    }

    #[test]
    fn attention_gradchecks() {
        let store = ParamStore::<f64>::new(12);
        let root = Scope::root(Rc::clone(&store));
        let gam = Gam::new(&root.sub("gam"), 4, 2);
        let cbam = Cbam::new(&root.sub("cbam"), 4, 2);
        let params: Vec<Tensor<f64>> = store.entries().iter().map(|e| e.tensor.clone()).collect();
        let x0 = rand_arr(&[2, 4, 5, 5], 13);
        let w = Tensor::constant(rand_arr(&[2, 4, 5, 5], 14));
        let r = gradcheck_with_params(
            |xs| {
                let y = gam.forward(&xs[0], Mode::Train);
                let y = cbam.forward(&y, Mode::Train);
                y.mul(&w).mean_all()
            },
            &[x0],
            &params,
            1e-6,
            Some(40),
        );
        assert!(r.passes(1e-3), "{r:?}");
    }

    #[test]
    fn reduction_must_divide_channels() {
        let store = ParamStore::<f64>::new(1);
        let root = Scope::root(Rc::clone(&store));
        let result = std::panic::catch_unwind(std::panic::AssertUnwindSafe(|| {
            Gam::new(&root.sub("bad"), 6, 4)
        }));
        assert!(result.is_err());
    }
}
