//! YOLOv7 composite blocks: ELAN/ELAN-H, MP, UP, RepConv and SPPCSPC.

use ndarray::{ArrayD, IxDyn};

use super::{BatchNorm2d, Conv2dLayer, ConvBlock, Mode, Scope};
use crate::tensor::{concat, conv2d, max_pool2d, upsample_nearest_2x, Scalar, Tensor};

/// Layer-aggregation block. Two 1x1 entry branches plus a chain of 3x3
/// convolutions; every `tap_every`-th chain output joins the concatenation,
/// deepest first, followed by both entry branches. A final 1x1 fuses.
///
/// The backbone flavor taps every second chain conv with chain width equal to
/// the branch width; the neck flavor (ELAN-H) taps every conv at half width.
pub struct Elan<T: Scalar> {
    branch_a: ConvBlock<T>,
    branch_b: ConvBlock<T>,
    chain: Vec<ConvBlock<T>>,
    tap_every: usize,
    fuse: ConvBlock<T>,
    pub out_channels: usize,
}

impl<T: Scalar> Elan<T> {
    pub fn new(
        scope: &Scope<T>,
        cin: usize,
        mid: usize,
        inner: usize,
        chain_len: usize,
        tap_every: usize,
        cout: usize,
    ) -> Self {
        assert!(chain_len >= 1 && tap_every >= 1 && chain_len % tap_every == 0);
        let branch_a = ConvBlock::cbs(&scope.sub("cv_a"), cin, mid, 1, 1);
        let branch_b = ConvBlock::cbs(&scope.sub("cv_b"), cin, mid, 1, 1);
        let mut chain = Vec::with_capacity(chain_len);
        let mut c_prev = mid;
        for i in 0..chain_len {
            chain.push(ConvBlock::cbs(&scope.sub(&format!("m{i}")), c_prev, inner, 3, 1));
            c_prev = inner;
        }
        let taps = chain_len / tap_every;
        let cat_ch = 2 * mid + taps * inner;
        let fuse = ConvBlock::cbs(&scope.sub("fuse"), cat_ch, cout, 1, 1);
        Elan {
            branch_a,
            branch_b,
            chain,
            tap_every,
            fuse,
            out_channels: cout,
        }
    }

    /// Backbone ELAN: chain of `2*depth`, taps every 2, chain width = branch width.
    pub fn backbone(scope: &Scope<T>, cin: usize, mid: usize, cout: usize, depth: usize) -> Self {
        Self::new(scope, cin, mid, mid, 2 * depth, 2, cout)
    }

    /// Neck ELAN-H: chain of `2*depth` at half width, every conv tapped.
    pub fn neck(scope: &Scope<T>, cin: usize, mid: usize, cout: usize, depth: usize) -> Self {
        Self::new(scope, cin, mid, mid / 2, 2 * depth, 1, cout)
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let a = self.branch_a.forward(x, mode);
        let b = self.branch_b.forward(x, mode);
        let mut taps = Vec::new();
        let mut cur = b.clone();
        for (i, conv) in self.chain.iter().enumerate() {
            cur = conv.forward(&cur, mode);
            if (i + 1) % self.tap_every == 0 {
                taps.push(cur.clone());
            }
        }
        // deepest tap first, then b, then a (matching the reference graph)
        let mut cat: Vec<Tensor<T>> = taps.into_iter().rev().collect();
        cat.push(b);
        cat.push(a);
        self.fuse.forward(&concat(&cat, 1), mode)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let mut f = self.branch_a.flops(h, w) + self.branch_b.flops(h, w);
        for c in &self.chain {
            f += c.flops(h, w);
        }
        f + self.fuse.flops(h, w)
    }
}

/// Downsampling transition: max-pool branch and strided-conv branch, each at
/// `c_branch` channels, concatenated (output has `2 * c_branch` channels,
/// halved spatial dims).
pub struct MpDown<T: Scalar> {
    pool_cv: ConvBlock<T>,
    conv_cv1: ConvBlock<T>,
    conv_cv2: ConvBlock<T>,
    pub out_channels: usize,
}

impl<T: Scalar> MpDown<T> {
    pub fn new(scope: &Scope<T>, cin: usize, c_branch: usize) -> Self {
        MpDown {
            pool_cv: ConvBlock::cbs(&scope.sub("pool_cv"), cin, c_branch, 1, 1),
            conv_cv1: ConvBlock::cbs(&scope.sub("cv1"), cin, c_branch, 1, 1),
            conv_cv2: ConvBlock::cbs(&scope.sub("cv2"), c_branch, c_branch, 3, 2),
            out_channels: 2 * c_branch,
        }
    }

    /// Default channel growth: each branch keeps the input width.
    pub fn default_growth(scope: &Scope<T>, cin: usize) -> Self {
        Self::new(scope, cin, cin)
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let pooled = self.pool_cv.forward(&max_pool2d(x, 2, 2, 0), mode);
        let strided = self.conv_cv2.forward(&self.conv_cv1.forward(x, mode), mode);
        concat(&[strided, pooled], 1)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.pool_cv.flops(h / 2, w / 2) + self.conv_cv1.flops(h, w) + self.conv_cv2.flops(h, w)
    }
}

/// Upsampling transition: 1x1 channel reduction then nearest-neighbor 2x.
pub struct Up<T: Scalar> {
    cv: ConvBlock<T>,
    pub out_channels: usize,
}

impl<T: Scalar> Up<T> {
    pub fn new(scope: &Scope<T>, cin: usize, cout: usize) -> Self {
        Up {
            cv: ConvBlock::cbs(&scope.sub("cv"), cin, cout, 1, 1),
            out_channels: cout,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        upsample_nearest_2x(&self.cv.forward(x, mode))
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.cv.flops(h, w)
    }
}

/// Re-parameterizable convolution: 3x3 + 1x1 (+ BN identity when shapes
/// allow) branches summed, SiLU on top. `fuse()` folds the branches into a
/// single biased 3x3 used by subsequent eval-mode forwards.
pub struct RepConv<T: Scalar> {
    conv3: Conv2dLayer<T>,
    bn3: BatchNorm2d<T>,
    conv1: Conv2dLayer<T>,
    bn1: BatchNorm2d<T>,
    pub(crate) bn_id: Option<BatchNorm2d<T>>,
    fused: std::cell::RefCell<Option<(ArrayD<T>, ArrayD<T>)>>,
    pub cin: usize,
    pub cout: usize,
    pub stride: usize,
}

impl<T: Scalar> RepConv<T> {
    pub fn new(scope: &Scope<T>, cin: usize, cout: usize, stride: usize) -> Self {
        let conv3 = Conv2dLayer::new(&scope.sub("conv3"), cin, cout, 3, stride, false);
        let bn3 = BatchNorm2d::new(&scope.sub("bn3"), cout);
        let mut conv1 = Conv2dLayer::new(&scope.sub("conv1"), cin, cout, 1, stride, false);
        conv1.pad = 0;
        let bn1 = BatchNorm2d::new(&scope.sub("bn1"), cout);
        let bn_id =
            (cin == cout && stride == 1).then(|| BatchNorm2d::new(&scope.sub("bn_id"), cout));
        RepConv {
            conv3,
            bn3,
            conv1,
            bn1,
            bn_id,
            fused: std::cell::RefCell::new(None),
            cin,
            cout,
            stride,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        if mode == Mode::Eval {
            if let Some((w, b)) = self.fused.borrow().as_ref() {
                let wt = Tensor::constant(w.clone());
                let bt = Tensor::constant(b.clone());
                return conv2d(x, &wt, Some(&bt), self.stride, 1).silu();
            }
        }
        let mut y = self.bn3.forward(&self.conv3.forward(x), mode);
        y = y.add(&self.bn1.forward(&self.conv1.forward(x), mode));
        if let Some(bn_id) = &self.bn_id {
            y = y.add(&bn_id.forward(x, mode));
        }
        y.silu()
    }

    pub fn is_fused(&self) -> bool {
        self.fused.borrow().is_some()
    }

    /// Fold conv+BN branches into one 3x3 kernel and bias.
    pub fn fuse(&self) {
        let fold = |w: &ArrayD<T>, bn: &BatchNorm2d<T>| -> (ArrayD<T>, ArrayD<T>) {
            let (rm, rv) = bn.running_stats();
            let gamma = bn.gamma.value();
            let beta = bn.beta.value();
            let mut w = w.clone();
            let mut b = ArrayD::zeros(IxDyn(&[self.cout]));
            for oc in 0..self.cout {
                let sigma = (rv[[oc]] + T::cast(bn.eps)).sqrt();
                let scale = gamma[[oc]] / sigma;
                let mut lane = w.index_axis_mut(ndarray::Axis(0), oc);
                lane.mapv_inplace(|v| v * scale);
                b[[oc]] = beta[[oc]] - gamma[[oc]] * rm[[oc]] / sigma;
            }
            (w, b)
        };

        let (w3, b3) = fold(&self.conv3.weight.value(), &self.bn3);
        // 1x1 padded into the 3x3 center
        let w1_raw = self.conv1.weight.value();
        let mut w1 = ArrayD::<T>::zeros(IxDyn(&[self.cout, self.cin, 3, 3]));
        for oc in 0..self.cout {
            for ic in 0..self.cin {
                w1[[oc, ic, 1, 1]] = w1_raw[[oc, ic, 0, 0]];
            }
        }
        let (w1, b1) = fold(&w1, &self.bn1);

        let mut w = w3;
        w += &w1;
        let mut b = b3;
        b += &b1;

        if let Some(bn_id) = &self.bn_id {
            let mut wid = ArrayD::<T>::zeros(IxDyn(&[self.cout, self.cin, 3, 3]));
            for c in 0..self.cout {
                wid[[c, c, 1, 1]] = T::one();
            }
            let (wid, bid) = fold(&wid, bn_id);
            w += &wid;
            b += &bid;
        }
        *self.fused.borrow_mut() = Some((w, b));
    }

    pub fn unfuse(&self) {
        *self.fused.borrow_mut() = None;
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        // branched training cost; a fused forward costs only the 3x3 term
        self.conv3.flops(h, w) + self.conv1.flops(h, w)
    }
}

/// Spatial-pyramid-pooling block in a cross-stage-partial wrapper. Pool
/// kernels 5/9/13 at stride 1; spatial dims preserved; `cout` is typically
/// half of `cin`.
pub struct Sppcspc<T: Scalar> {
    cv1: ConvBlock<T>,
    cv2: ConvBlock<T>,
    cv3: ConvBlock<T>,
    cv4: ConvBlock<T>,
    cv5: ConvBlock<T>,
    cv6: ConvBlock<T>,
    cv7: ConvBlock<T>,
    pub out_channels: usize,
}

impl<T: Scalar> Sppcspc<T> {
    pub fn new(scope: &Scope<T>, cin: usize, cout: usize) -> Self {
        let c = cout;
        Sppcspc {
            cv1: ConvBlock::cbs(&scope.sub("cv1"), cin, c, 1, 1),
            cv2: ConvBlock::cbs(&scope.sub("cv2"), cin, c, 1, 1),
            cv3: ConvBlock::cbs(&scope.sub("cv3"), c, c, 3, 1),
            cv4: ConvBlock::cbs(&scope.sub("cv4"), c, c, 1, 1),
            cv5: ConvBlock::cbs(&scope.sub("cv5"), 4 * c, c, 1, 1),
            cv6: ConvBlock::cbs(&scope.sub("cv6"), c, c, 3, 1),
            cv7: ConvBlock::cbs(&scope.sub("cv7"), 2 * c, cout, 1, 1),
            out_channels: cout,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let x1 = self
            .cv4
            .forward(&self.cv3.forward(&self.cv1.forward(x, mode), mode), mode);
        let pools: Vec<Tensor<T>> = [5usize, 9, 13]
            .iter()
            .map(|&k| max_pool2d(&x1, k, 1, k / 2))
            .collect();
        let mut cat = vec![x1];
        cat.extend(pools);
        let y1 = self.cv6.forward(&self.cv5.forward(&concat(&cat, 1), mode), mode);
        let y2 = self.cv2.forward(x, mode);
        self.cv7.forward(&concat(&[y1, y2], 1), mode)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.cv1.flops(h, w)
            + self.cv2.flops(h, w)
            + self.cv3.flops(h, w)
            + self.cv4.flops(h, w)
            + self.cv5.flops(h, w)
            + self.cv6.flops(h, w)
            + self.cv7.flops(h, w)
    }
}

/// Plain biased 1x1 prediction layer with YOLO-style prior initialization of
/// the objectness/class biases.
pub struct PredictConv<T: Scalar> {
    pub conv: Conv2dLayer<T>,
}

impl<T: Scalar> PredictConv<T> {
    pub fn new(
        scope: &Scope<T>,
        cin: usize,
        anchors: usize,
        num_categories: usize,
        stride: usize,
        input_size: usize,
    ) -> Self {
        let cout = anchors * (5 + num_categories);
        let conv = Conv2dLayer::new(&scope.sub("conv"), cin, cout, 1, 1, true);
        // objectness prior: ~8 objects per image at this scale
        if let Some(bias) = &conv.bias {
            let cells = (input_size / stride) as f64;
            let obj_prior = (8.0 / (cells * cells)).ln();
            let cls_prior = (0.6 / (num_categories as f64 - 0.99)).ln();
            bias.update_data(|b| {
                for a in 0..anchors {
                    let base = a * (5 + num_categories);
                    b[[base + 4]] = T::cast(obj_prior);
                    for c in 0..num_categories {
                        b[[base + 5 + c]] = T::cast(cls_prior);
                    }
                }
            });
        }
        PredictConv { conv }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        self.conv.forward(x)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.conv.flops(h, w)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::ParamStore;
    use crate::tensor::gradcheck::gradcheck_with_params;
    use ndarray::IxDyn;
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
    fn elan_preserves_spatial_dims() {
        let store = ParamStore::<f32>::new(0);
        let root = crate::nn::Scope::root(Rc::clone(&store));
        let elan = Elan::backbone(&root.sub("elan"), 16, 8, 32, 2);
        let x = Tensor::constant(ArrayD::zeros(IxDyn(&[1, 16, 12, 12])));
        let y = elan.forward(&x, Mode::Train);
        assert_eq!(y.shape(), vec![1, 32, 12, 12]);
    }

    #[test]
    fn elan_neck_concat_width() {
        let store = ParamStore::<f32>::new(0);
        let root = crate::nn::Scope::root(Rc::clone(&store));
        let elan = Elan::neck(&root.sub("elanh"), 32, 16, 16, 2);
        let x = Tensor::constant(ArrayD::zeros(IxDyn(&[2, 32, 8, 8])));
        let y = elan.forward(&x, Mode::Eval);
        assert_eq!(y.shape(), vec![2, 16, 8, 8]);
    }

    #[test]
    fn mp_down_halves_and_grows() {
        let store = ParamStore::<f32>::new(0);
        let root = crate::nn::Scope::root(Rc::clone(&store));
        let mp = MpDown::default_growth(&root.sub("mp"), 64);
        let x = Tensor::constant(ArrayD::zeros(IxDyn(&[1, 64, 32, 32])));
        let y = mp.forward(&x, Mode::Train);
        assert_eq!(y.shape(), vec![1, 128, 16, 16]);
    }

    #[test]
    fn up_doubles_spatial() {
        let store = ParamStore::<f32>::new(0);
        let root = crate::nn::Scope::root(Rc::clone(&store));
        let up = Up::new(&root.sub("up"), 64, 32);
        let x = Tensor::constant(ArrayD::zeros(IxDyn(&[1, 64, 8, 8])));
        assert_eq!(up.forward(&x, Mode::Train).shape(), vec![1, 32, 16, 16]);
    }

    #[test]
    fn sppcspc_halving_wrapper_shape() {
        let store = ParamStore::<f32>::new(0);
        let root = crate::nn::Scope::root(Rc::clone(&store));
        let spp = Sppcspc::new(&root.sub("spp"), 256, 128);
        let x = Tensor::constant(ArrayD::zeros(IxDyn(&[1, 256, 20, 20])));
        assert_eq!(spp.forward(&x, Mode::Eval).shape(), vec![1, 128, 20, 20]);
    }

    #[test]
    fn repconv_fused_matches_branched() {
        let store = ParamStore::<f64>::new(11);
        let root = crate::nn::Scope::root(Rc::clone(&store));
        let rep = RepConv::new(&root.sub("rep"), 8, 8, 1);
        // non-trivial running stats and affine params
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for bn in [&rep.bn3, &rep.bn1, rep.bn_id.as_ref().unwrap()] {
            bn.set_running_stats(
                ArrayD::from_shape_simple_fn(IxDyn(&[8]), || rng.random_range(-0.5..0.5)),
                ArrayD::from_shape_simple_fn(IxDyn(&[8]), || rng.random_range(0.5..1.5)),
            );
            bn.gamma
                .set_data(ArrayD::from_shape_simple_fn(IxDyn(&[8]), || {
                    rng.random_range(0.5..1.5)
                }));
            bn.beta
                .set_data(ArrayD::from_shape_simple_fn(IxDyn(&[8]), || {
                    rng.random_range(-0.3..0.3)
                }));
        }
        let x = Tensor::constant(rand_arr(&[2, 8, 9, 9], 21));
        let branched = rep.forward(&x, Mode::Eval);
        rep.fuse();
        let fused = rep.forward(&x, Mode::Eval);
        let (bv, fv) = (branched.value(), fused.value());
        let max_diff = bv
            .iter()
            .zip(fv.iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-5, "max_diff={max_diff}");
    }

    #[test]
    fn repconv_without_identity_branch() {
        let store = ParamStore::<f64>::new(3);
        let root = crate::nn::Scope::root(Rc::clone(&store));
        let rep = RepConv::new(&root.sub("rep"), 4, 8, 1);
        assert!(rep.bn_id.is_none());
        let x = Tensor::constant(rand_arr(&[1, 4, 6, 6], 9));
        let branched = rep.forward(&x, Mode::Eval);
        rep.fuse();
        let fused = rep.forward(&x, Mode::Eval);
        let max_diff = branched
            .value()
            .iter()
            .zip(fused.value().iter())
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_diff < 1e-5, "max_diff={max_diff}");
    }

    #[test]
    fn block_gradchecks() {
        // tiny configs, double precision; a subset of coordinates per tensor
        let store = ParamStore::<f64>::new(17);
        let root = crate::nn::Scope::root(Rc::clone(&store));
        let elan = Elan::backbone(&root.sub("elan"), 4, 2, 4, 1);
        let mp = MpDown::new(&root.sub("mp"), 4, 4);
        let spp = Sppcspc::new(&root.sub("spp"), 4, 2);
        let rep = RepConv::new(&root.sub("rep"), 4, 4, 1);
        let params: Vec<Tensor<f64>> = store.entries().iter().map(|e| e.tensor.clone()).collect();
        let x0 = rand_arr(&[2, 4, 8, 8], 31);
        let w = Tensor::constant(rand_arr(&[2, 2, 4, 4], 33));
        let r = gradcheck_with_params(
            |xs| {
                let y = elan.forward(&xs[0], Mode::Train);
                let y = mp.forward(&y, Mode::Train);
                let y = rep.forward(&y.narrow(1, 0, 4), Mode::Train);
                let y = spp.forward(&y, Mode::Train);
                y.mul(&w).mean_all()
            },
            &[x0],
            &params,
            1e-6,
            Some(40),
        );
        assert!(r.passes(1e-3), "{r:?}");
    }
}
