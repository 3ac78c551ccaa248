//! Neural building blocks: parameter management, basic layers, and the
//! detector's composite blocks (ELAN, MP, SPPCSPC, RepConv, GAM/CBAM, Swin).

pub mod attention;
pub mod blocks;
pub mod swin;

use std::cell::RefCell;
use std::rc::Rc;

use ndarray::{ArrayD, IxDyn};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use crate::tensor::{conv2d, linear, Scalar, Tensor};

/// Train/eval switch threaded through every forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// One registered parameter.
#[derive(Clone)]
pub struct ParamEntry<T: Scalar> {
    pub name: String,
    pub tensor: Tensor<T>,
    /// Whether weight decay applies (convolution/linear weights only).
    pub decay: bool,
}

/// Ordered registry of all parameters of a model; creation order is the
/// initialization order, which makes seeded builds reproducible.
pub struct ParamStore<T: Scalar> {
    entries: RefCell<Vec<ParamEntry<T>>>,
    /// Non-trainable state (batch-norm running statistics), serialized with
    /// checkpoints.
    buffers: RefCell<Vec<(String, Rc<RefCell<ArrayD<T>>>)>>,
    rng: RefCell<ChaCha20Rng>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new(seed: u64) -> Rc<Self> {
        Rc::new(Self {
            entries: RefCell::new(Vec::new()),
            buffers: RefCell::new(Vec::new()),
            rng: RefCell::new(ChaCha20Rng::seed_from_u64(seed)),
        })
    }

    pub fn buffers(&self) -> Vec<(String, Rc<RefCell<ArrayD<T>>>)> {
        self.buffers.borrow().clone()
    }

    pub fn get_buffer(&self, name: &str) -> Option<Rc<RefCell<ArrayD<T>>>> {
        self.buffers
            .borrow()
            .iter()
            .find(|(n, _)| n == name)
            .map(|(_, b)| Rc::clone(b))
    }

    fn register_buffer(&self, name: String, data: ArrayD<T>) -> Rc<RefCell<ArrayD<T>>> {
        let b = Rc::new(RefCell::new(data));
        self.buffers.borrow_mut().push((name, Rc::clone(&b)));
        b
    }

    pub fn entries(&self) -> Vec<ParamEntry<T>> {
        self.entries.borrow().clone()
    }

    pub fn param_count(&self) -> usize {
        self.entries.borrow().iter().map(|e| e.tensor.len()).sum()
    }

    pub fn param_count_with_prefix(&self, prefix: &str) -> usize {
        self.entries
            .borrow()
            .iter()
            .filter(|e| e.name.starts_with(prefix))
            .map(|e| e.tensor.len())
            .sum()
    }

    pub fn get(&self, name: &str) -> Option<Tensor<T>> {
        self.entries
            .borrow()
            .iter()
            .find(|e| e.name == name)
            .map(|e| e.tensor.clone())
    }

    pub fn zero_grads(&self) {
        for e in self.entries.borrow().iter() {
            e.tensor.zero_grad();
        }
    }

    fn register(&self, name: String, data: ArrayD<T>, decay: bool) -> Tensor<T> {
        let t = Tensor::param(data);
        self.entries.borrow_mut().push(ParamEntry {
            name,
            tensor: t.clone(),
            decay,
        });
        t
    }

    fn uniform(&self, shape: &[usize], bound: f64) -> ArrayD<T> {
        let mut rng = self.rng.borrow_mut();
        ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            T::cast(rng.random_range(-bound..bound))
        })
    }

    fn normal(&self, shape: &[usize], std: f64) -> ArrayD<T> {
        let mut rng = self.rng.borrow_mut();
        // Box-Muller; two draws per value keeps the stream deterministic.
        ArrayD::from_shape_simple_fn(IxDyn(shape), || {
            let u1: f64 = rng.random_range(1e-12..1.0);
            let u2: f64 = rng.random_range(0.0..1.0);
            T::cast((-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos() * std)
        })
    }
}

/// Scoped parameter builder with hierarchical names.
pub struct Scope<T: Scalar> {
    store: Rc<ParamStore<T>>,
    prefix: String,
}

impl<T: Scalar> Scope<T> {
    pub fn root(store: Rc<ParamStore<T>>) -> Self {
        Scope {
            store,
            prefix: String::new(),
        }
    }

    pub fn sub(&self, name: &str) -> Scope<T> {
        let prefix = if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        };
        Scope {
            store: Rc::clone(&self.store),
            prefix,
        }
    }

    pub fn store(&self) -> Rc<ParamStore<T>> {
        Rc::clone(&self.store)
    }

    pub fn path(&self) -> &str {
        &self.prefix
    }

    pub(crate) fn full(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{}", self.prefix, name)
        }
    }

    /// Kaiming-uniform weight with `fan_in` receptive size.
    pub fn kaiming(&self, name: &str, shape: &[usize], fan_in: usize, decay: bool) -> Tensor<T> {
        let bound = (1.0 / fan_in as f64).sqrt();
        let data = self.store.uniform(shape, bound);
        self.store.register(self.full(name), data, decay)
    }

    pub fn trunc_normal(&self, name: &str, shape: &[usize], std: f64) -> Tensor<T> {
        let data = self.store.normal(shape, std);
        self.store.register(self.full(name), data, false)
    }

    pub fn constant(&self, name: &str, shape: &[usize], value: f64, decay: bool) -> Tensor<T> {
        let data = ArrayD::from_elem(IxDyn(shape), T::cast(value));
        self.store.register(self.full(name), data, decay)
    }

    pub fn from_array(&self, name: &str, data: ArrayD<T>, decay: bool) -> Tensor<T> {
        self.store.register(self.full(name), data, decay)
    }
}

/// Activation applied after a convolution.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    None,
    SiLU,
    ReLU,
    Sigmoid,
}

impl Activation {
    pub fn apply<T: Scalar>(&self, x: &Tensor<T>) -> Tensor<T> {
        match self {
            Activation::None => x.clone(),
            Activation::SiLU => x.silu(),
            Activation::ReLU => x.relu(),
            Activation::Sigmoid => x.sigmoid(),
        }
    }
}

/// Plain 2-D convolution layer.
pub struct Conv2dLayer<T: Scalar> {
    pub weight: Tensor<T>,
    pub bias: Option<Tensor<T>>,
    pub cin: usize,
    pub cout: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
}

impl<T: Scalar> Conv2dLayer<T> {
    pub fn new(
        scope: &Scope<T>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        with_bias: bool,
    ) -> Self {
        let fan_in = cin * k * k;
        let weight = scope.kaiming("weight", &[cout, cin, k, k], fan_in, true);
        let bias = with_bias.then(|| scope.kaiming("bias", &[cout], fan_in, false));
        Conv2dLayer {
            weight,
            bias,
            cin,
            cout,
            k,
            stride,
            pad: k / 2,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        conv2d(x, &self.weight, self.bias.as_ref(), self.stride, self.pad)
    }

    /// MACs*2 for an input of spatial size `h` x `w`.
    pub fn flops(&self, h: usize, w: usize) -> u64 {
        let ho = (h + 2 * self.pad - self.k) / self.stride + 1;
        let wo = (w + 2 * self.pad - self.k) / self.stride + 1;
        let macs = (self.k * self.k * self.cin * self.cout * ho * wo) as u64;
        2 * macs + if self.bias.is_some() { (ho * wo * self.cout) as u64 } else { 0 }
    }
}

/// Batch normalization over (B, H, W) per channel.
pub struct BatchNorm2d<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    running_mean: Rc<RefCell<ArrayD<T>>>,
    running_var: Rc<RefCell<ArrayD<T>>>,
    pub channels: usize,
    pub eps: f64,
    pub momentum: f64,
}

/// YOLO-family defaults.
pub const BN_EPS: f64 = 1e-3;
pub const BN_MOMENTUM: f64 = 0.03;

impl<T: Scalar> BatchNorm2d<T> {
    pub fn new(scope: &Scope<T>, channels: usize) -> Self {
        let store = scope.store();
        BatchNorm2d {
            gamma: scope.constant("gamma", &[channels], 1.0, false),
            beta: scope.constant("beta", &[channels], 0.0, false),
            running_mean: store
                .register_buffer(scope.full("running_mean"), ArrayD::zeros(IxDyn(&[channels]))),
            running_var: store.register_buffer(
                scope.full("running_var"),
                ArrayD::from_elem(IxDyn(&[channels]), T::one()),
            ),
            channels,
            eps: BN_EPS,
            momentum: BN_MOMENTUM,
        }
    }

    pub fn running_stats(&self) -> (ArrayD<T>, ArrayD<T>) {
        (
            self.running_mean.borrow().clone(),
            self.running_var.borrow().clone(),
        )
    }

    pub fn set_running_stats(&self, mean: ArrayD<T>, var: ArrayD<T>) {
        *self.running_mean.borrow_mut() = mean;
        *self.running_var.borrow_mut() = var;
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let c = self.channels;
        let cshape = [1, c, 1, 1];
        let gamma = self.gamma.reshape(&cshape);
        let beta = self.beta.reshape(&cshape);
        match mode {
            Mode::Train => {
                let mean = x.mean_axes(&[0, 2, 3]);
                let centered = x.sub(&mean);
                let var = centered.square().mean_axes(&[0, 2, 3]);
                // Update running stats outside the graph.
                {
                    let n: f64 = {
                        let s = x.shape();
                        (s[0] * s[2] * s[3]) as f64
                    };
                    let unbias = if n > 1.0 { n / (n - 1.0) } else { 1.0 };
                    let m = self.momentum;
                    let mv = mean.value();
                    let vv = var.value();
                    let mut rm = self.running_mean.borrow_mut();
                    let mut rv = self.running_var.borrow_mut();
                    for i in 0..c {
                        rm[[i]] = rm[[i]] * T::cast(1.0 - m) + mv[[0, i, 0, 0]] * T::cast(m);
                        rv[[i]] = rv[[i]] * T::cast(1.0 - m)
                            + vv[[0, i, 0, 0]] * T::cast(unbias) * T::cast(m);
                    }
                }
                let denom = var.affine(T::one(), T::cast(self.eps)).sqrt();
                centered.div(&denom).mul(&gamma).add(&beta)
            }
            Mode::Eval => {
                let rm = Tensor::constant(
                    self.running_mean
                        .borrow()
                        .clone()
                        .into_shape_with_order(IxDyn(&cshape))
                        .unwrap(),
                );
                let rv = Tensor::constant(
                    self.running_var
                        .borrow()
                        .clone()
                        .into_shape_with_order(IxDyn(&cshape))
                        .unwrap(),
                );
                let denom = rv.affine(T::one(), T::cast(self.eps)).sqrt();
                x.sub(&rm).div(&denom).mul(&gamma).add(&beta)
            }
        }
    }
}

/// Conv -> optional BN -> activation. With BN and SiLU this is the CBS block.
pub struct ConvBlock<T: Scalar> {
    pub conv: Conv2dLayer<T>,
    pub bn: Option<BatchNorm2d<T>>,
    pub act: Activation,
}

impl<T: Scalar> ConvBlock<T> {
    /// CBS: conv (no bias) + BN + SiLU.
    pub fn cbs(scope: &Scope<T>, cin: usize, cout: usize, k: usize, stride: usize) -> Self {
        ConvBlock {
            conv: Conv2dLayer::new(&scope.sub("conv"), cin, cout, k, stride, false),
            bn: Some(BatchNorm2d::new(&scope.sub("bn"), cout)),
            act: Activation::SiLU,
        }
    }

    /// Conv (no bias) + BN + chosen activation.
    pub fn conv_bn(
        scope: &Scope<T>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        act: Activation,
    ) -> Self {
        ConvBlock {
            conv: Conv2dLayer::new(&scope.sub("conv"), cin, cout, k, stride, false),
            bn: Some(BatchNorm2d::new(&scope.sub("bn"), cout)),
            act,
        }
    }

    /// Biased conv without normalization.
    pub fn plain(
        scope: &Scope<T>,
        cin: usize,
        cout: usize,
        k: usize,
        stride: usize,
        act: Activation,
    ) -> Self {
        ConvBlock {
            conv: Conv2dLayer::new(&scope.sub("conv"), cin, cout, k, stride, true),
            bn: None,
            act,
        }
    }

    pub fn forward(&self, x: &Tensor<T>, mode: Mode) -> Tensor<T> {
        let mut y = self.conv.forward(x);
        if let Some(bn) = &self.bn {
            y = bn.forward(&y, mode);
        }
        self.act.apply(&y)
    }

    pub fn flops(&self, h: usize, w: usize) -> u64 {
        self.conv.flops(h, w)
    }
}

/// Layer normalization over the last axis.
pub struct LayerNorm<T: Scalar> {
    pub gamma: Tensor<T>,
    pub beta: Tensor<T>,
    pub eps: f64,
}

impl<T: Scalar> LayerNorm<T> {
    pub fn new(scope: &Scope<T>, dim: usize) -> Self {
        LayerNorm {
            gamma: scope.constant("gamma", &[dim], 1.0, false),
            beta: scope.constant("beta", &[dim], 0.0, false),
            eps: 1e-5,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        let last = x.shape().len() - 1;
        let mean = x.mean_axes(&[last]);
        let centered = x.sub(&mean);
        let var = centered.square().mean_axes(&[last]);
        let denom = var.affine(T::one(), T::cast(self.eps)).sqrt();
        centered.div(&denom).mul(&self.gamma).add(&self.beta)
    }
}

/// Fully connected layer over the last axis.
pub struct LinearLayer<T: Scalar> {
    pub weight: Tensor<T>, // (in, out)
    pub bias: Option<Tensor<T>>,
    pub d_in: usize,
    pub d_out: usize,
}

impl<T: Scalar> LinearLayer<T> {
    pub fn new(scope: &Scope<T>, d_in: usize, d_out: usize, with_bias: bool) -> Self {
        LinearLayer {
            weight: scope.kaiming("weight", &[d_in, d_out], d_in, true),
            bias: with_bias.then(|| scope.kaiming("bias", &[d_out], d_in, false)),
            d_in,
            d_out,
        }
    }

    pub fn forward(&self, x: &Tensor<T>) -> Tensor<T> {
        linear(x, &self.weight, self.bias.as_ref())
    }

    pub fn flops(&self, tokens: usize) -> u64 {
        2 * (tokens * self.d_in * self.d_out) as u64
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    
    use ndarray::IxDyn;

    #[test]
    fn param_store_registers_in_order() {
        let store = ParamStore::<f32>::new(7);
        let root = Scope::root(Rc::clone(&store));
        let block = root.sub("stem");
        let _c = Conv2dLayer::new(&block.sub("conv"), 3, 8, 3, 1, false);
        let _b = BatchNorm2d::new(&block.sub("bn"), 8);
        let names: Vec<String> = store.entries().iter().map(|e| e.name.clone()).collect();
        assert_eq!(names, vec!["stem.conv.weight", "stem.bn.gamma", "stem.bn.beta"]);
        assert_eq!(store.param_count(), 8 * 3 * 9 + 16);
    }

    #[test]
    fn seeded_builds_are_identical() {
        let build = || {
            let store = ParamStore::<f32>::new(42);
            let root = Scope::root(Rc::clone(&store));
            let c = Conv2dLayer::new(&root.sub("c"), 3, 4, 3, 1, true);
            (c.weight.value(), c.bias.unwrap().value())
        };
        let (w1, b1) = build();
        let (w2, b2) = build();
        assert_eq!(w1, w2);
        assert_eq!(b1, b2);
    }

    #[test]
    fn batchnorm_train_normalizes_and_updates_running() {
        let store = ParamStore::<f64>::new(1);
        let root = Scope::root(Rc::clone(&store));
        let bn = BatchNorm2d::new(&root.sub("bn"), 2);
        let x = Tensor::constant(
            ArrayD::from_shape_fn(IxDyn(&[2, 2, 3, 3]), |ix| (ix[0] + 2 * ix[1]) as f64 + 0.1),
        );
        let y = bn.forward(&x, Mode::Train);
        let v = y.value();
        // per-channel mean ~0 after normalization
        for c in 0..2 {
            let mut s = 0.0;
            for b in 0..2 {
                for i in 0..3 {
                    for j in 0..3 {
                        s += v[[b, c, i, j]];
                    }
                }
            }
            assert!(s.abs() < 1e-9, "channel {c} mean {s}");
        }
        let (rm, _) = bn.running_stats();
        assert!(rm[[0]] != 0.0);
    }

    #[test]
    fn batchnorm_gradcheck_train_mode() {
        let store = ParamStore::<f64>::new(3);
        let root = Scope::root(Rc::clone(&store));
        let bn = BatchNorm2d::new(&root.sub("bn"), 2);
        // gamma/beta at 1/0 make some gradients vanish; randomize them first
        bn.gamma.set_data(ArrayD::from_shape_vec(IxDyn(&[2]), vec![0.9, 1.2]).unwrap());
        bn.beta.set_data(ArrayD::from_shape_vec(IxDyn(&[2]), vec![-0.1, 0.2]).unwrap());
        let x0 = ArrayD::from_shape_fn(IxDyn(&[2, 2, 2, 2]), |ix| {
            (ix[0] as f64 - 0.3) * 0.7 + ix[2] as f64 * 0.31 - ix[3] as f64 * 0.11 + ix[1] as f64
        });
        let params: Vec<Tensor<f64>> = store.entries().iter().map(|e| e.tensor.clone()).collect();
        let r = crate::tensor::gradcheck::gradcheck_with_params(
            |xs| {
                let y = bn.forward(&xs[0], Mode::Train).square();
                // weight the objective so gradients are position dependent
                let w = Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[2, 2, 2, 2]), |ix| {
                    0.3 + (ix[3] as f64) * 0.21 + ix[1] as f64 * 0.05
                }));
                y.mul(&w).mean_all()
            },
            &[x0],
            &params,
            1e-6,
            None,
        );
        assert!(r.passes(1e-5), "{r:?}");
    }

    #[test]
    fn layernorm_normalizes_rows() {
        let store = ParamStore::<f64>::new(5);
        let root = Scope::root(Rc::clone(&store));
        let ln = LayerNorm::new(&root.sub("ln"), 4);
        let x = Tensor::constant(ArrayD::from_shape_fn(IxDyn(&[3, 4]), |ix| {
            (ix[0] * 4 + ix[1]) as f64
        }));
        let y = ln.forward(&x).value();
        for r in 0..3 {
            let mean: f64 = (0..4).map(|c| y[[r, c]]).sum::<f64>() / 4.0;
            assert!(mean.abs() < 1e-9);
        }
    }
}
