//! Detector assembly: backbone, FPN neck, three detection heads, with
//! configurable SWCSP/GAM/CBAM insertion, raw-output decoding, graph
//! inspection and checkpointing.

use std::collections::BTreeSet;
use std::io::{Read, Write};
use std::path::Path;
use std::rc::Rc;

use ndarray::{ArrayD, Ix4, IxDyn};
use serde::{Deserialize, Serialize};

use crate::assign::AnchorSet;
use crate::error::{Error, Result};
use crate::geometry::CornerBox;
use crate::nn::attention::{AttentionKind, Cbam, Gam};
use crate::nn::blocks::{Elan, MpDown, PredictConv, RepConv, Sppcspc, Up};
use crate::nn::swin::{SwinParams, Swcsp};
use crate::nn::{ConvBlock, Mode, ParamStore, Scope};
use crate::tensor::{concat, Scalar, Tensor};

/// Graph sites accepting SWCSP or attention insertions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Site {
    Backbone,
    Head1,
    Head2,
    Head3,
}

impl Site {
    pub const ALL_HEADS: [Site; 3] = [Site::Head1, Site::Head2, Site::Head3];
}

/// Where to insert Swin (SWCSP) and attention blocks.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct PlacementConfig {
    #[serde(default)]
    pub swin: BTreeSet<Site>,
    #[serde(default)]
    pub attention: BTreeSet<Site>,
    #[serde(default)]
    pub attention_kind: Option<AttentionKind>,
}

impl PlacementConfig {
    /// Plain YOLOv7: no extra blocks.
    pub fn none() -> Self {
        Self::default()
    }

    /// SWCSP + GAM before every detection head.
    pub fn deeploc() -> Self {
        PlacementConfig {
            swin: Site::ALL_HEADS.into_iter().collect(),
            attention: Site::ALL_HEADS.into_iter().collect(),
            attention_kind: Some(AttentionKind::Gam),
        }
    }

    /// Attention only, before all heads.
    pub fn attention_all_heads(kind: AttentionKind) -> Self {
        PlacementConfig {
            swin: BTreeSet::new(),
            attention: Site::ALL_HEADS.into_iter().collect(),
            attention_kind: Some(kind),
        }
    }

    /// SWCSP only, before all heads.
    pub fn swin_all_heads() -> Self {
        PlacementConfig {
            swin: Site::ALL_HEADS.into_iter().collect(),
            attention: BTreeSet::new(),
            attention_kind: None,
        }
    }
}

/// Channel schedule. `Full` is the reference detector; `Tiny` quarters the
/// widths and halves the aggregation depth for desk-scale runs.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ChannelSchedule {
    Full,
    Tiny,
}

/// Order of the blocks inserted before a detection head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadBlockOrder {
    SwinThenAttention,
    AttentionThenSwin,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub input_size: usize,
    pub schedule: ChannelSchedule,
    pub placement: PlacementConfig,
    pub num_categories: usize,
    #[serde(default)]
    pub anchors: AnchorSet,
    #[serde(default)]
    pub swin: SwinParams,
    #[serde(default = "default_swcsp_depth")]
    pub swcsp_depth: usize,
    #[serde(default = "default_attention_reduction")]
    pub attention_reduction: usize,
    #[serde(default = "default_head_block_order")]
    pub head_block_order: HeadBlockOrder,
}

fn default_swcsp_depth() -> usize {
    2
}
fn default_attention_reduction() -> usize {
    4
}
fn default_head_block_order() -> HeadBlockOrder {
    HeadBlockOrder::SwinThenAttention
}

impl ModelConfig {
    /// Full-scale detector with the given placement. 672 input whenever Swin
    /// blocks are present, 640 otherwise.
    pub fn full(placement: PlacementConfig) -> Self {
        let input_size = if placement.swin.is_empty() { 640 } else { 672 };
        let anchors = AnchorSet::default().scaled(input_size as f64 / 640.0);
        ModelConfig {
            input_size,
            schedule: ChannelSchedule::Full,
            placement,
            num_categories: 4,
            anchors,
            swin: SwinParams::default(),
            swcsp_depth: 2,
            attention_reduction: 4,
            head_block_order: HeadBlockOrder::SwinThenAttention,
        }
    }

    /// The DeepLOC preset: SWCSP + GAM before every head at 672x672.
    pub fn deeploc() -> Self {
        Self::full(PlacementConfig::deeploc())
    }

    /// Quarter-width detector for tests and synthetic data.
    pub fn tiny(input_size: usize, placement: PlacementConfig) -> Self {
        ModelConfig {
            input_size,
            schedule: ChannelSchedule::Tiny,
            placement,
            num_categories: 4,
            anchors: AnchorSet::default().scaled(input_size as f64 / 640.0),
            swin: SwinParams {
                window: 4,
                head_dim: 8,
                mlp_ratio: 2,
                rel_pos_bias: true,
            },
            swcsp_depth: 1,
            attention_reduction: 4,
            head_block_order: HeadBlockOrder::SwinThenAttention,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_size % 32 != 0 {
            return Err(Error::Config(format!(
                "input_size {} must be divisible by 32",
                self.input_size
            )));
        }
        if !self.placement.swin.is_empty() {
            let coarse = self.input_size / 32;
            if coarse % self.swin.window != 0 {
                return Err(Error::Config(format!(
                    "input_size {} is not window-compatible: {}/32 = {} must be a multiple of \
                     window_size {} (672/32 = 21 = 3*7 works for window 7)",
                    self.input_size, self.input_size, coarse, self.swin.window
                )));
            }
        }
        if !self.placement.attention.is_empty() && self.placement.attention_kind.is_none() {
            return Err(Error::Config(
                "attention placements given but attention_kind is none".into(),
            ));
        }
        if self.num_categories == 0 {
            return Err(Error::Config("num_categories must be positive".into()));
        }
        Ok(())
    }

    /// Stable fingerprint of the architecture-defining fields.
    pub fn fingerprint(&self) -> String {
        use sha2::{Digest, Sha256};
        let json = serde_json::to_string(self).expect("config serializes");
        let mut h = Sha256::new();
        h.update(json.as_bytes());
        hex_string(&h.finalize())
    }
}

fn hex_string(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

enum Block<T: Scalar> {
    Input,
    Cbs(ConvBlock<T>),
    Elan(Elan<T>),
    Mp(MpDown<T>),
    Up(Up<T>),
    Spp(Sppcspc<T>),
    Rep(RepConv<T>),
    Gam(Gam<T>),
    Cbam(Cbam<T>),
    Swcsp(Swcsp<T>),
    Predict(PredictConv<T>),
    Concat,
}

impl<T: Scalar> Block<T> {
    fn kind(&self) -> &'static str {
        match self {
            Block::Input => "input",
            Block::Cbs(_) => "cbs",
            Block::Elan(_) => "elan",
            Block::Mp(_) => "mp",
            Block::Up(_) => "up",
            Block::Spp(_) => "sppcspc",
            Block::Rep(_) => "repconv",
            Block::Gam(_) => "gam",
            Block::Cbam(_) => "cbam",
            Block::Swcsp(_) => "swcsp",
            Block::Predict(_) => "predict",
            Block::Concat => "concat",
        }
    }
}

struct Node<T: Scalar> {
    name: String,
    block: Block<T>,
    inputs: Vec<usize>,
    /// (C, H, W) at the configured input size.
    out_shape: (usize, usize, usize),
}

/// One row of the graph dump.
#[derive(Debug, Clone, Serialize)]
pub struct LayerInfo {
    pub index: usize,
    pub name: String,
    pub kind: String,
    pub from: Vec<usize>,
    pub out_channels: usize,
    pub out_height: usize,
    pub out_width: usize,
    pub params: usize,
    pub flops: u64,
}

pub struct Detector<T: Scalar> {
    pub config: ModelConfig,
    nodes: Vec<Node<T>>,
    head_pred: [usize; 3],
    /// Feature nodes entering each head's RepConv (default explanation site).
    pub head_feature: [usize; 3],
    pub store: Rc<ParamStore<T>>,
}

struct GraphBuilder<T: Scalar> {
    nodes: Vec<Node<T>>,
    scope: Scope<T>,
}

impl<T: Scalar> GraphBuilder<T> {
    fn push(&mut self, name: &str, block: Block<T>, inputs: Vec<usize>) -> usize {
        let out_shape = self.infer_shape(&block, &inputs);
        self.nodes.push(Node {
            name: name.to_string(),
            block,
            inputs,
            out_shape,
        });
        self.nodes.len() - 1
    }

    fn shape_of(&self, idx: usize) -> (usize, usize, usize) {
        self.nodes[idx].out_shape
    }

    fn infer_shape(&self, block: &Block<T>, inputs: &[usize]) -> (usize, usize, usize) {
        let ins: Vec<(usize, usize, usize)> = inputs.iter().map(|&i| self.shape_of(i)).collect();
        match block {
            Block::Input => (0, 0, 0), // set explicitly by the builder
            Block::Cbs(cb) => {
                let (_, h, w) = ins[0];
                let s = cb.conv.stride;
                (cb.conv.cout, h / s, w / s)
            }
            Block::Elan(e) => {
                let (_, h, w) = ins[0];
                (e.out_channels, h, w)
            }
            Block::Mp(m) => {
                let (_, h, w) = ins[0];
                (m.out_channels, h / 2, w / 2)
            }
            Block::Up(u) => {
                let (_, h, w) = ins[0];
                (u.out_channels, h * 2, w * 2)
            }
            Block::Spp(s) => {
                let (_, h, w) = ins[0];
                (s.out_channels, h, w)
            }
            Block::Rep(r) => {
                let (_, h, w) = ins[0];
                (r.cout, h / r.stride, w / r.stride)
            }
            Block::Gam(_) | Block::Cbam(_) | Block::Swcsp(_) => ins[0],
            Block::Predict(p) => {
                let (_, h, w) = ins[0];
                (p.conv.cout, h, w)
            }
            Block::Concat => {
                let c: usize = ins.iter().map(|s| s.0).sum();
                (c, ins[0].1, ins[0].2)
            }
        }
    }
}

/// Width/depth numbers for one schedule.
struct Dims {
    stem: [usize; 4],
    elan_mid: [usize; 4],
    elan_out: [usize; 4],
    elan_depth: usize,
    spp_out: usize,
    neck_mid: [usize; 4],
    neck_out: [usize; 4],
    head_ch: [usize; 3],
}

fn dims(schedule: ChannelSchedule) -> Dims {
    match schedule {
        ChannelSchedule::Full => Dims {
            stem: [32, 64, 64, 128],
            elan_mid: [64, 128, 256, 256],
            elan_out: [256, 512, 1024, 1024],
            elan_depth: 2,
            spp_out: 512,
            neck_mid: [256, 128, 256, 512],
            neck_out: [256, 128, 256, 512],
            head_ch: [128, 256, 512],
        },
        ChannelSchedule::Tiny => Dims {
            stem: [8, 16, 16, 32],
            elan_mid: [16, 32, 64, 64],
            elan_out: [64, 128, 256, 256],
            elan_depth: 1,
            spp_out: 128,
            neck_mid: [64, 32, 64, 128],
            neck_out: [64, 32, 64, 128],
            head_ch: [32, 64, 128],
        },
    }
}

impl<T: Scalar> Detector<T> {
    /// Build the detector graph for `cfg`, seeding all weights from `seed`.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let store = ParamStore::<T>::new(seed);
        let root = Scope::root(Rc::clone(&store));
        let d = dims(cfg.schedule);
        let s = cfg.input_size;

        let mut b = GraphBuilder {
            nodes: Vec::new(),
            scope: root,
        };
        let input = b.push("input", Block::Input, vec![]);
        b.nodes[input].out_shape = (3, s, s);

        let scope = b.scope.sub("backbone");
        // stem
        let c0 = b.push(
            "backbone.stem0",
            Block::Cbs(ConvBlock::cbs(&scope.sub("stem0"), 3, d.stem[0], 3, 1)),
            vec![input],
        );
        let c1 = b.push(
            "backbone.stem1",
            Block::Cbs(ConvBlock::cbs(&scope.sub("stem1"), d.stem[0], d.stem[1], 3, 2)),
            vec![c0],
        );
        let c2 = b.push(
            "backbone.stem2",
            Block::Cbs(ConvBlock::cbs(&scope.sub("stem2"), d.stem[1], d.stem[2], 3, 1)),
            vec![c1],
        );
        let c3 = b.push(
            "backbone.stem3",
            Block::Cbs(ConvBlock::cbs(&scope.sub("stem3"), d.stem[2], d.stem[3], 3, 2)),
            vec![c2],
        );
        // stage 1 (/4)
        let e1 = b.push(
            "backbone.elan1",
            Block::Elan(Elan::backbone(
                &scope.sub("elan1"),
                d.stem[3],
                d.elan_mid[0],
                d.elan_out[0],
                d.elan_depth,
            )),
            vec![c3],
        );
        // stage 2 (/8)
        let mp1 = b.push(
            "backbone.mp1",
            Block::Mp(MpDown::new(&scope.sub("mp1"), d.elan_out[0], d.elan_out[0] / 2)),
            vec![e1],
        );
        let e2 = b.push(
            "backbone.elan2",
            Block::Elan(Elan::backbone(
                &scope.sub("elan2"),
                d.elan_out[0],
                d.elan_mid[1],
                d.elan_out[1],
                d.elan_depth,
            )),
            vec![mp1],
        );
        // stage 3 (/16)
        let mp2 = b.push(
            "backbone.mp2",
            Block::Mp(MpDown::new(&scope.sub("mp2"), d.elan_out[1], d.elan_out[1] / 2)),
            vec![e2],
        );
        let e3 = b.push(
            "backbone.elan3",
            Block::Elan(Elan::backbone(
                &scope.sub("elan3"),
                d.elan_out[1],
                d.elan_mid[2],
                d.elan_out[2],
                d.elan_depth,
            )),
            vec![mp2],
        );
        // stage 4 (/32)
        let mp3 = b.push(
            "backbone.mp3",
            Block::Mp(MpDown::new(&scope.sub("mp3"), d.elan_out[2], d.elan_out[2] / 2)),
            vec![e3],
        );
        let mut e4 = b.push(
            "backbone.elan4",
            Block::Elan(Elan::backbone(
                &scope.sub("elan4"),
                d.elan_out[2],
                d.elan_mid[3],
                d.elan_out[3],
                d.elan_depth,
            )),
            vec![mp3],
        );
        // optional backbone insertions
        if cfg.placement.swin.contains(&Site::Backbone) {
            e4 = b.push(
                "backbone.swcsp",
                Block::Swcsp(Swcsp::new(
                    &scope.sub("swcsp"),
                    d.elan_out[3],
                    cfg.swin,
                    cfg.swcsp_depth,
                )),
                vec![e4],
            );
        }
        if cfg.placement.attention.contains(&Site::Backbone) {
            e4 = push_attention(&mut b, &scope.sub("attn"), "backbone.attn", cfg, d.elan_out[3], e4);
        }

        // neck
        let scope = b.scope.sub("neck");
        let spp = b.push(
            "neck.sppcspc",
            Block::Spp(Sppcspc::new(&scope.sub("sppcspc"), d.elan_out[3], d.spp_out)),
            vec![e4],
        );
        // top-down to /16
        let up1 = b.push(
            "neck.up1",
            Block::Up(Up::new(&scope.sub("up1"), d.spp_out, d.neck_mid[0])),
            vec![spp],
        );
        let lat1 = b.push(
            "neck.lat1",
            Block::Cbs(ConvBlock::cbs(&scope.sub("lat1"), d.elan_out[2], d.neck_mid[0], 1, 1)),
            vec![e3],
        );
        let cat1 = b.push("neck.cat1", Block::Concat, vec![lat1, up1]);
        let h1 = b.push(
            "neck.elanh1",
            Block::Elan(Elan::neck(
                &scope.sub("elanh1"),
                2 * d.neck_mid[0],
                d.neck_mid[0],
                d.neck_out[0],
                d.elan_depth,
            )),
            vec![cat1],
        );
        // top-down to /8
        let up2 = b.push(
            "neck.up2",
            Block::Up(Up::new(&scope.sub("up2"), d.neck_out[0], d.neck_mid[1])),
            vec![h1],
        );
        let lat2 = b.push(
            "neck.lat2",
            Block::Cbs(ConvBlock::cbs(&scope.sub("lat2"), d.elan_out[1], d.neck_mid[1], 1, 1)),
            vec![e2],
        );
        let cat2 = b.push("neck.cat2", Block::Concat, vec![lat2, up2]);
        let p3 = b.push(
            "neck.elanh2",
            Block::Elan(Elan::neck(
                &scope.sub("elanh2"),
                2 * d.neck_mid[1],
                2 * d.neck_mid[1] / 2,
                d.neck_out[1],
                d.elan_depth,
            )),
            vec![cat2],
        );
        // bottom-up to /16
        let mp4 = b.push(
            "neck.mp4",
            Block::Mp(MpDown::new(&scope.sub("mp4"), d.neck_out[1], d.neck_out[1])),
            vec![p3],
        );
        let cat3 = b.push("neck.cat3", Block::Concat, vec![mp4, h1]);
        let p4 = b.push(
            "neck.elanh3",
            Block::Elan(Elan::neck(
                &scope.sub("elanh3"),
                2 * d.neck_out[1] + d.neck_out[0],
                d.neck_mid[2],
                d.neck_out[2],
                d.elan_depth,
            )),
            vec![cat3],
        );
        // bottom-up to /32
        let mp5 = b.push(
            "neck.mp5",
            Block::Mp(MpDown::new(&scope.sub("mp5"), d.neck_out[2], d.neck_out[2])),
            vec![p4],
        );
        let cat4 = b.push("neck.cat4", Block::Concat, vec![mp5, spp]);
        let p5 = b.push(
            "neck.elanh4",
            Block::Elan(Elan::neck(
                &scope.sub("elanh4"),
                2 * d.neck_out[2] + d.spp_out,
                d.neck_mid[3],
                d.neck_out[3],
                d.elan_depth,
            )),
            vec![cat4],
        );

        // heads
        let scope = b.scope.sub("heads");
        let mut head_pred = [0usize; 3];
        let mut head_feature = [0usize; 3];
        let strides = [8usize, 16, 32];
        for (i, (&feat, site)) in [p3, p4, p5]
            .iter()
            .zip([Site::Head1, Site::Head2, Site::Head3])
            .enumerate()
        {
            let hscope = scope.sub(&format!("head{}", i + 1));
            let ch = d.head_ch[i];
            let mut cur = feat;
            let insertions: [(&str, bool); 2] = match cfg.head_block_order {
                HeadBlockOrder::SwinThenAttention => [("swin", true), ("attn", false)],
                HeadBlockOrder::AttentionThenSwin => [("attn", false), ("swin", true)],
            };
            for (label, is_swin) in insertions {
                if is_swin && cfg.placement.swin.contains(&site) {
                    cur = b.push(
                        &format!("heads.head{}.swcsp", i + 1),
                        Block::Swcsp(Swcsp::new(
                            &hscope.sub("swcsp"),
                            ch,
                            cfg.swin,
                            cfg.swcsp_depth,
                        )),
                        vec![cur],
                    );
                } else if !is_swin && cfg.placement.attention.contains(&site) {
                    cur = push_attention(
                        &mut b,
                        &hscope.sub(label),
                        &format!("heads.head{}.attn", i + 1),
                        cfg,
                        ch,
                        cur,
                    );
                }
            }
            head_feature[i] = cur;
            let rep = b.push(
                &format!("heads.head{}.repconv", i + 1),
                Block::Rep(RepConv::new(&hscope.sub("repconv"), ch, 2 * ch, 1)),
                vec![cur],
            );
            let pred = b.push(
                &format!("heads.head{}.predict", i + 1),
                Block::Predict(PredictConv::new(
                    &hscope.sub("predict"),
                    2 * ch,
                    3,
                    cfg.num_categories,
                    strides[i],
                    cfg.input_size,
                )),
                vec![rep],
            );
            head_pred[i] = pred;
        }

        Ok(Detector {
            config: cfg.clone(),
            nodes: b.nodes,
            head_pred,
            head_feature,
            store,
        })
    }

    pub fn num_nodes(&self) -> usize {
        self.nodes.len()
    }

    pub fn param_count(&self) -> usize {
        self.store.param_count()
    }

    /// Run the graph; returns the three raw head maps (small to large stride).
    pub fn forward(&self, images: &Tensor<T>, mode: Mode) -> Result<[Tensor<T>; 3]> {
        self.forward_traced(images, mode).map(|(heads, _)| heads)
    }

    /// Forward keeping the activation of every node the caller asks for by
    /// index (used by GradCAM++ to reach intermediate features).
    pub fn forward_traced(
        &self,
        images: &Tensor<T>,
        mode: Mode,
    ) -> Result<([Tensor<T>; 3], Vec<Tensor<T>>)> {
        let shape = images.shape();
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::Shape(format!(
                "expected input (B, 3, {s}, {s}), got {shape:?}"
            )));
        }
        let mut outputs: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        // free node outputs after their last consumer
        let mut last_use = vec![0usize; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            for &inp in &node.inputs {
                last_use[inp] = i;
            }
        }
        for &hp in &self.head_pred {
            last_use[hp] = usize::MAX;
        }
        for (i, node) in self.nodes.iter().enumerate() {
            let ins: Vec<Tensor<T>> = node
                .inputs
                .iter()
                .map(|&j| outputs[j].clone().expect("topological order"))
                .collect();
            let out = match &node.block {
                Block::Input => images.clone(),
                Block::Cbs(cb) => cb.forward(&ins[0], mode),
                Block::Elan(e) => e.forward(&ins[0], mode),
                Block::Mp(m) => m.forward(&ins[0], mode),
                Block::Up(u) => u.forward(&ins[0], mode),
                Block::Spp(sp) => sp.forward(&ins[0], mode),
                Block::Rep(r) => r.forward(&ins[0], mode),
                Block::Gam(g) => g.forward(&ins[0], mode),
                Block::Cbam(c) => c.forward(&ins[0], mode),
                Block::Swcsp(sw) => sw.forward(&ins[0], mode),
                Block::Predict(p) => p.forward(&ins[0]),
                Block::Concat => concat(&ins, 1),
            };
            outputs[i] = Some(out);
            for &inp in &node.inputs {
                if last_use[inp] == i {
                    outputs[inp] = None;
                }
            }
        }
        let heads = [
            outputs[self.head_pred[0]].clone().unwrap(),
            outputs[self.head_pred[1]].clone().unwrap(),
            outputs[self.head_pred[2]].clone().unwrap(),
        ];
        let kept: Vec<Tensor<T>> = outputs.into_iter().flatten().collect();
        Ok((heads, kept))
    }

    /// Forward that also returns the feature map entering a head's RepConv.
    pub fn forward_with_feature(
        &self,
        images: &Tensor<T>,
        mode: Mode,
        head: usize,
    ) -> Result<([Tensor<T>; 3], Tensor<T>)> {
        let feature_idx = self.head_feature[head];
        let shape = images.shape();
        let s = self.config.input_size;
        if shape.len() != 4 || shape[1] != 3 || shape[2] != s || shape[3] != s {
            return Err(Error::Shape(format!(
                "expected input (B, 3, {s}, {s}), got {shape:?}"
            )));
        }
        let mut outputs: Vec<Option<Tensor<T>>> = vec![None; self.nodes.len()];
        for (i, node) in self.nodes.iter().enumerate() {
            let ins: Vec<Tensor<T>> = node
                .inputs
                .iter()
                .map(|&j| outputs[j].clone().expect("topological order"))
                .collect();
            let out = match &node.block {
                Block::Input => images.clone(),
                Block::Cbs(cb) => cb.forward(&ins[0], mode),
                Block::Elan(e) => e.forward(&ins[0], mode),
                Block::Mp(m) => m.forward(&ins[0], mode),
                Block::Up(u) => u.forward(&ins[0], mode),
                Block::Spp(sp) => sp.forward(&ins[0], mode),
                Block::Rep(r) => r.forward(&ins[0], mode),
                Block::Gam(g) => g.forward(&ins[0], mode),
                Block::Cbam(c) => c.forward(&ins[0], mode),
                Block::Swcsp(sw) => sw.forward(&ins[0], mode),
                Block::Predict(p) => p.forward(&ins[0]),
                Block::Concat => concat(&ins, 1),
            };
            outputs[i] = Some(out);
        }
        let heads = [
            outputs[self.head_pred[0]].clone().unwrap(),
            outputs[self.head_pred[1]].clone().unwrap(),
            outputs[self.head_pred[2]].clone().unwrap(),
        ];
        let feature = outputs[feature_idx].clone().unwrap();
        Ok((heads, feature))
    }

    /// Fuse every RepConv for inference.
    pub fn fuse_repconvs(&self) {
        for node in &self.nodes {
            if let Block::Rep(r) = &node.block {
                r.fuse();
            }
        }
    }

    /// Make every attention gate the identity (test hook).
    pub fn make_attention_passthrough(&self) {
        for node in &self.nodes {
            match &node.block {
                Block::Gam(g) => g.make_passthrough(),
                Block::Cbam(c) => c.make_passthrough(),
                _ => {}
            }
        }
    }

    /// Per-layer table with shapes, parameter counts and FLOPs.
    pub fn graph_dump(&self) -> Vec<LayerInfo> {
        self.nodes
            .iter()
            .enumerate()
            .map(|(i, node)| {
                let (c, h, w) = node.out_shape;
                let (ih, iw) = node
                    .inputs
                    .first()
                    .map(|&j| (self.nodes[j].out_shape.1, self.nodes[j].out_shape.2))
                    .unwrap_or((0, 0));
                let flops = match &node.block {
                    Block::Input | Block::Concat => 0,
                    Block::Cbs(cb) => cb.flops(ih, iw),
                    Block::Elan(e) => e.flops(ih, iw),
                    Block::Mp(m) => m.flops(ih, iw),
                    Block::Up(u) => u.flops(ih, iw),
                    Block::Spp(s) => s.flops(ih, iw),
                    Block::Rep(r) => r.flops(ih, iw),
                    Block::Gam(g) => g.flops(ih, iw),
                    Block::Cbam(c) => c.flops(ih, iw),
                    Block::Swcsp(sw) => sw.flops(ih, iw),
                    Block::Predict(p) => p.flops(ih, iw),
                };
                LayerInfo {
                    index: i,
                    name: node.name.clone(),
                    kind: node.block.kind().to_string(),
                    from: node.inputs.clone(),
                    out_channels: c,
                    out_height: h,
                    out_width: w,
                    params: self.store.param_count_with_prefix(&node.name),
                    flops,
                }
            })
            .collect()
    }

    /// Total MACs*2 estimate for one image at the configured input size.
    pub fn flops_estimate(&self) -> u64 {
        self.graph_dump().iter().map(|l| l.flops).sum()
    }

    pub fn strides(&self) -> [usize; 3] {
        self.config.anchors.strides
    }
}

fn push_attention<T: Scalar>(
    b: &mut GraphBuilder<T>,
    scope: &Scope<T>,
    name: &str,
    cfg: &ModelConfig,
    channels: usize,
    input: usize,
) -> usize {
    match cfg.placement.attention_kind.expect("validated") {
        AttentionKind::Gam => b.push(
            name,
            Block::Gam(Gam::new(scope, channels, cfg.attention_reduction)),
            vec![input],
        ),
        AttentionKind::Cbam => b.push(
            name,
            Block::Cbam(Cbam::new(scope, channels, cfg.attention_reduction)),
            vec![input],
        ),
    }
}

// ---------------------------------------------------------------------------
// Decoding
// ---------------------------------------------------------------------------

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Decode one head's raw map into corner boxes (pixels at input scale).
/// Per cell and anchor: center `(2*sig(tx) - 0.5 + cell) * stride`, size
/// `(2*sig(tw))^2 * anchor`, confidence `sig(obj) * max_c sig(cls_c)`.
pub fn decode_head<T: Scalar>(
    raw: &ArrayD<T>,
    anchors: &AnchorSet,
    head: usize,
    num_categories: usize,
    conf_threshold: f64,
) -> Vec<Vec<CornerBox>> {
    let raw4 = raw.view().into_dimensionality::<Ix4>().expect("raw 4-D");
    let (bsize, chans, h, w) = raw4.dim();
    let k = 5 + num_categories;
    assert_eq!(chans, 3 * k, "head raw map has {chans} channels, want {}", 3 * k);
    let stride = anchors.strides[head] as f64;
    let mut out = Vec::with_capacity(bsize);
    for b in 0..bsize {
        let mut boxes = Vec::new();
        for a in 0..3 {
            let (aw, ah) = anchors.anchors[head][a];
            for cy in 0..h {
                for cx in 0..w {
                    let at = |i: usize| raw4[[b, a * k + i, cy, cx]].as_f64();
                    let obj = sigmoid(at(4));
                    if obj < conf_threshold {
                        continue; // conf = obj * cls <= obj
                    }
                    let (mut best_c, mut best_p) = (0usize, f64::MIN);
                    for c in 0..num_categories {
                        let p = sigmoid(at(5 + c));
                        if p > best_p {
                            best_p = p;
                            best_c = c;
                        }
                    }
                    let conf = obj * best_p;
                    if conf < conf_threshold {
                        continue;
                    }
                    let px = (2.0 * sigmoid(at(0)) - 0.5 + cx as f64) * stride;
                    let py = (2.0 * sigmoid(at(1)) - 0.5 + cy as f64) * stride;
                    let pw = (2.0 * sigmoid(at(2))).powi(2) * aw;
                    let ph = (2.0 * sigmoid(at(3))).powi(2) * ah;
                    boxes.push(
                        CornerBox::new(px - pw / 2.0, py - ph / 2.0, px + pw / 2.0, py + ph / 2.0)
                            .with_score(best_c, conf),
                    );
                }
            }
        }
        out.push(boxes);
    }
    out
}

/// Decode all three heads and merge per image.
pub fn decode_all<T: Scalar>(
    raws: &[ArrayD<T>; 3],
    anchors: &AnchorSet,
    num_categories: usize,
    conf_threshold: f64,
) -> Vec<Vec<CornerBox>> {
    let mut merged: Vec<Vec<CornerBox>> = Vec::new();
    for (head, raw) in raws.iter().enumerate() {
        let per_head = decode_head(raw, anchors, head, num_categories, conf_threshold);
        if merged.is_empty() {
            merged = per_head;
        } else {
            for (m, h) in merged.iter_mut().zip(per_head) {
                m.extend(h);
            }
        }
    }
    merged
}

/// Inverse of `decode_head` for a box matched to (head, cell, anchor); the
/// test-side encode used by round-trip checks. Returns (tx, ty, tw, th).
pub fn encode_box(
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    anchors: &AnchorSet,
    head: usize,
    cell_y: usize,
    cell_x: usize,
) -> [f64; 4] {
    let stride = anchors.strides[head] as f64;
    let (aw, ah) = anchors.anchors[head][0];
    encode_box_anchor(cx, cy, w, h, stride, aw, ah, cell_y, cell_x)
}

#[allow(clippy::too_many_arguments)]
pub fn encode_box_anchor(
    cx: f64,
    cy: f64,
    w: f64,
    h: f64,
    stride: f64,
    anchor_w: f64,
    anchor_h: f64,
    cell_y: usize,
    cell_x: usize,
) -> [f64; 4] {
    let tx = logit(((cx / stride - cell_x as f64) + 0.5) / 2.0);
    let ty = logit(((cy / stride - cell_y as f64) + 0.5) / 2.0);
    let tw = logit((w / anchor_w).sqrt() / 2.0);
    let th = logit((h / anchor_h).sqrt() / 2.0);
    [tx, ty, tw, th]
}

// ---------------------------------------------------------------------------
// Checkpointing
// ---------------------------------------------------------------------------

const CKPT_MAGIC: &[u8; 8] = b"DLOCKPT\x01";

#[derive(Serialize, Deserialize)]
struct CheckpointHeader {
    version: u32,
    config_fingerprint: String,
    epoch: usize,
    params: Vec<(String, Vec<usize>)>,
    buffers: Vec<(String, Vec<usize>)>,
    optimizer: Vec<(String, Vec<usize>)>,
}

/// Serialize model weights, BN buffers and (optionally) optimizer momentum.
pub fn save_checkpoint<T: Scalar>(
    path: &Path,
    detector: &Detector<T>,
    epoch: usize,
    optimizer_state: Option<&[(String, ArrayD<T>)]>,
) -> Result<()> {
    use byteorder::{LittleEndian, WriteBytesExt};
    let entries = detector.store.entries();
    let buffers = detector.store.buffers();
    let header = CheckpointHeader {
        version: 1,
        config_fingerprint: detector.config.fingerprint(),
        epoch,
        params: entries
            .iter()
            .map(|e| (e.name.clone(), e.tensor.shape()))
            .collect(),
        buffers: buffers
            .iter()
            .map(|(n, b)| (n.clone(), b.borrow().shape().to_vec()))
            .collect(),
        optimizer: optimizer_state
            .map(|st| st.iter().map(|(n, a)| (n.clone(), a.shape().to_vec())).collect())
            .unwrap_or_default(),
    };
    let header_json = serde_json::to_vec(&header).expect("header serializes");
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir)?;
    }
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    f.write_all(CKPT_MAGIC)?;
    f.write_u64::<LittleEndian>(header_json.len() as u64)?;
    f.write_all(&header_json)?;
    let mut write_arr = |a: &ArrayD<T>| -> Result<()> {
        for v in a.iter() {
            f.write_f32::<LittleEndian>(v.as_f64() as f32)?;
        }
        Ok(())
    };
    for e in &entries {
        write_arr(&e.tensor.value())?;
    }
    for (_, buf) in &buffers {
        write_arr(&buf.borrow())?;
    }
    if let Some(st) = optimizer_state {
        for (_, a) in st {
            write_arr(a)?;
        }
    }
    Ok(())
}

/// Restore weights saved by [`save_checkpoint`] into a freshly built
/// detector. Returns the epoch and any optimizer state.
pub fn load_checkpoint<T: Scalar>(
    path: &Path,
    detector: &Detector<T>,
) -> Result<(usize, Vec<(String, ArrayD<T>)>)> {
    use byteorder::{LittleEndian, ReadBytesExt};
    let mut f = std::io::BufReader::new(
        std::fs::File::open(path)
            .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))?,
    );
    let mut magic = [0u8; 8];
    f.read_exact(&mut magic)?;
    if &magic != CKPT_MAGIC {
        return Err(Error::Checkpoint("bad magic; not a checkpoint file".into()));
    }
    let hlen = f.read_u64::<LittleEndian>()? as usize;
    let mut hbuf = vec![0u8; hlen];
    f.read_exact(&mut hbuf)?;
    let header: CheckpointHeader =
        serde_json::from_slice(&hbuf).map_err(|e| Error::Checkpoint(e.to_string()))?;
    if header.config_fingerprint != detector.config.fingerprint() {
        return Err(Error::Checkpoint(format!(
            "config fingerprint mismatch: checkpoint {} vs model {}",
            header.config_fingerprint,
            detector.config.fingerprint()
        )));
    }
    let mut read_arr = |shape: &[usize]| -> Result<ArrayD<T>> {
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(T::cast(f.read_f32::<LittleEndian>()? as f64));
        }
        Ok(ArrayD::from_shape_vec(IxDyn(shape), data).expect("shape"))
    };
    for (name, shape) in &header.params {
        let arr = read_arr(shape)?;
        let t = detector
            .store
            .get(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {name}")))?;
        t.set_data(arr);
    }
    for (name, shape) in &header.buffers {
        let arr = read_arr(shape)?;
        let b = detector
            .store
            .get_buffer(name)
            .ok_or_else(|| Error::Checkpoint(format!("unknown buffer {name}")))?;
        *b.borrow_mut() = arr;
    }
    let mut opt = Vec::new();
    for (name, shape) in &header.optimizer {
        opt.push((name.clone(), read_arr(shape)?));
    }
    Ok((header.epoch, opt))
}


#[cfg(test)]
mod scale_tests {
    use super::*;

    #[test]
    #[ignore = "slow full-scale structural check, exercised by the acceptance suite"]
    fn full_deeploc_parameter_and_flop_scale() {
        let cfg = ModelConfig::deeploc();
        let det = Detector::<f32>::build(&cfg, 0).unwrap();
        let params = det.param_count();
        let gflops = det.flops_estimate() as f64 / 1e9;
        println!("params = {params} ({:.2}M), flops = {gflops:.1} GF, nodes = {}", params as f64 / 1e6, det.num_nodes());
        let plain = Detector::<f32>::build(&ModelConfig::full(PlacementConfig::none()), 0).unwrap();
        println!("plain yolov7 params = {:.2}M, flops = {:.1} GF", plain.param_count() as f64 / 1e6, plain.flops_estimate() as f64 / 1e9);
    }
}
