//! Network graphs for the DeepID2+ baseline and the two DeepID3 variants.
//!
//! Every graph is a single chain of layers with supervision heads branching
//! off it. Filter counts are configurable through [`ScaleConfig`]; the
//! topology (layer kinds, pairing, head placement) is fixed per architecture.

use std::collections::BTreeMap;
use std::fmt;

use crate::error::{Error, Result};
use crate::layers::{
    conv2d_backward, conv2d_forward, dropout, dropout_backward, fully_connected,
    fully_connected_backward, inception_backward, inception_forward_cached,
    locally_connected_backward, locally_connected_forward, maxpool2d, maxpool2d_backward, relu,
    relu_backward, ConvParams, ConvSpec, InceptionBranch, InceptionCache, InceptionParams,
    InceptionSpec, LocalSpec, Mode,
};
use crate::params::{accumulate, param, ParamStore};
use crate::supervision::{head_loss, Projection, SupervisionHead, DEFAULT_LAMBDA};
use crate::tensor::{init_he, Rng};
use crate::Tensor;

const POOL_WINDOW: usize = 2;
const POOL_STRIDE: usize = 2;
const KERNEL: usize = 3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Architecture {
    DeepId2Plus,
    DeepId3Net1,
    DeepId3Net2,
}

impl Architecture {
    pub fn name(self) -> &'static str {
        match self {
            Architecture::DeepId2Plus => "deepid2plus",
            Architecture::DeepId3Net1 => "net1",
            Architecture::DeepId3Net2 => "net2",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        match name {
            "deepid2plus" => Some(Architecture::DeepId2Plus),
            "net1" => Some(Architecture::DeepId3Net1),
            "net2" => Some(Architecture::DeepId3Net2),
            _ => None,
        }
    }

    pub fn build(self, cfg: &ScaleConfig, rng: &mut Rng) -> Result<NetworkGraph> {
        match self {
            Architecture::DeepId2Plus => build_deepid2plus(cfg, rng),
            Architecture::DeepId3Net1 => build_deepid3_net1(cfg, rng),
            Architecture::DeepId3Net2 => build_deepid3_net2(cfg, rng),
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Toy-scale dimensions shared by all three architectures.
#[derive(Clone, Debug, PartialEq)]
pub struct ScaleConfig {
    pub input_h: usize,
    pub input_w: usize,
    pub input_channels: usize,
    /// Channel width of each of the four feature stages.
    pub widths: [usize; 4],
    /// Dimension of the final feature vector.
    pub feature_dim: usize,
    /// Dimension of the projections feeding the intermediate heads.
    pub head_dim: usize,
    pub num_identities: usize,
    pub dropout_rate: f64,
    pub lambda: f64,
    /// Initial verification margin; usually recalibrated before training.
    pub margin: f64,
}

impl Default for ScaleConfig {
    fn default() -> Self {
        Self {
            input_h: 32,
            input_w: 32,
            input_channels: 1,
            widths: [8, 16, 24, 32],
            feature_dim: 64,
            head_dim: 64,
            num_identities: 10,
            dropout_rate: 0.2,
            lambda: DEFAULT_LAMBDA,
            margin: 1.0,
        }
    }
}

impl ScaleConfig {
    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("input_h", self.input_h),
            ("input_w", self.input_w),
            ("input_channels", self.input_channels),
            ("feature_dim", self.feature_dim),
            ("head_dim", self.head_dim),
        ];
        for (name, v) in dims {
            if v == 0 {
                return Err(Error::Geometry(format!("{name} must be positive")));
            }
        }
        if self.widths.contains(&0) {
            return Err(Error::Geometry(format!("stage widths {:?} must be positive", self.widths)));
        }
        if self.num_identities < 2 {
            return Err(Error::Geometry("at least 2 identities are needed".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::Geometry(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if !(self.lambda >= 0.0) || !(self.margin > 0.0) {
            return Err(Error::Geometry("lambda must be >= 0 and margin > 0".into()));
        }
        Ok(())
    }

    pub fn input_shape(&self) -> [usize; 3] {
        [self.input_channels, self.input_h, self.input_w]
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum LayerKind {
    Conv(ConvSpec),
    Local(LocalSpec),
    MaxPool { window: usize, stride: usize },
    Inception(InceptionSpec),
    FullyConnected { in_dim: usize, out_dim: usize },
}

impl LayerKind {
    pub fn tag(&self) -> &'static str {
        match self {
            LayerKind::Conv(_) => "conv",
            LayerKind::Local(_) => "local",
            LayerKind::MaxPool { .. } => "pool",
            LayerKind::Inception(_) => "inception",
            LayerKind::FullyConnected { .. } => "fc",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerNode {
    pub name: String,
    pub kind: LayerKind,
    pub relu: bool,
    pub dropout: Option<f64>,
    pub output_shape: Vec<usize>,
}

impl LayerNode {
    pub fn is_weight_bearing(&self) -> bool {
        !matches!(self.kind, LayerKind::MaxPool { .. })
    }

    pub fn param_names(&self) -> Vec<String> {
        match &self.kind {
            LayerKind::MaxPool { .. } => Vec::new(),
            LayerKind::Inception(_) => InceptionBranch::ALL
                .iter()
                .flat_map(|b| {
                    [
                        format!("{}.{}.weight", self.name, b.name()),
                        format!("{}.{}.bias", self.name, b.name()),
                    ]
                })
                .collect(),
            _ => vec![format!("{}.weight", self.name), format!("{}.bias", self.name)],
        }
    }
}

/// A chain of layers, its parameters, and the heads supervising it.
#[derive(Clone, Debug)]
pub struct NetworkGraph {
    pub architecture: Architecture,
    pub config: ScaleConfig,
    pub nodes: Vec<LayerNode>,
    pub params: ParamStore,
    pub heads: Vec<SupervisionHead>,
    pub final_feature_layer: String,
}

impl NetworkGraph {
    pub fn node_index(&self, name: &str) -> Result<usize> {
        self.nodes
            .iter()
            .position(|n| n.name == name)
            .ok_or_else(|| Error::shape(format!("no layer named `{name}`")))
    }

    pub fn final_index(&self) -> usize {
        self.node_index(&self.final_feature_layer)
            .expect("final feature layer exists by construction")
    }

    pub fn feature_dim(&self) -> usize {
        self.nodes[self.final_index()].output_shape.iter().product()
    }

    /// Weight-bearing layers of the feature chain (heads excluded).
    pub fn weight_bearing_layers(&self) -> usize {
        self.nodes.iter().filter(|n| n.is_weight_bearing()).count()
    }

    pub fn kind_sequence(&self) -> Vec<&'static str> {
        self.nodes.iter().map(|n| n.kind.tag()).collect()
    }

    /// Number of layers of each kind between consecutive pools, as
    /// `(kinds, ended_by_pool)` per stage.
    pub fn stages(&self) -> Vec<(Vec<&'static str>, bool)> {
        let mut stages = Vec::new();
        let mut current = Vec::new();
        for node in &self.nodes {
            if matches!(node.kind, LayerKind::MaxPool { .. }) {
                stages.push((std::mem::take(&mut current), true));
            } else {
                current.push(node.kind.tag());
            }
        }
        if !current.is_empty() {
            stages.push((current, false));
        }
        stages
    }

    pub fn feature_param_names(&self) -> Vec<String> {
        self.nodes.iter().flat_map(LayerNode::param_names).collect()
    }

    /// Checks parameter presence and shapes plus head attach points.
    pub fn validate(&self) -> Result<()> {
        for node in &self.nodes {
            for (name, shape) in expected_param_shapes(node) {
                let t = param(&self.params, &name)?;
                if t.shape() != shape.as_slice() {
                    return Err(Error::shape(format!(
                        "parameter `{name}` has shape {:?}, layer expects {shape:?}",
                        t.shape()
                    )));
                }
            }
        }
        for head in &self.heads {
            self.node_index(&head.attach_point)?;
            for name in head.param_names() {
                param(&self.params, &name)?;
            }
        }
        self.node_index(&self.final_feature_layer)?;
        Ok(())
    }

    /// Sets the verification margin of every head, in head order.
    pub fn set_margins(&mut self, margins: &[f64]) -> Result<()> {
        if margins.len() != self.heads.len() {
            return Err(Error::shape(format!(
                "{} margins for {} heads",
                margins.len(),
                self.heads.len()
            )));
        }
        for (h, &m) in self.heads.iter_mut().zip(margins) {
            if !(m > 0.0) {
                return Err(Error::Dimension(format!("margin for `{}` must be positive", h.name)));
            }
            h.margin = m;
        }
        Ok(())
    }
}

fn expected_param_shapes(node: &LayerNode) -> Vec<(String, Vec<usize>)> {
    let w = format!("{}.weight", node.name);
    let b = format!("{}.bias", node.name);
    match &node.kind {
        LayerKind::Conv(c) => vec![(w, c.weight_shape().to_vec()), (b, vec![c.out_channels])],
        LayerKind::Local(l) => vec![(w, l.weight_shape().to_vec()), (b, l.bias_shape().to_vec())],
        LayerKind::FullyConnected { in_dim, out_dim } => vec![(w, vec![*out_dim, *in_dim]), (b, vec![*out_dim])],
        LayerKind::MaxPool { .. } => Vec::new(),
        LayerKind::Inception(spec) => InceptionBranch::ALL
            .iter()
            .flat_map(|&br| {
                let c = spec.conv(br);
                [
                    (format!("{}.{}.weight", node.name, br.name()), c.weight_shape().to_vec()),
                    (format!("{}.{}.bias", node.name, br.name()), vec![c.out_channels]),
                ]
            })
            .collect(),
    }
}

/// Split of a stage width into inception branch channels summing to it.
pub fn inception_for_width(in_channels: usize, width: usize) -> Result<InceptionSpec> {
    if width < 4 {
        return Err(Error::Geometry(format!("inception width {width} must be at least 4")));
    }
    let b1 = (width / 4).max(1);
    let b5 = (width / 8).max(1);
    let pool_proj = (width / 4).max(1);
    let b3 = width - b1 - b5 - pool_proj;
    Ok(InceptionSpec {
        in_channels,
        b1,
        b3_reduce: (b3 / 2).max(1),
        b3,
        b5_reduce: (b5 / 2).max(1),
        b5,
        pool_proj,
    })
}

struct Builder<'a> {
    cfg: &'a ScaleConfig,
    rng: &'a mut Rng,
    shape: Vec<usize>,
    nodes: Vec<LayerNode>,
    params: ParamStore,
    heads: Vec<SupervisionHead>,
}

impl<'a> Builder<'a> {
    fn new(cfg: &'a ScaleConfig, rng: &'a mut Rng) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            rng,
            shape: cfg.input_shape().to_vec(),
            nodes: Vec::new(),
            params: ParamStore::new(),
            heads: Vec::new(),
        })
    }

    fn chw(&self) -> (usize, usize, usize) {
        (self.shape[0], self.shape[1], self.shape[2])
    }

    fn push(&mut self, name: &str, kind: LayerKind, output_shape: Vec<usize>) {
        self.shape = output_shape.clone();
        self.nodes.push(LayerNode {
            name: name.to_owned(),
            kind,
            relu: true,
            dropout: None,
            output_shape,
        });
    }

    fn conv(&mut self, name: &str, out: usize) -> Result<()> {
        let (c, h, w) = self.chw();
        let spec = ConvSpec::same(c, out, KERNEL);
        let (oh, ow) = spec
            .output_extent(h, w)
            .map_err(|e| Error::Geometry(format!("stage `{name}`: {e}")))?;
        self.params.insert(format!("{name}.weight"), init_he(&spec.weight_shape(), spec.fan_in(), self.rng)?);
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[out])?);
        self.push(name, LayerKind::Conv(spec), vec![out, oh, ow]);
        Ok(())
    }

    fn local(&mut self, name: &str, out: usize) -> Result<()> {
        let (c, h, w) = self.chw();
        let spec = LocalSpec::new(ConvSpec::same(c, out, KERNEL), h, w)
            .map_err(|e| Error::Geometry(format!("stage `{name}`: {e}")))?;
        self.params.insert(
            format!("{name}.weight"),
            init_he(&spec.weight_shape(), spec.geometry.fan_in(), self.rng)?,
        );
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&spec.bias_shape())?);
        let (oh, ow) = spec.output_extent();
        self.push(name, LayerKind::Local(spec), vec![out, oh, ow]);
        Ok(())
    }

    fn inception(&mut self, name: &str, width: usize) -> Result<()> {
        let (c, h, w) = self.chw();
        let spec = inception_for_width(c, width).map_err(|e| Error::Geometry(format!("stage `{name}`: {e}")))?;
        for b in InceptionBranch::ALL {
            let conv = spec.conv(b);
            conv.output_extent(h, w)
                .map_err(|e| Error::Geometry(format!("stage `{name}` branch `{}`: {e}", b.name())))?;
            self.params.insert(
                format!("{name}.{}.weight", b.name()),
                init_he(&conv.weight_shape(), conv.fan_in(), self.rng)?,
            );
            self.params.insert(format!("{name}.{}.bias", b.name()), Tensor::zeros(&[conv.out_channels])?);
        }
        self.push(name, LayerKind::Inception(spec), vec![spec.out_channels(), h, w]);
        Ok(())
    }

    fn pool(&mut self, name: &str) -> Result<()> {
        let (c, h, w) = self.chw();
        if h < POOL_WINDOW || w < POOL_WINDOW {
            return Err(Error::Geometry(format!(
                "stage `{name}`: {h}x{w} input is too small to pool"
            )));
        }
        let out = vec![c, (h - POOL_WINDOW) / POOL_STRIDE + 1, (w - POOL_WINDOW) / POOL_STRIDE + 1];
        self.push(name, LayerKind::MaxPool { window: POOL_WINDOW, stride: POOL_STRIDE }, out);
        self.nodes.last_mut().unwrap().relu = false;
        Ok(())
    }

    fn fc(&mut self, name: &str, out: usize) -> Result<()> {
        let in_dim: usize = self.shape.iter().product();
        self.params.insert(format!("{name}.weight"), init_he(&[out, in_dim], in_dim, self.rng)?);
        self.params.insert(format!("{name}.bias"), Tensor::zeros(&[out])?);
        self.push(name, LayerKind::FullyConnected { in_dim, out_dim: out }, vec![out]);
        Ok(())
    }

    /// Head on a small projection of the current (pooled) activation.
    fn projected_head(&mut self, attach: &str) -> Result<()> {
        let in_dim: usize = self.shape.iter().product();
        let head = SupervisionHead {
            name: format!("head_{attach}"),
            attach_point: attach.to_owned(),
            projection: Some(Projection { in_dim, out_dim: self.cfg.head_dim }),
            feature_dim: self.cfg.head_dim,
            num_identities: self.cfg.num_identities,
            margin: self.cfg.margin,
            lambda: self.cfg.lambda,
        };
        self.params.extend(head.init_params(self.rng)?);
        self.heads.push(head);
        Ok(())
    }

    /// Marks the current layer as the feature layer and supervises it directly.
    fn finish(mut self, architecture: Architecture) -> Result<NetworkGraph> {
        let dim: usize = self.shape.iter().product();
        if dim != self.cfg.feature_dim {
            return Err(Error::Geometry(format!(
                "final layer yields {dim} features, config declares {}",
                self.cfg.feature_dim
            )));
        }
        let last = self.nodes.last_mut().expect("non-empty graph");
        if self.cfg.dropout_rate > 0.0 {
            last.dropout = Some(self.cfg.dropout_rate);
        }
        let final_name = last.name.clone();
        let head = SupervisionHead {
            name: "head_final".into(),
            attach_point: final_name.clone(),
            projection: None,
            feature_dim: dim,
            num_identities: self.cfg.num_identities,
            margin: self.cfg.margin,
            lambda: self.cfg.lambda,
        };
        self.params.extend(head.init_params(self.rng)?);
        self.heads.push(head);
        let graph = NetworkGraph {
            architecture,
            config: self.cfg.clone(),
            nodes: self.nodes,
            params: self.params,
            heads: self.heads,
            final_feature_layer: final_name,
        };
        graph.validate()?;
        Ok(graph)
    }
}

/// DeepID2+ baseline: conv-pool, conv-pool, locally-shared conv-pool,
/// locally-connected, fully-connected feature layer.
pub fn build_deepid2plus(cfg: &ScaleConfig, rng: &mut Rng) -> Result<NetworkGraph> {
    let [w1, w2, w3, w4] = cfg.widths;
    let mut b = Builder::new(cfg, rng)?;
    b.conv("conv1", w1)?;
    b.pool("pool1")?;
    b.projected_head("pool1")?;
    b.conv("conv2", w2)?;
    b.pool("pool2")?;
    b.projected_head("pool2")?;
    // weights shared only within local regions; modeled as fully unshared
    b.local("local3", w3)?;
    b.pool("pool3")?;
    b.projected_head("pool3")?;
    b.local("local4", w4)?;
    b.fc("fc", cfg.feature_dim)?;
    b.finish(Architecture::DeepId2Plus)
}

/// DeepID3 net1: stacked pairs of 3x3 convolutions before each pool, the top
/// pair replaced by locally-connected layers; the last of those is the
/// feature layer, with no fully-connected layer on top.
pub fn build_deepid3_net1(cfg: &ScaleConfig, rng: &mut Rng) -> Result<NetworkGraph> {
    let [w1, w2, w3, w4] = cfg.widths;
    let mut b = Builder::new(cfg, rng)?;
    for (stage, width) in [(1, w1), (2, w2), (3, w3)] {
        b.conv(&format!("conv{stage}a"), width)?;
        b.conv(&format!("conv{stage}b"), width)?;
        let pool = format!("pool{stage}");
        b.pool(&pool)?;
        b.projected_head(&pool)?;
    }
    b.local("local4a", w4)?;
    let (_, h, w) = b.chw();
    let cells = h * w;
    if cfg.feature_dim % cells != 0 {
        return Err(Error::Geometry(format!(
            "stage `local4b`: feature_dim {} is not a multiple of the {h}x{w} locally-connected grid",
            cfg.feature_dim
        )));
    }
    b.local("local4b", cfg.feature_dim / cells)?;
    b.finish(Architecture::DeepId3Net1)
}

/// DeepID3 net2: two conv pairs with pools, then three inception layers
/// before the third pool and two before the fourth, then a fully-connected
/// feature layer.
pub fn build_deepid3_net2(cfg: &ScaleConfig, rng: &mut Rng) -> Result<NetworkGraph> {
    let [w1, w2, w3, w4] = cfg.widths;
    let mut b = Builder::new(cfg, rng)?;
    for (stage, width) in [(1, w1), (2, w2)] {
        b.conv(&format!("conv{stage}a"), width)?;
        b.conv(&format!("conv{stage}b"), width)?;
        let pool = format!("pool{stage}");
        b.pool(&pool)?;
        b.projected_head(&pool)?;
    }
    for name in ["inception3a", "inception3b", "inception3c"] {
        b.inception(name, w3)?;
    }
    b.pool("pool3")?;
    b.projected_head("pool3")?;
    for name in ["inception4a", "inception4b"] {
        b.inception(name, w4)?;
    }
    b.pool("pool4")?;
    b.fc("fc", cfg.feature_dim)?;
    b.finish(Architecture::DeepId3Net2)
}

#[derive(Clone, Debug, Default)]
struct NodeCache {
    pool_argmax: Option<Vec<usize>>,
    inception: Option<Box<InceptionCache>>,
    dropout_mask: Option<Vec<f64>>,
    pre_dropout: Option<Tensor>,
}

/// Activations of one forward pass, kept for the backward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace {
    pub input: Tensor,
    pub outputs: Vec<Tensor>,
    caches: Vec<NodeCache>,
}

fn conv_params<'a>(params: &'a ParamStore, layer: &str) -> Result<ConvParams<'a>> {
    Ok(ConvParams {
        weights: param(params, &format!("{layer}.weight"))?,
        bias: param(params, &format!("{layer}.bias"))?,
    })
}

fn inception_params<'a>(params: &'a ParamStore, layer: &str) -> Result<InceptionParams<'a>> {
    let get = |b: InceptionBranch| conv_params(params, &format!("{layer}.{}", b.name()));
    Ok(InceptionParams {
        convs: [
            get(InceptionBranch::B1)?,
            get(InceptionBranch::B3Reduce)?,
            get(InceptionBranch::B3)?,
            get(InceptionBranch::B5Reduce)?,
            get(InceptionBranch::B5)?,
            get(InceptionBranch::PoolProj)?,
        ],
    })
}

/// Runs the chain up to and including node `last`.
pub fn forward_until(net: &NetworkGraph, image: &Tensor, last: usize, mode: Mode, rng: &mut Rng) -> Result<ForwardTrace> {
    image
        .expect_shape(&net.config.input_shape())
        .map_err(|e| Error::Geometry(format!("image does not fit network input: {e}")))?;
    let mut outputs: Vec<Tensor> = Vec::with_capacity(last + 1);
    let mut caches = Vec::with_capacity(last + 1);
    for node in &net.nodes[..=last] {
        let x = outputs.last().unwrap_or(image);
        let mut cache = NodeCache::default();
        let mut y = match &node.kind {
            LayerKind::Conv(spec) => {
                let p = conv_params(&net.params, &node.name)?;
                conv2d_forward(x, spec, p.weights, p.bias)?
            }
            LayerKind::Local(spec) => {
                let p = conv_params(&net.params, &node.name)?;
                locally_connected_forward(x, spec, p.weights, p.bias)?
            }
            LayerKind::MaxPool { window, stride } => {
                let p = maxpool2d(x, *window, *stride)?;
                cache.pool_argmax = Some(p.argmax);
                p.output
            }
            LayerKind::Inception(spec) => {
                // branches apply their own ReLUs
                let p = inception_params(&net.params, &node.name)?;
                let (y, c) = inception_forward_cached(x, spec, &p)?;
                cache.inception = Some(Box::new(c));
                y
            }
            LayerKind::FullyConnected { .. } => {
                let p = conv_params(&net.params, &node.name)?;
                fully_connected(x, p.weights, p.bias)?
            }
        };
        if node.relu && !matches!(node.kind, LayerKind::Inception(_)) {
            y = relu(&y);
        }
        if let Some(rate) = node.dropout {
            let d = dropout(&y, rate, rng, mode)?;
            if d.mask.is_some() {
                cache.pre_dropout = Some(y);
            }
            cache.dropout_mask = d.mask;
            y = d.output;
        }
        outputs.push(y);
        caches.push(cache);
    }
    Ok(ForwardTrace {
        input: image.clone(),
        outputs,
        caches,
    })
}

pub fn forward(net: &NetworkGraph, image: &Tensor, mode: Mode, rng: &mut Rng) -> Result<ForwardTrace> {
    forward_until(net, image, net.nodes.len() - 1, mode, rng)
}

/// Backpropagates activation gradients injected at the given node outputs.
/// Returns parameter gradients and the gradient with respect to the image.
pub fn backward(net: &NetworkGraph, trace: &ForwardTrace, injected: &BTreeMap<usize, Tensor>) -> Result<(ParamStore, Tensor)> {
    let mut grads = ParamStore::new();
    let Some(&deepest) = injected.keys().next_back() else {
        return Ok((grads, trace.input.zeros_like()));
    };
    if deepest >= trace.outputs.len() {
        return Err(Error::Index { index: deepest, len: trace.outputs.len() });
    }
    let mut carry: Option<Tensor> = None;
    for i in (0..=deepest).rev() {
        let node = &net.nodes[i];
        let mut g = match (carry.take(), injected.get(&i)) {
            (Some(mut c), Some(extra)) => {
                c.add_scaled(extra, 1.0)?;
                c
            }
            (Some(c), None) => c,
            (None, Some(extra)) => extra.clone(),
            (None, None) => continue,
        };
        g = g.reshape(&node.output_shape)?;
        let cache = &trace.caches[i];
        let out = &trace.outputs[i];
        if node.dropout.is_some() {
            g = dropout_backward(cache.dropout_mask.as_deref(), &g)?;
        }
        if node.relu && !matches!(node.kind, LayerKind::Inception(_)) {
            g = relu_backward(cache.pre_dropout.as_ref().unwrap_or(out), &g)?;
        }
        let x = if i == 0 { &trace.input } else { &trace.outputs[i - 1] };
        let g_in = match &node.kind {
            LayerKind::Conv(spec) => {
                let p = conv_params(&net.params, &node.name)?;
                let cg = conv2d_backward(x, spec, p.weights, &g)?;
                accumulate(&mut grads, &format!("{}.weight", node.name), cg.weights)?;
                accumulate(&mut grads, &format!("{}.bias", node.name), cg.bias)?;
                cg.input
            }
            LayerKind::Local(spec) => {
                let p = conv_params(&net.params, &node.name)?;
                let lg = locally_connected_backward(x, spec, p.weights, &g)?;
                accumulate(&mut grads, &format!("{}.weight", node.name), lg.weights)?;
                accumulate(&mut grads, &format!("{}.bias", node.name), lg.bias)?;
                lg.input
            }
            LayerKind::MaxPool { .. } => {
                let argmax = cache.pool_argmax.as_ref().expect("pool cache");
                maxpool2d_backward(x.shape(), argmax, &g)?
            }
            LayerKind::Inception(spec) => {
                let p = inception_params(&net.params, &node.name)?;
                let ig = inception_backward(cache.inception.as_ref().expect("inception cache"), spec, &p, &g)?;
                for (b, (gw, gb)) in InceptionBranch::ALL.iter().zip(ig.convs) {
                    accumulate(&mut grads, &format!("{}.{}.weight", node.name, b.name()), gw)?;
                    accumulate(&mut grads, &format!("{}.{}.bias", node.name, b.name()), gb)?;
                }
                ig.input
            }
            LayerKind::FullyConnected { .. } => {
                let p = conv_params(&net.params, &node.name)?;
                let fg = fully_connected_backward(x, p.weights, &g)?;
                accumulate(&mut grads, &format!("{}.weight", node.name), fg.weights)?;
                accumulate(&mut grads, &format!("{}.bias", node.name), fg.bias)?;
                fg.input
            }
        };
        carry = Some(g_in);
    }
    let g_image = match carry {
        Some(g) => g.reshape(trace.input.shape())?,
        None => trace.input.zeros_like(),
    };
    Ok((grads, g_image))
}

/// Loss and gradients for one training pair under a set of heads.
#[derive(Clone, Debug)]
pub struct PairGradients {
    pub loss: f64,
    pub head_losses: Vec<f64>,
    pub grads: ParamStore,
}

/// Forward both images, sum the joint loss of every head in `heads`
/// (indices into `net.heads`) and backpropagate it into all parameters.
pub fn pair_gradients(
    net: &NetworkGraph,
    images: [&Tensor; 2],
    ids: [usize; 2],
    heads: &[usize],
    mode: Mode,
    rng: &mut Rng,
) -> Result<PairGradients> {
    let mut attach = Vec::with_capacity(heads.len());
    for &h in heads {
        let head = net.heads.get(h).ok_or(Error::Index { index: h, len: net.heads.len() })?;
        attach.push(net.node_index(&head.attach_point)?);
    }
    let deepest = attach.iter().copied().max().unwrap_or(0);
    let trace_a = forward_until(net, images[0], deepest, mode, rng)?;
    let trace_b = forward_until(net, images[1], deepest, mode, rng)?;

    let mut grads = ParamStore::new();
    let mut inj_a = BTreeMap::new();
    let mut inj_b = BTreeMap::new();
    let mut head_losses = Vec::with_capacity(heads.len());
    for (&h, &idx) in heads.iter().zip(&attach) {
        let out = head_loss(&net.heads[h], &net.params, &trace_a.outputs[idx], &trace_b.outputs[idx], ids[0], ids[1])?;
        head_losses.push(out.loss);
        for (name, g) in out.grads {
            accumulate(&mut grads, &name, g)?;
        }
        add_injection(&mut inj_a, idx, out.grad_act1)?;
        add_injection(&mut inj_b, idx, out.grad_act2)?;
    }
    for (trace, inj) in [(&trace_a, &inj_a), (&trace_b, &inj_b)] {
        let (g, _) = backward(net, trace, inj)?;
        for (name, t) in g {
            accumulate(&mut grads, &name, t)?;
        }
    }
    Ok(PairGradients {
        loss: head_losses.iter().sum(),
        head_losses,
        grads,
    })
}

fn add_injection(map: &mut BTreeMap<usize, Tensor>, idx: usize, g: Tensor) -> Result<()> {
    match map.get_mut(&idx) {
        Some(acc) => acc.add_scaled(&g, 1.0),
        None => {
            map.insert(idx, g);
            Ok(())
        }
    }
}

/// Eval-mode feature vector from the final feature layer.
pub fn extract_feature(net: &NetworkGraph, image: &Tensor) -> Result<Tensor> {
    let idx = net.final_index();
    // eval mode never draws from the generator
    let mut rng = Rng::new(0);
    let trace = forward_until(net, image, idx, Mode::Eval, &mut rng)?;
    Ok(trace.outputs[idx].clone().flatten())
}

/// Eval-mode feature of one head for one image.
pub fn head_feature(net: &NetworkGraph, head: usize, image: &Tensor) -> Result<Tensor> {
    let h = &net.heads[head];
    let idx = net.node_index(&h.attach_point)?;
    let mut rng = Rng::new(0);
    let trace = forward_until(net, image, idx, Mode::Eval, &mut rng)?;
    h.feature(&net.params, &trace.outputs[idx])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::param_count;
    use crate::tensor::{finite_diff_grad, max_relative_error, uniform_tensor, DEFAULT_FD_EPS};

    fn toy_cfg() -> ScaleConfig {
        ScaleConfig {
            input_h: 32,
            input_w: 32,
            widths: [4, 8, 12, 16],
            feature_dim: 64,
            head_dim: 16,
            ..ScaleConfig::default()
        }
    }

    fn tiny_cfg() -> ScaleConfig {
        ScaleConfig {
            input_h: 16,
            input_w: 16,
            widths: [2, 3, 4, 4],
            feature_dim: 8,
            head_dim: 3,
            num_identities: 3,
            dropout_rate: 0.25,
            lambda: 0.5,
            margin: 2.0,
            ..ScaleConfig::default()
        }
    }

    fn zero_params(net: &mut NetworkGraph) {
        for t in net.params.values_mut() {
            *t = t.zeros_like();
        }
    }

    #[test]
    fn deepid2plus_has_five_feature_layers() {
        let net = build_deepid2plus(&toy_cfg(), &mut Rng::new(1)).unwrap();
        assert_eq!(net.weight_bearing_layers(), 5);
        assert_eq!(net.kind_sequence(), ["conv", "pool", "conv", "pool", "local", "pool", "local", "fc"]);
        assert_eq!(net.heads.len(), 4);
        assert_eq!(net.feature_dim(), 64);
    }

    #[test]
    fn deepid2plus_param_count_closed_form() {
        let cfg = toy_cfg();
        let net = build_deepid2plus(&cfg, &mut Rng::new(1)).unwrap();
        let [w1, w2, w3, w4] = cfg.widths;
        let conv = |i: usize, o: usize| o * (i * 9 + 1);
        let local = |i: usize, o: usize, hw: usize| hw * o * (i * 9 + 1);
        let feature = conv(1, w1) + conv(w1, w2) + local(w2, w3, 8 * 8) + local(w3, w4, 4 * 4) + 64 * (w4 * 4 * 4 + 1);
        let k = cfg.num_identities;
        let proj = |d_in: usize| cfg.head_dim * (d_in + 1) + k * (cfg.head_dim + 1);
        let heads = proj(w1 * 16 * 16) + proj(w2 * 8 * 8) + proj(w3 * 4 * 4) + k * (64 + 1);
        assert_eq!(param_count(&net.params), feature + heads);
    }

    #[test]
    fn zero_image_zero_params_gives_zero_feature() {
        for arch in [Architecture::DeepId2Plus, Architecture::DeepId3Net1, Architecture::DeepId3Net2] {
            let mut net = arch.build(&toy_cfg(), &mut Rng::new(2)).unwrap();
            zero_params(&mut net);
            let f = extract_feature(&net, &Tensor::zeros(&[1, 32, 32]).unwrap()).unwrap();
            assert_eq!(f.len(), 64);
            assert_eq!(f.max_abs(), 0.0, "{arch}");
        }
    }

    #[test]
    fn zero_weights_expose_final_bias() {
        let mut net = build_deepid2plus(&toy_cfg(), &mut Rng::new(3)).unwrap();
        zero_params(&mut net);
        let bias: Vec<f64> = (0..64).map(|i| i as f64 / 10.0 - 3.0).collect();
        net.params.insert("fc.bias".into(), Tensor::vector(bias.clone()));
        let img = uniform_tensor(&[1, 32, 32], -1.0, 1.0, &mut Rng::new(4)).unwrap();
        let f = extract_feature(&net, &img).unwrap();
        let expected: Vec<f64> = bias.iter().map(|b| b.max(0.0)).collect();
        assert_eq!(f.data(), expected.as_slice());
    }

    #[test]
    fn net1_structure() {
        let net = build_deepid3_net1(&toy_cfg(), &mut Rng::new(5)).unwrap();
        let stages = net.stages();
        assert_eq!(stages.len(), 4);
        for (kinds, pooled) in &stages[..3] {
            assert!(pooled);
            assert_eq!(kinds, &["conv", "conv"]);
        }
        assert_eq!(stages[3], (vec!["local", "local"], false));
        let final_node = &net.nodes[net.final_index()];
        assert!(matches!(final_node.kind, LayerKind::Local(_)));
        assert_eq!(net.feature_dim(), 64);
        assert_eq!(net.heads.len(), 4);
    }

    #[test]
    fn net1_feature_dim_must_tile_grid() {
        let cfg = ScaleConfig { feature_dim: 65, ..toy_cfg() };
        let err = build_deepid3_net1(&cfg, &mut Rng::new(5)).unwrap_err();
        assert!(err.to_string().contains("local4b"), "{err}");
    }

    #[test]
    fn net2_structure() {
        let net = build_deepid3_net2(&toy_cfg(), &mut Rng::new(6)).unwrap();
        let stages = net.stages();
        let inceptions: Vec<usize> = stages
            .iter()
            .map(|(k, _)| k.iter().filter(|t| **t == "inception").count())
            .collect();
        assert_eq!(inceptions, [0, 0, 3, 2, 0]);
        assert_eq!(stages.iter().filter(|(_, pooled)| *pooled).count(), 4);
        assert_eq!(net.heads.len(), 4);
        assert!(matches!(net.nodes[net.final_index()].kind, LayerKind::FullyConnected { .. }));
    }

    #[test]
    fn deepid3_is_deeper_than_deepid2plus() {
        for cfg in [toy_cfg(), tiny_cfg(), ScaleConfig::default()] {
            let base = build_deepid2plus(&cfg, &mut Rng::new(1)).unwrap().weight_bearing_layers();
            let n1 = build_deepid3_net1(&cfg, &mut Rng::new(1)).unwrap().weight_bearing_layers();
            let n2 = build_deepid3_net2(&cfg, &mut Rng::new(1)).unwrap().weight_bearing_layers();
            assert!(n1 > base && n2 > base);
            assert!((8..=10).contains(&n1) && (8..=10).contains(&n2));
        }
    }

    #[test]
    fn shape_trace_matches_declared_shapes() {
        let mut rng = Rng::new(7);
        for arch in [Architecture::DeepId2Plus, Architecture::DeepId3Net1, Architecture::DeepId3Net2] {
            let net = arch.build(&toy_cfg(), &mut rng).unwrap();
            let img = uniform_tensor(&[1, 32, 32], 0.0, 1.0, &mut rng).unwrap();
            let trace = forward(&net, &img, Mode::Eval, &mut rng).unwrap();
            for (node, out) in net.nodes.iter().zip(&trace.outputs) {
                assert_eq!(out.shape(), node.output_shape.as_slice(), "{arch} {}", node.name);
            }
        }
    }

    #[test]
    fn too_small_input_names_stage() {
        let cfg = ScaleConfig { input_h: 8, input_w: 8, ..toy_cfg() };
        let err = build_deepid3_net2(&cfg, &mut Rng::new(1)).unwrap_err();
        assert!(err.to_string().contains("pool4"), "{err}");
    }

    #[test]
    fn extraction_is_deterministic_and_sized() {
        let mut rng = Rng::new(8);
        let net = build_deepid3_net2(&toy_cfg(), &mut rng).unwrap();
        let img = uniform_tensor(&[1, 32, 32], 0.0, 1.0, &mut rng).unwrap();
        let a = extract_feature(&net, &img).unwrap();
        let b = extract_feature(&net, &img).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.len(), 64);
        assert!(extract_feature(&net, &Tensor::zeros(&[1, 16, 16]).unwrap()).is_err());
    }

    fn pair_loss(net: &NetworkGraph, imgs: [&Tensor; 2], ids: [usize; 2], heads: &[usize]) -> Result<f64> {
        // same dropout masks on every evaluation
        let mut rng = Rng::new(99);
        Ok(pair_gradients(net, imgs, ids, heads, Mode::Train, &mut rng)?.loss)
    }

    #[test]
    fn full_graph_gradient_check() {
        for (seed, arch) in [(1, Architecture::DeepId3Net2), (2, Architecture::DeepId3Net1), (3, Architecture::DeepId2Plus)] {
            let mut rng = Rng::new(seed);
            let mut net = arch.build(&tiny_cfg(), &mut rng).unwrap();
            for (name, t) in net.params.iter_mut() {
                if name.ends_with(".bias") {
                    *t = uniform_tensor(t.shape(), 0.05, 0.15, &mut rng).unwrap();
                }
            }
            let a = uniform_tensor(&[1, 16, 16], -1.0, 1.0, &mut rng).unwrap();
            let b = uniform_tensor(&[1, 16, 16], -1.0, 1.0, &mut rng).unwrap();
            let heads: Vec<usize> = (0..net.heads.len()).collect();
            let ids = [0, 2];
            let analytic = pair_gradients(&net, [&a, &b], ids, &heads, Mode::Train, &mut Rng::new(99)).unwrap();

            let mut worst: f64 = 0.0;
            let names: Vec<String> = net.params.keys().cloned().collect();
            for name in names {
                let p0 = net.params[&name].clone();
                // probe a handful of coordinates per tensor
                let picks: Vec<usize> = (0..4.min(p0.len())).map(|_| rng.below(p0.len())).collect();
                for &i in &picks {
                    let mut f = |v: f64| {
                        let mut t = p0.clone();
                        t.data_mut()[i] = v;
                        net.params.insert(name.clone(), t);
                        pair_loss(&net, [&a, &b], ids, &heads).unwrap()
                    };
                    let x = p0.data()[i];
                    let num = (f(x + DEFAULT_FD_EPS) - f(x - DEFAULT_FD_EPS)) / (2.0 * DEFAULT_FD_EPS);
                    net.params.insert(name.clone(), p0.clone());
                    let ana = analytic.grads.get(&name).map_or(0.0, |g| g.data()[i]);
                    let err = (ana - num).abs() / ana.abs().max(num.abs()).max(1e-6);
                    worst = worst.max(err);
                }
            }
            assert!(worst < 1e-3, "{arch}: worst relative error {worst}");
        }
    }

    #[test]
    fn input_gradient_matches_finite_differences() {
        let mut rng = Rng::new(11);
        let net = build_deepid3_net1(&tiny_cfg(), &mut rng).unwrap();
        let img = uniform_tensor(&[1, 16, 16], -1.0, 1.0, &mut rng).unwrap();
        let idx = net.final_index();
        let probe = uniform_tensor(&net.nodes[idx].output_shape, -1.0, 1.0, &mut rng).unwrap();
        let trace = forward(&net, &img, Mode::Eval, &mut rng).unwrap();
        let (_, g) = backward(&net, &trace, &BTreeMap::from([(idx, probe.clone())])).unwrap();
        let n = finite_diff_grad(|t| extract_feature(&net, t)?.dot(&probe), &img, DEFAULT_FD_EPS).unwrap();
        assert!(max_relative_error(&g, &n, 1e-6) < 1e-3);
    }

    #[test]
    fn head_gradients_add_linearly() {
        let mut rng = Rng::new(12);
        let net = build_deepid3_net2(&tiny_cfg(), &mut rng).unwrap();
        let a = uniform_tensor(&[1, 16, 16], -1.0, 1.0, &mut rng).unwrap();
        let b = uniform_tensor(&[1, 16, 16], -1.0, 1.0, &mut rng).unwrap();
        let run = |heads: &[usize]| pair_gradients(&net, [&a, &b], [1, 1], heads, Mode::Eval, &mut Rng::new(0)).unwrap();
        let both = run(&[0, 3]);
        let only0 = run(&[0]);
        let only3 = run(&[3]);
        assert!((both.loss - only0.loss - only3.loss).abs() < 1e-12);
        assert_eq!(both.head_losses, vec![only0.loss, only3.loss]);
        for (name, g) in &both.grads {
            let mut sum = g.zeros_like();
            for part in [&only0, &only3] {
                if let Some(p) = part.grads.get(name) {
                    sum.add_scaled(p, 1.0).unwrap();
                }
            }
            let diff = g.data().iter().zip(sum.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(diff < 1e-12, "{name}");
        }
    }
}
