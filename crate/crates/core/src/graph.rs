//! Chain IR for the Frontnet CNN family, shape inference and cost statistics.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GraphError {
    #[error("unsupported variant: input width {width}, base channels {channels}")]
    UnsupportedVariant { width: usize, channels: usize },
    #[error("unknown network name {0:?} (expected 160x32, 160x16 or 80x32)")]
    UnknownName(String),
    #[error("layer {index} ({name}): spatial dimension reaches zero")]
    ZeroDimension { index: usize, name: String },
    #[error("layer {index} ({name}): input shape {got} does not match previous output {expected}")]
    ShapeMismatch { index: usize, name: String, got: Shape3, expected: Shape3 },
    #[error("layer {index} ({name}): {reason}")]
    Invalid { index: usize, name: String, reason: String },
}

/// `(channels, height, width)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub struct Shape3 {
    pub c: usize,
    pub h: usize,
    pub w: usize,
}

impl Shape3 {
    pub const fn new(c: usize, h: usize, w: usize) -> Self {
        Self { c, h, w }
    }

    pub const fn elems(&self) -> usize {
        self.c * self.h * self.w
    }
}

impl fmt::Display for Shape3 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}x{}", self.c, self.h, self.w)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Conv2d,
    MaxPool,
    /// Batch-norm and ReLU folded into one integer requantization.
    RequantAct,
    FullyConnected,
    /// Identity at inference.
    DropoutNoop,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub name: String,
    pub kind: LayerKind,
    pub in_ch: usize,
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    pub in_shape: Shape3,
    pub out_shape: Shape3,
}

impl LayerSpec {
    fn new(name: impl Into<String>, kind: LayerKind, in_ch: usize, out_ch: usize, k: usize, s: usize, p: usize) -> Self {
        Self {
            name: name.into(),
            kind,
            in_ch,
            out_ch,
            kernel: (k, k),
            stride: (s, s),
            padding: (p, p),
            in_shape: Shape3::default(),
            out_shape: Shape3::default(),
        }
    }

    pub fn conv(name: impl Into<String>, in_ch: usize, out_ch: usize, k: usize, s: usize, p: usize) -> Self {
        Self::new(name, LayerKind::Conv2d, in_ch, out_ch, k, s, p)
    }

    pub fn act(name: impl Into<String>, ch: usize) -> Self {
        Self::new(name, LayerKind::RequantAct, ch, ch, 1, 1, 0)
    }

    pub fn maxpool(name: impl Into<String>, ch: usize, k: usize, s: usize) -> Self {
        Self::new(name, LayerKind::MaxPool, ch, ch, k, s, 0)
    }

    pub fn dropout(name: impl Into<String>, ch: usize) -> Self {
        Self::new(name, LayerKind::DropoutNoop, ch, ch, 1, 1, 0)
    }

    pub fn fc(name: impl Into<String>, inputs: usize, outputs: usize) -> Self {
        Self::new(name, LayerKind::FullyConnected, inputs, outputs, 1, 1, 0)
    }

    pub fn has_weights(&self) -> bool {
        matches!(self.kind, LayerKind::Conv2d | LayerKind::FullyConnected)
    }

    /// `(out, in, kh, kw)` for convolutions, `(out, in)` for FC layers.
    pub fn weight_shape(&self) -> Option<Vec<usize>> {
        match self.kind {
            LayerKind::Conv2d => Some(vec![self.out_ch, self.in_ch, self.kernel.0, self.kernel.1]),
            LayerKind::FullyConnected => Some(vec![self.out_ch, self.in_ch]),
            _ => None,
        }
    }

    pub fn params(&self) -> usize {
        self.weight_shape().map_or(0, |s| s.iter().product())
    }

    pub fn macs(&self) -> usize {
        match self.kind {
            LayerKind::Conv2d => self.out_shape.elems() * self.in_ch * self.kernel.0 * self.kernel.1,
            LayerKind::FullyConnected => self.in_ch * self.out_ch,
            _ => 0,
        }
    }

    /// Bytes per output element: FC outputs stay in 32-bit, everything else is 8-bit.
    pub fn out_elem_bytes(&self) -> usize {
        match self.kind {
            LayerKind::FullyConnected => 4,
            _ => 1,
        }
    }

    fn infer(&self, input: Shape3) -> Option<Shape3> {
        let (kh, kw) = self.kernel;
        let (sh, sw) = self.stride;
        let (ph, pw) = self.padding;
        match self.kind {
            LayerKind::Conv2d => {
                let h = (input.h + 2 * ph).checked_sub(kh)? / sh + 1;
                let w = (input.w + 2 * pw).checked_sub(kw)? / sw + 1;
                Some(Shape3::new(self.out_ch, h, w))
            }
            // ceil mode: a partial window at the border still produces an output
            LayerKind::MaxPool => {
                let h = (input.h + 2 * ph).checked_sub(kh)?.div_ceil(sh) + 1;
                let w = (input.w + 2 * pw).checked_sub(kw)?.div_ceil(sw) + 1;
                Some(Shape3::new(input.c, h, w))
            }
            LayerKind::RequantAct | LayerKind::DropoutNoop => Some(input),
            LayerKind::FullyConnected => Some(Shape3::new(self.out_ch, 1, 1)),
        }
    }
}

/// The three evaluated network variants, named `<input width>x<base channels>`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Variant {
    #[serde(rename = "160x32")]
    W160C32,
    #[serde(rename = "160x16")]
    W160C16,
    #[serde(rename = "80x32")]
    W80C32,
}

impl Variant {
    pub const ALL: [Variant; 3] = [Variant::W160C32, Variant::W160C16, Variant::W80C32];

    pub fn from_dims(width: usize, channels: usize) -> Result<Self, GraphError> {
        match (width, channels) {
            (160, 32) => Ok(Variant::W160C32),
            (160, 16) => Ok(Variant::W160C16),
            (80, 32) => Ok(Variant::W80C32),
            _ => Err(GraphError::UnsupportedVariant { width, channels }),
        }
    }

    pub fn width(self) -> usize {
        match self {
            Variant::W160C32 | Variant::W160C16 => 160,
            Variant::W80C32 => 80,
        }
    }

    pub fn height(self) -> usize {
        self.width() * 3 / 5
    }

    pub fn base_channels(self) -> usize {
        match self {
            Variant::W160C16 => 16,
            _ => 32,
        }
    }

    pub fn build(self) -> NetGraph {
        build_frontnet(self.width(), self.base_channels()).expect("variant dimensions are supported")
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}x{}", self.width(), self.base_channels())
    }
}

impl FromStr for Variant {
    type Err = GraphError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "160x32" => Ok(Variant::W160C32),
            "160x16" => Ok(Variant::W160C16),
            "80x32" => Ok(Variant::W80C32),
            other => Err(GraphError::UnknownName(other.to_string())),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetGraph {
    pub variant: Option<Variant>,
    pub input_shape: Shape3,
    pub layers: Vec<LayerSpec>,
}

/// Builds the Frontnet chain for one of the supported `(width, channels)` pairs.
///
/// conv5x5/2 -> maxpool2x2/2 -> 3 x [conv3x3/2, conv3x3/1] -> dropout -> FC(4).
/// Every convolution carries a fused batch-norm/ReLU stage; the first
/// convolution of blocks 2 and 3 doubles the channel count.
pub fn build_frontnet(input_width: usize, base_channels: usize) -> Result<NetGraph, GraphError> {
    let variant = Variant::from_dims(input_width, base_channels)?;
    let c = base_channels;
    let mut layers = vec![
        LayerSpec::conv("conv1", 1, c, 5, 2, 2),
        LayerSpec::act("conv1.act", c),
        LayerSpec::maxpool("pool1", c, 2, 2),
    ];
    let mut ch = c;
    for (b, out) in [c, 2 * c, 4 * c].into_iter().enumerate() {
        let n = b + 1;
        layers.push(LayerSpec::conv(format!("block{n}.conv1"), ch, out, 3, 2, 1));
        layers.push(LayerSpec::act(format!("block{n}.conv1.act"), out));
        layers.push(LayerSpec::conv(format!("block{n}.conv2"), out, out, 3, 1, 1));
        layers.push(LayerSpec::act(format!("block{n}.conv2.act"), out));
        ch = out;
    }
    layers.push(LayerSpec::dropout("dropout", ch));
    layers.push(LayerSpec::fc("fc", 0, 4));
    let g = NetGraph { variant: Some(variant), input_shape: Shape3::new(1, variant.height(), input_width), layers };
    infer_shapes(&g)
}

/// Fills every layer's input/output shape from the graph input.
///
/// FC input width is taken from the flattened `(C, H, W)` volume feeding it.
pub fn infer_shapes(g: &NetGraph) -> Result<NetGraph, GraphError> {
    let mut out = g.clone();
    let mut cur = g.input_shape;
    for (index, layer) in out.layers.iter_mut().enumerate() {
        let bad = |reason: &str| GraphError::Invalid { index, name: layer.name.clone(), reason: reason.into() };
        match layer.kind {
            LayerKind::FullyConnected => layer.in_ch = cur.elems(),
            LayerKind::Conv2d => {
                if layer.in_ch != cur.c {
                    return Err(bad(&format!("expects {} input channels, got {}", layer.in_ch, cur.c)));
                }
            }
            _ => {
                layer.in_ch = cur.c;
                layer.out_ch = cur.c;
            }
        }
        if layer.stride.0 == 0 || layer.stride.1 == 0 {
            return Err(bad("zero stride"));
        }
        layer.in_shape = cur;
        let next = layer
            .infer(cur)
            .filter(|s| s.h > 0 && s.w > 0)
            .ok_or_else(|| GraphError::ZeroDimension { index, name: layer.name.clone() })?;
        layer.out_shape = next;
        cur = next;
    }
    Ok(out)
}

impl NetGraph {
    /// Checks the chain invariants of an already-inferred graph.
    pub fn validate(&self) -> Result<(), GraphError> {
        let mut cur = self.input_shape;
        for (index, l) in self.layers.iter().enumerate() {
            if l.in_shape != cur {
                return Err(GraphError::ShapeMismatch { index, name: l.name.clone(), got: l.in_shape, expected: cur });
            }
            match l.infer(cur) {
                Some(s) if s == l.out_shape && s.h > 0 && s.w > 0 => cur = s,
                _ => return Err(GraphError::ZeroDimension { index, name: l.name.clone() }),
            }
        }
        Ok(())
    }

    pub fn output_shape(&self) -> Shape3 {
        self.layers.last().map_or(self.input_shape, |l| l.out_shape)
    }

    /// Whether layer `i`'s raw output never materializes as a buffer
    /// (a convolution immediately requantized, or an identity dropout).
    pub fn is_fused_output(&self, i: usize) -> bool {
        match self.layers[i].kind {
            LayerKind::Conv2d => self.layers.get(i + 1).is_some_and(|n| n.kind == LayerKind::RequantAct),
            LayerKind::DropoutNoop => true,
            _ => false,
        }
    }

    /// Bytes of the activation buffer produced by layer `i` (0 when fused).
    pub fn output_buffer_bytes(&self, i: usize) -> usize {
        if self.is_fused_output(i) {
            0
        } else {
            let l = &self.layers[i];
            l.out_shape.elems() * l.out_elem_bytes()
        }
    }

    pub fn layer_stats(&self) -> Vec<LayerStats> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| LayerStats {
                index: i,
                name: l.name.clone(),
                kind: l.kind,
                out_shape: l.out_shape,
                macs: l.macs(),
                params: l.params(),
                buffer_bytes: self.output_buffer_bytes(i),
            })
            .collect()
    }

    /// Compute stages: each convolution (with its activation) or FC layer is a
    /// stage. With `fuse_pool`, pooling joins the preceding stage; otherwise it
    /// forms a stage of its own.
    pub fn stages(&self, fuse_pool: bool) -> Vec<Vec<usize>> {
        let mut stages: Vec<Vec<usize>> = Vec::new();
        for (i, l) in self.layers.iter().enumerate() {
            match l.kind {
                LayerKind::Conv2d | LayerKind::FullyConnected => stages.push(vec![i]),
                LayerKind::MaxPool if !fuse_pool || stages.is_empty() => stages.push(vec![i]),
                _ => match stages.last_mut() {
                    Some(s) => s.push(i),
                    None => stages.push(vec![i]),
                },
            }
        }
        stages
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerStats {
    pub index: usize,
    pub name: String,
    pub kind: LayerKind,
    pub out_shape: Shape3,
    pub macs: usize,
    pub params: usize,
    pub buffer_bytes: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GraphStats {
    pub macs: usize,
    pub params: usize,
    /// Input image, all weights and all intermediate activation buffers.
    pub memory_bytes: usize,
}

/// MACs (conv and FC only), parameter count and the footprint of a
/// straightforward implementation keeping every buffer alive.
pub fn analyze(g: &NetGraph) -> Result<GraphStats, GraphError> {
    g.validate()?;
    let stats = g.layer_stats();
    let macs = stats.iter().map(|s| s.macs).sum();
    let params = stats.iter().map(|s| s.params).sum();
    let buffers: usize = stats.iter().map(|s| s.buffer_bytes).sum();
    Ok(GraphStats { macs, params, memory_bytes: g.input_shape.elems() + params + buffers })
}

/// Three-significant-figure rendering used in the summary table.
pub fn sig3(x: f64) -> String {
    if x == 0.0 {
        return "0".into();
    }
    let digits = 2 - x.abs().log10().floor() as i32;
    if digits > 0 {
        format!("{:.*}", digits as usize, x)
    } else {
        let p = 10f64.powi(-digits);
        format!("{}", (x / p).round() * p)
    }
}

fn sci3(x: f64) -> String {
    let e = x.abs().log10().floor() as i32;
    format!("{:.2}e{}", x / 10f64.powi(e), e)
}

/// Summary table: operations in MMAC, memory in kB, parameter count.
pub fn table_report(rows: &[(String, GraphStats)]) -> String {
    let mut s = String::new();
    s.push_str(&format!("{:<18}", "network"));
    for (name, _) in rows {
        s.push_str(&format!("{name:>12}"));
    }
    s.push('\n');
    let line = |label: &str, f: &dyn Fn(&GraphStats) -> String| {
        let mut l = format!("{label:<18}");
        for (_, st) in rows {
            l.push_str(&format!("{:>12}", f(st)));
        }
        l.push('\n');
        l
    };
    s.push_str(&line("Operations [MMAC]", &|st| sig3(st.macs as f64 / 1e6)));
    s.push_str(&line("Memory [kB]", &|st| format!("{:.0}", st.memory_bytes as f64 / 1e3)));
    s.push_str(&line("# Parameters", &|st| sci3(st.params as f64)));
    s.push_str(&line("MACs", &|st| st.macs.to_string()));
    s.push_str(&line("Memory [B]", &|st| st.memory_bytes.to_string()));
    s.push_str(&line("Params", &|st| st.params.to_string()));
    s
}
