//! Two-stream anchor-grid detector: a spatial stream over the RGB frame, a
//! temporal stream over the flow field, channel-wise early fusion, and a
//! 1x1 head regressing per-anchor boxes, objectness and class scores.

mod anchors;
mod loss;

pub use anchors::anchors_kmeans;
pub use loss::{assign_targets, detection_loss, Assignment, FrameTargets, LossWeights, RespSlot};

use std::collections::BTreeMap;

use crate::autodiff::{softmax_rows, ConvSpec, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::flow::{classical_flow, ClassicalFlowParams, FlowNetSpec, FlowVariant};
use crate::params::{bind_frozen, init_conv_param, Params};

/// Axis-aligned box, center + extents, normalized to [0,1] image coords.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BBox {
    pub cx: f32,
    pub cy: f32,
    pub w: f32,
    pub h: f32,
}

impl BBox {
    pub fn new(cx: f32, cy: f32, w: f32, h: f32) -> Self {
        BBox { cx, cy, w, h }
    }

    /// (x0, y0, x1, y1)
    pub fn corners(&self) -> (f32, f32, f32, f32) {
        (
            self.cx - 0.5 * self.w,
            self.cy - 0.5 * self.h,
            self.cx + 0.5 * self.w,
            self.cy + 0.5 * self.h,
        )
    }

    pub fn area(&self) -> f32 {
        self.w * self.h
    }

    /// Positive extents and a non-empty intersection with the unit square.
    pub fn validate(&self) -> Result<()> {
        if !(self.w > 0.0 && self.h > 0.0) {
            return Err(Error::input(format!("degenerate box {self:?}")));
        }
        let (x0, y0, x1, y1) = self.corners();
        if x1 <= 0.0 || y1 <= 0.0 || x0 >= 1.0 || y0 >= 1.0 {
            return Err(Error::input(format!("box {self:?} lies outside the unit square")));
        }
        if !(self.cx.is_finite() && self.cy.is_finite() && self.w.is_finite() && self.h.is_finite())
        {
            return Err(Error::input(format!("non-finite box {self:?}")));
        }
        Ok(())
    }
}

/// Prior box shape in grid-cell units.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Anchor {
    pub pw: f32,
    pub ph: f32,
}

/// One scored box. `score = objectness * class_score`.
#[derive(Debug, Clone, PartialEq, serde::Serialize)]
pub struct Detection {
    pub rect: BBox,
    pub class_id: usize,
    pub class_score: f32,
    pub objectness: f32,
    pub score: f32,
}

/// Raw head output for one batch: (N, B*(5+K), S, S), per anchor
/// (tx, ty, tw, th, to) followed by K class logits.
pub struct GridPrediction {
    pub raw: Tensor<f32>,
    pub grid: usize,
    pub num_anchors: usize,
    pub classes: usize,
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct DetectorConfig {
    pub input_size: usize,
    pub grid: usize,
    pub anchors: Vec<Anchor>,
    pub classes: usize,
    /// Conv widths of each stream; a 2x2 max-pool follows every second conv.
    pub stream_widths: Vec<usize>,
    pub fusion_channels: usize,
    pub loss: LossWeights,
}

impl DetectorConfig {
    pub fn desk(classes: usize) -> Self {
        DetectorConfig {
            input_size: 64,
            grid: 8,
            anchors: vec![
                Anchor { pw: 1.5, ph: 1.5 },
                Anchor { pw: 2.5, ph: 2.5 },
                Anchor { pw: 3.5, ph: 3.5 },
            ],
            classes,
            stream_widths: vec![16, 16, 32, 32, 64, 64],
            fusion_channels: 64,
            loss: LossWeights::default(),
        }
    }

    pub fn num_anchors(&self) -> usize {
        self.anchors.len()
    }

    pub fn head_channels(&self) -> usize {
        self.num_anchors() * (5 + self.classes)
    }

    pub fn stream_out_channels(&self) -> usize {
        *self.stream_widths.last().expect("non-empty stream widths")
    }

    fn pool_stages(&self) -> usize {
        self.stream_widths.len() / 2
    }

    pub fn validate(&self) -> Result<()> {
        if self.stream_widths.is_empty() || self.stream_widths.len() % 2 != 0 {
            return Err(Error::config("stream widths must be a non-empty even-length list"));
        }
        let stride = 1usize << self.pool_stages();
        if self.grid * stride != self.input_size {
            return Err(Error::config(format!(
                "input size {} != grid {} x stride {}",
                self.input_size, self.grid, stride
            )));
        }
        if self.anchors.is_empty() {
            return Err(Error::config("at least one anchor required"));
        }
        if self.anchors.iter().any(|a| a.pw <= 0.0 || a.ph <= 0.0) {
            return Err(Error::config("anchors must have positive extents"));
        }
        if self.classes < 2 {
            return Err(Error::config("need at least two classes"));
        }
        Ok(())
    }
}

/// Which stream of the detector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamKind {
    Spatial,
    Temporal,
}

impl StreamKind {
    pub fn prefix(self) -> &'static str {
        match self {
            StreamKind::Spatial => "spatial",
            StreamKind::Temporal => "temporal",
        }
    }

    pub fn in_channels(self) -> usize {
        match self {
            StreamKind::Spatial => 3,
            StreamKind::Temporal => 2,
        }
    }
}

/// (name, shape) pairs for one stream.
pub fn stream_param_shapes(cfg: &DetectorConfig, kind: StreamKind) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut ci = kind.in_channels();
    for (i, &co) in cfg.stream_widths.iter().enumerate() {
        out.push((format!("{}.conv{}.w", kind.prefix(), i), vec![co, ci, 3, 3]));
        out.push((format!("{}.conv{}.b", kind.prefix(), i), vec![co]));
        ci = co;
    }
    out
}

/// Fusion 1x1 producing the shared fused feature map.
pub fn fuse_param_shapes(cfg: &DetectorConfig) -> Vec<(String, Vec<usize>)> {
    let cin = 2 * cfg.stream_out_channels();
    vec![
        ("fuse.w".into(), vec![cfg.fusion_channels, cin, 1, 1]),
        ("fuse.b".into(), vec![cfg.fusion_channels]),
    ]
}

/// Detection head 1x1 over the fused features.
pub fn head_param_shapes(cfg: &DetectorConfig) -> Vec<(String, Vec<usize>)> {
    vec![
        ("head.w".into(), vec![cfg.head_channels(), cfg.fusion_channels, 1, 1]),
        ("head.b".into(), vec![cfg.head_channels()]),
    ]
}

pub fn init_params(shapes: &[(String, Vec<usize>)], seed: u64) -> Params<f32> {
    shapes
        .iter()
        .map(|(name, shape)| (name.clone(), init_conv_param(seed, name, shape)))
        .collect()
}

/// Run one stream down to the S x S feature map (post-activation).
pub fn stream_forward<S: Scalar>(
    g: &mut Graph<S>,
    vars: &BTreeMap<String, Var>,
    cfg: &DetectorConfig,
    kind: StreamKind,
    x: Var,
) -> Result<Var> {
    let (_, c, _, _) = g.value(x).dims4()?;
    if c != kind.in_channels() {
        return Err(Error::config(format!(
            "{} stream expects {} channels, got {}",
            kind.prefix(),
            kind.in_channels(),
            c
        )));
    }
    let mut ci = kind.in_channels();
    let mut cur = x;
    for (i, &co) in cfg.stream_widths.iter().enumerate() {
        let spec = ConvSpec::new(ci, co, (3, 3)).with_padding(1);
        let w = fetch(vars, &format!("{}.conv{}.w", kind.prefix(), i))?;
        let b = fetch(vars, &format!("{}.conv{}.b", kind.prefix(), i))?;
        cur = g.conv2d(cur, w, b, &spec)?;
        cur = g.leaky_relu(cur, 0.1)?;
        if i % 2 == 1 {
            cur = g.maxpool2(cur)?;
        }
        ci = co;
    }
    Ok(cur)
}

fn fetch(vars: &BTreeMap<String, Var>, name: &str) -> Result<Var> {
    vars.get(name)
        .copied()
        .ok_or_else(|| Error::usage(format!("parameter `{name}` not bound")))
}

/// Concatenate stream features channel-wise and apply the fusion 1x1.
pub fn fuse_features<S: Scalar>(
    g: &mut Graph<S>,
    vars: &BTreeMap<String, Var>,
    cfg: &DetectorConfig,
    spatial: Var,
    temporal: Var,
) -> Result<Var> {
    let cat = g.concat_channels(spatial, temporal)?;
    let spec = ConvSpec::new(2 * cfg.stream_out_channels(), cfg.fusion_channels, (1, 1));
    let w = fetch(vars, "fuse.w")?;
    let b = fetch(vars, "fuse.b")?;
    let fused = g.conv2d(cat, w, b, &spec)?;
    g.leaky_relu(fused, 0.1)
}

/// Fused features -> raw grid prediction (linear 1x1).
pub fn head_forward<S: Scalar>(
    g: &mut Graph<S>,
    vars: &BTreeMap<String, Var>,
    cfg: &DetectorConfig,
    fused: Var,
) -> Result<Var> {
    let spec = ConvSpec::new(cfg.fusion_channels, cfg.head_channels(), (1, 1));
    let w = fetch(vars, "head.w")?;
    let b = fetch(vars, "head.b")?;
    g.conv2d(fused, w, b, &spec)
}

/// Early-fused prediction from the two stream feature maps.
pub fn fuse_predict<S: Scalar>(
    g: &mut Graph<S>,
    vars: &BTreeMap<String, Var>,
    cfg: &DetectorConfig,
    spatial: Var,
    temporal: Var,
) -> Result<Var> {
    let fused = fuse_features(g, vars, cfg, spatial, temporal)?;
    head_forward(g, vars, cfg, fused)
}

fn sigmoid32(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

/// Inverse sigmoid with clamping away from the poles.
fn logit32(p: f32) -> f32 {
    let p = p.clamp(1e-6, 1.0 - 1e-6);
    (p / (1.0 - p)).ln()
}

/// Encode a ground-truth box against one anchor: returns the owning cell
/// (ix, iy) and raw (tx, ty, tw, th) such that decoding recovers the box.
pub fn encode_box(rect: &BBox, anchor: &Anchor, grid: usize) -> (usize, usize, f32, f32, f32, f32) {
    let s = grid as f32;
    let ix = ((rect.cx * s).floor() as isize).clamp(0, grid as isize - 1) as usize;
    let iy = ((rect.cy * s).floor() as isize).clamp(0, grid as isize - 1) as usize;
    let tx = logit32(rect.cx * s - ix as f32);
    let ty = logit32(rect.cy * s - iy as f32);
    let tw = (rect.w * s / anchor.pw).ln();
    let th = (rect.h * s / anchor.ph).ln();
    (ix, iy, tx, ty, tw, th)
}

/// Decode one slot of the raw grid into a box.
pub fn decode_slot(
    tx: f32,
    ty: f32,
    tw: f32,
    th: f32,
    ix: usize,
    iy: usize,
    anchor: &Anchor,
    grid: usize,
) -> BBox {
    let s = grid as f32;
    BBox {
        cx: (ix as f32 + sigmoid32(tx)) / s,
        cy: (iy as f32 + sigmoid32(ty)) / s,
        w: anchor.pw * tw.exp() / s,
        h: anchor.ph * th.exp() / s,
    }
}

/// Decode a raw grid tensor into per-image detections with
/// `score = sigmoid(to) * max_class_prob >= conf_threshold`.
pub fn decode(
    gp: &GridPrediction,
    anchors: &[Anchor],
    conf_threshold: f32,
) -> Result<Vec<Vec<Detection>>> {
    let (n, c, sy, sx) = gp.raw.dims4()?;
    let b = gp.num_anchors;
    let k = gp.classes;
    if anchors.len() != b {
        return Err(Error::config(format!("{} anchors for {} anchor slots", anchors.len(), b)));
    }
    if c != b * (5 + k) || sy != gp.grid || sx != gp.grid {
        return Err(Error::config(format!(
            "grid tensor {:?} inconsistent with S={} B={} K={}",
            gp.raw.shape(),
            gp.grid,
            b,
            k
        )));
    }
    let s = gp.grid;
    let plane = s * s;
    let data = gp.raw.data();
    let mut out = Vec::with_capacity(n);
    for img in 0..n {
        let mut dets = Vec::new();
        let base = img * c * plane;
        for a in 0..b {
            let ch = |f: usize| base + (a * (5 + k) + f) * plane;
            for iy in 0..s {
                for ix in 0..s {
                    let at = iy * s + ix;
                    let to = data[ch(4) + at];
                    let objectness = sigmoid32(to);
                    let mut logits = Tensor::zeros(vec![1, k]);
                    for j in 0..k {
                        logits.data_mut()[j] = data[ch(5 + j) + at];
                    }
                    let probs = softmax_rows(&logits)?;
                    let (mut best, mut best_p) = (0usize, f32::MIN);
                    for (j, &p) in probs.data().iter().enumerate() {
                        if p > best_p {
                            best_p = p;
                            best = j;
                        }
                    }
                    let score = objectness * best_p;
                    if score >= conf_threshold {
                        let rect = decode_slot(
                            data[ch(0) + at],
                            data[ch(1) + at],
                            data[ch(2) + at],
                            data[ch(3) + at],
                            ix,
                            iy,
                            &anchors[a],
                            s,
                        );
                        dets.push(Detection {
                            rect,
                            class_id: best,
                            class_score: best_p,
                            objectness,
                            score,
                        });
                    }
                }
            }
        }
        out.push(dets);
    }
    Ok(out)
}

/// Where the temporal stream's flow comes from.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub enum FlowSource {
    Learned(FlowVariant),
    Classical(ClassicalFlowParams),
}

impl FlowSource {
    pub fn label(&self) -> String {
        match self {
            FlowSource::Learned(v) => format!("flownet-{}", v.name()),
            FlowSource::Classical(_) => "classical".into(),
        }
    }
}

/// Complete detector: flow front end, both streams, fusion, head.
#[derive(Clone)]
pub struct DetectorModel {
    pub cfg: DetectorConfig,
    pub flow: FlowSource,
    pub params: Params<f32>,
}

impl DetectorModel {
    /// Compute flow for a batch of frame pairs, off-tape.
    pub fn compute_flow(&self, f0: &Tensor<f32>, f1: &Tensor<f32>) -> Result<Tensor<f32>> {
        compute_flow(&self.flow, &self.params, f0, f1)
    }

    /// Full forward pass (inference): frames -> flow -> streams -> grid.
    pub fn forward_grid(&self, f0: &Tensor<f32>, f1: &Tensor<f32>) -> Result<GridPrediction> {
        let flow = self.compute_flow(f0, f1)?;
        self.forward_grid_with_flow(f0, &flow)
    }

    /// Forward from a precomputed flow tensor (external-flow pipelines).
    pub fn forward_grid_with_flow(
        &self,
        frame: &Tensor<f32>,
        flow: &Tensor<f32>,
    ) -> Result<GridPrediction> {
        let mut g: Graph<f32> = Graph::new();
        let vars = bind_frozen(&mut g, &self.params);
        let fx = g.constant(frame.clone());
        let fl = g.constant(flow.clone());
        let sp = stream_forward(&mut g, &vars, &self.cfg, StreamKind::Spatial, fx)?;
        let tp = stream_forward(&mut g, &vars, &self.cfg, StreamKind::Temporal, fl)?;
        let raw = fuse_predict(&mut g, &vars, &self.cfg, sp, tp)?;
        Ok(GridPrediction {
            raw: g.value(raw).clone(),
            grid: self.cfg.grid,
            num_anchors: self.cfg.num_anchors(),
            classes: self.cfg.classes,
        })
    }

    /// Detections for a batch of frame pairs.
    pub fn detect(
        &self,
        f0: &Tensor<f32>,
        f1: &Tensor<f32>,
        conf_threshold: f32,
    ) -> Result<Vec<Vec<Detection>>> {
        let gp = self.forward_grid(f0, f1)?;
        decode(&gp, &self.cfg.anchors, conf_threshold)
    }
}

/// Flow for a batch of frame pairs under either source.
pub fn compute_flow(
    source: &FlowSource,
    params: &Params<f32>,
    f0: &Tensor<f32>,
    f1: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let (n, c, h, w) = f0.dims4()?;
    match source {
        FlowSource::Learned(variant) => {
            let spec = FlowNetSpec::new(*variant);
            crate::flow::flownet_flow_batch(&spec, params, f0, f1)
        }
        FlowSource::Classical(p) => {
            use rayon::prelude::*;
            let plane = c * h * w;
            let f0d = f0.data();
            let f1d = f1.data();
            let fields: Vec<_> = (0..n)
                .into_par_iter()
                .map(|i| {
                    classical_flow(
                        &f0d[i * plane..(i + 1) * plane],
                        &f1d[i * plane..(i + 1) * plane],
                        c,
                        h,
                        w,
                        p,
                    )
                })
                .collect();
            let mut out = Tensor::zeros(vec![n, 2, h, w]);
            for (i, f) in fields.into_iter().enumerate() {
                out.data_mut()[i * 2 * h * w..(i + 1) * 2 * h * w].copy_from_slice(&f.uv);
            }
            Ok(out)
        }
    }
}
