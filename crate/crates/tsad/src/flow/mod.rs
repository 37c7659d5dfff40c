//! Optical-flow estimation: three trainable encoder-decoder variants on an
//! accuracy/speed ladder, a classical non-trainable variational baseline,
//! and the endpoint-error metric.

mod classical;
mod ladder;

pub use classical::{classical_flow, ClassicalFlowParams};
pub use ladder::{flow_ladder_report, flownet_flow_batch, ladder_csv, FlowMethod, LadderEntry, LadderRow};

use crate::autodiff::{ConvSpec, Graph, Scalar, Tensor, Var};
use crate::error::{Error, Result};
use crate::params::{init_conv_param, Params};

/// Per-pixel (u, v) displacement in pixels mapping frame t to frame t+1.
/// Stored as two planes: u then v, each h*w row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub h: usize,
    pub w: usize,
    pub uv: Vec<f32>,
}

impl FlowField {
    pub fn zeros(h: usize, w: usize) -> Self {
        FlowField { h, w, uv: vec![0.0; 2 * h * w] }
    }

    pub fn new(h: usize, w: usize, uv: Vec<f32>) -> Result<Self> {
        if uv.len() != 2 * h * w {
            return Err(Error::input(format!(
                "flow buffer has {} values, expected {}",
                uv.len(),
                2 * h * w
            )));
        }
        Ok(FlowField { h, w, uv })
    }

    pub fn u(&self) -> &[f32] {
        &self.uv[..self.h * self.w]
    }

    pub fn v(&self) -> &[f32] {
        &self.uv[self.h * self.w..]
    }
}

/// Mean endpoint error between two flow fields (px).
pub fn epe(pred: &FlowField, gt: &FlowField) -> Result<f64> {
    if pred.h != gt.h || pred.w != gt.w {
        return Err(Error::input(format!(
            "flow shape mismatch: {}x{} vs {}x{}",
            pred.h, pred.w, gt.h, gt.w
        )));
    }
    let n = pred.h * pred.w;
    let mut acc = 0.0f64;
    for i in 0..n {
        let du = (pred.uv[i] - gt.uv[i]) as f64;
        let dv = (pred.uv[n + i] - gt.uv[n + i]) as f64;
        acc += (du * du + dv * dv).sqrt();
    }
    Ok(acc / n as f64)
}

/// Capacity ladder for the learned estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum FlowVariant {
    /// 4 pyramid levels, 24 base channels: most accurate, slowest.
    Full,
    /// 3 levels, 16 base channels.
    Css,
    /// 2 levels, 8 base channels: small-capacity, fastest.
    Sd,
}

impl FlowVariant {
    pub const ALL: [FlowVariant; 3] = [FlowVariant::Full, FlowVariant::Css, FlowVariant::Sd];

    pub fn name(self) -> &'static str {
        match self {
            FlowVariant::Full => "full",
            FlowVariant::Css => "css",
            FlowVariant::Sd => "sd",
        }
    }

    pub fn from_name(name: &str) -> Option<FlowVariant> {
        Self::ALL.iter().copied().find(|v| v.name() == name)
    }

    pub fn levels(self) -> usize {
        match self {
            FlowVariant::Full => 4,
            FlowVariant::Css => 3,
            FlowVariant::Sd => 2,
        }
    }

    pub fn base_channels(self) -> usize {
        match self {
            FlowVariant::Full => 24,
            FlowVariant::Css => 16,
            FlowVariant::Sd => 8,
        }
    }
}

/// Encoder-decoder flow network over channel-concatenated frame pairs.
/// Direct regression (no correlation or warping layers); skip connections
/// from each encoder level keep boundary detail through the bottleneck.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct FlowNetSpec {
    pub variant: FlowVariant,
    /// Channels per input frame (the network sees 2x this).
    pub frame_channels: usize,
}

impl FlowNetSpec {
    pub fn new(variant: FlowVariant) -> Self {
        FlowNetSpec { variant, frame_channels: 3 }
    }

    fn channel_plan(&self) -> Vec<usize> {
        let base = self.variant.base_channels();
        let cap = 4 * base;
        let mut chans = vec![base];
        for _ in 0..self.variant.levels() {
            chans.push((chans.last().unwrap() * 2).min(cap));
        }
        chans
    }

    /// (name, shape) of every parameter, in declaration order.
    pub fn param_shapes(&self) -> Vec<(String, Vec<usize>)> {
        let chans = self.channel_plan();
        let levels = self.variant.levels();
        let mut out = Vec::new();
        let mut push = |name: String, co: usize, ci: usize, k: usize| {
            out.push((format!("{name}.w"), vec![co, ci, k, k]));
            out.push((format!("{name}.b"), vec![co]));
        };
        push("flow.stem".into(), chans[0], 2 * self.frame_channels, 3);
        for l in 0..levels {
            push(format!("flow.enc{l}"), chans[l + 1], chans[l], 3);
        }
        for l in (0..levels).rev() {
            // decoder consumes upsampled state concat skip from level l
            push(format!("flow.dec{l}"), chans[l], chans[l + 1] + chans[l], 3);
        }
        push("flow.head".into(), 2, chans[0], 3);
        out
    }

    pub fn param_count(&self) -> usize {
        self.param_shapes().iter().map(|(_, s)| s.iter().product::<usize>()).sum()
    }

    pub fn init(&self, seed: u64) -> Params<f32> {
        let mut p = Params::new();
        for (name, shape) in self.param_shapes() {
            p.insert(name.clone(), init_conv_param(seed, &name, &shape));
        }
        p
    }

    /// Forward pass producing an (N, 2, H, W) flow in pixel units.
    /// H and W must be divisible by 2^levels.
    pub fn forward<S: Scalar>(
        &self,
        g: &mut Graph<S>,
        vars: &std::collections::BTreeMap<String, Var>,
        f0: Var,
        f1: Var,
    ) -> Result<Var> {
        let (n0, c0, h, w) = g.value(f0).dims4()?;
        let (n1, c1, h1, w1) = g.value(f1).dims4()?;
        if (n0, c0, h, w) != (n1, c1, h1, w1) {
            return Err(Error::config(format!(
                "frame pair shape mismatch: {:?} vs {:?}",
                g.value(f0).shape(),
                g.value(f1).shape()
            )));
        }
        if c0 != self.frame_channels {
            return Err(Error::config(format!(
                "flow net expects {}-channel frames, got {}",
                self.frame_channels, c0
            )));
        }
        let levels = self.variant.levels();
        let div = 1usize << levels;
        if h % div != 0 || w % div != 0 {
            return Err(Error::config(format!(
                "flow input {}x{} not divisible by 2^{}",
                h, w, levels
            )));
        }
        let chans = self.channel_plan();
        let var = |name: &str| -> Result<Var> {
            vars.get(name)
                .copied()
                .ok_or_else(|| Error::usage(format!("flow parameter `{name}` not bound")))
        };
        let conv = |g: &mut Graph<S>, x: Var, name: &str, ci: usize, co: usize| -> Result<Var> {
            let spec = ConvSpec::new(ci, co, (3, 3)).with_padding(1);
            let w = var(&format!("{name}.w"))?;
            let b = var(&format!("{name}.b"))?;
            g.conv2d(x, w, b, &spec)
        };

        let x = g.concat_channels(f0, f1)?;
        let mut cur = conv(g, x, "flow.stem", 2 * self.frame_channels, chans[0])?;
        cur = g.leaky_relu(cur, 0.1)?;
        let mut skips = vec![cur];
        for l in 0..levels {
            let pooled = g.maxpool2(skips[l])?;
            let mut f = conv(g, pooled, &format!("flow.enc{l}"), chans[l], chans[l + 1])?;
            f = g.leaky_relu(f, 0.1)?;
            skips.push(f);
        }
        let mut state = skips[levels];
        for l in (0..levels).rev() {
            let up = g.upsample2_nn(state)?;
            let cat = g.concat_channels(up, skips[l])?;
            state = conv(g, cat, &format!("flow.dec{l}"), chans[l + 1] + chans[l], chans[l])?;
            state = g.leaky_relu(state, 0.1)?;
        }
        conv(g, state, "flow.head", chans[0], 2)
    }
}

/// Differentiable mean endpoint error with an epsilon-guarded sqrt,
/// used as the pretraining loss. `gt` must be a constant (N, 2, H, W) var.
pub fn epe_loss<S: Scalar>(g: &mut Graph<S>, pred: Var, gt: Var) -> Result<Var> {
    let (n, c, h, w) = g.value(pred).dims4()?;
    if c != 2 {
        return Err(Error::config(format!("epe_loss expects 2 channels, got {c}")));
    }
    if g.value(gt).shape() != g.value(pred).shape() {
        return Err(Error::input(format!(
            "epe_loss shape mismatch: {:?} vs {:?}",
            g.value(pred).shape(),
            g.value(gt).shape()
        )));
    }
    let diff = g.sub(pred, gt)?;
    let sq = g.mul(diff, diff)?;
    let plane = h * w;
    let mut u_idx = Vec::with_capacity(n * plane);
    let mut v_idx = Vec::with_capacity(n * plane);
    for img in 0..n {
        for i in 0..plane {
            u_idx.push(img * 2 * plane + i);
            v_idx.push(img * 2 * plane + plane + i);
        }
    }
    let du2 = g.gather(sq, u_idx, vec![n * plane])?;
    let dv2 = g.gather(sq, v_idx, vec![n * plane])?;
    let s = g.add(du2, dv2)?;
    let dist = g.sqrt_shift(s, 1e-12)?;
    g.mean(dist)
}

/// Split an (N, 2, H, W) tensor into per-image flow fields.
pub fn tensor_to_fields(t: &Tensor<f32>) -> Result<Vec<FlowField>> {
    let (n, c, h, w) = t.dims4()?;
    if c != 2 {
        return Err(Error::config(format!("expected 2 channels, got {c}")));
    }
    let plane = 2 * h * w;
    Ok((0..n)
        .map(|i| FlowField { h, w, uv: t.data()[i * plane..(i + 1) * plane].to_vec() })
        .collect())
}
