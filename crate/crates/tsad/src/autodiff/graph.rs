use super::conv;
use super::tensor::Tensor;
use super::{ConvSpec, Scalar};
use crate::error::{Error, Result};

/// Handle to a node on the tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Step<S> {
    Conv2d { x: Var, w: Var, b: Var, out: Var, spec: ConvSpec },
    LeakyRelu { x: Var, out: Var, slope: S },
    Sigmoid { x: Var, out: Var },
    SoftmaxCe { logits: Var, out: Var, targets: Vec<usize>, probs: Tensor<S> },
    MaxPool2 { x: Var, out: Var, argmax: Vec<u32> },
    Upsample2 { x: Var, out: Var },
    ConcatChannels { a: Var, b: Var, out: Var },
    Add { a: Var, b: Var, out: Var },
    Sub { a: Var, b: Var, out: Var },
    Mul { a: Var, b: Var, out: Var },
    Scale { x: Var, out: Var, factor: S },
    Sum { x: Var, out: Var },
    Mean { x: Var, out: Var },
    Gather { x: Var, out: Var, idx: Vec<usize> },
    SqrtShift { x: Var, out: Var },
    GlobalAvgPool { x: Var, out: Var },
    Linear { x: Var, w: Var, b: Var, out: Var },
}

impl<S> Step<S> {
    fn out(&self) -> Var {
        match self {
            Step::Conv2d { out, .. }
            | Step::LeakyRelu { out, .. }
            | Step::Sigmoid { out, .. }
            | Step::SoftmaxCe { out, .. }
            | Step::MaxPool2 { out, .. }
            | Step::Upsample2 { out, .. }
            | Step::ConcatChannels { out, .. }
            | Step::Add { out, .. }
            | Step::Sub { out, .. }
            | Step::Mul { out, .. }
            | Step::Scale { out, .. }
            | Step::Sum { out, .. }
            | Step::Mean { out, .. }
            | Step::Gather { out, .. }
            | Step::SqrtShift { out, .. }
            | Step::GlobalAvgPool { out, .. }
            | Step::Linear { out, .. } => *out,
        }
    }
}

/// Wengert tape: ops are appended in execution order, so inputs always
/// precede their consumers and one reverse sweep computes all gradients.
pub struct Graph<S: Scalar> {
    vals: Vec<Tensor<S>>,
    grads: Vec<Option<Tensor<S>>>,
    requires: Vec<bool>,
    steps: Vec<Step<S>>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { vals: Vec::new(), grads: Vec::new(), requires: Vec::new(), steps: Vec::new() }
    }

    fn push(&mut self, value: Tensor<S>, requires: bool) -> Var {
        self.vals.push(value);
        self.grads.push(None);
        self.requires.push(requires);
        Var(self.vals.len() - 1)
    }

    /// Register a differentiable input (parameter or data).
    pub fn leaf(&mut self, value: Tensor<S>, requires_grad: bool) -> Var {
        self.push(value, requires_grad)
    }

    /// Register a non-differentiable input.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.vals[v.0]
    }

    pub fn grad(&self, v: Var) -> Option<&Tensor<S>> {
        self.grads[v.0].as_ref()
    }

    pub fn take_grad(&mut self, v: Var) -> Option<Tensor<S>> {
        self.grads[v.0].take()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.requires[v.0]
    }

    pub fn num_steps(&self) -> usize {
        self.steps.len()
    }

    fn finish(&mut self, op: &'static str, out: Tensor<S>, requires: bool) -> Result<Var> {
        if !out.all_finite() {
            return Err(Error::Numeric { op, detail: "non-finite output".into() });
        }
        Ok(self.push(out, requires))
    }

    fn any_requires(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.requires[v.0])
    }

    // ---- ops ---------------------------------------------------------

    /// Cross-correlation (no kernel flip) with bias, NCHW layout.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, spec: &ConvSpec) -> Result<Var> {
        let (n, ci, h, wd) = self.vals[x.0].dims4()?;
        let ws = self.vals[w.0].shape();
        let expect_w = [spec.out_channels, spec.in_channels, spec.kernel.0, spec.kernel.1];
        if ws != expect_w {
            return Err(Error::config(format!(
                "conv weight shape {:?} does not match spec {:?}",
                ws, expect_w
            )));
        }
        if ci != spec.in_channels {
            return Err(Error::config(format!(
                "conv input has {} channels, spec expects {}",
                ci, spec.in_channels
            )));
        }
        if self.vals[b.0].shape() != [spec.out_channels] {
            return Err(Error::config(format!(
                "conv bias shape {:?}, expected [{}]",
                self.vals[b.0].shape(),
                spec.out_channels
            )));
        }
        let (ho, wo) = spec.out_size(h, wd)?;
        let out = conv::conv2d_forward(&self.vals[x.0], &self.vals[w.0], &self.vals[b.0], spec, ho, wo);
        let _ = n;
        let requires = self.any_requires(&[x, w, b]);
        let v = self.finish("conv2d", out, requires)?;
        self.steps.push(Step::Conv2d { x, w, b, out: v, spec: spec.clone() });
        Ok(v)
    }

    /// Elementwise max(x, slope*x). Slope must lie in (0, 1).
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var> {
        if !(slope > 0.0 && slope < 1.0) {
            return Err(Error::config(format!("leaky_relu slope {} outside (0,1)", slope)));
        }
        let s = S::from_f64(slope);
        let out = self.vals[x.0].map(|v| if v >= S::zero() { v } else { v * s });
        let requires = self.requires[x.0];
        let v = self.finish("leaky_relu", out, requires)?;
        self.steps.push(Step::LeakyRelu { x, out: v, slope: s });
        Ok(v)
    }

    /// Elementwise logistic function 1/(1+e^-x).
    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let one = S::one();
        let out = self.vals[x.0].map(|v| one / (one + (-v).exp()));
        let requires = self.requires[x.0];
        let v = self.finish("sigmoid", out, requires)?;
        self.steps.push(Step::Sigmoid { x, out: v });
        Ok(v)
    }

    /// Mean over rows of -log softmax(logits)[target], max-stabilized.
    /// `logits` is (N, K) with K >= 2; every target must be < K.
    pub fn softmax_ce(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (n, k) = self.vals[logits.0].dims2()?;
        if k < 2 {
            return Err(Error::config(format!("softmax_ce needs K >= 2, got {}", k)));
        }
        if targets.len() != n {
            return Err(Error::input(format!("{} targets for {} rows", targets.len(), n)));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= k) {
            return Err(Error::input(format!("class target {} out of range [0,{})", bad, k)));
        }
        let ls = self.vals[logits.0].data();
        let mut probs = Tensor::zeros(vec![n, k]);
        let pd = probs.data_mut();
        let mut loss = S::zero();
        for row in 0..n {
            let src = &ls[row * k..(row + 1) * k];
            let mut mx = src[0];
            for &v in src {
                mx = mx.maximum(v);
            }
            let mut denom = S::zero();
            for (j, &v) in src.iter().enumerate() {
                let e = (v - mx).exp();
                pd[row * k + j] = e;
                denom += e;
            }
            for j in 0..k {
                pd[row * k + j] = pd[row * k + j] / denom;
            }
            loss += -(pd[row * k + targets[row]].ln());
        }
        loss = loss / S::from_f64(n as f64);
        let requires = self.requires[logits.0];
        let v = self.finish("softmax_ce", Tensor::scalar(loss), requires)?;
        self.steps.push(Step::SoftmaxCe { logits, out: v, targets: targets.to_vec(), probs });
        Ok(v)
    }

    /// 2x2 max pool, stride 2. H and W must be even.
    pub fn maxpool2(&mut self, x: Var) -> Result<Var> {
        let (_, _, h, w) = self.vals[x.0].dims4()?;
        if h % 2 != 0 || w % 2 != 0 {
            return Err(Error::config(format!("maxpool2 requires even extents, got {}x{}", h, w)));
        }
        let (out, argmax) = conv::maxpool2_forward(&self.vals[x.0]);
        let requires = self.requires[x.0];
        let v = self.finish("maxpool2", out, requires)?;
        self.steps.push(Step::MaxPool2 { x, out: v, argmax });
        Ok(v)
    }

    /// Nearest-neighbor 2x upsampling.
    pub fn upsample2_nn(&mut self, x: Var) -> Result<Var> {
        self.vals[x.0].dims4()?;
        let out = conv::upsample2_forward(&self.vals[x.0]);
        let requires = self.requires[x.0];
        let v = self.finish("upsample2_nn", out, requires)?;
        self.steps.push(Step::Upsample2 { x, out: v });
        Ok(v)
    }

    /// Concatenate along the channel axis; a occupies channels [0, Ca).
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (na, ca, ha, wa) = self.vals[a.0].dims4()?;
        let (nb, cb, hb, wb) = self.vals[b.0].dims4()?;
        if (na, ha, wa) != (nb, hb, wb) {
            return Err(Error::config(format!(
                "concat_channels spatial mismatch: {:?} vs {:?}",
                self.vals[a.0].shape(),
                self.vals[b.0].shape()
            )));
        }
        let mut out = Tensor::zeros(vec![na, ca + cb, ha, wa]);
        let plane = ha * wa;
        let ad = self.vals[a.0].data();
        let bd = self.vals[b.0].data();
        let od = out.data_mut();
        for img in 0..na {
            let dst = &mut od[img * (ca + cb) * plane..(img + 1) * (ca + cb) * plane];
            dst[..ca * plane].copy_from_slice(&ad[img * ca * plane..(img + 1) * ca * plane]);
            dst[ca * plane..].copy_from_slice(&bd[img * cb * plane..(img + 1) * cb * plane]);
        }
        let requires = self.any_requires(&[a, b]);
        let v = self.finish("concat_channels", out, requires)?;
        self.steps.push(Step::ConcatChannels { a, b, out: v });
        Ok(v)
    }

    fn binary(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(S, S) -> S) -> Result<Tensor<S>> {
        if self.vals[a.0].shape() != self.vals[b.0].shape() {
            return Err(Error::config(format!(
                "{} shape mismatch: {:?} vs {:?}",
                op,
                self.vals[a.0].shape(),
                self.vals[b.0].shape()
            )));
        }
        let ad = self.vals[a.0].data();
        let bd = self.vals[b.0].data();
        let data: Vec<S> = ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(self.vals[a.0].shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("add", a, b, |x, y| x + y)?;
        let requires = self.any_requires(&[a, b]);
        let v = self.finish("add", out, requires)?;
        self.steps.push(Step::Add { a, b, out: v });
        Ok(v)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("sub", a, b, |x, y| x - y)?;
        let requires = self.any_requires(&[a, b]);
        let v = self.finish("sub", out, requires)?;
        self.steps.push(Step::Sub { a, b, out: v });
        Ok(v)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary("mul", a, b, |x, y| x * y)?;
        let requires = self.any_requires(&[a, b]);
        let v = self.finish("mul", out, requires)?;
        self.steps.push(Step::Mul { a, b, out: v });
        Ok(v)
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Result<Var> {
        let f = S::from_f64(factor);
        let out = self.vals[x.0].map(|v| v * f);
        let requires = self.requires[x.0];
        let v = self.finish("scale", out, requires)?;
        self.steps.push(Step::Scale { x, out: v, factor: f });
        Ok(v)
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let mut acc = S::zero();
        for &v in self.vals[x.0].data() {
            acc += v;
        }
        let requires = self.requires[x.0];
        let v = self.finish("sum", Tensor::scalar(acc), requires)?;
        self.steps.push(Step::Sum { x, out: v });
        Ok(v)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let n = self.vals[x.0].numel();
        if n == 0 {
            return Err(Error::usage("mean of empty tensor"));
        }
        let mut acc = S::zero();
        for &v in self.vals[x.0].data() {
            acc += v;
        }
        let out = Tensor::scalar(acc / S::from_f64(n as f64));
        let requires = self.requires[x.0];
        let v = self.finish("mean", out, requires)?;
        self.steps.push(Step::Mean { x, out: v });
        Ok(v)
    }

    /// out[k] = x.flat[idx[k]], reshaped to `out_shape`. Duplicate indices
    /// accumulate gradient on the shared source element.
    pub fn gather(&mut self, x: Var, idx: Vec<usize>, out_shape: Vec<usize>) -> Result<Var> {
        let numel: usize = out_shape.iter().product();
        if numel != idx.len() {
            return Err(Error::config(format!(
                "gather: {} indices cannot fill shape {:?}",
                idx.len(),
                out_shape
            )));
        }
        let xd = self.vals[x.0].data();
        if let Some(&bad) = idx.iter().find(|&&i| i >= xd.len()) {
            return Err(Error::input(format!("gather index {} out of bounds ({})", bad, xd.len())));
        }
        let data: Vec<S> = idx.iter().map(|&i| xd[i]).collect();
        let out = Tensor::new(out_shape, data)?;
        let requires = self.requires[x.0];
        let v = self.finish("gather", out, requires)?;
        self.steps.push(Step::Gather { x, out: v, idx });
        Ok(v)
    }

    /// Elementwise sqrt(x + eps); eps keeps the derivative finite at 0.
    pub fn sqrt_shift(&mut self, x: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::config("sqrt_shift eps must be positive".to_string()));
        }
        let e = S::from_f64(eps);
        let out = self.vals[x.0].map(|v| (v + e).sqrt());
        let requires = self.requires[x.0];
        let v = self.finish("sqrt_shift", out, requires)?;
        self.steps.push(Step::SqrtShift { x, out: v });
        Ok(v)
    }

    /// (N, C, H, W) -> (N, C) mean over the spatial extent.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.vals[x.0].dims4()?;
        let plane = h * w;
        let xd = self.vals[x.0].data();
        let inv = S::from_f64(1.0 / plane as f64);
        let mut out = Tensor::zeros(vec![n, c]);
        let od = out.data_mut();
        for img in 0..n {
            for ch in 0..c {
                let mut acc = S::zero();
                for &v in &xd[(img * c + ch) * plane..(img * c + ch + 1) * plane] {
                    acc += v;
                }
                od[img * c + ch] = acc * inv;
            }
        }
        let requires = self.requires[x.0];
        let v = self.finish("global_avg_pool", out, requires)?;
        self.steps.push(Step::GlobalAvgPool { x, out: v });
        Ok(v)
    }

    /// Fully-connected layer: (N, D) x (D, K) + b -> (N, K).
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (n, d) = self.vals[x.0].dims2()?;
        let (dw, k) = self.vals[w.0].dims2()?;
        if d != dw {
            return Err(Error::config(format!("linear: input dim {} vs weight dim {}", d, dw)));
        }
        if self.vals[b.0].shape() != [k] {
            return Err(Error::config(format!(
                "linear bias shape {:?}, expected [{}]",
                self.vals[b.0].shape(),
                k
            )));
        }
        let mut out = Tensor::zeros(vec![n, k]);
        S::gemm(
            n,
            d,
            k,
            S::one(),
            self.vals[x.0].data(),
            d as isize,
            1,
            self.vals[w.0].data(),
            k as isize,
            1,
            S::zero(),
            out.data_mut(),
            k as isize,
            1,
        );
        {
            let bd = self.vals[b.0].data().to_vec();
            let od = out.data_mut();
            for row in 0..n {
                for (j, &bv) in bd.iter().enumerate() {
                    od[row * k + j] += bv;
                }
            }
        }
        let requires = self.any_requires(&[x, w, b]);
        let v = self.finish("linear", out, requires)?;
        self.steps.push(Step::Linear { x, w, b, out: v });
        Ok(v)
    }

    // ---- backward ----------------------------------------------------

    fn accum(
        grads: &mut [Option<Tensor<S>>],
        requires: &[bool],
        vals: &[Tensor<S>],
        var: Var,
        write: impl FnOnce(&mut Tensor<S>),
    ) {
        if !requires[var.0] {
            return;
        }
        let slot = &mut grads[var.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(vals[var.0].shape().to_vec()));
        }
        write(slot.as_mut().unwrap());
    }

    /// Reverse sweep from a scalar loss. Populates the grad of every
    /// `requires_grad` leaf reachable from it; repeated calls accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::usage("backward on an empty tape"));
        }
        if self.vals[loss.0].numel() != 1 {
            return Err(Error::usage(format!(
                "backward expects a scalar loss, got shape {:?}",
                self.vals[loss.0].shape()
            )));
        }
        // Intermediate grads are per-sweep scratch; only leaf grads persist,
        // so repeated calls accumulate exactly one extra dL/dleaf each.
        for si in 0..self.steps.len() {
            let out = self.steps[si].out();
            self.grads[out.0] = None;
        }
        self.grads[loss.0] = Some(Tensor::scalar(S::one()));

        for si in (0..self.steps.len()).rev() {
            let out = self.steps[si].out();
            let g = match self.grads[out.0].take() {
                Some(g) => g,
                None => continue,
            };
            let vals = &self.vals;
            let requires = &self.requires;
            let grads = &mut self.grads;
            match &self.steps[si] {
                Step::Conv2d { x, w, b, spec, .. } => {
                    let need_dx = requires[x.0];
                    let need_dw = requires[w.0];
                    let need_db = requires[b.0];
                    let parts = conv::conv2d_backward(
                        &vals[x.0], &vals[w.0], &g, spec, need_dx, need_dw, need_db,
                    );
                    if let Some(dx) = parts.dx {
                        Self::accum(grads, requires, vals, *x, |t| add_into(t, &dx));
                    }
                    if let Some(dw) = parts.dw {
                        Self::accum(grads, requires, vals, *w, |t| add_into(t, &dw));
                    }
                    if let Some(db) = parts.db {
                        Self::accum(grads, requires, vals, *b, |t| add_into(t, &db));
                    }
                }
                Step::LeakyRelu { x, slope, .. } => {
                    let xv = vals[x.0].data();
                    let gd = g.data();
                    let slope = *slope;
                    Self::accum(grads, requires, vals, *x, |t| {
                        for (i, d) in t.data_mut().iter_mut().enumerate() {
                            *d += if xv[i] >= S::zero() { gd[i] } else { gd[i] * slope };
                        }
                    });
                }
                Step::Sigmoid { x, out } => {
                    let yv = vals[out.0].data();
                    let gd = g.data();
                    Self::accum(grads, requires, vals, *x, |t| {
                        for (i, d) in t.data_mut().iter_mut().enumerate() {
                            *d += gd[i] * yv[i] * (S::one() - yv[i]);
                        }
                    });
                }
                Step::SoftmaxCe { logits, targets, probs, .. } => {
                    let (n, k) = vals[logits.0].dims2().expect("checked in forward");
                    let gv = g.item();
                    let inv_n = S::from_f64(1.0 / n as f64);
                    let pd = probs.data();
                    Self::accum(grads, requires, vals, *logits, |t| {
                        let td = t.data_mut();
                        for row in 0..n {
                            for j in 0..k {
                                let ind = if targets[row] == j { S::one() } else { S::zero() };
                                td[row * k + j] += gv * inv_n * (pd[row * k + j] - ind);
                            }
                        }
                    });
                }
                Step::MaxPool2 { x, argmax, .. } => {
                    Self::accum(grads, requires, vals, *x, |t| {
                        conv::maxpool2_backward(&g, argmax, t)
                    });
                }
                Step::Upsample2 { x, .. } => {
                    Self::accum(grads, requires, vals, *x, |t| conv::upsample2_backward(&g, t));
                }
                Step::ConcatChannels { a, b, .. } => {
                    let (n, ca, h, w) = vals[a.0].dims4().expect("checked in forward");
                    let cb = vals[b.0].shape()[1];
                    let plane = h * w;
                    let gd = g.data();
                    Self::accum(grads, requires, vals, *a, |t| {
                        let td = t.data_mut();
                        for img in 0..n {
                            let src = &gd[img * (ca + cb) * plane..];
                            for i in 0..ca * plane {
                                td[img * ca * plane + i] += src[i];
                            }
                        }
                    });
                    Self::accum(grads, requires, vals, *b, |t| {
                        let td = t.data_mut();
                        for img in 0..n {
                            let src = &gd[img * (ca + cb) * plane + ca * plane..];
                            for i in 0..cb * plane {
                                td[img * cb * plane + i] += src[i];
                            }
                        }
                    });
                }
                Step::Add { a, b, .. } => {
                    Self::accum(grads, requires, vals, *a, |t| add_into(t, &g));
                    Self::accum(grads, requires, vals, *b, |t| add_into(t, &g));
                }
                Step::Sub { a, b, .. } => {
                    Self::accum(grads, requires, vals, *a, |t| add_into(t, &g));
                    Self::accum(grads, requires, vals, *b, |t| {
                        for (d, &s) in t.data_mut().iter_mut().zip(g.data()) {
                            *d += -s;
                        }
                    });
                }
                Step::Mul { a, b, .. } => {
                    let av = vals[a.0].data();
                    let bv = vals[b.0].data();
                    let gd = g.data();
                    Self::accum(grads, requires, vals, *a, |t| {
                        for (i, d) in t.data_mut().iter_mut().enumerate() {
                            *d += gd[i] * bv[i];
                        }
                    });
                    Self::accum(grads, requires, vals, *b, |t| {
                        for (i, d) in t.data_mut().iter_mut().enumerate() {
                            *d += gd[i] * av[i];
                        }
                    });
                }
                Step::Scale { x, factor, .. } => {
                    let f = *factor;
                    let gd = g.data();
                    Self::accum(grads, requires, vals, *x, |t| {
                        for (d, &s) in t.data_mut().iter_mut().zip(gd) {
                            *d += s * f;
                        }
                    });
                }
                Step::Sum { x, .. } => {
                    let gv = g.item();
                    Self::accum(grads, requires, vals, *x, |t| {
                        for d in t.data_mut() {
                            *d += gv;
                        }
                    });
                }
                Step::Mean { x, .. } => {
                    let gv = g.item() * S::from_f64(1.0 / vals[x.0].numel() as f64);
                    Self::accum(grads, requires, vals, *x, |t| {
                        for d in t.data_mut() {
                            *d += gv;
                        }
                    });
                }
                Step::Gather { x, idx, .. } => {
                    let gd = g.data();
                    Self::accum(grads, requires, vals, *x, |t| {
                        let td = t.data_mut();
                        for (k, &i) in idx.iter().enumerate() {
                            td[i] += gd[k];
                        }
                    });
                }
                Step::SqrtShift { x, out } => {
                    let yv = vals[out.0].data();
                    let gd = g.data();
                    let half = S::from_f64(0.5);
                    Self::accum(grads, requires, vals, *x, |t| {
                        for (i, d) in t.data_mut().iter_mut().enumerate() {
                            *d += gd[i] * half / yv[i];
                        }
                    });
                }
                Step::GlobalAvgPool { x, .. } => {
                    let (n, c, h, w) = vals[x.0].dims4().expect("checked in forward");
                    let plane = h * w;
                    let inv = S::from_f64(1.0 / plane as f64);
                    let gd = g.data();
                    Self::accum(grads, requires, vals, *x, |t| {
                        let td = t.data_mut();
                        for img in 0..n {
                            for ch in 0..c {
                                let gv = gd[img * c + ch] * inv;
                                for d in &mut td[(img * c + ch) * plane..(img * c + ch + 1) * plane] {
                                    *d += gv;
                                }
                            }
                        }
                    });
                }
                Step::Linear { x, w, b, .. } => {
                    let (n, d) = vals[x.0].dims2().expect("checked in forward");
                    let k = vals[w.0].shape()[1];
                    let gd = g.data();
                    Self::accum(grads, requires, vals, *x, |t| {
                        // dX = G (n,k) * W^T (k,d)
                        S::gemm(
                            n,
                            k,
                            d,
                            S::one(),
                            gd,
                            k as isize,
                            1,
                            vals[w.0].data(),
                            1,
                            k as isize,
                            S::one(),
                            t.data_mut(),
                            d as isize,
                            1,
                        );
                    });
                    Self::accum(grads, requires, vals, *w, |t| {
                        // dW = X^T (d,n) * G (n,k)
                        S::gemm(
                            d,
                            n,
                            k,
                            S::one(),
                            vals[x.0].data(),
                            1,
                            d as isize,
                            gd,
                            k as isize,
                            1,
                            S::one(),
                            t.data_mut(),
                            k as isize,
                            1,
                        );
                    });
                    Self::accum(grads, requires, vals, *b, |t| {
                        let td = t.data_mut();
                        for row in 0..n {
                            for j in 0..k {
                                td[j] += gd[row * k + j];
                            }
                        }
                    });
                }
            }
            self.grads[out.0] = Some(g);
        }
        Ok(())
    }
}

fn add_into<S: Scalar>(dst: &mut Tensor<S>, src: &Tensor<S>) {
    debug_assert_eq!(dst.shape(), src.shape());
    for (d, &s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}
