//! Variational optical flow in the Horn-Schunck family: brightness
//! constancy plus lambda-weighted smoothness, solved by Jacobi iteration
//! with coarse-to-fine warping. Non-trainable, deterministic, off-tape.

use super::FlowField;

#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct ClassicalFlowParams {
    /// Smoothness weight (the alpha^2 term): larger means smoother flow.
    pub lambda: f32,
    /// Jacobi iterations per pyramid level.
    pub iterations: usize,
    /// Coarse-to-fine pyramid levels (including the full resolution).
    pub levels: usize,
}

impl Default for ClassicalFlowParams {
    fn default() -> Self {
        ClassicalFlowParams { lambda: 0.5, iterations: 100, levels: 3 }
    }
}

fn to_luma(frame: &[f32], channels: usize, plane: usize) -> Vec<f32> {
    if channels == 1 {
        return frame[..plane].to_vec();
    }
    let inv = 1.0 / channels as f32;
    (0..plane)
        .map(|i| (0..channels).map(|c| frame[c * plane + i]).sum::<f32>() * inv)
        .collect()
}

fn downsample2(src: &[f32], h: usize, w: usize) -> (Vec<f32>, usize, usize) {
    let (ho, wo) = (h / 2, w / 2);
    let mut out = vec![0.0f32; ho * wo];
    for y in 0..ho {
        for x in 0..wo {
            out[y * wo + x] = 0.25
                * (src[(2 * y) * w + 2 * x]
                    + src[(2 * y) * w + 2 * x + 1]
                    + src[(2 * y + 1) * w + 2 * x]
                    + src[(2 * y + 1) * w + 2 * x + 1]);
        }
    }
    (out, ho, wo)
}

fn sample_bilinear(img: &[f32], h: usize, w: usize, x: f32, y: f32) -> f32 {
    let x = x.clamp(0.0, (w - 1) as f32);
    let y = y.clamp(0.0, (h - 1) as f32);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f32;
    let fy = y - y0 as f32;
    let a = img[y0 * w + x0];
    let b = img[y0 * w + x1];
    let c = img[y1 * w + x0];
    let d = img[y1 * w + x1];
    a * (1.0 - fx) * (1.0 - fy) + b * fx * (1.0 - fy) + c * (1.0 - fx) * fy + d * fx * fy
}

/// 4-neighbor average with clamped borders (the HS neighborhood mean).
fn neighbor_avg(f: &[f32], h: usize, w: usize, out: &mut [f32]) {
    for y in 0..h {
        for x in 0..w {
            let up = f[y.saturating_sub(1) * w + x];
            let down = f[(y + 1).min(h - 1) * w + x];
            let left = f[y * w + x.saturating_sub(1)];
            let right = f[y * w + (x + 1).min(w - 1)];
            out[y * w + x] = 0.25 * (up + down + left + right);
        }
    }
}

fn solve_level(
    f0: &[f32],
    f1_warped: &[f32],
    h: usize,
    w: usize,
    lambda: f32,
    iterations: usize,
    du: &mut [f32],
    dv: &mut [f32],
) {
    let n = h * w;
    // gradients of the average image, central differences clamped at borders
    let mut ix = vec![0.0f32; n];
    let mut iy = vec![0.0f32; n];
    let mut it = vec![0.0f32; n];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            let avg = |img: &[f32], yy: usize, xx: usize| img[yy * w + xx];
            let xr = (x + 1).min(w - 1);
            let xl = x.saturating_sub(1);
            let yd = (y + 1).min(h - 1);
            let yu = y.saturating_sub(1);
            let gx = 0.5
                * ((avg(f0, y, xr) - avg(f0, y, xl)) + (avg(f1_warped, y, xr) - avg(f1_warped, y, xl)))
                * 0.5;
            let gy = 0.5
                * ((avg(f0, yd, x) - avg(f0, yu, x)) + (avg(f1_warped, yd, x) - avg(f1_warped, yu, x)))
                * 0.5;
            ix[i] = gx;
            iy[i] = gy;
            it[i] = f1_warped[i] - f0[i];
        }
    }
    let mut ubar = vec![0.0f32; n];
    let mut vbar = vec![0.0f32; n];
    for _ in 0..iterations {
        neighbor_avg(du, h, w, &mut ubar);
        neighbor_avg(dv, h, w, &mut vbar);
        for i in 0..n {
            let denom = lambda + ix[i] * ix[i] + iy[i] * iy[i];
            let t = (ix[i] * ubar[i] + iy[i] * vbar[i] + it[i]) / denom;
            du[i] = ubar[i] - ix[i] * t;
            dv[i] = vbar[i] - iy[i] * t;
        }
    }
}

/// Estimate flow from frame `f0` to `f1`, both (C, H, W) in [0,1].
pub fn classical_flow(
    f0: &[f32],
    f1: &[f32],
    channels: usize,
    h: usize,
    w: usize,
    p: &ClassicalFlowParams,
) -> FlowField {
    let plane = h * w;
    let g0 = to_luma(f0, channels, plane);
    let g1 = to_luma(f1, channels, plane);

    // pyramids, level 0 = full resolution
    let mut pyr0 = vec![(g0, h, w)];
    let mut pyr1 = vec![(g1, h, w)];
    for l in 1..p.levels.max(1) {
        let (prev0, ph, pw) = &pyr0[l - 1];
        if ph / 2 < 4 || pw / 2 < 4 {
            break;
        }
        pyr0.push(downsample2(prev0, *ph, *pw));
        let (prev1, ph, pw) = &pyr1[l - 1];
        pyr1.push(downsample2(prev1, *ph, *pw));
    }

    let coarsest = pyr0.len() - 1;
    let (_, ch, cw) = pyr0[coarsest];
    let mut u = vec![0.0f32; ch * cw];
    let mut v = vec![0.0f32; ch * cw];

    for l in (0..=coarsest).rev() {
        let (l0, lh, lw) = &pyr0[l];
        let (l1, _, _) = &pyr1[l];
        if l != coarsest {
            // upsample flow from the previous (coarser) level, scale by 2
            let (ph, pw) = (lh / 2, lw / 2);
            let mut nu = vec![0.0f32; lh * lw];
            let mut nv = vec![0.0f32; lh * lw];
            for y in 0..*lh {
                for x in 0..*lw {
                    let sx = (x as f32 + 0.5) / 2.0 - 0.5;
                    let sy = (y as f32 + 0.5) / 2.0 - 0.5;
                    nu[y * lw + x] = 2.0 * sample_bilinear(&u, ph, pw, sx, sy);
                    nv[y * lw + x] = 2.0 * sample_bilinear(&v, ph, pw, sx, sy);
                }
            }
            u = nu;
            v = nv;
        }
        // warp f1 by the current flow, solve for the residual, accumulate
        let mut warped = vec![0.0f32; lh * lw];
        for y in 0..*lh {
            for x in 0..*lw {
                let i = y * lw + x;
                warped[i] = sample_bilinear(l1, *lh, *lw, x as f32 + u[i], y as f32 + v[i]);
            }
        }
        let mut du = vec![0.0f32; lh * lw];
        let mut dv = vec![0.0f32; lh * lw];
        solve_level(l0, &warped, *lh, *lw, p.lambda, p.iterations.max(1), &mut du, &mut dv);
        for i in 0..lh * lw {
            u[i] += du[i];
            v[i] += dv[i];
        }
    }

    let mut uv = u;
    uv.extend_from_slice(&v);
    FlowField { h, w, uv }
}
