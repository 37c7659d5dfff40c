//! Dense kernels behind the graph ops: im2col convolution, 2x2 max-pool and
//! nearest-neighbor upsampling, each with its backward counterpart.
//!
//! Work is split per batch image (rayon) with per-image buffers; reductions
//! across images run sequentially in index order so results are bit-identical
//! for any thread count.

use rayon::prelude::*;

use super::tensor::idx4;
use super::{ConvSpec, Scalar, Tensor};

/// Lower one image into a (Ci*kh*kw, Ho*Wo) patch matrix.
fn im2col<S: Scalar>(
    x: &[S],
    ci: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    ho: usize,
    wo: usize,
    col: &mut [S],
) {
    let (kh, kw) = spec.kernel;
    let stride = spec.stride;
    let pad = spec.padding as isize;
    let patch = ho * wo;
    debug_assert_eq!(col.len(), ci * kh * kw * patch);
    let mut row = 0usize;
    for c in 0..ci {
        let chan = &x[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let out = &mut col[row * patch..(row + 1) * patch];
                row += 1;
                for oy in 0..ho {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    let dst = &mut out[oy * wo..(oy + 1) * wo];
                    if iy < 0 || iy >= h as isize {
                        dst.fill(S::zero());
                        continue;
                    }
                    let src_row = &chan[iy as usize * w..(iy as usize + 1) * w];
                    for (ox, d) in dst.iter_mut().enumerate() {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        *d = if ix < 0 || ix >= w as isize {
                            S::zero()
                        } else {
                            src_row[ix as usize]
                        };
                    }
                }
            }
        }
    }
}

/// Scatter a (Ci*kh*kw, Ho*Wo) patch-gradient matrix back onto the input image.
fn col2im_add<S: Scalar>(
    col: &[S],
    ci: usize,
    h: usize,
    w: usize,
    spec: &ConvSpec,
    ho: usize,
    wo: usize,
    dx: &mut [S],
) {
    let (kh, kw) = spec.kernel;
    let stride = spec.stride;
    let pad = spec.padding as isize;
    let patch = ho * wo;
    let mut row = 0usize;
    for c in 0..ci {
        let chan = &mut dx[c * h * w..(c + 1) * h * w];
        for ky in 0..kh {
            for kx in 0..kw {
                let src = &col[row * patch..(row + 1) * patch];
                row += 1;
                for oy in 0..ho {
                    let iy = (oy * stride) as isize + ky as isize - pad;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let base = iy as usize * w;
                    for ox in 0..wo {
                        let ix = (ox * stride) as isize + kx as isize - pad;
                        if ix >= 0 && ix < w as isize {
                            chan[base + ix as usize] += src[oy * wo + ox];
                        }
                    }
                }
            }
        }
    }
}

/// Cross-correlation forward: out[n,co] = sum_ci W[co,ci] * x[n,ci] + b[co].
pub fn conv2d_forward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: &Tensor<S>,
    spec: &ConvSpec,
    ho: usize,
    wo: usize,
) -> Tensor<S> {
    let (n, ci, h, wd) = x.dims4().expect("validated by caller");
    let co = spec.out_channels;
    let kdim = ci * spec.kernel.0 * spec.kernel.1;
    let patch = ho * wo;
    let mut out = Tensor::zeros(vec![n, co, ho, wo]);
    let in_plane = ci * h * wd;
    let out_plane = co * patch;

    let xs = x.data();
    let ws = w.data();
    let bs = b.data();
    out.data_mut()
        .par_chunks_mut(out_plane)
        .enumerate()
        .for_each(|(img, dst)| {
            let mut col = vec![S::zero(); kdim * patch];
            im2col(&xs[img * in_plane..(img + 1) * in_plane], ci, h, wd, spec, ho, wo, &mut col);
            S::gemm(
                co,
                kdim,
                patch,
                S::one(),
                ws,
                kdim as isize,
                1,
                &col,
                patch as isize,
                1,
                S::zero(),
                dst,
                patch as isize,
                1,
            );
            for c in 0..co {
                let bias = bs[c];
                for v in &mut dst[c * patch..(c + 1) * patch] {
                    *v += bias;
                }
            }
        });
    out
}

pub struct ConvGrads<S> {
    pub dx: Option<Tensor<S>>,
    pub dw: Option<Tensor<S>>,
    pub db: Option<Tensor<S>>,
}

/// Backward pass; each of dx/dw/db is computed only when requested.
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    g: &Tensor<S>,
    spec: &ConvSpec,
    need_dx: bool,
    need_dw: bool,
    need_db: bool,
) -> ConvGrads<S> {
    let (n, ci, h, wd) = x.dims4().expect("validated by caller");
    let (_, co, ho, wo) = g.dims4().expect("grad shape matches forward output");
    let kdim = ci * spec.kernel.0 * spec.kernel.1;
    let patch = ho * wo;
    let in_plane = ci * h * wd;
    let out_plane = co * patch;
    let xs = x.data();
    let ws = w.data();
    let gs = g.data();

    // Per-image partials, reduced sequentially afterwards.
    let parts: Vec<(Option<Vec<S>>, Option<Vec<S>>, Option<Vec<S>>)> = (0..n)
        .into_par_iter()
        .map(|img| {
            let gimg = &gs[img * out_plane..(img + 1) * out_plane];
            let mut dw_part = None;
            let mut dx_part = None;
            let mut db_part = None;
            if need_dw || need_dx {
                let mut col = vec![S::zero(); kdim * patch];
                if need_dw {
                    im2col(
                        &xs[img * in_plane..(img + 1) * in_plane],
                        ci,
                        h,
                        wd,
                        spec,
                        ho,
                        wo,
                        &mut col,
                    );
                    let mut dw = vec![S::zero(); co * kdim];
                    // dW = g (co,patch) * col^T (patch,kdim)
                    S::gemm(
                        co,
                        patch,
                        kdim,
                        S::one(),
                        gimg,
                        patch as isize,
                        1,
                        &col,
                        1,
                        patch as isize,
                        S::zero(),
                        &mut dw,
                        kdim as isize,
                        1,
                    );
                    dw_part = Some(dw);
                }
                if need_dx {
                    // dcol = W^T (kdim,co) * g (co,patch)
                    let mut dcol = vec![S::zero(); kdim * patch];
                    S::gemm(
                        kdim,
                        co,
                        patch,
                        S::one(),
                        ws,
                        1,
                        kdim as isize,
                        gimg,
                        patch as isize,
                        1,
                        S::zero(),
                        &mut dcol,
                        patch as isize,
                        1,
                    );
                    let mut dx = vec![S::zero(); in_plane];
                    col2im_add(&dcol, ci, h, wd, spec, ho, wo, &mut dx);
                    dx_part = Some(dx);
                }
            }
            if need_db {
                let mut db = vec![S::zero(); co];
                for c in 0..co {
                    let mut acc = S::zero();
                    for &v in &gimg[c * patch..(c + 1) * patch] {
                        acc += v;
                    }
                    db[c] = acc;
                }
                db_part = Some(db);
            }
            (dx_part, dw_part, db_part)
        })
        .collect();

    let mut dx = need_dx.then(|| Tensor::zeros(vec![n, ci, h, wd]));
    let mut dw = need_dw.then(|| Tensor::zeros(w.shape().to_vec()));
    let mut db = need_db.then(|| Tensor::zeros(b_shape(co)));
    for (img, (dx_p, dw_p, db_p)) in parts.into_iter().enumerate() {
        if let (Some(dst), Some(src)) = (dx.as_mut(), dx_p) {
            dst.data_mut()[img * in_plane..(img + 1) * in_plane]
                .iter_mut()
                .zip(src)
                .for_each(|(d, s)| *d += s);
        }
        if let (Some(dst), Some(src)) = (dw.as_mut(), dw_p) {
            dst.data_mut().iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
        if let (Some(dst), Some(src)) = (db.as_mut(), db_p) {
            dst.data_mut().iter_mut().zip(src).for_each(|(d, s)| *d += s);
        }
    }
    ConvGrads { dx, dw, db }
}

fn b_shape(co: usize) -> Vec<usize> {
    vec![co]
}

/// 2x2 stride-2 max pool. Ties resolve to the first element in row-major
/// scan order; `argmax` records the flat input index per output element.
pub fn maxpool2_forward<S: Scalar>(x: &Tensor<S>) -> (Tensor<S>, Vec<u32>) {
    let (n, c, h, w) = x.dims4().expect("validated by caller");
    let (ho, wo) = (h / 2, w / 2);
    let mut out = Tensor::zeros(vec![n, c, ho, wo]);
    let mut argmax = vec![0u32; out.numel()];
    let xs = x.data();
    let od = out.data_mut();
    for img in 0..n {
        for ch in 0..c {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut best_idx = idx4(c, h, w, img, ch, oy * 2, ox * 2);
                    let mut best = xs[best_idx];
                    for (dy, dx) in [(0usize, 1usize), (1, 0), (1, 1)] {
                        let i = idx4(c, h, w, img, ch, oy * 2 + dy, ox * 2 + dx);
                        if xs[i] > best {
                            best = xs[i];
                            best_idx = i;
                        }
                    }
                    let o = idx4(c, ho, wo, img, ch, oy, ox);
                    od[o] = best;
                    argmax[o] = best_idx as u32;
                }
            }
        }
    }
    (out, argmax)
}

pub fn maxpool2_backward<S: Scalar>(g: &Tensor<S>, argmax: &[u32], dx: &mut Tensor<S>) {
    let gd = g.data();
    let dxd = dx.data_mut();
    for (o, &src) in argmax.iter().enumerate() {
        dxd[src as usize] += gd[o];
    }
}

/// Nearest-neighbor 2x upsampling.
pub fn upsample2_forward<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let (n, c, h, w) = x.dims4().expect("validated by caller");
    let (ho, wo) = (h * 2, w * 2);
    let mut out = Tensor::zeros(vec![n, c, ho, wo]);
    let xs = x.data();
    let od = out.data_mut();
    for img in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x_ in 0..w {
                    let v = xs[idx4(c, h, w, img, ch, y, x_)];
                    od[idx4(c, ho, wo, img, ch, y * 2, x_ * 2)] = v;
                    od[idx4(c, ho, wo, img, ch, y * 2, x_ * 2 + 1)] = v;
                    od[idx4(c, ho, wo, img, ch, y * 2 + 1, x_ * 2)] = v;
                    od[idx4(c, ho, wo, img, ch, y * 2 + 1, x_ * 2 + 1)] = v;
                }
            }
        }
    }
    out
}

/// Backward of nearest-neighbor upsampling: sum each 2x2 fan-out.
pub fn upsample2_backward<S: Scalar>(g: &Tensor<S>, dx: &mut Tensor<S>) {
    let (n, c, h, w) = dx.dims4().expect("validated by caller");
    let (ho, wo) = (h * 2, w * 2);
    let gd = g.data();
    let dxd = dx.data_mut();
    for img in 0..n {
        for ch in 0..c {
            for y in 0..h {
                for x_ in 0..w {
                    let s = gd[idx4(c, ho, wo, img, ch, y * 2, x_ * 2)]
                        + gd[idx4(c, ho, wo, img, ch, y * 2, x_ * 2 + 1)]
                        + gd[idx4(c, ho, wo, img, ch, y * 2 + 1, x_ * 2)]
                        + gd[idx4(c, ho, wo, img, ch, y * 2 + 1, x_ * 2 + 1)];
                    dxd[idx4(c, h, w, img, ch, y, x_)] += s;
                }
            }
        }
    }
}
