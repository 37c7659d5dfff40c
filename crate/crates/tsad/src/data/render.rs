//! Deterministic rasterizer: signed-distance shapes composited with
//! bilinear-smooth coverage over a smoothed-noise background.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{MotionClass, CHANNELS, SIDE};
use crate::detector::BBox;

/// Actor appearance. Drawn independently of the motion class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ShapeKind {
    Disc,
    Square,
    Triangle,
}

impl ShapeKind {
    pub const COUNT: usize = 3;
    pub const ALL: [ShapeKind; 3] = [ShapeKind::Disc, ShapeKind::Square, ShapeKind::Triangle];

    pub fn id(self) -> u16 {
        Self::ALL.iter().position(|&s| s == self).unwrap() as u16
    }

    pub fn from_id(id: u16) -> Option<ShapeKind> {
        Self::ALL.get(id as usize).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Disc => "disc",
            ShapeKind::Square => "square",
            ShapeKind::Triangle => "triangle",
        }
    }

    pub fn class_names() -> Vec<String> {
        Self::ALL.iter().map(|s| s.name().to_string()).collect()
    }
}

/// Everything needed to reproduce one sample bit-exactly.
#[derive(Debug, Clone)]
pub struct SampleParamsInner {
    pub class: MotionClass,
    pub shape: ShapeKind,
    /// Base size in pixels (disc radius / square & triangle circumradius).
    pub radius: f32,
    /// Trajectory speed scale in px/frame.
    pub speed: f32,
    /// Trajectory anchor: start center, or orbit center for circle classes.
    pub start: (f32, f32),
    pub orbit_radius: f32,
    pub phase: f32,
    /// Relative size amplitude for expand-contract.
    pub pulse_amp: f32,
    pub actor_color: [f32; 3],
    pub bg_seed: u64,
    pub bg_tint: [f32; 3],
    pub bg_blur: usize,
    pub bg_range: (f32, f32),
}

/// Signed distance (px) to the shape boundary; negative inside.
fn sdf(shape: ShapeKind, dx: f32, dy: f32, r: f32) -> f32 {
    match shape {
        ShapeKind::Disc => (dx * dx + dy * dy).sqrt() - r,
        ShapeKind::Square => {
            let half = 0.9 * r;
            dx.abs().max(dy.abs()) - half
        }
        ShapeKind::Triangle => {
            // Equilateral, apex up, circumradius r: exact signed distance.
            // Inside: max of the three half-plane distances. Outside: min
            // distance to the three edge segments (line distances alone
            // underestimate near corners).
            let apex_y = -r;
            let base_y = 0.5 * r;
            let half_w = 0.866_025_4 * r;
            let verts = [(0.0f32, apex_y), (half_w, base_y), (-half_w, base_y)];
            let mut inside_d = f32::MIN;
            let mut seg_d2 = f32::MAX;
            for i in 0..3 {
                let (x0, y0) = verts[i];
                let (x1, y1) = verts[(i + 1) % 3];
                let (ex, ey) = (x1 - x0, y1 - y0);
                let len = (ex * ex + ey * ey).sqrt();
                // outward normal (vertices wound clockwise in y-down coords)
                let (nx, ny) = (ey / len, -ex / len);
                inside_d = inside_d.max(nx * (dx - x0) + ny * (dy - y0));
                let t = (((dx - x0) * ex + (dy - y0) * ey) / (len * len)).clamp(0.0, 1.0);
                let (px, py) = (x0 + t * ex, y0 + t * ey);
                seg_d2 = seg_d2.min((dx - px) * (dx - px) + (dy - py) * (dy - py));
            }
            if inside_d <= 0.0 {
                inside_d
            } else {
                seg_d2.sqrt()
            }
        }
    }
}

/// Tight bounding box of the shape at center (cx, cy) px, normalized to [0,1].
pub fn shape_tight_box(shape: ShapeKind, cx: f32, cy: f32, r: f32) -> BBox {
    let side = SIDE as f32;
    let (bcx, bcy, w, h) = match shape {
        ShapeKind::Disc => (cx, cy, 2.0 * r, 2.0 * r),
        ShapeKind::Square => (cx, cy, 1.8 * r, 1.8 * r),
        ShapeKind::Triangle => {
            let half_w = 0.866_025_4 * r;
            // y spans [cy - r, cy + 0.5 r]
            (cx, cy - 0.25 * r, 2.0 * half_w, 1.5 * r)
        }
    };
    BBox { cx: bcx / side, cy: bcy / side, w: w / side, h: h / side }
}

/// Per-frame center and size along the class trajectory.
pub fn trajectory(p: &SampleParamsInner, t_frames: usize) -> (Vec<(f32, f32)>, Vec<f32>) {
    let mut centers = Vec::with_capacity(t_frames);
    let mut radii = Vec::with_capacity(t_frames);
    let (sx, sy) = p.start;
    for t in 0..t_frames {
        let tf = t as f32;
        let (c, r) = match p.class {
            MotionClass::MoveRight => ((sx + p.speed * tf, sy), p.radius),
            MotionClass::MoveLeft => ((sx - p.speed * tf, sy), p.radius),
            MotionClass::CircleCw | MotionClass::CircleCcw => {
                let dir = if p.class == MotionClass::CircleCw { 1.0 } else { -1.0 };
                let omega = p.speed / p.orbit_radius.max(1.0);
                let a = p.phase + dir * omega * tf;
                ((sx + p.orbit_radius * a.cos(), sy + p.orbit_radius * a.sin()), p.radius)
            }
            MotionClass::Zigzag => {
                // advance right while bouncing vertically with period 8
                let cycle = (t % 8) as f32;
                let dy = if cycle < 4.0 { cycle } else { 8.0 - cycle };
                ((sx + p.speed * tf, sy + 0.8 * p.speed * dy), p.radius)
            }
            MotionClass::ExpandContract => {
                let r = p.radius * (1.0 + p.pulse_amp * (std::f32::consts::TAU * tf / 8.0).sin());
                ((sx, sy), r)
            }
        };
        centers.push(c);
        radii.push(r);
    }
    (centers, radii)
}

fn background(p: &SampleParamsInner) -> Vec<f32> {
    let mut rng = ChaCha8Rng::seed_from_u64(p.bg_seed);
    let mut luma: Vec<f32> = (0..SIDE * SIDE).map(|_| rng.gen::<f32>()).collect();
    let mut tmp = vec![0.0f32; SIDE * SIDE];
    for _ in 0..p.bg_blur {
        for y in 0..SIDE {
            for x in 0..SIDE {
                let mut acc = 0.0;
                let mut n = 0.0;
                for dy in -1i32..=1 {
                    for dx in -1i32..=1 {
                        let yy = y as i32 + dy;
                        let xx = x as i32 + dx;
                        if yy >= 0 && yy < SIDE as i32 && xx >= 0 && xx < SIDE as i32 {
                            acc += luma[yy as usize * SIDE + xx as usize];
                            n += 1.0;
                        }
                    }
                }
                tmp[y * SIDE + x] = acc / n;
            }
        }
        std::mem::swap(&mut luma, &mut tmp);
    }
    let (mut lo, mut hi) = (f32::MAX, f32::MIN);
    for &v in &luma {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    let span = (hi - lo).max(1e-6);
    let (rlo, rhi) = p.bg_range;
    for v in &mut luma {
        *v = rlo + (rhi - rlo) * (*v - lo) / span;
    }
    luma
}

/// Rendered sample: frames in [0,1], per-frame tight boxes, per-pair exact
/// flow (px) that is the analytic displacement inside the frame-t actor mask
/// and zero on the background.
pub struct Rendered {
    pub frames: Vec<f32>,
    pub boxes: Vec<BBox>,
    pub flow: Vec<f32>,
}

pub fn render_video(p: &SampleParamsInner, t_frames: usize) -> Rendered {
    let (centers, radii) = trajectory(p, t_frames);
    let bg = background(p);
    let plane = SIDE * SIDE;
    let mut frames = vec![0.0f32; t_frames * CHANNELS * plane];
    let mut boxes = Vec::with_capacity(t_frames);
    for t in 0..t_frames {
        let (cx, cy) = centers[t];
        let r = radii[t];
        boxes.push(shape_tight_box(p.shape, cx, cy, r));
        let frame = &mut frames[t * CHANNELS * plane..(t + 1) * CHANNELS * plane];
        for y in 0..SIDE {
            for x in 0..SIDE {
                let px = x as f32 + 0.5;
                let py = y as f32 + 0.5;
                let d = sdf(p.shape, px - cx, py - cy, r);
                let cov = (0.5 - d).clamp(0.0, 1.0);
                let l = bg[y * SIDE + x];
                for c in 0..CHANNELS {
                    let bgv = l * p.bg_tint[c];
                    frame[c * plane + y * SIDE + x] = bgv + cov * (p.actor_color[c] - bgv);
                }
            }
        }
    }
    let pairs = t_frames.saturating_sub(1);
    let mut flow = vec![0.0f32; pairs * 2 * plane];
    for t in 0..pairs {
        let (cx, cy) = centers[t];
        let r = radii[t];
        let (nx, ny) = centers[t + 1];
        let (du, dv) = (nx - cx, ny - cy);
        let scale = radii[t + 1] / r - 1.0;
        let dst = &mut flow[t * 2 * plane..(t + 1) * 2 * plane];
        for y in 0..SIDE {
            for x in 0..SIDE {
                let px = x as f32 + 0.5;
                let py = y as f32 + 0.5;
                if sdf(p.shape, px - cx, py - cy, r) <= 0.0 {
                    let (u, v) = if p.class == MotionClass::ExpandContract {
                        ((px - cx) * scale, (py - cy) * scale)
                    } else {
                        (du, dv)
                    };
                    dst[y * SIDE + x] = u;
                    dst[plane + y * SIDE + x] = v;
                }
            }
        }
    }
    Rendered { frames, boxes, flow }
}
