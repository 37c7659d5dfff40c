//! Throughput/latency harness. Measures frames-per-second of the full
//! pipeline (flow -> streams -> fusion -> decode -> selection) from raw
//! frames onward (no video decode), comparing in-process flow against an
//! external worker process that receives frames and returns flow over a
//! length-prefixed pipe — the data-transfer overhead a third-party flow
//! implementation pays.

use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::{Child, Command, Stdio};
use std::time::Instant;

use serde::Serialize;

use crate::autodiff::Tensor;
use crate::data::{render_video, MotionClass, SampleParams, ShapeKind, CHANNELS, SIDE};
use crate::detector::{decode, Detection, DetectorModel, FlowSource};
use crate::error::{Error, Result};
use crate::train::checkpoint::{crc32, Checkpoint};

/// How the temporal stream obtains its flow.
#[derive(Debug, Clone)]
pub enum PipelineMode {
    /// Flow computed in-process; optionally overlapped with stream
    /// inference of the previous batch.
    Integrated { overlap: bool },
    /// Flow computed by a separate worker process over a byte pipe.
    External { worker: WorkerConfig },
}

impl PipelineMode {
    pub fn label(&self) -> &'static str {
        match self {
            PipelineMode::Integrated { .. } => "integrated",
            PipelineMode::External { .. } => "external",
        }
    }
}

#[derive(Debug, Clone)]
pub struct WorkerConfig {
    /// Executable implementing the worker protocol (see [`worker_main`]).
    pub program: PathBuf,
    /// Arguments before the checkpoint path (e.g. a subcommand name).
    pub prefix_args: Vec<String>,
}

#[derive(Debug, Clone, Serialize)]
pub struct BenchReport {
    pub mode: String,
    pub flow: String,
    pub batch: usize,
    pub frames: usize,
    pub wall_seconds: f64,
    pub fps: f64,
    pub p50_ms: f64,
    pub p95_ms: f64,
    pub overlap_enabled: bool,
    /// CRC of every decoded detection, for cross-mode identity checks.
    pub detections_digest: u32,
}

#[derive(Debug, Clone, Serialize)]
pub struct ModeComparison {
    pub integrated: BenchReport,
    pub external: BenchReport,
    pub speedup: f64,
}

/// Deterministic frame pairs for benchmarking: one rendered clip, cycled.
pub fn bench_frames(n_pairs: usize) -> Vec<(Vec<f32>, Vec<f32>)> {
    let params = SampleParams {
        class: MotionClass::CircleCw,
        shape: ShapeKind::Disc,
        radius: 9.0,
        speed: 2.0,
        start: (32.0, 32.0),
        orbit_radius: 8.0,
        phase: 0.3,
        pulse_amp: 0.0,
        actor_color: [0.85, 0.3, 0.2],
        bg_seed: 42,
        bg_tint: [0.9, 0.95, 1.0],
        bg_blur: 2,
        bg_range: (0.15, 0.7),
    };
    let r = render_video(&params, crate::data::FRAMES);
    let frame_len = CHANNELS * SIDE * SIDE;
    let clip_pairs = crate::data::FRAMES - 1;
    (0..n_pairs)
        .map(|i| {
            let t = i % clip_pairs;
            (
                r.frames[t * frame_len..(t + 1) * frame_len].to_vec(),
                r.frames[(t + 1) * frame_len..(t + 2) * frame_len].to_vec(),
            )
        })
        .collect()
}

fn stack(pairs: &[(Vec<f32>, Vec<f32>)]) -> Result<(Tensor<f32>, Tensor<f32>)> {
    let n = pairs.len();
    let mut a = Vec::with_capacity(n * CHANNELS * SIDE * SIDE);
    let mut b = Vec::with_capacity(n * CHANNELS * SIDE * SIDE);
    for (f0, f1) in pairs {
        a.extend_from_slice(f0);
        b.extend_from_slice(f1);
    }
    Ok((
        Tensor::new(vec![n, CHANNELS, SIDE, SIDE], a)?,
        Tensor::new(vec![n, CHANNELS, SIDE, SIDE], b)?,
    ))
}

fn digest_detections(digest: &mut Vec<u8>, dets: &[Vec<Detection>]) {
    for frame in dets {
        for d in frame {
            digest.extend_from_slice(&(d.class_id as u32).to_le_bytes());
            for v in [d.rect.cx, d.rect.cy, d.rect.w, d.rect.h, d.score, d.objectness] {
                digest.extend_from_slice(&v.to_bits().to_le_bytes());
            }
        }
        digest.extend_from_slice(&0xFFFFFFFFu32.to_le_bytes());
    }
}

/// A running external flow worker speaking the pipe protocol.
pub struct ExternalFlow {
    child: Child,
    _ckpt: tempfile::NamedTempFile,
}

impl ExternalFlow {
    pub fn spawn(model: &DetectorModel, cfg: &WorkerConfig) -> Result<ExternalFlow> {
        let ckpt_file = tempfile::NamedTempFile::new()
            .map_err(|e| Error::io(std::env::temp_dir(), e))?;
        let flow_params: crate::params::Params<f32> = model
            .params
            .iter()
            .filter(|(name, _)| name.starts_with("flow."))
            .map(|(n, t)| (n.clone(), t.clone()))
            .collect();
        let ckpt = Checkpoint {
            config: serde_json::to_value(&model.flow).map_err(|e| Error::format(e.to_string()))?,
            provenance: vec!["flow-worker".into()],
            step: 0,
            optimizer_step: 0,
            rng: None,
            params: flow_params,
            moments: Default::default(),
        };
        crate::train::save_checkpoint(&ckpt, ckpt_file.path())?;
        let mut cmd = Command::new(&cfg.program);
        cmd.args(&cfg.prefix_args)
            .arg(ckpt_file.path())
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit());
        let child = cmd.spawn().map_err(|e| Error::io(cfg.program.clone(), e))?;
        Ok(ExternalFlow { child, _ckpt: ckpt_file })
    }

    /// Round-trip one batch: send both frame tensors, receive the flow.
    pub fn flow(&mut self, f0: &Tensor<f32>, f1: &Tensor<f32>) -> Result<Tensor<f32>> {
        let (n, c, h, w) = f0.dims4()?;
        let stdin = self.child.stdin.as_mut().expect("piped stdin");
        let mut buf = Vec::with_capacity(4 + 2 * f0.numel() * 4);
        buf.extend_from_slice(&(n as u32).to_le_bytes());
        for t in [f0, f1] {
            for v in t.data() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        stdin.write_all(&buf).map_err(|e| Error::io("worker stdin", e))?;
        stdin.flush().map_err(|e| Error::io("worker stdin", e))?;
        let _ = (c, h, w);
        let stdout = self.child.stdout.as_mut().expect("piped stdout");
        let mut raw = vec![0u8; n * 2 * SIDE * SIDE * 4];
        stdout.read_exact(&mut raw).map_err(|e| Error::io("worker stdout", e))?;
        let data: Vec<f32> =
            raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        Tensor::new(vec![n, 2, SIDE, SIDE], data)
    }
}

impl Drop for ExternalFlow {
    fn drop(&mut self) {
        let _ = self.child.kill();
        let _ = self.child.wait();
    }
}

/// Worker process entry point: read a flow checkpoint path, then loop over
/// length-prefixed batches on stdin and answer flow tensors on stdout.
pub fn worker_main(ckpt_path: &std::path::Path) -> Result<()> {
    let ckpt = crate::train::load_checkpoint(ckpt_path)?;
    let flow: FlowSource = serde_json::from_value(ckpt.config.clone())
        .map_err(|e| Error::format(format!("worker config: {e}")))?;
    let stdin = std::io::stdin();
    let stdout = std::io::stdout();
    let mut input = stdin.lock();
    let mut output = stdout.lock();
    loop {
        let mut header = [0u8; 4];
        match input.read_exact(&mut header) {
            Ok(()) => {}
            Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(()),
            Err(e) => return Err(Error::io("worker stdin", e)),
        }
        let n = u32::from_le_bytes(header) as usize;
        let frame_len = n * CHANNELS * SIDE * SIDE;
        let mut raw = vec![0u8; 2 * frame_len * 4];
        input.read_exact(&mut raw).map_err(|e| Error::io("worker stdin", e))?;
        let floats: Vec<f32> =
            raw.chunks_exact(4).map(|b| f32::from_le_bytes(b.try_into().unwrap())).collect();
        let f0 = Tensor::new(vec![n, CHANNELS, SIDE, SIDE], floats[..frame_len].to_vec())?;
        let f1 = Tensor::new(vec![n, CHANNELS, SIDE, SIDE], floats[frame_len..].to_vec())?;
        let result = crate::detector::compute_flow(&flow, &ckpt.params, &f0, &f1)?;
        let mut out = Vec::with_capacity(result.numel() * 4);
        for v in result.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
        output.write_all(&out).map_err(|e| Error::io("worker stdout", e))?;
        output.flush().map_err(|e| Error::io("worker stdout", e))?;
    }
}

struct RunOutcome {
    wall_seconds: f64,
    latencies_ms: Vec<f64>,
    digest: u32,
}

fn run_once(
    model: &DetectorModel,
    mode: &PipelineMode,
    batch: usize,
    pairs: &[(Vec<f32>, Vec<f32>)],
    warmup_batches: usize,
    conf_threshold: f32,
) -> Result<RunOutcome> {
    let batches: Vec<(Tensor<f32>, Tensor<f32>)> = pairs
        .chunks(batch)
        .map(stack)
        .collect::<Result<Vec<_>>>()?;
    let mut external = match mode {
        PipelineMode::External { worker } => Some(ExternalFlow::spawn(model, worker)?),
        PipelineMode::Integrated { .. } => None,
    };
    let overlap = matches!(mode, PipelineMode::Integrated { overlap: true });

    let mut digest_bytes = Vec::new();
    let mut latencies = Vec::new();
    let mut measured_frames = 0usize;
    let mut wall = 0.0f64;

    let detect_from_flow = |f0: &Tensor<f32>, flow: &Tensor<f32>| -> Result<Vec<Vec<Detection>>> {
        let grid = model.forward_grid_with_flow(f0, flow)?;
        let dets = decode(&grid, &model.cfg.anchors, conf_threshold)?;
        // top-score selection per frame
        Ok(dets
            .into_iter()
            .map(|frame| {
                frame
                    .into_iter()
                    .max_by(|a, b| {
                        a.score.partial_cmp(&b.score).unwrap_or(std::cmp::Ordering::Equal)
                    })
                    .into_iter()
                    .collect()
            })
            .collect())
    };

    if overlap {
        // two-stage pipeline: flow for batch i+1 runs while streams process i
        let flow_of = |i: usize| -> Result<Tensor<f32>> {
            let (f0, f1) = &batches[i];
            model.compute_flow(f0, f1)
        };
        let mut pending: Option<Tensor<f32>> = None;
        for i in 0..batches.len() {
            let start = Instant::now();
            let (flow_i, next_flow) = std::thread::scope(
                |scope| -> Result<(Tensor<f32>, Option<Tensor<f32>>)> {
                    let next = if i + 1 < batches.len() {
                        Some(scope.spawn(|| flow_of(i + 1)))
                    } else {
                        None
                    };
                    let current = match pending.take() {
                        Some(f) => f,
                        None => flow_of(i)?,
                    };
                    let next = match next {
                        Some(handle) => {
                            Some(handle.join().map_err(|_| Error::usage("flow thread panicked"))??)
                        }
                        None => None,
                    };
                    Ok((current, next))
                },
            )?;
            pending = next_flow;
            let dets = detect_from_flow(&batches[i].0, &flow_i)?;
            let elapsed = start.elapsed().as_secs_f64();
            if i >= warmup_batches {
                wall += elapsed;
                let n = batches[i].0.shape()[0];
                measured_frames += n;
                for _ in 0..n {
                    latencies.push(elapsed * 1000.0);
                }
                digest_detections(&mut digest_bytes, &dets);
            }
        }
    } else {
        for (i, (f0, f1)) in batches.iter().enumerate() {
            let start = Instant::now();
            let flow = match &mut external {
                Some(worker) => worker.flow(f0, f1)?,
                None => model.compute_flow(f0, f1)?,
            };
            let dets = detect_from_flow(f0, &flow)?;
            let elapsed = start.elapsed().as_secs_f64();
            if i >= warmup_batches {
                wall += elapsed;
                let n = f0.shape()[0];
                measured_frames += n;
                for _ in 0..n {
                    latencies.push(elapsed * 1000.0);
                }
                digest_detections(&mut digest_bytes, &dets);
            }
        }
    }
    let _ = measured_frames;
    Ok(RunOutcome { wall_seconds: wall, latencies_ms: latencies, digest: crc32(&digest_bytes) })
}

#[derive(Debug, Clone)]
pub struct BenchOptions {
    pub warmup_frames: usize,
    pub repeats: usize,
    pub conf_threshold: f32,
}

impl Default for BenchOptions {
    fn default() -> Self {
        BenchOptions { warmup_frames: 50, repeats: 3, conf_threshold: 0.0 }
    }
}

/// Median-of-runs throughput measurement. `n_frames` are measured after
/// the warmup frames are excluded.
pub fn measure(
    model: &DetectorModel,
    mode: &PipelineMode,
    batch: usize,
    n_frames: usize,
    opts: &BenchOptions,
) -> Result<BenchReport> {
    if batch == 0 {
        return Err(Error::config("batch must be >= 1"));
    }
    if n_frames < 1 {
        return Err(Error::config("need at least one measured frame"));
    }
    let warmup_batches = opts.warmup_frames.div_ceil(batch);
    let total_pairs = warmup_batches * batch + n_frames.div_ceil(batch) * batch;
    let pairs = bench_frames(total_pairs);

    let mut runs = Vec::new();
    for _ in 0..opts.repeats.max(1) {
        runs.push(run_once(model, mode, batch, &pairs, warmup_batches, opts.conf_threshold)?);
    }
    let digest = runs[0].digest;
    if runs.iter().any(|r| r.digest != digest) {
        return Err(Error::usage("detections diverged across repeated runs"));
    }
    // median run by fps
    let frames = total_pairs - warmup_batches * batch;
    let mut by_fps: Vec<usize> = (0..runs.len()).collect();
    by_fps.sort_by(|&a, &b| {
        (frames as f64 / runs[a].wall_seconds)
            .partial_cmp(&(frames as f64 / runs[b].wall_seconds))
            .unwrap()
    });
    let chosen = &runs[by_fps[by_fps.len() / 2]];
    let mut lat = chosen.latencies_ms.clone();
    lat.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let pct = |p: f64| -> f64 {
        if lat.is_empty() {
            0.0
        } else {
            lat[((lat.len() as f64 * p) as usize).min(lat.len() - 1)]
        }
    };
    Ok(BenchReport {
        mode: mode.label().into(),
        flow: model.flow.label(),
        batch,
        frames,
        wall_seconds: chosen.wall_seconds,
        fps: frames as f64 / chosen.wall_seconds,
        p50_ms: pct(0.50),
        p95_ms: pct(0.95),
        overlap_enabled: matches!(mode, PipelineMode::Integrated { overlap: true }),
        detections_digest: digest,
    })
}

/// Integrated vs external throughput on identical inputs; detections must
/// be bit-identical across modes or the comparison fails hard.
pub fn compare_modes(
    model: &DetectorModel,
    worker: &WorkerConfig,
    batch: usize,
    n_frames: usize,
    opts: &BenchOptions,
) -> Result<ModeComparison> {
    let integrated =
        measure(model, &PipelineMode::Integrated { overlap: false }, batch, n_frames, opts)?;
    let external = measure(
        model,
        &PipelineMode::External { worker: worker.clone() },
        batch,
        n_frames,
        opts,
    )?;
    if integrated.detections_digest != external.detections_digest {
        return Err(Error::usage(format!(
            "mode mismatch: integrated digest {:08x} != external digest {:08x}",
            integrated.detections_digest, external.detections_digest
        )));
    }
    let speedup = integrated.fps / external.fps;
    Ok(ModeComparison { integrated, external, speedup })
}

/// Variant x batch throughput table (CSV). Missing cells print "-".
pub fn emit_table_csv(reports: &[BenchReport], variants: &[String], batches: &[usize]) -> String {
    let mut out = String::from("flow");
    for b in batches {
        out.push_str(&format!(",fps@batch{b}"));
    }
    out.push('\n');
    for v in variants {
        out.push_str(v);
        for b in batches {
            match reports.iter().find(|r| &r.flow == v && r.batch == *b) {
                Some(r) => out.push_str(&format!(",{:.1}", r.fps)),
                None => out.push_str(",-"),
            }
        }
        out.push('\n');
    }
    out
}

pub fn emit_table_markdown(
    reports: &[BenchReport],
    variants: &[String],
    batches: &[usize],
) -> String {
    let mut out = String::from("| flow |");
    for b in batches {
        out.push_str(&format!(" fps @ batch {b} |"));
    }
    out.push_str("\n|---|");
    for _ in batches {
        out.push_str("---|");
    }
    out.push('\n');
    for v in variants {
        out.push_str(&format!("| {v} |"));
        for b in batches {
            match reports.iter().find(|r| &r.flow == v && r.batch == *b) {
                Some(r) => out.push_str(&format!(" {:.1} |", r.fps)),
                None => out.push_str(" - |"),
            }
        }
        out.push('\n');
    }
    out
}

#[cfg(test)]
mod tests;
