//! Accuracy/runtime ladder: held-out endpoint error and per-frame latency
//! for each flow method, emitted as CSV.

use std::time::Instant;

use super::{classical_flow, epe, tensor_to_fields, ClassicalFlowParams, FlowField, FlowNetSpec};
use crate::autodiff::{Graph, Tensor};
use crate::data::{Dataset, CHANNELS, SIDE};
use crate::error::{Error, Result};
use crate::params::{bind_frozen, Params};

/// A flow method under comparison.
pub enum FlowMethod {
    Learned { spec: FlowNetSpec, params: Params<f32>, provenance: Vec<String> },
    Classical(ClassicalFlowParams),
}

pub struct LadderEntry {
    pub name: String,
    pub method: FlowMethod,
}

#[derive(Debug, Clone, serde::Serialize)]
pub struct LadderRow {
    pub method: String,
    pub aee: f64,
    pub ms_per_frame: f64,
}

/// Run one learned forward over a batch of frame pairs.
pub fn flownet_flow_batch(
    spec: &FlowNetSpec,
    params: &Params<f32>,
    f0: &Tensor<f32>,
    f1: &Tensor<f32>,
) -> Result<Tensor<f32>> {
    let mut g: Graph<f32> = Graph::new();
    let vars = bind_frozen(&mut g, params);
    let a = g.constant(f0.clone());
    let b = g.constant(f1.clone());
    let out = spec.forward(&mut g, &vars, a, b)?;
    Ok(g.value(out).clone())
}

/// Mean EPE and wall-clock ms/frame of every entry on held-out pairs.
/// Learned entries must carry flow pretraining in their provenance chain.
pub fn flow_ladder_report(
    ds: &Dataset,
    entries: &[LadderEntry],
    max_pairs: usize,
) -> Result<Vec<LadderRow>> {
    if !ds.manifest.has_flow {
        return Err(Error::usage("ladder dataset has no ground-truth flow"));
    }
    // collect (f0, f1, gt) pairs
    let mut pairs: Vec<(Vec<f32>, Vec<f32>, FlowField)> = Vec::new();
    'outer: for i in 0..ds.len() {
        let sample = ds.video(i)?;
        let t_frames = sample.frame_count;
        let frame_len = CHANNELS * SIDE * SIDE;
        let flow = sample.flow.as_ref().expect("has_flow checked");
        for t in 0..t_frames - 1 {
            let f0 = sample.frames[t * frame_len..(t + 1) * frame_len].to_vec();
            let f1 = sample.frames[(t + 1) * frame_len..(t + 2) * frame_len].to_vec();
            let gt = FlowField::new(
                SIDE,
                SIDE,
                flow[t * 2 * SIDE * SIDE..(t + 1) * 2 * SIDE * SIDE].to_vec(),
            )?;
            pairs.push((f0, f1, gt));
            if pairs.len() >= max_pairs {
                break 'outer;
            }
        }
    }
    if pairs.is_empty() {
        return Err(Error::usage("ladder dataset produced no frame pairs"));
    }

    let mut rows = Vec::new();
    for entry in entries {
        let (aee, elapsed) = match &entry.method {
            FlowMethod::Learned { spec, params, provenance } => {
                if !provenance.iter().any(|s| s == "flow-epe") {
                    return Err(Error::usage(format!(
                        "flow variant `{}` has no flow pretraining in its provenance {:?}",
                        entry.name, provenance
                    )));
                }
                let batch = 8usize;
                let mut total = 0.0f64;
                let start = Instant::now();
                let mut preds: Vec<FlowField> = Vec::with_capacity(pairs.len());
                for chunk in pairs.chunks(batch) {
                    let n = chunk.len();
                    let mut f0 = Vec::with_capacity(n * CHANNELS * SIDE * SIDE);
                    let mut f1 = Vec::with_capacity(n * CHANNELS * SIDE * SIDE);
                    for (a, b, _) in chunk {
                        f0.extend_from_slice(a);
                        f1.extend_from_slice(b);
                    }
                    let t0 = Tensor::new(vec![n, CHANNELS, SIDE, SIDE], f0)?;
                    let t1 = Tensor::new(vec![n, CHANNELS, SIDE, SIDE], f1)?;
                    let out = flownet_flow_batch(spec, params, &t0, &t1)?;
                    preds.extend(tensor_to_fields(&out)?);
                }
                let elapsed = start.elapsed();
                for (pred, (_, _, gt)) in preds.iter().zip(&pairs) {
                    total += epe(pred, gt)?;
                }
                (total / pairs.len() as f64, elapsed)
            }
            FlowMethod::Classical(p) => {
                let start = Instant::now();
                let preds: Vec<FlowField> = pairs
                    .iter()
                    .map(|(a, b, _)| classical_flow(a, b, CHANNELS, SIDE, SIDE, p))
                    .collect();
                let elapsed = start.elapsed();
                let mut total = 0.0f64;
                for (pred, (_, _, gt)) in preds.iter().zip(&pairs) {
                    total += epe(pred, gt)?;
                }
                (total / pairs.len() as f64, elapsed)
            }
        };
        rows.push(LadderRow {
            method: entry.name.clone(),
            aee,
            ms_per_frame: elapsed.as_secs_f64() * 1000.0 / pairs.len() as f64,
        });
    }
    Ok(rows)
}

pub fn ladder_csv(rows: &[LadderRow]) -> String {
    let mut out = String::from("method,aee,ms_per_frame\n");
    for r in rows {
        out.push_str(&format!("{},{:.6},{:.3}\n", r.method, r.aee, r.ms_per_frame));
    }
    out
}
