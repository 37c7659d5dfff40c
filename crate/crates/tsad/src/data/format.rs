//! On-disk dataset layout: `manifest.json` plus one `data.bin` blob per
//! split. Records are little-endian: u32 frame count, u8 frames
//! [T*3*64*64], u16 class, then (when present) f32 boxes [T*4] and f32
//! flow [(T-1)*2*64*64]. The same schema loads externally produced data.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{CHANNELS, SIDE};
use crate::detector::BBox;
use crate::error::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub split: String,
    pub count: usize,
    pub classes: Vec<String>,
    pub seed: u64,
    /// Byte offset of each record in data.bin, strictly increasing.
    pub offsets: Vec<u64>,
    pub has_boxes: bool,
    pub has_flow: bool,
    /// Per-sample labels, duplicated from the blob for cheap inspection.
    pub class_ids: Vec<u16>,
    /// Actor shape per sample (appearance, independent of the class).
    pub shape_ids: Vec<u16>,
}

#[derive(Debug, Clone)]
pub struct VideoSample {
    pub frame_count: usize,
    /// T*3*64*64 values in [0,1].
    pub frames: Vec<f32>,
    pub class_id: u16,
    pub boxes: Option<Vec<BBox>>,
    /// (T-1)*2*64*64 px displacements.
    pub flow: Option<Vec<f32>>,
}

/// Encode one record (quantizing frames to 8 bits).
pub fn encode_record(
    frames: &[f32],
    t_frames: usize,
    class_id: u16,
    boxes: Option<&[BBox]>,
    flow: Option<&[f32]>,
) -> Vec<u8> {
    let frame_len = t_frames * CHANNELS * SIDE * SIDE;
    debug_assert_eq!(frames.len(), frame_len);
    let mut out = Vec::with_capacity(4 + frame_len + 2);
    out.extend_from_slice(&(t_frames as u32).to_le_bytes());
    for &v in frames {
        out.push((v.clamp(0.0, 1.0) * 255.0).round() as u8);
    }
    out.extend_from_slice(&class_id.to_le_bytes());
    if let Some(boxes) = boxes {
        debug_assert_eq!(boxes.len(), t_frames);
        for b in boxes {
            for v in [b.cx, b.cy, b.w, b.h] {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    if let Some(flow) = flow {
        debug_assert_eq!(flow.len(), (t_frames - 1) * 2 * SIDE * SIDE);
        for &v in flow {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn take<'a>(buf: &'a [u8], at: &mut usize, n: usize, what: &str) -> Result<&'a [u8]> {
    if *at + n > buf.len() {
        return Err(Error::format(format!(
            "truncated record: needed {n} bytes for {what} at offset {at}"
        )));
    }
    let s = &buf[*at..*at + n];
    *at += n;
    Ok(s)
}

pub fn decode_record(buf: &[u8], has_boxes: bool, has_flow: bool) -> Result<VideoSample> {
    let mut at = 0usize;
    let t = u32::from_le_bytes(take(buf, &mut at, 4, "frame count")?.try_into().unwrap()) as usize;
    if t == 0 || t > 10_000 {
        return Err(Error::format(format!("implausible frame count {t}")));
    }
    let frame_len = t * CHANNELS * SIDE * SIDE;
    let raw = take(buf, &mut at, frame_len, "frames")?;
    let frames: Vec<f32> = raw.iter().map(|&b| b as f32 / 255.0).collect();
    let class_id = u16::from_le_bytes(take(buf, &mut at, 2, "class")?.try_into().unwrap());
    let boxes = if has_boxes {
        let raw = take(buf, &mut at, t * 4 * 4, "boxes")?;
        let mut out = Vec::with_capacity(t);
        for i in 0..t {
            let f = |j: usize| {
                f32::from_le_bytes(raw[(i * 4 + j) * 4..(i * 4 + j + 1) * 4].try_into().unwrap())
            };
            out.push(BBox::new(f(0), f(1), f(2), f(3)));
        }
        Some(out)
    } else {
        None
    };
    let flow = if has_flow {
        let n = (t - 1) * 2 * SIDE * SIDE;
        let raw = take(buf, &mut at, n * 4, "flow")?;
        Some(
            raw.chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect::<Vec<f32>>(),
        )
    } else {
        None
    };
    Ok(VideoSample { frame_count: t, frames, class_id, boxes, flow })
}

/// A loaded split: manifest plus the raw blob, decoded per access.
#[derive(Debug)]
pub struct Dataset {
    pub manifest: Manifest,
    blob: Vec<u8>,
}

impl Dataset {
    pub fn len(&self) -> usize {
        self.manifest.count
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.count == 0
    }

    fn record_bytes(&self, index: usize) -> Result<&[u8]> {
        if index >= self.manifest.count {
            return Err(Error::input(format!(
                "sample index {index} out of range ({})",
                self.manifest.count
            )));
        }
        let start = self.manifest.offsets[index] as usize;
        let end = if index + 1 < self.manifest.count {
            self.manifest.offsets[index + 1] as usize
        } else {
            self.blob.len()
        };
        Ok(&self.blob[start..end])
    }

    pub fn video(&self, index: usize) -> Result<VideoSample> {
        decode_record(self.record_bytes(index)?, self.manifest.has_boxes, self.manifest.has_flow)
    }

    pub fn class_count(&self) -> usize {
        self.manifest.classes.len()
    }

    /// Load and fully validate a dataset directory.
    pub fn load(dir: &Path) -> Result<Dataset> {
        let manifest_path = dir.join("manifest.json");
        let text = fs::read_to_string(&manifest_path)
            .map_err(|e| Error::io(manifest_path.clone(), e))?;
        let manifest: Manifest = serde_json::from_str(&text).map_err(|e| {
            Error::format(format!("{}: {}", manifest_path.display(), e))
        })?;
        if manifest.version != MANIFEST_VERSION {
            return Err(Error::format(format!(
                "manifest version {} unsupported (expected {})",
                manifest.version, MANIFEST_VERSION
            )));
        }
        let blob_path = dir.join("data.bin");
        let blob = fs::read(&blob_path).map_err(|e| Error::io(blob_path.clone(), e))?;

        if manifest.offsets.len() != manifest.count
            || manifest.class_ids.len() != manifest.count
            || manifest.shape_ids.len() != manifest.count
        {
            return Err(Error::format(format!(
                "manifest arrays disagree with count {}",
                manifest.count
            )));
        }
        for i in 1..manifest.offsets.len() {
            if manifest.offsets[i] <= manifest.offsets[i - 1] {
                return Err(Error::format(format!(
                    "offsets not strictly increasing at record {i}"
                )));
            }
        }
        if let Some(&last) = manifest.offsets.last() {
            if last as usize >= blob.len() {
                return Err(Error::format("last offset beyond data.bin"));
            }
        }
        let ds = Dataset { manifest, blob };
        for i in 0..ds.manifest.count {
            let sample = ds
                .video(i)
                .map_err(|e| Error::format(format!("record {i}: {e}")))?;
            if sample.class_id as usize >= ds.manifest.classes.len() {
                return Err(Error::format(format!(
                    "record {i}: class {} out of range ({})",
                    sample.class_id,
                    ds.manifest.classes.len()
                )));
            }
            if let Some(boxes) = &sample.boxes {
                for (t, b) in boxes.iter().enumerate() {
                    b.validate().map_err(|e| {
                        Error::format(format!("record {i} frame {t}: {e}"))
                    })?;
                    let (x0, y0, x1, y1) = b.corners();
                    if x0 < -1e-4 || y0 < -1e-4 || x1 > 1.0 + 1e-4 || y1 > 1.0 + 1e-4 {
                        return Err(Error::format(format!(
                            "record {i} frame {t}: box {b:?} outside [0,1]^2"
                        )));
                    }
                }
            }
        }
        Ok(ds)
    }

    /// Write a split directory from encoded records.
    pub fn write(dir: &Path, mut manifest: Manifest, records: &[Vec<u8>]) -> Result<()> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir.to_path_buf(), e))?;
        let mut offsets = Vec::with_capacity(records.len());
        let mut blob = Vec::new();
        for rec in records {
            offsets.push(blob.len() as u64);
            blob.extend_from_slice(rec);
        }
        manifest.offsets = offsets;
        manifest.count = records.len();
        let blob_path = dir.join("data.bin");
        fs::write(&blob_path, &blob).map_err(|e| Error::io(blob_path, e))?;
        let manifest_path = dir.join("manifest.json");
        let text = serde_json::to_string_pretty(&manifest)
            .map_err(|e| Error::format(e.to_string()))?;
        fs::write(&manifest_path, text).map_err(|e| Error::io(manifest_path, e))?;
        Ok(())
    }
}

/// Load a dataset directory produced by this tool or by external tooling
/// following the documented schema.
pub fn load_external(dir: &Path) -> Result<Dataset> {
    Dataset::load(dir)
}
