//! Binary containers for motion clips, feature tracks and model checkpoints.
//!
//! Every file is `magic (8 bytes) | version (u32 LE) | header length (u64 LE)
//! | JSON header | payload`. Motion and feature payloads are frame-major
//! `f32` little-endian; checkpoint payloads are `f64` so training resumes
//! bit for bit.

use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;

use mrmotion_autodiff::Tensor;
use serde::{de::DeserializeOwned, Deserialize, Serialize};

use crate::conditioning::ConditionSignal;
use crate::error::{Error, FormatError, Result};
use crate::motion::{ChannelLayout, MotionSequence, Skeleton};
use crate::networks::{ConditionKind, GeneratorStack, SkeletalConvSpec};
use crate::nn::{load_params, Module};
use crate::pyramid::{NoiseSchedule, ScaleConfig};

pub const FORMAT_VERSION: u32 = 1;
pub const MOTION_MAGIC: &[u8; 8] = b"MRMOTION";
pub const FEATURE_MAGIC: &[u8; 8] = b"MRFEATUR";
pub const CHECKPOINT_MAGIC: &[u8; 8] = b"MRCHKPT\0";

const PREAMBLE: usize = 8 + 4 + 8;

/// The kind of file, recognised from its magic bytes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FileKind {
    Motion,
    Features,
    Checkpoint,
}

fn encode(magic: &[u8; 8], header: &impl Serialize, payload: &[u8]) -> Result<Vec<u8>> {
    let json = serde_json::to_vec(header).map_err(|e| FormatError::Header(e.to_string()))?;
    let mut out = Vec::with_capacity(PREAMBLE + json.len() + payload.len());
    out.extend_from_slice(magic);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    out.extend_from_slice(payload);
    Ok(out)
}

fn sniff(bytes: &[u8]) -> Result<FileKind> {
    if bytes.len() < 8 {
        return Err(FormatError::Truncated { expected: PREAMBLE, found: bytes.len() }.into());
    }
    match &bytes[..8] {
        m if m == MOTION_MAGIC => Ok(FileKind::Motion),
        m if m == FEATURE_MAGIC => Ok(FileKind::Features),
        m if m == CHECKPOINT_MAGIC => Ok(FileKind::Checkpoint),
        _ => Err(FormatError::BadMagic { expected: "a motion, feature or checkpoint file".into() }.into()),
    }
}

/// Splits a file into its parsed header and raw payload.
fn decode<'a, H: DeserializeOwned>(magic: &[u8; 8], bytes: &'a [u8]) -> Result<(H, &'a [u8])> {
    if bytes.len() < PREAMBLE {
        if bytes.len() >= 8 && &bytes[..8] != magic {
            return Err(bad_magic(magic));
        }
        return Err(FormatError::Truncated { expected: PREAMBLE, found: bytes.len() }.into());
    }
    if &bytes[..8] != magic {
        return Err(bad_magic(magic));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
    if version != FORMAT_VERSION {
        return Err(FormatError::VersionMismatch { found: version, expected: FORMAT_VERSION }.into());
    }
    let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
    let end = PREAMBLE.checked_add(header_len).filter(|&e| e <= bytes.len()).ok_or(FormatError::Truncated {
        expected: PREAMBLE.saturating_add(header_len),
        found: bytes.len(),
    })?;
    let header = serde_json::from_slice(&bytes[PREAMBLE..end]).map_err(|e| FormatError::Header(e.to_string()))?;
    Ok((header, &bytes[end..]))
}

fn bad_magic(magic: &[u8; 8]) -> Error {
    FormatError::BadMagic { expected: String::from_utf8_lossy(magic).trim_end_matches('\0').to_string() }.into()
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    std::fs::read(path).map_err(|e| Error::io(path, e))
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

fn f32_payload(t: &Tensor) -> Vec<u8> {
    t.data().iter().flat_map(|&v| (v as f32).to_le_bytes()).collect()
}

fn f32_tensor(payload: &[u8], rows: usize, cols: usize) -> Result<Tensor> {
    let expected = rows * cols * 4;
    if payload.len() < expected {
        return Err(FormatError::Truncated { expected, found: payload.len() }.into());
    }
    if payload.len() > expected {
        return Err(FormatError::Layout(format!(
            "payload holds {} bytes, header describes {rows}×{cols} values ({expected} bytes)",
            payload.len()
        ))
        .into());
    }
    let data = payload.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64).collect();
    Ok(Tensor::from_vec(rows, cols, data))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct MotionHeader {
    name: String,
    fps: f64,
    frames: usize,
    channels: usize,
    condition: Option<usize>,
    skeleton: Skeleton,
    layout: ChannelLayout,
}

/// A motion clip with its file-level metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct MotionFile {
    pub name: String,
    pub condition: Option<usize>,
    pub motion: MotionSequence,
}

pub fn encode_motion(file: &MotionFile) -> Result<Vec<u8>> {
    let m = &file.motion;
    let header = MotionHeader {
        name: file.name.clone(),
        fps: m.fps,
        frames: m.len(),
        channels: m.channels(),
        condition: file.condition,
        skeleton: (*m.skeleton).clone(),
        layout: m.layout.clone(),
    };
    encode(MOTION_MAGIC, &header, &f32_payload(&m.frames))
}

pub fn decode_motion(bytes: &[u8]) -> Result<MotionFile> {
    let (h, payload): (MotionHeader, _) = decode(MOTION_MAGIC, bytes)?;
    if h.channels != h.layout.channels {
        return Err(FormatError::Layout(format!(
            "header gives {} channels, its layout describes {}",
            h.channels, h.layout.channels
        ))
        .into());
    }
    h.skeleton.validate().map_err(|e| FormatError::Layout(e.to_string()))?;
    h.layout.check_against(&h.skeleton).map_err(|e| FormatError::Layout(e.to_string()))?;
    let frames = f32_tensor(payload, h.frames, h.channels)?;
    let motion = MotionSequence::new(frames, h.fps, h.layout, Arc::new(h.skeleton))?;
    Ok(MotionFile { name: h.name, condition: h.condition, motion })
}

pub fn save_motion(path: &Path, file: &MotionFile) -> Result<()> {
    write_file(path, &encode_motion(file)?)
}

pub fn load_motion(path: &Path) -> Result<MotionFile> {
    decode_motion(&read_file(path)?)
}

/// Whether a feature track has matching motion.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pairing {
    Unpaired,
    /// Name of the paired motion clip.
    Paired(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct FeatureHeader {
    name: String,
    rate: f64,
    dim: usize,
    rows: usize,
    duration_s: f64,
    pairing: Pairing,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureFile {
    pub name: String,
    pub rate: f64,
    pub pairing: Pairing,
    /// `rows × dim` feature track.
    pub data: Tensor,
}

impl FeatureFile {
    pub fn duration(&self) -> f64 {
        self.data.rows() as f64 / self.rate
    }

    pub fn condition(&self) -> Result<ConditionSignal> {
        ConditionSignal::features(self.data.clone(), self.rate)
    }
}

pub fn encode_features(file: &FeatureFile) -> Result<Vec<u8>> {
    if !(file.rate > 0.0) || !file.rate.is_finite() {
        return Err(Error::validation("feature rate must be positive"));
    }
    let header = FeatureHeader {
        name: file.name.clone(),
        rate: file.rate,
        dim: file.data.cols(),
        rows: file.data.rows(),
        duration_s: file.duration(),
        pairing: file.pairing.clone(),
    };
    encode(FEATURE_MAGIC, &header, &f32_payload(&file.data))
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureFile> {
    let (h, payload): (FeatureHeader, _) = decode(FEATURE_MAGIC, bytes)?;
    if !(h.rate > 0.0) || !h.rate.is_finite() {
        return Err(FormatError::Header(format!("invalid feature rate {}", h.rate)).into());
    }
    if (h.rows as f64 - h.duration_s * h.rate).abs() > 1.0 {
        return Err(FormatError::Layout(format!(
            "{} rows do not match {} s at {} Hz",
            h.rows, h.duration_s, h.rate
        ))
        .into());
    }
    let data = f32_tensor(payload, h.rows, h.dim)?;
    Ok(FeatureFile { name: h.name, rate: h.rate, pairing: h.pairing, data })
}

pub fn save_features(path: &Path, file: &FeatureFile) -> Result<()> {
    write_file(path, &encode_features(file)?)
}

pub fn load_features(path: &Path) -> Result<FeatureFile> {
    decode_features(&read_file(path)?)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct TensorEntry {
    name: String,
    rows: usize,
    cols: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointHeader {
    seed: u64,
    completed_blocks: usize,
    fps: f64,
    scale: ScaleConfig,
    noise: NoiseSchedule,
    conv: SkeletalConvSpec,
    condition: ConditionKind,
    default_lengths: Vec<usize>,
    skeleton: Skeleton,
    layout: ChannelLayout,
    tensors: Vec<TensorEntry>,
}

/// A generator stack together with its training progress.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub stack: GeneratorStack,
    pub completed_blocks: usize,
    pub seed: u64,
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    let s = &ck.stack;
    let params = s.named_params("");
    let tensors = params.iter().map(|(n, t)| TensorEntry { name: n.clone(), rows: t.rows(), cols: t.cols() }).collect();
    let payload: Vec<u8> = params.iter().flat_map(|(_, t)| t.data().iter().flat_map(|v| v.to_le_bytes())).collect();
    let header = CheckpointHeader {
        seed: ck.seed,
        completed_blocks: ck.completed_blocks,
        fps: s.fps,
        scale: s.scale.clone(),
        noise: s.noise.clone(),
        conv: s.conv.clone(),
        condition: s.condition,
        default_lengths: s.default_lengths.clone(),
        skeleton: (*s.skeleton).clone(),
        layout: s.layout.clone(),
        tensors,
    };
    encode(CHECKPOINT_MAGIC, &header, &payload)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let (h, payload): (CheckpointHeader, _) = decode(CHECKPOINT_MAGIC, bytes)?;
    let expected: usize = h.tensors.iter().map(|t| t.rows * t.cols * 8).sum();
    if payload.len() < expected {
        return Err(FormatError::Truncated { expected, found: payload.len() }.into());
    }
    if payload.len() > expected {
        return Err(FormatError::Layout(format!("payload holds {} bytes, tensors need {expected}", payload.len())).into());
    }
    let mut stack = GeneratorStack::new(
        Arc::new(h.skeleton),
        h.layout,
        h.fps,
        h.scale,
        h.noise,
        h.conv,
        h.condition,
        h.default_lengths,
        0,
    )
    .map_err(|e| FormatError::Layout(e.to_string()))?;
    if h.completed_blocks > stack.num_levels().div_ceil(2) {
        return Err(FormatError::Header(format!("{} completed blocks exceed the model", h.completed_blocks)).into());
    }
    let mut map = BTreeMap::new();
    let mut offset = 0;
    for t in &h.tensors {
        let n = t.rows * t.cols;
        let data =
            payload[offset..offset + n * 8].chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
        offset += n * 8;
        map.insert(t.name.clone(), Tensor::from_vec(t.rows, t.cols, data));
    }
    if map.len() != stack.named_params("").len() {
        return Err(FormatError::Layout("checkpoint tensors do not match the model architecture".into()).into());
    }
    load_params(&mut stack, "", &map).map_err(|e| FormatError::Layout(e.to_string()))?;
    Ok(Checkpoint { stack, completed_blocks: h.completed_blocks, seed: h.seed })
}

pub fn save_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_file(path, &encode_checkpoint(ck)?)
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_file(path)?)
}

/// Kind and pretty-printed header of any container, for inspection.
pub fn describe(bytes: &[u8]) -> Result<(FileKind, String)> {
    let kind = sniff(bytes)?;
    // full decode, so inconsistent files are rejected rather than shown
    let magic = match kind {
        FileKind::Motion => decode_motion(bytes).map(|_| MOTION_MAGIC)?,
        FileKind::Features => decode_features(bytes).map(|_| FEATURE_MAGIC)?,
        FileKind::Checkpoint => decode_checkpoint(bytes).map(|_| CHECKPOINT_MAGIC)?,
    };
    let (header, payload): (serde_json::Value, _) = decode(magic, bytes)?;
    let mut text = serde_json::to_string_pretty(&header).map_err(|e| FormatError::Header(e.to_string()))?;
    text.push_str(&format!("\npayload_bytes: {}", payload.len()));
    Ok((kind, text))
}
