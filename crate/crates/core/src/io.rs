//! File formats.
//!
//! * DTEN tensors: magic `DTEN`, little-endian u32 version (1), u8 rank,
//!   rank little-endian u32 extents, then the row-major payload as
//!   little-endian f32. A JSON sidecar with the same basename carries
//!   semantic metadata (axis roles, class names).
//! * Masks: binary PGM (P5), one byte per pixel, 255 = void, with a JSON
//!   sidecar mapping label indices to class names.
//! * Images: binary PPM (P6), 8-bit RGB.
//! * Model checkpoints: a directory holding one DTEN file per parameter
//!   block plus a `model.json` header.

use crate::error::{Error, Result};
use crate::tensor::{Tensor, MAX_RANK};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;

const DTEN_MAGIC: &[u8; 4] = b"DTEN";
const DTEN_VERSION: u32 = 1;

// ── JSON helpers ────────────────────────────────────────────────────────────

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Data(format!("serialize {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| Error::Data(format!("read {}: {e}", path.display())))?;
    serde_json::from_str(&text).map_err(|e| Error::Data(format!("parse {}: {e}", path.display())))
}

/// Sidecar metadata for a DTEN tensor.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DtenMeta {
    /// Role of each axis, e.g. `["height", "width", "channel"]`.
    pub axes: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub class_names: Option<Vec<String>>,
}

/// Sidecar metadata for a mask raster.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MaskMeta {
    /// Label index -> class name; the void index is listed separately.
    pub labels: BTreeMap<u8, String>,
    pub void: u8,
}

// ── DTEN ────────────────────────────────────────────────────────────────────

pub fn write_dten(path: &Path, tensor: &Tensor) -> Result<()> {
    let mut buf: Vec<u8> = Vec::with_capacity(16 + tensor.len() * 4);
    buf.extend_from_slice(DTEN_MAGIC);
    buf.extend_from_slice(&DTEN_VERSION.to_le_bytes());
    buf.push(tensor.rank() as u8);
    for &extent in tensor.shape() {
        let e = u32::try_from(extent)
            .map_err(|_| Error::Data(format!("extent {extent} exceeds u32")))?;
        buf.extend_from_slice(&e.to_le_bytes());
    }
    for &v in tensor.values() {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_dten(path: &Path) -> Result<Tensor> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| Error::Data(format!("open {}: {e}", path.display())))?
        .read_to_end(&mut bytes)?;
    let fail = |reason: &str| Error::Data(format!("{}: {reason}", path.display()));
    if bytes.len() < 9 {
        return Err(fail("truncated header"));
    }
    if &bytes[0..4] != DTEN_MAGIC {
        return Err(fail("bad magic"));
    }
    let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
    if version != DTEN_VERSION {
        return Err(fail(&format!("unsupported version {version}")));
    }
    let rank = bytes[8] as usize;
    if rank == 0 || rank > MAX_RANK {
        return Err(fail(&format!("rank {rank} out of range")));
    }
    let header = 9 + rank * 4;
    if bytes.len() < header {
        return Err(fail("truncated extents"));
    }
    let mut shape = Vec::with_capacity(rank);
    for i in 0..rank {
        let off = 9 + i * 4;
        shape.push(u32::from_le_bytes(bytes[off..off + 4].try_into().unwrap()) as usize);
    }
    let count: usize = shape.iter().product();
    if bytes.len() != header + count * 4 {
        return Err(fail(&format!(
            "payload length {} != expected {}",
            bytes.len() - header,
            count * 4
        )));
    }
    let values: Vec<f64> = bytes[header..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    Tensor::new(shape, values)
}

// ── PGM masks / PPM images ──────────────────────────────────────────────────

use crate::annotation::PseudoMask;

pub fn write_mask(path: &Path, mask: &PseudoMask) -> Result<()> {
    let mut buf = format!("P5\n{} {}\n255\n", mask.width(), mask.height()).into_bytes();
    buf.extend_from_slice(mask.labels());
    fs::write(path, buf)?;
    Ok(())
}

fn parse_netpbm_header(bytes: &[u8], magic: &str, path: &Path) -> Result<(usize, usize, usize)> {
    // Returns (width, height, payload offset). Strict: our own writers only.
    let fail = |reason: &str| Error::Data(format!("{}: {reason}", path.display()));
    let mut pos = 0usize;
    let mut next_token = |bytes: &[u8]| -> Result<String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(fail("truncated header"));
        }
        String::from_utf8(bytes[start..pos].to_vec()).map_err(|_| fail("non-ascii header token"))
    };
    if next_token(bytes)? != magic {
        return Err(fail("bad magic"));
    }
    let w: usize = next_token(bytes)?.parse().map_err(|_| fail("bad width"))?;
    let h: usize = next_token(bytes)?.parse().map_err(|_| fail("bad height"))?;
    if next_token(bytes)? != "255" {
        return Err(fail("maxval must be 255"));
    }
    // Exactly one whitespace byte separates the maxval from the payload.
    Ok((w, h, pos + 1))
}

pub fn read_mask(path: &Path) -> Result<PseudoMask> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("read {}: {e}", path.display())))?;
    let (w, h, offset) = parse_netpbm_header(&bytes, "P5", path)?;
    if bytes.len() != offset + w * h {
        return Err(Error::Data(format!("{}: payload length mismatch", path.display())));
    }
    PseudoMask::new(w, h, bytes[offset..].to_vec())
}

/// Write an `[h, w, 3]` tensor of integral 0..=255 intensities as binary PPM.
pub fn write_image_ppm(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w, c) = image.dims3()?;
    if c != 3 {
        return Err(Error::Shape(format!("image must have 3 channels, got {c}")));
    }
    let mut buf = format!("P6\n{w} {h}\n255\n").into_bytes();
    for &v in image.values() {
        if !(0.0..=255.0).contains(&v) || v != v.round() {
            return Err(Error::Data(format!("image intensity {v} is not an 8-bit value")));
        }
        buf.push(v as u8);
    }
    fs::write(path, buf)?;
    Ok(())
}

pub fn read_image_ppm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path).map_err(|e| Error::Data(format!("read {}: {e}", path.display())))?;
    let (w, h, offset) = parse_netpbm_header(&bytes, "P6", path)?;
    if bytes.len() != offset + w * h * 3 {
        return Err(Error::Data(format!("{}: payload length mismatch", path.display())));
    }
    let values: Vec<f64> = bytes[offset..].iter().map(|&b| f64::from(b)).collect();
    Tensor::new(vec![h, w, 3], values)
}

// ── Model checkpoints ───────────────────────────────────────────────────────

use crate::attention::{ConventionalParams, ModelParams, SingleStreamParams, TrainedModel, Variant};

/// `model.json` header of a checkpoint directory.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub variant: Variant,
    pub feature_dim: usize,
    /// Foreground class count scored by the model.
    pub num_classes: usize,
    pub eps: f64,
    pub dropout_rate: f64,
    /// Dataset class names including background.
    pub class_names: Vec<String>,
}

pub fn save_model(dir: &Path, model: &TrainedModel, class_names: &[String]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let header = CheckpointHeader {
        variant: model.variant(),
        feature_dim: model.feature_dim(),
        num_classes: model.num_classes(),
        eps: model.eps().unwrap_or(0.0),
        dropout_rate: model.dropout_rate().unwrap_or(0.0),
        class_names: class_names.to_vec(),
    };
    write_json(&dir.join("model.json"), &header)?;
    match model {
        TrainedModel::Decoupled(p) => {
            write_dten(&dir.join("expansive_w.dten"), &p.expansive_w)?;
            write_dten(&dir.join("expansive_b.dten"), &p.expansive_b)?;
            write_dten(&dir.join("discriminative_w.dten"), &p.discriminative_w)?;
            write_dten(&dir.join("discriminative_b.dten"), &p.discriminative_b)?;
        }
        TrainedModel::Conventional(p) => {
            write_dten(&dir.join("attention_w.dten"), &p.attention_w)?;
            write_dten(&dir.join("attention_b.dten"), &p.attention_b)?;
            write_dten(&dir.join("classifier_w.dten"), &p.classifier_w)?;
            write_dten(&dir.join("classifier_b.dten"), &p.classifier_b)?;
        }
        TrainedModel::SingleStream(p) => {
            write_dten(&dir.join("w.dten"), &p.w)?;
            write_dten(&dir.join("b.dten"), &p.b)?;
        }
    }
    Ok(())
}

pub fn load_model(dir: &Path) -> Result<(TrainedModel, Vec<String>)> {
    let header: CheckpointHeader = read_json(&dir.join("model.json"))?;
    let model = match header.variant {
        Variant::Decoupled => TrainedModel::Decoupled(ModelParams {
            expansive_w: read_dten(&dir.join("expansive_w.dten"))?,
            expansive_b: read_dten(&dir.join("expansive_b.dten"))?,
            discriminative_w: read_dten(&dir.join("discriminative_w.dten"))?,
            discriminative_b: read_dten(&dir.join("discriminative_b.dten"))?,
            dropout_rate: header.dropout_rate,
            eps: header.eps,
        }),
        Variant::Conventional => TrainedModel::Conventional(ConventionalParams {
            attention_w: read_dten(&dir.join("attention_w.dten"))?,
            attention_b: read_dten(&dir.join("attention_b.dten"))?,
            classifier_w: read_dten(&dir.join("classifier_w.dten"))?,
            classifier_b: read_dten(&dir.join("classifier_b.dten"))?,
            eps: header.eps,
        }),
        Variant::SingleStream => TrainedModel::SingleStream(SingleStreamParams {
            w: read_dten(&dir.join("w.dten"))?,
            b: read_dten(&dir.join("b.dten"))?,
            dropout_rate: header.dropout_rate,
        }),
    };
    Ok((model, header.class_names))
}

// ── Dataset manifest ────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SceneEntry {
    pub id: String,
    /// Paths relative to the manifest's directory.
    pub features: String,
    pub image: String,
    pub gt_mask: String,
    /// Present foreground labels.
    pub labels: Vec<u8>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub width: usize,
    pub height: usize,
    /// Total class count including background.
    pub num_classes: usize,
    pub feature_dim: usize,
    pub noise_sigma: f64,
    pub class_names: Vec<String>,
    pub scenes: Vec<SceneEntry>,
}

impl DatasetManifest {
    pub fn save(&self, dataset_dir: &Path) -> Result<()> {
        write_json(&dataset_dir.join("manifest.json"), self)
    }

    pub fn load(dataset_dir: &Path) -> Result<Self> {
        read_json(&dataset_dir.join("manifest.json"))
    }
}
