//! File formats.
//!
//! Detection files are JSON:
//!
//! ```json
//! {
//!   "num_classes": 2,
//!   "class_names": ["person", "rider"],
//!   "images": [
//!     {
//!       "image_id": "frame_0001",
//!       "detections": [
//!         { "box": [x1, y1, x2, y2], "probs": [0.9, 0.1] }
//!       ]
//!     }
//!   ]
//! }
//! ```
//!
//! `class_names` is optional. Fused output adds an integer `"label"` per
//! detection, always the argmax of `probs`.
//!
//! Tensor files are little-endian binary: the magic `FTNS`, a `u32` version
//! (1), a `u8` dtype code (0 = f32), a `u8` rank, `rank` `u64` dimensions,
//! then the row-major `f32` payload with no padding.

use std::fs;
use std::path::Path;

use log::warn;
use serde::{Deserialize, Serialize};

use crate::ema::EmaState;
use crate::error::{Error, Result};
use crate::fusion::{argmax, Detection, FusedLabel};
use crate::geometry::BBox;
use crate::pifa::PrototypeBank;

/// Allowed deviation of a probability vector's sum from 1.
pub const PROB_SUM_TOLERANCE: f64 = 1e-6;

pub const TENSOR_MAGIC: &[u8; 4] = b"FTNS";
pub const TENSOR_VERSION: u32 = 1;
pub const DTYPE_F32: u8 = 0;

#[derive(Debug, Clone, PartialEq)]
pub struct ImageDetections {
    pub image_id: String,
    pub detections: Vec<Detection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectionFile {
    pub num_classes: usize,
    pub class_names: Option<Vec<String>>,
    pub images: Vec<ImageDetections>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ReadOptions {
    /// Rescale probability vectors whose sum is off by more than
    /// [`PROB_SUM_TOLERANCE`] instead of rejecting them.
    pub renormalize: bool,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawFile {
    num_classes: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    class_names: Option<Vec<String>>,
    images: Vec<RawImage>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawImage {
    image_id: String,
    detections: Vec<RawDetection>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawDetection {
    #[serde(rename = "box")]
    bbox: [f64; 4],
    probs: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    label: Option<usize>,
}

pub fn read_detections(path: impl AsRef<Path>, opts: ReadOptions) -> Result<DetectionFile> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, path, opts)
}

/// Parses and validates detection JSON. `path` is only used in error
/// messages.
pub fn parse_detections(text: &str, path: &Path, opts: ReadOptions) -> Result<DetectionFile> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let raw: RawFile = serde_path_to_error::deserialize(de).map_err(|e| Error::Parse {
        path: path.to_path_buf(),
        location: e.path().to_string(),
        message: e.inner().to_string(),
    })?;

    let invalid = |location: String, message: String| Error::Validation {
        path: path.to_path_buf(),
        location,
        message,
    };

    if raw.num_classes == 0 {
        return Err(invalid("num_classes".into(), "must be at least 1".into()));
    }
    if let Some(names) = &raw.class_names {
        if names.len() != raw.num_classes {
            return Err(invalid(
                "class_names".into(),
                format!("{} names for {} classes", names.len(), raw.num_classes),
            ));
        }
    }

    let mut images = Vec::with_capacity(raw.images.len());
    for (i, img) in raw.images.into_iter().enumerate() {
        let mut detections = Vec::with_capacity(img.detections.len());
        for (j, d) in img.detections.into_iter().enumerate() {
            let at = |field: &str| format!("images[{i}].detections[{j}].{field}");
            let bbox = BBox::from_array(d.bbox).map_err(|e| invalid(at("box"), e.to_string()))?;
            let mut probs = d.probs;
            if probs.len() != raw.num_classes {
                return Err(invalid(
                    at("probs"),
                    format!("{} entries, expected {}", probs.len(), raw.num_classes),
                ));
            }
            if let Some(p) = probs.iter().find(|p| !(0.0..=1.0).contains(*p)) {
                return Err(invalid(at("probs"), format!("entry {p} outside [0, 1]")));
            }
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > PROB_SUM_TOLERANCE {
                if !opts.renormalize || sum <= 0.0 {
                    return Err(invalid(
                        at("probs"),
                        format!(
                            "probabilities sum to {sum}, expected 1 within {PROB_SUM_TOLERANCE}"
                        ),
                    ));
                }
                warn!(
                    "{}: renormalized {} (sum was {sum})",
                    path.display(),
                    at("probs")
                );
                probs.iter_mut().for_each(|p| *p /= sum);
            }
            if let Some(label) = d.label {
                if label != argmax(&probs) {
                    return Err(invalid(
                        at("label"),
                        format!(
                            "label {label} is not the argmax of probs ({})",
                            argmax(&probs)
                        ),
                    ));
                }
            }
            detections.push(Detection { bbox, probs });
        }
        images.push(ImageDetections {
            image_id: img.image_id,
            detections,
        });
    }
    Ok(DetectionFile {
        num_classes: raw.num_classes,
        class_names: raw.class_names,
        images,
    })
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::io(path, std::io::Error::other(e)))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_detections(path: impl AsRef<Path>, file: &DetectionFile) -> Result<()> {
    let raw = RawFile {
        num_classes: file.num_classes,
        class_names: file.class_names.clone(),
        images: file
            .images
            .iter()
            .map(|img| RawImage {
                image_id: img.image_id.clone(),
                detections: img
                    .detections
                    .iter()
                    .map(|d| RawDetection {
                        bbox: d.bbox.to_array(),
                        probs: d.probs.clone(),
                        label: None,
                    })
                    .collect(),
            })
            .collect(),
    };
    write_json(path.as_ref(), &raw)
}

/// Per-image fused labels, in file order.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedImage {
    pub image_id: String,
    pub labels: Vec<FusedLabel>,
}

/// Writes fused pseudo-labels in the detection schema plus `label`, which
/// is recomputed as the argmax of `probs`.
pub fn write_fused(
    path: impl AsRef<Path>,
    images: &[FusedImage],
    num_classes: usize,
    class_names: Option<&[String]>,
) -> Result<()> {
    let raw = RawFile {
        num_classes,
        class_names: class_names.map(<[String]>::to_vec),
        images: images
            .iter()
            .map(|img| RawImage {
                image_id: img.image_id.clone(),
                detections: img
                    .labels
                    .iter()
                    .map(|f| RawDetection {
                        bbox: f.bbox.to_array(),
                        probs: f.probs.clone(),
                        label: Some(argmax(&f.probs)),
                    })
                    .collect(),
            })
            .collect(),
    };
    write_json(path.as_ref(), &raw)
}

/// Dense f32 tensor as stored on disk.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    pub dims: Vec<usize>,
    pub data: Vec<f32>,
}

impl Tensor {
    pub fn new(dims: Vec<usize>, data: Vec<f32>) -> Result<Self> {
        let expected: usize = dims.iter().product();
        if expected != data.len() {
            return Err(Error::invalid(format!(
                "tensor of shape {dims:?} needs {expected} values, got {}",
                data.len()
            )));
        }
        if dims.len() > u8::MAX as usize {
            return Err(Error::invalid("tensor rank exceeds 255"));
        }
        Ok(Self { dims, data })
    }

    pub fn from_f64(dims: Vec<usize>, data: &[f64]) -> Result<Self> {
        Self::new(dims, data.iter().map(|&v| v as f32).collect())
    }

    pub fn scalar(value: f32) -> Self {
        Self {
            dims: Vec::new(),
            data: vec![value],
        }
    }

    pub fn to_f64(&self) -> Vec<f64> {
        self.data.iter().map(|&v| f64::from(v)).collect()
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(10 + 8 * self.dims.len() + 4 * self.data.len());
        out.extend_from_slice(TENSOR_MAGIC);
        out.extend_from_slice(&TENSOR_VERSION.to_le_bytes());
        out.push(DTYPE_F32);
        out.push(self.dims.len() as u8);
        for &d in &self.dims {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in &self.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let header = |n: usize| -> Result<&[u8]> {
            bytes
                .get(..n)
                .ok_or_else(|| Error::Format(format!("header truncated at {} bytes", bytes.len())))
        };
        if &header(4)?[..4] != TENSOR_MAGIC {
            return Err(Error::Format(format!("bad magic {:02x?}", &bytes[..4])));
        }
        let h = header(10)?;
        let version = u32::from_le_bytes(h[4..8].try_into().expect("4 bytes"));
        if version != TENSOR_VERSION {
            return Err(Error::Format(format!("unsupported version {version}")));
        }
        if h[8] != DTYPE_F32 {
            return Err(Error::Format(format!("unsupported dtype code {}", h[8])));
        }
        let ndim = h[9] as usize;
        let h = header(10 + 8 * ndim)?;
        let dims: Vec<usize> = h[10..]
            .chunks_exact(8)
            .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
            .collect();
        let count = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
        let payload = &bytes[10 + 8 * ndim..];
        let expected = count
            .checked_mul(4)
            .ok_or_else(|| Error::Format(format!("dims {dims:?} overflow")))?;
        if payload.len() != expected {
            return Err(Error::Truncated {
                expected,
                actual: payload.len(),
            });
        }
        let data = payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        Ok(Self { dims, data })
    }
}

pub fn write_tensor(tensor: &Tensor, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, tensor.encode()).map_err(|e| Error::io(path, e))
}

pub fn read_tensor(path: impl AsRef<Path>) -> Result<Tensor> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Tensor::decode(&bytes)
}

/// Stores a bank as a `K x C` prototype tensor and a `K` mask tensor
/// (1.0 for initialized rows). Momentum is not stored.
pub fn write_prototype_bank(
    bank: &PrototypeBank,
    prototypes_path: impl AsRef<Path>,
    mask_path: impl AsRef<Path>,
) -> Result<()> {
    let k = bank.num_classes();
    write_tensor(
        &Tensor::from_f64(vec![k, bank.channels()], bank.prototypes())?,
        prototypes_path,
    )?;
    let mask: Vec<f32> = bank
        .initialized()
        .iter()
        .map(|&b| if b { 1.0 } else { 0.0 })
        .collect();
    write_tensor(&Tensor::new(vec![k], mask)?, mask_path)
}

/// Loads a bank. Without a mask, every row is treated as initialized.
pub fn read_prototype_bank(
    prototypes_path: impl AsRef<Path>,
    mask_path: Option<&Path>,
    momentum: f64,
) -> Result<PrototypeBank> {
    let protos = read_tensor(prototypes_path)?;
    if protos.dims.len() != 2 {
        return Err(Error::invalid(format!(
            "prototype tensor must be K x C, got shape {:?}",
            protos.dims
        )));
    }
    let (k, c) = (protos.dims[0], protos.dims[1]);
    let mask = match mask_path {
        Some(p) => {
            let m = read_tensor(p)?;
            if m.dims != [k] {
                return Err(Error::invalid(format!(
                    "mask shape {:?}, expected [{k}]",
                    m.dims
                )));
            }
            m.data.iter().map(|&v| v != 0.0).collect()
        }
        None => vec![true; k],
    };
    PrototypeBank::from_parts(k, c, protos.to_f64(), mask, momentum)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct EmaHeader {
    alpha: f64,
    interval: u64,
    counter: u64,
    num_params: usize,
}

/// Stores the teacher vector as a tensor file and the schedule scalars as
/// a small JSON header.
pub fn write_ema_state(
    state: &EmaState,
    params_path: impl AsRef<Path>,
    header_path: impl AsRef<Path>,
) -> Result<()> {
    write_tensor(
        &Tensor::from_f64(vec![state.teacher().len()], state.teacher())?,
        params_path,
    )?;
    write_json(
        header_path.as_ref(),
        &EmaHeader {
            alpha: state.alpha(),
            interval: state.interval(),
            counter: state.counter(),
            num_params: state.teacher().len(),
        },
    )
}

pub fn read_ema_state(
    params_path: impl AsRef<Path>,
    header_path: impl AsRef<Path>,
) -> Result<EmaState> {
    let header_path = header_path.as_ref();
    let text = fs::read_to_string(header_path).map_err(|e| Error::io(header_path, e))?;
    let header: EmaHeader = serde_json::from_str(&text).map_err(|e| Error::Parse {
        path: header_path.to_path_buf(),
        location: ".".into(),
        message: e.to_string(),
    })?;
    let params = read_tensor(params_path)?;
    if params.dims != [header.num_params] {
        return Err(Error::invalid(format!(
            "EMA parameter tensor shape {:?}, header says [{}]",
            params.dims, header.num_params
        )));
    }
    EmaState::with_counter(
        params.to_f64(),
        header.alpha,
        header.interval,
        header.counter,
    )
}
