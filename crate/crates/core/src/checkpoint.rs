//! Single-file model checkpoints.
//!
//! Layout: one line of JSON (the header) followed by the raw tensor payload,
//! every value a little-endian `f64`, tensors in header order. The header
//! names each tensor with its shape, so a file can be inspected with `head -1`.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::detector::DetectorModel;
use crate::encoder::EncoderParams;
use crate::error::{Error, Result};
use crate::langparse::Vocabulary;
use crate::nn::{Mlp, Parameters};
use crate::policy::{QNetwork, RasterNet, Variant, OBJECT_LAYERS};
use crate::detector::{RELATION_LAYERS, THRESHOLD_LAYERS};

pub const FORMAT_TAG: &str = "ngd-ckpt";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelKind {
    #[serde(rename = "detector")]
    Detector,
    #[serde(rename = "policy-object")]
    PolicyObject,
    #[serde(rename = "policy-raster")]
    PolicyRaster,
}

impl ModelKind {
    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Detector => "detector",
            ModelKind::PolicyObject => "policy-object",
            ModelKind::PolicyRaster => "policy-raster",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Header {
    pub format: String,
    pub version: u32,
    pub kind: ModelKind,
    /// SHA-256 of the configuration that produced the model.
    pub config_digest: String,
    /// Vocabulary of a detector, without the reserved entries.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub vocab: Option<Vec<String>>,
    pub tensors: Vec<TensorInfo>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Model {
    Detector(DetectorModel),
    Policy(QNetwork),
}

impl Model {
    pub fn kind(&self) -> ModelKind {
        match self {
            Model::Detector(_) => ModelKind::Detector,
            Model::Policy(q) => match q.variant() {
                Variant::Object => ModelKind::PolicyObject,
                Variant::Raster => ModelKind::PolicyRaster,
            },
        }
    }

    fn params(&self) -> &dyn ParamView {
        match self {
            Model::Detector(d) => d,
            Model::Policy(q) => q,
        }
    }
}

/// Object-safe slice of [`Parameters`] used for writing.
trait ParamView {
    fn tensors(&self) -> Vec<(String, ndarray::ArrayViewD<'_, f64>)>;
}

impl<P: Parameters> ParamView for P {
    fn tensors(&self) -> Vec<(String, ndarray::ArrayViewD<'_, f64>)> {
        self.named_tensors()
    }
}

/// Hex SHA-256 of the JSON form of a configuration value.
pub fn config_digest<T: Serialize>(config: &T) -> Result<String> {
    let bytes = serde_json::to_vec(config)?;
    Ok(hex::encode(Sha256::digest(&bytes)))
}

pub fn to_bytes(model: &Model, config_digest: &str) -> Result<Vec<u8>> {
    let tensors = model.params().tensors();
    let header = Header {
        format: FORMAT_TAG.into(),
        version: CHECKPOINT_VERSION,
        kind: model.kind(),
        config_digest: config_digest.into(),
        vocab: match model {
            Model::Detector(d) => Some(d.vocab.known_tokens().to_vec()),
            Model::Policy(_) => None,
        },
        tensors: tensors.iter().map(|(n, t)| TensorInfo { name: n.clone(), shape: t.shape().to_vec() }).collect(),
    };
    let mut out = serde_json::to_vec(&header)?;
    out.push(b'\n');
    for (_, t) in &tensors {
        for v in t.iter() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

/// Write via a sibling temporary file and rename, so readers never see a
/// half-written checkpoint.
pub fn save_checkpoint(path: &Path, model: &Model, config_digest: &str) -> Result<()> {
    let bytes = to_bytes(model, config_digest)?;
    let tmp = path.with_extension("ckpt.tmp");
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path)?;
    Ok(())
}

fn skeleton(header: &Header) -> Result<Model> {
    Ok(match header.kind {
        ModelKind::Detector => {
            let tokens = header.vocab.clone().ok_or_else(|| Error::Format("detector checkpoint without vocabulary".into()))?;
            let vocab = Vocabulary::from_tokens(tokens);
            Model::Detector(DetectorModel {
                encoder: EncoderParams::zeros(vocab.len()),
                vocab,
                relation: Mlp::zeros(&RELATION_LAYERS),
                threshold: Mlp::zeros(&THRESHOLD_LAYERS),
            })
        }
        ModelKind::PolicyObject => Model::Policy(QNetwork::Object(Mlp::zeros(&OBJECT_LAYERS))),
        ModelKind::PolicyRaster => {
            let mut r = RasterNet::new(&mut crate::rng::stream(0, "checkpoint.skeleton"));
            r.fill(0.0);
            Model::Policy(QNetwork::Raster(r))
        }
    })
}

pub fn parse_header(bytes: &[u8]) -> Result<(Header, usize)> {
    let end = bytes.iter().position(|&b| b == b'\n').ok_or_else(|| Error::Format("missing header line".into()))?;
    let value: serde_json::Value =
        serde_json::from_slice(&bytes[..end]).map_err(|e| Error::Format(format!("corrupted header: {e}")))?;
    if value.get("format").and_then(|f| f.as_str()) != Some(FORMAT_TAG) {
        return Err(Error::Format(format!("not an {FORMAT_TAG} file")));
    }
    match value.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == CHECKPOINT_VERSION as u64 => {}
        Some(v) => return Err(Error::Format(format!("unsupported checkpoint version {v}"))),
        None => return Err(Error::Format("header has no version".into())),
    }
    let header: Header = serde_json::from_value(value).map_err(|e| Error::Format(format!("corrupted header: {e}")))?;
    Ok((header, end + 1))
}

pub fn from_bytes(bytes: &[u8]) -> Result<(Header, Model)> {
    let (header, start) = parse_header(bytes)?;
    let mut model = skeleton(&header)?;
    let expected: Vec<TensorInfo> = model
        .params()
        .tensors()
        .iter()
        .map(|(n, t)| TensorInfo { name: n.clone(), shape: t.shape().to_vec() })
        .collect();
    if expected != header.tensors {
        return Err(Error::Format(format!("tensor layout does not match a {} model", header.kind.name())));
    }
    let payload = &bytes[start..];
    let count: usize = expected.iter().map(|t| t.shape.iter().product::<usize>()).sum();
    if payload.len() != count * 8 {
        return Err(Error::Format(format!("payload is {} bytes, expected {}", payload.len(), count * 8)));
    }
    let values: Vec<f64> =
        payload.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk"))).collect();
    match &mut model {
        Model::Detector(d) => d.set_flat(&values)?,
        Model::Policy(q) => q.set_flat(&values)?,
    }
    Ok((header, model))
}

pub fn load_checkpoint(path: &Path) -> Result<(Header, Model)> {
    from_bytes(&fs::read(path)?)
}

pub fn load_detector(path: &Path) -> Result<DetectorModel> {
    match load_checkpoint(path)?.1 {
        Model::Detector(d) => Ok(d),
        other => Err(Error::KindMismatch { expected: "detector".into(), found: other.kind().name().into() }),
    }
}

pub fn load_policy(path: &Path) -> Result<QNetwork> {
    match load_checkpoint(path)?.1 {
        Model::Policy(q) => Ok(q),
        other => Err(Error::KindMismatch { expected: "policy".into(), found: other.kind().name().into() }),
    }
}
