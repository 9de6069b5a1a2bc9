//! Checkpoint container.
//!
//! ```text
//! bytes 0..8    magic "MPCSCKPT"
//! bytes 8..12   format version, u32 little-endian
//! bytes 12..20  manifest length N, u64 little-endian
//! next N bytes  UTF-8 JSON manifest
//! remainder     tensor payload, f64 little-endian, in manifest order
//! ```
//!
//! The manifest carries model descriptors, a tensor table
//! (`name`, `shape`, `offset` in elements), the resolved run configuration,
//! epoch, RNG state and metric history.

use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use super::encoder::{ConvEncoder, EncoderAdapter, EncoderNet, LinearEncoder, WeightsSource};
use super::heads::{ClassifierHead, ProjectionHead};
use super::{visit_child, visit_child_mut, Linear, Params};
use crate::error::{Error, Result};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 8] = b"MPCSCKPT";

/// Training RNG streams derive from `(seed, epoch, worker)`; resuming at
/// `next_epoch` reproduces them.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
pub struct RngState {
    pub seed: u64,
    pub next_epoch: u64,
}

/// One metric-log line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub epoch: usize,
    pub split: String,
    pub loss: Option<f64>,
    pub ila: Option<f64>,
    pub pla: Option<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum HeadState {
    None,
    Projection(ProjectionHead),
    Classifier(ClassifierHead),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub encoder: EncoderAdapter,
    pub head: HeadState,
    pub config: serde_json::Value,
    pub epoch: usize,
    pub rng: RngState,
    pub metrics: Vec<MetricRecord>,
    pub class_names: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum EncoderDesc {
    Conv {
        name: String,
        feature_dim: usize,
        input_size: usize,
        weights_source: WeightsSource,
    },
    Linear {
        name: String,
        feature_dim: usize,
        input_size: usize,
        weights_source: WeightsSource,
    },
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum HeadDesc {
    None,
    Projection {
        input: usize,
        hidden: usize,
        output: usize,
        bias: bool,
    },
    Classifier {
        input: usize,
        n_classes: usize,
        dropout: f64,
    },
}

#[derive(Debug, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Debug, Serialize, Deserialize)]
struct Manifest {
    format_version: u32,
    encoder: EncoderDesc,
    head: HeadDesc,
    tensors: Vec<TensorEntry>,
    config: serde_json::Value,
    epoch: usize,
    rng: RngState,
    metrics: Vec<MetricRecord>,
    #[serde(default)]
    class_names: Vec<String>,
}

/// Encoder and head as one parameter tree (`encoder.*`, `head.*`).
struct Bundle<'a> {
    encoder: &'a mut EncoderNet,
    head: &'a mut HeadState,
}

impl Params for Bundle<'_> {
    fn visit(&self, f: &mut dyn FnMut(&str, &[usize], &[f64])) {
        visit_child("encoder", &*self.encoder, f);
        match &*self.head {
            HeadState::None => {}
            HeadState::Projection(h) => visit_child("head", h, f),
            HeadState::Classifier(h) => visit_child("head", h, f),
        }
    }

    fn visit_mut(&mut self, f: &mut dyn FnMut(&str, &mut [f64])) {
        visit_child_mut("encoder", self.encoder, f);
        match self.head {
            HeadState::None => {}
            HeadState::Projection(h) => visit_child_mut("head", h, f),
            HeadState::Classifier(h) => visit_child_mut("head", h, f),
        }
    }
}

fn zero_linear(input: usize, output: usize, bias: bool) -> Linear {
    Linear::from_weights(Array2::zeros((output, input)), bias.then(|| Array1::zeros(output)))
}

impl Checkpoint {
    pub fn new(encoder: EncoderAdapter, head: HeadState) -> Self {
        Self {
            encoder,
            head,
            config: serde_json::Value::Null,
            epoch: 0,
            rng: RngState::default(),
            metrics: Vec::new(),
            class_names: Vec::new(),
        }
    }

    fn manifest(&self, tensors: Vec<TensorEntry>) -> Manifest {
        let enc = &self.encoder;
        let encoder = match &enc.net {
            EncoderNet::Conv(_) => EncoderDesc::Conv {
                name: enc.name.clone(),
                feature_dim: enc.feature_dim(),
                input_size: enc.input_size(),
                weights_source: enc.weights_source,
            },
            EncoderNet::Linear(_) => EncoderDesc::Linear {
                name: enc.name.clone(),
                feature_dim: enc.feature_dim(),
                input_size: enc.input_size(),
                weights_source: enc.weights_source,
            },
        };
        let head = match &self.head {
            HeadState::None => HeadDesc::None,
            HeadState::Projection(h) => HeadDesc::Projection {
                input: h.input_dim(),
                hidden: h.hidden.output_dim(),
                output: h.output_dim(),
                bias: h.has_bias(),
            },
            HeadState::Classifier(h) => HeadDesc::Classifier {
                input: h.linear.input_dim(),
                n_classes: h.n_classes(),
                dropout: h.dropout_rate,
            },
        };
        Manifest {
            format_version: CHECKPOINT_VERSION,
            encoder,
            head,
            tensors,
            config: self.config.clone(),
            epoch: self.epoch,
            rng: self.rng,
            metrics: self.metrics.clone(),
            class_names: self.class_names.clone(),
        }
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut enc = self.encoder.net.clone();
        let mut head = self.head.clone();
        let bundle = Bundle {
            encoder: &mut enc,
            head: &mut head,
        };
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let mut offset = 0;
        bundle.visit(&mut |name, shape, v| {
            tensors.push(TensorEntry {
                name: name.to_string(),
                shape: shape.to_vec(),
                offset,
            });
            offset += v.len();
            for x in v {
                payload.extend_from_slice(&x.to_le_bytes());
            }
        });
        let manifest = serde_json::to_vec(&self.manifest(tensors))?;
        let mut out = Vec::with_capacity(20 + manifest.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(manifest.len() as u64).to_le_bytes());
        out.extend_from_slice(&manifest);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("missing magic header"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported format version {version}"
            )));
        }
        let mlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let body = &bytes[20..];
        if body.len() < mlen {
            return Err(bad("truncated manifest"));
        }
        let manifest: Manifest = serde_json::from_slice(&body[..mlen])?;
        let payload = &body[mlen..];
        if !payload.len().is_multiple_of(8) {
            return Err(bad("payload is not a whole number of f64 values"));
        }
        let values: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();

        let (mut net, name, source) = match manifest.encoder {
            EncoderDesc::Conv {
                name,
                feature_dim,
                input_size,
                weights_source,
            } => {
                let conv = ConvEncoder::zeros(feature_dim, input_size);
                (EncoderNet::Conv(conv), name, weights_source)
            }
            EncoderDesc::Linear {
                name,
                feature_dim,
                input_size,
                weights_source,
            } => (
                EncoderNet::Linear(LinearEncoder {
                    linear: zero_linear(input_size * input_size * 3, feature_dim, true),
                    input_size,
                }),
                name,
                weights_source,
            ),
        };
        let mut head = match manifest.head {
            HeadDesc::None => HeadState::None,
            HeadDesc::Projection {
                input,
                hidden,
                output,
                bias,
            } => HeadState::Projection(ProjectionHead {
                hidden: zero_linear(input, hidden, bias),
                output: zero_linear(hidden, output, bias),
            }),
            HeadDesc::Classifier {
                input,
                n_classes,
                dropout,
            } => HeadState::Classifier(ClassifierHead {
                dropout_rate: dropout,
                linear: zero_linear(input, n_classes, true),
            }),
        };

        let table: BTreeMap<&str, &TensorEntry> =
            manifest.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        let mut err = None;
        let mut filled = 0;
        {
            let mut bundle = Bundle {
                encoder: &mut net,
                head: &mut head,
            };
            bundle.visit_mut(&mut |name, dst| {
                match table.get(name) {
                    Some(t) if t.shape.iter().product::<usize>() == dst.len()
                        && t.offset + dst.len() <= values.len() =>
                    {
                        dst.copy_from_slice(&values[t.offset..t.offset + dst.len()]);
                        filled += 1;
                    }
                    _ => {
                        err.get_or_insert_with(|| format!("tensor {name} missing or misshapen"));
                    }
                }
            });
        }
        if let Some(e) = err {
            return Err(Error::Checkpoint(e));
        }
        if filled != manifest.tensors.len() {
            return Err(bad("manifest lists tensors the model does not have"));
        }
        Ok(Self {
            encoder: EncoderAdapter::from_net(name, net, source),
            head,
            config: manifest.config,
            epoch: manifest.epoch,
            rng: manifest.rng,
            metrics: manifest.metrics,
            class_names: manifest.class_names,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()?;
        }
        std::fs::rename(tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let mut bytes = Vec::new();
        std::fs::File::open(path)?.read_to_end(&mut bytes)?;
        let mut ck = Self::from_bytes(&bytes)?;
        ck.encoder.weights_source = WeightsSource::Checkpoint;
        Ok(ck)
    }

    /// SHA-256 of the encoder parameters.
    pub fn encoder_hash(&self) -> String {
        super::params_hash(&self.encoder)
    }

    pub fn projection_head(&self) -> Option<&ProjectionHead> {
        match &self.head {
            HeadState::Projection(h) => Some(h),
            _ => None,
        }
    }

    pub fn classifier_head(&self) -> Option<&ClassifierHead> {
        match &self.head {
            HeadState::Classifier(h) => Some(h),
            _ => None,
        }
    }
}
