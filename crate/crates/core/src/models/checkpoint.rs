//! Binary model checkpoints.
//!
//! Layout: the magic bytes `CSCK`, a little-endian `u32` format version, a
//! `u32` descriptor length, a JSON descriptor, then every parameter tensor as
//! raw little-endian `f64` in descriptor order. Parameters round-trip
//! bit-exactly.

use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::{ConvArchitecture, ConvDenoiser, DenoiserSpec, SmallConvNet};

pub const CHECKPOINT_VERSION: u32 = 1;
const MAGIC: &[u8; 4] = b"CSCK";

#[derive(Debug, Clone, PartialEq)]
pub enum Checkpoint {
    Classifier(SmallConvNet),
    Denoiser(ConvDenoiser),
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
enum Descriptor {
    Classifier {
        architecture: ConvArchitecture,
        tensor_lengths: Vec<usize>,
    },
    Denoiser {
        spec: DenoiserSpec,
        tensor_lengths: Vec<usize>,
    },
}

impl Checkpoint {
    fn parts(&self) -> (Descriptor, Vec<&[f64]>) {
        match self {
            Checkpoint::Classifier(net) => {
                let params = net.parameters();
                let d = Descriptor::Classifier {
                    architecture: net.architecture().clone(),
                    tensor_lengths: params.iter().map(|p| p.len()).collect(),
                };
                (d, params)
            }
            Checkpoint::Denoiser(den) => {
                let params = den.parameters();
                let d = Descriptor::Denoiser {
                    spec: den.spec().clone(),
                    tensor_lengths: params.iter().map(|p| p.len()).collect(),
                };
                (d, params)
            }
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let (desc, params) = self.parts();
        let json = serde_json::to_vec(&desc).expect("descriptor serialises");
        let mut out = Vec::with_capacity(12 + json.len() + 8 * params.iter().map(|p| p.len()).sum::<usize>());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&(json.len() as u32).to_le_bytes());
        out.extend_from_slice(&json);
        for p in params {
            for v in p {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        const WHAT: &str = "checkpoint";
        if bytes.len() < 12 {
            return Err(Error::format(WHAT, bytes.len() as u64, "truncated header"));
        }
        if &bytes[..4] != MAGIC {
            return Err(Error::format(WHAT, 0, "bad magic"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().expect("4 bytes"));
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(WHAT, 4, format!("unsupported version {version}")));
        }
        let len = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes")) as usize;
        let body = 12 + len;
        if bytes.len() < body {
            return Err(Error::format(WHAT, bytes.len() as u64, "truncated descriptor"));
        }
        let desc: Descriptor = serde_json::from_slice(&bytes[12..body])
            .map_err(|e| Error::format(WHAT, 12, e.to_string()))?;
        let lengths = match &desc {
            Descriptor::Classifier { tensor_lengths, .. } | Descriptor::Denoiser { tensor_lengths, .. } => {
                tensor_lengths.clone()
            }
        };
        let total: usize = lengths.iter().sum();
        if bytes.len() != body + 8 * total {
            return Err(Error::format(
                WHAT,
                bytes.len() as u64,
                format!("expected {} parameter bytes, found {}", 8 * total, bytes.len() - body),
            ));
        }
        let mut offset = body;
        let mut tensors = Vec::with_capacity(lengths.len());
        for n in lengths {
            let t: Vec<f64> = bytes[offset..offset + 8 * n]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            offset += 8 * n;
            tensors.push(t);
        }
        Ok(match desc {
            Descriptor::Classifier { architecture, .. } => {
                Checkpoint::Classifier(SmallConvNet::from_parts(architecture, tensors)?)
            }
            Descriptor::Denoiser { spec, .. } => Checkpoint::Denoiser(ConvDenoiser::from_parts(spec, tensors)?),
        })
    }

    pub fn into_classifier(self) -> Result<SmallConvNet> {
        match self {
            Checkpoint::Classifier(net) => Ok(net),
            Checkpoint::Denoiser(_) => Err(Error::Config("checkpoint holds a denoiser, not a classifier".into())),
        }
    }

    pub fn into_denoiser(self) -> Result<ConvDenoiser> {
        match self {
            Checkpoint::Denoiser(d) => Ok(d),
            Checkpoint::Classifier(_) => Err(Error::Config("checkpoint holds a classifier, not a denoiser".into())),
        }
    }
}

pub fn save_checkpoint(path: &Path, checkpoint: &Checkpoint) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&checkpoint.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::Classifier;
    use crate::tensor::{Image, Shape};

    #[test]
    fn classifier_round_trip_is_bit_exact() {
        let shape = Shape::new(8, 8, 1);
        let net = SmallConvNet::new(ConvArchitecture::desk(shape, 4), 11).unwrap();
        let back = Checkpoint::from_bytes(&Checkpoint::Classifier(net.clone()).to_bytes())
            .unwrap()
            .into_classifier()
            .unwrap();
        assert_eq!(back, net);
        let x = Image::from_fn(shape, |y, x, _| ((y * x) % 5) as f64 / 5.0);
        let (a, b) = (net.logits(&x), back.logits(&x));
        assert!(a.iter().zip(&b).all(|(u, v)| u.to_bits() == v.to_bits()));
    }

    #[test]
    fn denoiser_round_trip() {
        let mut spec = DenoiserSpec::desk(Shape::new(4, 4, 3));
        spec.trained_sigma = Some(0.5);
        let d = ConvDenoiser::new(spec, 2).unwrap();
        let back = Checkpoint::from_bytes(&Checkpoint::Denoiser(d.clone()).to_bytes()).unwrap();
        assert_eq!(back, Checkpoint::Denoiser(d));
    }

    #[test]
    fn corrupt_input_reports_offset() {
        let net = SmallConvNet::new(ConvArchitecture::desk(Shape::new(4, 4, 1), 2), 0).unwrap();
        let mut bytes = Checkpoint::Classifier(net).to_bytes();
        bytes.pop();
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { .. })));
        bytes[0] = b'X';
        assert!(matches!(Checkpoint::from_bytes(&bytes), Err(Error::Format { offset: 0, .. })));
    }
}
