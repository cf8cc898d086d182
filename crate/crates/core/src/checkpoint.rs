//! Versioned binary containers for network checkpoints and descriptor weights.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic     8 bytes  "DTRBCKPT"
//! version   u32
//! header    u32 length + UTF-8 JSON
//! arrays    u32 count, then per array:
//!             u32 name length + UTF-8 name
//!             u32 rank + u32 dims
//!             f32 values
//! crc32     u32 over every preceding byte
//! ```

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{NamedConv, Network, NetworkSpec, ParameterStore};
use crate::optim::AdamState;
use crate::tensor::Conv2d;

const MAGIC: &[u8; 8] = b"DTRBCKPT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f64>,
}

pub(crate) fn encode_container(header: &str, arrays: &[NamedArray]) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    put_str(&mut out, header);
    out.extend_from_slice(&(arrays.len() as u32).to_le_bytes());
    for a in arrays {
        put_str(&mut out, &a.name);
        out.extend_from_slice(&(a.dims.len() as u32).to_le_bytes());
        for d in &a.dims {
            out.extend_from_slice(&(*d as u32).to_le_bytes());
        }
        for v in &a.values {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.buf.len() {
            return Err(Error::Checkpoint("truncated container".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn string(&mut self) -> Result<String> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 in container".into()))
    }
}

pub(crate) fn decode_container(bytes: &[u8]) -> Result<(String, Vec<NamedArray>)> {
    if bytes.len() < MAGIC.len() + 8 || &bytes[..MAGIC.len()] != MAGIC {
        return Err(Error::Checkpoint("not a checkpoint container".into()));
    }
    let (body, tail) = bytes.split_at(bytes.len() - 4);
    let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let mut r = Reader {
        buf: body,
        pos: MAGIC.len(),
    };
    let version = r.u32()?;
    if version != FORMAT_VERSION {
        return Err(Error::Checkpoint(format!(
            "format version {version}, this build reads {FORMAT_VERSION}"
        )));
    }
    let header = r.string()?;
    let count = r.u32()? as usize;
    let mut arrays = Vec::with_capacity(count);
    for _ in 0..count {
        let name = r.string()?;
        let rank = r.u32()? as usize;
        let dims = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let raw = r.take(n * 4)?;
        let values = raw
            .chunks_exact(4)
            .map(|c| f64::from(f32::from_le_bytes(c.try_into().expect("4 bytes"))))
            .collect();
        arrays.push(NamedArray { name, dims, values });
    }
    if r.pos != body.len() {
        return Err(Error::Checkpoint("trailing bytes in container".into()));
    }
    Ok((header, arrays))
}

pub(crate) fn conv_arrays(prefix: &str, convs: &[NamedConv]) -> Vec<NamedArray> {
    convs
        .iter()
        .flat_map(|c| {
            let k = &c.conv;
            [
                NamedArray {
                    name: format!("{prefix}{}.weight", c.name),
                    dims: vec![k.out_ch, k.in_ch, k.kernel, k.kernel],
                    values: k.weight.clone(),
                },
                NamedArray {
                    name: format!("{prefix}{}.bias", c.name),
                    dims: vec![k.out_ch],
                    values: k.bias.clone(),
                },
            ]
        })
        .collect()
}

/// Rebuilds convolutions from `(weight, bias)` array pairs.
pub(crate) fn convs_from_arrays(prefix: &str, arrays: &[NamedArray]) -> Result<Vec<NamedConv>> {
    let mut out = Vec::new();
    let mut it = arrays.iter().filter(|a| a.name.starts_with(prefix));
    while let Some(w) = it.next() {
        let b = it
            .next()
            .ok_or_else(|| Error::Checkpoint(format!("{} has no bias array", w.name)))?;
        let name = w.name[prefix.len()..]
            .strip_suffix(".weight")
            .ok_or_else(|| Error::Checkpoint(format!("unexpected array {}", w.name)))?;
        if b.name != format!("{prefix}{name}.bias") || w.dims.len() != 4 || w.dims[2] != w.dims[3] {
            return Err(Error::Checkpoint(format!("malformed arrays for {name}")));
        }
        if b.dims != [w.dims[0]] {
            return Err(Error::Checkpoint(format!("bias shape mismatch for {name}")));
        }
        out.push(NamedConv {
            name: name.to_string(),
            conv: Conv2d {
                out_ch: w.dims[0],
                in_ch: w.dims[1],
                kernel: w.dims[2],
                weight: w.values.clone(),
                bias: b.values.clone(),
            },
        });
    }
    Ok(out)
}

#[derive(Debug, Serialize, Deserialize)]
struct AdamHeader {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: u64,
    skipped: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct CheckpointHeader {
    kind: String,
    spec: NetworkSpec,
    step: u64,
    meta: BTreeMap<String, String>,
    adam: Option<AdamHeader>,
}

/// Network parameters plus training state.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub network: Network,
    pub optimizer: Option<AdamState>,
    /// Completed training iterations.
    pub step: u64,
    pub meta: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(network: Network) -> Self {
        Self {
            network,
            optimizer: None,
            step: 0,
            meta: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = CheckpointHeader {
            kind: "network".into(),
            spec: self.network.spec.clone(),
            step: self.step,
            meta: self.meta.clone(),
            adam: self.optimizer.as_ref().map(|a| AdamHeader {
                lr: a.lr,
                beta1: a.beta1,
                beta2: a.beta2,
                eps: a.eps,
                step: a.step,
                skipped: a.skipped,
            }),
        };
        let mut arrays = conv_arrays("param.", self.network.params.convs());
        if let Some(adam) = &self.optimizer {
            let names: Vec<String> = self.network.params.arrays().map(|(n, _)| n).collect();
            for (tag, moments) in [("adam.m.", &adam.m), ("adam.v.", &adam.v)] {
                for (name, values) in names.iter().zip(moments) {
                    arrays.push(NamedArray {
                        name: format!("{tag}{name}"),
                        dims: vec![values.len()],
                        values: values.clone(),
                    });
                }
            }
        }
        encode_container(
            &serde_json::to_string(&header).expect("header serializes"),
            &arrays,
        )
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let (header, arrays) = decode_container(bytes)?;
        let header: CheckpointHeader = serde_json::from_str(&header)
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        if header.kind != "network" {
            return Err(Error::Checkpoint(format!(
                "expected a network checkpoint, found {}",
                header.kind
            )));
        }
        let params = ParameterStore::from_convs(convs_from_arrays("param.", &arrays)?);
        let network = Network::new(header.spec, params)
            .map_err(|e| Error::Checkpoint(format!("parameters do not match spec: {e}")))?;
        let optimizer = match header.adam {
            None => None,
            Some(h) => {
                let collect = |tag: &str| -> Vec<Vec<f64>> {
                    arrays
                        .iter()
                        .filter(|a| a.name.starts_with(tag))
                        .map(|a| a.values.clone())
                        .collect()
                };
                let state = AdamState {
                    lr: h.lr,
                    beta1: h.beta1,
                    beta2: h.beta2,
                    eps: h.eps,
                    step: h.step,
                    skipped: h.skipped,
                    m: collect("adam.m."),
                    v: collect("adam.v."),
                };
                state
                    .check_against(&network.params)
                    .map_err(|e| Error::Checkpoint(e.to_string()))?;
                Some(state)
            }
        };
        Ok(Self {
            network,
            optimizer,
            step: header.step,
            meta: header.meta,
        })
    }
}

pub fn save_checkpoint(ckpt: &Checkpoint, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, ckpt.to_bytes()).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<Checkpoint> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
        .map_err(|e| Error::Checkpoint(format!("{}: {e}", path.display())))
}

/// Loads and rejects any checkpoint whose spec differs from `expected`.
pub fn load_checkpoint_for(path: impl AsRef<Path>, expected: &NetworkSpec) -> Result<Checkpoint> {
    let path = path.as_ref();
    let ckpt = load_checkpoint(path)?;
    if &ckpt.network.spec != expected {
        return Err(Error::Checkpoint(format!(
            "{}: network spec mismatch (found {}, expected {})",
            path.display(),
            ckpt.network.spec.descriptor(),
            expected.descriptor()
        )));
    }
    Ok(ckpt)
}

/// CRC32 of a file, as lowercase hex; used to identify checkpoints in reports.
pub fn file_id(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(format!("{:08x}", crc32fast::hash(&bytes)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{build_prior_spec, build_restoration_spec, GradientStore};
    use crate::tensor::UpsampleMode;

    fn trained_like() -> Checkpoint {
        let net = Network::init(build_prior_spec(0.1, UpsampleMode::Bilinear), 3).unwrap();
        let mut params = net.params.clone();
        let mut adam = AdamState::new(&params, 1e-3);
        let g = GradientStore::filled(&params, 0.25);
        adam.step(&mut params, &g).unwrap();
        let mut ckpt = Checkpoint::new(Network::new(net.spec, params).unwrap());
        ckpt.optimizer = Some(adam);
        ckpt.step = 1;
        ckpt.meta.insert("stage".into(), "prior".into());
        ckpt
    }

    #[test]
    fn round_trip_is_lossless_and_byte_stable() {
        let dir = tempfile::tempdir().unwrap();
        let ckpt = trained_like();
        let a = dir.path().join("a.ckpt");
        let b = dir.path().join("b.ckpt");
        save_checkpoint(&ckpt, &a).unwrap();
        let back = load_checkpoint(&a).unwrap();
        assert_eq!(back, ckpt);
        save_checkpoint(&back, &b).unwrap();
        assert_eq!(fs::read(&a).unwrap(), fs::read(&b).unwrap());
    }

    #[test]
    fn corrupted_byte_fails_checksum() {
        let mut bytes = trained_like().to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(matches!(
            Checkpoint::from_bytes(&bytes),
            Err(Error::Checksum { .. })
        ));
    }

    #[test]
    fn version_mismatch_is_rejected() {
        let mut bytes = trained_like().to_bytes();
        bytes[8] = 99;
        let n = bytes.len() - 4;
        let crc = crc32fast::hash(&bytes[..n]);
        bytes[n..].copy_from_slice(&crc.to_le_bytes());
        let err = Checkpoint::from_bytes(&bytes).unwrap_err().to_string();
        assert!(err.contains("version 99"), "{err}");
    }

    #[test]
    fn spec_mismatch_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.ckpt");
        save_checkpoint(&trained_like(), &p).unwrap();
        let other = build_restoration_spec(3, UpsampleMode::Bilinear).unwrap();
        assert!(load_checkpoint_for(&p, &other).is_err());
        let same = build_prior_spec(0.1, UpsampleMode::Bilinear);
        assert!(load_checkpoint_for(&p, &same).is_ok());
        let other_rate = build_prior_spec(0.2, UpsampleMode::Bilinear);
        assert!(load_checkpoint_for(&p, &other_rate).is_err());
    }

    #[test]
    fn missing_file_names_path() {
        let err = load_checkpoint("/nonexistent/x.ckpt").unwrap_err().to_string();
        assert!(err.contains("/nonexistent/x.ckpt"));
    }
}
