//! Binary checkpoint container.
//!
//! All integers and floats are little-endian. Layout, version 1:
//!
//! ```text
//! magic            8 bytes   "SHCAMCK1"
//! version          u32       1
//! input_channels   u32
//! input_size       u32
//! conv_blocks      u32       then per block: channels u32, kernel u32, stride u32
//! pooling          u32       0 = flatten, 1 = global average
//! dense_hidden     u32       then per layer: width u32
//! classes          u32
//! target_layer     u32
//! seed             u64
//! metadata_count   u32       then per entry: key (u32 length + UTF-8), value (u32 length + UTF-8)
//! param_count      u32       then per parameter:
//!                              name (u32 length + UTF-8), layer u32, rank u32,
//!                              dims (rank x u64), values (product(dims) x f64)
//! ```
//!
//! Parameters appear in the architecture's canonical order and must match its
//! shapes exactly.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use super::{Architecture, ConvBlock, ModelParams, Parameter, Pooling};
use crate::autodiff::Tensor;
use crate::error::{Error, Result};

const MAGIC: &[u8; 8] = b"SHCAMCK1";
const VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub params: ModelParams,
    /// Free-form descriptors (dataset parameters, run id).
    pub metadata: BTreeMap<String, String>,
}

struct Writer(Vec<u8>);

impl Writer {
    fn u32(&mut self, v: usize) {
        self.0.extend_from_slice(&(v as u32).to_le_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.0.extend_from_slice(&v.to_le_bytes());
    }
    fn str(&mut self, s: &str) {
        self.u32(s.len());
        self.0.extend_from_slice(s.as_bytes());
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| Error::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }
    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn str(&mut self) -> Result<String> {
        let n = self.u32()?;
        String::from_utf8(self.take(n)?.to_vec())
            .map_err(|_| Error::Checkpoint("invalid UTF-8 string".into()))
    }
}

impl Checkpoint {
    pub fn new(params: ModelParams) -> Self {
        Checkpoint {
            params,
            metadata: BTreeMap::new(),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer(Vec::new());
        w.0.extend_from_slice(MAGIC);
        w.u32(VERSION as usize);
        let arch = &self.params.arch;
        w.u32(arch.input_channels);
        w.u32(arch.input_size);
        w.u32(arch.conv.len());
        for b in &arch.conv {
            w.u32(b.channels);
            w.u32(b.kernel);
            w.u32(b.stride);
        }
        w.u32(arch.pooling.code() as usize);
        w.u32(arch.dense_hidden.len());
        for &d in &arch.dense_hidden {
            w.u32(d);
        }
        w.u32(arch.classes);
        w.u32(arch.target_layer);
        w.u64(self.params.seed);
        w.u32(self.metadata.len());
        for (k, v) in &self.metadata {
            w.str(k);
            w.str(v);
        }
        w.u32(self.params.params.len());
        for p in &self.params.params {
            w.str(&p.name);
            w.u32(p.layer);
            w.u32(p.value.shape().len());
            for &d in p.value.shape() {
                w.u64(d as u64);
            }
            for &v in p.value.data() {
                w.0.extend_from_slice(&v.to_le_bytes());
            }
        }
        w.0
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(Error::Checkpoint("bad magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION as usize {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let input_channels = r.u32()?;
        let input_size = r.u32()?;
        let n_conv = r.u32()?;
        let conv = (0..n_conv)
            .map(|_| {
                Ok(ConvBlock {
                    channels: r.u32()?,
                    kernel: r.u32()?,
                    stride: r.u32()?,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        let pooling = Pooling::from_code(r.u32()? as u32)
            .ok_or_else(|| Error::Checkpoint("unknown pooling code".into()))?;
        let n_dense = r.u32()?;
        let dense_hidden = (0..n_dense).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        let arch = Architecture {
            input_channels,
            input_size,
            conv,
            pooling,
            dense_hidden,
            classes: r.u32()?,
            target_layer: r.u32()?,
        };
        arch.validate()?;
        let seed = r.u64()?;
        let mut metadata = BTreeMap::new();
        for _ in 0..r.u32()? {
            let k = r.str()?;
            let v = r.str()?;
            metadata.insert(k, v);
        }
        let expected = arch.param_shapes();
        let n_params = r.u32()?;
        if n_params != expected.len() {
            return Err(Error::Checkpoint(format!(
                "architecture expects {} parameters, file has {}",
                expected.len(),
                n_params
            )));
        }
        let mut params = Vec::with_capacity(n_params);
        for (name, layer, shape) in expected {
            let got_name = r.str()?;
            let got_layer = r.u32()?;
            let rank = r.u32()?;
            let dims = (0..rank)
                .map(|_| r.u64().map(|d| d as usize))
                .collect::<Result<Vec<_>>>()?;
            if got_name != name || got_layer != layer || dims != shape {
                return Err(Error::Checkpoint(format!(
                    "parameter {got_name} {dims:?} does not match expected {name} {shape:?}"
                )));
            }
            let values = (0..shape.iter().product::<usize>())
                .map(|_| r.f64())
                .collect::<Result<Vec<_>>>()?;
            params.push(Parameter {
                name,
                layer,
                value: Tensor::new(shape, values)?,
            });
        }
        if r.pos != buf.len() {
            return Err(Error::Checkpoint("trailing bytes".into()));
        }
        Ok(Checkpoint {
            params: ModelParams { arch, seed, params },
            metadata,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }
}
