//! Binary containers for models and triggers.
//!
//! Both share one layout:
//!
//! ```text
//! magic        8 bytes   "LBDMODEL" or "LBDTRIGR"
//! version      u32 LE
//! body         kind-specific, all integers u32 LE, floats f64 LE
//! checksum     u64 LE    CRC-64/ECMA-182 over every preceding byte
//! ```
//!
//! Model body: input rank and dims, layer count, then one record per layer
//! (`kind u8`, `index u32`, `frozen u8`, kind fields, pruned count and unit
//! ids), then the weight and bias blobs of each parametrized layer in order.
//! Kind tags: 0 conv (in, out, kernel, stride, padding, activation),
//! 1 max-pool (size, stride), 2 fully-connected (inputs, outputs,
//! activation). Activation tags: 0 identity, 1 relu, 2 softmax.
//!
//! Trigger body: `K_t u32`, seed `u64`, target name (length-prefixed UTF-8),
//! image rank and dims, then mask and pattern blobs.

use std::fs;
use std::path::Path;

use crc::{Crc, CRC_64_ECMA_182};

use crate::error::{Error, Result};
use crate::model::{Activation, LayerKind, LayerParams, LayerSpec, ModelGraph};
use crate::tensor::Tensor;
use crate::trigger::TriggerSpec;

pub const MODEL_MAGIC: &[u8; 8] = b"LBDMODEL";
pub const TRIGGER_MAGIC: &[u8; 8] = b"LBDTRIGR";
pub const FORMAT_VERSION: u32 = 1;

const CRC64: Crc<u64> = Crc::<u64>::new(&CRC_64_ECMA_182);

/// A trigger plus the metadata recorded alongside it.
#[derive(Debug, Clone, PartialEq)]
pub struct TriggerRecord {
    pub trigger: TriggerSpec,
    pub target_name: String,
    pub seed: u64,
}

#[derive(Default)]
struct Writer {
    buf: Vec<u8>,
}

impl Writer {
    fn u8(&mut self, v: u8) {
        self.buf.push(v);
    }

    fn u32(&mut self, v: usize) {
        let v = u32::try_from(v).expect("dimension fits in u32");
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn u64(&mut self, v: u64) {
        self.buf.extend_from_slice(&v.to_le_bytes());
    }

    fn dims(&mut self, dims: &[usize]) {
        self.u32(dims.len());
        for &d in dims {
            self.u32(d);
        }
    }

    fn floats(&mut self, t: &Tensor) {
        for v in t.data() {
            self.buf.extend_from_slice(&v.to_le_bytes());
        }
    }

    fn finish(mut self) -> Vec<u8> {
        let sum = CRC64.checksum(&self.buf);
        self.u64(sum);
        self.buf
    }
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(Error::Malformed("unexpected end of body".into()));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<usize> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()) as usize)
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn dims(&mut self) -> Result<Vec<usize>> {
        let n = self.u32()?;
        if n > 8 {
            return Err(Error::Malformed(format!("rank {n} too large")));
        }
        (0..n).map(|_| self.u32()).collect()
    }

    fn tensor(&mut self, shape: &[usize]) -> Result<Tensor> {
        let n: usize = shape.iter().product();
        let bytes = self.take(
            n.checked_mul(8)
                .ok_or_else(|| Error::Malformed("size".into()))?,
        )?;
        let data = bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Tensor::new(shape.to_vec(), data).map_err(|e| Error::Malformed(e.to_string()))
    }
}

/// Checks magic, checksum and version; returns the body.
fn open<'a>(bytes: &'a [u8], magic: &[u8; 8]) -> Result<Reader<'a>> {
    if bytes.len() < 8 || &bytes[..8] != magic {
        return Err(Error::BadMagic);
    }
    let header = 8 + 4;
    if bytes.len() < header + 8 {
        return Err(Error::ChecksumMismatch {
            stored: 0,
            computed: CRC64.checksum(bytes),
        });
    }
    let (payload, tail) = bytes.split_at(bytes.len() - 8);
    let stored = u64::from_le_bytes(tail.try_into().unwrap());
    let computed = CRC64.checksum(payload);
    if stored != computed {
        return Err(Error::ChecksumMismatch { stored, computed });
    }
    let found = u32::from_le_bytes(payload[8..12].try_into().unwrap());
    if found != FORMAT_VERSION {
        return Err(Error::VersionMismatch {
            found,
            expected: FORMAT_VERSION,
        });
    }
    Ok(Reader {
        buf: payload,
        pos: header,
    })
}

fn activation_tag(a: Activation) -> u8 {
    match a {
        Activation::Identity => 0,
        Activation::Relu => 1,
        Activation::Softmax => 2,
    }
}

fn activation_from(tag: u8) -> Result<Activation> {
    match tag {
        0 => Ok(Activation::Identity),
        1 => Ok(Activation::Relu),
        2 => Ok(Activation::Softmax),
        t => Err(Error::Malformed(format!("unknown activation tag {t}"))),
    }
}

pub fn model_to_bytes(model: &ModelGraph) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(MODEL_MAGIC);
    w.buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    w.dims(model.input_shape());
    w.u32(model.layers().len());
    for spec in model.layers() {
        match spec.kind {
            LayerKind::Conv2d {
                in_channels,
                out_channels,
                kernel,
                stride,
                padding,
                activation,
            } => {
                w.u8(0);
                w.u32(spec.index);
                w.u8(spec.frozen as u8);
                for v in [in_channels, out_channels, kernel, stride, padding] {
                    w.u32(v);
                }
                w.u8(activation_tag(activation));
            }
            LayerKind::MaxPool2d { size, stride } => {
                w.u8(1);
                w.u32(spec.index);
                w.u8(spec.frozen as u8);
                w.u32(size);
                w.u32(stride);
            }
            LayerKind::FullyConnected {
                inputs,
                outputs,
                activation,
            } => {
                w.u8(2);
                w.u32(spec.index);
                w.u8(spec.frozen as u8);
                w.u32(inputs);
                w.u32(outputs);
                w.u8(activation_tag(activation));
            }
        }
        w.u32(spec.pruned.len());
        for &u in &spec.pruned {
            w.u32(u);
        }
    }
    for p in model.params().iter().flatten() {
        w.floats(&p.weight);
        w.floats(&p.bias);
    }
    w.finish()
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ModelGraph> {
    let mut r = open(bytes, MODEL_MAGIC)?;
    let input_shape = r.dims()?;
    let count = r.u32()?;
    let mut layers = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let tag = r.u8()?;
        let index = r.u32()?;
        let frozen = r.u8()? != 0;
        let kind = match tag {
            0 => {
                let mut f = [0usize; 5];
                for v in &mut f {
                    *v = r.u32()?;
                }
                LayerKind::Conv2d {
                    in_channels: f[0],
                    out_channels: f[1],
                    kernel: f[2],
                    stride: f[3],
                    padding: f[4],
                    activation: activation_from(r.u8()?)?,
                }
            }
            1 => LayerKind::MaxPool2d {
                size: r.u32()?,
                stride: r.u32()?,
            },
            2 => LayerKind::FullyConnected {
                inputs: r.u32()?,
                outputs: r.u32()?,
                activation: activation_from(r.u8()?)?,
            },
            t => return Err(Error::UnknownLayerKind(t)),
        };
        let n = r.u32()?;
        let pruned = (0..n).map(|_| r.u32()).collect::<Result<Vec<_>>>()?;
        layers.push(LayerSpec {
            index,
            kind,
            frozen,
            pruned,
        });
    }
    let mut params = Vec::with_capacity(layers.len());
    for spec in &layers {
        params.push(match spec.kind.param_shapes() {
            Some((ws, bs)) => Some(LayerParams {
                weight: r.tensor(&ws)?,
                bias: r.tensor(&bs)?,
            }),
            None => None,
        });
    }
    if r.pos != r.buf.len() {
        return Err(Error::Malformed("trailing bytes after weights".into()));
    }
    ModelGraph::from_parts(input_shape, layers, params)
}

fn read_file(path: &Path) -> Result<Vec<u8>> {
    fs::read(path).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

fn write_file(path: &Path, bytes: &[u8]) -> Result<()> {
    fs::write(path, bytes).map_err(|source| Error::File {
        path: path.to_path_buf(),
        source,
    })
}

pub fn save_model(model: &ModelGraph, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &model_to_bytes(model))?;
    Ok(())
}

pub fn load_model(path: impl AsRef<Path>) -> Result<ModelGraph> {
    model_from_bytes(&read_file(path.as_ref())?)
}

pub fn trigger_to_bytes(record: &TriggerRecord) -> Vec<u8> {
    let mut w = Writer::default();
    w.buf.extend_from_slice(TRIGGER_MAGIC);
    w.buf.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    w.u32(record.trigger.inject_layer());
    w.u64(record.seed);
    w.u32(record.target_name.len());
    w.buf.extend_from_slice(record.target_name.as_bytes());
    w.dims(record.trigger.image_shape());
    w.floats(record.trigger.mask());
    w.floats(record.trigger.pattern());
    w.finish()
}

pub fn trigger_from_bytes(bytes: &[u8]) -> Result<TriggerRecord> {
    let mut r = open(bytes, TRIGGER_MAGIC)?;
    let inject_layer = r.u32()?;
    let seed = r.u64()?;
    let len = r.u32()?;
    let target_name = String::from_utf8(r.take(len)?.to_vec())
        .map_err(|_| Error::Malformed("target name is not UTF-8".into()))?;
    let shape = r.dims()?;
    let mask = r.tensor(&shape)?;
    let pattern = r.tensor(&shape)?;
    if r.pos != r.buf.len() {
        return Err(Error::Malformed("trailing bytes after pattern".into()));
    }
    Ok(TriggerRecord {
        trigger: TriggerSpec::new(mask, pattern, inject_layer)?,
        target_name,
        seed,
    })
}

pub fn save_trigger(record: &TriggerRecord, path: impl AsRef<Path>) -> Result<()> {
    write_file(path.as_ref(), &trigger_to_bytes(record))?;
    Ok(())
}

pub fn load_trigger(path: impl AsRef<Path>) -> Result<TriggerRecord> {
    trigger_from_bytes(&read_file(path.as_ref())?)
}
