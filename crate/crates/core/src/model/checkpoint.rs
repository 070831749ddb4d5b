//! Binary checkpoint format (all integers little-endian):
//!
//! ```text
//! magic        4 bytes  "ULFG"
//! version      u32
//! config       u32 num_layers, d_model, num_heads, d_mlp, vocab_size,
//!              max_seq_len; u64 seed
//! count        u32      number of parameter tensors
//! per tensor, in `parameter_layout` order:
//!   kind       u8       MHSA=0 MLP=1 EMBED=2 NORM=3 LM_HEAD=4
//!   layer      u32      block index, 0xFFFF_FFFF for non-block groups
//!   name       u16 length + UTF-8 bytes
//!   ndim       u32, then ndim × u32 dimensions
//!   data       product(dims) × f64
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use super::{parameter_layout, ModelConfig, ModuleKind, TransformerModel};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"ULFG";
pub const CHECKPOINT_VERSION: u32 = 1;
const NO_LAYER: u32 = u32::MAX;

fn bad(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn to_u32(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| bad(format!("{what} {v} does not fit in u32")))
}

struct Reader<R> {
    inner: R,
}

impl<R: Read> Reader<R> {
    fn bytes<const N: usize>(&mut self) -> Result<[u8; N]> {
        let mut buf = [0u8; N];
        self.inner.read_exact(&mut buf).map_err(|e| bad(format!("truncated checkpoint: {e}")))?;
        Ok(buf)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.bytes()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.bytes()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.bytes()?))
    }
}

impl TransformerModel {
    pub fn write_checkpoint<W: Write>(&self, mut w: W) -> Result<()> {
        let c = &self.config;
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&CHECKPOINT_VERSION.to_le_bytes())?;
        for (v, what) in [
            (c.num_layers, "num_layers"),
            (c.d_model, "d_model"),
            (c.num_heads, "num_heads"),
            (c.d_mlp, "d_mlp"),
            (c.vocab_size, "vocab_size"),
            (c.max_seq_len, "max_seq_len"),
        ] {
            w.write_all(&to_u32(v, what)?.to_le_bytes())?;
        }
        w.write_all(&c.seed.to_le_bytes())?;
        w.write_all(&to_u32(self.params.len(), "parameter count")?.to_le_bytes())?;
        for p in &self.params {
            let g = p.info.group;
            w.write_all(&[g.kind.code()])?;
            let layer = match g.layer {
                Some(l) => to_u32(l, "layer")?,
                None => NO_LAYER,
            };
            w.write_all(&layer.to_le_bytes())?;
            let name = p.info.name.as_bytes();
            w.write_all(&(name.len() as u16).to_le_bytes())?;
            w.write_all(name)?;
            w.write_all(&to_u32(p.value.shape().len(), "ndim")?.to_le_bytes())?;
            for &d in p.value.shape() {
                w.write_all(&to_u32(d, "dimension")?.to_le_bytes())?;
            }
            for v in p.value.data() {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_checkpoint<R: Read>(r: R) -> Result<Self> {
        let mut r = Reader { inner: r };
        if &r.bytes::<4>()? != CHECKPOINT_MAGIC {
            return Err(bad("bad magic, not a model checkpoint"));
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(bad(format!("unsupported checkpoint version {version}")));
        }
        let config = ModelConfig {
            num_layers: r.u32()? as usize,
            d_model: r.u32()? as usize,
            num_heads: r.u32()? as usize,
            d_mlp: r.u32()? as usize,
            vocab_size: r.u32()? as usize,
            max_seq_len: r.u32()? as usize,
            seed: r.u64()?,
        };
        config.validate()?;
        let layout = parameter_layout(&config);
        let count = r.u32()? as usize;
        if count != layout.len() {
            return Err(bad(format!("expected {} tensors, file has {count}", layout.len())));
        }
        let mut tensors = Vec::with_capacity(count);
        for info in &layout {
            let kind = ModuleKind::from_code(r.u8()?).ok_or_else(|| bad("unknown module kind"))?;
            let layer = match r.u32()? {
                NO_LAYER => None,
                l => Some(l as usize),
            };
            let name_len = r.u16()? as usize;
            let mut name = vec![0u8; name_len];
            r.inner.read_exact(&mut name).map_err(|e| bad(format!("truncated name: {e}")))?;
            let name = String::from_utf8(name).map_err(|_| bad("parameter name is not UTF-8"))?;
            if kind != info.group.kind || layer != info.group.layer || name != info.name {
                return Err(bad(format!(
                    "expected {}/{:?}/{}, found {kind}/{layer:?}/{name}",
                    info.group.kind, info.group.layer, info.name
                )));
            }
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            if shape != info.shape {
                return Err(bad(format!("{name}: expected shape {:?}, found {shape:?}", info.shape)));
            }
            let n: usize = shape.iter().product();
            let data = (0..n).map(|_| r.f64()).collect::<Result<Vec<_>>>()?;
            tensors.push(Tensor::new(shape, data)?);
        }
        let mut trailing = [0u8; 1];
        if r.inner.read(&mut trailing)? != 0 {
            return Err(bad("trailing bytes after last tensor"));
        }
        TransformerModel::from_parts(config, tensors)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_checkpoint(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::MissingArtifact { path: path.to_path_buf(), hint: "no checkpoint at this path".into() }
            } else {
                e.into()
            }
        })?;
        Self::read_checkpoint(BufReader::new(file))
    }
}
