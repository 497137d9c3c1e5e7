//! Model checkpoint encoding.
//!
//! ```text
//! "UASEGCKPT" | u32 version
//! u32 input_channels | u32 num_classes | u32 base_channels | u32 depth | f64 dropout_rate
//! u32 tensor count, then per tensor:
//!   u16 name length | name bytes | u8 rank | u32 dim × rank | f32 × ∏dims
//! ```
//! All integers and floats little-endian.

use crate::codec::{self, ByteReader};
use crate::error::{Error, Result};
use crate::tensor::Real;

use super::{Param, SegModel, SegNetConfig};

pub const CHECKPOINT_MAGIC: &[u8; 9] = b"UASEGCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;

const MAX_RANK: u8 = 8;

impl<T: Real> SegModel<T> {
    /// Serialises config and parameters; values are stored as `f32`.
    pub fn to_checkpoint_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + 4 * self.num_parameters());
        out.extend_from_slice(CHECKPOINT_MAGIC);
        codec::put_u32(&mut out, CHECKPOINT_VERSION);
        let c = &self.config;
        for v in [c.input_channels, c.num_classes, c.base_channels, c.depth] {
            codec::put_u32(&mut out, v as u32);
        }
        codec::put_f64(&mut out, c.dropout_rate);
        codec::put_u32(&mut out, self.params.len() as u32);
        for p in &self.params {
            codec::put_u16(&mut out, p.name.len() as u16);
            out.extend_from_slice(p.name.as_bytes());
            out.push(p.shape.len() as u8);
            for &d in &p.shape {
                codec::put_u32(&mut out, d as u32);
            }
            codec::put_f32s(&mut out, p.data.iter().map(|v| v.f64() as f32));
        }
        out
    }

    /// Parses a checkpoint, validating it against the layout its config implies.
    pub fn from_checkpoint_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = ByteReader::new(bytes);
        let model = Self::read_checkpoint(&mut r)?;
        r.finish()?;
        Ok(model)
    }

    pub(crate) fn read_checkpoint(r: &mut ByteReader<'_>) -> Result<Self> {
        r.expect_magic(CHECKPOINT_MAGIC)?;
        let at = r.offset();
        let version = r.u32("version")?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::format(at, format!("unsupported checkpoint version {version}")));
        }
        let at = r.offset();
        let config = SegNetConfig {
            input_channels: r.u32("input_channels")? as usize,
            num_classes: r.u32("num_classes")? as usize,
            base_channels: r.u32("base_channels")? as usize,
            depth: r.u32("depth")? as usize,
            dropout_rate: r.f64("dropout_rate")?,
        };
        config
            .validate()
            .map_err(|e| Error::format(at, format!("invalid config block: {e}")))?;
        let expected = Self::param_shapes(&config);
        let at = r.offset();
        let count = r.u32("tensor count")? as usize;
        if count != expected.len() {
            return Err(Error::format(
                at,
                format!("expected {} tensors, found {count}", expected.len()),
            ));
        }
        let mut params = Vec::with_capacity(count);
        for (name, shape) in expected {
            let at = r.offset();
            let len = r.u16("name length")? as usize;
            let raw = r.take(len, "tensor name")?;
            let got = std::str::from_utf8(raw)
                .map_err(|_| Error::format(at, "tensor name is not utf-8"))?;
            if got != name {
                return Err(Error::format(at, format!("expected tensor `{name}`, found `{got}`")));
            }
            let at = r.offset();
            let rank = r.u8("rank")?;
            if rank > MAX_RANK {
                return Err(Error::format(at, format!("rank {rank} too large")));
            }
            let mut dims = Vec::with_capacity(rank as usize);
            for _ in 0..rank {
                dims.push(r.u32("dim")? as usize);
            }
            if dims != shape {
                return Err(Error::format(
                    at,
                    format!("tensor `{name}` has shape {dims:?}, expected {shape:?}"),
                ));
            }
            let at = r.offset();
            let size = shape
                .iter()
                .try_fold(1usize, |acc, &d| acc.checked_mul(d))
                .ok_or_else(|| Error::format(at, format!("tensor `{name}` is too large")))?;
            let values = r.f32_vec(size, "tensor data")?;
            if values.iter().any(|v| !v.is_finite()) {
                return Err(Error::format(at, format!("tensor `{name}` holds non-finite values")));
            }
            params.push(Param {
                name,
                shape,
                data: values.into_iter().map(|v| T::of(v as f64)).collect(),
            });
        }
        Self::from_params(config, params)
    }
}
