//! Client→server update codec.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "WFLU" | version u16 | sender u64 | round u64 | field count u32
//! per field: name_len u16 | name (UTF-8) | dtype u8 | ndim u8 | dims u32 × ndim
//!            | payload_len u32 | payload (f32 row-major)
//! ```
//!
//! Field names must be `layer{i}.w_a`, `layer{i}.w_b`, `layer{i}.r` or `layer{i}.w`.
//! Anything else is rejected on decode, so client-private state cannot ride along.

use crate::error::{Error, Result};
use crate::model::{FactorDictionary, LayerParams, ModelConfig};
use crate::tensor::DenseMatrix;

pub const MAGIC: [u8; 4] = *b"WFLU";
pub const VERSION: u16 = 1;
pub const DTYPE_F32: u8 = 1;

const TENSOR_NAMES: [&str; 4] = ["w_a", "w_b", "r", "w"];

/// Whether `name` is a global-parameter field name.
pub fn is_global_field(name: &str) -> bool {
    let Some(rest) = name.strip_prefix("layer") else {
        return false;
    };
    let Some((index, tensor)) = rest.split_once('.') else {
        return false;
    };
    !index.is_empty()
        && index.bytes().all(|b| b.is_ascii_digit())
        && (index == "0" || !index.starts_with('0'))
        && TENSOR_NAMES.contains(&tensor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct WireTensor {
    pub name: String,
    pub dims: Vec<usize>,
    pub values: Vec<f32>,
}

/// A decoded update.
#[derive(Clone, Debug, PartialEq)]
pub struct UpdateMessage {
    pub sender: u64,
    pub round: u64,
    pub fields: Vec<WireTensor>,
}

/// Encodes every tensor of `dict`. `r` vectors are written with one dimension.
pub fn serialize_update(dict: &FactorDictionary, sender: u64, round: u64) -> Vec<u8> {
    let named = dict.named_tensors();
    let mut out = Vec::with_capacity(32 + dict.num_params() * 4 + named.len() * 32);
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&sender.to_le_bytes());
    out.extend_from_slice(&round.to_le_bytes());
    out.extend_from_slice(&(named.len() as u32).to_le_bytes());
    for (name, t) in named {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.push(DTYPE_F32);
        let dims: Vec<usize> = if name.ends_with(".r") {
            vec![t.cols()]
        } else {
            vec![t.rows(), t.cols()]
        };
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        out.extend_from_slice(&((t.len() * 4) as u32).to_le_bytes());
        for &v in t.as_slice() {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    out
}

struct Reader<'b> {
    bytes: &'b [u8],
    pos: usize,
}

impl<'b> Reader<'b> {
    fn take(&mut self, n: usize) -> Result<&'b [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end = end.ok_or_else(|| Error::format(format!("message truncated at byte {}", self.pos)))?;
        let out = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(out)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().expect("2 bytes")))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }
}

pub fn deserialize_update(bytes: &[u8]) -> Result<UpdateMessage> {
    let mut r = Reader { bytes, pos: 0 };
    if r.take(4)? != MAGIC {
        return Err(Error::format("bad update magic"));
    }
    let version = r.u16()?;
    if version != VERSION {
        return Err(Error::format(format!("unsupported update version {version}")));
    }
    let sender = r.u64()?;
    let round = r.u64()?;
    let count = r.u32()? as usize;
    let mut fields: Vec<WireTensor> = Vec::with_capacity(count.min(1024));
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::format("field name is not UTF-8"))?
            .to_string();
        if !is_global_field(&name) {
            return Err(Error::SchemaViolation(name));
        }
        if fields.iter().any(|f| f.name == name) {
            return Err(Error::format(format!("duplicate field `{name}`")));
        }
        let dtype = r.u8()?;
        if dtype != DTYPE_F32 {
            return Err(Error::format(format!("field `{name}` has unknown dtype {dtype}")));
        }
        let ndim = r.u8()? as usize;
        let dims = (0..ndim)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let payload_len = r.u32()? as usize;
        let expected = dims.iter().try_fold(4usize, |acc, &d| acc.checked_mul(d));
        if expected != Some(payload_len) {
            return Err(Error::format(format!(
                "field `{name}` declares dims {dims:?} but carries {payload_len} payload bytes"
            )));
        }
        let values = r
            .take(payload_len)?
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")))
            .collect();
        fields.push(WireTensor { name, dims, values });
    }
    if r.pos != bytes.len() {
        return Err(Error::format(format!(
            "{} trailing bytes after the field table",
            bytes.len() - r.pos
        )));
    }
    Ok(UpdateMessage { sender, round, fields })
}

impl UpdateMessage {
    pub fn field(&self, name: &str) -> Option<&WireTensor> {
        self.fields.iter().find(|f| f.name == name)
    }

    /// Rebuilds the parameters for `model`; every expected field must be present
    /// with the right shape and no extra fields are allowed.
    pub fn to_dictionary(&self, model: &ModelConfig) -> Result<FactorDictionary> {
        let mut used = 0;
        let mut get = |name: String, rows: usize, cols: usize| -> Result<DenseMatrix> {
            let f = self
                .field(&name)
                .ok_or_else(|| Error::Consistency(format!("update lacks field `{name}`")))?;
            let n: usize = f.dims.iter().product();
            if n != rows * cols || f.dims.len() > 2 || (f.dims.len() == 2 && f.dims != [rows, cols]) {
                return Err(Error::Consistency(format!(
                    "field `{name}` has dims {:?}, expected {rows}x{cols}",
                    f.dims
                )));
            }
            used += 1;
            DenseMatrix::new(rows, cols, f.values.iter().map(|&v| f64::from(v)).collect())
        };
        let mut layers = Vec::with_capacity(model.layers.len());
        for (i, spec) in model.layers.iter().enumerate() {
            let (j, m) = (spec.out_dim, spec.in_dim);
            layers.push(match spec.factors {
                Some(f) => LayerParams::Factorized {
                    w_a: get(format!("layer{i}.w_a"), j, f)?,
                    w_b: get(format!("layer{i}.w_b"), f, m)?,
                    r: get(format!("layer{i}.r"), 1, f)?,
                },
                None => LayerParams::Dense {
                    w: get(format!("layer{i}.w"), j, m)?,
                },
            });
        }
        if used != self.fields.len() {
            return Err(Error::Consistency(format!(
                "update carries {} fields, model uses {used}",
                self.fields.len()
            )));
        }
        Ok(FactorDictionary { layers })
    }
}
