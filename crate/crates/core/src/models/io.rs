//! `NMMD` model container: little-endian header, spec, then named tensors.

use super::{ModelError, ModelKind, ModelSpec, Param};
use crate::bytes::{ByteReader, ByteWriter, FormatError};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub const MODEL_MAGIC: &[u8; 4] = b"NMMD";
const VERSION: u16 = 1;

pub fn encode_model<S: Scalar>(spec: &ModelSpec, params: &[Param<S>]) -> Vec<u8> {
    let mut w = ByteWriter::new();
    w.bytes(MODEL_MAGIC).u16(VERSION).u8(S::DTYPE.code()).u8(spec.kind.code());
    for v in [
        spec.vocab_size,
        spec.embed_dim,
        spec.num_layers,
        spec.num_heads,
        spec.context_length,
        spec.input_dim,
        spec.hidden_dim,
        spec.output_dim,
        spec.block,
    ] {
        w.u32(v as u32);
    }
    w.u32(params.len() as u32);
    for p in params {
        w.name(&p.name).u8(p.prunable as u8).u8(p.value.shape().len() as u8);
        for &d in p.value.shape() {
            w.u32(d as u32);
        }
        w.scalars(p.value.data());
    }
    w.finish()
}

pub fn decode_model<S: Scalar>(bytes: &[u8]) -> Result<(ModelSpec, Vec<Param<S>>), ModelError> {
    let mut r = ByteReader::new(bytes);
    r.magic(MODEL_MAGIC)?;
    let at = r.offset();
    let version = r.u16("version")?;
    if version != VERSION {
        return Err(FormatError::Version { version, offset: at }.into());
    }
    let dtype = r.u8("dtype")?;
    if DType::from_code(dtype) != Some(S::DTYPE) {
        return Err(r.invalid(format!("dtype code {dtype} does not match requested {:?}", S::DTYPE)).into());
    }
    let kind_code = r.u8("model kind")?;
    let kind = ModelKind::from_code(kind_code).ok_or_else(|| r.invalid(format!("unknown model kind {kind_code}")))?;
    let mut dims = [0usize; 9];
    for d in dims.iter_mut() {
        *d = r.u32("spec")? as usize;
    }
    let spec = ModelSpec {
        kind,
        vocab_size: dims[0],
        embed_dim: dims[1],
        num_layers: dims[2],
        num_heads: dims[3],
        context_length: dims[4],
        input_dim: dims[5],
        hidden_dim: dims[6],
        output_dim: dims[7],
        block: dims[8],
    };
    let count = r.u32("parameter count")? as usize;
    let mut params = Vec::with_capacity(count.min(4096));
    for _ in 0..count {
        let name = r.name("parameter name")?;
        let prunable = match r.u8("prunable flag")? {
            0 => false,
            1 => true,
            f => return Err(r.invalid(format!("parameter '{name}': bad prunable flag {f}")).into()),
        };
        let rank = r.u8("rank")? as usize;
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u32("dimension")? as usize);
        }
        let len = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let len = len.ok_or_else(|| r.invalid(format!("parameter '{name}': shape overflows")))?;
        let data = r.scalars::<S>(len, &name)?;
        params.push(Param {
            name,
            value: Tensor::new(shape, data)?,
            prunable,
        });
    }
    r.expect_end()?;
    Ok((spec, params))
}
