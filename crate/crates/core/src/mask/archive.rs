//! On-disk mask container.
//!
//! ```text
//! "NMMK" | version u16 | n u8 | m u8 | tensor_count u32
//! per tensor: name_len u16 | name | rows u32 | cols u32 | payload_len u32 | payload
//! ```
//!
//! Version 1 payloads are range-coded block indices under a uniform model
//! over the `C(m, n)` candidates. Version 2 payloads hold the raw binary
//! mask, row-major, least significant bit first, for exchange with tools
//! that do not speak the coded form. All integers are little-endian.

use super::coder::{DecodeFault, UniformRangeDecoder, UniformRangeEncoder};
use super::{LayerMask, MaskCandidateSet, MaskError, Pattern};
use crate::bytes::{ByteReader, ByteWriter, FormatError};

pub const ARCHIVE_MAGIC: &[u8; 4] = b"NMMK";
pub const VERSION_CODED: u16 = 1;
pub const VERSION_DENSE: u16 = 2;

#[derive(Debug, Clone, PartialEq)]
pub struct MaskArchive {
    pub version: u16,
    pub pattern: Pattern,
    pub masks: Vec<LayerMask>,
    /// Sum of all payload lengths in bytes.
    pub payload_bytes: usize,
}

impl MaskArchive {
    pub fn param_count(&self) -> usize {
        self.masks.iter().map(LayerMask::num_params).sum()
    }

    pub fn bits_per_param(&self) -> f64 {
        self.payload_bytes as f64 * 8.0 / self.param_count().max(1) as f64
    }
}

fn header(w: &mut ByteWriter, version: u16, pattern: Pattern, count: usize) {
    w.bytes(ARCHIVE_MAGIC)
        .u16(version)
        .u8(pattern.n as u8)
        .u8(pattern.m as u8)
        .u32(count as u32);
}

fn record(w: &mut ByteWriter, mask: &LayerMask, payload: &[u8]) {
    w.name(&mask.tensor_name)
        .u32(mask.rows as u32)
        .u32(mask.cols as u32)
        .u32(payload.len() as u32)
        .bytes(payload);
}

fn check(masks: &[LayerMask], pattern: Pattern) -> Result<(), MaskError> {
    for mask in masks {
        if mask.pattern != pattern {
            return Err(MaskError::PatternMismatch {
                expected: pattern,
                got: mask.pattern,
            });
        }
        mask.validate()?;
    }
    Ok(())
}

/// Range-codes every layer mask into a version 1 archive.
pub fn encode_masks(masks: &[LayerMask], pattern: Pattern) -> Result<Vec<u8>, MaskError> {
    Pattern::new(pattern.n, pattern.m)?;
    check(masks, pattern)?;
    let total = pattern.candidate_count() as u32;
    let mut w = ByteWriter::new();
    header(&mut w, VERSION_CODED, pattern, masks.len());
    for mask in masks {
        let payload = if mask.block_indices.is_empty() {
            Vec::new()
        } else {
            let mut enc = UniformRangeEncoder::new();
            for &idx in &mask.block_indices {
                enc.encode(idx as u32, total);
            }
            enc.finish()
        };
        record(&mut w, mask, &payload);
    }
    Ok(w.finish())
}

/// Writes the uncompressed version 2 form.
pub fn encode_dense_masks(masks: &[LayerMask], pattern: Pattern) -> Result<Vec<u8>, MaskError> {
    Pattern::new(pattern.n, pattern.m)?;
    check(masks, pattern)?;
    let set = MaskCandidateSet::for_pattern(pattern);
    let mut w = ByteWriter::new();
    header(&mut w, VERSION_DENSE, pattern, masks.len());
    for mask in masks {
        let bits = mask.bits(&set);
        let mut payload = vec![0u8; bits.len().div_ceil(8)];
        for (i, &b) in bits.iter().enumerate() {
            payload[i / 8] |= b << (i % 8);
        }
        record(&mut w, mask, &payload);
    }
    Ok(w.finish())
}

/// Parses either archive version. An empty input is an empty archive.
pub fn decode_masks(bytes: &[u8]) -> Result<MaskArchive, MaskError> {
    if bytes.is_empty() {
        return Ok(MaskArchive {
            version: VERSION_CODED,
            pattern: Pattern::TWO_FOUR,
            masks: Vec::new(),
            payload_bytes: 0,
        });
    }
    let mut r = ByteReader::new(bytes);
    r.magic(ARCHIVE_MAGIC)?;
    let version_at = r.offset();
    let version = r.u16("version")?;
    if version != VERSION_CODED && version != VERSION_DENSE {
        return Err(FormatError::Version {
            version,
            offset: version_at,
        }
        .into());
    }
    let pattern_at = r.offset();
    let n = r.u8("n")? as usize;
    let m = r.u8("m")? as usize;
    let pattern = Pattern::new(n, m).map_err(|e| FormatError::Invalid {
        offset: pattern_at,
        message: e.to_string(),
    })?;
    let set = MaskCandidateSet::for_pattern(pattern);
    let count = r.u32("tensor count")? as usize;

    let mut masks = Vec::with_capacity(count.min(1 << 16));
    let mut payload_bytes = 0;
    for t in 0..count {
        let name = r.name(&format!("name of tensor #{t}"))?;
        let rows = r.u32(&format!("rows of tensor '{name}'"))? as usize;
        let cols_at = r.offset();
        let cols = r.u32(&format!("cols of tensor '{name}'"))? as usize;
        if cols % m != 0 {
            return Err(FormatError::Invalid {
                offset: cols_at,
                message: format!("tensor '{name}': cols {cols} not divisible by {m}"),
            }
            .into());
        }
        let len = r.u32(&format!("payload length of tensor '{name}'"))? as usize;
        let payload_at = r.offset();
        let payload = r.take(len, &format!("payload of tensor '{name}'"))?;
        payload_bytes += len;
        let blocks = rows * cols / m;
        let mask = match version {
            VERSION_CODED => {
                let indices = decode_payload(payload, blocks, set.len() as u32, &name, payload_at)?;
                LayerMask::new(name, rows, cols, pattern, indices)?
            }
            _ => {
                let params = rows * cols;
                if len != params.div_ceil(8) {
                    return Err(FormatError::Invalid {
                        offset: payload_at,
                        message: format!(
                            "tensor '{name}': dense payload has {len} bytes, expected {}",
                            params.div_ceil(8)
                        ),
                    }
                    .into());
                }
                let bits: Vec<u8> = (0..params).map(|i| (payload[i / 8] >> (i % 8)) & 1).collect();
                LayerMask::from_bits(name, rows, cols, &bits, &set)?
            }
        };
        masks.push(mask);
    }
    r.expect_end()?;
    Ok(MaskArchive {
        version,
        pattern,
        masks,
        payload_bytes,
    })
}

fn decode_payload(
    payload: &[u8],
    blocks: usize,
    total: u32,
    name: &str,
    base: usize,
) -> Result<Vec<u16>, FormatError> {
    if blocks == 0 {
        if !payload.is_empty() {
            return Err(FormatError::Invalid {
                offset: base,
                message: format!("tensor '{name}' has no blocks but a non-empty payload"),
            });
        }
        return Ok(Vec::new());
    }
    let fault = |f: DecodeFault| match f {
        DecodeFault::Truncated { consumed } => FormatError::Truncated {
            offset: base + consumed,
            needed: 1,
            what: format!("payload of tensor '{name}'"),
        },
        DecodeFault::Corrupt { consumed } => FormatError::Invalid {
            offset: base + consumed,
            message: format!("payload of tensor '{name}' decodes to an out-of-range symbol"),
        },
    };
    let mut dec = UniformRangeDecoder::new(payload).map_err(fault)?;
    let mut out = Vec::with_capacity(blocks);
    for _ in 0..blocks {
        out.push(dec.decode(total).map_err(fault)? as u16);
    }
    if dec.consumed() != payload.len() {
        return Err(FormatError::Invalid {
            offset: base + dec.consumed(),
            message: format!(
                "payload of tensor '{name}' has {} unused bytes",
                payload.len() - dec.consumed()
            ),
        });
    }
    Ok(out)
}
