//! `NMCK` checkpoint container: logits, optimizer moments, RNG and data
//! positions, keyed to a config hash.

use crate::bytes::{ByteReader, ByteWriter, FormatError};
use crate::gumbel::NoiseState;
use crate::mask::Pattern;
use crate::scalar::{DType, Scalar};

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"NMCK";
const VERSION: u16 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct CheckpointTensor<S> {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub logits: Vec<S>,
    pub adam_m: Vec<S>,
    pub adam_v: Vec<S>,
    /// Hard-sample candidate indices of the last completed step.
    pub prev_sample: Option<Vec<u16>>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint<S> {
    pub config_hash: [u8; 32],
    pub pattern: Pattern,
    pub step: u64,
    pub data_position: u64,
    pub optimizer_step: u64,
    pub noise: NoiseState,
    pub initial_loss: Option<f64>,
    pub tensors: Vec<CheckpointTensor<S>>,
}

impl<S: Scalar> Checkpoint<S> {
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(CHECKPOINT_MAGIC)
            .u16(VERSION)
            .u8(S::DTYPE.code())
            .bytes(&self.config_hash)
            .u8(self.pattern.n as u8)
            .u8(self.pattern.m as u8)
            .u64(self.step)
            .u64(self.data_position)
            .u64(self.optimizer_step)
            .bytes(&self.noise.seed)
            .u64(self.noise.stream)
            .u64(self.noise.word_pos as u64)
            .u64((self.noise.word_pos >> 64) as u64)
            .u64(self.noise.eps_min_bits);
        match self.initial_loss {
            Some(l) => w.u8(1).u64(l.to_bits()),
            None => w.u8(0),
        };
        w.u32(self.tensors.len() as u32);
        for t in &self.tensors {
            w.name(&t.name)
                .u32(t.rows as u32)
                .u32(t.cols as u32)
                .u32(t.logits.len() as u32)
                .scalars(&t.logits)
                .scalars(&t.adam_m)
                .scalars(&t.adam_v);
            match &t.prev_sample {
                Some(p) => {
                    w.u8(1).u32(p.len() as u32);
                    for &i in p {
                        w.u16(i);
                    }
                }
                None => {
                    w.u8(0);
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, FormatError> {
        let mut r = ByteReader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let at = r.offset();
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(FormatError::Version { version, offset: at });
        }
        let dtype = r.u8("dtype")?;
        if DType::from_code(dtype) != Some(S::DTYPE) {
            return Err(r.invalid(format!("dtype code {dtype} does not match requested {:?}", S::DTYPE)));
        }
        let config_hash: [u8; 32] = r.take(32, "config hash")?.try_into().expect("32 bytes");
        let (n, m) = (r.u8("pattern n")? as usize, r.u8("pattern m")? as usize);
        let pattern = Pattern::new(n, m).map_err(|e| r.invalid(e.to_string()))?;
        let step = r.u64("step")?;
        let data_position = r.u64("data position")?;
        let optimizer_step = r.u64("optimizer step")?;
        let seed: [u8; 32] = r.take(32, "rng seed")?.try_into().expect("32 bytes");
        let stream = r.u64("rng stream")?;
        let lo = r.u64("rng position")? as u128;
        let hi = r.u64("rng position")? as u128;
        let eps_min_bits = r.u64("rng epsilon")?;
        let initial_loss = match r.u8("initial loss flag")? {
            0 => None,
            1 => Some(f64::from_bits(r.u64("initial loss")?)),
            f => return Err(r.invalid(format!("bad initial loss flag {f}"))),
        };
        let count = r.u32("tensor count")? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.name("tensor name")?;
            let rows = r.u32("rows")? as usize;
            let cols = r.u32("cols")? as usize;
            let len = r.u32("logit count")? as usize;
            let logits = r.scalars::<S>(len, &name)?;
            let adam_m = r.scalars::<S>(len, &name)?;
            let adam_v = r.scalars::<S>(len, &name)?;
            let prev_sample = match r.u8("sample flag")? {
                0 => None,
                1 => {
                    let k = r.u32("sample length")? as usize;
                    let mut p = Vec::with_capacity(k.min(1 << 20));
                    for _ in 0..k {
                        p.push(r.u16(&name)?);
                    }
                    Some(p)
                }
                f => return Err(r.invalid(format!("tensor '{name}': bad sample flag {f}"))),
            };
            tensors.push(CheckpointTensor {
                name,
                rows,
                cols,
                logits,
                adam_m,
                adam_v,
                prev_sample,
            });
        }
        r.expect_end()?;
        Ok(Self {
            config_hash,
            pattern,
            step,
            data_position,
            optimizer_step,
            noise: NoiseState {
                seed,
                stream,
                word_pos: lo | (hi << 64),
                eps_min_bits,
            },
            initial_loss,
            tensors,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gumbel::NoiseSource;

    #[test]
    fn round_trip() {
        let mut src = NoiseSource::new(4);
        src.sample_gumbel(77);
        let c = Checkpoint::<f32> {
            config_hash: [7; 32],
            pattern: Pattern::TWO_FOUR,
            step: 12,
            data_position: 96,
            optimizer_step: 12,
            noise: src.state(),
            initial_loss: Some(2.5),
            tensors: vec![CheckpointTensor {
                name: "w".into(),
                rows: 1,
                cols: 4,
                logits: vec![0.1, 0.2, 0.3, 0.4, 0.5, 0.6],
                adam_m: vec![0.0; 6],
                adam_v: vec![1.0; 6],
                prev_sample: Some(vec![3]),
            }],
        };
        let bytes = c.to_bytes();
        assert_eq!(Checkpoint::<f32>::from_bytes(&bytes).unwrap(), c);
        assert!(Checkpoint::<f64>::from_bytes(&bytes).is_err());
        assert!(matches!(
            Checkpoint::<f32>::from_bytes(&bytes[..bytes.len() - 1]),
            Err(FormatError::Truncated { .. })
        ));
    }
}
