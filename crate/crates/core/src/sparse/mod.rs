//! Compressed 2:4 weights and the matching structured-sparse product.
//!
//! Each block of four weights keeps two values and two 2-bit column
//! indices. Indices of a block occupy one nibble, first index in the low
//! bits; even blocks use the low nibble of a byte, odd blocks the high one.

mod bench;

use rayon::prelude::*;
use thiserror::Error;

use crate::bytes::{ByteReader, ByteWriter, FormatError};
use crate::mask::{LayerMask, MaskCandidateSet, Pattern};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

pub use bench::{benchmark, parse_reports, random_instance, BenchReport};

pub const SPARSE_MAGIC: &[u8; 4] = b"NMS2";
const VERSION: u16 = 1;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SparseError {
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("mask pattern {0} is not 2:4")]
    Pattern(Pattern),
    #[error("corrupt metadata at row {row}, block {block}: indices {first} and {second}")]
    CorruptMeta {
        row: usize,
        block: usize,
        first: u8,
        second: u8,
    },
    #[error(transparent)]
    Format(#[from] FormatError),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sparse24Matrix<S> {
    rows: usize,
    cols: usize,
    values: Vec<S>,
    meta: Vec<u8>,
}

fn nibble(meta: &[u8], block: usize) -> u8 {
    (meta[block / 2] >> ((block % 2) * 4)) & 0x0F
}

impl<S: Scalar> Sparse24Matrix<S> {
    /// Keeps the masked-in entries of `weights`.
    pub fn compress(weights: &Tensor<S>, mask: &LayerMask) -> Result<Self, SparseError> {
        if mask.pattern != Pattern::TWO_FOUR {
            return Err(SparseError::Pattern(mask.pattern));
        }
        if weights.shape() != [mask.rows, mask.cols] {
            return Err(SparseError::Shape(format!(
                "weights {:?} vs mask {}x{} for '{}'",
                weights.shape(),
                mask.rows,
                mask.cols,
                mask.tensor_name
            )));
        }
        mask.validate().map_err(|e| SparseError::Shape(e.to_string()))?;
        let set = MaskCandidateSet::for_pattern(Pattern::TWO_FOUR);
        let nblocks = mask.num_blocks();
        let mut values = Vec::with_capacity(nblocks * 2);
        let mut meta = vec![0u8; nblocks.div_ceil(2)];
        for (b, (&idx, w)) in mask.block_indices.iter().zip(weights.data().chunks_exact(4)).enumerate() {
            let row = set.row(idx as usize);
            let mut kept = (0..4u8).filter(|&i| row[i as usize] == 1);
            let (i, j) = (kept.next().expect("two ones"), kept.next().expect("two ones"));
            values.push(w[i as usize]);
            values.push(w[j as usize]);
            meta[b / 2] |= (i | (j << 2)) << ((b % 2) * 4);
        }
        Ok(Self {
            rows: mask.rows,
            cols: mask.cols,
            values,
            meta,
        })
    }

    /// Validates raw parts.
    pub fn from_parts(rows: usize, cols: usize, values: Vec<S>, meta: Vec<u8>) -> Result<Self, SparseError> {
        if cols % 4 != 0 {
            return Err(SparseError::Shape(format!("width {cols} is not divisible by 4")));
        }
        let nblocks = rows * cols / 4;
        if values.len() != nblocks * 2 || meta.len() != nblocks.div_ceil(2) {
            return Err(SparseError::Shape(format!(
                "{rows}x{cols} needs {} values and {} metadata bytes, got {} and {}",
                nblocks * 2,
                nblocks.div_ceil(2),
                values.len(),
                meta.len()
            )));
        }
        let m = Self {
            rows,
            cols,
            values,
            meta,
        };
        m.check_meta()?;
        Ok(m)
    }

    fn check_meta(&self) -> Result<(), SparseError> {
        let per_row = self.cols / 4;
        for b in 0..self.num_blocks() {
            let (i, j) = self.indices(b);
            if i >= j {
                return Err(SparseError::CorruptMeta {
                    row: b / per_row.max(1),
                    block: b % per_row.max(1),
                    first: i,
                    second: j,
                });
            }
        }
        Ok(())
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn values(&self) -> &[S] {
        &self.values
    }

    pub fn meta(&self) -> &[u8] {
        &self.meta
    }

    pub fn num_blocks(&self) -> usize {
        self.rows * self.cols / 4
    }

    /// Column offsets within block `b`.
    pub fn indices(&self, b: usize) -> (u8, u8) {
        let n = nibble(&self.meta, b);
        (n & 3, n >> 2)
    }

    pub fn value_bytes(&self) -> usize {
        self.values.len() * S::DTYPE.size()
    }

    pub fn meta_bytes(&self) -> usize {
        self.meta.len()
    }

    pub fn dense_bytes(&self) -> usize {
        self.rows * self.cols * S::DTYPE.size()
    }

    pub fn decompress(&self) -> Result<Tensor<S>, SparseError> {
        self.check_meta()?;
        let mut out = vec![S::zero(); self.rows * self.cols];
        for b in 0..self.num_blocks() {
            let (i, j) = self.indices(b);
            out[b * 4 + i as usize] = self.values[2 * b];
            out[b * 4 + j as usize] = self.values[2 * b + 1];
        }
        Ok(Tensor::new(vec![self.rows, self.cols], out).expect("shape"))
    }

    fn check_rhs(&self, x: &Tensor<S>) -> Result<usize, SparseError> {
        match x.shape() {
            [r, n] if *r == self.cols => Ok(*n),
            s => Err(SparseError::Shape(format!(
                "cannot multiply {}x{} by {s:?}",
                self.rows, self.cols
            ))),
        }
    }

    fn row_product(&self, r: usize, x: &[f64], n: usize, acc: &mut [f64], out: &mut [S]) {
        acc.iter_mut().for_each(|a| *a = 0.0);
        let per_row = self.cols / 4;
        for blk in 0..per_row {
            let b = r * per_row + blk;
            let (i, j) = self.indices(b);
            for (col, v) in [(blk * 4 + i as usize, self.values[2 * b]), (blk * 4 + j as usize, self.values[2 * b + 1])] {
                let v = v.as_f64();
                let xrow = &x[col * n..(col + 1) * n];
                for (a, &xv) in acc.iter_mut().zip(xrow) {
                    *a += v * xv;
                }
            }
        }
        for (o, &a) in out.iter_mut().zip(acc.iter()) {
            *o = S::of(a);
        }
    }

    /// `decompress(self) · x`, touching only kept weights. Accumulates in
    /// f64.
    pub fn spmm(&self, x: &Tensor<S>) -> Result<Tensor<S>, SparseError> {
        let n = self.check_rhs(x)?;
        let xf: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();
        let mut out = vec![S::zero(); self.rows * n];
        let mut acc = vec![0.0; n];
        for (r, orow) in out.chunks_exact_mut(n.max(1)).enumerate().take(self.rows) {
            self.row_product(r, &xf, n, &mut acc, orow);
        }
        Ok(Tensor::new(vec![self.rows, n], out).expect("shape"))
    }

    /// Row-parallel [`Sparse24Matrix::spmm`] on a pool of `threads`
    /// workers. Each output row is reduced privately, so the result is
    /// identical to the serial one.
    pub fn spmm_parallel(&self, x: &Tensor<S>, threads: usize) -> Result<Tensor<S>, SparseError> {
        let n = self.check_rhs(x)?;
        if n == 0 || self.rows == 0 {
            return self.spmm(x);
        }
        let xf: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();
        let mut out = vec![S::zero(); self.rows * n];
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(threads.max(1))
            .build()
            .map_err(|e| SparseError::Shape(format!("thread pool: {e}")))?;
        pool.install(|| {
            out.par_chunks_mut(n).enumerate().for_each_init(
                || vec![0.0; n],
                |acc, (r, orow)| self.row_product(r, &xf, n, acc, orow),
            )
        });
        Ok(Tensor::new(vec![self.rows, n], out).expect("shape"))
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = ByteWriter::new();
        w.bytes(SPARSE_MAGIC)
            .u16(VERSION)
            .u32(self.rows as u32)
            .u32(self.cols as u32)
            .u8(S::DTYPE.code())
            .scalars(&self.values)
            .bytes(&self.meta);
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, SparseError> {
        let mut r = ByteReader::new(bytes);
        r.magic(SPARSE_MAGIC)?;
        let at = r.offset();
        let version = r.u16("version")?;
        if version != VERSION {
            return Err(FormatError::Version { version, offset: at }.into());
        }
        let rows = r.u32("rows")? as usize;
        let cols = r.u32("cols")? as usize;
        let dtype = r.u8("dtype")?;
        if DType::from_code(dtype) != Some(S::DTYPE) {
            return Err(r.invalid(format!("dtype code {dtype} does not match requested {:?}", S::DTYPE)).into());
        }
        if cols % 4 != 0 {
            return Err(r.invalid(format!("width {cols} is not divisible by 4")).into());
        }
        let nblocks = rows
            .checked_mul(cols)
            .map(|p| p / 4)
            .ok_or_else(|| r.invalid("matrix size overflows"))?;
        let values = r.scalars::<S>(nblocks * 2, "values")?;
        let meta = r.take(nblocks.div_ceil(2), "metadata")?.to_vec();
        r.expect_end()?;
        Self::from_parts(rows, cols, values, meta)
    }
}

/// Dense `w · x` with the same loop order and f64 accumulation as
/// [`Sparse24Matrix::spmm`].
pub fn dense_matmul<S: Scalar>(w: &Tensor<S>, x: &Tensor<S>) -> Result<Tensor<S>, SparseError> {
    let (rows, cols) = match w.shape() {
        [r, c] => (*r, *c),
        s => return Err(SparseError::Shape(format!("weights must be a matrix, got {s:?}"))),
    };
    let n = match x.shape() {
        [r, n] if *r == cols => *n,
        s => return Err(SparseError::Shape(format!("cannot multiply {rows}x{cols} by {s:?}"))),
    };
    let xf: Vec<f64> = x.data().iter().map(|v| v.as_f64()).collect();
    let mut out = vec![S::zero(); rows * n];
    let mut acc = vec![0.0; n];
    for r in 0..rows {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for c in 0..cols {
            let v = w.data()[r * cols + c].as_f64();
            let xrow = &xf[c * n..(c + 1) * n];
            for (a, &xv) in acc.iter_mut().zip(xrow) {
                *a += v * xv;
            }
        }
        for (o, &a) in out[r * n..(r + 1) * n].iter_mut().zip(&acc) {
            *o = S::of(a);
        }
    }
    Ok(Tensor::new(vec![rows, n], out).expect("shape"))
}

/// Worker count from `NMS_THREADS`, defaulting to the available cores.
pub fn configured_threads() -> usize {
    std::env::var("NMS_THREADS")
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&t| t > 0)
        .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
}
