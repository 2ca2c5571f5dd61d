//! N:M candidate sets, block and layer masks, and prior-mask arithmetic.
//!
//! A weight matrix is split into blocks of `m` consecutive weights along
//! its last (column) dimension. Each block keeps exactly `n` weights, so a
//! block's mask is one of the `C(m, n)` rows of a [`MaskCandidateSet`] and
//! a whole layer is described by one candidate index per block.

mod archive;
mod coder;

pub use archive::{decode_masks, encode_dense_masks, encode_masks, MaskArchive, ARCHIVE_MAGIC};
pub use coder::{UniformRangeDecoder, UniformRangeEncoder};

use std::collections::HashMap;
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::bytes::FormatError;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum MaskError {
    #[error("invalid N:M pattern {n}:{m} (need 0 < n < m <= 16)")]
    InvalidPattern { n: usize, m: usize },
    #[error("malformed block mask {bits:?} for pattern {pattern}")]
    MalformedBlock { bits: Vec<u8>, pattern: Pattern },
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("tensor '{tensor}': width {cols} is not divisible by block size {m}")]
    Indivisible { tensor: String, cols: usize, m: usize },
    #[error("tensor '{tensor}': block {block} has candidate index {index}, but only {count} candidates exist")]
    BlockIndex {
        tensor: String,
        block: usize,
        index: usize,
        count: usize,
    },
    #[error("tensor '{tensor}': block at row {row}, block column {block} keeps {kept} of {m} weights, expected {n}")]
    NotNm {
        tensor: String,
        row: usize,
        block: usize,
        kept: usize,
        n: usize,
        m: usize,
    },
    #[error("tensor '{tensor}': shape {got:?} does not match expected {expected:?}")]
    Shape {
        tensor: String,
        expected: (usize, usize),
        got: (usize, usize),
    },
    #[error("unknown tensor '{0}'")]
    UnknownTensor(String),
    #[error("mask pattern {got} does not match {expected}")]
    PatternMismatch { expected: Pattern, got: Pattern },
    #[error(transparent)]
    Format(#[from] FormatError),
}

/// An N:M sparsity pattern: keep `n` of every `m` consecutive weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Pattern {
    pub n: usize,
    pub m: usize,
}

impl Pattern {
    pub const TWO_FOUR: Pattern = Pattern { n: 2, m: 4 };

    pub fn new(n: usize, m: usize) -> Result<Self, MaskError> {
        if n == 0 || n >= m || m > 16 {
            return Err(MaskError::InvalidPattern { n, m });
        }
        Ok(Self { n, m })
    }

    /// `C(m, n)`
    pub fn candidate_count(self) -> usize {
        binomial(self.m, self.n)
    }

    /// Information content of one block choice under a uniform model,
    /// divided by the block size.
    pub fn entropy_bits_per_param(self) -> f64 {
        (self.candidate_count() as f64).log2() / self.m as f64
    }
}

impl Default for Pattern {
    fn default() -> Self {
        Self::TWO_FOUR
    }
}

impl fmt::Display for Pattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.n, self.m)
    }
}

impl FromStr for Pattern {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (n, m) = s
            .split_once(':')
            .ok_or_else(|| format!("pattern '{s}' is not of the form n:m"))?;
        let n = n.trim().parse().map_err(|_| format!("bad n in pattern '{s}'"))?;
        let m = m.trim().parse().map_err(|_| format!("bad m in pattern '{s}'"))?;
        Pattern::new(n, m).map_err(|e| e.to_string())
    }
}

pub fn binomial(m: usize, n: usize) -> usize {
    if n > m {
        return 0;
    }
    let n = n.min(m - n);
    (0..n).fold(1usize, |acc, i| acc * (m - i) / (i + 1))
}

/// All `C(m, n)` binary masks of one block, in a fixed order.
///
/// 2:4 uses the canonical listing
/// `[1100, 1010, 1001, 0101, 0110, 0011]`; every other pattern is listed in
/// descending lexicographic order. Block indices stored on disk refer to
/// this order, so it must never change.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskCandidateSet {
    pattern: Pattern,
    bits: Vec<u8>,
    lookup: HashMap<u32, u16>,
}

const TWO_FOUR_ORDER: [[u8; 4]; 6] = [
    [1, 1, 0, 0],
    [1, 0, 1, 0],
    [1, 0, 0, 1],
    [0, 1, 0, 1],
    [0, 1, 1, 0],
    [0, 0, 1, 1],
];

fn pack_bits(bits: &[u8]) -> u32 {
    bits.iter().fold(0u32, |acc, &b| (acc << 1) | b as u32)
}

impl MaskCandidateSet {
    pub fn enumerate(n: usize, m: usize) -> Result<Self, MaskError> {
        Ok(Self::for_pattern(Pattern::new(n, m)?))
    }

    pub fn for_pattern(pattern: Pattern) -> Self {
        let Pattern { n, m } = pattern;
        let mut bits = Vec::with_capacity(pattern.candidate_count() * m);
        if pattern == Pattern::TWO_FOUR {
            for row in TWO_FOUR_ORDER {
                bits.extend_from_slice(&row);
            }
        } else {
            for v in (0u32..(1u32 << m)).rev() {
                if v.count_ones() as usize == n {
                    bits.extend((0..m).map(|j| ((v >> (m - 1 - j)) & 1) as u8));
                }
            }
        }
        let lookup = bits
            .chunks_exact(m)
            .enumerate()
            .map(|(i, row)| (pack_bits(row), i as u16))
            .collect();
        Self {
            pattern,
            bits,
            lookup,
        }
    }

    pub fn pattern(&self) -> Pattern {
        self.pattern
    }

    pub fn n(&self) -> usize {
        self.pattern.n
    }

    pub fn m(&self) -> usize {
        self.pattern.m
    }

    pub fn len(&self) -> usize {
        self.bits.len() / self.pattern.m
    }

    pub fn is_empty(&self) -> bool {
        self.bits.is_empty()
    }

    pub fn row(&self, i: usize) -> &[u8] {
        &self.bits[i * self.pattern.m..(i + 1) * self.pattern.m]
    }

    pub fn rows(&self) -> impl Iterator<Item = &[u8]> {
        self.bits.chunks_exact(self.pattern.m)
    }

    /// Index of the candidate equal to `bits`, if any.
    pub fn index_of(&self, bits: &[u8]) -> Option<usize> {
        if bits.len() != self.pattern.m || bits.iter().any(|&b| b > 1) {
            return None;
        }
        self.lookup.get(&pack_bits(bits)).map(|&i| i as usize)
    }

    /// The `|S| × m` candidate matrix.
    pub fn to_tensor<S: Scalar>(&self) -> Tensor<S> {
        Tensor::from_fn(vec![self.len(), self.m()], |i| S::of(self.bits[i] as f64))
    }
}

/// Mask of a single block: exactly `n` ones among `m` entries.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct BlockMask {
    bits: Vec<u8>,
}

impl BlockMask {
    pub fn new(bits: Vec<u8>, pattern: Pattern) -> Result<Self, MaskError> {
        let kept = bits.iter().filter(|&&b| b == 1).count();
        if bits.len() != pattern.m || bits.iter().any(|&b| b > 1) || kept != pattern.n {
            return Err(MaskError::MalformedBlock { bits, pattern });
        }
        Ok(Self { bits })
    }

    pub fn bits(&self) -> &[u8] {
        &self.bits
    }

    pub fn dot(&self, other: &[u8]) -> usize {
        self.bits.iter().zip(other).map(|(&a, &b)| (a & b) as usize).sum()
    }
}

/// Re-centred overlap between a prior block mask and every candidate:
/// `sim_i = prior · S_i − n/2`.
pub fn mask_similarity(prior: &BlockMask, set: &MaskCandidateSet) -> Result<Vec<f64>, MaskError> {
    if prior.bits.len() != set.m() {
        return Err(MaskError::Length {
            expected: set.m(),
            got: prior.bits.len(),
        });
    }
    let centre = set.n() as f64 / 2.0;
    Ok(set.rows().map(|row| prior.dot(row) as f64 - centre).collect())
}

/// Sample standard deviation (divisor `len − 1`); zero for fewer than two
/// values.
pub fn std_dev<S: Scalar>(values: &[S]) -> S {
    if values.len() < 2 {
        return S::zero();
    }
    let n = S::of(values.len() as f64);
    let mean = values.iter().copied().sum::<S>() / n;
    let ss = values.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>();
    (ss / (n - S::one())).sqrt()
}

/// Shifts one block's logits toward a prior mask:
/// `π'_i = π_i + σ(π) · sim(prior, S_i) · α`, with `σ` the standard
/// deviation of this block's logits.
pub fn apply_prior<S: Scalar>(
    logits: &[S],
    prior: &BlockMask,
    set: &MaskCandidateSet,
    alpha: S,
) -> Result<Vec<S>, MaskError> {
    if logits.len() != set.len() {
        return Err(MaskError::Length {
            expected: set.len(),
            got: logits.len(),
        });
    }
    let sim = mask_similarity(prior, set)?;
    let sigma = std_dev(logits);
    Ok(logits
        .iter()
        .zip(&sim)
        .map(|(&p, &s)| p + sigma * S::of(s) * alpha)
        .collect())
}

/// Position of the largest value; ties go to the lowest index.
pub fn argmax<S: Scalar>(values: &[S]) -> usize {
    let mut best = 0;
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > values[best] {
            best = i;
        }
    }
    best
}

/// Hard mask of the most likely candidate.
pub fn select_final_mask<S: Scalar>(logits: &[S], set: &MaskCandidateSet) -> Result<BlockMask, MaskError> {
    if logits.len() != set.len() {
        return Err(MaskError::Length {
            expected: set.len(),
            got: logits.len(),
        });
    }
    Ok(BlockMask {
        bits: set.row(argmax(logits)).to_vec(),
    })
}

/// Hard N:M mask of one weight matrix, one candidate index per block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LayerMask {
    pub tensor_name: String,
    pub rows: usize,
    pub cols: usize,
    pub pattern: Pattern,
    pub block_indices: Vec<u16>,
}

impl LayerMask {
    pub fn new(
        tensor_name: impl Into<String>,
        rows: usize,
        cols: usize,
        pattern: Pattern,
        block_indices: Vec<u16>,
    ) -> Result<Self, MaskError> {
        let mask = Self {
            tensor_name: tensor_name.into(),
            rows,
            cols,
            pattern,
            block_indices,
        };
        mask.validate()?;
        Ok(mask)
    }

    pub fn validate(&self) -> Result<(), MaskError> {
        let m = self.pattern.m;
        if self.cols % m != 0 {
            return Err(MaskError::Indivisible {
                tensor: self.tensor_name.clone(),
                cols: self.cols,
                m,
            });
        }
        let expected = self.rows * self.cols / m;
        if self.block_indices.len() != expected {
            return Err(MaskError::Length {
                expected,
                got: self.block_indices.len(),
            });
        }
        let count = self.pattern.candidate_count();
        if let Some((block, &index)) = self
            .block_indices
            .iter()
            .enumerate()
            .find(|(_, &i)| i as usize >= count)
        {
            return Err(MaskError::BlockIndex {
                tensor: self.tensor_name.clone(),
                block,
                index: index as usize,
                count,
            });
        }
        Ok(())
    }

    pub fn blocks_per_row(&self) -> usize {
        self.cols / self.pattern.m
    }

    pub fn num_blocks(&self) -> usize {
        self.block_indices.len()
    }

    pub fn num_params(&self) -> usize {
        self.rows * self.cols
    }

    /// Binary `rows × cols` matrix.
    pub fn expand<S: Scalar>(&self, set: &MaskCandidateSet) -> Tensor<S> {
        debug_assert_eq!(set.pattern(), self.pattern);
        let mut data = Vec::with_capacity(self.num_params());
        for &idx in &self.block_indices {
            data.extend(set.row(idx as usize).iter().map(|&b| S::of(b as f64)));
        }
        Tensor::new(vec![self.rows, self.cols], data).expect("validated mask shape")
    }

    pub fn bits(&self, set: &MaskCandidateSet) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.num_params());
        for &idx in &self.block_indices {
            out.extend_from_slice(set.row(idx as usize));
        }
        out
    }

    /// Builds a layer mask from row-major binary entries, rejecting any
    /// block that is not a member of the candidate set.
    pub fn from_bits(
        tensor_name: impl Into<String>,
        rows: usize,
        cols: usize,
        bits: &[u8],
        set: &MaskCandidateSet,
    ) -> Result<Self, MaskError> {
        let tensor_name = tensor_name.into();
        let Pattern { n, m } = set.pattern();
        if cols % m != 0 {
            return Err(MaskError::Indivisible {
                tensor: tensor_name,
                cols,
                m,
            });
        }
        if bits.len() != rows * cols {
            return Err(MaskError::Length {
                expected: rows * cols,
                got: bits.len(),
            });
        }
        let per_row = cols / m;
        let mut indices = Vec::with_capacity(rows * per_row);
        for (b, block) in bits.chunks_exact(m).enumerate() {
            match set.index_of(block) {
                Some(i) => indices.push(i as u16),
                None => {
                    return Err(MaskError::NotNm {
                        tensor: tensor_name,
                        row: b / per_row,
                        block: b % per_row,
                        kept: block.iter().filter(|&&x| x != 0).count(),
                        n,
                        m,
                    })
                }
            }
        }
        Ok(Self {
            tensor_name,
            rows,
            cols,
            pattern: set.pattern(),
            block_indices: indices,
        })
    }

    /// Candidate index per block from a `[blocks, |S|]` logits matrix.
    pub fn from_logits<S: Scalar>(
        tensor_name: impl Into<String>,
        rows: usize,
        cols: usize,
        pattern: Pattern,
        logits: &[S],
    ) -> Result<Self, MaskError> {
        let count = pattern.candidate_count();
        let indices = logits.chunks_exact(count).map(|b| argmax(b) as u16).collect();
        Self::new(tensor_name, rows, cols, pattern, indices)
    }

    /// Fraction of positions where two masks of the same shape disagree.
    pub fn hamming_fraction(&self, other: &LayerMask, set: &MaskCandidateSet) -> f64 {
        let (a, b) = (self.bits(set), other.bits(set));
        let diff = a.iter().zip(&b).filter(|(x, y)| x != y).count();
        diff as f64 / a.len().max(1) as f64
    }
}
