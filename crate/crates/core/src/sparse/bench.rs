use std::fmt::Write as _;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{dense_matmul, Sparse24Matrix, SparseError};
use crate::mask::{LayerMask, Pattern};
use crate::scalar::{DType, Scalar};
use crate::tensor::Tensor;

/// Timing and footprint of one benchmark size.
#[derive(Debug, Clone, PartialEq)]
pub struct BenchReport {
    pub dtype: DType,
    pub rows: usize,
    pub cols: usize,
    pub rhs_cols: usize,
    pub repeats: usize,
    pub threads: usize,
    pub dense_ns: u64,
    pub sparse_ns: u64,
    pub parallel_ns: u64,
    pub dense_bytes: usize,
    pub sparse_bytes: usize,
    pub max_abs_diff: f64,
}

impl BenchReport {
    pub fn speedup(&self) -> f64 {
        self.dense_ns as f64 / self.sparse_ns.max(1) as f64
    }

    pub fn footprint_ratio(&self) -> f64 {
        self.sparse_bytes as f64 / self.dense_bytes as f64
    }

    /// One `key=value` per line, records separated by a blank line.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let dtype = match self.dtype {
            DType::F32 => "f32",
            DType::F64 => "f64",
        };
        let _ = writeln!(s, "dtype={dtype}");
        for (k, v) in [
            ("rows", self.rows),
            ("cols", self.cols),
            ("rhs_cols", self.rhs_cols),
            ("repeats", self.repeats),
            ("threads", self.threads),
            ("dense_ns", self.dense_ns as usize),
            ("sparse_ns", self.sparse_ns as usize),
            ("parallel_ns", self.parallel_ns as usize),
            ("dense_bytes", self.dense_bytes),
            ("sparse_bytes", self.sparse_bytes),
        ] {
            let _ = writeln!(s, "{k}={v}");
        }
        let _ = writeln!(s, "max_abs_diff={:e}", self.max_abs_diff);
        let _ = writeln!(s, "speedup={:.4}", self.speedup());
        let _ = writeln!(s, "footprint_ratio={:.6}", self.footprint_ratio());
        s
    }
}

/// Parses the output of [`BenchReport::to_text`] for one or more records.
/// Derived keys (`speedup`, `footprint_ratio`) are accepted and ignored.
pub fn parse_reports(text: &str) -> Result<Vec<BenchReport>, String> {
    let mut out = Vec::new();
    for chunk in text.split("\n\n").map(str::trim).filter(|c| !c.is_empty()) {
        let mut r = BenchReport {
            dtype: DType::F32,
            rows: 0,
            cols: 0,
            rhs_cols: 0,
            repeats: 0,
            threads: 0,
            dense_ns: 0,
            sparse_ns: 0,
            parallel_ns: 0,
            dense_bytes: 0,
            sparse_bytes: 0,
            max_abs_diff: 0.0,
        };
        for line in chunk.lines() {
            let (k, v) = line.split_once('=').ok_or_else(|| format!("expected key=value, got '{line}'"))?;
            let int = || v.parse::<u64>().map_err(|e| format!("{k}: {e}"));
            match k {
                "dtype" => {
                    r.dtype = match v {
                        "f32" => DType::F32,
                        "f64" => DType::F64,
                        _ => return Err(format!("unknown dtype '{v}'")),
                    }
                }
                "rows" => r.rows = int()? as usize,
                "cols" => r.cols = int()? as usize,
                "rhs_cols" => r.rhs_cols = int()? as usize,
                "repeats" => r.repeats = int()? as usize,
                "threads" => r.threads = int()? as usize,
                "dense_ns" => r.dense_ns = int()?,
                "sparse_ns" => r.sparse_ns = int()?,
                "parallel_ns" => r.parallel_ns = int()?,
                "dense_bytes" => r.dense_bytes = int()? as usize,
                "sparse_bytes" => r.sparse_bytes = int()? as usize,
                "max_abs_diff" => r.max_abs_diff = v.parse().map_err(|e| format!("{k}: {e}"))?,
                "speedup" | "footprint_ratio" => {}
                _ => return Err(format!("unknown key '{k}'")),
            }
        }
        out.push(r);
    }
    Ok(out)
}

/// Random dense matrix with a random 2:4 mask.
pub fn random_instance<S: Scalar>(rows: usize, cols: usize, seed: u64) -> (Tensor<S>, LayerMask) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = Tensor::from_fn(vec![rows, cols], |_| S::of(rng.random_range(-1.0..1.0)));
    let idx = (0..rows * cols / 4).map(|_| rng.random_range(0..6u16)).collect();
    let mask = LayerMask::new("bench", rows, cols, Pattern::TWO_FOUR, idx).expect("valid mask");
    (w, mask)
}

fn median_ns(repeats: usize, mut f: impl FnMut()) -> u64 {
    let mut times: Vec<u64> = (0..repeats.max(1))
        .map(|_| {
            let t = Instant::now();
            f();
            t.elapsed().as_nanos() as u64
        })
        .collect();
    times.sort_unstable();
    times[times.len() / 2]
}

/// Times dense and 2:4 products for each square `size`, multiplying by a
/// `size × rhs_cols` right-hand side. Reports the median of `repeats` runs.
pub fn benchmark<S: Scalar>(
    sizes: &[usize],
    rhs_cols: usize,
    repeats: usize,
    threads: usize,
    seed: u64,
) -> Result<Vec<BenchReport>, SparseError> {
    let mut out = Vec::with_capacity(sizes.len());
    for (k, &size) in sizes.iter().enumerate() {
        let (w, mask) = random_instance::<S>(size, size, seed.wrapping_add(k as u64));
        let dense = w.hadamard(&mask.expand(&crate::mask::MaskCandidateSet::for_pattern(Pattern::TWO_FOUR))).expect("shape");
        let sparse = Sparse24Matrix::compress(&w, &mask)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
        let x = Tensor::from_fn(vec![size, rhs_cols], |_| S::of(rng.random_range(-1.0..1.0)));
        let a = dense_matmul(&dense, &x)?;
        let b = sparse.spmm(&x)?;
        let max_abs_diff = a
            .data()
            .iter()
            .zip(b.data())
            .map(|(p, q)| (p.as_f64() - q.as_f64()).abs())
            .fold(0.0, f64::max);
        let dense_ns = median_ns(repeats, || {
            std::hint::black_box(dense_matmul(&dense, &x).expect("shape"));
        });
        let sparse_ns = median_ns(repeats, || {
            std::hint::black_box(sparse.spmm(&x).expect("shape"));
        });
        let parallel_ns = median_ns(repeats, || {
            std::hint::black_box(sparse.spmm_parallel(&x, threads).expect("shape"));
        });
        out.push(BenchReport {
            dtype: S::DTYPE,
            rows: size,
            cols: size,
            rhs_cols,
            repeats,
            threads,
            dense_ns,
            sparse_ns,
            parallel_ns,
            dense_bytes: sparse.dense_bytes(),
            sparse_bytes: sparse.value_bytes() + sparse.meta_bytes(),
            max_abs_diff,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn report_text_round_trips() {
        let reports = benchmark::<f32>(&[8, 16], 4, 3, 2, 1).unwrap();
        assert_eq!(reports.len(), 2);
        assert_eq!(reports[0].footprint_ratio(), 0.53125);
        assert!(reports.iter().all(|r| r.max_abs_diff == 0.0));
        let text: Vec<String> = reports.iter().map(BenchReport::to_text).collect();
        assert_eq!(parse_reports(&text.join("\n")).unwrap(), reports);
        assert!(parse_reports("rows=1\nbogus=2").is_err());
    }
}
