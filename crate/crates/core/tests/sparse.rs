use proptest::prelude::*;

use nmsparse::mask::{LayerMask, MaskCandidateSet, Pattern};
use nmsparse::sparse::{random_instance, Sparse24Matrix};
use nmsparse::tensor::Tensor;

/// Plain i-k-j product of `(w ⊙ bits) · x`, summed in f64.
fn oracle(w: &[f64], bits: &[u8], x: &[f64], rows: usize, cols: usize, n: usize) -> Vec<f64> {
    let mut y = vec![0.0; rows * n];
    for i in 0..rows {
        for j in 0..n {
            let mut s = 0.0;
            for k in 0..cols {
                if bits[i * cols + k] == 1 {
                    s += w[i * cols + k] * x[k * n + j];
                }
            }
            y[i * n + j] = s;
        }
    }
    y
}

#[test]
fn spmm_matches_oracle_256() {
    let set = MaskCandidateSet::for_pattern(Pattern::TWO_FOUR);
    let (w, mask) = random_instance::<f64>(256, 256, 7);
    let x = Tensor::from_fn(vec![256, 64], |i| ((i * 7919) % 1000) as f64 / 500.0 - 1.0);
    let s = Sparse24Matrix::compress(&w, &mask).unwrap();
    let want = oracle(w.data(), &mask.bits(&set), x.data(), 256, 256, 64);
    for got in [s.spmm(&x).unwrap(), s.spmm_parallel(&x, 3).unwrap()] {
        let err = got.data().iter().zip(&want).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(err <= 1e-12, "max error {err}");
    }
}

#[test]
fn parallel_equals_serial_exactly() {
    let (w, mask) = random_instance::<f32>(64, 128, 3);
    let x = Tensor::from_fn(vec![128, 9], |i| (i as f32).sin());
    let s = Sparse24Matrix::compress(&w, &mask).unwrap();
    let serial = s.spmm(&x).unwrap();
    for t in [1, 2, 5] {
        assert_eq!(s.spmm_parallel(&x, t).unwrap(), serial);
    }
}

#[test]
fn footprint_is_exact() {
    let (w, mask) = random_instance::<f32>(32, 64, 0);
    let s = Sparse24Matrix::compress(&w, &mask).unwrap();
    assert_eq!(s.meta_bytes() * 8, 32 * 64);
    let ratio = (s.value_bytes() + s.meta_bytes()) as f64 / s.dense_bytes() as f64;
    assert_eq!(ratio, 0.53125);
}

fn instance() -> impl Strategy<Value = (usize, usize, Vec<f64>, Vec<u16>)> {
    (1usize..6, 1usize..5).prop_flat_map(|(r, b)| {
        let c = 4 * b;
        (
            Just(r),
            Just(c),
            proptest::collection::vec(-10.0f64..10.0, r * c),
            proptest::collection::vec(0u16..6, r * b),
        )
    })
}

proptest! {
    #[test]
    fn compress_round_trips((r, c, w, idx) in instance()) {
        let set = MaskCandidateSet::for_pattern(Pattern::TWO_FOUR);
        let mask = LayerMask::new("w", r, c, Pattern::TWO_FOUR, idx).unwrap();
        let t = Tensor::new(vec![r, c], w.clone()).unwrap();
        let s = Sparse24Matrix::compress(&t, &mask).unwrap();
        let d = s.decompress().unwrap();
        let bits = mask.bits(&set);
        for k in 0..r * c {
            prop_assert_eq!(d.data()[k], if bits[k] == 1 { w[k] } else { 0.0 });
        }
        prop_assert_eq!(Sparse24Matrix::<f64>::from_bytes(&s.to_bytes()).unwrap(), s.clone());
        for b in 0..s.num_blocks() {
            let (i, j) = s.indices(b);
            prop_assert!(i < j && j < 4);
        }
    }

    #[test]
    fn spmm_equals_masked_dense((r, c, w, idx) in instance(), n in 1usize..4) {
        let set = MaskCandidateSet::for_pattern(Pattern::TWO_FOUR);
        let mask = LayerMask::new("w", r, c, Pattern::TWO_FOUR, idx).unwrap();
        let t = Tensor::new(vec![r, c], w.clone()).unwrap();
        let x = Tensor::from_fn(vec![c, n], |i| (i as f64 * 0.37).cos());
        let got = Sparse24Matrix::compress(&t, &mask).unwrap().spmm(&x).unwrap();
        let want = oracle(&w, &mask.bits(&set), x.data(), r, c, n);
        for (a, b) in got.data().iter().zip(&want) {
            prop_assert!((a - b).abs() <= 1e-12);
        }
    }

    #[test]
    fn corrupt_metadata_is_rejected(byte in any::<u8>()) {
        let lo = byte & 0x0F;
        let hi = byte >> 4;
        let ok = |n: u8| (n & 3) < (n >> 2);
        let r = Sparse24Matrix::from_parts(1, 8, vec![1.0f64; 4], vec![byte]);
        prop_assert_eq!(r.is_ok(), ok(lo) && ok(hi));
    }
}
