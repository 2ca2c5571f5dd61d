#![allow(dead_code)]

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use nmsparse::mask::{MaskCandidateSet, Pattern};
use nmsparse::models::{LinearModel, RegressionBatch};
use nmsparse::tensor::Tensor;

/// Regression problem with AR(1)-correlated inputs and a least-squares fit
/// of a 4×8 map.
pub struct Regression {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub w: Vec<f64>,
    pub n: usize,
    pub inp: usize,
    pub out: usize,
}

pub fn regression(seed: u64, n: usize, inp: usize, out: usize, rho: f64) -> Regression {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let g = Normal::new(0.0, 1.0).unwrap();
    let mut x = vec![0.0; n * inp];
    for r in 0..n {
        let mut prev = g.sample(&mut rng);
        for c in 0..inp {
            let v = if c == 0 {
                prev
            } else {
                rho * prev + (1.0 - rho * rho).sqrt() * g.sample(&mut rng)
            };
            x[r * inp + c] = v;
            prev = v;
        }
    }
    let truth: Vec<f64> = (0..out * inp).map(|_| g.sample(&mut rng)).collect();
    let mut y = vec![0.0; n * out];
    for r in 0..n {
        for o in 0..out {
            let dot: f64 = (0..inp).map(|c| x[r * inp + c] * truth[o * inp + c]).sum();
            y[r * out + o] = dot + 0.5 * g.sample(&mut rng);
        }
    }
    let w = least_squares(&x, &y, n, inp, out);
    Regression { x, y, w, n, inp, out }
}

/// Solves the normal equations by Gauss-Jordan elimination.
fn least_squares(x: &[f64], y: &[f64], n: usize, inp: usize, out: usize) -> Vec<f64> {
    let mut w = vec![0.0; out * inp];
    for o in 0..out {
        let mut a = vec![0.0; inp * (inp + 1)];
        for i in 0..inp {
            for j in 0..inp {
                a[i * (inp + 1) + j] = (0..n).map(|r| x[r * inp + i] * x[r * inp + j]).sum();
            }
            a[i * (inp + 1) + inp] = (0..n).map(|r| x[r * inp + i] * y[r * out + o]).sum();
        }
        for col in 0..inp {
            let piv = (col..inp)
                .max_by(|&p, &q| a[p * (inp + 1) + col].abs().total_cmp(&a[q * (inp + 1) + col].abs()))
                .unwrap();
            for k in 0..=inp {
                a.swap(col * (inp + 1) + k, piv * (inp + 1) + k);
            }
            let d = a[col * (inp + 1) + col];
            for k in 0..=inp {
                a[col * (inp + 1) + k] /= d;
            }
            for r in 0..inp {
                if r != col {
                    let f = a[r * (inp + 1) + col];
                    for k in 0..=inp {
                        a[r * (inp + 1) + k] -= f * a[col * (inp + 1) + k];
                    }
                }
            }
        }
        for i in 0..inp {
            w[o * inp + i] = a[i * (inp + 1) + inp];
        }
    }
    w
}

impl Regression {
    pub fn model(&self) -> LinearModel<f64> {
        LinearModel::with_weight(Tensor::new(vec![self.out, self.inp], self.w.clone()).unwrap(), 4).unwrap()
    }

    pub fn batch(&self) -> RegressionBatch<f64> {
        RegressionBatch::new(
            Tensor::new(vec![self.n, self.inp], self.x.clone()).unwrap(),
            Tensor::new(vec![self.n, self.out], self.y.clone()).unwrap(),
        )
        .unwrap()
    }

    /// Loss of a binary mask from the Gram matrix:
    /// `(Σ_o wᵀGw − 2wᵀc_o + y_oᵀy_o) / n`.
    pub fn gram_loss(&self, gram: &Gram, bits: &[u8]) -> f64 {
        let mut total = 0.0;
        for o in 0..self.out {
            let w: Vec<f64> = (0..self.inp).map(|c| self.w[o * self.inp + c] * bits[o * self.inp + c] as f64).collect();
            let mut q = 0.0;
            for i in 0..self.inp {
                for j in 0..self.inp {
                    q += w[i] * gram.g[i * self.inp + j] * w[j];
                }
                q -= 2.0 * w[i] * gram.c[o * self.inp + i];
            }
            total += q + gram.yy[o];
        }
        total / self.n as f64
    }

    pub fn gram(&self) -> Gram {
        let (n, inp, out) = (self.n, self.inp, self.out);
        let mut g = vec![0.0; inp * inp];
        let mut c = vec![0.0; out * inp];
        let mut yy = vec![0.0; out];
        for r in 0..n {
            for i in 0..inp {
                for j in 0..inp {
                    g[i * inp + j] += self.x[r * inp + i] * self.x[r * inp + j];
                }
                for o in 0..out {
                    c[o * inp + i] += self.x[r * inp + i] * self.y[r * out + o];
                }
            }
            for o in 0..out {
                yy[o] += self.y[r * out + o].powi(2);
            }
        }
        Gram { g, c, yy }
    }

    /// Exhaustive minimum over every combination of block candidates.
    pub fn brute_force(&self) -> (f64, Vec<u16>) {
        let set = MaskCandidateSet::for_pattern(Pattern::TWO_FOUR);
        let gram = self.gram();
        let blocks = self.out * self.inp / 4;
        let combos = 6usize.pow(blocks as u32);
        let mut best = (f64::INFINITY, Vec::new());
        let mut bits = vec![0u8; self.out * self.inp];
        let mut idx = vec![0u16; blocks];
        for code in 0..combos {
            let mut c = code;
            for b in 0..blocks {
                idx[b] = (c % 6) as u16;
                c /= 6;
                bits[b * 4..b * 4 + 4].copy_from_slice(set.row(idx[b] as usize));
            }
            let l = self.gram_loss(&gram, &bits);
            if l < best.0 {
                best = (l, idx.clone());
            }
        }
        best
    }
}

pub struct Gram {
    pub g: Vec<f64>,
    pub c: Vec<f64>,
    pub yy: Vec<f64>,
}
