//! Differentiable sampling of block masks.
//!
//! Each block carries logits `π` over the candidate set. A sample is drawn
//! by perturbing the scaled logits `κ·π` with Gumbel noise and taking a
//! temperature-`τ` softmax, which gives a soft one-hot index `ỹ`. The
//! soft mask is then `ỹ × S`, a convex combination of candidate rows.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::mask::{argmax, LayerMask, MaskCandidateSet, MaskError, Pattern};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub const DEFAULT_EPS_MIN: f64 = 1e-10;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GumbelError {
    #[error("{name} must be positive, got {value}")]
    NonPositive { name: &'static str, value: f64 },
    #[error("length mismatch: expected {expected}, got {got}")]
    Length { expected: usize, got: usize },
    #[error("step {step} outside schedule range 0..={total}")]
    StepOutOfRange { step: usize, total: usize },
    #[error("invalid schedule: {0}")]
    Schedule(String),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Mask(#[from] MaskError),
}

/// Seeded uniform stream turned into Gumbel(0, 1) draws.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    rng: ChaCha8Rng,
    eps_min: f64,
}

/// Serializable position of a [`NoiseSource`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NoiseState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
    pub eps_min_bits: u64,
}

/// `g = −ln(−ln ε)` with `ε` clamped to `[ε_min, 1 − ε_min]`.
#[inline]
pub fn gumbel_from_uniform(eps: f64, eps_min: f64) -> f64 {
    let e = eps.clamp(eps_min, 1.0 - eps_min);
    -(-e.ln()).ln()
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        Self {
            rng: ChaCha8Rng::seed_from_u64(seed),
            eps_min: DEFAULT_EPS_MIN,
        }
    }

    pub fn with_eps_min(mut self, eps_min: f64) -> Self {
        self.eps_min = eps_min;
        self
    }

    pub fn eps_min(&self) -> f64 {
        self.eps_min
    }

    pub fn uniform(&mut self) -> f64 {
        let u: f64 = self.rng.random();
        u.clamp(self.eps_min, 1.0 - self.eps_min)
    }

    pub fn sample_gumbel(&mut self, count: usize) -> Vec<f64> {
        (0..count).map(|_| gumbel_from_uniform(self.rng.random(), self.eps_min)).collect()
    }

    pub fn state(&self) -> NoiseState {
        NoiseState {
            seed: self.rng.get_seed(),
            stream: self.rng.get_stream(),
            word_pos: self.rng.get_word_pos(),
            eps_min_bits: self.eps_min.to_bits(),
        }
    }

    pub fn from_state(state: NoiseState) -> Self {
        let mut rng = ChaCha8Rng::from_seed(state.seed);
        rng.set_stream(state.stream);
        rng.set_word_pos(state.word_pos);
        Self {
            rng,
            eps_min: f64::from_bits(state.eps_min_bits),
        }
    }
}

fn positive(name: &'static str, v: f64) -> Result<(), GumbelError> {
    if v > 0.0 && v.is_finite() {
        Ok(())
    } else {
        Err(GumbelError::NonPositive { name, value: v })
    }
}

/// `ỹ_i = softmax_i((κ·π + g) / τ)`, computed with max subtraction and
/// renormalized so the components sum to one.
pub fn soft_index<S: Scalar>(logits: &[S], noise: &[S], tau: S, kappa: S) -> Result<Vec<S>, GumbelError> {
    positive("tau", tau.as_f64())?;
    positive("kappa", kappa.as_f64())?;
    if noise.len() != logits.len() {
        return Err(GumbelError::Length {
            expected: logits.len(),
            got: noise.len(),
        });
    }
    let z: Vec<S> = logits.iter().zip(noise).map(|(&p, &g)| (kappa * p + g) / tau).collect();
    let max = z.iter().copied().fold(S::neg_infinity(), S::max);
    let mut out: Vec<S> = z.iter().map(|&v| (v - max).exp()).collect();
    let total: S = out.iter().copied().sum();
    out.iter_mut().for_each(|v| *v /= total);
    Ok(out)
}

/// `M̃ = ỹ × S`, the soft-index weighted average of candidate masks.
pub fn differentiable_mask<S: Scalar>(soft_idx: &[S], set: &MaskCandidateSet) -> Result<Vec<S>, GumbelError> {
    if soft_idx.len() != set.len() {
        return Err(GumbelError::Length {
            expected: set.len(),
            got: soft_idx.len(),
        });
    }
    let mut out = vec![S::zero(); set.m()];
    for (&w, row) in soft_idx.iter().zip(set.rows()) {
        for (o, &b) in out.iter_mut().zip(row) {
            if b == 1 {
                *o += w;
            }
        }
    }
    Ok(out)
}

/// `p_i = softmax_i(κ·π)`
pub fn probability_from_logits<S: Scalar>(logits: &[S], kappa: S) -> Result<Vec<S>, GumbelError> {
    positive("kappa", kappa.as_f64())?;
    let zero = vec![S::zero(); logits.len()];
    soft_index(logits, &zero, S::one(), kappa)
}

/// Shape of the temperature decay between its endpoints.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TauDecay {
    /// Log-linear interpolation.
    #[default]
    Geometric,
    Linear,
}

impl std::str::FromStr for TauDecay {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "geometric" => Ok(TauDecay::Geometric),
            "linear" => Ok(TauDecay::Linear),
            other => Err(format!("unknown tau decay '{other}' (geometric|linear)")),
        }
    }
}

impl std::fmt::Display for TauDecay {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            TauDecay::Geometric => "geometric",
            TauDecay::Linear => "linear",
        })
    }
}

/// Temperature and logit-scale schedules over a training run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GumbelSchedule {
    pub tau_start: f64,
    pub tau_end: f64,
    pub kappa_start: f64,
    pub kappa_end: f64,
    pub total_steps: usize,
    pub tau_decay: TauDecay,
}

impl Default for GumbelSchedule {
    fn default() -> Self {
        Self {
            tau_start: 4.0,
            tau_end: 0.05,
            kappa_start: 1e2,
            kappa_end: 5e2,
            total_steps: 2000,
            tau_decay: TauDecay::Geometric,
        }
    }
}

impl GumbelSchedule {
    pub fn validate(&self) -> Result<(), GumbelError> {
        positive("tau_start", self.tau_start)?;
        positive("tau_end", self.tau_end)?;
        positive("kappa_start", self.kappa_start)?;
        positive("kappa_end", self.kappa_end)?;
        if self.tau_start < self.tau_end {
            return Err(GumbelError::Schedule(format!(
                "tau_start {} < tau_end {}",
                self.tau_start, self.tau_end
            )));
        }
        if self.kappa_start > self.kappa_end {
            return Err(GumbelError::Schedule(format!(
                "kappa_start {} > kappa_end {}",
                self.kappa_start, self.kappa_end
            )));
        }
        Ok(())
    }

    /// `(τ, κ)` at `step`. κ moves linearly; τ decays geometrically by
    /// default. Both endpoints are returned exactly.
    pub fn at(&self, step: usize) -> Result<(f64, f64), GumbelError> {
        if step > self.total_steps {
            return Err(GumbelError::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        if step == 0 {
            return Ok((self.tau_start, self.kappa_start));
        }
        if step == self.total_steps {
            return Ok((self.tau_end, self.kappa_end));
        }
        let f = step as f64 / self.total_steps as f64;
        let kappa = self.kappa_start + (self.kappa_end - self.kappa_start) * f;
        let tau = match self.tau_decay {
            TauDecay::Geometric => self.tau_start * (self.tau_end / self.tau_start).powf(f),
            TauDecay::Linear => self.tau_start + (self.tau_end - self.tau_start) * f,
        };
        Ok((tau, kappa))
    }
}

/// Learnable per-block categorical distribution over candidate masks for
/// one weight matrix.
#[derive(Debug, Clone)]
pub struct MaskDistribution<S> {
    pub tensor_name: String,
    pub rows: usize,
    pub cols: usize,
    /// `[num_blocks, |S|]`
    pub logits: Tensor<S>,
    pub candidates: Arc<MaskCandidateSet>,
}

impl<S: Scalar> MaskDistribution<S> {
    pub fn new(
        tensor_name: impl Into<String>,
        rows: usize,
        cols: usize,
        logits: Tensor<S>,
        candidates: Arc<MaskCandidateSet>,
    ) -> Result<Self, GumbelError> {
        let tensor_name = tensor_name.into();
        let m = candidates.m();
        if cols % m != 0 {
            return Err(MaskError::Indivisible {
                tensor: tensor_name,
                cols,
                m,
            }
            .into());
        }
        let nb = rows * cols / m;
        if logits.shape() != [nb, candidates.len()] {
            return Err(TensorError::ShapeMismatch {
                op: "mask distribution",
                lhs: logits.shape().to_vec(),
                rhs: vec![nb, candidates.len()],
            }
            .into());
        }
        if logits.data().iter().any(|v| !v.is_finite()) {
            return Err(GumbelError::Schedule(format!("non-finite logits for '{tensor_name}'")));
        }
        Ok(Self {
            tensor_name,
            rows,
            cols,
            logits,
            candidates,
        })
    }

    pub fn pattern(&self) -> Pattern {
        self.candidates.pattern()
    }

    pub fn num_blocks(&self) -> usize {
        self.rows * self.cols / self.candidates.m()
    }

    pub fn block_logits(&self, block: usize) -> &[S] {
        let k = self.candidates.len();
        &self.logits.data()[block * k..(block + 1) * k]
    }

    /// Hard mask taking the most likely candidate of every block.
    pub fn final_mask(&self) -> LayerMask {
        LayerMask::from_logits(
            self.tensor_name.clone(),
            self.rows,
            self.cols,
            self.pattern(),
            self.logits.data(),
        )
        .expect("distribution shape was validated")
    }

    /// Largest candidate probability of each block under scale `kappa`.
    pub fn max_probabilities(&self, kappa: S) -> Vec<S> {
        let k = self.candidates.len();
        self.logits
            .data()
            .chunks_exact(k)
            .map(|b| {
                let p = probability_from_logits(b, kappa).expect("kappa validated by caller");
                p[argmax(&p)]
            })
            .collect()
    }

    /// Gumbel-max sample: the candidate index a hard draw with `noise`
    /// selects in every block.
    pub fn hard_sample(&self, noise: &[S], kappa: S) -> Vec<u16> {
        let k = self.candidates.len();
        self.logits
            .data()
            .chunks_exact(k)
            .zip(noise.chunks_exact(k))
            .map(|(b, g)| {
                let z: Vec<S> = b.iter().zip(g).map(|(&p, &n)| kappa * p + n).collect();
                argmax(&z) as u16
            })
            .collect()
    }
}

/// Records the soft index of every block of `logits` (`[blocks, |S|]`) on
/// the tape. `noise` has the same shape and receives no gradient.
pub fn soft_index_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    logits: Var,
    noise: Tensor<S>,
    tau: S,
    kappa: S,
) -> Result<Var, GumbelError> {
    positive("tau", tau.as_f64())?;
    positive("kappa", kappa.as_f64())?;
    let scaled = tape.scale(logits, kappa)?;
    let g = tape.constant(noise);
    let z = tape.add(scaled, g)?;
    let z = tape.scale(z, S::one() / tau)?;
    Ok(tape.softmax(z)?)
}

/// Records `M̃ = ỹ × S` for every block and lays the result out as the
/// `[rows, cols]` weight shape.
pub fn differentiable_mask_on_tape<S: Scalar>(
    tape: &mut Tape<S>,
    soft_idx: Var,
    candidates: Var,
    rows: usize,
    cols: usize,
) -> Result<Var, GumbelError> {
    let blocks = tape.matmul(soft_idx, candidates)?;
    Ok(tape.reshape(blocks, &[rows, cols])?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn s24() -> MaskCandidateSet {
        MaskCandidateSet::enumerate(2, 4).unwrap()
    }

    #[test]
    fn gumbel_formula_points() {
        let e = std::f64::consts::E;
        assert!(gumbel_from_uniform(1.0 / e, DEFAULT_EPS_MIN).abs() < 1e-15);
        let g = gumbel_from_uniform(0.5, DEFAULT_EPS_MIN);
        assert!((g - (-(2f64.ln()).ln())).abs() < 1e-15);
        assert!((g - 0.366_512_920_581_664_3).abs() < 1e-12);
        assert!(gumbel_from_uniform(0.0, DEFAULT_EPS_MIN).is_finite());
        assert!(gumbel_from_uniform(1.0, DEFAULT_EPS_MIN).is_finite());
    }

    #[test]
    fn gumbel_mean_is_euler_mascheroni() {
        let mut src = NoiseSource::new(11);
        let draws = src.sample_gumbel(1_000_000);
        let mean = draws.iter().sum::<f64>() / draws.len() as f64;
        assert!((mean - 0.577_215_664_9).abs() < 0.01, "mean {mean}");
    }

    #[test]
    fn noise_is_deterministic_and_resumable() {
        let mut a = NoiseSource::new(5);
        let mut b = NoiseSource::new(5);
        assert_eq!(a.sample_gumbel(100), b.sample_gumbel(100));
        let state = a.state();
        let next = a.sample_gumbel(50);
        let mut c = NoiseSource::from_state(state);
        assert_eq!(c.sample_gumbel(50), next);
        let mut d = NoiseSource::new(5).with_eps_min(0.25);
        for _ in 0..1000 {
            let u = d.uniform();
            assert!((0.25..=0.75).contains(&u));
        }
    }

    #[test]
    fn soft_index_examples() {
        let y = soft_index(&[0.3f64; 6], &[0.0; 6], 1.0, 1.0).unwrap();
        for v in &y {
            assert!((v - 1.0 / 6.0).abs() < 1e-15);
        }
        let mut logits = [0.0f64; 6];
        logits[0] = 1.0;
        let y = soft_index(&logits, &[0.0; 6], 0.05, 100.0).unwrap();
        assert!(y[0] > 1.0 - 1e-9);
        assert!(soft_index(&logits, &[0.0; 6], 0.0, 1.0).is_err());
        assert!(soft_index(&logits, &[0.0; 6], -1.0, 1.0).is_err());
        assert!(soft_index(&logits, &[0.0; 5], 1.0, 1.0).is_err());
    }

    #[test]
    fn differentiable_mask_examples() {
        let set = s24();
        let one_hot = [1.0f64, 0.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(differentiable_mask(&one_hot, &set).unwrap(), vec![1.0, 1.0, 0.0, 0.0]);
        let uniform = [1.0f64 / 6.0; 6];
        for v in differentiable_mask(&uniform, &set).unwrap() {
            assert!((v - 0.5).abs() < 1e-15);
        }
        let ends = [0.5f64, 0.0, 0.0, 0.0, 0.0, 0.5];
        assert_eq!(differentiable_mask(&ends, &set).unwrap(), vec![0.5; 4]);
        assert!(differentiable_mask(&[1.0f64; 4], &set).is_err());
    }

    #[test]
    fn probability_examples() {
        let p = probability_from_logits(&[1.0f64; 6], 7.0).unwrap();
        assert!(p.iter().all(|v| (v - 1.0 / 6.0).abs() < 1e-15));
        let logits = [0.1f64, 0.3, -0.2, 0.25, 0.0, 0.1];
        let p = probability_from_logits(&logits, 1e4).unwrap();
        assert!(p[1] > 1.0 - 1e-12);
        for kappa in [1e-3, 0.5, 1.0, 30.0, 1e3] {
            let p = probability_from_logits(&logits, kappa).unwrap();
            assert_eq!(argmax(&p), argmax(&logits));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn schedule_endpoints_and_midpoint() {
        let s = GumbelSchedule {
            total_steps: 100,
            ..GumbelSchedule::default()
        };
        s.validate().unwrap();
        assert_eq!(s.at(0).unwrap(), (4.0, 100.0));
        assert_eq!(s.at(100).unwrap(), (0.05, 500.0));
        let (tau, kappa) = s.at(50).unwrap();
        assert!((kappa - 300.0).abs() < 1e-12);
        assert!((tau - (4.0f64 * 0.05).sqrt()).abs() < 1e-12);
        let lin = GumbelSchedule {
            tau_decay: TauDecay::Linear,
            ..s
        };
        assert!((lin.at(50).unwrap().0 - 2.025).abs() < 1e-12);
        assert!(matches!(s.at(101), Err(GumbelError::StepOutOfRange { .. })));
        let bad = GumbelSchedule {
            tau_start: 0.01,
            ..s
        };
        assert!(bad.validate().is_err());
        let bad = GumbelSchedule {
            kappa_end: 1.0,
            ..s
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn tape_path_matches_pure_functions() {
        let set = s24();
        let mut src = NoiseSource::new(3);
        let logits: Vec<f64> = (0..12).map(|i| ((i as f64) * 0.37).sin() * 0.01).collect();
        let noise = src.sample_gumbel(12);
        let (tau, kappa) = (0.7, 150.0);
        let mut tape = Tape::new();
        let lv = tape.leaf(Tensor::new(vec![2, 6], logits.clone()).unwrap().with_grad(true));
        let soft = soft_index_on_tape(&mut tape, lv, Tensor::new(vec![2, 6], noise.clone()).unwrap(), tau, kappa)
            .unwrap();
        let cand = tape.constant(set.to_tensor());
        let mask = differentiable_mask_on_tape(&mut tape, soft, cand, 1, 8).unwrap();
        let got = tape.value(mask).unwrap().to_vec();
        let mut want = Vec::new();
        for b in 0..2 {
            let y = soft_index(&logits[b * 6..(b + 1) * 6], &noise[b * 6..(b + 1) * 6], tau, kappa).unwrap();
            want.extend(differentiable_mask(&y, &set).unwrap());
        }
        for (g, w) in got.iter().zip(&want) {
            assert!((g - w).abs() < 1e-14);
        }
    }

    #[test]
    fn soft_index_jacobian_matches_finite_differences() {
        let mut src = NoiseSource::new(8);
        let logits: Vec<f64> = src.sample_gumbel(6).iter().map(|g| g * 0.01).collect();
        let noise = src.sample_gumbel(6);
        let weights = [0.3, -1.2, 0.7, 2.0, -0.4, 0.9];
        let (tau, kappa) = (0.9, 60.0);
        let f = |l: &[f64]| -> f64 {
            let y = soft_index(l, &noise, tau, kappa).unwrap();
            y.iter().zip(&weights).map(|(a, b)| a * b).sum()
        };
        let mut tape = Tape::new();
        let lv = tape.leaf(Tensor::new(vec![1, 6], logits.clone()).unwrap().with_grad(true));
        let y = soft_index_on_tape(&mut tape, lv, Tensor::new(vec![1, 6], noise.clone()).unwrap(), tau, kappa).unwrap();
        let w = tape.constant(Tensor::new(vec![1, 6], weights.to_vec()).unwrap());
        let p = tape.mul(y, w).unwrap();
        let l = tape.sum(p).unwrap();
        let g = tape.backward(l).unwrap();
        let analytic = g.get(lv).unwrap().data().to_vec();
        let h = 1e-5;
        let mut err = 0.0;
        let mut norm = 0.0;
        for i in 0..6 {
            let mut a = logits.clone();
            a[i] += h;
            let mut b = logits.clone();
            b[i] -= h;
            let num = (f(&a) - f(&b)) / (2.0 * h);
            err += (num - analytic[i]).powi(2);
            norm += num * num;
        }
        assert!(err.sqrt() / norm.sqrt() <= 1e-5);
    }

    #[test]
    fn distribution_helpers() {
        let set = Arc::new(s24());
        let mut logits = Tensor::<f64>::zeros(vec![2, 6]);
        logits.data_mut()[5] = 1.0;
        logits.data_mut()[6 + 2] = 1.0;
        let d = MaskDistribution::new("w", 1, 8, logits, set.clone()).unwrap();
        assert_eq!(d.final_mask().block_indices, vec![5, 2]);
        let mp = d.max_probabilities(1e3);
        assert!(mp.iter().all(|&p| p > 0.999));
        assert_eq!(d.hard_sample(&[0.0; 12], 1.0), vec![5, 2]);
        assert!(MaskDistribution::new("w", 1, 8, Tensor::<f64>::zeros(vec![3, 6]), set.clone()).is_err());
        assert!(MaskDistribution::new("w", 1, 6, Tensor::<f64>::zeros(vec![1, 6]), set).is_err());
    }

    proptest! {
        #[test]
        fn soft_index_sums_to_one_and_is_shift_invariant(
            logits in proptest::collection::vec(-1.0f64..1.0, 6),
            noise in proptest::collection::vec(-3.0f64..8.0, 6),
            tau in 0.05f64..4.0,
            kappa in 1.0f64..500.0,
            shift in -10.0f64..10.0,
        ) {
            let y = soft_index(&logits, &noise, tau, kappa).unwrap();
            prop_assert!((y.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
            let ys = soft_index(&shifted, &noise, tau, kappa).unwrap();
            for (a, b) in y.iter().zip(&ys) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn lower_tau_never_lowers_the_peak(
            logits in proptest::collection::vec(-0.05f64..0.05, 6),
            noise in proptest::collection::vec(-2.0f64..6.0, 6),
            t1 in 0.05f64..4.0,
            t2 in 0.05f64..4.0,
        ) {
            let (lo, hi) = if t1 < t2 { (t1, t2) } else { (t2, t1) };
            let peak = |t: f64| soft_index(&logits, &noise, t, 100.0).unwrap().into_iter().fold(0.0, f64::max);
            prop_assert!(peak(lo) >= peak(hi));
        }

        #[test]
        fn soft_mask_entries_sum_to_n(weights in proptest::collection::vec(0.0f64..1.0, 6)) {
            let total: f64 = weights.iter().sum();
            prop_assume!(total > 1e-9);
            let y: Vec<f64> = weights.iter().map(|w| w / total).collect();
            let m = differentiable_mask(&y, &s24()).unwrap();
            prop_assert!((m.iter().sum::<f64>() - 2.0).abs() <= 1e-12);
            prop_assert!(m.iter().all(|&v| (0.0..=1.0 + 1e-12).contains(&v)));
        }
    }
}
