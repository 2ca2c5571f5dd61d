//! Per-step training records in `key=value` line form.

use std::fmt::Write as _;

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct StepMetrics {
    pub step: usize,
    pub tau: f64,
    pub kappa: f64,
    /// Task loss of the soft-masked model.
    pub loss: f64,
    /// `Σ ‖W ⊙ M̃‖²`
    pub reg: f64,
    /// `loss − λ·reg`
    pub objective: f64,
    /// Mean over tensors of the logit-gradient L2 norm.
    pub grad_norm: f64,
    /// Fraction of mask entries that differ between the hard samples of
    /// this step and the previous one; zero on the first step.
    pub mask_diff: f64,
    pub max_prob_mean: f64,
    pub max_prob_p10: f64,
    /// `sqrt(reg)`
    pub remaining_l2: f64,
}

const FIELDS: [&str; 11] = [
    "step",
    "tau",
    "kappa",
    "loss",
    "reg",
    "objective",
    "grad_norm",
    "mask_diff",
    "max_prob_mean",
    "max_prob_p10",
    "remaining_l2",
];

impl StepMetrics {
    fn values(&self) -> [f64; 10] {
        [
            self.tau,
            self.kappa,
            self.loss,
            self.reg,
            self.objective,
            self.grad_norm,
            self.mask_diff,
            self.max_prob_mean,
            self.max_prob_p10,
            self.remaining_l2,
        ]
    }

    pub fn to_line(&self) -> String {
        let mut s = format!("step={}", self.step);
        for (k, v) in FIELDS[1..].iter().zip(self.values()) {
            let _ = write!(s, " {k}={v:?}");
        }
        s
    }

    pub fn parse_line(line: &str) -> Result<Self, String> {
        let mut m = StepMetrics::default();
        let mut seen = [false; 11];
        for tok in line.split_whitespace() {
            let (k, v) = tok.split_once('=').ok_or_else(|| format!("malformed field '{tok}'"))?;
            let i = FIELDS
                .iter()
                .position(|f| *f == k)
                .ok_or_else(|| format!("unknown field '{k}'"))?;
            seen[i] = true;
            if i == 0 {
                m.step = v.parse().map_err(|e| format!("step: {e}"))?;
                continue;
            }
            let x: f64 = v.parse().map_err(|e| format!("{k}: {e}"))?;
            *match i {
                1 => &mut m.tau,
                2 => &mut m.kappa,
                3 => &mut m.loss,
                4 => &mut m.reg,
                5 => &mut m.objective,
                6 => &mut m.grad_norm,
                7 => &mut m.mask_diff,
                8 => &mut m.max_prob_mean,
                9 => &mut m.max_prob_p10,
                _ => &mut m.remaining_l2,
            } = x;
        }
        if let Some(i) = seen.iter().position(|s| !s) {
            return Err(format!("missing field '{}'", FIELDS[i]));
        }
        Ok(m)
    }
}

pub fn metrics_text(metrics: &[StepMetrics]) -> String {
    metrics.iter().map(|m| m.to_line() + "\n").collect()
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = xs.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

/// Mean mask diff over the first and last tenth of the steps after step 0.
pub fn mask_diff_deciles(metrics: &[StepMetrics]) -> (f64, f64) {
    let rest: Vec<f64> = metrics.iter().filter(|m| m.step > 0).map(|m| m.mask_diff).collect();
    let k = (rest.len() / 10).max(1).min(rest.len());
    (mean(rest[..k].iter().copied()), mean(rest[rest.len() - k..].iter().copied()))
}

/// Mean gradient norm over the first `steps` records.
pub fn mean_grad_norm(metrics: &[StepMetrics], steps: usize) -> f64 {
    mean(metrics.iter().take(steps).map(|m| m.grad_norm))
}
