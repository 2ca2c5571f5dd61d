//! Flat `key=value` training configuration.

use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::gumbel::{GumbelSchedule, TauDecay};
use crate::mask::Pattern;
use crate::optim::AdamWConfig;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("unknown config key '{0}'")]
    UnknownKey(String),
    #[error("config key '{key}': invalid value '{value}': {reason}")]
    Invalid { key: String, value: String, reason: String },
    #[error("config line {line}: expected key=value, got '{text}'")]
    Syntax { line: usize, text: String },
}

/// Splits `key=value` lines. Blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>, ConfigError> {
    let mut out = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (k, v) = line.split_once('=').ok_or_else(|| ConfigError::Syntax {
            line: i + 1,
            text: raw.to_string(),
        })?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

fn invalid(key: &str, value: &str, reason: impl Into<String>) -> ConfigError {
    ConfigError::Invalid {
        key: key.to_string(),
        value: value.to_string(),
        reason: reason.into(),
    }
}

fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T, ConfigError>
where
    T::Err: std::fmt::Display,
{
    value.parse().map_err(|e: T::Err| invalid(key, value, e.to_string()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub lambda_reg: f64,
    pub prior_strength: f64,
    pub logits_init_std: f64,
    pub tau_start: f64,
    pub tau_end: f64,
    pub kappa_start: f64,
    pub kappa_end: f64,
    pub tau_decay: TauDecay,
    pub adam_beta1: f64,
    pub adam_beta2: f64,
    pub adam_eps: f64,
    pub pattern: Pattern,
    pub seed: u64,
    pub layers_to_skip: Vec<String>,
    /// Abort once the loss exceeds this multiple of the first step's loss.
    pub divergence_factor: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        let s = GumbelSchedule::default();
        let a = AdamWConfig::default();
        Self {
            steps: 2000,
            batch_size: 8,
            learning_rate: a.lr,
            weight_decay: a.weight_decay,
            lambda_reg: 1e-5,
            prior_strength: 3.0,
            logits_init_std: 0.01,
            tau_start: s.tau_start,
            tau_end: s.tau_end,
            kappa_start: s.kappa_start,
            kappa_end: s.kappa_end,
            tau_decay: s.tau_decay,
            adam_beta1: a.beta1,
            adam_beta2: a.beta2,
            adam_eps: a.eps,
            pattern: Pattern::TWO_FOUR,
            seed: 0,
            layers_to_skip: Vec::new(),
            divergence_factor: 1e4,
        }
    }
}

impl TrainConfig {
    pub const KEYS: [&'static str; 19] = [
        "steps",
        "batch_size",
        "learning_rate",
        "weight_decay",
        "lambda_reg",
        "prior_strength",
        "logits_init_std",
        "tau_start",
        "tau_end",
        "kappa_start",
        "kappa_end",
        "tau_decay",
        "adam_beta1",
        "adam_beta2",
        "adam_eps",
        "pattern",
        "seed",
        "layers_to_skip",
        "divergence_factor",
    ];

    /// Sets one field from text. Unknown keys are rejected.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), ConfigError> {
        match key {
            "steps" => self.steps = num(key, value)?,
            "batch_size" => self.batch_size = num(key, value)?,
            "learning_rate" => self.learning_rate = num(key, value)?,
            "weight_decay" => self.weight_decay = num(key, value)?,
            "lambda_reg" => self.lambda_reg = num(key, value)?,
            "prior_strength" => self.prior_strength = num(key, value)?,
            "logits_init_std" => self.logits_init_std = num(key, value)?,
            "tau_start" => self.tau_start = num(key, value)?,
            "tau_end" => self.tau_end = num(key, value)?,
            "kappa_start" => self.kappa_start = num(key, value)?,
            "kappa_end" => self.kappa_end = num(key, value)?,
            "tau_decay" => self.tau_decay = value.parse().map_err(|e: String| invalid(key, value, e))?,
            "adam_beta1" => self.adam_beta1 = num(key, value)?,
            "adam_beta2" => self.adam_beta2 = num(key, value)?,
            "adam_eps" => self.adam_eps = num(key, value)?,
            "pattern" => self.pattern = value.parse().map_err(|e: String| invalid(key, value, e))?,
            "seed" => self.seed = num(key, value)?,
            "layers_to_skip" => {
                self.layers_to_skip = value
                    .split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(String::from)
                    .collect()
            }
            "divergence_factor" => self.divergence_factor = num(key, value)?,
            _ => return Err(ConfigError::UnknownKey(key.to_string())),
        }
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self, ConfigError> {
        let mut c = Self::default();
        for (k, v) in parse_kv(text)? {
            c.set(&k, &v)?;
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let check = |ok: bool, key: &str, v: String, reason: &str| if ok { Ok(()) } else { Err(invalid(key, &v, reason)) };
        check(self.batch_size > 0, "batch_size", self.batch_size.to_string(), "must be positive")?;
        check(self.learning_rate > 0.0, "learning_rate", self.learning_rate.to_string(), "must be positive")?;
        check(self.weight_decay >= 0.0, "weight_decay", self.weight_decay.to_string(), "must be non-negative")?;
        check(self.lambda_reg >= 0.0, "lambda_reg", self.lambda_reg.to_string(), "must be non-negative")?;
        check(self.prior_strength >= 0.0, "prior_strength", self.prior_strength.to_string(), "must be non-negative")?;
        check(
            self.logits_init_std >= 0.0 && self.logits_init_std.is_finite(),
            "logits_init_std",
            self.logits_init_std.to_string(),
            "must be finite and non-negative",
        )?;
        for (k, v) in [("adam_beta1", self.adam_beta1), ("adam_beta2", self.adam_beta2)] {
            check((0.0..1.0).contains(&v), k, v.to_string(), "must lie in [0, 1)")?;
        }
        check(self.adam_eps > 0.0, "adam_eps", self.adam_eps.to_string(), "must be positive")?;
        check(self.divergence_factor > 1.0, "divergence_factor", self.divergence_factor.to_string(), "must exceed 1")?;
        self.schedule().validate().map_err(|e| invalid("schedule", "", e.to_string()))
    }

    /// Schedule spanning steps `0..steps`, reaching its end values on the
    /// last step.
    pub fn schedule(&self) -> GumbelSchedule {
        GumbelSchedule {
            tau_start: self.tau_start,
            tau_end: self.tau_end,
            kappa_start: self.kappa_start,
            kappa_end: self.kappa_end,
            total_steps: self.steps.saturating_sub(1),
            tau_decay: self.tau_decay,
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr: self.learning_rate,
            beta1: self.adam_beta1,
            beta2: self.adam_beta2,
            eps: self.adam_eps,
            weight_decay: self.weight_decay,
        }
    }

    /// Canonical text form; parsing it gives back an equal config.
    pub fn to_kv_text(&self) -> String {
        let vals: [String; 19] = [
            self.steps.to_string(),
            self.batch_size.to_string(),
            format!("{:?}", self.learning_rate),
            format!("{:?}", self.weight_decay),
            format!("{:?}", self.lambda_reg),
            format!("{:?}", self.prior_strength),
            format!("{:?}", self.logits_init_std),
            format!("{:?}", self.tau_start),
            format!("{:?}", self.tau_end),
            format!("{:?}", self.kappa_start),
            format!("{:?}", self.kappa_end),
            self.tau_decay.to_string(),
            format!("{:?}", self.adam_beta1),
            format!("{:?}", self.adam_beta2),
            format!("{:?}", self.adam_eps),
            self.pattern.to_string(),
            self.seed.to_string(),
            self.layers_to_skip.join(","),
            format!("{:?}", self.divergence_factor),
        ];
        Self::KEYS
            .iter()
            .zip(vals)
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn hash(&self) -> [u8; 32] {
        Sha256::digest(self.to_kv_text().as_bytes()).into()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_text() {
        let c = TrainConfig::default();
        assert_eq!(c.steps, 2000);
        assert_eq!(c.learning_rate, 1e-3);
        assert_eq!(c.weight_decay, 0.1);
        assert_eq!(c.lambda_reg, 1e-5);
        assert_eq!(c.prior_strength, 3.0);
        assert_eq!(c.logits_init_std, 0.01);
        assert_eq!(TrainConfig::from_kv_text(&c.to_kv_text()).unwrap(), c);
        let mut d = c.clone();
        d.layers_to_skip = vec!["a".into(), "b".into()];
        d.tau_decay = TauDecay::Linear;
        d.pattern = Pattern::new(1, 4).unwrap();
        assert_eq!(TrainConfig::from_kv_text(&d.to_kv_text()).unwrap(), d);
        assert_ne!(c.hash(), d.hash());
    }

    #[test]
    fn errors_name_the_key() {
        let e = TrainConfig::from_kv_text("stepz=3").unwrap_err();
        assert_eq!(e, ConfigError::UnknownKey("stepz".into()));
        let e = TrainConfig::from_kv_text("# c\n\nlearning_rate=abc").unwrap_err();
        assert!(matches!(e, ConfigError::Invalid { ref key, .. } if key == "learning_rate"));
        let e = TrainConfig::from_kv_text("lambda_reg=-1").unwrap_err();
        assert!(e.to_string().contains("lambda_reg"));
        assert!(matches!(
            TrainConfig::from_kv_text("steps").unwrap_err(),
            ConfigError::Syntax { line: 1, .. }
        ));
        assert!(TrainConfig::from_kv_text("kappa_start=600").is_err());
    }

    #[test]
    fn schedule_spans_all_steps() {
        let c = TrainConfig {
            steps: 11,
            ..TrainConfig::default()
        };
        let s = c.schedule();
        assert_eq!(s.at(10).unwrap(), (c.tau_end, c.kappa_end));
        let one = TrainConfig {
            steps: 1,
            ..TrainConfig::default()
        };
        assert_eq!(one.schedule().at(0).unwrap(), (4.0, 100.0));
    }
}
