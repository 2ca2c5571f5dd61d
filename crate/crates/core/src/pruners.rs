//! One-shot mask baselines and import of externally computed masks.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::mask::{decode_masks, LayerMask, MaskCandidateSet, MaskError, Pattern};
use crate::models::{Model, ModelError};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PruneError {
    #[error("tensor '{0}': no calibration statistics")]
    MissingStats(String),
    #[error("tensor '{tensor}': calibration covers {got} input features, weight has {expected}")]
    StatsWidth { tensor: String, expected: usize, got: usize },
    #[error("tensor '{0}': weights must be a finite matrix")]
    BadWeights(String),
    #[error("calibration: {0}")]
    Calibration(String),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Per-weight importance, same shape as the weight matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct ImportanceScores {
    pub tensor_name: String,
    pub rows: usize,
    pub cols: usize,
    pub scores: Vec<f64>,
}

fn matrix_dims<S: Scalar>(name: &str, w: &Tensor<S>) -> Result<(usize, usize), PruneError> {
    match w.shape() {
        [r, c] if w.data().iter().all(|v| v.is_finite()) => Ok((*r, *c)),
        _ => Err(PruneError::BadWeights(name.to_string())),
    }
}

/// `|w|`
pub fn magnitude_scores<S: Scalar>(name: &str, weights: &Tensor<S>) -> Result<ImportanceScores, PruneError> {
    let (rows, cols) = matrix_dims(name, weights)?;
    Ok(ImportanceScores {
        tensor_name: name.to_string(),
        rows,
        cols,
        scores: weights.data().iter().map(|w| w.as_f64().abs()).collect(),
    })
}

/// `|w_ij| · ‖x_j‖`
pub fn wanda_scores<S: Scalar>(
    name: &str,
    weights: &Tensor<S>,
    stats: &CalibrationStats,
) -> Result<ImportanceScores, PruneError> {
    let (rows, cols) = matrix_dims(name, weights)?;
    let norms = stats.norms(name).ok_or_else(|| PruneError::MissingStats(name.to_string()))?;
    if norms.len() != cols {
        return Err(PruneError::StatsWidth {
            tensor: name.to_string(),
            expected: cols,
            got: norms.len(),
        });
    }
    let scores = weights
        .data()
        .chunks_exact(cols.max(1))
        .flat_map(|row| row.iter().zip(&norms).map(|(w, n)| w.as_f64().abs() * n))
        .collect();
    Ok(ImportanceScores {
        tensor_name: name.to_string(),
        rows,
        cols,
        scores,
    })
}

/// Keeps the `n` best entries of every block. Ranking is by score, then by
/// `|w|` (`secondary`), then by lowest column.
pub fn prune_by_scores(
    scores: &ImportanceScores,
    secondary: &[f64],
    pattern: Pattern,
) -> Result<LayerMask, PruneError> {
    let Pattern { n, m } = pattern;
    if scores.cols % m != 0 {
        return Err(MaskError::Indivisible {
            tensor: scores.tensor_name.clone(),
            cols: scores.cols,
            m,
        }
        .into());
    }
    let set = MaskCandidateSet::for_pattern(pattern);
    let mut indices = Vec::with_capacity(scores.scores.len() / m);
    let mut order: Vec<usize> = (0..m).collect();
    let mut bits = vec![0u8; m];
    for (b, block) in scores.scores.chunks_exact(m).enumerate() {
        let sec = &secondary[b * m..(b + 1) * m];
        order.sort_by(|&i, &j| {
            block[j]
                .total_cmp(&block[i])
                .then(sec[j].total_cmp(&sec[i]))
                .then(i.cmp(&j))
        });
        bits.iter_mut().for_each(|x| *x = 0);
        for &i in &order[..n] {
            bits[i] = 1;
        }
        indices.push(set.index_of(&bits).expect("n ones form a candidate") as u16);
    }
    Ok(LayerMask::new(
        scores.tensor_name.clone(),
        scores.rows,
        scores.cols,
        pattern,
        indices,
    )?)
}

pub fn magnitude_prune<S: Scalar>(name: &str, weights: &Tensor<S>, pattern: Pattern) -> Result<LayerMask, PruneError> {
    let s = magnitude_scores(name, weights)?;
    let sec = s.scores.clone();
    prune_by_scores(&s, &sec, pattern)
}

pub fn wanda_prune<S: Scalar>(
    name: &str,
    weights: &Tensor<S>,
    stats: &CalibrationStats,
    pattern: Pattern,
) -> Result<LayerMask, PruneError> {
    let s = wanda_scores(name, weights, stats)?;
    let mag = magnitude_scores(name, weights)?;
    prune_by_scores(&s, &mag.scores, pattern)
}

/// Per-feature input norms of each prunable projection.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CalibrationStats {
    sums: BTreeMap<String, Vec<f64>>,
    pub sample_count: usize,
}

impl CalibrationStats {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds the squares of a `[rows, width]` block of inputs.
    pub fn accumulate<S: Scalar>(&mut self, name: &str, inputs: &[S], width: usize) {
        let acc = self.sums.entry(name.to_string()).or_insert_with(|| vec![0.0; width]);
        for row in inputs.chunks_exact(width.max(1)) {
            for (a, x) in acc.iter_mut().zip(row) {
                let v = x.as_f64();
                *a += v * v;
            }
        }
    }

    /// Builds stats from explicit norms.
    pub fn from_norms(norms: BTreeMap<String, Vec<f64>>, sample_count: usize) -> Self {
        Self {
            sums: norms.into_iter().map(|(k, v)| (k, v.iter().map(|x| x * x).collect())).collect(),
            sample_count,
        }
    }

    pub fn norms(&self, name: &str) -> Option<Vec<f64>> {
        self.sums.get(name).map(|s| s.iter().map(|v| v.sqrt()).collect())
    }

    pub fn tensors(&self) -> impl Iterator<Item = &str> {
        self.sums.keys().map(String::as_str)
    }
}

/// Runs forward passes and accumulates input norms over at most
/// `max_samples` activation rows per projection.
pub fn calibrate<S: Scalar, M: Model<S>>(
    model: &M,
    batches: &[M::Batch],
    max_samples: usize,
) -> Result<CalibrationStats, PruneError> {
    if max_samples == 0 {
        return Err(PruneError::Calibration("max_samples must be positive".into()));
    }
    if batches.is_empty() {
        return Err(PruneError::Calibration("no calibration data".into()));
    }
    let mut stats = CalibrationStats::new();
    let mut used = 0usize;
    for batch in batches {
        if used >= max_samples {
            break;
        }
        let budget = max_samples - used;
        let mut taken = 0usize;
        let mut tape = Tape::new();
        let vars: Vec<Var> = model.params().iter().map(|p| tape.constant(p.value.clone())).collect();
        let mut probe = |name: &str, x: &[S], width: usize| {
            let rows = (x.len() / width.max(1)).min(budget);
            taken = taken.max(rows);
            stats.accumulate(name, &x[..rows * width], width);
        };
        model.forward_loss(&mut tape, &vars, batch, Some(&mut probe))?;
        used += taken;
    }
    stats.sample_count = used;
    if used == 0 {
        return Err(PruneError::Calibration("calibration batches were empty".into()));
    }
    Ok(stats)
}

/// Magnitude masks for every prunable tensor not listed in `skip`.
pub fn magnitude_masks<S: Scalar, M: Model<S>>(
    model: &M,
    pattern: Pattern,
    skip: &[String],
) -> Result<Vec<LayerMask>, PruneError> {
    model
        .prunable()
        .into_iter()
        .filter(|(_, p)| !skip.contains(&p.name))
        .map(|(_, p)| magnitude_prune(&p.name, &p.value, pattern))
        .collect()
}

pub fn wanda_masks<S: Scalar, M: Model<S>>(
    model: &M,
    stats: &CalibrationStats,
    pattern: Pattern,
    skip: &[String],
) -> Result<Vec<LayerMask>, PruneError> {
    model
        .prunable()
        .into_iter()
        .filter(|(_, p)| !skip.contains(&p.name))
        .map(|(_, p)| wanda_prune(&p.name, &p.value, stats, pattern))
        .collect()
}

/// Expected `(name, rows, cols)` of every prunable tensor of `model`.
pub fn prunable_shapes<S: Scalar, M: Model<S>>(model: &M) -> Vec<(String, usize, usize)> {
    model
        .prunable()
        .into_iter()
        .map(|(_, p)| (p.name.clone(), p.value.shape()[0], p.value.shape()[1]))
        .collect()
}

/// Reads a coded or dense mask archive and checks every mask against the
/// expected tensor shapes and pattern. An empty file yields no masks.
pub fn import_external_masks(
    bytes: &[u8],
    expected: &[(String, usize, usize)],
    pattern: Pattern,
) -> Result<Vec<LayerMask>, PruneError> {
    let archive = decode_masks(bytes)?;
    if archive.masks.is_empty() {
        return Ok(Vec::new());
    }
    if archive.pattern != pattern {
        return Err(MaskError::PatternMismatch {
            expected: pattern,
            got: archive.pattern,
        }
        .into());
    }
    for mask in &archive.masks {
        let (_, rows, cols) = expected
            .iter()
            .find(|(n, _, _)| *n == mask.tensor_name)
            .ok_or_else(|| MaskError::UnknownTensor(mask.tensor_name.clone()))?;
        if (mask.rows, mask.cols) != (*rows, *cols) {
            return Err(MaskError::Shape {
                tensor: mask.tensor_name.clone(),
                expected: (*rows, *cols),
                got: (mask.rows, mask.cols),
            }
            .into());
        }
    }
    Ok(archive.masks)
}
