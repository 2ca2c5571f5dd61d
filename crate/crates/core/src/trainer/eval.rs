//! Hard-mask evaluation and layer sensitivity sweeps.

use std::collections::BTreeSet;

use super::TrainError;
use crate::mask::{LayerMask, MaskCandidateSet, MaskError};
use crate::models::{Model, ModelError};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Parameter values with every given hard mask applied as `W ⊙ M`.
pub fn apply_masks<S: Scalar, M: Model<S>>(model: &M, masks: &[LayerMask]) -> Result<Vec<Tensor<S>>, TrainError> {
    let mut values: Vec<Tensor<S>> = model.params().iter().map(|p| p.value.clone()).collect();
    for mask in masks {
        let i = model
            .param_index(&mask.tensor_name)
            .ok_or_else(|| MaskError::UnknownTensor(mask.tensor_name.clone()))?;
        let shape = values[i].shape().to_vec();
        if shape != [mask.rows, mask.cols] {
            return Err(MaskError::Shape {
                tensor: mask.tensor_name.clone(),
                expected: (shape.first().copied().unwrap_or(0), shape.get(1).copied().unwrap_or(0)),
                got: (mask.rows, mask.cols),
            }
            .into());
        }
        let set = MaskCandidateSet::for_pattern(mask.pattern);
        values[i] = values[i].hadamard(&mask.expand(&set))?;
    }
    Ok(values)
}

/// Weighted mean loss over `batches`. `None` evaluates the dense model.
pub fn evaluate_loss<S: Scalar, M: Model<S>>(
    model: &M,
    masks: Option<&[LayerMask]>,
    batches: &[M::Batch],
) -> Result<f64, TrainError> {
    if batches.is_empty() {
        return Err(ModelError::Data("no evaluation batches".into()).into());
    }
    let values = apply_masks(model, masks.unwrap_or(&[]))?;
    let (mut total, mut weight) = (0.0, 0usize);
    for b in batches {
        let mut tape = Tape::new();
        let vars: Vec<Var> = values.iter().map(|v| tape.constant(v.clone())).collect();
        let l = model.forward_loss(&mut tape, &vars, b, None)?;
        let w = model.batch_weight(b);
        total += tape.scalar(l)?.as_f64() * w as f64;
        weight += w;
    }
    Ok(total / weight.max(1) as f64)
}

/// `exp` of the mean token negative log-likelihood.
pub fn evaluate_perplexity<S: Scalar, M: Model<S>>(
    model: &M,
    masks: Option<&[LayerMask]>,
    batches: &[M::Batch],
) -> Result<f64, TrainError> {
    Ok(evaluate_loss(model, masks, batches)?.exp())
}

/// `sqrt(Σ ‖W ⊙ M‖²)` over the masked tensors.
pub fn remaining_weight_l2<S: Scalar, M: Model<S>>(model: &M, masks: &[LayerMask]) -> Result<f64, TrainError> {
    let values = apply_masks(model, masks)?;
    let mut total = 0.0;
    for mask in masks {
        let i = model.param_index(&mask.tensor_name).expect("checked by apply_masks");
        total += values[i].data().iter().map(|v| v.as_f64().powi(2)).sum::<f64>();
    }
    Ok(total.sqrt())
}

/// Layer of a prunable tensor: the `layerN` prefix when present, the tensor
/// itself otherwise.
pub fn layer_of(tensor: &str) -> &str {
    match tensor.split_once('.') {
        Some((head, _)) if head.starts_with("layer") => head,
        _ => tensor,
    }
}

/// Ordered list of layers covered by `masks`.
pub fn mask_layers(masks: &[LayerMask]) -> Vec<String> {
    let mut seen = BTreeSet::new();
    let mut out = Vec::new();
    for m in masks {
        let l = layer_of(&m.tensor_name);
        if seen.insert(l.to_string()) {
            out.push(l.to_string());
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SensitivityStrategy {
    SkipFirst(usize),
    SkipLast(usize),
    /// One row per layer with only that layer dense.
    LeaveOneDense,
    /// Keep these layers (or tensors) dense; `all` keeps everything dense.
    Explicit(Vec<String>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SensitivityRow {
    pub label: String,
    pub dense_layers: Vec<String>,
    pub perplexity: f64,
}

impl SensitivityRow {
    pub fn to_line(&self) -> String {
        format!(
            "label={} dense={} ppl={:?}",
            self.label,
            if self.dense_layers.is_empty() {
                "-".to_string()
            } else {
                self.dense_layers.join(",")
            },
            self.perplexity
        )
    }
}

/// Masks left after keeping `dense` layers or tensors unpruned.
pub fn drop_dense(masks: &[LayerMask], dense: &[String]) -> Result<Vec<LayerMask>, TrainError> {
    let layers = mask_layers(masks);
    if dense.iter().any(|d| d == "all") {
        return Ok(Vec::new());
    }
    for d in dense {
        if !layers.contains(d) && !masks.iter().any(|m| &m.tensor_name == d) {
            return Err(TrainError::UnknownLayer(d.clone()));
        }
    }
    Ok(masks
        .iter()
        .filter(|m| !dense.iter().any(|d| d == layer_of(&m.tensor_name) || *d == m.tensor_name))
        .cloned()
        .collect())
}

/// Perplexity table with selected layers kept dense. The first row is the
/// fully masked model.
pub fn layer_sensitivity<S: Scalar, M: Model<S>>(
    model: &M,
    masks: &[LayerMask],
    batches: &[M::Batch],
    strategy: &SensitivityStrategy,
) -> Result<Vec<SensitivityRow>, TrainError> {
    let layers = mask_layers(masks);
    let mut plans: Vec<(String, Vec<String>)> = Vec::new();
    match strategy {
        SensitivityStrategy::SkipFirst(k) => {
            plans.push((format!("skip_first_{k}"), layers.iter().take(*k).cloned().collect()));
        }
        SensitivityStrategy::SkipLast(k) => {
            let start = layers.len().saturating_sub(*k);
            plans.push((format!("skip_last_{k}"), layers[start..].to_vec()));
        }
        SensitivityStrategy::LeaveOneDense => {
            for l in &layers {
                plans.push((format!("dense_{l}"), vec![l.clone()]));
            }
        }
        SensitivityStrategy::Explicit(names) => plans.push(("explicit".into(), names.clone())),
    }
    let mut rows = vec![SensitivityRow {
        label: "all_sparse".into(),
        dense_layers: Vec::new(),
        perplexity: evaluate_perplexity(model, Some(masks), batches)?,
    }];
    for (label, dense) in plans {
        let kept = drop_dense(masks, &dense)?;
        rows.push(SensitivityRow {
            label,
            perplexity: evaluate_perplexity(model, Some(&kept), batches)?,
            dense_layers: dense,
        });
    }
    Ok(rows)
}
