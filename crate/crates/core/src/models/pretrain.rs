use super::{BatchSource, Model, ModelError};
use crate::optim::{AdamW, AdamWConfig};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainConfig {
    pub steps: usize,
    pub optimizer: AdamWConfig,
    /// Abort once a training loss exceeds this multiple of the first one.
    pub divergence_factor: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 1000,
            optimizer: AdamWConfig {
                lr: 3e-3,
                weight_decay: 0.01,
                ..AdamWConfig::default()
            },
            divergence_factor: 1e4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainReport {
    pub train_losses: Vec<f64>,
    pub initial_val: f64,
    pub final_val: f64,
}

/// Batch-size weighted mean loss of the dense model.
pub fn mean_loss<S: Scalar, M: Model<S>>(model: &M, batches: &[M::Batch]) -> Result<f64, ModelError> {
    if batches.is_empty() {
        return Err(ModelError::Data("no evaluation batches".into()));
    }
    let (mut total, mut weight) = (0.0, 0usize);
    for b in batches {
        let w = model.batch_weight(b);
        total += model.loss(b)? * w as f64;
        weight += w;
    }
    Ok(total / weight.max(1) as f64)
}

/// Trains every parameter with AdamW. The model is meant to be frozen
/// afterwards.
pub fn pretrain_dense<S, M, D>(
    model: &mut M,
    data: &mut D,
    val: &[M::Batch],
    config: &PretrainConfig,
) -> Result<PretrainReport, ModelError>
where
    S: Scalar,
    M: Model<S>,
    D: BatchSource<Batch = M::Batch>,
{
    let initial_val = mean_loss(model, val)?;
    let sizes: Vec<usize> = model.params().iter().map(|p| p.value.len()).collect();
    let mut opt = AdamW::<S>::new(config.optimizer, &sizes);
    let mut losses = Vec::with_capacity(config.steps);
    for step in 0..config.steps {
        let batch = data.next_batch();
        let mut tape = Tape::new();
        let vars: Vec<Var> = model
            .params()
            .iter()
            .map(|p| tape.leaf(p.value.clone().with_grad(true)))
            .collect();
        let loss = model.forward_loss(&mut tape, &vars, &batch, None)?;
        let value = tape.scalar(loss)?.as_f64();
        let first = losses.first().copied().unwrap_or(value);
        if !value.is_finite() || value > config.divergence_factor * first {
            return Err(ModelError::Divergence {
                step,
                loss: value,
                initial: first,
            });
        }
        losses.push(value);
        let grads = tape.backward(loss)?;
        opt.begin_step();
        for (slot, (p, v)) in model.params_mut().iter_mut().zip(&vars).enumerate() {
            let g = grads.get(*v).map(|t| t.data());
            opt.update(slot, p.value.data_mut(), g);
        }
    }
    let final_val = mean_loss(model, val)?;
    Ok(PretrainReport {
        train_losses: losses,
        initial_val,
        final_val,
    })
}
