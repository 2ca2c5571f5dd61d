//! Mask learning: Gumbel-softmax sampling of N:M masks over frozen weights,
//! optimized with AdamW on the per-block logits.

mod checkpoint;
mod config;
mod eval;
mod metrics;

use std::sync::Arc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::bytes::FormatError;
use crate::gumbel::{
    differentiable_mask_on_tape, soft_index_on_tape, GumbelError, MaskDistribution, NoiseSource,
};
use crate::mask::{apply_prior, BlockMask, LayerMask, MaskCandidateSet, MaskError};
use crate::models::{BatchSource, Model, ModelError};
use crate::optim::AdamW;
use crate::scalar::Scalar;
use crate::seeds::{split_seed, stream};
use crate::tensor::{Tape, Tensor, TensorError, Var};

pub use checkpoint::{Checkpoint, CheckpointTensor, CHECKPOINT_MAGIC};
pub use config::{parse_kv, ConfigError, TrainConfig};
pub use eval::{
    apply_masks, drop_dense, evaluate_loss, evaluate_perplexity, layer_of, layer_sensitivity, mask_layers,
    remaining_weight_l2, SensitivityRow, SensitivityStrategy,
};
pub use metrics::{mask_diff_deciles, mean_grad_norm, metrics_text, StepMetrics};

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TrainError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Mask(#[from] MaskError),
    #[error(transparent)]
    Gumbel(#[from] GumbelError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Format(#[from] FormatError),
    #[error("prior has no mask for tensor '{0}'")]
    MissingPrior(String),
    #[error("unknown layer '{0}'")]
    UnknownLayer(String),
    #[error("checkpoint was written with a different config")]
    ConfigMismatch,
    #[error("checkpoint does not match the model: {0}")]
    CheckpointMismatch(String),
    #[error("non-finite loss at step {step} (tau={tau}, kappa={kappa}, loss={loss}, reg={reg})")]
    NonFinite {
        step: usize,
        tau: f64,
        kappa: f64,
        loss: f64,
        reg: f64,
        checkpoint: Vec<u8>,
    },
    #[error("loss diverged at step {step}: {loss} exceeds {factor} x initial {initial}")]
    Diverged {
        step: usize,
        loss: f64,
        initial: f64,
        factor: f64,
        checkpoint: Vec<u8>,
    },
}

/// A prunable tensor that receives a learned mask.
#[derive(Debug, Clone)]
struct Target {
    param: usize,
    rows: usize,
    cols: usize,
}

/// Tape handles of one objective evaluation.
#[derive(Debug, Clone)]
pub struct Objective {
    /// `loss − λ·reg`
    pub total: Var,
    pub loss: Var,
    pub reg: Var,
    /// One leaf per distribution.
    pub logits: Vec<Var>,
}

/// Learned masks plus the training record.
#[derive(Debug, Clone)]
pub struct TrainReport<S> {
    pub masks: Vec<LayerMask>,
    pub metrics: Vec<StepMetrics>,
    pub checkpoint: Checkpoint<S>,
}

/// Allocates logits `~ N(0, σ₀)` for every prunable tensor not skipped,
/// optionally shifted toward `prior` masks with strength α.
pub fn init_logits<S: Scalar, M: Model<S>>(
    model: &M,
    config: &TrainConfig,
    prior: Option<&[LayerMask]>,
) -> Result<Vec<MaskDistribution<S>>, TrainError> {
    let set = Arc::new(MaskCandidateSet::for_pattern(config.pattern));
    let k = set.len();
    let targets = targets(model, config)?;
    if let Some(prior) = prior {
        for p in prior {
            let known = model.prunable().iter().any(|(_, q)| q.name == p.tensor_name);
            if !known {
                return Err(MaskError::UnknownTensor(p.tensor_name.clone()).into());
            }
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(split_seed(config.seed, stream::LOGITS));
    let normal = Normal::new(0.0, config.logits_init_std).map_err(|e| ConfigError::Invalid {
        key: "logits_init_std".into(),
        value: config.logits_init_std.to_string(),
        reason: e.to_string(),
    })?;
    let alpha = S::of(config.prior_strength);
    let mut out = Vec::with_capacity(targets.len());
    for t in &targets {
        let name = &model.params()[t.param].name;
        let blocks = t.rows * t.cols / config.pattern.m;
        let mut logits: Vec<S> = (0..blocks * k).map(|_| S::of(normal.sample(&mut rng))).collect();
        if let Some(prior) = prior {
            let mask = prior
                .iter()
                .find(|p| &p.tensor_name == name)
                .ok_or_else(|| TrainError::MissingPrior(name.clone()))?;
            if (mask.rows, mask.cols) != (t.rows, t.cols) {
                return Err(MaskError::Shape {
                    tensor: name.clone(),
                    expected: (t.rows, t.cols),
                    got: (mask.rows, mask.cols),
                }
                .into());
            }
            if mask.pattern != config.pattern {
                return Err(MaskError::PatternMismatch {
                    expected: config.pattern,
                    got: mask.pattern,
                }
                .into());
            }
            for (b, &idx) in mask.block_indices.iter().enumerate() {
                let block = BlockMask::new(set.row(idx as usize).to_vec(), config.pattern)?;
                let shifted = apply_prior(&logits[b * k..(b + 1) * k], &block, &set, alpha)?;
                logits[b * k..(b + 1) * k].copy_from_slice(&shifted);
            }
        }
        let logits = Tensor::new(vec![blocks, k], logits)?;
        out.push(MaskDistribution::new(name.clone(), t.rows, t.cols, logits, set.clone())?);
    }
    Ok(out)
}

fn targets<S: Scalar, M: Model<S>>(model: &M, config: &TrainConfig) -> Result<Vec<Target>, TrainError> {
    let mut out = Vec::new();
    for (i, p) in model.prunable() {
        let layer = layer_of(&p.name);
        if config.layers_to_skip.iter().any(|s| s == &p.name || s == layer) {
            continue;
        }
        let (rows, cols) = match p.value.shape() {
            [r, c] => (*r, *c),
            s => {
                return Err(ModelError::Spec(format!("prunable tensor '{}' has shape {s:?}", p.name)).into());
            }
        };
        if cols % config.pattern.m != 0 {
            return Err(MaskError::Indivisible {
                tensor: p.name.clone(),
                cols,
                m: config.pattern.m,
            }
            .into());
        }
        out.push(Target { param: i, rows, cols });
    }
    for s in &config.layers_to_skip {
        let known = model.prunable().iter().any(|(_, p)| &p.name == s || layer_of(&p.name) == s);
        if !known {
            return Err(TrainError::UnknownLayer(s.clone()));
        }
    }
    Ok(out)
}

/// Stateful training loop over a frozen model.
pub struct MaskTrainer<'m, S: Scalar, M: Model<S>> {
    model: &'m M,
    config: TrainConfig,
    targets: Vec<Target>,
    dists: Vec<MaskDistribution<S>>,
    candidates: Tensor<S>,
    hamming: Vec<u32>,
    opt: AdamW<S>,
    noise: NoiseSource,
    step: usize,
    data_position: u64,
    initial_loss: Option<f64>,
    prev_sample: Option<Vec<Vec<u16>>>,
    metrics: Vec<StepMetrics>,
}

impl<'m, S: Scalar, M: Model<S>> MaskTrainer<'m, S, M> {
    pub fn new(model: &'m M, config: TrainConfig, prior: Option<&[LayerMask]>) -> Result<Self, TrainError> {
        config.validate()?;
        let dists = init_logits(model, &config, prior)?;
        Self::with_distributions(model, config, dists)
    }

    /// Starts from given logits with fresh optimizer and noise state.
    pub fn with_distributions(
        model: &'m M,
        config: TrainConfig,
        dists: Vec<MaskDistribution<S>>,
    ) -> Result<Self, TrainError> {
        config.validate()?;
        let targets = targets(model, &config)?;
        if targets.len() != dists.len() {
            return Err(TrainError::CheckpointMismatch(format!(
                "{} distributions for {} target tensors",
                dists.len(),
                targets.len()
            )));
        }
        for (t, d) in targets.iter().zip(&dists) {
            let name = &model.params()[t.param].name;
            if &d.tensor_name != name || (d.rows, d.cols) != (t.rows, t.cols) || d.pattern() != config.pattern {
                return Err(TrainError::CheckpointMismatch(format!(
                    "distribution '{}' does not fit tensor '{name}'",
                    d.tensor_name
                )));
            }
        }
        let set = MaskCandidateSet::for_pattern(config.pattern);
        let k = set.len();
        let mut hamming = vec![0u32; k * k];
        for i in 0..k {
            for j in 0..k {
                hamming[i * k + j] = set.row(i).iter().zip(set.row(j)).filter(|(a, b)| a != b).count() as u32;
            }
        }
        let sizes: Vec<usize> = dists.iter().map(|d| d.logits.len()).collect();
        Ok(Self {
            model,
            opt: AdamW::new(config.optimizer(), &sizes),
            noise: NoiseSource::new(split_seed(config.seed, stream::NOISE)),
            config,
            targets,
            dists,
            candidates: set.to_tensor(),
            hamming,
            step: 0,
            data_position: 0,
            initial_loss: None,
            prev_sample: None,
            metrics: Vec::new(),
        })
    }

    /// Restores an interrupted run and moves `data` to where it stopped.
    pub fn resume<D: BatchSource<Batch = M::Batch>>(
        model: &'m M,
        config: TrainConfig,
        checkpoint: &Checkpoint<S>,
        data: &mut D,
    ) -> Result<Self, TrainError> {
        if checkpoint.config_hash != config.hash() {
            return Err(TrainError::ConfigMismatch);
        }
        let mut t = Self::from_checkpoint_logits(model, config, checkpoint)?;
        for (slot, ct) in checkpoint.tensors.iter().enumerate() {
            t.opt.m[slot].clone_from(&ct.adam_m);
            t.opt.v[slot].clone_from(&ct.adam_v);
        }
        t.opt.step = checkpoint.optimizer_step;
        t.noise = NoiseSource::from_state(checkpoint.noise);
        t.step = checkpoint.step as usize;
        t.data_position = checkpoint.data_position;
        t.initial_loss = checkpoint.initial_loss;
        t.prev_sample = checkpoint
            .tensors
            .iter()
            .map(|ct| ct.prev_sample.clone())
            .collect::<Option<Vec<_>>>();
        data.seek(checkpoint.data_position);
        Ok(t)
    }

    /// Uses only the logits of `checkpoint`; everything else starts fresh.
    pub fn from_checkpoint_logits(
        model: &'m M,
        config: TrainConfig,
        checkpoint: &Checkpoint<S>,
    ) -> Result<Self, TrainError> {
        if checkpoint.pattern != config.pattern {
            return Err(MaskError::PatternMismatch {
                expected: config.pattern,
                got: checkpoint.pattern,
            }
            .into());
        }
        let set = Arc::new(MaskCandidateSet::for_pattern(config.pattern));
        let k = set.len();
        let mut dists = Vec::with_capacity(checkpoint.tensors.len());
        for ct in &checkpoint.tensors {
            for (what, len) in [("moment", ct.adam_m.len()), ("moment", ct.adam_v.len())] {
                if len != ct.logits.len() {
                    return Err(TrainError::CheckpointMismatch(format!("tensor '{}': {what} length", ct.name)));
                }
            }
            let blocks = ct.logits.len() / k;
            let logits = Tensor::new(vec![blocks, k], ct.logits.clone())?;
            dists.push(MaskDistribution::new(ct.name.clone(), ct.rows, ct.cols, logits, set.clone())?);
        }
        Self::with_distributions(model, config, dists)
    }

    pub fn config(&self) -> &TrainConfig {
        &self.config
    }

    pub fn step(&self) -> usize {
        self.step
    }

    pub fn distributions(&self) -> &[MaskDistribution<S>] {
        &self.dists
    }

    pub fn distributions_mut(&mut self) -> &mut [MaskDistribution<S>] {
        &mut self.dists
    }

    pub fn metrics(&self) -> &[StepMetrics] {
        &self.metrics
    }

    /// Draws the Gumbel noise of one step, one `[blocks, |S|]` tensor per
    /// distribution.
    pub fn sample_noise(&mut self) -> Vec<Tensor<S>> {
        let noise = &mut self.noise;
        self.dists
            .iter()
            .map(|d| {
                let g = noise.sample_gumbel(d.logits.len());
                Tensor::new(d.logits.shape().to_vec(), g.into_iter().map(S::of).collect()).expect("noise shape")
            })
            .collect()
    }

    /// Records `L(W ⊙ M̃) − λ Σ ‖W ⊙ M̃‖²` with the logits as gradient leaves
    /// and every weight as a constant.
    pub fn build_objective(
        &self,
        tape: &mut Tape<S>,
        batch: &M::Batch,
        tau: f64,
        kappa: f64,
        noise: &[Tensor<S>],
    ) -> Result<Objective, TrainError> {
        let params = self.model.params();
        let mut weights: Vec<Option<Var>> = vec![None; params.len()];
        let cand = tape.constant(self.candidates.clone());
        let mut logits = Vec::with_capacity(self.dists.len());
        let mut reg: Option<Var> = None;
        for ((t, d), g) in self.targets.iter().zip(&self.dists).zip(noise) {
            let lv = tape.leaf(d.logits.clone().with_grad(true));
            let soft = soft_index_on_tape(tape, lv, g.clone(), S::of(tau), S::of(kappa))?;
            let mask = differentiable_mask_on_tape(tape, soft, cand, t.rows, t.cols)?;
            let w = tape.constant(params[t.param].value.clone());
            let wm = tape.mul(w, mask)?;
            let sq = tape.sum_of_squares(wm)?;
            reg = Some(match reg {
                Some(r) => tape.add(r, sq)?,
                None => sq,
            });
            weights[t.param] = Some(wm);
            logits.push(lv);
        }
        let weights: Vec<Var> = weights
            .into_iter()
            .zip(params)
            .map(|(w, p)| w.unwrap_or_else(|| tape.constant(p.value.clone())))
            .collect();
        let loss = self.model.forward_loss(tape, &weights, batch, None)?;
        let reg = match reg {
            Some(r) => r,
            None => tape.constant(Tensor::scalar(S::zero())),
        };
        let total = if self.config.lambda_reg > 0.0 {
            let scaled = tape.scale(reg, S::of(self.config.lambda_reg))?;
            tape.sub(loss, scaled)?
        } else {
            loss
        };
        Ok(Objective {
            total,
            loss,
            reg,
            logits,
        })
    }

    pub fn checkpoint(&self) -> Checkpoint<S> {
        Checkpoint {
            config_hash: self.config.hash(),
            pattern: self.config.pattern,
            step: self.step as u64,
            data_position: self.data_position,
            optimizer_step: self.opt.step,
            noise: self.noise.state(),
            initial_loss: self.initial_loss,
            tensors: self
                .dists
                .iter()
                .enumerate()
                .map(|(i, d)| CheckpointTensor {
                    name: d.tensor_name.clone(),
                    rows: d.rows,
                    cols: d.cols,
                    logits: d.logits.data().to_vec(),
                    adam_m: self.opt.m[i].clone(),
                    adam_v: self.opt.v[i].clone(),
                    prev_sample: self.prev_sample.as_ref().map(|p| p[i].clone()),
                })
                .collect(),
        }
    }

    /// Runs one optimization step.
    pub fn train_step<D: BatchSource<Batch = M::Batch>>(&mut self, data: &mut D) -> Result<StepMetrics, TrainError> {
        let step = self.step;
        let (tau, kappa) = self.config.schedule().at(step.min(self.config.schedule().total_steps))?;
        let before = self.checkpoint();
        let batch = data.next_batch();
        let noise = self.sample_noise();

        // Statistics of the distribution this step samples from.
        let kappa_s = S::of(kappa);
        let mut max_probs: Vec<f64> = Vec::new();
        let mut sample: Vec<Vec<u16>> = Vec::with_capacity(self.dists.len());
        for (d, g) in self.dists.iter().zip(&noise) {
            max_probs.extend(d.max_probabilities(kappa_s).into_iter().map(|p| p.as_f64()));
            sample.push(d.hard_sample(g.data(), kappa_s));
        }
        let mask_diff = match &self.prev_sample {
            Some(prev) => {
                let k = self.candidates.shape()[0];
                let mut diff = 0u64;
                let mut total = 0u64;
                for (a, b) in prev.iter().zip(&sample) {
                    total += (a.len() * self.config.pattern.m) as u64;
                    diff += a.iter().zip(b).map(|(&x, &y)| self.hamming[x as usize * k + y as usize] as u64).sum::<u64>();
                }
                diff as f64 / total.max(1) as f64
            }
            None => 0.0,
        };

        let mut tape = Tape::new();
        let obj = self.build_objective(&mut tape, &batch, tau, kappa, &noise)?;
        let loss = tape.scalar(obj.loss)?.as_f64();
        let reg = tape.scalar(obj.reg)?.as_f64();
        let objective = tape.scalar(obj.total)?.as_f64();
        if !loss.is_finite() || !objective.is_finite() {
            return Err(TrainError::NonFinite {
                step,
                tau,
                kappa,
                loss,
                reg,
                checkpoint: before.to_bytes(),
            });
        }
        let initial = *self.initial_loss.get_or_insert(loss);
        if loss > self.config.divergence_factor * initial.abs().max(f64::MIN_POSITIVE) {
            return Err(TrainError::Diverged {
                step,
                loss,
                initial,
                factor: self.config.divergence_factor,
                checkpoint: before.to_bytes(),
            });
        }
        let grads = tape.backward(obj.total)?;
        let mut norm_sum = 0.0;
        self.opt.begin_step();
        for (i, (d, lv)) in self.dists.iter_mut().zip(&obj.logits).enumerate() {
            let g = grads.get(*lv).map(|t| t.data());
            norm_sum += g.map_or(0.0, |g| g.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt());
            self.opt.update(i, d.logits.data_mut(), g);
        }
        let grad_norm = norm_sum / self.dists.len().max(1) as f64;

        max_probs.sort_by(f64::total_cmp);
        let (max_prob_mean, max_prob_p10) = if max_probs.is_empty() {
            (1.0, 1.0)
        } else {
            (
                max_probs.iter().sum::<f64>() / max_probs.len() as f64,
                max_probs[(max_probs.len() - 1) / 10],
            )
        };
        let m = StepMetrics {
            step,
            tau,
            kappa,
            loss,
            reg,
            objective,
            grad_norm,
            mask_diff,
            max_prob_mean,
            max_prob_p10,
            remaining_l2: reg.sqrt(),
        };
        self.prev_sample = Some(sample);
        self.step += 1;
        self.data_position = data.position();
        self.metrics.push(m);
        Ok(m)
    }

    /// Trains until `config.steps` steps have run.
    pub fn run<D: BatchSource<Batch = M::Batch>>(&mut self, data: &mut D) -> Result<(), TrainError> {
        while self.step < self.config.steps {
            self.train_step(data)?;
        }
        Ok(())
    }

    /// Most likely candidate of every block.
    pub fn final_masks(&self) -> Vec<LayerMask> {
        self.dists.iter().map(MaskDistribution::final_mask).collect()
    }

    /// Mean per-block max probability under the current logits.
    pub fn mean_max_probability(&self, kappa: f64) -> f64 {
        let all: Vec<f64> = self
            .dists
            .iter()
            .flat_map(|d| d.max_probabilities(S::of(kappa)))
            .map(|p| p.as_f64())
            .collect();
        all.iter().sum::<f64>() / all.len().max(1) as f64
    }

    pub fn into_report(self) -> TrainReport<S> {
        TrainReport {
            masks: self.final_masks(),
            checkpoint: self.checkpoint(),
            metrics: self.metrics,
        }
    }
}

/// Full run from fresh logits (optionally prior-initialized).
pub fn train_masks<S, M, D>(
    model: &M,
    data: &mut D,
    config: &TrainConfig,
    prior: Option<&[LayerMask]>,
) -> Result<TrainReport<S>, TrainError>
where
    S: Scalar,
    M: Model<S>,
    D: BatchSource<Batch = M::Batch>,
{
    let mut t = MaskTrainer::new(model, config.clone(), prior)?;
    t.run(data)?;
    Ok(t.into_report())
}

/// Where transfer learning starts from.
#[derive(Debug, Clone, Copy)]
pub enum TransferBase<'a, S> {
    /// Hard masks, converted to logits through the prior with strength α.
    Masks(&'a [LayerMask]),
    /// Logits of an earlier run.
    Checkpoint(&'a Checkpoint<S>),
}

/// Continues mask learning on new data from a base. With zero steps the
/// base masks are returned unchanged.
pub fn transfer_masks<S, M, D>(
    model: &M,
    base: TransferBase<'_, S>,
    data: &mut D,
    config: &TrainConfig,
) -> Result<TrainReport<S>, TrainError>
where
    S: Scalar,
    M: Model<S>,
    D: BatchSource<Batch = M::Batch>,
{
    let mut t = match base {
        TransferBase::Masks(masks) => MaskTrainer::new(model, config.clone(), Some(masks))?,
        TransferBase::Checkpoint(c) => MaskTrainer::from_checkpoint_logits(model, config.clone(), c)?,
    };
    t.run(data)?;
    let mut report = t.into_report();
    if config.steps == 0 {
        if let TransferBase::Masks(masks) = base {
            report.masks = report
                .masks
                .iter()
                .map(|m| masks.iter().find(|b| b.tensor_name == m.tensor_name).cloned().expect("checked by init"))
                .collect();
        }
    }
    Ok(report)
}
