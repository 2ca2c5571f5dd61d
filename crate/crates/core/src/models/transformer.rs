use super::{check_params, param, project, Init, Model, ModelError, ModelKind, ModelSpec, Param, Probe, TokenBatch};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

/// Pre-norm decoder-only transformer over byte tokens.
///
/// Each layer has four bias-free attention projections and a two-matrix GELU
/// MLP of width `4·d`; these six matrices are prunable. Embeddings, norms
/// and the output head stay dense.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLm<S> {
    spec: ModelSpec,
    params: Vec<Param<S>>,
}

const INIT_STD: f64 = 0.02;

impl<S: Scalar> TransformerLm<S> {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        if spec.kind != ModelKind::TransformerLm {
            return Err(ModelError::Spec(format!("expected a transformer_lm spec, got {}", spec.kind)));
        }
        spec.validate()?;
        let mut init = Init::new(seed);
        let d = spec.embed_dim;
        let resid_std = INIT_STD / (2.0 * spec.num_layers as f64).sqrt();
        let mut params = vec![
            param("tok_emb", init.normal(&[spec.vocab_size, d], INIT_STD), false),
            param("pos_emb", init.normal(&[spec.context_length, d], INIT_STD), false),
        ];
        for l in 0..spec.num_layers {
            let p = format!("layer{l}");
            params.push(param(format!("{p}.ln1.gamma"), Tensor::full(vec![d], S::one()), false));
            params.push(param(format!("{p}.ln1.beta"), Tensor::zeros(vec![d]), false));
            for w in ["wq", "wk", "wv"] {
                params.push(param(format!("{p}.attn.{w}"), init.normal(&[d, d], INIT_STD), true));
            }
            params.push(param(format!("{p}.attn.wo"), init.normal(&[d, d], resid_std), true));
            params.push(param(format!("{p}.ln2.gamma"), Tensor::full(vec![d], S::one()), false));
            params.push(param(format!("{p}.ln2.beta"), Tensor::zeros(vec![d]), false));
            params.push(param(format!("{p}.mlp.w1"), init.normal(&[4 * d, d], INIT_STD), true));
            params.push(param(format!("{p}.mlp.w2"), init.normal(&[d, 4 * d], resid_std), true));
        }
        params.push(param("ln_f.gamma", Tensor::full(vec![d], S::one()), false));
        params.push(param("ln_f.beta", Tensor::zeros(vec![d]), false));
        params.push(param("head", init.normal(&[spec.vocab_size, d], INIT_STD), false));
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<Param<S>>) -> Result<Self, ModelError> {
        let reference = Self::new(spec, 0)?;
        check_params(&reference.params, &params)?;
        Ok(Self { spec, params })
    }

    /// Names of the prunable matrices of layer `l`.
    pub fn layer_tensors(l: usize) -> [String; 6] {
        ["attn.wq", "attn.wk", "attn.wv", "attn.wo", "mlp.w1", "mlp.w2"].map(|s| format!("layer{l}.{s}"))
    }
}

const PER_LAYER: usize = 10;

impl<S: Scalar> Model<S> for TransformerLm<S> {
    type Batch = TokenBatch;

    fn spec(&self) -> &ModelSpec {
        &self.spec
    }

    fn params(&self) -> &[Param<S>] {
        &self.params
    }

    fn params_mut(&mut self) -> &mut [Param<S>] {
        &mut self.params
    }

    fn forward_loss(
        &self,
        tape: &mut Tape<S>,
        w: &[Var],
        batch: &TokenBatch,
        mut probe: Option<Probe<'_, S>>,
    ) -> Result<Var, ModelError> {
        let spec = &self.spec;
        let (b, t) = (batch.batch, batch.seq);
        if t == 0 || t > spec.context_length {
            return Err(ModelError::Data(format!(
                "sequence length {t} outside 1..={}",
                spec.context_length
            )));
        }
        if batch.inputs.len() != b * t || batch.targets.len() != b * t {
            return Err(ModelError::Data(format!(
                "batch of {b}×{t} has {} inputs and {} targets",
                batch.inputs.len(),
                batch.targets.len()
            )));
        }
        let positions: Vec<usize> = (0..b).flat_map(|_| 0..t).collect();
        let tok = tape.embedding(w[0], &batch.inputs)?;
        let pos = tape.embedding(w[1], &positions)?;
        let mut x = tape.add(tok, pos)?;
        for l in 0..spec.num_layers {
            let base = 2 + l * PER_LAYER;
            let names = &self.params;
            let h = tape.layer_norm(x, w[base], w[base + 1])?;
            let q = project(tape, h, w[base + 2], &names[base + 2].name, &mut probe)?;
            let k = project(tape, h, w[base + 3], &names[base + 3].name, &mut probe)?;
            let v = project(tape, h, w[base + 4], &names[base + 4].name, &mut probe)?;
            let a = tape.causal_attention(q, k, v, b, t, spec.num_heads)?;
            let o = project(tape, a, w[base + 5], &names[base + 5].name, &mut probe)?;
            x = tape.add(x, o)?;
            let h = tape.layer_norm(x, w[base + 6], w[base + 7])?;
            let u = project(tape, h, w[base + 8], &names[base + 8].name, &mut probe)?;
            let u = tape.gelu(u)?;
            let o = project(tape, u, w[base + 9], &names[base + 9].name, &mut probe)?;
            x = tape.add(x, o)?;
        }
        let f = 2 + spec.num_layers * PER_LAYER;
        let x = tape.layer_norm(x, w[f], w[f + 1])?;
        let logits = tape.linear(x, w[f + 2])?;
        Ok(tape.cross_entropy(logits, &batch.targets)?)
    }

    fn batch_weight(&self, batch: &TokenBatch) -> usize {
        batch.targets.len()
    }
}
