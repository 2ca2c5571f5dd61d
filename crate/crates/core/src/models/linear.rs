use super::{check_params, param, project, Init, Model, ModelError, ModelKind, ModelSpec, Param, Probe, RegressionBatch};
use crate::scalar::Scalar;
use crate::tensor::{Tape, Tensor, Var};

fn regression_loss<S: Scalar>(tape: &mut Tape<S>, pred: Var, batch: &RegressionBatch<S>) -> Result<Var, ModelError> {
    let y = tape.constant(batch.y.clone());
    let diff = tape.sub(pred, y)?;
    let sq = tape.sum_of_squares(diff)?;
    let n = batch.x.shape()[0].max(1);
    Ok(tape.scale(sq, S::one() / S::of(n as f64))?)
}

fn input<S: Scalar>(tape: &mut Tape<S>, batch: &RegressionBatch<S>, width: usize) -> Result<Var, ModelError> {
    if batch.x.shape().len() != 2 || batch.x.shape()[1] != width {
        return Err(ModelError::Data(format!(
            "regression inputs have shape {:?}, expected [_, {width}]",
            batch.x.shape()
        )));
    }
    Ok(tape.constant(batch.x.clone()))
}

/// `y = x · wᵀ` with a single prunable `[out, in]` weight and squared-error
/// loss summed over outputs and averaged over samples.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel<S> {
    spec: ModelSpec,
    params: Vec<Param<S>>,
}

impl<S: Scalar> LinearModel<S> {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        Self::check_kind(&spec)?;
        let mut init = Init::new(seed);
        let std = 1.0 / (spec.input_dim as f64).sqrt();
        let w = init.normal(&[spec.output_dim, spec.input_dim], std);
        Ok(Self {
            spec,
            params: vec![param("w", w, true)],
        })
    }

    pub fn with_weight(w: Tensor<S>, block: usize) -> Result<Self, ModelError> {
        let (out, inp) = match w.shape() {
            [o, i] => (*o, *i),
            s => return Err(ModelError::Spec(format!("weight must be a matrix, got shape {s:?}"))),
        };
        let spec = ModelSpec {
            block,
            ..ModelSpec::linear(inp, out)
        };
        spec.validate()?;
        Ok(Self {
            spec,
            params: vec![param("w", w, true)],
        })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<Param<S>>) -> Result<Self, ModelError> {
        let reference = Self::new(spec, 0)?;
        check_params(&reference.params, &params)?;
        Ok(Self { spec, params })
    }

    fn check_kind(spec: &ModelSpec) -> Result<(), ModelError> {
        if spec.kind != ModelKind::Linear {
            return Err(ModelError::Spec(format!("expected a linear spec, got {}", spec.kind)));
        }
        spec.validate()
    }

    pub fn weight(&self) -> &Tensor<S> {
        &self.params[0].value
    }
}

impl<S: Scalar> Model<S> for LinearModel<S> {
    type Batch = RegressionBatch<S>;

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
        weights: &[Var],
        batch: &Self::Batch,
        mut probe: Option<Probe<'_, S>>,
    ) -> Result<Var, ModelError> {
        let x = input(tape, batch, self.spec.input_dim)?;
        let pred = project(tape, x, weights[0], "w", &mut probe)?;
        regression_loss(tape, pred, batch)
    }

    fn batch_weight(&self, batch: &Self::Batch) -> usize {
        batch.x.shape()[0]
    }
}

/// Two-layer ReLU network with prunable `w1` and `w2` and dense biases.
#[derive(Debug, Clone, PartialEq)]
pub struct MlpModel<S> {
    spec: ModelSpec,
    params: Vec<Param<S>>,
}

impl<S: Scalar> MlpModel<S> {
    pub fn new(spec: ModelSpec, seed: u64) -> Result<Self, ModelError> {
        if spec.kind != ModelKind::Mlp {
            return Err(ModelError::Spec(format!("expected an mlp spec, got {}", spec.kind)));
        }
        spec.validate()?;
        let mut init = Init::new(seed);
        let (i, h, o) = (spec.input_dim, spec.hidden_dim, spec.output_dim);
        let params = vec![
            param("w1", init.normal(&[h, i], (2.0 / i as f64).sqrt()), true),
            param("b1", Tensor::zeros(vec![h]), false),
            param("w2", init.normal(&[o, h], (1.0 / h as f64).sqrt()), true),
            param("b2", Tensor::zeros(vec![o]), false),
        ];
        Ok(Self { spec, params })
    }

    pub fn from_params(spec: ModelSpec, params: Vec<Param<S>>) -> Result<Self, ModelError> {
        let reference = Self::new(spec, 0)?;
        check_params(&reference.params, &params)?;
        Ok(Self { spec, params })
    }
}

impl<S: Scalar> Model<S> for MlpModel<S> {
    type Batch = RegressionBatch<S>;

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
        weights: &[Var],
        batch: &Self::Batch,
        mut probe: Option<Probe<'_, S>>,
    ) -> Result<Var, ModelError> {
        let x = input(tape, batch, self.spec.input_dim)?;
        let h = project(tape, x, weights[0], "w1", &mut probe)?;
        let h = tape.add_row(h, weights[1])?;
        let h = tape.relu(h)?;
        let y = project(tape, h, weights[2], "w2", &mut probe)?;
        let y = tape.add_row(y, weights[3])?;
        regression_loss(tape, y, batch)
    }

    fn batch_weight(&self, batch: &Self::Batch) -> usize {
        batch.x.shape()[0]
    }
}
