//! Fully connected networks built from tape ops.

use super::rng::Rng;
use super::tape::{Activation, Gradients, Tape, Var};
use super::tensor::Tensor;
use super::{DiffError, Result};

/// A tensor plus its gradient buffer and freeze flag.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamTensor {
    pub value: Tensor,
    pub grad: Tensor,
    pub trainable: bool,
}

impl ParamTensor {
    pub fn new(value: Tensor, trainable: bool) -> Self {
        let grad = Tensor::zeros(value.shape());
        Self {
            value,
            grad,
            trainable,
        }
    }

    pub fn zero_grad(&mut self) {
        self.grad.fill(0.0);
    }
}

/// Layer sizes `[d0, d1, …, dL]` and one activation per layer.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MlpSpec {
    layer_dims: Vec<usize>,
    activations: Vec<Activation>,
}

impl MlpSpec {
    pub fn new(layer_dims: Vec<usize>, activations: Vec<Activation>) -> Result<Self> {
        if activations.is_empty()
            || layer_dims.len() != activations.len() + 1
            || layer_dims.iter().any(|&d| d == 0)
        {
            return Err(DiffError::InvalidSpec(format!(
                "dims {layer_dims:?} with {} activations",
                activations.len()
            )));
        }
        Ok(Self {
            layer_dims,
            activations,
        })
    }

    /// Hidden layers share `hidden`; the last layer uses `last`.
    pub fn uniform(dims: &[usize], hidden: Activation, last: Activation) -> Result<Self> {
        let l = dims.len().saturating_sub(1);
        let mut acts = vec![hidden; l.saturating_sub(1)];
        acts.push(last);
        Self::new(dims.to_vec(), acts)
    }

    pub fn layer_dims(&self) -> &[usize] {
        &self.layer_dims
    }

    pub fn activations(&self) -> &[Activation] {
        &self.activations
    }

    pub fn layer_count(&self) -> usize {
        self.activations.len()
    }

    pub fn input_dim(&self) -> usize {
        self.layer_dims[0]
    }

    pub fn output_dim(&self) -> usize {
        *self.layer_dims.last().unwrap()
    }

    /// `(d_{l-1}, d_l)` weight then `(d_l,)` bias, per layer.
    pub fn param_shapes(&self) -> Vec<Vec<usize>> {
        self.layer_dims
            .windows(2)
            .flat_map(|w| [vec![w[0], w[1]], vec![w[1]]])
            .collect()
    }
}

/// Glorot-uniform weights, zero biases, all trainable.
pub fn mlp_init(spec: &MlpSpec, rng: &mut Rng) -> Vec<ParamTensor> {
    let mut params = Vec::with_capacity(2 * spec.layer_count());
    for w in spec.layer_dims.windows(2) {
        let (fan_in, fan_out) = (w[0], w[1]);
        let a = (6.0 / (fan_in + fan_out) as f64).sqrt() as f32;
        let data = (0..fan_in * fan_out).map(|_| rng.uniform(-a, a)).collect();
        let weight = Tensor::matrix(fan_in, fan_out, data).expect("finite init");
        params.push(ParamTensor::new(weight, true));
        params.push(ParamTensor::new(Tensor::zeros(&[fan_out]), true));
    }
    params
}

/// Records a forward pass; returns the output and the leaf handles bound to `params`.
pub fn mlp_forward(
    params: &[ParamTensor],
    spec: &MlpSpec,
    input: Var,
    tape: &mut Tape,
) -> Result<(Var, Vec<Var>)> {
    let bound: Vec<Var> = params.iter().map(|p| tape.leaf(p.value.clone())).collect();
    let out = forward_bound(spec, &bound, input, tape)?;
    Ok((out, bound))
}

fn forward_bound(spec: &MlpSpec, bound: &[Var], input: Var, tape: &mut Tape) -> Result<Var> {
    let shapes = spec.param_shapes();
    if bound.len() != shapes.len()
        || bound
            .iter()
            .zip(&shapes)
            .any(|(&v, s)| tape.value(v).shape() != s.as_slice())
    {
        return Err(DiffError::InvalidSpec("parameters do not match spec".into()));
    }
    let (_, d0) = tape.value(input).ensure_matrix()?;
    if d0 != spec.input_dim() {
        return Err(DiffError::ShapeMismatch {
            op: "mlp_forward",
            left: tape.value(input).shape().to_vec(),
            right: vec![spec.input_dim()],
        });
    }
    let mut h = input;
    for (l, &act) in spec.activations.iter().enumerate() {
        let z = tape.matmul(h, bound[2 * l])?;
        let z = tape.add_row(z, bound[2 * l + 1])?;
        h = tape.activate(z, act)?;
    }
    Ok(h)
}

/// Spec plus parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    spec: MlpSpec,
    params: Vec<ParamTensor>,
}

impl Mlp {
    pub fn init(spec: MlpSpec, rng: &mut Rng) -> Self {
        let params = mlp_init(&spec, rng);
        Self { spec, params }
    }

    pub fn from_parts(spec: MlpSpec, params: Vec<ParamTensor>) -> Result<Self> {
        let shapes = spec.param_shapes();
        if params.len() != shapes.len()
            || params
                .iter()
                .zip(&shapes)
                .any(|(p, s)| p.value.shape() != s.as_slice())
        {
            return Err(DiffError::InvalidSpec("parameters do not match spec".into()));
        }
        Ok(Self { spec, params })
    }

    pub fn spec(&self) -> &MlpSpec {
        &self.spec
    }

    pub fn params(&self) -> &[ParamTensor] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [ParamTensor] {
        &mut self.params
    }

    pub fn set_trainable(&mut self, trainable: bool) {
        self.params.iter_mut().for_each(|p| p.trainable = trainable);
    }

    pub fn is_frozen(&self) -> bool {
        self.params.iter().all(|p| !p.trainable)
    }

    /// Pushes the parameters onto `tape` as leaves.
    pub fn bind(&self, tape: &mut Tape) -> Vec<Var> {
        self.params.iter().map(|p| tape.leaf(p.value.clone())).collect()
    }

    pub fn forward(&self, tape: &mut Tape, bound: &[Var], input: Var) -> Result<Var> {
        forward_bound(&self.spec, bound, input, tape)
    }

    /// Untaped convenience forward.
    pub fn apply(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let x = tape.leaf(input.clone());
        let bound = self.bind(&mut tape);
        let y = self.forward(&mut tape, &bound, x)?;
        Ok(tape.value(y).clone())
    }

    /// Adds the gradients of the bound leaves into each `ParamTensor::grad`.
    pub fn accumulate_grads(&mut self, tape: &Tape, grads: &Gradients, bound: &[Var]) {
        for (p, &v) in self.params.iter_mut().zip(bound) {
            for (g, d) in p.grad.data_mut().iter_mut().zip(grads.wrt_f64(tape, v)) {
                *g = (*g as f64 + d) as f32;
            }
        }
    }

    pub fn zero_grad(&mut self) {
        self.params.iter_mut().for_each(ParamTensor::zero_grad);
    }

    /// Bitwise parameter equality.
    pub fn bit_eq(&self, other: &Mlp) -> bool {
        self.spec == other.spec
            && self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .all(|(a, b)| a.trainable == b.trainable && a.value.bit_eq(&b.value))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn linear_identity(d: usize, act: Activation) -> Mlp {
        let spec = MlpSpec::new(vec![d, d], vec![act]).unwrap();
        let mut w = vec![0.0; d * d];
        (0..d).for_each(|i| w[i * d + i] = 1.0);
        let params = vec![
            ParamTensor::new(Tensor::matrix(d, d, w).unwrap(), true),
            ParamTensor::new(Tensor::zeros(&[d]), true),
        ];
        Mlp::from_parts(spec, params).unwrap()
    }

    #[test]
    fn init_bounds_and_zero_bias() {
        let spec = MlpSpec::new(vec![2, 3], vec![Activation::Linear]).unwrap();
        let p = mlp_init(&spec, &mut Rng::new(11, 0));
        let a = (6.0f32 / 5.0).sqrt();
        assert!(p[0].value.data().iter().all(|w| w.abs() < a));
        assert_eq!(p[1].value.data(), &[0.0, 0.0, 0.0]);
        assert!(p.iter().all(|t| t.trainable));
    }

    #[test]
    fn init_is_deterministic() {
        let spec = MlpSpec::uniform(&[4, 8, 2], Activation::Relu, Activation::Linear).unwrap();
        let a = Mlp::init(spec.clone(), &mut Rng::new(5, 2));
        let b = Mlp::init(spec, &mut Rng::new(5, 2));
        assert!(a.bit_eq(&b));
    }

    #[test]
    fn init_shapes() {
        let spec = MlpSpec::uniform(&[4, 8, 2], Activation::Relu, Activation::Linear).unwrap();
        let shapes: Vec<Vec<usize>> = mlp_init(&spec, &mut Rng::new(0, 0))
            .iter()
            .map(|p| p.value.shape().to_vec())
            .collect();
        assert_eq!(shapes, vec![vec![4, 8], vec![8], vec![8, 2], vec![2]]);
    }

    #[test]
    fn invalid_specs() {
        assert!(MlpSpec::new(vec![2], vec![]).is_err());
        assert!(MlpSpec::new(vec![2, 0], vec![Activation::Relu]).is_err());
        assert!(MlpSpec::new(vec![2, 3, 4], vec![Activation::Relu]).is_err());
    }

    #[test]
    fn identity_forward() {
        let m = linear_identity(2, Activation::Linear);
        let y = m.apply(&Tensor::matrix(1, 2, vec![1.0, -2.0]).unwrap()).unwrap();
        assert_eq!(y.data(), &[1.0, -2.0]);
    }

    #[test]
    fn sigmoid_of_zero_weights() {
        let spec = MlpSpec::new(vec![3, 2], vec![Activation::Sigmoid]).unwrap();
        let params = vec![
            ParamTensor::new(Tensor::zeros(&[3, 2]), true),
            ParamTensor::new(Tensor::zeros(&[2]), true),
        ];
        let m = Mlp::from_parts(spec, params).unwrap();
        let y = m.apply(&Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, -1.0, 0.5, 9.0]).unwrap()).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.5));
    }

    #[test]
    fn leaky_relu_negative() {
        let m = linear_identity(1, Activation::LeakyRelu);
        let y = m.apply(&Tensor::matrix(1, 1, vec![-1.0]).unwrap()).unwrap();
        assert!((y.data()[0] + 0.2).abs() < 1e-7);
    }

    #[test]
    fn input_dim_mismatch() {
        let m = linear_identity(2, Activation::Linear);
        assert!(m.apply(&Tensor::matrix(1, 3, vec![0.0; 3]).unwrap()).is_err());
    }
}
