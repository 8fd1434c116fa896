//! Reverse-mode differentiation over a linear tape.
//!
//! Forward ops push nodes holding their `f32` value; `backward` walks the tape
//! in reverse and accumulates adjoints in `f64`.

use super::tensor::Tensor;
use super::{DiffError, Result};

/// Floor applied inside [`Tape::ln_clamped`].
pub const LOG_CLAMP: f32 = 1e-7;

/// Slope of the negative half of `leaky_relu`.
pub const LEAKY_SLOPE: f32 = 0.2;

/// Element-wise activation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Activation {
    Linear,
    Relu,
    LeakyRelu,
    Tanh,
    Sigmoid,
}

impl Activation {
    pub const ALL: [Activation; 5] = [
        Activation::Linear,
        Activation::Relu,
        Activation::LeakyRelu,
        Activation::Tanh,
        Activation::Sigmoid,
    ];

    /// Stable one-byte code used by the model file format.
    pub fn code(self) -> u8 {
        match self {
            Activation::Linear => 0,
            Activation::Relu => 1,
            Activation::LeakyRelu => 2,
            Activation::Tanh => 3,
            Activation::Sigmoid => 4,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.code() == code)
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Linear => "linear",
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Tanh => "tanh",
            Activation::Sigmoid => "sigmoid",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|a| a.name() == name)
    }

    pub fn apply(self, x: f32) -> f32 {
        match self {
            Activation::Linear => x,
            Activation::Relu => x.max(0.0),
            Activation::LeakyRelu => {
                if x > 0.0 {
                    x
                } else {
                    LEAKY_SLOPE * x
                }
            }
            Activation::Tanh => (x as f64).tanh() as f32,
            Activation::Sigmoid => (1.0 / (1.0 + (-(x as f64)).exp())) as f32,
        }
    }

    /// Derivative at the pre-activation `x`, evaluated in `f64`. Going
    /// through the rounded output would lose `1 - y` near saturation.
    fn derivative(self, x: f32) -> f64 {
        match self {
            Activation::Linear => 1.0,
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::LeakyRelu => {
                if x > 0.0 {
                    1.0
                } else {
                    LEAKY_SLOPE as f64
                }
            }
            Activation::Tanh => {
                let c = (x as f64).cosh();
                1.0 / (c * c)
            }
            Activation::Sigmoid => {
                let e = (-(x as f64).abs()).exp();
                e / ((1.0 + e) * (1.0 + e))
            }
        }
    }
}

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f32),
    AddScalar(Var),
    Act(Var, Activation),
    Concat(Vec<Var>),
    LnClamped(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
}

#[derive(Clone, Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Recording context for one forward/backward pass.
#[derive(Default, Debug)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node, widened to `f64`.
    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0] as f64
    }

    fn push(&mut self, value: Tensor, op: Op) -> Result<Var> {
        if cfg!(debug_assertions) && !value.all_finite() {
            return Err(DiffError::NonFinite(self.nodes.len()));
        }
        self.nodes.push(Node { value, op });
        Ok(Var(self.nodes.len() - 1))
    }

    fn check(&self, v: Var) -> Result<()> {
        if v.0 < self.nodes.len() {
            Ok(())
        } else {
            Err(DiffError::ForeignVar(v.0))
        }
    }

    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        self.check(a)?;
        self.check(b)?;
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(DiffError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            });
        }
        Ok(())
    }

    /// `a (n×k) · b (k×m)`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check(a)?;
        self.check(b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let ((n, k), (k2, m)) = (av.ensure_matrix()?, bv.ensure_matrix()?);
        if k != k2 {
            return Err(DiffError::ShapeMismatch {
                op: "matmul",
                left: av.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let (ad, bd) = (av.data(), bv.data());
        let mut out = vec![0.0f32; n * m];
        let mut acc = vec![0.0f64; m];
        for i in 0..n {
            acc.iter_mut().for_each(|x| *x = 0.0);
            for p in 0..k {
                let a_ip = ad[i * k + p] as f64;
                let brow = &bd[p * m..(p + 1) * m];
                for (x, &b) in acc.iter_mut().zip(brow) {
                    *x += a_ip * b as f64;
                }
            }
            for (o, x) in out[i * m..(i + 1) * m].iter_mut().zip(&acc) {
                *o = *x as f32;
            }
        }
        let value = Tensor::matrix(n, m, out)?;
        self.push(value, Op::MatMul(a, b))
    }

    /// Adds a length-`m` bias vector to every row of an `n×m` matrix.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        self.check(x)?;
        self.check(bias)?;
        let (xv, bv) = (self.value(x), self.value(bias));
        let (_, m) = xv.ensure_matrix()?;
        if bv.shape() != [m] {
            return Err(DiffError::ShapeMismatch {
                op: "add_row",
                left: xv.shape().to_vec(),
                right: bv.shape().to_vec(),
            });
        }
        let mut out = xv.data().to_vec();
        for row in out.chunks_mut(m) {
            for (o, &b) in row.iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out)?;
        self.push(value, Op::AddRow(x, bias))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f32, f32) -> f32) -> Result<Var> {
        let name = match op {
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            _ => "mul",
        };
        self.same_shape(name, a, b)?;
        let (av, bv) = (self.value(a), self.value(b));
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data)?;
        self.push(value, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    fn map(&mut self, x: Var, op: Op, f: impl Fn(f32) -> f32) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(xv.shape().to_vec(), data)?;
        self.push(value, op)
    }

    pub fn scale(&mut self, x: Var, c: f32) -> Result<Var> {
        self.map(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f32) -> Result<Var> {
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    /// `1 - x`, element-wise.
    pub fn one_minus(&mut self, x: Var) -> Result<Var> {
        let neg = self.scale(x, -1.0)?;
        self.add_scalar(neg, 1.0)
    }

    pub fn activate(&mut self, x: Var, act: Activation) -> Result<Var> {
        self.map(x, Op::Act(x, act), |v| act.apply(v))
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Square(x), |v| v * v)
    }

    /// `ln(max(x, LOG_CLAMP))`; the gradient is zero where the clamp is active.
    pub fn ln_clamped(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::LnClamped(x), |v| (v.max(LOG_CLAMP) as f64).ln() as f32)
    }

    /// Concatenates matrices along the feature axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        for &p in parts {
            self.check(p)?;
        }
        let tensors: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
        let value = Tensor::concat_cols(&tensors)?;
        self.push(value, Op::Concat(parts.to_vec()))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let s: f64 = self.value(x).data().iter().map(|&v| v as f64).sum();
        self.push(Tensor::scalar(s as f32), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.check(x)?;
        let xv = self.value(x);
        let s: f64 = xv.data().iter().map(|&v| v as f64).sum();
        let value = Tensor::scalar((s / xv.len() as f64) as f32);
        self.push(value, Op::Mean(x))
    }

    /// Reverse pass from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if loss.0 >= self.nodes.len() {
            return Err(DiffError::BackwardWithoutForward);
        }
        if !self.value(loss).is_scalar() {
            return Err(DiffError::NonScalarLoss(self.value(loss).shape().to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (n, k) = (av.rows(), av.cols());
                    let m = bv.cols();
                    let (ad, bd) = (av.data(), bv.data());
                    let mut ga = vec![0.0f64; n * k];
                    let mut gb = vec![0.0f64; k * m];
                    for r in 0..n {
                        let grow = &g[r * m..(r + 1) * m];
                        for p in 0..k {
                            let brow = &bd[p * m..(p + 1) * m];
                            let mut s = 0.0;
                            for (&gv, &bvv) in grow.iter().zip(brow) {
                                s += gv * bvv as f64;
                            }
                            ga[r * k + p] += s;
                            let a_rp = ad[r * k + p] as f64;
                            for (x, &gv) in gb[p * m..(p + 1) * m].iter_mut().zip(grow) {
                                *x += a_rp * gv;
                            }
                        }
                    }
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::AddRow(x, bias) => {
                    let m = self.value(*bias).len();
                    let mut gb = vec![0.0f64; m];
                    for row in g.chunks(m) {
                        for (s, &v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                    accumulate(&mut adj, *x, g);
                    accumulate(&mut adj, *bias, gb);
                }
                Op::Add(a, b) => {
                    accumulate(&mut adj, *b, g.clone());
                    accumulate(&mut adj, *a, g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut adj, *b, g.iter().map(|v| -v).collect());
                    accumulate(&mut adj, *a, g);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let ga = g.iter().zip(bv).map(|(gv, &y)| gv * y as f64).collect();
                    let gb = g.iter().zip(av).map(|(gv, &x)| gv * x as f64).collect();
                    accumulate(&mut adj, *a, ga);
                    accumulate(&mut adj, *b, gb);
                }
                Op::Scale(x, c) => {
                    let c = *c as f64;
                    accumulate(&mut adj, *x, g.iter().map(|v| v * c).collect());
                }
                Op::AddScalar(x) => accumulate(&mut adj, *x, g),
                Op::Act(x, act) => {
                    let xv = self.value(*x).data();
                    let gx = g.iter().zip(xv).map(|(gv, &xi)| gv * act.derivative(xi)).collect();
                    accumulate(&mut adj, *x, gx);
                }
                Op::Concat(parts) => {
                    let width = node.value.cols();
                    let mut offset = 0;
                    for &p in parts {
                        let c = self.value(p).cols();
                        let mut gp = Vec::with_capacity(self.value(p).len());
                        for row in g.chunks(width) {
                            gp.extend_from_slice(&row[offset..offset + c]);
                        }
                        offset += c;
                        accumulate(&mut adj, p, gp);
                    }
                }
                Op::LnClamped(x) => {
                    let xv = self.value(*x).data();
                    let gx = g
                        .iter()
                        .zip(xv)
                        .map(|(gv, &xi)| if xi > LOG_CLAMP { gv / xi as f64 } else { 0.0 })
                        .collect();
                    accumulate(&mut adj, *x, gx);
                }
                Op::Square(x) => {
                    let xv = self.value(*x).data();
                    let gx = g.iter().zip(xv).map(|(gv, &xi)| 2.0 * gv * xi as f64).collect();
                    accumulate(&mut adj, *x, gx);
                }
                Op::Sum(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut adj, *x, vec![g[0]; n]);
                }
                Op::Mean(x) => {
                    let n = self.value(*x).len();
                    accumulate(&mut adj, *x, vec![g[0] / n as f64; n]);
                }
            }
        }
        Ok(Gradients { grads: adj })
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], v: Var, g: Vec<f64>) {
    match &mut adj[v.0] {
        Some(existing) => existing.iter_mut().zip(g).for_each(|(e, x)| *e += x),
        slot @ None => *slot = Some(g),
    }
}

/// Leaf adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a leaf, in `f64`.
    ///
    /// Leaves the loss does not depend on report zeros.
    pub fn wrt_f64(&self, tape: &Tape, v: Var) -> Vec<f64> {
        match self.grads.get(v.0) {
            Some(Some(g)) => g.clone(),
            _ => vec![0.0; tape.value(v).len()],
        }
    }

    pub fn wrt(&self, tape: &Tape, v: Var) -> Tensor {
        let shape = tape.value(v).shape().to_vec();
        let data = self.wrt_f64(tape, v).into_iter().map(|x| x as f32).collect();
        Tensor::new(shape, data).expect("finite gradient")
    }
}
