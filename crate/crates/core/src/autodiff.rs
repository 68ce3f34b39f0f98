//! Reverse-mode differentiation tape.
//!
//! Operations append nodes to a [`Tape`] during the forward pass; the tape
//! is then walked once in reverse to accumulate cotangents. The op set is
//! exactly what the unrolled reconstruction network needs; there is no
//! broadcasting and no dynamic graph surgery.
//!
//! Complex values are differentiated by treating real and imaginary parts
//! as independent real variables. Under that convention the cotangent of a
//! complex-linear map propagates through the map's adjoint (conjugate
//! transpose), and the gradient a leaf receives is
//! `d(loss)/d(re) + i * d(loss)/d(im)`.

use crate::conv;
use crate::error::{Error, Result};
use crate::fft::{fft2_centered, ifft2_centered};
use ndarray::{Array2, ArrayD, Axis, Ix1, Ix2, Ix3, Ix4, IxDyn};
use num_complex::Complex64;
use std::sync::Arc;

pub type RealArr = ArrayD<f64>;
pub type ComplexArr = ArrayD<Complex64>;

/// A value flowing through the tape: dense real or complex array of any
/// rank (rank 0 encodes a scalar).
#[derive(Debug, Clone)]
pub enum Value {
    Real(RealArr),
    Complex(ComplexArr),
}

impl Value {
    pub fn shape(&self) -> &[usize] {
        match self {
            Value::Real(a) => a.shape(),
            Value::Complex(a) => a.shape(),
        }
    }

    pub fn is_real(&self) -> bool {
        matches!(self, Value::Real(_))
    }

    fn zeros_like(&self) -> Value {
        match self {
            Value::Real(a) => Value::Real(RealArr::zeros(a.raw_dim())),
            Value::Complex(a) => Value::Complex(ComplexArr::zeros(a.raw_dim())),
        }
    }

    fn add_assign(&mut self, other: &Value) {
        match (self, other) {
            (Value::Real(a), Value::Real(b)) => *a += b,
            (Value::Complex(a), Value::Complex(b)) => *a += b,
            _ => panic!("kind mismatch in gradient accumulation"),
        }
    }
}

impl From<RealArr> for Value {
    fn from(a: RealArr) -> Self {
        Value::Real(a)
    }
}

impl From<ComplexArr> for Value {
    fn from(a: ComplexArr) -> Self {
        Value::Complex(a)
    }
}

/// Rank-0 real array holding one scalar.
pub fn scalar(v: f64) -> RealArr {
    RealArr::from_elem(IxDyn(&[]), v)
}

fn scalar_of(a: &RealArr) -> f64 {
    *a.first().expect("empty scalar array")
}

/// Handle to a node on a tape. Only valid for the tape that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Add,
    Sub,
    ScaleConst(f64),
    MulScalar,
    Relu,
    Conv2d { has_bias: bool },
    Fft2 { inverse: bool },
    ComplexToChannels,
    ChannelsToComplex,
    SpreadCoils,
    SumCoils,
    MulConst(Arc<ComplexArr>),
    Mask(Arc<Array2<bool>>),
    DotReal,
    Norm2,
    Norm1,
    SumAll,
    Exp,
    DivSafe,
}

struct Node {
    op: Op,
    inputs: Vec<Var>,
    value: Value,
    requires_grad: bool,
}

/// Single-writer record of one forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Value>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Value> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a real leaf, or zeros if the loss does not depend on it.
    pub fn real_or_zeros(&self, v: Var, shape: &[usize]) -> RealArr {
        match self.grads[v.0].as_ref() {
            Some(Value::Real(a)) => a.clone(),
            Some(Value::Complex(_)) => panic!("complex gradient for real leaf"),
            None => RealArr::zeros(IxDyn(shape)),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, inputs: Vec<Var>, value: Value) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { op, inputs, value, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Register a leaf that gradients are not tracked for.
    pub fn constant(&mut self, v: impl Into<Value>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value: v.into(),
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Register a trainable leaf.
    pub fn param(&mut self, v: impl Into<Value>) -> Var {
        self.nodes.push(Node {
            op: Op::Leaf,
            inputs: vec![],
            value: v.into(),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Value {
        &self.nodes[v.0].value
    }

    pub fn real(&self, v: Var) -> &RealArr {
        match self.value(v) {
            Value::Real(a) => a,
            Value::Complex(_) => panic!("expected real value"),
        }
    }

    pub fn complex(&self, v: Var) -> &ComplexArr {
        match self.value(v) {
            Value::Complex(a) => a,
            Value::Real(_) => panic!("expected complex value"),
        }
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        scalar_of(self.real(v))
    }

    fn same_kind_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.is_real() != vb.is_real() {
            return Err(Error::Dim(format!("{what}: mixed real/complex operands")));
        }
        if va.shape() != vb.shape() {
            return Err(Error::Dim(format!(
                "{what}: shape {:?} vs {:?}",
                va.shape(),
                vb.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_kind_shape(a, b, "add")?;
        let value = match (self.value(a), self.value(b)) {
            (Value::Real(x), Value::Real(y)) => Value::Real(x + y),
            (Value::Complex(x), Value::Complex(y)) => Value::Complex(x + y),
            _ => unreachable!(),
        };
        Ok(self.push(Op::Add, vec![a, b], value))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_kind_shape(a, b, "sub")?;
        let value = match (self.value(a), self.value(b)) {
            (Value::Real(x), Value::Real(y)) => Value::Real(x - y),
            (Value::Complex(x), Value::Complex(y)) => Value::Complex(x - y),
            _ => unreachable!(),
        };
        Ok(self.push(Op::Sub, vec![a, b], value))
    }

    /// Multiply by a fixed real constant.
    pub fn scale_const(&mut self, x: Var, c: f64) -> Var {
        let value = match self.value(x) {
            Value::Real(a) => Value::Real(a.mapv(|v| v * c)),
            Value::Complex(a) => Value::Complex(a.mapv(|v| v * c)),
        };
        self.push(Op::ScaleConst(c), vec![x], value)
    }

    /// Multiply a tensor by a real scalar node.
    pub fn mul_scalar(&mut self, x: Var, s: Var) -> Result<Var> {
        let sv = match self.value(s) {
            Value::Real(a) if a.ndim() == 0 => scalar_of(a),
            _ => return Err(Error::Usage("mul_scalar: multiplier must be a real scalar".into())),
        };
        let value = match self.value(x) {
            Value::Real(a) => Value::Real(a.mapv(|v| v * sv)),
            Value::Complex(a) => Value::Complex(a.mapv(|v| v * sv)),
        };
        Ok(self.push(Op::MulScalar, vec![x, s], value))
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = match self.value(x) {
            Value::Real(a) => Value::Real(a.mapv(|v| v.max(0.0))),
            Value::Complex(_) => {
                return Err(Error::Usage("relu is defined on real tensors".into()))
            }
        };
        Ok(self.push(Op::Relu, vec![x], value))
    }

    /// Zero-padded "same" cross-correlation; input `[C_in,H,W]`, kernel
    /// `[C_out,C_in,k,k]`, optional bias `[C_out]`.
    pub fn conv2d(&mut self, x: Var, kernel: Var, bias: Option<Var>) -> Result<Var> {
        let xin = match self.value(x) {
            Value::Real(a) if a.ndim() == 3 => a.view().into_dimensionality::<Ix3>().unwrap(),
            _ => return Err(Error::Dim("conv2d: input must be real [C,H,W]".into())),
        };
        let ker = match self.value(kernel) {
            Value::Real(a) if a.ndim() == 4 => a.view().into_dimensionality::<Ix4>().unwrap(),
            _ => return Err(Error::Dim("conv2d: kernel must be real [Co,Ci,k,k]".into())),
        };
        let out = match bias {
            Some(b) => {
                let bv = match self.value(b) {
                    Value::Real(a) if a.ndim() == 1 => {
                        a.view().into_dimensionality::<Ix1>().unwrap()
                    }
                    _ => return Err(Error::Dim("conv2d: bias must be real [Co]".into())),
                };
                conv::forward(&xin, &ker, Some(&bv))?
            }
            None => conv::forward(&xin, &ker, None)?,
        };
        let mut inputs = vec![x, kernel];
        if let Some(b) = bias {
            inputs.push(b);
        }
        Ok(self.push(
            Op::Conv2d { has_bias: bias.is_some() },
            inputs,
            Value::Real(out.into_dyn()),
        ))
    }

    fn fft2_value(a: &ComplexArr, inverse: bool) -> Result<ComplexArr> {
        let transform = |v: &ndarray::ArrayView2<'_, Complex64>| {
            if inverse {
                ifft2_centered(v)
            } else {
                fft2_centered(v)
            }
        };
        match a.ndim() {
            2 => {
                let v = a.view().into_dimensionality::<Ix2>().unwrap();
                Ok(transform(&v).into_dyn())
            }
            3 => {
                let v = a.view().into_dimensionality::<Ix3>().unwrap();
                let (n, h, w) = v.dim();
                let mut out = ndarray::Array3::<Complex64>::zeros((n, h, w));
                for c in 0..n {
                    out.index_axis_mut(Axis(0), c)
                        .assign(&transform(&v.index_axis(Axis(0), c)));
                }
                Ok(out.into_dyn())
            }
            nd => Err(Error::Dim(format!("fft2: rank {nd} unsupported"))),
        }
    }

    /// Orthonormal centered 2-D FFT over the last two axes (rank 2 or 3).
    pub fn fft2c(&mut self, x: Var) -> Result<Var> {
        let a = match self.value(x) {
            Value::Complex(a) => a,
            Value::Real(_) => return Err(Error::Usage("fft2c expects a complex tensor".into())),
        };
        let out = Self::fft2_value(a, false)?;
        Ok(self.push(Op::Fft2 { inverse: false }, vec![x], Value::Complex(out)))
    }

    pub fn ifft2c(&mut self, x: Var) -> Result<Var> {
        let a = match self.value(x) {
            Value::Complex(a) => a,
            Value::Real(_) => return Err(Error::Usage("ifft2c expects a complex tensor".into())),
        };
        let out = Self::fft2_value(a, true)?;
        Ok(self.push(Op::Fft2 { inverse: true }, vec![x], Value::Complex(out)))
    }

    /// `C[H,W] -> R[2,H,W]` with channel 0 = real part, channel 1 = imaginary.
    pub fn complex_to_channels(&mut self, x: Var) -> Result<Var> {
        let a = match self.value(x) {
            Value::Complex(a) if a.ndim() == 2 => a,
            _ => return Err(Error::Dim("complex_to_channels expects complex [H,W]".into())),
        };
        let (h, w) = (a.shape()[0], a.shape()[1]);
        let mut out = ndarray::Array3::<f64>::zeros((2, h, w));
        for i in 0..h {
            for j in 0..w {
                let v = a[[i, j]];
                out[[0, i, j]] = v.re;
                out[[1, i, j]] = v.im;
            }
        }
        Ok(self.push(Op::ComplexToChannels, vec![x], Value::Real(out.into_dyn())))
    }

    /// Inverse of [`Tape::complex_to_channels`].
    pub fn channels_to_complex(&mut self, x: Var) -> Result<Var> {
        let a = match self.value(x) {
            Value::Real(a) if a.ndim() == 3 && a.shape()[0] == 2 => a,
            _ => return Err(Error::Dim("channels_to_complex expects real [2,H,W]".into())),
        };
        let (h, w) = (a.shape()[1], a.shape()[2]);
        let mut out = Array2::<Complex64>::zeros((h, w));
        for i in 0..h {
            for j in 0..w {
                out[[i, j]] = Complex64::new(a[[0, i, j]], a[[1, i, j]]);
            }
        }
        Ok(self.push(Op::ChannelsToComplex, vec![x], Value::Complex(out.into_dyn())))
    }

    /// Replicate a complex image across a leading coil axis.
    pub fn spread_coils(&mut self, x: Var, n: usize) -> Result<Var> {
        let a = match self.value(x) {
            Value::Complex(a) if a.ndim() == 2 => a,
            _ => return Err(Error::Dim("spread_coils expects complex [H,W]".into())),
        };
        let (h, w) = (a.shape()[0], a.shape()[1]);
        let mut out = ndarray::Array3::<Complex64>::zeros((n, h, w));
        for c in 0..n {
            out.index_axis_mut(Axis(0), c)
                .assign(&a.view().into_dimensionality::<Ix2>().unwrap());
        }
        Ok(self.push(Op::SpreadCoils, vec![x], Value::Complex(out.into_dyn())))
    }

    /// Sum over the leading coil axis.
    pub fn sum_coils(&mut self, x: Var) -> Result<Var> {
        let a = match self.value(x) {
            Value::Complex(a) if a.ndim() == 3 => a,
            _ => return Err(Error::Dim("sum_coils expects complex [N,H,W]".into())),
        };
        let out = a.sum_axis(Axis(0));
        Ok(self.push(Op::SumCoils, vec![x], Value::Complex(out)))
    }

    /// Elementwise multiply by a fixed complex array of identical shape.
    pub fn mul_const(&mut self, x: Var, w: Arc<ComplexArr>) -> Result<Var> {
        let a = match self.value(x) {
            Value::Complex(a) => a,
            Value::Real(_) => return Err(Error::Usage("mul_const expects a complex tensor".into())),
        };
        if a.shape() != w.shape() {
            return Err(Error::Dim(format!(
                "mul_const: shape {:?} vs constant {:?}",
                a.shape(),
                w.shape()
            )));
        }
        let out = a * &*w;
        Ok(self.push(Op::MulConst(w), vec![x], Value::Complex(out)))
    }

    /// Zero entries outside a boolean grid; rank-3 inputs broadcast the mask
    /// over the leading axis. Self-adjoint.
    pub fn mask(&mut self, x: Var, grid: Arc<Array2<bool>>) -> Result<Var> {
        let a = match self.value(x) {
            Value::Complex(a) => a,
            Value::Real(_) => return Err(Error::Usage("mask expects a complex tensor".into())),
        };
        let out = apply_mask(a, &grid)?;
        Ok(self.push(Op::Mask(grid), vec![x], Value::Complex(out)))
    }

    /// Real part of the complex inner product `<a, b> = sum conj(a)*b`
    /// (plain dot product for real operands). Produces a real scalar.
    pub fn dot_real(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_kind_shape(a, b, "dot_real")?;
        let v = match (self.value(a), self.value(b)) {
            (Value::Real(x), Value::Real(y)) => x.iter().zip(y).map(|(p, q)| p * q).sum(),
            (Value::Complex(x), Value::Complex(y)) => {
                x.iter().zip(y).map(|(p, q)| p.re * q.re + p.im * q.im).sum()
            }
            _ => unreachable!(),
        };
        Ok(self.push(Op::DotReal, vec![a, b], Value::Real(scalar(v))))
    }

    /// Euclidean norm over complex moduli (or absolute values).
    pub fn norm2(&mut self, x: Var) -> Var {
        let v = match self.value(x) {
            Value::Real(a) => a.iter().map(|v| v * v).sum::<f64>().sqrt(),
            Value::Complex(a) => a.iter().map(|v| v.norm_sqr()).sum::<f64>().sqrt(),
        };
        self.push(Op::Norm2, vec![x], Value::Real(scalar(v)))
    }

    /// Sum of complex moduli (or absolute values).
    pub fn norm1(&mut self, x: Var) -> Var {
        let v = match self.value(x) {
            Value::Real(a) => a.iter().map(|v| v.abs()).sum::<f64>(),
            Value::Complex(a) => a.iter().map(|v| v.norm()).sum::<f64>(),
        };
        self.push(Op::Norm1, vec![x], Value::Real(scalar(v)))
    }

    /// Sum of all entries of a real tensor.
    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let v = match self.value(x) {
            Value::Real(a) => a.sum(),
            Value::Complex(_) => return Err(Error::Usage("sum_all expects a real tensor".into())),
        };
        Ok(self.push(Op::SumAll, vec![x], Value::Real(scalar(v))))
    }

    /// Elementwise exponential of a real tensor.
    pub fn exp(&mut self, x: Var) -> Result<Var> {
        let v = match self.value(x) {
            Value::Real(a) => a.mapv(f64::exp),
            Value::Complex(_) => return Err(Error::Usage("exp expects a real tensor".into())),
        };
        Ok(self.push(Op::Exp, vec![x], Value::Real(v)))
    }

    /// Scalar quotient `a / b`, defined as 0 when `b == 0`. The zero branch
    /// only triggers when an iterative solve has converged exactly, where a
    /// zero step is the correct continuation.
    pub fn div_safe(&mut self, a: Var, b: Var) -> Result<Var> {
        for v in [a, b] {
            match self.value(v) {
                Value::Real(arr) if arr.ndim() == 0 => {}
                _ => return Err(Error::Usage("div_safe expects real scalars".into())),
            }
        }
        let (av, bv) = (self.scalar_value(a), self.scalar_value(b));
        let out = if bv == 0.0 { 0.0 } else { av / bv };
        Ok(self.push(Op::DivSafe, vec![a, b], Value::Real(scalar(out))))
    }

    /// Accumulate gradients of a real scalar loss into every node that
    /// requires them.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        match self.value(loss) {
            Value::Real(a) if a.ndim() == 0 => {}
            _ => return Err(Error::Usage("backward: loss must be a real scalar".into())),
        }
        let mut grads: Vec<Option<Value>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Value::Real(scalar(1.0)));

        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Value>], v: Var, delta: Value) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => acc.add_assign(&delta),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&self, node: &Node, g: &Value, grads: &mut [Option<Value>]) -> Result<()> {
        match &node.op {
            Op::Leaf => {}
            Op::Add => {
                self.accumulate(grads, node.inputs[0], g.clone());
                self.accumulate(grads, node.inputs[1], g.clone());
            }
            Op::Sub => {
                self.accumulate(grads, node.inputs[0], g.clone());
                let neg = match g {
                    Value::Real(a) => Value::Real(a.mapv(|v| -v)),
                    Value::Complex(a) => Value::Complex(a.mapv(|v| -v)),
                };
                self.accumulate(grads, node.inputs[1], neg);
            }
            Op::ScaleConst(c) => {
                let d = match g {
                    Value::Real(a) => Value::Real(a.mapv(|v| v * c)),
                    Value::Complex(a) => Value::Complex(a.mapv(|v| v * c)),
                };
                self.accumulate(grads, node.inputs[0], d);
            }
            Op::MulScalar => {
                let (x, s) = (node.inputs[0], node.inputs[1]);
                let sv = self.scalar_value(s);
                let gx = match g {
                    Value::Real(a) => Value::Real(a.mapv(|v| v * sv)),
                    Value::Complex(a) => Value::Complex(a.mapv(|v| v * sv)),
                };
                self.accumulate(grads, x, gx);
                let gs = match (self.value(x), g) {
                    (Value::Real(xa), Value::Real(ga)) => {
                        xa.iter().zip(ga).map(|(p, q)| p * q).sum()
                    }
                    (Value::Complex(xa), Value::Complex(ga)) => {
                        xa.iter().zip(ga).map(|(p, q)| p.re * q.re + p.im * q.im).sum()
                    }
                    _ => unreachable!(),
                };
                self.accumulate(grads, s, Value::Real(scalar(gs)));
            }
            Op::Relu => {
                let x = self.real(node.inputs[0]);
                let ga = match g {
                    Value::Real(a) => a,
                    _ => unreachable!(),
                };
                let mut d = ga.clone();
                d.zip_mut_with(x, |gv, &xv| {
                    if xv <= 0.0 {
                        *gv = 0.0;
                    }
                });
                self.accumulate(grads, node.inputs[0], Value::Real(d));
            }
            Op::Conv2d { has_bias } => {
                let ga = match g {
                    Value::Real(a) => a.view().into_dimensionality::<Ix3>().unwrap(),
                    _ => unreachable!(),
                };
                let (x, kvar) = (node.inputs[0], node.inputs[1]);
                let xin = self
                    .real(x)
                    .view()
                    .into_dimensionality::<Ix3>()
                    .unwrap();
                let ker = self
                    .real(kvar)
                    .view()
                    .into_dimensionality::<Ix4>()
                    .unwrap();
                if self.nodes[x.0].requires_grad {
                    let gi = conv::input_grad(&ga, &ker);
                    self.accumulate(grads, x, Value::Real(gi.into_dyn()));
                }
                if self.nodes[kvar.0].requires_grad {
                    let gk = conv::kernel_grad(&ga, &xin, ker.dim().2);
                    self.accumulate(grads, kvar, Value::Real(gk.into_dyn()));
                }
                if *has_bias {
                    let b = node.inputs[2];
                    if self.nodes[b.0].requires_grad {
                        let gb = conv::bias_grad(&ga);
                        self.accumulate(grads, b, Value::Real(gb.into_dyn()));
                    }
                }
            }
            Op::Fft2 { inverse } => {
                let ga = match g {
                    Value::Complex(a) => a,
                    _ => unreachable!(),
                };
                // Unitary transform: adjoint is the opposite direction.
                let d = Self::fft2_value(ga, !inverse)?;
                self.accumulate(grads, node.inputs[0], Value::Complex(d));
            }
            Op::ComplexToChannels => {
                let ga = match g {
                    Value::Real(a) => a,
                    _ => unreachable!(),
                };
                let (h, w) = (ga.shape()[1], ga.shape()[2]);
                let mut d = Array2::<Complex64>::zeros((h, w));
                for i in 0..h {
                    for j in 0..w {
                        d[[i, j]] = Complex64::new(ga[[0, i, j]], ga[[1, i, j]]);
                    }
                }
                self.accumulate(grads, node.inputs[0], Value::Complex(d.into_dyn()));
            }
            Op::ChannelsToComplex => {
                let ga = match g {
                    Value::Complex(a) => a,
                    _ => unreachable!(),
                };
                let (h, w) = (ga.shape()[0], ga.shape()[1]);
                let mut d = ndarray::Array3::<f64>::zeros((2, h, w));
                for i in 0..h {
                    for j in 0..w {
                        let v = ga[[i, j]];
                        d[[0, i, j]] = v.re;
                        d[[1, i, j]] = v.im;
                    }
                }
                self.accumulate(grads, node.inputs[0], Value::Real(d.into_dyn()));
            }
            Op::SpreadCoils => {
                let ga = match g {
                    Value::Complex(a) => a.view().into_dimensionality::<Ix3>().unwrap(),
                    _ => unreachable!(),
                };
                let d = ga.sum_axis(Axis(0));
                self.accumulate(grads, node.inputs[0], Value::Complex(d.into_dyn()));
            }
            Op::SumCoils => {
                let ga = match g {
                    Value::Complex(a) => a,
                    _ => unreachable!(),
                };
                let n = self.value(node.inputs[0]).shape()[0];
                let (h, w) = (ga.shape()[0], ga.shape()[1]);
                let mut d = ndarray::Array3::<Complex64>::zeros((n, h, w));
                let ga2 = ga.view().into_dimensionality::<Ix2>().unwrap();
                for c in 0..n {
                    d.index_axis_mut(Axis(0), c).assign(&ga2);
                }
                self.accumulate(grads, node.inputs[0], Value::Complex(d.into_dyn()));
            }
            Op::MulConst(w) => {
                let ga = match g {
                    Value::Complex(a) => a,
                    _ => unreachable!(),
                };
                let mut d = ga.clone();
                d.zip_mut_with(w, |gv, wv| *gv *= wv.conj());
                self.accumulate(grads, node.inputs[0], Value::Complex(d));
            }
            Op::Mask(grid) => {
                let ga = match g {
                    Value::Complex(a) => a,
                    _ => unreachable!(),
                };
                let d = apply_mask(ga, grid)?;
                self.accumulate(grads, node.inputs[0], Value::Complex(d));
            }
            Op::DotReal => {
                let gs = match g {
                    Value::Real(a) => scalar_of(a),
                    _ => unreachable!(),
                };
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (ga, gb) = match (self.value(a), self.value(b)) {
                    (Value::Real(x), Value::Real(y)) => (
                        Value::Real(y.mapv(|v| v * gs)),
                        Value::Real(x.mapv(|v| v * gs)),
                    ),
                    (Value::Complex(x), Value::Complex(y)) => (
                        Value::Complex(y.mapv(|v| v * gs)),
                        Value::Complex(x.mapv(|v| v * gs)),
                    ),
                    _ => unreachable!(),
                };
                self.accumulate(grads, a, ga);
                self.accumulate(grads, b, gb);
            }
            Op::Norm2 => {
                let gs = match g {
                    Value::Real(a) => scalar_of(a),
                    _ => unreachable!(),
                };
                let n = scalar_of(match &node.value {
                    Value::Real(a) => a,
                    _ => unreachable!(),
                });
                let d = if n == 0.0 {
                    self.value(node.inputs[0]).zeros_like()
                } else {
                    match self.value(node.inputs[0]) {
                        Value::Real(x) => Value::Real(x.mapv(|v| v / n * gs)),
                        Value::Complex(x) => Value::Complex(x.mapv(|v| v / n * gs)),
                    }
                };
                self.accumulate(grads, node.inputs[0], d);
            }
            Op::Norm1 => {
                let gs = match g {
                    Value::Real(a) => scalar_of(a),
                    _ => unreachable!(),
                };
                let d = match self.value(node.inputs[0]) {
                    Value::Real(x) => Value::Real(x.mapv(|v| {
                        if v == 0.0 {
                            0.0
                        } else {
                            v.signum() * gs
                        }
                    })),
                    Value::Complex(x) => Value::Complex(x.mapv(|v| {
                        let m = v.norm();
                        if m == 0.0 {
                            Complex64::new(0.0, 0.0)
                        } else {
                            v / m * gs
                        }
                    })),
                };
                self.accumulate(grads, node.inputs[0], d);
            }
            Op::SumAll => {
                let gs = match g {
                    Value::Real(a) => scalar_of(a),
                    _ => unreachable!(),
                };
                let d = match self.value(node.inputs[0]) {
                    Value::Real(x) => Value::Real(RealArr::from_elem(x.raw_dim(), gs)),
                    _ => unreachable!(),
                };
                self.accumulate(grads, node.inputs[0], d);
            }
            Op::Exp => {
                let out = match &node.value {
                    Value::Real(a) => a,
                    _ => unreachable!(),
                };
                let ga = match g {
                    Value::Real(a) => a,
                    _ => unreachable!(),
                };
                let mut d = ga.clone();
                d.zip_mut_with(out, |gv, &ov| *gv *= ov);
                self.accumulate(grads, node.inputs[0], Value::Real(d));
            }
            Op::DivSafe => {
                let gs = match g {
                    Value::Real(a) => scalar_of(a),
                    _ => unreachable!(),
                };
                let (a, b) = (node.inputs[0], node.inputs[1]);
                let (av, bv) = (self.scalar_value(a), self.scalar_value(b));
                if bv != 0.0 {
                    self.accumulate(grads, a, Value::Real(scalar(gs / bv)));
                    self.accumulate(grads, b, Value::Real(scalar(-gs * av / (bv * bv))));
                }
            }
        }
        Ok(())
    }
}

fn apply_mask(a: &ComplexArr, grid: &Array2<bool>) -> Result<ComplexArr> {
    let (h, w) = grid.dim();
    match a.ndim() {
        2 => {
            if a.shape() != [h, w] {
                return Err(Error::Dim(format!(
                    "mask {:?} vs tensor {:?}",
                    grid.dim(),
                    a.shape()
                )));
            }
            let mut out = a.clone();
            let v = out.view_mut().into_dimensionality::<Ix2>().unwrap();
            zero_outside(v, grid);
            Ok(out)
        }
        3 => {
            if a.shape()[1] != h || a.shape()[2] != w {
                return Err(Error::Dim(format!(
                    "mask {:?} vs tensor {:?}",
                    grid.dim(),
                    a.shape()
                )));
            }
            let mut out = a.clone();
            let mut v = out.view_mut().into_dimensionality::<Ix3>().unwrap();
            for c in 0..v.dim().0 {
                zero_outside(v.index_axis_mut(Axis(0), c), grid);
            }
            Ok(out)
        }
        nd => Err(Error::Dim(format!("mask: rank {nd} unsupported"))),
    }
}

fn zero_outside(mut v: ndarray::ArrayViewMut2<'_, Complex64>, grid: &Array2<bool>) {
    v.zip_mut_with(grid, |x, &keep| {
        if !keep {
            *x = Complex64::new(0.0, 0.0);
        }
    });
}
