use std::fmt;

use super::conv::{col2im, im2col, ConvGeom, Padding};
use super::{Real, Tensor};
use crate::error::{Error, Result};

const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// The differentiable op catalog.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum OpKind {
    Add,
    Sub,
    Mul,
    Scale,
    Abs,
    Square,
    Mean,
    Sum,
    Relu,
    LeakyRelu,
    Sigmoid,
    Tanh,
    Conv2d,
    UpsampleNearest2x,
    InstanceNorm,
    Concat,
    Slice,
}

impl OpKind {
    pub const ALL: [OpKind; 17] = [
        OpKind::Add,
        OpKind::Sub,
        OpKind::Mul,
        OpKind::Scale,
        OpKind::Abs,
        OpKind::Square,
        OpKind::Mean,
        OpKind::Sum,
        OpKind::Relu,
        OpKind::LeakyRelu,
        OpKind::Sigmoid,
        OpKind::Tanh,
        OpKind::Conv2d,
        OpKind::UpsampleNearest2x,
        OpKind::InstanceNorm,
        OpKind::Concat,
        OpKind::Slice,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpKind::Add => "add",
            OpKind::Sub => "sub",
            OpKind::Mul => "mul",
            OpKind::Scale => "scale",
            OpKind::Abs => "abs",
            OpKind::Square => "square",
            OpKind::Mean => "mean",
            OpKind::Sum => "sum",
            OpKind::Relu => "relu",
            OpKind::LeakyRelu => "leaky_relu",
            OpKind::Sigmoid => "sigmoid",
            OpKind::Tanh => "tanh",
            OpKind::Conv2d => "conv2d",
            OpKind::UpsampleNearest2x => "nearest_upsample",
            OpKind::InstanceNorm => "instance_norm",
            OpKind::Concat => "concat",
            OpKind::Slice => "slice",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == name)
    }
}

impl fmt::Display for OpKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Abs(Var),
    Square(Var),
    Mean(Var),
    Sum(Var),
    Relu(Var),
    LeakyRelu(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Conv2d {
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        out_ch: usize,
    },
    Upsample(Var),
    InstanceNorm {
        input: Var,
        affine: Option<(Var, Var)>,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        input: Var,
        axis: usize,
        start: usize,
    },
}

impl<T> Op<T> {
    fn kind(&self) -> Option<OpKind> {
        Some(match self {
            Op::Leaf => return None,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Scale(..) => OpKind::Scale,
            Op::Abs(..) => OpKind::Abs,
            Op::Square(..) => OpKind::Square,
            Op::Mean(..) => OpKind::Mean,
            Op::Sum(..) => OpKind::Sum,
            Op::Relu(..) => OpKind::Relu,
            Op::LeakyRelu(..) => OpKind::LeakyRelu,
            Op::Sigmoid(..) => OpKind::Sigmoid,
            Op::Tanh(..) => OpKind::Tanh,
            Op::Conv2d { .. } => OpKind::Conv2d,
            Op::Upsample(..) => OpKind::UpsampleNearest2x,
            Op::InstanceNorm { .. } => OpKind::InstanceNorm,
            Op::Concat { .. } => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
        })
    }
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
    grad: Option<Vec<T>>,
}

/// Records executed ops in topological order and replays them backwards.
///
/// Leaves keep their accumulated gradient until [`Tape::zero_grad`]; calling
/// [`Tape::backward`] twice adds the gradients twice.
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    fault: Option<OpKind>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// How a binary elementwise op pairs its operands.
#[derive(Clone, Copy)]
enum Pairing {
    Same,
    LhsScalar,
    RhsScalar,
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            fault: None,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Test hook: perturbs the backward rule of `kind` so gradient checks
    /// can be shown to catch a broken rule.
    pub fn inject_fault(&mut self, kind: OpKind) {
        self.fault = Some(kind);
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn param(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Result<Var> {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, populated by [`Tape::backward`].
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, name: &'static str, value: Tensor<T>, op: Op<T>, operands: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::NonFinite { op: name });
        }
        let requires_grad = operands.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op: if requires_grad { op } else { Op::Leaf },
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn pairing(&self, name: &'static str, a: Var, b: Var) -> Result<(Vec<usize>, Pairing)> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (na, nb) = (self.value(a).numel(), self.value(b).numel());
        if sa == sb {
            Ok((sa.to_vec(), Pairing::Same))
        } else if na == 1 {
            Ok((sb.to_vec(), Pairing::LhsScalar))
        } else if nb == 1 {
            Ok((sa.to_vec(), Pairing::RhsScalar))
        } else {
            Err(Error::ShapeMismatch {
                op: name,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        kind: OpKind,
        a: Var,
        b: Var,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Var> {
        let (shape, pairing) = self.pairing(kind.name(), a, b)?;
        let (xa, xb) = (self.value(a).data(), self.value(b).data());
        let data: Vec<T> = match pairing {
            Pairing::Same => xa.iter().zip(xb).map(|(&p, &q)| f(p, q)).collect(),
            Pairing::LhsScalar => xb.iter().map(|&q| f(xa[0], q)).collect(),
            Pairing::RhsScalar => xa.iter().map(|&p| f(p, xb[0])).collect(),
        };
        let value = Tensor::new(shape, data)?;
        self.push(kind.name(), value, op, &[a, b])
    }

    fn unary(&mut self, kind: OpKind, a: Var, f: impl Fn(T) -> T, op: Op<T>) -> Result<Var> {
        let value = self.value(a).map(f);
        self.push(kind.name(), value, op, &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Add, a, b, |p, q| p + q, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Sub, a, b, |p, q| p - q, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(OpKind::Mul, a, b, |p, q| p * q, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let c = T::lit(c);
        self.unary(OpKind::Scale, a, |p| p * c, Op::Scale(a, c))
    }

    /// |x|, with subgradient 0 at exactly 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::Abs, a, T::abs, Op::Abs(a))
    }

    pub fn square(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::Square, a, |p| p * p, Op::Square(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let s: f64 = x.data().iter().map(|v| v.to_f64().unwrap()).sum();
        let value = Tensor::scalar(T::lit(s / x.numel() as f64));
        self.push("mean", value, Op::Mean(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().map(|v| v.to_f64().unwrap()).sum();
        self.push("sum", Tensor::scalar(T::lit(s)), Op::Sum(a), &[a])
    }

    /// max(x, 0); derivative at 0 is 0.
    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let zero = T::zero();
        self.unary(OpKind::Relu, a, |p| if p > zero { p } else { zero }, Op::Relu(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Result<Var> {
        let s = T::lit(slope);
        let zero = T::zero();
        self.unary(
            OpKind::LeakyRelu,
            a,
            |p| if p > zero { p } else { p * s },
            Op::LeakyRelu(a, s),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        let one = T::one();
        self.unary(
            OpKind::Sigmoid,
            a,
            |p| {
                if p >= T::zero() {
                    one / (one + (-p).exp())
                } else {
                    let e = p.exp();
                    e / (one + e)
                }
            },
            Op::Sigmoid(a),
        )
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.unary(OpKind::Tanh, a, T::tanh, Op::Tanh(a))
    }

    /// 2-D cross-correlation. `input` is `N×C×H×W`, `weight` is `Co×C×k×k`,
    /// `bias` (optional) is `[Co]`. Output is `N×Co×Ho×Wo` with
    /// `Ho = (H + top + bottom − k) / stride + 1`.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        pad: Padding,
    ) -> Result<Var> {
        let (xs, ws) = (self.shape(input).to_vec(), self.shape(weight).to_vec());
        let mismatch = || Error::ShapeMismatch {
            op: "conv2d",
            lhs: xs.clone(),
            rhs: ws.clone(),
        };
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(mismatch());
        }
        let (n, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let (out_ch, k) = (ws[0], ws[2]);
        if let Some(b) = bias {
            if self.shape(b) != [out_ch] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    lhs: ws.clone(),
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let geom = ConvGeom::new(c, h, w, k, stride, pad)
            .map_err(|e| Error::invalid(format!("conv2d: {e} (input {xs:?}, kernel {ws:?})")))?;
        let maps = geom.maps();
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let mut cols = vec![T::zero(); rows * ncols];
        let mut out = vec![T::zero(); n * out_ch * ncols];
        let x = self.value(input).data();
        let wt = self.value(weight).data();
        for b in 0..n {
            im2col(&geom, &maps, &x[b * c * h * w..(b + 1) * c * h * w], &mut cols);
            let dst = &mut out[b * out_ch * ncols..(b + 1) * out_ch * ncols];
            if let Some(bv) = bias {
                let bias = self.value(bv).data();
                for (o, row) in dst.chunks_mut(ncols).enumerate() {
                    row.fill(bias[o]);
                }
            }
            let beta = if bias.is_some() { T::one() } else { T::zero() };
            T::gemm(
                out_ch,
                rows,
                ncols,
                wt,
                (rows as isize, 1),
                &cols,
                (ncols as isize, 1),
                beta,
                dst,
                (ncols as isize, 1),
            );
        }
        let value = Tensor::new(vec![n, out_ch, geom.out_h, geom.out_w], out)?;
        let mut operands = vec![input, weight];
        operands.extend(bias);
        self.push(
            "conv2d",
            value,
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                out_ch,
            },
            &operands,
        )
    }

    /// Nearest-neighbour ×2 spatial upsampling of an `N×C×H×W` tensor.
    pub fn upsample_nearest2x(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "nearest_upsample",
                lhs: s,
                rhs: vec![0, 0, 0, 0],
            });
        }
        let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(planes * 4 * h * w);
        for p in 0..planes {
            let plane = &x[p * h * w..(p + 1) * h * w];
            for i in 0..2 * h {
                let row = &plane[(i / 2) * w..(i / 2 + 1) * w];
                for j in 0..2 * w {
                    out.push(row[j / 2]);
                }
            }
        }
        let value = Tensor::new(vec![s[0], s[1], 2 * h, 2 * w], out)?;
        self.push("nearest_upsample", value, Op::Upsample(a), &[a])
    }

    /// Per-(sample, channel) normalization over the spatial axes, followed by
    /// an optional per-channel affine `(gamma, beta)`, each of shape `[C]`.
    pub fn instance_norm(&mut self, a: Var, affine: Option<(Var, Var)>) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op: "instance_norm",
                lhs: s,
                rhs: vec![0, 0, 0, 0],
            });
        }
        let (n, c, m) = (s[0], s[1], s[2] * s[3]);
        if let Some((g, b)) = affine {
            for p in [g, b] {
                if self.shape(p) != [c] {
                    return Err(Error::ShapeMismatch {
                        op: "instance_norm",
                        lhs: s.clone(),
                        rhs: self.shape(p).to_vec(),
                    });
                }
            }
        }
        let x = self.value(a).data();
        let mut xhat = Vec::with_capacity(x.len());
        let mut inv_std = Vec::with_capacity(n * c);
        for plane in x.chunks(m) {
            let mean = plane.iter().map(|v| v.to_f64().unwrap()).sum::<f64>() / m as f64;
            let var = plane
                .iter()
                .map(|v| {
                    let d = v.to_f64().unwrap() - mean;
                    d * d
                })
                .sum::<f64>()
                / m as f64;
            let istd = 1.0 / (var + INSTANCE_NORM_EPS).sqrt();
            let (mean_t, istd_t) = (T::lit(mean), T::lit(istd));
            xhat.extend(plane.iter().map(|&v| (v - mean_t) * istd_t));
            inv_std.push(istd_t);
        }
        let out = match affine {
            None => xhat.clone(),
            Some((g, b)) => {
                let (gv, bv) = (self.value(g).data(), self.value(b).data());
                xhat.chunks(m)
                    .enumerate()
                    .flat_map(|(p, plane)| {
                        let ch = p % c;
                        plane.iter().map(move |&v| v * gv[ch] + bv[ch])
                    })
                    .collect()
            }
        };
        let value = Tensor::new(s, out)?;
        let mut operands = vec![a];
        if let Some((g, b)) = affine {
            operands.extend([g, b]);
        }
        self.push(
            "instance_norm",
            value,
            Op::InstanceNorm {
                input: a,
                affine,
                xhat,
                inv_std,
            },
            &operands,
        )
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::invalid("concat: no operands"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::invalid(format!("concat: axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for p in parts {
            let s = self.shape(*p);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (x, y))| i == axis || x == y);
            if !compatible {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s.to_vec(),
                });
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let len = self.shape(*p)[axis] * inner;
                out.extend_from_slice(&self.value(*p).data()[o * len..(o + 1) * len]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::new(shape, out)?;
        self.push(
            "concat",
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        )
    }

    /// Indices `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if axis >= s.len() || start >= end || end > s[axis] {
            return Err(Error::invalid(format!(
                "slice: range {start}..{end} on axis {axis} invalid for {s:?}"
            )));
        }
        let outer: usize = s[..axis].iter().product();
        let inner: usize = s[axis + 1..].iter().product();
        let x = self.value(a).data();
        let mut out = Vec::with_capacity(outer * (end - start) * inner);
        for o in 0..outer {
            let base = o * s[axis] * inner;
            out.extend_from_slice(&x[base + start * inner..base + end * inner]);
        }
        let mut shape = s;
        shape[axis] = end - start;
        let value = Tensor::new(shape, out)?;
        self.push("slice", value, Op::Slice { input: a, axis, start }, &[a])
    }

    /// Accumulates `d loss / d leaf` into every leaf that requires grad.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        grads[loss.0] = Some(vec![T::one()]);
        let mut leaf_grads = Vec::new();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Op::Leaf = node.op {
                if node.requires_grad {
                    leaf_grads.push((i, g));
                }
                continue;
            }
            let fault = self.fault.is_some() && node.op.kind() == self.fault;
            for (v, mut contrib) in self.local_grads(i, &g) {
                if fault {
                    contrib.iter_mut().for_each(|c| *c = *c * T::lit(1.5));
                }
                accumulate(&mut grads[v.0], contrib);
            }
        }
        for (i, g) in leaf_grads {
            accumulate(&mut self.nodes[i].grad, g);
        }
        Ok(())
    }

    /// Gradient contributions of node `i` to its operands, given the
    /// gradient `g` flowing into its output.
    fn local_grads(&self, i: usize, g: &[T]) -> Vec<(Var, Vec<T>)> {
        let node = &self.nodes[i];
        let val = |v: Var| self.nodes[v.0].value.data();
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                out.push((*a, reduce_to(g, val(*a).len())));
                out.push((*b, reduce_to(g, val(*b).len())));
            }
            Op::Sub(a, b) => {
                out.push((*a, reduce_to(g, val(*a).len())));
                let neg: Vec<T> = g.iter().map(|&x| -x).collect();
                out.push((*b, reduce_to(&neg, val(*b).len())));
            }
            Op::Mul(a, b) => {
                let (xa, xb) = (val(*a), val(*b));
                let pick = |x: &[T], j: usize| if x.len() == 1 { x[0] } else { x[j] };
                if rg(*a) {
                    let ga: Vec<T> = g.iter().enumerate().map(|(j, &d)| d * pick(xb, j)).collect();
                    out.push((*a, reduce_to(&ga, xa.len())));
                }
                if rg(*b) {
                    let gb: Vec<T> = g.iter().enumerate().map(|(j, &d)| d * pick(xa, j)).collect();
                    out.push((*b, reduce_to(&gb, xb.len())));
                }
            }
            Op::Scale(a, c) => out.push((*a, g.iter().map(|&d| d * *c).collect())),
            Op::Abs(a) => {
                let zero = T::zero();
                let ga = val(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &d)| {
                        if x > zero {
                            d
                        } else if x < zero {
                            -d
                        } else {
                            zero
                        }
                    })
                    .collect();
                out.push((*a, ga));
            }
            Op::Square(a) => {
                let two = T::lit(2.0);
                out.push((*a, val(*a).iter().zip(g).map(|(&x, &d)| two * x * d).collect()));
            }
            Op::Mean(a) => {
                let n = val(*a).len();
                out.push((*a, vec![g[0] / T::lit(n as f64); n]));
            }
            Op::Sum(a) => out.push((*a, vec![g[0]; val(*a).len()])),
            Op::Relu(a) => {
                let zero = T::zero();
                let ga = val(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &d)| if x > zero { d } else { zero })
                    .collect();
                out.push((*a, ga));
            }
            Op::LeakyRelu(a, s) => {
                let zero = T::zero();
                let ga = val(*a)
                    .iter()
                    .zip(g)
                    .map(|(&x, &d)| if x > zero { d } else { d * *s })
                    .collect();
                out.push((*a, ga));
            }
            Op::Sigmoid(a) => {
                let one = T::one();
                let ga = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &d)| d * y * (one - y))
                    .collect();
                out.push((*a, ga));
            }
            Op::Tanh(a) => {
                let one = T::one();
                let ga = node
                    .value
                    .data()
                    .iter()
                    .zip(g)
                    .map(|(&y, &d)| d * (one - y * y))
                    .collect();
                out.push((*a, ga));
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                out_ch,
            } => out.extend(self.conv2d_grads(*input, *weight, *bias, geom, *out_ch, g)),
            Op::Upsample(a) => {
                let s = self.nodes[a.0].value.shape();
                let (planes, h, w) = (s[0] * s[1], s[2], s[3]);
                let mut ga = vec![T::zero(); planes * h * w];
                for p in 0..planes {
                    let src = &g[p * 4 * h * w..(p + 1) * 4 * h * w];
                    let dst = &mut ga[p * h * w..(p + 1) * h * w];
                    for i in 0..2 * h {
                        for j in 0..2 * w {
                            let d = &mut dst[(i / 2) * w + j / 2];
                            *d = *d + src[i * 2 * w + j];
                        }
                    }
                }
                out.push((*a, ga));
            }
            Op::InstanceNorm {
                input,
                affine,
                xhat,
                inv_std,
            } => {
                let s = self.nodes[input.0].value.shape();
                let (c, m) = (s[1], s[2] * s[3]);
                let gamma = affine.map(|(gm, _)| val(gm));
                if rg(*input) {
                    let mut gx = Vec::with_capacity(g.len());
                    let mf = T::lit(m as f64);
                    for (p, (gp, xp)) in g.chunks(m).zip(xhat.chunks(m)).enumerate() {
                        let scale = gamma.map_or(T::one(), |gv| gv[p % c]);
                        let mut s1 = T::zero();
                        let mut s2 = T::zero();
                        for (&d, &xh) in gp.iter().zip(xp) {
                            let dxh = d * scale;
                            s1 = s1 + dxh;
                            s2 = s2 + dxh * xh;
                        }
                        let k = inv_std[p] / mf;
                        gx.extend(
                            gp.iter()
                                .zip(xp)
                                .map(|(&d, &xh)| k * (mf * d * scale - s1 - xh * s2)),
                        );
                    }
                    out.push((*input, gx));
                }
                if let Some((gm, bt)) = affine {
                    let mut dg = vec![T::zero(); c];
                    let mut db = vec![T::zero(); c];
                    for (p, (gp, xp)) in g.chunks(m).zip(xhat.chunks(m)).enumerate() {
                        for (&d, &xh) in gp.iter().zip(xp) {
                            dg[p % c] = dg[p % c] + d * xh;
                            db[p % c] = db[p % c] + d;
                        }
                    }
                    out.push((*gm, dg));
                    out.push((*bt, db));
                }
            }
            Op::Concat { parts, axis } => {
                let s = node.value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let total = s[*axis];
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.shape()[*axis] * inner;
                    if rg(*p) {
                        let mut gp = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            let base = o * total * inner + offset;
                            gp.extend_from_slice(&g[base..base + len]);
                        }
                        out.push((*p, gp));
                    }
                    offset += len;
                }
            }
            Op::Slice { input, axis, start } => {
                let s = self.nodes[input.0].value.shape();
                let outer: usize = s[..*axis].iter().product();
                let inner: usize = s[*axis + 1..].iter().product();
                let width = node.value.shape()[*axis] * inner;
                let mut ga = vec![T::zero(); val(*input).len()];
                for o in 0..outer {
                    let base = o * s[*axis] * inner + start * inner;
                    ga[base..base + width].copy_from_slice(&g[o * width..(o + 1) * width]);
                }
                out.push((*input, ga));
            }
        }
        out.retain(|(v, _)| rg(*v));
        out
    }

    fn conv2d_grads(
        &self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        geom: &ConvGeom,
        out_ch: usize,
        g: &[T],
    ) -> Vec<(Var, Vec<T>)> {
        let x = &self.nodes[input.0].value;
        let wt = self.nodes[weight.0].value.data();
        let n = x.shape()[0];
        let img = geom.in_ch * geom.in_h * geom.in_w;
        let maps = geom.maps();
        let (rows, ncols) = (geom.col_rows(), geom.col_cols());
        let (need_x, need_w) = (
            self.nodes[input.0].requires_grad,
            self.nodes[weight.0].requires_grad,
        );
        let mut gx = if need_x { vec![T::zero(); x.numel()] } else { Vec::new() };
        let mut gw = if need_w { vec![T::zero(); wt.len()] } else { Vec::new() };
        let mut cols = vec![T::zero(); rows * ncols];
        for b in 0..n {
            let gout = &g[b * out_ch * ncols..(b + 1) * out_ch * ncols];
            if need_w {
                im2col(geom, &maps, &x.data()[b * img..(b + 1) * img], &mut cols);
                // gw[Co, rows] += gout[Co, ncols] · colsᵀ
                T::gemm(
                    out_ch,
                    ncols,
                    rows,
                    gout,
                    (ncols as isize, 1),
                    &cols,
                    (1, ncols as isize),
                    T::one(),
                    &mut gw,
                    (rows as isize, 1),
                );
            }
            if need_x {
                // dcols[rows, ncols] = wᵀ · gout
                T::gemm(
                    rows,
                    out_ch,
                    ncols,
                    wt,
                    (1, rows as isize),
                    gout,
                    (ncols as isize, 1),
                    T::zero(),
                    &mut cols,
                    (ncols as isize, 1),
                );
                col2im(geom, &maps, &cols, &mut gx[b * img..(b + 1) * img]);
            }
        }
        let mut out = Vec::new();
        if need_x {
            out.push((input, gx));
        }
        if need_w {
            out.push((weight, gw));
        }
        if let Some(bv) = bias {
            let mut gb = vec![T::zero(); out_ch];
            for (r, row) in g.chunks(ncols).enumerate() {
                let o = r % out_ch;
                gb[o] = row.iter().fold(gb[o], |acc, &d| acc + d);
            }
            out.push((bv, gb));
        }
        out
    }
}

fn reduce_to<T: Real>(g: &[T], len: usize) -> Vec<T> {
    if len == g.len() {
        g.to_vec()
    } else {
        vec![g.iter().fold(T::zero(), |acc, &d| acc + d)]
    }
}

fn accumulate<T: Real>(slot: &mut Option<Vec<T>>, contrib: Vec<T>) {
    match slot {
        None => *slot = Some(contrib),
        Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, c)| *a = *a + c),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::PadMode;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn sigmoid_of_zero_is_half_with_quarter_slope() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::scalar(0.0)).unwrap();
        let y = tape.sigmoid(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5]);
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25]);
    }

    #[test]
    fn relu_clamps_negatives() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[3], &[-1.0, 0.0, 2.0])).unwrap();
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn relu_and_abs_have_zero_derivative_at_zero() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[0.0, 0.0])).unwrap();
        let r = tape.relu(x).unwrap();
        let a = tape.abs(x).unwrap();
        let s = tape.add(r, a).unwrap();
        let l = tape.sum(s).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0]);
    }

    #[test]
    fn mean_spreads_gradient_evenly() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[4], &[1.0, 2.0, 3.0, 4.0])).unwrap();
        let m = tape.mean(x).unwrap();
        assert_eq!(tape.value(m).data(), &[2.5]);
        tape.backward(m).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.25; 4]);
    }

    #[test]
    fn conv_of_ones_sums_the_window() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::full([1, 1, 3, 3], 1.0)).unwrap();
        let k = tape.constant(Tensor::full([1, 1, 3, 3], 1.0)).unwrap();
        let y = tape
            .conv2d(x, k, None, 1, Padding::symmetric(1, PadMode::Zero))
            .unwrap();
        let out = tape.value(y);
        assert_eq!(out.shape(), &[1, 1, 3, 3]);
        assert_eq!(out.data()[4], 9.0);
        // Corners see a 2x2 window under zero padding.
        assert_eq!(out.data()[0], 4.0);
    }

    #[test]
    fn conv_stride_two_halves_spatial_size() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::zeros([1, 3, 32, 32])).unwrap();
        let k = tape.constant(Tensor::zeros([8, 3, 4, 4])).unwrap();
        let y = tape
            .conv2d(x, k, None, 2, Padding::symmetric(1, PadMode::Zero))
            .unwrap();
        assert_eq!(tape.shape(y), &[1, 8, 16, 16]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros([2, 3])).unwrap();
        let b = tape.constant(Tensor::zeros([3, 2])).unwrap();
        let msg = tape.add(a, b).unwrap_err().to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    }

    #[test]
    fn non_finite_inputs_are_rejected() {
        let mut tape = Tape::<f64>::new();
        assert!(matches!(
            tape.constant(t(&[2], &[1.0, f64::NAN])),
            Err(Error::NonFinite { .. })
        ));
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(Tensor::zeros([3])).unwrap();
        let y = tape.square(x).unwrap();
        assert!(tape.backward(y).is_err());
    }

    #[test]
    fn backward_twice_doubles_gradients() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.5, -0.5])).unwrap();
        let y = tape.square(x).unwrap();
        let l = tape.sum(y).unwrap();
        tape.backward(l).unwrap();
        let once = tape.grad(x).unwrap().to_vec();
        tape.backward(l).unwrap();
        let twice = tape.grad(x).unwrap();
        assert_eq!(twice, &[2.0 * once[0], 2.0 * once[1]]);
    }

    #[test]
    fn off_path_leaves_get_zero_or_no_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[1], &[2.0])).unwrap();
        let unused = tape.param(t(&[1], &[3.0])).unwrap();
        let y = tape.square(x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0]);
        assert!(tape.grad(unused).is_none_or(|g| g.iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn scalar_broadcast_sums_gradient() {
        let mut tape = Tape::<f64>::new();
        let one = tape.param(Tensor::scalar(1.0)).unwrap();
        let x = tape.param(t(&[3], &[0.1, 0.2, 0.3])).unwrap();
        let d = tape.sub(one, x).unwrap();
        assert_eq!(tape.shape(d), &[3]);
        let l = tape.sum(d).unwrap();
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(one).unwrap(), &[3.0]);
        assert_eq!(tape.grad(x).unwrap(), &[-1.0; 3]);
    }

    #[test]
    fn concat_then_slice_round_trips() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn([1, 2, 2, 2], |i| i as f64)).unwrap();
        let b = tape.constant(Tensor::from_fn([1, 1, 2, 2], |i| -(i as f64))).unwrap();
        let c = tape.concat(&[a, b], 1).unwrap();
        assert_eq!(tape.shape(c), &[1, 3, 2, 2]);
        let back = tape.slice(c, 1, 2, 3).unwrap();
        assert_eq!(tape.value(back), tape.value(b));
    }

    #[test]
    fn upsample_repeats_pixels() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(t(&[1, 1, 1, 2], &[1.0, 2.0])).unwrap();
        let u = tape.upsample_nearest2x(a).unwrap();
        assert_eq!(tape.value(u).data(), &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0]);
    }

    #[test]
    fn instance_norm_standardizes_each_plane() {
        let mut tape = Tape::<f64>::new();
        let x = tape
            .constant(Tensor::from_fn([2, 3, 4, 5], |i| ((i * 37 % 17) as f64) * 0.3 - 1.0))
            .unwrap();
        let y = tape.instance_norm(x, None).unwrap();
        for plane in tape.value(y).data().chunks(20) {
            let mean = plane.iter().sum::<f64>() / 20.0;
            let var = plane.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 20.0;
            assert!(mean.abs() <= 1e-5);
            assert!((var - 1.0).abs() <= 1e-4);
        }
    }
}
