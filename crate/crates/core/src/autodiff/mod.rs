//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every operation applied to [`Var`] handles in
//! execution order. Because parents are always recorded before children, the
//! tape is already topologically sorted and [`Tape::backward`] simply walks it
//! in reverse.
//!
//! ```
//! use gasa::autodiff::Tape;
//! use gasa::Tensor;
//!
//! let tape = Tape::new();
//! let x = tape.leaf(Tensor::new([2], vec![1.0, 2.0]).unwrap(), true);
//! let y = tape.mul(x, x).unwrap();
//! let root = tape.sum(y);
//! tape.backward(root).unwrap();
//! assert_eq!(tape.grad(x).unwrap().values(), &[2.0, 4.0]);
//! ```

pub mod conv;

use std::cell::{Ref, RefCell};

use crate::error::{Error, Result};
use crate::rng::Rng;
use crate::tensor::{dims4, Tensor};
use conv::ConvGeom;

pub const LAYER_NORM_EPS: f64 = 1e-5;
pub const LOG_CLAMP: f64 = 1e-12;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv3dOpts {
    pub stride: [usize; 3],
    pub pad: [usize; 3],
}

impl Default for Conv3dOpts {
    fn default() -> Self {
        Self {
            stride: [1; 3],
            pad: [0; 3],
        }
    }
}

impl Conv3dOpts {
    /// Same-size output for odd kernels at stride 1.
    pub fn same(kernel: usize, stride: usize) -> Self {
        Self {
            stride: [stride; 3],
            pad: [kernel / 2; 3],
        }
    }
}

/// Outer / axis / inner decomposition of a shape around one axis.
#[derive(Clone, Copy, Debug)]
struct AxisSplit {
    outer: usize,
    len: usize,
    inner: usize,
}

impl AxisSplit {
    fn new(shape: &[usize], axis: usize) -> Self {
        Self {
            outer: shape[..axis].iter().product(),
            len: shape[axis],
            inner: shape[axis + 1..].iter().product(),
        }
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `a / b`, or the fallback constant (zero gradient) where `b == 0`.
    SafeDiv(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddRow(Var, Var),
    Matmul(Var, Var, usize, usize, usize),
    Transpose(Var, usize, usize),
    Reshape(Var),
    Softmax(Var, AxisSplit),
    LogClamp(Var),
    Sum(Var),
    SumLastDim(Var, usize),
    LeakyRelu(Var, f64),
    RowNorm {
        x: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        row: usize,
    },
    RowAffine {
        x: Var,
        gamma: Var,
        beta: Var,
        /// true: one coefficient per row (channel affine); false: per column.
        per_row: bool,
        row: usize,
    },
    Dropout(Var, Vec<f64>),
    Conv3d(Var, Var, Var, ConvGeom),
    Narrow(Var, AxisSplit, usize, usize),
    Concat(Vec<(Var, usize)>, usize, usize),
    ExpandAxis(Var, usize, [usize; 3]),
    Upsample(Var, [usize; 4], [usize; 3]),
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            Add(a, b) | Sub(a, b) | Mul(a, b) | Div(a, b) | SafeDiv(a, b) | AddRow(a, b) => {
                vec![*a, *b]
            }
            Matmul(a, b, ..) => vec![*a, *b],
            Scale(a, _)
            | AddScalar(a)
            | Transpose(a, ..)
            | Reshape(a)
            | Softmax(a, _)
            | LogClamp(a)
            | Sum(a)
            | SumLastDim(a, _)
            | LeakyRelu(a, _)
            | Dropout(a, _)
            | Narrow(a, ..)
            | ExpandAxis(a, ..)
            | Upsample(a, ..) => vec![*a],
            RowNorm { x, .. } => vec![*x],
            RowAffine { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
            Conv3d(x, w, b, _) => vec![*x, *w, *b],
            Concat(parts, ..) => parts.iter().map(|(v, _)| *v).collect(),
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Operation recorder and gradient store for one forward/backward pass.
///
/// Leaf gradients persist across [`Tape::backward`] calls and accumulate
/// until [`Tape::zero_grad`].
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
    grads: RefCell<Vec<Option<Vec<f64>>>>,
}

impl std::fmt::Debug for Tape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tape")
            .field("nodes", &self.nodes.borrow().len())
            .finish()
    }
}

fn same_shape(op: &str, a: &Tensor, b: &Tensor) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::shape(format!(
            "{op}: {:?} vs {:?}",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

/// `[m, k] x [k, n]` into a fresh buffer.
pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, bv) in row.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Tensor, op: Op) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.parents().iter().any(|p| nodes[p.0].requires_grad);
        nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    /// Registers a leaf. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&self, value: Tensor, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Var(nodes.len() - 1)
    }

    pub fn constant(&self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn tensor(&self, shape: &[usize], values: Vec<f64>, requires_grad: bool) -> Result<Var> {
        Ok(self.leaf(Tensor::new(shape, values)?, requires_grad))
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.nodes.borrow()[v.0].value.shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let grads = self.grads.borrow();
        let g = grads.get(v.0)?.as_ref()?;
        let shape = self.shape(v);
        Some(Tensor::new(shape, g.clone()).expect("grad shape"))
    }

    pub fn zero_grad(&self) {
        self.grads.borrow_mut().clear();
    }

    /// Sign of every leaky-ReLU input recorded so far, in recording order.
    /// Two evaluations with equal patterns took the same linear pieces, so
    /// a finite-difference stencil whose endpoints share the base pattern
    /// did not straddle a kink (up to an even number of crossings).
    pub fn activation_pattern(&self) -> Vec<bool> {
        let nodes = self.nodes.borrow();
        let mut out = Vec::new();
        for n in nodes.iter() {
            if let Op::LeakyRelu(a, _) = n.op {
                out.extend(nodes[a.0].value.values().iter().map(|&x| x > 0.0));
            }
        }
        out
    }

    fn unary(&self, a: Var, f: impl FnOnce(&Tensor) -> Tensor, op: Op) -> Var {
        let value = f(&self.nodes.borrow()[a.0].value);
        self.push(value, op)
    }

    fn binary_same(
        &self,
        name: &str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            same_shape(name, ta, tb)?;
            Tensor::new(ta.shape(), zip_map(ta.values(), tb.values(), f))?
        };
        Ok(self.push(value, op))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise `a / b`, yielding `fallback` with zero gradient where `b == 0`.
    pub fn safe_div(&self, a: Var, b: Var, fallback: f64) -> Result<Var> {
        self.binary_same(
            "safe_div",
            a,
            b,
            |x, y| if y == 0.0 { fallback } else { x / y },
            Op::SafeDiv(a, b),
        )
    }

    pub fn scale(&self, a: Var, c: f64) -> Var {
        self.unary(
            a,
            |t| Tensor::new(t.shape(), t.values().iter().map(|x| x * c).collect()).unwrap(),
            Op::Scale(a, c),
        )
    }

    pub fn add_scalar(&self, a: Var, c: f64) -> Var {
        self.unary(
            a,
            |t| Tensor::new(t.shape(), t.values().iter().map(|x| x + c).collect()).unwrap(),
            Op::AddScalar(a),
        )
    }

    /// `x[m, n] + b[n]` broadcast over rows.
    pub fn add_row(&self, x: Var, b: Var) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (tx, tb) = (&nodes[x.0].value, &nodes[b.0].value);
            let n = *tx.shape().last().unwrap();
            if tb.len() != n {
                return Err(Error::shape(format!(
                    "add_row: bias of {} for rows of {n}",
                    tb.len()
                )));
            }
            let vals = tx
                .values()
                .chunks(n)
                .flat_map(|r| r.iter().zip(tb.values()).map(|(x, b)| x + b))
                .collect();
            Tensor::new(tx.shape(), vals)?
        };
        Ok(self.push(value, Op::AddRow(x, b)))
    }

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let (value, m, k, n) = {
            let nodes = self.nodes.borrow();
            let (ta, tb) = (&nodes[a.0].value, &nodes[b.0].value);
            let (&[m, k], &[k2, n]) = (ta.shape(), tb.shape()) else {
                return Err(Error::shape(format!(
                    "matmul needs rank-2 operands, got {:?} and {:?}",
                    ta.shape(),
                    tb.shape()
                )));
            };
            if k != k2 {
                return Err(Error::shape(format!(
                    "matmul inner extents {k} and {k2} differ"
                )));
            }
            let v = matmul_raw(ta.values(), tb.values(), m, k, n);
            (Tensor::new([m, n], v)?, m, k, n)
        };
        Ok(self.push(value, Op::Matmul(a, b, m, k, n)))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let (value, m, n) = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let &[m, n] = ta.shape() else {
                return Err(Error::shape(format!(
                    "transpose needs rank 2, got {:?}",
                    ta.shape()
                )));
            };
            (Tensor::new([n, m], transpose_raw(ta.values(), m, n))?, m, n)
        };
        Ok(self.push(value, Op::Transpose(a, m, n)))
    }

    pub fn reshape(&self, a: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes.borrow()[a.0].value.clone().reshape(shape)?;
        Ok(self.push(value, Op::Reshape(a)))
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&self, a: Var, axis: usize) -> Result<Var> {
        let (value, split) = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            if axis >= ta.rank() {
                return Err(Error::shape(format!(
                    "softmax axis {axis} for shape {:?}",
                    ta.shape()
                )));
            }
            let s = AxisSplit::new(ta.shape(), axis);
            let x = ta.values();
            let mut y = vec![0.0; x.len()];
            for o in 0..s.outer {
                for i in 0..s.inner {
                    let idx = |j: usize| (o * s.len + j) * s.inner + i;
                    let max = (0..s.len).map(|j| x[idx(j)]).fold(f64::NEG_INFINITY, f64::max);
                    let mut total = 0.0;
                    for j in 0..s.len {
                        let e = (x[idx(j)] - max).exp();
                        y[idx(j)] = e;
                        total += e;
                    }
                    for j in 0..s.len {
                        y[idx(j)] /= total;
                    }
                }
            }
            (Tensor::new(ta.shape(), y)?, s)
        };
        Ok(self.push(value, Op::Softmax(a, split)))
    }

    pub fn softmax_lastdim(&self, a: Var) -> Result<Var> {
        let rank = self.nodes.borrow()[a.0].value.rank();
        self.softmax(a, rank - 1)
    }

    /// `ln(max(a, 1e-12))`; the clamp passes no gradient.
    pub fn log_clamped(&self, a: Var) -> Var {
        self.unary(
            a,
            |t| {
                let v = t.values().iter().map(|x| x.max(LOG_CLAMP).ln()).collect();
                Tensor::new(t.shape(), v).unwrap()
            },
            Op::LogClamp(a),
        )
    }

    pub fn sum(&self, a: Var) -> Var {
        self.unary(a, |t| Tensor::scalar(t.values().iter().sum()), Op::Sum(a))
    }

    pub fn mean(&self, a: Var) -> Var {
        let n = self.nodes.borrow()[a.0].value.len();
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Sums the last axis away; a rank-1 input becomes shape `[1]`.
    pub fn sum_lastdim(&self, a: Var) -> Var {
        let shape = self.shape(a);
        let n = *shape.last().unwrap();
        let out_shape = if shape.len() > 1 {
            shape[..shape.len() - 1].to_vec()
        } else {
            vec![1]
        };
        self.unary(
            a,
            |t| {
                let v = t.values().chunks(n).map(|c| c.iter().sum()).collect();
                Tensor::new(out_shape, v).unwrap()
            },
            Op::SumLastDim(a, n),
        )
    }

    pub fn leaky_relu(&self, a: Var, slope: f64) -> Var {
        self.unary(
            a,
            |t| {
                let v = t
                    .values()
                    .iter()
                    .map(|&x| if x > 0.0 { x } else { slope * x })
                    .collect();
                Tensor::new(t.shape(), v).unwrap()
            },
            Op::LeakyRelu(a, slope),
        )
    }

    /// Zero-mean unit-variance normalization of contiguous rows of length `row`.
    fn row_norm(&self, x: Var, row: usize, eps: f64) -> Var {
        let (value, xhat, inv_std) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let mut xhat = Vec::with_capacity(tx.len());
            let mut inv_std = Vec::with_capacity(tx.len() / row);
            for r in tx.values().chunks(row) {
                let mean = r.iter().sum::<f64>() / row as f64;
                let var = r.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / row as f64;
                let inv = 1.0 / (var + eps).sqrt();
                inv_std.push(inv);
                xhat.extend(r.iter().map(|v| (v - mean) * inv));
            }
            (Tensor::new(tx.shape(), xhat.clone()).unwrap(), xhat, inv_std)
        };
        self.push(
            value,
            Op::RowNorm {
                x,
                xhat,
                inv_std,
                row,
            },
        )
    }

    fn row_affine(&self, x: Var, gamma: Var, beta: Var, row: usize, per_row: bool) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let (tx, tg, tb) = (&nodes[x.0].value, &nodes[gamma.0].value, &nodes[beta.0].value);
            let want = if per_row { tx.len() / row } else { row };
            if tg.len() != want || tb.len() != want {
                return Err(Error::shape(format!(
                    "affine coefficients {:?}/{:?} for input {:?}",
                    tg.shape(),
                    tb.shape(),
                    tx.shape()
                )));
            }
            let (g, b) = (tg.values(), tb.values());
            let v = tx
                .values()
                .iter()
                .enumerate()
                .map(|(i, xv)| {
                    let c = if per_row { i / row } else { i % row };
                    g[c] * xv + b[c]
                })
                .collect();
            Tensor::new(tx.shape(), v)?
        };
        Ok(self.push(
            value,
            Op::RowAffine {
                x,
                gamma,
                beta,
                per_row,
                row,
            },
        ))
    }

    /// Layer normalization over the last axis (epsilon 1e-5).
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x);
        let row = *shape.last().unwrap();
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [row] {
                return Err(Error::shape(format!(
                    "layer_norm {name} {:?} for last extent {row}",
                    self.shape(v)
                )));
            }
        }
        let n = self.row_norm(x, row, LAYER_NORM_EPS);
        self.row_affine(n, gamma, beta, row, false)
    }

    /// Per-channel normalization of `[C, ...]` over all trailing axes,
    /// followed by a per-channel affine transform.
    pub fn instance_norm(&self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let shape = self.shape(x);
        let row: usize = shape[1..].iter().product();
        let n = self.row_norm(x, row, LAYER_NORM_EPS);
        self.row_affine(n, gamma, beta, row, true)
    }

    /// Inverted dropout: survivors are scaled by `1 / (1 - p)` at train time
    /// so that inference is the identity.
    pub fn dropout(&self, x: Var, p: f64, training: bool, rng: &mut Rng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::InvalidProbability(p));
        }
        if !training || p == 0.0 {
            return Ok(x);
        }
        let keep = 1.0 / (1.0 - p);
        let (value, mask) = {
            let nodes = self.nodes.borrow();
            let tx = &nodes[x.0].value;
            let mask: Vec<f64> = (0..tx.len())
                .map(|_| if rng.bernoulli(p) { 0.0 } else { keep })
                .collect();
            (
                Tensor::new(tx.shape(), zip_map(tx.values(), &mask, |a, m| a * m))?,
                mask,
            )
        };
        Ok(self.push(value, Op::Dropout(x, mask)))
    }

    /// 3D convolution of `x[Cin, W, H, D]` with `w[Cout, Cin, kw, kh, kd]`.
    pub fn conv3d(&self, x: Var, w: Var, b: Var, opts: Conv3dOpts) -> Result<Var> {
        let (value, geom) = {
            let nodes = self.nodes.borrow();
            let (tx, tw, tb) = (&nodes[x.0].value, &nodes[w.0].value, &nodes[b.0].value);
            let [cin, iw, ih, id] = dims4(tx.shape())?;
            let &[cout, wcin, kw, kh, kd] = tw.shape() else {
                return Err(Error::shape(format!(
                    "conv3d weight must be [Cout, Cin, kw, kh, kd], got {:?}",
                    tw.shape()
                )));
            };
            if wcin != cin {
                return Err(Error::shape(format!(
                    "conv3d weight expects {wcin} input channels, input has {cin}"
                )));
            }
            if tb.len() != cout {
                return Err(Error::shape(format!(
                    "conv3d bias {:?} for {cout} output channels",
                    tb.shape()
                )));
            }
            if opts.stride.contains(&0) {
                return Err(Error::shape("conv3d stride must be positive"));
            }
            let input = [iw, ih, id];
            let kernel = [kw, kh, kd];
            let mut output = [0; 3];
            for a in 0..3 {
                let padded = input[a] + 2 * opts.pad[a];
                if kernel[a] > padded {
                    return Err(Error::KernelTooLarge {
                        kernel: kernel.to_vec(),
                        input: input.iter().zip(opts.pad).map(|(i, p)| i + 2 * p).collect(),
                    });
                }
                output[a] = (padded - kernel[a]) / opts.stride[a] + 1;
            }
            let geom = ConvGeom {
                cin,
                cout,
                input,
                kernel,
                stride: opts.stride,
                pad: opts.pad,
                output,
            };
            let v = conv::forward(&geom, tx.values(), tw.values(), tb.values());
            (
                Tensor::new([cout, output[0], output[1], output[2]], v)?,
                geom,
            )
        };
        Ok(self.push(value, Op::Conv3d(x, w, b, geom)))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let (value, split) = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            if axis >= ta.rank() || len == 0 || start + len > ta.shape()[axis] {
                return Err(Error::shape(format!(
                    "narrow axis {axis} [{start}, {}) of {:?}",
                    start + len,
                    ta.shape()
                )));
            }
            let s = AxisSplit::new(ta.shape(), axis);
            let mut v = Vec::with_capacity(s.outer * len * s.inner);
            for o in 0..s.outer {
                let base = (o * s.len + start) * s.inner;
                v.extend_from_slice(&ta.values()[base..base + len * s.inner]);
            }
            let mut shape = ta.shape().to_vec();
            shape[axis] = len;
            (Tensor::new(shape, v)?, s)
        };
        Ok(self.push(value, Op::Narrow(a, split, start, len)))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let (value, meta, outer, inner) = {
            let nodes = self.nodes.borrow();
            let first = &nodes[parts[0].0].value;
            if axis >= first.rank() {
                return Err(Error::shape(format!("concat axis {axis} of {:?}", first.shape())));
            }
            let mut shape = first.shape().to_vec();
            let mut meta = Vec::with_capacity(parts.len());
            let mut total = 0;
            for &p in parts {
                let t = &nodes[p.0].value;
                let compatible = t.rank() == shape.len()
                    && t
                        .shape()
                        .iter()
                        .zip(&shape)
                        .enumerate()
                        .all(|(i, (a, b))| i == axis || a == b);
                if !compatible {
                    return Err(Error::shape(format!(
                        "concat {:?} onto {:?} along {axis}",
                        t.shape(),
                        shape
                    )));
                }
                meta.push((p, t.shape()[axis]));
                total += t.shape()[axis];
            }
            shape[axis] = total;
            let s = AxisSplit::new(&shape, axis);
            let mut v = Vec::with_capacity(shape.iter().product());
            for o in 0..s.outer {
                for &(p, len) in &meta {
                    let t = nodes[p.0].value.values();
                    v.extend_from_slice(&t[o * len * s.inner..(o + 1) * len * s.inner]);
                }
            }
            (Tensor::new(shape, v)?, meta, s.outer, s.inner)
        };
        Ok(self.push(value, Op::Concat(meta, outer, inner)))
    }

    /// Broadcasts `a[C, L]` into `[C, W, H, D]`, where `L` is the extent of
    /// spatial `axis` and the other two spatial axes are constant copies.
    pub fn expand_axis(&self, a: Var, axis: usize, spatial: [usize; 3]) -> Result<Var> {
        let value = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let &[c, l] = ta.shape() else {
                return Err(Error::shape(format!(
                    "expand_axis needs [C, L], got {:?}",
                    ta.shape()
                )));
            };
            if axis > 2 || spatial[axis] != l {
                return Err(Error::shape(format!(
                    "expand_axis: length {l} does not match spatial {spatial:?} on axis {axis}"
                )));
            }
            let [w, h, d] = spatial;
            let src = ta.values();
            let mut v = Vec::with_capacity(c * w * h * d);
            for ch in 0..c {
                for i in 0..w {
                    for j in 0..h {
                        for k in 0..d {
                            let idx = [i, j, k][axis];
                            v.push(src[ch * l + idx]);
                        }
                    }
                }
            }
            Tensor::new([c, w, h, d], v)?
        };
        Ok(self.push(value, Op::ExpandAxis(a, axis, spatial)))
    }

    /// Nearest-neighbour upsampling of `[C, W, H, D]` by integer factors.
    pub fn upsample_nearest(&self, a: Var, factors: [usize; 3]) -> Result<Var> {
        let (value, dims) = {
            let nodes = self.nodes.borrow();
            let ta = &nodes[a.0].value;
            let dims = dims4(ta.shape())?;
            let [c, w, h, d] = dims;
            if factors.contains(&0) {
                return Err(Error::shape("upsample factor must be positive"));
            }
            let [fw, fh, fd] = factors;
            let (ow, oh, od) = (w * fw, h * fh, d * fd);
            let src = ta.values();
            let mut v = Vec::with_capacity(c * ow * oh * od);
            for ch in 0..c {
                for i in 0..ow {
                    for j in 0..oh {
                        let base = ((ch * w + i / fw) * h + j / fh) * d;
                        v.extend((0..od).map(|k| src[base + k / fd]));
                    }
                }
            }
            (Tensor::new([c, ow, oh, od], v)?, dims)
        };
        Ok(self.push(value, Op::Upsample(a, dims, factors)))
    }

    /// Backpropagates from a scalar root, accumulating into leaf gradients.
    pub fn backward(&self, root: Var) -> Result<()> {
        let nodes = self.nodes.borrow();
        let root_shape = nodes[root.0].value.shape();
        if nodes[root.0].value.len() != 1 {
            return Err(Error::NotScalar(root_shape.to_vec()));
        }
        let mut local: Vec<Option<Vec<f64>>> = Vec::new();
        local.resize_with(root.0 + 1, || None);
        local[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = local[id].take() else { continue };
            if let Op::Leaf = node.op {
                local[id] = Some(g);
                continue;
            }
            backprop_node(&nodes, node, &g, &mut local);
        }

        let mut grads = self.grads.borrow_mut();
        if grads.len() < nodes.len() {
            grads.resize_with(nodes.len(), || None);
        }
        for (id, g) in local.into_iter().enumerate() {
            if let (Some(g), Op::Leaf) = (g, &nodes[id].op) {
                match &mut grads[id] {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    slot => *slot = Some(g),
                }
            }
        }
        Ok(())
    }
}

fn accumulate(local: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, g: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut local[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, b)| *a += b),
        slot => *slot = Some(g),
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], local: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| nodes[v.0].value.values();
    let needs = |v: Var| nodes[v.0].requires_grad;
    let mut acc = |v: Var, grad: Vec<f64>| accumulate(local, nodes, v, grad);
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            acc(*a, g.to_vec());
            acc(*b, g.to_vec());
        }
        Op::Sub(a, b) => {
            acc(*a, g.to_vec());
            acc(*b, g.iter().map(|x| -x).collect());
        }
        Op::Mul(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if needs(*a) {
                acc(*a, zip_map(g, vb, |g, y| g * y));
            }
            if needs(*b) {
                acc(*b, zip_map(g, va, |g, x| g * x));
            }
        }
        Op::Div(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if needs(*a) {
                acc(*a, zip_map(g, vb, |g, y| g / y));
            }
            if needs(*b) {
                let gb = g
                    .iter()
                    .zip(va.iter().zip(vb))
                    .map(|(g, (x, y))| -g * x / (y * y))
                    .collect();
                acc(*b, gb);
            }
        }
        Op::SafeDiv(a, b) => {
            let (va, vb) = (val(*a), val(*b));
            if needs(*a) {
                acc(*a, zip_map(g, vb, |g, y| if y == 0.0 { 0.0 } else { g / y }));
            }
            if needs(*b) {
                let gb = g
                    .iter()
                    .zip(va.iter().zip(vb))
                    .map(|(g, (x, y))| if *y == 0.0 { 0.0 } else { -g * x / (y * y) })
                    .collect();
                acc(*b, gb);
            }
        }
        Op::Scale(a, c) => acc(*a, g.iter().map(|x| x * c).collect()),
        Op::AddScalar(a) => acc(*a, g.to_vec()),
        Op::AddRow(x, b) => {
            let n = val(*b).len();
            acc(*x, g.to_vec());
            if needs(*b) {
                let mut gb = vec![0.0; n];
                for r in g.chunks(n) {
                    gb.iter_mut().zip(r).for_each(|(a, v)| *a += v);
                }
                acc(*b, gb);
            }
        }
        Op::Matmul(a, b, m, k, n) => {
            let (m, k, n) = (*m, *k, *n);
            if needs(*a) {
                let bt = transpose_raw(val(*b), k, n);
                acc(*a, matmul_raw(g, &bt, m, n, k));
            }
            if needs(*b) {
                let at = transpose_raw(val(*a), m, k);
                acc(*b, matmul_raw(&at, g, k, m, n));
            }
        }
        Op::Transpose(a, m, n) => acc(*a, transpose_raw(g, *n, *m)),
        Op::Reshape(a) => acc(*a, g.to_vec()),
        Op::Softmax(a, s) => {
            let y = node.value.values();
            let mut gx = vec![0.0; y.len()];
            for o in 0..s.outer {
                for i in 0..s.inner {
                    let idx = |j: usize| (o * s.len + j) * s.inner + i;
                    let dot: f64 = (0..s.len).map(|j| g[idx(j)] * y[idx(j)]).sum();
                    for j in 0..s.len {
                        gx[idx(j)] = y[idx(j)] * (g[idx(j)] - dot);
                    }
                }
            }
            acc(*a, gx);
        }
        Op::LogClamp(a) => {
            let gx = zip_map(g, val(*a), |g, x| if x > LOG_CLAMP { g / x } else { 0.0 });
            acc(*a, gx);
        }
        Op::Sum(a) => acc(*a, vec![g[0]; val(*a).len()]),
        Op::SumLastDim(a, n) => {
            let gx = g.iter().flat_map(|&v| std::iter::repeat_n(v, *n)).collect();
            acc(*a, gx);
        }
        Op::LeakyRelu(a, slope) => {
            let gx = zip_map(g, val(*a), |g, x| if x > 0.0 { g } else { slope * g });
            acc(*a, gx);
        }
        Op::RowNorm {
            x,
            xhat,
            inv_std,
            row,
        } => {
            let n = *row as f64;
            let mut gx = vec![0.0; g.len()];
            for (r, inv) in inv_std.iter().enumerate() {
                let span = r * row..(r + 1) * row;
                let (gr, xr) = (&g[span.clone()], &xhat[span.clone()]);
                let sum_g: f64 = gr.iter().sum();
                let sum_gx: f64 = gr.iter().zip(xr).map(|(a, b)| a * b).sum();
                for ((o, gv), xv) in gx[span].iter_mut().zip(gr).zip(xr) {
                    *o = inv / n * (n * gv - sum_g - xv * sum_gx);
                }
            }
            acc(*x, gx);
        }
        Op::RowAffine {
            x,
            gamma,
            beta,
            per_row,
            row,
        } => {
            let gam = val(*gamma);
            let coef = |i: usize| if *per_row { i / row } else { i % row };
            if needs(*x) {
                acc(*x, g.iter().enumerate().map(|(i, gv)| gv * gam[coef(i)]).collect());
            }
            let xv = val(*x);
            let mut gg = vec![0.0; gam.len()];
            let mut gb = vec![0.0; gam.len()];
            for (i, gv) in g.iter().enumerate() {
                gg[coef(i)] += gv * xv[i];
                gb[coef(i)] += gv;
            }
            acc(*gamma, gg);
            acc(*beta, gb);
        }
        Op::Dropout(a, mask) => acc(*a, zip_map(g, mask, |g, m| g * m)),
        Op::Conv3d(x, w, b, geom) => {
            if needs(*x) {
                acc(*x, conv::grad_input(geom, g, val(*w)));
            }
            if needs(*w) {
                acc(*w, conv::grad_weight(geom, g, val(*x)));
            }
            if needs(*b) {
                acc(*b, conv::grad_bias(geom, g));
            }
        }
        Op::Narrow(a, s, start, len) => {
            let mut gx = vec![0.0; s.outer * s.len * s.inner];
            let chunk = len * s.inner;
            for o in 0..s.outer {
                let base = (o * s.len + start) * s.inner;
                gx[base..base + chunk].copy_from_slice(&g[o * chunk..(o + 1) * chunk]);
            }
            acc(*a, gx);
        }
        Op::Concat(parts, outer, inner) => {
            let total: usize = parts.iter().map(|(_, l)| l).sum();
            let mut offset = 0;
            for &(p, len) in parts {
                if needs(p) {
                    let mut gp = Vec::with_capacity(outer * len * inner);
                    for o in 0..*outer {
                        let base = (o * total + offset) * inner;
                        gp.extend_from_slice(&g[base..base + len * inner]);
                    }
                    acc(p, gp);
                }
                offset += len;
            }
        }
        Op::ExpandAxis(a, axis, spatial) => {
            let [w, h, d] = *spatial;
            let l = spatial[*axis];
            let c = g.len() / (w * h * d);
            let mut gx = vec![0.0; c * l];
            let mut it = g.iter();
            for ch in 0..c {
                for i in 0..w {
                    for j in 0..h {
                        for k in 0..d {
                            gx[ch * l + [i, j, k][*axis]] += it.next().unwrap();
                        }
                    }
                }
            }
            acc(*a, gx);
        }
        Op::Upsample(a, dims, factors) => {
            let [c, w, h, d] = *dims;
            let [fw, fh, fd] = *factors;
            let (ow, oh, od) = (w * fw, h * fh, d * fd);
            let mut gx = vec![0.0; c * w * h * d];
            let mut it = g.iter();
            for ch in 0..c {
                for i in 0..ow {
                    for j in 0..oh {
                        let base = ((ch * w + i / fw) * h + j / fh) * d;
                        for k in 0..od {
                            gx[base + k / fd] += it.next().unwrap();
                        }
                    }
                }
            }
            acc(*a, gx);
        }
    }
}
