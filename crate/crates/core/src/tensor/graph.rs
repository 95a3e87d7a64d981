use std::cell::Cell;

use super::kernels::{self, ConvGeom};
use super::{strides, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that issued it.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryOp {
    Neg,
    Silu,
    Sigmoid,
    Exp,
    Log,
    Atan,
    Softplus,
    Relu,
    Sqrt,
    Square,
    Abs,
}

impl UnaryOp {
    fn apply(self, x: f64) -> f64 {
        match self {
            UnaryOp::Neg => -x,
            UnaryOp::Silu => x * sigmoid(x),
            UnaryOp::Sigmoid => sigmoid(x),
            UnaryOp::Exp => x.exp(),
            UnaryOp::Log => x.ln(),
            UnaryOp::Atan => x.atan(),
            UnaryOp::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            UnaryOp::Relu => x.max(0.0),
            UnaryOp::Sqrt => x.sqrt(),
            UnaryOp::Square => x * x,
            UnaryOp::Abs => x.abs(),
        }
    }

    /// dy/dx given input `x` and output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryOp::Neg => -1.0,
            UnaryOp::Silu => {
                let s = sigmoid(x);
                s + x * s * (1.0 - s)
            }
            UnaryOp::Sigmoid => y * (1.0 - y),
            UnaryOp::Exp => y,
            UnaryOp::Log => 1.0 / x,
            UnaryOp::Atan => 1.0 / (1.0 + x * x),
            UnaryOp::Softplus => sigmoid(x),
            UnaryOp::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            UnaryOp::Sqrt => 0.5 / y,
            UnaryOp::Square => 2.0 * x,
            UnaryOp::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum BinaryOp {
    Add,
    Sub,
    Mul,
    Div,
    Max,
    Min,
}

/// Deliberately wrong backward rules, for verifying that gradient checking
/// catches a broken derivative. Test fixture only.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BackwardFault {
    Softmax,
    MatMul,
    Conv2d,
    LayerNorm,
}

thread_local! {
    static FAULT: Cell<Option<BackwardFault>> = const { Cell::new(None) };
}

/// Corrupt one backward rule on the current thread (`None` restores it).
#[doc(hidden)]
pub fn inject_backward_fault(fault: Option<BackwardFault>) {
    FAULT.with(|f| f.set(fault));
}

fn fault_scale(which: BackwardFault) -> f64 {
    if FAULT.with(|f| f.get()) == Some(which) {
        1.01
    } else {
        1.0
    }
}

#[derive(Debug)]
struct MatMulDims {
    batch: usize,
    a_shared: bool,
    b_shared: bool,
    m: usize,
    k: usize,
    n: usize,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Binary(BinaryOp, Var, Var),
    Unary(UnaryOp, Var),
    Scale(Var, f64),
    AddScalar(Var),
    AddBias {
        x: Var,
        bias: Var,
        axis: usize,
    },
    MatMul {
        a: Var,
        b: Var,
        dims: MatMulDims,
    },
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<f64>,
        rstd: Vec<f64>,
    },
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    },
    SumAll(Var),
    MeanAxis {
        x: Var,
        axis: usize,
    },
    UpsampleNearest {
        x: Var,
        factor: usize,
    },
    IndexSelect {
        x: Var,
        index: Vec<usize>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// A single-threaded computation tape.
///
/// Nodes are appended in execution order, which is also a topological order,
/// so backward is a reverse sweep over the node list.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
    backward_done: bool,
}

/// Split a shape around `axis` into `(outer, dim, inner)`.
fn around(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.backward_done = false;
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that receives a gradient on backward.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// A leaf excluded from differentiation.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, requires_grad: bool) -> Var {
        self.push(t, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward target w.r.t. `v`; zeros if `v` was not reached.
    pub fn grad(&self, v: Var) -> Tensor {
        let shape = self.shape(v).to_vec();
        match self.grads.get(v.0).and_then(|g| g.as_ref()) {
            Some(g) => Tensor::new(&shape, g.clone()).expect("grad shape"),
            None => Tensor::zeros(&shape),
        }
    }

    // ----- elementwise -----

    fn binary(&mut self, op: BinaryOp, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape() != bv.shape() {
            return Err(Error::dim(format!(
                "{op:?} needs equal shapes, got {:?} and {:?}",
                av.shape(),
                bv.shape()
            )));
        }
        let data: Vec<f64> = av
            .data()
            .iter()
            .zip(bv.data())
            .map(|(&x, &y)| match op {
                BinaryOp::Add => x + y,
                BinaryOp::Sub => x - y,
                BinaryOp::Mul => x * y,
                BinaryOp::Div => x / y,
                BinaryOp::Max => x.max(y),
                BinaryOp::Min => x.min(y),
            })
            .collect();
        let t = Tensor::new(av.shape(), data)?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Binary(op, a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Div, a, b)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Max, a, b)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryOp::Min, a, b)
    }

    pub fn unary(&mut self, op: UnaryOp, x: Var) -> Var {
        let xv = self.value(x);
        let data = xv.data().iter().map(|&v| op.apply(v)).collect();
        let t = Tensor::new(xv.shape(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(t, Op::Unary(op, x), rg)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Silu, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(UnaryOp::Sigmoid, x)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape(), xv.data().iter().map(|v| v * c).collect()).unwrap();
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, c), rg)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let xv = self.value(x);
        let t = Tensor::new(xv.shape(), xv.data().iter().map(|v| v + c).collect()).unwrap();
        let rg = self.rg(x);
        self.push(t, Op::AddScalar(x), rg)
    }

    /// Add a 1-D `bias` along `axis` of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let bs = self.shape(bias).to_vec();
        if axis >= xs.len() || bs.len() != 1 || bs[0] != xs[axis] {
            return Err(Error::dim(format!("bias {bs:?} does not match axis {axis} of {xs:?}")));
        }
        let (outer, dim, inner) = around(&xs, axis);
        let mut data = self.value(x).data().to_vec();
        let b = self.value(bias).data();
        for o in 0..outer {
            for d in 0..dim {
                let base = (o * dim + d) * inner;
                data[base..base + inner].iter_mut().for_each(|v| *v += b[d]);
            }
        }
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Tensor::new(&xs, data)?, Op::AddBias { x, bias, axis }, rg))
    }

    // ----- linear algebra -----

    /// Batched matrix product `[..,M,K] x [..,K,N]`. A rank-2 operand is
    /// shared across the other operand's leading dims; otherwise leading
    /// dims must match exactly.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let err = || Error::dim(format!("matmul shape mismatch: {sa:?} x {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(err());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(err());
        }
        let lead_a = &sa[..sa.len() - 2];
        let lead_b = &sb[..sb.len() - 2];
        let (lead, a_shared, b_shared) = if lead_a == lead_b {
            (lead_a.to_vec(), false, false)
        } else if lead_a.is_empty() {
            (lead_b.to_vec(), true, false)
        } else if lead_b.is_empty() {
            (lead_a.to_vec(), false, true)
        } else {
            return Err(err());
        };
        let batch: usize = lead.iter().product();
        let mut out = vec![0.0; batch * m * n];
        {
            let av = self.value(a).data();
            let bv = self.value(b).data();
            for bi in 0..batch {
                let ao = if a_shared { 0 } else { bi * m * k };
                let bo = if b_shared { 0 } else { bi * k * n };
                kernels::gemm_nn(
                    &av[ao..ao + m * k],
                    &bv[bo..bo + k * n],
                    &mut out[bi * m * n..(bi + 1) * m * n],
                    m,
                    k,
                    n,
                );
            }
        }
        let mut shape = lead;
        shape.extend([m, n]);
        let rg = self.rg(a) || self.rg(b);
        let dims = MatMulDims {
            batch,
            a_shared,
            b_shared,
            m,
            k,
            n,
        };
        Ok(self.push(Tensor::new(&shape, out)?, Op::MatMul { a, b, dims }, rg))
    }

    /// `x @ w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => {
                let axis = self.shape(y).len() - 1;
                self.add_bias(y, b, axis)
            }
            None => Ok(y),
        }
    }

    // ----- layout -----

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let mut seen = vec![false; xs.len()];
        if axes.len() != xs.len()
            || axes
                .iter()
                .any(|&a| a >= xs.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::dim(format!("invalid permutation {axes:?} for shape {xs:?}")));
        }
        let out_shape: Vec<usize> = axes.iter().map(|&a| xs[a]).collect();
        let data = permute_data(self.value(x).data(), &xs, axes);
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&out_shape, data)?,
            Op::Permute { x, axes: axes.to_vec() },
            rg,
        ))
    }

    pub fn transpose(&mut self, x: Var, a: usize, b: usize) -> Result<Var> {
        let mut axes: Vec<usize> = (0..self.shape(x).len()).collect();
        if a >= axes.len() || b >= axes.len() {
            return Err(Error::dim(format!("transpose axes {a},{b} out of range")));
        }
        axes.swap(a, b);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or_else(|| Error::dim("concat of zero tensors"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::dim(format!("concat axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let ok = s.len() == base.len() && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !ok {
                return Err(Error::dim(format!(
                    "concat along axis {axis}: {:?} incompatible with {base:?}",
                    s
                )));
            }
            total += s[axis];
        }
        let mut shape = base.clone();
        shape[axis] = total;
        let (outer, _, inner) = around(&shape, axis);
        let mut data = Vec::with_capacity(shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let d = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * d * inner..(o + 1) * d * inner]);
            }
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            Tensor::new(&shape, data)?,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() || len == 0 || start + len > xs[axis] {
            return Err(Error::dim(format!(
                "slice [{start}, {}) on axis {axis} out of range for {xs:?}",
                start + len
            )));
        }
        let (outer, dim, inner) = around(&xs, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let b = (o * dim + start) * inner;
            data.extend_from_slice(&src[b..b + len * inner]);
        }
        let mut shape = xs;
        shape[axis] = len;
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Slice { x, axis, start }, rg))
    }

    pub fn split(&mut self, x: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let dim = *self
            .shape(x)
            .get(axis)
            .ok_or_else(|| Error::dim(format!("split axis {axis} out of range")))?;
        if sizes.iter().sum::<usize>() != dim {
            return Err(Error::dim(format!("split sizes {sizes:?} do not sum to {dim}")));
        }
        let mut start = 0;
        let mut out = Vec::with_capacity(sizes.len());
        for &s in sizes {
            out.push(self.slice(x, axis, start, s)?);
            start += s;
        }
        Ok(out)
    }

    /// Rows of a rank-2 tensor, in `index` order.
    pub fn index_select(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 2 || index.is_empty() || index.iter().any(|&i| i >= xs[0]) {
            return Err(Error::dim(format!(
                "index_select needs a rank-2 tensor and in-range rows, got {xs:?}"
            )));
        }
        let d = xs[1];
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * d);
        for &i in index {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[index.len(), d], data)?,
            Op::IndexSelect {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Nearest-neighbour upsampling of a `[B,C,H,W]` map: every pixel becomes a
    /// `factor x factor` constant block.
    pub fn upsample_nearest(&mut self, x: Var, factor: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || factor == 0 {
            return Err(Error::dim(format!("upsample needs [B,C,H,W], got {xs:?}")));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (h * factor, w * factor);
        let src = self.value(x).data();
        let mut data = vec![0.0; planes * oh * ow];
        for p in 0..planes {
            for oy in 0..oh {
                let srow = &src[(p * h + oy / factor) * w..(p * h + oy / factor + 1) * w];
                let drow = &mut data[(p * oh + oy) * ow..(p * oh + oy + 1) * ow];
                for (ox, d) in drow.iter_mut().enumerate() {
                    *d = srow[ox / factor];
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(
            Tensor::new(&[xs[0], xs[1], oh, ow], data)?,
            Op::UpsampleNearest { x, factor },
            rg,
        ))
    }

    // ----- reductions and normalisation -----

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).data().iter().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum_all(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over `axis`, dropping that axis (a rank-1 input yields shape `[1]`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::dim(format!("mean axis {axis} out of range for {xs:?}")));
        }
        let (outer, dim, inner) = around(&xs, axis);
        let src = self.value(x).data();
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for d in 0..dim {
                let b = (o * dim + d) * inner;
                for i in 0..inner {
                    data[o * inner + i] += src[b + i];
                }
            }
        }
        let inv = 1.0 / dim as f64;
        data.iter_mut().for_each(|v| *v *= inv);
        let mut shape: Vec<usize> = xs
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != axis)
            .map(|(_, &d)| d)
            .collect();
        if shape.is_empty() {
            shape.push(1);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&shape, data)?, Op::MeanAxis { x, axis }, rg))
    }

    /// Numerically stable softmax along `axis` (max-subtracted).
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if axis >= xs.len() {
            return Err(Error::dim(format!("softmax axis {axis} out of range for {xs:?}")));
        }
        let (outer, dim, inner) = around(&xs, axis);
        let mut data = self.value(x).data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let at = |d: usize| (o * dim + d) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for d in 0..dim {
                    mx = mx.max(data[at(d)]);
                }
                let mut sum = 0.0;
                for d in 0..dim {
                    let e = (data[at(d)] - mx).exp();
                    data[at(d)] = e;
                    sum += e;
                }
                for d in 0..dim {
                    data[at(d)] /= sum;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::new(&xs, data)?, Op::Softmax { x, axis }, rg))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 || !eps.is_finite() {
            return Err(Error::config(format!("layer norm eps must be > 0, got {eps}")));
        }
        let xs = self.shape(x).to_vec();
        let c = *xs.last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::dim(format!(
                "layer norm affine params {:?}/{:?} do not match channel dim {c}",
                self.shape(gamma),
                self.shape(beta)
            )));
        }
        let rows = self.value(x).len() / c;
        let src = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut data = vec![0.0; src.len()];
        let mut mean = vec![0.0; rows];
        let mut rstd = vec![0.0; rows];
        for r in 0..rows {
            let row = &src[r * c..(r + 1) * c];
            let mu = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / c as f64;
            let rs = 1.0 / (var + eps).sqrt();
            mean[r] = mu;
            rstd[r] = rs;
            for j in 0..c {
                data[r * c + j] = (row[j] - mu) * rs * g[j] + b[j];
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Tensor::new(&xs, data)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            },
            rg,
        ))
    }

    /// 2-D cross-correlation: `x [B,C,H,W]`, `w [O,C,k,k]`, optional `bias [O]`.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] || stride == 0 {
            return Err(Error::dim(format!(
                "conv2d expects x [B,C,H,W] and w [O,C,k,k]; got {xs:?} and {ws:?}"
            )));
        }
        let k = ws[2];
        if k > xs[2] + 2 * padding || k > xs[3] + 2 * padding {
            return Err(Error::dim(format!(
                "kernel {k}x{k} larger than padded input {:?} (padding {padding})",
                &xs[2..]
            )));
        }
        if let Some(b) = bias {
            if self.shape(b) != [ws[0]] {
                return Err(Error::dim(format!(
                    "conv bias {:?} does not match {} output channels",
                    self.shape(b),
                    ws[0]
                )));
            }
        }
        let geom = ConvGeom {
            channels: xs[1],
            height: xs[2],
            width: xs[3],
            kernel: k,
            stride,
            padding,
            out_h: (xs[2] + 2 * padding - k) / stride + 1,
            out_w: (xs[3] + 2 * padding - k) / stride + 1,
        };
        let (batch, o) = (xs[0], ws[0]);
        let (rows, plane) = (geom.col_rows(), geom.col_cols());
        let in_sz = geom.channels * geom.height * geom.width;
        let mut out = vec![0.0; batch * o * plane];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut cols = if geom.is_pointwise() {
            Vec::new()
        } else {
            vec![0.0; rows * plane]
        };
        for bi in 0..batch {
            let img = &xv[bi * in_sz..(bi + 1) * in_sz];
            let dst = &mut out[bi * o * plane..(bi + 1) * o * plane];
            if geom.is_pointwise() {
                kernels::gemm_nn(wv, img, dst, o, rows, plane);
            } else {
                kernels::im2col(img, &geom, &mut cols);
                kernels::gemm_nn(wv, &cols, dst, o, rows, plane);
            }
            if let Some(b) = bias {
                let bv = self.value(b).data();
                for oc in 0..o {
                    dst[oc * plane..(oc + 1) * plane].iter_mut().for_each(|v| *v += bv[oc]);
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || bias.is_some_and(|b| self.rg(b));
        Ok(self.push(
            Tensor::new(&[batch, o, geom.out_h, geom.out_w], out)?,
            Op::Conv2d { x, w, bias, geom },
            rg,
        ))
    }

    // ----- backward -----

    /// Reverse sweep from the scalar `loss`.
    ///
    /// A second call without recording new ops in between is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Tape(
                "backward already ran on this tape; record a new forward pass first".into(),
            ));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Usage(format!(
                "backward target must be a scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(gout) = grads[i].take() else {
                continue;
            };
            self.backprop(i, &gout, &mut grads);
            grads[i] = Some(gout);
        }
        self.grads = grads;
        self.backward_done = true;
        Ok(())
    }

    fn backprop(&self, i: usize, gout: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let nodes = &self.nodes;
        let slot = |grads: &mut [Option<Vec<f64>>], v: Var| -> bool {
            if !nodes[v.0].requires_grad {
                return false;
            }
            if grads[v.0].is_none() {
                grads[v.0] = Some(vec![0.0; nodes[v.0].value.len()]);
            }
            true
        };
        let val = |v: Var| nodes[v.0].value.data();
        let out = nodes[i].value.data();

        match &nodes[i].op {
            Op::Leaf => {}
            Op::Binary(op, a, b) => {
                let (av, bv) = (val(*a), val(*b));
                if slot(grads, *a) {
                    let ga = grads[a.0].as_mut().unwrap();
                    for j in 0..gout.len() {
                        ga[j] += gout[j]
                            * match op {
                                BinaryOp::Add | BinaryOp::Sub => 1.0,
                                BinaryOp::Mul => bv[j],
                                BinaryOp::Div => 1.0 / bv[j],
                                BinaryOp::Max => f64::from(u8::from(av[j] >= bv[j])),
                                BinaryOp::Min => f64::from(u8::from(av[j] <= bv[j])),
                            };
                    }
                }
                if slot(grads, *b) {
                    let gb = grads[b.0].as_mut().unwrap();
                    for j in 0..gout.len() {
                        gb[j] += gout[j]
                            * match op {
                                BinaryOp::Add => 1.0,
                                BinaryOp::Sub => -1.0,
                                BinaryOp::Mul => av[j],
                                BinaryOp::Div => -av[j] / (bv[j] * bv[j]),
                                BinaryOp::Max => f64::from(u8::from(av[j] < bv[j])),
                                BinaryOp::Min => f64::from(u8::from(av[j] > bv[j])),
                            };
                    }
                }
            }
            Op::Unary(op, x) => {
                if slot(grads, *x) {
                    let xv = val(*x);
                    let gx = grads[x.0].as_mut().unwrap();
                    for j in 0..gout.len() {
                        gx[j] += gout[j] * op.derivative(xv[j], out[j]);
                    }
                }
            }
            Op::Scale(x, c) => {
                if slot(grads, *x) {
                    let gx = grads[x.0].as_mut().unwrap();
                    gx.iter_mut().zip(gout).for_each(|(g, o)| *g += o * c);
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if slot(grads, *x) {
                    let gx = grads[x.0].as_mut().unwrap();
                    gx.iter_mut().zip(gout).for_each(|(g, o)| *g += o);
                }
            }
            Op::AddBias { x, bias, axis } => {
                if slot(grads, *x) {
                    let gx = grads[x.0].as_mut().unwrap();
                    gx.iter_mut().zip(gout).for_each(|(g, o)| *g += o);
                }
                if slot(grads, *bias) {
                    let (outer, dim, inner) = around(nodes[i].value.shape(), *axis);
                    let gb = grads[bias.0].as_mut().unwrap();
                    for o in 0..outer {
                        for d in 0..dim {
                            let base = (o * dim + d) * inner;
                            gb[d] += gout[base..base + inner].iter().sum::<f64>();
                        }
                    }
                }
            }
            Op::MatMul { a, b, dims } => {
                let MatMulDims {
                    batch,
                    a_shared,
                    b_shared,
                    m,
                    k,
                    n,
                } = *dims;
                let f = fault_scale(BackwardFault::MatMul);
                if slot(grads, *a) {
                    let bv = val(*b);
                    let ga = grads[a.0].as_mut().unwrap();
                    for bi in 0..batch {
                        let ao = if a_shared { 0 } else { bi * m * k };
                        let bo = if b_shared { 0 } else { bi * k * n };
                        kernels::gemm_nt(
                            &gout[bi * m * n..(bi + 1) * m * n],
                            &bv[bo..bo + k * n],
                            &mut ga[ao..ao + m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    if f != 1.0 {
                        ga.iter_mut().for_each(|g| *g *= f);
                    }
                }
                if slot(grads, *b) {
                    let av = val(*a);
                    let gb = grads[b.0].as_mut().unwrap();
                    for bi in 0..batch {
                        let ao = if a_shared { 0 } else { bi * m * k };
                        let bo = if b_shared { 0 } else { bi * k * n };
                        kernels::gemm_tn(
                            &av[ao..ao + m * k],
                            &gout[bi * m * n..(bi + 1) * m * n],
                            &mut gb[bo..bo + k * n],
                            m,
                            k,
                            n,
                        );
                    }
                }
            }
            Op::Permute { x, axes } => {
                if slot(grads, *x) {
                    let mut inv = vec![0; axes.len()];
                    for (i, &a) in axes.iter().enumerate() {
                        inv[a] = i;
                    }
                    let back = permute_data(gout, nodes[i].value.shape(), &inv);
                    let gx = grads[x.0].as_mut().unwrap();
                    gx.iter_mut().zip(&back).for_each(|(g, o)| *g += o);
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = around(nodes[i].value.shape(), *axis);
                let total = nodes[i].value.shape()[*axis];
                let mut offset = 0;
                for &p in parts {
                    let d = nodes[p.0].value.shape()[*axis];
                    if slot(grads, p) {
                        let gp = grads[p.0].as_mut().unwrap();
                        for o in 0..outer {
                            let src = (o * total + offset) * inner;
                            let dst = o * d * inner;
                            for j in 0..d * inner {
                                gp[dst + j] += gout[src + j];
                            }
                        }
                    }
                    offset += d;
                }
            }
            Op::Slice { x, axis, start } => {
                if slot(grads, *x) {
                    let xs = nodes[x.0].value.shape();
                    let (outer, dim, inner) = around(xs, *axis);
                    let len = nodes[i].value.shape()[*axis];
                    let gx = grads[x.0].as_mut().unwrap();
                    for o in 0..outer {
                        let dst = (o * dim + start) * inner;
                        let src = o * len * inner;
                        for j in 0..len * inner {
                            gx[dst + j] += gout[src + j];
                        }
                    }
                }
            }
            Op::IndexSelect { x, index } => {
                if slot(grads, *x) {
                    let d = nodes[x.0].value.shape()[1];
                    let gx = grads[x.0].as_mut().unwrap();
                    for (r, &src_row) in index.iter().enumerate() {
                        for j in 0..d {
                            gx[src_row * d + j] += gout[r * d + j];
                        }
                    }
                }
            }
            Op::UpsampleNearest { x, factor } => {
                if slot(grads, *x) {
                    let xs = nodes[x.0].value.shape();
                    let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
                    let (oh, ow) = (h * factor, w * factor);
                    let gx = grads[x.0].as_mut().unwrap();
                    for p in 0..planes {
                        for oy in 0..oh {
                            for ox in 0..ow {
                                gx[(p * h + oy / factor) * w + ox / factor] += gout[(p * oh + oy) * ow + ox];
                            }
                        }
                    }
                }
            }
            Op::SumAll(x) => {
                if slot(grads, *x) {
                    let g = gout[0];
                    grads[x.0].as_mut().unwrap().iter_mut().for_each(|v| *v += g);
                }
            }
            Op::MeanAxis { x, axis } => {
                if slot(grads, *x) {
                    let (outer, dim, inner) = around(nodes[x.0].value.shape(), *axis);
                    let inv = 1.0 / dim as f64;
                    let gx = grads[x.0].as_mut().unwrap();
                    for o in 0..outer {
                        for d in 0..dim {
                            let b = (o * dim + d) * inner;
                            for j in 0..inner {
                                gx[b + j] += gout[o * inner + j] * inv;
                            }
                        }
                    }
                }
            }
            Op::Softmax { x, axis } => {
                if slot(grads, *x) {
                    let (outer, dim, inner) = around(nodes[i].value.shape(), *axis);
                    let f = fault_scale(BackwardFault::Softmax);
                    let gx = grads[x.0].as_mut().unwrap();
                    for o in 0..outer {
                        for j in 0..inner {
                            let at = |d: usize| (o * dim + d) * inner + j;
                            let mut s = 0.0;
                            for d in 0..dim {
                                s += gout[at(d)] * out[at(d)];
                            }
                            for d in 0..dim {
                                gx[at(d)] += f * out[at(d)] * (gout[at(d)] - s);
                            }
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let c = *nodes[x.0].value.shape().last().unwrap();
                let rows = mean.len();
                let xv = val(*x);
                let gv = val(*gamma);
                let xhat = |r: usize, j: usize| (xv[r * c + j] - mean[r]) * rstd[r];
                if slot(grads, *gamma) {
                    let gg = grads[gamma.0].as_mut().unwrap();
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] += gout[r * c + j] * xhat(r, j);
                        }
                    }
                }
                if slot(grads, *beta) {
                    let gb = grads[beta.0].as_mut().unwrap();
                    for r in 0..rows {
                        for j in 0..c {
                            gb[j] += gout[r * c + j];
                        }
                    }
                }
                if slot(grads, *x) {
                    let f = fault_scale(BackwardFault::LayerNorm);
                    let gx = grads[x.0].as_mut().unwrap();
                    let inv_c = 1.0 / c as f64;
                    for r in 0..rows {
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..c {
                            let d = gout[r * c + j] * gv[j];
                            m1 += d;
                            m2 += d * xhat(r, j);
                        }
                        m1 *= inv_c;
                        m2 *= inv_c;
                        for j in 0..c {
                            let d = gout[r * c + j] * gv[j];
                            gx[r * c + j] += f * rstd[r] * (d - m1 - xhat(r, j) * m2);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, bias, geom } => {
                let batch = nodes[x.0].value.shape()[0];
                let o = nodes[w.0].value.shape()[0];
                let (rows, plane) = (geom.col_rows(), geom.col_cols());
                let in_sz = geom.channels * geom.height * geom.width;
                let xv = val(*x);
                let wv = val(*w);
                let f = fault_scale(BackwardFault::Conv2d);
                if let Some(b) = bias {
                    if slot(grads, *b) {
                        let gb = grads[b.0].as_mut().unwrap();
                        for bi in 0..batch {
                            for oc in 0..o {
                                let s = (bi * o + oc) * plane;
                                gb[oc] += gout[s..s + plane].iter().sum::<f64>();
                            }
                        }
                    }
                }
                let want_w = slot(grads, *w);
                let want_x = slot(grads, *x);
                let mut cols = vec![0.0; if geom.is_pointwise() { 0 } else { rows * plane }];
                let mut dcols = cols.clone();
                for bi in 0..batch {
                    let img = &xv[bi * in_sz..(bi + 1) * in_sz];
                    let gy = &gout[bi * o * plane..(bi + 1) * o * plane];
                    if want_w {
                        let gw = grads[w.0].as_mut().unwrap();
                        if geom.is_pointwise() {
                            kernels::gemm_nt(gy, img, gw, o, plane, rows);
                        } else {
                            kernels::im2col(img, geom, &mut cols);
                            kernels::gemm_nt(gy, &cols, gw, o, plane, rows);
                        }
                    }
                    if want_x {
                        let gx = grads[x.0].as_mut().unwrap();
                        let gimg = &mut gx[bi * in_sz..(bi + 1) * in_sz];
                        if geom.is_pointwise() {
                            kernels::gemm_tn(wv, gy, gimg, o, rows, plane);
                        } else {
                            dcols.iter_mut().for_each(|v| *v = 0.0);
                            kernels::gemm_tn(wv, gy, &mut dcols, o, rows, plane);
                            kernels::col2im(&dcols, geom, gimg);
                        }
                    }
                }
                if want_w && f != 1.0 {
                    grads[w.0].as_mut().unwrap().iter_mut().for_each(|g| *g *= f);
                }
            }
        }
    }
}

/// Row-major data of `src` (shape `shape`) permuted so output axis `i` is input axis `axes[i]`.
fn permute_data(src: &[f64], shape: &[usize], axes: &[usize]) -> Vec<f64> {
    let rank = shape.len();
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let step: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let mut out = Vec::with_capacity(src.len());
    if rank == 0 {
        return src.to_vec();
    }
    let last = rank - 1;
    let mut idx = vec![0usize; rank];
    let mut base = 0usize;
    loop {
        let s = step[last];
        for j in 0..out_shape[last] {
            out.push(src[base + j * s]);
        }
        // advance the multi-index over all but the last axis
        let mut ax = last;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            base += step[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            base -= step[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}
