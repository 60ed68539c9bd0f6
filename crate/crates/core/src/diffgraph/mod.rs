//! Tape-style reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Graph`] records every operation as it is evaluated. Nodes are appended
//! in evaluation order, so the node index is already a topological order and
//! [`Graph::backward`] simply walks the tape from the root towards the leaves.
//! Tensors have rank 0 (scalar), 1 or 2; that is all the density criterion and
//! the encoder need.
//!
//! Elementwise binary operations require identical shapes. Broadcasting is an
//! explicit operation so that its gradient (a reduction) is visible on the tape.

mod gradcheck;
mod kernels;

pub use gradcheck::{grad_check, GradCheck, GradCheckReport};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Guard added to provably nonnegative denominators and log arguments.
pub const EPS: f64 = 1e-12;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OpKind {
    Leaf,
    Matmul,
    Add,
    Sub,
    Mul,
    Div,
    Tanh,
    Exp,
    Log,
    Abs,
    Sqrt,
    Sum,
    SumAxis,
    Mean,
    MeanAxis,
    Scale,
    Shift,
    Broadcast,
    Concat,
    Slice,
    Gather,
    Transpose,
    Gauss,
}

impl std::str::FromStr for OpKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        serde_json::from_value(serde_json::Value::String(s.to_owned()))
            .map_err(|_| Error::Config(format!("unknown operation kind '{s}'")))
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Matmul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Sqrt(Var),
    Sum(Var),
    SumAxis(Var, usize),
    Mean(Var),
    MeanAxis(Var, usize),
    Scale(Var, f64),
    Shift(Var),
    Broadcast(Var),
    Concat(Vec<Var>, usize),
    Slice {
        src: Var,
        axis: usize,
        start: usize,
    },
    Gather {
        src: Var,
        rows: Vec<usize>,
    },
    Transpose(Var),
    /// `N⁽ᵒʳᵈᵉʳ⁾(t − z; σ²)` for `t` a `P × 1` column and `z` a `1 × n` row.
    Gauss {
        at: Var,
        samples: Var,
        sigma: f64,
        order: u8,
    },
}

impl Op {
    fn kind(&self) -> OpKind {
        match self {
            Op::Leaf => OpKind::Leaf,
            Op::Matmul(..) => OpKind::Matmul,
            Op::Add(..) => OpKind::Add,
            Op::Sub(..) => OpKind::Sub,
            Op::Mul(..) => OpKind::Mul,
            Op::Div(..) => OpKind::Div,
            Op::Tanh(_) => OpKind::Tanh,
            Op::Exp(_) => OpKind::Exp,
            Op::Log(_) => OpKind::Log,
            Op::Abs(_) => OpKind::Abs,
            Op::Sqrt(_) => OpKind::Sqrt,
            Op::Sum(_) => OpKind::Sum,
            Op::SumAxis(..) => OpKind::SumAxis,
            Op::Mean(_) => OpKind::Mean,
            Op::MeanAxis(..) => OpKind::MeanAxis,
            Op::Scale(..) => OpKind::Scale,
            Op::Shift(..) => OpKind::Shift,
            Op::Broadcast(_) => OpKind::Broadcast,
            Op::Concat(..) => OpKind::Concat,
            Op::Slice { .. } => OpKind::Slice,
            Op::Gather { .. } => OpKind::Gather,
            Op::Transpose(_) => OpKind::Transpose,
            Op::Gauss { .. } => OpKind::Gauss,
        }
    }
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

/// Number of Gaussian kernel evaluations performed while building a graph.
///
/// `one_d` counts univariate kernels `N(t; z, σ²)`; `two_d` counts product
/// kernels `N((t, ζ); (z_i, z_j), σ²I)` realised through a contraction.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct KernelEvals {
    pub one_d: u64,
    pub two_d: u64,
}

impl std::ops::Sub for KernelEvals {
    type Output = KernelEvals;

    fn sub(self, rhs: Self) -> Self {
        KernelEvals {
            one_d: self.one_d - rhs.one_d,
            two_d: self.two_d - rhs.two_d,
        }
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    negated: Option<OpKind>,
    kernel_evals: KernelEvals,
}

/// `(rows, cols)` view of a rank ≤ 2 shape; rank 1 is a row vector.
fn dims2(shape: &[usize]) -> (usize, usize) {
    match shape {
        [] => (1, 1),
        [c] => (1, *c),
        [r, c] => (*r, *c),
        _ => unreachable!("rank checked on construction"),
    }
}

fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    /// A graph whose backward rule for `kind` is deliberately negated.
    /// Used as a negative control for gradient checking.
    pub fn with_negated_backward(kind: OpKind) -> Self {
        Graph {
            negated: Some(kind),
            ..Self::default()
        }
    }

    pub fn negated_backward(&self) -> Option<OpKind> {
        self.negated
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of a leaf; empty for intermediate nodes.
    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn op_kind(&self, v: Var) -> OpKind {
        self.nodes[v.0].op.kind()
    }

    /// Value of a single-element tensor.
    pub fn scalar(&self, v: Var) -> f64 {
        let node = &self.nodes[v.0];
        debug_assert_eq!(node.value.len(), 1);
        node.value[0]
    }

    pub fn kernel_evals(&self) -> KernelEvals {
        self.kernel_evals
    }

    /// Every input to an `abs` node, in tape order. `abs` and the entropies
    /// built on it are smooth only away from zeros of these values.
    pub fn abs_inputs(&self) -> Vec<f64> {
        self.nodes
            .iter()
            .filter_map(|node| match node.op {
                Op::Abs(a) => Some(&self.nodes[a.0].value),
                _ => None,
            })
            .flatten()
            .copied()
            .collect()
    }

    pub(crate) fn count_kernel_evals(&mut self, one_d: u64, two_d: u64) {
        self.kernel_evals.one_d += one_d;
        self.kernel_evals.two_d += two_d;
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    fn check_rank(op: &'static str, shape: &[usize]) -> Result<()> {
        if shape.len() > 2 {
            return Err(Error::InvalidShape {
                op,
                detail: format!("rank {} exceeds 2", shape.len()),
            });
        }
        Ok(())
    }

    fn push(&mut self, value: Vec<f64>, shape: Vec<usize>, op: Op) -> Var {
        debug_assert_eq!(value.len(), numel(&shape));
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Matmul(a, b) | Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad
            }
            Op::Concat(parts, _) => parts.iter().any(|p| self.nodes[p.0].requires_grad),
            Op::Gauss { at, samples, .. } => {
                self.nodes[at.0].requires_grad || self.nodes[samples.0].requires_grad
            }
            Op::Tanh(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Abs(a)
            | Op::Sqrt(a)
            | Op::Sum(a)
            | Op::SumAxis(a, _)
            | Op::Mean(a)
            | Op::MeanAxis(a, _)
            | Op::Scale(a, _)
            | Op::Shift(a)
            | Op::Broadcast(a)
            | Op::Slice { src: a, .. }
            | Op::Gather { src: a, .. }
            | Op::Transpose(a) => self.nodes[a.0].requires_grad,
        };
        // only leaves keep an accumulated gradient
        let grad = if matches!(op, Op::Leaf) {
            vec![0.0; value.len()]
        } else {
            Vec::new()
        };
        self.nodes.push(Node {
            shape,
            value,
            grad,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn leaf(&mut self, value: Vec<f64>, shape: &[usize], requires_grad: bool) -> Result<Var> {
        Self::check_rank("leaf", shape)?;
        if value.len() != numel(shape) {
            return Err(Error::InvalidShape {
                op: "leaf",
                detail: format!("{} values for shape {:?}", value.len(), shape),
            });
        }
        let v = self.push(value, shape.to_vec(), Op::Leaf);
        self.nodes[v.0].requires_grad = requires_grad;
        Ok(v)
    }

    /// A leaf that receives gradients.
    pub fn variable(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.leaf(value, shape, true)
    }

    /// A leaf excluded from gradient propagation.
    pub fn constant(&mut self, value: Vec<f64>, shape: &[usize]) -> Result<Var> {
        self.leaf(value, shape, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.push(vec![value], Vec::new(), Op::Leaf)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa != sb {
            return Err(Error::ShapeMismatch {
                op,
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let value = self.nodes[a.0]
            .value
            .iter()
            .zip(&self.nodes[b.0].value)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(value, shape, op)
    }

    fn map(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.nodes[a.0].value.iter().map(|&x| f(x)).collect();
        let shape = self.nodes[a.0].shape.clone();
        self.push(value, shape, op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (&self.nodes[a.0].shape, &self.nodes[b.0].shape);
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                lhs: sa.clone(),
                rhs: sb.clone(),
            });
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        kernels::gemm(
            m,
            k,
            n,
            kernels::View::row_major(&self.nodes[a.0].value, k),
            kernels::View::row_major(&self.nodes[b.0].value, n),
            &mut out,
            0.0,
        );
        Ok(self.push(out, vec![m, n], Op::Matmul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_with(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_with(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_with(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.zip_with(a, a, Op::Mul(a, a), |x, y| x * y)
    }

    /// Elementwise division; a zero denominator is rejected.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("div", a, b)?;
        if let Some(index) = self.nodes[b.0].value.iter().position(|&y| y == 0.0) {
            return Err(Error::Domain {
                op: "div",
                index,
                value: 0.0,
            });
        }
        Ok(self.zip_with(a, b, Op::Div(a, b), |x, y| x / y))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, Op::Tanh(a), f64::tanh)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.map(a, Op::Exp(a), f64::exp)
    }

    /// Natural log; non-positive operands are rejected. See [`Graph::log_eps`].
    pub fn log(&mut self, a: Var) -> Result<Var> {
        if let Some((index, &value)) = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .find(|(_, &x)| x <= 0.0 || x.is_nan())
        {
            return Err(Error::Domain {
                op: "log",
                index,
                value,
            });
        }
        Ok(self.map(a, Op::Log(a), f64::ln))
    }

    /// `log(a + eps)` for operands known to be nonnegative.
    pub fn log_eps(&mut self, a: Var, eps: f64) -> Result<Var> {
        let shifted = self.shift(a, eps);
        self.log(shifted)
    }

    pub fn abs(&mut self, a: Var) -> Var {
        self.map(a, Op::Abs(a), f64::abs)
    }

    pub fn sqrt(&mut self, a: Var) -> Result<Var> {
        if let Some((index, &value)) = self.nodes[a.0]
            .value
            .iter()
            .enumerate()
            .find(|(_, &x)| x < 0.0 || x.is_nan())
        {
            return Err(Error::Domain {
                op: "sqrt",
                index,
                value,
            });
        }
        Ok(self.map(a, Op::Sqrt(a), f64::sqrt))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Adds a constant to every element.
    pub fn shift(&mut self, a: Var, c: f64) -> Var {
        self.map(a, Op::Shift(a), |x| x + c)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        self.push(vec![s], Vec::new(), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let node = &self.nodes[a.0];
        let s = node.value.iter().sum::<f64>() / node.value.len() as f64;
        self.push(vec![s], Vec::new(), Op::Mean(a))
    }

    fn axis_reduce(&self, op: &'static str, a: Var, axis: usize) -> Result<(Vec<f64>, Vec<usize>)> {
        let node = &self.nodes[a.0];
        if node.shape.len() != 2 || axis > 1 {
            return Err(Error::InvalidShape {
                op,
                detail: format!("axis {axis} of shape {:?}", node.shape),
            });
        }
        let (r, c) = (node.shape[0], node.shape[1]);
        if axis == 0 {
            let mut out = vec![0.0; c];
            for row in node.value.chunks_exact(c.max(1)) {
                out.iter_mut().zip(row).for_each(|(o, &x)| *o += x);
            }
            Ok((out, vec![1, c]))
        } else {
            let out = node
                .value
                .chunks_exact(c.max(1))
                .map(|row| row.iter().sum())
                .collect();
            Ok((out, vec![r, 1]))
        }
    }

    /// Sum along `axis` of a matrix, keeping the reduced dimension as 1.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (value, shape) = self.axis_reduce("sum_axis", a, axis)?;
        Ok(self.push(value, shape, Op::SumAxis(a, axis)))
    }

    pub fn mean_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let (mut value, shape) = self.axis_reduce("mean_axis", a, axis)?;
        let count = self.nodes[a.0].shape[axis] as f64;
        value.iter_mut().for_each(|v| *v /= count);
        Ok(self.push(value, shape, Op::MeanAxis(a, axis)))
    }

    /// Repeats size-1 dimensions of `a` up to `shape` (right-aligned).
    pub fn broadcast(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        Self::check_rank("broadcast", shape)?;
        let src = &self.nodes[a.0];
        let mismatch = || Error::ShapeMismatch {
            op: "broadcast",
            lhs: src.shape.clone(),
            rhs: shape.to_vec(),
        };
        if src.shape.len() > shape.len() {
            return Err(mismatch());
        }
        let (ar, ac) = dims2(&src.shape);
        let (r, c) = dims2(shape);
        if (ar != r && ar != 1) || (ac != c && ac != 1) {
            return Err(mismatch());
        }
        let mut out = Vec::with_capacity(r * c);
        for i in 0..r {
            let row = if ar == 1 { 0 } else { i };
            let src_row = &src.value[row * ac..(row + 1) * ac];
            if ac == 1 {
                out.extend(std::iter::repeat_n(src_row[0], c));
            } else {
                out.extend_from_slice(src_row);
            }
        }
        Ok(self.push(out, shape.to_vec(), Op::Broadcast(a)))
    }

    /// Concatenates matrices along `axis`.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = parts.first().ok_or(Error::InvalidShape {
            op: "concat",
            detail: "no inputs".into(),
        })?;
        let base = self.nodes[first.0].shape.clone();
        if base.len() != 2 || axis > 1 {
            return Err(Error::InvalidShape {
                op: "concat",
                detail: format!("axis {axis} of shape {base:?}"),
            });
        }
        let other = 1 - axis;
        let mut total = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != 2 || s[other] != base[other] {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base,
                    rhs: s.clone(),
                });
            }
            total += s[axis];
        }
        let shape = if axis == 0 {
            vec![total, base[1]]
        } else {
            vec![base[0], total]
        };
        let mut out = Vec::with_capacity(numel(&shape));
        if axis == 0 {
            for p in parts {
                out.extend_from_slice(&self.nodes[p.0].value);
            }
        } else {
            for i in 0..base[0] {
                for p in parts {
                    let c = self.nodes[p.0].shape[1];
                    out.extend_from_slice(&self.nodes[p.0].value[i * c..(i + 1) * c]);
                }
            }
        }
        Ok(self.push(out, shape, Op::Concat(parts.to_vec(), axis)))
    }

    /// Contiguous range `start..start + len` along `axis` of a matrix.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 2 || axis > 1 || start + len > s[axis] || len == 0 {
            return Err(Error::InvalidShape {
                op: "slice",
                detail: format!("range {start}..{} on axis {axis} of {s:?}", start + len),
            });
        }
        let src = &self.nodes[a.0].value;
        let (out, shape) = if axis == 0 {
            (src[start * s[1]..(start + len) * s[1]].to_vec(), vec![len, s[1]])
        } else {
            let mut out = Vec::with_capacity(s[0] * len);
            for row in src.chunks_exact(s[1]) {
                out.extend_from_slice(&row[start..start + len]);
            }
            (out, vec![s[0], len])
        };
        Ok(self.push(out, shape, Op::Slice { src: a, axis, start }))
    }

    /// Column `j` of a matrix as an `n × 1` tensor.
    pub fn column(&mut self, a: Var, j: usize) -> Result<Var> {
        self.slice(a, 1, j, 1)
    }

    /// Selects rows of a matrix (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var> {
        let s = self.nodes[a.0].shape.clone();
        if s.len() != 2 {
            return Err(Error::InvalidShape {
                op: "gather",
                detail: format!("shape {s:?}"),
            });
        }
        if let Some(&bad) = rows.iter().find(|&&r| r >= s[0]) {
            return Err(Error::InvalidShape {
                op: "gather",
                detail: format!("row {bad} out of range for {s:?}"),
            });
        }
        let src = &self.nodes[a.0].value;
        let mut out = Vec::with_capacity(rows.len() * s[1]);
        for &r in rows {
            out.extend_from_slice(&src[r * s[1]..(r + 1) * s[1]]);
        }
        Ok(self.push(
            out,
            vec![rows.len(), s[1]],
            Op::Gather {
                src: a,
                rows: rows.to_vec(),
            },
        ))
    }

    /// Matrix transpose; vectors and scalars are treated as `1 × c` rows.
    pub fn transpose(&mut self, a: Var) -> Var {
        let node = &self.nodes[a.0];
        let (r, c) = dims2(&node.shape);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = node.value[i * c + j];
            }
        }
        self.push(out, vec![c, r], Op::Transpose(a))
    }

    /// Gaussian kernel matrix `N(t_p − z_k; σ²)` (`order` 0) or its first
    /// derivative in `t` (`order` 1), for `at` of shape `P × 1` and `samples`
    /// of shape `1 × n`.
    pub fn gauss_kernel(&mut self, at: Var, samples: Var, sigma: f64, order: u8) -> Result<Var> {
        let (sa, ss) = (&self.nodes[at.0].shape, &self.nodes[samples.0].shape);
        if sa.len() != 2 || ss.len() != 2 || sa[1] != 1 || ss[0] != 1 {
            return Err(Error::ShapeMismatch {
                op: "gauss_kernel",
                lhs: sa.clone(),
                rhs: ss.clone(),
            });
        }
        if order > 1 || !(sigma > 0.0) {
            return Err(Error::InvalidShape {
                op: "gauss_kernel",
                detail: format!("order {order}, sigma {sigma}"),
            });
        }
        let (p, n) = (sa[0], ss[1]);
        let mut out = Vec::with_capacity(p * n);
        let (t, z) = (&self.nodes[at.0].value, &self.nodes[samples.0].value);
        for &tp in t {
            out.extend(z.iter().map(|&zk| gauss_derivative(tp - zk, sigma, order)));
        }
        Ok(self.push(
            out,
            vec![p, n],
            Op::Gauss {
                at,
                samples,
                sigma,
                order,
            },
        ))
    }

    /// Accumulates `∂root/∂node` into every node reachable from `root`.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_node = &self.nodes[root.0];
        if root_node.value.len() != 1 {
            return Err(Error::NonScalarRoot(root_node.shape.clone()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; root.0 + 1];
        adj[root.0] = Some(vec![1.0]);

        for idx in (0..=root.0).rev() {
            let Some(mut g) = adj[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            if self.negated == Some(node.op.kind()) {
                g.iter_mut().for_each(|x| *x = -*x);
            }
            self.propagate(idx, &g, &mut adj);
            // the negation is a property of the backward rule, not of the
            // adjoint stored on the node itself
            if self.negated == Some(self.nodes[idx].op.kind()) {
                g.iter_mut().for_each(|x| *x = -*x);
            }
            let node = &mut self.nodes[idx];
            if matches!(node.op, Op::Leaf) {
                node.grad.iter_mut().zip(&g).for_each(|(a, b)| *a += b);
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let nodes = &self.nodes;
        let wants = |v: &Var| nodes[v.0].requires_grad;
        macro_rules! slot {
            ($v:expr) => {{
                let v: Var = $v;
                let len = nodes[v.0].value.len();
                adj[v.0].get_or_insert_with(|| vec![0.0; len])
            }};
        }
        let val = |v: &Var| nodes[v.0].value.as_slice();

        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let n = nodes[b.0].shape[1];
                if wants(a) {
                    // dA = G · Bᵀ
                    let bt = kernels::View::transposed(val(b), n);
                    let da = slot!(*a);
                    kernels::gemm(m, n, k, kernels::View::row_major(g, n), bt, da, 1.0);
                }
                if wants(b) {
                    // dB = Aᵀ · G
                    let at = kernels::View::transposed(val(a), k);
                    let db = slot!(*b);
                    kernels::gemm(k, m, n, at, kernels::View::row_major(g, n), db, 1.0);
                }
            }
            Op::Add(a, b) | Op::Sub(a, b) => {
                let sign = if matches!(node.op, Op::Sub(..)) { -1.0 } else { 1.0 };
                if wants(a) {
                    slot!(*a).iter_mut().zip(g).for_each(|(s, &x)| *s += x);
                }
                if wants(b) {
                    slot!(*b).iter_mut().zip(g).for_each(|(s, &x)| *s += sign * x);
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    let bv = val(b);
                    let s = slot!(*a);
                    for i in 0..g.len() {
                        s[i] += g[i] * bv[i];
                    }
                }
                if wants(b) {
                    let av = val(a);
                    let s = slot!(*b);
                    for i in 0..g.len() {
                        s[i] += g[i] * av[i];
                    }
                }
            }
            Op::Div(a, b) => {
                let bv = val(b);
                if wants(a) {
                    let s = slot!(*a);
                    for i in 0..g.len() {
                        s[i] += g[i] / bv[i];
                    }
                }
                if wants(b) {
                    let y = &node.value;
                    let s = slot!(*b);
                    for i in 0..g.len() {
                        s[i] -= g[i] * y[i] / bv[i];
                    }
                }
            }
            Op::Tanh(a) if wants(a) => {
                let y = &node.value;
                let s = slot!(*a);
                for i in 0..g.len() {
                    s[i] += g[i] * (1.0 - y[i] * y[i]);
                }
            }
            Op::Exp(a) if wants(a) => {
                let y = &node.value;
                let s = slot!(*a);
                for i in 0..g.len() {
                    s[i] += g[i] * y[i];
                }
            }
            Op::Log(a) if wants(a) => {
                let x = val(a);
                let s = slot!(*a);
                for i in 0..g.len() {
                    s[i] += g[i] / x[i];
                }
            }
            Op::Abs(a) if wants(a) => {
                let x = val(a);
                let s = slot!(*a);
                for i in 0..g.len() {
                    // subgradient 0 at exactly 0
                    let sign = if x[i] > 0.0 {
                        1.0
                    } else if x[i] < 0.0 {
                        -1.0
                    } else {
                        0.0
                    };
                    s[i] += g[i] * sign;
                }
            }
            Op::Sqrt(a) if wants(a) => {
                let y = &node.value;
                let s = slot!(*a);
                for i in 0..g.len() {
                    s[i] += g[i] * 0.5 / y[i];
                }
            }
            Op::Sum(a) if wants(a) => {
                slot!(*a).iter_mut().for_each(|s| *s += g[0]);
            }
            Op::Mean(a) if wants(a) => {
                let s = slot!(*a);
                let c = g[0] / s.len() as f64;
                s.iter_mut().for_each(|s| *s += c);
            }
            Op::SumAxis(a, axis) | Op::MeanAxis(a, axis) if wants(a) => {
                let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                let scale = match node.op {
                    Op::MeanAxis(..) => 1.0 / nodes[a.0].shape[*axis] as f64,
                    _ => 1.0,
                };
                let s = slot!(*a);
                for i in 0..r {
                    for j in 0..c {
                        let up = if *axis == 0 { g[j] } else { g[i] };
                        s[i * c + j] += scale * up;
                    }
                }
            }
            Op::Scale(a, k) if wants(a) => {
                slot!(*a).iter_mut().zip(g).for_each(|(s, &x)| *s += k * x);
            }
            Op::Shift(a) if wants(a) => {
                slot!(*a).iter_mut().zip(g).for_each(|(s, &x)| *s += x);
            }
            Op::Broadcast(a) if wants(a) => {
                let (ar, ac) = dims2(&nodes[a.0].shape);
                let (r, c) = dims2(&node.shape);
                let s = slot!(*a);
                for i in 0..r {
                    let si = if ar == 1 { 0 } else { i };
                    for j in 0..c {
                        let sj = if ac == 1 { 0 } else { j };
                        s[si * ac + sj] += g[i * c + j];
                    }
                }
            }
            Op::Concat(parts, axis) => {
                let (rows, cols) = (node.shape[0], node.shape[1]);
                let mut offset = 0;
                for p in parts {
                    let (pr, pc) = (nodes[p.0].shape[0], nodes[p.0].shape[1]);
                    if wants(p) {
                        let s = slot!(*p);
                        if *axis == 0 {
                            let start = offset * cols;
                            s.iter_mut()
                                .zip(&g[start..start + pr * pc])
                                .for_each(|(s, &x)| *s += x);
                        } else {
                            for i in 0..rows {
                                for j in 0..pc {
                                    s[i * pc + j] += g[i * cols + offset + j];
                                }
                            }
                        }
                    }
                    offset += if *axis == 0 { pr } else { pc };
                }
            }
            Op::Slice { src, axis, start } if wants(src) => {
                let c = nodes[src.0].shape[1];
                let (out_r, out_c) = (node.shape[0], node.shape[1]);
                let s = slot!(*src);
                for i in 0..out_r {
                    for j in 0..out_c {
                        let (si, sj) = if *axis == 0 {
                            (i + start, j)
                        } else {
                            (i, j + start)
                        };
                        s[si * c + sj] += g[i * out_c + j];
                    }
                }
            }
            Op::Gather { src, rows } if wants(src) => {
                let c = nodes[src.0].shape[1];
                let s = slot!(*src);
                for (i, &r) in rows.iter().enumerate() {
                    for j in 0..c {
                        s[r * c + j] += g[i * c + j];
                    }
                }
            }
            Op::Transpose(a) if wants(a) => {
                let (r, c) = dims2(&nodes[a.0].shape);
                let s = slot!(*a);
                for i in 0..r {
                    for j in 0..c {
                        s[i * c + j] += g[j * r + i];
                    }
                }
            }
            Op::Gauss {
                at,
                samples,
                sigma,
                order,
            } => {
                let (t, z) = (val(at), val(samples));
                let n = z.len();
                let s2 = sigma * sigma;
                // ∂/∂t raises the derivative order; ∂/∂z does the same with a sign flip
                let mut dt = vec![0.0; t.len()];
                let mut dz = vec![0.0; n];
                for (p, &tp) in t.iter().enumerate() {
                    let row = &g[p * n..(p + 1) * n];
                    let out = &node.value[p * n..(p + 1) * n];
                    let mut acc = 0.0;
                    for k in 0..n {
                        let u = tp - z[k];
                        let next = if *order == 0 {
                            -u / s2 * out[k]
                        } else {
                            gauss_derivative(u, *sigma, 2)
                        };
                        let v = row[k] * next;
                        acc += v;
                        dz[k] -= v;
                    }
                    dt[p] += acc;
                }
                if wants(at) {
                    slot!(*at).iter_mut().zip(&dt).for_each(|(s, x)| *s += x);
                }
                if wants(samples) {
                    slot!(*samples).iter_mut().zip(&dz).for_each(|(s, x)| *s += x);
                }
            }
            _ => {}
        }
    }
}

/// `dᵒʳᵈᵉʳ/duᵒʳᵈᵉʳ N(u; 0, σ²)` for orders 0 to 2.
fn gauss_derivative(u: f64, sigma: f64, order: u8) -> f64 {
    let s2 = sigma * sigma;
    let base = (-(u * u) / (2.0 * s2)).exp() / (sigma * (2.0 * std::f64::consts::PI).sqrt());
    match order {
        0 => base,
        1 => -u / s2 * base,
        _ => (u * u / s2 - 1.0) / s2 * base,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn tanh_at_zero() {
        let mut g = Graph::new();
        let x = g.variable(vec![0.0], &[]).unwrap();
        let y = g.tanh(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.value(y), &[0.0]);
        assert_eq!(g.grad(x), &[1.0]);
    }

    #[test]
    fn abs_sign_rule() {
        let mut g = Graph::new();
        let x = g.variable(vec![-2.0, 0.0], &[2]).unwrap();
        let y = g.abs(x);
        let s = g.sum(y);
        g.backward(s).unwrap();
        assert_eq!(g.value(y), &[2.0, 0.0]);
        assert_eq!(g.grad(x), &[-1.0, 0.0]);
    }

    #[test]
    fn identity_matmul() {
        let mut g = Graph::new();
        let eye = g.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let v = g.variable(vec![3.0, 4.0], &[2, 1]).unwrap();
        let out = g.matmul(eye, v).unwrap();
        assert_eq!(g.value(out), &[3.0, 4.0]);
    }

    #[test]
    fn quadratic_gradient() {
        let mut g = Graph::new();
        let x = g.variable(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let sq = g.square(x);
        let s = g.sum(sq);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn chain_rule_through_tanh() {
        let mut g = Graph::new();
        let w = g.variable(vec![0.0, 0.0], &[1, 2]).unwrap();
        let x = g.constant(vec![0.5, -1.5], &[2, 1]).unwrap();
        let wx = g.matmul(w, x).unwrap();
        let y = g.tanh(wx);
        g.backward(y).unwrap();
        assert_eq!(g.grad(w), &[0.5, -1.5]);
    }

    #[test]
    fn repeated_backward_accumulates() {
        let mut g = Graph::new();
        let x = g.variable(vec![1.5], &[]).unwrap();
        let y = g.square(x);
        g.backward(y).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.grad(x), &[6.0]);
        g.zero_grad();
        assert_eq!(g.grad(x), &[0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut g = Graph::new();
        let x = g.variable(vec![1.0, 2.0], &[2]).unwrap();
        assert!(matches!(g.backward(x), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn shape_mismatch_rejected() {
        let mut g = Graph::new();
        let a = g.variable(vec![1.0, 2.0], &[2]).unwrap();
        let b = g.variable(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let err = g.add(a, b).unwrap_err();
        assert!(err.to_string().contains("add"));
        let m = g.variable(vec![0.0; 6], &[2, 3]).unwrap();
        assert!(g.matmul(m, m).is_err());
        assert!(g.broadcast(b, &[2, 2]).is_err());
    }

    #[test]
    fn log_and_div_domain() {
        let mut g = Graph::new();
        let x = g.variable(vec![1.0, 0.0], &[2]).unwrap();
        assert!(matches!(g.log(x), Err(Error::Domain { index: 1, .. })));
        assert!(g.log_eps(x, EPS).is_ok());
        let one = g.constant(vec![1.0, 1.0], &[2]).unwrap();
        assert!(matches!(g.div(one, x), Err(Error::Domain { op: "div", .. })));
    }

    #[test]
    fn broadcast_reduces_gradient() {
        let mut g = Graph::new();
        let col = g.variable(vec![1.0, 2.0], &[2, 1]).unwrap();
        let b = g.broadcast(col, &[2, 3]).unwrap();
        assert_eq!(g.value(b), &[1.0, 1.0, 1.0, 2.0, 2.0, 2.0]);
        let s = g.sum(b);
        g.backward(s).unwrap();
        assert_eq!(g.grad(col), &[3.0, 3.0]);
    }

    #[test]
    fn concat_slice_gather_roundtrip() {
        let mut g = Graph::new();
        let a = g.variable(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = g.variable(vec![5.0, 6.0], &[2, 1]).unwrap();
        let c = g.concat(&[a, b], 1).unwrap();
        assert_eq!(g.value(c), &[1.0, 2.0, 5.0, 3.0, 4.0, 6.0]);
        let col = g.column(c, 2).unwrap();
        assert_eq!(g.value(col), &[5.0, 6.0]);
        let rows = g.gather_rows(c, &[1, 1]).unwrap();
        assert_eq!(g.value(rows), &[3.0, 4.0, 6.0, 3.0, 4.0, 6.0]);
        let s = g.sum(rows);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a), &[0.0, 0.0, 2.0, 2.0]);
        assert_eq!(g.grad(b), &[0.0, 2.0]);
    }

    #[test]
    fn transpose_vector_roundtrip() {
        let mut g = Graph::new();
        let a = g.variable(vec![1.0, 2.0, 3.0], &[3, 1]).unwrap();
        let t = g.transpose(a);
        assert_eq!(g.shape(t), &[1, 3]);
        let w = g.constant(vec![1.0, 10.0, 100.0], &[1, 3]).unwrap();
        let p = g.mul(t, w).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(a), &[1.0, 10.0, 100.0]);
    }

    #[test]
    fn matmul_gradients_match_manual() {
        let mut g = Graph::new();
        let a = g.variable(vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0], &[2, 3]).unwrap();
        let b = g.variable(vec![0.5, -1.0, 2.0, 0.0, 1.0, 3.0], &[3, 2]).unwrap();
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c), &[7.5, 8.0, 18.0, 14.0]);
        let s = g.sum(c);
        g.backward(s).unwrap();
        // d sum / dA_ij = sum_k B_jk
        assert_eq!(g.grad(a), &[-0.5, 2.0, 4.0, -0.5, 2.0, 4.0]);
        // d sum / dB_jk = sum_i A_ij
        assert_eq!(g.grad(b), &[5.0, 5.0, 7.0, 7.0, 9.0, 9.0]);
    }

    #[test]
    fn backward_is_linear() {
        let build = |g: &mut Graph, x: Var, a: f64, b: f64| {
            let t = g.tanh(x);
            let f = g.sum(t);
            let e = g.exp(x);
            let h = g.mean(e);
            let fa = g.scale(f, a);
            let hb = g.scale(h, b);
            g.add(fa, hb).unwrap()
        };
        let point = vec![0.3, -0.7, 1.1];
        let grad_of = |a: f64, b: f64| {
            let mut g = Graph::new();
            let x = g.variable(point.clone(), &[3]).unwrap();
            let root = build(&mut g, x, a, b);
            g.backward(root).unwrap();
            g.grad(x).to_vec()
        };
        let (gf, gh, combo) = (grad_of(1.0, 0.0), grad_of(0.0, 1.0), grad_of(2.5, -0.75));
        for i in 0..3 {
            assert_abs_diff_eq!(combo[i], 2.5 * gf[i] - 0.75 * gh[i], epsilon = 1e-14);
        }
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(vec![2.0], &[]).unwrap();
        let x = g.variable(vec![3.0], &[]).unwrap();
        let p = g.mul(c, x).unwrap();
        g.backward(p).unwrap();
        assert_eq!(g.grad(c), &[0.0]);
        assert_eq!(g.grad(x), &[2.0]);
    }

    #[test]
    fn op_kind_parses_from_snake_case() {
        assert_eq!("tanh".parse::<OpKind>().unwrap(), OpKind::Tanh);
        assert_eq!("mean_axis".parse::<OpKind>().unwrap(), OpKind::MeanAxis);
        assert!("conv2d".parse::<OpKind>().is_err());
    }
}
