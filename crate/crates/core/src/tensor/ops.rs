//! Forward op constructors and the reverse-mode adjoint dispatch.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

use super::lstm::LstmRecord;
use super::{numel, Graph, Node, Tape, Tensor};

pub(crate) enum Op<T: Scalar> {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    Scale(usize, T),
    AddScalar(usize, T),
    Relu(usize),
    PRelu { x: usize, slope: usize },
    Sigmoid(usize),
    Tanh(usize),
    Exp(usize),
    Ln(usize),
    Sqrt(usize),
    Abs(usize),
    ClampMin { x: usize, min: T },
    SumAll(usize),
    MeanAll(usize),
    SumLast { x: usize, last: usize },
    MeanLast { x: usize, last: usize },
    SoftmaxLast { x: usize, last: usize },
    LayerNormLast {
        x: usize,
        gain: usize,
        bias: usize,
        last: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Bmm {
        a: usize,
        b: usize,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        broadcast_b: bool,
    },
    Permute {
        x: usize,
        perm: Vec<usize>,
    },
    Reshape(usize),
    Concat {
        parts: Vec<usize>,
        axis: usize,
    },
    SliceAxis {
        x: usize,
        axis: usize,
        start: usize,
        len: usize,
    },
    GatherCols {
        x: usize,
        cols: Vec<usize>,
    },
    AddRowBroadcast {
        x: usize,
        row: usize,
    },
    AddColBroadcast {
        x: usize,
        col: usize,
    },
    MulVecAxis0 {
        x: usize,
        v: usize,
    },
    AddVecAxis0 {
        x: usize,
        v: usize,
    },
    Unfold {
        x: usize,
        win: usize,
        hop: usize,
    },
    Fold {
        x: usize,
        hop: usize,
        out_len: usize,
    },
    SplitSegments {
        x: usize,
        hop: usize,
    },
    MergeSegments {
        x: usize,
        hop: usize,
        out_len: usize,
        coverage: Vec<T>,
    },
    Lstm(Box<LstmRecord<T>>),
}

impl<T: Scalar> Op<T> {
    pub(crate) fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Div(..) => "div",
            Op::Neg(..) => "neg",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Relu(..) => "relu",
            Op::PRelu { .. } => "prelu",
            Op::Sigmoid(..) => "sigmoid",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Ln(..) => "ln",
            Op::Sqrt(..) => "sqrt",
            Op::Abs(..) => "abs",
            Op::ClampMin { .. } => "clamp_min",
            Op::SumAll(..) => "sum_all",
            Op::MeanAll(..) => "mean_all",
            Op::SumLast { .. } => "sum_last",
            Op::MeanLast { .. } => "mean_last",
            Op::SoftmaxLast { .. } => "softmax",
            Op::LayerNormLast { .. } => "layer_norm",
            Op::Bmm { .. } => "matmul",
            Op::Permute { .. } => "permute",
            Op::Reshape(..) => "reshape",
            Op::Concat { .. } => "concat",
            Op::SliceAxis { .. } => "slice_axis",
            Op::GatherCols { .. } => "gather_cols",
            Op::AddRowBroadcast { .. } => "add_row_broadcast",
            Op::AddColBroadcast { .. } => "add_col_broadcast",
            Op::MulVecAxis0 { .. } => "mul_vec_axis0",
            Op::AddVecAxis0 { .. } => "add_vec_axis0",
            Op::Unfold { .. } => "unfold",
            Op::Fold { .. } => "fold",
            Op::SplitSegments { .. } => "split_segments",
            Op::MergeSegments { .. } => "merge_segments",
            Op::Lstm(..) => "lstm",
        }
    }
}

pub(crate) fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1usize; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

// out += a (m×k) @ b (k×n)
pub(crate) fn mm_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            if a_il == T::zero() {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + a_il * bv;
            }
        }
    }
}

// out (m×p) += a (m×n) @ b^T where b is (p×n)
fn mm_nt_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, n: usize, p: usize) {
    for i in 0..m {
        let a_row = &a[i * n..(i + 1) * n];
        let out_row = &mut out[i * p..(i + 1) * p];
        for (l, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[l * n..(l + 1) * n];
            let dot: T = a_row.iter().zip(b_row.iter()).map(|(&x, &y)| x * y).sum();
            *o = *o + dot;
        }
    }
}

// out (k×n) += a^T @ b where a is (m×k), b is (m×n)
fn mm_tn_acc<T: Scalar>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let b_row = &b[i * n..(i + 1) * n];
        for (l, &a_il) in a_row.iter().enumerate() {
            if a_il == T::zero() {
                continue;
            }
            let out_row = &mut out[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o = *o + a_il * bv;
            }
        }
    }
}

fn permute_data<T: Copy>(src: &[T], in_shape: &[usize], perm: &[usize]) -> (Vec<T>, Vec<usize>) {
    let rank = in_shape.len();
    let out_shape: Vec<usize> = perm.iter().map(|&p| in_shape[p]).collect();
    let in_strides = strides(in_shape);
    let step: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let n: usize = out_shape.iter().product();
    let mut out = Vec::with_capacity(n);
    let mut coords = vec![0usize; rank];
    let mut src_idx = 0usize;
    for _ in 0..n {
        out.push(src[src_idx]);
        for ax in (0..rank).rev() {
            coords[ax] += 1;
            src_idx += step[ax];
            if coords[ax] < out_shape[ax] {
                break;
            }
            src_idx -= step[ax] * out_shape[ax];
            coords[ax] = 0;
        }
    }
    (out, out_shape)
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0usize; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

impl<T: Scalar> Tensor<T> {
    fn unary(&self, f: impl Fn(&[T]) -> Vec<T>, op: Op<T>) -> Result<Tensor<T>> {
        let (data, shape, needs) = self.graph.with_tape(|t| {
            let n = &t.nodes[self.id];
            (f(&n.data), n.shape.clone(), n.needs_flow)
        });
        self.graph.push(Node {
            shape,
            data,
            grad: None,
            requires_grad: false,
            needs_flow: needs,
            op,
        })
    }

    fn binary_same(
        &self,
        rhs: &Tensor<T>,
        opname: &'static str,
        f: impl Fn(T, T) -> T,
        op: Op<T>,
    ) -> Result<Tensor<T>> {
        if !self.graph.same_graph(&rhs.graph) {
            return Err(Error::invalid(format!("{opname}: tensors from different graphs")));
        }
        let (data, shape, needs) = self.graph.with_tape(|t| {
            let a = &t.nodes[self.id];
            let b = &t.nodes[rhs.id];
            let needs = a.needs_flow || b.needs_flow;
            // scalar-by-tensor broadcast on either side
            if a.data.len() == 1 && b.data.len() != 1 {
                let av = a.data[0];
                (
                    b.data.iter().map(|&bv| f(av, bv)).collect::<Vec<T>>(),
                    Some(b.shape.clone()),
                    needs,
                )
            } else if b.data.len() == 1 && a.data.len() != 1 {
                let bv = b.data[0];
                (
                    a.data.iter().map(|&av| f(av, bv)).collect::<Vec<T>>(),
                    Some(a.shape.clone()),
                    needs,
                )
            } else if a.shape == b.shape {
                (
                    a.data
                        .iter()
                        .zip(b.data.iter())
                        .map(|(&av, &bv)| f(av, bv))
                        .collect::<Vec<T>>(),
                    Some(a.shape.clone()),
                    needs,
                )
            } else {
                (Vec::new(), None, needs)
            }
        });
        let Some(shape) = shape else {
            return Err(Error::ShapeMismatch {
                op: opname,
                lhs: self.shape(),
                rhs: rhs.shape(),
            });
        };
        self.graph.push(Node {
            shape,
            data,
            grad: None,
            requires_grad: false,
            needs_flow: needs,
            op,
        })
    }

    pub fn add(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_same(rhs, "add", |a, b| a + b, Op::Add(self.id, rhs.id))
    }

    pub fn sub(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_same(rhs, "sub", |a, b| a - b, Op::Sub(self.id, rhs.id))
    }

    pub fn mul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_same(rhs, "mul", |a, b| a * b, Op::Mul(self.id, rhs.id))
    }

    pub fn div(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        self.binary_same(rhs, "div", |a, b| a / b, Op::Div(self.id, rhs.id))
    }

    pub fn neg(&self) -> Result<Tensor<T>> {
        self.unary(|d| d.iter().map(|&v| -v).collect(), Op::Neg(self.id))
    }

    pub fn scale(&self, c: T) -> Result<Tensor<T>> {
        self.unary(|d| d.iter().map(|&v| v * c).collect(), Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: T) -> Result<Tensor<T>> {
        self.unary(|d| d.iter().map(|&v| v + c).collect(), Op::AddScalar(self.id, c))
    }

    pub fn relu(&self) -> Result<Tensor<T>> {
        self.unary(
            |d| d.iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect(),
            Op::Relu(self.id),
        )
    }

    /// Parametric ReLU with a learnable scalar slope tensor of shape `[1]`.
    pub fn prelu(&self, slope: &Tensor<T>) -> Result<Tensor<T>> {
        if slope.numel() != 1 {
            return Err(Error::invalid("prelu: slope must be a [1] tensor"));
        }
        let s = slope.item();
        let (data, shape, needs) = self.graph.with_tape(|t| {
            let n = &t.nodes[self.id];
            (
                n.data
                    .iter()
                    .map(|&v| if v > T::zero() { v } else { s * v })
                    .collect::<Vec<T>>(),
                n.shape.clone(),
                n.needs_flow || t.nodes[slope.id].needs_flow,
            )
        });
        self.graph.push(Node {
            shape,
            data,
            grad: None,
            requires_grad: false,
            needs_flow: needs,
            op: Op::PRelu {
                x: self.id,
                slope: slope.id,
            },
        })
    }

    pub fn sigmoid(&self) -> Result<Tensor<T>> {
        self.unary(
            |d| d.iter().map(|&v| T::one() / (T::one() + (-v).exp())).collect(),
            Op::Sigmoid(self.id),
        )
    }

    pub fn tanh(&self) -> Result<Tensor<T>> {
        self.unary(|d| d.iter().map(|&v| v.tanh()).collect(), Op::Tanh(self.id))
    }

    pub fn exp(&self) -> Result<Tensor<T>> {
        self.unary(|d| d.iter().map(|&v| v.exp()).collect(), Op::Exp(self.id))
    }

    pub fn ln(&self) -> Result<Tensor<T>> {
        self.unary(|d| d.iter().map(|&v| v.ln()).collect(), Op::Ln(self.id))
    }

    pub fn sqrt(&self) -> Result<Tensor<T>> {
        self.unary(|d| d.iter().map(|&v| v.sqrt()).collect(), Op::Sqrt(self.id))
    }

    pub fn abs(&self) -> Result<Tensor<T>> {
        self.unary(|d| d.iter().map(|&v| v.abs()).collect(), Op::Abs(self.id))
    }

    pub fn clamp_min(&self, min: T) -> Result<Tensor<T>> {
        self.unary(
            |d| d.iter().map(|&v| if v < min { min } else { v }).collect(),
            Op::ClampMin { x: self.id, min },
        )
    }

    pub fn sum_all(&self) -> Result<Tensor<T>> {
        let (v, needs) = self.graph.with_tape(|t| {
            let n = &t.nodes[self.id];
            (n.data.iter().copied().sum::<T>(), n.needs_flow)
        });
        self.graph.push(Node {
            shape: vec![1],
            data: vec![v],
            grad: None,
            requires_grad: false,
            needs_flow: needs,
            op: Op::SumAll(self.id),
        })
    }

    pub fn mean_all(&self) -> Result<Tensor<T>> {
        let (v, needs) = self.graph.with_tape(|t| {
            let n = &t.nodes[self.id];
            let len = T::from_f64_c(n.data.len() as f64);
            (n.data.iter().copied().sum::<T>() / len, n.needs_flow)
        });
        self.graph.push(Node {
            shape: vec![1],
            data: vec![v],
            grad: None,
            requires_grad: false,
            needs_flow: needs,
            op: Op::MeanAll(self.id),
        })
    }

    fn reduce_last(&self, mean: bool) -> Result<Tensor<T>> {
        let (data, shape, last, needs) = self.graph.with_tape(|t| {
            let n = &t.nodes[self.id];
            let last = *n.shape.last().expect("rank >= 1");
            let rows = n.data.len() / last;
            let denom = if mean { T::from_f64_c(last as f64) } else { T::one() };
            let mut out = Vec::with_capacity(rows);
            for r in 0..rows {
                let s: T = n.data[r * last..(r + 1) * last].iter().copied().sum();
                out.push(s / denom);
            }
            let mut shape = n.shape.clone();
            shape.pop();
            if shape.is_empty() {
                shape.push(1);
            }
            (out, shape, last, needs_flow_of(n))
        });
        self.graph.push(Node {
            shape,
            data,
            grad: None,
            requires_grad: false,
            needs_flow: needs,
            op: if mean {
                Op::MeanLast { x: self.id, last }
            } else {
                Op::SumLast { x: self.id, last }
            },
        })
    }

    /// Sum along the last axis; `[.., L] -> [..]`.
    pub fn sum_last(&self) -> Result<Tensor<T>> {
        self.reduce_last(false)
    }

    /// Mean along the last axis.
    pub fn mean_last(&self) -> Result<Tensor<T>> {
        self.reduce_last(true)
    }

    /// Row maxima along the last axis, detached from the graph.
    pub fn max_last_detached(&self) -> Tensor<T> {
        let (data, shape) = self.graph.with_tape(|t| {
            let n = &t.nodes[self.id];
            let last = *n.shape.last().expect("rank >= 1");
            let rows = n.data.len() / last;
            let mut out = Vec::with_capacity(rows);
            for r in 0..rows {
                let m = n.data[r * last..(r + 1) * last]
                    .iter()
                    .copied()
                    .fold(T::neg_infinity(), T::max);
                out.push(m);
            }
            let mut shape = n.shape.clone();
            shape.pop();
            if shape.is_empty() {
                shape.push(1);
            }
            (out, shape)
        });
        self.graph.constant(data, &shape).expect("max shape")
    }

    /// Numerically stable softmax along the last axis.
    pub fn softmax_last(&self) -> Result<Tensor<T>> {
        let (data, shape, last, needs) = self.graph.with_tape(|t| {
            let n = &t.nodes[self.id];
            let last = *n.shape.last().expect("rank >= 1");
            let rows = n.data.len() / last;
            let mut out = vec![T::zero(); n.data.len()];
            for r in 0..rows {
                let row = &n.data[r * last..(r + 1) * last];
                let m = row.iter().copied().fold(T::neg_infinity(), T::max);
                let o = &mut out[r * last..(r + 1) * last];
                let mut denom = T::zero();
                for (oe, &v) in o.iter_mut().zip(row.iter()) {
                    let e = (v - m).exp();
                    *oe = e;
                    denom = denom + e;
                }
                for oe in o.iter_mut() {
                    *oe = *oe / denom;
                }
            }
            (out, n.shape.clone(), last, n.needs_flow)
        });
        self.graph.push(Node {
            shape,
            data,
            grad: None,
            requires_grad: false,
            needs_flow: needs,
            op: Op::SoftmaxLast { x: self.id, last },
        })
    }

    /// Softmax along an arbitrary axis.
    pub fn softmax(&self, axis: usize) -> Result<Tensor<T>> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis {
                op: "softmax",
                axis,
                rank,
            });
        }
        if axis == rank - 1 {
            return self.softmax_last();
        }
        let mut perm: Vec<usize> = (0..rank).filter(|&a| a != axis).collect();
        perm.push(axis);
        let moved = self.permute(&perm)?;
        let soft = moved.softmax_last()?;
        soft.permute(&inverse_perm(&perm))
    }

    /// Layer norm along the last axis with affine gain/bias of that length.
    pub fn layer_norm_last(&self, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let last = *self.shape().last().expect("rank >= 1");
        if gain.numel() != last || bias.numel() != last {
            return Err(Error::ShapeMismatch {
                op: "layer_norm",
                lhs: self.shape(),
                rhs: gain.shape(),
            });
        }
        let (data, shape, xhat, inv_std, needs) = self.graph.with_tape(|t| {
            let n = &t.nodes[self.id];
            let gn = &t.nodes[gain.id].data;
            let bn = &t.nodes[bias.id].data;
            let rows = n.data.len() / last;
            let len_t = T::from_f64_c(last as f64);
            let mut out = vec![T::zero(); n.data.len()];
            let mut xhat = vec![T::zero(); n.data.len()];
            let mut inv_std = vec![T::zero(); rows];
            for r in 0..rows {
                let row = &n.data[r * last..(r + 1) * last];
                let mean = row.iter().copied().sum::<T>() / len_t;
                let var = row
                    .iter()
                    .map(|&v| (v - mean) * (v - mean))
                    .sum::<T>()
                    / len_t;
                let istd = T::one() / (var + eps).sqrt();
                inv_std[r] = istd;
                for c in 0..last {
                    let xh = (row[c] - mean) * istd;
                    xhat[r * last + c] = xh;
                    out[r * last + c] = xh * gn[c] + bn[c];
                }
            }
            let needs =
                n.needs_flow || t.nodes[gain.id].needs_flow || t.nodes[bias.id].needs_flow;
            (out, n.shape.clone(), xhat, inv_std, needs)
        });
        self.graph.push(Node {
            shape,
            data,
            grad: None,
            requires_grad: false,
            needs_flow: needs,
            op: Op::LayerNormLast {
                x: self.id,
                gain: gain.id,
                bias: bias.id,
                last,
                xhat,
                inv_std,
            },
        })
    }

    /// Layer norm along an arbitrary axis.
    pub fn layer_norm(&self, axis: usize, gain: &Tensor<T>, bias: &Tensor<T>, eps: T) -> Result<Tensor<T>> {
        let rank = self.rank();
        if axis >= rank {
            return Err(Error::InvalidAxis {
                op: "layer_norm",
                axis,
                rank,
            });
        }
        if axis == rank - 1 {
            return self.layer_norm_last(gain, bias, eps);
        }
        let mut perm: Vec<usize> = (0..rank).filter(|&a| a != axis).collect();
        perm.push(axis);
        let moved = self.permute(&perm)?;
        let normed = moved.layer_norm_last(gain, bias, eps)?;
        normed.permute(&inverse_perm(&perm))
    }

    /// Matrix product. Supports `[m,k]x[k,n]`, `[b,m,k]x[k,n]` (rhs broadcast
    /// over the leading batch) and `[b,m,k]x[b,k,n]`.
    pub fn matmul(&self, rhs: &Tensor<T>) -> Result<Tensor<T>> {
        let ls = self.shape();
        let rs = rhs.shape();
        let mismatch = || Error::ShapeMismatch {
            op: "matmul",
            lhs: ls.clone(),
            rhs: rs.clone(),
        };
        match (ls.len(), rs.len()) {
            (2, 2) => {
                if ls[1] != rs[0] {
                    return Err(mismatch());
                }
                self.bmm_inner(rhs, 1, ls[0], ls[1], rs[1], true, vec![ls[0], rs[1]])
            }
            (3, 2) => {
                if ls[2] != rs[0] {
                    return Err(mismatch());
                }
                self.bmm_inner(rhs, ls[0], ls[1], ls[2], rs[1], true, vec![ls[0], ls[1], rs[1]])
            }
            (3, 3) => {
                if ls[0] != rs[0] || ls[2] != rs[1] {
                    return Err(mismatch());
                }
                self.bmm_inner(rhs, ls[0], ls[1], ls[2], rs[2], false, vec![ls[0], ls[1], rs[2]])
            }
            _ => Err(mismatch()),
        }
    }

    fn bmm_inner(
        &self,
        rhs: &Tensor<T>,
        batch: usize,
        m: usize,
        k: usize,
        n: usize,
        broadcast_b: bool,
        out_shape: Vec<usize>,
    ) -> Result<Tensor<T>> {
        if !self.graph.same_graph(&rhs.graph) {
            return Err(Error::invalid("matmul: tensors from different graphs"));
        }
        let (data, needs) = self.graph.with_tape(|t| {
            let a = &t.nodes[self.id];
            let b = &t.nodes[rhs.id];
            let mut out = vec![T::zero(); batch * m * n];
            for bt in 0..batch {
                let a_sl = &a.data[bt * m * k..(bt + 1) * m * k];
                let b_sl = if broadcast_b {
                    &b.data[..]
                } else {
                    &b.data[bt * k * n..(bt + 1) * k * n]
                };
                mm_acc(a_sl, b_sl, &mut out[bt * m * n..(bt + 1) * m * n], m, k, n);
            }
            (out, a.needs_flow || b.needs_flow)
        });
        self.graph.push(Node {
            shape: out_shape,
            data,
            grad: None,
            requires_grad: false,
            needs_flow: needs,
            op: Op::Bmm {
                a: self.id,
                b: rhs.id,
                batch,
                m,
                k,
                n,
                broadcast_b,
            },
        })
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Tensor<T>> {
        let shape = self.shape();
        let rank = shape.len();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::invalid(format!(
                "permute: {perm:?} is not a permutation of rank {rank}"
            )));
        }
        let (data, out_shape, needs) = self.graph.with_tape(|t| {
            let n = &t.nodes[self.id];
            let (d, s) = permute_data(&n.data, &n.shape, perm);
            (d, s, n.needs_flow)
        });
        self.graph.push(Node {
            shape: out_shape,
            data,
            grad: None,
            requires_grad: false,
            needs_flow: needs,
            op: Op::Permute {
                x: self.id,
                perm: perm.to_vec(),
            },
        })
    }

    /// 2-D transpose.
    pub fn transpose2(&self) -> Result<Tensor<T>> {
        self.permute(&[1, 0])
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::invalid(format!(
                "reshape: cannot view {:?} as {:?}",
                self.shape(),
                shape
            )));
        }
        let (data, needs) = self
            .graph
            .with_tape(|t| (t.nodes[self.id].data.clone(), t.nodes[self.id].needs_flow));
        self.graph.push(Node {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
            needs_flow: needs,
            op: Op::Reshape(self.id),
        })
    }

    /// Concatenate tensors along `axis`; shapes must agree elsewhere.
    pub fn concat(parts: &[&Tensor<T>], axis: usize) -> Result<Tensor<T>> {
        let first = parts.first().ok_or_else(|| Error::invalid("concat: no inputs"))?;
        let graph = first.graph.clone();
        let base = first.shape();
        let rank = base.len();
        if axis >= rank {
            return Err(Error::InvalidAxis {
                op: "concat",
                axis,
                rank,
            });
        }
        let mut axis_total = 0usize;
        for p in parts {
            if !graph.same_graph(&p.graph) {
                return Err(Error::invalid("concat: tensors from different graphs"));
            }
            let s = p.shape();
            if s.len() != rank
                || s.iter()
                    .zip(base.iter())
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::ShapeMismatch {
                    op: "concat",
                    lhs: base.clone(),
                    rhs: s,
                });
            }
            axis_total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = axis_total;
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let (data, needs) = graph.with_tape(|t| {
            let mut out = vec![T::zero(); numel(&out_shape)];
            let mut needs = false;
            let mut offset = 0usize;
            for p in parts {
                let n = &t.nodes[p.id];
                needs |= n.needs_flow;
                let alen = n.shape[axis];
                for o in 0..outer {
                    let src = &n.data[o * alen * inner..(o + 1) * alen * inner];
                    let dst_start = o * axis_total * inner + offset * inner;
                    out[dst_start..dst_start + alen * inner].copy_from_slice(src);
                }
                offset += alen;
            }
            (out, needs)
        });
        graph.push(Node {
            shape: out_shape,
            data,
            grad: None,
            requires_grad: false,
            needs_flow: needs,
            op: Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        })
    }

    /// Contiguous slice `[start, start+len)` along `axis`.
    pub fn slice_axis(&self, axis: usize, start: usize, len: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        let rank = shape.len();
        if axis >= rank {
            return Err(Error::InvalidAxis {
                op: "slice_axis",
                axis,
                rank,
            });
        }
        if start + len > shape[axis] || len == 0 {
            return Err(Error::invalid(format!(
                "slice_axis: [{start}, {}) out of bounds for axis {axis} of {:?}",
                start + len,
                shape
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let alen = shape[axis];
        let mut out_shape = shape.clone();
        out_shape[axis] = len;
        let (data, needs) = self.graph.with_tape(|t| {
            let n = &t.nodes[self.id];
            let mut out = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = o * alen * inner + start * inner;
                out.extend_from_slice(&n.data[base..base + len * inner]);
            }
            (out, n.needs_flow)
        });
        self.graph.push(Node {
            shape: out_shape,
            data,
            grad: None,
            requires_grad: false,
            needs_flow: needs,
            op: Op::SliceAxis {
                x: self.id,
                axis,
                start,
                len,
            },
        })
    }

    /// Row `r` of a rank-2 tensor as a vector.
    pub fn row(&self, r: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::invalid("row: tensor must be rank 2"));
        }
        let cols = shape[1];
        self.slice_axis(0, r, 1)?.reshape(&[cols])
    }

    /// Per-row column gather on a rank-2 tensor: `y[r] = x[r, cols[r]]`.
    pub fn gather_cols(&self, cols: &[usize]) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.len() != 2 || cols.len() != shape[0] {
            return Err(Error::invalid(format!(
                "gather_cols: need rank-2 with one column index per row, got {:?} and {} indices",
                shape,
                cols.len()
            )));
        }
        if cols.iter().any(|&c| c >= shape[1]) {
            return Err(Error::invalid("gather_cols: column index out of range"));
        }
        let (data, needs) = self.graph.with_tape(|t| {
            let n = &t.nodes[self.id];
            (
                cols.iter()
                    .enumerate()
                    .map(|(r, &c)| n.data[r * shape[1] + c])
                    .collect::<Vec<T>>(),
                n.needs_flow,
            )
        });
        self.graph.push(Node {
            shape: vec![shape[0]],
            data,
            grad: None,
            requires_grad: false,
            needs_flow: needs,
            op: Op::GatherCols {
                x: self.id,
                cols: cols.to_vec(),
            },
        })
    }

    /// `y[r, c] = x[r, c] + row[c]` for rank-2 `x`.
    pub fn add_row_broadcast(&self, row: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.len() != 2 || row.numel() != shape[1] {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                lhs: shape,
                rhs: row.shape(),
            });
        }
        let (data, needs) = self.graph.with_tape(|t| {
            let n = &t.nodes[self.id];
            let rv = &t.nodes[row.id].data;
            let cols = shape[1];
            let mut out = n.data.clone();
            for r in 0..shape[0] {
                for c in 0..cols {
                    out[r * cols + c] = out[r * cols + c] + rv[c];
                }
            }
            (out, n.needs_flow || t.nodes[row.id].needs_flow)
        });
        self.graph.push(Node {
            shape: self.shape(),
            data,
            grad: None,
            requires_grad: false,
            needs_flow: needs,
            op: Op::AddRowBroadcast {
                x: self.id,
                row: row.id,
            },
        })
    }

    /// `y[r, c] = x[r, c] + col[r]` for rank-2 `x`.
    pub fn add_col_broadcast(&self, col: &Tensor<T>) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.len() != 2 || col.numel() != shape[0] {
            return Err(Error::ShapeMismatch {
                op: "add_col_broadcast",
                lhs: shape,
                rhs: col.shape(),
            });
        }
        let (data, needs) = self.graph.with_tape(|t| {
            let n = &t.nodes[self.id];
            let cv = &t.nodes[col.id].data;
            let cols = shape[1];
            let mut out = n.data.clone();
            for r in 0..shape[0] {
                for c in 0..cols {
                    out[r * cols + c] = out[r * cols + c] + cv[r];
                }
            }
            (out, n.needs_flow || t.nodes[col.id].needs_flow)
        });
        self.graph.push(Node {
            shape: self.shape(),
            data,
            grad: None,
            requires_grad: false,
            needs_flow: needs,
            op: Op::AddColBroadcast {
                x: self.id,
                col: col.id,
            },
        })
    }

    fn vec_axis0(&self, v: &Tensor<T>, mul: bool) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.is_empty() || v.numel() != shape[0] {
            return Err(Error::ShapeMismatch {
                op: if mul { "mul_vec_axis0" } else { "add_vec_axis0" },
                lhs: shape,
                rhs: v.shape(),
            });
        }
        let inner: usize = shape[1..].iter().product();
        let (data, needs) = self.graph.with_tape(|t| {
            let n = &t.nodes[self.id];
            let vv = &t.nodes[v.id].data;
            let mut out = n.data.clone();
            for d in 0..shape[0] {
                let sl = &mut out[d * inner..(d + 1) * inner];
                if mul {
                    for e in sl.iter_mut() {
                        *e = *e * vv[d];
                    }
                } else {
                    for e in sl.iter_mut() {
                        *e = *e + vv[d];
                    }
                }
            }
            (out, n.needs_flow || t.nodes[v.id].needs_flow)
        });
        self.graph.push(Node {
            shape: self.shape(),
            data,
            grad: None,
            requires_grad: false,
            needs_flow: needs,
            op: if mul {
                Op::MulVecAxis0 { x: self.id, v: v.id }
            } else {
                Op::AddVecAxis0 { x: self.id, v: v.id }
            },
        })
    }

    /// Scale every axis-0 slice by the matching element of `v`; for a
    /// `[D, ..]` tensor and `[D]` vector this is `v ⊙ x` broadcast over the
    /// trailing axes.
    pub fn mul_vec_axis0(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        self.vec_axis0(v, true)
    }

    pub fn add_vec_axis0(&self, v: &Tensor<T>) -> Result<Tensor<T>> {
        self.vec_axis0(v, false)
    }

    /// Strided windows of a rank-1 signal: `[L] -> [frames, win]`.
    pub fn unfold(&self, win: usize, hop: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.len() != 1 {
            return Err(Error::invalid("unfold: input must be rank 1"));
        }
        let len = shape[0];
        if len < win {
            return Err(Error::invalid(format!(
                "unfold: signal length {len} shorter than window {win}"
            )));
        }
        let frames = (len - win) / hop + 1;
        let (data, needs) = self.graph.with_tape(|t| {
            let n = &t.nodes[self.id];
            let mut out = Vec::with_capacity(frames * win);
            for f in 0..frames {
                out.extend_from_slice(&n.data[f * hop..f * hop + win]);
            }
            (out, n.needs_flow)
        });
        self.graph.push(Node {
            shape: vec![frames, win],
            data,
            grad: None,
            requires_grad: false,
            needs_flow: needs,
            op: Op::Unfold {
                x: self.id,
                win,
                hop,
            },
        })
    }

    /// Overlap-add of `[frames, win]` windows at stride `hop` into a signal of
    /// length `out_len` (plain sum, no normalization).
    pub fn fold(&self, hop: usize, out_len: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::invalid("fold: input must be rank 2 [frames, win]"));
        }
        let (frames, win) = (shape[0], shape[1]);
        if frames == 0 || (frames - 1) * hop + win > out_len {
            return Err(Error::invalid(format!(
                "fold: {frames} frames of {win} at hop {hop} exceed output length {out_len}"
            )));
        }
        let (data, needs) = self.graph.with_tape(|t| {
            let n = &t.nodes[self.id];
            let mut out = vec![T::zero(); out_len];
            for f in 0..frames {
                let src = &n.data[f * win..(f + 1) * win];
                let dst = &mut out[f * hop..f * hop + win];
                for (d, &s) in dst.iter_mut().zip(src.iter()) {
                    *d = *d + s;
                }
            }
            (out, n.needs_flow)
        });
        self.graph.push(Node {
            shape: vec![out_len],
            data,
            grad: None,
            requires_grad: false,
            needs_flow: needs,
            op: Op::Fold {
                x: self.id,
                hop,
                out_len,
            },
        })
    }

    /// Pack `[D, I]` into half-overlapping segments `[D, S, K]`, zero-padding
    /// the tail so the hop grid covers the signal.
    pub(crate) fn split_segments_op(&self, seg_len: usize, hop: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(Error::invalid("split_segments: input must be rank 2 [D, I]"));
        }
        let (d, i_len) = (shape[0], shape[1]);
        let padded = padded_len(i_len, seg_len, hop);
        let s = (padded - seg_len) / hop + 1;
        let (data, needs) = self.graph.with_tape(|t| {
            let n = &t.nodes[self.id];
            let mut out = vec![T::zero(); d * s * seg_len];
            for di in 0..d {
                let src = &n.data[di * i_len..(di + 1) * i_len];
                for si in 0..s {
                    for k in 0..seg_len {
                        let p = si * hop + k;
                        if p < i_len {
                            out[(di * s + si) * seg_len + k] = src[p];
                        }
                    }
                }
            }
            (out, n.needs_flow)
        });
        self.graph.push(Node {
            shape: vec![d, s, seg_len],
            data,
            grad: None,
            requires_grad: false,
            needs_flow: needs,
            op: Op::SplitSegments { x: self.id, hop },
        })
    }

    /// Coverage-normalized overlap-add back to `[D, out_len]`.
    pub(crate) fn merge_segments_op(&self, hop: usize, out_len: usize) -> Result<Tensor<T>> {
        let shape = self.shape();
        if shape.len() != 3 {
            return Err(Error::invalid("merge_segments: input must be rank 3 [D, S, K]"));
        }
        let (d, s, k) = (shape[0], shape[1], shape[2]);
        let padded = (s - 1) * hop + k;
        if out_len > padded {
            return Err(Error::invalid(format!(
                "merge_segments: output length {out_len} exceeds padded coverage {padded}"
            )));
        }
        let mut coverage = vec![T::zero(); padded];
        for si in 0..s {
            for ki in 0..k {
                coverage[si * hop + ki] = coverage[si * hop + ki] + T::one();
            }
        }
        let (data, needs) = self.graph.with_tape(|t| {
            let n = &t.nodes[self.id];
            let mut out = vec![T::zero(); d * out_len];
            for di in 0..d {
                let dst = &mut out[di * out_len..(di + 1) * out_len];
                for si in 0..s {
                    for ki in 0..k {
                        let p = si * hop + ki;
                        if p < out_len {
                            dst[p] = dst[p] + n.data[(di * s + si) * k + ki];
                        }
                    }
                }
                for (p, v) in dst.iter_mut().enumerate() {
                    *v = *v / coverage[p];
                }
            }
            (out, n.needs_flow)
        });
        self.graph.push(Node {
            shape: vec![d, out_len],
            data,
            grad: None,
            requires_grad: false,
            needs_flow: needs,
            op: Op::MergeSegments {
                x: self.id,
                hop,
                out_len,
                coverage,
            },
        })
    }
}

fn needs_flow_of<T: Scalar>(n: &Node<T>) -> bool {
    n.needs_flow
}

/// Padded length so that `(len' - seg)` is a nonnegative multiple of `hop`.
pub(crate) fn padded_len(len: usize, seg: usize, hop: usize) -> usize {
    if len <= seg {
        seg
    } else {
        let over = (len - seg) % hop;
        if over == 0 {
            len
        } else {
            len + hop - over
        }
    }
}

fn acc_into<T: Scalar>(slot: &mut Option<Vec<T>>, len: usize, f: impl FnOnce(&mut [T])) {
    let buf = slot.get_or_insert_with(|| vec![T::zero(); len]);
    f(buf);
}

/// Propagate the adjoint `g` of node `id` into its inputs' flow slots.
pub(crate) fn backward_step<T: Scalar>(
    tape: &Tape<T>,
    id: usize,
    g: &[T],
    flow: &mut [Option<Vec<T>>],
) {
    let nodes = &tape.nodes;
    let wants = |i: usize| nodes[i].needs_flow;
    match &nodes[id].op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            for (&src, sign) in [(a, T::one()), (b, T::one())].iter().map(|(s, v)| (*s, *v)) {
                if !wants(src) {
                    continue;
                }
                let n = nodes[src].data.len();
                acc_into(&mut flow[src], n, |buf| {
                    if n == 1 && g.len() > 1 {
                        buf[0] = buf[0] + g.iter().copied().sum::<T>() * sign;
                    } else {
                        for (o, &gv) in buf.iter_mut().zip(g.iter()) {
                            *o = *o + gv * sign;
                        }
                    }
                });
            }
        }
        Op::Sub(a, b) => {
            if wants(*a) {
                let n = nodes[*a].data.len();
                acc_into(&mut flow[*a], n, |buf| {
                    if n == 1 && g.len() > 1 {
                        buf[0] = buf[0] + g.iter().copied().sum::<T>();
                    } else {
                        for (o, &gv) in buf.iter_mut().zip(g.iter()) {
                            *o = *o + gv;
                        }
                    }
                });
            }
            if wants(*b) {
                let n = nodes[*b].data.len();
                acc_into(&mut flow[*b], n, |buf| {
                    if n == 1 && g.len() > 1 {
                        buf[0] = buf[0] - g.iter().copied().sum::<T>();
                    } else {
                        for (o, &gv) in buf.iter_mut().zip(g.iter()) {
                            *o = *o - gv;
                        }
                    }
                });
            }
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (&nodes[*a].data, &nodes[*b].data);
            if wants(*a) {
                acc_into(&mut flow[*a], ad.len(), |buf| {
                    if ad.len() == 1 && g.len() > 1 {
                        buf[0] = buf[0]
                            + g.iter().zip(bd.iter()).map(|(&gv, &bv)| gv * bv).sum::<T>();
                    } else if bd.len() == 1 && g.len() > 1 {
                        for (o, &gv) in buf.iter_mut().zip(g.iter()) {
                            *o = *o + gv * bd[0];
                        }
                    } else {
                        for ((o, &gv), &bv) in buf.iter_mut().zip(g.iter()).zip(bd.iter()) {
                            *o = *o + gv * bv;
                        }
                    }
                });
            }
            if wants(*b) {
                acc_into(&mut flow[*b], bd.len(), |buf| {
                    if bd.len() == 1 && g.len() > 1 {
                        buf[0] = buf[0]
                            + g.iter().zip(ad.iter()).map(|(&gv, &av)| gv * av).sum::<T>();
                    } else if ad.len() == 1 && g.len() > 1 {
                        for (o, &gv) in buf.iter_mut().zip(g.iter()) {
                            *o = *o + gv * ad[0];
                        }
                    } else {
                        for ((o, &gv), &av) in buf.iter_mut().zip(g.iter()).zip(ad.iter()) {
                            *o = *o + gv * av;
                        }
                    }
                });
            }
        }
        Op::Div(a, b) => {
            let (ad, bd) = (&nodes[*a].data, &nodes[*b].data);
            let pick = |d: &[T], i: usize| if d.len() == 1 { d[0] } else { d[i] };
            if wants(*a) {
                acc_into(&mut flow[*a], ad.len(), |buf| {
                    if ad.len() == 1 && g.len() > 1 {
                        let mut s = T::zero();
                        for (i, &gv) in g.iter().enumerate() {
                            s = s + gv / pick(bd, i);
                        }
                        buf[0] = buf[0] + s;
                    } else {
                        for (i, (o, &gv)) in buf.iter_mut().zip(g.iter()).enumerate() {
                            *o = *o + gv / pick(bd, i);
                        }
                    }
                });
            }
            if wants(*b) {
                acc_into(&mut flow[*b], bd.len(), |buf| {
                    if bd.len() == 1 && g.len() > 1 {
                        let mut s = T::zero();
                        for (i, &gv) in g.iter().enumerate() {
                            let bv = bd[0];
                            s = s - gv * pick(ad, i) / (bv * bv);
                        }
                        buf[0] = buf[0] + s;
                    } else {
                        for (i, (o, &gv)) in buf.iter_mut().zip(g.iter()).enumerate() {
                            let bv = bd[i];
                            *o = *o - gv * pick(ad, i) / (bv * bv);
                        }
                    }
                });
            }
        }
        Op::Neg(x) => {
            if wants(*x) {
                acc_into(&mut flow[*x], g.len(), |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g.iter()) {
                        *o = *o - gv;
                    }
                });
            }
        }
        Op::Scale(x, c) => {
            if wants(*x) {
                let c = *c;
                acc_into(&mut flow[*x], g.len(), |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g.iter()) {
                        *o = *o + gv * c;
                    }
                });
            }
        }
        Op::AddScalar(x, _) => {
            if wants(*x) {
                acc_into(&mut flow[*x], g.len(), |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g.iter()) {
                        *o = *o + gv;
                    }
                });
            }
        }
        Op::Relu(x) => {
            if wants(*x) {
                let xd = &nodes[*x].data;
                acc_into(&mut flow[*x], xd.len(), |buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g.iter()).zip(xd.iter()) {
                        if xv > T::zero() {
                            *o = *o + gv;
                        }
                    }
                });
            }
        }
        Op::PRelu { x, slope } => {
            let xd = &nodes[*x].data;
            let s = nodes[*slope].data[0];
            if wants(*x) {
                acc_into(&mut flow[*x], xd.len(), |buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g.iter()).zip(xd.iter()) {
                        *o = *o + if xv > T::zero() { gv } else { gv * s };
                    }
                });
            }
            if wants(*slope) {
                let mut ds = T::zero();
                for (&gv, &xv) in g.iter().zip(xd.iter()) {
                    if xv <= T::zero() {
                        ds = ds + gv * xv;
                    }
                }
                acc_into(&mut flow[*slope], 1, |buf| buf[0] = buf[0] + ds);
            }
        }
        Op::Sigmoid(x) => {
            if wants(*x) {
                let yd = &nodes[id].data;
                acc_into(&mut flow[*x], yd.len(), |buf| {
                    for ((o, &gv), &yv) in buf.iter_mut().zip(g.iter()).zip(yd.iter()) {
                        *o = *o + gv * yv * (T::one() - yv);
                    }
                });
            }
        }
        Op::Tanh(x) => {
            if wants(*x) {
                let yd = &nodes[id].data;
                acc_into(&mut flow[*x], yd.len(), |buf| {
                    for ((o, &gv), &yv) in buf.iter_mut().zip(g.iter()).zip(yd.iter()) {
                        *o = *o + gv * (T::one() - yv * yv);
                    }
                });
            }
        }
        Op::Exp(x) => {
            if wants(*x) {
                let yd = &nodes[id].data;
                acc_into(&mut flow[*x], yd.len(), |buf| {
                    for ((o, &gv), &yv) in buf.iter_mut().zip(g.iter()).zip(yd.iter()) {
                        *o = *o + gv * yv;
                    }
                });
            }
        }
        Op::Ln(x) => {
            if wants(*x) {
                let xd = &nodes[*x].data;
                acc_into(&mut flow[*x], xd.len(), |buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g.iter()).zip(xd.iter()) {
                        *o = *o + gv / xv;
                    }
                });
            }
        }
        Op::Sqrt(x) => {
            if wants(*x) {
                let yd = &nodes[id].data;
                let two = T::from_f64_c(2.0);
                acc_into(&mut flow[*x], yd.len(), |buf| {
                    for ((o, &gv), &yv) in buf.iter_mut().zip(g.iter()).zip(yd.iter()) {
                        *o = *o + gv / (two * yv);
                    }
                });
            }
        }
        Op::Abs(x) => {
            if wants(*x) {
                let xd = &nodes[*x].data;
                acc_into(&mut flow[*x], xd.len(), |buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g.iter()).zip(xd.iter()) {
                        if xv > T::zero() {
                            *o = *o + gv;
                        } else if xv < T::zero() {
                            *o = *o - gv;
                        }
                    }
                });
            }
        }
        Op::ClampMin { x, min } => {
            if wants(*x) {
                let xd = &nodes[*x].data;
                let min = *min;
                acc_into(&mut flow[*x], xd.len(), |buf| {
                    for ((o, &gv), &xv) in buf.iter_mut().zip(g.iter()).zip(xd.iter()) {
                        if xv > min {
                            *o = *o + gv;
                        }
                    }
                });
            }
        }
        Op::SumAll(x) => {
            if wants(*x) {
                let n = nodes[*x].data.len();
                let gv = g[0];
                acc_into(&mut flow[*x], n, |buf| {
                    for o in buf.iter_mut() {
                        *o = *o + gv;
                    }
                });
            }
        }
        Op::MeanAll(x) => {
            if wants(*x) {
                let n = nodes[*x].data.len();
                let gv = g[0] / T::from_f64_c(n as f64);
                acc_into(&mut flow[*x], n, |buf| {
                    for o in buf.iter_mut() {
                        *o = *o + gv;
                    }
                });
            }
        }
        Op::SumLast { x, last } => {
            if wants(*x) {
                let n = nodes[*x].data.len();
                let last = *last;
                acc_into(&mut flow[*x], n, |buf| {
                    for (r, &gv) in g.iter().enumerate() {
                        for o in buf[r * last..(r + 1) * last].iter_mut() {
                            *o = *o + gv;
                        }
                    }
                });
            }
        }
        Op::MeanLast { x, last } => {
            if wants(*x) {
                let n = nodes[*x].data.len();
                let last = *last;
                let denom = T::from_f64_c(last as f64);
                acc_into(&mut flow[*x], n, |buf| {
                    for (r, &gv) in g.iter().enumerate() {
                        let gvn = gv / denom;
                        for o in buf[r * last..(r + 1) * last].iter_mut() {
                            *o = *o + gvn;
                        }
                    }
                });
            }
        }
        Op::SoftmaxLast { x, last } => {
            if wants(*x) {
                let yd = &nodes[id].data;
                let last = *last;
                let rows = yd.len() / last;
                acc_into(&mut flow[*x], yd.len(), |buf| {
                    for r in 0..rows {
                        let y = &yd[r * last..(r + 1) * last];
                        let gr = &g[r * last..(r + 1) * last];
                        let dot: T = y.iter().zip(gr.iter()).map(|(&yv, &gv)| yv * gv).sum();
                        let o = &mut buf[r * last..(r + 1) * last];
                        for ((ov, &yv), &gv) in o.iter_mut().zip(y.iter()).zip(gr.iter()) {
                            *ov = *ov + yv * (gv - dot);
                        }
                    }
                });
            }
        }
        Op::LayerNormLast {
            x,
            gain,
            bias,
            last,
            xhat,
            inv_std,
        } => {
            let last = *last;
            let rows = xhat.len() / last;
            let gn = &nodes[*gain].data;
            let len_t = T::from_f64_c(last as f64);
            if wants(*x) {
                acc_into(&mut flow[*x], xhat.len(), |buf| {
                    for r in 0..rows {
                        let gr = &g[r * last..(r + 1) * last];
                        let xh = &xhat[r * last..(r + 1) * last];
                        let mut sum_gy = T::zero();
                        let mut sum_gy_xh = T::zero();
                        for c in 0..last {
                            let gy = gr[c] * gn[c];
                            sum_gy = sum_gy + gy;
                            sum_gy_xh = sum_gy_xh + gy * xh[c];
                        }
                        let mean_gy = sum_gy / len_t;
                        let mean_gy_xh = sum_gy_xh / len_t;
                        let istd = inv_std[r];
                        let o = &mut buf[r * last..(r + 1) * last];
                        for c in 0..last {
                            let gy = gr[c] * gn[c];
                            o[c] = o[c] + istd * (gy - mean_gy - xh[c] * mean_gy_xh);
                        }
                    }
                });
            }
            if wants(*gain) {
                acc_into(&mut flow[*gain], last, |buf| {
                    for r in 0..rows {
                        for c in 0..last {
                            buf[c] = buf[c] + g[r * last + c] * xhat[r * last + c];
                        }
                    }
                });
            }
            if wants(*bias) {
                acc_into(&mut flow[*bias], last, |buf| {
                    for r in 0..rows {
                        for c in 0..last {
                            buf[c] = buf[c] + g[r * last + c];
                        }
                    }
                });
            }
        }
        Op::Bmm {
            a,
            b,
            batch,
            m,
            k,
            n,
            broadcast_b,
        } => {
            let (batch, m, k, n) = (*batch, *m, *k, *n);
            let ad = &nodes[*a].data;
            let bd = &nodes[*b].data;
            if wants(*a) {
                acc_into(&mut flow[*a], ad.len(), |buf| {
                    for bt in 0..batch {
                        let g_sl = &g[bt * m * n..(bt + 1) * m * n];
                        let b_sl = if *broadcast_b {
                            &bd[..]
                        } else {
                            &bd[bt * k * n..(bt + 1) * k * n]
                        };
                        mm_nt_acc(g_sl, b_sl, &mut buf[bt * m * k..(bt + 1) * m * k], m, n, k);
                    }
                });
            }
            if wants(*b) {
                acc_into(&mut flow[*b], bd.len(), |buf| {
                    for bt in 0..batch {
                        let g_sl = &g[bt * m * n..(bt + 1) * m * n];
                        let a_sl = &ad[bt * m * k..(bt + 1) * m * k];
                        let dst = if *broadcast_b {
                            &mut buf[..]
                        } else {
                            &mut buf[bt * k * n..(bt + 1) * k * n]
                        };
                        mm_tn_acc(a_sl, g_sl, dst, m, k, n);
                    }
                });
            }
        }
        Op::Permute { x, perm } => {
            if wants(*x) {
                let out_shape = &nodes[id].shape;
                let inv = inverse_perm(perm);
                let (gx, _) = permute_data(g, out_shape, &inv);
                acc_into(&mut flow[*x], gx.len(), |buf| {
                    for (o, gv) in buf.iter_mut().zip(gx.into_iter()) {
                        *o = *o + gv;
                    }
                });
            }
        }
        Op::Reshape(x) => {
            if wants(*x) {
                acc_into(&mut flow[*x], g.len(), |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g.iter()) {
                        *o = *o + gv;
                    }
                });
            }
        }
        Op::Concat { parts, axis } => {
            let out_shape = &nodes[id].shape;
            let outer: usize = out_shape[..*axis].iter().product();
            let inner: usize = out_shape[*axis + 1..].iter().product();
            let total = out_shape[*axis];
            let mut offset = 0usize;
            for &p in parts {
                let alen = nodes[p].shape[*axis];
                if wants(p) {
                    let plen = nodes[p].data.len();
                    acc_into(&mut flow[p], plen, |buf| {
                        for o in 0..outer {
                            let src_start = o * total * inner + offset * inner;
                            let dst = &mut buf[o * alen * inner..(o + 1) * alen * inner];
                            for (d, &gv) in dst.iter_mut().zip(g[src_start..src_start + alen * inner].iter())
                            {
                                *d = *d + gv;
                            }
                        }
                    });
                }
                offset += alen;
            }
        }
        Op::SliceAxis {
            x,
            axis,
            start,
            len,
        } => {
            if wants(*x) {
                let in_shape = &nodes[*x].shape;
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[*axis + 1..].iter().product();
                let alen = in_shape[*axis];
                let n = nodes[*x].data.len();
                acc_into(&mut flow[*x], n, |buf| {
                    for o in 0..outer {
                        let dst_start = o * alen * inner + *start * inner;
                        let src = &g[o * *len * inner..(o + 1) * *len * inner];
                        for (d, &gv) in buf[dst_start..dst_start + *len * inner].iter_mut().zip(src.iter())
                        {
                            *d = *d + gv;
                        }
                    }
                });
            }
        }
        Op::GatherCols { x, cols } => {
            if wants(*x) {
                let cols_n = nodes[*x].shape[1];
                let n = nodes[*x].data.len();
                acc_into(&mut flow[*x], n, |buf| {
                    for (r, &c) in cols.iter().enumerate() {
                        buf[r * cols_n + c] = buf[r * cols_n + c] + g[r];
                    }
                });
            }
        }
        Op::AddRowBroadcast { x, row } => {
            let cols = nodes[*row].data.len();
            if wants(*x) {
                acc_into(&mut flow[*x], g.len(), |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g.iter()) {
                        *o = *o + gv;
                    }
                });
            }
            if wants(*row) {
                acc_into(&mut flow[*row], cols, |buf| {
                    for (i, &gv) in g.iter().enumerate() {
                        buf[i % cols] = buf[i % cols] + gv;
                    }
                });
            }
        }
        Op::AddColBroadcast { x, col } => {
            let rows = nodes[*col].data.len();
            let cols = g.len() / rows;
            if wants(*x) {
                acc_into(&mut flow[*x], g.len(), |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g.iter()) {
                        *o = *o + gv;
                    }
                });
            }
            if wants(*col) {
                acc_into(&mut flow[*col], rows, |buf| {
                    for r in 0..rows {
                        let s: T = g[r * cols..(r + 1) * cols].iter().copied().sum();
                        buf[r] = buf[r] + s;
                    }
                });
            }
        }
        Op::MulVecAxis0 { x, v } => {
            let d = nodes[*v].data.len();
            let inner = g.len() / d;
            let xd = &nodes[*x].data;
            let vd = &nodes[*v].data;
            if wants(*x) {
                acc_into(&mut flow[*x], xd.len(), |buf| {
                    for di in 0..d {
                        let vv = vd[di];
                        for (o, &gv) in buf[di * inner..(di + 1) * inner]
                            .iter_mut()
                            .zip(g[di * inner..(di + 1) * inner].iter())
                        {
                            *o = *o + gv * vv;
                        }
                    }
                });
            }
            if wants(*v) {
                acc_into(&mut flow[*v], d, |buf| {
                    for di in 0..d {
                        let s: T = g[di * inner..(di + 1) * inner]
                            .iter()
                            .zip(xd[di * inner..(di + 1) * inner].iter())
                            .map(|(&gv, &xv)| gv * xv)
                            .sum();
                        buf[di] = buf[di] + s;
                    }
                });
            }
        }
        Op::AddVecAxis0 { x, v } => {
            let d = nodes[*v].data.len();
            let inner = g.len() / d;
            if wants(*x) {
                acc_into(&mut flow[*x], g.len(), |buf| {
                    for (o, &gv) in buf.iter_mut().zip(g.iter()) {
                        *o = *o + gv;
                    }
                });
            }
            if wants(*v) {
                acc_into(&mut flow[*v], d, |buf| {
                    for di in 0..d {
                        let s: T = g[di * inner..(di + 1) * inner].iter().copied().sum();
                        buf[di] = buf[di] + s;
                    }
                });
            }
        }
        Op::Unfold { x, win, hop } => {
            if wants(*x) {
                let n = nodes[*x].data.len();
                let frames = g.len() / win;
                acc_into(&mut flow[*x], n, |buf| {
                    for f in 0..frames {
                        for w in 0..*win {
                            buf[f * hop + w] = buf[f * hop + w] + g[f * win + w];
                        }
                    }
                });
            }
        }
        Op::Fold { x, hop, .. } => {
            if wants(*x) {
                let shape = &nodes[*x].shape;
                let (frames, win) = (shape[0], shape[1]);
                acc_into(&mut flow[*x], frames * win, |buf| {
                    for f in 0..frames {
                        for w in 0..win {
                            buf[f * win + w] = buf[f * win + w] + g[f * hop + w];
                        }
                    }
                });
            }
        }
        Op::SplitSegments { x, hop } => {
            if wants(*x) {
                let in_shape = &nodes[*x].shape;
                let (d, i_len) = (in_shape[0], in_shape[1]);
                let out_shape = &nodes[id].shape;
                let (s, k) = (out_shape[1], out_shape[2]);
                acc_into(&mut flow[*x], d * i_len, |buf| {
                    for di in 0..d {
                        for si in 0..s {
                            for ki in 0..k {
                                let p = si * hop + ki;
                                if p < i_len {
                                    buf[di * i_len + p] =
                                        buf[di * i_len + p] + g[(di * s + si) * k + ki];
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::MergeSegments {
            x,
            hop,
            out_len,
            coverage,
        } => {
            if wants(*x) {
                let in_shape = &nodes[*x].shape;
                let (d, s, k) = (in_shape[0], in_shape[1], in_shape[2]);
                acc_into(&mut flow[*x], d * s * k, |buf| {
                    for di in 0..d {
                        for si in 0..s {
                            for ki in 0..k {
                                let p = si * hop + ki;
                                if p < *out_len {
                                    buf[(di * s + si) * k + ki] = buf[(di * s + si) * k + ki]
                                        + g[di * out_len + p] / coverage[p];
                                }
                            }
                        }
                    }
                });
            }
        }
        Op::Lstm(rec) => super::lstm::backward_lstm(nodes, rec, g, flow),
    }
}

/// Convenience free function mirroring [`Tensor::matmul`].
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    a.matmul(b)
}

/// Convenience free function mirroring [`Tensor::softmax`].
pub fn softmax<T: Scalar>(x: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    x.softmax(axis)
}

/// Convenience free function mirroring [`Tensor::layer_norm`].
pub fn layer_norm<T: Scalar>(
    x: &Tensor<T>,
    axis: usize,
    gain: &Tensor<T>,
    bias: &Tensor<T>,
    eps: T,
) -> Result<Tensor<T>> {
    x.layer_norm(axis, gain, bias, eps)
}

#[cfg(test)]
mod tests {
    use crate::tensor::Graph;

    #[test]
    fn matmul_identity() {
        let g: Graph<f64> = Graph::new();
        let a = g.constant(vec![1.0, 0.0, 0.0, 1.0], &[2, 2]).unwrap();
        let b = g.constant(vec![3.0, 4.0], &[2, 1]).unwrap();
        let c = a.matmul(&b).unwrap();
        assert_eq!(c.shape(), vec![2, 1]);
        assert_eq!(c.data(), vec![3.0, 4.0]);
    }

    #[test]
    fn matmul_hand_case() {
        let g: Graph<f64> = Graph::new();
        let a = g.constant(vec![1.0, 2.0], &[1, 2]).unwrap();
        let b = g.constant(vec![3.0, 4.0], &[2, 1]).unwrap();
        assert_eq!(a.matmul(&b).unwrap().data(), vec![11.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let g: Graph<f64> = Graph::new();
        let a = g.constant(vec![0.0; 6], &[2, 3]).unwrap();
        let b = g.constant(vec![0.0; 4], &[2, 2]).unwrap();
        let err = a.matmul(&b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2, 2]"), "{err}");
    }

    #[test]
    fn softmax_symmetry_and_stability() {
        let g: Graph<f64> = Graph::new();
        let x = g.constant(vec![0.0, 0.0, 0.0], &[3]).unwrap();
        let y = x.softmax(0).unwrap().data();
        for v in y {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        let x = g.constant(vec![1000.0, 0.0], &[2]).unwrap();
        let y = x.softmax(0).unwrap().data();
        assert!((y[0] - 1.0).abs() < 1e-12 && y[1].abs() < 1e-12);
    }

    #[test]
    fn softmax_matches_direct_formula() {
        let g: Graph<f64> = Graph::new();
        let vals = vec![0.31, -1.2, 2.4, 0.05, -0.77];
        let x = g.constant(vals.clone(), &[5]).unwrap();
        let y = x.softmax(0).unwrap().data();
        let denom: f64 = vals.iter().map(|v| v.exp()).sum();
        for (yi, vi) in y.iter().zip(vals.iter()) {
            assert!((yi - vi.exp() / denom).abs() < 1e-12);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let g: Graph<f64> = Graph::new();
        let x = g
            .constant(vec![0.3, -2.0, 1.7, 0.0, 4.0, -4.0], &[2, 3])
            .unwrap();
        let y = x.softmax(1).unwrap().data();
        for r in 0..2 {
            let s: f64 = y[r * 3..(r + 1) * 3].iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
            assert!(y[r * 3..(r + 1) * 3].iter().all(|&v| (0.0..=1.0).contains(&v)));
        }
    }

    #[test]
    fn layer_norm_constant_slice_is_zero() {
        let g: Graph<f64> = Graph::new();
        let x = g.constant(vec![5.0, 5.0, 5.0, 5.0], &[2, 2]).unwrap();
        let gain = g.constant(vec![1.0, 1.0], &[2]).unwrap();
        let bias = g.constant(vec![0.0, 0.0], &[2]).unwrap();
        let y = x.layer_norm(1, &gain, &bias, 1e-5).unwrap().data();
        assert!(y.iter().all(|v| v.abs() < 1e-9));
    }

    #[test]
    fn layer_norm_two_point_slice() {
        let g: Graph<f64> = Graph::new();
        let x = g.constant(vec![1.0, 3.0], &[1, 2]).unwrap();
        let gain = g.constant(vec![1.0, 1.0], &[2]).unwrap();
        let bias = g.constant(vec![0.0, 0.0], &[2]).unwrap();
        let y = x.layer_norm(1, &gain, &bias, 1e-5).unwrap().data();
        assert!((y[0] + 1.0).abs() < 1e-4 && (y[1] - 1.0).abs() < 1e-4);
    }

    #[test]
    fn permute_roundtrip() {
        let g: Graph<f64> = Graph::new();
        let x = g
            .constant((0..24).map(f64::from).collect(), &[2, 3, 4])
            .unwrap();
        let y = x.permute(&[2, 0, 1]).unwrap();
        assert_eq!(y.shape(), vec![4, 2, 3]);
        let back = y.permute(&[1, 2, 0]).unwrap();
        assert_eq!(back.data(), x.data());
    }

    #[test]
    fn concat_and_slice_roundtrip() {
        let g: Graph<f64> = Graph::new();
        let a = g.constant(vec![1.0, 2.0, 3.0, 4.0], &[2, 2]).unwrap();
        let b = g.constant(vec![5.0, 6.0, 7.0, 8.0], &[2, 2]).unwrap();
        let c = crate::tensor::Tensor::concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), vec![2, 4]);
        assert_eq!(c.data(), vec![1.0, 2.0, 5.0, 6.0, 3.0, 4.0, 7.0, 8.0]);
        let a2 = c.slice_axis(1, 0, 2).unwrap();
        assert_eq!(a2.data(), a.data());
        let b2 = c.slice_axis(1, 2, 2).unwrap();
        assert_eq!(b2.data(), b.data());
    }

    #[test]
    fn unfold_fold_adjoint_shapes() {
        let g: Graph<f64> = Graph::new();
        let x = g.constant((0..10).map(f64::from).collect(), &[10]).unwrap();
        let f = x.unfold(4, 2).unwrap();
        assert_eq!(f.shape(), vec![4, 4]);
        let y = f.fold(2, 10).unwrap();
        assert_eq!(y.shape(), vec![10]);
        // interiors are double-counted by plain overlap-add
        let d = y.data();
        assert_eq!(d[0], 0.0);
        assert_eq!(d[4], 8.0);
    }

    #[test]
    fn broadcast_scalar_mul_backward() {
        let g: Graph<f64> = Graph::new();
        let x = g.leaf(vec![1.0, 2.0, 3.0], &[3]).unwrap();
        let s = g.leaf(vec![2.0], &[1]).unwrap();
        let y = x.mul(&s).unwrap();
        assert_eq!(y.data(), vec![2.0, 4.0, 6.0]);
        let loss = y.sum_all().unwrap();
        loss.backward().unwrap();
        assert_eq!(x.grad().unwrap(), vec![2.0, 2.0, 2.0]);
        assert_eq!(s.grad().unwrap(), vec![6.0]);
    }
}
