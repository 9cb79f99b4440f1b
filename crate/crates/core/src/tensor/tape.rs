use std::borrow::Cow;

use super::Tensor;
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    /// `a[m,k] · b[k,p]`, or `a[m,k] · b[p,k]ᵀ` when `trans_b`.
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        p: usize,
        trans_b: bool,
    },
    /// Batched version of `MatMul` over a leading axis.
    BatchMatMul {
        a: Var,
        b: Var,
        batch: usize,
        m: usize,
        k: usize,
        p: usize,
        trans_b: bool,
    },
    /// Swaps the last two axes of `[batch, rows, cols]`.
    Transpose {
        x: Var,
        batch: usize,
        rows: usize,
        cols: usize,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Tanh {
        x: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    Sum {
        x: Var,
    },
    ScatterCols {
        x: Var,
        columns: Vec<Option<usize>>,
        cols: usize,
        width: usize,
    },
    GatherRows {
        table: Var,
        indices: Vec<Option<usize>>,
        width: usize,
    },
    Reshape {
        x: Var,
    },
    SliceLast {
        x: Var,
        start: usize,
        len: usize,
        width: usize,
    },
    ConcatLast {
        parts: Vec<(Var, usize)>,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        cols: usize,
    },
}

struct Node<'a> {
    value: Cow<'a, [f64]>,
    shape: Vec<usize>,
    op: Op,
    requires_grad: bool,
}

/// Records a forward computation for reverse-mode differentiation.
///
/// Leaves registered with [`Tape::leaf`] borrow their data, so parameter
/// tables are never copied onto the tape. Drop the tape (or [`Tape::clear`]
/// it) before mutating the borrowed parameters.
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
    grad_enabled: bool,
}

impl Default for Tape<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// A tape that records values only; nothing on it requires a gradient.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec())
            .expect("tape nodes always hold consistent shapes")
    }

    fn push(
        &mut self,
        value: Cow<'a, [f64]>,
        shape: Vec<usize>,
        op: Op,
        requires_grad: bool,
    ) -> Var {
        debug_assert_eq!(value.len(), shape.iter().product::<usize>());
        self.nodes.push(Node {
            value,
            shape,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// Registers a borrowed tensor; it is differentiated iff `t.requires_grad`.
    pub fn leaf(&mut self, t: &'a Tensor) -> Var {
        self.push(
            Cow::Borrowed(t.data()),
            t.shape().to_vec(),
            Op::Leaf,
            t.requires_grad,
        )
    }

    /// Registers an owned tensor; it is differentiated iff `t.requires_grad`.
    pub fn owned(&mut self, t: Tensor) -> Var {
        let requires_grad = t.requires_grad;
        let shape = t.shape().to_vec();
        let Tensor { data, .. } = t;
        self.push(Cow::Owned(data), shape, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.owned(t))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// `a · bᵀ` without materialising the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let op = if trans_b { "matmul_nt" } else { "matmul" };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let (m, k) = (sa[0], sa[1]);
        let (kb, p) = if trans_b {
            (sb[1], sb[0])
        } else {
            (sb[0], sb[1])
        };
        if k != kb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let mut out = vec![0.0; m * p];
        gemm(self.value(a), self.value(b), &mut out, m, k, p, trans_b);
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Cow::Owned(out),
            vec![m, p],
            Op::MatMul {
                a,
                b,
                m,
                k,
                p,
                trans_b,
            },
            rg,
        ))
    }

    /// Batched product over the leading axis: `a[B,m,k] · b[B,k,p]`.
    pub fn bmm(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, false)
    }

    /// Batched `a[B,m,k] · b[B,p,k]ᵀ`.
    pub fn bmm_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.bmm_impl(a, b, true)
    }

    fn bmm_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let err = || Error::Shape {
            op: "bmm",
            lhs: sa.to_vec(),
            rhs: sb.to_vec(),
        };
        if sa.len() != 3 || sb.len() != 3 || sa[0] != sb[0] {
            return Err(err());
        }
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let (kb, p) = if trans_b {
            (sb[2], sb[1])
        } else {
            (sb[1], sb[2])
        };
        if k != kb {
            return Err(err());
        }
        let mut out = vec![0.0; batch * m * p];
        {
            let (va, vb) = (self.value(a), self.value(b));
            for i in 0..batch {
                gemm(
                    &va[i * m * k..(i + 1) * m * k],
                    &vb[i * k * p..(i + 1) * k * p],
                    &mut out[i * m * p..(i + 1) * m * p],
                    m,
                    k,
                    p,
                    trans_b,
                );
            }
        }
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(
            Cow::Owned(out),
            vec![batch, m, p],
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                p,
                trans_b,
            },
            rg,
        ))
    }

    /// Swaps the last two axes of a matrix or a batch of matrices.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let (batch, rows, cols) = match *s.as_slice() {
            [r, c] => (1, r, c),
            [b, r, c] => (b, r, c),
            _ => {
                return Err(Error::contract(format!(
                    "transpose needs rank 2 or 3, got {s:?}"
                )))
            }
        };
        let v = self.value(x);
        let mut out = vec![0.0; v.len()];
        for (src, dst) in v
            .chunks_exact(rows * cols)
            .zip(out.chunks_exact_mut(rows * cols))
        {
            for r in 0..rows {
                for c in 0..cols {
                    dst[c * rows + r] = src[r * cols + c];
                }
            }
        }
        let mut shape = s;
        let rank = shape.len();
        shape.swap(rank - 2, rank - 1);
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            },
            rg,
        ))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Add { a, b }, rg))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        let rg = self.any_grad(&[a, b]);
        let shape = self.shape(a).to_vec();
        Ok(self.push(Cow::Owned(out), shape, Op::Mul { a, b }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        let rg = self.any_grad(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(Cow::Owned(out), shape, Op::Scale { x, c }, rg)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let out: Vec<f64> = self.value(x).iter().map(|v| v.tanh()).collect();
        let rg = self.any_grad(&[x]);
        let shape = self.shape(x).to_vec();
        self.push(Cow::Owned(out), shape, Op::Tanh { x }, rg)
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.softmax_impl(x, axis, None)
    }

    /// Softmax along `axis` over the entries where `keep` is true; the
    /// others come out as exactly zero, and a slice with nothing kept is
    /// all zero.
    pub fn softmax_masked(&mut self, x: Var, axis: usize, keep: &[bool]) -> Result<Var> {
        if keep.len() != self.value(x).len() {
            return Err(Error::Shape {
                op: "softmax mask",
                lhs: self.shape(x).to_vec(),
                rhs: vec![keep.len()],
            });
        }
        self.softmax_impl(x, axis, Some(keep))
    }

    fn softmax_impl(&mut self, x: Var, axis: usize, keep: Option<&[bool]>) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let len = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.value(x).to_vec();
        let mut buf = Vec::with_capacity(len);
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                buf.clear();
                buf.extend(
                    (0..len)
                        .map(|j| base + j * inner)
                        .filter(|&at| keep.is_none_or(|k| k[at]))
                        .map(|at| out[at]),
                );
                softmax_slice(&mut buf);
                let mut next = buf.iter();
                for j in 0..len {
                    let at = base + j * inner;
                    out[at] = if keep.is_none_or(|k| k[at]) {
                        *next.next().unwrap()
                    } else {
                        0.0
                    };
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Sum of all entries, as a one-element tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        let rg = self.any_grad(&[x]);
        self.push(Cow::Owned(vec![s]), vec![1], Op::Sum { x }, rg)
    }

    /// Row lookup into a matrix; `None` yields a zero row.
    pub fn gather_rows(&mut self, table: Var, indices: &[Option<usize>]) -> Result<Var> {
        let s = self.shape(table);
        if s.len() != 2 {
            return Err(Error::contract(format!(
                "gather_rows needs a matrix, got {s:?}"
            )));
        }
        if indices.is_empty() {
            return Err(Error::contract("gather_rows with no indices"));
        }
        let (rows, width) = (s[0], s[1]);
        if let Some(bad) = indices.iter().flatten().find(|&&i| i >= rows) {
            return Err(Error::contract(format!(
                "row index {bad} out of range for table with {rows} rows"
            )));
        }
        let v = self.value(table);
        let mut out = vec![0.0; indices.len() * width];
        for (dst, idx) in out.chunks_exact_mut(width).zip(indices) {
            if let Some(i) = idx {
                dst.copy_from_slice(&v[i * width..(i + 1) * width]);
            }
        }
        let rg = self.any_grad(&[table]);
        Ok(self.push(
            Cow::Owned(out),
            vec![indices.len(), width],
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
                width,
            },
            rg,
        ))
    }

    /// Sums the entries of each row of `x` (`[rows, cols]`) into buckets:
    /// entry `(r, c)` is added to column `columns[r * cols + c]` of a
    /// `[rows, width]` result, or dropped when that is `None`.
    pub fn scatter_cols(&mut self, x: Var, columns: &[Option<usize>], width: usize) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 || columns.len() != s[0] * s[1] {
            return Err(Error::Shape {
                op: "scatter_cols",
                lhs: s.to_vec(),
                rhs: vec![columns.len()],
            });
        }
        if let Some(bad) = columns.iter().flatten().find(|&&c| c >= width) {
            return Err(Error::contract(format!(
                "bucket {bad} out of range for width {width}"
            )));
        }
        let (rows, cols) = (s[0], s[1]);
        let v = self.value(x);
        let mut out = vec![0.0; rows * width];
        for ((dst, src), idx) in out
            .chunks_exact_mut(width)
            .zip(v.chunks_exact(cols))
            .zip(columns.chunks_exact(cols))
        {
            for (&x, c) in src.iter().zip(idx) {
                if let Some(c) = *c {
                    dst[c] += x;
                }
            }
        }
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Cow::Owned(out),
            vec![rows, width],
            Op::ScatterCols {
                x,
                columns: columns.to_vec(),
                cols,
                width,
            },
            rg,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(x).len() {
            return Err(Error::Shape {
                op: "reshape",
                lhs: self.shape(x).to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let out = self.value(x).to_vec();
        let rg = self.any_grad(&[x]);
        Ok(self.push(Cow::Owned(out), shape.to_vec(), Op::Reshape { x }, rg))
    }

    /// Columns `start..start+len` of the trailing axis.
    pub fn slice_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let width = *shape.last().unwrap();
        if len == 0 || start + len > width {
            return Err(Error::contract(format!(
                "slice {start}..{} outside trailing extent {width}",
                start + len
            )));
        }
        let out: Vec<f64> = self
            .value(x)
            .chunks_exact(width)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut out_shape = shape;
        *out_shape.last_mut().unwrap() = len;
        let rg = self.any_grad(&[x]);
        Ok(self.push(
            Cow::Owned(out),
            out_shape,
            Op::SliceLast {
                x,
                start,
                len,
                width,
            },
            rg,
        ))
    }

    /// Concatenates along the trailing axis; leading extents must agree.
    pub fn concat_last(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        let lead = &first[..first.len() - 1];
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if &s[..s.len() - 1] != lead {
                return Err(Error::Shape {
                    op: "concat_last",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            widths.push(*s.last().unwrap());
        }
        let total: usize = widths.iter().sum();
        let rows: usize = lead.iter().product();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let mut shape = first;
        *shape.last_mut().unwrap() = total;
        let rg = self.any_grad(parts);
        Ok(self.push(
            Cow::Owned(out),
            shape,
            Op::ConcatLast {
                parts: parts.iter().copied().zip(widths).collect(),
            },
            rg,
        ))
    }

    /// Stacks matrices with equal widths on top of each other.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.shape(parts[0]).to_vec();
        if first.len() != 2 {
            return Err(Error::contract("concat_rows needs matrices"));
        }
        let mut rows = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != 2 || s[1] != first[1] {
                return Err(Error::Shape {
                    op: "concat_rows",
                    lhs: first.clone(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
        }
        let mut out = Vec::with_capacity(rows * first[1]);
        for &p in parts {
            out.extend_from_slice(self.value(p));
        }
        let rg = self.any_grad(parts);
        Ok(self.push(
            Cow::Owned(out),
            vec![rows, first[1]],
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        ))
    }

    /// Mean over rows of `-log softmax(logits[r])[targets[r]]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() != 2 || s[0] != targets.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: s,
                rhs: vec![targets.len()],
            });
        }
        let cols = s[1];
        if targets.iter().any(|&t| t >= cols) {
            return Err(Error::contract("cross_entropy target out of range"));
        }
        let v = self.value(logits);
        let mut total = 0.0;
        for (row, &t) in v.chunks_exact(cols).zip(targets) {
            total += log_sum_exp(row) - row[t];
        }
        let loss = total / targets.len() as f64;
        let rg = self.any_grad(&[logits]);
        Ok(self.push(
            Cow::Owned(vec![loss]),
            vec![1],
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                cols,
            },
            rg,
        ))
    }

    /// Reverse sweep from a one-element `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::new();
        grads.resize_with(loss.0 + 1, || None);
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            self.propagate(&node.op, &node.value, &g, &mut grads);
            // Leaves keep their gradient for the caller.
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(g);
            }
        }
        Ok(Gradients { grads })
    }

    fn acc<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let n = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    fn propagate(&self, op: &Op, out: &[f64], g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match *op {
            Op::Leaf => {}
            Op::MatMul {
                a,
                b,
                m,
                k,
                p,
                trans_b,
            } => {
                let (va, vb) = (self.value(a), self.value(b));
                if let Some(ga) = self.acc(grads, a) {
                    matmul_grad_a(g, vb, ga, m, k, p, trans_b);
                }
                if let Some(gb) = self.acc(grads, b) {
                    matmul_grad_b(g, va, gb, m, k, p, trans_b);
                }
            }
            Op::BatchMatMul {
                a,
                b,
                batch,
                m,
                k,
                p,
                trans_b,
            } => {
                let (va, vb) = (self.value(a), self.value(b));
                if let Some(ga) = self.acc(grads, a) {
                    for i in 0..batch {
                        matmul_grad_a(
                            &g[i * m * p..(i + 1) * m * p],
                            &vb[i * k * p..(i + 1) * k * p],
                            &mut ga[i * m * k..(i + 1) * m * k],
                            m,
                            k,
                            p,
                            trans_b,
                        );
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for i in 0..batch {
                        matmul_grad_b(
                            &g[i * m * p..(i + 1) * m * p],
                            &va[i * m * k..(i + 1) * m * k],
                            &mut gb[i * k * p..(i + 1) * k * p],
                            m,
                            k,
                            p,
                            trans_b,
                        );
                    }
                }
            }
            Op::Transpose {
                x,
                batch,
                rows,
                cols,
            } => {
                if let Some(gx) = self.acc(grads, x) {
                    let size = rows * cols;
                    for i in 0..batch {
                        let (dst, src) = (
                            &mut gx[i * size..(i + 1) * size],
                            &g[i * size..(i + 1) * size],
                        );
                        for r in 0..rows {
                            for c in 0..cols {
                                dst[r * cols + c] += src[c * rows + r];
                            }
                        }
                    }
                }
            }
            Op::Add { a, b } => {
                for v in [a, b] {
                    if let Some(gv) = self.acc(grads, v) {
                        gv.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::Mul { a, b } => {
                let (va, vb) = (self.value(a), self.value(b));
                if let Some(ga) = self.acc(grads, a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(vb) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = self.acc(grads, b) {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(va) {
                        *d += s * x;
                    }
                }
            }
            Op::Scale { x, c } => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s * c);
                }
            }
            Op::Tanh { x } => {
                if let Some(gx) = self.acc(grads, x) {
                    for ((d, s), y) in gx.iter_mut().zip(g).zip(out) {
                        *d += s * (1.0 - y * y);
                    }
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                if let Some(gx) = self.acc(grads, x) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let base = o * len * inner + i;
                            let idx = |j: usize| base + j * inner;
                            let dotp: f64 = (0..len).map(|j| g[idx(j)] * out[idx(j)]).sum();
                            for j in 0..len {
                                gx[idx(j)] += out[idx(j)] * (g[idx(j)] - dotp);
                            }
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::ScatterCols {
                x,
                ref columns,
                cols,
                width,
            } => {
                if let Some(gx) = self.acc(grads, x) {
                    for ((dst, src), idx) in gx
                        .chunks_exact_mut(cols)
                        .zip(g.chunks_exact(width))
                        .zip(columns.chunks_exact(cols))
                    {
                        for (d, c) in dst.iter_mut().zip(idx) {
                            if let Some(c) = *c {
                                *d += src[c];
                            }
                        }
                    }
                }
            }
            Op::GatherRows {
                table,
                ref indices,
                width,
            } => {
                if let Some(gt) = self.acc(grads, table) {
                    for (src, idx) in g.chunks_exact(width).zip(indices) {
                        if let Some(i) = idx {
                            gt[i * width..(i + 1) * width]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                }
            }
            Op::Reshape { x } => {
                if let Some(gx) = self.acc(grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, s)| *d += s);
                }
            }
            Op::SliceLast {
                x,
                start,
                len,
                width,
            } => {
                if let Some(gx) = self.acc(grads, x) {
                    for (dst, src) in gx.chunks_exact_mut(width).zip(g.chunks_exact(len)) {
                        dst[start..start + len]
                            .iter_mut()
                            .zip(src)
                            .for_each(|(d, s)| *d += s);
                    }
                }
            }
            Op::ConcatLast { ref parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let rows = g.len() / total;
                let mut offset = 0;
                for &(p, w) in parts {
                    if let Some(gp) = self.acc(grads, p) {
                        for r in 0..rows {
                            let src = &g[r * total + offset..r * total + offset + w];
                            gp[r * w..(r + 1) * w]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, s)| *d += s);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows { ref parts } => {
                let mut offset = 0;
                for &p in parts {
                    let n = self.value(p).len();
                    if let Some(gp) = self.acc(grads, p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(d, s)| *d += s);
                    }
                    offset += n;
                }
            }
            Op::CrossEntropy {
                logits,
                ref targets,
                cols,
            } => {
                let v = self.value(logits);
                let scale = g[0] / targets.len() as f64;
                if let Some(gl) = self.acc(grads, logits) {
                    let mut probs = vec![0.0; cols];
                    for ((dst, row), &t) in gl
                        .chunks_exact_mut(cols)
                        .zip(v.chunks_exact(cols))
                        .zip(targets)
                    {
                        probs.copy_from_slice(row);
                        softmax_slice(&mut probs);
                        for (j, (d, p)) in dst.iter_mut().zip(&probs).enumerate() {
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            *d += scale * (p - onehot);
                        }
                    }
                }
            }
        }
    }
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    /// `None` when `v` was not reached from the loss or needs no gradient.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

pub(crate) fn softmax_slice(x: &mut [f64]) {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in x.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in x.iter_mut() {
        *v /= total;
    }
}

fn log_sum_exp(x: &[f64]) -> f64 {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + x.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// `out += a[m,k] · b`, where `b` is `[k,p]` or `[p,k]` (transposed).
fn gemm(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize, trans_b: bool) {
    if !trans_b {
        gemm_nn(a, b, out, m, k, p);
    } else if m < 4 {
        // Same per-entry summation order as `gemm_nn`, so results do not
        // depend on which branch ran.
        for (orow, arow) in out.chunks_exact_mut(p).zip(a.chunks_exact(k)).take(m) {
            for (o, brow) in orow.iter_mut().zip(b.chunks_exact(k)) {
                let mut s = *o;
                for (&av, &bv) in arow.iter().zip(brow) {
                    if av != 0.0 {
                        s += av * bv;
                    }
                }
                *o = s;
            }
        }
    } else {
        // One transpose turns row-times-row dots into contiguous row updates.
        let mut bt = vec![0.0; k * p];
        for j in 0..p {
            for kk in 0..k {
                bt[kk * p + j] = b[j * k + kk];
            }
        }
        gemm_nn(a, &bt, out, m, k, p);
    }
}

/// Dispatches to a copy of `$kernel` compiled for AVX2 when the CPU has it.
/// Only the vector width changes (no fused multiply-add), so both copies
/// produce identical bits.
macro_rules! with_avx2 {
    ($name:ident, $avx:ident, $kernel:ident, ($($arg:ident: $ty:ty),*)) => {
        fn $name($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            if std::arch::is_x86_feature_detected!("avx2") {
                // SAFETY: AVX2 support was just checked.
                return unsafe { $avx($($arg),*) };
            }
            $kernel($($arg),*)
        }

        #[cfg(target_arch = "x86_64")]
        #[target_feature(enable = "avx2")]
        unsafe fn $avx($($arg: $ty),*) {
            $kernel($($arg),*)
        }
    };
}

with_avx2!(gemm_nn, gemm_nn_avx2, gemm_nn_kernel, (a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize));
with_avx2!(
    matmul_grad_b,
    matmul_grad_b_avx2,
    matmul_grad_b_kernel,
    (g: &[f64], a: &[f64], gb: &mut [f64], m: usize, k: usize, p: usize, trans_b: bool)
);

#[inline(always)]
fn gemm_nn_kernel(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, p: usize) {
    for (orow, arow) in out.chunks_exact_mut(p).zip(a.chunks_exact(k)).take(m) {
        for (&av, brow) in arow.iter().zip(b.chunks_exact(p)) {
            if av == 0.0 {
                continue;
            }
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

fn matmul_grad_a(
    g: &[f64],
    b: &[f64],
    ga: &mut [f64],
    m: usize,
    k: usize,
    p: usize,
    trans_b: bool,
) {
    if trans_b {
        // ga[m,k] += g[m,p] · b[p,k]
        gemm(g, b, ga, m, p, k, false);
    } else {
        // ga[m,k] += g[m,p] · b[k,p]ᵀ
        gemm(g, b, ga, m, p, k, true);
    }
}

#[inline(always)]
fn matmul_grad_b_kernel(
    g: &[f64],
    a: &[f64],
    gb: &mut [f64],
    m: usize,
    k: usize,
    p: usize,
    trans_b: bool,
) {
    if trans_b {
        // gb[p,k] += gᵀ[p,m] · a[m,k]
        for (grow, arow) in g.chunks_exact(p).zip(a.chunks_exact(k)).take(m) {
            for (&gv, gbrow) in grow.iter().zip(gb.chunks_exact_mut(k)) {
                if gv == 0.0 {
                    continue;
                }
                for (d, &x) in gbrow.iter_mut().zip(arow) {
                    *d += gv * x;
                }
            }
        }
    } else {
        // gb[k,p] += aᵀ[k,m] · g[m,p]
        for (grow, arow) in g.chunks_exact(p).zip(a.chunks_exact(k)).take(m) {
            for (&av, gbrow) in arow.iter().zip(gb.chunks_exact_mut(p)) {
                if av == 0.0 {
                    continue;
                }
                for (d, &x) in gbrow.iter_mut().zip(grow) {
                    *d += av * x;
                }
            }
        }
    }
}
