//! Minimal dense tensor type with reverse-mode automatic differentiation.
//!
//! A [`Tape`] owns every tensor created during a forward pass and records,
//! per tensor, the operation that produced it. [`Tape::backward`] replays the
//! recording in reverse, accumulating gradients into every tensor marked
//! `requires_grad`. The op set is exactly what the model forward pass needs:
//! 2-D matmul variants, elementwise arithmetic and activations, masked
//! softmax, masked column-max, concatenation/stacking, embedding lookup and
//! dropout. No general broadcasting; all shape alignment is explicit.

use num_traits::Float;

/// Floating precision a run executes in. Chosen once per run, not per tensor.
pub trait Real:
    Float + std::fmt::Debug + std::fmt::Display + std::iter::Sum + Send + Sync + 'static
{
    const DTYPE: Dtype;
    fn from_f64(v: f64) -> Self;
    fn as_f64(self) -> f64;
}

impl Real for f32 {
    const DTYPE: Dtype = Dtype::F32;
    fn from_f64(v: f64) -> Self {
        v as f32
    }
    fn as_f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    const DTYPE: Dtype = Dtype::F64;
    fn from_f64(v: f64) -> Self {
        v
    }
    fn as_f64(self) -> f64 {
        self
    }
}

/// Element type tag, serialized into checkpoint tensor directories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn from_code(code: u8) -> Option<Dtype> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: empty support, every entry is masked")]
    EmptySupport { op: &'static str },
    #[error("backward needs a scalar loss, got shape {shape:?}")]
    NonScalarLoss { shape: Vec<usize> },
    #[error("{op}: index {index} out of bounds for size {size}")]
    IndexOutOfBounds {
        op: &'static str,
        index: usize,
        size: usize,
    },
    #[error("{op}: expected {expected}, got shape {shape:?}")]
    RankMismatch {
        op: &'static str,
        expected: &'static str,
        shape: Vec<usize>,
    },
}

pub type Result<V> = std::result::Result<V, TensorError>;

/// Handle to a tensor living on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorRef(usize);

/// Recorded operation: input handles plus whatever the backward rule needs.
#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// C[p,r] = A[p,q] B[q,r]
    MatMul { a: TensorRef, b: TensorRef },
    /// C[q,r] = A[p,q]^T B[p,r]
    MatMulTn { a: TensorRef, b: TensorRef },
    /// y[p] = A[p,q] x[q]
    MatVec { a: TensorRef, x: TensorRef },
    /// y[q] = x[p]^T A[p,q]
    VecMat { x: TensorRef, a: TensorRef },
    Add { a: TensorRef, b: TensorRef },
    Sub { a: TensorRef, b: TensorRef },
    Mul { a: TensorRef, b: TensorRef },
    Tanh { x: TensorRef },
    Sigmoid { x: TensorRef },
    Relu { x: TensorRef },
    Scale { x: TensorRef, c: f64 },
    Sum { x: TensorRef },
    SoftmaxMasked { x: TensorRef, mask: Vec<bool> },
    /// Per-row max over unmasked columns; argmax recorded for backward.
    MaxCols {
        x: TensorRef,
        argmax: Vec<usize>,
    },
    Concat { parts: Vec<TensorRef> },
    /// 1-D vectors of length d become the columns of a [d, p] matrix.
    HStack { cols: Vec<TensorRef> },
    /// Matrices with equal row counts concatenated along columns.
    ConcatCols { parts: Vec<TensorRef> },
    Slice { x: TensorRef, start: usize },
    /// Column j of a [p,q] matrix as a 1-D vector.
    Col { x: TensorRef, j: usize },
    /// out[p,q] = g[p,q] * w[q]
    RowsMul { g: TensorRef, w: TensorRef },
    /// Gather columns of table [d, v] -> [d, len(cols)].
    Lookup { table: TensorRef, cols: Vec<usize> },
    Dropout {
        x: TensorRef,
        mask: Vec<bool>,
        keep: f64,
    },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::MatMulTn { .. } => "matmul_tn",
            Op::MatVec { .. } => "matvec",
            Op::VecMat { .. } => "vecmat",
            Op::Add { .. } => "add",
            Op::Sub { .. } => "sub",
            Op::Mul { .. } => "mul",
            Op::Tanh { .. } => "tanh",
            Op::Sigmoid { .. } => "sigmoid",
            Op::Relu { .. } => "relu",
            Op::Scale { .. } => "scale",
            Op::Sum { .. } => "sum",
            Op::SoftmaxMasked { .. } => "softmax_masked",
            Op::MaxCols { .. } => "max_cols",
            Op::Concat { .. } => "concat",
            Op::HStack { .. } => "hstack",
            Op::ConcatCols { .. } => "concat_cols",
            Op::Slice { .. } => "slice",
            Op::Col { .. } => "col",
            Op::RowsMul { .. } => "rows_mul",
            Op::Lookup { .. } => "lookup",
            Op::Dropout { .. } => "dropout",
        }
    }
}

struct Node<T> {
    data: Vec<T>,
    shape: Vec<usize>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
    op: Op,
}

/// Arena of tensors plus the operation recording for one forward pass.
///
/// Handles index into the arena; every input of an op precedes the op's
/// output, so one reverse sweep visits each op exactly once.
pub struct Tape<T: Real> {
    nodes: Vec<Node<T>>,
    backward_fault: Option<&'static str>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            backward_fault: None,
        }
    }

    /// Diagnostic hook: scales the upstream gradient of every op with the
    /// given name by 1.5 during backward. Lets the gradient checker prove it
    /// catches a wrong backward rule and reports which op was corrupted.
    pub fn inject_backward_fault(&mut self, op_name: &'static str) {
        self.backward_fault = Some(op_name);
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool, op: Op) -> TensorRef {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        self.nodes.push(Node {
            data,
            shape,
            requires_grad,
            grad: None,
            op,
        });
        TensorRef(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, data: Vec<T>, shape: Vec<usize>, requires_grad: bool) -> TensorRef {
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "leaf data length {} does not match shape {:?}",
            data.len(),
            shape
        );
        self.push(data, shape, requires_grad, Op::Leaf)
    }

    pub fn scalar(&mut self, v: T) -> TensorRef {
        self.push(vec![v], vec![1], false, Op::Leaf)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> TensorRef {
        let n = shape.iter().product();
        self.push(vec![T::zero(); n], shape, false, Op::Leaf)
    }

    pub fn data(&self, t: TensorRef) -> &[T] {
        &self.nodes[t.0].data
    }

    pub fn shape(&self, t: TensorRef) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn numel(&self, t: TensorRef) -> usize {
        self.nodes[t.0].data.len()
    }

    /// Value of a one-element tensor.
    pub fn value(&self, t: TensorRef) -> T {
        debug_assert_eq!(self.numel(t), 1);
        self.nodes[t.0].data[0]
    }

    pub fn grad(&self, t: TensorRef) -> Option<&[T]> {
        self.nodes[t.0].grad.as_deref()
    }

    pub fn data_f64(&self, t: TensorRef) -> Vec<f64> {
        self.nodes[t.0].data.iter().map(|v| v.as_f64()).collect()
    }

    fn requires(&self, t: TensorRef) -> bool {
        self.nodes[t.0].requires_grad
    }

    fn rows_cols(&self, t: TensorRef, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(t) {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::RankMismatch {
                op,
                expected: "a 2-D tensor",
                shape: other.to_vec(),
            }),
        }
    }

    fn vec_len(&self, t: TensorRef, op: &'static str) -> Result<usize> {
        match self.shape(t) {
            [n] => Ok(*n),
            other => Err(TensorError::RankMismatch {
                op,
                expected: "a 1-D tensor",
                shape: other.to_vec(),
            }),
        }
    }

    // ---- ops ----

    pub fn matmul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (p, q) = self.rows_cols(a, "matmul")?;
        let (q2, r) = self.rows_cols(b, "matmul")?;
        if q != q2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); p * r];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            for i in 0..p {
                for kk in 0..q {
                    let av = ad[i * q + kk];
                    if av == T::zero() {
                        continue;
                    }
                    let brow = &bd[kk * r..(kk + 1) * r];
                    let orow = &mut out[i * r..(i + 1) * r];
                    for j in 0..r {
                        orow[j] = orow[j] + av * brow[j];
                    }
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, vec![p, r], rg, Op::MatMul { a, b }))
    }

    /// `a` transposed times `b`: A[p,q]^T B[p,r] -> [q,r].
    pub fn matmul_tn(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        let (p, q) = self.rows_cols(a, "matmul_tn")?;
        let (p2, r) = self.rows_cols(b, "matmul_tn")?;
        if p != p2 {
            return Err(TensorError::ShapeMismatch {
                op: "matmul_tn",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let mut out = vec![T::zero(); q * r];
        {
            let ad = &self.nodes[a.0].data;
            let bd = &self.nodes[b.0].data;
            for kk in 0..p {
                for i in 0..q {
                    let av = ad[kk * q + i];
                    if av == T::zero() {
                        continue;
                    }
                    let brow = &bd[kk * r..(kk + 1) * r];
                    let orow = &mut out[i * r..(i + 1) * r];
                    for j in 0..r {
                        orow[j] = orow[j] + av * brow[j];
                    }
                }
            }
        }
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, vec![q, r], rg, Op::MatMulTn { a, b }))
    }

    pub fn matvec(&mut self, a: TensorRef, x: TensorRef) -> Result<TensorRef> {
        let (p, q) = self.rows_cols(a, "matvec")?;
        let n = self.vec_len(x, "matvec")?;
        if q != n {
            return Err(TensorError::ShapeMismatch {
                op: "matvec",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(x).to_vec(),
            });
        }
        let mut out = vec![T::zero(); p];
        {
            let ad = &self.nodes[a.0].data;
            let xd = &self.nodes[x.0].data;
            for i in 0..p {
                let mut s = T::zero();
                let arow = &ad[i * q..(i + 1) * q];
                for j in 0..q {
                    s = s + arow[j] * xd[j];
                }
                out[i] = s;
            }
        }
        let rg = self.requires(a) || self.requires(x);
        Ok(self.push(out, vec![p], rg, Op::MatVec { a, x }))
    }

    /// Row vector times matrix: x[p]^T A[p,q] -> [q].
    pub fn vecmat(&mut self, x: TensorRef, a: TensorRef) -> Result<TensorRef> {
        let n = self.vec_len(x, "vecmat")?;
        let (p, q) = self.rows_cols(a, "vecmat")?;
        if p != n {
            return Err(TensorError::ShapeMismatch {
                op: "vecmat",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(a).to_vec(),
            });
        }
        let mut out = vec![T::zero(); q];
        {
            let ad = &self.nodes[a.0].data;
            let xd = &self.nodes[x.0].data;
            for i in 0..p {
                let xv = xd[i];
                if xv == T::zero() {
                    continue;
                }
                let arow = &ad[i * q..(i + 1) * q];
                for j in 0..q {
                    out[j] = out[j] + xv * arow[j];
                }
            }
        }
        let rg = self.requires(a) || self.requires(x);
        Ok(self.push(out, vec![q], rg, Op::VecMat { x, a }))
    }

    fn ewise_binary(
        &mut self,
        op_name: &'static str,
        a: TensorRef,
        b: TensorRef,
        f: impl Fn(T, T) -> T,
        op: Op,
    ) -> Result<TensorRef> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::ShapeMismatch {
                op: op_name,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<T> = self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.requires(a) || self.requires(b);
        Ok(self.push(out, shape, rg, op))
    }

    pub fn add(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.ewise_binary("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.ewise_binary("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: TensorRef, b: TensorRef) -> Result<TensorRef> {
        self.ewise_binary("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    fn ewise_unary(&mut self, x: TensorRef, f: impl Fn(T) -> T, op: Op) -> TensorRef {
        let out: Vec<T> = self.nodes[x.0].data.iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        self.push(out, shape, rg, op)
    }

    pub fn tanh(&mut self, x: TensorRef) -> TensorRef {
        self.ewise_unary(x, |v| v.tanh(), Op::Tanh { x })
    }

    pub fn sigmoid(&mut self, x: TensorRef) -> TensorRef {
        self.ewise_unary(x, |v| T::one() / (T::one() + (-v).exp()), Op::Sigmoid { x })
    }

    pub fn relu(&mut self, x: TensorRef) -> TensorRef {
        self.ewise_unary(x, |v| if v > T::zero() { v } else { T::zero() }, Op::Relu { x })
    }

    pub fn scale(&mut self, x: TensorRef, c: f64) -> TensorRef {
        let cv = T::from_f64(c);
        self.ewise_unary(x, |v| v * cv, Op::Scale { x, c })
    }

    pub fn sum(&mut self, x: TensorRef) -> TensorRef {
        let s: T = self.nodes[x.0].data.iter().copied().sum();
        let rg = self.requires(x);
        self.push(vec![s], vec![1], rg, Op::Sum { x })
    }

    /// Softmax over the unmasked entries of a 1-D tensor. Masked logits get
    /// -1e9 added before the max-subtracted softmax, and masked outputs are
    /// zeroed, so no infinities ever land on the tape.
    pub fn softmax_masked(&mut self, x: TensorRef, mask: &[bool]) -> Result<TensorRef> {
        let n = self.vec_len(x, "softmax_masked")?;
        if n != mask.len() {
            return Err(TensorError::ShapeMismatch {
                op: "softmax_masked",
                lhs: vec![n],
                rhs: vec![mask.len()],
            });
        }
        if !mask.iter().any(|&m| m) {
            return Err(TensorError::EmptySupport {
                op: "softmax_masked",
            });
        }
        let neg = T::from_f64(-1e9);
        let xd = &self.nodes[x.0].data;
        let adj: Vec<T> = xd
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { v } else { v + neg })
            .collect();
        let mut mx = adj[0];
        for &v in &adj[1..] {
            if v > mx {
                mx = v;
            }
        }
        let mut exps: Vec<T> = adj.iter().map(|&v| (v - mx).exp()).collect();
        for (e, &m) in exps.iter_mut().zip(mask) {
            if !m {
                *e = T::zero();
            }
        }
        let total: T = exps.iter().copied().sum();
        let out: Vec<T> = exps.iter().map(|&e| e / total).collect();
        let rg = self.requires(x);
        Ok(self.push(
            out,
            vec![n],
            rg,
            Op::SoftmaxMasked {
                x,
                mask: mask.to_vec(),
            },
        ))
    }

    /// Per-row maximum of a [p,q] tensor over unmasked columns. Ties break to
    /// the lowest column index; gradient routes only to the argmax entry.
    pub fn max_cols(&mut self, x: TensorRef, col_mask: &[bool]) -> Result<TensorRef> {
        let (p, q) = self.rows_cols(x, "max_cols")?;
        if q != col_mask.len() {
            return Err(TensorError::ShapeMismatch {
                op: "max_cols",
                lhs: vec![p, q],
                rhs: vec![col_mask.len()],
            });
        }
        if !col_mask.iter().any(|&m| m) {
            return Err(TensorError::EmptySupport { op: "max_cols" });
        }
        let xd = &self.nodes[x.0].data;
        let mut out = Vec::with_capacity(p);
        let mut argmax = Vec::with_capacity(p);
        for i in 0..p {
            let row = &xd[i * q..(i + 1) * q];
            let mut best: Option<(usize, T)> = None;
            for (j, (&v, &m)) in row.iter().zip(col_mask).enumerate() {
                if !m {
                    continue;
                }
                match best {
                    None => best = Some((j, v)),
                    Some((_, bv)) if v > bv => best = Some((j, v)),
                    _ => {}
                }
            }
            let (j, v) = best.unwrap();
            out.push(v);
            argmax.push(j);
        }
        let rg = self.requires(x);
        Ok(self.push(out, vec![p], rg, Op::MaxCols { x, argmax }))
    }

    /// Indices of the per-row maxima the last `max_cols` op would pick.
    pub fn argmax_cols(&self, t: TensorRef) -> Option<&[usize]> {
        match &self.nodes[t.0].op {
            Op::MaxCols { argmax, .. } => Some(argmax),
            _ => None,
        }
    }

    /// Concatenate 1-D tensors end to end.
    pub fn concat(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        assert!(!parts.is_empty(), "concat of zero tensors");
        let mut out = Vec::new();
        let mut rg = false;
        for &p in parts {
            self.vec_len(p, "concat")?;
            out.extend_from_slice(&self.nodes[p.0].data);
            rg |= self.requires(p);
        }
        let n = out.len();
        Ok(self.push(
            out,
            vec![n],
            rg,
            Op::Concat {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Stack 1-D tensors of length d as the columns of a [d, p] matrix.
    pub fn hstack(&mut self, cols: &[TensorRef]) -> Result<TensorRef> {
        assert!(!cols.is_empty(), "hstack of zero tensors");
        let d = self.vec_len(cols[0], "hstack")?;
        let p = cols.len();
        let mut out = vec![T::zero(); d * p];
        let mut rg = false;
        for (j, &c) in cols.iter().enumerate() {
            let len = self.vec_len(c, "hstack")?;
            if len != d {
                return Err(TensorError::ShapeMismatch {
                    op: "hstack",
                    lhs: vec![d],
                    rhs: vec![len],
                });
            }
            for i in 0..d {
                out[i * p + j] = self.nodes[c.0].data[i];
            }
            rg |= self.requires(c);
        }
        Ok(self.push(
            out,
            vec![d, p],
            rg,
            Op::HStack {
                cols: cols.to_vec(),
            },
        ))
    }

    /// Concatenate matrices with equal row counts along the column axis.
    pub fn concat_cols(&mut self, parts: &[TensorRef]) -> Result<TensorRef> {
        assert!(!parts.is_empty(), "concat_cols of zero tensors");
        let (d, _) = self.rows_cols(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0usize;
        let mut rg = false;
        for &p in parts {
            let (r, c) = self.rows_cols(p, "concat_cols")?;
            if r != d {
                return Err(TensorError::ShapeMismatch {
                    op: "concat_cols",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            widths.push(c);
            total += c;
            rg |= self.requires(p);
        }
        let mut out = vec![T::zero(); d * total];
        let mut off = 0usize;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = &self.nodes[p.0].data;
            for i in 0..d {
                out[i * total + off..i * total + off + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            off += w;
        }
        Ok(self.push(
            out,
            vec![d, total],
            rg,
            Op::ConcatCols {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Contiguous slice of a 1-D tensor.
    pub fn slice(&mut self, x: TensorRef, start: usize, len: usize) -> Result<TensorRef> {
        let n = self.vec_len(x, "slice")?;
        if start + len > n {
            return Err(TensorError::IndexOutOfBounds {
                op: "slice",
                index: start + len,
                size: n,
            });
        }
        let out = self.nodes[x.0].data[start..start + len].to_vec();
        let rg = self.requires(x);
        Ok(self.push(out, vec![len], rg, Op::Slice { x, start }))
    }

    /// Column `j` of a [p,q] matrix as a 1-D vector of length p.
    pub fn col(&mut self, x: TensorRef, j: usize) -> Result<TensorRef> {
        let (p, q) = self.rows_cols(x, "col")?;
        if j >= q {
            return Err(TensorError::IndexOutOfBounds {
                op: "col",
                index: j,
                size: q,
            });
        }
        let xd = &self.nodes[x.0].data;
        let out: Vec<T> = (0..p).map(|i| xd[i * q + j]).collect();
        let rg = self.requires(x);
        Ok(self.push(out, vec![p], rg, Op::Col { x, j }))
    }

    /// Multiply every row of g[p,q] elementwise by w[q].
    pub fn rows_mul(&mut self, g: TensorRef, w: TensorRef) -> Result<TensorRef> {
        let (p, q) = self.rows_cols(g, "rows_mul")?;
        let n = self.vec_len(w, "rows_mul")?;
        if n != q {
            return Err(TensorError::ShapeMismatch {
                op: "rows_mul",
                lhs: vec![p, q],
                rhs: vec![n],
            });
        }
        let mut out = vec![T::zero(); p * q];
        {
            let gd = &self.nodes[g.0].data;
            let wd = &self.nodes[w.0].data;
            for i in 0..p {
                for j in 0..q {
                    out[i * q + j] = gd[i * q + j] * wd[j];
                }
            }
        }
        let rg = self.requires(g) || self.requires(w);
        Ok(self.push(out, vec![p, q], rg, Op::RowsMul { g, w }))
    }

    /// Gather columns of an embedding table [d, v] into a [d, len] matrix.
    pub fn lookup(&mut self, table: TensorRef, cols: &[usize]) -> Result<TensorRef> {
        let (d, v) = self.rows_cols(table, "lookup")?;
        assert!(!cols.is_empty(), "lookup of zero columns");
        for &c in cols {
            if c >= v {
                return Err(TensorError::IndexOutOfBounds {
                    op: "lookup",
                    index: c,
                    size: v,
                });
            }
        }
        let p = cols.len();
        let mut out = vec![T::zero(); d * p];
        {
            let td = &self.nodes[table.0].data;
            for (j, &c) in cols.iter().enumerate() {
                for i in 0..d {
                    out[i * p + j] = td[i * v + c];
                }
            }
        }
        let rg = self.requires(table);
        Ok(self.push(
            out,
            vec![d, p],
            rg,
            Op::Lookup {
                table,
                cols: cols.to_vec(),
            },
        ))
    }

    /// Inverted dropout with a caller-supplied keep mask.
    pub fn dropout(&mut self, x: TensorRef, mask: &[bool], keep: f64) -> Result<TensorRef> {
        if self.numel(x) != mask.len() {
            return Err(TensorError::ShapeMismatch {
                op: "dropout",
                lhs: self.shape(x).to_vec(),
                rhs: vec![mask.len()],
            });
        }
        let inv = T::from_f64(1.0 / keep);
        let out: Vec<T> = self.nodes[x.0]
            .data
            .iter()
            .zip(mask)
            .map(|(&v, &m)| if m { v * inv } else { T::zero() })
            .collect();
        let shape = self.shape(x).to_vec();
        let rg = self.requires(x);
        Ok(self.push(
            out,
            shape,
            rg,
            Op::Dropout {
                x,
                mask: mask.to_vec(),
                keep,
            },
        ))
    }

    // ---- backward ----

    /// Reverse sweep from a scalar loss. Gradients accumulate with `+=`
    /// across fan-out; the seed gradient is 1.
    pub fn backward(&mut self, loss: TensorRef) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(TensorError::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        for node in &mut self.nodes {
            if node.requires_grad {
                node.grad = Some(vec![T::zero(); node.data.len()]);
            } else {
                node.grad = None;
            }
        }
        if !self.nodes[loss.0].requires_grad {
            // Loss does not depend on any tracked tensor; nothing to do.
            return Ok(());
        }
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = T::one();

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let op = self.nodes[i].op.clone();
            if matches!(op, Op::Leaf) {
                continue;
            }
            let mut dy = self.nodes[i].grad.clone().unwrap();
            if self.backward_fault == Some(op.name()) {
                let f = T::from_f64(1.5);
                for v in dy.iter_mut() {
                    *v = *v * f;
                }
            }
            self.backward_op(&op, i, &dy)?;
        }
        Ok(())
    }

    fn accumulate(&mut self, t: TensorRef, contrib: &[T]) {
        if let Some(g) = self.nodes[t.0].grad.as_mut() {
            for (gv, &c) in g.iter_mut().zip(contrib) {
                *gv = *gv + c;
            }
        }
    }

    fn backward_op(&mut self, op: &Op, out_idx: usize, dy: &[T]) -> Result<()> {
        match *op {
            Op::Leaf => {}
            Op::MatMul { a, b } => {
                let (p, q) = (self.shape(a)[0], self.shape(a)[1]);
                let r = self.shape(b)[1];
                if self.requires(a) {
                    // dA = dC B^T
                    let bd = &self.nodes[b.0].data;
                    let mut da = vec![T::zero(); p * q];
                    for i in 0..p {
                        for j in 0..r {
                            let d = dy[i * r + j];
                            if d == T::zero() {
                                continue;
                            }
                            for kk in 0..q {
                                da[i * q + kk] = da[i * q + kk] + d * bd[kk * r + j];
                            }
                        }
                    }
                    self.accumulate(a, &da);
                }
                if self.requires(b) {
                    // dB = A^T dC
                    let ad = &self.nodes[a.0].data;
                    let mut db = vec![T::zero(); q * r];
                    for i in 0..p {
                        for kk in 0..q {
                            let av = ad[i * q + kk];
                            if av == T::zero() {
                                continue;
                            }
                            for j in 0..r {
                                db[kk * r + j] = db[kk * r + j] + av * dy[i * r + j];
                            }
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::MatMulTn { a, b } => {
                // C[q,r] = A[p,q]^T B[p,r]; dA = B dC^T, dB = A dC
                let (p, q) = (self.shape(a)[0], self.shape(a)[1]);
                let r = self.shape(b)[1];
                if self.requires(a) {
                    let bd = &self.nodes[b.0].data;
                    let mut da = vec![T::zero(); p * q];
                    for kk in 0..p {
                        for i in 0..q {
                            let mut s = T::zero();
                            for j in 0..r {
                                s = s + bd[kk * r + j] * dy[i * r + j];
                            }
                            da[kk * q + i] = s;
                        }
                    }
                    self.accumulate(a, &da);
                }
                if self.requires(b) {
                    let ad = &self.nodes[a.0].data;
                    let mut db = vec![T::zero(); p * r];
                    for kk in 0..p {
                        for i in 0..q {
                            let av = ad[kk * q + i];
                            if av == T::zero() {
                                continue;
                            }
                            for j in 0..r {
                                db[kk * r + j] = db[kk * r + j] + av * dy[i * r + j];
                            }
                        }
                    }
                    self.accumulate(b, &db);
                }
            }
            Op::MatVec { a, x } => {
                let (p, q) = (self.shape(a)[0], self.shape(a)[1]);
                if self.requires(a) {
                    let xd = &self.nodes[x.0].data;
                    let mut da = vec![T::zero(); p * q];
                    for i in 0..p {
                        let d = dy[i];
                        if d == T::zero() {
                            continue;
                        }
                        for j in 0..q {
                            da[i * q + j] = d * xd[j];
                        }
                    }
                    self.accumulate(a, &da);
                }
                if self.requires(x) {
                    let ad = &self.nodes[a.0].data;
                    let mut dx = vec![T::zero(); q];
                    for i in 0..p {
                        let d = dy[i];
                        if d == T::zero() {
                            continue;
                        }
                        for j in 0..q {
                            dx[j] = dx[j] + d * ad[i * q + j];
                        }
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::VecMat { x, a } => {
                let (p, q) = (self.shape(a)[0], self.shape(a)[1]);
                if self.requires(x) {
                    let ad = &self.nodes[a.0].data;
                    let mut dx = vec![T::zero(); p];
                    for i in 0..p {
                        let mut s = T::zero();
                        for j in 0..q {
                            s = s + ad[i * q + j] * dy[j];
                        }
                        dx[i] = s;
                    }
                    self.accumulate(x, &dx);
                }
                if self.requires(a) {
                    let xd = &self.nodes[x.0].data;
                    let mut da = vec![T::zero(); p * q];
                    for i in 0..p {
                        let xv = xd[i];
                        if xv == T::zero() {
                            continue;
                        }
                        for j in 0..q {
                            da[i * q + j] = xv * dy[j];
                        }
                    }
                    self.accumulate(a, &da);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(a, dy);
                self.accumulate(b, dy);
            }
            Op::Sub { a, b } => {
                self.accumulate(a, dy);
                if self.requires(b) {
                    let neg: Vec<T> = dy.iter().map(|&v| -v).collect();
                    self.accumulate(b, &neg);
                }
            }
            Op::Mul { a, b } => {
                if self.requires(a) {
                    let contrib: Vec<T> = dy
                        .iter()
                        .zip(&self.nodes[b.0].data)
                        .map(|(&d, &bv)| d * bv)
                        .collect();
                    self.accumulate(a, &contrib);
                }
                if self.requires(b) {
                    let contrib: Vec<T> = dy
                        .iter()
                        .zip(&self.nodes[a.0].data)
                        .map(|(&d, &av)| d * av)
                        .collect();
                    self.accumulate(b, &contrib);
                }
            }
            Op::Tanh { x } => {
                if self.requires(x) {
                    let contrib: Vec<T> = dy
                        .iter()
                        .zip(&self.nodes[out_idx].data)
                        .map(|(&d, &y)| d * (T::one() - y * y))
                        .collect();
                    self.accumulate(x, &contrib);
                }
            }
            Op::Sigmoid { x } => {
                if self.requires(x) {
                    let contrib: Vec<T> = dy
                        .iter()
                        .zip(&self.nodes[out_idx].data)
                        .map(|(&d, &y)| d * y * (T::one() - y))
                        .collect();
                    self.accumulate(x, &contrib);
                }
            }
            Op::Relu { x } => {
                if self.requires(x) {
                    let contrib: Vec<T> = dy
                        .iter()
                        .zip(&self.nodes[x.0].data)
                        .map(|(&d, &xv)| if xv > T::zero() { d } else { T::zero() })
                        .collect();
                    self.accumulate(x, &contrib);
                }
            }
            Op::Scale { x, c } => {
                if self.requires(x) {
                    let cv = T::from_f64(c);
                    let contrib: Vec<T> = dy.iter().map(|&d| d * cv).collect();
                    self.accumulate(x, &contrib);
                }
            }
            Op::Sum { x } => {
                if self.requires(x) {
                    let d = dy[0];
                    let contrib = vec![d; self.numel(x)];
                    self.accumulate(x, &contrib);
                }
            }
            Op::SoftmaxMasked { x, ref mask } => {
                if self.requires(x) {
                    let y = &self.nodes[out_idx].data;
                    let mut dot = T::zero();
                    for (j, &m) in mask.iter().enumerate() {
                        if m {
                            dot = dot + dy[j] * y[j];
                        }
                    }
                    let contrib: Vec<T> = y
                        .iter()
                        .zip(dy)
                        .zip(mask)
                        .map(|((&yv, &d), &m)| if m { yv * (d - dot) } else { T::zero() })
                        .collect();
                    self.accumulate(x, &contrib);
                }
            }
            Op::MaxCols { x, ref argmax } => {
                if self.requires(x) {
                    let q = self.shape(x)[1];
                    let mut dx = vec![T::zero(); self.numel(x)];
                    for (i, &j) in argmax.iter().enumerate() {
                        dx[i * q + j] = dy[i];
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::Concat { ref parts } => {
                let mut off = 0usize;
                for &p in parts {
                    let n = self.numel(p);
                    if self.requires(p) {
                        let contrib = dy[off..off + n].to_vec();
                        self.accumulate(p, &contrib);
                    }
                    off += n;
                }
            }
            Op::HStack { ref cols } => {
                let p = cols.len();
                for (j, &c) in cols.iter().enumerate() {
                    if self.requires(c) {
                        let d = self.numel(c);
                        let mut contrib = vec![T::zero(); d];
                        for i in 0..d {
                            contrib[i] = dy[i * p + j];
                        }
                        self.accumulate(c, &contrib);
                    }
                }
            }
            Op::ConcatCols { ref parts } => {
                let total = self.shape(TensorRef(out_idx))[1];
                let d = self.shape(TensorRef(out_idx))[0];
                let mut off = 0usize;
                for &pt in parts {
                    let w = self.shape(pt)[1];
                    if self.requires(pt) {
                        let mut contrib = vec![T::zero(); d * w];
                        for i in 0..d {
                            contrib[i * w..(i + 1) * w]
                                .copy_from_slice(&dy[i * total + off..i * total + off + w]);
                        }
                        self.accumulate(pt, &contrib);
                    }
                    off += w;
                }
            }
            Op::Slice { x, start } => {
                if self.requires(x) {
                    let mut dx = vec![T::zero(); self.numel(x)];
                    dx[start..start + dy.len()].copy_from_slice(dy);
                    self.accumulate(x, &dx);
                }
            }
            Op::Col { x, j } => {
                if self.requires(x) {
                    let q = self.shape(x)[1];
                    let mut dx = vec![T::zero(); self.numel(x)];
                    for (i, &d) in dy.iter().enumerate() {
                        dx[i * q + j] = d;
                    }
                    self.accumulate(x, &dx);
                }
            }
            Op::RowsMul { g, w } => {
                let (p, q) = (self.shape(g)[0], self.shape(g)[1]);
                if self.requires(g) {
                    let wd = &self.nodes[w.0].data;
                    let mut dg = vec![T::zero(); p * q];
                    for i in 0..p {
                        for j in 0..q {
                            dg[i * q + j] = dy[i * q + j] * wd[j];
                        }
                    }
                    self.accumulate(g, &dg);
                }
                if self.requires(w) {
                    let gd = &self.nodes[g.0].data;
                    let mut dw = vec![T::zero(); q];
                    for i in 0..p {
                        for j in 0..q {
                            dw[j] = dw[j] + dy[i * q + j] * gd[i * q + j];
                        }
                    }
                    self.accumulate(w, &dw);
                }
            }
            Op::Lookup { table, ref cols } => {
                if self.requires(table) {
                    let (d, v) = (self.shape(table)[0], self.shape(table)[1]);
                    let p = cols.len();
                    let mut dt = vec![T::zero(); d * v];
                    for (j, &c) in cols.iter().enumerate() {
                        for i in 0..d {
                            dt[i * v + c] = dt[i * v + c] + dy[i * p + j];
                        }
                    }
                    self.accumulate(table, &dt);
                }
            }
            Op::Dropout { x, ref mask, keep } => {
                if self.requires(x) {
                    let inv = T::from_f64(1.0 / keep);
                    let contrib: Vec<T> = dy
                        .iter()
                        .zip(mask)
                        .map(|(&d, &m)| if m { d * inv } else { T::zero() })
                        .collect();
                    self.accumulate(x, &contrib);
                }
            }
        }
        Ok(())
    }
}
