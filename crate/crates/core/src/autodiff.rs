//! Reverse-mode automatic differentiation over rank-2 tensors.
//!
//! A [`Graph`] is an append-only tape: every operation evaluates eagerly,
//! records its parents and whatever it needs for the backward pass, and
//! returns a [`Var`] handle. Parents always precede children, so the backward
//! sweep is a single reverse walk over the tape.
//!
//! Parameters enter the tape through [`Graph::param`], which remembers the
//! parameter name; [`Gradients::accumulate_into`] writes gradients back to
//! every trainable tensor of a [`ParamStore`] with that name. Frozen tensors
//! enter the tape as constants, so no gradient is ever computed for them
//! beyond what their trainable descendants need.

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{ParamStore, Tensor};

/// Handle to a value recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, ta: bool, tb: bool },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow { x: Var, row: Var },
    Scale { x: Var, c: T },
    ScaleBy { x: Var, s: Var },
    RowScale { x: Var, s: Var },
    ColScale { x: Var, l: Var },
    Relu(Var),
    Sigmoid(Var),
    Softmax(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<T> },
    Embedding { table: Var, ids: Vec<usize> },
    Gather { src: Var, idx: Vec<usize> },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows { x: Var, start: usize },
    SliceCols { x: Var, start: usize },
    MeanRows(Var),
    Sum(Var),
    Kron { a: Var, b: Var },
    CrossEntropy { logits: Var, targets: Vec<Option<usize>>, probs: Vec<T>, count: usize },
    AddConst(Var),
}

#[derive(Debug, Clone)]
struct Node<T> {
    rows: usize,
    cols: usize,
    value: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
    binding: Option<String>,
}

/// Tape of recorded operations. Confined to one thread while in use.
#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// RMS-norm epsilon added under the square root.
pub const RMS_EPS: f64 = 1e-6;

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(rows * cols, value.len());
        self.nodes.push(Node { rows, cols, value, op, requires_grad, binding: None });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let n = self.node(v);
        (n.rows, n.cols)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    /// Copies the value of `v` out as an owned tensor.
    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = self.node(v);
        Tensor::new(&[n.rows, n.cols], n.value.clone()).expect("node shapes are consistent")
    }

    pub fn scalar(&self, v: Var) -> T {
        self.node(v).value[0]
    }

    fn leaf_from(&mut self, t: &Tensor<T>, requires_grad: bool) -> Result<Var> {
        let (r, c) = match t.shape() {
            [r, c] => (*r, *c),
            [n] => (1, *n),
            [] => (1, 1),
            other => return Err(Error::shape("leaf", format!("rank-2 tensors only, got {other:?}"))),
        };
        Ok(self.push(r, c, t.data().to_vec(), Op::Leaf, requires_grad))
    }

    /// Records `t` as a leaf; it requires a gradient iff `t` is trainable.
    pub fn leaf(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.leaf_from(t, t.is_trainable())
    }

    /// Records `t` as a constant regardless of its trainable flag.
    pub fn constant(&mut self, t: &Tensor<T>) -> Result<Var> {
        self.leaf_from(t, false)
    }

    pub fn constant_from(&mut self, rows: usize, cols: usize, value: Vec<T>) -> Result<Var> {
        if rows * cols != value.len() {
            return Err(Error::shape("constant", format!("{rows}x{cols} vs {} values", value.len())));
        }
        Ok(self.push(rows, cols, value, Op::Leaf, false))
    }

    /// Records the named parameter of `store` as a leaf bound to that name.
    pub fn param(&mut self, store: &ParamStore<T>, name: &str) -> Result<Var> {
        let t = store.get(name)?;
        let v = self.leaf(t)?;
        self.nodes[v.0].binding = Some(name.to_string());
        Ok(v)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_t(a, false, b, true)
    }

    /// `op(a) · op(b)` where `op` optionally transposes.
    pub fn matmul_t(&mut self, a: Var, ta: bool, b: Var, tb: bool) -> Result<Var> {
        let (ar, ac) = self.shape(a);
        let (br, bc) = self.shape(b);
        let (m, k) = if ta { (ac, ar) } else { (ar, ac) };
        let (k2, n) = if tb { (bc, br) } else { (br, bc) };
        if k != k2 {
            return Err(Error::shape(
                "matmul",
                format!("[{m}x{k}] · [{k2}x{n}] (operands {ar}x{ac} and {br}x{bc})"),
            ));
        }
        let mut out = vec![T::zero(); m * n];
        T::gemm(
            m,
            k,
            n,
            &self.node(a).value,
            strides(ar, ac, ta),
            &self.node(b).value,
            strides(br, bc, tb),
            &mut out,
            false,
        );
        let rg = self.rg(&[a, b]);
        Ok(self.push(m, n, out, Op::MatMul { a, b, ta, tb }, rg))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let id = self.identity_const(c);
        // xᵀ = I · xᵀ keeps the backward rule inside matmul.
        self.matmul_t(id, false, x, true).map(|v| {
            debug_assert_eq!(self.shape(v), (c, r));
            v
        })
    }

    fn identity_const(&mut self, n: usize) -> Var {
        let t = Tensor::<T>::identity(n);
        self.push(n, n, t.into_data(), Op::Leaf, false)
    }

    pub fn kron(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, n) = self.shape(a);
        let (p, q) = self.shape(b);
        let cols = n * q;
        let mut out = vec![T::zero(); m * p * cols];
        {
            let av = &self.node(a).value;
            let bv = &self.node(b).value;
            for i in 0..m {
                for j in 0..n {
                    let s = av[i * n + j];
                    for r in 0..p {
                        let row = (i * p + r) * cols + j * q;
                        for c in 0..q {
                            out[row + c] = s * bv[r * q + c];
                        }
                    }
                }
            }
        }
        let rg = self.rg(&[a, b]);
        Ok(self.push(m * p, cols, out, Op::Kron { a, b }, rg))
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Error::shape(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(sa)
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T, rec: Op<T>) -> Result<Var> {
        let (r, c) = self.same_shape(op, a, b)?;
        let out = self.node(a).value.iter().zip(&self.node(b).value).map(|(&x, &y)| f(x, y)).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(r, c, out, rec, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a `1×n` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(row) != (1, c) {
            return Err(Error::shape("add_row", format!("{:?} onto {r}x{c}", self.shape(row))));
        }
        let rv = self.node(row).value.clone();
        let out = self.node(x).value.chunks(c.max(1)).flat_map(|xr| xr.iter().zip(&rv).map(|(a, b)| *a + *b)).collect();
        let rg = self.rg(&[x, row]);
        Ok(self.push(r, c, out, Op::AddRow { x, row }, rg))
    }

    /// Adds a fixed (non-differentiable) tensor, e.g. an attention mask.
    pub fn add_const(&mut self, x: Var, constant: &[T]) -> Result<Var> {
        let (r, c) = self.shape(x);
        if constant.len() != r * c {
            return Err(Error::shape("add_const", format!("{} values onto {r}x{c}", constant.len())));
        }
        let out = self.node(x).value.iter().zip(constant).map(|(a, b)| *a + *b).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(r, c, out, Op::AddConst(x), rg))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let (r, cols) = self.shape(x);
        let out = self.node(x).value.iter().map(|v| *v * c).collect();
        let rg = self.rg(&[x]);
        self.push(r, cols, out, Op::Scale { x, c }, rg)
    }

    /// Multiplies every entry of `x` by the single entry of a `1×1` tensor.
    pub fn scale_by(&mut self, x: Var, s: Var) -> Result<Var> {
        if self.shape(s) != (1, 1) {
            return Err(Error::shape("scale_by", format!("scale must be 1x1, got {:?}", self.shape(s))));
        }
        let sv = self.node(s).value[0];
        let (r, c) = self.shape(x);
        let out = self.node(x).value.iter().map(|v| *v * sv).collect();
        let rg = self.rg(&[x, s]);
        Ok(self.push(r, c, out, Op::ScaleBy { x, s }, rg))
    }

    /// `out[i,j] = s[i] · x[i,j]` for `s` of shape `k×1`.
    pub fn row_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let ss = self.shape(s);
        if ss != (r, 1) {
            return Err(Error::shape("row_scale", format!("x is {r}x{c}, s is {}x{}", ss.0, ss.1)));
        }
        let sv = &self.node(s).value;
        let out = self
            .node(x)
            .value
            .iter()
            .enumerate()
            .map(|(i, v)| *v * sv[i / c.max(1)])
            .collect();
        let rg = self.rg(&[x, s]);
        Ok(self.push(r, c, out, Op::RowScale { x, s }, rg))
    }

    /// `out[i,j] = l[j] · x[i,j]` for `l` of shape `n×1` (or `1×n`).
    pub fn col_scale(&mut self, x: Var, l: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let ls = self.shape(l);
        if ls.0 * ls.1 != c || (ls.0 != 1 && ls.1 != 1) {
            return Err(Error::shape("col_scale", format!("x is {r}x{c}, vector is {}x{}", ls.0, ls.1)));
        }
        let lv = &self.node(l).value;
        let out = self.node(x).value.iter().enumerate().map(|(i, v)| *v * lv[i % c]).collect();
        let rg = self.rg(&[x, l]);
        Ok(self.push(r, c, out, Op::ColScale { x, l }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.node(x).value.iter().map(|v| v.max(T::zero())).collect();
        let rg = self.rg(&[x]);
        self.push(r, c, out, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (r, c) = self.shape(x);
        let out = self.node(x).value.iter().map(|v| sigmoid(*v)).collect();
        let rg = self.rg(&[x]);
        self.push(r, c, out, Op::Sigmoid(x), rg)
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        let xv = &self.node(x).value;
        if xv.iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric { op: "softmax_rows", detail: "NaN input".into() });
        }
        let mut out = vec![T::zero(); r * c];
        for (orow, xrow) in out.chunks_mut(c.max(1)).zip(xv.chunks(c.max(1))) {
            softmax_into(xrow, orow);
        }
        let rg = self.rg(&[x]);
        Ok(self.push(r, c, out, Op::Softmax(x), rg))
    }

    /// Scales each row by its reciprocal root-mean-square, then by a learned `1×n` gain.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if self.shape(gain) != (1, c) {
            return Err(Error::shape("rms_norm", format!("gain {:?} for width {c}", self.shape(gain))));
        }
        let eps = T::from_f64_lossy(RMS_EPS);
        let n = T::from_usize(c).expect("width fits scalar");
        let xv = &self.node(x).value;
        let gv = &self.node(gain).value;
        let mut inv_rms = Vec::with_capacity(r);
        let mut out = vec![T::zero(); r * c];
        for (i, xrow) in xv.chunks(c.max(1)).enumerate().take(r) {
            let ms = xrow.iter().map(|v| *v * *v).sum::<T>() / n;
            let inv = T::one() / (ms + eps).sqrt();
            inv_rms.push(inv);
            for j in 0..c {
                out[i * c + j] = xrow[j] * inv * gv[j];
            }
        }
        let rg = self.rg(&[x, gain]);
        Ok(self.push(r, c, out, Op::RmsNorm { x, gain, inv_rms }, rg))
    }

    // ---- indexing -------------------------------------------------------

    /// Gathers rows of `table` by token id.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (vocab, d) = self.shape(table);
        if let Some(bad) = ids.iter().find(|&&i| i >= vocab) {
            return Err(Error::Index { op: "embedding", detail: format!("token id {bad} >= vocab size {vocab}") });
        }
        let tv = &self.node(table).value;
        let out = ids.iter().flat_map(|&i| tv[i * d..(i + 1) * d].iter().copied()).collect();
        let rg = self.rg(&[table]);
        Ok(self.push(ids.len(), d, out, Op::Embedding { table, ids: ids.to_vec() }, rg))
    }

    /// `out.flat[k] = src.flat[idx[k]]`, reshaped to `rows × cols`.
    pub fn gather(&mut self, src: Var, idx: Vec<usize>, rows: usize, cols: usize) -> Result<Var> {
        let n = self.node(src).value.len();
        if idx.len() != rows * cols {
            return Err(Error::shape("gather", format!("{} indices for {rows}x{cols}", idx.len())));
        }
        if let Some(bad) = idx.iter().find(|&&i| i >= n) {
            return Err(Error::Index { op: "gather", detail: format!("index {bad} >= {n}") });
        }
        let sv = &self.node(src).value;
        let out = idx.iter().map(|&i| sv[i]).collect();
        let rg = self.rg(&[src]);
        Ok(self.push(rows, cols, out, Op::Gather { src, idx }, rg))
    }

    /// Vertical stack `[a; b; ...]`.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat_rows", "no inputs"));
        };
        let c = self.shape(*first).1;
        let mut rows = 0;
        let mut out = Vec::new();
        for p in parts {
            let (r, pc) = self.shape(*p);
            if pc != c {
                return Err(Error::shape("concat_rows", format!("width {pc} vs {c}")));
            }
            rows += r;
            out.extend_from_slice(&self.node(*p).value);
        }
        let rg = self.rg(parts);
        Ok(self.push(rows, c, out, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Horizontal stack `[a, b, ...]`.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(first) = parts.first() else {
            return Err(Error::shape("concat_cols", "no inputs"));
        };
        let r = self.shape(*first).0;
        let mut total = 0;
        for p in parts {
            let (pr, pc) = self.shape(*p);
            if pr != r {
                return Err(Error::shape("concat_cols", format!("height {pr} vs {r}")));
            }
            total += pc;
        }
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for p in parts {
                let n = self.node(*p);
                out.extend_from_slice(&n.value[i * n.cols..(i + 1) * n.cols]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(r, total, out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > r {
            return Err(Error::shape("slice_rows", format!("rows {start}..{} of {r}", start + len)));
        }
        let out = self.node(x).value[start * c..(start + len) * c].to_vec();
        let rg = self.rg(&[x]);
        Ok(self.push(len, c, out, Op::SliceRows { x, start }, rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.shape(x);
        if start + len > c {
            return Err(Error::shape("slice_cols", format!("cols {start}..{} of {c}", start + len)));
        }
        let xv = &self.node(x).value;
        let out = (0..r).flat_map(|i| xv[i * c + start..i * c + start + len].iter().copied()).collect();
        let rg = self.rg(&[x]);
        Ok(self.push(r, len, out, Op::SliceCols { x, start }, rg))
    }

    // ---- reductions -----------------------------------------------------

    /// Column means as a `1×n` row.
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.shape(x);
        if r == 0 {
            return Err(Error::shape("mean_rows", "no rows"));
        }
        let inv = T::one() / T::from_usize(r).expect("row count fits scalar");
        let mut out = vec![T::zero(); c];
        for row in self.node(x).value.chunks(c.max(1)) {
            for (o, v) in out.iter_mut().zip(row) {
                *o += *v;
            }
        }
        out.iter_mut().for_each(|o| *o *= inv);
        let rg = self.rg(&[x]);
        Ok(self.push(1, c, out, Op::MeanRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.node(x).value.iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(1, 1, vec![s], Op::Sum(x), rg)
    }

    /// Mean token cross-entropy; rows whose target is `None` are padding and ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let (r, v) = self.shape(logits);
        if targets.len() != r {
            return Err(Error::shape("cross_entropy", format!("{} targets for {r} rows", targets.len())));
        }
        if let Some(bad) = targets.iter().flatten().find(|&&t| t >= v) {
            return Err(Error::Index { op: "cross_entropy", detail: format!("target {bad} >= vocab {v}") });
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(Error::contract("cross-entropy over an all-padding target"));
        }
        let lv = &self.node(logits).value;
        if lv.iter().any(|x| x.is_nan()) {
            return Err(Error::Numeric { op: "cross_entropy", detail: "NaN logits".into() });
        }
        let mut probs = vec![T::zero(); r * v];
        let mut total = T::zero();
        for (i, t) in targets.iter().enumerate() {
            let Some(t) = t else { continue };
            let row = &lv[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|x| (*x - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[*t];
            for (p, x) in probs[i * v..(i + 1) * v].iter_mut().zip(row) {
                *p = (*x - lse).exp();
            }
        }
        let loss = total / T::from_usize(count).expect("count fits scalar");
        let rg = self.rg(&[logits]);
        Ok(self.push(1, 1, vec![loss], Op::CrossEntropy { logits, targets: targets.to_vec(), probs, count }, rg))
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        let (r, c) = self.shape(loss);
        if r * c != 1 {
            return Err(Error::contract(format!("backward needs a scalar loss, got {r}x{c}")));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[idx] = Some(g);
        }
        Ok(Gradients { grads, bindings: self.bindings(loss.0) })
    }

    /// Convenience: backward and accumulate into `store`.
    pub fn backward_into(&self, loss: Var, store: &mut ParamStore<T>) -> Result<()> {
        self.backward(loss)?.accumulate_into(store)
    }

    fn bindings(&self, upto: usize) -> Vec<(usize, String)> {
        self.nodes[..=upto]
            .iter()
            .enumerate()
            .filter_map(|(i, n)| n.binding.as_ref().filter(|_| n.requires_grad).map(|b| (i, b.clone())))
            .collect()
    }

    fn propagate(&self, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let rows = node.rows;
        let cols = node.cols;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (ar, ac) = self.shape(*a);
                let (br, bc) = self.shape(*b);
                let k = if *ta { ar } else { ac };
                let (m, n) = (rows, cols);
                let gs = (n, 1);
                let gts = (1, n);
                if self.requires_grad(*a) {
                    let bv = &self.node(*b).value;
                    let buf = slot(grads, *a, ar * ac);
                    if *ta {
                        // dA[k×m] = op(B)[k×n] · Gᵀ[n×m]
                        T::gemm(k, n, m, bv, strides(br, bc, *tb), g, gts, buf, true);
                    } else {
                        // dA[m×k] = G[m×n] · op(B)ᵀ[n×k]
                        T::gemm(m, n, k, g, gs, bv, strides(br, bc, !*tb), buf, true);
                    }
                }
                if self.requires_grad(*b) {
                    let av = &self.node(*a).value;
                    let buf = slot(grads, *b, br * bc);
                    if *tb {
                        // dB[n×k] = Gᵀ[n×m] · op(A)[m×k]
                        T::gemm(n, m, k, g, gts, av, strides(ar, ac, *ta), buf, true);
                    } else {
                        // dB[k×n] = op(A)ᵀ[k×m] · G[m×n]
                        T::gemm(k, m, n, av, strides(ar, ac, !*ta), g, gs, buf, true);
                    }
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.iter().copied());
                self.acc(grads, *b, g.iter().copied());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.iter().copied());
                self.acc(grads, *b, g.iter().map(|v| -*v));
            }
            Op::Mul(a, b) => {
                let av = &self.node(*a).value;
                let bv = &self.node(*b).value;
                self.acc(grads, *a, g.iter().zip(bv).map(|(g, b)| *g * *b));
                self.acc(grads, *b, g.iter().zip(av).map(|(g, a)| *g * *a));
            }
            Op::AddRow { x, row } => {
                self.acc(grads, *x, g.iter().copied());
                if self.requires_grad(*row) {
                    let mut rg = vec![T::zero(); cols];
                    for grow in g.chunks(cols.max(1)) {
                        rg.iter_mut().zip(grow).for_each(|(a, b)| *a += *b);
                    }
                    self.acc(grads, *row, rg.into_iter());
                }
            }
            Op::AddConst(x) => self.acc(grads, *x, g.iter().copied()),
            Op::Scale { x, c } => self.acc(grads, *x, g.iter().map(|v| *v * *c)),
            Op::ScaleBy { x, s } => {
                let sv = self.node(*s).value[0];
                self.acc(grads, *x, g.iter().map(|v| *v * sv));
                if self.requires_grad(*s) {
                    let xv = &self.node(*x).value;
                    let d: T = g.iter().zip(xv).map(|(g, x)| *g * *x).sum();
                    self.acc(grads, *s, std::iter::once(d));
                }
            }
            Op::RowScale { x, s } => {
                let sv = &self.node(*s).value;
                let c = cols.max(1);
                self.acc(grads, *x, g.iter().enumerate().map(|(i, v)| *v * sv[i / c]));
                if self.requires_grad(*s) {
                    let xv = &self.node(*x).value;
                    let ds = g
                        .chunks(c)
                        .zip(xv.chunks(c))
                        .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| *a * *b).sum::<T>())
                        .collect::<Vec<_>>();
                    self.acc(grads, *s, ds.into_iter());
                }
            }
            Op::ColScale { x, l } => {
                let lv = &self.node(*l).value;
                let c = cols.max(1);
                self.acc(grads, *x, g.iter().enumerate().map(|(i, v)| *v * lv[i % c]));
                if self.requires_grad(*l) {
                    let xv = &self.node(*x).value;
                    let mut dl = vec![T::zero(); c];
                    for (i, (gv, xv)) in g.iter().zip(xv).enumerate() {
                        dl[i % c] += *gv * *xv;
                    }
                    self.acc(grads, *l, dl.into_iter());
                }
            }
            Op::Relu(x) => {
                let xv = &self.node(*x).value;
                self.acc(grads, *x, g.iter().zip(xv).map(|(g, x)| if *x > T::zero() { *g } else { T::zero() }));
            }
            Op::Sigmoid(x) => {
                let y = &node.value;
                self.acc(grads, *x, g.iter().zip(y).map(|(g, y)| *g * *y * (T::one() - *y)));
            }
            Op::Softmax(x) => {
                let y = &node.value;
                let c = cols.max(1);
                let mut dx = Vec::with_capacity(y.len());
                for (gr, yr) in g.chunks(c).zip(y.chunks(c)) {
                    let dot: T = gr.iter().zip(yr).map(|(a, b)| *a * *b).sum();
                    dx.extend(gr.iter().zip(yr).map(|(g, y)| *y * (*g - dot)));
                }
                self.acc(grads, *x, dx.into_iter());
            }
            Op::RmsNorm { x, gain, inv_rms } => {
                let xv = &self.node(*x).value;
                let gv = &self.node(*gain).value;
                let c = cols.max(1);
                let n = T::from_usize(cols).expect("width fits scalar");
                if self.requires_grad(*x) {
                    let mut dx = Vec::with_capacity(xv.len());
                    for ((gr, xr), inv) in g.chunks(c).zip(xv.chunks(c)).zip(inv_rms) {
                        let dot: T = gr.iter().zip(xr).zip(gv).map(|((g, x), w)| *g * *w * *x).sum();
                        let k = *inv * *inv * *inv * dot / n;
                        dx.extend(gr.iter().zip(xr).zip(gv).map(|((g, x), w)| *inv * *g * *w - k * *x));
                    }
                    self.acc(grads, *x, dx.into_iter());
                }
                if self.requires_grad(*gain) {
                    let mut dg = vec![T::zero(); c];
                    for ((gr, xr), inv) in g.chunks(c).zip(xv.chunks(c)).zip(inv_rms) {
                        for j in 0..c {
                            dg[j] += gr[j] * xr[j] * *inv;
                        }
                    }
                    self.acc(grads, *gain, dg.into_iter());
                }
            }
            Op::Embedding { table, ids } => {
                let (tr, d) = self.shape(*table);
                let buf = slot(grads, *table, tr * d);
                for (row, &id) in ids.iter().enumerate() {
                    for j in 0..d {
                        buf[id * d + j] += g[row * d + j];
                    }
                }
            }
            Op::Gather { src, idx } => {
                let n = self.node(*src).value.len();
                let buf = slot(grads, *src, n);
                for (k, &i) in idx.iter().enumerate() {
                    buf[i] += g[k];
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.node(*p).value.len();
                    self.acc(grads, *p, g[offset..offset + len].iter().copied());
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for p in parts {
                    let (pr, pc) = self.shape(*p);
                    if self.requires_grad(*p) {
                        let buf = slot(grads, *p, pr * pc);
                        for i in 0..pr {
                            for j in 0..pc {
                                buf[i * pc + j] += g[i * cols + offset + j];
                            }
                        }
                    }
                    offset += pc;
                }
            }
            Op::SliceRows { x, start } => {
                let (xr, xc) = self.shape(*x);
                let buf = slot(grads, *x, xr * xc);
                let base = start * xc;
                buf[base..base + g.len()].iter_mut().zip(g).for_each(|(a, b)| *a += *b);
            }
            Op::SliceCols { x, start } => {
                let (xr, xc) = self.shape(*x);
                let buf = slot(grads, *x, xr * xc);
                for i in 0..rows {
                    for j in 0..cols {
                        buf[i * xc + start + j] += g[i * cols + j];
                    }
                }
            }
            Op::MeanRows(x) => {
                let (xr, xc) = self.shape(*x);
                let inv = T::one() / T::from_usize(xr).expect("row count fits scalar");
                self.acc(grads, *x, (0..xr * xc).map(|i| g[i % xc.max(1)] * inv));
            }
            Op::Sum(x) => {
                let n = self.node(*x).value.len();
                self.acc(grads, *x, std::iter::repeat_n(g[0], n));
            }
            Op::Kron { a, b } => {
                let (m, n) = self.shape(*a);
                let (p, q) = self.shape(*b);
                let av = &self.node(*a).value;
                let bv = &self.node(*b).value;
                let oc = n * q;
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); m * n];
                    for i in 0..m {
                        for j in 0..n {
                            let mut s = T::zero();
                            for r in 0..p {
                                for c in 0..q {
                                    s += g[(i * p + r) * oc + j * q + c] * bv[r * q + c];
                                }
                            }
                            da[i * n + j] = s;
                        }
                    }
                    self.acc(grads, *a, da.into_iter());
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); p * q];
                    for i in 0..m {
                        for j in 0..n {
                            let s = av[i * n + j];
                            for r in 0..p {
                                for c in 0..q {
                                    db[r * q + c] += g[(i * p + r) * oc + j * q + c] * s;
                                }
                            }
                        }
                    }
                    self.acc(grads, *b, db.into_iter());
                }
            }
            Op::CrossEntropy { logits, targets, probs, count } => {
                let v = self.shape(*logits).1;
                let scale = g[0] / T::from_usize(*count).expect("count fits scalar");
                let mut d = vec![T::zero(); probs.len()];
                for (i, t) in targets.iter().enumerate() {
                    let Some(t) = t else { continue };
                    for j in 0..v {
                        d[i * v + j] = probs[i * v + j] * scale;
                    }
                    d[i * v + t] -= scale;
                }
                self.acc(grads, *logits, d.into_iter());
            }
        }
    }

    fn acc(&self, grads: &mut [Option<Vec<T>>], target: Var, values: impl Iterator<Item = T>) {
        if !self.requires_grad(target) {
            return;
        }
        let n = self.node(target).value.len();
        let buf = slot(grads, target, n);
        for (a, v) in buf.iter_mut().zip(values) {
            *a += v;
        }
    }
}

fn slot<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, n: usize) -> &mut Vec<T> {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); n])
}

/// Row/column strides of a row-major `r×c` matrix, optionally viewed transposed.
fn strides(_r: usize, c: usize, transposed: bool) -> (usize, usize) {
    if transposed {
        (1, c)
    } else {
        (c, 1)
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn softmax_into<T: Scalar>(x: &[T], out: &mut [T]) {
    let max = x.iter().copied().fold(T::neg_infinity(), T::max);
    let mut z = T::zero();
    for (o, v) in out.iter_mut().zip(x) {
        *o = (*v - max).exp();
        z += *o;
    }
    out.iter_mut().for_each(|o| *o /= z);
}

/// Result of a backward sweep.
#[derive(Debug, Clone)]
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
    bindings: Vec<(usize, String)>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Adds every bound gradient into the same-named trainable tensor of `store`.
    /// Names absent from `store` are skipped, so one sweep can feed several stores.
    pub fn accumulate_into(&self, store: &mut ParamStore<T>) -> Result<()> {
        for (idx, name) in &self.bindings {
            let Some(g) = self.grads[*idx].as_deref() else { continue };
            if store.contains(name) {
                store.get_mut(name)?.accumulate_grad(g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_forced_arithmetic() {
        let mut g = Graph::<f64>::new();
        let i2 = g.constant(&Tensor::identity(2)).unwrap();
        let m = g.constant(&t(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p), &[1.0, 2.0, 3.0, 4.0]);
        let col = g.constant(&t(&[&[0.0], &[1.0]])).unwrap();
        let q = g.matmul(m, col).unwrap();
        assert_eq!(g.shape(q), (2, 1));
        assert_eq!(g.value(q), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&Tensor::zeros(&[2, 3])).unwrap();
        let b = g.constant(&Tensor::zeros(&[2, 3])).unwrap();
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("2x3") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn kron_examples() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&t(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let b = g.constant(&t(&[&[0.0, 1.0], &[1.0, 0.0]])).unwrap();
        let k = g.kron(a, b).unwrap();
        assert_eq!(g.shape(k), (4, 4));
        assert_eq!(
            g.value(k),
            &[0., 1., 0., 2., 1., 0., 2., 0., 0., 3., 0., 4., 3., 0., 4., 0.]
        );
        let i2 = g.constant(&Tensor::identity(2)).unwrap();
        let bd = g.kron(i2, a).unwrap();
        assert_eq!(
            g.value(bd),
            &[1., 2., 0., 0., 3., 4., 0., 0., 0., 0., 1., 2., 0., 0., 3., 4.]
        );
    }

    #[test]
    fn kron_grad_of_sum_is_sum_of_other_factor() {
        let mut store = ParamStore::new();
        store.insert("a", t(&[&[1.0, -2.0], &[0.5, 4.0]]).with_trainable(true)).unwrap();
        let mut g = Graph::<f64>::new();
        let a = g.param(&store, "a").unwrap();
        let b = g.constant(&t(&[&[1.0, 2.0, 3.0], &[-1.0, 0.5, 0.25]])).unwrap();
        let k = g.kron(a, b).unwrap();
        let s = g.sum(k);
        g.backward_into(s, &mut store).unwrap();
        for v in store.get("a").unwrap().grad().unwrap() {
            assert!((v - 5.75).abs() < 1e-12);
        }
    }

    #[test]
    fn row_scale_examples() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&t(&[&[1.0, 2.0], &[3.0, 4.0]])).unwrap();
        let s = g.constant(&t(&[&[2.0], &[0.5]])).unwrap();
        let y = g.row_scale(x, s).unwrap();
        assert_eq!(g.value(y), &[2.0, 4.0, 1.5, 2.0]);
        let ones = g.constant(&Tensor::ones(&[2, 1])).unwrap();
        let z = g.row_scale(x, ones).unwrap();
        assert_eq!(g.value(z), g.value(x));
        let bad = g.constant(&Tensor::ones(&[3, 1])).unwrap();
        assert!(matches!(g.row_scale(x, bad), Err(Error::Shape { .. })));
    }

    #[test]
    fn softmax_uniform_and_stable() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&t(&[&[0.0, 0.0, 0.0], &[1000.0, 0.0, -1000.0]])).unwrap();
        let y = g.softmax_rows(x).unwrap();
        let v = g.value(y);
        for p in &v[..3] {
            assert!((p - 1.0 / 3.0).abs() < 1e-15);
        }
        assert!((v[3] - 1.0).abs() < 1e-12 && v[4] < 1e-300);
        let nan = g.constant(&t(&[&[f64::NAN, 0.0]])).unwrap();
        assert!(matches!(g.softmax_rows(nan), Err(Error::Numeric { .. })));
    }

    #[test]
    fn concat_rows_preserves_rows() {
        let mut g = Graph::<f64>::new();
        let a = g.constant(&Tensor::from_fn(&[2, 3], |i| i as f64)).unwrap();
        let b = g.constant(&Tensor::from_fn(&[5, 3], |i| 100.0 + i as f64)).unwrap();
        let c = g.concat_rows(&[a, b]).unwrap();
        assert_eq!(g.shape(c), (7, 3));
        assert_eq!(&g.value(c)[..6], g.value(a));
        assert_eq!(&g.value(c)[6..], g.value(b));
    }

    #[test]
    fn cross_entropy_limit_and_padding() {
        let mut g = Graph::<f64>::new();
        let mut logits = vec![0.0; 2 * 4];
        logits[1] = 20.0;
        logits[4 + 3] = 20.0;
        let l = g.constant_from(2, 4, logits).unwrap();
        let loss = g.cross_entropy(l, &[Some(1), Some(3)]).unwrap();
        assert!(g.scalar(loss) < 1e-3);
        assert!(matches!(g.cross_entropy(l, &[None, None]), Err(Error::Contract(_))));
        assert!(matches!(g.cross_entropy(l, &[Some(9), None]), Err(Error::Index { .. })));
    }

    #[test]
    fn rms_norm_has_unit_rms_before_gain() {
        let mut g = Graph::<f64>::new();
        let x = g.constant(&Tensor::from_fn(&[3, 8], |i| (i as f64 * 0.37).sin() * 3.0)).unwrap();
        let gain = g.constant(&Tensor::ones(&[1, 8])).unwrap();
        let y = g.rms_norm(x, gain).unwrap();
        for row in g.value(y).chunks(8) {
            let rms = (row.iter().map(|v| v * v).sum::<f64>() / 8.0).sqrt();
            assert!((rms - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn embedding_rejects_out_of_range_id() {
        let mut g = Graph::<f32>::new();
        let table = g.constant(&Tensor::zeros(&[4, 2])).unwrap();
        assert!(matches!(g.embedding(table, &[0, 4]), Err(Error::Index { .. })));
    }

    #[test]
    fn backward_of_sum_of_squares_is_twice_x() {
        let mut store = ParamStore::new();
        store.insert("x", t(&[&[1.0, -2.0, 3.5]]).with_trainable(true)).unwrap();
        store.insert("frozen", t(&[&[1.0, 1.0, 1.0]])).unwrap();
        let mut g = Graph::<f64>::new();
        let x = g.param(&store, "x").unwrap();
        let f = g.param(&store, "frozen").unwrap();
        let xf = g.mul(x, f).unwrap();
        let sq = g.mul(xf, xf).unwrap();
        let loss = g.sum(sq);
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get("x").unwrap().grad().unwrap(), &[2.0, -4.0, 7.0]);
        assert!(store.get("frozen").unwrap().grad().is_none());
        // repeated backward accumulates
        g.backward_into(loss, &mut store).unwrap();
        assert_eq!(store.get("x").unwrap().grad().unwrap(), &[4.0, -8.0, 14.0]);
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(&Tensor::ones(&[2, 2]).with_trainable(true)).unwrap();
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
    }
}
