use std::collections::{BTreeMap, HashMap};
use std::sync::Arc;

use super::kernels::{dot, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{AutodiffError, ParamId, ParamStore, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T: Real> {
    Leaf,
    Matmul(Var, Var),
    MatmulNt(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Sigmoid(Var),
    Tanh(Var),
    Exp(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowDot(Var, Var),
    GatherRows(Var, Arc<[usize]>),
    ConcatRows(Vec<Var>),
    SegmentSum(Var, Arc<[usize]>),
    SegmentSoftmax(Var, Arc<[usize]>),
    SegmentLogSumExp(Var, Arc<[usize]>),
    EmbeddingBagMean {
        table: Var,
        tokens: Arc<[u32]>,
        offsets: Arc<[usize]>,
    },
    BceWithLogits(Var, Arc<[T]>),
}

struct Node<T: Real> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients of a scalar loss with respect to every parameter reachable from it.
#[derive(Clone, Debug, Default)]
pub struct Gradients<T: Real = f32> {
    grads: BTreeMap<ParamId, Tensor<T>>,
}

impl<T: Real> Gradients<T> {
    pub fn get(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.grads.get(&id)
    }

    pub fn contains(&self, id: ParamId) -> bool {
        self.grads.contains_key(&id)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.grads.keys().copied()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

/// Linear record of a forward computation, replayed in reverse by [`Tape::backward`].
pub struct Tape<T: Real = f32> {
    nodes: Vec<Node<T>>,
    param_vars: HashMap<ParamId, Var>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(op: &'static str, detail: String) -> AutodiffError {
    AutodiffError::Shape { op, detail }
}

fn check_offsets(op: &'static str, offsets: &[usize], len: usize) -> Result<(), AutodiffError> {
    if offsets.is_empty() || offsets[0] != 0 || *offsets.last().unwrap() != len {
        return Err(shape_err(
            op,
            format!("offsets must start at 0 and end at {len}, got {offsets:?}"),
        ));
    }
    if offsets.windows(2).any(|w| w[0] > w[1]) {
        return Err(shape_err(op, "offsets must be non-decreasing".into()));
    }
    Ok(())
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_vars: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> T {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Records a constant (no gradient flows into it).
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Records a parameter leaf; repeated calls for the same id return the same var.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.param_vars.insert(id, v);
        v
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(shape_err(op, format!("{sa:?} vs {sb:?}")));
        }
        Ok(())
    }

    fn as_matrix(&self, op: &'static str, v: Var) -> Result<(usize, usize), AutodiffError> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return Err(shape_err(op, format!("expected a matrix, got shape {:?}", t.shape())));
        }
        Ok((t.shape()[0], t.shape()[1]))
    }

    fn map(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let value = Tensor::new(t.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(x);
        self.push(value, op, rg)
    }

    fn zip(&mut self, name: &'static str, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Result<Var, AutodiffError> {
        self.same_shape(name, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("same shape");
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, op, rg))
    }

    /// `a[m x k] @ b[k x n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.as_matrix("matmul", a)?;
        let (k2, n) = self.as_matrix("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", format!("[{m}, {k}] @ [{k2}, {n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::Matmul(a, b), rg))
    }

    /// `a[m x k] @ b[n x k]^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (m, k) = self.as_matrix("matmul_nt", a)?;
        let (n, k2) = self.as_matrix("matmul_nt", b)?;
        if k != k2 {
            return Err(shape_err("matmul_nt", format!("[{m}, {k}] @ [{n}, {k2}]^T")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::matrix(m, n, out)?, Op::MatmulNt(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip("add", a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip("sub", a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.zip("mul", a, b, Op::Mul(a, b), |x, y| x * y)
    }

    /// Adds a bias row `b` (length `cols`) to every row of `x`.
    pub fn add_row(&mut self, x: Var, b: Var) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.as_matrix("add_row", x)?;
        let bias = self.value(b);
        if bias.numel() != cols {
            return Err(shape_err("add_row", format!("[{rows}, {cols}] + bias {:?}", bias.shape())));
        }
        let mut data = self.value(x).data().to_vec();
        for r in 0..rows {
            for (o, &bv) in data[r * cols..(r + 1) * cols].iter_mut().zip(bias.data()) {
                *o += bv;
            }
        }
        let rg = self.rg(x) || self.rg(b);
        Ok(self.push(Tensor::matrix(rows, cols, data)?, Op::AddRow(x, b), rg))
    }

    /// Scales each row of `x[n x d]` by the matching entry of `w[n x 1]`.
    pub fn mul_col(&mut self, x: Var, w: Var) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.as_matrix("mul_col", x)?;
        let wt = self.value(w);
        if wt.numel() != rows {
            return Err(shape_err("mul_col", format!("[{rows}, {cols}] * column {:?}", wt.shape())));
        }
        let mut data = self.value(x).data().to_vec();
        for r in 0..rows {
            let s = wt.data()[r];
            for o in &mut data[r * cols..(r + 1) * cols] {
                *o *= s;
            }
        }
        let rg = self.rg(x) || self.rg(w);
        Ok(self.push(Tensor::matrix(rows, cols, data)?, Op::MulCol(x, w), rg))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let s = T::from_f64_lossy(s);
        self.map(x, Op::Scale(x, s), |v| v * s)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = T::from_f64_lossy(c);
        self.map(x, Op::AddScalar(x), |v| v + c)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.map(x, Op::Sigmoid(x), stable_sigmoid)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.map(x, Op::Tanh(x), |v| v.tanh())
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.map(x, Op::Exp(x), |v| v.exp())
    }

    pub fn log(&mut self, x: Var) -> Var {
        self.map(x, Op::Log(x), |v| v.ln())
    }

    pub fn square(&mut self, x: Var) -> Var {
        self.map(x, Op::Square(x), |v| v * v)
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.rg(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        if t.numel() == 0 {
            return Err(shape_err("mean", "empty input".into()));
        }
        let s: T = t.data().iter().copied().sum();
        let m = s / T::from_usize(t.numel()).unwrap();
        let rg = self.rg(x);
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), rg))
    }

    /// Per-row sums: `[n x d] -> [n x 1]`.
    pub fn row_sum(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.as_matrix("row_sum", x)?;
        let t = self.value(x);
        let data = (0..rows).map(|r| t.data()[r * cols..(r + 1) * cols].iter().copied().sum()).collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::column(data), Op::RowSum(x), rg))
    }

    /// Per-row dot products of two equally shaped matrices: `[n x d] -> [n x 1]`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("row_dot", a, b)?;
        let (rows, cols) = self.as_matrix("row_dot", a)?;
        let (ta, tb) = (self.value(a).data(), self.value(b).data());
        let data = (0..rows)
            .map(|r| dot(&ta[r * cols..(r + 1) * cols], &tb[r * cols..(r + 1) * cols]))
            .collect();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::column(data), Op::RowDot(a, b), rg))
    }

    /// Selects rows of `x` by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.as_matrix("gather_rows", x)?;
        if let Some(&bad) = index.iter().find(|&&i| i >= rows) {
            return Err(shape_err("gather_rows", format!("row {bad} out of range for {rows} rows")));
        }
        let t = self.value(x).data();
        let mut data = Vec::with_capacity(index.len() * cols);
        for &i in index {
            data.extend_from_slice(&t[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(index.len(), cols, data)?, Op::GatherRows(x, index.into()), rg))
    }

    /// Stacks matrices with equal column counts vertically.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutodiffError> {
        if parts.is_empty() {
            return Err(shape_err("concat_rows", "no inputs".into()));
        }
        let (_, cols) = self.as_matrix("concat_rows", parts[0])?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.as_matrix("concat_rows", p)?;
            if c != cols {
                return Err(shape_err("concat_rows", format!("column mismatch {cols} vs {c}")));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Tensor::matrix(rows, cols, data)?, Op::ConcatRows(parts.to_vec()), rg))
    }

    /// Sums consecutive row groups `[offsets[s], offsets[s+1])`; empty groups give zero rows.
    pub fn segment_sum(&mut self, x: Var, offsets: &[usize]) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.as_matrix("segment_sum", x)?;
        check_offsets("segment_sum", offsets, rows)?;
        let segs = offsets.len() - 1;
        let t = self.value(x).data();
        let mut data = vec![T::zero(); segs * cols];
        for s in 0..segs {
            let out = &mut data[s * cols..(s + 1) * cols];
            for r in offsets[s]..offsets[s + 1] {
                for (o, &v) in out.iter_mut().zip(&t[r * cols..(r + 1) * cols]) {
                    *o += v;
                }
            }
        }
        let rg = self.rg(x);
        Ok(self.push(Tensor::matrix(segs, cols, data)?, Op::SegmentSum(x, offsets.into()), rg))
    }

    /// Softmax within each group of consecutive entries of a flat tensor.
    pub fn segment_softmax(&mut self, x: Var, offsets: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        check_offsets("segment_softmax", offsets, t.numel())?;
        let mut data = t.data().to_vec();
        for w in offsets.windows(2) {
            let seg = &mut data[w[0]..w[1]];
            if seg.is_empty() {
                continue;
            }
            let m = seg.iter().copied().fold(T::neg_infinity(), T::max);
            let mut z = T::zero();
            for v in seg.iter_mut() {
                *v = (*v - m).exp();
                z += *v;
            }
            for v in seg.iter_mut() {
                *v = *v / z;
            }
            debug_assert!({
                let total: f64 = seg.iter().map(|v| v.to_f64_lossy()).sum();
                (total - 1.0).abs() <= 1e-6 * (seg.len() as f64).max(1.0)
            });
        }
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(x);
        Ok(self.push(value, Op::SegmentSoftmax(x, offsets.into()), rg))
    }

    /// Softmax along each row of a matrix.
    pub fn row_softmax(&mut self, x: Var) -> Result<Var, AutodiffError> {
        let (rows, cols) = self.as_matrix("row_softmax", x)?;
        let offsets: Vec<usize> = (0..=rows).map(|r| r * cols).collect();
        self.segment_softmax(x, &offsets)
    }

    /// Stable log-sum-exp of each group of a flat tensor; returns `[segments x 1]`.
    /// Empty groups yield `-inf`.
    pub fn segment_logsumexp(&mut self, x: Var, offsets: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(x);
        check_offsets("segment_logsumexp", offsets, t.numel())?;
        let data = offsets
            .windows(2)
            .map(|w| {
                let seg = &t.data()[w[0]..w[1]];
                if seg.is_empty() {
                    return T::neg_infinity();
                }
                let m = seg.iter().copied().fold(T::neg_infinity(), T::max);
                let z: T = seg.iter().map(|&v| (v - m).exp()).sum();
                m + z.ln()
            })
            .collect();
        let rg = self.rg(x);
        Ok(self.push(Tensor::column(data), Op::SegmentLogSumExp(x, offsets.into()), rg))
    }

    /// Mean of embedding rows per bag: bag `b` covers `tokens[offsets[b]..offsets[b+1]]`.
    pub fn embedding_bag_mean(&mut self, table: Var, tokens: &[u32], offsets: &[usize]) -> Result<Var, AutodiffError> {
        let (vocab, dim) = self.as_matrix("embedding_bag_mean", table)?;
        check_offsets("embedding_bag_mean", offsets, tokens.len())?;
        if let Some(&bad) = tokens.iter().find(|&&t| t as usize >= vocab) {
            return Err(shape_err("embedding_bag_mean", format!("token {bad} out of range for vocab {vocab}")));
        }
        let bags = offsets.len() - 1;
        let t = self.value(table).data();
        let mut data = vec![T::zero(); bags * dim];
        for b in 0..bags {
            let (lo, hi) = (offsets[b], offsets[b + 1]);
            if lo == hi {
                continue;
            }
            let out = &mut data[b * dim..(b + 1) * dim];
            for &tok in &tokens[lo..hi] {
                let row = &t[tok as usize * dim..(tok as usize + 1) * dim];
                for (o, &v) in out.iter_mut().zip(row) {
                    *o += v;
                }
            }
            let inv = T::one() / T::from_usize(hi - lo).unwrap();
            for o in out.iter_mut() {
                *o *= inv;
            }
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::matrix(bags, dim, data)?,
            Op::EmbeddingBagMean {
                table,
                tokens: tokens.into(),
                offsets: offsets.into(),
            },
            rg,
        ))
    }

    /// Elementwise binary cross-entropy on logits against fixed 0/1 targets, in the
    /// overflow-free form `max(l, 0) - l*y + ln(1 + e^{-|l|})`.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var, AutodiffError> {
        let t = self.value(logits);
        if t.numel() != targets.len() {
            return Err(shape_err(
                "bce_with_logits",
                format!("{} logits vs {} targets", t.numel(), targets.len()),
            ));
        }
        let data = t
            .data()
            .iter()
            .zip(targets)
            .map(|(&l, &y)| l.max(T::zero()) - l * y + (-l.abs()).exp().ln_1p())
            .collect();
        let value = Tensor::new(t.shape().to_vec(), data)?;
        let rg = self.rg(logits);
        Ok(self.push(value, Op::BceWithLogits(logits, targets.into()), rg))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>, AutodiffError> {
        let root = self.value(loss);
        if !root.is_scalar() {
            return Err(AutodiffError::NotScalar {
                shape: root.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            if node.param.is_some() {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(idx, &g, &mut grads);
        }

        let mut out = BTreeMap::new();
        for (&pid, &v) in &self.param_vars {
            if v.0 <= loss.0 {
                if let Some(g) = grads[v.0].take() {
                    let shape = self.value(v).shape().to_vec();
                    out.insert(pid, Tensor::new(shape, g)?);
                }
            }
        }
        Ok(Gradients { grads: out })
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let mut acc = |v: Var, f: &dyn Fn(&mut [T])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Matmul(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = dims(self.value(*b)).1;
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|s| matmul_nt_acc(g, bd, s, m, n, k));
                acc(*b, &|s| matmul_tn_acc(ad, g, s, m, k, n));
            }
            Op::MatmulNt(a, b) => {
                let (m, k) = dims(self.value(*a));
                let n = dims(self.value(*b)).0;
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|s| matmul_acc(g, bd, s, m, n, k));
                acc(*b, &|s| matmul_tn_acc(g, ad, s, m, n, k));
            }
            Op::Add(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| add_into(s, g));
            }
            Op::Sub(a, b) => {
                acc(*a, &|s| add_into(s, g));
                acc(*b, &|s| {
                    for (o, &gi) in s.iter_mut().zip(g) {
                        *o -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|s| {
                    for ((o, &gi), &bv) in s.iter_mut().zip(g).zip(bd) {
                        *o += gi * bv;
                    }
                });
                acc(*b, &|s| {
                    for ((o, &gi), &av) in s.iter_mut().zip(g).zip(ad) {
                        *o += gi * av;
                    }
                });
            }
            Op::AddRow(x, b) => {
                let cols = self.value(*x).cols();
                acc(*x, &|s| add_into(s, g));
                acc(*b, &|s| {
                    for row in g.chunks(cols) {
                        add_into(s, row);
                    }
                });
            }
            Op::MulCol(x, w) => {
                let cols = self.value(*x).cols();
                let (xd, wd) = (self.value(*x).data(), self.value(*w).data());
                acc(*x, &|s| {
                    for (r, (srow, grow)) in s.chunks_mut(cols).zip(g.chunks(cols)).enumerate() {
                        for (o, &gi) in srow.iter_mut().zip(grow) {
                            *o += gi * wd[r];
                        }
                    }
                });
                acc(*w, &|s| {
                    for (r, (grow, xrow)) in g.chunks(cols).zip(xd.chunks(cols)).enumerate() {
                        s[r] += dot(grow, xrow);
                    }
                });
            }
            Op::Scale(x, c) => acc(*x, &|s| {
                for (o, &gi) in s.iter_mut().zip(g) {
                    *o += gi * *c;
                }
            }),
            Op::AddScalar(x) => acc(*x, &|s| add_into(s, g)),
            Op::Sigmoid(x) => acc(*x, &|s| {
                for ((o, &gi), &y) in s.iter_mut().zip(g).zip(out) {
                    *o += gi * y * (T::one() - y);
                }
            }),
            Op::Tanh(x) => acc(*x, &|s| {
                for ((o, &gi), &y) in s.iter_mut().zip(g).zip(out) {
                    *o += gi * (T::one() - y * y);
                }
            }),
            Op::Exp(x) => acc(*x, &|s| {
                for ((o, &gi), &y) in s.iter_mut().zip(g).zip(out) {
                    *o += gi * y;
                }
            }),
            Op::Log(x) => {
                let xd = self.value(*x).data();
                acc(*x, &|s| {
                    for ((o, &gi), &xv) in s.iter_mut().zip(g).zip(xd) {
                        *o += gi / xv;
                    }
                })
            }
            Op::Square(x) => {
                let xd = self.value(*x).data();
                let two = T::one() + T::one();
                acc(*x, &|s| {
                    for ((o, &gi), &xv) in s.iter_mut().zip(g).zip(xd) {
                        *o += two * xv * gi;
                    }
                })
            }
            Op::Sum(x) => acc(*x, &|s| {
                for o in s.iter_mut() {
                    *o += g[0];
                }
            }),
            Op::Mean(x) => {
                let n = T::from_usize(self.value(*x).numel()).unwrap();
                acc(*x, &|s| {
                    for o in s.iter_mut() {
                        *o += g[0] / n;
                    }
                })
            }
            Op::RowSum(x) => {
                let cols = self.value(*x).cols();
                acc(*x, &|s| {
                    for (r, srow) in s.chunks_mut(cols).enumerate() {
                        for o in srow {
                            *o += g[r];
                        }
                    }
                })
            }
            Op::RowDot(a, b) => {
                let cols = self.value(*a).cols();
                let (ad, bd) = (self.value(*a).data(), self.value(*b).data());
                acc(*a, &|s| {
                    for (r, srow) in s.chunks_mut(cols).enumerate() {
                        for (o, &bv) in srow.iter_mut().zip(&bd[r * cols..(r + 1) * cols]) {
                            *o += g[r] * bv;
                        }
                    }
                });
                acc(*b, &|s| {
                    for (r, srow) in s.chunks_mut(cols).enumerate() {
                        for (o, &av) in srow.iter_mut().zip(&ad[r * cols..(r + 1) * cols]) {
                            *o += g[r] * av;
                        }
                    }
                });
            }
            Op::GatherRows(x, index) => {
                let cols = self.value(*x).cols();
                acc(*x, &|s| {
                    for (j, &i) in index.iter().enumerate() {
                        add_into(&mut s[i * cols..(i + 1) * cols], &g[j * cols..(j + 1) * cols]);
                    }
                })
            }
            Op::ConcatRows(parts) => {
                let mut start = 0;
                for p in parts {
                    let n = self.value(*p).numel();
                    let slice = &g[start..start + n];
                    acc(*p, &|s| add_into(s, slice));
                    start += n;
                }
            }
            Op::SegmentSum(x, offsets) => {
                let cols = self.value(*x).cols();
                acc(*x, &|s| {
                    for (seg, w) in offsets.windows(2).enumerate() {
                        let grow = &g[seg * cols..(seg + 1) * cols];
                        for r in w[0]..w[1] {
                            add_into(&mut s[r * cols..(r + 1) * cols], grow);
                        }
                    }
                })
            }
            Op::SegmentSoftmax(x, offsets) => acc(*x, &|s| {
                for w in offsets.windows(2) {
                    let (y, gy) = (&out[w[0]..w[1]], &g[w[0]..w[1]]);
                    let inner: T = y.iter().zip(gy).map(|(&a, &b)| a * b).sum();
                    for (k, o) in s[w[0]..w[1]].iter_mut().enumerate() {
                        *o += y[k] * (gy[k] - inner);
                    }
                }
            }),
            Op::SegmentLogSumExp(x, offsets) => {
                let xd = self.value(*x).data();
                acc(*x, &|s| {
                    for (seg, w) in offsets.windows(2).enumerate() {
                        let lse = out[seg];
                        for r in w[0]..w[1] {
                            s[r] += g[seg] * (xd[r] - lse).exp();
                        }
                    }
                })
            }
            Op::EmbeddingBagMean { table, tokens, offsets } => {
                let dim = self.value(*table).cols();
                acc(*table, &|s| {
                    for (b, w) in offsets.windows(2).enumerate() {
                        if w[0] == w[1] {
                            continue;
                        }
                        let inv = T::one() / T::from_usize(w[1] - w[0]).unwrap();
                        let grow = &g[b * dim..(b + 1) * dim];
                        for &tok in &tokens[w[0]..w[1]] {
                            let dst = &mut s[tok as usize * dim..(tok as usize + 1) * dim];
                            for (o, &gi) in dst.iter_mut().zip(grow) {
                                *o += gi * inv;
                            }
                        }
                    }
                })
            }
            Op::BceWithLogits(l, targets) => {
                let ld = self.value(*l).data();
                acc(*l, &|s| {
                    for (i, o) in s.iter_mut().enumerate() {
                        *o += g[i] * (stable_sigmoid(ld[i]) - targets[i]);
                    }
                })
            }
        }
    }
}

fn dims<T: Real>(t: &Tensor<T>) -> (usize, usize) {
    (t.shape()[0], t.shape()[1])
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (o, &v) in dst.iter_mut().zip(src) {
        *o += v;
    }
}

/// Logistic function without overflow for large |x|.
pub fn stable_sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
