use std::collections::BTreeMap;
use std::sync::Arc;

use rand::Rng;

use super::kernels::{self, dims2};
use super::{ParamId, ParamStore, Scalar, Tensor};
use crate::error::{contract, DotError, Result};

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// What softmax does with a row that has no finite entry.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Degenerate {
    Error,
    /// The row becomes all zeros (a query that attends to nothing).
    Zero,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    MatMul { a: Var, b: Var, trans_b: bool, alpha: T },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRowBcast(Var, Var),
    AddColBcast(Var, Var),
    Gather { table: Var, ids: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<T>, inv_std: Vec<T> },
    Gelu(Var),
    Tanh(Var),
    LogSigmoid(Var),
    SoftmaxRows(Var),
    SliceCols { a: Var, start: usize },
    ConcatCols(Vec<Var>),
    Dropout { a: Var, mask: Vec<T> },
    ClampMin { a: Var, lo: T },
    Sum(Var),
    Reshape(Var),
    BceWithLogits { logits: Var, targets: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    shape: Vec<usize>,
    value: Arc<Vec<T>>,
    op: Op<T>,
    requires_grad: bool,
}

/// A single-use tape. Nodes are appended in evaluation order, so the node
/// list is already a topological order for the reverse sweep.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`].
#[derive(Debug, Default)]
pub struct Gradients<T> {
    params: BTreeMap<ParamId, Vec<T>>,
    leaves: BTreeMap<usize, Vec<T>>,
}

impl<T: Scalar> Gradients<T> {
    /// Gradient of a parameter, `None` when the loss does not reach it.
    pub fn param(&self, id: ParamId) -> Option<&[T]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    /// Gradient of a leaf created with `requires_grad`; zeros when unreachable.
    pub fn leaf(&self, v: Var) -> Option<&[T]> {
        self.leaves.get(&v.0).map(Vec::as_slice)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &[T])> {
        self.params.iter().map(|(k, v)| (*k, v.as_slice()))
    }

    pub fn into_params(self) -> BTreeMap<ParamId, Vec<T>> {
        self.params
    }
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        self.nodes.push(Node {
            shape,
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn node(&self, v: Var) -> &Node<T> {
        &self.nodes[v.0]
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.node(v).value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.node(v).shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.node(v).requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).expect("node shapes are consistent")
    }

    /// Value of a single-element node.
    pub fn scalar(&self, v: Var) -> T {
        self.value(v)[0]
    }

    pub fn input(&mut self, shape: Vec<usize>, data: Vec<T>, requires_grad: bool) -> Result<Var> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(DotError::Shape {
                op: "input",
                lhs: shape,
                rhs: vec![data.len()],
            });
        }
        Ok(self.push(shape, data, Op::Leaf, requires_grad))
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<T>) -> Result<Var> {
        self.input(shape, data, false)
    }

    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            shape: p.shape.clone(),
            value: store.shared(id),
            op: Op::Param(id),
            requires_grad: true,
        });
        Var(self.nodes.len() - 1)
    }

    /// Same value, no gradient path.
    pub fn detach(&mut self, a: Var) -> Var {
        let n = self.node(a);
        let (shape, value) = (n.shape.clone(), Arc::clone(&n.value));
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Leaf,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n = self.node(a);
        if shape.iter().product::<usize>() != n.value.len() {
            return Err(DotError::Shape {
                op: "reshape",
                lhs: n.shape.clone(),
                rhs: shape,
            });
        }
        let value = Arc::clone(&n.value);
        let rg = n.requires_grad;
        self.nodes.push(Node {
            shape,
            value,
            op: Op::Reshape(a),
            requires_grad: rg,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, false, T::one())
    }

    /// `a · bᵀ`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_ext(a, b, true, T::one())
    }

    /// `alpha · a · op(b)` where `op` optionally transposes `b`.
    pub fn matmul_ext(&mut self, a: Var, b: Var, trans_b: bool, alpha: T) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let shape_err = || DotError::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err());
        }
        let (m, k) = (sa[0], sa[1]);
        let (k2, n) = if trans_b { (sb[1], sb[0]) } else { (sb[0], sb[1]) };
        if k != k2 {
            return Err(shape_err());
        }
        let mut out = vec![T::zero(); m * n];
        kernels::matmul_into(self.value(a), self.value(b), &mut out, m, k, n, trans_b, alpha, T::zero());
        let rg = self.rg(&[a, b]);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, trans_b, alpha }, rg))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(DotError::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::Mul(a, b), rg))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Scale(a, c), rg)
    }

    /// Adds `v[j]` to column `j` of every row of `a`.
    pub fn add_row_bcast(&mut self, a: Var, v: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(a));
        if self.value(v).len() != n {
            return Err(DotError::Shape {
                op: "add_row_bcast",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let mut out = self.value(a).to_vec();
        let vv = self.value(v);
        for r in 0..m {
            for (o, &b) in out[r * n..(r + 1) * n].iter_mut().zip(vv) {
                *o += b;
            }
        }
        let rg = self.rg(&[a, v]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddRowBcast(a, v), rg))
    }

    /// Adds `v[i]` to every entry of row `i` of `a`.
    pub fn add_col_bcast(&mut self, a: Var, v: Var) -> Result<Var> {
        let (m, n) = dims2(self.shape(a));
        if self.value(v).len() != m {
            return Err(DotError::Shape {
                op: "add_col_bcast",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(v).to_vec(),
            });
        }
        let mut out = self.value(a).to_vec();
        let vv = self.value(v);
        for r in 0..m {
            out[r * n..(r + 1) * n].iter_mut().for_each(|o| *o += vv[r]);
        }
        let rg = self.rg(&[a, v]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::AddColBcast(a, v), rg))
    }

    /// Rows `ids` of a matrix (embedding lookup when `table` is a parameter).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        if self.shape(table).len() == 1 {
            return self.gather_elems(table, ids);
        }
        let (rows, cols) = dims2(self.shape(table));
        if let Some(&bad) = ids.iter().find(|&&i| i >= rows) {
            return Err(contract(format!("row index {bad} out of range for {rows} rows")));
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * cols);
        for &i in ids {
            out.extend_from_slice(&tv[i * cols..(i + 1) * cols]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(vec![ids.len(), cols], out, Op::Gather { table, ids: ids.to_vec() }, rg))
    }

    /// Elements `ids` of a vector.
    pub fn gather_elems(&mut self, v: Var, ids: &[usize]) -> Result<Var> {
        let n = self.value(v).len();
        let col = self.reshape(v, vec![n, 1])?;
        let g = self.gather_rows(col, ids)?;
        self.reshape(g, vec![ids.len()])
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (m, h) = dims2(self.shape(x));
        if self.value(gain).len() != h || self.value(bias).len() != h {
            return Err(DotError::Shape {
                op: "layer_norm",
                lhs: self.shape(x).to_vec(),
                rhs: self.shape(gain).to_vec(),
            });
        }
        let mut out = vec![T::zero(); m * h];
        let mut xhat = vec![T::zero(); m * h];
        let mut inv_std = Vec::with_capacity(m);
        let zeros = vec![T::zero(); h];
        let ones = vec![T::one(); h];
        let (xv, gv, bv) = (self.value(x), self.value(gain), self.value(bias));
        for r in 0..m {
            let row = &xv[r * h..(r + 1) * h];
            let s = kernels::layer_norm_row(row, &ones, &zeros, eps, &mut xhat[r * h..(r + 1) * h]);
            inv_std.push(s);
            for j in 0..h {
                out[r * h + j] = gv[j] * xhat[r * h + j] + bv[j];
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            self.shape(x).to_vec(),
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Gelu(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| x.tanh()).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Tanh(a), rg)
    }

    pub fn log_sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).iter().map(|&x| kernels::log_sigmoid(x)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::LogSigmoid(a), rg)
    }

    pub fn softmax_rows(&mut self, a: Var, degenerate: Degenerate) -> Result<Var> {
        let (m, n) = dims2(self.shape(a));
        let mut out = self.value(a).to_vec();
        kernels::softmax_rows_inplace(&mut out, m, n, degenerate)?;
        let rg = self.rg(&[a]);
        Ok(self.push(self.shape(a).to_vec(), out, Op::SoftmaxRows(a), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (m, n) = dims2(self.shape(a));
        if start + len > n {
            return Err(contract(format!("column slice {start}..{} of {n} columns", start + len)));
        }
        let av = self.value(a);
        let mut out = Vec::with_capacity(m * len);
        for r in 0..m {
            out.extend_from_slice(&av[r * n + start..r * n + start + len]);
        }
        let rg = self.rg(&[a]);
        Ok(self.push(vec![m, len], out, Op::SliceCols { a, start }, rg))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = dims2(self.shape(parts[0])).0;
        if parts.iter().any(|&p| dims2(self.shape(p)).0 != m) {
            return Err(contract("concat_cols: row counts differ"));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| dims2(self.shape(p)).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[r * w..(r + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), rg))
    }

    /// Inverted dropout. `p == 0` returns `a` unchanged.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return a;
        }
        let keep = T::c(1.0 / (1.0 - p));
        let mask: Vec<T> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::Dropout { a, mask }, rg)
    }

    pub fn clamp_min(&mut self, a: Var, lo: T) -> Var {
        let out = self.value(a).iter().map(|&x| x.max(lo)).collect();
        let rg = self.rg(&[a]);
        self.push(self.shape(a).to_vec(), out, Op::ClampMin { a, lo }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push(vec![1], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1);
        let s = self.sum(a);
        self.scale(s, T::one() / T::from_usize(n).unwrap())
    }

    /// Mean binary cross-entropy of `logits` against `targets`. Empty input gives 0.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let z = self.value(logits);
        if z.len() != targets.len() {
            return Err(DotError::Shape {
                op: "bce_with_logits",
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if targets.iter().any(|&y| !(y >= T::zero() && y <= T::one())) {
            return Err(contract("bce targets must lie in [0, 1]"));
        }
        let n = T::from_usize(z.len().max(1)).unwrap();
        let loss = z.iter().zip(targets).map(|(&zi, &yi)| kernels::bce_with_logit(zi, yi)).sum::<T>() / n;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).len() != 1 {
            return Err(contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..=loss.0).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::default();

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    out.leaves.insert(i, g);
                }
                Op::Param(id) => match out.params.get_mut(id) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => {
                        out.params.insert(*id, g);
                    }
                },
                op => self.backprop(op, node, &g, &mut grads),
            }
        }
        // requires_grad leaves that the loss never reached get zeros
        for (i, n) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if n.requires_grad && matches!(n.op, Op::Leaf) {
                out.leaves.entry(i).or_insert_with(|| vec![T::zero(); n.value.len()]);
            }
        }
        Ok(out)
    }

    fn backprop(&self, op: &Op<T>, node: &Node<T>, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let wants = |v: Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf | Op::Param(_) => unreachable!(),
            Op::MatMul { a, b, trans_b, alpha } => {
                let (m, k) = dims2(self.shape(*a));
                let n = node.shape[1];
                if wants(*a) {
                    let ga = acc(grads, *a, m * k);
                    let bv = self.value(*b);
                    if *trans_b {
                        // b is n×k: dA = α g b
                        T::gemm(m, n, k, *alpha, g, n as isize, 1, bv, k as isize, 1, T::one(), ga, k as isize, 1);
                    } else {
                        // b is k×n: dA = α g bᵀ
                        T::gemm(m, n, k, *alpha, g, n as isize, 1, bv, 1, n as isize, T::one(), ga, k as isize, 1);
                    }
                }
                if wants(*b) {
                    let gb = acc(grads, *b, k * n);
                    let av = self.value(*a);
                    if *trans_b {
                        kernels::matmul_gt_a_acc(g, av, gb, m, n, k, *alpha);
                    } else {
                        kernels::matmul_at_b_acc(av, g, gb, m, k, n, *alpha);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if wants(v) {
                        add_into(acc(grads, v, g.len()), g);
                    }
                }
            }
            Op::Mul(a, b) => {
                if wants(*a) {
                    let bv = self.value(*b);
                    let ga = acc(grads, *a, g.len());
                    for j in 0..g.len() {
                        ga[j] += g[j] * bv[j];
                    }
                }
                if wants(*b) {
                    let av = self.value(*a);
                    let gb = acc(grads, *b, g.len());
                    for j in 0..g.len() {
                        gb[j] += g[j] * av[j];
                    }
                }
            }
            Op::Scale(a, c) => {
                if wants(*a) {
                    let ga = acc(grads, *a, g.len());
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *c);
                }
            }
            Op::AddRowBcast(a, v) => {
                let (m, n) = dims2(&node.shape);
                if wants(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if wants(*v) {
                    let gv = acc(grads, *v, n);
                    for r in 0..m {
                        add_into(gv, &g[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::AddColBcast(a, v) => {
                let (m, n) = dims2(&node.shape);
                if wants(*a) {
                    add_into(acc(grads, *a, g.len()), g);
                }
                if wants(*v) {
                    let gv = acc(grads, *v, m);
                    for r in 0..m {
                        gv[r] += g[r * n..(r + 1) * n].iter().copied().sum::<T>();
                    }
                }
            }
            Op::Gather { table, ids } => {
                let (rows, cols) = dims2(self.shape(*table));
                let gt = acc(grads, *table, rows * cols);
                for (r, &i) in ids.iter().enumerate() {
                    add_into(&mut gt[i * cols..(i + 1) * cols], &g[r * cols..(r + 1) * cols]);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let (m, h) = dims2(&node.shape);
                let gv = self.value(*gain).to_vec();
                if wants(*gain) {
                    let gg = acc(grads, *gain, h);
                    for r in 0..m {
                        for j in 0..h {
                            gg[j] += g[r * h + j] * xhat[r * h + j];
                        }
                    }
                }
                if wants(*bias) {
                    let gb = acc(grads, *bias, h);
                    for r in 0..m {
                        add_into(gb, &g[r * h..(r + 1) * h]);
                    }
                }
                if wants(*x) {
                    let hn = T::from_usize(h).unwrap();
                    let gx = acc(grads, *x, m * h);
                    let mut dxhat = vec![T::zero(); h];
                    for r in 0..m {
                        let xr = &xhat[r * h..(r + 1) * h];
                        for j in 0..h {
                            dxhat[j] = g[r * h + j] * gv[j];
                        }
                        let s1: T = dxhat.iter().copied().sum();
                        let s2: T = dxhat.iter().zip(xr).map(|(&d, &xh)| d * xh).sum();
                        let scale = inv_std[r] / hn;
                        for j in 0..h {
                            gx[r * h + j] += scale * (hn * dxhat[j] - s1 - xr[j] * s2);
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let av = self.value(*a);
                let ga = acc(grads, *a, g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] * kernels::gelu_grad(av[j]);
                }
            }
            Op::Tanh(a) => {
                let ga = acc(grads, *a, g.len());
                for j in 0..g.len() {
                    let y = node.value[j];
                    ga[j] += g[j] * (T::one() - y * y);
                }
            }
            Op::LogSigmoid(a) => {
                let av = self.value(*a);
                let ga = acc(grads, *a, g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] * kernels::sigmoid(-av[j]);
                }
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = dims2(&node.shape);
                let p = &node.value;
                let ga = acc(grads, *a, m * n);
                for r in 0..m {
                    let pr = &p[r * n..(r + 1) * n];
                    let gr = &g[r * n..(r + 1) * n];
                    let dot: T = pr.iter().zip(gr).map(|(&x, &y)| x * y).sum();
                    for j in 0..n {
                        ga[r * n + j] += pr[j] * (gr[j] - dot);
                    }
                }
            }
            Op::SliceCols { a, start } => {
                let (m, n) = dims2(self.shape(*a));
                let w = node.shape[1];
                let ga = acc(grads, *a, m * n);
                for r in 0..m {
                    add_into(&mut ga[r * n + start..r * n + start + w], &g[r * w..(r + 1) * w]);
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = dims2(&node.shape);
                let mut offset = 0;
                for &p in parts {
                    let w = dims2(self.shape(p)).1;
                    if wants(p) {
                        let gp = acc(grads, p, m * w);
                        for r in 0..m {
                            add_into(&mut gp[r * w..(r + 1) * w], &g[r * total + offset..r * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::Dropout { a, mask } => {
                let ga = acc(grads, *a, g.len());
                for j in 0..g.len() {
                    ga[j] += g[j] * mask[j];
                }
            }
            Op::ClampMin { a, lo } => {
                let av = self.value(*a);
                let ga = acc(grads, *a, g.len());
                for j in 0..g.len() {
                    if av[j] >= *lo {
                        ga[j] += g[j];
                    }
                }
            }
            Op::Sum(a) => {
                let n = self.value(*a).len();
                let ga = acc(grads, *a, n);
                ga.iter_mut().for_each(|x| *x += g[0]);
            }
            Op::Reshape(a) => {
                add_into(acc(grads, *a, g.len()), g);
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.value(*logits);
                let n = T::from_usize(z.len().max(1)).unwrap();
                let gz = acc(grads, *logits, z.len());
                for j in 0..z.len() {
                    gz[j] += g[0] * (kernels::sigmoid(z[j]) - targets[j]) / n;
                }
            }
        }
    }
}

fn acc<T: Scalar>(grads: &mut [Option<Vec<T>>], v: Var, len: usize) -> &mut [T] {
    grads[v.0].get_or_insert_with(|| vec![T::zero(); len])
}

fn add_into<T: Scalar>(dst: &mut [T], src: &[T]) {
    dst.iter_mut().zip(src).for_each(|(d, &s)| *d += s);
}
