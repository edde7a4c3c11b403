//! Reverse-mode differentiation over a linear tape.
//!
//! Every primitive appends a node holding its forward value. `backward`
//! replays the tape in reverse creation order, so gradient accumulation
//! order is fixed and runs are bitwise reproducible.

use std::collections::BTreeMap;

use super::squash::SquashKind;
use super::tensor::{check_shape, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Identifier of a trainable parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Gradients keyed by parameter, one entry per parameter registered on the graph.
#[derive(Debug, Clone)]
pub struct GradientMap<F: Real> {
    grads: BTreeMap<ParamId, Tensor<F>>,
}

impl<F: Real> Default for GradientMap<F> {
    fn default() -> Self {
        GradientMap { grads: BTreeMap::new() }
    }
}

impl<F: Real> GradientMap<F> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, id: ParamId, grad: Tensor<F>) {
        self.grads.insert(id, grad);
    }

    /// Adds `other` entry by entry. Shapes must agree where both hold a gradient.
    pub fn accumulate(&mut self, other: &GradientMap<F>) -> Result<()> {
        for (id, g) in other.iter() {
            match self.grads.get_mut(&id) {
                Some(acc) => {
                    if acc.shape() != g.shape() {
                        return Err(Error::shape(
                            "accumulate",
                            format!("gradient {:?} vs {:?} for parameter {}", acc.shape(), g.shape(), id.0),
                        ));
                    }
                    for (a, &b) in acc.data_mut().iter_mut().zip(g.data()) {
                        *a += b;
                    }
                }
                None => {
                    self.grads.insert(id, g.clone());
                }
            }
        }
        Ok(())
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.grads.get(&id)
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Tensor<F>> {
        self.grads.get_mut(&id)
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor<F>)> {
        self.grads.iter().map(|(k, v)| (*k, v))
    }
}

#[derive(Debug, Clone)]
enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv1d { x: Var, w: Var, cin: usize, k: usize, cout: usize },
    Relu(Var),
    /// `b` is broadcast over leading axes of `a`.
    Add { a: Var, b: Var },
    /// `b` is broadcast over trailing axes of `a`.
    Mul { a: Var, b: Var },
    Scale { x: Var, c: F },
    AddScalar(Var),
    L2Norm { x: Var, outer: usize, n: usize, inner: usize },
    Concat { inputs: Vec<Var>, outer: usize, chunks: Vec<usize> },
    Mean { x: Var, outer: usize, n: usize, inner: usize },
    Sum(Var),
    Gather { table: Var, indices: Vec<usize>, width: usize },
    Reshape(Var),
    SliceRows { x: Var, start: usize, len: usize },
    Squash { x: Var, kind: SquashKind, d: usize },
    Softmax { x: Var, n: usize },
    LogSoftmax { x: Var, n: usize },
    Votes { u: Var, w: Var, h: usize, parents: usize, d: usize, shared: bool },
    WeightedSum { c: Var, u: Var, h: usize, parents: usize, d: usize },
    Agreement { u: Var, v: Var, h: usize, parents: usize, d: usize },
    Expand(Var),
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
    param: Option<ParamId>,
}

/// A differentiation graph. Confined to one thread; build one per forward pass.
pub struct Graph<F: Real> {
    nodes: Vec<Node<F>>,
}

impl<F: Real> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::shape(op, format!("axis {axis} out of range for {shape:?}")));
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

fn reduced_shape(shape: &[usize], axis: usize) -> Vec<usize> {
    let mut out: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != axis)
        .map(|(_, &n)| n)
        .collect();
    if out.is_empty() {
        out.push(1);
    }
    out
}

impl<F: Real> Graph<F> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Registers a trainable leaf (`requires_grad = true`).
    pub fn param(&mut self, id: ParamId, value: Tensor<F>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: true, param: Some(id) });
        Var(self.nodes.len() - 1)
    }

    /// Registers a non-trainable leaf.
    pub fn constant(&mut self, value: Tensor<F>) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, needs_grad: false, param: None });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { value, op, needs_grad, param: None });
        Var(self.nodes.len() - 1)
    }

    fn data(&self, v: Var) -> &[F] {
        self.nodes[v.0].value.data()
    }

    /// `[m,k] x [k,n] -> [m,n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(Error::shape("matmul", format!("{sa:?} x {sb:?}"))),
        };
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![F::zero(); m * n];
        for i in 0..m {
            let row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let av = ad[i * k + p];
                if av == F::zero() {
                    continue;
                }
                for (o, &bv) in row.iter_mut().zip(&bd[p * n..(p + 1) * n]) {
                    *o += av * bv;
                }
            }
        }
        let value = Tensor::from_vec(&[m, n], out)?;
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, &[a, b]))
    }

    /// Valid (no padding) stride-1 convolution of `x: [L, Cin]` with
    /// `w: [K, Cin, Cout]`, giving `[L-K+1, Cout]`.
    pub fn conv1d_valid(&mut self, x: Var, w: Var) -> Result<Var> {
        let (sx, sw) = (self.shape(x), self.shape(w));
        let (len, cin, k, cout) = match (sx, sw) {
            ([l, c], [k, c2, o]) if c == c2 && l >= k => (*l, *c, *k, *o),
            _ => return Err(Error::shape("conv1d_valid", format!("input {sx:?}, kernel {sw:?}"))),
        };
        let out_len = len - k + 1;
        let (xd, wd) = (self.data(x), self.data(w));
        let mut out = vec![F::zero(); out_len * cout];
        for t in 0..out_len {
            let row = &mut out[t * cout..(t + 1) * cout];
            for s in 0..k {
                for c in 0..cin {
                    let xv = xd[(t + s) * cin + c];
                    let wrow = &wd[(s * cin + c) * cout..(s * cin + c + 1) * cout];
                    for (o, &wv) in row.iter_mut().zip(wrow) {
                        *o += xv * wv;
                    }
                }
            }
        }
        let value = Tensor::from_vec(&[out_len, cout], out)?;
        Ok(self.push(value, Op::Conv1d { x, w, cin, k, cout }, &[x, w]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v.max(F::zero())).collect();
        let value = Tensor::from_vec(src.shape(), data).expect("same shape");
        self.push(value, Op::Relu(x), &[x])
    }

    /// Elementwise sum. `b` may have the shape of a suffix of `a`'s shape,
    /// in which case it is repeated over the leading axes (bias add).
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !sa.ends_with(sb) {
            return Err(Error::shape("add", format!("{sa:?} + {sb:?}")));
        }
        let nb = self.value(b).len();
        let bd = self.data(b);
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &av)| av + bd[i % nb])
            .collect();
        let value = Tensor::from_vec(sa, data)?;
        Ok(self.push(value, Op::Add { a, b }, &[a, b]))
    }

    /// Elementwise product. `b` may have the shape of a prefix of `a`'s
    /// shape, in which case each of its entries scales a contiguous block.
    pub fn elementwise_mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if !sa.starts_with(sb) {
            return Err(Error::shape("elementwise_mul", format!("{sa:?} * {sb:?}")));
        }
        let block = self.value(a).len() / self.value(b).len();
        let bd = self.data(b);
        let data = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &av)| av * bd[i / block])
            .collect();
        let value = Tensor::from_vec(sa, data)?;
        Ok(self.push(value, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let c = F::lit(c);
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v * c).collect();
        let value = Tensor::from_vec(src.shape(), data).expect("same shape");
        self.push(value, Op::Scale { x, c }, &[x])
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let c = F::lit(c);
        let src = self.value(x);
        let data = src.data().iter().map(|&v| v + c).collect();
        let value = Tensor::from_vec(src.shape(), data).expect("same shape");
        self.push(value, Op::AddScalar(x), &[x])
    }

    /// Euclidean norm along `axis` (the axis is removed).
    pub fn l2_norm(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis, "l2_norm")?;
        let xd = self.data(x);
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let sq: F = (0..n).map(|j| {
                    let v = xd[(o * n + j) * inner + i];
                    v * v
                }).sum();
                out[o * inner + i] = sq.sqrt();
            }
        }
        let value = Tensor::from_vec(&reduced_shape(&shape, axis), out)?;
        Ok(self.push(value, Op::L2Norm { x, outer, n, inner }, &[x]))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs
            .first()
            .ok_or_else(|| Error::shape("concat", "no inputs"))?;
        let base = self.shape(*first).to_vec();
        if axis >= base.len() {
            return Err(Error::shape("concat", format!("axis {axis} out of range for {base:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == base.len()
                && s.iter().zip(&base).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                let shapes: Vec<_> = inputs.iter().map(|&v| self.shape(v).to_vec()).collect();
                return Err(Error::shape("concat", format!("incompatible shapes {shapes:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let chunks: Vec<usize> = inputs.iter().map(|&v| self.shape(v)[axis] * inner).collect();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (&v, &chunk) in inputs.iter().zip(&chunks) {
                out.extend_from_slice(&self.data(v)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let value = Tensor::from_vec(&shape, out)?;
        Ok(self.push(value, Op::Concat { inputs: inputs.to_vec(), outer, chunks }, inputs))
    }

    /// Mean along `axis` (the axis is removed).
    pub fn mean(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, n, inner) = split_axis(&shape, axis, "mean")?;
        let xd = self.data(x);
        let scale = F::lit(1.0 / n as f64);
        let mut out = vec![F::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                for i in 0..inner {
                    out[o * inner + i] += xd[(o * n + j) * inner + i];
                }
            }
        }
        out.iter_mut().for_each(|v| *v *= scale);
        let value = Tensor::from_vec(&reduced_shape(&shape, axis), out)?;
        Ok(self.push(value, Op::Mean { x, outer, n, inner }, &[x]))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Row lookup: `table: [rows, width]` -> `[indices.len(), width]`.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let st = self.shape(table);
        let (rows, width) = match st {
            [r, w] => (*r, *w),
            _ => return Err(Error::shape("gather_rows", format!("table {st:?} is not 2-D"))),
        };
        if indices.is_empty() {
            return Err(Error::shape("gather_rows", "no indices"));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(Error::shape("gather_rows", format!("index {bad} out of {rows} rows")));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(indices.len() * width);
        for &i in indices {
            out.extend_from_slice(&td[i * width..(i + 1) * width]);
        }
        let value = Tensor::from_vec(&[indices.len(), width], out)?;
        Ok(self.push(value, Op::Gather { table, indices: indices.to_vec(), width }, &[table]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(value, Op::Reshape(x), &[x]))
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if len == 0 || start + len > shape[0] {
            return Err(Error::shape("slice_rows", format!("rows {start}..{} of {shape:?}", start + len)));
        }
        let row: usize = shape[1..].iter().product();
        let data = self.data(x)[start * row..(start + len) * row].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let value = Tensor::from_vec(&out_shape, data)?;
        Ok(self.push(value, Op::SliceRows { x, start: start * row, len: len * row }, &[x]))
    }

    /// Squash along the last axis. Zero vectors map to zero.
    pub fn squash(&mut self, x: Var, kind: SquashKind) -> Var {
        let src = self.value(x);
        let d = *src.shape().last().expect("rank >= 1");
        let mut out = src.data().to_vec();
        for vec in out.chunks_mut(d) {
            let n = vec.iter().map(|&v| v * v).sum::<F>().sqrt();
            if n == F::zero() {
                continue;
            }
            let n64 = n.as_f64();
            let h = F::lit(kind.coefficient(n64) / n64);
            vec.iter_mut().for_each(|v| *v *= h);
        }
        let value = Tensor::from_vec(src.shape(), out).expect("same shape");
        self.push(value, Op::Squash { x, kind, d }, &[x])
    }

    /// Softmax along the last axis. With `leaky`, a constant zero logit is
    /// appended to every row before normalizing and its share is dropped,
    /// so each row sums to strictly less than one.
    pub fn softmax(&mut self, x: Var, leaky: bool) -> Var {
        let src = self.value(x);
        let n = *src.shape().last().expect("rank >= 1");
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(n) {
            let mut max = row.iter().copied().fold(F::neg_infinity(), F::max);
            if leaky {
                max = max.max(F::zero());
            }
            row.iter_mut().for_each(|v| *v = (*v - max).exp());
            let mut total: F = row.iter().copied().sum();
            if leaky {
                total += (-max).exp();
            }
            row.iter_mut().for_each(|v| *v = *v / total);
        }
        let value = Tensor::from_vec(src.shape(), out).expect("same shape");
        self.push(value, Op::Softmax { x, n }, &[x])
    }

    pub fn log_softmax(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let n = *src.shape().last().expect("rank >= 1");
        let mut out = src.data().to_vec();
        for row in out.chunks_mut(n) {
            let max = row.iter().copied().fold(F::neg_infinity(), F::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<F>().ln() + max;
            row.iter_mut().for_each(|v| *v -= lse);
        }
        let value = Tensor::from_vec(src.shape(), out).expect("same shape");
        self.push(value, Op::LogSoftmax { x, n }, &[x])
    }

    /// Child-to-parent votes. `u: [H, d]`; `w: [N, d, d]` (shared across
    /// children) or `[H, N, d, d]` (one matrix per child-parent pair).
    /// Output `[H, N, d]` with `out[i, j] = W_(i,)j · u_i`.
    pub fn votes(&mut self, u: Var, w: Var) -> Result<Var> {
        let (su, sw) = (self.shape(u).to_vec(), self.shape(w).to_vec());
        let (h, d) = match su.as_slice() {
            [h, d] => (*h, *d),
            _ => return Err(Error::shape("votes", format!("children {su:?} are not [H, d]"))),
        };
        let (parents, shared) = match sw.as_slice() {
            [n, d1, d2] if *d1 == d && *d2 == d => (*n, true),
            [h2, n, d1, d2] if *h2 == h && *d1 == d && *d2 == d => (*n, false),
            _ => {
                return Err(Error::shape(
                    "votes",
                    format!("transform {sw:?} incompatible with children {su:?}"),
                ))
            }
        };
        let (ud, wd) = (self.data(u), self.data(w));
        let mut out = vec![F::zero(); h * parents * d];
        for i in 0..h {
            let ui = &ud[i * d..(i + 1) * d];
            for j in 0..parents {
                let mat = if shared { j } else { i * parents + j };
                let wm = &wd[mat * d * d..(mat + 1) * d * d];
                let dst = &mut out[(i * parents + j) * d..(i * parents + j + 1) * d];
                for (p, o) in dst.iter_mut().enumerate() {
                    *o = wm[p * d..(p + 1) * d].iter().zip(ui).map(|(&a, &b)| a * b).sum();
                }
            }
        }
        let value = Tensor::from_vec(&[h, parents, d], out)?;
        Ok(self.push(value, Op::Votes { u, w, h, parents, d, shared }, &[u, w]))
    }

    /// `s[j] = Σ_i c[i, j] · u[i, j]` for `c: [H, N]`, `u: [H, N, d]`.
    pub fn weighted_sum(&mut self, c: Var, u: Var) -> Result<Var> {
        let (sc, su) = (self.shape(c).to_vec(), self.shape(u).to_vec());
        let (h, parents, d) = match (sc.as_slice(), su.as_slice()) {
            ([h, n], [h2, n2, d]) if h == h2 && n == n2 => (*h, *n, *d),
            _ => return Err(Error::shape("weighted_sum", format!("coefficients {sc:?}, votes {su:?}"))),
        };
        let (cd, ud) = (self.data(c), self.data(u));
        let mut out = vec![F::zero(); parents * d];
        for i in 0..h {
            for j in 0..parents {
                let cij = cd[i * parents + j];
                let src = &ud[(i * parents + j) * d..(i * parents + j + 1) * d];
                for (o, &v) in out[j * d..(j + 1) * d].iter_mut().zip(src) {
                    *o += cij * v;
                }
            }
        }
        let value = Tensor::from_vec(&[parents, d], out)?;
        Ok(self.push(value, Op::WeightedSum { c, u, h, parents, d }, &[c, u]))
    }

    /// `out[i, j] = u[i, j] · v[j]` for `u: [H, N, d]`, `v: [N, d]`.
    pub fn agreement(&mut self, u: Var, v: Var) -> Result<Var> {
        let (su, sv) = (self.shape(u).to_vec(), self.shape(v).to_vec());
        let (h, parents, d) = match (su.as_slice(), sv.as_slice()) {
            ([h, n, d], [n2, d2]) if n == n2 && d == d2 => (*h, *n, *d),
            _ => return Err(Error::shape("agreement", format!("votes {su:?}, parents {sv:?}"))),
        };
        let (ud, vd) = (self.data(u), self.data(v));
        let mut out = vec![F::zero(); h * parents];
        for i in 0..h {
            for j in 0..parents {
                let a = &ud[(i * parents + j) * d..(i * parents + j + 1) * d];
                out[i * parents + j] = a.iter().zip(&vd[j * d..(j + 1) * d]).map(|(&x, &y)| x * y).sum();
            }
        }
        let value = Tensor::from_vec(&[h, parents], out)?;
        Ok(self.push(value, Op::Agreement { u, v, h, parents, d }, &[u, v]))
    }

    /// Broadcasts a one-element tensor to `shape`.
    pub fn expand(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        if self.value(x).len() != 1 {
            return Err(Error::shape("expand", format!("{:?} is not a scalar", self.shape(x))));
        }
        check_shape(shape)?;
        let n = shape.iter().product();
        let value = Tensor::from_vec(shape, vec![self.data(x)[0]; n])?;
        Ok(self.push(value, Op::Expand(x), &[x]))
    }

    /// Gradients of a scalar `loss` with respect to every registered parameter.
    pub fn backward(&self, loss: Var) -> Result<GradientMap<F>> {
        if self.value(loss).len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Vec<F>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![F::one()]);

        for idx in (0..=loss.0).rev() {
            let node = &self.nodes[idx];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[idx].take() else { continue };
            if matches!(node.op, Op::Leaf) {
                grads[idx] = Some(gy);
                continue;
            }
            self.propagate(idx, &gy, &mut grads);
        }

        let mut out: BTreeMap<ParamId, Tensor<F>> = BTreeMap::new();
        for (idx, node) in self.nodes.iter().enumerate() {
            let Some(id) = node.param else { continue };
            let g = match grads[idx].take() {
                Some(g) => Tensor::from_vec(node.value.shape(), g)?,
                None => Tensor::zeros(node.value.shape())?,
            };
            match out.get_mut(&id) {
                Some(existing) => {
                    if existing.shape() != g.shape() {
                        return Err(Error::Contract(format!("parameter {id:?} registered with two shapes")));
                    }
                    existing.data_mut().iter_mut().zip(g.data()).for_each(|(a, &b)| *a += b);
                }
                None => {
                    out.insert(id, g);
                }
            }
        }
        Ok(GradientMap { grads: out })
    }

    fn propagate(&self, idx: usize, gy: &[F], grads: &mut [Option<Vec<F>>]) {
        let node = &self.nodes[idx];
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [F])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![F::zero(); self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul { a, b, m, k, n } => {
                let (ad, bd) = (self.data(a), self.data(b));
                acc(a, &mut |ga| {
                    for i in 0..m {
                        for p in 0..k {
                            ga[i * k + p] += (0..n).map(|j| gy[i * n + j] * bd[p * n + j]).sum::<F>();
                        }
                    }
                });
                acc(b, &mut |gb| {
                    for i in 0..m {
                        for p in 0..k {
                            let av = ad[i * k + p];
                            for j in 0..n {
                                gb[p * n + j] += av * gy[i * n + j];
                            }
                        }
                    }
                });
            }
            &Op::Conv1d { x, w, cin, k, cout } => {
                let (xd, wd) = (self.data(x), self.data(w));
                let out_len = gy.len() / cout;
                acc(x, &mut |gx| {
                    for t in 0..out_len {
                        let g = &gy[t * cout..(t + 1) * cout];
                        for s in 0..k {
                            for c in 0..cin {
                                let wrow = &wd[(s * cin + c) * cout..(s * cin + c + 1) * cout];
                                gx[(t + s) * cin + c] += g.iter().zip(wrow).map(|(&a, &b)| a * b).sum::<F>();
                            }
                        }
                    }
                });
                acc(w, &mut |gw| {
                    for t in 0..out_len {
                        let g = &gy[t * cout..(t + 1) * cout];
                        for s in 0..k {
                            for c in 0..cin {
                                let xv = xd[(t + s) * cin + c];
                                let dst = &mut gw[(s * cin + c) * cout..(s * cin + c + 1) * cout];
                                for (o, &gv) in dst.iter_mut().zip(g) {
                                    *o += xv * gv;
                                }
                            }
                        }
                    }
                });
            }
            &Op::Relu(x) => {
                let yd = node.value.data();
                acc(x, &mut |gx| {
                    for ((o, &g), &y) in gx.iter_mut().zip(gy).zip(yd) {
                        if y > F::zero() {
                            *o += g;
                        }
                    }
                });
            }
            &Op::Add { a, b } => {
                acc(a, &mut |ga| ga.iter_mut().zip(gy).for_each(|(o, &g)| *o += g));
                acc(b, &mut |gb| {
                    let nb = gb.len();
                    for (i, &g) in gy.iter().enumerate() {
                        gb[i % nb] += g;
                    }
                });
            }
            &Op::Mul { a, b } => {
                let (ad, bd) = (self.data(a), self.data(b));
                let block = ad.len() / bd.len();
                acc(a, &mut |ga| {
                    for (i, (o, &g)) in ga.iter_mut().zip(gy).enumerate() {
                        *o += g * bd[i / block];
                    }
                });
                acc(b, &mut |gb| {
                    for (i, (&g, &av)) in gy.iter().zip(ad).enumerate() {
                        gb[i / block] += g * av;
                    }
                });
            }
            &Op::Scale { x, c } => {
                acc(x, &mut |gx| gx.iter_mut().zip(gy).for_each(|(o, &g)| *o += g * c));
            }
            &Op::AddScalar(x) | &Op::Reshape(x) => {
                acc(x, &mut |gx| gx.iter_mut().zip(gy).for_each(|(o, &g)| *o += g));
            }
            &Op::L2Norm { x, outer, n, inner } => {
                let (xd, yd) = (self.data(x), node.value.data());
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let y = yd[o * inner + i];
                            if y == F::zero() {
                                continue;
                            }
                            let s = gy[o * inner + i] / y;
                            for j in 0..n {
                                let at = (o * n + j) * inner + i;
                                gx[at] += s * xd[at];
                            }
                        }
                    }
                });
            }
            Op::Concat { inputs, outer, chunks } => {
                let total: usize = chunks.iter().sum();
                let mut offset = 0;
                for (&v, &chunk) in inputs.iter().zip(chunks) {
                    acc(v, &mut |gv| {
                        for o in 0..*outer {
                            let src = &gy[o * total + offset..o * total + offset + chunk];
                            gv[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(d, &g)| *d += g);
                        }
                    });
                    offset += chunk;
                }
            }
            &Op::Mean { x, outer, n, inner } => {
                let scale = F::lit(1.0 / n as f64);
                acc(x, &mut |gx| {
                    for o in 0..outer {
                        for j in 0..n {
                            for i in 0..inner {
                                gx[(o * n + j) * inner + i] += gy[o * inner + i] * scale;
                            }
                        }
                    }
                });
            }
            &Op::Sum(x) | &Op::Expand(x) => {
                if matches!(node.op, Op::Sum(_)) {
                    acc(x, &mut |gx| gx.iter_mut().for_each(|o| *o += gy[0]));
                } else {
                    let total: F = gy.iter().copied().sum();
                    acc(x, &mut |gx| gx[0] += total);
                }
            }
            Op::Gather { table, indices, width } => {
                acc(*table, &mut |gt| {
                    for (r, &i) in indices.iter().enumerate() {
                        gt[i * width..(i + 1) * width]
                            .iter_mut()
                            .zip(&gy[r * width..(r + 1) * width])
                            .for_each(|(o, &g)| *o += g);
                    }
                });
            }
            &Op::SliceRows { x, start, len } => {
                acc(x, &mut |gx| {
                    gx[start..start + len].iter_mut().zip(gy).for_each(|(o, &g)| *o += g);
                });
            }
            &Op::Squash { x, kind, d } => {
                let xd = self.data(x);
                acc(x, &mut |gx| {
                    for ((gv, sv), gout) in gx.chunks_mut(d).zip(xd.chunks(d)).zip(gy.chunks(d)) {
                        let n = sv.iter().map(|&v| v * v).sum::<F>().sqrt();
                        let n64 = n.as_f64();
                        let (h, slope) = kind.scale_and_slope(n64);
                        let h = F::lit(h);
                        if n == F::zero() {
                            gv.iter_mut().zip(gout).for_each(|(o, &g)| *o += h * g);
                            continue;
                        }
                        let coef = F::lit(slope / n64);
                        let dot: F = sv.iter().zip(gout).map(|(&a, &b)| a * b).sum();
                        for ((o, &g), &s) in gv.iter_mut().zip(gout).zip(sv) {
                            *o += h * g + coef * dot * s;
                        }
                    }
                });
            }
            &Op::Softmax { x, n } => {
                let yd = node.value.data();
                acc(x, &mut |gx| {
                    for ((gv, y), g) in gx.chunks_mut(n).zip(yd.chunks(n)).zip(gy.chunks(n)) {
                        let dot: F = y.iter().zip(g).map(|(&a, &b)| a * b).sum();
                        for ((o, &yy), &gg) in gv.iter_mut().zip(y).zip(g) {
                            *o += yy * (gg - dot);
                        }
                    }
                });
            }
            &Op::LogSoftmax { x, n } => {
                let yd = node.value.data();
                acc(x, &mut |gx| {
                    for ((gv, y), g) in gx.chunks_mut(n).zip(yd.chunks(n)).zip(gy.chunks(n)) {
                        let total: F = g.iter().copied().sum();
                        for ((o, &yy), &gg) in gv.iter_mut().zip(y).zip(g) {
                            *o += gg - yy.exp() * total;
                        }
                    }
                });
            }
            &Op::Votes { u, w, h, parents, d, shared } => {
                let (ud, wd) = (self.data(u), self.data(w));
                let mat = |i: usize, j: usize| if shared { j } else { i * parents + j };
                acc(u, &mut |gu| {
                    for i in 0..h {
                        for j in 0..parents {
                            let wm = &wd[mat(i, j) * d * d..(mat(i, j) + 1) * d * d];
                            let g = &gy[(i * parents + j) * d..(i * parents + j + 1) * d];
                            for (p, &gp) in g.iter().enumerate() {
                                for q in 0..d {
                                    gu[i * d + q] += gp * wm[p * d + q];
                                }
                            }
                        }
                    }
                });
                acc(w, &mut |gw| {
                    for i in 0..h {
                        let ui = &ud[i * d..(i + 1) * d];
                        for j in 0..parents {
                            let m = mat(i, j);
                            let g = &gy[(i * parents + j) * d..(i * parents + j + 1) * d];
                            for (p, &gp) in g.iter().enumerate() {
                                let row = &mut gw[m * d * d + p * d..m * d * d + (p + 1) * d];
                                for (o, &uq) in row.iter_mut().zip(ui) {
                                    *o += gp * uq;
                                }
                            }
                        }
                    }
                });
            }
            &Op::WeightedSum { c, u, h, parents, d } => {
                let (cd, ud) = (self.data(c), self.data(u));
                acc(c, &mut |gc| {
                    for i in 0..h {
                        for j in 0..parents {
                            let src = &ud[(i * parents + j) * d..(i * parents + j + 1) * d];
                            gc[i * parents + j] +=
                                src.iter().zip(&gy[j * d..(j + 1) * d]).map(|(&a, &b)| a * b).sum::<F>();
                        }
                    }
                });
                acc(u, &mut |gu| {
                    for i in 0..h {
                        for j in 0..parents {
                            let cij = cd[i * parents + j];
                            let dst = &mut gu[(i * parents + j) * d..(i * parents + j + 1) * d];
                            for (o, &g) in dst.iter_mut().zip(&gy[j * d..(j + 1) * d]) {
                                *o += cij * g;
                            }
                        }
                    }
                });
            }
            &Op::Agreement { u, v, h, parents, d } => {
                let (ud, vd) = (self.data(u), self.data(v));
                acc(u, &mut |gu| {
                    for i in 0..h {
                        for j in 0..parents {
                            let g = gy[i * parents + j];
                            let dst = &mut gu[(i * parents + j) * d..(i * parents + j + 1) * d];
                            for (o, &vv) in dst.iter_mut().zip(&vd[j * d..(j + 1) * d]) {
                                *o += g * vv;
                            }
                        }
                    }
                });
                acc(v, &mut |gv| {
                    for i in 0..h {
                        for j in 0..parents {
                            let g = gy[i * parents + j];
                            let src = &ud[(i * parents + j) * d..(i * parents + j + 1) * d];
                            for (o, &uu) in gv[j * d..(j + 1) * d].iter_mut().zip(src) {
                                *o += g * uu;
                            }
                        }
                    }
                });
            }
        }
    }
}
