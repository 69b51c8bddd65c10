use std::borrow::Cow;
use std::collections::HashMap;

use super::kernels::{self, gemm, transpose};
use super::{domain_err, shape_err, Real, Result, Tensor, TensorError, LOG_FLOOR};

/// Handle to a value recorded on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<F> {
    Leaf,
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    /// `a[m,k] * b[n,k]^T`
    MatMulNt { a: Var, b: Var, m: usize, k: usize, n: usize },
    Add { a: Var, b: Var },
    Sub { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: F },
    AddRow { a: Var, b: Var },
    Gelu { a: Var },
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Vec<F>, rstd: Vec<F> },
    Softmax { a: Var, tau: F },
    Embedding { table: Var, ids: Vec<u32> },
    Rope { a: Var, cos: Vec<F>, sin: Vec<F>, half: usize },
    SliceCols { a: Var, start: usize, cols: usize },
    ConcatCols { parts: Vec<(Var, usize)> },
    SliceRows { a: Var, offset: usize },
    ConcatRows { parts: Vec<Var> },
    Reshape { a: Var },
    Sum { a: Var },
    Mean { a: Var },
    CrossEntropy { logits: Var, targets: Vec<u32>, active: Vec<bool>, probs: Vec<F>, count: usize },
    Kl { p: Var, q: Var, active: Vec<bool>, count: usize },
}

struct Node<'a, F: Real> {
    value: Cow<'a, [F]>,
    shape: Vec<usize>,
    op: Op<F>,
    requires_grad: bool,
}

/// Records primitive applications in order; `backward` replays them in
/// exact reverse order.
///
/// A graph may borrow parameter storage for its lifetime `'a`, so forward
/// passes never copy weights. Graphs are single-threaded.
pub struct Graph<'a, F: Real> {
    nodes: Vec<Node<'a, F>>,
    grad_enabled: bool,
    params: HashMap<usize, Var>,
    leaf_grads: HashMap<usize, Vec<F>>,
    matmul_forward: u64,
    matmul_backward: u64,
}

impl<F: Real> Default for Graph<'_, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, F: Real> Graph<'a, F> {
    /// A recording graph: leaves created with `requires_grad` receive gradients.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            params: HashMap::new(),
            leaf_grads: HashMap::new(),
            matmul_forward: 0,
            matmul_backward: 0,
        }
    }

    /// An inference graph: nothing requires gradients and no backward state is kept.
    pub fn no_grad() -> Self {
        Self {
            grad_enabled: false,
            ..Self::new()
        }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Sum of `m*k*n` over all forward matmuls.
    pub fn matmul_volume(&self) -> u64 {
        self.matmul_forward
    }

    /// Sum of `m*k*n` over matmuls executed by `backward`.
    pub fn backward_matmul_volume(&self) -> u64 {
        self.matmul_backward
    }

    fn node(&self, v: Var) -> &Node<'a, F> {
        &self.nodes[v.0]
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        let n = self.node(v);
        Tensor {
            shape: n.shape.clone(),
            data: n.value.to_vec(),
        }
    }

    pub fn scalar(&self, v: Var) -> F {
        self.nodes[v.0].value[0]
    }

    fn push(
        &mut self,
        op_name: &'static str,
        value: Vec<F>,
        shape: Vec<usize>,
        op: Op<F>,
        requires_grad: bool,
    ) -> Result<Var> {
        if !value.iter().all(|x| x.is_finite()) {
            return Err(TensorError::NonFinite { op: op_name });
        }
        self.nodes.push(Node {
            value: Cow::Owned(value),
            shape,
            op,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        self.grad_enabled && vars.iter().any(|&v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, t: Tensor<F>, requires_grad: bool) -> Result<Var> {
        let Tensor { shape, data } = t;
        self.push("leaf", data, shape, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, t: Tensor<F>) -> Result<Var> {
        self.leaf(t, false)
    }

    /// A leaf whose storage is borrowed for the graph's lifetime.
    pub fn borrowed(&mut self, t: &'a Tensor<F>, requires_grad: bool) -> Result<Var> {
        if !t.all_finite() {
            return Err(TensorError::NonFinite { op: "leaf" });
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(&t.data),
            shape: t.shape.clone(),
            op: Op::Leaf,
            requires_grad: requires_grad && self.grad_enabled,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant leaf viewing borrowed row-major storage.
    pub fn borrowed_slice(&mut self, shape: Vec<usize>, data: &'a [F]) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != data.len() || shape.contains(&0) {
            return shape_err("leaf", format!("shape {shape:?} over {} values", data.len()));
        }
        self.nodes.push(Node {
            value: Cow::Borrowed(data),
            shape,
            op: Op::Leaf,
            requires_grad: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Registers a parameter under `key`, once per graph; repeated use returns
    /// the same leaf so gradients from every use accumulate together.
    pub fn param(&mut self, key: usize, t: &'a Tensor<F>) -> Result<Var> {
        if let Some(&v) = self.params.get(&key) {
            return Ok(v);
        }
        let v = self.borrowed(t, true)?;
        self.params.insert(key, v);
        Ok(v)
    }

    /// Accumulated gradient of a leaf.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.leaf_grads.get(&v.0).map(|g| g.as_slice())
    }

    pub fn param_grad(&self, key: usize) -> Option<&[F]> {
        self.params.get(&key).and_then(|&v| self.grad(v))
    }

    /// Keys of parameters registered on this graph.
    pub fn param_keys(&self) -> impl Iterator<Item = usize> + '_ {
        self.params.keys().copied()
    }

    pub fn zero_grad(&mut self) {
        self.leaf_grads.clear();
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize)> {
        match self.shape(v) {
            [r, c] => Ok((*r, *c)),
            s => shape_err(op, format!("expected a matrix, got {s:?}")),
        }
    }

    // ---- primitives -------------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return shape_err("matmul", format!("[{m},{k}] x [{k2},{n}]"));
        }
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, self.value(a), self.value(b), &mut out);
        self.matmul_forward += (m * k * n) as u64;
        let rg = self.rg(&[a, b]);
        self.push("matmul", out, vec![m, n], Op::MatMul { a, b, m, k, n }, rg)
    }

    /// `a * b^T` for `a[m,k]`, `b[n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2("matmul_nt", a)?;
        let (n, k2) = self.dims2("matmul_nt", b)?;
        if k != k2 {
            return shape_err("matmul_nt", format!("[{m},{k}] x [{n},{k2}]^T"));
        }
        let bt = transpose(self.value(b), n, k);
        let mut out = vec![F::zero(); m * n];
        gemm(m, k, n, self.value(a), &bt, &mut out);
        self.matmul_forward += (m * k * n) as u64;
        let rg = self.rg(&[a, b]);
        self.push("matmul_nt", out, vec![m, n], Op::MatMulNt { a, b, m, k, n }, rg)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return shape_err(op, format!("{:?} vs {:?}", self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let rg = self.rg(&[a, b]);
        self.push("add", out, self.shape(a).to_vec(), Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let rg = self.rg(&[a, b]);
        self.push("sub", out, self.shape(a).to_vec(), Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let rg = self.rg(&[a, b]);
        self.push("mul", out, self.shape(a).to_vec(), Op::Mul { a, b }, rg)
    }

    pub fn scale(&mut self, a: Var, c: F) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let rg = self.rg(&[a]);
        self.push("scale", out, self.shape(a).to_vec(), Op::Scale { a, c }, rg)
    }

    /// Adds a vector to every row (trailing dimension) of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let cols = *self.shape(a).last().unwrap_or(&1);
        if self.value(b).len() != cols {
            return shape_err("add_row", format!("{:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let bv = self.value(b);
        let out = self
            .value(a)
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(bv).map(|(&x, &y)| x + y))
            .collect();
        let rg = self.rg(&[a, b]);
        self.push("add_row", out, self.shape(a).to_vec(), Op::AddRow { a, b }, rg)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).iter().map(|&x| kernels::gelu(x)).collect();
        let rg = self.rg(&[a]);
        self.push("gelu", out, self.shape(a).to_vec(), Op::Gelu { a }, rg)
    }

    /// Layer normalization over the trailing dimension.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let n = *self.shape(x).last().unwrap_or(&1);
        if self.value(gain).len() != n || self.value(bias).len() != n {
            return shape_err("layer_norm", format!("features {n}, gain/bias mismatch"));
        }
        let rows = self.value(x).len() / n;
        let mut out = vec![F::zero(); rows * n];
        let mut xhat = vec![F::zero(); rows * n];
        let mut rstd = vec![F::zero(); rows];
        let inv_n = F::one() / F::of(n as f64);
        let eps = F::of(eps);
        {
            let (xv, g, b) = (self.value(x), self.value(gain), self.value(bias));
            for r in 0..rows {
                let row = &xv[r * n..(r + 1) * n];
                let mut mean = F::zero();
                for &v in row {
                    mean += v;
                }
                mean = mean * inv_n;
                let mut var = F::zero();
                for &v in row {
                    var += (v - mean) * (v - mean);
                }
                var = var * inv_n;
                let rs = F::one() / (var + eps).sqrt();
                rstd[r] = rs;
                for j in 0..n {
                    let h = (row[j] - mean) * rs;
                    xhat[r * n + j] = h;
                    out[r * n + j] = h * g[j] + b[j];
                }
            }
        }
        let rg = self.rg(&[x, gain, bias]);
        let (xhat, rstd) = if rg { (xhat, rstd) } else { (Vec::new(), Vec::new()) };
        self.push(
            "layer_norm",
            out,
            self.shape(x).to_vec(),
            Op::LayerNorm { x, gain, bias, xhat, rstd },
            rg,
        )
    }

    /// Row-wise softmax of `a / tau` over the trailing dimension.
    pub fn softmax_rows(&mut self, a: Var, tau: F) -> Result<Var> {
        self.softmax_impl("softmax_rows", a, tau, None)
    }

    /// Row-wise softmax where entries with `visible == false` receive zero
    /// probability. Every row needs at least one visible entry.
    pub fn masked_softmax(&mut self, a: Var, tau: F, visible: &[bool]) -> Result<Var> {
        if visible.len() != self.value(a).len() {
            return shape_err("masked_softmax", "mask length differs from input");
        }
        self.softmax_impl("masked_softmax", a, tau, Some(visible))
    }

    fn softmax_impl(&mut self, op: &'static str, a: Var, tau: F, visible: Option<&[bool]>) -> Result<Var> {
        if !(tau > F::zero()) {
            return domain_err(op, format!("temperature must be positive, got {tau}"));
        }
        let cols = *self.shape(a).last().unwrap_or(&1);
        let xv = self.value(a);
        let mut out = vec![F::zero(); xv.len()];
        for (r, (row, o)) in xv.chunks_exact(cols).zip(out.chunks_exact_mut(cols)).enumerate() {
            let vis = visible.map(|m| &m[r * cols..(r + 1) * cols]);
            if vis.is_some_and(|m| !m.iter().any(|&b| b)) {
                return domain_err(op, format!("row {r} has no visible entries"));
            }
            kernels::softmax_row(row, tau, vis, o);
        }
        let rg = self.rg(&[a]);
        self.push(op, out, self.shape(a).to_vec(), Op::Softmax { a, tau }, rg)
    }

    /// Gathers rows of `table[V, d]`.
    pub fn embedding(&mut self, table: Var, ids: &[u32]) -> Result<Var> {
        let (v, d) = self.dims2("embedding", table)?;
        if ids.is_empty() {
            return shape_err("embedding", "empty id list");
        }
        let tv = self.value(table);
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            let id = id as usize;
            if id >= v {
                return domain_err("embedding", format!("id {id} out of range for vocab {v}"));
            }
            out.extend_from_slice(&tv[id * d..(id + 1) * d]);
        }
        let rg = self.rg(&[table]);
        self.push(
            "embedding",
            out,
            vec![ids.len(), d],
            Op::Embedding { table, ids: ids.to_vec() },
            rg,
        )
    }

    /// Rotates feature pairs `(2i, 2i+1)` of every head by `pos * base^(-2i/d_head)`.
    ///
    /// `a` is `[T, heads * d_head]` or `[T, heads, d_head]`.
    pub fn rope(&mut self, a: Var, heads: usize, positions: &[usize], base: f64) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let t = shape[0];
        let width: usize = shape[1..].iter().product();
        if positions.len() != t {
            return shape_err("rope", format!("{} positions for {t} rows", positions.len()));
        }
        if heads == 0 || width % heads != 0 {
            return shape_err("rope", format!("width {width} not divisible by {heads} heads"));
        }
        let dh = width / heads;
        if dh % 2 != 0 {
            return shape_err("rope", format!("head dimension {dh} must be even"));
        }
        if !(base > 0.0) {
            return domain_err("rope", format!("base must be positive, got {base}"));
        }
        let half = dh / 2;
        let mut cos = Vec::with_capacity(t * half);
        let mut sin = Vec::with_capacity(t * half);
        for &p in positions {
            for i in 0..half {
                let theta = base.powf(-2.0 * i as f64 / dh as f64);
                let ang = p as f64 * theta;
                cos.push(F::of(ang.cos()));
                sin.push(F::of(ang.sin()));
            }
        }
        let xv = self.value(a);
        let mut out = vec![F::zero(); xv.len()];
        for r in 0..t {
            for h in 0..heads {
                let base_ix = r * width + h * dh;
                for i in 0..half {
                    let (c, s) = (cos[r * half + i], sin[r * half + i]);
                    let x0 = xv[base_ix + 2 * i];
                    let x1 = xv[base_ix + 2 * i + 1];
                    out[base_ix + 2 * i] = x0 * c - x1 * s;
                    out[base_ix + 2 * i + 1] = x0 * s + x1 * c;
                }
            }
        }
        let rg = self.rg(&[a]);
        self.push("rope", out, shape, Op::Rope { a, cos, sin, half }, rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims2("slice_cols", a)?;
        if len == 0 || start + len > c {
            return shape_err("slice_cols", format!("[{start}, {}) of {c} columns", start + len));
        }
        let xv = self.value(a);
        let mut out = Vec::with_capacity(r * len);
        for row in xv.chunks_exact(c) {
            out.extend_from_slice(&row[start..start + len]);
        }
        let rg = self.rg(&[a]);
        self.push("slice_cols", out, vec![r, len], Op::SliceCols { a, start, cols: c }, rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat_cols", "no inputs");
        }
        let (r, _) = self.dims2("concat_cols", parts[0])?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.dims2("concat_cols", p)?;
            if pr != r {
                return shape_err("concat_cols", format!("row counts {r} vs {pr}"));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p)[i * w..(i + 1) * w]);
            }
        }
        let rg = self.rg(parts);
        let parts = parts.iter().copied().zip(widths).collect();
        self.push("concat_cols", out, vec![r, total], Op::ConcatCols { parts }, rg)
    }

    /// Rows `[start, start + len)` along the leading dimension.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(a).to_vec();
        let Some(&rows) = shape.first() else {
            return shape_err("slice_rows", "scalar input");
        };
        if len == 0 || start + len > rows {
            return shape_err("slice_rows", format!("[{start}, {}) of {rows} rows", start + len));
        }
        let w: usize = shape[1..].iter().product();
        let out = self.value(a)[start * w..(start + len) * w].to_vec();
        let mut new_shape = shape;
        new_shape[0] = len;
        let rg = self.rg(&[a]);
        self.push("slice_rows", out, new_shape, Op::SliceRows { a, offset: start * w }, rg)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return shape_err("concat_rows", "no inputs");
        }
        let tail = self.shape(parts[0])[1..].to_vec();
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.len() != tail.len() + 1 || s[1..] != tail[..] {
                return shape_err("concat_rows", format!("{s:?} vs trailing {tail:?}"));
            }
            rows += s[0];
            out.extend_from_slice(self.value(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(parts);
        self.push("concat_rows", out, shape, Op::ConcatRows { parts: parts.to_vec() }, rg)
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let n: usize = shape.iter().product();
        if n != self.value(a).len() || shape.contains(&0) {
            return shape_err("reshape", format!("{:?} -> {shape:?}", self.shape(a)));
        }
        let out = self.value(a).to_vec();
        let rg = self.rg(&[a]);
        self.push("reshape", out, shape, Op::Reshape { a }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let mut s = F::zero();
        for &x in self.value(a) {
            s += x;
        }
        let rg = self.rg(&[a]);
        self.push("sum", vec![s], Vec::new(), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let mut s = F::zero();
        for &x in self.value(a) {
            s += x;
        }
        let n = F::of(self.value(a).len() as f64);
        let rg = self.rg(&[a]);
        self.push("mean", vec![s / n], Vec::new(), Op::Mean { a }, rg)
    }

    /// Mean over active rows of `-log softmax(logits)[target]`.
    pub fn cross_entropy_masked(&mut self, logits: Var, targets: &[u32], mask: &[bool]) -> Result<Var> {
        let (t, v) = self.dims2("cross_entropy_masked", logits)?;
        if targets.len() != t || mask.len() != t {
            return shape_err(
                "cross_entropy_masked",
                format!("{t} rows, {} targets, {} mask entries", targets.len(), mask.len()),
            );
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return domain_err("cross_entropy_masked", "mask selects no positions");
        }
        let rg = self.rg(&[logits]);
        let lv = self.value(logits);
        let mut logp = vec![F::zero(); v];
        let mut probs = if rg { vec![F::zero(); t * v] } else { Vec::new() };
        let mut total = F::zero();
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let tgt = targets[i] as usize;
            if tgt >= v {
                return domain_err("cross_entropy_masked", format!("target {tgt} out of range for {v} classes"));
            }
            kernels::log_softmax_row(&lv[i * v..(i + 1) * v], &mut logp);
            total += -logp[tgt];
            if rg {
                for (p, &lp) in probs[i * v..(i + 1) * v].iter_mut().zip(&logp) {
                    *p = lp.exp();
                }
            }
        }
        let loss = total / F::of(count as f64);
        self.push(
            "cross_entropy_masked",
            vec![loss],
            Vec::new(),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                active: mask.to_vec(),
                probs,
                count,
            },
            rg,
        )
    }

    /// Mean over active rows of `sum_j p log(p / q)`, with `0 log 0 = 0` and a
    /// `1e-9` floor inside both logarithms.
    pub fn kl_rows(&mut self, p: Var, q: Var, mask: &[bool]) -> Result<Var> {
        let (t, v) = self.dims2("kl_rows", p)?;
        if self.shape(q) != [t, v] {
            return shape_err("kl_rows", format!("{:?} vs {:?}", self.shape(p), self.shape(q)));
        }
        if mask.len() != t {
            return shape_err("kl_rows", format!("{t} rows, {} mask entries", mask.len()));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return domain_err("kl_rows", "mask selects no rows");
        }
        let eps = F::of(LOG_FLOOR);
        // rounding in a length-v f32 sum grows with v
        let tol = F::of(1e-5).max(F::of(4.0 * v as f64) * F::epsilon());
        let (pv, qv) = (self.value(p), self.value(q));
        let mut total = F::zero();
        for i in 0..t {
            if !mask[i] {
                continue;
            }
            let (pr, qr) = (&pv[i * v..(i + 1) * v], &qv[i * v..(i + 1) * v]);
            for (name, row) in [("p", pr), ("q", qr)] {
                let mut s = F::zero();
                for &x in row {
                    if x < F::zero() {
                        return domain_err("kl_rows", format!("{name} row {i} has a negative entry"));
                    }
                    s += x;
                }
                if (s - F::one()).abs() > tol {
                    return domain_err("kl_rows", format!("{name} row {i} sums to {s}"));
                }
            }
            for (&a, &b) in pr.iter().zip(qr) {
                if a > F::zero() {
                    total += a * (a.max(eps).ln() - b.max(eps).ln());
                }
            }
        }
        let loss = total / F::of(count as f64);
        let rg = self.rg(&[p, q]);
        self.push(
            "kl_rows",
            vec![loss],
            Vec::new(),
            Op::Kl { p, q, active: mask.to_vec(), count },
            rg,
        )
    }

    // ---- reverse pass -----------------------------------------------------

    /// Accumulates `d loss / d leaf` into every leaf that requires gradients.
    /// Calling it twice without [`Graph::zero_grad`] adds the gradients again.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(TensorError::NotScalar(self.shape(loss).to_vec()));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<F>>> = Vec::new();
        adj.resize_with(loss.0 + 1, || None);
        adj[loss.0] = Some(vec![F::one()]);
        for id in (0..=loss.0).rev() {
            let Some(g) = adj[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            self.backprop_node(id, g, &mut adj);
        }
        Ok(())
    }

    fn backprop_node(&mut self, id: usize, g: Vec<F>, adj: &mut [Option<Vec<F>>]) {
        let nodes = &self.nodes;
        let rg = |v: Var| nodes[v.0].requires_grad;
        let val = |v: Var| -> &[F] { &nodes[v.0].value };
        let mut bwd_volume = 0u64;
        match &nodes[id].op {
            Op::Leaf => {
                match self.leaf_grads.get_mut(&id) {
                    Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
                    None => {
                        self.leaf_grads.insert(id, g);
                    }
                }
                return;
            }
            &Op::MatMul { a, b, m, k, n } => {
                if rg(a) {
                    let bt = transpose(val(b), k, n);
                    let mut da = vec![F::zero(); m * k];
                    gemm(m, n, k, &g, &bt, &mut da);
                    bwd_volume += (m * n * k) as u64;
                    accumulate(adj, a, da);
                }
                if rg(b) {
                    let at = transpose(val(a), m, k);
                    let mut db = vec![F::zero(); k * n];
                    gemm(k, m, n, &at, &g, &mut db);
                    bwd_volume += (m * n * k) as u64;
                    accumulate(adj, b, db);
                }
            }
            &Op::MatMulNt { a, b, m, k, n } => {
                if rg(a) {
                    let mut da = vec![F::zero(); m * k];
                    gemm(m, n, k, &g, val(b), &mut da);
                    bwd_volume += (m * n * k) as u64;
                    accumulate(adj, a, da);
                }
                if rg(b) {
                    let gt = transpose(&g, m, n);
                    let mut db = vec![F::zero(); n * k];
                    gemm(n, m, k, &gt, val(a), &mut db);
                    bwd_volume += (m * n * k) as u64;
                    accumulate(adj, b, db);
                }
            }
            &Op::Add { a, b } => {
                if rg(a) {
                    accumulate(adj, a, g.clone());
                }
                if rg(b) {
                    accumulate(adj, b, g);
                }
            }
            &Op::Sub { a, b } => {
                if rg(a) {
                    accumulate(adj, a, g.clone());
                }
                if rg(b) {
                    accumulate(adj, b, g.iter().map(|&x| -x).collect());
                }
            }
            &Op::Mul { a, b } => {
                if rg(a) {
                    accumulate(adj, a, g.iter().zip(val(b)).map(|(&x, &y)| x * y).collect());
                }
                if rg(b) {
                    accumulate(adj, b, g.iter().zip(val(a)).map(|(&x, &y)| x * y).collect());
                }
            }
            &Op::Scale { a, c } => accumulate(adj, a, g.iter().map(|&x| x * c).collect()),
            &Op::AddRow { a, b } => {
                if rg(b) {
                    let cols = val(b).len();
                    let mut db = vec![F::zero(); cols];
                    for row in g.chunks_exact(cols) {
                        db.iter_mut().zip(row).for_each(|(d, &x)| *d += x);
                    }
                    accumulate(adj, b, db);
                }
                if rg(a) {
                    accumulate(adj, a, g);
                }
            }
            &Op::Gelu { a } => {
                let dx = g.iter().zip(val(a)).map(|(&d, &x)| d * kernels::gelu_grad(x)).collect();
                accumulate(adj, a, dx);
            }
            Op::LayerNorm { x, gain, bias, xhat, rstd } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let n = val(gain).len();
                let rows = g.len() / n;
                if rg(gain) {
                    let mut dg = vec![F::zero(); n];
                    for r in 0..rows {
                        for j in 0..n {
                            dg[j] += g[r * n + j] * xhat[r * n + j];
                        }
                    }
                    accumulate(adj, gain, dg);
                }
                if rg(bias) {
                    let mut db = vec![F::zero(); n];
                    for row in g.chunks_exact(n) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    accumulate(adj, bias, db);
                }
                if rg(x) {
                    let gv = val(gain);
                    let inv_n = F::one() / F::of(n as f64);
                    let mut dx = vec![F::zero(); rows * n];
                    for r in 0..rows {
                        let mut mean_dy = F::zero();
                        let mut mean_dyx = F::zero();
                        for j in 0..n {
                            let dyh = g[r * n + j] * gv[j];
                            mean_dy += dyh;
                            mean_dyx += dyh * xhat[r * n + j];
                        }
                        mean_dy = mean_dy * inv_n;
                        mean_dyx = mean_dyx * inv_n;
                        for j in 0..n {
                            let dyh = g[r * n + j] * gv[j];
                            dx[r * n + j] = rstd[r] * (dyh - mean_dy - xhat[r * n + j] * mean_dyx);
                        }
                    }
                    accumulate(adj, x, dx);
                }
            }
            &Op::Softmax { a, tau } => {
                let y = &nodes[id].value;
                let cols = *nodes[id].shape.last().unwrap_or(&1);
                let inv = F::one() / tau;
                let mut dx = vec![F::zero(); y.len()];
                for ((yr, gr), dr) in y.chunks_exact(cols).zip(g.chunks_exact(cols)).zip(dx.chunks_exact_mut(cols)) {
                    let mut dot = F::zero();
                    for (&yy, &gg) in yr.iter().zip(gr) {
                        dot += yy * gg;
                    }
                    for ((d, &yy), &gg) in dr.iter_mut().zip(yr).zip(gr) {
                        *d = yy * (gg - dot) * inv;
                    }
                }
                accumulate(adj, a, dx);
            }
            Op::Embedding { table, ids } => {
                let table = *table;
                let d = nodes[table.0].shape[1];
                let mut dt = vec![F::zero(); val(table).len()];
                for (r, &id) in ids.iter().enumerate() {
                    let id = id as usize;
                    dt[id * d..(id + 1) * d]
                        .iter_mut()
                        .zip(&g[r * d..(r + 1) * d])
                        .for_each(|(t, &x)| *t += x);
                }
                accumulate(adj, table, dt);
            }
            Op::Rope { a, cos, sin, half } => {
                let (a, half) = (*a, *half);
                let shape = &nodes[id].shape;
                let t = shape[0];
                let width = g.len() / t;
                let dh = 2 * half;
                let heads = width / dh;
                let mut dx = vec![F::zero(); g.len()];
                for r in 0..t {
                    for h in 0..heads {
                        let bix = r * width + h * dh;
                        for i in 0..half {
                            let (c, s) = (cos[r * half + i], sin[r * half + i]);
                            let g0 = g[bix + 2 * i];
                            let g1 = g[bix + 2 * i + 1];
                            dx[bix + 2 * i] = g0 * c + g1 * s;
                            dx[bix + 2 * i + 1] = -g0 * s + g1 * c;
                        }
                    }
                }
                accumulate(adj, a, dx);
            }
            &Op::SliceCols { a, start, cols } => {
                let len = nodes[id].shape[1];
                let rows = nodes[id].shape[0];
                let mut dx = vec![F::zero(); rows * cols];
                for r in 0..rows {
                    dx[r * cols + start..r * cols + start + len].copy_from_slice(&g[r * len..(r + 1) * len]);
                }
                accumulate(adj, a, dx);
            }
            Op::ConcatCols { parts } => {
                let rows = nodes[id].shape[0];
                let total = nodes[id].shape[1];
                let mut off = 0;
                for &(p, w) in parts {
                    if rg(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for r in 0..rows {
                            dp.extend_from_slice(&g[r * total + off..r * total + off + w]);
                        }
                        accumulate(adj, p, dp);
                    }
                    off += w;
                }
            }
            &Op::SliceRows { a, offset } => {
                let mut dx = vec![F::zero(); val(a).len()];
                dx[offset..offset + g.len()].copy_from_slice(&g);
                accumulate(adj, a, dx);
            }
            Op::ConcatRows { parts } => {
                let mut off = 0;
                for &p in parts {
                    let len = val(p).len();
                    if rg(p) {
                        accumulate(adj, p, g[off..off + len].to_vec());
                    }
                    off += len;
                }
            }
            &Op::Reshape { a } => accumulate(adj, a, g),
            &Op::Sum { a } => accumulate(adj, a, vec![g[0]; val(a).len()]),
            &Op::Mean { a } => {
                let n = val(a).len();
                accumulate(adj, a, vec![g[0] / F::of(n as f64); n]);
            }
            Op::CrossEntropy { logits, targets, active, probs, count } => {
                let logits = *logits;
                let v = nodes[logits.0].shape[1];
                let scale = g[0] / F::of(*count as f64);
                let mut dx = vec![F::zero(); probs.len()];
                for (i, &on) in active.iter().enumerate() {
                    if !on {
                        continue;
                    }
                    for j in 0..v {
                        dx[i * v + j] = probs[i * v + j] * scale;
                    }
                    dx[i * v + targets[i] as usize] = dx[i * v + targets[i] as usize] - scale;
                }
                accumulate(adj, logits, dx);
            }
            Op::Kl { p, q, active, count } => {
                let (p, q) = (*p, *q);
                let v = nodes[p.0].shape[1];
                let eps = F::of(LOG_FLOOR);
                let scale = g[0] / F::of(*count as f64);
                let (pv, qv) = (val(p), val(q));
                if rg(p) {
                    let mut dp = vec![F::zero(); pv.len()];
                    for (i, &on) in active.iter().enumerate() {
                        if !on {
                            continue;
                        }
                        for j in i * v..(i + 1) * v {
                            let (a, b) = (pv[j], qv[j]);
                            let self_term = if a > eps { a.ln() + F::one() } else { eps.ln() };
                            dp[j] = scale * (self_term - b.max(eps).ln());
                        }
                    }
                    accumulate(adj, p, dp);
                }
                if rg(q) {
                    let mut dq = vec![F::zero(); qv.len()];
                    for (i, &on) in active.iter().enumerate() {
                        if !on {
                            continue;
                        }
                        for j in i * v..(i + 1) * v {
                            if qv[j] > eps {
                                dq[j] = -scale * pv[j] / qv[j];
                            }
                        }
                    }
                    accumulate(adj, q, dq);
                }
            }
        }
        self.matmul_backward += bwd_volume;
    }
}

fn accumulate<F: Real>(adj: &mut [Option<Vec<F>>], v: Var, g: Vec<F>) {
    match &mut adj[v.0] {
        Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a += b),
        slot @ None => *slot = Some(g),
    }
}
