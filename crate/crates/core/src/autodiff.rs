//! Minimal reverse-mode automatic differentiation.
//!
//! A [`Tape`] is an arena of nodes; a [`Tensor`] is an index into it.
//! Operations push nodes eagerly (values are computed forward as the graph
//! is built), and creation order is the topological order, so the backward
//! pass is a single reverse sweep that visits each node exactly once.
//! Training builds a fresh tape per step; inference can disable gradient
//! recording with [`Tape::no_grad`].
//!
//! The op set is deliberately small: everything the model and losses need
//! composes out of elementwise arithmetic, two matmul flavors, row
//! broadcasts, gather, softmax/log-sum-exp, layer norm, and weighted sums.

/// Handle to a node on a [`Tape`]. Cheap to copy; only meaningful with the
/// tape that created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Tensor(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    /// `[m×k] · [k×n] -> [m×n]`
    Matmul(usize, usize),
    /// `[m×k] · [n×k]ᵀ -> [m×n]`
    MatmulNT(usize, usize),
    /// `[m×n] + broadcast row [n]`
    AddRow(usize, usize),
    Gelu(usize),
    Exp(usize),
    /// `ln(max(x, floor))`, zero gradient below the floor
    LnClamped(usize, f64),
    /// Elementwise square root; subgradient 0 at 0
    Sqrt(usize),
    SoftmaxRows(usize),
    /// Row-wise log-sum-exp with max subtraction: `[m×n] -> [m]`
    LogsumexpRows(usize),
    /// Flat-index gather; backward scatter-adds
    Gather(usize, Vec<usize>),
    /// Dot with a constant weight vector: `-> [1]`
    WeightedSum(usize, Vec<f64>),
    /// Column means over rows: `[m×n] -> [n]`
    MeanRows(usize),
    /// Vertical stack; rank-1 parts count as single rows
    ConcatRows(Vec<usize>),
    /// Horizontal concatenation of `[m×nᵢ]` parts
    ConcatCols(Vec<usize>),
    LayerNormRows {
        x: usize,
        gamma: usize,
        beta: usize,
        eps: f64,
    },
}

#[derive(Debug)]
struct Node {
    shape: Vec<usize>,
    data: Vec<f64>,
    op: Op,
    requires: bool,
}

/// Arena of computation nodes. All ops panic on shape mismatches: callers
/// own shape discipline, and a mismatch is a bug, not a recoverable state.
#[derive(Debug)]
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by tensor.
pub struct Grads {
    by_node: Vec<Option<Vec<f64>>>,
}

impl Grads {
    /// Gradient of the loss with respect to `t`, if any path reached it.
    pub fn wrt(&self, t: Tensor) -> Option<&[f64]> {
        self.by_node.get(t.0).and_then(|g| g.as_deref())
    }
}

fn rows_cols(shape: &[usize]) -> (usize, usize) {
    match shape {
        [n] => (1, *n),
        [m, n] => (*m, *n),
        other => panic!("expected rank 1 or 2 tensor, got shape {other:?}"),
    }
}

const GELU_K: f64 = 0.7978845608028654; // sqrt(2/π)
const GELU_C: f64 = 0.044715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_prime(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grad_enabled: true,
        }
    }

    /// Tape that records values but no graph: every node is a leaf, so
    /// backward has nothing to traverse. Use for inference.
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

    pub fn value(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].data
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, requires: bool) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let (op, requires) = if self.grad_enabled {
            (op, requires)
        } else {
            (Op::Leaf, false)
        };
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires,
        });
        Tensor(self.nodes.len() - 1)
    }

    fn req(&self, ids: &[usize]) -> bool {
        ids.iter().any(|&i| self.nodes[i].requires)
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        self.push(shape, data, Op::Leaf, true)
    }

    /// Non-differentiable leaf.
    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Tensor {
        self.push(shape, data, Op::Leaf, false)
    }

    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.constant(vec![1], vec![v])
    }

    // ── elementwise ────────────────────────────────────────────────────

    pub fn add(&mut self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "add: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
        let data = self.exp_zip(a, b, |x, y| x + y);
        self.push(
            self.nodes[a.0].shape.clone(),
            data,
            Op::Add(a.0, b.0),
            self.req(&[a.0, b.0]),
        )
    }

    pub fn sub(&mut self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!(self.shape(a), self.shape(b), "sub: shape mismatch");
        let data = self.exp_zip(a, b, |x, y| x - y);
        self.push(
            self.nodes[a.0].shape.clone(),
            data,
            Op::Sub(a.0, b.0),
            self.req(&[a.0, b.0]),
        )
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        assert_eq!(self.shape(a), self.shape(b), "mul: shape mismatch");
        let data = self.exp_zip(a, b, |x, y| x * y);
        self.push(
            self.nodes[a.0].shape.clone(),
            data,
            Op::Mul(a.0, b.0),
            self.req(&[a.0, b.0]),
        )
    }

    fn exp_zip(&self, a: Tensor, b: Tensor, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
        self.nodes[a.0]
            .data
            .iter()
            .zip(&self.nodes[b.0].data)
            .map(|(&x, &y)| f(x, y))
            .collect()
    }

    pub fn scale(&mut self, a: Tensor, c: f64) -> Tensor {
        let data = self.nodes[a.0].data.iter().map(|&x| c * x).collect();
        self.push(
            self.nodes[a.0].shape.clone(),
            data,
            Op::Scale(a.0, c),
            self.req(&[a.0]),
        )
    }

    pub fn gelu(&mut self, a: Tensor) -> Tensor {
        let data = self.nodes[a.0].data.iter().map(|&x| gelu(x)).collect();
        self.push(
            self.nodes[a.0].shape.clone(),
            data,
            Op::Gelu(a.0),
            self.req(&[a.0]),
        )
    }

    pub fn exp(&mut self, a: Tensor) -> Tensor {
        let data = self.nodes[a.0].data.iter().map(|&x| x.exp()).collect();
        self.push(
            self.nodes[a.0].shape.clone(),
            data,
            Op::Exp(a.0),
            self.req(&[a.0]),
        )
    }

    pub fn ln_clamped(&mut self, a: Tensor, floor: f64) -> Tensor {
        assert!(floor > 0.0, "ln_clamped: floor must be positive");
        let data = self.nodes[a.0]
            .data
            .iter()
            .map(|&x| x.max(floor).ln())
            .collect();
        self.push(
            self.nodes[a.0].shape.clone(),
            data,
            Op::LnClamped(a.0, floor),
            self.req(&[a.0]),
        )
    }

    pub fn sqrt(&mut self, a: Tensor) -> Tensor {
        let data = self.nodes[a.0].data.iter().map(|&x| x.sqrt()).collect();
        self.push(
            self.nodes[a.0].shape.clone(),
            data,
            Op::Sqrt(a.0),
            self.req(&[a.0]),
        )
    }

    // ── linear algebra ─────────────────────────────────────────────────

    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (m, k) = rows_cols(self.shape(a));
        let (k2, n) = rows_cols(self.shape(b));
        assert_eq!(k, k2, "matmul: inner dims {k} vs {k2}");
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for l in 0..k {
                let av = da[i * k + l];
                if av == 0.0 {
                    continue;
                }
                for j in 0..n {
                    out[i * n + j] += av * db[l * n + j];
                }
            }
        }
        self.push(vec![m, n], out, Op::Matmul(a.0, b.0), self.req(&[a.0, b.0]))
    }

    /// `a · bᵀ` where `a: [m×k]`, `b: [n×k]`. The natural shape for linear
    /// layers whose weight is stored `[out × in]`.
    pub fn matmul_nt(&mut self, a: Tensor, b: Tensor) -> Tensor {
        let (m, k) = rows_cols(self.shape(a));
        let (n, k2) = rows_cols(self.shape(b));
        assert_eq!(k, k2, "matmul_nt: inner dims {k} vs {k2}");
        let (da, db) = (&self.nodes[a.0].data, &self.nodes[b.0].data);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                let mut acc = 0.0;
                for l in 0..k {
                    acc += da[i * k + l] * db[j * k + l];
                }
                out[i * n + j] = acc;
            }
        }
        self.push(
            vec![m, n],
            out,
            Op::MatmulNT(a.0, b.0),
            self.req(&[a.0, b.0]),
        )
    }

    /// Adds a row vector `[n]` to every row of `[m×n]`.
    pub fn add_row(&mut self, a: Tensor, v: Tensor) -> Tensor {
        let (m, n) = rows_cols(self.shape(a));
        assert_eq!(self.shape(v), &[n], "add_row: row width mismatch");
        let (da, dv) = (&self.nodes[a.0].data, &self.nodes[v.0].data);
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            for j in 0..n {
                out.push(da[i * n + j] + dv[j]);
            }
        }
        self.push(
            self.nodes[a.0].shape.clone(),
            out,
            Op::AddRow(a.0, v.0),
            self.req(&[a.0, v.0]),
        )
    }

    // ── reductions and reshuffles ──────────────────────────────────────

    pub fn softmax_rows(&mut self, a: Tensor) -> Tensor {
        let (m, n) = rows_cols(self.shape(a));
        let da = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &da[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
            let sum: f64 = exps.iter().sum();
            out.extend(exps.iter().map(|&e| e / sum));
        }
        self.push(
            self.nodes[a.0].shape.clone(),
            out,
            Op::SoftmaxRows(a.0),
            self.req(&[a.0]),
        )
    }

    pub fn logsumexp_rows(&mut self, a: Tensor) -> Tensor {
        let (m, n) = rows_cols(self.shape(a));
        let da = &self.nodes[a.0].data;
        let mut out = Vec::with_capacity(m);
        for i in 0..m {
            let row = &da[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            out.push(max + sum.ln());
        }
        self.push(vec![m], out, Op::LogsumexpRows(a.0), self.req(&[a.0]))
    }

    /// Gathers flat indices of `a` into a tensor of `out_shape`.
    pub fn gather(&mut self, a: Tensor, indices: &[usize], out_shape: Vec<usize>) -> Tensor {
        assert_eq!(
            out_shape.iter().product::<usize>(),
            indices.len(),
            "gather: shape/index count mismatch"
        );
        let da = &self.nodes[a.0].data;
        let data: Vec<f64> = indices.iter().map(|&i| da[i]).collect();
        self.push(
            out_shape,
            data,
            Op::Gather(a.0, indices.to_vec()),
            self.req(&[a.0]),
        )
    }

    /// Gathers whole rows of a rank-2 tensor.
    pub fn gather_rows(&mut self, a: Tensor, rows: &[usize]) -> Tensor {
        let (m, n) = rows_cols(self.shape(a));
        let mut flat = Vec::with_capacity(rows.len() * n);
        for &r in rows {
            assert!(r < m, "gather_rows: row {r} out of {m}");
            flat.extend((r * n)..(r + 1) * n);
        }
        self.gather(a, &flat, vec![rows.len(), n])
    }

    /// Extracts one row of a rank-2 tensor as a rank-1 vector.
    pub fn pick_row(&mut self, a: Tensor, row: usize) -> Tensor {
        let (m, n) = rows_cols(self.shape(a));
        assert!(row < m, "pick_row: row {row} out of {m}");
        let flat: Vec<usize> = ((row * n)..(row + 1) * n).collect();
        self.gather(a, &flat, vec![n])
    }

    /// Reinterprets a tensor under a new shape with the same element count
    /// (an identity gather, so gradients pass straight through).
    pub fn reshape(&mut self, a: Tensor, shape: Vec<usize>) -> Tensor {
        let len = self.nodes[a.0].data.len();
        assert_eq!(
            shape.iter().product::<usize>(),
            len,
            "reshape: element count mismatch"
        );
        let flat: Vec<usize> = (0..len).collect();
        self.gather(a, &flat, shape)
    }

    /// Extracts a contiguous block of columns.
    pub fn slice_cols(&mut self, a: Tensor, start: usize, len: usize) -> Tensor {
        let (m, n) = rows_cols(self.shape(a));
        assert!(start + len <= n, "slice_cols: {start}+{len} out of {n}");
        let mut flat = Vec::with_capacity(m * len);
        for i in 0..m {
            flat.extend((i * n + start)..(i * n + start + len));
        }
        self.gather(a, &flat, vec![m, len])
    }

    /// Dot product with a fixed weight vector, yielding a `[1]` scalar.
    pub fn weighted_sum(&mut self, a: Tensor, weights: &[f64]) -> Tensor {
        assert_eq!(
            self.nodes[a.0].data.len(),
            weights.len(),
            "weighted_sum: length mismatch"
        );
        let v: f64 = self.nodes[a.0]
            .data
            .iter()
            .zip(weights)
            .map(|(&x, &w)| x * w)
            .sum();
        self.push(
            vec![1],
            vec![v],
            Op::WeightedSum(a.0, weights.to_vec()),
            self.req(&[a.0]),
        )
    }

    /// Sum of all entries as a `[1]` scalar.
    pub fn sum_all(&mut self, a: Tensor) -> Tensor {
        let ones = vec![1.0; self.nodes[a.0].data.len()];
        self.weighted_sum(a, &ones)
    }

    /// Column-wise mean over rows: `[m×n] -> [n]`.
    pub fn mean_rows(&mut self, a: Tensor) -> Tensor {
        let (m, n) = rows_cols(self.shape(a));
        let da = &self.nodes[a.0].data;
        let mut out = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                out[j] += da[i * n + j];
            }
        }
        for v in &mut out {
            *v /= m as f64;
        }
        self.push(vec![n], out, Op::MeanRows(a.0), self.req(&[a.0]))
    }

    /// Stacks parts vertically. Rank-1 parts are single rows; all widths
    /// must agree. Result is `[Σrows × n]`.
    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_rows: empty");
        let (_, n) = rows_cols(self.shape(parts[0]));
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (pm, pn) = rows_cols(self.shape(p));
            assert_eq!(pn, n, "concat_rows: width mismatch {pn} vs {n}");
            rows += pm;
            data.extend_from_slice(&self.nodes[p.0].data);
        }
        let ids: Vec<usize> = parts.iter().map(|t| t.0).collect();
        let req = self.req(&ids);
        self.push(vec![rows, n], data, Op::ConcatRows(ids), req)
    }

    /// Concatenates parts side by side. All must have the same row count.
    pub fn concat_cols(&mut self, parts: &[Tensor]) -> Tensor {
        assert!(!parts.is_empty(), "concat_cols: empty");
        let (m, _) = rows_cols(self.shape(parts[0]));
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let (pm, pn) = rows_cols(self.shape(p));
                assert_eq!(pm, m, "concat_cols: row count mismatch");
                pn
            })
            .collect();
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.nodes[p.0].data[i * w..(i + 1) * w]);
            }
        }
        let ids: Vec<usize> = parts.iter().map(|t| t.0).collect();
        let req = self.req(&ids);
        self.push(vec![m, total], data, Op::ConcatCols(ids), req)
    }

    /// Row-wise layer normalization with learned per-column scale and
    /// shift: `γ ⊙ (x − μ)/√(σ² + eps) + β`.
    pub fn layer_norm(&mut self, x: Tensor, gamma: Tensor, beta: Tensor, eps: f64) -> Tensor {
        let (m, n) = rows_cols(self.shape(x));
        assert_eq!(self.shape(gamma), &[n], "layer_norm: gamma width");
        assert_eq!(self.shape(beta), &[n], "layer_norm: beta width");
        let dx = &self.nodes[x.0].data;
        let dg = &self.nodes[gamma.0].data;
        let db = &self.nodes[beta.0].data;
        let mut out = Vec::with_capacity(m * n);
        for i in 0..m {
            let row = &dx[i * n..(i + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for j in 0..n {
                out.push(dg[j] * (row[j] - mean) * inv + db[j]);
            }
        }
        self.push(
            self.nodes[x.0].shape.clone(),
            out,
            Op::LayerNormRows {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                eps,
            },
            self.req(&[x.0, gamma.0, beta.0]),
        )
    }

    // ── backward ───────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Returns per-node gradients for
    /// every node on a differentiable path to the loss.
    pub fn backward(&self, loss: Tensor) -> Grads {
        assert_eq!(
            self.nodes[loss.0].data.len(),
            1,
            "backward: loss must be a scalar"
        );
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for id in (0..=loss.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            self.dispatch(id, &g, &mut grads);
            grads[id] = Some(g);
        }
        Grads { by_node: grads }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], target: usize, add: impl FnOnce(&mut [f64])) {
        if !self.nodes[target].requires {
            return;
        }
        let buf = grads[target].get_or_insert_with(|| vec![0.0; self.nodes[target].data.len()]);
        add(buf);
    }

    fn dispatch(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        match &self.nodes[id].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, |buf| {
                    for (o, &gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for (o, &gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, |buf| {
                    for (o, &gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for (o, &gi) in buf.iter_mut().zip(g) {
                        *o -= gi;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (da, db) = (&self.nodes[*a].data, &self.nodes[*b].data);
                self.accumulate(grads, *a, |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * db[i];
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * da[i];
                    }
                });
            }
            Op::Scale(a, c) => {
                let c = *c;
                self.accumulate(grads, *a, |buf| {
                    for i in 0..g.len() {
                        buf[i] += c * g[i];
                    }
                });
            }
            Op::Matmul(a, b) => {
                let (m, k) = rows_cols(&self.nodes[*a].shape);
                let (_, n) = rows_cols(&self.nodes[*b].shape);
                let (da, db) = (&self.nodes[*a].data, &self.nodes[*b].data);
                // dA = G · Bᵀ
                self.accumulate(grads, *a, |buf| {
                    for i in 0..m {
                        for l in 0..k {
                            let mut acc = 0.0;
                            for j in 0..n {
                                acc += g[i * n + j] * db[l * n + j];
                            }
                            buf[i * k + l] += acc;
                        }
                    }
                });
                // dB = Aᵀ · G
                self.accumulate(grads, *b, |buf| {
                    for l in 0..k {
                        for i in 0..m {
                            let av = da[i * k + l];
                            if av == 0.0 {
                                continue;
                            }
                            for j in 0..n {
                                buf[l * n + j] += av * g[i * n + j];
                            }
                        }
                    }
                });
            }
            Op::MatmulNT(a, b) => {
                let (m, k) = rows_cols(&self.nodes[*a].shape);
                let (n, _) = rows_cols(&self.nodes[*b].shape);
                let (da, db) = (&self.nodes[*a].data, &self.nodes[*b].data);
                // C = A·Bᵀ: dA = G·B, dB = Gᵀ·A
                self.accumulate(grads, *a, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for l in 0..k {
                                buf[i * k + l] += gv * db[j * k + l];
                            }
                        }
                    }
                });
                self.accumulate(grads, *b, |buf| {
                    for j in 0..n {
                        for i in 0..m {
                            let gv = g[i * n + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for l in 0..k {
                                buf[j * k + l] += gv * da[i * k + l];
                            }
                        }
                    }
                });
            }
            Op::AddRow(a, v) => {
                let (m, n) = rows_cols(&self.nodes[*a].shape);
                self.accumulate(grads, *a, |buf| {
                    for (o, &gi) in buf.iter_mut().zip(g) {
                        *o += gi;
                    }
                });
                self.accumulate(grads, *v, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[j] += g[i * n + j];
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let da = &self.nodes[*a].data;
                self.accumulate(grads, *a, |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * gelu_prime(da[i]);
                    }
                });
            }
            Op::Exp(a) => {
                let out = &self.nodes[id].data;
                self.accumulate(grads, *a, |buf| {
                    for i in 0..g.len() {
                        buf[i] += g[i] * out[i];
                    }
                });
            }
            Op::LnClamped(a, floor) => {
                let da = &self.nodes[*a].data;
                let floor = *floor;
                self.accumulate(grads, *a, |buf| {
                    for i in 0..g.len() {
                        if da[i] > floor {
                            buf[i] += g[i] / da[i];
                        }
                    }
                });
            }
            Op::Sqrt(a) => {
                let out = &self.nodes[id].data;
                self.accumulate(grads, *a, |buf| {
                    for i in 0..g.len() {
                        if out[i] > 0.0 {
                            buf[i] += g[i] / (2.0 * out[i]);
                        }
                    }
                });
            }
            Op::SoftmaxRows(a) => {
                let (m, n) = rows_cols(&self.nodes[*a].shape);
                let y = &self.nodes[id].data;
                self.accumulate(grads, *a, |buf| {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let gr = &g[i * n..(i + 1) * n];
                        let dot: f64 = yr.iter().zip(gr).map(|(&yv, &gv)| yv * gv).sum();
                        for j in 0..n {
                            buf[i * n + j] += yr[j] * (gr[j] - dot);
                        }
                    }
                });
            }
            Op::LogsumexpRows(a) => {
                let (m, n) = rows_cols(&self.nodes[*a].shape);
                let da = &self.nodes[*a].data;
                self.accumulate(grads, *a, |buf| {
                    for i in 0..m {
                        let row = &da[i * n..(i + 1) * n];
                        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let exps: Vec<f64> = row.iter().map(|&x| (x - max).exp()).collect();
                        let sum: f64 = exps.iter().sum();
                        for j in 0..n {
                            buf[i * n + j] += g[i] * exps[j] / sum;
                        }
                    }
                });
            }
            Op::Gather(a, indices) => {
                self.accumulate(grads, *a, |buf| {
                    for (out_i, &src) in indices.iter().enumerate() {
                        buf[src] += g[out_i];
                    }
                });
            }
            Op::WeightedSum(a, w) => {
                self.accumulate(grads, *a, |buf| {
                    for i in 0..w.len() {
                        buf[i] += g[0] * w[i];
                    }
                });
            }
            Op::MeanRows(a) => {
                let (m, n) = rows_cols(&self.nodes[*a].shape);
                self.accumulate(grads, *a, |buf| {
                    for i in 0..m {
                        for j in 0..n {
                            buf[i * n + j] += g[j] / m as f64;
                        }
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p].data.len();
                    let seg = &g[offset..offset + len];
                    self.accumulate(grads, p, |buf| {
                        for (o, &gi) in buf.iter_mut().zip(seg) {
                            *o += gi;
                        }
                    });
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let (m, total) = rows_cols(&self.nodes[id].shape);
                let mut col = 0;
                for &p in parts {
                    let (_, w) = rows_cols(&self.nodes[p].shape);
                    self.accumulate(grads, p, |buf| {
                        for i in 0..m {
                            for j in 0..w {
                                buf[i * w + j] += g[i * total + col + j];
                            }
                        }
                    });
                    col += w;
                }
            }
            Op::LayerNormRows { x, gamma, beta, eps } => {
                let (m, n) = rows_cols(&self.nodes[*x].shape);
                let dx = &self.nodes[*x].data;
                let dg = &self.nodes[*gamma].data;
                for i in 0..m {
                    let row = &dx[i * n..(i + 1) * n];
                    let gr = &g[i * n..(i + 1) * n];
                    let mean = row.iter().sum::<f64>() / n as f64;
                    let var =
                        row.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv).collect();
                    // dL/dx̂ = g ⊙ γ; then the standard centered backward.
                    let dxh: Vec<f64> = gr.iter().zip(dg).map(|(&gv, &gm)| gv * gm).collect();
                    let mean_dxh = dxh.iter().sum::<f64>() / n as f64;
                    let mean_dxh_xhat =
                        dxh.iter().zip(&xhat).map(|(&a, &b)| a * b).sum::<f64>() / n as f64;
                    self.accumulate(grads, *x, |buf| {
                        for j in 0..n {
                            buf[i * n + j] +=
                                inv * (dxh[j] - mean_dxh - xhat[j] * mean_dxh_xhat);
                        }
                    });
                    self.accumulate(grads, *gamma, |buf| {
                        for j in 0..n {
                            buf[j] += gr[j] * xhat[j];
                        }
                    });
                    self.accumulate(grads, *beta, |buf| {
                        for j in 0..n {
                            buf[j] += gr[j];
                        }
                    });
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

// ── finite-difference checking ─────────────────────────────────────────────

/// Central-difference gradient of a scalar function at `x0`.
pub fn fd_gradient(mut eval: impl FnMut(&[f64]) -> f64, x0: &[f64], step: f64) -> Vec<f64> {
    let mut xs = x0.to_vec();
    let mut grad = Vec::with_capacity(x0.len());
    for i in 0..x0.len() {
        let orig = xs[i];
        xs[i] = orig + step;
        let plus = eval(&xs);
        xs[i] = orig - step;
        let minus = eval(&xs);
        xs[i] = orig;
        grad.push((plus - minus) / (2.0 * step));
    }
    grad
}

/// Largest relative disagreement between two gradients, with the
/// denominator floored so that near-zero entries compare absolutely.
pub fn max_rel_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-2))
        .fold(0.0, f64::max)
}
