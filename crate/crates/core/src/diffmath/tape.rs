//! Reverse-mode differentiation over matrix-granularity operations.
//!
//! A [`Tape`] records every operation of a forward pass in execution order.
//! [`Tape::backward`] replays the record in reverse and returns gradients for
//! every registered parameter. Shape errors in the recorded operations are
//! programming errors and panic; domain errors (zero-norm rows) are returned.

use std::collections::{BTreeMap, HashMap};
use std::ops::Range;

use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Norm below which a row is treated as the zero vector.
pub const ZERO_NORM: f64 = 1e-12;

/// Handle to a node recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

enum Op {
    Leaf,
    Param,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Tanh(Var),
    Transpose(Var),
    SoftmaxRows {
        input: Var,
        temperature: f64,
    },
    LogSoftmaxRows {
        input: Var,
        temperature: f64,
        probs: Vec<f64>,
    },
    TopKSoftmaxRows {
        input: Var,
    },
    NormalizeRows {
        input: Var,
        norms: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    RowSums(Var),
    Diag(Var),
    SliceRows {
        input: Var,
        start: usize,
    },
    SliceCols {
        input: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    BlockAttention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<Range<usize>>,
        scale: f64,
        probs: Vec<Tensor>,
    },
    BlockMaxSim {
        input: Var,
        row_segs: Vec<Range<usize>>,
        col_segs: Vec<Range<usize>>,
        // Per output cell: argmax column for every row of the row segment,
        // then argmax row for every column of the column segment.
        row_arg: Vec<Vec<usize>>,
        col_arg: Vec<Vec<usize>>,
    },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Parameter gradients keyed by parameter name.
#[derive(Clone, Debug, Default)]
pub struct Gradients {
    grads: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.grads.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.grads.iter()
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn max_abs(&self) -> f64 {
        self.grads
            .values()
            .flat_map(|t| t.data().iter())
            .fold(0.0, |m, v| m.max(v.abs()))
    }
}

/// Operation record for a single forward pass.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
    params: Vec<(String, Var)>,
    param_index: HashMap<String, Var>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grad_enabled: true,
            params: Vec::new(),
            param_index: HashMap::new(),
        }
    }

    /// A tape that records values only; parameters become constants.
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let op = if self.grad_enabled { op } else { Op::Leaf };
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Registers a trainable parameter. Registering the same name twice
    /// returns the existing node, so shared weights accumulate gradient.
    pub fn param(&mut self, name: &str, value: &Tensor) -> Var {
        if !self.grad_enabled {
            return self.constant(value.clone());
        }
        if let Some(&v) = self.param_index.get(name) {
            return v;
        }
        self.nodes.push(Node {
            value: value.clone(),
            op: Op::Param,
        });
        let v = Var(self.nodes.len() - 1);
        self.params.push((name.to_string(), v));
        self.param_index.insert(name.to_string(), v);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    fn check_same(&self, a: Var, b: Var, what: &str) {
        let (x, y) = (self.value(a), self.value(b));
        assert!(
            x.rows() == y.rows() && x.cols() == y.cols(),
            "{what}: shapes {:?} vs {:?}",
            x.shape(),
            y.shape()
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "add");
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        self.push(value, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "sub");
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        self.push(value, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.check_same(a, b, "mul");
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        self.push(value, Op::Mul(a, b))
    }

    /// `a (n x m) + row (1 x m)` broadcast over rows.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (x, r) = (self.value(a), self.value(row));
        assert!(r.rows() == 1 && r.cols() == x.cols(), "add_row shape");
        let m = x.cols();
        let mut value = x.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v += r.data()[i % m];
        }
        self.push(value, Op::AddRow(a, row))
    }

    /// `a (n x m) * col (n x 1)` broadcast over columns.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        let (x, c) = (self.value(a), self.value(col));
        assert!(c.cols() == 1 && c.rows() == x.rows(), "mul_col shape");
        let m = x.cols();
        let mut value = x.clone();
        for (i, v) in value.data_mut().iter_mut().enumerate() {
            *v *= c.data()[i / m];
        }
        self.push(value, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x * s);
        self.push(value, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).map(|x| x + s);
        self.push(value, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::tanh);
        self.push(value, Op::Tanh(a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    /// Row-wise softmax of `a / temperature`.
    pub fn softmax_rows(&mut self, a: Var, temperature: f64) -> Var {
        let value = softmax_rows_of(self.value(a), temperature);
        self.push(value, Op::SoftmaxRows {
            input: a,
            temperature,
        })
    }

    /// Row-wise log-softmax of `a / temperature`.
    pub fn log_softmax_rows(&mut self, a: Var, temperature: f64) -> Var {
        let x = self.value(a);
        let (n, m) = (x.rows(), x.cols());
        let mut out = vec![0.0; n * m];
        let mut probs = vec![0.0; n * m];
        for i in 0..n {
            let row = x.row(i);
            let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b / temperature));
            let lse = max
                + row
                    .iter()
                    .map(|&v| (v / temperature - max).exp())
                    .sum::<f64>()
                    .ln();
            for j in 0..m {
                let l = row[j] / temperature - lse;
                out[i * m + j] = l;
                probs[i * m + j] = l.exp();
            }
        }
        let value = Tensor::matrix(n, m, out);
        self.push(value, Op::LogSoftmaxRows {
            input: a,
            temperature,
            probs,
        })
    }

    /// Per row: keep the `k` largest entries (lower column wins ties),
    /// softmax over them, zero elsewhere.
    pub fn topk_softmax_rows(&mut self, a: Var, k: usize) -> Var {
        let value = topk_softmax_rows_of(self.value(a), k);
        self.push(value, Op::TopKSoftmaxRows { input: a })
    }

    /// Divides every row by its l2 norm.
    pub fn normalize_rows(&mut self, a: Var) -> Result<Var> {
        let x = self.value(a);
        let (n, m) = (x.rows(), x.cols());
        let mut norms = Vec::with_capacity(n);
        let mut value = x.clone();
        for i in 0..n {
            let norm = x.row(i).iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm <= ZERO_NORM {
                return Err(Error::ZeroVector);
            }
            norms.push(norm);
            for v in &mut value.data_mut()[i * m..(i + 1) * m] {
                *v /= norm;
            }
        }
        Ok(self.push(value, Op::NormalizeRows { input: a, norms }))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let value = Tensor::scalar(self.value(a).sum());
        self.push(value, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let value = Tensor::scalar(x.sum() / x.len() as f64);
        self.push(value, Op::Mean(a))
    }

    /// Sum over columns, giving an `n x 1` column.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let x = self.value(a);
        let sums: Vec<f64> = (0..x.rows()).map(|i| x.row(i).iter().sum()).collect();
        let n = sums.len();
        self.push(Tensor::matrix(n, 1, sums), Op::RowSums(a))
    }

    /// Diagonal of a square matrix as an `n x 1` column.
    pub fn diag(&mut self, a: Var) -> Var {
        let x = self.value(a);
        assert_eq!(x.rows(), x.cols(), "diag of non-square matrix");
        let d: Vec<f64> = (0..x.rows()).map(|i| x.at(i, i)).collect();
        let n = d.len();
        self.push(Tensor::matrix(n, 1, d), Op::Diag(a))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.rows(), "slice_rows out of range");
        let value = x.slice_rows(start, len);
        self.push(value, Op::SliceRows { input: a, start })
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let x = self.value(a);
        assert!(start + len <= x.cols(), "slice_cols out of range");
        let n = x.rows();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&x.row(i)[start..start + len]);
        }
        self.push(Tensor::matrix(n, len, out), Op::SliceCols { input: a, start })
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let m = self.value(parts[0]).cols();
        let mut data = Vec::new();
        let mut n = 0;
        for &p in parts {
            let x = self.value(p);
            assert_eq!(x.cols(), m, "concat_rows column mismatch");
            data.extend_from_slice(x.data());
            n += x.rows();
        }
        self.push(Tensor::matrix(n, m, data), Op::ConcatRows(parts.to_vec()))
    }

    /// Scaled dot-product self-attention restricted to row blocks:
    /// rows in `segments[s]` attend only to rows in the same segment.
    pub fn block_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[Range<usize>],
        scale: f64,
    ) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        assert!(
            qv.rows() == kv.rows() && kv.rows() == vv.rows() && qv.cols() == kv.cols(),
            "block_attention shapes"
        );
        let m = vv.cols();
        let mut out = vec![0.0; vv.rows() * m];
        let mut probs = Vec::with_capacity(segments.len());
        for seg in segments {
            let qs = qv.slice_rows(seg.start, seg.len());
            let ks = kv.slice_rows(seg.start, seg.len());
            let vs = vv.slice_rows(seg.start, seg.len());
            let scores = qs.matmul(&ks.transpose()).map(|x| x * scale);
            let p = softmax_rows_of(&scores, 1.0);
            let o = p.matmul(&vs);
            out[seg.start * m..seg.end * m].copy_from_slice(o.data());
            probs.push(p);
        }
        let value = Tensor::matrix(vv.rows(), m, out);
        self.push(value, Op::BlockAttention {
            q,
            k,
            v,
            segments: segments.to_vec(),
            scale,
            probs,
        })
    }

    /// Symmetric max-over-alignment similarity between row blocks and
    /// column blocks of a cosine matrix. Output cell `(i, j)` is
    /// `0.5 * (mean over rows of block i of the max over columns of block j
    /// + mean over columns of block j of the max over rows of block i)`.
    pub fn block_max_sim(
        &mut self,
        a: Var,
        row_segs: &[Range<usize>],
        col_segs: &[Range<usize>],
    ) -> Var {
        let x = self.value(a);
        let (bt, bv) = (row_segs.len(), col_segs.len());
        let mut out = vec![0.0; bt * bv];
        let keep = self.grad_enabled;
        let mut row_arg = Vec::new();
        let mut col_arg = Vec::new();
        for (i, rs) in row_segs.iter().enumerate() {
            for (j, cs) in col_segs.iter().enumerate() {
                let mut ra = Vec::with_capacity(rs.len());
                let mut row_term = 0.0;
                for r in rs.clone() {
                    let row = x.row(r);
                    let (mut best, mut arg) = (f64::NEG_INFINITY, cs.start);
                    for c in cs.clone() {
                        if row[c] > best {
                            best = row[c];
                            arg = c;
                        }
                    }
                    row_term += best;
                    ra.push(arg);
                }
                let mut ca = Vec::with_capacity(cs.len());
                let mut col_term = 0.0;
                for c in cs.clone() {
                    let (mut best, mut arg) = (f64::NEG_INFINITY, rs.start);
                    for r in rs.clone() {
                        let v = x.at(r, c);
                        if v > best {
                            best = v;
                            arg = r;
                        }
                    }
                    col_term += best;
                    ca.push(arg);
                }
                out[i * bv + j] =
                    0.5 * (row_term / rs.len() as f64 + col_term / cs.len() as f64);
                if keep {
                    row_arg.push(ra);
                    col_arg.push(ca);
                }
            }
        }
        self.push(Tensor::matrix(bt, bv, out), Op::BlockMaxSim {
            input: a,
            row_segs: row_segs.to_vec(),
            col_segs: col_segs.to_vec(),
            row_arg,
            col_arg,
        })
    }

    /// Reverse pass from a scalar `loss`. Every registered parameter gets a
    /// gradient; parameters the loss does not depend on get zeros.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::Param => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let gt = Tensor::matrix(node.value.rows(), node.value.cols(), g.clone());
                    let ga = gt.matmul(&bv.transpose());
                    let gb = av.transpose().matmul(&gt);
                    accumulate(&mut grads, *a, ga.data());
                    accumulate(&mut grads, *b, gb.data());
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *b, &g);
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, &g);
                    let neg: Vec<f64> = g.iter().map(|v| -v).collect();
                    accumulate(&mut grads, *b, &neg);
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    let ga: Vec<f64> = g.iter().zip(bv).map(|(g, b)| g * b).collect();
                    let gb: Vec<f64> = g.iter().zip(av).map(|(g, a)| g * a).collect();
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *b, &gb);
                }
                Op::AddRow(a, row) => {
                    let m = node.value.cols();
                    let mut gr = vec![0.0; m];
                    for (i, v) in g.iter().enumerate() {
                        gr[i % m] += v;
                    }
                    accumulate(&mut grads, *a, &g);
                    accumulate(&mut grads, *row, &gr);
                }
                Op::MulCol(a, col) => {
                    let m = node.value.cols();
                    let (av, cv) = (self.value(*a).data(), self.value(*col).data());
                    let mut ga = vec![0.0; g.len()];
                    let mut gc = vec![0.0; cv.len()];
                    for (i, gv) in g.iter().enumerate() {
                        ga[i] = gv * cv[i / m];
                        gc[i / m] += gv * av[i];
                    }
                    accumulate(&mut grads, *a, &ga);
                    accumulate(&mut grads, *col, &gc);
                }
                Op::Scale(a, s) => {
                    let ga: Vec<f64> = g.iter().map(|v| v * s).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::AddScalar(a) => accumulate(&mut grads, *a, &g),
                Op::Tanh(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(node.value.data())
                        .map(|(g, y)| g * (1.0 - y * y))
                        .collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Transpose(a) => {
                    let gt = Tensor::matrix(node.value.rows(), node.value.cols(), g).transpose();
                    accumulate(&mut grads, *a, gt.data());
                }
                Op::SoftmaxRows { input, temperature } => {
                    let ga = softmax_backward(node.value.data(), &g, node.value.cols(), *temperature);
                    accumulate(&mut grads, *input, &ga);
                }
                Op::LogSoftmaxRows {
                    input,
                    temperature,
                    probs,
                } => {
                    let m = node.value.cols();
                    let mut ga = vec![0.0; g.len()];
                    for i in 0..node.value.rows() {
                        let gs: f64 = g[i * m..(i + 1) * m].iter().sum();
                        for j in 0..m {
                            let k = i * m + j;
                            ga[k] = (g[k] - probs[k] * gs) / temperature;
                        }
                    }
                    accumulate(&mut grads, *input, &ga);
                }
                Op::TopKSoftmaxRows { input } => {
                    // Unselected entries are exactly zero and carry no gradient.
                    let ga = softmax_backward(node.value.data(), &g, node.value.cols(), 1.0);
                    accumulate(&mut grads, *input, &ga);
                }
                Op::NormalizeRows { input, norms } => {
                    let m = node.value.cols();
                    let y = node.value.data();
                    let mut ga = vec![0.0; g.len()];
                    for (i, norm) in norms.iter().enumerate() {
                        let r = i * m..(i + 1) * m;
                        let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
                        for k in r {
                            ga[k] = (g[k] - y[k] * dot) / norm;
                        }
                    }
                    accumulate(&mut grads, *input, &ga);
                }
                Op::Sum(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads, *a, &vec![g[0]; n]);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len();
                    accumulate(&mut grads, *a, &vec![g[0] / n as f64; n]);
                }
                Op::RowSums(a) => {
                    let m = self.value(*a).cols();
                    let ga: Vec<f64> = (0..self.value(*a).len()).map(|k| g[k / m]).collect();
                    accumulate(&mut grads, *a, &ga);
                }
                Op::Diag(a) => {
                    let n = node.value.rows();
                    let mut ga = vec![0.0; n * n];
                    for i in 0..n {
                        ga[i * n + i] = g[i];
                    }
                    accumulate(&mut grads, *a, &ga);
                }
                Op::SliceRows { input, start } => {
                    let x = self.value(*input);
                    let m = x.cols();
                    let mut ga = vec![0.0; x.len()];
                    ga[start * m..start * m + g.len()].copy_from_slice(&g);
                    accumulate(&mut grads, *input, &ga);
                }
                Op::SliceCols { input, start } => {
                    let x = self.value(*input);
                    let (m, len) = (x.cols(), node.value.cols());
                    let mut ga = vec![0.0; x.len()];
                    for i in 0..x.rows() {
                        ga[i * m + start..i * m + start + len]
                            .copy_from_slice(&g[i * len..(i + 1) * len]);
                    }
                    accumulate(&mut grads, *input, &ga);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.value(p).len();
                        accumulate(&mut grads, p, &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::BlockAttention {
                    q,
                    k,
                    v,
                    segments,
                    scale,
                    probs,
                } => {
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (dk_cols, m) = (qv.cols(), vv.cols());
                    let gt = Tensor::matrix(node.value.rows(), m, g);
                    let mut gq = vec![0.0; qv.len()];
                    let mut gk = vec![0.0; kv.len()];
                    let mut gv = vec![0.0; vv.len()];
                    for (seg, p) in segments.iter().zip(probs) {
                        let go = gt.slice_rows(seg.start, seg.len());
                        let vs = vv.slice_rows(seg.start, seg.len());
                        let qs = qv.slice_rows(seg.start, seg.len());
                        let ks = kv.slice_rows(seg.start, seg.len());
                        let dv = p.transpose().matmul(&go);
                        let dp = go.matmul(&vs.transpose());
                        let ds = Tensor::matrix(
                            p.rows(),
                            p.cols(),
                            softmax_backward(p.data(), dp.data(), p.cols(), 1.0),
                        )
                        .map(|x| x * scale);
                        let dq = ds.matmul(&ks);
                        let dkk = ds.transpose().matmul(&qs);
                        gq[seg.start * dk_cols..seg.end * dk_cols].copy_from_slice(dq.data());
                        gk[seg.start * dk_cols..seg.end * dk_cols].copy_from_slice(dkk.data());
                        gv[seg.start * m..seg.end * m].copy_from_slice(dv.data());
                    }
                    accumulate(&mut grads, *q, &gq);
                    accumulate(&mut grads, *k, &gk);
                    accumulate(&mut grads, *v, &gv);
                }
                Op::BlockMaxSim {
                    input,
                    row_segs,
                    col_segs,
                    row_arg,
                    col_arg,
                } => {
                    let x = self.value(*input);
                    let cols = x.cols();
                    let bv = col_segs.len();
                    let mut ga = vec![0.0; x.len()];
                    for (i, rs) in row_segs.iter().enumerate() {
                        for (j, cs) in col_segs.iter().enumerate() {
                            let cell = i * bv + j;
                            let gc = g[cell];
                            if gc == 0.0 {
                                continue;
                            }
                            let wr = 0.5 * gc / rs.len() as f64;
                            for (r, &c) in rs.clone().zip(&row_arg[cell]) {
                                ga[r * cols + c] += wr;
                            }
                            let wc = 0.5 * gc / cs.len() as f64;
                            for (c, &r) in cs.clone().zip(&col_arg[cell]) {
                                ga[r * cols + c] += wc;
                            }
                        }
                    }
                    accumulate(&mut grads, *input, &ga);
                }
            }
        }

        let mut out = BTreeMap::new();
        for (name, var) in &self.params {
            let value = self.value(*var);
            let g = match grads.get_mut(var.0).and_then(Option::take) {
                Some(g) => g,
                None => {
                    log::debug!("parameter {name} is disconnected from the loss; gradient set to zero");
                    vec![0.0; value.len()]
                }
            };
            let t = Tensor::new(value.shape().to_vec(), g).expect("gradient shape");
            out.insert(name.clone(), t);
        }
        Ok(Gradients { grads: out })
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], v: Var, g: &[f64]) {
    match &mut grads[v.0] {
        Some(acc) => {
            for (a, b) in acc.iter_mut().zip(g) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(g.to_vec()),
    }
}

/// Gradient through a row-wise softmax `y = softmax(x / t)`.
fn softmax_backward(y: &[f64], g: &[f64], m: usize, temperature: f64) -> Vec<f64> {
    let mut out = vec![0.0; y.len()];
    for i in 0..y.len() / m {
        let r = i * m..(i + 1) * m;
        let dot: f64 = g[r.clone()].iter().zip(&y[r.clone()]).map(|(a, b)| a * b).sum();
        for k in r {
            out[k] = y[k] * (g[k] - dot) / temperature;
        }
    }
    out
}

pub(crate) fn softmax_rows_of(x: &Tensor, temperature: f64) -> Tensor {
    let (n, m) = (x.rows(), x.cols());
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = x.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let o = &mut out[i * m..(i + 1) * m];
        let mut total = 0.0;
        for (o, &v) in o.iter_mut().zip(row) {
            *o = ((v - max) / temperature).exp();
            total += *o;
        }
        for o in o.iter_mut() {
            *o /= total;
        }
    }
    Tensor::matrix(n, m, out)
}

pub(crate) fn topk_softmax_rows_of(x: &Tensor, k: usize) -> Tensor {
    let (n, m) = (x.rows(), x.cols());
    assert!(k >= 1 && k <= m, "top-k with k={k} over {m} entries");
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        let row = x.row(i);
        let mut order: Vec<usize> = (0..m).collect();
        // Stable sort keeps the lower index first on equal logits.
        order.sort_by(|&a, &b| row[b].partial_cmp(&row[a]).expect("finite logits"));
        let selected = &order[..k];
        let max = row[selected[0]];
        let mut total = 0.0;
        for &j in selected {
            let e = (row[j] - max).exp();
            out[i * m + j] = e;
            total += e;
        }
        for &j in selected {
            out[i * m + j] /= total;
        }
    }
    Tensor::matrix(n, m, out)
}
