use std::collections::HashMap;

use super::{gemm_nn, gemm_nt, gemm_tn, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Variance floor in layer normalization and the softmax denominator.
pub const LAYER_NORM_EPS: f64 = 1e-12;
const SOFTMAX_EPS: f64 = 1e-12;

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_K: f64 = 0.044_715;

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddBias(usize, usize),
    Scale(usize, f64),
    Tanh(usize),
    Sigmoid(usize),
    Gelu(usize),
    Softmax(usize),
    LayerNorm {
        x: usize,
        gamma: usize,
        beta: usize,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Embedding {
        table: usize,
        ids: Vec<usize>,
    },
    ConcatRows(Vec<usize>),
    ConcatCols(Vec<usize>),
    SliceRows {
        x: usize,
        start: usize,
    },
    SliceCols {
        x: usize,
        start: usize,
    },
    GatherRows {
        x: usize,
        idx: Vec<usize>,
    },
    ScatterAddRows {
        x: usize,
        idx: Vec<usize>,
    },
    SumRows(usize),
    MeanRows(usize),
    SumCols(usize),
    SumAll(usize),
    Transpose(usize),
    Reshape(usize),
    CrossEntropy {
        logits: usize,
        targets: Vec<i64>,
        probs: Vec<f64>,
        count: usize,
    },
    L2NormalizeRows {
        x: usize,
        norms: Vec<f64>,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Recording of one forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    bindings: Vec<(String, Var)>,
}

/// Gradients of one scalar with respect to every recorded value.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    /// Add the gradients of every parameter bound on `tape` into `store`.
    pub fn accumulate_into(&self, tape: &Tape, store: &mut ParamStore) -> Result<()> {
        for (name, var) in &tape.bindings {
            if let Some(g) = self.get(*var) {
                store.accumulate_grad(name, g)?;
            }
        }
        Ok(())
    }
}

fn check2(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    if t.shape().len() != 2 {
        return Err(Error::shape(op, t.shape(), &[0, 0]));
    }
    Ok((t.shape()[0], t.shape()[1]))
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_K * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_C * (x + GELU_K * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_K * x * x)
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
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

    /// Names of the parameters bound on this tape, with their handles.
    pub fn bindings(&self) -> &[(String, Var)] {
        &self.bindings
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, inputs: &[usize]) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric(name));
        }
        let requires_grad = inputs.iter().any(|&i| self.nodes[i].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn leaf_node(&mut self, value: Tensor, requires_grad: bool) -> Result<Var> {
        if !value.is_finite() {
            return Err(Error::Numeric("leaf"));
        }
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// A constant: no gradient flows into it.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.leaf_node(value, false)
    }

    /// A free input that receives a gradient.
    pub fn input(&mut self, value: Tensor) -> Result<Var> {
        self.leaf_node(value, true)
    }

    /// Bind parameter `name` of `store`. Repeated binds return the same
    /// handle, so shared weights accumulate one gradient.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(v) = self.params.get(name) {
            return Ok(*v);
        }
        let value = store.tensor(name)?.clone();
        let v = self.leaf_node(value, true)?;
        self.params.insert(name.to_string(), v);
        self.bindings.push((name.to_string(), v));
        Ok(v)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = check2("matmul", ta)?;
        let (k2, n) = check2("matmul", tb)?;
        if k != k2 {
            return Err(Error::shape("matmul", ta.shape(), tb.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm_nn(ta.data(), tb.data(), &mut out, m, k, n);
        self.push("matmul", Tensor::new(vec![m, n], out)?, Op::MatMul(a.0, b.0), &[a.0, b.0])
    }

    fn same_shape_op(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if !ta.same_shape(tb) {
            return Err(Error::shape(name, ta.shape(), tb.shape()));
        }
        let out = ta.zip_map(tb, f);
        self.push(name, out, op, &[a.0, b.0])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape_op("add", a, b, |x, y| x + y, Op::Add(a.0, b.0))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape_op("sub", a, b, |x, y| x - y, Op::Sub(a.0, b.0))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape_op("mul", a, b, |x, y| x * y, Op::Mul(a.0, b.0))
    }

    /// Add a length-`n` bias to every row of `x[m, n]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = tx.cols();
        if tb.len() != n {
            return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
        }
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            for (o, b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        self.push("add_bias", out, Op::AddBias(x.0, bias.0), &[x.0, bias.0])
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Result<Var> {
        let out = self.value(x).map(|v| v * s);
        self.push("scale", out, Op::Scale(x.0, s), &[x.0])
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(f64::tanh);
        self.push("tanh", out, Op::Tanh(x.0), &[x.0])
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(sigmoid);
        self.push("sigmoid", out, Op::Sigmoid(x.0), &[x.0])
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: Var) -> Result<Var> {
        let out = self.value(x).map(gelu);
        self.push("gelu", out, Op::Gelu(x.0), &[x.0])
    }

    /// Row-wise softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = tx.cols();
        let mut out = tx.clone();
        for row in out.data_mut().chunks_mut(n.max(1)) {
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            let denom = sum + SOFTMAX_EPS;
            for v in row.iter_mut() {
                *v /= denom;
            }
        }
        self.push("softmax", out, Op::Softmax(x.0), &[x.0])
    }

    /// Normalize each row to zero mean and unit variance, then apply
    /// `gamma` and `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let n = tx.cols();
        if tg.len() != n || tb.len() != n {
            return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = tx.row_slice(r);
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..n {
                let h = (row[c] - mean) * rs;
                xhat[r * n + c] = h;
                out[r * n + c] = h * tg.data()[c] + tb.data()[c];
            }
        }
        let shape = tx.shape().to_vec();
        self.push(
            "layer_norm",
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x: x.0,
                gamma: gamma.0,
                beta: beta.0,
                xhat,
                rstd,
            },
            &[x.0, gamma.0, beta.0],
        )
    }

    /// Rows of `table[V, d]` selected by `ids`.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        let (v, d) = check2("embedding", tt)?;
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::Input(format!("embedding id {id} out of range for table of {v}")));
            }
            out.extend_from_slice(tt.row_slice(id));
        }
        self.push(
            "embedding",
            Tensor::new(vec![ids.len(), d], out)?,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
            &[table.0],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat of nothing".into()))?;
        let n = self.value(*first).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for p in parts {
            let t = self.value(*p);
            if t.cols() != n {
                return Err(Error::shape("concat_rows", self.value(*first).shape(), t.shape()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat_rows", Tensor::new(vec![rows, n], data)?, Op::ConcatRows(ids.clone()), &ids)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Argument("concat of nothing".into()))?;
        let m = self.value(*first).rows();
        let mut total = 0;
        for p in parts {
            let t = self.value(*p);
            if t.rows() != m {
                return Err(Error::shape("concat_cols", self.value(*first).shape(), t.shape()));
            }
            total += t.cols();
        }
        let mut data = vec![0.0; m * total];
        let mut offset = 0;
        for p in parts {
            let t = self.value(*p);
            let c = t.cols();
            for r in 0..m {
                data[r * total + offset..r * total + offset + c].copy_from_slice(t.row_slice(r));
            }
            offset += c;
        }
        let ids: Vec<usize> = parts.iter().map(|p| p.0).collect();
        self.push("concat_cols", Tensor::new(vec![m, total], data)?, Op::ConcatCols(ids.clone()), &ids)
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        if start > end || end > t.rows() {
            return Err(Error::shape("slice_rows", t.shape(), &[start, end]));
        }
        let data = t.data()[start * n..end * n].to_vec();
        self.push(
            "slice_rows",
            Tensor::new(vec![end - start, n], data)?,
            Op::SliceRows { x: x.0, start },
            &[x.0],
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = (t.rows(), t.cols());
        if start > end || end > n {
            return Err(Error::shape("slice_cols", t.shape(), &[start, end]));
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&t.row_slice(r)[start..end]);
        }
        self.push(
            "slice_cols",
            Tensor::new(vec![m, w], data)?,
            Op::SliceCols { x: x.0, start },
            &[x.0],
        )
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= t.rows() {
                return Err(Error::shape("gather_rows", t.shape(), &[i]));
            }
            data.extend_from_slice(t.row_slice(i));
        }
        self.push(
            "gather_rows",
            Tensor::new(vec![idx.len(), n], data)?,
            Op::GatherRows {
                x: x.0,
                idx: idx.to_vec(),
            },
            &[x.0],
        )
    }

    /// `[m, n] -> [rows, n]` with `out[idx[r]] += x[r]`.
    pub fn scatter_add_rows(&mut self, x: Var, idx: &[usize], rows: usize) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        if idx.len() != t.rows() {
            return Err(Error::shape("scatter_add_rows", t.shape(), &[idx.len()]));
        }
        let mut out = Tensor::zeros(&[rows, n]);
        for (r, &i) in idx.iter().enumerate() {
            if i >= rows {
                return Err(Error::shape("scatter_add_rows", &[rows, n], &[i]));
            }
            for (o, v) in out.data_mut()[i * n..(i + 1) * n].iter_mut().zip(t.row_slice(r)) {
                *o += v;
            }
        }
        self.push(
            "scatter_add_rows",
            out,
            Op::ScatterAddRows {
                x: x.0,
                idx: idx.to_vec(),
            },
            &[x.0],
        )
    }

    fn column_sums(t: &Tensor) -> Vec<f64> {
        let n = t.cols();
        let mut out = vec![0.0; n];
        for r in 0..t.rows() {
            for (o, v) in out.iter_mut().zip(t.row_slice(r)) {
                *o += v;
            }
        }
        out
    }

    /// `[m, n] -> [1, n]`
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let out = Self::column_sums(self.value(x));
        self.push("sum_rows", Tensor::row(&out), Op::SumRows(x.0), &[x.0])
    }

    /// `[m, n] -> [1, n]`
    pub fn mean_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let m = t.rows();
        if m == 0 {
            return Err(Error::shape("mean_rows", t.shape(), &[1]));
        }
        let out: Vec<f64> = Self::column_sums(t).iter().map(|v| v / m as f64).collect();
        self.push("mean_rows", Tensor::row(&out), Op::MeanRows(x.0), &[x.0])
    }

    /// `[m, n] -> [m, 1]`
    pub fn sum_cols(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let out: Vec<f64> = (0..t.rows()).map(|r| t.row_slice(r).iter().sum()).collect();
        let m = out.len();
        self.push("sum_cols", Tensor::new(vec![m, 1], out)?, Op::SumCols(x.0), &[x.0])
    }

    pub fn sum_all(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push("sum_all", Tensor::scalar(s), Op::SumAll(x.0), &[x.0])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        check2("transpose", t)?;
        let out = t.transpose2();
        self.push("transpose", out, Op::Transpose(x.0), &[x.0])
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape)?;
        self.push("reshape", out, Op::Reshape(x.0), &[x.0])
    }

    /// Mean negative log-likelihood of `targets` under row-wise softmax of
    /// `logits[m, C]`, over rows whose target is not `ignore`. Zero when
    /// every row is ignored.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[i64], ignore: i64) -> Result<Var> {
        let t = self.value(logits);
        let (m, c) = (t.rows(), t.cols());
        if targets.len() != m {
            return Err(Error::shape("cross_entropy", t.shape(), &[targets.len()]));
        }
        let mut probs = vec![0.0; m * c];
        let mut total = 0.0;
        let mut count = 0;
        for r in 0..m {
            let row = t.row_slice(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let lse = max + sum.ln();
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
            let y = targets[r];
            if y == ignore {
                continue;
            }
            if y < 0 || y as usize >= c {
                return Err(Error::Input(format!("target {y} out of range for {c} classes")));
            }
            total += lse - row[y as usize];
            count += 1;
        }
        if count == 0 {
            log::debug!("cross_entropy: every target ignored; loss defined as 0");
        }
        let loss = if count == 0 { 0.0 } else { total / count as f64 };
        self.push(
            "cross_entropy",
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits: logits.0,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits.0],
        )
    }

    /// Scale each row to unit L2 norm. A zero row is a numeric failure.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let n = t.cols();
        let norms: Vec<f64> = (0..t.rows())
            .map(|r| t.row_slice(r).iter().map(|v| v * v).sum::<f64>().sqrt())
            .collect();
        if norms.contains(&0.0) {
            return Err(Error::Numeric("l2_normalize_rows"));
        }
        let mut out = t.clone();
        for (r, row) in out.data_mut().chunks_mut(n.max(1)).enumerate() {
            for v in row.iter_mut() {
                *v /= norms[r];
            }
        }
        self.push("l2_normalize_rows", out, Op::L2NormalizeRows { x: x.0, norms }, &[x.0])
    }

    /// Reverse pass from the single-element value `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lt = self.value(loss);
        if lt.len() != 1 {
            return Err(Error::shape("backward", lt.shape(), &[1]));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(lt.shape(), 1.0));

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let g = match &node.op {
                Op::Leaf => continue,
                _ => match grads[i].take() {
                    Some(g) => g,
                    None => continue,
                },
            };
            self.backward_node(i, &g, &mut grads)?;
        }
        Ok(Gradients { grads })
    }

    fn acc(&self, grads: &mut [Option<Tensor>], j: usize, g: Tensor) {
        if !self.nodes[j].requires_grad {
            return;
        }
        match &mut grads[j] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn needs(&self, j: usize) -> bool {
        self.nodes[j].requires_grad
    }

    fn backward_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let out = &self.nodes[i].value;
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.needs(*a) {
                    let mut ga = vec![0.0; m * k];
                    gemm_nt(g.data(), tb.data(), &mut ga, m, n, k);
                    self.acc(grads, *a, Tensor::new(vec![m, k], ga)?);
                }
                if self.needs(*b) {
                    let mut gb = vec![0.0; k * n];
                    gemm_tn(ta.data(), g.data(), &mut gb, m, k, n);
                    self.acc(grads, *b, Tensor::new(vec![k, n], gb)?);
                }
            }
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                if self.needs(*a) {
                    self.acc(grads, *a, g.zip_map(tb, |x, y| x * y));
                }
                if self.needs(*b) {
                    self.acc(grads, *b, g.zip_map(ta, |x, y| x * y));
                }
            }
            Op::AddBias(x, b) => {
                self.acc(grads, *x, g.clone());
                if self.needs(*b) {
                    let sums = Self::column_sums(g);
                    let shape = self.nodes[*b].value.shape().to_vec();
                    self.acc(grads, *b, Tensor::new(shape, sums)?);
                }
            }
            Op::Scale(x, s) => self.acc(grads, *x, g.map(|v| v * s)),
            Op::Tanh(x) => self.acc(grads, *x, g.zip_map(out, |gv, y| gv * (1.0 - y * y))),
            Op::Sigmoid(x) => self.acc(grads, *x, g.zip_map(out, |gv, y| gv * y * (1.0 - y))),
            Op::Gelu(x) => {
                let tx = &self.nodes[*x].value;
                self.acc(grads, *x, g.zip_map(tx, |gv, xv| gv * gelu_grad(xv)));
            }
            Op::Softmax(x) => {
                let n = out.cols();
                let mut gx = vec![0.0; out.len()];
                for r in 0..out.rows() {
                    let y = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        gx[r * n + c] = y[c] * (gr[c] - dot);
                    }
                }
                self.acc(grads, *x, Tensor::new(out.shape().to_vec(), gx)?);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let n = out.cols();
                let rows = out.rows();
                let tg = &self.nodes[*gamma].value;
                if self.needs(*x) {
                    let mut gx = vec![0.0; out.len()];
                    for r in 0..rows {
                        let gr = g.row_slice(r);
                        let xh = &xhat[r * n..(r + 1) * n];
                        let gxh: Vec<f64> = (0..n).map(|c| gr[c] * tg.data()[c]).collect();
                        let mean_g = gxh.iter().sum::<f64>() / n as f64;
                        let mean_gx = gxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for c in 0..n {
                            gx[r * n + c] = rstd[r] * (gxh[c] - mean_g - xh[c] * mean_gx);
                        }
                    }
                    self.acc(grads, *x, Tensor::new(out.shape().to_vec(), gx)?);
                }
                if self.needs(*gamma) {
                    let mut gg = vec![0.0; n];
                    for r in 0..rows {
                        for c in 0..n {
                            gg[c] += g.data()[r * n + c] * xhat[r * n + c];
                        }
                    }
                    self.acc(grads, *gamma, Tensor::new(tg.shape().to_vec(), gg)?);
                }
                if self.needs(*beta) {
                    let shape = self.nodes[*beta].value.shape().to_vec();
                    self.acc(grads, *beta, Tensor::new(shape, Self::column_sums(g))?);
                }
            }
            Op::Embedding { table, ids } => {
                let tt = &self.nodes[*table].value;
                let d = tt.cols();
                let mut gt = Tensor::zeros(tt.shape());
                for (r, &id) in ids.iter().enumerate() {
                    let dst = &mut gt.data_mut()[id * d..(id + 1) * d];
                    for (o, v) in dst.iter_mut().zip(g.row_slice(r)) {
                        *o += v;
                    }
                }
                self.acc(grads, *table, gt);
            }
            Op::ConcatRows(parts) => {
                let n = out.cols();
                let mut offset = 0;
                for &p in parts {
                    let t = &self.nodes[p].value;
                    let len = t.len();
                    if self.needs(p) {
                        let data = g.data()[offset..offset + len].to_vec();
                        self.acc(grads, p, Tensor::new(t.shape().to_vec(), data)?);
                    }
                    offset += len;
                    debug_assert_eq!(t.cols(), n);
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let m = out.rows();
                let mut offset = 0;
                for &p in parts {
                    let t = &self.nodes[p].value;
                    let c = t.cols();
                    if self.needs(p) {
                        let mut data = Vec::with_capacity(m * c);
                        for r in 0..m {
                            data.extend_from_slice(&g.data()[r * total + offset..r * total + offset + c]);
                        }
                        self.acc(grads, p, Tensor::new(t.shape().to_vec(), data)?);
                    }
                    offset += c;
                }
            }
            Op::SliceRows { x, start } => {
                let tx = &self.nodes[*x].value;
                let n = tx.cols();
                let mut gx = Tensor::zeros(tx.shape());
                gx.data_mut()[start * n..start * n + g.len()].copy_from_slice(g.data());
                self.acc(grads, *x, gx);
            }
            Op::SliceCols { x, start } => {
                let tx = &self.nodes[*x].value;
                let n = tx.cols();
                let w = g.cols();
                let mut gx = Tensor::zeros(tx.shape());
                for r in 0..tx.rows() {
                    gx.data_mut()[r * n + start..r * n + start + w].copy_from_slice(g.row_slice(r));
                }
                self.acc(grads, *x, gx);
            }
            Op::GatherRows { x, idx } => {
                let tx = &self.nodes[*x].value;
                let n = tx.cols();
                let mut gx = Tensor::zeros(tx.shape());
                for (r, &i) in idx.iter().enumerate() {
                    for (o, v) in gx.data_mut()[i * n..(i + 1) * n].iter_mut().zip(g.row_slice(r)) {
                        *o += v;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::ScatterAddRows { x, idx } => {
                let n = g.cols();
                let mut data = Vec::with_capacity(idx.len() * n);
                for &i in idx {
                    data.extend_from_slice(g.row_slice(i));
                }
                self.acc(grads, *x, Tensor::new(vec![idx.len(), n], data)?);
            }
            Op::SumRows(x) | Op::MeanRows(x) => {
                let tx = &self.nodes[*x].value;
                let m = tx.rows();
                let factor = if matches!(self.nodes[i].op, Op::MeanRows(_)) {
                    1.0 / m as f64
                } else {
                    1.0
                };
                let mut data = Vec::with_capacity(tx.len());
                for _ in 0..m {
                    data.extend(g.data().iter().map(|v| v * factor));
                }
                self.acc(grads, *x, Tensor::new(tx.shape().to_vec(), data)?);
            }
            Op::SumCols(x) => {
                let tx = &self.nodes[*x].value;
                let n = tx.cols();
                let mut data = Vec::with_capacity(tx.len());
                for r in 0..tx.rows() {
                    data.extend(std::iter::repeat_n(g.data()[r], n));
                }
                self.acc(grads, *x, Tensor::new(tx.shape().to_vec(), data)?);
            }
            Op::SumAll(x) => {
                let tx = &self.nodes[*x].value;
                self.acc(grads, *x, Tensor::full(tx.shape(), g.data()[0]));
            }
            Op::Transpose(x) => self.acc(grads, *x, g.transpose2()),
            Op::Reshape(x) => {
                let shape = self.nodes[*x].value.shape().to_vec();
                self.acc(grads, *x, g.reshape(&shape)?);
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let tl = &self.nodes[*logits].value;
                let c = tl.cols();
                let mut gl = Tensor::zeros(tl.shape());
                if *count > 0 {
                    let scale = g.data()[0] / *count as f64;
                    for (r, &y) in targets.iter().enumerate() {
                        if y < 0 || y as usize >= c {
                            continue;
                        }
                        let dst = &mut gl.data_mut()[r * c..(r + 1) * c];
                        for (j, d) in dst.iter_mut().enumerate() {
                            let onehot = if j == y as usize { 1.0 } else { 0.0 };
                            *d = (probs[r * c + j] - onehot) * scale;
                        }
                    }
                }
                self.acc(grads, *logits, gl);
            }
            Op::L2NormalizeRows { x, norms } => {
                let n = out.cols();
                let mut gx = vec![0.0; out.len()];
                for r in 0..out.rows() {
                    let y = out.row_slice(r);
                    let gr = g.row_slice(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..n {
                        gx[r * n + c] = (gr[c] - y[c] * dot) / norms[r];
                    }
                }
                self.acc(grads, *x, Tensor::new(out.shape().to_vec(), gx)?);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row(&[0.0, 0.0])).unwrap();
        let y = tape.softmax(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v - 0.5).abs() < 1e-12);
        }
    }

    #[test]
    fn layer_norm_of_constant_is_zero() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row(&[3.0; 4])).unwrap();
        let g = tape.constant(Tensor::row(&[1.0; 4])).unwrap();
        let b = tape.constant(Tensor::row(&[0.0; 4])).unwrap();
        let y = tape.layer_norm(x, g, b).unwrap();
        assert!(tape.value(y).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn shape_errors_name_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::zeros(&[2, 3])).unwrap();
        let b = tape.input(Tensor::zeros(&[2, 3])).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(err.to_string(), "shape mismatch in matmul: [2, 3] vs [2, 3]");
    }

    #[test]
    fn non_finite_values_trip() {
        let mut tape = Tape::new();
        let a = tape.input(Tensor::row(&[1e300])).unwrap();
        let b = tape.input(Tensor::row(&[1e300])).unwrap();
        assert!(matches!(tape.mul(a, b), Err(Error::Numeric("mul"))));
    }

    #[test]
    fn fan_out_gradients_accumulate() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::row(&[2.0])).unwrap();
        let y = tape.mul(x, x).unwrap();
        let z = tape.add(y, x).unwrap();
        let s = tape.sum_all(z).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[5.0]);
    }

    #[test]
    fn cross_entropy_uniform_is_ln_classes() {
        let mut tape = Tape::new();
        let x = tape.input(Tensor::zeros(&[3, 7])).unwrap();
        let l = tape.cross_entropy(x, &[0, 3, -1], -1).unwrap();
        assert!((tape.value(l).data()[0] - 7f64.ln()).abs() < 1e-12);
        let all_ignored = tape.cross_entropy(x, &[-1, -1, -1], -1).unwrap();
        assert_eq!(tape.value(all_ignored).data()[0], 0.0);
    }
}
