//! Dense f64 tensors and tape-based reverse-mode differentiation.
//!
//! The op set is exactly what a small softmax language model needs: matmul,
//! bias broadcast, tanh/exp/softplus, row-wise log-softmax, gathers, slices
//! and reductions. Values are immutable once built; a [`Tape`] records the
//! computation and replays it in reverse to produce gradients for every
//! recorded node.

use crate::error::{Error, Result};

// ── Scalar helpers ──────────────────────────────────────────────────

/// Numerically stable log(sum(exp(z))).
pub fn logsumexp(z: &[f64]) -> f64 {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    let s: f64 = z.iter().map(|&v| (v - m).exp()).sum();
    m + s.ln()
}

/// Stable log-softmax of a single logit row.
pub fn log_softmax_slice(z: &[f64]) -> Vec<f64> {
    let lse = logsumexp(z);
    z.iter().map(|&v| v - lse).collect()
}

/// Stable softplus: ln(1 + e^x) without overflow for large |x|.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Logistic sigmoid computed through softplus for stability.
pub fn sigmoid(x: f64) -> f64 {
    (-softplus(-x)).exp()
}

// ── Tensor ──────────────────────────────────────────────────────────

/// Dense row-major tensor of 64-bit reals. A scalar has the empty shape.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::Dimension(format!(
                "shape {:?} implies {} elements, got {}",
                shape,
                numel,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![v],
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Scalar extraction; errors unless the tensor holds exactly one value.
    pub fn item(&self) -> Result<f64> {
        if self.numel() == 1 {
            Ok(self.data[0])
        } else {
            Err(Error::Contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )))
        }
    }

    fn dims2(&self) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::Dimension(format!("expected matrix, got {other:?}"))),
        }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let (_, c) = self.dims2().expect("row() on non-matrix");
        &self.data[r * c..(r + 1) * c]
    }

    /// Standard matrix product.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (m, k) = self.dims2()?;
        let (k2, n) = other.dims2()?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner dims {k} vs {k2}"
            )));
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let brow = &other.data[p * n..(p + 1) * n];
                let orow = &mut out[i * n..(i + 1) * n];
                for (o, &b) in orow.iter_mut().zip(brow) {
                    *o += a * b;
                }
            }
        }
        Tensor::matrix(m, n, out)
    }

    pub fn transposed(&self) -> Result<Tensor> {
        let (m, n) = self.dims2()?;
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = self.data[i * n + j];
            }
        }
        Tensor::matrix(n, m, out)
    }

    /// Row-wise log-softmax; a 1-D tensor is treated as a single row.
    pub fn log_softmax_rows(&self) -> Tensor {
        match self.shape.as_slice() {
            [_] => Tensor::vector(log_softmax_slice(&self.data)),
            [r, c] => {
                let mut out = Vec::with_capacity(self.data.len());
                for i in 0..*r {
                    out.extend(log_softmax_slice(&self.data[i * c..(i + 1) * c]));
                }
                Tensor::matrix(*r, *c, out).expect("shape preserved")
            }
            other => panic!("log_softmax_rows on shape {other:?}"),
        }
    }
}

// ── Tape ────────────────────────────────────────────────────────────

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(NodeId, NodeId),
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    /// Broadcast-add a length-n vector onto each row of an m×n matrix.
    AddBias(NodeId, NodeId),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Softplus(NodeId),
    LogSoftmaxRows(NodeId),
    SumAll(NodeId),
    /// out[r] = a[r, cols[r]] for a matrix a.
    GatherCols(NodeId, Vec<usize>),
    SliceRows(NodeId, usize, usize),
    /// Row r of the output concatenates table rows `windows[r]`.
    GatherRowsConcat(NodeId, Vec<Vec<usize>>),
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records primitive operations in topological order; operands always
/// precede the nodes that consume them.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Per-node gradients produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Tensor>,
}

impl Gradients {
    pub fn wrt(&self, id: NodeId) -> &Tensor {
        &self.grads[id.0]
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    /// Record an input value. Leaves receive gradients but have no parents.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    /// Alias of [`Tape::leaf`] for values whose gradient is never read.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.leaf(value)
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    fn zip_same_shape(&self, a: NodeId, b: NodeId, what: &str) -> Result<()> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(Error::Dimension(format!(
                "{what} on shapes {:?} vs {:?}",
                self.value(a).shape(),
                self.value(b).shape()
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same_shape(a, b, "sub")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x - y)
            .collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.zip_same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        if self.value(bias).shape() != [n] {
            return Err(Error::Dimension(format!(
                "bias shape {:?} does not match {n} columns",
                self.value(bias).shape()
            )));
        }
        let mut data = self.value(a).data().to_vec();
        let b = self.value(bias).data();
        for r in 0..m {
            for c in 0..n {
                data[r * n + c] += b[c];
            }
        }
        let v = Tensor::matrix(m, n, data)?;
        Ok(self.push(v, Op::AddBias(a, bias)))
    }

    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x * c).collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data).expect("shape preserved");
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: NodeId, c: f64) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x + c).collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data).expect("shape preserved");
        self.push(v, Op::AddScalar(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x.tanh()).collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data).expect("shape preserved");
        self.push(v, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|x| x.exp()).collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data).expect("shape preserved");
        self.push(v, Op::Exp(a))
    }

    pub fn softplus_node(&mut self, a: NodeId) -> NodeId {
        let data = self.value(a).data().iter().map(|&x| softplus(x)).collect();
        let v = Tensor::new(self.value(a).shape().to_vec(), data).expect("shape preserved");
        self.push(v, Op::Softplus(a))
    }

    pub fn log_softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = self.value(a).log_softmax_rows();
        self.push(v, Op::LogSoftmaxRows(a))
    }

    pub fn sum_all(&mut self, a: NodeId) -> NodeId {
        let v = Tensor::scalar(self.value(a).data().iter().sum());
        self.push(v, Op::SumAll(a))
    }

    pub fn gather_cols(&mut self, a: NodeId, cols: Vec<usize>) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        if cols.len() != m {
            return Err(Error::Dimension(format!(
                "gather_cols wants {m} indices, got {}",
                cols.len()
            )));
        }
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::Dimension(format!(
                "gather_cols index {bad} out of {n} columns"
            )));
        }
        let data = cols
            .iter()
            .enumerate()
            .map(|(r, &c)| self.value(a).data()[r * n + c])
            .collect();
        let v = Tensor::vector(data);
        Ok(self.push(v, Op::GatherCols(a, cols)))
    }

    pub fn slice_rows(&mut self, a: NodeId, start: usize, end: usize) -> Result<NodeId> {
        let (m, n) = self.value(a).dims2()?;
        if start >= end || end > m {
            return Err(Error::Dimension(format!(
                "slice_rows {start}..{end} of {m} rows"
            )));
        }
        let data = self.value(a).data()[start * n..end * n].to_vec();
        let v = Tensor::matrix(end - start, n, data)?;
        Ok(self.push(v, Op::SliceRows(a, start, end)))
    }

    /// Output row r concatenates the table rows listed in `windows[r]`.
    /// Every window must have the same width.
    pub fn gather_rows_concat(&mut self, table: NodeId, windows: Vec<Vec<usize>>) -> Result<NodeId> {
        let (rows, d) = self.value(table).dims2()?;
        if windows.is_empty() {
            return Err(Error::Contract("gather_rows_concat on empty window list".into()));
        }
        let w = windows[0].len();
        if w == 0 || windows.iter().any(|win| win.len() != w) {
            return Err(Error::Dimension("windows must share a nonzero width".into()));
        }
        if let Some(&bad) = windows.iter().flatten().find(|&&r| r >= rows) {
            return Err(Error::Dimension(format!(
                "gather_rows_concat row {bad} out of {rows}"
            )));
        }
        let t = windows.len();
        let mut data = Vec::with_capacity(t * w * d);
        for win in &windows {
            for &r in win {
                data.extend_from_slice(self.value(table).row(r));
            }
        }
        let v = Tensor::matrix(t, w * d, data)?;
        Ok(self.push(v, Op::GatherRowsConcat(table, windows)))
    }

    /// Reverse pass from a scalar loss. Each recorded node is visited exactly
    /// once; repeated calls recompute from scratch and yield identical results.
    pub fn backward(&self, loss: NodeId) -> Result<Gradients> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward from non-scalar node of shape {:?}",
                self.value(loss).shape()
            )));
        }
        let mut grads: Vec<Tensor> = self
            .nodes
            .iter()
            .map(|n| Tensor::zeros(n.value.shape().to_vec()))
            .collect();
        grads[loss.0].data_mut()[0] = 1.0;

        for idx in (0..self.nodes.len()).rev() {
            let node = &self.nodes[idx];
            if grads[idx].data().iter().all(|&g| g == 0.0) {
                continue;
            }
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let g = grads[idx].clone();
                    let da = g.matmul(self.value(*b).transposed()?.as_ref())?;
                    let db = self.value(*a).transposed()?.matmul(&g)?;
                    accumulate(&mut grads[a.0], &da);
                    accumulate(&mut grads[b.0], &db);
                }
                Op::Add(a, b) => {
                    let g = grads[idx].clone();
                    accumulate(&mut grads[a.0], &g);
                    accumulate(&mut grads[b.0], &g);
                }
                Op::Sub(a, b) => {
                    let g = grads[idx].clone();
                    accumulate(&mut grads[a.0], &g);
                    for (dst, src) in grads[b.0].data_mut().iter_mut().zip(g.data()) {
                        *dst -= src;
                    }
                }
                Op::Mul(a, b) => {
                    let g = grads[idx].clone();
                    let (av, bv) = (self.value(*a).clone(), self.value(*b).clone());
                    for ((dst, src), x) in grads[a.0].data_mut().iter_mut().zip(g.data()).zip(bv.data()) {
                        *dst += src * x;
                    }
                    for ((dst, src), x) in grads[b.0].data_mut().iter_mut().zip(g.data()).zip(av.data()) {
                        *dst += src * x;
                    }
                }
                Op::AddBias(a, bias) => {
                    let g = grads[idx].clone();
                    accumulate(&mut grads[a.0], &g);
                    let (m, n) = g.dims2()?;
                    let dst = grads[bias.0].data_mut();
                    for r in 0..m {
                        for c in 0..n {
                            dst[c] += g.data()[r * n + c];
                        }
                    }
                }
                Op::Scale(a, c) => {
                    let g = grads[idx].clone();
                    for (dst, src) in grads[a.0].data_mut().iter_mut().zip(g.data()) {
                        *dst += src * c;
                    }
                }
                Op::AddScalar(a) => {
                    let g = grads[idx].clone();
                    accumulate(&mut grads[a.0], &g);
                }
                Op::Tanh(a) => {
                    let g = grads[idx].clone();
                    let y = node.value.clone();
                    for ((dst, src), t) in grads[a.0].data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *dst += src * (1.0 - t * t);
                    }
                }
                Op::Exp(a) => {
                    let g = grads[idx].clone();
                    let y = node.value.clone();
                    for ((dst, src), e) in grads[a.0].data_mut().iter_mut().zip(g.data()).zip(y.data()) {
                        *dst += src * e;
                    }
                }
                Op::Softplus(a) => {
                    let g = grads[idx].clone();
                    let x = self.value(*a).clone();
                    for ((dst, src), v) in grads[a.0].data_mut().iter_mut().zip(g.data()).zip(x.data()) {
                        *dst += src * sigmoid(*v);
                    }
                }
                Op::LogSoftmaxRows(a) => {
                    // d z_j = g_j - softmax(z)_j * sum_i g_i, per row;
                    // softmax is exp of the stored output.
                    let g = grads[idx].clone();
                    let s = node.value.clone();
                    let (rows, cols) = match s.shape() {
                        [c] => (1usize, *c),
                        [r, c] => (*r, *c),
                        other => {
                            return Err(Error::Dimension(format!(
                                "log_softmax backward on shape {other:?}"
                            )))
                        }
                    };
                    let dst = grads[a.0].data_mut();
                    for r in 0..rows {
                        let gr = &g.data()[r * cols..(r + 1) * cols];
                        let sr = &s.data()[r * cols..(r + 1) * cols];
                        let gsum: f64 = gr.iter().sum();
                        for c in 0..cols {
                            dst[r * cols + c] += gr[c] - sr[c].exp() * gsum;
                        }
                    }
                }
                Op::SumAll(a) => {
                    let g = grads[idx].data()[0];
                    for dst in grads[a.0].data_mut() {
                        *dst += g;
                    }
                }
                Op::GatherCols(a, cols) => {
                    let g = grads[idx].clone();
                    let (_, n) = self.value(*a).dims2()?;
                    let dst = grads[a.0].data_mut();
                    for (r, &c) in cols.iter().enumerate() {
                        dst[r * n + c] += g.data()[r];
                    }
                }
                Op::SliceRows(a, start, _end) => {
                    let g = grads[idx].clone();
                    let (_, n) = self.value(*a).dims2()?;
                    let dst = grads[a.0].data_mut();
                    for (i, v) in g.data().iter().enumerate() {
                        dst[start * n + i] += v;
                    }
                }
                Op::GatherRowsConcat(table, windows) => {
                    let g = grads[idx].clone();
                    let (_, d) = self.value(*table).dims2()?;
                    let w = windows[0].len();
                    let dst = grads[table.0].data_mut();
                    for (t, win) in windows.iter().enumerate() {
                        for (j, &row) in win.iter().enumerate() {
                            let src = &g.data()[t * w * d + j * d..t * w * d + (j + 1) * d];
                            for (k, v) in src.iter().enumerate() {
                                dst[row * d + k] += v;
                            }
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads })
    }
}

fn accumulate(dst: &mut Tensor, src: &Tensor) {
    for (d, s) in dst.data_mut().iter_mut().zip(src.data()) {
        *d += s;
    }
}

impl AsRef<Tensor> for Tensor {
    fn as_ref(&self) -> &Tensor {
        self
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn rand_vec(r: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| r.gen_range(-2.0..2.0)).collect()
    }

    #[test]
    fn matmul_identity() {
        let eye = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let a = Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(eye.matmul(&a).unwrap(), a);
    }

    #[test]
    fn matmul_projector() {
        let p = Tensor::matrix(2, 2, vec![1.0, 0.0, 0.0, 0.0]).unwrap();
        let v = Tensor::matrix(2, 1, vec![5.0, 7.0]).unwrap();
        let out = p.matmul(&v).unwrap();
        assert_eq!(out.data(), &[5.0, 0.0]);
    }

    #[test]
    fn matmul_matches_triple_loop_oracle() {
        let mut r = rng(7);
        let a = Tensor::matrix(3, 4, rand_vec(&mut r, 12)).unwrap();
        let b = Tensor::matrix(4, 2, rand_vec(&mut r, 8)).unwrap();
        let got = a.matmul(&b).unwrap();
        // Naive triple loop, independent of the accumulation order above.
        for i in 0..3 {
            for j in 0..2 {
                let mut s = 0.0;
                for p in 0..4 {
                    s += a.data()[i * 4 + p] * b.data()[p * 2 + j];
                }
                assert!((got.data()[i * 2 + j] - s).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_shape_mismatch_is_dimension_error() {
        let a = Tensor::matrix(2, 3, vec![0.0; 6]).unwrap();
        let b = Tensor::matrix(2, 2, vec![0.0; 4]).unwrap();
        assert!(matches!(a.matmul(&b), Err(Error::Dimension(_))));
    }

    #[test]
    fn log_softmax_symmetric_pair() {
        let s = log_softmax_slice(&[0.0, 0.0]);
        let expect = -(2.0f64).ln();
        assert!((s[0] - expect).abs() < 1e-15);
        assert!((s[1] - expect).abs() < 1e-15);
    }

    #[test]
    fn log_softmax_survives_huge_logits() {
        let s = log_softmax_slice(&[1000.0, 0.0]);
        assert!(s.iter().all(|v| v.is_finite()));
        assert!(s[0].abs() < 1e-12);
        assert!((s[1] + 1000.0).abs() < 1e-9);
    }

    /// High-precision oracle: sorts the exp terms by magnitude and sums them
    /// with Neumaier compensation before taking the log.
    fn logsumexp_compensated(z: &[f64]) -> f64 {
        let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut terms: Vec<f64> = z.iter().map(|&v| (v - m).exp()).collect();
        terms.sort_by(|a, b| a.partial_cmp(b).unwrap());
        let mut sum = 0.0;
        let mut comp = 0.0;
        for t in terms {
            let next = sum + t;
            if sum.abs() >= t.abs() {
                comp += (sum - next) + t;
            } else {
                comp += (t - next) + sum;
            }
            sum = next;
        }
        m + (sum + comp).ln()
    }

    #[test]
    fn log_softmax_matches_compensated_accumulation() {
        let mut r = rng(13);
        for _ in 0..50 {
            let z = rand_vec(&mut r, 8);
            let lse = logsumexp_compensated(&z);
            let s = log_softmax_slice(&z);
            for (si, zi) in s.iter().zip(&z) {
                assert!((si - (zi - lse)).abs() < 1e-12);
            }
        }
    }

    proptest! {
        #[test]
        fn log_softmax_normalizes(z in proptest::collection::vec(-50.0f64..50.0, 1..32)) {
            let s = log_softmax_slice(&z);
            prop_assert!(logsumexp(&s).abs() < 1e-12);
        }
    }

    #[test]
    fn backward_of_sum_is_ones() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, -2.0, 3.0]));
        let loss = tape.sum_all(p);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(p).data(), &[1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_of_half_square_norm_is_identity() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![0.5, -1.5, 2.0]));
        let sq = tape.mul(p, p).unwrap();
        let s = tape.sum_all(sq);
        let loss = tape.scale(s, 0.5);
        let g = tape.backward(loss).unwrap();
        assert_eq!(g.wrt(p).data(), &[0.5, -1.5, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(tape.backward(p), Err(Error::Contract(_))));
    }

    #[test]
    fn backward_twice_is_identical() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::vector(vec![0.3, -0.7, 1.1, 0.2]));
        let s = tape.log_softmax_rows(p);
        let picked = tape.sum_all(s);
        let g1 = tape.backward(picked).unwrap();
        let g2 = tape.backward(picked).unwrap();
        assert_eq!(g1.wrt(p).data(), g2.wrt(p).data());
    }

    /// Central finite differences of a scalar function of a flat parameter
    /// vector.
    fn central_diff(f: &dyn Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
        (0..x.len())
            .map(|i| {
                let mut hi = x.to_vec();
                let mut lo = x.to_vec();
                hi[i] += h;
                lo[i] -= h;
                (f(&hi) - f(&lo)) / (2.0 * h)
            })
            .collect()
    }

    fn max_rel_err(got: &[f64], want: &[f64]) -> f64 {
        got.iter()
            .zip(want)
            .map(|(g, w)| (g - w).abs() / w.abs().max(1e-3))
            .fold(0.0, f64::max)
    }

    #[test]
    fn composed_log_softmax_gather_sum_matches_central_differences() {
        let mut r = rng(21);
        let x = rand_vec(&mut r, 12);
        let idx = vec![2usize, 0, 3];
        let f = |p: &[f64]| {
            let mut tape = Tape::new();
            let leaf = tape.leaf(Tensor::matrix(3, 4, p.to_vec()).unwrap());
            let s = tape.log_softmax_rows(leaf);
            let g = tape.gather_cols(s, idx.clone()).unwrap();
            let loss = tape.sum_all(g);
            tape.value(loss).item().unwrap()
        };
        let mut tape = Tape::new();
        let leaf = tape.leaf(Tensor::matrix(3, 4, x.clone()).unwrap());
        let s = tape.log_softmax_rows(leaf);
        let g = tape.gather_cols(s, idx.clone()).unwrap();
        let loss = tape.sum_all(g);
        let grads = tape.backward(loss).unwrap();
        let fd = central_diff(&f, &x, 1e-5);
        assert!(max_rel_err(grads.wrt(leaf).data(), &fd) < 1e-6);
    }

    /// One composite graph touching every differentiable op, finite-diff
    /// checked across 100 seeds.
    #[test]
    fn all_ops_match_central_differences_over_seeds() {
        for seed in 0..100u64 {
            let mut r = rng(seed);
            let table = rand_vec(&mut r, 4 * 3); // 4 rows, width 3
            let w = rand_vec(&mut r, 6 * 5); // (2*3)×5
            let bias = rand_vec(&mut r, 5);
            let other = rand_vec(&mut r, 3 * 5);
            let n_table = table.len();
            let n_w = w.len();
            let n_bias = bias.len();

            let eval = |p: &[f64]| -> (f64, Option<(Vec<f64>, Vec<f64>, Vec<f64>, Vec<f64>)>) {
                let (tb, rest) = p.split_at(n_table);
                let (wv, rest) = rest.split_at(n_w);
                let (bv, ov) = rest.split_at(n_bias);
                let mut tape = Tape::new();
                let t = tape.leaf(Tensor::matrix(4, 3, tb.to_vec()).unwrap());
                let wl = tape.leaf(Tensor::matrix(6, 5, wv.to_vec()).unwrap());
                let bl = tape.leaf(Tensor::vector(bv.to_vec()));
                let ol = tape.leaf(Tensor::matrix(3, 5, ov.to_vec()).unwrap());
                let feats = tape
                    .gather_rows_concat(t, vec![vec![0, 1], vec![2, 3], vec![1, 1]])
                    .unwrap();
                let mm = tape.matmul(feats, wl).unwrap();
                let pre = tape.add_bias(mm, bl).unwrap();
                let h = tape.tanh(pre);
                let mixed = tape.add(h, ol).unwrap();
                let diff = tape.sub(mixed, ol).unwrap();
                let prod = tape.mul(diff, mixed).unwrap();
                let sc = tape.scale(prod, 0.25);
                let shifted = tape.add_scalar(sc, 0.1);
                let s = tape.log_softmax_rows(shifted);
                let sl = tape.slice_rows(s, 0, 2).unwrap();
                let e = tape.exp(sl);
                let sp = tape.softplus_node(e);
                let picked = tape.gather_cols(sp, vec![1, 4]).unwrap();
                let total = tape.sum_all(picked);
                let loss = tape.scale(total, 0.5);
                let value = tape.value(loss).item().unwrap();
                let grads = tape.backward(loss).unwrap();
                (
                    value,
                    Some((
                        grads.wrt(t).data().to_vec(),
                        grads.wrt(wl).data().to_vec(),
                        grads.wrt(bl).data().to_vec(),
                        grads.wrt(ol).data().to_vec(),
                    )),
                )
            };

            let mut flat = Vec::new();
            flat.extend_from_slice(&table);
            flat.extend_from_slice(&w);
            flat.extend_from_slice(&bias);
            flat.extend_from_slice(&other);

            let (_, grads) = eval(&flat);
            let (gt, gw, gb, go) = grads.unwrap();
            let mut analytic = Vec::new();
            analytic.extend(gt);
            analytic.extend(gw);
            analytic.extend(gb);
            analytic.extend(go);

            let f = |p: &[f64]| eval(p).0;
            let fd = central_diff(&f, &flat, 1e-5);
            let err = max_rel_err(&analytic, &fd);
            assert!(err < 1e-6, "seed {seed}: max rel err {err}");
        }
    }

    #[test]
    fn finite_values_preserved_by_public_ops() {
        let mut r = rng(3);
        let a = Tensor::matrix(4, 4, rand_vec(&mut r, 16)).unwrap();
        let b = Tensor::matrix(4, 4, rand_vec(&mut r, 16)).unwrap();
        assert!(a.matmul(&b).unwrap().all_finite());
        assert!(a.log_softmax_rows().all_finite());
        assert!(a.transposed().unwrap().all_finite());
    }
}
