//! Dense f64 tensors and a define-by-run reverse-mode autodiff tape.
//!
//! The tape is rebuilt for every forward pass. Parameters live outside the
//! tape (see [`crate::optim::Param`]); a forward pass copies their values in
//! as leaves and the caller reads gradients back out after `backward`.

use crate::error::{AlktError, Result};

/// Immutable dense n-dimensional array, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(AlktError::invalid(format!(
                "tensor extents must be positive, got {shape:?}"
            )));
        }
        if numel != data.len() {
            return Err(AlktError::invalid(format!(
                "shape {shape:?} implies {numel} elements, got {}",
                data.len()
            )));
        }
        Ok(Tensor { shape, data })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn scalar(v: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![v],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn item(&self) -> f64 {
        assert_eq!(self.data.len(), 1, "item() on non-scalar tensor");
        self.data[0]
    }

    /// Checked finiteness scan (NaN/Inf detection).
    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[f64] {
        assert_eq!(self.shape.len(), 2);
        let w = self.shape[1];
        &self.data[i * w..(i + 1) * w]
    }

    /// Select rows along the first axis.
    pub fn gather_rows(&self, idxs: &[usize]) -> Tensor {
        let inner: usize = self.shape[1..].iter().product();
        let mut data = Vec::with_capacity(idxs.len() * inner);
        for &i in idxs {
            data.extend_from_slice(&self.data[i * inner..(i + 1) * inner]);
        }
        let mut shape = self.shape.clone();
        shape[0] = idxs.len();
        Tensor { shape, data }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    AddChanBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Relu(Var),
    Conv2d {
        x: Var,
        k: Var,
        stride: usize,
        pad: usize,
    },
    GlobalAvgPool(Var),
    Reshape(Var),
    Square(Var),
    SqrtGuard(Var),
    Scale(Var, f64),
    SumAxis(Var, usize),
    SumAll(Var),
    RowL2Normalize(Var),
    Softmax(Var),
    LogSoftmax(Var),
    NllMean(Var, Vec<usize>),
    MseLoss(Var, Var),
    L1Loss(Var, Var),
}

struct Node {
    op: Op,
    shape: Vec<usize>,
    value: Vec<f64>,
    grad: Vec<f64>,
}

/// Reverse-mode tape. Nodes are appended in topological order by
/// construction, so backward is a single reverse sweep.
pub struct Tape {
    nodes: Vec<Node>,
}

const NORM_GUARD: f64 = 1e-12;

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, value: Vec<f64>) -> Var {
        let grad = vec![0.0; value.len()];
        self.nodes.push(Node {
            op,
            shape,
            value,
            grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, t: &Tensor) -> Var {
        self.push(Op::Leaf, t.shape.clone(), t.data.clone())
    }

    pub fn leaf_from(&mut self, shape: Vec<usize>, data: Vec<f64>) -> Result<Var> {
        let t = Tensor::new(shape, data)?;
        Ok(self.leaf(&t))
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn grad(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].grad
    }

    pub fn tensor(&self, v: Var) -> Tensor {
        Tensor {
            shape: self.nodes[v.0].shape.clone(),
            data: self.nodes[v.0].value.clone(),
        }
    }

    fn mismatch(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AlktError {
        AlktError::ShapeMismatch {
            op,
            lhs: lhs.to_vec(),
            rhs: rhs.to_vec(),
        }
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<Vec<usize>> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sa != sb {
            return Err(Self::mismatch(op, sa, sb));
        }
        Ok(sa.to_vec())
    }

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            return Err(Self::mismatch("matmul", &sa, &sb));
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![0.0; m * n];
        {
            let av = self.value(a);
            let bv = self.value(b);
            for i in 0..m {
                for p in 0..k {
                    let aip = av[i * k + p];
                    if aip == 0.0 {
                        continue;
                    }
                    let brow = &bv[p * n..(p + 1) * n];
                    let orow = &mut out[i * n..(i + 1) * n];
                    for j in 0..n {
                        orow[j] += aip * brow[j];
                    }
                }
            }
        }
        Ok(self.push(Op::MatMul(a, b), vec![m, n], out))
    }

    /// `[b,n] + [n]` broadcast over rows.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() != 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Self::mismatch("add-bias", &sx, &sb));
        }
        let n = sb[0];
        let mut out = self.value(x).to_vec();
        let bv = self.value(b).to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bv[i % n];
        }
        Ok(self.push(Op::AddBias(x, b), sx, out))
    }

    /// `[b,c,rest..] + [c]` broadcast per channel.
    pub fn add_chan_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (sx, sb) = (self.shape(x).to_vec(), self.shape(b).to_vec());
        if sx.len() < 2 || sb.len() != 1 || sx[1] != sb[0] {
            return Err(Self::mismatch("add-chan-bias", &sx, &sb));
        }
        let c = sb[0];
        let inner: usize = sx[2..].iter().product();
        let mut out = self.value(x).to_vec();
        let bv = self.value(b).to_vec();
        for (i, v) in out.iter_mut().enumerate() {
            *v += bv[(i / inner) % c];
        }
        Ok(self.push(Op::AddChanBias(x, b), sx, out))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("add", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x + y)
            .collect();
        Ok(self.push(Op::Add(a, b), s, out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("sub", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x - y)
            .collect();
        Ok(self.push(Op::Sub(a, b), s, out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("mul", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x * y)
            .collect();
        Ok(self.push(Op::Mul(a, b), s, out))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        let s = self.same_shape("div", a, b)?;
        let out: Vec<f64> = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| x / y)
            .collect();
        Ok(self.push(Op::Div(a, b), s, out))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let out: Vec<f64> = self.value(x).iter().map(|&v| v.max(0.0)).collect();
        self.push(Op::Relu(x), s, out)
    }

    /// 2-D convolution, square kernel, zero padding, stride 1 or 2.
    /// `x: [b,c,h,w]`, `k: [o,c,kh,kw]` with `kh == kw`.
    pub fn conv2d(&mut self, x: Var, k: Var, stride: usize, pad: usize) -> Result<Var> {
        let (sx, sk) = (self.shape(x).to_vec(), self.shape(k).to_vec());
        if sx.len() != 4 || sk.len() != 4 || sx[1] != sk[1] || sk[2] != sk[3] {
            return Err(Self::mismatch("conv2d", &sx, &sk));
        }
        if stride != 1 && stride != 2 {
            return Err(AlktError::invalid(format!(
                "conv2d stride must be 1 or 2, got {stride}"
            )));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let (o, kh) = (sk[0], sk[2]);
        if h + 2 * pad < kh || w + 2 * pad < kh {
            return Err(Self::mismatch("conv2d", &sx, &sk));
        }
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kh) / stride + 1;
        let mut out = vec![0.0; b * o * ho * wo];
        {
            let xv = self.value(x);
            let kv = self.value(k);
            for bi in 0..b {
                for oi in 0..o {
                    for i in 0..ho {
                        for j in 0..wo {
                            let mut acc = 0.0;
                            for ci in 0..c {
                                for u in 0..kh {
                                    let hi = (i * stride + u) as isize - pad as isize;
                                    if hi < 0 || hi >= h as isize {
                                        continue;
                                    }
                                    for v in 0..kh {
                                        let wi = (j * stride + v) as isize - pad as isize;
                                        if wi < 0 || wi >= w as isize {
                                            continue;
                                        }
                                        acc += xv[((bi * c + ci) * h + hi as usize) * w
                                            + wi as usize]
                                            * kv[((oi * c + ci) * kh + u) * kh + v];
                                    }
                                }
                            }
                            out[((bi * o + oi) * ho + i) * wo + j] = acc;
                        }
                    }
                }
            }
        }
        Ok(self.push(
            Op::Conv2d { x, k, stride, pad },
            vec![b, o, ho, wo],
            out,
        ))
    }

    /// `[b,c,h,w] -> [b,c]`, mean over spatial locations.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 4 {
            return Err(Self::mismatch("global-avg-pool", &sx, &[]));
        }
        let (b, c, h, w) = (sx[0], sx[1], sx[2], sx[3]);
        let area = (h * w) as f64;
        let xv = self.value(x);
        let mut out = vec![0.0; b * c];
        for bc in 0..b * c {
            out[bc] = xv[bc * h * w..(bc + 1) * h * w].iter().sum::<f64>() / area;
        }
        Ok(self.push(Op::GlobalAvgPool(x), vec![b, c], out))
    }

    pub fn reshape(&mut self, x: Var, new_shape: Vec<usize>) -> Result<Var> {
        let numel: usize = new_shape.iter().product();
        if numel != self.value(x).len() {
            return Err(Self::mismatch("reshape", self.shape(x), &new_shape));
        }
        let out = self.value(x).to_vec();
        Ok(self.push(Op::Reshape(x), new_shape, out))
    }

    /// `[b, rest..] -> [b, prod(rest)]`
    pub fn flatten(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let inner: usize = s[1..].iter().product();
        self.reshape(x, vec![s[0], inner])
    }

    pub fn square(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let out: Vec<f64> = self.value(x).iter().map(|v| v * v).collect();
        self.push(Op::Square(x), s, out)
    }

    /// Elementwise sqrt with a guarded derivative at 0.
    pub fn sqrt_guard(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        let out: Vec<f64> = self.value(x).iter().map(|v| v.max(0.0).sqrt()).collect();
        self.push(Op::SqrtGuard(x), s, out)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let s = self.shape(x).to_vec();
        let out: Vec<f64> = self.value(x).iter().map(|v| v * c).collect();
        self.push(Op::Scale(x, c), s, out)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if axis >= sx.len() {
            return Err(AlktError::invalid(format!(
                "sum-axis {axis} out of range for shape {sx:?}"
            )));
        }
        let outer: usize = sx[..axis].iter().product();
        let mid = sx[axis];
        let inner: usize = sx[axis + 1..].iter().product();
        let mut out_shape = sx.clone();
        out_shape.remove(axis);
        if out_shape.is_empty() {
            out_shape.push(1);
        }
        let xv = self.value(x);
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for m in 0..mid {
                for i in 0..inner {
                    out[o * inner + i] += xv[(o * mid + m) * inner + i];
                }
            }
        }
        Ok(self.push(Op::SumAxis(x, axis), out_shape, out))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s: f64 = self.value(x).iter().sum();
        self.push(Op::SumAll(x), vec![1], vec![s])
    }

    /// L2 norm of the whole tensor as a scalar.
    pub fn l2_norm(&mut self, x: Var) -> Var {
        let sq = self.square(x);
        let s = self.sum_all(sq);
        self.sqrt_guard(s)
    }

    /// Normalize each row of `[b,s]` to unit L2 norm. Rows with norm below
    /// 1e-12 pass through unnormalized (zero-vector sentinel).
    pub fn row_l2_normalize(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Self::mismatch("row-l2-normalize", &sx, &[]));
        }
        let (b, s) = (sx[0], sx[1]);
        let xv = self.value(x);
        let mut out = vec![0.0; b * s];
        for r in 0..b {
            let row = &xv[r * s..(r + 1) * s];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm < NORM_GUARD {
                out[r * s..(r + 1) * s].copy_from_slice(row);
            } else {
                for j in 0..s {
                    out[r * s + j] = row[j] / norm;
                }
            }
        }
        Ok(self.push(Op::RowL2Normalize(x), sx, out))
    }

    /// Row-wise softmax of `[b,k]`, max-subtracted for stability.
    pub fn softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Self::mismatch("softmax", &sx, &[]));
        }
        let (b, k) = (sx[0], sx[1]);
        let xv = self.value(x);
        let mut out = vec![0.0; b * k];
        for r in 0..b {
            softmax_row(&xv[r * k..(r + 1) * k], &mut out[r * k..(r + 1) * k]);
        }
        Ok(self.push(Op::Softmax(x), sx, out))
    }

    pub fn log_softmax(&mut self, x: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 2 {
            return Err(Self::mismatch("log-softmax", &sx, &[]));
        }
        let (b, k) = (sx[0], sx[1]);
        let xv = self.value(x);
        let mut out = vec![0.0; b * k];
        for r in 0..b {
            let row = &xv[r * k..(r + 1) * k];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|v| (v - mx).exp()).sum::<f64>().ln() + mx;
            for j in 0..k {
                out[r * k + j] = row[j] - lse;
            }
        }
        Ok(self.push(Op::LogSoftmax(x), sx, out))
    }

    /// Mean negative log-likelihood over the batch given log-probabilities.
    pub fn cross_entropy(&mut self, log_probs: Var, labels: &[usize]) -> Result<Var> {
        let sx = self.shape(log_probs).to_vec();
        if sx.len() != 2 || sx[0] != labels.len() {
            return Err(Self::mismatch("cross-entropy", &sx, &[labels.len()]));
        }
        let (b, k) = (sx[0], sx[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= k) {
            return Err(AlktError::invalid(format!(
                "label {bad} out of range for {k} classes"
            )));
        }
        let xv = self.value(log_probs);
        let loss = -labels
            .iter()
            .enumerate()
            .map(|(r, &y)| xv[r * k + y])
            .sum::<f64>()
            / b as f64;
        Ok(self.push(
            Op::NllMean(log_probs, labels.to_vec()),
            vec![1],
            vec![loss],
        ))
    }

    /// Mean squared error over all elements, as a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mse", a, b)?;
        let n = self.value(a).len() as f64;
        let loss = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y) * (x - y))
            .sum::<f64>()
            / n;
        Ok(self.push(Op::MseLoss(a, b), vec![1], vec![loss]))
    }

    /// Mean absolute error over all elements, as a scalar.
    pub fn l1(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("l1", a, b)?;
        let n = self.value(a).len() as f64;
        let loss = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(x, y)| (x - y).abs())
            .sum::<f64>()
            / n;
        Ok(self.push(Op::L1Loss(a, b), vec![1], vec![loss]))
    }

    /// Reverse sweep from a scalar loss. Grads accumulate into node `grad`
    /// buffers; callers copy them out for parameters.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).len() != 1 {
            return Err(AlktError::invalid(format!(
                "backward requires a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        for node in self.nodes.iter_mut() {
            node.grad.iter_mut().for_each(|g| *g = 0.0);
        }
        self.nodes[loss.0].grad[0] = 1.0;
        for idx in (0..=loss.0).rev() {
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, n) = (self.nodes[idx].shape[0], self.nodes[idx].shape[1]);
                    let k = self.nodes[a.0].shape[1];
                    let g = self.nodes[idx].grad.clone();
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    {
                        let da = &mut self.nodes[a.0].grad;
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = 0.0;
                                for j in 0..n {
                                    acc += g[i * n + j] * bv[p * n + j];
                                }
                                da[i * k + p] += acc;
                            }
                        }
                    }
                    {
                        let db = &mut self.nodes[b.0].grad;
                        for p in 0..k {
                            for i in 0..m {
                                let aip = av[i * k + p];
                                if aip == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    db[p * n + j] += aip * g[i * n + j];
                                }
                            }
                        }
                    }
                }
                Op::AddBias(x, bias) => {
                    let g = self.nodes[idx].grad.clone();
                    let n = self.nodes[bias.0].shape[0];
                    for (i, gi) in g.iter().enumerate() {
                        self.nodes[x.0].grad[i] += gi;
                    }
                    for (i, gi) in g.iter().enumerate() {
                        self.nodes[bias.0].grad[i % n] += gi;
                    }
                }
                Op::AddChanBias(x, bias) => {
                    let g = self.nodes[idx].grad.clone();
                    let c = self.nodes[bias.0].shape[0];
                    let inner: usize = self.nodes[idx].shape[2..].iter().product();
                    for (i, gi) in g.iter().enumerate() {
                        self.nodes[x.0].grad[i] += gi;
                        self.nodes[bias.0].grad[(i / inner) % c] += gi;
                    }
                }
                Op::Add(a, b) => {
                    let g = self.nodes[idx].grad.clone();
                    for (i, gi) in g.iter().enumerate() {
                        self.nodes[a.0].grad[i] += gi;
                    }
                    for (i, gi) in g.iter().enumerate() {
                        self.nodes[b.0].grad[i] += gi;
                    }
                }
                Op::Sub(a, b) => {
                    let g = self.nodes[idx].grad.clone();
                    for (i, gi) in g.iter().enumerate() {
                        self.nodes[a.0].grad[i] += gi;
                    }
                    for (i, gi) in g.iter().enumerate() {
                        self.nodes[b.0].grad[i] -= gi;
                    }
                }
                Op::Mul(a, b) => {
                    let g = self.nodes[idx].grad.clone();
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    for (i, gi) in g.iter().enumerate() {
                        self.nodes[a.0].grad[i] += gi * bv[i];
                    }
                    for (i, gi) in g.iter().enumerate() {
                        self.nodes[b.0].grad[i] += gi * av[i];
                    }
                }
                Op::Div(a, b) => {
                    let g = self.nodes[idx].grad.clone();
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    for (i, gi) in g.iter().enumerate() {
                        self.nodes[a.0].grad[i] += gi / bv[i];
                    }
                    for (i, gi) in g.iter().enumerate() {
                        self.nodes[b.0].grad[i] -= gi * av[i] / (bv[i] * bv[i]);
                    }
                }
                Op::Relu(x) => {
                    let g = self.nodes[idx].grad.clone();
                    let xv = self.nodes[x.0].value.clone();
                    for (i, gi) in g.iter().enumerate() {
                        if xv[i] > 0.0 {
                            self.nodes[x.0].grad[i] += gi;
                        }
                    }
                }
                Op::Conv2d { x, k, stride, pad } => {
                    let g = self.nodes[idx].grad.clone();
                    let os = self.nodes[idx].shape.clone();
                    let xs = self.nodes[x.0].shape.clone();
                    let ks = self.nodes[k.0].shape.clone();
                    let (b, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let (o, kh) = (ks[0], ks[2]);
                    let (ho, wo) = (os[2], os[3]);
                    let xv = self.nodes[x.0].value.clone();
                    let kv = self.nodes[k.0].value.clone();
                    let mut dx = vec![0.0; xv.len()];
                    let mut dk = vec![0.0; kv.len()];
                    for bi in 0..b {
                        for oi in 0..o {
                            for i in 0..ho {
                                for j in 0..wo {
                                    let go = g[((bi * o + oi) * ho + i) * wo + j];
                                    if go == 0.0 {
                                        continue;
                                    }
                                    for ci in 0..c {
                                        for u in 0..kh {
                                            let hi = (i * stride + u) as isize - pad as isize;
                                            if hi < 0 || hi >= h as isize {
                                                continue;
                                            }
                                            for v in 0..kh {
                                                let wi =
                                                    (j * stride + v) as isize - pad as isize;
                                                if wi < 0 || wi >= w as isize {
                                                    continue;
                                                }
                                                let xi = ((bi * c + ci) * h + hi as usize) * w
                                                    + wi as usize;
                                                let ki = ((oi * c + ci) * kh + u) * kh + v;
                                                dx[xi] += go * kv[ki];
                                                dk[ki] += go * xv[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                    for (i, d) in dx.iter().enumerate() {
                        self.nodes[x.0].grad[i] += d;
                    }
                    for (i, d) in dk.iter().enumerate() {
                        self.nodes[k.0].grad[i] += d;
                    }
                }
                Op::GlobalAvgPool(x) => {
                    let g = self.nodes[idx].grad.clone();
                    let xs = self.nodes[x.0].shape.clone();
                    let area = xs[2] * xs[3];
                    let inv = 1.0 / area as f64;
                    for (bc, gbc) in g.iter().enumerate() {
                        for p in 0..area {
                            self.nodes[x.0].grad[bc * area + p] += gbc * inv;
                        }
                    }
                }
                Op::Reshape(x) => {
                    let g = self.nodes[idx].grad.clone();
                    for (i, gi) in g.iter().enumerate() {
                        self.nodes[x.0].grad[i] += gi;
                    }
                }
                Op::Square(x) => {
                    let g = self.nodes[idx].grad.clone();
                    let xv = self.nodes[x.0].value.clone();
                    for (i, gi) in g.iter().enumerate() {
                        self.nodes[x.0].grad[i] += 2.0 * xv[i] * gi;
                    }
                }
                Op::SqrtGuard(x) => {
                    let g = self.nodes[idx].grad.clone();
                    let yv = self.nodes[idx].value.clone();
                    for (i, gi) in g.iter().enumerate() {
                        self.nodes[x.0].grad[i] += gi * 0.5 / yv[i].max(NORM_GUARD);
                    }
                }
                Op::Scale(x, c) => {
                    let g = self.nodes[idx].grad.clone();
                    for (i, gi) in g.iter().enumerate() {
                        self.nodes[x.0].grad[i] += c * gi;
                    }
                }
                Op::SumAxis(x, axis) => {
                    let g = self.nodes[idx].grad.clone();
                    let xs = self.nodes[x.0].shape.clone();
                    let outer: usize = xs[..axis].iter().product();
                    let mid = xs[axis];
                    let inner: usize = xs[axis + 1..].iter().product();
                    for o in 0..outer {
                        for m in 0..mid {
                            for i in 0..inner {
                                self.nodes[x.0].grad[(o * mid + m) * inner + i] +=
                                    g[o * inner + i];
                            }
                        }
                    }
                }
                Op::SumAll(x) => {
                    let g = self.nodes[idx].grad[0];
                    for d in self.nodes[x.0].grad.iter_mut() {
                        *d += g;
                    }
                }
                Op::RowL2Normalize(x) => {
                    let g = self.nodes[idx].grad.clone();
                    let yv = self.nodes[idx].value.clone();
                    let xv = self.nodes[x.0].value.clone();
                    let s = self.nodes[idx].shape[1];
                    let b = self.nodes[idx].shape[0];
                    for r in 0..b {
                        let row = &xv[r * s..(r + 1) * s];
                        let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                        if norm < NORM_GUARD {
                            for j in 0..s {
                                self.nodes[x.0].grad[r * s + j] += g[r * s + j];
                            }
                        } else {
                            let v = &yv[r * s..(r + 1) * s];
                            let gr = &g[r * s..(r + 1) * s];
                            let dot: f64 = v.iter().zip(gr).map(|(a, c)| a * c).sum();
                            for j in 0..s {
                                self.nodes[x.0].grad[r * s + j] +=
                                    (gr[j] - v[j] * dot) / norm;
                            }
                        }
                    }
                }
                Op::Softmax(x) => {
                    let g = self.nodes[idx].grad.clone();
                    let p = self.nodes[idx].value.clone();
                    let k = self.nodes[idx].shape[1];
                    let b = self.nodes[idx].shape[0];
                    for r in 0..b {
                        let pr = &p[r * k..(r + 1) * k];
                        let gr = &g[r * k..(r + 1) * k];
                        let dot: f64 = pr.iter().zip(gr).map(|(a, c)| a * c).sum();
                        for j in 0..k {
                            self.nodes[x.0].grad[r * k + j] += pr[j] * (gr[j] - dot);
                        }
                    }
                }
                Op::LogSoftmax(x) => {
                    let g = self.nodes[idx].grad.clone();
                    let lp = self.nodes[idx].value.clone();
                    let k = self.nodes[idx].shape[1];
                    let b = self.nodes[idx].shape[0];
                    for r in 0..b {
                        let gr = &g[r * k..(r + 1) * k];
                        let gsum: f64 = gr.iter().sum();
                        for j in 0..k {
                            self.nodes[x.0].grad[r * k + j] +=
                                gr[j] - lp[r * k + j].exp() * gsum;
                        }
                    }
                }
                Op::NllMean(x, labels) => {
                    let g = self.nodes[idx].grad[0];
                    let k = self.nodes[x.0].shape[1];
                    let b = labels.len() as f64;
                    for (r, &y) in labels.iter().enumerate() {
                        self.nodes[x.0].grad[r * k + y] -= g / b;
                    }
                }
                Op::MseLoss(a, b) => {
                    let g = self.nodes[idx].grad[0];
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    let n = av.len() as f64;
                    for i in 0..av.len() {
                        let d = 2.0 * (av[i] - bv[i]) / n * g;
                        self.nodes[a.0].grad[i] += d;
                        self.nodes[b.0].grad[i] -= d;
                    }
                }
                Op::L1Loss(a, b) => {
                    let g = self.nodes[idx].grad[0];
                    let av = self.nodes[a.0].value.clone();
                    let bv = self.nodes[b.0].value.clone();
                    let n = av.len() as f64;
                    for i in 0..av.len() {
                        let s = (av[i] - bv[i]).signum();
                        let d = s / n * g;
                        self.nodes[a.0].grad[i] += d;
                        self.nodes[b.0].grad[i] -= d;
                    }
                }
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

/// Stable softmax of one row into `out`.
pub fn softmax_row(row: &[f64], out: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for (o, &v) in out.iter_mut().zip(row) {
        *o = (v - mx).exp();
        sum += *o;
    }
    for o in out.iter_mut() {
        *o /= sum;
    }
}

/// Softmax of a slice as a fresh vector.
pub fn softmax_vec(row: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; row.len()];
    softmax_row(row, &mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    #[test]
    fn tensor_shape_product_checked() {
        assert!(Tensor::new(vec![2, 3], vec![0.0; 6]).is_ok());
        assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::new(vec![2, 0], vec![]).is_err());
    }

    #[test]
    fn softmax_symmetry_and_rowsum() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![1, 2], vec![0.0, 0.0]).unwrap();
        let p = tape.softmax(x).unwrap();
        assert_relative_eq!(tape.value(p)[0], 0.5, epsilon = 1e-12);
        assert_relative_eq!(tape.value(p)[1], 0.5, epsilon = 1e-12);

        let y = tape.leaf_from(vec![2, 3], vec![1.0, -2.0, 0.5, 900.0, 899.0, 898.0]).unwrap();
        let q = tape.softmax(y).unwrap();
        for r in 0..2 {
            let s: f64 = tape.value(q)[r * 3..(r + 1) * 3].iter().sum();
            assert_relative_eq!(s, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn softmax_shift_invariant() {
        let logits = vec![0.3, -1.2, 2.5];
        let a = softmax_vec(&logits);
        let b = softmax_vec(&logits.iter().map(|v| v + 7.0).collect::<Vec<_>>());
        for (x, y) in a.iter().zip(&b) {
            assert_relative_eq!(x, y, epsilon = 1e-9);
        }
    }

    #[test]
    fn relu_forward() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![2], vec![-1.0, 2.0]).unwrap();
        let y = tape.relu(x);
        assert_eq!(tape.value(y), &[0.0, 2.0]);
    }

    #[test]
    fn mse_hand_value() {
        let mut tape = Tape::new();
        let a = tape.leaf_from(vec![2], vec![1.0, 0.0]).unwrap();
        let b = tape.leaf_from(vec![2], vec![0.5, 0.5]).unwrap();
        let l = tape.mse(a, b).unwrap();
        assert_relative_eq!(tape.value(l)[0], 0.25, epsilon = 1e-12);
    }

    #[test]
    fn backward_square() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![1], vec![3.0]).unwrap();
        let y = tape.square(x);
        tape.backward(y).unwrap();
        assert_relative_eq!(tape.grad(x)[0], 6.0, epsilon = 1e-12);
    }

    #[test]
    fn backward_relu_sum() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![2], vec![-1.0, 2.0]).unwrap();
        let r = tape.relu(x);
        let s = tape.sum_all(r);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x), &[0.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![2], vec![1.0, 2.0]).unwrap();
        assert!(tape.backward(x).is_err());
    }

    #[test]
    fn shape_error_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf_from(vec![2, 3], vec![0.0; 6]).unwrap();
        let b = tape.leaf_from(vec![2, 3], vec![0.0; 6]).unwrap();
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul"), "{msg}");
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    /// conv2d against a direct nested-loop reference, exact equality.
    #[test]
    fn conv2d_matches_reference() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        for &(stride, pad) in &[(1usize, 0usize), (1, 1), (2, 1)] {
            let (b, c, h, w, o, kh) = (2, 3, 5, 5, 4, 3);
            let xv: Vec<f64> = (0..b * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let kv: Vec<f64> = (0..o * c * kh * kh).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let mut tape = Tape::new();
            let x = tape.leaf_from(vec![b, c, h, w], xv.clone()).unwrap();
            let k = tape.leaf_from(vec![o, c, kh, kh], kv.clone()).unwrap();
            let y = tape.conv2d(x, k, stride, pad).unwrap();
            let ho = (h + 2 * pad - kh) / stride + 1;
            let wo = ho;
            let mut expect = vec![0.0; b * o * ho * wo];
            for bi in 0..b {
                for oi in 0..o {
                    for i in 0..ho {
                        for j in 0..wo {
                            let mut acc = 0.0;
                            for ci in 0..c {
                                for u in 0..kh {
                                    for v in 0..kh {
                                        let hi = (i * stride + u) as isize - pad as isize;
                                        let wi = (j * stride + v) as isize - pad as isize;
                                        if hi < 0 || hi >= h as isize || wi < 0 || wi >= w as isize {
                                            continue;
                                        }
                                        acc += xv[((bi * c + ci) * h + hi as usize) * w + wi as usize]
                                            * kv[((oi * c + ci) * kh + u) * kh + v];
                                    }
                                }
                            }
                            expect[((bi * o + oi) * ho + i) * wo + j] = acc;
                        }
                    }
                }
            }
            assert_eq!(tape.value(y), expect.as_slice());
        }
    }

    #[test]
    fn sum_axis_middle() {
        let mut tape = Tape::new();
        // [2,2,2]: sum over axis 1
        let x = tape
            .leaf_from(vec![2, 2, 2], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0])
            .unwrap();
        let y = tape.sum_axis(x, 1).unwrap();
        assert_eq!(tape.shape(y), &[2, 2]);
        assert_eq!(tape.value(y), &[4.0, 6.0, 12.0, 14.0]);
    }

    #[test]
    fn backward_resets_node_grads() {
        let mut tape = Tape::new();
        let x = tape.leaf_from(vec![1], vec![3.0]).unwrap();
        let y = tape.square(x);
        tape.backward(y).unwrap();
        // a second sweep over the same tape must not double-count
        tape.backward(y).unwrap();
        assert_relative_eq!(tape.grad(x)[0], 6.0, epsilon = 1e-12);
    }
}
