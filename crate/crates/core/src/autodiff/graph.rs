use std::collections::HashMap;

use super::kernels::{add_into, dot, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::params::ParamStore;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`] tape.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

/// Margins and scale for [`Graph::circle_loss`].
#[derive(Clone, Copy, Debug)]
pub struct CircleMargins {
    pub delta_p: f64,
    pub delta_n: f64,
    pub gamma: f64,
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    LeakyRelu(Var, f64),
    Sigmoid(Var),
    InstanceNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64> },
    SoftmaxRows(Var),
    /// Keeps the row softmax for the backward pass.
    LogSumExpRows { x: Var, softmax: Vec<f64> },
    GatherRows(Var, Vec<usize>),
    SegmentMax { x: Var, argmax: Vec<usize> },
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    L2NormalizeRows { x: Var, norms: Vec<f64> },
    PairwiseDist(Var, Var),
    EdgeSum { center: Var, nbr: Var, geo: Option<(Var, Tensor)>, edges: Vec<usize>, k: usize },
    /// Fused scalar loss whose local gradient is computed in the forward pass.
    FusedLoss { input: Var, local_grad: Vec<f64> },
    Sum(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Single-use reverse-mode tape.
///
/// Values are computed eagerly as nodes are pushed; [`Graph::backward`]
/// walks the tape once in reverse. Parameters are copied in from a
/// [`ParamStore`] on first use and their gradients can be read back by name.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: HashMap<String, Var>,
    grads: Vec<Option<Vec<f64>>>,
}

fn dims(t: &Tensor) -> (usize, usize) {
    (t.rows(), t.cols())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        dims(self.value(v))
    }

    /// Input with no gradient.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Input whose gradient is tracked.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Binds a named parameter, reusing the node when bound before.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store
            .get(name)
            .ok_or_else(|| Error::invalid(format!("unknown parameter `{name}`")))?;
        let value = Tensor::new(t.shape().to_vec(), t.data().to_vec())?;
        let v = self.variable(value);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn bound_params(&self) -> impl Iterator<Item = (&str, Var)> {
        self.params.iter().map(|(k, &v)| (k.as_str(), v))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (k2, m) = self.shape(b);
        if k != k2 {
            return Err(Error::shape(format!("matmul {n}x{k} by {k2}x{m}")));
        }
        let mut out = vec![0.0; n * m];
        matmul_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMul(a, b), ng))
    }

    /// `a · bᵀ`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, k) = self.shape(a);
        let (m, k2) = self.shape(b);
        if k != k2 {
            return Err(Error::shape(format!("matmul_nt {n}x{k} by ({m}x{k2})ᵀ")));
        }
        let mut out = vec![0.0; n * m];
        matmul_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, n, k, m);
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::MatMulNT(a, b), ng))
    }

    /// Adds a length-`cols` bias to every row.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c) = self.shape(x);
        if self.value(bias).len() != c {
            return Err(Error::shape(format!("bias of length {} for {c} columns", self.value(bias).len())));
        }
        let b = self.value(bias).data();
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            add_into(row, b);
        }
        let ng = self.needs(x) || self.needs(bias);
        Ok(self.push(Tensor::matrix(n, c, out)?, Op::AddBias(x, bias), ng))
    }

    /// `x · W + bias`
    pub fn linear(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, bias)
    }

    fn elementwise(&mut self, a: Var, b: Var, name: &str) -> Result<(usize, usize)> {
        let sa = self.shape(a);
        if sa != self.shape(b) || self.value(a).len() != self.value(b).len() {
            return Err(Error::shape(format!("{name}: {:?} vs {:?}", sa, self.shape(b))));
        }
        Ok(sa)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, c) = self.elementwise(a, b, "add")?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x + y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(n, c, out)?, Op::Add(a, b), ng))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, c) = self.elementwise(a, b, "sub")?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x - y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(n, c, out)?, Op::Sub(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, c) = self.elementwise(a, b, "mul")?;
        let out = self.value(a).data().iter().zip(self.value(b).data()).map(|(x, y)| x * y).collect();
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(n, c, out)?, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let (n, c) = self.shape(x);
        let out = self.value(x).data().iter().map(|v| v * s).collect();
        let ng = self.needs(x);
        self.push(Tensor::matrix(n, c, out).expect("same shape"), Op::Scale(x, s), ng)
    }

    /// Elementwise LeakyReLU; the derivative at exactly zero is 1.
    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Var {
        let (n, c) = self.shape(x);
        let out = self.value(x).data().iter().map(|&v| if v >= 0.0 { v } else { slope * v }).collect();
        let ng = self.needs(x);
        self.push(Tensor::matrix(n, c, out).expect("same shape"), Op::LeakyRelu(x, slope), ng)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.leaky_relu(x, 0.0)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let (n, c) = self.shape(x);
        let out = self.value(x).data().iter().map(|&v| sigmoid(v)).collect();
        let ng = self.needs(x);
        self.push(Tensor::matrix(n, c, out).expect("same shape"), Op::Sigmoid(x), ng)
    }

    /// Per-channel normalization over the rows of one cloud.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (n, c) = self.shape(x);
        if n == 0 {
            return Err(Error::shape("instance norm over zero rows"));
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("instance norm affine parameters must match channel count"));
        }
        let xs = self.value(x).data();
        let mut mean = vec![0.0; c];
        for row in xs.chunks(c) {
            add_into(&mut mean, row);
        }
        mean.iter_mut().for_each(|m| *m /= n as f64);
        let mut var = vec![0.0; c];
        for row in xs.chunks(c) {
            for ((v, &x), &m) in var.iter_mut().zip(row).zip(&mean) {
                *v += (x - m) * (x - m);
            }
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v / n as f64 + INSTANCE_NORM_EPS).sqrt()).collect();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; n * c];
        let mut out = vec![0.0; n * c];
        for (i, row) in xs.chunks(c).enumerate() {
            for j in 0..c {
                let h = (row[j] - mean[j]) * inv_std[j];
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        let ng = self.needs(x) || self.needs(gamma) || self.needs(beta);
        Ok(self.push(Tensor::matrix(n, c, out)?, Op::InstanceNorm { x, gamma, beta, xhat, inv_std }, ng))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let (n, c) = self.shape(x);
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c.max(1)) {
            softmax_in_place(row);
        }
        let ng = self.needs(x);
        self.push(Tensor::matrix(n, c, out).expect("same shape"), Op::SoftmaxRows(x), ng)
    }

    /// `log Σ_j exp x_ij` per row, as an `N × 1` column.
    pub fn logsumexp_rows(&mut self, x: Var) -> Var {
        let (n, c) = self.shape(x);
        let mut softmax = self.value(x).data().to_vec();
        let mut out = Vec::with_capacity(n);
        for row in softmax.chunks_mut(c.max(1)) {
            out.push(log_sum_exp(row.iter().copied()));
            softmax_in_place(row);
        }
        let ng = self.needs(x);
        self.push(Tensor::column(out), Op::LogSumExpRows { x, softmax }, ng)
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (n, c) = self.shape(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::shape(format!("row index {bad} out of range for {n} rows")));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(index.len() * c);
        for &i in index {
            out.extend_from_slice(&xs[i * c..(i + 1) * c]);
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::matrix(index.len(), c, out)?, Op::GatherRows(x, index.to_vec()), ng))
    }

    /// Channelwise max over the rows of each segment. `segment[r]` names the
    /// output row that input row `r` belongs to; every output row needs at
    /// least one member. Gradients go to the first (lowest-index) maximum.
    pub fn segment_max(&mut self, x: Var, segment: &[usize], num_segments: usize) -> Result<Var> {
        let (n, c) = self.shape(x);
        if segment.len() != n {
            return Err(Error::shape(format!("{} segment ids for {n} rows", segment.len())));
        }
        let xs = self.value(x).data();
        let mut out = vec![f64::NEG_INFINITY; num_segments * c];
        let mut argmax = vec![usize::MAX; num_segments * c];
        for (r, &s) in segment.iter().enumerate() {
            if s >= num_segments {
                return Err(Error::shape(format!("segment id {s} out of range")));
            }
            for j in 0..c {
                let v = xs[r * c + j];
                let slot = s * c + j;
                if argmax[slot] == usize::MAX || v > out[slot] {
                    out[slot] = v;
                    argmax[slot] = r;
                }
            }
        }
        if c > 0 && argmax.contains(&usize::MAX) {
            return Err(Error::invalid("empty edge set in max pooling"));
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::matrix(num_segments, c, out)?, Op::SegmentMax { x, argmax }, ng))
    }

    /// Max over consecutive groups of `k` rows (the per-point edge lists of a
    /// kNN graph laid out source-major).
    pub fn neighborhood_max(&mut self, edge_features: Var, k: usize) -> Result<Var> {
        let (rows, _) = self.shape(edge_features);
        if k == 0 || rows % k != 0 {
            return Err(Error::shape(format!("{rows} edge rows not divisible by k = {k}")));
        }
        let segment: Vec<usize> = (0..rows).map(|r| r / k).collect();
        self.segment_max(edge_features, &segment, rows / k)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let n = parts.first().map(|&p| self.shape(p).0).ok_or_else(|| Error::shape("empty concat"))?;
        if parts.iter().any(|&p| self.shape(p).0 != n) {
            return Err(Error::shape("concat parts differ in row count"));
        }
        let widths: Vec<usize> = parts.iter().map(|&p| self.shape(p).1).collect();
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let ng = parts.iter().any(|&p| self.needs(p));
        Ok(self.push(Tensor::matrix(n, total, out)?, Op::ConcatCols(parts.to_vec()), ng))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (n, c) = self.shape(x);
        if start + len > c {
            return Err(Error::shape(format!("columns {start}..{} of {c}", start + len)));
        }
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(n * len);
        for i in 0..n {
            out.extend_from_slice(&xs[i * c + start..i * c + start + len]);
        }
        let ng = self.needs(x);
        Ok(self.push(Tensor::matrix(n, len, out)?, Op::SliceCols(x, start), ng))
    }

    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let (n, c) = self.shape(x);
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(n);
        for row in out.chunks_mut(c.max(1)) {
            let norm = dot(row, row).sqrt().max(1e-12);
            row.iter_mut().for_each(|v| *v /= norm);
            norms.push(norm);
        }
        let ng = self.needs(x);
        self.push(Tensor::matrix(n, c, out).expect("same shape"), Op::L2NormalizeRows { x, norms }, ng)
    }

    /// Euclidean distances between every row of `a` and every row of `b`.
    pub fn pairwise_dist(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, c) = self.shape(a);
        let (m, c2) = self.shape(b);
        if c != c2 {
            return Err(Error::shape("pairwise distance width mismatch"));
        }
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![0.0; n * m];
        for i in 0..n {
            let ar = &av[i * c..(i + 1) * c];
            for j in 0..m {
                let br = &bv[j * c..(j + 1) * c];
                out[i * m + j] = ar.iter().zip(br).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
            }
        }
        let ng = self.needs(a) || self.needs(b);
        Ok(self.push(Tensor::matrix(n, m, out)?, Op::PairwiseDist(a, b), ng))
    }

    /// Edge features `center_i + nbr_j (+ G_ij · W)` for the `k` edges of
    /// every source, laid out source-major; `edges` holds the targets `j`.
    /// `geo` pairs a constant per-edge matrix `G` with a weight `W`.
    pub fn edge_sum(&mut self, center: Var, nbr: Var, edges: &[usize], k: usize, geo: Option<(&Tensor, Var)>) -> Result<Var> {
        let (n, c) = self.shape(center);
        let (m, c2) = self.shape(nbr);
        if c != c2 || k == 0 || edges.len() != n * k {
            return Err(Error::shape(format!("edge sum over {n}×{c} centers, {m}×{c2} neighbours, {} edges", edges.len())));
        }
        if let Some(&bad) = edges.iter().find(|&&j| j >= m) {
            return Err(Error::shape(format!("edge target {bad} out of range")));
        }
        let mut out = vec![0.0; n * k * c];
        let (cv, nv) = (self.value(center).data(), self.value(nbr).data());
        for (r, &j) in edges.iter().enumerate() {
            let i = r / k;
            let dst = &mut out[r * c..(r + 1) * c];
            for ((d, a), b) in dst.iter_mut().zip(&cv[i * c..(i + 1) * c]).zip(&nv[j * c..(j + 1) * c]) {
                *d = a + b;
            }
        }
        let mut ng = self.needs(center) || self.needs(nbr);
        let geo = match geo {
            Some((features, w)) => {
                let gw = features.cols();
                if features.rows() != n * k || self.shape(w) != (gw, c) {
                    return Err(Error::shape("edge geometry must be one row per edge with a matching weight"));
                }
                matmul_acc(features.data(), self.value(w).data(), &mut out, n * k, gw, c);
                ng |= self.needs(w);
                Some((w, features.clone()))
            }
            None => None,
        };
        Ok(self.push(Tensor::matrix(n * k, c, out)?, Op::EdgeSum { center, nbr, geo, edges: edges.to_vec(), k }, ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let ng = self.needs(x);
        self.push(Tensor::scalar(s), Op::Sum(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len().max(1) as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean over rows of `log(1 + Σ_pos exp(βp(d−Δp)) · Σ_neg exp(βn(Δn−d)))`
    /// with `βp = max(0, γ(d−Δp))` and `βn = max(0, γ(Δn−d))` held constant.
    ///
    /// `d` is an anchors × candidates distance matrix; `positives[i]` and
    /// `negatives[i]` list candidate columns for anchor row `i`. Rows without
    /// negatives contribute zero.
    pub fn circle_loss(
        &mut self,
        d: Var,
        positives: &[Vec<usize>],
        negatives: &[Vec<usize>],
        margins: CircleMargins,
    ) -> Result<Var> {
        let frozen = self.value(d).clone();
        self.circle_loss_frozen(d, positives, negatives, margins, &frozen)
    }

    /// [`Graph::circle_loss`] with the β weights computed from `beta_source`
    /// instead of the current distances. Finite differences against this
    /// form see β as constants.
    pub fn circle_loss_frozen(
        &mut self,
        d: Var,
        positives: &[Vec<usize>],
        negatives: &[Vec<usize>],
        margins: CircleMargins,
        beta_source: &Tensor,
    ) -> Result<Var> {
        let (n, m) = self.shape(d);
        if positives.len() != n || negatives.len() != n {
            return Err(Error::shape("one positive and negative list per anchor row"));
        }
        if beta_source.shape() != self.value(d).shape() {
            return Err(Error::shape("beta source must match the distance matrix"));
        }
        let bv = beta_source.data();
        if n == 0 {
            return Err(Error::NoPositivePairs);
        }
        let dv = self.value(d).data();
        let mut local = vec![0.0; n * m];
        let mut total = 0.0;
        let CircleMargins { delta_p, delta_n, gamma } = margins;
        for i in 0..n {
            let row = &dv[i * m..(i + 1) * m];
            let brow = &bv[i * m..(i + 1) * m];
            if positives[i].is_empty() {
                return Err(Error::NoPositivePairs);
            }
            if negatives[i].is_empty() {
                continue;
            }
            let pos: Vec<(usize, f64, f64)> = positives[i]
                .iter()
                .map(|&j| {
                    let beta = (gamma * (brow[j] - delta_p)).max(0.0);
                    (j, beta, beta * (row[j] - delta_p))
                })
                .collect();
            let neg: Vec<(usize, f64, f64)> = negatives[i]
                .iter()
                .map(|&j| {
                    let beta = (gamma * (delta_n - brow[j])).max(0.0);
                    (j, beta, beta * (delta_n - row[j]))
                })
                .collect();
            let lse_p = log_sum_exp(pos.iter().map(|t| t.2));
            let lse_n = log_sum_exp(neg.iter().map(|t| t.2));
            let z = lse_p + lse_n;
            total += softplus(z);
            let dz = sigmoid(z) / n as f64;
            for &(j, beta, logit) in &pos {
                local[i * m + j] += dz * (logit - lse_p).exp() * beta;
            }
            for &(j, beta, logit) in &neg {
                local[i * m + j] -= dz * (logit - lse_n).exp() * beta;
            }
        }
        let ng = self.needs(d);
        Ok(self.push(Tensor::scalar(total / n as f64), Op::FusedLoss { input: d, local_grad: local }, ng))
    }

    /// `-(1/N) Σ w_i [y_i ln p_i + (1 − y_i) ln(1 − p_i)]` for probabilities
    /// `p` in (0, 1).
    pub fn weighted_bce(&mut self, p: Var, labels: &[f64], weights: &[f64]) -> Result<Var> {
        let n = self.value(p).len();
        if labels.len() != n || weights.len() != n {
            return Err(Error::shape(format!("bce over {n} scores with {} labels", labels.len())));
        }
        if n == 0 {
            return Err(Error::shape("bce over zero scores"));
        }
        const EPS: f64 = 1e-12;
        let pv = self.value(p).data();
        let mut total = 0.0;
        let mut local = vec![0.0; n];
        for i in 0..n {
            let q = pv[i].clamp(EPS, 1.0 - EPS);
            let (y, w) = (labels[i], weights[i]);
            total -= w * (y * q.ln() + (1.0 - y) * (1.0 - q).ln());
            local[i] = -w * (y / q - (1.0 - y) / (1.0 - q)) / n as f64;
        }
        let ng = self.needs(p);
        Ok(self.push(Tensor::scalar(total / n as f64), Op::FusedLoss { input: p, local_grad: local }, ng))
    }

    /// Reverse pass from a scalar node; gradients accumulate from zero.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).len() != 1 {
            return Err(Error::shape("backward needs a scalar root"));
        }
        self.grads = vec![None; self.nodes.len()];
        self.grads[root.0] = Some(vec![1.0]);
        for id in (0..=root.0).rev() {
            let Some(g) = self.grads[id].take() else { continue };
            if self.nodes[id].needs_grad {
                self.propagate(id, &g);
            }
            self.grads[id] = Some(g);
        }
        Ok(())
    }

    /// Gradient of the last backward root with respect to `v`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param_grad(&self, name: &str) -> Option<&[f64]> {
        self.params.get(name).and_then(|&v| self.grad(v))
    }

    fn propagate(&mut self, id: usize, g: &[f64]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let val = |v: Var| nodes[v.0].value.data();
        let shape = |v: Var| dims(&nodes[v.0].value);
        let out = nodes[id].value.data();
        let (n, c) = dims(&nodes[id].value);
        match &nodes[id].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (_, k) = shape(a);
                if let Some(ga) = acc(nodes, grads, a) {
                    matmul_nt_acc(g, val(b), ga, n, c, k);
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    matmul_tn_acc(val(a), g, gb, n, k, c);
                }
            }
            &Op::MatMulNT(a, b) => {
                let (_, k) = shape(a);
                if let Some(ga) = acc(nodes, grads, a) {
                    matmul_acc(g, val(b), ga, n, c, k);
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    matmul_tn_acc(g, val(a), gb, n, c, k);
                }
            }
            &Op::AddBias(x, b) => {
                if let Some(gx) = acc(nodes, grads, x) {
                    add_into(gx, g);
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    for row in g.chunks(c.max(1)) {
                        add_into(gb, row);
                    }
                }
            }
            &Op::Add(a, b) => {
                if let Some(ga) = acc(nodes, grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    add_into(gb, g);
                }
            }
            &Op::Sub(a, b) => {
                if let Some(ga) = acc(nodes, grads, a) {
                    add_into(ga, g);
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    gb.iter_mut().zip(g).for_each(|(d, s)| *d -= s);
                }
            }
            &Op::Mul(a, b) => {
                if let Some(ga) = acc(nodes, grads, a) {
                    ga.iter_mut().zip(g).zip(val(b)).for_each(|((d, s), y)| *d += s * y);
                }
                if let Some(gb) = acc(nodes, grads, b) {
                    gb.iter_mut().zip(g).zip(val(a)).for_each(|((d, s), x)| *d += s * x);
                }
            }
            &Op::Scale(x, s) => {
                if let Some(gx) = acc(nodes, grads, x) {
                    gx.iter_mut().zip(g).for_each(|(d, v)| *d += s * v);
                }
            }
            &Op::LeakyRelu(x, slope) => {
                if let Some(gx) = acc(nodes, grads, x) {
                    for ((d, &v), &xi) in gx.iter_mut().zip(g).zip(val(x)) {
                        *d += if xi >= 0.0 { v } else { slope * v };
                    }
                }
            }
            &Op::Sigmoid(x) => {
                if let Some(gx) = acc(nodes, grads, x) {
                    for ((d, &v), &y) in gx.iter_mut().zip(g).zip(out) {
                        *d += v * y * (1.0 - y);
                    }
                }
            }
            Op::InstanceNorm { x, gamma, beta, xhat, inv_std } => {
                if let Some(gb) = acc(nodes, grads, *beta) {
                    for row in g.chunks(c) {
                        add_into(gb, row);
                    }
                }
                if let Some(gg) = acc(nodes, grads, *gamma) {
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            gg[j] += grow[j] * hrow[j];
                        }
                    }
                }
                let gam = val(*gamma);
                if let Some(gx) = acc(nodes, grads, *x) {
                    let nf = n as f64;
                    let mut sum_d = vec![0.0; c];
                    let mut sum_dh = vec![0.0; c];
                    for (grow, hrow) in g.chunks(c).zip(xhat.chunks(c)) {
                        for j in 0..c {
                            let dh = grow[j] * gam[j];
                            sum_d[j] += dh;
                            sum_dh[j] += dh * hrow[j];
                        }
                    }
                    for i in 0..n {
                        for j in 0..c {
                            let dh = g[i * c + j] * gam[j];
                            gx[i * c + j] += inv_std[j] / nf * (nf * dh - sum_d[j] - xhat[i * c + j] * sum_dh[j]);
                        }
                    }
                }
            }
            &Op::SoftmaxRows(x) => {
                if let Some(gx) = acc(nodes, grads, x) {
                    for ((dst, grow), yrow) in gx.chunks_mut(c).zip(g.chunks(c)).zip(out.chunks(c)) {
                        let s = dot(grow, yrow);
                        for j in 0..c {
                            dst[j] += yrow[j] * (grow[j] - s);
                        }
                    }
                }
            }
            Op::LogSumExpRows { x, softmax } => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    let w = softmax.len() / n.max(1);
                    for (i, (dst, srow)) in gx.chunks_mut(w.max(1)).zip(softmax.chunks(w.max(1))).enumerate() {
                        dst.iter_mut().zip(srow).for_each(|(d, s)| *d += g[i] * s);
                    }
                }
            }
            Op::GatherRows(x, index) => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (r, &src) in index.iter().enumerate() {
                        add_into(&mut gx[src * c..(src + 1) * c], &g[r * c..(r + 1) * c]);
                    }
                }
            }
            Op::SegmentMax { x, argmax } => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    for (slot, &r) in argmax.iter().enumerate() {
                        gx[r * c + slot % c] += g[slot];
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = shape(p).1;
                    if let Some(gp) = acc(nodes, grads, p) {
                        for i in 0..n {
                            add_into(&mut gp[i * w..(i + 1) * w], &g[i * c + offset..i * c + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            &Op::SliceCols(x, start) => {
                let w = shape(x).1;
                if let Some(gx) = acc(nodes, grads, x) {
                    for i in 0..n {
                        add_into(&mut gx[i * w + start..i * w + start + c], &g[i * c..(i + 1) * c]);
                    }
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                if let Some(gx) = acc(nodes, grads, *x) {
                    for i in 0..n {
                        let (y, gr) = (&out[i * c..(i + 1) * c], &g[i * c..(i + 1) * c]);
                        let s = dot(y, gr);
                        for j in 0..c {
                            gx[i * c + j] += (gr[j] - y[j] * s) / norms[i];
                        }
                    }
                }
            }
            &Op::PairwiseDist(a, b) => {
                let w = shape(a).1;
                let (av, bv) = (val(a), val(b));
                let mut ga = vec![0.0; av.len()];
                let mut gb = vec![0.0; bv.len()];
                for i in 0..n {
                    for j in 0..c {
                        let d = out[i * c + j];
                        let s = g[i * c + j];
                        if d <= 0.0 || s == 0.0 {
                            continue;
                        }
                        let f = s / d;
                        for t in 0..w {
                            let diff = f * (av[i * w + t] - bv[j * w + t]);
                            ga[i * w + t] += diff;
                            gb[j * w + t] -= diff;
                        }
                    }
                }
                if let Some(dst) = acc(nodes, grads, a) {
                    add_into(dst, &ga);
                }
                if let Some(dst) = acc(nodes, grads, b) {
                    add_into(dst, &gb);
                }
            }
            Op::EdgeSum { center, nbr, geo, edges, k } => {
                if let Some(gc) = acc(nodes, grads, *center) {
                    for (r, grow) in g.chunks(c).enumerate() {
                        let i = r / k;
                        add_into(&mut gc[i * c..(i + 1) * c], grow);
                    }
                }
                if let Some(gn) = acc(nodes, grads, *nbr) {
                    for (grow, &j) in g.chunks(c).zip(edges) {
                        add_into(&mut gn[j * c..(j + 1) * c], grow);
                    }
                }
                if let Some((w, features)) = geo {
                    if let Some(gw) = acc(nodes, grads, *w) {
                        matmul_tn_acc(features.data(), g, gw, n, features.cols(), c);
                    }
                }
            }
            Op::FusedLoss { input, local_grad } => {
                let s = g[0];
                if let Some(gx) = acc(nodes, grads, *input) {
                    gx.iter_mut().zip(local_grad).for_each(|(d, l)| *d += s * l);
                }
            }
            &Op::Sum(x) => {
                let s = g[0];
                if let Some(gx) = acc(nodes, grads, x) {
                    gx.iter_mut().for_each(|d| *d += s);
                }
            }
        }
    }
}

fn acc<'a>(nodes: &[Node], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.needs_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}
