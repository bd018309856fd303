//! Reverse-mode automatic differentiation over dense 64-bit tensors.
//!
//! A [`Tape`] owns every tensor created during one forward pass and records
//! the operations between them. [`Tape::backward`] replays the record in
//! reverse and accumulates gradients additively into each `requires_grad`
//! tensor. Tensors are handles into the tape arena; parameter master copies
//! live outside the tape as [`Mat`] and are staged onto a fresh tape per step.
//!
//! The operation set is exactly what recurrent sequence models, cross-entropy
//! losses and the Gumbel straight-through estimator need. No broadcasting
//! beyond row-bias addition, no views, no fusion.

use crate::error::{Error, Result};
use crate::rng::Rng;

// ── Parameter storage ─────────────────────────────────────────────────

/// Dense row-major matrix used for parameter master copies and optimizer
/// state. Row vectors are 1×n.
#[derive(Debug, Clone, PartialEq)]
pub struct Mat {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Mat {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Mat {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        assert_eq!(rows * cols, data.len(), "Mat size mismatch");
        Mat { rows, cols, data }
    }

    pub fn uniform(rng: &mut Rng, lo: f64, hi: f64, rows: usize, cols: usize) -> Self {
        let data = (0..rows * cols).map(|_| rng.uniform_in(lo, hi)).collect();
        Mat { rows, cols, data }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }
}

// ── Tape ──────────────────────────────────────────────────────────────

/// Handle of a tensor on its tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Tensor(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: Tensor, b: Tensor },
    Add { a: Tensor, b: Tensor },
    /// a[m×n] + row[1×n] broadcast over rows.
    AddRow { a: Tensor, row: Tensor },
    Mul { a: Tensor, b: Tensor },
    Scale { a: Tensor, factor: f64 },
    Tanh { a: Tensor },
    Sum { a: Tensor },
    LogSoftmax { a: Tensor },
    Softmax { a: Tensor },
    CrossEntropy {
        logits: Tensor,
        targets: Vec<usize>,
        /// Row-wise softmax saved at forward time.
        probs: Vec<f64>,
    },
    GumbelSt {
        logits: Tensor,
        inv_tau: f64,
        /// softmax((logits + g)/tau) saved at forward time.
        soft: Vec<f64>,
    },
    ConcatRows { parts: Vec<Tensor> },
    RepeatRow { row: Tensor, count: usize },
}

struct Node {
    data: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
    op: Op,
}

/// Records one forward pass; confined to a single thread.
pub struct Tape {
    nodes: Vec<Node>,
    grad_enabled: bool,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::with_capacity(1024),
            grad_enabled: true,
        }
    }

    /// Forward-only tape: nothing requires grad, no ops are recorded.
    pub fn no_grad() -> Self {
        Tape {
            nodes: Vec::with_capacity(1024),
            grad_enabled: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool, op: Op) -> Tensor {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        let rg = requires_grad && self.grad_enabled;
        self.nodes.push(Node {
            data,
            shape,
            grad: None,
            requires_grad: rg,
            // constant subgraphs never participate in backward
            op: if rg { op } else { Op::Leaf },
        });
        Tensor(self.nodes.len() - 1)
    }

    pub fn leaf(&mut self, data: Vec<f64>, shape: Vec<usize>, requires_grad: bool) -> Result<Tensor> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::Contract(format!(
                "leaf: shape {:?} does not match buffer of {} values",
                shape,
                data.len()
            )));
        }
        Ok(self.push(data, shape, requires_grad, Op::Leaf))
    }

    pub fn constant(&mut self, data: Vec<f64>, shape: Vec<usize>) -> Result<Tensor> {
        self.leaf(data, shape, false)
    }

    pub fn scalar(&mut self, v: f64) -> Tensor {
        self.push(vec![v], vec![], false, Op::Leaf)
    }

    pub fn from_mat(&mut self, m: &Mat, requires_grad: bool) -> Tensor {
        self.push(
            m.data.clone(),
            vec![m.rows, m.cols],
            requires_grad,
            Op::Leaf,
        )
    }

    /// Constant one-hot rows for a slice of token ids.
    pub fn onehot_rows(&mut self, ids: &[usize], width: usize) -> Result<Tensor> {
        let mut data = vec![0.0; ids.len() * width];
        for (r, &id) in ids.iter().enumerate() {
            if id >= width {
                return Err(Error::Index(format!("one-hot id {id} >= width {width}")));
            }
            data[r * width + id] = 1.0;
        }
        self.constant(data, vec![ids.len(), width])
    }

    pub fn data(&self, t: Tensor) -> &[f64] {
        &self.nodes[t.0].data
    }

    pub fn shape(&self, t: Tensor) -> &[usize] {
        &self.nodes[t.0].shape
    }

    pub fn numel(&self, t: Tensor) -> usize {
        self.nodes[t.0].data.len()
    }

    pub fn requires_grad(&self, t: Tensor) -> bool {
        self.nodes[t.0].requires_grad
    }

    /// Value of a scalar tensor.
    pub fn value(&self, t: Tensor) -> f64 {
        debug_assert_eq!(self.nodes[t.0].data.len(), 1);
        self.nodes[t.0].data[0]
    }

    pub fn grad(&self, t: Tensor) -> Option<&[f64]> {
        self.nodes[t.0].grad.as_deref()
    }

    /// Gradient buffer, zeros if backward never reached the tensor.
    pub fn grad_or_zeros(&self, t: Tensor) -> Vec<f64> {
        match &self.nodes[t.0].grad {
            Some(g) => g.clone(),
            None => vec![0.0; self.nodes[t.0].data.len()],
        }
    }

    pub fn zero_grads(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn rank2(&self, t: Tensor, op: &'static str) -> Result<(usize, usize)> {
        match self.shape(t) {
            [r, c] => Ok((*r, *c)),
            s => Err(Error::Dimension {
                op,
                lhs: s.to_vec(),
                rhs: vec![],
            }),
        }
    }

    fn result_rg(&self, inputs: &[Tensor]) -> bool {
        self.grad_enabled && inputs.iter().any(|t| self.nodes[t.0].requires_grad)
    }

    // ── Forward operations ────────────────────────────────────────────

    /// Standard matrix product [m×k]·[k×n] → [m×n].
    pub fn matmul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        let (m, ka) = self.rank2(a, "matmul")?;
        let (kb, n) = self.rank2(b, "matmul")?;
        if ka != kb {
            return Err(Error::Dimension {
                op: "matmul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out = matmul_kernel(self.data(a), self.data(b), m, ka, n);
        let rg = self.result_rg(&[a, b]);
        Ok(self.push(out, vec![m, n], rg, Op::Matmul { a, b }))
    }

    /// Elementwise sum of two same-shape tensors.
    pub fn add(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "add",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x + y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.result_rg(&[a, b]);
        Ok(self.push(out, shape, rg, Op::Add { a, b }))
    }

    /// Broadcast a 1×n row over the rows of an m×n tensor.
    pub fn add_row(&mut self, a: Tensor, row: Tensor) -> Result<Tensor> {
        let (m, n) = self.rank2(a, "add_row")?;
        let (r1, rn) = self.rank2(row, "add_row")?;
        if r1 != 1 || rn != n {
            return Err(Error::Dimension {
                op: "add_row",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(row).to_vec(),
            });
        }
        let mut out = self.data(a).to_vec();
        let rowv = self.data(row).to_vec();
        for i in 0..m {
            for j in 0..n {
                out[i * n + j] += rowv[j];
            }
        }
        let rg = self.result_rg(&[a, row]);
        Ok(self.push(out, vec![m, n], rg, Op::AddRow { a, row }))
    }

    pub fn mul(&mut self, a: Tensor, b: Tensor) -> Result<Tensor> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension {
                op: "mul",
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.result_rg(&[a, b]);
        Ok(self.push(out, shape, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, a: Tensor, factor: f64) -> Tensor {
        let out: Vec<f64> = self.data(a).iter().map(|x| x * factor).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.result_rg(&[a]);
        self.push(out, shape, rg, Op::Scale { a, factor })
    }

    pub fn tanh(&mut self, a: Tensor) -> Tensor {
        let out: Vec<f64> = self.data(a).iter().map(|x| x.tanh()).collect();
        let shape = self.shape(a).to_vec();
        let rg = self.result_rg(&[a]);
        self.push(out, shape, rg, Op::Tanh { a })
    }

    /// Sum of all entries, scalar output.
    pub fn sum(&mut self, a: Tensor) -> Tensor {
        let s: f64 = self.data(a).iter().sum();
        let rg = self.result_rg(&[a]);
        self.push(vec![s], vec![], rg, Op::Sum { a })
    }

    /// Mean of all entries, scalar output.
    pub fn mean(&mut self, a: Tensor) -> Tensor {
        let n = self.numel(a).max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Row-wise log-softmax over the last dimension, max-shifted.
    pub fn log_softmax(&mut self, a: Tensor) -> Result<Tensor> {
        let width = self.last_dim(a, "log_softmax")?;
        if !self.data(a).iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric("log_softmax input must be finite".into()));
        }
        let out = log_softmax_rows(self.data(a), width);
        let shape = self.shape(a).to_vec();
        let rg = self.result_rg(&[a]);
        Ok(self.push(out, shape, rg, Op::LogSoftmax { a }))
    }

    /// Row-wise softmax over the last dimension, max-shifted.
    pub fn softmax(&mut self, a: Tensor) -> Result<Tensor> {
        let width = self.last_dim(a, "softmax")?;
        if !self.data(a).iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric("softmax input must be finite".into()));
        }
        let out = softmax_rows(self.data(a), width);
        let shape = self.shape(a).to_vec();
        let rg = self.result_rg(&[a]);
        Ok(self.push(out, shape, rg, Op::Softmax { a }))
    }

    /// Mean over the batch of -log_softmax(logits)[target].
    pub fn cross_entropy(&mut self, logits: Tensor, targets: &[usize]) -> Result<Tensor> {
        let (b, v) = self.rank2(logits, "cross_entropy")?;
        if targets.len() != b {
            return Err(Error::Contract(format!(
                "cross_entropy: {} logit rows but {} targets",
                b,
                targets.len()
            )));
        }
        for (i, &t) in targets.iter().enumerate() {
            if t >= v {
                return Err(Error::Index(format!(
                    "cross_entropy: target {t} at row {i} out of range 0..{v}"
                )));
            }
        }
        let log_probs = log_softmax_rows(self.data(logits), v);
        let mut loss = 0.0;
        for (i, &t) in targets.iter().enumerate() {
            loss -= log_probs[i * v + t];
        }
        loss /= b as f64;
        let rg = self.result_rg(&[logits]);
        let probs = if rg {
            log_probs.iter().map(|lp| lp.exp()).collect()
        } else {
            Vec::new()
        };
        Ok(self.push(
            vec![loss],
            vec![],
            rg,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
        ))
    }

    /// Straight-through Gumbel-softmax over a logit vector: forward emits the
    /// exact one-hot at the argmax of softmax((logits+g)/tau), backward passes
    /// the soft-path gradient.
    pub fn gumbel_softmax_st(&mut self, logits: Tensor, tau: f64, rng: &mut Rng) -> Result<Tensor> {
        let n = self.numel(logits);
        let noise: Vec<f64> = (0..n).map(|_| rng.gumbel()).collect();
        self.gumbel_softmax_st_with_noise(logits, tau, &noise)
    }

    /// Row-wise straight-through Gumbel-softmax with fresh noise per entry.
    pub fn gumbel_softmax_st_rows(
        &mut self,
        logits: Tensor,
        tau: f64,
        rng: &mut Rng,
    ) -> Result<Tensor> {
        let n = self.numel(logits);
        let noise: Vec<f64> = (0..n).map(|_| rng.gumbel()).collect();
        self.gumbel_softmax_st_with_noise(logits, tau, &noise)
    }

    /// Same as [`Tape::gumbel_softmax_st`] with caller-supplied noise; used by
    /// the noiseless reduction checks and the finite-difference probe.
    pub fn gumbel_softmax_st_with_noise(
        &mut self,
        logits: Tensor,
        tau: f64,
        noise: &[f64],
    ) -> Result<Tensor> {
        if tau <= 0.0 || !tau.is_finite() {
            return Err(Error::Parameter(format!(
                "gumbel_softmax_st: tau must be positive, got {tau}"
            )));
        }
        if !self.data(logits).iter().all(|x| x.is_finite()) {
            return Err(Error::Numeric("gumbel_softmax_st input must be finite".into()));
        }
        let width = self.last_dim(logits, "gumbel_softmax_st")?;
        if noise.len() != self.numel(logits) {
            return Err(Error::Contract(format!(
                "gumbel_softmax_st: {} noise values for {} logits",
                noise.len(),
                self.numel(logits)
            )));
        }
        let inv_tau = 1.0 / tau;
        let perturbed: Vec<f64> = self
            .data(logits)
            .iter()
            .zip(noise)
            .map(|(x, g)| (x + g) * inv_tau)
            .collect();
        let soft = softmax_rows(&perturbed, width);
        let rows = perturbed.len() / width;
        let mut out = vec![0.0; perturbed.len()];
        for r in 0..rows {
            let row = &perturbed[r * width..(r + 1) * width];
            let k = argmax(row);
            out[r * width + k] = 1.0;
        }
        let shape = self.shape(logits).to_vec();
        let rg = self.result_rg(&[logits]);
        let saved = if rg { soft } else { Vec::new() };
        Ok(self.push(
            out,
            shape,
            rg,
            Op::GumbelSt {
                logits,
                inv_tau,
                soft: saved,
            },
        ))
    }

    /// Stack rank-2 tensors with identical column counts along the row axis.
    pub fn concat_rows(&mut self, parts: &[Tensor]) -> Result<Tensor> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_rows: no tensors".into()));
        }
        let (_, cols) = self.rank2(parts[0], "concat_rows")?;
        let mut rows = 0;
        for &p in parts {
            let (r, c) = self.rank2(p, "concat_rows")?;
            if c != cols {
                return Err(Error::Dimension {
                    op: "concat_rows",
                    lhs: self.shape(parts[0]).to_vec(),
                    rhs: self.shape(p).to_vec(),
                });
            }
            rows += r;
        }
        let mut out = Vec::with_capacity(rows * cols);
        for &p in parts {
            out.extend_from_slice(self.data(p));
        }
        let rg = self.result_rg(parts);
        Ok(self.push(
            out,
            vec![rows, cols],
            rg,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
        ))
    }

    /// Tile a 1×n row into count×n.
    pub fn repeat_row(&mut self, row: Tensor, count: usize) -> Result<Tensor> {
        let (r, n) = self.rank2(row, "repeat_row")?;
        if r != 1 {
            return Err(Error::Dimension {
                op: "repeat_row",
                lhs: self.shape(row).to_vec(),
                rhs: vec![1, n],
            });
        }
        let mut out = Vec::with_capacity(count * n);
        for _ in 0..count {
            out.extend_from_slice(self.data(row));
        }
        let rg = self.result_rg(&[row]);
        Ok(self.push(out, vec![count, n], rg, Op::RepeatRow { row, count }))
    }

    fn last_dim(&self, t: Tensor, op: &'static str) -> Result<usize> {
        match self.shape(t).last() {
            Some(&w) if w >= 1 => Ok(w),
            _ => Err(Error::Dimension {
                op,
                lhs: self.shape(t).to_vec(),
                rhs: vec![],
            }),
        }
    }

    // ── Backward ──────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss; gradients accumulate additively.
    pub fn backward(&mut self, loss: Tensor) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::Contract(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.accumulate(loss, &[1.0]);
        for idx in (0..=loss.0).rev() {
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let Some(g_out) = self.nodes[idx].grad.take() else {
                continue;
            };
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul { a, b } => {
                    let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                    let n = self.nodes[b.0].shape[1];
                    if self.nodes[a.0].requires_grad {
                        // dA = dC · Bᵀ
                        let bd = &self.nodes[b.0].data;
                        let mut da = vec![0.0; m * k];
                        for i in 0..m {
                            for j in 0..n {
                                let g = g_out[i * n + j];
                                if g == 0.0 {
                                    continue;
                                }
                                for p in 0..k {
                                    da[i * k + p] += g * bd[p * n + j];
                                }
                            }
                        }
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        // dB = Aᵀ · dC
                        let ad = &self.nodes[a.0].data;
                        let mut db = vec![0.0; k * n];
                        for i in 0..m {
                            for p in 0..k {
                                let av = ad[i * k + p];
                                if av == 0.0 {
                                    continue;
                                }
                                for j in 0..n {
                                    db[p * n + j] += av * g_out[i * n + j];
                                }
                            }
                        }
                        self.accumulate(b, &db);
                    }
                }
                Op::Add { a, b } => {
                    if self.nodes[a.0].requires_grad {
                        self.accumulate(a, &g_out);
                    }
                    if self.nodes[b.0].requires_grad {
                        self.accumulate(b, &g_out);
                    }
                }
                Op::AddRow { a, row } => {
                    if self.nodes[a.0].requires_grad {
                        self.accumulate(a, &g_out);
                    }
                    if self.nodes[row.0].requires_grad {
                        let n = self.nodes[row.0].shape[1];
                        let mut dr = vec![0.0; n];
                        for (i, g) in g_out.iter().enumerate() {
                            dr[i % n] += g;
                        }
                        self.accumulate(row, &dr);
                    }
                }
                Op::Mul { a, b } => {
                    if self.nodes[a.0].requires_grad {
                        let da: Vec<f64> = g_out
                            .iter()
                            .zip(&self.nodes[b.0].data)
                            .map(|(g, y)| g * y)
                            .collect();
                        self.accumulate(a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let db: Vec<f64> = g_out
                            .iter()
                            .zip(&self.nodes[a.0].data)
                            .map(|(g, x)| g * x)
                            .collect();
                        self.accumulate(b, &db);
                    }
                }
                Op::Scale { a, factor } => {
                    if self.nodes[a.0].requires_grad {
                        let da: Vec<f64> = g_out.iter().map(|g| g * factor).collect();
                        self.accumulate(a, &da);
                    }
                }
                Op::Tanh { a } => {
                    if self.nodes[a.0].requires_grad {
                        let da: Vec<f64> = g_out
                            .iter()
                            .zip(&self.nodes[idx].data)
                            .map(|(g, y)| g * (1.0 - y * y))
                            .collect();
                        self.accumulate(a, &da);
                    }
                }
                Op::Sum { a } => {
                    if self.nodes[a.0].requires_grad {
                        let da = vec![g_out[0]; self.nodes[a.0].data.len()];
                        self.accumulate(a, &da);
                    }
                }
                Op::LogSoftmax { a } => {
                    if self.nodes[a.0].requires_grad {
                        let w = *self.nodes[idx].shape.last().unwrap();
                        let y = &self.nodes[idx].data;
                        let mut da = vec![0.0; y.len()];
                        for r in 0..y.len() / w {
                            let gs: f64 = g_out[r * w..(r + 1) * w].iter().sum();
                            for j in 0..w {
                                let p = y[r * w + j].exp();
                                da[r * w + j] = g_out[r * w + j] - p * gs;
                            }
                        }
                        self.accumulate(a, &da);
                    }
                }
                Op::Softmax { a } => {
                    if self.nodes[a.0].requires_grad {
                        let w = *self.nodes[idx].shape.last().unwrap();
                        let y = self.nodes[idx].data.clone();
                        let da = softmax_backward(&y, &g_out, w);
                        self.accumulate(a, &da);
                    }
                }
                Op::CrossEntropy {
                    logits,
                    targets,
                    probs,
                } => {
                    if self.nodes[logits.0].requires_grad {
                        let v = self.nodes[logits.0].shape[1];
                        let b = targets.len();
                        let scale = g_out[0] / b as f64;
                        let mut dl = vec![0.0; probs.len()];
                        for (i, &t) in targets.iter().enumerate() {
                            for j in 0..v {
                                let onehot = if j == t { 1.0 } else { 0.0 };
                                dl[i * v + j] = scale * (probs[i * v + j] - onehot);
                            }
                        }
                        self.accumulate(logits, &dl);
                    }
                }
                Op::GumbelSt {
                    logits,
                    inv_tau,
                    soft,
                } => {
                    if self.nodes[logits.0].requires_grad {
                        let w = *self.nodes[idx].shape.last().unwrap();
                        let mut da = softmax_backward(&soft, &g_out, w);
                        for g in &mut da {
                            *g *= inv_tau;
                        }
                        self.accumulate(logits, &da);
                    }
                }
                Op::ConcatRows { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let len = self.nodes[p.0].data.len();
                        if self.nodes[p.0].requires_grad {
                            let dp = g_out[offset..offset + len].to_vec();
                            self.accumulate(p, &dp);
                        }
                        offset += len;
                    }
                }
                Op::RepeatRow { row, count } => {
                    if self.nodes[row.0].requires_grad {
                        let n = self.nodes[row.0].shape[1];
                        let mut dr = vec![0.0; n];
                        for i in 0..count {
                            for j in 0..n {
                                dr[j] += g_out[i * n + j];
                            }
                        }
                        self.accumulate(row, &dr);
                    }
                }
            }
            // restore the output grad so callers can inspect interior nodes
            self.nodes[idx].grad = Some(g_out);
        }
        Ok(())
    }

    fn accumulate(&mut self, t: Tensor, delta: &[f64]) {
        let node = &mut self.nodes[t.0];
        match &mut node.grad {
            Some(g) => {
                for (gi, di) in g.iter_mut().zip(delta) {
                    *gi += di;
                }
            }
            None => node.grad = Some(delta.to_vec()),
        }
    }
}

// ── Kernels ───────────────────────────────────────────────────────────

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let crow = &mut c[i * n..(i + 1) * n];
            for j in 0..n {
                crow[j] += av * brow[j];
            }
        }
    }
    c
}

fn log_softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..x.len() / width {
        let row = &x[r * width..(r + 1) * width];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = row.iter().map(|v| (v - m).exp()).sum::<f64>().ln() + m;
        for j in 0..width {
            out[r * width + j] = row[j] - lse;
        }
    }
    out
}

fn softmax_rows(x: &[f64], width: usize) -> Vec<f64> {
    let mut out = vec![0.0; x.len()];
    for r in 0..x.len() / width {
        let row = &x[r * width..(r + 1) * width];
        let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for j in 0..width {
            let e = (row[j] - m).exp();
            out[r * width + j] = e;
            z += e;
        }
        for j in 0..width {
            out[r * width + j] /= z;
        }
    }
    out
}

/// dL/dx for y = softmax(x) given upstream u: y ⊙ (u − Σ u⊙y), per row.
fn softmax_backward(y: &[f64], upstream: &[f64], width: usize) -> Vec<f64> {
    let mut da = vec![0.0; y.len()];
    for r in 0..y.len() / width {
        let ys = &y[r * width..(r + 1) * width];
        let us = &upstream[r * width..(r + 1) * width];
        let dot: f64 = ys.iter().zip(us).map(|(a, b)| a * b).sum();
        for j in 0..width {
            da[r * width + j] = ys[j] * (us[j] - dot);
        }
    }
    da
}

/// First index of the maximum value; ties break toward the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate().skip(1) {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Cosine similarity of two flattened gradient vectors.
pub fn grad_cosine(g1: &[f64], g2: &[f64]) -> Result<f64> {
    if g1.len() != g2.len() {
        return Err(Error::Dimension {
            op: "grad_cosine",
            lhs: vec![g1.len()],
            rhs: vec![g2.len()],
        });
    }
    let n1: f64 = g1.iter().map(|x| x * x).sum::<f64>().sqrt();
    let n2: f64 = g2.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n1 == 0.0 || n2 == 0.0 {
        return Err(Error::UndefinedCosine);
    }
    // identical or negated inputs are exactly ±1; skip the round-trip noise
    if g1 == g2 {
        return Ok(1.0);
    }
    if g1.iter().zip(g2).all(|(a, b)| *a == -*b) {
        return Ok(-1.0);
    }
    let dot: f64 = g1.iter().zip(g2).map(|(a, b)| a * b).sum();
    Ok((dot / (n1 * n2)).clamp(-1.0, 1.0))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor2(tape: &mut Tape, rows: usize, cols: usize, v: &[f64], rg: bool) -> Tensor {
        tape.leaf(v.to_vec(), vec![rows, cols], rg).unwrap()
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let i2 = tensor2(&mut tape, 2, 2, &[1.0, 0.0, 0.0, 1.0], false);
        let m = tensor2(&mut tape, 2, 2, &[1.0, 2.0, 3.0, 4.0], false);
        let c = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.data(c), &[1.0, 2.0, 3.0, 4.0]);
    }

    #[test]
    fn matmul_projector() {
        let mut tape = Tape::new();
        let p = tensor2(&mut tape, 2, 2, &[1.0, 0.0, 0.0, 0.0], false);
        let m = tensor2(&mut tape, 2, 2, &[5.0, 6.0, 7.0, 8.0], false);
        let c = tape.matmul(p, m).unwrap();
        assert_eq!(tape.data(c), &[5.0, 6.0, 0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tensor2(&mut tape, 2, 3, &[0.0; 6], false);
        let b = tensor2(&mut tape, 2, 2, &[0.0; 4], false);
        match tape.matmul(a, b) {
            Err(Error::Dimension { lhs, rhs, .. }) => {
                assert_eq!(lhs, vec![2, 3]);
                assert_eq!(rhs, vec![2, 2]);
            }
            other => panic!("expected dimension error, got {other:?}"),
        }
    }

    #[test]
    fn log_softmax_uniform() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![0.0, 0.0, 0.0], vec![3], false).unwrap();
        let y = tape.log_softmax(x).unwrap();
        let expected = -(3.0f64).ln();
        for v in tape.data(y) {
            assert!((v - expected).abs() < 1e-12);
        }
    }

    #[test]
    fn log_softmax_large_shift_no_overflow() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![1000.0, 0.0], vec![2], false).unwrap();
        let y = tape.log_softmax(x).unwrap();
        let d = tape.data(y);
        assert!(d[0].abs() < 1e-9);
        assert!((d[1] + 1000.0).abs() < 1e-9);
        assert!(d.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn log_softmax_normalizes() {
        // exp(output) sums to 1 for arbitrary rows
        let mut rng = Rng::new(5);
        let mut tape = Tape::new();
        let vals: Vec<f64> = (0..4 * 7).map(|_| rng.uniform_in(-1e3, 1e3)).collect();
        let x = tape.leaf(vals, vec![4, 7], false).unwrap();
        let y = tape.log_softmax(x).unwrap();
        for r in 0..4 {
            let s: f64 = tape.data(y)[r * 7..(r + 1) * 7].iter().map(|v| v.exp()).sum();
            assert!((s - 1.0).abs() < 1e-9, "row {r} sums to {s}");
        }
    }

    #[test]
    fn log_softmax_rejects_nan() {
        let mut tape = Tape::new();
        let x = tape.leaf(vec![f64::NAN, 0.0], vec![2], false).unwrap();
        assert!(matches!(tape.log_softmax(x), Err(Error::Numeric(_))));
    }

    #[test]
    fn cross_entropy_confident_and_uniform() {
        let mut tape = Tape::new();
        // prob(target) -> 1 drives the loss to 0
        let confident = tensor2(&mut tape, 1, 3, &[50.0, 0.0, 0.0], false);
        let l = tape.cross_entropy(confident, &[0]).unwrap();
        assert!(tape.value(l) < 1e-9);
        // uniform logits, V=4 -> ln 4
        let uniform = tensor2(&mut tape, 1, 4, &[0.0; 4], false);
        let l = tape.cross_entropy(uniform, &[2]).unwrap();
        assert!((tape.value(l) - 4.0f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_target_out_of_range() {
        let mut tape = Tape::new();
        let logits = tensor2(&mut tape, 1, 3, &[0.0; 3], false);
        assert!(matches!(
            tape.cross_entropy(logits, &[3]),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn cross_entropy_gradient_is_softmax_minus_onehot_over_b() {
        let mut tape = Tape::new();
        let logits = tensor2(&mut tape, 2, 3, &[0.2, -0.4, 1.3, 0.0, 0.5, -0.7], true);
        let l = tape.cross_entropy(logits, &[2, 1]).unwrap();
        tape.backward(l).unwrap();
        let probs = softmax_rows(tape.data(logits), 3);
        let g = tape.grad(logits).unwrap();
        for (i, t) in [2usize, 1usize].iter().enumerate() {
            for j in 0..3 {
                let onehot = if j == *t { 1.0 } else { 0.0 };
                let want = (probs[i * 3 + j] - onehot) / 2.0;
                assert!((g[i * 3 + j] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn backward_sum_gives_ones() {
        let mut tape = Tape::new();
        let x = tensor2(&mut tape, 2, 2, &[1.0, 2.0, 3.0, 4.0], true);
        let s = tape.sum(x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn backward_accumulates_across_uses() {
        let mut tape = Tape::new();
        let x = tensor2(&mut tape, 1, 1, &[3.0], true);
        let two_x = tape.add(x, x).unwrap();
        let s = tape.sum(two_x);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tensor2(&mut tape, 2, 2, &[0.0; 4], true);
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn gumbel_st_is_exact_onehot() {
        let mut rng = Rng::new(17);
        for _ in 0..50 {
            let mut tape = Tape::new();
            let vals: Vec<f64> = (0..9).map(|_| rng.uniform_in(-4.0, 4.0)).collect();
            let logits = tape.leaf(vals, vec![9], false).unwrap();
            let y = tape.gumbel_softmax_st(logits, 0.5, &mut rng).unwrap();
            let d = tape.data(y);
            let ones = d.iter().filter(|&&v| v == 1.0).count();
            let zeros = d.iter().filter(|&&v| v == 0.0).count();
            assert_eq!(ones, 1);
            assert_eq!(zeros, 8);
        }
    }

    #[test]
    fn gumbel_st_zero_noise_matches_argmax() {
        let mut tape = Tape::new();
        let logits = tape
            .leaf(vec![0.3, 1.7, -2.0, 0.9], vec![4], false)
            .unwrap();
        for tau in [0.1, 0.5, 1.0, 7.0] {
            let y = tape
                .gumbel_softmax_st_with_noise(logits, tau, &[0.0; 4])
                .unwrap();
            assert_eq!(argmax(tape.data(y)), 1);
        }
    }

    #[test]
    fn gumbel_st_rejects_non_positive_tau() {
        let mut tape = Tape::new();
        let logits = tape.leaf(vec![0.0, 1.0], vec![2], false).unwrap();
        assert!(matches!(
            tape.gumbel_softmax_st_with_noise(logits, 0.0, &[0.0; 2]),
            Err(Error::Parameter(_))
        ));
        assert!(matches!(
            tape.gumbel_softmax_st_with_noise(logits, -1.0, &[0.0; 2]),
            Err(Error::Parameter(_))
        ));
    }

    #[test]
    fn gumbel_st_backward_equals_soft_path() {
        // grad of dot(st_out, v) must match grad of dot(softmax((x+g)/tau), v)
        let mut rng = Rng::new(23);
        for trial in 0..100 {
            let vals: Vec<f64> = (0..6).map(|_| rng.uniform_in(-3.0, 3.0)).collect();
            let noise: Vec<f64> = (0..6).map(|_| rng.gumbel()).collect();
            let weights: Vec<f64> = (0..6).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let tau = rng.uniform_in(0.2, 2.0);

            let mut st_tape = Tape::new();
            let logits = st_tape.leaf(vals.clone(), vec![6], true).unwrap();
            let st = st_tape
                .gumbel_softmax_st_with_noise(logits, tau, &noise)
                .unwrap();
            let v = st_tape.leaf(weights.clone(), vec![6], false).unwrap();
            let prod = st_tape.mul(st, v).unwrap();
            let loss = st_tape.sum(prod);
            st_tape.backward(loss).unwrap();
            let g_st = st_tape.grad(logits).unwrap().to_vec();

            let mut soft_tape = Tape::new();
            let logits2 = soft_tape.leaf(vals.clone(), vec![6], true).unwrap();
            let noise_t = soft_tape.leaf(noise.clone(), vec![6], false).unwrap();
            let shifted = soft_tape.add(logits2, noise_t).unwrap();
            let scaled = soft_tape.scale(shifted, 1.0 / tau);
            let soft = soft_tape.softmax(scaled).unwrap();
            let v2 = soft_tape.leaf(weights.clone(), vec![6], false).unwrap();
            let prod2 = soft_tape.mul(soft, v2).unwrap();
            let loss2 = soft_tape.sum(prod2);
            soft_tape.backward(loss2).unwrap();
            let g_soft = soft_tape.grad(logits2).unwrap().to_vec();

            for (a, b) in g_st.iter().zip(&g_soft) {
                assert!((a - b).abs() < 1e-12, "trial {trial}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn concat_rows_backward_splits() {
        let mut tape = Tape::new();
        let a = tensor2(&mut tape, 1, 2, &[1.0, 2.0], true);
        let b = tensor2(&mut tape, 2, 2, &[3.0, 4.0, 5.0, 6.0], true);
        let c = tape.concat_rows(&[a, b]).unwrap();
        assert_eq!(tape.shape(c), &[3, 2]);
        let w = tensor2(&mut tape, 3, 2, &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0], false);
        let prod = tape.mul(c, w).unwrap();
        let s = tape.sum(prod);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(a).unwrap(), &[1.0, 2.0]);
        assert_eq!(tape.grad(b).unwrap(), &[3.0, 4.0, 5.0, 6.0]);
    }

    #[test]
    fn repeat_row_backward_sums() {
        let mut tape = Tape::new();
        let row = tensor2(&mut tape, 1, 3, &[0.5, -1.0, 2.0], true);
        let tiled = tape.repeat_row(row, 4).unwrap();
        let s = tape.sum(tiled);
        tape.backward(s).unwrap();
        assert_eq!(tape.grad(row).unwrap(), &[4.0, 4.0, 4.0]);
    }

    #[test]
    fn grad_cosine_basic() {
        let g = vec![0.3, -1.2, 4.0];
        let neg: Vec<f64> = g.iter().map(|x| -x).collect();
        assert_eq!(grad_cosine(&g, &g).unwrap(), 1.0);
        assert_eq!(grad_cosine(&g, &neg).unwrap(), -1.0);
        assert_eq!(grad_cosine(&[1.0, 0.0], &[0.0, 1.0]).unwrap(), 0.0);
        assert!(matches!(
            grad_cosine(&[0.0, 0.0], &[1.0, 0.0]),
            Err(Error::UndefinedCosine)
        ));
        assert!(matches!(
            grad_cosine(&[1.0], &[1.0, 0.0]),
            Err(Error::Dimension { .. })
        ));
    }

    #[test]
    fn no_grad_tape_records_nothing() {
        let mut tape = Tape::no_grad();
        let x = tape.leaf(vec![1.0, 2.0], vec![1, 2], true).unwrap();
        assert!(!tape.requires_grad(x));
        let y = tape.tanh(x);
        assert!(!tape.requires_grad(y));
    }

    #[test]
    fn replay_is_bit_identical() {
        let run = |seed: u64| -> u64 {
            let mut rng = Rng::new(seed);
            let mut tape = Tape::new();
            let vals: Vec<f64> = (0..12).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let x = tape.leaf(vals, vec![3, 4], true).unwrap();
            let h = tape.tanh(x);
            let y = tape.gumbel_softmax_st_rows(h, 0.5, &mut rng).unwrap();
            let wvals: Vec<f64> = (0..12).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            let w = tape.leaf(wvals, vec![3, 4], false).unwrap();
            let prod = tape.mul(y, w).unwrap();
            let s = tape.sum(prod);
            tape.value(s).to_bits()
        };
        assert_eq!(run(99), run(99));
    }
}
