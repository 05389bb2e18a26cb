//! Dense f64 tensors and a tape-based reverse-mode differentiation engine.
//!
//! Operations record nodes on a [`Tape`] (a Wengert list). [`Tape::backward`]
//! replays the list in reverse and accumulates gradients into every leaf that
//! was registered with `requires_grad`. Tensors detached from any tape are
//! plain immutable value holders and can be shared freely across threads; a
//! tape itself is single-threaded. Heavy kernels (convolution) parallelize
//! internally over disjoint output partitions, so results do not depend on
//! thread scheduling.

mod kernels;

use crate::error::{Error, Result};

/// A dense tensor: row-major f64 values plus a shape.
///
/// Detached from any tape. Scalars use the empty shape `[]`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    values: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, values: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(Error::ShapeMismatch {
                op: "tensor_new",
                detail: format!("shape {:?} implies {} values, got {}", shape, numel, values.len()),
            });
        }
        Ok(Tensor { shape, values })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, values: vec![0.0; numel] }
    }

    pub fn full(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Tensor { shape, values: vec![value; numel] }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor { shape: vec![], values: vec![value] }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        &mut self.values
    }

    pub fn numel(&self) -> usize {
        self.values.len()
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

/// Batch-normalization statistics source.
#[derive(Debug, Clone)]
pub enum BnStats {
    /// Normalize with the mean/variance of the presented batch.
    Batch,
    /// Normalize with fixed (running) statistics; no dependence on the batch.
    Fixed { mean: Vec<f64>, var: Vec<f64> },
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Constant,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddScalar(Var),
    MulScalar(Var, f64),
    Log(Var),
    Exp(Var),
    Sqrt(Var),
    Relu(Var),
    ClampMin(Var, f64),
    SumAll(Var),
    MeanAll(Var),
    /// Broadcast a scalar to the node's shape.
    Expand(Var),
    /// Multiply channel c of a B×C×H×W tensor by weights[c].
    ScaleChannels(Var, Vec<f64>),
    SoftmaxChannels(Var),
    ConcatChannels(Var, Var),
    /// Extract the H×W map at (batch, channel) from a B×C×H×W tensor.
    SelectMap(Var, usize, usize),
    Conv2d {
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    },
    Upsample2x(Var),
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
        batch_stats: bool,
        /// Per-channel statistics actually used for normalization.
        mean: Vec<f64>,
        invstd: Vec<f64>,
    },
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    shape: Vec<usize>,
    values: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

/// Recorded forward pass; owns all intermediate values and gradients.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    spent: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), spent: false }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, op: Op, shape: Vec<usize>, values: Vec<f64>, requires_grad: bool) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node { op, shape, values, grad: None, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn values(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].values
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].values.len()
    }

    /// Value of a scalar node.
    pub fn scalar(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].values.len(), 1);
        self.nodes[v.0].values[0]
    }

    /// Gradient of a node, if populated by `backward`.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    // ----- leaves -----

    pub fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Var {
        self.push(Op::Leaf, t.shape.clone(), t.values.clone(), requires_grad)
    }

    pub fn constant(&mut self, shape: Vec<usize>, values: Vec<f64>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if values.len() != numel {
            return Err(Error::ShapeMismatch {
                op: "constant",
                detail: format!("shape {:?} implies {} values, got {}", shape, numel, values.len()),
            });
        }
        Ok(self.push(Op::Constant, shape, values, false))
    }

    pub fn scalar_const(&mut self, value: f64) -> Var {
        self.push(Op::Constant, vec![], vec![value], false)
    }

    // ----- element-wise binary -----

    fn check_same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.nodes[a.0].shape != self.nodes[b.0].shape {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("add", a, b)?;
        let values = zip_map(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Add(a, b), self.nodes[a.0].shape.clone(), values, rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("sub", a, b)?;
        let values = zip_map(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Sub(a, b), self.nodes[a.0].shape.clone(), values, rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("mul", a, b)?;
        let values = zip_map(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Mul(a, b), self.nodes[a.0].shape.clone(), values, rg))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape("div", a, b)?;
        let values = zip_map(&self.nodes[a.0].values, &self.nodes[b.0].values, |x, y| x / y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::Div(a, b), self.nodes[a.0].shape.clone(), values, rg))
    }

    // ----- scalar-constant ops -----

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let values = self.nodes[a.0].values.iter().map(|x| x + c).collect();
        let rg = self.rg(a);
        self.push(Op::AddScalar(a), self.nodes[a.0].shape.clone(), values, rg)
    }

    pub fn mul_scalar(&mut self, a: Var, c: f64) -> Var {
        let values = self.nodes[a.0].values.iter().map(|x| x * c).collect();
        let rg = self.rg(a);
        self.push(Op::MulScalar(a, c), self.nodes[a.0].shape.clone(), values, rg)
    }

    // ----- element-wise unary -----

    pub fn log(&mut self, a: Var) -> Var {
        let values = self.nodes[a.0].values.iter().map(|x| x.ln()).collect();
        let rg = self.rg(a);
        self.push(Op::Log(a), self.nodes[a.0].shape.clone(), values, rg)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let values = self.nodes[a.0].values.iter().map(|x| x.exp()).collect();
        let rg = self.rg(a);
        self.push(Op::Exp(a), self.nodes[a.0].shape.clone(), values, rg)
    }

    /// Square root with the convention sqrt'(0) = 0, keeping gradients finite
    /// for exactly-zero spreads.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let values = self.nodes[a.0].values.iter().map(|x| x.sqrt()).collect();
        let rg = self.rg(a);
        self.push(Op::Sqrt(a), self.nodes[a.0].shape.clone(), values, rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let values = self.nodes[a.0].values.iter().map(|x| x.max(0.0)).collect();
        let rg = self.rg(a);
        self.push(Op::Relu(a), self.nodes[a.0].shape.clone(), values, rg)
    }

    /// max(x, c) element-wise.
    pub fn clamp_min(&mut self, a: Var, c: f64) -> Var {
        let values = self.nodes[a.0].values.iter().map(|x| x.max(c)).collect();
        let rg = self.rg(a);
        self.push(Op::ClampMin(a, c), self.nodes[a.0].shape.clone(), values, rg)
    }

    // ----- reductions -----

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].values.iter().sum();
        let rg = self.rg(a);
        self.push(Op::SumAll(a), vec![], vec![s], rg)
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].values.len() as f64;
        let s: f64 = self.nodes[a.0].values.iter().sum();
        let rg = self.rg(a);
        self.push(Op::MeanAll(a), vec![], vec![s / n], rg)
    }

    /// Broadcast a scalar node to `shape`.
    pub fn expand(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if self.nodes[a.0].values.len() != 1 {
            return Err(Error::ShapeMismatch {
                op: "expand",
                detail: format!("expected scalar input, got shape {:?}", self.nodes[a.0].shape),
            });
        }
        let numel: usize = shape.iter().product();
        let values = vec![self.nodes[a.0].values[0]; numel];
        let rg = self.rg(a);
        Ok(self.push(Op::Expand(a), shape, values, rg))
    }

    // ----- structured ops on B×C×H×W tensors -----

    fn rank4(&self, op: &'static str, a: Var) -> Result<[usize; 4]> {
        let s = &self.nodes[a.0].shape;
        if s.len() != 4 {
            return Err(Error::ShapeMismatch {
                op,
                detail: format!("expected rank-4 B×C×H×W tensor, got {:?}", s),
            });
        }
        Ok([s[0], s[1], s[2], s[3]])
    }

    /// Multiply channel c by `weights[c]` across a B×C×H×W tensor.
    pub fn scale_channels(&mut self, a: Var, weights: &[f64]) -> Result<Var> {
        let [b, c, h, w] = self.rank4("scale_channels", a)?;
        if weights.len() != c {
            return Err(Error::ShapeMismatch {
                op: "scale_channels",
                detail: format!("{} channels but {} weights", c, weights.len()),
            });
        }
        let plane = h * w;
        let mut values = self.nodes[a.0].values.clone();
        for bi in 0..b {
            for ci in 0..c {
                let base = (bi * c + ci) * plane;
                let wv = weights[ci];
                for v in &mut values[base..base + plane] {
                    *v *= wv;
                }
            }
        }
        let rg = self.rg(a);
        Ok(self.push(Op::ScaleChannels(a, weights.to_vec()), vec![b, c, h, w], values, rg))
    }

    /// Numerically stable softmax over the channel axis of a B×K×H×W tensor.
    pub fn softmax_channels(&mut self, a: Var) -> Result<Var> {
        let [b, k, h, w] = self.rank4("softmax_channels", a)?;
        let values = kernels::softmax_channels(&self.nodes[a.0].values, b, k, h, w);
        let rg = self.rg(a);
        Ok(self.push(Op::SoftmaxChannels(a), vec![b, k, h, w], values, rg))
    }

    /// Concatenate two B×C×H×W tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let [ba, ca, ha, wa] = self.rank4("concat_channels", a)?;
        let [bb, cb, hb, wb] = self.rank4("concat_channels", b)?;
        if ba != bb || ha != hb || wa != wb {
            return Err(Error::ShapeMismatch {
                op: "concat_channels",
                detail: format!("{:?} vs {:?}", self.nodes[a.0].shape, self.nodes[b.0].shape),
            });
        }
        let plane = ha * wa;
        let mut values = Vec::with_capacity(ba * (ca + cb) * plane);
        for bi in 0..ba {
            values.extend_from_slice(
                &self.nodes[a.0].values[bi * ca * plane..(bi + 1) * ca * plane],
            );
            values.extend_from_slice(
                &self.nodes[b.0].values[bi * cb * plane..(bi + 1) * cb * plane],
            );
        }
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Op::ConcatChannels(a, b), vec![ba, ca + cb, ha, wa], values, rg))
    }

    /// Extract the H×W map at (batch, channel) from a B×C×H×W tensor.
    pub fn select_map(&mut self, a: Var, batch: usize, channel: usize) -> Result<Var> {
        let [b, c, h, w] = self.rank4("select_map", a)?;
        if batch >= b || channel >= c {
            return Err(Error::ShapeMismatch {
                op: "select_map",
                detail: format!("index ({},{}) out of range for shape {:?}", batch, channel, [b, c, h, w]),
            });
        }
        let plane = h * w;
        let base = (batch * c + channel) * plane;
        let values = self.nodes[a.0].values[base..base + plane].to_vec();
        let rg = self.rg(a);
        Ok(self.push(Op::SelectMap(a, batch, channel), vec![h, w], values, rg))
    }

    /// 2D convolution: x B×Ci×H×W, w Co×Ci×kh×kw, optional per-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, bias: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [b, ci, h, wd] = self.rank4("conv2d", x)?;
        let ws = self.nodes[w.0].shape.clone();
        if ws.len() != 4 || ws[1] != ci {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("input {:?} incompatible with kernel {:?}", self.nodes[x.0].shape, ws),
            });
        }
        let (co, kh, kw) = (ws[0], ws[2], ws[3]);
        if let Some(bv) = bias {
            if self.nodes[bv.0].shape != [co] {
                return Err(Error::ShapeMismatch {
                    op: "conv2d",
                    detail: format!("bias shape {:?}, expected [{}]", self.nodes[bv.0].shape, co),
                });
            }
        }
        if h + 2 * pad < kh || wd + 2 * pad < kw || stride == 0 {
            return Err(Error::ShapeMismatch {
                op: "conv2d",
                detail: format!("kernel {}x{} stride {} pad {} does not fit input {}x{}", kh, kw, stride, pad, h, wd),
            });
        }
        let oh = (h + 2 * pad - kh) / stride + 1;
        let ow = (wd + 2 * pad - kw) / stride + 1;
        let values = kernels::conv2d_forward(
            &self.nodes[x.0].values,
            &self.nodes[w.0].values,
            bias.map(|bv| self.nodes[bv.0].values.as_slice()),
            [b, ci, h, wd],
            [co, ci, kh, kw],
            stride,
            pad,
        );
        let rg = self.rg(x) || self.rg(w) || bias.map(|bv| self.rg(bv)).unwrap_or(false);
        Ok(self.push(Op::Conv2d { x, w, bias, stride, pad }, vec![b, co, oh, ow], values, rg))
    }

    /// Nearest-neighbor 2x upsampling of a B×C×H×W tensor.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let [b, c, h, w] = self.rank4("upsample2x", a)?;
        let values = kernels::upsample2x_forward(&self.nodes[a.0].values, b, c, h, w);
        let rg = self.rg(a);
        Ok(self.push(Op::Upsample2x(a), vec![b, c, 2 * h, 2 * w], values, rg))
    }

    /// Batch normalization with affine parameters over a B×C×H×W tensor.
    ///
    /// `BnStats::Batch` normalizes with the presented batch's per-channel
    /// mean/variance (biased); `BnStats::Fixed` uses the supplied constants.
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64, stats: BnStats) -> Result<Var> {
        let [b, c, h, w] = self.rank4("batch_norm", x)?;
        if self.nodes[gamma.0].shape != [c] || self.nodes[beta.0].shape != [c] {
            return Err(Error::ShapeMismatch {
                op: "batch_norm",
                detail: format!(
                    "gamma {:?} / beta {:?} incompatible with {} channels",
                    self.nodes[gamma.0].shape, self.nodes[beta.0].shape, c
                ),
            });
        }
        let (mean, var, batch_stats) = match stats {
            BnStats::Batch => {
                let (m, v) = kernels::channel_stats(&self.nodes[x.0].values, b, c, h, w);
                (m, v, true)
            }
            BnStats::Fixed { mean, var } => {
                if mean.len() != c || var.len() != c {
                    return Err(Error::ShapeMismatch {
                        op: "batch_norm",
                        detail: format!("fixed stats length {}/{}, expected {}", mean.len(), var.len(), c),
                    });
                }
                (mean, var, false)
            }
        };
        let invstd: Vec<f64> = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        let values = kernels::batch_norm_forward(
            &self.nodes[x.0].values,
            &self.nodes[gamma.0].values,
            &self.nodes[beta.0].values,
            &mean,
            &invstd,
            b,
            c,
            h,
            w,
        );
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        Ok(self.push(
            Op::BatchNorm { x, gamma, beta, eps, batch_stats, mean, invstd },
            vec![b, c, h, w],
            values,
            rg,
        ))
    }

    /// Per-channel mean and biased variance used by the most recent
    /// `batch_norm` node `v` (for running-statistics bookkeeping).
    pub fn bn_stats(&self, v: Var) -> Option<(Vec<f64>, Vec<f64>)> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { mean, invstd, eps, .. } => {
                let var: Vec<f64> = invstd.iter().map(|s| 1.0 / (s * s) - eps).collect();
                Some((mean.clone(), var))
            }
            _ => None,
        }
    }

    // ----- backward -----

    /// Populate gradients of every `requires_grad` node reachable from `loss`.
    ///
    /// `loss` must be scalar. A tape can only be differentiated once.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.spent {
            return Err(Error::TapeConsumed);
        }
        if !self.nodes[loss.0].shape.is_empty() {
            return Err(Error::NonScalarLoss { shape: self.nodes[loss.0].shape.clone() });
        }
        self.spent = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let is_interior = !matches!(self.nodes[i].op, Op::Leaf | Op::Constant);
            if !is_interior {
                continue;
            }
            // Interior gradients are consumed exactly once; leaves keep theirs.
            let g = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g);
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<f64>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(g) => {
                for (gi, ci) in g.iter_mut().zip(contrib.iter()) {
                    *gi += ci;
                }
            }
            slot @ None => *slot = Some(contrib),
        }
    }

    fn backprop_node(&mut self, i: usize, g: &[f64]) {
        let op = self.nodes[i].op.clone();
        match op {
            Op::Leaf | Op::Constant => {}
            Op::Add(a, b) => {
                if self.rg(a) {
                    self.accumulate(a, g.to_vec());
                }
                if self.rg(b) {
                    self.accumulate(b, g.to_vec());
                }
            }
            Op::Sub(a, b) => {
                if self.rg(a) {
                    self.accumulate(a, g.to_vec());
                }
                if self.rg(b) {
                    self.accumulate(b, g.iter().map(|x| -x).collect());
                }
            }
            Op::Mul(a, b) => {
                if self.rg(a) {
                    let c = zip_map(g, &self.nodes[b.0].values, |gi, bv| gi * bv);
                    self.accumulate(a, c);
                }
                if self.rg(b) {
                    let c = zip_map(g, &self.nodes[a.0].values, |gi, av| gi * av);
                    self.accumulate(b, c);
                }
            }
            Op::Div(a, b) => {
                if self.rg(a) {
                    let c = zip_map(g, &self.nodes[b.0].values, |gi, bv| gi / bv);
                    self.accumulate(a, c);
                }
                if self.rg(b) {
                    let av = &self.nodes[a.0].values;
                    let bv = &self.nodes[b.0].values;
                    let c = g
                        .iter()
                        .zip(av.iter().zip(bv.iter()))
                        .map(|(gi, (x, y))| -gi * x / (y * y))
                        .collect();
                    self.accumulate(b, c);
                }
            }
            Op::AddScalar(a) => {
                if self.rg(a) {
                    self.accumulate(a, g.to_vec());
                }
            }
            Op::MulScalar(a, c) => {
                if self.rg(a) {
                    self.accumulate(a, g.iter().map(|x| x * c).collect());
                }
            }
            Op::Log(a) => {
                if self.rg(a) {
                    let c = zip_map(g, &self.nodes[a.0].values, |gi, x| gi / x);
                    self.accumulate(a, c);
                }
            }
            Op::Exp(a) => {
                if self.rg(a) {
                    let c = zip_map(g, &self.nodes[i].values, |gi, y| gi * y);
                    self.accumulate(a, c);
                }
            }
            Op::Sqrt(a) => {
                if self.rg(a) {
                    let c = zip_map(g, &self.nodes[i].values, |gi, y| if y > 0.0 { gi / (2.0 * y) } else { 0.0 });
                    self.accumulate(a, c);
                }
            }
            Op::Relu(a) => {
                if self.rg(a) {
                    let c = zip_map(g, &self.nodes[a.0].values, |gi, x| if x > 0.0 { gi } else { 0.0 });
                    self.accumulate(a, c);
                }
            }
            Op::ClampMin(a, c0) => {
                if self.rg(a) {
                    let c = zip_map(g, &self.nodes[a.0].values, |gi, x| if x > c0 { gi } else { 0.0 });
                    self.accumulate(a, c);
                }
            }
            Op::SumAll(a) => {
                if self.rg(a) {
                    let n = self.nodes[a.0].values.len();
                    self.accumulate(a, vec![g[0]; n]);
                }
            }
            Op::MeanAll(a) => {
                if self.rg(a) {
                    let n = self.nodes[a.0].values.len();
                    self.accumulate(a, vec![g[0] / n as f64; n]);
                }
            }
            Op::Expand(a) => {
                if self.rg(a) {
                    self.accumulate(a, vec![g.iter().sum()]);
                }
            }
            Op::ScaleChannels(a, weights) => {
                if self.rg(a) {
                    let s = &self.nodes[i].shape;
                    let (b, c, plane) = (s[0], s[1], s[2] * s[3]);
                    let mut contrib = g.to_vec();
                    for bi in 0..b {
                        for ci in 0..c {
                            let base = (bi * c + ci) * plane;
                            let wv = weights[ci];
                            for v in &mut contrib[base..base + plane] {
                                *v *= wv;
                            }
                        }
                    }
                    self.accumulate(a, contrib);
                }
            }
            Op::SoftmaxChannels(a) => {
                if self.rg(a) {
                    let s = &self.nodes[i].shape;
                    let c = kernels::softmax_channels_backward(g, &self.nodes[i].values, s[0], s[1], s[2], s[3]);
                    self.accumulate(a, c);
                }
            }
            Op::ConcatChannels(a, b) => {
                let sa = self.nodes[a.0].shape.clone();
                let sb = self.nodes[b.0].shape.clone();
                let (ba, ca, plane) = (sa[0], sa[1], sa[2] * sa[3]);
                let cb = sb[1];
                if self.rg(a) {
                    let mut ga = Vec::with_capacity(ba * ca * plane);
                    for bi in 0..ba {
                        let base = bi * (ca + cb) * plane;
                        ga.extend_from_slice(&g[base..base + ca * plane]);
                    }
                    self.accumulate(a, ga);
                }
                if self.rg(b) {
                    let mut gb = Vec::with_capacity(ba * cb * plane);
                    for bi in 0..ba {
                        let base = bi * (ca + cb) * plane + ca * plane;
                        gb.extend_from_slice(&g[base..base + cb * plane]);
                    }
                    self.accumulate(b, gb);
                }
            }
            Op::SelectMap(a, batch, channel) => {
                if self.rg(a) {
                    let sa = self.nodes[a.0].shape.clone();
                    let (c, plane) = (sa[1], sa[2] * sa[3]);
                    let mut contrib = vec![0.0; self.nodes[a.0].values.len()];
                    let base = (batch * c + channel) * plane;
                    contrib[base..base + plane].copy_from_slice(g);
                    self.accumulate(a, contrib);
                }
            }
            Op::Conv2d { x, w, bias, stride, pad } => {
                let xs4 = {
                    let s = &self.nodes[x.0].shape;
                    [s[0], s[1], s[2], s[3]]
                };
                let ws4 = {
                    let s = &self.nodes[w.0].shape;
                    [s[0], s[1], s[2], s[3]]
                };
                if self.rg(x) {
                    let gx = kernels::conv2d_backward_input(g, &self.nodes[w.0].values, xs4, ws4, stride, pad);
                    self.accumulate(x, gx);
                }
                if self.rg(w) {
                    let gw = kernels::conv2d_backward_weight(g, &self.nodes[x.0].values, xs4, ws4, stride, pad);
                    self.accumulate(w, gw);
                }
                if let Some(bv) = bias {
                    if self.rg(bv) {
                        let os = &self.nodes[i].shape;
                        let gb = kernels::conv2d_backward_bias(g, os[0], os[1], os[2] * os[3]);
                        self.accumulate(bv, gb);
                    }
                }
            }
            Op::Upsample2x(a) => {
                if self.rg(a) {
                    let s = &self.nodes[a.0].shape;
                    let c = kernels::upsample2x_backward(g, s[0], s[1], s[2], s[3]);
                    self.accumulate(a, c);
                }
            }
            Op::BatchNorm { x, gamma, beta, eps: _, batch_stats, mean, invstd } => {
                let s = &self.nodes[i].shape;
                let (b, c, h, w) = (s[0], s[1], s[2], s[3]);
                let xv = &self.nodes[x.0].values;
                let gammav = &self.nodes[gamma.0].values;
                let (gx, ggamma, gbeta) = kernels::batch_norm_backward(
                    g,
                    xv,
                    gammav,
                    &mean,
                    &invstd,
                    b,
                    c,
                    h,
                    w,
                    batch_stats,
                    self.rg(x),
                );
                if self.rg(x) {
                    self.accumulate(x, gx);
                }
                if self.rg(gamma) {
                    self.accumulate(gamma, ggamma);
                }
                if self.rg(beta) {
                    self.accumulate(beta, gbeta);
                }
            }
        }
    }
}

fn zip_map(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b.iter()).map(|(x, y)| f(*x, *y)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tensor(shape: &[usize], values: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), values.to_vec()).unwrap()
    }

    #[test]
    fn add_and_sum() {
        let mut tape = Tape::new();
        let a = tape.leaf(&tensor(&[2, 2], &[1.0, 2.0, 3.0, 4.0]), false);
        let s = tape.sum_all(a);
        assert_eq!(tape.scalar(s), 10.0);
    }

    #[test]
    fn relu_values() {
        let mut tape = Tape::new();
        let a = tape.leaf(&tensor(&[2], &[-3.0, 2.5]), false);
        let r = tape.relu(a);
        assert_eq!(tape.values(r), &[0.0, 2.5]);
    }

    #[test]
    fn softmax_uniform_on_zero_logits() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(vec![1, 4, 2, 2]), false);
        let s = tape.softmax_channels(a).unwrap();
        for v in tape.values(s) {
            assert!((v - 0.25).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_rows_are_simplex() {
        let mut tape = Tape::new();
        let mut vals = Vec::new();
        let mut state = 123u64;
        for _ in 0..(1 * 5 * 3 * 3) {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            vals.push(((state >> 33) as f64 / (1u64 << 31) as f64) * 8.0 - 4.0);
        }
        let a = tape.leaf(&tensor(&[1, 5, 3, 3], &vals), false);
        let s = tape.softmax_channels(a).unwrap();
        let sv = tape.values(s);
        for y in 0..3 {
            for x in 0..3 {
                let mut sum = 0.0;
                for k in 0..5 {
                    let v = sv[k * 9 + y * 3 + x];
                    assert!((0.0..=1.0).contains(&v));
                    sum += v;
                }
                assert!((sum - 1.0).abs() <= 1e-12, "pixel sum {}", sum);
            }
        }
    }

    #[test]
    fn square_gradient() {
        // loss = x^2 at x = 3 -> dloss/dx = 6
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[6.0]);
    }

    #[test]
    fn unused_leaf_has_no_gradient() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(3.0), true);
        let z = tape.leaf(&Tensor::scalar(5.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(tape.grad(z).is_none());
    }

    #[test]
    fn double_backward_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::scalar(2.0), true);
        let y = tape.mul(x, x).unwrap();
        tape.backward(y).unwrap();
        assert!(matches!(tape.backward(y), Err(Error::TapeConsumed)));
    }

    #[test]
    fn non_scalar_loss_rejected() {
        let mut tape = Tape::new();
        let x = tape.leaf(&tensor(&[2], &[1.0, 2.0]), true);
        let y = tape.relu(x);
        assert!(matches!(tape.backward(y), Err(Error::NonScalarLoss { .. })));
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut tape = Tape::new();
        let a = tape.leaf(&Tensor::zeros(vec![2, 3]), false);
        let b = tape.leaf(&Tensor::zeros(vec![3, 2]), false);
        let err = tape.add(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("add") && msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{}", msg);
    }

    // Central finite differences for f: R^n -> R evaluated through a closure
    // that rebuilds the computation from raw leaf values.
    fn finite_diff(values: &[f64], f: &dyn Fn(&[f64]) -> f64, h: f64) -> Vec<f64> {
        let mut grads = Vec::with_capacity(values.len());
        let mut work = values.to_vec();
        for i in 0..values.len() {
            let v0 = work[i];
            let step = h * v0.abs().max(1.0);
            work[i] = v0 + step;
            let fp = f(&work);
            work[i] = v0 - step;
            let fm = f(&work);
            work[i] = v0;
            grads.push((fp - fm) / (2.0 * step));
        }
        grads
    }

    fn max_rel_err(analytic: &[f64], numeric: &[f64]) -> f64 {
        analytic
            .iter()
            .zip(numeric.iter())
            .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(1e-6))
            .fold(0.0, f64::max)
    }

    fn lcg_uniform(state: &mut u64, lo: f64, hi: f64) -> f64 {
        *state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
        lo + ((*state >> 33) as f64 / (1u64 << 31) as f64) * (hi - lo)
    }

    /// Gradient check for every op kind on random small inputs across seeds.
    #[test]
    fn per_op_gradients_match_finite_differences() {
        type Builder = fn(&mut Tape, &[f64]) -> Var;
        // Each case: (name, input length, positive-only, builder). The input
        // vector is consumed only by requires_grad leaves, in push order.
        let cases: Vec<(&str, usize, bool, Builder)> = vec![
            ("add", 4, false, |t, v| {
                let a = t.leaf(&Tensor::new(vec![4], v.to_vec()).unwrap(), true);
                let b = t.constant(vec![4], vec![0.7, -0.3, 1.2, 0.4]).unwrap();
                let s = t.add(a, b).unwrap();
                let m = t.mul(s, s).unwrap();
                t.sum_all(m)
            }),
            ("sub_mul", 8, false, |t, v| {
                let a = t.leaf(&Tensor::new(vec![4], v[..4].to_vec()).unwrap(), true);
                let b = t.leaf(&Tensor::new(vec![4], v[4..].to_vec()).unwrap(), true);
                let d = t.sub(a, b).unwrap();
                let m = t.mul(d, a).unwrap();
                t.sum_all(m)
            }),
            ("div", 8, true, |t, v| {
                let a = t.leaf(&Tensor::new(vec![4], v[..4].to_vec()).unwrap(), true);
                let b = t.leaf(&Tensor::new(vec![4], v[4..].to_vec()).unwrap(), true);
                let d = t.div(a, b).unwrap();
                t.sum_all(d)
            }),
            ("log", 6, true, |t, v| {
                let a = t.leaf(&Tensor::new(vec![6], v.to_vec()).unwrap(), true);
                let l = t.log(a);
                t.sum_all(l)
            }),
            ("exp", 6, false, |t, v| {
                let a = t.leaf(&Tensor::new(vec![6], v.to_vec()).unwrap(), true);
                let e = t.exp(a);
                t.sum_all(e)
            }),
            ("sqrt", 6, true, |t, v| {
                let a = t.leaf(&Tensor::new(vec![6], v.to_vec()).unwrap(), true);
                let s = t.sqrt(a);
                t.sum_all(s)
            }),
            ("relu", 6, false, |t, v| {
                let a = t.leaf(&Tensor::new(vec![6], v.to_vec()).unwrap(), true);
                let r = t.relu(a);
                let m = t.mul(r, r).unwrap();
                t.sum_all(m)
            }),
            ("clamp_min", 6, false, |t, v| {
                let a = t.leaf(&Tensor::new(vec![6], v.to_vec()).unwrap(), true);
                let r = t.clamp_min(a, 0.35);
                let m = t.mul(r, r).unwrap();
                t.sum_all(m)
            }),
            ("mean_scalar_ops", 6, false, |t, v| {
                let a = t.leaf(&Tensor::new(vec![6], v.to_vec()).unwrap(), true);
                let m = t.mul_scalar(a, 2.5);
                let m = t.add_scalar(m, -0.75);
                t.mean_all(m)
            }),
            ("expand", 5, false, |t, v| {
                let a = t.leaf(&Tensor::new(vec![4], v[..4].to_vec()).unwrap(), true);
                let s = t.leaf(&Tensor::scalar(v[4]), true);
                let e = t.expand(s, vec![4]).unwrap();
                let d = t.sub(a, e).unwrap();
                let m = t.mul(d, d).unwrap();
                t.sum_all(m)
            }),
            ("scale_channels", 12, false, |t, v| {
                let a = t.leaf(&Tensor::new(vec![1, 3, 2, 2], v.to_vec()).unwrap(), true);
                let s = t.scale_channels(a, &[0.3, 1.7, -0.9]).unwrap();
                let m = t.mul(s, s).unwrap();
                t.sum_all(m)
            }),
            ("softmax", 12, false, |t, v| {
                let a = t.leaf(&Tensor::new(vec![1, 3, 2, 2], v.to_vec()).unwrap(), true);
                let s = t.softmax_channels(a).unwrap();
                let c = t.clamp_min(s, 1e-12);
                let l = t.log(c);
                let p = t.mul(s, l).unwrap();
                t.sum_all(p)
            }),
            ("concat_select", 16, false, |t, v| {
                let a = t.leaf(&Tensor::new(vec![1, 2, 2, 2], v[..8].to_vec()).unwrap(), true);
                let b = t.leaf(&Tensor::new(vec![1, 2, 2, 2], v[8..].to_vec()).unwrap(), true);
                let c = t.concat_channels(a, b).unwrap();
                let m0 = t.select_map(c, 0, 1).unwrap();
                let m1 = t.select_map(c, 0, 2).unwrap();
                let p = t.mul(m0, m1).unwrap();
                t.sum_all(p)
            }),
            ("conv2d_s1", 34, false, |t, v| {
                let x = t.leaf(&Tensor::new(vec![1, 2, 3, 3], v[..18].to_vec()).unwrap(), true);
                let w = t.leaf(&Tensor::new(vec![2, 2, 2, 2], v[18..34].to_vec()).unwrap(), true);
                let y = t.conv2d(x, w, None, 1, 1).unwrap();
                let m = t.mul(y, y).unwrap();
                t.sum_all(m)
            }),
            ("conv2d_3x3_fused", 50, false, |t, v| {
                let x = t.leaf(&Tensor::new(vec![1, 2, 4, 4], v[..32].to_vec()).unwrap(), true);
                let w = t.leaf(&Tensor::new(vec![1, 2, 3, 3], v[32..50].to_vec()).unwrap(), true);
                let y = t.conv2d(x, w, None, 1, 1).unwrap();
                let m = t.mul(y, y).unwrap();
                t.sum_all(m)
            }),
            ("conv2d_s2_bias", 36, false, |t, v| {
                let x = t.leaf(&Tensor::new(vec![1, 1, 4, 4], v[..16].to_vec()).unwrap(), true);
                let w = t.leaf(&Tensor::new(vec![2, 1, 3, 3], v[16..34].to_vec()).unwrap(), true);
                let b = t.leaf(&Tensor::new(vec![2], v[34..36].to_vec()).unwrap(), true);
                let y = t.conv2d(x, w, Some(b), 2, 1).unwrap();
                let m = t.mul(y, y).unwrap();
                t.sum_all(m)
            }),
            ("upsample2x", 8, false, |t, v| {
                let a = t.leaf(&Tensor::new(vec![1, 2, 2, 2], v.to_vec()).unwrap(), true);
                let u = t.upsample2x(a).unwrap();
                let m = t.mul(u, u).unwrap();
                t.sum_all(m)
            }),
            ("batch_norm_batch_stats", 20, false, |t, v| {
                let x = t.leaf(&Tensor::new(vec![2, 2, 2, 2], v[..16].to_vec()).unwrap(), true);
                let gm = t.leaf(&Tensor::new(vec![2], v[16..18].to_vec()).unwrap(), true);
                let bt = t.leaf(&Tensor::new(vec![2], v[18..20].to_vec()).unwrap(), true);
                let y = t.batch_norm(x, gm, bt, 1e-5, BnStats::Batch).unwrap();
                // Asymmetric fixed weights so per-element sensitivities differ.
                let k: Vec<f64> = (0..16).map(|i| 0.3 + 0.11 * i as f64).collect();
                let kc = t.constant(vec![2, 2, 2, 2], k).unwrap();
                let m = t.mul(y, kc).unwrap();
                let m2 = t.mul(m, y).unwrap();
                t.sum_all(m2)
            }),
            ("batch_norm_fixed_stats", 20, false, |t, v| {
                let x = t.leaf(&Tensor::new(vec![2, 2, 2, 2], v[..16].to_vec()).unwrap(), true);
                let gm = t.leaf(&Tensor::new(vec![2], v[16..18].to_vec()).unwrap(), true);
                let bt = t.leaf(&Tensor::new(vec![2], v[18..20].to_vec()).unwrap(), true);
                let y = t
                    .batch_norm(
                        x,
                        gm,
                        bt,
                        1e-5,
                        BnStats::Fixed { mean: vec![0.2, -0.4], var: vec![1.3, 0.6] },
                    )
                    .unwrap();
                let m = t.mul(y, y).unwrap();
                t.sum_all(m)
            }),
        ];

        for (name, n, positive, builder) in cases {
            for seed in 0..20u64 {
                let mut state = 0x9E3779B97F4A7C15u64 ^ (seed << 8) ^ name.len() as u64;
                let values: Vec<f64> = (0..n)
                    .map(|_| {
                        if positive {
                            lcg_uniform(&mut state, 0.4, 2.2)
                        } else {
                            // Keep away from relu/clamp kinks.
                            let v = lcg_uniform(&mut state, -1.8, 1.8);
                            if v.abs() < 0.05 {
                                v + 0.1
                            } else {
                                v
                            }
                        }
                    })
                    .collect();

                let eval = |vals: &[f64]| -> f64 {
                    let mut t = Tape::new();
                    let out = builder(&mut t, vals);
                    t.scalar(out)
                };
                let numeric = finite_diff(&values, &eval, 1e-6);

                let mut tape = Tape::new();
                let out = builder(&mut tape, &values);
                tape.backward(out).unwrap();
                // Leaves consume the input span in push order.
                let mut analytic = vec![0.0; values.len()];
                let mut offset = 0;
                for node in 0..tape.nodes.len() {
                    if offset >= values.len() {
                        break;
                    }
                    if matches!(tape.nodes[node].op, Op::Leaf) {
                        let len = tape.numel(Var(node));
                        if let Some(g) = tape.grad(Var(node)) {
                            analytic[offset..offset + len].copy_from_slice(g);
                        }
                        offset += len;
                    }
                }

                let err = max_rel_err(&analytic, &numeric);
                assert!(err <= 1e-4, "op {} seed {}: max rel err {}", name, seed, err);
            }
        }
    }

    #[test]
    fn conv2d_matches_direct_sum() {
        // Exercises the fused 3x3 stride-1 pad-1 path against a naive
        // seven-loop evaluation.
        let mut state = 7u64;
        let (b, ci, co, h, w) = (2usize, 3usize, 2usize, 5usize, 6usize);
        let xv: Vec<f64> = (0..b * ci * h * w).map(|_| lcg_uniform(&mut state, -1.0, 1.0)).collect();
        let wv: Vec<f64> = (0..co * ci * 9).map(|_| lcg_uniform(&mut state, -1.0, 1.0)).collect();
        let bv: Vec<f64> = (0..co).map(|_| lcg_uniform(&mut state, -1.0, 1.0)).collect();

        let mut tape = Tape::new();
        let x = tape.leaf(&Tensor::new(vec![b, ci, h, w], xv.clone()).unwrap(), false);
        let wt = tape.leaf(&Tensor::new(vec![co, ci, 3, 3], wv.clone()).unwrap(), false);
        let bt = tape.leaf(&Tensor::new(vec![co], bv.clone()).unwrap(), false);
        let y = tape.conv2d(x, wt, Some(bt), 1, 1).unwrap();
        let got = tape.values(y);

        for bi in 0..b {
            for c_out in 0..co {
                for oy in 0..h {
                    for ox in 0..w {
                        let mut want = bv[c_out];
                        for c_in in 0..ci {
                            for ky in 0..3 {
                                for kx in 0..3 {
                                    let iy = oy as isize + ky as isize - 1;
                                    let ix = ox as isize + kx as isize - 1;
                                    if iy >= 0 && iy < h as isize && ix >= 0 && ix < w as isize {
                                        want += wv[((c_out * ci + c_in) * 3 + ky) * 3 + kx]
                                            * xv[((bi * ci + c_in) * h + iy as usize) * w + ix as usize];
                                    }
                                }
                            }
                        }
                        let got_v = got[((bi * co + c_out) * h + oy) * w + ox];
                        assert!((got_v - want).abs() < 1e-12, "({},{},{},{})", bi, c_out, oy, ox);
                    }
                }
            }
        }
    }

    #[test]
    fn entropy_gradient_matches_finite_differences() {
        // softmax-entropy of random logits, the spec's derived backward case
        let logits: Vec<f64> = {
            let mut state = 42u64;
            (0..(1 * 4 * 3 * 3)).map(|_| lcg_uniform(&mut state, -2.0, 2.0)).collect()
        };
        let eval = |vals: &[f64]| -> f64 {
            let mut t = Tape::new();
            let x = t.leaf(&Tensor::new(vec![1, 4, 3, 3], vals.to_vec()).unwrap(), true);
            let s = t.softmax_channels(x).unwrap();
            let c = t.clamp_min(s, 1e-12);
            let l = t.log(c);
            let p = t.mul(s, l).unwrap();
            let sum = t.sum_all(p);
            let out = t.mul_scalar(sum, -1.0);
            t.scalar(out)
        };
        let numeric = finite_diff(&logits, &eval, 1e-5);

        let mut t = Tape::new();
        let x = t.leaf(&Tensor::new(vec![1, 4, 3, 3], logits.clone()).unwrap(), true);
        let s = t.softmax_channels(x).unwrap();
        let c = t.clamp_min(s, 1e-12);
        let l = t.log(c);
        let p = t.mul(s, l).unwrap();
        let sum = t.sum_all(p);
        let out = t.mul_scalar(sum, -1.0);
        t.backward(out).unwrap();
        let analytic = t.grad(x).unwrap();

        assert!(max_rel_err(analytic, &numeric) <= 1e-4);
    }
}
