//! Recorded forward computation with exact reverse-mode gradients.
//!
//! A [`Graph`] is a tape: every operation appends a node holding the forward
//! value and enough bookkeeping to push adjoints back to its operands. One
//! recorded computation is confined to one thread; independent computations
//! may run in parallel on their own graphs.

use std::collections::BTreeMap;

use ndarray::ArrayView2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::ndgrad::tensor::{GradientMap, ParameterSet, Tensor};

/// Additive mask value for excluded attention positions. Finite so that a
/// fully masked row degrades to a uniform distribution instead of NaN, while
/// still underflowing to an exact zero weight next to any real score.
pub const MASKED_SCORE: f64 = -1e30;

/// Largest f64 strictly below 1.0; sigmoid saturates here instead of at 1.
const ONE_MINUS: f64 = 1.0 - f64::EPSILON / 2.0;

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    VecMat(usize, usize),
    Add(usize, usize),
    AddRow(usize, usize),
    Mul(usize, usize),
    Embedding { table: usize, ids: Vec<usize> },
    Conv1d { x: usize, kernel: usize },
    MaxOverTime { x: usize, arg: Vec<usize> },
    MaskedMean { x: usize, mask: Vec<bool>, count: usize },
    SoftmaxRows(usize),
    LayerNorm { x: usize, gain: usize, bias: usize, eps: f64 },
    Relu(usize),
    Gelu(usize),
    Sigmoid(usize),
    CatLastAxis(Vec<usize>),
    SliceCols { x: usize, start: usize, len: usize },
    Transpose(usize),
    Scale { x: usize, c: f64 },
    RowSum(usize),
    MeanScalars(Vec<usize>),
    Dropout { x: usize, keep: Vec<bool>, keep_prob: f64 },
    BceLoss { probs: usize, targets: Vec<f64> },
}

struct Node {
    value: Tensor,
    grad: Option<Tensor>,
    op: Op,
}

/// Train/eval switch. Dropout only fires in train mode, driven by the
/// graph's own seeded RNG so a run is fully determined by its seed.
enum Mode {
    Eval,
    Train(ChaCha8Rng),
}

pub struct Graph {
    nodes: Vec<Node>,
    mode: Mode,
    params: BTreeMap<String, NodeId>,
}

impl Graph {
    /// Graph in evaluation mode: dropout is the identity.
    pub fn eval() -> Self {
        Graph {
            nodes: Vec::new(),
            mode: Mode::Eval,
            params: BTreeMap::new(),
        }
    }

    /// Graph in train mode; `seed` fully determines dropout masks.
    pub fn train(seed: u64) -> Self {
        Graph {
            nodes: Vec::new(),
            mode: Mode::Train(rand_chacha::ChaCha8Rng::seed_from_u64(seed)),
            params: BTreeMap::new(),
        }
    }

    pub fn is_train(&self) -> bool {
        matches!(self.mode, Mode::Train(_))
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node {
            value,
            grad: None,
            op,
        });
        NodeId(self.nodes.len() - 1)
    }

    /// Insert a constant tensor (inputs, masks). Gradients flow into it but
    /// are discarded.
    pub fn leaf(&mut self, t: Tensor) -> NodeId {
        self.push(t, Op::Leaf)
    }

    /// Insert every tensor of a parameter set as a leaf, remembering the
    /// name so gradients can be collected after `backward`.
    pub fn insert_params(&mut self, set: &ParameterSet) {
        for (name, t) in set.iter() {
            let id = self.push(t.clone(), Op::Leaf);
            self.params.insert(name.clone(), id);
        }
    }

    /// Node id of a previously inserted parameter.
    pub fn param(&self, name: &str) -> Result<NodeId> {
        self.params
            .get(name)
            .copied()
            .ok_or_else(|| Error::invalid("graph", format!("unknown parameter `{name}`")))
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Gradient of a node, available after `backward`.
    pub fn grad(&self, id: NodeId) -> Option<&Tensor> {
        self.nodes[id.0].grad.as_ref()
    }

    /// Gradients of all inserted parameters, zero-filled for parameters the
    /// loss does not depend on.
    pub fn param_grads(&self) -> GradientMap {
        let mut out = GradientMap::new();
        for (name, id) in &self.params {
            let g = match &self.nodes[id.0].grad {
                Some(g) => g.clone(),
                None => Tensor::zeros(self.nodes[id.0].value.shape()),
            };
            out.insert(name.clone(), g);
        }
        out
    }

    fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
        Error::ShapeMismatch {
            op,
            lhs: a.shape().to_vec(),
            rhs: b.shape().to_vec(),
        }
    }

    // ------------------------------------------------------------------
    // Primitives: forward
    // ------------------------------------------------------------------

    /// `[m,k] x [k,n] -> [m,n]`
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Self::shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let data = gemm(ta.data(), tb.data(), m, k, n, false, false);
        let out = Tensor::new(vec![m, n], data)?;
        Ok(self.push(out, Op::MatMul(a.0, b.0)))
    }

    /// `[k] x [k,n] -> [n]`
    pub fn vecmat(&mut self, x: NodeId, w: NodeId) -> Result<NodeId> {
        let (tx, tw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        if tx.rank() != 1 || tw.rank() != 2 || tx.len() != tw.rows() {
            return Err(Self::shape_err("vecmat", tx, tw));
        }
        let (k, n) = (tw.rows(), tw.cols());
        let mut data = vec![0.0; n];
        let (xv, wv) = (tx.data(), tw.data());
        for i in 0..k {
            let xi = xv[i];
            let row = &wv[i * n..(i + 1) * n];
            for j in 0..n {
                data[j] += xi * row[j];
            }
        }
        let out = Tensor::new(vec![n], data)?;
        Ok(self.push(out, Op::VecMat(x.0, w.0)))
    }

    /// Element-wise add; also broadcasts `[m,n] + [n]` across rows.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() == tb.shape() {
            let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x + y).collect();
            let out = Tensor::new(ta.shape().to_vec(), data)?;
            return Ok(self.push(out, Op::Add(a.0, b.0)));
        }
        if ta.rank() == 2 && tb.rank() == 1 && ta.cols() == tb.len() {
            let (m, n) = (ta.rows(), ta.cols());
            let mut data = ta.data().to_vec();
            for r in 0..m {
                for c in 0..n {
                    data[r * n + c] += tb.data()[c];
                }
            }
            let out = Tensor::new(vec![m, n], data)?;
            return Ok(self.push(out, Op::AddRow(a.0, b.0)));
        }
        Err(Self::shape_err("add", ta, tb))
    }

    /// Element-wise product, same shapes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.shape() != tb.shape() {
            return Err(Self::shape_err("mul", ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(x, y)| x * y).collect();
        let out = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Mul(a.0, b.0)))
    }

    /// Rows of `table` selected by token ids: `[V,d]`, ids len T -> `[T,d]`.
    pub fn embedding(&mut self, table: NodeId, ids: &[usize]) -> Result<NodeId> {
        let tt = &self.nodes[table.0].value;
        if tt.rank() != 2 {
            return Err(Error::invalid(
                "embedding",
                format!("table must be 2-D, got {:?}", tt.shape()),
            ));
        }
        let (v, d) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= v {
                return Err(Error::invalid(
                    "embedding",
                    format!("token id {id} out of range for vocab {v}"),
                ));
            }
            data.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let out = Tensor::new(vec![ids.len(), d], data)?;
        Ok(self.push(
            out,
            Op::Embedding {
                table: table.0,
                ids: ids.to_vec(),
            },
        ))
    }

    /// 1-D convolution over time, stride 1, valid padding.
    /// `x: [T,c]`, `kernel: [w,c,f]` -> `[T-w+1, f]`.
    pub fn conv1d(&mut self, x: NodeId, kernel: NodeId) -> Result<NodeId> {
        let (tx, tk) = (&self.nodes[x.0].value, &self.nodes[kernel.0].value);
        if tx.rank() != 2 || tk.rank() != 3 || tx.cols() != tk.shape()[1] {
            return Err(Self::shape_err("conv1d", tx, tk));
        }
        let (t, c) = (tx.rows(), tx.cols());
        let (w, f) = (tk.shape()[0], tk.shape()[2]);
        if t < w {
            return Err(Error::invalid(
                "conv1d",
                format!("input length {t} shorter than filter width {w}"),
            ));
        }
        let tw = t - w + 1;
        let mut data = vec![0.0; tw * f];
        let (xs, ks) = (tx.data(), tk.data());
        for p in 0..tw {
            for i in 0..w {
                let xrow = &xs[(p + i) * c..(p + i + 1) * c];
                for ch in 0..c {
                    let xv = xrow[ch];
                    let krow = &ks[(i * c + ch) * f..(i * c + ch + 1) * f];
                    let orow = &mut data[p * f..(p + 1) * f];
                    for j in 0..f {
                        orow[j] += xv * krow[j];
                    }
                }
            }
        }
        let out = Tensor::new(vec![tw, f], data)?;
        Ok(self.push(
            out,
            Op::Conv1d {
                x: x.0,
                kernel: kernel.0,
            },
        ))
    }

    /// Per-filter maximum over valid time positions: `[T,f]` -> `[f]`.
    pub fn max_over_time(&mut self, x: NodeId, valid: &[bool]) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 2 || valid.len() != tx.rows() {
            return Err(Error::invalid(
                "max_over_time",
                format!("input {:?} vs {} validity flags", tx.shape(), valid.len()),
            ));
        }
        if !valid.iter().any(|&v| v) {
            return Err(Error::invalid("max_over_time", "no valid window".to_string()));
        }
        let (t, f) = (tx.rows(), tx.cols());
        let mut best = vec![f64::NEG_INFINITY; f];
        let mut arg = vec![0usize; f];
        for p in 0..t {
            if !valid[p] {
                continue;
            }
            for j in 0..f {
                let v = tx.data()[p * f + j];
                if v > best[j] {
                    best[j] = v;
                    arg[j] = p;
                }
            }
        }
        let out = Tensor::new(vec![f], best)?;
        Ok(self.push(out, Op::MaxOverTime { x: x.0, arg }))
    }

    /// Mean of the rows selected by `mask`: `[T,d]` -> `[d]`.
    pub fn masked_mean(&mut self, x: NodeId, mask: &[bool]) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 2 || mask.len() != tx.rows() {
            return Err(Error::invalid(
                "masked_mean",
                format!("input {:?} vs {} mask entries", tx.shape(), mask.len()),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid("masked_mean", "all positions masked".to_string()));
        }
        let (t, d) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; d];
        for p in 0..t {
            if mask[p] {
                for j in 0..d {
                    data[j] += tx.data()[p * d + j];
                }
            }
        }
        for v in &mut data {
            *v /= count as f64;
        }
        let out = Tensor::new(vec![d], data)?;
        Ok(self.push(
            out,
            Op::MaskedMean {
                x: x.0,
                mask: mask.to_vec(),
                count,
            },
        ))
    }

    /// Softmax over the last axis (each row of a 2-D input, or the whole
    /// vector of a 1-D input).
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let (rows, cols) = match tx.rank() {
            1 => (1, tx.len()),
            2 => (tx.rows(), tx.cols()),
            _ => {
                return Err(Error::invalid(
                    "softmax",
                    format!("expected 1-D or 2-D input, got {:?}", tx.shape()),
                ))
            }
        };
        if cols == 0 {
            return Err(Error::invalid("softmax", "empty axis".to_string()));
        }
        let mut data = tx.data().to_vec();
        for r in 0..rows {
            let row = &mut data[r * cols..(r + 1) * cols];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                sum += *v;
            }
            for v in row.iter_mut() {
                *v /= sum;
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::SoftmaxRows(x.0)))
    }

    /// Layer normalization over the last axis with learned gain and bias.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        const EPS: f64 = 1e-5;
        let tx = &self.nodes[x.0].value;
        let (tg, tb) = (&self.nodes[gain.0].value, &self.nodes[bias.0].value);
        let (rows, cols) = match tx.rank() {
            1 => (1, tx.len()),
            2 => (tx.rows(), tx.cols()),
            _ => {
                return Err(Error::invalid(
                    "layer_norm",
                    format!("expected 1-D or 2-D input, got {:?}", tx.shape()),
                ))
            }
        };
        if tg.shape() != [cols] || tb.shape() != [cols] {
            return Err(Self::shape_err("layer_norm", tx, tg));
        }
        let mut data = vec![0.0; tx.len()];
        for r in 0..rows {
            let xr = &tx.data()[r * cols..(r + 1) * cols];
            let mean = xr.iter().sum::<f64>() / cols as f64;
            let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + EPS).sqrt();
            for c in 0..cols {
                data[r * cols + c] = (xr[c] - mean) * inv * tg.data()[c] + tb.data()[c];
            }
        }
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                eps: EPS,
            },
        ))
    }

    pub fn relu(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| v.max(0.0)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Relu(x.0)))
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| gelu_fwd(v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Gelu(x.0)))
    }

    /// Element-wise logistic sigmoid `1/(1+e^-z)`, saturating strictly
    /// inside (0, 1) so downstream log-losses stay finite.
    pub fn sigmoid(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| sigmoid_fwd(v)).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Sigmoid(x.0)))
    }

    /// Concatenate along the last axis. All inputs must share rank (1 or 2)
    /// and, for 2-D, the number of rows.
    pub fn concat(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("concat", "no inputs".to_string()));
        }
        let rank = self.nodes[parts[0].0].value.rank();
        match rank {
            1 => {
                let mut data = Vec::new();
                for &p in parts {
                    let t = &self.nodes[p.0].value;
                    if t.rank() != 1 {
                        return Err(Error::invalid("concat", "mixed ranks".to_string()));
                    }
                    data.extend_from_slice(t.data());
                }
                let n = data.len();
                let out = Tensor::new(vec![n], data)?;
                Ok(self.push(out, Op::CatLastAxis(parts.iter().map(|p| p.0).collect())))
            }
            2 => {
                let m = self.nodes[parts[0].0].value.rows();
                let total: usize = parts
                    .iter()
                    .map(|p| self.nodes[p.0].value.cols())
                    .sum();
                let mut data = vec![0.0; m * total];
                let mut off = 0;
                for &p in parts {
                    let t = &self.nodes[p.0].value;
                    if t.rank() != 2 || t.rows() != m {
                        return Err(Error::invalid("concat", "row count mismatch".to_string()));
                    }
                    let c = t.cols();
                    for r in 0..m {
                        data[r * total + off..r * total + off + c]
                            .copy_from_slice(&t.data()[r * c..(r + 1) * c]);
                    }
                    off += c;
                }
                let out = Tensor::new(vec![m, total], data)?;
                Ok(self.push(out, Op::CatLastAxis(parts.iter().map(|p| p.0).collect())))
            }
            _ => Err(Error::invalid("concat", "rank must be 1 or 2".to_string())),
        }
    }

    /// Columns `[start, start+len)` of a 2-D tensor.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 2 || start + len > tx.cols() {
            return Err(Error::invalid(
                "slice_cols",
                format!("slice {start}..{} of {:?}", start + len, tx.shape()),
            ));
        }
        let (m, n) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(m * len);
        for r in 0..m {
            data.extend_from_slice(&tx.data()[r * n + start..r * n + start + len]);
        }
        let out = Tensor::new(vec![m, len], data)?;
        Ok(self.push(out, Op::SliceCols { x: x.0, start, len }))
    }

    pub fn transpose(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 2 {
            return Err(Error::invalid(
                "transpose",
                format!("expected 2-D input, got {:?}", tx.shape()),
            ));
        }
        let (m, n) = (tx.rows(), tx.cols());
        let mut data = vec![0.0; m * n];
        for r in 0..m {
            for c in 0..n {
                data[c * m + r] = tx.data()[r * n + c];
            }
        }
        let out = Tensor::new(vec![n, m], data)?;
        Ok(self.push(out, Op::Transpose(x.0)))
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        let data = tx.data().iter().map(|&v| v * c).collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(out, Op::Scale { x: x.0, c }))
    }

    /// Sum each row of a 2-D tensor: `[m,n]` -> `[m]`.
    pub fn row_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = &self.nodes[x.0].value;
        if tx.rank() != 2 {
            return Err(Error::invalid(
                "row_sum",
                format!("expected 2-D input, got {:?}", tx.shape()),
            ));
        }
        let (m, n) = (tx.rows(), tx.cols());
        let data = (0..m)
            .map(|r| tx.data()[r * n..(r + 1) * n].iter().sum())
            .collect();
        let out = Tensor::new(vec![m], data)?;
        Ok(self.push(out, Op::RowSum(x.0)))
    }

    /// Mean of scalar nodes; the mini-batch reduction.
    pub fn mean_scalars(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        if parts.is_empty() {
            return Err(Error::invalid("mean_scalars", "no inputs".to_string()));
        }
        let mut sum = 0.0;
        for &p in parts {
            let t = &self.nodes[p.0].value;
            if !t.shape().is_empty() {
                return Err(Error::invalid(
                    "mean_scalars",
                    format!("input is not a scalar: {:?}", t.shape()),
                ));
            }
            sum += t.item();
        }
        let out = Tensor::scalar(sum / parts.len() as f64);
        Ok(self.push(out, Op::MeanScalars(parts.iter().map(|p| p.0).collect())))
    }

    /// Inverted dropout. Identity in eval mode and at rate 0.
    pub fn dropout(&mut self, x: NodeId, rate: f64) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::invalid(
                "dropout",
                format!("rate must be in [0,1), got {rate}"),
            ));
        }
        let n = self.nodes[x.0].value.len();
        let keep_prob = 1.0 - rate;
        let keep: Vec<bool> = match &mut self.mode {
            Mode::Eval => return Ok(x),
            Mode::Train(_) if rate == 0.0 => return Ok(x),
            Mode::Train(rng) => (0..n).map(|_| rng.gen::<f64>() < keep_prob).collect(),
        };
        let tx = &self.nodes[x.0].value;
        let data = tx
            .data()
            .iter()
            .zip(&keep)
            .map(|(&v, &k)| if k { v / keep_prob } else { 0.0 })
            .collect();
        let out = Tensor::new(tx.shape().to_vec(), data)?;
        Ok(self.push(
            out,
            Op::Dropout {
                x: x.0,
                keep,
                keep_prob,
            },
        ))
    }

    /// Binary cross-entropy summed over labels:
    /// `-sum_l y_l ln p_l + (1-y_l) ln(1-p_l)`.
    ///
    /// Probabilities must lie strictly inside (0,1); targets must be 0 or 1.
    pub fn bce_loss(&mut self, probs: NodeId, targets: &[f64]) -> Result<NodeId> {
        let tp = &self.nodes[probs.0].value;
        if tp.rank() != 1 || tp.len() != targets.len() {
            return Err(Error::invalid(
                "bce_loss",
                format!("probs {:?} vs {} targets", tp.shape(), targets.len()),
            ));
        }
        let mut loss = 0.0;
        for (&p, &y) in tp.data().iter().zip(targets) {
            if !(p > 0.0 && p < 1.0) {
                return Err(Error::invalid(
                    "bce_loss",
                    format!("probability {p} outside (0,1)"),
                ));
            }
            if y != 0.0 && y != 1.0 {
                return Err(Error::invalid("bce_loss", format!("target {y} not binary")));
            }
            loss -= y * p.ln() + (1.0 - y) * (1.0 - p).ln();
        }
        let out = Tensor::scalar(loss);
        Ok(self.push(
            out,
            Op::BceLoss {
                probs: probs.0,
                targets: targets.to_vec(),
            },
        ))
    }

    // ------------------------------------------------------------------
    // Backward
    // ------------------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss node. Gradients accumulate into
    /// every node the loss depends on.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lt = &self.nodes[loss.0].value;
        if !lt.shape().is_empty() {
            return Err(Error::invalid(
                "backward",
                format!("loss must be scalar, got shape {:?}", lt.shape()),
            ));
        }
        if !lt.item().is_finite() {
            return Err(Error::NonFinite("loss".to_string()));
        }
        self.nodes[loss.0].grad = Some(Tensor::scalar(1.0));

        for i in (0..=loss.0).rev() {
            let go = match self.nodes[i].grad.take() {
                Some(g) => g,
                None => continue,
            };
            self.propagate(i, &go);
            self.nodes[i].grad = Some(go);
        }
        Ok(())
    }

    fn acc(&mut self, target: usize, update: impl FnOnce(&mut [f64])) {
        if self.nodes[target].grad.is_none() {
            let shape = self.nodes[target].value.shape().to_vec();
            self.nodes[target].grad = Some(Tensor::zeros(&shape));
        }
        update(self.nodes[target].grad.as_mut().unwrap().data_mut());
    }

    fn propagate(&mut self, i: usize, go: &Tensor) {
        // Ops read forward values of operands; split borrows via indices.
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let ta = &self.nodes[a].value;
                let tb = &self.nodes[b].value;
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA += dC . B^T ; dB += A^T . dC
                let da = gemm(go.data(), tb.data(), m, n, k, false, true);
                let db = gemm(ta.data(), go.data(), k, m, n, true, false);
                self.acc(a, |g| axpy(g, &da));
                self.acc(b, |g| axpy(g, &db));
            }
            Op::VecMat(x, w) => {
                let (x, w) = (*x, *w);
                let tw = &self.nodes[w].value;
                let tx = &self.nodes[x].value;
                let (k, n) = (tw.rows(), tw.cols());
                let mut dx = vec![0.0; k];
                for i2 in 0..k {
                    let row = &tw.data()[i2 * n..(i2 + 1) * n];
                    dx[i2] = row.iter().zip(go.data()).map(|(a, b)| a * b).sum();
                }
                let xv = tx.data().to_vec();
                self.acc(x, |g| axpy(g, &dx));
                self.acc(w, |g| {
                    for i2 in 0..k {
                        for j in 0..n {
                            g[i2 * n + j] += xv[i2] * go.data()[j];
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.acc(a, |g| axpy(g, go.data()));
                self.acc(b, |g| axpy(g, go.data()));
            }
            Op::AddRow(a, b) => {
                let (a, b) = (*a, *b);
                let n = self.nodes[b].value.len();
                let m = go.len() / n;
                self.acc(a, |g| axpy(g, go.data()));
                self.acc(b, |g| {
                    for r in 0..m {
                        for c in 0..n {
                            g[c] += go.data()[r * n + c];
                        }
                    }
                });
            }
            Op::Mul(a, b) => {
                let (a, b) = (*a, *b);
                let bv = self.nodes[b].value.data().to_vec();
                let av = self.nodes[a].value.data().to_vec();
                self.acc(a, |g| {
                    for (i2, x) in g.iter_mut().enumerate() {
                        *x += go.data()[i2] * bv[i2];
                    }
                });
                self.acc(b, |g| {
                    for (i2, x) in g.iter_mut().enumerate() {
                        *x += go.data()[i2] * av[i2];
                    }
                });
            }
            Op::Embedding { table, ids } => {
                let (table, ids) = (*table, ids.clone());
                let d = self.nodes[table].value.cols();
                self.acc(table, |g| {
                    for (t, &id) in ids.iter().enumerate() {
                        for j in 0..d {
                            g[id * d + j] += go.data()[t * d + j];
                        }
                    }
                });
            }
            Op::Conv1d { x, kernel } => {
                let (x, kernel) = (*x, *kernel);
                let tx = &self.nodes[x].value;
                let tk = &self.nodes[kernel].value;
                let (_t, c) = (tx.rows(), tx.cols());
                let (w, f) = (tk.shape()[0], tk.shape()[2]);
                let tw = go.len() / f;
                let ks = tk.data().to_vec();
                let xs = tx.data().to_vec();
                self.acc(x, |g| {
                    for p in 0..tw {
                        for i2 in 0..w {
                            for ch in 0..c {
                                let mut s = 0.0;
                                for j in 0..f {
                                    s += go.data()[p * f + j] * ks[(i2 * c + ch) * f + j];
                                }
                                g[(p + i2) * c + ch] += s;
                            }
                        }
                    }
                });
                self.acc(kernel, |g| {
                    for p in 0..tw {
                        for i2 in 0..w {
                            for ch in 0..c {
                                let xv = xs[(p + i2) * c + ch];
                                for j in 0..f {
                                    g[(i2 * c + ch) * f + j] += xv * go.data()[p * f + j];
                                }
                            }
                        }
                    }
                });
            }
            Op::MaxOverTime { x, arg } => {
                let (x, arg) = (*x, arg.clone());
                let f = arg.len();
                self.acc(x, |g| {
                    for (j, &p) in arg.iter().enumerate() {
                        g[p * f + j] += go.data()[j];
                    }
                });
            }
            Op::MaskedMean { x, mask, count } => {
                let (x, mask, count) = (*x, mask.clone(), *count);
                let d = go.len();
                let inv = 1.0 / count as f64;
                self.acc(x, |g| {
                    for (p, &m) in mask.iter().enumerate() {
                        if m {
                            for j in 0..d {
                                g[p * d + j] += go.data()[j] * inv;
                            }
                        }
                    }
                });
            }
            Op::SoftmaxRows(x) => {
                let x = *x;
                let ty = &self.nodes[i].value;
                let (rows, cols) = match ty.rank() {
                    1 => (1, ty.len()),
                    _ => (ty.rows(), ty.cols()),
                };
                let y = ty.data().to_vec();
                self.acc(x, |g| {
                    for r in 0..rows {
                        let yr = &y[r * cols..(r + 1) * cols];
                        let gr = &go.data()[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for c2 in 0..cols {
                            g[r * cols + c2] += yr[c2] * (gr[c2] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm { x, gain, bias, eps } => {
                let (x, gain, bias, eps) = (*x, *gain, *bias, *eps);
                let tx = &self.nodes[x].value;
                let tg = &self.nodes[gain].value;
                let (rows, cols) = match tx.rank() {
                    1 => (1, tx.len()),
                    _ => (tx.rows(), tx.cols()),
                };
                let xs = tx.data().to_vec();
                let gs = tg.data().to_vec();
                // Recompute per-row statistics.
                let mut xhat = vec![0.0; xs.len()];
                let mut inv_std = vec![0.0; rows];
                for r in 0..rows {
                    let xr = &xs[r * cols..(r + 1) * cols];
                    let mean = xr.iter().sum::<f64>() / cols as f64;
                    let var = xr.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
                    let inv = 1.0 / (var + eps).sqrt();
                    inv_std[r] = inv;
                    for c2 in 0..cols {
                        xhat[r * cols + c2] = (xr[c2] - mean) * inv;
                    }
                }
                self.acc(bias, |g| {
                    for r in 0..rows {
                        for c2 in 0..cols {
                            g[c2] += go.data()[r * cols + c2];
                        }
                    }
                });
                self.acc(gain, |g| {
                    for r in 0..rows {
                        for c2 in 0..cols {
                            g[c2] += go.data()[r * cols + c2] * xhat[r * cols + c2];
                        }
                    }
                });
                self.acc(x, |g| {
                    for r in 0..rows {
                        let gr = &go.data()[r * cols..(r + 1) * cols];
                        let xh = &xhat[r * cols..(r + 1) * cols];
                        let dxhat: Vec<f64> = (0..cols).map(|c2| gr[c2] * gs[c2]).collect();
                        let mean_dx = dxhat.iter().sum::<f64>() / cols as f64;
                        let mean_dxx = dxhat
                            .iter()
                            .zip(xh)
                            .map(|(a, b)| a * b)
                            .sum::<f64>()
                            / cols as f64;
                        for c2 in 0..cols {
                            g[r * cols + c2] +=
                                inv_std[r] * (dxhat[c2] - mean_dx - xh[c2] * mean_dxx);
                        }
                    }
                });
            }
            Op::Relu(x) => {
                let x = *x;
                let xs = self.nodes[x].value.data().to_vec();
                self.acc(x, |g| {
                    for (i2, v) in g.iter_mut().enumerate() {
                        if xs[i2] > 0.0 {
                            *v += go.data()[i2];
                        }
                    }
                });
            }
            Op::Gelu(x) => {
                let x = *x;
                let xs = self.nodes[x].value.data().to_vec();
                self.acc(x, |g| {
                    for (i2, v) in g.iter_mut().enumerate() {
                        *v += go.data()[i2] * gelu_bwd(xs[i2]);
                    }
                });
            }
            Op::Sigmoid(x) => {
                let x = *x;
                let ys = self.nodes[i].value.data().to_vec();
                self.acc(x, |g| {
                    for (i2, v) in g.iter_mut().enumerate() {
                        *v += go.data()[i2] * ys[i2] * (1.0 - ys[i2]);
                    }
                });
            }
            Op::CatLastAxis(parts) => {
                let parts = parts.clone();
                let rank = self.nodes[parts[0]].value.rank();
                if rank == 1 {
                    let mut off = 0;
                    for p in parts {
                        let n = self.nodes[p].value.len();
                        let slice = go.data()[off..off + n].to_vec();
                        self.acc(p, |g| axpy(g, &slice));
                        off += n;
                    }
                } else {
                    let m = self.nodes[parts[0]].value.rows();
                    let total: usize = parts.iter().map(|&p| self.nodes[p].value.cols()).sum();
                    let mut off = 0;
                    for p in parts {
                        let c = self.nodes[p].value.cols();
                        let mut slice = vec![0.0; m * c];
                        for r in 0..m {
                            slice[r * c..(r + 1) * c]
                                .copy_from_slice(&go.data()[r * total + off..r * total + off + c]);
                        }
                        self.acc(p, |g| axpy(g, &slice));
                        off += c;
                    }
                }
            }
            Op::SliceCols { x, start, len } => {
                let (x, start, len) = (*x, *start, *len);
                let n = self.nodes[x].value.cols();
                let m = self.nodes[x].value.rows();
                self.acc(x, |g| {
                    for r in 0..m {
                        for c2 in 0..len {
                            g[r * n + start + c2] += go.data()[r * len + c2];
                        }
                    }
                });
            }
            Op::Transpose(x) => {
                let x = *x;
                let (m, n) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
                self.acc(x, |g| {
                    for r in 0..m {
                        for c2 in 0..n {
                            g[r * n + c2] += go.data()[c2 * m + r];
                        }
                    }
                });
            }
            Op::Scale { x, c } => {
                let (x, c) = (*x, *c);
                self.acc(x, |g| {
                    for (i2, v) in g.iter_mut().enumerate() {
                        *v += go.data()[i2] * c;
                    }
                });
            }
            Op::RowSum(x) => {
                let x = *x;
                let (m, n) = (self.nodes[x].value.rows(), self.nodes[x].value.cols());
                self.acc(x, |g| {
                    for r in 0..m {
                        for c2 in 0..n {
                            g[r * n + c2] += go.data()[r];
                        }
                    }
                });
            }
            Op::MeanScalars(parts) => {
                let parts = parts.clone();
                let w = go.item() / parts.len() as f64;
                for p in parts {
                    self.acc(p, |g| g[0] += w);
                }
            }
            Op::Dropout { x, keep, keep_prob } => {
                let (x, keep, keep_prob) = (*x, keep.clone(), *keep_prob);
                self.acc(x, |g| {
                    for (i2, &k) in keep.iter().enumerate() {
                        if k {
                            g[i2] += go.data()[i2] / keep_prob;
                        }
                    }
                });
            }
            Op::BceLoss { probs, targets } => {
                let (probs, targets) = (*probs, targets.clone());
                let ps = self.nodes[probs].value.data().to_vec();
                let w = go.item();
                self.acc(probs, |g| {
                    for (i2, (&p, &y)) in ps.iter().zip(&targets).enumerate() {
                        g[i2] += w * (-y / p + (1.0 - y) / (1.0 - p));
                    }
                });
            }
        }
    }
}

fn axpy(acc: &mut [f64], add: &[f64]) {
    for (a, b) in acc.iter_mut().zip(add) {
        *a += b;
    }
}

/// Dense f64 GEMM on row-major slices via ndarray, with optional operand
/// transposition. `m, k, n` describe the logical product, after transposes.
fn gemm(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, ta: bool, tb: bool) -> Vec<f64> {
    let av = if ta {
        ArrayView2::from_shape((k, m), a).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((m, k), a).unwrap()
    };
    let bv = if tb {
        ArrayView2::from_shape((n, k), b).unwrap().reversed_axes()
    } else {
        ArrayView2::from_shape((k, n), b).unwrap()
    };
    let c = av.dot(&bv);
    let (vec, _) = c.into_raw_vec_and_offset();
    vec
}

fn sigmoid_fwd(z: f64) -> f64 {
    let v = if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    };
    v.clamp(f64::MIN_POSITIVE, ONE_MINUS)
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu_fwd(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + GELU_A * x * x * x)).tanh())
}

fn gelu_bwd(x: f64) -> f64 {
    let u = GELU_C * (x + GELU_A * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn matmul_hand_case() {
        let mut g = Graph::eval();
        let a = g.leaf(Tensor::matrix(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap());
        let b = g.leaf(Tensor::matrix(&[vec![5.0, 6.0], vec![7.0, 8.0]]).unwrap());
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::eval();
        let a = g.leaf(Tensor::zeros(&[2, 3]));
        let b = g.leaf(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("matmul"), "{err}");
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn masked_mean_hand_case() {
        // mean over token vectors [[1,3],[5,7]] with mask [true,true] -> [3,5]
        let mut g = Graph::eval();
        let x = g.leaf(Tensor::matrix(&[vec![1.0, 3.0], vec![5.0, 7.0]]).unwrap());
        let m = g.masked_mean(x, &[true, true]).unwrap();
        assert_eq!(g.value(m).data(), &[3.0, 5.0]);
    }

    #[test]
    fn masked_mean_all_masked_errors() {
        let mut g = Graph::eval();
        let x = g.leaf(Tensor::zeros(&[2, 2]));
        assert!(g.masked_mean(x, &[false, false]).is_err());
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::eval();
        let x = g.leaf(Tensor::vector(&[0.0, 0.0, 0.0]));
        let s = g.softmax(x).unwrap();
        for &v in g.value(s).data() {
            assert!(close(v, 1.0 / 3.0, 1e-15));
        }
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let mut g = Graph::eval();
        let x = g.leaf(Tensor::matrix(&[vec![1.0, -2.0, 0.5], vec![100.0, 99.0, 98.0]]).unwrap());
        let s = g.softmax(x).unwrap();
        let d = g.value(s).data();
        for r in 0..2 {
            let sum: f64 = d[r * 3..(r + 1) * 3].iter().sum();
            assert!(close(sum, 1.0, 1e-12));
        }
    }

    #[test]
    fn sigmoid_hand_values() {
        let mut g = Graph::eval();
        let x = g.leaf(Tensor::vector(&[0.0, 2.0, 3.7, -3.7]));
        let s = g.sigmoid(x).unwrap();
        let d = g.value(s).data();
        assert_eq!(d[0], 0.5);
        assert!(close(d[1], 0.880_797_077_977_882_3, 1e-12));
        // f(z) + f(-z) = 1
        assert!(close(d[2] + d[3], 1.0, 1e-15));
    }

    #[test]
    fn sigmoid_saturates_strictly_inside_unit_interval() {
        let mut g = Graph::eval();
        let x = g.leaf(Tensor::vector(&[-1e6, 1e6]));
        let s = g.sigmoid(x).unwrap();
        let d = g.value(s).data();
        assert!(d[0] > 0.0 && d[1] < 1.0);
    }

    #[test]
    fn bce_maximum_entropy_prediction() {
        let mut g = Graph::eval();
        let p = g.leaf(Tensor::vector(&[0.5, 0.5]));
        let l = g.bce_loss(p, &[1.0, 0.0]).unwrap();
        assert!(close(g.value(l).item(), 2.0 * std::f64::consts::LN_2, 1e-12));
    }

    #[test]
    fn bce_matching_confident_prediction_approaches_zero() {
        for eps in [1e-3, 1e-6, 1e-9] {
            let mut g = Graph::eval();
            let p = g.leaf(Tensor::vector(&[1.0 - eps]));
            let l = g.bce_loss(p, &[1.0]).unwrap();
            assert!(g.value(l).item() < 2.0 * eps);
        }
    }

    #[test]
    fn bce_term_by_term_hand_case() {
        let mut g = Graph::eval();
        let p = g.leaf(Tensor::vector(&[0.9, 0.8, 0.2]));
        let l = g.bce_loss(p, &[1.0, 1.0, 0.0]).unwrap();
        // -ln .9 - ln .8 - ln .8 = 0.105361 + 0.223144 + 0.223144
        assert!(close(g.value(l).item(), 0.551_648, 1e-6));
    }

    #[test]
    fn bce_rejects_probabilities_outside_unit_interval() {
        let mut g = Graph::eval();
        let p = g.leaf(Tensor::vector(&[1.0, 0.5]));
        assert!(g.bce_loss(p, &[1.0, 0.0]).is_err());
        let p2 = g.leaf(Tensor::vector(&[0.0]));
        assert!(g.bce_loss(p2, &[0.0]).is_err());
    }

    #[test]
    fn bce_nonnegative_on_random_inputs() {
        use rand::SeedableRng;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..100 {
            let q = rng.gen_range(1..8);
            let probs: Vec<f64> = (0..q).map(|_| rng.gen_range(1e-6..1.0 - 1e-6)).collect();
            let ys: Vec<f64> = (0..q).map(|_| f64::from(rng.gen_bool(0.5))).collect();
            let mut g = Graph::eval();
            let p = g.leaf(Tensor::vector(&probs));
            let l = g.bce_loss(p, &ys).unwrap();
            assert!(g.value(l).item() >= 0.0);
        }
    }

    #[test]
    fn concat_dimension_additivity() {
        let mut g = Graph::eval();
        let a = g.leaf(Tensor::zeros(&[16]));
        let b = g.leaf(Tensor::zeros(&[16]));
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).shape(), &[32]);
    }

    #[test]
    fn max_over_time_ignores_masked_windows() {
        let mut g = Graph::eval();
        let x = g.leaf(Tensor::matrix(&[vec![1.0], vec![9.0], vec![2.0]]).unwrap());
        let m = g.max_over_time(x, &[true, false, true]).unwrap();
        assert_eq!(g.value(m).data(), &[2.0]);
    }

    #[test]
    fn max_over_time_invariant_to_appended_masked_positions() {
        let mut g = Graph::eval();
        let x = g.leaf(Tensor::matrix(&[vec![1.0, -2.0], vec![0.5, 3.0]]).unwrap());
        let a = g.max_over_time(x, &[true, true]).unwrap();
        let base = g.value(a).data().to_vec();

        let y = g.leaf(
            Tensor::matrix(&[
                vec![1.0, -2.0],
                vec![0.5, 3.0],
                vec![99.0, 99.0],
                vec![77.0, -1.0],
            ])
            .unwrap(),
        );
        let b = g.max_over_time(y, &[true, true, false, false]).unwrap();
        assert_eq!(g.value(b).data(), &base[..]);
    }

    #[test]
    fn dropout_eval_mode_is_identity() {
        let mut g = Graph::eval();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0, 3.0]));
        let d = g.dropout(x, 0.5).unwrap();
        assert_eq!(d, x);
    }

    #[test]
    fn dropout_train_mode_preserves_expectation() {
        // Average over many samples approaches the input (inverted scaling).
        let n = 20_000;
        let mut sum = 0.0;
        let mut g = Graph::train(11);
        for _ in 0..n {
            let x = g.leaf(Tensor::vector(&[2.0]));
            let d = g.dropout(x, 0.3).unwrap();
            sum += g.value(d).data()[0];
        }
        let mean = sum / n as f64;
        assert!((mean - 2.0).abs() / 2.0 < 0.02, "mean {mean}");
    }

    #[test]
    fn backward_requires_scalar_loss() {
        let mut g = Graph::eval();
        let x = g.leaf(Tensor::vector(&[1.0, 2.0]));
        assert!(g.backward(x).is_err());
    }

    #[test]
    fn attention_mask_column_gets_exactly_zero_weight() {
        // Additive MASKED_SCORE on a key column underflows to weight 0.0.
        let mut g = Graph::eval();
        let scores = g.leaf(Tensor::matrix(&[vec![0.3, -0.7, 0.1]]).unwrap());
        let mask = g.leaf(Tensor::matrix(&[vec![0.0, MASKED_SCORE, 0.0]]).unwrap());
        let masked = g.add(scores, mask).unwrap();
        let w = g.softmax(masked).unwrap();
        assert_eq!(g.value(w).data()[1], 0.0);
        let sum: f64 = g.value(w).data().iter().sum();
        assert!(close(sum, 1.0, 1e-12));
    }

    #[test]
    fn mean_scalars_averages() {
        let mut g = Graph::eval();
        let a = g.leaf(Tensor::scalar(1.0));
        let b = g.leaf(Tensor::scalar(3.0));
        let m = g.mean_scalars(&[a, b]).unwrap();
        assert_eq!(g.value(m).item(), 2.0);
    }

    #[test]
    fn simple_chain_gradient() {
        // loss = bce(sigmoid(x*w), y) has a known closed-form gradient
        // d loss / d z = p - y for a single label.
        let mut g = Graph::eval();
        let x = g.leaf(Tensor::vector(&[2.0]));
        let w = g.leaf(Tensor::matrix(&[vec![0.5]]).unwrap());
        let z = g.vecmat(x, w).unwrap();
        let p = g.sigmoid(z).unwrap();
        let l = g.bce_loss(p, &[1.0]).unwrap();
        g.backward(l).unwrap();
        let pv = g.value(p).data()[0];
        let expected_dz = pv - 1.0;
        // dL/dw = dL/dz * x
        let gw = g.grad(w).unwrap().data()[0];
        assert!(close(gw, expected_dz * 2.0, 1e-12));
    }
}
