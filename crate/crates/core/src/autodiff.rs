//! Reverse-mode automatic differentiation over dense tensors.
//!
//! A `Graph` is a Wengert tape: operations evaluate eagerly and append a node
//! recording their inputs plus whatever the backward rule needs. `backward`
//! replays the tape in reverse creation order (reverse topological order,
//! since nodes only reference earlier nodes), visiting each node exactly
//! once. The op set covers exactly what the attention model needs: 1x1
//! convolution, softplus-with-offset, per-channel spatial normalization,
//! inverted dropout, spatial pooling/summation, elementwise and broadcast
//! products, a vector linear layer, softmax, and the multi-label
//! binary-cross-entropy loss.

use crate::error::{Error, Result};
use crate::tensor::Tensor;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

pub type NodeId = usize;

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable `log(1 + exp(x))` via
/// `max(x, 0) + log(1 + exp(-|x|))`.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// out[p, c] = sum_d x[p, d] * w[d, c] + b[c]
    Conv1x1 { x: NodeId, w: NodeId, b: NodeId },
    /// out[c] = sum_d x[d] * w[d, c] + b[c]
    LinearVec { x: NodeId, w: NodeId, b: NodeId },
    SoftplusEps { x: NodeId },
    /// Per-channel division by the spatial sum; sums saved for the backward
    /// quotient rule.
    SpatialNormalize { x: NodeId, channel_sums: Vec<f64> },
    /// Mask entries are 0 or 1/(1-rate); the mask is a constant gate.
    Dropout { x: NodeId, mask: Vec<f64> },
    SpatialAvgPool { x: NodeId },
    SpatialSum { x: NodeId },
    /// Elementwise product of same-shape tensors.
    Mul { a: NodeId, b: NodeId },
    /// out[p, d] = x[p, d] * a[p] for x `[h,w,d]` and a `[h,w]` (or `[h,w,1]`).
    MulBroadcast { x: NodeId, a: NodeId },
    Softmax { x: NodeId },
    /// Scalar loss; targets saved for the backward rule sigma(p) - y.
    MultilabelBce { p: NodeId, targets: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    values: Vec<f64>,
    shape: Vec<usize>,
    grad: Option<Vec<f64>>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<f64>, op: Op) -> NodeId {
        debug_assert_eq!(shape.iter().product::<usize>(), values.len());
        self.nodes.push(Node {
            values,
            shape,
            grad: None,
            op,
        });
        self.nodes.len() - 1
    }

    pub fn leaf(&mut self, t: &Tensor) -> NodeId {
        self.push(t.shape().to_vec(), t.values().to_vec(), Op::Leaf)
    }

    pub fn values(&self, id: NodeId) -> &[f64] {
        &self.nodes[id].values
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        &self.nodes[id].shape
    }

    pub fn grad(&self, id: NodeId) -> Option<&[f64]> {
        self.nodes[id].grad.as_deref()
    }

    pub fn tensor(&self, id: NodeId) -> Tensor {
        Tensor::new(self.nodes[id].shape.clone(), self.nodes[id].values.clone())
            .expect("graph nodes hold consistent shapes")
    }

    fn dims3(&self, id: NodeId) -> Result<(usize, usize, usize)> {
        match self.nodes[id].shape.as_slice() {
            &[h, w, c] => Ok((h, w, c)),
            other => Err(Error::Shape(format!("expected rank-3 node, got {other:?}"))),
        }
    }

    // ── Forward ops ────────────────────────────────────────────────────

    /// 1x1 convolution: `[h,w,d] x [d,c] + [c] -> [h,w,c]`.
    pub fn conv1x1(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let (h, wd, d) = self.dims3(x)?;
        let (wd_in, c) = match self.nodes[w].shape.as_slice() {
            &[a, b] => (a, b),
            other => return Err(Error::Shape(format!("conv1x1 weights must be rank 2, got {other:?}"))),
        };
        if wd_in != d {
            return Err(Error::Shape(format!(
                "conv1x1: input depth {d} != weight inner extent {wd_in}"
            )));
        }
        if self.nodes[b].shape.as_slice() != [c] {
            return Err(Error::Shape(format!(
                "conv1x1: bias shape {:?} != [{c}]",
                self.nodes[b].shape
            )));
        }
        let pixels = h * wd;
        let mut out = vec![0.0; pixels * c];
        {
            let xv = &self.nodes[x].values;
            let wv = &self.nodes[w].values;
            let bv = &self.nodes[b].values;
            for p in 0..pixels {
                let xp = &xv[p * d..(p + 1) * d];
                let op = &mut out[p * c..(p + 1) * c];
                op.copy_from_slice(bv);
                for (di, &xd) in xp.iter().enumerate() {
                    let wrow = &wv[di * c..(di + 1) * c];
                    for (oc, &wk) in op.iter_mut().zip(wrow) {
                        *oc += xd * wk;
                    }
                }
            }
        }
        Ok(self.push(vec![h, wd, c], out, Op::Conv1x1 { x, w, b }))
    }

    /// Vector linear layer: `[d] x [d,c] + [c] -> [c]`.
    pub fn linear_vec(&mut self, x: NodeId, w: NodeId, b: NodeId) -> Result<NodeId> {
        let d = match self.nodes[x].shape.as_slice() {
            &[n] => n,
            other => return Err(Error::Shape(format!("linear_vec input must be rank 1, got {other:?}"))),
        };
        let (wd, c) = match self.nodes[w].shape.as_slice() {
            &[a, b] => (a, b),
            other => return Err(Error::Shape(format!("linear_vec weights must be rank 2, got {other:?}"))),
        };
        if wd != d || self.nodes[b].shape.as_slice() != [c] {
            return Err(Error::Shape("linear_vec extent mismatch".into()));
        }
        let mut out = self.nodes[b].values.clone();
        for di in 0..d {
            let xd = self.nodes[x].values[di];
            for ci in 0..c {
                out[ci] += xd * self.nodes[w].values[di * c + ci];
            }
        }
        Ok(self.push(vec![c], out, Op::LinearVec { x, w, b }))
    }

    /// Elementwise `log(1 + exp(x)) + eps`.
    pub fn softplus_eps(&mut self, x: NodeId, eps: f64) -> Result<NodeId> {
        if !(eps >= 0.0) {
            return Err(Error::Contract(format!("softplus_eps: eps must be >= 0, got {eps}")));
        }
        let out: Vec<f64> = self.nodes[x].values.iter().map(|&v| softplus(v) + eps).collect();
        Ok(self.push(self.nodes[x].shape.clone(), out, Op::SoftplusEps { x }))
    }

    /// Per-channel spatial normalization: each channel divided by its spatial
    /// sum, so every channel integrates to one.
    pub fn spatial_normalize(&mut self, x: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.dims3(x)?;
        let pixels = h * w;
        let mut sums = vec![0.0; c];
        for p in 0..pixels {
            for ci in 0..c {
                sums[ci] += self.nodes[x].values[p * c + ci];
            }
        }
        for (ci, &s) in sums.iter().enumerate() {
            if !(s > 0.0) {
                return Err(Error::DegenerateNormalization { channel: ci, sum: s });
            }
        }
        let mut out = vec![0.0; pixels * c];
        for p in 0..pixels {
            for ci in 0..c {
                out[p * c + ci] = self.nodes[x].values[p * c + ci] / sums[ci];
            }
        }
        Ok(self.push(
            vec![h, w, c],
            out,
            Op::SpatialNormalize { x, channel_sums: sums },
        ))
    }

    /// Inverted dropout: in training mode each element is zeroed with
    /// probability `rate` and survivors are scaled by `1/(1-rate)`, so
    /// inference is the identity (and this returns `x` untouched).
    pub fn dropout(
        &mut self,
        x: NodeId,
        rate: f64,
        training: bool,
        rng: &mut ChaCha8Rng,
    ) -> Result<NodeId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::Contract(format!("dropout rate must be in [0,1), got {rate}")));
        }
        if !training || rate == 0.0 {
            return Ok(x);
        }
        let keep_scale = 1.0 / (1.0 - rate);
        let mask: Vec<f64> = (0..self.nodes[x].values.len())
            .map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep_scale })
            .collect();
        let out: Vec<f64> = self.nodes[x]
            .values
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        Ok(self.push(self.nodes[x].shape.clone(), out, Op::Dropout { x, mask }))
    }

    /// `[h,w,c] -> [c]`, mean over all spatial positions.
    pub fn spatial_avg_pool(&mut self, x: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.dims3(x)?;
        let pixels = h * w;
        let mut out = vec![0.0; c];
        for p in 0..pixels {
            for ci in 0..c {
                out[ci] += self.nodes[x].values[p * c + ci];
            }
        }
        let inv = 1.0 / pixels as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        Ok(self.push(vec![c], out, Op::SpatialAvgPool { x }))
    }

    /// `[h,w,c] -> [c]`, sum over all spatial positions.
    pub fn spatial_sum(&mut self, x: NodeId) -> Result<NodeId> {
        let (h, w, c) = self.dims3(x)?;
        let pixels = h * w;
        let mut out = vec![0.0; c];
        for p in 0..pixels {
            for ci in 0..c {
                out[ci] += self.nodes[x].values[p * c + ci];
            }
        }
        Ok(self.push(vec![c], out, Op::SpatialSum { x }))
    }

    /// Elementwise product; shapes must match exactly.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        if self.nodes[a].shape != self.nodes[b].shape {
            return Err(Error::Shape(format!(
                "mul: {:?} vs {:?}",
                self.nodes[a].shape, self.nodes[b].shape
            )));
        }
        let out: Vec<f64> = self.nodes[a]
            .values
            .iter()
            .zip(&self.nodes[b].values)
            .map(|(&x, &y)| x * y)
            .collect();
        Ok(self.push(self.nodes[a].shape.clone(), out, Op::Mul { a, b }))
    }

    /// Multiply `[h,w,d]` by a per-pixel scalar map `[h,w]` or `[h,w,1]`.
    pub fn mul_broadcast(&mut self, x: NodeId, a: NodeId) -> Result<NodeId> {
        let (h, w, d) = self.dims3(x)?;
        let a_ok = match self.nodes[a].shape.as_slice() {
            &[ah, aw] => ah == h && aw == w,
            &[ah, aw, 1] => ah == h && aw == w,
            _ => false,
        };
        if !a_ok {
            return Err(Error::Shape(format!(
                "mul_broadcast: map shape {:?} incompatible with [{h},{w},{d}]",
                self.nodes[a].shape
            )));
        }
        let pixels = h * w;
        let mut out = vec![0.0; pixels * d];
        for p in 0..pixels {
            let ap = self.nodes[a].values[p];
            for di in 0..d {
                out[p * d + di] = self.nodes[x].values[p * d + di] * ap;
            }
        }
        Ok(self.push(vec![h, w, d], out, Op::MulBroadcast { x, a }))
    }

    /// Softmax over a rank-1 tensor.
    pub fn softmax(&mut self, x: NodeId) -> Result<NodeId> {
        if self.nodes[x].shape.len() != 1 {
            return Err(Error::Shape("softmax expects a rank-1 tensor".into()));
        }
        let xv = &self.nodes[x].values;
        let mx = xv.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = xv.iter().map(|&v| (v - mx).exp()).collect();
        let total: f64 = exps.iter().sum();
        let out: Vec<f64> = exps.iter().map(|&e| e / total).collect();
        Ok(self.push(self.nodes[x].shape.clone(), out, Op::Softmax { x }))
    }

    /// Multi-label binary cross entropy against a multi-hot target, summed
    /// over classes: `sum_c softplus(-p_c) + (1 - y_c) * p_c`.
    pub fn multilabel_bce(&mut self, p: NodeId, targets: &[f64]) -> Result<NodeId> {
        let c = match self.nodes[p].shape.as_slice() {
            &[n] => n,
            other => return Err(Error::Shape(format!("bce scores must be rank 1, got {other:?}"))),
        };
        if targets.len() != c {
            return Err(Error::Shape(format!(
                "bce: {c} scores vs {} targets",
                targets.len()
            )));
        }
        if targets.iter().any(|&y| y != 0.0 && y != 1.0) {
            return Err(Error::Contract("bce targets must be 0 or 1".into()));
        }
        let loss: f64 = self.nodes[p]
            .values
            .iter()
            .zip(targets)
            .map(|(&pc, &yc)| softplus(-pc) + (1.0 - yc) * pc)
            .sum();
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::MultilabelBce { p, targets: targets.to_vec() },
        ))
    }

    // ── Backward ─────────────────────────────────────────────────────────

    fn grad_buf(&mut self, id: NodeId) -> &mut Vec<f64> {
        let n = self.nodes[id].values.len();
        self.nodes[id].grad.get_or_insert_with(|| vec![0.0; n])
    }

    /// Reverse pass from a scalar output node. Seeds the output gradient
    /// with one and visits every node once in reverse creation order.
    pub fn backward(&mut self, out: NodeId) -> Result<()> {
        if self.nodes[out].values.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar output, got shape {:?}",
                self.nodes[out].shape
            )));
        }
        *self.grad_buf(out) = vec![1.0];
        for id in (0..=out).rev() {
            if self.nodes[id].grad.is_none() {
                continue;
            }
            let op = self.nodes[id].op.clone();
            match op {
                Op::Leaf => {}
                Op::Conv1x1 { x, w, b } => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let (h, wd, d) = self.dims3(x)?;
                    let c = self.nodes[id].shape[2];
                    let pixels = h * wd;
                    let xv = self.nodes[x].values.clone();
                    let wv = self.nodes[w].values.clone();
                    {
                        let gx = self.grad_buf(x);
                        for p in 0..pixels {
                            for di in 0..d {
                                let mut acc = 0.0;
                                for ci in 0..c {
                                    acc += g[p * c + ci] * wv[di * c + ci];
                                }
                                gx[p * d + di] += acc;
                            }
                        }
                    }
                    {
                        let gw = self.grad_buf(w);
                        for p in 0..pixels {
                            for di in 0..d {
                                let xd = xv[p * d + di];
                                for ci in 0..c {
                                    gw[di * c + ci] += xd * g[p * c + ci];
                                }
                            }
                        }
                    }
                    {
                        let gb = self.grad_buf(b);
                        for p in 0..pixels {
                            for ci in 0..c {
                                gb[ci] += g[p * c + ci];
                            }
                        }
                    }
                }
                Op::LinearVec { x, w, b } => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let d = self.nodes[x].values.len();
                    let c = g.len();
                    let xv = self.nodes[x].values.clone();
                    let wv = self.nodes[w].values.clone();
                    {
                        let gx = self.grad_buf(x);
                        for di in 0..d {
                            let mut acc = 0.0;
                            for ci in 0..c {
                                acc += g[ci] * wv[di * c + ci];
                            }
                            gx[di] += acc;
                        }
                    }
                    {
                        let gw = self.grad_buf(w);
                        for di in 0..d {
                            for ci in 0..c {
                                gw[di * c + ci] += xv[di] * g[ci];
                            }
                        }
                    }
                    {
                        let gb = self.grad_buf(b);
                        for ci in 0..c {
                            gb[ci] += g[ci];
                        }
                    }
                }
                Op::SoftplusEps { x } => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let xv = self.nodes[x].values.clone();
                    let gx = self.grad_buf(x);
                    for i in 0..g.len() {
                        gx[i] += g[i] * sigmoid(xv[i]);
                    }
                }
                Op::SpatialNormalize { x, channel_sums } => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let out = self.nodes[id].values.clone();
                    let c = channel_sums.len();
                    let pixels = g.len() / c;
                    // d z[p,c] = (g[p,c] - sum_q g[q,c] * out[q,c]) / S_c
                    let mut dots = vec![0.0; c];
                    for p in 0..pixels {
                        for ci in 0..c {
                            dots[ci] += g[p * c + ci] * out[p * c + ci];
                        }
                    }
                    let gx = self.grad_buf(x);
                    for p in 0..pixels {
                        for ci in 0..c {
                            gx[p * c + ci] += (g[p * c + ci] - dots[ci]) / channel_sums[ci];
                        }
                    }
                }
                Op::Dropout { x, mask } => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let gx = self.grad_buf(x);
                    for i in 0..g.len() {
                        gx[i] += g[i] * mask[i];
                    }
                }
                Op::SpatialAvgPool { x } => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let c = g.len();
                    let pixels = self.nodes[x].values.len() / c;
                    let inv = 1.0 / pixels as f64;
                    let gx = self.grad_buf(x);
                    for p in 0..pixels {
                        for ci in 0..c {
                            gx[p * c + ci] += g[ci] * inv;
                        }
                    }
                }
                Op::SpatialSum { x } => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let c = g.len();
                    let pixels = self.nodes[x].values.len() / c;
                    let gx = self.grad_buf(x);
                    for p in 0..pixels {
                        for ci in 0..c {
                            gx[p * c + ci] += g[ci];
                        }
                    }
                }
                Op::Mul { a, b } => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let av = self.nodes[a].values.clone();
                    let bv = self.nodes[b].values.clone();
                    {
                        let ga = self.grad_buf(a);
                        for i in 0..g.len() {
                            ga[i] += g[i] * bv[i];
                        }
                    }
                    {
                        let gb = self.grad_buf(b);
                        for i in 0..g.len() {
                            gb[i] += g[i] * av[i];
                        }
                    }
                }
                Op::MulBroadcast { x, a } => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let d = self.nodes[id].shape[2];
                    let pixels = g.len() / d;
                    let xv = self.nodes[x].values.clone();
                    let av = self.nodes[a].values.clone();
                    {
                        let gx = self.grad_buf(x);
                        for p in 0..pixels {
                            for di in 0..d {
                                gx[p * d + di] += g[p * d + di] * av[p];
                            }
                        }
                    }
                    {
                        let ga = self.grad_buf(a);
                        for p in 0..pixels {
                            let mut acc = 0.0;
                            for di in 0..d {
                                acc += g[p * d + di] * xv[p * d + di];
                            }
                            ga[p] += acc;
                        }
                    }
                }
                Op::Softmax { x } => {
                    let g = self.nodes[id].grad.clone().unwrap();
                    let out = self.nodes[id].values.clone();
                    let dot: f64 = g.iter().zip(&out).map(|(&gi, &oi)| gi * oi).sum();
                    let gx = self.grad_buf(x);
                    for i in 0..g.len() {
                        gx[i] += out[i] * (g[i] - dot);
                    }
                }
                Op::MultilabelBce { p, targets } => {
                    let g = self.nodes[id].grad.clone().unwrap()[0];
                    let pv = self.nodes[p].values.clone();
                    let gp = self.grad_buf(p);
                    for i in 0..pv.len() {
                        gp[i] += g * (sigmoid(pv[i]) - targets[i]);
                    }
                }
            }
        }
        Ok(())
    }
}

// ── Gradient checking ─────────────────────────────────────────────────────

/// Compare reverse-mode gradients against central finite differences for a
/// scalar objective built by `build` from the given parameter tensors.
///
/// Returns the maximum relative error over all parameter coordinates, with
/// denominator `max(|analytic|, |numeric|, 1e-8)`.
pub fn grad_check<F>(build: F, params: &[Tensor], step: f64) -> Result<f64>
where
    F: Fn(&mut Graph, &[NodeId]) -> Result<NodeId>,
{
    if !(1e-6..=1e-3).contains(&step) {
        return Err(Error::Contract(format!(
            "grad_check step must be in [1e-6, 1e-3], got {step}"
        )));
    }
    let eval = |ps: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let ids: Vec<NodeId> = ps.iter().map(|t| g.leaf(t)).collect();
        let out = build(&mut g, &ids)?;
        if g.values(out).len() != 1 {
            return Err(Error::Contract(format!(
                "grad_check objective must be scalar, got shape {:?}",
                g.shape(out)
            )));
        }
        Ok(g.values(out)[0])
    };

    // Analytic pass.
    let mut g = Graph::new();
    let ids: Vec<NodeId> = params.iter().map(|t| g.leaf(t)).collect();
    let out = build(&mut g, &ids)?;
    if g.values(out).len() != 1 {
        return Err(Error::Contract(format!(
            "grad_check objective must be scalar, got shape {:?}",
            g.shape(out)
        )));
    }
    g.backward(out)?;
    let analytic: Vec<Vec<f64>> = ids
        .iter()
        .map(|&id| g.grad(id).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; g.values(id).len()]))
        .collect();

    let mut max_rel = 0.0f64;
    let mut work: Vec<Tensor> = params.to_vec();
    for (pi, param) in params.iter().enumerate() {
        for i in 0..param.len() {
            let orig = param.values()[i];
            work[pi].values_mut()[i] = orig + step;
            let plus = eval(&work)?;
            work[pi].values_mut()[i] = orig - step;
            let minus = eval(&work)?;
            work[pi].values_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * step);
            let a = analytic[pi][i];
            let rel = (a - numeric).abs() / a.abs().max(numeric.abs()).max(1e-8);
            if rel > max_rel {
                max_rel = rel;
            }
        }
    }
    Ok(max_rel)
}
