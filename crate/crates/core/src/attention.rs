//! The decoupled attention model and its ablation baselines.
//!
//! Two detector heads share a feature map `x` of shape `[h, w, d]`:
//!
//! * the expansive head computes `z = softplus(conv1x1(x)) + eps` with
//!   dropout applied before and after the convolution during training, then
//!   spatially normalizes each class channel into an attention map `A` that
//!   integrates to one;
//! * the discriminative head is a plain per-pixel classifier
//!   `S = conv1x1(x)`.
//!
//! The attended score map is `S .* A`, the image score `p_c` is its spatial
//! sum, and training minimizes multi-label binary cross entropy on `p`.
//!
//! The conventional single-map baseline and the discriminative-only
//! single-stream ablation live here too, sharing the same trainer.

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::rng::{derive_seed, rng_from};
use crate::tensor::Tensor;
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// A training sample: feature map `[h, w, d]` plus a multi-hot label vector
/// over the foreground classes.
pub type Sample = (Tensor, Vec<f64>);

/// Which model the pipeline trains and annotates with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    Decoupled,
    Conventional,
    SingleStream,
}

impl std::fmt::Display for Variant {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let name = match self {
            Variant::Decoupled => "decoupled",
            Variant::Conventional => "conventional",
            Variant::SingleStream => "single-stream",
        };
        f.write_str(name)
    }
}

impl std::str::FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "decoupled" => Ok(Variant::Decoupled),
            "conventional" => Ok(Variant::Conventional),
            "single-stream" => Ok(Variant::SingleStream),
            other => Err(Error::Config(format!(
                "unknown variant '{other}' (expected decoupled|conventional|single-stream)"
            ))),
        }
    }
}

/// A trained model of any variant, as stored in checkpoints.
#[derive(Debug, Clone)]
pub enum TrainedModel {
    Decoupled(ModelParams),
    Conventional(ConventionalParams),
    SingleStream(SingleStreamParams),
}

impl TrainedModel {
    pub fn variant(&self) -> Variant {
        match self {
            TrainedModel::Decoupled(_) => Variant::Decoupled,
            TrainedModel::Conventional(_) => Variant::Conventional,
            TrainedModel::SingleStream(_) => Variant::SingleStream,
        }
    }

    pub fn feature_dim(&self) -> usize {
        match self {
            TrainedModel::Decoupled(p) => p.feature_dim(),
            TrainedModel::Conventional(p) => p.feature_dim(),
            TrainedModel::SingleStream(p) => p.feature_dim(),
        }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            TrainedModel::Decoupled(p) => p.num_classes(),
            TrainedModel::Conventional(p) => p.num_classes(),
            TrainedModel::SingleStream(p) => p.num_classes(),
        }
    }

    pub fn eps(&self) -> Option<f64> {
        match self {
            TrainedModel::Decoupled(p) => Some(p.eps),
            TrainedModel::Conventional(p) => Some(p.eps),
            TrainedModel::SingleStream(_) => None,
        }
    }

    pub fn dropout_rate(&self) -> Option<f64> {
        match self {
            TrainedModel::Decoupled(p) => Some(p.dropout_rate),
            TrainedModel::Conventional(_) => None,
            TrainedModel::SingleStream(p) => Some(p.dropout_rate),
        }
    }
}

fn init_weights(rng: &mut ChaCha8Rng, d: usize, c: usize) -> Tensor {
    // Fan-in scaled uniform init keeps softplus in its responsive range.
    let bound = 1.0 / (d as f64).sqrt();
    let values: Vec<f64> = (0..d * c).map(|_| rng.gen_range(-bound..=bound)).collect();
    Tensor::new(vec![d, c], values).expect("init shape is consistent")
}

// ── Decoupled model ─────────────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ModelParams {
    /// Expansive detector conv weights `[d, c]`.
    pub expansive_w: Tensor,
    /// Expansive detector bias `[c]`.
    pub expansive_b: Tensor,
    /// Discriminative detector conv weights `[d, c]`.
    pub discriminative_w: Tensor,
    /// Discriminative detector bias `[c]`.
    pub discriminative_b: Tensor,
    pub dropout_rate: f64,
    pub eps: f64,
}

impl ModelParams {
    pub fn new(feature_dim: usize, num_classes: usize, dropout_rate: f64, eps: f64, seed: u64) -> Result<Self> {
        if feature_dim == 0 || num_classes == 0 {
            return Err(Error::Config("feature_dim and num_classes must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config(format!("dropout_rate must be in [0,1), got {dropout_rate}")));
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {eps}")));
        }
        let mut rng = rng_from(derive_seed(seed, "init/decoupled"));
        Ok(ModelParams {
            expansive_w: init_weights(&mut rng, feature_dim, num_classes),
            expansive_b: Tensor::zeros(vec![num_classes])?,
            discriminative_w: init_weights(&mut rng, feature_dim, num_classes),
            discriminative_b: Tensor::zeros(vec![num_classes])?,
            dropout_rate,
            eps,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.expansive_w.shape()[0]
    }

    /// Number of foreground classes the detectors score.
    pub fn num_classes(&self) -> usize {
        self.expansive_w.shape()[1]
    }
}

/// Everything one forward pass of the decoupled model produces.
#[derive(Debug, Clone)]
pub struct ForwardOutputs {
    /// Expansive attention map `[h, w, c]`; each channel sums to one.
    pub expansive: Tensor,
    /// Discriminative score map `[h, w, c]` (unnormalized).
    pub discriminative: Tensor,
    /// Attended score map `S .* A`, `[h, w, c]`.
    pub attended: Tensor,
    /// Image classification scores `[c]`.
    pub scores: Tensor,
    /// Softmax of the scores, `[c]`; sums to one.
    pub score_softmax: Tensor,
}

struct DecoupledNodes {
    expansive: NodeId,
    discriminative: NodeId,
    attended: NodeId,
    scores: NodeId,
    score_softmax: NodeId,
}

fn build_decoupled(
    g: &mut Graph,
    x: NodeId,
    ew: NodeId,
    eb: NodeId,
    dw: NodeId,
    db: NodeId,
    dropout_rate: f64,
    eps: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<DecoupledNodes> {
    // Dropout wraps the expansive conv on both sides; softplus comes after
    // the second dropout so the attention stays strictly positive.
    let x_drop = g.dropout(x, dropout_rate, training, rng)?;
    let pre = g.conv1x1(x_drop, ew, eb)?;
    let pre_drop = g.dropout(pre, dropout_rate, training, rng)?;
    let z = g.softplus_eps(pre_drop, eps)?;
    let expansive = g.spatial_normalize(z)?;
    let discriminative = g.conv1x1(x, dw, db)?;
    let attended = g.mul(discriminative, expansive)?;
    let scores = g.spatial_sum(attended)?;
    let score_softmax = g.softmax(scores)?;
    Ok(DecoupledNodes {
        expansive,
        discriminative,
        attended,
        scores,
        score_softmax,
    })
}

/// Run the decoupled model on a feature map. In training mode the dropout
/// masks are drawn from `seed`; in inference mode the pass is deterministic
/// and dropout is the identity.
pub fn forward_decoupled(
    x: &Tensor,
    params: &ModelParams,
    training: bool,
    seed: u64,
) -> Result<ForwardOutputs> {
    let (_, _, d) = x.dims3()?;
    if d != params.feature_dim() {
        return Err(Error::Shape(format!(
            "feature depth {d} != model feature_dim {}",
            params.feature_dim()
        )));
    }
    let mut rng = rng_from(seed);
    let mut g = Graph::new();
    let xl = g.leaf(x);
    let ew = g.leaf(&params.expansive_w);
    let eb = g.leaf(&params.expansive_b);
    let dw = g.leaf(&params.discriminative_w);
    let db = g.leaf(&params.discriminative_b);
    let nodes = build_decoupled(
        &mut g,
        xl,
        ew,
        eb,
        dw,
        db,
        params.dropout_rate,
        params.eps,
        training,
        &mut rng,
    )?;
    Ok(ForwardOutputs {
        expansive: g.tensor(nodes.expansive),
        discriminative: g.tensor(nodes.discriminative),
        attended: g.tensor(nodes.attended),
        scores: g.tensor(nodes.scores),
        score_softmax: g.tensor(nodes.score_softmax),
    })
}

// ── Conventional single-map baseline ────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct ConventionalParams {
    /// Attention head conv weights `[d, 1]`.
    pub attention_w: Tensor,
    /// Attention head bias `[1]`.
    pub attention_b: Tensor,
    /// Classifier weights `[d, c]`.
    pub classifier_w: Tensor,
    /// Classifier bias `[c]`.
    pub classifier_b: Tensor,
    pub eps: f64,
}

impl ConventionalParams {
    pub fn new(feature_dim: usize, num_classes: usize, eps: f64, seed: u64) -> Result<Self> {
        if feature_dim == 0 || num_classes == 0 {
            return Err(Error::Config("feature_dim and num_classes must be >= 1".into()));
        }
        if !(eps > 0.0) {
            return Err(Error::Config(format!("eps must be > 0, got {eps}")));
        }
        let mut rng = rng_from(derive_seed(seed, "init/conventional"));
        Ok(ConventionalParams {
            attention_w: init_weights(&mut rng, feature_dim, 1),
            attention_b: Tensor::zeros(vec![1])?,
            classifier_w: init_weights(&mut rng, feature_dim, num_classes),
            classifier_b: Tensor::zeros(vec![num_classes])?,
            eps,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.classifier_w.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.classifier_w.shape()[1]
    }
}

struct ConventionalNodes {
    attention: NodeId,
    scores: NodeId,
}

fn build_conventional(
    g: &mut Graph,
    x: NodeId,
    aw: NodeId,
    ab: NodeId,
    cw: NodeId,
    cb: NodeId,
    eps: f64,
) -> Result<ConventionalNodes> {
    let z = {
        let pre = g.conv1x1(x, aw, ab)?;
        g.softplus_eps(pre, eps)?
    };
    let attention = g.spatial_normalize(z)?; // [h, w, 1]
    let weighted = g.mul_broadcast(x, attention)?;
    let pooled = g.spatial_sum(weighted)?; // [d]
    let scores = g.linear_vec(pooled, cw, cb)?;
    Ok(ConventionalNodes { attention, scores })
}

/// The class-agnostic attention baseline: one attention map, classifier on
/// the attention-pooled feature, bias added once outside the pooled sum.
pub fn forward_conventional(x: &Tensor, params: &ConventionalParams) -> Result<(Tensor, Tensor)> {
    let (h, w, d) = x.dims3()?;
    if d != params.feature_dim() {
        return Err(Error::Shape(format!(
            "feature depth {d} != model feature_dim {}",
            params.feature_dim()
        )));
    }
    let mut g = Graph::new();
    let xl = g.leaf(x);
    let aw = g.leaf(&params.attention_w);
    let ab = g.leaf(&params.attention_b);
    let cw = g.leaf(&params.classifier_w);
    let cb = g.leaf(&params.classifier_b);
    let nodes = build_conventional(&mut g, xl, aw, ab, cw, cb, params.eps)?;
    let attention = Tensor::new(vec![h, w], g.values(nodes.attention).to_vec())?;
    Ok((attention, g.tensor(nodes.scores)))
}

// ── Single-stream ablation ──────────────────────────────────────────────────

#[derive(Debug, Clone)]
pub struct SingleStreamParams {
    /// Detector conv weights `[d, c]`.
    pub w: Tensor,
    /// Detector bias `[c]`.
    pub b: Tensor,
    pub dropout_rate: f64,
}

impl SingleStreamParams {
    pub fn new(feature_dim: usize, num_classes: usize, dropout_rate: f64, seed: u64) -> Result<Self> {
        if feature_dim == 0 || num_classes == 0 {
            return Err(Error::Config("feature_dim and num_classes must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&dropout_rate) {
            return Err(Error::Config(format!("dropout_rate must be in [0,1), got {dropout_rate}")));
        }
        let mut rng = rng_from(derive_seed(seed, "init/single-stream"));
        Ok(SingleStreamParams {
            w: init_weights(&mut rng, feature_dim, num_classes),
            b: Tensor::zeros(vec![num_classes])?,
            dropout_rate,
        })
    }

    pub fn feature_dim(&self) -> usize {
        self.w.shape()[0]
    }

    pub fn num_classes(&self) -> usize {
        self.w.shape()[1]
    }
}

fn build_single_stream(
    g: &mut Graph,
    x: NodeId,
    w: NodeId,
    b: NodeId,
    dropout_rate: f64,
    training: bool,
    rng: &mut ChaCha8Rng,
) -> Result<(NodeId, NodeId)> {
    let x_drop = g.dropout(x, dropout_rate, training, rng)?;
    let s = g.conv1x1(x_drop, w, b)?;
    let s_drop = g.dropout(s, dropout_rate, training, rng)?;
    let scores = g.spatial_avg_pool(s_drop)?;
    Ok((s, scores))
}

/// The discriminative-detector-only ablation: scores are the spatial mean of
/// the per-pixel class map, with dropout around the conv in training mode.
pub fn forward_single_stream(
    x: &Tensor,
    params: &SingleStreamParams,
    training: bool,
    seed: u64,
) -> Result<(Tensor, Tensor)> {
    let (_, _, d) = x.dims3()?;
    if d != params.feature_dim() {
        return Err(Error::Shape(format!(
            "feature depth {d} != model feature_dim {}",
            params.feature_dim()
        )));
    }
    let mut rng = rng_from(seed);
    let mut g = Graph::new();
    let xl = g.leaf(x);
    let wl = g.leaf(&params.w);
    let bl = g.leaf(&params.b);
    let (s, scores) = build_single_stream(&mut g, xl, wl, bl, params.dropout_rate, training, &mut rng)?;
    Ok((g.tensor(s), g.tensor(scores)))
}

// ── Training ────────────────────────────────────────────────────────────────

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub batch_size: usize,
    /// Learning rate for the attention detector layers.
    pub lr_attention: f64,
    /// Learning rate reserved for trainable feature-adapter layers; the
    /// synthetic pipeline has none, so this knob is carried but unused.
    pub lr_backbonelike: f64,
    pub lr_decay_factor: f64,
    /// Epoch index at which the learning rate is divided by the decay factor.
    pub decay_epoch: usize,
    pub total_epochs: usize,
    pub seed: u64,
    /// Horizontal-flip augmentation of feature maps during training.
    pub hflip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            batch_size: 15,
            lr_attention: 0.1,
            lr_backbonelike: 0.01,
            lr_decay_factor: 10.0,
            decay_epoch: 10,
            total_epochs: 20,
            seed: 0,
            hflip: true,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        // Zero learning rate is accepted as an explicit "no step" setting.
        if self.lr_attention < 0.0 || self.lr_backbonelike < 0.0 {
            return Err(Error::Config("learning rates must be >= 0".into()));
        }
        if !(self.lr_decay_factor > 0.0) {
            return Err(Error::Config("lr_decay_factor must be > 0".into()));
        }
        if self.decay_epoch >= self.total_epochs {
            return Err(Error::Config(format!(
                "decay_epoch {} must be < total_epochs {}",
                self.decay_epoch, self.total_epochs
            )));
        }
        Ok(())
    }
}

/// Per-epoch mean loss, in epoch order.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_mean_loss: Vec<f64>,
}

/// A model that can be trained with the shared minibatch SGD loop.
trait TrainableModel {
    fn num_classes(&self) -> usize;
    fn feature_dim(&self) -> usize;
    /// Build the per-sample loss graph; returns the loss node plus the
    /// parameter leaf nodes in the same order as `param_blocks_mut`.
    fn build_loss(
        &self,
        g: &mut Graph,
        x: &Tensor,
        y: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<(NodeId, Vec<NodeId>)>;
    fn param_blocks_mut(&mut self) -> Vec<&mut Tensor>;
}

impl TrainableModel for ModelParams {
    fn num_classes(&self) -> usize {
        self.num_classes()
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim()
    }

    fn build_loss(
        &self,
        g: &mut Graph,
        x: &Tensor,
        y: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let xl = g.leaf(x);
        let ew = g.leaf(&self.expansive_w);
        let eb = g.leaf(&self.expansive_b);
        let dw = g.leaf(&self.discriminative_w);
        let db = g.leaf(&self.discriminative_b);
        let nodes = build_decoupled(g, xl, ew, eb, dw, db, self.dropout_rate, self.eps, true, rng)?;
        let loss = g.multilabel_bce(nodes.scores, y)?;
        Ok((loss, vec![ew, eb, dw, db]))
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.expansive_w,
            &mut self.expansive_b,
            &mut self.discriminative_w,
            &mut self.discriminative_b,
        ]
    }
}

impl TrainableModel for ConventionalParams {
    fn num_classes(&self) -> usize {
        self.num_classes()
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim()
    }

    fn build_loss(
        &self,
        g: &mut Graph,
        x: &Tensor,
        y: &[f64],
        _rng: &mut ChaCha8Rng,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let xl = g.leaf(x);
        let aw = g.leaf(&self.attention_w);
        let ab = g.leaf(&self.attention_b);
        let cw = g.leaf(&self.classifier_w);
        let cb = g.leaf(&self.classifier_b);
        let nodes = build_conventional(g, xl, aw, ab, cw, cb, self.eps)?;
        let loss = g.multilabel_bce(nodes.scores, y)?;
        Ok((loss, vec![aw, ab, cw, cb]))
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut Tensor> {
        vec![
            &mut self.attention_w,
            &mut self.attention_b,
            &mut self.classifier_w,
            &mut self.classifier_b,
        ]
    }
}

impl TrainableModel for SingleStreamParams {
    fn num_classes(&self) -> usize {
        self.num_classes()
    }

    fn feature_dim(&self) -> usize {
        self.feature_dim()
    }

    fn build_loss(
        &self,
        g: &mut Graph,
        x: &Tensor,
        y: &[f64],
        rng: &mut ChaCha8Rng,
    ) -> Result<(NodeId, Vec<NodeId>)> {
        let xl = g.leaf(x);
        let wl = g.leaf(&self.w);
        let bl = g.leaf(&self.b);
        let (_, scores) = build_single_stream(g, xl, wl, bl, self.dropout_rate, true, rng)?;
        let loss = g.multilabel_bce(scores, y)?;
        Ok((loss, vec![wl, bl]))
    }

    fn param_blocks_mut(&mut self) -> Vec<&mut Tensor> {
        vec![&mut self.w, &mut self.b]
    }
}

fn validate_dataset<M: TrainableModel>(model: &M, dataset: &[Sample]) -> Result<()> {
    if dataset.is_empty() {
        return Err(Error::Data("training dataset is empty".into()));
    }
    for (i, (x, y)) in dataset.iter().enumerate() {
        let (_, _, d) = x.dims3()?;
        if d != model.feature_dim() {
            return Err(Error::Data(format!(
                "sample {i}: feature depth {d} != model feature_dim {}",
                model.feature_dim()
            )));
        }
        if y.len() != model.num_classes() {
            return Err(Error::Data(format!(
                "sample {i}: {} labels != model num_classes {}",
                y.len(),
                model.num_classes()
            )));
        }
        if y.iter().any(|&v| v != 0.0 && v != 1.0) {
            return Err(Error::Data(format!("sample {i}: labels must be multi-hot 0/1")));
        }
    }
    Ok(())
}

fn train_impl<M: TrainableModel>(model: &mut M, dataset: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    cfg.validate()?;
    validate_dataset(model, dataset)?;
    let mut rng = rng_from(derive_seed(cfg.seed, "train"));
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    let mut epoch_mean_loss = Vec::with_capacity(cfg.total_epochs);

    for epoch in 0..cfg.total_epochs {
        let lr = if epoch >= cfg.decay_epoch {
            cfg.lr_attention / cfg.lr_decay_factor
        } else {
            cfg.lr_attention
        };
        order.shuffle(&mut rng);
        // Per-sample slots keep the epoch mean independent of shuffle order.
        let mut sample_loss = vec![0.0; n];

        for batch in order.chunks(cfg.batch_size) {
            let mut grads: Vec<Vec<f64>> = Vec::new();
            for &idx in batch {
                let (x, y) = &dataset[idx];
                let flipped;
                let x_in = if cfg.hflip && rng.gen::<bool>() {
                    flipped = x.hflip()?;
                    &flipped
                } else {
                    x
                };
                let mut g = Graph::new();
                let (loss, param_ids) = model.build_loss(&mut g, x_in, y, &mut rng)?;
                sample_loss[idx] = g.values(loss)[0];
                g.backward(loss)?;
                if grads.is_empty() {
                    grads = param_ids
                        .iter()
                        .map(|&id| vec![0.0; g.values(id).len()])
                        .collect();
                }
                let scale = 1.0 / batch.len() as f64;
                for (acc, &id) in grads.iter_mut().zip(&param_ids) {
                    if let Some(pg) = g.grad(id) {
                        for (a, &v) in acc.iter_mut().zip(pg) {
                            *a += v * scale;
                        }
                    }
                }
            }
            for (block, acc) in model.param_blocks_mut().into_iter().zip(&grads) {
                block.ensure_grad();
                let gslot = block.grad_mut().expect("grad slot just ensured");
                gslot.copy_from_slice(acc);
                for (v, &gv) in block.values_mut().iter_mut().zip(acc) {
                    *v -= lr * gv;
                }
            }
        }
        epoch_mean_loss.push(sample_loss.iter().sum::<f64>() / n as f64);
    }
    Ok(TrainReport { epoch_mean_loss })
}

/// Minibatch SGD on the decoupled model. Deterministic given `cfg.seed`:
/// shuffling, flips, and dropout masks all come from one seeded stream.
pub fn train(params: &mut ModelParams, dataset: &[Sample], cfg: &TrainConfig) -> Result<TrainReport> {
    train_impl(params, dataset, cfg)
}

pub fn train_conventional(
    params: &mut ConventionalParams,
    dataset: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_impl(params, dataset, cfg)
}

pub fn train_single_stream(
    params: &mut SingleStreamParams,
    dataset: &[Sample],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    train_impl(params, dataset, cfg)
}
