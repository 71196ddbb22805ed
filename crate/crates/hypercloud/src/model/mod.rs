//! The HyperCloud model: a permutation-invariant set encoder producing a
//! Gaussian latent code, a hypernetwork decoder that emits the flat weight
//! vector of a per-shape target network, and the target network itself, an
//! MLP mapping prior samples in the unit ball onto the shape.
//!
//! Plain (value-only) and tape (differentiable) forward paths share loop
//! order, so they agree bit for bit; tests pin that equality.

mod checkpoint;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_VERSION};
pub use train::{mean_reconstruction_err, train, Adam, HistoryRow};

use rand::Rng as _;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{NodeId, Tape, Tensor};
use crate::error::{Error, Result};
use crate::geometry::{PointCloud, Rng};
use crate::setdist::{chamfer_on_tape, emd_on_tape};

/// Layer widths of the target network. First and last are always 3: the
/// network carries prior points to surface points.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetArch {
    widths: Vec<usize>,
}

impl Default for TargetArch {
    fn default() -> Self {
        TargetArch { widths: vec![3, 32, 64, 128, 64, 3] }
    }
}

impl TargetArch {
    pub fn new(widths: Vec<usize>) -> Result<Self> {
        if widths.len() < 2 || widths.first() != Some(&3) || widths.last() != Some(&3) {
            return Err(Error::InvalidArg(format!(
                "target arch must start and end at width 3, got {:?}",
                widths
            )));
        }
        if widths.iter().any(|&w| w == 0) {
            return Err(Error::InvalidArg("target arch widths must be positive".into()));
        }
        Ok(TargetArch { widths })
    }

    pub fn widths(&self) -> &[usize] {
        &self.widths
    }

    /// Total parameters: sum of w_i * w_{i+1} + w_{i+1} over layers.
    pub fn param_count(&self) -> usize {
        self.widths
            .windows(2)
            .map(|p| p[0] * p[1] + p[1])
            .sum()
    }

    pub fn num_layers(&self) -> usize {
        self.widths.len() - 1
    }
}

/// Flat target-network parameter vector, layer-major: for each layer the
/// row-major weight block then the bias block.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetWeights {
    pub theta: Vec<f64>,
}

impl TargetWeights {
    pub fn new(arch: &TargetArch, theta: Vec<f64>) -> Result<Self> {
        if theta.len() != arch.param_count() {
            return Err(Error::InvalidArg(format!(
                "theta has {} entries, arch {:?} needs {}",
                theta.len(),
                arch.widths(),
                arch.param_count()
            )));
        }
        Ok(TargetWeights { theta })
    }
}

/// A dense layer: weights stored row-major as [in_dim][out_dim].
#[derive(Debug, Clone, PartialEq)]
pub struct LinearLayer {
    pub in_dim: usize,
    pub out_dim: usize,
    pub w: Vec<f64>,
    pub b: Vec<f64>,
}

impl LinearLayer {
    fn zeros(in_dim: usize, out_dim: usize) -> Self {
        LinearLayer { in_dim, out_dim, w: vec![0.0; in_dim * out_dim], b: vec![0.0; out_dim] }
    }

    /// Fan-in-scaled uniform init: every entry from
    /// U(-scale/sqrt(in_dim), scale/sqrt(in_dim)).
    fn init(in_dim: usize, out_dim: usize, scale: f64, rng: &mut Rng) -> Self {
        let bound = scale / (in_dim as f64).sqrt();
        let mut draw = |n: usize| -> Vec<f64> {
            (0..n).map(|_| (rng.random::<f64>() * 2.0 - 1.0) * bound).collect()
        };
        let w = draw(in_dim * out_dim);
        let b = draw(out_dim);
        LinearLayer { in_dim, out_dim, w, b }
    }

    /// Apply to `rows` stacked row vectors: zero-init accumulate over the
    /// input dimension, then a separate bias pass. Mirrors the tape's
    /// matmul + add exactly.
    fn forward(&self, input: &[f64], rows: usize) -> Vec<f64> {
        debug_assert_eq!(input.len(), rows * self.in_dim);
        let (k, n) = (self.in_dim, self.out_dim);
        let mut out = vec![0.0; rows * n];
        for i in 0..rows {
            let x_row = &input[i * k..(i + 1) * k];
            let o_row = &mut out[i * n..(i + 1) * n];
            for (kk, &xv) in x_row.iter().enumerate() {
                if xv == 0.0 {
                    continue;
                }
                let w_row = &self.w[kk * n..(kk + 1) * n];
                for (o, &wv) in o_row.iter_mut().zip(w_row) {
                    *o += xv * wv;
                }
            }
        }
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(&self.b) {
                *o += bv;
            }
        }
        out
    }
}

/// Supported reconstruction losses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    #[serde(rename = "cd")]
    Chamfer,
    #[serde(rename = "emd")]
    Emd,
}

fn default_lr() -> f64 {
    1e-4
}
fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_epsilon() -> f64 {
    1e-8
}
fn default_batch() -> usize {
    8
}
fn default_latent() -> usize {
    64
}
fn default_target_widths() -> Vec<usize> {
    TargetArch::default().widths.clone()
}
fn default_encoder_widths() -> Vec<usize> {
    vec![3, 64, 128, 256]
}
fn default_encoder_head() -> usize {
    128
}
fn default_decoder_hidden() -> Vec<usize> {
    vec![256, 512]
}

/// Training configuration. `loss`, `lambda`, `steps`, and `seed` must be
/// given; everything else has the documented default.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Reconstruction term: `"cd"` or `"emd"`.
    pub loss: LossKind,
    /// KL regularization weight (>= 0).
    pub lambda: f64,
    pub steps: usize,
    pub seed: u64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_epsilon")]
    pub epsilon: f64,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    /// Prior samples per cloud; `null` matches each cloud's own size (the
    /// only option for EMD, which needs equal sizes).
    #[serde(default)]
    pub prior_samples: Option<usize>,
    #[serde(default = "default_latent")]
    pub latent_dim: usize,
    #[serde(default = "default_target_widths")]
    pub target_widths: Vec<usize>,
    #[serde(default = "default_encoder_widths")]
    pub encoder_widths: Vec<usize>,
    #[serde(default = "default_encoder_head")]
    pub encoder_head: usize,
    #[serde(default = "default_decoder_hidden")]
    pub decoder_hidden: Vec<usize>,
}

impl TrainConfig {
    /// Spec defaults with the required fields filled in.
    pub fn new(loss: LossKind, lambda: f64, steps: usize, seed: u64) -> Self {
        TrainConfig {
            loss,
            lambda,
            steps,
            seed,
            learning_rate: default_lr(),
            beta1: default_beta1(),
            beta2: default_beta2(),
            epsilon: default_epsilon(),
            batch_size: default_batch(),
            prior_samples: None,
            latent_dim: default_latent(),
            target_widths: default_target_widths(),
            encoder_widths: default_encoder_widths(),
            encoder_head: default_encoder_head(),
            decoder_hidden: default_decoder_hidden(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.lambda < 0.0 {
            return Err(Error::Config(format!("lambda must be >= 0, got {}", self.lambda)));
        }
        if self.steps == 0 {
            return Err(Error::Config("steps must be >= 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if self.latent_dim == 0 {
            return Err(Error::Config("latent_dim must be >= 1".into()));
        }
        if self.encoder_widths.first() != Some(&3) || self.encoder_widths.len() < 2 {
            return Err(Error::Config(format!(
                "encoder_widths must start at 3, got {:?}",
                self.encoder_widths
            )));
        }
        if self.loss == LossKind::Emd && self.prior_samples.is_some() {
            return Err(Error::Config(
                "EMD needs the prior sample count to equal each cloud's size; omit prior_samples".into(),
            ));
        }
        TargetArch::new(self.target_widths.clone())?;
        Ok(())
    }

    pub fn target_arch(&self) -> Result<TargetArch> {
        TargetArch::new(self.target_widths.clone())
    }
}

/// Encoder + hypernetwork-decoder parameters and the target architecture
/// they emit weights for.
#[derive(Debug, Clone, PartialEq)]
pub struct HyperModel {
    pub latent_dim: usize,
    pub target_arch: TargetArch,
    /// Shared per-point perceptron, applied to every point independently.
    pub encoder_point: Vec<LinearLayer>,
    /// Post-pool head feeding both latent heads.
    pub encoder_head: LinearLayer,
    pub head_mu: LinearLayer,
    pub head_logvar: LinearLayer,
    /// Hypernetwork decoder; its last layer's width is the target network's
    /// parameter count.
    pub decoder: Vec<LinearLayer>,
}

// The decoder's output layer starts at 1/100 of the fan-in bound so the
// initial theta is small and early target outputs stay near the origin;
// large random initial clouds destabilize the first EMD matchings.
const DECODER_FINAL_INIT_SCALE: f64 = 0.01;

impl HyperModel {
    /// Initialize from config with fan-in-scaled uniform draws in a fixed
    /// layer order, so a seed pins every parameter.
    pub fn init(config: &TrainConfig, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let target_arch = config.target_arch()?;
        let param_count = target_arch.param_count();

        let mut encoder_point = Vec::new();
        for pair in config.encoder_widths.windows(2) {
            encoder_point.push(LinearLayer::init(pair[0], pair[1], 1.0, rng));
        }
        let feat = *config.encoder_widths.last().expect("validated");
        let encoder_head = LinearLayer::init(feat, config.encoder_head, 1.0, rng);
        let head_mu = LinearLayer::init(config.encoder_head, config.latent_dim, 1.0, rng);
        let head_logvar = LinearLayer::init(config.encoder_head, config.latent_dim, 1.0, rng);

        let mut decoder = Vec::new();
        let mut widths = vec![config.latent_dim];
        widths.extend_from_slice(&config.decoder_hidden);
        widths.push(param_count);
        for (li, pair) in widths.windows(2).enumerate() {
            let scale = if li + 2 == widths.len() { DECODER_FINAL_INIT_SCALE } else { 1.0 };
            decoder.push(LinearLayer::init(pair[0], pair[1], scale, rng));
        }

        Ok(HyperModel {
            latent_dim: config.latent_dim,
            target_arch,
            encoder_point,
            encoder_head,
            head_mu,
            head_logvar,
            decoder,
        })
    }

    /// All layers in the canonical order used by the optimizer and the
    /// checkpoint format.
    pub fn layers(&self) -> Vec<&LinearLayer> {
        let mut v: Vec<&LinearLayer> = self.encoder_point.iter().collect();
        v.push(&self.encoder_head);
        v.push(&self.head_mu);
        v.push(&self.head_logvar);
        v.extend(self.decoder.iter());
        v
    }

    pub fn layers_mut(&mut self) -> Vec<&mut LinearLayer> {
        let mut v: Vec<&mut LinearLayer> = self.encoder_point.iter_mut().collect();
        v.push(&mut self.encoder_head);
        v.push(&mut self.head_mu);
        v.push(&mut self.head_logvar);
        v.extend(self.decoder.iter_mut());
        v
    }

    /// Stable names matching [`HyperModel::layers`] order.
    pub fn layer_names(&self) -> Vec<String> {
        let mut v: Vec<String> =
            (0..self.encoder_point.len()).map(|i| format!("encoder_point_{}", i)).collect();
        v.push("encoder_head".into());
        v.push("head_mu".into());
        v.push("head_logvar".into());
        v.extend((0..self.decoder.len()).map(|i| format!("decoder_{}", i)));
        v
    }

    pub fn param_count(&self) -> usize {
        self.layers().iter().map(|l| l.w.len() + l.b.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.layers()
            .iter()
            .all(|l| l.w.iter().chain(&l.b).all(|v| v.is_finite()))
    }

    /// Register every parameter as a tape leaf (canonical order).
    pub fn register_leaves(&self, tape: &mut Tape) -> ModelLeaves {
        let ids = self
            .layers()
            .into_iter()
            .map(|l| {
                let w = tape.leaf(Tensor::new(vec![l.in_dim, l.out_dim], l.w.clone()).expect("layer"));
                let b = tape.leaf(Tensor::new(vec![l.out_dim], l.b.clone()).expect("bias"));
                (w, b)
            })
            .collect();
        ModelLeaves { ids }
    }
}

/// Tape leaf ids for every layer, parallel to [`HyperModel::layers`].
pub struct ModelLeaves {
    ids: Vec<(NodeId, NodeId)>,
}

impl ModelLeaves {
    pub fn all(&self) -> &[(NodeId, NodeId)] {
        &self.ids
    }

    fn layer(&self, idx: usize) -> (NodeId, NodeId) {
        self.ids[idx]
    }
}

/// Gaussian posterior parameters plus the latent draw; `z` defaults to the
/// mean until [`reparameterize`] replaces it.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentCode {
    pub mu: Vec<f64>,
    pub logvar: Vec<f64>,
    pub z: Vec<f64>,
}

/// logvar is clamped to this symmetric range wherever it is exponentiated,
/// preventing overflow on degenerate inputs.
pub const LOGVAR_CLAMP: f64 = 20.0;

fn clamp_logvar(v: f64) -> f64 {
    v.clamp(-LOGVAR_CLAMP, LOGVAR_CLAMP)
}

/// Whether [`reparameterize`] draws noise or returns the mean.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SampleMode {
    Sample,
    Deterministic,
}

/// z = mu + exp(logvar/2) * eps with eps ~ N(0, I); deterministic mode
/// returns mu.
pub fn reparameterize(code: &LatentCode, mode: SampleMode, rng: &mut Rng) -> Vec<f64> {
    match mode {
        SampleMode::Deterministic => code.mu.clone(),
        SampleMode::Sample => code
            .mu
            .iter()
            .zip(&code.logvar)
            .map(|(&m, &lv)| {
                let eps: f64 = rng.sample(StandardNormal);
                m + (0.5 * clamp_logvar(lv)).exp() * eps
            })
            .collect(),
    }
}

/// KL divergence of N(mu, diag(exp(logvar))) from N(0, I):
/// 0.5 * sum(exp(lv) + mu^2 - 1 - lv), with lv clamped per [`LOGVAR_CLAMP`].
pub fn kld(mu: &[f64], logvar: &[f64]) -> Result<f64> {
    if mu.len() != logvar.len() {
        return Err(Error::InvalidArg(format!(
            "kld dims differ: {} vs {}",
            mu.len(),
            logvar.len()
        )));
    }
    Ok(0.5
        * mu.iter()
            .zip(logvar)
            .map(|(&m, &lv)| {
                let lv = clamp_logvar(lv);
                lv.exp() + m * m - 1.0 - lv
            })
            .sum::<f64>())
}

/// Shared-weight point MLP, column max pool, relu head, two linear heads.
/// Exactly permutation-invariant: each point is mapped independently and the
/// pooled max per feature does not depend on row order.
pub fn encode(model: &HyperModel, pc: &PointCloud) -> Result<LatentCode> {
    if pc.is_empty() {
        return Err(Error::EmptyCloud("encode".into()));
    }
    if !pc.all_finite() {
        return Err(Error::NonFinite { op: "encode", details: "input cloud".into() });
    }
    let n = pc.len();
    let mut h = pc.flat();
    for layer in &model.encoder_point {
        h = layer.forward(&h, n);
        for v in h.iter_mut() {
            if *v < 0.0 {
                *v = 0.0;
            }
        }
    }
    let feat = model.encoder_point.last().map(|l| l.out_dim).unwrap_or(3);
    let mut pooled = h[..feat].to_vec();
    for r in 1..n {
        for (p, &v) in pooled.iter_mut().zip(&h[r * feat..(r + 1) * feat]) {
            if v > *p {
                *p = v;
            }
        }
    }
    let mut head = model.encoder_head.forward(&pooled, 1);
    for v in head.iter_mut() {
        if *v < 0.0 {
            *v = 0.0;
        }
    }
    let mu = model.head_mu.forward(&head, 1);
    let logvar = model.head_logvar.forward(&head, 1);
    let z = mu.clone();
    Ok(LatentCode { mu, logvar, z })
}

/// Decoder MLP from a latent vector to the flat target weight vector.
pub fn hyper_decode(model: &HyperModel, z: &[f64]) -> Result<TargetWeights> {
    if z.len() != model.latent_dim {
        return Err(Error::InvalidArg(format!(
            "latent has dim {}, model expects {}",
            z.len(),
            model.latent_dim
        )));
    }
    let mut h = z.to_vec();
    let last = model.decoder.len() - 1;
    for (li, layer) in model.decoder.iter().enumerate() {
        h = layer.forward(&h, 1);
        if li != last {
            for v in h.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
    TargetWeights::new(&model.target_arch, h)
}

/// Apply the target network defined by `(arch, theta)` to each point
/// independently. Any input size works; that is the point of emitting
/// weights instead of points.
pub fn target_forward(arch: &TargetArch, weights: &TargetWeights, points: &PointCloud) -> Result<PointCloud> {
    if weights.theta.len() != arch.param_count() {
        return Err(Error::InvalidArg(format!(
            "theta has {} entries, arch needs {}",
            weights.theta.len(),
            arch.param_count()
        )));
    }
    if points.is_empty() {
        return Err(Error::EmptyCloud("target_forward".into()));
    }
    let n = points.len();
    let mut h = points.flat();
    let mut offset = 0;
    let num_layers = arch.num_layers();
    for (li, pair) in arch.widths().windows(2).enumerate() {
        let (ind, outd) = (pair[0], pair[1]);
        let layer = LinearLayer {
            in_dim: ind,
            out_dim: outd,
            w: weights.theta[offset..offset + ind * outd].to_vec(),
            b: weights.theta[offset + ind * outd..offset + ind * outd + outd].to_vec(),
        };
        offset += ind * outd + outd;
        h = layer.forward(&h, n);
        if li + 1 != num_layers {
            for v in h.iter_mut() {
                if *v < 0.0 {
                    *v = 0.0;
                }
            }
        }
    }
    Ok(PointCloud::new(h.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()))
}

// ── Tape forward paths ──────────────────────────────────────────────────

fn linear_tape(tape: &mut Tape, x: NodeId, layer: (NodeId, NodeId), relu: bool) -> Result<NodeId> {
    let y = tape.matmul(x, layer.0)?;
    let y = tape.add(y, layer.1)?;
    if relu {
        tape.relu(y)
    } else {
        Ok(y)
    }
}

/// clamp(x, -c, c) built from relu: x - relu(x - c) + relu(-c - x).
/// Bit-exact identity for in-range values; gradient is 1 inside the range
/// and 0 outside.
fn clamp_tape(tape: &mut Tape, x: NodeId, c: f64) -> Result<NodeId> {
    let shape = tape.value(x).shape().to_vec();
    let neg_hi = tape.leaf(Tensor::filled(shape, -c));
    let over = tape.add(x, neg_hi)?; // x - c
    let over = tape.relu(over)?;
    let neg_over = tape.neg(over)?;
    let neg_x = tape.neg(x)?;
    let below = tape.add(neg_hi, neg_x)?; // -c - x
    let under = tape.relu(below)?;
    let t = tape.add(x, neg_over)?;
    tape.add(t, under)
}

/// Nodes of one cloud's loss term.
pub struct LossNodes {
    pub total: NodeId,
    pub err: NodeId,
    pub kl: NodeId,
    pub mu: NodeId,
    pub logvar: NodeId,
    /// Reconstructed cloud node, [n,3].
    pub recon: NodeId,
}

/// Encoder on the tape: returns ([1,D] mu, [1,D] logvar).
pub fn encode_on_tape(
    model: &HyperModel,
    leaves: &ModelLeaves,
    tape: &mut Tape,
    pc: &PointCloud,
) -> Result<(NodeId, NodeId)> {
    if pc.is_empty() {
        return Err(Error::EmptyCloud("encode".into()));
    }
    if !pc.all_finite() {
        return Err(Error::NonFinite { op: "encode", details: "input cloud".into() });
    }
    let mut x = tape.leaf(Tensor::new(vec![pc.len(), 3], pc.flat())?);
    for li in 0..model.encoder_point.len() {
        x = linear_tape(tape, x, leaves.layer(li), true)?;
    }
    let pooled = tape.max_over_rows(x)?;
    let feat = tape.value(pooled).numel();
    let pooled = tape.reshape(pooled, vec![1, feat])?;
    let ep = model.encoder_point.len();
    let head = linear_tape(tape, pooled, leaves.layer(ep), true)?;
    let mu = linear_tape(tape, head, leaves.layer(ep + 1), false)?;
    let logvar = linear_tape(tape, head, leaves.layer(ep + 2), false)?;
    Ok((mu, logvar))
}

/// Hypernetwork decoder on the tape: [1,D] latent to flat theta node [P].
pub fn decode_on_tape(
    model: &HyperModel,
    leaves: &ModelLeaves,
    tape: &mut Tape,
    z: NodeId,
) -> Result<NodeId> {
    let base = model.encoder_point.len() + 3;
    let mut h = z;
    let last = model.decoder.len() - 1;
    for li in 0..model.decoder.len() {
        h = linear_tape(tape, h, leaves.layer(base + li), li != last)?;
    }
    let p = tape.value(h).numel();
    tape.reshape(h, vec![p])
}

/// Target network on the tape with theta carved from a flat node: for each
/// layer, slice + reshape the weight block, slice the bias, then
/// matmul / add / relu.
pub fn target_forward_on_tape(
    tape: &mut Tape,
    arch: &TargetArch,
    theta: NodeId,
    points: &PointCloud,
) -> Result<NodeId> {
    if tape.value(theta).numel() != arch.param_count() {
        return Err(Error::InvalidArg(format!(
            "theta node has {} entries, arch needs {}",
            tape.value(theta).numel(),
            arch.param_count()
        )));
    }
    let mut x = tape.leaf(Tensor::new(vec![points.len(), 3], points.flat())?);
    let mut offset = 0;
    let num_layers = arch.num_layers();
    for (li, pair) in arch.widths().to_vec().windows(2).enumerate() {
        let (ind, outd) = (pair[0], pair[1]);
        let w_flat = tape.slice(theta, offset, ind * outd)?;
        let w = tape.reshape(w_flat, vec![ind, outd])?;
        let b = tape.slice(theta, offset + ind * outd, outd)?;
        offset += ind * outd + outd;
        x = tape.matmul(x, w)?;
        x = tape.add(x, b)?;
        if li + 1 != num_layers {
            x = tape.relu(x)?;
        }
    }
    Ok(x)
}

/// KL node from [1,D] mu and logvar nodes (logvar clamped like the plain
/// path).
fn kld_on_tape(tape: &mut Tape, mu: NodeId, logvar: NodeId) -> Result<NodeId> {
    let d = tape.value(mu).numel();
    let lv = clamp_tape(tape, logvar, LOGVAR_CLAMP)?;
    let e = tape.exp(lv)?;
    let mu_sq = tape.mul(mu, mu)?;
    let ones = tape.leaf(Tensor::filled(vec![1, d], 1.0));
    let lin = tape.add(ones, lv)?;
    let neg_lin = tape.neg(lin)?;
    let s = tape.add(e, mu_sq)?;
    let s = tape.add(s, neg_lin)?;
    let total = tape.sum_all(s)?;
    let half = tape.leaf(Tensor::scalar(0.5));
    tape.mul(half, total)
}

/// Build one cloud's full cost on the tape: encode, reparameterize with the
/// given noise (or use the mean when `eps` is `None`), decode theta, push
/// the prior through the target network, and score it against `pc`.
///
/// `total = err + lambda * kl`. The EMD matching and the Chamfer
/// nearest-neighbor indices are fixed at the current forward values during
/// backward.
pub fn loss_on_tape(
    model: &HyperModel,
    leaves: &ModelLeaves,
    tape: &mut Tape,
    pc: &PointCloud,
    prior: &PointCloud,
    eps: Option<&[f64]>,
    kind: LossKind,
    lambda: f64,
) -> Result<LossNodes> {
    let d = model.latent_dim;
    let (mu, logvar) = encode_on_tape(model, leaves, tape, pc)?;
    let z = match eps {
        None => mu,
        Some(eps) => {
            if eps.len() != d {
                return Err(Error::InvalidArg(format!(
                    "eps has dim {}, latent dim is {}",
                    eps.len(),
                    d
                )));
            }
            let lv = clamp_tape(tape, logvar, LOGVAR_CLAMP)?;
            let halves = tape.leaf(Tensor::filled(vec![1, d], 0.5));
            let half_lv = tape.mul(halves, lv)?;
            let std = tape.exp(half_lv)?;
            let eps_node = tape.leaf(Tensor::new(vec![1, d], eps.to_vec())?);
            let noise = tape.mul(std, eps_node)?;
            tape.add(mu, noise)?
        }
    };
    let theta = decode_on_tape(model, leaves, tape, z)?;
    let recon = target_forward_on_tape(tape, &model.target_arch, theta, prior)?;
    let err = match kind {
        LossKind::Chamfer => chamfer_on_tape(tape, pc, recon)?,
        LossKind::Emd => {
            if prior.len() != pc.len() {
                return Err(Error::SizeMismatch(format!(
                    "EMD loss needs as many prior samples as cloud points, got {} vs {}",
                    prior.len(),
                    pc.len()
                )));
            }
            emd_on_tape(tape, pc, recon)?
        }
    };
    let kl = kld_on_tape(tape, mu, logvar)?;
    let lam = tape.leaf(Tensor::scalar(lambda));
    let reg = tape.mul(lam, kl)?;
    let total = tape.add(err, reg)?;
    Ok(LossNodes { total, err, kl, mu, logvar, recon })
}

/// Per-cloud loss values.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub err: f64,
    pub kl: f64,
}

/// Evaluate the cost for fixed inputs (no rng): the deterministic core of
/// [`loss`], shared by tests and checkpoint verification.
pub fn loss_forward(
    model: &HyperModel,
    pc: &PointCloud,
    prior: &PointCloud,
    eps: Option<&[f64]>,
    kind: LossKind,
    lambda: f64,
) -> Result<LossBreakdown> {
    let mut tape = Tape::new();
    let leaves = model.register_leaves(&mut tape);
    let nodes = loss_on_tape(model, &leaves, &mut tape, pc, prior, eps, kind, lambda)?;
    Ok(LossBreakdown {
        total: tape.value(nodes.total).item(),
        err: tape.value(nodes.err).item(),
        kl: tape.value(nodes.kl).item(),
    })
}

/// Sample fresh prior points (and latent noise) from `rng`, then score the
/// cloud. Identical seed, model, and config give an identical value.
pub fn loss(
    model: &HyperModel,
    pc: &PointCloud,
    config: &TrainConfig,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    config.validate()?;
    let n = config.prior_samples.unwrap_or(pc.len());
    let prior = crate::geometry::sample_ball(n, rng)?;
    let eps: Vec<f64> = (0..model.latent_dim).map(|_| rng.sample(StandardNormal)).collect();
    loss_forward(model, pc, &prior, Some(&eps), config.loss, config.lambda)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{rng_from_seed, sample_ball};

    fn small_config() -> TrainConfig {
        let mut c = TrainConfig::new(LossKind::Chamfer, 0.001, 10, 7);
        c.latent_dim = 4;
        c.encoder_widths = vec![3, 8, 16];
        c.encoder_head = 8;
        c.decoder_hidden = vec![16];
        c.target_widths = vec![3, 8, 3];
        c
    }

    fn small_model(seed: u64) -> HyperModel {
        let mut rng = rng_from_seed(seed);
        HyperModel::init(&small_config(), &mut rng).unwrap()
    }

    #[test]
    fn default_arch_param_count() {
        assert_eq!(TargetArch::default().param_count(), 19_011);
    }

    #[test]
    fn target_arch_validation() {
        assert!(TargetArch::new(vec![3, 3]).is_ok());
        assert!(TargetArch::new(vec![2, 8, 3]).is_err());
        assert!(TargetArch::new(vec![3, 8, 4]).is_err());
        assert!(TargetArch::new(vec![3]).is_err());
    }

    #[test]
    fn encode_is_permutation_invariant_bitwise() {
        let model = small_model(3);
        let mut rng = rng_from_seed(10);
        let pc = sample_ball(33, &mut rng).unwrap();
        let base = encode(&model, &pc).unwrap();

        let mut rev = pc.points.clone();
        rev.reverse();
        let enc_rev = encode(&model, &PointCloud::new(rev)).unwrap();
        assert_eq!(base.mu, enc_rev.mu);
        assert_eq!(base.logvar, enc_rev.logvar);

        let mut rot = pc.points.clone();
        rot.rotate_left(11);
        let enc_rot = encode(&model, &PointCloud::new(rot)).unwrap();
        assert_eq!(base.mu, enc_rot.mu);
        assert_eq!(base.logvar, enc_rot.logvar);
    }

    #[test]
    fn encode_zero_weights_gives_zero_code() {
        let mut model = small_model(4);
        for l in model.layers_mut() {
            l.w.iter_mut().for_each(|v| *v = 0.0);
            l.b.iter_mut().for_each(|v| *v = 0.0);
        }
        let mut rng = rng_from_seed(1);
        let pc = sample_ball(5, &mut rng).unwrap();
        let code = encode(&model, &pc).unwrap();
        assert_eq!(code.mu, vec![0.0; 4]);
        assert_eq!(code.logvar, vec![0.0; 4]);
        assert_eq!(code.mu.len(), model.latent_dim);
    }

    #[test]
    fn encode_rejects_bad_input() {
        let model = small_model(5);
        assert!(matches!(encode(&model, &PointCloud::new(vec![])), Err(Error::EmptyCloud(_))));
        let pc = PointCloud::new(vec![[f64::INFINITY, 0.0, 0.0]]);
        assert!(matches!(encode(&model, &pc), Err(Error::NonFinite { .. })));
    }

    #[test]
    fn encode_plain_matches_tape_bitwise() {
        let model = small_model(6);
        let mut rng = rng_from_seed(2);
        let pc = sample_ball(17, &mut rng).unwrap();
        let plain = encode(&model, &pc).unwrap();
        let mut tape = Tape::new();
        let leaves = model.register_leaves(&mut tape);
        let (mu, logvar) = encode_on_tape(&model, &leaves, &mut tape, &pc).unwrap();
        assert_eq!(plain.mu, tape.value(mu).data());
        assert_eq!(plain.logvar, tape.value(logvar).data());
    }

    #[test]
    fn reparameterize_modes_and_moments() {
        let code = LatentCode { mu: vec![0.0, 0.0], logvar: vec![0.0, 0.0], z: vec![0.0, 0.0] };
        let mut rng = rng_from_seed(123);
        assert_eq!(reparameterize(&code, SampleMode::Deterministic, &mut rng), vec![0.0, 0.0]);

        let mut sum = [0.0f64; 2];
        let mut sum_sq = [0.0f64; 2];
        let draws = 100_000;
        for _ in 0..draws {
            let z = reparameterize(&code, SampleMode::Sample, &mut rng);
            for d in 0..2 {
                sum[d] += z[d];
                sum_sq[d] += z[d] * z[d];
            }
        }
        for d in 0..2 {
            let mean = sum[d] / draws as f64;
            let var = sum_sq[d] / draws as f64 - mean * mean;
            assert!(mean.abs() < 0.02, "mean {}", mean);
            assert!((var - 1.0).abs() < 0.05, "var {}", var);
        }
    }

    #[test]
    fn reparameterize_clamps_extreme_logvar() {
        let code = LatentCode { mu: vec![1.0], logvar: vec![-1e9], z: vec![1.0] };
        let mut rng = rng_from_seed(0);
        let z = reparameterize(&code, SampleMode::Sample, &mut rng);
        assert!(z[0].is_finite());
        // std collapses to exp(-10), so z is essentially mu.
        assert!((z[0] - 1.0).abs() < 1e-3);
        let code = LatentCode { mu: vec![0.0], logvar: vec![1e9], z: vec![0.0] };
        let z = reparameterize(&code, SampleMode::Sample, &mut rng);
        assert!(z[0].is_finite());
    }

    #[test]
    fn kld_values() {
        assert_eq!(kld(&[0.0, 0.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!((kld(&[1.0, 0.0, 0.0], &[0.0, 0.0, 0.0]).unwrap() - 0.5).abs() < 1e-15);
        let four = 4.0f64;
        let expect = 0.5 * (4.0 - 1.0 - four.ln());
        assert!((kld(&[0.0], &[four.ln()]).unwrap() - expect).abs() < 1e-12);
        assert!((expect - 0.80685).abs() < 1e-5);
        assert!(kld(&[0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn hyper_decode_shape_and_determinism() {
        let config = TrainConfig::new(LossKind::Chamfer, 0.0, 1, 0);
        let mut rng = rng_from_seed(8);
        let model = HyperModel::init(&config, &mut rng).unwrap();
        let z = vec![0.1; model.latent_dim];
        let w1 = hyper_decode(&model, &z).unwrap();
        let w2 = hyper_decode(&model, &z).unwrap();
        assert_eq!(w1.theta.len(), 19_011);
        assert_eq!(w1, w2);
        assert!(hyper_decode(&model, &vec![0.0; 3]).is_err());
    }

    #[test]
    fn hyper_decode_zero_weights_gives_zero_theta() {
        let mut model = small_model(9);
        for l in model.decoder.iter_mut() {
            l.w.iter_mut().for_each(|v| *v = 0.0);
            l.b.iter_mut().for_each(|v| *v = 0.0);
        }
        let theta = hyper_decode(&model, &vec![0.3; 4]).unwrap();
        assert!(theta.theta.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn target_forward_zero_and_bias_cases() {
        let arch = TargetArch::new(vec![3, 4, 3]).unwrap();
        let zero = TargetWeights::new(&arch, vec![0.0; arch.param_count()]).unwrap();
        let mut rng = rng_from_seed(3);
        let pts = sample_ball(10, &mut rng).unwrap();
        let out = target_forward(&arch, &zero, &pts).unwrap();
        assert!(out.iter().all(|p| *p == [0.0, 0.0, 0.0]));

        // Final bias only: every output is that bias.
        let mut theta = vec![0.0; arch.param_count()];
        let len = theta.len();
        theta[len - 3..].copy_from_slice(&[1.0, 2.0, 3.0]);
        let biased = TargetWeights::new(&arch, theta).unwrap();
        let out = target_forward(&arch, &biased, &pts).unwrap();
        assert!(out.iter().all(|p| *p == [1.0, 2.0, 3.0]));
    }

    #[test]
    fn target_forward_is_pointwise_and_size_free() {
        let model = small_model(11);
        let theta = hyper_decode(&model, &vec![0.2, -0.1, 0.4, 0.0]).unwrap();
        let mut rng = rng_from_seed(4);
        let big = sample_ball(500, &mut rng).unwrap();
        let small = PointCloud::new(big.points[..100].to_vec());
        let out_big = target_forward(&model.target_arch, &theta, &big).unwrap();
        let out_small = target_forward(&model.target_arch, &theta, &small).unwrap();
        assert_eq!(out_big.points[..100], out_small.points[..]);

        // Concatenated inputs equal concatenated per-part outputs.
        let part_a = PointCloud::new(big.points[..200].to_vec());
        let part_b = PointCloud::new(big.points[200..].to_vec());
        let out_a = target_forward(&model.target_arch, &theta, &part_a).unwrap();
        let out_b = target_forward(&model.target_arch, &theta, &part_b).unwrap();
        let mut joined = out_a.points.clone();
        joined.extend_from_slice(&out_b.points);
        assert_eq!(out_big.points, joined);
    }

    #[test]
    fn target_forward_rejects_bad_theta_len() {
        let arch = TargetArch::default();
        assert!(TargetWeights::new(&arch, vec![0.0; 5]).is_err());
    }

    #[test]
    fn target_forward_plain_matches_tape_bitwise() {
        let model = small_model(13);
        let z = vec![0.5, -0.2, 0.1, 0.3];
        let theta = hyper_decode(&model, &z).unwrap();
        let mut rng = rng_from_seed(5);
        let pts = sample_ball(23, &mut rng).unwrap();
        let plain = target_forward(&model.target_arch, &theta, &pts).unwrap();

        let mut tape = Tape::new();
        let theta_node = tape.leaf(Tensor::new(vec![theta.theta.len()], theta.theta.clone()).unwrap());
        let out = target_forward_on_tape(&mut tape, &model.target_arch, theta_node, &pts).unwrap();
        assert_eq!(plain.flat(), tape.value(out).data());
    }

    #[test]
    fn loss_composition_over_lambda() {
        let model = small_model(17);
        let mut rng = rng_from_seed(6);
        let pc = sample_ball(12, &mut rng).unwrap();
        let prior = sample_ball(12, &mut rng).unwrap();
        let eps = vec![0.3, -0.5, 0.1, 0.9];

        let l0 = loss_forward(&model, &pc, &prior, Some(&eps), LossKind::Chamfer, 0.0).unwrap();
        assert_eq!(l0.total, l0.err);
        let l1 = loss_forward(&model, &pc, &prior, Some(&eps), LossKind::Chamfer, 1.0).unwrap();
        assert_eq!(l1.total, l1.err + l1.kl);
        assert_eq!(l0.err, l1.err);
    }

    #[test]
    fn loss_deterministic_per_seed() {
        let model = small_model(19);
        let mut rng = rng_from_seed(7);
        let pc = sample_ball(10, &mut rng).unwrap();
        let config = small_config();
        let a = loss(&model, &pc, &config, &mut rng_from_seed(42)).unwrap();
        let b = loss(&model, &pc, &config, &mut rng_from_seed(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn emd_loss_requires_matching_sizes() {
        let model = small_model(23);
        let mut rng = rng_from_seed(8);
        let pc = sample_ball(6, &mut rng).unwrap();
        let prior = sample_ball(5, &mut rng).unwrap();
        let r = loss_forward(&model, &pc, &prior, None, LossKind::Emd, 0.0);
        assert!(matches!(r, Err(Error::SizeMismatch(_))));
    }

    #[test]
    fn config_validation() {
        let mut c = TrainConfig::new(LossKind::Emd, 0.1, 100, 0);
        c.prior_samples = Some(64);
        assert!(c.validate().is_err());
        let mut c = TrainConfig::new(LossKind::Chamfer, -0.1, 100, 0);
        assert!(c.validate().is_err());
        c.lambda = 0.0;
        c.steps = 0;
        assert!(c.validate().is_err());
    }

    #[test]
    fn config_json_missing_field_names_it() {
        let text = r#"{"loss": "cd", "lambda": 0.001, "steps": 100}"#;
        let err = serde_json::from_str::<TrainConfig>(text).unwrap_err().to_string();
        assert!(err.contains("seed"), "{}", err);
    }

    #[test]
    fn clamp_tape_matches_plain() {
        let vals = vec![-25.0, -20.0, -3.0, 0.0, 7.5, 20.0, 31.0];
        let mut tape = Tape::new();
        let x = tape.leaf(Tensor::new(vec![1, vals.len()], vals.clone()).unwrap());
        let y = clamp_tape(&mut tape, x, LOGVAR_CLAMP).unwrap();
        let got = tape.value(y).data().to_vec();
        let expect: Vec<f64> = vals.iter().map(|&v| clamp_logvar(v)).collect();
        assert_eq!(got, expect);
    }
}
