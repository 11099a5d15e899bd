//! Learned sequential attack controller.
//!
//! The adversary looks at the current image through a frozen feature
//! encoder, updates a recurrent state, and emits one logit per attack
//! primitive. A straight-through Gumbel-Softmax turns the logits into a
//! selection that is one-hot on the forward pass but differentiable like the
//! relaxed softmax on the backward pass, so the controller can be trained
//! end to end through the attacked image.
//!
//! Two details carry the correctness burden here:
//!
//! * The straight-through composition is built as
//!   `onehot.detach() + (soft - soft.detach())`. The parenthesized term is
//!   exactly zero in floating point (`a - a = 0`), so the forward mixture
//!   collapses bit for bit onto the hard-selected primitive's output while
//!   the backward graph sees the softmax relaxation.
//! * The entropy bonus is recomputed through a parallel controller pass on
//!   detached images. The values are bit-identical to the live logits (same
//!   weights, same input bytes), but the gradient of the bonus reaches only
//!   the controller, never the watermark model upstream of the attack.

use candle_core::{DType, Device, Tensor};
use rand_chacha::ChaCha12Rng;

use crate::attacks::{self, AttackParams, NUM_PRIMITIVES};
use crate::nn::{self, GruCell, LinearLayer, ParamStore};
use crate::rng;
use crate::Result;

/// Number of selectable primitives (identity included).
pub const K: usize = NUM_PRIMITIVES;

/// Feature dimension produced by the frozen backbones.
const BACKBONE_DIM: usize = 128;

/// Width of the projection bottleneck and the attack-head hidden layer.
const PROJ_WIDTH: usize = 96;
const HEAD_WIDTH: usize = 64;

/// Controller hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct AdversaryConfig {
    /// Attack depth T: how many primitives are chained per rollout.
    pub depth: usize,
    /// Gumbel-Softmax temperature.
    pub tau: f64,
    /// Temperature of the softmax inside the entropy bonus.
    pub tau_ent: f64,
    /// Entropy bonus coefficient.
    pub lambda_ent: f64,
    /// Hidden and feature dimension of the controller.
    pub d_h: usize,
}

impl Default for AdversaryConfig {
    fn default() -> Self {
        Self { depth: 2, tau: 1.0, tau_ent: 1.0, lambda_ent: 0.1, d_h: 384 }
    }
}

impl AdversaryConfig {
    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if !(self.depth == 1 || self.depth == 2) {
            issues.push(format!("depth must be 1 or 2, got {}", self.depth));
        }
        if self.tau <= 0.0 {
            issues.push(format!("tau must be positive, got {}", self.tau));
        }
        if self.tau_ent <= 0.0 {
            issues.push(format!("tau_ent must be positive, got {}", self.tau_ent));
        }
        if self.lambda_ent < 0.0 {
            issues.push(format!("lambda_ent must be nonnegative, got {}", self.lambda_ent));
        }
        if self.d_h == 0 {
            issues.push("d_h must be positive".into());
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(crate::Error::ValidationError { issues })
        }
    }
}

/// Frozen feature encoder. Implementations hold plain tensors, not trainable
/// variables: gradients flow through them to the image but the weights can
/// never receive an update.
pub trait FeatureBackbone: Send {
    /// `(B, 3, H, W) -> (B, feat_dim)`.
    fn forward(&self, x: &Tensor) -> Result<Tensor>;
    fn feat_dim(&self) -> usize;
    /// Digest of all weights; must be invariant across training.
    fn checksum(&self) -> Result<String>;
}

/// Which frozen encoder to instantiate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BackboneKind {
    TinyConv,
    ResNetStyle,
}

impl BackboneKind {
    pub fn build(self, seed: u64, device: &Device) -> Result<Box<dyn FeatureBackbone>> {
        Ok(match self {
            BackboneKind::TinyConv => Box::new(TinyConvBackbone::new(seed, device)?),
            BackboneKind::ResNetStyle => Box::new(ResNetStyleBackbone::new(seed, device)?),
        })
    }
}

fn frozen_conv(
    rng: &mut ChaCha12Rng,
    in_c: usize,
    out_c: usize,
    device: &Device,
) -> Result<Tensor> {
    let std = (2.0 / (in_c * 9) as f64).sqrt();
    nn::normal_init(rng, &[out_c, in_c, 3, 3], std, device)
}

fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    let (b, c, _h, _w) = x.dims4()?;
    Ok(x.reshape((b, c, ()))?.mean(2)?)
}

fn checksum_tensors(named: &[(&str, &Tensor)]) -> Result<String> {
    use sha2::{Digest, Sha256};
    let mut hasher = Sha256::new();
    for (name, t) in named {
        hasher.update(name.as_bytes());
        hasher.update([0u8]);
        let flat: Vec<f32> = t.flatten_all()?.to_vec1()?;
        for v in flat {
            hasher.update(v.to_le_bytes());
        }
    }
    Ok(hasher.finalize().iter().map(|b| format!("{b:02x}")).collect())
}

/// Three strided convolutions and a global average pool.
pub struct TinyConvBackbone {
    w1: Tensor,
    w2: Tensor,
    w3: Tensor,
}

impl TinyConvBackbone {
    pub fn new(seed: u64, device: &Device) -> Result<Self> {
        let mut r = rng::stream(seed, "backbone-tiny", 0);
        Ok(Self {
            w1: frozen_conv(&mut r, 3, 32, device)?,
            w2: frozen_conv(&mut r, 32, 64, device)?,
            w3: frozen_conv(&mut r, 64, BACKBONE_DIM, device)?,
        })
    }
}

impl FeatureBackbone for TinyConvBackbone {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = x.conv2d(&self.w1, 1, 2, 1, 1)?.relu()?;
        let h = h.conv2d(&self.w2, 1, 2, 1, 1)?.relu()?;
        let h = h.conv2d(&self.w3, 1, 2, 1, 1)?.relu()?;
        global_avg_pool(&h)
    }

    fn feat_dim(&self) -> usize {
        BACKBONE_DIM
    }

    fn checksum(&self) -> Result<String> {
        checksum_tensors(&[("w1", &self.w1), ("w2", &self.w2), ("w3", &self.w3)])
    }
}

/// Strided stem plus two residual stages; the ablation alternative.
pub struct ResNetStyleBackbone {
    stem: Tensor,
    res1a: Tensor,
    res1b: Tensor,
    down: Tensor,
    res2a: Tensor,
    res2b: Tensor,
    out: Tensor,
}

impl ResNetStyleBackbone {
    pub fn new(seed: u64, device: &Device) -> Result<Self> {
        let mut r = rng::stream(seed, "backbone-res", 0);
        Ok(Self {
            stem: frozen_conv(&mut r, 3, 32, device)?,
            res1a: frozen_conv(&mut r, 32, 32, device)?,
            res1b: frozen_conv(&mut r, 32, 32, device)?,
            down: frozen_conv(&mut r, 32, 64, device)?,
            res2a: frozen_conv(&mut r, 64, 64, device)?,
            res2b: frozen_conv(&mut r, 64, 64, device)?,
            out: frozen_conv(&mut r, 64, BACKBONE_DIM, device)?,
        })
    }
}

impl FeatureBackbone for ResNetStyleBackbone {
    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = x.conv2d(&self.stem, 1, 2, 1, 1)?.relu()?;
        let r = h.conv2d(&self.res1a, 1, 1, 1, 1)?.relu()?.conv2d(&self.res1b, 1, 1, 1, 1)?;
        let h = ((h + r)? * 0.5)?.relu()?;
        let h = h.conv2d(&self.down, 1, 2, 1, 1)?.relu()?;
        let r = h.conv2d(&self.res2a, 1, 1, 1, 1)?.relu()?.conv2d(&self.res2b, 1, 1, 1, 1)?;
        let h = ((h + r)? * 0.5)?.relu()?;
        let h = h.conv2d(&self.out, 1, 2, 1, 1)?.relu()?;
        global_avg_pool(&h)
    }

    fn feat_dim(&self) -> usize {
        BACKBONE_DIM
    }

    fn checksum(&self) -> Result<String> {
        checksum_tensors(&[
            ("stem", &self.stem),
            ("res1a", &self.res1a),
            ("res1b", &self.res1b),
            ("down", &self.down),
            ("res2a", &self.res2a),
            ("res2b", &self.res2b),
            ("out", &self.out),
        ])
    }
}

/// Trainable part of the adversary: feature projection, recurrence, and the
/// attack-logit head.
pub struct Controller {
    proj1: LinearLayer,
    proj2: LinearLayer,
    gru: GruCell,
    head1: LinearLayer,
    head2: LinearLayer,
    d_h: usize,
}

impl Controller {
    pub fn new(
        store: &mut ParamStore,
        feat_dim: usize,
        d_h: usize,
        rng: &mut ChaCha12Rng,
    ) -> Result<Self> {
        Ok(Self {
            proj1: LinearLayer::new(store, "adversary.proj1", feat_dim, PROJ_WIDTH, rng)?,
            proj2: LinearLayer::new(store, "adversary.proj2", PROJ_WIDTH, d_h, rng)?,
            gru: GruCell::new(store, "adversary.gru", d_h, d_h, rng)?,
            head1: LinearLayer::new(store, "adversary.head1", d_h, HEAD_WIDTH, rng)?,
            head2: LinearLayer::new(store, "adversary.head2", HEAD_WIDTH, K, rng)?,
            d_h,
        })
    }

    /// Projects backbone features into the controller space.
    pub fn project(&self, features: &Tensor) -> Result<Tensor> {
        self.proj2.forward(&self.proj1.forward(features)?.relu()?)
    }

    /// One recurrent update followed by the attack head.
    /// `(z: (B, d_h), h_prev: (B, d_h)) -> (h, logits (B, K))`.
    pub fn step(&self, z: &Tensor, h_prev: &Tensor) -> Result<(Tensor, Tensor)> {
        let h = self.gru.forward(z, h_prev)?;
        let logits = self.head2.forward(&self.head1.forward(&h)?.relu()?)?;
        Ok((h, logits))
    }

    /// Fresh zero state for a batch.
    pub fn initial_state(&self, batch: usize, device: &Device) -> Result<Tensor> {
        Ok(Tensor::zeros((batch, self.d_h), DType::F32, device)?)
    }
}

/// Straight-through Gumbel-Softmax selection.
///
/// Returns the selection weights (forward-exact one-hot, backward softmax
/// relaxation) and the hard indices per batch element. Gumbel noise is drawn
/// i.i.d. per element, batch-major; ties resolve to the lowest index.
pub fn gumbel_select(
    logits: &Tensor,
    tau: f64,
    rng: &mut ChaCha12Rng,
) -> Result<(Tensor, Vec<usize>)> {
    let (b, k) = logits.dims2()?;
    let dev = logits.device();
    let noise: Vec<f32> = (0..b * k).map(|_| rng::gumbel(rng) as f32).collect();
    let noise = Tensor::from_vec(noise, (b, k), dev)?;

    let perturbed = ((logits + &noise)? / tau)?;
    let soft = softmax_rows(&perturbed)?;

    let rows: Vec<Vec<f32>> = perturbed.to_vec2()?;
    let hard: Vec<usize> = rows.iter().map(|row| argmax_lowest(row)).collect();

    let mut onehot = vec![0f32; b * k];
    for (i, &a) in hard.iter().enumerate() {
        onehot[i * k + a] = 1.0;
    }
    let onehot = Tensor::from_vec(onehot, (b, k), dev)?;

    // Forward: onehot + (soft - soft) = onehot, exactly. Backward: the
    // detached terms drop out, leaving the softmax Jacobian.
    let st = (onehot + (&soft - soft.detach())?)?;
    Ok((st, hard))
}

fn argmax_lowest(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = i;
        }
    }
    best
}

/// Row-wise stable softmax.
fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(1)?;
    let e = x.broadcast_sub(&m)?.exp()?;
    let s = e.sum_keepdim(1)?;
    Ok(e.broadcast_div(&s)?)
}

/// Row-wise log-softmax, kept separate so entropy can reuse exact logs.
fn log_softmax_rows(x: &Tensor) -> Result<Tensor> {
    let m = x.max_keepdim(1)?;
    let shifted = x.broadcast_sub(&m)?;
    let lse = shifted.exp()?.sum_keepdim(1)?.log()?;
    Ok(shifted.broadcast_sub(&lse)?)
}

/// Per-element policy entropy in nats: `H = -sum_i p_i log p_i` with
/// `p = softmax(logits / tau_ent)`. Shape `(B, K) -> (B,)`.
pub fn policy_entropy(logits: &Tensor, tau_ent: f64) -> Result<Tensor> {
    let scaled = (logits / tau_ent)?;
    let log_p = log_softmax_rows(&scaled)?;
    let p = log_p.exp()?;
    Ok((p * log_p)?.sum(1)?.neg()?)
}

/// Mixes the outputs of all primitives with per-element weights:
/// `x_{t+1}[b] = sum_i pi[b, i] * f_i(x_t, params[i])[b]`.
///
/// With straight-through weights the sum collapses onto the hard-selected
/// primitive bit for bit: the losing terms are `0.0 * v = +0.0` and adding
/// `+0.0` to a nonnegative float is exact. That case is realized without
/// taping the losing primitives: only the winners run under gradient, and
/// the weights pick up the full mixture gradient from a zero-valued
/// relaxation term over detached primitive outputs. Values and gradients
/// (for both `x` and `pi`) are the same as the dense sum's; the losing
/// arms' backward passes, whose contributions the one-hot forward scales
/// to zero anyway, are skipped.
pub fn attack_step(x: &Tensor, pi: &Tensor, params: &[AttackParams]) -> Result<Tensor> {
    let (b, _c, _h, _w) = x.dims4()?;
    let (pb, pk) = pi.dims2()?;
    if pb != b || pk != params.len() {
        return Err(crate::Error::ShapeMismatch {
            expected: format!("({b}, {})", params.len()),
            got: format!("({pb}, {pk})"),
        });
    }
    if let Some(hard) = one_hot_rows(&pi.to_vec2()?) {
        let winners = attacks::apply_arms(x, &hard, params)?;
        let x_det = x.detach();
        let mut acc = winners;
        for (i, p) in params.iter().enumerate() {
            let f = attacks::apply_tensor(&x_det, p)?;
            let live = pi.narrow(1, i, 1)?;
            let w = (&live - live.detach())?.reshape((b, 1, 1, 1))?;
            acc = (acc + f.broadcast_mul(&w)?)?;
        }
        return Ok(acc);
    }
    let mut acc: Option<Tensor> = None;
    for (i, p) in params.iter().enumerate() {
        let y = attacks::apply_tensor(x, p)?;
        let w = pi.narrow(1, i, 1)?.reshape((b, 1, 1, 1))?;
        let term = y.broadcast_mul(&w)?;
        acc = Some(match acc {
            None => term,
            Some(a) => (a + term)?,
        });
    }
    Ok(acc.unwrap())
}

/// Hard indices if every row is exactly one-hot, `None` otherwise.
fn one_hot_rows(rows: &[Vec<f32>]) -> Option<Vec<usize>> {
    let mut hard = Vec::with_capacity(rows.len());
    for row in rows {
        let mut sel = None;
        for (i, &v) in row.iter().enumerate() {
            if v == 1.0 {
                if sel.is_some() {
                    return None;
                }
                sel = Some(i);
            } else if v != 0.0 {
                return None;
            }
        }
        hard.push(sel?);
    }
    Some(hard)
}

/// Everything recorded about one rollout step.
pub struct StepRecord {
    /// Live controller logits, `(B, K)` snapshot.
    pub logits: Vec<Vec<f32>>,
    /// Relaxed softmax probabilities underlying the selection.
    pub soft: Vec<Vec<f32>>,
    /// Hard-selected primitive index per batch element.
    pub hard: Vec<usize>,
    /// Sampled parameters, one per primitive, shared across the batch.
    pub params: Vec<AttackParams>,
    /// Batch-mean policy entropy of this step, nats.
    pub entropy: f64,
}

pub struct AdversaryTrajectory {
    pub steps: Vec<StepRecord>,
}

/// Result of a full adversary rollout.
pub struct RolloutOutput {
    /// Attacked image, differentiable w.r.t. the input and the controller.
    pub x_out: Tensor,
    /// `sum_t mean_b H_t` computed through the detached controller pass:
    /// its gradient reaches only controller parameters.
    pub entropy_sum: Tensor,
    pub trajectory: AdversaryTrajectory,
}

/// Frozen backbone plus trainable controller under one config.
pub struct Adversary {
    backbone: Box<dyn FeatureBackbone>,
    controller: Controller,
    pub config: AdversaryConfig,
    device: Device,
}

impl Adversary {
    /// Builds backbone and controller with seeded initialization,
    /// registering trainable parameters in `store`.
    pub fn new(
        config: AdversaryConfig,
        kind: BackboneKind,
        store: &mut ParamStore,
        seed: u64,
        device: &Device,
    ) -> Result<Self> {
        config.validate()?;
        let backbone = kind.build(seed, device)?;
        let mut r = rng::stream(seed, "adversary-init", 0);
        let controller = Controller::new(store, backbone.feat_dim(), config.d_h, &mut r)?;
        Ok(Self { backbone, controller, config, device: device.clone() })
    }

    pub fn backbone_checksum(&self) -> Result<String> {
        self.backbone.checksum()
    }

    /// Frozen-encoder features followed by the trainable projection.
    pub fn extract_features(&self, x: &Tensor) -> Result<Tensor> {
        self.controller.project(&self.backbone.forward(x)?)
    }

    /// See [`Controller::step`].
    pub fn step_controller(&self, z: &Tensor, h_prev: &Tensor) -> Result<(Tensor, Tensor)> {
        self.controller.step(z, h_prev)
    }

    /// Runs `depth` steps of look-select-attack, recording the trajectory.
    ///
    /// All randomness (attack parameters, then Gumbel noise, per step) is
    /// drawn from `rng`, so a rollout is a pure function of
    /// `(x0, weights, rng)`.
    pub fn rollout(&self, x0: &Tensor, rng: &mut ChaCha12Rng) -> Result<RolloutOutput> {
        let (b, _c, _h, _w) = x0.dims4()?;
        let mut x = x0.clone();
        let mut h = self.controller.initial_state(b, &self.device)?;
        let mut h_det = h.clone();
        let mut entropy_sum: Option<Tensor> = None;
        let mut steps = Vec::with_capacity(self.config.depth);

        for _t in 0..self.config.depth {
            // One backbone pass serves both chains: the detached projection
            // sees the same bytes, so logits agree bit for bit while the
            // entropy gradient stops at the image.
            let feats = self.backbone.forward(&x)?;
            let z = self.controller.project(&feats)?;
            let (h_next, logits) = self.controller.step(&z, &h)?;

            let z_det = self.controller.project(&feats.detach())?;
            let (h_det_next, logits_det) = self.controller.step(&z_det, &h_det)?;

            let params: Vec<AttackParams> = attacks::registry()
                .iter()
                .map(|p| attacks::sample_params(p.kind, rng))
                .collect();

            let (pi, hard) = gumbel_select(&logits, self.config.tau, rng)?;
            let x_next = attack_step(&x, &pi, &params)?;

            let ent = policy_entropy(&logits_det, self.config.tau_ent)?.mean(0)?;
            let ent_value: f32 = ent.to_scalar()?;
            entropy_sum = Some(match entropy_sum {
                None => ent,
                Some(acc) => (acc + ent)?,
            });

            steps.push(StepRecord {
                logits: logits.to_vec2()?,
                soft: pi_soft_snapshot(&logits, &pi)?,
                hard,
                params,
                entropy: ent_value as f64,
            });

            x = x_next;
            h = h_next;
            h_det = h_det_next;
        }

        Ok(RolloutOutput {
            x_out: x,
            entropy_sum: entropy_sum.unwrap(),
            trajectory: AdversaryTrajectory { steps },
        })
    }
}

/// The straight-through weights are one-hot in value; recover the relaxed
/// probabilities for the record by re-deriving them from the graph is not
/// possible after detachment, so snapshot the softmax of the logits
/// themselves (the pre-noise distribution, which is what gets reported).
fn pi_soft_snapshot(logits: &Tensor, _pi: &Tensor) -> Result<Vec<Vec<f32>>> {
    Ok(softmax_rows(logits)?.to_vec2()?)
}
