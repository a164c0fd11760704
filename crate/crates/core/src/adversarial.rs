//! Identity classifier heads, the cross-view verification regularizer, the
//! combined objective and its parameter updates.
//!
//! For a batch of `B` identity pairs the objective is
//!
//! ```text
//! E = L_V + L_C + λ·L_R
//! L_V = mean_i ½(ELBO(X_p)/T_p + ELBO(X_g)/T_g)
//! L_C = mean_i CE(G_y(z_p), i) + CE(G_d(z_g), i)
//! L_R = −mean_i CE(G_d(z_p), i) + CE(G_y(z_g), i)
//! ```
//!
//! Training descends `L_V + L_C` and moves every parameter along `+λ∂L_R`
//! (heads directly, the encoder through a [`GradientReversal`] node), so
//! both heads learn to recognise an identity from either view.

use std::fmt;
use std::str::FromStr;

use crate::data::SequencePair;
use crate::error::{check_dim, Error, Result};
use crate::model::Model;
use crate::numerics::{
    axpy, softmax_cross_entropy, softmax_cross_entropy_grad, Mlp, ParamStore, Rng, Tensor,
};
use crate::vrnn::{ElboWeights, Sampling, SequenceEmbedding, StepTrace};

pub const HEAD_Y_GROUP: &str = "head_y";
pub const HEAD_D_GROUP: &str = "head_d";

/// Which view a classifier head is trained on.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HeadRole {
    /// `G_y`, trained on probe embeddings.
    Probe,
    /// `G_d`, trained on gallery embeddings.
    Gallery,
}

impl HeadRole {
    pub fn group(self) -> &'static str {
        match self {
            HeadRole::Probe => HEAD_Y_GROUP,
            HeadRole::Gallery => HEAD_D_GROUP,
        }
    }
}

/// Two-layer MLP from the latent space to one logit per identity.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierHead {
    role: HeadRole,
    pub mlp: Mlp,
}

impl ClassifierHead {
    /// `dims` is `(latent, hidden, classes)`.
    pub fn new(
        store: &mut ParamStore,
        role: HeadRole,
        dims: (usize, usize, usize),
        rng: &mut Rng,
    ) -> Self {
        let mlp = Mlp::new(store, role.group(), role.group(), dims, rng);
        Self { role, mlp }
    }

    pub fn role(&self) -> HeadRole {
        self.role
    }

    pub fn num_classes(&self) -> usize {
        self.mlp.output_dim()
    }

    pub fn logits(&self, store: &ParamStore, z: &[f64]) -> Result<Vec<f64>> {
        Ok(self.mlp.forward(store, z)?.0)
    }
}

/// Raw logits of `head` for an embedding.
pub fn classify(
    store: &ParamStore,
    emb: &SequenceEmbedding,
    head: &ClassifierHead,
) -> Result<Vec<f64>> {
    head.logits(store, &emb.vector)
}

/// `(L_y, L_d)`: each head on the embedding of its own view.
pub fn classification_losses(
    model: &Model,
    probe: &SequenceEmbedding,
    gallery: &SequenceEmbedding,
    label: usize,
) -> Result<(f64, f64)> {
    let ly = softmax_cross_entropy(&classify(&model.store, probe, &model.head_y)?, label)?;
    let ld = softmax_cross_entropy(&classify(&model.store, gallery, &model.head_d)?, label)?;
    Ok((ly, ld))
}

/// Cross-applied losses: the gallery head on the probe embedding plus the
/// probe head on the gallery embedding.
pub fn verification_regularizer(
    model: &Model,
    probe: &SequenceEmbedding,
    gallery: &SequenceEmbedding,
    label: usize,
) -> Result<f64> {
    let a = softmax_cross_entropy(&classify(&model.store, probe, &model.head_d)?, label)?;
    let b = softmax_cross_entropy(&classify(&model.store, gallery, &model.head_y)?, label)?;
    Ok(a + b)
}

/// Identity on the forward pass; scales gradients by `−λ` on the way back.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradientReversal {
    lambda: f64,
}

impl GradientReversal {
    pub fn new(lambda: f64) -> Result<Self> {
        if !(lambda >= 0.0) || !lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda must be finite and >= 0, got {lambda}"
            )));
        }
        Ok(Self { lambda })
    }

    pub fn lambda(&self) -> f64 {
        self.lambda
    }

    pub fn forward(&self, x: &[f64]) -> Vec<f64> {
        x.to_vec()
    }

    pub fn backward(&self, upstream: &[f64]) -> Vec<f64> {
        upstream.iter().map(|g| -self.lambda * g).collect()
    }
}

/// Forward pass through a reversal node.
pub fn gradient_reversal(x: &[f64], lambda: f64) -> Result<(Vec<f64>, GradientReversal)> {
    let node = GradientReversal::new(lambda)?;
    Ok((node.forward(x), node))
}

/// Where the cross-applied losses are evaluated.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Fusion {
    /// Posterior mean at every step, averaged over steps.
    #[default]
    Early,
    /// Posterior mean at the last step only.
    Late,
}

impl Fusion {
    fn steps(self, len: usize) -> std::ops::Range<usize> {
        match self {
            Fusion::Early => 0..len,
            Fusion::Late => len - 1..len,
        }
    }
}

impl FromStr for Fusion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "early" => Ok(Fusion::Early),
            "late" => Ok(Fusion::Late),
            other => Err(Error::InvalidConfig(format!(
                "unknown fusion mode {other:?}"
            ))),
        }
    }
}

impl fmt::Display for Fusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Fusion::Early => "early",
            Fusion::Late => "late",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum OptimizerKind {
    #[default]
    Adam,
    Sgd,
}

impl FromStr for OptimizerKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "adam" => Ok(OptimizerKind::Adam),
            "sgd" => Ok(OptimizerKind::Sgd),
            other => Err(Error::InvalidConfig(format!("unknown optimizer {other:?}"))),
        }
    }
}

impl fmt::Display for OptimizerKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            OptimizerKind::Adam => "adam",
            OptimizerKind::Sgd => "sgd",
        })
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdversarialConfig {
    pub lambda: f64,
    pub fusion: Fusion,
    pub learning_rate: f64,
    pub optimizer: OptimizerKind,
}

impl Default for AdversarialConfig {
    fn default() -> Self {
        Self {
            lambda: 0.6,
            fusion: Fusion::Early,
            learning_rate: 1e-3,
            optimizer: OptimizerKind::Adam,
        }
    }
}

impl AdversarialConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0) || !self.lambda.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.learning_rate > 0.0) || !self.learning_rate.is_finite() {
            return Err(Error::InvalidConfig(format!(
                "learning rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        Ok(())
    }
}

/// Batch-averaged loss terms.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossBreakdown {
    pub l_v: f64,
    pub l_y: f64,
    pub l_d: f64,
    pub l_c: f64,
    pub l_r: f64,
    pub total: f64,
}

/// Scales of the three terms in a backward pass.
///
/// With `reverse` set, the verification term contributes `−verification ·
/// ∂L_R` to every parameter, the encoder receiving it through a reversal
/// node; otherwise it contributes `+verification · ∂L_R`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct BackwardSpec {
    pub vrnn: f64,
    pub classification: f64,
    pub verification: f64,
    pub reverse: bool,
}

impl BackwardSpec {
    /// The update direction used for training.
    pub fn training(lambda: f64) -> Self {
        Self {
            vrnn: 1.0,
            classification: 1.0,
            verification: lambda,
            reverse: true,
        }
    }

    /// Plain gradient of `E`.
    pub fn exact(lambda: f64) -> Self {
        Self {
            reverse: false,
            ..Self::training(lambda)
        }
    }

    pub fn vrnn_only() -> Self {
        Self {
            vrnn: 1.0,
            classification: 0.0,
            verification: 0.0,
            reverse: false,
        }
    }

    pub fn classification_only() -> Self {
        Self {
            vrnn: 0.0,
            classification: 1.0,
            verification: 0.0,
            reverse: false,
        }
    }

    pub fn verification_only() -> Self {
        Self {
            vrnn: 0.0,
            classification: 0.0,
            verification: 1.0,
            reverse: false,
        }
    }
}

struct PairForward {
    probe: StepTrace,
    gallery: StepTrace,
}

fn mean_at(trace: &StepTrace, t: usize) -> &[f64] {
    trace.steps[t].posterior.mean()
}

fn last_mean(trace: &StepTrace) -> &[f64] {
    trace.final_posterior().mean()
}

fn forward_batch(
    model: &Model,
    batch: &[SequencePair],
    config: &AdversarialConfig,
    rng: &mut Rng,
) -> Result<(LossBreakdown, Vec<PairForward>)> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    config.validate()?;
    let classes = model.config().num_classes;
    let store = &model.store;
    let mut sums = LossBreakdown::default();
    let mut cross_sum = 0.0;
    let mut forwards = Vec::with_capacity(batch.len());
    for pair in batch {
        if pair.label >= classes {
            return Err(Error::LabelOutOfRange {
                label: pair.label,
                classes,
            });
        }
        let probe = model
            .vrnn
            .run(store, &pair.probe.frames, Sampling::Reparameterized(rng))?;
        let gallery =
            model
                .vrnn
                .run(store, &pair.gallery.frames, Sampling::Reparameterized(rng))?;
        sums.l_v +=
            0.5 * (probe.loss() / probe.len() as f64 + gallery.loss() / gallery.len() as f64);
        sums.l_y +=
            softmax_cross_entropy(&model.head_y.logits(store, last_mean(&probe))?, pair.label)?;
        sums.l_d += softmax_cross_entropy(
            &model.head_d.logits(store, last_mean(&gallery))?,
            pair.label,
        )?;
        for (head, trace) in [(&model.head_d, &probe), (&model.head_y, &gallery)] {
            let steps = config.fusion.steps(trace.len());
            let n = steps.len() as f64;
            for t in steps {
                cross_sum +=
                    softmax_cross_entropy(&head.logits(store, mean_at(trace, t))?, pair.label)? / n;
            }
        }
        forwards.push(PairForward { probe, gallery });
    }
    let b = batch.len() as f64;
    let l_v = sums.l_v / b;
    let l_y = sums.l_y / b;
    let l_d = sums.l_d / b;
    let l_c = l_y + l_d;
    let l_r = -cross_sum / b;
    Ok((
        LossBreakdown {
            l_v,
            l_y,
            l_d,
            l_c,
            l_r,
            total: l_v + l_c + config.lambda * l_r,
        },
        forwards,
    ))
}

/// Evaluates the objective on a batch without touching gradients.
pub fn total_objective(
    model: &Model,
    batch: &[SequencePair],
    config: &AdversarialConfig,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    Ok(forward_batch(model, batch, config, rng)?.0)
}

/// Evaluates the objective and accumulates the gradients described by
/// `spec` into `model.store`. Existing gradients are not cleared.
pub fn objective_backward(
    model: &mut Model,
    batch: &[SequencePair],
    config: &AdversarialConfig,
    spec: BackwardSpec,
    rng: &mut Rng,
) -> Result<LossBreakdown> {
    let (losses, forwards) = forward_batch(model, batch, config, rng)?;
    let b = batch.len() as f64;
    let latent = model.config().vrnn.latent_dim;
    let grl = GradientReversal::new(spec.verification.abs())?;
    for (pair, fwd) in batch.iter().zip(&forwards) {
        let mut d_probe = vec![vec![0.0; latent]; fwd.probe.len()];
        let mut d_gallery = vec![vec![0.0; latent]; fwd.gallery.len()];

        if spec.classification != 0.0 {
            for (head, trace, d_post) in [
                (&model.head_y, &fwd.probe, &mut d_probe),
                (&model.head_d, &fwd.gallery, &mut d_gallery),
            ] {
                let (logits, cache) = head.mlp.forward(&model.store, last_mean(trace))?;
                let d_logits: Vec<f64> = softmax_cross_entropy_grad(&logits, pair.label)
                    .into_iter()
                    .map(|g| g * spec.classification / b)
                    .collect();
                let d_in = head.mlp.backward(&mut model.store, &cache, &d_logits, 1.0);
                axpy(d_post.last_mut().expect("non-empty"), &d_in, 1.0);
            }
        }

        if spec.verification != 0.0 {
            let head_scale = if spec.reverse {
                spec.verification
            } else {
                -spec.verification
            };
            for (head, trace, d_post) in [
                (&model.head_d, &fwd.probe, &mut d_probe),
                (&model.head_y, &fwd.gallery, &mut d_gallery),
            ] {
                let steps = config.fusion.steps(trace.len());
                let n = steps.len() as f64;
                for t in steps {
                    let (logits, cache) = head.mlp.forward(&model.store, mean_at(trace, t))?;
                    // ∂(cross-applied CE)/∂logits; ∂L_R is its negation
                    let d_logits: Vec<f64> = softmax_cross_entropy_grad(&logits, pair.label)
                        .into_iter()
                        .map(|g| g / (b * n))
                        .collect();
                    let d_in = head
                        .mlp
                        .backward(&mut model.store, &cache, &d_logits, head_scale);
                    let d_lr: Vec<f64> = d_in.iter().map(|g| -g).collect();
                    let d_enc = if spec.reverse {
                        grl.backward(&d_lr)
                    } else {
                        d_lr.iter().map(|g| spec.verification * g).collect()
                    };
                    axpy(&mut d_post[t], &d_enc, 1.0);
                }
            }
        }

        for (seq, trace, d_post) in [
            (&pair.probe, &fwd.probe, &d_probe),
            (&pair.gallery, &fwd.gallery, &d_gallery),
        ] {
            let w = spec.vrnn * 0.5 / (b * trace.len() as f64);
            model.vrnn.backward(
                &mut model.store,
                &seq.frames,
                trace,
                ElboWeights::uniform(w),
                d_post,
            )?;
        }
    }
    Ok(losses)
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

/// SGD or Adam over every tensor of a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Optimizer {
    kind: OptimizerKind,
    learning_rate: f64,
    step: u64,
    first: Vec<Tensor>,
    second: Vec<Tensor>,
}

impl Optimizer {
    pub fn new(kind: OptimizerKind, learning_rate: f64, store: &ParamStore) -> Self {
        let zeros = || {
            store
                .ids()
                .map(|id| Tensor::zeros(store.value(id).shape()))
                .collect()
        };
        Self {
            kind,
            learning_rate,
            step: 0,
            first: zeros(),
            second: zeros(),
        }
    }

    /// Rebuilds an optimizer from saved moments.
    pub fn from_parts(
        kind: OptimizerKind,
        learning_rate: f64,
        step: u64,
        first: Vec<Tensor>,
        second: Vec<Tensor>,
    ) -> Result<Self> {
        check_dim("optimizer moments", first.len(), second.len())?;
        Ok(Self {
            kind,
            learning_rate,
            step,
            first,
            second,
        })
    }

    pub fn kind(&self) -> OptimizerKind {
        self.kind
    }

    pub fn learning_rate(&self) -> f64 {
        self.learning_rate
    }

    pub fn step(&self) -> u64 {
        self.step
    }

    pub fn first_moments(&self) -> &[Tensor] {
        &self.first
    }

    pub fn second_moments(&self) -> &[Tensor] {
        &self.second
    }

    /// Applies the gradients held in `store`. Nothing is modified when any
    /// gradient is non-finite.
    pub fn update_step(&mut self, store: &mut ParamStore) -> Result<()> {
        check_dim("optimizer slots", self.first.len(), store.len())?;
        if let Some(id) = store.ids().find(|&id| !store.grad(id).is_finite()) {
            return Err(Error::NonFinite(format!("gradient of {}", store.name(id))));
        }
        self.step += 1;
        let lr = self.learning_rate;
        let ids: Vec<_> = store.ids().collect();
        match self.kind {
            OptimizerKind::Sgd => {
                for id in ids {
                    let g = store.grad(id).data().to_vec();
                    axpy(store.value_mut(id).data_mut(), &g, -lr);
                }
            }
            OptimizerKind::Adam => {
                let t = self.step as i32;
                let c1 = 1.0 - ADAM_BETA1.powi(t);
                let c2 = 1.0 - ADAM_BETA2.powi(t);
                for id in ids {
                    let k = id.index();
                    let g = store.grad(id).data().to_vec();
                    let m = self.first[k].data_mut();
                    let v = self.second[k].data_mut();
                    let value = store.value_mut(id).data_mut();
                    for i in 0..g.len() {
                        m[i] = ADAM_BETA1 * m[i] + (1.0 - ADAM_BETA1) * g[i];
                        v[i] = ADAM_BETA2 * v[i] + (1.0 - ADAM_BETA2) * g[i] * g[i];
                        let m_hat = m[i] / c1;
                        let v_hat = v[i] / c2;
                        value[i] -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
                    }
                }
            }
        }
        Ok(())
    }
}
