//! Variational recurrent network: a per-step VAE whose encoder, prior and
//! decoder are conditioned on the light-LSTM hidden state.
//!
//! At step `t`, with `h = h_{t-1}` the top-layer projection:
//!
//! ```text
//! q(z_t)   = N(φ_enc([φ_x(x_t), h]))
//! p(z_t)   = N(φ_prior(h))
//! p(x_t|z) = N(φ_dec([φ_z(z_t), h]))
//! state_t  = lstm([φ_x(x_t), φ_z(z_t)], state_{t-1})
//! ```
//!
//! Every Gaussian head emits `[mean, s]` with `std = softplus(s) + SIGMA_FLOOR`.

use crate::error::{check_dim, Error, Result};
use crate::numerics::{
    axpy, concat, gaussian_kl_diag, gaussian_kl_diag_grad, gaussian_nll, gaussian_nll_grad,
    reparameterize, sigmoid, softplus, GaussianParams, Mlp, MlpCache, ParamStore, Rng, SIGMA_FLOOR,
};
use crate::recurrent::{LightLstm, LightLstmConfig, RecurrentState, StateGrad, StepCache};

pub const ENCODER_GROUP: &str = "encoder";
pub const DECODER_GROUP: &str = "decoder";

/// Camera view a sequence was observed under.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum View {
    Probe,
    Gallery,
}

/// One identity's feature sequence under one view.
#[derive(Clone, Debug, PartialEq)]
pub struct FrameSequence {
    pub frames: Vec<Vec<f64>>,
    pub label: usize,
    pub view: View,
}

impl FrameSequence {
    pub fn new(frames: Vec<Vec<f64>>, label: usize, view: View) -> Result<Self> {
        let Some(first) = frames.first() else {
            return Err(Error::EmptySequence);
        };
        let dim = first.len();
        for f in &frames {
            check_dim("frame width", dim, f.len())?;
        }
        Ok(Self {
            frames,
            label,
            view,
        })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames.first().map_or(0, Vec::len)
    }

    /// The first `len` frames (or all of them when shorter).
    pub fn truncated(&self, len: usize) -> Self {
        Self {
            frames: self.frames[..len.min(self.frames.len()).max(1)].to_vec(),
            label: self.label,
            view: self.view,
        }
    }
}

/// Final latent representation of a sequence, used for matching.
#[derive(Clone, Debug, PartialEq)]
pub struct SequenceEmbedding {
    pub vector: Vec<f64>,
    pub view: View,
    pub label: usize,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EmbedMode {
    /// Posterior mean at the last step; deterministic.
    Mean,
    /// One reparameterized draw from the last-step posterior.
    Sample,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct VrnnConfig {
    pub frame_dim: usize,
    pub feat_dim: usize,
    pub hidden_dim: usize,
    pub cell_dim: usize,
    pub proj_dim: usize,
    pub latent_dim: usize,
    pub num_layers: usize,
}

impl Default for VrnnConfig {
    fn default() -> Self {
        Self {
            frame_dim: 32,
            feat_dim: 32,
            hidden_dim: 32,
            cell_dim: 64,
            proj_dim: 16,
            latent_dim: 16,
            num_layers: 1,
        }
    }
}

impl VrnnConfig {
    pub fn lstm(&self) -> LightLstmConfig {
        LightLstmConfig::new(2 * self.feat_dim, self.cell_dim, self.proj_dim)
            .with_layers(self.num_layers)
    }

    pub fn validate(&self) -> Result<()> {
        if [
            self.frame_dim,
            self.feat_dim,
            self.hidden_dim,
            self.latent_dim,
        ]
        .contains(&0)
        {
            return Err(Error::InvalidConfig(format!(
                "all vrnn dimensions must be positive: {self:?}"
            )));
        }
        self.lstm().validate()
    }
}

/// Network handles; weights live in a [`ParamStore`]. `phi_x`, `phi_z`,
/// `enc`, `prior` and `rnn` form the encoder group, `dec` the decoder group.
#[derive(Clone, Debug, PartialEq)]
pub struct Vrnn {
    config: VrnnConfig,
    pub phi_x: Mlp,
    pub phi_z: Mlp,
    pub enc: Mlp,
    pub prior: Mlp,
    pub dec: Mlp,
    pub rnn: LightLstm,
}

#[derive(Clone, Debug)]
struct HeadCache {
    mlp: MlpCache,
    pre_std: Vec<f64>,
}

/// Everything computed at one time step.
#[derive(Clone, Debug)]
pub struct StepRecord {
    pub posterior: GaussianParams,
    pub prior: GaussianParams,
    pub z: Vec<f64>,
    pub decoder: GaussianParams,
    pub state: RecurrentState,
    pub kl: f64,
    pub nll: f64,
    eps: Option<Vec<f64>>,
    phi_x: MlpCache,
    phi_z: MlpCache,
    enc: HeadCache,
    prior_head: HeadCache,
    dec: HeadCache,
    lstm: StepCache,
}

/// Per-step record of a forward pass.
#[derive(Clone, Debug)]
pub struct StepTrace {
    pub steps: Vec<StepRecord>,
}

impl StepTrace {
    pub fn len(&self) -> usize {
        self.steps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.steps.is_empty()
    }

    pub fn kl_total(&self) -> f64 {
        self.steps.iter().map(|s| s.kl).sum()
    }

    pub fn nll_total(&self) -> f64 {
        self.steps.iter().map(|s| s.nll).sum()
    }

    /// Negative evidence lower bound.
    pub fn loss(&self) -> f64 {
        self.kl_total() + self.nll_total()
    }

    pub fn final_posterior(&self) -> &GaussianParams {
        &self.steps.last().expect("non-empty trace").posterior
    }
}

/// How `z_t` is produced during the forward pass.
pub enum Sampling<'a> {
    Reparameterized(&'a mut Rng),
    /// `z_t = μ_{z,t}`.
    Mean,
}

/// Weights applied to the two ELBO terms in the backward pass.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboWeights {
    pub kl: f64,
    pub nll: f64,
}

impl ElboWeights {
    pub fn uniform(w: f64) -> Self {
        Self { kl: w, nll: w }
    }
}

fn split_gaussian(out: &[f64]) -> Result<(GaussianParams, Vec<f64>)> {
    let k = out.len() / 2;
    let mean = out[..k].to_vec();
    let pre_std = out[k..].to_vec();
    if out.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite("gaussian parameters".into()));
    }
    let std = pre_std.iter().map(|&s| softplus(s) + SIGMA_FLOOR).collect();
    Ok((GaussianParams::new(mean, std)?, pre_std))
}

fn gaussian_head_grad(d_mean: &[f64], d_std: &[f64], pre_std: &[f64]) -> Vec<f64> {
    let mut out = d_mean.to_vec();
    out.extend(d_std.iter().zip(pre_std).map(|(d, &s)| d * sigmoid(s)));
    out
}

impl Vrnn {
    pub fn new(config: VrnnConfig, store: &mut ParamStore, rng: &mut Rng) -> Result<Self> {
        config.validate()?;
        let VrnnConfig {
            frame_dim: d,
            feat_dim: f,
            hidden_dim: h,
            proj_dim: r,
            latent_dim: k,
            ..
        } = config;
        let phi_x = Mlp::new(store, ENCODER_GROUP, "phi_x", (d, h, f), rng);
        let phi_z = Mlp::new(store, ENCODER_GROUP, "phi_z", (k, h, f), rng);
        let enc = Mlp::new(store, ENCODER_GROUP, "enc", (f + r, h, 2 * k), rng);
        let prior = Mlp::new(store, ENCODER_GROUP, "prior", (r, h, 2 * k), rng);
        let rnn = LightLstm::new(config.lstm(), store, ENCODER_GROUP, "rnn", rng)?;
        let dec = Mlp::new(store, DECODER_GROUP, "dec", (f + r, h, 2 * d), rng);
        Ok(Self {
            config,
            phi_x,
            phi_z,
            enc,
            prior,
            dec,
            rnn,
        })
    }

    pub fn config(&self) -> &VrnnConfig {
        &self.config
    }

    pub fn initial_state(&self) -> RecurrentState {
        self.rnn.initial_state()
    }

    /// Posterior `q(z_t | x_t, h_{t-1})`.
    pub fn encode_step(
        &self,
        store: &ParamStore,
        x: &[f64],
        h_prev: &[f64],
    ) -> Result<GaussianParams> {
        check_dim("frame", self.config.frame_dim, x.len())?;
        check_dim("hidden state", self.config.proj_dim, h_prev.len())?;
        let (fx, _) = self.phi_x.forward(store, x)?;
        let (out, _) = self.enc.forward(store, &concat(&fx, h_prev))?;
        Ok(split_gaussian(&out)?.0)
    }

    /// Prior `p(z_t | h_{t-1})`.
    pub fn prior_step(&self, store: &ParamStore, h_prev: &[f64]) -> Result<GaussianParams> {
        check_dim("hidden state", self.config.proj_dim, h_prev.len())?;
        let (out, _) = self.prior.forward(store, h_prev)?;
        Ok(split_gaussian(&out)?.0)
    }

    /// Generative distribution `p(x_t | z_t, h_{t-1})`.
    pub fn decode_step(
        &self,
        store: &ParamStore,
        z: &[f64],
        h_prev: &[f64],
    ) -> Result<GaussianParams> {
        check_dim("latent", self.config.latent_dim, z.len())?;
        check_dim("hidden state", self.config.proj_dim, h_prev.len())?;
        let (fz, _) = self.phi_z.forward(store, z)?;
        let (out, _) = self.dec.forward(store, &concat(&fz, h_prev))?;
        Ok(split_gaussian(&out)?.0)
    }

    /// One recurrence step over `[φ_x(x_t), φ_z(z_t)]`.
    pub fn recurrence_update(
        &self,
        store: &ParamStore,
        prev: &RecurrentState,
        x: &[f64],
        z: &[f64],
    ) -> Result<RecurrentState> {
        check_dim("frame", self.config.frame_dim, x.len())?;
        check_dim("latent", self.config.latent_dim, z.len())?;
        let (fx, _) = self.phi_x.forward(store, x)?;
        let (fz, _) = self.phi_z.forward(store, z)?;
        Ok(self.rnn.step(store, &concat(&fx, &fz), prev)?.0)
    }

    /// Forward pass over a whole sequence, retaining everything needed by
    /// [`Vrnn::backward`].
    pub fn run(
        &self,
        store: &ParamStore,
        frames: &[Vec<f64>],
        mut sampling: Sampling<'_>,
    ) -> Result<StepTrace> {
        if frames.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut state = self.initial_state();
        let mut steps = Vec::with_capacity(frames.len());
        for x in frames {
            check_dim("frame", self.config.frame_dim, x.len())?;
            let h_prev = state.output().to_vec();
            let (fx, phi_x) = self.phi_x.forward(store, x)?;
            let (enc_out, enc_cache) = self.enc.forward(store, &concat(&fx, &h_prev))?;
            let (posterior, enc_pre) = split_gaussian(&enc_out)?;
            let (prior_out, prior_cache) = self.prior.forward(store, &h_prev)?;
            let (prior, prior_pre) = split_gaussian(&prior_out)?;
            let (z, eps) = match &mut sampling {
                Sampling::Reparameterized(rng) => {
                    let (z, eps) = reparameterize(&posterior, rng);
                    (z, Some(eps))
                }
                Sampling::Mean => (posterior.mean().to_vec(), None),
            };
            let (fz, phi_z) = self.phi_z.forward(store, &z)?;
            let (dec_out, dec_cache) = self.dec.forward(store, &concat(&fz, &h_prev))?;
            let (decoder, dec_pre) = split_gaussian(&dec_out)?;
            let kl = gaussian_kl_diag(&posterior, &prior)?;
            let nll = gaussian_nll(x, &decoder)?;
            let (next, lstm) = self.rnn.step(store, &concat(&fx, &fz), &state)?;
            state = next;
            steps.push(StepRecord {
                posterior,
                prior,
                z,
                decoder,
                state: state.clone(),
                kl,
                nll,
                eps,
                phi_x,
                phi_z,
                enc: HeadCache {
                    mlp: enc_cache,
                    pre_std: enc_pre,
                },
                prior_head: HeadCache {
                    mlp: prior_cache,
                    pre_std: prior_pre,
                },
                dec: HeadCache {
                    mlp: dec_cache,
                    pre_std: dec_pre,
                },
                lstm,
            });
        }
        Ok(StepTrace { steps })
    }

    /// Negative ELBO `Σ_t KL(q_t ‖ p_t) + NLL(x_t)` with one reparameterized
    /// sample per step.
    pub fn elbo(
        &self,
        store: &ParamStore,
        seq: &FrameSequence,
        rng: &mut Rng,
    ) -> Result<(f64, StepTrace)> {
        let trace = self.run(store, &seq.frames, Sampling::Reparameterized(rng))?;
        Ok((trace.loss(), trace))
    }

    pub fn embed_sequence(
        &self,
        store: &ParamStore,
        seq: &FrameSequence,
        mode: EmbedMode,
        rng: &mut Rng,
    ) -> Result<SequenceEmbedding> {
        let trace = self.run(store, &seq.frames, Sampling::Mean)?;
        let posterior = trace.final_posterior();
        let vector = match mode {
            EmbedMode::Mean => posterior.mean().to_vec(),
            EmbedMode::Sample => reparameterize(posterior, rng).0,
        };
        Ok(SequenceEmbedding {
            vector,
            view: seq.view,
            label: seq.label,
        })
    }

    /// Accumulates gradients of
    /// `weights.kl · ΣKL + weights.nll · ΣNLL + Σ_t ⟨d_post_mean[t], μ_{z,t}⟩`
    /// into `store`. `d_post_mean` is either empty or has one entry per step.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        frames: &[Vec<f64>],
        trace: &StepTrace,
        weights: ElboWeights,
        d_post_mean: &[Vec<f64>],
    ) -> Result<()> {
        if trace.len() != frames.len() {
            return Err(Error::StateMismatch(format!(
                "trace has {} steps for {} frames",
                trace.len(),
                frames.len()
            )));
        }
        if !d_post_mean.is_empty() && d_post_mean.len() != trace.len() {
            return Err(Error::StateMismatch(format!(
                "{} posterior-mean gradients for {} steps",
                d_post_mean.len(),
                trace.len()
            )));
        }
        let f = self.config.feat_dim;
        let lstm_cfg = *self.rnn.config();
        let mut carry = StateGrad::zeros(&lstm_cfg);
        for t in (0..trace.len()).rev() {
            let s = &trace.steps[t];
            let (d_lstm_in, mut d_prev) = self.rnn.step_backward(store, &s.lstm, &carry)?;
            let mut d_fx = d_lstm_in[..f].to_vec();
            let mut d_fz = d_lstm_in[f..].to_vec();
            let mut d_h = vec![0.0; self.config.proj_dim];

            // reconstruction
            let g = gaussian_nll_grad(&frames[t], &s.decoder)?;
            let scale =
                |v: Vec<f64>, w: f64| -> Vec<f64> { v.into_iter().map(|x| x * w).collect() };
            let d_dec = gaussian_head_grad(
                &scale(g.mean, weights.nll),
                &scale(g.std, weights.nll),
                &s.dec.pre_std,
            );
            let d_dec_in = self.dec.backward(store, &s.dec.mlp, &d_dec, 1.0);
            axpy(&mut d_fz, &d_dec_in[..f], 1.0);
            axpy(&mut d_h, &d_dec_in[f..], 1.0);
            let d_z = self.phi_z.backward(store, &s.phi_z, &d_fz, 1.0);

            // posterior and prior
            let (gq, gp) = gaussian_kl_diag_grad(&s.posterior, &s.prior)?;
            let mut d_mu = scale(gq.mean, weights.kl);
            let mut d_sigma = scale(gq.std, weights.kl);
            axpy(&mut d_mu, &d_z, 1.0);
            if let Some(eps) = &s.eps {
                for ((ds, dz), e) in d_sigma.iter_mut().zip(&d_z).zip(eps) {
                    *ds += dz * e;
                }
            }
            if let Some(extra) = d_post_mean.get(t) {
                check_dim(
                    "posterior-mean gradient",
                    self.config.latent_dim,
                    extra.len(),
                )?;
                axpy(&mut d_mu, extra, 1.0);
            }
            let d_enc = gaussian_head_grad(&d_mu, &d_sigma, &s.enc.pre_std);
            let d_enc_in = self.enc.backward(store, &s.enc.mlp, &d_enc, 1.0);
            axpy(&mut d_fx, &d_enc_in[..f], 1.0);
            axpy(&mut d_h, &d_enc_in[f..], 1.0);
            let d_prior = gaussian_head_grad(
                &scale(gp.mean, weights.kl),
                &scale(gp.std, weights.kl),
                &s.prior_head.pre_std,
            );
            let d_prior_in = self.prior.backward(store, &s.prior_head.mlp, &d_prior, 1.0);
            axpy(&mut d_h, &d_prior_in, 1.0);
            self.phi_x.backward(store, &s.phi_x, &d_fx, 1.0);

            axpy(d_prev.output_mut(), &d_h, 1.0);
            carry = d_prev;
        }
        Ok(())
    }
}
