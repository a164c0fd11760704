//! Finite-difference checks of every composed loss at toy dimensions.

use crate::adversarial::{objective_backward, total_objective, AdversarialConfig, BackwardSpec};
use crate::data::SequencePair;
use crate::error::Result;
use crate::model::{Model, ModelConfig};
use crate::numerics::{
    finite_diff_check, GradCheckReport, ParamStore, Rng, COMPOSED_FD_EPS, DEFAULT_FD_EPS,
};
use crate::recurrent::{LightLstm, LightLstmConfig};
use crate::vrnn::{ElboWeights, FrameSequence, Sampling, View, Vrnn, VrnnConfig};

pub const GRAD_TOLERANCE: f64 = 1e-4;

/// Toy dimensions shared by the checks: frame 8, cell 8, projection 4,
/// latent 4.
pub fn toy_vrnn_config() -> VrnnConfig {
    VrnnConfig {
        frame_dim: 8,
        feat_dim: 8,
        hidden_dim: 8,
        cell_dim: 8,
        proj_dim: 4,
        latent_dim: 4,
        num_layers: 1,
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedCheck {
    pub name: &'static str,
    pub report: GradCheckReport,
}

impl NamedCheck {
    pub fn passes(&self) -> bool {
        self.report.passes(GRAD_TOLERANCE)
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct SuiteOptions {
    /// Flips the analytic gradient of the first parameter of every check.
    /// Negative control: the suite must fail.
    pub inject_sign_error: bool,
    pub seed: u64,
}

fn random_frames(rng: &mut Rng, len: usize, dim: usize) -> Vec<Vec<f64>> {
    (0..len)
        .map(|_| (0..dim).map(|_| rng.normal()).collect())
        .collect()
}

fn sabotage(store: &mut ParamStore, opts: SuiteOptions) {
    if opts.inject_sign_error {
        if let Some(id) = store.ids().next() {
            for g in store.grad_mut(id).data_mut() {
                *g = -*g;
            }
        }
    }
}

/// One light-LSTM step under a linear readout.
pub fn check_lstm_step(opts: SuiteOptions) -> Result<NamedCheck> {
    let cfg = LightLstmConfig::new(8, 8, 4).with_layers(1);
    let mut store = ParamStore::new();
    let mut rng = Rng::derive(opts.seed, 1);
    let lstm = LightLstm::new(cfg, &mut store, "rnn", "rnn", &mut rng)?;
    let x = random_frames(&mut rng, 1, 8);
    let readout = random_frames(&mut rng, 1, 4);
    let (_, caches) = lstm.forward_sequence(&store, &x)?;
    lstm.bptt_backward(&mut store, &caches, &readout)?;
    sabotage(&mut store, opts);
    let report = finite_diff_check(&mut store, DEFAULT_FD_EPS, |s| {
        let (states, _) = lstm.forward_sequence(s, &x)?;
        Ok(states[0]
            .output()
            .iter()
            .zip(&readout[0])
            .map(|(a, b)| a * b)
            .sum())
    })?;
    Ok(NamedCheck {
        name: "light_lstm_step",
        report,
    })
}

/// Negative ELBO of a five-step sequence with a fixed noise draw.
pub fn check_vrnn_elbo(opts: SuiteOptions) -> Result<NamedCheck> {
    let mut store = ParamStore::new();
    let mut rng = Rng::derive(opts.seed, 2);
    let vrnn = Vrnn::new(toy_vrnn_config(), &mut store, &mut rng)?;
    store.scale_values(2.0);
    let frames = random_frames(&mut rng, 5, 8);
    let noise_seed = rng.next_u64();
    let trace = vrnn.run(
        &store,
        &frames,
        Sampling::Reparameterized(&mut Rng::new(noise_seed)),
    )?;
    vrnn.backward(&mut store, &frames, &trace, ElboWeights::uniform(1.0), &[])?;
    sabotage(&mut store, opts);
    let report = finite_diff_check(&mut store, COMPOSED_FD_EPS, |s| {
        Ok(vrnn
            .run(
                s,
                &frames,
                Sampling::Reparameterized(&mut Rng::new(noise_seed)),
            )?
            .loss())
    })?;
    Ok(NamedCheck {
        name: "vrnn_elbo",
        report,
    })
}

/// The full objective `E` at λ = 0.6 over four identities.
pub fn check_objective(opts: SuiteOptions) -> Result<NamedCheck> {
    let classes = 4;
    let mut model = Model::new(ModelConfig::toy(classes), opts.seed)?;
    model.store.scale_values(2.0);
    let mut rng = Rng::derive(opts.seed, 3);
    let batch: Vec<SequencePair> = (0..classes)
        .map(|i| {
            let probe = FrameSequence::new(random_frames(&mut rng, 3 + i % 2, 8), i, View::Probe)?;
            let gallery =
                FrameSequence::new(random_frames(&mut rng, 2 + i % 3, 8), i, View::Gallery)?;
            Ok(SequencePair {
                probe,
                gallery,
                label: i,
            })
        })
        .collect::<Result<_>>()?;
    let cfg = AdversarialConfig {
        lambda: 0.6,
        ..AdversarialConfig::default()
    };
    let noise_seed = rng.next_u64();
    objective_backward(
        &mut model,
        &batch,
        &cfg,
        BackwardSpec::exact(cfg.lambda),
        &mut Rng::new(noise_seed),
    )?;
    sabotage(&mut model.store, opts);
    let net = model.clone();
    let report = finite_diff_check(&mut model.store, COMPOSED_FD_EPS, |s| {
        let mut m = net.clone();
        m.store = s.clone();
        Ok(total_objective(&m, &batch, &cfg, &mut Rng::new(noise_seed))?.total)
    })?;
    Ok(NamedCheck {
        name: "objective",
        report,
    })
}

pub fn gradient_suite(opts: SuiteOptions) -> Result<Vec<NamedCheck>> {
    Ok(vec![
        check_lstm_step(opts)?,
        check_vrnn_elbo(opts)?,
        check_objective(opts)?,
    ])
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn suite_passes_and_negative_control_fails() {
        for seed in [0, 1] {
            let opts = SuiteOptions {
                seed,
                ..SuiteOptions::default()
            };
            for c in gradient_suite(opts).unwrap() {
                assert!(c.passes(), "{} {:?}", c.name, c.report);
            }
        }
        let bad = gradient_suite(SuiteOptions {
            inject_sign_error: true,
            seed: 0,
        })
        .unwrap();
        assert!(bad.iter().all(|c| !c.passes()));
    }
}
