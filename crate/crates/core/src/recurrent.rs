//! LSTM with a recurrent projection layer ("light" LSTM).
//!
//! Each layer keeps an `M`-dim cell but only exposes the `R`-dim projection
//! `r_t = W_rh · h_t`, which is both the next layer's input and the
//! recurrent input of its own gates at `t + 1`. Gates are stacked in a single
//! `4M × ·` matrix in the order input, forget, output, candidate. There are
//! no peephole connections.

use crate::error::{check_dim, Error, Result};
use crate::numerics::mlp::uniform_tensor;
use crate::numerics::{
    axpy, matvec, matvec_acc, matvec_t_acc, outer_acc, sigmoid, ParamId, ParamStore, Rng, Tensor,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LightLstmConfig {
    pub input_dim: usize,
    pub cell_dim: usize,
    pub proj_dim: usize,
    pub num_layers: usize,
}

impl LightLstmConfig {
    pub fn new(input_dim: usize, cell_dim: usize, proj_dim: usize) -> Self {
        Self {
            input_dim,
            cell_dim,
            proj_dim,
            num_layers: 3,
        }
    }

    pub fn with_layers(mut self, num_layers: usize) -> Self {
        self.num_layers = num_layers;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.input_dim == 0 || self.cell_dim == 0 || self.proj_dim == 0 || self.num_layers == 0 {
            return Err(Error::InvalidConfig(format!(
                "all lstm dimensions must be positive: {self:?}"
            )));
        }
        if self.proj_dim > self.cell_dim {
            return Err(Error::InvalidConfig(format!(
                "projection dim {} exceeds cell dim {}",
                self.proj_dim, self.cell_dim
            )));
        }
        Ok(())
    }

    fn layer_input_dim(&self, layer: usize) -> usize {
        if layer == 0 {
            self.input_dim
        } else {
            self.proj_dim
        }
    }

    /// Scalar parameter count per the layout documented on [`LightLstm`].
    pub fn param_count(&self) -> usize {
        let (m, r) = (self.cell_dim, self.proj_dim);
        (0..self.num_layers)
            .map(|l| 4 * m * self.layer_input_dim(l) + 4 * m * r + 4 * m + r * m)
            .sum()
    }
}

/// Parameter handles of one layer.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerParams {
    /// `4M × input` input weights (gates i, f, o, g stacked).
    pub w_x: ParamId,
    /// `4M × R` recurrent weights acting on the previous projection.
    pub w_m: ParamId,
    /// `4M` biases.
    pub bias: ParamId,
    /// `R × M` projection.
    pub w_rh: ParamId,
}

/// A stacked light LSTM whose weights live in a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct LightLstm {
    config: LightLstmConfig,
    layers: Vec<LayerParams>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LayerState {
    pub c: Vec<f64>,
    pub r: Vec<f64>,
}

/// Cell vector and projected output for every layer.
#[derive(Clone, Debug, PartialEq)]
pub struct RecurrentState {
    pub layers: Vec<LayerState>,
}

impl RecurrentState {
    pub fn zeros(config: &LightLstmConfig) -> Self {
        Self {
            layers: (0..config.num_layers)
                .map(|_| LayerState {
                    c: vec![0.0; config.cell_dim],
                    r: vec![0.0; config.proj_dim],
                })
                .collect(),
        }
    }

    /// Projected output of the top layer; this is what downstream modules
    /// treat as the hidden state.
    pub fn output(&self) -> &[f64] {
        &self.layers.last().expect("at least one layer").r
    }
}

/// Gradient with respect to a [`RecurrentState`].
#[derive(Clone, Debug, PartialEq)]
pub struct StateGrad {
    pub layers: Vec<LayerState>,
}

impl StateGrad {
    pub fn zeros(config: &LightLstmConfig) -> Self {
        Self {
            layers: RecurrentState::zeros(config).layers,
        }
    }

    pub fn output_mut(&mut self) -> &mut [f64] {
        &mut self.layers.last_mut().expect("at least one layer").r
    }
}

#[derive(Clone, Debug)]
struct LayerCache {
    input: Vec<f64>,
    r_prev: Vec<f64>,
    c_prev: Vec<f64>,
    /// Activated gates, `4M`, order i, f, o, g.
    gates: Vec<f64>,
    tanh_c: Vec<f64>,
    h: Vec<f64>,
}

/// Activations of one step, retained for backpropagation.
#[derive(Clone, Debug)]
pub struct StepCache {
    layers: Vec<LayerCache>,
}

impl StepCache {
    /// Pre-projection outputs `h_t` per layer.
    pub fn hidden(&self, layer: usize) -> &[f64] {
        &self.layers[layer].h
    }
}

impl LightLstm {
    /// Weights uniform in `±1/√fan_in`, forget-gate bias 1, other biases 0.
    pub fn new(
        config: LightLstmConfig,
        store: &mut ParamStore,
        group: &str,
        prefix: &str,
        rng: &mut Rng,
    ) -> Result<Self> {
        config.validate()?;
        let (m, r) = (config.cell_dim, config.proj_dim);
        let mut layers = Vec::with_capacity(config.num_layers);
        for l in 0..config.num_layers {
            let input = config.layer_input_dim(l);
            let w_x = store.register(
                group,
                &format!("{prefix}.l{l}.w_x"),
                uniform_tensor(&[4 * m, input], 1.0 / (input as f64).sqrt(), rng),
            );
            let w_m = store.register(
                group,
                &format!("{prefix}.l{l}.w_m"),
                uniform_tensor(&[4 * m, r], 1.0 / (r as f64).sqrt(), rng),
            );
            let mut b = Tensor::zeros(&[4 * m]);
            b.data_mut()[m..2 * m].fill(1.0);
            let bias = store.register(group, &format!("{prefix}.l{l}.bias"), b);
            let w_rh = store.register(
                group,
                &format!("{prefix}.l{l}.w_rh"),
                uniform_tensor(&[r, m], 1.0 / (m as f64).sqrt(), rng),
            );
            layers.push(LayerParams {
                w_x,
                w_m,
                bias,
                w_rh,
            });
        }
        Ok(Self { config, layers })
    }

    pub fn config(&self) -> &LightLstmConfig {
        &self.config
    }

    pub fn layers(&self) -> &[LayerParams] {
        &self.layers
    }

    pub fn initial_state(&self) -> RecurrentState {
        RecurrentState::zeros(&self.config)
    }

    fn check_state(&self, state: &RecurrentState) -> Result<()> {
        check_dim(
            "recurrent layers",
            self.config.num_layers,
            state.layers.len(),
        )?;
        for layer in &state.layers {
            check_dim("cell state", self.config.cell_dim, layer.c.len())?;
            check_dim("projected state", self.config.proj_dim, layer.r.len())?;
        }
        Ok(())
    }

    /// One time step through every layer.
    pub fn step(
        &self,
        store: &ParamStore,
        x: &[f64],
        prev: &RecurrentState,
    ) -> Result<(RecurrentState, StepCache)> {
        check_dim("lstm input", self.config.input_dim, x.len())?;
        self.check_state(prev)?;
        let m = self.config.cell_dim;
        let mut input = x.to_vec();
        let mut next = Vec::with_capacity(self.layers.len());
        let mut caches = Vec::with_capacity(self.layers.len());
        for (p, prev_layer) in self.layers.iter().zip(&prev.layers) {
            let mut gates = store.value(p.bias).data().to_vec();
            matvec_acc(store.value(p.w_x), &input, &mut gates);
            matvec_acc(store.value(p.w_m), &prev_layer.r, &mut gates);
            for v in &mut gates[..3 * m] {
                *v = sigmoid(*v);
            }
            for v in &mut gates[3 * m..] {
                *v = v.tanh();
            }
            let (i, f, o, g) = (
                &gates[..m],
                &gates[m..2 * m],
                &gates[2 * m..3 * m],
                &gates[3 * m..],
            );
            let c: Vec<f64> = (0..m)
                .map(|k| f[k] * prev_layer.c[k] + i[k] * g[k])
                .collect();
            let tanh_c: Vec<f64> = c.iter().map(|v| v.tanh()).collect();
            let h: Vec<f64> = (0..m).map(|k| o[k] * tanh_c[k]).collect();
            let mut r = vec![0.0; self.config.proj_dim];
            matvec(store.value(p.w_rh), &h, &mut r);
            caches.push(LayerCache {
                input: std::mem::replace(&mut input, r.clone()),
                r_prev: prev_layer.r.clone(),
                c_prev: prev_layer.c.clone(),
                gates,
                tanh_c,
                h,
            });
            next.push(LayerState { c, r });
        }
        Ok((
            RecurrentState { layers: next },
            StepCache { layers: caches },
        ))
    }

    /// Backpropagates one step. `d_out` is the gradient with respect to the
    /// state this step produced; returns the gradients with respect to the
    /// step input and to the previous state.
    pub fn step_backward(
        &self,
        store: &mut ParamStore,
        cache: &StepCache,
        d_out: &StateGrad,
    ) -> Result<(Vec<f64>, StateGrad)> {
        check_dim("cached layers", self.layers.len(), cache.layers.len())?;
        check_dim("state grad layers", self.layers.len(), d_out.layers.len())?;
        let m = self.config.cell_dim;
        let mut d_prev = StateGrad::zeros(&self.config);
        // gradient flowing into the current layer's r_t from the layer above
        let mut d_from_above: Option<Vec<f64>> = None;
        for l in (0..self.layers.len()).rev() {
            let p = &self.layers[l];
            let lc = &cache.layers[l];
            let mut d_r = d_out.layers[l].r.clone();
            if let Some(extra) = d_from_above.take() {
                axpy(&mut d_r, &extra, 1.0);
            }
            let mut d_h = vec![0.0; m];
            {
                let (w_rh, dw_rh) = store.value_and_grad(p.w_rh);
                matvec_t_acc(w_rh, &d_r, &mut d_h);
                outer_acc(dw_rh, &d_r, &lc.h, 1.0);
            }
            let (i, f, o, g) = (
                &lc.gates[..m],
                &lc.gates[m..2 * m],
                &lc.gates[2 * m..3 * m],
                &lc.gates[3 * m..],
            );
            let mut d_pre = vec![0.0; 4 * m];
            for k in 0..m {
                let d_o = d_h[k] * lc.tanh_c[k];
                let d_c = d_out.layers[l].c[k] + d_h[k] * o[k] * (1.0 - lc.tanh_c[k].powi(2));
                let d_i = d_c * g[k];
                let d_f = d_c * lc.c_prev[k];
                let d_g = d_c * i[k];
                d_prev.layers[l].c[k] = d_c * f[k];
                d_pre[k] = d_i * i[k] * (1.0 - i[k]);
                d_pre[m + k] = d_f * f[k] * (1.0 - f[k]);
                d_pre[2 * m + k] = d_o * o[k] * (1.0 - o[k]);
                d_pre[3 * m + k] = d_g * (1.0 - g[k] * g[k]);
            }
            axpy(store.grad_mut(p.bias).data_mut(), &d_pre, 1.0);
            {
                let (w_m, dw_m) = store.value_and_grad(p.w_m);
                matvec_t_acc(w_m, &d_pre, &mut d_prev.layers[l].r);
                outer_acc(dw_m, &d_pre, &lc.r_prev, 1.0);
            }
            let mut d_input = vec![0.0; lc.input.len()];
            {
                let (w_x, dw_x) = store.value_and_grad(p.w_x);
                matvec_t_acc(w_x, &d_pre, &mut d_input);
                outer_acc(dw_x, &d_pre, &lc.input, 1.0);
            }
            d_from_above = Some(d_input);
        }
        Ok((d_from_above.expect("at least one layer"), d_prev))
    }

    /// Runs the recurrence from the zero state; `states[t]` follows `seq[t]`.
    pub fn forward_sequence(
        &self,
        store: &ParamStore,
        seq: &[Vec<f64>],
    ) -> Result<(Vec<RecurrentState>, Vec<StepCache>)> {
        if seq.is_empty() {
            return Err(Error::EmptySequence);
        }
        let mut state = self.initial_state();
        let mut states = Vec::with_capacity(seq.len());
        let mut caches = Vec::with_capacity(seq.len());
        for x in seq {
            let (next, cache) = self.step(store, x, &state)?;
            states.push(next.clone());
            caches.push(cache);
            state = next;
        }
        Ok((states, caches))
    }

    /// Backpropagation through time. `d_outputs[t]` is the gradient of the
    /// loss with respect to the top-layer projection at step `t`. Parameter
    /// gradients accumulate into `store`; input gradients are returned.
    pub fn bptt_backward(
        &self,
        store: &mut ParamStore,
        caches: &[StepCache],
        d_outputs: &[Vec<f64>],
    ) -> Result<Vec<Vec<f64>>> {
        if caches.len() != d_outputs.len() {
            return Err(Error::StateMismatch(format!(
                "{} retained steps but {} upstream gradients",
                caches.len(),
                d_outputs.len()
            )));
        }
        let mut d_inputs = vec![Vec::new(); caches.len()];
        let mut carry = StateGrad::zeros(&self.config);
        for t in (0..caches.len()).rev() {
            check_dim(
                "upstream gradient",
                self.config.proj_dim,
                d_outputs[t].len(),
            )?;
            axpy(carry.output_mut(), &d_outputs[t], 1.0);
            let (d_x, d_prev) = self.step_backward(store, &caches[t], &carry)?;
            d_inputs[t] = d_x;
            carry = d_prev;
        }
        Ok(d_inputs)
    }
}

/// Multiplications per step of a vanilla LSTM: `4(D + M)M`.
pub fn mult_count_vanilla(input_dim: u64, cell_dim: u64) -> u64 {
    4 * (input_dim + cell_dim) * cell_dim
}

/// Multiplications per step with a recurrent projection: `4(D + R)M + RM`.
pub fn mult_count_projected(input_dim: u64, cell_dim: u64, proj_dim: u64) -> u64 {
    4 * (input_dim + proj_dim) * cell_dim + proj_dim * cell_dim
}

/// Fractional saving of the projected cell relative to the vanilla one.
pub fn projection_reduction(
    input_dim: u64,
    cell_dim: u64,
    proj_input_dim: u64,
    proj_dim: u64,
) -> f64 {
    1.0 - mult_count_projected(proj_input_dim, cell_dim, proj_dim) as f64
        / mult_count_vanilla(input_dim, cell_dim) as f64
}
