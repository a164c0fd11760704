use super::{axpy, matvec, matvec_t_acc, outer_acc, ParamId, ParamStore, Rng, Tensor};
use crate::error::{check_dim, Result};

/// Two-layer perceptron `W₂·tanh(W₁x + b₁) + b₂`.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp {
    pub w1: ParamId,
    pub b1: ParamId,
    pub w2: ParamId,
    pub b2: ParamId,
    input_dim: usize,
    hidden_dim: usize,
    output_dim: usize,
}

/// Activations retained for the backward pass.
#[derive(Clone, Debug)]
pub struct MlpCache {
    input: Vec<f64>,
    hidden: Vec<f64>,
}

pub(crate) fn uniform_tensor(shape: &[usize], bound: f64, rng: &mut Rng) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.uniform(-bound, bound)).collect();
    Tensor::from_vec(shape, data).expect("shape product matches")
}

impl Mlp {
    /// Weights uniform in `±1/√fan_in`, biases zero.
    pub fn new(
        store: &mut ParamStore,
        group: &str,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut Rng,
    ) -> Self {
        let (input_dim, hidden_dim, output_dim) = dims;
        let w1 = store.register(
            group,
            &format!("{name}.w1"),
            uniform_tensor(
                &[hidden_dim, input_dim],
                1.0 / (input_dim as f64).sqrt(),
                rng,
            ),
        );
        let b1 = store.register(group, &format!("{name}.b1"), Tensor::zeros(&[hidden_dim]));
        let w2 = store.register(
            group,
            &format!("{name}.w2"),
            uniform_tensor(
                &[output_dim, hidden_dim],
                1.0 / (hidden_dim as f64).sqrt(),
                rng,
            ),
        );
        let b2 = store.register(group, &format!("{name}.b2"), Tensor::zeros(&[output_dim]));
        Self {
            w1,
            b1,
            w2,
            b2,
            input_dim,
            hidden_dim,
            output_dim,
        }
    }

    pub fn input_dim(&self) -> usize {
        self.input_dim
    }

    pub fn output_dim(&self) -> usize {
        self.output_dim
    }

    pub fn forward(&self, store: &ParamStore, x: &[f64]) -> Result<(Vec<f64>, MlpCache)> {
        check_dim("mlp input", self.input_dim, x.len())?;
        let mut hidden = store.value(self.b1).data().to_vec();
        let mut pre = vec![0.0; self.hidden_dim];
        matvec(store.value(self.w1), x, &mut pre);
        for (h, p) in hidden.iter_mut().zip(&pre) {
            *h = (*h + p).tanh();
        }
        let mut out = vec![0.0; self.output_dim];
        matvec(store.value(self.w2), &hidden, &mut out);
        axpy(&mut out, store.value(self.b2).data(), 1.0);
        Ok((
            out,
            MlpCache {
                input: x.to_vec(),
                hidden,
            },
        ))
    }

    /// Accumulates `param_scale · ∂/∂θ` into the store and returns the
    /// (unscaled) gradient with respect to the input.
    pub fn backward(
        &self,
        store: &mut ParamStore,
        cache: &MlpCache,
        d_out: &[f64],
        param_scale: f64,
    ) -> Vec<f64> {
        let mut d_hidden = vec![0.0; self.hidden_dim];
        {
            let (w2, dw2) = store.value_and_grad(self.w2);
            matvec_t_acc(w2, d_out, &mut d_hidden);
            outer_acc(dw2, d_out, &cache.hidden, param_scale);
        }
        axpy(store.grad_mut(self.b2).data_mut(), d_out, param_scale);
        for (d, h) in d_hidden.iter_mut().zip(&cache.hidden) {
            *d *= 1.0 - h * h;
        }
        let mut d_in = vec![0.0; self.input_dim];
        {
            let (w1, dw1) = store.value_and_grad(self.w1);
            matvec_t_acc(w1, &d_hidden, &mut d_in);
            outer_acc(dw1, &d_hidden, &cache.input, param_scale);
        }
        axpy(store.grad_mut(self.b1).data_mut(), &d_hidden, param_scale);
        d_in
    }
}
