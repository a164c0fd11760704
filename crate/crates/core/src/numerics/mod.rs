//! Dense arithmetic, seeded randomness, Gaussian algebra and the parameter
//! store shared by every model component.
//!
//! Everything is `f64`. Matrices are row-major [`Tensor`]s; the hot loops
//! work on plain slices so callers can keep activations in `Vec<f64>`.

mod gaussian;
mod gradcheck;
pub(crate) mod mlp;
mod params;

pub use gaussian::{
    gaussian_kl_diag, gaussian_kl_diag_grad, gaussian_kl_monte_carlo, gaussian_nll,
    gaussian_nll_grad, reparameterize, GaussianGrad, GaussianParams, SIGMA_FLOOR,
};
pub use gradcheck::{finite_diff_check, GradCheckReport, COMPOSED_FD_EPS, DEFAULT_FD_EPS};
pub use mlp::{Mlp, MlpCache};
pub use params::{ParamId, ParamStore};

use rand::{Rng as _, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{check_dim, Error, Result};

/// A shaped block of `f64` values.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::InvalidConfig(format!(
                "tensor shape {shape:?} has a zero dimension"
            )));
        }
        check_dim("tensor values", shape.iter().product(), data.len())?;
        Ok(Self {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Self {
            shape: vec![data.len()],
            data,
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn rows(&self) -> usize {
        self.shape[0]
    }

    pub fn cols(&self) -> usize {
        if self.shape.len() > 1 {
            self.shape[1..].iter().product()
        } else {
            1
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn fill(&mut self, value: f64) {
        self.data.iter_mut().for_each(|v| *v = value);
    }
}

/// `out = W x` for a row-major `rows × cols` matrix.
pub fn matvec(w: &Tensor, x: &[f64], out: &mut [f64]) {
    let cols = w.cols();
    debug_assert_eq!(cols, x.len());
    debug_assert_eq!(w.rows(), out.len());
    for (o, row) in out.iter_mut().zip(w.data().chunks_exact(cols)) {
        *o = dot(row, x);
    }
}

/// `out += W x`.
pub fn matvec_acc(w: &Tensor, x: &[f64], out: &mut [f64]) {
    let cols = w.cols();
    debug_assert_eq!(cols, x.len());
    for (o, row) in out.iter_mut().zip(w.data().chunks_exact(cols)) {
        *o += dot(row, x);
    }
}

/// `dx += Wᵀ dy`.
pub fn matvec_t_acc(w: &Tensor, dy: &[f64], dx: &mut [f64]) {
    let cols = w.cols();
    debug_assert_eq!(cols, dx.len());
    for (&g, row) in dy.iter().zip(w.data().chunks_exact(cols)) {
        if g != 0.0 {
            for (d, &wv) in dx.iter_mut().zip(row) {
                *d += g * wv;
            }
        }
    }
}

/// `dw += scale · dy ⊗ x`.
pub fn outer_acc(dw: &mut Tensor, dy: &[f64], x: &[f64], scale: f64) {
    let cols = x.len();
    debug_assert_eq!(dw.cols(), cols);
    for (&g, row) in dy.iter().zip(dw.data_mut().chunks_exact_mut(cols)) {
        let g = g * scale;
        if g != 0.0 {
            for (d, &xv) in row.iter_mut().zip(x) {
                *d += g * xv;
            }
        }
    }
}

pub fn axpy(acc: &mut [f64], x: &[f64], scale: f64) {
    for (a, &v) in acc.iter_mut().zip(x) {
        *a += scale * v;
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn concat(a: &[f64], b: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(a.len() + b.len());
    out.extend_from_slice(a);
    out.extend_from_slice(b);
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + eˣ)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable `−ln softmax(logits)[label]`.
pub fn softmax_cross_entropy(logits: &[f64], label: usize) -> Result<f64> {
    if logits.len() < 2 {
        return Err(Error::InvalidConfig(format!(
            "cross-entropy needs at least 2 logits, got {}",
            logits.len()
        )));
    }
    if label >= logits.len() {
        return Err(Error::LabelOutOfRange {
            label,
            classes: logits.len(),
        });
    }
    Ok(log_sum_exp(logits) - logits[label])
}

/// Gradient of [`softmax_cross_entropy`] with respect to the logits:
/// `softmax(logits) − onehot(label)`.
pub fn softmax_cross_entropy_grad(logits: &[f64], label: usize) -> Vec<f64> {
    let mut p = softmax(logits);
    p[label] -= 1.0;
    p
}

pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    out
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    max + xs.iter().map(|&x| (x - max).exp()).sum::<f64>().ln()
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// splitmix64 finalizer, used to derive independent sub-seeds.
pub fn mix_seed(seed: u64, salt: u64) -> u64 {
    let mut z = seed
        .wrapping_add(salt.wrapping_mul(0x9E37_79B9_7F4A_7C15))
        .wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Serializable snapshot of an [`Rng`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    pub word_pos: u128,
}

/// Seeded, portable random source (ChaCha8).
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rng(ChaCha8Rng);

impl Rng {
    pub fn new(seed: u64) -> Self {
        Self(ChaCha8Rng::seed_from_u64(seed))
    }

    /// Independent generator for sub-stream `salt` of `seed`.
    pub fn derive(seed: u64, salt: u64) -> Self {
        Self::new(mix_seed(seed, salt))
    }

    pub fn normal(&mut self) -> f64 {
        self.0.sample(StandardNormal)
    }

    pub fn uniform(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.0.random::<f64>()
    }

    /// Uniform integer in `lo..=hi`.
    pub fn int_inclusive(&mut self, lo: usize, hi: usize) -> usize {
        self.0.random_range(lo..=hi)
    }

    pub fn next_u64(&mut self) -> u64 {
        self.0.next_u64()
    }

    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        use rand::seq::SliceRandom;
        items.shuffle(&mut self.0);
    }

    pub fn state(&self) -> RngState {
        RngState {
            seed: self.0.get_seed(),
            stream: self.0.get_stream(),
            word_pos: self.0.get_word_pos(),
        }
    }

    pub fn from_state(state: &RngState) -> Self {
        let mut inner = ChaCha8Rng::from_seed(state.seed);
        inner.set_stream(state.stream);
        inner.set_word_pos(state.word_pos);
        Self(inner)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_uniform_logits() {
        let ce = softmax_cross_entropy(&[0.3; 4], 2).unwrap();
        assert!((ce - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated() {
        let mut logits = vec![0.0; 5];
        logits[3] = 50.0;
        assert!(softmax_cross_entropy(&logits, 3).unwrap() < 1e-10);
    }

    #[test]
    fn cross_entropy_label_out_of_range() {
        assert!(matches!(
            softmax_cross_entropy(&[0.0, 1.0], 2),
            Err(Error::LabelOutOfRange {
                label: 2,
                classes: 2
            })
        ));
    }

    #[test]
    fn cross_entropy_matches_naive_formula() {
        // naive unshifted evaluation is safe at these magnitudes
        let mut rng = Rng::new(11);
        let logits: Vec<f64> = (0..6).map(|_| 3.0 * rng.normal()).collect();
        for label in 0..6 {
            let denom: f64 = logits.iter().map(|l| l.exp()).sum();
            let naive = -(logits[label].exp() / denom).ln();
            let got = softmax_cross_entropy(&logits, label).unwrap();
            assert!((got - naive).abs() < 1e-12, "{got} vs {naive}");
        }
    }

    #[test]
    fn cross_entropy_grad_matches_differences() {
        let logits = [0.4, -1.1, 2.0, 0.05];
        let g = softmax_cross_entropy_grad(&logits, 1);
        for k in 0..4 {
            let mut hi = logits;
            let mut lo = logits;
            hi[k] += 1e-6;
            lo[k] -= 1e-6;
            let fd = (softmax_cross_entropy(&hi, 1).unwrap()
                - softmax_cross_entropy(&lo, 1).unwrap())
                / 2e-6;
            assert!((fd - g[k]).abs() < 1e-8);
        }
    }

    #[test]
    fn softplus_is_stable() {
        assert!((softplus(0.0) - 2f64.ln()).abs() < 1e-15);
        assert_eq!(softplus(800.0), 800.0);
        assert!(softplus(-800.0) >= 0.0);
    }

    #[test]
    fn rng_state_round_trip() {
        let mut a = Rng::new(5);
        for _ in 0..17 {
            a.normal();
        }
        let mut b = Rng::from_state(&a.state());
        for _ in 0..10 {
            assert_eq!(a.normal().to_bits(), b.normal().to_bits());
        }
    }

    #[test]
    fn tensor_rejects_bad_shape() {
        assert!(Tensor::from_vec(&[2, 3], vec![0.0; 5]).is_err());
        assert!(Tensor::from_vec(&[0, 3], vec![]).is_err());
        assert_eq!(Tensor::from_vec(&[2, 3], vec![0.0; 6]).unwrap().cols(), 3);
    }
}
