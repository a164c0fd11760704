use std::f64::consts::PI;

use super::Rng;
use crate::error::{check_dim, Error, Result};

/// Smallest admissible standard deviation. Networks emit
/// `softplus(s) + SIGMA_FLOOR`.
pub const SIGMA_FLOOR: f64 = 1e-4;

/// Diagonal Gaussian `N(mean, diag(std²))`.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianParams {
    mean: Vec<f64>,
    std: Vec<f64>,
}

impl GaussianParams {
    pub fn new(mean: Vec<f64>, std: Vec<f64>) -> Result<Self> {
        check_dim("gaussian std", mean.len(), std.len())?;
        // the negated comparison also rejects NaN
        if let Some((index, &value)) = std.iter().enumerate().find(|(_, &s)| !(s >= SIGMA_FLOOR)) {
            return Err(Error::StdBelowFloor {
                index,
                value,
                floor: SIGMA_FLOOR,
            });
        }
        Ok(Self { mean, std })
    }

    pub fn standard(dim: usize) -> Self {
        Self {
            mean: vec![0.0; dim],
            std: vec![1.0; dim],
        }
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    pub fn std(&self) -> &[f64] {
        &self.std
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }
}

/// Closed-form `KL(q ‖ p)` between diagonal Gaussians.
pub fn gaussian_kl_diag(q: &GaussianParams, p: &GaussianParams) -> Result<f64> {
    check_dim("kl divergence", q.dim(), p.dim())?;
    let mut kl = 0.0;
    for d in 0..q.dim() {
        let (qm, qs, pm, ps) = (q.mean[d], q.std[d], p.mean[d], p.std[d]);
        let diff = qm - pm;
        kl += (ps / qs).ln() + (qs * qs + diff * diff) / (2.0 * ps * ps) - 0.5;
    }
    Ok(kl)
}

/// Partial derivatives of a scalar with respect to one Gaussian's mean and std.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianGrad {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

/// Gradients of [`gaussian_kl_diag`] with respect to `(q, p)`.
pub fn gaussian_kl_diag_grad(
    q: &GaussianParams,
    p: &GaussianParams,
) -> Result<(GaussianGrad, GaussianGrad)> {
    check_dim("kl divergence", q.dim(), p.dim())?;
    let n = q.dim();
    let mut gq = GaussianGrad {
        mean: vec![0.0; n],
        std: vec![0.0; n],
    };
    let mut gp = gq.clone();
    for d in 0..n {
        let (qm, qs, pm, ps) = (q.mean[d], q.std[d], p.mean[d], p.std[d]);
        let diff = qm - pm;
        let pv = ps * ps;
        gq.mean[d] = diff / pv;
        gp.mean[d] = -diff / pv;
        gq.std[d] = -1.0 / qs + qs / pv;
        gp.std[d] = 1.0 / ps - (qs * qs + diff * diff) / (pv * ps);
    }
    Ok((gq, gp))
}

/// Negative log-density of `x` under `g`.
pub fn gaussian_nll(x: &[f64], g: &GaussianParams) -> Result<f64> {
    check_dim("gaussian nll", g.dim(), x.len())?;
    let half_ln_2pi = 0.5 * (2.0 * PI).ln();
    let mut nll = 0.0;
    for d in 0..x.len() {
        let r = x[d] - g.mean[d];
        let s = g.std[d];
        nll += half_ln_2pi + s.ln() + r * r / (2.0 * s * s);
    }
    Ok(nll)
}

pub fn gaussian_nll_grad(x: &[f64], g: &GaussianParams) -> Result<GaussianGrad> {
    check_dim("gaussian nll", g.dim(), x.len())?;
    let mut out = GaussianGrad {
        mean: vec![0.0; x.len()],
        std: vec![0.0; x.len()],
    };
    for d in 0..x.len() {
        let r = x[d] - g.mean[d];
        let s = g.std[d];
        out.mean[d] = -r / (s * s);
        out.std[d] = 1.0 / s - r * r / (s * s * s);
    }
    Ok(out)
}

/// Draws `z = mean + std ⊙ ε`, returning `(z, ε)`. `∂z/∂mean = I` and
/// `∂z/∂std = diag(ε)`.
pub fn reparameterize(g: &GaussianParams, rng: &mut Rng) -> (Vec<f64>, Vec<f64>) {
    let eps: Vec<f64> = (0..g.dim()).map(|_| rng.normal()).collect();
    let z = g
        .mean
        .iter()
        .zip(&g.std)
        .zip(&eps)
        .map(|((m, s), e)| m + s * e)
        .collect();
    (z, eps)
}

/// Sample estimate of `KL(q ‖ p)` as the mean of `log q(z) − log p(z)`
/// over `samples` reparameterized draws from `q`.
pub fn gaussian_kl_monte_carlo(
    q: &GaussianParams,
    p: &GaussianParams,
    samples: usize,
    rng: &mut Rng,
) -> Result<f64> {
    check_dim("gaussian kl", q.dim(), p.dim())?;
    if samples == 0 {
        return Err(Error::InvalidConfig("need at least one sample".into()));
    }
    let mut total = 0.0;
    for _ in 0..samples {
        let (z, _) = reparameterize(q, rng);
        total += gaussian_nll(&z, p)? - gaussian_nll(&z, q)?;
    }
    Ok(total / samples as f64)
}
