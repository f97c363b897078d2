//! Diagonal Gaussians and the Bernoulli pixel likelihood, as graph nodes.
//!
//! Every density returned here is summed over all non-batch axes, giving one
//! value per datapoint.

use std::f64::consts::{E, PI};

use crate::error::{DvpError, Result};
use crate::rng::Rng;
use crate::tensor::{Graph, Real, Tensor, Var};

/// Bounds applied to every stored log-variance.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

const LN_2PI: f64 = 1.837_877_066_409_345_5;

/// Gaussian with independent coordinates.
#[derive(Clone, Copy, Debug)]
pub struct DiagGaussian {
    pub mu: Var,
    /// Clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub logvar: Var,
}

impl DiagGaussian {
    pub fn new<T: Real>(g: &mut Graph<T>, mu: Var, logvar: Var) -> Result<Self> {
        if g.shape(mu) != g.shape(logvar) {
            return Err(DvpError::dim(
                "diag gaussian",
                format!("mu {:?} vs logvar {:?}", g.shape(mu), g.shape(logvar)),
            ));
        }
        let logvar = g.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX);
        Ok(Self { mu, logvar })
    }

    /// Split a `[n, 2c, h, w]` parameter map into means (first `c`
    /// channels) and log-variances.
    pub fn from_channels<T: Real>(g: &mut Graph<T>, params: Var) -> Result<Self> {
        let c2 = *g
            .shape(params)
            .get(1)
            .ok_or_else(|| DvpError::dim("diag gaussian", "expected NCHW parameters"))?;
        if c2 % 2 != 0 {
            return Err(DvpError::dim("diag gaussian", format!("odd channel count {c2}")));
        }
        let mu = g.slice_channels(params, 0, c2 / 2)?;
        let logvar = g.slice_channels(params, c2 / 2, c2 / 2)?;
        Self::new(g, mu, logvar)
    }

    pub fn shape<'g, T: Real>(&self, g: &'g Graph<T>) -> &'g [usize] {
        g.shape(self.mu)
    }
}

/// `mu + temperature * exp(logvar / 2) * eps`.
pub fn rsample<T: Real>(
    g: &mut Graph<T>,
    dist: &DiagGaussian,
    temperature: f64,
    rng: &mut Rng,
) -> Result<Var> {
    if temperature < 0.0 || !temperature.is_finite() {
        return Err(DvpError::usage(format!("temperature {temperature}")));
    }
    if temperature == 0.0 {
        return Ok(dist.mu);
    }
    let eps = rng.normal_tensor::<T>(dist.shape(g));
    let eps = g.constant(eps);
    let half = g.scale(dist.logvar, 0.5);
    let std = g.exp(half);
    let noise = g.mul(std, eps)?;
    let noise = g.scale(noise, temperature);
    g.add(dist.mu, noise)
}

/// Per-datapoint `KL(q || p)`.
pub fn kl_diag_gaussian<T: Real>(g: &mut Graph<T>, q: &DiagGaussian, p: &DiagGaussian) -> Result<Var> {
    if q.shape(g) != p.shape(g) {
        return Err(DvpError::dim(
            "kl",
            format!("{:?} vs {:?}", q.shape(g), p.shape(g)),
        ));
    }
    let dlv = g.sub(q.logvar, p.logvar)?;
    let ratio = g.exp(dlv);
    let dmu = g.sub(q.mu, p.mu)?;
    let dmu2 = g.square(dmu);
    let neg_lp = g.neg(p.logvar);
    let inv_p = g.exp(neg_lp);
    let maha = g.mul(dmu2, inv_p)?;
    let a = g.add(ratio, maha)?;
    let b = g.sub(a, dlv)?;
    let b = g.add_const(b, -1.0);
    let b = g.scale(b, 0.5);
    g.sum_per_sample(b)
}

/// Per-datapoint `log N(x | mu, exp(logvar))`.
pub fn gaussian_log_prob<T: Real>(g: &mut Graph<T>, dist: &DiagGaussian, x: Var) -> Result<Var> {
    let d = g.sub(x, dist.mu)?;
    let d2 = g.square(d);
    let neg_lv = g.neg(dist.logvar);
    let inv = g.exp(neg_lv);
    let maha = g.mul(d2, inv)?;
    let t = g.add(maha, dist.logvar)?;
    let t = g.add_const(t, LN_2PI);
    let t = g.scale(t, -0.5);
    g.sum_per_sample(t)
}

/// Entropy of an isotropic Gaussian in `p` dimensions with standard
/// deviation `exp(log_sigma)`.
pub fn gaussian_entropy(log_sigma: f64, p: usize) -> f64 {
    0.5 * p as f64 * (2.0 * PI * E).ln() + p as f64 * log_sigma
}

/// Graph form of [`gaussian_entropy`]; `log_sigma` has one element.
pub fn gaussian_entropy_var<T: Real>(g: &mut Graph<T>, log_sigma: Var, p: usize) -> Var {
    let s = g.sum(log_sigma);
    let s = g.scale(s, p as f64);
    g.add_const(s, 0.5 * p as f64 * (2.0 * PI * E).ln())
}

/// Independent Bernoulli pixels parameterized by logits.
#[derive(Clone, Copy, Debug)]
pub struct BernoulliLikelihood {
    pub logits: Var,
}

impl BernoulliLikelihood {
    /// Per-pixel success probabilities.
    pub fn mean<T: Real>(&self, g: &Graph<T>) -> Tensor<T> {
        g.value(self.logits).map(|l| {
            let l = l.as_f64();
            let p = if l >= 0.0 {
                1.0 / (1.0 + (-l).exp())
            } else {
                let e = l.exp();
                e / (1.0 + e)
            };
            T::from_f64(p)
        })
    }
}

/// Per-datapoint `sum x log sigmoid(l) + (1 - x) log(1 - sigmoid(l))`,
/// evaluated as `x l - softplus(l)`.
pub fn bernoulli_log_prob<T: Real>(
    g: &mut Graph<T>,
    lik: &BernoulliLikelihood,
    x: &Tensor<T>,
) -> Result<Var> {
    if x.shape() != g.shape(lik.logits) {
        return Err(DvpError::dim(
            "bernoulli",
            format!("x {:?} vs logits {:?}", x.shape(), g.shape(lik.logits)),
        ));
    }
    if x.data().iter().any(|&v| v != T::zero() && v != T::one()) {
        return Err(DvpError::usage("bernoulli targets must be 0 or 1"));
    }
    let xv = g.constant(x.clone());
    let xl = g.mul(xv, lik.logits)?;
    let sp = g.softplus(lik.logits);
    let lp = g.sub(xl, sp)?;
    g.sum_per_sample(lp)
}
