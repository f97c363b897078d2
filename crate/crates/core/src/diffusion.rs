//! Variational diffusion prior over pseudoinputs.
//!
//! The forward process is variance preserving, `y_t = alpha_t u + sigma_t eps`
//! with `alpha_t^2 = sigmoid(logsnr(t))`, and `logsnr` falls linearly from
//! `logsnr_max` at `t = 0` to `logsnr_min` at `t = 1`. The reverse process is
//! parameterized by a noise predictor and uses the forward posterior
//! variance.

use std::f64::consts::PI;

use crate::error::{DvpError, Result};
use crate::nn::{Conv, ResBlock};
use crate::rng::Rng;
use crate::tensor::{Graph, ParamId, ParamStore, Real, Tensor, Var};

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiffusionSchedule {
    pub steps: usize,
    pub logsnr_max: f64,
    pub logsnr_min: f64,
}

impl Default for DiffusionSchedule {
    fn default() -> Self {
        Self {
            steps: 50,
            logsnr_max: 7.0,
            logsnr_min: -6.0,
        }
    }
}

impl DiffusionSchedule {
    pub fn new(steps: usize, logsnr_max: f64, logsnr_min: f64) -> Result<Self> {
        if steps == 0 {
            return Err(DvpError::Config("diffusion steps must be positive".into()));
        }
        if !(logsnr_max > logsnr_min) || !logsnr_max.is_finite() || !logsnr_min.is_finite() {
            return Err(DvpError::Config(format!(
                "log SNR range [{logsnr_min}, {logsnr_max}] is empty"
            )));
        }
        Ok(Self {
            steps,
            logsnr_max,
            logsnr_min,
        })
    }

    fn check(t: f64) -> Result<()> {
        if (0.0..=1.0).contains(&t) {
            Ok(())
        } else {
            Err(DvpError::usage(format!("diffusion time {t} outside [0, 1]")))
        }
    }

    pub fn logsnr(&self, t: f64) -> f64 {
        self.logsnr_max + (self.logsnr_min - self.logsnr_max) * t
    }

    pub fn alpha2(&self, t: f64) -> f64 {
        sigmoid(self.logsnr(t))
    }

    pub fn sigma2(&self, t: f64) -> f64 {
        sigmoid(-self.logsnr(t))
    }

    pub fn alpha(&self, t: f64) -> f64 {
        self.alpha2(t).sqrt()
    }

    pub fn sigma(&self, t: f64) -> f64 {
        self.sigma2(t).sqrt()
    }

    /// Time of grid point `i` in `0..=steps`.
    pub fn time(&self, i: usize) -> f64 {
        i as f64 / self.steps as f64
    }
}

/// Gaussian with a shared scalar variance, used for the diffusion
/// transitions. Unlike [`crate::distributions::DiagGaussian`] the variance
/// is not clamped: tiny step variances are legitimate here.
#[derive(Clone, Debug, PartialEq)]
pub struct IsoGaussian<T> {
    pub mean: Tensor<T>,
    pub var: f64,
}

/// `y_t = alpha_t u + sigma_t eps`; returns `(y_t, eps)`.
pub fn q_sample<T: Real>(
    schedule: &DiffusionSchedule,
    u: &Tensor<T>,
    t: f64,
    rng: &mut Rng,
) -> Result<(Tensor<T>, Tensor<T>)> {
    DiffusionSchedule::check(t)?;
    let eps = rng.normal_tensor::<T>(u.shape());
    let (a, s) = (T::from_f64(schedule.alpha(t)), T::from_f64(schedule.sigma(t)));
    let data = u.data().iter().zip(eps.data()).map(|(&x, &e)| a * x + s * e).collect();
    Ok((Tensor::new(u.shape().to_vec(), data)?, eps))
}

/// Coefficients `(c_y, c_u, var)` of `q(y_s | y_t, u) = N(c_y y_t + c_u u, var)`.
pub fn posterior_coefficients(schedule: &DiffusionSchedule, t: f64, s: f64) -> Result<(f64, f64, f64)> {
    DiffusionSchedule::check(t)?;
    DiffusionSchedule::check(s)?;
    if s >= t {
        return Err(DvpError::usage(format!("posterior needs s < t, got s={s}, t={t}")));
    }
    let (a2s, a2t) = (schedule.alpha2(s), schedule.alpha2(t));
    Ok(coefficients_from_alphas(a2s, a2t))
}

/// [`posterior_coefficients`] in terms of the squared signal levels.
pub fn coefficients_from_alphas(a2s: f64, a2t: f64) -> (f64, f64, f64) {
    let (a_s, a_t) = (a2s.sqrt(), a2t.sqrt());
    let c_y = a_t * (1.0 - a2s) / (a_s * (1.0 - a2t));
    let c_u = (a2s - a2t) / ((1.0 - a2t) * a_s);
    let var = ((a2s - a2t) / a2s) * ((1.0 - a2s) / (1.0 - a2t));
    (c_y, c_u, var)
}

fn affine<T: Real>(a: &Tensor<T>, ca: f64, b: &Tensor<T>, cb: f64) -> Result<Tensor<T>> {
    if a.shape() != b.shape() {
        return Err(DvpError::dim(
            "diffusion",
            format!("{:?} vs {:?}", a.shape(), b.shape()),
        ));
    }
    let (ca, cb) = (T::from_f64(ca), T::from_f64(cb));
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| ca * x + cb * y).collect();
    Tensor::new(a.shape().to_vec(), data)
}

/// `q(y_s | y_t, u)` for `s < t`.
pub fn forward_posterior<T: Real>(
    schedule: &DiffusionSchedule,
    y_t: &Tensor<T>,
    u: &Tensor<T>,
    t: f64,
    s: f64,
) -> Result<IsoGaussian<T>> {
    let (c_y, c_u, var) = posterior_coefficients(schedule, t, s)?;
    Ok(IsoGaussian {
        mean: affine(y_t, c_y, u, c_u)?,
        var,
    })
}

/// Noise predictor `eps_hat(y_t, t)`; `t` holds one time per sample.
pub trait Denoiser<T: Real> {
    fn predict(&self, g: &mut Graph<T>, y: Var, t: &[f64]) -> Result<Var>;
}

/// Reverse step `p(y_s | y_t)`: the forward posterior evaluated at the
/// denoised estimate of `u`.
pub fn reverse_transition<T: Real, D: Denoiser<T>>(
    schedule: &DiffusionSchedule,
    y_t: &Tensor<T>,
    t: f64,
    s: f64,
    net: &D,
) -> Result<IsoGaussian<T>> {
    posterior_coefficients(schedule, t, s)?;
    let n = *y_t.shape().first().ok_or_else(|| DvpError::dim("reverse", "scalar y"))?;
    let mut g = Graph::new();
    let y = g.constant(y_t.clone());
    let eps = net.predict(&mut g, y, &vec![t; n])?;
    let eps = g.value(eps).clone();
    let u_hat = affine(y_t, 1.0 / schedule.alpha(t), &eps, -schedule.sigma(t) / schedule.alpha(t))?;
    forward_posterior(schedule, y_t, &u_hat, t, s)
}

/// `log N(u | y_0 / alpha_0, sigma_0^2 / alpha_0^2 I)` per sample.
pub fn likelihood_term<T: Real>(schedule: &DiffusionSchedule, u: &Tensor<T>, y0: &Tensor<T>) -> Result<Vec<f64>> {
    let n = *u.shape().first().ok_or_else(|| DvpError::dim("likelihood", "scalar u"))?;
    let diff = affine(u, 1.0, y0, -1.0 / schedule.alpha(0.0))?;
    let var = schedule.sigma2(0.0) / schedule.alpha2(0.0);
    let p = u.len() / n.max(1);
    let norm = -0.5 * p as f64 * (2.0 * PI * var).ln();
    Ok(diff
        .data()
        .chunks(p)
        .map(|c| norm - 0.5 * c.iter().map(|v| v.as_f64().powi(2)).sum::<f64>() / var)
        .collect())
}

/// How the step sum of the diffusion bound is estimated.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VlbMode {
    /// All `T` summands, each from one noise draw.
    Full,
    /// One uniformly drawn step per sample, scaled by `T`.
    Stochastic,
}

/// Per-sample terms of `L_vlb = l0 - l1 - lt`, each shaped `[n]`.
#[derive(Clone, Copy, Debug)]
pub struct DiffusionTerms {
    pub l0: Var,
    pub l1: Var,
    pub lt: Var,
}

impl DiffusionTerms {
    pub fn vlb<T: Real>(&self, g: &mut Graph<T>) -> Result<Var> {
        let a = g.sub(self.l0, self.l1)?;
        g.sub(a, self.lt)
    }
}

/// `y = alpha * u + sigma * eps` with per-sample coefficients.
fn noisy<T: Real>(g: &mut Graph<T>, u: Var, alpha: &[f64], sigma: &[f64], eps: &Tensor<T>) -> Result<Var> {
    let n = alpha.len();
    let a = g.constant(Tensor::from_f64(&[n], alpha)?);
    let su = g.mul_samples(u, a)?;
    let s = g.constant(Tensor::from_f64(&[n], sigma)?);
    let e = g.constant(eps.clone());
    let se = g.mul_samples(e, s)?;
    g.add(su, se)
}

/// Diffusion bound terms for a batch of pseudoinputs `u: [n, ...]`.
pub fn l_vlb<T: Real, D: Denoiser<T>>(
    g: &mut Graph<T>,
    schedule: &DiffusionSchedule,
    net: &D,
    u: Var,
    rng: &mut Rng,
    mode: VlbMode,
) -> Result<DiffusionTerms> {
    let shape = g.shape(u).to_vec();
    let n = *shape.first().ok_or_else(|| DvpError::dim("l_vlb", "scalar u"))?;
    let p = g.value(u).len() / n.max(1);

    // L0: log r(u | y_0) at y_0 ~ q(y_0 | u).
    let (a0, s0) = (schedule.alpha(0.0), schedule.sigma(0.0));
    let eps0 = rng.normal_tensor::<T>(&shape);
    let y0 = noisy(g, u, &vec![a0; n], &vec![s0; n], &eps0)?;
    let recon = g.scale(y0, 1.0 / a0);
    let diff = g.sub(u, recon)?;
    let diff2 = g.square(diff);
    let sq = g.sum_per_sample(diff2)?;
    let var0 = schedule.sigma2(0.0) / schedule.alpha2(0.0);
    let l0 = g.scale(sq, -0.5 / var0);
    let l0 = g.add_const(l0, -0.5 * p as f64 * (2.0 * PI * var0).ln());

    // L1: KL(q(y_1 | u) || N(0, I)).
    let (a2, s2) = (schedule.alpha2(1.0), schedule.sigma2(1.0));
    let u2 = g.square(u);
    let u2 = g.sum_per_sample(u2)?;
    let l1 = g.scale(u2, 0.5 * a2);
    let l1 = g.add_const(l1, 0.5 * p as f64 * (s2 - 1.0 - s2.ln()));

    // L_T: sum of step KLs, 0.5 * (SNR_s / SNR_t - 1) * |eps_hat - eps|^2.
    let steps: Vec<Vec<usize>> = match mode {
        VlbMode::Full => (1..=schedule.steps).map(|i| vec![i; n]).collect(),
        VlbMode::Stochastic => vec![(0..n).map(|_| 1 + rng.below(schedule.steps)).collect()],
    };
    let weight = match mode {
        VlbMode::Full => 1.0,
        VlbMode::Stochastic => schedule.steps as f64,
    };
    let mut lt: Option<Var> = None;
    for idx in steps {
        let t: Vec<f64> = idx.iter().map(|&i| schedule.time(i)).collect();
        let coef: Vec<f64> = idx
            .iter()
            .map(|&i| {
                let d = schedule.logsnr(schedule.time(i - 1)) - schedule.logsnr(schedule.time(i));
                0.5 * weight * d.exp_m1()
            })
            .collect();
        let alpha: Vec<f64> = t.iter().map(|&t| schedule.alpha(t)).collect();
        let sigma: Vec<f64> = t.iter().map(|&t| schedule.sigma(t)).collect();
        let eps = rng.normal_tensor::<T>(&shape);
        let y = noisy(g, u, &alpha, &sigma, &eps)?;
        let eps_hat = net.predict(g, y, &t)?;
        let e = g.constant(eps);
        let d = g.sub(eps_hat, e)?;
        let d2 = g.square(d);
        let d2 = g.sum_per_sample(d2)?;
        let c = g.constant(Tensor::from_f64(&[n], &coef)?);
        let term = g.mul(d2, c)?;
        lt = Some(match lt {
            Some(acc) => g.add(acc, term)?,
            None => term,
        });
    }
    let lt = lt.expect("at least one diffusion step");
    Ok(DiffusionTerms { l0, l1, lt })
}

/// Ancestral sampling: `y_1 ~ N(0, I)`, reverse steps down the time grid,
/// then `u = y_0 / alpha_0`.
pub fn sample_prior<T: Real, D: Denoiser<T>>(
    schedule: &DiffusionSchedule,
    net: &D,
    shape: &[usize],
    rng: &mut Rng,
) -> Result<Tensor<T>> {
    let mut y = rng.normal_tensor::<T>(shape);
    for i in (1..=schedule.steps).rev() {
        let (t, s) = (schedule.time(i), schedule.time(i - 1));
        let step = reverse_transition(schedule, &y, t, s, net)?;
        let z = rng.normal_tensor::<T>(shape);
        y = affine(&step.mean, 1.0, &z, step.var.sqrt())?;
    }
    Ok(y.map(|v| v * T::from_f64(1.0 / schedule.alpha(0.0))))
}

/// Sinusoidal features of `t` in `[0, 1]`, `[n, dim]`.
pub fn time_embedding<T: Real>(t: &[f64], dim: usize) -> Tensor<T> {
    let half = dim / 2;
    let mut data = vec![T::zero(); t.len() * dim];
    for (row, &tv) in t.iter().enumerate() {
        for k in 0..half {
            let freq = (-(10_000f64).ln() * k as f64 / half as f64).exp();
            let angle = 1000.0 * tv * freq;
            data[row * dim + k] = T::from_f64(angle.sin());
            data[row * dim + half + k] = T::from_f64(angle.cos());
        }
    }
    Tensor::from_parts(vec![t.len(), dim], data)
}

/// Small residual noise predictor over `[n, c, d, d]` pseudoinputs.
#[derive(Clone, Debug)]
pub struct EpsNet {
    input: Conv,
    blocks: Vec<(ResBlock, ParamId, ParamId)>,
    output: Conv,
    width: usize,
}

impl EpsNet {
    pub fn new<T: Real>(
        store: &mut ParamStore<T>,
        prefix: &str,
        channels: usize,
        width: usize,
        blocks: usize,
        rng: &mut Rng,
    ) -> Result<Self> {
        let input = Conv::new(store, &format!("{prefix}.input"), channels, width, 3, 1.0, rng)?;
        let mut bs = Vec::with_capacity(blocks);
        for b in 0..blocks {
            let name = format!("{prefix}.block{b}");
            let rb = ResBlock::new(store, &name, width, width, rng)?;
            let tw = store.add_normal(format!("{name}.time.weight"), &[width, width], width, 1.0, rng)?;
            let tb = store.add_zeros(format!("{name}.time.bias"), &[width])?;
            bs.push((rb, tw, tb));
        }
        let output = Conv::zeros(store, &format!("{prefix}.output"), width, channels, 3)?;
        Ok(Self {
            input,
            blocks: bs,
            output,
            width,
        })
    }

    pub fn bind<'a, T: Real>(&'a self, store: &'a ParamStore<T>) -> BoundEpsNet<'a, T> {
        BoundEpsNet { net: self, store }
    }
}

/// An [`EpsNet`] paired with the store holding its weights.
pub struct BoundEpsNet<'a, T> {
    net: &'a EpsNet,
    store: &'a ParamStore<T>,
}

impl<T: Real> Denoiser<T> for BoundEpsNet<'_, T> {
    fn predict(&self, g: &mut Graph<T>, y: Var, t: &[f64]) -> Result<Var> {
        let (net, store) = (self.net, self.store);
        let emb = g.constant(time_embedding::<T>(t, net.width));
        let mut h = net.input.forward(g, store, y)?;
        for (block, tw, tb) in &net.blocks {
            let w = g.param(store, *tw);
            let b = g.param(store, *tb);
            let e = g.matmul(emb, w)?;
            let e = g.add_channel_bias(e, b)?;
            h = block.forward(g, store, h, Some(e))?;
        }
        let h = g.silu(h);
        net.output.forward(g, store, h)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_endpoints() {
        let s = DiffusionSchedule::default();
        assert_eq!(s.logsnr(0.0), 7.0);
        assert_eq!(s.logsnr(1.0), -6.0);
        assert!(s.alpha2(0.5) > s.alpha2(0.6));
    }

    #[test]
    fn out_of_range_time() {
        let s = DiffusionSchedule::default();
        let u = Tensor::<f64>::zeros(&[1, 1]);
        assert!(q_sample(&s, &u, 1.5, &mut Rng::new(0)).is_err());
        assert!(posterior_coefficients(&s, 0.3, 0.3).is_err());
    }
}
