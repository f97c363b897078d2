mod common;

use dvp_core::diffusion::{
    coefficients_from_alphas, forward_posterior, l_vlb, likelihood_term, q_sample,
    reverse_transition, sample_prior, Denoiser, DiffusionSchedule, EpsNet, VlbMode,
};
use dvp_core::distributions::{gaussian_log_prob, DiagGaussian};
use dvp_core::{Graph, ParamStore, Result, Rng, Tensor, Var};

struct FnDenoiser<F>(F);

impl<F> Denoiser<f64> for FnDenoiser<F>
where
    F: Fn(&mut Graph<f64>, Var, &[f64]) -> Result<Var>,
{
    fn predict(&self, g: &mut Graph<f64>, y: Var, t: &[f64]) -> Result<Var> {
        (self.0)(g, y, t)
    }
}

fn per_sample(g: &mut Graph<f64>, v: Vec<f64>) -> Var {
    let n = v.len();
    g.constant(Tensor::from_f64(&[n], &v).unwrap())
}

/// `eps_hat = (y - alpha_t u) / sigma_t` for a known `u`.
fn oracle_denoiser(schedule: DiffusionSchedule, u: Tensor<f64>) -> impl Denoiser<f64> {
    FnDenoiser(move |g: &mut Graph<f64>, y: Var, t: &[f64]| {
        let inv_s = per_sample(g, t.iter().map(|&t| 1.0 / schedule.sigma(t)).collect());
        let a_s = per_sample(g, t.iter().map(|&t| schedule.alpha(t) / schedule.sigma(t)).collect());
        let uv = g.constant(u.clone());
        let a = g.mul_samples(y, inv_s)?;
        let b = g.mul_samples(uv, a_s)?;
        g.sub(a, b)
    })
}

fn zero_denoiser() -> impl Denoiser<f64> {
    FnDenoiser(|g: &mut Graph<f64>, y: Var, _: &[f64]| Ok(g.scale(y, 0.0)))
}

fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

#[test]
fn schedule_is_variance_preserving_and_monotone() {
    let s = DiffusionSchedule::default();
    let mut prev = f64::INFINITY;
    for i in 0..=1000 {
        let t = i as f64 / 1000.0;
        assert!((s.alpha2(t) + s.sigma2(t) - 1.0).abs() < 1e-12);
        let snr = s.alpha2(t) / s.sigma2(t);
        assert!(snr < prev);
        prev = snr;
    }
}

#[test]
fn q_sample_high_snr_is_nearly_identity() {
    let s = DiffusionSchedule::new(50, 20.0, -6.0).unwrap();
    let u = Tensor::<f64>::from_f64(&[1, 4], &[0.3, -0.7, 1.0, 0.0]).unwrap();
    let (y, _) = q_sample(&s, &u, 0.0, &mut Rng::new(1)).unwrap();
    for (a, b) in y.data().iter().zip(u.data()) {
        assert!((a - b).abs() < 1e-3);
    }
}

#[test]
fn q_sample_of_zero_has_sigma_std() {
    let s = DiffusionSchedule::default();
    let t = 0.4;
    let u = Tensor::<f64>::zeros(&[100_000]);
    let (y, eps) = q_sample(&s, &u, t, &mut Rng::new(2)).unwrap();
    let (m, _) = mean_se(y.data());
    let var = y.data().iter().map(|v| (v - m).powi(2)).sum::<f64>() / 99_999.0;
    assert!((var.sqrt() / s.sigma(t) - 1.0).abs() < 0.01);
    assert!((y.data()[7] - s.sigma(t) * eps.data()[7]).abs() < 1e-15);
}

#[test]
fn posterior_degenerate_and_limit_cases() {
    let (cy, cu, var) = coefficients_from_alphas(0.3, 0.3);
    assert!((cy - 1.0).abs() < 1e-12 && cu.abs() < 1e-12 && var.abs() < 1e-12);
    let (cy, cu, var) = coefficients_from_alphas(1.0 - 1e-12, 0.4);
    assert!(cy.abs() < 1e-9 && (cu - 1.0).abs() < 1e-9 && var.abs() < 1e-9);
}

/// Condition the joint Gaussian of `(y_s, y_t)` given `u` on `y_t`.
fn bayes_oracle(a_s: f64, a_t: f64, u: f64, y_t: f64) -> (f64, f64) {
    let (vs, vt) = (1.0 - a_s * a_s, 1.0 - a_t * a_t);
    let cov = (a_t / a_s) * vs;
    (a_s * u + cov / vt * (y_t - a_t * u), vs - cov * cov / vt)
}

#[test]
fn posterior_hand_case_matches_bayes() {
    let (cy, cu, var) = coefficients_from_alphas(0.81, 0.25);
    let (m, v) = bayes_oracle(0.9, 0.5, 1.0, 0.3);
    assert!((cy * 0.3 + cu * 1.0 - m).abs() < 1e-12);
    assert!((var - v).abs() < 1e-12);
}

#[test]
fn posterior_matches_bayes_at_random_configurations() {
    let s = DiffusionSchedule::default();
    let mut rng = Rng::new(4);
    for _ in 0..100 {
        let a = rng.uniform();
        let b = rng.uniform();
        let (ts, tt) = if a < b { (a, b) } else { (b, a) };
        let u = 4.0 * rng.uniform() - 2.0;
        let y = 4.0 * rng.uniform() - 2.0;
        let post = forward_posterior(
            &s,
            &Tensor::<f64>::from_f64(&[1], &[y]).unwrap(),
            &Tensor::from_f64(&[1], &[u]).unwrap(),
            tt,
            ts,
        )
        .unwrap();
        let (m, v) = bayes_oracle(s.alpha(ts), s.alpha(tt), u, y);
        assert!((post.mean.data()[0] - m).abs() < 1e-10);
        assert!((post.var - v).abs() < 1e-10);
    }
}

#[test]
fn reverse_transition_with_perfect_denoiser() {
    let s = DiffusionSchedule::default();
    let mut rng = Rng::new(5);
    let u = rng.normal_tensor::<f64>(&[2, 1, 3, 3]);
    let (y, _) = q_sample(&s, &u, 0.6, &mut rng).unwrap();
    let rev = reverse_transition(&s, &y, 0.6, 0.5, &oracle_denoiser(s, u.clone())).unwrap();
    let fwd = forward_posterior(&s, &y, &u, 0.6, 0.5).unwrap();
    for (a, b) in rev.mean.data().iter().zip(fwd.mean.data()) {
        assert!((a - b).abs() < 1e-10);
    }
    assert_eq!(rev.var, fwd.var);
}

#[test]
fn reverse_transition_with_zero_denoiser() {
    let s = DiffusionSchedule::default();
    let y = Tensor::from_f64(&[1, 2], &[0.4, -1.2]).unwrap();
    let rev = reverse_transition(&s, &y, 0.3, 0.2, &zero_denoiser()).unwrap();
    let u_hat = y.map(|v| v / s.alpha(0.3));
    let fwd = forward_posterior(&s, &y, &u_hat, 0.3, 0.2).unwrap();
    for (a, b) in rev.mean.data().iter().zip(fwd.mean.data()) {
        assert!((a - b).abs() < 1e-14);
    }
    assert_eq!(rev.var, fwd.var);
}

#[test]
fn eps_net_preserves_shape() {
    let mut store = ParamStore::<f64>::new();
    let net = EpsNet::new(&mut store, "prior", 1, 16, 2, &mut Rng::new(0)).unwrap();
    let y = Rng::new(1).normal_tensor::<f64>(&[3, 1, 7, 7]);
    let s = DiffusionSchedule::default();
    let rev = reverse_transition(&s, &y, 0.5, 0.48, &net.bind(&store)).unwrap();
    assert_eq!(rev.mean.shape(), &[3, 1, 7, 7]);
}

#[test]
fn likelihood_term_mode_and_oracle() {
    let s = DiffusionSchedule::default();
    let (a0, var) = (s.alpha(0.0), s.sigma2(0.0) / s.alpha2(0.0));
    let y0 = Tensor::<f64>::from_f64(&[1, 3], &[0.2, -0.5, 0.9]).unwrap();
    let u = y0.map(|v| v / a0);
    let lp = likelihood_term(&s, &u, &y0).unwrap();
    let mode = -1.5 * (2.0 * std::f64::consts::PI * var).ln();
    assert!((lp[0] - mode).abs() < 1e-10);

    let mut rng = Rng::new(7);
    let u = rng.normal_tensor::<f64>(&[2, 5]);
    let y0 = rng.normal_tensor::<f64>(&[2, 5]);
    let lp = likelihood_term(&s, &u, &y0).unwrap();
    let mut g = Graph::<f64>::new();
    let mu = g.constant(y0.map(|v| v / a0));
    let lv = g.constant(Tensor::full(&[2, 5], var.ln()));
    let d = DiagGaussian::new(&mut g, mu, lv).unwrap();
    let x = g.constant(u);
    let want = gaussian_log_prob(&mut g, &d, x).unwrap();
    for (a, b) in lp.iter().zip(g.value(want).data()) {
        assert!((a - b).abs() < 1e-9);
    }
}

#[test]
fn perfect_denoiser_has_zero_step_loss() {
    let s = DiffusionSchedule::default();
    let u = Rng::new(8).normal_tensor::<f64>(&[3, 1, 2, 2]);
    let net = oracle_denoiser(s, u.clone());
    for mode in [VlbMode::Full, VlbMode::Stochastic] {
        let mut g = Graph::new();
        let uv = g.constant(u.clone());
        let terms = l_vlb(&mut g, &s, &net, uv, &mut Rng::new(9), mode).unwrap();
        assert!(g.value(terms.lt).data().iter().all(|v| v.abs() < 1e-12));
    }
}

#[test]
fn prior_matching_term_vanishes_at_zero() {
    let s = DiffusionSchedule::default();
    let mut g = Graph::new();
    let u = g.constant(Tensor::<f64>::zeros(&[1, 1, 7, 7]));
    let terms = l_vlb(&mut g, &s, &zero_denoiser(), u, &mut Rng::new(0), VlbMode::Stochastic).unwrap();
    assert!(g.value(terms.l1).data()[0].abs() < 1e-3);
}

#[test]
fn stochastic_step_estimator_is_unbiased() {
    let s = DiffusionSchedule::new(10, 7.0, -6.0).unwrap();
    let mut store = ParamStore::<f64>::new();
    let net = EpsNet::new(&mut store, "prior", 1, 8, 1, &mut Rng::new(1)).unwrap();
    let mut rng = Rng::new(2);
    for name in ["prior.output.weight", "prior.output.bias"] {
        let id = store.id(name).unwrap();
        let shape = store.get(id).tensor.shape().to_vec();
        let t = rng.normal_tensor::<f64>(&shape).map(|v| 0.3 * v);
        store.set(name, t).unwrap();
    }
    let base = Rng::new(3).normal_tensor::<f64>(&[1, 1, 3, 3]);
    let n = 10_000;
    let mut rep = Vec::with_capacity(n * 9);
    for _ in 0..n {
        rep.extend_from_slice(base.data());
    }
    let u = Tensor::new(vec![n, 1, 3, 3], rep).unwrap();
    let run = |mode, seed| {
        let mut g = Graph::new();
        let uv = g.constant(u.clone());
        let terms = l_vlb(&mut g, &s, &net.bind(&store), uv, &mut Rng::new(seed), mode).unwrap();
        mean_se(g.value(terms.lt).data())
    };
    let (ms, ses) = run(VlbMode::Stochastic, 4);
    let (mf, sef) = run(VlbMode::Full, 5);
    let se = (ses * ses + sef * sef).sqrt();
    assert!((ms - mf).abs() < 3.0 * se, "stochastic {ms} ± {ses}, full {mf} ± {sef}");
}

#[test]
fn gaussian_data_bound_converges_to_entropy() {
    let (mu, sd) = (0.5, 0.5);
    let s = DiffusionSchedule::new(1000, 7.0, -6.0).unwrap();
    let net = FnDenoiser(move |g: &mut Graph<f64>, y: Var, t: &[f64]| {
        // E[eps | y_t] when u ~ N(mu, sd^2).
        let scale: Vec<f64> = t
            .iter()
            .map(|&t| s.sigma(t) / (s.alpha2(t) * sd * sd + s.sigma2(t)))
            .collect();
        let offset: Vec<f64> = t.iter().map(|&t| s.alpha(t) * mu).collect();
        let n = t.len();
        let off = g.constant(Tensor::from_f64(&[n, 1], &offset).unwrap());
        let c = per_sample(g, scale);
        let centred = g.sub(y, off)?;
        g.mul_samples(centred, c)
    });
    let mut rng = Rng::new(11);
    let mut bounds = Vec::new();
    for _ in 0..10 {
        let u = rng.normal_tensor::<f64>(&[2000, 1]).map(|v| mu + sd * v);
        let mut g = Graph::new();
        let uv = g.constant(u);
        let terms = l_vlb(&mut g, &s, &net, uv, &mut rng, VlbMode::Full).unwrap();
        let vlb = terms.vlb(&mut g).unwrap();
        bounds.extend(g.value(vlb).data().iter().map(|v| -v));
    }
    let (m, se) = mean_se(&bounds);
    let entropy = 0.5 * (2.0 * std::f64::consts::PI * std::f64::consts::E * sd * sd).ln();
    assert!(se < 0.01, "standard error {se}");
    assert!((m - entropy).abs() < 0.05, "bound {m} ± {se}, entropy {entropy}");
}

#[test]
fn untrained_prior_samples_are_centred() {
    let s = DiffusionSchedule::default();
    let draws = sample_prior(&s, &zero_denoiser(), &[10_000, 1], &mut Rng::new(12)).unwrap();
    let (m, se) = mean_se(draws.data());
    assert!(m.abs() < 3.0 * se);
}

#[test]
fn prior_sampling_is_deterministic_with_shape() {
    let s = DiffusionSchedule::default();
    let mut store = ParamStore::<f64>::new();
    let net = EpsNet::new(&mut store, "prior", 1, 16, 2, &mut Rng::new(0)).unwrap();
    let a = sample_prior(&s, &net.bind(&store), &[2, 1, 7, 7], &mut Rng::new(3)).unwrap();
    let b = sample_prior(&s, &net.bind(&store), &[2, 1, 7, 7], &mut Rng::new(3)).unwrap();
    assert_eq!(a.shape(), &[2, 1, 7, 7]);
    assert_eq!(a, b);
}
