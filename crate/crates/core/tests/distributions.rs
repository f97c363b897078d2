mod common;

use common::{fd_rel_error, uniform};
use dvp_core::distributions::{
    bernoulli_log_prob, gaussian_entropy, gaussian_entropy_var, gaussian_log_prob,
    kl_diag_gaussian, rsample, BernoulliLikelihood, DiagGaussian,
};
use dvp_core::{DvpError, Graph, Rng, Tensor};

fn gaussian(g: &mut Graph<f64>, mu: &[f64], lv: &[f64]) -> DiagGaussian {
    let n = mu.len();
    let m = g.leaf(Tensor::from_f64(&[1, n], mu).unwrap());
    let l = g.leaf(Tensor::from_f64(&[1, n], lv).unwrap());
    DiagGaussian::new(g, m, l).unwrap()
}

fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let v = xs.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, (v / n).sqrt())
}

fn naive_log_normal(x: f64, mu: f64, lv: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI).ln() + lv + (x - mu).powi(2) / lv.exp())
}

#[test]
fn rsample_unit_variance() {
    let n = 100_000;
    let mut g = Graph::<f64>::new();
    let mu = g.constant(Tensor::zeros(&[n, 1]));
    let lv = g.constant(Tensor::zeros(&[n, 1]));
    let d = DiagGaussian::new(&mut g, mu, lv).unwrap();
    let z = rsample(&mut g, &d, 1.0, &mut Rng::new(3)).unwrap();
    let v = g.value(z).data();
    let m = v.iter().sum::<f64>() / n as f64;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n as f64 - 1.0);
    assert!((var - 1.0).abs() < 0.02, "variance {var}");
}

#[test]
fn rsample_is_seed_deterministic() {
    let draw = |seed| {
        let mut g = Graph::<f64>::new();
        let d = gaussian(&mut g, &[0.1, 0.2, 0.3], &[0.0, -1.0, 1.0]);
        let z = rsample(&mut g, &d, 1.0, &mut Rng::new(seed)).unwrap();
        g.value(z).clone()
    };
    assert_eq!(draw(9), draw(9));
    assert_ne!(draw(9), draw(10));
}

#[test]
fn kl_of_identical_is_zero() {
    let mut g = Graph::<f64>::new();
    let q = gaussian(&mut g, &[0.4, -1.0], &[0.3, -0.7]);
    let kl = kl_diag_gaussian(&mut g, &q, &q).unwrap();
    assert!(g.value(kl).data()[0].abs() < 1e-15);
}

#[test]
fn kl_unit_shift_is_half() {
    let mut g = Graph::<f64>::new();
    let q = gaussian(&mut g, &[1.0], &[0.0]);
    let p = gaussian(&mut g, &[0.0], &[0.0]);
    let kl = kl_diag_gaussian(&mut g, &q, &p).unwrap();
    assert!((g.value(kl).data()[0] - 0.5).abs() < 1e-15);
}

#[test]
fn kl_shape_mismatch() {
    let mut g = Graph::<f64>::new();
    let q = gaussian(&mut g, &[1.0, 2.0], &[0.0, 0.0]);
    let p = gaussian(&mut g, &[0.0], &[0.0]);
    assert!(matches!(
        kl_diag_gaussian(&mut g, &q, &p),
        Err(DvpError::Dimension { .. })
    ));
}

#[test]
fn kl_matches_monte_carlo() {
    let mut rng = Rng::new(21);
    let mq: Vec<f64> = (0..4).map(|_| 2.0 * rng.uniform() - 1.0).collect();
    let lq: Vec<f64> = (0..4).map(|_| 2.0 * rng.uniform() - 1.0).collect();
    let mp: Vec<f64> = (0..4).map(|_| 2.0 * rng.uniform() - 1.0).collect();
    let lp: Vec<f64> = (0..4).map(|_| 2.0 * rng.uniform() - 1.0).collect();
    let mut g = Graph::<f64>::new();
    let q = gaussian(&mut g, &mq, &lq);
    let p = gaussian(&mut g, &mp, &lp);
    let kl = kl_diag_gaussian(&mut g, &q, &p).unwrap();
    let analytic = g.value(kl).data()[0];

    let draws: Vec<f64> = (0..1_000_000)
        .map(|_| {
            (0..4)
                .map(|i| {
                    let z = mq[i] + (0.5 * lq[i]).exp() * rng.normal();
                    naive_log_normal(z, mq[i], lq[i]) - naive_log_normal(z, mp[i], lp[i])
                })
                .sum()
        })
        .collect();
    let (m, se) = mean_and_se(&draws);
    assert!((m - analytic).abs() < 3.0 * se, "mc {m} ± {se}, analytic {analytic}");
}

#[test]
fn kl_nonnegative_on_random_draws() {
    let n = 10_000;
    let mut rng = Rng::new(5);
    let mut g = Graph::<f64>::new();
    let mut leaf = |g: &mut Graph<f64>| g.constant(uniform(&mut rng, &[n, 3], -4.0, 4.0));
    let (a, b, c, d) = (leaf(&mut g), leaf(&mut g), leaf(&mut g), leaf(&mut g));
    let q = DiagGaussian::new(&mut g, a, b).unwrap();
    let p = DiagGaussian::new(&mut g, c, d).unwrap();
    let kl = kl_diag_gaussian(&mut g, &q, &p).unwrap();
    assert!(g.value(kl).data().iter().all(|&v| v >= 0.0));
}

#[test]
fn kl_gradient_matches_finite_differences() {
    let mut rng = Rng::new(6);
    let inputs: Vec<Tensor<f64>> = (0..4).map(|_| uniform(&mut rng, &[2, 3], -2.0, 2.0)).collect();
    let err = fd_rel_error(&inputs, 1e-4, |g, v| {
        let q = DiagGaussian::new(g, v[0], v[1]).unwrap();
        let p = DiagGaussian::new(g, v[2], v[3]).unwrap();
        let kl = kl_diag_gaussian(g, &q, &p).unwrap();
        g.sum(kl)
    });
    assert!(err < 1e-4, "rel err {err}");
}

#[test]
fn log_prob_matches_naive() {
    let mut g = Graph::<f64>::new();
    let d = gaussian(&mut g, &[0.5, -0.3], &[0.2, -1.1]);
    let x = g.constant(Tensor::from_f64(&[1, 2], &[1.0, 0.4]).unwrap());
    let lp = gaussian_log_prob(&mut g, &d, x).unwrap();
    let want = naive_log_normal(1.0, 0.5, 0.2) + naive_log_normal(0.4, -0.3, -1.1);
    assert!((g.value(lp).data()[0] - want).abs() < 1e-12);
}

#[test]
fn entropy_matches_monte_carlo() {
    let p = 49;
    let mut rng = Rng::new(8);
    for sigma in [0.1f64, 1.0, 3.0] {
        let ls = sigma.ln();
        let draws: Vec<f64> = (0..100_000)
            .map(|_| {
                (0..p)
                    .map(|_| -naive_log_normal(sigma * rng.normal(), 0.0, 2.0 * ls))
                    .sum()
            })
            .collect();
        let (m, se) = mean_and_se(&draws);
        let h = gaussian_entropy(ls, p);
        assert!((m - h).abs() < 3.0 * se, "sigma {sigma}: mc {m} ± {se}, formula {h}");
    }
}

#[test]
fn entropy_graph_form_agrees() {
    let mut g = Graph::<f64>::new();
    let ls = g.leaf(Tensor::scalar(-0.4));
    let h = gaussian_entropy_var(&mut g, ls, 49);
    assert!((g.scalar(h) - gaussian_entropy(-0.4, 49)).abs() < 1e-12);
    g.backward(h).unwrap();
    assert_eq!(g.grad(ls).unwrap().item(), 49.0);
}

fn bernoulli(logits: &[f64], x: &[f64]) -> dvp_core::Result<f64> {
    let n = logits.len();
    let mut g = Graph::<f64>::new();
    let l = g.leaf(Tensor::from_f64(&[1, n], logits).unwrap());
    let lik = BernoulliLikelihood { logits: l };
    let lp = bernoulli_log_prob(&mut g, &lik, &Tensor::from_f64(&[1, n], x).unwrap())?;
    Ok(g.value(lp).data()[0])
}

#[test]
fn bernoulli_hand_values() {
    assert!((bernoulli(&[0.0], &[1.0]).unwrap() + 0.693_147).abs() < 1e-6);
    assert!(bernoulli(&[20.0], &[1.0]).unwrap().abs() < 1e-8);
}

#[test]
fn bernoulli_matches_naive_formula() {
    let mut rng = Rng::new(12);
    let logits: Vec<f64> = (0..10).map(|_| 6.0 * rng.uniform() - 3.0).collect();
    let x: Vec<f64> = (0..10).map(|_| (rng.uniform() < 0.5) as u8 as f64).collect();
    let naive: f64 = logits
        .iter()
        .zip(&x)
        .map(|(&l, &xi)| {
            let p = 1.0 / (1.0 + (-l).exp());
            xi * p.ln() + (1.0 - xi) * (1.0 - p).ln()
        })
        .sum();
    assert!((bernoulli(&logits, &x).unwrap() - naive).abs() < 1e-9);
}

#[test]
fn bernoulli_rejects_non_binary() {
    assert!(matches!(bernoulli(&[0.0, 0.0], &[1.0, 0.5]), Err(DvpError::Usage(_))));
}
