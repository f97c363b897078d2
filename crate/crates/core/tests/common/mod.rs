#![allow(dead_code)]

use dvp_core::{Graph, Rng, Tensor, Var};

/// Uniform tensor in `[lo, hi)`.
pub fn uniform(rng: &mut Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    let v: Vec<f64> = (0..n).map(|_| lo + (hi - lo) * rng.uniform()).collect();
    Tensor::from_f64(shape, &v).unwrap()
}

/// Worst relative error (L2 over each input) between the tape gradient and
/// central finite differences of `f` with step `h`.
pub fn fd_rel_error<F>(inputs: &[Tensor<f64>], h: f64, f: F) -> f64
where
    F: Fn(&mut Graph<f64>, &[Var]) -> Var,
{
    let eval = |xs: &[Tensor<f64>]| {
        let mut g = Graph::new();
        let vs: Vec<Var> = xs.iter().map(|t| g.leaf(t.clone())).collect();
        let out = f(&mut g, &vs);
        g.scalar(out)
    };
    let mut g = Graph::new();
    let vs: Vec<Var> = inputs.iter().map(|t| g.leaf(t.clone())).collect();
    let out = f(&mut g, &vs);
    g.backward(out).unwrap();
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = g
            .grad(vs[i])
            .map(|t| t.to_f64())
            .unwrap_or_else(|| vec![0.0; input.len()]);
        let mut numeric = vec![0.0; input.len()];
        for j in 0..input.len() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            numeric[j] = (eval(&plus) - eval(&minus)) / (2.0 * h);
        }
        worst = worst.max(rel_l2(&analytic, &numeric));
    }
    worst
}

pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let scale: f64 = b.iter().map(|y| y * y).sum::<f64>().sqrt();
    let scale_a: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    if scale.max(scale_a) < 1e-12 {
        diff
    } else {
        diff / scale.max(scale_a)
    }
}
