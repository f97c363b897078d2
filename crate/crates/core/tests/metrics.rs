use dvp_core::data::{synthetic_entropy, synthetic_shapes};
use dvp_core::dct::norm_matrix_for;
use dvp_core::metrics::{active_units, active_units_with, eval_nll_bound};
use dvp_core::model::{LadderVae, ModelConfig};
use dvp_core::{Dataset, Result, Rng, Tensor};

fn tiny_model(data: &Dataset) -> LadderVae<f64> {
    let norm = norm_matrix_for(data, 2).unwrap();
    let mut m = LadderVae::new(ModelConfig::tiny(), norm, &mut Rng::new(4)).unwrap();
    // Zero-initialized output layers would make every posterior mean constant.
    let names: Vec<_> = m.store().iter().map(|(_, p)| (p.name.clone(), p.tensor.shape().to_vec())).collect();
    let mut rng = Rng::new(8);
    for (name, shape) in names {
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| 0.4 * (2.0 * rng.uniform() - 1.0)).collect();
        m.store_mut().set(&name, Tensor::from_f64(&shape, &v).unwrap()).unwrap();
    }
    m
}

fn identity(x: &Tensor<f64>, _: &mut Rng) -> Result<Vec<Tensor<f64>>> {
    Ok(vec![x.clone()])
}

#[test]
fn constant_means_have_no_active_units() {
    let data = synthetic_shapes(20, 4, 0).unwrap();
    let r = active_units_with(&data, 0.01, 3, 0, |_x: &Tensor<f64>, _| Ok(vec![Tensor::full(&[1, 2, 2, 2], 0.7)]))
        .unwrap();
    assert_eq!(r.au, 0.0);
    assert_eq!(r.per_layer, vec![0.0]);
    assert!(r.activity[0].iter().all(|&v| v < 1e-20));
}

#[test]
fn pixel_copy_activity_is_bernoulli_variance() {
    // Binary pixels binarize deterministically, so the means are the images.
    let data = synthetic_shapes(50, 4, 3).unwrap();
    let r = active_units_with(&data, 0.01, 2, 5, identity).unwrap();
    let n = data.len() as f64;
    let mut active = 0;
    for j in 0..16 {
        let p = (0..data.len()).filter(|&i| data.image_bytes(i)[j] == 255).count() as f64 / n;
        let var = p * (1.0 - p);
        assert!((r.activity[0][j] - var).abs() < 1e-12, "pixel {j}");
        active += (var > 0.01) as usize;
    }
    assert_eq!(r.au, active as f64 / 16.0);
}

#[test]
fn threshold_is_strict() {
    // One 4x4 image with three lit pixels and one blank image.
    let mut bytes = vec![0u8; 32];
    for j in [1, 4, 5] {
        bytes[j] = 255;
    }
    let data = Dataset::new(bytes, 2, 1, 4, "t").unwrap();
    let r = active_units_with(&data, 0.25, 1, 0, identity).unwrap();
    // Three pixels differ between the images, each with variance exactly 0.25.
    assert_eq!(r.activity[0].iter().filter(|&&v| v == 0.25).count(), 3);
    assert_eq!(r.au, 0.0);
    let r = active_units_with(&data, 0.0, 1, 0, identity).unwrap();
    assert_eq!(r.au, 3.0 / 16.0);
}

#[test]
fn model_activity_ignores_dataset_order() {
    let data = synthetic_shapes(24, 4, 6).unwrap();
    let m = tiny_model(&data);
    let mut order: Vec<usize> = (0..data.len()).collect();
    Rng::new(1).shuffle(&mut order);
    let mut bytes = Vec::new();
    for &i in &order {
        bytes.extend_from_slice(data.image_bytes(i));
    }
    let shuffled = Dataset::new(bytes, data.len(), 1, 4, "s").unwrap();
    let a = active_units(&m, &data, 1e-3, 3, 2).unwrap();
    let b = active_units(&m, &shuffled, 1e-3, 3, 2).unwrap();
    assert_eq!(a.activity.len(), 2);
    // Low resolution first.
    assert_eq!(a.activity[0].len(), 1);
    assert_eq!(a.activity[1].len(), 4);
    for (x, y) in a.activity.iter().flatten().zip(b.activity.iter().flatten()) {
        assert!((x - y).abs() < 1e-12);
    }
    assert_eq!(a.au, b.au);
    assert!(a.activity.iter().flatten().any(|&v| v > 0.0));
}

#[test]
fn bad_arguments_fail() {
    let empty = Dataset::new(Vec::new(), 0, 1, 4, "e").unwrap();
    assert!(active_units_with(&empty, 0.01, 1, 0, identity).is_err());
    let data = synthetic_shapes(4, 4, 0).unwrap();
    assert!(active_units_with(&data, 0.01, 0, 0, identity).is_err());
    assert!(active_units_with(&data, -1.0, 1, 0, identity).is_err());
    let m = tiny_model(&data);
    assert!(eval_nll_bound(&m, &empty, 1, 0, 10).is_err());
    assert!(eval_nll_bound(&m, &data, 0, 0, 10).is_err());
}

#[test]
fn nll_bound_exceeds_data_entropy_and_is_reproducible() {
    let data = synthetic_shapes(200, 4, 9).unwrap();
    let m = tiny_model(&data);
    let a = eval_nll_bound(&m, &data, 2, 3, 64).unwrap();
    let b = eval_nll_bound(&m, &data, 2, 3, 64).unwrap();
    assert_eq!(a, b);
    assert!(a.nll >= synthetic_entropy(4), "{} < {}", a.nll, synthetic_entropy(4));
    assert_eq!((a.n, a.samples, a.kl.len()), (200, 2, 2));
    let parts = a.recon - a.kl.iter().sum::<f64>() + a.entropy + a.l0 - a.l1 - a.lt;
    assert!((parts + a.nll).abs() < 1e-9 * a.nll.abs().max(1.0));
    let c = eval_nll_bound(&m, &data, 2, 4, 64).unwrap();
    assert_ne!(a.nll, c.nll);
}
