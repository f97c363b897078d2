use dvp_core::data::synthetic_shapes;
use dvp_core::dct::norm_matrix_for;
use dvp_core::diffusion::DiffusionSchedule;
use dvp_core::model::{LadderVae, ModelConfig};
use dvp_core::train::{
    adamax_step, clip_global_norm, cosine_lr, ema_update, fit, split_train_val, AdamaxState, FitOutput,
    StepRecord, TrainConfig, TrainState, ADAMAX_EPS,
};
use dvp_core::{Checkpoint, DvpError, ParamGrads, ParamStore, Rng, Tensor};

fn store_of(values: &[f64]) -> ParamStore<f64> {
    let mut s = ParamStore::new();
    s.add("w", Tensor::from_f64(&[values.len()], values).unwrap()).unwrap();
    s
}

fn grads_of(values: &[f64]) -> ParamGrads<f64> {
    ParamGrads {
        grads: vec![Tensor::from_f64(&[values.len()], values).unwrap()],
    }
}

#[test]
fn adamax_first_step_moves_by_lr() {
    let mut s = store_of(&[1.0, -2.0]);
    let mut st = AdamaxState::new(&s);
    adamax_step(&mut s, &grads_of(&[0.5, -3.0]), 0.1, (0.9, 0.999), 0.0, &mut st).unwrap();
    let w = s.get(s.id("w").unwrap()).tensor.to_f64();
    // First step: m/(1-b1) = g and v = |g|, so each weight moves by lr * sign(g).
    assert!((w[0] - 0.9).abs() < 1e-6, "{w:?}");
    assert!((w[1] + 1.9).abs() < 1e-6, "{w:?}");
    assert_eq!(st.t, 1);
}

#[test]
fn adamax_zero_gradient_leaves_weights() {
    let mut s = store_of(&[0.3, 4.0]);
    let mut st = AdamaxState::new(&s);
    for _ in 0..5 {
        adamax_step(&mut s, &grads_of(&[0.0, 0.0]), 0.1, (0.9, 0.999), 0.0, &mut st).unwrap();
    }
    assert_eq!(s.get(s.id("w").unwrap()).tensor.to_f64(), vec![0.3, 4.0]);
}

#[test]
fn adamax_rejects_non_finite_gradients() {
    let mut s = store_of(&[1.0]);
    let mut st = AdamaxState::new(&s);
    let err = adamax_step(&mut s, &grads_of(&[f64::NAN]), 0.1, (0.9, 0.999), 0.0, &mut st).unwrap_err();
    assert!(matches!(err, DvpError::TrainingFault(_)));
    assert_eq!(s.get(s.id("w").unwrap()).tensor.to_f64(), vec![1.0]);
}

#[test]
fn adamax_quadratic_trajectory_matches_reference() {
    let a = [1.0, 4.0, 0.25];
    let c = [2.0, -1.0, 0.5];
    let (lr, wd, b1, b2) = (0.05, 0.01, 0.9, 0.999);
    let mut s = store_of(&[0.0, 0.0, 0.0]);
    let mut st = AdamaxState::new(&s);

    let mut w = [0.0f64; 3];
    let mut m = [0.0f64; 3];
    let mut u = [0.0f64; 3];
    for t in 1..=100 {
        let cur = s.get(s.id("w").unwrap()).tensor.to_f64();
        let g: Vec<f64> = (0..3).map(|i| a[i] * (cur[i] - c[i])).collect();
        adamax_step(&mut s, &grads_of(&g), lr, (b1, b2), wd, &mut st).unwrap();

        for i in 0..3 {
            let gi = a[i] * (w[i] - c[i]);
            w[i] *= 1.0 - lr * wd;
            m[i] = b1 * m[i] + (1.0 - b1) * gi;
            u[i] = f64::max(b2 * u[i], gi.abs());
            w[i] -= (lr / (1.0 - f64::powi(b1, t))) * m[i] / (u[i] + ADAMAX_EPS);
        }
    }
    let got = s.get(s.id("w").unwrap()).tensor.to_f64();
    for i in 0..3 {
        assert!((got[i] - w[i]).abs() < 1e-12, "{got:?} vs {w:?}");
    }
    // Converges near the minimum.
    assert!((got[0] - 2.0).abs() < 0.2);
}

#[test]
fn cosine_schedule_shape() {
    let (lr0, lr1) = (1e-2, 1e-5);
    assert_eq!(cosine_lr(0, 100, 10, lr0, lr1), 0.0);
    assert!((cosine_lr(5, 100, 10, lr0, lr1) - 0.5 * lr0).abs() < 1e-15);
    assert!((cosine_lr(10, 100, 10, lr0, lr1) - lr0).abs() < 1e-15);
    assert!((cosine_lr(55, 100, 10, lr0, lr1) - 0.5 * (lr0 + lr1)).abs() < 1e-15);
    assert!((cosine_lr(100, 100, 10, lr0, lr1) - lr1).abs() < 1e-15);
    assert!((cosine_lr(500, 100, 10, lr0, lr1) - lr1).abs() < 1e-15);
    let mut prev = f64::INFINITY;
    for step in 10..=100 {
        let lr = cosine_lr(step, 100, 10, lr0, lr1);
        assert!(lr <= prev);
        prev = lr;
    }
    assert!((cosine_lr(0, 10, 0, lr0, lr1) - lr0).abs() < 1e-15);
}

#[test]
fn clipping_rescales_only_large_gradients() {
    let mut g = grads_of(&[3.0, 4.0]);
    assert_eq!(clip_global_norm(&mut g, 10.0), 5.0);
    assert_eq!(g.grads[0].to_f64(), vec![3.0, 4.0]);

    let mut g: ParamGrads<f64> = ParamGrads {
        grads: vec![
            Tensor::from_f64(&[1], &[6.0]).unwrap(),
            Tensor::from_f64(&[2], &[0.0, 8.0]).unwrap(),
        ],
    };
    assert_eq!(clip_global_norm(&mut g, 5.0), 10.0);
    assert!((g.global_norm() - 5.0).abs() < 1e-12);
    assert!((g.grads[0].to_f64()[0] - 3.0).abs() < 1e-12);
    assert!((g.grads[1].to_f64()[1] - 4.0).abs() < 1e-12);
}

#[test]
fn ema_limits_and_convergence() {
    let mut s = store_of(&[1.0, 2.0]);
    ema_update(&mut s, 0.9);
    assert_eq!(s.get(s.id("w").unwrap()).ema.as_ref().unwrap().to_f64(), vec![1.0, 2.0]);

    s.set("w", Tensor::from_f64(&[2], &[5.0, -1.0]).unwrap()).unwrap();
    ema_update(&mut s, 0.0);
    assert_eq!(s.get(s.id("w").unwrap()).ema.as_ref().unwrap().to_f64(), vec![5.0, -1.0]);

    // From shadow e0 toward a fixed value p: e_t = p + rate^t (e0 - p).
    s.set("w", Tensor::from_f64(&[2], &[0.0, 0.0]).unwrap()).unwrap();
    let rate: f64 = 0.99;
    for _ in 0..50 {
        ema_update(&mut s, rate);
    }
    let e = s.get(s.id("w").unwrap()).ema.as_ref().unwrap().to_f64();
    let k = rate.powi(50);
    assert!((e[0] - 5.0 * k).abs() < 1e-12);
    assert!((e[1] + k).abs() < 1e-12);
}

#[test]
fn train_config_validation() {
    assert!(TrainConfig::default().validate().is_ok());
    for bad in [
        TrainConfig { epochs: 0, ..Default::default() },
        TrainConfig { batch_size: 0, ..Default::default() },
        TrainConfig { ema_rate: 1.0, ..Default::default() },
        TrainConfig { clip_norm: 0.0, ..Default::default() },
        TrainConfig { lr: -1.0, ..Default::default() },
        TrainConfig { warmup_epochs: 300.0, ..Default::default() },
    ] {
        assert!(matches!(bad.validate(), Err(DvpError::Config(_))), "{bad:?}");
    }
}

fn small_config() -> ModelConfig {
    ModelConfig {
        image_side: 8,
        scales: vec![(4, 2), (2, 1)],
        enc_blocks: 1,
        width: 8,
        hidden: 8,
        crop: 4,
        prior_width: 8,
        prior_blocks: 1,
        diffusion: DiffusionSchedule {
            steps: 10,
            ..DiffusionSchedule::default()
        },
        ..ModelConfig::default()
    }
}

fn small_run(epochs: usize, seed: u64) -> (LadderVae<f32>, dvp_core::Dataset, dvp_core::Dataset, TrainConfig) {
    let data = synthetic_shapes(352, 8, 7).unwrap();
    let cfg = TrainConfig {
        epochs,
        batch_size: 16,
        lr: 3e-3,
        end_lr: 1e-4,
        warmup_epochs: 0.5,
        val_size: 32,
        eval_batch: 32,
        seed,
        ..TrainConfig::default()
    };
    let (train, val) = split_train_val(&data, &cfg).unwrap();
    let norm = norm_matrix_for(&train, 4).unwrap();
    let model = LadderVae::new(small_config(), norm, &mut Rng::new(seed)).unwrap();
    (model, train, val, cfg)
}

fn step_losses(log: &[String]) -> Vec<f64> {
    log.iter()
        .filter(|l| l.contains("\"kind\":\"step\""))
        .map(|l| serde_json::from_str::<StepRecord>(l).unwrap().loss)
        .collect()
}

#[test]
fn tiny_fit_reduces_loss() {
    let (mut model, train, val, cfg) = small_run(10, 0);
    assert_eq!(train.len(), 320);
    let report = fit(&mut model, &train, &val, &cfg, None, &FitOutput::default()).unwrap();
    let losses = step_losses(&report.log);
    assert_eq!(losses.len(), 200);
    let head: f64 = losses[..20].iter().sum::<f64>() / 20.0;
    let tail: f64 = losses[180..].iter().sum::<f64>() / 20.0;
    assert!(tail <= 0.9 * head, "smoothed loss {head} -> {tail}");
    assert_eq!(report.epochs.len(), 10);
    assert!(report.epochs.iter().all(|e| e.val_nll.is_finite()));
    assert_eq!(report.state.step, 200);
    assert!(report.state.best_val.is_finite());
}

#[test]
fn runs_are_bitwise_reproducible() {
    let run = || {
        let (mut model, train, val, cfg) = small_run(2, 3);
        let r = fit(&mut model, &train, &val, &cfg, None, &FitOutput::default()).unwrap();
        (r.log, model.store().iter().map(|(_, p)| p.tensor.clone()).collect::<Vec<_>>())
    };
    let (log_a, w_a) = run();
    let (log_b, w_b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(w_a, w_b);
}

#[test]
fn resume_matches_uninterrupted_run() {
    let dir = tempfile::tempdir().unwrap();
    let full_dir = dir.path().join("full");
    let rest_dir = dir.path().join("rest");

    let (mut model, train, val, mut cfg) = small_run(3, 5);
    cfg.checkpoint_every = 1;
    let full = fit(&mut model, &train, &val, &cfg, None, &FitOutput { dir: Some(full_dir.clone()) }).unwrap();
    for e in 1..=3 {
        assert!(full_dir.join(format!("epoch{e}.ckpt")).exists());
    }
    assert!(full_dir.join("best.ckpt").exists());

    let ckpt = Checkpoint::<f32>::load(&full_dir.join("epoch1.ckpt")).unwrap();
    assert_eq!(ckpt.state.epoch, 1);
    assert_eq!(ckpt.config.train, cfg);
    let mut resumed = ckpt.to_model().unwrap();
    let rest = fit(&mut resumed, &train, &val, &cfg, Some(ckpt.state.clone()), &FitOutput { dir: Some(rest_dir) })
        .unwrap();

    assert_eq!(rest.state, full.state);
    let a: Vec<_> = model.store().iter().map(|(_, p)| (p.tensor.clone(), p.ema.clone())).collect();
    let b: Vec<_> = resumed.store().iter().map(|(_, p)| (p.tensor.clone(), p.ema.clone())).collect();
    assert_eq!(a, b);
    let skip = full.log.len() - rest.log.len();
    assert_eq!(&full.log[skip..], &rest.log[..]);
    assert_eq!(rest.epochs, full.epochs[1..]);
}

#[test]
fn non_finite_loss_is_reported_as_fault() {
    let dir = tempfile::tempdir().unwrap();
    let (mut model, train, val, cfg) = small_run(1, 0);
    let name = model.store().iter().next().unwrap().1.name.clone();
    let shape = model.store().iter().next().unwrap().1.tensor.shape().to_vec();
    let n: usize = shape.iter().product();
    model.store_mut().set(&name, Tensor::from_f64(&shape, &vec![f64::NAN; n]).unwrap()).unwrap();
    let err = fit(&mut model, &train, &val, &cfg, None, &FitOutput { dir: Some(dir.path().to_path_buf()) })
        .unwrap_err();
    assert!(matches!(err, DvpError::TrainingFault(_)), "{err:?}");
    let log = std::fs::read_to_string(dir.path().join("train.jsonl")).unwrap();
    assert!(log.lines().last().unwrap().contains("\"kind\":\"fault\""));
}

#[test]
fn resume_state_must_match_model() {
    let (mut model, train, val, cfg) = small_run(1, 0);
    let other = store_of(&[1.0]);
    let state = TrainState::new(&other, 0);
    assert!(fit(&mut model, &train, &val, &cfg, Some(state), &FitOutput::default()).is_err());
}
