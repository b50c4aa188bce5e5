use cassle_core::augment::{augment_batch, augment_pair, AugmentPolicy};
use cassle_core::autograd::Tensor;
use cassle_core::optim::*;
use cassle_core::Error;

fn sgd(lr: f64, momentum: f64, wd: f64) -> OptimizerConfig {
    OptimizerConfig { kind: OptimizerKind::Sgd, global_lr: lr, momentum, weight_decay: wd, ..Default::default() }
}

#[test]
fn sgd_one_step() {
    let mut w = Tensor::new(vec![1, 1], vec![1.0]).unwrap();
    let g = Tensor::new(vec![1, 1], vec![0.5]).unwrap();
    let mut opt = Optimizer::new(sgd(0.1, 0.0, 0.0)).unwrap();
    opt.step(&mut [&mut w], &[g], 0.1).unwrap();
    assert!((w.item() - 0.95).abs() < 1e-15);
}

#[test]
fn zero_gradient_is_a_fixed_point() {
    for kind in [OptimizerKind::Sgd, OptimizerKind::Lars] {
        let cfg = OptimizerConfig { kind, weight_decay: 0.0, ..Default::default() };
        let mut opt = Optimizer::new(cfg).unwrap();
        let w0 = Tensor::new(vec![2, 2], vec![1.0, -2.0, 0.5, 3.0]).unwrap();
        let mut w = w0.clone();
        let mut b = Tensor::new(vec![2], vec![0.3, 0.1]).unwrap();
        opt.step(&mut [&mut w, &mut b], &[Tensor::zeros(&[2, 2]), Tensor::zeros(&[2])], 0.4).unwrap();
        assert_eq!(w, w0);
    }
}

#[test]
fn lars_trust_ratio_closed_form() {
    let cfg = OptimizerConfig { lars_eta: 0.02, weight_decay: 0.0, eps: 0.0, ..Default::default() };
    assert_eq!(lars_local_lr(1.0, 1.0, &cfg), 0.02);
    assert_eq!(lars_local_lr(0.0, 1.0, &cfg), 1.0);
    assert_eq!(lars_local_lr(1.0, 0.0, &cfg), 1.0);
    let with_wd = OptimizerConfig { weight_decay: 0.5, eps: 0.0, ..cfg };
    assert!((lars_local_lr(2.0, 1.0, &with_wd) - 0.02 * 2.0 / 2.0).abs() < 1e-15);
}

#[test]
fn lars_step_matches_hand_computation() {
    let cfg = OptimizerConfig { kind: OptimizerKind::Lars, global_lr: 0.5, momentum: 0.0, weight_decay: 0.0, lars_eta: 0.1, eps: 0.0 };
    let mut opt = Optimizer::new(cfg).unwrap();
    let mut w = Tensor::new(vec![1, 2], vec![3.0, 4.0]).unwrap();
    let g = Tensor::new(vec![1, 2], vec![0.0, 2.0]).unwrap();
    // local = 0.1·5/2 = 0.25, step = 0.5·0.25·∇
    opt.step(&mut [&mut w], &[g], 0.5).unwrap();
    assert!((w.data()[0] - 3.0).abs() < 1e-15);
    assert!((w.data()[1] - (4.0 - 0.25)).abs() < 1e-15);
}

#[test]
fn biases_skip_trust_scaling_and_decay() {
    let cfg = OptimizerConfig { kind: OptimizerKind::Lars, global_lr: 0.1, momentum: 0.0, weight_decay: 0.5, lars_eta: 0.01, eps: 0.0 };
    let mut opt = Optimizer::new(cfg).unwrap();
    let mut b = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
    opt.step(&mut [&mut b], &[Tensor::new(vec![2], vec![1.0, 0.0]).unwrap()], 0.1).unwrap();
    assert_eq!(b.data(), &[0.9, 1.0]);
}

#[test]
fn momentum_accumulates() {
    let mut opt = Optimizer::new(sgd(1.0, 0.5, 0.0)).unwrap();
    let mut w = Tensor::new(vec![1], vec![0.0]).unwrap();
    let g = Tensor::new(vec![1], vec![1.0]).unwrap();
    opt.step(&mut [&mut w], &[g.clone()], 1.0).unwrap();
    opt.step(&mut [&mut w], &[g], 1.0).unwrap();
    assert_eq!(w.item(), -2.5);
}

#[test]
fn non_finite_gradient_aborts_untouched() {
    let mut opt = Optimizer::new(sgd(0.1, 0.0, 0.0)).unwrap();
    let mut a = Tensor::new(vec![1], vec![1.0]).unwrap();
    let mut b = Tensor::new(vec![1], vec![2.0]).unwrap();
    let r = opt.step(&mut [&mut a, &mut b], &[Tensor::new(vec![1], vec![1.0]).unwrap(), Tensor::new(vec![1], vec![f64::NAN]).unwrap()], 0.1);
    assert!(matches!(r, Err(Error::Numeric(_))));
    assert_eq!((a.item(), b.item()), (1.0, 2.0));
}

#[test]
fn optimizer_config_validation() {
    assert!(matches!(Optimizer::new(sgd(0.0, 0.0, 0.0)), Err(Error::Config { .. })));
    assert!(matches!(Optimizer::new(sgd(0.1, 1.0, 0.0)), Err(Error::Config { .. })));
}

#[test]
fn cosine_schedule_endpoints() {
    assert_eq!(cosine_lr(0.4, 0, 100), 0.4);
    assert!((cosine_lr(0.4, 50, 100) - 0.2).abs() < 1e-15);
    assert!(cosine_lr(0.4, 100, 100).abs() < 1e-15);
}

#[test]
fn identity_policy_returns_input() {
    let x = vec![1.0, -2.0, 3.5, 0.25];
    let (a, b) = augment_pair(&x, &AugmentPolicy::identity(), 7, 3, 9);
    assert_eq!(a, x);
    assert_eq!(b, x);
}

#[test]
fn views_are_reproducible_and_distinct() {
    let x: Vec<f64> = (0..16).map(|i| i as f64 * 0.1).collect();
    let p = AugmentPolicy::default();
    let v1 = augment_pair(&x, &p, 7, 3, 9);
    let v2 = augment_pair(&x, &p, 7, 3, 9);
    assert_eq!(v1, v2);
    assert_ne!(v1.0, v1.1);
    assert_ne!(augment_pair(&x, &p, 7, 4, 9).0, v1.0);
    assert_ne!(augment_pair(&x, &p, 7, 3, 10).0, v1.0);
}

#[test]
fn batch_views_do_not_depend_on_batch_composition() {
    let samples = Tensor::new(vec![3, 4], (0..12).map(|v| v as f64).collect()).unwrap();
    let p = AugmentPolicy::default();
    let (a, _) = augment_batch(&samples, &[0, 2], &p, 5, 1).unwrap();
    let (b, _) = augment_batch(&samples, &[2], &p, 5, 1).unwrap();
    assert_eq!(a.row(1), b.row(0));
}

#[test]
fn noise_energy_matches_sigma() {
    // E‖x^A − x‖² = σ²·dim; the mean over 4000 draws of a χ²_dim/dim
    // variable has relative sd sqrt(2/(dim·4000)) ≈ 0.4 %.
    let dim = 32;
    let x = vec![0.5; dim];
    let p = AugmentPolicy { noise_sigma: 0.1, ..AugmentPolicy::identity() }.with_noise_prob(1.0);
    let draws = 2000;
    let mut total = 0.0;
    for d in 0..draws {
        let (a, b) = augment_pair(&x, &p, 1, 0, d);
        for v in [a, b] {
            total += v.iter().zip(&x).map(|(u, w)| (u - w) * (u - w)).sum::<f64>();
        }
    }
    let mean = total / (2 * draws) as f64;
    let expected = 0.01 * dim as f64;
    assert!((mean - expected).abs() < 0.02 * expected, "mean {mean} vs {expected}");
}

trait WithNoise {
    fn with_noise_prob(self, p: f64) -> Self;
}

impl WithNoise for AugmentPolicy {
    fn with_noise_prob(self, p: f64) -> Self {
        AugmentPolicy { noise_prob: p, ..self }
    }
}

#[test]
fn masking_and_scaling_behave() {
    let x = vec![1.0; 1000];
    let mask = AugmentPolicy { mask_prob: 1.0, mask_rate: 0.3, ..AugmentPolicy::identity() };
    let (a, _) = augment_pair(&x, &mask, 0, 0, 0);
    let zeros = a.iter().filter(|&&v| v == 0.0).count();
    assert!((200..400).contains(&zeros));
    let scale = AugmentPolicy { scale_prob: 1.0, scale_min: 2.0, scale_max: 2.0, ..AugmentPolicy::identity() };
    assert!(augment_pair(&x, &scale, 0, 0, 0).0.iter().all(|&v| v == 2.0));
}

#[test]
fn rotation_preserves_norm() {
    let x: Vec<f64> = (0..10).map(|i| (i as f64).sin()).collect();
    let rot = AugmentPolicy { rotate_prob: 1.0, rotate_max_angle: 1.0, ..AugmentPolicy::identity() };
    let (a, _) = augment_pair(&x, &rot, 2, 1, 0);
    let n = |v: &[f64]| v.iter().map(|u| u * u).sum::<f64>();
    assert!((n(&a) - n(&x)).abs() < 1e-12);
    assert_ne!(a, x);
}

#[test]
fn invalid_policies_are_rejected() {
    let bad = [
        AugmentPolicy { noise_prob: 1.5, ..Default::default() },
        AugmentPolicy { mask_rate: -0.1, ..Default::default() },
        AugmentPolicy { scale_min: 2.0, scale_max: 1.0, ..Default::default() },
        AugmentPolicy { noise_sigma: -1.0, ..Default::default() },
    ];
    for p in bad {
        assert!(matches!(p.validate(), Err(Error::Config { .. })));
    }
    AugmentPolicy::default().validate().unwrap();
}
