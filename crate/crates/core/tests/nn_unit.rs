use cassle_core::autograd::{Graph, Tensor};
use cassle_core::{Error, Result};
use cassle_core::autograd::{allclose, finite_difference_gradient};
use cassle_core::nn::*;
fn arch() -> ArchSpec {
    ArchSpec { backbone: vec![32, 64, 16], projector: vec![16, 8], head_hidden: None, prototypes: None }
}

#[test]
fn init_is_seeded_and_shaped() {
    let a = EncoderState::init(&arch(), 3).unwrap();
    let b = EncoderState::init(&arch(), 3).unwrap();
    let c = EncoderState::init(&arch(), 4).unwrap();
    assert_eq!(a, b);
    assert_ne!(a.backbone, c.backbone);
    let shapes: Vec<Vec<usize>> = a.named_params().iter().map(|(_, t)| t.shape().to_vec()).collect();
    assert_eq!(shapes, vec![vec![32, 64], vec![64], vec![64, 16], vec![16], vec![16, 8], vec![8]]);
}

#[test]
fn zero_width_is_config_error() {
    let mut bad = arch();
    bad.backbone[1] = 0;
    assert!(matches!(EncoderState::init(&bad, 0), Err(Error::Config { .. })));
    let mut chain = arch();
    chain.projector[0] = 15;
    assert!(matches!(EncoderState::init(&chain, 0), Err(Error::Config { .. })));
}

#[test]
fn zero_weights_give_zero_projection() {
    let mut enc = EncoderState::init(&arch(), 1).unwrap();
    for p in enc.params_mut() {
        p.data_mut().iter_mut().for_each(|v| *v = 0.0);
    }
    let x = Tensor::full(&[3, 32], 0.7);
    let (_, z) = enc.encode_values(&x).unwrap();
    assert!(z.data().iter().all(|&v| v == 0.0));
}

#[test]
fn encode_dimension_mismatch() {
    let enc = EncoderState::init(&arch(), 1).unwrap();
    assert!(matches!(enc.encode_values(&Tensor::zeros(&[2, 31])), Err(Error::Shape(_))));
}

#[test]
fn frozen_encode_is_repeatable_without_gradients() {
    let enc = EncoderState::init(&arch(), 2).unwrap();
    let x = Tensor::full(&[2, 32], 0.3);
    let mut g = Graph::new();
    let bound = enc.bind(&mut g, false);
    let xv = g.constant(x.clone());
    let (_, z1) = bound.encode(&mut g, xv).unwrap();
    let (_, z2) = bound.encode(&mut g, xv).unwrap();
    assert_eq!(g.value(z1), g.value(z2));
    let s = g.sum(z1, None).unwrap();
    assert!(g.backward(s).unwrap().is_empty());
}

#[test]
fn encode_gradcheck() {
    let enc = EncoderState::init(&arch(), 5).unwrap();
    let x0 = Tensor::new(vec![3, 32], (0..96).map(|i| ((i * 37 % 17) as f64 - 8.0) / 8.0).collect()).unwrap();
    let eval = |x: &Tensor| -> Result<f64> {
        let (_, z) = enc.encode_values(x)?;
        Ok(z.data().iter().sum())
    };
    let mut g = Graph::new();
    let bound = enc.bind(&mut g, false);
    let xv = g.param(x0.clone());
    let (_, z) = bound.encode(&mut g, xv).unwrap();
    let s = g.sum(z, None).unwrap();
    let grads = g.backward(s).unwrap();
    let fd = finite_difference_gradient(eval, &x0, 1e-5).unwrap();
    assert!(allclose(grads.get(xv).unwrap(), &fd, 1e-4, 1e-7));
}

#[test]
fn identity_predictor_is_exact() {
    let p = PredictorState::identity(4);
    let z0 = Tensor::from_rows(&[[1.0, -2.0, 0.5, 0.0], [-0.3, 0.2, 7.0, -1.0]]).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, true);
    let z = g.constant(z0.clone());
    let out = predict_past(&mut g, &b, z).unwrap();
    assert_eq!(g.value(out), &z0);
}

#[test]
fn predictor_shape_and_gradients() {
    let p = PredictorState::init(6, 24, 9).unwrap();
    let z0 = Tensor::new(vec![4, 6], (0..24).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
    let mut g = Graph::new();
    let b = p.bind(&mut g, true);
    let z = g.param(z0.clone());
    let out = predict_past(&mut g, &b, z).unwrap();
    assert_eq!(g.shape(out), &[4, 6]);
    let s = g.sum(out, None).unwrap();
    let grads = g.backward(s).unwrap();
    let fd = finite_difference_gradient(
        |t| {
            let mut g = Graph::new();
            let b = p.bind(&mut g, false);
            let z = g.constant(t.clone());
            let o = predict_past(&mut g, &b, z)?;
            let s = g.sum(o, None)?;
            Ok(g.value(s).item())
        },
        &z0,
        1e-5,
    )
    .unwrap();
    assert!(allclose(grads.get(z).unwrap(), &fd, 1e-4, 1e-7));
    for v in b.vars() {
        assert!(grads.get(v).is_some());
    }
    let wrong = g.constant(Tensor::zeros(&[2, 5]));
    assert!(matches!(predict_past(&mut g, &b, wrong), Err(Error::Shape(_))));
}

#[test]
fn ema_fixed_points_and_arithmetic() {
    let online = EncoderState::init(&arch(), 1).unwrap();
    let other = EncoderState::init(&arch(), 2).unwrap();
    let mut ema = EmaState::new(&other, 1.0).unwrap();
    ema.update(&online).unwrap();
    assert_eq!(ema.shadow, other);
    ema_update(&mut ema, &online, 0.0).unwrap();
    assert_eq!(ema.shadow.named_params(), online.named_params());

    let mut ones = online.clone();
    ones.params_mut().into_iter().for_each(|p| p.data_mut().iter_mut().for_each(|v| *v = 1.0));
    let mut zeros = online.clone();
    zeros.params_mut().into_iter().for_each(|p| p.data_mut().iter_mut().for_each(|v| *v = 0.0));
    let mut ema = EmaState::new(&ones, 0.9).unwrap();
    ema.update(&zeros).unwrap();
    assert!(ema.shadow.named_params().iter().all(|(_, t)| t.data().iter().all(|&v| v == 0.9)));

    let small = EncoderState::init(&ArchSpec { backbone: vec![32, 8], ..arch() }, 1);
    assert!(small.is_err());
}

#[test]
fn prototype_score_examples() {
    let mut g = Graph::new();
    let bank = g.constant(Tensor::from_rows(&[[1.0, 0.0], [0.0, 2.0]]).unwrap());
    let z = g.constant(Tensor::from_rows(&[[3.0, 0.0]]).unwrap());
    let s = prototype_scores(&mut g, z, bank, 0.5).unwrap();
    assert!((g.value(s).data()[0] - 2.0).abs() < 1e-15);
    assert_eq!(g.value(s).data()[1], 0.0);
    assert!(matches!(prototype_scores(&mut g, z, bank, 0.0), Err(Error::Config { .. })));
}

#[test]
fn checkpoint_names_rebuild_encoder() {
    let a = ArchSpec { head_hidden: Some(12), prototypes: Some(5), ..arch() };
    let enc = EncoderState::init(&a, 8).unwrap();
    let named = enc.named_params().into_iter().map(|(n, t)| (n, t.clone())).collect();
    assert_eq!(EncoderState::from_named(named, 8).unwrap(), enc);
}
