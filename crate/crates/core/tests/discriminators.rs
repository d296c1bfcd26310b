mod common;

use candle_core::{DType, Device, Tensor};
use nalgebra::DMatrix;

use pestgan::discriminators::{
    build_temporal_input, spectral_normalize, CriticConfig, Mode, SnConv2d, SpatialDiscriminator, SpectralState,
    TemporalDiscriminator,
};
use pestgan::nn::ParamStore;

use common::values;

/// Largest singular value of a 4-D conv weight flattened to `(out, in*k*k)`.
fn top_singular_value(w: &Tensor) -> f64 {
    let dims = w.dims().to_vec();
    let rows = dims[0];
    let cols: usize = dims[1..].iter().product();
    let m = DMatrix::from_row_slice(rows, cols, &values(w));
    let gram = if rows <= cols { &m * m.transpose() } else { m.transpose() * &m };
    gram.symmetric_eigenvalues().iter().fold(0.0f64, |a, &b| a.max(b)).sqrt()
}

fn randn(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

fn small() -> CriticConfig {
    CriticConfig {
        channels: vec![8, 16, 16],
        init_power_iterations: 100,
    }
}

#[test]
fn diag_probe_recovers_sigma() {
    let w = Tensor::new(&[[3.0f64, 0.0], [0.0, 1.0]], &Device::Cpu).unwrap();
    let mut state = SpectralState::random(2, 2, DType::F64, 4).unwrap();
    let mut out = w.clone();
    for _ in 0..20 {
        out = spectral_normalize(&w, &mut state, true).unwrap();
    }
    assert!((state.sigma - 3.0).abs() < 1e-6, "{}", state.sigma);
    let v = values(&out);
    assert!((v[0] - 1.0).abs() < 1e-6 && (v[3] - 1.0 / 3.0).abs() < 1e-6);
}

#[test]
fn zero_weight_is_degenerate_not_nan() {
    let w = Tensor::zeros((3, 4), DType::F64, &Device::Cpu).unwrap();
    let mut state = SpectralState::random(3, 4, DType::F64, 1).unwrap();
    let out = spectral_normalize(&w, &mut state, true).unwrap();
    assert!(state.degenerate);
    assert!(values(&out).iter().all(|v| *v == 0.0));
}

#[test]
fn normalized_weights_have_unit_spectral_norm() {
    let mut store = ParamStore::new(DType::F64, 2);
    let mut ds = SpatialDiscriminator::new(&mut store, &small()).unwrap();
    let x = randn((2, 2, 32, 32), 3);
    for _ in 0..20 {
        ds.forward(&x.narrow(1, 0, 1).unwrap(), &x.narrow(1, 1, 1).unwrap(), Mode::Train).unwrap();
    }
    for block in &mut ds.0.blocks {
        let raw = top_singular_value(block.conv.weight.as_tensor());
        assert!((block.state.sigma / raw - 1.0).abs() < 0.01, "estimate {} vs {raw}", block.state.sigma);
        let eff = top_singular_value(&block.effective_weight(Mode::Eval).unwrap());
        assert!((0.99..=1.01).contains(&eff), "{eff}");
    }
}

#[test]
fn power_iteration_advances_once_per_training_pass() {
    let mut store = ParamStore::new(DType::F64, 5);
    let mut dt = TemporalDiscriminator::new(&mut store, &small()).unwrap();
    let frames: Vec<Tensor> = (0..3).map(|i| randn((1, 1, 16, 16), 10 + i)).collect();
    let stack = build_temporal_input(&frames[0], &frames[1], &frames[2]).unwrap();
    let before: Vec<u64> = dt.0.blocks.iter().map(|b| b.state.iterations).collect();
    assert!(before.iter().all(|&n| n == 100));
    for _ in 0..3 {
        dt.forward(&stack, Mode::Train).unwrap();
    }
    dt.forward(&stack, Mode::Eval).unwrap();
    let after: Vec<u64> = dt.0.blocks.iter().map(|b| b.state.iterations).collect();
    assert!(after.iter().zip(&before).all(|(a, b)| a - b == 3));
}

#[test]
fn eval_forward_is_pure() {
    let mut store = ParamStore::new(DType::F64, 6);
    let mut ds = SpatialDiscriminator::new(&mut store, &small()).unwrap();
    let a = randn((1, 1, 16, 16), 1);
    let b = randn((1, 1, 16, 16), 2);
    let s1 = values(&ds.forward(&a, &b, Mode::Eval).unwrap().score);
    let s2 = values(&ds.forward(&a, &b, Mode::Eval).unwrap().score);
    assert_eq!(s1, s2);
}

#[test]
fn temporal_differences_telescope() {
    // dyadic rationals keep every difference exact
    let dyadic = |seed: u64| {
        let t = randn((2, 1, 8, 8), seed);
        ((t * 1024.0).unwrap().round().unwrap() / 1024.0).unwrap()
    };
    let (p, c, n) = (dyadic(1), dyadic(2), dyadic(3));
    let stack = build_temporal_input(&p, &c, &n).unwrap();
    let [d_prev, d_next] = stack.differences().unwrap();
    let sum = values(&(d_prev + d_next).unwrap());
    let span = values(&(&n - &p).unwrap());
    assert_eq!(sum, span);
    let [fp, fc, fnx] = stack.frames().unwrap();
    assert_eq!(values(&fp), values(&p));
    assert_eq!(values(&fc), values(&c));
    assert_eq!(values(&fnx), values(&n));

    let (p, c, n) = (randn((1, 1, 8, 8), 4), randn((1, 1, 8, 8), 5), randn((1, 1, 8, 8), 6));
    let [a, b] = build_temporal_input(&p, &c, &n).unwrap().differences().unwrap();
    let err = values(&((a + b).unwrap() - (&n - &p).unwrap()).unwrap());
    assert!(err.iter().all(|e| e.abs() < 1e-15));
}

#[test]
fn identical_frames_have_zero_differences() {
    let f = randn((3, 1, 8, 8), 7);
    let stack = build_temporal_input(&f, &f, &f).unwrap();
    for d in stack.differences().unwrap() {
        assert!(values(&d).iter().all(|v| *v == 0.0));
    }
}

#[test]
fn temporal_critic_sees_difference_order() {
    let mut store = ParamStore::new(DType::F64, 8);
    let mut dt = TemporalDiscriminator::new(&mut store, &small()).unwrap();
    let frames: Vec<Tensor> = (0..3).map(|i| randn((1, 1, 16, 16), 20 + i)).collect();
    let stack = build_temporal_input(&frames[0], &frames[1], &frames[2]).unwrap();
    let t = stack.tensor();
    let swapped = Tensor::cat(
        &[t.narrow(1, 0, 3).unwrap(), t.narrow(1, 4, 1).unwrap(), t.narrow(1, 3, 1).unwrap()],
        1,
    )
    .unwrap();
    let a = values(&dt.forward(&stack, Mode::Eval).unwrap())[0];
    let b = values(&dt.forward(&pestgan::discriminators::TemporalStack(swapped), Mode::Eval).unwrap())[0];
    assert!((a - b).abs() > 1e-9, "{a} vs {b}");
}

#[test]
fn critic_rejects_bad_inputs() {
    let mut store = ParamStore::new(DType::F64, 9);
    let mut ds = SpatialDiscriminator::new(&mut store, &small()).unwrap();
    let a = randn((1, 1, 12, 12), 1);
    assert!(ds.forward(&a, &a, Mode::Eval).is_err());
    let b = randn((1, 1, 16, 16), 1);
    assert!(ds.forward(&a, &b, Mode::Eval).is_err());
    assert!(build_temporal_input(&a, &b, &b).is_err());
}

#[test]
fn sn_conv_warm_up_matches_forward_updates() {
    let mut store = ParamStore::new(DType::F64, 10);
    let cfg = CriticConfig {
        channels: vec![4],
        init_power_iterations: 0,
    };
    let ds = SpatialDiscriminator::new(&mut store, &cfg).unwrap();
    let mut a: SnConv2d = ds.0.blocks[0].clone();
    let mut b = a.clone();
    a.warm_up(5).unwrap();
    for _ in 0..5 {
        b.effective_weight(Mode::Train).unwrap();
    }
    assert_eq!(values(&a.state.u), values(&b.state.u));
    assert_eq!(a.state.iterations, 5);
}
