#![allow(dead_code)]

use candle_core::{DType, Tensor, Var};
use ndarray::Array2;

use pestgan::data::SynthConfig;
use pestgan::discriminators::CriticConfig;
use pestgan::generator::GeneratorConfig;
use pestgan::harness::{Precision, RunConfig};

pub fn values(t: &Tensor) -> Vec<f64> {
    t.to_dtype(DType::F64).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap()
}

pub fn scalar(t: &Tensor) -> f64 {
    t.to_dtype(DType::F64).unwrap().to_scalar::<f64>().unwrap()
}

pub fn max_abs_diff(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    assert_eq!(a.dim(), b.dim());
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Worst relative error, per variable, between the autodiff gradient and central finite
/// differences. At most `per_var` evenly spaced coordinates of each variable are probed;
/// the error is `|g_auto - g_fd| / max(|g_auto|, |g_fd|)` over the probed coordinates.
pub fn gradient_check(
    vars: &[(&str, &Var)],
    mut loss: impl FnMut() -> Tensor,
    per_var: usize,
    eps: f64,
) -> Vec<(String, f64)> {
    let grads = loss().backward().unwrap();
    let mut out = Vec::new();
    for (name, var) in vars {
        let shape = var.dims().to_vec();
        let base = values(var.as_tensor());
        let auto_all = match grads.get(var.as_tensor()) {
            Some(g) => values(g),
            None => vec![0.0; base.len()],
        };
        let n = base.len();
        let picks: Vec<usize> = if n <= per_var {
            (0..n).collect()
        } else {
            (0..per_var).map(|i| i * n / per_var).collect()
        };
        let mut auto = Vec::new();
        let mut fd = Vec::new();
        for &i in &picks {
            let mut probe = |delta: f64| {
                let mut v = base.clone();
                v[i] += delta;
                var.set(&Tensor::from_vec(v, shape.as_slice(), var.device()).unwrap()).unwrap();
                scalar(&loss())
            };
            let plus = probe(eps);
            let minus = probe(-eps);
            fd.push((plus - minus) / (2.0 * eps));
            auto.push(auto_all[i]);
        }
        var.set(&Tensor::from_vec(base, shape.as_slice(), var.device()).unwrap()).unwrap();
        let diff: Vec<f64> = auto.iter().zip(&fd).map(|(a, b)| a - b).collect();
        let scale = norm(&auto).max(norm(&fd));
        let err = if scale < 1e-12 { 0.0 } else { norm(&diff) / scale };
        out.push((name.to_string(), err));
    }
    out
}

/// One explicit Euler step of `f_t = nu * (f_xx + f_yy)` with the 5-point stencil and
/// edge-clamped neighbors.
pub fn heat_step(f: &Array2<f64>, nu: f64) -> Array2<f64> {
    let (h, w) = f.dim();
    let at = |y: isize, x: isize| f[[y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize]];
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y, x) = (y as isize, x as isize);
        let c = at(y, x);
        c + nu * (at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1) - 4.0 * c)
    })
}

/// Small model on 32x32 synthetic frames, suitable for tests that run many steps.
pub fn tiny_config(seed: u64) -> RunConfig {
    let mut cfg = RunConfig {
        seed,
        ..RunConfig::default()
    };
    cfg.generator = GeneratorConfig {
        latent_channels: 4,
        encoder_hidden: 4,
        decoder_channels: 4,
        residual_blocks: 1,
        ..GeneratorConfig::default()
    };
    let critic = CriticConfig {
        channels: vec![4, 8],
        init_power_iterations: 30,
    };
    cfg.spatial_critic = critic.clone();
    cfg.temporal_critic = critic;
    cfg.train.batch_size = 2;
    cfg.train.checkpoint_every = 0;
    cfg.data.synth = SynthConfig {
        size: 32,
        frames: 5,
        seed,
        ..SynthConfig::default()
    };
    cfg.data.synth_sequences = 4;
    cfg.data.test_sequences = 1;
    cfg
}

pub fn tiny_config_f64(seed: u64) -> RunConfig {
    let mut cfg = tiny_config(seed);
    cfg.precision = Precision::F64;
    cfg
}
