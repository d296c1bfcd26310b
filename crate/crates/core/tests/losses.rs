mod common;

use candle_core::{DType, Device, Tensor};
use proptest::prelude::*;

use pestgan::data::{synth_vortex_sequence, window_triplets};
use pestgan::discriminators::Mode;
use pestgan::harness::{Batch, TrainState};
use pestgan::losses::{
    feature_matching_loss, hinge_d_loss, hinge_g_loss, l1_loss, stat_loss, total_generator_loss, GeneratorTerms,
    LossReport, LossWeights,
};
use pestgan::Error;

use common::{gradient_check, scalar, tiny_config_f64};

fn t(v: &[f64]) -> Tensor {
    Tensor::new(v, &Device::Cpu).unwrap()
}

fn s(v: f64) -> Tensor {
    Tensor::new(v, &Device::Cpu).unwrap()
}

fn randn(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
    let mut rng = <rand_chacha::ChaCha8Rng as rand::SeedableRng>::seed_from_u64(seed);
    let n = shape.0 * shape.1 * shape.2 * shape.3;
    let v: Vec<f64> = (0..n).map(|_| rand::Rng::random_range(&mut rng, -1.0..1.0)).collect();
    Tensor::from_vec(v, shape, &Device::Cpu).unwrap()
}

#[test]
fn hinge_identities() {
    assert_eq!(scalar(&hinge_d_loss(&t(&[2.0]), &t(&[-2.0])).unwrap()), 0.0);
    assert_eq!(scalar(&hinge_d_loss(&t(&[0.0]), &t(&[0.0])).unwrap()), 2.0);
    assert_eq!(scalar(&hinge_g_loss(&t(&[0.0]), &t(&[0.0])).unwrap()), 0.0);
    assert_eq!(scalar(&hinge_g_loss(&t(&[1.0, 3.0]), &t(&[-0.5])).unwrap()), -1.5);
    assert!(hinge_d_loss(&t(&[]), &t(&[1.0])).is_err());
}

#[test]
fn stat_loss_vanishes_on_matching_statistics() {
    let sr = randn((2, 1, 8, 8), 1);
    assert!(scalar(&stat_loss(&sr, &sr, Some(&sr), 0.1).unwrap()).abs() < 1e-15);
    let shifted = (&sr + 0.25).unwrap();
    assert!(scalar(&stat_loss(&sr, &shifted, Some(&shifted), 0.1).unwrap()).abs() < 1e-15);
    let other = randn((2, 1, 8, 8), 2);
    assert!(scalar(&stat_loss(&sr, &other, None, 0.1).unwrap()) > 0.0);
}

#[test]
fn feature_matching_examples() {
    let a = vec![randn((1, 2, 4, 4), 3), randn((1, 4, 2, 2), 4)];
    assert_eq!(scalar(&feature_matching_loss(&a, &a).unwrap()), 0.0);
    let b: Vec<Tensor> = a.iter().map(|x| (x + 1.0).unwrap()).collect();
    assert!((scalar(&feature_matching_loss(&a, &b).unwrap()) - 1.0).abs() < 1e-15);
    assert!(feature_matching_loss(&a, &b[..1]).is_err());
}

#[test]
fn non_finite_term_is_named() {
    let terms = GeneratorTerms {
        l1: s(0.5),
        feat: s(0.0),
        adv: s(f64::NAN),
        stat: s(0.0),
        ker: s(0.0),
    };
    match total_generator_loss(&terms, &LossWeights::default()) {
        Err(Error::TrainingFault { term }) => assert_eq!(term, "adv"),
        other => panic!("expected a training fault, got {other:?}"),
    }
}

#[test]
fn log_line_round_trip() {
    let report = LossReport {
        step: 17,
        total: 1.25,
        d_spatial: 0.5,
        d_temporal: 1.0 / 3.0,
        ..LossReport::default()
    };
    let line = report.to_log_line();
    assert!(line.starts_with("17\tl1="));
    assert_eq!(line.split('\t').count(), 14);
    assert_eq!(LossReport::from_log_line(&line).unwrap(), report);
}

#[test]
fn generator_loss_gradients_match_finite_differences() {
    let mut cfg = tiny_config_f64(3);
    cfg.loss.lambda_ker = 0.7;
    let mut state = TrainState::new(cfg.clone()).unwrap();
    // move the bank off its exact solution so the moment term has a gradient
    let bank = state.generator.phycell.bank.kernels.clone();
    bank.set(&(bank.as_tensor() + randn((6, 1, 7, 7), 5).affine(0.01, 0.0).unwrap()).unwrap())
        .unwrap();
    let seq = synth_vortex_sequence(&cfg.data.synth).unwrap();
    let samples = window_triplets(&seq).unwrap();
    let refs: Vec<_> = samples.iter().take(3).collect();
    let batch = Batch::new(&refs, DType::F64).unwrap();
    assert!(!batch.prev_index.is_empty());

    let names = [
        "gen.encoder.conv1.weight",
        "gen.phycell.combine",
        "gen.phycell.bank",
        "gen.phycell.gain.weight",
        "gen.convlstm.gates.weight",
        "gen.fuse.weight",
        "gen.decoder.out.weight",
    ];
    let vars: Vec<_> = names
        .iter()
        .map(|n| {
            let v = state
                .gen_store
                .get(n)
                .unwrap_or_else(|| panic!("no parameter `{n}` in {:?}", state.gen_store.iter().map(|(k, _)| k).collect::<Vec<_>>()));
            (*n, v.clone())
        })
        .collect();
    let var_refs: Vec<(&str, &candle_core::Var)> = vars.iter().map(|(n, v)| (*n, v)).collect();
    let weights = cfg.loss;
    let errs = gradient_check(
        &var_refs,
        || {
            let (sr, prev) = state.generate(&batch).unwrap();
            let terms = state.generator_terms(&batch, &sr, prev.as_ref(), Mode::Eval).unwrap();
            total_generator_loss(&terms, &weights).unwrap().0
        },
        8,
        1e-6,
    );
    for (name, e) in errs {
        assert!(e < 1e-3, "{name}: {e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn total_is_weighted_sum_of_terms(
        vals in proptest::array::uniform5(0.0f64..10.0),
        w in proptest::array::uniform6(0.0f64..20.0),
    ) {
        let weights = LossWeights {
            lambda_1: w[0],
            lambda_feat: w[1],
            lambda_adv: w[2],
            lambda_stat: w[3],
            lambda_ker: w[4],
            lambda_t: w[5],
        };
        let terms = GeneratorTerms {
            l1: s(vals[0]),
            feat: s(vals[1]),
            adv: s(vals[2] - 5.0),
            stat: s(vals[3]),
            ker: s(vals[4]),
        };
        let (total, report) = total_generator_loss(&terms, &weights).unwrap();
        let lambdas = [w[0], w[1], w[2], w[3], w[4]];
        let raw = [vals[0], vals[1], vals[2] - 5.0, vals[3], vals[4]];
        let expected: f64 = lambdas.iter().zip(raw).map(|(l, v)| l * v).sum();
        let scale = expected.abs().max(1e-12);
        prop_assert!((scalar(&total) - expected).abs() / scale < 1e-6 || (scalar(&total) - expected).abs() < 1e-12);
        prop_assert!((report.total - expected).abs() / scale < 1e-6 || (report.total - expected).abs() < 1e-12);
        prop_assert_eq!(report.terms.as_array(), raw);
    }

    #[test]
    fn l1_is_mean_absolute_difference(a in proptest::collection::vec(-1.0f64..1.0, 16), b in proptest::collection::vec(-1.0f64..1.0, 16)) {
        let ta = Tensor::from_vec(a.clone(), (1, 1, 4, 4), &Device::Cpu).unwrap();
        let tb = Tensor::from_vec(b.clone(), (1, 1, 4, 4), &Device::Cpu).unwrap();
        let expected = a.iter().zip(&b).map(|(x, y)| (x - y).abs()).sum::<f64>() / 16.0;
        prop_assert!((scalar(&l1_loss(&ta, &tb).unwrap()) - expected).abs() < 1e-14);
    }
}
