mod common;

use bridgeflow::alignment::{AlignmentConfig, AlignmentPlan, Strategy};
use bridgeflow::genot::{genot_loss, push_forward, train, Arch, TrainConfig, VelocityField};
use bridgeflow::nn::checkpoint;
use bridgeflow::{FeatureMatrix, Matrix, PairedSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use common::normal;

#[test]
fn mlp_small_gradients_match_finite_differences() {
    let worst = common::fd_check(Arch::MlpSmall, 50, 1);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn adaln_small_gradients_match_finite_differences() {
    let worst = common::fd_check(Arch::AdalnSmall, 50, 2);
    assert!(worst < 1e-4, "worst relative error {worst}");
}

#[test]
fn zero_head_loss_is_mean_squared_displacement() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for arch in [Arch::MlpSmall, Arch::AdalnSmall] {
        let vf = VelocityField::new(arch, 4, 3, &mut rng).unwrap();
        let mut b = common::loss_batch(&mut rng, 7, 4, 3);
        b.weights = None;
        let out = genot_loss(&vf, None, &b, 0.0).unwrap();
        let mut expected = 0.0;
        for k in 0..7 {
            expected +=
                b.y.row(k)
                    .iter()
                    .zip(b.z.row(k))
                    .map(|(y, z)| (y - z) * (y - z))
                    .sum::<f64>();
        }
        expected /= 7.0;
        assert!(
            (out.loss - expected).abs() <= 1e-12 * expected,
            "{}",
            arch.as_str()
        );
        assert_eq!(out.reweight, 0.0);
    }
}

fn toy_data() -> (FeatureMatrix, FeatureMatrix, AlignmentPlan) {
    let n = 8;
    let x = FeatureMatrix::unlabelled(Matrix::zeros(n, 1)).unwrap();
    let y = FeatureMatrix::unlabelled(Matrix::filled(n, 1, 1.0)).unwrap();
    let cfg = AlignmentConfig {
        strategy: Strategy::True,
        ..AlignmentConfig::default()
    };
    let plan = AlignmentPlan::build(&x, &y, &PairedSet::identity(n), &cfg).unwrap();
    (x, y, plan)
}

#[test]
fn zero_iterations_leave_parameters_unchanged() {
    let (x, y, plan) = toy_data();
    let mut vf =
        VelocityField::new(Arch::MlpSmall, 1, 1, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
    let before = vf.tensors();
    let cfg = TrainConfig {
        iterations: 0,
        ..TrainConfig::default()
    };
    let h = train(&plan, &x, &y, &mut vf, None, &cfg, None).unwrap();
    assert_eq!(h.iterations_run, 0);
    assert_eq!(vf.tensors(), before);
}

#[test]
fn identical_seeds_give_identical_histories() {
    let (x, y, plan) = toy_data();
    let run = || {
        let mut vf =
            VelocityField::new(Arch::AdalnSmall, 1, 1, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let cfg = TrainConfig {
            iterations: 15,
            batch_size: 8,
            lr: 1e-3,
            seed: 9,
            ..TrainConfig::default()
        };
        let h = train(&plan, &x, &y, &mut vf, None, &cfg, None).unwrap();
        (
            h.to_csv(),
            checkpoint::encode(vf.tensors().iter().map(|(n, m)| (n.as_str(), m))),
        )
    };
    assert_eq!(run(), run());
}

#[test]
fn toy_flow_transports_noise_to_point_mass() {
    let (x, y, plan) = toy_data();
    let mut vf =
        VelocityField::new(Arch::MlpSmall, 1, 1, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
    let cfg = TrainConfig {
        iterations: 2000,
        batch_size: 16,
        lr: 1e-3,
        seed: 7,
        eval_every: 0,
        ..TrainConfig::default()
    };
    train(&plan, &x, &y, &mut vf, None, &cfg, None).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let n = 400;
    let z = normal(&mut rng, n, 1);
    let src = Matrix::zeros(n, 1);
    let out = push_forward(&vf, &src, &z, 100).unwrap();
    let mean = out.as_slice().iter().sum::<f64>() / n as f64;
    assert!((mean - 1.0).abs() < 0.05, "mean {mean}");
}

#[test]
fn trained_field_output_converges_in_step_size() {
    // A spread target keeps the exact field smooth up to t = 1; a point
    // mass makes it singular there.
    let n = 64;
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let x = FeatureMatrix::unlabelled(Matrix::zeros(n, 1)).unwrap();
    let y = FeatureMatrix::unlabelled(Matrix::from_fn(n, 1, |_, _| {
        1.0 + 0.5 * rng.sample::<f64, _>(StandardNormal)
    }))
    .unwrap();
    let cfg = AlignmentConfig {
        strategy: Strategy::True,
        ..AlignmentConfig::default()
    };
    let plan = AlignmentPlan::build(&x, &y, &PairedSet::identity(n), &cfg).unwrap();
    let mut vf =
        VelocityField::new(Arch::MlpSmall, 1, 1, &mut ChaCha8Rng::seed_from_u64(11)).unwrap();
    let cfg = TrainConfig {
        iterations: 1000,
        batch_size: 16,
        lr: 1e-3,
        seed: 12,
        eval_every: 0,
        ..TrainConfig::default()
    };
    train(&plan, &x, &y, &mut vf, None, &cfg, None).unwrap();
    let z = normal(&mut rng, 200, 1);
    let src = Matrix::zeros(200, 1);
    let fine = push_forward(&vf, &src, &z, 100).unwrap();
    let coarse = push_forward(&vf, &src, &z, 50).unwrap();
    assert!(
        coarse.max_abs_diff(&fine) < 1e-5,
        "step change {}",
        coarse.max_abs_diff(&fine)
    );
}
