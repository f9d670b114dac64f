//! Helpers shared by the integration test targets.

#![allow(dead_code)]

use bridgeflow::genot::{genot_loss, Arch, LossBatch, ReweightingNets, VelocityField};
use bridgeflow::Matrix;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

const H: f64 = 1e-5;

pub fn normal(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Matrix {
    Matrix::from_fn(r, c, |_, _| rng.sample(StandardNormal))
}

/// Replaces every tensor with uniform noise of scale `1/sqrt(rows)` so the
/// zero-initialized heads and gates carry gradient.
pub fn randomize(ps: &mut bridgeflow::nn::ParamStore, rng: &mut ChaCha8Rng) {
    for id in 0..ps.len() {
        let (r, c) = ps.value(id).shape();
        let s = 1.0 / (r as f64).sqrt();
        *ps.value_mut(id) = Matrix::from_fn(r, c, |_, _| rng.gen_range(-s..s));
    }
}

pub fn loss_batch(rng: &mut ChaCha8Rng, b: usize, p: usize, q: usize) -> LossBatch {
    LossBatch {
        x: normal(rng, b, p),
        y: normal(rng, b, q),
        z: normal(rng, b, q),
        t: (0..b).map(|_| rng.gen()).collect(),
        weights: Some((
            (0..b).map(|_| rng.gen_range(0.5..2.0)).collect(),
            (0..b).map(|_| rng.gen_range(0.5..2.0)).collect(),
        )),
    }
}

/// Worst relative error between central differences of the full loss and
/// the analytic gradient over `probes` random field and reweighting entries.
pub fn fd_check(arch: Arch, probes: usize, seed: u64) -> f64 {
    let (p, q) = (3, 2);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut vf = VelocityField::new(arch, p, q, &mut rng).unwrap();
    let mut rw = ReweightingNets::new(p, q, &mut rng).unwrap();
    randomize(vf.params_mut(), &mut rng);
    randomize(rw.params_mut(), &mut rng);
    let batch = loss_batch(&mut rng, 5, p, q);
    let sigma = 0.1;
    let out = genot_loss(&vf, Some(&rw), &batch, sigma).unwrap();
    let reweight_grads = out.reweight_grads.as_ref().unwrap();

    let mut worst = 0.0f64;
    for _ in 0..probes {
        let field_side = rng.gen_bool(0.75);
        let store_len = if field_side {
            vf.params().len()
        } else {
            rw.params().len()
        };
        let id = rng.gen_range(0..store_len);
        let (r, c) = if field_side { vf.params() } else { rw.params() }
            .value(id)
            .shape();
        let (i, j) = (rng.gen_range(0..r), rng.gen_range(0..c));
        let mut eval = |delta: f64| {
            let store = if field_side {
                vf.params_mut()
            } else {
                rw.params_mut()
            };
            store.value_mut(id)[(i, j)] += delta;
            let l = genot_loss(&vf, Some(&rw), &batch, sigma).unwrap().loss;
            let store = if field_side {
                vf.params_mut()
            } else {
                rw.params_mut()
            };
            store.value_mut(id)[(i, j)] -= delta;
            l
        };
        let fd = (eval(H) - eval(-H)) / (2.0 * H);
        let an = if field_side {
            out.grads.get(id)
        } else {
            reweight_grads.get(id)
        }[(i, j)];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-6);
        worst = worst.max(if rel.is_nan() { f64::INFINITY } else { rel });
    }
    worst
}
