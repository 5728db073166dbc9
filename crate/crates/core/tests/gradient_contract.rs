//! Gradient and stop-gradient contracts, checked in f64 against central
//! finite differences.

use feasc::config::{EncoderSpec, HeadSpec, Mode, Strategy};
use feasc::contrast::{SiameseNet, StepSettings, Targets};
use feasc::nn::{Batch4, Mat};
use feasc::suppression::{build_mask, channel_sum, ResponseMap, SuppressionMask};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn specs() -> (EncoderSpec, HeadSpec) {
    (
        EncoderSpec {
            arch: "convnet".into(),
            in_channels: 3,
            channels: vec![4, 6],
            strides: vec![1, 2],
        },
        HeadSpec {
            projector_hidden: 8,
            embed_dim: 5,
            predictor_hidden: 4,
        },
    )
}

fn random_batch(rng: &mut ChaCha8Rng, n: usize, c: usize, h: usize, w: usize) -> Batch4<f64> {
    Batch4::from_vec(n, c, h, w, (0..n * c * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect())
}

fn masks_for(f: &Batch4<f64>, eta: f64) -> Vec<SuppressionMask> {
    (0..f.n)
        .map(|i| {
            let m = ResponseMap::new(f.h, f.w, channel_sum(f.sample(i), f.c, f.h, f.w)).unwrap();
            build_mask(&m, eta).unwrap()
        })
        .collect()
}

fn online_grads(net: &mut SiameseNet<f64>) -> Vec<f64> {
    net.online_params_mut().iter().flat_map(|p| p.grad.clone()).collect()
}

#[test]
fn feature_gradient_is_zero_under_the_mask_and_exact_elsewhere() {
    let (e, h) = specs();
    for mode in [Mode::Simsiam, Mode::Byol] {
        for through_predictor in [true, false] {
            let net = SiameseNet::<f64>::new(mode, &e, &h, through_predictor, 11);
            let mut rng = ChaCha8Rng::seed_from_u64(12);
            let f = random_batch(&mut rng, 4, 6, 5, 5);
            let z = Mat::from_vec(4, 5, (0..20).map(|_| rng.gen_range(-1.0..1.0)).collect());
            let masks = masks_for(&f, 0.3);
            assert!(masks.iter().all(|m| m.count_suppressed == 8));

            let (_, _, grad) = net.clone().suppressed_term(&f, &masks, &z, Some(1.0)).unwrap();
            let grad = grad.unwrap();
            let loss = |x: &Batch4<f64>| net.clone().suppressed_term(x, &masks, &z, None).unwrap().0;

            let plane = f.h * f.w;
            let mut worst = 0.0f64;
            for idx in 0..f.data.len() {
                let sample = idx / f.sample_len();
                let loc = idx % plane;
                let analytic = grad.data[idx];
                if masks[sample].values[loc] == 1 {
                    assert_eq!(analytic, 0.0, "{mode:?}: gradient leaks through a masked cell");
                    continue;
                }
                let step = 1e-5;
                let mut x = f.clone();
                x.data[idx] += step;
                let up = loss(&x);
                x.data[idx] -= 2.0 * step;
                let down = loss(&x);
                let numeric = (up - down) / (2.0 * step);
                let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8);
                worst = worst.max(rel);
            }
            assert!(worst < 1e-4, "{mode:?} through_predictor={through_predictor}: worst relative error {worst}");
        }
    }
}

#[test]
fn target_branch_receives_no_gradient() {
    let (e, h) = specs();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let v1 = random_batch(&mut rng, 3, 3, 8, 8);
    let v2 = random_batch(&mut rng, 3, 3, 8, 8);
    let s = StepSettings {
        eta: 0.25,
        lambda: 1.0,
        strategy: Strategy::Feasc,
        mask_seed: 0,
    };

    let mut byol = SiameseNet::<f64>::new(Mode::Byol, &e, &h, true, 22);
    byol.zero_grad();
    byol.train_step(&v1, &v2, &s).unwrap();
    assert!(byol.target_params().iter().all(|p| p.grad.iter().all(|&g| g == 0.0)));
    assert!(online_grads(&mut byol).iter().any(|&g| g != 0.0));

    // SimSiam: the detached twin must act as a constant, so supplying its
    // outputs as fixed targets cannot change any online gradient.
    for mode in [Mode::Simsiam, Mode::Byol] {
        let net = SiameseNet::<f64>::new(mode, &e, &h, true, 23);
        let z1 = net.clone().forward_views(&v1, &v2, &s).unwrap().z;
        let z2 = net.clone().forward_views(&v2, &v1, &s).unwrap().z;
        let mut own = net.clone();
        own.zero_grad();
        own.run(&v1, &v2, Targets::Own, &s, true).unwrap();
        let mut given = net.clone();
        given.zero_grad();
        given.run(&v1, &v2, Targets::Given { z1, z2 }, &s, true).unwrap();
        assert_eq!(online_grads(&mut own), online_grads(&mut given), "{mode:?}");
    }
}

#[test]
fn zero_eta_with_unit_lambda_doubles_the_symmetric_loss() {
    let (e, h) = specs();
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let v = random_batch(&mut rng, 4, 3, 8, 8);
    for mode in [Mode::Simsiam, Mode::Byol] {
        let net = SiameseNet::<f64>::new(mode, &e, &h, true, 32);
        let with = StepSettings {
            eta: 0.0,
            lambda: 1.0,
            strategy: Strategy::Feasc,
            mask_seed: 0,
        };
        let base = StepSettings { lambda: 0.0, ..with };

        let mut a = net.clone();
        a.zero_grad();
        let ra = a.train_step(&v, &v, &with).unwrap();
        let mut b = net.clone();
        b.zero_grad();
        let rb = b.train_step(&v, &v, &base).unwrap();

        assert!((ra.total - 2.0 * ra.d_orig).abs() < 1e-12, "{mode:?}");
        assert_eq!(ra.d_orig, rb.d_orig);
        for (ga, gb) in online_grads(&mut a).iter().zip(online_grads(&mut b)) {
            assert!((ga - 2.0 * gb).abs() <= 1e-9 * (1.0 + gb.abs()), "{mode:?}: {ga} vs 2*{gb}");
        }
    }
}
