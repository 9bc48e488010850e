//! Independent oracles for the diffusion algebra and the overlap penalty.

use layoutdiff_core::diffusion::{strided_timesteps, DiffusionSchedule};
use layoutdiff_core::generator::{generate_indexed, RoomType};
use layoutdiff_core::iou::{
    pair_soft_iou, pair_soft_iou_grad, pairwise_soft_iou, training_loss, BoxParams, LossInputs,
    DEFAULT_SHARPNESS,
};
use layoutdiff_core::{Caps, CategoryTaxonomy, Tier};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn gaussian(rng: &mut ChaCha8Rng) -> f64 {
    // Box-Muller; kept local so the oracle does not share code with the crate.
    let u1: f64 = rng.random_range(f64::EPSILON..1.0);
    let u2: f64 = rng.random();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

#[test]
fn alpha_bar_matches_direct_product() {
    let s = DiffusionSchedule::default_linear();
    let mut prod = 1.0f64;
    for i in 0..1000 {
        let beta = 1e-4 + (2e-2 - 1e-4) * (i as f64) / 999.0;
        prod *= 1.0 - beta;
        let got = s.alpha_bar(i + 1);
        assert!(((got - prod) / prod).abs() < 1e-12, "step {}", i + 1);
    }
    assert!((3e-5..=5e-5).contains(&prod), "alpha_bar_1000 = {prod}");
    // Frozen from the loop above.
    assert!(
        (s.alpha_bar(1000) - 4.035e-5).abs() < 1e-7,
        "{}",
        s.alpha_bar(1000)
    );
    for t in 2..=1000 {
        assert!(s.beta(t) > s.beta(t - 1));
        assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
    }
}

#[test]
fn forward_noise_moments_match_gaussian() {
    let s = DiffusionSchedule::default_linear();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let x0 = [0.8, -0.4, 0.05];
    for &t in &[1usize, 50, 500, 1000] {
        let n = 10_000;
        let mut sum = [0.0; 3];
        let mut sq = [0.0; 3];
        for _ in 0..n {
            let eps: Vec<f64> = (0..3).map(|_| gaussian(&mut rng)).collect();
            let xt = s.forward_noise(&x0, t, &eps).unwrap();
            for k in 0..3 {
                sum[k] += xt[k];
                sq[k] += xt[k] * xt[k];
            }
        }
        let ab = s.alpha_bar(t);
        let var = 1.0 - ab;
        for k in 0..3 {
            let mean = sum[k] / n as f64;
            let emp_var = sq[k] / n as f64 - mean * mean;
            let mean_sigma = (var / n as f64).sqrt();
            assert!(
                (mean - ab.sqrt() * x0[k]).abs() < 3.0 * mean_sigma + 1e-12,
                "t={t} mean"
            );
            // Var of the sample variance of a Gaussian: 2 sigma^4 / (n - 1).
            let var_sigma = (2.0 * var * var / (n as f64 - 1.0)).sqrt();
            assert!(
                (emp_var - var).abs() < 3.0 * var_sigma + 1e-12,
                "t={t} var {emp_var} vs {var}"
            );
        }
    }
}

#[test]
fn v_identities_hold_on_random_triples() {
    let s = DiffusionSchedule::default_linear();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..1000 {
        let t = rng.random_range(1..=1000);
        let x0: Vec<f64> = (0..8).map(|_| rng.random_range(-1.5..1.5)).collect();
        let eps: Vec<f64> = (0..8).map(|_| gaussian(&mut rng)).collect();
        let xt = s.forward_noise(&x0, t, &eps).unwrap();
        let v = s.v_target(&x0, &eps, t).unwrap();
        let (x0_r, eps_r) = s.split_v(&xt, &v, t).unwrap();
        for k in 0..8 {
            assert!((x0_r[k] - x0[k]).abs() < 1e-6);
            assert!((eps_r[k] - eps[k]).abs() < 1e-6);
        }
    }
}

/// Closed-form DDPM posterior mean written in the single-step alpha form.
fn posterior_mean_oracle(s: &DiffusionSchedule, x0: f64, xt: f64, t: usize) -> f64 {
    let beta = s.betas()[t - 1];
    let alpha = 1.0 - beta;
    let ab_t: f64 = s.betas()[..t].iter().map(|b| 1.0 - b).product();
    let ab_prev: f64 = s.betas()[..t - 1].iter().map(|b| 1.0 - b).product();
    (ab_prev.sqrt() * beta / (1.0 - ab_t)) * x0
        + (alpha.sqrt() * (1.0 - ab_prev) / (1.0 - ab_t)) * xt
}

#[test]
fn deterministic_step_with_true_v_is_posterior_mean() {
    let s = DiffusionSchedule::default_linear();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for _ in 0..10 {
        let t = rng.random_range(1..=1000);
        let x0: Vec<f64> = (0..16).map(|_| rng.random_range(-1.0..1.0)).collect();
        let eps: Vec<f64> = (0..16).map(|_| gaussian(&mut rng)).collect();
        let xt = s.forward_noise(&x0, t, &eps).unwrap();
        let v = s.v_target(&x0, &eps, t).unwrap();
        let out = s.reverse_step(&xt, &v, t, None).unwrap();
        for k in 0..16 {
            let want = posterior_mean_oracle(&s, x0[k], xt[k], t);
            assert!((out[k] - want).abs() < 1e-6, "t={t}: {} vs {want}", out[k]);
        }
    }
}

/// Runs the ancestral sampler with the exact v for a known clean sample.
fn oracle_rollout(
    s: &DiffusionSchedule,
    x0: &[f64],
    rng: &mut ChaCha8Rng,
    stride: usize,
) -> Vec<f64> {
    let mut x: Vec<f64> = x0.iter().map(|_| gaussian(rng)).collect();
    let ts = strided_timesteps(s.steps(), stride);
    for (i, &t) in ts.iter().enumerate() {
        let prev = ts.get(i + 1).copied().unwrap_or(0);
        let (a, sd) = s.coefficients(t);
        // eps implied by the current state and the true x0, then the exact v.
        let v: Vec<f64> = x
            .iter()
            .zip(x0)
            .map(|(&xt, &x0)| {
                let eps = (xt - a * x0) / sd;
                a * eps - sd * x0
            })
            .collect();
        let noise: Vec<f64> = x0.iter().map(|_| gaussian(rng)).collect();
        x = s.reverse_jump(&x, &v, t, prev, Some(&noise)).unwrap();
    }
    x
}

#[test]
fn oracle_rollout_recovers_scenes() {
    let s = DiffusionSchedule::default_linear();
    let tax = CategoryTaxonomy::desk();
    let caps = Caps::default();
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    for i in 0..10u64 {
        let scene = generate_indexed(i, 2, &RoomType::ALL, caps, &tax)
            .unwrap()
            .scene;
        let scene = layoutdiff_core::normalize_scene(&scene, scene.frame).unwrap();
        let (p, _) = scene.encode(caps, &tax).unwrap();
        assert_eq!(p.tier, Tier::Primary);
        let x0 = p.values();
        let out = oracle_rollout(&s, x0, &mut rng, 1);
        let err = out
            .iter()
            .zip(x0)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max);
        assert!(err < 1e-3, "scene {i}: {err}");
    }
}

#[test]
fn strided_oracle_rollout_recovers_sample() {
    let s = DiffusionSchedule::default_linear();
    let mut rng = ChaCha8Rng::seed_from_u64(23);
    let x0: Vec<f64> = (0..40).map(|_| rng.random_range(-1.0..1.0)).collect();
    let out = oracle_rollout(&s, &x0, &mut rng, 10);
    let err = out
        .iter()
        .zip(&x0)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    assert!(err < 1e-3, "{err}");
}

fn random_overlapping_pair(rng: &mut ChaCha8Rng) -> (BoxParams, BoxParams) {
    let mut b = || {
        let th: f64 = rng.random_range(-3.1..3.1);
        [
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(-0.2..0.2),
            rng.random_range(0.1..0.5),
            rng.random_range(0.1..0.5),
            rng.random_range(0.1..0.5),
            th.cos() * rng.random_range(0.8..1.2),
            th.sin() * rng.random_range(0.8..1.2),
        ]
    };
    (b(), b())
}

#[test]
fn iou_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(29);
    let k = DEFAULT_SHARPNESS;
    let h = 1e-6;
    let mut checked = 0;
    while checked < 100 {
        let (a, b) = random_overlapping_pair(&mut rng);
        let (v, ga, gb) = pair_soft_iou_grad(&a, &b, k);
        assert!((0.0..=1.0).contains(&v));
        let mut analytic = Vec::new();
        let mut numeric = Vec::new();
        for which in 0..2 {
            for p in 0..8 {
                let (mut ap, mut am, mut bp, mut bm) = (a, a, b, b);
                if which == 0 {
                    ap[p] += h;
                    am[p] -= h;
                } else {
                    bp[p] += h;
                    bm[p] -= h;
                }
                let fd = (pair_soft_iou(&ap, &bp, k) - pair_soft_iou(&am, &bm, k)) / (2.0 * h);
                numeric.push(fd);
                analytic.push(if which == 0 { ga[p] } else { gb[p] });
            }
        }
        let diff: f64 = analytic
            .iter()
            .zip(&numeric)
            .map(|(a, n)| (a - n).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = numeric.iter().map(|n| n * n).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        assert!(
            diff / norm < 1e-4,
            "rel err {} for {:?} {:?}",
            diff / norm,
            a,
            b
        );
        checked += 1;
    }
}

#[test]
fn iou_invariances() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let k = DEFAULT_SHARPNESS;
    for _ in 0..200 {
        let (a, b) = random_overlapping_pair(&mut rng);
        assert_eq!(pair_soft_iou(&a, &b, k), pair_soft_iou(&b, &a, k));
        let shift = [
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
            rng.random_range(-3.0..3.0),
        ];
        let (mut a2, mut b2) = (a, b);
        for d in 0..3 {
            a2[d] += shift[d];
            b2[d] += shift[d];
        }
        assert!((pair_soft_iou(&a, &b, k) - pair_soft_iou(&a2, &b2, k)).abs() < 1e-9);
        let mut far = b;
        far[0] += 10.0;
        assert!(pairwise_soft_iou(&[a, far], &[1.0, 1.0], k) < 1e-12);
    }
}

#[test]
fn training_loss_gradient_matches_central_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(37);
    let c = 5;
    let dim = c + 8;
    let slots = 4;
    let h = 1e-4;
    for trial in 0..5 {
        let v_hat: Vec<f64> = (0..slots * dim)
            .map(|_| rng.random_range(-0.3..0.3))
            .collect();
        let v_true: Vec<f64> = (0..slots * dim)
            .map(|_| rng.random_range(-1.0..1.0))
            .collect();
        let mut x_t: Vec<f64> = (0..slots * dim)
            .map(|_| rng.random_range(-0.2..0.2))
            .collect();
        for i in 0..slots {
            for d in 3..6 {
                x_t[i * dim + c + d] = rng.random_range(0.3..0.6);
            }
            x_t[i * dim + c + 6] = rng.random_range(0.5..1.0);
        }
        let mask = [1.0, 1.0, 0.0, 1.0];
        let occ = [1.0, 1.0, 1.0, 0.0];
        let inputs = |v: &[f64]| -> f64 {
            let inp = LossInputs {
                v_hat: v,
                v_true: &v_true,
                x_t: &x_t,
                coefficients: (0.9, (1.0f64 - 0.81).sqrt()),
                num_classes: c,
                loss_mask: &mask,
                occupancy: &occ,
            };
            training_loss(&inp, 0.5, DEFAULT_SHARPNESS).0.total
        };
        let inp = LossInputs {
            v_hat: &v_hat,
            v_true: &v_true,
            x_t: &x_t,
            coefficients: (0.9, (1.0f64 - 0.81).sqrt()),
            num_classes: c,
            loss_mask: &mask,
            occupancy: &occ,
        };
        let (parts, grad) = training_loss(&inp, 0.5, DEFAULT_SHARPNESS);
        assert!(parts.iou > 0.0, "trial {trial} should overlap");
        let mut fd = vec![0.0; v_hat.len()];
        for k in 0..v_hat.len() {
            let mut p = v_hat.clone();
            let mut m = v_hat.clone();
            p[k] += h;
            m[k] -= h;
            fd[k] = (inputs(&p) - inputs(&m)) / (2.0 * h);
        }
        let diff: f64 = grad
            .iter()
            .zip(&fd)
            .map(|(a, b)| (a - b).powi(2))
            .sum::<f64>()
            .sqrt();
        let norm: f64 = fd.iter().map(|x| x * x).sum::<f64>().sqrt();
        assert!(diff / norm < 1e-4, "trial {trial}: rel err {}", diff / norm);
        // Masked slot receives no MSE gradient.
        for d in 0..c {
            assert_eq!(grad[2 * dim + d], 0.0);
        }
    }
}
