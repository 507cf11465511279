use msls::eval::kernel_similarity;
use msls::gradient::Direction;
use msls::kernelest::{estimate_kernel, soft_threshold, solve_kernel_fft, solve_kernel_fft_raw, CompensationField, KernelSolveParams};
use msls::nonblind::{tv_admm_periodic, tv_deblur, tv_deblur_traced};
use msls::scenes::{render, SceneKind};
use msls::synth::{random_walk_kernel, synth_blur, SyntheticBlurSpec};
use msls::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn noise(w: usize, h: usize, seed: u64) -> Image {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Image::from_fn(w, h, |_, _| rng.random::<f64>())
}

/// Scans `1/2 (v - z)^2 + lambda |v|` on a grid, then bisects the subgradient
/// inside the best grid cell.
fn brute_prox(z: f64, lambda: f64) -> f64 {
    let f = |v: f64| 0.5 * (v - z).powi(2) + lambda * v.abs();
    let span = z.abs() + 1.0;
    let n = 4000;
    let step = 2.0 * span / n as f64;
    let best = (0..=n).map(|i| -span + step * i as f64).fold(0.0, |b, v| if f(v) < f(b) { v } else { b });
    let (mut a, mut b) = (best - step, best + step);
    // 0 is optimal iff it lies in the subdifferential at 0
    if a <= 0.0 && b >= 0.0 && z.abs() <= lambda {
        return 0.0;
    }
    let slope = |v: f64| v - z + lambda * v.signum();
    for _ in 0..200 {
        let m = 0.5 * (a + b);
        if slope(m) > 0.0 {
            b = m;
        } else {
            a = m;
        }
    }
    0.5 * (a + b)
}

#[test]
fn soft_threshold_examples() {
    assert!((soft_threshold(0.10, 0.05) - 0.05f64).abs() < 1e-15);
    assert!((soft_threshold(-0.20, 0.05) + 0.15f64).abs() < 1e-15);
    assert_eq!(soft_threshold(0.03f64, 0.05), 0.0);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    #[test]
    fn soft_threshold_is_the_l1_prox(z in -2.0f64..2.0, lambda in 0.0f64..1.0) {
        prop_assert!((soft_threshold(z, lambda) - brute_prox(z, lambda)).abs() < 1e-9);
    }
}

/// Dense normal equations over every periodic shift: `(sum A_d^T A_d + 2 lambda I) k = sum A_d^T g_b`.
fn dense_kernel(x: &Image, b: &Image, lambda: f64, order: usize) -> Vec<f64> {
    let (w, h) = x.dims();
    let n = w * h;
    let gx = gradient(x, order, Boundary::Periodic).unwrap();
    let gb = gradient(b, order, Boundary::Periodic).unwrap();
    let mut ata = DMatrix::<f64>::identity(n, n) * (2.0 * lambda);
    let mut atb = DVector::<f64>::zeros(n);
    for d in gx.directions() {
        let gxd = gx.get(d).unwrap();
        let gbd = gb.get(d).unwrap();
        // column m of A_d is grad_d x shifted by m
        let a = DMatrix::from_fn(n, n, |p, m| {
            let (px, py) = ((p % w) as isize, (p / w) as isize);
            let (mx, my) = ((m % w) as isize, (m / w) as isize);
            gxd.get_wrapped(px - mx, py - my)
        });
        ata += a.transpose() * &a;
        atb += a.transpose() * DVector::from_column_slice(gbd.data());
    }
    ata.cholesky().expect("positive definite").solve(&atb).as_slice().to_vec()
}

#[test]
fn fft_solve_matches_dense_least_squares() {
    for t in 0..4u64 {
        let x = noise(16, 16, t);
        let k = random_walk_kernel::<f64>(5, t);
        let b = convolve2d(&x, &k, Boundary::Periodic).unwrap().zip_map(&noise(16, 16, 50 + t), |a, e| a + 0.01 * e).unwrap();
        for order in [1, 2] {
            let raw = solve_kernel_fft_raw(&x, &b, None, 0.05, order).unwrap();
            let dense = dense_kernel(&x, &b, 0.05, order);
            let err = raw.data().iter().zip(&dense).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
            assert!(err < 1e-6, "instance {t} order {order}: {err}");
        }
    }
}

#[test]
fn near_unregularized_solve_recovers_kernel() {
    let x = render::<f64>(SceneKind::City, 64, 64, 2);
    let k = random_walk_kernel::<f64>(7, 3);
    let b = convolve2d(&x, &k, Boundary::Periodic).unwrap();
    let gx = gradient(&x, 1, Boundary::Periodic).unwrap();
    let gb = gradient(&b, 1, Boundary::Periodic).unwrap();
    let v = CompensationField::zeros(1, 64, 64);
    let raw = solve_kernel_fft_raw(&x, &b, None, 1e-6, 1).unwrap();
    let mut err: f64 = 0.0;
    for yy in 0..7 {
        for xx in 0..7 {
            err = err.max((raw.get_wrapped(xx as isize - 3, yy as isize - 3) - k.get(xx, yy)).abs());
        }
    }
    assert!(err <= 1e-3, "{err}");
    let est = solve_kernel_fft(&gx, &gb, &v, 1e-6, 7, &PostprocessConfig::default()).unwrap();
    assert!(kernel_similarity(&est, &k) >= 0.99);
    let same = solve_kernel_fft(&gx, &gx, &v, 1e-9, 7, &PostprocessConfig::default()).unwrap();
    assert!(msls::pyramid::delta_distance(&same) < 1e-9);
    let flat = gradient(&Image::filled(64, 64, 0.5), 1, Boundary::Periodic).unwrap();
    assert!(matches!(solve_kernel_fft(&flat, &gb, &v, 1e-3, 7, &PostprocessConfig::default()), Err(Error::DegenerateDataTerm)));
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    #[test]
    fn quadratic_is_homogeneous(seed in 0u64..1000, lambda in 1e-3f64..1.0) {
        let x = noise(24, 20, seed);
        let b = convolve2d(&x, &random_walk_kernel(5, seed), Boundary::Periodic).unwrap();
        let a = solve_kernel_fft_raw(&x, &b, None, lambda, 1).unwrap();
        let s = solve_kernel_fft_raw(&x.map(|v| 2.0 * v), &b.map(|v| 2.0 * v), None, 4.0 * lambda, 1).unwrap();
        let err = a.data().iter().zip(s.data()).map(|(p, q)| (p - q).abs()).fold(0.0, f64::max);
        prop_assert!(err < 1e-10);
    }
}

#[test]
fn alternation_objective_never_increases() {
    let cfg = DeblurConfig::default();
    for (i, kind) in SceneKind::ALL.into_iter().enumerate() {
        let x = render::<f64>(kind, 96, 96, i as u64);
        let k = random_walk_kernel::<f64>(9, 40 + i as u64);
        let b = synth_blur(&x, &SyntheticBlurSpec { kernel: k, noise_sigma: 0.01, seed: 1 }).unwrap();
        let x_hat = msls::conv::gaussian_blur(&x, 0.7);
        for params in [KernelSolveParams::preliminary(&cfg, 9), KernelSolveParams::refinement(&cfg, 9)] {
            let est = estimate_kernel(&x_hat, &b, &params, None).unwrap();
            assert_eq!(est.objective.len(), params.inner_iterations);
            for p in est.objective.windows(2) {
                assert!(p[1] <= p[0] * (1.0 + 1e-6), "{kind:?}: {:?}", est.objective);
            }
            assert_eq!(est.compensation.get(Direction::XY).is_some(), params.order == 2);
        }
    }
}

#[test]
fn exact_latent_gives_accurate_kernel() {
    let cfg = DeblurConfig::default();
    for (i, kind) in [SceneKind::City, SceneKind::Landscape, SceneKind::StillLife].into_iter().enumerate() {
        let x = render::<f64>(kind, 128, 128, i as u64);
        let k = random_walk_kernel::<f64>(11, 60 + i as u64);
        let b = convolve2d(&x, &k, Boundary::Replicate).unwrap();
        let params = KernelSolveParams { lambda_k: 1e-3, ..KernelSolveParams::preliminary(&cfg, 11) };
        let est = estimate_kernel(&x, &b, &params, None).unwrap();
        let s = kernel_similarity(&est.kernel, &k);
        assert!(s >= 0.99, "{kind:?}: {s}");
    }
}

#[test]
fn tv_with_true_kernel_halves_error() {
    for (i, kind) in [SceneKind::City, SceneKind::Landscape, SceneKind::Shapes].into_iter().enumerate() {
        let x = render::<f64>(kind, 512, 512, i as u64);
        let k = random_walk_kernel::<f64>(15, 70 + i as u64);
        let b = synth_blur(&x, &SyntheticBlurSpec { kernel: k.clone(), noise_sigma: 0.01, seed: i as u64 }).unwrap();
        let cfg = AdmmConfig { iterations: 300, ..AdmmConfig::default() };
        let (out, trace) = tv_deblur_traced(&b, &k, 0.01, &cfg).unwrap();
        let ratio = out.mse(&x).unwrap() / b.mse(&x).unwrap();
        assert!(ratio <= 0.5, "{kind:?}: {ratio}");
        assert!(trace.iterations() < 300);
        assert!(out.data().iter().all(|v| (0.0..=1.0).contains(v)));
        for p in trace.lagrangian.windows(2).skip(2) {
            assert!(p[1] <= p[0] + 1e-6 * p[0].abs(), "{kind:?}: {:?}", trace.lagrangian);
        }
        let r = &trace.primal_residual;
        assert!(r[r.len() - 1] * 10.0 <= r[0], "{kind:?}: {r:?}");
    }
}

#[test]
fn identity_kernel_and_flat_limit() {
    let x = render::<f64>(SceneKind::Shapes, 64, 64, 3);
    let out = tv_deblur(&x, &Kernel::delta(), 0.01, &AdmmConfig::default()).unwrap();
    assert!(out.mse(&x).unwrap() <= 1e-3);
    let cfg = AdmmConfig { iterations: 1000, tolerance: 0.0, ..AdmmConfig::default() };
    let (state, _) = tv_admm_periodic(&x, &Kernel::delta(), 100.0, &cfg).unwrap();
    assert!(state.x.variance() < 0.01 * x.variance());
    assert!(tv_deblur(&x, &Kernel::box_filter(65), 0.01, &AdmmConfig::default()).is_err());
}
