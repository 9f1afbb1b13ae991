use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uhno::gaussian::{build_kernel, kernel_radius};
use uhno::tensor::gradcheck::check;
use uhno::{Graph64, Tensor};

#[test]
fn radius_is_ceil_three_sigma() {
    assert_eq!(kernel_radius(0.5), 2);
    assert_eq!(kernel_radius(1.0), 3);
    assert_eq!(kernel_radius(2.5), 8);
    assert_eq!(kernel_radius(0.2), 1);
    assert_eq!(build_kernel(0.5, 1).unwrap().shape(), &[5]);
    assert_eq!(build_kernel(0.5, 2).unwrap().shape(), &[5, 5]);
}

#[test]
fn kernel_matches_formula() {
    for sigma in [0.3, 0.5, 1.0, 1.7] {
        let k = build_kernel(sigma, 1).unwrap();
        let r = kernel_radius(sigma) as i64;
        let raw: Vec<f64> = (-r..=r).map(|d| (-(d * d) as f64 / (2.0 * sigma * sigma)).exp()).collect();
        let z: f64 = raw.iter().sum();
        for (a, b) in k.data().iter().zip(&raw) {
            assert!((a - b / z).abs() < 1e-15);
        }
        let k2 = build_kernel(sigma, 2).unwrap();
        let w = (2 * r + 1) as usize;
        // separable: the 2D kernel is the outer product of the 1D one
        for y in 0..w {
            for x in 0..w {
                assert!((k2.data()[y * w + x] - k.data()[y] * k.data()[x]).abs() < 1e-15);
            }
        }
    }
    assert!(build_kernel(0.0, 1).is_err());
    assert!(build_kernel(1.0, 3).is_err());
}

#[test]
fn kernels_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for dims in [1, 2] {
        let ls = Tensor::from_fn(&[6], |_| rng.random_range(-2.0..2.0));
        let mut g = Graph64::new();
        let v = g.constant(&ls);
        let (k, radii) = g.gaussian_kernels(v, dims, true, None).unwrap();
        let ntap = g.shape(k)[1];
        for (gi, row) in g.value(k).chunks(ntap).enumerate() {
            assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert_eq!(radii[gi], kernel_radius(ls.data()[gi].exp()));
        }
    }
}

#[test]
fn log_sigma_gradient_matches_fd() {
    let ls = Tensor::new(vec![3], vec![-0.7, 0.1, 0.9]).unwrap();
    let probe = Tensor::from_fn(&[3, 15], |i| ((i * 7 % 11) as f64 - 5.0) / 3.0);
    for normalize in [true, false] {
        let r = check(&[ls.clone()], 1e-6, |g, v| {
            let (k, _) = g.gaussian_kernels(v[0], 1, normalize, Some(&[7, 7, 7]))?;
            let p = g.constant(&probe);
            let m = g.mul(k, p)?;
            Ok(g.sum(m))
        })
        .unwrap();
        assert!(r.rel_error() < 1e-7, "{}", r.rel_error());
    }
}

#[test]
fn smoothing_commutes_with_shifts() {
    let n = 16;
    let x = Tensor::from_fn(&[1, 2, n], |i| ((i * 37 % 13) as f64).sin());
    let shifted = Tensor::from_fn(&[1, 2, n], |i| {
        let (c, j) = (i / n, i % n);
        x.data()[c * n + (j + n - 3) % n]
    });
    let ls = Tensor::new(vec![2], vec![0.2_f64.ln(), 0.0]).unwrap();
    let run = |t: &Tensor| {
        let mut g = Graph64::new();
        let (xv, lv) = (g.constant(t), g.constant(&ls));
        let (k, _) = g.gaussian_kernels(lv, 1, true, None).unwrap();
        let y = g.depthwise_conv(xv, k).unwrap();
        g.tensor(y)
    };
    let (a, b) = (run(&x), run(&shifted));
    for c in 0..2 {
        for j in 0..n {
            let want = a.data()[c * n + (j + n - 3) % n];
            assert!((b.data()[c * n + j] - want).abs() < 1e-14);
        }
    }
    // unit mass preserves the mean
    let mean = |t: &Tensor| t.data().iter().sum::<f64>();
    assert!((mean(&a) - mean(&x)).abs() < 1e-12);
}
