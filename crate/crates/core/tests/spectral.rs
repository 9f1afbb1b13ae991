use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rustfft::num_complex::Complex64 as C;
use uhno::spectral::{effective_modes, spectral_conv, SpectralWeights};
use uhno::{ModelConfig, Tensor, UhnoModel};

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn rand_weights(c: usize, k0: usize, dims: usize, rng: &mut ChaCha8Rng) -> SpectralWeights {
    let shape = SpectralWeights::<f64>::shape(c, k0, dims);
    SpectralWeights { channels: c, k0, dims, re: rand_tensor(&shape, rng), im: rand_tensor(&shape, rng) }
}

/// Direct sums over the full grid. Weight row for a negative `ky` is its
/// position inside the retained negative block.
fn naive(h: &Tensor, w: &SpectralWeights) -> Vec<f64> {
    let s = h.shape();
    let (b, c) = (s[0], s[1]);
    let (ny, nx) = if s.len() == 3 { (1, s[2]) } else { (s[2], s[3]) };
    let kx = w.k0.min(nx / 2);
    let ky = if s.len() == 3 { 1 } else { w.k0.min(ny / 2) };
    let rows: Vec<(usize, usize)> = if s.len() == 3 {
        vec![(0, 0)]
    } else {
        (0..ky).map(|r| (r, r)).chain((0..ky).map(|j| (ny - ky + j, j))).collect()
    };
    let kw = if s.len() == 3 { w.k0 } else { w.k0 * w.k0 };
    let field = |bi: usize, ci: usize| &h.data()[(bi * c + ci) * ny * nx..(bi * c + ci + 1) * ny * nx];
    let mut out = vec![0.0; h.numel()];
    for bi in 0..b {
        for &(fy, wy) in &rows {
            for fx in 0..kx {
                let xhat: Vec<C> = (0..c)
                    .map(|ci| {
                        let f = field(bi, ci);
                        let mut acc = C::new(0.0, 0.0);
                        for y in 0..ny {
                            for x in 0..nx {
                                let ph = -2.0 * PI * ((fy * y) as f64 / ny as f64 + (fx * x) as f64 / nx as f64);
                                acc += f[y * nx + x] * C::from_polar(1.0, ph);
                            }
                        }
                        acc
                    })
                    .collect();
                let mult = if fx == 0 { 1.0 } else { 2.0 };
                for o in 0..c {
                    let mut yk = C::new(0.0, 0.0);
                    for (i, xi) in xhat.iter().enumerate() {
                        let wi = (o * c + i) * kw + wy * w.k0 + fx;
                        yk += C::new(w.re.data()[wi], w.im.data()[wi]) * xi;
                    }
                    for y in 0..ny {
                        for x in 0..nx {
                            let ph = 2.0 * PI * ((fy * y) as f64 / ny as f64 + (fx * x) as f64 / nx as f64);
                            out[((bi * c + o) * ny + y) * nx + x] +=
                                mult * (yk * C::from_polar(1.0, ph)).re / (ny * nx) as f64;
                        }
                    }
                }
            }
        }
    }
    out
}

fn max_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn matches_naive_dft_1d() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for (n, k0) in [(16, 4), (16, 8), (16, 12), (10, 3), (7, 5)] {
        let h = rand_tensor(&[2, 3, n], &mut rng);
        let w = rand_weights(3, k0, 1, &mut rng);
        let d = max_diff(spectral_conv(&h, &w).unwrap().data(), &naive(&h, &w));
        assert!(d < 1e-10, "n={n} k0={k0}: {d}");
    }
}

#[test]
fn matches_naive_dft_2d() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for (ny, nx, k0) in [(16, 16, 4), (8, 8, 6), (8, 12, 3), (6, 10, 2)] {
        let h = rand_tensor(&[2, 2, ny, nx], &mut rng);
        let w = rand_weights(2, k0, 2, &mut rng);
        let d = max_diff(spectral_conv(&h, &w).unwrap().data(), &naive(&h, &w));
        assert!(d < 1e-10, "{ny}x{nx} k0={k0}: {d}");
    }
}

#[test]
fn discards_modes_beyond_budget() {
    let n = 32;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let w = rand_weights(1, 4, 1, &mut rng);
    for k in [4usize, 7, 16] {
        let h = Tensor::from_fn(&[1, 1, n], |x| (2.0 * PI * (k * x) as f64 / n as f64).cos());
        let y = spectral_conv(&h, &w).unwrap();
        assert!(y.data().iter().all(|v| v.abs() < 1e-13), "mode {k}");
    }
    // identity weights reproduce a retained mode
    let eye = SpectralWeights {
        channels: 1,
        k0: 4,
        dims: 1,
        re: Tensor::from_fn(&[1, 1, 4], |_| 1.0),
        im: Tensor::from_fn(&[1, 1, 4], |_| 0.0),
    };
    let h = Tensor::from_fn(&[1, 1, n], |x| (2.0 * PI * (3 * x) as f64 / n as f64).sin());
    assert!(max_diff(spectral_conv(&h, &eye).unwrap().data(), h.data()) < 1e-13);
}

#[test]
fn effective_modes_caps_at_half_extent() {
    assert_eq!(effective_modes(24, 128), 24);
    assert_eq!(effective_modes(24, 32), 16);
    assert_eq!(effective_modes(12, 16), 8);
    assert_eq!(effective_modes(32, 1), 0);
    for (dims, n, levels, k0) in [(1, 16, 2, 12), (1, 64, 3, 24), (2, 16, 3, 12)] {
        let cfg = ModelConfig::new(dims, levels, 4, k0, 3);
        let model = UhnoModel::new(cfg, 0).unwrap();
        let mut shape = vec![1, 1];
        shape.extend(std::iter::repeat_n(n, dims));
        let x = Tensor::from_fn(&shape, |i| (i as f64).sin());
        let (_, trace) = model.predict_traced(&x).unwrap();
        assert!(!trace.modes.is_empty());
        for (label, keff) in &trace.modes {
            let level = if label == "bottleneck" {
                levels - 1
            } else {
                label[3..].parse::<usize>().unwrap()
            };
            assert_eq!(*keff, k0.min((n >> level) / 2), "{label}");
        }
    }
}

#[test]
fn real_input_gives_real_output_of_same_shape() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let h = rand_tensor(&[3, 2, 8, 8], &mut rng);
    let w = rand_weights(2, 4, 2, &mut rng);
    let y = spectral_conv(&h, &w).unwrap();
    assert_eq!(y.shape(), h.shape());
    assert!(y.data().iter().all(|v| v.is_finite()));
    let bad = rand_weights(3, 4, 2, &mut rng);
    assert!(spectral_conv(&h, &bad).is_err());
}
