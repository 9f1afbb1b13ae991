use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use uhno::model::{flat_layout, param_count, ForwardOptions};
use uhno::{AblationMode, LossWeights, Model64, ModelConfig, Tensor};

fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn tiny(dims: usize, levels: usize) -> ModelConfig {
    ModelConfig::new(dims, levels, 4, 4, 3)
}

#[test]
fn output_shape_matches_input() {
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for levels in [2, 3] {
        for mode in AblationMode::ALL {
            let m = Model64::new(tiny(1, levels).with_mode(mode), 1).unwrap();
            let x = rand_tensor(&[2, 1, 16], &mut rng);
            assert_eq!(m.predict(&x).unwrap().shape(), x.shape(), "{mode}");
        }
        let m = Model64::new(tiny(2, levels), 1).unwrap();
        let x = rand_tensor(&[1, 1, 8, 16], &mut rng);
        assert_eq!(m.predict(&x).unwrap().shape(), x.shape());
    }
}

#[test]
fn indivisible_extent_is_config_error() {
    let m = Model64::new(tiny(1, 3), 0).unwrap();
    let x = Tensor::zeros(&[1, 1, 18]);
    assert!(matches!(m.predict(&x), Err(uhno::Error::Config(_))));
}

#[test]
fn counted_parameters_match_closed_form() {
    for dims in [1, 2] {
        for mode in AblationMode::ALL {
            let cfg = ModelConfig::new(dims, 3, 8, 5, 3).with_mode(mode);
            let m = Model64::new(cfg.clone(), 0).unwrap();
            assert_eq!(m.param_count(), param_count(&cfg), "{dims}D {mode}");
        }
    }
}

#[test]
fn ablation_counts_relate_to_full() {
    let full = ModelConfig::burgers();
    let pf = param_count(&full) as f64;
    assert!(param_count(&full.clone().with_mode(AblationMode::NoLocal)) < param_count(&full));
    let pg = param_count(&full.clone().with_mode(AblationMode::NoUShape)) as f64;
    assert!((pg - pf).abs() <= 0.1 * pf, "flat {pg} vs full {pf}");
    let (depth, _) = flat_layout(&full);
    assert!((4..=12).contains(&depth));

    // removing the Fourier branch also drops the router, which needs both
    let spectral: usize = (0..3)
        .map(|l| 2 * (32usize << l).pow(2) * 24 * if l == 2 { 1 } else { 2 })
        .sum();
    let router: usize = (0..3)
        .map(|l| {
            let c = 32usize << l;
            (2 * c * c + c + c + 1) * if l == 2 { 1 } else { 2 }
        })
        .sum();
    let pb = param_count(&full.clone().with_mode(AblationMode::NoGlobal));
    assert_eq!(pb, param_count(&full) - spectral - router);
}

#[test]
fn resolution_invariant_parameters() {
    let m = Model64::new(tiny(1, 3), 3).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    for n in [16, 32, 64] {
        let x = rand_tensor(&[1, 1, n], &mut rng);
        assert_eq!(m.predict(&x).unwrap().shape(), &[1, 1, n]);
    }
}

#[test]
fn deterministic_forward() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let x = rand_tensor(&[2, 1, 32], &mut rng);
    let a = Model64::new(tiny(1, 2), 7).unwrap().predict(&x).unwrap();
    let b = Model64::new(tiny(1, 2), 7).unwrap().predict(&x).unwrap();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}

fn fd_check(cfg: ModelConfig, seed: u64, samples: usize) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut model = Model64::new(cfg, seed).unwrap();
    let x = rand_tensor(&[2, 1, 16], &mut rng);
    let y = rand_tensor(&[2, 1, 16], &mut rng);
    let w = LossWeights::BURGERS;
    let base = model.loss_and_grads(&x, &y, &w, ForwardOptions::default()).unwrap();
    let frozen = base.trace.freeze();
    let opts = ForwardOptions { frozen: Some(&frozen) };
    let with_frozen = model.loss_and_grads(&x, &y, &w, opts).unwrap();
    assert_eq!(with_frozen.loss.total.to_bits(), base.loss.total.to_bits());
    let total: usize = model.params().iter().map(|p| p.numel()).sum();
    let (mut num, mut den) = (0.0, 0.0);
    for _ in 0..samples {
        let mut k = rng.random_range(0..total);
        let mut slot = 0;
        while k >= model.params()[slot].numel() {
            k -= model.params()[slot].numel();
            slot += 1;
        }
        let h = 1e-6;
        let orig = model.params()[slot].data()[k];
        model.params_mut()[slot].data_mut()[k] = orig + h;
        let fp = model.loss(&x, &y, &w, opts).unwrap().total;
        model.params_mut()[slot].data_mut()[k] = orig - h;
        let fm = model.loss(&x, &y, &w, opts).unwrap().total;
        model.params_mut()[slot].data_mut()[k] = orig;
        let fd = (fp - fm) / (2.0 * h);
        let ad = with_frozen.grads[slot][k];
        num += (fd - ad) * (fd - ad);
        den += fd * fd;
    }
    (num / den).sqrt()
}

#[test]
fn mode_gradients_match_fd() {
    for mode in [AblationMode::NoSpar, AblationMode::NoLocal, AblationMode::NoGlobal, AblationMode::SymDec, AblationMode::NoNorm] {
        let err = fd_check(tiny(1, 2).with_mode(mode), 11, 48);
        assert!(err < 1e-6, "{mode}: {err}");
    }
}

#[test]
fn full_gradient_matches_fd() {
    let err = fd_check(tiny(1, 2), 5, 64);
    assert!(err < 1e-6, "{err}");
}
