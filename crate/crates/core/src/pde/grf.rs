//! Periodic Gaussian random fields with covariance
//! `sigma^2 (-Laplacian + tau^2)^(-alpha)` on the unit cell.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::fourier::{is_nyquist, wavenumber, Fourier, C64};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct GrfParams {
    pub alpha: f64,
    pub tau: f64,
    pub sigma: f64,
}

impl Default for GrfParams {
    fn default() -> Self {
        Self {
            alpha: 2.5,
            tau: 7.0,
            sigma: 7f64.powf(1.5),
        }
    }
}

impl GrfParams {
    /// Standard deviation of the Fourier coefficient at squared integer
    /// wavenumber `k2`.
    pub fn amplitude(&self, k2: f64) -> f64 {
        self.sigma * (4.0 * PI * PI * k2 + self.tau * self.tau).powf(-0.5 * self.alpha)
    }
}

/// Draws one real field of `n^dims` values.
///
/// The mean and Nyquist bins are zeroed. Coefficients come from the FFT of
/// real white noise, so conjugate symmetry holds by construction; the field
/// is `sum_k a_k eta_k exp(2 pi i k.x)` with `E|eta_k|^2 = 1`.
pub fn grf_sample<R: Rng + ?Sized>(n: usize, dims: usize, p: &GrfParams, rng: &mut R) -> Vec<f64> {
    let len = n.pow(dims as u32);
    let mut f = Fourier::new(n, dims);
    let mut buf: Vec<C64> = (0..len)
        .map(|_| C64::new(rng.sample(StandardNormal), 0.0))
        .collect();
    f.forward(&mut buf);
    for (idx, z) in buf.iter_mut().enumerate() {
        let bins: [usize; 2] = if dims == 1 { [idx, 0] } else { [idx / n, idx % n] };
        let nyq = bins[..dims].iter().any(|&j| is_nyquist(j, n));
        let k2: f64 = bins[..dims].iter().map(|&j| (wavenumber(j, n) as f64).powi(2)).sum();
        *z *= if nyq || k2 == 0.0 { 0.0 } else { p.amplitude(k2) };
    }
    let scale = (len as f64).sqrt();
    f.inverse_real(&mut buf).into_iter().map(|x| x * scale).collect()
}

pub fn grf_sample_seeded(n: usize, dims: usize, p: &GrfParams, seed: u64) -> Vec<f64> {
    grf_sample(n, dims, p, &mut ChaCha8Rng::seed_from_u64(seed))
}
