//! Complex FFTs on periodic 1D/2D grids for the reference solvers.

use std::sync::Arc;

use rustfft::num_complex::Complex64;
use rustfft::{Fft, FftPlanner};

pub type C64 = Complex64;

/// Unnormalized forward, `1/N^d` inverse, square grids only.
pub struct Fourier {
    n: usize,
    dims: usize,
    fwd: Arc<dyn Fft<f64>>,
    inv: Arc<dyn Fft<f64>>,
    scratch: Vec<C64>,
    tbuf: Vec<C64>,
}

impl Fourier {
    pub fn new(n: usize, dims: usize) -> Self {
        let mut planner = FftPlanner::new();
        let fwd = planner.plan_fft_forward(n);
        let inv = planner.plan_fft_inverse(n);
        let len = fwd
            .get_inplace_scratch_len()
            .max(inv.get_inplace_scratch_len());
        Self {
            n,
            dims,
            fwd,
            inv,
            scratch: vec![C64::default(); len],
            tbuf: if dims == 2 { vec![C64::default(); n * n] } else { Vec::new() },
        }
    }

    pub fn len(&self) -> usize {
        self.n.pow(self.dims as u32)
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    fn run(&mut self, buf: &mut [C64], inverse: bool) {
        let plan = if inverse { &self.inv } else { &self.fwd };
        plan.process_with_scratch(buf, &mut self.scratch);
        if self.dims == 2 {
            transpose(buf, &mut self.tbuf, self.n);
            plan.process_with_scratch(&mut self.tbuf, &mut self.scratch);
            transpose(&self.tbuf, buf, self.n);
        }
    }

    pub fn forward(&mut self, buf: &mut [C64]) {
        self.run(buf, false);
    }

    pub fn inverse(&mut self, buf: &mut [C64]) {
        self.run(buf, true);
        let s = 1.0 / self.len() as f64;
        buf.iter_mut().for_each(|z| *z *= s);
    }

    pub fn forward_real(&mut self, u: &[f64]) -> Vec<C64> {
        let mut buf: Vec<C64> = u.iter().map(|&x| C64::new(x, 0.0)).collect();
        self.forward(&mut buf);
        buf
    }

    /// Real part of the inverse transform; `buf` is left transformed.
    pub fn inverse_real(&mut self, buf: &mut [C64]) -> Vec<f64> {
        self.inverse(buf);
        buf.iter().map(|z| z.re).collect()
    }
}

fn transpose(src: &[C64], dst: &mut [C64], n: usize) {
    for i in 0..n {
        for j in 0..n {
            dst[j * n + i] = src[i * n + j];
        }
    }
}

/// Signed integer wavenumber of FFT bin `j`.
pub fn wavenumber(j: usize, n: usize) -> i64 {
    if j <= n / 2 {
        j as i64
    } else {
        j as i64 - n as i64
    }
}

pub fn is_nyquist(j: usize, n: usize) -> bool {
    n % 2 == 0 && j == n / 2
}

/// Integer wavenumbers with the Nyquist bin zeroed, as used for odd
/// derivatives.
pub fn derivative_wavenumbers(n: usize) -> Vec<f64> {
    (0..n)
        .map(|j| if is_nyquist(j, n) { 0.0 } else { wavenumber(j, n) as f64 })
        .collect()
}

/// Two-thirds rule: bin `j` survives iff `3|k| < n`.
pub fn dealias_mask(n: usize) -> Vec<bool> {
    (0..n).map(|j| 3 * wavenumber(j, n).unsigned_abs() < n as u64).collect()
}
