//! Incompressible Navier-Stokes in vorticity form on the periodic unit
//! square:
//! `w_t = -u w_x - v w_y + nu Laplacian w + f`, with `(u, v) = (psi_y, -psi_x)`
//! and `-Laplacian psi = w`.
//!
//! Crank-Nicolson on diffusion, Adams-Bashforth 2 on advection and forcing,
//! two-thirds dealiasing of the advection term.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::fourier::{dealias_mask, derivative_wavenumbers, wavenumber, Fourier, C64};
use super::Stepper;
use crate::error::{config_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct NsParams {
    pub n: usize,
    pub nu: f64,
    pub dt: f64,
    pub dt_snapshot: f64,
    pub snapshots: usize,
    /// Amplitude `a` of `f = a (sin 2pi(x+y) + cos 2pi(x+y))`.
    pub forcing: f64,
}

impl Default for NsParams {
    fn default() -> Self {
        Self {
            n: 64,
            nu: 1e-3,
            dt: 1e-4,
            dt_snapshot: 0.1,
            snapshots: 50,
            forcing: 0.1,
        }
    }
}

const BLOWUP: f64 = 1e3;

pub fn ns_forcing(n: usize, amplitude: f64) -> Vec<f64> {
    let mut f = Vec::with_capacity(n * n);
    for i in 0..n {
        for j in 0..n {
            let s = 2.0 * PI * (i + j) as f64 / n as f64;
            f.push(amplitude * (s.sin() + s.cos()));
        }
    }
    f
}

pub struct NsSolver {
    fourier: Fourier,
    n: usize,
    dt: f64,
    w: Vec<C64>,
    force: Vec<C64>,
    prev: Option<Vec<C64>>,
    adv: Vec<C64>,
    kx: Vec<f64>,
    ky: Vec<f64>,
    inv_k2: Vec<f64>,
    keep: Vec<bool>,
    lhs: Vec<f64>,
    rhs: Vec<f64>,
    vel: Vec<C64>,
    grad: Vec<C64>,
}

impl NsSolver {
    pub fn new(p: &NsParams, w0: &[f64]) -> Result<Self> {
        let n = p.n;
        if n < 4 || w0.len() != n * n || p.dt <= 0.0 || p.nu < 0.0 {
            return Err(config_err!("bad Navier-Stokes setup: {p:?} with {} initial points", w0.len()));
        }
        let mut fourier = Fourier::new(n, 2);
        let w = fourier.forward_real(w0);
        let force = fourier.forward_real(&ns_forcing(n, p.forcing));
        let kd = derivative_wavenumbers(n);
        let keep1 = dealias_mask(n);
        let len = n * n;
        let (mut kx, mut ky, mut inv_k2, mut keep, mut lhs, mut rhs) =
            (vec![0.0; len], vec![0.0; len], vec![0.0; len], vec![false; len], vec![0.0; len], vec![0.0; len]);
        for a in 0..n {
            for b in 0..n {
                let idx = a * n + b;
                kx[idx] = 2.0 * PI * kd[a];
                ky[idx] = 2.0 * PI * kd[b];
                let k2 = 4.0 * PI * PI * ((wavenumber(a, n) as f64).powi(2) + (wavenumber(b, n) as f64).powi(2));
                inv_k2[idx] = if k2 > 0.0 { 1.0 / k2 } else { 0.0 };
                keep[idx] = keep1[a] && keep1[b];
                let visc = 0.5 * p.dt * p.nu * k2;
                lhs[idx] = 1.0 + visc;
                rhs[idx] = 1.0 - visc;
            }
        }
        Ok(Self {
            fourier,
            n,
            dt: p.dt,
            w,
            force,
            prev: None,
            adv: vec![C64::default(); len],
            kx,
            ky,
            inv_k2,
            keep,
            lhs,
            rhs,
            vel: vec![C64::default(); len],
            grad: vec![C64::default(); len],
        })
    }
}

impl Stepper for NsSolver {
    fn step(&mut self) -> Result<()> {
        let i = C64::new(0.0, 1.0);
        for idx in 0..self.w.len() {
            let w = self.w[idx];
            let psi = w * self.inv_k2[idx];
            // u + i v = (i ky + kx) psi; w_x + i w_y = (i kx - ky) w
            self.vel[idx] = psi * (i * self.ky[idx] + self.kx[idx]);
            self.grad[idx] = w * (i * self.kx[idx] - self.ky[idx]);
        }
        self.fourier.inverse(&mut self.vel);
        self.fourier.inverse(&mut self.grad);
        for idx in 0..self.adv.len() {
            let (u, v) = (self.vel[idx].re, self.vel[idx].im);
            let (wx, wy) = (self.grad[idx].re, self.grad[idx].im);
            self.adv[idx] = C64::new(-(u * wx + v * wy), 0.0);
        }
        self.fourier.forward(&mut self.adv);
        for (a, &k) in self.adv.iter_mut().zip(&self.keep) {
            if !k {
                *a = C64::default();
            }
        }
        for idx in 0..self.w.len() {
            let explicit = match &self.prev {
                Some(p) => 1.5 * self.adv[idx] - 0.5 * p[idx],
                None => self.adv[idx],
            } + self.force[idx];
            self.w[idx] = (self.w[idx] * self.rhs[idx] + explicit * self.dt) / self.lhs[idx];
        }
        match &mut self.prev {
            Some(p) => p.copy_from_slice(&self.adv),
            None => self.prev = Some(self.adv.clone()),
        }
        Ok(())
    }

    fn field(&mut self) -> Vec<f64> {
        self.vel.copy_from_slice(&self.w);
        self.fourier.inverse_real(&mut self.vel)
    }

    fn check(&mut self) -> Result<()> {
        let w = self.field();
        let m = w.iter().fold(0f64, |m, x| m.max(x.abs()));
        if !(m < BLOWUP) {
            return Err(Error::Numerical(format!(
                "Navier-Stokes blow-up: max|w| = {m:e} on a {0}x{0} grid",
                self.n
            )));
        }
        Ok(())
    }
}
