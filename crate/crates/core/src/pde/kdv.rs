//! Korteweg-de Vries `u_t + 6 u u_x + u_xxx = 0` with integrating-factor RK4.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::fourier::{dealias_mask, derivative_wavenumbers, Fourier, C64};
use super::Stepper;
use crate::error::{config_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KdvParams {
    pub n: usize,
    pub lx: f64,
    pub dt: f64,
    pub dt_snapshot: f64,
    pub snapshots: usize,
}

impl Default for KdvParams {
    fn default() -> Self {
        Self {
            n: 128,
            lx: 64.0,
            dt: 0.002,
            dt_snapshot: 1.0,
            snapshots: 51,
        }
    }
}

const BLOWUP: f64 = 1e3;

pub struct KdvSolver {
    fourier: Fourier,
    v: Vec<C64>,
    // exp(i k^3 h / 2)
    e: Vec<C64>,
    g: Vec<C64>,
    dt: f64,
    buf: Vec<C64>,
}

impl KdvSolver {
    pub fn new(p: &KdvParams, u0: &[f64]) -> Result<Self> {
        if p.n < 4 || p.lx <= 0.0 || p.dt <= 0.0 || u0.len() != p.n {
            return Err(config_err!("bad KdV setup: {p:?} with {} initial points", u0.len()));
        }
        let n = p.n;
        let mut fourier = Fourier::new(n, 1);
        let v = fourier.forward_real(u0);
        let keep = dealias_mask(n);
        let scale = 2.0 * PI / p.lx;
        let k: Vec<f64> = derivative_wavenumbers(n).iter().map(|j| j * scale).collect();
        Ok(Self {
            fourier,
            v,
            e: k.iter().map(|k| C64::from_polar(1.0, k.powi(3) * p.dt / 2.0)).collect(),
            g: (0..n)
                .map(|j| if keep[j] { C64::new(0.0, -3.0 * k[j]) } else { C64::default() })
                .collect(),
            dt: p.dt,
            buf: vec![C64::default(); n],
        })
    }

    fn nonlinear(&mut self, v: &[C64]) -> Vec<C64> {
        self.buf.copy_from_slice(v);
        self.fourier.inverse(&mut self.buf);
        self.buf.iter_mut().for_each(|z| *z = C64::new(z.re * z.re, 0.0));
        self.fourier.forward(&mut self.buf);
        let h = self.dt;
        self.buf.iter().zip(&self.g).map(|(a, g)| a * g * h).collect()
    }
}

impl Stepper for KdvSolver {
    fn step(&mut self) -> Result<()> {
        let n = self.v.len();
        let v = self.v.clone();
        let e = self.e.clone();
        let a = self.nonlinear(&v);
        let s: Vec<C64> = (0..n).map(|j| e[j] * (v[j] + a[j] / 2.0)).collect();
        let b = self.nonlinear(&s);
        let s: Vec<C64> = (0..n).map(|j| e[j] * v[j] + b[j] / 2.0).collect();
        let c = self.nonlinear(&s);
        let s: Vec<C64> = (0..n).map(|j| e[j] * e[j] * v[j] + e[j] * c[j]).collect();
        let d = self.nonlinear(&s);
        for j in 0..n {
            let e2 = e[j] * e[j];
            self.v[j] = e2 * v[j] + (e2 * a[j] + 2.0 * e[j] * (b[j] + c[j]) + d[j]) / 6.0;
        }
        Ok(())
    }

    fn field(&mut self) -> Vec<f64> {
        self.buf.copy_from_slice(&self.v);
        self.fourier.inverse_real(&mut self.buf)
    }

    fn check(&mut self) -> Result<()> {
        let u = self.field();
        let m = u.iter().fold(0f64, |m, x| m.max(x.abs()));
        if !(m < BLOWUP) {
            return Err(Error::Numerical(format!("KdV blow-up: max|u| = {m:e}")));
        }
        Ok(())
    }
}

/// One-soliton profile `c/2 sech^2(sqrt(c)/2 (x - c t - x0))`, wrapped onto
/// the periodic domain.
pub fn kdv_soliton(n: usize, lx: f64, c: f64, x0: f64, t: f64) -> Vec<f64> {
    (0..n)
        .map(|i| {
            let x = i as f64 * lx / n as f64;
            let mut d = (x - x0 - c * t).rem_euclid(lx);
            if d > lx / 2.0 {
                d -= lx;
            }
            let s = 1.0 / (0.5 * c.sqrt() * d).cosh();
            0.5 * c * s * s
        })
        .collect()
}
