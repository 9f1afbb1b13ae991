//! Kuramoto-Sivashinsky `u_t + u u_x + u_xx + u_xxxx = 0` with ETDRK4.
//!
//! The phi-function coefficients are averaged over a complex contour around
//! each `h L` to avoid cancellation near zero.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::fourier::{dealias_mask, derivative_wavenumbers, wavenumber, Fourier, C64};
use super::Stepper;
use crate::error::{config_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct KsParams {
    pub n: usize,
    pub lx: f64,
    pub dt: f64,
    pub dt_snapshot: f64,
    pub snapshots: usize,
    /// Drop the `u u_x` term (the solver is then exact).
    pub linear_only: bool,
}

impl Default for KsParams {
    fn default() -> Self {
        Self {
            n: 256,
            lx: 64.0,
            dt: 0.05,
            dt_snapshot: 1.0,
            snapshots: 51,
            linear_only: false,
        }
    }
}

const CONTOUR_POINTS: usize = 32;
const BLOWUP: f64 = 1e2;

pub struct KsSolver {
    fourier: Fourier,
    v: Vec<C64>,
    e: Vec<f64>,
    e2: Vec<f64>,
    q: Vec<f64>,
    f1: Vec<f64>,
    f2: Vec<f64>,
    f3: Vec<f64>,
    g: Vec<C64>,
    linear_only: bool,
    buf: Vec<C64>,
}

impl KsSolver {
    pub fn new(p: &KsParams, u0: &[f64]) -> Result<Self> {
        if p.n < 4 || p.lx <= 0.0 || p.dt <= 0.0 || u0.len() != p.n {
            return Err(config_err!("bad KS setup: {p:?} with {} initial points", u0.len()));
        }
        let n = p.n;
        let h = p.dt;
        let mut fourier = Fourier::new(n, 1);
        let v = fourier.forward_real(u0);
        let kd = derivative_wavenumbers(n);
        let keep = dealias_mask(n);
        let scale = 2.0 * PI / p.lx;
        let mut me = Self {
            fourier,
            v,
            e: Vec::with_capacity(n),
            e2: Vec::with_capacity(n),
            q: Vec::with_capacity(n),
            f1: Vec::with_capacity(n),
            f2: Vec::with_capacity(n),
            f3: Vec::with_capacity(n),
            g: (0..n)
                .map(|j| if keep[j] { C64::new(0.0, -0.5 * scale * kd[j]) } else { C64::default() })
                .collect(),
            linear_only: p.linear_only,
            buf: vec![C64::default(); n],
        };
        for j in 0..n {
            let k = scale * wavenumber(j, n) as f64;
            let l = k * k - k.powi(4);
            let hl = h * l;
            me.e.push(hl.exp());
            me.e2.push((hl / 2.0).exp());
            let (mut q, mut f1, mut f2, mut f3) = (0.0, 0.0, 0.0, 0.0);
            for m in 0..CONTOUR_POINTS {
                let r = C64::from_polar(1.0, PI * (m as f64 + 0.5) / CONTOUR_POINTS as f64);
                let z = r + hl;
                let ez = z.exp();
                let z3 = z * z * z;
                q += (((z / 2.0).exp() - 1.0) / z).re;
                f1 += ((-4.0 - z + ez * (4.0 - 3.0 * z + z * z)) / z3).re;
                f2 += ((2.0 + z + ez * (z - 2.0)) / z3).re;
                f3 += ((-4.0 - 3.0 * z - z * z + ez * (4.0 - z)) / z3).re;
            }
            let w = h / CONTOUR_POINTS as f64;
            me.q.push(q * w);
            me.f1.push(f1 * w);
            me.f2.push(f2 * w);
            me.f3.push(f3 * w);
        }
        Ok(me)
    }

    fn nonlinear(&mut self, v: &[C64]) -> Vec<C64> {
        if self.linear_only {
            return vec![C64::default(); v.len()];
        }
        self.buf.copy_from_slice(v);
        self.fourier.inverse(&mut self.buf);
        self.buf.iter_mut().for_each(|z| *z = C64::new(z.re * z.re, 0.0));
        self.fourier.forward(&mut self.buf);
        self.buf.iter().zip(&self.g).map(|(a, g)| a * g).collect()
    }
}

impl Stepper for KsSolver {
    fn step(&mut self) -> Result<()> {
        let n = self.v.len();
        let v = self.v.clone();
        let nv = self.nonlinear(&v);
        let a: Vec<C64> = (0..n).map(|j| v[j] * self.e2[j] + nv[j] * self.q[j]).collect();
        let na = self.nonlinear(&a);
        let b: Vec<C64> = (0..n).map(|j| v[j] * self.e2[j] + na[j] * self.q[j]).collect();
        let nb = self.nonlinear(&b);
        let c: Vec<C64> = (0..n)
            .map(|j| a[j] * self.e2[j] + (nb[j] * 2.0 - nv[j]) * self.q[j])
            .collect();
        let nc = self.nonlinear(&c);
        for j in 0..n {
            self.v[j] = v[j] * self.e[j]
                + nv[j] * self.f1[j]
                + (na[j] + nb[j]) * (2.0 * self.f2[j])
                + nc[j] * self.f3[j];
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
            return Err(Error::Numerical(format!("KS blow-up: max|u| = {m:e}")));
        }
        Ok(())
    }
}

/// Single-mode amplitude growth factor of the linear KS operator over time `t`.
pub fn ks_linear_growth(k: f64, t: f64) -> f64 {
    ((k * k - k.powi(4)) * t).exp()
}
