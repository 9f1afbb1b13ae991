//! Viscous Burgers `u_t + (u^2/2)_x = nu u_xx` on the periodic unit interval.
//!
//! Crank-Nicolson on diffusion, second-order Adams-Bashforth on the
//! conservative flux (forward Euler for the first step).

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::fourier::{dealias_mask, derivative_wavenumbers, wavenumber, Fourier, C64};
use super::Stepper;
use crate::error::{config_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BurgersParams {
    pub n: usize,
    pub nu: f64,
    pub dt: f64,
    pub dt_snapshot: f64,
    pub snapshots: usize,
}

impl Default for BurgersParams {
    fn default() -> Self {
        Self {
            n: 128,
            nu: 0.01,
            dt: 1e-4,
            dt_snapshot: 0.02,
            snapshots: 51,
        }
    }
}

impl BurgersParams {
    pub fn validate(&self) -> Result<()> {
        if self.n < 4 || self.nu <= 0.0 || self.dt <= 0.0 {
            return Err(config_err!("burgers needs n >= 4, nu > 0, dt > 0: {self:?}"));
        }
        Ok(())
    }
}

pub struct BurgersSolver {
    fourier: Fourier,
    n: usize,
    dt: f64,
    v: Vec<C64>,
    flux: Vec<C64>,
    prev: Option<Vec<C64>>,
    // -i k / 2 on kept bins, 0 elsewhere
    grad: Vec<C64>,
    lhs: Vec<f64>,
    rhs: Vec<f64>,
    work: Vec<C64>,
}

impl BurgersSolver {
    pub fn new(p: &BurgersParams, u0: &[f64]) -> Result<Self> {
        p.validate()?;
        if u0.len() != p.n {
            return Err(config_err!("initial condition of {} points for n = {}", u0.len(), p.n));
        }
        let n = p.n;
        let mut fourier = Fourier::new(n, 1);
        let v = fourier.forward_real(u0);
        let kd = derivative_wavenumbers(n);
        let keep = dealias_mask(n);
        let grad = (0..n)
            .map(|j| if keep[j] { C64::new(0.0, -PI * kd[j]) } else { C64::default() })
            .collect();
        let visc: Vec<f64> = (0..n)
            .map(|j| 0.5 * p.dt * p.nu * (2.0 * PI * wavenumber(j, n) as f64).powi(2))
            .collect();
        Ok(Self {
            fourier,
            n,
            dt: p.dt,
            v,
            flux: vec![C64::default(); n],
            prev: None,
            grad,
            lhs: visc.iter().map(|a| 1.0 + a).collect(),
            rhs: visc.iter().map(|a| 1.0 - a).collect(),
            work: vec![C64::default(); n],
        })
    }
}

impl Stepper for BurgersSolver {
    fn step(&mut self) -> Result<()> {
        self.work.copy_from_slice(&self.v);
        self.fourier.inverse(&mut self.work);
        let mut umax = 0f64;
        for z in self.work.iter_mut() {
            umax = umax.max(z.re.abs());
            *z = C64::new(z.re * z.re, 0.0);
        }
        if !umax.is_finite() || umax * self.dt * self.n as f64 > 1.0 {
            return Err(Error::Numerical(format!(
                "burgers CFL violated: max|u| = {umax:e}, dt = {:e}",
                self.dt
            )));
        }
        self.fourier.forward(&mut self.work);
        for (f, (w, g)) in self.flux.iter_mut().zip(self.work.iter().zip(&self.grad)) {
            *f = w * g;
        }
        for j in 0..self.n {
            let explicit = match &self.prev {
                Some(p) => 1.5 * self.flux[j] - 0.5 * p[j],
                None => self.flux[j],
            };
            self.v[j] = (self.v[j] * self.rhs[j] + explicit * self.dt) / self.lhs[j];
        }
        match &mut self.prev {
            Some(p) => p.copy_from_slice(&self.flux),
            None => self.prev = Some(self.flux.clone()),
        }
        Ok(())
    }

    fn field(&mut self) -> Vec<f64> {
        self.work.copy_from_slice(&self.v);
        self.fourier.inverse_real(&mut self.work)
    }
}
