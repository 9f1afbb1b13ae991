//! Allen-Cahn `u_t = eps^2 Laplacian u + u - u^3` with forward Euler and the
//! five-point Laplacian on the periodic unit square.

use serde::{Deserialize, Serialize};

use super::Stepper;
use crate::error::{config_err, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AllenCahnParams {
    pub n: usize,
    pub eps: f64,
    pub dt: f64,
    pub dt_snapshot: f64,
    pub snapshots: usize,
}

impl Default for AllenCahnParams {
    fn default() -> Self {
        Self {
            n: 64,
            eps: 0.01,
            dt: 1e-4,
            dt_snapshot: 0.05,
            snapshots: 50,
        }
    }
}

const BLOWUP: f64 = 10.0;

pub struct AllenCahnSolver {
    u: Vec<f64>,
    next: Vec<f64>,
    n: usize,
    dt: f64,
    // eps^2 / dx^2
    diff: f64,
}

impl AllenCahnSolver {
    pub fn new(p: &AllenCahnParams, u0: &[f64]) -> Result<Self> {
        let n = p.n;
        if n < 3 || u0.len() != n * n || p.dt <= 0.0 {
            return Err(config_err!("bad Allen-Cahn setup: {p:?} with {} initial points", u0.len()));
        }
        let diff = p.eps * p.eps * (n * n) as f64;
        if p.dt * (4.0 * diff + 2.0) > 1.0 {
            return Err(config_err!("forward Euler unstable at dt = {}", p.dt));
        }
        Ok(Self {
            u: u0.to_vec(),
            next: vec![0.0; n * n],
            n,
            dt: p.dt,
            diff,
        })
    }
}

impl Stepper for AllenCahnSolver {
    fn step(&mut self) -> Result<()> {
        let n = self.n;
        let u = &self.u;
        for i in 0..n {
            let up = ((i + n - 1) % n) * n;
            let dn = ((i + 1) % n) * n;
            let row = i * n;
            for j in 0..n {
                let l = (j + n - 1) % n;
                let r = (j + 1) % n;
                let c = u[row + j];
                let lap = u[up + j] + u[dn + j] + u[row + l] + u[row + r] - 4.0 * c;
                self.next[row + j] = c + self.dt * (self.diff * lap + c - c * c * c);
            }
        }
        std::mem::swap(&mut self.u, &mut self.next);
        Ok(())
    }

    fn field(&mut self) -> Vec<f64> {
        self.u.clone()
    }

    fn check(&mut self) -> Result<()> {
        let m = self.u.iter().fold(0f64, |m, x| m.max(x.abs()));
        if !(m <= BLOWUP) {
            return Err(Error::Numerical(format!("Allen-Cahn instability: max|u| = {m:e}")));
        }
        Ok(())
    }
}
