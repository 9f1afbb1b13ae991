//! Linear advection `u_t + c . grad u = 0` on the periodic unit square,
//! solved by shifting the initial field.

use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use super::fourier::{is_nyquist, wavenumber, C64};
use super::Stepper;
use crate::error::{config_err, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdvectionParams {
    pub n: usize,
    pub dt_snapshot: f64,
    pub snapshots: usize,
    /// Each velocity component is drawn uniformly from `[-c_max, c_max]`.
    pub c_max: f64,
}

impl Default for AdvectionParams {
    fn default() -> Self {
        Self {
            n: 64,
            dt_snapshot: 0.02,
            snapshots: 50,
            c_max: 1.0,
        }
    }
}

/// Circular shift of a square `n x n` field by `(dx, dy)` grid cells:
/// `out(x) = u(x - d)`. Integer offsets are exact rolls; fractional ones go
/// through a phase shift along that axis.
pub fn shift2d(u: &[f64], n: usize, d: [f64; 2]) -> Vec<f64> {
    let mut out = u.to_vec();
    for (axis, &da) in d.iter().enumerate() {
        let r = da.round();
        if (da - r).abs() < 1e-9 {
            out = roll(&out, n, axis, r.rem_euclid(n as f64) as usize);
        } else {
            out = phase_shift(&out, n, axis, da);
        }
    }
    out
}

fn roll(u: &[f64], n: usize, axis: usize, s: usize) -> Vec<f64> {
    let mut out = vec![0.0; u.len()];
    for i in 0..n {
        for j in 0..n {
            let (si, sj) = if axis == 0 { ((i + s) % n, j) } else { (i, (j + s) % n) };
            out[si * n + sj] = u[i * n + j];
        }
    }
    out
}

fn phase_shift(u: &[f64], n: usize, axis: usize, d: f64) -> Vec<f64> {
    let mut planner = rustfft::FftPlanner::new();
    let fwd = planner.plan_fft_forward(n);
    let inv = planner.plan_fft_inverse(n);
    let phase: Vec<C64> = (0..n)
        .map(|j| {
            let theta = -2.0 * PI * wavenumber(j, n) as f64 * d / n as f64;
            if is_nyquist(j, n) {
                // keeps the field real
                C64::new(theta.cos(), 0.0)
            } else {
                C64::from_polar(1.0, theta)
            }
        })
        .collect();
    let mut out = vec![0.0; u.len()];
    let mut line = vec![C64::default(); n];
    for l in 0..n {
        let at = |m: usize| if axis == 0 { m * n + l } else { l * n + m };
        for m in 0..n {
            line[m] = C64::new(u[at(m)], 0.0);
        }
        fwd.process(&mut line);
        line.iter_mut().zip(&phase).for_each(|(z, p)| *z *= p);
        inv.process(&mut line);
        for m in 0..n {
            out[at(m)] = line[m].re / n as f64;
        }
    }
    out
}

pub struct AdvectionSolver {
    u0: Vec<f64>,
    n: usize,
    c: [f64; 2],
    dt: f64,
    steps: u64,
}

impl AdvectionSolver {
    /// `dt` is the time advanced per [`Stepper::step`].
    pub fn new(n: usize, c: [f64; 2], dt: f64, u0: &[f64]) -> Result<Self> {
        if u0.len() != n * n {
            return Err(config_err!("advection needs {} points, got {}", n * n, u0.len()));
        }
        Ok(Self {
            u0: u0.to_vec(),
            n,
            c,
            dt,
            steps: 0,
        })
    }
}

impl Stepper for AdvectionSolver {
    fn step(&mut self) -> Result<()> {
        self.steps += 1;
        Ok(())
    }

    fn field(&mut self) -> Vec<f64> {
        let t = self.steps as f64 * self.dt;
        let n = self.n as f64;
        shift2d(&self.u0, self.n, [self.c[0] * t * n, self.c[1] * t * n])
    }
}
