//! Central finite-difference checks against the reverse sweep.

use super::{Graph, Tensor, Var};
use crate::error::Result;
use crate::scalar::Scalar;

/// Analytic and numeric gradients for every entry of every input.
#[derive(Clone, Debug)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

impl GradCheck {
    /// `||a - n|| / max(||n||, tiny)`.
    pub fn rel_error(&self) -> f64 {
        let diff: f64 = self
            .analytic
            .iter()
            .zip(&self.numeric)
            .map(|(a, n)| (a - n) * (a - n))
            .sum();
        let norm: f64 = self.numeric.iter().map(|n| n * n).sum();
        diff.sqrt() / norm.sqrt().max(1e-300)
    }
}

/// Compares reverse-mode gradients of the scalar returned by `f` with
/// central differences of step `h`, for all inputs.
pub fn check<T, F>(inputs: &[Tensor<T>], h: f64, f: F) -> Result<GradCheck>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, &[Var]) -> Result<Var>,
{
    let eval = |ins: &[Tensor<T>]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ins.iter().map(|t| g.constant(t)).collect();
        let out = f(&mut g, &vars)?;
        Ok(g.scalar_value(out).to_f64_lossy())
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.input(&t.clone().with_grad())).collect();
    let out = f(&mut g, &vars)?;
    g.backward(out)?;
    let mut analytic = Vec::new();
    for (v, t) in vars.iter().zip(inputs) {
        match g.grad(*v) {
            Some(gr) => analytic.extend(gr.iter().map(|x| x.to_f64_lossy())),
            None => analytic.extend(std::iter::repeat_n(0.0, t.numel())),
        }
    }
    let mut numeric = Vec::with_capacity(analytic.len());
    let mut work = inputs.to_vec();
    for i in 0..work.len() {
        for j in 0..work[i].numel() {
            let orig = work[i].data()[j];
            work[i].data_mut()[j] = orig + T::lit(h);
            let fp = eval(&work)?;
            work[i].data_mut()[j] = orig - T::lit(h);
            let fm = eval(&work)?;
            work[i].data_mut()[j] = orig;
            numeric.push((fp - fm) / (2.0 * h));
        }
    }
    Ok(GradCheck { analytic, numeric })
}
