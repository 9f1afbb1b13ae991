//! Training objective: `mse + lambda_h1 * h1 + lambda_cbc * cbc`, all terms
//! as means over elements.

use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::ops::central_diff;
use crate::tensor::{split_bcs, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub lambda_h1: f64,
    pub lambda_cbc: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self::BURGERS
    }
}

impl LossWeights {
    pub const BURGERS: Self = Self { lambda_h1: 1e-3, lambda_cbc: 5e-3 };
    pub const ZERO: Self = Self { lambda_h1: 0.0, lambda_cbc: 0.0 };

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda_h1 >= 0.0 && self.lambda_cbc >= 0.0) {
            return Err(config_err!("loss weights must be non-negative: {:?}", self));
        }
        Ok(())
    }
}

fn check_same<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(dim_err!("shapes {:?} and {:?} differ", a.shape(), b.shape()));
    }
    Ok(())
}

pub fn mse_loss<T: Scalar>(u_hat: &Tensor<T>, u: &Tensor<T>) -> Result<T> {
    check_same(u_hat, u)?;
    let s = u_hat
        .data()
        .iter()
        .zip(u.data())
        .fold(T::zero(), |acc, (&a, &b)| acc + (a - b) * (a - b));
    Ok(s / T::lit(u.numel() as f64))
}

/// `1/2 sum_d mean((D_d e)^2)` with circular central differences, `dx = 1/N`.
pub fn h1_term<T: Scalar>(u_hat: &Tensor<T>, u: &Tensor<T>) -> Result<T> {
    check_same(u_hat, u)?;
    let (_, _, spatial) = split_bcs(u.shape())?;
    let e: Vec<T> = u_hat.data().iter().zip(u.data()).map(|(&a, &b)| a - b).collect();
    let mut s = T::zero();
    for ax in 0..spatial.len() {
        s = central_diff(&e, spatial, ax).iter().fold(s, |acc, &v| acc + v * v);
    }
    Ok(T::lit(0.5) * s / T::lit(e.len() as f64))
}

/// Cross-branch consistency, a feature-space mean squared difference.
pub fn cbc_term<T: Scalar>(z_g: &Tensor<T>, z_f: &Tensor<T>) -> Result<T> {
    mse_loss(z_g, z_f)
}

pub fn total_loss<T: Scalar>(
    u_hat: &Tensor<T>,
    u: &Tensor<T>,
    features: Option<(&Tensor<T>, &Tensor<T>)>,
    w: &LossWeights,
) -> Result<T> {
    let mut total = mse_loss(u_hat, u)? + T::lit(w.lambda_h1) * h1_term(u_hat, u)?;
    if let Some((zf, zg)) = features {
        total = total + T::lit(w.lambda_cbc) * cbc_term(zg, zf)?;
    }
    Ok(total)
}

/// Recorded loss terms. Unweighted `h1`/`cbc` are kept for logging even
/// when their weight is zero; only weighted terms enter `total`.
#[derive(Clone, Copy, Debug)]
pub struct LossVars {
    pub total: Var,
    pub mse: Var,
    pub h1: Var,
    pub cbc: Option<Var>,
}

impl<T: Scalar> Graph<T> {
    pub fn objective(
        &mut self,
        u_hat: Var,
        u: Var,
        features: Option<(Var, Var)>,
        w: &LossWeights,
    ) -> Result<LossVars> {
        let mse = self.mse(u_hat, u)?;
        let h1 = self.h1_term(u_hat, u)?;
        let cbc = match features {
            Some((zf, zg)) => Some(self.mse(zg, zf)?),
            None => None,
        };
        let mut total = mse;
        if w.lambda_h1 > 0.0 {
            let t = self.affine(h1, T::lit(w.lambda_h1), T::zero());
            total = self.add(total, t)?;
        }
        if let (Some(c), true) = (cbc, w.lambda_cbc > 0.0) {
            let t = self.affine(c, T::lit(w.lambda_cbc), T::zero());
            total = self.add(total, t)?;
        }
        Ok(LossVars { total, mse, h1, cbc })
    }
}
