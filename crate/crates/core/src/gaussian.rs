//! Local branch: normalized depthwise Gaussian kernels with learnable
//! log-scales.

use crate::error::{contract_err, dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor, Var};

/// Support radius `ceil(3 sigma)`.
pub fn kernel_radius<T: Scalar>(sigma: T) -> usize {
    (T::lit(3.0) * sigma).ceil().to_f64_lossy().max(0.0) as usize
}

/// Offsets of a `(2r+1)^d` stencil in row-major order.
fn offsets(r: usize, dims: usize) -> Vec<(isize, isize)> {
    let r = r as isize;
    if dims == 1 {
        (-r..=r).map(|d| (0, d)).collect()
    } else {
        (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect()
    }
}

/// Normalized Gaussian kernel on `{|d|_inf <= ceil(3 sigma)}`; shape
/// `[2R+1]` or `[2R+1, 2R+1]`.
pub fn build_kernel<T: Scalar>(sigma: T, dims: usize) -> Result<Tensor<T>> {
    if !(sigma > T::zero()) {
        return Err(contract_err!("kernel scale must be positive, got {}", sigma));
    }
    if dims != 1 && dims != 2 {
        return Err(dim_err!("kernels exist for 1 or 2 dims, not {}", dims));
    }
    let r = kernel_radius(sigma);
    let two_s2 = T::lit(2.0) * sigma * sigma;
    let vals: Vec<T> = offsets(r, dims)
        .into_iter()
        .map(|(dy, dx)| (-T::lit((dy * dy + dx * dx) as f64) / two_s2).exp())
        .collect();
    let z = vals.iter().fold(T::zero(), |a, &v| a + v);
    let w = 2 * r + 1;
    let shape = if dims == 1 { vec![w] } else { vec![w, w] };
    Tensor::new(shape, vals.into_iter().map(|v| v / z).collect())
}

impl<T: Scalar> Graph<T> {
    /// Per-group Gaussian kernels from `log_sigma[G]`, laid out as
    /// `[G, W^d]` with `W = 2 max_g R_g + 1`; taps outside a group's own
    /// support are zero. `radii` overrides the `ceil(3 sigma)` rule, which
    /// keeps the stencil fixed while finite-differencing across a
    /// support boundary. Returns the kernel and the radii used.
    pub fn gaussian_kernels(
        &mut self,
        log_sigma: Var,
        dims: usize,
        normalize: bool,
        radii: Option<&[usize]>,
    ) -> Result<(Var, Vec<usize>)> {
        if self.shape(log_sigma).len() != 1 {
            return Err(dim_err!("log_sigma must be a vector, got {:?}", self.shape(log_sigma)));
        }
        let sig: Vec<T> = self.value(log_sigma).iter().map(|&l| l.exp()).collect();
        let groups = sig.len();
        let radii: Vec<usize> = match radii {
            Some(r) if r.len() == groups => r.to_vec(),
            Some(r) => return Err(dim_err!("{} radii for {} groups", r.len(), groups)),
            None => sig.iter().map(|&s| kernel_radius(s)).collect(),
        };
        let rmax = radii.iter().copied().max().unwrap_or(0);
        let offs = offsets(rmax, dims);
        let ntap = offs.len();
        let dist2: Vec<T> = offs.iter().map(|&(y, x)| T::lit((y * y + x * x) as f64)).collect();
        let inside: Vec<Vec<bool>> = radii
            .iter()
            .map(|&r| {
                let r = r as isize;
                offs.iter().map(|&(y, x)| y.abs() <= r && x.abs() <= r).collect()
            })
            .collect();
        let mut raw = vec![T::zero(); groups * ntap];
        let mut z = vec![T::one(); groups];
        for gi in 0..groups {
            let two_s2 = T::lit(2.0) * sig[gi] * sig[gi];
            let row = &mut raw[gi * ntap..(gi + 1) * ntap];
            for t in 0..ntap {
                if inside[gi][t] {
                    row[t] = (-dist2[t] / two_s2).exp();
                }
            }
            if normalize {
                z[gi] = row.iter().fold(T::zero(), |a, &v| a + v);
            }
        }
        let out: Vec<T> = raw
            .iter()
            .enumerate()
            .map(|(i, &v)| v / z[i / ntap])
            .collect();
        let node = self.record(
            vec![groups, ntap],
            out,
            vec![log_sigma],
            Box::new(move |_, g| {
                let mut dl = vec![T::zero(); groups];
                for gi in 0..groups {
                    let s = sig[gi];
                    let s3 = s * s * s;
                    let e = &raw[gi * ntap..(gi + 1) * ntap];
                    let gr = &g[gi * ntap..(gi + 1) * ntap];
                    // de/dsigma = e |d|^2 / sigma^3
                    let de: Vec<T> = e.iter().zip(&dist2).map(|(&v, &d)| v * d / s3).collect();
                    let mut dsig = T::zero();
                    if normalize {
                        let zz = z[gi];
                        let dz = de.iter().fold(T::zero(), |a, &v| a + v);
                        for t in 0..ntap {
                            let dk = de[t] / zz - e[t] * dz / (zz * zz);
                            dsig = dsig + gr[t] * dk;
                        }
                    } else {
                        for t in 0..ntap {
                            dsig = dsig + gr[t] * de[t];
                        }
                    }
                    dl[gi] = dsig * s;
                }
                vec![Some(dl)]
            }),
        );
        Ok((node, radii))
    }
}
