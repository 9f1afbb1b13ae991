//! Real-to-complex transforms with the half spectrum on the last axis.
//!
//! Forward transforms are unnormalized; inverse transforms carry the `1/N`.
//! The adjoint maps are exact transposes (w.r.t. the real inner product on
//! `(re, im)` pairs) and are what the operation graph uses in backward.

use rustfft::num_complex::Complex;

use super::{ComplexTensor, Tensor};
use crate::error::{dim_err, Result};
use crate::scalar::Scalar;

/// Half-spectrum extents for a real field of the given spatial shape.
pub fn half_shape(spatial: &[usize]) -> Vec<usize> {
    let mut h = spatial.to_vec();
    if let Some(last) = h.last_mut() {
        *last = *last / 2 + 1;
    }
    h
}

fn check_spatial(spatial: &[usize]) -> Result<()> {
    if spatial.is_empty() || spatial.len() > 2 {
        return Err(dim_err!("FFT supports 1 or 2 spatial axes, got {:?}", spatial));
    }
    if spatial.iter().any(|&n| n < 2) {
        return Err(dim_err!("spatial extents must be >= 2, got {:?}", spatial));
    }
    Ok(())
}

/// Forward real FFT over the trailing `dims` axes of `x`.
pub fn rfft<T: Scalar>(x: &Tensor<T>, dims: usize) -> Result<ComplexTensor<T>> {
    let shape = x.shape();
    if dims == 0 || dims > 2 || shape.len() < dims {
        return Err(dim_err!("cannot take a {}-D rfft of {:?}", dims, shape));
    }
    let spatial = &shape[shape.len() - dims..];
    check_spatial(spatial)?;
    let half = half_shape(spatial);
    let mut out_shape = shape[..shape.len() - dims].to_vec();
    out_shape.extend_from_slice(&half);
    let (re, im) = rfft_fields(x.data(), spatial);
    ComplexTensor::new(out_shape, re, im)
}

/// Inverse of [`rfft`]; `spatial` gives the real extents of the trailing axes.
pub fn irfft<T: Scalar>(x: &ComplexTensor<T>, spatial: &[usize]) -> Result<Tensor<T>> {
    check_spatial(spatial)?;
    let dims = spatial.len();
    let half = half_shape(spatial);
    if x.shape.len() < dims || x.shape[x.shape.len() - dims..] != half[..] {
        return Err(dim_err!(
            "spectrum {:?} is not a half spectrum for spatial {:?}",
            x.shape,
            spatial
        ));
    }
    let mut out_shape = x.shape[..x.shape.len() - dims].to_vec();
    out_shape.extend_from_slice(spatial);
    Tensor::new(out_shape, irfft_fields(&x.re, &x.im, spatial))
}

/// Transpose of [`rfft`]: maps a half-spectrum cotangent to a real field.
pub fn rfft_adjoint<T: Scalar>(dx: &ComplexTensor<T>, spatial: &[usize]) -> Result<Tensor<T>> {
    check_spatial(spatial)?;
    let dims = spatial.len();
    let mut out_shape = dx.shape[..dx.shape.len() - dims].to_vec();
    out_shape.extend_from_slice(spatial);
    Tensor::new(out_shape, rfft_adjoint_fields(&dx.re, &dx.im, spatial))
}

/// Transpose of [`irfft`]: maps a real cotangent to a half-spectrum one.
pub fn irfft_adjoint<T: Scalar>(g: &Tensor<T>, dims: usize) -> Result<ComplexTensor<T>> {
    let shape = g.shape();
    if dims == 0 || dims > 2 || shape.len() < dims {
        return Err(dim_err!("cannot take a {}-D adjoint of {:?}", dims, shape));
    }
    let spatial = &shape[shape.len() - dims..];
    check_spatial(spatial)?;
    let mut out_shape = shape[..shape.len() - dims].to_vec();
    out_shape.extend_from_slice(&half_shape(spatial));
    let (re, im) = irfft_adjoint_fields(g.data(), spatial);
    ComplexTensor::new(out_shape, re, im)
}

// ---------------------------------------------------------------------------
// slice-level kernels: `data` holds a whole number of fields of shape `spatial`

fn field_len(spatial: &[usize]) -> usize {
    spatial.iter().product()
}

/// Complex FFT along the leading axis of a `[ny, nh]` block, in place.
fn fft_columns<T: Scalar>(buf: &mut [Complex<T>], ny: usize, nh: usize, inverse: bool) {
    let plan = T::fft_plan(ny, inverse);
    let mut col = vec![Complex::new(T::zero(), T::zero()); ny];
    for kx in 0..nh {
        for y in 0..ny {
            col[y] = buf[y * nh + kx];
        }
        plan.process(&mut col);
        for y in 0..ny {
            buf[y * nh + kx] = col[y];
        }
    }
}

pub(crate) fn rfft_fields<T: Scalar>(data: &[T], spatial: &[usize]) -> (Vec<T>, Vec<T>) {
    let nx = *spatial.last().unwrap();
    let nh = nx / 2 + 1;
    let ny = if spatial.len() == 2 { spatial[0] } else { 1 };
    let nfields = data.len() / field_len(spatial);
    let plan = T::fft_plan(nx, false);
    let hlen = ny * nh;
    let mut re = vec![T::zero(); nfields * hlen];
    let mut im = vec![T::zero(); nfields * hlen];
    let mut row = vec![Complex::new(T::zero(), T::zero()); nx];
    let mut block = vec![Complex::new(T::zero(), T::zero()); hlen];
    for f in 0..nfields {
        let src = &data[f * ny * nx..(f + 1) * ny * nx];
        for y in 0..ny {
            for (c, &v) in row.iter_mut().zip(&src[y * nx..(y + 1) * nx]) {
                *c = Complex::new(v, T::zero());
            }
            plan.process(&mut row);
            block[y * nh..(y + 1) * nh].copy_from_slice(&row[..nh]);
        }
        if ny > 1 {
            fft_columns(&mut block, ny, nh, false);
        }
        for (i, c) in block.iter().enumerate() {
            re[f * hlen + i] = c.re;
            im[f * hlen + i] = c.im;
        }
    }
    (re, im)
}

/// Hermitian extension of one half-spectrum row followed by an unnormalized
/// inverse FFT; writes the real part scaled by `scale`.
fn c2r_row<T: Scalar>(
    half: &[Complex<T>],
    nx: usize,
    scratch: &mut [Complex<T>],
    plan: &dyn rustfft::Fft<T>,
    scale: T,
    out: &mut [T],
) {
    let nh = nx / 2 + 1;
    scratch[0] = Complex::new(half[0].re, T::zero());
    for k in 1..nh {
        scratch[k] = half[k];
    }
    if nx % 2 == 0 {
        scratch[nx / 2] = Complex::new(half[nx / 2].re, T::zero());
    }
    for k in nh..nx {
        scratch[k] = scratch[nx - k].conj();
    }
    plan.process(scratch);
    for (o, c) in out.iter_mut().zip(scratch.iter()) {
        *o = c.re * scale;
    }
}

pub(crate) fn irfft_fields<T: Scalar>(re: &[T], im: &[T], spatial: &[usize]) -> Vec<T> {
    let nx = *spatial.last().unwrap();
    let nh = nx / 2 + 1;
    let ny = if spatial.len() == 2 { spatial[0] } else { 1 };
    let hlen = ny * nh;
    let nfields = re.len() / hlen;
    let plan = T::fft_plan(nx, true);
    let mut out = vec![T::zero(); nfields * ny * nx];
    let mut block = vec![Complex::new(T::zero(), T::zero()); hlen];
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); nx];
    let scale = T::one() / T::lit((nx * ny) as f64);
    for f in 0..nfields {
        for i in 0..hlen {
            block[i] = Complex::new(re[f * hlen + i], im[f * hlen + i]);
        }
        if ny > 1 {
            fft_columns(&mut block, ny, nh, true);
        }
        for y in 0..ny {
            let dst = &mut out[(f * ny + y) * nx..(f * ny + y + 1) * nx];
            c2r_row(&block[y * nh..(y + 1) * nh], nx, &mut scratch, &*plan, scale, dst);
        }
    }
    out
}

pub(crate) fn rfft_adjoint_fields<T: Scalar>(re: &[T], im: &[T], spatial: &[usize]) -> Vec<T> {
    let nx = *spatial.last().unwrap();
    let nh = nx / 2 + 1;
    let ny = if spatial.len() == 2 { spatial[0] } else { 1 };
    let hlen = ny * nh;
    let nfields = re.len() / hlen;
    let plan = T::fft_plan(nx, true);
    let zero = Complex::new(T::zero(), T::zero());
    let mut out = vec![T::zero(); nfields * ny * nx];
    let mut block = vec![zero; hlen];
    let mut row = vec![zero; nx];
    for f in 0..nfields {
        for i in 0..hlen {
            block[i] = Complex::new(re[f * hlen + i], im[f * hlen + i]);
        }
        if ny > 1 {
            // transpose of the forward column FFT is the unnormalized inverse
            fft_columns(&mut block, ny, nh, true);
        }
        for y in 0..ny {
            row[..nh].copy_from_slice(&block[y * nh..(y + 1) * nh]);
            row[nh..].iter_mut().for_each(|c| *c = zero);
            plan.process(&mut row);
            let dst = &mut out[(f * ny + y) * nx..(f * ny + y + 1) * nx];
            for (o, c) in dst.iter_mut().zip(&row) {
                *o = c.re;
            }
        }
    }
    out
}

pub(crate) fn irfft_adjoint_fields<T: Scalar>(g: &[T], spatial: &[usize]) -> (Vec<T>, Vec<T>) {
    let nx = *spatial.last().unwrap();
    let nh = nx / 2 + 1;
    let ny = if spatial.len() == 2 { spatial[0] } else { 1 };
    let hlen = ny * nh;
    let nfields = g.len() / (ny * nx);
    let plan = T::fft_plan(nx, false);
    let zero = Complex::new(T::zero(), T::zero());
    let mut re = vec![T::zero(); nfields * hlen];
    let mut im = vec![T::zero(); nfields * hlen];
    let mut block = vec![zero; hlen];
    let mut row = vec![zero; nx];
    let inv = T::one() / T::lit((nx * ny) as f64);
    let two = T::lit(2.0);
    for f in 0..nfields {
        for y in 0..ny {
            let src = &g[(f * ny + y) * nx..(f * ny + y + 1) * nx];
            for (c, &v) in row.iter_mut().zip(src) {
                *c = Complex::new(v, T::zero());
            }
            plan.process(&mut row);
            for k in 0..nh {
                let edge = k == 0 || (nx % 2 == 0 && k == nx / 2);
                block[y * nh + k] = if edge {
                    Complex::new(row[k].re, T::zero())
                } else {
                    row[k] * two
                };
            }
        }
        if ny > 1 {
            fft_columns(&mut block, ny, nh, false);
        }
        for (i, c) in block.iter().enumerate() {
            re[f * hlen + i] = c.re * inv;
            im[f * hlen + i] = c.im * inv;
        }
    }
    (re, im)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn naive_dft_1d(x: &[f64]) -> Vec<(f64, f64)> {
        let n = x.len();
        (0..=n / 2)
            .map(|k| {
                let mut acc = (0.0, 0.0);
                for (j, &v) in x.iter().enumerate() {
                    let th = -2.0 * std::f64::consts::PI * (k * j) as f64 / n as f64;
                    acc.0 += v * th.cos();
                    acc.1 += v * th.sin();
                }
                acc
            })
            .collect()
    }

    fn random(shape: &[usize], seed: u64) -> Tensor<f64> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn constant_field_has_only_dc() {
        let x = Tensor::<f64>::full(&[8], 2.5);
        let s = rfft(&x, 1).unwrap();
        assert_eq!(s.shape, vec![5]);
        assert!((s.re[0] - 20.0).abs() < 1e-12);
        for k in 1..5 {
            assert!(s.re[k].abs() < 1e-12 && s.im[k].abs() < 1e-12);
        }
        assert!(s.im[0].abs() < 1e-12);
    }

    #[test]
    fn cosine_mode_hits_single_half_bin() {
        let n = 16;
        let x = Tensor::from_fn(&[n], |j| (2.0 * std::f64::consts::PI * j as f64 / n as f64).cos());
        let s = rfft(&x, 1).unwrap();
        for k in 0..=n / 2 {
            let mag = s.re[k].hypot(s.im[k]);
            if k == 1 {
                // the conjugate partner at N-1 is implied by the half layout
                assert!((mag - n as f64 / 2.0).abs() < 1e-12);
            } else {
                assert!(mag < 1e-12, "bin {k} = {mag}");
            }
        }
    }

    #[test]
    fn matches_naive_dft() {
        let x = random(&[16], 3);
        let s = rfft(&x, 1).unwrap();
        for (k, (re, im)) in naive_dft_1d(x.data()).into_iter().enumerate() {
            assert!((s.re[k] - re).abs() < 1e-12);
            assert!((s.im[k] - im).abs() < 1e-12);
        }
    }

    #[test]
    fn round_trip_identity() {
        for shape in [vec![1, 1, 16], vec![2, 3, 15], vec![2, 2, 8, 6], vec![1, 1, 5, 7]] {
            let dims = shape.len() - 2;
            let x = random(&shape, 11);
            let s = rfft(&x, dims).unwrap();
            let y = irfft(&s, &shape[2..]).unwrap();
            let err = x
                .data()
                .iter()
                .zip(y.data())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0, f64::max);
            assert!(err < 1e-12, "{shape:?}: {err}");
        }
    }

    #[test]
    fn zero_spectrum_gives_zero_field() {
        let s = ComplexTensor::<f64>::zeros(&[1, 1, 9]);
        let y = irfft(&s, &[16]).unwrap();
        assert!(y.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_mode_inverse_is_analytic_cosine() {
        // X[2] = A e^{i phi} on N = 16 is 2A/N cos(2 pi 2 n / N + phi).
        let n = 16;
        let (amp, phi) = (3.0_f64, 0.4_f64);
        let mut s = ComplexTensor::<f64>::zeros(&[9]);
        s.re[2] = amp * phi.cos();
        s.im[2] = amp * phi.sin();
        let y = irfft(&s, &[n]).unwrap();
        for j in 0..n {
            let th = 2.0 * std::f64::consts::PI * 2.0 * j as f64 / n as f64 + phi;
            let expect = 2.0 * amp / n as f64 * th.cos();
            assert!((y.data()[j] - expect).abs() < 1e-14);
        }
    }

    #[test]
    fn incompatible_shape_is_rejected() {
        let s = ComplexTensor::<f64>::zeros(&[1, 1, 9]);
        assert!(irfft(&s, &[12]).is_err());
    }

    fn dot(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| x * y).sum()
    }

    #[test]
    fn adjoints_satisfy_dot_product_identity() {
        for spatial in [vec![16], vec![15], vec![8, 6], vec![5, 7]] {
            let mut shape = vec![2, 1];
            shape.extend_from_slice(&spatial);
            let x = random(&shape, 5);
            let mut hshape = vec![2, 1];
            hshape.extend(half_shape(&spatial));
            let mut rng = ChaCha8Rng::seed_from_u64(9);
            let n: usize = hshape.iter().product();
            let z = ComplexTensor::new(
                hshape,
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
                (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            )
            .unwrap();
            let dims = spatial.len();
            // <rfft x, z> = <x, rfft^T z>
            let fx = rfft(&x, dims).unwrap();
            let lhs = dot(&fx.re, &z.re) + dot(&fx.im, &z.im);
            let rhs = dot(x.data(), rfft_adjoint(&z, &spatial).unwrap().data());
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{spatial:?}");
            // <irfft z, x> = <z, irfft^T x>
            let iz = irfft(&z, &spatial).unwrap();
            let lhs = dot(iz.data(), x.data());
            let ax = irfft_adjoint(&x, dims).unwrap();
            let rhs = dot(&z.re, &ax.re) + dot(&z.im, &ax.im);
            assert!((lhs - rhs).abs() < 1e-10 * lhs.abs().max(1.0), "{spatial:?}");
        }
    }
}
