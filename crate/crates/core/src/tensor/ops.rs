//! Differentiable operations recorded on a [`Graph`].

use super::fft::{half_shape, irfft_adjoint_fields, irfft_fields, rfft_adjoint_fields, rfft_fields};
use super::graph::{Graph, Var};
use super::split_bcs;
use crate::error::{dim_err, Result};
use crate::scalar::{matmul, matmul_at, matmul_bt, Scalar};

fn gelu_parts<T: Scalar>(x: T) -> (T, T) {
    // returns (gelu(x), gelu'(x)) for the exact erf form
    let half = T::lit(0.5);
    let cdf = half * (T::one() + (x * T::FRAC_1_SQRT_2()).erf());
    let pdf = (-(x * x) * half).exp() * T::lit(0.398_942_280_401_432_7);
    (x * cdf, cdf + x * pdf)
}

pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    gelu_parts(x).0
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// `out[x] += k * inp[(x + shift) mod n]` without per-element modulo.
#[inline]
pub(crate) fn shifted_axpy<T: Scalar>(out: &mut [T], inp: &[T], shift: isize, k: T) {
    let n = inp.len() as isize;
    let s = shift.rem_euclid(n) as usize;
    let n = n as usize;
    let split = n - s;
    for (o, &v) in out[..split].iter_mut().zip(&inp[s..]) {
        *o = *o + k * v;
    }
    for (o, &v) in out[split..].iter_mut().zip(&inp[..s]) {
        *o = *o + k * v;
    }
}

/// `sum_x a[x] * b[(x + shift) mod n]`.
#[inline]
fn shifted_dot<T: Scalar>(a: &[T], b: &[T], shift: isize) -> T {
    let n = b.len() as isize;
    let s = shift.rem_euclid(n) as usize;
    let n = n as usize;
    let split = n - s;
    let mut acc = T::zero();
    for (&x, &y) in a[..split].iter().zip(&b[s..]) {
        acc = acc + x * y;
    }
    for (&x, &y) in a[split..].iter().zip(&b[..s]) {
        acc = acc + x * y;
    }
    acc
}

/// Linear 2x upsampling along one axis of a row-major block
/// (`outer` x `n` x `inner`), periodic, half-pixel centers.
fn upsample_axis<T: Scalar>(x: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let (a, b) = (T::lit(0.75), T::lit(0.25));
    let mut out = vec![T::zero(); outer * 2 * n * inner];
    for o in 0..outer {
        let src = &x[o * n * inner..(o + 1) * n * inner];
        let dst = &mut out[o * 2 * n * inner..(o + 1) * 2 * n * inner];
        for i in 0..n {
            let prev = (i + n - 1) % n;
            let next = (i + 1) % n;
            for j in 0..inner {
                let c = src[i * inner + j];
                dst[(2 * i) * inner + j] = a * c + b * src[prev * inner + j];
                dst[(2 * i + 1) * inner + j] = a * c + b * src[next * inner + j];
            }
        }
    }
    out
}

/// Transpose of [`upsample_axis`].
fn upsample_axis_adjoint<T: Scalar>(g: &[T], outer: usize, n: usize, inner: usize) -> Vec<T> {
    let (a, b) = (T::lit(0.75), T::lit(0.25));
    let mut out = vec![T::zero(); outer * n * inner];
    for o in 0..outer {
        let src = &g[o * 2 * n * inner..(o + 1) * 2 * n * inner];
        let dst = &mut out[o * n * inner..(o + 1) * n * inner];
        for i in 0..n {
            let prev = (i + n - 1) % n;
            let next = (i + 1) % n;
            for j in 0..inner {
                let even = src[(2 * i) * inner + j];
                let odd = src[(2 * i + 1) * inner + j];
                dst[i * inner + j] = dst[i * inner + j] + a * (even + odd);
                dst[prev * inner + j] = dst[prev * inner + j] + b * even;
                dst[next * inner + j] = dst[next * inner + j] + b * odd;
            }
        }
    }
    out
}

/// Offsets of a `3^d` stencil in row-major order.
fn stencil3(dims: usize) -> Vec<(isize, isize)> {
    if dims == 1 {
        (-1..=1).map(|t| (0, t)).collect()
    } else {
        let mut v = Vec::with_capacity(9);
        for ty in -1..=1 {
            for tx in -1..=1 {
                v.push((ty, tx));
            }
        }
        v
    }
}

/// Retained spectral positions: `(position in half spectrum, weight index)`.
pub(crate) fn retained_modes(spatial: &[usize], k0: usize) -> Vec<(usize, usize)> {
    let nx = *spatial.last().unwrap();
    let nh = nx / 2 + 1;
    let kx = k0.min(nx / 2);
    if spatial.len() == 1 {
        return (0..kx).map(|k| (k, k)).collect();
    }
    let ny = spatial[0];
    let ky = k0.min(ny / 2);
    let mut out = Vec::with_capacity(2 * ky * kx);
    for row in 0..ky {
        for col in 0..kx {
            out.push((row * nh + col, row * k0 + col));
        }
    }
    for j in 0..ky {
        let row = ny - ky + j;
        for col in 0..kx {
            out.push((row * nh + col, j * k0 + col));
        }
    }
    out
}

impl<T: Scalar> Graph<T> {
    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            ));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let v: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.record(
            self.shape(a).to_vec(),
            v,
            vec![a, b],
            Box::new(|_, g| vec![Some(g.to_vec()), Some(g.to_vec())]),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let v: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        Ok(self.record(
            self.shape(a).to_vec(),
            v,
            vec![a, b],
            Box::new(|_, g| vec![Some(g.to_vec()), Some(g.iter().map(|&x| -x).collect())]),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let v: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.record(
            self.shape(a).to_vec(),
            v,
            vec![a, b],
            Box::new(move |gr, g| {
                let (va, vb) = (gr.value(a), gr.value(b));
                vec![
                    Some(g.iter().zip(vb).map(|(&d, &y)| d * y).collect()),
                    Some(g.iter().zip(va).map(|(&d, &x)| d * x).collect()),
                ]
            }),
        ))
    }

    /// `scale * a + shift`, elementwise.
    pub fn affine(&mut self, a: Var, scale: T, shift: T) -> Var {
        let v = self.value(a).iter().map(|&x| scale * x + shift).collect();
        self.record(
            self.shape(a).to_vec(),
            v,
            vec![a],
            Box::new(move |_, g| vec![Some(g.iter().map(|&d| d * scale).collect())]),
        )
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).iter().map(|&x| x * x).collect();
        self.record(
            self.shape(a).to_vec(),
            v,
            vec![a],
            Box::new(move |gr, g| {
                let two = T::lit(2.0);
                vec![Some(g.iter().zip(gr.value(a)).map(|(&d, &x)| two * x * d).collect())]
            }),
        )
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().fold(T::zero(), |acc, &x| acc + x);
        let n = self.value(a).len();
        self.record(vec![], vec![s], vec![a], Box::new(move |_, g| vec![Some(vec![g[0]; n])]))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len();
        let s = self.sum(a);
        self.affine(s, T::one() / T::lit(n as f64), T::zero())
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let (v, d): (Vec<T>, Vec<T>) = self.value(a).iter().map(|&x| gelu_parts(x)).unzip();
        self.record(
            self.shape(a).to_vec(),
            v,
            vec![a],
            Box::new(move |_, g| vec![Some(g.iter().zip(&d).map(|(&x, &y)| x * y).collect())]),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v: Vec<T> = self.value(a).iter().map(|&x| sigmoid_scalar(x)).collect();
        let s = v.clone();
        self.record(
            self.shape(a).to_vec(),
            v,
            vec![a],
            Box::new(move |_, g| {
                vec![Some(
                    g.iter().zip(&s).map(|(&d, &y)| d * y * (T::one() - y)).collect(),
                )]
            }),
        )
    }

    /// Stop-gradient: same value, no backward edge.
    pub fn detach(&mut self, a: Var) -> Var {
        let t = self.tensor(a);
        self.constant(&t)
    }

    /// `g[B,1,S] * x[B,C,S]` with `g` broadcast over channels.
    pub fn mul_channel(&mut self, g: Var, x: Var) -> Result<Var> {
        let (b, c, s) = split_bcs(self.shape(x))?;
        let spatial = s.to_vec();
        let mut gs = vec![b, 1];
        gs.extend_from_slice(&spatial);
        if self.shape(g) != gs.as_slice() {
            return Err(dim_err!("mul_channel: gate {:?} vs {:?}", self.shape(g), self.shape(x)));
        }
        let n: usize = spatial.iter().product();
        let (gv, xv) = (self.value(g), self.value(x));
        let mut out = vec![T::zero(); xv.len()];
        for bi in 0..b {
            let gate = &gv[bi * n..(bi + 1) * n];
            for ci in 0..c {
                let o = (bi * c + ci) * n;
                for j in 0..n {
                    out[o + j] = gate[j] * xv[o + j];
                }
            }
        }
        Ok(self.record(
            self.shape(x).to_vec(),
            out,
            vec![g, x],
            Box::new(move |gr, d| {
                let (gv, xv) = (gr.value(g), gr.value(x));
                let mut dg = vec![T::zero(); b * n];
                let mut dx = vec![T::zero(); xv.len()];
                for bi in 0..b {
                    for ci in 0..c {
                        let o = (bi * c + ci) * n;
                        for j in 0..n {
                            dg[bi * n + j] = dg[bi * n + j] + d[o + j] * xv[o + j];
                            dx[o + j] = d[o + j] * gv[bi * n + j];
                        }
                    }
                }
                vec![Some(dg), Some(dx)]
            }),
        ))
    }

    /// Concatenates `[B, C_i, S]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| dim_err!("concat of nothing"))?;
        let (b, _, s) = split_bcs(self.shape(first))?;
        let spatial = s.to_vec();
        let n: usize = spatial.iter().product();
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pb, pc, ps) = split_bcs(self.shape(p))?;
            if pb != b || ps != spatial.as_slice() {
                return Err(dim_err!("concat: {:?} vs {:?}", self.shape(p), self.shape(first)));
            }
            chans.push(pc);
        }
        let total: usize = chans.iter().sum();
        let mut out = Vec::with_capacity(b * total * n);
        for bi in 0..b {
            for (&p, &pc) in parts.iter().zip(&chans) {
                out.extend_from_slice(&self.value(p)[bi * pc * n..(bi + 1) * pc * n]);
            }
        }
        let mut shape = vec![b, total];
        shape.extend_from_slice(&spatial);
        let chans_bw = chans.clone();
        Ok(self.record(
            shape,
            out,
            parts.to_vec(),
            Box::new(move |_, g| {
                let mut res: Vec<Vec<T>> =
                    chans_bw.iter().map(|&pc| Vec::with_capacity(b * pc * n)).collect();
                let mut off = 0;
                for _ in 0..b {
                    for (r, &pc) in res.iter_mut().zip(&chans_bw) {
                        r.extend_from_slice(&g[off..off + pc * n]);
                        off += pc * n;
                    }
                }
                res.into_iter().map(Some).collect()
            }),
        ))
    }

    /// Channel mixing `out[b,o,x] = sum_i W[o,i] x[b,i,x] + bias[o]`.
    pub fn pointwise_mix(&mut self, x: Var, w: Var, bias: Option<Var>) -> Result<Var> {
        let (b, cin, s) = split_bcs(self.shape(x))?;
        let spatial = s.to_vec();
        let ws = self.shape(w);
        if ws.len() != 2 || ws[1] != cin {
            return Err(dim_err!("pointwise_mix: weight {:?} for {} input channels", ws, cin));
        }
        let cout = ws[0];
        if let Some(bv) = bias {
            if self.shape(bv) != [cout] {
                return Err(dim_err!("pointwise_mix: bias {:?} for {} outputs", self.shape(bv), cout));
            }
        }
        let n: usize = spatial.iter().product();
        let mut out = vec![T::zero(); b * cout * n];
        {
            let (xv, wv) = (self.value(x), self.value(w));
            for bi in 0..b {
                let dst = &mut out[bi * cout * n..(bi + 1) * cout * n];
                if let Some(bv) = bias {
                    for (o, &bo) in self.value(bv).iter().enumerate() {
                        dst[o * n..(o + 1) * n].iter_mut().for_each(|v| *v = bo);
                    }
                }
                matmul(cout, cin, n, wv, &xv[bi * cin * n..(bi + 1) * cin * n], dst, bias.is_some());
            }
        }
        let mut shape = vec![b, cout];
        shape.extend_from_slice(&spatial);
        let mut inputs = vec![x, w];
        inputs.extend(bias);
        Ok(self.record(
            shape,
            out,
            inputs,
            Box::new(move |gr, g| {
                let (xv, wv) = (gr.value(x), gr.value(w));
                let mut dx = gr.requires_grad(x).then(|| vec![T::zero(); b * cin * n]);
                let mut dw = vec![T::zero(); cout * cin];
                for bi in 0..b {
                    let gb = &g[bi * cout * n..(bi + 1) * cout * n];
                    if let Some(dx) = dx.as_mut() {
                        matmul_at(cin, cout, n, wv, gb, &mut dx[bi * cin * n..(bi + 1) * cin * n], false);
                    }
                    matmul_bt(cout, n, cin, gb, &xv[bi * cin * n..(bi + 1) * cin * n], &mut dw, true);
                }
                let mut res = vec![dx, Some(dw)];
                if bias.is_some() {
                    let mut db = vec![T::zero(); cout];
                    for bi in 0..b {
                        for (o, d) in db.iter_mut().enumerate() {
                            let row = &g[(bi * cout + o) * n..(bi * cout + o + 1) * n];
                            *d = row.iter().fold(*d, |acc, &v| acc + v);
                        }
                    }
                    res.push(Some(db));
                }
                res
            }),
        ))
    }

    /// Circular padding by `pad` cells on both ends of every spatial axis.
    pub fn circular_pad(&mut self, x: Var, pad: usize) -> Result<Var> {
        let (b, c, s) = split_bcs(self.shape(x))?;
        let spatial = s.to_vec();
        if spatial.iter().any(|&n| pad > n) {
            return Err(dim_err!("pad {} exceeds extent {:?}", pad, spatial));
        }
        let (ny, nx) = if spatial.len() == 2 { (spatial[0], spatial[1]) } else { (1, spatial[0]) };
        let (py, px) = if spatial.len() == 2 { (ny + 2 * pad, nx + 2 * pad) } else { (1, nx + 2 * pad) };
        let pad_y = if spatial.len() == 2 { pad } else { 0 };
        // index map from padded position to source position
        let mut map = Vec::with_capacity(py * px);
        for y in 0..py {
            let sy = (y + ny - pad_y) % ny;
            for xx in 0..px {
                let sx = (xx + nx - pad) % nx;
                map.push(sy * nx + sx);
            }
        }
        let (fin, fout) = (ny * nx, py * px);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(b * c * fout);
        for f in 0..b * c {
            let src = &xv[f * fin..(f + 1) * fin];
            out.extend(map.iter().map(|&i| src[i]));
        }
        let mut shape = vec![b, c];
        if spatial.len() == 2 {
            shape.extend([py, px]);
        } else {
            shape.push(px);
        }
        Ok(self.record(
            shape,
            out,
            vec![x],
            Box::new(move |_, g| {
                let mut dx = vec![T::zero(); b * c * fin];
                for f in 0..b * c {
                    let dst = &mut dx[f * fin..(f + 1) * fin];
                    for (&i, &v) in map.iter().zip(&g[f * fout..(f + 1) * fout]) {
                        dst[i] = dst[i] + v;
                    }
                }
                vec![Some(dx)]
            }),
        ))
    }

    /// Stride-2 convolution with a `3^d` stencil and circular boundary.
    /// `w` has shape `[Cout, Cin, 3]` or `[Cout, Cin, 3, 3]`.
    pub fn conv_down(&mut self, x: Var, w: Var, bias: Var) -> Result<Var> {
        let (b, cin, s) = split_bcs(self.shape(x))?;
        let spatial = s.to_vec();
        let dims = spatial.len();
        if spatial.iter().any(|&n| n % 2 != 0) {
            return Err(dim_err!("stride-2 down needs even extents, got {:?}", spatial));
        }
        let ws = self.shape(w).to_vec();
        let taps = 3usize.pow(dims as u32);
        if ws.len() != 2 + dims || ws[1] != cin || ws[2..].iter().any(|&k| k != 3) {
            return Err(dim_err!("conv_down: weight {:?} for input {:?}", ws, self.shape(x)));
        }
        let cout = ws[0];
        if self.shape(bias) != [cout] {
            return Err(dim_err!("conv_down: bias {:?}", self.shape(bias)));
        }
        let (ny, nx) = if dims == 2 { (spatial[0], spatial[1]) } else { (1, spatial[0]) };
        let (my, mx) = if dims == 2 { (ny / 2, nx / 2) } else { (1, nx / 2) };
        let m = my * mx;
        let nin = ny * nx;
        let stencil = stencil3(dims);
        // gather index for (tap, output position)
        let mut idx = Vec::with_capacity(taps * m);
        for &(ty, tx) in &stencil {
            for oy in 0..my {
                let sy = if dims == 2 { (2 * oy as isize + ty).rem_euclid(ny as isize) as usize } else { 0 };
                for ox in 0..mx {
                    let sx = (2 * ox as isize + tx).rem_euclid(nx as isize) as usize;
                    idx.push(sy * nx + sx);
                }
            }
        }
        let k = cin * taps;
        let im2col = {
            let idx = idx.clone();
            move |xs: &[T], col: &mut [T]| {
                for ci in 0..cin {
                    let src = &xs[ci * nin..(ci + 1) * nin];
                    for t in 0..taps {
                        let row = &mut col[(ci * taps + t) * m..(ci * taps + t + 1) * m];
                        for (r, &i) in row.iter_mut().zip(&idx[t * m..(t + 1) * m]) {
                            *r = src[i];
                        }
                    }
                }
            }
        };
        let mut out = vec![T::zero(); b * cout * m];
        let mut col = vec![T::zero(); k * m];
        {
            let (xv, wv, bv) = (self.value(x), self.value(w), self.value(bias));
            for bi in 0..b {
                im2col(&xv[bi * cin * nin..(bi + 1) * cin * nin], &mut col);
                let dst = &mut out[bi * cout * m..(bi + 1) * cout * m];
                for (o, &bo) in bv.iter().enumerate() {
                    dst[o * m..(o + 1) * m].iter_mut().for_each(|v| *v = bo);
                }
                matmul(cout, k, m, wv, &col, dst, true);
            }
        }
        let mut shape = vec![b, cout];
        if dims == 2 {
            shape.extend([my, mx]);
        } else {
            shape.push(mx);
        }
        Ok(self.record(
            shape,
            out,
            vec![x, w, bias],
            Box::new(move |gr, g| {
                let (xv, wv) = (gr.value(x), gr.value(w));
                let mut dx = vec![T::zero(); b * cin * nin];
                let mut dw = vec![T::zero(); cout * k];
                let mut db = vec![T::zero(); cout];
                let mut col = vec![T::zero(); k * m];
                let mut dcol = vec![T::zero(); k * m];
                for bi in 0..b {
                    let gb = &g[bi * cout * m..(bi + 1) * cout * m];
                    im2col(&xv[bi * cin * nin..(bi + 1) * cin * nin], &mut col);
                    matmul_bt(cout, m, k, gb, &col, &mut dw, true);
                    matmul_at(k, cout, m, wv, gb, &mut dcol, false);
                    let dxb = &mut dx[bi * cin * nin..(bi + 1) * cin * nin];
                    for ci in 0..cin {
                        let dst = &mut dxb[ci * nin..(ci + 1) * nin];
                        for t in 0..taps {
                            let row = &dcol[(ci * taps + t) * m..(ci * taps + t + 1) * m];
                            for (&v, &i) in row.iter().zip(&idx[t * m..(t + 1) * m]) {
                                dst[i] = dst[i] + v;
                            }
                        }
                    }
                    for (o, d) in db.iter_mut().enumerate() {
                        *d = gb[o * m..(o + 1) * m].iter().fold(*d, |acc, &v| acc + v);
                    }
                }
                vec![Some(dx), Some(dw), Some(db)]
            }),
        ))
    }

    /// Bilinear 2x upsampling on the periodic grid (half-pixel centers).
    pub fn bilinear_up(&mut self, x: Var) -> Result<Var> {
        let (b, c, s) = split_bcs(self.shape(x))?;
        let spatial = s.to_vec();
        let f = b * c;
        let out = if spatial.len() == 1 {
            upsample_axis(self.value(x), f, spatial[0], 1)
        } else {
            let (ny, nx) = (spatial[0], spatial[1]);
            let t = upsample_axis(self.value(x), f * ny, nx, 1);
            upsample_axis(&t, f, ny, 2 * nx)
        };
        let mut shape = vec![b, c];
        shape.extend(spatial.iter().map(|&n| 2 * n));
        Ok(self.record(
            shape,
            out,
            vec![x],
            Box::new(move |_, g| {
                let dx = if spatial.len() == 1 {
                    upsample_axis_adjoint(g, f, spatial[0], 1)
                } else {
                    let (ny, nx) = (spatial[0], spatial[1]);
                    let t = upsample_axis_adjoint(g, f, ny, 2 * nx);
                    upsample_axis_adjoint(&t, f * ny, nx, 1)
                };
                vec![Some(dx)]
            }),
        ))
    }

    /// Depthwise circular correlation with per-group kernels `k[G, W^d]`
    /// (`W` odd, centered). Channel `c` uses kernel `c / (C / G)`.
    pub fn depthwise_conv(&mut self, x: Var, k: Var) -> Result<Var> {
        let (b, c, s) = split_bcs(self.shape(x))?;
        let spatial = s.to_vec();
        let dims = spatial.len();
        let ks = self.shape(k).to_vec();
        if ks.len() != 2 {
            return Err(dim_err!("depthwise kernel must be [groups, taps], got {:?}", ks));
        }
        let groups = ks[0];
        if groups == 0 || c % groups != 0 {
            return Err(dim_err!("{} channels not divisible into {} groups", c, groups));
        }
        let width = match dims {
            1 => ks[1],
            _ => (ks[1] as f64).sqrt().round() as usize,
        };
        if width % 2 == 0 || width.pow(dims as u32) != ks[1] {
            return Err(dim_err!("kernel taps {} do not form an odd {}-D stencil", ks[1], dims));
        }
        let r = (width / 2) as isize;
        let per_group = c / groups;
        let (ny, nx) = if dims == 2 { (spatial[0], spatial[1]) } else { (1, spatial[0]) };
        let taps: Vec<(isize, isize)> = if dims == 1 {
            (-r..=r).map(|d| (0, d)).collect()
        } else {
            (-r..=r).flat_map(|dy| (-r..=r).map(move |dx| (dy, dx))).collect()
        };
        let n = ny * nx;
        let (xv, kv) = (self.value(x), self.value(k));
        let mut out = vec![T::zero(); xv.len()];
        for f in 0..b * c {
            let gi = (f % c) / per_group;
            let kr = &kv[gi * taps.len()..(gi + 1) * taps.len()];
            let src = &xv[f * n..(f + 1) * n];
            let dst = &mut out[f * n..(f + 1) * n];
            for (&(dy, dx), &kw) in taps.iter().zip(kr) {
                if kw == T::zero() {
                    continue;
                }
                for y in 0..ny {
                    let sy = (y as isize + dy).rem_euclid(ny as isize) as usize;
                    shifted_axpy(&mut dst[y * nx..(y + 1) * nx], &src[sy * nx..(sy + 1) * nx], dx, kw);
                }
            }
        }
        Ok(self.record(
            self.shape(x).to_vec(),
            out,
            vec![x, k],
            Box::new(move |gr, g| {
                let (xv, kv) = (gr.value(x), gr.value(k));
                let ntap = taps.len();
                let mut dx = gr.requires_grad(x).then(|| vec![T::zero(); xv.len()]);
                let mut dk = vec![T::zero(); kv.len()];
                for f in 0..b * c {
                    let gi = (f % c) / per_group;
                    let src = &xv[f * n..(f + 1) * n];
                    let gf = &g[f * n..(f + 1) * n];
                    for (t, &(dy, ddx)) in taps.iter().enumerate() {
                        let kw = kv[gi * ntap + t];
                        let mut acc = T::zero();
                        for y in 0..ny {
                            let sy = (y as isize + dy).rem_euclid(ny as isize) as usize;
                            let grow = &gf[y * nx..(y + 1) * nx];
                            acc = acc + shifted_dot(grow, &src[sy * nx..(sy + 1) * nx], ddx);
                            if let Some(dx) = dx.as_mut() {
                                if kw != T::zero() {
                                    // out[y, x] += k * in[y+dy, x+dx]  =>  din[y+dy, :] += k * g[y, :-dx]
                                    let drow = &mut dx[f * n + sy * nx..f * n + (sy + 1) * nx];
                                    shifted_axpy(drow, grow, -ddx, kw);
                                }
                            }
                        }
                        dk[gi * ntap + t] = dk[gi * ntap + t] + acc;
                    }
                }
                vec![dx, Some(dk)]
            }),
        ))
    }

    /// Truncated spectral convolution: rfft, complex channel mixing on the
    /// retained low modes, inverse rfft. Weights are `[C, C, K0]` or
    /// `[C, C, K0, K0]` (real and imaginary parts as separate tensors).
    pub fn spectral_conv(&mut self, h: Var, w_re: Var, w_im: Var) -> Result<Var> {
        let (b, c, s) = split_bcs(self.shape(h))?;
        let spatial = s.to_vec();
        let dims = spatial.len();
        let ws = self.shape(w_re).to_vec();
        if ws.len() != 2 + dims || ws[0] != c || ws[1] != c || ws[2..].iter().any(|&k| k != ws[2]) {
            return Err(dim_err!("spectral weights {:?} for input {:?}", ws, self.shape(h)));
        }
        if self.shape(w_im) != ws.as_slice() {
            return Err(dim_err!("spectral re/im weights differ in shape"));
        }
        let k0 = ws[2];
        let kw = k0.pow(dims as u32);
        let hlen: usize = half_shape(&spatial).iter().product();
        let modes = retained_modes(&spatial, k0);
        let (xre, xim) = rfft_fields(self.value(h), &spatial);
        let mut yre = vec![T::zero(); xre.len()];
        let mut yim = vec![T::zero(); xim.len()];
        {
            let (rre, rim) = (self.value(w_re), self.value(w_im));
            let (cs, rs) = ((c * hlen) as isize, hlen as isize);
            let neg_one = -T::one();
            for &(p, wi) in &modes {
                // SAFETY: all offsets stay inside the [B,C,hlen] and [C,C,kw] buffers.
                unsafe {
                    let ar = rre.as_ptr().add(wi);
                    let ai = rim.as_ptr().add(wi);
                    let xr = xre.as_ptr().add(p);
                    let xi = xim.as_ptr().add(p);
                    let (wr, wcol) = ((c * kw) as isize, kw as isize);
                    T::gemm(c, c, b, T::one(), ar, wr, wcol, xr, rs, cs, T::zero(), yre.as_mut_ptr().add(p), rs, cs);
                    T::gemm(c, c, b, neg_one, ai, wr, wcol, xi, rs, cs, T::one(), yre.as_mut_ptr().add(p), rs, cs);
                    T::gemm(c, c, b, T::one(), ar, wr, wcol, xi, rs, cs, T::zero(), yim.as_mut_ptr().add(p), rs, cs);
                    T::gemm(c, c, b, T::one(), ai, wr, wcol, xr, rs, cs, T::one(), yim.as_mut_ptr().add(p), rs, cs);
                }
            }
        }
        let out = irfft_fields(&yre, &yim, &spatial);
        Ok(self.record(
            self.shape(h).to_vec(),
            out,
            vec![h, w_re, w_im],
            Box::new(move |gr, g| {
                let (rre, rim) = (gr.value(w_re), gr.value(w_im));
                let (gre, gim) = irfft_adjoint_fields(g, &spatial);
                let mut dxre = vec![T::zero(); xre.len()];
                let mut dxim = vec![T::zero(); xim.len()];
                let mut drre = vec![T::zero(); rre.len()];
                let mut drim = vec![T::zero(); rim.len()];
                let (cs, rs) = ((c * hlen) as isize, hlen as isize);
                let (wr, wcol) = ((c * kw) as isize, kw as isize);
                let one = T::one();
                let neg_one = -T::one();
                for &(p, wi) in &modes {
                    // SAFETY: same index ranges as the forward pass.
                    unsafe {
                        let ar = rre.as_ptr().add(wi);
                        let ai = rim.as_ptr().add(wi);
                        let (dyr, dyi) = (gre.as_ptr().add(p), gim.as_ptr().add(p));
                        let (xr, xi) = (xre.as_ptr().add(p), xim.as_ptr().add(p));
                        // dX_re = R_re^T dY_re + R_im^T dY_im
                        T::gemm(c, c, b, one, ar, wcol, wr, dyr, rs, cs, T::zero(), dxre.as_mut_ptr().add(p), rs, cs);
                        T::gemm(c, c, b, one, ai, wcol, wr, dyi, rs, cs, one, dxre.as_mut_ptr().add(p), rs, cs);
                        // dX_im = -R_im^T dY_re + R_re^T dY_im
                        T::gemm(c, c, b, neg_one, ai, wcol, wr, dyr, rs, cs, T::zero(), dxim.as_mut_ptr().add(p), rs, cs);
                        T::gemm(c, c, b, one, ar, wcol, wr, dyi, rs, cs, one, dxim.as_mut_ptr().add(p), rs, cs);
                        // dR_re += dY_re X_re^T + dY_im X_im^T, accumulated since
                        // negative-frequency rows share weights
                        let (drr, dri) = (drre.as_mut_ptr().add(wi), drim.as_mut_ptr().add(wi));
                        T::gemm(c, b, c, one, dyr, rs, cs, xr, cs, rs, one, drr, wr, wcol);
                        T::gemm(c, b, c, one, dyi, rs, cs, xi, cs, rs, one, drr, wr, wcol);
                        // dR_im = -dY_re X_im^T + dY_im X_re^T
                        T::gemm(c, b, c, neg_one, dyr, rs, cs, xi, cs, rs, one, dri, wr, wcol);
                        T::gemm(c, b, c, one, dyi, rs, cs, xr, cs, rs, one, dri, wr, wcol);
                    }
                }
                let dh = gr
                    .requires_grad(h)
                    .then(|| rfft_adjoint_fields(&dxre, &dxim, &spatial));
                vec![dh, Some(drre), Some(drim)]
            }),
        ))
    }

    /// Mean squared difference, a scalar.
    pub fn mse(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mse")?;
        let n = self.value(a).len();
        let inv = T::one() / T::lit(n as f64);
        let diff: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let v = diff.iter().fold(T::zero(), |acc, &d| acc + d * d) * inv;
        Ok(self.record(
            vec![],
            vec![v],
            vec![a, b],
            Box::new(move |_, g| {
                let s = T::lit(2.0) * inv * g[0];
                let da: Vec<T> = diff.iter().map(|&d| d * s).collect();
                let db = da.iter().map(|&d| -d).collect();
                vec![Some(da), Some(db)]
            }),
        ))
    }

    /// Half the mean squared central-difference gradient error over all
    /// spatial axes, circular, with grid spacing `1/N` per axis.
    pub fn h1_term(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "h1_term")?;
        let (_, _, s) = split_bcs(self.shape(a))?;
        let spatial = s.to_vec();
        let total = self.value(a).len();
        let e: Vec<T> = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x - y).collect();
        let derivs: Vec<Vec<T>> = (0..spatial.len()).map(|ax| central_diff(&e, &spatial, ax)).collect();
        let inv = T::one() / T::lit(total as f64);
        let half = T::lit(0.5);
        let v = derivs
            .iter()
            .flat_map(|d| d.iter())
            .fold(T::zero(), |acc, &x| acc + x * x)
            * inv
            * half;
        Ok(self.record(
            vec![],
            vec![v],
            vec![a, b],
            Box::new(move |_, g| {
                // d/de of (1/2N) sum |D e|^2 is D^T D e / N, and D^T = -D
                let mut da = vec![T::zero(); total];
                for (ax, d) in derivs.iter().enumerate() {
                    let dt = central_diff(d, &spatial, ax);
                    for (o, &v) in da.iter_mut().zip(&dt) {
                        *o = *o - v * inv * g[0];
                    }
                }
                let db = da.iter().map(|&x| -x).collect();
                vec![Some(da), Some(db)]
            }),
        ))
    }
}

/// Circular central difference `(e[i+1] - e[i-1]) * N / 2` along spatial
/// axis `ax` of a `[.., spatial]` buffer.
pub fn central_diff<T: Scalar>(e: &[T], spatial: &[usize], ax: usize) -> Vec<T> {
    let n_ax = spatial[ax];
    let inner: usize = spatial[ax + 1..].iter().product();
    let field: usize = spatial.iter().product();
    let outer = e.len() / n_ax / inner;
    let _ = field;
    let scale = T::lit(n_ax as f64 / 2.0);
    let mut out = vec![T::zero(); e.len()];
    for o in 0..outer {
        let base = o * n_ax * inner;
        for i in 0..n_ax {
            let (ip, im) = ((i + 1) % n_ax, (i + n_ax - 1) % n_ax);
            for j in 0..inner {
                out[base + i * inner + j] =
                    (e[base + ip * inner + j] - e[base + im * inner + j]) * scale;
            }
        }
    }
    out
}
