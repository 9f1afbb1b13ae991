//! Sparse per-pixel routing between the two branch outputs.
//!
//! The forward value is the hard top-k mux; the backward pass follows the
//! straight-through relaxation `g = g_hard + sigmoid(s/T) - sg(sigmoid(s/T))`.

use std::hash::{DefaultHasher, Hash, Hasher};

use serde::{Deserialize, Serialize};

use crate::error::{config_err, contract_err, dim_err, Result};
use crate::scalar::Scalar;
use crate::tensor::ops::sigmoid_scalar;
use crate::tensor::{split_bcs, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SparConfig {
    pub rho0: f64,
    pub beta: f64,
    pub rho_min: f64,
    pub rho_max: f64,
    pub temperature: f64,
    pub eps: f64,
}

impl Default for SparConfig {
    fn default() -> Self {
        Self {
            rho0: 0.30,
            beta: 0.25,
            rho_min: 0.10,
            rho_max: 0.90,
            temperature: 0.8,
            eps: 1e-6,
        }
    }
}

impl SparConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = 0.0 < self.rho_min
            && self.rho_min <= self.rho0
            && self.rho0 <= self.rho_max
            && self.rho_max < 1.0
            && self.temperature > 0.0
            && self.eps > 0.0
            && self.beta.is_finite();
        if !ok {
            return Err(config_err!("invalid routing hyperparameters {:?}", self));
        }
        Ok(())
    }
}

/// Per-sample `(rho, c)` from the logits of one sample.
pub fn keep_ratio<T: Scalar>(s: &[T], cfg: &SparConfig) -> (f64, f64) {
    let n = s.len() as f64;
    let mean = s.iter().map(|v| v.to_f64_lossy()).sum::<f64>() / n;
    let var = s.iter().map(|v| (v.to_f64_lossy() - mean).powi(2)).sum::<f64>() / n;
    let abs_mean = s.iter().map(|v| v.to_f64_lossy().abs()).sum::<f64>() / n;
    let c = var.sqrt() / (abs_mean + cfg.eps);
    let rho = (cfg.rho0 * (1.0 + cfg.beta * (c - 1.0).tanh())).clamp(cfg.rho_min, cfg.rho_max);
    (rho, c)
}

/// Number of routed pixels `ceil(rho N)`.
pub fn keep_count(rho: f64, n: usize) -> usize {
    ((rho * n as f64).ceil() as usize).min(n)
}

/// Indices of the `k` largest logits; ties go to the lower index.
pub fn top_k<T: Scalar>(s: &[T], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s[b].to_f64_lossy().total_cmp(&s[a].to_f64_lossy()));
    idx.truncate(k);
    idx
}

/// Routing artifacts of one gate evaluation.
#[derive(Clone, Debug)]
pub struct RoutingState<T: Scalar = f64> {
    pub logits: Tensor<T>,
    pub contrast: Vec<f64>,
    pub rho: Vec<f64>,
    pub k: Vec<usize>,
    pub g_hard: Tensor<T>,
    pub g_soft: Tensor<T>,
    digest: u64,
}

/// Discrete routing decisions replayed verbatim; see [`crate::model::ForwardOptions`].
#[derive(Clone, Debug)]
pub struct FrozenGate<T: Scalar = f64> {
    pub g_hard: Tensor<T>,
    pub soft_base: Tensor<T>,
}

impl<T: Scalar> RoutingState<T> {
    pub fn freeze(&self) -> FrozenGate<T> {
        FrozenGate {
            g_hard: self.g_hard.clone(),
            soft_base: self.g_soft.clone(),
        }
    }
}

fn digest<T: Scalar>(parts: &[&[T]]) -> u64 {
    let mut h = DefaultHasher::new();
    for p in parts {
        p.len().hash(&mut h);
        for v in p.iter() {
            v.to_f64_lossy().to_bits().hash(&mut h);
        }
    }
    h.finish()
}

fn check_shapes(zf: &[usize], zg: &[usize], s: &[usize]) -> Result<(usize, usize, usize)> {
    if zf != zg {
        return Err(dim_err!("branch outputs {:?} and {:?} differ", zf, zg));
    }
    let (b, c, sp) = split_bcs(zf)?;
    let mut want = vec![b, 1];
    want.extend_from_slice(sp);
    if s != want.as_slice() {
        return Err(dim_err!("logits {:?}, expected {:?}", s, want));
    }
    let n: usize = sp.iter().product();
    if n < 2 {
        return Err(dim_err!("routing needs at least 2 spatial points"));
    }
    Ok((b, c, n))
}

fn gate_state<T: Scalar>(
    s: &Tensor<T>,
    b: usize,
    n: usize,
    cfg: &SparConfig,
    frozen: Option<&FrozenGate<T>>,
) -> Result<(Vec<f64>, Vec<f64>, Vec<usize>, Vec<T>, Vec<T>)> {
    let inv_t = T::lit(1.0 / cfg.temperature);
    let soft: Vec<T> = s.data().iter().map(|&v| sigmoid_scalar(v * inv_t)).collect();
    let (mut rho, mut con, mut ks) = (Vec::with_capacity(b), Vec::with_capacity(b), Vec::with_capacity(b));
    let mut hard = vec![T::zero(); b * n];
    for bi in 0..b {
        let sb = &s.data()[bi * n..(bi + 1) * n];
        let (r, c) = keep_ratio(sb, cfg);
        let k = keep_count(r, n);
        if frozen.is_none() {
            for i in top_k(sb, k) {
                hard[bi * n + i] = T::one();
            }
        }
        rho.push(r);
        con.push(c);
        ks.push(k);
    }
    if let Some(f) = frozen {
        if f.g_hard.shape() != s.shape() || f.soft_base.shape() != s.shape() {
            return Err(dim_err!("frozen gate {:?} for logits {:?}", f.g_hard.shape(), s.shape()));
        }
        hard.copy_from_slice(f.g_hard.data());
    }
    Ok((rho, con, ks, hard, soft))
}

/// Hard top-k mux: `r = g_hard zF + (1 - g_hard) zG`, evaluated by selection.
pub fn route<T: Scalar>(
    zf: &Tensor<T>,
    zg: &Tensor<T>,
    s: &Tensor<T>,
    cfg: &SparConfig,
) -> Result<(Tensor<T>, RoutingState<T>)> {
    let (b, c, n) = check_shapes(zf.shape(), zg.shape(), s.shape())?;
    let (rho, contrast, k, hard, soft) = gate_state(s, b, n, cfg, None)?;
    let r = mux(zf.data(), zg.data(), &hard, b, c, n);
    let state = RoutingState {
        logits: s.clone(),
        contrast,
        rho,
        k,
        g_hard: Tensor::new(s.shape().to_vec(), hard)?,
        g_soft: Tensor::new(s.shape().to_vec(), soft)?,
        digest: digest(&[s.data(), zf.data(), zg.data()]),
    };
    Ok((Tensor::new(zf.shape().to_vec(), r)?, state))
}

fn mux<T: Scalar>(zf: &[T], zg: &[T], hard: &[T], b: usize, c: usize, n: usize) -> Vec<T> {
    let mut r = Vec::with_capacity(zf.len());
    for bi in 0..b {
        let gate = &hard[bi * n..(bi + 1) * n];
        for ci in 0..c {
            let o = (bi * c + ci) * n;
            r.extend((0..n).map(|j| if gate[j] == T::one() { zf[o + j] } else { zg[o + j] }));
        }
    }
    r
}

/// `(dzF, dzG, ds)` for gate value `g` and soft gate `soft`.
#[allow(clippy::too_many_arguments)]
fn gate_grads<T: Scalar>(
    delta: &[T],
    zf: &[T],
    zg: &[T],
    g: &[T],
    soft: &[T],
    temperature: f64,
    (b, c, n): (usize, usize, usize),
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let inv_t = T::lit(1.0 / temperature);
    let mut dzf = vec![T::zero(); delta.len()];
    let mut dzg = vec![T::zero(); delta.len()];
    let mut ds = vec![T::zero(); b * n];
    for bi in 0..b {
        for ci in 0..c {
            let o = (bi * c + ci) * n;
            for j in 0..n {
                let gj = g[bi * n + j];
                let d = delta[o + j];
                dzf[o + j] = gj * d;
                dzg[o + j] = (T::one() - gj) * d;
                ds[bi * n + j] = ds[bi * n + j] + d * (zf[o + j] - zg[o + j]);
            }
        }
        for j in 0..n {
            let sg = soft[bi * n + j];
            ds[bi * n + j] = ds[bi * n + j] * sg * (T::one() - sg) * inv_t;
        }
    }
    (dzf, dzg, ds)
}

/// Explicit backward of [`route`]: direct-path `(dzF, dzG)` and the
/// score-path logit gradient `ds`. Continuing `ds` through the score MLP is
/// left to the caller.
pub fn spar_backward<T: Scalar>(
    delta: &Tensor<T>,
    state: &RoutingState<T>,
    zf: &Tensor<T>,
    zg: &Tensor<T>,
    cfg: &SparConfig,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let dims = check_shapes(zf.shape(), zg.shape(), state.logits.shape())?;
    if delta.shape() != zf.shape() {
        return Err(dim_err!("cotangent {:?} for output {:?}", delta.shape(), zf.shape()));
    }
    if digest(&[state.logits.data(), zf.data(), zg.data()]) != state.digest {
        return Err(contract_err!("routing state was produced from different inputs"));
    }
    let (dzf, dzg, ds) = gate_grads(
        delta.data(),
        zf.data(),
        zg.data(),
        state.g_hard.data(),
        state.g_soft.data(),
        cfg.temperature,
        dims,
    );
    Ok((
        Tensor::new(zf.shape().to_vec(), dzf)?,
        Tensor::new(zf.shape().to_vec(), dzg)?,
        Tensor::new(state.logits.shape().to_vec(), ds)?,
    ))
}

impl<T: Scalar> Graph<T> {
    /// Routing logits `W2 GELU(W1 [zF; zG] + b1) + b2`.
    pub fn routing_logits(
        &mut self,
        zf: Var,
        zg: Var,
        w1: (Var, Option<Var>),
        w2: (Var, Option<Var>),
    ) -> Result<Var> {
        if self.shape(zf) != self.shape(zg) {
            return Err(dim_err!("branch outputs {:?} and {:?} differ", self.shape(zf), self.shape(zg)));
        }
        let cat = self.concat_channels(&[zf, zg])?;
        let hid = self.pointwise_mix(cat, w1.0, w1.1)?;
        let hid = self.gelu(hid);
        self.pointwise_mix(hid, w2.0, w2.1)
    }

    /// Recorded SPAR mux. With `frozen`, the mask and the subtracted soft
    /// gate come from an earlier pass, so the forward becomes the smooth
    /// function `(g_hard + sigmoid(s/T) - soft_base)` mux whose exact
    /// derivative is the straight-through gradient.
    pub fn spar_route(
        &mut self,
        zf: Var,
        zg: Var,
        s: Var,
        cfg: &SparConfig,
        frozen: Option<&FrozenGate<T>>,
    ) -> Result<(Var, RoutingState<T>)> {
        let dims @ (b, c, n) = check_shapes(self.shape(zf), self.shape(zg), self.shape(s))?;
        let logits = self.tensor(s);
        let (rho, contrast, k, hard, soft) = gate_state(&logits, b, n, cfg, frozen)?;
        let (value, gate) = match frozen {
            None => (mux(self.value(zf), self.value(zg), &hard, b, c, n), hard.clone()),
            Some(f) => {
                let g: Vec<T> = hard
                    .iter()
                    .zip(&soft)
                    .zip(f.soft_base.data())
                    .map(|((&h, &sg), &base)| h + sg - base)
                    .collect();
                let (zfv, zgv) = (self.value(zf), self.value(zg));
                let mut r = Vec::with_capacity(zfv.len());
                for bi in 0..b {
                    for ci in 0..c {
                        let o = (bi * c + ci) * n;
                        r.extend((0..n).map(|j| {
                            let gj = g[bi * n + j];
                            gj * zfv[o + j] + (T::one() - gj) * zgv[o + j]
                        }));
                    }
                }
                (r, g)
            }
        };
        let state = RoutingState {
            digest: digest(&[logits.data(), self.value(zf), self.value(zg)]),
            logits,
            contrast,
            rho,
            k,
            g_hard: Tensor::new(self.shape(s).to_vec(), hard)?,
            g_soft: Tensor::new(self.shape(s).to_vec(), soft.clone())?,
        };
        let temperature = cfg.temperature;
        let out = self.record(
            self.shape(zf).to_vec(),
            value,
            vec![zf, zg, s],
            Box::new(move |gr, d| {
                let (dzf, dzg, ds) =
                    gate_grads(d, gr.value(zf), gr.value(zg), &gate, &soft, temperature, dims);
                vec![Some(dzf), Some(dzg), Some(ds)]
            }),
        );
        Ok((out, state))
    }
}
