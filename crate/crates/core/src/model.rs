//! U-HNO assembly: lifting, U-shaped backbone of hybrid blocks, projection,
//! and the ablation variants.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{config_err, dim_err, Error, Result};
use crate::io;
use crate::losses::{LossVars, LossWeights};
use crate::scalar::Scalar;
use crate::spar::{FrozenGate, RoutingState, SparConfig};
use crate::spectral::{effective_modes, SpectralWeights};
use crate::tensor::{split_bcs, Graph, Tensor, Var};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AblationMode {
    Full,
    NoLocal,
    NoGlobal,
    NoCbc,
    NoH1,
    MseOnly,
    NoSpar,
    NoUShape,
    SymDec,
    NoNorm,
}

impl AblationMode {
    pub const ALL: [AblationMode; 10] = [
        Self::Full,
        Self::NoLocal,
        Self::NoGlobal,
        Self::NoCbc,
        Self::NoH1,
        Self::MseOnly,
        Self::NoSpar,
        Self::NoUShape,
        Self::SymDec,
        Self::NoNorm,
    ];

    /// Table label: `Full` or a letter `A`..`I`.
    pub fn letter(self) -> &'static str {
        match self {
            Self::Full => "Full",
            Self::NoLocal => "A",
            Self::NoGlobal => "B",
            Self::NoCbc => "C",
            Self::NoH1 => "D",
            Self::MseOnly => "E",
            Self::NoSpar => "F",
            Self::NoUShape => "G",
            Self::SymDec => "H",
            Self::NoNorm => "I",
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Self::Full => "full",
            Self::NoLocal => "no_local",
            Self::NoGlobal => "no_global",
            Self::NoCbc => "no_cbc",
            Self::NoH1 => "no_h1",
            Self::MseOnly => "mse_only",
            Self::NoSpar => "no_spar",
            Self::NoUShape => "no_u_shape",
            Self::SymDec => "sym_dec",
            Self::NoNorm => "no_norm",
        }
    }

    pub fn has_spectral(self) -> bool {
        self != Self::NoGlobal
    }

    pub fn has_gaussian(self) -> bool {
        self != Self::NoLocal
    }

    /// Hard per-pixel routing is active (both branches present, no concat).
    pub fn uses_spar(self) -> bool {
        !matches!(self, Self::NoLocal | Self::NoGlobal | Self::NoSpar)
    }

    pub fn normalized_kernel(self) -> bool {
        self != Self::NoNorm
    }

    /// Applies the mode's loss-weight overrides.
    pub fn loss_weights(self, base: LossWeights) -> LossWeights {
        match self {
            Self::NoCbc => LossWeights { lambda_cbc: 0.0, ..base },
            Self::NoH1 => LossWeights { lambda_h1: 0.0, ..base },
            Self::MseOnly => LossWeights::ZERO,
            _ => base,
        }
    }
}

impl fmt::Display for AblationMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for AblationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let t = s.trim();
        Self::ALL
            .into_iter()
            .find(|m| m.letter().eq_ignore_ascii_case(t) || m.name().eq_ignore_ascii_case(t))
            .ok_or_else(|| config_err!("unknown ablation mode '{}'", s))
    }
}

fn default_sigma_init() -> Vec<f64> {
    vec![0.5, 1.0, 2.5]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub dims: usize,
    pub levels: usize,
    pub c0: usize,
    pub k0: usize,
    pub scales: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    #[serde(default)]
    pub spar: SparConfig,
    #[serde(default = "default_ablation")]
    pub ablation: AblationMode,
    /// Initial kernel scales, one per scale.
    #[serde(default = "default_sigma_init")]
    pub sigma_init: Vec<f64>,
}

fn default_ablation() -> AblationMode {
    AblationMode::Full
}

impl ModelConfig {
    /// Burgers preset: L=3, C0=32, K0=24, M=3.
    pub fn burgers() -> Self {
        Self::new(1, 3, 32, 24, 3)
    }

    pub fn new(dims: usize, levels: usize, c0: usize, k0: usize, scales: usize) -> Self {
        Self {
            dims,
            levels,
            c0,
            k0,
            scales,
            in_channels: 1,
            out_channels: 1,
            spar: SparConfig::default(),
            ablation: AblationMode::Full,
            sigma_init: default_sigma_init(),
        }
    }

    pub fn with_mode(mut self, mode: AblationMode) -> Self {
        self.ablation = mode;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if self.dims != 1 && self.dims != 2 {
            return Err(config_err!("dims must be 1 or 2, got {}", self.dims));
        }
        if self.levels == 0 || self.c0 == 0 || self.k0 == 0 || self.scales == 0 {
            return Err(config_err!("levels, c0, k0 and scales must all be positive"));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(config_err!("channel counts must be positive"));
        }
        if self.dims == 2 && self.c0 % 4 != 0 {
            return Err(config_err!("2D kernels share one scale per 4 channels; c0={} is not a multiple of 4", self.c0));
        }
        if self.sigma_init.len() != self.scales {
            return Err(config_err!(
                "{} initial scales given for {} kernel scales",
                self.sigma_init.len(),
                self.scales
            ));
        }
        if self.sigma_init.iter().any(|&s| !(s > 0.0)) {
            return Err(config_err!("initial scales must be positive"));
        }
        self.spar.validate()
    }

    pub fn channels(&self, level: usize) -> usize {
        self.c0 << level
    }

    /// Every spatial extent must be divisible by `2^(L-1)`.
    pub fn check_extents(&self, spatial: &[usize]) -> Result<()> {
        if spatial.len() != self.dims {
            return Err(config_err!("{}-D model given {}-D field", self.dims, spatial.len()));
        }
        let f = if self.ablation == AblationMode::NoUShape { 1 } else { 1 << (self.levels - 1) };
        for &n in spatial {
            if n % f != 0 || n / f < 2 {
                return Err(config_err!(
                    "extent {} is not divisible by 2^(L-1) = {} with at least 2 points left",
                    n,
                    f
                ));
            }
        }
        Ok(())
    }
}

/// Kernel-scale groups at width `c`.
pub fn kernel_groups(c: usize, dims: usize) -> usize {
    if dims == 1 {
        c
    } else {
        (c / 4).max(1)
    }
}

fn block_params(c: usize, cfg: &ModelConfig) -> usize {
    let mode = cfg.ablation;
    let mix = |i: usize, o: usize| i * o + o;
    let mut n = mix(c, c); // residual
    if mode.has_spectral() {
        n += 2 * c * c * cfg.k0.pow(cfg.dims as u32);
    }
    if mode.has_gaussian() {
        let m = cfg.scales;
        n += m * (2 * mix(c, c) + kernel_groups(c, cfg.dims)) + mix(m * c, c);
    }
    if mode.uses_spar() {
        n += mix(2 * c, c) + mix(c, 1);
    } else if mode == AblationMode::NoSpar {
        n += mix(2 * c, c);
    }
    n
}

fn flat_params(cfg: &ModelConfig, depth: usize, width: usize) -> usize {
    let mix = |i: usize, o: usize| i * o + o;
    mix(cfg.in_channels, width)
        + depth * block_params(width, cfg)
        + mix(width, 4 * width)
        + mix(4 * width, cfg.out_channels)
}

/// Exact trainable scalar count as a closed-form function of the config.
pub fn param_count(cfg: &ModelConfig) -> usize {
    if cfg.ablation == AblationMode::NoUShape {
        let (d, w) = flat_layout(cfg);
        return flat_params(cfg, d, w);
    }
    let mix = |i: usize, o: usize| i * o + o;
    let taps = 3usize.pow(cfg.dims as u32);
    let c0 = cfg.c0;
    let mut n = mix(cfg.in_channels, c0);
    for l in 0..cfg.levels - 1 {
        let (c, cn) = (cfg.channels(l), cfg.channels(l + 1));
        n += block_params(c, cfg) + cn * c * taps + cn; // encoder
        n += mix(cn, c) + block_params(c, cfg); // decoder
    }
    n += block_params(cfg.channels(cfg.levels - 1), cfg);
    n + mix(c0, 4 * c0) + mix(4 * c0, cfg.out_channels)
}

/// Depth and width of the flat stack that best matches the U-shaped Full
/// model's parameter count: depth in 4..=12, width a multiple of 4.
pub fn flat_layout(cfg: &ModelConfig) -> (usize, usize) {
    let target = param_count(&ModelConfig { ablation: AblationMode::Full, ..cfg.clone() }) as i128;
    let flat_cfg = ModelConfig { ablation: AblationMode::NoUShape, ..cfg.clone() };
    let mut best = (4, 4, i128::MAX);
    for depth in 4..=12 {
        let mut width = 4;
        loop {
            let p = flat_params(&flat_cfg, depth, width) as i128;
            let diff = (p - target).abs();
            if diff < best.2 {
                best = (depth, width, diff);
            }
            if p > target {
                break;
            }
            width += 4;
        }
    }
    (best.0, best.1)
}

#[derive(Clone, Copy, Debug)]
struct Mix {
    w: usize,
    b: usize,
}

#[derive(Clone, Debug)]
struct GaussSlots {
    pre: Vec<Mix>,
    post: Vec<Mix>,
    log_sigma: Vec<usize>,
    fuse: Mix,
}

#[derive(Clone, Debug)]
struct BlockSlots {
    label: String,
    spectral: Option<(usize, usize)>,
    gauss: Option<GaussSlots>,
    score: Option<(Mix, Mix)>,
    concat: Option<Mix>,
    residual: Mix,
}

#[derive(Clone, Debug)]
enum Layout {
    UShape {
        lift: Mix,
        encoder: Vec<(BlockSlots, (usize, usize))>,
        bottleneck: BlockSlots,
        decoder: Vec<(Mix, BlockSlots)>,
        proj: (Mix, Mix),
    },
    Flat {
        lift: Mix,
        blocks: Vec<BlockSlots>,
        proj: (Mix, Mix),
    },
}

/// Which parameter slots belong to each branch of a block; used by the
/// gradient-angle diagnostic.
#[derive(Clone, Debug)]
pub struct BranchSlots {
    pub label: String,
    pub spectral: Vec<usize>,
    pub gaussian: Vec<usize>,
}

struct Builder<T: Scalar> {
    names: Vec<String>,
    tensors: Vec<Tensor<T>>,
    rng: ChaCha8Rng,
}

impl<T: Scalar> Builder<T> {
    fn push(&mut self, name: String, t: Tensor<T>) -> usize {
        self.names.push(name);
        self.tensors.push(t);
        self.tensors.len() - 1
    }

    fn uniform(&mut self, shape: &[usize], bound: f64) -> Tensor<T> {
        let rng = &mut self.rng;
        Tensor::from_fn(shape, |_| T::lit(rng.random_range(-bound..bound)))
    }

    fn mix(&mut self, name: &str, cin: usize, cout: usize) -> Mix {
        let bound = 1.0 / (cin as f64).sqrt();
        let w = self.uniform(&[cout, cin], bound);
        let b = self.uniform(&[cout], bound);
        Mix {
            w: self.push(format!("{name}.w"), w),
            b: self.push(format!("{name}.b"), b),
        }
    }

    fn down(&mut self, name: &str, cin: usize, cout: usize, dims: usize) -> (usize, usize) {
        let taps = 3usize.pow(dims as u32);
        let bound = 1.0 / ((cin * taps) as f64).sqrt();
        let mut shape = vec![cout, cin];
        shape.extend(std::iter::repeat_n(3, dims));
        let w = self.uniform(&shape, bound);
        let b = self.uniform(&[cout], bound);
        (self.push(format!("{name}.w"), w), self.push(format!("{name}.b"), b))
    }

    fn block(&mut self, label: &str, c: usize, cfg: &ModelConfig) -> Result<BlockSlots> {
        let mode = cfg.ablation;
        let spectral = if mode.has_spectral() {
            let w = SpectralWeights::<T>::init(c, cfg.k0, cfg.dims, &mut self.rng)?;
            Some((
                self.push(format!("{label}.spectral.re"), w.re),
                self.push(format!("{label}.spectral.im"), w.im),
            ))
        } else {
            None
        };
        let gauss = if mode.has_gaussian() {
            let groups = kernel_groups(c, cfg.dims);
            let mut g = GaussSlots { pre: vec![], post: vec![], log_sigma: vec![], fuse: Mix { w: 0, b: 0 } };
            for m in 0..cfg.scales {
                g.pre.push(self.mix(&format!("{label}.gauss{m}.pre"), c, c));
                let ls = Tensor::full(&[groups], T::lit(cfg.sigma_init[m].ln()));
                g.log_sigma.push(self.push(format!("{label}.gauss{m}.log_sigma"), ls));
                g.post.push(self.mix(&format!("{label}.gauss{m}.post"), c, c));
            }
            g.fuse = self.mix(&format!("{label}.gauss.fuse"), cfg.scales * c, c);
            Some(g)
        } else {
            None
        };
        let score = mode
            .uses_spar()
            .then(|| (self.mix(&format!("{label}.score1"), 2 * c, c), self.mix(&format!("{label}.score2"), c, 1)));
        let concat = (mode == AblationMode::NoSpar).then(|| self.mix(&format!("{label}.concat"), 2 * c, c));
        let residual = self.mix(&format!("{label}.residual"), c, c);
        Ok(BlockSlots { label: label.to_string(), spectral, gauss, score, concat, residual })
    }
}

/// Discrete choices of a forward pass (top-k masks, subtracted soft gates,
/// kernel radii) that can be replayed so the loss becomes a smooth function
/// of the parameters around the recorded point.
#[derive(Clone, Debug, Default)]
pub struct FrozenDiscrete<T: Scalar = f64> {
    pub gates: Vec<FrozenGate<T>>,
    pub radii: Vec<Vec<usize>>,
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ForwardOptions<'a, T: Scalar = f64> {
    pub frozen: Option<&'a FrozenDiscrete<T>>,
}

/// Side outputs of a forward pass.
#[derive(Clone, Debug)]
pub struct ForwardTrace<T: Scalar = f64> {
    /// `(block label, state)` for every routed block, in evaluation order.
    pub routing: Vec<(String, RoutingState<T>)>,
    pub radii: Vec<Vec<usize>>,
    /// `(zF, zG)` at the last routed block, present only when both branches exist.
    pub features: Option<(Var, Var)>,
    /// Retained modes per axis for each spectral call, `(label, K_eff)`.
    pub modes: Vec<(String, usize)>,
}

impl<T: Scalar> ForwardTrace<T> {
    pub fn freeze(&self) -> FrozenDiscrete<T> {
        FrozenDiscrete {
            gates: self.routing.iter().map(|(_, s)| s.freeze()).collect(),
            radii: self.radii.clone(),
        }
    }
}

struct Ctx<'a, 'o, T: Scalar> {
    g: &'a mut Graph<T>,
    params: &'a [Tensor<T>],
    vars: Vec<Option<Var>>,
    track: bool,
    cfg: &'a ModelConfig,
    opts: ForwardOptions<'o, T>,
    trace: ForwardTrace<T>,
}

impl<T: Scalar> Ctx<'_, '_, T> {
    fn p(&mut self, slot: usize) -> Var {
        if let Some(v) = self.vars[slot] {
            return v;
        }
        let v = if self.track {
            self.g.param(slot, &self.params[slot])
        } else {
            self.g.constant(&self.params[slot])
        };
        self.vars[slot] = Some(v);
        v
    }

    fn mix(&mut self, x: Var, m: Mix) -> Result<Var> {
        let (w, b) = (self.p(m.w), self.p(m.b));
        self.g.pointwise_mix(x, w, Some(b))
    }

    fn spectral(&mut self, label: &str, h: Var, slots: (usize, usize)) -> Result<Var> {
        let (re, im) = (self.p(slots.0), self.p(slots.1));
        let n = *self.g.shape(h).last().unwrap();
        self.trace.modes.push((label.to_string(), effective_modes(self.cfg.k0, n)));
        self.g.spectral_conv(h, re, im)
    }

    fn gaussian(&mut self, h: Var, gs: &GaussSlots) -> Result<Var> {
        let mut outs = Vec::with_capacity(gs.pre.len());
        for m in 0..gs.pre.len() {
            let a = self.mix(h, gs.pre[m])?;
            let ls = self.p(gs.log_sigma[m]);
            let idx = self.trace.radii.len();
            let fixed = match self.opts.frozen {
                Some(f) => Some(
                    f.radii
                        .get(idx)
                        .ok_or_else(|| dim_err!("frozen pass has no kernel radii for kernel {}", idx))?
                        .as_slice(),
                ),
                None => None,
            };
            let (k, radii) = self.g.gaussian_kernels(ls, self.cfg.dims, self.cfg.ablation.normalized_kernel(), fixed)?;
            self.trace.radii.push(radii);
            let d = self.g.depthwise_conv(a, k)?;
            outs.push(self.mix(d, gs.post[m])?);
        }
        let cat = self.g.concat_channels(&outs)?;
        let f = self.mix(cat, gs.fuse)?;
        Ok(self.g.gelu(f))
    }

    /// Combines branch outputs into `r`.
    fn combine(&mut self, blk: &BlockSlots, zf: Option<Var>, zg: Option<Var>) -> Result<Var> {
        match (zf, zg) {
            (Some(zf), Some(zg)) => {
                self.trace.features = Some((zf, zg));
                if let Some((s1, s2)) = blk.score {
                    let w1 = (self.p(s1.w), Some(self.p(s1.b)));
                    let w2 = (self.p(s2.w), Some(self.p(s2.b)));
                    let s = self.g.routing_logits(zf, zg, w1, w2)?;
                    let idx = self.trace.routing.len();
                    let frozen = match self.opts.frozen {
                        Some(f) => Some(
                            f.gates
                                .get(idx)
                                .ok_or_else(|| dim_err!("frozen pass has no gate {}", idx))?,
                        ),
                        None => None,
                    };
                    let (r, state) = self.g.spar_route(zf, zg, s, &self.cfg.spar, frozen)?;
                    self.trace.routing.push((blk.label.clone(), state));
                    Ok(r)
                } else {
                    let m = blk.concat.ok_or_else(|| config_err!("block {} has no fusion", blk.label))?;
                    let cat = self.g.concat_channels(&[zf, zg])?;
                    self.mix(cat, m)
                }
            }
            (Some(zf), None) => Ok(zf),
            (None, Some(zg)) => Ok(zg),
            (None, None) => Err(config_err!("block {} has no branch", blk.label)),
        }
    }

    fn block(&mut self, h: Var, blk: &BlockSlots) -> Result<Var> {
        let zf = match blk.spectral {
            Some(s) => Some(self.spectral(&blk.label, h, s)?),
            None => None,
        };
        let zg = match &blk.gauss {
            Some(gs) => Some(self.gaussian(h, gs)?),
            None => None,
        };
        let r = self.combine(blk, zf, zg)?;
        let wr = self.mix(h, blk.residual)?;
        let sum = self.g.add(wr, r)?;
        Ok(self.g.gelu(sum))
    }

    /// Asymmetric decoder step: the Fourier branch sees the upsampled coarse
    /// state, the Gaussian branch sees the encoder skip (or the upsampled
    /// state under the symmetric variant).
    fn decoder(&mut self, h: Var, skip: Var, up: Mix, blk: &BlockSlots) -> Result<(Var, Option<Var>, Option<Var>)> {
        let u = self.g.bilinear_up(h)?;
        let ht = self.mix(u, up)?;
        let wr = self.mix(ht, blk.residual)?;
        let zf = match blk.spectral {
            Some(s) => {
                let f = self.spectral(&blk.label, ht, s)?;
                Some(self.g.add(f, wr)?)
            }
            None => None,
        };
        let zg = match &blk.gauss {
            Some(gs) => {
                let src = if self.cfg.ablation == AblationMode::SymDec { ht } else { skip };
                Some(self.gaussian(src, gs)?)
            }
            None => None,
        };
        let r = self.combine(blk, zf, zg)?;
        let sum = self.g.add(wr, r)?;
        Ok((self.g.gelu(sum), zf, zg))
    }

    fn project(&mut self, h: Var, proj: (Mix, Mix)) -> Result<Var> {
        let a = self.mix(h, proj.0)?;
        let a = self.g.gelu(a);
        self.mix(a, proj.1)
    }
}

/// Values produced by one decoder step, evaluated outside a training graph.
#[derive(Clone, Debug)]
pub struct DecoderStep<T: Scalar = f64> {
    pub h: Tensor<T>,
    pub z_f: Option<Tensor<T>>,
    pub z_g: Option<Tensor<T>>,
}

/// Loss values of one evaluation, converted to `f64`.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossValues {
    pub total: f64,
    pub mse: f64,
    pub h1: f64,
    pub cbc: f64,
    pub weighted_h1: f64,
    pub weighted_cbc: f64,
}

/// Result of a loss evaluation with gradients.
#[derive(Clone, Debug)]
pub struct StepOutput<T: Scalar = f64> {
    pub loss: LossValues,
    /// One gradient buffer per parameter tensor (zeros if unreachable).
    pub grads: Vec<Vec<T>>,
    pub trace: ForwardTrace<T>,
}

#[derive(Clone, Debug)]
pub struct UhnoModel<T: Scalar = f64> {
    config: ModelConfig,
    names: Vec<String>,
    params: Vec<Tensor<T>>,
    layout: Layout,
}

#[derive(Serialize, Deserialize)]
struct ParamEntry {
    name: String,
    shape: Vec<usize>,
}

/// Checkpoint header. Optimizer moments, when present, follow the
/// parameters in the value block as all first moments then all second
/// moments, in declaration order.
#[derive(Serialize, Deserialize)]
pub struct CheckpointHeader {
    pub format: String,
    pub kind: String,
    pub config: Option<ModelConfig>,
    pub seed: u64,
    pub step: u64,
    params: Vec<ParamEntry>,
    #[serde(default)]
    pub optimizer_steps: Option<u64>,
    #[serde(default)]
    pub extra: serde_json::Value,
}

pub const CHECKPOINT_FORMAT: &str = "uhno-checkpoint-v1";

impl<T: Scalar> UhnoModel<T> {
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut b = Builder::<T> {
            names: vec![],
            tensors: vec![],
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let cfg = &config;
        let layout = if cfg.ablation == AblationMode::NoUShape {
            let (depth, width) = flat_layout(cfg);
            let lift = b.mix("lift", cfg.in_channels, width);
            let blocks = (0..depth)
                .map(|i| b.block(&format!("flat{i}"), width, cfg))
                .collect::<Result<Vec<_>>>()?;
            let proj = (b.mix("proj1", width, 4 * width), b.mix("proj2", 4 * width, cfg.out_channels));
            Layout::Flat { lift, blocks, proj }
        } else {
            let lift = b.mix("lift", cfg.in_channels, cfg.c0);
            let mut encoder = Vec::new();
            for l in 0..cfg.levels - 1 {
                let blk = b.block(&format!("enc{l}"), cfg.channels(l), cfg)?;
                let down = b.down(&format!("enc{l}.down"), cfg.channels(l), cfg.channels(l + 1), cfg.dims);
                encoder.push((blk, down));
            }
            let bottleneck = b.block("bottleneck", cfg.channels(cfg.levels - 1), cfg)?;
            let mut decoder = Vec::new();
            for l in (0..cfg.levels - 1).rev() {
                let up = b.mix(&format!("dec{l}.up"), cfg.channels(l + 1), cfg.channels(l));
                decoder.push((up, b.block(&format!("dec{l}"), cfg.channels(l), cfg)?));
            }
            let proj = (b.mix("proj1", cfg.c0, 4 * cfg.c0), b.mix("proj2", 4 * cfg.c0, cfg.out_channels));
            Layout::UShape { lift, encoder, bottleneck, decoder, proj }
        };
        Ok(Self { config, names: b.names, params: b.tensors, layout })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn params(&self) -> &[Tensor<T>] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [Tensor<T>] {
        &mut self.params
    }

    pub fn param_names(&self) -> &[String] {
        &self.names
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.numel()).sum()
    }

    /// Slots of every `log_sigma` tensor.
    pub fn log_sigma_slots(&self) -> Vec<usize> {
        self.names
            .iter()
            .enumerate()
            .filter(|(_, n)| n.ends_with(".log_sigma"))
            .map(|(i, _)| i)
            .collect()
    }

    /// Keeps every `log_sigma` inside `[lo, hi]`.
    pub fn clamp_log_sigma(&mut self, lo: f64, hi: f64) {
        for s in self.log_sigma_slots() {
            for v in self.params[s].data_mut() {
                *v = v.max(T::lit(lo)).min(T::lit(hi));
            }
        }
    }

    fn blocks(&self) -> Vec<&BlockSlots> {
        match &self.layout {
            Layout::UShape { encoder, bottleneck, decoder, .. } => encoder
                .iter()
                .map(|(b, _)| b)
                .chain(std::iter::once(bottleneck))
                .chain(decoder.iter().map(|(_, b)| b))
                .collect(),
            Layout::Flat { blocks, .. } => blocks.iter().collect(),
        }
    }

    /// Weight (non-bias) slots of each branch per block.
    pub fn branch_slots(&self) -> Vec<BranchSlots> {
        self.blocks()
            .into_iter()
            .map(|b| BranchSlots {
                label: b.label.clone(),
                spectral: b.spectral.map(|(r, i)| vec![r, i]).unwrap_or_default(),
                gaussian: b
                    .gauss
                    .as_ref()
                    .map(|g| {
                        let mut v = Vec::new();
                        for m in 0..g.pre.len() {
                            v.extend([g.pre[m].w, g.log_sigma[m], g.post[m].w]);
                        }
                        v.push(g.fuse.w);
                        v
                    })
                    .unwrap_or_default(),
            })
            .collect()
    }

    fn check_input(&self, shape: &[usize]) -> Result<()> {
        let (_, c, spatial) = split_bcs(shape)?;
        if c != self.config.in_channels {
            return Err(dim_err!("model expects {} input channels, got {}", self.config.in_channels, c));
        }
        self.config.check_extents(spatial)
    }

    /// Records the forward pass on `g`. With `track`, parameters are
    /// differentiable leaves tagged by slot.
    pub fn forward_graph(
        &self,
        g: &mut Graph<T>,
        x: Var,
        track: bool,
        opts: ForwardOptions<'_, T>,
    ) -> Result<(Var, ForwardTrace<T>)> {
        self.check_input(g.shape(x))?;
        let mut ctx = Ctx {
            g,
            params: &self.params,
            vars: vec![None; self.params.len()],
            track,
            cfg: &self.config,
            opts,
            trace: ForwardTrace { routing: vec![], radii: vec![], features: None, modes: vec![] },
        };
        let out = match &self.layout {
            Layout::Flat { lift, blocks, proj } => {
                let mut h = ctx.mix(x, *lift)?;
                for b in blocks {
                    h = ctx.block(h, b)?;
                }
                ctx.project(h, *proj)?
            }
            Layout::UShape { lift, encoder, bottleneck, decoder, proj } => {
                let mut h = ctx.mix(x, *lift)?;
                let mut skips = Vec::with_capacity(encoder.len());
                for (blk, (w, b)) in encoder {
                    let e = ctx.block(h, blk)?;
                    skips.push(e);
                    let (w, b) = (ctx.p(*w), ctx.p(*b));
                    h = ctx.g.conv_down(e, w, b)?;
                }
                h = ctx.block(h, bottleneck)?;
                for (up, blk) in decoder {
                    let e = skips.pop().expect("one skip per decoder level");
                    h = ctx.decoder(h, e, *up, blk)?.0;
                }
                ctx.project(h, *proj)?
            }
        };
        Ok((out, ctx.trace))
    }

    /// Prediction without gradient tracking.
    pub fn predict(&self, x: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (out, _) = self.forward_graph(&mut g, xv, false, ForwardOptions::default())?;
        Ok(g.tensor(out))
    }

    /// Prediction together with routing states.
    pub fn predict_traced(&self, x: &Tensor<T>) -> Result<(Tensor<T>, ForwardTrace<T>)> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let (out, trace) = self.forward_graph(&mut g, xv, false, ForwardOptions::default())?;
        Ok((g.tensor(out), trace))
    }

    fn loss_graph(
        &self,
        x: &Tensor<T>,
        y: &Tensor<T>,
        w: &LossWeights,
        track: bool,
        opts: ForwardOptions<'_, T>,
    ) -> Result<(Graph<T>, LossVars, ForwardTrace<T>)> {
        let mut g = Graph::new();
        let xv = g.constant(x);
        let yv = g.constant(y);
        let (pred, trace) = self.forward_graph(&mut g, xv, track, opts)?;
        if g.shape(pred) != y.shape() {
            return Err(dim_err!("prediction {:?} vs target {:?}", g.shape(pred), y.shape()));
        }
        let lv = g.objective(pred, yv, trace.features, w)?;
        Ok((g, lv, trace))
    }

    fn values(g: &Graph<T>, lv: &LossVars, w: &LossWeights) -> LossValues {
        let h1 = g.scalar_value(lv.h1).to_f64_lossy();
        let cbc = lv.cbc.map(|c| g.scalar_value(c).to_f64_lossy()).unwrap_or(0.0);
        LossValues {
            total: g.scalar_value(lv.total).to_f64_lossy(),
            mse: g.scalar_value(lv.mse).to_f64_lossy(),
            h1,
            cbc,
            weighted_h1: w.lambda_h1 * h1,
            weighted_cbc: w.lambda_cbc * cbc,
        }
    }

    /// Objective value only.
    pub fn loss(&self, x: &Tensor<T>, y: &Tensor<T>, w: &LossWeights, opts: ForwardOptions<'_, T>) -> Result<LossValues> {
        let (g, lv, _) = self.loss_graph(x, y, w, false, opts)?;
        Ok(Self::values(&g, &lv, w))
    }

    /// Objective value and gradients with respect to every parameter.
    pub fn loss_and_grads(
        &self,
        x: &Tensor<T>,
        y: &Tensor<T>,
        w: &LossWeights,
        opts: ForwardOptions<'_, T>,
    ) -> Result<StepOutput<T>> {
        let (mut g, lv, trace) = self.loss_graph(x, y, w, true, opts)?;
        let loss = Self::values(&g, &lv, w);
        g.backward(lv.total)?;
        let mut grads: Vec<Vec<T>> = self.params.iter().map(|p| vec![T::zero(); p.numel()]).collect();
        for (slot, gr) in g.param_grads() {
            grads[slot].copy_from_slice(gr);
        }
        Ok(StepOutput { loss, grads, trace })
    }

    /// Runs the decoder step at `level` (0 = finest) on given tensors.
    pub fn decoder_step(&self, level: usize, h_coarse: &Tensor<T>, skip: &Tensor<T>) -> Result<DecoderStep<T>> {
        let Layout::UShape { decoder, .. } = &self.layout else {
            return Err(config_err!("the flat variant has no decoder"));
        };
        let n = decoder.len();
        if level >= n {
            return Err(config_err!("decoder level {} out of range 0..{}", level, n));
        }
        let (up, blk) = &decoder[n - 1 - level];
        let mut g = Graph::new();
        let (hv, sv) = (g.constant(h_coarse), g.constant(skip));
        let mut ctx = Ctx {
            g: &mut g,
            params: &self.params,
            vars: vec![None; self.params.len()],
            track: false,
            cfg: &self.config,
            opts: ForwardOptions::default(),
            trace: ForwardTrace { routing: vec![], radii: vec![], features: None, modes: vec![] },
        };
        let (h, zf, zg) = ctx.decoder(hv, sv, *up, blk)?;
        Ok(DecoderStep {
            h: g.tensor(h),
            z_f: zf.map(|v| g.tensor(v)),
            z_g: zg.map(|v| g.tensor(v)),
        })
    }

    pub fn header(&self, seed: u64, step: u64, optimizer_steps: Option<u64>) -> CheckpointHeader {
        CheckpointHeader {
            format: CHECKPOINT_FORMAT.to_string(),
            kind: "uhno".to_string(),
            config: Some(self.config.clone()),
            seed,
            step,
            params: self
                .names
                .iter()
                .zip(&self.params)
                .map(|(n, p)| ParamEntry { name: n.clone(), shape: p.shape().to_vec() })
                .collect(),
            optimizer_steps,
            extra: serde_json::Value::Null,
        }
    }

    /// Parameters followed by `moments` (if any) as one `f64` block.
    pub fn save(&self, path: &Path, seed: u64, step: u64, moments: Option<(&[Vec<T>], &[Vec<T>], u64)>) -> Result<()> {
        let mut data: Vec<f64> = Vec::with_capacity(self.param_count() * if moments.is_some() { 3 } else { 1 });
        for p in &self.params {
            data.extend(p.data().iter().map(|v| v.to_f64_lossy()));
        }
        if let Some((m, v, _)) = moments {
            for buf in m.iter().chain(v) {
                data.extend(buf.iter().map(|x| x.to_f64_lossy()));
            }
        }
        io::write(path, &self.header(seed, step, moments.map(|m| m.2)), &data)
    }

    /// Loads a `uhno` checkpoint: model, header and optional moments.
    pub fn load(path: &Path) -> Result<(Self, CheckpointHeader, Option<(Vec<Vec<T>>, Vec<Vec<T>>)>)> {
        let (header, data): (CheckpointHeader, Vec<f64>) = io::read(path)?;
        if header.format != CHECKPOINT_FORMAT || header.kind != "uhno" {
            return Err(Error::Format(format!("{} is not a model checkpoint", path.display())));
        }
        let cfg = header.config.clone().ok_or_else(|| Error::Format("checkpoint without config".into()))?;
        let mut model = Self::new(cfg, header.seed)?;
        let names_match = model.names.len() == header.params.len()
            && model
                .names
                .iter()
                .zip(&model.params)
                .zip(&header.params)
                .all(|((n, p), e)| *n == e.name && p.shape() == e.shape.as_slice());
        if !names_match {
            return Err(Error::Format("checkpoint parameter table does not match its config".into()));
        }
        let n = model.param_count();
        let has_moments = header.optimizer_steps.is_some();
        let expect = if has_moments { 3 * n } else { n };
        if data.len() != expect {
            return Err(Error::Format(format!("expected {} values, found {}", expect, data.len())));
        }
        let mut off = 0;
        for p in &mut model.params {
            let k = p.numel();
            for (d, &s) in p.data_mut().iter_mut().zip(&data[off..off + k]) {
                *d = T::lit(s);
            }
            off += k;
        }
        let moments = has_moments.then(|| {
            let take = |off: &mut usize| -> Vec<Vec<T>> {
                model
                    .params
                    .iter()
                    .map(|p| {
                        let v = data[*off..*off + p.numel()].iter().map(|&x| T::lit(x)).collect();
                        *off += p.numel();
                        v
                    })
                    .collect()
            };
            let m = take(&mut off);
            let v = take(&mut off);
            (m, v)
        });
        Ok((model, header, moments))
    }
}
