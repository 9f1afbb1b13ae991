//! Fourier branch: truncated spectral convolution with a per-level mode cap.

use rand::Rng;

use crate::error::{config_err, Result};
use crate::scalar::Scalar;
use crate::tensor::{Graph, Tensor};

/// Retained modes per axis at a level of extent `n`.
pub fn effective_modes(k0: usize, n: usize) -> usize {
    k0.min(n / 2)
}

/// Complex channel-mixing weights stored as paired real tensors of shape
/// `[C, C, K0]` (1D) or `[C, C, K0, K0]` (2D).
#[derive(Clone, Debug)]
pub struct SpectralWeights<T: Scalar = f64> {
    pub channels: usize,
    pub k0: usize,
    pub dims: usize,
    pub re: Tensor<T>,
    pub im: Tensor<T>,
}

impl<T: Scalar> SpectralWeights<T> {
    pub fn shape(channels: usize, k0: usize, dims: usize) -> Vec<usize> {
        let mut s = vec![channels, channels];
        s.extend(std::iter::repeat_n(k0, dims));
        s
    }

    /// Uniform `[0, 1/C^2)` initialization of both parts.
    pub fn init(channels: usize, k0: usize, dims: usize, rng: &mut impl Rng) -> Result<Self> {
        if k0 == 0 {
            return Err(config_err!("mode budget K0 must be at least 1"));
        }
        let shape = Self::shape(channels, k0, dims);
        let scale = 1.0 / (channels * channels) as f64;
        let mut draw = || Tensor::from_fn(&shape, |_| T::lit(scale * rng.random::<f64>()));
        let re = draw();
        let im = draw();
        Ok(Self { channels, k0, dims, re, im })
    }

    pub fn param_count(&self) -> usize {
        self.re.numel() + self.im.numel()
    }
}

/// One-shot spectral convolution outside of a training graph.
pub fn spectral_conv<T: Scalar>(h: &Tensor<T>, w: &SpectralWeights<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let hv = g.constant(h);
    let (re, im) = (g.constant(&w.re), g.constant(&w.im));
    let out = g.spectral_conv(hv, re, im)?;
    Ok(g.tensor(out))
}
