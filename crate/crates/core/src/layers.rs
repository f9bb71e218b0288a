//! Parameterised building blocks.

use rand::Rng;

use crate::autograd::Var;
use crate::error::Result;
use crate::params::{Bound, ParamId, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub in_features: usize,
    pub out_features: usize,
}

impl Linear {
    pub fn new<R: Rng + ?Sized>(store: &mut ParamStore, name: &str, in_features: usize, out_features: usize, rng: &mut R) -> Self {
        let bound = (1.0 / in_features as f64).sqrt();
        let w = store.add(format!("{name}.weight"), Tensor::uniform(rng, &[out_features, in_features], bound));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_features]));
        Self {
            w,
            b,
            in_features,
            out_features,
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.linear(p[self.w], Some(p[self.b]))
    }
}

#[derive(Clone, Debug)]
pub struct Conv2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (6.0 / (in_ch * kernel * kernel) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), Tensor::uniform(rng, &[out_ch, in_ch, kernel, kernel], bound));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self { w, b, stride, pad }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.conv2d(p[self.w], Some(p[self.b]), self.stride, self.pad)
    }
}

#[derive(Clone, Debug)]
pub struct ConvTranspose2d {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl ConvTranspose2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new<R: Rng + ?Sized>(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let bound = (1.0 / (in_ch * kernel * kernel) as f64).sqrt();
        let w = store.add(format!("{name}.weight"), Tensor::uniform(rng, &[in_ch, out_ch, kernel, kernel], bound));
        let b = store.add(format!("{name}.bias"), Tensor::zeros(&[out_ch]));
        Self { w, b, stride, pad }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.conv_transpose2d(p[self.w], Some(p[self.b]), self.stride, self.pad)
    }
}

/// Learned gain and shift applied after [`Var::layer_norm`].
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub shift: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Self {
            gain: store.add(format!("{name}.gain"), Tensor::full(&[dim], 1.0)),
            shift: store.add(format!("{name}.shift"), Tensor::zeros(&[dim])),
        }
    }

    pub fn forward<'g>(&self, p: &Bound<'g>, x: Var<'g>) -> Result<Var<'g>> {
        x.layer_norm(1e-5).mul_broadcast(p[self.gain])?.add_broadcast(p[self.shift])
    }
}

/// Sinusoidal embedding of scalar times, one row of width `dim` per time.
pub fn sinusoidal_embedding(times: &[f64], dim: usize) -> Tensor {
    let half = dim / 2;
    let mut data = vec![0.0; times.len() * dim];
    for (row, &t) in data.chunks_mut(dim).zip(times) {
        for i in 0..half {
            let freq = (-(10_000f64.ln()) * i as f64 / half.max(1) as f64).exp();
            // Times live in [0, 1]; stretch so low frequencies still vary.
            let arg = 1000.0 * t * freq;
            row[i] = arg.sin();
            row[half + i] = arg.cos();
        }
    }
    Tensor::new(&[times.len(), dim], data).unwrap()
}
