//! Overlapping sliding-window inference.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::network::{Network, NetworkConfig};
use crate::scalar::Scalar;
use crate::tensor::Tensor;
use crate::volume::zyx;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Fusion {
    #[default]
    Uniform,
    /// Separable Gaussian centred on the window, `σ = sigma_scale · extent`.
    Gaussian,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SlidingWindowSpec {
    /// Window extents `[X, Y, Z]`.
    pub window: [usize; 3],
    pub overlap: f64,
    pub fusion: Fusion,
    pub sigma_scale: f64,
}

impl Default for SlidingWindowSpec {
    fn default() -> Self {
        SlidingWindowSpec { window: [32, 32, 32], overlap: 0.5, fusion: Fusion::Uniform, sigma_scale: 0.125 }
    }
}

impl SlidingWindowSpec {
    pub fn for_network(cfg: &NetworkConfig) -> Self {
        SlidingWindowSpec { window: cfg.input, ..Default::default() }
    }

    pub fn validate(&self, dims: [usize; 3]) -> Result<()> {
        if !(0.0..1.0).contains(&self.overlap) {
            return Err(Error::Config(format!("overlap must be in [0, 1), got {}", self.overlap)));
        }
        let w = zyx(self.window);
        if w.iter().zip(&dims).any(|(&w, &d)| w == 0 || w > d) {
            return Err(Error::Config(format!("window {:?} does not fit volume {:?}", self.window, zyx(dims))));
        }
        if self.fusion == Fusion::Gaussian && !(self.sigma_scale > 0.0) {
            return Err(Error::Config("sigma_scale must be positive".into()));
        }
        Ok(())
    }
}

/// Window starts along one axis: stride `⌊window·(1 − overlap)⌋` (at least 1),
/// the last window clamped to end at `extent`.
pub fn window_origins(extent: usize, window: usize, overlap: f64) -> Vec<usize> {
    let stride = ((window as f64 * (1.0 - overlap)).floor() as usize).max(1);
    let mut out = Vec::new();
    let mut pos = 0;
    loop {
        out.push(pos.min(extent - window));
        if pos + window >= extent {
            break;
        }
        pos += stride;
    }
    out.dedup();
    out
}

/// All window origins `[z, y, x]`, z-major.
pub fn window_grid(dims: [usize; 3], window: [usize; 3], overlap: f64) -> Vec<[usize; 3]> {
    let axes: Vec<Vec<usize>> = (0..3).map(|a| window_origins(dims[a], window[a], overlap)).collect();
    let mut out = Vec::new();
    for &z in &axes[0] {
        for &y in &axes[1] {
            for &x in &axes[2] {
                out.push([z, y, x]);
            }
        }
    }
    out
}

fn fusion_weights(window: [usize; 3], spec: &SlidingWindowSpec) -> Vec<f64> {
    let n: usize = window.iter().product();
    if spec.fusion == Fusion::Uniform {
        return vec![1.0; n];
    }
    let axis = |len: usize| -> Vec<f64> {
        let c = (len as f64 - 1.0) / 2.0;
        let s = spec.sigma_scale * len as f64;
        (0..len).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * s * s)).exp()).collect()
    };
    let (wz, wy, wx) = (axis(window[0]), axis(window[1]), axis(window[2]));
    let mut out = Vec::with_capacity(n);
    for a in &wz {
        for b in &wy {
            for c in &wx {
                out.push((a * b * c).max(1e-6));
            }
        }
    }
    out
}

fn crop<T: Scalar>(image: &Tensor<T>, origin: [usize; 3], window: [usize; 3]) -> Tensor<T> {
    let s = image.shape();
    let (c, ny, nx) = (s[0], s[2], s[3]);
    let [wz, wy, wx] = window;
    let mut out = Vec::with_capacity(c * wz * wy * wx);
    for ch in 0..c {
        for z in 0..wz {
            for y in 0..wy {
                let row = ((ch * s[1] + origin[0] + z) * ny + origin[1] + y) * nx + origin[2];
                out.extend_from_slice(&image.data()[row..row + wx]);
            }
        }
    }
    Tensor::new(vec![c, wz, wy, wx], out).expect("window shape")
}

/// Fuses `model` outputs `[K, window]` over every window of `image` `[C, Z, Y, X]`.
pub fn sliding_window<T, F>(image: &Tensor<T>, spec: &SlidingWindowSpec, model: F) -> Result<Tensor<T>>
where
    T: Scalar,
    F: Fn(&Tensor<T>) -> Result<Tensor<T>> + Sync,
{
    let dims = image.spatial()?;
    spec.validate(dims)?;
    let window = zyx(spec.window);
    let origins = window_grid(dims, window, spec.overlap);
    let weights: Vec<T> = fusion_weights(window, spec).into_iter().map(T::c).collect();
    let [_, ny, nx] = dims;
    let vox: usize = dims.iter().product();
    let wvox: usize = window.iter().product();

    // -0.0 is the additive identity for every float, so a single window
    // with unit weight reproduces the model output bit for bit.
    let mut acc: Vec<T> = Vec::new();
    let mut wsum = vec![-T::zero(); vox];
    let mut classes = 0;
    let chunk = 2 * rayon::current_num_threads().max(1);
    for batch in origins.chunks(chunk) {
        let outs: Vec<Tensor<T>> = batch.par_iter().map(|&o| model(&crop(image, o, window))).collect::<Result<_>>()?;
        for (&o, out) in batch.iter().zip(outs) {
            if classes == 0 {
                classes = out.shape()[0];
                acc = vec![-T::zero(); classes * vox];
            }
            if out.shape()[1..] != window[..] || out.shape()[0] != classes {
                return Err(Error::shape("sliding_window", out.shape(), &[classes, window[0], window[1], window[2]]));
            }
            for z in 0..window[0] {
                for y in 0..window[1] {
                    let src = (z * window[1] + y) * window[2];
                    let dst = ((o[0] + z) * ny + o[1] + y) * nx + o[2];
                    for x in 0..window[2] {
                        let w = weights[src + x];
                        wsum[dst + x] += w;
                        for k in 0..classes {
                            acc[k * vox + dst + x] += w * out.data()[k * wvox + src + x];
                        }
                    }
                }
            }
        }
    }
    for (i, v) in acc.iter_mut().enumerate() {
        *v /= wsum[i % vox];
    }
    Tensor::new(vec![classes, dims[0], dims[1], dims[2]], acc)
}

pub fn sliding_window_infer<T: Scalar>(
    net: &Network<T>,
    image: &Tensor<T>,
    spec: &SlidingWindowSpec,
) -> Result<Tensor<T>> {
    sliding_window(image, spec, |w| net.predict(w))
}

/// Per-voxel arg-max over axis 0 of `[K, ...]`; ties go to the lower class.
pub fn argmax<T: Scalar>(logits: &Tensor<T>) -> Vec<u8> {
    let k = logits.shape()[0];
    let n = logits.numel() / k.max(1);
    let d = logits.data();
    (0..n)
        .map(|i| {
            let mut best = 0;
            for c in 1..k {
                if d[c * n + i] > d[best * n + i] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
