//! Straight-line reference implementations used as test oracles.
//!
//! Each one is written from the defining formula with plain loops and shares
//! no code with the library kernels it checks.

#![allow(dead_code)]

use num_complex::Complex64;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn uniform_vec(rng: &mut ChaCha8Rng, n: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..n).map(|_| rng.random_range(lo..hi)).collect()
}

/// Triple-sum DFT of each channel of a `[C, Z, Y, X]` complex buffer.
pub fn naive_dft3(x: &[Complex64], shape: [usize; 4], inverse: bool) -> Vec<Complex64> {
    let [c, nz, ny, nx] = shape;
    let sign = if inverse { 1.0 } else { -1.0 };
    let tau = std::f64::consts::TAU;
    let vox = nz * ny * nx;
    let mut out = vec![Complex64::new(0.0, 0.0); x.len()];
    for ch in 0..c {
        for kz in 0..nz {
            for ky in 0..ny {
                for kx in 0..nx {
                    let mut acc = Complex64::new(0.0, 0.0);
                    for z in 0..nz {
                        for y in 0..ny {
                            for xx in 0..nx {
                                // Reduce the phase mod 1 before scaling by 2π.
                                let f = ((kz * z) % nz) as f64 / nz as f64
                                    + ((ky * y) % ny) as f64 / ny as f64
                                    + ((kx * xx) % nx) as f64 / nx as f64;
                                let w = Complex64::from_polar(1.0, sign * tau * f);
                                acc += x[ch * vox + (z * ny + y) * nx + xx] * w;
                            }
                        }
                    }
                    if inverse {
                        acc /= vox as f64;
                    }
                    out[ch * vox + (kz * ny + ky) * nx + kx] = acc;
                }
            }
        }
    }
    out
}

/// Per-step selective recurrence, channel by channel, with the
/// discretization written out in closed form.
#[allow(clippy::too_many_arguments)]
pub fn naive_scan(
    u: &[f64],
    delta: &[f64],
    a: &[f64],
    b: &[f64],
    c: &[f64],
    d: &[f64],
    len: usize,
    width: usize,
    state: usize,
    zoh: bool,
) -> Vec<f64> {
    let mut y = vec![0.0; len * width];
    for ch in 0..width {
        let mut h = vec![0.0; state];
        for t in 0..len {
            let dt = delta[t * width + ch];
            let x = u[t * width + ch];
            let mut out = d[ch] * x;
            for n in 0..state {
                let an = a[ch * state + n];
                let abar = (dt * an).exp();
                let bbar = if zoh { (abar - 1.0) / an * b[t * state + n] } else { dt * b[t * state + n] };
                h[n] = abar * h[n] + bbar * x;
                out += c[t * state + n] * h[n];
            }
            y[t * width + ch] = out;
        }
    }
    y
}

/// Zero-padded strided cross-correlation; weights `[Co, Ci, k, k, k]`.
#[allow(clippy::too_many_arguments)]
pub fn loop_conv3d(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    ci: usize,
    co: usize,
    k: usize,
    stride: usize,
    pad: usize,
    dims: [usize; 3],
) -> (Vec<f64>, [usize; 3]) {
    let out = dims.map(|n| (n + 2 * pad - k) / stride + 1);
    let [nz, ny, nx] = dims;
    let [oz, oy, ox] = out;
    let mut y = vec![0.0; co * oz * oy * ox];
    for o in 0..co {
        for z in 0..oz {
            for yy in 0..oy {
                for xx in 0..ox {
                    let mut acc = bias.map_or(0.0, |b| b[o]);
                    for i in 0..ci {
                        for a in 0..k {
                            for bb in 0..k {
                                for cc in 0..k {
                                    let iz = (z * stride + a) as isize - pad as isize;
                                    let iy = (yy * stride + bb) as isize - pad as isize;
                                    let ix = (xx * stride + cc) as isize - pad as isize;
                                    if iz < 0 || iy < 0 || ix < 0 {
                                        continue;
                                    }
                                    let (iz, iy, ix) = (iz as usize, iy as usize, ix as usize);
                                    if iz >= nz || iy >= ny || ix >= nx {
                                        continue;
                                    }
                                    acc += w[(((o * ci + i) * k + a) * k + bb) * k + cc]
                                        * x[((i * nz + iz) * ny + iy) * nx + ix];
                                }
                            }
                        }
                    }
                    y[((o * oz + z) * oy + yy) * ox + xx] = acc;
                }
            }
        }
    }
    (y, out)
}

/// Transposed convolution by scattering every input voxel; weights
/// `[Ci, Co, k, k, k]`, output extent `(n - 1)·s + k`.
#[allow(clippy::too_many_arguments)]
pub fn loop_deconv3d(
    x: &[f64],
    w: &[f64],
    bias: Option<&[f64]>,
    ci: usize,
    co: usize,
    k: usize,
    stride: usize,
    dims: [usize; 3],
) -> (Vec<f64>, [usize; 3]) {
    let out = dims.map(|n| (n - 1) * stride + k);
    let [nz, ny, nx] = dims;
    let [oz, oy, ox] = out;
    let mut y = vec![0.0; co * oz * oy * ox];
    for o in 0..co {
        let b = bias.map_or(0.0, |b| b[o]);
        y[o * oz * oy * ox..(o + 1) * oz * oy * ox].iter_mut().for_each(|v| *v = b);
    }
    for i in 0..ci {
        for z in 0..nz {
            for yy in 0..ny {
                for xx in 0..nx {
                    let v = x[((i * nz + z) * ny + yy) * nx + xx];
                    for o in 0..co {
                        for a in 0..k {
                            for bb in 0..k {
                                for cc in 0..k {
                                    let (tz, ty, tx) = (z * stride + a, yy * stride + bb, xx * stride + cc);
                                    y[((o * oz + tz) * oy + ty) * ox + tx] +=
                                        w[(((i * co + o) * k + a) * k + bb) * k + cc] * v;
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (y, out)
}

/// DiceCE for logits `[K, N]` (class-major): mean over classes of
/// `1 − (2Σpg + ε)/(Σp + Σg + ε)` plus the voxel-mean cross-entropy.
pub fn loop_dice_ce(logits: &[f64], labels: &[u8], k: usize) -> f64 {
    let n = labels.len();
    let eps = 1e-5;
    let mut probs = vec![0.0; k * n];
    let mut ce = 0.0;
    for v in 0..n {
        let m = (0..k).map(|c| logits[c * n + v]).fold(f64::NEG_INFINITY, f64::max);
        let z: f64 = (0..k).map(|c| (logits[c * n + v] - m).exp()).sum();
        for c in 0..k {
            probs[c * n + v] = (logits[c * n + v] - m).exp() / z;
        }
        ce -= logits[labels[v] as usize * n + v] - m - z.ln();
    }
    ce /= n as f64;
    let mut dice = 0.0;
    for c in 0..k {
        let (mut inter, mut ps, mut gs) = (0.0, 0.0, 0.0);
        for v in 0..n {
            let g = if labels[v] as usize == c { 1.0 } else { 0.0 };
            inter += probs[c * n + v] * g;
            ps += probs[c * n + v];
            gs += g;
        }
        dice += 1.0 - (2.0 * inter + eps) / (ps + gs + eps);
    }
    dice / k as f64 + ce
}

/// `[M, K]·[K, N]`.
pub fn loop_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            c[i * n + j] = (0..k).map(|t| a[i * k + t] * b[t * n + j]).sum();
        }
    }
    c
}

pub fn brute_dsc(pred: &[u8], gt: &[u8], class: u8) -> f64 {
    let p = pred.iter().filter(|&&v| v == class).count();
    let g = gt.iter().filter(|&&v| v == class).count();
    let both = pred.iter().zip(gt).filter(|(&a, &b)| a == class && b == class).count();
    if p + g == 0 {
        100.0
    } else {
        200.0 * both as f64 / (p + g) as f64
    }
}

/// Voxels of the mask with a face neighbour that is outside the mask or
/// outside the volume.
pub fn brute_boundary(labels: &[u8], dims: [usize; 3], class: u8) -> Vec<[usize; 3]> {
    let [nz, ny, nx] = dims;
    let inside = |z: isize, y: isize, x: isize| {
        z >= 0
            && y >= 0
            && x >= 0
            && (z as usize) < nz
            && (y as usize) < ny
            && (x as usize) < nx
            && labels[(z as usize * ny + y as usize) * nx + x as usize] == class
    };
    let mut out = Vec::new();
    for z in 0..nz as isize {
        for y in 0..ny as isize {
            for x in 0..nx as isize {
                if !inside(z, y, x) {
                    continue;
                }
                let faces = [(1, 0, 0), (-1, 0, 0), (0, 1, 0), (0, -1, 0), (0, 0, 1), (0, 0, -1)];
                if faces.iter().any(|&(dz, dy, dx)| !inside(z + dz, y + dy, x + dx)) {
                    out.push([z as usize, y as usize, x as usize]);
                }
            }
        }
    }
    out
}

/// All-pairs symmetric Hausdorff distance between face boundaries, with
/// spacing `[sz, sy, sx]`. `None` when either mask is empty.
pub fn brute_hausdorff(pred: &[u8], gt: &[u8], dims: [usize; 3], spacing: [f64; 3], class: u8) -> Option<f64> {
    let bp = brute_boundary(pred, dims, class);
    let bg = brute_boundary(gt, dims, class);
    if bp.is_empty() || bg.is_empty() {
        return None;
    }
    let d2 = |a: [usize; 3], b: [usize; 3]| -> f64 {
        (0..3).map(|i| ((a[i] as f64 - b[i] as f64) * spacing[i]).powi(2)).sum()
    };
    let directed = |from: &[[usize; 3]], to: &[[usize; 3]]| {
        from.iter().map(|&p| to.iter().map(|&q| d2(p, q)).fold(f64::INFINITY, f64::min)).fold(0.0, f64::max)
    };
    Some(directed(&bp, &bg).max(directed(&bg, &bp)).sqrt())
}
