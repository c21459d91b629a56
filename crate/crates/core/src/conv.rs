//! Direct 3D convolution kernels over `[C, Z, Y, X]` buffers.
//!
//! Cross-correlation convention with cubic kernels and the same stride and
//! padding on every axis. Weights are `[C_out, C_in, k, k, k]` for
//! convolution and `[C_in, C_out, k, k, k]` for the transposed form.

use crate::error::{Error, Result};
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeom {
    pub c_in: usize,
    pub c_out: usize,
    pub k: usize,
    pub stride: usize,
    pub pad: usize,
    pub input: [usize; 3],
    pub output: [usize; 3],
}

impl ConvGeom {
    pub fn conv(c_in: usize, c_out: usize, k: usize, stride: usize, pad: usize, input: [usize; 3]) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(Error::InvalidShape("conv3d: stride and kernel must be >= 1".into()));
        }
        let mut output = [0; 3];
        for a in 0..3 {
            let span = input[a] + 2 * pad;
            if span < k {
                return Err(Error::InvalidShape(format!(
                    "conv3d: output extent < 1 on axis {a} (input {}, kernel {k}, pad {pad})",
                    input[a]
                )));
            }
            output[a] = (span - k) / stride + 1;
        }
        Ok(ConvGeom { c_in, c_out, k, stride, pad, input, output })
    }

    /// Transposed convolution without padding: `out = (in - 1)·s + k`.
    pub fn deconv(c_in: usize, c_out: usize, k: usize, stride: usize, input: [usize; 3]) -> Result<Self> {
        if stride == 0 || k == 0 {
            return Err(Error::InvalidShape("deconv3d: stride and kernel must be >= 1".into()));
        }
        let output = input.map(|n| (n - 1) * stride + k);
        Ok(ConvGeom { c_in, c_out, k, stride, pad: 0, input, output })
    }

    fn in_vox(&self) -> usize {
        self.input.iter().product()
    }

    fn out_vox(&self) -> usize {
        self.output.iter().product()
    }
}

/// For kernel tap `kk` along one axis, the output index range whose input
/// index `o·s + kk - p` falls inside `[0, n)`.
fn valid_range(kk: usize, g: &ConvGeom, axis: usize) -> (usize, usize) {
    let (s, p, n, m) = (g.stride, g.pad, g.input[axis], g.output[axis]);
    // o·s + kk >= p  and  o·s + kk - p < n
    let lo = if kk >= p { 0 } else { (p - kk).div_ceil(s) };
    let hi = if n + p > kk { ((n + p - kk - 1) / s + 1).min(m) } else { 0 };
    (lo, hi.max(lo))
}

pub fn conv3d_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let [_, iy, ix] = g.input;
    let [_, oy, ox] = g.output;
    let (k, s, p) = (g.k, g.stride, g.pad);
    let ov = g.out_vox();
    let iv = g.in_vox();
    let mut out = vec![T::zero(); g.c_out * ov];
    for co in 0..g.c_out {
        let dst = &mut out[co * ov..(co + 1) * ov];
        if let Some(b) = b {
            dst.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..g.c_in {
            let src = &x[ci * iv..(ci + 1) * iv];
            let wbase = (co * g.c_in + ci) * k * k * k;
            for kz in 0..k {
                let (z0, z1) = valid_range(kz, g, 0);
                for ky in 0..k {
                    let (y0, y1) = valid_range(ky, g, 1);
                    for kx in 0..k {
                        let (x0, x1) = valid_range(kx, g, 2);
                        let wv = w[wbase + (kz * k + ky) * k + kx];
                        for z in z0..z1 {
                            let izz = z * s + kz - p;
                            for y in y0..y1 {
                                let iyy = y * s + ky - p;
                                let drow = (z * oy + y) * ox;
                                let srow = (izz * iy + iyy) * ix;
                                for xo in x0..x1 {
                                    dst[drow + xo] += wv * src[srow + xo * s + kx - p];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`.
pub fn conv3d_backward<T: Scalar>(x: &[T], w: &[T], dy: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [_, iy, ix] = g.input;
    let [_, oy, ox] = g.output;
    let (k, s, p) = (g.k, g.stride, g.pad);
    let ov = g.out_vox();
    let iv = g.in_vox();
    let mut dx = vec![T::zero(); g.c_in * iv];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.c_out];
    for co in 0..g.c_out {
        let gy = &dy[co * ov..(co + 1) * ov];
        db[co] = gy.iter().copied().sum();
        for ci in 0..g.c_in {
            let src = &x[ci * iv..(ci + 1) * iv];
            let gx = &mut dx[ci * iv..(ci + 1) * iv];
            let wbase = (co * g.c_in + ci) * k * k * k;
            for kz in 0..k {
                let (z0, z1) = valid_range(kz, g, 0);
                for ky in 0..k {
                    let (y0, y1) = valid_range(ky, g, 1);
                    for kx in 0..k {
                        let (x0, x1) = valid_range(kx, g, 2);
                        let wi = wbase + (kz * k + ky) * k + kx;
                        let wv = w[wi];
                        let mut acc = T::zero();
                        for z in z0..z1 {
                            let izz = z * s + kz - p;
                            for y in y0..y1 {
                                let iyy = y * s + ky - p;
                                let drow = (z * oy + y) * ox;
                                let srow = (izz * iy + iyy) * ix;
                                for xo in x0..x1 {
                                    let xi = srow + xo * s + kx - p;
                                    let gv = gy[drow + xo];
                                    acc += gv * src[xi];
                                    gx[xi] += wv * gv;
                                }
                            }
                        }
                        dw[wi] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

pub fn deconv3d_forward<T: Scalar>(x: &[T], w: &[T], b: Option<&[T]>, g: &ConvGeom) -> Vec<T> {
    let [iz, iy, ix] = g.input;
    let [_, oy, ox] = g.output;
    let (k, s) = (g.k, g.stride);
    let ov = g.out_vox();
    let iv = g.in_vox();
    let mut out = vec![T::zero(); g.c_out * ov];
    for co in 0..g.c_out {
        let dst = &mut out[co * ov..(co + 1) * ov];
        if let Some(b) = b {
            dst.iter_mut().for_each(|v| *v = b[co]);
        }
        for ci in 0..g.c_in {
            let src = &x[ci * iv..(ci + 1) * iv];
            let wbase = (ci * g.c_out + co) * k * k * k;
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let wv = w[wbase + (kz * k + ky) * k + kx];
                        for z in 0..iz {
                            for y in 0..iy {
                                let srow = (z * iy + y) * ix;
                                let drow = ((z * s + kz) * oy + y * s + ky) * ox + kx;
                                for xi in 0..ix {
                                    dst[drow + xi * s] += wv * src[srow + xi];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

/// Returns `(dx, dw, db)`. `dx` is exactly a strided convolution of `dy`
/// with the same weights read as `[C_in, C_out, k, k, k]`.
pub fn deconv3d_backward<T: Scalar>(x: &[T], w: &[T], dy: &[T], g: &ConvGeom) -> (Vec<T>, Vec<T>, Vec<T>) {
    let [iz, iy, ix] = g.input;
    let [_, oy, ox] = g.output;
    let (k, s) = (g.k, g.stride);
    let ov = g.out_vox();
    let iv = g.in_vox();
    let mut dx = vec![T::zero(); g.c_in * iv];
    let mut dw = vec![T::zero(); w.len()];
    let mut db = vec![T::zero(); g.c_out];
    for co in 0..g.c_out {
        let gy = &dy[co * ov..(co + 1) * ov];
        db[co] = gy.iter().copied().sum();
        for ci in 0..g.c_in {
            let src = &x[ci * iv..(ci + 1) * iv];
            let gx = &mut dx[ci * iv..(ci + 1) * iv];
            let wbase = (ci * g.c_out + co) * k * k * k;
            for kz in 0..k {
                for ky in 0..k {
                    for kx in 0..k {
                        let wi = wbase + (kz * k + ky) * k + kx;
                        let wv = w[wi];
                        let mut acc = T::zero();
                        for z in 0..iz {
                            for y in 0..iy {
                                let srow = (z * iy + y) * ix;
                                let drow = ((z * s + kz) * oy + y * s + ky) * ox + kx;
                                for xi in 0..ix {
                                    let gv = gy[drow + xi * s];
                                    acc += gv * src[srow + xi];
                                    gx[srow + xi] += wv * gv;
                                }
                            }
                        }
                        dw[wi] += acc;
                    }
                }
            }
        }
    }
    (dx, dw, db)
}

/// Depthwise causal convolution along the sequence axis of `[L, D]`:
/// `y[t, d] = b[d] + Σ_j w[d, j]·x[t + j - (K-1), d]` with zeros before `t = 0`.
pub fn causal_conv1d_forward<T: Scalar>(x: &[T], w: &[T], b: &[T], len: usize, width: usize, k: usize) -> Vec<T> {
    let mut y = vec![T::zero(); len * width];
    for t in 0..len {
        for d in 0..width {
            let mut acc = b[d];
            for j in 0..k {
                if t + j + 1 >= k {
                    acc += w[d * k + j] * x[(t + j + 1 - k) * width + d];
                }
            }
            y[t * width + d] = acc;
        }
    }
    y
}

/// Returns `(dx, dw, db)`.
pub fn causal_conv1d_backward<T: Scalar>(
    x: &[T],
    w: &[T],
    dy: &[T],
    len: usize,
    width: usize,
    k: usize,
) -> (Vec<T>, Vec<T>, Vec<T>) {
    let mut dx = vec![T::zero(); len * width];
    let mut dw = vec![T::zero(); width * k];
    let mut db = vec![T::zero(); width];
    for t in 0..len {
        for d in 0..width {
            let g = dy[t * width + d];
            db[d] += g;
            for j in 0..k {
                if t + j + 1 >= k {
                    let xi = (t + j + 1 - k) * width + d;
                    dw[d * k + j] += g * x[xi];
                    dx[xi] += g * w[d * k + j];
                }
            }
        }
    }
    (dx, dw, db)
}
