//! Separable 3D radix-2 FFT over the spatial axes of `[C, Z, Y, X]` volumes.
//!
//! The forward transform is unnormalized and the inverse carries the
//! `1/(Z·Y·X)` factor, so `ifft3(fft3(x)) == x`. Each channel is transformed
//! independently; channels are never mixed.
//!
//! The kernel is the standard per-axis DFT
//! `exp(-2πi (kx·x/X + ky·y/Y + kz·z/Z))`. A joint `1/(X·Y·Z)` divisor on the
//! whole exponent would not factor into per-axis transforms.

use num_complex::Complex;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Complex spectrum of a `[C, Z, Y, X]` volume, stored as interleaved
/// (re, im) pairs in the same raster order as the source tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexVolume<T> {
    shape: [usize; 4],
    data: Vec<Complex<T>>,
}

impl<T: Scalar> ComplexVolume<T> {
    pub fn new(shape: [usize; 4], data: Vec<Complex<T>>) -> Result<Self> {
        if shape.iter().product::<usize>() != data.len() {
            return Err(Error::InvalidShape(format!("complex volume {shape:?} with {} bins", data.len())));
        }
        Ok(ComplexVolume { shape, data })
    }

    pub fn zeros(shape: [usize; 4]) -> Self {
        ComplexVolume { shape, data: vec![Complex::new(T::zero(), T::zero()); shape.iter().product()] }
    }

    pub fn from_real(x: &Tensor<T>) -> Result<Self> {
        let [z, y, xx] = x.spatial()?;
        let shape = [x.shape()[0], z, y, xx];
        Ok(ComplexVolume { shape, data: x.data().iter().map(|&v| Complex::new(v, T::zero())).collect() })
    }

    pub fn shape(&self) -> [usize; 4] {
        self.shape
    }

    pub fn data(&self) -> &[Complex<T>] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [Complex<T>] {
        &mut self.data
    }

    pub fn real(&self) -> Tensor<T> {
        Tensor::new(self.shape.to_vec(), self.data.iter().map(|c| c.re).collect()).expect("same element count")
    }

    pub fn max_abs_imag(&self) -> T {
        self.data.iter().fold(T::zero(), |m, c| m.max(c.im.abs()))
    }

    /// True when every bin equals the conjugate of its mirrored bin, which is
    /// the spectrum of a real volume.
    pub fn is_conjugate_symmetric(&self, tol: T) -> bool {
        let [c, nz, ny, nx] = self.shape;
        let scale = self.data.iter().fold(T::one(), |m, v| m.max(v.norm()));
        for ch in 0..c {
            for z in 0..nz {
                for y in 0..ny {
                    for x in 0..nx {
                        let a = self.data[((ch * nz + z) * ny + y) * nx + x];
                        let m = ((ch * nz + (nz - z) % nz) * ny + (ny - y) % ny) * nx + (nx - x) % nx;
                        if (a - self.data[m].conj()).norm() > tol * scale {
                            return false;
                        }
                    }
                }
            }
        }
        true
    }
}

/// Real per-channel, per-frequency weights multiplying a spectrum.
#[derive(Debug, Clone, PartialEq)]
pub struct SpectralGate<T>(pub Tensor<T>);

impl<T: Scalar> SpectralGate<T> {
    /// All-ones gate, the identity filter.
    pub fn identity(channels: usize, dims: [usize; 3]) -> Self {
        SpectralGate(Tensor::ones(vec![channels, dims[0], dims[1], dims[2]]))
    }
}

/// Precomputed bit-reversal and twiddles for one power-of-two length.
#[derive(Debug, Clone)]
pub struct Radix2<T> {
    n: usize,
    rev: Vec<usize>,
    twiddles: Vec<Complex<T>>,
}

impl<T: Scalar> Radix2<T> {
    pub fn new(n: usize) -> Result<Self> {
        if !n.is_power_of_two() {
            return Err(Error::NotPowerOfTwo { axis: 0, extent: n });
        }
        let bits = n.trailing_zeros();
        let rev = (0..n).map(|i| if bits == 0 { 0 } else { i.reverse_bits() >> (usize::BITS - bits) }).collect();
        let twiddles = (0..n / 2)
            .map(|k| {
                let theta = -2.0 * std::f64::consts::PI * k as f64 / n as f64;
                Complex::new(T::c(theta.cos()), T::c(theta.sin()))
            })
            .collect();
        Ok(Radix2 { n, rev, twiddles })
    }

    /// In-place unnormalized transform; `inverse` conjugates the twiddles.
    pub fn process(&self, buf: &mut [Complex<T>], inverse: bool) {
        let n = self.n;
        debug_assert_eq!(buf.len(), n);
        for i in 0..n {
            let j = self.rev[i];
            if i < j {
                buf.swap(i, j);
            }
        }
        let mut len = 2;
        while len <= n {
            let half = len / 2;
            let step = n / len;
            for start in (0..n).step_by(len) {
                for k in 0..half {
                    let mut w = self.twiddles[k * step];
                    if inverse {
                        w = w.conj();
                    }
                    let a = buf[start + k];
                    let b = buf[start + k + half] * w;
                    buf[start + k] = a + b;
                    buf[start + k + half] = a - b;
                }
            }
            len <<= 1;
        }
    }
}

fn check_pow2(dims: [usize; 3]) -> Result<()> {
    for (axis, &extent) in dims.iter().enumerate() {
        if !extent.is_power_of_two() {
            return Err(Error::NotPowerOfTwo { axis: axis + 1, extent });
        }
    }
    Ok(())
}

/// Transform every spatial axis of every channel in place.
fn transform3<T: Scalar>(vol: &mut ComplexVolume<T>, inverse: bool) -> Result<()> {
    let [c, nz, ny, nx] = vol.shape;
    check_pow2([nz, ny, nx])?;
    let px = Radix2::new(nx)?;
    let py = Radix2::new(ny)?;
    let pz = Radix2::new(nz)?;
    let plane = ny * nx;
    let chan = nz * plane;
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); ny.max(nz)];
    for ch in 0..c {
        let base = ch * chan;
        let d = &mut vol.data[base..base + chan];
        if nx > 1 {
            for row in d.chunks_exact_mut(nx) {
                px.process(row, inverse);
            }
        }
        if ny > 1 {
            for z in 0..nz {
                for x in 0..nx {
                    let off = z * plane + x;
                    let s = &mut scratch[..ny];
                    for (y, v) in s.iter_mut().enumerate() {
                        *v = d[off + y * nx];
                    }
                    py.process(s, inverse);
                    for (y, v) in s.iter().enumerate() {
                        d[off + y * nx] = *v;
                    }
                }
            }
        }
        if nz > 1 {
            for off in 0..plane {
                let s = &mut scratch[..nz];
                for (z, v) in s.iter_mut().enumerate() {
                    *v = d[off + z * plane];
                }
                pz.process(s, inverse);
                for (z, v) in s.iter().enumerate() {
                    d[off + z * plane] = *v;
                }
            }
        }
    }
    if inverse {
        let norm = T::one() / T::c(chan as f64);
        for v in &mut vol.data {
            *v = *v * norm;
        }
    }
    Ok(())
}

/// Forward 3D FFT of a real `[C, Z, Y, X]` volume.
pub fn fft3<T: Scalar>(x: &Tensor<T>) -> Result<ComplexVolume<T>> {
    let mut vol = ComplexVolume::from_real(x)?;
    transform3(&mut vol, false)?;
    Ok(vol)
}

/// Forward 3D FFT of a complex volume.
pub fn fft3_complex<T: Scalar>(x: &ComplexVolume<T>) -> Result<ComplexVolume<T>> {
    let mut vol = x.clone();
    transform3(&mut vol, false)?;
    Ok(vol)
}

/// Normalized inverse 3D FFT, keeping the complex result.
pub fn ifft3_complex<T: Scalar>(spectrum: &ComplexVolume<T>) -> Result<ComplexVolume<T>> {
    let mut vol = spectrum.clone();
    transform3(&mut vol, true)?;
    Ok(vol)
}

/// Residue tolerance for the real-output inverse, relative to the largest
/// magnitude. 1e-8 in f64; loosened to the precision floor for f32.
fn residue_tol<T: Scalar>() -> T {
    T::c(1e-8).max(T::epsilon() * T::c(1e4))
}

/// Normalized inverse 3D FFT returning the real part.
///
/// For a conjugate-symmetric spectrum the imaginary part must vanish and a
/// residue above tolerance is reported as an error. Spectra without that
/// symmetry (e.g. after an asymmetric gate) are projected onto their real
/// part, which is a linear map and the one the gating layer differentiates.
pub fn ifft3<T: Scalar>(spectrum: &ComplexVolume<T>) -> Result<Tensor<T>> {
    let out = ifft3_complex(spectrum)?;
    let tol = residue_tol::<T>();
    if spectrum.is_conjugate_symmetric(tol) {
        let scale = out.data.iter().fold(T::one(), |m, c| m.max(c.re.abs()));
        let residue = out.max_abs_imag();
        if residue > tol * scale {
            return Err(Error::ImaginaryResidue(residue.to_f64_lossy()));
        }
    }
    Ok(out.real())
}

/// `M' = A ⊗ M`: real weight per channel and frequency bin.
pub fn spectral_gate<T: Scalar>(spectrum: &ComplexVolume<T>, gate: &SpectralGate<T>) -> Result<ComplexVolume<T>> {
    if gate.0.shape() != spectrum.shape.as_slice() {
        return Err(Error::shape("spectral_gate", &spectrum.shape, gate.0.shape()));
    }
    Ok(ComplexVolume {
        shape: spectrum.shape,
        data: spectrum.data.iter().zip(gate.0.data()).map(|(&m, &a)| m * a).collect(),
    })
}

/// Real part of `ifft3(A ⊗ fft3(x))`, also returning the forward spectrum
/// needed for the gate gradient.
pub(crate) fn gated_filter<T: Scalar>(x: &Tensor<T>, gate: &Tensor<T>) -> Result<(Tensor<T>, ComplexVolume<T>)> {
    if x.shape() != gate.shape() {
        return Err(Error::shape("spectral_filter", x.shape(), gate.shape()));
    }
    let spectrum = fft3(x)?;
    let gated = spectral_gate(&spectrum, &SpectralGate(gate.clone()))?;
    let y = ifft3_complex(&gated)?.real();
    Ok((y, spectrum))
}

/// Vector-Jacobian product of `gated_filter`.
///
/// With `G = F⁻¹ diag(A) F` and `y = Re(G x)`, the DFT matrix is symmetric so
/// `dx = Re(F diag(A) F⁻¹ dy)` and `dA = Re(X ⊙ F⁻¹ dy)`.
pub(crate) fn gated_filter_backward<T: Scalar>(
    dy: &Tensor<T>,
    gate: &Tensor<T>,
    spectrum: &ComplexVolume<T>,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let back = ifft3_complex(&ComplexVolume::from_real(dy)?)?;
    let mut weighted = back.clone();
    for (v, &a) in weighted.data.iter_mut().zip(gate.data()) {
        *v = *v * a;
    }
    let dx = fft3_complex(&weighted)?.real();
    let dgate =
        Tensor::new(gate.shape().to_vec(), spectrum.data.iter().zip(&back.data).map(|(&s, &b)| (s * b).re).collect())?;
    Ok((dx, dgate))
}
