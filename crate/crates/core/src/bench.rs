//! Wall-clock scaling of the Mamba layer and the 3D FFT.

use std::io::Write;
use std::time::Instant;

use serde::Serialize;

use crate::autodiff::Tape;
use crate::error::Result;
use crate::fft::fft3;
use crate::params::{Init, ParamStore};
use crate::scalar::Scalar;
use crate::ssm::{mamba_layer, SsmConfig, SsmParams};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BenchRow {
    pub op: String,
    pub size: usize,
    pub seconds: f64,
    pub bytes: usize,
}

fn best_of(reps: usize, mut f: impl FnMut() -> Result<usize>) -> Result<(f64, usize)> {
    let mut best = f64::INFINITY;
    let mut bytes = 0;
    for _ in 0..reps.max(1) {
        let t = Instant::now();
        bytes = f()?;
        best = best.min(t.elapsed().as_secs_f64());
    }
    Ok((best, bytes))
}

/// Forward time of one Mamba layer over `[L, d_model]` for each `L`.
/// `bytes` is the tape footprint, including saved scan states.
pub fn bench_mamba<T: Scalar>(lengths: &[usize], d_model: usize, reps: usize) -> Result<Vec<BenchRow>> {
    let mut store = ParamStore::<T>::new();
    let mut init = Init::new(0);
    let p = SsmParams::new(&mut store, &mut init, "m", d_model, SsmConfig::default());
    lengths
        .iter()
        .map(|&len| {
            let x: Tensor<T> = init.uniform(&[len, d_model], 1.0);
            let (seconds, bytes) = best_of(reps, || {
                let mut tape = Tape::new();
                let v = tape.constant(x.clone());
                mamba_layer(&mut tape, &store, &p, v)?;
                Ok(tape.bytes())
            })?;
            Ok(BenchRow { op: "mamba_layer".into(), size: len, seconds, bytes })
        })
        .collect()
}

/// Forward FFT time of a single-channel cube for each side length;
/// `size` is the voxel count.
pub fn bench_fft<T: Scalar>(sides: &[usize], reps: usize) -> Result<Vec<BenchRow>> {
    let mut init = Init::new(1);
    sides
        .iter()
        .map(|&n| {
            let x: Tensor<T> = init.uniform(&[1, n, n, n], 1.0);
            let (seconds, bytes) = best_of(reps, || {
                let s = fft3(&x)?;
                Ok(s.data().len() * 2 * T::BYTES)
            })?;
            Ok(BenchRow { op: "fft3".into(), size: n * n * n, seconds, bytes })
        })
        .collect()
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn loglog_slope(xs: &[f64], ys: &[f64]) -> f64 {
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let (mx, my) = (lx.iter().sum::<f64>() / n, ly.iter().sum::<f64>() / n);
    let cov: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let var: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    cov / var
}

/// Slope of time against size.
pub fn linear_slope(rows: &[BenchRow]) -> f64 {
    let xs: Vec<f64> = rows.iter().map(|r| r.size as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.seconds).collect();
    loglog_slope(&xs, &ys)
}

/// Slope of time against `n·log₂ n`.
pub fn nlogn_slope(rows: &[BenchRow]) -> f64 {
    let xs: Vec<f64> = rows.iter().map(|r| r.size as f64 * (r.size as f64).log2()).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.seconds).collect();
    loglog_slope(&xs, &ys)
}

/// Writes `op,size,seconds,bytes` rows.
pub fn write_rows<W: Write>(out: W, rows: &[BenchRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
