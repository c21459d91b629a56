//! Dice similarity and Hausdorff distance on label volumes.
//!
//! Hausdorff distances are exact: boundary sets are compared through a
//! separable squared Euclidean distance transform with per-axis spacing.

use std::io::Write;

use serde::Serialize;

use crate::error::{Error, Result};
use crate::volume::LabelVolume;

/// `100·2|P∩G| / (|P|+|G|)`; 100 when the class is absent from both.
pub fn dsc(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<f64> {
    same_dims(pred, gt)?;
    let (mut inter, mut p, mut g) = (0usize, 0usize, 0usize);
    for (&a, &b) in pred.data.iter().zip(&gt.data) {
        let (ia, ib) = (a == class, b == class);
        p += ia as usize;
        g += ib as usize;
        inter += (ia && ib) as usize;
    }
    if p + g == 0 {
        return Ok(100.0);
    }
    Ok(100.0 * 2.0 * inter as f64 / (p + g) as f64)
}

/// Mean DSC over foreground classes `1..classes` present in either volume.
pub fn mean_dsc(pred: &LabelVolume, gt: &LabelVolume, classes: usize) -> Result<Option<f64>> {
    let mut sum = 0.0;
    let mut n = 0;
    for k in 1..classes as u8 {
        if pred.data.contains(&k) || gt.data.contains(&k) {
            sum += dsc(pred, gt, k)?;
            n += 1;
        }
    }
    Ok((n > 0).then(|| sum / n as f64))
}

fn same_dims(a: &LabelVolume, b: &LabelVolume) -> Result<()> {
    if a.dims != b.dims {
        return Err(Error::shape("metric", &a.dims, &b.dims));
    }
    Ok(())
}

/// Mask voxels of `class` with at least one face neighbour outside the mask.
/// Neighbours beyond the volume edge count as outside.
pub fn boundary(labels: &[u8], dims: [usize; 3], class: u8) -> Vec<[usize; 3]> {
    let [nz, ny, nx] = dims;
    let at = |z: usize, y: usize, x: usize| labels[(z * ny + y) * nx + x] == class;
    let mut out = Vec::new();
    for z in 0..nz {
        for y in 0..ny {
            for x in 0..nx {
                if !at(z, y, x) {
                    continue;
                }
                let edge = z == 0 || y == 0 || x == 0 || z + 1 == nz || y + 1 == ny || x + 1 == nx;
                if edge
                    || !at(z - 1, y, x)
                    || !at(z + 1, y, x)
                    || !at(z, y - 1, x)
                    || !at(z, y + 1, x)
                    || !at(z, y, x - 1)
                    || !at(z, y, x + 1)
                {
                    out.push([z, y, x]);
                }
            }
        }
    }
    out
}

/// Lower envelope of parabolas `((i − q)·s)² + f[q]` over finite `f[q]`.
fn edt_line(f: &[f64], s: f64, out: &mut [f64], v: &mut Vec<usize>, zs: &mut Vec<f64>) {
    v.clear();
    zs.clear();
    let s2 = s * s;
    let key = |q: usize| f[q] + (q * q) as f64 * s2;
    for q in (0..f.len()).filter(|&q| f[q].is_finite()) {
        loop {
            match v.last() {
                None => {
                    v.push(q);
                    zs.push(f64::NEG_INFINITY);
                    break;
                }
                Some(&p) => {
                    let cross = (key(q) - key(p)) / (2.0 * s2 * (q - p) as f64);
                    if cross <= *zs.last().expect("paired with v") {
                        v.pop();
                        zs.pop();
                    } else {
                        v.push(q);
                        zs.push(cross);
                        break;
                    }
                }
            }
        }
    }
    if v.is_empty() {
        out.fill(f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (i, o) in out.iter_mut().enumerate() {
        while k + 1 < v.len() && zs[k + 1] < i as f64 {
            k += 1;
        }
        let d = (i as f64 - v[k] as f64) * s;
        *o = d * d + f[v[k]];
    }
}

/// Squared distance from every voxel to the nearest `seed` voxel, with
/// `spacing` in `[Z, Y, X]` order. Infinite everywhere if `seed` is empty.
pub fn squared_edt(seed: &[bool], dims: [usize; 3], spacing: [f64; 3]) -> Vec<f64> {
    let [nz, ny, nx] = dims;
    let mut d: Vec<f64> = seed.iter().map(|&b| if b { 0.0 } else { f64::INFINITY }).collect();
    let strides = [ny * nx, nx, 1];
    let (mut v, mut zs) = (Vec::new(), Vec::new());
    // x, then y, then z
    for axis in (0..3).rev() {
        let n = dims[axis];
        let mut line = vec![0.0; n];
        let mut out = vec![0.0; n];
        let starts: Vec<usize> = (0..nz * ny * nx).filter(|&i| (i / strides[axis]) % n == 0).collect();
        for start in starts {
            for (j, l) in line.iter_mut().enumerate() {
                *l = d[start + j * strides[axis]];
            }
            edt_line(&line, spacing[axis], &mut out, &mut v, &mut zs);
            for (j, &o) in out.iter().enumerate() {
                d[start + j * strides[axis]] = o;
            }
        }
    }
    d
}

fn directed(from: &[[usize; 3]], to_edt: &[f64], dims: [usize; 3]) -> Vec<f64> {
    let [_, ny, nx] = dims;
    from.iter().map(|&[z, y, x]| to_edt[(z * ny + y) * nx + x].sqrt()).collect()
}

fn boundary_distances(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<Option<(Vec<f64>, Vec<f64>)>> {
    same_dims(pred, gt)?;
    let dims = pred.dims;
    let bp = boundary(&pred.data, dims, class);
    let bg = boundary(&gt.data, dims, class);
    if bp.is_empty() || bg.is_empty() {
        return Ok(None);
    }
    let seed = |b: &[[usize; 3]]| {
        let mut m = vec![false; pred.data.len()];
        for &[z, y, x] in b {
            m[(z * dims[1] + y) * dims[2] + x] = true;
        }
        m
    };
    let spacing = gt.spacing;
    let to_g = squared_edt(&seed(&bg), dims, spacing);
    let to_p = squared_edt(&seed(&bp), dims, spacing);
    Ok(Some((directed(&bp, &to_g, dims), directed(&bg, &to_p, dims))))
}

/// Symmetric Hausdorff distance between the boundaries of `class`, in the
/// units of `gt.spacing`. `None` when either mask is empty.
pub fn hausdorff(pred: &LabelVolume, gt: &LabelVolume, class: u8) -> Result<Option<f64>> {
    let max = |v: &[f64]| v.iter().copied().fold(0.0, f64::max);
    Ok(boundary_distances(pred, gt, class)?.map(|(a, b)| max(&a).max(max(&b))))
}

/// Like [`hausdorff`] but with the `q`-th percentile (linear interpolation)
/// of each directed distance set in place of the maximum.
pub fn hausdorff_percentile(pred: &LabelVolume, gt: &LabelVolume, class: u8, q: f64) -> Result<Option<f64>> {
    Ok(boundary_distances(pred, gt, class)?.map(|(a, b)| percentile(a, q).max(percentile(b, q))))
}

fn percentile(mut v: Vec<f64>, q: f64) -> f64 {
    v.sort_by(f64::total_cmp);
    let pos = (q / 100.0).clamp(0.0, 1.0) * (v.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    v[lo] + (v[hi] - v[lo]) * (pos - lo as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ClassReport {
    pub case: String,
    pub class: u8,
    pub dsc: f64,
    /// Empty when either mask is empty.
    pub hd: Option<f64>,
}

/// Per-class DSC and HD (or HD95 with `hd95`) for classes `1..classes`.
pub fn evaluate_case(
    name: &str,
    pred: &LabelVolume,
    gt: &LabelVolume,
    classes: usize,
    hd95: bool,
) -> Result<Vec<ClassReport>> {
    (1..classes as u8)
        .map(|k| {
            let hd = if hd95 { hausdorff_percentile(pred, gt, k, 95.0)? } else { hausdorff(pred, gt, k)? };
            Ok(ClassReport { case: name.to_string(), class: k, dsc: dsc(pred, gt, k)?, hd })
        })
        .collect()
}

/// Writes `case,class,dsc,hd` rows.
pub fn write_report<W: Write>(out: W, rows: &[ClassReport]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)?;
    }
    w.flush()?;
    Ok(())
}
