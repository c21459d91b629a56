//! Selective state-space (Mamba) layer over flattened 3D token sequences.
//!
//! Per step, with zero initial state:
//!
//! ```text
//! Ā_t = exp(Δ_t·A)      B̄_t = Δ_t·B_t  (Euler)  or  (exp(Δ_t·A) - 1)/A · B_t  (ZOH)
//! h_t = Ā_t ⊙ h_{t-1} + B̄_t·u_t
//! y_t = C_t·h_t + D·u_t
//! ```
//!
//! `A` is diagonal (`[D, N]`, one row per channel), so every channel runs an
//! independent `N`-wide recurrence and the whole scan is linear in `L`.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Discretization {
    #[default]
    Euler,
    Zoh,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScanDims {
    pub len: usize,
    pub width: usize,
    pub state: usize,
}

impl ScanDims {
    pub(crate) fn check(
        u: &[usize],
        delta: &[usize],
        a: &[usize],
        b: &[usize],
        c: &[usize],
        d: &[usize],
    ) -> Result<Self> {
        let (len, width) = match u {
            &[l, w] => (l, w),
            s => return Err(Error::InvalidShape(format!("scan input must be [L, D], got {s:?}"))),
        };
        if delta != u {
            return Err(Error::shape("selective_scan Δ", u, delta));
        }
        let state = match a {
            &[w, n] if w == width => n,
            s => return Err(Error::shape("selective_scan A", u, s)),
        };
        for (name, s) in [("selective_scan B", b), ("selective_scan C", c)] {
            if s != [len, state] {
                return Err(Error::shape(name, &[len, state], s));
            }
        }
        if d != [width] {
            return Err(Error::shape("selective_scan D", &[width], d));
        }
        Ok(ScanDims { len, width, state })
    }
}

/// Input coefficient `q` with `B̄ = q·B`, and its partials in Δ and A.
#[inline]
fn input_coeff<T: Scalar>(disc: Discretization, delta: T, a: T, abar: T) -> (T, T, T) {
    match disc {
        Discretization::Euler => (delta, T::one(), T::zero()),
        Discretization::Zoh => {
            let em1 = (delta * a).exp_m1();
            let q = em1 / a;
            (q, abar, (delta * abar * a - em1) / (a * a))
        }
    }
}

/// Run the recurrence. Returns `y: [L, D]` and every state `h_t: [L, D, N]`.
#[allow(clippy::too_many_arguments)]
pub fn scan_forward<T: Scalar>(
    u: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    dims: ScanDims,
    disc: Discretization,
) -> Result<(Vec<T>, Vec<T>)> {
    let ScanDims { len, width, state } = dims;
    if let Some((i, &bad)) = delta.iter().enumerate().find(|(_, &v)| !(v > T::zero())) {
        return Err(Error::NonPositiveStep(bad.to_f64_lossy(), i));
    }
    let mut y = vec![T::zero(); len * width];
    let mut states = vec![T::zero(); len * width * state];
    let mut h = vec![T::zero(); width * state];
    for t in 0..len {
        let bt = &b[t * state..(t + 1) * state];
        let ct = &c[t * state..(t + 1) * state];
        for ch in 0..width {
            let dt = delta[t * width + ch];
            let ut = u[t * width + ch];
            let arow = &a[ch * state..(ch + 1) * state];
            let hrow = &mut h[ch * state..(ch + 1) * state];
            let mut acc = T::zero();
            for n in 0..state {
                let abar = (dt * arow[n]).exp();
                let (q, _, _) = input_coeff(disc, dt, arow[n], abar);
                hrow[n] = abar * hrow[n] + q * bt[n] * ut;
                acc += ct[n] * hrow[n];
            }
            y[t * width + ch] = acc + d[ch] * ut;
            states[(t * width + ch) * state..(t * width + ch + 1) * state].copy_from_slice(hrow);
        }
    }
    Ok((y, states))
}

pub struct ScanGrads<T> {
    pub du: Vec<T>,
    pub ddelta: Vec<T>,
    pub da: Vec<T>,
    pub db: Vec<T>,
    pub dc: Vec<T>,
    pub dd: Vec<T>,
}

/// Reverse pass of [`scan_forward`], carrying `∂L/∂h_t` backwards in time.
#[allow(clippy::too_many_arguments)]
pub fn scan_backward<T: Scalar>(
    u: &[T],
    delta: &[T],
    a: &[T],
    b: &[T],
    c: &[T],
    d: &[T],
    states: &[T],
    dy: &[T],
    dims: ScanDims,
    disc: Discretization,
) -> ScanGrads<T> {
    let ScanDims { len, width, state } = dims;
    let mut g = ScanGrads {
        du: vec![T::zero(); len * width],
        ddelta: vec![T::zero(); len * width],
        da: vec![T::zero(); width * state],
        db: vec![T::zero(); len * state],
        dc: vec![T::zero(); len * state],
        dd: vec![T::zero(); width],
    };
    let mut gh = vec![T::zero(); width * state];
    let zeros = vec![T::zero(); state];
    for t in (0..len).rev() {
        let bt = &b[t * state..(t + 1) * state];
        let ct = &c[t * state..(t + 1) * state];
        for ch in 0..width {
            let i = t * width + ch;
            let (dt, ut, gy) = (delta[i], u[i], dy[i]);
            g.dd[ch] += gy * ut;
            let mut du = gy * d[ch];
            let mut ddt = T::zero();
            let h = &states[i * state..(i + 1) * state];
            let hp = if t == 0 {
                &zeros[..]
            } else {
                &states[((t - 1) * width + ch) * state..((t - 1) * width + ch + 1) * state]
            };
            for n in 0..state {
                let an = a[ch * state + n];
                g.dc[t * state + n] += gy * h[n];
                let gn = gh[ch * state + n] + gy * ct[n];
                let abar = (dt * an).exp();
                let (q, dq_dt, dq_da) = input_coeff(disc, dt, an, abar);
                let bu = bt[n] * ut;
                ddt += gn * (an * abar * hp[n] + dq_dt * bu);
                g.da[ch * state + n] += gn * (dt * abar * hp[n] + dq_da * bu);
                g.db[t * state + n] += gn * q * ut;
                du += gn * q * bt[n];
                gh[ch * state + n] = gn * abar;
            }
            g.du[i] += du;
            g.ddelta[i] += ddt;
        }
    }
    g
}

/// Raster-ordered tokens of a `[C, Z, Y, X]` volume: `[L, C]` with x
/// fastest, then y, then z.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    pub tokens: Tensor<T>,
    pub dims: [usize; 3],
}

pub fn flatten_tokens<T: Scalar>(x: &Tensor<T>) -> Result<TokenSequence<T>> {
    let dims = x.spatial()?;
    let c = x.shape()[0];
    let len = dims.iter().product::<usize>();
    let tokens = x.clone().reshape(vec![c, len])?.transpose_last2()?;
    Ok(TokenSequence { tokens, dims })
}

pub fn unflatten_tokens<T: Scalar>(seq: &TokenSequence<T>) -> Result<Tensor<T>> {
    let [z, y, x] = seq.dims;
    let c = seq.tokens.shape()[1];
    seq.tokens.transpose_last2()?.reshape(vec![c, z, y, x])
}

/// Tape form of [`flatten_tokens`].
pub fn to_tokens<T: Scalar>(tape: &mut Tape<T>, x: Var) -> Result<Var> {
    let s = tape.shape(x).to_vec();
    let len = s[1..].iter().product::<usize>();
    let flat = tape.reshape(x, &[s[0], len])?;
    tape.transpose(flat)
}

/// Tape form of [`unflatten_tokens`].
pub fn from_tokens<T: Scalar>(tape: &mut Tape<T>, seq: Var, dims: [usize; 3]) -> Result<Var> {
    let c = tape.shape(seq)[1];
    let t = tape.transpose(seq)?;
    tape.reshape(t, &[c, dims[0], dims[1], dims[2]])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SsmConfig {
    pub d_state: usize,
    pub expand: usize,
    pub conv_width: usize,
    pub dt_min: f64,
    pub dt_max: f64,
    pub discretization: Discretization,
}

impl Default for SsmConfig {
    fn default() -> Self {
        SsmConfig {
            d_state: 16,
            expand: 2,
            conv_width: 4,
            dt_min: 1e-3,
            dt_max: 1e-1,
            discretization: Discretization::Euler,
        }
    }
}

impl SsmConfig {
    /// Closed-form trainable scalar count of one layer at width `d_model`.
    pub fn param_count(&self, d_model: usize) -> usize {
        let di = self.expand * d_model;
        let n = self.d_state;
        2 * d_model * di       // in_x, in_z
            + di * self.conv_width + di // causal conv
            + di * di + di     // Δ projection
            + 2 * di * n       // B, C projections
            + di * n           // A_log
            + di               // D
            + di * d_model // out
    }
}

/// Parameter handles of one Mamba layer.
#[derive(Debug, Clone)]
pub struct SsmParams {
    pub d_model: usize,
    pub d_inner: usize,
    pub cfg: SsmConfig,
    pub in_x: ParamId,
    pub in_z: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub dt_w: ParamId,
    pub dt_b: ParamId,
    pub b_proj: ParamId,
    pub c_proj: ParamId,
    pub a_log: ParamId,
    pub d_skip: ParamId,
    pub out: ParamId,
}

impl SsmParams {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        prefix: &str,
        d_model: usize,
        cfg: SsmConfig,
    ) -> Self {
        let di = cfg.expand * d_model;
        let n = cfg.d_state;
        let k = cfg.conv_width;
        let name = |s: &str| format!("{prefix}.{s}");
        let in_x = store.add(name("in_x"), init.fan_in(&[d_model, di], d_model));
        let in_z = store.add(name("in_z"), init.fan_in(&[d_model, di], d_model));
        let conv_w = store.add(name("conv_w"), init.fan_in(&[di, k], k));
        let conv_b = store.add(name("conv_b"), init.fan_in(&[di], k));
        let dt_w = store.add(name("dt_w"), init.fan_in(&[di, di], di));
        // softplus(dt_b) log-uniform in [dt_min, dt_max]
        let (lo, hi) = (cfg.dt_min.ln(), cfg.dt_max.ln());
        let dt_bias: Vec<T> = (0..di)
            .map(|_| {
                let dt = (lo + init.unit() * (hi - lo)).exp();
                T::c(dt + (-(-dt).exp_m1()).ln())
            })
            .collect();
        let dt_b = store.add(name("dt_b"), Tensor::new(vec![di], dt_bias).expect("shape"));
        let b_proj = store.add(name("b_proj"), init.fan_in(&[di, n], di));
        let c_proj = store.add(name("c_proj"), init.fan_in(&[di, n], di));
        let a_log = store.add(name("a_log"), Tensor::from_fn(vec![di, n], |i| T::c(((i % n) + 1) as f64).ln()));
        let d_skip = store.add(name("d"), Tensor::ones(vec![di]));
        let out = store.add(name("out"), init.fan_in(&[di, d_model], di));
        SsmParams {
            d_model,
            d_inner: di,
            cfg,
            in_x,
            in_z,
            conv_w,
            conv_b,
            dt_w,
            dt_b,
            b_proj,
            c_proj,
            a_log,
            d_skip,
            out,
        }
    }
}

/// `out_proj(scan(SiLU(conv(in_x·s))) ⊙ SiLU(in_z·s))` over `seq: [L, d_model]`.
pub fn mamba_layer<T: Scalar>(tape: &mut Tape<T>, store: &ParamStore<T>, p: &SsmParams, seq: Var) -> Result<Var> {
    let s = tape.shape(seq).to_vec();
    if s.len() != 2 || s[1] != p.d_model {
        return Err(Error::shape("mamba_layer", &s, &[s.first().copied().unwrap_or(0), p.d_model]));
    }
    let w = |tape: &mut Tape<T>, id| tape.param(store, id);

    let in_x = w(tape, p.in_x);
    let in_z = w(tape, p.in_z);
    let xs = tape.matmul(seq, in_x)?;
    let zs = tape.matmul(seq, in_z)?;

    let conv_w = w(tape, p.conv_w);
    let conv_b = w(tape, p.conv_b);
    let xc = tape.causal_conv1d(xs, conv_w, conv_b)?;
    let xc = tape.silu(xc);

    let dt_w = w(tape, p.dt_w);
    let dt_b = w(tape, p.dt_b);
    let dt = tape.matmul(xc, dt_w)?;
    let dt = tape.add(dt, dt_b)?;
    let delta = tape.softplus(dt);

    let b_proj = w(tape, p.b_proj);
    let c_proj = w(tape, p.c_proj);
    let b = tape.matmul(xc, b_proj)?;
    let c = tape.matmul(xc, c_proj)?;

    let a_log = w(tape, p.a_log);
    let a = tape.exp(a_log);
    let a = tape.neg(a);
    let d = w(tape, p.d_skip);

    let y = tape.selective_scan(xc, delta, a, b, c, d, p.cfg.discretization)?;
    let gate = tape.silu(zs);
    let y = tape.mul(y, gate)?;
    let out = w(tape, p.out);
    tape.matmul(y, out)
}
