//! Reverse-mode automatic differentiation on a linear tape.
//!
//! Every operation appends a node holding its output value and enough saved
//! state to run its vector-Jacobian product. `backward` walks the nodes in
//! exact reverse order, writes parameter gradients into the [`ParamStore`]
//! and clears the tape.

use std::collections::HashMap;

use crate::conv::{self, ConvGeom};
use crate::error::{Error, Result};
use crate::fft::{self, ComplexVolume};
use crate::params::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::ssm::{self, Discretization, ScanDims};
use crate::tensor::{broadcast_shape, broadcast_strides, for_each_broadcast, reduce_to_shape, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug, Clone, Copy, PartialEq)]
enum Unary<T> {
    Exp,
    Ln,
    Silu,
    Gelu,
    Softplus,
    LeakyRelu(T),
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Binary(Binary, Var, Var),
    Unary(Unary<T>, Var),
    Scale(Var, T),
    Offset(Var),
    Reshape(Var),
    Transpose(Var),
    Concat(Vec<Var>),
    Matmul(Var, Var),
    SumAll(Var),
    SumLast(Var),
    NormalizeLast { x: Var, inv_std: Vec<T> },
    LogSoftmax0(Var),
    Conv3d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    Deconv3d { x: Var, w: Var, b: Option<Var>, geom: ConvGeom },
    CausalConv { x: Var, w: Var, b: Var },
    Scan { inputs: [Var; 6], states: Vec<T>, dims: ScanDims, disc: Discretization },
    SpectralFilter { x: Var, gate: Var, spectrum: ComplexVolume<T> },
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
#[derive(Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Grads<T> {
    pub fn wrt(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    bound: HashMap<ParamId, Var>,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), bound: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
        self.bound.clear();
    }

    /// Bytes held by node values and saved scan states.
    pub fn bytes(&self) -> usize {
        let elems: usize = self
            .nodes
            .iter()
            .map(|n| {
                n.value.numel()
                    + match &n.op {
                        Op::Scan { states, .. } => states.len(),
                        _ => 0,
                    }
            })
            .sum();
        elems * T::BYTES
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].needs_grad)
    }

    /// A constant: no gradient is tracked through it.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A differentiable input whose gradient is reported in [`Grads`].
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a parameter. Repeated binds of one id return the same node, so
    /// shared modules accumulate their gradient in one place.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(&v) = self.bound.get(&id) {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id), true);
        self.bound.insert(id, v);
        v
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let out = broadcast_shape(&sa, &sb).ok_or_else(|| {
            Error::shape(
                match kind {
                    Binary::Add => "add",
                    Binary::Sub => "sub",
                    Binary::Mul => "mul",
                    Binary::Div => "div",
                },
                &sa,
                &sb,
            )
        })?;
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let data = if sa == sb {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            let n = out.iter().product();
            let mut data = vec![T::zero(); n];
            let (ta, tb) = (broadcast_strides(&sa, &out), broadcast_strides(&sb, &out));
            for_each_broadcast(&out, &ta, &tb, |o, i, j| data[o] = f(da[i], db[j]));
            data
        };
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(out, data)?, Op::Binary(kind, a, b), ng))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(Binary::Div, a, b)
    }

    fn unary(&mut self, kind: Unary<T>, x: Var) -> Var {
        let value = self.value(x).map(|v| unary_value(kind, v));
        let ng = self.ng(&[x]);
        self.push(value, Op::Unary(kind, x), ng)
    }

    pub fn exp(&mut self, x: Var) -> Var {
        self.unary(Unary::Exp, x)
    }

    pub fn ln(&mut self, x: Var) -> Var {
        self.unary(Unary::Ln, x)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        self.unary(Unary::Silu, x)
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        self.unary(Unary::Gelu, x)
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(Unary::Softplus, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: T) -> Var {
        self.unary(Unary::LeakyRelu(slope), x)
    }

    pub fn scale(&mut self, x: Var, k: T) -> Var {
        let value = self.value(x).map(|v| v * k);
        let ng = self.ng(&[x]);
        self.push(value, Op::Scale(x, k), ng)
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -T::one())
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        let value = self.value(x).map(|v| v + c);
        let ng = self.ng(&[x]);
        self.push(value, Op::Offset(x), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Reshape(x), ng))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let value = self.value(x).transpose_last2()?;
        let ng = self.ng(&[x]);
        Ok(self.push(value, Op::Transpose(x), ng))
    }

    /// Concatenate along axis 0; trailing axes must agree.
    pub fn concat(&mut self, xs: &[Var]) -> Result<Var> {
        let first = self.shape(xs[0]).to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &x in xs {
            let s = self.shape(x);
            if s.len() != first.len() || s[1..] != first[1..] {
                return Err(Error::shape("concat", &first, s));
            }
            lead += s[0];
            data.extend_from_slice(self.value(x).data());
        }
        let mut shape = first;
        shape[0] = lead;
        let ng = self.ng(xs);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat(xs.to_vec()), ng))
    }

    /// `[.., m, k] · [k, n]` (shared right operand) or `[B.., m, k] · [B.., k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let batch_a: usize = sa[..sa.len() - 2].iter().product();
        let shared = sb.len() == 2;
        if k != k2 || (!shared && sa[..sa.len() - 2] != sb[..sb.len() - 2]) {
            return Err(Error::shape("matmul", &sa, &sb));
        }
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut out = vec![T::zero(); batch_a * m * n];
        for bi in 0..batch_a {
            let bo = if shared { 0 } else { bi * k * n };
            gemm(
                &da[bi * m * k..(bi + 1) * m * k],
                &db[bo..bo + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = sa[..sa.len() - 2].to_vec();
        shape.extend([m, n]);
        let ng = self.ng(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::Matmul(a, b), ng))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).sum();
        let ng = self.ng(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), ng)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::c(n as f64))
    }

    /// Sum over the last axis.
    pub fn sum_last(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = *shape.last().expect("rank >= 1");
        let data: Vec<T> = self.value(x).data().chunks_exact(n.max(1)).map(|c| c.iter().copied().sum()).collect();
        let mut out = shape[..shape.len() - 1].to_vec();
        if out.is_empty() {
            out.push(1);
        }
        let ng = self.ng(&[x]);
        self.push(Tensor::new(out, data).expect("reduced shape"), Op::SumLast(x), ng)
    }

    /// Zero-mean, unit-variance along the last axis (biased variance).
    pub fn normalize_last(&mut self, x: Var, eps: T) -> Var {
        let xv = self.value(x);
        let n = *xv.shape().last().expect("rank >= 1");
        let nf = T::c(n as f64);
        let mut out = vec![T::zero(); xv.numel()];
        let mut inv_std = Vec::with_capacity(xv.numel() / n.max(1));
        for (row, dst) in xv.data().chunks_exact(n).zip(out.chunks_exact_mut(n)) {
            let mut mean = T::zero();
            for &v in row {
                mean += v;
            }
            mean /= nf;
            let mut var = T::zero();
            for &v in row {
                var += (v - mean) * (v - mean);
            }
            var /= nf;
            let inv = T::one() / (var + eps).sqrt();
            for (d, &v) in dst.iter_mut().zip(row) {
                *d = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let ng = self.ng(&[x]);
        self.push(value, Op::NormalizeLast { x, inv_std }, ng)
    }

    /// Layer norm over the last axis with per-channel affine.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let n = self.normalize_last(x, eps);
        let g = self.mul(n, gamma)?;
        self.add(g, beta)
    }

    /// `log softmax` over axis 0 of a `[K, N]` tensor.
    pub fn log_softmax0(&mut self, x: Var) -> Result<Var> {
        let xv = self.value(x);
        let (k, n) = match xv.shape() {
            &[k, n] => (k, n),
            s => return Err(Error::InvalidShape(format!("log_softmax0 expects [K, N], got {s:?}"))),
        };
        let d = xv.data();
        let mut out = vec![T::zero(); k * n];
        for j in 0..n {
            let mut m = T::neg_infinity();
            for c in 0..k {
                m = m.max(d[c * n + j]);
            }
            let mut s = T::zero();
            for c in 0..k {
                s += (d[c * n + j] - m).exp();
            }
            let lse = m + s.ln();
            for c in 0..k {
                out[c * n + j] = d[c * n + j] - lse;
            }
        }
        let ng = self.ng(&[x]);
        Ok(self.push(Tensor::new(vec![k, n], out)?, Op::LogSoftmax0(x), ng))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Result<Var> {
        let [_, z, y, xx] = dims4(self.shape(x), "conv3d input")?;
        let ws = self.shape(w).to_vec();
        let c_in = self.shape(x)[0];
        if ws.len() != 5 || ws[1] != c_in || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::shape("conv3d", self.shape(x), &ws));
        }
        let geom = ConvGeom::conv(c_in, ws[0], ws[2], stride, pad, [z, y, xx])?;
        let bias = b.map(|b| self.value(b).data());
        let out = conv::conv3d_forward(self.value(x).data(), self.value(w).data(), bias, &geom);
        let [oz, oy, ox] = geom.output;
        let ng = self.ng(&[x, w]) || b.is_some_and(|b| self.ng(&[b]));
        Ok(self.push(Tensor::new(vec![ws[0], oz, oy, ox], out)?, Op::Conv3d { x, w, b, geom }, ng))
    }

    pub fn deconv3d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize) -> Result<Var> {
        let [_, z, y, xx] = dims4(self.shape(x), "deconv3d input")?;
        let ws = self.shape(w).to_vec();
        let c_in = self.shape(x)[0];
        if ws.len() != 5 || ws[0] != c_in || ws[2] != ws[3] || ws[3] != ws[4] {
            return Err(Error::shape("deconv3d", self.shape(x), &ws));
        }
        let geom = ConvGeom::deconv(c_in, ws[1], ws[2], stride, [z, y, xx])?;
        let bias = b.map(|b| self.value(b).data());
        let out = conv::deconv3d_forward(self.value(x).data(), self.value(w).data(), bias, &geom);
        let [oz, oy, ox] = geom.output;
        let ng = self.ng(&[x, w]) || b.is_some_and(|b| self.ng(&[b]));
        Ok(self.push(Tensor::new(vec![ws[1], oz, oy, ox], out)?, Op::Deconv3d { x, w, b, geom }, ng))
    }

    /// Depthwise causal conv over `[L, D]` with weights `[D, K]` and bias `[D]`.
    pub fn causal_conv1d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws) = (self.shape(x).to_vec(), self.shape(w).to_vec());
        if xs.len() != 2 || ws.len() != 2 || ws[0] != xs[1] || self.shape(b) != [xs[1]] {
            return Err(Error::shape("causal_conv1d", &xs, &ws));
        }
        let out = conv::causal_conv1d_forward(
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
            xs[0],
            xs[1],
            ws[1],
        );
        let ng = self.ng(&[x, w, b]);
        Ok(self.push(Tensor::new(xs, out)?, Op::CausalConv { x, w, b }, ng))
    }

    /// Selective scan over `u, Δ: [L, D]`, `A: [D, N]`, `B, C: [L, N]`, `D: [D]`.
    pub fn selective_scan(
        &mut self,
        u: Var,
        delta: Var,
        a: Var,
        b: Var,
        c: Var,
        d: Var,
        disc: Discretization,
    ) -> Result<Var> {
        let us = self.shape(u).to_vec();
        let dims = ScanDims::check(&us, self.shape(delta), self.shape(a), self.shape(b), self.shape(c), self.shape(d))?;
        let (y, states) = ssm::scan_forward(
            self.value(u).data(),
            self.value(delta).data(),
            self.value(a).data(),
            self.value(b).data(),
            self.value(c).data(),
            self.value(d).data(),
            dims,
            disc,
        )?;
        let inputs = [u, delta, a, b, c, d];
        let ng = self.ng(&inputs);
        Ok(self.push(Tensor::new(us, y)?, Op::Scan { inputs, states, dims, disc }, ng))
    }

    /// Real part of `ifft3(A ⊗ fft3(x))` for `x, A: [C, Z, Y, X]`.
    pub fn spectral_filter(&mut self, x: Var, gate: Var) -> Result<Var> {
        let (y, spectrum) = fft::gated_filter(self.value(x), self.value(gate))?;
        let ng = self.ng(&[x, gate]);
        Ok(self.push(y, Op::SpectralFilter { x, gate, spectrum }, ng))
    }

    /// Run the reverse pass from a scalar `loss`.
    ///
    /// Parameter gradients are accumulated into `store`; every parameter bound
    /// on this tape receives a gradient (zeros when unreachable). The tape is
    /// cleared afterwards.
    pub fn backward(&mut self, loss: Var, store: &mut ParamStore<T>) -> Result<Grads<T>> {
        let grads = self.backward_inner(loss)?;
        for node_idx in 0..self.nodes.len() {
            if let Op::Param(id) = self.nodes[node_idx].op {
                match &grads[node_idx] {
                    Some(g) => store.accumulate_grad(id, g.data()),
                    None => {
                        let zeros = vec![T::zero(); self.nodes[node_idx].value.numel()];
                        store.accumulate_grad(id, &zeros)
                    }
                }
            }
        }
        self.clear();
        Ok(Grads { grads })
    }

    fn backward_inner(&self, loss: Var) -> Result<Vec<Option<Tensor<T>>>> {
        let lv = self.value(loss);
        if lv.numel() != 1 {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::new(lv.shape().to_vec(), vec![T::one()])?);
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.vjp(node, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(grads)
    }

    fn acc(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Vec<T>) {
        let node = &self.nodes[v.0];
        if !node.needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(t) => {
                for (a, b) in t.data_mut().iter_mut().zip(g) {
                    *a += b;
                }
            }
            slot @ None => *slot = Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape")),
        }
    }

    fn vjp(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::Binary(kind, a, b) => {
                let out = node.value.shape();
                let (av, bv) = (self.value(*a), self.value(*b));
                let (sa, sb) = (av.shape(), bv.shape());
                let (ta, tb) = (broadcast_strides(sa, out), broadcast_strides(sb, out));
                let (da, db) = (av.data(), bv.data());
                let mut ga = vec![T::zero(); gd.len()];
                let mut gb = vec![T::zero(); gd.len()];
                for_each_broadcast(out, &ta, &tb, |o, i, j| {
                    let (x, y, go) = (da[i], db[j], gd[o]);
                    let (p, q) = match kind {
                        Binary::Add => (go, go),
                        Binary::Sub => (go, -go),
                        Binary::Mul => (go * y, go * x),
                        Binary::Div => (go / y, -go * x / (y * y)),
                    };
                    ga[o] = p;
                    gb[o] = q;
                });
                self.acc(grads, *a, reduce_to_shape(&ga, out, sa));
                self.acc(grads, *b, reduce_to_shape(&gb, out, sb));
            }
            Op::Unary(kind, x) => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let gx =
                    gd.iter().zip(xv.iter().zip(yv)).map(|(&go, (&xi, &yi))| go * unary_grad(*kind, xi, yi)).collect();
                self.acc(grads, *x, gx);
            }
            Op::Scale(x, k) => self.acc(grads, *x, gd.iter().map(|&v| v * *k).collect()),
            Op::Offset(x) | Op::Reshape(x) => self.acc(grads, *x, gd.to_vec()),
            Op::Transpose(x) => {
                let back = g.transpose_last2()?;
                self.acc(grads, *x, back.into_data());
            }
            Op::Concat(xs) => {
                let mut off = 0;
                for &x in xs {
                    let n = self.value(x).numel();
                    self.acc(grads, x, gd[off..off + n].to_vec());
                    off += n;
                }
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let (sa, sb) = (av.shape(), bv.shape());
                let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
                let n = sb[sb.len() - 1];
                let batch = av.numel() / (m * k).max(1);
                let shared = sb.len() == 2;
                let mut ga = vec![T::zero(); av.numel()];
                let mut gb = vec![T::zero(); bv.numel()];
                for bi in 0..batch {
                    let bo = if shared { 0 } else { bi * k * n };
                    let gc = &gd[bi * m * n..(bi + 1) * m * n];
                    gemm_nt(gc, &bv.data()[bo..bo + k * n], &mut ga[bi * m * k..(bi + 1) * m * k], m, n, k);
                    gemm_tn(&av.data()[bi * m * k..(bi + 1) * m * k], gc, &mut gb[bo..bo + k * n], m, k, n);
                }
                self.acc(grads, *a, ga);
                self.acc(grads, *b, gb);
            }
            Op::SumAll(x) => {
                let n = self.value(*x).numel();
                self.acc(grads, *x, vec![gd[0]; n]);
            }
            Op::SumLast(x) => {
                let xv = self.value(*x);
                let n = *xv.shape().last().expect("rank >= 1");
                let mut gx = Vec::with_capacity(xv.numel());
                for &go in gd {
                    gx.extend(std::iter::repeat_n(go, n));
                }
                self.acc(grads, *x, gx);
            }
            Op::NormalizeLast { x, inv_std } => {
                let y = node.value.data();
                let n = *node.value.shape().last().expect("rank >= 1");
                let nf = T::c(n as f64);
                let mut gx = vec![T::zero(); y.len()];
                for (r, &inv) in inv_std.iter().enumerate() {
                    let (yr, gr) = (&y[r * n..(r + 1) * n], &gd[r * n..(r + 1) * n]);
                    let mut sg = T::zero();
                    let mut sgy = T::zero();
                    for j in 0..n {
                        sg += gr[j];
                        sgy += gr[j] * yr[j];
                    }
                    for j in 0..n {
                        gx[r * n + j] = inv / nf * (nf * gr[j] - sg - yr[j] * sgy);
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::LogSoftmax0(x) => {
                let y = node.value.data();
                let (k, n) = (node.value.shape()[0], node.value.shape()[1]);
                let mut gx = vec![T::zero(); y.len()];
                for j in 0..n {
                    let mut s = T::zero();
                    for c in 0..k {
                        s += gd[c * n + j];
                    }
                    for c in 0..k {
                        gx[c * n + j] = gd[c * n + j] - y[c * n + j].exp() * s;
                    }
                }
                self.acc(grads, *x, gx);
            }
            Op::Conv3d { x, w, b, geom } => {
                let (dx, dw, db) = conv::conv3d_backward(self.value(*x).data(), self.value(*w).data(), gd, geom);
                self.acc(grads, *x, dx);
                self.acc(grads, *w, dw);
                if let Some(b) = b {
                    self.acc(grads, *b, db);
                }
            }
            Op::Deconv3d { x, w, b, geom } => {
                let (dx, dw, db) = conv::deconv3d_backward(self.value(*x).data(), self.value(*w).data(), gd, geom);
                self.acc(grads, *x, dx);
                self.acc(grads, *w, dw);
                if let Some(b) = b {
                    self.acc(grads, *b, db);
                }
            }
            Op::CausalConv { x, w, b } => {
                let xs = self.shape(*x);
                let k = self.shape(*w)[1];
                let (dx, dw, db) =
                    conv::causal_conv1d_backward(self.value(*x).data(), self.value(*w).data(), gd, xs[0], xs[1], k);
                self.acc(grads, *x, dx);
                self.acc(grads, *w, dw);
                self.acc(grads, *b, db);
            }
            Op::Scan { inputs, states, dims, disc } => {
                let vals = inputs.map(|v| self.value(v).data());
                let g =
                    ssm::scan_backward(vals[0], vals[1], vals[2], vals[3], vals[4], vals[5], states, gd, *dims, *disc);
                for (v, gi) in inputs.iter().zip([g.du, g.ddelta, g.da, g.db, g.dc, g.dd]) {
                    self.acc(grads, *v, gi);
                }
            }
            Op::SpectralFilter { x, gate, spectrum } => {
                let (dx, dgate) = fft::gated_filter_backward(g, self.value(*gate), spectrum)?;
                self.acc(grads, *x, dx.into_data());
                self.acc(grads, *gate, dgate.into_data());
            }
        }
        Ok(())
    }
}

fn dims4(shape: &[usize], what: &str) -> Result<[usize; 4]> {
    match shape {
        &[c, z, y, x] => Ok([c, z, y, x]),
        s => Err(Error::InvalidShape(format!("{what}: expected [C, Z, Y, X], got {s:?}"))),
    }
}

const GELU_K: f64 = 0.044_715;

fn unary_value<T: Scalar>(kind: Unary<T>, x: T) -> T {
    match kind {
        Unary::Exp => x.exp(),
        Unary::Ln => x.ln(),
        Unary::Silu => x / (T::one() + (-x).exp()),
        Unary::Gelu => {
            let c = T::c((2.0 / std::f64::consts::PI).sqrt());
            let t = (c * (x + T::c(GELU_K) * x * x * x)).tanh();
            T::c(0.5) * x * (T::one() + t)
        }
        Unary::Softplus => softplus(x),
        Unary::LeakyRelu(s) => {
            if x > T::zero() {
                x
            } else {
                s * x
            }
        }
    }
}

fn unary_grad<T: Scalar>(kind: Unary<T>, x: T, y: T) -> T {
    match kind {
        Unary::Exp => y,
        Unary::Ln => T::one() / x,
        Unary::Silu => {
            let s = sigmoid(x);
            s * (T::one() + x * (T::one() - s))
        }
        Unary::Gelu => {
            let c = T::c((2.0 / std::f64::consts::PI).sqrt());
            let k = T::c(GELU_K);
            let t = (c * (x + k * x * x * x)).tanh();
            let half = T::c(0.5);
            half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::c(3.0) * k * x * x)
        }
        Unary::Softplus => sigmoid(x),
        Unary::LeakyRelu(s) => {
            if x > T::zero() {
                T::one()
            } else {
                s
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Floored at the smallest positive normal so the result stays a valid
/// step size where `exp(x)` underflows.
pub(crate) fn softplus<T: Scalar>(x: T) -> T {
    if x > T::c(20.0) {
        x
    } else {
        x.exp().ln_1p().max(T::min_positive_value())
    }
}

/// `C += A·B` for row-major `A: [m, k]`, `B: [k, n]`.
fn gemm<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

/// `C += A·Bᵀ` for `A: [m, n]`, `B: [k, n]`, `C: [m, k]`.
fn gemm_nt<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, n: usize, k: usize) {
    for i in 0..m {
        let arow = &a[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            let mut s = T::zero();
            for (&x, &y) in arow.iter().zip(brow) {
                s += x * y;
            }
            c[i * k + p] += s;
        }
    }
}

/// `C += Aᵀ·B` for `A: [m, k]`, `B: [m, n]`, `C: [k, n]`.
fn gemm_tn<T: Scalar>(a: &[T], b: &[T], c: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let brow = &b[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let crow = &mut c[p * n..(p + 1) * n];
            for (cv, &bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], v: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), v.to_vec()).unwrap()
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let a = tape.constant(t(&[2], &[1.0, 2.0]));
        let b = tape.constant(t(&[2], &[3.0, 4.0]));
        let c = tape.add(a, b).unwrap();
        assert_eq!(tape.value(c).data(), &[4.0, 6.0]);

        let x = tape.constant(t(&[3], &[0.5, -1.0, 7.0]));
        let ones = tape.constant(Tensor::ones(vec![3]));
        let y = tape.mul(x, ones).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let m = tape.constant(Tensor::zeros(vec![2, 3]));
        let r = tape.constant(Tensor::zeros(vec![3]));
        let s = tape.add(m, r).unwrap();
        assert_eq!(tape.shape(s), &[2, 3]);
    }

    #[test]
    fn shape_mismatch_names_both_shapes() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2]));
        let err = tape.add(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("[2]"), "{err}");
    }

    #[test]
    fn matmul_examples() {
        let mut tape = Tape::new();
        let id = tape.constant(Tensor::from_fn(vec![3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 }));
        let v = tape.constant(t(&[3, 1], &[1.0, -2.0, 5.0]));
        let r = tape.matmul(id, v).unwrap();
        assert_eq!(tape.value(r).data(), &[1.0, -2.0, 5.0]);

        let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
        let r = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(r).data(), &[3.0, 7.0]);

        let bad = tape.constant(Tensor::zeros(vec![3, 1]));
        assert!(tape.matmul(a, bad).is_err());
    }

    #[test]
    fn backward_examples() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::<f64>::from_fn(vec![2, 3], |i| i as f64));
        let s = tape.sum(x);
        let g = tape.backward(s, &mut store).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[1.0; 6]);
        assert!(tape.is_empty());

        let x = tape.input(t(&[2], &[1.0, 2.0]));
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq);
        let g = tape.backward(s, &mut store).unwrap();
        assert_eq!(g.wrt(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let x = tape.input(Tensor::<f64>::zeros(vec![2]));
        assert!(matches!(tape.backward(x, &mut store), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn broadcast_grad_has_input_shape() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let a = tape.input(Tensor::<f64>::ones(vec![2, 3]));
        let b = tape.input(t(&[3], &[1.0, 2.0, 3.0]));
        let c = tape.mul(a, b).unwrap();
        let s = tape.sum(c);
        let g = tape.backward(s, &mut store).unwrap();
        assert_eq!(g.wrt(b).unwrap().shape(), &[3]);
        assert_eq!(g.wrt(b).unwrap().data(), &[2.0, 2.0, 2.0]);
        assert_eq!(g.wrt(a).unwrap().data(), &[1.0, 2.0, 3.0, 1.0, 2.0, 3.0]);
    }

    #[test]
    fn shared_param_binds_once_and_unused_params_get_zero_grad() {
        let mut store = ParamStore::new();
        let w = store.add("w", t(&[1], &[3.0]));
        let unused = store.add("u", t(&[2], &[1.0, 1.0]));
        let mut tape = Tape::new();
        let a = tape.param(&store, w);
        let b = tape.param(&store, w);
        assert_eq!(a, b);
        let _ = tape.param(&store, unused);
        let x = tape.constant(t(&[1], &[2.0]));
        let p = tape.mul(a, x).unwrap();
        let q = tape.mul(b, x).unwrap();
        let s = tape.add(p, q).unwrap();
        let l = tape.sum(s);
        tape.backward(l, &mut store).unwrap();
        assert_eq!(store.get(w).grad.as_ref().unwrap().data(), &[4.0]);
        assert_eq!(store.get(unused).grad.as_ref().unwrap().data(), &[0.0, 0.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let gamma = tape.constant(Tensor::<f64>::ones(vec![2]));
        let beta = tape.constant(t(&[2], &[0.25, -0.5]));
        let c = tape.constant(t(&[2], &[4.0, 4.0]));
        let y = tape.layer_norm(c, gamma, beta, 1e-5).unwrap();
        assert_eq!(tape.value(y).data(), &[0.25, -0.5]);

        let zero = tape.constant(Tensor::zeros(vec![2]));
        let x = tape.constant(t(&[2], &[1.0, 3.0]));
        let y = tape.layer_norm(x, gamma, zero, 1e-5).unwrap();
        let d = tape.value(y).data();
        assert!((d[0] + 1.0).abs() < 1e-5 && (d[1] - 1.0).abs() < 1e-5);
    }
}
