//! Composite blocks: CSR Mamba layer and CSRM block, EFL layer and CSRM-F
//! block, and the residual convolution block they share.
//!
//! Both residual blocks start as exact identity maps: `ω = 0` in the CSRM
//! merge, and the trailing 1×1×1 convolution of the residual tail and the
//! EFL up-projection are zero-initialized.

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::params::{Init, ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::ssm::{from_tokens, mamba_layer, to_tokens, SsmConfig, SsmParams};
use crate::tensor::Tensor;

pub const LEAKY_SLOPE: f64 = 0.01;
pub const NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BlockKind {
    #[serde(rename = "csrm")]
    Csrm,
    #[serde(rename = "csrm-f")]
    CsrmF,
}

impl std::fmt::Display for BlockKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BlockKind::Csrm => "CSRM",
            BlockKind::CsrmF => "CSRM-F",
        })
    }
}

/// 1×1×1 convolution, `W: [C_out, C_in]`, `b: [C_out, 1]`.
#[derive(Debug, Clone)]
pub struct Pointwise {
    pub w: ParamId,
    pub b: ParamId,
    pub c_in: usize,
    pub c_out: usize,
}

impl Pointwise {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, c_in: usize, c_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), init.fan_in(&[c_out, c_in], c_in));
        let b = store.add(format!("{name}.b"), init.fan_in(&[c_out, 1], c_in));
        Pointwise { w, b, c_in, c_out }
    }

    pub fn zeroed<T: Scalar>(store: &mut ParamStore<T>, name: &str, c_in: usize, c_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros(vec![c_out, c_in]));
        let b = store.add(format!("{name}.b"), Tensor::zeros(vec![c_out, 1]));
        Pointwise { w, b, c_in, c_out }
    }

    pub fn param_count(c_in: usize, c_out: usize) -> usize {
        c_in * c_out + c_out
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        if s.is_empty() || s[0] != self.c_in {
            return Err(Error::shape("pointwise", &s, &[self.c_in]));
        }
        let rest: usize = s[1..].iter().product();
        let flat = tape.reshape(x, &[self.c_in, rest])?;
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        let y = tape.matmul(w, flat)?;
        let y = tape.add(y, b)?;
        let mut out = s;
        out[0] = self.c_out;
        tape.reshape(y, &out)
    }
}

/// Cubic 3D convolution with bias.
#[derive(Debug, Clone)]
pub struct Conv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
    pub pad: usize,
}

impl Conv {
    #[allow(clippy::too_many_arguments)]
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
        stride: usize,
        pad: usize,
    ) -> Self {
        let fan = c_in * k * k * k;
        let w = store.add(format!("{name}.w"), init.fan_in(&[c_out, c_in, k, k, k], fan));
        let b = store.add(format!("{name}.b"), init.fan_in(&[c_out], fan));
        Conv { w, b, stride, pad }
    }

    pub fn param_count(c_in: usize, c_out: usize, k: usize) -> usize {
        c_out * c_in * k * k * k + c_out
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.conv3d(x, w, Some(b), self.stride, self.pad)
    }
}

/// Transposed convolution with kernel = stride (non-overlapping upsampling).
#[derive(Debug, Clone)]
pub struct Deconv {
    pub w: ParamId,
    pub b: ParamId,
    pub stride: usize,
}

impl Deconv {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        c_in: usize,
        c_out: usize,
        k: usize,
    ) -> Self {
        let fan = c_out * k * k * k;
        let w = store.add(format!("{name}.w"), init.fan_in(&[c_in, c_out, k, k, k], fan));
        let b = store.add(format!("{name}.b"), init.fan_in(&[c_out], fan));
        Deconv { w, b, stride: k }
    }

    pub fn param_count(c_in: usize, c_out: usize, k: usize) -> usize {
        c_in * c_out * k * k * k + c_out
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let w = tape.param(store, self.w);
        let b = tape.param(store, self.b);
        tape.deconv3d(x, w, Some(b), self.stride)
    }
}

/// Per-channel instance norm with affine, over a `[C, Z, Y, X]` volume.
#[derive(Debug, Clone)]
pub struct InstanceNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub channels: usize,
}

impl InstanceNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(vec![channels, 1]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![channels, 1]));
        InstanceNorm { gamma, beta, channels }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let s = tape.shape(x).to_vec();
        let rest: usize = s[1..].iter().product();
        let flat = tape.reshape(x, &[s[0], rest])?;
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let y = tape.layer_norm(flat, g, b, T::c(NORM_EPS))?;
        tape.reshape(y, &s)
    }
}

/// Layer norm over the channel axis of a `[C, Z, Y, X]` volume.
#[derive(Debug, Clone)]
pub struct ChannelNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl ChannelNorm {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, name: &str, channels: usize) -> Self {
        let gamma = store.add(format!("{name}.gamma"), Tensor::ones(vec![channels]));
        let beta = store.add(format!("{name}.beta"), Tensor::zeros(vec![channels]));
        ChannelNorm { gamma, beta }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let dims = spatial_of(tape, x)?;
        let tokens = to_tokens(tape, x)?;
        let g = tape.param(store, self.gamma);
        let b = tape.param(store, self.beta);
        let y = tape.layer_norm(tokens, g, b, T::c(NORM_EPS))?;
        from_tokens(tape, y, dims)
    }
}

/// conv3³ → IN → LeakyReLU → conv3³ → IN, plus identity, → LeakyReLU.
#[derive(Debug, Clone)]
pub struct ResBlock {
    pub conv1: Conv,
    pub norm1: InstanceNorm,
    pub conv2: Conv,
    pub norm2: InstanceNorm,
}

impl ResBlock {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, c: usize) -> Self {
        ResBlock {
            conv1: Conv::new(store, init, &format!("{name}.conv1"), c, c, 3, 1, 1),
            norm1: InstanceNorm::new(store, &format!("{name}.norm1"), c),
            conv2: Conv::new(store, init, &format!("{name}.conv2"), c, c, 3, 1, 1),
            norm2: InstanceNorm::new(store, &format!("{name}.norm2"), c),
        }
    }

    pub fn param_count(c: usize) -> usize {
        2 * Conv::param_count(c, c, 3) + 4 * c
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let slope = T::c(LEAKY_SLOPE);
        let h = self.conv1.forward(tape, store, x)?;
        let h = self.norm1.forward(tape, store, h)?;
        let h = tape.leaky_relu(h, slope);
        let h = self.conv2.forward(tape, store, h)?;
        let h = self.norm2.forward(tape, store, h)?;
        let h = tape.add(h, x)?;
        Ok(tape.leaky_relu(h, slope))
    }
}

/// `x + Conv1³(ResBlock(x))` with the trailing conv zero-initialized.
#[derive(Debug, Clone)]
pub struct ResidualTail {
    pub res: ResBlock,
    pub proj: Pointwise,
}

impl ResidualTail {
    pub fn new<T: Scalar>(store: &mut ParamStore<T>, init: &mut Init, name: &str, c: usize) -> Self {
        ResidualTail {
            res: ResBlock::new(store, init, &format!("{name}.res"), c),
            proj: Pointwise::zeroed(store, &format!("{name}.proj"), c, c),
        }
    }

    pub fn param_count(c: usize) -> usize {
        ResBlock::param_count(c) + Pointwise::param_count(c, c)
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        let r = self.res.forward(tape, store, x)?;
        let r = self.proj.forward(tape, store, r)?;
        tape.add(x, r)
    }
}

fn spatial_of<T: Scalar>(tape: &Tape<T>, x: Var) -> Result<[usize; 3]> {
    match tape.shape(x) {
        &[_, z, y, xx] => Ok([z, y, xx]),
        s => Err(Error::InvalidShape(format!("expected [C, Z, Y, X], got {s:?}"))),
    }
}

/// Channel squeeze-reinforce Mamba block.
#[derive(Debug, Clone)]
pub struct CsrmBlock {
    pub channels: usize,
    /// One Mamba instance shared by the squeeze and reinforce branches.
    pub mamba: SsmParams,
    pub down: Pointwise,
    pub up: Pointwise,
    pub omega: ParamId,
    pub tail: ResidualTail,
}

impl CsrmBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        c: usize,
        ratio: usize,
        ssm: SsmConfig,
    ) -> Result<Self> {
        check_ratio(c, ratio)?;
        Ok(CsrmBlock {
            channels: c,
            mamba: SsmParams::new(store, init, &format!("{name}.mamba"), c, ssm),
            down: Pointwise::new(store, init, &format!("{name}.down"), c, c / ratio),
            up: Pointwise::new(store, init, &format!("{name}.up"), c / ratio, c),
            omega: store.add(format!("{name}.omega"), Tensor::zeros(vec![1])),
            tail: ResidualTail::new(store, init, &format!("{name}.tail"), c),
        })
    }

    /// Closed-form trainable scalar count.
    pub fn param_count(c: usize, ratio: usize, ssm: &SsmConfig) -> usize {
        ssm.param_count(c)
            + Pointwise::param_count(c, c / ratio)
            + Pointwise::param_count(c / ratio, c)
            + 1
            + ResidualTail::param_count(c)
    }

    /// `M = F + ω·(Mamba(Up(Down(F))) + Mamba(F))`.
    pub fn layer<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, f: Var) -> Result<Var> {
        let c = tape.shape(f).first().copied().unwrap_or(0);
        if c != self.channels {
            return Err(Error::shape("csrm_layer", tape.shape(f), &[self.channels]));
        }
        let dims = spatial_of(tape, f)?;

        let sq = self.down.forward(tape, store, f)?;
        let sq = self.up.forward(tape, store, sq)?;
        let sq = to_tokens(tape, sq)?;
        let ms = mamba_layer(tape, store, &self.mamba, sq)?;

        let re = to_tokens(tape, f)?;
        let me = mamba_layer(tape, store, &self.mamba, re)?;

        let sum = tape.add(ms, me)?;
        let sum = from_tokens(tape, sum, dims)?;
        let omega = tape.param(store, self.omega);
        let scaled = tape.mul(sum, omega)?;
        tape.add(f, scaled)
    }

    /// `M_out = M + Conv(ResBlock(M))` with `M = layer(F)`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, f: Var) -> Result<Var> {
        let m = self.layer(tape, store, f)?;
        self.tail.forward(tape, store, m)
    }
}

/// Efficient frequency-domain learning layer.
#[derive(Debug, Clone)]
pub struct EflLayer {
    pub channels: usize,
    /// Spatial extents `[Z, Y, X]` the gate was registered at.
    pub dims: [usize; 3],
    pub norm: ChannelNorm,
    pub gate: ParamId,
    pub down: Pointwise,
    pub up: Pointwise,
}

impl EflLayer {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        c: usize,
        ratio: usize,
        dims: [usize; 3],
    ) -> Result<Self> {
        check_ratio(c, ratio)?;
        for (axis, &e) in dims.iter().enumerate() {
            if !e.is_power_of_two() {
                return Err(Error::NotPowerOfTwo { axis: axis + 1, extent: e });
            }
        }
        Ok(EflLayer {
            channels: c,
            dims,
            norm: ChannelNorm::new(store, &format!("{name}.norm"), c),
            gate: store.add(format!("{name}.gate"), Tensor::ones(vec![c, dims[0], dims[1], dims[2]])),
            down: Pointwise::new(store, init, &format!("{name}.down"), c, c / ratio),
            up: Pointwise::zeroed(store, &format!("{name}.up"), c / ratio, c),
        })
    }

    pub fn param_count(c: usize, ratio: usize, dims: [usize; 3]) -> usize {
        2 * c
            + c * dims.iter().product::<usize>()
            + Pointwise::param_count(c, c / ratio)
            + Pointwise::param_count(c / ratio, c)
    }

    /// Filtered signal `m' = IFFT(A ⊗ FFT(LayerNorm(S_I)))`.
    pub fn filtered<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, s: Var) -> Result<Var> {
        let dims = spatial_of(tape, s)?;
        if dims != self.dims || tape.shape(s)[0] != self.channels {
            return Err(Error::Config(format!(
                "EFL layer registered for {}×{:?}, got input {:?}",
                self.channels,
                self.dims,
                tape.shape(s)
            )));
        }
        let n = self.norm.forward(tape, store, s)?;
        let gate = tape.param(store, self.gate);
        tape.spectral_filter(n, gate)
    }

    /// `S_out = S_I + Up(GELU(Down(m')))`.
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, s: Var) -> Result<Var> {
        let m = self.filtered(tape, store, s)?;
        let h = self.down.forward(tape, store, m)?;
        let h = tape.gelu(h);
        let h = self.up.forward(tape, store, h)?;
        tape.add(s, h)
    }
}

/// EFL layer followed (optionally) by the same residual tail as CSRM.
#[derive(Debug, Clone)]
pub struct CsrmFBlock {
    pub efl: EflLayer,
    pub tail: Option<ResidualTail>,
}

impl CsrmFBlock {
    pub fn new<T: Scalar>(
        store: &mut ParamStore<T>,
        init: &mut Init,
        name: &str,
        c: usize,
        ratio: usize,
        dims: [usize; 3],
        with_tail: bool,
    ) -> Result<Self> {
        let efl = EflLayer::new(store, init, &format!("{name}.efl"), c, ratio, dims)?;
        let tail = with_tail.then(|| ResidualTail::new(store, init, &format!("{name}.tail"), c));
        Ok(CsrmFBlock { efl, tail })
    }

    pub fn param_count(c: usize, ratio: usize, dims: [usize; 3], with_tail: bool) -> usize {
        EflLayer::param_count(c, ratio, dims) + if with_tail { ResidualTail::param_count(c) } else { 0 }
    }

    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, s: Var) -> Result<Var> {
        let out = self.efl.forward(tape, store, s)?;
        match &self.tail {
            Some(t) => t.forward(tape, store, out),
            None => Ok(out),
        }
    }
}

#[derive(Debug, Clone)]
pub enum Block {
    Csrm(CsrmBlock),
    CsrmF(CsrmFBlock),
}

impl Block {
    pub fn forward<T: Scalar>(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        match self {
            Block::Csrm(b) => b.forward(tape, store, x),
            Block::CsrmF(b) => b.forward(tape, store, x),
        }
    }

    pub fn kind(&self) -> BlockKind {
        match self {
            Block::Csrm(_) => BlockKind::Csrm,
            Block::CsrmF(_) => BlockKind::CsrmF,
        }
    }
}

fn check_ratio(c: usize, ratio: usize) -> Result<()> {
    if ratio == 0 || !c.is_multiple_of(ratio) || c / ratio == 0 {
        return Err(Error::Config(format!("squeeze ratio {ratio} does not divide {c} channels")));
    }
    Ok(())
}
