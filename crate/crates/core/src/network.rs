//! Four-stage U-shaped segmentation network.
//!
//! Encoder: patch-embedding conv (kernel = stride = `patch`), then one block
//! per stage with a stride-2 conv between stages that doubles channels.
//! Decoder: CSRM on the deepest features, then three stages of
//! `deconv ×2 → concat skip → 1×1×1 fuse → block` (CSRM, CSRM, residual conv
//! block), a `patch`-stride deconv back to full resolution, concatenation
//! with the raw input, and a 1×1×1 head to class logits.

use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::blocks::{Block, BlockKind, Conv, CsrmBlock, CsrmFBlock, Deconv, Pointwise, ResBlock};
use crate::error::{Error, Result};
use crate::params::{Init, ParamStore};
use crate::scalar::Scalar;
use crate::ssm::SsmConfig;
use crate::tensor::Tensor;

pub const STAGES: usize = 4;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Preset {
    Emnet,
    VariantA,
    VariantB,
    VariantC,
}

impl Preset {
    pub const ALL: [Preset; 4] = [Preset::Emnet, Preset::VariantA, Preset::VariantB, Preset::VariantC];

    pub fn stages(self) -> [BlockKind; STAGES] {
        use BlockKind::{Csrm as M, CsrmF as F};
        match self {
            Preset::Emnet => [M, M, F, F],
            Preset::VariantA => [M, M, M, M],
            Preset::VariantB => [F, F, M, M],
            Preset::VariantC => [F, F, F, F],
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Preset::Emnet => "emnet",
            Preset::VariantA => "variant-a",
            Preset::VariantB => "variant-b",
            Preset::VariantC => "variant-c",
        }
    }
}

impl FromStr for Preset {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Preset::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown preset '{s}' (emnet, variant-a, variant-b, variant-c)")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkConfig {
    /// Input extents `[X, Y, Z]`.
    pub input: [usize; 3],
    pub patch: usize,
    pub base_channels: usize,
    pub classes: usize,
    pub stages: [BlockKind; STAGES],
    pub squeeze_ratio: usize,
    /// Append the residual conv tail after the EFL layer in CSRM-F blocks.
    pub efl_tail: bool,
    /// Concatenate the raw input with the upsampled features before the head.
    pub input_skip: bool,
    pub ssm: SsmConfig,
    pub seed: u64,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            input: [32, 32, 32],
            patch: 4,
            base_channels: 8,
            classes: 5,
            stages: Preset::Emnet.stages(),
            squeeze_ratio: 2,
            efl_tail: true,
            input_skip: true,
            ssm: SsmConfig::default(),
            seed: 0,
        }
    }
}

impl NetworkConfig {
    pub fn preset(p: Preset) -> Self {
        NetworkConfig { stages: p.stages(), ..Default::default() }
    }

    /// 128³ input, patch 4, 14 classes, width chosen so the default preset
    /// has roughly 39M parameters.
    pub fn full_scale(p: Preset) -> Self {
        NetworkConfig {
            input: [128, 128, 128],
            base_channels: FULL_SCALE_CHANNELS,
            classes: 14,
            ..NetworkConfig::preset(p)
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: NetworkConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    /// Input extents in memory order `[Z, Y, X]`.
    pub fn input_dims(&self) -> [usize; 3] {
        [self.input[2], self.input[1], self.input[0]]
    }

    pub fn stage_channels(&self, stage: usize) -> usize {
        self.base_channels << stage
    }

    /// Spatial extents `[Z, Y, X]` of encoder stage `stage` (0-based).
    pub fn stage_dims(&self, stage: usize) -> [usize; 3] {
        self.input_dims().map(|e| e / (self.patch << stage))
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if self.patch == 0 || self.base_channels == 0 {
            return bad("patch and base_channels must be positive".into());
        }
        if !(2..=255).contains(&self.classes) {
            return bad(format!("classes must be in 2..=255, got {}", self.classes));
        }
        let unit = self.patch << (STAGES - 1);
        for (axis, &e) in self.input.iter().enumerate() {
            if e == 0 || e % unit != 0 {
                return bad(format!("input extent {e} on axis {axis} must be a positive multiple of patch·8 = {unit}"));
            }
        }
        for stage in 0..STAGES {
            let c = self.stage_channels(stage);
            if self.squeeze_ratio == 0 || !c.is_multiple_of(self.squeeze_ratio) {
                return bad(format!("squeeze ratio {} does not divide {c} channels", self.squeeze_ratio));
            }
            if self.stages[stage] == BlockKind::CsrmF {
                for (axis, &e) in self.stage_dims(stage).iter().enumerate() {
                    if !e.is_power_of_two() {
                        return Err(Error::NotPowerOfTwo { axis: 3 - axis, extent: e });
                    }
                }
            }
        }
        let s = &self.ssm;
        if s.d_state == 0 || s.expand == 0 || s.conv_width == 0 {
            return bad("ssm d_state, expand and conv_width must be positive".into());
        }
        if !(s.dt_min > 0.0 && s.dt_min <= s.dt_max) {
            return bad(format!("ssm step range [{}, {}] is invalid", s.dt_min, s.dt_max));
        }
        Ok(())
    }
}

/// Base width that puts the default preset near 39M parameters at 128³.
pub const FULL_SCALE_CHANNELS: usize = 60;

/// Which blocks run in a forward pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ForwardMode {
    #[default]
    Full,
    /// CSRM and CSRM-F blocks are replaced by the identity.
    Skeleton,
    /// Every block, including the final residual conv block, is skipped.
    Bare,
}

#[derive(Debug, Clone)]
pub struct Network<T> {
    pub config: NetworkConfig,
    pub store: ParamStore<T>,
    stem: Conv,
    encoder: Vec<Block>,
    downs: Vec<Conv>,
    bottom: CsrmBlock,
    ups: Vec<Deconv>,
    fuses: Vec<Pointwise>,
    decoder: Vec<CsrmBlock>,
    last: ResBlock,
    final_up: Deconv,
    head: Pointwise,
}

impl<T: Scalar> Network<T> {
    pub fn new(config: NetworkConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut init = Init::new(config.seed);
        let (st, init_) = (&mut store, &mut init);
        let c0 = config.base_channels;
        let r = config.squeeze_ratio;
        let p = config.patch;

        let stem = Conv::new(st, init_, "stem", 1, c0, p, p, 0);
        let mut encoder = Vec::new();
        let mut downs = Vec::new();
        for stage in 0..STAGES {
            let c = config.stage_channels(stage);
            let name = format!("enc{}", stage + 1);
            encoder.push(match config.stages[stage] {
                BlockKind::Csrm => Block::Csrm(CsrmBlock::new(st, init_, &name, c, r, config.ssm)?),
                BlockKind::CsrmF => {
                    Block::CsrmF(CsrmFBlock::new(st, init_, &name, c, r, config.stage_dims(stage), config.efl_tail)?)
                }
            });
            if stage + 1 < STAGES {
                downs.push(Conv::new(st, init_, &format!("down{}", stage + 1), c, 2 * c, 2, 2, 0));
            }
        }
        let bottom = CsrmBlock::new(st, init_, "dec4", config.stage_channels(3), r, config.ssm)?;
        let mut ups = Vec::new();
        let mut fuses = Vec::new();
        let mut decoder = Vec::new();
        for stage in 0..STAGES - 1 {
            let c = config.stage_channels(stage);
            let tag = stage + 1;
            ups.push(Deconv::new(st, init_, &format!("up{tag}"), 2 * c, c, 2));
            fuses.push(Pointwise::new(st, init_, &format!("fuse{tag}"), 2 * c, c));
            if stage > 0 {
                decoder.push(CsrmBlock::new(st, init_, &format!("dec{tag}"), c, r, config.ssm)?);
            }
        }
        let last = ResBlock::new(st, init_, "dec1", c0);
        let final_up = Deconv::new(st, init_, "final_up", c0, c0, p);
        let head = Pointwise::new(st, init_, "head", head_width(&config), config.classes);
        Ok(Network { config, store, stem, encoder, downs, bottom, ups, fuses, decoder, last, final_up, head })
    }

    /// Logits `[K, Z, Y, X]` for an input `[1, Z, Y, X]`.
    pub fn forward(&self, tape: &mut Tape<T>, x: Var) -> Result<Var> {
        self.forward_mode(tape, x, ForwardMode::Full)
    }

    pub fn forward_mode(&self, tape: &mut Tape<T>, x: Var, mode: ForwardMode) -> Result<Var> {
        self.run(tape, &self.store, x, mode)
    }

    /// Forward pass reading parameter values from `store`, which must have
    /// this network's layout.
    pub fn forward_with_store(&self, tape: &mut Tape<T>, store: &ParamStore<T>, x: Var) -> Result<Var> {
        self.run(tape, store, x, ForwardMode::Full)
    }

    fn run(&self, tape: &mut Tape<T>, st: &ParamStore<T>, x: Var, mode: ForwardMode) -> Result<Var> {
        let [z, y, xx] = self.config.input_dims();
        let expect = [1, z, y, xx];
        if tape.shape(x) != expect {
            return Err(Error::shape("network input", tape.shape(x), &expect));
        }
        let full = mode == ForwardMode::Full;
        let keep_last = mode != ForwardMode::Bare;

        let mut h = self.stem.forward(tape, st, x)?;
        let mut skips = Vec::with_capacity(STAGES);
        for stage in 0..STAGES {
            if full {
                h = self.encoder[stage].forward(tape, st, h)?;
            }
            skips.push(h);
            if stage + 1 < STAGES {
                h = self.downs[stage].forward(tape, st, h)?;
            }
        }
        if full {
            h = self.bottom.forward(tape, st, h)?;
        }
        for stage in (0..STAGES - 1).rev() {
            let u = self.ups[stage].forward(tape, st, h)?;
            let cat = tape.concat(&[u, skips[stage]])?;
            h = self.fuses[stage].forward(tape, st, cat)?;
            h = match stage {
                0 if keep_last => self.last.forward(tape, st, h)?,
                s if full && s > 0 => self.decoder[s - 1].forward(tape, st, h)?,
                _ => h,
            };
        }
        let up = self.final_up.forward(tape, st, h)?;
        let features = if self.config.input_skip { tape.concat(&[up, x])? } else { up };
        self.head.forward(tape, st, features)
    }

    /// Logits for a single image `[1, Z, Y, X]` on a fresh tape.
    pub fn predict(&self, image: &Tensor<T>) -> Result<Tensor<T>> {
        let mut tape = Tape::new();
        let x = tape.constant(image.clone());
        let y = self.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }

    pub fn encoder_kinds(&self) -> Vec<BlockKind> {
        self.encoder.iter().map(Block::kind).collect()
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }
}

fn head_width(cfg: &NetworkConfig) -> usize {
    cfg.base_channels + usize::from(cfg.input_skip)
}

/// Closed-form parameter breakdown, in registration order.
pub fn param_breakdown(cfg: &NetworkConfig) -> Vec<(String, usize)> {
    let c0 = cfg.base_channels;
    let r = cfg.squeeze_ratio;
    let mut out = vec![("stem".to_string(), Conv::param_count(1, c0, cfg.patch))];
    for stage in 0..STAGES {
        let c = cfg.stage_channels(stage);
        let n = match cfg.stages[stage] {
            BlockKind::Csrm => CsrmBlock::param_count(c, r, &cfg.ssm),
            BlockKind::CsrmF => CsrmFBlock::param_count(c, r, cfg.stage_dims(stage), cfg.efl_tail),
        };
        out.push((format!("enc{} ({})", stage + 1, cfg.stages[stage]), n));
        if stage + 1 < STAGES {
            out.push((format!("down{}", stage + 1), Conv::param_count(c, 2 * c, 2)));
        }
    }
    out.push(("dec4".into(), CsrmBlock::param_count(cfg.stage_channels(3), r, &cfg.ssm)));
    for stage in (0..STAGES - 1).rev() {
        let c = cfg.stage_channels(stage);
        let tag = stage + 1;
        out.push((format!("up{tag}"), Deconv::param_count(2 * c, c, 2)));
        out.push((format!("fuse{tag}"), Pointwise::param_count(2 * c, c)));
        let block = if stage == 0 { ResBlock::param_count(c) } else { CsrmBlock::param_count(c, r, &cfg.ssm) };
        out.push((format!("dec{tag}"), block));
    }
    out.push(("final_up".into(), Deconv::param_count(c0, c0, cfg.patch)));
    out.push(("head".into(), Pointwise::param_count(head_width(cfg), cfg.classes)));
    out
}

/// Trainable scalar count, without instantiating the network.
pub fn count_params(cfg: &NetworkConfig) -> usize {
    param_breakdown(cfg).iter().map(|(_, n)| n).sum()
}

/// Multiply-add count (×2) of one forward pass; elementwise ops excluded.
pub fn count_flops(cfg: &NetworkConfig) -> f64 {
    let vox = |d: [usize; 3]| d.iter().product::<usize>() as f64;
    let conv = |ci: usize, co: usize, k: usize, out: f64| 2.0 * (ci * co * k * k * k) as f64 * out;
    let pw = |ci: usize, co: usize, v: f64| 2.0 * (ci * co) as f64 * v;
    let mamba = |c: usize, v: f64| {
        let s = &cfg.ssm;
        let di = s.expand * c;
        let n = s.d_state;
        let mm = 2 * c * di + di * di + 2 * di * n + di * c;
        2.0 * v * (mm + di * s.conv_width + 3 * di * n) as f64
    };
    let resblock = |c: usize, v: f64| 2.0 * conv(c, c, 3, v);
    let csrm = |c: usize, v: f64| {
        let r = cfg.squeeze_ratio;
        pw(c, c / r, v) + pw(c / r, c, v) + 2.0 * mamba(c, v) + resblock(c, v) + pw(c, c, v)
    };
    let efl = |c: usize, v: f64| {
        let r = cfg.squeeze_ratio;
        let fft = if v > 1.0 { 2.0 * 5.0 * v * v.log2() * c as f64 } else { 0.0 };
        let tail = if cfg.efl_tail { resblock(c, v) + pw(c, c, v) } else { 0.0 };
        fft + 2.0 * c as f64 * v + pw(c, c / r, v) + pw(c / r, c, v) + tail
    };

    let c0 = cfg.base_channels;
    let full = vox(cfg.input_dims());
    let mut total = conv(1, c0, cfg.patch, vox(cfg.stage_dims(0)));
    for stage in 0..STAGES {
        let c = cfg.stage_channels(stage);
        let v = vox(cfg.stage_dims(stage));
        total += match cfg.stages[stage] {
            BlockKind::Csrm => csrm(c, v),
            BlockKind::CsrmF => efl(c, v),
        };
        if stage + 1 < STAGES {
            total += conv(c, 2 * c, 2, vox(cfg.stage_dims(stage + 1)));
        }
    }
    total += csrm(cfg.stage_channels(3), vox(cfg.stage_dims(3)));
    for stage in (0..STAGES - 1).rev() {
        let c = cfg.stage_channels(stage);
        let v = vox(cfg.stage_dims(stage));
        total += conv(2 * c, c, 2, vox(cfg.stage_dims(stage + 1))) + pw(2 * c, c, v);
        total += if stage == 0 { resblock(c, v) } else { csrm(c, v) };
    }
    total += conv(c0, c0, cfg.patch, vox(cfg.stage_dims(0))) + pw(head_width(cfg), cfg.classes, full);
    total
}
