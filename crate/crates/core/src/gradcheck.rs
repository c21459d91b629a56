//! Central-difference gradient checks in `f64`.
//!
//! Each check projects the function output onto a fixed random direction
//! `R` (unit expected norm) and compares `∂⟨f, R⟩/∂θ` from the tape against
//! `(L(θ + h) − L(θ − h)) / 2h` entry by entry, plus once along a random
//! direction through every input and parameter jointly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::Serialize;

use crate::autodiff::{Tape, Var};
use crate::blocks::{CsrmBlock, CsrmFBlock, EflLayer};
use crate::error::Result;
use crate::network::{Network, NetworkConfig, Preset};
use crate::params::{Init, ParamStore};
use crate::ssm::{mamba_layer, Discretization, SsmConfig, SsmParams};
use crate::tensor::Tensor;
use crate::train::dice_ce_loss;

pub const STEP: f64 = 1e-5;
/// Denominator floor of the relative error.
pub const FLOOR: f64 = 1e-4;

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(FLOOR)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coverage {
    All,
    /// The largest-gradient entry plus this many random entries per tensor.
    Sampled(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CheckReport {
    pub name: String,
    pub checked: usize,
    pub worst_rel: f64,
    pub worst_at: String,
}

type Func<'a> = dyn Fn(&mut Tape<f64>, &ParamStore<f64>, &[Var]) -> Result<Var> + 'a;

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(rng)
}

fn projected(tape: &Tape<f64>, out: Var, r: &Tensor<f64>) -> f64 {
    tape.value(out).data().iter().zip(r.data()).map(|(a, b)| a * b).sum()
}

fn eval(f: &Func, store: &ParamStore<f64>, inputs: &[Tensor<f64>], r: &Tensor<f64>) -> Result<f64> {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.constant(x.clone())).collect();
    let out = f(&mut tape, store, &vars)?;
    Ok(projected(&tape, out, r))
}

/// Location of one scalar being checked.
#[derive(Clone, Copy)]
enum Slot {
    Input(usize, usize),
    Param(usize, usize),
}

fn slot_mut<'a>(store: &'a mut ParamStore<f64>, inputs: &'a mut [Tensor<f64>], s: Slot) -> &'a mut f64 {
    match s {
        Slot::Input(t, i) => &mut inputs[t].data_mut()[i],
        Slot::Param(t, i) => {
            let id = store.ids().nth(t).expect("param index");
            &mut store.get_mut(id).value.data_mut()[i]
        }
    }
}

pub fn check(
    name: &str,
    store: &mut ParamStore<f64>,
    inputs: &[Tensor<f64>],
    f: &Func,
    coverage: Coverage,
    seed: u64,
) -> Result<CheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut inputs = inputs.to_vec();

    // analytic pass
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|x| tape.input(x.clone())).collect();
    let out = f(&mut tape, store, &vars)?;
    let n_out = tape.value(out).numel();
    let scale = 1.0 / (n_out as f64).sqrt();
    let r = Tensor::from_fn(tape.shape(out).to_vec(), |_| scale * gauss(&mut rng));
    let rv = tape.constant(r.clone());
    let l = tape.mul(out, rv)?;
    let l = tape.sum(l);
    let grads = tape.backward(l, store)?;

    let mut analytic: Vec<(String, Vec<f64>, bool)> = Vec::new();
    for (i, v) in vars.iter().enumerate() {
        let g = grads.wrt(*v).map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; inputs[i].numel()]);
        analytic.push((format!("input{i}"), g, true));
    }
    for (_, p) in store.iter() {
        let g = p.grad.as_ref().map(|g| g.data().to_vec()).unwrap_or_else(|| vec![0.0; p.value.numel()]);
        analytic.push((p.name.clone(), g, false));
    }
    store.zero_grads();

    let mut report = CheckReport { name: name.to_string(), checked: 0, worst_rel: 0.0, worst_at: String::new() };
    let note = |report: &mut CheckReport, at: String, a: f64, n: f64| {
        let e = rel_err(a, n);
        report.checked += 1;
        if e > report.worst_rel || report.worst_at.is_empty() {
            report.worst_rel = e;
            report.worst_at = format!("{at} (analytic {a:.6e}, numeric {n:.6e})");
        }
    };

    let n_inputs = inputs.len();
    for (t, (label, g, is_input)) in analytic.iter().enumerate() {
        let idx: Vec<usize> = match coverage {
            Coverage::All => (0..g.len()).collect(),
            Coverage::Sampled(m) => {
                let top = (0..g.len()).max_by(|&a, &b| g[a].abs().total_cmp(&g[b].abs())).unwrap_or(0);
                let mut v = vec![top];
                v.extend((0..m.min(g.len().saturating_sub(1))).map(|_| rng.random_range(0..g.len())));
                v
            }
        };
        for i in idx {
            let slot = if *is_input { Slot::Input(t, i) } else { Slot::Param(t - n_inputs, i) };
            let orig = *slot_mut(store, &mut inputs, slot);
            *slot_mut(store, &mut inputs, slot) = orig + STEP;
            let up = eval(f, store, &inputs, &r)?;
            *slot_mut(store, &mut inputs, slot) = orig - STEP;
            let down = eval(f, store, &inputs, &r)?;
            *slot_mut(store, &mut inputs, slot) = orig;
            note(&mut report, format!("{label}[{i}]"), g[i], (up - down) / (2.0 * STEP));
        }
    }

    // joint direction
    let dirs: Vec<Vec<f64>> = analytic.iter().map(|(_, g, _)| g.iter().map(|_| gauss(&mut rng)).collect()).collect();
    let norm = dirs.iter().flatten().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
    let along: f64 =
        analytic.iter().zip(&dirs).map(|((_, g, _), d)| g.iter().zip(d).map(|(a, b)| a * b).sum::<f64>()).sum::<f64>()
            / norm;
    let shift = |store: &mut ParamStore<f64>, inputs: &mut [Tensor<f64>], h: f64| {
        for (t, d) in dirs.iter().enumerate() {
            for (i, &v) in d.iter().enumerate() {
                let slot = if t < n_inputs { Slot::Input(t, i) } else { Slot::Param(t - n_inputs, i) };
                *slot_mut(store, inputs, slot) += h * v / norm;
            }
        }
    };
    let saved_store = store.clone();
    let saved_inputs = inputs.clone();
    shift(store, &mut inputs, STEP);
    let up = eval(f, store, &inputs, &r)?;
    *store = saved_store.clone();
    inputs.clone_from(&saved_inputs);
    shift(store, &mut inputs, -STEP);
    let down = eval(f, store, &inputs, &r)?;
    *store = saved_store;
    note(&mut report, "joint direction".into(), along, (up - down) / (2.0 * STEP));
    Ok(report)
}

fn uniform(init: &mut Init, shape: &[usize]) -> Tensor<f64> {
    init.uniform(shape, 1.0)
}

/// Every block-level check, plus the end-to-end network check when
/// `with_network` is set.
pub fn suite(with_network: bool) -> Result<Vec<CheckReport>> {
    let mut out = Vec::new();
    let mut init = Init::new(11);

    // conv3d, stride 2, pad 1
    let mut store = ParamStore::new();
    let w = store.add("w", uniform(&mut init, &[3, 2, 3, 3, 3]));
    let b = store.add("b", uniform(&mut init, &[3]));
    let x = uniform(&mut init, &[2, 5, 5, 5]);
    out.push(check(
        "conv3d",
        &mut store,
        &[x],
        &|t: &mut Tape<f64>, s: &ParamStore<f64>, v: &[Var]| {
            let (w, b) = (t.param(s, w), t.param(s, b));
            t.conv3d(v[0], w, Some(b), 2, 1)
        },
        Coverage::All,
        1,
    )?);

    // deconv3d, stride 2
    let mut store = ParamStore::new();
    let w = store.add("w", uniform(&mut init, &[3, 2, 2, 2, 2]));
    let b = store.add("b", uniform(&mut init, &[2]));
    let x = uniform(&mut init, &[3, 3, 3, 3]);
    out.push(check(
        "deconv3d",
        &mut store,
        &[x],
        &|t: &mut Tape<f64>, s: &ParamStore<f64>, v: &[Var]| {
            let (w, b) = (t.param(s, w), t.param(s, b));
            t.deconv3d(v[0], w, Some(b), 2)
        },
        Coverage::All,
        2,
    )?);

    // layer norm
    let mut store = ParamStore::new();
    let g = store.add("gamma", uniform(&mut init, &[5]));
    let b = store.add("beta", uniform(&mut init, &[5]));
    let x = uniform(&mut init, &[6, 5]);
    out.push(check(
        "layer_norm",
        &mut store,
        &[x],
        &|t: &mut Tape<f64>, s: &ParamStore<f64>, v: &[Var]| {
            let (g, b) = (t.param(s, g), t.param(s, b));
            t.layer_norm(v[0], g, b, 1e-5)
        },
        Coverage::All,
        3,
    )?);

    // mamba layer under both discretizations
    for (disc, tag) in [(Discretization::Euler, "euler"), (Discretization::Zoh, "zoh")] {
        let cfg = SsmConfig { d_state: 4, discretization: disc, ..Default::default() };
        let mut store = ParamStore::new();
        let p = SsmParams::new(&mut store, &mut init, "m", 4, cfg);
        let x = uniform(&mut init, &[12, 4]);
        out.push(check(
            &format!("mamba_layer ({tag})"),
            &mut store,
            &[x],
            &|t: &mut Tape<f64>, s: &ParamStore<f64>, v: &[Var]| mamba_layer(t, s, &p, v[0]),
            Coverage::All,
            4,
        )?);
    }

    // blocks, perturbed away from the identity initialization
    let small_ssm = SsmConfig { d_state: 4, ..Default::default() };
    let mut store = ParamStore::new();
    let blk = CsrmBlock::new(&mut store, &mut init, "csrm", 4, 2, small_ssm)?;
    store.perturb(5, 0.2);
    let x = uniform(&mut init, &[4, 2, 2, 4]);
    out.push(check(
        "csrm_block",
        &mut store,
        &[x],
        &|t: &mut Tape<f64>, s: &ParamStore<f64>, v: &[Var]| blk.forward(t, s, v[0]),
        Coverage::All,
        5,
    )?);

    let mut store = ParamStore::new();
    let efl = EflLayer::new(&mut store, &mut init, "efl", 4, 2, [2, 4, 4])?;
    store.perturb(6, 0.2);
    let x = uniform(&mut init, &[4, 2, 4, 4]);
    out.push(check(
        "efl_layer",
        &mut store,
        &[x],
        &|t: &mut Tape<f64>, s: &ParamStore<f64>, v: &[Var]| efl.forward(t, s, v[0]),
        Coverage::All,
        6,
    )?);

    let mut store = ParamStore::new();
    let blk_f = CsrmFBlock::new(&mut store, &mut init, "csrmf", 4, 2, [2, 2, 4], true)?;
    store.perturb(7, 0.2);
    let x = uniform(&mut init, &[4, 2, 2, 4]);
    out.push(check(
        "csrm_f_block",
        &mut store,
        &[x],
        &|t: &mut Tape<f64>, s: &ParamStore<f64>, v: &[Var]| blk_f.forward(t, s, v[0]),
        Coverage::All,
        7,
    )?);

    // DiceCE with respect to the logits
    let mut store = ParamStore::new();
    let logits = uniform(&mut init, &[3, 4, 4, 4]);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let labels: Vec<u8> = (0..64).map(|_| rng.random_range(0..3)).collect();
    out.push(check(
        "dice_ce_loss",
        &mut store,
        &[logits],
        &|t: &mut Tape<f64>, _: &ParamStore<f64>, v: &[Var]| dice_ce_loss(t, v[0], &labels),
        Coverage::All,
        8,
    )?);

    if with_network {
        out.push(network_check(Coverage::Sampled(3))?);
    }
    Ok(out)
}

/// End-to-end check of the default preset at 16³, `C₀ = 4`, patch 2.
pub fn network_check(coverage: Coverage) -> Result<CheckReport> {
    let cfg = NetworkConfig {
        input: [16; 3],
        patch: 2,
        base_channels: 4,
        classes: 3,
        ssm: SsmConfig { d_state: 4, ..Default::default() },
        seed: 9,
        ..NetworkConfig::preset(Preset::Emnet)
    };
    let mut net = Network::<f64>::new(cfg)?;
    net.store.perturb(10, 0.05);
    let x = Init::new(12).uniform(&[1, 16, 16, 16], 1.0);
    let mut store = std::mem::take(&mut net.store);
    let report = check(
        "network (16³, C0=4)",
        &mut store,
        &[x],
        &|t: &mut Tape<f64>, s: &ParamStore<f64>, v: &[Var]| net.forward_with_store(t, s, v[0]),
        coverage,
        13,
    )?;
    Ok(report)
}
