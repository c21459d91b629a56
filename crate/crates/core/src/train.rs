//! DiceCE loss, SGD, and the training loop.

use std::io::Write;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::infer::{argmax, sliding_window_infer, SlidingWindowSpec};
use crate::metrics;
use crate::network::Network;
use crate::params::ParamStore;
use crate::scalar::{Precision, Scalar};
use crate::tensor::Tensor;
use crate::volume::{Case, LabelVolume};

pub const DICE_EPS: f64 = 1e-5;

/// `[K, N]` one-hot encoding of `labels`.
pub fn one_hot<T: Scalar>(labels: &[u8], classes: usize) -> Result<Tensor<T>> {
    let n = labels.len();
    let mut out = vec![T::zero(); classes * n];
    for (i, &l) in labels.iter().enumerate() {
        if l as usize >= classes {
            return Err(Error::LabelOutOfRange { label: l as u32, classes });
        }
        out[l as usize * n + i] = T::one();
    }
    Tensor::new(vec![classes, n], out)
}

/// `mean_k(1 − softDice_k) + mean_voxels(CE)` for logits `[K, ...]`.
pub fn dice_ce_loss<T: Scalar>(tape: &mut Tape<T>, logits: Var, labels: &[u8]) -> Result<Var> {
    let s = tape.shape(logits).to_vec();
    let k = s[0];
    let n: usize = s[1..].iter().product();
    if labels.len() != n {
        return Err(Error::shape("dice_ce_loss", &s, &[labels.len()]));
    }
    let onehot = one_hot::<T>(labels, k)?;
    let eps = T::c(DICE_EPS);
    let gsum = Tensor::from_fn(vec![k], |c| onehot.data()[c * n..(c + 1) * n].iter().copied().sum::<T>() + eps);

    let flat = tape.reshape(logits, &[k, n])?;
    let logp = tape.log_softmax0(flat)?;
    let g = tape.constant(onehot);
    let ce = tape.mul(logp, g)?;
    let ce = tape.sum(ce);
    let ce = tape.scale(ce, -T::one() / T::c(n as f64));

    let p = tape.exp(logp);
    let pg = tape.mul(p, g)?;
    let inter = tape.sum_last(pg);
    let num = tape.scale(inter, T::c(2.0));
    let num = tape.add_scalar(num, eps);
    let psum = tape.sum_last(p);
    let gsum = tape.constant(gsum);
    let den = tape.add(psum, gsum)?;
    let dice = tape.div(num, den)?;
    let dice = tape.mean(dice);
    let dice_loss = tape.neg(dice);
    let dice_loss = tape.add_scalar(dice_loss, T::one());
    tape.add(dice_loss, ce)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayMode {
    /// `p ← p − lr·(g + decay·p)`.
    #[default]
    Weight,
    /// `p ← p − lr/(1 + decay·t)·g` at step `t`.
    Lr,
}

#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub decay: f64,
    pub mode: DecayMode,
    pub steps: u64,
}

impl Sgd {
    pub fn new(lr: f64, decay: f64, mode: DecayMode) -> Self {
        Sgd { lr, decay, mode, steps: 0 }
    }

    /// Applies and clears the gradients held in `store`.
    pub fn step<T: Scalar>(&mut self, store: &mut ParamStore<T>) -> Result<()> {
        if let Some((_, p)) = store.iter().find(|(_, p)| p.grad.is_none()) {
            return Err(Error::MissingGrad(p.name.clone()));
        }
        let (lr, wd) = match self.mode {
            DecayMode::Weight => (self.lr, self.decay),
            DecayMode::Lr => (self.lr / (1.0 + self.decay * self.steps as f64), 0.0),
        };
        let (lr, wd) = (T::c(lr), T::c(wd));
        for p in store.iter_mut() {
            let g = p.grad.take().expect("checked above");
            for (v, &g) in p.value.data_mut().iter_mut().zip(g.data()) {
                *v -= lr * (g + wd * *v);
            }
        }
        self.steps += 1;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub decay: f64,
    pub decay_mode: DecayMode,
    /// Shuffle seed for the per-epoch case order.
    pub seed: u64,
    pub precision: Precision,
    /// Leading cases used for training; the rest validate.
    pub train_cases: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 200,
            lr: 0.01,
            decay: 1e-5,
            decay_mode: DecayMode::Weight,
            seed: 0,
            precision: Precision::F32,
            train_cases: 40,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("lr must be positive, got {}", self.lr)));
        }
        if !(self.decay >= 0.0 && self.decay.is_finite()) {
            return Err(Error::Config(format!("decay must be non-negative, got {}", self.decay)));
        }
        Ok(())
    }
}

/// One forward/backward/update on a single case. The update is skipped when
/// the loss is not finite; the returned loss is the pre-update value.
pub fn train_step<T: Scalar>(net: &mut Network<T>, image: &Tensor<T>, labels: &[u8], opt: &mut Sgd) -> Result<f64> {
    let mut tape = Tape::new();
    let x = tape.constant(image.clone());
    let logits = net.forward(&mut tape, x)?;
    let loss = dice_ce_loss(&mut tape, logits, labels)?;
    let value = tape.value(loss).item().to_f64_lossy();
    if value.is_finite() {
        tape.backward(loss, &mut net.store)?;
        opt.step(&mut net.store)?;
    }
    Ok(value)
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    /// Mean foreground DSC (%) over validation cases.
    pub mean_dsc: Option<f64>,
    /// Per foreground class, averaged over cases where the class is present.
    pub class_dsc: Vec<Option<f64>>,
}

/// Mean and per-class validation DSC (%) of `net` on `cases`.
pub fn validate<T: Scalar>(net: &Network<T>, cases: &[Case]) -> Result<(Option<f64>, Vec<Option<f64>>)> {
    let k = net.config.classes;
    let spec = SlidingWindowSpec::for_network(&net.config);
    let mut means = Vec::new();
    let mut per_class = vec![(0.0, 0usize); k - 1];
    for case in cases {
        let logits = sliding_window_infer(net, &case.image.normalized(), &spec)?;
        let pred = LabelVolume::new(case.label.dims, case.label.spacing, argmax(&logits))?;
        if let Some(m) = metrics::mean_dsc(&pred, &case.label, k)? {
            means.push(m);
        }
        for c in 1..k as u8 {
            if pred.data.contains(&c) || case.label.data.contains(&c) {
                let acc = &mut per_class[c as usize - 1];
                acc.0 += metrics::dsc(&pred, &case.label, c)?;
                acc.1 += 1;
            }
        }
    }
    let mean = (!means.is_empty()).then(|| means.iter().sum::<f64>() / means.len() as f64);
    Ok((mean, per_class.into_iter().map(|(s, n)| (n > 0).then(|| s / n as f64)).collect()))
}

/// Trains for `cfg.epochs`, reporting every epoch to `on_epoch`.
pub fn train_loop<T: Scalar>(
    net: &mut Network<T>,
    train: &[Case],
    val: &[Case],
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochRecord) -> Result<()>,
) -> Result<Vec<EpochRecord>> {
    cfg.validate()?;
    if train.is_empty() {
        return Err(Error::Config("training set is empty".into()));
    }
    let k = net.config.classes;
    let images: Vec<Tensor<T>> = train.iter().map(|c| c.image.normalized()).collect();
    for case in train.iter().chain(val) {
        let max = case.label.max_label();
        if max as usize >= k {
            return Err(Error::LabelOutOfRange { label: max as u32, classes: k });
        }
    }
    let mut opt = Sgd::new(cfg.lr, cfg.decay, cfg.decay_mode);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for &i in &order {
            let loss = train_step(net, &images[i], &train[i].label.data, &mut opt)?;
            if !loss.is_finite() {
                return Err(Error::NonFiniteLoss { epoch });
            }
            total += loss;
        }
        let (mean_dsc, class_dsc) = if val.is_empty() { (None, vec![None; k - 1]) } else { validate(net, val)? };
        let rec = EpochRecord { epoch, loss: total / train.len() as f64, mean_dsc, class_dsc };
        on_epoch(&rec)?;
        log.push(rec);
    }
    Ok(log)
}

/// CSV sink for `epoch,loss,mean_dsc,dsc_1..dsc_{K-1}`.
pub struct MetricsLog<W: Write> {
    out: csv::Writer<W>,
}

impl<W: Write> MetricsLog<W> {
    pub fn new(out: W, classes: usize) -> Result<Self> {
        let mut out = csv::Writer::from_writer(out);
        let mut header = vec!["epoch".to_string(), "loss".into(), "mean_dsc".into()];
        header.extend((1..classes).map(|c| format!("dsc_{c}")));
        out.write_record(&header)?;
        Ok(MetricsLog { out })
    }

    pub fn append(&mut self, rec: &EpochRecord) -> Result<()> {
        let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
        let mut row = vec![rec.epoch.to_string(), rec.loss.to_string(), opt(rec.mean_dsc)];
        row.extend(rec.class_dsc.iter().map(|&v| opt(v)));
        self.out.write_record(&row)?;
        self.out.flush()?;
        Ok(())
    }
}
