mod common;

use emnet::network::Network;
use emnet::phantom::{generate_set, PhantomSpec};
use emnet::train::{dice_ce_loss, one_hot, train_loop, train_step, DecayMode, MetricsLog, Sgd, TrainConfig};
use emnet::{Error, NetworkConfig, ParamStore, Tape, Tensor};
use proptest::prelude::*;

use common::{loop_dice_ce, rng, uniform_vec};

fn loss_of(logits: &[f64], shape: Vec<usize>, labels: &[u8]) -> f64 {
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(Tensor::new(shape, logits.to_vec()).unwrap());
    let l = dice_ce_loss(&mut tape, v, labels).unwrap();
    tape.value(l).item()
}

fn tiny_config(seed: u64) -> NetworkConfig {
    NetworkConfig { input: [16, 16, 16], patch: 2, base_channels: 4, classes: 3, seed, ..Default::default() }
}

fn tiny_set(seed: u64, count: usize) -> Vec<emnet::volume::Case> {
    let spec = PhantomSpec { dims: [16, 16, 16], organs: 2, semi_axis: [0.15, 0.25], seed, ..PhantomSpec::default() };
    generate_set(&spec, count).unwrap()
}

#[test]
fn loss_matches_loop_oracle_on_a_random_case() {
    let mut r = rng(1);
    let k = 4;
    let logits = uniform_vec(&mut r, k * 64, -3.0, 3.0);
    let labels: Vec<u8> = uniform_vec(&mut r, 64, 0.0, k as f64).iter().map(|&v| v as u8).collect();
    let got = loss_of(&logits, vec![k, 4, 4, 4], &labels);
    let expect = loop_dice_ce(&logits, &labels, k);
    assert!(((got - expect) / expect).abs() < 1e-10, "{got} vs {expect}");
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn loss_agrees_with_oracle_and_is_non_negative(k in 2usize..5, n in 1usize..40, seed in any::<u64>()) {
        let mut r = rng(seed);
        let logits = uniform_vec(&mut r, k * n, -5.0, 5.0);
        let labels: Vec<u8> = uniform_vec(&mut r, n, 0.0, k as f64).iter().map(|&v| v as u8).collect();
        let got = loss_of(&logits, vec![k, n], &labels);
        prop_assert!(got >= 0.0);
        let expect = loop_dice_ce(&logits, &labels, k);
        prop_assert!((got - expect).abs() <= 1e-10 * expect.abs().max(1.0));
    }

    #[test]
    fn one_hot_has_one_per_voxel(k in 1usize..6, labels in proptest::collection::vec(0u8..6, 1..30)) {
        let labels: Vec<u8> = labels.into_iter().map(|l| l % k as u8).collect();
        let t = one_hot::<f64>(&labels, k).unwrap();
        let n = labels.len();
        for i in 0..n {
            let col: Vec<f64> = (0..k).map(|c| t.data()[c * n + i]).collect();
            prop_assert_eq!(col.iter().sum::<f64>(), 1.0);
            prop_assert_eq!(col[labels[i] as usize], 1.0);
        }
    }
}

#[test]
fn out_of_range_label_is_rejected() {
    assert!(matches!(one_hot::<f32>(&[0, 3], 3), Err(Error::LabelOutOfRange { label: 3, classes: 3 })));
    let mut tape = Tape::<f64>::new();
    let v = tape.constant(Tensor::zeros(vec![2, 3]));
    assert!(dice_ce_loss(&mut tape, v, &[0, 1]).is_err());
}

#[test]
fn sgd_weight_decay_update() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("p", Tensor::scalar(1.0));
    store.get_mut(id).grad = Some(Tensor::scalar(1.0));
    Sgd::new(0.01, 1e-5, DecayMode::Weight).step(&mut store).unwrap();
    assert!((store.value(id).item() - 0.9899999).abs() < 1e-15);
    assert!(store.get(id).grad.is_none());
}

#[test]
fn sgd_lr_decay_mode_shrinks_the_step() {
    let mut store = ParamStore::<f64>::new();
    let id = store.add("p", Tensor::scalar(0.0));
    let mut opt = Sgd::new(0.1, 1.0, DecayMode::Lr);
    for _ in 0..2 {
        store.get_mut(id).grad = Some(Tensor::scalar(1.0));
        opt.step(&mut store).unwrap();
    }
    assert!((store.value(id).item() + 0.1 + 0.05).abs() < 1e-15);
}

#[test]
fn sgd_requires_every_gradient() {
    let mut store = ParamStore::<f64>::new();
    store.add("p", Tensor::scalar(1.0));
    assert!(matches!(Sgd::new(0.01, 0.0, DecayMode::Weight).step(&mut store), Err(Error::MissingGrad(_))));
}

#[test]
fn quadratic_bowl_converges() {
    let mut store = ParamStore::<f64>::new();
    let init = uniform_vec(&mut rng(2), 5, -1.0, 1.0);
    let id = store.add("p", Tensor::new(vec![5], init).unwrap());
    let mut opt = Sgd::new(0.01, 1e-5, DecayMode::Weight);
    for _ in 0..500 {
        let mut tape = Tape::new();
        let p = tape.param(&store, id);
        let sq = tape.mul(p, p).unwrap();
        let l = tape.sum(sq);
        tape.backward(l, &mut store).unwrap();
        opt.step(&mut store).unwrap();
    }
    let norm = store.value(id).data().iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(norm < 1e-3, "{norm}");
}

#[test]
fn small_step_lowers_the_loss() {
    let mut net = Network::<f64>::new(tiny_config(3)).unwrap();
    let case = &tiny_set(3, 1)[0];
    let x = case.image.normalized::<f64>();
    let mut opt = Sgd::new(1e-4, 0.0, DecayMode::Weight);
    let before = train_step(&mut net, &x, &case.label.data, &mut opt).unwrap();
    let mut probe = Sgd::new(1e-12, 0.0, DecayMode::Weight);
    let after = train_step(&mut net, &x, &case.label.data, &mut probe).unwrap();
    assert!(after < before, "{after} !< {before}");
}

#[test]
fn loop_is_deterministic_and_logs_every_epoch() {
    let run = || {
        let set = tiny_set(5, 3);
        let mut net = Network::<f32>::new(tiny_config(5)).unwrap();
        let mut csv = Vec::new();
        let cfg = TrainConfig { epochs: 2, seed: 5, ..TrainConfig::default() };
        let log = {
            let mut sink = MetricsLog::new(&mut csv, 3).unwrap();
            train_loop(&mut net, &set[..2], &set[2..], &cfg, |r| sink.append(r)).unwrap()
        };
        (log, csv, net.store.iter().map(|(_, p)| p.value.data().to_vec()).collect::<Vec<_>>())
    };
    let (log_a, csv_a, p_a) = run();
    let (log_b, csv_b, p_b) = run();
    assert_eq!(log_a, log_b);
    assert_eq!(csv_a, csv_b);
    assert_eq!(p_a, p_b);
    assert_eq!(log_a.len(), 2);
    let text = String::from_utf8(csv_a).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], "epoch,loss,mean_dsc,dsc_1,dsc_2");
    assert_eq!(lines.len(), 3);
    assert!(log_a.iter().all(|r| r.loss.is_finite() && r.mean_dsc.is_some_and(|d| (0.0..=100.0).contains(&d))));
}

#[test]
fn loop_rejects_bad_inputs() {
    let set = tiny_set(6, 2);
    let mut net = Network::<f32>::new(NetworkConfig { classes: 2, ..tiny_config(6) }).unwrap();
    let cfg = TrainConfig { epochs: 1, ..TrainConfig::default() };
    assert!(matches!(train_loop(&mut net, &set, &[], &cfg, |_| Ok(())), Err(Error::LabelOutOfRange { .. })));
    assert!(train_loop(&mut net, &[], &[], &cfg, |_| Ok(())).is_err());
    let bad = TrainConfig { lr: 0.0, ..cfg };
    assert!(matches!(bad.validate(), Err(Error::Config(_))));
}
