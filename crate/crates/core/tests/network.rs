mod common;

use emnet::blocks::{BlockKind, CsrmBlock, CsrmFBlock};
use emnet::network::{count_flops, count_params, param_breakdown, Preset};
use emnet::params::Init;
use emnet::ssm::SsmConfig;
use emnet::{Network, NetworkConfig, ParamStore, Tape, Tensor};
use proptest::prelude::*;

use common::{rng, uniform_vec};

fn tiny(stages: [BlockKind; 4]) -> NetworkConfig {
    NetworkConfig { input: [16, 16, 16], patch: 2, base_channels: 4, classes: 3, stages, ..Default::default() }
}

#[test]
fn closed_form_counts_match_built_networks() {
    for p in Preset::ALL {
        for cfg in [
            NetworkConfig::preset(p),
            tiny(p.stages()),
            NetworkConfig { efl_tail: false, input_skip: false, ..tiny(p.stages()) },
        ] {
            let net = Network::<f32>::new(cfg.clone()).unwrap();
            assert_eq!(net.param_count(), count_params(&cfg), "{p:?}");
            assert_eq!(net.encoder_kinds(), p.stages().to_vec());
            let parts = param_breakdown(&cfg);
            assert_eq!(parts.first().unwrap().0, "stem");
            assert_eq!(parts.last().unwrap().0, "head");
        }
    }
}

#[test]
fn desk_presets_are_ordered_by_size() {
    let n = [Preset::VariantA, Preset::VariantB, Preset::Emnet, Preset::VariantC]
        .map(|p| count_params(&NetworkConfig::preset(p)));
    assert!(n[0] > n[1] && n[1] > n[2] && n[2] > n[3], "{n:?}");
}

#[test]
fn variants_share_the_skeleton() {
    // Only encoder block parameters differ between presets.
    let names = |p: Preset| -> Vec<(String, usize)> {
        param_breakdown(&NetworkConfig::preset(p)).into_iter().filter(|(n, _)| !n.starts_with("enc")).collect()
    };
    for p in Preset::ALL {
        assert_eq!(names(p), names(Preset::Emnet));
    }
}

#[test]
fn forward_shape_and_flops() {
    let cfg = tiny(Preset::Emnet.stages());
    let net = Network::<f64>::new(cfg.clone()).unwrap();
    let x = Tensor::new(vec![1, 16, 16, 16], uniform_vec(&mut rng(1), 4096, -1.0, 1.0)).unwrap();
    let y = net.predict(&x).unwrap();
    assert_eq!(y.shape(), &[3, 16, 16, 16]);
    assert!(y.data().iter().all(|v| v.is_finite()));
    assert!(net.predict(&Tensor::zeros(vec![1, 8, 16, 16])).is_err());
    assert!(count_flops(&NetworkConfig::preset(Preset::Emnet)) > count_flops(&cfg));
}

#[test]
fn construction_is_seeded() {
    let cfg = tiny(Preset::VariantC.stages());
    let a = Network::<f32>::new(cfg.clone()).unwrap();
    let b = Network::<f32>::new(cfg.clone()).unwrap();
    let c = Network::<f32>::new(NetworkConfig { seed: 1, ..cfg }).unwrap();
    let vals = |n: &Network<f32>| n.store.iter().map(|(_, p)| p.value.data().to_vec()).collect::<Vec<_>>();
    assert_eq!(vals(&a), vals(&b));
    assert_ne!(vals(&a), vals(&c));
}

#[test]
fn invalid_configs_are_rejected() {
    let base = tiny(Preset::Emnet.stages());
    for bad in [
        NetworkConfig { input: [16, 16, 12], ..base.clone() },
        NetworkConfig { classes: 1, ..base.clone() },
        NetworkConfig { base_channels: 0, ..base.clone() },
        NetworkConfig { patch: 3, ..base.clone() },
    ] {
        assert!(Network::<f32>::new(bad.clone()).is_err(), "{bad:?}");
    }
    assert!(NetworkConfig::from_toml("input = [16, 16, 16]\nbogus = 1").is_err());
}

#[test]
fn toml_round_trip() {
    let cfg = NetworkConfig { seed: 9, ..tiny(Preset::VariantB.stages()) };
    assert_eq!(NetworkConfig::from_toml(&cfg.to_toml()).unwrap(), cfg);
    assert_eq!("variant-b".parse::<Preset>().unwrap(), Preset::VariantB);
    assert!("variant-z".parse::<Preset>().is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(12))]

    /// Both mixer blocks start as the identity map at any width and extent.
    #[test]
    fn blocks_are_identity_at_init(c in 1usize..5, side in prop_oneof![Just(2usize), Just(4)], ratio in 1usize..3, seed in any::<u64>()) {
        let c = c * ratio;
        let mut store = ParamStore::<f64>::new();
        let mut init = Init::new(seed);
        let m = CsrmBlock::new(&mut store, &mut init, "m", c, ratio, SsmConfig::default()).unwrap();
        let f = CsrmFBlock::new(&mut store, &mut init, "f", c, ratio, [side; 3], true).unwrap();
        prop_assert_eq!(store.numel(), CsrmBlock::param_count(c, ratio, &SsmConfig::default()) + CsrmFBlock::param_count(c, ratio, [side; 3], true));
        let n = c * side * side * side;
        let x = Tensor::new(vec![c, side, side, side], uniform_vec(&mut rng(seed), n, -2.0, 2.0)).unwrap();
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let a = m.forward(&mut tape, &store, v).unwrap();
        let b = f.forward(&mut tape, &store, v).unwrap();
        prop_assert_eq!(tape.value(a), &x);
        prop_assert_eq!(tape.value(b), &x);
    }
}
