mod common;

use emnet::conv::{conv3d_forward, deconv3d_forward, ConvGeom};
use emnet::{ParamStore, Tape, Tensor};
use proptest::prelude::*;

use common::{loop_conv3d, loop_deconv3d, loop_matmul, rng, uniform_vec};

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(40))]

    #[test]
    fn conv_matches_loops(
        ci in 1usize..3, co in 1usize..3, k in 1usize..4, stride in 1usize..3, pad in 0usize..2,
        z in 3usize..6, y in 3usize..6, x in 3usize..6, bias in any::<bool>(), seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let dims = [z, y, x];
        let xs = uniform_vec(&mut r, ci * z * y * x, -1.0, 1.0);
        let w = uniform_vec(&mut r, co * ci * k * k * k, -1.0, 1.0);
        let b = uniform_vec(&mut r, co, -1.0, 1.0);
        let b = bias.then_some(b.as_slice());
        let g = ConvGeom::conv(ci, co, k, stride, pad, dims).unwrap();
        let (expect, out) = loop_conv3d(&xs, &w, b, ci, co, k, stride, pad, dims);
        prop_assert_eq!(g.output, out);
        let got = conv3d_forward(&xs, &w, b, &g);
        for (p, q) in got.iter().zip(&expect) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    #[test]
    fn deconv_matches_scatter(
        ci in 1usize..3, co in 1usize..3, k in 1usize..4, stride in 1usize..4,
        z in 1usize..4, y in 1usize..4, x in 1usize..4, seed in any::<u64>(),
    ) {
        let mut r = rng(seed);
        let dims = [z, y, x];
        let xs = uniform_vec(&mut r, ci * z * y * x, -1.0, 1.0);
        let w = uniform_vec(&mut r, ci * co * k * k * k, -1.0, 1.0);
        let b = uniform_vec(&mut r, co, -1.0, 1.0);
        let g = ConvGeom::deconv(ci, co, k, stride, dims).unwrap();
        let (expect, out) = loop_deconv3d(&xs, &w, Some(&b), ci, co, k, stride, dims);
        prop_assert_eq!(g.output, out);
        for (p, q) in deconv3d_forward(&xs, &w, Some(&b), &g).iter().zip(&expect) {
            prop_assert!((p - q).abs() < 1e-12);
        }
    }

    /// Transposed convolution is the adjoint of the unpadded strided
    /// convolution sharing its weights.
    #[test]
    fn deconv_is_conv_adjoint(ci in 1usize..3, co in 1usize..3, k in 1usize..4, stride in 1usize..3, m in 1usize..4, seed in any::<u64>()) {
        let mut r = rng(seed);
        let n = (m - 1) * stride + k;
        let dims = [n, n, n];
        let x = uniform_vec(&mut r, ci * n * n * n, -1.0, 1.0);
        let y = uniform_vec(&mut r, co * m * m * m, -1.0, 1.0);
        let w = uniform_vec(&mut r, co * ci * k * k * k, -1.0, 1.0);
        let cg = ConvGeom::conv(ci, co, k, stride, 0, dims).unwrap();
        prop_assert_eq!(cg.output, [m, m, m]);
        let dg = ConvGeom::deconv(co, ci, k, stride, [m, m, m]).unwrap();
        let lhs = dot(&conv3d_forward(&x, &w, None, &cg), &y);
        let rhs = dot(&x, &deconv3d_forward(&y, &w, None, &dg));
        prop_assert!((lhs - rhs).abs() < 1e-10 * (1.0 + lhs.abs()));
    }

    #[test]
    fn tape_matmul_matches_loops(m in 1usize..6, k in 1usize..6, n in 1usize..6, seed in any::<u64>()) {
        let mut r = rng(seed);
        let a = uniform_vec(&mut r, m * k, -1.0, 1.0);
        let b = uniform_vec(&mut r, k * n, -1.0, 1.0);
        let mut tape = Tape::<f64>::new();
        let av = tape.constant(Tensor::new(vec![m, k], a.clone()).unwrap());
        let bv = tape.constant(Tensor::new(vec![k, n], b.clone()).unwrap());
        let c = tape.matmul(av, bv).unwrap();
        for (p, q) in tape.value(c).data().iter().zip(loop_matmul(&a, &b, m, k, n)) {
            prop_assert!((p - q).abs() < 1e-13);
        }
    }
}

#[test]
fn patch_embedding_geometry() {
    let g = ConvGeom::conv(1, 8, 4, 4, 0, [32, 32, 32]).unwrap();
    assert_eq!(g.output, [8, 8, 8]);
    assert_eq!(ConvGeom::deconv(8, 8, 4, 4, [8, 8, 8]).unwrap().output, [32, 32, 32]);
    assert!(ConvGeom::conv(1, 1, 5, 1, 0, [4, 4, 4]).is_err());
    assert!(ConvGeom::conv(1, 1, 3, 0, 1, [4, 4, 4]).is_err());
}

#[test]
fn tape_conv_agrees_with_kernel_and_reports_shapes() {
    let mut r = rng(3);
    let x = uniform_vec(&mut r, 2 * 64, -1.0, 1.0);
    let w = uniform_vec(&mut r, 3 * 2 * 27, -1.0, 1.0);
    let mut store = ParamStore::<f64>::new();
    let wid = store.add("w", Tensor::new(vec![3, 2, 3, 3, 3], w.clone()).unwrap());
    let mut tape = Tape::new();
    let xv = tape.constant(Tensor::new(vec![2, 4, 4, 4], x.clone()).unwrap());
    let wv = tape.param(&store, wid);
    let y = tape.conv3d(xv, wv, None, 1, 1).unwrap();
    assert_eq!(tape.shape(y), &[3, 4, 4, 4]);
    let (expect, _) = loop_conv3d(&x, &w, None, 2, 3, 3, 1, 1, [4, 4, 4]);
    for (p, q) in tape.value(y).data().iter().zip(&expect) {
        assert!((p - q).abs() < 1e-12);
    }
    let bad = tape.constant(Tensor::zeros(vec![5, 4, 4, 4]));
    assert!(tape.conv3d(bad, wv, None, 1, 1).is_err());
}
