//! Property-based invariants over randomized inputs.

use dctmpc::icnn::{DcModel, IcnnLayer, IcnnParams, ModelFile, SamplingBox, TrainingMeta};
use dctmpc::plant::{ModelParams, UncertainTheta};
use dctmpc::socp::LinExpr;
use dctmpc::tube::simplex_vertices;
use nalgebra::{DMatrix, DVector, Vector4};
use proptest::prelude::*;

fn finite(range: std::ops::Range<f64>) -> impl Strategy<Value = f64> {
    prop::num::f64::NORMAL
        .prop_map(move |v| range.start + v.abs() % (range.end - range.start))
        .prop_filter("finite", |v| v.is_finite())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn simplex_vertices_satisfy_inequalities(
        a0 in finite(0.0..2.0),
        a1 in finite(0.0..2.0),
        a2 in finite(0.0..2.0),
        a3 in finite(0.0..2.0),
        beta in finite(0.0..3.0),
    ) {
        let alpha = Vector4::new(a0, a1, a2, a3);
        let verts = simplex_vertices(&alpha, beta).unwrap();
        let spread = beta + alpha.sum();
        for v in verts {
            for i in 0..4 {
                prop_assert!(-v[i] <= alpha[i] + 1e-12);
            }
            prop_assert!(v.sum() <= beta + 1e-12);
        }
        // the simplex is the convex hull of its vertices: random convex
        // combinations stay inside
        let mid = (verts[0] + verts[1] + verts[2] + verts[3] + verts[4]) / 5.0;
        for i in 0..4 {
            prop_assert!(-mid[i] <= alpha[i] + 1e-12);
        }
        prop_assert!(mid.sum() <= beta + 1e-12);
        prop_assert!(spread >= 0.0);
    }

    #[test]
    fn theta_round_trip_is_exact(
        yield_biomass in finite(0.25..0.6),
        feed in finite(150.0..250.0),
    ) {
        let nominal = ModelParams::nominal();
        let theta = UncertainTheta::from_physical(yield_biomass, feed, &nominal);
        let (y, s) = theta.to_physical(&nominal);
        prop_assert!((y - yield_biomass).abs() < 1e-12);
        prop_assert!((s - feed).abs() < 1e-10);
    }

    #[test]
    fn lin_expr_is_linear(
        c0 in finite(-2.0..2.0),
        c1 in finite(-2.0..2.0),
        k in finite(0.1..3.0),
        x0 in finite(-5.0..5.0),
        x1 in finite(-5.0..5.0),
    ) {
        let mut e = LinExpr::constant(0.5);
        e.push(0, c0);
        e.push(1, c1);
        let base = e.eval(&[x0, x1]);
        let mut scaled = LinExpr::default();
        scaled.add(&e, k);
        prop_assert!((scaled.eval(&[x0, x1]) - k * base).abs() < 1e-9 * (1.0 + base.abs() * k.abs()));
    }

    #[test]
    fn model_file_round_trip(seed in 0u64..500) {
        use dctmpc::rng::{stream, uniform, Stream};
        let mut rng = stream(seed, Stream::WeightInit);
        let dim = 3;
        let hidden = 4;
        let mut layer = |first: bool| IcnnLayer {
            kernel: (!first).then(|| DMatrix::from_fn(hidden, hidden, |_, _| uniform(&mut rng, 0.0, 1.0))),
            passthrough: DMatrix::from_fn(hidden, dim, |_, _| uniform(&mut rng, -1.0, 1.0)),
            bias: DVector::from_fn(hidden, |_, _| uniform(&mut rng, -1.0, 1.0)),
        };
        let hidden_layers = vec![layer(true), layer(false)];
        let mut rng2 = stream(seed + 1, Stream::WeightInit);
        let output = IcnnLayer {
            kernel: Some(DMatrix::from_fn(2, hidden, |_, _| uniform(&mut rng2, 0.0, 1.0))),
            passthrough: DMatrix::from_fn(2, dim, |_, _| uniform(&mut rng2, -1.0, 1.0)),
            bias: DVector::from_fn(2, |_, _| uniform(&mut rng2, -1.0, 1.0)),
        };
        let net = IcnnParams::with_identity_scaling(dim, 2, hidden_layers, output);
        let model = DcModel {
            f1: net.clone(),
            f2: net,
            sampling_box: SamplingBox::new(DVector::zeros(dim), DVector::from_element(dim, 1.0)).unwrap(),
            meta: TrainingMeta { seed, epochs: 1, samples: 10, train_mae: 0.1, val_mae: 0.2 },
        };
        let doc = ModelFile::from_model(&model);
        let json = serde_json::to_string(&doc).unwrap();
        let back: ModelFile = serde_json::from_str(&json).unwrap();
        let model2 = back.into_model().unwrap();
        prop_assert_eq!(model, model2);
    }
}
