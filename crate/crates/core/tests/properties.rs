//! Randomized invariants of merging, surgery, bias measurement and the
//! checkpoint format.

use proptest::prelude::*;

use repsurgery::checkpoint::{from_bytes, to_bytes};
use repsurgery::diagnostics::representation_bias;
use repsurgery::merge::{
    layer_groups, task_arithmetic, task_vector, ties_merge, weight_average, CoefficientMode,
    MergeCoefficients, TaskVector,
};
use repsurgery::params::ModelMeta;
use repsurgery::surgery::SurgeryModule;
use repsurgery::{ParameterMap, Tensor};

fn finite() -> impl Strategy<Value = f32> {
    prop::num::f32::NORMAL | prop::num::f32::SUBNORMAL | prop::num::f32::ZERO
}

fn tensor(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(finite(), n).prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

/// Any map: 0-4 tensors of rank 0-3 with arbitrary finite values.
fn any_map() -> impl Strategy<Value = ParameterMap> {
    let shapes = prop::collection::vec(prop::collection::vec(1usize..4, 0..4), 0..5);
    (shapes, "[a-z]{1,8}", 0usize..64, 0usize..8)
        .prop_flat_map(|(shapes, kind, feature_dim, layers)| {
            let tensors: Vec<_> = shapes.into_iter().map(tensor).collect();
            (
                tensors,
                Just(ModelMeta {
                    kind,
                    feature_dim,
                    layers,
                }),
            )
        })
        .prop_map(|(tensors, meta)| {
            let mut map = ParameterMap::new(meta);
            for (i, t) in tensors.into_iter().enumerate() {
                map.insert(format!("layer{i}.weight"), t).unwrap();
            }
            map
        })
}

fn bounded(shape: Vec<usize>) -> impl Strategy<Value = Tensor> {
    let n: usize = shape.iter().product();
    prop::collection::vec(-100.0f32..100.0, n)
        .prop_map(move |d| Tensor::new(shape.clone(), d).unwrap())
}

fn small() -> impl Strategy<Value = f32> {
    -2.0f32..2.0
}

/// A base map plus `tasks` fine-tuned maps with the two-layer encoder layout.
fn family(tasks: usize) -> impl Strategy<Value = (ParameterMap, Vec<ParameterMap>)> {
    let one = || prop::collection::vec(small(), 12);
    (one(), prop::collection::vec(one(), tasks)).prop_map(|(base, fts)| {
        let build = |v: &[f32]| {
            let mut m = ParameterMap::new(ModelMeta {
                kind: "encoder".into(),
                feature_dim: 2,
                layers: 2,
            });
            m.insert(
                "encoder.0.weight",
                Tensor::new(vec![2, 2], v[0..4].to_vec()).unwrap(),
            )
            .unwrap();
            m.insert(
                "encoder.0.bias",
                Tensor::new(vec![2], v[4..6].to_vec()).unwrap(),
            )
            .unwrap();
            m.insert(
                "encoder.1.weight",
                Tensor::new(vec![2, 2], v[6..10].to_vec()).unwrap(),
            )
            .unwrap();
            m.insert(
                "encoder.1.bias",
                Tensor::new(vec![2], v[10..12].to_vec()).unwrap(),
            )
            .unwrap();
            m
        };
        (build(&base), fts.iter().map(|v| build(v)).collect())
    })
}

fn vectors(base: &ParameterMap, fts: &[ParameterMap]) -> Vec<TaskVector> {
    fts.iter()
        .enumerate()
        .map(|(t, m)| task_vector(t, m, base).unwrap())
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn checkpoint_round_trip_is_bit_exact(map in any_map()) {
        let bytes = to_bytes(&map).unwrap();
        let back = from_bytes(&bytes).unwrap();
        prop_assert!(back.bit_eq(&map));
        prop_assert_eq!(&back.meta, &map.meta);
        prop_assert_eq!(back.names().collect::<Vec<_>>(), map.names().collect::<Vec<_>>());
        prop_assert_eq!(to_bytes(&back).unwrap(), bytes);
    }

    #[test]
    fn truncated_checkpoints_are_rejected(map in any_map(), cut in 0.0f64..1.0) {
        let bytes = to_bytes(&map).unwrap();
        let keep = (cut * bytes.len() as f64) as usize;
        prop_assume!(keep < bytes.len());
        prop_assert!(from_bytes(&bytes[..keep]).is_err());
    }

    #[test]
    fn corrupted_checkpoints_never_panic(map in any_map(), pos in 0.0f64..1.0, byte in any::<u8>()) {
        let mut bytes = to_bytes(&map).unwrap();
        let i = ((pos * bytes.len() as f64) as usize).min(bytes.len() - 1);
        bytes[i] = byte;
        // Any outcome is acceptable except a panic.
        let _ = from_bytes(&bytes);
    }

    #[test]
    fn weight_average_ignores_order((base, fts) in family(4), rot in 0usize..4) {
        let refs: Vec<&ParameterMap> = fts.iter().collect();
        let mut rotated = refs.clone();
        rotated.rotate_left(rot);
        rotated.swap(0, 3);
        let a = weight_average(&refs).unwrap();
        prop_assert!(a.bit_eq(&weight_average(&rotated).unwrap()));
        prop_assert!(weight_average(&[&base, &base, &base]).unwrap().bit_eq(&base));
    }

    #[test]
    fn task_arithmetic_zero_lambda_is_base((base, fts) in family(3)) {
        let merged = task_arithmetic(&base, &vectors(&base, &fts), 0.0).unwrap();
        prop_assert!(merged.bit_eq(&base));
    }

    #[test]
    fn task_arithmetic_is_linear_in_lambda((base, fts) in family(3), a in -1.0f64..1.0, b in -1.0f64..1.0) {
        let v = vectors(&base, &fts);
        let delta = |l: f64| {
            let m = task_arithmetic(&base, &v, l).unwrap();
            m.iter()
                .flat_map(|(name, t)| {
                    let b0 = base.get(name).unwrap().data().to_vec();
                    t.data().iter().zip(b0).map(|(&x, y)| x as f64 - y as f64).collect::<Vec<_>>()
                })
                .collect::<Vec<_>>()
        };
        let (da, db, dab) = (delta(a), delta(b), delta(a + b));
        for i in 0..dab.len() {
            prop_assert!((dab[i] - da[i] - db[i]).abs() < 1e-5, "{} vs {}", dab[i], da[i] + db[i]);
        }
    }

    #[test]
    fn uniform_coefficients_reproduce_weight_average((base, fts) in family(4)) {
        let v = vectors(&base, &fts);
        let layers = layer_groups(&base).len();
        let avg = weight_average(&fts.iter().collect::<Vec<_>>()).unwrap();
        for mode in [CoefficientMode::Task, CoefficientMode::Layer] {
            let merged = MergeCoefficients::uniform(mode, 4, layers, 0.25).apply(&base, &v).unwrap();
            prop_assert!(merged.max_abs_diff(&avg).unwrap() < 1e-6);
        }
    }

    #[test]
    fn ties_with_one_untrimmed_vector_is_task_arithmetic((base, fts) in family(1), lambda in 0.0f64..2.0) {
        let v = vectors(&base, &fts);
        let ties = ties_merge(&base, &v, lambda, 1.0).unwrap();
        let ta = task_arithmetic(&base, &v, lambda).unwrap();
        prop_assert!(ties.max_abs_diff(&ta).unwrap() < 1e-6);
    }

    #[test]
    fn ties_stays_within_the_elected_entries((base, fts) in family(3), trim in 0.05f64..1.0) {
        // Every merged offset lies between the smallest and largest task-vector
        // entries at that coordinate, and zero is always admissible.
        let v = vectors(&base, &fts);
        let merged = ties_merge(&base, &v, 1.0, trim).unwrap();
        for (name, t) in merged.iter() {
            let b = base.get(name).unwrap();
            for i in 0..t.len() {
                let off = t.data()[i] as f64 - b.data()[i] as f64;
                let vals: Vec<f64> = v.iter().map(|tv| tv.delta.get(name).unwrap().data()[i] as f64).collect();
                let lo = vals.iter().cloned().fold(0.0, f64::min);
                let hi = vals.iter().cloned().fold(0.0, f64::max);
                prop_assert!(off >= lo - 1e-5 && off <= hi + 1e-5, "{off} outside [{lo}, {hi}]");
            }
        }
    }

    #[test]
    fn zero_up_projection_is_identity(z in bounded(vec![3, 4]), down in bounded(vec![2, 4])) {
        let module = SurgeryModule::from_weights(0, down, Tensor::zeros(&[4, 2])).unwrap();
        prop_assert!(module.apply(&z).unwrap().bit_eq(&z));
    }

    #[test]
    fn bias_is_a_scaled_l1_metric(a in bounded(vec![3, 4]), b in bounded(vec![3, 4]), c in bounded(vec![3, 4])) {
        let ab = representation_bias(&a, &b).unwrap();
        prop_assert!(ab >= 0.0);
        prop_assert_eq!(ab, representation_bias(&b, &a).unwrap());
        prop_assert_eq!(representation_bias(&a, &a).unwrap(), 0.0);
        let ac = representation_bias(&a, &c).unwrap();
        let cb = representation_bias(&c, &b).unwrap();
        prop_assert!(ab <= ac + cb + 1e-9);
    }

    #[test]
    fn normalized_rows_have_unit_norm(x in bounded(vec![4, 5])) {
        let y = x.normalize_rows().unwrap();
        for r in 0..4 {
            let xn: f64 = x.row(r).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            prop_assume!(xn > 1e-3);
            let yn: f64 = y.row(r).iter().map(|&v| (v as f64).powi(2)).sum::<f64>().sqrt();
            prop_assert!((yn - 1.0).abs() < 1e-5, "{yn}");
        }
    }
}

#[test]
fn ties_hand_instance() {
    let map = |v: [f32; 2]| {
        let mut m = ParameterMap::new(ModelMeta::default());
        m.insert("w", Tensor::new(vec![2], v.to_vec()).unwrap())
            .unwrap();
        m
    };
    let base = map([0.0, 0.0]);
    let v = vec![
        task_vector(0, &map([1.0, -2.0]), &base).unwrap(),
        task_vector(1, &map([3.0, 1.0]), &base).unwrap(),
    ];
    let merged = ties_merge(&base, &v, 1.0, 1.0).unwrap();
    assert_eq!(merged.get("w").unwrap().data(), &[2.0, -2.0]);
}
