//! Algebraic properties of the static merge operators.

use mergelab_core::math::ParamIndex;
use mergelab_core::merge::{task_arithmetic, task_vector, ties_merge, trim, weight_average, Lambdas};
use mergelab_core::ParamVector;
use proptest::prelude::*;

fn pv(values: Vec<f32>) -> ParamVector {
    let index = ParamIndex::from_shapes([("w", vec![values.len()])]).unwrap();
    ParamVector::new(values, index).unwrap()
}

fn bits(p: &ParamVector) -> Vec<u32> {
    p.values().iter().map(|v| v.to_bits()).collect()
}

/// Signed magnitudes in [1e-3, 1e3] or exactly zero. Any two such f32 values
/// differ by an amount that is exact in f64.
fn entry() -> impl Strategy<Value = f32> {
    prop_oneof![
        1 => Just(0.0f32),
        8 => (1e-3f32..1e3, any::<bool>()).prop_map(|(m, s)| if s { m } else { -m }),
    ]
}

fn pair() -> impl Strategy<Value = (Vec<f32>, Vec<f32>)> {
    prop::collection::vec((entry(), entry()), 1..64).prop_map(|pairs| pairs.into_iter().unzip())
}

proptest! {
    #[test]
    fn task_vector_round_trip_is_bitwise((base, ft) in pair()) {
        let (base, ft) = (pv(base), pv(ft));
        let tau = task_vector(&ft, &base).unwrap();
        let back = task_arithmetic(&base, &[tau], &Lambdas::Uniform(1.0)).unwrap();
        prop_assert_eq!(bits(&back), bits(&ft));
    }

    #[test]
    fn one_hot_weights_select_a_model(
        models in prop::collection::vec(prop::collection::vec(0.001f32..100.0, 8), 1..6),
        pick in 0usize..6,
        signs in prop::collection::vec(any::<bool>(), 8),
    ) {
        let pick = pick % models.len();
        let models: Vec<ParamVector> = models
            .into_iter()
            .map(|m| pv(m.iter().zip(&signs).map(|(v, s)| if *s { *v } else { -*v }).collect()))
            .collect();
        let mut w = vec![0.0; models.len()];
        w[pick] = 1.0;
        let out = weight_average(&models, &w).unwrap();
        prop_assert_eq!(bits(&out), bits(&models[pick]));
    }

    #[test]
    // with more copies the running partial sums such as 3m/4 round in f32
    fn averaging_copies_of_a_model_is_idempotent(
        values in prop::collection::vec(-1e3f32..1e3, 1..32),
        copies in 1usize..=2,
    ) {
        let m = pv(values);
        let models = vec![m.clone(); copies];
        let w = vec![1.0 / copies as f32; copies];
        let out = weight_average(&models, &w).unwrap();
        prop_assert_eq!(out.values(), m.values());
    }

    #[test]
    fn ties_without_conflict_is_the_mean_merge(
        base in prop::collection::vec(-0.5f32..0.5, 16),
        mags in prop::collection::vec(prop::collection::vec(0.0f32..0.5, 16), 1..5),
        signs in prop::collection::vec(any::<bool>(), 16),
        lambda in 0.0f32..1.0,
    ) {
        let base = pv(base);
        let taus: Vec<_> = mags
            .iter()
            .map(|m| {
                let delta: Vec<f32> = m.iter().zip(&signs).map(|(v, s)| if *s { *v } else { -*v }).collect();
                let ft: Vec<f32> = base.values().iter().zip(&delta).map(|(b, d)| b + d).collect();
                task_vector(&pv(ft), &base).unwrap()
            })
            .collect();
        let ties = ties_merge(&base, &taus, lambda, 1.0).unwrap();
        for j in 0..16 {
            let nonzero: Vec<f64> = taus
                .iter()
                .map(|t| t.delta[j])
                .filter(|v| *v != 0.0)
                .collect();
            let mean = if nonzero.is_empty() { 0.0 } else { nonzero.iter().sum::<f64>() / nonzero.len() as f64 };
            let expected = base.values()[j] as f64 + lambda as f64 * mean;
            prop_assert!((ties.values()[j] as f64 - expected).abs() <= 1e-7,
                "coordinate {}: {} vs {}", j, ties.values()[j], expected);
        }
    }

    #[test]
    fn trim_keeps_the_requested_count_of_largest_entries(
        values in prop::collection::vec(-5.0f64..5.0, 1..40),
        density in 0.01f32..1.0,
    ) {
        let out = trim(&values, density);
        let keep = ((density as f64) * values.len() as f64).ceil() as usize;
        let nonzero = out.iter().filter(|v| **v != 0.0).count();
        prop_assert!(nonzero <= keep);
        let min_kept = out.iter().filter(|v| **v != 0.0).map(|v| v.abs()).fold(f64::INFINITY, f64::min);
        for (i, v) in values.iter().enumerate() {
            if out[i] == 0.0 && *v != 0.0 {
                prop_assert!(v.abs() <= min_kept, "dropped {} above kept {}", v, min_kept);
            } else {
                prop_assert_eq!(out[i], *v);
            }
        }
    }
}

#[test]
fn ties_hand_examples() {
    let base = pv(vec![0.0, 0.0]);
    let t1 = task_vector(&pv(vec![1.0, -4.0]), &base).unwrap();
    let t2 = task_vector(&pv(vec![3.0, 2.0]), &base).unwrap();
    let taus = [t1, t2];
    assert_eq!(ties_merge(&base, &taus, 1.0, 1.0).unwrap().values(), &[2.0, -4.0]);
    assert_eq!(ties_merge(&base, &taus, 1.0, 0.5).unwrap().values(), &[3.0, -4.0]);
}
