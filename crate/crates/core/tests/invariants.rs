//! Randomized invariants over the numeric kernels.

use fkd_core::fkd::{aggregate_soft_labels, SoftLabelBatch};
use fkd_core::nn::{softmax_rows, softmax_with_temperature};
use fkd_core::preprocess::GrayImage;
use fkd_core::tensor::Tensor;
use proptest::prelude::*;

fn logits_strategy() -> impl Strategy<Value = Vec<f64>> {
    prop::collection::vec(-30.0..30.0f64, 2..8)
}

proptest! {
    #[test]
    fn softmax_rows_sum_to_one(logits in logits_strategy(), t in 0.5..25.0f64) {
        let p = softmax_with_temperature(&logits, t).unwrap();
        let sum: f64 = p.iter().sum();
        prop_assert!((sum - 1.0).abs() < 1e-9);
        prop_assert!(p.iter().all(|&v| (0.0..=1.0).contains(&v)));
    }

    #[test]
    fn softmax_is_shift_invariant(logits in logits_strategy(), shift in -50.0..50.0f64, t in 0.5..25.0f64) {
        let shifted: Vec<f64> = logits.iter().map(|v| v + shift).collect();
        let a = softmax_with_temperature(&logits, t).unwrap();
        let b = softmax_with_temperature(&shifted, t).unwrap();
        for (x, y) in a.iter().zip(&b) {
            prop_assert!((x - y).abs() < 1e-9);
        }
    }

    #[test]
    fn softmax_preserves_the_argmax(logits in logits_strategy(), t in 0.5..25.0f64) {
        let p = softmax_with_temperature(&logits, t).unwrap();
        let argmax = |v: &[f64]| {
            v.iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0
        };
        prop_assert_eq!(argmax(&logits), argmax(&p));
    }

    #[test]
    fn higher_temperature_flattens_the_peak(logits in logits_strategy()) {
        let max_at = |t: f64| {
            softmax_with_temperature(&logits, t)
                .unwrap()
                .into_iter()
                .fold(f64::MIN, f64::max)
        };
        let (m1, m10, m20) = (max_at(1.0), max_at(10.0), max_at(20.0));
        prop_assert!(m10 <= m1 + 1e-12);
        prop_assert!(m20 <= m10 + 1e-12);
    }

    #[test]
    fn aggregation_keeps_rows_stochastic(
        raw in prop::collection::vec(prop::collection::vec(-10.0..10.0f64, 4), 1..5),
        k in 1..4usize,
    ) {
        let batches: Vec<SoftLabelBatch> = (0..k)
            .map(|i| {
                let rows: Vec<f64> = raw
                    .iter()
                    .flat_map(|r| {
                        let shifted: Vec<f64> = r.iter().map(|v| v + i as f64).collect();
                        softmax_with_temperature(&shifted, 10.0).unwrap()
                    })
                    .collect();
                SoftLabelBatch {
                    probabilities: Tensor::from_vec(&[raw.len(), 4], rows).unwrap(),
                    temperature: 10.0,
                    source: format!("teacher{}", i),
                }
            })
            .collect();
        let agg = aggregate_soft_labels(&batches).unwrap();
        for row in agg.probabilities.data().chunks(4) {
            let sum: f64 = row.iter().sum();
            prop_assert!((sum - 1.0).abs() < 1e-9);
            prop_assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn softmax_rows_matches_per_row_softmax(
        rows in prop::collection::vec(prop::collection::vec(-20.0..20.0f64, 3), 1..5),
        t in 0.5..25.0f64,
    ) {
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let tensor = Tensor::from_vec(&[rows.len(), 3], flat).unwrap();
        let batched = softmax_rows(&tensor, t).unwrap();
        for (r, row) in rows.iter().enumerate() {
            let single = softmax_with_temperature(row, t).unwrap();
            for (c, v) in single.iter().enumerate() {
                prop_assert!((batched.data()[r * 3 + c] - v).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn normalization_is_monotone(levels in prop::collection::vec(0u32..256, 4..32)) {
        let n = levels.len();
        let img = GrayImage::from_levels(1, n, 8, levels.clone()).unwrap();
        let norm = img.normalize().unwrap();
        for i in 1..n {
            if levels[i] >= levels[i - 1] {
                prop_assert!(norm.pixels()[i] >= norm.pixels()[i - 1]);
            } else {
                prop_assert!(norm.pixels()[i] <= norm.pixels()[i - 1]);
            }
        }
        prop_assert!(norm.pixels().iter().all(|&v| (0.0..=1.0).contains(&v)));
    }
}
