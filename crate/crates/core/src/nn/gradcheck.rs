//! Central finite-difference verification of backprop gradients.

use crate::error::{CoreError, Result};
use crate::nn::loss::{loss_and_grad, LossSpec};
use crate::nn::net::{backward, forward_cached};
use crate::nn::state::{trainable_tensors_mut, Mode, ModelState};
use crate::tensor::Tensor;

fn loss_at(
    state: &ModelState,
    batch: &Tensor,
    labels: &[usize],
    soft_targets: Option<&Tensor>,
    loss: &LossSpec,
) -> Result<f64> {
    let pass = forward_cached(state, batch, Mode::Train)?;
    Ok(loss_and_grad(&pass.logits, labels, soft_targets, loss)?.total)
}

/// Compares backprop gradients against central finite differences over
/// every trainable parameter. Returns the maximum relative error.
///
/// Train-mode batch statistics are recomputed inside each perturbed
/// forward, so batchnorm's dependence on its input statistics is part of
/// what gets checked.
pub fn gradient_check(
    state: &ModelState,
    batch: &Tensor,
    labels: &[usize],
    soft_targets: Option<&Tensor>,
    loss: &LossSpec,
    epsilon: f64,
) -> Result<f64> {
    if !(1e-7..=1e-3).contains(&epsilon) {
        return Err(CoreError::domain(format!(
            "finite-difference epsilon {} outside [1e-7, 1e-3]",
            epsilon
        )));
    }
    let pass = forward_cached(state, batch, Mode::Train)?;
    let eval = loss_and_grad(&pass.logits, labels, soft_targets, loss)?;
    let grads = backward(state, &pass, &eval.dlogits)?;

    let mut work = state.clone();
    let mut max_rel = 0.0f64;
    for li in 0..work.params.len() {
        for slot in 0..trainable_tensors_mut(&mut work.params[li]).len() {
            let n = trainable_tensors_mut(&mut work.params[li])[slot].numel();
            for ei in 0..n {
                let orig = trainable_tensors_mut(&mut work.params[li])[slot].data()[ei];
                trainable_tensors_mut(&mut work.params[li])[slot].data_mut()[ei] = orig + epsilon;
                let plus = loss_at(&work, batch, labels, soft_targets, loss)?;
                trainable_tensors_mut(&mut work.params[li])[slot].data_mut()[ei] = orig - epsilon;
                let minus = loss_at(&work, batch, labels, soft_targets, loss)?;
                trainable_tensors_mut(&mut work.params[li])[slot].data_mut()[ei] = orig;

                let fd = (plus - minus) / (2.0 * epsilon);
                if !fd.is_finite() {
                    return Err(CoreError::numeric("non-finite finite difference"));
                }
                let bp = grads[li][slot].data()[ei];
                let rel = (bp - fd).abs() / (bp.abs() + fd.abs()).max(1e-4);
                max_rel = max_rel.max(rel);
            }
        }
    }
    Ok(max_rel)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::loss::softmax_rows;
    use crate::nn::spec::{LayerSpec, ModelSpec, Padding};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_batch(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        Tensor::from_vec(shape, data).unwrap()
    }

    fn random_soft_targets(rows: usize, classes: usize, seed: u64) -> Tensor {
        softmax_rows(&random_batch(&[rows, classes], seed), 1.0).unwrap()
    }

    /// Every layer kind once: conv -> bn -> leaky_relu -> pool -> gap -> dense.
    fn all_layers_spec() -> ModelSpec {
        ModelSpec {
            input_shape: (8, 8, 2),
            layers: vec![
                LayerSpec::Conv2d {
                    out_channels: 4,
                    kernel: 3,
                    stride: 2,
                    padding: Padding::Same,
                },
                LayerSpec::Batchnorm {
                    epsilon: 1e-5,
                    momentum: 0.9,
                },
                LayerSpec::LeakyRelu {
                    negative_slope: 0.01,
                },
                LayerSpec::Maxpool2d {
                    window: 2,
                    stride: 2,
                },
                LayerSpec::GlobalAvgPool,
                LayerSpec::Dense { out_units: 3 },
            ],
        }
    }

    #[test]
    fn dense_cross_entropy_matches_finite_differences_tightly() {
        let spec = ModelSpec {
            input_shape: (2, 3, 1),
            layers: vec![LayerSpec::Dense { out_units: 4 }],
        };
        let state = ModelState::init(&spec, 11).unwrap();
        let batch = random_batch(&[5, 2, 3, 1], 12);
        let labels = [0, 1, 2, 3, 1];
        let rel = gradient_check(
            &state,
            &batch,
            &labels,
            None,
            &LossSpec::cross_entropy(),
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-6, "max relative error {}", rel);
    }

    #[test]
    fn all_layer_kinds_cross_entropy() {
        let state = ModelState::init(&all_layers_spec(), 21).unwrap();
        let batch = random_batch(&[3, 8, 8, 2], 22);
        let labels = [0, 1, 2];
        let rel = gradient_check(
            &state,
            &batch,
            &labels,
            None,
            &LossSpec::cross_entropy(),
            1e-5,
        )
        .unwrap();
        assert!(rel < 1e-4, "max relative error {}", rel);
    }

    #[test]
    fn all_layer_kinds_combined_loss_across_temperatures() {
        let state = ModelState::init(&all_layers_spec(), 31).unwrap();
        let batch = random_batch(&[3, 8, 8, 2], 32);
        let labels = [2, 0, 1];
        let targets = random_soft_targets(3, 3, 33);
        for temperature in [1.0, 10.0, 20.0] {
            let loss = LossSpec::combined(0.1, temperature);
            let rel = gradient_check(&state, &batch, &labels, Some(&targets), &loss, 1e-5).unwrap();
            assert!(rel < 1e-4, "T={}: max relative error {}", temperature, rel);
        }
    }

    #[test]
    fn all_layer_kinds_pure_distillation() {
        // alpha = 0 exercises the KL path alone.
        let state = ModelState::init(&all_layers_spec(), 41).unwrap();
        let batch = random_batch(&[3, 8, 8, 2], 42);
        let labels = [1, 1, 0];
        let targets = random_soft_targets(3, 3, 43);
        let loss = LossSpec::combined(0.0, 10.0);
        let rel = gradient_check(&state, &batch, &labels, Some(&targets), &loss, 1e-5).unwrap();
        assert!(rel < 1e-4, "max relative error {}", rel);
    }

    #[test]
    fn t_squared_scaling_checks_too() {
        let state = ModelState::init(&all_layers_spec(), 51).unwrap();
        let batch = random_batch(&[3, 8, 8, 2], 52);
        let labels = [0, 2, 1];
        let targets = random_soft_targets(3, 3, 53);
        let loss = LossSpec {
            t_squared_scaling: true,
            ..LossSpec::combined(0.1, 20.0)
        };
        let rel = gradient_check(&state, &batch, &labels, Some(&targets), &loss, 1e-5).unwrap();
        assert!(rel < 1e-4, "max relative error {}", rel);
    }

    #[test]
    fn epsilon_out_of_range_rejected() {
        let spec = ModelSpec {
            input_shape: (1, 1, 2),
            layers: vec![LayerSpec::Dense { out_units: 2 }],
        };
        let state = ModelState::init(&spec, 0).unwrap();
        let batch = random_batch(&[1, 1, 1, 2], 1);
        for eps in [1e-8, 1e-2] {
            assert!(gradient_check(
                &state,
                &batch,
                &[0],
                None,
                &LossSpec::cross_entropy(),
                eps
            )
            .is_err());
        }
    }
}
