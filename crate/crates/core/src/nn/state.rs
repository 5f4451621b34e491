//! Materialized model parameters and their seeded initialization.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::nn::spec::{LayerSpec, ModelSpec, Shape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    Train,
    Eval,
}

/// Parameters attached to one layer. Layers without parameters get `None`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum LayerParams {
    Conv {
        /// (k, k, c_in, c_out)
        kernel: Tensor,
        bias: Tensor,
    },
    Bn {
        gamma: Tensor,
        beta: Tensor,
        moving_mean: Tensor,
        moving_var: Tensor,
    },
    Dense {
        /// (f_in, f_out)
        weight: Tensor,
        bias: Tensor,
    },
    None,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub spec: ModelSpec,
    pub params: Vec<LayerParams>,
    pub mode: Mode,
}

fn he_uniform(rng: &mut ChaCha8Rng, fan_in: usize, n: usize) -> Vec<f64> {
    let limit = (6.0 / fan_in as f64).sqrt();
    (0..n).map(|_| rng.gen_range(-limit..limit)).collect()
}

impl ModelState {
    /// Seeded He-style initialization; deterministic per (spec, seed).
    pub fn init(spec: &ModelSpec, seed: u64) -> Result<ModelState> {
        let shapes = spec.infer_shapes()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut in_shape = Shape::Hwc(spec.input_shape.0, spec.input_shape.1, spec.input_shape.2);
        let mut params = Vec::with_capacity(spec.layers.len());
        for (layer, out_shape) in spec.layers.iter().zip(&shapes) {
            let p = match layer {
                LayerSpec::Conv2d {
                    out_channels,
                    kernel,
                    ..
                } => {
                    let c_in = match in_shape {
                        Shape::Hwc(_, _, c) => c,
                        Shape::Flat(_) => unreachable!(),
                    };
                    let fan_in = kernel * kernel * c_in;
                    let shape = [*kernel, *kernel, c_in, *out_channels];
                    let data = he_uniform(&mut rng, fan_in, shape.iter().product());
                    LayerParams::Conv {
                        kernel: Tensor::from_vec(&shape, data)?,
                        bias: Tensor::zeros(&[*out_channels]),
                    }
                }
                LayerSpec::Batchnorm { .. } => {
                    let c = in_shape.numel_last_dim();
                    let mut gamma = Tensor::zeros(&[c]);
                    gamma.fill(1.0);
                    let mut moving_var = Tensor::zeros(&[c]);
                    moving_var.fill(1.0);
                    LayerParams::Bn {
                        gamma,
                        beta: Tensor::zeros(&[c]),
                        moving_mean: Tensor::zeros(&[c]),
                        moving_var,
                    }
                }
                LayerSpec::Dense { out_units } => {
                    let f_in = in_shape.numel();
                    let data = he_uniform(&mut rng, f_in, f_in * out_units);
                    LayerParams::Dense {
                        weight: Tensor::from_vec(&[f_in, *out_units], data)?,
                        bias: Tensor::zeros(&[*out_units]),
                    }
                }
                _ => LayerParams::None,
            };
            params.push(p);
            in_shape = out_shape.clone();
        }
        Ok(ModelState {
            spec: spec.clone(),
            params,
            mode: Mode::Train,
        })
    }

    pub fn with_mode(mut self, mode: Mode) -> Self {
        self.mode = mode;
        self
    }

    /// Named parameter tensors in a fixed order; trainable first within a
    /// layer, moving statistics last.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor, bool)> {
        let mut out = Vec::new();
        for (i, p) in self.params.iter().enumerate() {
            let name = |s: &str| format!("layer{}.{}", i + 1, s);
            match p {
                LayerParams::Conv { kernel, bias } => {
                    out.push((name("kernel"), kernel, true));
                    out.push((name("bias"), bias, true));
                }
                LayerParams::Bn {
                    gamma,
                    beta,
                    moving_mean,
                    moving_var,
                } => {
                    out.push((name("gamma"), gamma, true));
                    out.push((name("beta"), beta, true));
                    out.push((name("moving_mean"), moving_mean, false));
                    out.push((name("moving_var"), moving_var, false));
                }
                LayerParams::Dense { weight, bias } => {
                    out.push((name("weight"), weight, true));
                    out.push((name("bias"), bias, true));
                }
                LayerParams::None => {}
            }
        }
        out
    }

    /// (total, trainable, non_trainable) over materialized tensors.
    pub fn parameter_counts(&self) -> (usize, usize, usize) {
        let mut trainable = 0;
        let mut non_trainable = 0;
        for (_, t, is_trainable) in self.named_tensors() {
            if is_trainable {
                trainable += t.numel();
            } else {
                non_trainable += t.numel();
            }
        }
        (trainable + non_trainable, trainable, non_trainable)
    }

    /// Elementwise weighted average over several states sharing one spec.
    /// Moving statistics are averaged like every other tensor. Summation
    /// order is the given state order.
    pub fn weighted_average(states: &[&ModelState], weights: &[f64]) -> Result<ModelState> {
        let first = *states
            .first()
            .ok_or_else(|| CoreError::domain("cannot average zero states"))?;
        if states.len() != weights.len() {
            return Err(CoreError::domain("state/weight count mismatch"));
        }
        let wsum: f64 = weights.iter().sum();
        if wsum <= 0.0 {
            return Err(CoreError::domain("weights must sum to a positive value"));
        }
        for s in states {
            if s.spec != first.spec {
                return Err(CoreError::shape("cannot average states with differing specs"));
            }
        }
        let mut avg = first.clone();
        for (li, lp) in avg.params.iter_mut().enumerate() {
            let tensors_of = |s: &ModelState, slot: usize| -> Vec<f64> {
                layer_tensors(&s.params[li])[slot].data().to_vec()
            };
            for (slot, dst) in layer_tensors_mut(lp).into_iter().enumerate() {
                let mut acc = vec![0.0; dst.numel()];
                for (s, w) in states.iter().zip(weights) {
                    for (a, v) in acc.iter_mut().zip(tensors_of(s, slot)) {
                        *a += w * v;
                    }
                }
                for (d, a) in dst.data_mut().iter_mut().zip(acc) {
                    *d = a / wsum;
                }
            }
        }
        Ok(avg)
    }
}

impl Shape {
    fn numel_last_dim(&self) -> usize {
        match self {
            Shape::Hwc(_, _, c) => *c,
            Shape::Flat(n) => *n,
        }
    }
}

/// All tensors of a layer in a fixed slot order.
pub fn layer_tensors(p: &LayerParams) -> Vec<&Tensor> {
    match p {
        LayerParams::Conv { kernel, bias } => vec![kernel, bias],
        LayerParams::Bn {
            gamma,
            beta,
            moving_mean,
            moving_var,
        } => vec![gamma, beta, moving_mean, moving_var],
        LayerParams::Dense { weight, bias } => vec![weight, bias],
        LayerParams::None => vec![],
    }
}

pub fn layer_tensors_mut(p: &mut LayerParams) -> Vec<&mut Tensor> {
    match p {
        LayerParams::Conv { kernel, bias } => vec![kernel, bias],
        LayerParams::Bn {
            gamma,
            beta,
            moving_mean,
            moving_var,
        } => vec![gamma, beta, moving_mean, moving_var],
        LayerParams::Dense { weight, bias } => vec![weight, bias],
        LayerParams::None => vec![],
    }
}

/// Trainable tensors only, in named order (moving statistics excluded).
pub fn trainable_tensors_mut(p: &mut LayerParams) -> Vec<&mut Tensor> {
    match p {
        LayerParams::Conv { kernel, bias } => vec![kernel, bias],
        LayerParams::Bn { gamma, beta, .. } => vec![gamma, beta],
        LayerParams::Dense { weight, bias } => vec![weight, bias],
        LayerParams::None => vec![],
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::spec::student_spec;

    #[test]
    fn materialized_counts_match_spec_counts() {
        let spec = student_spec();
        let state = ModelState::init(&spec, 7).unwrap();
        assert_eq!(state.parameter_counts(), spec.count_parameters().unwrap());
    }

    #[test]
    fn init_is_deterministic() {
        let spec = student_spec();
        let a = ModelState::init(&spec, 42).unwrap();
        let b = ModelState::init(&spec, 42).unwrap();
        assert_eq!(a, b);
        let c = ModelState::init(&spec, 43).unwrap();
        assert_ne!(a, c);
    }

    #[test]
    fn average_of_identical_states_is_identity() {
        let spec = student_spec();
        let a = ModelState::init(&spec, 1).unwrap();
        let avg = ModelState::weighted_average(&[&a, &a], &[1.0, 1.0]).unwrap();
        assert_eq!(a, avg);
    }
}
