//! Losses: tempered softmax, cross-entropy, KL divergence, and the
//! combined distillation objective with its analytic logit gradients.

use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};
use crate::tensor::Tensor;

const PROB_CLAMP: f64 = 1e-12;
const ROW_SUM_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    CrossEntropy,
    KlDivergence,
    Combined,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossSpec {
    pub kind: LossKind,
    /// Weight on the hard-label term of the combined loss.
    pub alpha: f64,
    /// Temperature applied to logits in the distillation term. The
    /// hard-label cross-entropy term always uses temperature 1.
    pub temperature: f64,
    /// Scales the distillation term by T^2 (classic correction for the
    /// 1/T shrinkage of tempered-softmax gradients). Off by default.
    #[serde(default)]
    pub t_squared_scaling: bool,
}

impl LossSpec {
    pub fn cross_entropy() -> Self {
        LossSpec {
            kind: LossKind::CrossEntropy,
            alpha: 1.0,
            temperature: 1.0,
            t_squared_scaling: false,
        }
    }

    pub fn combined(alpha: f64, temperature: f64) -> Self {
        LossSpec {
            kind: LossKind::Combined,
            alpha,
            temperature,
            t_squared_scaling: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.alpha) {
            return Err(CoreError::domain(format!(
                "loss alpha {} outside [0,1]",
                self.alpha
            )));
        }
        if !(self.temperature > 0.0) || !self.temperature.is_finite() {
            return Err(CoreError::domain(format!(
                "temperature {} must be a positive finite real",
                self.temperature
            )));
        }
        Ok(())
    }
}

/// Tempered softmax over a rank-1 logit slice, max-subtracted for stability.
pub fn softmax_with_temperature(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(CoreError::domain(format!(
            "temperature {} must be a positive finite real",
            temperature
        )));
    }
    if logits.iter().any(|v| !v.is_finite()) {
        return Err(CoreError::domain("non-finite logits"));
    }
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = logits
        .iter()
        .map(|&z| ((z - max) / temperature).exp())
        .collect();
    let sum: f64 = out.iter().sum();
    out.iter_mut().for_each(|v| *v /= sum);
    Ok(out)
}

/// Row-wise tempered softmax on a (N, K) logit tensor.
pub fn softmax_rows(logits: &Tensor, temperature: f64) -> Result<Tensor> {
    let (n, k) = rows_of(logits)?;
    let mut out = Vec::with_capacity(n * k);
    for r in 0..n {
        out.extend(softmax_with_temperature(
            &logits.data()[r * k..(r + 1) * k],
            temperature,
        )?);
    }
    Tensor::from_vec(&[n, k], out)
}

fn rows_of(t: &Tensor) -> Result<(usize, usize)> {
    match t.shape() {
        [n, k] => Ok((*n, *k)),
        s => Err(CoreError::shape(format!(
            "expected (rows, classes) tensor, got {:?}",
            s
        ))),
    }
}

fn check_row_stochastic(t: &Tensor, what: &str) -> Result<()> {
    let (n, k) = rows_of(t)?;
    for r in 0..n {
        let sum: f64 = t.data()[r * k..(r + 1) * k].iter().sum();
        if (sum - 1.0).abs() > ROW_SUM_TOL {
            return Err(CoreError::domain(format!(
                "{} row {} sums to {} (expected 1)",
                what, r, sum
            )));
        }
    }
    Ok(())
}

/// Mean over the batch of -log p[true class], p clamped at 1e-12.
pub fn cross_entropy(probs: &Tensor, labels: &[usize]) -> Result<f64> {
    let (n, k) = rows_of(probs)?;
    if labels.len() != n {
        return Err(CoreError::shape(format!(
            "{} probability rows but {} labels",
            n,
            labels.len()
        )));
    }
    check_row_stochastic(probs, "probability")?;
    let mut total = 0.0;
    for (r, &label) in labels.iter().enumerate() {
        if label >= k {
            return Err(CoreError::domain(format!(
                "label {} out of range for {} classes",
                label, k
            )));
        }
        total -= probs.data()[r * k + label].max(PROB_CLAMP).ln();
    }
    Ok(total / n as f64)
}

/// Mean over rows of sum_k p_k ln(p_k / q_k), with 0 ln(0/q) = 0 and
/// q clamped at 1e-12.
pub fn kl_divergence(p: &Tensor, q: &Tensor) -> Result<f64> {
    if p.shape() != q.shape() {
        return Err(CoreError::shape(format!(
            "KL shape mismatch: {:?} vs {:?}",
            p.shape(),
            q.shape()
        )));
    }
    let (n, k) = rows_of(p)?;
    check_row_stochastic(p, "p")?;
    check_row_stochastic(q, "q")?;
    let mut total = 0.0;
    for r in 0..n {
        for c in 0..k {
            let pv = p.data()[r * k + c];
            if pv > 0.0 {
                total += pv * (pv / q.data()[r * k + c].max(PROB_CLAMP)).ln();
            }
        }
    }
    Ok(total / n as f64)
}

/// A loss evaluation at fixed logits: value, its decomposition, and the
/// gradient with respect to the logits (already divided by batch size).
pub struct LossEval {
    pub total: f64,
    pub student: f64,
    pub distill: f64,
    pub dlogits: Tensor,
}

/// Evaluates `spec` at `logits` and returns the analytic logit gradient.
///
/// Hard labels feed a temperature-1 cross-entropy; `soft_targets` rows are
/// the distillation target compared against a temperature-T softmax of the
/// logits.
pub fn loss_and_grad(
    logits: &Tensor,
    labels: &[usize],
    soft_targets: Option<&Tensor>,
    spec: &LossSpec,
) -> Result<LossEval> {
    spec.validate()?;
    let (n, k) = rows_of(logits)?;
    let nf = n as f64;
    let scale = if spec.t_squared_scaling {
        spec.temperature * spec.temperature
    } else {
        1.0
    };

    let hard = |dl: &mut [f64], weight: f64| -> Result<f64> {
        let p1 = softmax_rows(logits, 1.0)?;
        let ce = cross_entropy(&p1, labels)?;
        for r in 0..n {
            for c in 0..k {
                let y = if labels[r] == c { 1.0 } else { 0.0 };
                dl[r * k + c] += weight * (p1.data()[r * k + c] - y) / nf;
            }
        }
        Ok(ce)
    };
    let soft = |dl: &mut [f64], weight: f64| -> Result<f64> {
        let targets = soft_targets.ok_or_else(|| {
            CoreError::domain("distillation loss requires soft targets")
        })?;
        let qt = softmax_rows(logits, spec.temperature)?;
        let kl = kl_divergence(targets, &qt)? * scale;
        let w = weight * scale / (spec.temperature * nf);
        for i in 0..n * k {
            dl[i] += w * (qt.data()[i] - targets.data()[i]);
        }
        Ok(kl)
    };

    let mut dl = vec![0.0; n * k];
    let (total, student, distill) = match spec.kind {
        LossKind::CrossEntropy => {
            let ce = hard(&mut dl, 1.0)?;
            (ce, ce, 0.0)
        }
        LossKind::KlDivergence => {
            let kl = soft(&mut dl, 1.0)?;
            (kl, 0.0, kl)
        }
        LossKind::Combined => {
            let ce = hard(&mut dl, spec.alpha)?;
            let kl = soft(&mut dl, 1.0 - spec.alpha)?;
            (spec.alpha * ce + (1.0 - spec.alpha) * kl, ce, kl)
        }
    };
    Ok(LossEval {
        total,
        student,
        distill,
        dlogits: Tensor::from_vec(&[n, k], dl)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::from_vec(shape, data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_uniform_on_equal_logits() {
        for temp in [0.5, 1.0, 7.0] {
            let p = softmax_with_temperature(&[0.0, 0.0, 0.0], temp).unwrap();
            for v in p {
                assert!((v - 1.0 / 3.0).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn softmax_frozen_value() {
        // Independently computed: e^1, e^2, e^3 normalized.
        let p = softmax_with_temperature(&[1.0, 2.0, 3.0], 1.0).unwrap();
        let expected = [0.09003057317038046, 0.24472847105479767, 0.6652409557748219];
        for (a, b) in p.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12, "{} vs {}", a, b);
        }
    }

    #[test]
    fn softmax_high_temperature_flattens() {
        let p = softmax_with_temperature(&[1.0, 2.0, 3.0], 1e6).unwrap();
        for v in p {
            assert!((v - 1.0 / 3.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_rejects_bad_inputs() {
        assert!(softmax_with_temperature(&[0.0], 0.0).is_err());
        assert!(softmax_with_temperature(&[0.0], -1.0).is_err());
        assert!(softmax_with_temperature(&[f64::NAN], 1.0).is_err());
    }

    #[test]
    fn cross_entropy_perfect_prediction() {
        let ce = cross_entropy(&t(&[1, 3], &[1.0, 0.0, 0.0]), &[0]).unwrap();
        assert!(ce.abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_uniform_is_ln3() {
        let third = 1.0 / 3.0;
        let ce = cross_entropy(&t(&[1, 3], &[third, third, third]), &[2]).unwrap();
        assert!((ce - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_two_row_mean() {
        let ce = cross_entropy(&t(&[2, 2], &[0.5, 0.5, 0.25, 0.75]), &[0, 1]).unwrap();
        let expected = (-(0.5f64.ln()) - 0.75f64.ln()) / 2.0;
        assert!((ce - expected).abs() < 1e-12);
        assert!((ce - 0.4904146265058631).abs() < 1e-9);
    }

    #[test]
    fn cross_entropy_rejects_bad_rows() {
        assert!(cross_entropy(&t(&[1, 2], &[0.6, 0.6]), &[0]).is_err());
        assert!(cross_entropy(&t(&[1, 2], &[0.5, 0.5]), &[2]).is_err());
    }

    #[test]
    fn kl_identity_is_zero() {
        let p = t(&[2, 2], &[0.3, 0.7, 0.9, 0.1]);
        assert!(kl_divergence(&p, &p).unwrap().abs() < 1e-12);
    }

    #[test]
    fn kl_frozen_values() {
        let kl = kl_divergence(&t(&[1, 2], &[1.0, 0.0]), &t(&[1, 2], &[0.5, 0.5])).unwrap();
        assert!((kl - 2f64.ln()).abs() < 1e-12);

        let kl = kl_divergence(&t(&[1, 2], &[0.5, 0.5]), &t(&[1, 2], &[0.9, 0.1])).unwrap();
        let expected = 0.5 * (0.5f64 / 0.9).ln() + 0.5 * (0.5f64 / 0.1).ln();
        assert!((kl - expected).abs() < 1e-12);
        assert!((kl - 0.5108256237659907).abs() < 1e-9);
    }

    #[test]
    fn kl_shape_mismatch_rejected() {
        let p = t(&[1, 2], &[0.5, 0.5]);
        let q = t(&[1, 3], &[0.4, 0.3, 0.3]);
        assert!(kl_divergence(&p, &q).is_err());
    }

    #[test]
    fn combined_loss_decomposition() {
        let logits = t(&[2, 3], &[0.3, -0.2, 1.0, 0.0, 0.5, -1.0]);
        let targets = softmax_rows(&t(&[2, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]), 0.5).unwrap();
        let spec = LossSpec::combined(0.1, 10.0);
        let eval = loss_and_grad(&logits, &[2, 1], Some(&targets), &spec).unwrap();
        assert!(
            (eval.total - (0.1 * eval.student + 0.9 * eval.distill)).abs() < 1e-12
        );
    }
}
