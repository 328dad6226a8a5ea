use thiserror::Error;

use super::graph::{backward, no_grad};
use super::tensor::Tensor;

#[derive(Debug, Error)]
pub enum OracleError {
    #[error("oracle function is non-deterministic: repeated evaluation gave {0} then {1}")]
    NonDeterministic(f64, f64),
}

/// Central-difference gradient check of a scalar-valued function against the
/// reverse-mode gradient of `x`.
///
/// `f` must recompute the loss from `x`'s current storage; the check perturbs
/// that storage in place and restores it. Returns the maximum over
/// coordinates of `|analytic - numeric| / max(1e-8, |analytic| + |numeric|)`.
pub fn finite_difference_check<F>(mut f: F, x: &Tensor, step: f64) -> Result<f64, OracleError>
where
    F: FnMut() -> Tensor,
{
    assert!(step > 0.0, "finite_difference_check: step must be positive, got {step}");
    assert!(x.requires_grad(), "finite_difference_check: x must be a trainable leaf");

    // Determinism probe: two value-only evaluations must agree bit for bit.
    let probe_a = no_grad(&mut f).item();
    let probe_b = no_grad(&mut f).item();
    if probe_a.to_bits() != probe_b.to_bits() {
        return Err(OracleError::NonDeterministic(probe_a, probe_b));
    }

    x.zero_grad();
    let loss = f();
    assert_eq!(loss.numel(), 1, "finite_difference_check: f must return a scalar");
    backward(&loss);
    let analytic = x.grad().unwrap_or_else(|| vec![0.0; x.numel()]);

    let mut worst = 0.0f64;
    for i in 0..x.numel() {
        x.nudge_value(i, step);
        let plus = no_grad(&mut f).item();
        x.nudge_value(i, -2.0 * step);
        let minus = no_grad(&mut f).item();
        x.nudge_value(i, step);
        let numeric = (plus - minus) / (2.0 * step);
        let denom = (analytic[i].abs() + numeric.abs()).max(1e-8);
        worst = worst.max((analytic[i] - numeric).abs() / denom);
    }
    x.zero_grad();
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn quadratic_is_exact_up_to_roundoff() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let vals: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let x = Tensor::param(&[6], vals);
        let err = finite_difference_check(|| x.mul(&x).sum_all(), &x, 1e-5).unwrap();
        assert!(err < 1e-7, "sum of squares error {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::param(&[4], vec![0.5; 4]);
        let err = finite_difference_check(|| Tensor::scalar(3.0).scale(1.0), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_deterministic_function_is_rejected() {
        let x = Tensor::param(&[2], vec![1.0, 2.0]);
        let mut counter = 0.0;
        let err = finite_difference_check(
            || {
                counter += 1.0;
                Tensor::scalar(counter)
            },
            &x,
            1e-5,
        );
        assert!(matches!(err, Err(OracleError::NonDeterministic(_, _))));
    }

    #[test]
    fn restores_perturbed_values() {
        let x = Tensor::param(&[3], vec![1.0, 2.0, 3.0]);
        let before = x.to_vec();
        let _ = finite_difference_check(|| x.mul(&x).sum_all(), &x, 1e-5).unwrap();
        assert_eq!(x.to_vec(), before);
    }
}
