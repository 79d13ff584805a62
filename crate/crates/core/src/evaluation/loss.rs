//! Temperature-scaled softmax, cross-entropy, and the mimicry
//! (distillation) loss with its analytic gradient.
//!
//! The mimicry loss combines the supervised term with a teacher term:
//!
//! ```text
//! L = (1 - alpha) * CE(y, H(s)) + alpha * T^2 * CE(H(s/T), H(t/T))
//! ```
//!
//! where `H` is the softmax, `s`/`t` are student/teacher logits and
//! `CE(a, b) = -sum_k a_k ln b_k`. Note the argument order of the teacher
//! term: the student distribution is the weighting argument and the teacher
//! distribution sits inside the logarithm. The gradient below follows that
//! exact form.

/// Probabilities are clamped to this floor before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Numerically stable temperature-scaled softmax: `softmax(v / t)`.
///
/// Entries are positive and sum to 1 within 1e-9; the max is subtracted
/// before exponentiation so huge logits cannot overflow.
pub fn softmax(logits: &[f64], temperature: f64) -> Vec<f64> {
    assert!(temperature > 0.0, "temperature must be positive");
    assert!(!logits.is_empty(), "softmax of an empty vector");
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&v| ((v - max) / temperature).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Cross-entropy of distribution `p` under weights `y`:
/// `-sum_k y_k ln(max(p_k, PROB_FLOOR))`.
pub fn cross_entropy(y: &[f64], p: &[f64]) -> f64 {
    assert_eq!(y.len(), p.len(), "cross-entropy arguments differ in length");
    -y.iter()
        .zip(p)
        .map(|(&yk, &pk)| yk * pk.max(PROB_FLOOR).ln())
        .sum::<f64>()
}

/// The combined supervised + mimicry loss over one logits vector.
pub fn distillation_loss(
    y: &[f64],
    student: &[f64],
    teacher: &[f64],
    alpha: f64,
    temperature: f64,
) -> f64 {
    assert_eq!(y.len(), student.len());
    assert_eq!(student.len(), teacher.len());
    debug_assert!((0.0..=1.0).contains(&alpha));
    let supervised = cross_entropy(y, &softmax(student, 1.0));
    let soft_student = softmax(student, temperature);
    let soft_teacher = softmax(teacher, temperature);
    let teacher_term = cross_entropy(&soft_student, &soft_teacher);
    (1.0 - alpha) * supervised + alpha * temperature * temperature * teacher_term
}

/// Gradient of `cross_entropy(y, softmax(s))` with respect to `s`, for a
/// one-hot (or any normalized) `y`: `softmax(s) - y`.
pub fn supervised_grad(y: &[f64], student: &[f64]) -> Vec<f64> {
    let probs = softmax(student, 1.0);
    probs.iter().zip(y).map(|(&p, &yk)| p - yk).collect()
}

/// Gradient of [`distillation_loss`] with respect to the student logits.
///
/// The teacher term differentiates through the weighting argument: with
/// `p = H(s/T)` and `c_k = ln H(t/T)_k`,
/// `d/ds_j [alpha T^2 CE(p, q)] = alpha * T * p_j * (<c>_p - c_j)`.
pub fn distillation_grad(
    y: &[f64],
    student: &[f64],
    teacher: &[f64],
    alpha: f64,
    temperature: f64,
) -> Vec<f64> {
    let k = y.len();
    let supervised = supervised_grad(y, student);
    let p = softmax(student, temperature);
    let c: Vec<f64> = softmax(teacher, temperature)
        .iter()
        .map(|&q| q.max(PROB_FLOOR).ln())
        .collect();
    let mean_c: f64 = p.iter().zip(&c).map(|(&pj, &cj)| pj * cj).sum();
    (0..k)
        .map(|j| {
            (1.0 - alpha) * supervised[j] + alpha * temperature * p[j] * (mean_c - c[j])
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn softmax_of_equal_logits_is_uniform() {
        assert_eq!(softmax(&[0.0, 0.0], 1.0), vec![0.5, 0.5]);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let p = softmax(&[1000.0, 0.0], 1.0);
        assert!(p.iter().all(|v| v.is_finite()));
        assert!(close(p[0], 1.0, 1e-12));
        assert!(close(p[1], 0.0, 1e-12));
    }

    #[test]
    fn softmax_sums_to_one_and_shift_invariant() {
        let v = [2.0, -1.0, 0.25, 7.5];
        for t in [0.5, 1.0, 5.0] {
            let p = softmax(&v, t);
            assert!(close(p.iter().sum::<f64>(), 1.0, 1e-9));
            let shifted: Vec<f64> = v.iter().map(|x| x + 123.456).collect();
            let ps = softmax(&shifted, t);
            for (a, b) in p.iter().zip(&ps) {
                assert!(close(*a, *b, 1e-9));
            }
        }
    }

    #[test]
    fn cross_entropy_of_perfect_prediction_is_zero() {
        assert_eq!(cross_entropy(&[0.0, 1.0, 0.0], &[0.0, 1.0, 0.0]), 0.0);
    }

    #[test]
    fn cross_entropy_of_fair_coin_is_ln_two() {
        assert!(close(
            cross_entropy(&[0.5, 0.5], &[0.5, 0.5]),
            std::f64::consts::LN_2,
            1e-15
        ));
    }

    #[test]
    fn cross_entropy_definition() {
        assert!(close(cross_entropy(&[1.0, 0.0], &[0.7, 0.3]), -(0.7f64.ln()), 1e-15));
    }

    #[test]
    fn alpha_zero_reduces_to_supervised_loss() {
        let y = [0.0, 1.0, 0.0];
        let s = [0.3, 1.4, -0.9];
        let t = [5.0, -2.0, 0.0];
        let loss = distillation_loss(&y, &s, &t, 0.0, 5.0);
        let supervised = cross_entropy(&y, &softmax(&s, 1.0));
        assert_eq!(loss, supervised);
    }

    #[test]
    fn identical_logits_at_alpha_one_give_self_entropy() {
        // With s = t, alpha = 1, T = 1 the loss is CE(H(s), H(s)): the
        // entropy of the student distribution, not zero.
        let s = [0.2, -1.0, 0.7];
        let loss = distillation_loss(&[1.0, 0.0, 0.0], &s, &s, 1.0, 1.0);
        let p = softmax(&s, 1.0);
        let entropy: f64 = -p.iter().map(|&x| x * x.ln()).sum::<f64>();
        assert!(close(loss, entropy, 1e-12));
        assert!(loss > 0.0);
    }

    #[test]
    fn gradient_matches_central_differences() {
        let y = [0.0, 0.0, 1.0, 0.0];
        let s = [0.5, -0.25, 1.5, 0.0];
        let t = [2.0, 0.0, 1.0, -1.0];
        let (alpha, temp) = (0.9, 5.0);
        let grad = distillation_grad(&y, &s, &t, alpha, temp);
        let h = 1e-6;
        for j in 0..s.len() {
            let mut plus = s;
            let mut minus = s;
            plus[j] += h;
            minus[j] -= h;
            let numeric = (distillation_loss(&y, &plus, &t, alpha, temp)
                - distillation_loss(&y, &minus, &t, alpha, temp))
                / (2.0 * h);
            assert!(
                close(grad[j], numeric, 1e-7),
                "component {j}: analytic {} vs numeric {numeric}",
                grad[j]
            );
        }
    }
}
