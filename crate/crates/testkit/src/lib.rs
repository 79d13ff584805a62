//! Test oracles kept deliberately independent of the engine: losses are
//! recomputed in 256-bit arbitrary-precision arithmetic, order statistics
//! by brute-force selection, and the staged-extinction algorithm by a
//! straight-line simulation.

use astro_float::{BigFloat, Consts, RoundingMode};

const PRECISION: usize = 256;
const RM: RoundingMode = RoundingMode::ToEven;

/// Arbitrary-precision scalar context for loss oracles.
pub struct Oracle {
    consts: Consts,
}

impl Default for Oracle {
    fn default() -> Self {
        Self::new()
    }
}

impl Oracle {
    pub fn new() -> Self {
        Oracle { consts: Consts::new().expect("constants cache") }
    }

    fn big(&self, v: f64) -> BigFloat {
        BigFloat::from_f64(v, PRECISION)
    }

    fn to_f64(&self, v: &BigFloat) -> f64 {
        let s = format!("{v}");
        s.parse::<f64>().unwrap_or(f64::NAN)
    }

    fn exp(&mut self, v: &BigFloat) -> BigFloat {
        v.exp(PRECISION, RM, &mut self.consts)
    }

    fn ln(&mut self, v: &BigFloat) -> BigFloat {
        v.ln(PRECISION, RM, &mut self.consts)
    }

    /// Temperature-scaled softmax with max-subtraction, in 256-bit
    /// precision, rounded to f64 at the very end.
    pub fn softmax(&mut self, logits: &[f64], temperature: f64) -> Vec<f64> {
        self.softmax_big(logits, temperature)
            .iter()
            .map(|p| self.to_f64(p))
            .collect()
    }

    fn softmax_big(&mut self, logits: &[f64], temperature: f64) -> Vec<BigFloat> {
        let t = self.big(temperature);
        let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let max = self.big(max);
        let exps: Vec<BigFloat> = logits
            .iter()
            .map(|&v| {
                let scaled = self.big(v).sub(&max, PRECISION, RM).div(&t, PRECISION, RM);
                self.exp(&scaled)
            })
            .collect();
        let mut sum = self.big(0.0);
        for e in &exps {
            sum = sum.add(e, PRECISION, RM);
        }
        exps.iter().map(|e| e.div(&sum, PRECISION, RM)).collect()
    }

    /// `-sum_k y_k ln(max(p_k, 1e-12))` over big-float probabilities.
    fn cross_entropy_big(&mut self, y: &[BigFloat], p: &[BigFloat]) -> BigFloat {
        let floor = self.big(1e-12);
        let mut total = self.big(0.0);
        for (yk, pk) in y.iter().zip(p) {
            let clamped =
                if pk.cmp(&floor).is_some_and(|c| c < 0) { floor.clone() } else { pk.clone() };
            let log = self.ln(&clamped);
            let term = yk.mul(&log, PRECISION, RM);
            total = total.add(&term, PRECISION, RM);
        }
        total.neg()
    }

    /// Cross-entropy of f64 inputs at 256-bit precision.
    pub fn cross_entropy(&mut self, y: &[f64], p: &[f64]) -> f64 {
        let yb: Vec<BigFloat> = y.iter().map(|&v| self.big(v)).collect();
        let pb: Vec<BigFloat> = p.iter().map(|&v| self.big(v)).collect();
        let result = self.cross_entropy_big(&yb, &pb);
        self.to_f64(&result)
    }

    /// The combined supervised + mimicry loss:
    /// `(1 - alpha) * CE(y, H(s)) + alpha * T^2 * CE(H(s/T), H(t/T))`,
    /// with the student distribution as the weighting argument of the
    /// teacher term.
    pub fn distillation_loss(
        &mut self,
        y: &[f64],
        student: &[f64],
        teacher: &[f64],
        alpha: f64,
        temperature: f64,
    ) -> f64 {
        let yb: Vec<BigFloat> = y.iter().map(|&v| self.big(v)).collect();
        let student_probs = self.softmax_big(student, 1.0);
        let supervised = self.cross_entropy_big(&yb, &student_probs);

        let soft_student = self.softmax_big(student, temperature);
        let soft_teacher = self.softmax_big(teacher, temperature);
        let teacher_term = self.cross_entropy_big(&soft_student, &soft_teacher);

        let a = self.big(alpha);
        let one_minus = self.big(1.0 - alpha);
        let t2 = self.big(temperature).mul(&self.big(temperature), PRECISION, RM);
        let total = one_minus.mul(&supervised, PRECISION, RM).add(
            &a.mul(&t2, PRECISION, RM).mul(&teacher_term, PRECISION, RM),
            PRECISION,
            RM,
        );
        self.to_f64(&total)
    }
}

/// Brute-force k-th largest by repeated maximum extraction; no sorting
/// operator shared with the engine. A rank past the end returns the
/// minimum.
pub fn kth_largest_by_counting(scores: &[f64], k: usize) -> Option<f64> {
    if scores.is_empty() {
        return None;
    }
    let k = k.min(scores.len());
    let mut remaining: Vec<f64> = scores.to_vec();
    let mut picked = 0.0;
    for _ in 0..k {
        let (index, _) = remaining
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))?;
        picked = remaining.swap_remove(index);
    }
    Some(picked)
}

/// Straight-line simulation of the staged-extinction algorithm over
/// scripted `(individual, fitness)` scores.
pub struct ExtinctionTraceOracle {
    pub v_t1: f64,
    pub v_t2: f64,
}

pub struct OracleGeneration {
    pub survivors_t1: Vec<u64>,
    pub survivors_t2: Vec<u64>,
    pub best: u64,
    pub v_t1: f64,
    pub v_t2: f64,
}

impl ExtinctionTraceOracle {
    pub fn new() -> Self {
        ExtinctionTraceOracle { v_t1: 0.0, v_t2: 0.0 }
    }

    /// Run one generation. `scores_t2`/`scores_t3` must cover at least the
    /// survivors of the preceding gate; extra entries are ignored. Ties at
    /// "best" resolve by lower id (oracle tables use equal-parameter
    /// genomes so the engine's parameter tie-break never differs).
    pub fn generation(
        &mut self,
        scores_t1: &[(u64, f64)],
        scores_t2: &[(u64, f64)],
        scores_t3: &[(u64, f64)],
        p: usize,
        q: usize,
    ) -> OracleGeneration {
        fn top(scores: &[(u64, f64)]) -> (u64, f64) {
            *scores
                .iter()
                .max_by(|a, b| a.1.total_cmp(&b.1).then(b.0.cmp(&a.0)))
                .expect("non-empty scores")
        }

        let values: Vec<f64> = scores_t1.iter().map(|&(_, f)| f).collect();
        let candidate = kth_largest_by_counting(&values, p).expect("non-empty");
        if candidate > self.v_t1 {
            self.v_t1 = candidate;
        }
        let mut survivors_t1: Vec<u64> = scores_t1
            .iter()
            .filter(|&&(_, f)| f >= self.v_t1)
            .map(|&(id, _)| id)
            .collect();
        if survivors_t1.is_empty() {
            survivors_t1.push(top(scores_t1).0);
        }

        let stage2: Vec<(u64, f64)> = scores_t2
            .iter()
            .filter(|(id, _)| survivors_t1.contains(id))
            .copied()
            .collect();
        let values: Vec<f64> = stage2.iter().map(|&(_, f)| f).collect();
        let candidate = kth_largest_by_counting(&values, q).expect("non-empty");
        if candidate > self.v_t2 {
            self.v_t2 = candidate;
        }
        let mut survivors_t2: Vec<u64> = stage2
            .iter()
            .filter(|&&(_, f)| f >= self.v_t2)
            .map(|&(id, _)| id)
            .collect();
        if survivors_t2.is_empty() {
            survivors_t2.push(top(&stage2).0);
        }

        let stage3: Vec<(u64, f64)> = scores_t3
            .iter()
            .filter(|(id, _)| survivors_t2.contains(id))
            .copied()
            .collect();
        let best = top(&stage3).0;

        OracleGeneration {
            survivors_t1,
            survivors_t2,
            best,
            v_t1: self.v_t1,
            v_t2: self.v_t2,
        }
    }
}

impl Default for ExtinctionTraceOracle {
    fn default() -> Self {
        Self::new()
    }
}

/// One-sided sign test: probability of at least `wins` successes in
/// `wins + losses` fair coin flips. Ties are excluded by the caller.
pub fn sign_test_p_value(wins: u32, losses: u32) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    let mut p = 0.0;
    for k in wins..=n {
        p += binomial(n, k) * 0.5f64.powi(n as i32);
    }
    p.min(1.0)
}

fn binomial(n: u32, k: u32) -> f64 {
    let k = k.min(n - k);
    let mut result = 1.0;
    for i in 0..k {
        result = result * (n - i) as f64 / (i + 1) as f64;
    }
    result
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn oracle_softmax_matches_simple_case() {
        let mut oracle = Oracle::new();
        let p = oracle.softmax(&[0.0, 0.0], 1.0);
        assert!((p[0] - 0.5).abs() < 1e-15);
        assert!((p[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn oracle_cross_entropy_ln2() {
        let mut oracle = Oracle::new();
        let v = oracle.cross_entropy(&[0.5, 0.5], &[0.5, 0.5]);
        assert!((v - std::f64::consts::LN_2).abs() < 1e-15, "{v}");
    }

    #[test]
    fn counting_kth_matches_definition() {
        assert_eq!(kth_largest_by_counting(&[0.5, 0.9, 0.7], 1), Some(0.9));
        assert_eq!(kth_largest_by_counting(&[0.6, 0.7, 0.8, 0.9, 1.0], 2), Some(0.9));
        assert_eq!(kth_largest_by_counting(&[0.3, 0.8], 7), Some(0.3));
        assert_eq!(kth_largest_by_counting(&[], 1), None);
    }

    #[test]
    fn sign_test_examples() {
        assert!((sign_test_p_value(10, 0) - 0.5f64.powi(10)).abs() < 1e-12);
        assert!((sign_test_p_value(5, 5) - 0.623046875).abs() < 1e-9);
        assert_eq!(sign_test_p_value(0, 0), 1.0);
    }
}
