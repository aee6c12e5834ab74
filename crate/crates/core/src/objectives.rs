//! Loss terms shared by the training stages.
//!
//! Each loss has a `*_rows` form returning one value per batch row and a
//! batch-mean form. All inputs are tape handles so that the same code path
//! serves training and forward-only evaluation.

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, Tape, Var};

/// Tolerance on row norms for inputs that must be unit vectors.
pub const UNIT_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub alpha1: f64,
    pub alpha2: f64,
    pub alpha3: f64,
    pub beta1: f64,
    pub gamma_prime: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha1: 8.0,
            alpha2: 2.0,
            alpha3: 0.4,
            beta1: 0.8,
            gamma_prime: 8.0,
            tau: 0.01,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            self.alpha1,
            self.alpha2,
            self.alpha3,
            self.beta1,
            self.gamma_prime,
        ];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be finite and ≥ 0: {self:?}"
            )));
        }
        if !(self.tau.is_finite() && self.tau > 0.0) {
            return Err(Error::Config(format!("tau must be > 0, got {}", self.tau)));
        }
        Ok(())
    }
}

pub fn check_unit_rows(rows: &DenseArray, what: &str) -> Result<()> {
    let w = rows.cols();
    for (i, r) in rows.data().chunks(w).enumerate() {
        let n = crate::numerics::l2_norm(r);
        if (n - 1.0).abs() > UNIT_TOL {
            return Err(Error::invalid(format!(
                "{what} row {i} has norm {n}, expected 1"
            )));
        }
    }
    Ok(())
}

fn similarity_logits(tape: &mut Tape, features: Var, embeddings: Var, tau: f64) -> Result<Var> {
    check_unit_rows(tape.value(features), "feature")?;
    check_unit_rows(tape.value(embeddings), "embedding")?;
    if tau <= 0.0 {
        return Err(Error::invalid(format!("tau must be positive, got {tau}")));
    }
    let et = tape.transpose(embeddings)?;
    let sims = tape.matmul(features, et)?;
    tape.scale(sims, 1.0 / tau)
}

/// Per-row `−log softmax_k(⟨z_i, w_k⟩/τ)` at `k = labels[i]`.
pub fn contrastive_ce_rows(
    tape: &mut Tape,
    features: Var,
    embeddings: Var,
    labels: &[usize],
    tau: f64,
) -> Result<Var> {
    let b = tape.value(features).rows();
    let k = tape.value(embeddings).rows();
    if labels.len() != b {
        return Err(Error::shape(
            "contrastive_ce",
            format!("{} labels for {b} feature rows", labels.len()),
        ));
    }
    let logits = similarity_logits(tape, features, embeddings, tau)?;
    let logp = tape.log_softmax(logits, 1)?;
    let onehot = tape.constant(DenseArray::one_hot(labels, k)?)?;
    let picked = tape.mul(logp, onehot)?;
    let picked = tape.sum_axis(picked, 1)?;
    tape.scale(picked, -1.0)
}

pub fn contrastive_ce(
    tape: &mut Tape,
    features: Var,
    embeddings: Var,
    labels: &[usize],
    tau: f64,
) -> Result<Var> {
    let rows = contrastive_ce_rows(tape, features, embeddings, labels, tau)?;
    tape.mean_all(rows)
}

/// Per-row squared L2 distance `‖a_i − b_i‖²`.
pub fn l2_distill_rows(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    if tape.value(a).shape() != tape.value(b).shape() {
        return Err(Error::shape(
            "l2_distill",
            format!("{:?} vs {:?}", tape.value(a).shape(), tape.value(b).shape()),
        ));
    }
    let diff = tape.sub(a, b)?;
    let sq = tape.mul(diff, diff)?;
    let last = tape.value(sq).rank() - 1;
    tape.sum_axis(sq, last)
}

pub fn l2_distill(tape: &mut Tape, a: Var, b: Var) -> Result<Var> {
    let rows = l2_distill_rows(tape, a, b)?;
    tape.mean_all(rows)
}

/// Cross-entropy of the domain softmax against the uniform target.
pub fn confusion_loss(
    tape: &mut Tape,
    features: Var,
    domain_embeddings: Var,
    tau: f64,
) -> Result<Var> {
    let ns = tape.value(domain_embeddings).rows();
    if ns < 2 {
        return Err(Error::invalid(format!(
            "confusion loss needs ≥ 2 domains, got {ns}"
        )));
    }
    let logits = similarity_logits(tape, features, domain_embeddings, tau)?;
    let logp = tape.log_softmax(logits, 1)?;
    let per_row = tape.mean_axis(logp, 1)?;
    let m = tape.mean_all(per_row)?;
    tape.scale(m, -1.0)
}

/// Per-row robust surrogate `CE(stylized) − γ′·‖stylized − original‖²`.
pub fn worst_surrogate_rows(
    tape: &mut Tape,
    stylized: Var,
    class_embeddings: Var,
    labels: &[usize],
    originals: Var,
    gamma_prime: f64,
    tau: f64,
) -> Result<Var> {
    let ce = contrastive_ce_rows(tape, stylized, class_embeddings, labels, tau)?;
    let kg = l2_distill_rows(tape, stylized, originals)?;
    let pen = tape.scale(kg, gamma_prime)?;
    tape.sub(ce, pen)
}

pub fn worst_surrogate(
    tape: &mut Tape,
    stylized: Var,
    class_embeddings: Var,
    labels: &[usize],
    originals: Var,
    gamma_prime: f64,
    tau: f64,
) -> Result<Var> {
    let rows = worst_surrogate_rows(
        tape,
        stylized,
        class_embeddings,
        labels,
        originals,
        gamma_prime,
        tau,
    )?;
    tape.mean_all(rows)
}

/// Softmax class probabilities `softmax(⟨z_i, w_k⟩/τ)` without a tape.
pub fn class_probabilities(
    features: &DenseArray,
    embeddings: &DenseArray,
    tau: f64,
) -> Result<DenseArray> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone())?;
    let e = tape.constant(embeddings.clone())?;
    let logits = similarity_logits(&mut tape, f, e, tau)?;
    let p = tape.softmax(logits, 1)?;
    Ok(tape.value(p).clone())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(tape: &Tape, v: Var) -> f64 {
        tape.value(v).item().unwrap()
    }

    #[test]
    fn uniform_similarities_give_log_k() {
        let mut t = Tape::new();
        // Every embedding orthogonal to the feature: all logits zero.
        let mut emb = DenseArray::zeros(vec![7, 8]);
        for k in 0..7 {
            emb.data_mut()[k * 8 + 1 + (k % 7)] = 1.0;
        }
        let mut feat = DenseArray::zeros(vec![1, 8]);
        feat.data_mut()[0] = 1.0;
        let f = t.constant(feat).unwrap();
        let e = t.constant(emb).unwrap();
        let l = contrastive_ce(&mut t, f, e, &[3], 0.01).unwrap();
        assert!((scalar(&t, l) - 7f64.ln()).abs() < 1e-12);
        assert!((7f64.ln() - 1.94591).abs() < 1e-5);
    }

    #[test]
    fn two_class_closed_form() {
        let mut t = Tape::new();
        let f = t
            .constant(DenseArray::from_rows(&[[1.0, 0.0]]).unwrap())
            .unwrap();
        let e = t
            .constant(DenseArray::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap())
            .unwrap();
        let l = contrastive_ce(&mut t, f, e, &[0], 1.0).unwrap();
        let expect = (1.0 + (-1f64).exp()).ln();
        assert!((scalar(&t, l) - expect).abs() < 1e-14);
        assert!((expect - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn ce_rejects_bad_inputs() {
        let mut t = Tape::new();
        let f = t
            .constant(DenseArray::from_rows(&[[2.0, 0.0]]).unwrap())
            .unwrap();
        let e = t
            .constant(DenseArray::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap())
            .unwrap();
        assert!(contrastive_ce(&mut t, f, e, &[0], 1.0).is_err());
        let f = t
            .constant(DenseArray::from_rows(&[[1.0, 0.0]]).unwrap())
            .unwrap();
        assert!(contrastive_ce(&mut t, f, e, &[2], 1.0).is_err());
    }

    #[test]
    fn l2_distill_values() {
        let mut t = Tape::new();
        let a = t
            .constant(DenseArray::from_rows(&[[1.0, 0.0]]).unwrap())
            .unwrap();
        let b = t
            .constant(DenseArray::from_rows(&[[0.0, 1.0]]).unwrap())
            .unwrap();
        let l = l2_distill(&mut t, a, b).unwrap();
        assert_eq!(scalar(&t, l), 2.0);
        let l = l2_distill(&mut t, a, a).unwrap();
        assert_eq!(scalar(&t, l), 0.0);
        let c = t.constant(DenseArray::zeros(vec![1, 3])).unwrap();
        assert!(l2_distill(&mut t, a, c).is_err());
    }

    #[test]
    fn confusion_at_uniform_is_log_ns() {
        let mut t = Tape::new();
        let mut emb = DenseArray::zeros(vec![4, 5]);
        for m in 0..4 {
            emb.data_mut()[m * 5 + m + 1] = 1.0;
        }
        let mut feat = DenseArray::zeros(vec![2, 5]);
        feat.data_mut()[0] = 1.0;
        feat.data_mut()[5] = 1.0;
        let f = t.constant(feat).unwrap();
        let e = t.constant(emb).unwrap();
        let l = confusion_loss(&mut t, f, e, 0.01).unwrap();
        assert!((scalar(&t, l) - 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn confusion_two_domain_arithmetic() {
        // Unit embeddings placed so the domain softmax is exactly [0.9, 0.1].
        let tau = 0.5;
        let cos = 1.0 - tau * 9f64.ln();
        let mut t = Tape::new();
        let f = t
            .constant(DenseArray::from_rows(&[[1.0, 0.0]]).unwrap())
            .unwrap();
        let e = t
            .constant(
                DenseArray::from_rows(&[[1.0, 0.0], [cos, (1.0 - cos * cos).sqrt()]]).unwrap(),
            )
            .unwrap();
        let l = confusion_loss(&mut t, f, e, tau).unwrap();
        let expect = -0.5 * (0.9f64.ln() + 0.1f64.ln());
        assert!((scalar(&t, l) - expect).abs() < 1e-12);
        assert!((expect - 1.20397).abs() < 1e-5);
    }

    #[test]
    fn confusion_needs_two_domains() {
        let mut t = Tape::new();
        let f = t
            .constant(DenseArray::from_rows(&[[1.0, 0.0]]).unwrap())
            .unwrap();
        let e = t
            .constant(DenseArray::from_rows(&[[1.0, 0.0]]).unwrap())
            .unwrap();
        assert!(confusion_loss(&mut t, f, e, 0.01).is_err());
    }

    #[test]
    fn worst_surrogate_without_shift_is_ce() {
        let mut t = Tape::new();
        let f = t
            .constant(DenseArray::from_rows(&[[0.6, 0.8]]).unwrap())
            .unwrap();
        let e = t
            .constant(DenseArray::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap())
            .unwrap();
        let ce = contrastive_ce(&mut t, f, e, &[1], 0.5).unwrap();
        let w = worst_surrogate(&mut t, f, e, &[1], f, 8.0, 0.5).unwrap();
        assert_eq!(scalar(&t, ce), scalar(&t, w));
    }
}
