//! Domain-specific prototype cache and its blend with the invariant
//! classifier.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, VisualPromptSet};
use crate::error::{Error, Result};
use crate::numerics::{dot, normalize_in_place, DenseArray, Parameter, Sgd, Tape, Var};
use crate::objectives::{check_unit_rows, class_probabilities, contrastive_ce, UNIT_TOL};
use crate::stages::{argmax_rows, minibatches, EpochMeans, StageOptions, StageReport, TrainingSet};

/// Keys are unit prototype rows, row `m·N_c + k` for domain `m`, class `k`;
/// values are the matching one-hot class rows.
#[derive(Clone, Debug, PartialEq)]
pub struct PrototypeBank {
    pub keys: DenseArray,
    values: DenseArray,
    pub n_classes: usize,
    pub n_domains: usize,
    pub beta_sharp: f64,
}

impl PrototypeBank {
    /// Checks unit keys and builds the one-hot values.
    pub fn new(
        keys: DenseArray,
        n_classes: usize,
        n_domains: usize,
        beta_sharp: f64,
    ) -> Result<Self> {
        if keys.rank() != 2 || keys.rows() != n_classes * n_domains {
            return Err(Error::shape(
                "prototype_bank",
                format!(
                    "keys {:?} for {n_domains} domains × {n_classes} classes",
                    keys.shape()
                ),
            ));
        }
        if !(beta_sharp.is_finite() && beta_sharp >= 0.0) {
            return Err(Error::Config(format!(
                "beta_sharp must be ≥ 0, got {beta_sharp}"
            )));
        }
        check_unit_rows(&keys, "prototype")?;
        let labels: Vec<usize> = (0..n_domains).flat_map(|_| 0..n_classes).collect();
        Ok(Self {
            keys,
            values: DenseArray::one_hot(&labels, n_classes)?,
            n_classes,
            n_domains,
            beta_sharp,
        })
    }

    pub fn values(&self) -> &DenseArray {
        &self.values
    }

    pub fn row_of(&self, domain: usize, class: usize) -> usize {
        domain * self.n_classes + class
    }

    pub fn dim(&self) -> usize {
        self.keys.cols()
    }
}

/// Mean specific-branch feature of every (domain, class) cell, renormalized.
pub fn init_prototypes(
    backbone: &Backbone,
    set: &TrainingSet,
    specific: &VisualPromptSet,
    beta_sharp: f64,
) -> Result<PrototypeBank> {
    let feats = backbone.embed(&set.intermediates, specific)?;
    prototypes_from_features(
        &feats,
        &set.labels,
        &set.domains,
        backbone.config().n_classes,
        set.source_domains.len(),
        beta_sharp,
    )
}

pub fn prototypes_from_features(
    features: &DenseArray,
    labels: &[usize],
    domains: &[usize],
    n_classes: usize,
    n_domains: usize,
    beta_sharp: f64,
) -> Result<PrototypeBank> {
    let d = features.cols();
    let mut sums = vec![0.0; n_classes * n_domains * d];
    let mut counts = vec![0usize; n_classes * n_domains];
    for (i, (&k, &m)) in labels.iter().zip(domains).enumerate() {
        let r = m * n_classes + k;
        counts[r] += 1;
        for (s, &v) in sums[r * d..(r + 1) * d].iter_mut().zip(features.row(i)) {
            *s += v;
        }
    }
    if let Some(r) = counts.iter().position(|&c| c == 0) {
        return Err(Error::invalid(format!(
            "no samples for domain {} class {}",
            r / n_classes,
            r % n_classes
        )));
    }
    for (r, &n) in counts.iter().enumerate() {
        let row = &mut sums[r * d..(r + 1) * d];
        row.iter_mut().for_each(|v| *v /= n as f64);
        if normalize_in_place(row) == 0.0 {
            return Err(Error::invalid(format!(
                "prototype row {r} has zero mean feature"
            )));
        }
    }
    PrototypeBank::new(
        DenseArray::new(vec![n_classes * n_domains, d], sums)?,
        n_classes,
        n_domains,
        beta_sharp,
    )
}

/// `exp(−β(1 − ⟨query, key_r⟩))` for every prototype row.
pub fn affinity(query: &[f64], bank: &PrototypeBank) -> Result<Vec<f64>> {
    let n = crate::numerics::l2_norm(query);
    if (n - 1.0).abs() > UNIT_TOL {
        return Err(Error::invalid(format!("query norm {n}, expected 1")));
    }
    if query.len() != bank.dim() {
        return Err(Error::shape(
            "affinity",
            format!("query length {} ≠ {}", query.len(), bank.dim()),
        ));
    }
    Ok((0..bank.keys.rows())
        .map(|r| (-bank.beta_sharp * (1.0 - dot(query, bank.keys.row(r)))).exp())
        .collect())
}

/// Raw cache scores `φ · L_c` over classes.
pub fn specific_predict(query: &[f64], bank: &PrototypeBank) -> Result<Vec<f64>> {
    let phi = affinity(query, bank)?;
    let mut scores = vec![0.0; bank.n_classes];
    for (r, &p) in phi.iter().enumerate() {
        for (s, &v) in scores.iter_mut().zip(bank.values.row(r)) {
            *s += p * v;
        }
    }
    Ok(scores)
}

/// Row-wise [`specific_predict`] for a batch of queries `[B, d]`.
pub fn specific_scores(queries: &DenseArray, bank: &PrototypeBank) -> Result<DenseArray> {
    let rows = (0..queries.rows())
        .map(|i| specific_predict(queries.row(i), bank))
        .collect::<Result<Vec<_>>>()?;
    DenseArray::from_rows(&rows)
}

#[derive(Clone, Debug, PartialEq)]
pub struct Prediction {
    /// Blended scores `[B, N_c]`.
    pub scores: DenseArray,
    pub classes: Vec<usize>,
}

/// `P = P^I + β2·P^S` from invariant features `[B, d]` against the class
/// embeddings and specific features `[B, d]` against the cache.
pub fn combined_predict(
    invariant_features: &DenseArray,
    specific_features: &DenseArray,
    class_embeddings: &DenseArray,
    bank: &PrototypeBank,
    beta2: f64,
    tau: f64,
) -> Result<Prediction> {
    if invariant_features.rows() != specific_features.rows() {
        return Err(Error::shape(
            "combined_predict",
            "feature batches differ in length",
        ));
    }
    let mut scores = class_probabilities(invariant_features, class_embeddings, tau)?;
    let ps = specific_scores(specific_features, bank)?;
    for (p, s) in scores.data_mut().iter_mut().zip(ps.data()) {
        *p += beta2 * s;
    }
    let classes = argmax_rows(&scores);
    Ok(Prediction { scores, classes })
}

/// Records `P^S = exp(β(keys·qᵀ − 1))·L_c` for queries `[B, d]`.
pub(crate) fn specific_scores_on_tape(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    bank: &PrototypeBank,
) -> Result<Var> {
    let kt = tape.transpose(keys)?;
    let cos = tape.matmul(queries, kt)?;
    let shifted = tape.add_scalar(cos, -1.0)?;
    let scaled = tape.scale(shifted, bank.beta_sharp)?;
    let phi = tape.exp(scaled)?;
    let values = tape.constant(bank.values.clone())?;
    tape.matmul(phi, values)
}

/// Softmax cross-entropy over cache scores; the value in the fine-tuning
/// objective for one batch.
pub fn cache_ce(
    tape: &mut Tape,
    queries: Var,
    keys: Var,
    bank: &PrototypeBank,
    labels: &[usize],
) -> Result<Var> {
    let scores = specific_scores_on_tape(tape, queries, keys, bank)?;
    let logp = tape.log_softmax(scores, 1)?;
    let onehot = tape.constant(DenseArray::one_hot(labels, bank.n_classes)?)?;
    let picked = tape.mul(logp, onehot)?;
    let per_row = tape.sum_axis(picked, 1)?;
    let m = tape.mean_all(per_row)?;
    tape.scale(m, -1.0)
}

/// SGD on the keys against class labels of the specific-branch features;
/// keys are renormalized after every step and the values never change.
pub fn finetune_prototypes(
    bank: &PrototypeBank,
    backbone: &Backbone,
    set: &TrainingSet,
    specific: &VisualPromptSet,
    opts: &StageOptions,
) -> Result<(PrototypeBank, StageReport)> {
    let feats = backbone.embed(&set.intermediates, specific)?;
    finetune_on_features(bank, &feats, &set.labels, &set.sample_ids, opts)
}

pub fn finetune_on_features(
    bank: &PrototypeBank,
    features: &DenseArray,
    labels: &[usize],
    sample_ids: &[usize],
    opts: &StageOptions,
) -> Result<(PrototypeBank, StageReport)> {
    let mut report = StageReport::new("proto", &["cache_ce"]);
    let mut keys = Parameter::new(bank.keys.clone());
    let mut opt = Sgd::new(opts.lr, opts.weight_decay).with_momentum(opts.momentum);
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut out = bank.clone();
    for _ in 0..opts.epochs {
        let mut means = EpochMeans::new(1);
        for rows in minibatches(features.rows(), opts.batch_size, &mut rng) {
            report
                .samples_seen
                .extend(rows.iter().map(|&r| sample_ids[r]));
            let mut tape = Tape::new();
            let k = tape.param(&keys)?;
            let q = tape.constant(features.select_rows(&rows))?;
            let batch_labels: Vec<usize> = rows.iter().map(|&r| labels[r]).collect();
            let loss = cache_ce(&mut tape, q, k, &out, &batch_labels)?;
            means.add(&[tape.value(loss).item()?]);
            let grads = tape.backward(loss)?;
            grads.accumulate(k, &mut keys)?;
            opt.step(&mut [&mut keys])?;
            for r in 0..keys.value.rows() {
                if normalize_in_place(keys.value.row_mut(r)) == 0.0 {
                    return Err(Error::invalid(format!(
                        "prototype row {r} collapsed to zero"
                    )));
                }
            }
            out.keys = keys.value.clone();
        }
        report.epochs.push(means.finish());
    }
    Ok((out, report))
}

/// Mean contrastive loss of specific features against the cache, for
/// reporting.
pub fn cache_loss(features: &DenseArray, labels: &[usize], bank: &PrototypeBank) -> Result<f64> {
    let mut tape = Tape::new();
    let q = tape.constant(features.clone())?;
    let k = tape.constant(bank.keys.clone())?;
    let l = cache_ce(&mut tape, q, k, bank, labels)?;
    tape.value(l).item()
}

/// Contrastive loss of features against class embeddings, for reporting.
pub fn invariant_loss(
    features: &DenseArray,
    class_embeddings: &DenseArray,
    labels: &[usize],
    tau: f64,
) -> Result<f64> {
    let mut tape = Tape::new();
    let f = tape.constant(features.clone())?;
    let e = tape.constant(class_embeddings.clone())?;
    let l = contrastive_ce(&mut tape, f, e, labels, tau)?;
    tape.value(l).item()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bank2() -> PrototypeBank {
        // 2 domains × 2 classes in 2-D.
        let s = std::f64::consts::FRAC_1_SQRT_2;
        let keys = DenseArray::from_rows(&[[1.0, 0.0], [0.0, 1.0], [s, s], [s, -s]]).unwrap();
        PrototypeBank::new(keys, 2, 2, 5.0).unwrap()
    }

    #[test]
    fn two_feature_mean_is_renormalized() {
        let f = DenseArray::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        let b = prototypes_from_features(&f, &[0, 0], &[0, 0], 1, 1, 5.0).unwrap();
        let s = std::f64::consts::FRAC_1_SQRT_2;
        assert!((b.keys.row(0)[0] - s).abs() < 1e-15 && (b.keys.row(0)[1] - s).abs() < 1e-15);
    }

    #[test]
    fn empty_cell_is_named() {
        let f = DenseArray::from_rows(&[[1.0, 0.0]]).unwrap();
        let err = prototypes_from_features(&f, &[0], &[0], 2, 1, 5.0)
            .unwrap_err()
            .to_string();
        assert!(err.contains("domain 0 class 1"), "{err}");
    }

    #[test]
    fn affinity_values() {
        let b = bank2();
        let phi = affinity(&[1.0, 0.0], &b).unwrap();
        assert_eq!(phi[0], 1.0);
        assert!((phi[1] - (-5f64).exp()).abs() < 1e-15);
        assert!(((-5f64).exp() - 6.7379e-3).abs() < 1e-7);
        assert!(affinity(&[2.0, 0.0], &b).is_err());
    }

    #[test]
    fn equal_affinities_give_ns_times_value() {
        let keys = DenseArray::filled(vec![4, 1], 1.0);
        let b = PrototypeBank::new(keys, 2, 2, 5.0).unwrap();
        let p = specific_predict(&[1.0], &b).unwrap();
        assert_eq!(p, vec![2.0, 2.0]);
    }

    #[test]
    fn zero_blend_is_invariant_argmax() {
        let b = bank2();
        let zi = DenseArray::from_rows(&[[0.0, 1.0]]).unwrap();
        let zs = DenseArray::from_rows(&[[1.0, 0.0]]).unwrap();
        let w = DenseArray::from_rows(&[[1.0, 0.0], [0.0, 1.0]]).unwrap();
        assert_eq!(
            combined_predict(&zi, &zs, &w, &b, 0.0, 0.1)
                .unwrap()
                .classes,
            vec![1]
        );
        assert_eq!(
            combined_predict(&zi, &zs, &w, &b, 5.0, 0.1)
                .unwrap()
                .classes,
            vec![0]
        );
    }

    #[test]
    fn zero_epoch_finetune_is_identity_and_values_frozen() {
        let b = bank2();
        let f = DenseArray::from_rows(&[[1.0, 0.0], [0.0, 1.0], [0.6, 0.8]]).unwrap();
        let opts = StageOptions {
            epochs: 0,
            ..StageOptions::default()
        };
        let (same, _) = finetune_on_features(&b, &f, &[0, 1, 1], &[0, 1, 2], &opts).unwrap();
        assert_eq!(same, b);
        let opts = StageOptions {
            epochs: 3,
            lr: 0.1,
            batch_size: 2,
            ..StageOptions::default()
        };
        let (tuned, report) = finetune_on_features(&b, &f, &[0, 1, 1], &[0, 1, 2], &opts).unwrap();
        assert_ne!(tuned.keys, b.keys);
        assert_eq!(tuned.values().data(), b.values().data());
        check_unit_rows(&tuned.keys, "tuned").unwrap();
        assert_eq!(report.epochs.len(), 3);
    }
}
