//! Worst-case feature stylization: sign-gradient ascent over simplex mixing
//! coefficients of instance statistics, then alignment of the invariant
//! visual prompts on the stylized features.

use rand::seq::index::sample as sample_indices;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::backbone::{instance_stats, Backbone, InstanceStats, VisualPromptSet};
use crate::error::{Error, Result};
use crate::numerics::{DenseArray, Tape, Var};
use crate::objectives::{contrastive_ce, l2_distill, worst_surrogate_rows, LossWeights};
use crate::stages::{
    minibatches, Batch, EpochMeans, PromptState, StageOptions, StageReport, TextEmbeddingBank,
    TrainingSet,
};

/// Below this total mass a projected coefficient vector resets to uniform.
pub const SIMPLEX_FLOOR: f64 = 1e-8;
/// Tolerance for accepting caller-supplied coefficients.
pub const SIMPLEX_TOL: f64 = 1e-6;

#[derive(Clone, Debug, PartialEq)]
pub struct WeraConfig {
    /// Number of base samples `M` whose statistics are mixed in.
    pub bases: usize,
    pub inner_steps: usize,
    pub eta: f64,
    pub gamma_prime: f64,
    pub alpha3: f64,
    /// Start the ascent from a seeded random simplex point instead of uniform.
    pub random_init: bool,
}

impl Default for WeraConfig {
    fn default() -> Self {
        Self {
            bases: 3,
            inner_steps: 10,
            eta: 0.05,
            gamma_prime: 8.0,
            alpha3: 0.4,
            random_init: false,
        }
    }
}

impl WeraConfig {
    pub fn validate(&self) -> Result<()> {
        if self.bases == 0 {
            return Err(Error::Config("wera bases (M) must be ≥ 1".into()));
        }
        if !(self.eta.is_finite() && self.eta >= 0.0) {
            return Err(Error::Config(format!("eta must be ≥ 0, got {}", self.eta)));
        }
        if !(self.gamma_prime.is_finite() && self.gamma_prime >= 0.0) {
            return Err(Error::Config("gamma_prime must be ≥ 0".into()));
        }
        if !(0.0..=1.0).contains(&self.alpha3) {
            return Err(Error::Config(format!(
                "alpha3 must lie in [0, 1], got {}",
                self.alpha3
            )));
        }
        Ok(())
    }
}

/// Mixing weights over `M + 1` statistics; entry 0 is the sample's own.
#[derive(Clone, Debug, PartialEq)]
pub struct StyleCoefficients {
    values: Vec<f64>,
}

impl StyleCoefficients {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.len() < 2 {
            return Err(Error::invalid(
                "style coefficients need at least two entries",
            ));
        }
        let sum: f64 = values.iter().sum();
        if values.iter().any(|&v| !(v >= -SIMPLEX_TOL)) || (sum - 1.0).abs() > SIMPLEX_TOL {
            return Err(Error::invalid(format!(
                "coefficients {values:?} are not on the simplex"
            )));
        }
        Ok(Self { values })
    }

    pub fn uniform(bases: usize) -> Self {
        Self {
            values: vec![1.0 / (bases + 1) as f64; bases + 1],
        }
    }

    /// All weight on the sample's own statistics.
    pub fn identity(bases: usize) -> Self {
        let mut values = vec![0.0; bases + 1];
        values[0] = 1.0;
        Self { values }
    }

    pub fn random(bases: usize, rng: &mut impl Rng) -> Self {
        // Normalized exponentials give a uniform draw on the simplex.
        let raw: Vec<f64> = (0..=bases)
            .map(|_| -(1.0 - rng.random::<f64>()).ln())
            .collect();
        Self::project(&raw)
    }

    /// Clamps negatives to zero and divides by the sum.
    pub fn project(raw: &[f64]) -> Self {
        let clamped: Vec<f64> = raw.iter().map(|&v| v.max(0.0)).collect();
        let sum: f64 = clamped.iter().sum();
        if !(sum >= SIMPLEX_FLOOR) {
            return Self::uniform(raw.len() - 1);
        }
        Self {
            values: clamped.iter().map(|v| v / sum).collect(),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn bases(&self) -> usize {
        self.values.len() - 1
    }

    /// One sign-ascent step followed by projection.
    pub fn ascend(&self, gradient: &[f64], eta: f64) -> Self {
        let raw: Vec<f64> = self
            .values
            .iter()
            .zip(gradient)
            .map(|(&a, &g)| a + eta * sign(g))
            .collect();
        Self::project(&raw)
    }
}

fn sign(g: f64) -> f64 {
    if g > 0.0 {
        1.0
    } else if g < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Picks `m` peers of row `i` in a batch of `batch_len`: without replacement
/// when enough peers exist, otherwise with replacement. A batch of one
/// reuses the sample itself.
pub fn select_bases(batch_len: usize, i: usize, m: usize, rng: &mut impl Rng) -> Vec<usize> {
    let peers = batch_len.saturating_sub(1);
    if peers == 0 {
        return vec![i; m];
    }
    let skip = |j: usize| if j >= i { j + 1 } else { j };
    if peers >= m {
        sample_indices(rng, peers, m)
            .into_iter()
            .map(skip)
            .collect()
    } else {
        (0..m).map(|_| skip(rng.random_range(0..peers))).collect()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MixedStatistics {
    pub mu_hat: Vec<f64>,
    pub sigma_hat: Vec<f64>,
}

pub fn mix_statistics(
    coefficients: &StyleCoefficients,
    own: &InstanceStats,
    bases: &[InstanceStats],
) -> Result<MixedStatistics> {
    let a = coefficients.values();
    if a.len() != bases.len() + 1 {
        return Err(Error::invalid(format!(
            "{} coefficients for {} bases",
            a.len(),
            bases.len()
        )));
    }
    let sum: f64 = a.iter().sum();
    if a.iter().any(|&v| v < -SIMPLEX_TOL) || (sum - 1.0).abs() > SIMPLEX_TOL {
        return Err(Error::invalid(format!(
            "coefficients {a:?} are not on the simplex"
        )));
    }
    let c = own.mu.len();
    if bases.iter().any(|b| b.mu.len() != c) {
        return Err(Error::shape(
            "mix_statistics",
            "base statistics differ in width",
        ));
    }
    let mut mu_hat: Vec<f64> = own.mu.iter().map(|&m| a[0] * m).collect();
    let mut sigma_hat: Vec<f64> = own.sigma.iter().map(|&s| a[0] * s).collect();
    for (w, b) in a[1..].iter().zip(bases) {
        for ch in 0..c {
            mu_hat[ch] += w * b.mu[ch];
            sigma_hat[ch] += w * b.sigma[ch];
        }
    }
    Ok(MixedStatistics { mu_hat, sigma_hat })
}

/// Re-statistics an `L × C` feature: `μ̂ + σ̂ ⊙ (ẑ − μ(ẑ)) / σ(ẑ)`.
pub fn stylize(intermediate: &DenseArray, stats: &MixedStatistics) -> Result<DenseArray> {
    let own = instance_stats(intermediate)?;
    let c = intermediate.cols();
    if stats.mu_hat.len() != c || stats.sigma_hat.len() != c {
        return Err(Error::shape("stylize", format!("statistics width ≠ {c}")));
    }
    let data = intermediate
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| {
            let ch = i % c;
            stats.mu_hat[ch] + stats.sigma_hat[ch] * (v - own.mu[ch]) / own.sigma[ch]
        })
        .collect();
    DenseArray::new(intermediate.shape().to_vec(), data)
}

/// A batch prepared for stylization: normalized tokens plus the stacked
/// own-and-base statistics of every row.
#[derive(Clone, Debug)]
pub struct StyleProblem {
    /// `[B, L, C]` instance-normalized intermediates.
    pub normalized: DenseArray,
    /// `[B, M+1, C]`; slot 0 holds each row's own statistics.
    pub mus: DenseArray,
    pub sigmas: DenseArray,
    pub labels: Vec<usize>,
}

impl StyleProblem {
    /// `bases[i]` lists the rows of the batch whose statistics row `i` mixes.
    pub fn new(intermediates: &DenseArray, labels: &[usize], bases: &[Vec<usize>]) -> Result<Self> {
        let stats = per_row_stats(intermediates)?;
        let b = stats.len();
        if bases.len() != b || bases.iter().flatten().any(|&j| j >= b) {
            return Err(Error::invalid(
                "base indices must address rows of the batch",
            ));
        }
        let base_stats: Vec<Vec<InstanceStats>> = bases
            .iter()
            .map(|row| row.iter().map(|&j| stats[j].clone()).collect())
            .collect();
        Self::with_base_stats(intermediates, labels, &base_stats)
    }

    /// Like [`StyleProblem::new`] with the base statistics given directly.
    pub fn with_base_stats(
        intermediates: &DenseArray,
        labels: &[usize],
        base_stats: &[Vec<InstanceStats>],
    ) -> Result<Self> {
        let stats = per_row_stats(intermediates)?;
        let shape = intermediates.shape();
        let (b, l, c) = (shape[0], shape[1], shape[2]);
        if labels.len() != b || base_stats.len() != b {
            return Err(Error::shape("style_problem", "labels/bases length ≠ batch"));
        }
        let m = base_stats.first().map_or(0, Vec::len);
        if m == 0 || base_stats.iter().any(|row| row.len() != m) {
            return Err(Error::invalid(
                "every row needs the same number (≥ 1) of bases",
            ));
        }
        if base_stats
            .iter()
            .flatten()
            .any(|s| s.mu.len() != c || s.sigma.len() != c)
        {
            return Err(Error::shape(
                "style_problem",
                format!("base statistics width ≠ {c}"),
            ));
        }
        let per = l * c;
        let mut normalized = Vec::with_capacity(b * per);
        for (i, st) in stats.iter().enumerate() {
            for (t, &v) in intermediates.data()[i * per..(i + 1) * per]
                .iter()
                .enumerate()
            {
                let ch = t % c;
                normalized.push((v - st.mu[ch]) / st.sigma[ch]);
            }
        }
        let mut mus = Vec::with_capacity(b * (m + 1) * c);
        let mut sigmas = Vec::with_capacity(b * (m + 1) * c);
        for (own, row) in stats.iter().zip(base_stats) {
            for st in std::iter::once(own).chain(row) {
                mus.extend_from_slice(&st.mu);
                sigmas.extend_from_slice(&st.sigma);
            }
        }
        Ok(Self {
            normalized: DenseArray::new(vec![b, l, c], normalized)?,
            mus: DenseArray::new(vec![b, m + 1, c], mus)?,
            sigmas: DenseArray::new(vec![b, m + 1, c], sigmas)?,
            labels: labels.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn bases(&self) -> usize {
        self.mus.shape()[1] - 1
    }

    /// A problem whose rows are copies of the given rows of `self`.
    pub fn select_rows(&self, rows: &[usize]) -> Self {
        let pick = |a: &DenseArray| {
            let shape = a.shape();
            let per = shape[1] * shape[2];
            let data = rows
                .iter()
                .flat_map(|&r| a.data()[r * per..(r + 1) * per].iter().copied())
                .collect();
            DenseArray::new(vec![rows.len(), shape[1], shape[2]], data).expect("shape")
        };
        Self {
            normalized: pick(&self.normalized),
            mus: pick(&self.mus),
            sigmas: pick(&self.sigmas),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
        }
    }

    fn coefficient_matrix(&self, coefficients: &[StyleCoefficients]) -> Result<DenseArray> {
        if coefficients.len() != self.len()
            || coefficients.iter().any(|a| a.bases() != self.bases())
        {
            return Err(Error::shape(
                "style_problem",
                "coefficients do not match the batch",
            ));
        }
        let data = coefficients
            .iter()
            .flat_map(|a| a.values().iter().copied())
            .collect();
        DenseArray::new(vec![self.len(), self.bases() + 1], data)
    }

    /// Records the stylized batch `[B, L, C]` as a function of `coeffs [B, M+1]`.
    ///
    /// The coefficients are divided by their row sums on the tape. Values on
    /// the simplex are unchanged, but the gradient loses the common-mode
    /// component that the renormalization would cancel anyway, so a sign
    /// step can actually move the mixture.
    pub fn stylized_on_tape(&self, tape: &mut Tape, coeffs: Var) -> Result<Var> {
        let b = self.len();
        let totals = tape.sum_axis(coeffs, 1)?;
        let totals = tape.reshape(totals, vec![b, 1])?;
        let shares = tape.div(coeffs, totals)?;
        let a = tape.reshape(shares, vec![b, 1, self.bases() + 1])?;
        let mus = tape.constant(self.mus.clone())?;
        let sigmas = tape.constant(self.sigmas.clone())?;
        let mu_hat = tape.matmul(a, mus)?;
        let sigma_hat = tape.matmul(a, sigmas)?;
        let norm = tape.constant(self.normalized.clone())?;
        let scaled = tape.mul(sigma_hat, norm)?;
        tape.add(mu_hat, scaled)
    }

    pub fn stylized(&self, coefficients: &[StyleCoefficients]) -> Result<DenseArray> {
        let mut tape = Tape::new();
        let a = tape.constant(self.coefficient_matrix(coefficients)?)?;
        let out = self.stylized_on_tape(&mut tape, a)?;
        Ok(tape.value(out).clone())
    }
}

/// Everything the inner maximization holds fixed.
pub struct WorstCaseObjective<'a> {
    pub backbone: &'a Backbone,
    pub class_embeddings: &'a DenseArray,
    pub prompts: &'a VisualPromptSet,
    /// Unstylized features `[B, d]` under the same prompts.
    pub originals: &'a DenseArray,
    pub gamma_prime: f64,
    pub tau: f64,
}

impl WorstCaseObjective<'_> {
    fn rows_on_tape(&self, tape: &mut Tape, problem: &StyleProblem, coeffs: Var) -> Result<Var> {
        let styl = problem.stylized_on_tape(tape, coeffs)?;
        let prompts = tape.constant(self.prompts.tokens.value.clone())?;
        let z_w = self.backbone.visual_rest(tape, styl, prompts)?;
        let w = tape.constant(self.class_embeddings.clone())?;
        let orig = tape.constant(self.originals.clone())?;
        worst_surrogate_rows(
            tape,
            z_w,
            w,
            &problem.labels,
            orig,
            self.gamma_prime,
            self.tau,
        )
    }

    /// Stylized features `[B, d]` at the given coefficients.
    pub fn features(
        &self,
        problem: &StyleProblem,
        coefficients: &[StyleCoefficients],
    ) -> Result<DenseArray> {
        self.backbone
            .embed(&problem.stylized(coefficients)?, self.prompts)
    }

    /// Per-row surrogate values at the given coefficients.
    pub fn values(
        &self,
        problem: &StyleProblem,
        coefficients: &[StyleCoefficients],
    ) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let a = tape.constant(problem.coefficient_matrix(coefficients)?)?;
        let rows = self.rows_on_tape(&mut tape, problem, a)?;
        Ok(tape.value(rows).data().to_vec())
    }

    /// Per-row values and gradients with respect to each row's coefficients.
    pub fn values_and_gradients(
        &self,
        problem: &StyleProblem,
        coefficients: &[StyleCoefficients],
    ) -> Result<(Vec<f64>, DenseArray)> {
        let mut tape = Tape::new();
        let a = tape.leaf(problem.coefficient_matrix(coefficients)?, true)?;
        let rows = self.rows_on_tape(&mut tape, problem, a)?;
        let values = tape.value(rows).data().to_vec();
        // Rows are independent, so the gradient of the sum splits per row.
        let total = tape.sum_all(rows)?;
        let grads = tape.backward(total)?;
        let g = grads
            .get(a)
            .cloned()
            .ok_or_else(|| Error::Grad("no gradient for style coefficients".into()))?;
        if !g.is_finite() {
            return Err(Error::Grad(format!(
                "non-finite style gradient at {coefficients:?}"
            )));
        }
        Ok((values, g))
    }
}

/// Running record of the simplex invariant across projections.
#[derive(Clone, Debug, PartialEq)]
pub struct SimplexAudit {
    pub projections: usize,
    pub max_sum_error: f64,
    pub min_entry: f64,
}

impl Default for SimplexAudit {
    fn default() -> Self {
        Self {
            projections: 0,
            max_sum_error: 0.0,
            min_entry: f64::INFINITY,
        }
    }
}

impl SimplexAudit {
    pub fn record(&mut self, a: &StyleCoefficients) {
        let sum: f64 = a.values().iter().sum();
        self.projections += 1;
        self.max_sum_error = self.max_sum_error.max((sum - 1.0).abs());
        self.min_entry = a.values().iter().copied().fold(self.min_entry, f64::min);
    }

    pub fn merge(&mut self, other: &SimplexAudit) {
        self.projections += other.projections;
        self.max_sum_error = self.max_sum_error.max(other.max_sum_error);
        self.min_entry = self.min_entry.min(other.min_entry);
    }
}

/// Outcome of the inner loop for a batch.
#[derive(Clone, Debug)]
pub struct AscentResult {
    pub coefficients: Vec<StyleCoefficients>,
    pub initial_values: Vec<f64>,
    pub final_values: Vec<f64>,
    pub audit: SimplexAudit,
}

/// `N_K` sign-ascent steps on every row's coefficients, independently.
pub fn inner_ascent_batch(
    objective: &WorstCaseObjective<'_>,
    problem: &StyleProblem,
    init: Vec<StyleCoefficients>,
    cfg: &WeraConfig,
) -> Result<AscentResult> {
    let mut coeffs = init;
    let mut audit = SimplexAudit::default();
    let mut initial_values = None;
    for _ in 0..cfg.inner_steps {
        let (values, grad) = objective.values_and_gradients(problem, &coeffs)?;
        initial_values.get_or_insert(values);
        let width = problem.bases() + 1;
        coeffs = coeffs
            .iter()
            .zip(grad.data().chunks(width))
            .map(|(a, g)| a.ascend(g, cfg.eta))
            .collect();
        coeffs.iter().for_each(|a| audit.record(a));
    }
    let final_values = objective.values(problem, &coeffs)?;
    Ok(AscentResult {
        initial_values: initial_values.unwrap_or_else(|| final_values.clone()),
        final_values,
        coefficients: coeffs,
        audit,
    })
}

fn per_row_stats(intermediates: &DenseArray) -> Result<Vec<InstanceStats>> {
    let shape = intermediates.shape();
    if shape.len() != 3 || shape[0] == 0 {
        return Err(Error::shape(
            "style_problem",
            format!("expected non-empty [B, L, C], got {shape:?}"),
        ));
    }
    let per = shape[1] * shape[2];
    (0..shape[0])
        .map(|i| {
            let one = DenseArray::new(
                vec![shape[1], shape[2]],
                intermediates.data()[i * per..(i + 1) * per].to_vec(),
            )?;
            instance_stats(&one)
        })
        .collect()
}

pub fn initial_coefficients(
    n: usize,
    cfg: &WeraConfig,
    rng: &mut impl Rng,
) -> Vec<StyleCoefficients> {
    (0..n)
        .map(|_| {
            if cfg.random_init {
                StyleCoefficients::random(cfg.bases, rng)
            } else {
                StyleCoefficients::uniform(cfg.bases)
            }
        })
        .collect()
}

/// Inner ascent for one `L × C` intermediate feature against explicit
/// base features.
#[allow(clippy::too_many_arguments)]
pub fn inner_ascent(
    backbone: &Backbone,
    intermediate: &DenseArray,
    label: usize,
    bases: &[DenseArray],
    class_embeddings: &DenseArray,
    prompts: &VisualPromptSet,
    cfg: &WeraConfig,
    tau: f64,
    rng: &mut impl Rng,
) -> Result<StyleCoefficients> {
    cfg.validate()?;
    if bases.len() != cfg.bases {
        return Err(Error::invalid(format!(
            "{} base features for M = {}",
            bases.len(),
            cfg.bases
        )));
    }
    let (l, c) = (intermediate.rows(), intermediate.cols());
    let single = DenseArray::new(vec![1, l, c], intermediate.data().to_vec())?;
    let base_stats = bases
        .iter()
        .map(instance_stats)
        .collect::<Result<Vec<_>>>()?;
    let problem = StyleProblem::with_base_stats(&single, &[label], &[base_stats])?;
    let originals = backbone.embed(&single, prompts)?;
    let objective = WorstCaseObjective {
        backbone,
        class_embeddings,
        prompts,
        originals: &originals,
        gamma_prime: cfg.gamma_prime,
        tau,
    };
    let init = initial_coefficients(1, cfg, rng);
    let result = inner_ascent_batch(&objective, &problem, init, cfg)?;
    Ok(result.coefficients.into_iter().next().expect("one row"))
}

/// Fraction of rows whose surrogate after the inner loop is at least its
/// value at the starting coefficients.
pub fn ascent_gain(
    objective: &WorstCaseObjective<'_>,
    problem: &StyleProblem,
    cfg: &WeraConfig,
    rng: &mut impl Rng,
) -> Result<f64> {
    let init = initial_coefficients(problem.len(), cfg, rng);
    let result = inner_ascent_batch(objective, problem, init, cfg)?;
    let wins = result
        .initial_values
        .iter()
        .zip(&result.final_values)
        .filter(|(a, b)| b >= a)
        .count();
    Ok(wins as f64 / problem.len().max(1) as f64)
}

/// Per-row base choices for a batch.
pub fn batch_bases(batch_len: usize, m: usize, rng: &mut impl Rng) -> Vec<Vec<usize>> {
    (0..batch_len)
        .map(|i| select_bases(batch_len, i, m, rng))
        .collect()
}

#[derive(Clone, Debug)]
pub struct WeraReport {
    pub stage: StageReport,
    pub simplex: SimplexAudit,
}

#[derive(Clone, Copy, Debug)]
pub struct OuterLoss {
    pub total: Var,
    pub ce_invariant: Var,
    pub ce_stylized: Var,
    pub kg_invariant: Var,
    pub features: Var,
    pub stylized_features: Var,
}

/// Outer objective: clean and stylized cross-entropy mixed by `alpha3`, plus
/// the distillation term on the clean features.
#[allow(clippy::too_many_arguments)]
pub fn outer_loss(
    tape: &mut Tape,
    backbone: &Backbone,
    invariant: Var,
    batch: &Batch,
    stylized: &DenseArray,
    bank: &TextEmbeddingBank,
    weights: &LossWeights,
    alpha3: f64,
) -> Result<OuterLoss> {
    let x = tape.constant(batch.intermediates.clone())?;
    let xs = tape.constant(stylized.clone())?;
    let features = backbone.visual_rest(tape, x, invariant)?;
    let stylized_features = backbone.visual_rest(tape, xs, invariant)?;
    let w = tape.constant(bank.invariant.clone())?;
    let zref = tape.constant(batch.reference.clone())?;
    let ce_invariant = contrastive_ce(tape, features, w, &batch.labels, weights.tau)?;
    let ce_stylized = contrastive_ce(tape, stylized_features, w, &batch.labels, weights.tau)?;
    let kg_invariant = l2_distill(tape, features, zref)?;
    let a = tape.scale(ce_invariant, 1.0 - alpha3)?;
    let b = tape.scale(ce_stylized, alpha3)?;
    let c = tape.scale(kg_invariant, weights.alpha2)?;
    let ab = tape.add(a, b)?;
    Ok(OuterLoss {
        total: tape.add(ab, c)?,
        ce_invariant,
        ce_stylized,
        kg_invariant,
        features,
        stylized_features,
    })
}

/// Fine-tunes only the invariant visual prompts on clean and worst-case
/// stylized features. Text prompts and specific visual prompts stay fixed.
pub fn train_wera(
    backbone: &Backbone,
    set: &TrainingSet,
    bank: &TextEmbeddingBank,
    state: &mut PromptState,
    weights: &LossWeights,
    cfg: &WeraConfig,
    opts: &StageOptions,
) -> Result<WeraReport> {
    weights.validate()?;
    cfg.validate()?;
    let mut report = StageReport::new(
        "wera",
        &[
            "total",
            "ce_invariant",
            "ce_stylized",
            "kg_invariant",
            "inner_gain",
            "transport",
        ],
    );
    let mut simplex = SimplexAudit::default();
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = opts.optimizer();
    for _ in 0..opts.epochs {
        let mut means = EpochMeans::new(6);
        for rows in minibatches(set.len(), opts.batch_size, &mut rng) {
            let batch = set.batch(&rows);
            report.samples_seen.extend(&batch.sample_ids);
            let bases = batch_bases(rows.len(), cfg.bases, &mut rng);
            let problem = StyleProblem::new(&batch.intermediates, &batch.labels, &bases)?;
            let originals = backbone.embed(&batch.intermediates, &state.invariant_visual)?;
            let objective = WorstCaseObjective {
                backbone,
                class_embeddings: &bank.invariant,
                prompts: &state.invariant_visual,
                originals: &originals,
                gamma_prime: cfg.gamma_prime,
                tau: weights.tau,
            };
            let init = initial_coefficients(rows.len(), cfg, &mut rng);
            let ascent = inner_ascent_batch(&objective, &problem, init, cfg)?;
            simplex.merge(&ascent.audit);
            let gain = mean(
                &ascent
                    .final_values
                    .iter()
                    .zip(&ascent.initial_values)
                    .map(|(f, i)| f - i)
                    .collect::<Vec<_>>(),
            );
            let stylized = problem.stylized(&ascent.coefficients)?;

            let mut tape = Tape::new();
            let e_i = tape.param(&state.invariant_visual.tokens)?;
            let loss = outer_loss(
                &mut tape, backbone, e_i, &batch, &stylized, bank, weights, cfg.alpha3,
            )?;
            let transport = mean_sq_row_dist(
                tape.value(loss.stylized_features),
                tape.value(loss.features),
            );
            means.add(&[
                tape.value(loss.total).item()?,
                tape.value(loss.ce_invariant).item()?,
                tape.value(loss.ce_stylized).item()?,
                tape.value(loss.kg_invariant).item()?,
                gain,
                transport,
            ]);
            let total = loss.total;
            let grads = tape.backward(total)?;
            grads.accumulate(e_i, &mut state.invariant_visual.tokens)?;
            opt.step(&mut [&mut state.invariant_visual.tokens])?;
        }
        report.epochs.push(means.finish());
    }
    Ok(WeraReport {
        stage: report,
        simplex,
    })
}

fn mean(v: &[f64]) -> f64 {
    if v.is_empty() {
        0.0
    } else {
        v.iter().sum::<f64>() / v.len() as f64
    }
}

pub(crate) fn mean_sq_row_dist(a: &DenseArray, b: &DenseArray) -> f64 {
    let w = a.cols();
    let rows: Vec<f64> = a
        .data()
        .chunks(w)
        .zip(b.data().chunks(w))
        .map(|(x, y)| crate::numerics::sq_dist(x, y))
        .collect();
    mean(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn stats(mu: Vec<f64>, sigma: Vec<f64>) -> InstanceStats {
        InstanceStats { mu, sigma }
    }

    #[test]
    fn identity_mix_returns_own_stats() {
        let own = stats(vec![1.0, -2.0], vec![0.5, 3.0]);
        let base = stats(vec![9.0, 9.0], vec![9.0, 9.0]);
        let mixed = mix_statistics(&StyleCoefficients::identity(1), &own, &[base]).unwrap();
        assert_eq!(mixed.mu_hat, own.mu);
        assert_eq!(mixed.sigma_hat, own.sigma);
    }

    #[test]
    fn midpoint_mix() {
        let own = stats(vec![0.0], vec![1.0]);
        let base = stats(vec![2.0], vec![3.0]);
        let a = StyleCoefficients::new(vec![0.5, 0.5]).unwrap();
        let mixed = mix_statistics(&a, &own, &[base]).unwrap();
        assert_eq!(mixed.mu_hat, vec![1.0]);
        assert_eq!(mixed.sigma_hat, vec![2.0]);
    }

    #[test]
    fn off_simplex_rejected() {
        assert!(StyleCoefficients::new(vec![0.7, 0.7]).is_err());
        assert!(StyleCoefficients::new(vec![1.2, -0.2]).is_err());
        let own = stats(vec![0.0], vec![1.0]);
        let bad = StyleCoefficients {
            values: vec![0.9, 0.3],
        };
        assert!(mix_statistics(&bad, &own, std::slice::from_ref(&own)).is_err());
    }

    #[test]
    fn projection_clamps_and_resets() {
        let a = StyleCoefficients::project(&[0.6, -0.1, 0.2]);
        for (x, y) in a.values().iter().zip([0.75, 0.0, 0.25]) {
            assert!((x - y).abs() < 1e-15);
        }
        let u = StyleCoefficients::project(&[-1.0, -2.0]);
        assert_eq!(u.values(), &[0.5, 0.5]);
    }

    #[test]
    fn zero_step_keeps_coefficients() {
        let a = StyleCoefficients::uniform(2);
        assert_eq!(a.ascend(&[1.0, -1.0, 0.0], 0.0), a);
        let b = a.ascend(&[1.0, -1.0, 0.0], 0.1);
        let expect = [(1.0 / 3.0 + 0.1), (1.0 / 3.0 - 0.1), 1.0 / 3.0];
        for (x, y) in b.values().iter().zip(expect) {
            assert!((x - y).abs() < 1e-15);
        }
    }

    #[test]
    fn stylize_identity_and_affine() {
        let z = DenseArray::from_rows(&[[1.0, 4.0], [3.0, 0.0], [2.0, 2.0]])
            .unwrap()
            .map(|v| 3.0 * v);
        let own = instance_stats(&z).unwrap();
        let same = stylize(
            &z,
            &MixedStatistics {
                mu_hat: own.mu.clone(),
                sigma_hat: own.sigma.clone(),
            },
        )
        .unwrap();
        for (a, b) in same.data().iter().zip(z.data()) {
            assert!((a - b).abs() < 1e-12);
        }
        let out = stylize(
            &z,
            &MixedStatistics {
                mu_hat: vec![3.0, 3.0],
                sigma_hat: vec![2.0, 2.0],
            },
        )
        .unwrap();
        let st = instance_stats(&out).unwrap();
        for ch in 0..2 {
            assert!((st.mu[ch] - 3.0).abs() < 1e-12);
            assert!((st.sigma[ch] - 2.0).abs() < 1e-5);
        }
    }

    #[test]
    fn batch_of_two_picks_the_other() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            assert_eq!(select_bases(2, 0, 1, &mut rng), vec![1]);
            assert_eq!(select_bases(2, 1, 1, &mut rng), vec![0]);
        }
    }

    #[test]
    fn bases_exclude_self_and_are_distinct() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for i in 0..16 {
            let b = select_bases(16, i, 3, &mut rng);
            assert!(!b.contains(&i));
            let mut s = b.clone();
            s.sort_unstable();
            s.dedup();
            assert_eq!(s.len(), 3);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let b = select_bases(3, 1, 5, &mut rng);
        assert_eq!(b.len(), 5);
        assert!(!b.contains(&1));
        assert_eq!(select_bases(1, 0, 2, &mut rng), vec![0, 0]);
    }

    #[test]
    fn base_selection_is_seeded() {
        let a = select_bases(16, 4, 3, &mut ChaCha8Rng::seed_from_u64(9));
        let b = select_bases(16, 4, 3, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(a, b);
    }

    #[test]
    fn problem_identity_reproduces_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data: Vec<f64> = (0..3 * 4 * 2)
            .map(|_| rng.random_range(-2.0..2.0))
            .collect();
        let x = DenseArray::new(vec![3, 4, 2], data).unwrap();
        let p = StyleProblem::new(&x, &[0, 1, 0], &batch_bases(3, 2, &mut rng)).unwrap();
        let out = p
            .stylized(&vec![StyleCoefficients::identity(2); 3])
            .unwrap();
        for (a, b) in out.data().iter().zip(x.data()) {
            assert!((a - b).abs() < 1e-9);
        }
    }
}
