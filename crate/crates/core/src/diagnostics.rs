//! Distribution distances and the worst-case robustness audit.

use std::cmp::Ordering;
use std::fmt::Write as _;

use rand::Rng;

use crate::error::{Error, Result};
use crate::numerics::{sq_dist, DenseArray};
use crate::objectives::class_probabilities;
use crate::wera::{
    initial_coefficients, inner_ascent_batch, StyleCoefficients, StyleProblem, WeraConfig,
    WorstCaseObjective,
};

/// Largest support accepted by [`w1_exact`].
pub const MAX_W1_POINTS: usize = 256;

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Bandwidth {
    Fixed(f64),
    /// Median pairwise distance of the pooled sample.
    Median,
}

/// Gaussian RBF kernel `exp(−‖x − y‖² / (2σ²))`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KernelSpec {
    pub bandwidth: Bandwidth,
}

impl Default for KernelSpec {
    fn default() -> Self {
        Self {
            bandwidth: Bandwidth::Median,
        }
    }
}

impl KernelSpec {
    pub fn rbf(sigma: f64) -> Self {
        Self {
            bandwidth: Bandwidth::Fixed(sigma),
        }
    }

    fn resolve(&self, xs: &DenseArray, ys: &DenseArray) -> Result<f64> {
        let sigma = match self.bandwidth {
            Bandwidth::Fixed(s) => s,
            Bandwidth::Median => median_pairwise_distance(xs, ys),
        };
        if !(sigma.is_finite() && sigma > 0.0) {
            return Err(Error::invalid(format!(
                "degenerate kernel bandwidth {sigma}"
            )));
        }
        Ok(sigma)
    }
}

fn median_pairwise_distance(xs: &DenseArray, ys: &DenseArray) -> f64 {
    let pooled: Vec<&[f64]> = (0..xs.rows())
        .map(|i| xs.row(i))
        .chain((0..ys.rows()).map(|i| ys.row(i)))
        .collect();
    let mut d = Vec::with_capacity(pooled.len() * pooled.len().saturating_sub(1) / 2);
    for i in 0..pooled.len() {
        for j in i + 1..pooled.len() {
            d.push(sq_dist(pooled[i], pooled[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 0.0;
    }
    let mid = d.len() / 2;
    let (_, &mut upper, _) = d.select_nth_unstable_by(mid, f64::total_cmp);
    if d.len() % 2 == 1 {
        upper
    } else {
        let lower = d[..mid].iter().copied().fold(f64::NEG_INFINITY, f64::max);
        0.5 * (lower + upper)
    }
}

fn kernel_sum(a: &DenseArray, b: &DenseArray, inv_two_sigma_sq: f64) -> f64 {
    let mut total = 0.0;
    for i in 0..a.rows() {
        let mut row = 0.0;
        for j in 0..b.rows() {
            row += (-sq_dist(a.row(i), b.row(j)) * inv_two_sigma_sq).exp();
        }
        total += row;
    }
    total
}

fn lexicographic(a: &DenseArray, b: &DenseArray) -> Ordering {
    a.rows().cmp(&b.rows()).then_with(|| {
        a.data()
            .iter()
            .zip(b.data())
            .map(|(x, y)| x.total_cmp(y))
            .find(|o| o.is_ne())
            .unwrap_or(Ordering::Equal)
    })
}

/// Biased squared MMD between the rows of `xs` and `ys`, clamped at 0.
pub fn mmd2(xs: &DenseArray, ys: &DenseArray, kernel: &KernelSpec) -> Result<f64> {
    if xs.rows() == 0 || ys.rows() == 0 {
        return Err(Error::invalid("mmd2 needs at least one point on each side"));
    }
    if xs.cols() != ys.cols() {
        return Err(Error::shape(
            "mmd2",
            format!("widths {} vs {}", xs.cols(), ys.cols()),
        ));
    }
    // A canonical argument order makes the result exactly symmetric.
    let (xs, ys) = if lexicographic(xs, ys) == Ordering::Greater {
        (ys, xs)
    } else {
        (xs, ys)
    };
    let sigma = kernel.resolve(xs, ys)?;
    let g = 1.0 / (2.0 * sigma * sigma);
    let (n, m) = (xs.rows() as f64, ys.rows() as f64);
    let kxx = kernel_sum(xs, xs, g) / (n * n);
    let kyy = kernel_sum(ys, ys, g) / (m * m);
    let kxy = kernel_sum(xs, ys, g) / (n * m);
    Ok((kxx + kyy - 2.0 * kxy).max(0.0))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DivergenceReport {
    /// `(global source domain id, MMD to the target)`; the square root of
    /// [`mmd2`].
    pub pairs: Vec<(usize, f64)>,
    pub average: f64,
    pub source_sizes: Vec<usize>,
    pub target_size: usize,
}

impl DivergenceReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("pair,distance\n");
        for (d, v) in &self.pairs {
            let _ = writeln!(out, "source{d}-target,{v:.9}");
        }
        let _ = writeln!(out, "aggregate,{:.9}", self.average);
        out
    }
}

/// Per-source-domain MMD to the target features and their average.
pub fn source_target_divergence(
    sources: &[(usize, DenseArray)],
    target: &DenseArray,
    kernel: &KernelSpec,
) -> Result<DivergenceReport> {
    if sources.is_empty() {
        return Err(Error::invalid("no source domains"));
    }
    if let Some((d, _)) = sources.iter().find(|(_, f)| f.rows() == 0) {
        return Err(Error::invalid(format!("source domain {d} is empty")));
    }
    if target.rows() == 0 {
        return Err(Error::invalid("target domain is empty"));
    }
    let pairs = sources
        .iter()
        .map(|(d, f)| Ok((*d, mmd2(f, target, kernel)?.sqrt())))
        .collect::<Result<Vec<_>>>()?;
    let average = pairs.iter().map(|p| p.1).sum::<f64>() / pairs.len() as f64;
    Ok(DivergenceReport {
        average,
        source_sizes: sources.iter().map(|(_, f)| f.rows()).collect(),
        target_size: target.rows(),
        pairs,
    })
}

/// Minimum-cost perfect matching of a square cost matrix; returns the
/// column assigned to each row.
pub fn min_cost_assignment(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    let inf = f64::INFINITY;
    // Potentials and matching are 1-indexed; index 0 is a sentinel column.
    let mut u = vec![0.0; n + 1];
    let mut v = vec![0.0; n + 1];
    let mut owner = vec![0usize; n + 1];
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        owner[0] = i;
        let mut j0 = 0;
        let mut minv = vec![inf; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = owner[j0];
            let mut delta = inf;
            let mut j1 = 0;
            for j in 1..=n {
                if !used[j] {
                    let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                    if cur < minv[j] {
                        minv[j] = cur;
                        way[j] = j0;
                    }
                    if minv[j] < delta {
                        delta = minv[j];
                        j1 = j;
                    }
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[owner[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if owner[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            owner[j0] = owner[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut assignment = vec![0; n];
    for j in 1..=n {
        assignment[owner[j] - 1] = j - 1;
    }
    assignment
}

pub fn euclidean_costs(xs: &DenseArray, ys: &DenseArray) -> Vec<Vec<f64>> {
    (0..xs.rows())
        .map(|i| {
            (0..ys.rows())
                .map(|j| sq_dist(xs.row(i), ys.row(j)).sqrt())
                .collect()
        })
        .collect()
}

/// Exact Wasserstein-1 between two equal-size uniform empirical measures
/// under Euclidean cost. Matched costs are summed in row order.
pub fn w1_exact(xs: &DenseArray, ys: &DenseArray) -> Result<f64> {
    if xs.rows() != ys.rows() {
        return Err(Error::shape(
            "w1_exact",
            format!("{} vs {} points", xs.rows(), ys.rows()),
        ));
    }
    if xs.rows() > MAX_W1_POINTS {
        return Err(Error::invalid(format!(
            "w1_exact supports at most {MAX_W1_POINTS} points, got {}",
            xs.rows()
        )));
    }
    if xs.rows() == 0 {
        return Err(Error::invalid("w1_exact needs at least one point"));
    }
    if xs.cols() != ys.cols() {
        return Err(Error::shape(
            "w1_exact",
            format!("widths {} vs {}", xs.cols(), ys.cols()),
        ));
    }
    let cost = euclidean_costs(xs, ys);
    let assignment = min_cost_assignment(&cost);
    let total: f64 = assignment
        .iter()
        .enumerate()
        .map(|(i, &j)| cost[i][j])
        .sum();
    Ok(total / xs.rows() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct AuditReport {
    pub samples: usize,
    pub trials: usize,
    /// Fraction of samples whose learned stylization has cross-entropy at
    /// least that of the best radius-matched random stylization.
    pub fraction: f64,
    pub mean_radius: f64,
    /// Samples whose learned radius is numerically zero.
    pub degenerate: usize,
}

impl AuditReport {
    pub fn to_csv(&self) -> String {
        format!(
            "samples,trials,fraction,mean_radius,degenerate\n{},{},{:.9},{:.9},{}\n",
            self.samples, self.trials, self.fraction, self.mean_radius, self.degenerate
        )
    }
}

const RADIUS_FLOOR: f64 = 1e-9;
const BISECTION_STEPS: usize = 30;

fn row_ce(
    features: &DenseArray,
    class_embeddings: &DenseArray,
    labels: &[usize],
    tau: f64,
) -> Result<Vec<f64>> {
    let p = class_probabilities(features, class_embeddings, tau)?;
    Ok(labels
        .iter()
        .enumerate()
        .map(|(i, &y)| -p.row(i)[y].ln())
        .collect())
}

fn row_dist(a: &DenseArray, b: &DenseArray) -> Vec<f64> {
    (0..a.rows())
        .map(|i| sq_dist(a.row(i), b.row(i)).sqrt())
        .collect()
}

fn blend(a: &StyleCoefficients, t: f64) -> StyleCoefficients {
    let raw: Vec<f64> = a
        .values()
        .iter()
        .enumerate()
        .map(|(j, &v)| t * v + if j == 0 { 1.0 - t } else { 0.0 })
        .collect();
    StyleCoefficients::project(&raw)
}

/// Compares the learned worst-case stylization of every row against
/// `trials` random simplex stylizations pulled toward the identity until
/// their feature displacement is within the learned radius.
pub fn robustness_audit(
    objective: &WorstCaseObjective<'_>,
    problem: &StyleProblem,
    cfg: &WeraConfig,
    trials: usize,
    rng: &mut impl Rng,
) -> Result<AuditReport> {
    let b = problem.len();
    let init = initial_coefficients(b, cfg, rng);
    let learned = inner_ascent_batch(objective, problem, init, cfg)?.coefficients;
    let learned_feats = objective.features(problem, &learned)?;
    let radius = row_dist(&learned_feats, objective.originals);
    let learned_ce = row_ce(
        &learned_feats,
        objective.class_embeddings,
        &problem.labels,
        objective.tau,
    )?;
    let degenerate = radius.iter().filter(|&&r| r < RADIUS_FLOOR).count();
    let mean_radius = radius.iter().sum::<f64>() / b.max(1) as f64;
    if trials == 0 || b == 0 {
        return Ok(AuditReport {
            samples: b,
            trials,
            fraction: 1.0,
            mean_radius,
            degenerate,
        });
    }

    let rows: Vec<usize> = (0..b)
        .flat_map(|i| std::iter::repeat_n(i, trials))
        .collect();
    let expanded = problem.select_rows(&rows);
    let originals = objective.originals.select_rows(&rows);
    let targets: Vec<f64> = rows.iter().map(|&i| radius[i]).collect();
    let randoms: Vec<StyleCoefficients> = rows
        .iter()
        .map(|_| StyleCoefficients::random(cfg.bases, rng))
        .collect();
    let expanded_objective = WorstCaseObjective {
        originals: &originals,
        ..*objective
    };

    let full = expanded_objective.features(&expanded, &randoms)?;
    let full_dist = row_dist(&full, &originals);
    let mut lo = vec![0.0; rows.len()];
    let mut hi = vec![1.0; rows.len()];
    for (r, &d) in full_dist.iter().enumerate() {
        if d <= targets[r] {
            lo[r] = 1.0;
        }
    }
    for _ in 0..BISECTION_STEPS {
        let mid: Vec<f64> = lo.iter().zip(&hi).map(|(l, h)| 0.5 * (l + h)).collect();
        let coeffs: Vec<StyleCoefficients> = randoms
            .iter()
            .zip(&mid)
            .map(|(a, &t)| blend(a, t))
            .collect();
        let dist = row_dist(
            &expanded_objective.features(&expanded, &coeffs)?,
            &originals,
        );
        for r in 0..rows.len() {
            if lo[r] >= 1.0 {
                continue;
            }
            if dist[r] <= targets[r] {
                lo[r] = mid[r];
            } else {
                hi[r] = mid[r];
            }
        }
    }
    let matched: Vec<StyleCoefficients> =
        randoms.iter().zip(&lo).map(|(a, &t)| blend(a, t)).collect();
    let random_ce = row_ce(
        &expanded_objective.features(&expanded, &matched)?,
        objective.class_embeddings,
        &expanded.labels,
        objective.tau,
    )?;
    let wins = (0..b)
        .filter(|&i| {
            let best = random_ce[i * trials..(i + 1) * trials]
                .iter()
                .copied()
                .fold(f64::NEG_INFINITY, f64::max);
            learned_ce[i] >= best
        })
        .count();
    Ok(AuditReport {
        samples: b,
        trials,
        fraction: wins as f64 / b as f64,
        mean_radius,
        degenerate,
    })
}
