//! End-to-end runs under the leave-one-domain-out protocol.

use std::collections::BTreeSet;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, VisualPromptSet};
use crate::diagnostics::{
    robustness_audit, source_target_divergence, AuditReport, DivergenceReport, KernelSpec,
};
use crate::dspl::{
    combined_predict, finetune_prototypes, init_prototypes, specific_scores, PrototypeBank,
};
use crate::error::{Error, Result};
use crate::harness::config::RunConfig;
use crate::harness::data::{AnchorEmbeddings, Dataset};
use crate::objectives::class_probabilities;
use crate::stages::{
    accuracy, argmax_rows, train_gat, train_imt, PromptState, StageReport, TextEmbeddingBank,
    TrainingSet,
};
use crate::wera::{batch_bases, train_wera, SimplexAudit, StyleProblem, WorstCaseObjective};

/// Held-out evaluation data: raw ids plus their cached intermediates.
#[derive(Clone, Debug)]
pub struct EvalSet {
    pub sample_ids: Vec<usize>,
    pub intermediates: crate::numerics::DenseArray,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
}

impl EvalSet {
    pub fn new(backbone: &Backbone, dataset: &Dataset, ids: &[usize]) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("evaluation set is empty"));
        }
        Ok(Self {
            sample_ids: ids.to_vec(),
            intermediates: backbone.visual_front(&dataset.batch_tokens(ids))?,
            labels: ids.iter().map(|&i| dataset.samples[i].class).collect(),
            domains: ids.iter().map(|&i| dataset.samples[i].domain).collect(),
        })
    }
}

/// Accuracy of the invariant classifier alone.
pub fn invariant_accuracy(
    backbone: &Backbone,
    eval: &EvalSet,
    bank: &TextEmbeddingBank,
    prompts: &VisualPromptSet,
    tau: f64,
) -> Result<f64> {
    let z = backbone.embed(&eval.intermediates, prompts)?;
    let p = class_probabilities(&z, &bank.invariant, tau)?;
    Ok(accuracy(&argmax_rows(&p), &eval.labels))
}

#[derive(Clone, Debug, PartialEq)]
pub struct DsplAccuracy {
    pub blended: f64,
    pub specific: f64,
}

pub fn dspl_accuracy(
    backbone: &Backbone,
    eval: &EvalSet,
    bank: &TextEmbeddingBank,
    state: &PromptState,
    protos: &PrototypeBank,
    beta2: f64,
    tau: f64,
) -> Result<DsplAccuracy> {
    let zi = backbone.embed(&eval.intermediates, &state.invariant_visual)?;
    let zs = backbone.embed(&eval.intermediates, &state.specific_visual)?;
    let pred = combined_predict(&zi, &zs, &bank.invariant, protos, beta2, tau)?;
    let ps = specific_scores(&zs, protos)?;
    Ok(DsplAccuracy {
        blended: accuracy(&pred.classes, &eval.labels),
        specific: accuracy(&argmax_rows(&ps), &eval.labels),
    })
}

/// Average source-to-target MMD of invariant features.
pub fn invariant_divergence(
    backbone: &Backbone,
    set: &TrainingSet,
    eval: &EvalSet,
    prompts: &VisualPromptSet,
) -> Result<DivergenceReport> {
    let source_feats = backbone.embed(&set.intermediates, prompts)?;
    let target = backbone.embed(&eval.intermediates, prompts)?;
    let sources = set
        .source_domains
        .iter()
        .enumerate()
        .map(|(local, &global)| {
            let rows: Vec<usize> = (0..set.len())
                .filter(|&r| set.domains[r] == local)
                .collect();
            (global, source_feats.select_rows(&rows))
        })
        .collect::<Vec<_>>();
    source_target_divergence(&sources, &target, &KernelSpec::default())
}

/// Fraction of training samples whose specific feature picks its own
/// domain embedding.
pub fn specific_domain_accuracy(
    backbone: &Backbone,
    set: &TrainingSet,
    bank: &TextEmbeddingBank,
    prompts: &VisualPromptSet,
    tau: f64,
) -> Result<f64> {
    let z = backbone.embed(&set.intermediates, prompts)?;
    let p = class_probabilities(&z, &bank.specific, tau)?;
    Ok(accuracy(&argmax_rows(&p), &set.domains))
}

/// Mean entropy of the domain softmax of invariant features.
pub fn invariant_domain_entropy(
    backbone: &Backbone,
    set: &TrainingSet,
    bank: &TextEmbeddingBank,
    prompts: &VisualPromptSet,
    tau: f64,
) -> Result<f64> {
    let z = backbone.embed(&set.intermediates, prompts)?;
    let p = class_probabilities(&z, &bank.specific, tau)?;
    let h: f64 = (0..p.rows())
        .map(|i| {
            -p.row(i)
                .iter()
                .filter(|&&q| q > 0.0)
                .map(|&q| q * q.ln())
                .sum::<f64>()
        })
        .sum();
    Ok(h / p.rows() as f64)
}

#[derive(Clone, Debug, PartialEq)]
pub struct LooMetrics {
    pub held_out: Option<usize>,
    pub acc_untrained: f64,
    pub acc_gat: f64,
    pub acc_imt: f64,
    pub acc_wera: f64,
    pub acc_dspl: f64,
    pub acc_dspl_tuned: f64,
    pub acc_specific: f64,
    pub acc_specific_tuned: f64,
    pub mmd_untrained: f64,
    pub mmd_imt: f64,
    pub mmd_wera: f64,
    pub entropy_before_imt: f64,
    pub entropy_after_imt: f64,
    pub specific_domain_acc: f64,
    pub audit_fraction: f64,
}

impl LooMetrics {
    pub const CSV_HEADER: &'static str = "held_out,acc_untrained,acc_gat,acc_imt,acc_wera,acc_dspl,acc_dspl_tuned,acc_specific,acc_specific_tuned,mmd_untrained,mmd_imt,mmd_wera,entropy_before_imt,entropy_after_imt,specific_domain_acc,audit_fraction";

    pub fn csv_row(&self) -> String {
        let fields = [
            self.acc_untrained,
            self.acc_gat,
            self.acc_imt,
            self.acc_wera,
            self.acc_dspl,
            self.acc_dspl_tuned,
            self.acc_specific,
            self.acc_specific_tuned,
            self.mmd_untrained,
            self.mmd_imt,
            self.mmd_wera,
            self.entropy_before_imt,
            self.entropy_after_imt,
            self.specific_domain_acc,
            self.audit_fraction,
        ];
        let held = self.held_out.map_or("none".to_string(), |d| d.to_string());
        let vals: Vec<String> = fields.iter().map(|v| format!("{v:.9}")).collect();
        format!("{held},{}", vals.join(","))
    }
}

#[derive(Clone, Debug)]
pub struct PipelineRun {
    pub state: PromptState,
    pub text_bank: TextEmbeddingBank,
    pub prototypes: PrototypeBank,
    pub tuned_prototypes: PrototypeBank,
    pub reports: Vec<StageReport>,
    pub simplex: SimplexAudit,
    pub audit: AuditReport,
    pub metrics: LooMetrics,
    /// Every sample id consumed by a training or prototype step.
    pub training_ids: BTreeSet<usize>,
}

/// Splits sample ids into (sources, held-out) and returns the source
/// domains in ascending order.
pub fn loo_split(
    dataset: &Dataset,
    held_out: Option<usize>,
) -> Result<(Vec<usize>, Vec<usize>, Vec<usize>)> {
    if let Some(h) = held_out {
        if h >= dataset.n_domains {
            return Err(Error::invalid(format!(
                "held-out domain {h} ≥ N_s = {}",
                dataset.n_domains
            )));
        }
    }
    let sources: Vec<usize> = (0..dataset.n_domains)
        .filter(|&d| Some(d) != held_out)
        .collect();
    let train = dataset.ids_in_domains(&sources);
    let test = match held_out {
        Some(h) => dataset.ids_in_domains(&[h]),
        None => train.clone(),
    };
    Ok((sources, train, test))
}

/// Runs every stage on the source domains and evaluates on the held-out
/// domain (or on the training data when nothing is held out).
pub fn run_pipeline(
    cfg: &RunConfig,
    backbone: &Backbone,
    dataset: &Dataset,
    anchors: &AnchorEmbeddings,
    held_out: Option<usize>,
) -> Result<PipelineRun> {
    let (sources, train_ids, test_ids) = loo_split(dataset, held_out)?;
    let set = TrainingSet::new(backbone, dataset, &train_ids, &sources)?;
    let eval = EvalSet::new(backbone, dataset, &test_ids)?;
    let tau = cfg.weights.tau;
    let mut state = PromptState::init(backbone, &sources, cfg.seed)?;
    let mut reports = Vec::new();

    let untrained_bank = state.text_bank(backbone)?;
    let acc_untrained = invariant_accuracy(
        backbone,
        &eval,
        &untrained_bank,
        &state.invariant_visual,
        tau,
    )?;
    let mmd_untrained =
        invariant_divergence(backbone, &set, &eval, &state.invariant_visual)?.average;

    let (text_bank, gat) = train_gat(
        backbone,
        &set,
        anchors,
        &mut state,
        &cfg.weights,
        &cfg.stage_options(cfg.gat_epochs, cfg.lr, 1),
    )?;
    reports.push(gat);
    let acc_gat = invariant_accuracy(backbone, &eval, &text_bank, &state.invariant_visual, tau)?;
    let entropy_before_imt =
        invariant_domain_entropy(backbone, &set, &text_bank, &state.invariant_visual, tau)?;

    reports.push(train_imt(
        backbone,
        &set,
        &text_bank,
        &mut state,
        &cfg.weights,
        &cfg.stage_options(cfg.imt_epochs, cfg.lr, 2),
    )?);
    let acc_imt = invariant_accuracy(backbone, &eval, &text_bank, &state.invariant_visual, tau)?;
    let mmd_imt = invariant_divergence(backbone, &set, &eval, &state.invariant_visual)?.average;
    let entropy_after_imt =
        invariant_domain_entropy(backbone, &set, &text_bank, &state.invariant_visual, tau)?;
    let specific_domain_acc =
        specific_domain_accuracy(backbone, &set, &text_bank, &state.specific_visual, tau)?;

    let wera = train_wera(
        backbone,
        &set,
        &text_bank,
        &mut state,
        &cfg.weights,
        &cfg.wera,
        &cfg.stage_options(cfg.wera_epochs, cfg.wera_lr, 3),
    )?;
    reports.push(wera.stage);
    let acc_wera = invariant_accuracy(backbone, &eval, &text_bank, &state.invariant_visual, tau)?;
    let mmd_wera = invariant_divergence(backbone, &set, &eval, &state.invariant_visual)?.average;

    let prototypes = init_prototypes(backbone, &set, &state.specific_visual, cfg.beta_sharp)?;
    let (tuned_prototypes, proto_report) = finetune_prototypes(
        &prototypes,
        backbone,
        &set,
        &state.specific_visual,
        &cfg.stage_options(cfg.proto_epochs, cfg.proto_lr, 4),
    )?;
    reports.push(proto_report);
    let plain = dspl_accuracy(
        backbone,
        &eval,
        &text_bank,
        &state,
        &prototypes,
        cfg.beta2,
        tau,
    )?;
    let tuned = dspl_accuracy(
        backbone,
        &eval,
        &text_bank,
        &state,
        &tuned_prototypes,
        cfg.beta2,
        tau,
    )?;

    let audit = audit_training_set(cfg, backbone, &set, &text_bank, &state.invariant_visual)?;

    let mut training_ids: BTreeSet<usize> = set.sample_ids.iter().copied().collect();
    for r in &reports {
        training_ids.extend(&r.samples_seen);
    }
    if let Some(h) = held_out {
        if let Some(&leak) = training_ids
            .iter()
            .find(|&&i| dataset.samples[i].domain == h)
        {
            return Err(Error::invalid(format!(
                "held-out sample {leak} reached a training step"
            )));
        }
    }

    Ok(PipelineRun {
        metrics: LooMetrics {
            held_out,
            acc_untrained,
            acc_gat,
            acc_imt,
            acc_wera,
            acc_dspl: plain.blended,
            acc_dspl_tuned: tuned.blended,
            acc_specific: plain.specific,
            acc_specific_tuned: tuned.specific,
            mmd_untrained,
            mmd_imt,
            mmd_wera,
            entropy_before_imt,
            entropy_after_imt,
            specific_domain_acc,
            audit_fraction: audit.fraction,
        },
        state,
        text_bank,
        prototypes,
        tuned_prototypes,
        reports,
        simplex: wera.simplex,
        audit,
        training_ids,
    })
}

/// Robustness audit on the first `audit_samples` training rows, with bases
/// drawn within that subset.
pub fn audit_training_set(
    cfg: &RunConfig,
    backbone: &Backbone,
    set: &TrainingSet,
    bank: &TextEmbeddingBank,
    prompts: &VisualPromptSet,
) -> Result<AuditReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed.wrapping_mul(1000).wrapping_add(5));
    let n = cfg.audit_samples.min(set.len());
    // Spread the subset over the whole set so every domain is represented.
    let rows: Vec<usize> = (0..n).map(|i| i * set.len() / n.max(1)).collect();
    let batch = set.batch(&rows);
    let bases = batch_bases(rows.len(), cfg.wera.bases, &mut rng);
    let problem = StyleProblem::new(&batch.intermediates, &batch.labels, &bases)?;
    let originals = backbone.embed(&batch.intermediates, prompts)?;
    let objective = WorstCaseObjective {
        backbone,
        class_embeddings: &bank.invariant,
        prompts,
        originals: &originals,
        gamma_prime: cfg.wera.gamma_prime,
        tau: cfg.weights.tau,
    };
    robustness_audit(&objective, &problem, &cfg.wera, cfg.audit_trials, &mut rng)
}
