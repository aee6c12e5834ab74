//! Cross-modal disentanglement: text prompts against anchor embeddings,
//! then invariant/specific visual prompts guided by the frozen text banks.

use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{Backbone, TextPrompt, VisualPromptSet};
use crate::error::{Error, Result};
use crate::harness::data::{AnchorEmbeddings, Dataset};
use crate::numerics::{DenseArray, Sgd, Tape, Var};
use crate::objectives::{confusion_loss, contrastive_ce, l2_distill, LossWeights};

/// Reads an `ANCH1` file, checking its width against the backbone.
pub fn load_anchors(path: impl AsRef<Path>, backbone: &Backbone) -> Result<AnchorEmbeddings> {
    let anchors = AnchorEmbeddings::read(path, Some(backbone.config().embed_dim))?;
    let cfg = backbone.config();
    if anchors.class_anchors.rows() != cfg.n_classes
        || anchors.domain_anchors.rows() != cfg.n_domains
    {
        return Err(Error::Config(format!(
            "anchor file has {} classes / {} domains, config {} / {}",
            anchors.class_anchors.rows(),
            anchors.domain_anchors.rows(),
            cfg.n_classes,
            cfg.n_domains
        )));
    }
    Ok(anchors)
}

/// All learnable prompt parameters of the pipeline.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptState {
    /// Global ids of the domains the domain prompts describe, in row order.
    pub source_domains: Vec<usize>,
    pub class_text: TextPrompt,
    pub domain_text: TextPrompt,
    pub invariant_visual: VisualPromptSet,
    pub specific_visual: VisualPromptSet,
}

fn sub_seed(seed: u64, stream: u64) -> u64 {
    seed ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15)
}

impl PromptState {
    pub fn init(backbone: &Backbone, source_domains: &[usize], seed: u64) -> Result<Self> {
        if source_domains.is_empty() {
            return Err(Error::invalid("at least one source domain is required"));
        }
        Ok(Self {
            source_domains: source_domains.to_vec(),
            class_text: backbone.class_prompt(sub_seed(seed, 1)),
            domain_text: backbone.domain_prompt(source_domains, sub_seed(seed, 2))?,
            invariant_visual: backbone.visual_prompt(sub_seed(seed, 3)),
            specific_visual: backbone.visual_prompt(sub_seed(seed, 4)),
        })
    }

    pub fn text_bank(&self, backbone: &Backbone) -> Result<TextEmbeddingBank> {
        Ok(TextEmbeddingBank {
            invariant: backbone.text_embeddings(&self.class_text)?,
            specific: backbone.text_embeddings(&self.domain_text)?,
        })
    }
}

/// Frozen text embeddings: `N_c × d` class rows and `N_s × d` domain rows.
#[derive(Clone, Debug, PartialEq)]
pub struct TextEmbeddingBank {
    pub invariant: DenseArray,
    pub specific: DenseArray,
}

/// Training samples with their cached intermediate and reference features.
#[derive(Clone, Debug)]
pub struct TrainingSet {
    /// Index of each row in the source dataset.
    pub sample_ids: Vec<usize>,
    /// `[N, L_tok, C]` outputs of the visual front.
    pub intermediates: DenseArray,
    pub labels: Vec<usize>,
    /// Row index into `source_domains` for each sample.
    pub domains: Vec<usize>,
    /// Zero-prompt features `[N, d]`.
    pub reference: DenseArray,
    pub source_domains: Vec<usize>,
}

impl TrainingSet {
    pub fn new(
        backbone: &Backbone,
        dataset: &Dataset,
        ids: &[usize],
        source_domains: &[usize],
    ) -> Result<Self> {
        if ids.is_empty() {
            return Err(Error::invalid("training set is empty"));
        }
        let mut labels = Vec::with_capacity(ids.len());
        let mut domains = Vec::with_capacity(ids.len());
        for &i in ids {
            let s = dataset
                .samples
                .get(i)
                .ok_or_else(|| Error::invalid(format!("sample id {i} out of range")))?;
            let local = source_domains
                .iter()
                .position(|&d| d == s.domain)
                .ok_or_else(|| {
                    Error::invalid(format!(
                        "sample {i} has domain {} outside the sources",
                        s.domain
                    ))
                })?;
            labels.push(s.class);
            domains.push(local);
        }
        let intermediates = backbone.visual_front(&dataset.batch_tokens(ids))?;
        let reference = backbone.embed(&intermediates, &backbone.zero_prompts())?;
        Ok(Self {
            sample_ids: ids.to_vec(),
            intermediates,
            labels,
            domains,
            reference,
            source_domains: source_domains.to_vec(),
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn batch(&self, rows: &[usize]) -> Batch {
        let shape = self.intermediates.shape();
        let per = shape[1] * shape[2];
        let mut data = Vec::with_capacity(rows.len() * per);
        for &r in rows {
            data.extend_from_slice(&self.intermediates.data()[r * per..(r + 1) * per]);
        }
        Batch {
            intermediates: DenseArray::new(vec![rows.len(), shape[1], shape[2]], data)
                .expect("shape"),
            labels: rows.iter().map(|&r| self.labels[r]).collect(),
            domains: rows.iter().map(|&r| self.domains[r]).collect(),
            reference: self.reference.select_rows(rows),
            sample_ids: rows.iter().map(|&r| self.sample_ids[r]).collect(),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Batch {
    pub intermediates: DenseArray,
    pub labels: Vec<usize>,
    pub domains: Vec<usize>,
    pub reference: DenseArray,
    pub sample_ids: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StageOptions {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for StageOptions {
    fn default() -> Self {
        Self {
            epochs: 40,
            lr: 1e-3,
            weight_decay: 5e-4,
            momentum: 0.0,
            batch_size: 32,
            seed: 0,
        }
    }
}

impl StageOptions {
    pub(crate) fn optimizer(&self) -> Sgd {
        Sgd::new(self.lr, self.weight_decay).with_momentum(self.momentum)
    }

    pub(crate) fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be ≥ 1".into()));
        }
        if !(self.lr.is_finite() && self.lr >= 0.0 && self.weight_decay >= 0.0) {
            return Err(Error::Config(
                "lr and weight_decay must be finite and ≥ 0".into(),
            ));
        }
        Ok(())
    }
}

/// Shuffled minibatches of row positions for one epoch.
pub fn minibatches(n: usize, batch_size: usize, rng: &mut ChaCha8Rng) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order
        .chunks(batch_size.max(1))
        .map(<[usize]>::to_vec)
        .collect()
}

/// Per-epoch mean loss terms plus the ids of every sample a stage used.
#[derive(Clone, Debug, PartialEq)]
pub struct StageReport {
    pub stage: String,
    pub columns: Vec<String>,
    pub epochs: Vec<Vec<f64>>,
    pub samples_seen: BTreeSet<usize>,
}

impl StageReport {
    pub fn new(stage: &str, columns: &[&str]) -> Self {
        Self {
            stage: stage.to_string(),
            columns: columns.iter().map(|c| c.to_string()).collect(),
            epochs: Vec::new(),
            samples_seen: BTreeSet::new(),
        }
    }

    pub fn column(&self, name: &str) -> Option<Vec<f64>> {
        let j = self.columns.iter().position(|c| c == name)?;
        Some(self.epochs.iter().map(|row| row[j]).collect())
    }

    pub fn to_csv(&self) -> String {
        let mut out = format!("stage,epoch,{}\n", self.columns.join(","));
        for (e, row) in self.epochs.iter().enumerate() {
            let vals: Vec<String> = row.iter().map(|v| format!("{v:.9}")).collect();
            let _ = writeln!(out, "{},{},{}", self.stage, e + 1, vals.join(","));
        }
        out
    }
}

/// Running sums of the loss terms within an epoch.
pub(crate) struct EpochMeans {
    sums: Vec<f64>,
    batches: usize,
}

impl EpochMeans {
    pub(crate) fn new(width: usize) -> Self {
        Self {
            sums: vec![0.0; width],
            batches: 0,
        }
    }

    pub(crate) fn add(&mut self, terms: &[f64]) {
        for (s, t) in self.sums.iter_mut().zip(terms) {
            *s += t;
        }
        self.batches += 1;
    }

    pub(crate) fn finish(self) -> Vec<f64> {
        let n = self.batches.max(1) as f64;
        self.sums.into_iter().map(|s| s / n).collect()
    }
}

fn scalar(tape: &Tape, v: crate::numerics::Var) -> Result<f64> {
    tape.value(v).item()
}

#[derive(Clone, Copy, Debug)]
pub struct GatLoss {
    pub total: Var,
    pub ce_class: Var,
    pub ce_domain: Var,
    pub kg_class: Var,
    pub kg_domain: Var,
}

/// Text-stage objective on one batch of zero-prompt features. `anchors`
/// must already be restricted to the source domains.
#[allow(clippy::too_many_arguments)]
pub fn gat_loss(
    tape: &mut Tape,
    backbone: &Backbone,
    state: &PromptState,
    class_context: Var,
    domain_context: Var,
    batch: &Batch,
    anchors: &AnchorEmbeddings,
    weights: &LossWeights,
) -> Result<GatLoss> {
    let w = backbone.encode_text(tape, class_context, &state.class_text.class_tokens)?;
    let h = backbone.encode_text(tape, domain_context, &state.domain_text.class_tokens)?;
    let z = tape.constant(batch.reference.clone())?;
    let ce_class = contrastive_ce(tape, z, w, &batch.labels, weights.tau)?;
    let ce_domain = contrastive_ce(tape, z, h, &batch.domains, weights.tau)?;
    let wa = tape.constant(anchors.class_anchors.clone())?;
    let ha = tape.constant(anchors.domain_anchors.clone())?;
    let kg_class = l2_distill(tape, w, wa)?;
    let kg_domain = l2_distill(tape, h, ha)?;
    let kg = tape.add(kg_class, kg_domain)?;
    let kg = tape.scale(kg, weights.alpha1)?;
    let ce = tape.add(ce_class, ce_domain)?;
    Ok(GatLoss {
        total: tape.add(ce, kg)?,
        ce_class,
        ce_domain,
        kg_class,
        kg_domain,
    })
}

#[derive(Clone, Copy, Debug)]
pub struct ImtLoss {
    pub total: Var,
    pub ce_invariant: Var,
    pub ce_specific: Var,
    pub kg_invariant: Var,
    /// Absent with fewer than two source domains or `beta1 = 0`.
    pub confusion: Option<Var>,
}

/// Visual-stage objective on one batch for the invariant and specific
/// prompt sets.
pub fn imt_loss(
    tape: &mut Tape,
    backbone: &Backbone,
    invariant: Var,
    specific: Var,
    batch: &Batch,
    bank: &TextEmbeddingBank,
    weights: &LossWeights,
) -> Result<ImtLoss> {
    let x = tape.constant(batch.intermediates.clone())?;
    let z_i = backbone.visual_rest(tape, x, invariant)?;
    let z_s = backbone.visual_rest(tape, x, specific)?;
    let w = tape.constant(bank.invariant.clone())?;
    let h = tape.constant(bank.specific.clone())?;
    let zref = tape.constant(batch.reference.clone())?;
    let ce_invariant = contrastive_ce(tape, z_i, w, &batch.labels, weights.tau)?;
    let ce_specific = contrastive_ce(tape, z_s, h, &batch.domains, weights.tau)?;
    let kg_invariant = l2_distill(tape, z_i, zref)?;
    let ce = tape.add(ce_invariant, ce_specific)?;
    let kg_w = tape.scale(kg_invariant, weights.alpha2)?;
    let mut total = tape.add(ce, kg_w)?;
    let mut confusion = None;
    if bank.specific.rows() >= 2 && weights.beta1 > 0.0 {
        let mix = confusion_loss(tape, z_i, h, weights.tau)?;
        let mix_w = tape.scale(mix, weights.beta1)?;
        total = tape.add(total, mix_w)?;
        confusion = Some(mix);
    }
    Ok(ImtLoss {
        total,
        ce_invariant,
        ce_specific,
        kg_invariant,
        confusion,
    })
}

/// Trains the class and domain text contexts. Visual prompts are untouched;
/// image features are the cached zero-prompt references.
pub fn train_gat(
    backbone: &Backbone,
    set: &TrainingSet,
    anchors: &AnchorEmbeddings,
    state: &mut PromptState,
    weights: &LossWeights,
    opts: &StageOptions,
) -> Result<(TextEmbeddingBank, StageReport)> {
    weights.validate()?;
    opts.validate()?;
    let anchors = anchors.for_domains(&state.source_domains)?;
    if anchors.class_anchors.rows() != state.class_text.len() {
        return Err(Error::Config(format!(
            "{} class anchors for {} classes",
            anchors.class_anchors.rows(),
            state.class_text.len()
        )));
    }
    let mut report = StageReport::new(
        "gat",
        &["total", "ce_class", "ce_domain", "kg_class", "kg_domain"],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = opts.optimizer();
    for _ in 0..opts.epochs {
        let mut means = EpochMeans::new(5);
        for rows in minibatches(set.len(), opts.batch_size, &mut rng) {
            let batch = set.batch(&rows);
            report.samples_seen.extend(&batch.sample_ids);
            let mut tape = Tape::new();
            let ctx_i = tape.param(&state.class_text.context)?;
            let ctx_s = tape.param(&state.domain_text.context)?;
            let loss = gat_loss(
                &mut tape, backbone, state, ctx_i, ctx_s, &batch, &anchors, weights,
            )?;
            means.add(&[
                scalar(&tape, loss.total)?,
                scalar(&tape, loss.ce_class)?,
                scalar(&tape, loss.ce_domain)?,
                scalar(&tape, loss.kg_class)?,
                scalar(&tape, loss.kg_domain)?,
            ]);
            let total = loss.total;
            let grads = tape.backward(total)?;
            grads.accumulate(ctx_i, &mut state.class_text.context)?;
            grads.accumulate(ctx_s, &mut state.domain_text.context)?;
            opt.step(&mut [
                &mut state.class_text.context,
                &mut state.domain_text.context,
            ])?;
        }
        report.epochs.push(means.finish());
    }
    Ok((state.text_bank(backbone)?, report))
}

/// Trains the invariant and specific visual prompts jointly against the
/// frozen text banks.
pub fn train_imt(
    backbone: &Backbone,
    set: &TrainingSet,
    bank: &TextEmbeddingBank,
    state: &mut PromptState,
    weights: &LossWeights,
    opts: &StageOptions,
) -> Result<StageReport> {
    weights.validate()?;
    opts.validate()?;
    if bank.specific.rows() != set.source_domains.len() {
        return Err(Error::Config(format!(
            "{} domain embeddings for {} source domains",
            bank.specific.rows(),
            set.source_domains.len()
        )));
    }
    let mut report = StageReport::new(
        "imt",
        &[
            "total",
            "ce_invariant",
            "ce_specific",
            "kg_invariant",
            "confusion",
        ],
    );
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut opt = opts.optimizer();
    for _ in 0..opts.epochs {
        let mut means = EpochMeans::new(5);
        for rows in minibatches(set.len(), opts.batch_size, &mut rng) {
            let batch = set.batch(&rows);
            report.samples_seen.extend(&batch.sample_ids);
            let mut tape = Tape::new();
            let e_i = tape.param(&state.invariant_visual.tokens)?;
            let e_s = tape.param(&state.specific_visual.tokens)?;
            let loss = imt_loss(&mut tape, backbone, e_i, e_s, &batch, bank, weights)?;
            means.add(&[
                scalar(&tape, loss.total)?,
                scalar(&tape, loss.ce_invariant)?,
                scalar(&tape, loss.ce_specific)?,
                scalar(&tape, loss.kg_invariant)?,
                match loss.confusion {
                    Some(v) => scalar(&tape, v)?,
                    None => f64::NAN,
                },
            ]);
            let total = loss.total;
            let grads = tape.backward(total)?;
            grads.accumulate(e_i, &mut state.invariant_visual.tokens)?;
            grads.accumulate(e_s, &mut state.specific_visual.tokens)?;
            opt.step(&mut [
                &mut state.invariant_visual.tokens,
                &mut state.specific_visual.tokens,
            ])?;
        }
        report.epochs.push(means.finish());
    }
    Ok(report)
}

/// Row-wise argmax.
pub fn argmax_rows(scores: &DenseArray) -> Vec<usize> {
    let w = scores.cols();
    scores
        .data()
        .chunks(w)
        .map(|r| {
            r.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |best, (j, &v)| {
                    if v > best.1 {
                        (j, v)
                    } else {
                        best
                    }
                })
                .0
        })
        .collect()
}

pub fn accuracy(predicted: &[usize], truth: &[usize]) -> f64 {
    if truth.is_empty() {
        return 0.0;
    }
    predicted.iter().zip(truth).filter(|(p, t)| p == t).count() as f64 / truth.len() as f64
}
