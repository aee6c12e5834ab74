//! Gradient-check scenarios shared by the gradient suite and acceptance.

use super::{fixture, gaussian, rng};
use padg_core::dspl::{cache_ce, prototypes_from_features};
pub use padg_core::numerics::GradientCheck;
use padg_core::numerics::{check_gradients, DenseArray};
use padg_core::objectives::{confusion_loss, contrastive_ce, worst_surrogate, LossWeights};
use padg_core::stages::{gat_loss, imt_loss};
use padg_core::wera::{batch_bases, outer_loss, StyleCoefficients, StyleProblem};
use rand::Rng;

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-6;
pub const SEEDS: u64 = 20;

/// `n` row indices spread over a set of `len` rows, so batches mix domains.
fn rows(n: usize, len: usize) -> Vec<usize> {
    (0..n).map(|i| i * len / n).collect()
}

pub type Case = (&'static str, fn(u64) -> GradientCheck);

pub const CASES: &[Case] = &[
    ("text stage", class_and_domain_context_gradients),
    (
        "visual stage",
        invariant_and_specific_visual_prompt_gradients,
    ),
    ("outer objective", outer_objective_gradient),
    (
        "worst-case surrogate",
        worst_case_surrogate_gradient_in_style_coefficients,
    ),
    (
        "prototype cache",
        prototype_cache_gradient_in_keys_and_queries,
    ),
    ("text encoder", text_encoder_jacobian),
    (
        "visual tail",
        visual_tail_jacobian_in_prompts_and_intermediates,
    ),
    (
        "contrastive + confusion",
        contrastive_and_confusion_gradients_on_unit_rows,
    ),
];

pub fn class_and_domain_context_gradients(seed: u64) -> GradientCheck {
    let fx = fixture(seed, &[0, 1], 3);
    let anchors = fx.bench.anchors.for_domains(&[0, 1]).unwrap();
    let batch = fx.set.batch(&rows(6, fx.set.len()));
    let weights = LossWeights::default();
    let inputs = [
        fx.state.class_text.context.value.clone(),
        fx.state.domain_text.context.value.clone(),
    ];
    check_gradients(&inputs, STEP, |t, v| {
        let loss = gat_loss(
            t,
            &fx.backbone,
            &fx.state,
            v[0],
            v[1],
            &batch,
            &anchors,
            &weights,
        )?;
        Ok(loss.total)
    })
    .unwrap()
}

pub fn invariant_and_specific_visual_prompt_gradients(seed: u64) -> GradientCheck {
    let fx = fixture(seed, &[0, 2], 3);
    let bank = fx.state.text_bank(&fx.backbone).unwrap();
    let batch = fx.set.batch(&rows(6, fx.set.len()));
    let mut r = rng(seed);
    let inputs = [
        gaussian(&[2, 6], 0.5, &mut r),
        gaussian(&[2, 6], 0.5, &mut r),
    ];
    let weights = LossWeights::default();
    check_gradients(&inputs, STEP, |t, v| {
        let loss = imt_loss(t, &fx.backbone, v[0], v[1], &batch, &bank, &weights)?;
        assert!(loss.confusion.is_some());
        Ok(loss.total)
    })
    .unwrap()
}

pub fn outer_objective_gradient(seed: u64) -> GradientCheck {
    let fx = fixture(seed, &[0, 1], 3);
    let bank = fx.state.text_bank(&fx.backbone).unwrap();
    let batch = fx.set.batch(&rows(6, fx.set.len()));
    let mut r = rng(seed);
    let bases = batch_bases(6, 2, &mut r);
    let problem = StyleProblem::new(&batch.intermediates, &batch.labels, &bases).unwrap();
    let coeffs: Vec<_> = (0..6)
        .map(|_| StyleCoefficients::random(2, &mut r))
        .collect();
    let stylized = problem.stylized(&coeffs).unwrap();
    let inputs = [gaussian(&[2, 6], 0.5, &mut r)];
    let weights = LossWeights::default();
    check_gradients(&inputs, STEP, |t, v| {
        let loss = outer_loss(
            t,
            &fx.backbone,
            v[0],
            &batch,
            &stylized,
            &bank,
            &weights,
            weights.alpha3,
        )?;
        Ok(loss.total)
    })
    .unwrap()
}

pub fn worst_case_surrogate_gradient_in_style_coefficients(seed: u64) -> GradientCheck {
    let fx = fixture(seed, &[0, 1, 2], 2);
    let bank = fx.state.text_bank(&fx.backbone).unwrap();
    let batch = fx.set.batch(&rows(5, fx.set.len()));
    let mut r = rng(seed);
    let bases = batch_bases(5, 3, &mut r);
    let problem = StyleProblem::new(&batch.intermediates, &batch.labels, &bases).unwrap();
    let prompts = gaussian(&[2, 6], 0.5, &mut r);
    let originals = fx
        .backbone
        .embed(
            &batch.intermediates,
            &padg_core::backbone::VisualPromptSet {
                tokens: padg_core::numerics::Parameter::new(prompts.clone()),
            },
        )
        .unwrap();
    // Interior points of the simplex, away from the clamp.
    let raw: Vec<f64> = (0..5 * 4).map(|_| r.random_range(0.2..1.0)).collect();
    let coeffs = DenseArray::new(vec![5, 4], raw).unwrap();
    let weights = LossWeights::default();
    check_gradients(&[coeffs], STEP, |t, v| {
        let styl = problem.stylized_on_tape(t, v[0])?;
        let p = t.constant(prompts.clone())?;
        let z = fx.backbone.visual_rest(t, styl, p)?;
        let w = t.constant(bank.invariant.clone())?;
        let orig = t.constant(originals.clone())?;
        worst_surrogate(
            t,
            z,
            w,
            &problem.labels,
            orig,
            weights.gamma_prime,
            weights.tau,
        )
    })
    .unwrap()
}

pub fn prototype_cache_gradient_in_keys_and_queries(seed: u64) -> GradientCheck {
    let fx = fixture(seed, &[0, 1], 2);
    let feats = fx
        .backbone
        .embed(&fx.set.intermediates, &fx.state.specific_visual)
        .unwrap();
    let bank =
        prototypes_from_features(&feats, &fx.set.labels, &fx.set.domains, 3, 2, 5.0).unwrap();
    let queries = feats.select_rows(&rows(6, fx.set.len()));
    let labels: Vec<usize> = fx.set.labels[..6].to_vec();
    check_gradients(&[bank.keys.clone(), queries], STEP, |t, v| {
        cache_ce(t, v[1], v[0], &bank, &labels)
    })
    .unwrap()
}

pub fn text_encoder_jacobian(seed: u64) -> GradientCheck {
    let fx = fixture(seed, &[0], 1);
    let mut r = rng(seed);
    let probe = gaussian(&[3, 7], 1.0, &mut r);
    let tokens = fx.state.class_text.class_tokens.clone();
    check_gradients(
        std::slice::from_ref(&fx.state.class_text.context.value),
        STEP,
        |t, v| {
            let e = fx.backbone.encode_text(t, v[0], &tokens)?;
            let c = t.constant(probe.clone())?;
            let m = t.mul(e, c)?;
            t.sum_all(m)
        },
    )
    .unwrap()
}

pub fn visual_tail_jacobian_in_prompts_and_intermediates(seed: u64) -> GradientCheck {
    let fx = fixture(seed, &[0], 1);
    let mut r = rng(seed);
    let x = fx.set.batch(&rows(3, fx.set.len())).intermediates;
    let prompts = gaussian(&[2, 6], 0.5, &mut r);
    let probe = gaussian(&[3, 7], 1.0, &mut r);
    check_gradients(&[x, prompts], STEP, |t, v| {
        let z = fx.backbone.visual_rest(t, v[0], v[1])?;
        let c = t.constant(probe.clone())?;
        let m = t.mul(z, c)?;
        t.sum_all(m)
    })
    .unwrap()
}

pub fn contrastive_and_confusion_gradients_on_unit_rows(seed: u64) -> GradientCheck {
    let mut r = rng(seed);
    let features = gaussian(&[5, 4], 1.0, &mut r);
    let embeddings = gaussian(&[3, 4], 1.0, &mut r);
    let labels: Vec<usize> = (0..5).map(|i| i % 3).collect();
    check_gradients(&[features, embeddings], STEP, |t, v| {
        let f = t.l2_normalize(v[0])?;
        let e = t.l2_normalize(v[1])?;
        let ce = contrastive_ce(t, f, e, &labels, 0.1)?;
        let conf = confusion_loss(t, f, e, 0.1)?;
        t.add(ce, conf)
    })
    .unwrap()
}
