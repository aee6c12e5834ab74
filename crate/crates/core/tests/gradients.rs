//! Tape gradients of every training objective against central differences.

mod common;

use common::gradient_cases::{self as cases, GradientCheck, SEEDS, TOLERANCE};

fn check_all_seeds(what: &str, case: fn(u64) -> GradientCheck) {
    for seed in 0..SEEDS {
        let check = case(seed);
        assert!(check.loss.is_finite());
        assert!(
            check.relative_error <= TOLERANCE,
            "{what} seed {seed}: relative error {:e}, per input {:?} of {:?}",
            check.relative_error,
            check.abs_errors,
            check.grad_norms
        );
    }
}

#[test]
fn every_case_is_listed() {
    assert_eq!(cases::CASES.len(), 8);
}

#[test]
fn class_and_domain_context_gradients() {
    check_all_seeds("text stage", cases::class_and_domain_context_gradients);
}

#[test]
fn invariant_and_specific_visual_prompt_gradients() {
    check_all_seeds(
        "visual stage",
        cases::invariant_and_specific_visual_prompt_gradients,
    );
}

#[test]
fn outer_objective_gradient() {
    check_all_seeds("outer objective", cases::outer_objective_gradient);
}

#[test]
fn worst_case_surrogate_gradient_in_style_coefficients() {
    check_all_seeds(
        "worst-case surrogate",
        cases::worst_case_surrogate_gradient_in_style_coefficients,
    );
}

#[test]
fn prototype_cache_gradient_in_keys_and_queries() {
    check_all_seeds(
        "prototype cache",
        cases::prototype_cache_gradient_in_keys_and_queries,
    );
}

#[test]
fn text_encoder_jacobian() {
    check_all_seeds("text encoder", cases::text_encoder_jacobian);
}

#[test]
fn visual_tail_jacobian_in_prompts_and_intermediates() {
    check_all_seeds(
        "visual tail",
        cases::visual_tail_jacobian_in_prompts_and_intermediates,
    );
}

#[test]
fn contrastive_and_confusion_gradients_on_unit_rows() {
    check_all_seeds(
        "contrastive + confusion",
        cases::contrastive_and_confusion_gradients_on_unit_rows,
    );
}
