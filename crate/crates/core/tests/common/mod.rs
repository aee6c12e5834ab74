#![allow(dead_code)]

use padg_core::backbone::{Backbone, BackboneConfig};
use padg_core::harness::synthetic::{generate_synthetic, GeneratorConfig, SyntheticBenchmark};
use padg_core::numerics::DenseArray;
use padg_core::stages::{PromptState, TrainingSet};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

/// A backbone small enough for finite differences.
pub fn tiny_config(seed: u64) -> BackboneConfig {
    BackboneConfig {
        seed,
        tokens: 4,
        in_channels: 5,
        channels: 6,
        embed_dim: 7,
        token_dim: 4,
        text_context_len: 3,
        visual_prompt_len: 2,
        text_hidden: 9,
        visual_hidden: 8,
        n_classes: 3,
        n_domains: 3,
    }
}

pub struct Fixture {
    pub backbone: Backbone,
    pub bench: SyntheticBenchmark,
    pub set: TrainingSet,
    pub state: PromptState,
}

/// Tiny backbone, synthetic data and a training set over the given sources.
pub fn fixture(seed: u64, sources: &[usize], per_cell: usize) -> Fixture {
    let cfg = tiny_config(seed);
    let backbone = Backbone::new(cfg.clone()).unwrap();
    let gen = GeneratorConfig {
        n_classes: cfg.n_classes,
        n_domains: cfg.n_domains,
        samples_per_cell: per_cell,
        seed,
        ..GeneratorConfig::default()
    };
    let bench = generate_synthetic(&gen, &backbone).unwrap();
    let ids = bench.dataset.ids_in_domains(sources);
    let set = TrainingSet::new(&backbone, &bench.dataset, &ids, sources).unwrap();
    let state = PromptState::init(&backbone, sources, seed + 100).unwrap();
    Fixture {
        backbone,
        bench,
        set,
        state,
    }
}

pub fn gaussian(shape: &[usize], std: f64, rng: &mut ChaCha8Rng) -> DenseArray {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| std * rng.sample::<f64, _>(StandardNormal))
        .collect();
    DenseArray::new(shape.to_vec(), data).unwrap()
}

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Default-size backbone and benchmark with a training set over `sources`.
pub fn default_fixture(seed: u64, sources: &[usize], per_cell: usize) -> Fixture {
    let backbone = Backbone::new(BackboneConfig {
        seed,
        ..BackboneConfig::default()
    })
    .unwrap();
    let gen = GeneratorConfig {
        samples_per_cell: per_cell,
        seed,
        ..GeneratorConfig::default()
    };
    let bench = generate_synthetic(&gen, &backbone).unwrap();
    let ids = bench.dataset.ids_in_domains(sources);
    let set = TrainingSet::new(&backbone, &bench.dataset, &ids, sources).unwrap();
    let state = PromptState::init(&backbone, sources, seed + 100).unwrap();
    Fixture {
        backbone,
        bench,
        set,
        state,
    }
}
pub mod gradient_cases;
