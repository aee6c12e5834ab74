//! Seeded multi-domain benchmark whose domain shift is purely per-channel
//! scale and shift of the raw tokens.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use super::data::{AnchorEmbeddings, Dataset, Sample};
use crate::backbone::Backbone;
use crate::error::{Error, Result};
use crate::numerics::{normalize_in_place, DenseArray};

#[derive(Clone, Debug, PartialEq)]
pub struct GeneratorConfig {
    pub n_classes: usize,
    pub n_domains: usize,
    pub samples_per_cell: usize,
    pub token_noise: f64,
    pub style_scale: (f64, f64),
    pub style_shift: (f64, f64),
    pub anchor_noise: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            n_classes: 7,
            n_domains: 4,
            samples_per_cell: 60,
            token_noise: 0.3,
            style_scale: (0.8, 1.25),
            style_shift: (-0.3, 0.3),
            anchor_noise: 0.05,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_classes == 0 || self.n_domains == 0 || self.samples_per_cell == 0 {
            return Err(Error::Config("generator counts must be positive".into()));
        }
        let (lo, hi) = self.style_scale;
        if !(lo > 0.0 && hi >= lo) {
            return Err(Error::Config(format!(
                "style scale range ({lo}, {hi}) must be positive and ordered"
            )));
        }
        if !(self.style_shift.1 >= self.style_shift.0) {
            return Err(Error::Config("style shift range must be ordered".into()));
        }
        if !(self.token_noise >= 0.0 && self.anchor_noise >= 0.0) {
            return Err(Error::Config("noise scales must be ≥ 0".into()));
        }
        Ok(())
    }
}

/// Generator parameters, kept for moment checks.
#[derive(Clone, Debug)]
pub struct SyntheticTruth {
    /// Per-class `L_tok × C_in` content, standardized per channel.
    pub content: Vec<DenseArray>,
    /// Per-domain channel scales `s_m`.
    pub scales: Vec<Vec<f64>>,
    /// Per-domain channel shifts `b_m`.
    pub shifts: Vec<Vec<f64>>,
    /// Unit class directions before anchor noise.
    pub class_directions: DenseArray,
}

#[derive(Clone, Debug)]
pub struct SyntheticBenchmark {
    pub dataset: Dataset,
    pub anchors: AnchorEmbeddings,
    pub truth: SyntheticTruth,
}

fn styled(content: &DenseArray, scale: &[f64], shift: &[f64]) -> DenseArray {
    let w = content.cols();
    let data = content
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| scale[i % w] * v + shift[i % w])
        .collect();
    DenseArray::new(content.shape().to_vec(), data).expect("same shape")
}

fn noisy_unit(direction: &[f64], noise: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let per = Normal::new(0.0, noise / (direction.len() as f64).sqrt()).expect("finite std");
    let mut v: Vec<f64> = direction.iter().map(|&x| x + per.sample(rng)).collect();
    normalize_in_place(&mut v);
    v
}

/// Draws the dataset and the anchor embeddings. Anchors are the frozen
/// zero-prompt encodings of the unstyled class content and of each
/// domain's centred mean style, each perturbed by `anchor_noise`.
pub fn generate_synthetic(
    cfg: &GeneratorConfig,
    backbone: &Backbone,
) -> Result<SyntheticBenchmark> {
    cfg.validate()?;
    let bc = backbone.config();
    if bc.n_classes != cfg.n_classes || bc.n_domains != cfg.n_domains {
        return Err(Error::Config(format!(
            "backbone has {} classes / {} domains, generator {} / {}",
            bc.n_classes, bc.n_domains, cfg.n_classes, cfg.n_domains
        )));
    }
    let (l, c_in) = (bc.tokens, bc.in_channels);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");

    let content: Vec<DenseArray> = (0..cfg.n_classes)
        .map(|_| {
            let mut data: Vec<f64> = (0..l * c_in).map(|_| std_normal.sample(&mut rng)).collect();
            standardize_columns(&mut data, l, c_in);
            DenseArray::new(vec![l, c_in], data).expect("shape")
        })
        .collect();
    let mut scales = Vec::with_capacity(cfg.n_domains);
    let mut shifts = Vec::with_capacity(cfg.n_domains);
    for _ in 0..cfg.n_domains {
        scales.push(
            (0..c_in)
                .map(|_| sample_range(&mut rng, cfg.style_scale))
                .collect::<Vec<_>>(),
        );
        shifts.push(
            (0..c_in)
                .map(|_| sample_range(&mut rng, cfg.style_shift))
                .collect::<Vec<_>>(),
        );
    }

    let noise = Normal::new(0.0, cfg.token_noise).expect("finite noise");
    let mut samples = Vec::with_capacity(cfg.n_domains * cfg.n_classes * cfg.samples_per_cell);
    for m in 0..cfg.n_domains {
        for (k, ck) in content.iter().enumerate() {
            for _ in 0..cfg.samples_per_cell {
                let data = ck
                    .data()
                    .iter()
                    .enumerate()
                    .map(|(i, &v)| {
                        let ch = i % c_in;
                        let x = scales[m][ch] * (v + noise.sample(&mut rng)) + shifts[m][ch];
                        x as f32 as f64
                    })
                    .collect();
                samples.push(Sample {
                    class: k,
                    domain: m,
                    tokens: DenseArray::new(vec![l, c_in], data)?,
                });
            }
        }
    }
    let dataset = Dataset {
        tokens: l,
        in_channels: c_in,
        n_classes: cfg.n_classes,
        n_domains: cfg.n_domains,
        samples,
    };

    let zero = backbone.zero_prompts();
    let stack = |arrays: &[DenseArray]| -> Result<DenseArray> {
        let refs: Vec<&DenseArray> = arrays.iter().collect();
        let flat = DenseArray::vstack(&refs)?;
        flat.reshape(vec![arrays.len(), l, c_in])
    };
    let class_directions = backbone.encode_image(&stack(&content)?, &zero)?;

    let d = bc.embed_dim;
    let mut domain_means = vec![vec![0.0; d]; cfg.n_domains];
    for m in 0..cfg.n_domains {
        let styled_content: Vec<DenseArray> = content
            .iter()
            .map(|ck| styled(ck, &scales[m], &shifts[m]))
            .collect();
        let feats = backbone.encode_image(&stack(&styled_content)?, &zero)?;
        for k in 0..cfg.n_classes {
            for (acc, &v) in domain_means[m].iter_mut().zip(feats.row(k)) {
                *acc += v / cfg.n_classes as f64;
            }
        }
    }
    let mut grand = vec![0.0; d];
    for mean in &domain_means {
        for (g, &v) in grand.iter_mut().zip(mean) {
            *g += v / cfg.n_domains as f64;
        }
    }

    let mut class_rows = Vec::with_capacity(cfg.n_classes);
    for k in 0..cfg.n_classes {
        class_rows.push(noisy_unit(
            class_directions.row(k),
            cfg.anchor_noise,
            &mut rng,
        ));
    }
    let mut domain_rows = Vec::with_capacity(cfg.n_domains);
    for mean in &domain_means {
        let mut centred: Vec<f64> = mean.iter().zip(&grand).map(|(a, b)| a - b).collect();
        if cfg.n_domains == 1 || normalize_in_place(&mut centred) == 0.0 {
            centred = mean.clone();
            normalize_in_place(&mut centred);
        }
        domain_rows.push(noisy_unit(&centred, cfg.anchor_noise, &mut rng));
    }
    // Round through f32 so the in-memory anchors equal what the file holds.
    let to_f32 = |rows: Vec<Vec<f64>>| -> Result<DenseArray> {
        let mut a = DenseArray::from_rows(&rows)?;
        a.data_mut().iter_mut().for_each(|v| *v = *v as f32 as f64);
        Ok(a)
    };
    let anchors = AnchorEmbeddings {
        class_anchors: to_f32(class_rows)?,
        domain_anchors: to_f32(domain_rows)?,
    };
    Ok(SyntheticBenchmark {
        dataset,
        anchors,
        truth: SyntheticTruth {
            content,
            scales,
            shifts,
            class_directions,
        },
    })
}

fn sample_range(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if hi > lo {
        rng.random_range(lo..hi)
    } else {
        lo
    }
}

fn standardize_columns(data: &mut [f64], rows: usize, cols: usize) {
    for ch in 0..cols {
        let mean = (0..rows).map(|t| data[t * cols + ch]).sum::<f64>() / rows as f64;
        let var = (0..rows)
            .map(|t| (data[t * cols + ch] - mean).powi(2))
            .sum::<f64>()
            / rows as f64;
        let sd = var.sqrt().max(1e-12);
        for t in 0..rows {
            data[t * cols + ch] = (data[t * cols + ch] - mean) / sd;
        }
    }
}
