//! Frozen surrogate foundation model.
//!
//! The visual side is split the same way the stylization step needs it:
//! a per-token linear front half (`visual_front`) producing the
//! intermediate `L_tok × C` token matrix, and a rest (`visual_rest`) that
//! appends learnable prompt tokens, runs a shared per-token tanh MLP,
//! mean-pools over all tokens, projects to the embedding width and
//! L2-normalizes. The text side is a two-layer tanh MLP over the flattened
//! `[context…, class token]` sequence.
//!
//! All weights are a pure function of [`BackboneConfig::seed`] and are never
//! updated.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::numerics::{DenseArray, Parameter, Tape, Var};

/// Guard added to the token variance before taking the square root.
pub const STATS_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneConfig {
    pub seed: u64,
    /// Visual tokens per sample (`L_tok`).
    pub tokens: usize,
    /// Raw token width (`C_in`).
    pub in_channels: usize,
    /// Intermediate channel count (`C`).
    pub channels: usize,
    /// Joint embedding width (`d`).
    pub embed_dim: usize,
    /// Width of one text token.
    pub token_dim: usize,
    pub text_context_len: usize,
    pub visual_prompt_len: usize,
    pub text_hidden: usize,
    pub visual_hidden: usize,
    /// Number of class tokens to draw.
    pub n_classes: usize,
    /// Number of domain tokens to draw.
    pub n_domains: usize,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            tokens: 8,
            in_channels: 16,
            channels: 32,
            embed_dim: 32,
            token_dim: 32,
            text_context_len: 16,
            visual_prompt_len: 12,
            text_hidden: 256,
            visual_hidden: 64,
            n_classes: 7,
            n_domains: 4,
        }
    }
}

/// Learnable text context shared by every entry of one prompt set, paired
/// with the frozen per-entry class (or domain) tokens.
#[derive(Clone, Debug, PartialEq)]
pub struct TextPrompt {
    pub context: Parameter,
    pub class_tokens: DenseArray,
}

impl TextPrompt {
    pub fn len(&self) -> usize {
        self.class_tokens.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Learnable visual prompt tokens (`L_vp × C`).
#[derive(Clone, Debug, PartialEq)]
pub struct VisualPromptSet {
    pub tokens: Parameter,
}

impl VisualPromptSet {
    pub fn zeros(len: usize, channels: usize) -> Self {
        Self {
            tokens: Parameter::new(DenseArray::zeros(vec![len, channels])),
        }
    }
}

/// Per-channel token mean and ε-guarded standard deviation.
#[derive(Clone, Debug, PartialEq)]
pub struct InstanceStats {
    pub mu: Vec<f64>,
    pub sigma: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct Backbone {
    cfg: BackboneConfig,
    text_w_ctx: DenseArray,
    text_w_cls: DenseArray,
    text_b1: DenseArray,
    text_w2: DenseArray,
    text_b2: DenseArray,
    front_w: DenseArray,
    front_b: DenseArray,
    rest_w1: DenseArray,
    rest_b1: DenseArray,
    rest_w2: DenseArray,
    rest_b2: DenseArray,
    class_tokens: DenseArray,
    domain_tokens: DenseArray,
}

fn gaussian(rng: &mut ChaCha8Rng, shape: Vec<usize>, std: f64) -> DenseArray {
    let n: usize = shape.iter().product();
    let normal = Normal::new(0.0, std).expect("positive std");
    let data = (0..n).map(|_| normal.sample(rng)).collect();
    DenseArray::new(shape, data).expect("length matches shape")
}

impl Backbone {
    pub fn new(cfg: BackboneConfig) -> Result<Self> {
        let dims = [
            cfg.tokens,
            cfg.in_channels,
            cfg.channels,
            cfg.embed_dim,
            cfg.token_dim,
            cfg.text_context_len,
            cfg.text_hidden,
            cfg.visual_hidden,
            cfg.n_classes,
            cfg.n_domains,
        ];
        if dims.contains(&0) {
            return Err(Error::Config(format!(
                "backbone sizes must be positive: {cfg:?}"
            )));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let tok = cfg.token_dim as f64;
        let text_w_ctx = gaussian(
            &mut rng,
            vec![cfg.text_context_len * cfg.token_dim, cfg.text_hidden],
            4.0 / tok.sqrt(),
        );
        let text_w_cls = gaussian(
            &mut rng,
            vec![cfg.token_dim, cfg.text_hidden],
            2.0 / tok.sqrt(),
        );
        let text_b1 = gaussian(&mut rng, vec![cfg.text_hidden], 0.1);
        let text_w2 = gaussian(
            &mut rng,
            vec![cfg.text_hidden, cfg.embed_dim],
            1.0 / (cfg.text_hidden as f64).sqrt(),
        );
        let text_b2 = gaussian(&mut rng, vec![cfg.embed_dim], 0.01);
        let front_w = gaussian(
            &mut rng,
            vec![cfg.in_channels, cfg.channels],
            1.0 / (cfg.in_channels as f64).sqrt(),
        );
        let front_b = gaussian(&mut rng, vec![cfg.channels], 0.1);
        let rest_w1 = gaussian(
            &mut rng,
            vec![cfg.channels, cfg.visual_hidden],
            1.0 / (cfg.channels as f64).sqrt(),
        );
        let rest_b1 = gaussian(&mut rng, vec![cfg.visual_hidden], 0.1);
        let rest_w2 = gaussian(
            &mut rng,
            vec![cfg.visual_hidden, cfg.embed_dim],
            1.0 / (cfg.visual_hidden as f64).sqrt(),
        );
        let rest_b2 = gaussian(&mut rng, vec![cfg.embed_dim], 0.01);
        let class_tokens = gaussian(&mut rng, vec![cfg.n_classes, cfg.token_dim], 1.0);
        let domain_tokens = gaussian(&mut rng, vec![cfg.n_domains, cfg.token_dim], 1.0);
        Ok(Self {
            cfg,
            text_w_ctx,
            text_w_cls,
            text_b1,
            text_w2,
            text_b2,
            front_w,
            front_b,
            rest_w1,
            rest_b1,
            rest_w2,
            rest_b2,
            class_tokens,
            domain_tokens,
        })
    }

    pub fn config(&self) -> &BackboneConfig {
        &self.cfg
    }

    pub fn seed(&self) -> u64 {
        self.cfg.seed
    }

    /// Every frozen weight, flattened in a fixed order.
    pub fn weight_fingerprint(&self) -> Vec<f64> {
        [
            &self.text_w_ctx,
            &self.text_w_cls,
            &self.text_b1,
            &self.text_w2,
            &self.text_b2,
            &self.front_w,
            &self.front_b,
            &self.rest_w1,
            &self.rest_b1,
            &self.rest_w2,
            &self.rest_b2,
            &self.class_tokens,
            &self.domain_tokens,
        ]
        .iter()
        .flat_map(|a| a.data().iter().copied())
        .collect()
    }

    /// Class-prompt set with a small seeded random context.
    pub fn class_prompt(&self, seed: u64) -> TextPrompt {
        self.prompt_with_tokens(self.class_tokens.clone(), seed)
    }

    /// Domain-prompt set restricted to the given (global) domain ids.
    pub fn domain_prompt(&self, domains: &[usize], seed: u64) -> Result<TextPrompt> {
        if let Some(&d) = domains.iter().find(|&&d| d >= self.cfg.n_domains) {
            return Err(Error::invalid(format!(
                "domain {d} out of range for {} domain tokens",
                self.cfg.n_domains
            )));
        }
        Ok(self.prompt_with_tokens(self.domain_tokens.select_rows(domains), seed))
    }

    fn prompt_with_tokens(&self, class_tokens: DenseArray, seed: u64) -> TextPrompt {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let context = gaussian(
            &mut rng,
            vec![self.cfg.text_context_len, self.cfg.token_dim],
            0.02,
        );
        TextPrompt {
            context: Parameter::new(context),
            class_tokens,
        }
    }

    /// Seeded visual prompt set with small random tokens.
    pub fn visual_prompt(&self, seed: u64) -> VisualPromptSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        VisualPromptSet {
            tokens: Parameter::new(gaussian(
                &mut rng,
                vec![self.cfg.visual_prompt_len, self.cfg.channels],
                0.02,
            )),
        }
    }

    /// Encodes every entry of a prompt set: `context` is `L_ctx × d_tok`,
    /// `class_tokens` is `K × d_tok`; returns `K × d` unit rows.
    pub fn encode_text(
        &self,
        tape: &mut Tape,
        context: Var,
        class_tokens: &DenseArray,
    ) -> Result<Var> {
        let c = &self.cfg;
        let ctx_shape = tape.value(context).shape().to_vec();
        if ctx_shape != [c.text_context_len, c.token_dim] {
            return Err(Error::shape(
                "text_encode",
                format!(
                    "context {ctx_shape:?}, expected [{}, {}]",
                    c.text_context_len, c.token_dim
                ),
            ));
        }
        if class_tokens.rank() != 2 || class_tokens.cols() != c.token_dim {
            return Err(Error::shape(
                "text_encode",
                format!("class tokens {:?}", class_tokens.shape()),
            ));
        }
        let flat = tape.reshape(context, vec![1, c.text_context_len * c.token_dim])?;
        let w_ctx = tape.constant(self.text_w_ctx.clone())?;
        let ctx_part = tape.matmul(flat, w_ctx)?;
        let cls = tape.constant(class_tokens.clone())?;
        let w_cls = tape.constant(self.text_w_cls.clone())?;
        let cls_part = tape.matmul(cls, w_cls)?;
        let pre = tape.add(cls_part, ctx_part)?;
        let b1 = tape.constant(self.text_b1.clone())?;
        let pre = tape.add(pre, b1)?;
        let h = tape.tanh(pre)?;
        let w2 = tape.constant(self.text_w2.clone())?;
        let out = tape.matmul(h, w2)?;
        let b2 = tape.constant(self.text_b2.clone())?;
        let out = tape.add(out, b2)?;
        tape.l2_normalize(out)
    }

    /// Forward-only encoding of all entries of `prompt`.
    pub fn text_embeddings(&self, prompt: &TextPrompt) -> Result<DenseArray> {
        let mut tape = Tape::new();
        let ctx = tape.constant(prompt.context.value.clone())?;
        let out = self.encode_text(&mut tape, ctx, &prompt.class_tokens)?;
        Ok(tape.value(out).clone())
    }

    /// Unit embedding of entry `index` of `prompt`.
    pub fn text_encode(&self, prompt: &TextPrompt, index: usize) -> Result<Vec<f64>> {
        if index >= prompt.len() {
            return Err(Error::invalid(format!(
                "prompt index {index} out of range for {} entries",
                prompt.len()
            )));
        }
        let single = TextPrompt {
            context: prompt.context.clone(),
            class_tokens: prompt.class_tokens.select_rows(&[index]),
        };
        Ok(self.text_embeddings(&single)?.into_data())
    }

    /// Per-token affine map `L_tok × C_in → L_tok × C`. Accepts a single
    /// sample (rank 2) or a batch (rank 3).
    pub fn visual_front(&self, tokens: &DenseArray) -> Result<DenseArray> {
        let c = &self.cfg;
        if tokens.cols() != c.in_channels || !(2..=3).contains(&tokens.rank()) {
            return Err(Error::shape(
                "visual_front",
                format!(
                    "tokens {:?}, expected width {}",
                    tokens.shape(),
                    c.in_channels
                ),
            ));
        }
        if !tokens.is_finite() {
            return Err(Error::NonFinite { op: "visual_front" });
        }
        let rows = tokens.len() / c.in_channels;
        let mut out = vec![0.0; rows * c.channels];
        for r in 0..rows {
            let x = &tokens.data()[r * c.in_channels..(r + 1) * c.in_channels];
            let o = &mut out[r * c.channels..(r + 1) * c.channels];
            o.copy_from_slice(self.front_b.data());
            for (i, &xv) in x.iter().enumerate() {
                let wrow = &self.front_w.data()[i * c.channels..(i + 1) * c.channels];
                for (ov, &w) in o.iter_mut().zip(wrow) {
                    *ov += xv * w;
                }
            }
        }
        let mut shape = tokens.shape().to_vec();
        *shape.last_mut().expect("rank ≥ 2") = c.channels;
        DenseArray::new(shape, out)
    }

    /// Rest of the visual encoder on a batch of intermediate features
    /// `[B, L, C]` with prompt tokens `[L_vp, C]`; returns `[B, d]` unit rows.
    pub fn visual_rest(&self, tape: &mut Tape, intermediate: Var, prompts: Var) -> Result<Var> {
        let c = &self.cfg;
        let shape = tape.value(intermediate).shape().to_vec();
        if shape.len() != 3 || shape[2] != c.channels {
            return Err(Error::shape(
                "visual_rest",
                format!("intermediate {shape:?}, expected [B, L, {}]", c.channels),
            ));
        }
        let pshape = tape.value(prompts).shape().to_vec();
        if pshape.len() != 2 || pshape[1] != c.channels {
            return Err(Error::shape(
                "visual_rest",
                format!("prompts {pshape:?}, expected [L_vp, {}]", c.channels),
            ));
        }
        let (batch, len) = (shape[0], shape[1]);
        let w1 = tape.constant(self.rest_w1.clone())?;
        let b1 = tape.constant(self.rest_b1.clone())?;

        let pre = tape.matmul(intermediate, w1)?;
        let pre = tape.add(pre, b1)?;
        let h = tape.tanh(pre)?;
        let token_sum = tape.sum_axis(h, 1)?;

        let ppre = tape.matmul(prompts, w1)?;
        let ppre = tape.add(ppre, b1)?;
        let ph = tape.tanh(ppre)?;
        let prompt_sum = tape.sum_axis(ph, 0)?;

        let pooled = tape.add(token_sum, prompt_sum)?;
        let pooled = tape.scale(pooled, 1.0 / (len + pshape[0]) as f64)?;
        let w2 = tape.constant(self.rest_w2.clone())?;
        let out = tape.matmul(pooled, w2)?;
        let b2 = tape.constant(self.rest_b2.clone())?;
        let out = tape.add(out, b2)?;
        debug_assert_eq!(tape.value(out).shape(), &[batch, c.embed_dim]);
        tape.l2_normalize(out)
    }

    /// Forward-only `visual_rest` for a batch `[B, L, C]`.
    pub fn embed(
        &self,
        intermediate: &DenseArray,
        prompts: &VisualPromptSet,
    ) -> Result<DenseArray> {
        let mut tape = Tape::new();
        let z = tape.constant(intermediate.clone())?;
        let p = tape.constant(prompts.tokens.value.clone())?;
        let out = self.visual_rest(&mut tape, z, p)?;
        Ok(tape.value(out).clone())
    }

    /// Full visual encoder on raw tokens (`[B, L, C_in]`).
    pub fn encode_image(
        &self,
        tokens: &DenseArray,
        prompts: &VisualPromptSet,
    ) -> Result<DenseArray> {
        self.embed(&self.visual_front(tokens)?, prompts)
    }

    pub fn zero_prompts(&self) -> VisualPromptSet {
        VisualPromptSet::zeros(self.cfg.visual_prompt_len, self.cfg.channels)
    }
}

/// Per-channel mean and ε-guarded population std over the token axis of an
/// `L × C` matrix.
pub fn instance_stats(intermediate: &DenseArray) -> Result<InstanceStats> {
    if intermediate.rank() != 2 || intermediate.rows() == 0 {
        return Err(Error::shape(
            "instance_stats",
            format!(
                "expected a non-empty L × C matrix, got {:?}",
                intermediate.shape()
            ),
        ));
    }
    let (l, c) = (intermediate.rows(), intermediate.cols());
    let d = intermediate.data();
    let mut mu = vec![0.0; c];
    for t in 0..l {
        for (ch, m) in mu.iter_mut().enumerate() {
            *m += d[t * c + ch];
        }
    }
    mu.iter_mut().for_each(|m| *m /= l as f64);
    let mut sigma = vec![0.0; c];
    for t in 0..l {
        for (ch, s) in sigma.iter_mut().enumerate() {
            let dev = d[t * c + ch] - mu[ch];
            *s += dev * dev;
        }
    }
    sigma
        .iter_mut()
        .for_each(|s| *s = (*s / l as f64 + STATS_EPS).sqrt());
    Ok(InstanceStats { mu, sigma })
}
