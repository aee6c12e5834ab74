//! CKPT1 (prompt state) and PROT1 (prototype bank) files.
//!
//! Learnable values are stored as f64 so a save/load round trip is exact.
//! Frozen backbone weights are never written: the checkpoint records the
//! backbone seed and the sizes it was trained against, and loading into a
//! different backbone is an error.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::backbone::{Backbone, TextPrompt, VisualPromptSet};
use crate::dspl::PrototypeBank;
use crate::error::{Error, Result};
use crate::harness::data::{put_u32, Reader};
use crate::numerics::{DenseArray, Parameter};
use crate::stages::PromptState;

pub const CHECKPOINT_MAGIC: &[u8] = b"CKPT1\n";
pub const PROTOTYPE_MAGIC: &[u8] = b"PROT1\n";

/// Last training stage applied to a prompt state.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Stage {
    Init,
    Gat,
    Imt,
    Wera,
}

impl Stage {
    fn code(self) -> usize {
        match self {
            Stage::Init => 0,
            Stage::Gat => 1,
            Stage::Imt => 2,
            Stage::Wera => 3,
        }
    }

    fn from_code(code: usize, offset: usize) -> Result<Self> {
        Ok(match code {
            0 => Stage::Init,
            1 => Stage::Gat,
            2 => Stage::Imt,
            3 => Stage::Wera,
            _ => {
                return Err(Error::format(
                    offset,
                    format!("unknown stage marker {code}"),
                ))
            }
        })
    }
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::Init => "init",
            Stage::Gat => "gat",
            Stage::Imt => "imt",
            Stage::Wera => "wera",
        })
    }
}

impl FromStr for Stage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "init" => Ok(Stage::Init),
            "gat" => Ok(Stage::Gat),
            "imt" => Ok(Stage::Imt),
            "wera" => Ok(Stage::Wera),
            other => Err(Error::invalid(format!("unknown stage {other:?}"))),
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub stage: Stage,
    /// Held-out domain of the run that produced this state, if any.
    pub held_out: Option<usize>,
    pub state: PromptState,
    pub prototypes: Option<PrototypeBank>,
}

/// Sizes a checkpoint must agree with, in file order.
fn layout(backbone: &Backbone) -> [usize; 6] {
    let c = backbone.config();
    [
        c.text_context_len,
        c.token_dim,
        c.visual_prompt_len,
        c.channels,
        c.embed_dim,
        c.n_classes,
    ]
}

const LAYOUT_NAMES: [&str; 6] = [
    "text_context_len",
    "token_dim",
    "visual_prompt_len",
    "channels",
    "embed_dim",
    "n_classes",
];

const NO_HELD_OUT: usize = u32::MAX as usize;

fn put_f64s(out: &mut Vec<u8>, a: &DenseArray) {
    for v in a.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

impl Checkpoint {
    pub fn to_bytes(&self, backbone: &Backbone) -> Result<Vec<u8>> {
        let mut out = CHECKPOINT_MAGIC.to_vec();
        out.extend_from_slice(&backbone.config().seed.to_le_bytes());
        for v in layout(backbone) {
            put_u32(&mut out, v)?;
        }
        put_u32(&mut out, self.stage.code())?;
        put_u32(&mut out, self.held_out.unwrap_or(NO_HELD_OUT))?;
        put_u32(&mut out, self.state.source_domains.len())?;
        for &d in &self.state.source_domains {
            put_u32(&mut out, d)?;
        }
        put_f64s(&mut out, &self.state.class_text.context.value);
        put_f64s(&mut out, &self.state.domain_text.context.value);
        put_f64s(&mut out, &self.state.invariant_visual.tokens.value);
        put_f64s(&mut out, &self.state.specific_visual.tokens.value);
        match &self.prototypes {
            Some(p) => {
                put_u32(&mut out, 1)?;
                out.extend(prototypes_to_bytes(p)?);
            }
            None => put_u32(&mut out, 0)?,
        }
        Ok(out)
    }

    /// Parses a checkpoint and rebuilds the prompt state on `backbone`.
    pub fn from_bytes(bytes: &[u8], backbone: &Backbone) -> Result<Self> {
        let mut r = Reader::new(bytes);
        r.magic(CHECKPOINT_MAGIC)?;
        let seed = r.u64()?;
        if seed != backbone.config().seed {
            return Err(Error::Checkpoint(format!(
                "checkpoint was trained on backbone seed {seed}, current backbone uses {}",
                backbone.config().seed
            )));
        }
        for (name, want) in LAYOUT_NAMES.iter().zip(layout(backbone)) {
            let got = r.u32()?;
            if got != want {
                return Err(Error::Checkpoint(format!(
                    "{name} is {got} in the checkpoint but {want} in the backbone"
                )));
            }
        }
        let at = r.pos;
        let stage = Stage::from_code(r.u32()?, at)?;
        let held_out = match r.u32()? {
            NO_HELD_OUT => None,
            d => Some(d),
        };
        let n_sources = r.u32()?;
        let mut sources = Vec::with_capacity(n_sources.min(1024));
        for _ in 0..n_sources {
            sources.push(r.u32()?);
        }
        let c = backbone.config();
        let text_shape = vec![c.text_context_len, c.token_dim];
        let visual_shape = vec![c.visual_prompt_len, c.channels];
        let mut read = |shape: &[usize]| -> Result<Parameter> {
            let n = shape.iter().product();
            Ok(Parameter::new(DenseArray::new(
                shape.to_vec(),
                r.f64_vec(n)?,
            )?))
        };
        let class_ctx = read(&text_shape)?;
        let domain_ctx = read(&text_shape)?;
        let invariant = read(&visual_shape)?;
        let specific = read(&visual_shape)?;
        let prototypes = match r.u32()? {
            0 => None,
            1 => Some(read_prototypes(&mut r)?),
            other => {
                return Err(Error::format(
                    r.pos - 4,
                    format!("bad prototype flag {other}"),
                ));
            }
        };
        r.finished()?;

        let domain_text = backbone
            .domain_prompt(&sources, 0)
            .map_err(|e| Error::Checkpoint(e.to_string()))?;
        let state = PromptState {
            source_domains: sources,
            class_text: TextPrompt {
                context: class_ctx,
                class_tokens: backbone.class_prompt(0).class_tokens,
            },
            domain_text: TextPrompt {
                context: domain_ctx,
                class_tokens: domain_text.class_tokens,
            },
            invariant_visual: VisualPromptSet { tokens: invariant },
            specific_visual: VisualPromptSet { tokens: specific },
        };
        if let Some(p) = &prototypes {
            if p.n_classes != c.n_classes || p.n_domains != state.source_domains.len() {
                return Err(Error::Checkpoint(format!(
                    "prototype bank is {} domains × {} classes, prompts cover {} domains × {} classes",
                    p.n_domains,
                    p.n_classes,
                    state.source_domains.len(),
                    c.n_classes
                )));
            }
        }
        Ok(Self {
            stage,
            held_out,
            state,
            prototypes,
        })
    }

    pub fn write(&self, path: &Path, backbone: &Backbone) -> Result<()> {
        std::fs::write(path, self.to_bytes(backbone)?)?;
        Ok(())
    }

    pub fn read(path: &Path, backbone: &Backbone) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?, backbone)
    }
}

/// PROT1: magic, u32 N_c, N_s, d, f64 β_sharp, then the key rows and the
/// one-hot value rows, all f64.
pub fn prototypes_to_bytes(bank: &PrototypeBank) -> Result<Vec<u8>> {
    let mut out = PROTOTYPE_MAGIC.to_vec();
    put_u32(&mut out, bank.n_classes)?;
    put_u32(&mut out, bank.n_domains)?;
    put_u32(&mut out, bank.dim())?;
    out.extend_from_slice(&bank.beta_sharp.to_le_bytes());
    put_f64s(&mut out, &bank.keys);
    put_f64s(&mut out, bank.values());
    Ok(out)
}

pub fn prototypes_from_bytes(bytes: &[u8]) -> Result<PrototypeBank> {
    let mut r = Reader::new(bytes);
    let bank = read_prototypes(&mut r)?;
    r.finished()?;
    Ok(bank)
}

fn read_prototypes(r: &mut Reader<'_>) -> Result<PrototypeBank> {
    let start = r.pos;
    r.magic(PROTOTYPE_MAGIC).map_err(|e| relocate(e, start))?;
    let (nc, ns, d) = (r.u32()?, r.u32()?, r.u32()?);
    if nc == 0 || ns == 0 || d == 0 {
        return Err(Error::format(start, "empty prototype bank"));
    }
    let beta = r.f64_vec(1)?[0];
    let keys = DenseArray::new(vec![nc * ns, d], r.f64_vec(nc * ns * d)?)?;
    let values_at = r.pos;
    let values = r.f64_vec(nc * ns * nc)?;
    let bank = PrototypeBank::new(keys, nc, ns, beta)?;
    if values != bank.values().data() {
        return Err(Error::format(
            values_at,
            "prototype values are not the one-hot class rows",
        ));
    }
    Ok(bank)
}

/// `Reader::magic` reports offset 0; shift it to where the block starts.
fn relocate(e: Error, offset: usize) -> Error {
    match e {
        Error::Format { detail, .. } => Error::Format { offset, detail },
        other => other,
    }
}

pub fn write_prototypes(bank: &PrototypeBank, path: &Path) -> Result<()> {
    std::fs::write(path, prototypes_to_bytes(bank)?)?;
    Ok(())
}

pub fn read_prototypes_file(path: &Path) -> Result<PrototypeBank> {
    prototypes_from_bytes(&std::fs::read(path)?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::BackboneConfig;

    fn backbone(seed: u64) -> Backbone {
        Backbone::new(BackboneConfig {
            seed,
            ..BackboneConfig::default()
        })
        .unwrap()
    }

    fn bank(bb: &Backbone, ns: usize) -> PrototypeBank {
        let c = bb.config();
        let rows: Vec<Vec<f64>> = (0..c.n_classes * ns)
            .map(|r| {
                let mut v = vec![0.0; c.embed_dim];
                v[r % c.embed_dim] = 1.0;
                v
            })
            .collect();
        PrototypeBank::new(DenseArray::from_rows(&rows).unwrap(), c.n_classes, ns, 5.0).unwrap()
    }

    #[test]
    fn round_trip_is_exact() {
        let bb = backbone(3);
        let mut state = PromptState::init(&bb, &[0, 2, 3], 11).unwrap();
        state.invariant_visual.tokens.value =
            state.invariant_visual.tokens.value.map(|v| v * 1.0 / 3.0);
        let ckpt = Checkpoint {
            stage: Stage::Imt,
            held_out: Some(1),
            state,
            prototypes: Some(bank(&bb, 3)),
        };
        let bytes = ckpt.to_bytes(&bb).unwrap();
        let back = Checkpoint::from_bytes(&bytes, &bb).unwrap();
        assert_eq!(back.stage, Stage::Imt);
        assert_eq!(back.held_out, Some(1));
        assert_eq!(back.state, ckpt.state);
        assert_eq!(
            back.prototypes.as_ref().unwrap().keys,
            ckpt.prototypes.as_ref().unwrap().keys
        );
        assert_eq!(back.to_bytes(&bb).unwrap(), bytes);
    }

    #[test]
    fn wrong_backbone_seed_is_rejected() {
        let bb = backbone(3);
        let ckpt = Checkpoint {
            stage: Stage::Gat,
            held_out: None,
            state: PromptState::init(&bb, &[0, 1], 0).unwrap(),
            prototypes: None,
        };
        let bytes = ckpt.to_bytes(&bb).unwrap();
        let err = Checkpoint::from_bytes(&bytes, &backbone(4)).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(_)), "{err}");
    }

    #[test]
    fn size_mismatch_is_rejected() {
        let bb = backbone(0);
        let ckpt = Checkpoint {
            stage: Stage::Init,
            held_out: None,
            state: PromptState::init(&bb, &[0], 0).unwrap(),
            prototypes: None,
        };
        let bytes = ckpt.to_bytes(&bb).unwrap();
        let other = Backbone::new(BackboneConfig {
            visual_prompt_len: 4,
            ..BackboneConfig::default()
        })
        .unwrap();
        let err = Checkpoint::from_bytes(&bytes, &other)
            .unwrap_err()
            .to_string();
        assert!(err.contains("visual_prompt_len"), "{err}");
    }

    #[test]
    fn truncated_and_trailing_bytes() {
        let bb = backbone(0);
        let ckpt = Checkpoint {
            stage: Stage::Init,
            held_out: None,
            state: PromptState::init(&bb, &[0], 0).unwrap(),
            prototypes: None,
        };
        let mut bytes = ckpt.to_bytes(&bb).unwrap();
        assert!(Checkpoint::from_bytes(&bytes[..bytes.len() - 3], &bb).is_err());
        bytes.push(0);
        let err = Checkpoint::from_bytes(&bytes, &bb).unwrap_err().to_string();
        assert!(err.contains("trailing"), "{err}");
    }

    #[test]
    fn prototype_file_round_trip() {
        let bb = backbone(0);
        let b = bank(&bb, 2);
        let bytes = prototypes_to_bytes(&b).unwrap();
        let back = prototypes_from_bytes(&bytes).unwrap();
        assert_eq!(back.keys, b.keys);
        assert_eq!(back.beta_sharp, 5.0);
        assert_eq!(prototypes_to_bytes(&back).unwrap(), bytes);
        let mut bad = bytes.clone();
        let last = bad.len() - 8;
        bad[last..].copy_from_slice(&0.5f64.to_le_bytes());
        assert!(prototypes_from_bytes(&bad).is_err());
    }

    #[test]
    fn stage_names() {
        for s in [Stage::Init, Stage::Gat, Stage::Imt, Stage::Wera] {
            assert_eq!(s.to_string().parse::<Stage>().unwrap(), s);
        }
        assert!("dspl".parse::<Stage>().is_err());
    }
}
