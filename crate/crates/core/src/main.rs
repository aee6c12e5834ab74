use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use padg_core::backbone::Backbone;
use padg_core::diagnostics::{w1_exact, MAX_W1_POINTS};
use padg_core::dspl::{finetune_prototypes, init_prototypes};
use padg_core::harness::checkpoint::{Checkpoint, Stage};
use padg_core::harness::config::RunConfig;
use padg_core::harness::data::{AnchorEmbeddings, Dataset};
use padg_core::harness::synthetic::generate_synthetic;
use padg_core::pipeline::{
    audit_training_set, dspl_accuracy, invariant_accuracy, invariant_divergence, loo_split, EvalSet,
};
use padg_core::stages::{train_gat, train_imt, PromptState, TrainingSet};
use padg_core::wera::train_wera;
use padg_core::{Error, Result};

const DATA_FILE: &str = "data.padg";
const ANCHOR_FILE: &str = "anchors.anch";

#[derive(Parser)]
#[command(
    name = "padg",
    version,
    about = "Prompt-based domain generalization on a synthetic benchmark"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct Common {
    /// key=value run configuration; defaults apply to missing keys.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Overrides the run seed (and the data seed for gen-data).
    #[arg(long)]
    seed: Option<u64>,
    /// Extra key=value overrides applied after --config.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
    /// Write CSV metrics here instead of stdout.
    #[arg(long)]
    metrics: Option<PathBuf>,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// Directory holding data.padg and anchors.anch.
    #[arg(long)]
    data: PathBuf,
}

#[derive(Clone, Copy, ValueEnum)]
enum TrainStage {
    Gat,
    Imt,
    Wera,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark and its anchor embeddings.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Run one training stage and write the updated checkpoint.
    Train {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long, value_enum)]
        stage: TrainStage,
        /// Checkpoint from the previous stage (required for imt and wera).
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Domain to hold out (gat only; later stages inherit it).
        #[arg(long)]
        loo_domain: Option<usize>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Build the prototype bank from the specific visual features.
    BuildProto {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fine-tune the prototype keys of a checkpoint.
    FinetuneProto {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Per-domain accuracy on the held-out domain (or every domain).
    Eval {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Also report the prototype-blended and prototype-only accuracy.
        #[arg(long)]
        use_dspl: bool,
        #[arg(long)]
        loo_domain: Option<usize>,
    },
    /// Source-to-target MMD (and exact W1) of the invariant features.
    Diagnose {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        loo_domain: Option<usize>,
    },
    /// Learned versus random radius-matched stylizations.
    Audit {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        data: DataArgs,
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

fn main() -> ExitCode {
    // clap exits with status 2 on usage errors.
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(1)
        }
    }
}

fn load_config(common: &Common) -> Result<RunConfig> {
    let mut cfg = match &common.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    for kv in &common.overrides {
        let (k, v) = kv
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("override {kv:?} is not key=value")))?;
        cfg.set(k.trim(), v.trim())?;
    }
    if let Some(s) = common.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn emit(common: &Common, csv: &str) -> Result<()> {
    match &common.metrics {
        Some(p) => fs::write(p, csv)?,
        None => std::io::stdout().write_all(csv.as_bytes())?,
    }
    Ok(())
}

struct Workspace {
    cfg: RunConfig,
    backbone: Backbone,
    dataset: Dataset,
    anchors: AnchorEmbeddings,
}

fn open(common: &Common, data: &DataArgs) -> Result<Workspace> {
    let cfg = load_config(common)?;
    let backbone = Backbone::new(cfg.backbone.clone())?;
    let dataset = Dataset::read(data.data.join(DATA_FILE))?;
    let b = backbone.config();
    if (dataset.tokens, dataset.in_channels, dataset.n_classes)
        != (b.tokens, b.in_channels, b.n_classes)
        || dataset.n_domains > b.n_domains
    {
        return Err(Error::Config(format!(
            "dataset is {} tokens × {} channels, {} classes, {} domains; backbone expects {} × {}, {} classes, ≤ {} domains",
            dataset.tokens,
            dataset.in_channels,
            dataset.n_classes,
            dataset.n_domains,
            b.tokens,
            b.in_channels,
            b.n_classes,
            b.n_domains
        )));
    }
    let anchors = AnchorEmbeddings::read(data.data.join(ANCHOR_FILE), Some(b.embed_dim))?;
    Ok(Workspace {
        cfg,
        backbone,
        dataset,
        anchors,
    })
}

impl Workspace {
    fn training_set(&self, sources: &[usize]) -> Result<TrainingSet> {
        let ids = self.dataset.ids_in_domains(sources);
        TrainingSet::new(&self.backbone, &self.dataset, &ids, sources)
    }

    fn checkpoint(&self, path: &Path) -> Result<Checkpoint> {
        Checkpoint::read(path, &self.backbone)
    }
}

/// Held-out domain from the checkpoint, cross-checked against a flag.
fn held_out(ckpt: &Checkpoint, flag: Option<usize>) -> Result<Option<usize>> {
    match (ckpt.held_out, flag) {
        (Some(a), Some(b)) if a != b => Err(Error::Checkpoint(format!(
            "checkpoint holds out domain {a}, --loo-domain asks for {b}"
        ))),
        (Some(a), _) => Ok(Some(a)),
        (None, f) => Ok(f),
    }
}

fn require_stage(ckpt: &Checkpoint, want: Stage) -> Result<()> {
    if ckpt.stage != want {
        return Err(Error::Checkpoint(format!(
            "expected a checkpoint after stage {want}, got one after {}",
            ckpt.stage
        )));
    }
    Ok(())
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { common, out } => {
            let mut cfg = load_config(&common)?;
            if let Some(s) = common.seed {
                cfg.generator.seed = s;
            }
            let backbone = Backbone::new(cfg.backbone.clone())?;
            let bench = generate_synthetic(&cfg.generator, &backbone)?;
            fs::create_dir_all(&out)?;
            bench.dataset.write(out.join(DATA_FILE))?;
            bench.anchors.write(out.join(ANCHOR_FILE))?;
            let mut csv = String::from("domain,class,samples\n");
            for d in 0..bench.dataset.n_domains {
                for k in 0..bench.dataset.n_classes {
                    let n = bench
                        .dataset
                        .samples
                        .iter()
                        .filter(|s| s.domain == d && s.class == k)
                        .count();
                    csv.push_str(&format!("{d},{k},{n}\n"));
                }
            }
            emit(&common, &csv)
        }
        Command::Train {
            common,
            data,
            stage,
            checkpoint,
            loo_domain,
            out,
        } => {
            let ws = open(&common, &data)?;
            let cfg = &ws.cfg;
            let (ckpt, report) = match stage {
                TrainStage::Gat => {
                    if checkpoint.is_some() {
                        return Err(Error::Config(
                            "train --stage gat starts from fresh prompts; drop --checkpoint".into(),
                        ));
                    }
                    let (sources, _, _) = loo_split(&ws.dataset, loo_domain)?;
                    let set = ws.training_set(&sources)?;
                    let mut state = PromptState::init(&ws.backbone, &sources, cfg.seed)?;
                    let (_, report) = train_gat(
                        &ws.backbone,
                        &set,
                        &ws.anchors,
                        &mut state,
                        &cfg.weights,
                        &cfg.stage_options(cfg.gat_epochs, cfg.lr, 1),
                    )?;
                    let ckpt = Checkpoint {
                        stage: Stage::Gat,
                        held_out: loo_domain,
                        state,
                        prototypes: None,
                    };
                    (ckpt, report)
                }
                TrainStage::Imt | TrainStage::Wera => {
                    let path = checkpoint.ok_or_else(|| {
                        Error::Config("--checkpoint is required for imt and wera".into())
                    })?;
                    let mut ckpt = ws.checkpoint(&path)?;
                    held_out(&ckpt, loo_domain)?;
                    let set = ws.training_set(&ckpt.state.source_domains.clone())?;
                    let bank = ckpt.state.text_bank(&ws.backbone)?;
                    let report = if let TrainStage::Imt = stage {
                        require_stage(&ckpt, Stage::Gat)?;
                        ckpt.stage = Stage::Imt;
                        train_imt(
                            &ws.backbone,
                            &set,
                            &bank,
                            &mut ckpt.state,
                            &cfg.weights,
                            &cfg.stage_options(cfg.imt_epochs, cfg.lr, 2),
                        )?
                    } else {
                        require_stage(&ckpt, Stage::Imt)?;
                        ckpt.stage = Stage::Wera;
                        train_wera(
                            &ws.backbone,
                            &set,
                            &bank,
                            &mut ckpt.state,
                            &cfg.weights,
                            &cfg.wera,
                            &cfg.stage_options(cfg.wera_epochs, cfg.wera_lr, 3),
                        )?
                        .stage
                    };
                    // Prototypes depend on the prompts they were built from.
                    ckpt.prototypes = None;
                    (ckpt, report)
                }
            };
            ckpt.write(&out, &ws.backbone)?;
            emit(&common, &report.to_csv())
        }
        Command::BuildProto {
            common,
            data,
            checkpoint,
            out,
        } => {
            let ws = open(&common, &data)?;
            let mut ckpt = ws.checkpoint(&checkpoint)?;
            let set = ws.training_set(&ckpt.state.source_domains.clone())?;
            let bank = init_prototypes(
                &ws.backbone,
                &set,
                &ckpt.state.specific_visual,
                ws.cfg.beta_sharp,
            )?;
            let mut csv = String::from("domain,class,key_norm\n");
            for (m, &d) in ckpt.state.source_domains.iter().enumerate() {
                for k in 0..bank.n_classes {
                    let row = bank.keys.row(bank.row_of(m, k));
                    let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
                    csv.push_str(&format!("{d},{k},{norm:.9}\n"));
                }
            }
            ckpt.prototypes = Some(bank);
            ckpt.write(&out, &ws.backbone)?;
            emit(&common, &csv)
        }
        Command::FinetuneProto {
            common,
            data,
            checkpoint,
            out,
        } => {
            let ws = open(&common, &data)?;
            let mut ckpt = ws.checkpoint(&checkpoint)?;
            let bank = ckpt.prototypes.take().ok_or_else(|| {
                Error::Checkpoint("checkpoint has no prototype bank; run build-proto first".into())
            })?;
            let set = ws.training_set(&ckpt.state.source_domains.clone())?;
            let (tuned, report) = finetune_prototypes(
                &bank,
                &ws.backbone,
                &set,
                &ckpt.state.specific_visual,
                &ws.cfg
                    .stage_options(ws.cfg.proto_epochs, ws.cfg.proto_lr, 4),
            )?;
            ckpt.prototypes = Some(tuned);
            ckpt.write(&out, &ws.backbone)?;
            emit(&common, &report.to_csv())
        }
        Command::Eval {
            common,
            data,
            checkpoint,
            use_dspl,
            loo_domain,
        } => {
            let ws = open(&common, &data)?;
            let ckpt = ws.checkpoint(&checkpoint)?;
            let target = held_out(&ckpt, loo_domain)?;
            let domains: Vec<usize> = match target {
                Some(d) => vec![d],
                None => (0..ws.dataset.n_domains).collect(),
            };
            let bank = ckpt.state.text_bank(&ws.backbone)?;
            let tau = ws.cfg.weights.tau;
            let protos = match (use_dspl, &ckpt.prototypes) {
                (true, None) => {
                    return Err(Error::Checkpoint(
                        "--use-dspl needs a checkpoint with prototypes".into(),
                    ));
                }
                (true, Some(p)) => Some(p),
                (false, _) => None,
            };
            let mut csv = String::from(if protos.is_some() {
                "domain,samples,acc_invariant,acc_blended,acc_specific\n"
            } else {
                "domain,samples,acc_invariant\n"
            });
            for d in domains {
                let ids = ws.dataset.ids_in_domains(&[d]);
                let eval = EvalSet::new(&ws.backbone, &ws.dataset, &ids)?;
                let acc = invariant_accuracy(
                    &ws.backbone,
                    &eval,
                    &bank,
                    &ckpt.state.invariant_visual,
                    tau,
                )?;
                csv.push_str(&format!("{d},{},{acc:.9}", ids.len()));
                if let Some(p) = protos {
                    let r = dspl_accuracy(
                        &ws.backbone,
                        &eval,
                        &bank,
                        &ckpt.state,
                        p,
                        ws.cfg.beta2,
                        tau,
                    )?;
                    csv.push_str(&format!(",{:.9},{:.9}", r.blended, r.specific));
                }
                csv.push('\n');
            }
            emit(&common, &csv)
        }
        Command::Diagnose {
            common,
            data,
            checkpoint,
            loo_domain,
        } => {
            let ws = open(&common, &data)?;
            let ckpt = ws.checkpoint(&checkpoint)?;
            let target = held_out(&ckpt, loo_domain)?.ok_or_else(|| {
                Error::Config("diagnose needs a held-out domain (--loo-domain)".into())
            })?;
            let sources: Vec<usize> = ckpt
                .state
                .source_domains
                .iter()
                .copied()
                .filter(|&d| d != target)
                .collect();
            let set = ws.training_set(&sources)?;
            let eval = EvalSet::new(
                &ws.backbone,
                &ws.dataset,
                &ws.dataset.ids_in_domains(&[target]),
            )?;
            let prompts = &ckpt.state.invariant_visual;
            let mmd = invariant_divergence(&ws.backbone, &set, &eval, prompts)?;
            let src_feats = ws.backbone.embed(&set.intermediates, prompts)?;
            let tgt_feats = ws.backbone.embed(&eval.intermediates, prompts)?;
            let mut csv = String::from("pair,mmd,w1\n");
            let mut w1_sum = 0.0;
            for (local, &(d, v)) in mmd.pairs.iter().enumerate() {
                let rows: Vec<usize> = (0..set.len())
                    .filter(|&r| set.domains[r] == local)
                    .collect();
                let n = rows.len().min(tgt_feats.rows()).min(MAX_W1_POINTS);
                let xs = src_feats.select_rows(&rows[..n]);
                let ys = tgt_feats.select_rows(&(0..n).collect::<Vec<_>>());
                let w1 = w1_exact(&xs, &ys)?;
                w1_sum += w1;
                csv.push_str(&format!("source{d}-target{target},{v:.9},{w1:.9}\n"));
            }
            csv.push_str(&format!(
                "aggregate,{:.9},{:.9}\n",
                mmd.average,
                w1_sum / mmd.pairs.len() as f64
            ));
            emit(&common, &csv)
        }
        Command::Audit {
            common,
            data,
            checkpoint,
        } => {
            let ws = open(&common, &data)?;
            let ckpt = ws.checkpoint(&checkpoint)?;
            if ckpt.stage < Stage::Wera {
                eprintln!(
                    "warning: auditing a checkpoint after stage {}, not wera",
                    ckpt.stage
                );
            }
            let set = ws.training_set(&ckpt.state.source_domains.clone())?;
            let bank = ckpt.state.text_bank(&ws.backbone)?;
            let report = audit_training_set(
                &ws.cfg,
                &ws.backbone,
                &set,
                &bank,
                &ckpt.state.invariant_visual,
            )?;
            emit(&common, &report.to_csv())
        }
    }
}
