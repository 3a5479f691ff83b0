// SPDX-License-Identifier: MIT OR Apache-2.0

//! `introspect` command-line driver. Each subcommand runs one pipeline
//! stage (or one composite experiment) inside a run directory.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use introspect::explain::Ablations;
use introspect::pipeline::experiments::{self, run_align, run_baselines};
use introspect::pipeline::stages::{self, Baseline, ExplainerSpec, Subject};
use introspect::pipeline::{RunConfig, Task, Workspace};
use introspect::projection::ProjectionMode;
use introspect::Result;

/// Environment override for the default output root.
const OUT_ENV: &str = "INTROSPECT_OUT";

#[derive(Parser)]
#[command(name = "introspect", version, about = "Train small transformers to explain their own internals")]
struct Cli {
    /// Config file or preset name (default.conf, desk.conf, smoke.conf).
    #[arg(long, global = true)]
    config: Option<String>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Run directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Joint,
    Frozen,
    Random,
    Identity,
}

impl From<ModeArg> for ProjectionMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Joint => Self::Joint,
            ModeArg::Frozen => Self::Frozen,
            ModeArg::Random => Self::Random,
            ModeArg::Identity => Self::Identity,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum TaskArg {
    Feat,
    Patch,
    Ablate,
    Location,
}

impl From<TaskArg> for Task {
    fn from(t: TaskArg) -> Self {
        match t {
            TaskArg::Feat => Self::Feat,
            TaskArg::Patch => Self::Patch,
            TaskArg::Ablate => Self::Ablate,
            TaskArg::Location => Self::Location,
        }
    }
}

#[derive(Args)]
struct ModelArg {
    /// Target model id (A or B).
    #[arg(long, default_value = "A")]
    model: String,
}

#[derive(Args)]
struct SpecArgs {
    #[arg(long, value_enum, default_value = "feat")]
    task: TaskArg,
    /// Model the explainer is fine-tuned from.
    #[arg(long, default_value = "A")]
    explainer: String,
    /// Model whose internals are explained.
    #[arg(long, default_value = "A")]
    target: String,
    /// Projection mode; defaults to identity for self-explanation and the
    /// configured mode otherwise.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
    #[arg(long, default_value_t = 1.0)]
    fraction: f64,
    /// Comma-separated parts to leave out of patching questions.
    #[arg(long, value_delimiter = ',')]
    ablate: Vec<String>,
}

impl SpecArgs {
    fn spec(&self, ws: &Workspace) -> Result<ExplainerSpec> {
        let mode = match self.mode {
            Some(m) => m.into(),
            None if self.explainer == self.target => ProjectionMode::Identity,
            None => ws.config.mode,
        };
        Ok(ExplainerSpec {
            task: self.task.into(),
            explainer: self.explainer.clone(),
            target: self.target.clone(),
            mode,
            fraction: self.fraction,
            ablations: Ablations::parse(&self.ablate.join(","))?,
        })
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic vocabulary, facts, questions and text.
    World,
    /// Train one hint-following target model.
    TrainTarget(ModelArg),
    /// Train per-layer sparse autoencoders and extract feature directions.
    TrainSae(ModelArg),
    /// Label features with the simulator and split train / held-out.
    LabelFeatures(ModelArg),
    /// Build the balanced activation-patching and location datasets.
    GenPatch(ModelArg),
    /// Build the balanced hint-ablation dataset.
    GenAblate(ModelArg),
    /// Fit least-squares maps from target to explainer hidden states.
    PretrainProj {
        #[arg(long, default_value = "A")]
        target: String,
        #[arg(long, default_value = "B")]
        explainer: String,
    },
    /// Fine-tune an explainer.
    TrainExplainer(SpecArgs),
    /// Score an untrained baseline.
    Baseline {
        #[arg(long)]
        name: String,
        #[arg(long, default_value = "A")]
        target: String,
    },
    /// Score a trained explainer, or a baseline with --baseline.
    Eval {
        #[command(flatten)]
        spec: SpecArgs,
        #[arg(long)]
        baseline: Option<String>,
    },
    /// Alignment metrics of explainer variants against judge scores.
    Align {
        #[arg(long, default_value = "A")]
        target: String,
    },
    /// Data-fraction sweep of the feature self-explainer.
    Sweep {
        #[arg(long, default_value = "A")]
        target: String,
    },
    /// Explainer x target matrix for one task.
    Matrix {
        #[arg(long, value_enum, default_value = "feat")]
        task: TaskArg,
    },
    /// Self-explainer against the feature baselines.
    Compare {
        #[arg(long, default_value = "A")]
        target: String,
    },
    /// Collect all evaluations into reports/summary.csv.
    Report,
    /// Every experiment, from the world onward.
    All,
}

fn load_config(cli: &Cli) -> Result<Option<RunConfig>> {
    let Some(name) = &cli.config else {
        return Ok(cli.seed.map(|_| RunConfig::named("default.conf")).transpose()?);
    };
    let path = Path::new(name);
    let cfg = if path.exists() {
        RunConfig::load(path)?
    } else {
        RunConfig::named(name)?
    };
    Ok(Some(cfg))
}

fn workspace(cli: &Cli) -> Result<Workspace> {
    let root = cli
        .out
        .clone()
        .or_else(|| std::env::var_os(OUT_ENV).map(PathBuf::from))
        .unwrap_or_else(|| PathBuf::from("runs/default"));
    match load_config(cli)? {
        Some(mut cfg) => {
            if let Some(s) = cli.seed {
                cfg = cfg.with_seed(s)?;
            }
            Workspace::create(&root, cfg)
        }
        None if root.join("config.conf").exists() => Workspace::open(&root),
        None => Workspace::create(&root, RunConfig::named("default.conf")?),
    }
}

fn run(cli: &Cli) -> Result<()> {
    let ws = workspace(cli)?;
    let m = match &cli.command {
        Command::World => stages::stage_world(&ws)?,
        Command::TrainTarget(a) => stages::stage_train_target(&ws, &a.model)?,
        Command::TrainSae(a) => stages::stage_train_sae(&ws, &a.model)?,
        Command::LabelFeatures(a) => stages::stage_label_features(&ws, &a.model)?,
        Command::GenPatch(a) => stages::stage_gen_patch(&ws, &a.model)?,
        Command::GenAblate(a) => stages::stage_gen_ablate(&ws, &a.model)?,
        Command::PretrainProj { target, explainer } => stages::stage_pretrain_proj(&ws, target, explainer)?,
        Command::TrainExplainer(s) => stages::stage_train_explainer(&ws, &s.spec(&ws)?)?,
        Command::Baseline { name, target } => stages::stage_eval(
            &ws,
            &Subject::Baseline {
                baseline: Baseline::parse(name)?,
                target: target.clone(),
            },
        )?,
        Command::Eval { spec, baseline } => {
            let subject = match baseline {
                Some(b) => Subject::Baseline {
                    baseline: Baseline::parse(b)?,
                    target: spec.target.clone(),
                },
                None => Subject::Explainer(spec.spec(&ws)?),
            };
            stages::stage_eval(&ws, &subject)?
        }
        Command::Align { target } => {
            let (rows, rho) = run_align(&ws, target)?;
            for r in rows {
                println!("{:<16} dot {:>8.4}  sae {:>7.4}  judge {:.4}", r.variant, r.dot_similarity, r.sae_pattern_similarity, r.judge);
            }
            println!("spearman(dot, judge) = {rho:.4}");
            return Ok(());
        }
        Command::Sweep { target } => {
            print!("{}", experiments::sweep_data_fraction(&ws, target)?.to_csv());
            return Ok(());
        }
        Command::Matrix { task } => {
            print!("{}", experiments::run_matrix(&ws, (*task).into())?.to_csv());
            return Ok(());
        }
        Command::Compare { target } => {
            for (_, c) in run_baselines(&ws, target)? {
                println!(
                    "{} {:.4} vs {} {:.4}  p = {:.3e}",
                    c.self_cell, c.self_mean, c.cross_cell, c.cross_mean, c.p
                );
            }
            return Ok(());
        }
        Command::Report => {
            print!("{}", experiments::write_report(&ws)?);
            return Ok(());
        }
        Command::All => {
            experiments::run_all(&ws)?;
            println!("reports written under {}", ws.root.join("reports").display());
            return Ok(());
        }
    };
    println!("{} [{}] done in {} ms", m.stage, m.key, m.wall_ms);
    for (k, v) in &m.meta {
        println!("  {k} = {v}");
    }
    for o in &m.outputs {
        println!("  wrote {}", o.path);
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
