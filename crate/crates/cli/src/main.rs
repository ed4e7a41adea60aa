use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use mlab_cli::commands;
use mlab_cli::config::{
    load, to_toml, AblateJob, BiasSweepJob, ConsistencyJob, GenDataJob, LearnedMaskJob, LimeJob,
    RoarJob, Seeded, SlicJob, SourceFile, TrainJob,
};
use mlab_cli::{CliError, Result};
use mlab_core::nn::{CnnConfig, ModelConfig, VitConfig};
use serde::de::DeserializeOwned;
use serde::Serialize;

/// Missingness-bias experiments on toy CNN and ViT classifiers.
#[derive(Debug, Parser)]
#[command(name = "mlab", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Common {
    /// TOML config file; built-in defaults apply when omitted.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Seed for every random stream the command uses.
    #[arg(long)]
    seed: Option<u64>,
    /// Output file or directory.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Print the resolved config as TOML and exit without running.
    #[arg(long)]
    print_config: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    /// Dataset directory written by `gen-data`.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Weights file of the evaluated model.
    #[arg(long)]
    model: Option<PathBuf>,
    /// Use only the first N test images.
    #[arg(long)]
    n_eval: Option<usize>,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Arch {
    Cnn,
    Vit,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic shape-and-color dataset.
    GenData {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_train: Option<usize>,
        #[arg(long)]
        n_test: Option<usize>,
        #[arg(long)]
        image_size: Option<usize>,
    },
    /// Train a classifier, optionally with random-removal augmentation.
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        /// Replace the configured model with this architecture's defaults.
        #[arg(long, value_enum)]
        arch: Option<Arch>,
        #[arg(long)]
        id: Option<String>,
        #[arg(long)]
        epochs: Option<usize>,
    },
    /// Remove growing fractions of regions and track prediction shifts.
    BiasSweep {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        saliency_model: Option<PathBuf>,
    },
    /// Explain predictions with LIME.
    Lime {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        n_perturbations: Option<usize>,
    },
    /// Explain predictions with an optimized deletion mask.
    LearnedMask {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        #[arg(long)]
        steps: Option<usize>,
    },
    /// Remove each explanation's top-k regions and measure prediction changes.
    Ablate {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        /// Explanation source as NAME=PATH; repeatable, appended to the config.
        #[arg(long = "source", value_parser = parse_source)]
        sources: Vec<SourceFile>,
    },
    /// Compare LIME explanations across the eight corner baseline colors.
    Consistency {
        #[command(flatten)]
        common: Common,
        #[command(flatten)]
        eval: EvalArgs,
        /// Remove regions by dropping tokens (transformers only).
        #[arg(long)]
        drop_tokens: bool,
        #[arg(long)]
        n_perturbations: Option<usize>,
    },
    /// Compare a standard and a retrained model under the same sweep.
    Roar {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        standard: Option<PathBuf>,
        #[arg(long)]
        retrained: Option<PathBuf>,
        #[arg(long)]
        saliency_model: Option<PathBuf>,
        #[arg(long)]
        n_eval: Option<usize>,
    },
    /// Segment dataset images into superpixels and write P5 label maps.
    Slic {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        data: Option<PathBuf>,
        #[arg(long)]
        n_images: Option<usize>,
        #[arg(long)]
        k: Option<usize>,
    },
}

fn parse_source(s: &str) -> std::result::Result<SourceFile, String> {
    let (name, path) = s
        .split_once('=')
        .ok_or_else(|| format!("expected NAME=PATH, got `{s}`"))?;
    if name.is_empty() || path.is_empty() {
        return Err(format!("expected NAME=PATH, got `{s}`"));
    }
    Ok(SourceFile {
        name: name.into(),
        path: path.into(),
    })
}

/// Loads the config, applies flag overrides, then either prints it or runs.
fn execute<T, O, R>(
    common: &Common,
    set_out: O,
    overrides: impl FnOnce(&mut T),
    run: R,
) -> Result<Vec<String>>
where
    T: DeserializeOwned + Default + Serialize + Seeded,
    O: FnOnce(&mut T, PathBuf),
    R: FnOnce(&T) -> Result<Vec<String>>,
{
    let mut job: T = load(common.config.as_deref())?;
    if let Some(seed) = common.seed {
        job.set_seed(seed);
    }
    if let Some(out) = &common.out {
        set_out(&mut job, out.clone());
    }
    overrides(&mut job);
    if common.print_config {
        return Ok(vec![to_toml(&job)?]);
    }
    run(&job)
}

fn set<T>(slot: &mut T, value: Option<T>) {
    if let Some(v) = value {
        *slot = v;
    }
}

macro_rules! eval_overrides {
    ($job:ident, $eval:ident) => {
        set(&mut $job.data, $eval.data);
        set(&mut $job.model, $eval.model);
        if $eval.n_eval.is_some() {
            $job.n_eval = $eval.n_eval;
        }
    };
}

fn run(cli: Cli) -> Result<Vec<String>> {
    match cli.command {
        Command::GenData {
            common,
            n_train,
            n_test,
            image_size,
        } => execute(
            &common,
            |j: &mut GenDataJob, o| j.out = o,
            |j| {
                set(&mut j.dataset.n_train, n_train);
                set(&mut j.dataset.n_test, n_test);
                set(&mut j.dataset.image_size, image_size);
            },
            commands::gen_data,
        ),
        Command::Train {
            common,
            data,
            arch,
            id,
            epochs,
        } => execute(
            &common,
            |j: &mut TrainJob, o| j.out = o,
            |j| {
                set(&mut j.data, data);
                set(&mut j.id, id);
                set(&mut j.train.epochs, epochs);
                if let Some(arch) = arch {
                    j.model = match arch {
                        Arch::Cnn => ModelConfig::Cnn(CnnConfig::default()),
                        Arch::Vit => ModelConfig::Vit(VitConfig::default()),
                    };
                }
            },
            commands::train,
        ),
        Command::BiasSweep {
            common,
            eval,
            saliency_model,
        } => execute(
            &common,
            |j: &mut BiasSweepJob, o| j.out = o,
            |j| {
                eval_overrides!(j, eval);
                if saliency_model.is_some() {
                    j.saliency_model = saliency_model;
                }
            },
            commands::bias_sweep_cmd,
        ),
        Command::Lime {
            common,
            eval,
            n_perturbations,
        } => execute(
            &common,
            |j: &mut LimeJob, o| j.out = o,
            |j| {
                eval_overrides!(j, eval);
                set(&mut j.lime.n_perturbations, n_perturbations);
            },
            commands::lime,
        ),
        Command::LearnedMask {
            common,
            eval,
            steps,
        } => execute(
            &common,
            |j: &mut LearnedMaskJob, o| j.out = o,
            |j| {
                eval_overrides!(j, eval);
                set(&mut j.mask.steps, steps);
            },
            commands::learned_mask,
        ),
        Command::Ablate {
            common,
            eval,
            sources,
        } => execute(
            &common,
            |j: &mut AblateJob, o| j.out = o,
            |j| {
                eval_overrides!(j, eval);
                j.sources.extend(sources);
            },
            commands::ablate,
        ),
        Command::Consistency {
            common,
            eval,
            drop_tokens,
            n_perturbations,
        } => execute(
            &common,
            |j: &mut ConsistencyJob, o| j.out = o,
            |j| {
                eval_overrides!(j, eval);
                j.consistency.drop_tokens |= drop_tokens;
                set(&mut j.consistency.lime.n_perturbations, n_perturbations);
            },
            commands::consistency,
        ),
        Command::Roar {
            common,
            data,
            standard,
            retrained,
            saliency_model,
            n_eval,
        } => execute(
            &common,
            |j: &mut RoarJob, o| j.out = o,
            |j| {
                set(&mut j.data, data);
                set(&mut j.standard, standard);
                set(&mut j.retrained, retrained);
                if saliency_model.is_some() {
                    j.saliency_model = saliency_model;
                }
                if n_eval.is_some() {
                    j.n_eval = n_eval;
                }
            },
            commands::roar,
        ),
        Command::Slic {
            common,
            data,
            n_images,
            k,
        } => execute(
            &common,
            |j: &mut SlicJob, o| j.out = o,
            |j| {
                set(&mut j.data, data);
                set(&mut j.params.k, k);
                if n_images.is_some() {
                    j.n_images = n_images;
                }
            },
            commands::slic_cmd,
        ),
    }
}

/// Collapses a possibly multi-line message onto one line.
fn one_line(err: &CliError) -> String {
    err.to_string()
        .split_whitespace()
        .collect::<Vec<_>>()
        .join(" ")
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(lines) => {
            for line in lines {
                println!("{line}");
            }
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("mlab: error: {}", one_line(&e));
            ExitCode::FAILURE
        }
    }
}
