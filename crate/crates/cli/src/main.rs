use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use vprompt::data::{load_dataset, SplitView};
use vprompt::experiment::{
    evaluate_view, load_checkpoint, load_results, preset, render_text, run_experiment, ExperimentConfig,
    RunStatus,
};
use vprompt::inference::{SamplerFamily, SamplerSpec};
use vprompt::learners::LearnerKind;

#[derive(Parser)]
#[command(name = "vprompt", version, about = "Variational prompt tuning experiments on a toy frozen encoder pair")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the experiment described by a TOML config.
    Run {
        config: PathBuf,
        #[command(flatten)]
        over: Overrides,
    },
    /// Run a built-in preset, or print its config.
    Preset {
        name: String,
        /// Print the config as TOML instead of running it.
        #[arg(long)]
        emit_config: bool,
        #[command(flatten)]
        over: Overrides,
    },
    /// Evaluate a checkpoint on every example of a dataset file.
    Eval {
        checkpoint: PathBuf,
        dataset: PathBuf,
        #[command(flatten)]
        over: Overrides,
    },
    /// Print the table of a finished run.
    Report { results_dir: PathBuf },
}

#[derive(Args, Default)]
struct Overrides {
    /// Use this single seed instead of the config's list.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory (takes precedence over VPROMPT_OUT).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Monte-Carlo samples at test time.
    #[arg(long)]
    k: Option<usize>,
    /// Restrict to these learners (repeatable).
    #[arg(long)]
    learner: Vec<String>,
}

impl Overrides {
    fn learners(&self) -> Result<Vec<LearnerKind>> {
        self.learner
            .iter()
            .map(|l| l.parse().map_err(anyhow::Error::from))
            .collect()
    }

    fn apply(&self, cfg: &mut ExperimentConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seeds = vec![s];
        }
        if let Some(k) = self.k {
            cfg.sampler.k = k;
        }
        let learners = self.learners()?;
        if !learners.is_empty() {
            if cfg.baseline.is_some_and(|b| !learners.contains(&b)) {
                cfg.baseline = None;
            }
            cfg.learners = learners;
        }
        if let Some(out) = &self.out {
            cfg.output_dir = out.clone();
        } else {
            cfg.output_dir = cfg.resolved_output_dir();
        }
        cfg.validate()?;
        Ok(())
    }
}

fn run(mut cfg: ExperimentConfig, over: &Overrides) -> Result<ExitCode> {
    over.apply(&mut cfg)?;
    let dir = cfg.output_dir.clone();
    let result = run_experiment(&cfg, &dir)?;
    print!("{}", render_text(&result));
    println!("results written to {}", dir.display());
    Ok(match result.status {
        RunStatus::Complete => ExitCode::SUCCESS,
        RunStatus::Partial => {
            eprintln!("error: {} cell(s) failed; partial results kept", result.failures.len());
            ExitCode::from(2)
        }
    })
}

fn eval(checkpoint: &Path, dataset: &Path, over: &Overrides) -> Result<ExitCode> {
    let ckpt = load_checkpoint(checkpoint).with_context(|| format!("loading {}", checkpoint.display()))?;
    let Some(enc) = ckpt.encoder.clone() else {
        bail!("{} does not record its encoder; only checkpoints written by `run` can be evaluated", checkpoint.display());
    };
    let state = match over.learners()?.as_slice() {
        [] => ckpt.state,
        [kind] => ckpt.expect_kind(*kind)?,
        _ => bail!("eval takes at most one --learner"),
    };
    let backbone = enc.rebuild()?;
    let ds = load_dataset(dataset)?;
    let view = SplitView {
        class_names: ds.class_names.clone(),
        features: ds.examples.iter().map(|e| e.features.clone()).collect(),
        labels: ds.examples.iter().map(|e| e.label).collect(),
    };
    let spec = SamplerSpec {
        family: SamplerFamily::PosteriorFull,
        k: over.k.unwrap_or(SamplerSpec::default().k),
        seed: over.seed.unwrap_or(0),
    };
    let acc = evaluate_view(&backbone, &state, &view, enc.tau, &spec)?;
    let summary = serde_json::json!({
        "checkpoint": checkpoint.display().to_string(),
        "dataset": ds.name,
        "learner": state.kind().table_name(),
        "examples": view.labels.len(),
        "k": spec.k,
        "seed": spec.seed,
        "accuracy": acc,
    });
    println!("{}: {acc:.2}% on {} ({} examples)", state.kind(), ds.name, view.labels.len());
    if let Some(out) = &over.out {
        std::fs::create_dir_all(out).with_context(|| format!("creating {}", out.display()))?;
        let path = out.join("eval.json");
        std::fs::write(&path, serde_json::to_string_pretty(&summary)? + "\n")
            .with_context(|| format!("writing {}", path.display()))?;
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let res = match &cli.command {
        Command::Run { config, over } => ExperimentConfig::load(config).map_err(Into::into).and_then(|c| run(c, over)),
        Command::Preset { name, emit_config, over } => preset(name).map_err(Into::into).and_then(|mut c| {
            if *emit_config {
                over.apply(&mut c)?;
                print!("{}", c.to_toml());
                Ok(ExitCode::SUCCESS)
            } else {
                run(c, over)
            }
        }),
        Command::Eval { checkpoint, dataset, over } => eval(checkpoint, dataset, over),
        Command::Report { results_dir } => load_results(results_dir).map_err(Into::into).map(|r| {
            print!("{}", render_text(&r));
            ExitCode::SUCCESS
        }),
    };
    res.unwrap_or_else(|e| {
        eprintln!("error: {e:#}");
        ExitCode::FAILURE
    })
}
