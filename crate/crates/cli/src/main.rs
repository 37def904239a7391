//! `lorm`: experiment runner and offline merge tool.

use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use lorm_core::experiment::{deployed_snapshot, run_ablation_suite, run_experiment_detailed, ExperimentConfig};
use lorm_core::snapshot::{merge_offline, MergeKind, Snapshot};
use lorm_core::LormError;

#[derive(Parser)]
#[command(name = "lorm", version, about = "Closed-form LoRA merging in federated class-incremental learning")]
struct Cli {
    /// Print the default configuration as TOML and exit.
    #[arg(long)]
    print_defaults: bool,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Subcommand)]
enum Command {
    /// Run one experiment and write its report.
    Run {
        #[command(flatten)]
        config: ConfigArgs,
        /// Report path (stdout when omitted).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Round-by-round event log, one JSON object per line.
        #[arg(long)]
        events: Option<PathBuf>,
        /// Snapshot of the merged residuals and task Grams.
        #[arg(long)]
        snapshot: Option<PathBuf>,
    },
    /// Run every strategy over several seeds.
    Suite {
        #[command(flatten)]
        config: ConfigArgs,
        /// Comma-separated seeds.
        #[arg(long, value_delimiter = ',', default_value = "0,1,2,3,4")]
        seeds: Vec<u64>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Merge weight snapshots with a closed form.
    Merge {
        /// regmean, lora-b, lora-a or task-residuals.
        #[arg(long, default_value = "regmean")]
        kind: String,
        /// Off-diagonal Gram decay applied before merging.
        #[arg(long)]
        gamma: Option<f64>,
        #[arg(long, default_value_t = lorm_core::linalg::DEFAULT_RIDGE)]
        ridge: f64,
        #[arg(long)]
        out: PathBuf,
        /// Objective report path (stdout when omitted).
        #[arg(long)]
        report: Option<PathBuf>,
        #[arg(required = true)]
        inputs: Vec<PathBuf>,
    },
    /// Print the default configuration as TOML.
    PrintDefaults,
}

/// Config file plus one flag per config key.
#[derive(Args)]
struct ConfigArgs {
    /// TOML config file; missing keys take their defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override any key, e.g. `--set beta=0.1`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(long)]
    classes: Option<String>,
    #[arg(long)]
    dim: Option<String>,
    #[arg(long)]
    hidden: Option<String>,
    #[arg(long)]
    per_class_train: Option<String>,
    #[arg(long)]
    per_class_test: Option<String>,
    #[arg(long)]
    blob_std: Option<String>,
    #[arg(long)]
    tasks: Option<String>,
    #[arg(long)]
    clients: Option<String>,
    #[arg(long)]
    beta: Option<String>,
    #[arg(long)]
    rank: Option<String>,
    #[arg(long)]
    rounds_per_task: Option<String>,
    #[arg(long)]
    epochs_per_round: Option<String>,
    #[arg(long)]
    batch_size: Option<String>,
    #[arg(long)]
    learning_rate: Option<String>,
    #[arg(long)]
    gamma_backbone: Option<String>,
    #[arg(long)]
    gamma_classifier: Option<String>,
    #[arg(long)]
    ridge: Option<String>,
    #[arg(long)]
    strategy: Option<String>,
    #[arg(long)]
    peft_kind: Option<String>,
    #[arg(long)]
    seed: Option<String>,
    #[arg(long)]
    task_sample_ratio: Option<String>,
    #[arg(long)]
    head_init_std: Option<String>,
    #[arg(long)]
    head_merge: Option<String>,
    #[arg(long)]
    scale_projection: Option<String>,
    #[arg(long)]
    pretrain_steps: Option<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig> {
        let mut cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|source| LormError::Io {
                    path: path.display().to_string(),
                    source,
                })?;
                ExperimentConfig::from_toml(&text)?
            }
            None => ExperimentConfig::default(),
        };
        let flags = [
            ("classes", &self.classes),
            ("dim", &self.dim),
            ("hidden", &self.hidden),
            ("per_class_train", &self.per_class_train),
            ("per_class_test", &self.per_class_test),
            ("blob_std", &self.blob_std),
            ("tasks", &self.tasks),
            ("clients", &self.clients),
            ("beta", &self.beta),
            ("rank", &self.rank),
            ("rounds_per_task", &self.rounds_per_task),
            ("epochs_per_round", &self.epochs_per_round),
            ("batch_size", &self.batch_size),
            ("learning_rate", &self.learning_rate),
            ("gamma_backbone", &self.gamma_backbone),
            ("gamma_classifier", &self.gamma_classifier),
            ("ridge", &self.ridge),
            ("strategy", &self.strategy),
            ("peft_kind", &self.peft_kind),
            ("seed", &self.seed),
            ("task_sample_ratio", &self.task_sample_ratio),
            ("head_init_std", &self.head_init_std),
            ("head_merge", &self.head_merge),
            ("scale_projection", &self.scale_projection),
            ("pretrain_steps", &self.pretrain_steps),
        ];
        for (key, value) in flags {
            if let Some(v) = value {
                cfg.set(key, v)?;
            }
        }
        for kv in &self.sets {
            let (key, value) = kv
                .split_once('=')
                .ok_or_else(|| LormError::Config(format!("--set expects KEY=VALUE, got '{kv}'")))?;
            cfg.set(key.trim(), value.trim())?;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).with_context(|| format!("writing {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.write_all(b"\n")?;
            Ok(())
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    if cli.print_defaults {
        print!("{}", ExperimentConfig::default().to_toml());
        return Ok(());
    }
    let command = cli
        .command
        .ok_or_else(|| LormError::Config("no subcommand given (try --help)".into()))?;
    match command {
        Command::PrintDefaults => print!("{}", ExperimentConfig::default().to_toml()),
        Command::Run {
            config,
            out,
            events,
            snapshot,
        } => {
            let cfg = config.resolve()?;
            let (report, model, server) = run_experiment_detailed(&cfg)?;
            if let Some(path) = events {
                let mut lines = String::new();
                for e in &report.events {
                    lines.push_str(&serde_json::to_string(e)?);
                    lines.push('\n');
                }
                std::fs::write(&path, lines).with_context(|| format!("writing {}", path.display()))?;
            }
            if let Some(path) = snapshot {
                deployed_snapshot(&model, &server)?.save(&path)?;
            }
            write_output(out.as_deref(), &serde_json::to_string_pretty(&report)?)?;
        }
        Command::Suite { config, seeds, out } => {
            let cfg = config.resolve()?;
            let report = run_ablation_suite(&cfg, &seeds)?;
            for row in &report.rows {
                eprintln!("{:<14} FAA {:.4} +- {:.4}", row.strategy.name(), row.mean_faa, row.std_faa);
            }
            write_output(out.as_deref(), &serde_json::to_string_pretty(&report)?)?;
        }
        Command::Merge {
            kind,
            gamma,
            ridge,
            out,
            report,
            inputs,
        } => {
            let kind: MergeKind = kind.parse()?;
            let snapshots = inputs
                .iter()
                .map(|p| Snapshot::load(p).map(|s| (p.clone(), s)))
                .collect::<lorm_core::Result<Vec<_>>>()?;
            let (merged, omega) = merge_offline(&snapshots, kind, gamma, ridge)?;
            merged.save(&out)?;
            write_output(report.as_deref(), &serde_json::to_string_pretty(&omega)?)?;
        }
    }
    Ok(())
}

fn error_json(err: &anyhow::Error) -> serde_json::Value {
    let kind = err.downcast_ref::<LormError>().map_or("internal", LormError::kind);
    serde_json::json!({
        "error": kind,
        "message": format!("{err:#}"),
    })
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => {
            let _ = e.print();
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprintln!("{}", serde_json::json!({ "error": "usage", "message": e.to_string() }));
            return ExitCode::from(2);
        }
    };
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("{}", error_json(&err));
            ExitCode::FAILURE
        }
    }
}
