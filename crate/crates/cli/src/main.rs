//! `clmnet`: synthetic data, fold planning, training, cross-validation and
//! report rendering for the tissue classifiers in `clm-core`.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use clm_core::data::{SynthConfig, Task, TissueClass};
use clm_core::experiment::{self, Failure, RunConfig};
use clm_core::Error;

#[derive(Parser)]
#[command(name = "clmnet", version, about = "Confocal tissue classification pipeline")]
struct Cli {
    /// More log output (-v info, -vv debug).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (PNG images plus manifest.tsv).
    Generate {
        #[arg(long, default_value_t = 4)]
        subjects: usize,
        #[arg(long, default_value_t = 10)]
        per_class: usize,
        /// Image edge length in pixels.
        #[arg(long, default_value_t = 64)]
        size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
        /// Leave out one subject's class, e.g. `S02:HC`. Repeatable.
        #[arg(long, value_parser = parse_omit)]
        omit: Vec<(String, TissueClass)>,
    },
    /// Print the leave-one-subject-out fold plan.
    Split {
        #[arg(long, conflicts_with_all = ["manifest", "task"])]
        config: Option<PathBuf>,
        #[arg(long, requires = "task")]
        manifest: Option<PathBuf>,
        #[arg(long, requires = "manifest")]
        task: Option<Task>,
        /// Write the plan as JSON.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train and evaluate a single fold.
    Train {
        #[command(flatten)]
        run: RunArgs,
        /// Validation subject; defaults to the first eligible one.
        #[arg(long)]
        fold: Option<String>,
    },
    /// Evaluate a stored fold model on its validation subject.
    Evaluate {
        #[command(flatten)]
        run: RunArgs,
        #[arg(long)]
        fold: Option<String>,
        /// Weight container; defaults to the fold's model.ntwc.
        #[arg(long)]
        model: Option<PathBuf>,
    },
    /// Train and evaluate every fold, then aggregate.
    Crossval {
        #[command(flatten)]
        run: RunArgs,
        /// Folds trained concurrently.
        #[arg(long, default_value_t = 1)]
        jobs: usize,
    },
    /// Re-render stored reports (files or run directories) as a table.
    Report {
        #[arg(required = true)]
        reports: Vec<PathBuf>,
        /// Directory for table.txt and table.json.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
struct RunArgs {
    #[arg(long)]
    config: PathBuf,
    /// Overrides the config's master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the config's output directory.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl RunArgs {
    fn load(&self) -> Result<RunConfig, Failure> {
        let mut cfg = RunConfig::load(&self.config).map_err(Failure::validation)?;
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(o) = &self.out {
            cfg.out = o.clone();
        }
        Ok(cfg)
    }
}

fn parse_omit(s: &str) -> Result<(String, TissueClass), String> {
    let (subject, class) = s
        .split_once(':')
        .ok_or_else(|| format!("expected SUBJECT:CLASS, got {s:?}"))?;
    Ok((subject.to_string(), class.parse::<TissueClass>()?))
}

fn write_text(path: &Path, text: &str) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Failure::runtime(io_error(dir, e)))?;
    }
    std::fs::write(path, text).map_err(|e| Failure::runtime(io_error(path, e)))
}

fn io_error(path: &Path, source: std::io::Error) -> Error {
    Error::Io {
        path: path.to_path_buf(),
        source,
    }
}

fn to_json<S: serde::Serialize>(value: &S) -> Result<String, Failure> {
    serde_json::to_string_pretty(value)
        .map(|s| s + "\n")
        .map_err(|e| Failure::runtime(e.into()))
}

fn print_metrics(record: &clm_core::eval::FoldRecord) {
    let m = record.metrics.values().map(clm_core::eval::percent);
    let c = record.counts;
    println!(
        "{}: accuracy {} sensitivity {} specificity {} f1 {} (tp {} fp {} tn {} fn {})",
        record.validation_subject, m[0], m[1], m[2], m[3], c.tp, c.fp, c.tn, c.fn_
    );
}

fn run(command: Command) -> Result<(), Failure> {
    match command {
        Command::Generate {
            subjects,
            per_class,
            size,
            seed,
            out,
            omit,
        } => {
            let cfg = SynthConfig {
                omit,
                ..SynthConfig::new(subjects, per_class, size, seed)
            };
            let manifest = experiment::generate(&cfg, &out)?;
            println!("{}", manifest.census());
        }
        Command::Split {
            config,
            manifest,
            task,
            out,
        } => {
            let (manifest, task) = match (config, manifest, task) {
                (Some(c), _, _) => {
                    let cfg = RunConfig::load(&c).map_err(Failure::validation)?;
                    (cfg.manifest, cfg.task)
                }
                (None, Some(m), Some(t)) => (m, t),
                _ => {
                    return Err(Failure::validation(Error::Config(
                        "split needs --config or both --manifest and --task".into(),
                    )))
                }
            };
            let plan = experiment::split(&manifest, task)?;
            println!("task {} ({}): {} folds", plan.task, plan.task.title(), plan.folds.len());
            for f in &plan.folds {
                println!("  validate {}  train {}", f.validation_subject, f.training_subjects.join(","));
            }
            if !plan.omitted.is_empty() {
                println!("  omitted from validation: {}", plan.omitted.join(","));
            }
            if let Some(out) = out {
                write_text(&out, &to_json(&plan)?)?;
            }
        }
        Command::Train { run, fold } => {
            let record = experiment::train_fold(&run.load()?, fold.as_deref())?;
            print_metrics(&record);
        }
        Command::Evaluate { run, fold, model } => {
            let record = experiment::evaluate(&run.load()?, fold.as_deref(), model.as_deref())?;
            print_metrics(&record);
        }
        Command::Crossval { run, jobs } => {
            let outcome = experiment::crossval(&run.load()?, jobs)?;
            for f in &outcome.report.folds {
                print_metrics(f);
            }
            print!("{}", outcome.table.text);
        }
        Command::Report { reports, out } => {
            let table = experiment::report(&reports)?;
            print!("{}", table.text);
            if let Some(dir) = out {
                write_text(&dir.join("table.txt"), &table.text)?;
                write_text(&dir.join("table.json"), &to_json(&table)?)?;
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {f}");
            ExitCode::from(f.exit_code() as u8)
        }
    }
}
