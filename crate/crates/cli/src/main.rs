//! Command-line driver.
//!
//! Configuration comes from an optional `key = value` file plus `--key
//! value` overrides appended to any subcommand; every run writes the fully
//! resolved configuration beside its outputs. Exit codes: 0 success,
//! 1 validation failure, 2 numerical abort.

use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use warpaug::adversary::ComponentMask;
use warpaug::error::Error;
use warpaug::harness::{self, RunConfig, TrainMode};

#[derive(Parser)]
#[command(name = "warpaug", version, about = "Adversarial alignment-perturbation training")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args)]
struct Common {
    /// Path to a `key = value` configuration file.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Trailing `--key value` pairs overriding configuration entries.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true)]
    overrides: Vec<String>,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate the synthetic train/test splits into the output directory.
    GenData(Common),
    /// Train a model (baseline or adversarial) and write its artifacts.
    Train {
        /// `baseline` or `adversarial`.
        #[arg(long, default_value = "adversarial")]
        mode: String,
        #[command(flatten)]
        common: Common,
    },
    /// Evaluate a checkpoint on the test split, aligned and perturbed.
    Eval {
        /// Checkpoint written by `train`.
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference validation of the gradient chain.
    Gradcheck {
        /// Trials for the warp suites (the end-to-end suite caps at 100).
        #[arg(long, default_value_t = 1000)]
        trials: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Train+evaluate once per transformation-component subset.
    Ablate {
        /// Subset such as `scale`, `scale,rotation`, or `none`; repeatable.
        /// Defaults to the standard ladder when omitted.
        #[arg(long = "subset")]
        subsets: Vec<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Paired runs with fixed vs randomly sampled step size.
    AlphaStudy(Common),
    /// Render a previously written JSON report as text.
    Report {
        /// Path to a `.json` report produced by any subcommand.
        path: PathBuf,
    },
}

fn parse_overrides(tokens: &[String]) -> Result<Vec<(String, String)>, Error> {
    let mut pairs = Vec::new();
    let mut iter = tokens.iter();
    while let Some(tok) = iter.next() {
        let key = tok
            .strip_prefix("--")
            .ok_or_else(|| Error::Validation(format!("expected `--key value` override, got `{tok}`")))?;
        let value = iter
            .next()
            .ok_or_else(|| Error::Validation(format!("override --{key} is missing its value")))?;
        pairs.push((key.to_string(), value.clone()));
    }
    Ok(pairs)
}

fn load_config(common: &Common) -> Result<RunConfig, Error> {
    let overrides = parse_overrides(&common.overrides)?;
    RunConfig::from_file_and_overrides(common.config.as_deref(), &overrides)
}

fn require_out(cfg: &RunConfig) -> Result<PathBuf, Error> {
    cfg.out_dir
        .clone()
        .ok_or_else(|| Error::Validation("this command needs an output directory: set `out = DIR` or pass `--out DIR`".into()))
}

fn parse_subset(s: &str) -> Result<ComponentMask, Error> {
    if s == "none" {
        return Ok(ComponentMask::none());
    }
    let mut mask = ComponentMask::none();
    for tok in s.split(',') {
        match tok.trim() {
            "scale" => mask.scale = true,
            "rotation" => mask.rotation = true,
            "translation" => mask.translation = true,
            other => {
                return Err(Error::Validation(format!(
                    "subset component must be scale, rotation, or translation, got `{other}`"
                )))
            }
        }
    }
    Ok(mask)
}

fn run(cli: Cli) -> Result<(), Error> {
    match cli.cmd {
        Cmd::GenData(common) => {
            let cfg = load_config(&common)?;
            require_out(&cfg)?;
            let (n_train, n_test) = harness::gen_data(&cfg)?;
            println!("wrote {n_train} train and {n_test} test samples to {}", cfg.out_dir.unwrap().display());
        }
        Cmd::Train { mode, common } => {
            let cfg = load_config(&common)?;
            let out = require_out(&cfg)?;
            let mode = TrainMode::parse(&mode)?;
            let output = harness::train(&cfg, mode)?;
            print!("{}", harness::report::render_metrics(&output.report));
            println!("artifacts written to {}", out.display());
        }
        Cmd::Eval { checkpoint, common } => {
            let cfg = load_config(&common)?;
            let params = harness::load_checkpoint(&checkpoint)?;
            let report = harness::run_eval(&cfg, &params)?;
            print!("{}", harness::report::render_metrics(&report));
            if let Some(out) = &cfg.out_dir {
                cfg.write_resolved(out)?;
                harness::report::write_metrics(out, "eval_report", &report)?;
                println!("report written to {}", out.display());
            }
        }
        Cmd::Gradcheck { trials, common } => {
            let cfg = load_config(&common)?;
            let report = harness::gradcheck(&cfg, trials, cfg.seed)?;
            print!("{}", harness::report::render_gradcheck(&report));
            if let Some(out) = &cfg.out_dir {
                cfg.write_resolved(out)?;
                std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                harness::report::write_json(&out.join("gradcheck.json"), &report)?;
            }
        }
        Cmd::Ablate { subsets, common } => {
            let cfg = load_config(&common)?;
            let masks = subsets.iter().map(|s| parse_subset(s)).collect::<Result<Vec<_>, _>>()?;
            let report = harness::ablate(&cfg, &masks)?;
            print!("{}", harness::report::render_ablation(&report));
            if let Some(out) = &cfg.out_dir {
                cfg.write_resolved(out)?;
                std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                harness::report::write_json(&out.join("ablation.json"), &report)?;
                let path = out.join("ablation.txt");
                std::fs::write(&path, harness::report::render_ablation(&report))
                    .map_err(|e| Error::io(&path, e))?;
            }
        }
        Cmd::AlphaStudy(common) => {
            let cfg = load_config(&common)?;
            let report = harness::alpha_study(&cfg)?;
            print!("{}", harness::report::render_alpha_study(&report));
            if let Some(out) = &cfg.out_dir {
                cfg.write_resolved(out)?;
                std::fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
                harness::report::write_json(&out.join("alpha_study.json"), &report)?;
                let path = out.join("alpha_study.txt");
                std::fs::write(&path, harness::report::render_alpha_study(&report))
                    .map_err(|e| Error::io(&path, e))?;
            }
        }
        Cmd::Report { path } => {
            print!("{}", harness::report::render_report_file(&path)?);
        }
    }
    Ok(())
}

fn main() {
    let cli = Cli::parse();
    if let Err(e) = run(cli) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}
