use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use forensic_cli::{cmd_analyze, cmd_evaluate, cmd_rules, exit_code, render_error, Overrides};

/// Rule-guided manipulation detection and localization.
#[derive(Parser)]
#[command(name = "forensic", version)]
struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Use the deterministic in-process backends instead of the model service.
    #[arg(long, global = true)]
    stub: bool,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    output: Option<PathBuf>,
    /// Worker threads for `evaluate`.
    #[arg(long, global = true, value_name = "N")]
    parallel: Option<usize>,
    /// Rule relevance threshold in [-1, 1].
    #[arg(long, global = true, value_name = "T", allow_negative_numbers = true)]
    threshold: Option<f64>,
    /// Refinement steps after the coarse proposal.
    #[arg(long, global = true, value_name = "N")]
    steps: Option<u32>,
    /// Machine-readable output on stdout.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Analyze one image and write result.json, mask.png, overlay.png and trace.jsonl.
    Analyze { image: PathBuf },
    /// Evaluate a dataset directory and write report.json and report.txt.
    Evaluate { dataset: PathBuf },
    /// Show the similarity of every rule to an image and which rules are kept.
    Rules { image: PathBuf },
}

fn run(cli: Cli) -> anyhow::Result<()> {
    let flags = Overrides {
        config: cli.config,
        stub: cli.stub,
        output: cli.output,
        parallel: cli.parallel,
        threshold: cli.threshold,
        steps: cli.steps,
        json: cli.json,
    };
    match cli.command {
        Command::Analyze { image } => {
            let out = cmd_analyze(&image, &flags)?;
            if flags.json {
                println!("{}", serde_json::to_string_pretty(&out.result.document(None))?);
            } else {
                println!("label: {}", out.result.label.as_str());
                for f in &out.files {
                    println!("wrote {}", f.display());
                }
            }
        }
        Command::Evaluate { dataset } => {
            let out = cmd_evaluate(&dataset, &flags)?;
            if flags.json {
                print!("{}", out.report.to_json());
            } else {
                print!("{}", out.report.to_table());
                for f in &out.files {
                    println!("wrote {}", f.display());
                }
            }
        }
        Command::Rules { image } => {
            let out = cmd_rules(&image, &flags)?;
            print!("{}", if flags.json { out.to_json() } else { out.to_text() });
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(err) => {
            eprintln!("error: {}", render_error(&err));
            ExitCode::from(exit_code(&err))
        }
    }
}
