use std::io::Write;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use damoe_core::harness::{
    compare_runs, evaluate, export_importance, generate_sentiment, records_to_csv, route_trace, train, DataSource,
    RunConfig, SplitChoice,
};
use damoe_core::model::load_checkpoint;
use damoe_core::{Error, Result};

#[derive(Parser)]
#[command(name = "damoe", version, about = "Train and inspect attention-routed mixture-of-experts models")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train a model from a key = value config file.
    Train {
        #[arg(long)]
        config: PathBuf,
        /// Directory for metrics, checkpoint and summary.
        #[arg(long)]
        out: PathBuf,
    },
    /// Evaluate a checkpoint (perplexity, or accuracy and F1).
    Eval {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
    },
    /// Per-token importance, expert count and routing for one input.
    Importance {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        text: String,
        /// JSON output (the default).
        #[arg(long, conflicts_with = "csv")]
        json: bool,
        #[arg(long)]
        csv: bool,
        /// Also write every block's attention weights to this JSON file.
        #[arg(long)]
        dump_attention: Option<PathBuf>,
    },
    /// Side-by-side final losses of several metrics files.
    Compare {
        #[arg(required = true, num_args = 1..)]
        files: Vec<PathBuf>,
        #[arg(long)]
        json: bool,
    },
    /// Dump routing plans for every evaluation batch as JSON lines.
    RouteTrace {
        #[arg(long)]
        checkpoint: PathBuf,
        #[command(flatten)]
        data: DataArgs,
        /// Write here instead of stdout.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Write the synthetic sentiment dataset as `label<TAB>sentence` lines.
    MakeSentiment {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        count: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

#[derive(Args)]
struct DataArgs {
    /// A file, a directory, or `builtin:tempest` / `builtin:sentiment:<count>:<seed>`.
    #[arg(long)]
    data: String,
    /// Part of the data to use: valid, train or all.
    #[arg(long, default_value = "valid")]
    split: String,
}

impl DataArgs {
    fn resolve(&self) -> Result<(DataSource, SplitChoice)> {
        let split = SplitChoice::parse(&self.split)
            .ok_or_else(|| Error::Usage(format!("unknown split `{}`", self.split)))?;
        Ok((DataSource::parse(&self.data, None)?, split))
    }
}

fn to_json(v: &impl serde::Serialize) -> Result<String> {
    serde_json::to_string(v).map_err(|e| Error::Data(e.to_string()))
}

fn write_out(path: &PathBuf, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn run(cli: Cli) -> Result<()> {
    let mut stdout = std::io::stdout().lock();
    let mut emit = |s: &str| -> Result<()> { stdout.write_all(s.as_bytes()).map_err(|e| Error::io("<stdout>", e)) };
    match cli.command {
        Command::Train { config, out } => {
            let run = RunConfig::from_file(&config)?;
            let outcome = train(&run, Some(&out))?;
            let s = &outcome.summary;
            emit(&format!(
                "{}: {} steps, eval loss {:.4} -> {:.4}, written to {}\n",
                s.label,
                s.steps,
                s.initial.loss,
                s.final_.loss,
                out.display()
            ))?;
        }
        Command::Eval { checkpoint, data } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let (source, split) = data.resolve()?;
            let m = evaluate(&ckpt, &source, split)?;
            emit(&(to_json(&m)? + "\n"))?;
        }
        Command::Importance {
            checkpoint,
            text,
            json: _,
            csv,
            dump_attention,
        } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let export = export_importance(&ckpt, &text)?;
            if let Some(p) = dump_attention {
                write_out(&p, &to_json(&export.attention)?)?;
            }
            if csv {
                emit(&records_to_csv(&export.records)?)?;
            } else {
                emit(&(to_json(&export.records)? + "\n"))?;
            }
        }
        Command::Compare { files, json } => {
            let c = compare_runs(&files)?;
            if json {
                emit(&(to_json(&c)? + "\n"))?;
            } else {
                emit(&c.render())?;
            }
        }
        Command::RouteTrace { checkpoint, data, out } => {
            let ckpt = load_checkpoint(&checkpoint)?;
            let (source, split) = data.resolve()?;
            let records = route_trace(&ckpt, &source, split)?;
            let mut text = String::new();
            for r in &records {
                text.push_str(&to_json(r)?);
                text.push('\n');
            }
            match out {
                Some(p) => write_out(&p, &text)?,
                None => emit(&text)?,
            }
        }
        Command::MakeSentiment { out, count, seed } => {
            write_out(&out, &generate_sentiment(count, seed))?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 1 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
