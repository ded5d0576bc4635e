use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use railtrace::config::{Overrides, PipelineConfig};
use railtrace::pipeline::{cmd_evaluate, cmd_infer, cmd_report, cmd_simulate, init_threads, Evaluation};
use railtrace::Result;

#[derive(Parser)]
#[command(name = "railtrace", version, about = "Passenger trajectory reconstruction from AFC and AVL logs")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic scenario with ground truth.
    Simulate(Common),
    /// Infer trains and itineraries.
    Infer(Common),
    /// Infer, then score against ground truth and the nearest-train baseline.
    Evaluate(Common),
    /// Evaluate and write plot data.
    Report(Common),
}

#[derive(Args)]
struct Common {
    /// Pipeline config JSON.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: Option<PathBuf>,
    #[arg(long)]
    threads: Option<usize>,
}

impl Common {
    fn resolve(&self) -> Result<PipelineConfig> {
        let mut cfg = match &self.config {
            Some(p) => PipelineConfig::load(p)?,
            None => PipelineConfig::default(),
        };
        cfg.apply(&Overrides {
            seed: self.seed,
            out: self.out.clone(),
            threads: self.threads,
        });
        Ok(cfg)
    }
}

fn print_eval(ev: &Evaluation) {
    let (a, b) = (&ev.doc.inferred, &ev.doc.baseline);
    println!("segments scored     {}", a.samples);
    println!("accuracy            {:.4}  (baseline {:.4})", a.accuracy, b.accuracy);
    println!("journey accuracy    {:.4}  (baseline {:.4})", a.journey_accuracy, b.journey_accuracy);
    println!("macro F1            {:.4}  (baseline {:.4})", a.macro_avg.f1, b.macro_avg.f1);
    for s in &a.per_segment {
        println!("  {:<20} n={:<6} accuracy {:.4}", s.key, s.samples, s.accuracy);
    }
    println!("left-behind match   {:.4}", a.left_behind.passenger_rate());
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Simulate(c) => {
            let cfg = c.resolve()?;
            init_threads(cfg.threads);
            let s = cmd_simulate(&cfg)?;
            println!("{} passengers, {} dropped -> {}", s.passengers, s.dropped, cfg.output_dir.display());
        }
        Command::Infer(c) => {
            let cfg = c.resolve()?;
            init_threads(cfg.threads);
            let out = cmd_infer(&cfg)?;
            println!(
                "{} itineraries, {} rejects -> {}",
                out.itineraries.len(),
                out.rejects.len(),
                cfg.output_dir.display()
            );
        }
        Command::Evaluate(c) => {
            let cfg = c.resolve()?;
            init_threads(cfg.threads);
            print_eval(&cmd_evaluate(&cfg)?);
        }
        Command::Report(c) => {
            let cfg = c.resolve()?;
            init_threads(cfg.threads);
            print_eval(&cmd_report(&cfg)?);
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
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
