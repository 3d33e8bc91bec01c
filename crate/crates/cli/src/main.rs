use std::process::ExitCode;

use clap::Parser;
use rxconsensus_cli::args::{Cli, Command};
use rxconsensus_cli::{cmd_recommend, cmd_report, cmd_run, cmd_synthesize, CliError};

async fn dispatch(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Run(args) => {
            let summary = cmd_run(&args.into_plan()).await?;
            println!("{summary}");
            println!("report: {}", summary.report.display());
        }
        Command::Recommend(args) => {
            let r = cmd_recommend(&args.into_plan())?;
            println!("members: {}", r.members.join(", "));
            println!(
                "score {:.4} = {}*quality {:.4} - {}*disagreement {:.4} - {}*latency {:.4}",
                r.score,
                r.weights.alpha,
                r.components.quality,
                r.weights.beta,
                r.components.disagreement,
                r.weights.gamma,
                r.components.latency_penalty
            );
            if !r.missing_pairs.is_empty() {
                println!("pairs without shared grades: {:?}", r.missing_pairs);
            }
            println!("subsets evaluated: {}", r.subsets_evaluated);
        }
        Command::Report(args) => print!("{}", cmd_report(&args.into_plan())?),
        Command::Synthesize(args) => {
            let out = args.out.clone();
            let file = cmd_synthesize(&args.into_plan()).await?;
            println!("wrote {} unvalidated records to {}", file.records.len(), out.display());
        }
    }
    Ok(())
}

#[tokio::main]
async fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match dispatch(Cli::parse()).await {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
