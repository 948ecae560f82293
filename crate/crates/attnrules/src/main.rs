// SPDX-License-Identifier: MIT OR Apache-2.0

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;

use attnrules::pipeline::{cmd_eval, cmd_extract, cmd_intervene, cmd_synth, cmd_train_sae, cmd_verify};
use attnrules::server::{serve, ApiSession};
use attnrules::{PipelineError, Result, RunConfig};
use clap::{Args, Parser, Subcommand};

#[derive(Parser)]
#[command(name = "attnrules", version, about = "Extract and evaluate skip-gram rules for attention-head SAE features")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Plant rules in a synthetic model and generate its corpus.
    Synth(StageArgs),
    /// Train (or import) the input and output dictionaries.
    TrainSae(StageArgs),
    /// Index activations, build exemplar datasets and extract rules.
    Extract(StageArgs),
    /// Score the rules and write reports.
    Eval(StageArgs),
    /// Prepend a token to top exemplars and record the activation.
    Intervene(StageArgs),
    /// Serve the run over HTTP.
    Serve(StageArgs),
    /// Check every artifact against the manifest.
    Verify(StageArgs),
}

#[derive(Args)]
struct StageArgs {
    /// TOML run configuration.
    #[arg(long)]
    config: Option<PathBuf>,
    /// `--section.key value` overrides, applied after the file.
    #[arg(trailing_var_arg = true, allow_hyphen_values = true, value_name = "--SECTION.KEY VALUE")]
    overrides: Vec<String>,
}

impl StageArgs {
    fn load(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.overrides)
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth(a) => cmd_synth(&a.load()?).map(drop),
        Command::TrainSae(a) => cmd_train_sae(&a.load()?),
        Command::Extract(a) => {
            let s = cmd_extract(&a.load()?)?;
            for (j, why) in &s.ineligible {
                log::info!("feature {j} skipped: {why}");
            }
            Ok(())
        }
        Command::Eval(a) => {
            let rows = cmd_eval(&a.load()?)?;
            for r in &rows {
                println!(
                    "L{}H{}.{}\t{}\ttop_n={}\tP={:.3}\tR={:.3}\tF1={:.3}",
                    r.layer, r.head, r.feature, r.method, r.top_n, r.precision, r.recall, r.f1
                );
            }
            Ok(())
        }
        Command::Intervene(a) => {
            let r = cmd_intervene(&a.load()?)?;
            for (n, m) in r.means.iter().enumerate() {
                println!("{}\t{}\trepeats={n}\tmean={m:.6}", r.feature, r.token);
            }
            Ok(())
        }
        Command::Serve(a) => {
            let cfg = a.load()?;
            let addr: SocketAddr = format!("{}:{}", cfg.serve.bind, cfg.serve.port)
                .parse()
                .map_err(|e| PipelineError::Config(format!("serve address: {e}")))?;
            let session = ApiSession::load(&cfg.run.dir, cfg.head()?, cfg.serve.sample)?;
            let rt = tokio::runtime::Runtime::new()?;
            rt.block_on(serve(session, addr, cfg.serve.static_dir.as_deref()))
        }
        Command::Verify(a) => {
            // Only the run directory matters here, so skip full validation.
            let cfg = RunConfig::load_unvalidated(a.config.as_deref(), &a.overrides)?;
            let n = cmd_verify(&cfg.run.dir)?;
            println!("ok: {n} artifacts verified");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("ATTNRULES_LOG", "info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
