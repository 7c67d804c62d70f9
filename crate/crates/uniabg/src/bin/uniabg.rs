//! Thin command-line front end over the library pipeline. All real work lives
//! in `uniabg::pipeline`; this binary only parses arguments, loads the config,
//! and maps errors to exit codes (2 for configuration/usage problems, 1 for
//! runtime failures).

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use uniabg::hgfc::VoteMode;
use uniabg::pipeline::{
    cmd_apv, cmd_associate, cmd_eval, cmd_pipeline, cmd_stage1, cmd_stage2, cmd_sweep, cmd_synth,
    PipelineConfig, SweepParam,
};
use uniabg::Error;

#[derive(Parser)]
#[command(name = "uniabg", version, about = "Dual-stage unsupervised cross-view geo-localization")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct CommonArgs {
    /// JSON pipeline configuration; defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Output directory for artifacts.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// Overrides the config seed (also moves the synthetic dataset).
    #[arg(long)]
    seed: Option<u64>,
    /// Overrides the graph neighborhood size.
    #[arg(long)]
    k: Option<usize>,
    /// Overrides the adversarial loss weight.
    #[arg(long)]
    lambda: Option<f64>,
    /// Overrides the vote pooling mode (instance | cluster).
    #[arg(long, value_parser = clap::value_parser!(VoteMode))]
    vote_mode: Option<VoteMode>,
}

impl CommonArgs {
    fn resolve(&self) -> Result<PipelineConfig, Error> {
        let mut config = match &self.config {
            Some(path) => PipelineConfig::load(path)?,
            None => PipelineConfig::default(),
        };
        config.apply_overrides(self.seed, self.k, self.lambda, self.vote_mode);
        config.validate()?;
        Ok(config)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate the synthetic benchmark into the output directory.
    Synth(CommonArgs),
    /// Recolor drone images toward pooled satellite statistics.
    Apv(CommonArgs),
    /// Run stage-1 training over the feature files in the output directory.
    Stage1(CommonArgs),
    /// Cluster with the stage-1 encoder and run graph-filtered association.
    Associate(CommonArgs),
    /// Train the stage-2 heads on the recorded associations.
    Stage2(CommonArgs),
    /// Score the stage-2 checkpoint against the manifest ground truth.
    Eval(CommonArgs),
    /// Full in-memory run; optionally the three-row ablation.
    Pipeline {
        #[command(flatten)]
        common: CommonArgs,
        /// Emit baseline / +hgfc / +vaab comparison rows.
        #[arg(long)]
        ablation: bool,
    },
    /// Sweep one hyperparameter (k: 1..4, lambda: 0.1..1.0).
    Sweep {
        #[command(flatten)]
        common: CommonArgs,
        /// Which parameter to sweep.
        #[arg(long, value_parser = clap::value_parser!(SweepParam))]
        param: SweepParam,
    },
}

fn run() -> Result<(), Error> {
    let cli = Cli::parse();
    match cli.command {
        Command::Synth(common) => {
            let config = common.resolve()?;
            cmd_synth(&config, &common.out)?;
            println!("synth: dataset written to {}", common.out.display());
        }
        Command::Apv(common) => {
            common.resolve()?;
            let summary = cmd_apv(&common.out)?;
            println!(
                "apv: {} images transferred, {} failed",
                summary.processed,
                summary.failures.len()
            );
            for f in &summary.failures {
                eprintln!("apv: `{}` failed: {}", f.id, f.error);
            }
        }
        Command::Stage1(common) => {
            let config = common.resolve()?;
            let result = cmd_stage1(&config, &common.out)?;
            let last = result.loss_trace.last();
            println!(
                "stage1: {} iterations, final contrastive loss {:.4}",
                result.loss_trace.len(),
                last.map(|t| t.losses.l_sat + t.losses.l_drone).unwrap_or(0.0)
            );
        }
        Command::Associate(common) => {
            let config = common.resolve()?;
            let assoc = cmd_associate(&config, &common.out)?;
            println!(
                "associate: {}/{} drones associated",
                assoc.associated_count(),
                assoc.assoc.len()
            );
        }
        Command::Stage2(common) => {
            let config = common.resolve()?;
            let result = cmd_stage2(&config, &common.out)?;
            println!("stage2: {} iterations", result.loss_trace.len());
        }
        Command::Eval(common) => {
            let config = common.resolve()?;
            let report = cmd_eval(&config, &common.out)?;
            println!(
                "eval: R@1 drone->satellite {:.4}, satellite->drone {:.4}",
                report.drone_to_satellite.recall_at_1, report.satellite_to_drone.recall_at_1
            );
        }
        Command::Pipeline { common, ablation } => {
            let config = common.resolve()?;
            let report = cmd_pipeline(&config, &common.out, ablation)?;
            for row in &report.rows {
                println!(
                    "pipeline[{}]: assoc_acc {} R@1 {:.4}",
                    row.label,
                    row.association_accuracy
                        .map(|a| format!("{a:.4}"))
                        .unwrap_or_else(|| "n/a".into()),
                    row.drone_to_satellite.recall_at_1
                );
            }
        }
        Command::Sweep { common, param } => {
            let config = common.resolve()?;
            let report = cmd_sweep(&config, &common.out, param)?;
            println!("sweep: {} rows written to {}", report.rows.len(), common.out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    match run() {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config(_) | Error::Param(_) | Error::Argument(_) => ExitCode::from(2),
                _ => ExitCode::from(1),
            }
        }
    }
}
