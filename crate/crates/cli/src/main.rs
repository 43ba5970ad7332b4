use std::path::PathBuf;

use anyhow::Result;
use clap::{Args, Parser, Subcommand};

use ictrace_cli::{cmd_eval, cmd_gen_data, cmd_report, cmd_sweep_interval, cmd_train, HarnessConfig, Subject};
use ictrace_core::Variant;

#[derive(Parser)]
#[command(name = "ictrace", version, about = "In-context imitation with visual reasoning traces")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Harness configuration file (`key = value` lines).
    #[arg(long)]
    config: Option<PathBuf>,
    /// Run root: sets `out.dir = DIR` and `data.dir = DIR/data`.
    #[arg(long)]
    out: Option<PathBuf>,
}

impl Common {
    fn load(&self) -> Result<HarnessConfig> {
        let mut cfg = match &self.config {
            Some(p) => HarnessConfig::load(p)?,
            None => HarnessConfig::default(),
        };
        if let Some(out) = &self.out {
            cfg.out_dir = out.clone();
            cfg.data_dir = out.join("data");
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Record expert demonstrations for every catalogue task and write the split.
    GenData {
        #[command(flatten)]
        common: Common,
        /// Data seed; overrides `data.seed`.
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Train checkpoints (every configured variant and seed unless narrowed).
    Train {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
    },
    /// Evaluate checkpoints on the held-out tasks.
    Eval {
        #[command(flatten)]
        common: Common,
        /// A model variant or `expert`.
        #[arg(long)]
        variant: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rollouts: Option<usize>,
    },
    /// Evaluate one variant at several reasoning intervals.
    SweepInterval {
        #[command(flatten)]
        common: Common,
        #[arg(long, default_value = "ours")]
        variant: String,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        rollouts: Option<usize>,
        /// Comma-separated intervals; 0 never decodes a trace.
        #[arg(long, value_delimiter = ',')]
        intervals: Option<Vec<usize>>,
    },
    /// Merge metrics tables into a report CSV and a text summary.
    Report {
        /// Metrics CSV files written by `eval` or `sweep-interval`.
        #[arg(required = true)]
        metrics: Vec<PathBuf>,
        #[arg(long, default_value = "report")]
        out: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::GenData { common, seed } => {
            let mut cfg = common.load()?;
            if let Some(s) = seed {
                cfg.data_seed = s;
            }
            let paths = cmd_gen_data(&cfg)?;
            println!("wrote {} and {}", paths.train.display(), paths.test.display());
        }
        Command::Train { common, variant, seed } => {
            let cfg = common.load()?;
            let variants = match variant {
                Some(v) => vec![Variant::parse(&v)?],
                None => cfg.variants.clone(),
            };
            let seeds = seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
            for p in cmd_train(&cfg, &variants, &seeds)? {
                println!("wrote {}", p.display());
            }
        }
        Command::Eval { common, variant, seed, rollouts } => {
            let mut cfg = common.load()?;
            if let Some(r) = rollouts {
                cfg.rollouts = r;
            }
            let subjects = match variant {
                Some(v) => vec![Subject::parse(&v)?],
                None => cfg.variants.iter().map(|&v| Subject::Model(v)).collect(),
            };
            let seeds = seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
            let records = cmd_eval(&cfg, &subjects, &seeds)?;
            println!("{} rollouts, mean score {:.3}", records.len(), ictrace_cli::eval::mean_score(&records));
        }
        Command::SweepInterval {
            common,
            variant,
            seed,
            rollouts,
            intervals,
        } => {
            let mut cfg = common.load()?;
            if let Some(r) = rollouts {
                cfg.rollouts = r;
            }
            let seeds = seed.map_or_else(|| cfg.seeds.clone(), |s| vec![s]);
            let intervals = intervals.unwrap_or_else(|| cfg.intervals.clone());
            let records = cmd_sweep_interval(&cfg, Subject::parse(&variant)?, &seeds, &intervals)?;
            println!("{} rollouts", records.len());
        }
        Command::Report { metrics, out } => {
            print!("{}", cmd_report(&metrics, &out)?);
        }
    }
    Ok(())
}
