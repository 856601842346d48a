use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use sam_ctr::commands::{self, Command, Overrides, RunConfig};
use sam_ctr::equivalence::Proposition;
use sam_ctr::{Error, ModelKind};

#[derive(Parser, Debug)]
#[command(
    name = "sam-ctr",
    version,
    about = "Feature-interaction models for CTR prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Sub,
    #[command(flatten)]
    global: Global,
}

#[derive(Args, Debug)]
struct Global {
    /// JSON run configuration; flags override its values.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    model: Option<String>,
    #[arg(long, global = true)]
    data: Option<PathBuf>,
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    #[arg(long, global = true)]
    d: Option<usize>,
    #[arg(long, global = true)]
    layers: Option<usize>,
    #[arg(long, global = true)]
    min_count: Option<usize>,
    #[arg(long, global = true)]
    lr: Option<f64>,
    #[arg(long, global = true)]
    batch: Option<usize>,
    #[arg(long, global = true)]
    l2: Option<f64>,
    #[arg(long, global = true)]
    dropout: Option<f64>,
    #[arg(long, global = true)]
    epochs: Option<usize>,
    #[arg(long, global = true)]
    patience: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Sub {
    /// Encode a raw delimited file into train/valid/test splits.
    Prepare {
        #[arg(long)]
        delimiter: Option<char>,
    },
    /// Sample a labeled dataset from the discrete choice model.
    Generate {
        #[arg(long)]
        samples: Option<usize>,
        #[arg(long)]
        noise: Option<f64>,
    },
    /// Train one model and save the best-validation checkpoint.
    Train,
    /// Score a saved model on the validation and test splits.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long)]
        n: Option<usize>,
        /// Perturb one analytic gradient entry by this amount.
        #[arg(long)]
        corrupt: Option<f64>,
    },
    /// Verify the parameter lifts between model families.
    Equivalence {
        /// prop1, prop2, prop3, chain or negative; all when omitted.
        #[arg(long)]
        prop: Option<String>,
        #[arg(long)]
        trials: Option<usize>,
        #[arg(long)]
        tol: Option<f64>,
    },
    /// Parameter and multiply-add counts.
    Complexity {
        #[arg(long)]
        n: Option<usize>,
        /// Sweep the full grid and write a CSV.
        #[arg(long)]
        grid: bool,
    },
    /// Train SAM3 for each layer count and tabulate the metrics.
    Ablation {
        /// Comma-separated layer counts.
        #[arg(long, value_delimiter = ',')]
        layer_range: Option<Vec<usize>>,
    },
}

fn resolve(cli: &Cli) -> Result<(Command, RunConfig), Error> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    let cmd = match &cli.command {
        Sub::Prepare { delimiter } => {
            if let Some(c) = delimiter {
                cfg.prepare.delimiter = *c;
            }
            Command::Prepare
        }
        Sub::Generate { samples, noise } => {
            cfg.generate.samples = samples.unwrap_or(cfg.generate.samples);
            cfg.generate.noise = noise.unwrap_or(cfg.generate.noise);
            Command::Generate
        }
        Sub::Train => Command::Train,
        Sub::Eval { checkpoint } => {
            if checkpoint.is_some() {
                cfg.checkpoint = checkpoint.clone();
            }
            Command::Eval
        }
        Sub::Gradcheck { n, corrupt } => {
            cfg.gradcheck.n = n.unwrap_or(cfg.gradcheck.n);
            if corrupt.is_some() {
                cfg.gradcheck.corrupt = *corrupt;
            }
            Command::Gradcheck
        }
        Sub::Equivalence { prop, trials, tol } => {
            if let Some(p) = prop {
                cfg.equivalence.propositions = vec![p.parse::<Proposition>()?];
            }
            cfg.equivalence.trials = trials.unwrap_or(cfg.equivalence.trials);
            cfg.equivalence.tol = tol.unwrap_or(cfg.equivalence.tol);
            Command::Equivalence
        }
        Sub::Complexity { n, grid } => {
            cfg.complexity.n = n.unwrap_or(cfg.complexity.n);
            cfg.complexity.grid |= grid;
            Command::Complexity
        }
        Sub::Ablation { layer_range } => {
            if let Some(r) = layer_range {
                cfg.ablation.layers = r.clone();
            }
            Command::Ablation
        }
    };
    let overrides = Overrides {
        seed: g.seed,
        model: g
            .model
            .as_deref()
            .map(str::parse::<ModelKind>)
            .transpose()?,
        data: g.data.clone(),
        out: g.out.clone(),
        d: g.d,
        layers: g.layers,
        min_count: g.min_count,
        lr: g.lr,
        batch: g.batch,
        l2: g.l2,
        dropout: g.dropout,
        epochs: g.epochs,
        patience: g.patience,
    };
    overrides.apply(cmd, &mut cfg)?;
    Ok((cmd, cfg))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = resolve(&cli).and_then(|(cmd, cfg)| commands::run(cmd, &cfg));
    match result {
        Ok(out) => {
            println!(
                "{}",
                serde_json::to_string_pretty(&out.summary).unwrap_or_default()
            );
            ExitCode::SUCCESS
        }
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
