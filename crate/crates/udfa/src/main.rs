use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};
use udfa::config_io::load_config;
use udfa::data::{load_split, prepare_data, LoadOptions, SynthOptions};
use udfa::figures::figures;
use udfa::report::VolumeEvalReport;
use udfa::runner::{self, AblationGrid, EvalOptions, TrainOptions};
use udfa::{Result, UdfaError};
use udfa_core::{DatasetKind, RunConfig};

#[derive(Parser)]
#[command(name = "udfa", version, about = "U-DFA segmentation: data, training, evaluation, ablation, figures")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum DatasetArg {
    Synapse,
    Acdc,
    Synthetic,
}

impl From<DatasetArg> for DatasetKind {
    fn from(d: DatasetArg) -> Self {
        match d {
            DatasetArg::Synapse => DatasetKind::Synapse,
            DatasetArg::Acdc => DatasetKind::Acdc,
            DatasetArg::Synthetic => DatasetKind::Synthetic,
        }
    }
}

#[derive(clap::Args)]
struct ConfigArgs {
    /// Config file (`key = value` lines). Defaults apply when omitted.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override a key, e.g. `--set num_stages=2`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig> {
        match &self.config {
            Some(p) => load_config(p, &self.overrides),
            None => {
                let mut cfg = RunConfig::default();
                for o in &self.overrides {
                    cfg.apply_override(o)?;
                }
                cfg.resolve();
                cfg.validate()?;
                Ok(cfg)
            }
        }
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic root, or index a converted benchmark root and write its manifest.
    PrepareData {
        #[arg(long, value_enum)]
        dataset: DatasetArg,
        #[arg(long)]
        root: PathBuf,
        /// Synthetic only: number of cases.
        #[arg(long, default_value_t = 5)]
        cases: usize,
        /// Synthetic only: volume shape as D,H,W.
        #[arg(long, default_value = "8,64,64")]
        shape: String,
        #[arg(long, default_value_t = 3)]
        classes: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Train, then evaluate the selected checkpoint on the held-out volumes.
    Train {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Skip the evaluation after training.
        #[arg(long)]
        no_eval: bool,
    },
    /// Volume-wise evaluation of a checkpoint.
    Evaluate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Checkpoint stem, e.g. `runs/x/checkpoints/best`.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Report directory (defaults to `<output_dir>/eval`).
        #[arg(long)]
        out: Option<PathBuf>,
        /// Do not save per-case prediction volumes.
        #[arg(long)]
        no_predictions: bool,
        /// Write attention weights of one slice to this npz file.
        #[arg(long)]
        attention_dump: Option<PathBuf>,
    },
    /// Stage-count and input-size ablation.
    Ablate {
        #[command(flatten)]
        cfg: ConfigArgs,
        /// Axis values, e.g. `n_lgfa=2,3,6` or `input=224,308`. Repeatable.
        #[arg(long)]
        grid: Vec<String>,
        /// Only build each variant and check its shapes.
        #[arg(long)]
        structure_only: bool,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Overlay panels and a per-class DSC chart from an evaluation report.
    Figures {
        /// `report.json` written by `evaluate`.
        #[arg(long)]
        report: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

fn parse_shape(s: &str) -> Result<(usize, usize, usize)> {
    let v: Vec<usize> = s.split(',').filter_map(|x| x.trim().parse().ok()).collect();
    match v[..] {
        [d, h, w] if d > 0 && h > 0 && w > 0 => Ok((d, h, w)),
        _ => Err(UdfaError::Config(udfa_core::ConfigError::InvalidValue {
            key: "shape".into(),
            value: s.into(),
            reason: "expected D,H,W".into(),
        })),
    }
}

fn load_data(cfg: &RunConfig) -> Result<udfa_core::SplitData> {
    let opts = LoadOptions {
        verify_checksums: true,
        train_resize: Some((cfg.model.height(), cfg.model.width())),
    };
    load_split(cfg.train.dataset, Path::new(&cfg.train.data_root), &opts)
}

fn eval_and_write(
    model: &udfa::UDfa,
    cfg: &RunConfig,
    volumes: &[udfa_core::VolumeSample],
    out: &Path,
    save_predictions: bool,
    attention_dump: Option<PathBuf>,
) -> Result<()> {
    let opts = EvalOptions {
        prediction_dir: save_predictions.then(|| out.join("predictions")),
        attention_dump,
        batch_size: cfg.train.batch_size,
    };
    let report = runner::evaluate(model, volumes, cfg.train.dataset, &opts)?;
    let path = report.write(out)?;
    print!("{}", report.to_text_table());
    println!("report written to {}", path.display());
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::PrepareData {
            dataset,
            root,
            cases,
            shape,
            classes,
            seed,
        } => {
            let synth = SynthOptions {
                num_cases: cases,
                shape: parse_shape(&shape)?,
                num_classes: classes,
                seed,
            };
            let m = prepare_data(dataset.into(), &root, &synth)?;
            println!("{} files indexed in {}", m.files.len(), root.join(udfa::data::MANIFEST_FILE).display());
        }
        Command::Train { cfg, no_eval } => {
            let cfg = cfg.load()?;
            let split = load_data(&cfg)?;
            let out = PathBuf::from(&cfg.train.output_dir);
            let outcome = runner::train(&cfg, &split, &out, &TrainOptions::default())?;
            let last = outcome.history.last();
            println!(
                "trained {} iterations over {} epochs; final loss {:.4}",
                outcome.iterations(),
                outcome.epochs,
                last.map_or(f64::NAN, |r| r.loss.total)
            );
            if !no_eval {
                let model = match &outcome.selected_checkpoint {
                    Some(stem) => runner::load_model(&cfg, stem)?,
                    None => outcome.model,
                };
                eval_and_write(&model, &cfg, &split.eval, &out.join("eval"), true, None)?;
            }
        }
        Command::Evaluate {
            cfg,
            checkpoint,
            out,
            no_predictions,
            attention_dump,
        } => {
            let cfg = cfg.load()?;
            let split = load_data(&cfg)?;
            let model = runner::load_model(&cfg, &checkpoint)?;
            let out = out.unwrap_or_else(|| Path::new(&cfg.train.output_dir).join("eval"));
            eval_and_write(&model, &cfg, &split.eval, &out, !no_predictions, attention_dump)?;
        }
        Command::Ablate {
            cfg,
            grid,
            structure_only,
            out,
        } => {
            let cfg = cfg.load()?;
            let grid = AblationGrid::parse(&grid, &cfg.model)?;
            let split = if structure_only { None } else { Some(load_data(&cfg)?) };
            let out = out.unwrap_or_else(|| Path::new(&cfg.train.output_dir).join("ablation"));
            let rows = runner::ablate(&cfg, &grid, split.as_ref(), structure_only, &out)?;
            print!("{}", runner::ablation_table(&rows));
        }
        Command::Figures { report, out } => {
            let report = VolumeEvalReport::read(&report)?;
            let files = figures(&report, &out)?;
            if files.is_empty() {
                println!("report has no cases; nothing to draw");
            }
            for f in files {
                println!("{}", f.display());
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
