use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Parser, Subcommand, ValueEnum};

use nightvis::commands::{cmd_dnb, cmd_evaluate, cmd_retrieve, cmd_rgb, cmd_synth, cmd_train, DnbArgs, RetrieveInput};
use nightvis::config::RunConfig;
use nightvis::train::TrainMode;
use nightvis::Result;

#[derive(Parser)]
#[command(name = "nightvis", version, about = "Visible reflectance retrieval from thermal-infrared imagery")]
struct Cli {
    /// JSON run configuration; defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides the configured seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    Diffusion,
    Baseline,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic paired dataset and its manifest.
    Synth {
        #[arg(long)]
        out: PathBuf,
        /// Number of tile pairs.
        #[arg(long)]
        n: Option<usize>,
        #[arg(long)]
        force: bool,
    },
    /// Train the diffusion model or the regression baseline.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_enum, default_value = "diffusion")]
        mode: Mode,
        /// Continue from the state in --out.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        force: bool,
    },
    /// Sample ensembles and write members, mean and std tiles.
    Retrieve {
        /// Checkpoint file or training directory.
        #[arg(long)]
        checkpoint: PathBuf,
        /// Dataset directory; every test tile is retrieved.
        #[arg(long, conflicts_with = "cond", required_unless_present = "cond")]
        data: Option<PathBuf>,
        /// A single condition tile or scene.
        #[arg(long)]
        cond: Option<PathBuf>,
        /// Cut --cond into model tiles with this stride and stitch the results.
        #[arg(long, requires = "cond")]
        stitch: Option<usize>,
        #[arg(long)]
        out: PathBuf,
        /// Ensemble members (default from config).
        #[arg(long)]
        n: Option<usize>,
        /// Keep tiles that are already complete.
        #[arg(long)]
        resume: bool,
        #[arg(long)]
        force: bool,
    },
    /// Score predictions: per-band metrics, size sweep and coverage CSVs.
    Evaluate {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, value_delimiter = ',')]
        sizes: Option<Vec<usize>>,
        #[arg(long)]
        force: bool,
    },
    /// True-colour PNG of a reflectance tile.
    Rgb {
        #[arg(long)]
        tile: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
    /// Lunar reflectance and DNB-adjusted retrieval.
    Dnb {
        #[arg(long)]
        reflectance: PathBuf,
        #[arg(long)]
        radiance: PathBuf,
        /// Directory with dnb.csv, agri_065.csv, agri_0825.csv, lunar_irradiance.csv.
        #[arg(long)]
        curves: PathBuf,
        #[arg(long)]
        lunar_zenith: f64,
        /// Band-integrated lunar irradiance (W m^-2).
        #[arg(long)]
        irradiance: f64,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        force: bool,
    },
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(p) => RunConfig::read(p)?,
        None => RunConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    match cli.command {
        Command::Synth { out, n, force } => {
            if let Some(n) = n {
                cfg.dataset.n = n;
            }
            cfg.validate()?;
            let m = cmd_synth(&cfg, &out, force)?;
            println!("wrote {} tile pairs to {}", m.entries.len(), out.display());
        }
        Command::Train { data, out, mode, resume, force } => {
            let mode = match mode {
                Mode::Diffusion => TrainMode::Diffusion,
                Mode::Baseline => TrainMode::RegressionBaseline,
            };
            let state = cmd_train(&cfg, mode, &data, &out, force, resume)?;
            println!("trained {} steps, final loss {:.6}", state.step, state.losses.last().copied().unwrap_or(f64::NAN));
        }
        Command::Retrieve { checkpoint, data, cond, stitch, out, n, resume, force } => {
            let input = match (data, cond) {
                (Some(d), _) => RetrieveInput::Dataset(d),
                (None, Some(path)) => RetrieveInput::Scene { path, stitch },
                (None, None) => unreachable!("clap requires one input"),
            };
            cmd_retrieve(&cfg, &checkpoint, &input, &out, n.unwrap_or(cfg.ensemble_size), force, resume)?;
            println!("wrote ensembles to {}", out.display());
        }
        Command::Evaluate { data, pred, out, sizes, force } => {
            let ev = cmd_evaluate(&cfg, &data, &pred, &out, sizes.as_deref(), force)?;
            println!("band     mae      rmse     ssim     psnr");
            for r in &ev.report.rows {
                println!("{:<8} {:.5}  {:.5}  {:.5}  {:.3}", r.band, r.mae, r.rmse, r.ssim, r.psnr);
            }
        }
        Command::Rgb { tile, out, force } => {
            cmd_rgb(&tile, &out, force)?;
            println!("wrote {}", out.display());
        }
        Command::Dnb { reflectance, radiance, curves, lunar_zenith, irradiance, out, force } => {
            let args = DnbArgs {
                reflectance,
                radiance,
                curves,
                lunar_zenith_deg: lunar_zenith,
                irradiance,
            };
            let (w065, w0825) = cmd_dnb(&args, &out, force)?;
            println!("w_0.65 = {w065:.6}, w_0.825 = {w0825:.6}; wrote {}", out.display());
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
