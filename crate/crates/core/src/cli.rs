//! Command-line front end. Human-readable tables go to stdout, CSV artifacts
//! to the output directory, and failures to stderr as `ERROR <code>: ...`.

use std::ffi::OsString;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::config::KeyValues;
use crate::conv::smooth;
use crate::error::{Error, Result};
use crate::filter::{build_filter, fwhm_mm_to_sigma, sigma_to_fwhm_mm, DEFAULT_TRUNCATION};
use crate::io::{read_volume, write_volume};
use crate::manifest::{Dataset, Split};
use crate::params_net::{calibrated_noise_estimate, noise_feature};
use crate::phantom::{generate, PhantomSpec};
use crate::trainer::{self, TrainConfig};
use crate::volume::{add_gaussian_noise, DEFAULT_VOXEL_SIZE_MM};

#[derive(Debug, Parser)]
#[command(name = "adasmooth", version, about = "Adaptive Gaussian smoothing for volume decoding")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a two-class phantom dataset.
    GenPhantom {
        /// `key = value` overrides of the phantom defaults.
        #[arg(long)]
        spec: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Add iid Gaussian noise to a volume.
    AddNoise {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        sigma: f64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the raw Laplacian noise feature and the calibrated estimate.
    EstimateNoise {
        #[arg(long = "in")]
        input: PathBuf,
    },
    /// Smooth a volume with a fixed Gaussian.
    Smooth {
        #[arg(long = "in")]
        input: PathBuf,
        #[command(flatten)]
        width: Width,
        /// Voxel size used to convert --fwhm-mm; defaults to the volume's own.
        #[arg(long, requires = "fwhm_mm")]
        voxel_mm: Option<f64>,
        #[arg(long, default_value_t = DEFAULT_TRUNCATION)]
        t: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train the adaptive model (or a fixed-width baseline).
    Train(TrainArgs),
    /// Train over the learning-rate x L2 grid and report every cell.
    GridSearch(TrainArgs),
    /// Per-noise accuracy table of saved weights.
    Evaluate {
        #[arg(long)]
        weights: PathBuf,
        #[arg(long)]
        data: PathBuf,
        /// Bypass the params net and smooth every volume at this FWHM.
        #[arg(long)]
        fixed_fwhm_mm: Option<f64>,
        #[arg(long, default_value = "test")]
        split: Split,
        #[arg(long, default_value_t = DEFAULT_TRUNCATION)]
        t: f64,
        /// Also write the table as CSV here.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Print a filter and its FWHM.
    InspectFilter {
        #[arg(long)]
        sigma_f: f64,
        #[arg(long, default_value_t = DEFAULT_TRUNCATION)]
        t: f64,
        #[arg(long, default_value_t = DEFAULT_VOXEL_SIZE_MM)]
        voxel_mm: f64,
        /// Print every weight as well.
        #[arg(long)]
        dump: bool,
    },
}

#[derive(Debug, Args)]
#[group(required = true, multiple = false)]
pub struct Width {
    #[arg(long)]
    sigma_f: Option<f64>,
    #[arg(long)]
    fwhm_mm: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    lambda_l2: Option<f64>,
    #[arg(long)]
    max_epochs: Option<usize>,
    #[arg(long)]
    patience: Option<usize>,
    #[arg(long)]
    fixed_fwhm_mm: Option<f64>,
}

impl TrainArgs {
    fn resolve(&self) -> Result<TrainConfig> {
        let mut kv = match &self.config {
            Some(p) => KeyValues::read(p)?,
            None => KeyValues::default(),
        };
        if let Some(v) = self.seed {
            kv.set("seed", v);
        }
        if let Some(v) = self.learning_rate {
            kv.set("learning_rate", v);
        }
        if let Some(v) = self.lambda_l2 {
            kv.set("lambda_l2", v);
        }
        if let Some(v) = self.max_epochs {
            kv.set("max_epochs", v);
        }
        if let Some(v) = self.patience {
            kv.set("patience", v);
        }
        if let Some(v) = self.fixed_fwhm_mm {
            kv.set("fixed_fwhm_mm", v);
        }
        TrainConfig::from_config(&kv)
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn execute(command: Command) -> Result<()> {
    match command {
        Command::GenPhantom { spec, out, seed } => {
            let spec = match spec {
                Some(p) => PhantomSpec::from_config(&KeyValues::read(p)?)?,
                None => PhantomSpec::default(),
            };
            log::info!("phantom spec {spec:?}, seed {seed}");
            let phantom = generate(&spec, seed)?;
            create_dir(&out)?;
            phantom.dataset.save(&out)?;
            println!(
                "{} volumes written to {}",
                phantom.dataset.samples.len(),
                out.display()
            );
            println!("oracle accuracy (noiseless): {:.3}", phantom.report.oracle_accuracy);
            for (noise, snr) in &phantom.report.snr {
                println!("noise {noise}: amplitude / sigma = {snr:.3}");
            }
        }
        Command::AddNoise {
            input,
            sigma,
            seed,
            out,
        } => {
            log::info!("add-noise sigma {sigma}, seed {seed}");
            let v = read_volume(&input)?;
            write_volume(&add_gaussian_noise(&v, sigma, seed)?, &out)?;
        }
        Command::EstimateNoise { input } => {
            let v = read_volume(&input)?;
            println!("feature {:.6}", noise_feature(&v)?);
            println!("sigma_n {:.6}", calibrated_noise_estimate(&v)?);
        }
        Command::Smooth {
            input,
            width,
            voxel_mm,
            t,
            out,
        } => {
            let v = read_volume(&input)?;
            let sigma = match (width.sigma_f, width.fwhm_mm) {
                (Some(s), None) => s,
                (None, Some(f)) => fwhm_mm_to_sigma(f, voxel_mm.unwrap_or(v.voxel_size_mm()))?,
                _ => unreachable!("clap enforces exactly one width"),
            };
            log::info!("smooth sigma_f {sigma}, t {t}");
            let filter = build_filter(sigma, t)?;
            write_volume(&smooth(&v, &filter)?, &out)?;
        }
        Command::Train(args) => {
            let config = args.resolve()?;
            let dataset = Dataset::load_dir(&args.data)?;
            let (model, report) = trainer::train(&config, &dataset)?;
            create_dir(&args.out)?;
            trainer::save_model(&model, &args.out)?;
            report.write(&args.out)?;
            print!("{}", report.summary());
        }
        Command::GridSearch(args) => {
            let config = args.resolve()?;
            let dataset = Dataset::load_dir(&args.data)?;
            let result = trainer::grid_search(&config, &dataset)?;
            create_dir(&args.out)?;
            write_text(&args.out.join("grid.csv"), &result.to_csv())?;
            write_text(&args.out.join("config.cfg"), &config.to_text())?;
            println!("{:>10} {:>10} {:>8} {:>8}", "lr", "lambda", "val_acc", "val_loss");
            for r in &result.rows {
                match &r.error {
                    None => println!(
                        "{:>10} {:>10} {:>8.3} {:>8.4}",
                        r.learning_rate, r.lambda_l2, r.val_accuracy, r.val_loss
                    ),
                    Some(e) => println!("{:>10} {:>10} failed: {e}", r.learning_rate, r.lambda_l2),
                }
            }
            match result.best_row() {
                Some(b) => println!("best: lr {} lambda {}", b.learning_rate, b.lambda_l2),
                None => {
                    return Err(Error::Numerical("every grid cell failed".into()));
                }
            }
        }
        Command::Evaluate {
            weights,
            data,
            fixed_fwhm_mm,
            split,
            t,
            out,
        } => {
            let model = trainer::load_model(&weights)?;
            let dataset = Dataset::load_dir(&data)?;
            let voxel = dataset
                .samples
                .first()
                .map(|s| s.volume.voxel_size_mm())
                .unwrap_or(DEFAULT_VOXEL_SIZE_MM);
            let fixed = fixed_fwhm_mm.map(|f| fwhm_mm_to_sigma(f, voxel)).transpose()?;
            log::info!("evaluate split {split}, t {t}, fixed sigma {fixed:?}");
            let table = trainer::evaluate(&model, &dataset, split, t, fixed)?;
            print!("{}", table.to_text());
            if let Some(p) = out {
                write_text(&p, &table.to_csv())?;
            }
        }
        Command::InspectFilter {
            sigma_f,
            t,
            voxel_mm,
            dump,
        } => {
            let f = build_filter(sigma_f, t)?;
            println!("sigma_f {sigma_f} t {t} radius {} side {}", f.radius(), f.side());
            if f.is_single_cell() {
                println!("single-cell filter (identity)");
            }
            println!("fwhm_mm {:.4} (voxel {voxel_mm} mm)", sigma_to_fwhm_mm(sigma_f, voxel_mm)?);
            let sum: f64 = f.weights().iter().sum();
            println!("sum {sum:.17}");
            println!("profile {:?}", f.profile());
            if dump {
                print!("{}", f.dump());
            }
        }
    }
    Ok(())
}

/// Parses `argv`, runs the command and returns the process exit code.
pub fn run<I, T>(argv: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(argv) {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let msg = e.to_string();
            let mut lines = msg.lines();
            let first = lines.next().unwrap_or("").trim_start_matches("error: ");
            eprintln!("ERROR 1: {first}");
            for line in lines {
                eprintln!("{line}");
            }
            return 1;
        }
    };
    match execute(cli.command) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            eprintln!("ERROR {code}: {e}");
            code
        }
    }
}
