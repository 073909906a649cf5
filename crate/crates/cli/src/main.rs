//! `reflgen`: simulate, preprocess, correct, train, predict and evaluate
//! reflectance models referenced to a downwelling spectrometer.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

#[derive(Parser)]
#[command(name = "reflgen", version, about = "Reflectance generation for UAV multispectral imagery with a downwelling spectrometer")]
struct Cli {
    #[command(flatten)]
    global: Global,

    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Args, Clone)]
pub struct Global {
    /// Seed for simulation, train/test splits and ELM reference draws
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Minimum solar altitude (deg) for training and rotation samples
    #[arg(long, global = true, default_value_t = 40.0, value_parser = parse_altitude)]
    pub min_altitude: f64,
    /// Max seconds between an MSI frame and its paired DS spectrum
    #[arg(long, global = true, default_value_t = 1.5, value_parser = parse_positive)]
    pub pair_tolerance: f64,
    /// Scenario JSON (location, bands, panels, condition); defaults apply when absent
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Print the file format specification and exit
    #[arg(long)]
    pub format_docs: bool,
    /// Report accuracies in percent
    #[arg(long, global = true)]
    pub percent: bool,
}

fn parse_altitude(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if (0.0..=90.0).contains(&v) { Ok(v) } else { Err(format!("{v} is outside [0, 90] deg")) }
}

fn parse_positive(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 { Ok(v) } else { Err(format!("{v} must be > 0")) }
}

fn parse_fraction(s: &str) -> Result<f64, String> {
    let v: f64 = s.parse().map_err(|_| format!("`{s}` is not a number"))?;
    if v > 0.0 && v < 1.0 { Ok(v) } else { Err(format!("{v} is outside (0, 1)")) }
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum ModelArg {
    Elm,
    Direct,
    Dls,
    Pcr,
    Mlr,
}

#[derive(Copy, Clone, PartialEq, Eq, ValueEnum)]
pub enum ModeArg {
    BandAveraged,
    PerBand,
}

#[derive(Subcommand)]
pub enum Command {
    /// Generate a synthetic dataset from a scenario
    Simulate {
        #[arg(long)]
        out: PathBuf,
        /// Seconds after the scenario start at which the rotation experiment begins
        #[arg(long, default_value_t = 3600.0)]
        rotation_at: f64,
        /// Dwell time per heading during the rotation experiment (s)
        #[arg(long, default_value_t = 10.0, value_parser = parse_positive)]
        rotation_dwell: f64,
        /// Full turns of 8 headings at 45 deg steps
        #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u32).range(1..))]
        rotation_cycles: u32,
    },
    /// Dark-subtract and exposure-normalize DS spectra and/or MSI cubes
    Preprocess {
        /// Raw DS spectrum series
        #[arg(long, requires = "ds_dark", requires = "out")]
        spectra: Option<PathBuf>,
        /// DS dark spectra (averaged per band)
        #[arg(long)]
        ds_dark: Option<PathBuf>,
        /// Normalized DS output
        #[arg(long)]
        out: Option<PathBuf>,
        /// Keep DS bands within this range (nm)
        #[arg(long, num_args = 2, value_names = ["LO", "HI"], default_values_t = [632.0, 935.0])]
        ds_range: Vec<f64>,
        /// Raw MSI cube headers
        #[arg(long, num_args = 1.., requires = "msi_dark", requires = "out_dir")]
        cubes: Vec<PathBuf>,
        /// MSI dark frame (averaged per band)
        #[arg(long)]
        msi_dark: Option<PathBuf>,
        /// Vignetting field to apply after normalization
        #[arg(long)]
        vignette: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
    /// Build a vignetting gain field from flat-field frames
    BuildVignette {
        #[arg(long, num_args = 1.., required = true)]
        frames: Vec<PathBuf>,
        #[arg(long)]
        msi_dark: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Extract shadow-masked panel means from normalized cubes
    SegmentPanels {
        #[arg(long, num_args = 1.., required = true)]
        cubes: Vec<PathBuf>,
        #[arg(long)]
        rois: PathBuf,
        /// Panel spec CSV providing the true reflectance
        #[arg(long)]
        panels: PathBuf,
        /// Band (nm) on which the shadow mask is computed
        #[arg(long, default_value_t = 796.0)]
        segment_band: f64,
        #[arg(long, default_value_t = 0.1)]
        rho: f64,
        #[arg(long, default_value_t = 15)]
        window: usize,
        /// Condition tag; defaults to the scenario's
        #[arg(long)]
        condition: Option<String>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Fit the heading-error sinusoid from a rotation experiment
    FitHeading {
        #[arg(long)]
        rotation: PathBuf,
        #[arg(long, default_value_t = 0.75, value_parser = parse_fraction)]
        span: f64,
        #[arg(long, default_value_t = 2, value_parser = clap::value_parser!(u8).range(0..=2))]
        degree: u8,
        #[arg(long, default_value_t = 10)]
        backfit: usize,
        /// Drop samples within this many seconds after each heading change
        #[arg(long, default_value_t = 0.0)]
        settle: f64,
        #[arg(long, value_enum, default_value_t = ModeArg::BandAveraged)]
        mode: ModeArg,
        #[arg(long)]
        out: PathBuf,
    },
    /// Remove the heading error from DS spectra
    ApplyHeading {
        #[arg(long)]
        spectra: PathBuf,
        #[arg(long)]
        heading: PathBuf,
        /// UAV heading during acquisition (deg)
        #[arg(long, default_value_t = 0.0)]
        uav_heading: f64,
        #[arg(long, value_enum)]
        mode: Option<ModeArg>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Pair, gate, split and fit a reflectance model
    Train {
        #[arg(long)]
        observations: PathBuf,
        #[arg(long)]
        spectra: PathBuf,
        #[arg(long, value_enum)]
        model: ModelArg,
        /// Principal components kept (pcr)
        #[arg(long, default_value_t = 4)]
        k: usize,
        /// Integration window centres in nm (mlr)
        #[arg(long, value_delimiter = ',', default_values_t = reflgen::models::MLR_BANDS_NM)]
        bands: Vec<f64>,
        /// Integration window width in nm (mlr)
        #[arg(long, default_value_t = 30.0, value_parser = parse_positive)]
        bandwidth: f64,
        /// Max distance (nm) to a matching DS band (direct)
        #[arg(long, default_value_t = 10.0, value_parser = parse_positive)]
        coverage: f64,
        #[arg(long, default_value_t = 0.8, value_parser = parse_fraction)]
        train_fraction: f64,
        /// Heading correction applied to spectra before pairing and stored in the model
        #[arg(long)]
        heading: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        uav_heading: f64,
        #[arg(long)]
        out: PathBuf,
        /// Write the held-out observations here
        #[arg(long)]
        test_out: Option<PathBuf>,
    },
    /// Exhaustive MLR band-subset search
    BandSelect {
        #[arg(long)]
        observations: PathBuf,
        #[arg(long)]
        spectra: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = reflgen::models::CANDIDATE_BANDS_NM)]
        candidates: Vec<f64>,
        #[arg(long, default_value_t = 30.0, value_parser = parse_positive)]
        bandwidth: f64,
        #[arg(long, default_value_t = 0.8, value_parser = parse_fraction)]
        train_fraction: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Apply a model to panel observations or a cube
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long, required_unless_present = "cube")]
        observations: Option<PathBuf>,
        #[arg(long)]
        spectra: Option<PathBuf>,
        #[arg(long, requires = "out_cube")]
        cube: Option<PathBuf>,
        #[arg(long)]
        out_cube: Option<PathBuf>,
        #[arg(long, default_value_t = 0.0)]
        uav_heading: f64,
        #[arg(long, required_unless_present = "cube")]
        out: Option<PathBuf>,
    },
    /// Compare models on held-out observations
    Evaluate {
        #[arg(long, num_args = 1.., required = true)]
        models: Vec<PathBuf>,
        #[arg(long)]
        observations: PathBuf,
        #[arg(long)]
        spectra: PathBuf,
        /// Panel frames from which per-target ELM references are drawn
        #[arg(long)]
        elm_references: Option<PathBuf>,
        #[arg(long, default_value_t = 900.0, value_parser = parse_positive)]
        elm_window: f64,
        #[arg(long, default_value_t = 0.0)]
        uav_heading: f64,
        #[arg(long)]
        out: PathBuf,
    },
    /// NDVI and DVI from reflectance rows or a reflectance cube
    Indices {
        #[arg(long, required_unless_present = "cube")]
        reflectance: Option<PathBuf>,
        #[arg(long, requires = "out_dir")]
        cube: Option<PathBuf>,
        #[arg(long, default_value_t = 679.0)]
        red: f64,
        #[arg(long, default_value_t = 796.0)]
        nir: f64,
        #[arg(long, required_unless_present = "cube")]
        out: Option<PathBuf>,
        #[arg(long)]
        out_dir: Option<PathBuf>,
    },
}

fn error_line(e: &anyhow::Error) -> String {
    let kind = if let Some(c) = e.chain().find_map(|c| c.downcast_ref::<reflgen::Error>()) {
        c.kind()
    } else if e.chain().any(|c| c.is::<commands::UsageError>()) {
        "Usage"
    } else {
        "Io"
    };
    serde_json::json!({ "kind": kind, "message": format!("{e:#}") }).to_string()
}

fn usage_line(message: &str) -> String {
    serde_json::json!({ "kind": "Usage", "message": message }).to_string()
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if !e.use_stderr() => e.exit(),
        Err(e) => {
            let text = e.render().to_string();
            let detail: Vec<&str> = text
                .lines()
                .map(str::trim)
                .filter(|l| !l.is_empty() && !l.starts_with("Usage:") && !l.starts_with("For more information"))
                .map(|l| l.strip_prefix("error: ").unwrap_or(l))
                .collect();
            eprintln!("error: {}", usage_line(&detail.join(" ")));
            return ExitCode::from(2);
        }
    };
    if cli.global.format_docs {
        print!("{}", reflgen::io::FORMAT_DOCS);
        return ExitCode::SUCCESS;
    }
    let Some(command) = cli.command else {
        eprintln!("error: {}", usage_line("no subcommand given; see --help"));
        return ExitCode::from(2);
    };
    match commands::run(&cli.global, command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {}", error_line(&e));
            ExitCode::FAILURE
        }
    }
}
