use cardiocascade::app::{self, AppError, RunConfig};
use cardiocascade::dataset::{PhantomDims, PhantomSetSpec};
use clap::{Args, Parser, Subcommand};
use std::path::PathBuf;
use std::process::ExitCode;

#[derive(Parser)]
#[command(name = "cardiocascade", version, about = "Cardiac MRI segmentation and cascade pathology classification")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// Flat `key = value` config file.
    #[arg(long, short)]
    config: Option<PathBuf>,
    /// Override any config key; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, short)]
    output: Option<PathBuf>,
    /// Backend for all six segmentation roles.
    #[arg(long)]
    backend: Option<String>,
    /// Backend for all four classifiers.
    #[arg(long)]
    classifier: Option<String>,
    #[arg(long)]
    sigma_model: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    repetitions: Option<usize>,
    #[arg(long)]
    jobs: Option<usize>,
    /// test | train | all
    #[arg(long)]
    split: Option<String>,
    /// original | L | D | L+D | L+D+PP
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Subcommand)]
enum Command {
    /// Write per-case label volumes.
    Segment {
        #[command(flatten)]
        common: Common,
        /// Also write contour PNGs per slice.
        #[arg(long)]
        overlays: bool,
    },
    /// Predict a pathology class per case.
    Classify {
        #[command(flatten)]
        common: Common,
    },
    /// Repeated evaluation into report.json and report.csv.
    Evaluate {
        #[command(flatten)]
        common: Common,
        /// Add the pipeline ablation table.
        #[arg(long)]
        ablate: bool,
    },
    /// Fit the scale-to-sigma model on ground truth.
    CalibrateSigma {
        #[command(flatten)]
        common: Common,
        /// Comma-separated scale factors.
        #[arg(long)]
        scales: Option<String>,
    },
    /// Print the tables of a report.json.
    Report {
        #[command(flatten)]
        common: Common,
        report: Option<PathBuf>,
    },
    /// Generate a synthetic dataset tree.
    Phantoms {
        output: PathBuf,
        #[arg(long, default_value_t = 20)]
        train_per_class: usize,
        #[arg(long, default_value_t = 10)]
        test_per_class: usize,
        #[arg(long, default_value_t = 128)]
        size: usize,
        #[arg(long, default_value_t = 6)]
        slices: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
}

fn config(common: &Common, extra: Vec<(&str, String)>) -> Result<RunConfig, AppError> {
    let mut kv = common
        .set
        .iter()
        .map(|s| app::parse_override(s))
        .collect::<Result<Vec<_>, _>>()?;
    let path = |p: &Option<PathBuf>| p.as_ref().map(|p| p.display().to_string());
    let flags = [
        ("dataset", path(&common.dataset)),
        ("output", path(&common.output)),
        ("backend", common.backend.clone()),
        ("classifier", common.classifier.clone()),
        ("sigma_model", path(&common.sigma_model)),
        ("seed", common.seed.map(|v| v.to_string())),
        ("repetitions", common.repetitions.map(|v| v.to_string())),
        ("jobs", common.jobs.map(|v| v.to_string())),
        ("split", common.split.clone()),
        ("mode", common.mode.clone()),
    ];
    for (k, v) in flags {
        if let Some(v) = v {
            kv.push((k.to_string(), v));
        }
    }
    kv.extend(extra.into_iter().map(|(k, v)| (k.to_string(), v)));
    RunConfig::load(common.config.as_deref(), &kv)
}

fn report_failures(failures: &[cardiocascade::metrics::CaseFailure]) {
    for f in failures {
        eprintln!("failed {}: {}", f.case_id, f.message);
    }
}

fn run(cli: Cli) -> Result<i32, AppError> {
    match cli.command {
        Command::Segment { common, overlays } => {
            let extra = if overlays { vec![("overlays", "true".into())] } else { vec![] };
            let out = app::cmd_segment(&config(&common, extra)?)?;
            report_failures(&out.failures);
            println!("segmented {} cases, wrote {} files", out.cases, out.written.len());
            Ok(out.exit_code())
        }
        Command::Classify { common } => {
            let out = app::cmd_classify(&config(&common, vec![])?)?;
            report_failures(&out.failures);
            for p in &out.predictions {
                println!("{} {} -> {}", p.case_id, p.truth.name(), p.predicted.name());
            }
            if let Some(a) = out.accuracy() {
                println!("accuracy {a:.4}");
            }
            Ok(out.exit_code())
        }
        Command::Evaluate { common, ablate } => {
            let extra = if ablate { vec![("ablate", "true".into())] } else { vec![] };
            let out = app::cmd_evaluate(&config(&common, extra)?)?;
            print!("{}", app::render_report(&out.report));
            println!("\nwrote {} and {}", out.json_path.display(), out.csv_path.display());
            Ok(out.exit_code())
        }
        Command::CalibrateSigma { common, scales } => {
            let extra = scales.map(|s| vec![("calibration_scales", s)]).unwrap_or_default();
            let out = app::cmd_calibrate_sigma(&config(&common, extra)?)?;
            report_failures(&out.failures);
            let m = &out.calibration.model;
            println!(
                "sigma = {:.4} * scale + {:.4} over {} points, wrote {}",
                m.slope,
                m.intercept,
                out.calibration.points.len(),
                out.path.display()
            );
            Ok(out.exit_code())
        }
        Command::Report { common, report } => {
            let extra = report.map(|p| vec![("report", p.display().to_string())]).unwrap_or_default();
            print!("{}", app::cmd_report(&config(&common, extra)?)?);
            Ok(0)
        }
        Command::Phantoms {
            output,
            train_per_class,
            test_per_class,
            size,
            slices,
            seed,
        } => {
            let spec = PhantomSetSpec {
                train_per_class,
                test_per_class,
                dims: PhantomDims {
                    width: size,
                    height: size,
                    slices,
                },
                seed,
            };
            let n = app::cmd_phantoms(&output, &spec)?;
            println!("wrote {n} cases to {}", output.display());
            Ok(0)
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match run(Cli::parse()) {
        Ok(code) => ExitCode::from(code as u8),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}
