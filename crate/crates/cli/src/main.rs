use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};

use mbfusion::eval::run_fusion_experiment;
use mbfusion::manifest::Manifest;
use mbfusion::pipeline;
use mbfusion::prep::Modality;
use mbfusion::{PipelineConfig, MODEL_FORMAT_VERSION};

/// Like `println!`, but a closed stdout (e.g. piped into `head`) is ignored.
macro_rules! out {
    ($($arg:tt)*) => {{
        use std::io::Write;
        let _ = writeln!(std::io::stdout().lock(), $($arg)*);
    }};
}

#[derive(Debug, Parser)]
#[command(
    name = "mbfusion",
    about = "Face + ear verification with Gabor/GMM features and Dempster-Shafer fusion"
)]
#[command(
    disable_version_flag = true,
    subcommand_required = false,
    arg_required_else_help = true
)]
struct Cli {
    /// Pipeline config file (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Overrides every seed in the config.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Print the version and the model file format version.
    #[arg(short = 'V', long)]
    version: bool,
    #[command(subcommand)]
    command: Option<Command>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Normalize and equalize every image in a manifest.
    Prep {
        #[arg(long)]
        manifest: Option<PathBuf>,
        /// Output directory [default: <output_dir>/prep].
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Fit client and background models from the gallery session.
    Train {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Verify a claimed identity from one face and one ear probe.
    Verify {
        /// Normalized face probe (PGM).
        #[arg(long)]
        face: PathBuf,
        /// Normalized ear probe (PGM).
        #[arg(long)]
        ear: PathBuf,
        /// Claimed subject id.
        #[arg(long)]
        claim: String,
    },
    /// Train on session 1, score session 2, and write error reports.
    Eval {
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Fusion experiment on synthetic matcher scores.
    SynthEval,
}

fn load_config(cli: &Cli) -> Result<PipelineConfig> {
    let config = match &cli.config {
        Some(path) => PipelineConfig::load(path)?,
        None => {
            let c = PipelineConfig::default();
            c.validate()?;
            c
        }
    };
    Ok(match cli.seed {
        Some(seed) => config.with_seed(seed),
        None => config,
    })
}

fn load_manifest(config: &PipelineConfig, flag: &Option<PathBuf>) -> Result<Manifest> {
    let path = flag.as_ref().unwrap_or(&config.paths.manifest);
    Ok(Manifest::load(path)?)
}

fn print_report(report: &mbfusion::eval::ErrorReport, written: &[PathBuf]) {
    out!("{}", report.to_string().trim_end());
    for path in written {
        out!("wrote {}", path.display());
    }
}

fn run(cli: &Cli, command: &Command) -> Result<ExitCode> {
    let config = load_config(cli)?;
    match command {
        Command::Prep { manifest, out } => {
            let m = load_manifest(&config, manifest)?;
            let out = out
                .clone()
                .unwrap_or_else(|| config.paths.output_dir.join("prep"));
            let path = pipeline::prep_dataset(&m, &out, &config.prep)?;
            out!(
                "normalized {} images; manifest {}",
                m.records.len(),
                path.display()
            );
        }
        Command::Train { manifest } => {
            let m = load_manifest(&config, manifest)?;
            let models = pipeline::train(&m, &config)?;
            for mm in &models {
                let files = mm.save(&config.paths.model_dir)?;
                out!("{}: {} model files", mm.modality, files.len());
            }
        }
        Command::Verify { face, ear, claim } => {
            let face = pipeline::load_probe(face, &config.prep)?;
            let ear = pipeline::load_probe(ear, &config.prep)?;
            let v = pipeline::verify(&face, &ear, claim, &config)?;
            out!("{}", v.summary_line());
            out!("{}", v.detail_json());
            if !v.decision.accepted {
                return Ok(ExitCode::from(1));
            }
        }
        Command::Eval { manifest } => {
            let m = load_manifest(&config, manifest)?;
            let (report, trials) = pipeline::run_image_experiment(&m, &config)?;
            let written = pipeline::write_report(&report, Some(&trials), &config.paths.output_dir)?;
            print_report(&report, &written);
        }
        Command::SynthEval => {
            let report = run_fusion_experiment(
                &config.synth,
                &config.fusion.weights(),
                config.eval.seed,
                config.eval.sweep,
            )?;
            let written = pipeline::write_report(&report, None, &config.paths.output_dir)
                .context("writing synthetic report")?;
            print_report(&report, &written);
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    if cli.version {
        out!(
            "mbfusion {} (model format {MODEL_FORMAT_VERSION}, modalities {})",
            env!("CARGO_PKG_VERSION"),
            Modality::ALL.map(|m| m.as_str()).join("+")
        );
        return ExitCode::SUCCESS;
    }
    let Some(command) = &cli.command else {
        eprintln!("error: no command given (see --help)");
        return ExitCode::from(2);
    };
    match run(&cli, command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}
