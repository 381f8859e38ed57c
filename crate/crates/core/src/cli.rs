//! Command-line entry point.
//!
//! Exit codes: 0 on success, 1 when some cells failed or an I/O error
//! interrupted the command, 2 on invalid input.

use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use crate::error::{Error, Result};
use crate::experiments::{run_grid, write_json, ClassPairing, ExperimentPlan, RESOLVED_CONFIG};
use crate::feature_maps::builtin::Language;
use crate::report::{build_report, write_report, write_report_config, ReportConfig, ReportOptions};
use crate::synth::{generate, SynthSpec};
use crate::tensor_store::{load_manifest, manifest_violations};

pub const EXIT_OK: i32 = 0;
pub const EXIT_PARTIAL: i32 = 1;
pub const EXIT_INVALID: i32 = 2;

#[derive(Debug, Parser)]
#[command(
    name = "layerscope",
    version,
    about = "Probe per-layer activations of speech-recognition networks"
)]
pub struct Cli {
    #[command(flatten)]
    pub global: GlobalArgs,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Args)]
pub struct GlobalArgs {
    /// Global seed; overrides the seed in a plan or synth spec.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Worker threads for `run`.
    #[arg(long, global = true, env = "LAYERSCOPE_WORKERS")]
    pub workers: Option<usize>,
    /// Output directory of the command.
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Check dataset roots against their manifests.
    Validate {
        roots: Vec<PathBuf>,
        /// Also check the shipped English and Arabic label sets and maps.
        #[arg(long)]
        builtin: bool,
    },
    /// Generate a synthetic dataset from a JSON spec.
    Synth { spec: PathBuf },
    /// Run (or resume) an experiment plan.
    Run { plan: PathBuf },
    /// Build figure data and tables from a results directory.
    Report {
        results: PathBuf,
        /// TSV of `task<TAB>class_a<TAB>class_b` lines for cross-dataset correlation.
        #[arg(long, requires = "pair")]
        pairing: Option<PathBuf>,
        /// The two datasets to correlate.
        #[arg(long, num_args = 2, value_names = ["A", "B"], requires = "pairing")]
        pair: Option<Vec<String>>,
    },
}

/// Parses `args` (including the program name), runs the command and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => EXIT_PARTIAL,
        _ => EXIT_INVALID,
    }
}

fn dispatch(cli: &Cli) -> Result<i32> {
    let g = &cli.global;
    match &cli.command {
        Command::Validate { roots, builtin } => validate(roots, *builtin, g),
        Command::Synth { spec } => synth(spec, g),
        Command::Run { plan } => run_plan(plan, g),
        Command::Report {
            results,
            pairing,
            pair,
        } => report(results, pairing.as_deref(), pair.as_deref(), g),
    }
}

#[derive(Serialize)]
struct ValidateConfig<'a> {
    tool_version: &'a str,
    roots: &'a [PathBuf],
    builtin: bool,
    violations: usize,
}

fn validate(roots: &[PathBuf], builtin: bool, g: &GlobalArgs) -> Result<i32> {
    if roots.is_empty() && !builtin {
        return Err(Error::Config(
            "nothing to validate: give dataset roots or --builtin".into(),
        ));
    }
    let mut total = 0;
    for root in roots {
        let violations = match load_manifest(root) {
            Ok(m) => manifest_violations(root, &m),
            Err(e) => vec![e.to_string()],
        };
        for v in &violations {
            println!("{}: {v}", root.display());
        }
        println!("{}: {} violations", root.display(), violations.len());
        total += violations.len();
    }
    if builtin {
        for lang in [Language::English, Language::Arabic] {
            let violations = lang.size_violations();
            for v in &violations {
                println!("builtin {lang:?}: {v}");
            }
            let s = lang.expected_sizes();
            println!(
                "builtin {lang:?}: phonemes {}, graphemes {}, place {}, manner {}: {} violations",
                s.phonemes,
                s.graphemes,
                s.place,
                s.manner,
                violations.len()
            );
            total += violations.len();
        }
    }
    if let Some(out) = &g.out {
        let config = ValidateConfig {
            tool_version: env!("CARGO_PKG_VERSION"),
            roots,
            builtin,
            violations: total,
        };
        write_json(&out.join(RESOLVED_CONFIG), &config)?;
    }
    Ok(if total == 0 { EXIT_OK } else { EXIT_INVALID })
}

fn synth(spec_path: &Path, g: &GlobalArgs) -> Result<i32> {
    let text = fs::read_to_string(spec_path).map_err(|e| Error::io(spec_path, e))?;
    let mut spec: SynthSpec = serde_json::from_str(&text).map_err(|e| Error::Parse {
        offset: crate::tensor_store::json_error_offset(&text, &e),
        message: e.to_string(),
        path: spec_path.to_path_buf(),
    })?;
    if let Some(seed) = g.seed {
        spec.seed = seed;
    }
    let out = g
        .out
        .clone()
        .ok_or_else(|| Error::Config("synth needs --out <dataset root>".into()))?;
    let manifest = generate(&spec, &out)?;
    write_json(&out.join(RESOLVED_CONFIG), &spec)?;
    println!(
        "wrote dataset {} to {} ({} utterances, {} layers)",
        manifest.dataset_name,
        out.display(),
        manifest.splits.all().count(),
        manifest.layers.len()
    );
    Ok(EXIT_OK)
}

fn run_plan(plan_path: &Path, g: &GlobalArgs) -> Result<i32> {
    let mut plan = ExperimentPlan::load(plan_path)?;
    if let Some(seed) = g.seed {
        plan.seed = seed;
    }
    if let Some(w) = g.workers {
        plan.workers = Some(w);
    }
    if let Some(out) = &g.out {
        plan.output_dir = out.clone();
    }
    let outcome = run_grid(&plan)?;
    println!(
        "{} cells: {} trained, {} skipped, {} failed; results in {}",
        outcome.resolved.cells.len(),
        outcome.trained.len(),
        outcome.skipped.len(),
        outcome.failures.len(),
        plan.output_dir.display()
    );
    for f in &outcome.failures {
        eprintln!(
            "failed {} ({} {} {} w={} k={}): {}",
            f.fingerprint, f.dataset, f.task, f.layer, f.window, f.shift, f.error
        );
    }
    Ok(if outcome.is_complete() {
        EXIT_OK
    } else {
        EXIT_PARTIAL
    })
}

fn report(
    results: &Path,
    pairing: Option<&Path>,
    pair: Option<&[String]>,
    g: &GlobalArgs,
) -> Result<i32> {
    let mut options = ReportOptions::default();
    if let (Some(path), Some([a, b])) = (pairing, pair) {
        options.pairing = Some((a.clone(), b.clone(), ClassPairing::load(path)?));
    }
    let bundle = build_report(results, &options)?;
    let out = g.out.clone().unwrap_or_else(|| results.join("report"));
    write_report(&bundle, &out)?;
    write_report_config(
        &ReportConfig {
            tool_version: env!("CARGO_PKG_VERSION").to_string(),
            results_dir: results.to_path_buf(),
            output_dir: out.clone(),
            pairing_file: pairing.map(Path::to_path_buf),
            paired_datasets: options
                .pairing
                .as_ref()
                .map(|(a, b, _)| (a.clone(), b.clone())),
        },
        &out,
    )?;
    for w in &bundle.warnings {
        eprintln!("warning: {w}");
    }
    println!(
        "{} result rows; report written to {}",
        bundle.rows.len(),
        out.display()
    );
    Ok(EXIT_OK)
}
