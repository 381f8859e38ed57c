//! Plot-ready CSVs and summary tables built from a results directory.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::experiments::{
    csv_field, fmt_real, layer_sweep_report, load_rows, per_class_csv, results_csv, sort_rows,
    write_atomic, write_json, ClassPairing, PlannedCell, ResolvedRun, ResultRow, SweepOptions,
    SweepReport, CELLS_DIR, PER_CLASS_CSV, RESOLVED_CONFIG, RESULTS_CSV, TOTAL_OVERALL,
};

pub const DROP_CSV: &str = "table2_drop.csv";
pub const CORRELATION_CSV: &str = "table3_correlation.csv";
pub const NOTES_FILE: &str = "report_notes.txt";

pub const FIGURE_COLUMNS: [&str; 10] = [
    "figure",
    "dataset",
    "task",
    "window",
    "shift",
    "layer",
    "layer_index",
    "series",
    "value",
    "fingerprint",
];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum FigureKind {
    /// Test accuracy per layer, one series per window radius. Unshifted cells only.
    LayerAccuracy,
    /// Per-class F1 per layer for place and manner tasks. Unshifted cells only.
    ClassF1,
    /// Test accuracy per layer, one series per label shift. Window radius 0 only.
    Shift,
}

impl FigureKind {
    pub const ALL: [FigureKind; 3] = [
        FigureKind::LayerAccuracy,
        FigureKind::ClassF1,
        FigureKind::Shift,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FigureKind::LayerAccuracy => "layer_accuracy",
            FigureKind::ClassF1 => "class_f1",
            FigureKind::Shift => "shift",
        }
    }

    pub fn file_name(self) -> &'static str {
        match self {
            FigureKind::LayerAccuracy => "fig1_layer_accuracy.csv",
            FigureKind::ClassF1 => "fig23_class_f1.csv",
            FigureKind::Shift => "fig4_shift.csv",
        }
    }

    fn selects(self, task: crate::experiments::Task, window: usize, shift: i32) -> bool {
        match self {
            FigureKind::LayerAccuracy => shift == 0,
            FigureKind::ClassF1 => shift == 0 && task.articulatory(),
            FigureKind::Shift => window == 0 && task.allows_shift(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FigureRow {
    pub figure: String,
    pub dataset: String,
    pub task: String,
    pub window: usize,
    pub shift: i32,
    pub layer: String,
    pub layer_index: usize,
    pub series: String,
    pub value: f64,
    pub fingerprint: String,
}

/// Long-format rows for one figure, in canonical row order.
pub fn emit_figure_data(rows: &[ResultRow], kind: FigureKind) -> Vec<FigureRow> {
    let mut rows: Vec<ResultRow> = rows
        .iter()
        .filter(|r| kind.selects(r.task, r.window, r.shift))
        .cloned()
        .collect();
    sort_rows(&mut rows);
    let base = |r: &ResultRow, series: String, value: f64| FigureRow {
        figure: kind.name().to_string(),
        dataset: r.dataset.clone(),
        task: r.task.to_string(),
        window: r.window,
        shift: r.shift,
        layer: r.layer.clone(),
        layer_index: r.layer_index,
        series,
        value,
        fingerprint: r.fingerprint.clone(),
    };
    let mut out = Vec::new();
    for r in &rows {
        match kind {
            FigureKind::LayerAccuracy => out.push(base(r, format!("w={}", r.window), r.accuracy)),
            FigureKind::Shift => out.push(base(r, format!("k={}", r.shift), r.accuracy)),
            FigureKind::ClassF1 => {
                for (class, s) in r.classes.iter().zip(&r.per_class) {
                    out.push(base(r, class.clone(), s.f1));
                }
            }
        }
    }
    out
}

pub fn figure_csv(rows: &[FigureRow]) -> String {
    let mut out = FIGURE_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let fields = [
            csv_field(&r.figure),
            csv_field(&r.dataset),
            r.task.clone(),
            r.window.to_string(),
            r.shift.to_string(),
            csv_field(&r.layer),
            r.layer_index.to_string(),
            csv_field(&r.series),
            fmt_real(r.value),
            r.fingerprint.clone(),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

fn opt_real(v: Option<f64>) -> String {
    v.map_or_else(|| "n/a".to_string(), fmt_real)
}

pub fn drop_csv(sweep: &SweepReport) -> String {
    let mut out = String::from(
        "dataset,task,window,shift,penultimate_layer,ultimate_layer,penultimate_accuracy,ultimate_accuracy,relative_drop_percent\n",
    );
    for s in &sweep.series {
        let d = &s.drop;
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            csv_field(&s.key.dataset),
            s.key.task,
            s.key.window,
            s.key.shift,
            csv_field(&d.penultimate_layer),
            csv_field(&d.ultimate_layer),
            opt_real(d.penultimate),
            opt_real(d.ultimate),
            opt_real(d.relative_drop),
        );
    }
    out
}

pub fn correlation_csv(sweep: &SweepReport) -> String {
    let mut out = String::from("dataset_a,dataset_b,task,window,shift,class_a,class_b,layers,r\n");
    let (a, b) = sweep.paired_datasets.clone().unwrap_or_default();
    for c in &sweep.correlations {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            csv_field(&a),
            csv_field(&b),
            c.task,
            c.window,
            c.shift,
            csv_field(&c.class_a),
            csv_field(&c.class_b),
            c.layers,
            opt_real(c.r),
        );
    }
    out
}

#[derive(Debug, Clone, Default)]
pub struct ReportOptions {
    pub pairing: Option<(String, String, ClassPairing)>,
}

/// Settings of a `report` invocation, written as its resolved config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportConfig {
    pub tool_version: String,
    pub results_dir: PathBuf,
    pub output_dir: PathBuf,
    pub pairing_file: Option<PathBuf>,
    pub paired_datasets: Option<(String, String)>,
}

#[derive(Debug, Clone)]
pub struct ReportBundle {
    pub rows: Vec<ResultRow>,
    pub figures: Vec<(FigureKind, Vec<FigureRow>)>,
    pub sweep: SweepReport,
    pub warnings: Vec<String>,
}

/// Expected cells of the originating run, if its resolved config is present.
pub fn load_resolved_run(results_dir: &Path) -> Result<Option<ResolvedRun>> {
    let path = results_dir.join(RESOLVED_CONFIG);
    if !path.exists() {
        return Ok(None);
    }
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text)
        .map(Some)
        .map_err(|e| Error::Json { path, source: e })
}

fn missing_warnings(rows: &[ResultRow], expected: &[PlannedCell], warnings: &mut Vec<String>) {
    let present: BTreeSet<&str> = rows.iter().map(|r| r.fingerprint.as_str()).collect();
    for kind in FigureKind::ALL {
        let missing: Vec<&PlannedCell> = expected
            .iter()
            .filter(|c| kind.selects(c.config.task, c.config.window, c.config.shift))
            .filter(|c| !present.contains(c.fingerprint.as_str()))
            .collect();
        if missing.is_empty() {
            continue;
        }
        let mut msg = format!(
            "{}: {} planned cell(s) missing:",
            kind.file_name(),
            missing.len()
        );
        for c in missing {
            let k = &c.config;
            let _ = write!(
                msg,
                " {} ({} {} {} w={} k={})",
                c.fingerprint, k.dataset, k.task, k.layer, k.window, k.shift
            );
        }
        warnings.push(msg);
    }
}

pub fn build_report(results_dir: &Path, options: &ReportOptions) -> Result<ReportBundle> {
    if !results_dir.is_dir() {
        return Err(Error::NotFound(results_dir.to_path_buf()));
    }
    let mut warnings = Vec::new();
    let mut rows = if results_dir.join(CELLS_DIR).is_dir() {
        load_rows(results_dir)?
    } else {
        Vec::new()
    };
    sort_rows(&mut rows);
    if rows.is_empty() {
        warnings.push(format!("no cell results under {}", results_dir.display()));
    }

    let mut sweep_options = SweepOptions::default();
    if let Some(run) = load_resolved_run(results_dir)? {
        missing_warnings(&rows, &run.cells, &mut warnings);
        sweep_options.layer_orders = run
            .datasets
            .iter()
            .map(|d| (d.name.clone(), d.layers.clone()))
            .collect::<BTreeMap<_, _>>();
    }
    if let Some((a, b, _)) = &options.pairing {
        for d in [a, b] {
            if !rows.iter().any(|r| &r.dataset == d) {
                warnings.push(format!("paired dataset {d:?} has no results"));
            }
        }
    }
    sweep_options.pairing = options.pairing.clone();
    let sweep = layer_sweep_report(&rows, &sweep_options);
    for s in &sweep.series {
        if s.drop.relative_drop.is_none() {
            warnings.push(format!(
                "drop undefined for {} {} w={} k={} ({} -> {})",
                s.key.dataset,
                s.key.task,
                s.key.window,
                s.key.shift,
                s.drop.penultimate_layer,
                s.drop.ultimate_layer
            ));
        }
    }

    let figures = FigureKind::ALL
        .into_iter()
        .map(|k| (k, emit_figure_data(&rows, k)))
        .collect();
    Ok(ReportBundle {
        rows,
        figures,
        sweep,
        warnings,
    })
}

pub fn notes_text(bundle: &ReportBundle) -> String {
    let mut out = String::new();
    out.push_str("Notes\n");
    out.push_str("- Accuracy is frame-level on the test split; frames without an aligned label are excluded.\n");
    out.push_str("- relative_drop_percent = 100 * (penultimate - ultimate) / penultimate; positive means the top layer is worse.\n");
    let _ = writeln!(
        out,
        "- The {TOTAL_OVERALL} row correlates overall per-layer accuracy between the paired datasets; it is a toolkit convention, not a class pair."
    );
    out.push_str("- Optimizer settings (Adam, beta1 0.9, beta2 0.999, epsilon 1e-8), Glorot-uniform initialization and train-split input standardization are toolkit choices recorded in each run's resolved-config.json.\n");
    out.push_str("- Undefined values (missing layers, constant vectors) are written as n/a.\n");
    if !bundle.warnings.is_empty() {
        out.push_str("\nWarnings\n");
        for w in &bundle.warnings {
            let _ = writeln!(out, "- {w}");
        }
    }
    out
}

/// Writes every report file into `out`; returns the paths written.
pub fn write_report(bundle: &ReportBundle, out: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let mut files = vec![
        (RESULTS_CSV.to_string(), results_csv(&bundle.rows)),
        (PER_CLASS_CSV.to_string(), per_class_csv(&bundle.rows)),
    ];
    for (kind, rows) in &bundle.figures {
        files.push((kind.file_name().to_string(), figure_csv(rows)));
    }
    files.push((DROP_CSV.to_string(), drop_csv(&bundle.sweep)));
    files.push((CORRELATION_CSV.to_string(), correlation_csv(&bundle.sweep)));
    files.push((NOTES_FILE.to_string(), notes_text(bundle)));
    let mut written = Vec::new();
    for (name, text) in files {
        let path = out.join(name);
        write_atomic(&path, text.as_bytes())?;
        written.push(path);
    }
    Ok(written)
}

pub fn write_report_config(config: &ReportConfig, out: &Path) -> Result<PathBuf> {
    let path = out.join(RESOLVED_CONFIG);
    write_json(&path, config)?;
    Ok(path)
}
