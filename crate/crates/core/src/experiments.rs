//! Experiment grid: datasets x tasks x layers x window radii x label shifts.
//!
//! Each cell trains one probe and is identified by a fingerprint, a hash of
//! its fully resolved configuration. Finished cells are stored as
//! `<out>/cells/<fingerprint>.json`; a rerun skips every cell whose file is
//! already present, so a grid can be resumed after interruption or after
//! deleting individual results. Per-cell seeds are derived from the global
//! seed and the fingerprint, so adding cells never changes existing ones.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::alignment::{
    label_path, read_label_file, shift_labels, window_into, ShiftOptions, SPACE_TOKEN, UNLABELED,
};
use crate::error::{Error, Result};
use crate::feature_maps::{remap_labels, ArticulatoryMap, LabelInventory};
use crate::metrics::{
    accuracy, pearson, per_class_prf, relative_drop, ClassScores, ConfusionMatrix,
    LayerAccuracyVector,
};
use crate::probe::{self, predict_batch, train_probe, Dataset, ProbeConfig, TrainingTrace};
use crate::tensor_store::{read_checked, validate_manifest, Manifest};

/// Bumped whenever a change alters what a fingerprint means.
pub const CELL_FORMAT_VERSION: u32 = 1;
pub const CELLS_DIR: &str = "cells";
pub const RESULTS_CSV: &str = "results.csv";
pub const PER_CLASS_CSV: &str = "per_class.csv";
pub const RESOLVED_CONFIG: &str = "resolved-config.json";
pub const FAILURES_JSON: &str = "failures.json";
pub const UNLABELED_CLASS: &str = "<unlabeled>";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Phoneme,
    Grapheme,
    Place,
    Manner,
}

impl Task {
    pub const ALL: [Task; 4] = [Task::Phoneme, Task::Grapheme, Task::Place, Task::Manner];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Phoneme => "phoneme",
            Task::Grapheme => "grapheme",
            Task::Place => "place",
            Task::Manner => "manner",
        }
    }

    /// Label set whose `.lab` files feed this task.
    pub fn label_set(self) -> &'static str {
        match self {
            Task::Grapheme => "grapheme",
            _ => "phoneme",
        }
    }

    pub fn articulatory(self) -> bool {
        matches!(self, Task::Place | Task::Manner)
    }

    pub fn allows_shift(self) -> bool {
        !self.articulatory()
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::Config(format!("unknown task {s:?}")))
    }
}

/// Probe hyperparameters a plan may override.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProbeOverrides {
    pub hidden_size: Option<usize>,
    pub epochs: Option<usize>,
    pub learning_rate: Option<f64>,
    pub batch_size: Option<usize>,
    pub dropout_rate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GridOptions {
    /// Train on unaligned frames as an extra class instead of dropping them.
    pub include_unlabeled: bool,
    /// Do not count `<space>` tokens as positions when shifting.
    pub shift_skips_space: bool,
    pub max_shift: u32,
    /// Also write each best probe under `<out>/models/`.
    pub save_models: bool,
}

impl Default for GridOptions {
    fn default() -> Self {
        GridOptions {
            include_unlabeled: false,
            shift_skips_space: true,
            max_shift: 3,
            save_models: false,
        }
    }
}

fn zero_usize() -> Vec<usize> {
    vec![0]
}

fn zero_i32() -> Vec<i32> {
    vec![0]
}

fn default_output() -> PathBuf {
    PathBuf::from("results")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentPlan {
    pub datasets: Vec<PathBuf>,
    pub tasks: Vec<Task>,
    /// Empty means every manifest layer.
    #[serde(default)]
    pub layers: Vec<String>,
    #[serde(default = "zero_usize")]
    pub window_radii: Vec<usize>,
    #[serde(default = "zero_i32")]
    pub shifts: Vec<i32>,
    #[serde(default)]
    pub probe: ProbeOverrides,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_output")]
    pub output_dir: PathBuf,
    #[serde(default)]
    pub workers: Option<usize>,
    #[serde(default)]
    pub options: GridOptions,
}

impl ExperimentPlan {
    pub fn new(datasets: Vec<PathBuf>, tasks: Vec<Task>, output_dir: PathBuf) -> Self {
        ExperimentPlan {
            datasets,
            tasks,
            layers: Vec::new(),
            window_radii: zero_usize(),
            shifts: zero_i32(),
            probe: ProbeOverrides::default(),
            seed: 0,
            output_dir,
            workers: None,
            options: GridOptions::default(),
        }
    }

    /// Reads a JSON plan; relative dataset and output paths resolve against the plan's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut plan: ExperimentPlan = serde_json::from_str(&text).map_err(|e| Error::Parse {
            offset: crate::tensor_store::json_error_offset(&text, &e),
            message: e.to_string(),
            path: path.to_path_buf(),
        })?;
        let base = path.parent().unwrap_or(Path::new(""));
        for d in &mut plan.datasets {
            if d.is_relative() {
                *d = base.join(&*d);
            }
        }
        if plan.output_dir.is_relative() {
            plan.output_dir = base.join(&plan.output_dir);
        }
        Ok(plan)
    }

    pub fn probe_defaults(&self) -> ProbeHyper {
        let d = ProbeConfig::default();
        let o = &self.probe;
        ProbeHyper {
            hidden_size: o.hidden_size.unwrap_or(d.hidden_size),
            epochs: o.epochs.unwrap_or(d.epochs),
            learning_rate: o.learning_rate.unwrap_or(d.learning_rate),
            batch_size: o.batch_size.unwrap_or(d.batch_size),
            dropout_rate: o.dropout_rate.unwrap_or(d.dropout_rate),
        }
    }

    fn validate_shape(&self) -> Result<()> {
        let nonempty = [
            ("datasets", self.datasets.is_empty()),
            ("tasks", self.tasks.is_empty()),
            ("window_radii", self.window_radii.is_empty()),
            ("shifts", self.shifts.is_empty()),
        ];
        for (field, empty) in nonempty {
            if empty {
                return Err(Error::Config(format!("plan field {field} is empty")));
            }
        }
        if let Some(k) = self
            .shifts
            .iter()
            .find(|k| k.unsigned_abs() > self.options.max_shift)
        {
            return Err(Error::Config(format!(
                "shift {k} outside [-{m}, {m}] (raise options.max_shift to allow it)",
                m = self.options.max_shift
            )));
        }
        if self.workers == Some(0) {
            return Err(Error::Config("workers must be >= 1".into()));
        }
        let mut probe = ProbeConfig::new(1, 1);
        self.probe_defaults().apply(&mut probe);
        probe.validate()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeHyper {
    pub hidden_size: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub dropout_rate: f64,
}

impl ProbeHyper {
    fn apply(&self, c: &mut ProbeConfig) {
        c.hidden_size = self.hidden_size;
        c.epochs = self.epochs;
        c.learning_rate = self.learning_rate;
        c.batch_size = self.batch_size;
        c.dropout_rate = self.dropout_rate;
    }
}

/// Everything that determines a cell's result. Its hash is the cell fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub format_version: u32,
    pub dataset: String,
    pub task: Task,
    pub layer: String,
    pub window: usize,
    pub shift: i32,
    pub global_seed: u64,
    pub probe: ProbeHyper,
    pub include_unlabeled: bool,
    pub shift_skips_space: bool,
}

impl CellConfig {
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("cell config serializes");
        let digest = Sha256::digest(&bytes);
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    /// `hash(global_seed, fingerprint)`.
    pub fn seed(&self) -> u64 {
        let mut h = Sha256::new();
        h.update(self.global_seed.to_le_bytes());
        h.update(self.fingerprint().as_bytes());
        let digest = h.finalize();
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResultRow {
    pub fingerprint: String,
    pub dataset: String,
    pub task: Task,
    pub layer: String,
    /// Position of `layer` in the dataset's manifest.
    pub layer_index: usize,
    pub window: usize,
    pub shift: i32,
    pub seed: u64,
    pub accuracy: f64,
    pub best_epoch: usize,
    pub val_loss: f64,
    pub val_accuracy: f64,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub classes: Vec<String>,
    pub per_class: Vec<ClassScores>,
    pub config: CellConfig,
    pub trace: TrainingTrace,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub fingerprint: String,
    pub dataset: String,
    pub task: Task,
    pub layer: String,
    pub window: usize,
    pub shift: i32,
    pub error: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetInfo {
    pub name: String,
    pub root: PathBuf,
    pub layers: Vec<String>,
}

/// A planned cell and its fingerprint.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedCell {
    pub fingerprint: String,
    pub seed: u64,
    #[serde(flatten)]
    pub config: CellConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerInfo {
    pub name: String,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub initialization: String,
    pub input_standardization: String,
    pub model_selection: String,
}

impl Default for OptimizerInfo {
    fn default() -> Self {
        OptimizerInfo {
            name: "adam".into(),
            beta1: probe::ADAM_BETA1,
            beta2: probe::ADAM_BETA2,
            epsilon: probe::ADAM_EPSILON,
            initialization: "uniform(-a, a), a = sqrt(6 / (fan_in + fan_out)); zero biases".into(),
            input_standardization: format!(
                "per-dimension mean/std from the training split, std floor {}",
                probe::STD_FLOOR
            ),
            model_selection: "lowest validation loss over all epochs, earliest on ties".into(),
        }
    }
}

/// Written as `resolved-config.json` next to the results.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResolvedRun {
    pub tool_version: String,
    pub plan: ExperimentPlan,
    pub probe: ProbeHyper,
    pub optimizer: OptimizerInfo,
    pub workers: usize,
    pub datasets: Vec<DatasetInfo>,
    pub cells: Vec<PlannedCell>,
}

/// Outcome of [`run_grid`]: rows in plan order, plus what was trained, skipped or failed.
#[derive(Debug, Clone, PartialEq)]
pub struct GridOutcome {
    pub rows: Vec<ResultRow>,
    pub trained: Vec<String>,
    pub skipped: Vec<String>,
    pub failures: Vec<CellFailure>,
    pub resolved: ResolvedRun,
}

impl GridOutcome {
    pub fn is_complete(&self) -> bool {
        self.failures.is_empty()
    }
}

struct LoadedDataset {
    root: PathBuf,
    manifest: Manifest,
}

/// Validates datasets and expands the plan into cells, in plan order.
pub fn resolve_plan(
    plan: &ExperimentPlan,
    workers: usize,
) -> Result<(ResolvedRun, Vec<(usize, CellConfig)>)> {
    plan.validate_shape()?;
    let hyper = plan.probe_defaults();
    let mut datasets = Vec::new();
    let mut infos = Vec::new();
    for root in &plan.datasets {
        let manifest = validate_manifest(root)?;
        if infos
            .iter()
            .any(|i: &DatasetInfo| i.name == manifest.dataset_name)
        {
            return Err(Error::Config(format!(
                "dataset name {:?} used twice",
                manifest.dataset_name
            )));
        }
        for task in &plan.tasks {
            if !manifest.label_sets.contains_key(task.label_set()) {
                return Err(Error::Config(format!(
                    "dataset {} has no {:?} label set for task {task}",
                    manifest.dataset_name,
                    task.label_set()
                )));
            }
            if task.articulatory() && !manifest.articulatory_maps.contains_key(task.as_str()) {
                return Err(Error::Config(format!(
                    "dataset {} has no {task} map",
                    manifest.dataset_name
                )));
            }
        }
        for layer in &plan.layers {
            if manifest.layer(layer).is_none() {
                return Err(Error::Config(format!(
                    "layer {layer:?} not in dataset {}",
                    manifest.dataset_name
                )));
            }
        }
        infos.push(DatasetInfo {
            name: manifest.dataset_name.clone(),
            root: root.clone(),
            layers: manifest.layer_ids(),
        });
        datasets.push(manifest);
    }

    let mut cells = Vec::new();
    for (di, manifest) in datasets.iter().enumerate() {
        for &task in &plan.tasks {
            let layers: Vec<String> = if plan.layers.is_empty() {
                manifest.layer_ids()
            } else {
                manifest
                    .layer_ids()
                    .into_iter()
                    .filter(|l| plan.layers.contains(l))
                    .collect()
            };
            for layer in &layers {
                for &window in &plan.window_radii {
                    for &shift in &plan.shifts {
                        if shift != 0 && !task.allows_shift() {
                            continue;
                        }
                        cells.push((
                            di,
                            CellConfig {
                                format_version: CELL_FORMAT_VERSION,
                                dataset: manifest.dataset_name.clone(),
                                task,
                                layer: layer.clone(),
                                window,
                                shift,
                                global_seed: plan.seed,
                                probe: hyper.clone(),
                                include_unlabeled: plan.options.include_unlabeled,
                                shift_skips_space: plan.options.shift_skips_space,
                            },
                        ));
                    }
                }
            }
        }
    }
    let mut seen = std::collections::HashSet::new();
    cells.retain(|(_, c)| seen.insert(c.fingerprint()));

    let resolved = ResolvedRun {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        plan: plan.clone(),
        probe: hyper,
        optimizer: OptimizerInfo::default(),
        workers,
        datasets: infos,
        cells: cells
            .iter()
            .map(|(_, c)| PlannedCell {
                fingerprint: c.fingerprint(),
                seed: c.seed(),
                config: c.clone(),
            })
            .collect(),
    };
    Ok((resolved, cells))
}

pub fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

/// Runs every cell of the plan not already on disk, then rewrites the aggregated CSVs.
pub fn run_grid(plan: &ExperimentPlan) -> Result<GridOutcome> {
    let workers = plan.workers.unwrap_or_else(default_workers);
    let (resolved, cells) = resolve_plan(plan, workers)?;
    let datasets: Vec<LoadedDataset> = plan
        .datasets
        .iter()
        .map(|root| {
            Ok(LoadedDataset {
                root: root.clone(),
                manifest: validate_manifest(root)?,
            })
        })
        .collect::<Result<_>>()?;

    let out = &plan.output_dir;
    let cells_dir = out.join(CELLS_DIR);
    fs::create_dir_all(&cells_dir).map_err(|e| Error::io(&cells_dir, e))?;
    write_json(&out.join(RESOLVED_CONFIG), &resolved)?;

    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::Config(format!("cannot start worker pool: {e}")))?;

    enum Outcome {
        Trained(String),
        Skipped(String),
        Failed(CellFailure),
    }

    let outcomes: Vec<Outcome> = pool.install(|| {
        cells
            .par_iter()
            .map(|(di, cell)| {
                let fp = cell.fingerprint();
                let path = cell_path(out, &fp);
                if load_row(&path).is_ok_and(|r| r.fingerprint == fp) {
                    return Outcome::Skipped(fp);
                }
                let result = run_cell(&datasets[*di], cell, plan.options.max_shift).and_then(
                    |(row, model, config)| {
                        if plan.options.save_models {
                            probe::save_snapshot(
                                &out.join("models").join(format!("{fp}.bin")),
                                &model,
                                &config,
                            )?;
                        }
                        write_json(&path, &row)
                    },
                );
                match result {
                    Ok(()) => {
                        log::info!(
                            "trained {} {} {} w={} k={} ({fp})",
                            cell.dataset,
                            cell.task,
                            cell.layer,
                            cell.window,
                            cell.shift
                        );
                        Outcome::Trained(fp)
                    }
                    Err(e) => {
                        log::warn!("cell {fp} failed: {e}");
                        Outcome::Failed(CellFailure {
                            fingerprint: fp,
                            dataset: cell.dataset.clone(),
                            task: cell.task,
                            layer: cell.layer.clone(),
                            window: cell.window,
                            shift: cell.shift,
                            error: e.to_string(),
                        })
                    }
                }
            })
            .collect()
    });

    let mut trained = Vec::new();
    let mut skipped = Vec::new();
    let mut failures = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Trained(fp) => trained.push(fp),
            Outcome::Skipped(fp) => skipped.push(fp),
            Outcome::Failed(f) => failures.push(f),
        }
    }

    let mut rows = Vec::new();
    for (_, cell) in &cells {
        let fp = cell.fingerprint();
        if failures.iter().any(|f| f.fingerprint == fp) {
            continue;
        }
        rows.push(load_row(&cell_path(out, &fp))?);
    }
    write_results_csv(&out.join(RESULTS_CSV), &rows)?;
    write_per_class_csv(&out.join(PER_CLASS_CSV), &rows)?;
    write_json(&out.join(FAILURES_JSON), &failures)?;

    Ok(GridOutcome {
        rows,
        trained,
        skipped,
        failures,
        resolved,
    })
}

pub fn cell_path(out: &Path, fingerprint: &str) -> PathBuf {
    out.join(CELLS_DIR).join(format!("{fingerprint}.json"))
}

pub fn load_row(path: &Path) -> Result<ResultRow> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })
}

/// All cell results under `<out>/cells`, sorted by fingerprint.
pub fn load_rows(out: &Path) -> Result<Vec<ResultRow>> {
    let dir = out.join(CELLS_DIR);
    let mut paths: Vec<PathBuf> = fs::read_dir(&dir)
        .map_err(|e| Error::io(&dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths.iter().map(|p| load_row(p)).collect()
}

/// Serializes to pretty JSON and moves the file into place atomically.
pub(crate) fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.to_path_buf(),
        source: e,
    })?;
    text.push('\n');
    write_atomic(path, text.as_bytes())
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(path.file_name().unwrap_or_default());
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct TaskLabels {
    inventory: LabelInventory,
    map: Option<ArticulatoryMap>,
    classes: Vec<String>,
}

fn task_labels(ds: &LoadedDataset, task: Task, include_unlabeled: bool) -> Result<TaskLabels> {
    let inventory = ds.manifest.load_inventory(&ds.root, task.label_set())?;
    let map = if task.articulatory() {
        Some(ds.manifest.load_map(&ds.root, task.as_str(), &inventory)?)
    } else {
        None
    };
    let mut classes = match &map {
        Some(m) => m.target().labels().to_vec(),
        None => inventory.labels().to_vec(),
    };
    if include_unlabeled {
        classes.push(UNLABELED_CLASS.to_string());
    }
    Ok(TaskLabels {
        inventory,
        map,
        classes,
    })
}

/// Windowed feature rows and labels for the given utterances.
fn build_split(
    ds: &LoadedDataset,
    utterances: &[String],
    cell: &CellConfig,
    labels: &TaskLabels,
    shift_options: &ShiftOptions,
) -> Result<Dataset> {
    let layer = ds
        .manifest
        .layer(&cell.layer)
        .ok_or_else(|| Error::Config(format!("layer {:?} not in manifest", cell.layer)))?;
    let width = (2 * cell.window + 1) * layer.dim;
    let unlabeled_class = cell
        .include_unlabeled
        .then(|| labels.classes.len() as u32 - 1);
    let mut features = Vec::new();
    let mut targets = Vec::new();
    let mut row = vec![0.0; width];
    for utt in utterances {
        let act = read_checked(&ds.root, &ds.manifest, &cell.layer, utt)?;
        let segments = read_label_file(&label_path(&ds.root, cell.task.label_set(), utt))?;
        let mut frame_labels = shift_labels(
            utt,
            &segments,
            cell.shift,
            act.frames,
            act.time_scale,
            ds.manifest.frame_shift,
            &labels.inventory,
            shift_options,
        )?;
        if let Some(map) = &labels.map {
            frame_labels = remap_labels(&frame_labels, map)?;
        }
        for (t, &l) in frame_labels.labels.iter().enumerate() {
            let target = match (l, unlabeled_class) {
                (UNLABELED, None) => continue,
                (UNLABELED, Some(u)) => u,
                (l, _) => l,
            };
            window_into(&act, t, cell.window, &mut row)?;
            features.extend_from_slice(&row);
            targets.push(target);
        }
    }
    let n = targets.len();
    let features = Array2::from_shape_vec((n, width), features).expect("rows have fixed width");
    Dataset::new(features, targets)
}

fn run_cell(
    ds: &LoadedDataset,
    cell: &CellConfig,
    max_shift: u32,
) -> Result<(ResultRow, probe::ProbeModel, ProbeConfig)> {
    let labels = task_labels(ds, cell.task, cell.include_unlabeled)?;
    let shift_options = ShiftOptions {
        max_abs: max_shift,
        skip_tokens: if cell.shift_skips_space {
            vec![SPACE_TOKEN.to_string()]
        } else {
            Vec::new()
        },
    };
    let splits = &ds.manifest.splits;
    if splits.test.is_empty() {
        return Err(Error::Config(format!(
            "dataset {} has an empty test split",
            cell.dataset
        )));
    }
    let train = build_split(ds, &splits.train, cell, &labels, &shift_options)?;
    let val = build_split(ds, &splits.dev, cell, &labels, &shift_options)?;
    let test = build_split(ds, &splits.test, cell, &labels, &shift_options)?;
    for (name, split) in [("train", &train), ("dev", &val), ("test", &test)] {
        if split.is_empty() {
            return Err(Error::validation(name, "no labelled frames"));
        }
    }

    let seed = cell.seed();
    let mut config = ProbeConfig::new(train.dim(), labels.classes.len());
    cell.probe.apply(&mut config);
    config.window_radius = cell.window;
    config.shift_k = cell.shift;
    config.seed = seed;

    let (model, trace) = train_probe(&train, &val, &config)?;
    let predicted = predict_batch(&model, test.features.view())?;
    let cm = ConfusionMatrix::from_predictions(&test.labels, &predicted, labels.classes.len())?;
    let best = *trace.best();
    let row = ResultRow {
        fingerprint: cell.fingerprint(),
        dataset: cell.dataset.clone(),
        task: cell.task,
        layer: cell.layer.clone(),
        layer_index: ds.manifest.layer_index(&cell.layer).unwrap_or(usize::MAX),
        window: cell.window,
        shift: cell.shift,
        seed,
        accuracy: accuracy(&cm)?,
        best_epoch: trace.best_epoch,
        val_loss: best.val_loss,
        val_accuracy: best.val_accuracy,
        n_train: train.len(),
        n_val: val.len(),
        n_test: test.len(),
        classes: labels.classes,
        per_class: per_class_prf(&cm)?,
        config: cell.clone(),
        trace,
    };
    Ok((row, model, config))
}

pub(crate) fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n', '\r']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_string()
    }
}

pub(crate) fn fmt_real(v: f64) -> String {
    format!("{v:.6}")
}

pub const RESULTS_COLUMNS: [&str; 15] = [
    "dataset",
    "task",
    "layer",
    "layer_index",
    "window",
    "shift",
    "seed",
    "accuracy",
    "best_epoch",
    "val_loss",
    "val_accuracy",
    "n_train",
    "n_val",
    "n_test",
    "fingerprint",
];

pub const PER_CLASS_COLUMNS: [&str; 13] = [
    "dataset",
    "task",
    "layer",
    "layer_index",
    "window",
    "shift",
    "class",
    "precision",
    "recall",
    "f1",
    "support",
    "degenerate",
    "fingerprint",
];

pub fn results_csv(rows: &[ResultRow]) -> String {
    let mut out = RESULTS_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        let fields = [
            csv_field(&r.dataset),
            r.task.to_string(),
            csv_field(&r.layer),
            r.layer_index.to_string(),
            r.window.to_string(),
            r.shift.to_string(),
            r.seed.to_string(),
            fmt_real(r.accuracy),
            r.best_epoch.to_string(),
            fmt_real(r.val_loss),
            fmt_real(r.val_accuracy),
            r.n_train.to_string(),
            r.n_val.to_string(),
            r.n_test.to_string(),
            r.fingerprint.clone(),
        ];
        out.push_str(&fields.join(","));
        out.push('\n');
    }
    out
}

pub fn per_class_csv(rows: &[ResultRow]) -> String {
    let mut out = PER_CLASS_COLUMNS.join(",");
    out.push('\n');
    for r in rows {
        for (class, s) in r.classes.iter().zip(&r.per_class) {
            let fields = [
                csv_field(&r.dataset),
                r.task.to_string(),
                csv_field(&r.layer),
                r.layer_index.to_string(),
                r.window.to_string(),
                r.shift.to_string(),
                csv_field(class),
                fmt_real(s.precision),
                fmt_real(s.recall),
                fmt_real(s.f1),
                s.support.to_string(),
                s.degenerate.to_string(),
                r.fingerprint.clone(),
            ];
            out.push_str(&fields.join(","));
            out.push('\n');
        }
    }
    out
}

pub fn write_results_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    write_atomic(path, results_csv(rows).as_bytes())
}

pub fn write_per_class_csv(path: &Path, rows: &[ResultRow]) -> Result<()> {
    write_atomic(path, per_class_csv(rows).as_bytes())
}

/// Canonical row order: dataset, task, layer index, window, shift.
pub fn sort_rows(rows: &mut [ResultRow]) {
    rows.sort_by(|a, b| {
        (
            &a.dataset,
            a.task,
            a.layer_index,
            a.window,
            a.shift,
            &a.fingerprint,
        )
            .cmp(&(
                &b.dataset,
                b.task,
                b.layer_index,
                b.window,
                b.shift,
                &b.fingerprint,
            ))
    });
}

/// Class pairs across two datasets, one `task<TAB>class_a<TAB>class_b` line each.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct ClassPairing {
    pub pairs: Vec<(Task, String, String)>,
}

impl ClassPairing {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut pairs = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let cols: Vec<&str> = line.split('\t').map(str::trim).collect();
            let [task, a, b] = cols[..] else {
                return Err(Error::Parse {
                    path: path.to_path_buf(),
                    offset: 0,
                    message: format!("line {}: expected task<TAB>class_a<TAB>class_b", i + 1),
                });
            };
            pairs.push((task.parse()?, a.to_string(), b.to_string()));
        }
        Ok(ClassPairing { pairs })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct SeriesKey {
    pub dataset: String,
    pub task: Task,
    pub window: usize,
    pub shift: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DropEntry {
    pub penultimate_layer: String,
    pub ultimate_layer: String,
    pub penultimate: Option<f64>,
    pub ultimate: Option<f64>,
    /// Percent; `None` when a layer is absent or the metric is undefined.
    pub relative_drop: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LayerSeries {
    pub key: SeriesKey,
    pub accuracy: LayerAccuracyVector,
    /// Per class, F1 at each present layer in layer order.
    pub class_f1: Vec<(String, LayerAccuracyVector)>,
    /// Layers of the dataset with no result in this series.
    pub absent_layers: Vec<String>,
    pub drop: DropEntry,
    pub fingerprints: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrelationRow {
    pub task: Task,
    pub window: usize,
    pub shift: i32,
    pub class_a: String,
    pub class_b: String,
    /// `None` when undefined, e.g. a constant vector.
    pub r: Option<f64>,
    pub layers: usize,
}

pub const TOTAL_OVERALL: &str = "total_overall";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub series: Vec<LayerSeries>,
    pub correlations: Vec<CorrelationRow>,
    pub paired_datasets: Option<(String, String)>,
}

#[derive(Debug, Clone, Default)]
pub struct SweepOptions {
    /// Layer order per dataset; falls back to `layer_index` order of the rows.
    pub layer_orders: BTreeMap<String, Vec<String>>,
    /// Explicit (penultimate, ultimate) layers; defaults to the last two in layer order.
    pub drop_layers: Option<(String, String)>,
    /// Datasets to correlate and how their classes pair up.
    pub pairing: Option<(String, String, ClassPairing)>,
}

/// Layer accuracy vectors, top-layer drop and cross-dataset correlations.
pub fn layer_sweep_report(rows: &[ResultRow], options: &SweepOptions) -> SweepReport {
    let mut groups: BTreeMap<SeriesKey, Vec<&ResultRow>> = BTreeMap::new();
    for r in rows {
        let key = SeriesKey {
            dataset: r.dataset.clone(),
            task: r.task,
            window: r.window,
            shift: r.shift,
        };
        groups.entry(key).or_default().push(r);
    }

    let mut series = Vec::new();
    for (key, mut members) in groups {
        members.sort_by_key(|r| (r.layer_index, r.fingerprint.clone()));
        let order: Vec<String> = match options.layer_orders.get(&key.dataset) {
            Some(o) => o.clone(),
            None => {
                let mut o: Vec<String> = members.iter().map(|r| r.layer.clone()).collect();
                o.dedup();
                o
            }
        };
        let by_layer = |layer: &str| members.iter().find(|r| r.layer == layer).copied();
        let present: Vec<&ResultRow> = order.iter().filter_map(|l| by_layer(l)).collect();
        let accuracy = LayerAccuracyVector {
            entries: present
                .iter()
                .map(|r| (r.layer.clone(), r.accuracy))
                .collect(),
        };
        let classes: Vec<String> = present
            .first()
            .map(|r| r.classes.clone())
            .unwrap_or_default();
        let class_f1 = classes
            .iter()
            .enumerate()
            .map(|(ci, class)| {
                let entries = present
                    .iter()
                    .filter(|r| r.classes.get(ci) == Some(class))
                    .map(|r| (r.layer.clone(), r.per_class[ci].f1))
                    .collect();
                (class.clone(), LayerAccuracyVector { entries })
            })
            .collect();
        let absent_layers = order
            .iter()
            .filter(|l| by_layer(l).is_none())
            .cloned()
            .collect();

        let (pen, ult) = match &options.drop_layers {
            Some((p, u)) => (p.clone(), u.clone()),
            None if order.len() >= 2 => (
                order[order.len() - 2].clone(),
                order[order.len() - 1].clone(),
            ),
            None => (String::new(), order.last().cloned().unwrap_or_default()),
        };
        let pen_acc = by_layer(&pen).map(|r| r.accuracy);
        let ult_acc = by_layer(&ult).map(|r| r.accuracy);
        let drop = DropEntry {
            relative_drop: match (pen_acc, ult_acc) {
                (Some(p), Some(u)) => relative_drop(p, u).ok(),
                _ => None,
            },
            penultimate_layer: pen,
            ultimate_layer: ult,
            penultimate: pen_acc,
            ultimate: ult_acc,
        };

        series.push(LayerSeries {
            key,
            accuracy,
            class_f1,
            absent_layers,
            drop,
            fingerprints: present.iter().map(|r| r.fingerprint.clone()).collect(),
        });
    }

    let mut correlations = Vec::new();
    let mut paired_datasets = None;
    if let Some((a, b, pairing)) = &options.pairing {
        paired_datasets = Some((a.clone(), b.clone()));
        for sa in series.iter().filter(|s| &s.key.dataset == a) {
            let Some(sb) = series.iter().find(|s| {
                &s.key.dataset == b
                    && s.key.task == sa.key.task
                    && s.key.window == sa.key.window
                    && s.key.shift == sa.key.shift
            }) else {
                continue;
            };
            let correlate = |va: &LayerAccuracyVector, vb: &LayerAccuracyVector| {
                let (xs, ys): (Vec<f64>, Vec<f64>) = va
                    .entries
                    .iter()
                    .filter_map(|(l, x)| vb.get(l).map(|y| (*x, y)))
                    .unzip();
                (pearson(&xs, &ys).ok(), xs.len())
            };
            let key = &sa.key;
            for (task, class_a, class_b) in pairing.pairs.iter().filter(|p| p.0 == key.task) {
                let find = |s: &LayerSeries, c: &str| {
                    s.class_f1
                        .iter()
                        .find(|(n, _)| n == c)
                        .map(|(_, v)| v.clone())
                };
                let (r, layers) = match (find(sa, class_a), find(sb, class_b)) {
                    (Some(va), Some(vb)) => correlate(&va, &vb),
                    _ => (None, 0),
                };
                correlations.push(CorrelationRow {
                    task: *task,
                    window: key.window,
                    shift: key.shift,
                    class_a: class_a.clone(),
                    class_b: class_b.clone(),
                    r,
                    layers,
                });
            }
            let (r, layers) = correlate(&sa.accuracy, &sb.accuracy);
            correlations.push(CorrelationRow {
                task: key.task,
                window: key.window,
                shift: key.shift,
                class_a: TOTAL_OVERALL.to_string(),
                class_b: TOTAL_OVERALL.to_string(),
                r,
                layers,
            });
        }
    }

    SweepReport {
        series,
        correlations,
        paired_datasets,
    }
}
