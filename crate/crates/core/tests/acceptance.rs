//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. An argument filters criteria by name.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;
use std::time::{Duration, Instant};

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use layerscope::alignment::{label_path, read_label_file, write_label_file};
use layerscope::experiments::{
    cell_path, layer_sweep_report, run_grid, ExperimentPlan, GridOutcome, ResultRow, SweepOptions,
    Task, RESULTS_CSV,
};
use layerscope::feature_maps::builtin::Language;
use layerscope::feature_maps::ArticulatoryMode;
use layerscope::metrics::{accuracy, pearson, per_class_prf, relative_drop, ConfusionMatrix};
use layerscope::probe::{loss_and_gradients, ProbeModel};
use layerscope::synth::{generate, LayerContent, SynthKind, SynthLayer, SynthSpec, LABEL_SET};
use layerscope::tensor_store::load_manifest;

type Check = std::result::Result<String, String>;
type Criterion = (&'static str, fn() -> Check);

fn ensure(cond: bool, msg: impl Into<String>) -> std::result::Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg.into())
    }
}

fn within(elapsed: Duration, limit_secs: u64) -> std::result::Result<(), String> {
    ensure(
        elapsed.as_secs_f64() < limit_secs as f64,
        format!("took {:.1}s, limit {limit_secs}s", elapsed.as_secs_f64()),
    )
}

fn io<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

fn random_model(rng: &mut ChaCha8Rng, d: usize, h: usize, c: usize) -> ProbeModel {
    let mut m = ProbeModel::zeros(d, h, c);
    m.w1.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    m.b1.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    m.w2.mapv_inplace(|_| rng.random_range(-1.0..1.0));
    m.b2.mapv_inplace(|_| rng.random_range(-0.5..0.5));
    m
}

/// Smallest |pre-activation| of the hidden layer over the batch.
fn min_kink_distance(m: &ProbeModel, x: &Array2<f64>) -> f64 {
    let z = x.dot(&m.w1.t()) + &m.b1;
    z.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()))
}

fn gradient_oracle() -> Check {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0x9e37);
    let eps = 1e-5;
    let mut worst: f64 = 0.0;
    let mut checked = 0usize;
    for _ in 0..100 {
        let (d, h, c, n) = (
            rng.random_range(1..=20),
            rng.random_range(1..=20),
            rng.random_range(2..=20),
            rng.random_range(1..=20),
        );
        let (model, x) = loop {
            let m = random_model(&mut rng, d, h, c);
            let x = Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0));
            // keep clear of the ReLU kink so central differences are valid
            if min_kink_distance(&m, &x) > 1e-3 {
                break (m, x);
            }
        };
        let labels: Vec<u32> = (0..n).map(|_| rng.random_range(0..c as u32)).collect();
        let (_, grads) = loss_and_gradients(&model, x.view(), &labels).map_err(io)?;
        let loss_at = |m: &ProbeModel| loss_and_gradients(m, x.view(), &labels).unwrap().0;

        let mut compare = |analytic: f64, numeric: f64| {
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max(rel);
            checked += 1;
        };
        for idx in 0..model.w1.len() {
            let (i, j) = (idx / d, idx % d);
            let (mut p, mut q) = (model.clone(), model.clone());
            p.w1[[i, j]] += eps;
            q.w1[[i, j]] -= eps;
            compare(grads.w1[[i, j]], (loss_at(&p) - loss_at(&q)) / (2.0 * eps));
        }
        for i in 0..h {
            let (mut p, mut q) = (model.clone(), model.clone());
            p.b1[i] += eps;
            q.b1[i] -= eps;
            compare(grads.b1[i], (loss_at(&p) - loss_at(&q)) / (2.0 * eps));
        }
        for idx in 0..model.w2.len() {
            let (i, j) = (idx / h, idx % h);
            let (mut p, mut q) = (model.clone(), model.clone());
            p.w2[[i, j]] += eps;
            q.w2[[i, j]] -= eps;
            compare(grads.w2[[i, j]], (loss_at(&p) - loss_at(&q)) / (2.0 * eps));
        }
        for i in 0..c {
            let (mut p, mut q) = (model.clone(), model.clone());
            p.b2[i] += eps;
            q.b2[i] -= eps;
            compare(grads.b2[i], (loss_at(&p) - loss_at(&q)) / (2.0 * eps));
        }
    }
    let elapsed = start.elapsed();
    ensure(
        worst < 1e-4,
        format!("max relative error {worst:.3e} >= 1e-4"),
    )?;
    within(elapsed, 30)?;
    Ok(format!(
        "100 models, {checked} partials, max relative error {worst:.2e}, {:.1}s",
        elapsed.as_secs_f64()
    ))
}

fn plan_for(root: &Path, out: &Path) -> ExperimentPlan {
    ExperimentPlan::new(
        vec![root.to_path_buf()],
        vec![Task::Phoneme],
        out.to_path_buf(),
    )
}

fn run(plan: &ExperimentPlan) -> std::result::Result<GridOutcome, String> {
    let outcome = run_grid(plan).map_err(io)?;
    ensure(
        outcome.failures.is_empty(),
        format!("cell failures: {:?}", outcome.failures),
    )?;
    Ok(outcome)
}

fn find<'a>(
    rows: &'a [ResultRow],
    layer: &str,
    window: usize,
    shift: i32,
) -> std::result::Result<&'a ResultRow, String> {
    rows.iter()
        .find(|r| r.layer == layer && r.window == window && r.shift == shift)
        .ok_or_else(|| format!("no result for layer {layer} w={window} k={shift}"))
}

/// Majority-class rate of the test split; synthetic segments are one frame each.
fn test_majority_rate(root: &Path) -> std::result::Result<f64, String> {
    let manifest = load_manifest(root).map_err(io)?;
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for utt in &manifest.splits.test {
        for seg in read_label_file(&label_path(root, LABEL_SET, utt)).map_err(io)? {
            *counts.entry(seg.token).or_default() += 1;
        }
    }
    let total: usize = counts.values().sum();
    Ok(*counts.values().max().unwrap_or(&0) as f64 / total.max(1) as f64)
}

/// Permutes tokens across every segment of the dataset, keeping the segment times.
fn shuffle_labels(root: &Path, seed: u64) -> std::result::Result<(), String> {
    let manifest = load_manifest(root).map_err(io)?;
    let ids: Vec<String> = manifest.splits.all().cloned().collect();
    let mut files = Vec::new();
    let mut tokens = Vec::new();
    for utt in &ids {
        let path = label_path(root, LABEL_SET, utt);
        let segs = read_label_file(&path).map_err(io)?;
        tokens.extend(segs.iter().map(|s| s.token.clone()));
        files.push((path, segs));
    }
    tokens.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let mut it = tokens.into_iter();
    for (path, mut segs) in files {
        for s in &mut segs {
            s.token = it.next().unwrap();
        }
        write_label_file(&path, &segs).map_err(io)?;
    }
    Ok(())
}

fn linear_spec() -> SynthSpec {
    let mut spec = SynthSpec::new(SynthKind::Linear, 100, 200, 20, 5);
    spec.noise_std = 0.1;
    spec.seed = 11;
    spec
}

fn separability() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(io)?;
    let root = dir.path().join("data");
    generate(&linear_spec(), &root).map_err(io)?;
    let outcome = run(&plan_for(&root, &dir.path().join("out")))?;
    let row = find(&outcome.rows, "signal", 0, 0)?;
    let elapsed = start.elapsed();
    ensure(
        row.accuracy >= 0.99,
        format!("test accuracy {:.4} < 0.99", row.accuracy),
    )?;
    within(elapsed, 120)?;
    Ok(format!(
        "20000 frames, test accuracy {:.4}, best epoch {}, {:.1}s",
        row.accuracy,
        row.best_epoch + 1,
        elapsed.as_secs_f64()
    ))
}

fn chance_floor() -> Check {
    let dir = tempfile::tempdir().map_err(io)?;
    let root = dir.path().join("data");
    generate(&linear_spec(), &root).map_err(io)?;
    shuffle_labels(&root, 99)?;
    let majority = test_majority_rate(&root)?;
    let outcome = run(&plan_for(&root, &dir.path().join("out")))?;
    let acc = find(&outcome.rows, "signal", 0, 0)?.accuracy;
    ensure(
        (acc - majority).abs() <= 0.05,
        format!("accuracy {acc:.4} vs majority rate {majority:.4}"),
    )?;
    Ok(format!(
        "shuffled labels: accuracy {acc:.4}, majority rate {majority:.4}"
    ))
}

fn window_effect() -> Check {
    let dir = tempfile::tempdir().map_err(io)?;
    let root = dir.path().join("data");
    let mut spec = SynthSpec::new(SynthKind::Context, 100, 200, 8, 4);
    spec.seed = 21;
    generate(&spec, &root).map_err(io)?;
    let chance = test_majority_rate(&root)?;
    let mut plan = plan_for(&root, &dir.path().join("out"));
    plan.window_radii = vec![0, 1, 7];
    let outcome = run(&plan)?;
    let acc = |w| find(&outcome.rows, "signal", w, 0).map(|r| r.accuracy);
    let (w0, w1, w7) = (acc(0)?, acc(1)?, acc(7)?);
    let detail = format!("chance {chance:.4}, w=0 {w0:.4}, w=1 {w1:.4}, w=7 {w7:.4}");
    ensure(
        w0 <= chance + 0.10,
        format!("w=0 above chance + 0.10: {detail}"),
    )?;
    ensure(w1 >= 0.95, format!("w=1 below 0.95: {detail}"))?;
    ensure(w7 >= w0, format!("w=7 below w=0: {detail}"))?;
    Ok(detail)
}

fn shift_asymmetry() -> Check {
    let dir = tempfile::tempdir().map_err(io)?;
    let root = dir.path().join("data");
    let mut spec = SynthSpec::new(SynthKind::Causal, 100, 200, 8, 4);
    spec.seed = 31;
    generate(&spec, &root).map_err(io)?;
    let mut plan = plan_for(&root, &dir.path().join("out"));
    plan.shifts = vec![-3, -2, -1, 0, 1];
    let outcome = run(&plan)?;
    let acc = |k| find(&outcome.rows, "signal", 0, k).map(|r| r.accuracy);
    let a: BTreeMap<i32, f64> = (-3..=1)
        .map(|k| Ok((k, acc(k)?)))
        .collect::<std::result::Result<_, String>>()?;
    let detail = a
        .iter()
        .map(|(k, v)| format!("k={k} {v:.4}"))
        .collect::<Vec<_>>()
        .join(", ");
    ensure(
        a[&-1] - a[&1] >= 0.2,
        format!("past minus future {:.4} < 0.2: {detail}", a[&-1] - a[&1]),
    )?;
    for k in [-2, -3] {
        ensure(
            a[&k] <= a[&(k + 1)] + 0.02,
            format!("not monotone from k={} to k={k}: {detail}", k + 1),
        )?;
    }
    Ok(detail)
}

fn metric_oracles() -> Check {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for trial in 0..1000 {
        let c = rng.random_range(1..=10usize);
        let n = rng.random_range(1..=200usize);
        let gold: Vec<u32> = (0..n).map(|_| rng.random_range(0..c as u32)).collect();
        let pred: Vec<u32> = gold
            .iter()
            .map(|&g| {
                if rng.random_bool(0.6) {
                    g
                } else {
                    rng.random_range(0..c as u32)
                }
            })
            .collect();
        let cm = ConfusionMatrix::from_predictions(&gold, &pred, c).map_err(io)?;
        let correct = gold.iter().zip(&pred).filter(|(g, p)| g == p).count();
        ensure(
            accuracy(&cm).map_err(io)? == correct as f64 / n as f64,
            format!("accuracy mismatch in matrix {trial}"),
        )?;
        let prf = per_class_prf(&cm).map_err(io)?;
        for (k, s) in prf.iter().enumerate() {
            let k = k as u32;
            let tp = gold
                .iter()
                .zip(&pred)
                .filter(|(g, p)| **g == k && **p == k)
                .count();
            let predicted = pred.iter().filter(|p| **p == k).count();
            let support = gold.iter().filter(|g| **g == k).count();
            let p = if predicted == 0 {
                0.0
            } else {
                tp as f64 / predicted as f64
            };
            let r = if support == 0 {
                0.0
            } else {
                tp as f64 / support as f64
            };
            let f = if p + r == 0.0 {
                0.0
            } else {
                2.0 * p * r / (p + r)
            };
            ensure(
                (s.precision, s.recall, s.f1, s.support) == (p, r, f, support as u64),
                format!("PRF mismatch in matrix {trial}, class {k}"),
            )?;
        }
    }

    let mut worst: f64 = 0.0;
    let mut worst_affine: f64 = 0.0;
    for _ in 0..1000 {
        let n = rng.random_range(3..=20usize);
        let x: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let y: Vec<f64> = (0..n).map(|_| rng.random_range(0.0..1.0)).collect();
        let nf = n as f64;
        let (sx, sy) = (x.iter().sum::<f64>(), y.iter().sum::<f64>());
        let sxy: f64 = x.iter().zip(&y).map(|(a, b)| a * b).sum();
        let sxx: f64 = x.iter().map(|a| a * a).sum();
        let syy: f64 = y.iter().map(|b| b * b).sum();
        let oracle = (nf * sxy - sx * sy) / ((nf * sxx - sx * sx) * (nf * syy - sy * sy)).sqrt();
        let r = pearson(&x, &y).map_err(io)?;
        worst = worst.max((r - oracle).abs());

        let (a, b) = (rng.random_range(0.1..10.0), rng.random_range(-5.0..5.0));
        let ax: Vec<f64> = x.iter().map(|v| a * v + b).collect();
        worst_affine = worst_affine.max((pearson(&ax, &y).map_err(io)? - r).abs());
    }
    ensure(
        worst <= 1e-12,
        format!("pearson deviates from direct formula by {worst:.2e}"),
    )?;
    ensure(
        worst_affine <= 1e-12,
        format!("affine invariance off by {worst_affine:.2e}"),
    )?;
    let drop = relative_drop(0.5, 0.45).map_err(io)?;
    ensure(drop == 10.0, format!("relative_drop(0.5, 0.45) = {drop:?}"))?;
    Ok(format!(
        "1000 matrices exact, pearson max dev {worst:.1e}, affine max dev {worst_affine:.1e}, drop {drop}"
    ))
}

fn remap_consistency() -> Check {
    let mut parts = Vec::new();
    for (lang, want) in [
        (Language::English, [40, 9, 7]),
        (Language::Arabic, [34, 12, 9]),
    ] {
        let got = [
            lang.phonemes().len(),
            lang.map(ArticulatoryMode::Place)
                .map_err(io)?
                .target()
                .len(),
            lang.map(ArticulatoryMode::Manner)
                .map_err(io)?
                .target()
                .len(),
        ];
        ensure(got == want, format!("{lang:?}: got {got:?}, want {want:?}"))?;
        parts.push(format!(
            "{lang:?} {} -> {} place / {} manner",
            got[0], got[1], got[2]
        ));
    }
    Ok(parts.join("; "))
}

fn determinism() -> Check {
    let start = Instant::now();
    let dir = tempfile::tempdir().map_err(io)?;
    let root = dir.path().join("data");
    let mut spec = SynthSpec::new(SynthKind::Causal, 30, 60, 6, 3);
    spec.seed = 41;
    spec.layers = vec![
        SynthLayer {
            layer_id: "a".into(),
            content: LayerContent::Signal,
            time_scale: 1,
        },
        SynthLayer {
            layer_id: "b".into(),
            content: LayerContent::Noise,
            time_scale: 1,
        },
    ];
    generate(&spec, &root).map_err(io)?;

    let out_a = dir.path().join("run_a");
    let out_b = dir.path().join("run_b");
    let mut plan = plan_for(&root, &out_a);
    plan.window_radii = vec![0, 1];
    plan.shifts = vec![0, -1];
    plan.seed = 7;
    plan.probe.hidden_size = Some(32);
    plan.probe.epochs = Some(5);
    let first = run(&plan)?;
    ensure(
        first.trained.len() == 8,
        format!("expected 8 cells, trained {}", first.trained.len()),
    )?;
    plan.output_dir = out_b.clone();
    run(&plan)?;
    let csv_a = fs::read(out_a.join(RESULTS_CSV)).map_err(io)?;
    let csv_b = fs::read(out_b.join(RESULTS_CSV)).map_err(io)?;
    ensure(csv_a == csv_b, "two runs gave different results.csv")?;

    let victim = first.trained[3].clone();
    let victim_path = cell_path(&out_a, &victim);
    let cell_before = fs::read(&victim_path).map_err(io)?;
    fs::remove_file(&victim_path).map_err(io)?;
    plan.output_dir = out_a.clone();
    let resumed = run(&plan)?;
    ensure(
        resumed.trained == vec![victim.clone()] && resumed.skipped.len() == 7,
        format!(
            "resume trained {:?}, skipped {}",
            resumed.trained,
            resumed.skipped.len()
        ),
    )?;
    ensure(
        fs::read(&victim_path).map_err(io)? == cell_before,
        "regenerated cell differs",
    )?;
    ensure(
        fs::read(out_a.join(RESULTS_CSV)).map_err(io)? == csv_a,
        "results.csv differs after resume",
    )?;
    let elapsed = start.elapsed();
    within(elapsed, 300)?;
    Ok(format!(
        "8 cells, identical results.csv ({} bytes); resume retrained only {victim}; {:.1}s",
        csv_a.len(),
        elapsed.as_secs_f64()
    ))
}

fn layer_ordering() -> Check {
    let dir = tempfile::tempdir().map_err(io)?;
    let root = dir.path().join("data");
    let mut spec = SynthSpec::new(SynthKind::Linear, 60, 100, 10, 5);
    spec.seed = 51;
    spec.layers = ["L1", "L2", "L3"]
        .into_iter()
        .map(|id| SynthLayer {
            layer_id: id.into(),
            content: if id == "L2" {
                LayerContent::Signal
            } else {
                LayerContent::Noise
            },
            time_scale: 1,
        })
        .collect();
    generate(&spec, &root).map_err(io)?;
    let outcome = run(&plan_for(&root, &dir.path().join("out")))?;
    let report = layer_sweep_report(&outcome.rows, &SweepOptions::default());
    let series = report.series.first().ok_or("empty report")?;
    let acc = |l: &str| series.accuracy.get(l).ok_or(format!("no accuracy for {l}"));
    let (l1, l2, l3) = (acc("L1")?, acc("L2")?, acc("L3")?);
    let detail = format!("L1 {l1:.4}, L2 {l2:.4}, L3 {l3:.4}");
    ensure(
        l2 - l1 >= 0.3 && l2 - l3 >= 0.3,
        format!("margin below 0.3: {detail}"),
    )?;
    Ok(detail)
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("gradient_oracle", gradient_oracle),
        ("separability", separability),
        ("chance_floor", chance_floor),
        ("window_effect", window_effect),
        ("shift_asymmetry", shift_asymmetry),
        ("metric_oracles", metric_oracles),
        ("remap_consistency", remap_consistency),
        ("determinism", determinism),
        ("layer_ordering", layer_ordering),
    ];
    let filters: Vec<String> = std::env::args()
        .skip(1)
        .filter(|a| !a.starts_with('-'))
        .collect();
    let mut failed = 0;
    let mut ran = 0;
    for (name, check) in criteria {
        if !filters.is_empty() && !filters.iter().any(|f| name.contains(f.as_str())) {
            continue;
        }
        ran += 1;
        match check() {
            Ok(detail) => println!("PASS {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {name}: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
