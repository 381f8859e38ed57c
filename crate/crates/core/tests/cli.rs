use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::{json, Value};

fn layerscope(args: &[&str], env: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_layerscope"));
    cmd.args(args).env_remove("LAYERSCOPE_WORKERS");
    for (k, v) in env {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

fn write_json(path: &Path, v: &Value) {
    fs::write(path, serde_json::to_string_pretty(v).unwrap()).unwrap();
}

/// Generates a small two-layer synthetic dataset through the CLI.
fn synth(dir: &Path, name: &str, seed: u64, frames: usize) -> std::path::PathBuf {
    let spec = dir.join(format!("{name}.json"));
    write_json(
        &spec,
        &json!({
            "kind": "linear",
            "n_utterances": 12,
            "frames_per_utt": frames,
            "dim": 6,
            "n_classes": 3,
            "dataset_name": name,
            "layers": [
                {"layer_id": "l1", "content": "noise"},
                {"layer_id": "l2", "content": "signal"}
            ]
        }),
    );
    let root = dir.join(name);
    let seed = seed.to_string();
    let o = layerscope(
        &["synth", p(&spec), "--out", p(&root), "--seed", &seed],
        &[],
    );
    assert!(o.status.success(), "{}", stderr(&o));
    root
}

fn small_plan(path: &Path, datasets: &[&Path], out: &Path, extra: Value) {
    let mut plan = json!({
        "datasets": datasets.iter().map(|d| p(d)).collect::<Vec<_>>(),
        "tasks": ["phoneme"],
        "output_dir": p(out),
        "probe": {"hidden_size": 16, "epochs": 3}
    });
    for (k, v) in extra.as_object().unwrap() {
        plan[k] = v.clone();
    }
    write_json(path, &plan);
}

#[test]
fn validate_synth_output() {
    let dir = tempfile::tempdir().unwrap();
    let root = synth(dir.path(), "toy", 1, 20);
    let o = layerscope(&["validate", p(&root)], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("0 violations"));
    assert!(root.join("resolved-config.json").exists());

    fs::remove_file(root.join("l1").join("utt00000.act")).unwrap();
    let o = layerscope(
        &["validate", p(&root), "--out", p(&dir.path().join("v"))],
        &[],
    );
    assert_eq!(o.status.code(), Some(2));
    assert!(
        stdout(&o).contains("missing tensor for layer \"l1\", utterance \"utt00000\""),
        "{}",
        stdout(&o)
    );
    assert!(dir.path().join("v/resolved-config.json").exists());
}

#[test]
fn validate_builtin_maps() {
    let o = layerscope(&["validate", "--builtin"], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));
    let text = stdout(&o);
    assert!(
        text.contains("phonemes 40, graphemes 28, place 9, manner 7: 0 violations"),
        "{text}"
    );
    assert!(
        text.contains("phonemes 34, graphemes 37, place 12, manner 9: 0 violations"),
        "{text}"
    );
}

#[test]
fn run_four_cells_then_resume() {
    let dir = tempfile::tempdir().unwrap();
    let root = synth(dir.path(), "toy", 2, 20);
    let out = dir.path().join("out");
    let plan = dir.path().join("plan.json");
    small_plan(&plan, &[&root], &out, json!({"window_radii": [0, 1]}));

    let o = layerscope(&["run", p(&plan)], &[("LAYERSCOPE_WORKERS", "3")]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let csv = fs::read_to_string(out.join("results.csv")).unwrap();
    assert_eq!(csv.lines().count(), 5, "{csv}");
    assert!(csv.starts_with("dataset,task,layer,layer_index,window,shift,seed,accuracy,"));
    let resolved: Value =
        serde_json::from_str(&fs::read_to_string(out.join("resolved-config.json")).unwrap())
            .unwrap();
    assert_eq!(resolved["workers"], 3);
    assert_eq!(resolved["probe"]["hidden_size"], 16);
    assert_eq!(resolved["probe"]["learning_rate"], 1e-3);
    assert_eq!(resolved["optimizer"]["name"], "adam");
    assert_eq!(resolved["cells"].as_array().unwrap().len(), 4);

    let o = layerscope(&["run", p(&plan), "--workers", "1"], &[]);
    assert_eq!(o.status.code(), Some(0));
    assert!(
        stdout(&o).contains("0 trained, 4 skipped"),
        "{}",
        stdout(&o)
    );
    assert_eq!(fs::read_to_string(out.join("results.csv")).unwrap(), csv);
}

#[test]
fn partial_failure_exits_one() {
    let dir = tempfile::tempdir().unwrap();
    // two frames per utterance: a shift of 3 leaves nothing labelled
    let root = synth(dir.path(), "tiny", 3, 2);
    let out = dir.path().join("out");
    let plan = dir.path().join("plan.json");
    small_plan(
        &plan,
        &[&root],
        &out,
        json!({"layers": ["l2"], "shifts": [0, 3]}),
    );
    let o = layerscope(&["run", p(&plan)], &[]);
    assert_eq!(o.status.code(), Some(1), "{}", stderr(&o));
    assert!(stderr(&o).contains("no labelled frames"), "{}", stderr(&o));
    let failures: Value =
        serde_json::from_str(&fs::read_to_string(out.join("failures.json")).unwrap()).unwrap();
    assert_eq!(failures.as_array().unwrap().len(), 1);
    assert_eq!(
        fs::read_to_string(out.join("results.csv"))
            .unwrap()
            .lines()
            .count(),
        2
    );
}

#[test]
fn invalid_inputs_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let plan = dir.path().join("plan.json");
    fs::write(
        &plan,
        "{\"datasets\": [\"x\"],\n \"tasks\": [\"phoneme\"],, }",
    )
    .unwrap();
    let o = layerscope(&["run", p(&plan)], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("byte"), "{}", stderr(&o));

    let o = layerscope(&["run", "--bogus-flag", p(&plan)], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("Usage"));

    let root = synth(dir.path(), "toy", 4, 10);
    small_plan(
        &plan,
        &[&root],
        &dir.path().join("out"),
        json!({"tasks": ["grapheme"]}),
    );
    let o = layerscope(&["run", p(&plan)], &[]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("grapheme"), "{}", stderr(&o));
}

#[test]
fn report_with_pairing() {
    let dir = tempfile::tempdir().unwrap();
    let a = synth(dir.path(), "en", 5, 20);
    let b = synth(dir.path(), "ar", 6, 20);
    let out = dir.path().join("out");
    let plan = dir.path().join("plan.json");
    small_plan(&plan, &[&a, &b], &out, json!({"shifts": [-1, 0]}));
    let o = layerscope(&["run", p(&plan)], &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let pairing = dir.path().join("pairs.tsv");
    fs::write(&pairing, "phoneme\tc0\tc0\nphoneme\tc1\tc2\n").unwrap();
    let rep = dir.path().join("rep");
    let args = [
        "report",
        p(&out),
        "--pairing",
        p(&pairing),
        "--pair",
        "en",
        "ar",
        "--out",
        p(&rep),
    ];
    let o = layerscope(&args, &[]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));

    let corr = fs::read_to_string(rep.join("table3_correlation.csv")).unwrap();
    // two shift series, each with two pairs plus the overall row
    assert_eq!(corr.lines().count(), 1 + 2 * 3, "{corr}");
    assert_eq!(
        corr.lines().filter(|l| l.contains("total_overall")).count(),
        2
    );
    let fig4 = fs::read_to_string(rep.join("fig4_shift.csv")).unwrap();
    assert_eq!(fig4.lines().count(), 1 + 2 * 2 * 2);
    let fig1 = fs::read_to_string(rep.join("fig1_layer_accuracy.csv")).unwrap();
    assert_eq!(fig1.lines().count(), 1 + 2 * 2);
    let drop = fs::read_to_string(rep.join("table2_drop.csv")).unwrap();
    assert!(drop.lines().nth(1).unwrap().contains(",l1,l2,"), "{drop}");
    assert!(fs::read_to_string(rep.join("report_notes.txt"))
        .unwrap()
        .contains("total_overall"));

    let mut before = Vec::new();
    for entry in fs::read_dir(&rep).unwrap() {
        let path = entry.unwrap().path();
        before.push((path.clone(), fs::read(&path).unwrap()));
    }
    let o = layerscope(&args, &[]);
    assert_eq!(o.status.code(), Some(0));
    for (path, bytes) in before {
        assert_eq!(
            fs::read(&path).unwrap(),
            bytes,
            "{} changed",
            path.display()
        );
    }
}

#[test]
fn report_warns_about_missing_cells() {
    let dir = tempfile::tempdir().unwrap();
    let root = synth(dir.path(), "toy", 7, 20);
    let out = dir.path().join("out");
    let plan = dir.path().join("plan.json");
    small_plan(&plan, &[&root], &out, json!({}));
    assert!(layerscope(&["run", p(&plan)], &[]).status.success());
    let cells: Vec<_> = fs::read_dir(out.join("cells"))
        .unwrap()
        .map(|e| e.unwrap().path())
        .collect();
    let removed = cells[0].file_stem().unwrap().to_str().unwrap().to_string();
    fs::remove_file(&cells[0]).unwrap();
    let o = layerscope(&["report", p(&out)], &[]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains(&removed), "{}", stderr(&o));
    let fig1 = fs::read_to_string(out.join("report/fig1_layer_accuracy.csv")).unwrap();
    assert_eq!(fig1.lines().count(), 2);
}

#[test]
fn report_on_empty_results() {
    let dir = tempfile::tempdir().unwrap();
    let o = layerscope(&["report", p(dir.path())], &[]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("warning"));
    let fig = fs::read_to_string(dir.path().join("report/fig4_shift.csv")).unwrap();
    assert_eq!(
        fig,
        "figure,dataset,task,window,shift,layer,layer_index,series,value,fingerprint\n"
    );
    assert!(dir.path().join("report/resolved-config.json").exists());
}

#[test]
fn shipped_presets_parse() {
    let presets = Path::new(env!("CARGO_MANIFEST_DIR")).join("presets");
    for name in ["window_sweep.json", "shift_sweep.json", "articulatory.json"] {
        layerscope::experiments::ExperimentPlan::load(&presets.join(name)).unwrap();
    }
    let pairing =
        layerscope::experiments::ClassPairing::load(&presets.join("en_ar_pairing.tsv")).unwrap();
    assert_eq!(pairing.pairs.len(), 16);
}
