//! Synthetic datasets with a known relation between activations and labels.
//!
//! Every base frame carries one token, so token shifts and frame shifts
//! coincide. Class centroids are orthonormal directions (Gram-Schmidt on a
//! seeded gaussian matrix) scaled so that they sit at least `4 * noise_std`
//! apart.
//!
//! * `linear`: frame = centroid of its label + noise.
//! * `context`: frame = centroid of a hidden class `z_t` + noise, and the
//!   label is `(z_{t-1} + z_{t+1}) mod C`. The current frame alone carries
//!   no information; the first and last frame are unlabelled.
//! * `causal`: `h_t = centroid(y_t) + 0.5 * h_{t-1}`, frame = `h_t` + noise.
//!   Past labels are recoverable, future ones are not.
//!
//! Noise layers hold pure gaussian noise independent of the labels.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::alignment::{label_path, write_label_file, LabelSegment};
use crate::error::{Error, Result};
use crate::feature_maps::LabelInventory;
use crate::tensor_store::{
    check_id, write_activations, ActivationMatrix, LabelSetSpec, LayerSpec, Manifest, Splits,
};

/// Seconds per base frame. Dyadic, so frame times are exact both in binary
/// and in the six-decimal label files.
pub const SYNTH_FRAME_SHIFT: f64 = 1.0 / 64.0;
pub const CAUSAL_DECAY: f64 = 0.5;
pub const LABEL_SET: &str = "phoneme";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SynthKind {
    Linear,
    Context,
    Causal,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LayerContent {
    Signal,
    Noise,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynthLayer {
    pub layer_id: String,
    pub content: LayerContent,
    #[serde(default = "one")]
    pub time_scale: u32,
}

fn one() -> u32 {
    1
}

fn default_noise_std() -> f64 {
    0.1
}

fn default_dataset_name() -> String {
    "synth".to_string()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub kind: SynthKind,
    pub n_utterances: usize,
    pub frames_per_utt: usize,
    pub dim: usize,
    pub n_classes: usize,
    #[serde(default = "default_noise_std")]
    pub noise_std: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_dataset_name")]
    pub dataset_name: String,
    /// Defaults to a single signal layer named `signal`.
    #[serde(default)]
    pub layers: Vec<SynthLayer>,
}

impl SynthSpec {
    pub fn new(
        kind: SynthKind,
        n_utterances: usize,
        frames_per_utt: usize,
        dim: usize,
        n_classes: usize,
    ) -> Self {
        SynthSpec {
            kind,
            n_utterances,
            frames_per_utt,
            dim,
            n_classes,
            noise_std: default_noise_std(),
            seed: 0,
            dataset_name: default_dataset_name(),
            layers: Vec::new(),
        }
    }

    pub fn resolved_layers(&self) -> Vec<SynthLayer> {
        if self.layers.is_empty() {
            vec![SynthLayer {
                layer_id: "signal".into(),
                content: LayerContent::Signal,
                time_scale: 1,
            }]
        } else {
            self.layers.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_classes < 2 {
            return Err(Error::validation("n_classes", "must be >= 2"));
        }
        if self.kind == SynthKind::Linear && self.dim < self.n_classes {
            return Err(Error::validation(
                "dim",
                "linear kind needs dim >= n_classes",
            ));
        }
        if self.dim == 0 {
            return Err(Error::validation("dim", "must be >= 1"));
        }
        if self.n_utterances < 3 {
            return Err(Error::validation(
                "n_utterances",
                "need >= 3 for train/dev/test",
            ));
        }
        let min_frames = if self.kind == SynthKind::Context {
            3
        } else {
            1
        };
        if self.frames_per_utt < min_frames {
            return Err(Error::validation(
                "frames_per_utt",
                format!("must be >= {min_frames}"),
            ));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return Err(Error::validation("noise_std", "must be finite and >= 0"));
        }
        check_id("dataset_name", &self.dataset_name)?;
        let layers = self.resolved_layers();
        for (i, l) in layers.iter().enumerate() {
            check_id("layer_id", &l.layer_id)?;
            if l.time_scale == 0 {
                return Err(Error::validation("time_scale", "must be >= 1"));
            }
            if layers[..i].iter().any(|p| p.layer_id == l.layer_id) {
                return Err(Error::validation(
                    "layers",
                    format!("duplicate layer {:?}", l.layer_id),
                ));
            }
        }
        Ok(())
    }

    fn centroid_scale(&self) -> f64 {
        // orthonormal rows are sqrt(2) apart
        (2.0 * std::f64::consts::SQRT_2 * self.noise_std).max(1.0)
    }
}

/// Unit-norm class directions; mutually orthogonal when `n <= dim`.
pub fn centroids(n: usize, dim: usize, rng: &mut impl Rng) -> Vec<Vec<f64>> {
    let mut rows: Vec<Vec<f64>> = Vec::with_capacity(n);
    while rows.len() < n {
        let mut v: Vec<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        if rows.len() < dim {
            for r in &rows {
                let proj: f64 = v.iter().zip(r).map(|(a, b)| a * b).sum();
                v.iter_mut().zip(r).for_each(|(a, b)| *a -= proj * b);
            }
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm < 1e-6 {
            continue;
        }
        v.iter_mut().for_each(|a| *a /= norm);
        rows.push(v);
    }
    rows
}

pub fn class_token(c: usize) -> String {
    format!("c{c}")
}

struct Utterance {
    /// Label per base frame, `None` where unlabelled.
    labels: Vec<Option<usize>>,
    /// Signal vector per base frame.
    signal: Vec<Vec<f64>>,
}

fn gaussian(rng: &mut impl Rng, std: f64) -> f64 {
    let z: f64 = StandardNormal.sample(rng);
    z * std
}

fn utterance(spec: &SynthSpec, centers: &[Vec<f64>], rng: &mut impl Rng) -> Utterance {
    let frames = spec.frames_per_utt;
    let c = spec.n_classes;
    let scale = spec.centroid_scale();
    let hidden: Vec<usize> = (0..frames).map(|_| rng.random_range(0..c)).collect();
    let mut signal = vec![vec![0.0; spec.dim]; frames];
    let labels: Vec<Option<usize>>;
    match spec.kind {
        SynthKind::Linear => {
            for (v, &z) in signal.iter_mut().zip(&hidden) {
                v.iter_mut()
                    .zip(&centers[z])
                    .for_each(|(a, b)| *a = scale * b);
            }
            labels = hidden.iter().map(|&z| Some(z)).collect();
        }
        SynthKind::Context => {
            for (v, &z) in signal.iter_mut().zip(&hidden) {
                v.iter_mut()
                    .zip(&centers[z])
                    .for_each(|(a, b)| *a = scale * b);
            }
            labels = (0..frames)
                .map(|t| (t > 0 && t + 1 < frames).then(|| (hidden[t - 1] + hidden[t + 1]) % c))
                .collect();
        }
        SynthKind::Causal => {
            let mut state = vec![0.0; spec.dim];
            for (v, &z) in signal.iter_mut().zip(&hidden) {
                state
                    .iter_mut()
                    .zip(&centers[z])
                    .for_each(|(h, b)| *h = scale * b + CAUSAL_DECAY * *h);
                v.copy_from_slice(&state);
            }
            labels = hidden.iter().map(|&z| Some(z)).collect();
        }
    }
    for v in &mut signal {
        v.iter_mut()
            .for_each(|a| *a += gaussian(rng, spec.noise_std));
    }
    Utterance { labels, signal }
}

/// Writes a complete dataset (manifest, activations, labels, inventory) under `root`.
pub fn generate(spec: &SynthSpec, root: &Path) -> Result<Manifest> {
    spec.validate()?;
    fs::create_dir_all(root).map_err(|e| Error::io(root, e))?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let centers = centroids(spec.n_classes, spec.dim, &mut rng);
    let layers = spec.resolved_layers();

    let inventory = LabelInventory::from_tokens(LABEL_SET, (0..spec.n_classes).map(class_token))?;
    let inv_dir = root.join("inventories");
    fs::create_dir_all(&inv_dir).map_err(|e| Error::io(&inv_dir, e))?;
    inventory.write(&inv_dir.join(format!("{LABEL_SET}.txt")))?;

    let n = spec.n_utterances;
    let held_out = ((n as f64 * 0.15).round() as usize).max(1);
    let n_train = n - 2 * held_out;
    let ids: Vec<String> = (0..n).map(|i| format!("utt{i:05}")).collect();

    let noise_scale = spec.centroid_scale();
    for id in &ids {
        let utt = utterance(spec, &centers, &mut rng);
        let segments: Vec<LabelSegment> = utt
            .labels
            .iter()
            .enumerate()
            .filter_map(|(t, l)| {
                l.map(|c| {
                    LabelSegment::new(
                        class_token(c),
                        t as f64 * SYNTH_FRAME_SHIFT,
                        (t + 1) as f64 * SYNTH_FRAME_SHIFT,
                    )
                })
            })
            .collect();
        write_label_file(&label_path(root, LABEL_SET, id), &segments)?;

        for layer in &layers {
            let ts = layer.time_scale as usize;
            let frames = spec.frames_per_utt.div_ceil(ts);
            let mut data = Vec::with_capacity(frames * spec.dim);
            for t in 0..frames {
                // base frame under this frame's center
                let base = ((2 * t + 1) * ts / 2).min(spec.frames_per_utt - 1);
                match layer.content {
                    LayerContent::Signal => data.extend(utt.signal[base].iter().map(|&v| v as f32)),
                    LayerContent::Noise => {
                        data.extend((0..spec.dim).map(|_| gaussian(&mut rng, noise_scale) as f32))
                    }
                }
            }
            let m = ActivationMatrix::new(
                id.as_str(),
                layer.layer_id.as_str(),
                frames,
                spec.dim,
                layer.time_scale,
                data,
            )?;
            write_activations(&m, root)?;
        }
    }

    let manifest = Manifest {
        dataset_name: spec.dataset_name.clone(),
        frame_shift: SYNTH_FRAME_SHIFT,
        layers: layers
            .iter()
            .map(|l| LayerSpec {
                layer_id: l.layer_id.clone(),
                dim: spec.dim,
                time_scale: l.time_scale,
            })
            .collect(),
        splits: Splits {
            train: ids[..n_train].to_vec(),
            dev: ids[n_train..n_train + held_out].to_vec(),
            test: ids[n_train + held_out..].to_vec(),
        },
        label_sets: BTreeMap::from([(
            LABEL_SET.to_string(),
            LabelSetSpec {
                inventory: format!("inventories/{LABEL_SET}.txt"),
            },
        )]),
        articulatory_maps: BTreeMap::new(),
        notes: format!(
            "synthetic {:?} dataset: {} classes, noise_std {}, seed {}",
            spec.kind, spec.n_classes, spec.noise_std, spec.seed
        ),
    };
    manifest.write(root)?;
    Ok(manifest)
}
