//! Activation dumps and the dataset manifest.
//!
//! A dataset root looks like:
//!
//! ```text
//! <root>/manifest.json
//! <root>/<layer_id>/<utterance_id>.act
//! <root>/labels/<label_set>/<utterance_id>.lab
//! ```
//!
//! `.act` files are a fixed 32-byte little-endian header followed by
//! `frames * dim` IEEE-754 `f32` values in row-major order:
//!
//! | offset | size | field                     |
//! |--------|------|---------------------------|
//! | 0      | 4    | magic `b"LSCP"`           |
//! | 4      | 4    | version (`u32`, = 1)      |
//! | 8      | 8    | frames (`u64`)            |
//! | 16     | 8    | dim (`u64`)               |
//! | 24     | 4    | time_scale (`u32`)        |
//! | 28     | 4    | reserved, zero            |

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::alignment;
use crate::error::{Error, Result};
use crate::feature_maps::{ArticulatoryMap, LabelInventory};

pub const MAGIC: [u8; 4] = *b"LSCP";
pub const FORMAT_VERSION: u32 = 1;
pub const HEADER_LEN: usize = 32;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const ACT_EXT: &str = "act";

/// One utterance's activations at one layer, `frames x dim`, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMatrix {
    pub utterance_id: String,
    pub layer_id: String,
    pub frames: usize,
    pub dim: usize,
    /// Input frames represented by one activation frame.
    pub time_scale: u32,
    pub data: Vec<f32>,
}

impl ActivationMatrix {
    pub fn new(
        utterance_id: impl Into<String>,
        layer_id: impl Into<String>,
        frames: usize,
        dim: usize,
        time_scale: u32,
        data: Vec<f32>,
    ) -> Result<Self> {
        let m = ActivationMatrix {
            utterance_id: utterance_id.into(),
            layer_id: layer_id.into(),
            frames,
            dim,
            time_scale,
            data,
        };
        m.validate()?;
        Ok(m)
    }

    pub fn validate(&self) -> Result<()> {
        check_id("utterance_id", &self.utterance_id)?;
        check_id("layer_id", &self.layer_id)?;
        if self.frames == 0 {
            return Err(Error::validation("frames", "must be >= 1"));
        }
        if self.dim == 0 {
            return Err(Error::validation("dim", "must be >= 1"));
        }
        if self.time_scale == 0 {
            return Err(Error::validation("time_scale", "must be >= 1"));
        }
        let expected = self
            .frames
            .checked_mul(self.dim)
            .ok_or_else(|| Error::validation("frames", "frames * dim overflows"))?;
        if self.data.len() != expected {
            return Err(Error::validation(
                "data",
                format!("length {} != frames * dim = {expected}", self.data.len()),
            ));
        }
        if let Some(i) = self.data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(
                "data",
                format!("non-finite value {} at flat index {i}", self.data[i]),
            ));
        }
        Ok(())
    }

    pub fn row(&self, t: usize) -> &[f32] {
        &self.data[t * self.dim..(t + 1) * self.dim]
    }
}

/// Decoded `.act` header.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockHeader {
    pub version: u32,
    pub frames: u64,
    pub dim: u64,
    pub time_scale: u32,
}

impl BlockHeader {
    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut buf = [0u8; HEADER_LEN];
        buf[0..4].copy_from_slice(&MAGIC);
        buf[4..8].copy_from_slice(&self.version.to_le_bytes());
        buf[8..16].copy_from_slice(&self.frames.to_le_bytes());
        buf[16..24].copy_from_slice(&self.dim.to_le_bytes());
        buf[24..28].copy_from_slice(&self.time_scale.to_le_bytes());
        buf
    }

    pub fn decode(buf: &[u8], path: &Path) -> Result<Self> {
        let corrupt = |message: String| Error::Corruption {
            path: path.to_path_buf(),
            message,
        };
        if buf.len() < HEADER_LEN {
            return Err(corrupt(format!(
                "truncated header: {} of {HEADER_LEN} bytes",
                buf.len()
            )));
        }
        if buf[0..4] != MAGIC {
            return Err(corrupt(format!("bad magic {:?}", &buf[0..4])));
        }
        let u32_at = |o: usize| u32::from_le_bytes(buf[o..o + 4].try_into().unwrap());
        let u64_at = |o: usize| u64::from_le_bytes(buf[o..o + 8].try_into().unwrap());
        let header = BlockHeader {
            version: u32_at(4),
            frames: u64_at(8),
            dim: u64_at(16),
            time_scale: u32_at(24),
        };
        if header.version != FORMAT_VERSION {
            return Err(corrupt(format!("unsupported version {}", header.version)));
        }
        if header.frames == 0 || header.dim == 0 || header.time_scale == 0 {
            return Err(corrupt(format!(
                "zero-sized header field (frames={}, dim={}, time_scale={})",
                header.frames, header.dim, header.time_scale
            )));
        }
        Ok(header)
    }

    /// Payload size in bytes, or `None` on overflow.
    pub fn payload_len(&self) -> Option<usize> {
        let n = usize::try_from(self.frames)
            .ok()?
            .checked_mul(usize::try_from(self.dim).ok()?)?;
        n.checked_mul(4)
    }
}

/// Appends one header+payload block to `out`.
pub fn encode_block(out: &mut Vec<u8>, frames: usize, dim: usize, time_scale: u32, data: &[f32]) {
    let header = BlockHeader {
        version: FORMAT_VERSION,
        frames: frames as u64,
        dim: dim as u64,
        time_scale,
    };
    out.reserve(HEADER_LEN + data.len() * 4);
    out.extend_from_slice(&header.encode());
    for v in data {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

/// Decodes one block from the front of `buf`, returning it and the bytes consumed.
pub fn decode_block(buf: &[u8], path: &Path) -> Result<(BlockHeader, Vec<f32>, usize)> {
    let header = BlockHeader::decode(buf, path)?;
    let payload = header.payload_len().ok_or_else(|| Error::Corruption {
        path: path.to_path_buf(),
        message: "frames * dim overflows".into(),
    })?;
    let available = buf.len() - HEADER_LEN;
    if available < payload {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
            message: format!("truncated payload: {available} of {payload} bytes"),
        });
    }
    let data = buf[HEADER_LEN..HEADER_LEN + payload]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    Ok((header, data, HEADER_LEN + payload))
}

pub fn activation_path(root: &Path, layer_id: &str, utterance_id: &str) -> PathBuf {
    root.join(layer_id)
        .join(format!("{utterance_id}.{ACT_EXT}"))
}

pub fn write_activations(record: &ActivationMatrix, root: &Path) -> Result<PathBuf> {
    record.validate()?;
    let dir = root.join(&record.layer_id);
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let path = activation_path(root, &record.layer_id, &record.utterance_id);
    let mut buf = Vec::new();
    encode_block(
        &mut buf,
        record.frames,
        record.dim,
        record.time_scale,
        &record.data,
    );
    let mut file = fs::File::create(&path).map_err(|e| Error::io(&path, e))?;
    file.write_all(&buf).map_err(|e| Error::io(&path, e))?;
    Ok(path)
}

/// Reads a `.act` file without consulting a manifest.
pub fn read_activations(
    root: &Path,
    layer_id: &str,
    utterance_id: &str,
) -> Result<ActivationMatrix> {
    let path = activation_path(root, layer_id, utterance_id);
    let buf = fs::read(&path).map_err(|e| Error::io(&path, e))?;
    let (header, data, used) = decode_block(&buf, &path)?;
    if used != buf.len() {
        return Err(Error::Corruption {
            path,
            message: format!("{} trailing bytes", buf.len() - used),
        });
    }
    let m = ActivationMatrix {
        utterance_id: utterance_id.to_string(),
        layer_id: layer_id.to_string(),
        frames: header.frames as usize,
        dim: header.dim as usize,
        time_scale: header.time_scale,
        data,
    };
    m.validate().map_err(|e| Error::Corruption {
        path: path.clone(),
        message: e.to_string(),
    })?;
    Ok(m)
}

/// Reads a `.act` file and cross-checks its header against the manifest's layer entry.
pub fn read_checked(
    root: &Path,
    manifest: &Manifest,
    layer_id: &str,
    utterance_id: &str,
) -> Result<ActivationMatrix> {
    let layer = manifest
        .layer(layer_id)
        .ok_or_else(|| Error::validation("layer_id", format!("{layer_id:?} not in manifest")))?;
    let m = read_activations(root, layer_id, utterance_id)?;
    let path = activation_path(root, layer_id, utterance_id);
    if m.dim != layer.dim {
        return Err(Error::Mismatch {
            path,
            what: "dim",
            found: m.dim.to_string(),
            expected: layer.dim.to_string(),
        });
    }
    if m.time_scale != layer.time_scale {
        return Err(Error::Mismatch {
            path,
            what: "time_scale",
            found: m.time_scale.to_string(),
            expected: layer.time_scale.to_string(),
        });
    }
    Ok(m)
}

fn read_header(path: &Path) -> Result<BlockHeader> {
    let mut file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let len = file.metadata().map_err(|e| Error::io(path, e))?.len();
    let mut buf = [0u8; HEADER_LEN];
    let n = read_up_to(&mut file, &mut buf).map_err(|e| Error::io(path, e))?;
    let header = BlockHeader::decode(&buf[..n], path)?;
    let expected = header.payload_len().map(|p| (p + HEADER_LEN) as u64);
    if expected != Some(len) {
        return Err(Error::Corruption {
            path: path.to_path_buf(),
            message: format!(
                "file is {len} bytes, header implies {}",
                expected.map_or("overflow".to_string(), |e| e.to_string())
            ),
        });
    }
    Ok(header)
}

fn read_up_to(r: &mut impl Read, buf: &mut [u8]) -> std::io::Result<usize> {
    let mut n = 0;
    while n < buf.len() {
        match r.read(&mut buf[n..])? {
            0 => break,
            k => n += k,
        }
    }
    Ok(n)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub layer_id: String,
    pub dim: usize,
    pub time_scale: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<String>,
    pub dev: Vec<String>,
    #[serde(default)]
    pub test: Vec<String>,
}

impl Splits {
    pub fn all(&self) -> impl Iterator<Item = &String> {
        self.train.iter().chain(&self.dev).chain(&self.test)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelSetSpec {
    /// Inventory file, relative to the dataset root.
    pub inventory: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub dataset_name: String,
    /// Seconds per input frame.
    pub frame_shift: f64,
    pub layers: Vec<LayerSpec>,
    pub splits: Splits,
    /// Token label sets, e.g. `phoneme`, `grapheme`.
    #[serde(default)]
    pub label_sets: BTreeMap<String, LabelSetSpec>,
    /// Articulatory maps over the `phoneme` label set, e.g. `place`, `manner`.
    #[serde(default)]
    pub articulatory_maps: BTreeMap<String, String>,
    #[serde(default)]
    pub notes: String,
}

impl Manifest {
    pub fn layer(&self, layer_id: &str) -> Option<&LayerSpec> {
        self.layers.iter().find(|l| l.layer_id == layer_id)
    }

    pub fn layer_index(&self, layer_id: &str) -> Option<usize> {
        self.layers.iter().position(|l| l.layer_id == layer_id)
    }

    pub fn layer_ids(&self) -> Vec<String> {
        self.layers.iter().map(|l| l.layer_id.clone()).collect()
    }

    pub fn load_inventory(&self, root: &Path, label_set: &str) -> Result<LabelInventory> {
        let spec = self.label_sets.get(label_set).ok_or_else(|| {
            Error::Config(format!(
                "dataset {} has no label set {label_set:?}",
                self.dataset_name
            ))
        })?;
        LabelInventory::load(&root.join(&spec.inventory))
    }

    pub fn load_map(
        &self,
        root: &Path,
        mode: &str,
        phonemes: &LabelInventory,
    ) -> Result<ArticulatoryMap> {
        let rel = self.articulatory_maps.get(mode).ok_or_else(|| {
            Error::Config(format!(
                "dataset {} has no {mode:?} articulatory map",
                self.dataset_name
            ))
        })?;
        ArticulatoryMap::load(&root.join(rel), mode, phonemes)
    }

    /// Writes `manifest.json` at `root`.
    pub fn write(&self, root: &Path) -> Result<PathBuf> {
        let path = root.join(MANIFEST_FILE);
        let mut json = serde_json::to_string_pretty(self).map_err(|e| Error::Json {
            path: path.clone(),
            source: e,
        })?;
        json.push('\n');
        fs::write(&path, json).map_err(|e| Error::io(&path, e))?;
        Ok(path)
    }
}

/// Rejects ids that cannot be used verbatim as a path component.
pub(crate) fn check_id(field: &str, id: &str) -> Result<()> {
    if id.is_empty() || id == "." || id == ".." || id.contains(['/', '\\', '\0']) {
        return Err(Error::validation(
            field,
            format!("{id:?} is not a valid file name"),
        ));
    }
    Ok(())
}

/// Byte offset of a serde_json error within `text`.
pub(crate) fn json_error_offset(text: &str, err: &serde_json::Error) -> usize {
    let line = err.line();
    if line == 0 {
        return 0;
    }
    let line_start: usize = text
        .split_inclusive('\n')
        .take(line - 1)
        .map(str::len)
        .sum();
    (line_start + err.column().saturating_sub(1)).min(text.len())
}

/// Parses `manifest.json` without checking it against the files on disk.
pub fn load_manifest(root: &Path) -> Result<Manifest> {
    let path = root.join(MANIFEST_FILE);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::Parse {
        offset: json_error_offset(&text, &e),
        message: e.to_string(),
        path,
    })
}

/// Loads the manifest and checks it against the dataset on disk, collecting every violation.
pub fn validate_manifest(root: &Path) -> Result<Manifest> {
    let manifest = load_manifest(root)?;
    let violations = manifest_violations(root, &manifest);
    if violations.is_empty() {
        Ok(manifest)
    } else {
        Err(Error::InvalidManifest {
            path: root.join(MANIFEST_FILE),
            violations,
        })
    }
}

pub fn manifest_violations(root: &Path, m: &Manifest) -> Vec<String> {
    let mut v = Vec::new();

    if let Err(e) = check_id("dataset_name", &m.dataset_name) {
        v.push(e.to_string());
    }
    if !(m.frame_shift.is_finite() && m.frame_shift > 0.0) {
        v.push(format!(
            "frame_shift must be positive, got {}",
            m.frame_shift
        ));
    }

    if m.layers.is_empty() {
        v.push("no layers listed".to_string());
    }
    let mut seen_layers = HashMap::new();
    for (i, layer) in m.layers.iter().enumerate() {
        if let Err(e) = check_id("layer_id", &layer.layer_id) {
            v.push(e.to_string());
        }
        if let Some(prev) = seen_layers.insert(layer.layer_id.as_str(), i) {
            v.push(format!(
                "layer {:?} listed twice (positions {prev} and {i})",
                layer.layer_id
            ));
        }
        if layer.dim == 0 {
            v.push(format!("layer {:?} has dim 0", layer.layer_id));
        }
        if layer.time_scale == 0 {
            v.push(format!("layer {:?} has time_scale 0", layer.layer_id));
        }
    }

    if m.splits.train.is_empty() {
        v.push("train split is empty".to_string());
    }
    if m.splits.dev.is_empty() {
        v.push("dev split is empty".to_string());
    }
    let mut owner: HashMap<&str, &str> = HashMap::new();
    for (split, ids) in [
        ("train", &m.splits.train),
        ("dev", &m.splits.dev),
        ("test", &m.splits.test),
    ] {
        for id in ids {
            if let Err(e) = check_id("utterance_id", id) {
                v.push(e.to_string());
            }
            match owner.insert(id.as_str(), split) {
                Some(prev) if prev == split => {
                    v.push(format!("utterance {id:?} listed twice in {split}"))
                }
                Some(prev) => v.push(format!(
                    "splits not disjoint: utterance {id:?} in both {prev} and {split}"
                )),
                None => {}
            }
        }
    }

    let mut utterances: Vec<&String> = m.splits.all().collect();
    utterances.sort();
    utterances.dedup();

    for layer in &m.layers {
        if check_id("layer_id", &layer.layer_id).is_err() {
            continue;
        }
        for utt in &utterances {
            if check_id("utterance_id", utt).is_err() {
                continue;
            }
            let path = activation_path(root, &layer.layer_id, utt);
            match read_header(&path) {
                Err(Error::NotFound(_)) => v.push(format!(
                    "missing tensor for layer {:?}, utterance {utt:?} ({})",
                    layer.layer_id,
                    path.display()
                )),
                Err(e) => v.push(e.to_string()),
                Ok(h) => {
                    if h.dim != layer.dim as u64 {
                        v.push(format!(
                            "layer {:?}, utterance {utt:?}: dim {} in file, {} in manifest",
                            layer.layer_id, h.dim, layer.dim
                        ));
                    }
                    if h.time_scale != layer.time_scale {
                        v.push(format!(
                            "layer {:?}, utterance {utt:?}: time_scale {} in file, {} in manifest",
                            layer.layer_id, h.time_scale, layer.time_scale
                        ));
                    }
                }
            }
        }
    }

    let mut phonemes = None;
    for (set, spec) in &m.label_sets {
        if let Err(e) = check_id("label set", set) {
            v.push(e.to_string());
            continue;
        }
        let inventory = match LabelInventory::load(&root.join(&spec.inventory)) {
            Ok(inv) => inv,
            Err(e) => {
                v.push(format!("label set {set:?}: {e}"));
                continue;
            }
        };
        for utt in &utterances {
            if check_id("utterance_id", utt).is_err() {
                continue;
            }
            let path = alignment::label_path(root, set, utt);
            let segments = match alignment::read_label_file(&path) {
                Ok(s) => s,
                Err(Error::NotFound(_)) => {
                    v.push(format!(
                        "missing label file for label set {set:?}, utterance {utt:?}"
                    ));
                    continue;
                }
                Err(e) => {
                    v.push(e.to_string());
                    continue;
                }
            };
            if let Err(e) = alignment::check_segments(&segments, utt) {
                v.push(e.to_string());
            }
            for seg in &segments {
                if inventory.index_of(&seg.token).is_none() {
                    v.push(format!(
                        "label set {set:?}, utterance {utt:?}: token {:?} not in inventory",
                        seg.token
                    ));
                    break;
                }
            }
        }
        if set == "phoneme" {
            phonemes = Some(inventory);
        }
    }

    for (mode, rel) in &m.articulatory_maps {
        match &phonemes {
            None => v.push(format!(
                "articulatory map {mode:?} requires a valid \"phoneme\" label set"
            )),
            Some(inv) => {
                if let Err(e) = ArticulatoryMap::load(&root.join(rel), mode, inv) {
                    v.push(format!("articulatory map {mode:?}: {e}"));
                }
            }
        }
    }

    v
}
