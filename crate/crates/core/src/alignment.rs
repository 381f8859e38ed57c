//! Frame labels from time-aligned token segments, context windows and label shifting.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::feature_maps::LabelInventory;
use crate::tensor_store::ActivationMatrix;

/// Label index of a frame that has no aligned token.
pub const UNLABELED: u32 = u32::MAX;

/// Token used for word boundaries in grapheme label sets.
pub const SPACE_TOKEN: &str = "<space>";

#[derive(Debug, Clone, PartialEq)]
pub struct LabelSegment {
    pub token: String,
    /// Seconds, inclusive.
    pub start_time: f64,
    /// Seconds, exclusive.
    pub end_time: f64,
}

impl LabelSegment {
    pub fn new(token: impl Into<String>, start_time: f64, end_time: f64) -> Self {
        LabelSegment {
            token: token.into(),
            start_time,
            end_time,
        }
    }

    fn contains(&self, t: f64) -> bool {
        self.start_time <= t && t < self.end_time
    }
}

/// Per-activation-frame label indices for one utterance at one layer.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FrameLabels {
    pub utterance_id: String,
    pub time_scale: u32,
    pub labels: Vec<u32>,
}

impl FrameLabels {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labelled(&self) -> usize {
        self.labels.iter().filter(|&&l| l != UNLABELED).count()
    }
}

pub fn label_path(root: &Path, label_set: &str, utterance_id: &str) -> PathBuf {
    root.join("labels")
        .join(label_set)
        .join(format!("{utterance_id}.lab"))
}

/// Parses `token<TAB>start<TAB>end` lines. Blank lines are ignored.
pub fn parse_label_text(text: &str, path: &Path) -> Result<Vec<LabelSegment>> {
    let mut segments = Vec::new();
    let mut offset = 0;
    for (i, line) in text.split_inclusive('\n').enumerate() {
        let line_offset = offset;
        offset += line.len();
        let line = line.trim_end_matches(['\n', '\r']);
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| Error::Parse {
            path: path.to_path_buf(),
            offset: line_offset,
            message: format!("line {}: {message}", i + 1),
        };
        let fields: Vec<&str> = line.split('\t').collect();
        let [token, start, end] = fields[..] else {
            return Err(err(format!(
                "expected 3 tab-separated fields, got {}",
                fields.len()
            )));
        };
        let parse_time = |s: &str| {
            s.trim()
                .parse::<f64>()
                .map_err(|e| err(format!("bad time {s:?}: {e}")))
        };
        if token.is_empty() {
            return Err(err("empty token".into()));
        }
        segments.push(LabelSegment::new(
            token,
            parse_time(start)?,
            parse_time(end)?,
        ));
    }
    Ok(segments)
}

pub fn read_label_file(path: &Path) -> Result<Vec<LabelSegment>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_label_text(&text, path)
}

pub fn format_label_text(segments: &[LabelSegment]) -> String {
    let mut out = String::new();
    for s in segments {
        let _ = writeln!(out, "{}\t{:.6}\t{:.6}", s.token, s.start_time, s.end_time);
    }
    out
}

pub fn write_label_file(path: &Path, segments: &[LabelSegment]) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    fs::write(path, format_label_text(segments)).map_err(|e| Error::io(path, e))
}

/// Checks that segments are well-formed, sorted and non-overlapping.
pub fn check_segments(segments: &[LabelSegment], utterance_id: &str) -> Result<()> {
    let bad = |i: usize, msg: String| {
        Error::validation(
            "segments",
            format!("utterance {utterance_id:?}, segment {i}: {msg}"),
        )
    };
    for (i, s) in segments.iter().enumerate() {
        if !(s.start_time.is_finite() && s.end_time.is_finite()) {
            return Err(bad(i, "non-finite time".into()));
        }
        if s.start_time < 0.0 {
            return Err(bad(i, format!("negative start {}", s.start_time)));
        }
        if s.end_time <= s.start_time {
            return Err(bad(
                i,
                format!("end {} not after start {}", s.end_time, s.start_time),
            ));
        }
    }
    for (i, pair) in segments.windows(2).enumerate() {
        if pair[1].start_time < pair[0].end_time {
            return Err(bad(
                i + 1,
                format!(
                    "overlaps or precedes previous segment ({} < {})",
                    pair[1].start_time, pair[0].end_time
                ),
            ));
        }
    }
    Ok(())
}

/// Index of the segment containing each activation frame's center time.
///
/// Frame `t` is centred at `(t + 0.5) * time_scale * frame_shift` seconds.
pub fn frame_segments(
    segments: &[LabelSegment],
    frames: usize,
    time_scale: u32,
    frame_shift: f64,
) -> Vec<Option<usize>> {
    let step = f64::from(time_scale) * frame_shift;
    let mut out = Vec::with_capacity(frames);
    let mut j = 0;
    for t in 0..frames {
        let center = (t as f64 + 0.5) * step;
        while j < segments.len() && segments[j].end_time <= center {
            j += 1;
        }
        out.push(segments.get(j).filter(|s| s.contains(center)).map(|_| j));
    }
    out
}

fn resolve_tokens(
    segments: &[LabelSegment],
    inventory: &LabelInventory,
    utterance_id: &str,
) -> Result<Vec<u32>> {
    segments
        .iter()
        .map(|s| {
            inventory
                .index_of(&s.token)
                .ok_or_else(|| Error::UnknownToken {
                    token: s.token.clone(),
                    utterance: utterance_id.to_string(),
                })
        })
        .collect()
}

fn check_frame_args(frames: usize, time_scale: u32, frame_shift: f64) -> Result<()> {
    if frames == 0 {
        return Err(Error::validation("frames", "must be >= 1"));
    }
    if time_scale == 0 {
        return Err(Error::validation("time_scale", "must be >= 1"));
    }
    if !(frame_shift.is_finite() && frame_shift > 0.0) {
        return Err(Error::validation("frame_shift", "must be positive"));
    }
    Ok(())
}

/// Labels each activation frame with the token whose segment contains the frame center.
pub fn assign_frame_labels(
    utterance_id: &str,
    segments: &[LabelSegment],
    frames: usize,
    time_scale: u32,
    frame_shift: f64,
    inventory: &LabelInventory,
) -> Result<FrameLabels> {
    shift_labels(
        utterance_id,
        segments,
        0,
        frames,
        time_scale,
        frame_shift,
        inventory,
        &ShiftOptions::default(),
    )
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ShiftOptions {
    /// Largest accepted `|k|`.
    pub max_abs: u32,
    /// Tokens ignored when counting token positions for `k != 0`.
    pub skip_tokens: Vec<String>,
}

impl Default for ShiftOptions {
    fn default() -> Self {
        ShiftOptions {
            max_abs: 3,
            skip_tokens: Vec::new(),
        }
    }
}

impl ShiftOptions {
    pub fn skipping_space() -> Self {
        ShiftOptions {
            skip_tokens: vec![SPACE_TOKEN.to_string()],
            ..Default::default()
        }
    }
}

/// Labels frame `t` with the token `k` positions after (`k > 0`) or before its own.
///
/// Frames whose shifted position falls outside the token sequence become
/// `UNLABELED`. With `k != 0`, frames on a skipped token are `UNLABELED` and
/// skipped tokens are not counted as positions. `k = 0` is identical to
/// [`assign_frame_labels`].
#[allow(clippy::too_many_arguments)]
pub fn shift_labels(
    utterance_id: &str,
    segments: &[LabelSegment],
    k: i32,
    frames: usize,
    time_scale: u32,
    frame_shift: f64,
    inventory: &LabelInventory,
    options: &ShiftOptions,
) -> Result<FrameLabels> {
    if k.unsigned_abs() > options.max_abs {
        return Err(Error::Config(format!(
            "shift {k} outside [-{m}, {m}]",
            m = options.max_abs
        )));
    }
    check_frame_args(frames, time_scale, frame_shift)?;
    check_segments(segments, utterance_id)?;
    let tokens = resolve_tokens(segments, inventory, utterance_id)?;
    let per_frame = frame_segments(segments, frames, time_scale, frame_shift);

    let labels = if k == 0 {
        per_frame
            .iter()
            .map(|s| s.map_or(UNLABELED, |i| tokens[i]))
            .collect()
    } else {
        let eligible: Vec<usize> = (0..segments.len())
            .filter(|&i| !options.skip_tokens.contains(&segments[i].token))
            .collect();
        let mut position = vec![None; segments.len()];
        for (p, &i) in eligible.iter().enumerate() {
            position[i] = Some(p);
        }
        per_frame
            .iter()
            .map(|s| {
                s.and_then(|i| position[i])
                    .and_then(|p| p.checked_add_signed(k as isize))
                    .and_then(|q| eligible.get(q))
                    .map_or(UNLABELED, |&j| tokens[j])
            })
            .collect()
    };

    Ok(FrameLabels {
        utterance_id: utterance_id.to_string(),
        time_scale,
        labels,
    })
}

/// Writes rows `t - radius ..= t + radius` into `out`, zero-filling rows outside the utterance.
pub fn window_into(
    matrix: &ActivationMatrix,
    t: usize,
    radius: usize,
    out: &mut [f64],
) -> Result<()> {
    if t >= matrix.frames {
        return Err(Error::Index {
            index: t,
            len: matrix.frames,
        });
    }
    let d = matrix.dim;
    let width = (2 * radius + 1) * d;
    if out.len() != width {
        return Err(Error::Dimension {
            expected: width,
            actual: out.len(),
        });
    }
    for (slot, chunk) in out.chunks_exact_mut(d).enumerate() {
        let src = (t + slot)
            .checked_sub(radius)
            .filter(|&r| r < matrix.frames);
        match src {
            Some(r) => {
                for (o, v) in chunk.iter_mut().zip(matrix.row(r)) {
                    *o = f64::from(*v);
                }
            }
            None => chunk.fill(0.0),
        }
    }
    Ok(())
}

/// Context window of `2 * radius + 1` frames centred on `t`, flattened.
pub fn apply_window(matrix: &ActivationMatrix, t: usize, radius: usize) -> Result<Vec<f32>> {
    if t >= matrix.frames {
        return Err(Error::Index {
            index: t,
            len: matrix.frames,
        });
    }
    let d = matrix.dim;
    let mut out = vec![0.0f32; (2 * radius + 1) * d];
    for (slot, chunk) in out.chunks_exact_mut(d).enumerate() {
        if let Some(r) = (t + slot)
            .checked_sub(radius)
            .filter(|&r| r < matrix.frames)
        {
            chunk.copy_from_slice(matrix.row(r));
        }
    }
    Ok(out)
}
