//! Dataset plumbing: cross-validation folds, the fold manifest file, and
//! rasterization of event annotations onto the chunk/frame grid.
//!
//! An event is active in frame k of a chunk iff the frame center
//! (chunk_start + k * 0.02 + 0.02 seconds) lies in [onset, offset). Within a
//! chunk, events are assigned to target slots in onset order so slot identity
//! is stable across the chunk's frames; events beyond the slot count are
//! dropped from the training targets (but not from evaluation truth).

use crate::error::{PilotError, Result};
use crate::frontend::{CHUNK_MS, FRAMES_PER_CHUNK, SHIFT_MS};
use crate::objective::{FrameTarget, SlotTarget};
use crate::simulator::Event;
use std::path::Path;

pub fn chunk_start_s(chunk_index: usize) -> f64 {
    chunk_index as f64 * CHUNK_MS as f64 / 1000.0
}

pub fn frame_center_s(chunk_index: usize, frame: usize) -> f64 {
    chunk_start_s(chunk_index) + (frame as f64 * SHIFT_MS as f64 + SHIFT_MS as f64) / 1000.0
}

fn active_at(e: &Event, t: f64) -> bool {
    e.onset_s <= t && t < e.offset_s
}

/// Training targets for one chunk: FRAMES_PER_CHUNK frames of `num_slots`
/// slots each. Slot order follows event onsets within the chunk.
pub fn chunk_targets(events: &[Event], chunk_index: usize, num_slots: usize) -> Vec<FrameTarget> {
    // events touching any frame center of this chunk, in onset order
    let mut touching: Vec<&Event> = events
        .iter()
        .filter(|e| {
            (0..FRAMES_PER_CHUNK).any(|k| active_at(e, frame_center_s(chunk_index, k)))
        })
        .collect();
    touching.sort_by(|a, b| a.onset_s.partial_cmp(&b.onset_s).unwrap());
    touching.truncate(num_slots);
    (0..FRAMES_PER_CHUNK)
        .map(|k| {
            let t = frame_center_s(chunk_index, k);
            let mut slots = vec![SlotTarget::inactive(); num_slots];
            for (slot, e) in touching.iter().enumerate() {
                if active_at(e, t) {
                    slots[slot] = SlotTarget::active_at(e.azimuth_rad, e.elevation_rad);
                }
            }
            FrameTarget { slots }
        })
        .collect()
}

/// Evaluation truth for one frame: all active event directions, uncapped.
pub fn frame_truth(events: &[Event], chunk_index: usize, frame: usize) -> Vec<(f64, f64)> {
    let t = frame_center_s(chunk_index, frame);
    events
        .iter()
        .filter(|e| active_at(e, t))
        .map(|e| (e.azimuth_rad, e.elevation_rad))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FoldSplit {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

/// Deterministic cross-validation folds over scene indices. Scenes are dealt
/// round-robin into `num_folds` test groups; for fold i the validation set is
/// drawn from group (i+1) mod num_folds and the rest is training data.
pub fn make_folds(num_scenes: usize, num_folds: usize) -> Result<Vec<FoldSplit>> {
    if num_folds < 2 || num_scenes < 2 * num_folds {
        return Err(PilotError::invalid(format!(
            "cannot build {} folds from {} scenes",
            num_folds, num_scenes
        )));
    }
    let groups: Vec<Vec<usize>> = (0..num_folds)
        .map(|g| (0..num_scenes).filter(|i| i % num_folds == g).collect())
        .collect();
    let mut folds = Vec::with_capacity(num_folds);
    for i in 0..num_folds {
        let test = groups[i].clone();
        let next = &groups[(i + 1) % num_folds];
        let n_val = (next.len() / 2).max(1);
        let val: Vec<usize> = next[..n_val].to_vec();
        let train: Vec<usize> = (0..num_scenes)
            .filter(|s| !test.contains(s) && !val.contains(s))
            .collect();
        folds.push(FoldSplit { train, val, test });
    }
    Ok(folds)
}

/// Write the fold manifest: `fold,split,stem` rows, one per (fold, scene).
pub fn write_manifest(path: &Path, folds: &[FoldSplit], stems: &[String]) -> Result<()> {
    let mut out = String::from("fold,split,stem\n");
    for (i, f) in folds.iter().enumerate() {
        for (split, idxs) in [("train", &f.train), ("val", &f.val), ("test", &f.test)] {
            for &s in idxs {
                if s >= stems.len() {
                    return Err(PilotError::invalid(format!("scene index {} out of range", s)));
                }
                out.push_str(&format!("{},{},{}\n", i, split, stems[s]));
            }
        }
    }
    std::fs::write(path, out).map_err(|e| PilotError::io(path.display().to_string(), e))
}

/// Read a fold manifest back as `(folds, stems)`. Stems are ordered by first
/// appearance; fold entries refer to indices in that order.
pub fn read_manifest(path: &Path) -> Result<(Vec<FoldSplit>, Vec<String>)> {
    let text =
        std::fs::read_to_string(path).map_err(|e| PilotError::io(path.display().to_string(), e))?;
    let mut lines = text.lines();
    if lines.next() != Some("fold,split,stem") {
        return Err(PilotError::Format(format!(
            "{}: missing manifest header",
            path.display()
        )));
    }
    let mut stems: Vec<String> = Vec::new();
    let mut folds: Vec<FoldSplit> = Vec::new();
    for (lineno, line) in lines.enumerate() {
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(PilotError::Format(format!(
                "{}: line {} malformed",
                path.display(),
                lineno + 2
            )));
        }
        let fold: usize = fields[0]
            .parse()
            .map_err(|_| PilotError::Format(format!("bad fold index '{}'", fields[0])))?;
        while folds.len() <= fold {
            folds.push(FoldSplit {
                train: Vec::new(),
                val: Vec::new(),
                test: Vec::new(),
            });
        }
        let stem = fields[2].to_string();
        let idx = match stems.iter().position(|s| *s == stem) {
            Some(i) => i,
            None => {
                stems.push(stem);
                stems.len() - 1
            }
        };
        match fields[1] {
            "train" => folds[fold].train.push(idx),
            "val" => folds[fold].val.push(idx),
            "test" => folds[fold].test.push(idx),
            other => {
                return Err(PilotError::Format(format!("unknown split '{}'", other)));
            }
        }
    }
    Ok((folds, stems))
}
