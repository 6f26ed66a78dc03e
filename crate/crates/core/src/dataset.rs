//! Labelled corpora on disk: `labels.csv` (`id,label`) next to either
//! featurized `<id>.seq` files or raw `<id>.jsonl` keypoints.

use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Result, StamError};
use crate::features::{compute_motion_features, PoseSequence};
use crate::pose_io::{load_sequence, read_pose_file, JointLayout, DEFAULT_CONFIDENCE_THRESHOLD, DEFAULT_FPS};
use crate::preprocess::{preprocess_sequence, PreprocessOptions};

pub const LABELS_FILE: &str = "labels.csv";

pub fn read_labels(path: &Path) -> Result<Vec<(String, u8)>> {
    let text = fs::read_to_string(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => StamError::FileNotFound(path.display().to_string()),
        _ => e.into(),
    })?;
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (i == 0 && line.starts_with("id,")) {
            continue;
        }
        let bad = |reason: &str| StamError::MalformedInput {
            line: i + 1,
            reason: format!("{}: {reason}", path.display()),
        };
        let (id, label) = line.split_once(',').ok_or_else(|| bad("expected id,label"))?;
        let label = match label.trim() {
            "0" => 0,
            "1" => 1,
            other => return Err(bad(&format!("label {other:?} is not 0 or 1"))),
        };
        out.push((id.trim().to_string(), label));
    }
    Ok(out)
}

/// Featurized sequence from a `.seq` file, or from raw keypoints run through
/// preprocessing and feature extraction.
pub fn load_any(path: &Path, layout: &JointLayout, opts: &PreprocessOptions) -> Result<PoseSequence> {
    if !path.exists() {
        return Err(StamError::FileNotFound(path.display().to_string()));
    }
    if path.extension().is_some_and(|e| e == "seq") {
        return load_sequence(path);
    }
    let raw = read_pose_file(path, DEFAULT_CONFIDENCE_THRESHOLD, DEFAULT_FPS)?;
    compute_motion_features(&preprocess_sequence(&raw, layout, opts)?)
}

fn locate(dir: &Path, id: &str) -> Result<PathBuf> {
    ["seq", "jsonl"]
        .iter()
        .map(|ext| dir.join(format!("{id}.{ext}")))
        .find(|p| p.exists())
        .ok_or_else(|| StamError::FileNotFound(dir.join(format!("{id}.{{seq,jsonl}}")).display().to_string()))
}

/// Every labelled sequence of `dir`, in `labels.csv` order, with labels set.
pub fn load_labelled_dir(dir: &Path, layout: &JointLayout, opts: &PreprocessOptions) -> Result<Vec<PoseSequence>> {
    if !dir.is_dir() {
        return Err(StamError::FileNotFound(dir.display().to_string()));
    }
    read_labels(&dir.join(LABELS_FILE))?
        .into_iter()
        .map(|(id, label)| {
            let mut seq = load_any(&locate(dir, &id)?, layout, opts)?;
            seq.id = id;
            seq.label = Some(label);
            Ok(seq)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::{generate_synthetic_dataset, write_dataset, SynthConfig};

    #[test]
    fn labels_parse_and_reject() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.csv");
        fs::write(&p, "id,label\na,1\n\nb, 0\n").unwrap();
        assert_eq!(read_labels(&p).unwrap(), vec![("a".into(), 1), ("b".into(), 0)]);
        fs::write(&p, "id,label\na,2\n").unwrap();
        assert!(matches!(read_labels(&p), Err(StamError::MalformedInput { line: 2, .. })));
        assert!(matches!(read_labels(&dir.path().join("x.csv")), Err(StamError::FileNotFound(_))));
    }

    #[test]
    fn synthetic_directory_loads() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig {
            n_pos: 1,
            n_neg: 2,
            frames: 120,
            burst_min_frames: 20,
            burst_max_frames: 30,
            ..SynthConfig::default()
        };
        write_dataset(&generate_synthetic_dataset(&cfg).unwrap(), dir.path()).unwrap();
        let seqs = load_labelled_dir(dir.path(), &JointLayout::default(), &PreprocessOptions::default()).unwrap();
        let labels: Vec<_> = seqs.iter().map(|s| s.label.unwrap()).collect();
        assert_eq!(labels, vec![1, 0, 0]);
        assert!(seqs.iter().all(|s| s.joints() == 18 && s.channels() == 7 && s.frames() == 120));
    }
}
