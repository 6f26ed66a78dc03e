//! Keypoint ingestion and the binary sequence format.
//!
//! Two file formats live here:
//!
//! * **Keypoint JSONL** – one frame per line,
//!   `{"frame": <u64>, "joints": [[x, y, conf] | null; 18]}`.
//!   `null` marks an undetected joint. Frame indices must be strictly increasing.
//! * **`STAMSEQ1` binary** – an 8-byte ASCII magic `STAMSEQ1`, one version byte
//!   (`0x01`), three little-endian `u32` dims `(M, c, T)`, the frame rate as a
//!   little-endian `f32`, then `M*c*T` little-endian `f32` values in row-major
//!   `M x c x T` order. Header size is 25 bytes.

use std::io::{BufRead, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Result, StamError};
use crate::features::PoseSequence;

/// Number of joints in the 18-keypoint body layout.
pub const NUM_JOINTS: usize = 18;

pub const DEFAULT_CONFIDENCE_THRESHOLD: f64 = 0.1;
pub const DEFAULT_FPS: f64 = 30.0;

pub const SEQ_MAGIC: &[u8; 8] = b"STAMSEQ1";
pub const SEQ_VERSION: u8 = 1;
pub const SEQ_HEADER_LEN: usize = 8 + 1 + 12 + 4;

pub const JOINT_NAMES: [&str; NUM_JOINTS] = [
    "nose",
    "neck",
    "right_shoulder",
    "right_elbow",
    "right_wrist",
    "left_shoulder",
    "left_elbow",
    "left_wrist",
    "right_hip",
    "right_knee",
    "right_ankle",
    "left_hip",
    "left_knee",
    "left_ankle",
    "right_eye",
    "left_eye",
    "right_ear",
    "left_ear",
];

/// Limb pairs of the 18-joint layout. Forms a spanning tree rooted at the neck.
pub const LIMB_EDGES: [(usize, usize); NUM_JOINTS - 1] = [
    (0, 1),
    (1, 2),
    (2, 3),
    (3, 4),
    (1, 5),
    (5, 6),
    (6, 7),
    (1, 8),
    (8, 9),
    (9, 10),
    (1, 11),
    (11, 12),
    (12, 13),
    (0, 14),
    (14, 16),
    (0, 15),
    (15, 17),
];

pub mod joint {
    pub const NOSE: usize = 0;
    pub const NECK: usize = 1;
    pub const R_SHOULDER: usize = 2;
    pub const R_ELBOW: usize = 3;
    pub const R_WRIST: usize = 4;
    pub const L_SHOULDER: usize = 5;
    pub const L_ELBOW: usize = 6;
    pub const L_WRIST: usize = 7;
    pub const R_HIP: usize = 8;
    pub const R_KNEE: usize = 9;
    pub const R_ANKLE: usize = 10;
    pub const L_HIP: usize = 11;
    pub const L_KNEE: usize = 12;
    pub const L_ANKLE: usize = 13;
}

/// Joint naming, numbering and limb structure of the skeleton.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct JointLayout {
    names: Vec<String>,
    edges: Vec<(usize, usize)>,
}

impl JointLayout {
    /// Builds a layout after checking that the edges form a tree over all joints.
    pub fn new(names: Vec<String>, edges: Vec<(usize, usize)>) -> Result<Self> {
        let n = names.len();
        if n != NUM_JOINTS {
            return Err(StamError::ConfigInvalid(format!(
                "layout needs {NUM_JOINTS} joints, got {n}"
            )));
        }
        if edges.len() != n - 1 {
            return Err(StamError::ConfigInvalid(format!(
                "a tree over {n} joints has {} edges, got {}",
                n - 1,
                edges.len()
            )));
        }
        // union-find: n-1 edges without a cycle => spanning tree
        let mut parent: Vec<usize> = (0..n).collect();
        fn find(parent: &mut [usize], mut i: usize) -> usize {
            while parent[i] != i {
                parent[i] = parent[parent[i]];
                i = parent[i];
            }
            i
        }
        for &(a, b) in &edges {
            if a >= n || b >= n || a == b {
                return Err(StamError::ConfigInvalid(format!("bad edge ({a}, {b})")));
            }
            let (ra, rb) = (find(&mut parent, a), find(&mut parent, b));
            if ra == rb {
                return Err(StamError::ConfigInvalid(format!(
                    "edge ({a}, {b}) closes a cycle"
                )));
            }
            parent[ra] = rb;
        }
        Ok(Self { names, edges })
    }

    pub fn num_joints(&self) -> usize {
        self.names.len()
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }

    /// Joints rotated about the shoulder midpoint during normalization.
    pub fn is_upper_body(&self, j: usize) -> bool {
        !(8..=13).contains(&j)
    }
}

impl Default for JointLayout {
    fn default() -> Self {
        Self {
            names: JOINT_NAMES.iter().map(|s| s.to_string()).collect(),
            edges: LIMB_EDGES.to_vec(),
        }
    }
}

/// One detected keypoint.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Keypoint {
    pub x: f64,
    pub y: f64,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawPoseFrame {
    pub frame_index: u64,
    /// `None` when the estimator reported nothing for the joint.
    pub joints: [Option<Keypoint>; NUM_JOINTS],
    pub missing: [bool; NUM_JOINTS],
}

impl RawPoseFrame {
    pub fn new(
        frame_index: u64,
        joints: [Option<Keypoint>; NUM_JOINTS],
        confidence_threshold: f64,
    ) -> Self {
        let mut missing = [false; NUM_JOINTS];
        for (m, j) in missing.iter_mut().zip(joints.iter()) {
            *m = match j {
                None => true,
                Some(k) => k.confidence < confidence_threshold,
            };
        }
        Self {
            frame_index,
            joints,
            missing,
        }
    }

    pub fn missing_count(&self) -> usize {
        self.missing.iter().filter(|&&m| m).count()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RawPoseSequence {
    pub id: String,
    pub fps: f64,
    pub frames: Vec<RawPoseFrame>,
}

impl RawPoseSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Coordinate series of one joint along one axis (0 = x, 1 = y), with
    /// `None` wherever the joint is flagged missing.
    pub fn joint_series(&self, joint: usize, axis: usize) -> Vec<Option<f64>> {
        self.frames
            .iter()
            .map(|f| {
                if f.missing[joint] {
                    None
                } else {
                    f.joints[joint].map(|k| if axis == 0 { k.x } else { k.y })
                }
            })
            .collect()
    }
}

#[derive(Serialize, Deserialize)]
struct FrameRecord {
    frame: u64,
    joints: Vec<Option<Vec<f64>>>,
}

/// Parses line-delimited keypoint records. Blank lines are skipped.
pub fn parse_pose_frames<R: BufRead>(
    reader: R,
    confidence_threshold: f64,
    fps: f64,
    id: &str,
) -> Result<RawPoseSequence> {
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(StamError::ConfigInvalid(format!("fps must be positive, got {fps}")));
    }
    let mut frames: Vec<RawPoseFrame> = Vec::new();
    for (lineno, line) in reader.lines().enumerate() {
        let line = line?;
        let lineno = lineno + 1;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |reason: String| StamError::MalformedInput { line: lineno, reason };
        let rec: FrameRecord = serde_json::from_str(&line).map_err(|e| bad(e.to_string()))?;
        if rec.joints.len() != NUM_JOINTS {
            return Err(bad(format!(
                "expected {NUM_JOINTS} joints, got {}",
                rec.joints.len()
            )));
        }
        let mut joints = [None; NUM_JOINTS];
        for (slot, j) in joints.iter_mut().zip(rec.joints) {
            if let Some(triple) = j {
                if triple.len() != 3 {
                    return Err(bad(format!("joint entry has {} values", triple.len())));
                }
                let (x, y, c) = (triple[0], triple[1], triple[2]);
                if !(x.is_finite() && y.is_finite()) {
                    return Err(bad("non-finite coordinate".into()));
                }
                if !(0.0..=1.0).contains(&c) {
                    return Err(bad(format!("confidence {c} outside [0, 1]")));
                }
                *slot = Some(Keypoint { x, y, confidence: c });
            }
        }
        if let Some(prev) = frames.last() {
            if rec.frame <= prev.frame_index {
                return Err(bad(format!(
                    "frame index {} does not follow {}",
                    rec.frame, prev.frame_index
                )));
            }
        }
        frames.push(RawPoseFrame::new(rec.frame, joints, confidence_threshold));
    }
    if frames.is_empty() {
        return Err(StamError::EmptyInput);
    }
    Ok(RawPoseSequence {
        id: id.to_string(),
        fps,
        frames,
    })
}

/// Writes a sequence back as keypoint JSONL.
pub fn write_pose_frames<W: Write>(seq: &RawPoseSequence, mut out: W) -> Result<()> {
    for f in &seq.frames {
        let rec = FrameRecord {
            frame: f.frame_index,
            joints: f
                .joints
                .iter()
                .map(|j| j.map(|k| vec![k.x, k.y, k.confidence]))
                .collect(),
        };
        serde_json::to_writer(&mut out, &rec)?;
        out.write_all(b"\n")?;
    }
    Ok(())
}

pub fn read_pose_file(path: &Path, confidence_threshold: f64, fps: f64) -> Result<RawPoseSequence> {
    let file = open(path)?;
    let id = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    parse_pose_frames(std::io::BufReader::new(file), confidence_threshold, fps, &id)
}

pub fn write_pose_file(seq: &RawPoseSequence, path: &Path) -> Result<()> {
    let file = std::fs::File::create(path)?;
    let mut w = std::io::BufWriter::new(file);
    write_pose_frames(seq, &mut w)?;
    w.flush()?;
    Ok(())
}

pub(crate) fn open(path: &Path) -> Result<std::fs::File> {
    std::fs::File::open(path).map_err(|e| match e.kind() {
        std::io::ErrorKind::NotFound => StamError::FileNotFound(path.display().to_string()),
        _ => StamError::Io(e),
    })
}

/// Serializes a sequence tensor in the `STAMSEQ1` format.
pub fn write_sequence<W: Write>(seq: &PoseSequence, mut out: W) -> Result<()> {
    if seq.frames() == 0 {
        return Err(StamError::EmptySequence);
    }
    let mut buf = Vec::with_capacity(SEQ_HEADER_LEN + 4 * seq.data().len());
    buf.extend_from_slice(SEQ_MAGIC);
    buf.push(SEQ_VERSION);
    for d in [seq.joints(), seq.channels(), seq.frames()] {
        buf.extend_from_slice(&(d as u32).to_le_bytes());
    }
    buf.extend_from_slice(&seq.fps().to_le_bytes());
    for v in seq.data() {
        buf.extend_from_slice(&v.to_le_bytes());
    }
    out.write_all(&buf)?;
    Ok(())
}

/// Reads a `STAMSEQ1` tensor. Trailing bytes after the payload are rejected.
pub fn read_sequence<R: Read>(mut input: R) -> Result<PoseSequence> {
    let mut bytes = Vec::new();
    input.read_to_end(&mut bytes)?;
    decode_sequence(&bytes)
}

pub fn decode_sequence(bytes: &[u8]) -> Result<PoseSequence> {
    if bytes.len() < SEQ_HEADER_LEN {
        return Err(StamError::Format(format!(
            "file is {} bytes, shorter than the header",
            bytes.len()
        )));
    }
    if &bytes[..8] != SEQ_MAGIC {
        return Err(StamError::Format("bad magic".into()));
    }
    if bytes[8] != SEQ_VERSION {
        return Err(StamError::Format(format!("unsupported version {}", bytes[8])));
    }
    let dim = |i: usize| u32::from_le_bytes(bytes[9 + 4 * i..13 + 4 * i].try_into().unwrap()) as usize;
    let (m, c, t) = (dim(0), dim(1), dim(2));
    let fps = f32::from_le_bytes(bytes[21..25].try_into().unwrap());
    if m == 0 || c == 0 || t == 0 {
        return Err(StamError::Format(format!("zero dimension in header ({m}, {c}, {t})")));
    }
    if !(fps > 0.0 && fps.is_finite()) {
        return Err(StamError::Format(format!("invalid fps {fps}")));
    }
    let n = m
        .checked_mul(c)
        .and_then(|v| v.checked_mul(t))
        .ok_or_else(|| StamError::Format("dimension overflow".into()))?;
    let payload = &bytes[SEQ_HEADER_LEN..];
    if payload.len() != 4 * n {
        return Err(StamError::Format(format!(
            "payload is {} bytes, header implies {}",
            payload.len(),
            4 * n
        )));
    }
    let data = payload
        .chunks_exact(4)
        .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
        .collect();
    PoseSequence::from_raw(m, c, t, fps, data)
}

pub fn save_sequence(seq: &PoseSequence, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    write_sequence(seq, &mut buf)?;
    std::fs::write(path, buf)?;
    Ok(())
}

pub fn load_sequence(path: &Path) -> Result<PoseSequence> {
    let mut f = open(path)?;
    let mut seq = read_sequence(&mut f)?;
    if let Some(stem) = path.file_stem() {
        seq.id = stem.to_string_lossy().into_owned();
    }
    Ok(seq)
}

/// Saves then reloads a sequence through the binary format.
pub fn roundtrip_sequence(seq: &PoseSequence) -> Result<PoseSequence> {
    let mut buf = Vec::new();
    write_sequence(seq, &mut buf)?;
    let mut out = decode_sequence(&buf)?;
    out.id = seq.id.clone();
    out.label = seq.label;
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame_line(idx: u64, conf: f64) -> String {
        let joints: Vec<String> = (0..NUM_JOINTS)
            .map(|j| format!("[{}.5,{}.25,{conf}]", j * 10, j * 3))
            .collect();
        format!("{{\"frame\":{idx},\"joints\":[{}]}}", joints.join(","))
    }

    #[test]
    fn parses_well_formed_frames() {
        let text = [0, 1, 2].map(|i| frame_line(i, 0.9)).join("\n");
        let seq = parse_pose_frames(text.as_bytes(), 0.1, 30.0, "v").unwrap();
        assert_eq!(seq.len(), 3);
        assert!(seq.frames.iter().all(|f| f.missing_count() == 0));
        assert_eq!(seq.frames[2].joints[4].unwrap().x, 40.5);
    }

    #[test]
    fn low_confidence_joint_is_missing() {
        let mut line = frame_line(0, 0.9);
        line = line.replacen("[40.5,12.25,0.9]", "[40.5,12.25,0.0]", 1);
        let seq = parse_pose_frames(line.as_bytes(), 0.1, 30.0, "v").unwrap();
        let f = &seq.frames[0];
        assert!(f.missing[4]);
        assert_eq!(f.missing_count(), 1);
    }

    #[test]
    fn null_joint_is_missing() {
        let line = frame_line(5, 0.9).replacen("[0.5,0.25,0.9]", "null", 1);
        let seq = parse_pose_frames(line.as_bytes(), 0.1, 30.0, "v").unwrap();
        assert!(seq.frames[0].joints[0].is_none());
        assert!(seq.frames[0].missing[0]);
    }

    #[test]
    fn rejects_out_of_order_frames() {
        let text = [0, 2, 1].map(|i| frame_line(i, 0.9)).join("\n");
        let err = parse_pose_frames(text.as_bytes(), 0.1, 30.0, "v").unwrap_err();
        assert!(matches!(err, StamError::MalformedInput { line: 3, .. }));
    }

    #[test]
    fn rejects_wrong_joint_count() {
        let line = r#"{"frame":0,"joints":[[1,2,0.5]]}"#;
        let err = parse_pose_frames(line.as_bytes(), 0.1, 30.0, "v").unwrap_err();
        assert!(matches!(err, StamError::MalformedInput { .. }));
    }

    #[test]
    fn rejects_garbage_and_empty() {
        assert!(matches!(
            parse_pose_frames("not json".as_bytes(), 0.1, 30.0, "v"),
            Err(StamError::MalformedInput { .. })
        ));
        assert!(matches!(
            parse_pose_frames("\n\n".as_bytes(), 0.1, 30.0, "v"),
            Err(StamError::EmptyInput)
        ));
    }

    #[test]
    fn default_layout_is_valid_tree() {
        let l = JointLayout::default();
        assert_eq!(l.num_joints(), 18);
        assert_eq!(l.edges().len(), 17);
        assert_eq!(l.index_of("neck"), Some(1));
        assert_eq!(l.index_of("left_ear"), Some(17));
        JointLayout::new(l.names().to_vec(), l.edges().to_vec()).unwrap();
    }

    #[test]
    fn layout_rejects_cycle() {
        let mut edges = LIMB_EDGES.to_vec();
        edges[16] = (2, 5);
        edges.push((1, 2));
        edges.remove(0);
        let names = JOINT_NAMES.iter().map(|s| s.to_string()).collect();
        assert!(JointLayout::new(names, edges).is_err());
    }

    #[test]
    fn empty_sequence_cannot_be_saved() {
        let seq = PoseSequence::zeros(18, 7, 0, 30.0);
        assert!(matches!(
            write_sequence(&seq, Vec::new()),
            Err(StamError::EmptySequence)
        ));
    }

    #[test]
    fn corrupted_magic_is_format_error() {
        let seq = PoseSequence::zeros(18, 7, 4, 30.0);
        let mut buf = Vec::new();
        write_sequence(&seq, &mut buf).unwrap();
        buf[0] = b'X';
        assert!(matches!(decode_sequence(&buf), Err(StamError::Format(_))));
        let mut buf2 = Vec::new();
        write_sequence(&seq, &mut buf2).unwrap();
        buf2.pop();
        assert!(matches!(decode_sequence(&buf2), Err(StamError::Format(_))));
    }

    #[test]
    fn header_layout_is_fixed() {
        let seq = PoseSequence::from_raw(1, 1, 1, 30.0, vec![1.0]).unwrap();
        let mut buf = Vec::new();
        write_sequence(&seq, &mut buf).unwrap();
        let mut expected = b"STAMSEQ1".to_vec();
        expected.push(1);
        expected.extend_from_slice(&[1, 0, 0, 0, 1, 0, 0, 0, 1, 0, 0, 0]);
        expected.extend_from_slice(&30.0f32.to_le_bytes());
        expected.extend_from_slice(&1.0f32.to_le_bytes());
        assert_eq!(buf, expected);
    }
}
