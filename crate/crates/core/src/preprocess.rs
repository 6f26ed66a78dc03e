//! Joint time-series cleaning and body-centered pose normalization.

use crate::error::{Result, StamError};
use crate::features::PoseSequence;
use crate::pose_io::{joint, JointLayout, RawPoseSequence, NUM_JOINTS};

const DEGENERATE_EPS: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FilterMode {
    Median,
    Mean,
}

/// Smoothing windows for the cleaning chain, in seconds.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PreprocessOptions {
    pub median_window: f64,
    pub mean_window: f64,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self {
            median_window: 0.5,
            mean_window: 0.5,
        }
    }
}

/// Normalized joint coordinates, `M x 2 x T` row-major, in trunk-length units.
#[derive(Debug, Clone, PartialEq)]
pub struct CleanPoseSequence {
    pub id: String,
    pub fps: f64,
    joints: usize,
    frames: usize,
    coords: Vec<f64>,
}

impl CleanPoseSequence {
    pub fn new(id: String, fps: f64, joints: usize, frames: usize, coords: Vec<f64>) -> Result<Self> {
        if coords.len() != joints * 2 * frames {
            return Err(StamError::shape(format!(
                "coords length {} != {joints}x2x{frames}",
                coords.len()
            )));
        }
        Ok(Self {
            id,
            fps,
            joints,
            frames,
            coords,
        })
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    #[inline]
    pub fn get(&self, j: usize, axis: usize, t: usize) -> f64 {
        self.coords[(j * 2 + axis) * self.frames + t]
    }

    pub fn series(&self, j: usize, axis: usize) -> &[f64] {
        let start = (j * 2 + axis) * self.frames;
        &self.coords[start..start + self.frames]
    }

    /// Neck to hip-midpoint distance at frame `t`.
    pub fn trunk_length(&self, t: usize) -> f64 {
        let hx = 0.5 * (self.get(joint::R_HIP, 0, t) + self.get(joint::L_HIP, 0, t));
        let hy = 0.5 * (self.get(joint::R_HIP, 1, t) + self.get(joint::L_HIP, 1, t));
        (self.get(joint::NECK, 0, t) - hx).hypot(self.get(joint::NECK, 1, t) - hy)
    }

    /// Stores the coordinates as a two-channel sequence file payload.
    pub fn to_sequence(&self) -> PoseSequence {
        let data = self.coords.iter().map(|&v| v as f32).collect();
        let mut seq = PoseSequence::from_raw(self.joints, 2, self.frames, self.fps as f32, data)
            .expect("dimensions are consistent by construction");
        seq.id = self.id.clone();
        seq
    }

    pub fn from_sequence(seq: &PoseSequence) -> Result<Self> {
        if seq.channels() != 2 {
            return Err(StamError::shape(format!(
                "coordinate sequence needs 2 channels, got {}",
                seq.channels()
            )));
        }
        Self::new(
            seq.id.clone(),
            seq.fps() as f64,
            seq.joints(),
            seq.frames(),
            seq.data().iter().map(|&v| v as f64).collect(),
        )
    }
}

/// Fills missing values by linear interpolation between the nearest observed
/// neighbours; leading and trailing gaps hold the nearest observation.
pub fn impute_linear(series: &[Option<f64>]) -> Result<Vec<f64>> {
    let observed: Vec<usize> = series
        .iter()
        .enumerate()
        .filter_map(|(i, v)| v.map(|_| i))
        .collect();
    let (&first, &last) = match (observed.first(), observed.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(StamError::AllMissing),
    };
    let mut out = vec![0.0; series.len()];
    let first_val = series[first].unwrap();
    let last_val = series[last].unwrap();
    out[..first].iter_mut().for_each(|v| *v = first_val);
    out[last..].iter_mut().for_each(|v| *v = last_val);
    for pair in observed.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (va, vb) = (series[a].unwrap(), series[b].unwrap());
        out[a] = va;
        let span = (b - a) as f64;
        for (i, slot) in out.iter_mut().enumerate().take(b).skip(a + 1) {
            let frac = (i - a) as f64 / span;
            *slot = va + (vb - va) * frac;
        }
    }
    out[last] = last_val;
    Ok(out)
}

/// Window length in frames: `round(seconds * fps)`, stepped down to the
/// nearest odd count, never below 1.
pub fn window_frames(window_seconds: f64, fps: f64) -> usize {
    let w = (window_seconds * fps).round().max(1.0) as usize;
    if w % 2 == 0 {
        w - 1
    } else {
        w
    }
}

pub fn rolling_filter(series: &[f64], window_seconds: f64, fps: f64, mode: FilterMode) -> Result<Vec<f64>> {
    if !(window_seconds > 0.0) || !(fps > 0.0) {
        return Err(StamError::ConfigInvalid(format!(
            "window {window_seconds}s at {fps} fps"
        )));
    }
    rolling_filter_frames(series, window_frames(window_seconds, fps), mode)
}

/// Centered sliding filter over `window` frames (odd). Near the ends the
/// window shrinks symmetrically so it stays centered on the sample.
pub fn rolling_filter_frames(series: &[f64], window: usize, mode: FilterMode) -> Result<Vec<f64>> {
    if series.is_empty() {
        return Err(StamError::EmptySeries);
    }
    let half = window.max(1) / 2;
    let n = series.len();
    let mut scratch = Vec::with_capacity(2 * half + 1);
    let out = (0..n)
        .map(|i| {
            let h = half.min(i).min(n - 1 - i);
            let win = &series[i - h..=i + h];
            match mode {
                FilterMode::Mean => win.iter().sum::<f64>() / win.len() as f64,
                FilterMode::Median => {
                    scratch.clear();
                    scratch.extend_from_slice(win);
                    scratch.sort_by(|a, b| a.total_cmp(b));
                    scratch[h]
                }
            }
        })
        .collect();
    Ok(out)
}

#[derive(Debug, Clone, Copy)]
struct FrameParams {
    upper_angle: f64,
    lower_angle: f64,
    trunk: f64,
}

fn midpoint(coords: &[f64], frames: usize, a: usize, b: usize, t: usize) -> (f64, f64) {
    let g = |j: usize, ax: usize| coords[(j * 2 + ax) * frames + t];
    (0.5 * (g(a, 0) + g(b, 0)), 0.5 * (g(a, 1) + g(b, 1)))
}

fn rotate_about(p: (f64, f64), c: (f64, f64), cos: f64, sin: f64) -> (f64, f64) {
    let (dx, dy) = (p.0 - c.0, p.1 - c.1);
    (c.0 + cos * dx - sin * dy, c.1 + sin * dx + cos * dy)
}

/// Rotation/scale parameters for one frame, or `None` if the frame is degenerate.
fn frame_params(coords: &[f64], frames: usize, t: usize) -> Option<FrameParams> {
    let g = |j: usize| (coords[(j * 2) * frames + t], coords[(j * 2 + 1) * frames + t]);
    let (rs, ls) = (g(joint::R_SHOULDER), g(joint::L_SHOULDER));
    let (rh, lh) = (g(joint::R_HIP), g(joint::L_HIP));
    let sv = (rs.0 - ls.0, rs.1 - ls.1);
    let hv = (rh.0 - lh.0, rh.1 - lh.1);
    if sv.0.hypot(sv.1) < DEGENERATE_EPS || hv.0.hypot(hv.1) < DEGENERATE_EPS {
        return None;
    }
    // rotate so the right-side joint lands on +x relative to the midpoint
    let upper_angle = -sv.1.atan2(sv.0);
    let lower_angle = -hv.1.atan2(hv.0);
    let cs = midpoint(coords, frames, joint::R_SHOULDER, joint::L_SHOULDER, t);
    let ch = midpoint(coords, frames, joint::R_HIP, joint::L_HIP, t);
    let neck = rotate_about(g(joint::NECK), cs, upper_angle.cos(), upper_angle.sin());
    let trunk = (neck.0 - ch.0).hypot(neck.1 - ch.1);
    if trunk < DEGENERATE_EPS {
        return None;
    }
    Some(FrameParams {
        upper_angle,
        lower_angle,
        trunk,
    })
}

/// Rotates upper and lower body to horizontal shoulder/hip lines, moves the
/// neck to the origin and scales to unit trunk length, frame by frame.
///
/// `coords` is `M x 2 x T` row-major. Degenerate frames reuse the rotation and
/// scale of the nearest non-degenerate frame (earlier frame on ties).
pub fn normalize_pose(coords: &[f64], frames: usize, layout: &JointLayout) -> Result<Vec<f64>> {
    let m = layout.num_joints();
    if coords.len() != m * 2 * frames {
        return Err(StamError::shape(format!(
            "coords length {} != {m}x2x{frames}",
            coords.len()
        )));
    }
    if frames == 0 {
        return Err(StamError::EmptySeries);
    }
    let params: Vec<Option<FrameParams>> = (0..frames).map(|t| frame_params(coords, frames, t)).collect();
    let good: Vec<usize> = (0..frames).filter(|&t| params[t].is_some()).collect();
    if good.is_empty() {
        return Err(StamError::DegeneratePose(
            "no frame has distinct shoulders, distinct hips and a non-zero trunk".into(),
        ));
    }
    let mut out = vec![0.0; coords.len()];
    let mut cursor = 0usize;
    for t in 0..frames {
        while cursor + 1 < good.len() && good[cursor + 1] <= t {
            cursor += 1;
        }
        let p = match params[t] {
            Some(p) => p,
            None => {
                let before = good[cursor];
                let pick = if before > t {
                    before
                } else if cursor + 1 < good.len() && good[cursor + 1] - t < t - before {
                    good[cursor + 1]
                } else {
                    before
                };
                params[pick].unwrap()
            }
        };
        let cs = midpoint(coords, frames, joint::R_SHOULDER, joint::L_SHOULDER, t);
        let ch = midpoint(coords, frames, joint::R_HIP, joint::L_HIP, t);
        let (uc, us) = (p.upper_angle.cos(), p.upper_angle.sin());
        let (lc, ls) = (p.lower_angle.cos(), p.lower_angle.sin());
        let g = |j: usize| (coords[(j * 2) * frames + t], coords[(j * 2 + 1) * frames + t]);
        let neck = rotate_about(g(joint::NECK), cs, uc, us);
        let scale = 1.0 / p.trunk;
        for j in 0..m {
            let r = if layout.is_upper_body(j) {
                rotate_about(g(j), cs, uc, us)
            } else {
                rotate_about(g(j), ch, lc, ls)
            };
            out[(j * 2) * frames + t] = (r.0 - neck.0) * scale;
            out[(j * 2 + 1) * frames + t] = (r.1 - neck.1) * scale;
        }
    }
    Ok(out)
}

/// Imputation, median outlier removal, mean smoothing, then normalization.
pub fn preprocess_sequence(
    raw: &RawPoseSequence,
    layout: &JointLayout,
    opts: &PreprocessOptions,
) -> Result<CleanPoseSequence> {
    let frames = raw.len();
    if frames == 0 {
        return Err(StamError::EmptyInput);
    }
    let med_w = window_frames(opts.median_window, raw.fps);
    let mean_w = window_frames(opts.mean_window, raw.fps);
    let mut coords = vec![0.0; NUM_JOINTS * 2 * frames];
    for j in 0..NUM_JOINTS {
        for axis in 0..2 {
            let filled = impute_linear(&raw.joint_series(j, axis)).map_err(|e| match e {
                StamError::AllMissing => StamError::DegeneratePose(format!(
                    "joint {j} ({}) never observed in {}",
                    layout.names()[j],
                    raw.id
                )),
                other => other,
            })?;
            let med = rolling_filter_frames(&filled, med_w, FilterMode::Median)?;
            let smooth = rolling_filter_frames(&med, mean_w, FilterMode::Mean)?;
            let start = (j * 2 + axis) * frames;
            coords[start..start + frames].copy_from_slice(&smooth);
        }
    }
    let normalized = normalize_pose(&coords, frames, layout)?;
    CleanPoseSequence::new(raw.id.clone(), raw.fps, NUM_JOINTS, frames, normalized)
}
