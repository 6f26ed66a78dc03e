//! Seven-channel motion features per joint and frame.

use crate::error::{Result, StamError};
use crate::preprocess::{rolling_filter_frames, window_frames, CleanPoseSequence, FilterMode};

pub const NUM_CHANNELS: usize = 7;
pub const MOTION_SMOOTHING_SECONDS: f64 = 0.25;

pub mod channel {
    pub const X: usize = 0;
    pub const Y: usize = 1;
    pub const VX: usize = 2;
    pub const VY: usize = 3;
    pub const AX: usize = 4;
    pub const AY: usize = 5;
    pub const DIST: usize = 6;
}

/// A joint x channel x frame tensor (`M x c x T`, row-major `f32`).
///
/// With `c = 7` the channel order is `x, y, vx, vy, ax, ay, d`; the binary
/// sequence format also carries two-channel coordinate tensors.
#[derive(Debug, Clone, PartialEq)]
pub struct PoseSequence {
    pub id: String,
    pub label: Option<u8>,
    joints: usize,
    channels: usize,
    frames: usize,
    fps: f32,
    data: Vec<f32>,
}

impl PoseSequence {
    pub fn from_raw(joints: usize, channels: usize, frames: usize, fps: f32, data: Vec<f32>) -> Result<Self> {
        if data.len() != joints * channels * frames {
            return Err(StamError::shape(format!(
                "data length {} != {joints}x{channels}x{frames}",
                data.len()
            )));
        }
        Ok(Self {
            id: String::new(),
            label: None,
            joints,
            channels,
            frames,
            fps,
            data,
        })
    }

    pub fn zeros(joints: usize, channels: usize, frames: usize, fps: f32) -> Self {
        Self::from_raw(joints, channels, frames, fps, vec![0.0; joints * channels * frames]).unwrap()
    }

    pub fn joints(&self) -> usize {
        self.joints
    }

    pub fn channels(&self) -> usize {
        self.channels
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn fps(&self) -> f32 {
        self.fps
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, j: usize, c: usize, t: usize) -> f32 {
        self.data[(j * self.channels + c) * self.frames + t]
    }

    #[inline]
    pub fn set(&mut self, j: usize, c: usize, t: usize, v: f32) {
        self.data[(j * self.channels + c) * self.frames + t] = v;
    }

    /// Copies frames `start..start + len` into a new sequence with the same label.
    pub fn slice_frames(&self, start: usize, len: usize) -> Result<Self> {
        if start + len > self.frames {
            return Err(StamError::TooShort {
                needed: start + len,
                got: self.frames,
            });
        }
        let mut data = Vec::with_capacity(self.joints * self.channels * len);
        for row in self.data.chunks_exact(self.frames) {
            data.extend_from_slice(&row[start..start + len]);
        }
        let mut out = Self::from_raw(self.joints, self.channels, len, self.fps, data)?;
        out.id = self.id.clone();
        out.label = self.label;
        Ok(out)
    }

    /// Frames `start..start + len` in frame-major `[len, M, c]` layout,
    /// the layout consumed by the network.
    pub fn frame_major(&self, start: usize, len: usize) -> Vec<f32> {
        let (m, c) = (self.joints, self.channels);
        let mut out = vec![0.0; len * m * c];
        for j in 0..m {
            for ch in 0..c {
                let row = &self.data[(j * c + ch) * self.frames + start..][..len];
                for (t, &v) in row.iter().enumerate() {
                    out[(t * m + j) * c + ch] = v;
                }
            }
        }
        out
    }
}

/// Minimum sequence length accepted by [`compute_motion_features`].
pub fn min_feature_frames(fps: f64) -> usize {
    window_frames(MOTION_SMOOTHING_SECONDS, fps).max(3)
}

/// Velocities, accelerations (per-frame differences) and per-frame travel
/// distance. Velocities and accelerations are then smoothed with a centered
/// 0.25 s rolling mean; the distance uses the unsmoothed velocity.
pub fn compute_motion_features(clean: &CleanPoseSequence) -> Result<PoseSequence> {
    let t_len = clean.frames();
    let needed = min_feature_frames(clean.fps);
    if t_len < needed {
        return Err(StamError::TooShort {
            needed,
            got: t_len,
        });
    }
    let w = window_frames(MOTION_SMOOTHING_SECONDS, clean.fps);
    let m = clean.joints();
    let mut out = PoseSequence::zeros(m, NUM_CHANNELS, t_len, clean.fps as f32);
    out.id = clean.id.clone();
    let mut vel = [vec![0.0; t_len], vec![0.0; t_len]];
    let mut acc = [vec![0.0; t_len], vec![0.0; t_len]];
    for j in 0..m {
        for axis in 0..2 {
            let p = clean.series(j, axis);
            let (v, a) = (&mut vel[axis], &mut acc[axis]);
            v[0] = 0.0;
            for t in 1..t_len {
                v[t] = p[t] - p[t - 1];
            }
            a[0] = 0.0;
            for t in 1..t_len {
                a[t] = v[t] - v[t - 1];
            }
            for (t, &x) in p.iter().enumerate() {
                out.set(j, axis, t, x as f32);
            }
        }
        for t in 0..t_len {
            out.set(j, channel::DIST, t, vel[0][t].hypot(vel[1][t]) as f32);
        }
        for axis in 0..2 {
            let vs = rolling_filter_frames(&vel[axis], w, FilterMode::Mean)?;
            let as_ = rolling_filter_frames(&acc[axis], w, FilterMode::Mean)?;
            for t in 0..t_len {
                out.set(j, channel::VX + axis, t, vs[t] as f32);
                out.set(j, channel::AX + axis, t, as_[t] as f32);
            }
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pose_io::NUM_JOINTS;

    fn clean_from(f: impl Fn(usize, usize, usize) -> f64, frames: usize) -> CleanPoseSequence {
        let mut c = vec![0.0; NUM_JOINTS * 2 * frames];
        for j in 0..NUM_JOINTS {
            for ax in 0..2 {
                for t in 0..frames {
                    c[(j * 2 + ax) * frames + t] = f(j, ax, t);
                }
            }
        }
        CleanPoseSequence::new("t".into(), 30.0, NUM_JOINTS, frames, c).unwrap()
    }

    #[test]
    fn stationary_pose_has_no_motion() {
        let clean = clean_from(|j, ax, _| j as f64 * 0.1 + ax as f64, 20);
        let s = compute_motion_features(&clean).unwrap();
        for j in 0..NUM_JOINTS {
            for c in 2..7 {
                for t in 0..20 {
                    assert_eq!(s.get(j, c, t), 0.0);
                }
            }
        }
    }

    #[test]
    fn linear_ramp() {
        let clean = clean_from(|_, ax, t| if ax == 0 { 0.1 * t as f64 } else { 0.5 }, 40);
        let s = compute_motion_features(&clean).unwrap();
        // interior frames: full 7-frame window away from the first two frames
        for t in 5..37 {
            assert!((s.get(3, channel::VX, t) - 0.1).abs() < 1e-6);
            assert!(s.get(3, channel::AX, t).abs() < 1e-6);
            assert_eq!(s.get(3, channel::VY, t), 0.0);
        }
        for t in 1..40 {
            assert!((s.get(3, channel::DIST, t) - 0.1).abs() < 1e-6);
        }
        assert_eq!(s.get(3, channel::DIST, 0), 0.0);
    }

    #[test]
    fn too_short() {
        let clean = clean_from(|_, _, _| 0.0, 2);
        assert!(matches!(
            compute_motion_features(&clean),
            Err(StamError::TooShort { needed: 7, got: 2 })
        ));
    }

    #[test]
    fn frame_major_layout() {
        let mut s = PoseSequence::zeros(2, 3, 4, 30.0);
        s.set(1, 2, 3, 5.0);
        s.set(0, 1, 2, 7.0);
        let fm = s.frame_major(2, 2);
        // [t][j][c] with t relative to start
        assert_eq!(fm[(1 * 2 + 1) * 3 + 2], 5.0);
        assert_eq!(fm[(0 * 2 + 0) * 3 + 1], 7.0);
    }

    #[test]
    fn slice_keeps_label() {
        let mut s = PoseSequence::zeros(2, 1, 10, 30.0);
        s.label = Some(1);
        s.set(1, 0, 6, 2.0);
        let sl = s.slice_frames(5, 3).unwrap();
        assert_eq!(sl.frames(), 3);
        assert_eq!(sl.get(1, 0, 1), 2.0);
        assert_eq!(sl.label, Some(1));
        assert!(s.slice_frames(8, 3).is_err());
    }
}
