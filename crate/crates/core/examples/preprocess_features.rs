//! Raw keypoints through cleaning, normalization and motion features.

use stam::features::{channel, compute_motion_features};
use stam::pose_io::{joint, JointLayout};
use stam::preprocess::{preprocess_sequence, PreprocessOptions};
use stam::synth::{generate_synthetic_dataset, SynthConfig};

fn main() -> stam::Result<()> {
    let cfg = SynthConfig {
        n_pos: 1,
        n_neg: 1,
        frames: 300,
        missing_rate: 0.05,
        ..SynthConfig::default()
    };
    let video = generate_synthetic_dataset(&cfg)?.remove(0);
    println!("{} frames, {} missing keypoints", video.raw.len(), video.raw.frames.iter().map(|f| f.missing_count()).sum::<usize>());

    let clean = preprocess_sequence(&video.raw, &JointLayout::default(), &PreprocessOptions::default())?;
    println!("trunk length after normalization: {:.6}", clean.trunk_length(150));

    let s = compute_motion_features(&clean)?;
    println!("features {}x{}x{}", s.joints(), s.channels(), s.frames());
    for b in &video.truth.bursts {
        // acceleration energy inside vs. just before the burst
        let energy = |a: usize, z: usize| -> f32 {
            (a..z)
                .map(|t| s.get(b.joint, channel::AX, t).powi(2) + s.get(b.joint, channel::AY, t).powi(2))
                .sum::<f32>()
                / (z - a).max(1) as f32
        };
        let len = b.end - b.start;
        let before = b.start.saturating_sub(len);
        println!(
            "burst on joint {:>2} at {:>3}..{:>3}: accel energy {:.2e} vs {:.2e} before",
            b.joint,
            b.start,
            b.end,
            energy(b.start, b.end),
            energy(before, b.start)
        );
    }
    println!("neck at origin: ({:.1e}, {:.1e})", s.get(joint::NECK, channel::X, 0), s.get(joint::NECK, channel::Y, 0));
    Ok(())
}
