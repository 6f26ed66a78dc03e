//! Generates a small labelled corpus on disk and summarizes its ground truth.
//!
//! cargo run --example synth_corpus -- /tmp/corpus

use std::path::PathBuf;

use stam::synth::{generate_synthetic_dataset, read_ground_truth, write_dataset, SynthConfig};

fn main() -> stam::Result<()> {
    let out = std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("stam_corpus"));
    let cfg = SynthConfig {
        n_pos: 4,
        n_neg: 8,
        frames: 600,
        ..SynthConfig::default()
    };
    write_dataset(&generate_synthetic_dataset(&cfg)?, &out)?;
    for t in read_ground_truth(&out)? {
        let joints: Vec<usize> = t.bursts.iter().map(|b| b.joint).collect();
        println!(
            "{} label {} trunk {:.2} bursts {} on joints {:?}",
            t.id,
            t.label,
            t.trunk_length,
            t.bursts.len(),
            joints
        );
    }
    println!("wrote {}", out.display());
    Ok(())
}
