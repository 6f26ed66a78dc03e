//! Trains a compact model on a small synthetic corpus and reports validation
//! ROC-AUC per epoch.
//!
//! RUST_LOG=info cargo run --release --example train_synthetic

use stam::features::{compute_motion_features, PoseSequence};
use stam::graph::PoseGraph;
use stam::model::StamConfig;
use stam::pose_io::JointLayout;
use stam::preprocess::{preprocess_sequence, PreprocessOptions};
use stam::synth::{generate_synthetic_dataset, SynthConfig};
use stam::train::{fit, TrainConfig};

fn main() -> stam::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cfg = SynthConfig {
        n_pos: 12,
        n_neg: 36,
        frames: 500,
        ..SynthConfig::easy()
    };
    let videos = generate_synthetic_dataset(&cfg)?
        .into_iter()
        .map(|v| {
            let clean = preprocess_sequence(&v.raw, &JointLayout::default(), &PreprocessOptions::default())?;
            let mut s = compute_motion_features(&clean)?;
            s.label = Some(v.truth.label);
            Ok(s)
        })
        .collect::<stam::Result<Vec<PoseSequence>>>()?;

    let model = StamConfig {
        channels: vec![8, 16, 32],
        d_u: 8,
        d_h: 8,
        ..StamConfig::default()
    };
    let train = TrainConfig {
        lr: 3e-3,
        epochs: 30,
        seed: 1,
        subseq_window: 500,
        subseq_overlap: 100,
        target_auc: Some(1.0),
        ..TrainConfig::default()
    };
    let fitted = fit(&videos, &model, &train, &PoseGraph::default())?;
    let o = &fitted.outcome;
    println!(
        "best validation ROC-AUC {:?} at epoch {} of {}",
        o.best_val_auc,
        o.best_epoch,
        o.history.len()
    );
    Ok(())
}
