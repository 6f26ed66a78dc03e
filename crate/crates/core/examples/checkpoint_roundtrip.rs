//! Saves a model, reloads it and checks predictions are unchanged.

use stam::checkpoint;
use stam::features::PoseSequence;
use stam::graph::PoseGraph;
use stam::model::{StamConfig, StamParams};
use stam::nn::Mode;

fn main() -> stam::Result<()> {
    let params = StamParams::<f32>::init(&StamConfig::default(), 11)?;
    let path = std::env::temp_dir().join("stam_example.ckpt");
    checkpoint::save(&params, &path)?;
    let loaded = checkpoint::load(&path)?;
    let size = std::fs::metadata(&path)?.len();

    let data = (0..18 * 7 * 120).map(|i| ((i % 13) as f32 / 13.0) - 0.5).collect();
    let seq = PoseSequence::from_raw(18, 7, 120, 30.0, data)?;
    let g = PoseGraph::default();
    let (a, b) = (params.predict_video(&seq, &g, Mode::Eval)?, loaded.predict_video(&seq, &g, Mode::Eval)?);
    println!("{} trainable values, {size} bytes on disk", params.num_trainable());
    println!("prediction before {a:.7}, after reload {b:.7}, identical: {}", a == b);
    Ok(())
}
