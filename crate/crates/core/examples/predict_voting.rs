//! Sub-sequence splitting and any-positive voting over a long video.

use stam::graph::PoseGraph;
use stam::metrics::vote_predict;
use stam::model::{StamConfig, StamParams};
use stam::nn::Mode;
use stam::train::split_subsequences;

fn main() -> stam::Result<()> {
    // an untrained model is enough to show the plumbing
    let cfg = StamConfig {
        channels: vec![8, 16, 32],
        d_u: 8,
        d_h: 8,
        ..StamConfig::default()
    };
    let params = StamParams::<f32>::init(&cfg, 3)?;
    let frames = 2600;
    let data = (0..18 * 7 * frames).map(|i| ((i % 101) as f32 / 101.0 - 0.5) * 0.1).collect();
    let video = stam::features::PoseSequence::from_raw(18, 7, frames, 30.0, data)?;

    let pieces = split_subsequences(&video, 1000, 200, None)?;
    println!("{} frames -> {} sub-sequences of 1000 (stride 800)", frames, pieces.len());
    let graph = PoseGraph::default();
    let probs = pieces
        .iter()
        .map(|p| params.predict_video(p, &graph, Mode::Eval))
        .collect::<stam::Result<Vec<f64>>>()?;
    for threshold in [0.3, 0.5, 0.7] {
        let (label, score) = vote_predict(&probs, threshold)?;
        println!("threshold {threshold}: label {label}, video score {score:.4} from {probs:.4?}");
    }
    Ok(())
}
