//! Joint x clip attention map of one sequence, printed as a text heat map.

use stam::graph::PoseGraph;
use stam::model::{explain, StamConfig, StamParams};
use stam::pose_io::JOINT_NAMES;

fn main() -> stam::Result<()> {
    let cfg = StamConfig {
        channels: vec![8, 16, 32],
        d_u: 8,
        d_h: 8,
        ..StamConfig::default()
    };
    let mut params = StamParams::<f32>::init(&cfg, 5)?;
    // sharper scorers so the map is not flat
    for t in [&mut params.spatial_score, &mut params.temporal_score] {
        t.data_mut().iter_mut().for_each(|v| *v *= 10.0);
    }
    let frames = 300;
    let data = (0..18 * 7 * frames).map(|i| (i * 7919 % 1009) as f32 / 1009.0 - 0.5).collect();
    let seq = stam::features::PoseSequence::from_raw(18, 7, frames, 30.0, data)?;

    let map = explain(&seq, &params, &PoseGraph::default())?;
    println!("{} clips starting at {:?}", map.num_clips(), map.clip_starts);
    println!("alpha {:.3?}", map.alpha);
    let shades = [' ', '.', ':', '-', '=', '+', '*', '#', '%', '@'];
    for (name, row) in JOINT_NAMES.iter().zip(&map.normalized) {
        let cells: String = row.iter().map(|&v| shades[((v * 9.0).round() as usize).min(9)]).collect();
        println!("{name:>15} |{cells}|");
    }
    println!("sum of raw contributions {:.6}", map.raw_total());
    Ok(())
}
