//! The 18-joint body graph and its normalized adjacency.

use stam::graph::PoseGraph;
use stam::pose_io::JOINT_NAMES;

fn main() {
    let g = PoseGraph::default();
    println!("{} joints, {} limb edges", g.num_nodes(), g.adjacency.count_edges());
    for (i, name) in JOINT_NAMES.iter().enumerate() {
        let neighbours: Vec<&str> = (0..g.num_nodes())
            .filter(|&j| j != i && g.adjacency.get(i, j) > 0.0)
            .map(|j| JOINT_NAMES[j])
            .collect();
        println!("{name:>15}: self weight {:.3}, neighbours {neighbours:?}", g.normalized.get(i, i));
    }
}
