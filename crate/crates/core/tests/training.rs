use stam::features::{compute_motion_features, PoseSequence};
use stam::graph::PoseGraph;
use stam::model::{StamConfig, StamParams};
use stam::pose_io::JointLayout;
use stam::preprocess::{preprocess_sequence, PreprocessOptions};
use stam::synth::{generate_synthetic_dataset, SynthConfig};
use stam::train::{train, TrainConfig};

fn corpus(seed: u64) -> Vec<PoseSequence> {
    let cfg = SynthConfig {
        n_pos: 6,
        n_neg: 18,
        frames: 150,
        burst_min_frames: 40,
        burst_max_frames: 60,
        seed,
        ..SynthConfig::easy()
    };
    generate_synthetic_dataset(&cfg)
        .unwrap()
        .into_iter()
        .map(|v| {
            let clean = preprocess_sequence(&v.raw, &JointLayout::default(), &PreprocessOptions::default()).unwrap();
            let mut s = compute_motion_features(&clean).unwrap();
            s.label = Some(v.truth.label);
            s
        })
        .collect()
}

fn small_model() -> StamConfig {
    StamConfig {
        channels: vec![8, 8, 16],
        d_u: 4,
        d_h: 4,
        ..StamConfig::default()
    }
}

fn run(seed: u64, epochs: usize) -> stam::train::TrainOutcome {
    let data = corpus(seed);
    let config = TrainConfig {
        lr: 1e-3,
        epochs,
        batch_size: data.len(),
        seed,
        subseq_window: 150,
        subseq_overlap: 0,
        ..TrainConfig::default()
    };
    let init = StamParams::<f32>::init(&small_model(), seed).unwrap();
    train(&data, None, &config, init, &PoseGraph::default()).unwrap()
}

#[test]
fn loss_decreases_over_first_ten_epochs() {
    let mut monotone = 0;
    for seed in 0..10 {
        let losses: Vec<f64> = run(seed, 10).history.iter().map(|r| r.loss).collect();
        let ok = losses.windows(2).all(|w| w[1] < w[0]);
        println!("seed {seed}: {ok} {losses:.4?}");
        monotone += usize::from(ok);
    }
    assert!(monotone >= 9, "{monotone}/10 seeds decreased monotonically");
}

#[test]
fn identical_seeds_give_identical_parameters() {
    let a = run(3, 3);
    let b = run(3, 3);
    assert_eq!(
        stam::checkpoint::encode(&a.last).unwrap(),
        stam::checkpoint::encode(&b.last).unwrap()
    );
    let la: Vec<u64> = a.history.iter().map(|r| r.loss.to_bits()).collect();
    let lb: Vec<u64> = b.history.iter().map(|r| r.loss.to_bits()).collect();
    assert_eq!(la, lb);
}
