//! End-to-end acceptance checks, one line per criterion.
//!
//! Run with `cargo test --test acceptance`; set `ACCEPTANCE_ONLY=2,5` to run a
//! subset. Criteria listed in `KNOWN_RED` are reported but do not fail the run.

use std::collections::HashMap;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stam::autodiff::{gradient_check, Tape, Tensor};
use stam::checkpoint;
use stam::cli::predict_file;
use stam::features::{compute_motion_features, PoseSequence};
use stam::graph::PoseGraph;
use stam::metrics::{roc_auc, roc_points, trapezoid_auc};
use stam::model::{explain, AttentionMode, ClipBatch, StamConfig, StamParams};
use stam::nn::{ForwardCtx, Mode};
use stam::pose_io::{write_pose_file, JointLayout, Keypoint, RawPoseSequence, NUM_JOINTS};
use stam::preprocess::{
    impute_linear, normalize_pose, preprocess_sequence, rolling_filter_frames, CleanPoseSequence, FilterMode,
    PreprocessOptions,
};
use stam::synth::{generate_synthetic_dataset, SynthConfig, SyntheticVideo};
use stam::train::{evaluate, fit, split_subsequences, train, TrainConfig};

/// Criteria expected to fail on this machine, with the reason in the README.
const KNOWN_RED: &[u8] = &[];

struct Verdict {
    pass: bool,
    detail: String,
}

fn verdict(pass: bool, detail: impl Into<String>) -> Verdict {
    Verdict {
        pass,
        detail: detail.into(),
    }
}

fn featurize(v: &SyntheticVideo) -> PoseSequence {
    let clean = preprocess_sequence(&v.raw, &JointLayout::default(), &PreprocessOptions::default()).unwrap();
    let mut s = compute_motion_features(&clean).unwrap();
    s.id = v.truth.id.clone();
    s.label = Some(v.truth.label);
    s
}

/// The model trained in the acceptance runs: default clip geometry, kernel
/// sizes and strides, narrower layers.
fn compact(attention: AttentionMode) -> StamConfig {
    StamConfig {
        channels: vec![8, 16, 32],
        d_u: 8,
        d_h: 8,
        attention,
        ..StamConfig::default()
    }
}

fn run_config(seed: u64, frames: usize) -> TrainConfig {
    TrainConfig {
        lr: 3e-3,
        epochs: 200,
        seed,
        subseq_window: frames,
        subseq_overlap: frames / 5,
        target_auc: Some(0.95),
        ..TrainConfig::default()
    }
}

fn criterion_1() -> Verdict {
    let cfg = SynthConfig {
        n_pos: 35,
        n_neg: 200,
        frames: 1000,
        seed: 7,
        ..SynthConfig::default()
    };
    let videos: Vec<PoseSequence> = generate_synthetic_dataset(&cfg).unwrap().iter().map(featurize).collect();
    let started = Instant::now();
    let fitted = fit(&videos, &compact(AttentionMode::Both), &run_config(7, 1000), &PoseGraph::default()).unwrap();
    let secs = started.elapsed().as_secs_f64();
    let count = |ids: &[String], label: u8| {
        ids.iter()
            .filter(|id| videos.iter().any(|v| &v.id == *id && v.label == Some(label)))
            .count()
    };
    let split = (
        count(&fitted.train_ids, 0),
        count(&fitted.train_ids, 1),
        count(&fitted.val_ids, 0),
        count(&fitted.val_ids, 1),
    );
    let auc = fitted.outcome.best_val_auc.unwrap_or(0.0);
    verdict(
        split == (160, 28, 40, 7) && auc >= 0.95 && secs <= 600.0,
        format!(
            "split {}/{} train {}/{} val, best val AUC {auc:.4} at epoch {}, {secs:.0}s",
            split.0, split.1, split.2, split.3, fitted.outcome.best_epoch
        ),
    )
}

fn criterion_2() -> Verdict {
    let cfg = StamConfig {
        channels: vec![8, 8, 8],
        d_u: 4,
        d_h: 4,
        ..StamConfig::default()
    };
    let graph = PoseGraph::default();
    let mut worst = (0u64, 0.0f64);
    let mut worst_all = 0.0f64;
    let mut skipped = 0;
    let mut refined = 0;
    let mut checked = 0;
    let mut failing = Vec::new();
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = StamParams::<f64>::init(&cfg, seed).unwrap();
        let data = (0..18 * 7 * 50).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
        let seq = PoseSequence::from_raw(18, 7, 50, 30.0, data).unwrap();
        let batch = ClipBatch::<f64>::from_sequences(&[&seq], &cfg).unwrap();
        assert_eq!(batch.num_clips(), 2);
        let inputs: Vec<Tensor<f64>> = params.trainable().into_iter().cloned().collect();
        let report = gradient_check(
            |tape, vars| {
                let mut ctx = ForwardCtx::train(seed);
                let out = params.forward_with_vars(tape, vars, &batch, &graph, &mut ctx)?;
                tape.bce(out.prob, &[1.0], None)
            },
            &inputs,
        )
        .unwrap();
        skipped += report.skipped;
        checked += report.checked;
        refined += report.refined;
        worst_all = worst_all.max(report.max_rel_error_all);
        if report.max_rel_error > worst.1 {
            worst = (seed, report.max_rel_error);
        }
        if report.max_rel_error > 1e-4 {
            failing.push(seed);
        }
    }
    verdict(
        failing.is_empty(),
        format!(
            "max rel error {:.2e} (seed {}) over {checked} elements, failing seeds {failing:?}; {refined} needed a smaller step to avoid a ReLU kink, {skipped} crossed one at every step and were left out (error at the first step, kinks included: {worst_all:.2e})",
            worst.1, worst.0
        ),
    )
}

fn random_params(rng: &mut ChaCha8Rng) -> (StamParams<f32>, PoseSequence) {
    let cfg = StamConfig {
        channels: vec![8, 8, 16],
        d_u: 4,
        d_h: 4,
        ..StamConfig::default()
    };
    let mut p = StamParams::<f32>::init(&cfg, rng.gen()).unwrap();
    let gain: f32 = rng.gen_range(1.0..20.0);
    for t in [&mut p.spatial_score, &mut p.temporal_score] {
        t.data_mut().iter_mut().for_each(|v| *v *= gain);
    }
    let frames = rng.gen_range(30..200);
    let data = (0..18 * 7 * frames).map(|_| rng.gen_range(-1.0f32..1.0)).collect();
    (p, PoseSequence::from_raw(18, 7, frames, 30.0, data).unwrap())
}

fn criterion_3() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let graph = PoseGraph::default();
    let (mut beta_err, mut alpha_err, mut total_err) = (0.0f64, 0.0f64, 0.0f64);
    for _ in 0..100 {
        let (p, seq) = random_params(&mut rng);
        let map = explain(&seq, &p, &graph).unwrap();
        for b in &map.beta {
            beta_err = beta_err.max((b.iter().sum::<f64>() - 1.0).abs());
        }
        alpha_err = alpha_err.max((map.alpha.iter().sum::<f64>() - 1.0).abs());
        let total: f64 = (0..map.alpha.len())
            .map(|k| map.alpha[k] * map.beta[k].iter().sum::<f64>())
            .sum();
        total_err = total_err.max((total - 1.0).abs());
    }
    verdict(
        beta_err <= 1e-6 && alpha_err <= 1e-6 && total_err <= 1e-5,
        format!("max |sum beta - 1| {beta_err:.1e}, |sum alpha - 1| {alpha_err:.1e}, |sum alpha beta - 1| {total_err:.1e}"),
    )
}

fn criterion_4() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let graph = PoseGraph::default();
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let (p, seq) = random_params(&mut rng);
        let inf = p.infer(&seq, &graph).unwrap();
        let w: Vec<f64> = p.head_weight.data().iter().map(|&v| v as f64).collect();
        let b = p.head_bias.data()[0] as f64;
        let mut logit = b;
        for k in 0..inf.clips {
            for j in 0..inf.joints {
                let z = inf.joint_vector(k, j);
                logit += inf.alpha[k] * inf.beta[k][j] * w.iter().zip(z).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        let rebuilt = 1.0 / (1.0 + (-logit).exp());
        let direct = p.predict_video(&seq, &graph, Mode::Eval).unwrap();
        worst = worst.max((rebuilt - direct).abs());
    }
    verdict(worst <= 1e-6, format!("max |decomposed - predicted| {worst:.1e}"))
}

fn criterion_5() -> Verdict {
    let cfg = StamConfig::default();
    let p = StamParams::<f32>::init(&cfg, 5).unwrap();
    let data = (0..18 * 7 * 1000).map(|i| ((i % 89) as f32 / 89.0) - 0.5).collect();
    let seq = PoseSequence::from_raw(18, 7, 1000, 30.0, data).unwrap();
    let batch = ClipBatch::<f32>::from_sequences(&[&seq], &cfg).unwrap();
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::eval();
    let (out, _) = p.forward(&mut tape, &batch, &PoseGraph::default(), &mut ctx).unwrap();
    // K = floor((T - w) / (w - overlap)) + 1; each layer maps t to floor((t - 1) / stride) + 1
    let k = (1000 - 30) / (30 - 10) + 1;
    let mut trace = vec![30usize];
    for s in [1usize, 2, 2] {
        trace.push((trace.last().unwrap() - 1) / s + 1);
    }
    let joints = tape.shape(out.joints).to_vec();
    let video = tape.shape(out.video).to_vec();
    let ok = batch.num_clips() == k
        && k == 49
        && cfg.time_trace() == trace
        && trace == [30, 30, 15, 8]
        && joints == [49, 18, 256]
        && video == [1, 256];
    verdict(
        ok,
        format!(
            "K {}, time trace {:?}, joint maps {joints:?}, video representation {video:?}",
            batch.num_clips(),
            cfg.time_trace()
        ),
    )
}

fn pairwise_auc(scores: &[f64], labels: &[u8]) -> f64 {
    let (mut wins, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        for (j, &sj) in scores.iter().enumerate() {
            if labels[i] == 1 && labels[j] == 0 {
                pairs += 1.0;
                wins += if si > sj {
                    1.0
                } else if si == sj {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    wins / pairs
}

fn criterion_6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let (mut exact, mut trap_err) = (0, 0.0f64);
    for _ in 0..1000 {
        let n = rng.gen_range(2..=50);
        let mut labels: Vec<u8> = (0..n).map(|_| rng.gen_range(0..2)).collect();
        labels[0] = 0;
        labels[1] = 1;
        // coarse scores so ties are common
        let scores: Vec<f64> = (0..n).map(|_| rng.gen_range(0..8) as f64 / 8.0).collect();
        let auc = roc_auc(&scores, &labels).unwrap();
        exact += usize::from(auc == pairwise_auc(&scores, &labels));
        trap_err = trap_err.max((trapezoid_auc(&roc_points(&scores, &labels).unwrap()) - auc).abs());
    }
    let hand = roc_auc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
    verdict(
        exact == 1000 && trap_err <= 1e-9 && hand == 0.75,
        format!("{exact}/1000 exact, max trapezoid gap {trap_err:.1e}, hand case {hand}"),
    )
}

fn scaled(raw: &RawPoseSequence, s: f64) -> RawPoseSequence {
    let mut out = raw.clone();
    for f in &mut out.frames {
        for k in f.joints.iter_mut().flatten() {
            *k = Keypoint {
                x: k.x * s,
                y: k.y * s,
                confidence: k.confidence,
            };
        }
    }
    out
}

fn criterion_7() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let layout = JointLayout::default();
    let opts = PreprocessOptions::default();

    let mut trunk_err = 0.0f64;
    for _ in 0..200 {
        let frames = rng.gen_range(1..30);
        let coords: Vec<f64> = (0..NUM_JOINTS * 2 * frames).map(|_| rng.gen_range(-50.0..50.0)).collect();
        let out = normalize_pose(&coords, frames, &layout).unwrap();
        let clean = CleanPoseSequence::new(String::new(), 30.0, NUM_JOINTS, frames, out).unwrap();
        for t in 0..frames {
            trunk_err = trunk_err.max((clean.trunk_length(t) - 1.0).abs());
        }
    }

    let synth = SynthConfig {
        n_pos: 5,
        n_neg: 5,
        frames: 200,
        burst_min_frames: 40,
        burst_max_frames: 60,
        missing_rate: 0.05,
        seed: 7,
        ..SynthConfig::default()
    };
    let mut scale_err = 0.0f64;
    for v in generate_synthetic_dataset(&synth).unwrap() {
        let base = preprocess_sequence(&v.raw, &layout, &opts).unwrap();
        for t in 0..base.frames() {
            trunk_err = trunk_err.max((base.trunk_length(t) - 1.0).abs());
        }
        for s in [1e-3, 0.37, 12.5, 4e3] {
            let other = preprocess_sequence(&scaled(&v.raw, s), &layout, &opts).unwrap();
            for (a, b) in base.coords().iter().zip(other.coords()) {
                scale_err = scale_err.max((a - b).abs());
            }
        }
    }

    let mut impute_err = 0.0f64;
    for _ in 0..500 {
        let n = rng.gen_range(2..80);
        let (a, b) = (rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0));
        let truth: Vec<f64> = (0..n).map(|i| a + b * i as f64).collect();
        let series: Vec<Option<f64>> = truth
            .iter()
            .enumerate()
            .map(|(i, &v)| (i == 0 || i == n - 1 || rng.gen_bool(0.5)).then_some(v))
            .collect();
        for (f, t) in impute_linear(&series).unwrap().iter().zip(&truth) {
            impute_err = impute_err.max((f - t).abs());
        }
    }

    let mut spikes_left = 0;
    for _ in 0..500 {
        let n = rng.gen_range(10..100);
        let phase = rng.gen_range(0.0..6.3);
        let base: Vec<f64> = (0..n).map(|i| (0.05 * i as f64 + phase).sin()).collect();
        let mut series = base.clone();
        let mut spiked = Vec::new();
        let mut k = rng.gen_range(1..4);
        while k < n - 1 {
            series[k] += rng.gen_range(5.0..1e4) * if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
            spiked.push(k);
            k += rng.gen_range(3..10);
        }
        let out = rolling_filter_frames(&series, 3, FilterMode::Median).unwrap();
        for &k in &spiked {
            let (lo, hi) = (base[k - 1].min(base[k + 1]), base[k - 1].max(base[k + 1]));
            if out[k] < lo - 1e-12 || out[k] > hi + 1e-12 {
                spikes_left += 1;
            }
        }
    }

    verdict(
        trunk_err <= 1e-9 && scale_err <= 1e-6 && impute_err <= 1e-9 && spikes_left == 0,
        format!(
            "trunk |L - 1| {trunk_err:.1e}, scale gap {scale_err:.1e}, affine imputation gap {impute_err:.1e}, spikes surviving median {spikes_left}"
        ),
    )
}

fn criterion_8() -> Verdict {
    let cfg = SynthConfig {
        n_pos: 35,
        n_neg: 200,
        seed: 8,
        ..SynthConfig::easy()
    };
    let videos: Vec<PoseSequence> = generate_synthetic_dataset(&cfg).unwrap().iter().map(featurize).collect();
    let mut parts = Vec::new();
    let mut pass = true;
    for mode in [AttentionMode::None, AttentionMode::Spatial, AttentionMode::Temporal] {
        let train = TrainConfig {
            target_auc: Some(0.9),
            ..run_config(8, 1000)
        };
        let fitted = fit(&videos, &compact(mode), &train, &PoseGraph::default()).unwrap();
        let auc = fitted.outcome.best_val_auc.unwrap_or(0.0);
        pass &= auc >= 0.9;
        parts.push(format!("{mode:?} {auc:.3} (epoch {})", fitted.outcome.best_epoch));
    }
    verdict(pass, format!("best val AUC: {}", parts.join(", ")))
}

fn criterion_9() -> Verdict {
    let cfg = SynthConfig {
        n_pos: 6,
        n_neg: 18,
        frames: 300,
        seed: 9,
        ..SynthConfig::default()
    };
    let videos: Vec<PoseSequence> = generate_synthetic_dataset(&cfg).unwrap().iter().map(featurize).collect();
    let train = TrainConfig {
        epochs: 3,
        target_auc: None,
        ..run_config(9, 300)
    };
    let graph = PoseGraph::default();
    let once = || {
        let fitted = fit(&videos, &compact(AttentionMode::Both), &train, &graph).unwrap();
        let ckpt = checkpoint::encode(&fitted.outcome.best).unwrap();
        let report = evaluate(&fitted.outcome.best, &videos, &train, &graph).unwrap();
        let losses: Vec<u64> = fitted.outcome.history.iter().map(|r| r.loss.to_bits()).collect();
        (ckpt, serde_json::to_string(&report).unwrap(), losses)
    };
    let (a, b) = (once(), once());
    verdict(
        a == b,
        format!(
            "checkpoints {} ({} bytes), metrics JSON {}, loss history {}",
            if a.0 == b.0 { "identical" } else { "differ" },
            a.0.len(),
            if a.1 == b.1 { "identical" } else { "differs" },
            if a.2 == b.2 { "identical" } else { "differs" },
        ),
    )
}

fn criterion_10() -> Verdict {
    let dir = tempfile::tempdir().unwrap();
    let graph = PoseGraph::default();
    let cfg = SynthConfig {
        n_pos: 2,
        n_neg: 2,
        frames: 1000,
        seed: 10,
        ..SynthConfig::default()
    };
    let corpus = generate_synthetic_dataset(&cfg).unwrap();
    // a short training run at the default widths, on 200-frame pieces to bound memory
    let pieces: Vec<PoseSequence> = corpus
        .iter()
        .map(featurize)
        .flat_map(|s| split_subsequences(&s, 200, 0, Some(2)).unwrap())
        .collect();
    let train_cfg = TrainConfig {
        epochs: 1,
        batch_size: 4,
        subseq_window: 200,
        subseq_overlap: 0,
        ..TrainConfig::default()
    };
    let init = StamParams::<f32>::init(&StamConfig::default(), 10).unwrap();
    let trained = train(&pieces, None, &train_cfg, init, &graph).unwrap();
    let ckpt = dir.path().join("model.ckpt");
    checkpoint::save(&trained.last, &ckpt).unwrap();
    let input = dir.path().join("video.jsonl");
    write_pose_file(&corpus[0].raw, &input).unwrap();
    let vote = TrainConfig::default();
    let times: Vec<f64> = (0..3)
        .map(|_| {
            let t = Instant::now();
            let pred = predict_file(&ckpt, &input, &vote).unwrap();
            assert_eq!(pred.subsequences.len(), 1);
            t.elapsed().as_secs_f64()
        })
        .collect();
    let worst = times.iter().cloned().fold(0.0, f64::max);
    verdict(
        worst <= 1.0,
        format!("load + preprocess + predict, default widths, 1000 frames: {times:.3?} s"),
    )
}

fn burst_coverage(truth: &stam::synth::SequenceTruth, joint: usize, start: usize, end: usize) -> usize {
    (start..end)
        .filter(|&t| truth.bursts.iter().any(|b| b.joint == joint && b.start <= t && t < b.end))
        .count()
}

fn criterion_11() -> Verdict {
    let graph = PoseGraph::default();
    let mut wins = 0;
    let mut parts = Vec::new();
    for seed in 0..10u64 {
        let cfg = SynthConfig {
            n_pos: 20,
            n_neg: 60,
            frames: 500,
            seed: 100 + seed,
            ..SynthConfig::default()
        };
        let corpus = generate_synthetic_dataset(&cfg).unwrap();
        let videos: Vec<PoseSequence> = corpus.iter().map(featurize).collect();
        let truth: HashMap<&str, &stam::synth::SequenceTruth> =
            corpus.iter().map(|v| (v.truth.id.as_str(), &v.truth)).collect();
        let train = TrainConfig {
            epochs: 60,
            ..run_config(seed, 500)
        };
        let model = compact(AttentionMode::Both);
        let fitted = fit(&videos, &model, &train, &graph).unwrap();
        let (mut burst, mut burst_n, mut quiet, mut quiet_n) = (0.0, 0usize, 0.0, 0usize);
        for id in &fitted.val_ids {
            let t = truth[id.as_str()];
            if t.label != 1 {
                continue;
            }
            let seq = videos.iter().find(|v| &v.id == id).unwrap();
            let map = explain(seq, &fitted.outcome.best, &graph).unwrap();
            for (j, row) in map.normalized.iter().enumerate() {
                for (k, &v) in row.iter().enumerate() {
                    let s = map.clip_starts[k];
                    let covered = burst_coverage(t, j, s, s + model.clip_len);
                    if 2 * covered >= model.clip_len {
                        burst += v;
                        burst_n += 1;
                    } else if covered == 0 {
                        quiet += v;
                        quiet_n += 1;
                    }
                }
            }
        }
        let (b, q) = (burst / burst_n.max(1) as f64, quiet / quiet_n.max(1) as f64);
        wins += usize::from(burst_n > 0 && b > q);
        parts.push(format!("{b:.3}/{q:.3}"));
    }
    verdict(
        wins >= 8,
        format!("burst > non-burst in {wins}/10 seeds; burst/non-burst means {}", parts.join(" ")),
    )
}

fn main() {
    let only: Option<Vec<u8>> = std::env::var("ACCEPTANCE_ONLY")
        .ok()
        .map(|s| s.split(',').filter_map(|v| v.trim().parse().ok()).collect());
    let criteria: [(u8, &str, fn() -> Verdict); 11] = [
        (1, "synthetic validation AUC", criterion_1),
        (2, "gradient fidelity", criterion_2),
        (3, "attention normalization", criterion_3),
        (4, "attention decomposition", criterion_4),
        (5, "shape contract", criterion_5),
        (6, "ROC-AUC oracle", criterion_6),
        (7, "preprocessing properties", criterion_7),
        (8, "ablation variants", criterion_8),
        (9, "determinism", criterion_9),
        (10, "prediction time", criterion_10),
        (11, "attention localization", criterion_11),
    ];
    let mut unexpected = Vec::new();
    for (n, name, run) in criteria {
        if only.as_ref().is_some_and(|o| !o.contains(&n)) {
            continue;
        }
        let started = Instant::now();
        let v = run();
        let tag = match (v.pass, KNOWN_RED.contains(&n)) {
            (true, _) => "PASS",
            (false, true) => "FAIL (known)",
            (false, false) => "FAIL",
        };
        println!(
            "criterion {n:>2}: {tag} | {name}: {} [{:.0}s]",
            v.detail,
            started.elapsed().as_secs_f64()
        );
        if !v.pass && !KNOWN_RED.contains(&n) {
            unexpected.push(n);
        }
    }
    if !unexpected.is_empty() {
        eprintln!("unexpected failures: {unexpected:?}");
        std::process::exit(1);
    }
}
