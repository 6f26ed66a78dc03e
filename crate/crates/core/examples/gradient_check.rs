//! Reverse-mode gradients of the full model loss against finite differences,
//! in 64-bit arithmetic.

use stam::autodiff::{gradient_check, Tensor};
use stam::features::PoseSequence;
use stam::graph::PoseGraph;
use stam::model::{ClipBatch, StamConfig, StamParams};
use stam::nn::ForwardCtx;

fn main() -> stam::Result<()> {
    let cfg = StamConfig {
        channels: vec![4, 4, 8],
        d_u: 4,
        d_h: 4,
        ..StamConfig::default()
    };
    let params = StamParams::<f64>::init(&cfg, 0)?;
    let data = (0..18 * 7 * 50).map(|i| ((i * 31 % 97) as f32 / 97.0) - 0.5).collect();
    let seq = PoseSequence::from_raw(18, 7, 50, 30.0, data)?;
    let batch = ClipBatch::<f64>::from_sequences(&[&seq], &cfg)?;
    let graph = PoseGraph::default();
    let inputs: Vec<Tensor<f64>> = params.trainable().into_iter().cloned().collect();
    let report = gradient_check(
        |tape, vars| {
            let mut ctx = ForwardCtx::train(0);
            let out = params.forward_with_vars(tape, vars, &batch, &graph, &mut ctx)?;
            tape.bce(out.prob, &[1.0], None)
        },
        &inputs,
    )?;
    println!("{} parameters, {} clips", params.num_trainable(), batch.num_clips());
    println!(
        "max relative error {:.2e} over {} elements, {} of them with a smaller step to avoid a ReLU kink",
        report.max_rel_error, report.checked, report.refined
    );
    println!(
        "{} elements cross a kink at every step and are left out; with them at the first step the error is {:.2e}",
        report.skipped, report.max_rel_error_all
    );
    Ok(())
}
