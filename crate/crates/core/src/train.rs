//! Dataset splitting, sub-sequence expansion, Adam and the training loop.

use std::time::Instant;

use log::{info, warn};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Scalar, Tensor};
use crate::error::{Result, StamError};
use crate::features::PoseSequence;
use crate::graph::PoseGraph;
use crate::metrics::{vote_predict, EvalReport, VideoScore};
use crate::model::{ClipBatch, StamConfig, StamParams};
use crate::nn::ForwardCtx;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub seed: u64,
    pub val_ratio: f64,
    pub subseq_window: usize,
    pub subseq_overlap: usize,
    /// Cap on sub-sequences taken from each video.
    pub max_subsequences: Option<usize>,
    pub threshold: f64,
    /// Loss weight of positive examples; `None` weighs both classes equally.
    pub pos_weight: Option<f64>,
    /// Stop once validation ROC-AUC reaches this value.
    pub target_auc: Option<f64>,
    /// Videos per forward pass during evaluation.
    pub eval_chunk: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            weight_decay: 1e-4,
            epochs: 800,
            batch_size: 16,
            seed: 0,
            val_ratio: 0.2,
            subseq_window: 1000,
            subseq_overlap: 200,
            max_subsequences: None,
            threshold: 0.5,
            pos_weight: None,
            target_auc: None,
            eval_chunk: 8,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StamError::ConfigInvalid(m));
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return bad(format!("lr {} must be positive", self.lr));
        }
        if !(self.weight_decay >= 0.0) {
            return bad(format!("weight_decay {} must be non-negative", self.weight_decay));
        }
        if !(self.val_ratio > 0.0 && self.val_ratio < 1.0) {
            return bad(format!("val_ratio {} outside (0, 1)", self.val_ratio));
        }
        if self.subseq_overlap >= self.subseq_window {
            return bad(format!(
                "subseq_overlap {} must be below subseq_window {}",
                self.subseq_overlap, self.subseq_window
            ));
        }
        if self.batch_size == 0 || self.eval_chunk == 0 {
            return bad("batch_size and eval_chunk must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.threshold) {
            return bad(format!("threshold {} outside [0, 1]", self.threshold));
        }
        if matches!(self.pos_weight, Some(w) if !(w > 0.0)) {
            return bad("pos_weight must be positive".into());
        }
        Ok(())
    }
}

/// Per-class shuffled partition: `round(n_c * val_ratio)` members of each class
/// go to validation. A class too small to appear on both sides stays in train.
pub fn stratified_split<T: Clone>(items: &[T], labels: &[u8], val_ratio: f64, seed: u64) -> Result<(Vec<T>, Vec<T>)> {
    if items.len() != labels.len() {
        return Err(StamError::LengthMismatch {
            left: items.len(),
            right: labels.len(),
        });
    }
    if !(val_ratio > 0.0 && val_ratio < 1.0) {
        return Err(StamError::ConfigInvalid(format!("val_ratio {val_ratio} outside (0, 1)")));
    }
    for class in [0u8, 1] {
        if !labels.contains(&class) {
            return Err(StamError::SingleClass(1 - class));
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_idx = Vec::new();
    let mut val_idx = Vec::new();
    for class in [0u8, 1] {
        let mut members: Vec<usize> = (0..items.len()).filter(|&i| labels[i] == class).collect();
        members.shuffle(&mut rng);
        if members.len() < 2 {
            warn!("class {class} has {} member(s); keeping it in train", members.len());
            train_idx.extend(members);
            continue;
        }
        let n_val = ((members.len() as f64 * val_ratio).round() as usize).clamp(1, members.len() - 1);
        val_idx.extend_from_slice(&members[..n_val]);
        train_idx.extend_from_slice(&members[n_val..]);
    }
    train_idx.sort_unstable();
    val_idx.sort_unstable();
    Ok((
        train_idx.iter().map(|&i| items[i].clone()).collect(),
        val_idx.iter().map(|&i| items[i].clone()).collect(),
    ))
}

/// Start frames of `window`-frame sub-sequences with `overlap` frames shared.
pub fn subsequence_starts(frames: usize, window: usize, overlap: usize, max_count: Option<usize>) -> Result<Vec<usize>> {
    if overlap >= window {
        return Err(StamError::ConfigInvalid(format!(
            "overlap {overlap} must be below window {window}"
        )));
    }
    if frames < window {
        return Err(StamError::TooShort {
            needed: window,
            got: frames,
        });
    }
    let stride = window - overlap;
    let mut count = (frames - window) / stride + 1;
    if let Some(cap) = max_count {
        count = count.min(cap);
    }
    Ok((0..count).map(|k| k * stride).collect())
}

pub fn split_subsequences(
    seq: &PoseSequence,
    window: usize,
    overlap: usize,
    max_count: Option<usize>,
) -> Result<Vec<PoseSequence>> {
    subsequence_starts(seq.frames(), window, overlap, max_count)?
        .into_iter()
        .map(|s| seq.slice_frames(s, window))
        .collect()
}

fn labelled(seq: &PoseSequence) -> Result<u8> {
    seq.label
        .ok_or_else(|| StamError::ConfigInvalid(format!("sequence {} has no label", seq.id)))
}

/// Adam with the L2 penalty `weight_decay * p` added to each gradient.
#[derive(Debug, Clone)]
pub struct Adam<F> {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    step: i32,
    m: Vec<Vec<F>>,
    v: Vec<Vec<F>>,
}

impl<F: Scalar> Adam<F> {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            step: 0,
            m: Vec::new(),
            v: Vec::new(),
        }
    }

    pub fn steps(&self) -> i32 {
        self.step
    }

    pub fn step(&mut self, params: Vec<&mut Tensor<F>>, grads: &[Vec<F>]) -> Result<()> {
        if params.len() != grads.len() {
            return Err(StamError::LengthMismatch {
                left: params.len(),
                right: grads.len(),
            });
        }
        if self.m.is_empty() {
            self.m = grads.iter().map(|g| vec![F::zero(); g.len()]).collect();
            self.v = self.m.clone();
        }
        self.step += 1;
        let (b1, b2) = (F::of(self.beta1), F::of(self.beta2));
        let c1 = F::of(1.0 - self.beta1.powi(self.step));
        let c2 = F::of(1.0 - self.beta2.powi(self.step));
        let (lr, eps, wd) = (F::of(self.lr), F::of(self.eps), F::of(self.weight_decay));
        let one = F::one();
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            if p.len() != g.len() || self.m[i].len() != g.len() {
                return Err(StamError::shape(format!("parameter {i}: {} values, gradient {}", p.len(), g.len())));
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g).zip(m.iter_mut()).zip(v.iter_mut()) {
                let gi = gi + wd * *w;
                *mi = b1 * *mi + (one - b1) * gi;
                *vi = b2 * *vi + (one - b2) * gi * gi;
                let m_hat = *mi / c1;
                let v_hat = *vi / c2;
                *w = *w - lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub val_auc: Option<f64>,
    pub seconds: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters at the best validation epoch, or the final ones without validation.
    pub best: StamParams<f32>,
    pub last: StamParams<f32>,
    pub best_epoch: usize,
    pub best_val_auc: Option<f64>,
    pub history: Vec<EpochRecord>,
}

/// Trains on labelled sub-sequences. With `val` videos the model is scored
/// after every epoch and the best validation ROC-AUC is kept.
pub fn train(
    train_set: &[PoseSequence],
    val: Option<&[PoseSequence]>,
    config: &TrainConfig,
    init: StamParams<f32>,
    graph: &PoseGraph,
) -> Result<TrainOutcome> {
    config.validate()?;
    init.config.validate()?;
    if train_set.is_empty() {
        return Err(StamError::EmptyInput);
    }
    let labels: Vec<u8> = train_set.iter().map(labelled).collect::<Result<_>>()?;
    for class in [0u8, 1] {
        if !labels.contains(&class) {
            return Err(StamError::SingleClass(1 - class));
        }
    }
    let mut params = init;
    let mut adam = Adam::<f32>::new(config.lr, config.weight_decay);
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut history = Vec::with_capacity(config.epochs);
    let mut best: Option<(f64, usize, StamParams<f32>)> = None;
    for epoch in 1..=config.epochs {
        let started = Instant::now();
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for (step, chunk) in order.chunks(config.batch_size).enumerate() {
            let seqs: Vec<&PoseSequence> = chunk.iter().map(|&i| &train_set[i]).collect();
            let y: Vec<f32> = chunk.iter().map(|&i| labels[i] as f32).collect();
            let w: Option<Vec<f32>> = config
                .pos_weight
                .map(|pw| chunk.iter().map(|&i| if labels[i] == 1 { pw as f32 } else { 1.0 }).collect());
            let batch = ClipBatch::<f32>::from_sequences(&seqs, &params.config)?;
            let mut ctx = ForwardCtx::train(rng.gen());
            let (loss, grads) = params.loss_and_grads(&batch, &y, w.as_deref(), graph, &mut ctx)?;
            if !loss.is_finite() || grads.iter().flatten().any(|g| !g.is_finite()) {
                return Err(StamError::NonFiniteLoss { epoch, step });
            }
            adam.step(params.trainable_mut(), &grads)?;
            params.update_running_stats(&ctx);
            loss_sum += loss as f64 * chunk.len() as f64;
        }
        let loss = loss_sum / train_set.len() as f64;
        let val_auc = match val {
            Some(v) if !v.is_empty() => Some(evaluate(&params, v, config, graph)?.roc_auc),
            _ => None,
        };
        let seconds = started.elapsed().as_secs_f64();
        info!(
            "epoch {epoch}: loss {loss:.5}{} ({seconds:.1}s)",
            val_auc.map(|a| format!(", val auc {a:.4}")).unwrap_or_default()
        );
        history.push(EpochRecord {
            epoch,
            loss,
            val_auc,
            seconds,
        });
        if let Some(auc) = val_auc {
            if best.as_ref().is_none_or(|(b, _, _)| auc > *b) {
                best = Some((auc, epoch, params.clone()));
            }
            if config.target_auc.is_some_and(|t| auc >= t) {
                break;
            }
        }
    }
    let (best_val_auc, best_epoch, best_params) = match best {
        Some((auc, e, p)) => (Some(auc), e, p),
        None => (None, history.len(), params.clone()),
    };
    Ok(TrainOutcome {
        best: best_params,
        last: params,
        best_epoch,
        best_val_auc,
        history,
    })
}

/// Result of [`fit`]: the training outcome and which videos were held out.
#[derive(Debug, Clone)]
pub struct FitOutcome {
    pub outcome: TrainOutcome,
    pub train_ids: Vec<String>,
    pub val_ids: Vec<String>,
}

/// Stratified video split, sub-sequence expansion of the training side,
/// seeded initialization and training with validation on whole videos.
pub fn fit(videos: &[PoseSequence], model: &StamConfig, config: &TrainConfig, graph: &PoseGraph) -> Result<FitOutcome> {
    config.validate()?;
    let labels: Vec<u8> = videos.iter().map(labelled).collect::<Result<_>>()?;
    let index: Vec<usize> = (0..videos.len()).collect();
    let (tr, va) = stratified_split(&index, &labels, config.val_ratio, config.seed)?;
    let mut train_set = Vec::new();
    for &i in &tr {
        train_set.extend(split_subsequences(
            &videos[i],
            config.subseq_window,
            config.subseq_overlap,
            config.max_subsequences,
        )?);
    }
    let val_set: Vec<PoseSequence> = va.iter().map(|&i| videos[i].clone()).collect();
    let init = StamParams::<f32>::init(model, config.seed)?;
    let val = (!val_set.is_empty()).then_some(val_set.as_slice());
    let outcome = train(&train_set, val, config, init, graph)?;
    Ok(FitOutcome {
        outcome,
        train_ids: tr.iter().map(|&i| videos[i].id.clone()).collect(),
        val_ids: va.iter().map(|&i| videos[i].id.clone()).collect(),
    })
}

/// Sub-sequence probabilities for each video, in input order.
pub fn subsequence_probabilities<F: Scalar>(
    params: &StamParams<F>,
    videos: &[PoseSequence],
    config: &TrainConfig,
    graph: &PoseGraph,
) -> Result<Vec<Vec<f64>>> {
    let mut pieces = Vec::new();
    let mut owner = Vec::new();
    for (v, video) in videos.iter().enumerate() {
        for s in split_subsequences(video, config.subseq_window, config.subseq_overlap, config.max_subsequences)? {
            pieces.push(s);
            owner.push(v);
        }
    }
    let refs: Vec<&PoseSequence> = pieces.iter().collect();
    let probs = params.predict_many(&refs, graph, config.eval_chunk)?;
    let mut out = vec![Vec::new(); videos.len()];
    for (p, v) in probs.into_iter().zip(owner) {
        out[v].push(p);
    }
    Ok(out)
}

/// Voted video predictions and ROC analysis over labelled videos.
pub fn evaluate<F: Scalar>(
    params: &StamParams<F>,
    videos: &[PoseSequence],
    config: &TrainConfig,
    graph: &PoseGraph,
) -> Result<EvalReport> {
    let probs = subsequence_probabilities(params, videos, config, graph)?;
    let mut per_video = Vec::with_capacity(videos.len());
    for (video, p) in videos.iter().zip(probs) {
        let (predicted, score) = vote_predict(&p, config.threshold)?;
        per_video.push(VideoScore {
            id: video.id.clone(),
            label: labelled(video)?,
            score,
            predicted,
            subsequences: p,
        });
    }
    EvalReport::from_scores(per_video, config.threshold)
}
