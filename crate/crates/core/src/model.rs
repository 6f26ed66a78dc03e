//! The spatio-temporal attention model.
//!
//! A pose sequence is cut into overlapping clips. Each clip goes through a
//! three-layer ST-GCN, giving one representation per joint; spatial attention
//! pools joints into a clip vector, temporal attention pools clips into a
//! video vector, and a logistic head turns that into a probability.

use std::rc::Rc;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{sigmoid, Scalar, SparseMatrix, Tape, Tensor, Var};
use crate::error::{Result, StamError};
use crate::features::{PoseSequence, NUM_CHANNELS};
use crate::graph::PoseGraph;
use crate::nn::{glorot, leaf_binder, BatchNormParams, Binder, BoundLayer, BoundNorm, ForwardCtx, Mode, StgcnLayerParams};
use crate::pose_io::NUM_JOINTS;

/// Batch-norm buffers are carried by checkpoints but never optimized.
fn is_trainable(name: &str) -> bool {
    ![".running_mean", ".running_var", ".batches_tracked"].iter().any(|s| name.ends_with(s))
}

/// Variance floor of the input normalization. Raw feature channels span
/// several orders of magnitude (accelerations have variance near 1e-8), so
/// the usual 1e-5 would leave the small ones unnormalized.
pub const INPUT_NORM_EPS: f64 = 1e-12;

/// Which pooling stages use learned attention; the others average uniformly.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum AttentionMode {
    None,
    Spatial,
    Temporal,
    #[default]
    Both,
}

impl AttentionMode {
    pub fn spatial(self) -> bool {
        matches!(self, AttentionMode::Spatial | AttentionMode::Both)
    }

    pub fn temporal(self) -> bool {
        matches!(self, AttentionMode::Temporal | AttentionMode::Both)
    }
}

impl std::str::FromStr for AttentionMode {
    type Err = StamError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "none" => Ok(Self::None),
            "spatial" => Ok(Self::Spatial),
            "temporal" => Ok(Self::Temporal),
            "both" => Ok(Self::Both),
            other => Err(StamError::ConfigInvalid(format!("unknown attention mode {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct StamConfig {
    /// Clip length in frames.
    pub clip_len: usize,
    /// Frames shared by consecutive clips.
    pub clip_overlap: usize,
    pub in_channels: usize,
    /// Output channels of each ST-GCN layer; the last one is the representation size.
    pub channels: Vec<usize>,
    pub t_kernels: Vec<usize>,
    pub t_strides: Vec<usize>,
    /// Hidden size of the spatial attention scorer.
    pub d_u: usize,
    /// Hidden size of the temporal attention scorer.
    pub d_h: usize,
    pub attention: AttentionMode,
    pub dropout: f64,
    /// Batch norm over joint x channel inputs ahead of the first layer.
    pub input_norm: bool,
}

impl Default for StamConfig {
    fn default() -> Self {
        Self {
            clip_len: 30,
            clip_overlap: 10,
            in_channels: NUM_CHANNELS,
            channels: vec![64, 128, 256],
            t_kernels: vec![9, 9, 9],
            t_strides: vec![1, 2, 2],
            d_u: 64,
            d_h: 64,
            attention: AttentionMode::Both,
            dropout: 0.3,
            input_norm: true,
        }
    }
}

impl StamConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(StamError::ConfigInvalid(m));
        if self.clip_len == 0 || self.clip_overlap >= self.clip_len {
            return bad(format!(
                "clip_overlap {} must be below clip_len {}",
                self.clip_overlap, self.clip_len
            ));
        }
        if self.channels.is_empty()
            || self.channels.len() != self.t_kernels.len()
            || self.channels.len() != self.t_strides.len()
        {
            return bad("channels, t_kernels and t_strides need equal non-zero length".into());
        }
        if self.channels.contains(&0) || self.in_channels == 0 {
            return bad("channel counts must be positive".into());
        }
        if self.t_kernels.iter().any(|k| k % 2 == 0) || self.t_strides.contains(&0) {
            return bad("temporal kernels must be odd and strides positive".into());
        }
        if self.d_u == 0 || self.d_h == 0 {
            return bad("attention sizes d_u, d_h must be at least 1".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return bad(format!("dropout {} outside [0, 1)", self.dropout));
        }
        Ok(())
    }

    /// Representation size `d`.
    pub fn repr_dim(&self) -> usize {
        *self.channels.last().unwrap()
    }

    pub fn clip_stride(&self) -> usize {
        self.clip_len - self.clip_overlap
    }

    /// Frames along the time axis after each layer, starting with the clip length.
    pub fn time_trace(&self) -> Vec<usize> {
        let mut t = vec![self.clip_len];
        for &s in &self.t_strides {
            t.push(t.last().unwrap().div_ceil(s));
        }
        t
    }
}

/// Start frames of the clips covering `frames`: clip `k` starts at
/// `k * (clip_len - overlap)`; a trailing remainder shorter than a full clip
/// is dropped.
pub fn split_clips(frames: usize, clip_len: usize, overlap: usize) -> Result<Vec<usize>> {
    if overlap >= clip_len {
        return Err(StamError::ConfigInvalid(format!(
            "overlap {overlap} must be below clip length {clip_len}"
        )));
    }
    if frames < clip_len {
        return Err(StamError::TooShort {
            needed: clip_len,
            got: frames,
        });
    }
    let stride = clip_len - overlap;
    let count = (frames - clip_len) / stride + 1;
    Ok((0..count).map(|k| k * stride).collect())
}

/// All learnable tensors and batch-norm buffers of the model.
#[derive(Debug, Clone, PartialEq)]
pub struct StamParams<F> {
    pub config: StamConfig,
    pub input_norm: Option<BatchNormParams<F>>,
    pub layers: Vec<StgcnLayerParams<F>>,
    /// `[d, d_u]`, applied as `z W`.
    pub spatial_proj: Tensor<F>,
    /// `[d_u, 1]`
    pub spatial_score: Tensor<F>,
    /// `[d, d_h]`
    pub temporal_proj: Tensor<F>,
    /// `[d_h, 1]`
    pub temporal_score: Tensor<F>,
    /// `[d, 1]`
    pub head_weight: Tensor<F>,
    /// `[1]`
    pub head_bias: Tensor<F>,
}

/// Tape handles of one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardVars {
    /// `[clips, M, d]`
    pub joints: Var,
    /// `[clips * M]`
    pub beta: Var,
    /// `[clips, d]`
    pub clips: Var,
    /// `[clips]`
    pub alpha: Var,
    /// `[videos, d]`
    pub video: Var,
    /// `[videos, 1]`
    pub logit: Var,
    /// `[videos, 1]`
    pub prob: Var,
}

/// Clips of several videos stacked frame-major as `[clips, w, M, c]`.
#[derive(Debug, Clone)]
pub struct ClipBatch<F> {
    pub data: Vec<F>,
    pub clip_len: usize,
    pub joints: usize,
    pub channels: usize,
    /// Clip index ranges per video.
    pub video_offsets: Rc<Vec<usize>>,
    pub clip_starts: Vec<Vec<usize>>,
}

impl<F: Scalar> ClipBatch<F> {
    pub fn from_sequences(seqs: &[&PoseSequence], config: &StamConfig) -> Result<Self> {
        let mut data = Vec::new();
        let mut offsets = vec![0];
        let mut starts_all = Vec::with_capacity(seqs.len());
        let (m, c) = match seqs.first() {
            Some(s) => (s.joints(), s.channels()),
            None => return Err(StamError::shape("empty batch")),
        };
        for s in seqs {
            if s.joints() != m || s.channels() != config.in_channels {
                return Err(StamError::shape(format!(
                    "sequence {} is {}x{}, expected {m}x{}",
                    s.id,
                    s.joints(),
                    s.channels(),
                    config.in_channels
                )));
            }
            let starts = split_clips(s.frames(), config.clip_len, config.clip_overlap)?;
            for &st in &starts {
                data.extend(s.frame_major(st, config.clip_len).into_iter().map(|v| F::of(v as f64)));
            }
            offsets.push(offsets.last().unwrap() + starts.len());
            starts_all.push(starts);
        }
        Ok(Self {
            data,
            clip_len: config.clip_len,
            joints: m,
            channels: c,
            video_offsets: Rc::new(offsets),
            clip_starts: starts_all,
        })
    }

    /// A batch of explicit clips, each `[w, M, c]` frame-major, grouped into
    /// videos by `clips_per_video`.
    pub fn from_clips(
        clips: Vec<Vec<F>>,
        clips_per_video: &[usize],
        clip_len: usize,
        joints: usize,
        channels: usize,
    ) -> Result<Self> {
        let per = clip_len * joints * channels;
        if clips.iter().any(|c| c.len() != per) {
            return Err(StamError::shape(format!("every clip needs {per} values")));
        }
        if clips_per_video.iter().sum::<usize>() != clips.len() || clips_per_video.contains(&0) {
            return Err(StamError::shape("clip grouping does not cover the clips".to_string()));
        }
        let mut offsets = vec![0];
        for &k in clips_per_video {
            offsets.push(offsets.last().unwrap() + k);
        }
        Ok(Self {
            data: clips.concat(),
            clip_len,
            joints,
            channels,
            video_offsets: Rc::new(offsets),
            clip_starts: clips_per_video.iter().map(|&k| (0..k).collect()).collect(),
        })
    }

    pub fn num_clips(&self) -> usize {
        *self.video_offsets.last().unwrap()
    }

    pub fn num_videos(&self) -> usize {
        self.video_offsets.len() - 1
    }
}

/// Softmax attention pooling: `weights = softmax_seg(tanh(values W) w)`,
/// `pooled[s] = sum_r weights[r] values[r]`.
pub fn attention_pool<F: Scalar>(
    tape: &mut Tape<F>,
    values: Var,
    proj: Var,
    score: Var,
    offsets: &Rc<Vec<usize>>,
) -> Result<(Var, Var)> {
    let u = tape.matmul(values, proj)?;
    let u = tape.tanh(u);
    let logits = tape.matmul(u, score)?;
    let weights = tape.segment_softmax(logits, offsets)?;
    let pooled = tape.segment_weighted_sum(weights, values, offsets)?;
    Ok((weights, pooled))
}

/// Uniform pooling with constant weights `1 / |segment|`.
pub fn uniform_pool<F: Scalar>(tape: &mut Tape<F>, values: Var, offsets: &Rc<Vec<usize>>) -> Result<(Var, Var)> {
    let mut w = Vec::with_capacity(*offsets.last().unwrap_or(&0));
    for seg in offsets.windows(2) {
        let n = seg[1] - seg[0];
        w.extend(std::iter::repeat(F::of(1.0 / n as f64)).take(n));
    }
    let n = w.len();
    let weights = tape.constant(vec![n], w)?;
    let pooled = tape.segment_weighted_sum(weights, values, offsets)?;
    Ok((weights, pooled))
}

struct Bound<'a, F> {
    input_norm: Option<BoundNorm<'a, F>>,
    layers: Vec<BoundLayer<'a, F>>,
    spatial_proj: Var,
    spatial_score: Var,
    temporal_proj: Var,
    temporal_score: Var,
    head_weight: Var,
    head_bias: Var,
}

impl<F: Scalar> StamParams<F> {
    /// Seeded initialization: Glorot-uniform weights, unit/zero batch norms,
    /// zero head bias.
    pub fn init(config: &StamConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut layers = Vec::with_capacity(config.channels.len());
        let mut d_in = config.in_channels;
        for ((&d_out, &k), &s) in config.channels.iter().zip(&config.t_kernels).zip(&config.t_strides) {
            layers.push(StgcnLayerParams::init(&mut rng, d_in, d_out, k, s, config.dropout)?);
            d_in = d_out;
        }
        let d = config.repr_dim();
        Ok(Self {
            config: config.clone(),
            input_norm: config
                .input_norm
                .then(|| BatchNormParams::new(NUM_JOINTS * config.in_channels).with_eps(INPUT_NORM_EPS)),
            layers,
            spatial_proj: glorot(&mut rng, &[d, config.d_u], d, config.d_u),
            spatial_score: glorot(&mut rng, &[config.d_u, 1], config.d_u, 1),
            temporal_proj: glorot(&mut rng, &[d, config.d_h], d, config.d_h),
            temporal_score: glorot(&mut rng, &[config.d_h, 1], config.d_h, 1),
            head_weight: glorot(&mut rng, &[d, 1], d, 1),
            head_bias: Tensor::zeros(&[1]),
        })
    }

    pub fn cast<G: Scalar>(&self) -> StamParams<G> {
        StamParams {
            config: self.config.clone(),
            input_norm: self.input_norm.as_ref().map(BatchNormParams::cast),
            layers: self.layers.iter().map(StgcnLayerParams::cast).collect(),
            spatial_proj: self.spatial_proj.cast(),
            spatial_score: self.spatial_score.cast(),
            temporal_proj: self.temporal_proj.cast(),
            temporal_score: self.temporal_score.cast(),
            head_weight: self.head_weight.cast(),
            head_bias: self.head_bias.cast(),
        }
    }

    /// Every tensor with a stable name: trainables and batch-norm buffers.
    pub fn named_tensors(&self) -> Vec<(String, &Tensor<F>)> {
        let mut out = Vec::new();
        fn push_norm<'a, F>(out: &mut Vec<(String, &'a Tensor<F>)>, prefix: &str, bn: &'a BatchNormParams<F>) {
            out.push((format!("{prefix}.gamma"), &bn.gamma));
            out.push((format!("{prefix}.beta"), &bn.beta));
            out.push((format!("{prefix}.running_mean"), &bn.running_mean));
            out.push((format!("{prefix}.running_var"), &bn.running_var));
            out.push((format!("{prefix}.batches_tracked"), &bn.batches_tracked));
        }
        if let Some(bn) = &self.input_norm {
            push_norm(&mut out, "input_norm", bn);
        }
        for (i, l) in self.layers.iter().enumerate() {
            out.push((format!("layer{i}.gcn_weight"), &l.gcn_weight));
            out.push((format!("layer{i}.temporal_weight"), &l.temporal_weight));
            if let Some(r) = &l.residual_weight {
                out.push((format!("layer{i}.residual_weight"), r));
            }
            push_norm(&mut out, &format!("layer{i}.bn_pre"), &l.bn_pre);
            push_norm(&mut out, &format!("layer{i}.bn_post"), &l.bn_post);
        }
        out.push(("spatial_proj".into(), &self.spatial_proj));
        out.push(("spatial_score".into(), &self.spatial_score));
        out.push(("temporal_proj".into(), &self.temporal_proj));
        out.push(("temporal_score".into(), &self.temporal_score));
        out.push(("head_weight".into(), &self.head_weight));
        out.push(("head_bias".into(), &self.head_bias));
        out
    }

    pub fn named_tensors_mut(&mut self) -> Vec<(String, &mut Tensor<F>)> {
        let mut out = Vec::new();
        fn push_norm<'a, F>(out: &mut Vec<(String, &'a mut Tensor<F>)>, prefix: &str, bn: &'a mut BatchNormParams<F>) {
            out.push((format!("{prefix}.gamma"), &mut bn.gamma));
            out.push((format!("{prefix}.beta"), &mut bn.beta));
            out.push((format!("{prefix}.running_mean"), &mut bn.running_mean));
            out.push((format!("{prefix}.running_var"), &mut bn.running_var));
            out.push((format!("{prefix}.batches_tracked"), &mut bn.batches_tracked));
        }
        if let Some(bn) = &mut self.input_norm {
            push_norm(&mut out, "input_norm", bn);
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            out.push((format!("layer{i}.gcn_weight"), &mut l.gcn_weight));
            out.push((format!("layer{i}.temporal_weight"), &mut l.temporal_weight));
            if let Some(r) = &mut l.residual_weight {
                out.push((format!("layer{i}.residual_weight"), r));
            }
            push_norm(&mut out, &format!("layer{i}.bn_pre"), &mut l.bn_pre);
            push_norm(&mut out, &format!("layer{i}.bn_post"), &mut l.bn_post);
        }
        out.push(("spatial_proj".into(), &mut self.spatial_proj));
        out.push(("spatial_score".into(), &mut self.spatial_score));
        out.push(("temporal_proj".into(), &mut self.temporal_proj));
        out.push(("temporal_score".into(), &mut self.temporal_score));
        out.push(("head_weight".into(), &mut self.head_weight));
        out.push(("head_bias".into(), &mut self.head_bias));
        out
    }

    /// Trainable tensors in binding order (batch-norm running buffers excluded).
    pub fn trainable_mut(&mut self) -> Vec<&mut Tensor<F>> {
        self.named_tensors_mut()
            .into_iter()
            .filter(|(n, _)| is_trainable(n))
            .map(|(_, t)| t)
            .collect()
    }

    pub fn trainable(&self) -> Vec<&Tensor<F>> {
        self.named_tensors()
            .into_iter()
            .filter(|(n, _)| is_trainable(n))
            .map(|(_, t)| t)
            .collect()
    }

    pub fn num_trainable(&self) -> usize {
        self.trainable().iter().map(|t| t.len()).sum()
    }

    /// Batch norms in forward order, matching `ForwardCtx::bn_stats`.
    pub fn norms_mut(&mut self) -> Vec<&mut BatchNormParams<F>> {
        let mut out: Vec<&mut BatchNormParams<F>> = Vec::new();
        if let Some(bn) = &mut self.input_norm {
            out.push(bn);
        }
        for l in &mut self.layers {
            out.push(&mut l.bn_pre);
            out.push(&mut l.bn_post);
        }
        out
    }

    /// Folds the batch statistics of a training forward into the running buffers.
    pub fn update_running_stats(&mut self, ctx: &ForwardCtx) {
        for (bn, stats) in self.norms_mut().into_iter().zip(&ctx.bn_stats) {
            bn.update_running(stats);
        }
    }

    fn bind<'a>(&'a self, tape: &mut Tape<F>, leaf: &mut Binder<'_, F>) -> Bound<'a, F> {
        let input_norm = self.input_norm.as_ref().map(|bn| BoundNorm::bind(bn, tape, leaf));
        let layers = self.layers.iter().map(|l| BoundLayer::bind(l, tape, leaf)).collect();
        Bound {
            input_norm,
            layers,
            spatial_proj: leaf(tape, &self.spatial_proj),
            spatial_score: leaf(tape, &self.spatial_score),
            temporal_proj: leaf(tape, &self.temporal_proj),
            temporal_score: leaf(tape, &self.temporal_score),
            head_weight: leaf(tape, &self.head_weight),
            head_bias: leaf(tape, &self.head_bias),
        }
    }

    /// Runs the full model over a batch. Returns the output handles and the
    /// trainable leaves in [`StamParams::trainable`] order.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        batch: &ClipBatch<F>,
        graph: &PoseGraph,
        ctx: &mut ForwardCtx,
    ) -> Result<(ForwardVars, Vec<Var>)> {
        let mut vars = Vec::new();
        let out = self.forward_bound(tape, &mut leaf_binder(&mut vars), batch, graph, ctx)?;
        Ok((out, vars))
    }

    /// Like [`StamParams::forward`] with the trainable tensors supplied as
    /// existing tape variables, in [`StamParams::trainable`] order.
    pub fn forward_with_vars(
        &self,
        tape: &mut Tape<F>,
        vars: &[Var],
        batch: &ClipBatch<F>,
        graph: &PoseGraph,
        ctx: &mut ForwardCtx,
    ) -> Result<ForwardVars> {
        let expected = self.trainable().len();
        if vars.len() != expected {
            return Err(StamError::shape(format!("{} variables for {expected} parameters", vars.len())));
        }
        let mut it = vars.iter().copied();
        let mut binder = move |_: &mut Tape<F>, _: &Tensor<F>| it.next().expect("length checked");
        self.forward_bound(tape, &mut binder, batch, graph, ctx)
    }

    fn forward_bound(
        &self,
        tape: &mut Tape<F>,
        leaf: &mut Binder<'_, F>,
        batch: &ClipBatch<F>,
        graph: &PoseGraph,
        ctx: &mut ForwardCtx,
    ) -> Result<ForwardVars> {
        let cfg = &self.config;
        if batch.clip_len != cfg.clip_len || batch.channels != cfg.in_channels || batch.joints != graph.num_nodes() {
            return Err(StamError::shape(format!(
                "batch clips {}x{}x{} do not match model {}x{}x{}",
                batch.clip_len,
                batch.joints,
                batch.channels,
                cfg.clip_len,
                graph.num_nodes(),
                cfg.in_channels
            )));
        }
        let bound = self.bind(tape, leaf);
        let adj = Rc::new(SparseMatrix::from_dense(graph.num_nodes(), graph.normalized.data()));
        let (n, w, m, c) = (batch.num_clips(), batch.clip_len, batch.joints, batch.channels);
        let mut x = tape.constant(vec![n, w, m, c], batch.data.clone())?;
        if let Some(bn) = &bound.input_norm {
            let flat = tape.reshape(x, vec![n, w, m * c])?;
            let normed = bn.forward(tape, flat, ctx)?;
            x = tape.reshape(normed, vec![n, w, m, c])?;
        }
        for layer in &bound.layers {
            x = layer.forward(tape, x, &adj, ctx)?;
        }
        let joints = tape.mean_time(x)?;
        let joint_offsets = Rc::new((0..=n).map(|i| i * m).collect::<Vec<_>>());
        let (beta, clips) = if cfg.attention.spatial() {
            attention_pool(tape, joints, bound.spatial_proj, bound.spatial_score, &joint_offsets)?
        } else {
            uniform_pool(tape, joints, &joint_offsets)?
        };
        let (alpha, video) = if cfg.attention.temporal() {
            attention_pool(tape, clips, bound.temporal_proj, bound.temporal_score, &batch.video_offsets)?
        } else {
            uniform_pool(tape, clips, &batch.video_offsets)?
        };
        let logit = tape.matmul(video, bound.head_weight)?;
        let logit = tape.add_bias(logit, bound.head_bias)?;
        let prob = tape.sigmoid(logit);
        Ok(ForwardVars {
            joints,
            beta,
            clips,
            alpha,
            video,
            logit,
            prob,
        })
    }

    /// Mean cross-entropy of a batch plus the gradient of every trainable
    /// tensor (in [`StamParams::trainable`] order).
    pub fn loss_and_grads(
        &self,
        batch: &ClipBatch<F>,
        labels: &[F],
        weights: Option<&[F]>,
        graph: &PoseGraph,
        ctx: &mut ForwardCtx,
    ) -> Result<(F, Vec<Vec<F>>)> {
        let mut tape = Tape::new();
        let (out, vars) = self.forward(&mut tape, batch, graph, ctx)?;
        let loss = tape.bce(out.prob, labels, weights)?;
        let mut grads = tape.backward(loss);
        let sizes: Vec<usize> = self.trainable().iter().map(|t| t.len()).collect();
        let g = vars
            .iter()
            .zip(sizes)
            .map(|(&v, n)| grads.take(v).unwrap_or_else(|| vec![F::zero(); n]))
            .collect();
        Ok((tape.value(loss)[0], g))
    }

    /// Eval-mode inference on one sequence, keeping every intermediate needed
    /// for interpretation.
    pub fn infer(&self, seq: &PoseSequence, graph: &PoseGraph) -> Result<VideoInference> {
        let batch = ClipBatch::<F>::from_sequences(&[seq], &self.config)?;
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::eval();
        let (out, _) = self.forward(&mut tape, &batch, graph, &mut ctx)?;
        let to64 = |v: Var| tape.value(v).iter().map(|x| x.as_f64()).collect::<Vec<f64>>();
        let k = batch.num_clips();
        let m = batch.joints;
        let beta_flat = to64(out.beta);
        Ok(VideoInference {
            probability: to64(out.prob)[0],
            logit: to64(out.logit)[0],
            alpha: to64(out.alpha),
            beta: beta_flat.chunks(m).map(<[f64]>::to_vec).collect(),
            joint_repr: to64(out.joints),
            clip_repr: to64(out.clips),
            video_repr: to64(out.video),
            clip_starts: batch.clip_starts[0].clone(),
            joints: m,
            clips: k,
            repr_dim: self.config.repr_dim(),
        })
    }

    /// Probability for a single sequence (`Eval` uses running statistics and
    /// no dropout; `Train` normalizes with the sequence's own statistics).
    pub fn predict_video(&self, seq: &PoseSequence, graph: &PoseGraph, mode: Mode) -> Result<f64> {
        let batch = ClipBatch::<F>::from_sequences(&[seq], &self.config)?;
        let mut tape = Tape::new();
        let mut ctx = ForwardCtx::new(mode, 0);
        let (out, _) = self.forward(&mut tape, &batch, graph, &mut ctx)?;
        Ok(tape.value(out.prob)[0].as_f64())
    }

    /// Probabilities for many sequences, evaluated in groups of `chunk` videos.
    pub fn predict_many(&self, seqs: &[&PoseSequence], graph: &PoseGraph, chunk: usize) -> Result<Vec<f64>> {
        let mut out = Vec::with_capacity(seqs.len());
        for group in seqs.chunks(chunk.max(1)) {
            let batch = ClipBatch::<F>::from_sequences(group, &self.config)?;
            let mut tape = Tape::new();
            let mut ctx = ForwardCtx::eval();
            let (fv, _) = self.forward(&mut tape, &batch, graph, &mut ctx)?;
            out.extend(tape.value(fv.prob).iter().map(|p| p.as_f64()));
        }
        Ok(out)
    }

    /// Head weight as `f64`, for the attention decomposition.
    pub fn head(&self) -> (Vec<f64>, f64) {
        (
            self.head_weight.data().iter().map(|v| v.as_f64()).collect(),
            self.head_bias.data()[0].as_f64(),
        )
    }
}

/// Everything a single eval-mode forward exposes about one video.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoInference {
    pub probability: f64,
    pub logit: f64,
    /// Temporal weights, one per clip.
    pub alpha: Vec<f64>,
    /// Spatial weights, `[clip][joint]`.
    pub beta: Vec<Vec<f64>>,
    /// `[clip][joint][d]` flattened.
    pub joint_repr: Vec<f64>,
    /// `[clip][d]` flattened.
    pub clip_repr: Vec<f64>,
    pub video_repr: Vec<f64>,
    pub clip_starts: Vec<usize>,
    pub joints: usize,
    pub clips: usize,
    pub repr_dim: usize,
}

impl VideoInference {
    pub fn joint_vector(&self, clip: usize, joint: usize) -> &[f64] {
        let d = self.repr_dim;
        let off = (clip * self.joints + joint) * d;
        &self.joint_repr[off..off + d]
    }

    /// `sigmoid(sum_k sum_j alpha_k beta_kj w.z_kj + b)`, the prediction
    /// rebuilt from per-joint, per-clip contributions.
    pub fn decomposed_probability(&self, head_weight: &[f64], head_bias: f64) -> f64 {
        let mut total = 0.0;
        for k in 0..self.clips {
            for j in 0..self.joints {
                let wz: f64 = head_weight.iter().zip(self.joint_vector(k, j)).map(|(a, b)| a * b).sum();
                total += self.alpha[k] * self.beta[k][j] * wz;
            }
        }
        sigmoid(total + head_bias)
    }
}

/// Joint x clip attention contributions of one video.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionMap {
    pub alpha: Vec<f64>,
    /// `[clip][joint]`
    pub beta: Vec<Vec<f64>>,
    /// `[joint][clip]`, `alpha_k * beta_kj`.
    pub raw: Vec<Vec<f64>>,
    /// `raw` min-max scaled to `[0, 1]` over the whole video; all zeros when
    /// `raw` is constant.
    pub normalized: Vec<Vec<f64>>,
    pub clip_starts: Vec<usize>,
}

impl AttentionMap {
    pub fn from_inference(inf: &VideoInference) -> Self {
        let raw: Vec<Vec<f64>> = (0..inf.joints)
            .map(|j| (0..inf.clips).map(|k| inf.alpha[k] * inf.beta[k][j]).collect())
            .collect();
        let (lo, hi) = raw
            .iter()
            .flatten()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
        let span = hi - lo;
        let normalized = raw
            .iter()
            .map(|row| {
                row.iter()
                    .map(|&v| if span > 0.0 { (v - lo) / span } else { 0.0 })
                    .collect()
            })
            .collect();
        Self {
            alpha: inf.alpha.clone(),
            beta: inf.beta.clone(),
            raw,
            normalized,
            clip_starts: inf.clip_starts.clone(),
        }
    }

    pub fn num_joints(&self) -> usize {
        self.raw.len()
    }

    pub fn num_clips(&self) -> usize {
        self.alpha.len()
    }

    pub fn raw_total(&self) -> f64 {
        self.raw.iter().flatten().sum()
    }

    /// Normalized map as CSV: one row per joint, one column per clip.
    pub fn to_csv(&self) -> String {
        let mut s = String::new();
        for row in &self.normalized {
            let cells: Vec<String> = row.iter().map(|v| format!("{v}")).collect();
            s.push_str(&cells.join(","));
            s.push('\n');
        }
        s
    }
}

/// Eval-mode attention map of one sequence.
pub fn explain<F: Scalar>(seq: &PoseSequence, params: &StamParams<F>, graph: &PoseGraph) -> Result<AttentionMap> {
    Ok(AttentionMap::from_inference(&params.infer(seq, graph)?))
}

/// Mean binary cross-entropy with probabilities clamped to `[1e-7, 1 - 1e-7]`.
pub fn bce_loss(predictions: &[f64], labels: &[u8]) -> Result<f64> {
    if predictions.len() != labels.len() {
        return Err(StamError::LengthMismatch {
            left: predictions.len(),
            right: labels.len(),
        });
    }
    let mut tape = Tape::<f64>::new();
    let p = tape.constant(vec![predictions.len()], predictions.to_vec())?;
    let y: Vec<f64> = labels.iter().map(|&l| l as f64).collect();
    let loss = tape.bce(p, &y, None)?;
    Ok(tape.value(loss)[0])
}

/// Temporal attention over explicit clip vectors `[K][d]`; returns the video
/// vector and the weights.
pub fn temporal_attention<F: Scalar>(clip_vectors: &[Vec<F>], params: &StamParams<F>) -> Result<(Vec<F>, Vec<F>)> {
    let k = clip_vectors.len();
    if k == 0 {
        return Err(StamError::shape("temporal attention needs at least one clip"));
    }
    let d = params.config.repr_dim();
    if clip_vectors.iter().any(|v| v.len() != d) {
        return Err(StamError::shape(format!("clip vectors must have {d} values")));
    }
    let mut tape = Tape::new();
    let v = tape.constant(vec![k, d], clip_vectors.concat())?;
    let offsets = Rc::new(vec![0, k]);
    let (alpha, c) = if params.config.attention.temporal() {
        let proj = tape.leaf(&params.temporal_proj);
        let score = tape.leaf(&params.temporal_score);
        attention_pool(&mut tape, v, proj, score, &offsets)?
    } else {
        uniform_pool(&mut tape, v, &offsets)?
    };
    Ok((tape.value(c).to_vec(), tape.value(alpha).to_vec()))
}

/// Spatial stage for one clip `[w, M, c]`: the clip vector and joint weights.
pub fn sag_forward<F: Scalar>(
    clip: &[F],
    params: &StamParams<F>,
    graph: &PoseGraph,
    mode: Mode,
) -> Result<(Vec<F>, Vec<F>)> {
    let cfg = &params.config;
    let batch = ClipBatch::from_clips(vec![clip.to_vec()], &[1], cfg.clip_len, graph.num_nodes(), cfg.in_channels)?;
    let mut tape = Tape::new();
    let mut ctx = ForwardCtx::new(mode, 0);
    let (out, _) = params.forward(&mut tape, &batch, graph, &mut ctx)?;
    Ok((tape.value(out.clips).to_vec(), tape.value(out.beta).to_vec()))
}
