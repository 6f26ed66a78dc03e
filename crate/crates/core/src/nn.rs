//! ST-GCN building blocks on top of the autodiff tape.

use std::rc::Rc;

use rand::Rng;

use crate::autodiff::{hash_uniform, BatchStats, NormMode, Scalar, SparseMatrix, Tape, Tensor, Var, BATCH_NORM_EPS};
use crate::error::{Result, StamError};

pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Per-forward state: mode, dropout seeding and collected batch statistics.
#[derive(Debug)]
pub struct ForwardCtx {
    pub mode: Mode,
    dropout_seed: u64,
    dropout_site: u64,
    /// Batch statistics of every training-mode batch norm, in forward order.
    pub bn_stats: Vec<BatchStats>,
}

impl ForwardCtx {
    pub fn eval() -> Self {
        Self::new(Mode::Eval, 0)
    }

    pub fn train(dropout_seed: u64) -> Self {
        Self::new(Mode::Train, dropout_seed)
    }

    pub fn new(mode: Mode, dropout_seed: u64) -> Self {
        Self {
            mode,
            dropout_seed,
            dropout_site: 0,
            bn_stats: Vec::new(),
        }
    }

    fn next_dropout_seed(&mut self) -> u64 {
        self.dropout_site += 1;
        let hi = (hash_uniform(self.dropout_seed, self.dropout_site) * (1u64 << 53) as f64) as u64;
        hi ^ self.dropout_site.rotate_left(32)
    }

    fn norm_mode(&self) -> NormMode {
        match self.mode {
            Mode::Train => NormMode::Batch,
            Mode::Eval => NormMode::Running,
        }
    }
}

/// Uniform Glorot initialization, `U(-sqrt(6 / (fan_in + fan_out)), +..)`.
pub fn glorot<F: Scalar, R: Rng>(rng: &mut R, shape: &[usize], fan_in: usize, fan_out: usize) -> Tensor<F> {
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| F::of(rng.gen_range(-bound..bound))).collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormParams<F> {
    pub gamma: Tensor<F>,
    pub beta: Tensor<F>,
    pub running_mean: Tensor<F>,
    pub running_var: Tensor<F>,
    /// Number of running-statistic updates so far, as a one-element tensor so
    /// it travels with the checkpoint.
    pub batches_tracked: Tensor<F>,
    /// Variance floor; fixed by the layer's role, not stored in checkpoints.
    pub eps: f64,
}

impl<F: Scalar> BatchNormParams<F> {
    pub fn new(channels: usize) -> Self {
        Self {
            gamma: Tensor::filled(&[channels], F::one()),
            beta: Tensor::zeros(&[channels]),
            running_mean: Tensor::zeros(&[channels]),
            running_var: Tensor::filled(&[channels], F::one()),
            batches_tracked: Tensor::zeros(&[1]),
            eps: BATCH_NORM_EPS,
        }
    }

    pub fn with_eps(mut self, eps: f64) -> Self {
        self.eps = eps;
        self
    }

    pub fn channels(&self) -> usize {
        self.gamma.len()
    }

    /// Exponential average with momentum `BN_MOMENTUM`, except that the first
    /// updates use a cumulative average so the initial unit variance does not
    /// linger for channels whose true variance is far from 1.
    pub fn update_running(&mut self, stats: &BatchStats) {
        let n = self.batches_tracked.data()[0].as_f64();
        let m = BN_MOMENTUM.max(1.0 / (n + 1.0));
        self.batches_tracked.data_mut()[0] = F::of(n + 1.0);
        for (r, &b) in self.running_mean.data_mut().iter_mut().zip(&stats.mean) {
            *r = F::of((1.0 - m) * r.as_f64() + m * b);
        }
        for (r, &b) in self.running_var.data_mut().iter_mut().zip(&stats.var) {
            *r = F::of((1.0 - m) * r.as_f64() + m * b);
        }
    }

    pub fn cast<G: Scalar>(&self) -> BatchNormParams<G> {
        BatchNormParams {
            gamma: self.gamma.cast(),
            beta: self.beta.cast(),
            running_mean: self.running_mean.cast(),
            running_var: self.running_var.cast(),
            batches_tracked: self.batches_tracked.cast(),
            eps: self.eps,
        }
    }
}

/// Supplies the tape variable standing for a parameter tensor.
pub type Binder<'b, F> = dyn FnMut(&mut Tape<F>, &Tensor<F>) -> Var + 'b;

/// Binder that registers each tensor as a fresh leaf and records it.
pub fn leaf_binder<F: Scalar>(vars: &mut Vec<Var>) -> impl FnMut(&mut Tape<F>, &Tensor<F>) -> Var + '_ {
    move |tape, t| {
        let v = tape.leaf(t);
        vars.push(v);
        v
    }
}

/// Batch norm bound to a tape.
pub struct BoundNorm<'a, F> {
    params: &'a BatchNormParams<F>,
    gamma: Var,
    beta: Var,
}

impl<'a, F: Scalar> BoundNorm<'a, F> {
    pub fn bind(params: &'a BatchNormParams<F>, tape: &mut Tape<F>, leaf: &mut Binder<'_, F>) -> Self {
        let gamma = leaf(tape, &params.gamma);
        let beta = leaf(tape, &params.beta);
        Self { params, gamma, beta }
    }

    pub fn forward(&self, tape: &mut Tape<F>, x: Var, ctx: &mut ForwardCtx) -> Result<Var> {
        let (y, stats) = tape.batch_norm(
            x,
            self.gamma,
            self.beta,
            ctx.norm_mode(),
            Some((self.params.running_mean.data(), self.params.running_var.data())),
            self.params.eps,
        )?;
        if let Some(s) = stats {
            ctx.bn_stats.push(s);
        }
        Ok(y)
    }
}

/// Parameters of one ST-GCN layer.
#[derive(Debug, Clone, PartialEq)]
pub struct StgcnLayerParams<F> {
    /// `[d_in, d_out]`
    pub gcn_weight: Tensor<F>,
    /// `[t_kernel, d_out, d_out]`
    pub temporal_weight: Tensor<F>,
    /// `[d_in, d_out]` 1x1 projection; `None` is an identity bypass.
    pub residual_weight: Option<Tensor<F>>,
    pub bn_pre: BatchNormParams<F>,
    pub bn_post: BatchNormParams<F>,
    pub t_kernel: usize,
    pub t_stride: usize,
    pub dropout: f64,
}

impl<F: Scalar> StgcnLayerParams<F> {
    pub fn init<R: Rng>(
        rng: &mut R,
        d_in: usize,
        d_out: usize,
        t_kernel: usize,
        t_stride: usize,
        dropout: f64,
    ) -> Result<Self> {
        if t_kernel % 2 == 0 || t_stride == 0 || !(0.0..1.0).contains(&dropout) {
            return Err(StamError::ConfigInvalid(format!(
                "layer kernel {t_kernel} must be odd, stride {t_stride} >= 1, dropout {dropout} in [0, 1)"
            )));
        }
        let residual_weight = if d_in == d_out && t_stride == 1 {
            None
        } else {
            Some(glorot(rng, &[d_in, d_out], d_in, d_out))
        };
        Ok(Self {
            gcn_weight: glorot(rng, &[d_in, d_out], d_in, d_out),
            temporal_weight: glorot(rng, &[t_kernel, d_out, d_out], d_out * t_kernel, d_out * t_kernel),
            residual_weight,
            bn_pre: BatchNormParams::new(d_out),
            bn_post: BatchNormParams::new(d_out),
            t_kernel,
            t_stride,
            dropout,
        })
    }

    pub fn d_in(&self) -> usize {
        self.gcn_weight.shape()[0]
    }

    pub fn d_out(&self) -> usize {
        self.gcn_weight.shape()[1]
    }

    /// Output length for `t_in` input frames under "same" padding.
    pub fn output_frames(&self, t_in: usize) -> usize {
        t_in.div_ceil(self.t_stride)
    }

    pub fn cast<G: Scalar>(&self) -> StgcnLayerParams<G> {
        StgcnLayerParams {
            gcn_weight: self.gcn_weight.cast(),
            temporal_weight: self.temporal_weight.cast(),
            residual_weight: self.residual_weight.as_ref().map(Tensor::cast),
            bn_pre: self.bn_pre.cast(),
            bn_post: self.bn_post.cast(),
            t_kernel: self.t_kernel,
            t_stride: self.t_stride,
            dropout: self.dropout,
        }
    }
}

pub struct BoundLayer<'a, F> {
    params: &'a StgcnLayerParams<F>,
    gcn: Var,
    temporal: Var,
    residual: Option<Var>,
    bn_pre: BoundNorm<'a, F>,
    bn_post: BoundNorm<'a, F>,
}

impl<'a, F: Scalar> BoundLayer<'a, F> {
    /// Registers the layer's trainable tensors in the order gcn, temporal,
    /// residual, bn_pre (gamma, beta), bn_post.
    pub fn bind(params: &'a StgcnLayerParams<F>, tape: &mut Tape<F>, leaf: &mut Binder<'_, F>) -> Self {
        let gcn = leaf(tape, &params.gcn_weight);
        let temporal = leaf(tape, &params.temporal_weight);
        let residual = params.residual_weight.as_ref().map(|w| leaf(tape, w));
        let bn_pre = BoundNorm::bind(&params.bn_pre, tape, leaf);
        let bn_post = BoundNorm::bind(&params.bn_post, tape, leaf);
        Self {
            params,
            gcn,
            temporal,
            residual,
            bn_pre,
            bn_post,
        }
    }

    /// `x [N, T, M, d_in] -> [N, ceil(T / stride), M, d_out]`.
    pub fn forward(
        &self,
        tape: &mut Tape<F>,
        x: Var,
        adj: &Rc<SparseMatrix<F>>,
        ctx: &mut ForwardCtx,
    ) -> Result<Var> {
        let p = self.params;
        let g = tape.graph_conv(x, self.gcn, adj)?;
        let g = self.bn_pre.forward(tape, g, ctx)?;
        let g = tape.relu(g);
        let pad = (p.t_kernel - 1) / 2;
        let c = tape.temporal_conv(g, self.temporal, p.t_stride, pad)?;
        let mut c = self.bn_post.forward(tape, c, ctx)?;
        if ctx.mode == Mode::Train && p.dropout > 0.0 {
            let seed = ctx.next_dropout_seed();
            c = tape.dropout(c, p.dropout, seed)?;
        }
        let res = match self.residual {
            None => x,
            Some(w) => {
                let xs = if p.t_stride > 1 {
                    tape.time_subsample(x, p.t_stride)?
                } else {
                    x
                };
                tape.matmul(xs, w)?
            }
        };
        tape.add(c, res)
    }
}

/// `relu(A Z W)` for a single frame `z [M, d_in]`.
pub fn gcn_forward<F: Scalar>(adj: &[f64], m: usize, z: &Tensor<F>, w: &Tensor<F>) -> Result<Tensor<F>> {
    let sparse = Rc::new(SparseMatrix::from_dense(m, adj));
    let mut tape = Tape::new();
    let zv = tape.constant(z.shape().to_vec(), z.data().to_vec())?;
    let wv = tape.constant(w.shape().to_vec(), w.data().to_vec())?;
    let out = tape.graph_conv(zv, wv, &sparse)?;
    Ok(tape.tensor(out))
}
