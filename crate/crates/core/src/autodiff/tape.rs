//! Reverse-mode tape over whole-tensor operations.
//!
//! Every operation records its inputs and whatever it needs for the backward
//! pass; [`Tape::backward`] walks the nodes in reverse creation order.

use std::rc::Rc;

use crate::error::{Result, StamError};

use super::{gemm, Scalar, Tensor};

pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const PROB_CLAMP: f64 = 1e-7;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Sparse view of a fixed `n x n` mixing matrix, used by graph convolution.
#[derive(Debug, Clone)]
pub struct SparseMatrix<F> {
    n: usize,
    rows: Vec<Vec<(usize, F)>>,
    cols: Vec<Vec<(usize, F)>>,
}

impl<F: Scalar> SparseMatrix<F> {
    pub fn from_dense(n: usize, dense: &[f64]) -> Self {
        assert_eq!(dense.len(), n * n);
        let mut rows = vec![Vec::new(); n];
        let mut cols = vec![Vec::new(); n];
        for i in 0..n {
            for j in 0..n {
                let v = dense[i * n + j];
                if v != 0.0 {
                    rows[i].push((j, F::of(v)));
                    cols[j].push((i, F::of(v)));
                }
            }
        }
        Self { n, rows, cols }
    }

    pub fn size(&self) -> usize {
        self.n
    }
}

/// Per-channel batch statistics produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased variance, as used for running-statistics updates.
    pub var: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    Batch,
    Running,
}

enum Op<F> {
    Leaf,
    Const,
    MatMul { x: Var, w: Var },
    GraphConv { x: Var, w: Var, adj: Rc<SparseMatrix<F>> },
    TemporalConv { x: Var, w: Var, stride: usize, pad: usize },
    TimeSubsample { x: Var, stride: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<F>, inv_std: Vec<F>, mode: NormMode },
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Dropout { x: Var, mask: Vec<F> },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale { x: Var, s: F },
    AddBias { x: Var, b: Var },
    MeanTime { x: Var },
    SumAll(Var),
    Reshape(Var),
    SegmentSoftmax { x: Var, offsets: Rc<Vec<usize>> },
    SegmentWeightedSum { w: Var, v: Var, offsets: Rc<Vec<usize>> },
    Bce { p: Var, labels: Vec<F>, weights: Vec<F>, clamped: Vec<bool> },
}

struct Node<F> {
    shape: Vec<usize>,
    value: Vec<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients of a scalar root with respect to every leaf that reached it.
pub struct Gradients<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> Gradients<F> {
    pub fn get(&self, v: Var) -> Option<&[F]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn take(&mut self, v: Var) -> Option<Vec<F>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

#[derive(Default)]
pub struct Tape<F> {
    nodes: Vec<Node<F>>,
}

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<()> {
    if cond {
        Ok(())
    } else {
        Err(StamError::ShapeMismatch(msg()))
    }
}

/// Counter-based uniform draw in `[0, 1)` keyed by `(seed, index)`.
pub fn hash_uniform(seed: u64, index: u64) -> f64 {
    fn mix(mut z: u64) -> u64 {
        z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
        z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
        z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
        z ^ (z >> 31)
    }
    let h = mix(seed ^ mix(index));
    (h >> 11) as f64 / (1u64 << 53) as f64
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<F>, op: Op<F>, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        let needs_grad = match op {
            Op::Leaf => true,
            Op::Const => false,
            _ => inputs.iter().any(|v| self.nodes[v.0].needs_grad),
        };
        self.nodes.push(Node {
            shape,
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Hash of the on/off state of every ReLU on the tape. Two evaluations
    /// with equal hashes lie in the same linear piece of the network.
    pub fn activation_pattern(&self) -> u64 {
        use std::hash::{Hash, Hasher};
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Relu(_) | Op::GraphConv { .. }) {
                i.hash(&mut h);
                for chunk in node.value.chunks(64) {
                    let bits = chunk
                        .iter()
                        .enumerate()
                        .fold(0u64, |acc, (b, v)| acc | (u64::from(*v > F::zero()) << b));
                    bits.hash(&mut h);
                }
            }
        }
        h.finish()
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, &[])
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<F>) -> Result<Var> {
        check(shape.iter().product::<usize>() == data.len(), || {
            format!("constant shape {shape:?} with {} values", data.len())
        })?;
        Ok(self.push(shape, data, Op::Const, &[]))
    }

    pub fn value(&self, v: Var) -> &[F] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<F> {
        Tensor::new(self.shape(v).to_vec(), self.value(v).to_vec()).unwrap()
    }

    fn last_dim(&self, v: Var) -> usize {
        *self.shape(v).last().unwrap_or(&1)
    }

    /// `x [.., K] @ w [K, N] -> [.., N]`.
    pub fn matmul(&mut self, x: Var, w: Var) -> Result<Var> {
        let k = self.last_dim(x);
        let ws = self.shape(w).to_vec();
        check(ws.len() == 2 && ws[0] == k, || {
            format!("matmul: x {:?} with w {:?}", self.shape(x), ws)
        })?;
        let n = ws[1];
        let rows = self.value(x).len() / k.max(1);
        let mut out = vec![F::zero(); rows * n];
        gemm(rows, k, n, self.value(x), false, self.value(w), false, &mut out, false);
        let mut shape = self.shape(x).to_vec();
        *shape.last_mut().unwrap() = n;
        Ok(self.push(shape, out, Op::MatMul { x, w }, &[x, w]))
    }

    /// Per-frame `relu(A (X W))` for `x [.., M, Cin]`, `w [Cin, Cout]`.
    pub fn graph_conv(&mut self, x: Var, w: Var, adj: &Rc<SparseMatrix<F>>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let m = adj.size();
        check(xs.len() >= 2 && xs[xs.len() - 2] == m, || {
            format!("graph_conv: x {xs:?} for {m} nodes")
        })?;
        let cin = xs[xs.len() - 1];
        check(ws.len() == 2 && ws[0] == cin, || format!("graph_conv: w {ws:?} for {cin} channels"))?;
        let cout = ws[1];
        let rows = self.value(x).len() / cin.max(1);
        let frames = rows / m;
        let mut xw = vec![F::zero(); rows * cout];
        gemm(rows, cin, cout, self.value(x), false, self.value(w), false, &mut xw, false);
        let mut out = vec![F::zero(); rows * cout];
        for f in 0..frames {
            let src = &xw[f * m * cout..(f + 1) * m * cout];
            let dst = &mut out[f * m * cout..(f + 1) * m * cout];
            for (i, row) in adj.rows.iter().enumerate() {
                let d = &mut dst[i * cout..(i + 1) * cout];
                for &(j, a) in row {
                    for (o, &s) in d.iter_mut().zip(&src[j * cout..(j + 1) * cout]) {
                        *o += a * s;
                    }
                }
                for o in d.iter_mut() {
                    if *o < F::zero() {
                        *o = F::zero();
                    }
                }
            }
        }
        let mut shape = xs;
        *shape.last_mut().unwrap() = cout;
        Ok(self.push(shape, out, Op::GraphConv { x, w, adj: adj.clone() }, &[x, w]))
    }

    /// Convolution along time: `x [N, T, M, Cin]`, `w [K, Cin, Cout]`, zero
    /// padding `pad` on both ends, output `[N, (T + 2 pad - K) / stride + 1, M, Cout]`.
    pub fn temporal_conv(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        check(xs.len() == 4 && ws.len() == 3 && ws[1] == xs[3] && stride >= 1, || {
            format!("temporal_conv: x {xs:?}, w {ws:?}, stride {stride}")
        })?;
        let (n, t, m, cin) = (xs[0], xs[1], xs[2], xs[3]);
        let (kt, cout) = (ws[0], ws[2]);
        check(t + 2 * pad >= kt, || format!("temporal_conv: {t} frames too short for kernel {kt}"))?;
        let t_out = (t + 2 * pad - kt) / stride + 1;
        let geo = ConvGeometry {
            n,
            t,
            m,
            cin,
            cout,
            kt,
            stride,
            pad,
            t_out,
        };
        let phased = geo.phase(self.value(x));
        let xp: &[F] = phased.as_deref().unwrap_or(self.value(x));
        let wv = self.value(w);
        let mut out = vec![F::zero(); n * t_out * m * cout];
        geo.for_each_block(|b| {
            gemm(
                b.rows,
                cin,
                cout,
                &xp[b.in_off..b.in_off + b.rows * cin],
                false,
                &wv[b.tap * cin * cout..(b.tap + 1) * cin * cout],
                false,
                &mut out[b.out_off..b.out_off + b.rows * cout],
                true,
            );
        });
        Ok(self.push(
            vec![n, t_out, m, cout],
            out,
            Op::TemporalConv { x, w, stride, pad },
            &[x, w],
        ))
    }

    /// Keeps frames `0, s, 2s, ..` of `x [N, T, ..]`.
    pub fn time_subsample(&mut self, x: Var, stride: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        check(xs.len() >= 2 && stride >= 1, || format!("time_subsample: x {xs:?}"))?;
        let (n, t) = (xs[0], xs[1]);
        let row: usize = xs[2..].iter().product();
        let t_out = t.div_ceil(stride);
        let v = self.value(x);
        let mut out = Vec::with_capacity(n * t_out * row);
        for b in 0..n {
            for q in 0..t_out {
                let src = (b * t + q * stride) * row;
                out.extend_from_slice(&v[src..src + row]);
            }
        }
        let mut shape = xs;
        shape[1] = t_out;
        Ok(self.push(shape, out, Op::TimeSubsample { x, stride }, &[x]))
    }

    /// Per-channel normalization over all leading positions of `x [.., C]`.
    ///
    /// With [`NormMode::Batch`] statistics come from `x` and are returned; with
    /// [`NormMode::Running`] the supplied `running` mean/variance are used.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mode: NormMode,
        running: Option<(&[F], &[F])>,
        eps: f64,
    ) -> Result<(Var, Option<BatchStats>)> {
        let c = self.last_dim(x);
        check(self.value(gamma).len() == c && self.value(beta).len() == c, || {
            format!("batch_norm: {c} channels, gamma {:?}", self.shape(gamma))
        })?;
        let xv = self.value(x);
        let rows = xv.len() / c.max(1);
        check(rows > 0, || "batch_norm: empty input".into())?;
        let (mean, var, stats) = match mode {
            NormMode::Batch => {
                let mut sum = vec![0.0f64; c];
                for r in xv.chunks_exact(c) {
                    for (s, v) in sum.iter_mut().zip(r) {
                        *s += v.as_f64();
                    }
                }
                let mean: Vec<f64> = sum.iter().map(|s| s / rows as f64).collect();
                let mut sq = vec![0.0f64; c];
                for r in xv.chunks_exact(c) {
                    for ((s, v), mu) in sq.iter_mut().zip(r).zip(&mean) {
                        let d = v.as_f64() - mu;
                        *s += d * d;
                    }
                }
                let var: Vec<f64> = sq.iter().map(|s| s / rows as f64).collect();
                let unbiased = if rows > 1 {
                    sq.iter().map(|s| s / (rows - 1) as f64).collect()
                } else {
                    var.clone()
                };
                let stats = BatchStats {
                    mean: mean.clone(),
                    var: unbiased,
                };
                (mean, var, Some(stats))
            }
            NormMode::Running => {
                let (rm, rv) = running.ok_or_else(|| StamError::shape("batch_norm: running stats required"))?;
                check(rm.len() == c && rv.len() == c, || "batch_norm: running stats length".into())?;
                (
                    rm.iter().map(|v| v.as_f64()).collect(),
                    rv.iter().map(|v| v.as_f64()).collect(),
                    None,
                )
            }
        };
        let inv_std: Vec<F> = var.iter().map(|v| F::of(1.0 / (v + eps).sqrt())).collect();
        let mean_f: Vec<F> = mean.iter().map(|&v| F::of(v)).collect();
        let g = self.value(gamma);
        let b = self.value(beta);
        let mut xhat = vec![F::zero(); xv.len()];
        let mut out = vec![F::zero(); xv.len()];
        for ((xr, hr), or) in xv
            .chunks_exact(c)
            .zip(xhat.chunks_exact_mut(c))
            .zip(out.chunks_exact_mut(c))
        {
            for ch in 0..c {
                let h = (xr[ch] - mean_f[ch]) * inv_std[ch];
                hr[ch] = h;
                or[ch] = g[ch] * h + b[ch];
            }
        }
        let shape = self.shape(x).to_vec();
        let v = self.push(
            shape,
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            },
            &[x, gamma, beta],
        );
        Ok((v, stats))
    }

    fn unary(&mut self, x: Var, f: impl Fn(F) -> F, op: Op<F>) -> Var {
        let out = self.value(x).iter().map(|&v| f(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, op, &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| if v > F::zero() { v } else { F::zero() }, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.tanh(), Op::Tanh(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        self.unary(x, |v| v * s, Op::Scale { x, s })
    }

    /// Inverted dropout with a mask drawn from `hash_uniform(seed, i)`.
    pub fn dropout(&mut self, x: Var, rate: f64, seed: u64) -> Result<Var> {
        check((0.0..1.0).contains(&rate), || format!("dropout rate {rate}"))?;
        if rate == 0.0 {
            return Ok(x);
        }
        let keep = F::of(1.0 / (1.0 - rate));
        let mask: Vec<F> = (0..self.value(x).len())
            .map(|i| {
                if hash_uniform(seed, i as u64) >= rate {
                    keep
                } else {
                    F::zero()
                }
            })
            .collect();
        let out = self.value(x).iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Dropout { x, mask }, &[x]))
    }

    fn binary(&mut self, a: Var, b: Var, f: impl Fn(F, F) -> F, op: Op<F>, name: &str) -> Result<Var> {
        check(self.shape(a) == self.shape(b), || {
            format!("{name}: {:?} vs {:?}", self.shape(a), self.shape(b))
        })?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x + y, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x - y, Op::Sub(a, b), "sub")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, |x, y| x * y, Op::Mul(a, b), "mul")
    }

    /// `x [.., C] + b [C]`.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let c = self.last_dim(x);
        check(self.value(b).len() == c, || {
            format!("add_bias: x {:?}, b {:?}", self.shape(x), self.shape(b))
        })?;
        let bv = self.value(b);
        let out = self
            .value(x)
            .chunks_exact(c)
            .flat_map(|r| r.iter().zip(bv).map(|(&v, &bb)| v + bb))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::AddBias { x, b }, &[x, b]))
    }

    /// `x [N, T, ..] -> [N, ..]`, averaging over frames.
    pub fn mean_time(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        check(xs.len() >= 2 && xs[1] > 0, || format!("mean_time: x {xs:?}"))?;
        let (n, t) = (xs[0], xs[1]);
        let row: usize = xs[2..].iter().product();
        let inv = F::of(1.0 / t as f64);
        let v = self.value(x);
        let mut out = vec![F::zero(); n * row];
        for b in 0..n {
            let o = &mut out[b * row..(b + 1) * row];
            for q in 0..t {
                for (d, &s) in o.iter_mut().zip(&v[(b * t + q) * row..(b * t + q + 1) * row]) {
                    *d += s;
                }
            }
            o.iter_mut().for_each(|d| *d *= inv);
        }
        let mut shape = vec![n];
        shape.extend_from_slice(&xs[2..]);
        Ok(self.push(shape, out, Op::MeanTime { x }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        check(shape.iter().product::<usize>() == self.value(x).len(), || {
            format!("reshape: {:?} to {shape:?}", self.shape(x))
        })?;
        let out = self.value(x).to_vec();
        Ok(self.push(shape, out, Op::Reshape(x), &[x]))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.value(x).iter().copied().sum();
        self.push(vec![1], vec![s], Op::SumAll(x), &[x])
    }

    /// Softmax within consecutive segments `offsets[i]..offsets[i + 1]` of the
    /// flattened input.
    pub fn segment_softmax(&mut self, x: Var, offsets: &Rc<Vec<usize>>) -> Result<Var> {
        let xv = self.value(x);
        check(valid_offsets(offsets, xv.len()), || {
            format!("segment_softmax: offsets {offsets:?} for {} values", xv.len())
        })?;
        let mut out = vec![F::zero(); xv.len()];
        for seg in offsets.windows(2) {
            let (lo, hi) = (seg[0], seg[1]);
            let max = xv[lo..hi].iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let mut total = F::zero();
            for i in lo..hi {
                let e = (xv[i] - max).exp();
                out[i] = e;
                total += e;
            }
            for o in &mut out[lo..hi] {
                *o /= total;
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(
            shape,
            out,
            Op::SegmentSoftmax {
                x,
                offsets: offsets.clone(),
            },
            &[x],
        ))
    }

    /// `out[s] = sum_{r in segment s} w[r] * v[r, :]` for `v [R, D]`.
    pub fn segment_weighted_sum(&mut self, w: Var, v: Var, offsets: &Rc<Vec<usize>>) -> Result<Var> {
        let r = self.value(w).len();
        let vs = self.shape(v).to_vec();
        let total = self.value(v).len();
        check(r > 0 && total % r == 0 && valid_offsets(offsets, r), || {
            format!("segment_weighted_sum: w has {r} values, v {vs:?}")
        })?;
        let d = total / r;
        let segs = offsets.len() - 1;
        let (wv, vv) = (self.value(w), self.value(v));
        let mut out = vec![F::zero(); segs * d];
        for (s, seg) in offsets.windows(2).enumerate() {
            let o = &mut out[s * d..(s + 1) * d];
            for i in seg[0]..seg[1] {
                let wi = wv[i];
                for (dst, &src) in o.iter_mut().zip(&vv[i * d..(i + 1) * d]) {
                    *dst += wi * src;
                }
            }
        }
        Ok(self.push(
            vec![segs, d],
            out,
            Op::SegmentWeightedSum {
                w,
                v,
                offsets: offsets.clone(),
            },
            &[w, v],
        ))
    }

    /// Mean binary cross-entropy of probabilities `p` (clamped to
    /// `[1e-7, 1 - 1e-7]`) against 0/1 `labels`, optionally weighted per example.
    pub fn bce(&mut self, p: Var, labels: &[F], weights: Option<&[F]>) -> Result<Var> {
        let pv = self.value(p);
        if pv.len() != labels.len() {
            return Err(StamError::LengthMismatch {
                left: pv.len(),
                right: labels.len(),
            });
        }
        check(!pv.is_empty(), || "bce: no predictions".into())?;
        let weights: Vec<F> = match weights {
            Some(w) => {
                if w.len() != labels.len() {
                    return Err(StamError::LengthMismatch {
                        left: w.len(),
                        right: labels.len(),
                    });
                }
                w.to_vec()
            }
            None => vec![F::one(); labels.len()],
        };
        let lo = F::of(PROB_CLAMP);
        let hi = F::one() - lo;
        let mut total = F::zero();
        let mut clamped = Vec::with_capacity(pv.len());
        for ((&pi, &yi), &wi) in pv.iter().zip(labels).zip(&weights) {
            let pc = pi.max(lo).min(hi);
            clamped.push(pc != pi);
            total += -wi * (yi * pc.ln() + (F::one() - yi) * (F::one() - pc).ln());
        }
        let loss = total / F::of(pv.len() as f64);
        Ok(self.push(
            vec![1],
            vec![loss],
            Op::Bce {
                p,
                labels: labels.to_vec(),
                weights,
                clamped,
            },
            &[p],
        ))
    }

    /// Reverse pass from `root`, seeded with ones.
    pub fn backward(&self, root: Var) -> Gradients<F> {
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(vec![F::one(); self.nodes[root.0].value.len()]);
        let mut result: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            if matches!(node.op, Op::Leaf) {
                result[i] = Some(g);
                continue;
            }
            self.backward_node(node, &g, &mut grads);
        }
        Gradients { grads: result }
    }

    fn accumulate(&self, grads: &mut [Option<Vec<F>>], v: Var, contribution: Vec<F>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, c) in existing.iter_mut().zip(contribution) {
                    *e += c;
                }
            }
            slot @ None => *slot = Some(contribution),
        }
    }

    fn backward_node(&self, node: &Node<F>, g: &[F], grads: &mut [Option<Vec<F>>]) {
        match &node.op {
            Op::Leaf | Op::Const => {}
            Op::MatMul { x, w } => {
                let k = self.last_dim(*x);
                let n = *node.shape.last().unwrap();
                let rows = self.value(*x).len() / k.max(1);
                if self.needs(*x) {
                    let mut dx = vec![F::zero(); rows * k];
                    gemm(rows, n, k, g, false, self.value(*w), true, &mut dx, false);
                    self.accumulate(grads, *x, dx);
                }
                if self.needs(*w) {
                    let mut dw = vec![F::zero(); k * n];
                    gemm(k, rows, n, self.value(*x), true, g, false, &mut dw, false);
                    self.accumulate(grads, *w, dw);
                }
            }
            Op::GraphConv { x, w, adj } => {
                let cin = self.last_dim(*x);
                let cout = *node.shape.last().unwrap();
                let m = adj.size();
                let rows = self.value(*x).len() / cin.max(1);
                let frames = rows / m;
                let mut dxw = vec![F::zero(); rows * cout];
                for f in 0..frames {
                    let base = f * m * cout;
                    for (j, col) in adj.cols.iter().enumerate() {
                        let d = &mut dxw[base + j * cout..base + (j + 1) * cout];
                        for &(i, a) in col {
                            let gi = &g[base + i * cout..base + (i + 1) * cout];
                            let yi = &node.value[base + i * cout..base + (i + 1) * cout];
                            for ((dst, &gg), &y) in d.iter_mut().zip(gi).zip(yi) {
                                if y > F::zero() {
                                    *dst += a * gg;
                                }
                            }
                        }
                    }
                }
                if self.needs(*w) {
                    let mut dw = vec![F::zero(); cin * cout];
                    gemm(cin, rows, cout, self.value(*x), true, &dxw, false, &mut dw, false);
                    self.accumulate(grads, *w, dw);
                }
                if self.needs(*x) {
                    let mut dx = vec![F::zero(); rows * cin];
                    gemm(rows, cout, cin, &dxw, false, self.value(*w), true, &mut dx, false);
                    self.accumulate(grads, *x, dx);
                }
            }
            Op::TemporalConv { x, w, stride, pad } => {
                let xs = self.shape(*x);
                let ws = self.shape(*w);
                let geo = ConvGeometry {
                    n: xs[0],
                    t: xs[1],
                    m: xs[2],
                    cin: xs[3],
                    cout: ws[2],
                    kt: ws[0],
                    stride: *stride,
                    pad: *pad,
                    t_out: node.shape[1],
                };
                let (cin, cout) = (geo.cin, geo.cout);
                if self.needs(*w) {
                    let phased = geo.phase(self.value(*x));
                    let xp: &[F] = phased.as_deref().unwrap_or(self.value(*x));
                    let mut dw = vec![F::zero(); geo.kt * cin * cout];
                    geo.for_each_block(|b| {
                        gemm(
                            cin,
                            b.rows,
                            cout,
                            &xp[b.in_off..b.in_off + b.rows * cin],
                            true,
                            &g[b.out_off..b.out_off + b.rows * cout],
                            false,
                            &mut dw[b.tap * cin * cout..(b.tap + 1) * cin * cout],
                            true,
                        );
                    });
                    self.accumulate(grads, *w, dw);
                }
                if self.needs(*x) {
                    let wv = self.value(*w);
                    let mut dxp = vec![F::zero(); geo.phased_len()];
                    geo.for_each_block(|b| {
                        gemm(
                            b.rows,
                            cout,
                            cin,
                            &g[b.out_off..b.out_off + b.rows * cout],
                            false,
                            &wv[b.tap * cin * cout..(b.tap + 1) * cin * cout],
                            true,
                            &mut dxp[b.in_off..b.in_off + b.rows * cin],
                            true,
                        );
                    });
                    self.accumulate(grads, *x, geo.unphase(dxp));
                }
            }
            Op::TimeSubsample { x, stride } => {
                let xs = self.shape(*x);
                let (n, t) = (xs[0], xs[1]);
                let row: usize = xs[2..].iter().product();
                let t_out = node.shape[1];
                let mut dx = vec![F::zero(); n * t * row];
                for b in 0..n {
                    for q in 0..t_out {
                        let dst = (b * t + q * stride) * row;
                        let src = (b * t_out + q) * row;
                        dx[dst..dst + row].copy_from_slice(&g[src..src + row]);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let c = inv_std.len();
                let rows = xhat.len() / c;
                let gv = self.value(*gamma);
                let mut dgamma = vec![0.0f64; c];
                let mut dbeta = vec![0.0f64; c];
                for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                    for ch in 0..c {
                        dgamma[ch] += (gr[ch] * hr[ch]).as_f64();
                        dbeta[ch] += gr[ch].as_f64();
                    }
                }
                if self.needs(*x) {
                    let mut dx = vec![F::zero(); xhat.len()];
                    match mode {
                        NormMode::Batch => {
                            let inv_n = 1.0 / rows as f64;
                            let a: Vec<F> = (0..c).map(|ch| F::of(dbeta[ch] * inv_n)).collect();
                            let b: Vec<F> = (0..c).map(|ch| F::of(dgamma[ch] * inv_n)).collect();
                            for ((dr, gr), hr) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)).zip(xhat.chunks_exact(c)) {
                                for ch in 0..c {
                                    dr[ch] = gv[ch] * inv_std[ch] * (gr[ch] - a[ch] - hr[ch] * b[ch]);
                                }
                            }
                        }
                        NormMode::Running => {
                            for (dr, gr) in dx.chunks_exact_mut(c).zip(g.chunks_exact(c)) {
                                for ch in 0..c {
                                    dr[ch] = gv[ch] * inv_std[ch] * gr[ch];
                                }
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma.into_iter().map(F::of).collect());
                self.accumulate(grads, *beta, dbeta.into_iter().map(F::of).collect());
            }
            Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(&node.value)
                    .map(|(&gg, &y)| if y > F::zero() { gg } else { F::zero() })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Tanh(x) => {
                let dx = g.iter().zip(&node.value).map(|(&gg, &y)| gg * (F::one() - y * y)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid(x) => {
                let dx = g.iter().zip(&node.value).map(|(&gg, &y)| gg * y * (F::one() - y)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Dropout { x, mask } => {
                let dx = g.iter().zip(mask).map(|(&gg, &m)| gg * m).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.to_vec());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.to_vec());
                self.accumulate(grads, *b, g.iter().map(|&v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                self.accumulate(grads, *a, g.iter().zip(bv).map(|(&gg, &y)| gg * y).collect());
                self.accumulate(grads, *b, g.iter().zip(av).map(|(&gg, &y)| gg * y).collect());
            }
            Op::Scale { x, s } => {
                self.accumulate(grads, *x, g.iter().map(|&v| v * *s).collect());
            }
            Op::AddBias { x, b } => {
                let c = self.value(*b).len();
                let mut db = vec![F::zero(); c];
                for r in g.chunks_exact(c) {
                    for (d, &v) in db.iter_mut().zip(r) {
                        *d += v;
                    }
                }
                self.accumulate(grads, *x, g.to_vec());
                self.accumulate(grads, *b, db);
            }
            Op::MeanTime { x } => {
                let xs = self.shape(*x);
                let (n, t) = (xs[0], xs[1]);
                let row: usize = xs[2..].iter().product();
                let inv = F::of(1.0 / t as f64);
                let mut dx = vec![F::zero(); n * t * row];
                for b in 0..n {
                    let gb = &g[b * row..(b + 1) * row];
                    for q in 0..t {
                        for (d, &s) in dx[(b * t + q) * row..(b * t + q + 1) * row].iter_mut().zip(gb) {
                            *d = s * inv;
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.to_vec()),
            Op::SumAll(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![g[0]; n]);
            }
            Op::SegmentSoftmax { x, offsets } => {
                let y = &node.value;
                let mut dx = vec![F::zero(); y.len()];
                for seg in offsets.windows(2) {
                    let (lo, hi) = (seg[0], seg[1]);
                    let dot: F = (lo..hi).map(|i| g[i] * y[i]).sum();
                    for i in lo..hi {
                        dx[i] = y[i] * (g[i] - dot);
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SegmentWeightedSum { w, v, offsets } => {
                let (wv, vv) = (self.value(*w), self.value(*v));
                let d = vv.len() / wv.len().max(1);
                let mut dw = vec![F::zero(); wv.len()];
                let mut dv = vec![F::zero(); vv.len()];
                for (s, seg) in offsets.windows(2).enumerate() {
                    let gs = &g[s * d..(s + 1) * d];
                    for i in seg[0]..seg[1] {
                        let vi = &vv[i * d..(i + 1) * d];
                        dw[i] = gs.iter().zip(vi).map(|(&a, &b)| a * b).sum();
                        for (dst, &gg) in dv[i * d..(i + 1) * d].iter_mut().zip(gs) {
                            *dst = wv[i] * gg;
                        }
                    }
                }
                self.accumulate(grads, *w, dw);
                self.accumulate(grads, *v, dv);
            }
            Op::Bce {
                p,
                labels,
                weights,
                clamped,
            } => {
                let pv = self.value(*p);
                let inv_n = F::of(1.0 / pv.len() as f64);
                let dp = pv
                    .iter()
                    .zip(labels)
                    .zip(weights)
                    .zip(clamped)
                    .map(|(((&pi, &yi), &wi), &cl)| {
                        if cl {
                            F::zero()
                        } else {
                            g[0] * wi * inv_n * (-yi / pi + (F::one() - yi) / (F::one() - pi))
                        }
                    })
                    .collect();
                self.accumulate(grads, *p, dp);
            }
        }
    }
}

fn valid_offsets(offsets: &[usize], len: usize) -> bool {
    offsets.len() >= 2
        && offsets[0] == 0
        && *offsets.last().unwrap() == len
        && offsets.windows(2).all(|w| w[0] < w[1])
}

#[inline]
pub fn sigmoid<F: Scalar>(v: F) -> F {
    if v >= F::zero() {
        F::one() / (F::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (F::one() + e)
    }
}

/// Index arithmetic of the strided temporal convolution.
///
/// For stride `s` the input is regrouped into `s` phases (frames with equal
/// `t mod s`), so each kernel tap reads a contiguous block of rows.
struct ConvGeometry {
    n: usize,
    t: usize,
    m: usize,
    cin: usize,
    cout: usize,
    kt: usize,
    stride: usize,
    pad: usize,
    t_out: usize,
}

struct ConvBlock {
    tap: usize,
    rows: usize,
    in_off: usize,
    out_off: usize,
}

impl ConvGeometry {
    fn phase_len(&self) -> usize {
        self.t.div_ceil(self.stride)
    }

    fn phased_len(&self) -> usize {
        self.n * self.stride * self.phase_len() * self.m * self.cin
    }

    fn phase<F: Scalar>(&self, x: &[F]) -> Option<Vec<F>> {
        if self.stride == 1 {
            return None;
        }
        let row = self.m * self.cin;
        let q = self.phase_len();
        let mut out = vec![F::zero(); self.phased_len()];
        for b in 0..self.n {
            for t in 0..self.t {
                let (r, qi) = (t % self.stride, t / self.stride);
                let dst = ((b * self.stride + r) * q + qi) * row;
                let src = (b * self.t + t) * row;
                out[dst..dst + row].copy_from_slice(&x[src..src + row]);
            }
        }
        Some(out)
    }

    fn unphase<F: Scalar>(&self, xp: Vec<F>) -> Vec<F> {
        if self.stride == 1 {
            return xp;
        }
        let row = self.m * self.cin;
        let q = self.phase_len();
        let mut out = vec![F::zero(); self.n * self.t * row];
        for b in 0..self.n {
            for t in 0..self.t {
                let (r, qi) = (t % self.stride, t / self.stride);
                let src = ((b * self.stride + r) * q + qi) * row;
                let dst = (b * self.t + t) * row;
                out[dst..dst + row].copy_from_slice(&xp[src..src + row]);
            }
        }
        out
    }

    fn for_each_block(&self, mut f: impl FnMut(ConvBlock)) {
        let s = self.stride as isize;
        let q = self.phase_len();
        let row_in = self.m * self.cin;
        let row_out = self.m * self.cout;
        for b in 0..self.n {
            for tap in 0..self.kt {
                let delta = tap as isize - self.pad as isize;
                let r = delta.rem_euclid(s);
                let q0 = (delta - r) / s;
                let phase_frames = if (r as usize) < self.t {
                    (self.t - r as usize).div_ceil(self.stride) as isize
                } else {
                    0
                };
                let lo = (-q0).max(0);
                let hi = (self.t_out as isize).min(phase_frames - q0);
                if hi <= lo {
                    continue;
                }
                let phase_base = if self.stride == 1 {
                    b * self.t
                } else {
                    (b * self.stride + r as usize) * q
                };
                f(ConvBlock {
                    tap,
                    rows: (hi - lo) as usize * self.m,
                    in_off: (phase_base + (lo + q0) as usize) * row_in,
                    out_off: (b * self.t_out + lo as usize) * row_out,
                });
            }
        }
    }
}
