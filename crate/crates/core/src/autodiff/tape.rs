use std::collections::HashMap;

use super::kernels::{
    cn_to_tcf, col2im_add, conv_out_len, gemm, im2col, tcf_to_cn, tconv_output_padding, ConvGeom,
    Lowering, Shift,
};
use super::{Gradients, ParamId, ParamStore, Real, Tensor};
use crate::error::{Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

/// Per-channel statistics of one instance-normalization call.
#[derive(Debug, Clone, PartialEq)]
pub struct NormStats<T> {
    pub mean: Vec<T>,
    pub inv_std: Vec<T>,
}

const NORM_EPS: f64 = 1e-8;

enum Op<T> {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        lw: Lowering,
        cout: usize,
        cols: Option<Vec<T>>,
    },
    TConv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        /// Scatter layout over the output array.
        lw: Lowering,
        cin: usize,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
        rows: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Sigmoid(Var),
    Prelu {
        x: Var,
        alpha: Var,
        channels: usize,
        bins: usize,
    },
    InstanceNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
        frozen: bool,
        channels: usize,
        bins: usize,
    },
    Concat {
        parts: Vec<(Var, usize)>,
        bins: usize,
    },
    Reshape(Var),
    Tile {
        x: Var,
        reps: usize,
    },
    Magnitude(Var, Var),
    SqErrSum {
        pred: Var,
        target: Vec<T>,
    },
    Sum(Var),
    Scale(Var, T),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Records forward operations and replays them in reverse for gradients.
///
/// A tape supports exactly one [`Tape::backward`] call; node values are
/// released afterwards and any further use is an error.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    param_leaves: Vec<(Var, ParamId)>,
    param_cache: HashMap<ParamId, Var>,
    track_params: bool,
    frozen_norms: Option<Vec<NormStats<T>>>,
    norm_cursor: usize,
    recorded_norms: Vec<NormStats<T>>,
    input_grads: HashMap<Var, Vec<T>>,
    consumed: bool,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Real> Tape<T> {
    /// Tape that tracks gradients of parameters.
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            param_leaves: Vec::new(),
            param_cache: HashMap::new(),
            track_params: true,
            frozen_norms: None,
            norm_cursor: 0,
            recorded_norms: Vec::new(),
            input_grads: HashMap::new(),
            consumed: false,
        }
    }

    /// Tape for forward-only evaluation: parameters enter as constants and no
    /// backward state is kept.
    pub fn inference() -> Self {
        Self {
            track_params: false,
            ..Self::new()
        }
    }

    /// Replay instance normalization with previously recorded statistics
    /// (in call order) instead of per-utterance ones.
    pub fn with_frozen_norms(mut self, stats: Vec<NormStats<T>>) -> Self {
        self.frozen_norms = Some(stats);
        self
    }

    /// Statistics used by every instance-norm call so far, in call order.
    pub fn norm_stats(&self) -> &[NormStats<T>] {
        &self.recorded_norms
    }

    pub fn take_norm_stats(&mut self) -> Vec<NormStats<T>> {
        std::mem::take(&mut self.recorded_norms)
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn dims(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.dims
    }

    pub fn scalar_value(&self, v: Var) -> T {
        self.nodes[v.0].value.data[0]
    }

    /// Gradient of a variable created with [`Tape::input`], available after
    /// [`Tape::backward`].
    pub fn input_grad(&self, v: Var) -> Option<&[T]> {
        self.input_grads.get(&v).map(|g| g.as_slice())
    }

    fn check_live(&self) -> Result<()> {
        if self.consumed {
            Err(Error::TapeConsumed)
        } else {
            Ok(())
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, needs_grad: bool) -> Var {
        debug_assert!(value.all_finite(), "non-finite activation");
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// Leaf whose gradient is retained for [`Tape::input_grad`].
    pub fn input(&mut self, t: Tensor<T>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Load a parameter; repeated loads of the same id share one leaf.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        if let Some(v) = self.param_cache.get(&id) {
            return *v;
        }
        let v = self.push(store.get(id).clone(), Op::Leaf, self.track_params);
        if self.track_params {
            self.param_leaves.push((v, id));
        }
        self.param_cache.insert(id, v);
        v
    }

    fn dims3(&self, v: Var, what: &str) -> Result<[usize; 3]> {
        match self.dims(v) {
            [a, b, c] => Ok([*a, *b, *c]),
            d => Err(Error::shape(format!("{what}: expected 3-D tensor, got {d:?}"))),
        }
    }

    /// Causal 2-D convolution. `x: [T, Cin, F]`, `w: [Cout, Cin, kt, kf]`,
    /// `b: [Cout]`; output `[T, Cout, floor((F - kf) / stride) + 1]`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeom) -> Result<Var> {
        self.check_live()?;
        let [frames, cin, bins] = self.dims3(x, "conv2d input")?;
        let wd = self.dims(w).to_vec();
        if wd.len() != 4 || wd[1] != cin || wd[2] != geom.kt || wd[3] != geom.kf {
            return Err(Error::shape(format!(
                "conv2d weight {wd:?} incompatible with {cin} input channels and kernel ({}, {})",
                geom.kt, geom.kf
            )));
        }
        let cout = wd[0];
        if let Some(b) = b {
            if self.dims(b) != [cout] {
                return Err(Error::shape("conv2d bias must be [Cout]"));
            }
        }
        let anchors = conv_out_len(bins, geom.kf, geom.stride_f)?;
        let lw = Lowering {
            frames,
            channels: cin,
            bins,
            anchors,
            geom,
            shift: Shift::Past,
        };
        let cols = im2col(&self.value(x).data, &lw);
        let n = lw.cols();
        let k = lw.rows();
        let mut y = vec![T::zero(); cout * n];
        gemm(cout, k, n, (&self.value(w).data, k, 1), (&cols, n, 1), T::zero(), &mut y);
        let bias = b.map(|b| self.value(b).data.as_slice());
        let out = cn_to_tcf(&y, frames, cout, anchors, bias);
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let keep_cols = self.needs(w).then_some(cols);
        Ok(self.push(
            Tensor {
                dims: vec![frames, cout, anchors],
                data: out,
            },
            Op::Conv2d {
                x,
                w,
                b,
                lw,
                cout,
                cols: keep_cols,
            },
            needs,
        ))
    }

    /// Transposed counterpart of [`Tape::conv2d`]: transposed along frequency
    /// (stride upsampling to exactly `f_out` bins), causal along time.
    /// `x: [T, Cin, Fin]`, `w: [Cin, Cout, kt, kf]`.
    pub fn tconv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
        f_out: usize,
    ) -> Result<Var> {
        self.check_live()?;
        let [frames, cin, f_in] = self.dims3(x, "tconv2d input")?;
        let wd = self.dims(w).to_vec();
        if wd.len() != 4 || wd[0] != cin || wd[2] != geom.kt || wd[3] != geom.kf {
            return Err(Error::shape(format!(
                "tconv2d weight {wd:?} incompatible with {cin} input channels and kernel ({}, {})",
                geom.kt, geom.kf
            )));
        }
        let cout = wd[1];
        if let Some(b) = b {
            if self.dims(b) != [cout] {
                return Err(Error::shape("tconv2d bias must be [Cout]"));
            }
        }
        tconv_output_padding(f_in, f_out, geom.kf, geom.stride_f)?;
        let lw = Lowering {
            frames,
            channels: cout,
            bins: f_out,
            anchors: f_in,
            geom,
            shift: Shift::Future,
        };
        let kk = lw.rows();
        let n = lw.cols();
        let xm = tcf_to_cn(&self.value(x).data, frames, cin, f_in);
        let mut cols = vec![T::zero(); kk * n];
        // cols = w^T (kk x cin) * xm (cin x n)
        gemm(kk, cin, n, (&self.value(w).data, 1, kk), (&xm, n, 1), T::zero(), &mut cols);
        let mut out = vec![T::zero(); frames * cout * f_out];
        col2im_add(&cols, &lw, &mut out);
        if let Some(b) = b {
            let bias = &self.value(b).data;
            for (i, v) in out.iter_mut().enumerate() {
                *v += bias[(i / f_out) % cout];
            }
        }
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor {
                dims: vec![frames, cout, f_out],
                data: out,
            },
            Op::TConv2d { x, w, b, lw, cin },
            needs,
        ))
    }

    /// Affine map over the last axis: `x: [.., K]`, `w: [N, K]`, `b: [N]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        self.check_live()?;
        let xd = self.dims(x).to_vec();
        let wd = self.dims(w).to_vec();
        let k = *xd.last().ok_or_else(|| Error::shape("linear on empty dims"))?;
        if wd.len() != 2 || wd[1] != k {
            return Err(Error::shape(format!("linear weight {wd:?} vs input {xd:?}")));
        }
        let n = wd[0];
        if let Some(b) = b {
            if self.dims(b) != [n] {
                return Err(Error::shape("linear bias must be [N]"));
            }
        }
        let rows = self.value(x).len() / k.max(1);
        let mut y = vec![T::zero(); rows * n];
        if let Some(b) = b {
            let bias = &self.value(b).data;
            for row in y.chunks_mut(n) {
                row.copy_from_slice(bias);
            }
        }
        let beta = if b.is_some() { T::one() } else { T::zero() };
        gemm(rows, k, n, (&self.value(x).data, k, 1), (&self.value(w).data, 1, k), beta, &mut y);
        let mut dims = xd;
        *dims.last_mut().expect("nonempty") = n;
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        Ok(self.push(
            Tensor { dims, data: y },
            Op::Linear {
                x,
                w,
                b,
                rows,
                k,
                n,
            },
            needs,
        ))
    }

    fn same_dims(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(Error::shape(format!(
                "{what}: {:?} vs {:?}",
                self.dims(a),
                self.dims(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Tensor<T> {
        let (va, vb) = (self.value(a), self.value(b));
        Tensor {
            dims: va.dims.clone(),
            data: va.data.iter().zip(&vb.data).map(|(x, y)| f(*x, *y)).collect(),
        }
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        self.same_dims(a, b, "add")?;
        let out = self.zip_map(a, b, |x, y| x + y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Add(a, b), needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        self.same_dims(a, b, "mul")?;
        let out = self.zip_map(a, b, |x, y| x * y);
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Mul(a, b), needs))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let v = self.value(x);
        let out = Tensor {
            dims: v.dims.clone(),
            data: v.data.iter().map(|&z| sigmoid(z)).collect(),
        };
        let needs = self.needs(x);
        Ok(self.push(out, Op::Sigmoid(x), needs))
    }

    /// Parametric ReLU with one slope per channel (axis 1 of `[T, C, F]`).
    pub fn prelu(&mut self, x: Var, alpha: Var) -> Result<Var> {
        self.check_live()?;
        let [_, channels, bins] = self.dims3(x, "prelu")?;
        if self.dims(alpha) != [channels] {
            return Err(Error::shape("prelu slopes must be [C]"));
        }
        let a = &self.value(alpha).data;
        let v = self.value(x);
        let data = v
            .data
            .iter()
            .enumerate()
            .map(|(i, &z)| if z > T::zero() { z } else { a[(i / bins) % channels] * z })
            .collect();
        let out = Tensor {
            dims: v.dims.clone(),
            data,
        };
        let needs = self.needs(x) || self.needs(alpha);
        Ok(self.push(
            out,
            Op::Prelu {
                x,
                alpha,
                channels,
                bins,
            },
            needs,
        ))
    }

    /// Instance normalization of each channel over all frames and bins,
    /// followed by a per-channel affine map.
    pub fn instance_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        self.check_live()?;
        let [frames, channels, bins] = self.dims3(x, "instance_norm")?;
        if self.dims(gamma) != [channels] || self.dims(beta) != [channels] {
            return Err(Error::shape("instance_norm affine params must be [C]"));
        }
        let count = frames * bins;
        let frozen_stats = match &self.frozen_norms {
            Some(list) => {
                let s = list.get(self.norm_cursor).cloned().ok_or_else(|| {
                    Error::invalid("frozen normalization statistics exhausted")
                })?;
                if s.mean.len() != channels {
                    return Err(Error::shape("frozen normalization statistics width"));
                }
                Some(s)
            }
            None => None,
        };
        if frozen_stats.is_some() {
            self.norm_cursor += 1;
        }
        let xv = &self.value(x).data;
        let (stats, frozen) = match frozen_stats {
            Some(s) => (s, true),
            None => {
                let mut mean = vec![T::zero(); channels];
                let mut inv_std = vec![T::zero(); channels];
                let n = T::lit(count as f64);
                for c in 0..channels {
                    let mut sum = T::zero();
                    for t in 0..frames {
                        let base = (t * channels + c) * bins;
                        sum += xv[base..base + bins].iter().copied().sum::<T>();
                    }
                    let mu = sum / n;
                    let mut var = T::zero();
                    for t in 0..frames {
                        let base = (t * channels + c) * bins;
                        for &z in &xv[base..base + bins] {
                            var += (z - mu) * (z - mu);
                        }
                    }
                    mean[c] = mu;
                    inv_std[c] = T::one() / (var / n + T::lit(NORM_EPS)).sqrt();
                }
                (NormStats { mean, inv_std }, false)
            }
        };
        let g = &self.value(gamma).data;
        let bt = &self.value(beta).data;
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for (i, (&z, (h, o))) in xv.iter().zip(xhat.iter_mut().zip(out.iter_mut())).enumerate() {
            let c = (i / bins) % channels;
            *h = (z - stats.mean[c]) * stats.inv_std[c];
            *o = g[c] * *h + bt[c];
        }
        let inv_std = stats.inv_std.clone();
        self.recorded_norms.push(stats);
        let needs = self.needs(x) || self.needs(gamma) || self.needs(beta);
        let dims = vec![frames, channels, bins];
        Ok(self.push(
            Tensor { dims, data: out },
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                frozen,
                channels,
                bins,
            },
            needs,
        ))
    }

    /// Concatenate `[T, Ci, F]` tensors along the channel axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        self.check_live()?;
        let first = *parts.first().ok_or_else(|| Error::shape("concat of nothing"))?;
        let [frames, _, bins] = self.dims3(first, "concat")?;
        let mut chans = Vec::with_capacity(parts.len());
        for &p in parts {
            let [t, c, f] = self.dims3(p, "concat")?;
            if t != frames || f != bins {
                return Err(Error::shape(format!(
                    "concat part [{t}, {c}, {f}] vs frames {frames} bins {bins}"
                )));
            }
            chans.push((p, c));
        }
        let total: usize = chans.iter().map(|(_, c)| c).sum();
        let mut data = Vec::with_capacity(frames * total * bins);
        for t in 0..frames {
            for &(p, c) in &chans {
                let v = &self.value(p).data;
                data.extend_from_slice(&v[t * c * bins..(t + 1) * c * bins]);
            }
        }
        let needs = parts.iter().any(|p| self.needs(*p));
        Ok(self.push(
            Tensor {
                dims: vec![frames, total, bins],
                data,
            },
            Op::Concat { parts: chans, bins },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, dims: &[usize]) -> Result<Var> {
        self.check_live()?;
        let v = self.value(x);
        if dims.iter().product::<usize>() != v.len() {
            return Err(Error::shape(format!("reshape {:?} -> {dims:?}", v.dims)));
        }
        let out = Tensor {
            dims: dims.to_vec(),
            data: v.data.clone(),
        };
        let needs = self.needs(x);
        Ok(self.push(out, Op::Reshape(x), needs))
    }

    /// Repeat a `[1, ..]` tensor `reps` times along the leading axis.
    pub fn tile(&mut self, x: Var, reps: usize) -> Result<Var> {
        self.check_live()?;
        let v = self.value(x);
        if v.dims.first() != Some(&1) {
            return Err(Error::shape(format!("tile expects a leading 1, got {:?}", v.dims)));
        }
        let mut dims = v.dims.clone();
        dims[0] = reps;
        let data = v.data.iter().copied().cycle().take(v.len() * reps).collect();
        let needs = self.needs(x);
        Ok(self.push(Tensor { dims, data }, Op::Tile { x, reps }, needs))
    }

    /// Elementwise `sqrt(a^2 + b^2)`.
    pub fn magnitude(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_live()?;
        self.same_dims(a, b, "magnitude")?;
        let out = self.zip_map(a, b, |x, y| x.hypot(y));
        let needs = self.needs(a) || self.needs(b);
        Ok(self.push(out, Op::Magnitude(a, b), needs))
    }

    /// `sum((pred - target)^2)` against a constant target.
    pub fn sq_err_sum(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        self.check_live()?;
        let v = self.value(pred);
        if v.len() != target.len() {
            return Err(Error::shape(format!(
                "target has {} values, prediction {:?}",
                target.len(),
                v.dims
            )));
        }
        let s: T = v.data.iter().zip(target).map(|(p, q)| (*p - *q) * (*p - *q)).sum();
        let needs = self.needs(pred);
        Ok(self.push(
            Tensor::scalar(s),
            Op::SqErrSum {
                pred,
                target: target.to_vec(),
            },
            needs,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.check_live()?;
        let s = self.value(x).data.iter().copied().sum();
        let needs = self.needs(x);
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), needs))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Result<Var> {
        self.check_live()?;
        let v = self.value(x);
        let out = Tensor {
            dims: v.dims.clone(),
            data: v.data.iter().map(|z| *z * c).collect(),
        };
        let needs = self.needs(x);
        Ok(self.push(out, Op::Scale(x, c), needs))
    }

    /// Reverse sweep from a scalar `loss`. Returns parameter gradients and
    /// frees the recorded values; a second call fails with
    /// [`Error::TapeConsumed`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients<T>> {
        self.check_live()?;
        let ld = self.dims(loss);
        if ld.iter().product::<usize>() != 1 {
            return Err(Error::NonScalarLoss(ld.to_vec()));
        }
        self.consumed = true;
        let n_params = self
            .param_leaves
            .iter()
            .map(|(_, id)| id.0 + 1)
            .max()
            .unwrap_or(0);
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g);
                continue;
            }
            self.backprop_node(i, &g, &mut grads);
        }
        let mut out = Gradients::empty(n_params);
        for &(v, id) in &self.param_leaves {
            if let Some(g) = grads[v.0].take() {
                out.accumulate(id, &g);
            }
        }
        for (i, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.needs_grad {
                if let Some(g) = grads[i].take() {
                    self.input_grads.insert(Var(i), g);
                }
            }
        }
        self.nodes.clear();
        self.param_cache.clear();
        Ok(out)
    }

    fn backprop_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [T])| {
            if !nodes[v.0].needs_grad {
                return;
            }
            let slot = grads[v.0].get_or_insert_with(|| vec![T::zero(); nodes[v.0].value.len()]);
            f(slot);
        };
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Conv2d {
                x,
                w,
                b,
                lw,
                cout,
                cols,
            } => {
                let (n, k) = (lw.cols(), lw.rows());
                let dy = tcf_to_cn(g, lw.frames, *cout, lw.anchors);
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for (c, d) in db.iter_mut().enumerate() {
                            *d += dy[c * n..(c + 1) * n].iter().copied().sum::<T>();
                        }
                    });
                }
                if nodes[w.0].needs_grad {
                    let recomputed;
                    let cols = match cols {
                        Some(c) => c,
                        None => {
                            recomputed = im2col(&nodes[x.0].value.data, lw);
                            &recomputed
                        }
                    };
                    acc(*w, &mut |dw| {
                        gemm(*cout, n, k, (&dy, n, 1), (cols, 1, n), T::one(), dw);
                    });
                }
                if nodes[x.0].needs_grad {
                    let wv = &nodes[w.0].value.data;
                    let mut dcols = vec![T::zero(); k * n];
                    gemm(k, *cout, n, (wv, 1, k), (&dy, n, 1), T::zero(), &mut dcols);
                    acc(*x, &mut |dx| col2im_add(&dcols, lw, dx));
                }
            }
            Op::TConv2d { x, w, b, lw, cin } => {
                let (n, kk) = (lw.cols(), lw.rows());
                let (frames, cout, f_out, f_in) = (lw.frames, lw.channels, lw.bins, lw.anchors);
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for (idx, v) in g.iter().enumerate() {
                            db[(idx / f_out) % cout] += *v;
                        }
                    });
                }
                let dcols = im2col(g, lw);
                if nodes[w.0].needs_grad {
                    let xm = tcf_to_cn(&nodes[x.0].value.data, frames, *cin, f_in);
                    acc(*w, &mut |dw| {
                        gemm(*cin, n, kk, (&xm, n, 1), (&dcols, 1, n), T::one(), dw);
                    });
                }
                if nodes[x.0].needs_grad {
                    let wv = &nodes[w.0].value.data;
                    let mut dxm = vec![T::zero(); cin * n];
                    gemm(*cin, kk, n, (wv, kk, 1), (&dcols, n, 1), T::zero(), &mut dxm);
                    let dx_tcf = cn_to_tcf(&dxm, frames, *cin, f_in, None);
                    acc(*x, &mut |dx| add_into(dx, &dx_tcf));
                }
            }
            Op::Linear {
                x,
                w,
                b,
                rows,
                k,
                n,
            } => {
                let (rows, k, n) = (*rows, *k, *n);
                if let Some(b) = b {
                    acc(*b, &mut |db| {
                        for row in g.chunks(n) {
                            add_into(db, row);
                        }
                    });
                }
                acc(*w, &mut |dw| {
                    gemm(n, rows, k, (g, 1, n), (&nodes[x.0].value.data, k, 1), T::one(), dw);
                });
                acc(*x, &mut |dx| {
                    gemm(rows, n, k, (g, n, 1), (&nodes[w.0].value.data, k, 1), T::one(), dx);
                });
            }
            Op::Add(a, b) => {
                acc(*a, &mut |d| add_into(d, g));
                acc(*b, &mut |d| add_into(d, g));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&nodes[a.0].value.data, &nodes[b.0].value.data);
                acc(*a, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(vb) {
                        *d += *g * *y;
                    }
                });
                acc(*b, &mut |d| {
                    for ((d, g), y) in d.iter_mut().zip(g).zip(va) {
                        *d += *g * *y;
                    }
                });
            }
            Op::Sigmoid(x) => {
                let y = &nodes[i].value.data;
                acc(*x, &mut |d| {
                    for ((d, g), s) in d.iter_mut().zip(g).zip(y) {
                        *d += *g * *s * (T::one() - *s);
                    }
                });
            }
            Op::Prelu {
                x,
                alpha,
                channels,
                bins,
            } => {
                let xv = &nodes[x.0].value.data;
                let av = &nodes[alpha.0].value.data;
                let ch = |idx: usize| (idx / bins) % channels;
                acc(*x, &mut |d| {
                    for (idx, (d, (g, z))) in d.iter_mut().zip(g.iter().zip(xv)).enumerate() {
                        *d += if *z > T::zero() { *g } else { av[ch(idx)] * *g };
                    }
                });
                acc(*alpha, &mut |d| {
                    for (idx, (g, z)) in g.iter().zip(xv).enumerate() {
                        if *z <= T::zero() {
                            d[ch(idx)] += *g * *z;
                        }
                    }
                });
            }
            Op::InstanceNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                frozen,
                channels,
                bins,
            } => {
                let ch = |idx: usize| (idx / bins) % channels;
                acc(*beta, &mut |d| {
                    for (idx, g) in g.iter().enumerate() {
                        d[ch(idx)] += *g;
                    }
                });
                acc(*gamma, &mut |d| {
                    for (idx, (g, h)) in g.iter().zip(xhat).enumerate() {
                        d[ch(idx)] += *g * *h;
                    }
                });
                if nodes[x.0].needs_grad {
                    let gam = &nodes[gamma.0].value.data;
                    let dxhat: Vec<T> =
                        g.iter().enumerate().map(|(idx, g)| *g * gam[ch(idx)]).collect();
                    if *frozen {
                        acc(*x, &mut |d| {
                            for (idx, (d, dh)) in d.iter_mut().zip(&dxhat).enumerate() {
                                *d += *dh * inv_std[ch(idx)];
                            }
                        });
                    } else {
                        let mut sum_d = vec![T::zero(); *channels];
                        let mut sum_dh = vec![T::zero(); *channels];
                        for (idx, (dh, h)) in dxhat.iter().zip(xhat).enumerate() {
                            sum_d[ch(idx)] += *dh;
                            sum_dh[ch(idx)] += *dh * *h;
                        }
                        let count = T::lit((xhat.len() / channels) as f64);
                        acc(*x, &mut |d| {
                            for (idx, (d, (dh, h))) in
                                d.iter_mut().zip(dxhat.iter().zip(xhat)).enumerate()
                            {
                                let c = ch(idx);
                                *d += inv_std[c] / count
                                    * (count * *dh - sum_d[c] - *h * sum_dh[c]);
                            }
                        });
                    }
                }
            }
            Op::Concat { parts, bins } => {
                let total: usize = parts.iter().map(|(_, c)| c).sum();
                let frames = g.len() / (total * bins);
                let mut offset = 0;
                for &(p, c) in parts {
                    acc(p, &mut |d| {
                        for t in 0..frames {
                            let src = &g[(t * total + offset) * bins..(t * total + offset + c) * bins];
                            add_into(&mut d[t * c * bins..(t + 1) * c * bins], src);
                        }
                    });
                    offset += c;
                }
            }
            Op::Reshape(x) => acc(*x, &mut |d| add_into(d, g)),
            Op::Tile { x, reps } => {
                acc(*x, &mut |d| {
                    for chunk in g.chunks(g.len() / reps) {
                        add_into(d, chunk);
                    }
                });
            }
            Op::Magnitude(a, b) => {
                let m = &nodes[i].value.data;
                for (v, other) in [(*a, *a), (*b, *b)] {
                    let src = &nodes[other.0].value.data;
                    acc(v, &mut |d| {
                        for ((d, g), (s, m)) in d.iter_mut().zip(g).zip(src.iter().zip(m)) {
                            if *m > T::zero() {
                                *d += *g * *s / *m;
                            }
                        }
                    });
                }
            }
            Op::SqErrSum { pred, target } => {
                let pv = &nodes[pred.0].value.data;
                let two = T::lit(2.0) * g[0];
                acc(*pred, &mut |d| {
                    for ((d, p), q) in d.iter_mut().zip(pv).zip(target) {
                        *d += two * (*p - *q);
                    }
                });
            }
            Op::Sum(x) => acc(*x, &mut |d| d.iter_mut().for_each(|v| *v += g[0])),
            Op::Scale(x, c) => acc(*x, &mut |d| {
                for (d, g) in d.iter_mut().zip(g) {
                    *d += *g * *c;
                }
            }),
        }
    }
}

fn add_into<T: Real>(dst: &mut [T], src: &[T]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += *s;
    }
}

pub(crate) fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}
