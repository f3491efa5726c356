use serde::{Deserialize, Serialize};

use super::kernels::{self, ConvGeometry};
use super::Tensor;
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Handle to a node of a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Axis set over which moment exchange computes its first and second moments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum MoexNorm {
    /// Across channels, separately at every spatial position of every sample.
    #[default]
    Positional,
    /// Across spatial positions, separately for every channel of every sample.
    Instance,
}

/// Per-channel batch moments captured by a training-mode batch norm.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    /// Unbiased variance, the value folded into running statistics.
    pub var: Vec<T>,
}

/// Vector-Jacobian product of a user-supplied op.
///
/// Receives the input values, the output value and the output gradient, and
/// returns one optional gradient per input.
pub type CustomBackward<T> = Box<dyn Fn(&[&[T]], &[T], &[T]) -> Vec<Option<Vec<T>>>>;

enum Op<T> {
    Leaf,
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry, cols: Vec<T> },
    Dense { x: Var, w: Var, b: Option<Var>, rows: usize, inner: usize, outer: usize },
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<T>, inv_std: Vec<T>, stats: Option<BatchStats<T>> },
    Relu { x: Var },
    Sigmoid { x: Var },
    MaxPool { x: Var, argmax: Vec<usize> },
    AvgPool { x: Var, size: usize },
    Gap { x: Var },
    ChannelScale { x: Var, s: Var },
    Add { a: Var, b: Var },
    Mul { a: Var, b: Var },
    Scale { a: Var, c: T },
    Sum { a: Var },
    Mean { a: Var },
    Concat { a: Var, b: Var },
    Upsample { x: Var, factor: usize },
    SoftmaxCe { logits: Var, targets: Vec<T>, probs: Vec<T> },
    BceLogits { logits: Var, targets: Vec<T> },
    Moex { x: Var, layout: MoexLayout, xhat: Vec<T>, std: Vec<T> },
    Custom { inputs: Vec<Var>, backward: CustomBackward<T> },
}

struct Node<T> {
    shape: Vec<usize>,
    value: Vec<T>,
    op: Op<T>,
    needs_grad: bool,
}

/// Append-only computation record. Nodes are stored in creation order, which
/// is a topological order.
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn dims4(shape: &[usize], what: &str) -> Result<(usize, usize, usize, usize)> {
    match *shape {
        [n, c, h, w] => Ok((n, c, h, w)),
        _ => Err(Error::config(format!("{what} expects a 4-D NCHW tensor, got {shape:?}"))),
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let node = &self.nodes[v.0];
        Tensor::new(&node.shape, node.value.clone()).expect("nodes hold consistent shapes")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// Statistics recorded by a training-mode batch norm node.
    pub fn batch_stats(&self, v: Var) -> Option<&BatchStats<T>> {
        match &self.nodes[v.0].op {
            Op::BatchNorm { stats, .. } => stats.as_ref(),
            _ => None,
        }
    }

    /// Leaf holding a copy of `t`; tracked for gradients iff `t.requires_grad()`.
    pub fn input(&mut self, t: &Tensor<T>) -> Var {
        self.leaf(t.shape(), t.data().to_vec(), t.requires_grad())
    }

    pub fn leaf(&mut self, shape: &[usize], data: Vec<T>, requires_grad: bool) -> Var {
        assert_eq!(shape.iter().product::<usize>(), data.len(), "leaf shape/data mismatch");
        self.nodes.push(Node { shape: shape.to_vec(), value: data, op: Op::Leaf, needs_grad: requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<T>, op: Op<T>, inputs: &[Var]) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), value.len());
        if cfg!(debug_assertions) {
            let finite_inputs = inputs.iter().all(|v| self.nodes[v.0].value.iter().all(|x| x.is_finite()));
            if finite_inputs {
                debug_assert!(value.iter().all(|x| x.is_finite()), "non-finite value from finite inputs");
            }
        }
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.nodes.push(Node { shape, value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        stride: (usize, usize),
        padding: (usize, usize),
    ) -> Result<Var> {
        let geom = ConvGeometry::new(self.shape(x), self.shape(w), stride, padding)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.filters] {
                return Err(Error::config(format!(
                    "conv2d bias must have shape [{}], got {:?}",
                    geom.filters,
                    self.shape(b)
                )));
            }
        }
        let (mut out, cols) = kernels::conv2d_im2col(self.value(x), self.value(w), &geom);
        if let Some(b) = b {
            let bias = self.value(b);
            let pixels = geom.out_pixels();
            for (i, plane) in out.chunks_mut(pixels).enumerate() {
                let bv = bias[i % geom.filters];
                plane.iter_mut().for_each(|v| *v += bv);
            }
        }
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(geom.output_shape().to_vec(), out, Op::Conv2d { x, w, b, geom, cols }, &inputs))
    }

    /// Affine map `x W + b`. Inputs with more than two axes are flattened
    /// after the batch axis.
    pub fn dense(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x);
        let rows = xs[0];
        let inner: usize = xs[1..].iter().product();
        let (wd, outer) = match *self.shape(w) {
            [d, k] => (d, k),
            ref s => return Err(Error::config(format!("dense weight must be 2-D, got {s:?}"))),
        };
        if wd != inner {
            return Err(Error::config(format!(
                "dense weight expects {wd} input features, input provides {inner}"
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [outer] {
                return Err(Error::config(format!("dense bias must have shape [{outer}]")));
            }
        }
        let out = kernels::dense(self.value(x), self.value(w), b.map(|b| self.value(b)), rows, inner, outer);
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(vec![rows, outer], out, Op::Dense { x, w, b, rows, inner, outer }, &inputs))
    }

    /// Batch normalization over N,H,W per channel.
    ///
    /// With `running = None` the batch statistics are used (training mode) and
    /// recorded for [`Graph::batch_stats`]; otherwise the given running mean
    /// and variance are used.
    pub fn batchnorm2d(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: Option<(&[T], &[T])>,
        eps: T,
    ) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "batchnorm2d")?;
        if eps <= T::zero() {
            return Err(Error::config("batchnorm epsilon must be positive"));
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(Error::config(format!("batchnorm affine parameters must have shape [{c}]")));
        }
        let hw = h * w;
        let m = n * hw;
        let xv = self.value(x);
        let (mean, var, stats) = match running {
            None => {
                if m < 2 {
                    return Err(Error::invalid("batchnorm in training mode needs more than one value per channel"));
                }
                let mut mean = vec![T::zero(); c];
                let mut var = vec![T::zero(); c];
                for ch in 0..c {
                    let mut s = T::zero();
                    for i in 0..n {
                        s += xv[(i * c + ch) * hw..(i * c + ch + 1) * hw].iter().copied().sum::<T>();
                    }
                    let mu = s / T::of(m as f64);
                    let mut q = T::zero();
                    for i in 0..n {
                        for &v in &xv[(i * c + ch) * hw..(i * c + ch + 1) * hw] {
                            q += (v - mu) * (v - mu);
                        }
                    }
                    mean[ch] = mu;
                    var[ch] = q / T::of(m as f64);
                }
                let unbiased = var.iter().map(|&v| v * T::of(m as f64 / (m as f64 - 1.0))).collect();
                let stats = BatchStats { mean: mean.clone(), var: unbiased };
                (mean, var, Some(stats))
            }
            Some((rm, rv)) => {
                if rm.len() != c || rv.len() != c {
                    return Err(Error::config("running statistics do not match channel count"));
                }
                (rm.to_vec(), rv.to_vec(), None)
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let gv = self.value(gamma);
        let bv = self.value(beta);
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for i in 0..n {
            for ch in 0..c {
                let base = (i * c + ch) * hw;
                for j in base..base + hw {
                    let xh = (xv[j] - mean[ch]) * inv_std[ch];
                    xhat[j] = xh;
                    out[j] = gv[ch] * xh + bv[ch];
                }
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::BatchNorm { x, gamma, beta, xhat, inv_std, stats }, &[x, gamma, beta]))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| if v > T::zero() { v } else { T::zero() }).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Relu { x }, &[x])
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.value(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Sigmoid { x }, &[x])
    }

    /// Non-overlapping max pooling with a square window.
    pub fn max_pool(&mut self, x: Var, size: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "max_pool")?;
        if size == 0 || size > h || size > w {
            return Err(Error::config(format!("pool window {size} does not fit {h}x{w}")));
        }
        let (oh, ow) = (h / size, w / size);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut best = base + oy * size * w + ox * size;
                    for dy in 0..size {
                        for dx in 0..size {
                            let j = base + (oy * size + dy) * w + ox * size + dx;
                            if xv[j] > xv[best] {
                                best = j;
                            }
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        Ok(self.push(vec![n, c, oh, ow], out, Op::MaxPool { x, argmax }, &[x]))
    }

    /// Non-overlapping average pooling with a square window.
    pub fn avg_pool(&mut self, x: Var, size: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "avg_pool")?;
        if size == 0 || size > h || size > w {
            return Err(Error::config(format!("pool window {size} does not fit {h}x{w}")));
        }
        let (oh, ow) = (h / size, w / size);
        let xv = self.value(x);
        let norm = T::of((size * size) as f64);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut s = T::zero();
                    for dy in 0..size {
                        for dx in 0..size {
                            s += xv[base + (oy * size + dy) * w + ox * size + dx];
                        }
                    }
                    out.push(s / norm);
                }
            }
        }
        Ok(self.push(vec![n, c, oh, ow], out, Op::AvgPool { x, size }, &[x]))
    }

    /// Global average pooling `[N,C,H,W] -> [N,C]`.
    pub fn gap(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "gap")?;
        let hw = h * w;
        let norm = T::of(hw as f64);
        let out = self.value(x).chunks(hw).map(|p| p.iter().copied().sum::<T>() / norm).collect();
        Ok(self.push(vec![n, c], out, Op::Gap { x }, &[x]))
    }

    /// Multiplies channel `c` of sample `n` by `s[n, c]`.
    pub fn channel_scale(&mut self, x: Var, s: Var) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "channel_scale")?;
        if self.shape(s) != [n, c] {
            return Err(Error::config(format!(
                "channel scale must have shape [{n}, {c}], got {:?}",
                self.shape(s)
            )));
        }
        let sv = self.value(s);
        let out = self
            .value(x)
            .chunks(h * w)
            .zip(sv)
            .flat_map(|(p, &f)| p.iter().map(move |&v| v * f))
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::ChannelScale { x, s }, &[x, s]))
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::config(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x + y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a, b }, &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| x * y).collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a, b }, &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let out = self.value(a).iter().map(|&x| x * c).collect();
        let shape = self.shape(a).to_vec();
        self.push(shape, out, Op::Scale { a, c }, &[a])
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).iter().copied().sum::<T>();
        self.push(vec![1], vec![s], Op::Sum { a }, &[a])
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = self.value(a);
        let s = v.iter().copied().sum::<T>() / T::of(v.len() as f64);
        self.push(vec![1], vec![s], Op::Mean { a }, &[a])
    }

    /// Concatenates two NCHW tensors along the channel axis.
    pub fn concat_channels(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, ca, h, w) = dims4(self.shape(a), "concat")?;
        let (nb, cb, hb, wb) = dims4(self.shape(b), "concat")?;
        if (n, h, w) != (nb, hb, wb) {
            return Err(Error::config(format!(
                "concat: {:?} and {:?} differ outside the channel axis",
                self.shape(a),
                self.shape(b)
            )));
        }
        let hw = h * w;
        let (av, bv) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(n * (ca + cb) * hw);
        for i in 0..n {
            out.extend_from_slice(&av[i * ca * hw..(i + 1) * ca * hw]);
            out.extend_from_slice(&bv[i * cb * hw..(i + 1) * cb * hw]);
        }
        Ok(self.push(vec![n, ca + cb, h, w], out, Op::Concat { a, b }, &[a, b]))
    }

    /// Nearest-neighbour spatial upsampling by an integer factor.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "upsample")?;
        if factor == 0 {
            return Err(Error::config("upsample factor must be >= 1"));
        }
        let (oh, ow) = (h * factor, w * factor);
        let xv = self.value(x);
        let mut out = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out.push(xv[plane * h * w + (y / factor) * w + xx / factor]);
                }
            }
        }
        Ok(self.push(vec![n, c, oh, ow], out, Op::Upsample { x, factor }, &[x]))
    }

    /// Mean over the batch of `-sum_k t_k log softmax(z)_k`.
    ///
    /// `targets` is a row-major `[N, K]` distribution per sample.
    pub fn softmax_cross_entropy(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let (n, k) = match *self.shape(logits) {
            [n, k] => (n, k),
            ref s => return Err(Error::config(format!("logits must be [N, K], got {s:?}"))),
        };
        if k < 2 {
            return Err(Error::config("cross-entropy needs at least two classes"));
        }
        if targets.len() != n * k {
            return Err(Error::invalid(format!("targets must hold {} values", n * k)));
        }
        for (i, row) in targets.chunks(k).enumerate() {
            let s: f64 = row.iter().map(|v| v.to_f64_lossy()).sum();
            if (s - 1.0).abs() > 1e-6 || row.iter().any(|&t| t < T::zero()) {
                return Err(Error::invalid(format!("target row {i} is not a distribution (sum {s})")));
            }
        }
        let zv = self.value(logits);
        let mut probs = vec![T::zero(); n * k];
        let mut loss = T::zero();
        for i in 0..n {
            let row = &zv[i * k..(i + 1) * k];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = max + row.iter().map(|&z| (z - max).exp()).sum::<T>().ln();
            for j in 0..k {
                let logp = row[j] - lse;
                probs[i * k + j] = logp.exp();
                loss -= targets[i * k + j] * logp;
            }
        }
        let loss = loss / T::of(n as f64);
        Ok(self.push(vec![1], vec![loss], Op::SoftmaxCe { logits, targets: targets.to_vec(), probs }, &[logits]))
    }

    /// Mean binary cross-entropy of `sigmoid(z)` against targets in [0, 1].
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        let zv = self.value(logits);
        if targets.len() != zv.len() {
            return Err(Error::invalid("bce targets must match logits element count"));
        }
        let mut loss = T::zero();
        for (&z, &t) in zv.iter().zip(targets) {
            loss += z.max(T::zero()) - z * t + (T::one() + (-z.abs()).exp()).ln();
        }
        let loss = loss / T::of(zv.len() as f64);
        Ok(self.push(vec![1], vec![loss], Op::BceLogits { logits, targets: targets.to_vec() }, &[logits]))
    }

    /// Moment exchange inside one batch: sample `i` is normalized by its own
    /// moments and re-scaled with the moments of sample `partner[i]`.
    pub fn moex(&mut self, x: Var, partner: &[usize], norm: MoexNorm, eps: T) -> Result<Var> {
        let (n, c, h, w) = dims4(self.shape(x), "moex")?;
        if partner.len() != n || partner.iter().any(|&p| p >= n) {
            return Err(Error::invalid("moex partner list must map every sample into the batch"));
        }
        if eps <= T::zero() {
            return Err(Error::config("moex epsilon must be positive"));
        }
        let layout = MoexLayout { norm, n, c, hw: h * w, partner: partner.to_vec() };
        let (mu, std, xhat) = layout.normalize(self.value(x), eps);
        let mut out = vec![T::zero(); xhat.len()];
        for g in 0..layout.groups() {
            let pg = layout.partner_group(g);
            for j in 0..layout.group_size() {
                let e = layout.element(g, j);
                out[e] = xhat[e] * std[pg] + mu[pg];
            }
        }
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Moex { x, layout, xhat, std }, &[x]))
    }

    /// Records an op whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[Var], shape: &[usize], value: Vec<T>, backward: CustomBackward<T>) -> Var {
        self.push(shape.to_vec(), value, Op::Custom { inputs: inputs.to_vec(), backward }, inputs)
    }

    /// Reverse pass from a scalar node. Every node that depends on a
    /// gradient-tracked leaf receives its gradient.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.nodes[loss.0].value.len() != 1 {
            return Err(Error::usage(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].shape
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.0].needs_grad {
            grads[loss.0] = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            let Some(gy) = grads[i].take() else { continue };
            self.propagate(i, &gy, &mut grads);
            grads[i] = Some(gy);
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => g.iter_mut().zip(delta).for_each(|(a, d)| *a += d),
            slot @ None => *slot = Some(delta),
        }
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, i: usize, gy: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom, cols } => {
                let patch = geom.patch_len();
                let pixels = geom.out_pixels();
                let sample_len = geom.in_channels * geom.height * geom.width;
                let wv = self.value(*w);
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); wv.len()];
                    for n in 0..geom.batch {
                        T::gemm(
                            geom.filters,
                            pixels,
                            patch,
                            T::one(),
                            &gy[n * geom.filters * pixels..(n + 1) * geom.filters * pixels],
                            (pixels as isize, 1),
                            &cols[n * patch * pixels..(n + 1) * patch * pixels],
                            (1, pixels as isize),
                            T::one(),
                            &mut dw,
                            (patch as isize, 1),
                        );
                    }
                    self.accumulate(grads, *w, dw);
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); geom.batch * sample_len];
                    let mut dcols = vec![T::zero(); patch * pixels];
                    for n in 0..geom.batch {
                        T::gemm(
                            patch,
                            geom.filters,
                            pixels,
                            T::one(),
                            wv,
                            (1, patch as isize),
                            &gy[n * geom.filters * pixels..(n + 1) * geom.filters * pixels],
                            (pixels as isize, 1),
                            T::zero(),
                            &mut dcols,
                            (pixels as isize, 1),
                        );
                        kernels::col2im(&dcols, geom, &mut dx[n * sample_len..(n + 1) * sample_len]);
                    }
                    self.accumulate(grads, *x, dx);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); geom.filters];
                        for (j, plane) in gy.chunks(pixels).enumerate() {
                            db[j % geom.filters] += plane.iter().copied().sum::<T>();
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::Dense { x, w, b, rows, inner, outer } => {
                let (n, d, k) = (*rows, *inner, *outer);
                if self.wants(*w) {
                    let mut dw = vec![T::zero(); d * k];
                    T::gemm(d, n, k, T::one(), self.value(*x), (1, d as isize), gy, (k as isize, 1), T::zero(), &mut dw, (k as isize, 1));
                    self.accumulate(grads, *w, dw);
                }
                if self.wants(*x) {
                    let mut dx = vec![T::zero(); n * d];
                    T::gemm(n, k, d, T::one(), gy, (k as isize, 1), self.value(*w), (1, k as isize), T::zero(), &mut dx, (d as isize, 1));
                    self.accumulate(grads, *x, dx);
                }
                if let Some(b) = b {
                    if self.wants(*b) {
                        let mut db = vec![T::zero(); k];
                        for row in gy.chunks(k) {
                            db.iter_mut().zip(row).for_each(|(a, &g)| *a += g);
                        }
                        self.accumulate(grads, *b, db);
                    }
                }
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, stats } => {
                let (n, c, h, w) = dims4(&node.shape, "batchnorm2d").expect("checked at forward");
                let hw = h * w;
                let m = T::of((n * hw) as f64);
                let mut dgamma = vec![T::zero(); c];
                let mut dbeta = vec![T::zero(); c];
                for s in 0..n {
                    for ch in 0..c {
                        let base = (s * c + ch) * hw;
                        for j in base..base + hw {
                            dbeta[ch] += gy[j];
                            dgamma[ch] += gy[j] * xhat[j];
                        }
                    }
                }
                if self.wants(*x) {
                    let gv = self.value(*gamma);
                    let mut dx = vec![T::zero(); gy.len()];
                    for s in 0..n {
                        for ch in 0..c {
                            let base = (s * c + ch) * hw;
                            let scale = gv[ch] * inv_std[ch];
                            for j in base..base + hw {
                                dx[j] = if stats.is_some() {
                                    scale * (gy[j] - dbeta[ch] / m - xhat[j] * dgamma[ch] / m)
                                } else {
                                    scale * gy[j]
                                };
                            }
                        }
                    }
                    self.accumulate(grads, *x, dx);
                }
                self.accumulate(grads, *gamma, dgamma);
                self.accumulate(grads, *beta, dbeta);
            }
            Op::Relu { x } => {
                let dx = self.value(*x).iter().zip(gy).map(|(&v, &g)| if v > T::zero() { g } else { T::zero() }).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Sigmoid { x } => {
                let dx = node.value.iter().zip(gy).map(|(&y, &g)| g * y * (T::one() - y)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::MaxPool { x, argmax } => {
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (&j, &g) in argmax.iter().zip(gy) {
                    dx[j] += g;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::AvgPool { x, size } => {
                let (_, _, h, w) = dims4(self.shape(*x), "avg_pool").expect("checked at forward");
                let (oh, ow) = (h / size, w / size);
                let norm = T::of((size * size) as f64);
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (plane, gp) in gy.chunks(oh * ow).enumerate() {
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let g = gp[oy * ow + ox] / norm;
                            for dy in 0..*size {
                                for dxx in 0..*size {
                                    dx[plane * h * w + (oy * size + dy) * w + ox * size + dxx] += g;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Gap { x } => {
                let (_, _, h, w) = dims4(self.shape(*x), "gap").expect("checked at forward");
                let hw = h * w;
                let norm = T::of(hw as f64);
                let dx = gy.iter().flat_map(|&g| std::iter::repeat_n(g / norm, hw)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::ChannelScale { x, s } => {
                let (_, _, h, w) = dims4(self.shape(*x), "channel_scale").expect("checked at forward");
                let hw = h * w;
                let sv = self.value(*s);
                let xv = self.value(*x);
                if self.wants(*x) {
                    let dx = gy.chunks(hw).zip(sv).flat_map(|(p, &f)| p.iter().map(move |&g| g * f)).collect();
                    self.accumulate(grads, *x, dx);
                }
                if self.wants(*s) {
                    let ds = gy
                        .chunks(hw)
                        .zip(xv.chunks(hw))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&g, &v)| g * v).sum::<T>())
                        .collect();
                    self.accumulate(grads, *s, ds);
                }
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, gy.to_vec());
                self.accumulate(grads, *b, gy.to_vec());
            }
            Op::Mul { a, b } => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.wants(*a) {
                    self.accumulate(grads, *a, gy.iter().zip(bv).map(|(&g, &v)| g * v).collect());
                }
                if self.wants(*b) {
                    self.accumulate(grads, *b, gy.iter().zip(av).map(|(&g, &v)| g * v).collect());
                }
            }
            Op::Scale { a, c } => {
                self.accumulate(grads, *a, gy.iter().map(|&g| g * *c).collect());
            }
            Op::Sum { a } => {
                self.accumulate(grads, *a, vec![gy[0]; self.value(*a).len()]);
            }
            Op::Mean { a } => {
                let len = self.value(*a).len();
                self.accumulate(grads, *a, vec![gy[0] / T::of(len as f64); len]);
            }
            Op::Concat { a, b } => {
                let ca = self.shape(*a)[1];
                let cb = self.shape(*b)[1];
                let (n, _, h, w) = dims4(&node.shape, "concat").expect("checked at forward");
                let hw = h * w;
                let mut da = Vec::with_capacity(n * ca * hw);
                let mut db = Vec::with_capacity(n * cb * hw);
                for s in 0..n {
                    let base = s * (ca + cb) * hw;
                    da.extend_from_slice(&gy[base..base + ca * hw]);
                    db.extend_from_slice(&gy[base + ca * hw..base + (ca + cb) * hw]);
                }
                self.accumulate(grads, *a, da);
                self.accumulate(grads, *b, db);
            }
            Op::Upsample { x, factor } => {
                let (_, _, h, w) = dims4(self.shape(*x), "upsample").expect("checked at forward");
                let (oh, ow) = (h * factor, w * factor);
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (plane, gp) in gy.chunks(oh * ow).enumerate() {
                    for y in 0..oh {
                        for xx in 0..ow {
                            dx[plane * h * w + (y / factor) * w + xx / factor] += gp[y * ow + xx];
                        }
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::SoftmaxCe { logits, targets, probs } => {
                let n = self.shape(*logits)[0];
                let scale = gy[0] / T::of(n as f64);
                let dz = probs.iter().zip(targets).map(|(&p, &t)| (p - t) * scale).collect();
                self.accumulate(grads, *logits, dz);
            }
            Op::BceLogits { logits, targets } => {
                let zv = self.value(*logits);
                let scale = gy[0] / T::of(zv.len() as f64);
                let dz = zv.iter().zip(targets).map(|(&z, &t)| (sigmoid(z) - t) * scale).collect();
                self.accumulate(grads, *logits, dz);
            }
            Op::Moex { x, layout, xhat, std } => {
                let groups = layout.groups();
                let size = layout.group_size();
                let m = T::of(size as f64);
                let mut dx = vec![T::zero(); gy.len()];
                let mut dmu = vec![T::zero(); groups];
                let mut dstd = vec![T::zero(); groups];
                let mut dxhat = vec![T::zero(); size];
                for g in 0..groups {
                    let pg = layout.partner_group(g);
                    let mut mean_d = T::zero();
                    let mut mean_dx = T::zero();
                    for (j, slot) in dxhat.iter_mut().enumerate() {
                        let e = layout.element(g, j);
                        *slot = gy[e] * std[pg];
                        dmu[pg] += gy[e];
                        dstd[pg] += gy[e] * xhat[e];
                        mean_d += *slot;
                        mean_dx += *slot * xhat[e];
                    }
                    mean_d /= m;
                    mean_dx /= m;
                    for (j, &d) in dxhat.iter().enumerate() {
                        let e = layout.element(g, j);
                        dx[e] += (d - mean_d - xhat[e] * mean_dx) / std[g];
                    }
                }
                for g in 0..groups {
                    for j in 0..size {
                        let e = layout.element(g, j);
                        dx[e] += (dmu[g] + dstd[g] * xhat[e]) / m;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Custom { inputs, backward } => {
                let values: Vec<&[T]> = inputs.iter().map(|v| self.value(*v)).collect();
                let dins = backward(&values, &node.value, gy);
                for (v, d) in inputs.iter().zip(dins) {
                    if let Some(d) = d {
                        assert_eq!(d.len(), self.value(*v).len(), "custom backward returned wrong extent");
                        self.accumulate(grads, *v, d);
                    }
                }
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(v: T) -> T {
    if v >= T::zero() {
        T::one() / (T::one() + (-v).exp())
    } else {
        let e = v.exp();
        e / (T::one() + e)
    }
}

/// Group structure of a moment exchange over an NCHW batch.
#[derive(Debug, Clone)]
pub(crate) struct MoexLayout {
    pub norm: MoexNorm,
    pub n: usize,
    pub c: usize,
    pub hw: usize,
    pub partner: Vec<usize>,
}

impl MoexLayout {
    pub fn groups(&self) -> usize {
        match self.norm {
            MoexNorm::Positional => self.n * self.hw,
            MoexNorm::Instance => self.n * self.c,
        }
    }

    pub fn group_size(&self) -> usize {
        match self.norm {
            MoexNorm::Positional => self.c,
            MoexNorm::Instance => self.hw,
        }
    }

    pub fn element(&self, g: usize, j: usize) -> usize {
        match self.norm {
            MoexNorm::Positional => {
                let (n, p) = (g / self.hw, g % self.hw);
                (n * self.c + j) * self.hw + p
            }
            MoexNorm::Instance => g * self.hw + j,
        }
    }

    pub fn partner_group(&self, g: usize) -> usize {
        match self.norm {
            MoexNorm::Positional => self.partner[g / self.hw] * self.hw + g % self.hw,
            MoexNorm::Instance => self.partner[g / self.c] * self.c + g % self.c,
        }
    }

    /// Per-group mean, `sqrt(var + eps)` and normalized values.
    pub fn normalize<T: Scalar>(&self, x: &[T], eps: T) -> (Vec<T>, Vec<T>, Vec<T>) {
        let groups = self.groups();
        let size = self.group_size();
        let m = T::of(size as f64);
        let mut mu = vec![T::zero(); groups];
        let mut std = vec![T::zero(); groups];
        let mut xhat = vec![T::zero(); x.len()];
        for g in 0..groups {
            let mean = (0..size).map(|j| x[self.element(g, j)]).sum::<T>() / m;
            let var = (0..size).map(|j| {
                let d = x[self.element(g, j)] - mean;
                d * d
            })
            .sum::<T>()
                / m;
            let sd = (var + eps).sqrt();
            for j in 0..size {
                let e = self.element(g, j);
                xhat[e] = (x[e] - mean) / sd;
            }
            mu[g] = mean;
            std[g] = sd;
        }
        (mu, std, xhat)
    }
}

/// Gradients produced by [`Graph::backward`], indexed by node.
pub struct Gradients<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&[T]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }
}
