//! Instantiated models: parameter storage and the forward pass over a
//! [`Graph`].

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::config::{LayerKind, LayerShape, ModelConfig, MoexConfig, PoolOp, Task};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::{Gradients, Graph, Tensor, Var};
use crate::training::init::he_uniform_init;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamRole {
    Trainable,
    /// Non-differentiable state such as batch-norm running statistics.
    Buffer,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Init {
    #[default]
    HeUniform,
    /// All weights zero; batch-norm scales still start at one.
    Zeros,
}

#[derive(Debug, Clone)]
pub struct ParamEntry<T> {
    pub name: String,
    pub tensor: Tensor<T>,
    pub role: ParamRole,
}

/// Named parameters and buffers in creation order.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T> {
    entries: Vec<ParamEntry<T>>,
}

impl<T: Scalar> ParamStore<T> {
    fn add(&mut self, name: String, tensor: Tensor<T>, role: ParamRole) -> usize {
        let tensor = tensor.with_requires_grad(role == ParamRole::Trainable);
        self.entries.push(ParamEntry { name, tensor, role });
        self.entries.len() - 1
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[ParamEntry<T>] {
        &self.entries
    }

    pub fn entry(&self, idx: usize) -> &ParamEntry<T> {
        &self.entries[idx]
    }

    pub fn tensor_mut(&mut self, idx: usize) -> &mut Tensor<T> {
        &mut self.entries[idx].tensor
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.name == name)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor<T>> {
        self.index_of(name).map(|i| &self.entries[i].tensor)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.index_of(name).map(move |i| &mut self.entries[i].tensor)
    }

    pub fn trainable(&self) -> impl Iterator<Item = (usize, &ParamEntry<T>)> {
        self.entries.iter().enumerate().filter(|(_, e)| e.role == ParamRole::Trainable)
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.tensor.zero_grad();
        }
    }

    /// Number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.trainable().map(|(_, e)| e.tensor.numel()).sum()
    }
}

#[derive(Debug, Clone, Copy)]
struct Bn {
    gamma: usize,
    beta: usize,
    mean: usize,
    var: usize,
}

#[derive(Debug, Clone)]
enum Compiled {
    Conv { w: usize, b: Option<usize>, stride: usize, padding: usize },
    Bn(Bn),
    Relu,
    Pool(PoolOp, usize),
    Gap,
    Dense { w: usize, b: Option<usize> },
    Se { w1: usize, w2: usize },
    Moex(MoexConfig),
    Residual { conv1: usize, bn1: Bn, conv2: usize, bn2: Bn, proj: Option<(usize, Bn)>, se: Option<(usize, usize)>, stride: usize },
    DenseBlock(Vec<(Bn, usize)>),
    UpsampleConcat(usize),
}

/// Result of one forward pass: the output node, every layer's output node,
/// and the bookkeeping needed to route gradients and batch statistics back
/// to the model.
pub struct ForwardPass {
    pub output: Var,
    pub layer_outputs: Vec<Var>,
    /// Whether a moment exchange was applied in this pass.
    pub moex_applied: bool,
    bindings: Vec<(usize, Var)>,
    bn_nodes: Vec<(Bn, Var)>,
}

struct Builder<'a, T> {
    store: &'a mut ParamStore<T>,
    rng: ChaCha8Rng,
    init: Init,
}

impl<T: Scalar> Builder<'_, T> {
    fn weight(&mut self, name: String, shape: &[usize], fan_in: usize) -> Result<usize> {
        let t = match self.init {
            Init::HeUniform => he_uniform_init(shape, fan_in, &mut self.rng)?,
            Init::Zeros => Tensor::zeros(shape),
        };
        Ok(self.store.add(name, t, ParamRole::Trainable))
    }

    fn zeros(&mut self, name: String, shape: &[usize]) -> usize {
        self.store.add(name, Tensor::zeros(shape), ParamRole::Trainable)
    }

    fn conv(&mut self, prefix: &str, out: usize, inp: usize, k: usize) -> Result<usize> {
        self.weight(format!("{prefix}.weight"), &[out, inp, k, k], inp * k * k)
    }

    fn bn(&mut self, prefix: &str, c: usize, zero_gamma: bool) -> Bn {
        let gamma = if zero_gamma { Tensor::zeros(&[c]) } else { Tensor::full(&[c], T::one()) };
        Bn {
            gamma: self.store.add(format!("{prefix}.gamma"), gamma, ParamRole::Trainable),
            beta: self.zeros(format!("{prefix}.beta"), &[c]),
            mean: self.store.add(format!("{prefix}.running_mean"), Tensor::zeros(&[c]), ParamRole::Buffer),
            var: self.store.add(format!("{prefix}.running_var"), Tensor::full(&[c], T::one()), ParamRole::Buffer),
        }
    }

    fn se(&mut self, prefix: &str, c: usize, r: usize) -> Result<(usize, usize)> {
        let hidden = c / r;
        Ok((
            self.weight(format!("{prefix}.w1"), &[c, hidden], c)?,
            self.weight(format!("{prefix}.w2"), &[hidden, c], hidden)?,
        ))
    }
}

/// Instantiates a model from its configuration. Parameters are drawn from
/// a generator seeded with `seed`, so equal seeds give equal models.
pub fn build_model<T: Scalar>(cfg: &ModelConfig, init: Init, seed: u64) -> Result<Model<T>> {
    let shapes = cfg.infer_shapes()?;
    let names = cfg.layer_names();
    let mut store = ParamStore { entries: Vec::new() };
    let mut b = Builder { store: &mut store, rng: ChaCha8Rng::seed_from_u64(seed), init };
    let mut layers = Vec::with_capacity(cfg.layers.len());
    let [c0, h0, w0] = cfg.input_shape;
    let mut prev = LayerShape::Spatial { c: c0, h: h0, w: w0 };
    for (i, layer) in cfg.layers.iter().enumerate() {
        let name = &names[i];
        let in_c = match prev {
            LayerShape::Spatial { c, .. } => c,
            LayerShape::Flat(d) => d,
        };
        let compiled = match &layer.kind {
            LayerKind::Conv(p) => Compiled::Conv {
                w: b.conv(name, p.out_channels, in_c, p.kernel)?,
                b: if p.bias { Some(b.zeros(format!("{name}.bias"), &[p.out_channels])) } else { None },
                stride: p.stride,
                padding: p.padding,
            },
            LayerKind::Batchnorm => Compiled::Bn(b.bn(name, in_c, false)),
            LayerKind::Relu => Compiled::Relu,
            LayerKind::Pool(p) => Compiled::Pool(p.op, p.size),
            LayerKind::Gap => Compiled::Gap,
            LayerKind::Dense(p) => {
                let fan_in = prev.numel();
                Compiled::Dense {
                    w: b.weight(format!("{name}.weight"), &[fan_in, p.out_features], fan_in)?,
                    b: if p.bias { Some(b.zeros(format!("{name}.bias"), &[p.out_features])) } else { None },
                }
            }
            LayerKind::SeBlock(p) => {
                let (w1, w2) = b.se(name, in_c, p.reduction)?;
                Compiled::Se { w1, w2 }
            }
            LayerKind::Moex(m) => Compiled::Moex(m.clone()),
            LayerKind::ResidualBlock(p) => {
                let out = p.out_channels;
                let conv1 = b.conv(&format!("{name}.conv1"), out, in_c, 3)?;
                let bn1 = b.bn(&format!("{name}.bn1"), out, false);
                let conv2 = b.conv(&format!("{name}.conv2"), out, out, 3)?;
                let bn2 = b.bn(&format!("{name}.bn2"), out, p.zero_init_last_bn);
                let proj = if p.stride != 1 || in_c != out {
                    Some((b.conv(&format!("{name}.proj"), out, in_c, 1)?, b.bn(&format!("{name}.proj_bn"), out, false)))
                } else {
                    None
                };
                let se = match p.se_reduction {
                    Some(r) => Some(b.se(&format!("{name}.se"), out, r)?),
                    None => None,
                };
                Compiled::Residual { conv1, bn1, conv2, bn2, proj, se, stride: p.stride }
            }
            LayerKind::DenseBlock(p) => {
                let mut parts = Vec::with_capacity(p.layers);
                for j in 0..p.layers {
                    let c = in_c + j * p.growth;
                    let bn = b.bn(&format!("{name}.{j}.bn"), c, false);
                    let conv = b.conv(&format!("{name}.{j}.conv"), p.growth, c, 3)?;
                    parts.push((bn, conv));
                }
                Compiled::DenseBlock(parts)
            }
            LayerKind::UpsampleConcat(p) => {
                Compiled::UpsampleConcat(names.iter().position(|n| *n == p.skip).expect("validated by shape inference"))
            }
        };
        layers.push(compiled);
        prev = shapes[i];
    }
    Ok(Model { config: cfg.clone(), shapes, names, store, layers })
}

#[derive(Debug, Clone)]
pub struct Model<T> {
    config: ModelConfig,
    shapes: Vec<LayerShape>,
    names: Vec<String>,
    store: ParamStore<T>,
    layers: Vec<Compiled>,
}

struct Binder<'a, T> {
    store: &'a ParamStore<T>,
    vars: Vec<Option<Var>>,
    bindings: Vec<(usize, Var)>,
    bn_nodes: Vec<(Bn, Var)>,
    mode: Mode,
}

impl<T: Scalar> Binder<'_, T> {
    fn param(&mut self, g: &mut Graph<T>, idx: usize) -> Var {
        if let Some(v) = self.vars[idx] {
            return v;
        }
        let v = g.input(&self.store.entries[idx].tensor);
        self.vars[idx] = Some(v);
        if self.store.entries[idx].role == ParamRole::Trainable {
            self.bindings.push((idx, v));
        }
        v
    }

    fn bn(&mut self, g: &mut Graph<T>, x: Var, bn: Bn) -> Result<Var> {
        let gamma = self.param(g, bn.gamma);
        let beta = self.param(g, bn.beta);
        let eps = T::of(BN_EPS);
        match self.mode {
            Mode::Train => {
                let out = g.batchnorm2d(x, gamma, beta, None, eps)?;
                self.bn_nodes.push((bn, out));
                Ok(out)
            }
            Mode::Eval => {
                let rm = self.store.entries[bn.mean].tensor.data();
                let rv = self.store.entries[bn.var].tensor.data();
                g.batchnorm2d(x, gamma, beta, Some((rm, rv)), eps)
            }
        }
    }

    fn conv(&mut self, g: &mut Graph<T>, x: Var, w: usize, b: Option<usize>, stride: usize, padding: usize) -> Result<Var> {
        let wv = self.param(g, w);
        let bv = b.map(|b| self.param(g, b));
        g.conv2d(x, wv, bv, (stride, stride), (padding, padding))
    }

    fn se(&mut self, g: &mut Graph<T>, x: Var, w1: usize, w2: usize) -> Result<Var> {
        let (w1, w2) = (self.param(g, w1), self.param(g, w2));
        se_gate(g, x, w1, w2)
    }
}

/// `x * sigmoid(relu(gap(x) W1) W2)` per channel.
pub(crate) fn se_gate<T: Scalar>(g: &mut Graph<T>, x: Var, w1: Var, w2: Var) -> Result<Var> {
    let z = g.gap(x)?;
    let a = g.dense(z, w1, None)?;
    let a = g.relu(a);
    let b = g.dense(a, w2, None)?;
    let s = g.sigmoid(b);
    g.channel_scale(x, s)
}

impl<T: Scalar> Model<T> {
    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn task(&self) -> Task {
        self.config.task
    }

    pub fn input_shape(&self) -> [usize; 3] {
        self.config.input_shape
    }

    pub fn num_classes(&self) -> usize {
        self.config.num_classes
    }

    pub fn store(&self) -> &ParamStore<T> {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut ParamStore<T> {
        &mut self.store
    }

    pub fn layer_names(&self) -> &[String] {
        &self.names
    }

    pub fn layer_shapes(&self) -> &[LayerShape] {
        &self.shapes
    }

    pub fn layer_index(&self, name: &str) -> Result<usize> {
        self.names.iter().position(|n| n == name).ok_or_else(|| {
            Error::usage(format!("unknown layer '{name}'; layers: {}", self.names.join(", ")))
        })
    }

    pub fn has_moex(&self) -> bool {
        self.layers.iter().any(|l| matches!(l, Compiled::Moex(_)))
    }

    pub fn moex_config(&self) -> Option<&MoexConfig> {
        self.layers.iter().find_map(|l| match l {
            Compiled::Moex(m) => Some(m),
            _ => None,
        })
    }

    /// The last spatial layer feeding the global pooling head.
    pub fn default_feature_layer(&self) -> Result<String> {
        let gap = self.layers.iter().position(|l| matches!(l, Compiled::Gap));
        match gap {
            Some(i) if i > 0 => Ok(self.names[i - 1].clone()),
            _ => {
                // Without a pooling head, fall back to the last spatial layer.
                self.shapes
                    .iter()
                    .rposition(|s| matches!(s, LayerShape::Spatial { .. }))
                    .map(|i| self.names[i].clone())
                    .ok_or_else(|| Error::usage("model exposes no spatial feature layer"))
            }
        }
    }

    /// Records the forward computation of `input` (`[N, C, H, W]`).
    ///
    /// In training mode batch norms use batch statistics, and if
    /// `moex_partner` is given every `moex` layer exchanges moments between
    /// sample `i` and sample `moex_partner[i]`. In evaluation mode `moex`
    /// layers are identities.
    pub fn forward(&self, g: &mut Graph<T>, input: Var, mode: Mode, moex_partner: Option<&[usize]>) -> Result<ForwardPass> {
        let [c, h, w] = self.config.input_shape;
        let shape = g.shape(input);
        if shape.len() != 4 || shape[1..] != [c, h, w] {
            return Err(Error::config(format!("model expects [N, {c}, {h}, {w}] input, got {shape:?}")));
        }
        let mut b = Binder {
            store: &self.store,
            vars: vec![None; self.store.len()],
            bindings: Vec::new(),
            bn_nodes: Vec::new(),
            mode,
        };
        let mut outputs: Vec<Var> = Vec::with_capacity(self.layers.len());
        let mut x = input;
        let mut moex_applied = false;
        for layer in &self.layers {
            x = match layer {
                Compiled::Conv { w, b: bias, stride, padding } => b.conv(g, x, *w, *bias, *stride, *padding)?,
                Compiled::Bn(bn) => b.bn(g, x, *bn)?,
                Compiled::Relu => g.relu(x),
                Compiled::Pool(PoolOp::Max, s) => g.max_pool(x, *s)?,
                Compiled::Pool(PoolOp::Avg, s) => g.avg_pool(x, *s)?,
                Compiled::Gap => g.gap(x)?,
                Compiled::Dense { w, b: bias } => {
                    let wv = b.param(g, *w);
                    let bv = bias.map(|i| b.param(g, i));
                    g.dense(x, wv, bv)?
                }
                Compiled::Se { w1, w2 } => b.se(g, x, *w1, *w2)?,
                Compiled::Moex(m) => match (mode, moex_partner) {
                    (Mode::Train, Some(partner)) => {
                        moex_applied = true;
                        g.moex(x, partner, m.norm, T::of(m.eps))?
                    }
                    _ => x,
                },
                Compiled::Residual { conv1, bn1, conv2, bn2, proj, se, stride } => {
                    let r = b.conv(g, x, *conv1, None, *stride, 1)?;
                    let r = b.bn(g, r, *bn1)?;
                    let r = g.relu(r);
                    let r = b.conv(g, r, *conv2, None, 1, 1)?;
                    let mut r = b.bn(g, r, *bn2)?;
                    if let Some((w1, w2)) = se {
                        r = b.se(g, r, *w1, *w2)?;
                    }
                    let shortcut = match proj {
                        Some((pw, pbn)) => {
                            let s = b.conv(g, x, *pw, None, *stride, 0)?;
                            b.bn(g, s, *pbn)?
                        }
                        None => x,
                    };
                    g.add(r, shortcut)?
                }
                Compiled::DenseBlock(parts) => {
                    let mut cur = x;
                    for (bn, conv) in parts {
                        let h = b.bn(g, cur, *bn)?;
                        let h = g.relu(h);
                        let h = b.conv(g, h, *conv, None, 1, 1)?;
                        cur = g.concat_channels(cur, h)?;
                    }
                    cur
                }
                Compiled::UpsampleConcat(skip) => {
                    let up = g.upsample(x, 2)?;
                    g.concat_channels(up, outputs[*skip])?
                }
            };
            outputs.push(x);
        }
        Ok(ForwardPass { output: x, layer_outputs: outputs, moex_applied, bindings: b.bindings, bn_nodes: b.bn_nodes })
    }

    /// Adds the pass's parameter gradients into the parameters' buffers.
    pub fn accumulate_gradients(&mut self, pass: &ForwardPass, grads: &Gradients<T>) {
        for &(idx, v) in &pass.bindings {
            if let Some(gr) = grads.get(v) {
                self.store.entries[idx].tensor.accumulate_grad(gr);
            }
        }
    }

    /// Folds the batch statistics of a training pass into running statistics.
    pub fn update_running_stats(&mut self, pass: &ForwardPass, g: &Graph<T>) {
        let m = T::of(BN_MOMENTUM);
        for (bn, v) in &pass.bn_nodes {
            if let Some(stats) = g.batch_stats(*v) {
                for (r, &s) in self.store.entries[bn.mean].tensor.data_mut().iter_mut().zip(&stats.mean) {
                    *r = (T::one() - m) * *r + m * s;
                }
                for (r, &s) in self.store.entries[bn.var].tensor.data_mut().iter_mut().zip(&stats.var) {
                    *r = (T::one() - m) * *r + m * s;
                }
            }
        }
    }

    /// Evaluation-mode output for a batch `[N, C, H, W]`.
    pub fn infer(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        let mut g = Graph::new();
        let x = g.input(&batch.clone().with_requires_grad(false));
        let pass = self.forward(&mut g, x, Mode::Eval, None)?;
        Ok(g.tensor(pass.output))
    }

    /// Softmax class probabilities `[N, K]` in evaluation mode.
    pub fn predict_proba(&self, batch: &Tensor<T>) -> Result<Tensor<T>> {
        if self.task() != Task::Classify {
            return Err(Error::usage("class probabilities need a classification model"));
        }
        let logits = self.infer(batch)?;
        let k = self.num_classes();
        let mut out = logits.clone();
        for row in out.data_mut().chunks_mut(k) {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                s += *v;
            }
            row.iter_mut().for_each(|v| *v /= s);
        }
        Ok(out)
    }

    /// Converts every parameter to another scalar type.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            config: self.config.clone(),
            shapes: self.shapes.clone(),
            names: self.names.clone(),
            store: ParamStore {
                entries: self
                    .store
                    .entries
                    .iter()
                    .map(|e| ParamEntry { name: e.name.clone(), tensor: e.tensor.cast(), role: e.role })
                    .collect(),
            },
            layers: self.layers.clone(),
        }
    }
}
