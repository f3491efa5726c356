//! Central finite-difference verification of the engine's gradient rules.
//!
//! Checks run in `f64`; training uses the same graph code in `f32`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::{Graph, MoexNorm, Tensor, Var};
use crate::error::{Error, Result};

/// Relative error above which a gradient is reported as wrong.
pub const DEFAULT_TOLERANCE: f64 = 1e-3;
const STEP: f64 = 1e-6;
/// Gradients smaller than this are compared in absolute terms.
const ERROR_FLOOR: f64 = 1e-4;

/// Differentiable ops with a registered random test case.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OpId {
    Conv2d,
    Conv2dBias,
    Dense,
    BatchNormTrain,
    BatchNormEval,
    Relu,
    Sigmoid,
    MaxPool,
    AvgPool,
    Gap,
    ChannelScale,
    Add,
    Mul,
    Scale,
    Sum,
    Mean,
    Concat,
    Upsample,
    SoftmaxCrossEntropy,
    BceWithLogits,
    MoexPositional,
    MoexInstance,
}

impl OpId {
    pub const ALL: [OpId; 22] = [
        OpId::Conv2d,
        OpId::Conv2dBias,
        OpId::Dense,
        OpId::BatchNormTrain,
        OpId::BatchNormEval,
        OpId::Relu,
        OpId::Sigmoid,
        OpId::MaxPool,
        OpId::AvgPool,
        OpId::Gap,
        OpId::ChannelScale,
        OpId::Add,
        OpId::Mul,
        OpId::Scale,
        OpId::Sum,
        OpId::Mean,
        OpId::Concat,
        OpId::Upsample,
        OpId::SoftmaxCrossEntropy,
        OpId::BceWithLogits,
        OpId::MoexPositional,
        OpId::MoexInstance,
    ];

    pub fn name(self) -> &'static str {
        match self {
            OpId::Conv2d => "conv2d",
            OpId::Conv2dBias => "conv2d_bias",
            OpId::Dense => "dense",
            OpId::BatchNormTrain => "batchnorm2d_train",
            OpId::BatchNormEval => "batchnorm2d_eval",
            OpId::Relu => "relu",
            OpId::Sigmoid => "sigmoid",
            OpId::MaxPool => "max_pool",
            OpId::AvgPool => "avg_pool",
            OpId::Gap => "gap",
            OpId::ChannelScale => "channel_scale",
            OpId::Add => "add",
            OpId::Mul => "mul",
            OpId::Scale => "scale",
            OpId::Sum => "sum",
            OpId::Mean => "mean",
            OpId::Concat => "concat_channels",
            OpId::Upsample => "upsample",
            OpId::SoftmaxCrossEntropy => "softmax_cross_entropy",
            OpId::BceWithLogits => "bce_with_logits",
            OpId::MoexPositional => "moex_positional",
            OpId::MoexInstance => "moex_instance",
        }
    }

    pub fn from_name(name: &str) -> Result<OpId> {
        OpId::ALL.into_iter().find(|op| op.name() == name).ok_or_else(|| {
            let known: Vec<_> = OpId::ALL.iter().map(|o| o.name()).collect();
            Error::usage(format!("unknown op '{name}'; registered ops: {}", known.join(", ")))
        })
    }
}

/// Named input of a checked function.
pub struct CheckInput {
    pub name: String,
    pub tensor: Tensor<f64>,
}

impl CheckInput {
    pub fn new(name: &str, tensor: Tensor<f64>) -> Self {
        CheckInput { name: name.to_string(), tensor }
    }
}

pub type BuildFn<'a> = dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var> + 'a;

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct InputError {
    pub name: String,
    pub max_rel_error: f64,
    pub coordinates: usize,
}

#[derive(Debug, Clone, Serialize, PartialEq)]
pub struct GradCheckReport {
    pub op: String,
    pub trials: usize,
    pub tolerance: f64,
    pub inputs: Vec<InputError>,
    /// Inputs that do not require gradients and were not checked.
    pub skipped: Vec<String>,
}

impl GradCheckReport {
    pub fn max_rel_error(&self) -> f64 {
        self.inputs.iter().map(|e| e.max_rel_error).fold(0.0, f64::max)
    }

    pub fn passed(&self) -> bool {
        self.max_rel_error() < self.tolerance
    }

    fn merge(&mut self, other: GradCheckReport) {
        for e in other.inputs {
            match self.inputs.iter_mut().find(|x| x.name == e.name) {
                Some(x) => {
                    x.max_rel_error = x.max_rel_error.max(e.max_rel_error);
                    x.coordinates += e.coordinates;
                }
                None => self.inputs.push(e),
            }
        }
        for s in other.skipped {
            if !self.skipped.contains(&s) {
                self.skipped.push(s);
            }
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(ERROR_FLOOR)
}

/// Compares analytic and central-difference gradients of the scalar
/// `sum(weights * build(inputs))`.
///
/// `max_coordinates` limits how many coordinates of each input are
/// perturbed (chosen with `seed`); `None` checks all of them.
pub fn check_function(
    label: &str,
    inputs: &[CheckInput],
    build: &BuildFn<'_>,
    max_coordinates: Option<usize>,
    seed: u64,
) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let eval = |tensors: &[Tensor<f64>], weights: Option<&[f64]>| -> Result<(Graph<f64>, Vec<Var>, Var, Vec<f64>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = tensors.iter().map(|t| g.input(t)).collect();
        let out = build(&mut g, &vars)?;
        let w = match weights {
            Some(w) => w.to_vec(),
            None => vec![1.0; g.value(out).len()],
        };
        let wv = g.leaf(g.shape(out).to_vec().as_slice(), w.clone(), false);
        let prod = g.mul(out, wv)?;
        let loss = g.sum(prod);
        Ok((g, vars, loss, w))
    };

    let base: Vec<Tensor<f64>> = inputs.iter().map(|i| i.tensor.clone()).collect();
    // Probe once for the output extent, then draw fixed random weights.
    let (probe, _, _, w) = eval(&base, None)?;
    drop(probe);
    let weights: Vec<f64> = if w.len() == 1 { vec![1.0] } else { (0..w.len()).map(|_| rng.random_range(-1.0..1.0)).collect() };

    let (g, vars, loss, _) = eval(&base, Some(&weights))?;
    let grads = g.backward(loss)?;

    let mut report = GradCheckReport {
        op: label.to_string(),
        trials: 1,
        tolerance: DEFAULT_TOLERANCE,
        inputs: Vec::new(),
        skipped: Vec::new(),
    };
    for (idx, input) in inputs.iter().enumerate() {
        if !input.tensor.requires_grad() {
            report.skipped.push(input.name.clone());
            continue;
        }
        let analytic = grads.get(vars[idx]).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; input.tensor.numel()]);
        let n = input.tensor.numel();
        let coords: Vec<usize> = match max_coordinates {
            Some(m) if m < n => (0..m).map(|_| rng.random_range(0..n)).collect(),
            _ => (0..n).collect(),
        };
        let mut worst: f64 = 0.0;
        for &c in &coords {
            let mut plus = base.clone();
            plus[idx].data_mut()[c] += STEP;
            let mut minus = base.clone();
            minus[idx].data_mut()[c] -= STEP;
            let (gp, _, lp, _) = eval(&plus, Some(&weights))?;
            let (gm, _, lm, _) = eval(&minus, Some(&weights))?;
            let numeric = (gp.value(lp)[0] - gm.value(lm)[0]) / (2.0 * STEP);
            worst = worst.max(relative_error(analytic[c], numeric));
        }
        report.inputs.push(InputError { name: input.name.clone(), max_rel_error: worst, coordinates: coords.len() });
    }
    Ok(report)
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(lo..hi)).with_requires_grad(true)
}

/// Uniform values bounded away from zero, for inputs of kinked ops.
fn away_from_zero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| {
        let m = rng.random_range(0.05..1.0);
        if rng.random_bool(0.5) { m } else { -m }
    })
    .with_requires_grad(true)
}

fn distribution_rows(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(n * k);
    for _ in 0..n {
        let row: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
        let s: f64 = row.iter().sum();
        out.extend(row.iter().map(|v| v / s));
    }
    out
}

type Case = (Vec<CheckInput>, Box<BuildFn<'static>>);

fn registered_case(op: OpId, rng: &mut ChaCha8Rng) -> Case {
    match op {
        OpId::Conv2d | OpId::Conv2dBias => {
            let x = uniform(rng, &[1, 2, 5, 5], -1.0, 1.0);
            let w = uniform(rng, &[2, 2, 3, 3], -1.0, 1.0);
            if op == OpId::Conv2d {
                (
                    vec![CheckInput::new("input", x), CheckInput::new("kernel", w)],
                    Box::new(|g, v| g.conv2d(v[0], v[1], None, (2, 2), (1, 1))),
                )
            } else {
                let b = uniform(rng, &[2], -1.0, 1.0);
                (
                    vec![CheckInput::new("input", x), CheckInput::new("kernel", w), CheckInput::new("bias", b)],
                    Box::new(|g, v| g.conv2d(v[0], v[1], Some(v[2]), (1, 1), (1, 1))),
                )
            }
        }
        OpId::Dense => (
            vec![
                CheckInput::new("input", uniform(rng, &[3, 4], -1.0, 1.0)),
                CheckInput::new("weight", uniform(rng, &[4, 5], -1.0, 1.0)),
                CheckInput::new("bias", uniform(rng, &[5], -1.0, 1.0)),
            ],
            Box::new(|g, v| g.dense(v[0], v[1], Some(v[2]))),
        ),
        OpId::BatchNormTrain => (
            vec![
                CheckInput::new("input", uniform(rng, &[2, 3, 2, 3], -2.0, 2.0)),
                CheckInput::new("gamma", uniform(rng, &[3], 0.5, 1.5)),
                CheckInput::new("beta", uniform(rng, &[3], -1.0, 1.0)),
            ],
            Box::new(|g, v| g.batchnorm2d(v[0], v[1], v[2], None, 1e-5)),
        ),
        OpId::BatchNormEval => {
            let mean: Vec<f64> = (0..3).map(|_| rng.random_range(-0.5..0.5)).collect();
            let var: Vec<f64> = (0..3).map(|_| rng.random_range(0.5..2.0)).collect();
            (
                vec![
                    CheckInput::new("input", uniform(rng, &[2, 3, 2, 3], -2.0, 2.0)),
                    CheckInput::new("gamma", uniform(rng, &[3], 0.5, 1.5)),
                    CheckInput::new("beta", uniform(rng, &[3], -1.0, 1.0)),
                ],
                Box::new(move |g, v| g.batchnorm2d(v[0], v[1], v[2], Some((&mean, &var)), 1e-5)),
            )
        }
        OpId::Relu => (
            vec![CheckInput::new("input", away_from_zero(rng, &[2, 3, 4]))],
            Box::new(|g, v| Ok(g.relu(v[0]))),
        ),
        OpId::Sigmoid => (
            vec![CheckInput::new("input", uniform(rng, &[2, 3, 4], -4.0, 4.0))],
            Box::new(|g, v| Ok(g.sigmoid(v[0]))),
        ),
        OpId::MaxPool => (
            vec![CheckInput::new("input", uniform(rng, &[1, 2, 4, 6], -1.0, 1.0))],
            Box::new(|g, v| g.max_pool(v[0], 2)),
        ),
        OpId::AvgPool => (
            vec![CheckInput::new("input", uniform(rng, &[1, 2, 4, 6], -1.0, 1.0))],
            Box::new(|g, v| g.avg_pool(v[0], 2)),
        ),
        OpId::Gap => (
            vec![CheckInput::new("input", uniform(rng, &[2, 3, 3, 3], -1.0, 1.0))],
            Box::new(|g, v| g.gap(v[0])),
        ),
        OpId::ChannelScale => (
            vec![
                CheckInput::new("input", uniform(rng, &[2, 3, 2, 2], -1.0, 1.0)),
                CheckInput::new("scale", uniform(rng, &[2, 3], 0.0, 1.0)),
            ],
            Box::new(|g, v| g.channel_scale(v[0], v[1])),
        ),
        OpId::Add | OpId::Mul => {
            let a = uniform(rng, &[2, 3, 4], -1.0, 1.0);
            let b = uniform(rng, &[2, 3, 4], -1.0, 1.0);
            let inputs = vec![CheckInput::new("a", a), CheckInput::new("b", b)];
            if op == OpId::Add {
                (inputs, Box::new(|g, v| g.add(v[0], v[1])))
            } else {
                (inputs, Box::new(|g, v| g.mul(v[0], v[1])))
            }
        }
        OpId::Scale => {
            let c = rng.random_range(-2.0..2.0);
            (
                vec![CheckInput::new("a", uniform(rng, &[5, 3], -1.0, 1.0))],
                Box::new(move |g, v| Ok(g.scale(v[0], c))),
            )
        }
        OpId::Sum => (
            vec![CheckInput::new("a", uniform(rng, &[4, 4], -1.0, 1.0))],
            Box::new(|g, v| Ok(g.sum(v[0]))),
        ),
        OpId::Mean => (
            vec![CheckInput::new("a", uniform(rng, &[4, 4], -1.0, 1.0))],
            Box::new(|g, v| Ok(g.mean(v[0]))),
        ),
        OpId::Concat => (
            vec![
                CheckInput::new("a", uniform(rng, &[2, 2, 2, 3], -1.0, 1.0)),
                CheckInput::new("b", uniform(rng, &[2, 1, 2, 3], -1.0, 1.0)),
            ],
            Box::new(|g, v| g.concat_channels(v[0], v[1])),
        ),
        OpId::Upsample => (
            vec![CheckInput::new("input", uniform(rng, &[1, 2, 2, 3], -1.0, 1.0))],
            Box::new(|g, v| g.upsample(v[0], 2)),
        ),
        OpId::SoftmaxCrossEntropy => {
            let targets = distribution_rows(rng, 4, 3);
            (
                vec![CheckInput::new("logits", uniform(rng, &[4, 3], -3.0, 3.0))],
                Box::new(move |g, v| g.softmax_cross_entropy(v[0], &targets)),
            )
        }
        OpId::BceWithLogits => {
            let targets: Vec<f64> = (0..24).map(|_| rng.random_range(0.0..1.0)).collect();
            (
                vec![CheckInput::new("logits", uniform(rng, &[1, 1, 4, 6], -3.0, 3.0))],
                Box::new(move |g, v| g.bce_with_logits(v[0], &targets)),
            )
        }
        OpId::MoexPositional | OpId::MoexInstance => {
            let norm = if op == OpId::MoexPositional { MoexNorm::Positional } else { MoexNorm::Instance };
            (
                vec![CheckInput::new("input", uniform(rng, &[3, 4, 2, 2], -2.0, 2.0))],
                Box::new(move |g, v| g.moex(v[0], &[2, 0, 1], norm, 1e-5)),
            )
        }
    }
}

/// Runs `trials` random cases of a registered op.
///
/// Inputs named in `frozen` are marked as not requiring gradients and are
/// reported as skipped.
pub fn gradient_check(op: OpId, trials: usize, seed: u64, frozen: &[&str]) -> Result<GradCheckReport> {
    let mut report = GradCheckReport {
        op: op.name().to_string(),
        trials,
        tolerance: DEFAULT_TOLERANCE,
        inputs: Vec::new(),
        skipped: Vec::new(),
    };
    for trial in 0..trials {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(1_000_003).wrapping_add(trial as u64));
        let (mut inputs, build) = registered_case(op, &mut rng);
        for input in inputs.iter_mut() {
            if frozen.contains(&input.name.as_str()) {
                input.tensor.set_requires_grad(false);
            }
        }
        let r = check_function(op.name(), &inputs, build.as_ref(), None, seed.wrapping_add(trial as u64))?;
        report.merge(r);
    }
    Ok(report)
}
