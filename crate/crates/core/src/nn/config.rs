//! Declarative model description and its JSON form.
//!
//! A model is an ordered list of layers. Each layer is
//! `{"name": <optional string>, "kind": <kind>, "params": {...}}`; skip
//! edges are expressed by naming an earlier layer (`upsample_concat.skip`).
//! Residual and dense blocks carry their internal skip edges implicitly.

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::error::{Error, Result};
use crate::tensor::MoexNorm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    #[default]
    Classify,
    /// Per-pixel foreground logits with the input's spatial extent.
    Segment,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolOp {
    Max,
    Avg,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaPolicy {
    Fixed(f64),
    /// One `Beta(a, a)` draw per batch.
    Beta(f64),
}

fn default_one() -> usize {
    1
}

fn default_true() -> bool {
    true
}

fn default_reduction() -> usize {
    16
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConvParams {
    pub out_channels: usize,
    pub kernel: usize,
    #[serde(default = "default_one")]
    pub stride: usize,
    #[serde(default)]
    pub padding: usize,
    #[serde(default = "default_true")]
    pub bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoolParams {
    pub op: PoolOp,
    pub size: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseParams {
    pub out_features: usize,
    #[serde(default = "default_true")]
    pub bias: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SeParams {
    #[serde(default = "default_reduction")]
    pub reduction: usize,
}

/// Moment-exchange settings of a `moex` layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MoexConfig {
    #[serde(default)]
    pub norm: MoexNorm,
    #[serde(default = "MoexConfig::default_lambda")]
    pub lambda: LambdaPolicy,
    /// Probability that a training batch is exchanged.
    #[serde(default = "MoexConfig::default_p")]
    pub p: f64,
    #[serde(default = "MoexConfig::default_eps")]
    pub eps: f64,
}

impl MoexConfig {
    fn default_lambda() -> LambdaPolicy {
        LambdaPolicy::Fixed(0.9)
    }

    fn default_p() -> f64 {
        0.5
    }

    fn default_eps() -> f64 {
        1e-5
    }

    pub fn validate(&self) -> Result<()> {
        match self.lambda {
            LambdaPolicy::Fixed(l) if !(0.0..=1.0).contains(&l) => {
                return Err(Error::config(format!("moex lambda {l} outside [0, 1]")))
            }
            LambdaPolicy::Beta(a) if !(a > 0.0) => return Err(Error::config("moex beta parameter must be positive")),
            _ => {}
        }
        if !(0.0..=1.0).contains(&self.p) {
            return Err(Error::config(format!("moex probability {} outside [0, 1]", self.p)));
        }
        if !(self.eps > 0.0) {
            return Err(Error::config("moex epsilon must be positive"));
        }
        Ok(())
    }
}

impl Default for MoexConfig {
    fn default() -> Self {
        MoexConfig {
            norm: MoexNorm::Positional,
            lambda: Self::default_lambda(),
            p: Self::default_p(),
            eps: Self::default_eps(),
        }
    }
}

/// `conv3x3-bn-relu-conv3x3-bn` residual plus a shortcut (identity, or a
/// strided 1x1 projection when the shape changes). No activation after the
/// sum. Optional SE gating is applied to the residual branch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ResidualParams {
    pub out_channels: usize,
    #[serde(default = "default_one")]
    pub stride: usize,
    #[serde(default)]
    pub se_reduction: Option<usize>,
    /// Start the last batch norm with `gamma = 0`, making the block an identity.
    #[serde(default)]
    pub zero_init_last_bn: bool,
}

/// `layers` repetitions of `bn-relu-conv3x3(growth)` whose outputs are
/// concatenated onto the running feature stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DenseBlockParams {
    pub growth: usize,
    pub layers: usize,
}

/// Nearest 2x upsampling followed by channel concatenation with `skip`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UpsampleConcatParams {
    pub skip: String,
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv(ConvParams),
    Batchnorm,
    Relu,
    Pool(PoolParams),
    Gap,
    Dense(DenseParams),
    SeBlock(SeParams),
    Moex(MoexConfig),
    ResidualBlock(ResidualParams),
    DenseBlock(DenseBlockParams),
    UpsampleConcat(UpsampleConcatParams),
}

impl LayerKind {
    pub fn kind_name(&self) -> &'static str {
        match self {
            LayerKind::Conv(_) => "conv",
            LayerKind::Batchnorm => "batchnorm",
            LayerKind::Relu => "relu",
            LayerKind::Pool(_) => "pool",
            LayerKind::Gap => "gap",
            LayerKind::Dense(_) => "dense",
            LayerKind::SeBlock(_) => "se_block",
            LayerKind::Moex(_) => "moex",
            LayerKind::ResidualBlock(_) => "residual_block",
            LayerKind::DenseBlock(_) => "dense_block",
            LayerKind::UpsampleConcat(_) => "upsample_concat",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawLayer", into = "RawLayer")]
pub struct LayerSpec {
    pub name: Option<String>,
    pub kind: LayerKind,
}

impl LayerSpec {
    pub fn new(kind: LayerKind) -> Self {
        LayerSpec { name: None, kind }
    }

    pub fn named(name: &str, kind: LayerKind) -> Self {
        LayerSpec { name: Some(name.to_string()), kind }
    }
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawLayer {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name: Option<String>,
    kind: String,
    #[serde(default, skip_serializing_if = "is_empty_params")]
    params: Value,
}

fn is_empty_params(v: &Value) -> bool {
    v.is_null() || v.as_object().is_some_and(|o| o.is_empty())
}

fn params<T: serde::de::DeserializeOwned>(kind: &str, v: Value) -> std::result::Result<T, String> {
    let v = if v.is_null() { Value::Object(Default::default()) } else { v };
    serde_json::from_value(v).map_err(|e| format!("layer kind '{kind}': {e}"))
}

fn no_params(kind: &str, v: &Value) -> std::result::Result<(), String> {
    if is_empty_params(v) {
        Ok(())
    } else {
        Err(format!("layer kind '{kind}' takes no params"))
    }
}

impl TryFrom<RawLayer> for LayerSpec {
    type Error = String;

    fn try_from(raw: RawLayer) -> std::result::Result<Self, String> {
        let k = raw.kind.as_str();
        let kind = match k {
            "conv" => LayerKind::Conv(params(k, raw.params)?),
            "batchnorm" => no_params(k, &raw.params).map(|_| LayerKind::Batchnorm)?,
            "relu" => no_params(k, &raw.params).map(|_| LayerKind::Relu)?,
            "gap" => no_params(k, &raw.params).map(|_| LayerKind::Gap)?,
            "pool" => LayerKind::Pool(params(k, raw.params)?),
            "dense" => LayerKind::Dense(params(k, raw.params)?),
            "se_block" => LayerKind::SeBlock(params(k, raw.params)?),
            "moex" => LayerKind::Moex(params(k, raw.params)?),
            "residual_block" => LayerKind::ResidualBlock(params(k, raw.params)?),
            "dense_block" => LayerKind::DenseBlock(params(k, raw.params)?),
            "upsample_concat" => LayerKind::UpsampleConcat(params(k, raw.params)?),
            other => return Err(format!("unknown layer kind '{other}'")),
        };
        Ok(LayerSpec { name: raw.name, kind })
    }
}

impl From<LayerSpec> for RawLayer {
    fn from(l: LayerSpec) -> Self {
        let kind = l.kind.kind_name().to_string();
        let params = match l.kind {
            LayerKind::Conv(p) => serde_json::to_value(p),
            LayerKind::Pool(p) => serde_json::to_value(p),
            LayerKind::Dense(p) => serde_json::to_value(p),
            LayerKind::SeBlock(p) => serde_json::to_value(p),
            LayerKind::Moex(p) => serde_json::to_value(p),
            LayerKind::ResidualBlock(p) => serde_json::to_value(p),
            LayerKind::DenseBlock(p) => serde_json::to_value(p),
            LayerKind::UpsampleConcat(p) => serde_json::to_value(p),
            LayerKind::Batchnorm | LayerKind::Relu | LayerKind::Gap => Ok(Value::Null),
        }
        .expect("layer params always serialize");
        RawLayer { name: l.name, kind, params }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub name: Option<String>,
    /// `[channels, height, width]` of one input sample.
    pub input_shape: [usize; 3],
    /// Classes for `classify`; must be 1 for `segment`.
    pub num_classes: usize,
    #[serde(default)]
    pub task: Task,
    pub layers: Vec<LayerSpec>,
}

/// Shape of one sample after a layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LayerShape {
    Spatial { c: usize, h: usize, w: usize },
    Flat(usize),
}

impl LayerShape {
    pub fn numel(&self) -> usize {
        match *self {
            LayerShape::Spatial { c, h, w } => c * h * w,
            LayerShape::Flat(d) => d,
        }
    }

    pub fn dims(&self) -> Vec<usize> {
        match *self {
            LayerShape::Spatial { c, h, w } => vec![c, h, w],
            LayerShape::Flat(d) => vec![d],
        }
    }
}

fn conv_out(extent: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    if stride == 0 || kernel == 0 || kernel > extent + 2 * padding {
        None
    } else {
        Some((extent + 2 * padding - kernel) / stride + 1)
    }
}

impl ModelConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.infer_shapes()?;
        Ok(cfg)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("model config serializes")
    }

    /// Resolved layer names: explicit names, or `<kind><index>`.
    pub fn layer_names(&self) -> Vec<String> {
        self.layers
            .iter()
            .enumerate()
            .map(|(i, l)| l.name.clone().unwrap_or_else(|| format!("{}{i}", l.kind.kind_name())))
            .collect()
    }

    /// Runs shape inference over the layer list, returning each layer's
    /// output shape.
    pub fn infer_shapes(&self) -> Result<Vec<LayerShape>> {
        let [c, h, w] = self.input_shape;
        if c == 0 || h == 0 || w == 0 {
            return Err(Error::config("input shape extents must be positive"));
        }
        if self.layers.is_empty() {
            return Err(Error::config("model has no layers"));
        }
        let names = self.layer_names();
        for (i, n) in names.iter().enumerate() {
            if names[..i].contains(n) {
                return Err(Error::config(format!("layer {i}: duplicate layer name '{n}'")));
            }
        }
        let mut shapes: Vec<LayerShape> = Vec::with_capacity(self.layers.len());
        let mut cur = LayerShape::Spatial { c, h, w };
        for (i, layer) in self.layers.iter().enumerate() {
            let fail = |msg: String| Error::config(format!("layer {i} ({} '{}'): {msg}", layer.kind.kind_name(), names[i]));
            let spatial = || match cur {
                LayerShape::Spatial { c, h, w } => Ok((c, h, w)),
                LayerShape::Flat(_) => Err(fail("needs a spatial input".into())),
            };
            cur = match &layer.kind {
                LayerKind::Conv(p) => {
                    let (_, h, w) = spatial()?;
                    if p.out_channels == 0 {
                        return Err(fail("out_channels must be positive".into()));
                    }
                    match (conv_out(h, p.kernel, p.stride, p.padding), conv_out(w, p.kernel, p.stride, p.padding)) {
                        (Some(oh), Some(ow)) => LayerShape::Spatial { c: p.out_channels, h: oh, w: ow },
                        _ => return Err(fail(format!("kernel {} / stride {} do not fit {h}x{w}", p.kernel, p.stride))),
                    }
                }
                LayerKind::Batchnorm | LayerKind::Moex(_) => {
                    spatial()?;
                    if let LayerKind::Moex(m) = &layer.kind {
                        m.validate().map_err(|e| fail(e.to_string()))?;
                    }
                    cur
                }
                LayerKind::Relu => cur,
                LayerKind::Pool(p) => {
                    let (c, h, w) = spatial()?;
                    if p.size == 0 || p.size > h || p.size > w {
                        return Err(fail(format!("pool size {} does not fit {h}x{w}", p.size)));
                    }
                    LayerShape::Spatial { c, h: h / p.size, w: w / p.size }
                }
                LayerKind::Gap => LayerShape::Flat(spatial()?.0),
                LayerKind::Dense(p) => {
                    if p.out_features == 0 {
                        return Err(fail("out_features must be positive".into()));
                    }
                    LayerShape::Flat(p.out_features)
                }
                LayerKind::SeBlock(p) => {
                    let (c, _, _) = spatial()?;
                    if p.reduction == 0 || c % p.reduction != 0 {
                        return Err(fail(format!("{c} channels not divisible by reduction {}", p.reduction)));
                    }
                    cur
                }
                LayerKind::ResidualBlock(p) => {
                    let (_, h, w) = spatial()?;
                    if p.out_channels == 0 {
                        return Err(fail("out_channels must be positive".into()));
                    }
                    if let Some(r) = p.se_reduction {
                        if r == 0 || p.out_channels % r != 0 {
                            return Err(fail(format!("{} channels not divisible by SE reduction {r}", p.out_channels)));
                        }
                    }
                    match (conv_out(h, 3, p.stride, 1), conv_out(w, 3, p.stride, 1)) {
                        (Some(oh), Some(ow)) => LayerShape::Spatial { c: p.out_channels, h: oh, w: ow },
                        _ => return Err(fail(format!("stride {} does not fit {h}x{w}", p.stride))),
                    }
                }
                LayerKind::DenseBlock(p) => {
                    let (c, h, w) = spatial()?;
                    if p.growth == 0 || p.layers == 0 {
                        return Err(fail("growth and layers must be positive".into()));
                    }
                    LayerShape::Spatial { c: c + p.growth * p.layers, h, w }
                }
                LayerKind::UpsampleConcat(p) => {
                    let (c, h, w) = spatial()?;
                    let j = names[..i]
                        .iter()
                        .position(|n| *n == p.skip)
                        .ok_or_else(|| fail(format!("skip '{}' does not name an earlier layer", p.skip)))?;
                    match shapes[j] {
                        LayerShape::Spatial { c: cs, h: hs, w: ws } if hs == 2 * h && ws == 2 * w => {
                            LayerShape::Spatial { c: c + cs, h: hs, w: ws }
                        }
                        other => return Err(fail(format!("skip '{}' has shape {:?}, expected {}x{}", p.skip, other.dims(), 2 * h, 2 * w))),
                    }
                }
            };
            shapes.push(cur);
        }
        let last = self.layers.len() - 1;
        match self.task {
            Task::Classify => {
                if self.num_classes < 2 {
                    return Err(Error::config("classification needs at least two classes"));
                }
                let head_ok = matches!(&self.layers[last].kind, LayerKind::Dense(p) if p.out_features == self.num_classes);
                if !head_ok {
                    return Err(Error::config(format!(
                        "layer {last}: the final layer must be a dense head with {} outputs",
                        self.num_classes
                    )));
                }
                let heads = self.layers.iter().filter(|l| matches!(l.kind, LayerKind::Gap)).count();
                if heads > 1 {
                    return Err(Error::config("more than one global pooling head"));
                }
            }
            Task::Segment => {
                if self.num_classes != 1 {
                    return Err(Error::config("segmentation models predict a single foreground channel"));
                }
                if cur != (LayerShape::Spatial { c: 1, h, w }) {
                    return Err(Error::config(format!(
                        "layer {last}: segmentation output must be 1x{h}x{w}, got {:?}",
                        cur.dims()
                    )));
                }
            }
        }
        Ok(shapes)
    }

    pub fn moex_layers(&self) -> impl Iterator<Item = (usize, &MoexConfig)> {
        self.layers.iter().enumerate().filter_map(|(i, l)| match &l.kind {
            LayerKind::Moex(m) => Some((i, m)),
            _ => None,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(out: usize) -> LayerKind {
        LayerKind::Conv(ConvParams { out_channels: out, kernel: 3, stride: 1, padding: 1, bias: false })
    }

    #[test]
    fn json_round_trip_and_defaults() {
        let text = r#"{
            "input_shape": [1, 8, 8],
            "num_classes": 2,
            "layers": [
                {"name": "c1", "kind": "conv", "params": {"out_channels": 4, "kernel": 3, "padding": 1}},
                {"kind": "relu"},
                {"kind": "se_block", "params": {"reduction": 2}},
                {"kind": "moex"},
                {"kind": "gap"},
                {"kind": "dense", "params": {"out_features": 2}}
            ]
        }"#;
        let cfg = ModelConfig::from_json(text).unwrap();
        match &cfg.layers[0].kind {
            LayerKind::Conv(p) => assert!(p.bias && p.stride == 1),
            _ => panic!(),
        }
        assert_eq!(cfg.layers[3].kind, LayerKind::Moex(MoexConfig::default()));
        let again = ModelConfig::from_json(&cfg.to_json()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let bad_param = r#"{"input_shape":[1,4,4],"num_classes":2,"layers":[{"kind":"conv","params":{"out_channels":1,"kernel":1,"strid":2}}]}"#;
        assert!(ModelConfig::from_json(bad_param).unwrap_err().to_string().contains("strid"));
        let bad_kind = r#"{"input_shape":[1,4,4],"num_classes":2,"layers":[{"kind":"lstm"}]}"#;
        assert!(ModelConfig::from_json(bad_kind).is_err());
        let bad_top = r#"{"input_shape":[1,4,4],"num_classes":2,"layers":[],"extra":1}"#;
        assert!(ModelConfig::from_json(bad_top).is_err());
    }

    #[test]
    fn shape_errors_name_the_layer() {
        let cfg = ModelConfig {
            name: None,
            input_shape: [1, 8, 8],
            num_classes: 2,
            task: Task::Classify,
            layers: vec![
                LayerSpec::new(conv(6)),
                LayerSpec::new(LayerKind::SeBlock(SeParams { reduction: 4 })),
                LayerSpec::new(LayerKind::Gap),
                LayerSpec::new(LayerKind::Dense(DenseParams { out_features: 2, bias: true })),
            ],
        };
        let msg = cfg.infer_shapes().unwrap_err().to_string();
        assert!(msg.contains("layer 1"), "{msg}");
    }

    #[test]
    fn head_must_match_class_count() {
        let cfg = ModelConfig {
            name: None,
            input_shape: [1, 8, 8],
            num_classes: 3,
            task: Task::Classify,
            layers: vec![
                LayerSpec::new(conv(4)),
                LayerSpec::new(LayerKind::Gap),
                LayerSpec::new(LayerKind::Dense(DenseParams { out_features: 2, bias: true })),
            ],
        };
        assert!(cfg.infer_shapes().is_err());
    }

    #[test]
    fn upsample_concat_checks_skip() {
        let cfg = ModelConfig {
            name: None,
            input_shape: [1, 8, 8],
            num_classes: 1,
            task: Task::Segment,
            layers: vec![
                LayerSpec::named("e", conv(2)),
                LayerSpec::new(LayerKind::Pool(PoolParams { op: PoolOp::Max, size: 2 })),
                LayerSpec::new(LayerKind::UpsampleConcat(UpsampleConcatParams { skip: "e".into() })),
                LayerSpec::new(LayerKind::Conv(ConvParams { out_channels: 1, kernel: 1, stride: 1, padding: 0, bias: true })),
            ],
        };
        let shapes = cfg.infer_shapes().unwrap();
        assert_eq!(shapes[2], LayerShape::Spatial { c: 4, h: 8, w: 8 });
        let mut bad = cfg.clone();
        bad.layers[2] = LayerSpec::new(LayerKind::UpsampleConcat(UpsampleConcatParams { skip: "nope".into() }));
        assert!(bad.infer_shapes().is_err());
    }
}
