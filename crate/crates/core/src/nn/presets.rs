//! Built-in toy backbones.
//!
//! | preset       | body                                                   | head           |
//! |--------------|--------------------------------------------------------|----------------|
//! | `mini-seme`  | 4 conv stages (8/16/32/64 ch), SE in each, MoEx after the stem | GAP + dense |
//! | `mini-plain` | same stages without SE or MoEx                          | flatten + dense |
//! | `mini-res`   | stem + 3 strided residual blocks with SE                | GAP + dense    |
//! | `mini-dense` | stem + 3 dense blocks, SE after each transition         | GAP + dense    |
//! | `unet-toy`   | 2-level encoder/decoder with skip concatenations        | 1x1 conv logits |

use super::config::{
    ConvParams, DenseBlockParams, DenseParams, LayerKind, LayerSpec, ModelConfig, MoexConfig, PoolOp, PoolParams,
    ResidualParams, SeParams, Task, UpsampleConcatParams,
};
use crate::error::{Error, Result};

pub const PRESETS: [&str; 5] = ["mini-seme", "mini-plain", "mini-res", "mini-dense", "unet-toy"];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Head {
    Gap,
    Flatten,
}

/// Knobs of the staged `mini-*` classifier family.
#[derive(Debug, Clone, PartialEq)]
pub struct StagedOptions {
    /// Square input side.
    pub size: usize,
    pub num_classes: usize,
    pub se: bool,
    pub moex: Option<MoexConfig>,
    pub head: Head,
    /// Channels of the stem; each later stage doubles them.
    pub width: usize,
}

impl StagedOptions {
    pub fn seme(num_classes: usize) -> Self {
        StagedOptions { size: 64, num_classes, se: true, moex: Some(MoexConfig::default()), head: Head::Gap, width: 8 }
    }

    pub fn plain(num_classes: usize) -> Self {
        StagedOptions { size: 64, num_classes, se: false, moex: None, head: Head::Flatten, width: 8 }
    }
}

fn named(name: &str, kind: LayerKind) -> LayerSpec {
    LayerSpec::named(name, kind)
}

fn conv(out: usize, kernel: usize, stride: usize, bias: bool) -> LayerKind {
    LayerKind::Conv(ConvParams { out_channels: out, kernel, stride, padding: kernel / 2, bias })
}

fn pool(op: PoolOp) -> LayerKind {
    LayerKind::Pool(PoolParams { op, size: 2 })
}

fn se(reduction: usize) -> LayerKind {
    LayerKind::SeBlock(SeParams { reduction })
}

fn dense(out: usize) -> LayerKind {
    LayerKind::Dense(DenseParams { out_features: out, bias: true })
}

/// `stem, stage1..stage3`: conv-bn-relu(-SE) blocks separated by 2x max
/// pooling, then the head. The last stage is not pooled.
pub fn staged(opts: &StagedOptions) -> Result<ModelConfig> {
    if opts.width == 0 || opts.size < 8 || opts.size % 8 != 0 {
        return Err(Error::config("staged presets need width >= 1 and an input side divisible by 8"));
    }
    let mut layers = Vec::new();
    let stages = ["stem", "stage1", "stage2", "stage3"];
    for (i, stage) in stages.iter().enumerate() {
        let ch = opts.width << i;
        layers.push(named(&format!("{stage}_conv"), conv(ch, 3, 1, false)));
        layers.push(named(&format!("{stage}_bn"), LayerKind::Batchnorm));
        layers.push(named(&format!("{stage}_relu"), LayerKind::Relu));
        if i == 0 {
            if let Some(m) = &opts.moex {
                layers.push(named("moex", LayerKind::Moex(m.clone())));
            }
        }
        if opts.se {
            let r = if ch >= 32 { 8 } else { (ch / 4).max(1) };
            layers.push(named(&format!("{stage}_se"), se(r)));
        }
        if i + 1 < stages.len() {
            layers.push(named(&format!("{stage}_pool"), pool(PoolOp::Max)));
        }
    }
    if opts.head == Head::Gap {
        layers.push(named("gap", LayerKind::Gap));
    }
    layers.push(named("fc", dense(opts.num_classes)));
    let name = if opts.se { "mini-seme" } else { "mini-plain" };
    finish(name, [1, opts.size, opts.size], opts.num_classes, Task::Classify, layers)
}

fn finish(name: &str, input_shape: [usize; 3], num_classes: usize, task: Task, layers: Vec<LayerSpec>) -> Result<ModelConfig> {
    let cfg = ModelConfig { name: Some(name.to_string()), input_shape, num_classes, task, layers };
    cfg.infer_shapes()?;
    Ok(cfg)
}

pub fn mini_res(size: usize, num_classes: usize) -> Result<ModelConfig> {
    let mut layers = vec![
        named("stem_conv", conv(8, 3, 1, false)),
        named("stem_bn", LayerKind::Batchnorm),
        named("stem_relu", LayerKind::Relu),
        named("stem_pool", pool(PoolOp::Max)),
    ];
    for (i, (ch, r)) in [(16, 4), (32, 8), (64, 8)].into_iter().enumerate() {
        layers.push(named(
            &format!("res{}", i + 1),
            LayerKind::ResidualBlock(ResidualParams { out_channels: ch, stride: 2, se_reduction: Some(r), zero_init_last_bn: false }),
        ));
        layers.push(named(&format!("res{}_relu", i + 1), LayerKind::Relu));
    }
    layers.push(named("gap", LayerKind::Gap));
    layers.push(named("fc", dense(num_classes)));
    finish("mini-res", [1, size, size], num_classes, Task::Classify, layers)
}

pub fn mini_dense(size: usize, num_classes: usize) -> Result<ModelConfig> {
    let mut layers = vec![
        named("stem_conv", conv(8, 3, 1, false)),
        named("stem_bn", LayerKind::Batchnorm),
        named("stem_relu", LayerKind::Relu),
        named("stem_pool", pool(PoolOp::Max)),
    ];
    let plan = [(4, 2, 16), (8, 2, 32)];
    for (i, (growth, n, trans)) in plan.into_iter().enumerate() {
        let b = i + 1;
        layers.push(named(&format!("dense{b}"), LayerKind::DenseBlock(DenseBlockParams { growth, layers: n })));
        layers.push(named(&format!("trans{b}_conv"), conv(trans, 1, 1, false)));
        layers.push(named(&format!("trans{b}_bn"), LayerKind::Batchnorm));
        layers.push(named(&format!("trans{b}_relu"), LayerKind::Relu));
        layers.push(named(&format!("trans{b}_se"), se(4)));
        layers.push(named(&format!("trans{b}_pool"), pool(PoolOp::Avg)));
    }
    layers.push(named("dense3", LayerKind::DenseBlock(DenseBlockParams { growth: 8, layers: 2 })));
    layers.push(named("final_bn", LayerKind::Batchnorm));
    layers.push(named("final_relu", LayerKind::Relu));
    layers.push(named("gap", LayerKind::Gap));
    layers.push(named("fc", dense(num_classes)));
    finish("mini-dense", [1, size, size], num_classes, Task::Classify, layers)
}

/// Two-level U-Net producing one logit per input pixel.
pub fn unet_toy(size: usize) -> Result<ModelConfig> {
    if size < 4 || size % 4 != 0 {
        return Err(Error::config("unet-toy needs an input side divisible by 4"));
    }
    let block = |layers: &mut Vec<LayerSpec>, name: &str, ch: usize| {
        layers.push(named(&format!("{name}_conv"), conv(ch, 3, 1, false)));
        layers.push(named(&format!("{name}_bn"), LayerKind::Batchnorm));
        layers.push(named(name, LayerKind::Relu));
    };
    let mut layers = Vec::new();
    block(&mut layers, "enc1", 8);
    layers.push(named("down1", pool(PoolOp::Max)));
    block(&mut layers, "enc2", 16);
    layers.push(named("down2", pool(PoolOp::Max)));
    block(&mut layers, "bottleneck", 16);
    layers.push(named("up2", LayerKind::UpsampleConcat(UpsampleConcatParams { skip: "enc2".into() })));
    block(&mut layers, "dec2", 16);
    layers.push(named("up1", LayerKind::UpsampleConcat(UpsampleConcatParams { skip: "enc1".into() })));
    block(&mut layers, "dec1", 8);
    layers.push(named("head", conv(1, 1, 1, true)));
    finish("unet-toy", [1, size, size], 1, Task::Segment, layers)
}

/// Looks up a preset by name at the default 64x64 input.
pub fn preset(name: &str, num_classes: usize) -> Result<ModelConfig> {
    preset_sized(name, num_classes, 64)
}

/// [`preset`] with a square input of side `size`.
pub fn preset_sized(name: &str, num_classes: usize, size: usize) -> Result<ModelConfig> {
    match name {
        "mini-seme" => staged(&StagedOptions { size, ..StagedOptions::seme(num_classes) }),
        "mini-plain" => staged(&StagedOptions { size, ..StagedOptions::plain(num_classes) }),
        "mini-res" => mini_res(size, num_classes),
        "mini-dense" => mini_dense(size, num_classes),
        "unet-toy" => unet_toy(size),
        other => Err(Error::config(format!("unknown preset '{other}'; presets: {}", PRESETS.join(", ")))),
    }
}
