//! Procedural chest-radiograph stand-ins.
//!
//! Every image shares one fixed torso background. Two lung ellipses, with
//! small per-image jitter, carry all per-image variation: a smooth dark
//! field plus the class pattern. An optional corner token burns a
//! class-specific glyph into the background.

use std::path::Path;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::manifest::{Manifest, Record, Split};
use crate::error::{Error, Result};
use crate::imageproc::io::save_png_gray;
use crate::imageproc::{GrayImage, MaskImage, Rect};
use crate::training::fit::stream;
use crate::training::{Dataset, Sample};

/// What the lung field of an image shows.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    /// Smooth field only.
    Normal,
    /// Bright blobs in the lower lung.
    Bacterial,
    /// Fine periodic texture across the central lung.
    Viral,
    /// Central texture plus haze along the outer lung border.
    CovidLike,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClassSpec {
    pub name: String,
    /// Image `i` of the class uses `patterns[i % len]`.
    pub patterns: Vec<Pattern>,
}

impl ClassSpec {
    pub fn new(name: &str, patterns: &[Pattern]) -> Self {
        ClassSpec { name: name.to_string(), patterns: patterns.to_vec() }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitCounts {
    pub train: usize,
    pub validation: usize,
    pub test: usize,
}

impl SplitCounts {
    pub fn get(&self, split: Split) -> usize {
        match split {
            Split::Train => self.train,
            Split::Validation => self.validation,
            Split::Test => self.test,
        }
    }
}

/// Square class-coded glyph at pixel `(x, y)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenSpec {
    pub size: usize,
    pub x: usize,
    pub y: usize,
}

impl Default for TokenSpec {
    fn default() -> Self {
        TokenSpec { size: 10, x: 2, y: 2 }
    }
}

impl TokenSpec {
    pub fn rect(&self) -> Rect {
        Rect::new(self.x, self.y, self.size, self.size)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SyntheticSpec {
    pub size: usize,
    pub classes: Vec<ClassSpec>,
    pub counts: SplitCounts,
    pub seed: u64,
    pub token: Option<TokenSpec>,
    /// Multiplier on the amplitude of every class pattern.
    pub pattern_strength: f64,
    /// Lung center and radius jitter, as a fraction of the image side.
    pub lung_jitter: f64,
    /// Standard deviation of the per-pixel lung noise, in gray levels.
    pub noise: f64,
}

impl Default for SyntheticSpec {
    fn default() -> Self {
        SyntheticSpec {
            size: 64,
            classes: vec![
                ClassSpec::new("normal", &[Pattern::Normal]),
                ClassSpec::new("bacterial", &[Pattern::Bacterial]),
                ClassSpec::new("viral", &[Pattern::Viral, Pattern::CovidLike]),
            ],
            counts: SplitCounts { train: 300, validation: 100, test: 100 },
            seed: 0,
            token: None,
            pattern_strength: 1.0,
            lung_jitter: 0.02,
            noise: 3.0,
        }
    }
}

const BODY_LEVEL: f64 = 110.0;
const OUTSIDE_LEVEL: f64 = 10.0;
const LUNG_LEVEL: f64 = 50.0;
const LUNG_CX: [f64; 2] = [0.32, 0.68];
const LUNG_CY: f64 = 0.52;
const LUNG_RX: f64 = 0.14;
const LUNG_RY: f64 = 0.27;

impl SyntheticSpec {
    /// Fine-grained stage: covid-like versus other viral cases.
    pub fn viral_subtypes() -> Self {
        SyntheticSpec {
            classes: vec![ClassSpec::new("covid-like", &[Pattern::CovidLike]), ClassSpec::new("other-viral", &[Pattern::Viral])],
            ..Self::default()
        }
    }

    /// The four leaf labels of the cascade, one pattern each.
    pub fn cascade_leaves() -> Self {
        SyntheticSpec {
            classes: vec![
                ClassSpec::new("normal", &[Pattern::Normal]),
                ClassSpec::new("bacterial", &[Pattern::Bacterial]),
                ClassSpec::new("covid-like", &[Pattern::CovidLike]),
                ClassSpec::new("other-viral", &[Pattern::Viral]),
            ],
            ..Self::default()
        }
    }

    /// Class names in table order (sorted).
    pub fn class_names(&self) -> Vec<String> {
        let mut n: Vec<String> = self.classes.iter().map(|c| c.name.clone()).collect();
        n.sort();
        n
    }

    pub fn validate(&self) -> Result<()> {
        if self.size < 16 {
            return Err(Error::config("synthetic images must be at least 16 pixels wide"));
        }
        if self.classes.is_empty() || self.classes.iter().any(|c| c.patterns.is_empty() || c.name.is_empty()) {
            return Err(Error::config("every synthetic class needs a name and at least one pattern"));
        }
        let names = self.class_names();
        if names.windows(2).any(|w| w[0] == w[1]) {
            return Err(Error::config("synthetic class names must be distinct"));
        }
        if !(0.0..=0.05).contains(&self.lung_jitter) || !(self.noise >= 0.0) || !(self.pattern_strength >= 0.0) {
            return Err(Error::config("lung_jitter must be in [0, 0.05]; noise and pattern_strength non-negative"));
        }
        if let Some(t) = &self.token {
            if t.size == 0 || t.x + t.size > self.size || t.y + t.size > self.size {
                return Err(Error::config("token does not fit the image"));
            }
            let r = t.rect();
            let j = self.lung_jitter;
            let s = self.size as f64;
            for cx in LUNG_CX {
                let x0 = ((cx - j - LUNG_RX - j) * s).floor().max(0.0) as usize;
                let x1 = ((cx + j + LUNG_RX + j) * s).ceil() as usize;
                let y0 = ((LUNG_CY - j - LUNG_RY - j) * s).floor().max(0.0) as usize;
                let y1 = ((LUNG_CY + j + LUNG_RY + j) * s).ceil() as usize;
                if r.x < x1 && x0 < r.x + r.width && r.y < y1 && y0 < r.y + r.height {
                    return Err(Error::config("token overlaps the lung field"));
                }
            }
        }
        Ok(())
    }
}

/// Class glyph: a 5x5 block pattern scaled to the token size, with every
/// class distinct.
pub fn token_glyph(class: usize, size: usize) -> Vec<bool> {
    let bits = |c: usize, salt: u64| -> u32 {
        let mut rng = stream(0x746f_6b65, c as u64, salt, 0);
        rng.random::<u32>() & 0x1ff_ffff
    };
    let mut used: Vec<u32> = Vec::new();
    let mut code = 0;
    for c in 0..=class {
        let mut salt = 0;
        code = bits(c, salt);
        while used.contains(&code) || code.count_ones() < 6 {
            salt += 1;
            code = bits(c, salt);
        }
        used.push(code);
    }
    (0..size * size)
        .map(|i| {
            let (x, y) = (i % size, i / size);
            let (bx, by) = (x * 5 / size, y * 5 / size);
            code >> (by * 5 + bx) & 1 == 1
        })
        .collect()
}

/// Overwrites the token region with the glyph of `class`.
pub fn stamp_token(img: &mut GrayImage, token: &TokenSpec, class: usize) {
    let glyph = token_glyph(class, token.size);
    for dy in 0..token.size {
        for dx in 0..token.size {
            img.set(token.x + dx, token.y + dy, if glyph[dy * token.size + dx] { 255 } else { 0 });
        }
    }
}

/// Copy of `img` carrying the token of `class` instead of its own.
pub fn swap_token(img: &GrayImage, token: &TokenSpec, class: usize) -> GrayImage {
    let mut out = img.clone();
    stamp_token(&mut out, token, class);
    out
}

/// The torso background shared by every image.
pub fn background(size: usize) -> GrayImage {
    GrayImage::from_fn(size, size, |x, y| {
        let (u, v) = ((x as f64 + 0.5) / size as f64, (y as f64 + 0.5) / size as f64);
        let d = ((u - 0.5) / 0.46).powi(2) + ((v - 0.55) / 0.48).powi(2);
        (if d <= 1.0 { BODY_LEVEL } else { OUTSIDE_LEVEL }) as u8
    })
}

struct Lung {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
}

impl Lung {
    /// Normalized elliptical radius of pixel center `(u, v)`.
    fn radius(&self, u: f64, v: f64) -> f64 {
        (((u - self.cx) / self.rx).powi(2) + ((v - self.cy) / self.ry).powi(2)).sqrt()
    }
}

/// One rendered image with its lung mask.
pub fn render(spec: &SyntheticSpec, pattern: Pattern, class: usize, rng: &mut impl Rng) -> (GrayImage, MaskImage) {
    let n = spec.size;
    let s = n as f64;
    let j = spec.lung_jitter;
    let jitter = |rng: &mut dyn rand::RngCore| (rng.random::<f64>() * 2.0 - 1.0) * j;
    let lungs: Vec<Lung> = LUNG_CX
        .iter()
        .map(|&cx| Lung {
            cx: cx + jitter(rng),
            cy: LUNG_CY + jitter(rng),
            rx: LUNG_RX + jitter(rng),
            ry: LUNG_RY + jitter(rng),
        })
        .collect();
    let gradient = (rng.random::<f64>() * 2.0 - 1.0) * 8.0;
    let amp = spec.pattern_strength;
    // Pattern parameters are drawn whatever the pattern, keeping streams aligned.
    let blob_count = 2 + rng.random_range(0..2usize);
    let blobs: Vec<(usize, f64, f64, f64)> = (0..3)
        .map(|_| {
            let lung = rng.random_range(0..2usize);
            let bx = rng.random::<f64>() - 0.5;
            let by = 0.1 + 0.6 * rng.random::<f64>();
            let sigma = (0.04 + 0.02 * rng.random::<f64>()) * s;
            (lung, bx, by, sigma)
        })
        .collect();
    let (phase_x, phase_y) = (rng.random::<f64>() * std::f64::consts::TAU, rng.random::<f64>() * std::f64::consts::TAU);
    let period = 4.0 * s / 64.0;
    let noise = Normal::new(0.0, spec.noise.max(1e-12)).expect("valid normal");

    let bg = background(n);
    let mut img = bg.clone();
    let mut mask = vec![0u8; n * n];
    for y in 0..n {
        for x in 0..n {
            let (u, v) = ((x as f64 + 0.5) / s, (y as f64 + 0.5) / s);
            let Some((li, lung)) = lungs.iter().enumerate().find(|(_, l)| l.radius(u, v) <= 1.0) else { continue };
            mask[y * n + x] = 1;
            let mut val = LUNG_LEVEL + gradient * (v - lung.cy) / lung.ry;
            let central = ((v - lung.cy) / lung.ry).abs() < 0.45;
            let texture = 30.0 * amp
                * (std::f64::consts::TAU * x as f64 / period + phase_x).sin()
                * (std::f64::consts::TAU * y as f64 / period + phase_y).sin();
            match pattern {
                Pattern::Normal => {}
                Pattern::Bacterial => {
                    for &(bl, bx, by, sigma) in blobs.iter().take(blob_count) {
                        let l = &lungs[bl];
                        let (px, py) = ((l.cx + bx * l.rx) * s, (l.cy + by * l.ry) * s);
                        let d2 = (x as f64 + 0.5 - px).powi(2) + (y as f64 + 0.5 - py).powi(2);
                        val += 90.0 * amp * (-d2 / (2.0 * sigma * sigma)).exp();
                    }
                }
                Pattern::Viral | Pattern::CovidLike => {
                    if central {
                        val += texture;
                    }
                    if pattern == Pattern::CovidLike {
                        let r = lung.radius(u, v);
                        let outer = if li == 0 { u < lung.cx } else { u > lung.cx };
                        if outer && r > 0.65 {
                            val += 55.0 * amp * (r - 0.65) / 0.35;
                        }
                    }
                }
            }
            if spec.noise > 0.0 {
                val += noise.sample(rng);
            }
            img.set(x, y, val.round().clamp(0.0, 255.0) as u8);
        }
    }
    if let Some(t) = &spec.token {
        stamp_token(&mut img, t, class);
    }
    (img, MaskImage::new(n, n, mask).expect("binary mask"))
}

/// Generated images in memory, grouped by split.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSet {
    pub class_names: Vec<String>,
    pub samples: Vec<(Split, Sample)>,
}

impl SyntheticSet {
    pub fn split(&self, split: Split) -> Dataset {
        Dataset {
            class_names: self.class_names.clone(),
            samples: self.samples.iter().filter(|(s, _)| *s == split).map(|(_, x)| x.clone()).collect(),
        }
    }
}

/// Renders every image of `spec`. Image `i` of class `c` in split `s` draws
/// from its own seeded stream, so any subset can be regenerated alone.
pub fn synthesize(spec: &SyntheticSpec) -> Result<SyntheticSet> {
    spec.validate()?;
    let class_names = spec.class_names();
    let mut samples = Vec::new();
    for (si, split) in Split::ALL.iter().enumerate() {
        for (label, name) in class_names.iter().enumerate() {
            let cs = spec.classes.iter().find(|c| &c.name == name).expect("class from spec");
            for i in 0..spec.counts.get(*split) {
                let mut rng = stream(spec.seed, 0x5359_4e54 + si as u64, label as u64, i as u64);
                let pattern = cs.patterns[i % cs.patterns.len()];
                let (image, mask) = render(spec, pattern, label, &mut rng);
                let id = format!("images/{split}/{name}/{name}_{i:04}.png");
                samples.push((*split, Sample { id, image, label, mask: Some(mask) }));
            }
        }
    }
    Ok(SyntheticSet { class_names, samples })
}

/// Writes `images/<split>/<class>/*.png`, the mirrored `masks/` tree,
/// `manifest.csv` and `spec.json` under `out`.
pub fn generate_synthetic(spec: &SyntheticSpec, out: &Path) -> Result<Manifest> {
    let set = synthesize(spec)?;
    let mut records = Vec::with_capacity(set.samples.len());
    for (split, s) in &set.samples {
        let img_path = out.join(&s.id);
        let mask_rel = s.id.replacen("images/", "masks/", 1);
        for (p, img) in [(img_path, s.image.clone()), (out.join(mask_rel), s.mask.as_ref().expect("mask").to_gray())] {
            if let Some(d) = p.parent() {
                std::fs::create_dir_all(d)?;
            }
            save_png_gray(&img, &p)?;
        }
        records.push(Record { path: s.id.clone(), label: set.class_names[s.label].clone(), split: Some(*split) });
    }
    let manifest = Manifest::new(out, records)?;
    manifest.save(&out.join("manifest.csv"))?;
    std::fs::write(out.join("spec.json"), serde_json::to_string_pretty(spec)?)?;
    Ok(manifest)
}
