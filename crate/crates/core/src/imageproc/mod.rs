//! 8-bit grayscale rasters: histogram equalization (global and
//! contrast-limited adaptive), geometric resampling, masking and perceptual
//! hashing.

pub mod io;

use crate::error::{Error, Result};

/// Number of gray levels of an 8-bit image.
pub const LEVELS: usize = 256;

/// Row-major 8-bit single-channel raster.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct GrayImage {
    width: usize,
    height: usize,
    samples: Vec<u8>,
}

impl GrayImage {
    pub fn new(width: usize, height: usize, samples: Vec<u8>) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid("image extents must be positive"));
        }
        if samples.len() != width * height {
            return Err(Error::invalid(format!(
                "{width}x{height} image needs {} samples, got {}",
                width * height,
                samples.len()
            )));
        }
        Ok(GrayImage { width, height, samples })
    }

    pub fn filled(width: usize, height: usize, level: u8) -> Self {
        assert!(width > 0 && height > 0, "image extents must be positive");
        GrayImage { width, height, samples: vec![level; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> u8) -> Self {
        assert!(width > 0 && height > 0, "image extents must be positive");
        let mut samples = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                samples.push(f(x, y));
            }
        }
        GrayImage { width, height, samples }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn samples(&self) -> &[u8] {
        &self.samples
    }

    pub fn samples_mut(&mut self) -> &mut [u8] {
        &mut self.samples
    }

    pub fn get(&self, x: usize, y: usize) -> u8 {
        self.samples[y * self.width + x]
    }

    pub fn set(&mut self, x: usize, y: usize, v: u8) {
        self.samples[y * self.width + x] = v;
    }

    pub fn full_rect(&self) -> Rect {
        Rect { x: 0, y: 0, width: self.width, height: self.height }
    }
}

/// Binary raster; samples are 0 or 1.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct MaskImage {
    width: usize,
    height: usize,
    samples: Vec<u8>,
}

impl MaskImage {
    pub fn new(width: usize, height: usize, samples: Vec<u8>) -> Result<Self> {
        if samples.len() != width * height || width == 0 || height == 0 {
            return Err(Error::invalid("mask extents do not match its samples"));
        }
        if samples.iter().any(|&v| v > 1) {
            return Err(Error::invalid("mask samples must be 0 or 1"));
        }
        Ok(MaskImage { width, height, samples })
    }

    pub fn filled(width: usize, height: usize, on: bool) -> Self {
        MaskImage { width, height, samples: vec![on as u8; width * height] }
    }

    pub fn from_fn(width: usize, height: usize, mut f: impl FnMut(usize, usize) -> bool) -> Self {
        let mut samples = Vec::with_capacity(width * height);
        for y in 0..height {
            for x in 0..width {
                samples.push(f(x, y) as u8);
            }
        }
        MaskImage { width, height, samples }
    }

    /// Interprets nonzero gray levels as foreground.
    pub fn from_gray(img: &GrayImage) -> Self {
        MaskImage {
            width: img.width,
            height: img.height,
            samples: img.samples.iter().map(|&v| (v > 0) as u8).collect(),
        }
    }

    /// Foreground rendered as 255.
    pub fn to_gray(&self) -> GrayImage {
        GrayImage { width: self.width, height: self.height, samples: self.samples.iter().map(|&v| v * 255).collect() }
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn samples(&self) -> &[u8] {
        &self.samples
    }

    pub fn get(&self, x: usize, y: usize) -> bool {
        self.samples[y * self.width + x] == 1
    }

    pub fn count(&self) -> usize {
        self.samples.iter().map(|&v| v as usize).sum()
    }
}

/// Axis-aligned pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub struct Rect {
    pub x: usize,
    pub y: usize,
    pub width: usize,
    pub height: usize,
}

impl Rect {
    pub fn new(x: usize, y: usize, width: usize, height: usize) -> Self {
        Rect { x, y, width, height }
    }

    pub fn area(&self) -> usize {
        self.width * self.height
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        x >= self.x && x < self.x + self.width && y >= self.y && y < self.y + self.height
    }

    pub fn fits(&self, width: usize, height: usize) -> bool {
        self.x + self.width <= width && self.y + self.height <= height
    }
}

/// Gray-level counts of an image region.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Histogram {
    pub bins: [u32; LEVELS],
    pub total: u32,
}

pub fn histogram(img: &GrayImage, region: Option<Rect>) -> Result<Histogram> {
    let r = region.unwrap_or_else(|| img.full_rect());
    if r.area() == 0 {
        return Err(Error::invalid("histogram of an empty region"));
    }
    if !r.fits(img.width, img.height) {
        return Err(Error::invalid(format!("region {r:?} exceeds {}x{} image", img.width, img.height)));
    }
    let mut bins = [0u32; LEVELS];
    for y in r.y..r.y + r.height {
        for &v in &img.samples[y * img.width + r.x..y * img.width + r.x + r.width] {
            bins[v as usize] += 1;
        }
    }
    Ok(Histogram { bins, total: r.area() as u32 })
}

/// `round((m-1) * CDF(k))` with ties rounded up, in exact integer arithmetic.
pub fn equalization_lut(bins: &[u32; LEVELS]) -> [u8; LEVELS] {
    let total: u64 = bins.iter().map(|&b| b as u64).sum();
    let mut lut = [0u8; LEVELS];
    if total == 0 {
        return lut;
    }
    let mut cum = 0u64;
    for (k, &b) in bins.iter().enumerate() {
        cum += b as u64;
        lut[k] = ((2 * 255 * cum + total) / (2 * total)) as u8;
    }
    lut
}

fn apply_lut(img: &GrayImage, lut: &[u8; LEVELS]) -> GrayImage {
    GrayImage { width: img.width, height: img.height, samples: img.samples.iter().map(|&v| lut[v as usize]).collect() }
}

/// Global histogram equalization.
pub fn equalize_he(img: &GrayImage) -> GrayImage {
    let h = histogram(img, None).expect("whole-image region is valid");
    apply_lut(img, &equalization_lut(&h.bins))
}

/// Contrast-limited adaptive histogram equalization parameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClaheParams {
    /// Tile grid as (columns, rows).
    pub tiles: (usize, usize),
    /// Bin ceiling as a multiple of the uniform bin height `tile_pixels / 256`.
    pub clip_limit: f64,
}

impl Default for ClaheParams {
    fn default() -> Self {
        ClaheParams { tiles: (8, 8), clip_limit: 4.0 }
    }
}

/// Integer bin ceiling for a tile of `pixels` samples.
pub fn clip_ceiling(clip_limit: f64, pixels: usize) -> u32 {
    ((clip_limit * pixels as f64 / LEVELS as f64).floor() as u64).clamp(1, u32::MAX as u64) as u32
}

/// Clips every bin at `ceiling` and spreads the excess uniformly: each bin
/// gets `excess / 256`, and the remainder adds one count to bins `0..rem`.
pub fn clip_histogram(bins: &mut [u32; LEVELS], ceiling: u32) {
    let mut excess = 0u64;
    for b in bins.iter_mut() {
        if *b > ceiling {
            excess += (*b - ceiling) as u64;
            *b = ceiling;
        }
    }
    let inc = (excess / LEVELS as u64) as u32;
    let rem = (excess % LEVELS as u64) as usize;
    for (k, b) in bins.iter_mut().enumerate() {
        *b += inc + (k < rem) as u32;
    }
}

fn tile_bounds(extent: usize, tiles: usize) -> Vec<usize> {
    (0..=tiles).map(|i| i * extent / tiles).collect()
}

/// Locates `p` between tile centers: returns (lower tile, upper tile, weight of upper).
fn interp_position(p: usize, centers: &[f64]) -> (usize, usize, f64) {
    let p = p as f64;
    let last = centers.len() - 1;
    if p <= centers[0] {
        return (0, 0, 0.0);
    }
    if p >= centers[last] {
        return (last, last, 0.0);
    }
    let i = centers.windows(2).position(|w| p >= w[0] && p < w[1]).expect("p lies between two centers");
    (i, i + 1, (p - centers[i]) / (centers[i + 1] - centers[i]))
}

pub(crate) fn round_half_up(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

/// Contrast-limited adaptive histogram equalization.
///
/// Each tile's histogram is clipped (see [`clip_histogram`]) and equalized;
/// output pixels blend the mappings of the four nearest tile centers
/// bilinearly, replicating edge tiles.
pub fn clahe(img: &GrayImage, params: ClaheParams) -> Result<GrayImage> {
    let (tx, ty) = params.tiles;
    if tx == 0 || ty == 0 || tx > img.width || ty > img.height {
        return Err(Error::config(format!("tile grid {tx}x{ty} does not fit {}x{}", img.width, img.height)));
    }
    if img.width / tx < 2 || img.height / ty < 2 {
        return Err(Error::config(format!(
            "tile grid {tx}x{ty} gives tiles smaller than 2x2 on a {}x{} image",
            img.width, img.height
        )));
    }
    if params.clip_limit.is_nan() || params.clip_limit < 1.0 {
        return Err(Error::config("clip limit must be >= 1"));
    }
    let xb = tile_bounds(img.width, tx);
    let yb = tile_bounds(img.height, ty);
    let mut luts = Vec::with_capacity(tx * ty);
    for j in 0..ty {
        for i in 0..tx {
            let rect = Rect::new(xb[i], yb[j], xb[i + 1] - xb[i], yb[j + 1] - yb[j]);
            let mut h = histogram(img, Some(rect))?;
            clip_histogram(&mut h.bins, clip_ceiling(params.clip_limit, rect.area()));
            luts.push(equalization_lut(&h.bins));
        }
    }
    let centers = |b: &[usize]| -> Vec<f64> { b.windows(2).map(|w| (w[0] + w[1] - 1) as f64 / 2.0).collect() };
    let cx = centers(&xb);
    let cy = centers(&yb);
    let xpos: Vec<_> = (0..img.width).map(|x| interp_position(x, &cx)).collect();
    let mut out = img.clone();
    for y in 0..img.height {
        let (j0, j1, wy) = interp_position(y, &cy);
        for (x, &(i0, i1, wx)) in xpos.iter().enumerate() {
            let v = img.get(x, y) as usize;
            let l = |i: usize, j: usize| luts[j * tx + i][v] as f64;
            let top = (1.0 - wx) * l(i0, j0) + wx * l(i1, j0);
            let bottom = (1.0 - wx) * l(i0, j1) + wx * l(i1, j1);
            out.set(x, y, round_half_up((1.0 - wy) * top + wy * bottom));
        }
    }
    Ok(out)
}

/// Bilinear sample with edge clamping; `None` outside the frame.
fn sample_bilinear(img: &GrayImage, sx: f64, sy: f64) -> Option<f64> {
    const SLACK: f64 = 1e-6;
    let (w, h) = ((img.width - 1) as f64, (img.height - 1) as f64);
    if sx < -SLACK || sy < -SLACK || sx > w + SLACK || sy > h + SLACK {
        return None;
    }
    Some(sample_clamped(img.width, img.height, |x, y| img.get(x, y) as f64, sx, sy))
}

fn sample_clamped(width: usize, height: usize, at: impl Fn(usize, usize) -> f64, sx: f64, sy: f64) -> f64 {
    let sx = sx.clamp(0.0, (width - 1) as f64);
    let sy = sy.clamp(0.0, (height - 1) as f64);
    let (x0, y0) = (sx.floor() as usize, sy.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
    let (fx, fy) = (sx - x0 as f64, sy - y0 as f64);
    let top = at(x0, y0) * (1.0 - fx) + at(x1, y0) * fx;
    let bottom = at(x0, y1) * (1.0 - fx) + at(x1, y1) * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Counter-clockwise rotation (as displayed) about the image center with
/// bilinear sampling; pixels whose source falls outside the frame get `fill`.
pub fn rotate(img: &GrayImage, degrees: f64, fill: u8) -> Result<GrayImage> {
    if !(degrees.abs() <= 360.0) {
        return Err(Error::invalid(format!("rotation of {degrees} degrees is out of range")));
    }
    if degrees == 0.0 {
        return Ok(img.clone());
    }
    let (sin, cos) = degrees.to_radians().sin_cos();
    let cx = (img.width - 1) as f64 / 2.0;
    let cy = (img.height - 1) as f64 / 2.0;
    Ok(GrayImage::from_fn(img.width, img.height, |x, y| {
        let (dx, dy) = (x as f64 - cx, y as f64 - cy);
        let sx = cx + dx * cos - dy * sin;
        let sy = cy + dx * sin + dy * cos;
        sample_bilinear(img, sx, sy).map(round_half_up).unwrap_or(fill)
    }))
}

/// Half-pixel-center source coordinate of destination index `d`.
fn source_coord(d: usize, src: usize, dst: usize) -> f64 {
    (d as f64 + 0.5) * src as f64 / dst as f64 - 0.5
}

/// Bilinear resampling of arbitrary real samples (row-major `width x height`).
pub fn resize_values(values: &[f64], width: usize, height: usize, new_w: usize, new_h: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(new_w * new_h);
    for y in 0..new_h {
        let sy = source_coord(y, height, new_h);
        for x in 0..new_w {
            let sx = source_coord(x, width, new_w);
            out.push(sample_clamped(width, height, |i, j| values[j * width + i], sx, sy));
        }
    }
    out
}

/// Bilinear resize with half-pixel-center coordinates and round-half-up.
pub fn resize_bilinear(img: &GrayImage, new_w: usize, new_h: usize) -> Result<GrayImage> {
    if new_w == 0 || new_h == 0 {
        return Err(Error::invalid("resize target must be at least 1x1"));
    }
    if (new_w, new_h) == (img.width, img.height) {
        return Ok(img.clone());
    }
    let values: Vec<f64> = img.samples.iter().map(|&v| v as f64).collect();
    let samples = resize_values(&values, img.width, img.height, new_w, new_h)
        .into_iter()
        .map(round_half_up)
        .collect();
    GrayImage::new(new_w, new_h, samples)
}

/// Keeps pixels where the mask is set and zeroes the rest.
pub fn apply_mask(img: &GrayImage, mask: &MaskImage) -> Result<GrayImage> {
    if (img.width, img.height) != (mask.width, mask.height) {
        return Err(Error::invalid(format!(
            "mask is {}x{}, image is {}x{}",
            mask.width, mask.height, img.width, img.height
        )));
    }
    let samples = img.samples.iter().zip(&mask.samples).map(|(&v, &m)| v * m).collect();
    GrayImage::new(img.width, img.height, samples)
}

/// Average hash of arbitrary-precision samples: resize to `side x side`,
/// then set a bit wherever the value is strictly above the mean.
pub fn average_hash_values<S: Copy + Into<f64>>(samples: &[S], width: usize, height: usize, side: usize) -> Result<Vec<bool>> {
    if side < 2 {
        return Err(Error::invalid("hash side must be >= 2"));
    }
    if samples.len() != width * height || samples.is_empty() {
        return Err(Error::invalid("sample count does not match extents"));
    }
    let values: Vec<f64> = samples.iter().map(|&s| s.into()).collect();
    let small = resize_values(&values, width, height, side, side);
    let mean = small.iter().sum::<f64>() / small.len() as f64;
    Ok(small.iter().map(|&v| v > mean).collect())
}

pub fn average_hash(img: &GrayImage, side: usize) -> Result<Vec<bool>> {
    average_hash_values(&img.samples, img.width, img.height, side)
}

/// 8-bit RGB raster.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbImage {
    pub width: usize,
    pub height: usize,
    /// Interleaved RGB, row-major.
    pub samples: Vec<u8>,
}

impl RgbImage {
    pub fn pixel(&self, x: usize, y: usize) -> [u8; 3] {
        let i = 3 * (y * self.width + x);
        [self.samples[i], self.samples[i + 1], self.samples[i + 2]]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn img(w: usize, h: usize, s: &[u8]) -> GrayImage {
        GrayImage::new(w, h, s.to_vec()).unwrap()
    }

    #[test]
    fn histogram_counts() {
        let h = histogram(&GrayImage::filled(2, 2, 0), None).unwrap();
        assert_eq!(h.bins[0], 4);
        assert_eq!(h.total, 4);
        let h = histogram(&img(2, 2, &[0, 1, 2, 3]), None).unwrap();
        assert_eq!(&h.bins[..5], &[1, 1, 1, 1, 0]);
    }

    #[test]
    fn histogram_rejects_bad_regions() {
        let i = GrayImage::filled(4, 4, 1);
        assert!(histogram(&i, Some(Rect::new(0, 0, 0, 2))).is_err());
        assert!(histogram(&i, Some(Rect::new(3, 3, 2, 2))).is_err());
        let h = histogram(&i, Some(Rect::new(1, 1, 2, 3))).unwrap();
        assert_eq!(h.bins[1], 6);
    }

    #[test]
    fn he_on_constant_image_maps_to_white() {
        let out = equalize_he(&GrayImage::filled(3, 5, 5));
        assert!(out.samples().iter().all(|&v| v == 255));
    }

    #[test]
    fn he_quarter_levels() {
        let out = equalize_he(&img(2, 2, &[0, 1, 2, 3]));
        assert_eq!(out.samples(), &[64, 128, 191, 255]);
    }

    #[test]
    fn clip_spreads_excess_from_bin_zero() {
        let mut bins = [0u32; LEVELS];
        bins[10] = 1000;
        clip_histogram(&mut bins, 100);
        // excess 900 = 3 * 256 + 132
        assert_eq!(bins[10], 100 + 3 + 1);
        assert_eq!(bins[0], 4);
        assert_eq!(bins[131], 4);
        assert_eq!(bins[132], 3);
        assert_eq!(bins.iter().sum::<u32>(), 1000);
    }

    #[test]
    fn clahe_rejects_tiny_tiles() {
        let i = GrayImage::filled(4, 4, 9);
        assert!(matches!(clahe(&i, ClaheParams { tiles: (4, 1), clip_limit: 2.0 }), Err(Error::Config(_))));
        assert!(matches!(clahe(&i, ClaheParams { tiles: (2, 2), clip_limit: 0.5 }), Err(Error::Config(_))));
    }

    #[test]
    fn clahe_constant_image_is_constant() {
        let i = GrayImage::filled(16, 16, 77);
        let out = clahe(&i, ClaheParams { tiles: (4, 4), clip_limit: 2.0 }).unwrap();
        let first = out.samples()[0];
        assert!(out.samples().iter().all(|&v| v == first));
    }

    #[test]
    fn rotation_identities() {
        let i = GrayImage::from_fn(7, 5, |x, y| (x * 30 + y * 7) as u8);
        assert_eq!(rotate(&i, 0.0, 0).unwrap(), i);
        let full = rotate(&i, 360.0, 0).unwrap();
        for (a, b) in full.samples().iter().zip(i.samples()) {
            assert!((*a as i32 - *b as i32).abs() <= 1);
        }
        assert!(rotate(&i, 400.0, 0).is_err());
        assert!(rotate(&i, f64::NAN, 0).is_err());
    }

    #[test]
    fn quarter_turn_is_a_permutation() {
        let i = img(3, 3, &[1, 2, 3, 4, 5, 6, 7, 8, 9]);
        let r = rotate(&i, 90.0, 0).unwrap();
        // Counter-clockwise: the right column becomes the top row.
        let want = [3, 6, 9, 2, 5, 8, 1, 4, 7];
        for (a, b) in r.samples().iter().zip(want) {
            assert!((*a as i32 - b).abs() <= 1, "{:?}", r.samples());
        }
    }

    #[test]
    fn resize_identity_and_constant() {
        let i = GrayImage::from_fn(5, 4, |x, y| (x * y * 9) as u8);
        assert_eq!(resize_bilinear(&i, 5, 4).unwrap(), i);
        let c = resize_bilinear(&GrayImage::filled(3, 7, 42), 11, 2).unwrap();
        assert!(c.samples().iter().all(|&v| v == 42));
    }

    #[test]
    fn resize_two_to_three() {
        let out = resize_bilinear(&img(2, 2, &[0, 2, 2, 4]), 3, 3).unwrap();
        assert_eq!(out.samples(), &[0, 1, 2, 1, 2, 3, 2, 3, 4]);
    }

    #[test]
    fn mask_cases() {
        let i = GrayImage::from_fn(4, 4, |x, y| (1 + x + 4 * y) as u8);
        assert_eq!(apply_mask(&i, &MaskImage::filled(4, 4, true)).unwrap(), i);
        assert!(apply_mask(&i, &MaskImage::filled(4, 4, false)).unwrap().samples().iter().all(|&v| v == 0));
        let checker = MaskImage::from_fn(4, 4, |x, y| (x + y) % 2 == 0);
        let out = apply_mask(&i, &checker).unwrap();
        for y in 0..4 {
            for x in 0..4 {
                let want = if (x + y) % 2 == 0 { i.get(x, y) } else { 0 };
                assert_eq!(out.get(x, y), want);
            }
        }
        assert!(apply_mask(&i, &MaskImage::filled(3, 4, true)).is_err());
    }

    #[test]
    fn hash_cases() {
        assert!(average_hash(&GrayImage::filled(16, 16, 90), 8).unwrap().iter().all(|&b| !b));
        let halves = GrayImage::from_fn(16, 16, |x, _| if x < 8 { 0 } else { 255 });
        let bits = average_hash(&halves, 8).unwrap();
        for (i, b) in bits.iter().enumerate() {
            assert_eq!(*b, i % 8 >= 4);
        }
        assert!(average_hash(&halves, 1).is_err());
    }
}
