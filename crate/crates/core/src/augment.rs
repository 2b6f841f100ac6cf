//! Training-time augmentation: flips, rotation, shift, zoom, gamma contrast
//! augmentation, multi-scale central cropping with a small-to-large
//! curriculum, and CLAHE as a contrast-enhancement baseline.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::preprocess::{
    constant_pad_plane, reflect_index, reflect_pad_plane, PadRecord, Plane, Slice2D, SIZE_MULTIPLE,
};

/// Crop sizes used for the full-scale curriculum.
pub const FULL_SCALE_CROP_SIZES: [usize; 6] = [256, 384, 480, 512, 576, 640];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub flip_prob: f64,
    /// Rotation interval in degrees.
    pub rotation_deg: [f64; 2],
    /// Maximum shift along each axis as a fraction of the image side.
    pub shift_frac: f64,
    pub zoom_range: [f64; 2],
    pub gamma_range: [f64; 2],
    pub gamma_enabled: bool,
    pub seed: u64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        AugmentConfig {
            flip_prob: 0.5,
            rotation_deg: [-10.0, 10.0],
            shift_frac: 0.10,
            zoom_range: [0.7, 1.3],
            gamma_range: [0.8, 2.0],
            gamma_enabled: true,
            seed: 0,
        }
    }
}

impl AugmentConfig {
    /// A configuration whose every transform is the identity.
    pub fn identity() -> Self {
        AugmentConfig {
            flip_prob: 0.0,
            rotation_deg: [0.0, 0.0],
            shift_frac: 0.0,
            zoom_range: [1.0, 1.0],
            gamma_range: [1.0, 1.0],
            gamma_enabled: true,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return bad(format!("flip_prob {} outside [0, 1]", self.flip_prob));
        }
        for (name, r) in [
            ("rotation_deg", self.rotation_deg),
            ("zoom_range", self.zoom_range),
            ("gamma_range", self.gamma_range),
        ] {
            if !(r[0].is_finite() && r[1].is_finite() && r[0] <= r[1]) {
                return bad(format!("{name} {r:?} is not a nonempty interval"));
            }
        }
        if self.zoom_range[0] <= 0.0 || self.gamma_range[0] <= 0.0 {
            return bad("zoom and gamma lower bounds must be positive".into());
        }
        if !(self.shift_frac.is_finite() && self.shift_frac >= 0.0) {
            return bad(format!("shift_frac {} must be >= 0", self.shift_frac));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumStage {
    pub crop_size: usize,
    pub epochs: usize,
}

/// Ordered crop-size stages, small to large.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CurriculumSchedule {
    pub stages: Vec<CurriculumStage>,
}

impl CurriculumSchedule {
    /// Equal epoch budget per size, ascending.
    pub fn equal(sizes: &[usize], epochs_per_stage: usize) -> Self {
        CurriculumSchedule {
            stages: sizes
                .iter()
                .map(|&crop_size| CurriculumStage {
                    crop_size,
                    epochs: epochs_per_stage,
                })
                .collect(),
        }
    }

    pub fn single(crop_size: usize, epochs: usize) -> Self {
        Self::equal(&[crop_size], epochs)
    }

    pub fn validate(&self) -> Result<()> {
        if self.stages.is_empty() {
            return Err(Error::Config("curriculum schedule has no stages".into()));
        }
        for s in &self.stages {
            if s.crop_size == 0 || s.crop_size % SIZE_MULTIPLE != 0 {
                return Err(Error::Config(format!(
                    "crop size {} is not a positive multiple of {SIZE_MULTIPLE}",
                    s.crop_size
                )));
            }
        }
        if self
            .stages
            .windows(2)
            .any(|w| w[1].crop_size < w[0].crop_size)
        {
            return Err(Error::Config(
                "curriculum crop sizes must be non-decreasing".into(),
            ));
        }
        Ok(())
    }

    pub fn total_epochs(&self) -> usize {
        self.stages.iter().map(|s| s.epochs).sum()
    }
}

impl Default for CurriculumSchedule {
    fn default() -> Self {
        CurriculumSchedule::equal(&FULL_SCALE_CROP_SIZES, 20)
    }
}

/// Crop size of the stage whose cumulative epoch range contains `epoch`.
pub fn curriculum_size_for_epoch(sched: &CurriculumSchedule, epoch: usize) -> Result<usize> {
    let last = sched
        .stages
        .last()
        .ok_or_else(|| Error::Config("curriculum schedule has no stages".into()))?;
    let mut end = 0;
    for s in &sched.stages {
        end += s.epochs;
        if epoch < end {
            return Ok(s.crop_size);
        }
    }
    Ok(last.crop_size)
}

/// Pointwise power map on a value already in [0, 1].
#[inline]
pub fn gamma_map(f: f64, gamma: f64) -> f64 {
    f.powf(1.0 / gamma)
}

/// Applies `G = F^(1/gamma)` in the slice's min-max [0, 1] frame, then maps
/// back to the original intensity range. Constant slices are unchanged.
pub fn gamma_correct(s: &Slice2D, gamma: f64) -> Result<Slice2D> {
    if !(gamma.is_finite() && gamma > 0.0) {
        return Err(Error::Parameter(format!("gamma must be > 0, got {gamma}")));
    }
    let mut out = s.clone();
    gamma_in_place(&mut out.pixels, gamma);
    Ok(out)
}

fn gamma_in_place(pixels: &mut [f32], gamma: f64) {
    if gamma == 1.0 {
        return;
    }
    let (lo, hi) = min_max(pixels);
    let range = hi as f64 - lo as f64;
    if range <= 0.0 {
        return;
    }
    for p in pixels.iter_mut() {
        let f = ((*p as f64 - lo as f64) / range).clamp(0.0, 1.0);
        *p = (lo as f64 + gamma_map(f, gamma) * range) as f32;
    }
}

fn min_max(p: &[f32]) -> (f32, f32) {
    p.iter()
        .fold((f32::INFINITY, f32::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        })
}

pub fn flip_horizontal<T: Copy>(p: &Plane<T>) -> Plane<T> {
    let mut data = Vec::with_capacity(p.data.len());
    for row in p.data.chunks_exact(p.width) {
        data.extend(row.iter().rev());
    }
    Plane {
        data,
        ..*p
    }
}

pub fn flip_vertical<T: Copy>(p: &Plane<T>) -> Plane<T> {
    let mut data = Vec::with_capacity(p.data.len());
    for row in p.data.chunks_exact(p.width).rev() {
        data.extend_from_slice(row);
    }
    Plane {
        data,
        ..*p
    }
}

/// Inverse affine map from output pixel to source pixel, about the image centre.
#[derive(Debug, Clone, Copy)]
struct Affine {
    // source = centre + m * (dst - centre) + offset
    m: [[f64; 2]; 2],
    offset: [f64; 2],
}

impl Affine {
    /// Rotation by `theta`, then shift by `(ty, tx)` pixels, then zoom by `zoom`
    /// about the centre; stored as the inverse map.
    fn compose(theta: f64, shift: [f64; 2], zoom: f64) -> Self {
        let (s, c) = theta.sin_cos();
        // forward: p' = z * (R (p - c) + t) + c  =>  p = R^T ((p' - c) / z - t) + c
        let inv_r = [[c, s], [-s, c]];
        let m = [
            [inv_r[0][0] / zoom, inv_r[0][1] / zoom],
            [inv_r[1][0] / zoom, inv_r[1][1] / zoom],
        ];
        let offset = [
            -(inv_r[0][0] * shift[0] + inv_r[0][1] * shift[1]),
            -(inv_r[1][0] * shift[0] + inv_r[1][1] * shift[1]),
        ];
        Affine { m, offset }
    }

    fn is_identity(&self) -> bool {
        self.m == [[1.0, 0.0], [0.0, 1.0]] && self.offset == [0.0, 0.0]
    }

    #[inline]
    fn source(&self, y: f64, x: f64, cy: f64, cx: f64) -> (f64, f64) {
        let dy = y - cy;
        let dx = x - cx;
        (
            cy + self.m[0][0] * dy + self.m[0][1] * dx + self.offset[0],
            cx + self.m[1][0] * dy + self.m[1][1] * dx + self.offset[1],
        )
    }
}

fn warp_bilinear(p: &Plane<f32>, a: &Affine) -> Plane<f32> {
    let (cy, cx) = ((p.height as f64 - 1.0) / 2.0, (p.width as f64 - 1.0) / 2.0);
    let mut data = Vec::with_capacity(p.data.len());
    for y in 0..p.height {
        for x in 0..p.width {
            let (sy, sx) = a.source(y as f64, x as f64, cy, cx);
            let (y0, x0) = (sy.floor(), sx.floor());
            let (fy, fx) = (sy - y0, sx - x0);
            let (y0, x0) = (y0 as isize, x0 as isize);
            let r0 = reflect_index(y0, p.height) * p.width;
            let r1 = reflect_index(y0 + 1, p.height) * p.width;
            let c0 = reflect_index(x0, p.width);
            let c1 = reflect_index(x0 + 1, p.width);
            let v = (1.0 - fy) * ((1.0 - fx) * p.data[r0 + c0] as f64 + fx * p.data[r0 + c1] as f64)
                + fy * ((1.0 - fx) * p.data[r1 + c0] as f64 + fx * p.data[r1 + c1] as f64);
            data.push(v as f32);
        }
    }
    Plane { data, ..*p }
}

fn warp_nearest<T: Copy>(p: &Plane<T>, a: &Affine) -> Plane<T> {
    let (cy, cx) = ((p.height as f64 - 1.0) / 2.0, (p.width as f64 - 1.0) / 2.0);
    let mut data = Vec::with_capacity(p.data.len());
    for y in 0..p.height {
        for x in 0..p.width {
            let (sy, sx) = a.source(y as f64, x as f64, cy, cx);
            let ry = reflect_index(sy.round() as isize, p.height);
            let rx = reflect_index(sx.round() as isize, p.width);
            data.push(p.data[ry * p.width + rx]);
        }
    }
    Plane { data, ..*p }
}

#[inline]
fn uniform<R: Rng + ?Sized>(rng: &mut R, range: [f64; 2]) -> f64 {
    range[0] + (range[1] - range[0]) * rng.gen::<f64>()
}

/// Parameters drawn for one augmentation, in draw order.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentDraw {
    pub flip_h: bool,
    pub flip_v: bool,
    pub rotation_deg: f64,
    /// (dy, dx) as fractions of the image side.
    pub shift: [f64; 2],
    pub zoom: f64,
    pub gamma: f64,
}

impl AugmentDraw {
    /// Draws every parameter in the fixed order flip-H, flip-V, rotation,
    /// shift, zoom, gamma. All draws happen even for disabled transforms.
    pub fn sample<R: Rng + ?Sized>(cfg: &AugmentConfig, rng: &mut R) -> Self {
        let flip_h = rng.gen::<f64>() < cfg.flip_prob;
        let flip_v = rng.gen::<f64>() < cfg.flip_prob;
        let rotation_deg = uniform(rng, cfg.rotation_deg);
        let shift = [
            uniform(rng, [-cfg.shift_frac, cfg.shift_frac]),
            uniform(rng, [-cfg.shift_frac, cfg.shift_frac]),
        ];
        let zoom = uniform(rng, cfg.zoom_range);
        let gamma = uniform(rng, cfg.gamma_range);
        AugmentDraw {
            flip_h,
            flip_v,
            rotation_deg,
            shift,
            zoom,
            gamma: if cfg.gamma_enabled { gamma } else { 1.0 },
        }
    }
}

/// Applies an explicit draw. Geometry hits image and mask alike (bilinear vs
/// nearest); gamma touches the image only.
pub fn apply_augment(s: &Slice2D, d: &AugmentDraw) -> Slice2D {
    let mut img = s.image();
    let mut mask = s.mask_plane();
    if d.flip_h {
        img = flip_horizontal(&img);
        mask = mask.map(|m| flip_horizontal(&m));
    }
    if d.flip_v {
        img = flip_vertical(&img);
        mask = mask.map(|m| flip_vertical(&m));
    }
    let affine = Affine::compose(
        d.rotation_deg.to_radians(),
        [d.shift[0] * s.height as f64, d.shift[1] * s.width as f64],
        d.zoom,
    );
    if !affine.is_identity() {
        img = warp_bilinear(&img, &affine);
        mask = mask.map(|m| warp_nearest(&m, &affine));
    }
    gamma_in_place(&mut img.data, d.gamma);
    Slice2D {
        pixels: img.data,
        mask: mask.map(|m| m.data),
        ..s.clone()
    }
}

/// Draws from `rng` and augments; the same seed reproduces the same output.
pub fn random_augment<R: Rng + ?Sized>(s: &Slice2D, cfg: &AugmentConfig, rng: &mut R) -> Slice2D {
    let d = AugmentDraw::sample(cfg, rng);
    apply_augment(s, &d)
}

/// Central `size`x`size` window; axes shorter than `size` are mirror padded.
/// Mask padding is background, as in [`crate::preprocess::pad_slice`].
pub fn center_crop_or_mirror_pad(s: &Slice2D, size: usize) -> Result<Slice2D> {
    if size == 0 {
        return Err(Error::Parameter("crop size must be positive".into()));
    }
    let (h, w) = (s.height, s.width);
    let pad = PadRecord::split(size.saturating_sub(h), size.saturating_sub(w));
    let img = reflect_pad_plane(&s.image(), pad)?;
    let mask = s.mask_plane().map(|m| constant_pad_plane(&m, pad, 0u8));
    let top = (img.height - size) / 2;
    let left = (img.width - size) / 2;
    let img = img.window(top, left, size, size);
    let mask = mask.map(|m| m.window(top, left, size, size).data);
    Ok(Slice2D {
        height: size,
        width: size,
        pixels: img.data,
        mask,
        pad,
        ..s.clone()
    })
}

/// Contrast-limited adaptive histogram equalization.
///
/// Pixels are binned into 256 levels over the slice's min-max range. Each
/// tile's histogram is clipped at `clip_limit` times the uniform bin height,
/// the excess is spread evenly over all bins, and the tile's mapping is its
/// normalized CDF. Pixels blend the four nearest tile mappings bilinearly.
/// `clip_limit = f64::INFINITY` disables clipping.
pub fn clahe(s: &Slice2D, tiles: (usize, usize), clip_limit: f64) -> Result<Slice2D> {
    const BINS: usize = 256;
    let (ty, tx) = tiles;
    if ty == 0 || tx == 0 || ty > s.height || tx > s.width {
        return Err(Error::Parameter(format!(
            "tile grid {tiles:?} does not fit a {}x{} slice",
            s.height, s.width
        )));
    }
    if !(clip_limit > 0.0) {
        return Err(Error::Parameter(format!("clip limit {clip_limit} must be > 0")));
    }
    let (lo, hi) = min_max(&s.pixels);
    let range = hi as f64 - lo as f64;
    if range <= 0.0 {
        return Ok(s.clone());
    }
    let bin_of = |v: f32| -> usize {
        (((v as f64 - lo as f64) / range * (BINS - 1) as f64).round() as usize).min(BINS - 1)
    };
    let bins: Vec<usize> = s.pixels.iter().map(|&v| bin_of(v)).collect();

    let bounds = |n: usize, k: usize, i: usize| (i * n / k, (i + 1) * n / k);
    let mut maps = vec![[0f64; BINS]; ty * tx];
    for iy in 0..ty {
        let (y0, y1) = bounds(s.height, ty, iy);
        for ix in 0..tx {
            let (x0, x1) = bounds(s.width, tx, ix);
            let mut hist = [0f64; BINS];
            for y in y0..y1 {
                for x in x0..x1 {
                    hist[bins[y * s.width + x]] += 1.0;
                }
            }
            let count = ((y1 - y0) * (x1 - x0)) as f64;
            if clip_limit.is_finite() {
                let limit = clip_limit * count / BINS as f64;
                let mut excess = 0.0;
                for h in hist.iter_mut() {
                    if *h > limit {
                        excess += *h - limit;
                        *h = limit;
                    }
                }
                let add = excess / BINS as f64;
                hist.iter_mut().for_each(|h| *h += add);
            }
            let map = &mut maps[iy * tx + ix];
            let mut acc = 0.0;
            for (b, h) in hist.iter().enumerate() {
                acc += h;
                map[b] = acc / count;
            }
        }
    }

    // tile centres along one axis, and the bracketing pair + weight for a coordinate
    let centre = |n: usize, k: usize, i: usize| {
        let (a, b) = bounds(n, k, i);
        (a + b - 1) as f64 / 2.0
    };
    let bracket = |v: f64, n: usize, k: usize| -> (usize, usize, f64) {
        if k == 1 || v <= centre(n, k, 0) {
            return (0, 0, 0.0);
        }
        if v >= centre(n, k, k - 1) {
            return (k - 1, k - 1, 0.0);
        }
        let mut i = 0;
        while centre(n, k, i + 1) < v {
            i += 1;
        }
        let (c0, c1) = (centre(n, k, i), centre(n, k, i + 1));
        (i, i + 1, (v - c0) / (c1 - c0))
    };

    let mut out = s.clone();
    for y in 0..s.height {
        let (ya, yb, wy) = bracket(y as f64, s.height, ty);
        for x in 0..s.width {
            let (xa, xb, wx) = bracket(x as f64, s.width, tx);
            let b = bins[y * s.width + x];
            let m = |iy: usize, ix: usize| maps[iy * tx + ix][b];
            let level = (1.0 - wy) * ((1.0 - wx) * m(ya, xa) + wx * m(ya, xb))
                + wy * ((1.0 - wx) * m(yb, xa) + wx * m(yb, xb));
            out.pixels[y * s.width + x] = (lo as f64 + level.clamp(0.0, 1.0) * range) as f32;
        }
    }
    Ok(out)
}
