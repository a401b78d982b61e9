//! Image transforms: light positive views for contrastive training and the
//! hard transform bank used to synthesize pseudo-anomalies.
//!
//! Light views perturb appearance while preserving semantics (color jitter,
//! grayscale, gentle crops).  Hard transforms deliberately destroy structure
//! (jigsaw shuffles, extreme crops, mixup with other samples, ...) so the
//! result no longer looks like a normal sample.  Every function is a pure,
//! seeded map: identical `(input, spec, seed)` triples produce bitwise
//! identical outputs, which makes crafting and training reproducible and
//! safe to parallelize.
//!
//! All geometric operations use bilinear interpolation with reflect padding
//! so borders do not leak a trivial cue.

use crate::error::{Error, Result};
use crate::image::ImageBatch;
use crate::rng::stream_rng;
use ndarray::Array3;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Beta, Distribution, Normal};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Fill value used by cutout occlusion.
pub const CUTOUT_FILL: f64 = 0.5;

/// Identifiers of the hard transforms.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransformId {
    Jigsaw,
    RandomErasing,
    Cutpaste,
    Rotation,
    ExtremeBlur,
    IntenseCrop,
    NoiseInjection,
    ExtremeCrop,
    Mixup,
    Cutout,
    Cutmix,
    Elastic,
}

impl TransformId {
    pub const ALL: [TransformId; 12] = [
        TransformId::Jigsaw,
        TransformId::RandomErasing,
        TransformId::Cutpaste,
        TransformId::Rotation,
        TransformId::ExtremeBlur,
        TransformId::IntenseCrop,
        TransformId::NoiseInjection,
        TransformId::ExtremeCrop,
        TransformId::Mixup,
        TransformId::Cutout,
        TransformId::Cutmix,
        TransformId::Elastic,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            TransformId::Jigsaw => "jigsaw",
            TransformId::RandomErasing => "random_erasing",
            TransformId::Cutpaste => "cutpaste",
            TransformId::Rotation => "rotation",
            TransformId::ExtremeBlur => "extreme_blur",
            TransformId::IntenseCrop => "intense_crop",
            TransformId::NoiseInjection => "noise_injection",
            TransformId::ExtremeCrop => "extreme_crop",
            TransformId::Mixup => "mixup",
            TransformId::Cutout => "cutout",
            TransformId::Cutmix => "cutmix",
            TransformId::Elastic => "elastic",
        }
    }
}

/// A hard transform plus its numeric parameters.
///
/// Parameter keys per id (all optional; defaults below):
/// - `jigsaw`: `grid` (2)
/// - `random_erasing`: `area_min` (0.10), `area_max` (0.50),
///   `aspect_min` (0.5), `aspect_max` (2.0)
/// - `cutpaste`: `side_min` (0.10), `side_max` (0.50) — fraction of width
/// - `rotation`: `max_degrees` (90)
/// - `extreme_blur`: `sigma` (2.5)
/// - `intense_crop`: `area_min` (0.50), `area_max` (0.80)
/// - `noise_injection`: `std` (0.1)
/// - `extreme_crop`: `area_min` (0.40), `area_max` (0.60) — centered
/// - `mixup`: `alpha` (0.1) — Beta(alpha, alpha) blending
/// - `cutout`: `side` (0.25) — fraction of width, constant fill
/// - `cutmix`: `area` (0.20) — fraction of image area taken from a donor
/// - `elastic`: `displacement` (4.0 at 32 px, scaled with width),
///   `smooth_divisor` (8.0) — smoothing sigma = width / smooth_divisor
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransformSpec {
    pub id: TransformId,
    #[serde(default)]
    pub params: BTreeMap<String, f64>,
}

impl TransformSpec {
    pub fn new(id: TransformId) -> Self {
        Self {
            id,
            params: BTreeMap::new(),
        }
    }

    fn param(&self, key: &str, default: f64) -> f64 {
        self.params.get(key).copied().unwrap_or(default)
    }

    /// Check that parameters stay inside their documented ranges.
    pub fn validate(&self) -> Result<()> {
        let ensure = |ok: bool, msg: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidArgument(format!(
                    "transform {}: {msg}",
                    self.id.name()
                )))
            }
        };
        match self.id {
            TransformId::Jigsaw => ensure(self.param("grid", 2.0) == 2.0, "grid must be 2")?,
            TransformId::RandomErasing => {
                let lo = self.param("area_min", 0.10);
                let hi = self.param("area_max", 0.50);
                ensure(0.0 < lo && lo <= hi && hi <= 1.0, "area range invalid")?;
                let alo = self.param("aspect_min", 0.5);
                let ahi = self.param("aspect_max", 2.0);
                ensure(0.0 < alo && alo <= ahi, "aspect range invalid")?;
            }
            TransformId::Cutpaste => {
                let lo = self.param("side_min", 0.10);
                let hi = self.param("side_max", 0.50);
                ensure(0.0 < lo && lo <= hi && hi <= 1.0, "side range invalid")?;
            }
            TransformId::Rotation => {
                // 0 is allowed: it degenerates to the identity, which the
                // transform-dataset builder uses as an explicit null class.
                ensure(self.param("max_degrees", 90.0) >= 0.0, "max_degrees must be >= 0")?
            }
            TransformId::ExtremeBlur => {
                ensure(self.param("sigma", 2.5) > 0.0, "sigma must be > 0")?
            }
            TransformId::IntenseCrop => {
                let lo = self.param("area_min", 0.50);
                let hi = self.param("area_max", 0.80);
                ensure(0.0 < lo && lo <= hi && hi <= 1.0, "area range invalid")?;
            }
            TransformId::NoiseInjection => {
                ensure(self.param("std", 0.1) > 0.0, "std must be > 0")?
            }
            TransformId::ExtremeCrop => {
                let lo = self.param("area_min", 0.40);
                let hi = self.param("area_max", 0.60);
                ensure(0.0 < lo && lo <= hi && hi <= 1.0, "area range invalid")?;
            }
            TransformId::Mixup => ensure(self.param("alpha", 0.1) > 0.0, "alpha must be > 0")?,
            TransformId::Cutout => {
                let s = self.param("side", 0.25);
                ensure(0.0 < s && s <= 1.0, "side fraction invalid")?;
            }
            TransformId::Cutmix => {
                let a = self.param("area", 0.20);
                ensure(0.0 < a && a <= 1.0, "area fraction invalid")?;
            }
            TransformId::Elastic => {
                ensure(self.param("displacement", 4.0) > 0.0, "displacement must be > 0")?;
                ensure(self.param("smooth_divisor", 8.0) > 0.0, "smooth_divisor must be > 0")?;
            }
        }
        Ok(())
    }
}

/// The default bank: all twelve hard transforms with default parameters.
pub fn default_bank() -> Vec<TransformSpec> {
    TransformId::ALL.iter().map(|&id| TransformSpec::new(id)).collect()
}

/// One light (positive-view) operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum LightOp {
    /// Multiplicative brightness and mean-centered contrast jitter; factors
    /// drawn from `[1 - strength, 1 + strength]`.
    ColorJitter { brightness: f64, contrast: f64 },
    /// With probability `p`, average the channels (no-op on 1-channel input).
    RandomGrayscale { p: f64 },
    /// Crop retaining between `area_min` and `area_max` of the image area,
    /// then resize back to the original resolution.
    RandomCrop { area_min: f64, area_max: f64 },
}

/// An ordered recipe of light operations plus the seed that drives them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LightViewSpec {
    pub ops: Vec<LightOp>,
    pub seed: u64,
}

impl LightViewSpec {
    /// Jitter + grayscale + crop with conventional strengths.
    pub fn default_with_seed(seed: u64) -> Self {
        Self {
            ops: vec![
                LightOp::ColorJitter {
                    brightness: 0.4,
                    contrast: 0.4,
                },
                LightOp::RandomGrayscale { p: 0.2 },
                LightOp::RandomCrop {
                    area_min: 0.80,
                    area_max: 1.00,
                },
            ],
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        for op in &self.ops {
            match *op {
                LightOp::ColorJitter { brightness, contrast } => {
                    if !(0.0..1.0).contains(&brightness) || !(0.0..1.0).contains(&contrast) {
                        return Err(Error::InvalidArgument(
                            "color_jitter strengths must lie in [0, 1)".into(),
                        ));
                    }
                }
                LightOp::RandomGrayscale { p } => {
                    if !(0.0..=1.0).contains(&p) {
                        return Err(Error::InvalidArgument(
                            "random_grayscale p must lie in [0, 1]".into(),
                        ));
                    }
                }
                LightOp::RandomCrop { area_min, area_max } => {
                    if !(0.0 < area_min && area_min <= area_max && area_max <= 1.0) {
                        return Err(Error::InvalidArgument(
                            "random_crop area range must satisfy 0 < min <= max <= 1".into(),
                        ));
                    }
                }
            }
        }
        Ok(())
    }
}

/// What actually happened when a hard transform hit one sample; used for
/// logging and for invariant checks (e.g. the mixup blending identity).
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AppliedTransform {
    pub id: TransformId,
    /// Batch index of the donor image for mixup/cutmix.
    pub donor_index: Option<usize>,
    /// Blending coefficient for mixup.
    pub mixup_lambda: Option<f64>,
}

// ---------------------------------------------------------------------------
// geometry helpers
// ---------------------------------------------------------------------------

/// Reflect an index into `[0, n)` without repeating the border sample.
fn reflect_index(i: isize, n: usize) -> usize {
    debug_assert!(n >= 1);
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i % period;
    if i < 0 {
        i += period;
    }
    if i >= n as isize {
        (period - i) as usize
    } else {
        i as usize
    }
}

/// Bilinear sample with reflect padding at continuous position `(y, x)`.
fn sample_bilinear(img: &Array3<f64>, ch: usize, y: f64, x: f64) -> f64 {
    let (_, h, w) = img.dim();
    let y0 = y.floor();
    let x0 = x.floor();
    let fy = y - y0;
    let fx = x - x0;
    let y0 = y0 as isize;
    let x0 = x0 as isize;
    let ya = reflect_index(y0, h);
    let yb = reflect_index(y0 + 1, h);
    let xa = reflect_index(x0, w);
    let xb = reflect_index(x0 + 1, w);
    let v00 = img[[ch, ya, xa]];
    let v01 = img[[ch, ya, xb]];
    let v10 = img[[ch, yb, xa]];
    let v11 = img[[ch, yb, xb]];
    v00 * (1.0 - fy) * (1.0 - fx) + v01 * (1.0 - fy) * fx + v10 * fy * (1.0 - fx) + v11 * fy * fx
}

/// Build an output image by pulling each output pixel from a mapped input
/// position (inverse warping).
fn warp(img: &Array3<f64>, map: impl Fn(f64, f64) -> (f64, f64)) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let mut out = Array3::zeros((c, h, w));
    for oy in 0..h {
        for ox in 0..w {
            let (iy, ix) = map(oy as f64, ox as f64);
            for chn in 0..c {
                out[[chn, oy, ox]] = sample_bilinear(img, chn, iy, ix);
            }
        }
    }
    out
}

/// Bilinear resize of a full image to a new resolution.
pub(crate) fn resize_bilinear(img: &Array3<f64>, out_h: usize, out_w: usize) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let sy = h as f64 / out_h as f64;
    let sx = w as f64 / out_w as f64;
    let mut out = Array3::zeros((c, out_h, out_w));
    for oy in 0..out_h {
        for ox in 0..out_w {
            let iy = (oy as f64 + 0.5) * sy - 0.5;
            let ix = (ox as f64 + 0.5) * sx - 0.5;
            for chn in 0..c {
                out[[chn, oy, ox]] = sample_bilinear(img, chn, iy, ix);
            }
        }
    }
    out
}

/// Resize a rectangular window of the input to fill the full resolution.
/// `(y0, x0, ch_, cw)` is the window in pixels.
fn crop_resize(img: &Array3<f64>, y0: usize, x0: usize, ch_: usize, cw: usize) -> Array3<f64> {
    let (_, h, w) = img.dim();
    let sy = ch_ as f64 / h as f64;
    let sx = cw as f64 / w as f64;
    warp(img, |oy, ox| {
        (
            y0 as f64 + (oy + 0.5) * sy - 0.5,
            x0 as f64 + (ox + 0.5) * sx - 0.5,
        )
    })
}

/// Separable Gaussian blur with reflect padding; kernel truncated at 3 sigma.
fn gaussian_blur(img: &Array3<f64>, sigma: f64) -> Array3<f64> {
    let radius = (3.0 * sigma).ceil().max(1.0) as usize;
    let mut kernel = Vec::with_capacity(2 * radius + 1);
    let mut sum = 0.0;
    for i in 0..=2 * radius {
        let d = i as f64 - radius as f64;
        let v = (-0.5 * (d / sigma) * (d / sigma)).exp();
        kernel.push(v);
        sum += v;
    }
    for v in &mut kernel {
        *v /= sum;
    }

    let (c, h, w) = img.dim();
    let mut tmp = Array3::zeros((c, h, w));
    for chn in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sx = reflect_index(x as isize + k as isize - radius as isize, w);
                    acc += kv * img[[chn, y, sx]];
                }
                tmp[[chn, y, x]] = acc;
            }
        }
    }
    let mut out = Array3::zeros((c, h, w));
    for chn in 0..c {
        for y in 0..h {
            for x in 0..w {
                let mut acc = 0.0;
                for (k, kv) in kernel.iter().enumerate() {
                    let sy = reflect_index(y as isize + k as isize - radius as isize, h);
                    acc += kv * tmp[[chn, sy, x]];
                }
                out[[chn, y, x]] = acc;
            }
        }
    }
    out
}

fn clamp01(img: &mut Array3<f64>) {
    for v in img.iter_mut() {
        *v = v.clamp(0.0, 1.0);
    }
}

// ---------------------------------------------------------------------------
// hard transforms (single image)
// ---------------------------------------------------------------------------

/// Draw a crop window of the given area fraction; `centered` pins it to the
/// image center, otherwise the position is uniform.
fn draw_crop_window(
    rng: &mut ChaCha8Rng,
    h: usize,
    w: usize,
    area_min: f64,
    area_max: f64,
    centered: bool,
) -> (usize, usize, usize, usize) {
    let frac = rng.gen_range(area_min..=area_max);
    let scale = frac.sqrt();
    let ch_ = ((h as f64 * scale).round() as usize).clamp(1, h);
    let cw = ((w as f64 * scale).round() as usize).clamp(1, w);
    let (y0, x0) = if centered {
        ((h - ch_) / 2, (w - cw) / 2)
    } else {
        (rng.gen_range(0..=h - ch_), rng.gen_range(0..=w - cw))
    };
    (y0, x0, ch_, cw)
}

fn apply_jigsaw(img: &Array3<f64>, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let h2 = h / 2;
    let w2 = w / 2;
    // Quadrant origins in reading order; odd trailing row/column stays put.
    let origins = [(0, 0), (0, w2), (h2, 0), (h2, w2)];
    // Uniform non-identity permutation of the four tiles.
    let mut perm = [0usize, 1, 2, 3];
    loop {
        for i in (1..4).rev() {
            let j = rng.gen_range(0..=i);
            perm.swap(i, j);
        }
        if perm != [0, 1, 2, 3] {
            break;
        }
    }
    let mut out = img.clone();
    for (dst, &src) in perm.iter().enumerate() {
        let (dy, dx) = origins[dst];
        let (sy, sx) = origins[src];
        for chn in 0..c {
            for y in 0..h2 {
                for x in 0..w2 {
                    out[[chn, dy + y, dx + x]] = img[[chn, sy + y, sx + x]];
                }
            }
        }
    }
    out
}

fn apply_random_erasing(img: &Array3<f64>, spec: &TransformSpec, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let area = rng.gen_range(spec.param("area_min", 0.10)..=spec.param("area_max", 0.50))
        * (h * w) as f64;
    let aspect = rng.gen_range(spec.param("aspect_min", 0.5)..=spec.param("aspect_max", 2.0));
    let eh = ((area * aspect).sqrt().round() as usize).clamp(1, h);
    let ew = ((area / aspect).sqrt().round() as usize).clamp(1, w);
    let y0 = rng.gen_range(0..=h - eh);
    let x0 = rng.gen_range(0..=w - ew);
    let mut out = img.clone();
    for chn in 0..c {
        for y in y0..y0 + eh {
            for x in x0..x0 + ew {
                out[[chn, y, x]] = rng.gen_range(0.0..1.0);
            }
        }
    }
    out
}

fn apply_cutpaste(img: &Array3<f64>, spec: &TransformSpec, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let frac = rng.gen_range(spec.param("side_min", 0.10)..=spec.param("side_max", 0.50));
    let side = ((w as f64 * frac).round() as usize).clamp(1, w.min(h));
    let sy = rng.gen_range(0..=h - side);
    let sx = rng.gen_range(0..=w - side);
    let (mut dy, mut dx) = (sy, sx);
    // Insist on a genuinely different location when the image allows one.
    for _ in 0..16 {
        dy = rng.gen_range(0..=h - side);
        dx = rng.gen_range(0..=w - side);
        if dy != sy || dx != sx {
            break;
        }
    }
    let mut out = img.clone();
    for chn in 0..c {
        for y in 0..side {
            for x in 0..side {
                out[[chn, dy + y, dx + x]] = img[[chn, sy + y, sx + x]];
            }
        }
    }
    out
}

fn apply_rotation(img: &Array3<f64>, spec: &TransformSpec, rng: &mut ChaCha8Rng) -> Array3<f64> {
    // Full-magnitude rotation with a random sign: a half-turn either way,
    // never a small angle that would resemble the untouched image.
    let max_deg = spec.param("max_degrees", 90.0);
    let sign = if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
    rotate_by(img, (sign * max_deg).to_radians())
}

/// Rotate around the image center by `theta` radians.
fn rotate_by(img: &Array3<f64>, theta: f64) -> Array3<f64> {
    let (_, h, w) = img.dim();
    let cy = (h as f64 - 1.0) / 2.0;
    let cx = (w as f64 - 1.0) / 2.0;
    let (sin, cos) = theta.sin_cos();
    warp(img, |oy, ox| {
        let dy = oy - cy;
        let dx = ox - cx;
        (cy + dy * cos + dx * sin, cx - dy * sin + dx * cos)
    })
}

fn apply_intense_crop(img: &Array3<f64>, spec: &TransformSpec, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (_, h, w) = img.dim();
    let (y0, x0, ch_, cw) = draw_crop_window(
        rng,
        h,
        w,
        spec.param("area_min", 0.50),
        spec.param("area_max", 0.80),
        false,
    );
    crop_resize(img, y0, x0, ch_, cw)
}

fn apply_extreme_crop(img: &Array3<f64>, spec: &TransformSpec, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (_, h, w) = img.dim();
    let (y0, x0, ch_, cw) = draw_crop_window(
        rng,
        h,
        w,
        spec.param("area_min", 0.40),
        spec.param("area_max", 0.60),
        true,
    );
    crop_resize(img, y0, x0, ch_, cw)
}

fn apply_noise(img: &Array3<f64>, spec: &TransformSpec, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let std = spec.param("std", 0.1);
    let normal = Normal::new(0.0, std).expect("noise std validated > 0");
    let mut out = img.clone();
    for v in out.iter_mut() {
        *v += normal.sample(rng);
    }
    out
}

fn apply_mixup(
    img: &Array3<f64>,
    donor: &Array3<f64>,
    spec: &TransformSpec,
    rng: &mut ChaCha8Rng,
) -> (Array3<f64>, f64) {
    let alpha = spec.param("alpha", 0.1);
    let beta = Beta::new(alpha, alpha).expect("mixup alpha validated > 0");
    let lambda: f64 = beta.sample(rng);
    let mut out = img.clone();
    ndarray::Zip::from(&mut out).and(donor).for_each(|o, &d| {
        *o = lambda * *o + (1.0 - lambda) * d;
    });
    (out, lambda)
}

fn apply_cutout(img: &Array3<f64>, spec: &TransformSpec, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let side = ((w as f64 * spec.param("side", 0.25)).round() as usize).clamp(1, w.min(h));
    let y0 = rng.gen_range(0..=h - side);
    let x0 = rng.gen_range(0..=w - side);
    let mut out = img.clone();
    for chn in 0..c {
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                out[[chn, y, x]] = CUTOUT_FILL;
            }
        }
    }
    out
}

fn apply_cutmix(
    img: &Array3<f64>,
    donor: &Array3<f64>,
    spec: &TransformSpec,
    rng: &mut ChaCha8Rng,
) -> Array3<f64> {
    let (c, h, w) = img.dim();
    let area = spec.param("area", 0.20) * (h * w) as f64;
    let side = (area.sqrt().round() as usize).clamp(1, w.min(h));
    let y0 = rng.gen_range(0..=h - side);
    let x0 = rng.gen_range(0..=w - side);
    let mut out = img.clone();
    for chn in 0..c {
        for y in y0..y0 + side {
            for x in x0..x0 + side {
                out[[chn, y, x]] = donor[[chn, y, x]];
            }
        }
    }
    out
}

fn apply_elastic(img: &Array3<f64>, spec: &TransformSpec, rng: &mut ChaCha8Rng) -> Array3<f64> {
    let (_, h, w) = img.dim();
    // Displacement std scales with resolution relative to a 32 px canvas.
    let disp = spec.param("displacement", 4.0) * w as f64 / 32.0;
    let smooth_sigma = (w as f64 / spec.param("smooth_divisor", 8.0)).max(0.5);

    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut field = Array3::<f64>::zeros((2, h, w));
    for v in field.iter_mut() {
        *v = normal.sample(rng);
    }
    let mut field = gaussian_blur(&field, smooth_sigma);
    // Rescale the smoothed field so its empirical std equals `disp`.
    let mean = field.sum() / field.len() as f64;
    let var = field.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / field.len() as f64;
    let std = var.sqrt().max(1e-12);
    for v in field.iter_mut() {
        *v = (*v - mean) / std * disp;
    }

    warp(img, |oy, ox| {
        let dy = field[[0, oy as usize, ox as usize]];
        let dx = field[[1, oy as usize, ox as usize]];
        (oy + dy, ox + dx)
    })
}

/// Apply one hard transform to one sample.  `donor_pool` supplies mixup and
/// cutmix partners; `self_index` is the sample's own position in the pool.
fn apply_hard_single(
    img: &Array3<f64>,
    spec: &TransformSpec,
    donor_pool: &ImageBatch,
    self_index: usize,
    rng: &mut ChaCha8Rng,
) -> (Array3<f64>, AppliedTransform) {
    let mut applied = AppliedTransform {
        id: spec.id,
        donor_index: None,
        mixup_lambda: None,
    };
    let mut out = match spec.id {
        TransformId::Jigsaw => apply_jigsaw(img, rng),
        TransformId::RandomErasing => apply_random_erasing(img, spec, rng),
        TransformId::Cutpaste => apply_cutpaste(img, spec, rng),
        TransformId::Rotation => apply_rotation(img, spec, rng),
        TransformId::ExtremeBlur => gaussian_blur(img, spec.param("sigma", 2.5)),
        TransformId::IntenseCrop => apply_intense_crop(img, spec, rng),
        TransformId::NoiseInjection => apply_noise(img, spec, rng),
        TransformId::ExtremeCrop => apply_extreme_crop(img, spec, rng),
        TransformId::Cutout => apply_cutout(img, spec, rng),
        TransformId::Mixup | TransformId::Cutmix => {
            let n = donor_pool.len();
            let donor_idx = if n <= 1 {
                self_index
            } else {
                // Uniform over the other samples.
                let mut d = rng.gen_range(0..n - 1);
                if d >= self_index {
                    d += 1;
                }
                d
            };
            applied.donor_index = Some(donor_idx);
            let donor = donor_pool.sample_owned(donor_idx);
            match spec.id {
                TransformId::Mixup => {
                    let (mixed, lambda) = apply_mixup(img, &donor, spec, rng);
                    applied.mixup_lambda = Some(lambda);
                    mixed
                }
                _ => apply_cutmix(img, &donor, spec, rng),
            }
        }
        TransformId::Elastic => apply_elastic(img, spec, rng),
    };
    clamp01(&mut out);
    (out, applied)
}

// ---------------------------------------------------------------------------
// public batch operations
// ---------------------------------------------------------------------------

/// Apply a light positive view to every sample in the batch.
///
/// Deterministic in `(x, spec)`: sample `i` draws from a stream derived from
/// `(spec.seed, i)`, so outputs do not depend on evaluation order.
pub fn apply_light_view(x: &ImageBatch, spec: &LightViewSpec) -> Result<ImageBatch> {
    if x.is_empty() {
        return Err(Error::EmptyBatch("apply_light_view".into()));
    }
    spec.validate()?;
    let mut samples = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut rng = stream_rng(spec.seed, "light_view", &[i as u64]);
        let mut img = x.sample_owned(i);
        for op in &spec.ops {
            img = apply_light_op(&img, op, &mut rng);
        }
        clamp01(&mut img);
        samples.push(img);
    }
    ImageBatch::from_samples(&samples)
}

fn apply_light_op(img: &Array3<f64>, op: &LightOp, rng: &mut ChaCha8Rng) -> Array3<f64> {
    match *op {
        LightOp::ColorJitter { brightness, contrast } => {
            let bf = rng.gen_range(1.0 - brightness..=1.0 + brightness);
            let cf = rng.gen_range(1.0 - contrast..=1.0 + contrast);
            let mut out = img.clone();
            let mean = out.sum() / out.len() as f64;
            for v in out.iter_mut() {
                let bright = *v * bf;
                *v = (bright - mean) * cf + mean;
            }
            out
        }
        LightOp::RandomGrayscale { p } => {
            let roll: f64 = rng.gen_range(0.0..1.0);
            let (c, h, w) = img.dim();
            if roll >= p || c == 1 {
                return img.clone();
            }
            let mut out = img.clone();
            for y in 0..h {
                for x in 0..w {
                    let mut acc = 0.0;
                    for chn in 0..c {
                        acc += img[[chn, y, x]];
                    }
                    let gray = acc / c as f64;
                    for chn in 0..c {
                        out[[chn, y, x]] = gray;
                    }
                }
            }
            out
        }
        LightOp::RandomCrop { area_min, area_max } => {
            let (_, h, w) = img.dim();
            let (y0, x0, ch_, cw) = draw_crop_window(rng, h, w, area_min, area_max, false);
            crop_resize(img, y0, x0, ch_, cw)
        }
    }
}

/// Replay the geometry the seeded random crop would use for sample `i` of a
/// light view.  Lets callers audit retained-area fractions without touching
/// pixels.  Returns `(y0, x0, crop_h, crop_w)` of the first `RandomCrop` op,
/// after advancing the stream through any earlier ops exactly as
/// [`apply_light_view`] would.
pub fn replay_light_crop_geometry(
    spec: &LightViewSpec,
    sample_index: usize,
    h: usize,
    w: usize,
    channels: usize,
) -> Option<(usize, usize, usize, usize)> {
    let mut rng = stream_rng(spec.seed, "light_view", &[sample_index as u64]);
    for op in &spec.ops {
        match *op {
            LightOp::ColorJitter { brightness, contrast } => {
                let _: f64 = rng.gen_range(1.0 - brightness..=1.0 + brightness);
                let _: f64 = rng.gen_range(1.0 - contrast..=1.0 + contrast);
            }
            LightOp::RandomGrayscale { p } => {
                let _roll: f64 = rng.gen_range(0.0..1.0);
                let _ = (p, channels);
            }
            LightOp::RandomCrop { area_min, area_max } => {
                return Some(draw_crop_window(&mut rng, h, w, area_min, area_max, false));
            }
        }
    }
    None
}

/// Apply a sequence of hard transforms to every sample and report what was
/// done to each one.
///
/// Mixup/cutmix donors are drawn from `x` itself via the same seeded stream;
/// sample `i` uses the stream derived from `(seed, i)`.
pub fn apply_hard_sequence_logged(
    x: &ImageBatch,
    seq: &[TransformSpec],
    seed: u64,
) -> Result<(ImageBatch, Vec<Vec<AppliedTransform>>)> {
    if x.is_empty() {
        return Err(Error::EmptyBatch("apply_hard_sequence".into()));
    }
    if seq.is_empty() {
        return Err(Error::InvalidArgument(
            "apply_hard_sequence: empty transform sequence".into(),
        ));
    }
    for spec in seq {
        spec.validate()?;
    }
    let mut samples = Vec::with_capacity(x.len());
    let mut logs = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let mut rng = stream_rng(seed, "hard_seq", &[i as u64]);
        let mut img = x.sample_owned(i);
        let mut log = Vec::with_capacity(seq.len());
        for spec in seq {
            let (next, applied) = apply_hard_single(&img, spec, x, i, &mut rng);
            img = next;
            log.push(applied);
        }
        samples.push(img);
        logs.push(log);
    }
    let batch = ImageBatch::from_samples(&samples)?;
    Ok((batch, logs))
}

/// Apply a sequence of hard transforms to every sample.
pub fn apply_hard_sequence(x: &ImageBatch, seq: &[TransformSpec], seed: u64) -> Result<ImageBatch> {
    apply_hard_sequence_logged(x, seq, seed).map(|(b, _)| b)
}

/// Draw a random subsequence of the bank: length `m` uniform with
/// `2 <= m < |bank|` (relaxed to `m = 2` when the bank has exactly two
/// entries), distinct entries, randomized order.
pub fn sample_hard_sequence(rng_seed: u64, bank: &[TransformSpec]) -> Result<Vec<TransformSpec>> {
    let k = bank.len();
    if k < 2 {
        return Err(Error::InvalidArgument(format!(
            "sample_hard_sequence: bank must have at least 2 transforms, got {k}"
        )));
    }
    let mut rng = stream_rng(rng_seed, "hard_subset", &[]);
    let m = if k == 2 { 2 } else { rng.gen_range(2..k) };
    // Partial Fisher-Yates over bank indices.
    let mut indices: Vec<usize> = (0..k).collect();
    for i in 0..m {
        let j = rng.gen_range(i..k);
        indices.swap(i, j);
    }
    Ok(indices[..m].iter().map(|&i| bank[i].clone()).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::{Array3, Array4};

    fn gradient_batch(n: usize, c: usize, h: usize, w: usize) -> ImageBatch {
        let data = Array4::from_shape_fn((n, c, h, w), |(i, _, y, x)| {
            ((i + 1) * (y * w + x)) as f64 / ((n + 1) * h * w) as f64
        });
        ImageBatch::new(data).unwrap()
    }

    #[test]
    fn light_view_is_deterministic_and_in_range() {
        let batch = gradient_batch(3, 1, 8, 8);
        let spec = LightViewSpec::default_with_seed(7);
        let a = apply_light_view(&batch, &spec).unwrap();
        let b = apply_light_view(&batch, &spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), batch.dims());
    }

    #[test]
    fn unit_brightness_jitter_keeps_zeros() {
        let zeros = ImageBatch::new(Array4::zeros((1, 1, 4, 4))).unwrap();
        let spec = LightViewSpec {
            ops: vec![LightOp::ColorJitter {
                brightness: 0.0,
                contrast: 0.0,
            }],
            seed: 1,
        };
        let out = apply_light_view(&zeros, &spec).unwrap();
        assert_eq!(out, zeros);
    }

    #[test]
    fn replayed_crop_geometry_stays_in_declared_range() {
        let spec = LightViewSpec::default_with_seed(3);
        for i in 0..32 {
            let (_, _, ch_, cw) = replay_light_crop_geometry(&spec, i, 32, 32, 1).unwrap();
            let frac = (ch_ * cw) as f64 / (32.0 * 32.0);
            // Rounding the side lengths can nudge the area slightly past the
            // configured bounds; allow one pixel of slack per side.
            assert!(
                (0.75..=1.0).contains(&frac),
                "sample {i}: retained fraction {frac}"
            );
            assert!(ch_ <= 32 && cw <= 32);
        }
    }

    #[test]
    fn crop_geometry_replay_matches_pixels() {
        // Cropping with the replayed geometry and resizing back must equal
        // the light-view output when the crop is the only op.
        let batch = gradient_batch(2, 1, 16, 16);
        let spec = LightViewSpec {
            ops: vec![LightOp::RandomCrop {
                area_min: 0.80,
                area_max: 1.00,
            }],
            seed: 11,
        };
        let out = apply_light_view(&batch, &spec).unwrap();
        for i in 0..batch.len() {
            let (y0, x0, ch_, cw) = replay_light_crop_geometry(&spec, i, 16, 16, 1).unwrap();
            let manual = crop_resize(&batch.sample_owned(i), y0, x0, ch_, cw);
            let diff = (&manual - &out.sample_owned(i))
                .iter()
                .map(|v| v.abs())
                .fold(0.0, f64::max);
            assert!(diff < 1e-12, "sample {i}: max diff {diff}");
        }
    }

    #[test]
    fn zero_angle_rotation_is_identity() {
        let batch = gradient_batch(1, 1, 8, 8);
        let img = batch.sample_owned(0);
        let rotated = rotate_by(&img, 0.0);
        let diff = (&rotated - &img).iter().map(|v| v.abs()).fold(0.0, f64::max);
        assert!(diff < 1e-12);
    }

    #[test]
    fn hard_sequence_preserves_shape_range_and_determinism() {
        let batch = gradient_batch(4, 1, 8, 8);
        let bank = default_bank();
        let (a, logs) = apply_hard_sequence_logged(&batch, &bank, 99).unwrap();
        let b = apply_hard_sequence(&batch, &bank, 99).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.dims(), batch.dims());
        assert_eq!(logs.len(), 4);
        assert!(logs.iter().all(|l| l.len() == bank.len()));
        for v in a.array().iter() {
            assert!((0.0..=1.0).contains(v));
        }
    }

    #[test]
    fn jigsaw_output_is_a_tile_permutation() {
        let batch = gradient_batch(1, 1, 8, 8);
        let img = batch.sample_owned(0);
        let seq = [TransformSpec::new(TransformId::Jigsaw)];
        let (out, _) = apply_hard_sequence_logged(&batch, &seq, 5).unwrap();
        let out_img = out.sample_owned(0);

        let tile = |im: &Array3<f64>, q: usize| -> Vec<f64> {
            let (y0, x0) = [(0, 0), (0, 4), (4, 0), (4, 4)][q];
            let mut v = Vec::new();
            for y in 0..4 {
                for x in 0..4 {
                    v.push(im[[0, y0 + y, x0 + x]]);
                }
            }
            v
        };
        let in_tiles: Vec<Vec<f64>> = (0..4).map(|q| tile(&img, q)).collect();
        let out_tiles: Vec<Vec<f64>> = (0..4).map(|q| tile(&out_img, q)).collect();

        // Output must be one of the 24 permutations of input tiles; check by
        // matching each output tile to a distinct input tile.
        let mut used = [false; 4];
        for ot in &out_tiles {
            let hit = in_tiles.iter().enumerate().find(|(i, it)| {
                !used[*i] && it.iter().zip(ot.iter()).all(|(a, b)| (a - b).abs() < 1e-12)
            });
            let (i, _) = hit.expect("output tile not found among input tiles");
            used[i] = true;
        }
        // And it must not be the identity arrangement.
        assert_ne!(img, out_img);
    }

    #[test]
    fn cutout_flips_exactly_one_square_region() {
        let data = Array4::from_elem((1, 1, 16, 16), 0.9);
        let batch = ImageBatch::new(data).unwrap();
        let seq = [TransformSpec::new(TransformId::Cutout)];
        let out = apply_hard_sequence(&batch, &seq, 13).unwrap();
        let img = out.sample_owned(0);
        let side = (0.25f64 * 16.0).round() as usize;
        let mut changed = Vec::new();
        for y in 0..16 {
            for x in 0..16 {
                if (img[[0, y, x]] - 0.9).abs() > 1e-12 {
                    changed.push((y, x));
                    assert!((img[[0, y, x]] - CUTOUT_FILL).abs() < 1e-12);
                }
            }
        }
        assert_eq!(changed.len(), side * side);
        let ys: Vec<usize> = changed.iter().map(|&(y, _)| y).collect();
        let xs: Vec<usize> = changed.iter().map(|&(_, x)| x).collect();
        let (y0, y1) = (*ys.iter().min().unwrap(), *ys.iter().max().unwrap());
        let (x0, x1) = (*xs.iter().min().unwrap(), *xs.iter().max().unwrap());
        assert_eq!(y1 - y0 + 1, side);
        assert_eq!(x1 - x0 + 1, side);
    }

    #[test]
    fn mixup_matches_logged_lambda_and_donor() {
        let batch = gradient_batch(4, 1, 8, 8);
        let seq = [TransformSpec::new(TransformId::Mixup)];
        let (out, logs) = apply_hard_sequence_logged(&batch, &seq, 21).unwrap();
        for i in 0..batch.len() {
            let applied = &logs[i][0];
            let lambda = applied.mixup_lambda.unwrap();
            let donor = batch.sample_owned(applied.donor_index.unwrap());
            let src = batch.sample_owned(i);
            let got = out.sample_owned(i);
            assert!((0.0..=1.0).contains(&lambda));
            assert_ne!(applied.donor_index.unwrap(), i);
            for ((g, s), d) in got.iter().zip(src.iter()).zip(donor.iter()) {
                let expect = (lambda * s + (1.0 - lambda) * d).clamp(0.0, 1.0);
                assert!((g - expect).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn erased_region_area_matches_draw_within_rounding() {
        let data = Array4::from_elem((1, 1, 32, 32), 0.25);
        let batch = ImageBatch::new(data).unwrap();
        let seq = [TransformSpec::new(TransformId::RandomErasing)];
        let out = apply_hard_sequence(&batch, &seq, 2).unwrap();
        let img = out.sample_owned(0);
        let changed = img
            .iter()
            .filter(|&&v| (v - 0.25).abs() > 1e-12)
            .count();
        // Area fraction in [0.10, 0.50] with rounding slack of one pixel per
        // side; random fill can rarely hit 0.25 exactly, so allow slack low.
        let frac = changed as f64 / (32.0 * 32.0);
        assert!(
            (0.05..=0.55).contains(&frac),
            "changed fraction {frac} outside expected band"
        );
    }

    #[test]
    fn sequence_sampler_respects_bounds_and_coverage() {
        let bank = default_bank();
        let mut counts = vec![0usize; bank.len()];
        let draws = 10_000;
        for seed in 0..draws {
            let seq = sample_hard_sequence(seed, &bank).unwrap();
            assert!(seq.len() >= 2 && seq.len() < bank.len());
            let mut seen = std::collections::BTreeSet::new();
            for spec in &seq {
                assert!(seen.insert(spec.id), "duplicate transform in sequence");
                counts[TransformId::ALL.iter().position(|&t| t == spec.id).unwrap()] += 1;
            }
        }
        for (i, &c) in counts.iter().enumerate() {
            let freq = c as f64 / draws as f64;
            assert!(
                freq >= 0.01,
                "transform {} appeared in only {freq:.4} of sequences",
                TransformId::ALL[i].name()
            );
        }
    }

    #[test]
    fn two_entry_bank_returns_both_transforms() {
        let bank = vec![
            TransformSpec::new(TransformId::Rotation),
            TransformSpec::new(TransformId::Cutout),
        ];
        for seed in 0..20 {
            let seq = sample_hard_sequence(seed, &bank).unwrap();
            assert_eq!(seq.len(), 2);
            let ids: std::collections::BTreeSet<_> = seq.iter().map(|s| s.id).collect();
            assert_eq!(ids.len(), 2);
        }
        assert!(sample_hard_sequence(0, &bank[..1]).is_err());
    }

    #[test]
    fn beta_sampler_produces_valid_lambdas() {
        use rand_chacha::rand_core::SeedableRng;
        let beta = Beta::new(0.1, 0.1).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut sum = 0.0;
        let n = 10_000;
        for _ in 0..n {
            let l: f64 = beta.sample(&mut rng);
            assert!(l.is_finite() && (0.0..=1.0).contains(&l));
            sum += l;
        }
        let mean = sum / n as f64;
        assert!((mean - 0.5).abs() < 0.05, "Beta(0.1, 0.1) mean {mean}");
    }
}
