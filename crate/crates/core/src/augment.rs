//! Parameter-tracked augmentation.
//!
//! Every stochastic choice is drawn once into a [`TransformPlan`]; applying a
//! plan is deterministic, and the plan is recoverable from its
//! [`PretextRecord`]. The record doubles as the regression/classification
//! target of the pretext head.
//!
//! Target ordering:
//!
//! | index | categorical        | continuous                           |
//! |-------|--------------------|--------------------------------------|
//! | 0     | flip applied       | crop center x (relative)             |
//! | 1     | grayscale applied  | crop center y (relative)             |
//! | 2     | jitter applied     | crop area / image area               |
//! | 3     |                    | crop aspect (w/h), ratio range → [0,1] |
//! | 4     |                    | brightness factor, range → [0,1]     |
//! | 5     |                    | contrast factor, range → [0,1]       |
//! | 6     |                    | saturation factor, range → [0,1]     |
//! | 7     |                    | hue shift `[-h, h]` → [0,1]          |
//!
//! Skipped jitter records the identity factors (1, 1, 1, 0) in the same
//! rescaled form.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const NUM_DISCRETE: usize = 3;
pub const DISCRETE_ARITY: [usize; NUM_DISCRETE] = [2, 2, 2];
pub const NUM_CONTINUOUS: usize = 8;
pub const NUM_ROTATIONS: usize = 4;

const CROP_ATTEMPTS: usize = 10;

/// Square RGB image, channel-major `[3, size, size]`, values in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Image {
    size: usize,
    pixels: Vec<f64>,
}

impl Image {
    pub const CHANNELS: usize = 3;

    pub fn new(size: usize, pixels: Vec<f64>) -> Result<Self> {
        if size == 0 {
            return Err(Error::config("image.size", "must be positive"));
        }
        if pixels.len() != Self::CHANNELS * size * size {
            return Err(Error::ShapeMismatch {
                op: "Image::new",
                expected: vec![Self::CHANNELS, size, size],
                actual: vec![pixels.len()],
            });
        }
        if let Some(bad) = pixels
            .iter()
            .find(|v| !v.is_finite() || **v < 0.0 || **v > 1.0)
        {
            return Err(Error::Contract(format!(
                "pixel value {bad} outside [0, 1]"
            )));
        }
        Ok(Self { size, pixels })
    }

    pub fn filled(size: usize, value: f64) -> Self {
        Self {
            size,
            pixels: vec![value.clamp(0.0, 1.0); Self::CHANNELS * size * size],
        }
    }

    pub fn size(&self) -> usize {
        self.size
    }

    pub fn pixels(&self) -> &[f64] {
        &self.pixels
    }

    pub fn into_pixels(self) -> Vec<f64> {
        self.pixels
    }

    #[inline]
    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.pixels[(c * self.size + y) * self.size + x]
    }

    fn plane(&self, c: usize) -> &[f64] {
        let n = self.size * self.size;
        &self.pixels[c * n..(c + 1) * n]
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    pub output_size: usize,
    pub crop_scale: [f64; 2],
    pub crop_ratio: [f64; 2],
    pub flip_p: f64,
    pub jitter_p: f64,
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
    pub grayscale_p: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            output_size: 32,
            crop_scale: [0.2, 1.0],
            crop_ratio: [3.0 / 4.0, 4.0 / 3.0],
            flip_p: 0.5,
            jitter_p: 0.8,
            brightness: 0.4,
            contrast: 0.4,
            saturation: 0.4,
            hue: 0.1,
            grayscale_p: 0.2,
        }
    }
}

impl AugmentConfig {
    /// A configuration whose plans never change the image (full-frame crop,
    /// no flip, jitter or grayscale).
    pub fn identity(size: usize) -> Self {
        Self {
            output_size: size,
            crop_scale: [1.0, 1.0],
            crop_ratio: [1.0, 1.0],
            flip_p: 0.0,
            jitter_p: 0.0,
            grayscale_p: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let prob = |name: &str, p: f64| {
            if (0.0..=1.0).contains(&p) {
                Ok(())
            } else {
                Err(Error::config(
                    format!("augment.{name}"),
                    format!("probability {p} outside [0, 1]"),
                ))
            }
        };
        if self.output_size == 0 {
            return Err(Error::config("augment.output_size", "must be positive"));
        }
        let [lo, hi] = self.crop_scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::config(
                "augment.crop_scale",
                format!("need 0 < lo <= hi <= 1, got [{lo}, {hi}]"),
            ));
        }
        let [lo, hi] = self.crop_ratio;
        if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
            return Err(Error::config(
                "augment.crop_ratio",
                format!("need 0 < lo <= hi, got [{lo}, {hi}]"),
            ));
        }
        if !(lo <= 1.0 && 1.0 <= hi) {
            return Err(Error::config(
                "augment.crop_ratio",
                "range must contain 1 so square fallback crops stay encodable",
            ));
        }
        prob("flip_p", self.flip_p)?;
        prob("jitter_p", self.jitter_p)?;
        prob("grayscale_p", self.grayscale_p)?;
        for (name, s) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..1.0).contains(&s) {
                return Err(Error::config(
                    format!("augment.{name}"),
                    format!("strength {s} outside [0, 1)"),
                ));
            }
        }
        if !(0.0..=0.5).contains(&self.hue) {
            return Err(Error::config(
                "augment.hue",
                format!("strength {} outside [0, 0.5]", self.hue),
            ));
        }
        Ok(())
    }
}

/// Affine map of `v` from `[lo, hi]` to `[0, 1]`; a point interval maps to 0.5.
fn rescale(v: f64, lo: f64, hi: f64) -> f64 {
    if hi > lo {
        ((v - lo) / (hi - lo)).clamp(0.0, 1.0)
    } else {
        0.5
    }
}

fn unscale(u: f64, lo: f64, hi: f64) -> f64 {
    lo + u * (hi - lo)
}

/// Maps `[center - half, center + half]` to `[0, 1]` so that `center` lands
/// exactly on 0.5; a zero half-width maps everything to 0.5.
fn rescale_centered(v: f64, center: f64, half: f64) -> f64 {
    if half > 0.0 {
        (0.5 + (v - center) / (2.0 * half)).clamp(0.0, 1.0)
    } else {
        0.5
    }
}

fn unscale_centered(u: f64, center: f64, half: f64) -> f64 {
    center + (u - 0.5) * 2.0 * half
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct CropBox {
    pub top: usize,
    pub left: usize,
    pub height: usize,
    pub width: usize,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct JitterFactors {
    pub brightness: f64,
    pub contrast: f64,
    pub saturation: f64,
    pub hue: f64,
}

impl JitterFactors {
    pub const IDENTITY: JitterFactors = JitterFactors {
        brightness: 1.0,
        contrast: 1.0,
        saturation: 1.0,
        hue: 0.0,
    };
}

/// Fully resolved augmentation for one view. Applied in the order
/// crop+resize, color jitter (brightness, contrast, saturation, hue),
/// grayscale, horizontal flip.
#[derive(Clone, Debug, PartialEq)]
pub struct TransformPlan {
    pub source_size: usize,
    pub output_size: usize,
    pub crop: CropBox,
    pub jitter: Option<JitterFactors>,
    pub grayscale: bool,
    pub flip: bool,
}

impl TransformPlan {
    pub fn identity(size: usize) -> Self {
        Self {
            source_size: size,
            output_size: size,
            crop: CropBox {
                top: 0,
                left: 0,
                height: size,
                width: size,
            },
            jitter: None,
            grayscale: false,
            flip: false,
        }
    }

    pub fn record(&self, cfg: &AugmentConfig) -> PretextRecord {
        let s = self.source_size as f64;
        let c = self.crop;
        let jf = self.jitter.unwrap_or(JitterFactors::IDENTITY);
        PretextRecord {
            discrete: [
                self.flip as usize,
                self.grayscale as usize,
                self.jitter.is_some() as usize,
            ],
            continuous: [
                (c.left as f64 + c.width as f64 / 2.0) / s,
                (c.top as f64 + c.height as f64 / 2.0) / s,
                (c.width * c.height) as f64 / (s * s),
                rescale(
                    c.width as f64 / c.height as f64,
                    cfg.crop_ratio[0],
                    cfg.crop_ratio[1],
                ),
                rescale_centered(jf.brightness, 1.0, cfg.brightness),
                rescale_centered(jf.contrast, 1.0, cfg.contrast),
                rescale_centered(jf.saturation, 1.0, cfg.saturation),
                rescale_centered(jf.hue, 0.0, cfg.hue),
            ],
        }
    }

    /// Rebuilds the plan a record was taken from.
    pub fn from_record(rec: &PretextRecord, cfg: &AugmentConfig, source_size: usize) -> Self {
        let s = source_size as f64;
        let t = &rec.continuous;
        let aspect = if cfg.crop_ratio[1] > cfg.crop_ratio[0] {
            unscale(t[3], cfg.crop_ratio[0], cfg.crop_ratio[1])
        } else {
            cfg.crop_ratio[0]
        };
        let area = t[2] * s * s;
        let width = ((area * aspect).sqrt().round() as usize).clamp(1, source_size);
        let height = ((area / aspect).sqrt().round() as usize).clamp(1, source_size);
        let left = (t[0] * s - width as f64 / 2.0).round().max(0.0) as usize;
        let top = (t[1] * s - height as f64 / 2.0).round().max(0.0) as usize;
        let jitter = (rec.discrete[2] == 1).then(|| JitterFactors {
            brightness: unscale_centered(t[4], 1.0, cfg.brightness),
            contrast: unscale_centered(t[5], 1.0, cfg.contrast),
            saturation: unscale_centered(t[6], 1.0, cfg.saturation),
            hue: unscale_centered(t[7], 0.0, cfg.hue),
        });
        Self {
            source_size,
            output_size: cfg.output_size,
            crop: CropBox {
                top,
                left,
                height,
                width,
            },
            jitter,
            grayscale: rec.discrete[1] == 1,
            flip: rec.discrete[0] == 1,
        }
    }
}

/// Sampled augmentation parameters of one view.
#[derive(Clone, Debug, PartialEq)]
pub struct PretextRecord {
    /// flip, grayscale, jitter gates (0/1).
    pub discrete: [usize; NUM_DISCRETE],
    /// See the module-level table; every entry lies in `[0, 1]`.
    pub continuous: [f64; NUM_CONTINUOUS],
}

/// Class indices and regression targets for the pretext head.
#[derive(Clone, Debug, PartialEq)]
pub struct PretextTargets {
    pub categorical: Vec<usize>,
    pub continuous: Vec<f64>,
}

pub fn encode_targets(rec: &PretextRecord) -> PretextTargets {
    PretextTargets {
        categorical: rec.discrete.to_vec(),
        continuous: rec.continuous.to_vec(),
    }
}

pub fn decode_targets(t: &PretextTargets) -> Result<PretextRecord> {
    if t.categorical.len() != NUM_DISCRETE || t.continuous.len() != NUM_CONTINUOUS {
        return Err(Error::ShapeMismatch {
            op: "decode_targets",
            expected: vec![NUM_DISCRETE, NUM_CONTINUOUS],
            actual: vec![t.categorical.len(), t.continuous.len()],
        });
    }
    let mut rec = PretextRecord {
        discrete: [0; NUM_DISCRETE],
        continuous: [0.0; NUM_CONTINUOUS],
    };
    rec.discrete.copy_from_slice(&t.categorical);
    rec.continuous.copy_from_slice(&t.continuous);
    Ok(rec)
}

fn sample_crop<R: Rng + ?Sized>(rng: &mut R, cfg: &AugmentConfig, size: usize) -> CropBox {
    let area = (size * size) as f64;
    let [rlo, rhi] = cfg.crop_ratio;
    let (log_lo, log_hi) = (rlo.ln(), rhi.ln());
    for _ in 0..CROP_ATTEMPTS {
        let target_area = area * rng.random_range(cfg.crop_scale[0]..=cfg.crop_scale[1]);
        let aspect = rng.random_range(log_lo..=log_hi).exp();
        let w = (target_area * aspect).sqrt().round() as usize;
        let h = (target_area / aspect).sqrt().round() as usize;
        if w == 0 || h == 0 || w > size || h > size {
            continue;
        }
        // Rounding can push the realized ratio out of range; such a crop
        // would not be encodable, so it counts as a failed attempt.
        let realized = w as f64 / h as f64;
        if realized < rlo - 1e-12 || realized > rhi + 1e-12 {
            continue;
        }
        let top = rng.random_range(0..=size - h);
        let left = rng.random_range(0..=size - w);
        return CropBox {
            top,
            left,
            height: h,
            width: w,
        };
    }
    // Square sources have aspect 1, which the validated ratio range contains.
    CropBox {
        top: 0,
        left: 0,
        height: size,
        width: size,
    }
}

/// Draws one record and the plan it encodes.
///
/// Jitter factors are drawn as unit-interval positions within their
/// configured ranges, so the record holds the exact draws and
/// [`TransformPlan::from_record`] replays them bit for bit.
pub fn sample_pretext<R: Rng + ?Sized>(
    rng: &mut R,
    cfg: &AugmentConfig,
    source_size: usize,
) -> (TransformPlan, PretextRecord) {
    let crop = sample_crop(rng, cfg, source_size);
    let mut rec = TransformPlan {
        crop,
        ..TransformPlan::identity(source_size)
    }
    .record(cfg);
    if rng.random::<f64>() < cfg.jitter_p {
        rec.discrete[2] = 1;
        for (slot, strength) in rec.continuous[4..]
            .iter_mut()
            .zip([cfg.brightness, cfg.contrast, cfg.saturation, cfg.hue])
        {
            let u = rng.random::<f64>();
            *slot = if strength > 0.0 { u } else { 0.5 };
        }
    }
    rec.discrete[1] = (rng.random::<f64>() < cfg.grayscale_p) as usize;
    rec.discrete[0] = (rng.random::<f64>() < cfg.flip_p) as usize;
    let plan = TransformPlan::from_record(&rec, cfg, source_size);
    (plan, rec)
}

fn resized_crop(img: &Image, crop: CropBox, out: usize) -> Vec<f64> {
    let n = img.size;
    let mut dst = vec![0.0; Image::CHANNELS * out * out];
    // Half-pixel-center convention (corners not aligned).
    let axis = |o: usize, len: usize| -> (usize, usize, f64) {
        let s = ((o as f64 + 0.5) * len as f64 / out as f64 - 0.5).max(0.0);
        let i0 = (s.floor() as usize).min(len - 1);
        let i1 = (i0 + 1).min(len - 1);
        (i0, i1, s - i0 as f64)
    };
    let ys: Vec<_> = (0..out).map(|o| axis(o, crop.height)).collect();
    let xs: Vec<_> = (0..out).map(|o| axis(o, crop.width)).collect();
    for c in 0..Image::CHANNELS {
        let plane = img.plane(c);
        let at = |y: usize, x: usize| plane[(crop.top + y) * n + crop.left + x];
        for (oy, &(y0, y1, fy)) in ys.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in xs.iter().enumerate() {
                let top = at(y0, x0) * (1.0 - fx) + at(y0, x1) * fx;
                let bot = at(y1, x0) * (1.0 - fx) + at(y1, x1) * fx;
                dst[(c * out + oy) * out + ox] = top * (1.0 - fy) + bot * fy;
            }
        }
    }
    dst
}

fn luma(r: f64, g: f64, b: f64) -> f64 {
    0.299 * r + 0.587 * g + 0.114 * b
}

fn grayscale_plane(px: &[f64], hw: usize) -> Vec<f64> {
    (0..hw)
        .map(|i| luma(px[i], px[hw + i], px[2 * hw + i]))
        .collect()
}

fn blend(px: &mut [f64], other: impl Fn(usize) -> f64, factor: f64) {
    for (i, v) in px.iter_mut().enumerate() {
        *v = (factor * *v + (1.0 - factor) * other(i)).clamp(0.0, 1.0);
    }
}

fn shift_hue(px: &mut [f64], hw: usize, shift: f64) {
    for i in 0..hw {
        let (r, g, b) = (px[i], px[hw + i], px[2 * hw + i]);
        let maxc = r.max(g).max(b);
        let minc = r.min(g).min(b);
        let v = maxc;
        let delta = maxc - minc;
        if delta <= 0.0 {
            continue; // achromatic: hue undefined, shift is a no-op
        }
        let s = delta / maxc;
        let rc = (maxc - r) / delta;
        let gc = (maxc - g) / delta;
        let bc = (maxc - b) / delta;
        let h = if maxc == r {
            bc - gc
        } else if maxc == g {
            2.0 + rc - bc
        } else {
            4.0 + gc - rc
        };
        let h = ((h / 6.0).rem_euclid(1.0) + shift).rem_euclid(1.0);
        let sector = (h * 6.0).floor();
        let f = h * 6.0 - sector;
        let p = v * (1.0 - s);
        let q = v * (1.0 - s * f);
        let t = v * (1.0 - s * (1.0 - f));
        let (nr, ng, nb) = match sector as i64 % 6 {
            0 => (v, t, p),
            1 => (q, v, p),
            2 => (p, v, t),
            3 => (p, q, v),
            4 => (t, p, v),
            _ => (v, p, q),
        };
        px[i] = nr.clamp(0.0, 1.0);
        px[hw + i] = ng.clamp(0.0, 1.0);
        px[2 * hw + i] = nb.clamp(0.0, 1.0);
    }
}

/// Applies a plan. Output is `plan.output_size` square.
pub fn apply_plan(img: &Image, plan: &TransformPlan) -> Image {
    let out = plan.output_size;
    let hw = out * out;
    let mut px = resized_crop(img, plan.crop, out);
    if let Some(j) = plan.jitter {
        if j.brightness != 1.0 {
            px.iter_mut()
                .for_each(|v| *v = (*v * j.brightness).clamp(0.0, 1.0));
        }
        if j.contrast != 1.0 {
            let mean = grayscale_plane(&px, hw).iter().sum::<f64>() / hw as f64;
            blend(&mut px, |_| mean, j.contrast);
        }
        if j.saturation != 1.0 {
            let gray = grayscale_plane(&px, hw);
            blend(&mut px, |i| gray[i % hw], j.saturation);
        }
        if j.hue != 0.0 {
            shift_hue(&mut px, hw, j.hue);
        }
    }
    if plan.grayscale {
        let gray = grayscale_plane(&px, hw);
        for c in 0..Image::CHANNELS {
            px[c * hw..(c + 1) * hw].copy_from_slice(&gray);
        }
    }
    if plan.flip {
        for row in px.chunks_mut(out) {
            row.reverse();
        }
    }
    Image {
        size: out,
        pixels: px,
    }
}

/// Clockwise quarter-turn rotation label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct RotationLabel(u8);

impl RotationLabel {
    pub fn new(k: usize) -> Result<Self> {
        if k < NUM_ROTATIONS {
            Ok(Self(k as u8))
        } else {
            Err(Error::Contract(format!("rotation class {k} outside 0..4")))
        }
    }

    pub fn class(self) -> usize {
        self.0 as usize
    }

    pub fn degrees(self) -> u32 {
        90 * self.0 as u32
    }
}

/// Rotates clockwise by `90° * k` as an exact pixel permutation.
pub fn rotate90(img: &Image, k: usize) -> Result<Image> {
    let k = RotationLabel::new(k)?.class();
    let n = img.size;
    if k == 0 {
        return Ok(img.clone());
    }
    let mut out = vec![0.0; img.pixels.len()];
    for c in 0..Image::CHANNELS {
        let src = img.plane(c);
        let dst = &mut out[c * n * n..(c + 1) * n * n];
        for y in 0..n {
            for x in 0..n {
                let v = match k {
                    1 => src[(n - 1 - x) * n + y],
                    2 => src[(n - 1 - y) * n + (n - 1 - x)],
                    _ => src[x * n + (n - 1 - y)],
                };
                dst[y * n + x] = v;
            }
        }
    }
    Ok(Image {
        size: n,
        pixels: out,
    })
}

/// Which views a bundle carries.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ViewMode {
    Baseline,
    Std,
    Rot,
    All,
}

impl ViewMode {
    pub fn has_rotation(self) -> bool {
        matches!(self, ViewMode::Rot | ViewMode::All)
    }
}

#[derive(Clone, Debug)]
pub struct RotatedView {
    pub image: Image,
    pub label: RotationLabel,
}

#[derive(Clone, Debug)]
pub struct ViewBundle {
    pub x1: Image,
    pub x2: Image,
    pub t1: PretextRecord,
    pub t2: PretextRecord,
    /// Third view: `x1` rotated clockwise by the label.
    pub rotated: Option<RotatedView>,
}

impl ViewBundle {
    /// Builds the views a pair of records describes.
    pub fn from_records(
        img: &Image,
        cfg: &AugmentConfig,
        t1: PretextRecord,
        t2: PretextRecord,
        rotation: Option<RotationLabel>,
    ) -> Result<Self> {
        let x1 = apply_plan(img, &TransformPlan::from_record(&t1, cfg, img.size()));
        let x2 = apply_plan(img, &TransformPlan::from_record(&t2, cfg, img.size()));
        let rotated = rotation
            .map(|label| {
                rotate90(&x1, label.class()).map(|image| RotatedView { image, label })
            })
            .transpose()?;
        Ok(Self {
            t1,
            t2,
            x1,
            x2,
            rotated,
        })
    }

    pub fn x3(&self) -> Option<&Image> {
        self.rotated.as_ref().map(|r| &r.image)
    }

    pub fn rotation(&self) -> Option<RotationLabel> {
        self.rotated.as_ref().map(|r| r.label)
    }
}

/// Two independently augmented views, plus the rotated third view for the
/// rotation modes.
pub fn make_bundle<R: Rng + ?Sized>(
    img: &Image,
    rng: &mut R,
    cfg: &AugmentConfig,
    mode: ViewMode,
) -> Result<ViewBundle> {
    let (_, t1) = sample_pretext(rng, cfg, img.size());
    let (_, t2) = sample_pretext(rng, cfg, img.size());
    let rotation = if mode.has_rotation() {
        Some(RotationLabel::new(rng.random_range(0..NUM_ROTATIONS))?)
    } else {
        None
    };
    ViewBundle::from_records(img, cfg, t1, t2, rotation)
}
