use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{quantize, SynthImage};
use crate::error::{Error, Result};
use crate::seed;

const MAX_ATTEMPTS: usize = 100;
const EPS: f64 = 1e-12;

/// Axis-aligned box in normalised image coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PatchBox {
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
}

impl PatchBox {
    pub const FULL: PatchBox = PatchBox {
        cx: 0.5,
        cy: 0.5,
        w: 1.0,
        h: 1.0,
    };

    pub fn x0(&self) -> f64 {
        self.cx - self.w / 2.0
    }
    pub fn y0(&self) -> f64 {
        self.cy - self.h / 2.0
    }
    pub fn x1(&self) -> f64 {
        self.cx + self.w / 2.0
    }
    pub fn y1(&self) -> f64 {
        self.cy + self.h / 2.0
    }
    pub fn area(&self) -> f64 {
        self.w * self.h
    }

    /// Inside the unit square with positive extent.
    pub fn is_valid(&self) -> bool {
        self.w > 0.0
            && self.h > 0.0
            && self.x0() >= -EPS
            && self.y0() >= -EPS
            && self.x1() <= 1.0 + EPS
            && self.y1() <= 1.0 + EPS
    }

    /// Intersection area with another box.
    pub fn overlap(&self, other: &PatchBox) -> f64 {
        let w = (self.x1().min(other.x1()) - self.x0().max(other.x0())).max(0.0);
        let h = (self.y1().min(other.y1()) - self.y0().max(other.y0())).max(0.0);
        w * h
    }
}

/// Random-resized-crop + flip + brightness/contrast jitter.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AugmentationPolicy {
    pub scale: (f64, f64),
    pub aspect: (f64, f64),
    pub flip_prob: f64,
    /// Multiplicative brightness factor drawn from `1 ± brightness`.
    pub brightness: f64,
    /// Contrast factor drawn from `1 ± contrast`, applied about the mean.
    pub contrast: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self {
            scale: (0.2, 1.0),
            aspect: (3.0 / 4.0, 4.0 / 3.0),
            flip_prob: 0.5,
            brightness: 0.4,
            contrast: 0.4,
        }
    }
}

impl AugmentationPolicy {
    pub fn identity() -> Self {
        Self {
            scale: (1.0, 1.0),
            aspect: (1.0, 1.0),
            flip_prob: 0.0,
            brightness: 0.0,
            contrast: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.scale;
        if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
            return Err(Error::Config(format!("bad crop scale range {:?}", self.scale)));
        }
        if !(self.aspect.0 > 0.0 && self.aspect.0 <= self.aspect.1) {
            return Err(Error::Config(format!("bad aspect range {:?}", self.aspect)));
        }
        if !(0.0..=1.0).contains(&self.flip_prob) {
            return Err(Error::Config(format!("flip probability {}", self.flip_prob)));
        }
        if !(0.0..1.0).contains(&self.brightness) || !(0.0..1.0).contains(&self.contrast) {
            return Err(Error::Config("jitter ranges must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Transformation actually applied to produce a view.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentParams {
    pub crop: PatchBox,
    pub flipped: bool,
    pub brightness: f64,
    pub contrast: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct View {
    pub image: SynthImage,
    pub params: AugmentParams,
}

/// Two independently augmented views of `image` at its own size.
pub fn augment_two_views(
    image: &SynthImage,
    policy: &AugmentationPolicy,
    seed: u64,
) -> Result<(View, View)> {
    policy.validate()?;
    let a = augment_one(image, policy, seed::derive(seed, &[0]))?;
    let b = augment_one(image, policy, seed::derive(seed, &[1]))?;
    Ok((a, b))
}

fn augment_one(image: &SynthImage, policy: &AugmentationPolicy, seed: u64) -> Result<View> {
    let mut rng = seed::rng(seed, &[]);
    let crop = sample_box(&mut rng, policy.scale, policy.aspect)?;
    let flipped = rng.gen::<f64>() < policy.flip_prob;
    let brightness = 1.0 + jitter(&mut rng, policy.brightness);
    let contrast = 1.0 + jitter(&mut rng, policy.contrast);

    let mut out = crop_resize(image, &crop, image.size);
    if flipped {
        flip_horizontal(&mut out);
    }
    if brightness != 1.0 || contrast != 1.0 {
        let mean = out.pixels.iter().sum::<f64>() / out.pixels.len() as f64;
        for v in &mut out.pixels {
            let b = *v * brightness;
            *v = quantize(((b - mean * brightness) * contrast + mean * brightness).clamp(0.0, 1.0));
        }
    }
    Ok(View {
        image: out,
        params: AugmentParams {
            crop,
            flipped,
            brightness,
            contrast,
        },
    })
}

fn jitter(rng: &mut impl Rng, range: f64) -> f64 {
    if range == 0.0 {
        0.0
    } else {
        rng.gen_range(-range..=range)
    }
}

pub(crate) fn flip_horizontal(img: &mut SynthImage) {
    let s = img.size;
    for row in img.pixels.chunks_mut(s) {
        row.reverse();
    }
}

/// `count` boxes with area in `scale` and aspect (w/h) in `aspect`.
pub fn sample_patch_boxes(
    count: usize,
    scale: (f64, f64),
    aspect: (f64, f64),
    seed: u64,
) -> Result<Vec<PatchBox>> {
    let mut rng = seed::rng(seed, &[0xB0C5]);
    sample_boxes_with(&mut rng, count, scale, aspect)
}

pub fn sample_boxes_with(
    rng: &mut impl Rng,
    count: usize,
    scale: (f64, f64),
    aspect: (f64, f64),
) -> Result<Vec<PatchBox>> {
    if count == 0 {
        return Err(Error::Config("patch count must be ≥ 1".into()));
    }
    (0..count).map(|_| sample_box(rng, scale, aspect)).collect()
}

fn sample_box(rng: &mut impl Rng, scale: (f64, f64), aspect: (f64, f64)) -> Result<PatchBox> {
    let (smin, smax) = scale;
    if !(smin > 0.0 && smin <= smax && smax <= 1.0) {
        return Err(Error::Config(format!("scale range {scale:?} outside (0, 1]")));
    }
    if !(aspect.0 > 0.0 && aspect.0 <= aspect.1) {
        return Err(Error::Config(format!("aspect range {aspect:?}")));
    }
    let (la, lb) = (aspect.0.ln(), aspect.1.ln());
    for _ in 0..MAX_ATTEMPTS {
        let area = if smin == smax { smin } else { rng.gen_range(smin..=smax) };
        let ar = if la == lb { aspect.0 } else { rng.gen_range(la..=lb).exp() };
        let w = (area * ar).sqrt();
        let h = (area / ar).sqrt();
        if w > 1.0 || h > 1.0 {
            continue;
        }
        let cx = if w >= 1.0 { 0.5 } else { rng.gen_range(w / 2.0..=1.0 - w / 2.0) };
        let cy = if h >= 1.0 { 0.5 } else { rng.gen_range(h / 2.0..=1.0 - h / 2.0) };
        return Ok(PatchBox { cx, cy, w, h });
    }
    Err(Error::Sampling(format!(
        "no box with scale {scale:?} and aspect {aspect:?} after {MAX_ATTEMPTS} attempts"
    )))
}

/// Bilinear crop-and-resize (half-pixel centres, edge clamping).
pub fn crop_resize(image: &SynthImage, bbox: &PatchBox, out_size: usize) -> SynthImage {
    let s = image.size as f64;
    let c = image.channels;
    let n = image.size;
    let sx = bbox.w * s / out_size as f64;
    let sy = bbox.h * s / out_size as f64;
    let x0 = bbox.x0() * s;
    let y0 = bbox.y0() * s;
    let max = (n - 1) as f64;

    let taps = |o: usize, origin: f64, step: f64| {
        let src = (origin + (o as f64 + 0.5) * step - 0.5).clamp(0.0, max);
        let lo = src.floor() as usize;
        let hi = (lo + 1).min(n - 1);
        (lo, hi, src - lo as f64)
    };
    let xs: Vec<_> = (0..out_size).map(|o| taps(o, x0, sx)).collect();
    let ys: Vec<_> = (0..out_size).map(|o| taps(o, y0, sy)).collect();

    let mut px = vec![0.0; c * out_size * out_size];
    for ch in 0..c {
        for (oy, &(y0i, y1i, ty)) in ys.iter().enumerate() {
            for (ox, &(x0i, x1i, tx)) in xs.iter().enumerate() {
                let v00 = image.at(ch, y0i, x0i);
                let v01 = image.at(ch, y0i, x1i);
                let v10 = image.at(ch, y1i, x0i);
                let v11 = image.at(ch, y1i, x1i);
                let top = v00 + (v01 - v00) * tx;
                let bot = v10 + (v11 - v10) * tx;
                let v = top + (bot - top) * ty;
                px[(ch * out_size + oy) * out_size + ox] = quantize(v.clamp(0.0, 1.0));
            }
        }
    }
    SynthImage {
        pixels: px,
        channels: c,
        size: out_size,
        label: image.label,
        placements: vec![],
    }
}
