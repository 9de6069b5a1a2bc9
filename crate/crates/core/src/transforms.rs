//! Stochastic augmentation. One [`AugmentationParams`] draw is applied to
//! both views of a positive pair so the views differ only by magnification.
//!
//! Pipeline order: crop, resize (bilinear, antialiased), flips, rotation by
//! a multiple of 90 degrees, affine shear/translate, colour jitter.

use std::sync::Arc;

use image::{imageops, Rgb, RgbImage};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sampler::ViewPair;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CropBox {
    pub x: u32,
    pub y: u32,
    pub w: u32,
    pub h: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AugmentationParams {
    pub hflip: bool,
    pub vflip: bool,
    /// One of 0, 90, 180, 270 (clockwise).
    pub rotation_deg: u32,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    /// Fraction of a full hue turn, within [-0.1, 0.1].
    pub hue_shift: f32,
    pub crop_box: Option<CropBox>,
    pub shear_deg: f32,
    /// Translation as a fraction of the output side.
    pub translate: (f32, f32),
    pub output_size: u32,
}

impl AugmentationParams {
    pub fn identity(output_size: u32) -> Self {
        Self {
            hflip: false,
            vflip: false,
            rotation_deg: 0,
            brightness: 1.0,
            contrast: 1.0,
            saturation: 1.0,
            hue_shift: 0.0,
            crop_box: None,
            shear_deg: 0.0,
            translate: (0.0, 0.0),
            output_size,
        }
    }

    pub fn is_identity(&self) -> bool {
        *self == Self::identity(self.output_size)
    }
}

/// Jitter ranges. Colour factors are drawn from `[1 - j, 1 + j]`, hue from
/// `[-hue, hue]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AugmentationPolicy {
    pub hflip_prob: f64,
    pub vflip_prob: f64,
    pub rotate90: bool,
    pub brightness: f32,
    pub contrast: f32,
    pub saturation: f32,
    pub hue: f32,
    /// Random crop side as a fraction of the source side; `None` disables.
    pub crop_scale: Option<(f32, f32)>,
    pub max_shear_deg: f32,
    pub max_translate: f32,
    pub output_size: u32,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Self::pretrain(32)
    }
}

impl AugmentationPolicy {
    /// Colour jitter, flips and right-angle rotation. No crop: the two
    /// views already differ by magnification.
    pub fn pretrain(output_size: u32) -> Self {
        Self {
            hflip_prob: 0.5,
            vflip_prob: 0.5,
            rotate90: true,
            brightness: 0.2,
            contrast: 0.2,
            saturation: 0.2,
            hue: 0.05,
            crop_scale: None,
            max_shear_deg: 0.0,
            max_translate: 0.0,
            output_size,
        }
    }

    /// Adds random crop and a mild affine to the pre-training policy.
    pub fn finetune(output_size: u32) -> Self {
        Self {
            crop_scale: Some((0.8, 1.0)),
            max_shear_deg: 5.0,
            max_translate: 0.05,
            ..Self::pretrain(output_size)
        }
    }

    /// Resize only.
    pub fn none(output_size: u32) -> Self {
        Self {
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            rotate90: false,
            brightness: 0.0,
            contrast: 0.0,
            saturation: 0.0,
            hue: 0.0,
            crop_scale: None,
            max_shear_deg: 0.0,
            max_translate: 0.0,
            output_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("augmentation policy: {m}")));
        if !(0.0..=1.0).contains(&self.hflip_prob) || !(0.0..=1.0).contains(&self.vflip_prob) {
            return bad("flip probabilities must lie in [0, 1]");
        }
        for (name, j) in [
            ("brightness", self.brightness),
            ("contrast", self.contrast),
            ("saturation", self.saturation),
        ] {
            if !(0.0..1.0).contains(&j) {
                return bad(&format!("{name} jitter must lie in [0, 1)"));
            }
        }
        if !(0.0..=0.1).contains(&self.hue) {
            return bad("hue jitter must lie in [0, 0.1]");
        }
        if let Some((lo, hi)) = self.crop_scale {
            if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
                return bad("crop scale must satisfy 0 < lo <= hi <= 1");
            }
        }
        if self.output_size == 0 {
            return bad("output size must be positive");
        }
        Ok(())
    }
}

fn jitter<R: rand::Rng + ?Sized>(rng: &mut R, j: f32) -> f32 {
    if j == 0.0 {
        1.0
    } else {
        rng.gen_range(1.0 - j..=1.0 + j)
    }
}

fn symmetric<R: rand::Rng + ?Sized>(rng: &mut R, m: f32) -> f32 {
    if m == 0.0 {
        0.0
    } else {
        rng.gen_range(-m..=m)
    }
}

/// One concrete parameter draw. `source` is the (width, height) the crop box
/// must fit inside.
pub fn sample_params<R: rand::Rng + ?Sized>(
    policy: &AugmentationPolicy,
    source: (u32, u32),
    rng: &mut R,
) -> AugmentationParams {
    let hflip = policy.hflip_prob > 0.0 && rng.gen_bool(policy.hflip_prob);
    let vflip = policy.vflip_prob > 0.0 && rng.gen_bool(policy.vflip_prob);
    let rotation_deg = if policy.rotate90 {
        90 * rng.gen_range(0..4u32)
    } else {
        0
    };
    let brightness = jitter(rng, policy.brightness);
    let contrast = jitter(rng, policy.contrast);
    let saturation = jitter(rng, policy.saturation);
    let hue_shift = symmetric(rng, policy.hue.min(0.1));
    let crop_box = policy.crop_scale.map(|(lo, hi)| {
        let (w, h) = source;
        let side_frac = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        let cw = ((w as f32 * side_frac).round() as u32).clamp(1, w);
        let ch = ((h as f32 * side_frac).round() as u32).clamp(1, h);
        let x = rng.gen_range(0..=w - cw);
        let y = rng.gen_range(0..=h - ch);
        CropBox { x, y, w: cw, h: ch }
    });
    let shear_deg = symmetric(rng, policy.max_shear_deg);
    let translate = (
        symmetric(rng, policy.max_translate),
        symmetric(rng, policy.max_translate),
    );
    AugmentationParams {
        hflip,
        vflip,
        rotation_deg,
        brightness,
        contrast,
        saturation,
        hue_shift,
        crop_box,
        shear_deg,
        translate,
        output_size: policy.output_size,
    }
}

/// Pinned resize used everywhere images are scaled.
pub fn resize(img: &RgbImage, size: u32) -> RgbImage {
    if img.dimensions() == (size, size) {
        return img.clone();
    }
    imageops::resize(img, size, size, imageops::FilterType::Triangle)
}

fn affine(img: &RgbImage, shear_deg: f32, translate: (f32, f32)) -> RgbImage {
    let (w, h) = img.dimensions();
    let (cx, cy) = (w as f32 / 2.0, h as f32 / 2.0);
    let shear = shear_deg.to_radians().tan();
    let (tx, ty) = (translate.0 * w as f32, translate.1 * h as f32);
    let mut out = RgbImage::new(w, h);
    for (x, y, px) in out.enumerate_pixels_mut() {
        // inverse map: output -> source, shear along x about the centre
        let yo = y as f32 + 0.5 - cy - ty;
        let xo = x as f32 + 0.5 - cx - tx - shear * yo;
        let sx = xo + cx - 0.5;
        let sy = yo + cy - 0.5;
        *px = bilinear_clamped(img, sx, sy);
    }
    out
}

fn bilinear_clamped(img: &RgbImage, x: f32, y: f32) -> Rgb<u8> {
    let (w, h) = img.dimensions();
    let x = x.clamp(0.0, (w - 1) as f32);
    let y = y.clamp(0.0, (h - 1) as f32);
    let x0 = x.floor() as u32;
    let y0 = y.floor() as u32;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f32;
    let fy = y - y0 as f32;
    let p = |xx, yy| img.get_pixel(xx, yy).0;
    let (a, b, c, d) = (p(x0, y0), p(x1, y0), p(x0, y1), p(x1, y1));
    let mut outp = [0u8; 3];
    for ch in 0..3 {
        let top = a[ch] as f32 * (1.0 - fx) + b[ch] as f32 * fx;
        let bot = c[ch] as f32 * (1.0 - fx) + d[ch] as f32 * fx;
        outp[ch] = (top * (1.0 - fy) + bot * fy).round().clamp(0.0, 255.0) as u8;
    }
    Rgb(outp)
}

fn rgb_to_hsv(r: f32, g: f32, b: f32) -> (f32, f32, f32) {
    let max = r.max(g).max(b);
    let min = r.min(g).min(b);
    let d = max - min;
    let h = if d == 0.0 {
        0.0
    } else if max == r {
        ((g - b) / d).rem_euclid(6.0) / 6.0
    } else if max == g {
        ((b - r) / d + 2.0) / 6.0
    } else {
        ((r - g) / d + 4.0) / 6.0
    };
    let s = if max == 0.0 { 0.0 } else { d / max };
    (h, s, max)
}

fn hsv_to_rgb(h: f32, s: f32, v: f32) -> (f32, f32, f32) {
    let h6 = h.rem_euclid(1.0) * 6.0;
    let i = h6.floor();
    let f = h6 - i;
    let p = v * (1.0 - s);
    let q = v * (1.0 - s * f);
    let t = v * (1.0 - s * (1.0 - f));
    match i as u32 % 6 {
        0 => (v, t, p),
        1 => (q, v, p),
        2 => (p, v, t),
        3 => (p, q, v),
        4 => (t, p, v),
        _ => (v, p, q),
    }
}

fn luma(p: [f32; 3]) -> f32 {
    0.299 * p[0] + 0.587 * p[1] + 0.114 * p[2]
}

fn color_jitter(img: &mut RgbImage, p: &AugmentationParams) {
    if p.brightness == 1.0 && p.contrast == 1.0 && p.saturation == 1.0 && p.hue_shift == 0.0 {
        return;
    }
    let mut px: Vec<[f32; 3]> = img
        .pixels()
        .map(|q| [q.0[0] as f32 / 255.0, q.0[1] as f32 / 255.0, q.0[2] as f32 / 255.0])
        .collect();
    for v in px.iter_mut() {
        for c in v.iter_mut() {
            *c = (*c * p.brightness).clamp(0.0, 1.0);
        }
    }
    if p.contrast != 1.0 {
        let mean = px.iter().map(|v| luma(*v)).sum::<f32>() / px.len() as f32;
        for v in px.iter_mut() {
            for c in v.iter_mut() {
                *c = (mean + (*c - mean) * p.contrast).clamp(0.0, 1.0);
            }
        }
    }
    if p.saturation != 1.0 {
        for v in px.iter_mut() {
            let g = luma(*v);
            for c in v.iter_mut() {
                *c = (g + (*c - g) * p.saturation).clamp(0.0, 1.0);
            }
        }
    }
    if p.hue_shift != 0.0 {
        for v in px.iter_mut() {
            let (h, s, val) = rgb_to_hsv(v[0], v[1], v[2]);
            let (r, g, b) = hsv_to_rgb(h + p.hue_shift, s, val);
            *v = [r, g, b];
        }
    }
    for (q, v) in img.pixels_mut().zip(px) {
        *q = Rgb([
            (v[0] * 255.0).round().clamp(0.0, 255.0) as u8,
            (v[1] * 255.0).round().clamp(0.0, 255.0) as u8,
            (v[2] * 255.0).round().clamp(0.0, 255.0) as u8,
        ]);
    }
}

/// Single-view transform. Pure: equal inputs give bit-identical outputs.
pub fn transform(params: &AugmentationParams, img: &RgbImage) -> Result<RgbImage> {
    let (w, h) = img.dimensions();
    if w == 0 || h == 0 {
        return Err(Error::DegenerateImage("empty source image".into()));
    }
    if params.output_size == 0 {
        return Err(Error::DegenerateImage("zero output size".into()));
    }
    let cropped;
    let src = match params.crop_box {
        Some(b) => {
            if b.w == 0 || b.h == 0 {
                return Err(Error::DegenerateImage("zero-area crop".into()));
            }
            if b.x + b.w > w || b.y + b.h > h {
                return Err(Error::DegenerateImage(format!(
                    "crop {b:?} outside {w}x{h} image"
                )));
            }
            cropped = imageops::crop_imm(img, b.x, b.y, b.w, b.h).to_image();
            &cropped
        }
        None => img,
    };
    let mut out = resize(src, params.output_size);
    if params.hflip {
        imageops::flip_horizontal_in_place(&mut out);
    }
    if params.vflip {
        imageops::flip_vertical_in_place(&mut out);
    }
    out = match params.rotation_deg % 360 {
        0 => out,
        90 => imageops::rotate90(&out),
        180 => imageops::rotate180(&out),
        270 => imageops::rotate270(&out),
        other => {
            return Err(Error::Config(format!(
                "rotation must be a multiple of 90, got {other}"
            )))
        }
    };
    if params.shear_deg != 0.0 || params.translate != (0.0, 0.0) {
        out = affine(&out, params.shear_deg, params.translate);
    }
    color_jitter(&mut out, params);
    Ok(out)
}

/// Applies one parameter draw to both views.
pub fn apply_uniform(params: &AugmentationParams, pair: &ViewPair) -> Result<ViewPair> {
    Ok(ViewPair {
        specimen_id: pair.specimen_id.clone(),
        mf1: pair.mf1,
        mf2: pair.mf2,
        view1: Arc::new(transform(params, &pair.view1)?),
        view2: Arc::new(transform(params, &pair.view2)?),
    })
}

/// Applies independent draws to each view; the non-shared ablation.
pub fn apply_independent(
    p1: &AugmentationParams,
    p2: &AugmentationParams,
    pair: &ViewPair,
) -> Result<ViewPair> {
    Ok(ViewPair {
        specimen_id: pair.specimen_id.clone(),
        mf1: pair.mf1,
        mf2: pair.mf2,
        view1: Arc::new(transform(p1, &pair.view1)?),
        view2: Arc::new(transform(p2, &pair.view2)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::magnification::MagnificationFactor;
    use crate::rng;
    use rand::Rng;

    fn textured(w: u32, h: u32, seed: u64) -> RgbImage {
        let mut r = rng::stream(seed, &[]);
        RgbImage::from_fn(w, h, |_, _| Rgb([r.gen(), r.gen(), r.gen()]))
    }

    fn pair_of(a: RgbImage, b: RgbImage) -> ViewPair {
        ViewPair {
            specimen_id: "s".into(),
            mf1: MagnificationFactor::X40,
            mf2: MagnificationFactor::X100,
            view1: Arc::new(a),
            view2: Arc::new(b),
        }
    }

    #[test]
    fn sampling_is_deterministic_and_populated() {
        let pol = AugmentationPolicy::pretrain(32);
        let a = sample_params(&pol, (64, 64), &mut rng::stream(0, &[]));
        let b = sample_params(&pol, (64, 64), &mut rng::stream(0, &[]));
        assert_eq!(a, b);
        assert_eq!(a.output_size, 32);
        assert!(a.crop_box.is_none());
        assert!((0.8..=1.2).contains(&a.brightness));
        assert!((-0.05..=0.05).contains(&a.hue_shift));
    }

    #[test]
    fn zero_policy_is_identity() {
        let pol = AugmentationPolicy::none(16);
        let mut r = rng::stream(9, &[]);
        for _ in 0..20 {
            assert!(sample_params(&pol, (40, 40), &mut r).is_identity());
        }
    }

    #[test]
    fn finetune_policy_crops_inside() {
        let pol = AugmentationPolicy::finetune(32);
        let mut r = rng::stream(2, &[]);
        for _ in 0..200 {
            let p = sample_params(&pol, (50, 40), &mut r);
            let b = p.crop_box.unwrap();
            assert!(b.x + b.w <= 50 && b.y + b.h <= 40);
            assert!(p.shear_deg.abs() <= 5.0);
            assert!(p.translate.0.abs() <= 0.05 && p.translate.1.abs() <= 0.05);
        }
    }

    #[test]
    fn identity_equals_resize() {
        let img = textured(48, 48, 1);
        let out = transform(&AugmentationParams::identity(24), &img).unwrap();
        assert_eq!(out, resize(&img, 24));
        let same = transform(&AugmentationParams::identity(48), &img).unwrap();
        assert_eq!(same, img);
    }

    #[test]
    fn hflip_keeps_identical_views_identical() {
        let img = textured(20, 20, 4);
        let mut p = AugmentationParams::identity(20);
        p.hflip = true;
        let out = apply_uniform(&p, &pair_of(img.clone(), img.clone())).unwrap();
        assert_eq!(out.view1, out.view2);
        assert_eq!(out.view1.get_pixel(0, 0), img.get_pixel(19, 0));
        assert_eq!(out.mf1, MagnificationFactor::X40);
    }

    #[test]
    fn rotation_is_exact() {
        let img = textured(8, 8, 5);
        let mut p = AugmentationParams::identity(8);
        p.rotation_deg = 90;
        let once = transform(&p, &img).unwrap();
        p.rotation_deg = 270;
        let back = transform(&p, &once).unwrap();
        assert_eq!(back, img);
    }

    #[test]
    fn degenerate_crop() {
        let img = textured(10, 10, 0);
        let mut p = AugmentationParams::identity(8);
        p.crop_box = Some(CropBox { x: 2, y: 2, w: 0, h: 5 });
        assert!(matches!(transform(&p, &img), Err(Error::DegenerateImage(_))));
        p.crop_box = Some(CropBox { x: 8, y: 0, w: 5, h: 5 });
        assert!(matches!(transform(&p, &img), Err(Error::DegenerateImage(_))));
    }

    #[test]
    fn hsv_roundtrip() {
        for &(r, g, b) in &[(0.2f32, 0.5f32, 0.9f32), (1.0, 0.0, 0.0), (0.3, 0.3, 0.3)] {
            let (h, s, v) = rgb_to_hsv(r, g, b);
            let (r2, g2, b2) = hsv_to_rgb(h, s, v);
            assert!((r - r2).abs() < 1e-5 && (g - g2).abs() < 1e-5 && (b - b2).abs() < 1e-5);
        }
    }

    #[test]
    fn output_shape_and_purity() {
        let pol = AugmentationPolicy::finetune(24);
        let mut r = rng::stream(3, &[]);
        let img = textured(37, 29, 8);
        for _ in 0..50 {
            let p = sample_params(&pol, img.dimensions(), &mut r);
            let a = transform(&p, &img).unwrap();
            let b = transform(&p, &img).unwrap();
            assert_eq!(a.dimensions(), (24, 24));
            assert_eq!(a, b);
        }
    }
}
