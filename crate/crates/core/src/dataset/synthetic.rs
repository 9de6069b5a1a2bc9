//! Synthetic co-registered magnification pyramids.
//!
//! Each specimen is one square canvas of `base_size` pixels. The 40x view is
//! the whole canvas; the 100x/200x/400x views are centred crops of side
//! `base_size * 40 / MF`. Every view is resized to `image_size`.
//!
//! Nuclei-like blobs are planted at four scales, one per magnification, each
//! scale scattered inside the crop window of its magnification and sized so
//! the blobs look alike in every output view. Malignant specimens get dense,
//! dark, pleomorphic blobs; benign specimens get sparse, faint, round ones.
//! Stain colour, background brightness and illumination vary per specimen
//! independently of class. On top of that every view gets its own
//! acquisition drift (gain, tint, contrast, haze, illumination ramp, sensor
//! noise), scaled by `acquisition`, so two magnifications of one specimen
//! share content but not capture conditions.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use image::{imageops, GrayImage, Luma, Rgb, RgbImage};
use rand::Rng as _;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{ClassId, MagnifiedSample};
use crate::error::{Error, Result};
use crate::magnification::MagnificationFactor;
use crate::rng::{self, domain, Rng};

/// Class names in class-id order.
pub const CLASS_NAMES: [&str; 2] = ["benign", "malignant"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_specimens: usize,
    pub n_patients: usize,
    /// Fraction of malignant specimens.
    pub class_balance: f64,
    pub base_size: u32,
    pub image_size: u32,
    pub seed: u64,
    /// Strength of per-view acquisition drift; 0 disables it.
    #[serde(default = "default_acquisition")]
    pub acquisition: f32,
}

fn default_acquisition() -> f32 {
    1.2
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_specimens: 64,
            n_patients: 16,
            class_balance: 0.5,
            base_size: 640,
            image_size: 64,
            seed: 0,
            acquisition: default_acquisition(),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticSpecimen {
    pub sample: MagnifiedSample,
    pub class_name: String,
    /// Planted-blob mask of each view, 255 where a blob covers the pixel.
    pub masks: BTreeMap<MagnificationFactor, GrayImage>,
}

#[derive(Debug, Clone)]
pub struct SyntheticSet {
    pub config: SynthConfig,
    pub specimens: Vec<SyntheticSpecimen>,
}

impl SyntheticSet {
    pub fn samples(&self) -> Vec<MagnifiedSample> {
        self.specimens.iter().map(|s| s.sample.clone()).collect()
    }
}

/// One row of `index.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub specimen_id: String,
    pub patient_id: String,
    pub label: ClassId,
    pub class_name: String,
    pub images: BTreeMap<MagnificationFactor, PathBuf>,
    pub masks: BTreeMap<MagnificationFactor, PathBuf>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SyntheticIndex {
    pub config: SynthConfig,
    pub class_names: Vec<String>,
    pub specimens: Vec<IndexEntry>,
}

struct Plan {
    specimen_id: String,
    patient_id: String,
    label: ClassId,
}

fn validate(cfg: &SynthConfig) -> Result<()> {
    if !(cfg.class_balance > 0.0 && cfg.class_balance < 1.0) {
        return Err(Error::InvalidBalance(cfg.class_balance));
    }
    if cfg.n_patients < 2 || cfg.n_specimens < cfg.n_patients {
        return Err(Error::Config(format!(
            "need n_specimens >= n_patients >= 2, got {} specimens / {} patients",
            cfg.n_specimens, cfg.n_patients
        )));
    }
    if cfg.base_size < 640 {
        return Err(Error::Config(format!(
            "base_size must be >= 640, got {}",
            cfg.base_size
        )));
    }
    if !(cfg.acquisition >= 0.0 && cfg.acquisition <= 2.0) {
        return Err(Error::Config(format!(
            "acquisition strength must lie in [0, 2], got {}",
            cfg.acquisition
        )));
    }
    if cfg.image_size < 8 {
        return Err(Error::Config("image_size must be >= 8".into()));
    }
    Ok(())
}

/// Each patient carries one class; specimens of a class are dealt
/// round-robin over that class's patients.
fn assign(cfg: &SynthConfig) -> Vec<Plan> {
    let round = |x: f64| (x + 0.5).floor() as usize;
    let mal_patients = round(cfg.n_patients as f64 * cfg.class_balance).clamp(1, cfg.n_patients - 1);
    let ben_patients = cfg.n_patients - mal_patients;
    let mal_specimens = round(cfg.n_specimens as f64 * cfg.class_balance)
        .clamp(mal_patients, cfg.n_specimens - ben_patients);
    let ben_specimens = cfg.n_specimens - mal_specimens;

    let mut plans = Vec::with_capacity(cfg.n_specimens);
    let mut patient_offset = 0;
    for (label, n_pat, n_spec) in [(0, ben_patients, ben_specimens), (1, mal_patients, mal_specimens)] {
        for i in 0..n_spec {
            plans.push((label, patient_offset + i % n_pat));
        }
        patient_offset += n_pat;
    }
    plans
        .into_iter()
        .enumerate()
        .map(|(i, (label, patient))| Plan {
            specimen_id: format!("s{i:04}"),
            patient_id: format!("p{patient:03}"),
            label,
        })
        .collect()
}

/// Side of the centred crop window (canvas pixels) for a magnification.
pub fn crop_side(base_size: u32, mf: MagnificationFactor) -> u32 {
    ((base_size as u64 * 40 + mf.value() as u64 / 2) / mf.value() as u64) as u32
}

fn crop_origin(base_size: u32, mf: MagnificationFactor) -> u32 {
    (base_size - crop_side(base_size, mf)) / 2
}

struct Canvas {
    size: u32,
    rgb: Vec<[f32; 3]>,
    mask: Vec<bool>,
}

struct ClassModel {
    count: (usize, usize),
    radius_out: (f32, f32),
    opacity: (f32, f32),
    elongation: f32,
}

fn class_model(label: ClassId) -> ClassModel {
    if label == 1 {
        ClassModel {
            count: (16, 24),
            radius_out: (1.2, 3.0),
            opacity: (0.75, 0.95),
            elongation: 0.6,
        }
    } else {
        ClassModel {
            count: (5, 9),
            radius_out: (1.8, 2.3),
            opacity: (0.3, 0.45),
            elongation: 0.1,
        }
    }
}

fn render(cfg: &SynthConfig, label: ClassId, rng: &mut Rng) -> Canvas {
    let c = cfg.base_size;
    let n = (c * c) as usize;

    // class-independent specimen nuisance
    let brightness: f32 = rng.gen_range(0.82..1.0);
    let stroma = [
        brightness * rng.gen_range(0.88..0.98),
        brightness * rng.gen_range(0.70..0.85),
        brightness * rng.gen_range(0.78..0.92),
    ];
    let nucleus = [
        rng.gen_range(0.20..0.40),
        rng.gen_range(0.10..0.25),
        rng.gen_range(0.40..0.60),
    ];
    let waves: Vec<(f32, f32, f32, f32)> = (0..3)
        .map(|_| {
            (
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(0.0..std::f32::consts::TAU),
                rng.gen_range(0.01..0.05),
            )
        })
        .collect();

    let mut rgb = Vec::with_capacity(n);
    for y in 0..c {
        for x in 0..c {
            let (u, v) = (x as f32 / c as f32, y as f32 / c as f32);
            let shade: f32 = waves
                .iter()
                .map(|&(fx, fy, ph, amp)| amp * (std::f32::consts::TAU * (fx * u + fy * v) + ph).sin())
                .sum();
            let noise = rng.gen_range(-0.03f32..0.03);
            let k = 1.0 + shade + noise;
            rgb.push([stroma[0] * k, stroma[1] * k, stroma[2] * k]);
        }
    }
    let mut canvas = Canvas {
        size: c,
        rgb,
        mask: vec![false; n],
    };

    let model = class_model(label);
    for mf in MagnificationFactor::ALL {
        let side = crop_side(c, mf) as f32;
        let origin = crop_origin(c, mf) as f32;
        // canvas pixels per output pixel at this magnification
        let scale = side / cfg.image_size as f32;
        let count = rng.gen_range(model.count.0..=model.count.1);
        for _ in 0..count {
            let r_out = rng.gen_range(model.radius_out.0..=model.radius_out.1);
            let r = r_out * scale;
            let margin = r.min(side / 4.0);
            let cx = origin + rng.gen_range(margin..(side - margin));
            let cy = origin + rng.gen_range(margin..(side - margin));
            let aspect = 1.0 + rng.gen_range(0.0..=model.elongation);
            let angle = rng.gen_range(0.0..std::f32::consts::PI);
            let opacity = rng.gen_range(model.opacity.0..=model.opacity.1);
            stamp_blob(&mut canvas, cx, cy, r, aspect, angle, opacity, nucleus);
        }
    }
    canvas
}

#[allow(clippy::too_many_arguments)]
fn stamp_blob(
    canvas: &mut Canvas,
    cx: f32,
    cy: f32,
    r: f32,
    aspect: f32,
    angle: f32,
    opacity: f32,
    color: [f32; 3],
) {
    let size = canvas.size as i64;
    let reach = (r * aspect + 1.5).ceil() as i64;
    let (sin, cos) = angle.sin_cos();
    let x0 = (cx as i64 - reach).max(0);
    let x1 = (cx as i64 + reach).min(size - 1);
    let y0 = (cy as i64 - reach).max(0);
    let y1 = (cy as i64 + reach).min(size - 1);
    for y in y0..=y1 {
        for x in x0..=x1 {
            let dx = x as f32 + 0.5 - cx;
            let dy = y as f32 + 0.5 - cy;
            let a = (dx * cos + dy * sin) / aspect;
            let b = -dx * sin + dy * cos;
            let d = (a * a + b * b).sqrt() / r.max(0.5);
            // soft edge over the outer 20% of the radius
            let cover = ((1.0 - d) / 0.2).clamp(0.0, 1.0);
            if cover <= 0.0 {
                continue;
            }
            let alpha = opacity * cover;
            let idx = (y * size + x) as usize;
            let px = &mut canvas.rgb[idx];
            for ch in 0..3 {
                px[ch] = px[ch] * (1.0 - alpha) + color[ch] * alpha;
            }
            if cover >= 0.5 {
                canvas.mask[idx] = true;
            }
        }
    }
}

fn to_rgb8(canvas: &Canvas) -> RgbImage {
    let mut img = RgbImage::new(canvas.size, canvas.size);
    for (i, p) in img.pixels_mut().enumerate() {
        let v = canvas.rgb[i];
        *p = Rgb([
            (v[0].clamp(0.0, 1.0) * 255.0).round() as u8,
            (v[1].clamp(0.0, 1.0) * 255.0).round() as u8,
            (v[2].clamp(0.0, 1.0) * 255.0).round() as u8,
        ]);
    }
    img
}

fn mask_image(canvas: &Canvas) -> GrayImage {
    let mut img = GrayImage::new(canvas.size, canvas.size);
    for (i, p) in img.pixels_mut().enumerate() {
        *p = Luma([if canvas.mask[i] { 255 } else { 0 }]);
    }
    img
}

/// Crop + resize used for both image and mask views.
pub fn magnified_view<P>(
    full: &image::ImageBuffer<P, Vec<u8>>,
    mf: MagnificationFactor,
    out: u32,
) -> image::ImageBuffer<P, Vec<u8>>
where
    P: image::Pixel<Subpixel = u8> + 'static,
{
    let c = full.width();
    let side = crop_side(c, mf);
    let o = crop_origin(c, mf);
    let crop = imageops::crop_imm(full, o, o, side, side).to_image();
    imageops::resize(&crop, out, out, imageops::FilterType::Triangle)
}

/// Per-view capture conditions, applied in place.
fn acquire(img: &mut RgbImage, strength: f32, rng: &mut Rng) {
    if strength == 0.0 {
        return;
    }
    let s = strength;
    let gain = 1.0 + s * rng.gen_range(-0.35f32..0.25);
    let tint: Vec<f32> = (0..3).map(|_| 1.0 + s * rng.gen_range(-0.2f32..0.2)).collect();
    let contrast = (s * rng.gen_range(-0.5f32..0.5)).exp();
    let haze = s * rng.gen_range(0.0f32..0.25);
    let ramp = s * rng.gen_range(0.0f32..0.3);
    let theta = rng.gen_range(0.0..std::f32::consts::TAU);
    let sigma = s * rng.gen_range(0.0f32..0.05);
    let noise = Normal::new(0.0f32, sigma.max(1e-9)).expect("finite sigma");

    let (w, h) = img.dimensions();
    let n = (w * h) as f32;
    let mut mean = [0.0f32; 3];
    for p in img.pixels() {
        for c in 0..3 {
            mean[c] += p.0[c] as f32 / 255.0 / n;
        }
    }
    let (st, ct) = theta.sin_cos();
    for (x, y, p) in img.enumerate_pixels_mut() {
        let along = (x as f32 / w as f32 - 0.5) * ct + (y as f32 / h as f32 - 0.5) * st;
        let light = 1.0 + ramp * along;
        for c in 0..3 {
            let v = p.0[c] as f32 / 255.0;
            let mut v = ((v - mean[c]) * contrast + mean[c]) * gain * tint[c] * light;
            v = v * (1.0 - haze) + haze;
            v += noise.sample(rng);
            p.0[c] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
        }
    }
}

fn build_specimen(cfg: &SynthConfig, idx: usize, plan: &Plan) -> Result<SyntheticSpecimen> {
    let mut rng = rng::stream(cfg.seed, &[domain::SYNTH, idx as u64]);
    let canvas = render(cfg, plan.label, &mut rng);
    let full = to_rgb8(&canvas);
    let full_mask = mask_image(&canvas);
    let mut images = BTreeMap::new();
    let mut masks = BTreeMap::new();
    for mf in MagnificationFactor::ALL {
        let mut view_rng = rng::stream(cfg.seed, &[domain::SYNTH, idx as u64, 1 + mf.index() as u64]);
        let mut view = magnified_view(&full, mf, cfg.image_size);
        acquire(&mut view, cfg.acquisition, &mut view_rng);
        images.insert(mf, view);
        let mut m = magnified_view(&full_mask, mf, cfg.image_size);
        for p in m.pixels_mut() {
            p.0[0] = if p.0[0] > 0 { 255 } else { 0 };
        }
        masks.insert(mf, m);
    }
    let sample = MagnifiedSample::new(&plan.specimen_id, &plan.patient_id, plan.label, images)?;
    Ok(SyntheticSpecimen {
        sample,
        class_name: CLASS_NAMES[plan.label].to_string(),
        masks,
    })
}

/// Renders the synthetic set in memory. Output is a pure function of `cfg`.
pub fn generate_synthetic(cfg: &SynthConfig) -> Result<SyntheticSet> {
    validate(cfg)?;
    let plans = assign(cfg);
    let specimens = plans
        .par_iter()
        .enumerate()
        .map(|(i, p)| build_specimen(cfg, i, p))
        .collect::<Result<Vec<_>>>()?;
    Ok(SyntheticSet {
        config: cfg.clone(),
        specimens,
    })
}

/// Writes images in the canonical layout, masks under `masks/`, and
/// `index.json`. Paths in the index are relative to `out`.
pub fn write_synthetic(set: &SyntheticSet, out: &Path) -> Result<SyntheticIndex> {
    fs::create_dir_all(out.join("masks"))?;
    let entries = set
        .specimens
        .par_iter()
        .map(|s| -> Result<IndexEntry> {
            let sample = &s.sample;
            let mut images = BTreeMap::new();
            let mut masks = BTreeMap::new();
            for mf in MagnificationFactor::ALL {
                let rel = PathBuf::from(&s.class_name)
                    .join(&sample.patient_id)
                    .join(&sample.specimen_id)
                    .join(mf.dir_name())
                    .join(format!("{}_{}.png", sample.specimen_id, mf.value()));
                fs::create_dir_all(out.join(&rel).parent().expect("has parent"))?;
                sample.image(mf).expect("complete").save(out.join(&rel))?;
                images.insert(mf, rel);

                let mrel = PathBuf::from("masks").join(format!("{}_{}.png", sample.specimen_id, mf.value()));
                s.masks[&mf].save(out.join(&mrel))?;
                masks.insert(mf, mrel);
            }
            Ok(IndexEntry {
                specimen_id: sample.specimen_id.clone(),
                patient_id: sample.patient_id.clone(),
                label: CLASS_NAMES
                    .iter()
                    .position(|c| *c == s.class_name)
                    .unwrap_or(0),
                class_name: s.class_name.clone(),
                images,
                masks,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let index = SyntheticIndex {
        config: set.config.clone(),
        class_names: CLASS_NAMES.iter().map(|s| s.to_string()).collect(),
        specimens: entries,
    };
    fs::write(out.join("index.json"), serde_json::to_string_pretty(&index)?)?;
    Ok(index)
}
