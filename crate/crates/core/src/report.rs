//! Qualitative artifacts: feature dumps for 2-D projection, Grad-CAM maps,
//! and mean±std result tables.

use std::fmt::Write as _;
use std::fs;
use std::io::{Read, Write};
use std::path::Path;
use std::str::FromStr;

use image::{Rgb, RgbImage};
use ndarray::{Array1, Array2, Array3, Axis};
use serde::{Deserialize, Serialize};

use crate::dataset::{ClassId, MagnifiedSample};
use crate::error::{Error, Result};
use crate::eval::{EvalReport, MeanStd};
use crate::magnification::MagnificationFactor;
use crate::model::{images_to_batch, params_hash, ClassifierHead, EncoderAdapter};
use crate::train::encode_all;
use crate::transforms::resize;

/// Last convolutional block of the desk-scale encoders.
pub const DEFAULT_CAM_LAYER: &str = "block4";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureRow {
    pub specimen_id: String,
    pub magnification: MagnificationFactor,
    pub label: ClassId,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureDump {
    /// Hash of the encoder weights that produced the rows.
    pub encoder_id: String,
    pub rows: Vec<FeatureRow>,
}

impl FeatureDump {
    pub fn dim(&self) -> usize {
        self.rows.first().map_or(0, |r| r.features.len())
    }

    pub fn validate(&self) -> Result<()> {
        let d = self.dim();
        for r in &self.rows {
            if r.features.len() != d {
                return Err(Error::ShapeMismatch {
                    expected: format!("{d} features"),
                    got: format!("{} for {}", r.features.len(), r.specimen_id),
                });
            }
            if r.features.iter().any(|v| !v.is_finite()) {
                return Err(Error::Config(format!("non-finite feature for {}", r.specimen_id)));
            }
        }
        Ok(())
    }

    /// `(rows, d)` feature matrix.
    pub fn matrix(&self) -> Array2<f64> {
        let d = self.dim();
        Array2::from_shape_fn((self.rows.len(), d), |(i, j)| self.rows[i].features[j])
    }

    pub fn labels(&self) -> Vec<ClassId> {
        self.rows.iter().map(|r| r.label).collect()
    }

    /// Columns: `specimen_id, magnification, label, f0..f{d-1}`.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        self.validate()?;
        let mut w = csv::Writer::from_writer(out);
        let mut header = vec!["specimen_id".to_string(), "magnification".into(), "label".into()];
        header.extend((0..self.dim()).map(|i| format!("f{i}")));
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![r.specimen_id.clone(), r.magnification.to_string(), r.label.to_string()];
            rec.extend(r.features.iter().map(|v| format!("{v:e}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(input: R, encoder_id: impl Into<String>) -> Result<Self> {
        let mut r = csv::Reader::from_reader(input);
        let bad = |msg: String| Error::Config(format!("feature csv: {msg}"));
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec?;
            if rec.len() < 3 {
                return Err(bad(format!("row has {} columns", rec.len())));
            }
            let features = rec
                .iter()
                .skip(3)
                .map(|v| v.parse::<f64>().map_err(|e| bad(e.to_string())))
                .collect::<Result<Vec<_>>>()?;
            rows.push(FeatureRow {
                specimen_id: rec[0].to_string(),
                magnification: rec[1].parse()?,
                label: rec[2].parse().map_err(|e: std::num::ParseIntError| bad(e.to_string()))?,
                features,
            });
        }
        let dump = Self {
            encoder_id: encoder_id.into(),
            rows,
        };
        dump.validate()?;
        Ok(dump)
    }
}

/// Eval-mode features for every (specimen, magnification), images resized to
/// the encoder input. Rows follow `data` order, then `magnifications` order.
pub fn export_features(
    encoder: &EncoderAdapter,
    data: &[MagnifiedSample],
    magnifications: &[MagnificationFactor],
) -> Result<FeatureDump> {
    let size = encoder.input_size() as u32;
    let mut keys = Vec::new();
    let mut images = Vec::new();
    for s in data {
        let label = s.label();
        for &mf in magnifications {
            let img = s.image(mf).ok_or_else(|| Error::IncompleteSample(s.specimen_id.clone()))?;
            images.push(resize(img, size));
            keys.push((s.specimen_id.clone(), mf, label));
        }
    }
    let h = encode_all(encoder, &images)?;
    let rows = keys
        .into_iter()
        .zip(h.rows())
        .map(|((specimen_id, magnification, label), f)| FeatureRow {
            specimen_id,
            magnification,
            label,
            features: f.to_vec(),
        })
        .collect();
    let dump = FeatureDump {
        encoder_id: params_hash(encoder),
        rows,
    };
    dump.validate()?;
    Ok(dump)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActivationMap {
    pub source_image_id: String,
    pub target_class: ClassId,
    pub layer: String,
    /// `(H', W')` at the layer's resolution, values in `[0, 1]`.
    pub map: Array2<f64>,
}

/// `relu(sum_k w_k A_k)` with `w_k` the spatial mean of `dy/dA_k`, min-max
/// scaled to `[0, 1]`. An all-zero map stays zero; a constant positive map
/// becomes all ones.
pub fn grad_cam_map(activations: &Array3<f64>, gradients: &Array3<f64>) -> Result<Array2<f64>> {
    if activations.dim() != gradients.dim() {
        return Err(Error::ShapeMismatch {
            expected: format!("{:?}", activations.shape()),
            got: format!("{:?}", gradients.shape()),
        });
    }
    let (k, h, w) = activations.dim();
    let mut map = Array2::<f64>::zeros((h, w));
    if h * w == 0 {
        return Ok(map);
    }
    for c in 0..k {
        let weight = gradients.index_axis(Axis(0), c).mean().unwrap_or(0.0);
        map.scaled_add(weight, &activations.index_axis(Axis(0), c));
    }
    map.mapv_inplace(|v| v.max(0.0));
    let max = map.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let min = map.fold(f64::INFINITY, |a, &b| a.min(b));
    if max <= 0.0 {
        map.fill(0.0);
    } else if max - min == 0.0 {
        map.fill(1.0);
    } else {
        map.mapv_inplace(|v| (v - min) / (max - min));
    }
    Ok(map)
}

/// Grad-CAM of the class logit `target_class` at `layer`, eval mode.
pub fn grad_cam(
    encoder: &EncoderAdapter,
    classifier: &ClassifierHead,
    image: &RgbImage,
    image_id: &str,
    target_class: ClassId,
    layer: &str,
) -> Result<ActivationMap> {
    if target_class >= classifier.n_classes() {
        return Err(Error::Config(format!(
            "target class {target_class} outside the {} classifier outputs",
            classifier.n_classes()
        )));
    }
    let img = resize(image, encoder.input_size() as u32);
    let batch = images_to_batch(&[&img])?;
    // d logit_c / d h is the class row of the classifier weight
    let dh: Array1<f64> = classifier.linear.weight.row(target_class).to_owned();
    let (acts, grads) = encoder.layer_gradient(batch.index_axis(Axis(0), 0), dh.view(), layer)?;
    Ok(ActivationMap {
        source_image_id: image_id.to_string(),
        target_class,
        layer: layer.to_string(),
        map: grad_cam_map(&acts, &grads)?,
    })
}

/// Piecewise-linear "jet" colormap: 0 dark blue, 0.5 green, 1 dark red.
pub fn jet(v: f64) -> [u8; 3] {
    let v = v.clamp(0.0, 1.0);
    let ch = |x: f64| ((1.5 - (4.0 * v - x).abs()).clamp(0.0, 1.0) * 255.0).round() as u8;
    [ch(3.0), ch(2.0), ch(1.0)]
}

fn bilinear(map: &Array2<f64>, y: f64, x: f64) -> f64 {
    let (h, w) = map.dim();
    let y = y.clamp(0.0, (h - 1) as f64);
    let x = x.clamp(0.0, (w - 1) as f64);
    let (y0, x0) = (y.floor() as usize, x.floor() as usize);
    let (y1, x1) = ((y0 + 1).min(h - 1), (x0 + 1).min(w - 1));
    let (fy, fx) = (y - y0 as f64, x - x0 as f64);
    let top = map[[y0, x0]] * (1.0 - fx) + map[[y0, x1]] * fx;
    let bottom = map[[y1, x0]] * (1.0 - fx) + map[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Map upsampled bilinearly to the image, colored with [`jet`] and blended
/// at `alpha`.
pub fn overlay(map: &Array2<f64>, image: &RgbImage, alpha: f64) -> RgbImage {
    let (w, h) = image.dimensions();
    let (mh, mw) = map.dim();
    if mh == 0 || mw == 0 {
        return image.clone();
    }
    RgbImage::from_fn(w, h, |x, y| {
        // pixel centres aligned between the two grids
        let my = (y as f64 + 0.5) * mh as f64 / h as f64 - 0.5;
        let mx = (x as f64 + 0.5) * mw as f64 / w as f64 - 0.5;
        let c = jet(bilinear(map, my, mx));
        let p = image.get_pixel(x, y).0;
        Rgb(std::array::from_fn(|i| {
            ((1.0 - alpha) * p[i] as f64 + alpha * c[i] as f64).round() as u8
        }))
    })
}

/// Writes a 2-D grid in NumPy `.npy` v1.0 layout: little-endian `f64`,
/// C order.
pub fn write_npy(path: &Path, grid: &Array2<f64>) -> Result<()> {
    let (h, w) = grid.dim();
    let mut header = format!("{{'descr': '<f8', 'fortran_order': False, 'shape': ({h}, {w}), }}");
    // magic(6) + version(2) + len(2) + header + '\n' aligned to 64 bytes
    let pad = 64 - (10 + header.len() + 1) % 64;
    header.extend(std::iter::repeat_n(' ', pad % 64));
    header.push('\n');
    let mut bytes = Vec::with_capacity(10 + header.len() + h * w * 8);
    bytes.extend_from_slice(b"\x93NUMPY\x01\x00");
    bytes.extend_from_slice(&(header.len() as u16).to_le_bytes());
    bytes.extend_from_slice(header.as_bytes());
    for v in grid.iter() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    fs::write(path, bytes)?;
    Ok(())
}

/// Reads grids written by [`write_npy`].
pub fn read_npy(path: &Path) -> Result<Array2<f64>> {
    let bytes = fs::read(path)?;
    let bad = || Error::Config(format!("{} is not a 2-D <f8 npy file", path.display()));
    if bytes.len() < 10 || &bytes[..8] != b"\x93NUMPY\x01\x00" {
        return Err(bad());
    }
    let hlen = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let header = std::str::from_utf8(bytes.get(10..10 + hlen).ok_or_else(bad)?).map_err(|_| bad())?;
    if !header.contains("'<f8'") || !header.contains("False") {
        return Err(bad());
    }
    let shape = header
        .split("'shape': (")
        .nth(1)
        .and_then(|s| s.split(')').next())
        .ok_or_else(bad)?;
    let dims: Vec<usize> = shape
        .split(',')
        .map(str::trim)
        .filter(|s| !s.is_empty())
        .map(|s| s.parse().map_err(|_| bad()))
        .collect::<Result<_>>()?;
    let [h, w] = dims[..] else { return Err(bad()) };
    let data = &bytes[10 + hlen..];
    if data.len() != h * w * 8 {
        return Err(bad());
    }
    let values = data
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Array2::from_shape_vec((h, w), values).map_err(|_| bad())
}

/// Table shapes: per-magnification columns, or a single accuracy column for
/// datasets without magnification levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableLayout {
    Breakhis,
    Bach,
    Bisque,
}

impl FromStr for TableLayout {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "breakhis" => Ok(Self::Breakhis),
            "bach" => Ok(Self::Bach),
            "bisque" => Ok(Self::Bisque),
            _ => Err(Error::Config(format!("unknown table layout {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TableMetric {
    Ila,
    Pla,
}

impl FromStr for TableMetric {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "ila" => Ok(Self::Ila),
            "pla" => Ok(Self::Pla),
            _ => Err(Error::Config(format!("unknown metric {s:?}"))),
        }
    }
}

/// Per-fold reports of one method.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct MethodReports {
    pub method: String,
    pub reports: Vec<EvalReport>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Table {
    pub header: Vec<String>,
    pub rows: Vec<(String, Vec<MeanStd>)>,
}

impl Table {
    pub fn to_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&self.header)?;
        for (method, cells) in &self.rows {
            let mut rec = vec![method.clone()];
            rec.extend(cells.iter().map(|c| c.to_string()));
            w.write_record(&rec)?;
        }
        let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
        Ok(String::from_utf8(bytes).expect("utf8"))
    }

    /// Space-aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let mut grid = vec![self.header.clone()];
        for (method, cells) in &self.rows {
            let mut row = vec![method.clone()];
            row.extend(cells.iter().map(|c| c.to_string()));
            grid.push(row);
        }
        let widths: Vec<usize> = (0..self.header.len())
            .map(|c| grid.iter().map(|r| r[c].chars().count()).max().unwrap_or(0))
            .collect();
        let mut out = String::new();
        for (i, row) in grid.iter().enumerate() {
            let line: Vec<String> = row
                .iter()
                .zip(&widths)
                .map(|(cell, &w)| format!("{cell:<w$}"))
                .collect();
            let _ = writeln!(out, "{}", line.join("  ").trim_end());
            if i == 0 {
                let total = widths.iter().sum::<usize>() + 2 * (widths.len() - 1);
                let _ = writeln!(out, "{}", "-".repeat(total));
            }
        }
        out
    }
}

fn pick(report: &EvalReport, mf: Option<MagnificationFactor>, metric: TableMetric) -> Option<f64> {
    let acc = match mf {
        Some(mf) => *report.per_magnification.get(&mf)?,
        None => crate::eval::Accuracy {
            ila: report.ila,
            pla: report.pla,
        },
    };
    Some(match metric {
        TableMetric::Ila => acc.ila,
        TableMetric::Pla => acc.pla,
    })
}

/// Method x column grid of `mean±std` over folds. For `breakhis` the
/// columns are the four magnifications plus `Mean`, where each fold's mean
/// is taken over its four magnification values first.
pub fn render_tables(methods: &[MethodReports], layout: TableLayout, metric: TableMetric) -> Result<Table> {
    if methods.is_empty() {
        return Err(Error::SchemaMismatch("no methods given".into()));
    }
    let folds = methods[0].reports.len();
    let header: Vec<String> = match layout {
        TableLayout::Breakhis => std::iter::once("Method".to_string())
            .chain(MagnificationFactor::ALL.iter().map(|mf| mf.dir_name()))
            .chain(std::iter::once("Mean".to_string()))
            .collect(),
        TableLayout::Bach | TableLayout::Bisque => vec!["Method".into(), "Accuracy".into()],
    };
    let mut rows = Vec::new();
    for m in methods {
        if m.reports.is_empty() {
            return Err(Error::SchemaMismatch(format!("method {} has no reports", m.method)));
        }
        if m.reports.len() != folds {
            return Err(Error::SchemaMismatch(format!(
                "method {} has {} fold reports, expected {folds}",
                m.method,
                m.reports.len()
            )));
        }
        let cells = match layout {
            TableLayout::Breakhis => {
                let mut per_fold_mean = vec![0.0; folds];
                let mut cells = Vec::new();
                for mf in MagnificationFactor::ALL {
                    let vals = m
                        .reports
                        .iter()
                        .map(|r| pick(r, Some(mf), metric))
                        .collect::<Option<Vec<f64>>>()
                        .ok_or_else(|| {
                            Error::SchemaMismatch(format!("method {} lacks magnification {}", m.method, mf.dir_name()))
                        })?;
                    for (acc, v) in per_fold_mean.iter_mut().zip(&vals) {
                        *acc += v / 4.0;
                    }
                    cells.push(MeanStd::of(&vals));
                }
                cells.push(MeanStd::of(&per_fold_mean));
                cells
            }
            TableLayout::Bach | TableLayout::Bisque => {
                let vals: Vec<f64> = m.reports.iter().filter_map(|r| pick(r, None, metric)).collect();
                vec![MeanStd::of(&vals)]
            }
        };
        rows.push((m.method.clone(), cells));
    }
    Ok(Table { header, rows })
}

/// Projection onto the two leading principal components. Components are
/// found by power iteration from a fixed start, with the sign chosen so the
/// largest-magnitude loading is positive.
pub fn pca_2d(x: &Array2<f64>) -> Array2<f64> {
    let (n, d) = x.dim();
    if n == 0 || d == 0 {
        return Array2::zeros((n, 2));
    }
    let mean = x.mean_axis(Axis(0)).expect("rows");
    let centered = x - &mean;
    let mut cov = centered.t().dot(&centered) / (n.max(2) - 1) as f64;
    let mut out = Array2::zeros((n, 2));
    for k in 0..2.min(d) {
        let mut v = Array1::from_shape_fn(d, |i| 1.0 + i as f64 / d as f64);
        v /= v.dot(&v).sqrt();
        let mut lambda = 0.0;
        for _ in 0..1000 {
            let next = cov.dot(&v);
            let norm = next.dot(&next).sqrt();
            if norm < 1e-300 {
                break;
            }
            let next = next / norm;
            let delta = (&next - &v).mapv(f64::abs).sum();
            v = next;
            lambda = norm;
            if delta < 1e-12 {
                break;
            }
        }
        let lead = v.iter().copied().fold(0.0f64, |a, b| if b.abs() > a.abs() { b } else { a });
        if lead < 0.0 {
            v.mapv_inplace(|a| -a);
        }
        out.column_mut(k).assign(&centered.dot(&v));
        let vv = v.view().insert_axis(Axis(1));
        cov = &cov - &(vv.dot(&vv.t()) * lambda);
    }
    out
}

/// Scatter plot of 2-D points, one color per class (0 blue, 1 red, then a
/// fixed palette), on a white `size` x `size` canvas.
pub fn render_projection(points: &Array2<f64>, labels: &[ClassId], size: u32) -> RgbImage {
    const PALETTE: [[u8; 3]; 6] = [
        [31, 119, 180],
        [214, 39, 40],
        [44, 160, 44],
        [148, 103, 189],
        [255, 127, 14],
        [127, 127, 127],
    ];
    let mut img = RgbImage::from_pixel(size, size, Rgb([255, 255, 255]));
    if points.nrows() == 0 || size < 8 {
        return img;
    }
    let range = |c: usize| {
        let col = points.column(c);
        let lo = col.fold(f64::INFINITY, |a, &b| a.min(b));
        let hi = col.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        (lo, (hi - lo).max(1e-12))
    };
    let (x0, xs) = range(0);
    let (y0, ys) = range(1);
    let margin = 4.0;
    let span = size as f64 - 2.0 * margin - 1.0;
    for (p, &label) in points.rows().into_iter().zip(labels) {
        let cx = (margin + (p[0] - x0) / xs * span).round() as i64;
        let cy = (margin + (1.0 - (p[1] - y0) / ys) * span).round() as i64;
        let color = Rgb(PALETTE[label % PALETTE.len()]);
        for dy in -2i64..=2 {
            for dx in -2i64..=2 {
                if dx * dx + dy * dy <= 4 {
                    let (x, y) = (cx + dx, cy + dy);
                    if x >= 0 && y >= 0 && (x as u32) < size && (y as u32) < size {
                        img.put_pixel(x as u32, y as u32, color);
                    }
                }
            }
        }
    }
    img
}
