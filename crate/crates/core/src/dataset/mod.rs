//! Multi-magnification specimen collections.
//!
//! On-disk layout (one PNG per magnification directory):
//!
//! ```text
//! root/<class_name>/<patient_id>/<specimen_id>/<MF>X/<image>.png
//! ```
//!
//! Class names are mapped to class ids in lexicographic order.

mod patches;
mod split;
mod synthetic;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;

use image::RgbImage;
use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::magnification::MagnificationFactor;

pub use patches::{make_patches, Patch, PatchGrid};
pub use split::{build_folds, fraction_key, subsample_labels, SplitPlan, LABEL_FRACTIONS};
pub use synthetic::{
    generate_synthetic, write_synthetic, IndexEntry, SynthConfig, SyntheticSet, SyntheticSpecimen,
    CLASS_NAMES,
};

pub type ClassId = usize;

/// Counts label reads so stages that must stay label-free can be audited.
#[derive(Debug, Clone, Default)]
pub struct LabelAudit(Arc<AtomicUsize>);

impl LabelAudit {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn reads(&self) -> usize {
        self.0.load(Ordering::SeqCst)
    }

    fn record(&self) {
        self.0.fetch_add(1, Ordering::SeqCst);
    }
}

/// One specimen imaged at all four magnifications.
#[derive(Debug, Clone)]
pub struct MagnifiedSample {
    pub specimen_id: String,
    pub patient_id: String,
    label: ClassId,
    images: BTreeMap<MagnificationFactor, Arc<RgbImage>>,
    pub source_path: BTreeMap<MagnificationFactor, PathBuf>,
    audit: LabelAudit,
}

impl MagnifiedSample {
    pub fn new(
        specimen_id: impl Into<String>,
        patient_id: impl Into<String>,
        label: ClassId,
        images: BTreeMap<MagnificationFactor, RgbImage>,
    ) -> Result<Self> {
        let specimen_id = specimen_id.into();
        if let Some(missing) = MagnificationFactor::ALL
            .iter()
            .find(|mf| !images.contains_key(mf))
        {
            return Err(Error::MissingMagnification {
                specimen_id,
                missing: missing.dir_name(),
            });
        }
        Ok(Self {
            specimen_id,
            patient_id: patient_id.into(),
            label,
            images: images.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
            source_path: BTreeMap::new(),
            audit: LabelAudit::default(),
        })
    }

    /// Builds a sample that may lack magnifications. Only for exercising
    /// error paths of downstream consumers.
    #[doc(hidden)]
    pub fn new_unchecked(
        specimen_id: impl Into<String>,
        patient_id: impl Into<String>,
        label: ClassId,
        images: BTreeMap<MagnificationFactor, RgbImage>,
    ) -> Self {
        Self {
            specimen_id: specimen_id.into(),
            patient_id: patient_id.into(),
            label,
            images: images.into_iter().map(|(k, v)| (k, Arc::new(v))).collect(),
            source_path: BTreeMap::new(),
            audit: LabelAudit::default(),
        }
    }

    /// Class id. Every call is counted by the attached [`LabelAudit`].
    pub fn label(&self) -> ClassId {
        self.audit.record();
        self.label
    }

    pub fn image(&self, mf: MagnificationFactor) -> Option<&RgbImage> {
        self.images.get(&mf).map(|a| a.as_ref())
    }

    pub(crate) fn image_arc(&self, mf: MagnificationFactor) -> Option<Arc<RgbImage>> {
        self.images.get(&mf).cloned()
    }

    pub fn magnifications(&self) -> impl Iterator<Item = MagnificationFactor> + '_ {
        self.images.keys().copied()
    }

    pub fn is_complete(&self) -> bool {
        MagnificationFactor::ALL
            .iter()
            .all(|mf| self.images.contains_key(mf))
    }

    pub fn attach_audit(&mut self, audit: &LabelAudit) {
        self.audit = audit.clone();
    }
}

/// Attaches one shared label counter to every sample.
pub fn instrument(samples: &mut [MagnifiedSample], audit: &LabelAudit) {
    for s in samples {
        s.attach_audit(audit);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IngestWarning {
    pub specimen_id: String,
    pub path: PathBuf,
    pub message: String,
}

#[derive(Debug, Clone)]
pub struct IngestedDataset {
    pub samples: Vec<MagnifiedSample>,
    /// Index is the class id.
    pub class_names: Vec<String>,
    pub warnings: Vec<IngestWarning>,
}

fn sorted_subdirs(dir: &Path) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for entry in fs::read_dir(dir)? {
        let entry = entry?;
        if entry.file_type()?.is_dir() {
            out.push(entry.path());
        }
    }
    out.sort();
    Ok(out)
}

fn file_name(p: &Path) -> String {
    p.file_name()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default()
}

fn first_image_in(dir: &Path) -> Result<Option<PathBuf>> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok())
        .map(|e| e.path())
        .filter(|p| {
            p.is_file()
                && p.extension()
                    .map(|e| e.eq_ignore_ascii_case("png"))
                    .unwrap_or(false)
        })
        .collect();
    files.sort();
    Ok(files.into_iter().next())
}

struct SpecimenDir {
    class_id: ClassId,
    patient_id: String,
    specimen_id: String,
    path: PathBuf,
}

fn load_specimen(dir: &SpecimenDir) -> std::result::Result<MagnifiedSample, IngestWarning> {
    let warn_at = |path: &Path, message: String| IngestWarning {
        specimen_id: dir.specimen_id.clone(),
        path: path.to_path_buf(),
        message,
    };
    let mut images = BTreeMap::new();
    let mut paths = BTreeMap::new();
    for mf in MagnificationFactor::ALL {
        let mf_dir = dir.path.join(mf.dir_name());
        let file = match first_image_in(&mf_dir) {
            Ok(Some(f)) => f,
            _ => {
                let err = Error::MissingMagnification {
                    specimen_id: dir.specimen_id.clone(),
                    missing: mf.dir_name(),
                };
                return Err(warn_at(&mf_dir, err.to_string()));
            }
        };
        let img = image::open(&file).map_err(|e| {
            let err = Error::UnreadableImage {
                path: file.clone(),
                reason: e.to_string(),
            };
            warn_at(&file, err.to_string())
        })?;
        images.insert(mf, img.to_rgb8());
        paths.insert(mf, file);
    }
    let mut sample = MagnifiedSample::new(
        dir.specimen_id.clone(),
        dir.patient_id.clone(),
        dir.class_id,
        images,
    )
    .map_err(|e| warn_at(&dir.path, e.to_string()))?;
    sample.source_path = paths;
    Ok(sample)
}

fn walk_layout(root: &Path) -> Result<IngestedDataset> {
    // directories without patient subdirectories (e.g. `masks/`) are not classes
    let mut class_dirs = Vec::new();
    for dir in sorted_subdirs(root)? {
        if !sorted_subdirs(&dir)?.is_empty() {
            class_dirs.push(dir);
        }
    }
    let class_names: Vec<String> = class_dirs.iter().map(|p| file_name(p)).collect();

    let mut specimen_dirs = Vec::new();
    for (class_id, class_dir) in class_dirs.iter().enumerate() {
        for patient_dir in sorted_subdirs(class_dir)? {
            for specimen_dir in sorted_subdirs(&patient_dir)? {
                specimen_dirs.push(SpecimenDir {
                    class_id,
                    patient_id: file_name(&patient_dir),
                    specimen_id: file_name(&specimen_dir),
                    path: specimen_dir,
                });
            }
        }
    }

    let loaded: Vec<_> = specimen_dirs.par_iter().map(load_specimen).collect();
    let mut samples = Vec::new();
    let mut warnings = Vec::new();
    for r in loaded {
        match r {
            Ok(s) => samples.push(s),
            Err(w) => {
                warn!("skipping specimen {}: {}", w.specimen_id, w.message);
                warnings.push(w);
            }
        }
    }
    Ok(IngestedDataset {
        samples,
        class_names,
        warnings,
    })
}

/// Reads every complete specimen under `root`. Incomplete or unreadable
/// specimens are skipped and reported in `warnings`; zero usable specimens
/// is an error.
pub fn ingest_layout(root: &Path) -> Result<IngestedDataset> {
    let ds = ingest_layout_lenient(root)?;
    if ds.samples.is_empty() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    Ok(ds)
}

/// Like [`ingest_layout`] but an empty result is not an error.
pub fn ingest_layout_lenient(root: &Path) -> Result<IngestedDataset> {
    if !root.is_dir() {
        return Err(Error::EmptyDataset(root.to_path_buf()));
    }
    walk_layout(root)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn write_png(path: &Path, w: u32, h: u32, v: u8) {
        fs::create_dir_all(path.parent().unwrap()).unwrap();
        RgbImage::from_pixel(w, h, image::Rgb([v, v, v]))
            .save(path)
            .unwrap();
    }

    fn layout_specimen(root: &Path, class: &str, patient: &str, specimen: &str, mfs: &[u32]) {
        for mf in mfs {
            let p = root
                .join(class)
                .join(patient)
                .join(specimen)
                .join(format!("{mf}X"))
                .join("img.png");
            write_png(&p, 8, 6, *mf as u8);
        }
    }

    #[test]
    fn minimal_complete_layout() {
        let dir = tempfile::tempdir().unwrap();
        layout_specimen(dir.path(), "benign", "p1", "s1", &[40, 100, 200, 400]);
        let ds = ingest_layout(dir.path()).unwrap();
        assert_eq!(ds.samples.len(), 1);
        assert_eq!(ds.samples[0].magnifications().count(), 4);
        assert!(ds.warnings.is_empty());
        assert_eq!(ds.samples[0].image(MagnificationFactor::X200).unwrap().width(), 8);
    }

    #[test]
    fn missing_magnification_is_skipped_with_warning() {
        let dir = tempfile::tempdir().unwrap();
        layout_specimen(dir.path(), "benign", "p1", "s1", &[40, 100, 200]);
        let ds = ingest_layout_lenient(dir.path()).unwrap();
        assert!(ds.samples.is_empty());
        assert_eq!(ds.warnings.len(), 1);
        assert!(ds.warnings[0].message.contains("400X"));
        assert!(matches!(
            ingest_layout(dir.path()),
            Err(Error::EmptyDataset(_))
        ));
    }

    #[test]
    fn unreadable_image_skips_specimen() {
        let dir = tempfile::tempdir().unwrap();
        layout_specimen(dir.path(), "benign", "p1", "good", &[40, 100, 200, 400]);
        layout_specimen(dir.path(), "benign", "p1", "bad", &[40, 100, 200, 400]);
        fs::write(
            dir.path().join("benign/p1/bad/200X/img.png"),
            b"not a png",
        )
        .unwrap();
        let ds = ingest_layout(dir.path()).unwrap();
        assert_eq!(ds.samples.len(), 1);
        assert_eq!(ds.samples[0].specimen_id, "good");
        assert_eq!(ds.warnings.len(), 1);
        assert_eq!(ds.warnings[0].specimen_id, "bad");
    }

    #[test]
    fn class_ids_are_lexicographic() {
        let dir = tempfile::tempdir().unwrap();
        layout_specimen(dir.path(), "malignant", "p2", "s2", &[40, 100, 200, 400]);
        layout_specimen(dir.path(), "benign", "p1", "s1", &[40, 100, 200, 400]);
        let ds = ingest_layout(dir.path()).unwrap();
        assert_eq!(ds.class_names, vec!["benign", "malignant"]);
        let s2 = ds.samples.iter().find(|s| s.specimen_id == "s2").unwrap();
        assert_eq!(s2.label(), 1);
    }

    #[test]
    fn constructor_rejects_incomplete() {
        let mut images = BTreeMap::new();
        images.insert(MagnificationFactor::X40, RgbImage::new(2, 2));
        assert!(matches!(
            MagnifiedSample::new("s", "p", 0, images),
            Err(Error::MissingMagnification { .. })
        ));
    }

    #[test]
    fn label_reads_are_counted() {
        let images = MagnificationFactor::ALL
            .iter()
            .map(|&mf| (mf, RgbImage::new(2, 2)))
            .collect();
        let mut s = MagnifiedSample::new("s", "p", 1, images).unwrap();
        let audit = LabelAudit::new();
        s.attach_audit(&audit);
        assert_eq!(audit.reads(), 0);
        let _ = s.label();
        let _ = s.clone().label();
        assert_eq!(audit.reads(), 2);
    }
}
