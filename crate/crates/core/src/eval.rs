//! Image-level and patient-level accuracy, patch majority voting,
//! cross-magnification summaries and label-efficiency tables.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::dataset::{fraction_key, ClassId, SplitPlan};
use crate::error::{Error, Result};
use crate::magnification::MagnificationFactor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub specimen_id: String,
    pub patient_id: String,
    pub magnification: MagnificationFactor,
    pub patch_coord: Option<(u32, u32)>,
    pub true_label: ClassId,
    pub predicted_label: ClassId,
    pub class_scores: Vec<f64>,
}

/// Index of the largest score; ties go to the lowest index.
pub fn argmax(scores: &[f64]) -> ClassId {
    let mut best = 0;
    for (i, &s) in scores.iter().enumerate() {
        if s > scores[best] {
            best = i;
        }
    }
    best
}

impl PredictionRecord {
    /// Builds a record whose prediction is `argmax(class_scores)`.
    pub fn new(
        specimen_id: impl Into<String>,
        patient_id: impl Into<String>,
        magnification: MagnificationFactor,
        patch_coord: Option<(u32, u32)>,
        true_label: ClassId,
        class_scores: Vec<f64>,
    ) -> Self {
        Self {
            specimen_id: specimen_id.into(),
            patient_id: patient_id.into(),
            magnification,
            patch_coord,
            true_label,
            predicted_label: argmax(&class_scores),
            class_scores,
        }
    }

    pub fn is_correct(&self) -> bool {
        self.true_label == self.predicted_label
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Accuracy {
    pub ila: f64,
    pub pla: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub ila: f64,
    pub pla: f64,
    pub patch_accuracy: Option<f64>,
    pub image_accuracy: Option<f64>,
    pub per_magnification: BTreeMap<MagnificationFactor, Accuracy>,
    pub fold: usize,
    pub n_images: usize,
    pub n_patients: usize,
    pub n_correct: usize,
}

pub fn image_level_accuracy(preds: &[PredictionRecord]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    Ok(preds.iter().filter(|p| p.is_correct()).count() as f64 / preds.len() as f64)
}

/// Unweighted mean over patients of each patient's image accuracy.
pub fn patient_level_accuracy(preds: &[PredictionRecord]) -> Result<f64> {
    if preds.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    let mut per_patient: BTreeMap<&str, (usize, usize)> = BTreeMap::new();
    for p in preds {
        let e = per_patient.entry(&p.patient_id).or_default();
        e.0 += p.is_correct() as usize;
        e.1 += 1;
    }
    let total: f64 = per_patient.values().map(|&(c, n)| c as f64 / n as f64).sum();
    Ok(total / per_patient.len() as f64)
}

/// Plurality vote over the patches of one image.
///
/// Ties go to the label with the highest mean class score among the tied
/// labels, then to the lowest class id. The returned image record carries
/// vote shares as its scores.
pub fn majority_vote(patches: &[PredictionRecord]) -> Result<(ClassId, PredictionRecord)> {
    let first = patches.first().ok_or(Error::NoPatches)?;
    let n_classes = patches
        .iter()
        .map(|p| p.class_scores.len().max(p.predicted_label + 1).max(p.true_label + 1))
        .max()
        .unwrap_or(1);
    let mut votes = vec![0usize; n_classes];
    let mut score_sums = vec![0.0; n_classes];
    for p in patches {
        votes[p.predicted_label] += 1;
        for (c, s) in p.class_scores.iter().enumerate() {
            score_sums[c] += s;
        }
    }
    let top = *votes.iter().max().expect("non-empty");
    let mut winner = None::<ClassId>;
    for c in (0..n_classes).filter(|&c| votes[c] == top) {
        match winner {
            Some(w) if score_sums[c] <= score_sums[w] => {}
            _ => winner = Some(c),
        }
    }
    let label = winner.expect("some class has the top count");
    let n = patches.len() as f64;
    let record = PredictionRecord {
        specimen_id: first.specimen_id.clone(),
        patient_id: first.patient_id.clone(),
        magnification: first.magnification,
        patch_coord: None,
        true_label: first.true_label,
        predicted_label: label,
        class_scores: votes.iter().map(|&v| v as f64 / n).collect(),
    };
    Ok((label, record))
}

/// Collapses patch records into one voted record per (specimen, magnification).
/// Records without a patch coordinate pass through unchanged.
pub fn vote_images(preds: &[PredictionRecord]) -> Result<Vec<PredictionRecord>> {
    let mut groups: BTreeMap<(&str, MagnificationFactor), Vec<PredictionRecord>> = BTreeMap::new();
    let mut out = Vec::new();
    for p in preds {
        if p.patch_coord.is_some() {
            groups
                .entry((&p.specimen_id, p.magnification))
                .or_default()
                .push(p.clone());
        } else {
            out.push(p.clone());
        }
    }
    for patches in groups.values() {
        out.push(majority_vote(patches)?.1);
    }
    Ok(out)
}

/// Full report for one fold. Patient metrics are computed over image-level
/// records, after voting when the predictions are per patch.
pub fn evaluate(preds: &[PredictionRecord], fold: usize) -> Result<EvalReport> {
    if preds.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    let has_patches = preds.iter().any(|p| p.patch_coord.is_some());
    let images = vote_images(preds)?;
    let patch_accuracy = if has_patches {
        let patches: Vec<_> = preds.iter().filter(|p| p.patch_coord.is_some()).cloned().collect();
        Some(image_level_accuracy(&patches)?)
    } else {
        None
    };
    let ila = image_level_accuracy(&images)?;
    let mut per_magnification = BTreeMap::new();
    for mf in MagnificationFactor::ALL {
        let sub: Vec<_> = images.iter().filter(|p| p.magnification == mf).cloned().collect();
        if !sub.is_empty() {
            per_magnification.insert(
                mf,
                Accuracy {
                    ila: image_level_accuracy(&sub)?,
                    pla: patient_level_accuracy(&sub)?,
                },
            );
        }
    }
    let patients: BTreeSet<&str> = images.iter().map(|p| p.patient_id.as_str()).collect();
    Ok(EvalReport {
        ila,
        pla: patient_level_accuracy(&images)?,
        patch_accuracy,
        image_accuracy: has_patches.then_some(ila),
        per_magnification,
        fold,
        n_images: images.len(),
        n_patients: patients.len(),
        n_correct: images.iter().filter(|p| p.is_correct()).count(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum XmagMode {
    /// Fix the training magnification, average over the other evaluation ones.
    Type1,
    /// Fix the evaluation magnification, average over models trained elsewhere.
    Type2,
}

impl std::str::FromStr for XmagMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "type1" | "1" => Ok(XmagMode::Type1),
            "type2" | "2" => Ok(XmagMode::Type2),
            other => Err(Error::Config(format!("unknown cross-magnification mode {other:?}"))),
        }
    }
}

pub type XmagMatrix = BTreeMap<(MagnificationFactor, MagnificationFactor), EvalReport>;

/// Off-diagonal means of a train x eval magnification matrix.
pub fn cross_magnification(
    matrix: &XmagMatrix,
    mode: XmagMode,
) -> Result<BTreeMap<MagnificationFactor, Accuracy>> {
    for train in MagnificationFactor::ALL {
        for eval in MagnificationFactor::ALL {
            if !matrix.contains_key(&(train, eval)) {
                return Err(Error::IncompleteMatrix {
                    train: train.value(),
                    eval: eval.value(),
                });
            }
        }
    }
    let mut out = BTreeMap::new();
    for m in MagnificationFactor::ALL {
        let cells: Vec<&EvalReport> = MagnificationFactor::ALL
            .into_iter()
            .filter(|&o| o != m)
            .map(|o| match mode {
                XmagMode::Type1 => &matrix[&(m, o)],
                XmagMode::Type2 => &matrix[&(o, m)],
            })
            .collect();
        let n = cells.len() as f64;
        out.insert(
            m,
            Accuracy {
                ila: cells.iter().map(|r| r.ila).sum::<f64>() / n,
                pla: cells.iter().map(|r| r.pla).sum::<f64>() / n,
            },
        );
    }
    Ok(out)
}

/// Runs `runner` once per fraction, smallest first.
pub fn label_efficiency_sweep<F>(
    plan: &SplitPlan,
    fractions: &[f64],
    mut runner: F,
) -> Result<Vec<(f64, EvalReport)>>
where
    F: FnMut(f64) -> Result<EvalReport>,
{
    let mut sorted = fractions.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    for &f in &sorted {
        if !plan.has_fraction(f) {
            return Err(Error::Config(format!(
                "label fraction {} is not materialised in the split plan",
                fraction_key(f)
            )));
        }
    }
    sorted.into_iter().map(|f| Ok((f, runner(f)?))).collect()
}

pub fn write_sweep_csv<W: Write>(rows: &[(f64, EvalReport)], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["fraction", "fold", "ila", "pla", "n_images", "n_patients"])?;
    for (f, r) in rows {
        w.write_record([
            fraction_key(*f),
            r.fold.to_string(),
            format!("{:.6}", r.ila),
            format!("{:.6}", r.pla),
            r.n_images.to_string(),
            r.n_patients.to_string(),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Mean and sample standard deviation (0 for a single value).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return Self { mean: f64::NAN, std: f64::NAN };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let std = if values.len() < 2 {
            0.0
        } else {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
        };
        Self { mean, std }
    }
}

impl std::fmt::Display for MeanStd {
    /// Percent with two decimals, e.g. `88.89±2.99`.
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:.2}±{:.2}", self.mean * 100.0, self.std * 100.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub folds: usize,
    pub ila: MeanStd,
    pub pla: MeanStd,
    pub per_magnification: BTreeMap<MagnificationFactor, (MeanStd, MeanStd)>,
}

pub fn aggregate(reports: &[EvalReport]) -> Result<AggregateReport> {
    if reports.is_empty() {
        return Err(Error::EmptyPredictions);
    }
    let col = |f: &dyn Fn(&EvalReport) -> Option<f64>| -> Vec<f64> { reports.iter().filter_map(f).collect() };
    let mut per_magnification = BTreeMap::new();
    for mf in MagnificationFactor::ALL {
        let ila = col(&|r| r.per_magnification.get(&mf).map(|a| a.ila));
        let pla = col(&|r| r.per_magnification.get(&mf).map(|a| a.pla));
        if !ila.is_empty() {
            per_magnification.insert(mf, (MeanStd::of(&ila), MeanStd::of(&pla)));
        }
    }
    Ok(AggregateReport {
        folds: reports.len(),
        ila: MeanStd::of(&col(&|r| Some(r.ila))),
        pla: MeanStd::of(&col(&|r| Some(r.pla))),
        per_magnification,
    })
}

/// Columns: specimen_id, patient_id, magnification, row, col, true_label,
/// predicted_label, score_0..score_{C-1}. Empty row/col for whole images.
pub fn write_predictions_csv<W: Write>(preds: &[PredictionRecord], out: W) -> Result<()> {
    let n_classes = preds.iter().map(|p| p.class_scores.len()).max().unwrap_or(0);
    let mut w = csv::Writer::from_writer(out);
    let mut header: Vec<String> = [
        "specimen_id",
        "patient_id",
        "magnification",
        "row",
        "col",
        "true_label",
        "predicted_label",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend((0..n_classes).map(|c| format!("score_{c}")));
    w.write_record(&header)?;
    for p in preds {
        let (row, col) = match p.patch_coord {
            Some((r, c)) => (r.to_string(), c.to_string()),
            None => (String::new(), String::new()),
        };
        let mut rec = vec![
            p.specimen_id.clone(),
            p.patient_id.clone(),
            p.magnification.value().to_string(),
            row,
            col,
            p.true_label.to_string(),
            p.predicted_label.to_string(),
        ];
        rec.extend(p.class_scores.iter().map(|s| format!("{s:.17e}")));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_predictions_csv<R: Read>(input: R) -> Result<Vec<PredictionRecord>> {
    let mut r = csv::Reader::from_reader(input);
    let bad = |m: String| Error::Config(format!("predictions file: {m}"));
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() < 7 {
            return Err(bad(format!("expected at least 7 columns, got {}", rec.len())));
        }
        let num = |i: usize| -> Result<usize> {
            rec[i].parse().map_err(|_| bad(format!("bad integer {:?}", &rec[i])))
        };
        let patch_coord = if rec[3].is_empty() {
            None
        } else {
            Some((num(3)? as u32, num(4)? as u32))
        };
        let class_scores = (7..rec.len())
            .map(|i| rec[i].parse::<f64>().map_err(|_| bad(format!("bad score {:?}", &rec[i]))))
            .collect::<Result<Vec<_>>>()?;
        out.push(PredictionRecord {
            specimen_id: rec[0].to_string(),
            patient_id: rec[1].to_string(),
            magnification: rec[2].parse()?,
            patch_coord,
            true_label: num(5)?,
            predicted_label: num(6)?,
            class_scores,
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use MagnificationFactor::*;

    fn rec(patient: &str, correct: bool) -> PredictionRecord {
        let scores = if correct { vec![0.9, 0.1] } else { vec![0.2, 0.8] };
        PredictionRecord::new("s", patient, X40, None, 0, scores)
    }

    fn patch(label: ClassId, score: f64) -> PredictionRecord {
        let mut scores = vec![0.0; 3];
        scores[label] = score;
        let rest = (1.0 - score) / 2.0;
        for (c, s) in scores.iter_mut().enumerate() {
            if c != label {
                *s = rest;
            }
        }
        PredictionRecord {
            predicted_label: label,
            ..PredictionRecord::new("img", "p", X100, Some((0, 0)), 0, scores)
        }
    }

    #[test]
    fn ila_counts() {
        let all: Vec<_> = (0..4).map(|_| rec("a", true)).collect();
        assert_eq!(image_level_accuracy(&all).unwrap(), 1.0);
        let mut three = all.clone();
        three[2] = rec("a", false);
        assert_eq!(image_level_accuracy(&three).unwrap(), 0.75);
        assert!(matches!(image_level_accuracy(&[]), Err(Error::EmptyPredictions)));
    }

    #[test]
    fn pla_hand_cases() {
        let single = [rec("a", true), rec("a", true), rec("a", false), rec("a", false)];
        assert_eq!(patient_level_accuracy(&single).unwrap(), 0.5);
        let two = [
            rec("A", true),
            rec("A", true),
            rec("A", true),
            rec("A", false),
            rec("B", true),
            rec("B", false),
        ];
        assert_eq!(patient_level_accuracy(&two).unwrap(), 0.625);
        assert!((image_level_accuracy(&two).unwrap() - 4.0 / 6.0).abs() < 1e-15);
    }

    #[test]
    fn pla_equals_ila_with_balanced_patients() {
        let preds: Vec<_> = ["a", "b", "c"]
            .iter()
            .flat_map(|p| [rec(p, true), rec(p, false)])
            .collect();
        assert_eq!(patient_level_accuracy(&preds).unwrap(), image_level_accuracy(&preds).unwrap());
    }

    #[test]
    fn vote_majority_and_ties() {
        let mut patches: Vec<_> = (0..8).map(|_| patch(2, 0.7)).collect();
        patches.extend((0..4).map(|_| patch(1, 0.9)));
        assert_eq!(majority_vote(&patches).unwrap().0, 2);

        let tie = [patch(0, 0.6), patch(1, 0.55)];
        assert_eq!(majority_vote(&tie).unwrap().0, 0);
        let tie = [patch(0, 0.55), patch(1, 0.6)];
        assert_eq!(majority_vote(&tie).unwrap().0, 1);
        // equal mean scores fall back to the lowest class id
        let tie = [patch(2, 0.6), patch(1, 0.6)];
        assert_eq!(majority_vote(&tie).unwrap().0, 1);
        assert!(matches!(majority_vote(&[]), Err(Error::NoPatches)));
    }

    #[test]
    fn voted_record_scores_sum_to_one() {
        let patches = [patch(0, 0.6), patch(1, 0.7), patch(1, 0.8)];
        let (label, img) = majority_vote(&patches).unwrap();
        assert_eq!(label, 1);
        assert!((img.class_scores.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(img.patch_coord, None);
    }

    fn constant_matrix(v: f64) -> XmagMatrix {
        let mut m = BTreeMap::new();
        for t in MagnificationFactor::ALL {
            for e in MagnificationFactor::ALL {
                m.insert(
                    (t, e),
                    EvalReport {
                        ila: v,
                        pla: v,
                        patch_accuracy: None,
                        image_accuracy: None,
                        per_magnification: BTreeMap::new(),
                        fold: 0,
                        n_images: 1,
                        n_patients: 1,
                        n_correct: 0,
                    },
                );
            }
        }
        m
    }

    #[test]
    fn xmag_constant_and_index_contract() {
        let mut m = constant_matrix(0.8);
        for mode in [XmagMode::Type1, XmagMode::Type2] {
            for a in cross_magnification(&m, mode).unwrap().values() {
                assert!((a.ila - 0.8).abs() < 1e-15);
            }
        }
        m.get_mut(&(X40, X40)).unwrap().ila = 0.0;
        m.get_mut(&(X40, X100)).unwrap().ila = 0.5;
        let t1 = cross_magnification(&m, XmagMode::Type1).unwrap();
        assert!((t1[&X40].ila - (0.5 + 0.8 + 0.8) / 3.0).abs() < 1e-15);
        let t2 = cross_magnification(&m, XmagMode::Type2).unwrap();
        assert!((t2[&X100].ila - (0.5 + 0.8 + 0.8) / 3.0).abs() < 1e-15);
        m.remove(&(X200, X200));
        assert!(matches!(
            cross_magnification(&m, XmagMode::Type1),
            Err(Error::IncompleteMatrix { train: 200, eval: 200 })
        ));
    }

    #[test]
    fn evaluate_patch_predictions() {
        let mut preds = vec![patch(0, 0.9), patch(0, 0.8), patch(1, 0.9)];
        preds.push(PredictionRecord {
            specimen_id: "img2".into(),
            ..patch(1, 0.9)
        });
        let r = evaluate(&preds, 3).unwrap();
        assert_eq!(r.n_images, 2);
        assert_eq!(r.patch_accuracy, Some(0.5));
        assert_eq!(r.image_accuracy, Some(0.5));
        assert_eq!(r.fold, 3);
    }

    #[test]
    fn aggregate_mean_std() {
        let mut m = constant_matrix(0.5);
        let mut reports: Vec<_> = m.values().take(5).cloned().collect();
        let a = aggregate(&reports).unwrap();
        assert_eq!(a.ila.std, 0.0);
        assert_eq!(a.ila.to_string(), "50.00±0.00");
        for (i, r) in reports.iter_mut().enumerate() {
            r.ila = i as f64 / 10.0;
        }
        let a = aggregate(&reports).unwrap();
        assert!((a.ila.mean - 0.2).abs() < 1e-15);
        assert!((a.ila.std - 0.025f64.sqrt()).abs() < 1e-12);
        m.clear();
    }

    #[test]
    fn predictions_csv_round_trip() {
        let preds = vec![patch(2, 0.61), PredictionRecord::new("q", "p", X400, None, 1, vec![0.1, 0.2, 0.7])];
        let mut buf = Vec::new();
        write_predictions_csv(&preds, &mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("specimen_id,patient_id,magnification,row,col,true_label,predicted_label,score_0"));
        let back = read_predictions_csv(buf.as_slice()).unwrap();
        assert_eq!(back[0], preds[0]);
        assert_eq!(back[1].class_scores, preds[1].class_scores);
    }
}
