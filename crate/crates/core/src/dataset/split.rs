//! Patient-grouped stratified k-fold assignment and nested label subsets.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::{ClassId, MagnifiedSample};
use crate::error::{Error, Result};
use crate::rng::{self, domain};

/// Label fractions materialised in every plan.
pub const LABEL_FRACTIONS: [f64; 7] = [0.05, 0.10, 0.20, 0.40, 0.60, 0.80, 1.00];

/// Canonical map key for a label fraction, e.g. `0.05`.
pub fn fraction_key(fraction: f64) -> String {
    format!("{fraction:.2}")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitPlan {
    pub k: usize,
    pub seed: u64,
    /// specimen_id -> fold index.
    pub folds: BTreeMap<String, usize>,
    /// fraction key -> labeled specimen ids, drawn over all folds.
    pub label_fractions: BTreeMap<String, Vec<String>>,
    /// specimen_id -> class id used for stratification.
    pub strata: BTreeMap<String, ClassId>,
    /// specimen_id -> patient id.
    #[serde(default)]
    pub patients: BTreeMap<String, String>,
}

impl SplitPlan {
    pub fn fold_members(&self, fold: usize) -> BTreeSet<String> {
        self.folds
            .iter()
            .filter(|(_, &f)| f == fold)
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn members_of(&self, folds: &BTreeSet<usize>) -> BTreeSet<String> {
        self.folds
            .iter()
            .filter(|(_, f)| folds.contains(f))
            .map(|(id, _)| id.clone())
            .collect()
    }

    pub fn has_fraction(&self, fraction: f64) -> bool {
        self.label_fractions.contains_key(&fraction_key(fraction))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let json = serde_json::to_string_pretty(self)?;
        std::fs::write(path, json)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

fn round_half_up(x: f64) -> usize {
    (x + 0.5).floor() as usize
}

struct PatientGroup {
    patient_id: String,
    specimens: Vec<String>,
    class: ClassId,
}

/// Assigns patients to `k` folds, balancing per-class specimen counts.
///
/// Each patient is stratified by the majority class of its specimens (ties
/// go to the lowest class id). Within a class, patients are shuffled under
/// `seed`, ordered largest first, and placed greedily into the fold with the
/// fewest specimens of that class, then fewest specimens overall, then the
/// lowest index.
pub fn build_folds(samples: &[MagnifiedSample], k: usize, seed: u64) -> Result<SplitPlan> {
    if k < 2 {
        return Err(Error::Config(format!("fold count must be >= 2, got {k}")));
    }
    let mut by_patient: BTreeMap<String, Vec<(String, ClassId)>> = BTreeMap::new();
    let mut strata = BTreeMap::new();
    let mut patients = BTreeMap::new();
    for s in samples {
        let label = s.label();
        by_patient
            .entry(s.patient_id.clone())
            .or_default()
            .push((s.specimen_id.clone(), label));
        strata.insert(s.specimen_id.clone(), label);
        patients.insert(s.specimen_id.clone(), s.patient_id.clone());
    }

    let n_classes = strata.values().copied().max().map_or(0, |m| m + 1);
    let mut per_class: Vec<Vec<PatientGroup>> = (0..n_classes).map(|_| Vec::new()).collect();
    for (patient_id, specimens) in by_patient {
        let mut votes = vec![0usize; n_classes];
        for (_, c) in &specimens {
            votes[*c] += 1;
        }
        let best = votes.iter().copied().max().unwrap_or(0);
        let class = votes.iter().position(|&v| v == best).unwrap_or(0);
        let mut ids: Vec<String> = specimens.into_iter().map(|(id, _)| id).collect();
        ids.sort();
        per_class[class].push(PatientGroup {
            patient_id,
            specimens: ids,
            class,
        });
    }

    for (class, groups) in per_class.iter().enumerate() {
        if !groups.is_empty() && groups.len() < k {
            return Err(Error::TooFewPatients {
                class,
                patients: groups.len(),
                k,
            });
        }
    }

    let mut class_count = vec![vec![0usize; k]; n_classes];
    let mut total = vec![0usize; k];
    let mut folds = BTreeMap::new();
    for (class, mut groups) in per_class.into_iter().enumerate() {
        groups.sort_by(|a, b| a.patient_id.cmp(&b.patient_id));
        let mut rng = rng::stream(seed, &[domain::FOLDS, class as u64]);
        groups.shuffle(&mut rng);
        // stable: shuffled order survives among equal sizes
        groups.sort_by_key(|g| std::cmp::Reverse(g.specimens.len()));
        for g in groups {
            let fold = (0..k)
                .min_by_key(|&f| (class_count[g.class][f], total[f], f))
                .expect("k >= 2");
            class_count[g.class][fold] += g.specimens.len();
            total[fold] += g.specimens.len();
            for id in g.specimens {
                folds.insert(id, fold);
            }
        }
    }

    let mut plan = SplitPlan {
        k,
        seed,
        folds,
        label_fractions: BTreeMap::new(),
        strata,
        patients,
    };
    let all: BTreeSet<usize> = (0..k).collect();
    for f in LABEL_FRACTIONS {
        let subset = subsample_labels(&plan, &all, f, seed)?;
        plan.label_fractions
            .insert(fraction_key(f), subset.into_iter().collect());
    }
    Ok(plan)
}

/// Stratified labeled subset of the specimens in `train_folds`.
///
/// Per class the train specimens are put in a seeded order and the first
/// `max(1, round_half_up(fraction * n_class))` are kept, so subsets for
/// increasing fractions under one seed are nested.
pub fn subsample_labels(
    plan: &SplitPlan,
    train_folds: &BTreeSet<usize>,
    fraction: f64,
    seed: u64,
) -> Result<BTreeSet<String>> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::FractionOutOfRange(fraction));
    }
    if train_folds.is_empty() {
        return Err(Error::Config("no training folds selected".into()));
    }
    let mut per_class: BTreeMap<ClassId, Vec<String>> = BTreeMap::new();
    for (id, fold) in &plan.folds {
        if train_folds.contains(fold) {
            let class = plan.strata.get(id).copied().unwrap_or(0);
            per_class.entry(class).or_default().push(id.clone());
        }
    }
    let mut out = BTreeSet::new();
    for (class, mut ids) in per_class {
        ids.sort();
        let mut rng = rng::stream(seed, &[domain::LABELS, class as u64]);
        ids.shuffle(&mut rng);
        let n = if fraction >= 1.0 {
            ids.len()
        } else {
            round_half_up(fraction * ids.len() as f64).clamp(1, ids.len())
        };
        out.extend(ids.into_iter().take(n));
    }
    Ok(out)
}
