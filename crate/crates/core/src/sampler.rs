//! Magnification prior: which two magnifications of one specimen form a
//! positive pair.
//!
//! | strategy | human choices | degrees of freedom |
//! |---|---|---|
//! | fixed   | both views            | 0 |
//! | ordered | second view via table | 1 |
//! | random  | none                  | 2 |
//!
//! Every strategy guarantees `mf1 != mf2`.

use std::collections::BTreeMap;
use std::sync::Arc;

use image::RgbImage;
use serde::{Deserialize, Serialize};

use crate::dataset::MagnifiedSample;
use crate::error::{Error, Result};
use crate::magnification::MagnificationFactor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StrategyKind {
    Fixed,
    Ordered,
    Random,
}

impl std::str::FromStr for StrategyKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "fixed" | "fixed_pair" | "fixedpair" => Ok(StrategyKind::Fixed),
            "ordered" | "ordered_pair" | "orderedpair" => Ok(StrategyKind::Ordered),
            "random" | "random_pair" | "randompair" => Ok(StrategyKind::Random),
            other => Err(Error::InvalidStrategy(format!("unknown strategy {other:?}"))),
        }
    }
}

impl std::fmt::Display for StrategyKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            StrategyKind::Fixed => "fixed",
            StrategyKind::Ordered => "ordered",
            StrategyKind::Random => "random",
        })
    }
}

pub type Lookup = BTreeMap<MagnificationFactor, MagnificationFactor>;

#[derive(Debug, Clone, PartialEq)]
pub enum PairStrategy {
    FixedPair {
        first: MagnificationFactor,
        second: MagnificationFactor,
    },
    OrderedPair {
        lookup: Lookup,
    },
    RandomPair,
}

/// Next-higher adjacent magnification, wrapping down at 400x.
pub fn default_ordered_lookup() -> Lookup {
    use MagnificationFactor::*;
    [(X40, X100), (X100, X200), (X200, X400), (X400, X200)]
        .into_iter()
        .collect()
}

impl PairStrategy {
    pub fn fixed(first: MagnificationFactor, second: MagnificationFactor) -> Result<Self> {
        let s = PairStrategy::FixedPair { first, second };
        s.validate()?;
        Ok(s)
    }

    pub fn ordered(lookup: Lookup) -> Result<Self> {
        let s = PairStrategy::OrderedPair { lookup };
        s.validate()?;
        Ok(s)
    }

    pub fn ordered_default() -> Self {
        PairStrategy::OrderedPair {
            lookup: default_ordered_lookup(),
        }
    }

    pub fn kind(&self) -> StrategyKind {
        match self {
            PairStrategy::FixedPair { .. } => StrategyKind::Fixed,
            PairStrategy::OrderedPair { .. } => StrategyKind::Ordered,
            PairStrategy::RandomPair => StrategyKind::Random,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match self {
            PairStrategy::FixedPair { first, second } if first == second => Err(
                Error::InvalidStrategy(format!("fixed pair repeats magnification {first}")),
            ),
            PairStrategy::OrderedPair { lookup } => {
                for mf in MagnificationFactor::ALL {
                    match lookup.get(&mf) {
                        None => {
                            return Err(Error::InvalidStrategy(format!(
                                "lookup table has no entry for {mf}"
                            )))
                        }
                        Some(v) if *v == mf => {
                            return Err(Error::InvalidStrategy(format!(
                                "lookup maps {mf} to itself"
                            )))
                        }
                        _ => {}
                    }
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Draws the magnification tags of one pair.
    pub fn draw<R: rand::Rng + ?Sized>(&self, rng: &mut R) -> (MagnificationFactor, MagnificationFactor) {
        let all = MagnificationFactor::ALL;
        match self {
            PairStrategy::FixedPair { first, second } => (*first, *second),
            PairStrategy::OrderedPair { lookup } => {
                let first = all[rng.gen_range(0..4)];
                (first, lookup[&first])
            }
            PairStrategy::RandomPair => {
                // 12 ordered pairs: pick the first, then one of the other three
                let i = rng.gen_range(0..4);
                let mut j = rng.gen_range(0..3);
                if j >= i {
                    j += 1;
                }
                (all[i], all[j])
            }
        }
    }
}

pub fn degrees_of_freedom(strategy: &PairStrategy) -> usize {
    match strategy {
        PairStrategy::FixedPair { .. } => 0,
        PairStrategy::OrderedPair { .. } => 1,
        PairStrategy::RandomPair => 2,
    }
}

/// Two magnification views of one specimen. Views share storage with the
/// source sample.
#[derive(Debug, Clone)]
pub struct ViewPair {
    pub specimen_id: String,
    pub mf1: MagnificationFactor,
    pub mf2: MagnificationFactor,
    pub view1: Arc<RgbImage>,
    pub view2: Arc<RgbImage>,
}

pub fn sample_pair<R: rand::Rng + ?Sized>(
    strategy: &PairStrategy,
    sample: &MagnifiedSample,
    rng: &mut R,
) -> Result<ViewPair> {
    if !sample.is_complete() {
        return Err(Error::IncompleteSample(sample.specimen_id.clone()));
    }
    strategy.validate()?;
    let (mf1, mf2) = strategy.draw(rng);
    debug_assert_ne!(mf1, mf2);
    Ok(ViewPair {
        specimen_id: sample.specimen_id.clone(),
        mf1,
        mf2,
        view1: sample.image_arc(mf1).expect("complete"),
        view2: sample.image_arc(mf2).expect("complete"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use proptest::prelude::*;
    use MagnificationFactor::*;

    fn sample() -> MagnifiedSample {
        let images = MagnificationFactor::ALL
            .iter()
            .map(|&mf| (mf, RgbImage::from_pixel(2, 2, image::Rgb([mf.value() as u8, 0, 0]))))
            .collect();
        MagnifiedSample::new("s", "p", 0, images).unwrap()
    }

    #[test]
    fn fixed_is_constant() {
        let s = PairStrategy::fixed(X200, X400).unwrap();
        let mut r = rng::stream(0, &[]);
        for _ in 0..100 {
            let p = sample_pair(&s, &sample(), &mut r).unwrap();
            assert_eq!((p.mf1, p.mf2), (X200, X400));
            assert_eq!(p.view1.get_pixel(0, 0).0[0], 200);
            assert_eq!(p.view2.get_pixel(0, 0).0[0], 400u32 as u8);
        }
    }

    #[test]
    fn fixed_rejects_collapse() {
        assert!(PairStrategy::fixed(X100, X100).is_err());
    }

    #[test]
    fn ordered_table() {
        let t = default_ordered_lookup();
        assert_eq!(t[&X40], X100);
        assert_eq!(t[&X400], X200);
        for (k, v) in &t {
            assert_ne!(k, v);
        }
        let mut bad = t.clone();
        bad.insert(X200, X200);
        assert!(PairStrategy::ordered(bad).is_err());
        let mut partial = t;
        partial.remove(&X40);
        assert!(PairStrategy::ordered(partial).is_err());
    }

    #[test]
    fn ordered_second_view_follows_table() {
        let s = PairStrategy::ordered_default();
        let t = default_ordered_lookup();
        let mut r = rng::stream(5, &[]);
        let mut saw_40 = false;
        for _ in 0..200 {
            let p = sample_pair(&s, &sample(), &mut r).unwrap();
            assert_eq!(p.mf2, t[&p.mf1]);
            saw_40 |= p.mf1 == X40;
        }
        assert!(saw_40);
    }

    #[test]
    fn dof() {
        assert_eq!(degrees_of_freedom(&PairStrategy::fixed(X200, X400).unwrap()), 0);
        assert_eq!(degrees_of_freedom(&PairStrategy::ordered_default()), 1);
        assert_eq!(degrees_of_freedom(&PairStrategy::RandomPair), 2);
    }

    #[test]
    fn incomplete_sample() {
        let mut images = BTreeMap::new();
        images.insert(X40, RgbImage::new(1, 1));
        let s = MagnifiedSample::new_unchecked("x", "p", 0, images);
        let mut r = rng::stream(0, &[]);
        assert!(matches!(
            sample_pair(&PairStrategy::RandomPair, &s, &mut r),
            Err(Error::IncompleteSample(_))
        ));
    }

    #[test]
    fn parse_kind() {
        assert_eq!("Ordered".parse::<StrategyKind>().unwrap(), StrategyKind::Ordered);
        assert!("triple".parse::<StrategyKind>().is_err());
    }

    proptest! {
        #[test]
        fn never_collapses(seed in any::<u64>(), which in 0usize..3) {
            let s = match which {
                0 => PairStrategy::fixed(X40, X200).unwrap(),
                1 => PairStrategy::ordered_default(),
                _ => PairStrategy::RandomPair,
            };
            let mut r = rng::stream(seed, &[]);
            let src = sample();
            for _ in 0..50 {
                let p = sample_pair(&s, &src, &mut r).unwrap();
                prop_assert_ne!(p.mf1, p.mf2);
            }
        }
    }
}
