//! NT-Xent over a batch of 2N projected views.
//!
//! For anchor `i` with positive `p(i)` and unit rows `u = z / |z|`:
//!
//! ```text
//! L_i = -s(i, p(i)) / t + log sum_{k in D_i} exp(s(i, k) / t)
//! ```
//!
//! `D_i` is every row except `i` by default, so the positive sits in the
//! denominator. With `exclude_positive` it is also dropped from `D_i`.
//! The batch loss is the mean over all 2N anchors.

use ndarray::{Array1, Array2, ArrayView1, Axis};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_TEMPERATURE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub temperature: f64,
    /// Drop the positive from the denominator as well as the anchor.
    #[serde(default)]
    pub exclude_positive: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            temperature: DEFAULT_TEMPERATURE,
            exclude_positive: false,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ContrastiveBatch {
    pub z: Array2<f64>,
    pub pair_of: Vec<usize>,
    pub temperature: f64,
    pub exclude_positive: bool,
}

impl ContrastiveBatch {
    pub fn new(z: Array2<f64>, pair_of: Vec<usize>, temperature: f64) -> Result<Self> {
        let b = Self {
            z,
            pair_of,
            temperature,
            exclude_positive: false,
        };
        b.validate()?;
        Ok(b)
    }

    /// Stacks `z1` over `z2`; row `i` of one is the positive of row `i` of the other.
    pub fn from_views(z1: &Array2<f64>, z2: &Array2<f64>, temperature: f64) -> Result<Self> {
        if z1.dim() != z2.dim() {
            return Err(Error::ShapeMismatch {
                expected: format!("{:?}", z1.dim()),
                got: format!("{:?}", z2.dim()),
            });
        }
        let n = z1.nrows();
        let z = ndarray::concatenate(Axis(0), &[z1.view(), z2.view()]).expect("same width");
        let pair_of = (0..2 * n).map(|i| (i + n) % (2 * n)).collect();
        Self::new(z, pair_of, temperature)
    }

    pub fn with_config(mut self, cfg: &LossConfig) -> Result<Self> {
        self.temperature = cfg.temperature;
        self.exclude_positive = cfg.exclude_positive;
        self.validate()?;
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.z.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.z.nrows() == 0
    }

    pub fn validate(&self) -> Result<()> {
        let m = self.z.nrows();
        if m < 2 {
            return Err(Error::DegenerateBatch(format!("{m} views, need at least 2")));
        }
        if self.exclude_positive && m < 4 {
            return Err(Error::DegenerateBatch(
                "strict exclusion leaves no negatives with fewer than 4 views".into(),
            ));
        }
        if self.pair_of.len() != m {
            return Err(Error::DegenerateBatch(format!(
                "pair_of has {} entries for {m} rows",
                self.pair_of.len()
            )));
        }
        for (i, &p) in self.pair_of.iter().enumerate() {
            if p >= m || p == i || self.pair_of[p] != i {
                return Err(Error::DegenerateBatch(format!(
                    "pair_of is not a fixed-point-free involution at row {i}"
                )));
            }
        }
        if !(self.temperature > 0.0 && self.temperature.is_finite()) {
            return Err(Error::DegenerateBatch(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.z.iter().any(|v| !v.is_finite()) {
            return Err(Error::DegenerateBatch("non-finite embedding".into()));
        }
        Ok(())
    }
}

fn norm(v: ArrayView1<f64>) -> f64 {
    v.dot(&v).sqrt()
}

pub fn cosine_sim(z1: &[f64], z2: &[f64]) -> Result<f64> {
    if z1.len() != z2.len() {
        return Err(Error::ShapeMismatch {
            expected: format!("length {}", z1.len()),
            got: format!("length {}", z2.len()),
        });
    }
    let (a, b) = (ArrayView1::from(z1), ArrayView1::from(z2));
    let (na, nb) = (norm(a), norm(b));
    if na == 0.0 {
        return Err(Error::ZeroVector(0));
    }
    if nb == 0.0 {
        return Err(Error::ZeroVector(1));
    }
    Ok((a.dot(&b) / (na * nb)).clamp(-1.0, 1.0))
}

struct Forward {
    norms: Array1<f64>,
    u: Array2<f64>,
    /// Softmax weights over each anchor's denominator set, 0 elsewhere.
    prob: Array2<f64>,
    per_anchor: Vec<f64>,
}

fn forward(batch: &ContrastiveBatch) -> Result<Forward> {
    batch.validate()?;
    let m = batch.len();
    let norms: Array1<f64> = batch.z.rows().into_iter().map(norm).collect();
    if let Some(i) = norms.iter().position(|&n| n == 0.0) {
        return Err(Error::ZeroVector(i));
    }
    let u = &batch.z / &norms.view().insert_axis(Axis(1));
    let logits = u.dot(&u.t()) / batch.temperature;

    let mut prob = Array2::zeros((m, m));
    let mut per_anchor = Vec::with_capacity(m);
    for i in 0..m {
        let p = batch.pair_of[i];
        let in_denominator = |k: usize| k != i && !(batch.exclude_positive && k == p);
        let row = logits.row(i);
        let max = (0..m)
            .filter(|&k| in_denominator(k))
            .map(|k| row[k])
            .fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for k in (0..m).filter(|&k| in_denominator(k)) {
            let e = (row[k] - max).exp();
            prob[[i, k]] = e;
            total += e;
        }
        prob.row_mut(i).mapv_inplace(|e| e / total);
        per_anchor.push(max + total.ln() - row[p]);
    }
    Ok(Forward {
        norms,
        u,
        prob,
        per_anchor,
    })
}

/// Loss of every anchor, in row order.
pub fn nt_xent_per_anchor(batch: &ContrastiveBatch) -> Result<Vec<f64>> {
    Ok(forward(batch)?.per_anchor)
}

pub fn nt_xent(batch: &ContrastiveBatch) -> Result<f64> {
    let l = nt_xent_per_anchor(batch)?;
    Ok(l.iter().sum::<f64>() / l.len() as f64)
}

pub fn nt_xent_grad(batch: &ContrastiveBatch) -> Result<Array2<f64>> {
    Ok(nt_xent_with_grad(batch)?.1)
}

/// Loss and its gradient w.r.t. `z` from a single forward pass.
pub fn nt_xent_with_grad(batch: &ContrastiveBatch) -> Result<(f64, Array2<f64>)> {
    let f = forward(batch)?;
    let m = batch.len();
    let scale = 1.0 / (m as f64 * batch.temperature);

    // dL/ds_ik for the similarity matrix, before symmetrising
    let mut g = f.prob;
    for i in 0..m {
        g[[i, batch.pair_of[i]]] -= 1.0;
    }
    g *= scale;
    let du = (&g + &g.t()).dot(&f.u);

    // chain through u = z / |z|: (I - u u^T) du / |z|
    let mut dz = du;
    for ((mut row, u), &n) in dz.rows_mut().into_iter().zip(f.u.rows()).zip(&f.norms) {
        let radial = row.dot(&u);
        row.scaled_add(-radial, &u);
        row /= n;
    }
    let loss = f.per_anchor.iter().sum::<f64>() / m as f64;
    Ok((loss, dz))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;
    use ndarray::array;
    use proptest::prelude::*;
    use rand::Rng;

    /// Direct transcription: loops, explicit exp/log, no stabilisation.
    fn oracle(z: &Array2<f64>, pair_of: &[usize], t: f64, strict: bool) -> f64 {
        let m = z.nrows();
        let row = |i: usize| z.row(i).to_vec();
        let mut total = 0.0;
        for i in 0..m {
            let pos = (cosine_sim(&row(i), &row(pair_of[i])).unwrap() / t).exp();
            let mut den = 0.0;
            for k in 0..m {
                if k != i && !(strict && k == pair_of[i]) {
                    den += (cosine_sim(&row(i), &row(k)).unwrap() / t).exp();
                }
            }
            total += -(pos / den).ln();
        }
        total / m as f64
    }

    fn random_batch(seed: u64, n: usize, d: usize, t: f64) -> ContrastiveBatch {
        let mut r = rng::stream(seed, &[]);
        let z = Array2::from_shape_fn((2 * n, d), |_| r.gen_range(-1.0..1.0));
        let z1 = z.slice(ndarray::s![..n, ..]).to_owned();
        let z2 = z.slice(ndarray::s![n.., ..]).to_owned();
        ContrastiveBatch::from_views(&z1, &z2, t).unwrap()
    }

    fn finite_difference(batch: &ContrastiveBatch, h: f64) -> Array2<f64> {
        let mut out = Array2::zeros(batch.z.dim());
        for idx in ndarray::indices(batch.z.dim()) {
            let mut b = batch.clone();
            b.z[idx] += h;
            let up = nt_xent(&b).unwrap();
            b.z[idx] -= 2.0 * h;
            let down = nt_xent(&b).unwrap();
            out[idx] = (up - down) / (2.0 * h);
        }
        out
    }

    fn rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
        let diff = (a - b).mapv(|v| v * v).sum().sqrt();
        let scale = a.mapv(|v| v * v).sum().sqrt().max(b.mapv(|v| v * v).sum().sqrt());
        if scale == 0.0 {
            diff
        } else {
            diff / scale
        }
    }

    #[test]
    fn cosine_examples() {
        assert_eq!(cosine_sim(&[1.0, 0.0], &[1.0, 0.0]).unwrap(), 1.0);
        assert_eq!(cosine_sim(&[1.0, 0.0], &[-1.0, 0.0]).unwrap(), -1.0);
        let v = cosine_sim(&[1.0, 1.0, 0.0], &[1.0, 0.0, 0.0]).unwrap();
        assert!((v - 1.0 / 2f64.sqrt()).abs() < 1e-12);
        assert!(matches!(cosine_sim(&[0.0, 0.0], &[1.0, 0.0]), Err(Error::ZeroVector(0))));
    }

    #[test]
    fn single_pair_is_exactly_zero() {
        let z = array![[0.3, -2.0, 1.0], [5.0, 0.1, 0.2]];
        let b = ContrastiveBatch::new(z, vec![1, 0], 0.01).unwrap();
        assert_eq!(nt_xent(&b).unwrap(), 0.0);
        assert!(nt_xent_grad(&b).unwrap().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn two_pair_hand_value() {
        let z = array![[1.0, 0.0], [1.0, 0.0], [0.0, 1.0], [0.0, 1.0]];
        let b = ContrastiveBatch::new(z, vec![1, 0, 3, 2], 1.0).unwrap();
        let e = std::f64::consts::E;
        let expected = -(e / (e + 2.0)).ln();
        assert!((expected - 0.55144471).abs() < 1e-8);
        for l in nt_xent_per_anchor(&b).unwrap() {
            assert!((l - expected).abs() < 1e-12);
        }
        let fd = finite_difference(&b, 1e-6);
        let g = nt_xent_grad(&b).unwrap();
        assert!(rel_err(&g, &fd) < 1e-4 || (&g - &fd).iter().all(|v| v.abs() < 1e-8));
    }

    #[test]
    fn scale_invariant() {
        let b = random_batch(3, 3, 5, 0.1);
        let mut scaled = b.clone();
        scaled.z *= 5.0;
        assert!((nt_xent(&b).unwrap() - nt_xent(&scaled).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn gradient_orthogonal_on_sphere() {
        let mut b = random_batch(9, 4, 6, 0.5);
        for mut row in b.z.rows_mut() {
            let n = row.dot(&row).sqrt();
            row /= n;
        }
        let g = nt_xent_grad(&b).unwrap();
        for (gr, zr) in g.rows().into_iter().zip(b.z.rows()) {
            assert!(gr.dot(&zr).abs() < 1e-12);
        }
    }

    #[test]
    fn preconditions() {
        let z = array![[1.0, 0.0]];
        assert!(matches!(ContrastiveBatch::new(z, vec![0], 1.0), Err(Error::DegenerateBatch(_))));
        let z = array![[1.0, 0.0], [0.0, 1.0]];
        assert!(ContrastiveBatch::new(z.clone(), vec![0, 1], 1.0).is_err());
        assert!(ContrastiveBatch::new(z.clone(), vec![1, 0], 0.0).is_err());
        let zero = array![[1.0, 0.0], [0.0, 0.0]];
        let b = ContrastiveBatch::new(zero, vec![1, 0], 1.0).unwrap();
        assert!(matches!(nt_xent(&b), Err(Error::ZeroVector(1))));
        let strict = LossConfig {
            temperature: 1.0,
            exclude_positive: true,
        };
        let b = ContrastiveBatch::new(z, vec![1, 0], 1.0).unwrap();
        assert!(b.with_config(&strict).is_err());
    }

    #[test]
    fn low_temperature_is_stable() {
        let b = random_batch(1, 8, 16, 0.01);
        let (l, g) = nt_xent_with_grad(&b).unwrap();
        assert!(l.is_finite() && g.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn separated_clusters_vanish_at_low_temperature() {
        // each pair shares a direction, pairs orthogonal to each other
        let z = array![[1.0, 0.0, 0.0], [0.9, 0.05, 0.0], [0.0, 1.0, 0.0], [0.0, 0.95, 0.1], [0.0, 0.0, 1.0], [0.1, 0.0, 1.0]];
        let b = ContrastiveBatch::new(z, vec![1, 0, 3, 2, 5, 4], 0.01).unwrap();
        let b = b.with_config(&LossConfig {
            temperature: 0.01,
            exclude_positive: true,
        });
        for l in nt_xent_per_anchor(&b.unwrap()).unwrap() {
            assert!(l < 1e-6, "{l}");
        }
    }

    #[test]
    fn monotone_in_positive_similarity() {
        let z = array![[1.0, 0.0, 0.0], [0.5, 0.5, 0.0], [0.0, 0.0, 1.0], [0.0, 0.3, 1.0]];
        let b = ContrastiveBatch::new(z, vec![1, 0, 3, 2], 0.1).unwrap();
        let mut closer = b.clone();
        closer.z[[1, 1]] = 0.2;
        assert!(nt_xent(&closer).unwrap() < nt_xent(&b).unwrap());
    }

    proptest! {
        #[test]
        fn matches_oracle(seed in any::<u64>(), n in 1usize..=4, ti in 0usize..3, strict in any::<bool>()) {
            let t = [0.01, 0.1, 1.0][ti];
            prop_assume!(!(strict && n < 2));
            let mut b = random_batch(seed, n, 4, t);
            b.exclude_positive = strict;
            let want = oracle(&b.z, &b.pair_of, t, strict);
            prop_assume!(want.is_finite());
            prop_assert!((nt_xent(&b).unwrap() - want).abs() < 1e-9 * want.abs().max(1.0));
        }

        #[test]
        fn gradient_matches_finite_differences(seed in any::<u64>(), n in 1usize..=8, strict in any::<bool>()) {
            prop_assume!(!(strict && n < 2));
            let mut b = random_batch(seed, n, 5, 0.5);
            b.exclude_positive = strict;
            let g = nt_xent_grad(&b).unwrap();
            let fd = finite_difference(&b, 1e-6);
            prop_assert!(rel_err(&g, &fd) < 1e-4 || (&g - &fd).iter().all(|v| v.abs() < 1e-8));
        }

        #[test]
        fn permutation_equivariant(seed in any::<u64>(), n in 2usize..=4) {
            let b = random_batch(seed, n, 3, 0.2);
            let m = 2 * n;
            let mut r = rng::stream(seed, &[1]);
            let mut perm: Vec<usize> = (0..m).collect();
            rand::seq::SliceRandom::shuffle(perm.as_mut_slice(), &mut r);
            // new row j holds old row perm[j]
            let mut inv = vec![0; m];
            for (j, &p) in perm.iter().enumerate() {
                inv[p] = j;
            }
            let z = Array2::from_shape_fn(b.z.dim(), |(j, c)| b.z[[perm[j], c]]);
            let pair_of = perm.iter().map(|&p| inv[b.pair_of[p]]).collect();
            let pb = ContrastiveBatch::new(z, pair_of, 0.2).unwrap();
            let before = nt_xent_per_anchor(&b).unwrap();
            let after = nt_xent_per_anchor(&pb).unwrap();
            for j in 0..m {
                prop_assert!((after[j] - before[perm[j]]).abs() < 1e-12);
            }
        }
    }
}
