//! Covariate-shifted train/valid/test construction over labeled pools, plus
//! the mask utilities shared by the real-data protocols (circular masking,
//! Gaussian dilation).
//!
//! The skew of a split is the fraction of its positive-class records drawn
//! from attribute value A. Negative-class records mirror the skew so the
//! attribute marginal stays balanced, which is what makes the attribute a
//! pure confounder rather than a label proxy.

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::datagen::Split;
use crate::error::{Error, Result};
use crate::grid::{gaussian_blur, BitGrid, Boundary};

/// One row of a labeled pool.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LabeledRecord {
    pub id: String,
    /// 0 = negative, 1 = positive.
    pub label: u8,
    /// Categorical confounder value (site, view, corner...).
    pub attribute: String,
    /// Path or index of the underlying payload.
    pub payload: String,
}

/// Declarative description of the skew protocol.
#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SplitSpec {
    /// Fraction of positive-class records drawn from attribute A, per split.
    pub train_skew: f64,
    pub valid_skew: f64,
    pub test_skew: f64,
    pub balance_classes: bool,
    pub balance_attributes: bool,
    pub seed: u64,
    /// Explicit split sizes; `None` derives the largest feasible sizes at a
    /// 2:1:1 train:valid:test ratio from the limiting cell.
    pub train_size: Option<usize>,
    pub valid_size: Option<usize>,
    pub test_size: Option<usize>,
}

impl Default for SplitSpec {
    fn default() -> Self {
        SplitSpec {
            train_skew: 0.9,
            valid_skew: 0.1,
            test_skew: 0.1,
            balance_classes: true,
            balance_attributes: true,
            seed: 0,
            train_size: None,
            valid_size: None,
            test_size: None,
        }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, s) in [
            ("train_skew", self.train_skew),
            ("valid_skew", self.valid_skew),
            ("test_skew", self.test_skew),
        ] {
            if !(0.0..=1.0).contains(&s) || !s.is_finite() {
                return Err(Error::Config(format!("{name} must lie in [0,1], got {s}")));
            }
        }
        Ok(())
    }
}

/// Per-split demand on the four (label, attribute) cells.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
struct CellCounts {
    pos_a: usize,
    pos_b: usize,
    neg_a: usize,
    neg_b: usize,
}

impl CellCounts {
    fn total(&self) -> usize {
        self.pos_a + self.pos_b + self.neg_a + self.neg_b
    }
}

fn demand(size: usize, skew: f64, spec: &SplitSpec, pool_pos_frac: f64, pool_neg_a_frac: f64) -> CellCounts {
    if size == 0 {
        return CellCounts::default();
    }
    let n_pos = if spec.balance_classes {
        size / 2
    } else {
        ((size as f64) * pool_pos_frac).round() as usize
    }
    .min(size);
    let n_neg = size - n_pos;
    let pos_a = ((n_pos as f64) * skew).round() as usize;
    let pos_a = pos_a.min(n_pos);
    let neg_a = if spec.balance_attributes {
        // Mirror the positive skew so per-split attribute counts balance.
        n_neg - (((n_neg as f64) * skew).round() as usize).min(n_neg)
    } else {
        (((n_neg as f64) * pool_neg_a_frac).round() as usize).min(n_neg)
    };
    CellCounts { pos_a, pos_b: n_pos - pos_a, neg_a, neg_b: n_neg - neg_a }
}

struct Cells {
    /// Shuffled id lists: [pos_a, pos_b, neg_a, neg_b].
    ids: [Vec<String>; 4],
    attr_a: String,
    attr_b: String,
}

fn partition(pool: &[LabeledRecord], seed: u64) -> Result<Cells> {
    let mut attrs: Vec<&str> = pool.iter().map(|r| r.attribute.as_str()).collect();
    attrs.sort_unstable();
    attrs.dedup();
    if attrs.len() != 2 {
        return Err(Error::Config(format!(
            "skew construction needs exactly 2 attribute values, found {:?}",
            attrs
        )));
    }
    let (a, b) = (attrs[0].to_string(), attrs[1].to_string());
    let mut ids: [Vec<String>; 4] = Default::default();
    for r in pool {
        if r.label > 1 {
            return Err(Error::Config(format!("record {} has non-binary label {}", r.id, r.label)));
        }
        let idx = match (r.label, r.attribute == a) {
            (1, true) => 0,
            (1, false) => 1,
            (0, true) => 2,
            (0, false) => 3,
            _ => unreachable!("label checked above"),
        };
        ids[idx].push(r.id.clone());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for cell in &mut ids {
        cell.sort_unstable(); // independent of the caller's pool ordering
        cell.shuffle(&mut rng);
    }
    Ok(Cells { ids, attr_a: a, attr_b: b })
}

/// Builds the id -> split assignment for a covariate-shifted protocol.
/// Sampling is without replacement across splits and deterministic under the
/// spec seed.
pub fn build_confounded_split(
    pool: &[LabeledRecord],
    spec: &SplitSpec,
) -> Result<BTreeMap<String, Split>> {
    spec.validate()?;
    {
        let mut seen = std::collections::BTreeSet::new();
        for r in pool {
            if !seen.insert(&r.id) {
                return Err(Error::Config(format!("duplicate pool id `{}`", r.id)));
            }
        }
    }
    let cells = partition(pool, spec.seed)?;
    let have = [cells.ids[0].len(), cells.ids[1].len(), cells.ids[2].len(), cells.ids[3].len()];
    let n_pos = have[0] + have[1];
    let n_neg = have[2] + have[3];
    let pool_pos_frac = n_pos as f64 / pool.len().max(1) as f64;
    let pool_neg_a_frac = if n_neg == 0 { 0.0 } else { have[2] as f64 / n_neg as f64 };

    let demands_for = |sizes: [usize; 3]| -> [CellCounts; 3] {
        [
            demand(sizes[0], spec.train_skew, spec, pool_pos_frac, pool_neg_a_frac),
            demand(sizes[1], spec.valid_skew, spec, pool_pos_frac, pool_neg_a_frac),
            demand(sizes[2], spec.test_skew, spec, pool_pos_frac, pool_neg_a_frac),
        ]
    };
    let feasible = |ds: &[CellCounts; 3]| -> Option<(usize, usize)> {
        let need = [
            ds.iter().map(|d| d.pos_a).sum::<usize>(),
            ds.iter().map(|d| d.pos_b).sum::<usize>(),
            ds.iter().map(|d| d.neg_a).sum::<usize>(),
            ds.iter().map(|d| d.neg_b).sum::<usize>(),
        ];
        need.iter().zip(&have).enumerate().find_map(|(i, (&n, &h))| (n > h).then_some((i, n)))
    };

    let sizes = match (spec.train_size, spec.valid_size, spec.test_size) {
        (Some(t), Some(v), Some(e)) => [t, v, e],
        (None, None, None) => {
            // Largest 2:1:1 sizes the cells can pay for.
            let mut unit = pool.len() / 4;
            loop {
                let sizes = [2 * unit, unit, unit];
                if unit == 0 || feasible(&demands_for(sizes)).is_none() {
                    break sizes;
                }
                unit -= 1;
            }
        }
        _ => {
            return Err(Error::Config(
                "specify all of train_size/valid_size/test_size or none".into(),
            ))
        }
    };

    let demands = demands_for(sizes);
    if let Some((cell, need)) = feasible(&demands) {
        let names = [
            format!("label=1, attribute={}", cells.attr_a),
            format!("label=1, attribute={}", cells.attr_b),
            format!("label=0, attribute={}", cells.attr_a),
            format!("label=0, attribute={}", cells.attr_b),
        ];
        return Err(Error::Infeasible(format!(
            "cell ({}) needs {} records, {} available",
            names[cell], need, have[cell]
        )));
    }

    let mut cursors = [0usize; 4];
    let mut assignment = BTreeMap::new();
    for (split, d) in [Split::Train, Split::Valid, Split::Test].iter().zip(&demands) {
        for (cell, take) in [d.pos_a, d.pos_b, d.neg_a, d.neg_b].into_iter().enumerate() {
            for _ in 0..take {
                let id = cells.ids[cell][cursors[cell]].clone();
                cursors[cell] += 1;
                assignment.insert(id, *split);
            }
        }
        debug_assert_eq!(d.total(), [d.pos_a, d.pos_b, d.neg_a, d.neg_b].iter().sum::<usize>());
    }
    Ok(assignment)
}

/// Extracts skew-construction records from image samples using one of their
/// attribute keys.
pub fn records_from_samples(
    samples: &[crate::datagen::ImageSample],
    attribute_key: &str,
) -> Result<Vec<LabeledRecord>> {
    samples
        .iter()
        .map(|s| {
            let attribute = s.attributes.get(attribute_key).cloned().ok_or_else(|| {
                Error::Data(format!("sample {} lacks attribute `{attribute_key}`", s.id))
            })?;
            Ok(LabeledRecord {
                id: s.id.clone(),
                label: s.label,
                attribute,
                payload: s.id.clone(),
            })
        })
        .collect()
}

/// Reads a pool manifest (datagen columns plus `attribute`).
pub fn read_pool_manifest(path: &Path) -> Result<Vec<LabeledRecord>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("pool manifest missing column `{name}`")))
    };
    let (fi, li, ai) = (col("filename")?, col("label")?, col("attribute")?);
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let fname = rec.get(fi).unwrap().to_string();
        let label: u8 = rec
            .get(li)
            .unwrap()
            .parse()
            .map_err(|_| Error::Data(format!("bad label for {fname}")))?;
        out.push(LabeledRecord {
            id: fname.trim_end_matches(".png").to_string(),
            label,
            attribute: rec.get(ai).unwrap().to_string(),
            payload: fname,
        });
    }
    Ok(out)
}

/// Writes an id -> split assignment as a two-column csv.
pub fn write_assignment(path: &Path, assignment: &BTreeMap<String, Split>) -> Result<()> {
    let mut wtr = csv::Writer::from_path(path)?;
    wtr.write_record(["id", "split"])?;
    for (id, split) in assignment {
        wtr.write_record([id.as_str(), &split.to_string()])?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_assignment(path: &Path) -> Result<BTreeMap<String, Split>> {
    let mut rdr = csv::Reader::from_path(path)?;
    let mut out = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec?;
        let id = rec.get(0).ok_or_else(|| Error::Data("assignment row missing id".into()))?;
        let split: Split = rec
            .get(1)
            .ok_or_else(|| Error::Data("assignment row missing split".into()))?
            .parse()?;
        out.insert(id.to_string(), split);
    }
    Ok(out)
}

// ---- mask utilities ---------------------------------------------------------

/// Binary disc: pixel (i,j) is set iff its Euclidean distance from the grid
/// center ((h-1)/2, (w-1)/2) is at most `radius`.
pub fn make_circular_mask(height: usize, width: usize, radius: f64) -> Result<BitGrid> {
    if radius < 0.0 || !radius.is_finite() {
        return Err(Error::Config(format!("radius must be >= 0, got {radius}")));
    }
    let (cy, cx) = ((height as f64 - 1.0) / 2.0, (width as f64 - 1.0) / 2.0);
    let mut out = BitGrid::new(height, width);
    for y in 0..height {
        for x in 0..width {
            let d = ((y as f64 - cy).powi(2) + (x as f64 - cx).powi(2)).sqrt();
            if d <= radius {
                out.set(y, x, true);
            }
        }
    }
    Ok(out)
}

/// Binarization threshold applied to the blurred mask. Low enough that the
/// blur strictly grows the mask rather than eroding it.
pub const DILATE_THRESHOLD: f64 = 1e-3;

/// Grows a binary mask by Gaussian-blurring it (kernel truncated at 3σ,
/// normalized to sum 1) and re-binarizing at `DILATE_THRESHOLD`. The output
/// always contains the input.
pub fn dilate_mask(mask: &BitGrid, sigma: f64) -> Result<BitGrid> {
    if sigma < 0.0 || !sigma.is_finite() {
        return Err(Error::Config(format!("sigma must be >= 0, got {sigma}")));
    }
    if sigma == 0.0 {
        return Ok(mask.clone());
    }
    let (h, w) = (mask.height(), mask.width());
    let vals: Vec<f64> = mask.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let blurred = gaussian_blur(&vals, h, w, sigma, Boundary::Zero);
    let bits = blurred
        .iter()
        .zip(mask.bits())
        .map(|(&v, &orig)| orig || v > DILATE_THRESHOLD)
        .collect();
    BitGrid::from_bits(h, w, bits)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::BitGrid;

    fn toy_pool(per_cell: usize) -> Vec<LabeledRecord> {
        let mut pool = Vec::new();
        for label in [1u8, 0u8] {
            for attr in ["a", "b"] {
                for i in 0..per_cell {
                    pool.push(LabeledRecord {
                        id: format!("{label}{attr}{i:03}"),
                        label,
                        attribute: attr.to_string(),
                        payload: String::new(),
                    });
                }
            }
        }
        pool
    }

    fn cell_counts(
        pool: &[LabeledRecord],
        assignment: &BTreeMap<String, Split>,
        split: Split,
    ) -> (usize, usize, usize, usize) {
        let mut c = (0, 0, 0, 0);
        for r in pool {
            if assignment.get(&r.id) != Some(&split) {
                continue;
            }
            match (r.label, r.attribute.as_str()) {
                (1, "a") => c.0 += 1,
                (1, "b") => c.1 += 1,
                (0, "a") => c.2 += 1,
                (0, "b") => c.3 += 1,
                _ => unreachable!(),
            }
        }
        c
    }

    /// Hand enumeration: 20 train records at skew 0.9 over 10-per-cell pool.
    #[test]
    fn toy_pool_cell_counts_match_hand_enumeration() {
        let pool = toy_pool(10);
        let spec = SplitSpec {
            train_skew: 0.9,
            valid_skew: 0.1,
            test_skew: 0.1,
            train_size: Some(20),
            valid_size: Some(0),
            test_size: Some(0),
            seed: 7,
            ..Default::default()
        };
        let assignment = build_confounded_split(&pool, &spec).unwrap();
        assert_eq!(assignment.len(), 20);
        assert_eq!(cell_counts(&pool, &assignment, Split::Train), (9, 1, 1, 9));
    }

    #[test]
    fn ninety_ten_skew_on_ample_pool() {
        let pool = toy_pool(100);
        let spec = SplitSpec {
            train_size: Some(100),
            valid_size: Some(40),
            test_size: Some(40),
            seed: 3,
            ..Default::default()
        };
        let assignment = build_confounded_split(&pool, &spec).unwrap();
        let (pa, pb, na, nb) = cell_counts(&pool, &assignment, Split::Train);
        assert_eq!((pa, pb), (45, 5), "positive train records are 90% attribute-a");
        assert_eq!((na, nb), (5, 45));
        // Valid/test follow their own (reversed) skew.
        let (pa, pb, na, nb) = cell_counts(&pool, &assignment, Split::Valid);
        assert_eq!((pa, pb, na, nb), (2, 18, 18, 2));
        // No id in two splits: total assigned equals sum of sizes.
        assert_eq!(assignment.len(), 180);
    }

    /// Skew 0.5 everywhere removes the label-attribute correlation: the phi
    /// coefficient of the 2x2 table is 0 up to one-sample rounding.
    #[test]
    fn no_correlation_control_has_zero_phi() {
        let pool = toy_pool(50);
        let spec = SplitSpec {
            train_skew: 0.5,
            valid_skew: 0.5,
            test_skew: 0.5,
            train_size: Some(80),
            valid_size: Some(40),
            test_size: Some(40),
            seed: 1,
            ..Default::default()
        };
        let assignment = build_confounded_split(&pool, &spec).unwrap();
        for split in Split::ALL {
            let (pa, pb, na, nb) = cell_counts(&pool, &assignment, split);
            let num = (pa * nb) as f64 - (pb * na) as f64;
            let den = (((pa + pb) * (na + nb) * (pa + na) * (pb + nb)) as f64).sqrt();
            let phi = if den == 0.0 { 0.0 } else { num / den };
            let tol = 1.0 / (pa + pb + na + nb) as f64;
            assert!(phi.abs() <= tol + 1e-12, "split {split}: phi = {phi}");
        }
    }

    #[test]
    fn infeasible_demand_names_the_deficient_cell() {
        let pool = toy_pool(5);
        let spec = SplitSpec {
            train_size: Some(18),
            valid_size: Some(0),
            test_size: Some(0),
            train_skew: 1.0,
            ..Default::default()
        };
        match build_confounded_split(&pool, &spec) {
            Err(Error::Infeasible(msg)) => {
                assert!(msg.contains("label=1, attribute=a"), "message was: {msg}");
            }
            other => panic!("expected Infeasible, got {other:?}"),
        }
    }

    #[test]
    fn derived_sizes_use_two_one_one_ratio() {
        let pool = toy_pool(20); // 80 records
        let spec = SplitSpec { seed: 5, ..Default::default() };
        let assignment = build_confounded_split(&pool, &spec).unwrap();
        let count = |s: Split| assignment.values().filter(|&&v| v == s).count();
        let (t, v, e) = (count(Split::Train), count(Split::Valid), count(Split::Test));
        assert_eq!(t, 2 * v);
        assert_eq!(v, e);
        assert!(t > 0);
    }

    #[test]
    fn assignment_deterministic_and_pool_order_independent() {
        let pool = toy_pool(12);
        let spec = SplitSpec { seed: 9, ..Default::default() };
        let a = build_confounded_split(&pool, &spec).unwrap();
        let mut reversed: Vec<_> = pool.clone();
        reversed.reverse();
        let b = build_confounded_split(&reversed, &spec).unwrap();
        assert_eq!(a, b);
        let spec2 = SplitSpec { seed: 10, ..spec };
        let c = build_confounded_split(&pool, &spec2).unwrap();
        assert_ne!(a, c, "different seed should reshuffle cells");
    }

    #[test]
    fn circular_mask_small_cases() {
        // 3x3 radius 1: the corner distance sqrt(2) exceeds 1.
        let m = make_circular_mask(3, 3, 1.0).unwrap();
        let expect = [false, true, false, true, true, true, false, true, false];
        assert_eq!(m.bits(), &expect);
        // radius beyond the half-diagonal saturates.
        let m = make_circular_mask(4, 6, 10.0).unwrap();
        assert_eq!(m.count_ones(), 24);
        // radius 0 keeps only pixels at exactly the center.
        let m = make_circular_mask(5, 5, 0.0).unwrap();
        assert_eq!(m.count_ones(), 1);
        assert!(m.get(2, 2));
        assert!(make_circular_mask(3, 3, -1.0).is_err());
    }

    #[test]
    fn circular_mask_has_fourfold_symmetry() {
        for &(n, r) in &[(7usize, 2.3), (8, 3.0), (9, 4.0)] {
            let m = make_circular_mask(n, n, r).unwrap();
            for y in 0..n {
                for x in 0..n {
                    assert_eq!(m.get(y, x), m.get(x, n - 1 - y), "rotation by 90 degrees");
                }
            }
        }
    }

    #[test]
    fn dilate_zero_sigma_is_identity_and_ones_stay_ones() {
        let mut m = BitGrid::new(5, 5);
        m.set(2, 2, true);
        assert_eq!(dilate_mask(&m, 0.0).unwrap(), m);
        let ones = BitGrid::filled(4, 4, true);
        assert_eq!(dilate_mask(&ones, 1.5).unwrap(), ones);
        assert!(dilate_mask(&m, -0.5).is_err());
    }

    /// Brute-force 2-D convolution oracle for the single-pixel support.
    #[test]
    fn dilate_support_matches_convolution_oracle() {
        let (h, w) = (7, 7);
        let mut m = BitGrid::new(h, w);
        m.set(3, 3, true);
        let got = dilate_mask(&m, 1.0).unwrap();

        let vals: Vec<f64> = m.bits().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
        let blurred = crate::grid::tests::blur_reference(&vals, h, w, 1.0, Boundary::Zero);
        for y in 0..h {
            for x in 0..w {
                let want = blurred[y * w + x] > DILATE_THRESHOLD || m.get(y, x);
                assert_eq!(got.get(y, x), want, "pixel ({y},{x})");
            }
        }
        assert!(m.subset_of(&got));
        assert!(got.count_ones() > 1);
    }
}
