//! Synthetic crosses-plus-confounder dataset.
//!
//! Class is the number of crosses in the image (two crosses = class 0, one
//! cross = class 1). Every training image also carries a small square box in
//! a corner whose position is perfectly correlated with the class; in the
//! validation and test splits that correlation is reversed, so a model that
//! keys on the box generalizes below chance while a model that counts
//! crosses is unaffected.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::BitGrid;
use crate::tensor::Tensor;

/// Corner inset of the confounder box, in pixels.
pub const CONFOUNDER_INSET: usize = 2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Valid,
    Test,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Valid, Split::Test];
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Split::Train => "train",
            Split::Valid => "valid",
            Split::Test => "test",
        };
        f.write_str(s)
    }
}

impl FromStr for Split {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "valid" => Ok(Split::Valid),
            "test" => Ok(Split::Test),
            other => Err(Error::Data(format!("unknown split `{other}`"))),
        }
    }
}

/// Bottom corner hosting the confounder box.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Corner {
    BottomLeft,
    BottomRight,
}

impl Corner {
    pub fn tag(self) -> &'static str {
        match self {
            Corner::BottomLeft => "bl",
            Corner::BottomRight => "br",
        }
    }

    pub fn from_tag(s: &str) -> Result<Self> {
        match s {
            "bl" => Ok(Corner::BottomLeft),
            "br" => Ok(Corner::BottomRight),
            other => Err(Error::Data(format!("unknown corner `{other}`"))),
        }
    }
}

/// The corner assignment is a pure function of (label, split): in training,
/// class 0 puts the box bottom-right and class 1 bottom-left; validation and
/// test reverse that logic.
pub fn confounder_corner(label: u8, split: Split) -> Corner {
    let train_corner = if label == 0 { Corner::BottomRight } else { Corner::BottomLeft };
    match split {
        Split::Train => train_corner,
        Split::Valid | Split::Test => match train_corner {
            Corner::BottomLeft => Corner::BottomRight,
            Corner::BottomRight => Corner::BottomLeft,
        },
    }
}

#[derive(Clone, Debug, Serialize, Deserialize, PartialEq)]
#[serde(default)]
pub struct SynthConfig {
    /// Pixels per side.
    pub image_size: usize,
    pub n_train: usize,
    pub n_valid: usize,
    pub n_test: usize,
    /// Inclusive min/max cross arm length in pixels.
    pub cross_size_range: (usize, usize),
    /// Side length of the confounder box in pixels.
    pub confounder_size: usize,
    pub foreground_intensity: f32,
    pub background_intensity: f32,
    /// Additive uniform pixel noise amplitude (0 disables).
    pub noise_amplitude: f32,
    pub seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            image_size: 64,
            n_train: 500,
            n_valid: 128,
            n_test: 128,
            cross_size_range: (3, 7),
            confounder_size: 6,
            foreground_intensity: 1.0,
            background_intensity: 0.0,
            noise_amplitude: 0.0,
            seed: 0,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_train < 1 || self.n_valid < 1 || self.n_test < 1 {
            return Err(Error::Config("n_train, n_valid, n_test must all be >= 1".into()));
        }
        let (lo, hi) = self.cross_size_range;
        if lo > hi {
            return Err(Error::Config("cross_size_range min exceeds max".into()));
        }
        if 2 * hi + 1 > self.image_size {
            return Err(Error::Config(format!(
                "cross of arm length {hi} does not fit in a {0}x{0} image",
                self.image_size
            )));
        }
        if self.confounder_size + 2 * CONFOUNDER_INSET > self.image_size {
            return Err(Error::Config(format!(
                "confounder of side {} with inset {CONFOUNDER_INSET} does not fit in a {}px image",
                self.confounder_size, self.image_size
            )));
        }
        for v in [self.foreground_intensity, self.background_intensity] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config("intensities must lie in [0,1]".into()));
            }
        }
        if self.noise_amplitude < 0.0 {
            return Err(Error::Config("noise_amplitude must be >= 0".into()));
        }
        Ok(())
    }

    fn total(&self) -> usize {
        self.n_train + self.n_valid + self.n_test
    }
}

/// One grayscale sample with its region-of-interest mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageSample {
    pub id: String,
    /// [H,W] grid, values in [0,1].
    pub image: Tensor<f32>,
    /// Exactly the union of cross pixels.
    pub mask: BitGrid,
    /// 0 = two crosses, 1 = one cross.
    pub label: u8,
    pub attributes: BTreeMap<String, String>,
    /// `None` for unassigned pool samples.
    pub split: Option<Split>,
}

impl ImageSample {
    pub fn height(&self) -> usize {
        self.image.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[1]
    }
}

/// Corner window (rows, cols) that a confounder box occupies.
pub fn corner_window(image_size: usize, confounder_size: usize, corner: Corner) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let rows = image_size - CONFOUNDER_INSET - confounder_size..image_size - CONFOUNDER_INSET;
    let cols = match corner {
        Corner::BottomLeft => CONFOUNDER_INSET..CONFOUNDER_INSET + confounder_size,
        Corner::BottomRight => image_size - CONFOUNDER_INSET - confounder_size..image_size - CONFOUNDER_INSET,
    };
    (rows, cols)
}

/// Draws a plus-shaped glyph of the given arm length centered at `(cy, cx)`
/// onto the canvas, returning the set of written pixel indices.
pub fn render_cross(
    center: (usize, usize),
    arm_length: usize,
    canvas: &mut Tensor<f32>,
    intensity: f32,
) -> Result<Vec<usize>> {
    let (h, w) = (canvas.shape()[0], canvas.shape()[1]);
    let (cy, cx) = center;
    if cy >= h || cx >= w || cy < arm_length || cx < arm_length || cy + arm_length >= h || cx + arm_length >= w {
        return Err(Error::Config(format!(
            "cross center ({cy},{cx}) with arm {arm_length} is out of bounds for {h}x{w}"
        )));
    }
    let mut written = Vec::with_capacity(4 * arm_length + 1);
    for x in cx - arm_length..=cx + arm_length {
        written.push(cy * w + x);
    }
    for y in cy - arm_length..=cy + arm_length {
        if y != cy {
            written.push(y * w + cx);
        }
    }
    for &p in &written {
        canvas.data_mut()[p] = intensity;
    }
    Ok(written)
}

#[derive(Clone, Copy)]
struct BBox {
    y0: usize,
    y1: usize, // exclusive
    x0: usize,
    x1: usize, // exclusive
}

impl BBox {
    fn of_cross(cy: usize, cx: usize, arm: usize) -> BBox {
        BBox { y0: cy - arm, y1: cy + arm + 1, x0: cx - arm, x1: cx + arm + 1 }
    }

    fn intersects(&self, other: &BBox) -> bool {
        self.y0 < other.y1 && other.y0 < self.y1 && self.x0 < other.x1 && other.x0 < self.x1
    }
}

const PLACEMENT_ATTEMPTS: usize = 1000;

fn render_sample(
    cfg: &SynthConfig,
    id: String,
    label: u8,
    split: Option<Split>,
    corner: Corner,
    rng: &mut ChaCha8Rng,
) -> Result<ImageSample> {
    let size = cfg.image_size;
    let mut image = Tensor::filled(&[size, size], cfg.background_intensity);
    let mut mask = BitGrid::new(size, size);

    // Both corner windows are kept cross-free so the label is always read
    // off the cross count alone.
    let blocked: Vec<BBox> = [Corner::BottomLeft, Corner::BottomRight]
        .iter()
        .map(|&c| {
            let (rows, cols) = corner_window(size, cfg.confounder_size, c);
            BBox { y0: rows.start, y1: rows.end, x0: cols.start, x1: cols.end }
        })
        .collect();

    let n_crosses = if label == 0 { 2 } else { 1 };
    let mut placed: Vec<BBox> = Vec::new();
    for _ in 0..n_crosses {
        let mut ok = false;
        for _attempt in 0..PLACEMENT_ATTEMPTS {
            let arm = rng.gen_range(cfg.cross_size_range.0..=cfg.cross_size_range.1);
            let cy = rng.gen_range(arm..size - arm);
            let cx = rng.gen_range(arm..size - arm);
            let bbox = BBox::of_cross(cy, cx, arm);
            if blocked.iter().chain(placed.iter()).any(|b| bbox.intersects(b)) {
                continue;
            }
            let written = render_cross((cy, cx), arm, &mut image, cfg.foreground_intensity)?;
            for p in written {
                mask.set(p / size, p % size, true);
            }
            placed.push(bbox);
            ok = true;
            break;
        }
        if !ok {
            return Err(Error::Infeasible(format!(
                "could not place a cross after {PLACEMENT_ATTEMPTS} attempts \
                 (image_size={size}, cross_size_range={:?}, confounder_size={})",
                cfg.cross_size_range, cfg.confounder_size
            )));
        }
    }

    let (rows, cols) = corner_window(size, cfg.confounder_size, corner);
    for y in rows {
        for x in cols.clone() {
            image.data_mut()[y * size + x] = cfg.foreground_intensity;
        }
    }

    if cfg.noise_amplitude > 0.0 {
        let a = cfg.noise_amplitude;
        for v in image.data_mut() {
            *v = (*v + rng.gen_range(-a..=a)).clamp(0.0, 1.0);
        }
    }

    let mut attributes = BTreeMap::new();
    attributes.insert("confounder_corner".to_string(), corner.tag().to_string());
    Ok(ImageSample { id, image, mask, label, attributes, split })
}

/// Balanced label sequence of length `n` (counts differ by at most one),
/// shuffled in place.
fn balanced_labels(n: usize, rng: &mut ChaCha8Rng) -> Vec<u8> {
    let n0 = n.div_ceil(2);
    let mut labels: Vec<u8> = std::iter::repeat(0u8).take(n0).chain(std::iter::repeat(1u8).take(n - n0)).collect();
    labels.shuffle(rng);
    labels
}

/// Generates the full train/valid/test dataset with the confounder-corner
/// logic inversion between the training and held-out splits.
pub fn generate_synthetic_dataset(config: &SynthConfig) -> Result<Vec<ImageSample>> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut samples = Vec::with_capacity(config.total());
    for (split, count) in [
        (Split::Train, config.n_train),
        (Split::Valid, config.n_valid),
        (Split::Test, config.n_test),
    ] {
        let labels = balanced_labels(count, &mut rng);
        for (i, &label) in labels.iter().enumerate() {
            let corner = confounder_corner(label, split);
            let id = format!("{split}_{i:05}");
            samples.push(render_sample(config, id, label, Some(split), corner, &mut rng)?);
        }
    }
    Ok(samples)
}

/// Generates an unassigned pool with `per_cell` samples for each
/// (label, corner) cell, for covariate-shift split construction. The corner
/// doubles as the categorical attribute.
pub fn generate_attributed_pool(config: &SynthConfig, per_cell: usize) -> Result<Vec<ImageSample>> {
    config.validate()?;
    if per_cell == 0 {
        return Err(Error::Config("per_cell must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut samples = Vec::with_capacity(per_cell * 4);
    let mut i = 0;
    for label in [0u8, 1u8] {
        for corner in [Corner::BottomLeft, Corner::BottomRight] {
            for _ in 0..per_cell {
                let id = format!("pool_{i:05}");
                samples.push(render_sample(config, id, label, None, corner, &mut rng)?);
                i += 1;
            }
        }
    }
    Ok(samples)
}

// ---- serialization ---------------------------------------------------------

fn split_dir_name(split: Option<Split>) -> String {
    match split {
        Some(s) => s.to_string(),
        None => "pool".to_string(),
    }
}

fn save_png_gray(path: &Path, data: &[u8], h: usize, w: usize) -> Result<()> {
    let img = image::GrayImage::from_raw(w as u32, h as u32, data.to_vec())
        .ok_or_else(|| Error::Data("png buffer size mismatch".into()))?;
    img.save(path)?;
    Ok(())
}

/// Writes one directory per split with `images/`, `masks/` (8-bit grayscale
/// PNG) and a `manifest.csv`. Pool samples go to a `pool/` directory whose
/// manifest carries an extra `attribute` column.
pub fn save_dataset(samples: &[ImageSample], root: &Path) -> Result<()> {
    let mut by_split: BTreeMap<String, Vec<&ImageSample>> = BTreeMap::new();
    for s in samples {
        by_split.entry(split_dir_name(s.split)).or_default().push(s);
    }
    for (dir, group) in by_split {
        let base = root.join(&dir);
        fs::create_dir_all(base.join("images"))?;
        fs::create_dir_all(base.join("masks"))?;
        let is_pool = dir == "pool";
        let mut wtr = csv::Writer::from_path(base.join("manifest.csv"))?;
        if is_pool {
            wtr.write_record(["filename", "label", "split", "confounder_corner", "attribute"])?;
        } else {
            wtr.write_record(["filename", "label", "split", "confounder_corner"])?;
        }
        for s in group {
            let (h, w) = (s.height(), s.width());
            let img_bytes: Vec<u8> =
                s.image.data().iter().map(|&v| (v.clamp(0.0, 1.0) * 255.0).round() as u8).collect();
            let mask_bytes: Vec<u8> = s.mask.bits().iter().map(|&b| if b { 255 } else { 0 }).collect();
            let fname = format!("{}.png", s.id);
            save_png_gray(&base.join("images").join(&fname), &img_bytes, h, w)?;
            save_png_gray(&base.join("masks").join(&fname), &mask_bytes, h, w)?;
            let corner = s
                .attributes
                .get("confounder_corner")
                .cloned()
                .unwrap_or_default();
            if is_pool {
                wtr.write_record([
                    fname.as_str(),
                    &s.label.to_string(),
                    &dir,
                    corner.as_str(),
                    corner.as_str(),
                ])?;
            } else {
                wtr.write_record([fname.as_str(), &s.label.to_string(), &dir, corner.as_str()])?;
            }
        }
        wtr.flush()?;
    }
    Ok(())
}

fn load_png_gray(path: &Path) -> Result<(usize, usize, Vec<u8>)> {
    let img = image::open(path)?.into_luma8();
    let (w, h) = (img.width() as usize, img.height() as usize);
    Ok((h, w, img.into_raw()))
}

fn load_split_dir(base: &Path, out: &mut Vec<ImageSample>) -> Result<()> {
    let mut rdr = csv::Reader::from_path(base.join("manifest.csv"))?;
    let headers = rdr.headers()?.clone();
    let col = |name: &str| headers.iter().position(|h| h == name);
    let (fi, li, si, ci) = (
        col("filename").ok_or_else(|| Error::Data("manifest missing `filename`".into()))?,
        col("label").ok_or_else(|| Error::Data("manifest missing `label`".into()))?,
        col("split").ok_or_else(|| Error::Data("manifest missing `split`".into()))?,
        col("confounder_corner"),
    );
    let ai = col("attribute");
    for rec in rdr.records() {
        let rec = rec?;
        let fname = rec.get(fi).unwrap().to_string();
        let label: u8 = rec
            .get(li)
            .unwrap()
            .parse()
            .map_err(|_| Error::Data(format!("bad label in manifest row for {fname}")))?;
        let split_s = rec.get(si).unwrap();
        let split = if split_s == "pool" { None } else { Some(split_s.parse()?) };
        let (h, w, img) = load_png_gray(&base.join("images").join(&fname))?;
        let (mh, mw, msk) = load_png_gray(&base.join("masks").join(&fname))?;
        if (h, w) != (mh, mw) {
            return Err(Error::Data(format!("image/mask size mismatch for {fname}")));
        }
        let image = Tensor::from_vec(&[h, w], img.iter().map(|&b| b as f32 / 255.0).collect())?;
        let mask = BitGrid::from_bits(h, w, msk.iter().map(|&b| b > 127).collect())?;
        let mut attributes = BTreeMap::new();
        if let Some(ci) = ci {
            if let Some(c) = rec.get(ci) {
                attributes.insert("confounder_corner".into(), c.to_string());
            }
        }
        if let Some(ai) = ai {
            if let Some(a) = rec.get(ai) {
                attributes.insert("attribute".into(), a.to_string());
            }
        }
        let id = fname.trim_end_matches(".png").to_string();
        out.push(ImageSample { id, image, mask, label, attributes, split });
    }
    Ok(())
}

/// Loads every split directory present under `root`.
pub fn load_dataset(root: &Path) -> Result<Vec<ImageSample>> {
    let mut out = Vec::new();
    let mut found = false;
    for dir in ["train", "valid", "test", "pool"] {
        let base = root.join(dir);
        if base.join("manifest.csv").exists() {
            found = true;
            load_split_dir(&base, &mut out)?;
        }
    }
    if !found {
        return Err(Error::Data(format!("no split directories with manifest.csv under {}", root.display())));
    }
    Ok(out)
}

/// Reassigns sample splits from an id -> split map; ids absent from the map
/// are dropped (they were not selected by the split construction).
pub fn apply_assignment(samples: Vec<ImageSample>, assignment: &BTreeMap<String, Split>) -> Vec<ImageSample> {
    samples
        .into_iter()
        .filter_map(|mut s| {
            assignment.get(&s.id).map(|&sp| {
                s.split = Some(sp);
                s
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn fg_pixels(img: &Tensor<f32>, fg: f32) -> Vec<usize> {
        img.data().iter().enumerate().filter(|(_, &v)| v == fg).map(|(i, _)| i).collect()
    }

    #[test]
    fn render_cross_pixel_counts() {
        let mut canvas = Tensor::<f32>::zeros(&[9, 9]);
        let w = render_cross((4, 4), 1, &mut canvas, 1.0).unwrap();
        assert_eq!(w.len(), 5);
        let mut canvas = Tensor::<f32>::zeros(&[9, 9]);
        let w = render_cross((4, 4), 0, &mut canvas, 1.0).unwrap();
        assert_eq!(w.len(), 1);
    }

    #[test]
    fn render_cross_disjoint_centers_write_disjoint_sets() {
        let mut canvas = Tensor::<f32>::zeros(&[16, 16]);
        let a = render_cross((3, 3), 1, &mut canvas, 1.0).unwrap();
        let b = render_cross((10, 10), 2, &mut canvas, 1.0).unwrap();
        let mut all: Vec<usize> = a.iter().chain(b.iter()).copied().collect();
        let total = all.len();
        all.sort_unstable();
        all.dedup();
        assert_eq!(all.len(), total, "written sets overlap");
        assert_eq!(total, 5 + 9);
    }

    #[test]
    fn render_cross_rejects_out_of_bounds() {
        let mut canvas = Tensor::<f32>::zeros(&[8, 8]);
        assert!(render_cross((0, 4), 1, &mut canvas, 1.0).is_err());
        assert!(render_cross((4, 7), 1, &mut canvas, 1.0).is_err());
    }

    #[test]
    fn dataset_has_paper_split_sizes() {
        let cfg = SynthConfig { n_train: 500, n_valid: 128, n_test: 128, ..Default::default() };
        let data = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(data.len(), 756);
        for (split, want) in [(Split::Train, 500), (Split::Valid, 128), (Split::Test, 128)] {
            assert_eq!(data.iter().filter(|s| s.split == Some(split)).count(), want);
        }
    }

    #[test]
    fn regeneration_is_deterministic() {
        let cfg = SynthConfig { n_train: 8, n_valid: 4, n_test: 4, seed: 41, ..Default::default() };
        let a = generate_synthetic_dataset(&cfg).unwrap();
        let b = generate_synthetic_dataset(&cfg).unwrap();
        assert_eq!(a, b);
    }

    /// Corner-window pixel scan: the chosen corner is fully lit, the other
    /// corner untouched, and the rule matches `confounder_corner`.
    #[test]
    fn corner_logic_matches_label_and_split() {
        let cfg = SynthConfig { n_train: 24, n_valid: 12, n_test: 12, seed: 3, ..Default::default() };
        let data = generate_synthetic_dataset(&cfg).unwrap();
        for s in &data {
            let split = s.split.unwrap();
            let expect = confounder_corner(s.label, split);
            let other = match expect {
                Corner::BottomLeft => Corner::BottomRight,
                Corner::BottomRight => Corner::BottomLeft,
            };
            for (corner, want_fg) in [(expect, true), (other, false)] {
                let (rows, cols) = corner_window(cfg.image_size, cfg.confounder_size, corner);
                for y in rows {
                    for x in cols.clone() {
                        let v = s.image.data()[y * cfg.image_size + x];
                        if want_fg {
                            assert_eq!(v, cfg.foreground_intensity);
                        } else {
                            assert_eq!(v, cfg.background_intensity);
                        }
                    }
                }
            }
            // Train split sanity against the figure's stated rule.
            if split == Split::Train && s.label == 0 {
                assert_eq!(expect, Corner::BottomRight);
            }
            if split == Split::Train && s.label == 1 {
                assert_eq!(expect, Corner::BottomLeft);
            }
        }
    }

    /// For noise-free binary images, foreground = mask union confounder box,
    /// and the mask never touches either corner window.
    #[test]
    fn mask_is_exactly_the_cross_pixels() {
        let cfg = SynthConfig { n_train: 10, n_valid: 5, n_test: 5, seed: 9, ..Default::default() };
        let data = generate_synthetic_dataset(&cfg).unwrap();
        for s in &data {
            let size = cfg.image_size;
            let corner = confounder_corner(s.label, s.split.unwrap());
            let (rows, cols) = corner_window(size, cfg.confounder_size, corner);
            let mut expected_fg: Vec<usize> = (0..size * size).filter(|&p| s.mask.bits()[p]).collect();
            for y in rows {
                for x in cols.clone() {
                    expected_fg.push(y * size + x);
                }
            }
            expected_fg.sort_unstable();
            let mut actual = fg_pixels(&s.image, cfg.foreground_intensity);
            actual.sort_unstable();
            assert_eq!(actual, expected_fg);
            for c in [Corner::BottomLeft, Corner::BottomRight] {
                let (rows, cols) = corner_window(size, cfg.confounder_size, c);
                for y in rows {
                    for x in cols.clone() {
                        assert!(!s.mask.get(y, x), "mask touches corner window");
                    }
                }
            }
            let expected_crosses = if s.label == 0 { 2 } else { 1 };
            assert!(s.mask.count_ones() >= expected_crosses * (4 * cfg.cross_size_range.0 + 1));
        }
    }

    #[test]
    fn class_balance_within_one() {
        let cfg = SynthConfig { n_train: 21, n_valid: 7, n_test: 8, seed: 5, ..Default::default() };
        let data = generate_synthetic_dataset(&cfg).unwrap();
        for split in Split::ALL {
            let group: Vec<_> = data.iter().filter(|s| s.split == Some(split)).collect();
            let n0 = group.iter().filter(|s| s.label == 0).count() as isize;
            let n1 = group.len() as isize - n0;
            assert!((n0 - n1).abs() <= 1, "split {split}: {n0} vs {n1}");
        }
    }

    #[test]
    fn impossible_geometry_is_rejected() {
        // Valid geometry, but the two corner windows block every 3x3 cross
        // position, so placement must exhaust its attempts.
        let cfg = SynthConfig {
            image_size: 10,
            confounder_size: 6,
            cross_size_range: (1, 1),
            n_train: 1,
            n_valid: 1,
            n_test: 1,
            ..Default::default()
        };
        match generate_synthetic_dataset(&cfg) {
            Err(Error::Infeasible(msg)) => assert!(msg.contains("attempts")),
            other => panic!("expected Infeasible, got {other:?}"),
        }
        let bad = SynthConfig { n_train: 0, ..Default::default() };
        assert!(matches!(generate_synthetic_dataset(&bad), Err(Error::Config(_))));
        let bad = SynthConfig { cross_size_range: (3, 40), ..Default::default() };
        assert!(matches!(generate_synthetic_dataset(&bad), Err(Error::Config(_))));
    }

    #[test]
    fn pool_has_four_balanced_cells() {
        let cfg = SynthConfig { seed: 11, ..Default::default() };
        let pool = generate_attributed_pool(&cfg, 5).unwrap();
        assert_eq!(pool.len(), 20);
        for label in [0u8, 1] {
            for corner in ["bl", "br"] {
                let n = pool
                    .iter()
                    .filter(|s| {
                        s.label == label
                            && s.attributes.get("confounder_corner").map(String::as_str) == Some(corner)
                    })
                    .count();
                assert_eq!(n, 5);
            }
        }
        assert!(pool.iter().all(|s| s.split.is_none()));
    }

    #[test]
    fn save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = SynthConfig { n_train: 4, n_valid: 2, n_test: 2, seed: 17, ..Default::default() };
        let data = generate_synthetic_dataset(&cfg).unwrap();
        save_dataset(&data, dir.path()).unwrap();
        let mut loaded = load_dataset(dir.path()).unwrap();
        loaded.sort_by(|a, b| a.id.cmp(&b.id));
        let mut orig = data.clone();
        orig.sort_by(|a, b| a.id.cmp(&b.id));
        assert_eq!(loaded.len(), orig.len());
        for (l, o) in loaded.iter().zip(&orig) {
            assert_eq!(l.id, o.id);
            assert_eq!(l.label, o.label);
            assert_eq!(l.split, o.split);
            assert_eq!(l.mask, o.mask);
            // Binary intensities survive 8-bit quantization exactly.
            assert_eq!(l.image, o.image);
            assert_eq!(
                l.attributes.get("confounder_corner"),
                o.attributes.get("confounder_corner")
            );
        }
    }
}
