//! Attribution maps and localization scoring.
//!
//! Three map families: the absolute input gradient of the positive-class
//! logit, integrated gradients along the straight-line path from a zero
//! baseline (Gauss–Legendre quadrature, 200 nodes), and occlusion over a
//! 15x15 tile grid. Post-processing is Gaussian smoothing, top-p
//! binarization against the mask pixel count, and intersection-over-union.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::{gaussian_blur, BitGrid, Boundary};
use crate::model::LogitModel;
use crate::tape::Tape;
use crate::tensor::{Scalar, Tensor};

pub const IG_STEPS: usize = 200;
pub const OCCLUSION_GRID: usize = 15;
pub const SMOOTH_SIGMA: f64 = 1.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttributionMethod {
    InputGrad,
    Integrated,
    Occlusion,
}

impl AttributionMethod {
    pub const ALL: [AttributionMethod; 3] =
        [AttributionMethod::InputGrad, AttributionMethod::Integrated, AttributionMethod::Occlusion];

    pub fn tag(self) -> &'static str {
        match self {
            AttributionMethod::InputGrad => "input_grad",
            AttributionMethod::Integrated => "integrated",
            AttributionMethod::Occlusion => "occlusion",
        }
    }
}

impl std::str::FromStr for AttributionMethod {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "input_grad" => Ok(AttributionMethod::InputGrad),
            "integrated" => Ok(AttributionMethod::Integrated),
            "occlusion" => Ok(AttributionMethod::Occlusion),
            other => Err(Error::Config(format!("unknown attribution method `{other}`"))),
        }
    }
}

/// Non-negative per-pixel attribution scores with provenance.
#[derive(Clone, Debug, PartialEq)]
pub struct AttributionMap {
    pub values: Vec<f64>,
    pub height: usize,
    pub width: usize,
    pub method: AttributionMethod,
    pub model_id: String,
    pub sample_id: String,
}

impl AttributionMap {
    pub fn smoothed(&self, sigma: f64) -> AttributionMap {
        AttributionMap {
            values: smooth_map(&self.values, self.height, self.width, sigma),
            ..self.clone()
        }
    }
}

fn as_batch<T: Scalar>(image: &Tensor<T>) -> Result<Tensor<T>> {
    let s = image.shape();
    if s.len() != 2 {
        return Err(Error::Shape(format!("expected [H,W] image, got {s:?}")));
    }
    Ok(image.clone().reshaped(&[1, 1, s[0], s[1]])?)
}

/// Gradients of the summed positive-class logit with respect to each image
/// in the batch (the sum decouples across rows).
fn positive_logit_input_grads<T: Scalar, M: LogitModel<T> + ?Sized>(
    model: &M,
    batch: &Tensor<T>,
) -> Result<Tensor<T>> {
    let n = batch.shape()[0];
    let mut tape = Tape::new();
    let x = tape.leaf(batch.clone());
    let logits = model.logits(&mut tape, x)?;
    let picked = tape.row_gather(logits, std::sync::Arc::new(vec![1usize; n]));
    let s = tape.sum_all(picked);
    let g = tape.grad(s, &[x])[0];
    Ok(tape.value(g).clone())
}

/// |∂ŷ₁/∂x|: elementwise absolute input gradient of the positive-class
/// logit.
pub fn input_gradient<T: Scalar, M: LogitModel<T> + ?Sized>(
    model: &M,
    image: &Tensor<T>,
    model_id: &str,
    sample_id: &str,
) -> Result<AttributionMap> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let batch = as_batch(image)?;
    let g = positive_logit_input_grads(model, &batch)?;
    Ok(AttributionMap {
        values: g.data().iter().map(|v| v.to_f64().abs()).collect(),
        height: h,
        width: w,
        method: AttributionMethod::InputGrad,
        model_id: model_id.to_string(),
        sample_id: sample_id.to_string(),
    })
}

/// Gauss–Legendre nodes and weights on [-1, 1], by Newton iteration on the
/// Legendre recurrence.
pub fn gauss_legendre(n: usize) -> (Vec<f64>, Vec<f64>) {
    assert!(n >= 1);
    let mut nodes = vec![0.0; n];
    let mut weights = vec![0.0; n];
    for i in 0..n.div_ceil(2) {
        // Tricomi initial guess.
        let mut x = (std::f64::consts::PI * (i as f64 + 0.75) / (n as f64 + 0.5)).cos();
        let mut dp = 0.0;
        for _ in 0..100 {
            // Evaluate P_n(x) and P_n'(x) via the three-term recurrence.
            let (mut p0, mut p1) = (1.0, x);
            for k in 2..=n {
                let kf = k as f64;
                let p2 = ((2.0 * kf - 1.0) * x * p1 - (kf - 1.0) * p0) / kf;
                p0 = p1;
                p1 = p2;
            }
            let p = if n == 1 { x } else { p1 };
            let pm1 = if n == 1 { 1.0 } else { p0 };
            dp = n as f64 * (x * p - pm1) / (x * x - 1.0);
            let dx = p / dp;
            x -= dx;
            if dx.abs() < 1e-15 {
                break;
            }
        }
        let wgt = 2.0 / ((1.0 - x * x) * dp * dp);
        nodes[i] = -x;
        nodes[n - 1 - i] = x;
        weights[i] = wgt;
        weights[n - 1 - i] = wgt;
    }
    if n % 2 == 1 {
        nodes[n / 2] = 0.0;
    }
    (nodes, weights)
}

/// Signed integrated gradients: (x - x') ⊙ ∫₀¹ ∂f(x' + α(x-x'))/∂x dα with f
/// the positive-class logit, quadrature over `steps` Gauss–Legendre nodes
/// mapped to [0,1].
pub fn integrated_gradients_signed<T: Scalar, M: LogitModel<T> + ?Sized>(
    model: &M,
    image: &Tensor<T>,
    baseline: Option<&Tensor<T>>,
    steps: usize,
) -> Result<Vec<f64>> {
    if steps < 1 {
        return Err(Error::Config("integrated gradients needs steps >= 1".into()));
    }
    let (h, w) = (image.shape()[0], image.shape()[1]);
    let zero;
    let base = match baseline {
        Some(b) => {
            if b.shape() != image.shape() {
                return Err(Error::Shape("baseline shape differs from image".into()));
            }
            b
        }
        None => {
            zero = Tensor::zeros(image.shape());
            &zero
        }
    };
    let (nodes, wts) = gauss_legendre(steps);
    let npix = h * w;
    let mut integral = vec![0.0f64; npix];
    // Batch path points to keep the conv kernels busy.
    const CHUNK: usize = 25;
    let mut i = 0;
    while i < steps {
        let m = CHUNK.min(steps - i);
        let mut batch = Tensor::zeros(&[m, 1, h, w]);
        for j in 0..m {
            let alpha = 0.5 * (nodes[i + j] + 1.0); // [-1,1] -> [0,1]
            for p in 0..npix {
                let bv = base.data()[p].to_f64();
                let xv = image.data()[p].to_f64();
                batch.data_mut()[j * npix + p] = T::from_f64(bv + alpha * (xv - bv));
            }
        }
        let grads = positive_logit_input_grads(model, &batch)?;
        for j in 0..m {
            // d(alpha)/2 from the interval map.
            let wj = 0.5 * wts[i + j];
            for p in 0..npix {
                integral[p] += wj * grads.data()[j * npix + p].to_f64();
            }
        }
        i += m;
    }
    Ok((0..npix)
        .map(|p| (image.data()[p].to_f64() - base.data()[p].to_f64()) * integral[p])
        .collect())
}

pub fn integrated_gradients<T: Scalar, M: LogitModel<T> + ?Sized>(
    model: &M,
    image: &Tensor<T>,
    baseline: Option<&Tensor<T>>,
    steps: usize,
    model_id: &str,
    sample_id: &str,
) -> Result<AttributionMap> {
    let signed = integrated_gradients_signed(model, image, baseline, steps)?;
    Ok(AttributionMap {
        values: signed.iter().map(|v| v.abs()).collect(),
        height: image.shape()[0],
        width: image.shape()[1],
        method: AttributionMethod::Integrated,
        model_id: model_id.to_string(),
        sample_id: sample_id.to_string(),
    })
}

/// Completeness diagnostic: (|Σ signed IG - (f(x) - f(baseline))|, |f(x) -
/// f(baseline)|) for the positive-class logit.
pub fn completeness_residual<T: Scalar, M: LogitModel<T> + ?Sized>(
    model: &M,
    image: &Tensor<T>,
    steps: usize,
) -> Result<(f64, f64)> {
    let signed = integrated_gradients_signed(model, image, None, steps)?;
    let sum: f64 = signed.iter().sum();
    let f_at = |img: &Tensor<T>| -> Result<f64> {
        let mut tape = Tape::new();
        let x = tape.leaf(as_batch(img)?);
        let logits = model.logits(&mut tape, x)?;
        Ok(tape.value(logits).data()[1].to_f64())
    };
    let fx = f_at(image)?;
    let f0 = f_at(&Tensor::zeros(image.shape()))?;
    let delta = fx - f0;
    Ok(((sum - delta).abs(), delta.abs()))
}

/// Tile boundaries that split `len` into `parts` contiguous runs as evenly
/// as possible (every pixel in exactly one run).
pub fn tile_bounds(len: usize, parts: usize) -> Vec<(usize, usize)> {
    (0..parts).map(|i| (i * len / parts, (i + 1) * len / parts)).collect()
}

/// Occlusion attribution: for each cell of a `grid`x`grid` partition, set
/// the cell to `fill`, rerun the model, and record Σ_k |Δ logit_k|; the
/// cell's score is broadcast to its pixels.
pub fn occlusion_map<T: Scalar, M: LogitModel<T> + ?Sized>(
    model: &M,
    image: &Tensor<T>,
    grid: usize,
    fill: T,
    model_id: &str,
    sample_id: &str,
) -> Result<AttributionMap> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if h < grid || w < grid {
        return Err(Error::Shape(format!(
            "image {h}x{w} smaller than the {grid}x{grid} occlusion grid"
        )));
    }
    let k = model.num_classes();
    let base_logits = {
        let mut tape = Tape::new();
        let x = tape.leaf(as_batch(image)?);
        let logits = model.logits(&mut tape, x)?;
        tape.value(logits).data().to_vec()
    };

    let rows = tile_bounds(h, grid);
    let cols = tile_bounds(w, grid);
    let mut values = vec![0.0f64; h * w];
    let tiles: Vec<(usize, usize)> =
        (0..grid).flat_map(|r| (0..grid).map(move |c| (r, c))).collect();
    const CHUNK: usize = 25;
    for chunk in tiles.chunks(CHUNK) {
        let m = chunk.len();
        let mut batch = Tensor::zeros(&[m, 1, h, w]);
        for (j, &(r, c)) in chunk.iter().enumerate() {
            let dst = &mut batch.data_mut()[j * h * w..(j + 1) * h * w];
            dst.copy_from_slice(image.data());
            for y in rows[r].0..rows[r].1 {
                for x in cols[c].0..cols[c].1 {
                    dst[y * w + x] = fill;
                }
            }
        }
        let occluded = {
            let mut tape = Tape::new();
            let x = tape.leaf(batch);
            let logits = model.logits(&mut tape, x)?;
            tape.value(logits).data().to_vec()
        };
        for (j, &(r, c)) in chunk.iter().enumerate() {
            let change: f64 = (0..k)
                .map(|ki| (occluded[j * k + ki].to_f64() - base_logits[ki].to_f64()).abs())
                .sum();
            for y in rows[r].0..rows[r].1 {
                for x in cols[c].0..cols[c].1 {
                    values[y * w + x] = change;
                }
            }
        }
    }
    Ok(AttributionMap {
        values,
        height: h,
        width: w,
        method: AttributionMethod::Occlusion,
        model_id: model_id.to_string(),
        sample_id: sample_id.to_string(),
    })
}

/// Gaussian smoothing with reflective boundaries (kernel truncated at 3σ,
/// normalized to sum 1). σ = 0 is the identity.
pub fn smooth_map(values: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    gaussian_blur(values, h, w, sigma, Boundary::Reflect)
}

/// Marks exactly the `p` largest-valued pixels; ties at the cutoff go to the
/// lowest row-major index.
pub fn binarize_top_p(values: &[f64], h: usize, w: usize, p: usize) -> Result<BitGrid> {
    if values.len() != h * w {
        return Err(Error::Shape("value buffer does not match grid".into()));
    }
    if p > values.len() {
        return Err(Error::Config(format!("p = {p} exceeds {} pixels", values.len())));
    }
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| {
        values[b].partial_cmp(&values[a]).unwrap_or(std::cmp::Ordering::Equal).then(a.cmp(&b))
    });
    let mut out = BitGrid::new(h, w);
    for &idx in order.iter().take(p) {
        out.set(idx / w, idx % w, true);
    }
    Ok(out)
}

/// |a ∧ b| / |a ∨ b|, with 0 for two empty masks.
pub fn iou(a: &BitGrid, b: &BitGrid) -> Result<f64> {
    if !a.same_shape(b) {
        return Err(Error::Shape(format!(
            "mask shapes differ: {}x{} vs {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    let mut inter = 0usize;
    let mut union = 0usize;
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as usize;
        union += (x || y) as usize;
    }
    if union == 0 {
        Ok(0.0)
    } else {
        Ok(inter as f64 / union as f64)
    }
}

// ---- persistence ------------------------------------------------------------

#[derive(Serialize, Deserialize)]
struct MapSidecar {
    method: String,
    model_id: String,
    sample_id: String,
    height: usize,
    width: usize,
}

/// Writes `<stem>.f32` (little-endian row-major f32 grid) and
/// `<stem>.json` (provenance sidecar).
pub fn save_map(stem: &Path, map: &AttributionMap) -> Result<()> {
    let mut buf = Vec::with_capacity(map.values.len() * 4);
    for &v in &map.values {
        buf.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(stem.with_extension("f32"), buf)?;
    let sidecar = MapSidecar {
        method: map.method.tag().to_string(),
        model_id: map.model_id.clone(),
        sample_id: map.sample_id.clone(),
        height: map.height,
        width: map.width,
    };
    fs::write(stem.with_extension("json"), serde_json::to_vec_pretty(&sidecar)?)?;
    Ok(())
}

pub fn load_map(stem: &Path) -> Result<AttributionMap> {
    let sidecar: MapSidecar =
        serde_json::from_slice(&fs::read(stem.with_extension("json"))?)?;
    let mut bytes = Vec::new();
    fs::File::open(stem.with_extension("f32"))?.read_to_end(&mut bytes)?;
    if bytes.len() != sidecar.height * sidecar.width * 4 {
        return Err(Error::Data("attribution grid size mismatch".into()));
    }
    let values = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect();
    Ok(AttributionMap {
        values,
        height: sidecar.height,
        width: sidecar.width,
        method: sidecar.method.parse()?,
        model_id: sidecar.model_id,
        sample_id: sidecar.sample_id,
    })
}

/// Renders the image in grayscale with the (normalized) map overlaid in red.
pub fn save_overlay_png(path: &Path, image: &Tensor<f32>, map: &AttributionMap) -> Result<()> {
    let (h, w) = (image.shape()[0], image.shape()[1]);
    if (h, w) != (map.height, map.width) {
        return Err(Error::Shape("overlay image and map sizes differ".into()));
    }
    let peak = map.values.iter().cloned().fold(0.0f64, f64::max).max(1e-12);
    let mut rgb = image::RgbImage::new(w as u32, h as u32);
    for y in 0..h {
        for x in 0..w {
            let g = (image.data()[y * w + x].clamp(0.0, 1.0) * 255.0) as u8;
            let a = (map.values[y * w + x] / peak).clamp(0.0, 1.0);
            let r = (g as f64 * (1.0 - a) + 255.0 * a) as u8;
            let gb = (g as f64 * (1.0 - a)) as u8;
            rgb.put_pixel(x as u32, y as u32, image::Rgb([r, gb, gb]));
        }
    }
    rgb.save(path)?;
    Ok(())
}

// -------------------------------------------------------------------------------


#[cfg(test)]
mod tests {
    use super::*;
    use test_models::TwoLogitLinear;

    fn image(h: usize, w: usize, seed: u64) -> Tensor<f64> {
        let mut state = seed.wrapping_mul(0x9E3779B97F4A7C15) | 1;
        let data = (0..h * w)
            .map(|_| {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                (state >> 11) as f64 / (1u64 << 53) as f64
            })
            .collect();
        Tensor::from_vec(&[h, w], data).unwrap()
    }

    #[test]
    fn gauss_legendre_known_five_point_rule() {
        let (nodes, weights) = gauss_legendre(5);
        let known_nodes = [
            -0.906179845938664,
            -0.5384693101056831,
            0.0,
            0.5384693101056831,
            0.906179845938664,
        ];
        let known_weights = [
            0.23692688505618908,
            0.47862867049936647,
            0.5688888888888889,
            0.47862867049936647,
            0.23692688505618908,
        ];
        for i in 0..5 {
            assert!((nodes[i] - known_nodes[i]).abs() < 1e-12);
            assert!((weights[i] - known_weights[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn gauss_legendre_integrates_polynomials_exactly() {
        // Degree-2n-1 exactness: n = 6 handles x^11.
        let (nodes, weights) = gauss_legendre(6);
        for degree in 0..=11u32 {
            let got: f64 =
                nodes.iter().zip(&weights).map(|(&x, &w)| w * x.powi(degree as i32)).sum();
            let exact =
                if degree % 2 == 1 { 0.0 } else { 2.0 / (degree as f64 + 1.0) };
            assert!((got - exact).abs() < 1e-13, "degree {degree}: {got} vs {exact}");
        }
        let (_, w200) = gauss_legendre(200);
        assert!((w200.iter().sum::<f64>() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn input_gradient_of_linear_model_is_abs_weights() {
        let w1: Vec<f64> = (0..12).map(|i| 0.3 * (i as f64 - 6.0)).collect();
        let model =
            TwoLogitLinear { w0: vec![0.0; 12], w1: w1.clone(), b: [0.1, -0.2] };
        let img = image(3, 4, 5);
        let map = input_gradient(&model, &img, "m", "s").unwrap();
        for (got, want) in map.values.iter().zip(&w1) {
            assert!((got - want.abs()).abs() < 1e-12);
        }
        // Bias shifts leave the map unchanged.
        let model_b = TwoLogitLinear { w0: vec![0.0; 12], w1: w1.clone(), b: [0.1, 73.0] };
        let map_b = input_gradient(&model_b, &img, "m", "s").unwrap();
        assert_eq!(map.values, map_b.values);
    }

    #[test]
    fn constant_model_maps_are_zero() {
        let model = TwoLogitLinear { w0: vec![0.0; 9], w1: vec![0.0; 9], b: [0.4, 0.6] };
        let img = image(3, 3, 2);
        let ig = input_gradient(&model, &img, "m", "s").unwrap();
        assert!(ig.values.iter().all(|&v| v == 0.0));
        let oc = occlusion_map(&model, &img, 3, 0.0, "m", "s").unwrap();
        assert!(oc.values.iter().all(|&v| v == 0.0));
    }

    /// Linear f(x) = 2x₁ + 3x₂: signed IG = (2,3) at x = (1,1) and the sum
    /// telescopes to f(x) − f(0).
    #[test]
    fn integrated_gradients_linear_model_analytic() {
        let model = TwoLogitLinear { w0: vec![0.0, 0.0], w1: vec![2.0, 3.0], b: [0.0, 0.5] };
        let img = Tensor::from_vec(&[1, 2], vec![1.0, 1.0]).unwrap();
        let signed = integrated_gradients_signed(&model, &img, None, 50).unwrap();
        assert!((signed[0] - 2.0).abs() < 1e-10);
        assert!((signed[1] - 3.0).abs() < 1e-10);
        let sum: f64 = signed.iter().sum();
        assert!((sum - 5.0).abs() < 1e-10, "completeness on the linear model");

        // x == baseline -> all zeros.
        let zero = Tensor::zeros(&[1, 2]);
        let at_base = integrated_gradients_signed(&model, &zero, None, 10).unwrap();
        assert!(at_base.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn integrated_and_input_gradient_agree_on_linear_models() {
        let w1: Vec<f64> = (0..16).map(|i| (i as f64 - 8.0) * 0.21).collect();
        let model = TwoLogitLinear { w0: vec![0.0; 16], w1: w1.clone(), b: [0.0, 0.0] };
        let img = image(4, 4, 9);
        let ig = integrated_gradients(&model, &img, None, 20, "m", "s").unwrap();
        for (p, (&v, &wv)) in ig.values.iter().zip(&w1).enumerate() {
            let expect = (img.data()[p] * wv).abs();
            assert!((v - expect).abs() < 1e-10, "IG is |x ⊙ w| on a linear model");
        }
    }

    #[test]
    fn occlusion_linear_model_tile_arithmetic() {
        // Single pixel tiles: occluding pixel i changes logit k by w_k[i]*x[i].
        let model = TwoLogitLinear { w0: vec![1.0, 2.0], w1: vec![0.5, -1.0], b: [0.0, 0.0] };
        let img = Tensor::from_vec(&[1, 2], vec![3.0, 4.0]).unwrap();
        let map = occlusion_map(&model, &img, 1, 0.0, "m", "s").unwrap();
        // One tile covering everything: change = |1*3+2*4| + |0.5*3-1*4| = 11 + 2.5.
        assert!((map.values[0] - 13.5).abs() < 1e-12);

        let model2 = TwoLogitLinear {
            w0: vec![1.0, 2.0, 0.0, -4.0],
            w1: vec![0.0; 4],
            b: [0.0, 0.0],
        };
        let img2 = Tensor::from_vec(&[2, 2], vec![3.0, 4.0, 5.0, 0.5]).unwrap();
        let map2 = occlusion_map(&model2, &img2, 2, 0.0, "m", "s").unwrap();
        // Single-pixel tiles; w0 only: changes are |w0[i] x[i]|.
        assert_eq!(map2.values, vec![3.0, 8.0, 0.0, 2.0]);
    }

    #[test]
    fn occlusion_tiles_partition_the_image() {
        for &(len, parts) in &[(64usize, 15usize), (15, 15), (17, 15), (100, 15)] {
            let bounds = tile_bounds(len, parts);
            assert_eq!(bounds[0].0, 0);
            assert_eq!(bounds[parts - 1].1, len);
            for w in bounds.windows(2) {
                assert_eq!(w[0].1, w[1].0, "adjacent tiles must abut");
                assert!(w[0].1 > w[0].0, "tiles must be non-empty");
            }
            // 64 into 15 parts: eleven 4s and four 5s.
            if len == 64 {
                let sizes: Vec<usize> = bounds.iter().map(|(a, b)| b - a).collect();
                assert_eq!(sizes.iter().filter(|&&s| s == 4).count(), 11);
                assert_eq!(sizes.iter().filter(|&&s| s == 5).count(), 4);
            }
        }
        let model = TwoLogitLinear { w0: vec![0.0; 4], w1: vec![0.0; 4], b: [0.0, 0.0] };
        let img = image(2, 2, 3);
        assert!(occlusion_map(&model, &img, 15, 0.0, "m", "s").is_err());
    }

    #[test]
    fn smoothing_identity_and_mass_preservation() {
        let img = image(9, 9, 4);
        assert_eq!(smooth_map(img.data(), 9, 9, 0.0), img.data());
        let c = vec![0.7; 81];
        for v in smooth_map(&c, 9, 9, 1.0) {
            assert!((v - 0.7).abs() < 1e-12);
        }
        // Interior-supported map keeps its total mass.
        let mut vals = vec![0.0; 15 * 15];
        vals[7 * 15 + 7] = 2.0;
        vals[7 * 15 + 8] = 1.0;
        let sm = smooth_map(&vals, 15, 15, 1.0);
        let mass: f64 = sm.iter().sum();
        assert!((mass - 3.0).abs() < 1e-6);
    }

    #[test]
    fn binarize_top_p_examples() {
        let vals = vec![0.1, 0.9, 0.5, 0.7];
        let b = binarize_top_p(&vals, 1, 4, 2).unwrap();
        assert_eq!(b.bits(), &[false, true, false, true]);

        assert_eq!(binarize_top_p(&vals, 1, 4, 0).unwrap().count_ones(), 0);
        assert_eq!(binarize_top_p(&vals, 1, 4, 4).unwrap().count_ones(), 4);

        // All-equal values: ties resolve to the lowest row-major indices.
        let flat = vec![0.5; 6];
        let b = binarize_top_p(&flat, 2, 3, 3).unwrap();
        assert_eq!(b.bits(), &[true, true, true, false, false, false]);
        assert!(binarize_top_p(&flat, 2, 3, 7).is_err());
    }

    #[test]
    fn iou_hand_cases() {
        let mut a = BitGrid::new(2, 2);
        a.set(0, 0, true);
        a.set(0, 1, true);
        let mut b = BitGrid::new(2, 2);
        b.set(0, 1, true);
        b.set(1, 1, true);
        assert!((iou(&a, &b).unwrap() - 1.0 / 3.0).abs() < 1e-12);
        assert_eq!(iou(&a, &a).unwrap(), 1.0);
        let empty = BitGrid::new(2, 2);
        assert_eq!(iou(&empty, &empty).unwrap(), 0.0);
        let mut disj = BitGrid::new(2, 2);
        disj.set(1, 0, true);
        assert_eq!(iou(&a, &disj).unwrap(), 0.0);
        assert_eq!(iou(&a, &b).unwrap(), iou(&b, &a).unwrap());
        let other = BitGrid::new(3, 2);
        assert!(iou(&a, &other).is_err());
    }

    #[test]
    fn map_save_load_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let map = AttributionMap {
            values: (0..12).map(|i| i as f64 * 0.25).collect(),
            height: 3,
            width: 4,
            method: AttributionMethod::Integrated,
            model_id: "model-7".into(),
            sample_id: "test_00003".into(),
        };
        let stem = dir.path().join("map");
        save_map(&stem, &map).unwrap();
        let loaded = load_map(&stem).unwrap();
        assert_eq!(loaded.method, map.method);
        assert_eq!(loaded.model_id, map.model_id);
        assert_eq!(loaded.sample_id, map.sample_id);
        assert_eq!((loaded.height, loaded.width), (3, 4));
        for (a, b) in loaded.values.iter().zip(&map.values) {
            assert!((a - b).abs() < 1e-6, "f32 round trip");
        }
    }
}
