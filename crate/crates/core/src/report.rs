//! Run aggregation: localization scoring against masks, per-method summary
//! tables, mean thresholded saliency figures, and the relationship between
//! generalization (AUC) and attribution quality (IoU).

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attribution::{
    binarize_top_p, input_gradient, integrated_gradients, iou, occlusion_map, smooth_map,
    AttributionMap, AttributionMethod, IG_STEPS, OCCLUSION_GRID, SMOOTH_SIGMA,
};
use crate::datagen::ImageSample;
use crate::error::{Error, Result};
use crate::losses::Method;
use crate::model::LogitModel;
use crate::tensor::{Scalar, Tensor};

/// Number of test images scored per seed by default.
pub const LOCALIZATION_SAMPLES: usize = 100;
/// Default sample budget for the mean saliency figures.
pub const FIGURE_SAMPLES: usize = 500;

/// One (dataset, method, seed) result row.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricRecord {
    pub dataset: String,
    pub method: Method,
    pub seed: u64,
    pub valid_auc: f64,
    pub test_auc: f64,
    pub iou_input_grad: f64,
    pub iou_integrated: f64,
    pub iou_occlusion: f64,
}

impl MetricRecord {
    pub fn iou(&self, method: AttributionMethod) -> f64 {
        match method {
            AttributionMethod::InputGrad => self.iou_input_grad,
            AttributionMethod::Integrated => self.iou_integrated,
            AttributionMethod::Occlusion => self.iou_occlusion,
        }
    }
}

/// Computes one attribution map with the shared defaults.
pub fn compute_map<T: Scalar, M: LogitModel<T> + ?Sized>(
    model: &M,
    image: &Tensor<T>,
    method: AttributionMethod,
    model_id: &str,
    sample_id: &str,
) -> Result<AttributionMap> {
    match method {
        AttributionMethod::InputGrad => input_gradient(model, image, model_id, sample_id),
        AttributionMethod::Integrated => {
            integrated_gradients(model, image, None, IG_STEPS, model_id, sample_id)
        }
        AttributionMethod::Occlusion => {
            occlusion_map(model, image, OCCLUSION_GRID, T::ZERO, model_id, sample_id)
        }
    }
}

/// Deterministic evaluation subset: the same seeded choice of up to `count`
/// sample indices is reused across methods so comparisons stay paired.
pub fn select_scoring_subset(n: usize, count: usize, seed: u64) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    idx.shuffle(&mut rng);
    idx.truncate(count.min(n));
    idx.sort_unstable();
    idx
}

/// Localization pipeline for one image: attribution, smoothing, top-p
/// binarization at the mask's own pixel count, IoU against the mask.
pub fn localization_iou(map: &AttributionMap, mask: &crate::grid::BitGrid) -> Result<f64> {
    let p = mask.count_ones();
    let smoothed = smooth_map(&map.values, map.height, map.width, SMOOTH_SIGMA);
    let binary = binarize_top_p(&smoothed, map.height, map.width, p)?;
    iou(&binary, mask)
}

/// Mean localization IoU of `model` over a seeded subset of the samples.
/// Images with empty masks are skipped with a warning.
pub fn score_localization<T: Scalar, M: LogitModel<T> + ?Sized>(
    model: &M,
    samples: &[&ImageSample],
    method: AttributionMethod,
    count: usize,
    subset_seed: u64,
    model_id: &str,
) -> Result<f64> {
    if samples.is_empty() {
        return Err(Error::Config("localization scoring needs samples".into()));
    }
    let subset = select_scoring_subset(samples.len(), count, subset_seed);
    let mut total = 0.0;
    let mut n = 0usize;
    for &i in &subset {
        let s = samples[i];
        if s.mask.count_ones() == 0 {
            eprintln!("warning: skipping {} (empty mask)", s.id);
            continue;
        }
        let image: Tensor<T> = s.image.cast();
        let map = compute_map(model, &image, method, model_id, &s.id)?;
        total += localization_iou(&map, &s.mask)?;
        n += 1;
    }
    if n == 0 {
        return Err(Error::Data("every sampled image had an empty mask".into()));
    }
    Ok(total / n as f64)
}

// ---- correlation -----------------------------------------------------------------

/// Pearson correlation; `None` when either column has zero variance (the
/// statistic is undefined there, which is not the same as 0).
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let mut cov = 0.0;
    let mut vx = 0.0;
    let mut vy = 0.0;
    for (&x, &y) in xs.iter().zip(ys) {
        cov += (x - mx) * (y - my);
        vx += (x - mx) * (x - mx);
        vy += (y - my) * (y - my);
    }
    if vx == 0.0 || vy == 0.0 {
        return None;
    }
    Some(cov / (vx.sqrt() * vy.sqrt()))
}

/// Tie-averaged ranks.
fn ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].partial_cmp(&xs[b]).unwrap_or(std::cmp::Ordering::Equal));
    let mut out = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let avg = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            out[k] = avg;
        }
        i = j + 1;
    }
    out
}

pub fn spearman(xs: &[f64], ys: &[f64]) -> Option<f64> {
    pearson(&ranks(xs), &ranks(ys))
}

#[derive(Clone, Debug, Serialize)]
pub struct CorrelationRow {
    pub dataset: String,
    pub attribution: AttributionMethod,
    pub n: usize,
    pub pearson_r: Option<f64>,
    pub spearman_rho: Option<f64>,
}

/// Test-AUC vs IoU relation per dataset and attribution method.
pub fn auc_vs_iou(records: &[MetricRecord]) -> Vec<CorrelationRow> {
    let mut by_dataset: BTreeMap<&str, Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        by_dataset.entry(&r.dataset).or_default().push(r);
    }
    let mut out = Vec::new();
    for (dataset, rows) in by_dataset {
        for attribution in AttributionMethod::ALL {
            let xs: Vec<f64> = rows.iter().map(|r| r.test_auc).collect();
            let ys: Vec<f64> = rows.iter().map(|r| r.iou(attribution)).collect();
            let (p, s) = if xs.len() >= 3 {
                (pearson(&xs, &ys), spearman(&xs, &ys))
            } else {
                (None, None)
            };
            out.push(CorrelationRow {
                dataset: dataset.to_string(),
                attribution,
                n: xs.len(),
                pearson_r: p,
                spearman_rho: s,
            });
        }
    }
    out
}

// ---- tables ------------------------------------------------------------------------

#[derive(Clone, Debug, Serialize)]
pub struct MethodSummary {
    pub dataset: String,
    pub method: Method,
    pub n_seeds: usize,
    pub valid_auc_mean: f64,
    pub valid_auc_std: f64,
    pub test_auc_mean: f64,
    pub test_auc_std: f64,
    pub iou_input_grad_mean: f64,
    pub iou_input_grad_std: f64,
    pub iou_integrated_mean: f64,
    pub iou_integrated_std: f64,
    pub iou_occlusion_mean: f64,
    pub iou_occlusion_std: f64,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    if values.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

/// Per-(dataset, method) mean ± std over seeds.
pub fn summarize(records: &[MetricRecord]) -> Vec<MethodSummary> {
    let mut groups: BTreeMap<(String, String), Vec<&MetricRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.dataset.clone(), r.method.to_string())).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((dataset, _), rows)| {
            let take = |f: fn(&MetricRecord) -> f64| -> (f64, f64) {
                mean_std(&rows.iter().map(|r| f(r)).collect::<Vec<_>>())
            };
            let (vm, vs) = take(|r| r.valid_auc);
            let (tm, ts) = take(|r| r.test_auc);
            let (gm, gs) = take(|r| r.iou_input_grad);
            let (im, is) = take(|r| r.iou_integrated);
            let (om, os) = take(|r| r.iou_occlusion);
            MethodSummary {
                dataset,
                method: rows[0].method,
                n_seeds: rows.len(),
                valid_auc_mean: vm,
                valid_auc_std: vs,
                test_auc_mean: tm,
                test_auc_std: ts,
                iou_input_grad_mean: gm,
                iou_input_grad_std: gs,
                iou_integrated_mean: im,
                iou_integrated_std: is,
                iou_occlusion_mean: om,
                iou_occlusion_std: os,
            }
        })
        .collect()
}

fn write_banner(path: &Path, banner: &[String], body: String) -> Result<()> {
    let mut text = String::new();
    for line in banner {
        text.push_str("# ");
        text.push_str(line);
        text.push('\n');
    }
    text.push_str(&body);
    std::fs::write(path, text)?;
    Ok(())
}

/// results.csv: banner comments, then one mean±std row per (dataset,
/// method).
pub fn write_results_csv(path: &Path, banner: &[String], records: &[MetricRecord]) -> Result<()> {
    let mut body = String::from(
        "dataset,method,n_seeds,valid_auc_mean,valid_auc_std,test_auc_mean,test_auc_std,\
         iou_input_grad_mean,iou_input_grad_std,iou_integrated_mean,iou_integrated_std,\
         iou_occlusion_mean,iou_occlusion_std\n",
    );
    for s in summarize(records) {
        body.push_str(&format!(
            "{},{},{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}\n",
            s.dataset,
            s.method,
            s.n_seeds,
            s.valid_auc_mean,
            s.valid_auc_std,
            s.test_auc_mean,
            s.test_auc_std,
            s.iou_input_grad_mean,
            s.iou_input_grad_std,
            s.iou_integrated_mean,
            s.iou_integrated_std,
            s.iou_occlusion_mean,
            s.iou_occlusion_std,
        ));
    }
    write_banner(path, banner, body)
}

/// Raw per-record rows, reparseable via `read_records_csv`.
pub fn write_records_csv(path: &Path, banner: &[String], records: &[MetricRecord]) -> Result<()> {
    let mut body = String::from(
        "dataset,method,seed,valid_auc,test_auc,iou_input_grad,iou_integrated,iou_occlusion\n",
    );
    for r in records {
        body.push_str(&format!(
            "{},{},{},{:.9},{:.9},{:.9},{:.9},{:.9}\n",
            r.dataset,
            r.method,
            r.seed,
            r.valid_auc,
            r.test_auc,
            r.iou_input_grad,
            r.iou_integrated,
            r.iou_occlusion
        ));
    }
    write_banner(path, banner, body)
}

pub fn read_records_csv(path: &Path) -> Result<Vec<MetricRecord>> {
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_path(path)?;
    let mut out = Vec::new();
    for rec in rdr.records() {
        let rec = rec?;
        let get = |i: usize| -> Result<&str> {
            rec.get(i).ok_or_else(|| Error::Data("short record row".into()))
        };
        out.push(MetricRecord {
            dataset: get(0)?.to_string(),
            method: get(1)?.parse()?,
            seed: get(2)?.parse().map_err(|_| Error::Data("bad seed".into()))?,
            valid_auc: get(3)?.parse().map_err(|_| Error::Data("bad valid_auc".into()))?,
            test_auc: get(4)?.parse().map_err(|_| Error::Data("bad test_auc".into()))?,
            iou_input_grad: get(5)?.parse().map_err(|_| Error::Data("bad iou".into()))?,
            iou_integrated: get(6)?.parse().map_err(|_| Error::Data("bad iou".into()))?,
            iou_occlusion: get(7)?.parse().map_err(|_| Error::Data("bad iou".into()))?,
        });
    }
    Ok(out)
}

pub fn write_auc_vs_iou_csv(path: &Path, banner: &[String], records: &[MetricRecord]) -> Result<()> {
    let mut body = String::from(
        "dataset,method,seed,test_auc,iou_input_grad,iou_integrated,iou_occlusion\n",
    );
    for r in records {
        body.push_str(&format!(
            "{},{},{},{:.9},{:.9},{:.9},{:.9}\n",
            r.dataset,
            r.method,
            r.seed,
            r.test_auc,
            r.iou_input_grad,
            r.iou_integrated,
            r.iou_occlusion
        ));
    }
    write_banner(path, banner, body)
}

pub fn write_correlations_csv(path: &Path, banner: &[String], rows: &[CorrelationRow]) -> Result<()> {
    let fmt = |v: Option<f64>| v.map(|r| format!("{r:.6}")).unwrap_or_else(|| "undefined".into());
    let mut body = String::from("dataset,attribution,n,pearson_r,spearman_rho\n");
    for r in rows {
        body.push_str(&format!(
            "{},{},{},{},{}\n",
            r.dataset,
            r.attribution.tag(),
            r.n,
            fmt(r.pearson_r),
            fmt(r.spearman_rho)
        ));
    }
    write_banner(path, banner, body)
}

// ---- figures ------------------------------------------------------------------------

/// Mean input, mean mask and the per-model mean of thresholded maps for one
/// attribution method over a seeded subset of the samples.
pub struct SaliencyPanel {
    pub label: String,
    /// Mean of 50th-percentile binarized maps, in [0,1].
    pub mean_map: Vec<f64>,
    pub height: usize,
    pub width: usize,
}

/// Computes a mean thresholded-saliency panel: per model and sample the map
/// is smoothed and binarized at the 50th percentile, then averaged.
pub fn mean_saliency_panel<T: Scalar, M: LogitModel<T> + ?Sized>(
    models: &[(&str, &M)],
    samples: &[&ImageSample],
    method: AttributionMethod,
    sample_count: usize,
    subset_seed: u64,
    label: &str,
) -> Result<SaliencyPanel> {
    if models.is_empty() || samples.is_empty() {
        return Err(Error::Config("figure needs at least one model and one sample".into()));
    }
    let (h, w) = (samples[0].height(), samples[0].width());
    let subset = select_scoring_subset(samples.len(), sample_count, subset_seed);
    let mut acc = vec![0.0f64; h * w];
    let mut n = 0usize;
    for (model_id, model) in models {
        for &i in &subset {
            let s = samples[i];
            let image: Tensor<T> = s.image.cast();
            let map = compute_map(*model, &image, method, model_id, &s.id)?;
            let smoothed = smooth_map(&map.values, h, w, SMOOTH_SIGMA);
            let binary = binarize_top_p(&smoothed, h, w, h * w / 2)?;
            for (a, &b) in acc.iter_mut().zip(binary.bits()) {
                *a += b as u8 as f64;
            }
            n += 1;
        }
    }
    for a in &mut acc {
        *a /= n as f64;
    }
    Ok(SaliencyPanel { label: label.to_string(), mean_map: acc, height: h, width: w })
}

/// Mean input image and mean mask over a seeded subset.
pub fn mean_input_and_mask(
    samples: &[&ImageSample],
    sample_count: usize,
    subset_seed: u64,
) -> Result<(Vec<f64>, Vec<f64>, usize, usize)> {
    if samples.is_empty() {
        return Err(Error::Config("no samples".into()));
    }
    let (h, w) = (samples[0].height(), samples[0].width());
    let subset = select_scoring_subset(samples.len(), sample_count, subset_seed);
    let mut img = vec![0.0f64; h * w];
    let mut mask = vec![0.0f64; h * w];
    for &i in &subset {
        for (a, &v) in img.iter_mut().zip(samples[i].image.data()) {
            *a += v as f64;
        }
        for (a, &b) in mask.iter_mut().zip(samples[i].mask.bits()) {
            *a += b as u8 as f64;
        }
    }
    let n = subset.len() as f64;
    img.iter_mut().for_each(|v| *v /= n);
    mask.iter_mut().for_each(|v| *v /= n);
    Ok((img, mask, h, w))
}

/// Renders a figure row: the mean input with the mean mask overlaid in red,
/// followed by one grayscale panel per entry.
pub fn save_saliency_figure(
    path: &Path,
    mean_input: &[f64],
    mean_mask: &[f64],
    panels: &[SaliencyPanel],
    h: usize,
    w: usize,
) -> Result<()> {
    let sep = 2usize;
    let cols = panels.len() + 1;
    let total_w = cols * w + (cols - 1) * sep;
    let mut img = image::RgbImage::from_pixel(total_w as u32, h as u32, image::Rgb([255, 255, 255]));
    // Panel 0: mean input with red mask overlay.
    for y in 0..h {
        for x in 0..w {
            let g = (mean_input[y * w + x].clamp(0.0, 1.0) * 255.0) as u8;
            let a = mean_mask[y * w + x].clamp(0.0, 1.0);
            let r = (g as f64 * (1.0 - a) + 255.0 * a) as u8;
            let gb = (g as f64 * (1.0 - a)) as u8;
            img.put_pixel(x as u32, y as u32, image::Rgb([r, gb, gb]));
        }
    }
    for (pi, panel) in panels.iter().enumerate() {
        if (panel.height, panel.width) != (h, w) {
            return Err(Error::Shape("panel size mismatch".into()));
        }
        let x0 = (pi + 1) * (w + sep);
        for y in 0..h {
            for x in 0..w {
                let v = (panel.mean_map[y * w + x].clamp(0.0, 1.0) * 255.0) as u8;
                img.put_pixel((x0 + x) as u32, y as u32, image::Rgb([v, v, v]));
            }
        }
    }
    img.save(path)?;
    Ok(())
}

/// Splits samples by argmax correctness of the model's prediction. Returns
/// (correct, incorrect) index lists.
pub fn split_by_correctness<T: Scalar, M: LogitModel<T> + ?Sized>(
    model: &M,
    samples: &[&ImageSample],
) -> Result<(Vec<usize>, Vec<usize>)> {
    let scores = crate::trainer::model_scores(model, samples, 16)?;
    let mut correct = Vec::new();
    let mut incorrect = Vec::new();
    for (i, (&score, s)) in scores.iter().zip(samples).enumerate() {
        let pred = if score > 0.0 { 1u8 } else { 0u8 };
        if pred == s.label {
            correct.push(i);
        } else {
            incorrect.push(i);
        }
    }
    Ok((correct, incorrect))
}
