//! Count estimates, error metrics and heatmap rendering.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;

use crate::data::Sample;
use crate::error::{dim_err, Error, Result};
use crate::math;
use crate::model::{Model, ModelParams};
use crate::tensor::Tensor;

/// Integral of a predicted map divided by `k^2`.
pub fn estimate_count(pred: &Tensor, coverage: usize) -> f64 {
    let k = coverage as f64;
    pred.sum() / (k * k)
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct ImageResult {
    pub id: String,
    /// True head count.
    pub z: f64,
    /// Estimated head count.
    pub zhat: f64,
}

impl ImageResult {
    pub fn abs_error(&self) -> f64 {
        (self.z - self.zhat).abs()
    }
}

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
pub struct Metrics {
    pub mae: f64,
    /// Root mean squared error.
    pub mse: f64,
    pub n: usize,
    pub per_image: Vec<ImageResult>,
}

/// MAE and root-mean-squared error over `(true, estimated)` pairs.
pub fn compute_metrics(pairs: &[(f64, f64)]) -> Result<Metrics> {
    let per_image = pairs
        .iter()
        .enumerate()
        .map(|(i, &(z, zhat))| ImageResult {
            id: format!("{i}"),
            z,
            zhat,
        })
        .collect();
    metrics_from(per_image)
}

pub fn metrics_from(per_image: Vec<ImageResult>) -> Result<Metrics> {
    if per_image.is_empty() {
        return Err(Error::Domain("metrics need at least one image".into()));
    }
    let n = per_image.len() as f64;
    let (mut abs, mut sq) = (0.0, 0.0);
    for r in &per_image {
        let e = r.abs_error();
        abs += e;
        sq += e * e;
    }
    Ok(Metrics {
        mae: abs / n,
        mse: math::sqrt(sq / n),
        n: per_image.len(),
        per_image,
    })
}

/// Predicts every sample and scores the estimates, dividing map integrals by
/// `coverage^2`.
pub fn evaluate(
    model: &Model,
    params: &ModelParams,
    samples: &[Sample],
    coverage: usize,
) -> Result<Metrics> {
    let mut results = Vec::with_capacity(samples.len());
    for s in samples {
        let (count, _) = model.predict(params, &s.image)?;
        results.push(ImageResult {
            id: s.annotation.image_id.clone(),
            z: s.annotation.count() as f64,
            zhat: estimate_count(&count, coverage),
        });
    }
    metrics_from(results)
}

/// Mean count of `train`, used as a constant prediction for every `test` image.
pub fn constant_baseline(train: &[Sample], test: &[Sample]) -> Result<Metrics> {
    if train.is_empty() {
        return Err(Error::Domain("baseline needs training images".into()));
    }
    let mean = train
        .iter()
        .map(|s| s.annotation.count() as f64)
        .sum::<f64>()
        / train.len() as f64;
    metrics_from(
        test.iter()
            .map(|s| ImageResult {
                id: s.annotation.image_id.clone(),
                z: s.annotation.count() as f64,
                zhat: mean,
            })
            .collect(),
    )
}

/// 8-bit grey image, row-major.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GrayImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

/// Width of the white column between the two halves of a heatmap.
pub const HEATMAP_GAP: usize = 2;

/// Prediction and ground truth side by side, scaled together so the larger
/// of the two maxima maps to 255.
pub fn render_heatmap(pred: &Tensor, gt: &Tensor) -> Result<GrayImage> {
    if pred.dims() != gt.dims() {
        return Err(dim_err!(
            "heatmap maps differ: {:?} vs {:?}",
            pred.dims(),
            gt.dims()
        ));
    }
    let d = pred.dims();
    let (h, w) = match d.len() {
        2 => (d[0], d[1]),
        3 if d[0] == 1 => (d[1], d[2]),
        _ => return Err(dim_err!("heatmap needs a single-channel map, got {d:?}")),
    };
    let peak = pred.max().max(gt.max()).max(1e-12);
    let scale = 255.0 / peak;
    let to_byte = |v: f64| math::floor((v * scale).clamp(0.0, 255.0) + 0.5) as u8;
    let width = 2 * w + HEATMAP_GAP;
    let mut pixels = Vec::with_capacity(width * h);
    for y in 0..h {
        pixels.extend(pred.data()[y * w..(y + 1) * w].iter().map(|&v| to_byte(v)));
        pixels.extend([255u8; HEATMAP_GAP]);
        pixels.extend(gt.data()[y * w..(y + 1) * w].iter().map(|&v| to_byte(v)));
    }
    Ok(GrayImage {
        width,
        height: h,
        pixels,
    })
}
