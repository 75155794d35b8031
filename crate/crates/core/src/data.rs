//! Point annotations, synthetic crowd scenes and crop/flip augmentation.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use crate::error::{Error, Result};
use crate::math;
use crate::rng::SplitMix64;
use crate::tensor::Tensor;

/// A head position in pixel coordinates: `x` is the column, `y` the row.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Self { x, y }
    }
}

/// Head annotations for one image. Every point satisfies `0 <= x < width`
/// and `0 <= y < height`.
#[derive(Debug, Clone, PartialEq)]
pub struct PointAnnotation {
    pub image_id: String,
    pub height: usize,
    pub width: usize,
    pub points: Vec<Point>,
}

impl PointAnnotation {
    pub fn new(
        image_id: impl Into<String>,
        height: usize,
        width: usize,
        points: Vec<Point>,
    ) -> Result<Self> {
        let ann = Self {
            image_id: image_id.into(),
            height,
            width,
            points,
        };
        ann.validate()?;
        Ok(ann)
    }

    pub fn validate(&self) -> Result<()> {
        if self.height == 0 || self.width == 0 {
            return Err(Error::Validation(format!(
                "{}: image dims must be positive",
                self.image_id
            )));
        }
        for (i, p) in self.points.iter().enumerate() {
            let inside = p.x.is_finite()
                && p.y.is_finite()
                && p.x >= 0.0
                && p.y >= 0.0
                && p.x < self.width as f64
                && p.y < self.height as f64;
            if !inside {
                return Err(Error::Validation(format!(
                    "{}: point {i} at ({}, {}) outside {}x{} image",
                    self.image_id, p.x, p.y, self.width, self.height
                )));
            }
        }
        Ok(())
    }

    pub fn count(&self) -> usize {
        self.points.len()
    }

    /// Mirror image across the vertical axis: `x' = max(0, w - 1 - x)`.
    /// An involution on integer coordinates.
    pub fn flip_horizontal(&self) -> Self {
        let w = self.width as f64;
        Self {
            image_id: self.image_id.clone(),
            height: self.height,
            width: self.width,
            points: self
                .points
                .iter()
                .map(|p| Point::new((w - 1.0 - p.x).max(0.0), p.y))
                .collect(),
        }
    }
}

/// Parameters of the synthetic crowd generator.
#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct SceneConfig {
    pub height: usize,
    pub width: usize,
    pub min_count: usize,
    pub max_count: usize,
    /// Head radius at the top row, in pixels.
    pub min_radius: f64,
    /// Head radius approached at the bottom row.
    pub max_radius: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self {
            height: 64,
            width: 64,
            min_count: 5,
            max_count: 80,
            min_radius: 1.0,
            max_radius: 3.0,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 32 || self.width < 32 {
            return Err(Error::Config(format!(
                "scene must be at least 32x32, got {}x{}",
                self.height, self.width
            )));
        }
        if self.min_count > self.max_count {
            return Err(Error::Config(format!(
                "min_count {} exceeds max_count {}",
                self.min_count, self.max_count
            )));
        }
        if !(self.min_radius >= 1.0 && self.max_radius >= self.min_radius) {
            return Err(Error::Config(format!(
                "radius range [{}, {}] must satisfy 1 <= min <= max",
                self.min_radius, self.max_radius
            )));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::Config("noise_sigma must be finite and >= 0".into()));
        }
        Ok(())
    }

    /// Head radius at row `y`: grows linearly from top to bottom.
    pub fn radius_at(&self, y: f64) -> f64 {
        self.min_radius + (self.max_radius - self.min_radius) * (y / self.height as f64)
    }
}

pub const BACKGROUND: f64 = 0.1;
pub const HEAD_INTENSITY: f64 = 0.8;
const MAX_PLACEMENT_ATTEMPTS: usize = 1000;

/// Maps an 8-bit sample to the network's input range `[-0.5, 0.5]`.
pub fn byte_to_input(b: u8) -> f64 {
    b as f64 / 255.0 - 0.5
}

/// Inverse of [`byte_to_input`], rounding half-up and clamping.
pub fn input_to_byte(v: f64) -> u8 {
    let b = math::floor((v + 0.5) * 255.0 + 0.5);
    b.clamp(0.0, 255.0) as u8
}

/// Renders scene `index`. The result depends only on `(cfg, index)`: the
/// random stream is keyed by `cfg.seed ^ index`.
///
/// Rows are drawn with density proportional to `1 - y/H`, so the far (top)
/// part of the scene is crowded with small heads and the near (bottom) part
/// holds fewer, larger ones. Heads are non-overlapping discs of intensity 0.8
/// on a 0.1 background; Gaussian noise is added and the image is quantized to
/// 8 bits, exactly as a PGM round trip would.
pub fn synth_scene(cfg: &SceneConfig, index: u64) -> Result<(Tensor, PointAnnotation)> {
    cfg.validate()?;
    let mut rng = SplitMix64::new(cfg.seed ^ index);
    let (h, w) = (cfg.height, cfg.width);
    let m = rng.range_inclusive(cfg.min_count as u64, cfg.max_count as u64) as usize;

    let mut heads: Vec<(Point, f64)> = Vec::with_capacity(m);
    for k in 0..m {
        let mut placed = false;
        for _ in 0..MAX_PLACEMENT_ATTEMPTS {
            let x = rng.next_f64() * w as f64;
            // inverse CDF of the density 2(1 - t) on [0, 1)
            let y = h as f64 * (1.0 - math::sqrt(1.0 - rng.next_f64()));
            if y >= h as f64 {
                continue;
            }
            let r = cfg.radius_at(y);
            let clear = heads.iter().all(|(q, rq)| {
                let (dx, dy) = (q.x - x, q.y - y);
                dx * dx + dy * dy >= (r + rq) * (r + rq)
            });
            if clear {
                heads.push((Point::new(x, y), r));
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::Generation(format!(
                "scene {index}: could not place head {k} of {m} after {MAX_PLACEMENT_ATTEMPTS} attempts"
            )));
        }
    }

    let mut canvas = vec![BACKGROUND; h * w];
    for (p, r) in &heads {
        let y_lo = math::floor(p.y - r).max(0.0) as usize;
        let y_hi = (math::floor(p.y + r) as usize).min(h - 1);
        let x_lo = math::floor(p.x - r).max(0.0) as usize;
        let x_hi = (math::floor(p.x + r) as usize).min(w - 1);
        for py in y_lo..=y_hi {
            for px in x_lo..=x_hi {
                let (dx, dy) = (px as f64 - p.x, py as f64 - p.y);
                if dx * dx + dy * dy <= r * r {
                    canvas[py * w + px] = HEAD_INTENSITY;
                }
            }
        }
    }
    let data = canvas
        .into_iter()
        .map(|v| {
            let noisy = (v + cfg.noise_sigma * rng.next_normal()).clamp(0.0, 1.0);
            byte_to_input(math::floor(noisy * 255.0 + 0.5) as u8)
        })
        .collect();
    let image = Tensor::new(vec![1, h, w], data)?;
    let annotation = PointAnnotation {
        image_id: format!("scene_{index:05}"),
        height: h,
        width: w,
        points: heads.into_iter().map(|(p, _)| p).collect(),
    };
    Ok((image, annotation))
}

/// One augmented training crop.
#[derive(Debug, Clone, PartialEq)]
pub struct Patch {
    pub image: Tensor,
    pub annotation: PointAnnotation,
    pub flipped: bool,
    /// Top-left corner of the crop in the source image (row, column).
    pub origin: (usize, usize),
}

/// An input image with its head annotation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub annotation: PointAnnotation,
}

impl Sample {
    pub fn new(image: Tensor, annotation: PointAnnotation) -> Result<Self> {
        let d = image.dims();
        if d.len() != 3 || d[1] != annotation.height || d[2] != annotation.width {
            return Err(Error::Dimension(format!(
                "{}: image {:?} does not match annotation {}x{}",
                annotation.image_id, d, annotation.height, annotation.width
            )));
        }
        Ok(Self { image, annotation })
    }
}

/// Number of random crops per image; each is also emitted mirrored.
pub const CROPS_PER_IMAGE: usize = 9;

/// Nine random quarter-size crops, each followed by its horizontal mirror.
///
/// Crop sides are `floor(H / 2 / q) * q` and `floor(W / 2 / q) * q`, where
/// `quantum` is the label stride (or a multiple of it). Offsets are uniform.
/// A point is kept when it lies in the half-open crop `[x0, x0 + w)`.
pub fn augment(
    image: &Tensor,
    annotation: &PointAnnotation,
    quantum: usize,
    rng: &mut SplitMix64,
) -> Result<Vec<Patch>> {
    let d = image.dims();
    if d.len() != 3 || d[1] != annotation.height || d[2] != annotation.width {
        return Err(Error::Dimension(format!(
            "image {:?} does not match annotation {}x{}",
            d, annotation.height, annotation.width
        )));
    }
    if quantum == 0 {
        return Err(Error::Config("crop quantum must be positive".into()));
    }
    let (c, h, w) = (d[0], d[1], d[2]);
    let ch = (h / 2 / quantum) * quantum;
    let cw = (w / 2 / quantum) * quantum;
    if ch == 0 || cw == 0 {
        return Err(Error::Augmentation(format!(
            "{}: {h}x{w} image too small for crops in multiples of {quantum}",
            annotation.image_id
        )));
    }
    let mut patches = Vec::with_capacity(2 * CROPS_PER_IMAGE);
    for _ in 0..CROPS_PER_IMAGE {
        let y0 = rng.range_inclusive(0, (h - ch) as u64) as usize;
        let x0 = rng.range_inclusive(0, (w - cw) as u64) as usize;
        let crop = crop_image(image, c, w, y0, x0, ch, cw);
        let ann = crop_annotation(annotation, y0, x0, ch, cw);
        let flipped = Patch {
            image: crop.flip_last_axis(),
            annotation: ann.flip_horizontal(),
            flipped: true,
            origin: (y0, x0),
        };
        patches.push(Patch {
            image: crop,
            annotation: ann,
            flipped: false,
            origin: (y0, x0),
        });
        patches.push(flipped);
    }
    Ok(patches)
}

fn crop_image(
    image: &Tensor,
    c: usize,
    w: usize,
    y0: usize,
    x0: usize,
    ch: usize,
    cw: usize,
) -> Tensor {
    let h = image.dims()[1];
    let src = image.data();
    let mut out = Vec::with_capacity(c * ch * cw);
    for plane in 0..c {
        for y in y0..y0 + ch {
            let row = (plane * h + y) * w;
            out.extend_from_slice(&src[row + x0..row + x0 + cw]);
        }
    }
    Tensor::new(vec![c, ch, cw], out).expect("crop dims are consistent")
}

/// Points inside `[x0, x0 + w) x [y0, y0 + h)`, shifted to crop coordinates.
pub fn crop_annotation(
    ann: &PointAnnotation,
    y0: usize,
    x0: usize,
    h: usize,
    w: usize,
) -> PointAnnotation {
    let points = ann
        .points
        .iter()
        .filter_map(|p| {
            let (lx, ly) = (p.x - x0 as f64, p.y - y0 as f64);
            (lx >= 0.0 && ly >= 0.0 && lx < w as f64 && ly < h as f64).then(|| Point::new(lx, ly))
        })
        .collect();
    PointAnnotation {
        image_id: ann.image_id.clone(),
        height: h,
        width: w,
        points,
    }
}
