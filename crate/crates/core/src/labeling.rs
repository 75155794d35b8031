//! Dense label grids built from point annotations.
//!
//! A count map is the sum-pooled location map: window `r`, stride `s = r/2`,
//! after zero padding by `s` on every side. With that padding every pixel is
//! covered by exactly `(r/s)^2 = 4` windows, so the integral of the count map
//! is exactly four times the head count.

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use crate::data::PointAnnotation;
use crate::error::{dim_err, Error, Result};
use crate::math;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
#[cfg_attr(feature = "serde", derive(serde::Serialize, serde::Deserialize))]
#[cfg_attr(feature = "serde", serde(default, deny_unknown_fields))]
pub struct LabelConfig {
    /// Window size in pixels: 1, or an even number.
    pub r: usize,
    /// Density baseline kernel width, in output-grid cells.
    pub density_sigma: f64,
    /// Strictly increasing class boundaries; `C = len + 1` classes.
    pub class_bounds: Vec<f64>,
}

impl Default for LabelConfig {
    fn default() -> Self {
        Self {
            r: 8,
            density_sigma: 2.0,
            class_bounds: vec![0.5, 1.5, 3.5],
        }
    }
}

impl LabelConfig {
    pub fn with_r(r: usize) -> Self {
        Self {
            r,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.r == 0 || (self.r > 1 && self.r % 2 != 0) {
            return Err(Error::Config(format!(
                "window size r must be 1 or even, got {}",
                self.r
            )));
        }
        if !(self.density_sigma > 0.0 && self.density_sigma.is_finite()) {
            return Err(Error::Config(format!(
                "density_sigma must be positive, got {}",
                self.density_sigma
            )));
        }
        if self.class_bounds.iter().any(|b| !b.is_finite())
            || self.class_bounds.windows(2).any(|w| w[0] >= w[1])
        {
            return Err(Error::Config(format!(
                "class bounds must be finite and strictly increasing, got {:?}",
                self.class_bounds
            )));
        }
        Ok(())
    }

    /// Pooling stride `s`.
    pub fn stride(&self) -> usize {
        (self.r / 2).max(1)
    }

    /// Zero padding applied on each side before pooling.
    pub fn padding(&self) -> usize {
        if self.r == 1 {
            0
        } else {
            self.stride()
        }
    }

    /// `k = r / s`; the count map integral divided by `k^2` is the head count.
    pub fn coverage(&self) -> usize {
        self.r / self.stride()
    }

    pub fn num_classes(&self) -> usize {
        self.class_bounds.len() + 1
    }

    /// Label grid for an `h x w` input (both multiples of the stride).
    pub fn grid_dims(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let s = self.stride();
        if h % s != 0 || w % s != 0 {
            return Err(dim_err!("{h}x{w} is not divisible by stride {s}"));
        }
        let (ph, pw) = (h + 2 * self.padding(), w + 2 * self.padding());
        Ok((pooled_extent(ph, self.r, s), pooled_extent(pw, self.r, s)))
    }

    /// Class id of a count value: the number of boundaries `<= value`.
    pub fn class_of(&self, value: f64) -> usize {
        self.class_bounds.partition_point(|&b| b <= value)
    }
}

fn pooled_extent(padded: usize, window: usize, stride: usize) -> usize {
    if padded <= window {
        1
    } else {
        (padded - window) / stride + 1
    }
}

/// Per-pixel head counts, `[1, H, W]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LocationMap {
    pub grid: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CountMap {
    pub grid: Tensor,
    /// `k = r / s`.
    pub coverage: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DensityMap {
    pub grid: Tensor,
}

/// Class id per count-map cell, row-major.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassMap {
    pub height: usize,
    pub width: usize,
    pub classes: Vec<usize>,
}

impl ClassMap {
    pub fn to_tensor(&self) -> Tensor {
        Tensor::new(
            vec![1, self.height, self.width],
            self.classes.iter().map(|&c| c as f64).collect(),
        )
        .expect("class map dims are consistent")
    }
}

fn round_up(v: usize, m: usize) -> usize {
    v.div_ceil(m) * m
}

/// Nearest pixel, rounding halves up, clamped into the grid.
fn pixel_index(coord: f64, extent: usize) -> usize {
    (math::floor(coord + 0.5).max(0.0) as usize).min(extent - 1)
}

/// Location map on a grid whose sides are rounded up to multiples of
/// `stride` (zero extension at the right and bottom). Coincident heads
/// accumulate, so the map always sums to the head count.
pub fn build_location_map(ann: &PointAnnotation, stride: usize) -> Result<LocationMap> {
    ann.validate()?;
    if stride == 0 {
        return Err(Error::Config("stride must be positive".into()));
    }
    let (h, w) = (round_up(ann.height, stride), round_up(ann.width, stride));
    let mut grid = Tensor::zeros(&[1, h, w]);
    for p in &ann.points {
        let (row, col) = (pixel_index(p.y, h), pixel_index(p.x, w));
        grid.data_mut()[row * w + col] += 1.0;
    }
    Ok(LocationMap { grid })
}

/// Two-dimensional sum pooling of a `[1, H, W]` grid with zero padding `pad`.
/// Windows that reach past the padded extent are clipped, so a window at
/// least as large as the padded grid yields one cell holding the total.
pub fn sum_pool2d(grid: &Tensor, window: usize, stride: usize, pad: usize) -> Result<Tensor> {
    let d = grid.dims();
    if d.len() != 3 || d[0] != 1 {
        return Err(dim_err!("sum_pool2d expects [1,H,W], got {d:?}"));
    }
    if window == 0 || stride == 0 {
        return Err(Error::Config("window and stride must be positive".into()));
    }
    let (h, w) = (d[1], d[2]);
    // integral[(y)(w+1) + x] = sum of grid[..y, ..x]
    let mut integral = vec![0.0; (h + 1) * (w + 1)];
    for y in 0..h {
        let mut row = 0.0;
        for x in 0..w {
            row += grid.data()[y * w + x];
            integral[(y + 1) * (w + 1) + x + 1] = integral[y * (w + 1) + x + 1] + row;
        }
    }
    let (oh, ow) = (
        pooled_extent(h + 2 * pad, window, stride),
        pooled_extent(w + 2 * pad, window, stride),
    );
    // window i covers original rows [i*s - pad, i*s - pad + window) clipped to [0, h)
    let span = |i: usize, extent: usize| -> (usize, usize) {
        let lo = (i * stride).saturating_sub(pad).min(extent);
        let hi = (i * stride + window).saturating_sub(pad).min(extent);
        (lo, hi.max(lo))
    };
    let mut out = Vec::with_capacity(oh * ow);
    for i in 0..oh {
        let (y0, y1) = span(i, h);
        for j in 0..ow {
            let (x0, x1) = span(j, w);
            let at = |y: usize, x: usize| integral[y * (w + 1) + x];
            out.push(at(y1, x1) - at(y0, x1) - at(y1, x0) + at(y0, x0));
        }
    }
    Tensor::new(vec![1, oh, ow], out)
}

/// Count map of a location map. With `r = 1` the output equals the input.
pub fn make_count_map(location: &LocationMap, cfg: &LabelConfig) -> Result<CountMap> {
    cfg.validate()?;
    let d = location.grid.dims();
    let s = cfg.stride();
    if d.len() != 3 || d[1] % s != 0 || d[2] % s != 0 {
        return Err(dim_err!("location map {d:?} not divisible by stride {s}"));
    }
    let grid = if cfg.r == 1 {
        location.grid.clone()
    } else {
        sum_pool2d(&location.grid, cfg.r, s, cfg.padding())?
    };
    Ok(CountMap {
        grid,
        coverage: cfg.coverage(),
    })
}

/// Gaussian density baseline on the count-map grid. Each head adds a kernel
/// centred at `(x / s, y / s)`, truncated at `4 sigma` and renormalized over
/// the in-grid cells, so it contributes exactly one unit of mass.
pub fn make_density_map(ann: &PointAnnotation, cfg: &LabelConfig) -> Result<DensityMap> {
    cfg.validate()?;
    ann.validate()?;
    let s = cfg.stride();
    let (h, w) = cfg.grid_dims(round_up(ann.height, s), round_up(ann.width, s))?;
    let sigma = cfg.density_sigma;
    let radius = 4.0 * sigma;
    let mut grid = vec![0.0; h * w];
    let mut stencil: Vec<(usize, f64)> = Vec::new();
    for p in &ann.points {
        let (cy, cx) = (p.y / s as f64, p.x / s as f64);
        let y_lo = math::floor(cy - radius).max(0.0) as usize;
        let x_lo = math::floor(cx - radius).max(0.0) as usize;
        let y_hi = (math::floor(cy + radius).max(0.0) as usize).min(h - 1);
        let x_hi = (math::floor(cx + radius).max(0.0) as usize).min(w - 1);
        stencil.clear();
        let mut mass = 0.0;
        for y in y_lo..=y_hi {
            for x in x_lo..=x_hi {
                let (dy, dx) = (y as f64 - cy, x as f64 - cx);
                let d2 = dy * dy + dx * dx;
                if d2 <= radius * radius {
                    let v = math::exp(-d2 / (2.0 * sigma * sigma));
                    mass += v;
                    stencil.push((y * w + x, v));
                }
            }
        }
        if mass > 0.0 {
            for &(idx, v) in &stencil {
                grid[idx] += v / mass;
            }
        } else {
            // Kernel narrower than a cell: put the unit on the nearest cell.
            grid[pixel_index(cy, h) * w + pixel_index(cx, w)] += 1.0;
        }
    }
    Ok(DensityMap {
        grid: Tensor::new(vec![1, h, w], grid)?,
    })
}

pub fn make_class_map(count: &CountMap, cfg: &LabelConfig) -> ClassMap {
    let d = count.grid.dims();
    ClassMap {
        height: d[1],
        width: d[2],
        classes: count.grid.data().iter().map(|&v| cfg.class_of(v)).collect(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::Point;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    /// Window-enumeration oracle: cell (i, j) counts pixels of the padded
    /// location map inside `[i s, i s + r) x [j s, j s + r)`.
    fn count_oracle(loc: &Tensor, r: usize, s: usize, pad: usize) -> Tensor {
        let (h, w) = (loc.dims()[1], loc.dims()[2]);
        let (ph, pw) = (h + 2 * pad, w + 2 * pad);
        let (oh, ow) = ((ph - r) / s + 1, (pw - r) / s + 1);
        Tensor::from_fn(&[1, oh, ow], |idx| {
            let (i, j) = (idx / ow, idx % ow);
            let mut total = 0.0;
            for py in i * s..i * s + r {
                for px in j * s..j * s + r {
                    if py >= pad && px >= pad && py - pad < h && px - pad < w {
                        total += loc.at3(0, py - pad, px - pad);
                    }
                }
            }
            total
        })
    }

    fn ann(h: usize, w: usize, pts: &[(f64, f64)]) -> PointAnnotation {
        PointAnnotation::new(
            "t",
            h,
            w,
            pts.iter().map(|&(x, y)| Point::new(x, y)).collect(),
        )
        .unwrap()
    }

    #[test]
    fn config_rules() {
        assert!(LabelConfig::with_r(3).validate().is_err());
        assert!(LabelConfig::with_r(0).validate().is_err());
        assert!(LabelConfig::with_r(1).validate().is_ok());
        let c = LabelConfig::with_r(8);
        assert_eq!((c.stride(), c.padding(), c.coverage()), (4, 4, 2));
        let c1 = LabelConfig::with_r(1);
        assert_eq!((c1.stride(), c1.padding(), c1.coverage()), (1, 0, 1));
        assert_eq!(c.grid_dims(64, 64).unwrap(), (17, 17));
        assert_eq!(c.grid_dims(32, 48).unwrap(), (9, 13));
        assert_eq!(c1.grid_dims(5, 7).unwrap(), (5, 7));
        assert!(c.grid_dims(30, 32).is_err());
        let bad = LabelConfig {
            class_bounds: vec![1.0, 1.0],
            ..LabelConfig::default()
        };
        assert!(bad.validate().is_err());
    }

    #[test]
    fn location_map_rounding() {
        let l = build_location_map(&ann(4, 4, &[]), 1).unwrap();
        assert_eq!(l.grid.sum(), 0.0);
        let l = build_location_map(&ann(4, 4, &[(1.4, 2.6)]), 1).unwrap();
        assert_eq!(l.grid.at3(0, 3, 1), 1.0);
        assert_eq!(l.grid.sum(), 1.0);
        let l = build_location_map(&ann(4, 4, &[(1.0, 1.0), (1.2, 0.9)]), 1).unwrap();
        assert_eq!(l.grid.at3(0, 1, 1), 2.0);
        assert_eq!(l.grid.sum(), 2.0);
        // zero extension to a multiple of the stride
        let l = build_location_map(&ann(10, 6, &[(5.9, 9.9)]), 4).unwrap();
        assert_eq!(l.grid.dims(), &[1, 12, 8]);
        assert_eq!(l.grid.at3(0, 10, 6), 1.0);
    }

    #[test]
    fn count_map_single_head_r2() {
        let l = build_location_map(&ann(4, 4, &[(1.0, 1.0)]), 1).unwrap();
        let cfg = LabelConfig::with_r(2);
        let c = make_count_map(&l, &cfg).unwrap();
        let oracle = count_oracle(&l.grid, 2, 1, 1);
        assert_eq!(c.grid, oracle);
        assert_eq!(c.grid.dims(), &[1, 5, 5]);
        for i in 0..5 {
            for j in 0..5 {
                let expect = if (1..=2).contains(&i) && (1..=2).contains(&j) {
                    1.0
                } else {
                    0.0
                };
                assert_eq!(c.grid.at3(0, i, j), expect, "cell ({i},{j})");
            }
        }
        assert_eq!(c.grid.sum(), 4.0);
    }

    #[test]
    fn count_map_coincident_heads() {
        let l = build_location_map(&ann(4, 4, &[(1.0, 1.0), (1.0, 1.0)]), 1).unwrap();
        let c = make_count_map(&l, &LabelConfig::with_r(2)).unwrap();
        assert_eq!(c.grid, count_oracle(&l.grid, 2, 1, 1));
        assert_eq!(c.grid.at3(0, 1, 2), 2.0);
        assert_eq!(c.grid.sum(), 8.0);
    }

    #[test]
    fn r1_count_map_is_location_map() {
        let mut rng = SplitMix64::new(4);
        let pts: Vec<(f64, f64)> = (0..30)
            .map(|_| (rng.next_f64() * 20.0, rng.next_f64() * 12.0))
            .collect();
        let l = build_location_map(&ann(12, 20, &pts), 1).unwrap();
        let c = make_count_map(&l, &LabelConfig::with_r(1)).unwrap();
        assert_eq!(c.grid, l.grid);
        assert_eq!(c.coverage, 1);
    }

    #[test]
    fn empty_count_map() {
        let l = build_location_map(&ann(16, 16, &[]), 4).unwrap();
        let c = make_count_map(&l, &LabelConfig::default()).unwrap();
        assert!(c.grid.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn full_window_extreme() {
        let mut rng = SplitMix64::new(5);
        let pts: Vec<(f64, f64)> = (0..57)
            .map(|_| (rng.next_f64() * 32.0, rng.next_f64() * 32.0))
            .collect();
        let l = build_location_map(&ann(32, 32, &pts), 1).unwrap();
        let one = sum_pool2d(&l.grid, 32, 16, 0).unwrap();
        assert_eq!(one.dims(), &[1, 1, 1]);
        assert_eq!(one.data()[0], 57.0);
        let bigger = sum_pool2d(&l.grid, 100, 50, 0).unwrap();
        assert_eq!(bigger.data(), &[57.0]);
    }

    #[test]
    fn count_map_rejects_indivisible() {
        let l = LocationMap {
            grid: Tensor::zeros(&[1, 6, 8]),
        };
        assert!(make_count_map(&l, &LabelConfig::with_r(8)).is_err());
    }

    #[test]
    fn density_examples() {
        let cfg = LabelConfig::default();
        let d = make_density_map(&ann(64, 64, &[]), &cfg).unwrap();
        assert!(d.grid.data().iter().all(|&v| v == 0.0));
        assert_eq!(d.grid.dims(), &[1, 17, 17]);

        for sigma in [0.3, 1.0, 2.0, 5.0] {
            let cfg = LabelConfig {
                density_sigma: sigma,
                ..LabelConfig::default()
            };
            let d = make_density_map(&ann(64, 64, &[(1.0, 62.0)]), &cfg).unwrap();
            assert!((d.grid.sum() - 1.0).abs() < 1e-12, "sigma {sigma}");
        }

        // head on a cell centre, sigma = 1: direct stencil evaluation
        let cfg = LabelConfig {
            density_sigma: 1.0,
            ..LabelConfig::default()
        };
        let d = make_density_map(&ann(64, 64, &[(32.0, 32.0)]), &cfg).unwrap();
        let mut mass = 0.0;
        for dy in -4i32..=4 {
            for dx in -4i32..=4 {
                let d2 = (dy * dy + dx * dx) as f64;
                if d2 <= 16.0 {
                    mass += libm::exp(-d2 / 2.0);
                }
            }
        }
        assert!((d.grid.at3(0, 8, 8) - 1.0 / mass).abs() < 1e-15);
        assert_eq!(d.grid.max(), d.grid.at3(0, 8, 8));
    }

    #[test]
    fn class_bins() {
        let cfg = LabelConfig::default();
        assert_eq!(cfg.class_of(0.0), 0);
        assert_eq!(cfg.class_of(1.0), 1);
        assert_eq!(cfg.class_of(3.0), 2);
        assert_eq!(cfg.class_of(4.0), 3);
        assert_eq!(cfg.class_of(100.0), cfg.num_classes() - 1);
        let c = CountMap {
            grid: Tensor::new(vec![1, 1, 4], vec![0.0, 1.0, 3.0, 100.0]).unwrap(),
            coverage: 2,
        };
        assert_eq!(make_class_map(&c, &cfg).classes, vec![0, 1, 2, 3]);
    }

    fn random_ann(rng: &mut SplitMix64, h: usize, w: usize, max_m: u64) -> PointAnnotation {
        let m = rng.range_inclusive(0, max_m);
        let pts = (0..m)
            .map(|_| Point::new(rng.next_f64() * w as f64, rng.next_f64() * h as f64))
            .collect();
        PointAnnotation::new("r", h, w, pts).unwrap()
    }

    #[test]
    fn exact_counting_identity() {
        let cfg = LabelConfig::default();
        let mut rng = SplitMix64::new(2024);
        for _ in 0..1000 {
            let a = random_ann(&mut rng, 64, 64, 200);
            let c = make_count_map(&build_location_map(&a, cfg.stride()).unwrap(), &cfg).unwrap();
            assert_eq!(c.grid.sum(), 4.0 * a.count() as f64);
        }
    }

    proptest! {
        #[test]
        fn matches_window_oracle(seed in any::<u64>(), r in prop::sample::select(vec![2usize, 4, 8, 16])) {
            let mut rng = SplitMix64::new(seed);
            let a = random_ann(&mut rng, 32, 48, 60);
            let cfg = LabelConfig::with_r(r);
            let l = build_location_map(&a, cfg.stride()).unwrap();
            let c = make_count_map(&l, &cfg).unwrap();
            prop_assert_eq!(&c.grid, &count_oracle(&l.grid, r, r / 2, r / 2));
            prop_assert_eq!(c.grid.sum(), 4.0 * a.count() as f64);
        }

        #[test]
        fn adding_a_point_is_monotone(seed in any::<u64>(), x in 0.0f64..64.0, y in 0.0f64..64.0) {
            let mut rng = SplitMix64::new(seed);
            let a = random_ann(&mut rng, 64, 64, 50);
            let mut b = a.clone();
            b.points.push(Point::new(x, y));
            let cfg = LabelConfig::default();
            let ca = make_count_map(&build_location_map(&a, 4).unwrap(), &cfg).unwrap();
            let cb = make_count_map(&build_location_map(&b, 4).unwrap(), &cfg).unwrap();
            for (p, q) in ca.grid.data().iter().zip(cb.grid.data()) {
                prop_assert!(q >= p);
            }
        }

        #[test]
        fn flip_equivariance(seed in any::<u64>(), r in prop::sample::select(vec![1usize, 2, 4, 8])) {
            let mut rng = SplitMix64::new(seed);
            let m = rng.range_inclusive(0, 40);
            let pts = (0..m).map(|_| Point::new(rng.below(32) as f64, rng.below(32) as f64)).collect();
            let a = PointAnnotation::new("f", 32, 32, pts).unwrap();
            let cfg = LabelConfig::with_r(r);
            let c = make_count_map(&build_location_map(&a, cfg.stride()).unwrap(), &cfg).unwrap();
            let cf = make_count_map(&build_location_map(&a.flip_horizontal(), cfg.stride()).unwrap(), &cfg).unwrap();
            prop_assert_eq!(cf.grid, c.grid.flip_last_axis());
        }

        #[test]
        fn density_mass_is_count(seed in any::<u64>()) {
            let mut rng = SplitMix64::new(seed);
            let a = random_ann(&mut rng, 64, 64, 100);
            let d = make_density_map(&a, &LabelConfig::default()).unwrap();
            let m = a.count() as f64;
            prop_assert!((d.grid.sum() - m).abs() <= 1e-3 * m.max(1e-9));
            prop_assert!(d.grid.data().iter().all(|&v| v >= 0.0));
        }
    }
}
