//! Three-channel geocentric encoding of a depth map: disparity, pixel height
//! and surface-normal angle, each scaled to `[0, 255]`.
//!
//! Channels are computed in `f64` and quantized once, when stacked, with
//! round-half-up.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ImageSize;

/// Row-major 2-D grid.
#[derive(Debug, Clone, PartialEq)]
pub struct Grid<T> {
    size: ImageSize,
    data: Vec<T>,
}

impl<T: Copy> Grid<T> {
    pub fn from_vec(size: ImageSize, data: Vec<T>) -> Result<Self> {
        if data.len() != size.pixel_count() {
            return Err(Error::invalid(format!(
                "grid of {}x{} needs {} values, got {}",
                size.width,
                size.height,
                size.pixel_count(),
                data.len()
            )));
        }
        Ok(Self { size, data })
    }

    pub fn filled(size: ImageSize, value: T) -> Self {
        Self {
            size,
            data: vec![value; size.pixel_count()],
        }
    }

    pub fn from_fn(size: ImageSize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let (w, h) = (size.width as usize, size.height as usize);
        let mut data = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                data.push(f(x, y));
            }
        }
        Self { size, data }
    }

    pub fn size(&self) -> ImageSize {
        self.size
    }

    pub fn width(&self) -> usize {
        self.size.width as usize
    }

    pub fn height(&self) -> usize {
        self.size.height as usize
    }

    pub fn get(&self, x: usize, y: usize) -> T {
        self.data[y * self.width() + x]
    }

    pub fn values(&self) -> &[T] {
        &self.data
    }

    pub fn into_values(self) -> Vec<T> {
        self.data
    }

    pub fn map<U: Copy>(&self, f: impl FnMut(T) -> U) -> Grid<U> {
        Grid {
            size: self.size,
            data: self.data.iter().copied().map(f).collect(),
        }
    }
}

/// Depth values: finite, non-negative, at least 3x3.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthMap(Grid<f64>);

impl DepthMap {
    pub const MIN_SIDE: u32 = 3;

    pub fn new(size: ImageSize, values: Vec<f64>) -> Result<Self> {
        if size.width < Self::MIN_SIDE || size.height < Self::MIN_SIDE {
            return Err(Error::invalid(format!(
                "depth map must be at least 3x3, got {}x{}",
                size.width, size.height
            )));
        }
        if let Some(bad) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!(
                "depth values must be finite and non-negative, found {bad}"
            )));
        }
        Ok(Self(Grid::from_vec(size, values)?))
    }

    pub fn grid(&self) -> &Grid<f64> {
        &self.0
    }

    pub fn size(&self) -> ImageSize {
        self.0.size
    }

    pub fn values(&self) -> &[f64] {
        self.0.values()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HhaConfig {
    pub rescale_lo: f64,
    pub rescale_hi: f64,
    pub epsilon: f64,
    /// Value written for a channel whose pre-quantization grid is constant.
    pub constant_channel_value: u8,
}

impl Default for HhaConfig {
    fn default() -> Self {
        Self {
            rescale_lo: 1.0,
            rescale_hi: 10.0,
            epsilon: 1e-6,
            constant_channel_value: 0,
        }
    }
}

impl HhaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.rescale_lo.is_finite() && self.rescale_hi.is_finite())
            || self.rescale_lo >= self.rescale_hi
        {
            return Err(Error::Config(format!(
                "hha rescale range [{}, {}] is empty",
                self.rescale_lo, self.rescale_hi
            )));
        }
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::Config(format!(
                "hha epsilon must be positive, got {}",
                self.epsilon
            )));
        }
        Ok(())
    }
}

/// Per-pixel unit normals `(nx, ny, nz)` with `nz > 0`.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalField(Grid<[f64; 3]>);

impl NormalField {
    pub fn grid(&self) -> &Grid<[f64; 3]> {
        &self.0
    }
}

/// Quantized encoding. Channel order is disparity, height, angle, exported
/// as R, G, B.
#[derive(Debug, Clone, PartialEq)]
pub struct HhaImage {
    pub disparity: Grid<u8>,
    pub height: Grid<u8>,
    pub angle: Grid<u8>,
}

impl HhaImage {
    pub fn size(&self) -> ImageSize {
        self.disparity.size()
    }

    /// Interleaved RGB bytes, row-major.
    pub fn to_rgb8(&self) -> Vec<u8> {
        let n = self.size().pixel_count();
        let mut out = Vec::with_capacity(n * 3);
        for i in 0..n {
            out.push(self.disparity.values()[i]);
            out.push(self.height.values()[i]);
            out.push(self.angle.values()[i]);
        }
        out
    }

    pub fn from_rgb8(size: ImageSize, rgb: &[u8]) -> Result<Self> {
        if rgb.len() != size.pixel_count() * 3 {
            return Err(Error::invalid(format!(
                "expected {} RGB bytes, got {}",
                size.pixel_count() * 3,
                rgb.len()
            )));
        }
        let channel =
            |c: usize| Grid::from_vec(size, rgb.iter().skip(c).step_by(3).copied().collect());
        Ok(Self {
            disparity: channel(0)?,
            height: channel(1)?,
            angle: channel(2)?,
        })
    }
}

/// Affine map of `values` onto `[lo, hi]` (min to lo, max to hi). A constant
/// input maps to `lo` everywhere.
pub fn normalize_range(values: &[f64], lo: f64, hi: f64) -> Result<Vec<f64>> {
    if lo.partial_cmp(&hi) != Some(std::cmp::Ordering::Less) {
        return Err(Error::invalid(format!("empty target range [{lo}, {hi}]")));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid(
            "normalize_range input contains non-finite values",
        ));
    }
    let (min, max) = values
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(mn, mx), &v| {
            (mn.min(v), mx.max(v))
        });
    if max.partial_cmp(&min) != Some(std::cmp::Ordering::Greater) {
        return Ok(vec![lo; values.len()]);
    }
    let span = max - min;
    Ok(values
        .iter()
        .map(|&v| (lo + (v - min) / span * (hi - lo)).clamp(lo, hi))
        .collect())
}

fn normalize_grid(grid: &Grid<f64>, lo: f64, hi: f64) -> Result<Grid<f64>> {
    Grid::from_vec(grid.size(), normalize_range(grid.values(), lo, hi)?)
}

pub fn rescale_depth(depth: &DepthMap, cfg: &HhaConfig) -> Result<DepthMap> {
    let values = normalize_range(depth.values(), cfg.rescale_lo, cfg.rescale_hi)?;
    // lo may be negative under a custom config; the map stays ordered either way
    Ok(DepthMap(Grid::from_vec(depth.size(), values)?))
}

/// Inverse depth scaled to `[0, 255]`.
pub fn disparity_channel(rescaled: &DepthMap, cfg: &HhaConfig) -> Result<Grid<f64>> {
    let inverse = rescaled.grid().map(|v| 1.0 / v.max(cfg.epsilon));
    normalize_grid(&inverse, 0.0, 255.0)
}

/// `row / H * 255`, independent of depth.
pub fn height_channel(size: ImageSize) -> Grid<f64> {
    let h = f64::from(size.height);
    Grid::from_fn(size, |_, y| y as f64 / h * 255.0)
}

const SOBEL_X: [[f64; 3]; 3] = [[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]];
const SOBEL_Y: [[f64; 3]; 3] = [[-1.0, -2.0, -1.0], [0.0, 0.0, 0.0], [1.0, 2.0, 1.0]];

/// Horizontal and vertical Sobel responses with edge replication at the
/// borders. `gx` differentiates along columns (x), `gy` along rows (y).
pub fn sobel_gradients(depth: &DepthMap) -> Result<(Grid<f64>, Grid<f64>)> {
    let g = depth.grid();
    let (w, h) = (g.width(), g.height());
    if w < 3 || h < 3 {
        return Err(Error::invalid("sobel needs at least a 3x3 map"));
    }
    let at = |x: isize, y: isize| {
        let cx = x.clamp(0, w as isize - 1) as usize;
        let cy = y.clamp(0, h as isize - 1) as usize;
        g.get(cx, cy)
    };
    let apply = |k: &[[f64; 3]; 3], x: usize, y: usize| {
        let mut acc = 0.0;
        for (ky, row) in k.iter().enumerate() {
            for (kx, &coef) in row.iter().enumerate() {
                if coef != 0.0 {
                    acc += coef * at(x as isize + kx as isize - 1, y as isize + ky as isize - 1);
                }
            }
        }
        acc
    };
    let size = g.size();
    Ok((
        Grid::from_fn(size, |x, y| apply(&SOBEL_X, x, y)),
        Grid::from_fn(size, |x, y| apply(&SOBEL_Y, x, y)),
    ))
}

/// Unit normals of `(-gx, -gy, 1)`.
pub fn surface_normals(gx: &Grid<f64>, gy: &Grid<f64>) -> Result<NormalField> {
    if gx.size() != gy.size() {
        return Err(Error::invalid("gradient grids differ in size"));
    }
    let data = gx
        .values()
        .iter()
        .zip(gy.values())
        .map(|(&dx, &dy)| {
            let n = [-dx, -dy, 1.0];
            let norm = (n[0] * n[0] + n[1] * n[1] + 1.0).sqrt();
            [n[0] / norm, n[1] / norm, n[2] / norm]
        })
        .collect();
    Ok(NormalField(Grid::from_vec(gx.size(), data)?))
}

/// Angle between each normal and the view axis `(0, 0, 1)`, scaled to
/// `[0, 255]`.
pub fn angle_channel(normals: &NormalField) -> Result<Grid<f64>> {
    let angles = normals.grid().map(|n| n[2].clamp(-1.0, 1.0).acos());
    normalize_grid(&angles, 0.0, 255.0)
}

/// Round-half-up into `u8`. Constant channels take `constant_value`.
fn quantize(grid: &Grid<f64>, constant_value: u8) -> Grid<u8> {
    let first = grid.values().first().copied().unwrap_or(0.0);
    if grid.values().iter().all(|&v| v == first) && first == 0.0 {
        return Grid::filled(grid.size(), constant_value);
    }
    grid.map(quantize_value)
}

pub fn quantize_value(v: f64) -> u8 {
    (v + 0.5).floor().clamp(0.0, 255.0) as u8
}

pub fn encode_hha(depth: &DepthMap, cfg: &HhaConfig) -> Result<HhaImage> {
    cfg.validate()?;
    let rescaled = rescale_depth(depth, cfg)?;
    let disparity = disparity_channel(&rescaled, cfg)?;
    let height = height_channel(depth.size());
    let (gx, gy) = sobel_gradients(&rescaled)?;
    let angle = angle_channel(&surface_normals(&gx, &gy)?)?;
    Ok(HhaImage {
        disparity: quantize(&disparity, cfg.constant_channel_value),
        height: height.map(quantize_value),
        angle: quantize(&angle, cfg.constant_channel_value),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn size(w: u32, h: u32) -> ImageSize {
        ImageSize::new(w, h).unwrap()
    }

    fn depth(w: u32, h: u32, f: impl Fn(usize, usize) -> f64) -> DepthMap {
        let g = Grid::from_fn(size(w, h), f);
        DepthMap::new(g.size(), g.into_values()).unwrap()
    }

    #[test]
    fn normalize_range_examples() {
        assert_eq!(
            normalize_range(&[0.0, 5.0, 10.0], 1.0, 10.0).unwrap(),
            vec![1.0, 5.5, 10.0]
        );
        assert_eq!(
            normalize_range(&[7.0, 7.0, 7.0], 0.0, 255.0).unwrap(),
            vec![0.0; 3]
        );
        assert_eq!(
            normalize_range(&[1.0, 10.0], 1.0, 10.0).unwrap(),
            vec![1.0, 10.0]
        );
        assert!(normalize_range(&[f64::NAN], 0.0, 1.0).is_err());
        assert!(normalize_range(&[1.0], 1.0, 1.0).is_err());
    }

    #[test]
    fn depth_map_validation() {
        assert!(DepthMap::new(size(2, 3), vec![0.0; 6]).is_err());
        assert!(DepthMap::new(size(3, 3), vec![-1.0; 9]).is_err());
        assert!(DepthMap::new(size(3, 3), vec![f64::NAN; 9]).is_err());
        assert!(DepthMap::new(size(3, 3), vec![0.0; 8]).is_err());
    }

    #[test]
    fn rescale_examples() {
        let cfg = HhaConfig::default();
        let d = depth(3, 3, |x, _| [0.0, 5.0, 10.0][x]);
        let r = rescale_depth(&d, &cfg).unwrap();
        assert_eq!(&r.values()[..3], &[1.0, 5.5, 10.0]);
        let c = rescale_depth(&depth(3, 3, |_, _| 4.0), &cfg).unwrap();
        assert!(c.values().iter().all(|&v| v == 1.0));
    }

    #[test]
    fn disparity_examples() {
        let cfg = HhaConfig::default();
        let d = depth(3, 3, |x, _| [1.0, 2.0, 10.0][x]);
        let disp = disparity_channel(&d, &cfg).unwrap();
        assert_eq!(disp.get(0, 0), 255.0);
        assert_eq!(disp.get(2, 0), 0.0);
        assert!((disp.get(1, 0) - (0.5 - 0.1) / (1.0 - 0.1) * 255.0).abs() < 1e-9);
        let flat = disparity_channel(&depth(3, 3, |_, _| 1.0), &cfg).unwrap();
        assert!(flat.values().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn height_examples() {
        let h = height_channel(size(3, 100));
        assert_eq!(h.get(0, 0), 0.0);
        assert_eq!(h.get(1, 50), 127.5);
        assert_eq!(quantize_value(h.get(1, 50)), 128);
        assert!((h.get(2, 99) - 252.45).abs() < 1e-9);
        assert_eq!(quantize_value(h.get(2, 99)), 252);
    }

    #[test]
    fn sobel_examples() {
        let (gx, gy) = sobel_gradients(&depth(5, 5, |_, _| 3.0)).unwrap();
        assert!(gx.values().iter().chain(gy.values()).all(|&v| v == 0.0));

        let (gx, gy) = sobel_gradients(&depth(5, 5, |x, _| x as f64)).unwrap();
        for y in 1..4 {
            for x in 1..4 {
                assert_eq!(gx.get(x, y), 8.0);
                assert_eq!(gy.get(x, y), 0.0);
            }
        }
        let (gx, gy) = sobel_gradients(&depth(5, 5, |_, y| y as f64)).unwrap();
        assert_eq!(gx.get(2, 2), 0.0);
        assert_eq!(gy.get(2, 2), 8.0);
    }

    #[test]
    fn normal_examples() {
        let s = size(2, 1);
        let gx = Grid::from_vec(s, vec![0.0, 1.0]).unwrap();
        let gy = Grid::from_vec(s, vec![0.0, 0.0]).unwrap();
        let n = surface_normals(&gx, &gy).unwrap();
        assert_eq!(n.grid().get(0, 0), [0.0, 0.0, 1.0]);
        let m = n.grid().get(1, 0);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        assert!((m[0] + r).abs() < 1e-12 && m[1] == 0.0 && (m[2] - r).abs() < 1e-12);
    }

    #[test]
    fn angle_examples() {
        let s = size(2, 1);
        let r = std::f64::consts::FRAC_1_SQRT_2;
        let field = NormalField(Grid::from_vec(s, vec![[0.0, 0.0, 1.0], [-r, 0.0, r]]).unwrap());
        let a = angle_channel(&field).unwrap();
        assert_eq!(a.values(), &[0.0, 255.0]);

        let flat = NormalField(Grid::filled(s, [0.0, 0.0, 1.0]));
        assert!(angle_channel(&flat)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));

        let over = NormalField(Grid::filled(s, [0.0, 0.0, 1.0 + 1e-16]));
        assert!(angle_channel(&over)
            .unwrap()
            .values()
            .iter()
            .all(|v| v.is_finite()));
    }

    // Values frozen from an independent numpy walk of the same equations
    // (rescale, invert, min-max, edge-padded Sobel, arccos, round-half-up).
    #[test]
    fn three_by_three_frozen_oracle() {
        let d = DepthMap::new(size(3, 3), (1..=9).map(f64::from).collect()).unwrap();
        let cfg = HhaConfig::default();
        let r = rescale_depth(&d, &cfg).unwrap();
        assert_eq!(
            r.values(),
            &[1.0, 2.125, 3.25, 4.375, 5.5, 6.625, 7.75, 8.875, 10.0]
        );
        let (gx, gy) = sobel_gradients(&r).unwrap();
        assert_eq!(gx.values(), &[4.5, 9.0, 4.5, 4.5, 9.0, 4.5, 4.5, 9.0, 4.5]);
        assert_eq!(
            gy.values(),
            &[13.5, 13.5, 13.5, 27.0, 27.0, 27.0, 13.5, 13.5, 13.5]
        );
        let angle = angle_channel(&surface_normals(&gx, &gy).unwrap()).unwrap();
        let expected_angle = [
            0.0,
            62.6082399575,
            0.0,
            244.8474761037,
            255.0,
            244.8474761037,
            0.0,
            62.6082399575,
            0.0,
        ];
        for (a, e) in angle.values().iter().zip(expected_angle) {
            assert!((a - e).abs() < 1e-8, "{a} vs {e}");
        }

        let hha = encode_hha(&d, &cfg).unwrap();
        assert_eq!(hha.disparity.values(), &[255, 105, 59, 36, 23, 14, 8, 4, 0]);
        assert_eq!(hha.height.values(), &[0, 0, 0, 85, 85, 85, 170, 170, 170]);
        assert_eq!(hha.angle.values(), &[0, 63, 0, 245, 255, 245, 0, 63, 0]);
    }

    #[test]
    fn constant_map_encoding() {
        let hha = encode_hha(&depth(64, 64, |_, _| 2.5), &HhaConfig::default()).unwrap();
        assert!(hha.disparity.values().iter().all(|&v| v == 0));
        assert!(hha.angle.values().iter().all(|&v| v == 0));
        for y in 0..64 {
            let expected = quantize_value(y as f64 / 64.0 * 255.0);
            assert!((0..64).all(|x| hha.height.get(x, y) == expected));
        }
    }

    #[test]
    fn constant_channel_value_is_configurable() {
        let cfg = HhaConfig {
            constant_channel_value: 7,
            ..HhaConfig::default()
        };
        let hha = encode_hha(&depth(4, 4, |_, _| 1.0), &cfg).unwrap();
        assert!(hha.disparity.values().iter().all(|&v| v == 7));
        assert!(hha.angle.values().iter().all(|&v| v == 7));
    }

    #[test]
    fn rgb_round_trip() {
        let hha = encode_hha(&depth(5, 4, |x, y| (x * y) as f64), &HhaConfig::default()).unwrap();
        let back = HhaImage::from_rgb8(hha.size(), &hha.to_rgb8()).unwrap();
        assert_eq!(back, hha);
    }

    proptest! {
        #[test]
        fn normals_are_unit(gx in -1e3f64..1e3, gy in -1e3f64..1e3) {
            let s = size(1, 1);
            let n = surface_normals(
                &Grid::from_vec(s, vec![gx]).unwrap(),
                &Grid::from_vec(s, vec![gy]).unwrap(),
            ).unwrap().grid().get(0, 0);
            let norm = (n[0] * n[0] + n[1] * n[1] + n[2] * n[2]).sqrt();
            prop_assert!((norm - 1.0).abs() < 1e-9);
            prop_assert!(n[2] > 0.0);
        }

        #[test]
        fn rescale_preserves_order(values in proptest::collection::vec(0.0f64..100.0, 9)) {
            let d = DepthMap::new(size(3, 3), values.clone()).unwrap();
            let r = rescale_depth(&d, &HhaConfig::default()).unwrap();
            for i in 0..9 {
                prop_assert!((1.0..=10.0).contains(&r.values()[i]));
                for j in 0..9 {
                    if values[i] < values[j] {
                        prop_assert!(r.values()[i] <= r.values()[j]);
                    }
                }
            }
        }
    }
}
