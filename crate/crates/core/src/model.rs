//! Domain types shared by every stage of the pipeline.
//!
//! Coordinates are x-then-y with the origin at the top-left corner. Pixel
//! boxes are continuous; normalized boxes are integer bins in `[0, 999]`
//! (1000 bins per axis).

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Number of bins per axis in the normalized coordinate space.
pub const NORM_BINS: u32 = 1000;
/// Largest valid bin index.
pub const MAX_BIN: u32 = NORM_BINS - 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ImageSize {
    pub width: u32,
    pub height: u32,
}

impl ImageSize {
    pub fn new(width: u32, height: u32) -> Result<Self> {
        if width == 0 || height == 0 {
            return Err(Error::invalid(format!(
                "image size must be positive, got {width}x{height}"
            )));
        }
        Ok(Self { width, height })
    }

    pub fn diagonal(&self) -> f64 {
        f64::from(self.width).hypot(f64::from(self.height))
    }

    pub fn pixel_count(&self) -> usize {
        self.width as usize * self.height as usize
    }
}

/// Axis-aligned box in pixel coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 4]", into = "[f64; 4]")]
pub struct PixelBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl PixelBox {
    pub fn new(x1: f64, y1: f64, x2: f64, y2: f64) -> Result<Self> {
        if ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
            return Err(Error::invalid("box coordinates must be finite"));
        }
        if x1 > x2 || y1 > y2 {
            return Err(Error::invalid(format!(
                "box corners out of order: ({x1},{y1}),({x2},{y2})"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width() * self.height()
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Clamp to `[0, width] x [0, height]`. Returns the clamped box and
    /// whether anything moved.
    pub fn clamp_to(&self, size: ImageSize) -> (Self, bool) {
        let w = f64::from(size.width);
        let h = f64::from(size.height);
        let clamped = Self {
            x1: self.x1.clamp(0.0, w),
            y1: self.y1.clamp(0.0, h),
            x2: self.x2.clamp(0.0, w),
            y2: self.y2.clamp(0.0, h),
        };
        let moved = clamped != *self;
        (clamped, moved)
    }

    pub fn within(&self, size: ImageSize) -> bool {
        !self.clamp_to(size).1
    }
}

impl TryFrom<[f64; 4]> for PixelBox {
    type Error = Error;

    fn try_from(v: [f64; 4]) -> Result<Self> {
        Self::new(v[0], v[1], v[2], v[3])
    }
}

impl From<PixelBox> for [f64; 4] {
    fn from(b: PixelBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// Axis-aligned box in normalized bins.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "[i64; 4]", into = "[u32; 4]")]
pub struct NormBox {
    pub x1: u32,
    pub y1: u32,
    pub x2: u32,
    pub y2: u32,
}

impl NormBox {
    pub fn new(x1: u32, y1: u32, x2: u32, y2: u32) -> Result<Self> {
        if [x1, y1, x2, y2].iter().any(|&v| v > MAX_BIN) {
            return Err(Error::invalid(format!(
                "bin out of range [0,{MAX_BIN}]: ({x1},{y1}),({x2},{y2})"
            )));
        }
        if x1 > x2 || y1 > y2 {
            return Err(Error::invalid(format!(
                "box corners out of order: ({x1},{y1}),({x2},{y2})"
            )));
        }
        Ok(Self { x1, y1, x2, y2 })
    }

    pub fn from_pixel(b: &PixelBox, size: ImageSize) -> Result<Self> {
        let w = f64::from(size.width);
        let h = f64::from(size.height);
        let (b, _) = b.clamp_to(size);
        Self::new(
            norm_coord(b.x1, w)?,
            norm_coord(b.y1, h)?,
            norm_coord(b.x2, w)?,
            norm_coord(b.y2, h)?,
        )
    }

    /// Map back to pixels with bin-center corners.
    pub fn to_pixel(&self, size: ImageSize) -> PixelBox {
        let w = f64::from(size.width);
        let h = f64::from(size.height);
        PixelBox {
            x1: bin_center(self.x1, w),
            y1: bin_center(self.y1, h),
            x2: bin_center(self.x2, w),
            y2: bin_center(self.y2, h),
        }
    }

    pub fn width(&self) -> u32 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> u32 {
        self.y2 - self.y1
    }
}

impl TryFrom<[i64; 4]> for NormBox {
    type Error = Error;

    fn try_from(v: [i64; 4]) -> Result<Self> {
        let mut out = [0u32; 4];
        for (o, &x) in out.iter_mut().zip(v.iter()) {
            *o = u32::try_from(x).map_err(|_| Error::invalid(format!("bin out of range: {x}")))?;
        }
        Self::new(out[0], out[1], out[2], out[3])
    }
}

impl From<NormBox> for [u32; 4] {
    fn from(b: NormBox) -> Self {
        [b.x1, b.y1, b.x2, b.y2]
    }
}

/// A point in normalized image coordinates, both axes in `[0, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 2]", into = "[f64; 2]")]
pub struct GazePoint {
    pub x: f64,
    pub y: f64,
}

impl GazePoint {
    pub fn new(x: f64, y: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&x) || !(0.0..=1.0).contains(&y) {
            return Err(Error::invalid(format!(
                "gaze point ({x},{y}) outside the unit square"
            )));
        }
        Ok(Self { x, y })
    }

    /// Clamp into the unit square. NaN maps to 0.
    pub fn clamped(x: f64, y: f64) -> Self {
        let c = |v: f64| if v.is_nan() { 0.0 } else { v.clamp(0.0, 1.0) };
        Self { x: c(x), y: c(y) }
    }

    pub fn to_pixel(&self, size: ImageSize) -> (f64, f64) {
        (
            self.x * f64::from(size.width),
            self.y * f64::from(size.height),
        )
    }

    /// Arithmetic mean of a non-empty point list.
    pub fn centroid(points: &[GazePoint]) -> Option<GazePoint> {
        if points.is_empty() {
            return None;
        }
        let n = points.len() as f64;
        let (sx, sy) = points
            .iter()
            .fold((0.0, 0.0), |(sx, sy), p| (sx + p.x, sy + p.y));
        Some(GazePoint::clamped(sx / n, sy / n))
    }
}

impl TryFrom<[f64; 2]> for GazePoint {
    type Error = Error;

    fn try_from(v: [f64; 2]) -> Result<Self> {
        Self::new(v[0], v[1])
    }
}

impl From<GazePoint> for [f64; 2] {
    fn from(p: GazePoint) -> Self {
        [p.x, p.y]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub bbox: PixelBox,
    #[serde(rename = "class")]
    pub class_label: String,
    #[serde(default = "default_score")]
    pub score: f64,
}

fn default_score() -> f64 {
    1.0
}

impl Detection {
    pub fn new(bbox: PixelBox, class_label: impl Into<String>, score: f64) -> Result<Self> {
        let class_label = class_label.into();
        if class_label.is_empty() {
            return Err(Error::invalid("detection class label is empty"));
        }
        if !(0.0..=1.0).contains(&score) {
            return Err(Error::invalid(format!(
                "detection score {score} outside [0,1]"
            )));
        }
        Ok(Self {
            bbox,
            class_label,
            score,
        })
    }
}

/// One ground-truth gaze instance: a single person in a single image.
#[derive(Debug, Clone, PartialEq)]
pub struct AnnotatedSample {
    pub sample_id: String,
    pub image_path: PathBuf,
    pub depth_path: Option<PathBuf>,
    pub image_size: ImageSize,
    pub head_box: PixelBox,
    pub eye_point: GazePoint,
    pub gaze_points: Vec<GazePoint>,
    pub in_frame: bool,
    pub gazed_object: Option<Detection>,
}

impl AnnotatedSample {
    pub const MAX_GAZE_POINTS: usize = 10;

    pub fn validate(&self) -> Result<()> {
        if self.sample_id.is_empty() {
            return Err(Error::invalid("sample_id is empty"));
        }
        if self.in_frame && self.gaze_points.is_empty() {
            return Err(Error::invalid(format!(
                "sample {}: in-frame sample has no gaze points",
                self.sample_id
            )));
        }
        if self.gaze_points.len() > Self::MAX_GAZE_POINTS {
            return Err(Error::invalid(format!(
                "sample {}: {} gaze points exceeds the limit of {}",
                self.sample_id,
                self.gaze_points.len(),
                Self::MAX_GAZE_POINTS
            )));
        }
        if !self.head_box.within(self.image_size) {
            return Err(Error::invalid(format!(
                "sample {}: head box outside image bounds",
                self.sample_id
            )));
        }
        Ok(())
    }

    /// Mean of the annotated gaze points, or `None` for out-of-frame samples.
    pub fn gaze_centroid(&self) -> Option<GazePoint> {
        if !self.in_frame {
            return None;
        }
        GazePoint::centroid(&self.gaze_points)
    }

    /// Head-box center in normalized coordinates.
    pub fn head_center(&self) -> GazePoint {
        let (cx, cy) = self.head_box.center();
        GazePoint::clamped(
            cx / f64::from(self.image_size.width),
            cy / f64::from(self.image_size.height),
        )
    }

    pub fn head_norm_box(&self) -> NormBox {
        // head_box is validated against image bounds, so this cannot fail
        NormBox::from_pixel(&self.head_box, self.image_size).expect("validated head box normalizes")
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Task {
    PersonDetection,
    GazeTarget,
    GazeObject,
    #[serde(rename = "gaze_inout")]
    GazeInOut,
}

impl Task {
    pub const ALL: [Task; 4] = [
        Task::PersonDetection,
        Task::GazeTarget,
        Task::GazeObject,
        Task::GazeInOut,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            Task::PersonDetection => "person_detection",
            Task::GazeTarget => "gaze_target",
            Task::GazeObject => "gaze_object",
            Task::GazeInOut => "gaze_inout",
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Task {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Task::ALL
            .iter()
            .copied()
            .find(|t| t.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown task '{s}'")))
    }
}

/// Structured model output for one sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sample_id: String,
    pub task: Task,
    #[serde(default)]
    pub boxes: Vec<NormBox>,
    #[serde(rename = "class", default)]
    pub class_label: Option<String>,
    #[serde(default)]
    pub out_of_frame: bool,
    #[serde(default)]
    pub out_score: Option<f64>,
    #[serde(default)]
    pub raw_text: String,
    /// Set when the parser had to clamp coordinates into `[0, 999]`.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub coords_clamped: bool,
}

impl Prediction {
    pub fn validate(&self) -> Result<()> {
        if self.sample_id.is_empty() {
            return Err(Error::invalid("prediction sample_id is empty"));
        }
        if self.task == Task::GazeTarget && self.boxes.is_empty() && !self.out_of_frame {
            return Err(Error::invalid(format!(
                "prediction {}: gaze_target carries no box and is not out of frame",
                self.sample_id
            )));
        }
        if self.task == Task::GazeObject && !self.boxes.is_empty() && self.class_label.is_none() {
            return Err(Error::invalid(format!(
                "prediction {}: gaze_object box without a class label",
                self.sample_id
            )));
        }
        if let Some(s) = self.out_score {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::invalid(format!(
                    "prediction {}: out_score {s} outside [0,1]",
                    self.sample_id
                )));
            }
        }
        Ok(())
    }

    /// Box tied to the object reference, i.e. the box following the class tag.
    pub fn object_box(&self) -> Option<NormBox> {
        self.class_label.as_ref()?;
        self.boxes.last().copied()
    }

    /// Box carrying the gaze target, if any. A gaze_object prediction only
    /// carries one when it has a gaze box ahead of the object box.
    pub fn gaze_box(&self) -> Option<NormBox> {
        if self.out_of_frame {
            return None;
        }
        match self.task {
            Task::GazeTarget => self.boxes.first().copied(),
            Task::GazeObject if self.boxes.len() >= 2 => self.boxes.first().copied(),
            _ => None,
        }
    }
}

/// Map a pixel coordinate to a bin in `[0, 999]`: `floor(v / extent * 1000)`,
/// clamped.
pub fn norm_coord(v: f64, extent: f64) -> Result<u32> {
    if !v.is_finite() || !extent.is_finite() {
        return Err(Error::invalid("coordinate and extent must be finite"));
    }
    if extent <= 0.0 {
        return Err(Error::invalid(format!(
            "extent must be positive, got {extent}"
        )));
    }
    let bin = (v / extent * f64::from(NORM_BINS)).floor();
    Ok(bin.clamp(0.0, f64::from(MAX_BIN)) as u32)
}

/// Inverse of [`norm_coord`] using the bin center.
pub fn denorm_coord(bin: u32, extent: f64) -> Result<f64> {
    if bin > MAX_BIN {
        return Err(Error::invalid(format!("bin {bin} outside [0,{MAX_BIN}]")));
    }
    Ok(bin_center(bin, extent))
}

fn bin_center(bin: u32, extent: f64) -> f64 {
    (f64::from(bin) + 0.5) / f64::from(NORM_BINS) * extent
}
