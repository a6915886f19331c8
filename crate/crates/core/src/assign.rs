//! Pick the detection a gaze point falls on: build a small pixel box around
//! the point and take the detection with the highest IoU against it.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{Detection, GazePoint, ImageSize, PixelBox};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum TieBreak {
    /// Highest detector score, then earliest index.
    #[default]
    HighestScore,
    FirstIndex,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AssignConfig {
    /// Half-width of the gaze box in pixels; `None` means 2% of the image
    /// diagonal.
    pub gaze_box_halfwidth: Option<f64>,
    pub tie_break: TieBreak,
    /// The best IoU must be strictly above this to count.
    pub min_iou: f64,
}

impl Default for AssignConfig {
    fn default() -> Self {
        Self {
            gaze_box_halfwidth: None,
            tie_break: TieBreak::HighestScore,
            min_iou: 0.0,
        }
    }
}

impl AssignConfig {
    pub const DIAGONAL_FRACTION: f64 = 0.02;

    pub fn validate(&self) -> Result<()> {
        if let Some(h) = self.gaze_box_halfwidth {
            if !(h.is_finite() && h > 0.0) {
                return Err(Error::Config(format!(
                    "gaze_box_halfwidth must be positive, got {h}"
                )));
            }
        }
        if !(0.0..1.0).contains(&self.min_iou) {
            return Err(Error::Config(format!(
                "min_iou must be in [0,1), got {}",
                self.min_iou
            )));
        }
        Ok(())
    }

    pub fn halfwidth(&self, size: ImageSize) -> f64 {
        self.gaze_box_halfwidth
            .unwrap_or_else(|| size.diagonal() * Self::DIAGONAL_FRACTION)
    }
}

/// Intersection over union; 0 when the union has no area.
pub fn iou(a: &PixelBox, b: &PixelBox) -> f64 {
    let iw = (a.x2.min(b.x2) - a.x1.max(b.x1)).max(0.0);
    let ih = (a.y2.min(b.y2) - a.y1.max(b.y1)).max(0.0);
    let inter = iw * ih;
    let union = a.area() + b.area() - inter;
    if union <= 0.0 {
        return 0.0;
    }
    (inter / union).clamp(0.0, 1.0)
}

pub fn gaze_box(g: &GazePoint, size: ImageSize, halfwidth: f64) -> PixelBox {
    let (cx, cy) = g.to_pixel(size);
    PixelBox {
        x1: cx - halfwidth,
        y1: cy - halfwidth,
        x2: cx + halfwidth,
        y2: cy + halfwidth,
    }
}

/// Index of the gazed detection, if any clears `min_iou`.
pub fn assign_index(
    g: &GazePoint,
    size: ImageSize,
    dets: &[Detection],
    cfg: &AssignConfig,
) -> Option<usize> {
    let gb = gaze_box(g, size, cfg.halfwidth(size));
    let mut best: Option<(usize, f64)> = None;
    for (i, d) in dets.iter().enumerate() {
        let v = iou(&gb, &d.bbox);
        let better = match best {
            None => true,
            Some((j, bv)) => {
                v > bv
                    || (v == bv
                        && cfg.tie_break == TieBreak::HighestScore
                        && d.score > dets[j].score)
            }
        };
        if better {
            best = Some((i, v));
        }
    }
    best.filter(|&(_, v)| v > cfg.min_iou).map(|(i, _)| i)
}

pub fn assign_gazed_object<'a>(
    g: &GazePoint,
    size: ImageSize,
    dets: &'a [Detection],
    cfg: &AssignConfig,
) -> Option<&'a Detection> {
    assign_index(g, size, dets, cfg).map(|i| &dets[i])
}
