//! Reference predictors that write the same text a model would, so the
//! parse and evaluation path runs without a trained model.
//!
//! Every predictor is a pure function of `(seed, sample_id)`: each sample
//! gets its own generator seeded from a hash of both.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::ingest::DatasetManifest;
use crate::model::{AnnotatedSample, GazePoint, NormBox, PixelBox, Prediction};
use crate::prompt::{
    gaze_point_to_box, parse_response, serialize_gaze_statement, GazeStatement, PromptConfig,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum PredictorKind {
    Random,
    #[default]
    Center,
    FixedBias,
    Oracle,
}

impl PredictorKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            PredictorKind::Random => "random",
            PredictorKind::Center => "center",
            PredictorKind::FixedBias => "fixed_bias",
            PredictorKind::Oracle => "oracle",
        }
    }
}

impl fmt::Display for PredictorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for PredictorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        [Self::Random, Self::Center, Self::FixedBias, Self::Oracle]
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::invalid(format!("unknown predictor kind '{s}'")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PredictorSpec {
    pub kind: PredictorKind,
    pub seed: u64,
    /// Standard deviation of the oracle's noise, in normalized units.
    pub oracle_noise_sigma: f64,
    pub bias_grid: u32,
}

impl Default for PredictorSpec {
    fn default() -> Self {
        Self {
            kind: PredictorKind::Center,
            seed: 0,
            oracle_noise_sigma: 0.0,
            bias_grid: 8,
        }
    }
}

impl PredictorSpec {
    pub fn validate(&self) -> Result<()> {
        if !(self.oracle_noise_sigma.is_finite() && self.oracle_noise_sigma >= 0.0) {
            return Err(Error::Config(format!(
                "oracle_noise_sigma must be >= 0, got {}",
                self.oracle_noise_sigma
            )));
        }
        if !(1..=1000).contains(&self.bias_grid) {
            return Err(Error::Config(format!(
                "bias_grid must be in [1, 1000], got {}",
                self.bias_grid
            )));
        }
        Ok(())
    }
}

/// Generator for one sample, independent of processing order.
pub fn sample_rng(seed: u64, sample_id: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(sample_id.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

/// Render a statement and parse it back, so predictions carry the exact
/// text the codec produces.
fn through_codec(
    sample_id: &str,
    stmt: &GazeStatement<'_>,
    cfg: &PromptConfig,
) -> Result<Prediction> {
    let text = serialize_gaze_statement(stmt, cfg)?;
    let mut pred = parse_response(&text, cfg)?;
    pred.sample_id = sample_id.to_string();
    Ok(pred)
}

fn point_prediction(sample_id: &str, g: &GazePoint, cfg: &PromptConfig) -> Prediction {
    let stmt = GazeStatement::InFrame {
        gaze_box: gaze_point_to_box(g, cfg),
        object: None,
    };
    through_codec(sample_id, &stmt, cfg).expect("a plain gaze box always serializes")
}

/// Normal(mean 0.5, sd 0.25) truncated to `[0, 1]` by rejection.
fn truncated_normal(rng: &mut impl Rng) -> f64 {
    let n = Normal::new(0.5, 0.25).expect("valid normal");
    loop {
        let v = n.sample(rng);
        if (0.0..=1.0).contains(&v) {
            return v;
        }
    }
}

/// Gaze point drawn per coordinate from the truncated normal; out-of-frame
/// score drawn uniformly.
pub fn predict_random(
    sample: &AnnotatedSample,
    spec: &PredictorSpec,
    cfg: &PromptConfig,
) -> Prediction {
    let mut rng = sample_rng(spec.seed, &sample.sample_id);
    let x = truncated_normal(&mut rng);
    let y = truncated_normal(&mut rng);
    let out_score: f64 = rng.random();
    let mut pred = point_prediction(&sample.sample_id, &GazePoint::clamped(x, y), cfg);
    pred.out_score = Some(out_score);
    pred
}

pub fn predict_center(sample: &AnnotatedSample, cfg: &PromptConfig) -> Prediction {
    point_prediction(&sample.sample_id, &GazePoint::clamped(0.5, 0.5), cfg)
}

/// Mean gaze point per head-center cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BiasTable {
    pub grid: u32,
    /// Keyed `"col,row"`; empty cells are absent.
    pub cells: BTreeMap<String, [f64; 2]>,
    pub global: [f64; 2],
}

fn cell_of(p: &GazePoint, grid: u32) -> (u32, u32) {
    let c = |v: f64| ((v * f64::from(grid)).floor() as i64).clamp(0, i64::from(grid) - 1) as u32;
    (c(p.x), c(p.y))
}

fn cell_key((i, j): (u32, u32)) -> String {
    format!("{i},{j}")
}

impl BiasTable {
    pub fn lookup(&self, head_center: &GazePoint) -> GazePoint {
        let m = self
            .cells
            .get(&cell_key(cell_of(head_center, self.grid)))
            .unwrap_or(&self.global);
        GazePoint::clamped(m[0], m[1])
    }
}

/// Fit the table on in-frame training samples.
pub fn fit_fixed_bias(train: &DatasetManifest, spec: &PredictorSpec) -> Result<BiasTable> {
    spec.validate()?;
    let mut sums: BTreeMap<(u32, u32), (f64, f64, usize)> = BTreeMap::new();
    let (mut gx, mut gy, mut n) = (0.0, 0.0, 0usize);
    for s in &train.samples {
        let Some(c) = s.gaze_centroid() else { continue };
        let e = sums
            .entry(cell_of(&s.head_center(), spec.bias_grid))
            .or_default();
        e.0 += c.x;
        e.1 += c.y;
        e.2 += 1;
        gx += c.x;
        gy += c.y;
        n += 1;
    }
    if n == 0 {
        return Err(Error::invalid(
            "fixed_bias needs at least one in-frame training sample",
        ));
    }
    let cells = sums
        .into_iter()
        .map(|(k, (sx, sy, m))| (cell_key(k), [sx / m as f64, sy / m as f64]))
        .collect();
    Ok(BiasTable {
        grid: spec.bias_grid,
        cells,
        global: [gx / n as f64, gy / n as f64],
    })
}

pub fn predict_fixed_bias(
    sample: &AnnotatedSample,
    table: &BiasTable,
    cfg: &PromptConfig,
) -> Prediction {
    point_prediction(&sample.sample_id, &table.lookup(&sample.head_center()), cfg)
}

/// Ground truth plus Gaussian noise. The gazed object's box moves by the
/// same offset as the gaze point.
pub fn predict_oracle(
    sample: &AnnotatedSample,
    spec: &PredictorSpec,
    cfg: &PromptConfig,
) -> Result<Prediction> {
    let Some(centroid) = sample.gaze_centroid() else {
        return through_codec(&sample.sample_id, &GazeStatement::OutOfFrame, cfg);
    };
    let (dx, dy) = if spec.oracle_noise_sigma > 0.0 {
        let mut rng = sample_rng(spec.seed, &sample.sample_id);
        let n =
            Normal::new(0.0, spec.oracle_noise_sigma).map_err(|e| Error::Config(e.to_string()))?;
        (n.sample(&mut rng), n.sample(&mut rng))
    } else {
        (0.0, 0.0)
    };
    let point = GazePoint::clamped(centroid.x + dx, centroid.y + dy);
    let object = match &sample.gazed_object {
        Some(d) => shifted_object(&d.bbox, dx, dy, sample).map(|b| (d.class_label.as_str(), b)),
        None => None,
    };
    let stmt = GazeStatement::InFrame {
        gaze_box: gaze_point_to_box(&point, cfg),
        object,
    };
    through_codec(&sample.sample_id, &stmt, cfg)
}

fn shifted_object(b: &PixelBox, dx: f64, dy: f64, sample: &AnnotatedSample) -> Option<NormBox> {
    let size = sample.image_size;
    let (ox, oy) = (dx * f64::from(size.width), dy * f64::from(size.height));
    let moved = PixelBox::new(b.x1 + ox, b.y1 + oy, b.x2 + ox, b.y2 + oy).ok()?;
    let (clamped, _) = moved.clamp_to(size);
    NormBox::from_pixel(&clamped, size).ok()
}

/// Fitted state for a run; only fixed_bias carries any.
#[derive(Debug, Clone)]
pub enum Predictor {
    Random(PredictorSpec),
    Center,
    FixedBias(BiasTable),
    Oracle(PredictorSpec),
}

impl Predictor {
    /// `train` is required for fixed_bias.
    pub fn new(spec: &PredictorSpec, train: Option<&DatasetManifest>) -> Result<Self> {
        spec.validate()?;
        Ok(match spec.kind {
            PredictorKind::Random => Predictor::Random(*spec),
            PredictorKind::Center => Predictor::Center,
            PredictorKind::Oracle => Predictor::Oracle(*spec),
            PredictorKind::FixedBias => {
                let train =
                    train.ok_or_else(|| Error::Config("fixed_bias needs a training set".into()))?;
                Predictor::FixedBias(fit_fixed_bias(train, spec)?)
            }
        })
    }

    pub fn predict(&self, sample: &AnnotatedSample, cfg: &PromptConfig) -> Result<Prediction> {
        match self {
            Predictor::Random(spec) => Ok(predict_random(sample, spec, cfg)),
            Predictor::Center => Ok(predict_center(sample, cfg)),
            Predictor::FixedBias(t) => Ok(predict_fixed_bias(sample, t, cfg)),
            Predictor::Oracle(spec) => predict_oracle(sample, spec, cfg),
        }
    }
}
