//! Gaze-following and gaze-object metrics.
//!
//! Per-sample terms are collected into a [`MetricAccumulator`]; merging two
//! accumulators is associative and commutative, and [`MetricAccumulator::finish`]
//! sorts terms by sample id before summing, so sharded evaluation gives
//! bit-identical results to a single pass.

use std::collections::{BTreeMap, HashMap};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::assign::iou;
use crate::error::{Error, LineError, Result};
use crate::ingest::DatasetManifest;
use crate::model::{AnnotatedSample, GazePoint, Prediction, Task, NORM_BINS};
use crate::prompt::{gaze_box_center, PromptConfig};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ApInterpolation {
    /// Area under the precision envelope at every recall step.
    #[default]
    AllPoints,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum AucTieRule {
    #[default]
    AverageRank,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MetricConfig {
    pub heatmap_grid: u32,
    /// Gaussian sigma in grid cells.
    pub heatmap_sigma: f64,
    pub iou_threshold: f64,
    pub ap_interpolation: ApInterpolation,
    pub auc_tie_rule: AucTieRule,
}

impl Default for MetricConfig {
    fn default() -> Self {
        Self {
            heatmap_grid: 64,
            heatmap_sigma: 3.0,
            iou_threshold: 0.5,
            ap_interpolation: ApInterpolation::AllPoints,
            auc_tie_rule: AucTieRule::AverageRank,
        }
    }
}

impl MetricConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heatmap_grid < 8 {
            return Err(Error::Config(format!(
                "heatmap_grid must be >= 8, got {}",
                self.heatmap_grid
            )));
        }
        if !(self.heatmap_sigma.is_finite() && self.heatmap_sigma > 0.0) {
            return Err(Error::Config(format!(
                "heatmap_sigma must be positive, got {}",
                self.heatmap_sigma
            )));
        }
        if !(self.iou_threshold > 0.0 && self.iou_threshold < 1.0) {
            return Err(Error::Config(format!(
                "iou_threshold must be in (0,1), got {}",
                self.iou_threshold
            )));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Heatmap AUC
// ---------------------------------------------------------------------------

/// `G x G` row-major Gaussian centered at `p * G`. Cell `(i, j)` sits at
/// integer coordinates, so `(0.5, 0.5)` on a 64 grid peaks at cell 32.
pub fn build_pred_heatmap(p: &GazePoint, cfg: &MetricConfig) -> Vec<f64> {
    let g = cfg.heatmap_grid as usize;
    let (px, py) = (p.x * g as f64, p.y * g as f64);
    let denom = 2.0 * cfg.heatmap_sigma * cfg.heatmap_sigma;
    let mut out = Vec::with_capacity(g * g);
    for y in 0..g {
        for x in 0..g {
            let d2 = (x as f64 - px).powi(2) + (y as f64 - py).powi(2);
            out.push((-d2 / denom).exp());
        }
    }
    out
}

/// Cell of the heatmap nearest to a normalized point.
pub fn point_cell(p: &GazePoint, grid: u32) -> (usize, usize) {
    let c = |v: f64| ((v * f64::from(grid)).round() as i64).clamp(0, i64::from(grid) - 1) as usize;
    (c(p.x), c(p.y))
}

/// Binary ground-truth mask: cells holding any annotated point.
pub fn gt_mask(points: &[GazePoint], grid: u32) -> Vec<bool> {
    let g = grid as usize;
    let mut mask = vec![false; g * g];
    for p in points {
        let (x, y) = point_cell(p, grid);
        mask[y * g + x] = true;
    }
    mask
}

/// Rank-based ROC AUC (Mann-Whitney U) with average ranks for ties.
pub fn auc_scores(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::invalid("scores and labels differ in length"));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::invalid("auc scores must be finite"));
    }
    let pos = labels.iter().filter(|&&l| l).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(format!(
            "auc needs both classes, got {pos} positive and {neg} negative"
        )));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1..=j share their average
        let avg = (i + 1 + j) as f64 / 2.0;
        let pos_in_group = order[i..j].iter().filter(|&&k| labels[k]).count();
        rank_sum_pos += avg * pos_in_group as f64;
        i = j;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * n))
}

/// AUC of a `grid x grid` heatmap against the binarized ground-truth points.
pub fn auc(heatmap: &[f64], grid: u32, gt_points: &[GazePoint]) -> Result<f64> {
    if gt_points.is_empty() {
        return Err(Error::invalid("auc needs at least one ground-truth point"));
    }
    if heatmap.len() != (grid as usize).pow(2) {
        return Err(Error::invalid("heatmap size does not match grid"));
    }
    auc_scores(heatmap, &gt_mask(gt_points, grid))
}

// ---------------------------------------------------------------------------
// Distances and angles
// ---------------------------------------------------------------------------

pub fn l2_dist(a: &GazePoint, b: &GazePoint) -> f64 {
    (a.x - b.x).hypot(a.y - b.y)
}

pub fn min_dist(pred: &GazePoint, gts: &[GazePoint]) -> Result<f64> {
    gts.iter()
        .map(|g| l2_dist(pred, g))
        .min_by(f64::total_cmp)
        .ok_or_else(|| Error::invalid("min_dist needs at least one ground-truth point"))
}

/// Angle in degrees between `pred - eye` and `gt - eye`.
///
/// Computed as `atan2(|cross|, dot)`, which equals the arccos of the
/// normalized dot product but stays exact for parallel vectors.
pub fn angle_error(eye: &GazePoint, pred: &GazePoint, gt: &GazePoint) -> Result<f64> {
    let (ax, ay) = (pred.x - eye.x, pred.y - eye.y);
    let (bx, by) = (gt.x - eye.x, gt.y - eye.y);
    if (ax == 0.0 && ay == 0.0) || (bx == 0.0 && by == 0.0) {
        return Err(Error::UndefinedMetric("zero-length gaze vector".into()));
    }
    let cross = ax * by - ay * bx;
    let dot = ax * bx + ay * by;
    Ok(cross.abs().atan2(dot).to_degrees().clamp(0.0, 180.0))
}

// ---------------------------------------------------------------------------
// Average precision
// ---------------------------------------------------------------------------

/// Non-interpolated AP over `(score, is_positive)`, the mean precision at
/// each positive's rank. Ties put negatives first.
pub fn ap_inout(items: &[(f64, bool)]) -> Result<f64> {
    let positives = items.iter().filter(|i| i.1).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric(
            "in/out AP needs at least one out-of-frame sample".into(),
        ));
    }
    let mut sorted = items.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, &(_, is_pos)) in sorted.iter().enumerate() {
        if is_pos {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

/// All-points AP for one class. Predictions sharing a confidence form one
/// operating point, so the result does not depend on their order.
pub fn average_precision(preds: &[(f64, bool)], num_gt: usize) -> f64 {
    if num_gt == 0 {
        return 0.0;
    }
    let mut sorted = preds.to_vec();
    sorted.sort_by(|a, b| b.0.total_cmp(&a.0));
    let mut curve: Vec<(f64, f64)> = Vec::new(); // (recall, precision)
    let (mut tp, mut seen) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let mut j = i;
        while j < sorted.len() && sorted[j].0 == sorted[i].0 {
            tp += usize::from(sorted[j].1);
            seen += 1;
            j += 1;
        }
        curve.push((tp as f64 / num_gt as f64, tp as f64 / seen as f64));
        i = j;
    }
    // precision envelope from the right
    for k in (0..curve.len().saturating_sub(1)).rev() {
        curve[k].1 = curve[k].1.max(curve[k + 1].1);
    }
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for &(r, p) in &curve {
        ap += (r - prev_recall) * p;
        prev_recall = r;
    }
    ap
}

#[derive(Debug, Clone, Default, PartialEq)]
struct ClassTally {
    num_gt: usize,
    /// (sample_id, confidence, true positive)
    preds: Vec<(String, f64, bool)>,
}

/// Score gaze-object predictions of one sample against its gazed object.
/// Each ground truth matches at most one prediction, taken greedily by
/// confidence then file order.
fn tally_objects(
    sample: &AnnotatedSample,
    preds: &[&Prediction],
    cfg: &MetricConfig,
    tallies: &mut BTreeMap<String, ClassTally>,
) {
    let gt = sample.gazed_object.as_ref();
    if let Some(g) = gt {
        tallies.entry(g.class_label.clone()).or_default().num_gt += 1;
    }
    let mut objects: Vec<(String, f64, f64)> = preds
        .iter()
        .filter(|p| p.task == Task::GazeObject)
        .filter_map(|p| {
            let label = p.class_label.clone()?;
            let b = p.object_box()?.to_pixel(sample.image_size);
            let overlap = gt
                .filter(|g| g.class_label == label)
                .map(|g| iou(&b, &g.bbox))
                .unwrap_or(0.0);
            Some((label, 1.0, overlap))
        })
        .collect();
    objects.sort_by(|a, b| b.1.total_cmp(&a.1));
    let mut matched = false;
    for (label, conf, overlap) in objects {
        let tp = !matched && overlap > cfg.iou_threshold;
        matched |= tp;
        tallies
            .entry(label)
            .or_default()
            .preds
            .push((sample.sample_id.clone(), conf, tp));
    }
}

/// Per-class AP and their mean over classes with at least one ground
/// truth. A non-empty `vocab` restricts the classes considered.
pub fn ap_ob(
    preds: &[Prediction],
    gts: &[AnnotatedSample],
    vocab: &[String],
    cfg: &MetricConfig,
) -> (BTreeMap<String, f64>, Option<f64>) {
    let mut by_sample: HashMap<&str, Vec<&Prediction>> = HashMap::new();
    for p in preds {
        by_sample.entry(p.sample_id.as_str()).or_default().push(p);
    }
    let mut tallies = BTreeMap::new();
    for s in gts {
        let ps = by_sample
            .get(s.sample_id.as_str())
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        tally_objects(s, ps, cfg, &mut tallies);
    }
    finish_ap_ob(&tallies, vocab)
}

fn finish_ap_ob(
    tallies: &BTreeMap<String, ClassTally>,
    vocab: &[String],
) -> (BTreeMap<String, f64>, Option<f64>) {
    let per_class: BTreeMap<String, f64> = tallies
        .iter()
        .filter(|(c, t)| t.num_gt > 0 && (vocab.is_empty() || vocab.contains(c)))
        .map(|(c, t)| {
            let items: Vec<(f64, bool)> = t.preds.iter().map(|p| (p.1, p.2)).collect();
            (c.clone(), average_precision(&items, t.num_gt))
        })
        .collect();
    let mean = if per_class.is_empty() {
        None
    } else {
        Some(per_class.values().sum::<f64>() / per_class.len() as f64)
    };
    (per_class, mean)
}

// ---------------------------------------------------------------------------
// Full evaluation
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Counts {
    pub samples: usize,
    pub in_frame: usize,
    pub out_frame: usize,
    pub predictions: usize,
    /// In-frame samples that contributed distance terms.
    pub evaluated: usize,
    pub unknown_sample_ids: usize,
    pub missing_predictions: usize,
    pub angle_excluded: usize,
    pub auc_excluded: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub auc: Option<f64>,
    pub dist: Option<f64>,
    pub min_dist: Option<f64>,
    pub angle_deg: Option<f64>,
    pub ap_inout: Option<f64>,
    pub ap_ob: Option<f64>,
    pub per_class_ap: BTreeMap<String, f64>,
    pub counts: Counts,
    /// Metrics with no evaluable input.
    pub undefined: Vec<String>,
}

/// Mergeable per-sample terms.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MetricAccumulator {
    auc: Vec<(String, f64)>,
    dist: Vec<(String, f64)>,
    min_dist: Vec<(String, f64)>,
    angle: Vec<(String, f64)>,
    inout: Vec<(String, f64, bool)>,
    objects: BTreeMap<String, ClassTally>,
    counts: Counts,
}

fn unit_from_bin(c: f64) -> f64 {
    (c + 0.5) / f64::from(NORM_BINS)
}

impl MetricAccumulator {
    /// Add one sample and the predictions that reference it (file order).
    pub fn add_sample(
        &mut self,
        sample: &AnnotatedSample,
        preds: &[&Prediction],
        cfg: &MetricConfig,
        prompt: &PromptConfig,
    ) {
        let id = &sample.sample_id;
        self.counts.samples += 1;
        if sample.in_frame {
            self.counts.in_frame += 1;
        } else {
            self.counts.out_frame += 1;
        }
        self.counts.predictions += preds.len();
        tally_objects(sample, preds, cfg, &mut self.objects);
        if preds.is_empty() {
            self.counts.missing_predictions += 1;
            return;
        }

        let inout_pred = preds
            .iter()
            .find(|p| p.task == Task::GazeInOut)
            .unwrap_or(&preds[0]);
        let score = inout_pred
            .out_score
            .unwrap_or(if inout_pred.out_of_frame { 1.0 } else { 0.0 });
        self.inout.push((id.clone(), score, !sample.in_frame));

        if !sample.in_frame {
            return;
        }
        let gaze = preds
            .iter()
            .find(|p| p.task == Task::GazeTarget && p.gaze_box().is_some())
            .or_else(|| preds.iter().find(|p| p.gaze_box().is_some()))
            .and_then(|p| p.gaze_box());
        let (Some(gaze_box), Some(centroid)) = (gaze, sample.gaze_centroid()) else {
            return;
        };
        let (cx, cy) = gaze_box_center(&gaze_box, prompt.lambda_margin);
        let point = GazePoint::clamped(unit_from_bin(cx), unit_from_bin(cy));

        self.counts.evaluated += 1;
        self.dist.push((id.clone(), l2_dist(&point, &centroid)));
        if let Ok(m) = min_dist(&point, &sample.gaze_points) {
            self.min_dist.push((id.clone(), m));
        }
        match angle_error(&sample.eye_point, &point, &centroid) {
            Ok(a) => self.angle.push((id.clone(), a)),
            Err(_) => self.counts.angle_excluded += 1,
        }
        let heatmap = build_pred_heatmap(&point, cfg);
        match auc(&heatmap, cfg.heatmap_grid, &sample.gaze_points) {
            Ok(a) => self.auc.push((id.clone(), a)),
            Err(_) => self.counts.auc_excluded += 1,
        }
    }

    pub fn merge(mut self, other: MetricAccumulator) -> MetricAccumulator {
        self.auc.extend(other.auc);
        self.dist.extend(other.dist);
        self.min_dist.extend(other.min_dist);
        self.angle.extend(other.angle);
        self.inout.extend(other.inout);
        for (class, t) in other.objects {
            let e = self.objects.entry(class).or_default();
            e.num_gt += t.num_gt;
            e.preds.extend(t.preds);
        }
        let c = &mut self.counts;
        let o = other.counts;
        c.samples += o.samples;
        c.in_frame += o.in_frame;
        c.out_frame += o.out_frame;
        c.predictions += o.predictions;
        c.evaluated += o.evaluated;
        c.unknown_sample_ids += o.unknown_sample_ids;
        c.missing_predictions += o.missing_predictions;
        c.angle_excluded += o.angle_excluded;
        c.auc_excluded += o.auc_excluded;
        self
    }

    pub fn note_unknown(&mut self, n: usize) {
        self.counts.unknown_sample_ids += n;
    }

    pub fn finish(mut self, vocab: &[String]) -> MetricReport {
        fn mean(v: &mut [(String, f64)]) -> Option<f64> {
            if v.is_empty() {
                return None;
            }
            v.sort_by(|a, b| a.0.cmp(&b.0).then(a.1.total_cmp(&b.1)));
            Some(v.iter().map(|x| x.1).sum::<f64>() / v.len() as f64)
        }
        for t in self.objects.values_mut() {
            t.preds
                .sort_by(|a, b| a.0.cmp(&b.0).then(b.1.total_cmp(&a.1)).then(a.2.cmp(&b.2)));
        }
        let (per_class_ap, ap_ob) = finish_ap_ob(&self.objects, vocab);
        self.inout.sort_by(|a, b| a.0.cmp(&b.0));
        let items: Vec<(f64, bool)> = self.inout.iter().map(|x| (x.1, x.2)).collect();
        let mut report = MetricReport {
            auc: mean(&mut self.auc),
            dist: mean(&mut self.dist),
            min_dist: mean(&mut self.min_dist),
            angle_deg: mean(&mut self.angle),
            ap_inout: ap_inout(&items).ok(),
            ap_ob,
            per_class_ap,
            counts: self.counts,
            undefined: Vec::new(),
        };
        for (name, v) in [
            ("auc", report.auc),
            ("dist", report.dist),
            ("min_dist", report.min_dist),
            ("angle", report.angle_deg),
            ("ap", report.ap_inout),
            ("ap_ob", report.ap_ob),
        ] {
            if v.is_none() {
                report.undefined.push(name.to_string());
            }
        }
        report
    }
}

#[derive(Debug, Clone)]
pub struct Evaluation {
    pub report: MetricReport,
    /// Predictions whose sample_id is not in the manifest.
    pub errors: Vec<LineError>,
}

/// Score a prediction set against a manifest. The predicted gaze point is
/// the center of the first gaze box, mapped back to unit coordinates with
/// bin centers; Dist compares it to the mean annotation, Min Dist to the
/// closest one. Out-of-frame predictions only feed the in/out AP.
pub fn evaluate(
    preds: &[Prediction],
    manifest: &DatasetManifest,
    cfg: &MetricConfig,
    prompt: &PromptConfig,
) -> Evaluation {
    let index = manifest.index();
    let mut by_sample: HashMap<&str, Vec<&Prediction>> = HashMap::new();
    let mut errors = Vec::new();
    for (i, p) in preds.iter().enumerate() {
        if index.contains_key(p.sample_id.as_str()) {
            by_sample.entry(p.sample_id.as_str()).or_default().push(p);
        } else {
            errors.push(LineError {
                line: i + 1,
                message: format!("unknown sample_id '{}'", p.sample_id),
            });
        }
    }
    let mut acc = MetricAccumulator::default();
    acc.note_unknown(errors.len());
    for s in &manifest.samples {
        let ps = by_sample
            .get(s.sample_id.as_str())
            .map(Vec::as_slice)
            .unwrap_or(&[]);
        acc.add_sample(s, ps, cfg, prompt);
    }
    Evaluation {
        report: acc.finish(&manifest.vocabulary),
        errors,
    }
}

// ---------------------------------------------------------------------------
// Report rendering
// ---------------------------------------------------------------------------

fn cell(v: Option<f64>, decimals: usize) -> String {
    v.map(|x| format!("{x:.decimals$}"))
        .unwrap_or_else(|| "-".into())
}

const COLUMNS: [&str; 8] = [
    "Dataset",
    "Predictor",
    "AUC",
    "Dist.",
    "M. Dist.",
    "Angle",
    "AP_ob",
    "AP",
];

fn row(dataset: &str, predictor: &str, r: &MetricReport) -> [String; 8] {
    [
        dataset.to_string(),
        predictor.to_string(),
        cell(r.auc, 3),
        cell(r.dist, 3),
        cell(r.min_dist, 3),
        cell(r.angle_deg, 1),
        cell(r.ap_ob, 3),
        cell(r.ap_inout, 3),
    ]
}

/// Aligned plain-text table, one row per (dataset, predictor).
pub fn render_table(rows: &[(&str, &str, &MetricReport)]) -> String {
    let body: Vec<[String; 8]> = rows.iter().map(|(d, p, r)| row(d, p, r)).collect();
    let mut widths = COLUMNS.map(str::len);
    for r in &body {
        for (w, c) in widths.iter_mut().zip(r) {
            *w = (*w).max(c.len());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str]| {
        let parts: Vec<String> = cells
            .iter()
            .zip(widths)
            .enumerate()
            .map(|(i, (c, w))| {
                if i < 2 {
                    format!("{c:<w$}")
                } else {
                    format!("{c:>w$}")
                }
            })
            .collect();
        let _ = writeln!(out, "{}", parts.join("  ").trim_end());
    };
    line(&mut out, &COLUMNS);
    for r in &body {
        let cells: Vec<&str> = r.iter().map(String::as_str).collect();
        line(&mut out, &cells);
    }
    out
}

/// CSV with a header and one row per (dataset, predictor). Values carry full
/// precision; undefined metrics are empty fields.
pub fn render_csv(rows: &[(&str, &str, &MetricReport)]) -> String {
    let mut w = csv::Writer::from_writer(Vec::new());
    let f = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
    let header = [
        "dataset",
        "predictor",
        "auc",
        "dist",
        "min_dist",
        "angle",
        "ap_ob",
        "ap",
        "samples",
        "evaluated",
    ];
    // writing into a Vec cannot fail
    w.write_record(header).expect("in-memory csv");
    for (d, p, r) in rows {
        w.write_record([
            d.to_string(),
            p.to_string(),
            f(r.auc),
            f(r.dist),
            f(r.min_dist),
            f(r.angle_deg),
            f(r.ap_ob),
            f(r.ap_inout),
            r.counts.samples.to_string(),
            r.counts.evaluated.to_string(),
        ])
        .expect("in-memory csv");
    }
    String::from_utf8(w.into_inner().expect("in-memory csv")).expect("csv output is utf-8")
}
