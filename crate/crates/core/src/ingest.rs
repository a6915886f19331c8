//! Readers and writers for every file the pipeline touches.
//!
//! Line-oriented readers never abort on a bad record: they collect
//! [`LineError`]s and return whatever parsed.

use std::collections::{BTreeMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, LineError, Result};
use crate::hha::{DepthMap, Grid, HhaImage};
use crate::model::{AnnotatedSample, Detection, GazePoint, ImageSize, PixelBox, Prediction};
use crate::prompt::GazeRecord;

fn open(path: &Path) -> Result<File> {
    File::open(path).map_err(|e| Error::io(path, e))
}

fn create(path: &Path) -> Result<BufWriter<File>> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// Depth rasters
// ---------------------------------------------------------------------------

/// Read a 16-bit single-channel PNG; depth = raw count * `scale`.
pub fn load_depth_png16(path: &Path, scale: f64) -> Result<DepthMap> {
    if !(scale.is_finite() && scale > 0.0) {
        return Err(Error::Config(format!(
            "depth scale must be positive, got {scale}"
        )));
    }
    let mut decoder = png::Decoder::new(BufReader::new(open(path)?));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let (color, depth) = {
        let info = reader.info();
        (info.color_type, info.bit_depth)
    };
    if color != png::ColorType::Grayscale || depth != png::BitDepth::Sixteen {
        return Err(Error::format(
            path,
            format!("expected 16-bit grayscale PNG, found {color:?} at {depth:?}"),
        ));
    }
    let len = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; len];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    let size = ImageSize::new(frame.width, frame.height)?;
    let values = buf[..frame.buffer_size()]
        .chunks_exact(2)
        .map(|c| f64::from(u16::from_be_bytes([c[0], c[1]])) * scale)
        .collect();
    DepthMap::new(size, values).map_err(|e| Error::format(path, e.to_string()))
}

/// Write raw 16-bit counts as a grayscale PNG.
pub fn write_depth_png16(path: &Path, size: ImageSize, counts: &[u16]) -> Result<()> {
    if counts.len() != size.pixel_count() {
        return Err(Error::invalid("pixel count does not match image size"));
    }
    let mut enc = png::Encoder::new(create(path)?, size.width, size.height);
    enc.set_color(png::ColorType::Grayscale);
    enc.set_depth(png::BitDepth::Sixteen);
    let bytes: Vec<u8> = counts.iter().flat_map(|c| c.to_be_bytes()).collect();
    let mut w = enc
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    w.write_image_data(&bytes)
        .map_err(|e| Error::format(path, e.to_string()))?;
    w.finish().map_err(|e| Error::format(path, e.to_string()))
}

/// Read a grayscale PFM (`Pf`). Rows are stored bottom-up; the sign of the
/// scale line selects the byte order (negative = little-endian).
pub fn load_depth_pfm(path: &Path) -> Result<DepthMap> {
    let mut bytes = Vec::new();
    open(path)?
        .read_to_end(&mut bytes)
        .map_err(|e| Error::io(path, e))?;
    let raster = parse_pfm(&bytes).map_err(|m| Error::format(path, m))?;
    DepthMap::new(raster.size(), raster.into_values())
        .map_err(|e| Error::format(path, e.to_string()))
}

/// Decode a grayscale PFM into a top-down raster of any size.
pub fn parse_pfm(bytes: &[u8]) -> std::result::Result<Grid<f64>, String> {
    let mut pos = 0;
    let mut token = || -> std::result::Result<String, String> {
        while pos < bytes.len() && bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err("truncated header".into());
        }
        let t = String::from_utf8_lossy(&bytes[start..pos]).into_owned();
        Ok(t)
    };
    let magic = token()?;
    match magic.as_str() {
        "Pf" => {}
        "PF" => return Err("color PFM ('PF') is not supported, expected 'Pf'".into()),
        other => return Err(format!("bad magic '{other}'")),
    }
    let w: u32 = token()?.parse().map_err(|_| "bad width")?;
    let h: u32 = token()?.parse().map_err(|_| "bad height")?;
    let scale: f64 = token()?.parse().map_err(|_| "bad scale")?;
    if scale == 0.0 || !scale.is_finite() {
        return Err("scale must be non-zero".into());
    }
    // exactly one whitespace byte separates the header from the payload
    let data = bytes.get(pos + 1..).ok_or("missing payload")?;
    let n = w as usize * h as usize;
    if data.len() < n * 4 {
        return Err(format!("payload has {} bytes, need {}", data.len(), n * 4));
    }
    let little = scale < 0.0;
    let mut values = vec![0.0; n];
    for (i, c) in data[..n * 4].chunks_exact(4).enumerate() {
        let raw = [c[0], c[1], c[2], c[3]];
        let v = if little {
            f32::from_le_bytes(raw)
        } else {
            f32::from_be_bytes(raw)
        };
        if !v.is_finite() || v < 0.0 {
            return Err(format!(
                "sample {i} is {v}; depth must be finite and non-negative"
            ));
        }
        let (row, col) = (i / w as usize, i % w as usize);
        let top_down = (h as usize - 1 - row) * w as usize + col;
        values[top_down] = f64::from(v);
    }
    let size = ImageSize::new(w, h).map_err(|e| e.to_string())?;
    Grid::from_vec(size, values).map_err(|e| e.to_string())
}

/// Write a little-endian grayscale PFM from top-down values.
pub fn write_depth_pfm(path: &Path, size: ImageSize, values: &[f32]) -> Result<()> {
    if values.len() != size.pixel_count() {
        return Err(Error::invalid("pixel count does not match image size"));
    }
    let mut w = create(path)?;
    let (cols, rows) = (size.width as usize, size.height as usize);
    let mut out = format!("Pf\n{} {}\n-1.0\n", size.width, size.height).into_bytes();
    for row in (0..rows).rev() {
        for v in &values[row * cols..(row + 1) * cols] {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    w.write_all(&out).map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

// ---------------------------------------------------------------------------
// HHA images
// ---------------------------------------------------------------------------

/// 8-bit RGB PNG: R = disparity, G = height, B = angle.
pub fn write_hha_png(hha: &HhaImage, path: &Path) -> Result<()> {
    let size = hha.size();
    let mut enc = png::Encoder::new(create(path)?, size.width, size.height);
    enc.set_color(png::ColorType::Rgb);
    enc.set_depth(png::BitDepth::Eight);
    let mut w = enc
        .write_header()
        .map_err(|e| Error::format(path, e.to_string()))?;
    w.write_image_data(&hha.to_rgb8())
        .map_err(|e| Error::format(path, e.to_string()))?;
    w.finish().map_err(|e| Error::format(path, e.to_string()))
}

pub fn read_hha_png(path: &Path) -> Result<HhaImage> {
    let mut decoder = png::Decoder::new(BufReader::new(open(path)?));
    decoder.set_transformations(png::Transformations::IDENTITY);
    let mut reader = decoder
        .read_info()
        .map_err(|e| Error::format(path, e.to_string()))?;
    let len = reader
        .output_buffer_size()
        .ok_or_else(|| Error::format(path, "image too large"))?;
    let mut buf = vec![0u8; len];
    let frame = reader
        .next_frame(&mut buf)
        .map_err(|e| Error::format(path, e.to_string()))?;
    if frame.color_type != png::ColorType::Rgb || frame.bit_depth != png::BitDepth::Eight {
        return Err(Error::format(
            path,
            format!(
                "expected 8-bit RGB, found {:?} at {:?}",
                frame.color_type, frame.bit_depth
            ),
        ));
    }
    let size = ImageSize::new(frame.width, frame.height)?;
    HhaImage::from_rgb8(size, &buf[..frame.buffer_size()])
}

// ---------------------------------------------------------------------------
// Annotations
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Test,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DatasetManifest {
    pub name: String,
    pub split: Split,
    pub samples: Vec<AnnotatedSample>,
    pub vocabulary: Vec<String>,
}

impl DatasetManifest {
    pub fn get(&self, sample_id: &str) -> Option<&AnnotatedSample> {
        self.samples.iter().find(|s| s.sample_id == sample_id)
    }

    pub fn index(&self) -> std::collections::HashMap<&str, &AnnotatedSample> {
        self.samples
            .iter()
            .map(|s| (s.sample_id.as_str(), s))
            .collect()
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawObject {
    bbox: [f64; 4],
    class: String,
}

/// On-disk annotation line.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct RawAnnotation {
    sample_id: String,
    image: PathBuf,
    #[serde(default)]
    depth: Option<PathBuf>,
    width: u32,
    height: u32,
    head_box: [f64; 4],
    eye: [f64; 2],
    #[serde(default)]
    gaze_points: Vec<[f64; 2]>,
    in_frame: bool,
    #[serde(default)]
    gazed_object: Option<RawObject>,
}

#[derive(Debug, Clone)]
pub struct AnnotationLoad {
    pub manifest: DatasetManifest,
    pub errors: Vec<LineError>,
    /// Boxes or points that had to be clamped into the image.
    pub clamped: usize,
}

fn convert_annotation(raw: RawAnnotation, clamped: &mut usize) -> Result<AnnotatedSample> {
    let size = ImageSize::new(raw.width, raw.height)?;
    let mut clamp_box = |b: [f64; 4]| -> Result<PixelBox> {
        let pb = PixelBox::try_from(b)?;
        let (c, moved) = pb.clamp_to(size);
        *clamped += usize::from(moved);
        Ok(c)
    };
    let head_box = clamp_box(raw.head_box)?;
    let gazed_object = match raw.gazed_object {
        Some(o) => Some(Detection::new(clamp_box(o.bbox)?, o.class, 1.0)?),
        None => None,
    };
    let mut point = |p: [f64; 2]| -> Result<GazePoint> {
        if !p[0].is_finite() || !p[1].is_finite() {
            return Err(Error::invalid("point coordinates must be finite"));
        }
        let g = GazePoint::clamped(p[0], p[1]);
        *clamped += usize::from(g.x != p[0] || g.y != p[1]);
        Ok(g)
    };
    let eye_point = point(raw.eye)?;
    let gaze_points = raw
        .gaze_points
        .into_iter()
        .map(&mut point)
        .collect::<Result<Vec<_>>>()?;
    let sample = AnnotatedSample {
        sample_id: raw.sample_id,
        image_path: raw.image,
        depth_path: raw.depth,
        image_size: size,
        head_box,
        eye_point,
        gaze_points,
        in_frame: raw.in_frame,
        gazed_object,
    };
    sample.validate()?;
    Ok(sample)
}

fn to_raw(s: &AnnotatedSample) -> RawAnnotation {
    RawAnnotation {
        sample_id: s.sample_id.clone(),
        image: s.image_path.clone(),
        depth: s.depth_path.clone(),
        width: s.image_size.width,
        height: s.image_size.height,
        head_box: s.head_box.into(),
        eye: s.eye_point.into(),
        gaze_points: s.gaze_points.iter().map(|&p| p.into()).collect(),
        in_frame: s.in_frame,
        gazed_object: s.gazed_object.as_ref().map(|o| RawObject {
            bbox: o.bbox.into(),
            class: o.class_label.clone(),
        }),
    }
}

/// Parse annotation JSONL from any reader.
pub fn parse_annotations(reader: impl BufRead, name: &str) -> AnnotationLoad {
    let mut samples = Vec::new();
    let mut errors = Vec::new();
    let mut clamped = 0;
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                errors.push(LineError {
                    line: line_no,
                    message: e.to_string(),
                });
                break;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        let parsed = serde_json::from_str::<RawAnnotation>(&line)
            .map_err(|e| e.to_string())
            .and_then(|raw| convert_annotation(raw, &mut clamped).map_err(|e| e.to_string()));
        match parsed {
            Ok(s) if !seen.insert(s.sample_id.clone()) => errors.push(LineError {
                line: line_no,
                message: format!("duplicate sample_id '{}'", s.sample_id),
            }),
            Ok(s) => samples.push(s),
            Err(message) => errors.push(LineError {
                line: line_no,
                message,
            }),
        }
    }
    let mut vocabulary: Vec<String> = Vec::new();
    for s in &samples {
        if let Some(o) = &s.gazed_object {
            if !vocabulary.contains(&o.class_label) {
                vocabulary.push(o.class_label.clone());
            }
        }
    }
    AnnotationLoad {
        manifest: DatasetManifest {
            name: name.to_string(),
            split: Split::Test,
            samples,
            vocabulary,
        },
        errors,
        clamped,
    }
}

/// Load annotation JSONL. The manifest takes its name from the file stem and
/// its vocabulary from the gazed-object classes present; use
/// [`load_vocabulary`] to supply a fixed class list.
pub fn load_annotations(path: &Path) -> Result<AnnotationLoad> {
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(parse_annotations(BufReader::new(open(path)?), &name))
}

pub fn write_annotations(samples: &[AnnotatedSample], path: &Path) -> Result<()> {
    write_jsonl(samples.iter().map(to_raw), path)
}

/// One class per line; blank lines ignored; duplicates rejected.
pub fn load_vocabulary(path: &Path) -> Result<Vec<String>> {
    let reader = BufReader::new(open(path)?);
    let mut vocab = Vec::new();
    let mut seen = HashSet::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        let class = line.trim();
        if class.is_empty() {
            continue;
        }
        if !seen.insert(class.to_string()) {
            return Err(Error::format(
                path,
                format!("line {}: duplicate class '{class}'", i + 1),
            ));
        }
        vocab.push(class.to_string());
    }
    Ok(vocab)
}

// ---------------------------------------------------------------------------
// Detections
// ---------------------------------------------------------------------------

/// Detector output per sample, in detector order.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionSet {
    pub by_sample: BTreeMap<String, Vec<Detection>>,
}

impl DetectionSet {
    pub fn get(&self, sample_id: &str) -> &[Detection] {
        self.by_sample
            .get(sample_id)
            .map(Vec::as_slice)
            .unwrap_or(&[])
    }

    /// Clamp boxes of samples present in `manifest` to their image bounds.
    /// Returns how many boxes moved.
    pub fn clamp_to(&mut self, manifest: &DatasetManifest) -> usize {
        let index = manifest.index();
        let mut moved = 0;
        for (id, dets) in self.by_sample.iter_mut() {
            if let Some(s) = index.get(id.as_str()) {
                for d in dets.iter_mut() {
                    let (b, m) = d.bbox.clamp_to(s.image_size);
                    d.bbox = b;
                    moved += usize::from(m);
                }
            }
        }
        moved
    }
}

#[derive(Debug, Deserialize)]
struct RawDetection {
    bbox: [f64; 4],
    class: String,
    score: f64,
}

#[derive(Debug, Clone)]
pub struct DetectionLoad {
    pub detections: DetectionSet,
    /// Record-level problems; each names its sample_id.
    pub errors: Vec<String>,
}

pub fn parse_detections(text: &str) -> std::result::Result<DetectionLoad, String> {
    let top: serde_json::Map<String, serde_json::Value> =
        serde_json::from_str(text).map_err(|e| e.to_string())?;
    let mut set = DetectionSet::default();
    let mut errors = Vec::new();
    for (id, value) in top {
        let entries = match value {
            serde_json::Value::Array(a) => a,
            _ => {
                errors.push(format!("{id}: expected an array of detections"));
                continue;
            }
        };
        let mut dets = Vec::with_capacity(entries.len());
        for (k, entry) in entries.into_iter().enumerate() {
            let det = serde_json::from_value::<RawDetection>(entry)
                .map_err(|e| e.to_string())
                .and_then(|r| {
                    let b = PixelBox::try_from(r.bbox).map_err(|e| e.to_string())?;
                    Detection::new(b, r.class, r.score).map_err(|e| e.to_string())
                });
            match det {
                Ok(d) => dets.push(d),
                Err(e) => errors.push(format!("{id}[{k}]: {e}")),
            }
        }
        set.by_sample.insert(id, dets);
    }
    Ok(DetectionLoad {
        detections: set,
        errors,
    })
}

/// Load a detection JSON object mapping sample_id to detections.
pub fn load_detections(path: &Path) -> Result<DetectionLoad> {
    let mut text = String::new();
    open(path)?
        .read_to_string(&mut text)
        .map_err(|e| Error::io(path, e))?;
    parse_detections(&text).map_err(|m| Error::format(path, m))
}

// ---------------------------------------------------------------------------
// JSONL records and predictions
// ---------------------------------------------------------------------------

fn write_jsonl<T: Serialize>(items: impl IntoIterator<Item = T>, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    for item in items {
        serde_json::to_writer(&mut w, &item).map_err(|e| Error::format(path, e.to_string()))?;
        w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

fn read_jsonl<T: serde::de::DeserializeOwned>(
    reader: impl BufRead,
    check: impl Fn(&T) -> Result<()>,
) -> (Vec<T>, Vec<LineError>) {
    let mut items = Vec::new();
    let mut errors = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line_no = i + 1;
        let line = match line {
            Ok(l) => l,
            Err(e) => {
                errors.push(LineError {
                    line: line_no,
                    message: e.to_string(),
                });
                break;
            }
        };
        if line.trim().is_empty() {
            continue;
        }
        match serde_json::from_str::<T>(&line)
            .map_err(|e| e.to_string())
            .and_then(|v| check(&v).map(|_| v).map_err(|e| e.to_string()))
        {
            Ok(v) => items.push(v),
            Err(message) => errors.push(LineError {
                line: line_no,
                message,
            }),
        }
    }
    (items, errors)
}

pub fn write_records(records: &[GazeRecord], path: &Path) -> Result<()> {
    write_jsonl(records, path)
}

pub fn read_records(path: &Path) -> Result<(Vec<GazeRecord>, Vec<LineError>)> {
    Ok(read_jsonl(BufReader::new(open(path)?), |_| Ok(())))
}

pub fn write_predictions(preds: &[Prediction], path: &Path) -> Result<()> {
    write_jsonl(preds, path)
}

pub fn parse_predictions(reader: impl BufRead) -> (Vec<Prediction>, Vec<LineError>) {
    read_jsonl(reader, Prediction::validate)
}

pub fn read_predictions(path: &Path) -> Result<(Vec<Prediction>, Vec<LineError>)> {
    Ok(parse_predictions(BufReader::new(open(path)?)))
}

/// One line of a raw model-response file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResponseLine {
    pub sample_id: String,
    pub text: String,
    #[serde(default)]
    pub task: Option<crate::model::Task>,
    #[serde(default)]
    pub out_score: Option<f64>,
}

pub fn read_responses(path: &Path) -> Result<(Vec<ResponseLine>, Vec<LineError>)> {
    Ok(read_jsonl(BufReader::new(open(path)?), |_| Ok(())))
}

pub fn write_json<T: Serialize>(value: &T, path: &Path) -> Result<()> {
    let mut w = create(path)?;
    serde_json::to_writer_pretty(&mut w, value).map_err(|e| Error::format(path, e.to_string()))?;
    w.write_all(b"\n").map_err(|e| Error::io(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{NormBox, Task};
    use crate::prompt::{build_record, PromptConfig};

    fn tmp() -> tempfile::TempDir {
        tempfile::tempdir().unwrap()
    }

    #[test]
    fn png16_round_trip_and_scale() {
        let dir = tmp();
        let p = dir.path().join("d.png");
        let size = ImageSize::new(4, 3).unwrap();
        let counts: Vec<u16> = (0..12).map(|i| i * 1000).collect();
        write_depth_png16(&p, size, &counts).unwrap();
        let d = load_depth_png16(&p, 0.001).unwrap();
        assert_eq!(d.size(), size);
        assert_eq!(d.values()[1], 1.0);
        let raw = load_depth_png16(&p, 1.0).unwrap();
        let back: Vec<u16> = raw.values().iter().map(|&v| v as u16).collect();
        assert_eq!(back, counts);

        write_depth_png16(&p, size, &[0; 12]).unwrap();
        assert!(load_depth_png16(&p, 1.0)
            .unwrap()
            .values()
            .iter()
            .all(|&v| v == 0.0));
        assert!(load_depth_png16(&p, 0.0).is_err());
    }

    #[test]
    fn png16_rejects_rgb() {
        let dir = tmp();
        let p = dir.path().join("rgb.png");
        let hha = HhaImage::from_rgb8(ImageSize::new(3, 3).unwrap(), &[7; 27]).unwrap();
        write_hha_png(&hha, &p).unwrap();
        match load_depth_png16(&p, 1.0) {
            Err(Error::Format { message, .. }) => assert!(message.contains("Rgb"), "{message}"),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn pfm_row_flip() {
        let mut bytes = b"Pf\n3 3\n-1.0\n".to_vec();
        // bottom-up rows: 7 8 9 / 4 5 6 / 1 2 3
        for v in [7.0f32, 8.0, 9.0, 4.0, 5.0, 6.0, 1.0, 2.0, 3.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        let d = parse_pfm(&bytes).unwrap();
        assert_eq!(d.values(), &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0, 9.0]);

        let mut be = b"Pf\n3 3\n1.0\n".to_vec();
        for v in [3.0f32; 9] {
            be.extend_from_slice(&v.to_be_bytes());
        }
        assert!(parse_pfm(&be).unwrap().values().iter().all(|&v| v == 3.0));
    }

    #[test]
    fn pfm_two_by_two_flip() {
        let mut bytes = b"Pf\n2 2\n-1.0\n".to_vec();
        for v in [1.0f32, 2.0, 3.0, 4.0] {
            bytes.extend_from_slice(&v.to_le_bytes());
        }
        assert_eq!(parse_pfm(&bytes).unwrap().values(), &[3.0, 4.0, 1.0, 2.0]);

        // too small to encode
        let dir = tmp();
        let p = dir.path().join("small.pfm");
        std::fs::write(&p, &bytes).unwrap();
        assert!(matches!(load_depth_pfm(&p), Err(Error::Format { .. })));
    }

    #[test]
    fn pfm_rejects_bad_input() {
        assert!(parse_pfm(b"PF\n3 3\n-1.0\n").unwrap_err().contains("color"));
        assert!(parse_pfm(b"P6\n3 3\n-1.0\n").unwrap_err().contains("magic"));
        let mut nan = b"Pf\n3 3\n-1.0\n".to_vec();
        for _ in 0..9 {
            nan.extend_from_slice(&f32::NAN.to_le_bytes());
        }
        assert!(parse_pfm(&nan).is_err());
        let mut neg = b"Pf\n3 3\n-1.0\n".to_vec();
        for _ in 0..9 {
            neg.extend_from_slice(&(-1.0f32).to_le_bytes());
        }
        assert!(parse_pfm(&neg).is_err());
        assert!(parse_pfm(b"Pf\n3 3\n-1.0\n\0\0").is_err());
    }

    #[test]
    fn pfm_round_trip() {
        let dir = tmp();
        let p = dir.path().join("d.pfm");
        let size = ImageSize::new(4, 3).unwrap();
        let vals: Vec<f32> = (0..12).map(|i| i as f32 * 0.25).collect();
        write_depth_pfm(&p, size, &vals).unwrap();
        let d = load_depth_pfm(&p).unwrap();
        let back: Vec<f32> = d.values().iter().map(|&v| v as f32).collect();
        assert_eq!(back, vals);
    }

    #[test]
    fn hha_png_round_trip() {
        let dir = tmp();
        let p = dir.path().join("h.png");
        let size = ImageSize::new(5, 4).unwrap();
        let rgb: Vec<u8> = (0..60).map(|i| (i * 4) as u8).collect();
        let hha = HhaImage::from_rgb8(size, &rgb).unwrap();
        write_hha_png(&hha, &p).unwrap();
        assert_eq!(read_hha_png(&p).unwrap(), hha);
    }

    const LINE_IN: &str = r#"{"sample_id":"a","image":"a.jpg","depth":null,"width":100,"height":50,"head_box":[10,10,20,20],"eye":[0.15,0.3],"gaze_points":[[0.1,0.2],[0.2,0.2],[0.3,0.2],[0.4,0.2],[0.5,0.2],[0.6,0.2],[0.7,0.2],[0.8,0.2],[0.9,0.2],[1.0,0.2]],"in_frame":true,"gazed_object":{"bbox":[40,10,60,30],"class":"cup"}}"#;
    const LINE_OUT: &str = r#"{"sample_id":"b","image":"b.jpg","width":100,"height":50,"head_box":[10,10,120,20],"eye":[0.15,0.3],"in_frame":false}"#;

    #[test]
    fn annotations_parse() {
        let text = format!("{LINE_IN}\n\n{LINE_OUT}\nnot json\n{LINE_IN}\n");
        let load = parse_annotations(text.as_bytes(), "t");
        assert_eq!(load.manifest.samples.len(), 2);
        let a = &load.manifest.samples[0];
        assert_eq!(a.gaze_points.len(), 10);
        assert_eq!(a.gaze_points[9], GazePoint::new(1.0, 0.2).unwrap());
        assert_eq!(a.gazed_object.as_ref().unwrap().class_label, "cup");
        let b = &load.manifest.samples[1];
        assert!(!b.in_frame && b.gaze_points.is_empty());
        assert_eq!(b.head_box.x2, 100.0);
        assert_eq!(load.clamped, 1);
        assert_eq!(load.errors.len(), 2);
        assert_eq!(load.errors[0].line, 4);
        assert!(load.errors[1].message.contains("duplicate"));
        assert_eq!(load.manifest.vocabulary, vec!["cup".to_string()]);

        let empty = parse_annotations(&b""[..], "e");
        assert!(empty.manifest.samples.is_empty() && empty.errors.is_empty());
    }

    #[test]
    fn annotations_round_trip() {
        let dir = tmp();
        let p = dir.path().join("ann.jsonl");
        let load = parse_annotations(format!("{LINE_IN}\n{LINE_OUT}\n").as_bytes(), "ann");
        write_annotations(&load.manifest.samples, &p).unwrap();
        let back = load_annotations(&p).unwrap();
        assert_eq!(back.manifest.samples, load.manifest.samples);
        assert_eq!(back.manifest.name, "ann");
    }

    #[test]
    fn detections_parse() {
        let text = r#"{
            "a": [{"bbox":[0,0,10,10],"class":"cup","score":1.0},
                  {"bbox":[5,0,1,10],"class":"cup","score":0.5},
                  {"bbox":[0,0,500,10],"class":"tv","score":0.3}],
            "empty": [],
            "unknown": [{"bbox":[1,1,2,2],"class":"x","score":0.9}]
        }"#;
        let mut load = parse_detections(text).unwrap();
        assert_eq!(load.errors.len(), 1);
        assert!(load.errors[0].starts_with("a[1]"));
        assert_eq!(load.detections.get("a").len(), 2);
        assert_eq!(load.detections.get("a")[0].score, 1.0);
        assert!(load.detections.get("empty").is_empty());
        assert_eq!(load.detections.get("unknown").len(), 1);

        let manifest = parse_annotations(LINE_IN.as_bytes(), "m").manifest;
        assert_eq!(load.detections.clamp_to(&manifest), 1);
        assert_eq!(load.detections.get("a")[1].bbox.x2, 100.0);
    }

    #[test]
    fn record_and_prediction_files() {
        let dir = tmp();
        let p = dir.path().join("r.jsonl");
        write_records(&[], &p).unwrap();
        assert_eq!(std::fs::read(&p).unwrap().len(), 0);

        let s = parse_annotations(LINE_IN.as_bytes(), "m").manifest.samples;
        let cfg = PromptConfig::default();
        let recs = vec![
            build_record(&s[0], Task::GazeTarget, &cfg).unwrap(),
            build_record(&s[0], Task::GazeObject, &cfg).unwrap(),
        ];
        write_records(&recs, &p).unwrap();
        let (back, errs) = read_records(&p).unwrap();
        assert!(errs.is_empty());
        assert_eq!(back, recs);

        let pred = Prediction {
            sample_id: "a".into(),
            task: Task::GazeTarget,
            boxes: vec![NormBox::new(1, 2, 3, 4).unwrap()],
            class_label: None,
            out_of_frame: false,
            out_score: Some(0.25),
            raw_text: "<box_start>(1,2),(3,4)<box_end>".into(),
            coords_clamped: false,
        };
        let pp = dir.path().join("p.jsonl");
        write_predictions(std::slice::from_ref(&pred), &pp).unwrap();
        let line = std::fs::read_to_string(&pp).unwrap();
        assert_eq!(
            line.trim(),
            r#"{"sample_id":"a","task":"gaze_target","boxes":[[1,2,3,4]],"class":null,"out_of_frame":false,"out_score":0.25,"raw_text":"<box_start>(1,2),(3,4)<box_end>"}"#
        );
        let text = format!(
            "{}\n{{\"task\":\"gaze_target\",\"boxes\":[]}}\n{}",
            line.trim(),
            line.trim()
        );
        let (preds, errs) = parse_predictions(text.as_bytes());
        assert_eq!(preds, vec![pred.clone(), pred]);
        assert_eq!(errs.len(), 1);
        assert_eq!(errs[0].line, 2);
    }

    #[test]
    fn vocabulary_file() {
        let dir = tmp();
        let p = dir.path().join("v.txt");
        std::fs::write(&p, "cup\n\ntv\n").unwrap();
        assert_eq!(load_vocabulary(&p).unwrap(), vec!["cup", "tv"]);
        std::fs::write(&p, "cup\ncup\n").unwrap();
        assert!(load_vocabulary(&p).is_err());
    }
}
