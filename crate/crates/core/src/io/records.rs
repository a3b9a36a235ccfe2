//! Line-delimited annotation and detection files.
//!
//! Every file starts with header lines
//!
//! ```text
//! #schema pal.detections 1
//! #classes car,bus,person
//! ```
//!
//! followed by one JSON object per line, discriminated by its `type` field.
//! Other `#key value` lines are kept verbatim as provenance headers; blank
//! lines are ignored.

use std::collections::{BTreeSet, HashSet};
use std::fmt::Write as _;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{PalError, Result};
use crate::types::{BBox, ClassId, DetectionRecord, ImageId};

pub const GROUND_TRUTH_SCHEMA: &str = "pal.groundtruth";
pub const DETECTIONS_SCHEMA: &str = "pal.detections";
pub const PROPOSALS_SCHEMA: &str = "pal.proposals";
pub const MATCHED_SCHEMA: &str = "pal.matched";
pub const SCORES_SCHEMA: &str = "pal.scores";
pub const SCHEMA_VERSION: u32 = 1;

const PROB_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Header {
    pub schema: String,
    pub version: u32,
    pub classes: Vec<String>,
    /// Additional `#key value` lines, in file order.
    pub extra: Vec<(String, String)>,
}

impl Header {
    pub fn new(schema: &str, classes: &[String]) -> Self {
        Header {
            schema: schema.to_string(),
            version: SCHEMA_VERSION,
            classes: classes.to_vec(),
            extra: Vec::new(),
        }
    }

    fn render(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "#schema {} {}", self.schema, self.version);
        let _ = writeln!(out, "#classes {}", self.classes.join(","));
        for (k, v) in &self.extra {
            let _ = writeln!(out, "#{k} {v}");
        }
        out
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub image_id: ImageId,
    pub width: u32,
    pub height: u32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Annotation {
    pub id: u64,
    pub image_id: ImageId,
    pub class_id: ClassId,
    pub bbox: BBox,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub image_id: ImageId,
    pub class_id: ClassId,
    pub bbox: BBox,
    pub confidence: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub class_probabilities: Option<Vec<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub image_id: ImageId,
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolImage {
    pub image_id: ImageId,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum GroundTruthLine {
    Image(ImageInfo),
    Annotation(Annotation),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum DetectionLine {
    Image(PoolImage),
    Detection(Detection),
    Proposal(Proposal),
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum MatchedLine {
    Image(PoolImage),
    Detection(DetectionRecord),
}

/// Ground-truth boxes for a set of images.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GroundTruthSet {
    pub classes: Vec<String>,
    pub images: Vec<ImageInfo>,
    pub annotations: Vec<Annotation>,
}

impl GroundTruthSet {
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for img in &self.images {
            if !ids.insert(img.image_id) {
                return Err(PalError::Validation(format!("duplicate image id {}", img.image_id)));
            }
        }
        let mut ann_ids = HashSet::new();
        for ann in &self.annotations {
            if !ann_ids.insert(ann.id) {
                return Err(PalError::Validation(format!("duplicate annotation id {}", ann.id)));
            }
            if !ids.contains(&ann.image_id) {
                return Err(PalError::Validation(format!(
                    "annotation {} references unknown image {}",
                    ann.id, ann.image_id
                )));
            }
            check_class(ann.class_id, self.classes.len())?;
            ann.bbox.validate().map_err(|e| e.context(format!("annotation {}", ann.id)))?;
        }
        Ok(())
    }

    pub fn image_ids(&self) -> BTreeSet<ImageId> {
        self.images.iter().map(|i| i.image_id).collect()
    }
}

/// A detector's output over a pool: final detections plus the raw proposals
/// that suppression collapsed into them.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionDump {
    pub classes: Vec<String>,
    /// Pool index: every image inference ran on, with or without detections.
    pub images: Vec<ImageId>,
    pub final_detections: Vec<Detection>,
    pub pre_nms_proposals: Vec<Proposal>,
}

impl DetectionDump {
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for &id in &self.images {
            if !ids.insert(id) {
                return Err(PalError::Validation(format!("duplicate image id {id}")));
            }
        }
        let n_classes = self.classes.len();
        for (i, det) in self.final_detections.iter().enumerate() {
            validate_detection(
                i,
                det.image_id,
                det.class_id,
                &det.bbox,
                det.confidence,
                det.class_probabilities.as_deref(),
                n_classes,
                &ids,
            )?;
        }
        for (i, p) in self.pre_nms_proposals.iter().enumerate() {
            if !ids.contains(&p.image_id) {
                return Err(PalError::Validation(format!(
                    "proposal {i} references image {} missing from the pool index",
                    p.image_id
                )));
            }
            check_confidence(p.confidence).map_err(|e| e.context(format!("proposal {i}")))?;
            p.bbox.validate().map_err(|e| e.context(format!("proposal {i}")))?;
        }
        Ok(())
    }
}

/// Detections of one pool after matching: pre-NMS counts filled in and, for
/// labelled pools, TP/FP labels.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct MatchedPool {
    pub classes: Vec<String>,
    pub images: Vec<ImageId>,
    pub records: Vec<DetectionRecord>,
}

impl MatchedPool {
    pub fn validate(&self) -> Result<()> {
        let mut ids = HashSet::new();
        for &id in &self.images {
            if !ids.insert(id) {
                return Err(PalError::Validation(format!("duplicate image id {id}")));
            }
        }
        for (i, r) in self.records.iter().enumerate() {
            validate_detection(
                i,
                r.image_id,
                r.class_id,
                &r.bbox,
                r.confidence,
                r.class_probabilities.as_deref(),
                self.classes.len(),
                &ids,
            )?;
        }
        Ok(())
    }
}

fn check_class(class_id: ClassId, n_classes: usize) -> Result<()> {
    if (class_id as usize) < n_classes {
        Ok(())
    } else {
        Err(PalError::Validation(format!(
            "class_id {class_id} outside declared category list of {n_classes}"
        )))
    }
}

fn check_confidence(c: f64) -> Result<()> {
    if (0.0..=1.0).contains(&c) {
        Ok(())
    } else {
        Err(PalError::Validation(format!("confidence {c} outside [0, 1]")))
    }
}

#[allow(clippy::too_many_arguments)]
fn validate_detection(
    index: usize,
    image_id: ImageId,
    class_id: ClassId,
    bbox: &BBox,
    confidence: f64,
    probs: Option<&[f64]>,
    n_classes: usize,
    images: &HashSet<ImageId>,
) -> Result<()> {
    let ctx = |e: PalError| e.context(format!("detection {index}"));
    if !images.contains(&image_id) {
        return Err(ctx(PalError::Validation(format!(
            "image {image_id} missing from the pool index"
        ))));
    }
    check_class(class_id, n_classes).map_err(ctx)?;
    check_confidence(confidence).map_err(ctx)?;
    bbox.validate().map_err(ctx)?;
    if let Some(p) = probs {
        if p.len() != n_classes {
            return Err(ctx(PalError::Validation(format!(
                "class_probabilities has {} entries, expected {n_classes}",
                p.len()
            ))));
        }
        if p.iter().any(|&v| !(v >= 0.0) || !v.is_finite()) {
            return Err(ctx(PalError::Validation("negative class probability".into())));
        }
        let sum: f64 = p.iter().sum();
        if (sum - 1.0).abs() > PROB_SUM_TOL {
            return Err(ctx(PalError::Validation(format!(
                "class_probabilities sum to {sum}, expected 1"
            ))));
        }
    }
    Ok(())
}

fn parse_lines<T: DeserializeOwned>(path: &Path, schema: &str) -> Result<(Header, Vec<T>)> {
    let file = File::open(path).map_err(|e| PalError::io(path, e))?;
    parse_reader(BufReader::new(file), path, schema)
}

fn parse_reader<T: DeserializeOwned, R: BufRead>(
    reader: R,
    path: &Path,
    schema: &str,
) -> Result<(Header, Vec<T>)> {
    let perr = |line: usize, msg: String| PalError::Parse {
        path: PathBuf::from(path),
        line,
        msg,
    };
    let mut header = Header::default();
    let mut saw_schema = false;
    let mut saw_classes = false;
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let lineno = idx + 1;
        let line = line.map_err(|e| PalError::io(path, e))?;
        let line = line.trim();
        if line.is_empty() {
            continue;
        }
        if let Some(rest) = line.strip_prefix('#') {
            if !records.is_empty() {
                return Err(perr(lineno, "header line after first record".into()));
            }
            let (key, value) = rest.split_once(char::is_whitespace).unwrap_or((rest, ""));
            let value = value.trim();
            match key {
                "schema" => {
                    let mut parts = value.split_whitespace();
                    let name = parts.next().unwrap_or_default();
                    if name != schema {
                        return Err(perr(lineno, format!("expected schema {schema}, found {name:?}")));
                    }
                    let version: u32 = parts
                        .next()
                        .and_then(|v| v.parse().ok())
                        .ok_or_else(|| perr(lineno, "schema version missing or not an integer".into()))?;
                    if version != SCHEMA_VERSION {
                        return Err(perr(lineno, format!("unsupported schema version {version}")));
                    }
                    header.schema = name.to_string();
                    header.version = version;
                    saw_schema = true;
                }
                "classes" => {
                    header.classes = if value.is_empty() {
                        Vec::new()
                    } else {
                        value.split(',').map(|s| s.trim().to_string()).collect()
                    };
                    saw_classes = true;
                }
                _ => header.extra.push((key.to_string(), value.to_string())),
            }
            continue;
        }
        if !saw_schema || !saw_classes {
            return Err(perr(lineno, "record before #schema and #classes headers".into()));
        }
        let rec: T = serde_json::from_str(line).map_err(|e| perr(lineno, format!("malformed record: {e}")))?;
        records.push(rec);
    }
    if !saw_schema {
        return Err(perr(0, "missing #schema header".into()));
    }
    if !saw_classes {
        return Err(perr(0, "missing #classes header".into()));
    }
    Ok((header, records))
}

fn write_lines<T: Serialize>(path: &Path, header: &Header, records: &[T]) -> Result<()> {
    let file = File::create(path).map_err(|e| PalError::io(path, e))?;
    let mut w = BufWriter::new(file);
    let io = |e| PalError::io(path, e);
    w.write_all(header.render().as_bytes()).map_err(io)?;
    for r in records {
        let line = serde_json::to_string(r).map_err(|e| PalError::Validation(e.to_string()))?;
        w.write_all(line.as_bytes()).map_err(io)?;
        w.write_all(b"\n").map_err(io)?;
    }
    w.flush().map_err(io)
}

fn with_path(path: &Path) -> impl Fn(PalError) -> PalError + '_ {
    move |e| match e {
        e @ (PalError::Parse { .. } | PalError::Io { .. }) => e,
        e => e.context(path.display().to_string()),
    }
}

pub fn load_ground_truth(path: impl AsRef<Path>) -> Result<GroundTruthSet> {
    let path = path.as_ref();
    let (header, lines) = parse_lines::<GroundTruthLine>(path, GROUND_TRUTH_SCHEMA)?;
    let mut gt = GroundTruthSet {
        classes: header.classes,
        ..Default::default()
    };
    for l in lines {
        match l {
            GroundTruthLine::Image(i) => gt.images.push(i),
            GroundTruthLine::Annotation(a) => gt.annotations.push(a),
        }
    }
    gt.validate().map_err(with_path(path))?;
    Ok(gt)
}

pub fn write_ground_truth(gt: &GroundTruthSet, path: impl AsRef<Path>) -> Result<()> {
    let lines: Vec<GroundTruthLine> = gt
        .images
        .iter()
        .copied()
        .map(GroundTruthLine::Image)
        .chain(gt.annotations.iter().cloned().map(GroundTruthLine::Annotation))
        .collect();
    write_lines(path.as_ref(), &Header::new(GROUND_TRUTH_SCHEMA, &gt.classes), &lines)
}

/// Loads a detection file. Proposal records may live in the same file or be
/// merged in later with [`load_proposals`].
pub fn load_detection_dump(path: impl AsRef<Path>) -> Result<DetectionDump> {
    let path = path.as_ref();
    let (header, lines) = parse_lines::<DetectionLine>(path, DETECTIONS_SCHEMA)?;
    let mut dump = DetectionDump {
        classes: header.classes,
        ..Default::default()
    };
    for l in lines {
        match l {
            DetectionLine::Image(i) => dump.images.push(i.image_id),
            DetectionLine::Detection(d) => dump.final_detections.push(d),
            DetectionLine::Proposal(p) => dump.pre_nms_proposals.push(p),
        }
    }
    dump.validate().map_err(with_path(path))?;
    Ok(dump)
}

pub fn write_detection_dump(dump: &DetectionDump, path: impl AsRef<Path>) -> Result<()> {
    let lines: Vec<DetectionLine> = dump
        .images
        .iter()
        .map(|&image_id| DetectionLine::Image(PoolImage { image_id }))
        .chain(dump.final_detections.iter().cloned().map(DetectionLine::Detection))
        .chain(dump.pre_nms_proposals.iter().cloned().map(DetectionLine::Proposal))
        .collect();
    write_lines(path.as_ref(), &Header::new(DETECTIONS_SCHEMA, &dump.classes), &lines)
}

/// Loads a stand-alone proposal file. Its class list must match `classes`.
pub fn load_proposals(path: impl AsRef<Path>, classes: &[String]) -> Result<Vec<Proposal>> {
    let path = path.as_ref();
    let (header, lines) = parse_lines::<DetectionLine>(path, PROPOSALS_SCHEMA)?;
    if header.classes != classes {
        return Err(with_path(path)(PalError::Validation(
            "class list differs from the detection file".into(),
        )));
    }
    lines
        .into_iter()
        .enumerate()
        .map(|(i, l)| match l {
            DetectionLine::Proposal(p) => Ok(p),
            _ => Err(with_path(path)(PalError::Validation(format!(
                "record {i} is not a proposal"
            )))),
        })
        .collect()
}

pub fn write_proposals(classes: &[String], proposals: &[Proposal], path: impl AsRef<Path>) -> Result<()> {
    let lines: Vec<DetectionLine> = proposals.iter().cloned().map(DetectionLine::Proposal).collect();
    write_lines(path.as_ref(), &Header::new(PROPOSALS_SCHEMA, classes), &lines)
}

pub fn load_matched(path: impl AsRef<Path>) -> Result<MatchedPool> {
    let path = path.as_ref();
    let (header, lines) = parse_lines::<MatchedLine>(path, MATCHED_SCHEMA)?;
    let mut pool = MatchedPool {
        classes: header.classes,
        ..Default::default()
    };
    for l in lines {
        match l {
            MatchedLine::Image(i) => pool.images.push(i.image_id),
            MatchedLine::Detection(d) => pool.records.push(d),
        }
    }
    pool.validate().map_err(with_path(path))?;
    Ok(pool)
}

pub fn write_matched(pool: &MatchedPool, path: impl AsRef<Path>) -> Result<()> {
    let lines: Vec<MatchedLine> = pool
        .images
        .iter()
        .map(|&image_id| MatchedLine::Image(PoolImage { image_id }))
        .chain(pool.records.iter().cloned().map(MatchedLine::Detection))
        .collect();
    write_lines(path.as_ref(), &Header::new(MATCHED_SCHEMA, &pool.classes), &lines)
}

/// Per-instance classifier output written by the `score` stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InstanceScoreLine {
    pub image_id: ImageId,
    pub class_id: ClassId,
    pub instance: usize,
    pub p_tp: Option<f64>,
    pub lius: f64,
    pub model: String,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
enum ScoreLine {
    Score(InstanceScoreLine),
}

pub fn write_scores(classes: &[String], scores: &[InstanceScoreLine], path: impl AsRef<Path>) -> Result<()> {
    let lines: Vec<ScoreLine> = scores.iter().cloned().map(ScoreLine::Score).collect();
    write_lines(path.as_ref(), &Header::new(SCORES_SCHEMA, classes), &lines)
}

pub fn load_scores(path: impl AsRef<Path>) -> Result<Vec<InstanceScoreLine>> {
    let (_, lines) = parse_lines::<ScoreLine>(path.as_ref(), SCORES_SCHEMA)?;
    Ok(lines.into_iter().map(|ScoreLine::Score(s)| s).collect())
}
