//! Line-oriented JSON container for pose datasets, hypothesis sets and
//! predictions.
//!
//! Line 1 is a header object (`version`, `kind`, `J`, `L`, `d`, `count`);
//! each following line is one record. Float fields carry 9 significant
//! digits. Feature tensors are base64 little-endian `f32` blocks.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as BASE64;
use base64::Engine;
use serde::{Deserialize, Serialize};

use super::types::{ConditioningFeatures, Pose2D, Pose3D, PoseSample};
use crate::error::{Error, Result};

pub const POSE_FILE_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FileKind {
    Dataset,
    Hypotheses,
    Poses,
}

/// Tensor dimensions shared by every record of a file.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dims {
    #[serde(rename = "J")]
    pub joints: usize,
    #[serde(rename = "L")]
    pub levels: usize,
    pub d: usize,
}

impl Dims {
    pub fn of(sample: &PoseSample) -> Self {
        Self {
            joints: sample.pose3d.joint_count(),
            levels: sample.features.levels(),
            d: sample.features.dim(),
        }
    }

    fn feature_len(&self) -> usize {
        (self.levels + 1) * self.joints * self.d
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FileHeader {
    pub version: u32,
    pub kind: FileKind,
    #[serde(flatten)]
    pub dims: Dims,
    pub count: usize,
    #[serde(rename = "H", default, skip_serializing_if = "Option::is_none")]
    pub hypotheses: Option<usize>,
    /// Free-form provenance, e.g. the sampler settings behind a hypotheses file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub meta: Option<serde_json::Value>,
}

#[derive(Serialize, Deserialize)]
struct DatasetRecord {
    sample_id: String,
    action_tag: Option<String>,
    pose3d: Vec<f64>,
    pose2d: Vec<f64>,
    features: String,
}

#[derive(Serialize, Deserialize)]
struct HypothesesRecord {
    sample_id: String,
    action_tag: Option<String>,
    hypotheses: Vec<Vec<f64>>,
}

#[derive(Serialize, Deserialize)]
struct PoseRecord {
    sample_id: String,
    action_tag: Option<String>,
    pose3d: Vec<f64>,
}

/// A labelled 3D pose, as read from a dataset or a predictions file.
#[derive(Clone, Debug, PartialEq)]
pub struct LabelledPose {
    pub sample_id: String,
    pub action_tag: Option<String>,
    pub pose: Pose3D,
}

/// Hypotheses of one frame as stored on disk.
#[derive(Clone, Debug, PartialEq)]
pub struct HypothesesEntry {
    pub sample_id: String,
    pub action_tag: Option<String>,
    pub hypotheses: Vec<Pose3D>,
}

/// Rounds to 9 significant decimal digits.
pub fn round_sig9(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.8e}").parse().expect("formatted float parses")
}

fn rounded(values: impl IntoIterator<Item = f64>) -> Vec<f64> {
    values.into_iter().map(round_sig9).collect()
}

pub fn encode_features(features: &ConditioningFeatures) -> String {
    let mut bytes = Vec::with_capacity(features.as_slice().len() * 4);
    for v in features.as_slice() {
        bytes.extend_from_slice(&v.to_le_bytes());
    }
    BASE64.encode(bytes)
}

fn decode_features(encoded: &str, dims: Dims, record: usize) -> Result<ConditioningFeatures> {
    let bytes = BASE64
        .decode(encoded)
        .map_err(|e| Error::parse(Some(record), format!("invalid base64 features: {e}")))?;
    if bytes.len() != dims.feature_len() * 4 {
        return Err(Error::parse(
            Some(record),
            format!(
                "feature block has {} bytes, expected {}",
                bytes.len(),
                dims.feature_len() * 4
            ),
        ));
    }
    let data: Vec<f32> = bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(Error::parse(Some(record), "non-finite feature value"));
    }
    ConditioningFeatures::new(dims.levels, dims.joints, dims.d, data)
        .map_err(|e| Error::parse(Some(record), e.to_string()))
}

fn check_values(values: &[f64], expected: usize, what: &str, record: usize) -> Result<()> {
    if values.len() != expected {
        return Err(Error::parse(
            Some(record),
            format!("{what} has {} values, expected {expected}", values.len()),
        ));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::parse(Some(record), format!("{what} has non-finite values")));
    }
    Ok(())
}

fn write_lines<I>(path: &Path, header: &FileHeader, lines: I) -> Result<()>
where
    I: IntoIterator<Item = Result<String>>,
{
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let head = serde_json::to_string(header).expect("header serializes");
    writeln!(out, "{head}").map_err(|e| Error::io(path, e))?;
    for line in lines {
        writeln!(out, "{}", line?).map_err(|e| Error::io(path, e))?;
    }
    out.flush().map_err(|e| Error::io(path, e))
}

struct Lines {
    header: FileHeader,
    records: Vec<String>,
}

fn read_lines(path: &Path, kind: FileKind) -> Result<Lines> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut lines = BufReader::new(file).lines();
    let first = lines
        .next()
        .ok_or_else(|| Error::parse(None, "empty file"))?
        .map_err(|e| Error::io(path, e))?;
    let header: FileHeader = serde_json::from_str(&first)
        .map_err(|e| Error::parse(None, format!("malformed header: {e}")))?;
    if header.version != POSE_FILE_VERSION {
        return Err(Error::parse(
            None,
            format!("unsupported version {}", header.version),
        ));
    }
    if header.kind != kind {
        return Err(Error::parse(
            None,
            format!("expected a {kind:?} file, found {:?}", header.kind),
        ));
    }
    let mut records = Vec::with_capacity(header.count);
    for line in lines {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        records.push(line);
    }
    if records.len() != header.count {
        return Err(Error::parse(
            None,
            format!(
                "header announces {} records, file holds {}",
                header.count,
                records.len()
            ),
        ));
    }
    Ok(Lines { header, records })
}

fn parse_record<T: for<'de> Deserialize<'de>>(line: &str, record: usize) -> Result<T> {
    serde_json::from_str(line).map_err(|e| Error::parse(Some(record), e.to_string()))
}

pub fn write_poses(path: &Path, dims: Dims, samples: &[PoseSample]) -> Result<()> {
    let header = FileHeader {
        version: POSE_FILE_VERSION,
        kind: FileKind::Dataset,
        dims,
        count: samples.len(),
        hypotheses: None,
        meta: None,
    };
    let lines = samples.iter().enumerate().map(|(i, s)| {
        if Dims::of(s) != dims || s.pose2d.joint_count() != dims.joints {
            return Err(Error::Shape(format!(
                "sample {i} has dims {:?}, file declares {dims:?}",
                Dims::of(s)
            )));
        }
        let rec = DatasetRecord {
            sample_id: s.sample_id.clone(),
            action_tag: s.action_tag.clone(),
            pose3d: rounded(s.pose3d.to_flat()),
            pose2d: rounded(s.pose2d.to_flat()),
            features: encode_features(&s.features),
        };
        Ok(serde_json::to_string(&rec).expect("record serializes"))
    });
    write_lines(path, &header, lines)
}

pub fn read_poses(path: &Path) -> Result<(Dims, Vec<PoseSample>)> {
    let Lines { header, records } = read_lines(path, FileKind::Dataset)?;
    let dims = header.dims;
    let samples = records
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let rec: DatasetRecord = parse_record(line, i)?;
            check_values(&rec.pose3d, dims.joints * 3, "pose3d", i)?;
            check_values(&rec.pose2d, dims.joints * 2, "pose2d", i)?;
            Ok(PoseSample {
                sample_id: rec.sample_id,
                action_tag: rec.action_tag,
                pose3d: Pose3D::from_flat(&rec.pose3d)?,
                pose2d: Pose2D::from_flat(&rec.pose2d)?,
                features: decode_features(&rec.features, dims, i)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((dims, samples))
}

pub fn write_hypotheses(
    path: &Path,
    dims: Dims,
    hypotheses: usize,
    meta: Option<serde_json::Value>,
    entries: &[HypothesesEntry],
) -> Result<()> {
    let header = FileHeader {
        version: POSE_FILE_VERSION,
        kind: FileKind::Hypotheses,
        dims,
        count: entries.len(),
        hypotheses: Some(hypotheses),
        meta,
    };
    let lines = entries.iter().enumerate().map(|(i, e)| {
        if e.hypotheses.len() != hypotheses
            || e.hypotheses.iter().any(|h| h.joint_count() != dims.joints)
        {
            return Err(Error::Shape(format!(
                "frame {i} does not hold {hypotheses} poses of {} joints",
                dims.joints
            )));
        }
        let rec = HypothesesRecord {
            sample_id: e.sample_id.clone(),
            action_tag: e.action_tag.clone(),
            hypotheses: e.hypotheses.iter().map(|h| rounded(h.to_flat())).collect(),
        };
        Ok(serde_json::to_string(&rec).expect("record serializes"))
    });
    write_lines(path, &header, lines)
}

pub fn read_hypotheses(path: &Path) -> Result<(FileHeader, Vec<HypothesesEntry>)> {
    let Lines { header, records } = read_lines(path, FileKind::Hypotheses)?;
    let h = header
        .hypotheses
        .ok_or_else(|| Error::parse(None, "hypotheses file without `H`"))?;
    let j = header.dims.joints;
    let entries = records
        .iter()
        .enumerate()
        .map(|(i, line)| {
            let rec: HypothesesRecord = parse_record(line, i)?;
            if rec.hypotheses.len() != h {
                return Err(Error::parse(
                    Some(i),
                    format!("{} hypotheses, header says {h}", rec.hypotheses.len()),
                ));
            }
            let poses = rec
                .hypotheses
                .iter()
                .map(|flat| {
                    check_values(flat, j * 3, "hypothesis", i)?;
                    Pose3D::from_flat(flat)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(HypothesesEntry {
                sample_id: rec.sample_id,
                action_tag: rec.action_tag,
                hypotheses: poses,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok((header, entries))
}

pub fn write_predictions(path: &Path, dims: Dims, poses: &[LabelledPose]) -> Result<()> {
    let header = FileHeader {
        version: POSE_FILE_VERSION,
        kind: FileKind::Poses,
        dims,
        count: poses.len(),
        hypotheses: None,
        meta: None,
    };
    let lines = poses.iter().enumerate().map(|(i, p)| {
        if p.pose.joint_count() != dims.joints {
            return Err(Error::Shape(format!("pose {i} has the wrong joint count")));
        }
        let rec = PoseRecord {
            sample_id: p.sample_id.clone(),
            action_tag: p.action_tag.clone(),
            pose3d: rounded(p.pose.to_flat()),
        };
        Ok(serde_json::to_string(&rec).expect("record serializes"))
    });
    write_lines(path, &header, lines)
}

/// Reads the labelled 3D poses of either a dataset or a predictions file.
pub fn read_labelled_poses(path: &Path) -> Result<(Dims, Vec<LabelledPose>)> {
    let kind = peek_kind(path)?;
    match kind {
        FileKind::Dataset => {
            let (dims, samples) = read_poses(path)?;
            Ok((
                dims,
                samples
                    .into_iter()
                    .map(|s| LabelledPose {
                        sample_id: s.sample_id,
                        action_tag: s.action_tag,
                        pose: s.pose3d,
                    })
                    .collect(),
            ))
        }
        FileKind::Poses => {
            let Lines { header, records } = read_lines(path, FileKind::Poses)?;
            let j = header.dims.joints;
            let poses = records
                .iter()
                .enumerate()
                .map(|(i, line)| {
                    let rec: PoseRecord = parse_record(line, i)?;
                    check_values(&rec.pose3d, j * 3, "pose3d", i)?;
                    Ok(LabelledPose {
                        sample_id: rec.sample_id,
                        action_tag: rec.action_tag,
                        pose: Pose3D::from_flat(&rec.pose3d)?,
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok((header.dims, poses))
        }
        FileKind::Hypotheses => Err(Error::parse(
            None,
            "expected a dataset or poses file, found hypotheses",
        )),
    }
}

pub fn peek_kind(path: &Path) -> Result<FileKind> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut first = String::new();
    BufReader::new(file)
        .read_line(&mut first)
        .map_err(|e| Error::io(path, e))?;
    let header: FileHeader = serde_json::from_str(first.trim_end())
        .map_err(|e| Error::parse(None, format!("malformed header: {e}")))?;
    Ok(header.kind)
}
