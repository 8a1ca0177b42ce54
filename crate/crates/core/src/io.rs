//! Readers and writers for maps, detection logs, intrinsics, results,
//! trajectories, associations, scenes and metrics reports.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use nalgebra::Vector3;
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{unit_quaternion_wxyz, BoundingBox, CameraIntrinsics};
use crate::graph::{LabelFrequencyTable, LandmarkId, PriorObjectNode, RawDetection};
use crate::pipeline::{
    pose_from_tum, pose_to_tum, Association, DetectionFrame, FrameResult, Keyframe, MetricsReport,
    ObjectMap, StampedPose,
};
use crate::pose::LocalizationStatus;
use crate::simulator::{Scene, SceneLandmark, SceneSpec};

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn parse_error(path: &Path, line: usize, message: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        message: message.into(),
    }
}

fn from_json<T: DeserializeOwned>(path: &Path, text: &str) -> Result<T> {
    serde_json::from_str(text).map_err(|e| parse_error(path, e.line(), e.to_string()))
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("plain data serializes");
    s.push('\n');
    s
}

fn to_json_line<T: Serialize>(value: &T) -> String {
    serde_json::to_string(value).expect("plain data serializes")
}

/// Non-blank lines of a JSON Lines file with their 1-based line numbers.
fn jsonl_lines(text: &str) -> impl Iterator<Item = (usize, &str)> {
    text.lines()
        .enumerate()
        .map(|(i, l)| (i + 1, l.trim()))
        .filter(|(_, l)| !l.is_empty())
}

fn parse_jsonl<T: DeserializeOwned>(path: &Path, text: &str) -> Result<Vec<T>> {
    jsonl_lines(text)
        .map(|(n, line)| {
            serde_json::from_str(line).map_err(|e| parse_error(path, n, e.to_string()))
        })
        .collect()
}

// ---------------------------------------------------------------- intrinsics

pub fn read_intrinsics(path: &Path) -> Result<CameraIntrinsics> {
    let k: CameraIntrinsics = from_json(path, &read_text(path)?)?;
    k.validate()?;
    Ok(k)
}

pub fn intrinsics_to_string(k: &CameraIntrinsics) -> String {
    to_json(k)
}

// ---------------------------------------------------------------------- map

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MapLandmarkRecord {
    id: LandmarkId,
    position: [f64; 3],
    /// `[qw, qx, qy, qz]`
    rotation: [f64; 4],
    scale: [f64; 3],
    total_detections: u32,
    label_counts: BTreeMap<String, u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct KeyframeRecord {
    id: u64,
    landmark_ids: Vec<LandmarkId>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct MapRecord {
    landmarks: Vec<MapLandmarkRecord>,
    keyframes: Vec<KeyframeRecord>,
}

pub fn map_to_string(map: &ObjectMap) -> String {
    let record = MapRecord {
        landmarks: map
            .landmarks
            .iter()
            .map(|l| MapLandmarkRecord {
                id: l.id,
                position: l.position.into(),
                rotation: [l.rotation.w, l.rotation.i, l.rotation.j, l.rotation.k],
                scale: l.scale.into(),
                total_detections: l.frequencies.total_detections(),
                label_counts: l.frequencies.counts().clone(),
            })
            .collect(),
        keyframes: map
            .keyframes
            .iter()
            .map(|k| KeyframeRecord {
                id: k.id,
                landmark_ids: k.landmark_ids.clone(),
            })
            .collect(),
    };
    to_json(&record)
}

pub fn parse_map(path: &Path, text: &str) -> Result<ObjectMap> {
    let record: MapRecord = from_json(path, text)?;
    let landmarks = record
        .landmarks
        .into_iter()
        .map(|l| {
            let context = |e: Error| Error::invalid(format!("{}: landmark {}: {e}", path.display(), l.id));
            PriorObjectNode::new(
                l.id,
                Vector3::from(l.position),
                unit_quaternion_wxyz(l.rotation).map_err(context)?,
                Vector3::from(l.scale),
                LabelFrequencyTable::from_counts(l.total_detections, l.label_counts.clone())
                    .map_err(context)?,
            )
            .map_err(context)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(ObjectMap {
        landmarks,
        keyframes: record
            .keyframes
            .into_iter()
            .map(|k| Keyframe {
                id: k.id,
                landmark_ids: k.landmark_ids,
            })
            .collect(),
    })
}

pub fn read_map(path: &Path) -> Result<ObjectMap> {
    parse_map(path, &read_text(path)?)
}

// ----------------------------------------------------------- detection logs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct LabelRecord {
    label: String,
    score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct DetectionRecord {
    bbox: [f64; 4],
    labels: Vec<LabelRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    position: Option<[f64; 3]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct FrameRecord {
    frame_id: u64,
    timestamp: f64,
    detections: Vec<DetectionRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    depth: Option<PathBuf>,
}

pub fn detection_log_to_string(frames: &[DetectionFrame]) -> String {
    let mut out = String::new();
    for f in frames {
        let record = FrameRecord {
            frame_id: f.frame_id,
            timestamp: f.timestamp,
            detections: f
                .detections
                .iter()
                .map(|d| DetectionRecord {
                    bbox: d.bbox.into(),
                    labels: d
                        .labels
                        .iter()
                        .map(|(label, score)| LabelRecord {
                            label: label.clone(),
                            score: *score,
                        })
                        .collect(),
                    position: d.position.map(Into::into),
                })
                .collect(),
            depth: f.depth.clone(),
        };
        out.push_str(&to_json_line(&record));
        out.push('\n');
    }
    out
}

/// Parses a detection log. Relative depth paths are resolved against `base`.
pub fn parse_detection_log(path: &Path, text: &str, base: &Path) -> Result<Vec<DetectionFrame>> {
    jsonl_lines(text)
        .map(|(n, line)| {
            let record: FrameRecord =
                serde_json::from_str(line).map_err(|e| parse_error(path, n, e.to_string()))?;
            let detections = record
                .detections
                .into_iter()
                .enumerate()
                .map(|(i, d)| {
                    let bbox = BoundingBox::try_from(d.bbox)
                        .map_err(|e| parse_error(path, n, format!("detection {i}: {e}")))?;
                    if d.labels.iter().any(|l| !(l.score >= 0.0) || !l.score.is_finite()) {
                        return Err(parse_error(path, n, format!("detection {i}: negative or non-finite score")));
                    }
                    Ok(RawDetection {
                        bbox,
                        labels: d.labels.into_iter().map(|l| (l.label, l.score)).collect(),
                        position: d.position.map(Vector3::from),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(DetectionFrame {
                frame_id: record.frame_id,
                timestamp: record.timestamp,
                detections,
                depth: record.depth.map(|p| if p.is_relative() { base.join(p) } else { p }),
            })
        })
        .collect()
}

pub fn read_detection_log(path: &Path) -> Result<Vec<DetectionFrame>> {
    let base = path.parent().unwrap_or(Path::new("."));
    parse_detection_log(path, &read_text(path)?, base)
}

// ------------------------------------------------------------- associations

pub fn associations_to_string(associations: &[Association]) -> String {
    associations
        .iter()
        .map(|a| to_json_line(a) + "\n")
        .collect()
}

pub fn read_associations(path: &Path) -> Result<Vec<Association>> {
    parse_jsonl(path, &read_text(path)?)
}

/// `frame id -> detection index -> landmark`.
pub fn associations_by_frame(
    associations: &[Association],
) -> BTreeMap<u64, BTreeMap<usize, LandmarkId>> {
    let mut out: BTreeMap<u64, BTreeMap<usize, LandmarkId>> = BTreeMap::new();
    for a in associations {
        out.entry(a.frame_id)
            .or_default()
            .insert(a.detection_index, a.landmark_id);
    }
    out
}

// ----------------------------------------------------------------- results

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CorrespondenceRecord {
    landmark_id: LandmarkId,
    detection_index: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ResultRecord {
    frame_id: u64,
    timestamp: f64,
    status: LocalizationStatus,
    /// `[tx, ty, tz, qx, qy, qz, qw]`
    pose: Option<[f64; 7]>,
    was: f64,
    correspondences: Vec<CorrespondenceRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ResultsSummary {
    pub frames: usize,
    pub success: usize,
    pub insufficient_detections: usize,
    pub no_valid_sample: usize,
    pub degenerate: usize,
}

impl ResultsSummary {
    pub fn of(results: &[FrameResult]) -> Self {
        let mut s = Self {
            frames: results.len(),
            ..Self::default()
        };
        for r in results {
            match r.status {
                LocalizationStatus::Success => s.success += 1,
                LocalizationStatus::InsufficientDetections => s.insufficient_detections += 1,
                LocalizationStatus::NoValidSample => s.no_valid_sample += 1,
                LocalizationStatus::Degenerate => s.degenerate += 1,
            }
        }
        s
    }
}

#[derive(Serialize, Deserialize)]
struct SummaryLine {
    summary: ResultsSummary,
}

/// One line per frame followed by a summary line.
pub fn results_to_string(results: &[FrameResult]) -> String {
    let mut out = String::new();
    for r in results {
        let record = ResultRecord {
            frame_id: r.frame_id,
            timestamp: r.timestamp,
            status: r.status,
            pose: r.pose.as_ref().map(pose_to_tum),
            was: r.was,
            correspondences: r
                .correspondences
                .iter()
                .map(|&(landmark_id, detection_index)| CorrespondenceRecord {
                    landmark_id,
                    detection_index,
                })
                .collect(),
            entropy: r.entropy,
        };
        out.push_str(&to_json_line(&record));
        out.push('\n');
    }
    out.push_str(&to_json_line(&SummaryLine {
        summary: ResultsSummary::of(results),
    }));
    out.push('\n');
    out
}

pub fn parse_results(path: &Path, text: &str) -> Result<Vec<FrameResult>> {
    let mut out = Vec::new();
    for (n, line) in jsonl_lines(text) {
        let value: serde_json::Value =
            serde_json::from_str(line).map_err(|e| parse_error(path, n, e.to_string()))?;
        if value.get("summary").is_some() {
            continue;
        }
        let r: ResultRecord =
            serde_json::from_value(value).map_err(|e| parse_error(path, n, e.to_string()))?;
        let pose = r
            .pose
            .map(|p| pose_from_tum([p[0], p[1], p[2]], [p[3], p[4], p[5], p[6]]))
            .transpose()
            .map_err(|e| parse_error(path, n, e.to_string()))?;
        out.push(FrameResult {
            frame_id: r.frame_id,
            timestamp: r.timestamp,
            status: r.status,
            pose,
            was: r.was,
            correspondences: r
                .correspondences
                .into_iter()
                .map(|c| (c.landmark_id, c.detection_index))
                .collect(),
            entropy: r.entropy,
        });
    }
    Ok(out)
}

pub fn read_results(path: &Path) -> Result<Vec<FrameResult>> {
    parse_results(path, &read_text(path)?)
}

// ------------------------------------------------------------ trajectories

/// TUM format: `timestamp tx ty tz qx qy qz qw`, camera center and camera-to-world rotation.
pub fn trajectory_to_string(poses: &[StampedPose]) -> String {
    let mut out = String::from("# timestamp tx ty tz qx qy qz qw\n");
    for p in poses {
        let row = pose_to_tum(&p.pose);
        let _ = write!(out, "{}", p.timestamp);
        for v in row {
            let _ = write!(out, " {v}");
        }
        out.push('\n');
    }
    out
}

pub fn parse_trajectory(path: &Path, text: &str) -> Result<Vec<StampedPose>> {
    let mut out = Vec::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let values = line
            .split_whitespace()
            .map(str::parse::<f64>)
            .collect::<std::result::Result<Vec<_>, _>>()
            .map_err(|e| parse_error(path, i + 1, e.to_string()))?;
        let [t, x, y, z, qx, qy, qz, qw] = values[..] else {
            return Err(parse_error(path, i + 1, format!("expected 8 values, found {}", values.len())));
        };
        let pose = pose_from_tum([x, y, z], [qx, qy, qz, qw])
            .map_err(|e| parse_error(path, i + 1, e.to_string()))?;
        out.push(StampedPose { timestamp: t, pose });
    }
    Ok(out)
}

pub fn read_trajectory(path: &Path) -> Result<Vec<StampedPose>> {
    parse_trajectory(path, &read_text(path)?)
}

// -------------------------------------------------------------------- scene

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SceneLandmarkRecord {
    id: LandmarkId,
    position: [f64; 3],
    rotation: [f64; 4],
    scale: [f64; 3],
    label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct SceneRecord {
    spec: SceneSpec,
    landmarks: Vec<SceneLandmarkRecord>,
}

pub fn scene_to_string(scene: &Scene) -> String {
    to_json(&SceneRecord {
        spec: scene.spec.clone(),
        landmarks: scene
            .landmarks
            .iter()
            .map(|l| SceneLandmarkRecord {
                id: l.id,
                position: l.position.into(),
                rotation: [l.rotation.w, l.rotation.i, l.rotation.j, l.rotation.k],
                scale: l.scale.into(),
                label: l.label.clone(),
            })
            .collect(),
    })
}

pub fn parse_scene(path: &Path, text: &str) -> Result<Scene> {
    let record: SceneRecord = from_json(path, text)?;
    let landmarks = record
        .landmarks
        .into_iter()
        .map(|l| {
            Ok(SceneLandmark {
                id: l.id,
                position: Vector3::from(l.position),
                rotation: unit_quaternion_wxyz(l.rotation)?,
                scale: Vector3::from(l.scale),
                label: l.label,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(Scene {
        spec: record.spec,
        landmarks,
    })
}

pub fn read_scene(path: &Path) -> Result<Scene> {
    parse_scene(path, &read_text(path)?)
}

// ------------------------------------------------------------------ reports

pub fn report_to_string(report: &MetricsReport) -> String {
    to_json(report)
}

fn opt(v: Option<f64>) -> String {
    v.map(|x| x.to_string()).unwrap_or_default()
}

/// Per-frame CSV for plotting.
pub fn report_csv(report: &MetricsReport) -> String {
    let mut out = String::from("frame_id,timestamp,status,te,was,tp,fp,fn,entropy\n");
    for f in &report.per_frame {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            f.frame_id,
            f.timestamp,
            f.status.as_str(),
            opt(f.te),
            f.was,
            f.tp,
            f.fp,
            f.fn_,
            opt(f.entropy)
        );
    }
    out
}

pub fn to_pretty_json<T: Serialize>(value: &T) -> String {
    to_json(value)
}
