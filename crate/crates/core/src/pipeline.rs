//! End-to-end flows: map building, per-frame localization and evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;

use log::warn;
use nalgebra::{UnitQuaternion, Vector3};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{CameraIntrinsics, Pose};
use crate::graph::{
    build_prior_graph, build_query_graph, normalize_confidences, DepthImage, LabelFrequencyTable,
    LandmarkId, PriorGraph, PriorObjectNode, RawDetection,
};
use crate::metrics::{
    evaluate_associations, mean_translation_error, mota, mota_counts, success_rate,
    translation_error, truth_by_projection, FrameAssociations, SuccessMode,
};
use crate::pose::{derive_seed, estimate_pose, LocalizationStatus, MatcherConfig};
use crate::simulator::{SceneLandmark, SimulatedDataset, SimulatedFrame};

/// Largest timestamp gap (seconds) for pairing a result with a ground-truth pose.
pub const TIMESTAMP_TOLERANCE: f64 = 0.01;

/// One frame of a detection log.
#[derive(Debug, Clone, PartialEq)]
pub struct DetectionFrame {
    pub frame_id: u64,
    pub timestamp: f64,
    pub detections: Vec<RawDetection>,
    /// 16-bit depth PNG for detections without a position.
    pub depth: Option<PathBuf>,
}

impl From<&SimulatedFrame> for DetectionFrame {
    fn from(f: &SimulatedFrame) -> Self {
        Self {
            frame_id: f.frame_id,
            timestamp: f.timestamp,
            detections: f.detections.clone(),
            depth: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Association {
    pub frame_id: u64,
    pub detection_index: usize,
    pub landmark_id: LandmarkId,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Keyframe {
    pub id: u64,
    pub landmark_ids: Vec<LandmarkId>,
}

/// Landmarks with label statistics plus which landmarks each keyframe saw.
#[derive(Debug, Clone, PartialEq)]
pub struct ObjectMap {
    pub landmarks: Vec<PriorObjectNode>,
    pub keyframes: Vec<Keyframe>,
}

impl ObjectMap {
    pub fn graph(&self, config: &MatcherConfig) -> Result<PriorGraph> {
        let members: Vec<Vec<LandmarkId>> =
            self.keyframes.iter().map(|k| k.landmark_ids.clone()).collect();
        build_prior_graph(
            self.landmarks.clone(),
            &members,
            config.k_edge,
            config.prior_edge_mode,
        )
    }
}

/// Accumulates label frequencies from the top-`top_k` labels of every associated
/// keyframe detection. Landmark geometry comes from `geometry`; landmarks never
/// observed are left out of the map.
pub fn build_map(
    keyframes: &[DetectionFrame],
    associations: &[Association],
    geometry: &[SceneLandmark],
    top_k: usize,
) -> Result<ObjectMap> {
    let known: BTreeMap<LandmarkId, &SceneLandmark> = geometry.iter().map(|l| (l.id, l)).collect();
    let by_frame: BTreeMap<(u64, usize), LandmarkId> = associations
        .iter()
        .map(|a| ((a.frame_id, a.detection_index), a.landmark_id))
        .collect();
    let mut observations: BTreeMap<LandmarkId, Vec<Vec<String>>> = BTreeMap::new();
    let mut members = Vec::new();
    for frame in keyframes {
        let mut seen = BTreeSet::new();
        for (index, det) in frame.detections.iter().enumerate() {
            let Some(&lm) = by_frame.get(&(frame.frame_id, index)) else {
                continue;
            };
            if !known.contains_key(&lm) {
                return Err(Error::UnknownLandmark(lm));
            }
            let labels = match normalize_confidences(&det.labels, top_k) {
                Ok(c) => c.labels().map(str::to_string).collect(),
                Err(e) => {
                    warn!("keyframe {} detection {index}: {e}", frame.frame_id);
                    continue;
                }
            };
            observations.entry(lm).or_default().push(labels);
            seen.insert(lm);
        }
        members.push(Keyframe {
            id: frame.frame_id,
            landmark_ids: seen.into_iter().collect(),
        });
    }
    let mut landmarks = Vec::with_capacity(observations.len());
    for (id, lm) in &known {
        let Some(obs) = observations.get(id) else {
            warn!("landmark {id} was never observed and is left out of the map");
            continue;
        };
        landmarks.push(PriorObjectNode::new(
            *id,
            lm.position,
            lm.rotation,
            lm.scale,
            LabelFrequencyTable::accumulate(obs)?,
        )?);
    }
    Ok(ObjectMap {
        landmarks,
        keyframes: members,
    })
}

/// Map of a simulated dataset built from its ground-truth keyframe associations.
pub fn build_simulated_map(data: &SimulatedDataset, top_k: usize) -> Result<ObjectMap> {
    let frames: Vec<DetectionFrame> = data.keyframes.iter().map(DetectionFrame::from).collect();
    let associations = frame_associations(&data.keyframes);
    build_map(&frames, &associations, &data.scene.landmarks, top_k)
}

pub fn frame_associations(frames: &[SimulatedFrame]) -> Vec<Association> {
    frames
        .iter()
        .flat_map(|f| {
            f.landmark_ids
                .iter()
                .enumerate()
                .map(move |(i, &lm)| Association {
                    frame_id: f.frame_id,
                    detection_index: i,
                    landmark_id: lm,
                })
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct FrameResult {
    pub frame_id: u64,
    pub timestamp: f64,
    pub status: LocalizationStatus,
    pub pose: Option<Pose>,
    pub was: f64,
    /// `(landmark id, detection index)`.
    pub correspondences: Vec<(LandmarkId, usize)>,
    /// Mean label entropy over the frame's detections, if any.
    pub entropy: Option<f64>,
}

pub fn localize_frame(
    frame: &DetectionFrame,
    prior: &PriorGraph,
    intrinsics: &CameraIntrinsics,
    config: &MatcherConfig,
    depth_scale: f64,
) -> Result<FrameResult> {
    let depth = match &frame.depth {
        Some(path) if frame.detections.iter().any(|d| d.position.is_none()) => {
            Some(DepthImage::from_png16(path, depth_scale)?)
        }
        _ => None,
    };
    let (query, _dropped) = build_query_graph(
        &frame.detections,
        depth.as_ref(),
        intrinsics,
        config.top_k,
        config.k_edge,
    )?;
    let frame_config = MatcherConfig {
        rng_seed: derive_seed(config.rng_seed, frame.frame_id),
        ..config.clone()
    };
    let result = estimate_pose(&query, prior, &frame_config, intrinsics);
    let entropy = (!query.is_empty()).then(|| {
        query
            .nodes()
            .iter()
            .map(|n| crate::metrics::shannon_entropy(&n.confidences))
            .sum::<f64>()
            / query.len() as f64
    });
    let correspondences = result
        .id_pairs(prior, &query)
        .into_iter()
        .collect::<Vec<_>>();
    Ok(FrameResult {
        frame_id: frame.frame_id,
        timestamp: frame.timestamp,
        status: result.status,
        pose: result.pose,
        was: result.was,
        correspondences,
        entropy,
    })
}

/// Localizes every frame, in parallel on the current rayon pool, ordered by frame id.
pub fn localize_frames(
    frames: &[DetectionFrame],
    prior: &PriorGraph,
    intrinsics: &CameraIntrinsics,
    config: &MatcherConfig,
    depth_scale: f64,
) -> Result<Vec<FrameResult>> {
    config.validate()?;
    let mut out = frames
        .par_iter()
        .map(|f| localize_frame(f, prior, intrinsics, config, depth_scale))
        .collect::<Result<Vec<_>>>()?;
    out.sort_by_key(|r| r.frame_id);
    Ok(out)
}

/// A ground-truth camera pose at a timestamp.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StampedPose {
    pub timestamp: f64,
    pub pose: Pose,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationOptions {
    pub thresholds: Vec<f64>,
    /// An error equal to the threshold is a failure.
    pub strict_threshold: bool,
}

impl Default for EvaluationOptions {
    fn default() -> Self {
        Self {
            thresholds: vec![0.5, 1.0, 2.0],
            strict_threshold: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SuccessRow {
    pub mode: SuccessMode,
    pub threshold: f64,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameMetrics {
    pub frame_id: u64,
    pub timestamp: f64,
    pub status: LocalizationStatus,
    pub te: Option<f64>,
    pub was: f64,
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub entropy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub sequence: String,
    pub frames: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub mota: Option<f64>,
    pub sr: Vec<SuccessRow>,
    pub te_mean: Option<f64>,
    pub entropy_mean: Option<f64>,
    #[serde(skip)]
    pub per_frame: Vec<FrameMetrics>,
}

impl MetricsReport {
    pub fn success_rate(&self, mode: SuccessMode, threshold: f64) -> Option<f64> {
        self.sr
            .iter()
            .find(|r| r.mode == mode && r.threshold == threshold)
            .map(|r| r.value)
    }
}

fn nearest_pose(truth: &[StampedPose], t: f64) -> Option<&StampedPose> {
    let i = truth.partition_point(|p| p.timestamp < t);
    [i.checked_sub(1), Some(i)]
        .into_iter()
        .flatten()
        .filter_map(|j| truth.get(j))
        .filter(|p| (p.timestamp - t).abs() <= TIMESTAMP_TOLERANCE)
        .min_by(|a, b| (a.timestamp - t).abs().total_cmp(&(b.timestamp - t).abs()))
}

/// Scores results against ground truth. Results are paired with the pose
/// closest in time (within 10 ms); unpaired results are skipped.
/// `truth` maps frame id to `detection index -> landmark`.
pub fn evaluate(
    sequence: &str,
    results: &[FrameResult],
    trajectory: &[StampedPose],
    truth: &BTreeMap<u64, BTreeMap<usize, LandmarkId>>,
    options: &EvaluationOptions,
) -> Result<MetricsReport> {
    let mut traj = trajectory.to_vec();
    traj.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    let mut errors = Vec::new();
    let mut frames = Vec::new();
    let mut aligned = Vec::new();
    for r in results {
        let Some(gt) = nearest_pose(&traj, r.timestamp) else {
            warn!("frame {} has no ground-truth pose within 10 ms", r.frame_id);
            continue;
        };
        let te = r
            .pose
            .map(|p| translation_error(&p.center(), &gt.pose.center()));
        errors.push(te);
        frames.push(FrameAssociations {
            frame_id: r.frame_id,
            predicted: r.correspondences.iter().map(|&(lm, det)| (det, lm)).collect(),
            truth: truth.get(&r.frame_id).cloned().unwrap_or_default(),
        });
        aligned.push((r, te));
    }
    if aligned.is_empty() {
        return Err(Error::invalid(
            "no result frame lines up with the ground-truth trajectory",
        ));
    }
    let counts = evaluate_associations(&frames);
    let mota = mota(&mota_counts(&frames)).ok();
    let mut sr = Vec::new();
    for mode in [SuccessMode::Succ, SuccessMode::All] {
        for &threshold in &options.thresholds {
            sr.push(SuccessRow {
                mode,
                threshold,
                value: success_rate(&errors, threshold, mode, options.strict_threshold)?,
            });
        }
    }
    let entropies: Vec<f64> = aligned.iter().filter_map(|(r, _)| r.entropy).collect();
    let per_frame = aligned
        .iter()
        .zip(&counts.per_frame)
        .map(|((r, te), c)| FrameMetrics {
            frame_id: r.frame_id,
            timestamp: r.timestamp,
            status: r.status,
            te: *te,
            was: r.was,
            tp: c.tp,
            fp: c.fp,
            fn_: c.fn_,
            entropy: r.entropy,
        })
        .collect();
    Ok(MetricsReport {
        sequence: sequence.to_string(),
        frames: aligned.len(),
        precision: counts.precision(),
        recall: counts.recall(),
        f1: counts.f1(),
        mota,
        sr,
        te_mean: mean_translation_error(&errors),
        entropy_mean: (!entropies.is_empty())
            .then(|| entropies.iter().sum::<f64>() / entropies.len() as f64),
        per_frame,
    })
}

/// Per-frame truth without an association file: each detection box is matched
/// to the landmark projected under the ground-truth pose nearest in time.
pub fn projection_truth(
    frames: &[DetectionFrame],
    trajectory: &[StampedPose],
    prior: &PriorGraph,
    intrinsics: &CameraIntrinsics,
    scale: f64,
    iou_threshold: f64,
) -> BTreeMap<u64, BTreeMap<usize, LandmarkId>> {
    let mut traj = trajectory.to_vec();
    traj.sort_by(|a, b| a.timestamp.total_cmp(&b.timestamp));
    frames
        .iter()
        .filter_map(|f| {
            let gt = nearest_pose(&traj, f.timestamp)?;
            let boxes: Vec<_> = f.detections.iter().map(|d| d.bbox).enumerate().collect();
            let truth =
                truth_by_projection(prior, &gt.pose, &boxes, intrinsics, scale, iou_threshold);
            Some((f.frame_id, truth))
        })
        .collect()
}

/// Ground truth of a simulated dataset's query frames.
pub fn simulated_truth(
    data: &SimulatedDataset,
) -> (Vec<StampedPose>, BTreeMap<u64, BTreeMap<usize, LandmarkId>>) {
    let traj = data
        .queries
        .iter()
        .map(|f| StampedPose {
            timestamp: f.timestamp,
            pose: f.pose,
        })
        .collect();
    let truth = data
        .queries
        .iter()
        .map(|f| (f.frame_id, f.landmark_ids.iter().copied().enumerate().collect()))
        .collect();
    (traj, truth)
}

/// Map, localization and evaluation of a simulated dataset under one configuration.
pub fn run_simulated(data: &SimulatedDataset, config: &MatcherConfig) -> Result<MetricsReport> {
    let map = build_simulated_map(data, config.top_k)?;
    let prior = map.graph(config)?;
    let frames: Vec<DetectionFrame> = data.queries.iter().map(DetectionFrame::from).collect();
    let results = localize_frames(&frames, &prior, &data.spec.intrinsics, config, 1.0)?;
    let (traj, truth) = simulated_truth(data);
    evaluate("simulated", &results, &traj, &truth, &EvaluationOptions::default())
}

/// Camera pose from a TUM trajectory row: camera center and camera-to-world rotation.
pub fn pose_from_tum(center: [f64; 3], quat_xyzw: [f64; 4]) -> Result<Pose> {
    let [x, y, z, w] = quat_xyzw;
    let q = crate::geometry::unit_quaternion_wxyz([w, x, y, z])?;
    Ok(Pose::from_camera_in_world(q, Vector3::from(center)))
}

/// TUM row of a pose: `[tx, ty, tz, qx, qy, qz, qw]`.
pub fn pose_to_tum(pose: &Pose) -> [f64; 7] {
    let c = pose.center();
    let q: UnitQuaternion<f64> = pose.camera_to_world();
    [c.x, c.y, c.z, q.i, q.j, q.k, q.w]
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::simulator::{simulate, SimulationSpec};

    #[test]
    fn noise_free_map_has_unit_frequencies() {
        let data = simulate(&SimulationSpec::noise_free(12, 5, 3)).unwrap();
        let map = build_simulated_map(&data, 5).unwrap();
        assert!(!map.landmarks.is_empty());
        let labels = data.scene.labels();
        for lm in &map.landmarks {
            assert_eq!(lm.frequencies.entries(), &[(labels[&lm.id].clone(), 1.0)]);
        }
    }

    #[test]
    fn confusion_shows_in_map_frequencies() {
        let mut spec = SimulationSpec::stress(20, 5, 8);
        spec.keyframes.n_frames = 200;
        spec.noise.dropout = 0.0;
        let data = simulate(&spec).unwrap();
        let map = build_simulated_map(&data, 1).unwrap();
        let labels = data.scene.labels();
        let mut right = 0;
        let mut total = 0;
        for lm in &map.landmarks {
            let n = lm.frequencies.total_detections() as usize;
            right += lm.frequencies.counts().get(&labels[&lm.id]).copied().unwrap_or(0) as usize;
            total += n;
        }
        let rate = right as f64 / total as f64;
        assert!((rate - 0.7).abs() < 0.03, "true-label rate {rate}");
    }

    #[test]
    fn unknown_landmark_in_associations() {
        let data = simulate(&SimulationSpec::noise_free(5, 2, 1)).unwrap();
        let frames: Vec<DetectionFrame> = data.keyframes.iter().map(DetectionFrame::from).collect();
        let mut assoc = frame_associations(&data.keyframes);
        assoc[0].landmark_id = 999;
        assert!(matches!(
            build_map(&frames, &assoc, &data.scene.landmarks, 5),
            Err(Error::UnknownLandmark(999))
        ));
    }

    #[test]
    fn tum_round_trip() {
        let pose = Pose::new(
            UnitQuaternion::from_euler_angles(0.1, -0.4, 2.0),
            Vector3::new(0.3, -1.0, 2.5),
        );
        let row = pose_to_tum(&pose);
        let back = pose_from_tum([row[0], row[1], row[2]], [row[3], row[4], row[5], row[6]]).unwrap();
        assert!((back.translation - pose.translation).norm() < 1e-12);
        assert!(back.rotation.angle_to(&pose.rotation) < 1e-12);
    }

    #[test]
    fn misaligned_timestamps_fail() {
        let r = FrameResult {
            frame_id: 0,
            timestamp: 1.0,
            status: LocalizationStatus::Success,
            pose: Some(Pose::identity()),
            was: 1.0,
            correspondences: vec![],
            entropy: None,
        };
        let traj = [StampedPose {
            timestamp: 1.02,
            pose: Pose::identity(),
        }];
        let opts = EvaluationOptions::default();
        assert!(evaluate("s", std::slice::from_ref(&r), &traj, &BTreeMap::new(), &opts).is_err());
        let near = [StampedPose {
            timestamp: 1.005,
            pose: Pose::identity(),
        }];
        let rep = evaluate("s", &[r], &near, &BTreeMap::new(), &opts).unwrap();
        assert_eq!(rep.frames, 1);
        assert_eq!(rep.success_rate(SuccessMode::Succ, 0.5), Some(1.0));
    }
}
