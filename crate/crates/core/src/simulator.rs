//! Synthetic ellipsoid scenes, camera trajectories and noisy detection rendering.

use std::collections::BTreeMap;

use nalgebra::{Matrix3, Rotation3, UnitQuaternion, Vector2, Vector3};
use rand::seq::{IndexedRandom, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{project_quadric_to_bbox, BoundingBox, CameraIntrinsics, DualQuadric, Pose};
use crate::graph::{LandmarkId, RawDetection};

/// Smallest projected box area (pixels²) that still yields a detection.
pub const MIN_VISIBLE_AREA: f64 = 25.0;
const PLACEMENT_TRIES: usize = 10_000;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub n_landmarks: usize,
    pub bounds_min: [f64; 3],
    pub bounds_max: [f64; 3],
    pub vocabulary: Vec<String>,
    /// Groups of mutually confusable labels.
    pub clusters: Vec<Vec<String>>,
    /// Probability that a detection's top label is a sibling of the true label.
    pub confusion_rate: f64,
    /// Range of ellipsoid semi-axes in meters.
    pub scale_range: [f64; 2],
    pub min_separation: f64,
    pub seed: u64,
}

impl SceneSpec {
    /// Desk-scale scene where every landmark has its own label.
    pub fn unique_labels(n_landmarks: usize, seed: u64) -> Self {
        Self {
            n_landmarks,
            bounds_min: [-2.0, -2.0, 0.0],
            bounds_max: [2.0, 2.0, 1.0],
            vocabulary: (0..n_landmarks).map(|i| format!("object_{i:02}")).collect(),
            clusters: Vec::new(),
            confusion_rate: 0.0,
            scale_range: [0.08, 0.25],
            min_separation: 0.4,
            seed,
        }
    }

    /// Desk-scale scene with twelve labels in four confusable triples.
    pub fn clustered(n_landmarks: usize, confusion_rate: f64, seed: u64) -> Self {
        let clusters: Vec<Vec<String>> = [
            ["cup", "mug", "glass"],
            ["book", "notebook", "magazine"],
            ["keyboard", "laptop", "monitor"],
            ["chair", "stool", "bench"],
        ]
        .iter()
        .map(|c| c.iter().map(|s| s.to_string()).collect())
        .collect();
        Self {
            vocabulary: clusters.concat(),
            clusters,
            confusion_rate,
            ..Self::unique_labels(n_landmarks, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_landmarks == 0 {
            return Err(Error::invalid("scene needs at least one landmark"));
        }
        if self.vocabulary.is_empty() {
            return Err(Error::invalid("vocabulary is empty"));
        }
        if !(0.0..=1.0).contains(&self.confusion_rate) {
            return Err(Error::invalid(format!(
                "confusion rate {} outside [0, 1]",
                self.confusion_rate
            )));
        }
        if (0..3).any(|i| !(self.bounds_min[i] <= self.bounds_max[i])) {
            return Err(Error::invalid("scene bounds are inverted"));
        }
        let [lo, hi] = self.scale_range;
        if !(lo > 0.0 && lo <= hi) {
            return Err(Error::invalid("scale range must be positive and ordered"));
        }
        if !(self.min_separation >= 0.0) {
            return Err(Error::invalid("minimum separation must be non-negative"));
        }
        let mut seen = BTreeMap::new();
        for (c, cluster) in self.clusters.iter().enumerate() {
            for label in cluster {
                if !self.vocabulary.contains(label) {
                    return Err(Error::invalid(format!("cluster label {label} not in vocabulary")));
                }
                if seen.insert(label.as_str(), c).is_some() {
                    return Err(Error::invalid(format!("label {label} is in two clusters")));
                }
            }
        }
        Ok(())
    }

    /// The confusable group of a label; a label outside every cluster stands alone.
    pub fn cluster_of<'a>(&'a self, label: &'a str) -> Vec<&'a str> {
        self.clusters
            .iter()
            .find(|c| c.iter().any(|l| l == label))
            .map(|c| c.iter().map(String::as_str).collect())
            .unwrap_or_else(|| vec![label])
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneLandmark {
    pub id: LandmarkId,
    pub position: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    pub scale: Vector3<f64>,
    pub label: String,
}

impl SceneLandmark {
    pub fn quadric(&self) -> Result<DualQuadric> {
        DualQuadric::from_params(&self.position, &self.rotation, &self.scale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Scene {
    pub spec: SceneSpec,
    pub landmarks: Vec<SceneLandmark>,
}

impl Scene {
    pub fn centroid(&self) -> Vector3<f64> {
        let sum: Vector3<f64> = self.landmarks.iter().map(|l| l.position).sum();
        sum / self.landmarks.len().max(1) as f64
    }

    pub fn labels(&self) -> BTreeMap<LandmarkId, String> {
        self.landmarks.iter().map(|l| (l.id, l.label.clone())).collect()
    }
}

/// Places landmarks uniformly in the bounds, rejecting draws closer than the
/// minimum separation. Labels cycle through the shuffled vocabulary so every
/// label is used as evenly as possible.
pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let lo = Vector3::from(spec.bounds_min);
    let hi = Vector3::from(spec.bounds_max);
    let mut positions: Vec<Vector3<f64>> = Vec::with_capacity(spec.n_landmarks);
    for i in 0..spec.n_landmarks {
        let mut placed = false;
        for _ in 0..PLACEMENT_TRIES {
            let p = lo.zip_map(&hi, |a, b| if a < b { rng.random_range(a..b) } else { a });
            if positions.iter().all(|q| (p - q).norm() >= spec.min_separation) {
                positions.push(p);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::invalid(format!(
                "could not place landmark {i} at separation {} after {PLACEMENT_TRIES} tries",
                spec.min_separation
            )));
        }
    }

    let mut labels = Vec::with_capacity(spec.n_landmarks);
    while labels.len() < spec.n_landmarks {
        let mut round = spec.vocabulary.clone();
        round.shuffle(&mut rng);
        labels.extend(round);
    }
    labels.truncate(spec.n_landmarks);
    labels.shuffle(&mut rng);

    let [s_lo, s_hi] = spec.scale_range;
    let landmarks = positions
        .into_iter()
        .zip(labels)
        .enumerate()
        .map(|(i, (position, label))| {
            let yaw = rng.random_range(-std::f64::consts::PI..std::f64::consts::PI);
            let scale = Vector3::from_fn(|_, _| {
                if s_lo < s_hi {
                    rng.random_range(s_lo..s_hi)
                } else {
                    s_lo
                }
            });
            SceneLandmark {
                id: i as LandmarkId,
                position,
                rotation: UnitQuaternion::from_axis_angle(&Vector3::z_axis(), yaw),
                scale,
                label,
            }
        })
        .collect();
    Ok(Scene {
        spec: spec.clone(),
        landmarks,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TrajectoryKind {
    Orbit,
    Line,
    RandomWalk,
}

impl std::str::FromStr for TrajectoryKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "orbit" => Ok(Self::Orbit),
            "line" => Ok(Self::Line),
            "random-walk" => Ok(Self::RandomWalk),
            other => Err(Error::invalid(format!("unknown trajectory kind {other}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectorySpec {
    pub kind: TrajectoryKind,
    pub n_frames: usize,
    /// Horizontal distance from the look-at target.
    pub radius: f64,
    /// Camera height above the target.
    pub height: f64,
    /// Starting azimuth in radians.
    pub phase: f64,
    /// Random-walk step length in meters.
    pub step: f64,
    pub seed: u64,
}

impl TrajectorySpec {
    pub fn orbit(n_frames: usize, radius: f64, height: f64) -> Self {
        Self {
            kind: TrajectoryKind::Orbit,
            n_frames,
            radius,
            height,
            phase: 0.0,
            step: 0.05,
            seed: 0,
        }
    }
}

/// World-to-camera pose of a camera at `eye` looking at `target` with z up.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Result<Pose> {
    let forward = target - eye;
    if forward.norm() < 1e-9 {
        return Err(Error::invalid("camera coincides with its target"));
    }
    let f = forward.normalize();
    let up = if f.cross(&Vector3::z()).norm() < 1e-6 {
        Vector3::x()
    } else {
        Vector3::z()
    };
    let r = f.cross(&up).normalize();
    let d = f.cross(&r);
    let cam_to_world = Rotation3::from_matrix_unchecked(Matrix3::from_columns(&[r, d, f]));
    Ok(Pose::from_camera_in_world(
        UnitQuaternion::from_rotation_matrix(&cam_to_world),
        *eye,
    ))
}

/// Camera poses that all look at `target`.
pub fn generate_trajectory(spec: &TrajectorySpec, target: &Vector3<f64>) -> Result<Vec<Pose>> {
    if spec.n_frames == 0 {
        return Err(Error::invalid("trajectory needs at least one frame"));
    }
    if !(spec.radius > 0.0) {
        return Err(Error::invalid("trajectory radius must be positive"));
    }
    let n = spec.n_frames;
    let eyes: Vec<Vector3<f64>> = match spec.kind {
        TrajectoryKind::Orbit => (0..n)
            .map(|i| {
                let a = spec.phase + std::f64::consts::TAU * i as f64 / n as f64;
                target + Vector3::new(spec.radius * a.cos(), spec.radius * a.sin(), spec.height)
            })
            .collect(),
        TrajectoryKind::Line => {
            let (s, c) = spec.phase.sin_cos();
            let out = Vector3::new(c, s, 0.0);
            let along = Vector3::new(-s, c, 0.0);
            (0..n)
                .map(|i| {
                    let u = if n == 1 { 0.0 } else { i as f64 / (n - 1) as f64 - 0.5 };
                    target + out * spec.radius + along * (u * spec.radius) + Vector3::z() * spec.height
                })
                .collect()
        }
        TrajectoryKind::RandomWalk => {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            let noise = Normal::new(0.0, spec.step.max(0.0))
                .map_err(|e| Error::invalid(format!("random-walk step: {e}")))?;
            let (mut azimuth, mut radius, mut height) = (spec.phase, spec.radius, spec.height);
            let mut eyes = Vec::with_capacity(n);
            for _ in 0..n {
                eyes.push(target + Vector3::new(radius * azimuth.cos(), radius * azimuth.sin(), height));
                azimuth += noise.sample(&mut rng) / spec.radius + spec.step / spec.radius;
                radius = (radius + 0.2 * noise.sample(&mut rng))
                    .clamp(0.7 * spec.radius, 1.3 * spec.radius);
                height = (height + 0.2 * noise.sample(&mut rng))
                    .clamp(spec.height - 0.3 * spec.radius, spec.height + 0.3 * spec.radius);
            }
            eyes
        }
    };
    eyes.iter().map(|e| look_at(e, target)).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    /// Per-coordinate box jitter (pixels).
    pub bbox_sigma: f64,
    /// Depth noise (meters).
    pub depth_sigma: f64,
    pub dropout: f64,
    /// Softmax temperature of the label scores; 0 puts all mass on the top label.
    pub temperature: f64,
    /// Labels whose score falls below this are not reported.
    pub min_score: f64,
    /// Most labels reported per detection.
    pub max_labels: usize,
}

impl Default for NoiseSpec {
    fn default() -> Self {
        Self::noise_free()
    }
}

impl NoiseSpec {
    pub fn noise_free() -> Self {
        Self {
            bbox_sigma: 0.0,
            depth_sigma: 0.0,
            dropout: 0.0,
            temperature: 0.0,
            min_score: 0.0,
            max_labels: 5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bbox_sigma >= 0.0 && self.depth_sigma >= 0.0 && self.temperature >= 0.0) {
            return Err(Error::invalid("noise levels must be non-negative"));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::invalid(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        if !(0.0..=1.0).contains(&self.min_score) {
            return Err(Error::invalid("min_score outside [0, 1]"));
        }
        if self.max_labels == 0 {
            return Err(Error::invalid("max_labels must be at least 1"));
        }
        Ok(())
    }
}

/// Label scores for one detection of a landmark labeled `truth`.
///
/// The top label is the truth with probability `1 - confusion_rate`, otherwise a
/// uniformly chosen cluster sibling. The top label gets logit 1. A confused
/// detection still ranks the truth second, with a logit in [0.5, 1); the other
/// members draw from [0, 0.5). Scores are the softmax at the configured
/// temperature, and labels scoring below `min_score` are not reported.
pub fn sample_confidences<R: Rng>(
    truth: &str,
    spec: &SceneSpec,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Vec<(String, f64)> {
    let cluster = spec.cluster_of(truth);
    if cluster.len() == 1 {
        return vec![(truth.to_string(), 1.0)];
    }
    let confused = rng.random::<f64>() < spec.confusion_rate;
    let top = if confused {
        let siblings: Vec<&str> = cluster.iter().copied().filter(|l| *l != truth).collect();
        *siblings.choose(rng).expect("cluster has siblings")
    } else {
        truth
    };
    let logits: Vec<(&str, f64)> = cluster
        .iter()
        .map(|&l| {
            let logit = if l == top {
                1.0
            } else if l == truth {
                rng.random_range(0.5..1.0)
            } else {
                rng.random_range(0.0..0.5)
            };
            (l, logit)
        })
        .collect();
    let mut scores: Vec<(String, f64)> = if noise.temperature == 0.0 {
        vec![(top.to_string(), 1.0)]
    } else {
        let z: f64 = logits
            .iter()
            .map(|(_, x)| ((x - 1.0) / noise.temperature).exp())
            .sum();
        logits
            .iter()
            .map(|(l, x)| (l.to_string(), ((x - 1.0) / noise.temperature).exp() / z))
            .filter(|(l, s)| l == top || *s >= noise.min_score)
            .collect()
    };
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(&b.0)));
    scores.truncate(noise.max_labels);
    scores
}

#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub detections: Vec<RawDetection>,
    /// Ground-truth landmark of each detection.
    pub landmark_ids: Vec<LandmarkId>,
}

/// Landmark ids whose quadric is visible under `pose`: center in front of the
/// camera and inside the image, clamped projected box of at least 25 px².
pub fn visible_landmarks(
    scene: &Scene,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
) -> Result<Vec<(LandmarkId, BoundingBox)>> {
    let mut out = Vec::new();
    for lm in &scene.landmarks {
        let Some(center) = intrinsics.project(&pose.transform(&lm.position)) else {
            continue;
        };
        if !intrinsics.contains(&center) {
            continue;
        }
        if let Some(b) = project_quadric_to_bbox(&lm.quadric()?, pose, intrinsics, true) {
            if b.area() >= MIN_VISIBLE_AREA {
                out.push((lm.id, b));
            }
        }
    }
    Ok(out)
}

/// One frame of detections with box jitter, depth noise, label noise and dropout.
///
/// A detection's 3D position is the back-projection, at the noisy depth, of the
/// projected landmark center shifted by the same offset the jitter applied to the
/// box center.
pub fn render_frame<R: Rng>(
    scene: &Scene,
    pose: &Pose,
    intrinsics: &CameraIntrinsics,
    noise: &NoiseSpec,
    rng: &mut R,
) -> Result<RenderedFrame> {
    noise.validate()?;
    let jitter = Normal::new(0.0, noise.bbox_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let depth_noise =
        Normal::new(0.0, noise.depth_sigma).map_err(|e| Error::invalid(e.to_string()))?;
    let by_id: BTreeMap<LandmarkId, &SceneLandmark> =
        scene.landmarks.iter().map(|l| (l.id, l)).collect();
    let mut frame = RenderedFrame {
        detections: Vec::new(),
        landmark_ids: Vec::new(),
    };
    for (id, exact) in visible_landmarks(scene, pose, intrinsics)? {
        let lm = by_id[&id];
        let dropped = rng.random::<f64>() < noise.dropout;
        let d: [f64; 4] = std::array::from_fn(|_| jitter.sample(rng));
        let dz = depth_noise.sample(rng);
        let labels = sample_confidences(&lm.label, &scene.spec, noise, rng);
        if dropped {
            continue;
        }
        let Ok(jittered) = BoundingBox::new(
            exact.x_min + d[0],
            exact.y_min + d[1],
            exact.x_max + d[2],
            exact.y_max + d[3],
        ) else {
            continue;
        };
        let Some(bbox) = jittered.clamp_to(intrinsics) else {
            continue;
        };
        let cam = pose.transform(&lm.position);
        let depth = cam.z + dz;
        if depth <= 0.0 {
            continue;
        }
        let shift = Vector2::new(0.5 * (d[0] + d[2]), 0.5 * (d[1] + d[3]));
        let pixel = intrinsics.project(&cam).expect("visible landmark is in front") + shift;
        frame.detections.push(RawDetection {
            bbox,
            labels,
            position: Some(intrinsics.back_project(&pixel, depth)),
        });
        frame.landmark_ids.push(id);
    }
    Ok(frame)
}

/// Everything needed to generate a dataset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimulationSpec {
    pub scene: SceneSpec,
    pub keyframes: TrajectorySpec,
    pub queries: TrajectorySpec,
    pub noise: NoiseSpec,
    pub intrinsics: CameraIntrinsics,
    pub frame_rate: f64,
}

impl SimulationSpec {
    pub fn default_intrinsics() -> CameraIntrinsics {
        CameraIntrinsics {
            fx: 525.0,
            fy: 525.0,
            cx: 319.5,
            cy: 239.5,
            width: 640,
            height: 480,
        }
    }

    /// Unique labels, no noise: the exact-recovery scenario.
    pub fn noise_free(n_landmarks: usize, n_queries: usize, seed: u64) -> Self {
        Self {
            scene: SceneSpec::unique_labels(n_landmarks, seed),
            keyframes: TrajectorySpec::orbit(24, 4.0, 1.8),
            queries: TrajectorySpec {
                kind: TrajectoryKind::RandomWalk,
                n_frames: n_queries,
                phase: 0.3,
                step: 0.08,
                seed: seed ^ 0x5155_4552,
                ..TrajectorySpec::orbit(n_queries, 2.0, 1.4)
            },
            noise: NoiseSpec::noise_free(),
            intrinsics: Self::default_intrinsics(),
            frame_rate: 30.0,
        }
    }

    /// Confusable labels with box, depth and label noise plus dropout.
    pub fn stress(n_landmarks: usize, n_queries: usize, seed: u64) -> Self {
        Self {
            scene: SceneSpec::clustered(n_landmarks, 0.3, seed),
            noise: NoiseSpec {
                bbox_sigma: 2.0,
                depth_sigma: 0.05,
                dropout: 0.1,
                temperature: 0.4,
                min_score: 0.1,
                max_labels: 5,
            },
            ..Self::noise_free(n_landmarks, n_queries, seed)
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.noise.validate()?;
        self.intrinsics.validate()?;
        if self.keyframes.n_frames == 0 || self.queries.n_frames == 0 {
            return Err(Error::invalid("n_frames must be at least 1"));
        }
        if !(self.frame_rate > 0.0) {
            return Err(Error::invalid("frame rate must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedFrame {
    pub frame_id: u64,
    pub timestamp: f64,
    pub pose: Pose,
    pub detections: Vec<RawDetection>,
    pub landmark_ids: Vec<LandmarkId>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimulatedDataset {
    pub spec: SimulationSpec,
    pub scene: Scene,
    pub keyframes: Vec<SimulatedFrame>,
    pub queries: Vec<SimulatedFrame>,
}

fn frame_rng(seed: u64, frame_id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(frame_id);
    rng
}

fn render_sequence(
    scene: &Scene,
    spec: &SimulationSpec,
    poses: &[Pose],
    first_id: u64,
) -> Result<Vec<SimulatedFrame>> {
    poses
        .par_iter()
        .enumerate()
        .map(|(i, pose)| {
            let frame_id = first_id + i as u64;
            let mut rng = frame_rng(spec.scene.seed, frame_id);
            let r = render_frame(scene, pose, &spec.intrinsics, &spec.noise, &mut rng)?;
            Ok(SimulatedFrame {
                frame_id,
                timestamp: frame_id as f64 / spec.frame_rate,
                pose: *pose,
                detections: r.detections,
                landmark_ids: r.landmark_ids,
            })
        })
        .collect()
}

/// Scene, keyframe sequence and query sequence. Keyframes take frame ids
/// `0..n_keyframes`, queries continue from there, so one association list covers both.
pub fn simulate(spec: &SimulationSpec) -> Result<SimulatedDataset> {
    spec.validate()?;
    let scene = generate_scene(&spec.scene)?;
    let target = scene.centroid();
    let kf_poses = generate_trajectory(&spec.keyframes, &target)?;
    let q_poses = generate_trajectory(&spec.queries, &target)?;
    let keyframes = render_sequence(&scene, spec, &kf_poses, 0)?;
    let queries = render_sequence(&scene, spec, &q_poses, kf_poses.len() as u64)?;
    Ok(SimulatedDataset {
        spec: spec.clone(),
        scene,
        keyframes,
        queries,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entropy(scores: &[(String, f64)]) -> f64 {
        let total: f64 = scores.iter().map(|s| s.1).sum();
        scores
            .iter()
            .map(|(_, s)| s / total)
            .filter(|p| *p > 0.0)
            .map(|p| -p * p.ln())
            .sum()
    }

    #[test]
    fn single_landmark_is_reproducible() {
        let spec = SceneSpec::unique_labels(1, 11);
        let a = generate_scene(&spec).unwrap();
        let b = generate_scene(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.landmarks.len(), 1);
        let p = a.landmarks[0].position;
        for i in 0..3 {
            assert!(p[i] >= spec.bounds_min[i] && p[i] <= spec.bounds_max[i]);
        }
    }

    #[test]
    fn separation_is_respected() {
        let spec = SceneSpec {
            bounds_min: [0.0; 3],
            bounds_max: [10.0; 3],
            min_separation: 1.0,
            ..SceneSpec::unique_labels(30, 3)
        };
        let scene = generate_scene(&spec).unwrap();
        for (i, a) in scene.landmarks.iter().enumerate() {
            for b in &scene.landmarks[i + 1..] {
                assert!((a.position - b.position).norm() >= 1.0);
            }
        }
    }

    #[test]
    fn impossible_separation_fails() {
        let spec = SceneSpec {
            bounds_min: [0.0; 3],
            bounds_max: [1.0; 3],
            min_separation: 2.0,
            ..SceneSpec::unique_labels(3, 0)
        };
        assert!(generate_scene(&spec).is_err());
    }

    #[test]
    fn labels_are_balanced() {
        let scene = generate_scene(&SceneSpec::clustered(30, 0.3, 5)).unwrap();
        let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
        for l in &scene.landmarks {
            *counts.entry(&l.label).or_default() += 1;
        }
        assert_eq!(counts.len(), 12);
        assert!(counts.values().all(|&c| c == 2 || c == 3));
        let unique = generate_scene(&SceneSpec::unique_labels(30, 5)).unwrap();
        assert_eq!(unique.labels().values().collect::<std::collections::BTreeSet<_>>().len(), 30);
    }

    #[test]
    fn orbit_spacing_and_aim() {
        let target = Vector3::new(0.5, -0.2, 0.3);
        let poses = generate_trajectory(&TrajectorySpec::orbit(4, 2.0, 1.0), &target).unwrap();
        let centers: Vec<_> = poses.iter().map(|p| p.center() - target).collect();
        for i in 0..4 {
            let a = Vector2::new(centers[i].x, centers[i].y);
            let b = Vector2::new(centers[(i + 1) % 4].x, centers[(i + 1) % 4].y);
            assert!((a.angle(&b) - std::f64::consts::FRAC_PI_2).abs() < 1e-12);
        }
        for p in &poses {
            // Optical axis passes through the target.
            let t = p.transform(&target);
            assert!(t.z > 0.0);
            assert!(t.x.abs() < 1e-9 && t.y.abs() < 1e-9);
        }
    }

    #[test]
    fn trajectories_are_seeded() {
        let target = Vector3::zeros();
        for kind in [TrajectoryKind::Orbit, TrajectoryKind::Line, TrajectoryKind::RandomWalk] {
            let spec = TrajectorySpec {
                kind,
                seed: 9,
                ..TrajectorySpec::orbit(20, 3.0, 1.0)
            };
            let a = generate_trajectory(&spec, &target).unwrap();
            assert_eq!(a, generate_trajectory(&spec, &target).unwrap());
            for p in &a {
                let t = p.transform(&target);
                assert!(t.x.abs() < 1e-9 && t.y.abs() < 1e-9 && t.z > 0.0);
            }
        }
        assert!(generate_trajectory(&TrajectorySpec::orbit(0, 3.0, 1.0), &target).is_err());
    }

    #[test]
    fn noise_free_frame_matches_projection() {
        let spec = SimulationSpec::noise_free(10, 1, 2);
        let scene = generate_scene(&spec.scene).unwrap();
        let pose = look_at(&Vector3::new(3.0, 0.5, 1.5), &scene.centroid()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let frame = render_frame(&scene, &pose, &spec.intrinsics, &spec.noise, &mut rng).unwrap();
        assert!(frame.detections.len() >= 3);
        for (det, id) in frame.detections.iter().zip(&frame.landmark_ids) {
            let lm = &scene.landmarks[*id as usize];
            let exact =
                project_quadric_to_bbox(&lm.quadric().unwrap(), &pose, &spec.intrinsics, true).unwrap();
            assert_eq!(det.bbox, exact);
            assert_eq!(det.labels, vec![(lm.label.clone(), 1.0)]);
            let p = det.position.unwrap();
            assert!((p - pose.transform(&lm.position)).norm() < 1e-9);
        }
    }

    #[test]
    fn forced_confusion_swaps_top_label() {
        let spec = SceneSpec {
            vocabulary: vec!["cup".into(), "mug".into()],
            clusters: vec![vec!["cup".into(), "mug".into()]],
            confusion_rate: 1.0,
            ..SceneSpec::unique_labels(2, 0)
        };
        let noise = NoiseSpec {
            temperature: 0.5,
            ..NoiseSpec::noise_free()
        };
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let c = sample_confidences("cup", &spec, &noise, &mut rng);
            assert_eq!(c[0].0, "mug");
        }
    }

    #[test]
    fn temperature_controls_entropy() {
        let spec = SceneSpec::clustered(12, 0.3, 0);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut mean = |t: f64| {
            let noise = NoiseSpec {
                temperature: t,
                ..NoiseSpec::noise_free()
            };
            (0..2000)
                .map(|_| entropy(&sample_confidences("mug", &spec, &noise, &mut rng)))
                .sum::<f64>()
                / 2000.0
        };
        let cold = mean(0.0);
        let warm = mean(0.3);
        let hot = mean(50.0);
        assert_eq!(cold, 0.0);
        assert!(cold <= warm && warm <= hot);
        assert!((hot - 3f64.ln()).abs() < 1e-3);
    }

    #[test]
    fn dataset_is_deterministic() {
        let spec = SimulationSpec::stress(15, 10, 42);
        let a = simulate(&spec).unwrap();
        let b = simulate(&spec).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.queries[0].frame_id, spec.keyframes.n_frames as u64);
    }
}
