//! Prior (map) and query (frame) semantic graphs.
//!
//! Prior nodes are ellipsoidal landmarks carrying how often each label showed up
//! among the top-K predictions of their detections. Query nodes are the detections
//! of one frame carrying normalized top-K confidences. Both graphs connect nodes to
//! their nearest neighbors in 3D.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap, HashMap};
use std::path::Path;

use log::warn;
use nalgebra::{UnitQuaternion, Vector2, Vector3};

use crate::error::{Error, Result};
use crate::geometry::{BoundingBox, CameraIntrinsics, DualQuadric};

pub type LandmarkId = u64;

/// Default nearest-neighbor fan-out for graph edges.
pub const DEFAULT_K_EDGE: usize = 5;

/// Per-label detection frequencies of one landmark.
///
/// Frequencies are exact ratios of stored integer counts to the total number of
/// detections, so the counts are kept alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelFrequencyTable {
    total: u32,
    counts: BTreeMap<String, u32>,
    entries: Vec<(String, f64)>,
}

impl LabelFrequencyTable {
    /// Builds the table from per-detection label sets (the top-K labels of each detection).
    pub fn accumulate<S: AsRef<str>>(observations: &[Vec<S>]) -> Result<Self> {
        if observations.is_empty() {
            return Err(Error::NoDetections);
        }
        let mut counts: BTreeMap<String, u32> = BTreeMap::new();
        for obs in observations {
            let distinct: BTreeSet<&str> = obs.iter().map(|l| l.as_ref()).collect();
            for label in distinct {
                *counts.entry(label.to_owned()).or_default() += 1;
            }
        }
        let total = u32::try_from(observations.len())
            .map_err(|_| Error::invalid("too many observations"))?;
        Self::from_counts(total, counts)
    }

    pub fn from_counts(total: u32, counts: BTreeMap<String, u32>) -> Result<Self> {
        if total == 0 {
            return Err(Error::NoDetections);
        }
        if let Some((label, &c)) = counts.iter().find(|(_, &c)| c > total) {
            return Err(Error::invalid(format!(
                "label {label:?} counted {c} times in {total} detections"
            )));
        }
        let counts: BTreeMap<String, u32> = counts.into_iter().filter(|(_, c)| *c > 0).collect();
        let entries = counts
            .iter()
            .map(|(l, &c)| (l.clone(), f64::from(c) / f64::from(total)))
            .collect();
        Ok(Self {
            total,
            counts,
            entries,
        })
    }

    pub fn total_detections(&self) -> u32 {
        self.total
    }

    pub fn counts(&self) -> &BTreeMap<String, u32> {
        &self.counts
    }

    /// `(label, frequency)` pairs sorted by label.
    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn frequency(&self, label: &str) -> Option<f64> {
        self.counts
            .get(label)
            .map(|&c| f64::from(c) / f64::from(self.total))
    }
}

/// Free-function form of [`LabelFrequencyTable::accumulate`].
pub fn accumulate_label_frequencies<S: AsRef<str>>(
    observations: &[Vec<S>],
) -> Result<LabelFrequencyTable> {
    LabelFrequencyTable::accumulate(observations)
}

/// Top-K labels of one detection with scores rescaled to sum to one.
#[derive(Debug, Clone, PartialEq)]
pub struct NormalizedConfidence {
    entries: Vec<(String, f64)>,
}

impl NormalizedConfidence {
    /// Sorted by descending score, ties by label.
    pub fn entries(&self) -> &[(String, f64)] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn top_label(&self) -> Option<&str> {
        self.entries.first().map(|(l, _)| l.as_str())
    }

    pub fn labels(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(l, _)| l.as_str())
    }
}

/// Keeps the `k` best distinct labels and divides their scores by their sum.
///
/// Duplicate labels keep their highest score; equal scores at the cutoff are
/// broken by label order. Labels whose raw score is zero are not retained.
pub fn normalize_confidences<S: AsRef<str>>(
    raw: &[(S, f64)],
    k: usize,
) -> Result<NormalizedConfidence> {
    if k == 0 {
        return Err(Error::invalid("K must be at least 1"));
    }
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for (label, score) in raw {
        if !(score.is_finite() && *score >= 0.0) {
            return Err(Error::invalid(format!(
                "confidence for {:?} must be finite and non-negative, got {score}",
                label.as_ref()
            )));
        }
        let slot = best.entry(label.as_ref()).or_insert(*score);
        if *score > *slot {
            *slot = *score;
        }
    }
    let mut ranked: Vec<(&str, f64)> = best.into_iter().collect();
    ranked.sort_by(|a, b| b.1.total_cmp(&a.1).then_with(|| a.0.cmp(b.0)));
    ranked.truncate(k);
    ranked.retain(|(_, s)| *s > 0.0);
    let sum: f64 = ranked.iter().map(|(_, s)| s).sum();
    if !(sum > 0.0) {
        return Err(Error::DegenerateConfidence);
    }
    Ok(NormalizedConfidence {
        entries: ranked
            .into_iter()
            .map(|(l, s)| (l.to_owned(), s / sum))
            .collect(),
    })
}

/// Anything placed in 3D with a stable identifier.
pub trait GraphNode {
    fn key(&self) -> u64;
    fn position(&self) -> &Vector3<f64>;
}

/// A map landmark: an ellipsoid plus its label statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct PriorObjectNode {
    pub id: LandmarkId,
    pub position: Vector3<f64>,
    pub rotation: UnitQuaternion<f64>,
    /// Semi-axes in meters.
    pub scale: Vector3<f64>,
    pub frequencies: LabelFrequencyTable,
    quadric: DualQuadric,
}

impl PriorObjectNode {
    pub fn new(
        id: LandmarkId,
        position: Vector3<f64>,
        rotation: UnitQuaternion<f64>,
        scale: Vector3<f64>,
        frequencies: LabelFrequencyTable,
    ) -> Result<Self> {
        let quadric = DualQuadric::from_params(&position, &rotation, &scale)?;
        Ok(Self {
            id,
            position,
            rotation,
            scale,
            frequencies,
            quadric,
        })
    }

    pub fn quadric(&self) -> &DualQuadric {
        &self.quadric
    }
}

impl GraphNode for PriorObjectNode {
    fn key(&self) -> u64 {
        self.id
    }

    fn position(&self) -> &Vector3<f64> {
        &self.position
    }
}

/// One detection of the current frame.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryDetectionNode {
    /// Index of the detection in its frame.
    pub id: usize,
    pub bbox: BoundingBox,
    /// Camera-frame position in meters.
    pub position: Vector3<f64>,
    pub confidences: NormalizedConfidence,
    pub raw_confidences: Vec<(String, f64)>,
}

impl GraphNode for QueryDetectionNode {
    fn key(&self) -> u64 {
        self.id as u64
    }

    fn position(&self) -> &Vector3<f64> {
        &self.position
    }
}

/// Nodes plus an undirected edge set over node indices.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticGraph<N> {
    nodes: Vec<N>,
    edges: BTreeSet<(usize, usize)>,
    neighbors: Vec<Vec<usize>>,
    index: HashMap<u64, usize>,
}

pub type PriorGraph = SemanticGraph<PriorObjectNode>;
pub type QueryGraph = SemanticGraph<QueryDetectionNode>;

impl<N: GraphNode> SemanticGraph<N> {
    /// Edges are unordered index pairs; they are stored as `(low, high)`.
    pub fn new(nodes: Vec<N>, edges: impl IntoIterator<Item = (usize, usize)>) -> Result<Self> {
        let mut index = HashMap::with_capacity(nodes.len());
        for (i, n) in nodes.iter().enumerate() {
            if index.insert(n.key(), i).is_some() {
                return Err(Error::invalid(format!("duplicate node id {}", n.key())));
            }
        }
        let mut set = BTreeSet::new();
        let mut neighbors = vec![Vec::new(); nodes.len()];
        for (a, b) in edges {
            if a == b || a >= nodes.len() || b >= nodes.len() {
                return Err(Error::invalid(format!("invalid edge ({a}, {b})")));
            }
            if set.insert((a.min(b), a.max(b))) {
                neighbors[a].push(b);
                neighbors[b].push(a);
            }
        }
        for list in &mut neighbors {
            list.sort_unstable();
        }
        Ok(Self {
            nodes,
            edges: set,
            neighbors,
            index,
        })
    }

    pub fn nodes(&self) -> &[N] {
        &self.nodes
    }

    pub fn node(&self, i: usize) -> &N {
        &self.nodes[i]
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn edges(&self) -> &BTreeSet<(usize, usize)> {
        &self.edges
    }

    /// Edge set expressed with node ids instead of indices.
    pub fn edge_keys(&self) -> BTreeSet<(u64, u64)> {
        self.edges
            .iter()
            .map(|&(a, b)| {
                let (ka, kb) = (self.nodes[a].key(), self.nodes[b].key());
                (ka.min(kb), ka.max(kb))
            })
            .collect()
    }

    pub fn has_edge(&self, a: usize, b: usize) -> bool {
        self.edges.contains(&(a.min(b), a.max(b)))
    }

    /// Sorted 1-hop neighbor indices.
    pub fn neighbors(&self, i: usize) -> &[usize] {
        &self.neighbors[i]
    }

    pub fn index_of(&self, key: u64) -> Option<usize> {
        self.index.get(&key).copied()
    }
}

#[derive(PartialEq)]
struct Candidate {
    dist2: f64,
    index: usize,
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.dist2
            .total_cmp(&other.dist2)
            .then(self.index.cmp(&other.index))
    }
}

/// Undirected k-nearest-neighbor edges; distance ties prefer the lower index.
pub fn build_knn_edges(positions: &[Vector3<f64>], k_edge: usize) -> BTreeSet<(usize, usize)> {
    let n = positions.len();
    let mut edges = BTreeSet::new();
    if n < 2 || k_edge == 0 {
        return edges;
    }
    let k = k_edge.min(n - 1);
    let mut heap = BinaryHeap::with_capacity(k + 1);
    for (i, p) in positions.iter().enumerate() {
        heap.clear();
        for (j, q) in positions.iter().enumerate() {
            if i == j {
                continue;
            }
            let cand = Candidate {
                dist2: (p - q).norm_squared(),
                index: j,
            };
            if heap.len() < k {
                heap.push(cand);
            } else if cand < *heap.peek().expect("heap holds k > 0 entries") {
                heap.pop();
                heap.push(cand);
            }
        }
        for c in heap.drain() {
            edges.insert((i.min(c.index), i.max(c.index)));
        }
    }
    edges
}

/// How prior-graph edges are formed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum PriorEdgeMode {
    /// Union over keyframes of the KNN edges among the landmarks each keyframe sees.
    #[default]
    PerKeyframe,
    /// A single KNN pass over all landmarks.
    Global,
}

/// Assembles the map graph. Nodes are ordered by landmark id.
pub fn build_prior_graph(
    mut landmarks: Vec<PriorObjectNode>,
    keyframes: &[Vec<LandmarkId>],
    k_edge: usize,
    mode: PriorEdgeMode,
) -> Result<PriorGraph> {
    landmarks.sort_by_key(|n| n.id);
    let index: HashMap<LandmarkId, usize> =
        landmarks.iter().enumerate().map(|(i, n)| (n.id, i)).collect();
    let mut edges = BTreeSet::new();
    match mode {
        PriorEdgeMode::Global => {
            let positions: Vec<_> = landmarks.iter().map(|n| n.position).collect();
            edges = build_knn_edges(&positions, k_edge);
        }
        PriorEdgeMode::PerKeyframe => {
            for ids in keyframes {
                let mut members = ids
                    .iter()
                    .map(|id| index.get(id).copied().ok_or(Error::UnknownLandmark(*id)))
                    .collect::<Result<Vec<_>>>()?;
                members.sort_unstable();
                members.dedup();
                let positions: Vec<_> = members.iter().map(|&i| landmarks[i].position).collect();
                for (a, b) in build_knn_edges(&positions, k_edge) {
                    let (x, y) = (members[a], members[b]);
                    edges.insert((x.min(y), x.max(y)));
                }
            }
        }
    }
    SemanticGraph::new(landmarks, edges)
}

/// Dense metric depth image, row-major, meters.
#[derive(Debug, Clone, PartialEq)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    pub data: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32, data: Vec<f32>) -> Result<Self> {
        if data.len() != width as usize * height as usize {
            return Err(Error::invalid(format!(
                "depth buffer holds {} values, expected {width}x{height}",
                data.len()
            )));
        }
        Ok(Self {
            width,
            height,
            data,
        })
    }

    pub fn get(&self, u: u32, v: u32) -> f32 {
        self.data[v as usize * self.width as usize + u as usize]
    }

    /// Reads a 16-bit grayscale PNG where `meters = value / scale` (5000 for TUM RGB-D).
    pub fn from_png16(path: &Path, scale: f64) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        let decoder = png::Decoder::new(std::io::BufReader::new(file));
        let mut reader = decoder
            .read_info()
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        let size = reader
            .output_buffer_size()
            .ok_or_else(|| Error::invalid(format!("{}: image too large", path.display())))?;
        let mut buf = vec![0; size];
        let info = reader
            .next_frame(&mut buf)
            .map_err(|e| Error::invalid(format!("{}: {e}", path.display())))?;
        if info.color_type != png::ColorType::Grayscale || info.bit_depth != png::BitDepth::Sixteen {
            return Err(Error::invalid(format!(
                "{}: expected a 16-bit grayscale depth image",
                path.display()
            )));
        }
        let data = buf[..info.buffer_size()]
            .chunks_exact(2)
            .map(|b| (f64::from(u16::from_be_bytes([b[0], b[1]])) / scale) as f32)
            .collect();
        Self::new(info.width, info.height, data)
    }
}

/// Median of the valid depths inside the central half-area sub-box of `bbox`.
///
/// Pixel `(u, v)` is sampled at its integer coordinates.
pub fn robust_bbox_depth(depth: &DepthImage, bbox: &BoundingBox) -> Option<f64> {
    let c = bbox.center();
    let shrink = std::f64::consts::FRAC_1_SQRT_2;
    let hw = 0.5 * bbox.width() * shrink;
    let hh = 0.5 * bbox.height() * shrink;
    let u0 = (c.x - hw).ceil().max(0.0);
    let u1 = (c.x + hw).floor().min(f64::from(depth.width) - 1.0);
    let v0 = (c.y - hh).ceil().max(0.0);
    let v1 = (c.y + hh).floor().min(f64::from(depth.height) - 1.0);
    if u0 > u1 || v0 > v1 {
        return None;
    }
    let mut values = Vec::new();
    for v in v0 as u32..=v1 as u32 {
        for u in u0 as u32..=u1 as u32 {
            let d = depth.get(u, v);
            if d.is_finite() && d > 0.0 {
                values.push(f64::from(d));
            }
        }
    }
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let mid = values.len() / 2;
    Some(if values.len() % 2 == 1 {
        values[mid]
    } else {
        0.5 * (values[mid - 1] + values[mid])
    })
}

/// A detection as read from a log: box, raw labels and an optional known position.
#[derive(Debug, Clone, PartialEq)]
pub struct RawDetection {
    pub bbox: BoundingBox,
    pub labels: Vec<(String, f64)>,
    pub position: Option<Vector3<f64>>,
}

/// Why a detection was left out of the query graph.
#[derive(Debug, Clone, PartialEq)]
pub struct DroppedDetection {
    pub index: usize,
    pub reason: String,
}

/// Builds the per-frame graph. Detections without a usable position or label
/// distribution are dropped and reported rather than failing the frame.
pub fn build_query_graph(
    detections: &[RawDetection],
    depth: Option<&DepthImage>,
    intrinsics: &CameraIntrinsics,
    top_k: usize,
    k_edge: usize,
) -> Result<(QueryGraph, Vec<DroppedDetection>)> {
    if let Some(d) = depth {
        if d.width != intrinsics.width || d.height != intrinsics.height {
            return Err(Error::invalid(format!(
                "depth image is {}x{} but intrinsics say {}x{}",
                d.width, d.height, intrinsics.width, intrinsics.height
            )));
        }
    }
    let mut nodes = Vec::with_capacity(detections.len());
    let mut dropped = Vec::new();
    let mut drop = |index: usize, reason: String| {
        warn!("dropping detection {index}: {reason}");
        dropped.push(DroppedDetection { index, reason });
    };
    for (index, det) in detections.iter().enumerate() {
        let Some(bbox) = det.bbox.clamp_to(intrinsics) else {
            drop(index, "bounding box outside the image".into());
            continue;
        };
        let confidences = match normalize_confidences(&det.labels, top_k) {
            Ok(c) => c,
            Err(e) => {
                drop(index, e.to_string());
                continue;
            }
        };
        let position = match (det.position, depth) {
            (Some(p), _) => p,
            (None, Some(d)) => match robust_bbox_depth(d, &bbox) {
                Some(z) => intrinsics.back_project(&bbox.center(), z),
                None => {
                    drop(index, "no valid depth inside the bounding box".into());
                    continue;
                }
            },
            (None, None) => {
                drop(index, "no position and no depth image".into());
                continue;
            }
        };
        if !(position.z > 0.0) || !position.iter().all(|v| v.is_finite()) {
            drop(index, format!("position {position:?} is not in front of the camera"));
            continue;
        }
        nodes.push(QueryDetectionNode {
            id: index,
            bbox,
            position,
            confidences,
            raw_confidences: det.labels.clone(),
        });
    }
    let positions: Vec<_> = nodes.iter().map(|n| n.position).collect();
    let edges = build_knn_edges(&positions, k_edge);
    Ok((SemanticGraph::new(nodes, edges)?, dropped))
}

/// Pixel center of a box, exposed for callers computing bearings.
pub fn bbox_center(bbox: &BoundingBox) -> Vector2<f64> {
    bbox.center()
}
