//! Stochastic pose search over candidate correspondences.
//!
//! Triples of candidate pairs are drawn at random, kept only when the landmark
//! triple and the detection triple are wired identically in their graphs, and
//! resolved with P3P. Every resulting pose is scored by how well the projected
//! landmark boxes line up with the detected boxes; the best pose wins.

use std::collections::{BTreeMap, HashSet};

use nalgebra::Vector3;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{
    bbox_to_gaussian, normalized_wasserstein, p3p_solve, pixel_to_bearing, project_quadric_to_bbox,
    CameraIntrinsics, GaussianBox, Pose,
};
use crate::graph::{GraphNode, PriorEdgeMode, PriorGraph, QueryGraph, DEFAULT_K_EDGE};
use crate::matching::{extract_candidates, score_all_pairs, CandidateSet};

/// How the landmark and detection triples of a sample must be connected.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConnectivityRule {
    /// Every pair is an edge in both graphs or in neither.
    #[default]
    Exact,
    /// Every detection edge is also a landmark edge.
    QuerySubset,
}

/// Which ray of a detection is fed to P3P.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BearingSource {
    /// Direction of the detection's 3D position.
    #[default]
    Position,
    /// Ray through the bounding-box center pixel.
    BboxCenter,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatcherConfig {
    /// Labels kept per detection.
    pub top_k: usize,
    /// Candidate landmarks kept per detection.
    pub tau: usize,
    /// Pixel scale of the normalized Wasserstein similarity.
    pub wasserstein_scale: f64,
    pub n_iter: usize,
    pub k_edge: usize,
    pub rng_seed: u64,
    /// Stop as soon as the alignment score exceeds this.
    pub early_exit: Option<f64>,
    /// Propagate neighbor likelihoods into the similarity; off means similarity = likelihood.
    pub propagate: bool,
    pub connectivity: ConnectivityRule,
    /// Forbid one landmark from explaining two detections.
    pub one_to_one: bool,
    pub bearing_source: BearingSource,
    pub clamp_projection: bool,
    pub drop_zero_columns: bool,
    pub prior_edge_mode: PriorEdgeMode,
    /// Split the iteration budget over this many workers (1 = sequential).
    pub workers: usize,
}

impl Default for MatcherConfig {
    fn default() -> Self {
        Self {
            top_k: 5,
            tau: 3,
            wasserstein_scale: 100.0,
            n_iter: 200,
            k_edge: DEFAULT_K_EDGE,
            rng_seed: 0,
            early_exit: Some(0.99),
            propagate: true,
            connectivity: ConnectivityRule::Exact,
            one_to_one: false,
            bearing_source: BearingSource::Position,
            clamp_projection: true,
            drop_zero_columns: false,
            prior_edge_mode: PriorEdgeMode::PerKeyframe,
            workers: 1,
        }
    }
}

impl MatcherConfig {
    pub fn validate(&self) -> Result<()> {
        if self.top_k == 0 {
            return Err(Error::invalid("K must be at least 1"));
        }
        if self.tau == 0 {
            return Err(Error::invalid("tau must be at least 1"));
        }
        if !(self.wasserstein_scale > 0.0) {
            return Err(Error::invalid("C must be positive"));
        }
        if self.n_iter == 0 {
            return Err(Error::invalid("n_iter must be at least 1"));
        }
        if self.k_edge == 0 {
            return Err(Error::invalid("k_edge must be at least 1"));
        }
        if self.workers == 0 {
            return Err(Error::invalid("workers must be at least 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LocalizationStatus {
    Success,
    InsufficientDetections,
    NoValidSample,
    Degenerate,
}

impl LocalizationStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            Self::Success => "success",
            Self::InsufficientDetections => "insufficient-detections",
            Self::NoValidSample => "no-valid-sample",
            Self::Degenerate => "degenerate",
        }
    }
}

/// A selected `(landmark, detection)` pair by node index, with its box similarity.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub prior: usize,
    pub query: usize,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WasScore {
    pub was: f64,
    pub correspondences: Vec<Correspondence>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalizationResult {
    pub status: LocalizationStatus,
    pub pose: Option<Pose>,
    pub correspondences: Vec<Correspondence>,
    pub was: f64,
    pub candidates: CandidateSet,
    pub iterations: usize,
    pub valid_samples: usize,
    /// Retained score after every improvement, in order.
    pub history: Vec<f64>,
}

impl LocalizationResult {
    fn failed(status: LocalizationStatus, candidates: CandidateSet) -> Self {
        Self {
            status,
            pose: None,
            correspondences: Vec::new(),
            was: 0.0,
            candidates,
            iterations: 0,
            valid_samples: 0,
            history: Vec::new(),
        }
    }

    /// Correspondences as `(landmark id, detection id)`.
    pub fn id_pairs(&self, prior: &PriorGraph, query: &QueryGraph) -> Vec<(u64, usize)> {
        self.correspondences
            .iter()
            .map(|c| (prior.node(c.prior).id, query.node(c.query).id))
            .collect()
    }
}

/// Canonical order-free key of a sampled triple.
pub type SampleKey = [(usize, usize); 3];

pub fn sample_key(sample: &[(usize, usize); 3]) -> SampleKey {
    let mut key = *sample;
    key.sort_unstable();
    key
}

/// A triple is usable when it involves three distinct landmarks and detections,
/// both induced subgraphs are wired the same way, and it was not drawn before.
pub fn is_valid_sample(
    sample: &[(usize, usize); 3],
    prior: &PriorGraph,
    query: &QueryGraph,
    used: &HashSet<SampleKey>,
    rule: ConnectivityRule,
) -> bool {
    let [(p0, q0), (p1, q1), (p2, q2)] = *sample;
    if p0 == p1 || p0 == p2 || p1 == p2 || q0 == q1 || q0 == q2 || q1 == q2 {
        return false;
    }
    if !connectivity_matches(sample, prior, query, rule) {
        return false;
    }
    !used.contains(&sample_key(sample))
}

fn connectivity_matches(
    sample: &[(usize, usize); 3],
    prior: &PriorGraph,
    query: &QueryGraph,
    rule: ConnectivityRule,
) -> bool {
    [(0, 1), (0, 2), (1, 2)].iter().all(|&(a, b)| {
        let pe = prior.has_edge(sample[a].0, sample[b].0);
        let qe = query.has_edge(sample[a].1, sample[b].1);
        match rule {
            ConnectivityRule::Exact => pe == qe,
            ConnectivityRule::QuerySubset => pe || !qe,
        }
    })
}

/// Candidates grouped per detection, with everything the scorer needs precomputed.
struct Scorer<'a> {
    prior: &'a PriorGraph,
    groups: Vec<(usize, Vec<usize>)>,
    query_boxes: Vec<GaussianBox>,
    intrinsics: &'a CameraIntrinsics,
    scale: f64,
    clamp: bool,
    one_to_one: bool,
}

impl<'a> Scorer<'a> {
    fn new(
        candidates: &CandidateSet,
        prior: &'a PriorGraph,
        query: &QueryGraph,
        intrinsics: &'a CameraIntrinsics,
        scale: f64,
        clamp: bool,
        one_to_one: bool,
    ) -> Self {
        let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
        for &(p, q) in &candidates.pairs {
            let list = groups.entry(q).or_default();
            if !list.contains(&p) {
                list.push(p);
            }
        }
        Self {
            prior,
            groups: groups.into_iter().collect(),
            query_boxes: query.nodes().iter().map(|n| bbox_to_gaussian(&n.bbox)).collect(),
            intrinsics,
            scale,
            clamp,
            one_to_one,
        }
    }

    fn score(&self, pose: &Pose) -> WasScore {
        let mut projected: BTreeMap<usize, Option<GaussianBox>> = BTreeMap::new();
        let mut scored: Vec<Correspondence> = Vec::new();
        for (q, priors) in &self.groups {
            for &p in priors {
                let g = *projected.entry(p).or_insert_with(|| {
                    project_quadric_to_bbox(
                        self.prior.node(p).quadric(),
                        pose,
                        self.intrinsics,
                        self.clamp,
                    )
                    .map(|b| bbox_to_gaussian(&b))
                });
                if let Some(g) = g {
                    scored.push(Correspondence {
                        prior: p,
                        query: *q,
                        score: normalized_wasserstein(&g, &self.query_boxes[*q], self.scale),
                    });
                }
            }
        }
        let key = |c: &Correspondence| self.prior.node(c.prior).key();
        let correspondences = if self.one_to_one {
            scored.sort_by(|a, b| {
                b.score
                    .total_cmp(&a.score)
                    .then(a.query.cmp(&b.query))
                    .then(key(a).cmp(&key(b)))
            });
            let mut used_prior = HashSet::new();
            let mut used_query = HashSet::new();
            let mut picked: Vec<Correspondence> = scored
                .into_iter()
                .filter(|c| {
                    if used_query.contains(&c.query) || used_prior.contains(&c.prior) {
                        return false;
                    }
                    used_query.insert(c.query);
                    used_prior.insert(c.prior);
                    true
                })
                .collect();
            picked.sort_by_key(|c| c.query);
            picked
        } else {
            let mut best: BTreeMap<usize, Correspondence> = BTreeMap::new();
            for c in scored {
                match best.get(&c.query) {
                    Some(b) if b.score > c.score || (b.score == c.score && key(b) <= key(&c)) => {}
                    _ => {
                        best.insert(c.query, c);
                    }
                }
            }
            best.into_values().collect()
        };
        let was = if correspondences.is_empty() {
            0.0
        } else {
            correspondences.iter().map(|c| c.score).sum::<f64>() / correspondences.len() as f64
        };
        WasScore {
            was,
            correspondences,
        }
    }
}

/// Alignment score of a pose: per detection the candidate landmark whose projected
/// box is most similar to the detected box, averaged over the selected pairs.
pub fn calculate_was(
    pose: &Pose,
    candidates: &CandidateSet,
    prior: &PriorGraph,
    query: &QueryGraph,
    intrinsics: &CameraIntrinsics,
    scale: f64,
) -> WasScore {
    Scorer::new(candidates, prior, query, intrinsics, scale, true, false).score(pose)
}

struct Best {
    was: f64,
    pose: Pose,
    correspondences: Vec<Correspondence>,
    iteration: usize,
}

#[derive(Default)]
struct SearchOutcome {
    best: Option<Best>,
    iterations: usize,
    valid: usize,
    history: Vec<f64>,
}

struct Search<'a> {
    candidates: &'a CandidateSet,
    prior: &'a PriorGraph,
    query: &'a QueryGraph,
    bearings: Vec<Vector3<f64>>,
    scorer: Scorer<'a>,
    rule: ConnectivityRule,
    early_exit: Option<f64>,
}

impl Search<'_> {
    fn run(&self, iterations: std::ops::Range<usize>, seed: u64) -> SearchOutcome {
        let n = self.candidates.len();
        let total_triples = (n as u128) * (n as u128 - 1) * (n as u128 - 2) / 6;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut used: HashSet<SampleKey> = HashSet::new();
        let mut out = SearchOutcome::default();
        for iteration in iterations {
            if used.len() as u128 >= total_triples {
                break;
            }
            out.iterations += 1;
            let picked = rand::seq::index::sample(&mut rng, n, 3);
            let sample = [0, 1, 2].map(|i| self.candidates.pairs[picked.index(i)]);
            let valid = is_valid_sample(&sample, self.prior, self.query, &used, self.rule);
            used.insert(sample_key(&sample));
            if !valid {
                continue;
            }
            out.valid += 1;
            let world = sample.map(|(p, _)| self.prior.node(p).position);
            let rays = sample.map(|(_, q)| self.bearings[q]);
            for pose in p3p_solve(&world, &rays) {
                let s = self.scorer.score(&pose);
                let current = out.best.as_ref().map_or(0.0, |b| b.was);
                if s.was > current {
                    out.history.push(s.was);
                    out.best = Some(Best {
                        was: s.was,
                        pose,
                        correspondences: s.correspondences,
                        iteration,
                    });
                }
            }
            if let (Some(limit), Some(b)) = (self.early_exit, &out.best) {
                if b.was > limit {
                    break;
                }
            }
        }
        out
    }
}

/// Independent seed for stream `stream` of a run seeded with `seed`.
pub fn derive_seed(seed: u64, stream: u64) -> u64 {
    // splitmix64 finalizer
    let mut z = seed ^ stream.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Full localization of one frame against the map.
pub fn estimate_pose(
    query: &QueryGraph,
    prior: &PriorGraph,
    config: &MatcherConfig,
    intrinsics: &CameraIntrinsics,
) -> LocalizationResult {
    let empty = CandidateSet {
        pairs: Vec::new(),
        tau: config.tau,
    };
    if query.len() < 3 || prior.len() < 3 {
        return LocalizationResult::failed(LocalizationStatus::InsufficientDetections, empty);
    }
    let table = score_all_pairs(prior, query, config.propagate);
    let candidates = extract_candidates(&table, config.tau, config.drop_zero_columns);
    if candidates.len() < 3 {
        return LocalizationResult::failed(LocalizationStatus::InsufficientDetections, candidates);
    }
    let bearings = query
        .nodes()
        .iter()
        .map(|n| match config.bearing_source {
            BearingSource::Position => n.position.normalize(),
            BearingSource::BboxCenter => pixel_to_bearing(&n.bbox.center(), intrinsics),
        })
        .collect();
    let search = Search {
        candidates: &candidates,
        prior,
        query,
        bearings,
        scorer: Scorer::new(
            &candidates,
            prior,
            query,
            intrinsics,
            config.wasserstein_scale,
            config.clamp_projection,
            config.one_to_one,
        ),
        rule: config.connectivity,
        early_exit: config.early_exit,
    };

    let outcome = if config.workers <= 1 {
        search.run(0..config.n_iter, config.rng_seed)
    } else {
        let workers = config.workers.min(config.n_iter);
        let chunk = config.n_iter.div_ceil(workers);
        let parts: Vec<SearchOutcome> = (0..workers)
            .into_par_iter()
            .map(|w| {
                let start = w * chunk;
                let end = ((w + 1) * chunk).min(config.n_iter);
                search.run(start..end, derive_seed(config.rng_seed, w as u64))
            })
            .collect();
        parts.into_iter().fold(SearchOutcome::default(), |mut acc, part| {
            acc.iterations += part.iterations;
            acc.valid += part.valid;
            let take = match (&acc.best, &part.best) {
                (_, None) => false,
                (None, Some(_)) => true,
                (Some(a), Some(b)) => b.was > a.was || (b.was == a.was && b.iteration < a.iteration),
            };
            if take {
                acc.history.push(part.best.as_ref().map_or(0.0, |b| b.was));
                acc.best = part.best;
            }
            acc
        })
    };

    let status = match (&outcome.best, outcome.valid) {
        (_, 0) => LocalizationStatus::NoValidSample,
        (None, _) => LocalizationStatus::Degenerate,
        (Some(_), _) => LocalizationStatus::Success,
    };
    let (pose, correspondences, was) = match outcome.best {
        Some(b) => (Some(b.pose), b.correspondences, b.was),
        None => (None, Vec::new(), 0.0),
    };
    LocalizationResult {
        status,
        pose,
        correspondences,
        was,
        candidates,
        iterations: outcome.iterations,
        valid_samples: outcome.valid,
        history: outcome.history,
    }
}
