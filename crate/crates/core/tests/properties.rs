use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use nalgebra::{UnitQuaternion, Vector3};
use objloc_core::geometry::{
    bbox_to_gaussian, normalized_wasserstein, wasserstein2_sq, BoundingBox, Pose,
};
use objloc_core::graph::{
    build_knn_edges, build_prior_graph, normalize_confidences, LabelFrequencyTable,
    NormalizedConfidence, PriorEdgeMode, PriorObjectNode, QueryDetectionNode, RawDetection,
    SemanticGraph,
};
use objloc_core::io;
use objloc_core::matching::{extract_candidates, mlle_likelihood, score_all_pairs};
use objloc_core::metrics::{shannon_entropy, success_rate, AssociationCounts, SuccessMode};
use objloc_core::pipeline::{DetectionFrame, FrameResult, Keyframe, ObjectMap};
use objloc_core::pose::LocalizationStatus;
use proptest::prelude::*;

const LABELS: [&str; 8] = ["bag", "book", "bottle", "chair", "cup", "lamp", "mug", "plant"];

fn brute_knn(positions: &[Vector3<f64>], k: usize) -> BTreeSet<(usize, usize)> {
    let mut edges = BTreeSet::new();
    for (i, p) in positions.iter().enumerate() {
        let mut others: Vec<(f64, usize)> = positions
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != i)
            .map(|(j, q)| ((p - q).norm_squared(), j))
            .collect();
        others.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        for &(_, j) in others.iter().take(k) {
            edges.insert((i.min(j), i.max(j)));
        }
    }
    edges
}

fn grid_points(max: usize) -> impl Strategy<Value = Vec<Vector3<f64>>> {
    prop::collection::vec((-4i32..4, -4i32..4, -2i32..2), 0..max).prop_map(|v| {
        v.into_iter()
            .map(|(x, y, z)| Vector3::new(x as f64, y as f64, z as f64))
            .collect()
    })
}

fn cloud(min: usize, max: usize) -> impl Strategy<Value = Vec<Vector3<f64>>> {
    prop::collection::vec((-10.0..10.0f64, -10.0..10.0f64, 0.5..10.0f64), min..max)
        .prop_map(|v| v.into_iter().map(|(x, y, z)| Vector3::new(x, y, z)).collect())
}

fn raw_scores() -> impl Strategy<Value = Vec<(String, f64)>> {
    prop::collection::vec((0..LABELS.len(), 0.0..1.0f64), 1..12).prop_map(|v| {
        v.into_iter()
            .map(|(l, s)| (LABELS[l].to_string(), s))
            .collect()
    })
}

fn confidences() -> impl Strategy<Value = NormalizedConfidence> {
    (raw_scores(), 1usize..6).prop_filter_map("degenerate", |(raw, k)| {
        normalize_confidences(&raw, k).ok()
    })
}

fn frequency_table() -> impl Strategy<Value = LabelFrequencyTable> {
    (1u32..20, prop::collection::btree_map(0..LABELS.len(), 0u32..20, 0..6)).prop_map(
        |(total, counts)| {
            let counts = counts
                .into_iter()
                .map(|(l, c)| (LABELS[l].to_string(), c.min(total)))
                .collect();
            LabelFrequencyTable::from_counts(total, counts).unwrap()
        },
    )
}

fn bbox() -> impl Strategy<Value = BoundingBox> {
    (0.0..600.0f64, 0.0..440.0f64, 1.0..200.0f64, 1.0..200.0f64)
        .prop_map(|(x, y, w, h)| BoundingBox::new(x, y, x + w, y + h).unwrap())
}

fn landmark(id: u64, position: Vector3<f64>, freqs: LabelFrequencyTable) -> PriorObjectNode {
    PriorObjectNode::new(
        id,
        position,
        UnitQuaternion::identity(),
        Vector3::new(0.1, 0.2, 0.15),
        freqs,
    )
    .unwrap()
}

fn detection(id: usize, position: Vector3<f64>, confidences: NormalizedConfidence) -> QueryDetectionNode {
    QueryDetectionNode {
        id,
        bbox: BoundingBox::new(10.0, 10.0, 50.0, 60.0).unwrap(),
        position,
        confidences,
        raw_confidences: Vec::new(),
    }
}

type Graphs = (
    SemanticGraph<PriorObjectNode>,
    SemanticGraph<QueryDetectionNode>,
);

fn graphs() -> impl Strategy<Value = Graphs> {
    (
        prop::collection::vec((cloud(1, 2), frequency_table()), 1..10),
        prop::collection::vec((cloud(1, 2), confidences()), 1..8),
        1usize..4,
    )
        .prop_map(|(prior, query, k)| {
            let prior: Vec<_> = prior
                .into_iter()
                .enumerate()
                .map(|(i, (p, f))| landmark(i as u64 * 7 + 3, p[0], f))
                .collect();
            let query: Vec<_> = query
                .into_iter()
                .enumerate()
                .map(|(i, (p, c))| detection(i, p[0], c))
                .collect();
            let pe = build_knn_edges(&prior.iter().map(|n| n.position).collect::<Vec<_>>(), k);
            let qe = build_knn_edges(&query.iter().map(|n| n.position).collect::<Vec<_>>(), k);
            (
                SemanticGraph::new(prior, pe).unwrap(),
                SemanticGraph::new(query, qe).unwrap(),
            )
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    #[test]
    fn knn_matches_brute_force_with_ties(points in grid_points(60), k in 0usize..8) {
        prop_assert_eq!(build_knn_edges(&points, k), brute_knn(&points, k));
    }

    #[test]
    fn knn_matches_brute_force_large(points in cloud(100, 201), k in 1usize..7) {
        prop_assert_eq!(build_knn_edges(&points, k), brute_knn(&points, k));
    }

    #[test]
    fn knn_is_invariant_to_node_order(
        (points, perm) in cloud(2, 40).prop_flat_map(|p| {
            let n = p.len();
            (Just(p), Just((0..n).collect::<Vec<_>>()).prop_shuffle())
        }),
        k in 1usize..6,
    ) {
        let permuted: Vec<_> = perm.iter().map(|&i| points[i]).collect();
        let original = build_knn_edges(&points, k);
        let mapped: BTreeSet<_> = build_knn_edges(&permuted, k)
            .into_iter()
            .map(|(a, b)| (perm[a].min(perm[b]), perm[a].max(perm[b])))
            .collect();
        prop_assert_eq!(original, mapped);
    }

    #[test]
    fn knn_degree_is_at_least_k(points in cloud(2, 50), k in 1usize..6) {
        let edges = build_knn_edges(&points, k);
        for i in 0..points.len() {
            let degree = edges.iter().filter(|(a, b)| *a == i || *b == i).count();
            prop_assert!(degree >= k.min(points.len() - 1));
        }
    }

    #[test]
    fn prior_graph_is_union_of_keyframe_knn(
        points in cloud(1, 25),
        keyframes in prop::collection::vec(prop::collection::btree_set(0usize..25, 0..10), 0..6),
        k in 1usize..4,
    ) {
        let n = points.len();
        let ids: Vec<u64> = (0..n as u64).map(|i| 100 - i).collect();
        let nodes: Vec<_> = points
            .iter()
            .zip(&ids)
            .map(|(p, &id)| landmark(id, *p, LabelFrequencyTable::from_counts(1, BTreeMap::new()).unwrap()))
            .collect();
        let members: Vec<Vec<u64>> = keyframes
            .iter()
            .map(|s| s.iter().filter(|&&i| i < n).map(|&i| ids[i]).collect())
            .collect();
        let graph = build_prior_graph(nodes, &members, k, PriorEdgeMode::PerKeyframe).unwrap();
        let mut expected = BTreeSet::new();
        for kf in &members {
            let mut sorted = kf.clone();
            sorted.sort_unstable();
            let pos: Vec<_> = sorted.iter().map(|id| points[(100 - id) as usize]).collect();
            for (a, b) in brute_knn(&pos, k) {
                expected.insert((sorted[a].min(sorted[b]), sorted[a].max(sorted[b])));
            }
        }
        prop_assert_eq!(graph.edge_keys(), expected);
    }

    #[test]
    fn normalized_confidences_sum_to_one(raw in raw_scores(), k in 1usize..8) {
        match normalize_confidences(&raw, k) {
            Ok(c) => {
                let sum: f64 = c.entries().iter().map(|e| e.1).sum();
                prop_assert!((sum - 1.0).abs() < 1e-12);
                prop_assert!(c.len() <= k);
                prop_assert!(c.entries().windows(2).all(|w| w[0].1 >= w[1].1));
                let kept: BTreeSet<&str> = c.labels().collect();
                prop_assert_eq!(kept.len(), c.len());
            }
            Err(_) => prop_assert!(raw.iter().all(|r| r.1 == 0.0)),
        }
    }

    #[test]
    fn likelihood_is_bounded(f in frequency_table(), c in confidences()) {
        let l = mlle_likelihood(&f, &c);
        prop_assert!((0.0..=1.0 + 1e-12).contains(&l));
        let brute: f64 = c
            .entries()
            .iter()
            .flat_map(|(a, s)| f.entries().iter().filter(move |(b, _)| a == b).map(move |(_, nu)| nu * s))
            .sum();
        prop_assert!((l - brute).abs() < 1e-12);
    }

    #[test]
    fn likelihood_ignores_label_names(
        f in frequency_table(),
        c in confidences(),
        perm in Just((0..LABELS.len()).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let rename = |l: &str| LABELS[perm[LABELS.iter().position(|x| *x == l).unwrap()]].to_string();
        let f2 = LabelFrequencyTable::from_counts(
            f.total_detections(),
            f.counts().iter().map(|(l, n)| (rename(l), *n)).collect(),
        ).unwrap();
        let raw: Vec<_> = c.entries().iter().map(|(l, s)| (rename(l), *s)).collect();
        let c2 = normalize_confidences(&raw, raw.len()).unwrap();
        prop_assert!((mlle_likelihood(&f, &c) - mlle_likelihood(&f2, &c2)).abs() < 1e-12);
    }

    #[test]
    fn similarity_never_drops_below_likelihood((prior, query) in graphs()) {
        let with = score_all_pairs(&prior, &query, true);
        let without = score_all_pairs(&prior, &query, false);
        for p in with.pairs() {
            prop_assert!(p.similarity >= p.likelihood);
            prop_assert_eq!(without.similarity(p.prior, p.query), p.likelihood);
        }
    }

    #[test]
    fn candidates_survive_monotone_rescaling((prior, query) in graphs(), tau in 1usize..5) {
        let table = score_all_pairs(&prior, &query, true);
        let rescaled = table.map_similarity(|s| 3.0 * s * s * s + 0.5);
        let a = extract_candidates(&table, tau, false);
        let b = extract_candidates(&rescaled, tau, false);
        prop_assert_eq!(&a.pairs, &b.pairs);
        prop_assert_eq!(a.len(), query.len() * tau.min(prior.len()));
    }

    #[test]
    fn wasserstein_is_a_metric(a in bbox(), b in bbox(), c in bbox()) {
        let (ga, gb, gc) = (bbox_to_gaussian(&a), bbox_to_gaussian(&b), bbox_to_gaussian(&c));
        let d = |x, y| wasserstein2_sq(x, y).sqrt();
        prop_assert_eq!(wasserstein2_sq(&ga, &ga), 0.0);
        prop_assert!((d(&ga, &gb) - d(&gb, &ga)).abs() < 1e-12);
        prop_assert!(d(&ga, &gc) <= d(&ga, &gb) + d(&gb, &gc) + 1e-9);
        let w = normalized_wasserstein(&ga, &gb, 100.0);
        prop_assert!(w > 0.0 && w <= 1.0);
    }

    #[test]
    fn entropy_is_bounded(c in confidences()) {
        let h = shannon_entropy(&c);
        prop_assert!(h >= 0.0);
        prop_assert!(h <= (c.len() as f64).ln() + 1e-12);
    }

    #[test]
    fn success_over_successes_dominates(
        errors in prop::collection::vec(prop::option::of(0.0..3.0f64), 1..50),
        threshold in 0.1..2.0f64,
        strict in any::<bool>(),
    ) {
        let succ = success_rate(&errors, threshold, SuccessMode::Succ, strict).unwrap();
        let all = success_rate(&errors, threshold, SuccessMode::All, strict).unwrap();
        prop_assert!(all <= succ + 1e-15);
        prop_assert!((0.0..=1.0).contains(&succ));
    }

    #[test]
    fn f1_lies_between_precision_and_recall(tp in 0usize..100, fp in 0usize..100, fn_ in 0usize..100) {
        let c = AssociationCounts { tp, fp, fn_, per_frame: Vec::new() };
        let (p, r, f) = (c.precision(), c.recall(), c.f1());
        prop_assert!(f >= p.min(r) - 1e-12 && f <= p.max(r) + 1e-12);
        prop_assert!(f <= 0.5 * (p + r) + 1e-12);
    }

    #[test]
    fn map_round_trips(
        items in prop::collection::vec((cloud(1, 2), frequency_table(), (-1.0..1.0f64, -1.0..1.0f64, -1.0..1.0f64, 0.1..1.0f64)), 0..6),
        keyframes in prop::collection::vec(prop::collection::vec(0u64..50, 0..5), 0..4),
    ) {
        let landmarks: Vec<_> = items
            .into_iter()
            .enumerate()
            .map(|(i, (p, f, (x, y, z, w)))| {
                let q = UnitQuaternion::from_quaternion(nalgebra::Quaternion::new(w, x, y, z));
                PriorObjectNode::new(i as u64, p[0], q, Vector3::new(0.1, 0.3, 0.2), f).unwrap()
            })
            .collect();
        let map = ObjectMap {
            landmarks,
            keyframes: keyframes
                .into_iter()
                .enumerate()
                .map(|(i, ids)| Keyframe { id: i as u64, landmark_ids: ids })
                .collect(),
        };
        let back = io::parse_map(Path::new("map.json"), &io::map_to_string(&map)).unwrap();
        prop_assert_eq!(&back.keyframes, &map.keyframes);
        prop_assert_eq!(back.landmarks.len(), map.landmarks.len());
        for (a, b) in back.landmarks.iter().zip(&map.landmarks) {
            prop_assert_eq!(a.id, b.id);
            prop_assert_eq!(a.position, b.position);
            prop_assert_eq!(a.scale, b.scale);
            prop_assert_eq!(&a.frequencies, &b.frequencies);
            prop_assert!(a.rotation.angle_to(&b.rotation) < 1e-12);
        }
    }

    #[test]
    fn detection_log_round_trips(
        frames in prop::collection::vec(
            (0u64..1000, 0.0..100.0f64, prop::collection::vec((bbox(), raw_scores(), prop::option::of(cloud(1, 2))), 0..5)),
            0..5,
        ),
    ) {
        let frames: Vec<DetectionFrame> = frames
            .into_iter()
            .map(|(id, t, dets)| DetectionFrame {
                frame_id: id,
                timestamp: t,
                detections: dets
                    .into_iter()
                    .map(|(bbox, labels, pos)| RawDetection { bbox, labels, position: pos.map(|p| p[0]) })
                    .collect(),
                depth: None,
            })
            .collect();
        let text = io::detection_log_to_string(&frames);
        let back = io::parse_detection_log(Path::new("log.jsonl"), &text, Path::new(".")).unwrap();
        prop_assert_eq!(back, frames);
    }

    #[test]
    fn results_round_trip(
        rows in prop::collection::vec(
            (0u64..1000, 0.0..100.0f64, prop::option::of((cloud(1, 2), -3.0..3.0f64)), 0.0..1.0f64,
             prop::collection::vec((0u64..50, 0usize..20), 0..4), prop::option::of(0.0..2.0f64)),
            0..6,
        ),
    ) {
        let results: Vec<FrameResult> = rows
            .into_iter()
            .map(|(id, t, pose, was, corr, entropy)| FrameResult {
                frame_id: id,
                timestamp: t,
                status: if pose.is_some() { LocalizationStatus::Success } else { LocalizationStatus::NoValidSample },
                pose: pose.map(|(c, yaw)| {
                    Pose::from_camera_in_world(UnitQuaternion::from_euler_angles(0.3, -0.2, yaw), c[0])
                }),
                was,
                correspondences: corr,
                entropy,
            })
            .collect();
        let back = io::parse_results(Path::new("r.jsonl"), &io::results_to_string(&results)).unwrap();
        prop_assert_eq!(back.len(), results.len());
        for (a, b) in back.iter().zip(&results) {
            prop_assert_eq!(a.frame_id, b.frame_id);
            prop_assert_eq!(a.timestamp, b.timestamp);
            prop_assert_eq!(a.status, b.status);
            prop_assert_eq!(a.was, b.was);
            prop_assert_eq!(&a.correspondences, &b.correspondences);
            prop_assert_eq!(a.entropy, b.entropy);
            match (a.pose, b.pose) {
                (Some(x), Some(y)) => {
                    prop_assert!((x.center() - y.center()).norm() < 1e-9);
                    prop_assert!(x.rotation.angle_to(&y.rotation) < 1e-9);
                }
                (None, None) => {}
                _ => prop_assert!(false, "pose presence changed"),
            }
        }
    }
}
