//! Pairwise multi-label likelihoods, context propagation over 1-hop neighbors and
//! top-τ candidate extraction.

use rayon::prelude::*;

use crate::graph::{GraphNode, LabelFrequencyTable, NormalizedConfidence, PriorGraph, QueryGraph};

/// Above this many node pairs the likelihoods are computed on demand instead of
/// being tabulated up front.
pub const DENSE_LIKELIHOOD_LIMIT: usize = 1_000_000;

const PARALLEL_PAIR_THRESHOLD: usize = 50_000;

/// Sum over matching labels of landmark frequency times detection confidence.
pub fn mlle_likelihood(frequencies: &LabelFrequencyTable, confidences: &NormalizedConfidence) -> f64 {
    confidences
        .entries()
        .iter()
        .filter_map(|(label, c)| frequencies.frequency(label).map(|nu| nu * c))
        .sum()
}

/// Agreement of the root-to-neighbor distances in the two graphs.
pub fn neighbor_weight(delta_prior: f64, delta_query: f64) -> f64 {
    1.0 / (1.0 + (delta_prior - delta_query).abs())
}

/// Scored `(prior, query)` node pair, by node index.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PairScore {
    pub prior: usize,
    pub query: usize,
    pub likelihood: f64,
    pub similarity: f64,
}

/// The chosen prior neighbor for one query neighbor of a root pair.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NeighborChoice {
    pub prior_neighbor: usize,
    pub query_neighbor: usize,
    pub weight: f64,
    pub weighted_likelihood: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NeighborPairSelection {
    pub root: (usize, usize),
    /// One entry per query neighbor of the root, in neighbor index order.
    pub selections: Vec<NeighborChoice>,
}

/// Lookup of pairwise likelihoods, either tabulated or evaluated on demand.
pub struct Likelihoods<'a> {
    prior: &'a PriorGraph,
    query: &'a QueryGraph,
    dense: Option<Vec<f64>>,
}

impl<'a> Likelihoods<'a> {
    pub fn new(prior: &'a PriorGraph, query: &'a QueryGraph) -> Self {
        let n = prior.len() * query.len();
        let dense = (n <= DENSE_LIKELIHOOD_LIMIT).then(|| {
            let mut table = vec![0.0; n];
            for (j, d) in query.nodes().iter().enumerate() {
                for (i, o) in prior.nodes().iter().enumerate() {
                    table[j * prior.len() + i] = mlle_likelihood(&o.frequencies, &d.confidences);
                }
            }
            table
        });
        Self { prior, query, dense }
    }

    pub fn get(&self, prior: usize, query: usize) -> f64 {
        match &self.dense {
            Some(t) => t[query * self.prior.len() + prior],
            None => mlle_likelihood(
                &self.prior.node(prior).frequencies,
                &self.query.node(query).confidences,
            ),
        }
    }

    pub fn is_dense(&self) -> bool {
        self.dense.is_some()
    }
}

/// For every query neighbor `m` of the root detection, the prior neighbor `n` of
/// the root landmark maximizing `w_nm · f(n, m)`. Ties go to the lower landmark id.
pub fn best_neighbor_set(
    root: (usize, usize),
    prior: &PriorGraph,
    query: &QueryGraph,
    likelihood: impl Fn(usize, usize) -> f64,
) -> NeighborPairSelection {
    let (root_prior, root_query) = root;
    let prior_neighbors = prior.neighbors(root_prior);
    let mut selections = Vec::new();
    if prior_neighbors.is_empty() {
        return NeighborPairSelection { root, selections };
    }
    let p_root = prior.node(root_prior).position();
    let q_root = query.node(root_query).position();
    let prior_deltas: Vec<f64> = prior_neighbors
        .iter()
        .map(|&n| (prior.node(n).position() - p_root).norm())
        .collect();
    for &m in query.neighbors(root_query) {
        let delta_q = (query.node(m).position() - q_root).norm();
        let mut best: Option<NeighborChoice> = None;
        for (&n, &delta_p) in prior_neighbors.iter().zip(&prior_deltas) {
            let weight = neighbor_weight(delta_p, delta_q);
            let choice = NeighborChoice {
                prior_neighbor: n,
                query_neighbor: m,
                weight,
                weighted_likelihood: weight * likelihood(n, m),
            };
            let better = match &best {
                None => true,
                Some(b) => {
                    choice.weighted_likelihood > b.weighted_likelihood
                        || (choice.weighted_likelihood == b.weighted_likelihood
                            && prior.node(n).key() < prior.node(b.prior_neighbor).key())
                }
            };
            if better {
                best = Some(choice);
            }
        }
        selections.extend(best);
    }
    NeighborPairSelection { root, selections }
}

/// Root likelihood plus the mean weighted likelihood of the selected neighbor pairs.
/// An empty selection leaves the root likelihood unchanged.
pub fn similarity_score(root_likelihood: f64, selection: &NeighborPairSelection) -> f64 {
    if selection.selections.is_empty() {
        return root_likelihood;
    }
    let sum: f64 = selection
        .selections
        .iter()
        .map(|s| s.weighted_likelihood)
        .sum();
    root_likelihood + sum / selection.selections.len() as f64
}

/// Likelihood and similarity of every `(prior, query)` pair.
#[derive(Debug, Clone, PartialEq)]
pub struct SimilarityTable {
    n_prior: usize,
    n_query: usize,
    prior_keys: Vec<u64>,
    likelihood: Vec<f64>,
    similarity: Vec<f64>,
}

impl SimilarityTable {
    pub fn n_prior(&self) -> usize {
        self.n_prior
    }

    pub fn n_query(&self) -> usize {
        self.n_query
    }

    pub fn likelihood(&self, prior: usize, query: usize) -> f64 {
        self.likelihood[query * self.n_prior + prior]
    }

    pub fn similarity(&self, prior: usize, query: usize) -> f64 {
        self.similarity[query * self.n_prior + prior]
    }

    /// Similarities of all priors against one query node.
    pub fn column(&self, query: usize) -> &[f64] {
        &self.similarity[query * self.n_prior..(query + 1) * self.n_prior]
    }

    pub fn pairs(&self) -> impl Iterator<Item = PairScore> + '_ {
        (0..self.n_query).flat_map(move |query| {
            (0..self.n_prior).map(move |prior| PairScore {
                prior,
                query,
                likelihood: self.likelihood(prior, query),
                similarity: self.similarity(prior, query),
            })
        })
    }

    /// Replaces every similarity through `f`, keeping likelihoods.
    pub fn map_similarity(&self, f: impl Fn(f64) -> f64) -> Self {
        let mut out = self.clone();
        out.similarity.iter_mut().for_each(|s| *s = f(*s));
        out
    }
}

/// Scores every pair. With `propagate` off the similarity is the bare likelihood.
pub fn score_all_pairs(prior: &PriorGraph, query: &QueryGraph, propagate: bool) -> SimilarityTable {
    let (np, nq) = (prior.len(), query.len());
    let lookup = Likelihoods::new(prior, query);
    let likelihood: Vec<f64> = match &lookup.dense {
        Some(t) => t.clone(),
        None => (0..nq)
            .flat_map(|j| (0..np).map(move |i| (i, j)))
            .map(|(i, j)| lookup.get(i, j))
            .collect(),
    };
    let mut similarity = likelihood.clone();
    if propagate && np > 0 {
        let fill = |(j, column): (usize, &mut [f64])| {
            for (i, s) in column.iter_mut().enumerate() {
                let sel = best_neighbor_set((i, j), prior, query, |n, m| lookup.get(n, m));
                *s = similarity_score(lookup.get(i, j), &sel);
            }
        };
        if np * nq >= PARALLEL_PAIR_THRESHOLD {
            similarity.par_chunks_mut(np).enumerate().for_each(fill);
        } else {
            similarity.chunks_mut(np).enumerate().for_each(fill);
        }
    }
    SimilarityTable {
        n_prior: np,
        n_query: nq,
        prior_keys: prior.nodes().iter().map(|n| n.key()).collect(),
        likelihood,
        similarity,
    }
}

/// Top-τ prior nodes per query node, as `(prior, query)` index pairs.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CandidateSet {
    pub pairs: Vec<(usize, usize)>,
    pub tau: usize,
}

impl CandidateSet {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn for_query(&self, query: usize) -> impl Iterator<Item = usize> + '_ {
        self.pairs
            .iter()
            .filter(move |(_, q)| *q == query)
            .map(|(p, _)| *p)
    }
}

/// Keeps exactly `min(τ, |priors|)` priors per query node ranked by similarity,
/// ties broken by lower landmark id. With `drop_zero_columns`, query nodes whose
/// similarities are all zero contribute nothing.
pub fn extract_candidates(table: &SimilarityTable, tau: usize, drop_zero_columns: bool) -> CandidateSet {
    let mut pairs = Vec::with_capacity(table.n_query * tau.min(table.n_prior));
    let mut order: Vec<usize> = Vec::with_capacity(table.n_prior);
    for j in 0..table.n_query {
        let column = table.column(j);
        if drop_zero_columns && column.iter().all(|&s| s == 0.0) {
            continue;
        }
        order.clear();
        order.extend(0..table.n_prior);
        order.sort_by(|&a, &b| {
            column[b]
                .total_cmp(&column[a])
                .then(table.prior_keys[a].cmp(&table.prior_keys[b]))
        });
        pairs.extend(order.iter().take(tau).map(|&i| (i, j)));
    }
    CandidateSet { pairs, tau }
}
