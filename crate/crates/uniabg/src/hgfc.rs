//! Heterogeneous graph filtering calibration.
//!
//! Two bipartite top-k graphs are built against the satellite gallery: one
//! from drone features (real-to-real) and one from their auxiliary pseudo
//! view counterparts (pseudo-to-real). Satellite nodes are scored by how
//! consistently the same source indices reach them in both graphs; candidate
//! pairs must be mutual (present in both graphs) and pass the consistency
//! threshold, then cluster-level weighted voting picks the association.
//! The greedy nearest-neighbor baseline lives here too.

use std::collections::BTreeSet;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cluster::PseudoLabels;
use crate::store::EmbeddingSet;
use crate::util::par_fill_rows;
use crate::{Error, Result};

/// Query x gallery cosine similarity matrix; entries lie in [-1, 1] for
/// normalized inputs.
#[derive(Debug, Clone)]
pub struct SimMatrix {
    pub rows: usize,
    pub cols: usize,
    pub values: Vec<f64>,
}

impl SimMatrix {
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.cols + j]
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.values[i * self.cols..(i + 1) * self.cols]
    }
}

/// Per-query ordered top-k gallery neighbors (descending similarity, ties by
/// ascending gallery index).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NeighborGraph {
    pub k: usize,
    pub edges: Vec<Vec<usize>>,
}

impl NeighborGraph {
    pub fn edge_count(&self) -> usize {
        self.edges.iter().map(|e| e.len()).sum()
    }
}

/// One retained drone-satellite candidate.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub sat_index: usize,
    pub similarity: f64,
    pub consistency: f64,
    /// `similarity * consistency`.
    pub weight: f64,
}

/// Retained candidates per drone index.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct CandidateSet {
    pub per_drone: Vec<Vec<Candidate>>,
}

/// Final association of one drone instance.
#[derive(Debug, Clone, PartialEq)]
pub struct Association {
    /// Winning satellite cluster; `None` for instance-level pairings where no
    /// satellite labels were supplied or the matched satellite is noise.
    pub sat_cluster: Option<usize>,
    /// Representative satellite instance index.
    pub sat_rep: usize,
    pub weight: f64,
}

/// Drone-indexed association map; every drone appears exactly once, either
/// associated or in the unassociated set.
#[derive(Debug, Clone, PartialEq)]
pub struct AssociationMap {
    pub assoc: Vec<Option<Association>>,
}

impl AssociationMap {
    pub fn associated_count(&self) -> usize {
        self.assoc.iter().filter(|a| a.is_some()).count()
    }

    pub fn unassociated(&self) -> Vec<usize> {
        self.assoc
            .iter()
            .enumerate()
            .filter(|(_, a)| a.is_none())
            .map(|(i, _)| i)
            .collect()
    }
}

/// Vote pooling mode: `Instance` scores each drone alone; `Cluster` pools
/// votes over each drone cluster and assigns the winner to every member.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VoteMode {
    Instance,
    Cluster,
}

impl std::str::FromStr for VoteMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "instance" => Ok(VoteMode::Instance),
            "cluster" => Ok(VoteMode::Cluster),
            other => Err(Error::Param(format!("unknown vote mode `{other}`"))),
        }
    }
}

/// Dense cosine similarity between two normalized sets (dot products).
pub fn cosine_similarity_matrix(a: &EmbeddingSet, b: &EmbeddingSet) -> Result<SimMatrix> {
    if a.dim != b.dim {
        return Err(Error::Shape(format!(
            "dim mismatch {} vs {}",
            a.dim, b.dim
        )));
    }
    let rows = a.count();
    let cols = b.count();
    let mut values = vec![0.0f64; rows * cols];
    par_fill_rows(&mut values, cols.max(1), |i, out| {
        if cols == 0 {
            return;
        }
        let qa = a.row(i);
        for j in 0..cols {
            out[j] = qa.iter().zip(b.row(j)).map(|(x, y)| x * y).sum();
        }
    });
    Ok(SimMatrix { rows, cols, values })
}

/// Per-query top-k gallery indices, similarity-sorted, ties broken by
/// ascending gallery index.
pub fn topk_neighbors(sim: &SimMatrix, k: usize) -> Result<NeighborGraph> {
    if k == 0 {
        return Err(Error::Param("k must be at least 1".into()));
    }
    let mut edges = Vec::with_capacity(sim.rows);
    for i in 0..sim.rows {
        let row = sim.row(i);
        let mut order: Vec<usize> = (0..sim.cols).collect();
        order.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order.truncate(k);
        edges.push(order);
    }
    Ok(NeighborGraph { k, edges })
}

/// For each satellite index, the set of query indices that list it.
pub fn reverse_adjacency(graph: &NeighborGraph, gallery_size: usize) -> Vec<BTreeSet<usize>> {
    let mut rev = vec![BTreeSet::new(); gallery_size];
    for (q, neighbors) in graph.edges.iter().enumerate() {
        for &j in neighbors {
            rev[j].insert(q);
        }
    }
    rev
}

/// Cross-graph consistency score per satellite node: the fraction (of k) of
/// source indices linking to it in both graphs. Source index i of the
/// pseudo-to-real graph is the APV generated from drone i.
pub fn consistency_scores(
    g_ru: &NeighborGraph,
    g_pu: &NeighborGraph,
    gallery_size: usize,
    k: usize,
) -> Result<Vec<f64>> {
    if g_ru.edges.len() != g_pu.edges.len() {
        return Err(Error::Shape(format!(
            "graph source counts differ: {} vs {}",
            g_ru.edges.len(),
            g_pu.edges.len()
        )));
    }
    let rev_ru = reverse_adjacency(g_ru, gallery_size);
    let rev_pu = reverse_adjacency(g_pu, gallery_size);
    Ok((0..gallery_size)
        .map(|j| {
            let overlap = rev_ru[j].intersection(&rev_pu[j]).count();
            (overlap as f64 / k as f64).min(1.0)
        })
        .collect())
}

/// Keeps pair (i, j) iff j is a top-k neighbor of drone i in both graphs and
/// the satellite's consistency score strictly exceeds the threshold. Each
/// survivor carries weight `sim(i, j) * score[j]`.
pub fn mutual_filter(
    sim_ru: &SimMatrix,
    g_ru: &NeighborGraph,
    g_pu: &NeighborGraph,
    scores: &[f64],
    threshold: f64,
) -> Result<CandidateSet> {
    if !(0.0..=1.0).contains(&threshold) {
        return Err(Error::Param(format!("threshold {threshold} not in [0,1]")));
    }
    if scores.len() != sim_ru.cols {
        return Err(Error::Shape(format!(
            "{} scores for {} satellites",
            scores.len(),
            sim_ru.cols
        )));
    }
    let mut per_drone = Vec::with_capacity(g_ru.edges.len());
    for (i, ru_neighbors) in g_ru.edges.iter().enumerate() {
        let pu_neighbors = &g_pu.edges[i];
        let mut kept = Vec::new();
        for &j in ru_neighbors {
            if pu_neighbors.contains(&j) && scores[j] > threshold {
                let similarity = sim_ru.at(i, j);
                kept.push(Candidate {
                    sat_index: j,
                    similarity,
                    consistency: scores[j],
                    weight: similarity * scores[j],
                });
            }
        }
        per_drone.push(kept);
    }
    Ok(CandidateSet { per_drone })
}

/// Weighted voting over satellite clusters.
///
/// Noise satellites carry no cluster and never receive votes. In cluster
/// mode, votes are pooled across each drone cluster's members and the winner
/// is assigned to every member that has at least one retained candidate;
/// noise drones fall back to instance mode on their own candidates. Argmax
/// ties go to the lowest cluster id.
pub fn weighted_vote(
    candidates: &CandidateSet,
    sat_labels: &PseudoLabels,
    drone_labels: &PseudoLabels,
    mode: VoteMode,
) -> Result<AssociationMap> {
    let n = candidates.per_drone.len();
    if drone_labels.len() != n {
        return Err(Error::Shape(format!(
            "{} drone labels for {} drones",
            drone_labels.len(),
            n
        )));
    }
    let sat_k = sat_labels.num_clusters();

    // Per-drone vote tally over satellite clusters.
    let tally = |drones: &[usize]| -> Vec<f64> {
        let mut votes = vec![0.0f64; sat_k];
        for &i in drones {
            for c in &candidates.per_drone[i] {
                let l = sat_labels.labels[c.sat_index];
                if l >= 0 {
                    votes[l as usize] += c.weight;
                }
            }
        }
        votes
    };
    let winner = |votes: &[f64]| -> Option<usize> {
        let mut best: Option<(usize, f64)> = None;
        for (c, &v) in votes.iter().enumerate() {
            if v > 0.0 && best.map_or(true, |(_, bv)| v > bv) {
                best = Some((c, v));
            }
        }
        best.map(|(c, _)| c)
    };
    // Best candidate of drone i within cluster c.
    let best_in_cluster = |i: usize, c: usize| -> Option<&Candidate> {
        candidates.per_drone[i]
            .iter()
            .filter(|cand| sat_labels.labels[cand.sat_index] == c as i64)
            .max_by(|a, b| {
                a.weight
                    .partial_cmp(&b.weight)
                    .unwrap_or(std::cmp::Ordering::Equal)
                    .then(b.sat_index.cmp(&a.sat_index))
            })
    };

    let mut assoc: Vec<Option<Association>> = vec![None; n];

    let assign_instance = |i: usize, assoc: &mut Vec<Option<Association>>| {
        let votes = tally(&[i]);
        if let Some(c) = winner(&votes) {
            let rep = best_in_cluster(i, c).expect("winner cluster has a candidate");
            assoc[i] = Some(Association {
                sat_cluster: Some(c),
                sat_rep: rep.sat_index,
                weight: votes[c],
            });
        }
    };

    match mode {
        VoteMode::Instance => {
            for i in 0..n {
                assign_instance(i, &mut assoc);
            }
        }
        VoteMode::Cluster => {
            let drone_k = drone_labels.num_clusters();
            let mut members: Vec<Vec<usize>> = vec![vec![]; drone_k];
            for (i, &l) in drone_labels.labels.iter().enumerate() {
                if l >= 0 {
                    members[l as usize].push(i);
                } else {
                    // Noise drones vote alone.
                    assign_instance(i, &mut assoc);
                }
            }
            for group in &members {
                let votes = tally(group);
                let Some(c) = winner(&votes) else { continue };
                // Cluster-level fallback representative for members with no
                // candidate inside the winning cluster.
                let group_rep = group
                    .iter()
                    .filter_map(|&i| best_in_cluster(i, c))
                    .max_by(|a, b| {
                        a.weight
                            .partial_cmp(&b.weight)
                            .unwrap_or(std::cmp::Ordering::Equal)
                            .then(b.sat_index.cmp(&a.sat_index))
                    })
                    .map(|cand| cand.sat_index)
                    .expect("winning cluster received a vote");
                for &i in group {
                    if candidates.per_drone[i].is_empty() {
                        continue;
                    }
                    let own = tally(&[i]);
                    let (rep, weight) = match best_in_cluster(i, c) {
                        Some(cand) => (cand.sat_index, own[c]),
                        None => (group_rep, 0.0),
                    };
                    assoc[i] = Some(Association {
                        sat_cluster: Some(c),
                        sat_rep: rep,
                        weight,
                    });
                }
            }
        }
    }
    Ok(AssociationMap { assoc })
}

/// Greedy nearest-neighbor baseline: each drone pairs with its most similar
/// satellite (ties to the lowest index). Cluster ids come from `sat_labels`
/// when supplied; noise satellites leave the cluster unset.
pub fn greedy_associate(
    sim: &SimMatrix,
    sat_labels: Option<&PseudoLabels>,
) -> Result<AssociationMap> {
    if sim.cols == 0 {
        return Err(Error::Argument("greedy association over an empty gallery".into()));
    }
    let mut assoc = Vec::with_capacity(sim.rows);
    for i in 0..sim.rows {
        let row = sim.row(i);
        let mut best = 0usize;
        for j in 1..sim.cols {
            if row[j] > row[best] {
                best = j;
            }
        }
        let sat_cluster = sat_labels.and_then(|ls| {
            let l = ls.labels[best];
            (l >= 0).then_some(l as usize)
        });
        assoc.push(Some(Association {
            sat_cluster,
            sat_rep: best,
            weight: row[best],
        }));
    }
    Ok(AssociationMap { assoc })
}

/// JSON export row for the association map.
#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AssociationRecord {
    pub drone_id: String,
    pub sat_cluster: Option<usize>,
    pub sat_rep_id: String,
    pub weight: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct AssociationExport {
    pub pairs: Vec<AssociationRecord>,
    pub unassociated: Vec<String>,
}

/// Serializes the association map with ids resolved from the two sets.
pub fn export_associations(
    map: &AssociationMap,
    drone_ids: &[String],
    sat_ids: &[String],
) -> Result<AssociationExport> {
    if drone_ids.len() != map.assoc.len() {
        return Err(Error::Shape(format!(
            "{} drone ids for {} associations",
            drone_ids.len(),
            map.assoc.len()
        )));
    }
    let mut pairs = Vec::new();
    let mut unassociated = Vec::new();
    for (i, a) in map.assoc.iter().enumerate() {
        match a {
            Some(a) => pairs.push(AssociationRecord {
                drone_id: drone_ids[i].clone(),
                sat_cluster: a.sat_cluster,
                sat_rep_id: sat_ids[a.sat_rep].clone(),
                weight: a.weight,
            }),
            None => unassociated.push(drone_ids[i].clone()),
        }
    }
    Ok(AssociationExport {
        pairs,
        unassociated,
    })
}

pub fn write_associations(export: &AssociationExport, path: &Path) -> Result<()> {
    let raw = serde_json::to_string_pretty(export).expect("associations serialize");
    std::fs::write(path, raw).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_associations(path: &Path) -> Result<AssociationExport> {
    let raw =
        std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    serde_json::from_str(&raw).map_err(|e| Error::Format(format!("associations: {e}")))
}
