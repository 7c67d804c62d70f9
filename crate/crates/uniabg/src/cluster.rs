//! DBSCAN pseudo-labels over cosine distance and prototype memory banks.
//!
//! Clustering runs on l2-normalized features with distance `1 - dot(u, v)`.
//! Cluster ids are numbered by the order in which their first core point is
//! reached scanning point indices ascending, so output is deterministic and
//! independent of any parallel neighbor search.

use std::collections::HashMap;
use std::path::Path;

use crate::store::{row_norm, EmbeddingSet, ViewTag};
use crate::{Error, Result};

/// Per-row cluster ids; -1 marks a DBSCAN noise point.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PseudoLabels {
    pub labels: Vec<i64>,
}

impl PseudoLabels {
    /// Number of non-noise clusters (labels form a contiguous 0..K range).
    pub fn num_clusters(&self) -> usize {
        self.labels
            .iter()
            .filter(|&&l| l >= 0)
            .map(|&l| l as usize + 1)
            .max()
            .unwrap_or(0)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    /// JSON export as {id: label} for inspection.
    pub fn write_json(&self, ids: &[String], path: &Path) -> Result<()> {
        if ids.len() != self.labels.len() {
            return Err(Error::Shape(format!(
                "{} ids for {} labels",
                ids.len(),
                self.labels.len()
            )));
        }
        let map: serde_json::Map<String, serde_json::Value> = ids
            .iter()
            .zip(&self.labels)
            .map(|(id, &l)| (id.clone(), serde_json::json!(l)))
            .collect();
        let raw = serde_json::to_string_pretty(&map).expect("labels serialize");
        std::fs::write(path, raw).map_err(|e| Error::io(path.display().to_string(), e))
    }

    pub fn read_json(ids: &[String], path: &Path) -> Result<Self> {
        let raw =
            std::fs::read_to_string(path).map_err(|e| Error::io(path.display().to_string(), e))?;
        let map: HashMap<String, i64> =
            serde_json::from_str(&raw).map_err(|e| Error::Format(format!("labels: {e}")))?;
        let labels = ids
            .iter()
            .map(|id| {
                map.get(id)
                    .copied()
                    .ok_or_else(|| Error::Data(format!("no label for id `{id}`")))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(PseudoLabels { labels })
    }
}

/// Cluster prototypes for one view, unit-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct MemoryDictionary {
    pub dim: usize,
    pub prototypes: Vec<f64>,
    pub view: ViewTag,
    pub member_counts: Vec<usize>,
}

impl MemoryDictionary {
    pub fn num_clusters(&self) -> usize {
        self.member_counts.len()
    }

    pub fn prototype(&self, k: usize) -> &[f64] {
        &self.prototypes[k * self.dim..(k + 1) * self.dim]
    }
}

fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    1.0 - a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>()
}

/// DBSCAN over cosine distance.
///
/// Core points have at least `min_samples` neighbors within `eps` (inclusive,
/// counting themselves). Clusters are maximal density-connected sets of core
/// points plus their border points; a border point adjacent to several
/// clusters joins the lowest cluster id.
pub fn dbscan(set: &EmbeddingSet, eps: f64, min_samples: usize) -> Result<PseudoLabels> {
    if eps <= 0.0 {
        return Err(Error::Param(format!("eps must be positive, got {eps}")));
    }
    if min_samples == 0 {
        return Err(Error::Param("min_samples must be positive".into()));
    }
    let n = set.count();
    if n == 0 {
        return Ok(PseudoLabels { labels: vec![] });
    }

    // Exact neighbor lists; quadratic but desk-scale.
    let mut neighbors: Vec<Vec<usize>> = vec![Vec::new(); n];
    for i in 0..n {
        for j in 0..n {
            if cosine_distance(set.row(i), set.row(j)) <= eps {
                neighbors[i].push(j);
            }
        }
    }
    let core: Vec<bool> = neighbors.iter().map(|ns| ns.len() >= min_samples).collect();

    // Connected components over core points, numbered by first core point
    // encountered in ascending index order.
    let mut labels = vec![-1i64; n];
    let mut next = 0i64;
    for start in 0..n {
        if !core[start] || labels[start] >= 0 {
            continue;
        }
        let id = next;
        next += 1;
        let mut stack = vec![start];
        labels[start] = id;
        while let Some(p) = stack.pop() {
            for &q in &neighbors[p] {
                if core[q] && labels[q] < 0 {
                    labels[q] = id;
                    stack.push(q);
                }
            }
        }
    }

    // Border points: lowest adjacent cluster id.
    for i in 0..n {
        if core[i] {
            continue;
        }
        let mut best: Option<i64> = None;
        for &q in &neighbors[i] {
            if core[q] {
                let c = labels[q];
                best = Some(best.map_or(c, |b: i64| b.min(c)));
            }
        }
        if let Some(c) = best {
            labels[i] = c;
        }
    }

    Ok(PseudoLabels { labels })
}

/// Per-cluster arithmetic mean of member rows, then l2-normalized. Noise
/// points contribute nothing.
pub fn compute_prototypes(set: &EmbeddingSet, labels: &PseudoLabels) -> Result<MemoryDictionary> {
    if labels.len() != set.count() {
        return Err(Error::Shape(format!(
            "{} labels for {} rows",
            labels.len(),
            set.count()
        )));
    }
    let k = labels.num_clusters();
    if k == 0 {
        return Err(Error::EmptyMemory);
    }
    let dim = set.dim;
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0usize; k];
    for (i, &l) in labels.labels.iter().enumerate() {
        if l < 0 {
            continue;
        }
        let l = l as usize;
        counts[l] += 1;
        let row = set.row(i);
        for (s, v) in sums[l * dim..(l + 1) * dim].iter_mut().zip(row) {
            *s += v;
        }
    }
    for (c, count) in counts.iter().enumerate() {
        if *count == 0 {
            return Err(Error::Data(format!("cluster {c} has no members")));
        }
        let block = &mut sums[c * dim..(c + 1) * dim];
        for v in block.iter_mut() {
            *v /= *count as f64;
        }
        let norm = row_norm(block);
        if norm < 1e-300 {
            return Err(Error::Data(format!("cluster {c} mean has zero norm")));
        }
        for v in block.iter_mut() {
            *v /= norm;
        }
    }
    Ok(MemoryDictionary {
        dim,
        prototypes: sums,
        view: set.view,
        member_counts: counts,
    })
}

/// Momentum update of one prototype:
/// `p <- normalize(momentum * p + (1 - momentum) * query)`.
pub fn memory_update(
    memory: &mut MemoryDictionary,
    query: &[f64],
    label: usize,
    momentum: f64,
) -> Result<()> {
    if label >= memory.num_clusters() {
        return Err(Error::Index(format!(
            "label {label} out of range (K={})",
            memory.num_clusters()
        )));
    }
    if query.len() != memory.dim {
        return Err(Error::Shape(format!(
            "query dim {} vs memory dim {}",
            query.len(),
            memory.dim
        )));
    }
    if !(0.0..=1.0).contains(&momentum) {
        return Err(Error::Param(format!("momentum {momentum} not in [0,1]")));
    }
    let dim = memory.dim;
    let block = &mut memory.prototypes[label * dim..(label + 1) * dim];
    for (p, q) in block.iter_mut().zip(query) {
        *p = momentum * *p + (1.0 - momentum) * q;
    }
    let norm = row_norm(block);
    if norm < 1e-300 {
        return Err(Error::Data(format!(
            "updated prototype {label} collapsed to zero"
        )));
    }
    for p in block.iter_mut() {
        *p /= norm;
    }
    Ok(())
}

/// Quadratic-time DBSCAN reference used by tests and the acceptance suite.
/// Independently implemented with a full distance matrix and union-find over
/// core pairs; components are renumbered by minimal core point index, border
/// points join the lowest adjacent cluster id.
pub fn dbscan_reference(set: &EmbeddingSet, eps: f64, min_samples: usize) -> PseudoLabels {
    let n = set.count();
    if n == 0 {
        return PseudoLabels { labels: vec![] };
    }
    let mut dist = vec![0.0f64; n * n];
    for i in 0..n {
        for j in 0..n {
            dist[i * n + j] = cosine_distance(set.row(i), set.row(j));
        }
    }
    let degree = |i: usize| (0..n).filter(|&j| dist[i * n + j] <= eps).count();
    let core: Vec<bool> = (0..n).map(|i| degree(i) >= min_samples).collect();

    // Union-find over density-connected core pairs.
    let mut parent: Vec<usize> = (0..n).collect();
    fn find(parent: &mut Vec<usize>, x: usize) -> usize {
        let mut r = x;
        while parent[r] != r {
            r = parent[r];
        }
        let mut c = x;
        while parent[c] != c {
            let nx = parent[c];
            parent[c] = r;
            c = nx;
        }
        r
    }
    for i in 0..n {
        for j in 0..n {
            if core[i] && core[j] && dist[i * n + j] <= eps {
                let (a, b) = (find(&mut parent, i), find(&mut parent, j));
                if a != b {
                    parent[a.max(b)] = a.min(b);
                }
            }
        }
    }
    // Number components by their minimal core member index.
    let mut roots: Vec<usize> = (0..n).filter(|&i| core[i]).map(|i| find(&mut parent, i)).collect();
    roots.sort_unstable();
    roots.dedup();
    let root_id: HashMap<usize, i64> = roots
        .iter()
        .enumerate()
        .map(|(k, &r)| (r, k as i64))
        .collect();

    let mut labels = vec![-1i64; n];
    for i in 0..n {
        if core[i] {
            labels[i] = root_id[&find(&mut parent, i)];
        }
    }
    for i in 0..n {
        if core[i] {
            continue;
        }
        let mut best: Option<i64> = None;
        for j in 0..n {
            if core[j] && dist[i * n + j] <= eps {
                let c = labels[j];
                best = Some(best.map_or(c, |b: i64| b.min(c)));
            }
        }
        if let Some(c) = best {
            labels[i] = c;
        }
    }
    PseudoLabels { labels }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::store::l2_normalize;
    use proptest::prelude::*;
    use rand::Rng;

    fn unit_set(rows: Vec<Vec<f64>>) -> EmbeddingSet {
        let dim = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        l2_normalize(&EmbeddingSet::new(dim, flat, ids, ViewTag::Drone).unwrap()).unwrap()
    }

    fn random_unit_set(n: usize, dim: usize, seed: u64) -> EmbeddingSet {
        let mut rng = crate::util::seeded_rng(seed);
        let rows: Vec<Vec<f64>> = (0..n)
            .map(|_| (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();
        unit_set(rows)
    }

    #[test]
    fn two_tight_groups_two_clusters() {
        // Three near A = e1, three near B = e2, eps 0.1, min_samples 3.
        let rows = vec![
            vec![1.0, 0.001, 0.0],
            vec![1.0, -0.002, 0.001],
            vec![1.0, 0.0, -0.001],
            vec![0.001, 1.0, 0.0],
            vec![-0.002, 1.0, 0.001],
            vec![0.0, 1.0, -0.001],
        ];
        let set = unit_set(rows);
        let labels = dbscan(&set, 0.1, 3).unwrap();
        assert_eq!(labels.labels[..3], [0, 0, 0]);
        assert_eq!(labels.labels[3..], [1, 1, 1]);
    }

    #[test]
    fn single_point_min_samples_two_is_noise() {
        let set = unit_set(vec![vec![1.0, 0.0]]);
        let labels = dbscan(&set, 0.5, 2).unwrap();
        assert_eq!(labels.labels, vec![-1]);
    }

    #[test]
    fn identical_points_one_cluster() {
        let set = unit_set(vec![vec![1.0, 0.0]; 5]);
        let labels = dbscan(&set, 0.01, 5).unwrap();
        assert_eq!(labels.labels, vec![0; 5]);
    }

    #[test]
    fn empty_set_empty_labels() {
        let set = EmbeddingSet::new(2, vec![], vec![], ViewTag::Drone).unwrap();
        assert!(dbscan(&set, 0.5, 2).unwrap().is_empty());
    }

    #[test]
    fn bad_eps_rejected() {
        let set = unit_set(vec![vec![1.0, 0.0]]);
        assert!(matches!(dbscan(&set, 0.0, 2), Err(Error::Param(_))));
    }

    #[test]
    fn matches_reference_on_random_instances() {
        let mut rng = crate::util::seeded_rng(3);
        for trial in 0..20 {
            let n = rng.gen_range(5..60);
            let dim = rng.gen_range(2..8);
            let set = random_unit_set(n, dim, 100 + trial);
            let eps = rng.gen_range(0.05..1.5);
            let min_samples = rng.gen_range(1..6);
            let a = dbscan(&set, eps, min_samples).unwrap();
            let b = dbscan_reference(&set, eps, min_samples);
            assert_eq!(a.labels, b.labels, "n={n} eps={eps} min={min_samples}");
        }
    }

    #[test]
    fn non_noise_points_near_a_core_point() {
        let set = random_unit_set(80, 4, 9);
        let eps = 0.4;
        let min_samples = 3;
        let labels = dbscan(&set, eps, min_samples).unwrap();
        for i in 0..set.count() {
            if labels.labels[i] < 0 {
                continue;
            }
            let near_core = (0..set.count()).any(|j| {
                labels.labels[j] == labels.labels[i]
                    && cosine_distance(set.row(i), set.row(j)) <= eps
                    && (0..set.count())
                        .filter(|&m| cosine_distance(set.row(j), set.row(m)) <= eps)
                        .count()
                        >= min_samples
            });
            assert!(near_core, "point {i} not within eps of a core of its cluster");
        }
    }

    #[test]
    fn prototypes_mean_then_normalize() {
        let set = unit_set(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let labels = PseudoLabels { labels: vec![0, 0] };
        let mem = compute_prototypes(&set, &labels).unwrap();
        let r = 1.0 / 2.0f64.sqrt();
        assert!((mem.prototype(0)[0] - r).abs() < 1e-12);
        assert!((mem.prototype(0)[1] - r).abs() < 1e-12);
        assert_eq!(mem.member_counts, vec![2]);
    }

    #[test]
    fn singleton_cluster_prototype_is_the_point() {
        let set = unit_set(vec![vec![0.0, 1.0]]);
        let labels = PseudoLabels { labels: vec![0] };
        let mem = compute_prototypes(&set, &labels).unwrap();
        assert_eq!(mem.prototype(0), set.row(0));
    }

    #[test]
    fn prototypes_match_brute_force_means() {
        let set = random_unit_set(50, 3, 21);
        // Two clusters split by index parity, a few noise points.
        let labels = PseudoLabels {
            labels: (0..50)
                .map(|i| if i % 7 == 0 { -1 } else { (i % 2) as i64 })
                .collect(),
        };
        let mem = compute_prototypes(&set, &labels).unwrap();
        for k in 0..2usize {
            let members: Vec<usize> = (0..50)
                .filter(|&i| labels.labels[i] == k as i64)
                .collect();
            assert_eq!(mem.member_counts[k], members.len());
            let mut mean = vec![0.0; 3];
            for &i in &members {
                for (m, v) in mean.iter_mut().zip(set.row(i)) {
                    *m += v / members.len() as f64;
                }
            }
            let norm = row_norm(&mean);
            for (a, m) in mem.prototype(k).iter().zip(&mean) {
                assert!((a - m / norm).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn all_noise_is_empty_memory_error() {
        let set = unit_set(vec![vec![1.0, 0.0], vec![0.0, 1.0]]);
        let labels = PseudoLabels {
            labels: vec![-1, -1],
        };
        assert!(matches!(
            compute_prototypes(&set, &labels),
            Err(Error::EmptyMemory)
        ));
    }

    #[test]
    fn memory_update_endpoints() {
        let set = unit_set(vec![vec![1.0, 0.0]]);
        let labels = PseudoLabels { labels: vec![0] };
        let base = compute_prototypes(&set, &labels).unwrap();

        let mut m = base.clone();
        memory_update(&mut m, &[0.0, 1.0], 0, 1.0).unwrap();
        assert_eq!(m.prototype(0), base.prototype(0));

        let mut m = base.clone();
        memory_update(&mut m, &[0.0, 1.0], 0, 0.0).unwrap();
        assert!((m.prototype(0)[1] - 1.0).abs() < 1e-12);

        let mut m = base.clone();
        memory_update(&mut m, &[0.0, 1.0], 0, 0.5).unwrap();
        let r = 1.0 / 2.0f64.sqrt();
        assert!((m.prototype(0)[0] - r).abs() < 1e-12);
        assert!((m.prototype(0)[1] - r).abs() < 1e-12);
    }

    #[test]
    fn memory_update_label_out_of_range() {
        let set = unit_set(vec![vec![1.0, 0.0]]);
        let labels = PseudoLabels { labels: vec![0] };
        let mut mem = compute_prototypes(&set, &labels).unwrap();
        assert!(matches!(
            memory_update(&mut mem, &[0.0, 1.0], 3, 0.5),
            Err(Error::Index(_))
        ));
    }

    #[test]
    fn labels_json_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("labels.json");
        let ids: Vec<String> = vec!["a".into(), "b".into(), "c".into()];
        let labels = PseudoLabels {
            labels: vec![0, -1, 1],
        };
        labels.write_json(&ids, &p).unwrap();
        let back = PseudoLabels::read_json(&ids, &p).unwrap();
        assert_eq!(back, labels);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn partition_invariant_under_permutation(seed in 0u64..500, rot in 1usize..19) {
            let set = random_unit_set(20, 3, seed);
            let labels = dbscan(&set, 0.3, 3).unwrap();
            // Rotate rows and re-cluster; compare as partitions.
            let n = set.count();
            let perm: Vec<usize> = (0..n).map(|i| (i + rot) % n).collect();
            let mut flat = Vec::with_capacity(n * set.dim);
            for &p in &perm {
                flat.extend_from_slice(set.row(p));
            }
            let ids = (0..n).map(|i| i.to_string()).collect();
            let permuted = EmbeddingSet::new(set.dim, flat, ids, ViewTag::Drone).unwrap();
            let plabels = dbscan(&permuted, 0.3, 3).unwrap();

            let to_groups = |ls: &[i64], index_of: &dyn Fn(usize) -> usize| {
                let k = ls.iter().filter(|&&l| l >= 0).map(|&l| l as usize + 1).max().unwrap_or(0);
                let mut groups: Vec<Vec<usize>> = vec![vec![]; k];
                let mut noise = vec![];
                for (i, &l) in ls.iter().enumerate() {
                    let orig = index_of(i);
                    if l < 0 { noise.push(orig); } else { groups[l as usize].push(orig); }
                }
                for g in groups.iter_mut() { g.sort_unstable(); }
                groups.sort();
                noise.sort_unstable();
                (groups, noise)
            };
            let a = to_groups(&labels.labels, &|i| i);
            let b = to_groups(&plabels.labels, &|i| perm[i]);
            prop_assert_eq!(a, b);
        }
    }
}
