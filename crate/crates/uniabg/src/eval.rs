//! Retrieval and diagnostic metrics: Recall@K, Average Precision, association
//! accuracy, clustering purity, and a view-separability linear probe.

use std::collections::HashMap;

use crate::cluster::PseudoLabels;
use crate::hgfc::{cosine_similarity_matrix, AssociationMap};
use crate::loss::cross_entropy;
use crate::nn::Affine;
use crate::store::{EmbeddingSet, ViewTag};
use crate::util::{seeded_rng, shuffled_indices};
use crate::{Error, Result};

/// Per-query full gallery ordering by descending similarity (ties broken by
/// ascending gallery index).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Ranking {
    pub order: Vec<Vec<usize>>,
}

/// Per-query set of relevant gallery indices.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RelevanceMap {
    pub relevant: Vec<Vec<usize>>,
}

impl RelevanceMap {
    /// Relevance by shared class id between query and gallery manifest entries.
    pub fn from_classes(query_classes: &[u32], gallery_classes: &[u32]) -> Self {
        let relevant = query_classes
            .iter()
            .map(|qc| {
                gallery_classes
                    .iter()
                    .enumerate()
                    .filter(|(_, gc)| *gc == qc)
                    .map(|(j, _)| j)
                    .collect()
            })
            .collect();
        RelevanceMap { relevant }
    }
}

/// Full descending-similarity ordering of the gallery per query.
pub fn rank_gallery(queries: &EmbeddingSet, gallery: &EmbeddingSet) -> Result<Ranking> {
    if gallery.count() == 0 {
        return Err(Error::Argument("rank_gallery over an empty gallery".into()));
    }
    let sim = cosine_similarity_matrix(queries, gallery)?;
    let mut order = Vec::with_capacity(sim.rows);
    for i in 0..sim.rows {
        let row = sim.row(i);
        let mut idx: Vec<usize> = (0..sim.cols).collect();
        idx.sort_by(|&a, &b| {
            row[b]
                .partial_cmp(&row[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });
        order.push(idx);
    }
    Ok(Ranking { order })
}

/// Fraction of queries with at least one relevant index in their top K.
pub fn recall_at_k(ranking: &Ranking, relevance: &RelevanceMap, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Param("K must be at least 1".into()));
    }
    if ranking.order.len() != relevance.relevant.len() {
        return Err(Error::Shape(format!(
            "{} rankings for {} relevance sets",
            ranking.order.len(),
            relevance.relevant.len()
        )));
    }
    if ranking.order.is_empty() {
        return Err(Error::Argument("no queries".into()));
    }
    let hits = ranking
        .order
        .iter()
        .zip(&relevance.relevant)
        .filter(|(order, rel)| order.iter().take(k).any(|j| rel.contains(j)))
        .count();
    Ok(hits as f64 / ranking.order.len() as f64)
}

/// Mean over queries of the interpolation-free hit-rank AP:
/// `AP = (1/R) * sum over relevant hits of (hits_so_far / rank)`.
pub fn average_precision(ranking: &Ranking, relevance: &RelevanceMap) -> Result<f64> {
    if ranking.order.len() != relevance.relevant.len() {
        return Err(Error::Shape(format!(
            "{} rankings for {} relevance sets",
            ranking.order.len(),
            relevance.relevant.len()
        )));
    }
    if ranking.order.is_empty() {
        return Err(Error::Argument("no queries".into()));
    }
    let mut total = 0.0;
    for (order, rel) in ranking.order.iter().zip(&relevance.relevant) {
        if rel.is_empty() {
            return Err(Error::Argument("empty relevance set for a query".into()));
        }
        let mut hits = 0usize;
        let mut ap = 0.0;
        for (rank0, j) in order.iter().enumerate() {
            if rel.contains(j) {
                hits += 1;
                ap += hits as f64 / (rank0 + 1) as f64;
            }
        }
        total += ap / rel.len() as f64;
    }
    Ok(total / ranking.order.len() as f64)
}

/// Association accuracy against ground-truth classes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AssociationScore {
    /// Fraction of associated drones whose winning satellite cluster's
    /// majority true class equals the drone's true class. `None` when nothing
    /// was associated.
    pub accuracy: Option<f64>,
    /// Associated drones / total drones.
    pub coverage: f64,
}

/// Majority true class per satellite cluster; a `None` cluster (instance
/// pairing) is judged by the representative satellite's own class.
pub fn association_accuracy(
    assoc: &AssociationMap,
    drone_classes: &[u32],
    sat_labels: &PseudoLabels,
    sat_classes: &[u32],
) -> Result<AssociationScore> {
    if drone_classes.len() != assoc.assoc.len() {
        return Err(Error::Argument(format!(
            "{} drone classes for {} associations",
            drone_classes.len(),
            assoc.assoc.len()
        )));
    }
    if sat_labels.len() != sat_classes.len() {
        return Err(Error::Argument(format!(
            "{} satellite labels for {} classes",
            sat_labels.len(),
            sat_classes.len()
        )));
    }
    // Majority class per satellite cluster, ties to the lowest class id.
    let k = sat_labels.num_clusters();
    let mut majority = vec![None::<u32>; k];
    for c in 0..k {
        let mut counts: HashMap<u32, usize> = HashMap::new();
        for (j, &l) in sat_labels.labels.iter().enumerate() {
            if l == c as i64 {
                *counts.entry(sat_classes[j]).or_default() += 1;
            }
        }
        majority[c] = counts
            .into_iter()
            .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
            .map(|(cls, _)| cls);
    }

    let total = assoc.assoc.len();
    let mut associated = 0usize;
    let mut correct = 0usize;
    for (i, a) in assoc.assoc.iter().enumerate() {
        let Some(a) = a else { continue };
        associated += 1;
        let predicted = match a.sat_cluster {
            Some(c) => majority[c],
            None => Some(sat_classes[a.sat_rep]),
        };
        if predicted == Some(drone_classes[i]) {
            correct += 1;
        }
    }
    Ok(AssociationScore {
        accuracy: (associated > 0).then(|| correct as f64 / associated as f64),
        coverage: associated as f64 / total as f64,
    })
}

/// `sum_k max_c |cluster k intersect class c| / non-noise points`; `None` when
/// everything is noise.
pub fn cluster_purity(labels: &PseudoLabels, truth: &[u32]) -> Result<Option<f64>> {
    if labels.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} labels for {} truth classes",
            labels.len(),
            truth.len()
        )));
    }
    let k = labels.num_clusters();
    let non_noise = labels.labels.iter().filter(|&&l| l >= 0).count();
    if non_noise == 0 {
        return Ok(None);
    }
    let mut total = 0usize;
    for c in 0..k {
        let mut counts: HashMap<u32, usize> = HashMap::new();
        for (i, &l) in labels.labels.iter().enumerate() {
            if l == c as i64 {
                *counts.entry(truth[i]).or_default() += 1;
            }
        }
        total += counts.values().copied().max().unwrap_or(0);
    }
    Ok(Some(total as f64 / non_noise as f64))
}

/// Held-out view-classification accuracy of a fresh affine softmax classifier
/// trained on an 80/20 seeded split. High accuracy means the views are
/// linearly separable in feature space; chance-level means they are bridged.
pub fn view_probe(features: &EmbeddingSet, views: &[ViewTag], seed: u64) -> Result<f64> {
    if views.len() != features.count() {
        return Err(Error::Shape(format!(
            "{} view tags for {} rows",
            views.len(),
            features.count()
        )));
    }
    let mut per_view: HashMap<usize, usize> = HashMap::new();
    for v in views {
        *per_view.entry(v.class_index()).or_default() += 1;
    }
    if per_view.len() < 2 {
        return Err(Error::Argument("view_probe needs at least 2 views".into()));
    }
    if let Some((&v, &n)) = per_view.iter().find(|(_, &n)| n < 5) {
        return Err(Error::Argument(format!(
            "view class {v} has only {n} samples (need >= 5)"
        )));
    }

    let n = features.count();
    let mut rng = seeded_rng(seed);
    let perm = shuffled_indices(n, &mut rng);
    let split = (n as f64 * 0.8).round() as usize;
    let (train_idx, test_idx) = perm.split_at(split.clamp(1, n - 1));

    let gather = |idx: &[usize]| -> (Vec<f64>, Vec<usize>) {
        let mut x = Vec::with_capacity(idx.len() * features.dim);
        let mut y = Vec::with_capacity(idx.len());
        for &i in idx {
            x.extend_from_slice(features.row(i));
            y.push(views[i].class_index());
        }
        (x, y)
    };
    let (train_x, train_y) = gather(train_idx);
    let (test_x, test_y) = gather(test_idx);

    let classes = 3;
    let mut clf = Affine::init(features.dim, classes, &mut rng);
    let batch = train_y.len();
    // Full-batch gradient descent; the objective is convex so a fixed recipe
    // converges deterministically.
    for _ in 0..300 {
        let logits = clf.forward(&train_x, batch);
        let res = cross_entropy(&logits, &train_y, classes)?;
        let dlogits = res.grad("logits");
        let mut grads = crate::nn::AffineGrads::zeros_like(&clf);
        clf.backward(&train_x, dlogits, batch, &mut grads);
        clf.step(&grads, 1.0);
    }

    let logits = clf.forward(&test_x, test_y.len());
    let mut correct = 0usize;
    for (b, &t) in test_y.iter().enumerate() {
        let row = &logits[b * classes..(b + 1) * classes];
        let mut best = 0;
        for c in 1..classes {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == t {
            correct += 1;
        }
    }
    Ok(correct as f64 / test_y.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::hgfc::Association;
    use crate::store::l2_normalize;
    use rand::Rng;

    fn unit_set(rows: Vec<Vec<f64>>, view: ViewTag) -> EmbeddingSet {
        let dim = rows[0].len();
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        let ids = (0..rows.len()).map(|i| i.to_string()).collect();
        l2_normalize(&EmbeddingSet::new(dim, flat, ids, view).unwrap()).unwrap()
    }

    #[test]
    fn rank_gallery_basics() {
        let q = unit_set(vec![vec![1.0, 0.0]], ViewTag::Drone);
        let g = unit_set(vec![vec![0.0, 1.0], vec![1.0, 0.0]], ViewTag::Satellite);
        let r = rank_gallery(&q, &g).unwrap();
        assert_eq!(r.order[0], vec![1, 0]);

        let single = unit_set(vec![vec![1.0, 0.0]], ViewTag::Satellite);
        let r = rank_gallery(&q, &single).unwrap();
        assert_eq!(r.order[0], vec![0]);
    }

    #[test]
    fn rank_matches_independent_sort() {
        let mut rng = crate::util::seeded_rng(60);
        let q = unit_set(
            (0..10)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            ViewTag::Drone,
        );
        let g = unit_set(
            (0..15)
                .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
                .collect(),
            ViewTag::Satellite,
        );
        let r = rank_gallery(&q, &g).unwrap();
        for i in 0..10 {
            let sims: Vec<f64> = (0..15)
                .map(|j| q.row(i).iter().zip(g.row(j)).map(|(a, b)| a * b).sum())
                .collect();
            let mut pairs: Vec<(usize, f64)> = sims.iter().copied().enumerate().collect();
            pairs.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
            let expected: Vec<usize> = pairs.into_iter().map(|(j, _)| j).collect();
            assert_eq!(r.order[i], expected);
        }
    }

    #[test]
    fn recall_fixed_cases() {
        let ranking = Ranking {
            order: vec![vec![0, 1, 2]],
        };
        let rel = RelevanceMap {
            relevant: vec![vec![1]],
        };
        assert_eq!(recall_at_k(&ranking, &rel, 1).unwrap(), 0.0);
        assert_eq!(recall_at_k(&ranking, &rel, 2).unwrap(), 1.0);

        let rel_first = RelevanceMap {
            relevant: vec![vec![0]],
        };
        for k in 1..=3 {
            assert_eq!(recall_at_k(&ranking, &rel_first, k).unwrap(), 1.0);
        }
    }

    #[test]
    fn recall_monotone_in_k_and_matches_scan() {
        let mut rng = crate::util::seeded_rng(61);
        let n_gallery = 12;
        let ranking = Ranking {
            order: (0..8)
                .map(|s| crate::util::shuffled_indices(n_gallery, &mut crate::util::seeded_rng(s)))
                .collect(),
        };
        let rel = RelevanceMap {
            relevant: (0..8)
                .map(|_| {
                    let mut v: Vec<usize> =
                        (0..n_gallery).filter(|_| rng.gen_bool(0.3)).collect();
                    if v.is_empty() {
                        v.push(rng.gen_range(0..n_gallery));
                    }
                    v
                })
                .collect(),
        };
        let mut prev = 0.0;
        for k in 1..=n_gallery {
            let r = recall_at_k(&ranking, &rel, k).unwrap();
            // Brute-force scan oracle.
            let scan = ranking
                .order
                .iter()
                .zip(&rel.relevant)
                .filter(|(o, rl)| o[..k].iter().any(|j| rl.contains(j)))
                .count() as f64
                / 8.0;
            assert_eq!(r, scan);
            assert!(r >= prev);
            prev = r;
        }
    }

    #[test]
    fn ap_fixed_cases() {
        let order = Ranking {
            order: vec![vec![0, 1, 2, 3]],
        };
        // Single relevant at rank 1.
        let r = average_precision(
            &order,
            &RelevanceMap {
                relevant: vec![vec![0]],
            },
        )
        .unwrap();
        assert!((r - 1.0).abs() < 1e-12);
        // Two relevants at ranks 1 and 3: (1/1 + 2/3)/2.
        let r = average_precision(
            &order,
            &RelevanceMap {
                relevant: vec![vec![0, 2]],
            },
        )
        .unwrap();
        assert!((r - (1.0 + 2.0 / 3.0) / 2.0).abs() < 1e-12);
        assert!((r - 0.83333).abs() < 1e-5);
        // Relevant at rank 2 of 2.
        let two = Ranking {
            order: vec![vec![0, 1]],
        };
        let r = average_precision(
            &two,
            &RelevanceMap {
                relevant: vec![vec![1]],
            },
        )
        .unwrap();
        assert!((r - 0.5).abs() < 1e-12);
    }

    #[test]
    fn ap_invariant_to_irrelevant_shuffle_below_last_hit() {
        // Relevants at ranks 1 and 3; permuting items after rank 3 is a no-op.
        let a = Ranking {
            order: vec![vec![5, 0, 6, 1, 2, 3]],
        };
        let b = Ranking {
            order: vec![vec![5, 0, 6, 3, 1, 2]],
        };
        let rel = RelevanceMap {
            relevant: vec![vec![5, 6]],
        };
        let ra = average_precision(&a, &rel).unwrap();
        let rb = average_precision(&b, &rel).unwrap();
        assert_eq!(ra, rb);
    }

    #[test]
    fn association_accuracy_cases() {
        let sat_labels = PseudoLabels {
            labels: vec![0, 0, 1],
        };
        let sat_classes = vec![7, 7, 9];
        // Perfect association.
        let assoc = AssociationMap {
            assoc: vec![
                Some(Association {
                    sat_cluster: Some(0),
                    sat_rep: 0,
                    weight: 1.0,
                }),
                Some(Association {
                    sat_cluster: Some(1),
                    sat_rep: 2,
                    weight: 1.0,
                }),
            ],
        };
        let score =
            association_accuracy(&assoc, &[7, 9], &sat_labels, &sat_classes).unwrap();
        assert_eq!(score.accuracy, Some(1.0));
        assert_eq!(score.coverage, 1.0);

        // Empty association: coverage 0, accuracy null.
        let empty = AssociationMap {
            assoc: vec![None, None],
        };
        let score = association_accuracy(&empty, &[7, 9], &sat_labels, &sat_classes).unwrap();
        assert_eq!(score.accuracy, None);
        assert_eq!(score.coverage, 0.0);
    }

    #[test]
    fn association_accuracy_matches_brute_force() {
        let mut rng = crate::util::seeded_rng(62);
        for _ in 0..10 {
            let n_drones = 12;
            let n_sats = 8;
            let sat_labels = PseudoLabels {
                labels: (0..n_sats)
                    .map(|_| rng.gen_range(-1i64..3))
                    .collect(),
            };
            let k = sat_labels.num_clusters().max(1);
            let sat_classes: Vec<u32> = (0..n_sats).map(|_| rng.gen_range(0..4)).collect();
            let drone_classes: Vec<u32> = (0..n_drones).map(|_| rng.gen_range(0..4)).collect();
            let assoc = AssociationMap {
                assoc: (0..n_drones)
                    .map(|_| {
                        if rng.gen_bool(0.3) {
                            None
                        } else {
                            Some(Association {
                                sat_cluster: Some(rng.gen_range(0..k)),
                                sat_rep: rng.gen_range(0..n_sats),
                                weight: 1.0,
                            })
                        }
                    })
                    .collect(),
            };
            let score =
                association_accuracy(&assoc, &drone_classes, &sat_labels, &sat_classes).unwrap();

            // Independent evaluation.
            let mut associated = 0;
            let mut correct = 0;
            for (i, a) in assoc.assoc.iter().enumerate() {
                let Some(a) = a else { continue };
                associated += 1;
                let c = a.sat_cluster.unwrap();
                let mut counts: HashMap<u32, usize> = HashMap::new();
                for j in 0..n_sats {
                    if sat_labels.labels[j] == c as i64 {
                        *counts.entry(sat_classes[j]).or_default() += 1;
                    }
                }
                let maj = counts
                    .into_iter()
                    .max_by(|a, b| a.1.cmp(&b.1).then(b.0.cmp(&a.0)))
                    .map(|(cls, _)| cls);
                if maj == Some(drone_classes[i]) {
                    correct += 1;
                }
            }
            assert_eq!(score.coverage, associated as f64 / n_drones as f64);
            assert_eq!(
                score.accuracy,
                (associated > 0).then(|| correct as f64 / associated as f64)
            );
        }
    }

    #[test]
    fn purity_cases() {
        let labels = PseudoLabels {
            labels: vec![0, 0, 1, 1],
        };
        assert_eq!(
            cluster_purity(&labels, &[0, 0, 1, 1]).unwrap(),
            Some(1.0)
        );
        // One cluster with two equal classes.
        let one = PseudoLabels {
            labels: vec![0, 0],
        };
        assert_eq!(cluster_purity(&one, &[0, 1]).unwrap(), Some(0.5));
        // All noise.
        let noise = PseudoLabels {
            labels: vec![-1, -1],
        };
        assert_eq!(cluster_purity(&noise, &[0, 1]).unwrap(), None);
    }

    fn probe_set(offset: f64, n_per_view: usize, seed: u64) -> (EmbeddingSet, Vec<ViewTag>) {
        let mut rng = crate::util::seeded_rng(seed);
        let dim = 8;
        let mut rows = Vec::new();
        let mut views = Vec::new();
        for (vi, view) in [ViewTag::Drone, ViewTag::Satellite].into_iter().enumerate() {
            for _ in 0..n_per_view {
                let mut r: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
                r[0] += offset * vi as f64;
                rows.push(r);
                views.push(view);
            }
        }
        (unit_set(rows, ViewTag::Drone), views)
    }

    #[test]
    fn probe_near_chance_on_identical_distributions() {
        let mut accs = Vec::new();
        for seed in 0..5 {
            let (set, views) = probe_set(0.0, 40, 70 + seed);
            accs.push(view_probe(&set, &views, seed).unwrap());
        }
        let mean = accs.iter().sum::<f64>() / accs.len() as f64;
        assert!((mean - 0.5).abs() < 0.1, "mean accuracy {mean}");
    }

    #[test]
    fn probe_high_on_separable_views() {
        let (set, views) = probe_set(10.0, 40, 77);
        let acc = view_probe(&set, &views, 0).unwrap();
        assert!(acc > 0.95, "accuracy {acc}");
    }

    #[test]
    fn probe_deterministic_and_validates() {
        let (set, views) = probe_set(1.0, 20, 78);
        let a = view_probe(&set, &views, 3).unwrap();
        let b = view_probe(&set, &views, 3).unwrap();
        assert_eq!(a, b);

        let (small, small_views) = probe_set(1.0, 4, 79);
        assert!(matches!(
            view_probe(&small, &small_views, 0),
            Err(Error::Argument(_))
        ));
    }
}
