//! Loss kernels with values and hand-derived gradients.
//!
//! All math is f64 with fixed-order reductions. Gradients flow to queries and
//! logits only; memory prototypes are updated by momentum, not backprop.

use std::collections::BTreeMap;

use crate::cluster::MemoryDictionary;
use crate::{Error, Result};

/// A loss value plus named gradient blocks (shape stored alongside data).
#[derive(Debug, Clone)]
pub struct LossResult {
    pub value: f64,
    pub gradients: BTreeMap<String, GradBlock>,
}

#[derive(Debug, Clone)]
pub struct GradBlock {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl LossResult {
    pub fn grad(&self, name: &str) -> &[f64] {
        &self.gradients[name].data
    }
}

fn check_finite(value: f64) -> Result<f64> {
    if value.is_finite() {
        Ok(value)
    } else {
        Err(Error::Data(format!("non-finite loss value {value}")))
    }
}

/// Numerically stable log-softmax over a slice.
fn log_softmax(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let log_sum = logits.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
    logits.iter().map(|&v| v - log_sum).collect()
}

fn softmax(logits: &[f64]) -> Vec<f64> {
    log_softmax(logits).iter().map(|&v| v.exp()).collect()
}

/// Cluster-contrast loss for one query against a memory bank:
/// `-log( exp(q.phi_+ / tau) / sum_k exp(q.phi_k / tau) )`.
/// Gradient is returned for the query only.
pub fn intra_view_loss(
    query: &[f64],
    memory: &MemoryDictionary,
    positive: usize,
    temperature: f64,
) -> Result<LossResult> {
    let k = memory.num_clusters();
    if k == 0 {
        return Err(Error::EmptyMemory);
    }
    if positive >= k {
        return Err(Error::Index(format!("positive {positive} out of range (K={k})")));
    }
    if temperature <= 0.0 {
        return Err(Error::Param(format!("temperature {temperature} must be positive")));
    }
    if query.len() != memory.dim {
        return Err(Error::Shape(format!(
            "query dim {} vs memory dim {}",
            query.len(),
            memory.dim
        )));
    }
    let logits: Vec<f64> = (0..k)
        .map(|c| {
            memory
                .prototype(c)
                .iter()
                .zip(query)
                .map(|(p, q)| p * q)
                .sum::<f64>()
                / temperature
        })
        .collect();
    let log_p = log_softmax(&logits);
    let value = check_finite(-log_p[positive])?;

    // dL/dq = (1/tau) * sum_c (p_c - 1[c=+]) phi_c
    let probs = softmax(&logits);
    let mut grad = vec![0.0; memory.dim];
    for c in 0..k {
        let coeff = (probs[c] - if c == positive { 1.0 } else { 0.0 }) / temperature;
        for (g, p) in grad.iter_mut().zip(memory.prototype(c)) {
            *g += coeff * p;
        }
    }
    let mut gradients = BTreeMap::new();
    gradients.insert(
        "query".to_string(),
        GradBlock {
            shape: vec![memory.dim],
            data: grad,
        },
    );
    Ok(LossResult { value, gradients })
}

/// Symmetric InfoNCE over a B x B similarity matrix with diagonal targets:
/// the mean of the query-to-reference and reference-to-query cross-entropies.
pub fn info_nce(
    queries: &[f64],
    references: &[f64],
    batch: usize,
    dim: usize,
    temperature: f64,
) -> Result<LossResult> {
    if batch < 2 {
        return Err(Error::Batch(format!("InfoNCE needs B >= 2, got {batch}")));
    }
    if temperature <= 0.0 {
        return Err(Error::Param(format!("temperature {temperature} must be positive")));
    }
    if queries.len() != batch * dim || references.len() != batch * dim {
        return Err(Error::Shape(format!(
            "expected two {batch}x{dim} matrices, got {} and {} values",
            queries.len(),
            references.len()
        )));
    }
    // S[i][j] = q_i . r_j / tau
    let mut sim = vec![0.0f64; batch * batch];
    for i in 0..batch {
        for j in 0..batch {
            let dot: f64 = queries[i * dim..(i + 1) * dim]
                .iter()
                .zip(&references[j * dim..(j + 1) * dim])
                .map(|(a, b)| a * b)
                .sum();
            sim[i * batch + j] = dot / temperature;
        }
    }

    let mut value = 0.0;
    // dL/dS accumulated over both directions.
    let mut dsim = vec![0.0f64; batch * batch];
    // Query -> reference: softmax over rows.
    for i in 0..batch {
        let row = &sim[i * batch..(i + 1) * batch];
        let log_p = log_softmax(row);
        value += -log_p[i] / (2.0 * batch as f64);
        for j in 0..batch {
            let p = log_p[j].exp();
            dsim[i * batch + j] += (p - if i == j { 1.0 } else { 0.0 }) / (2.0 * batch as f64);
        }
    }
    // Reference -> query: softmax over columns.
    for j in 0..batch {
        let col: Vec<f64> = (0..batch).map(|i| sim[i * batch + j]).collect();
        let log_p = log_softmax(&col);
        value += -log_p[j] / (2.0 * batch as f64);
        for i in 0..batch {
            let p = log_p[i].exp();
            dsim[i * batch + j] += (p - if i == j { 1.0 } else { 0.0 }) / (2.0 * batch as f64);
        }
    }
    let value = check_finite(value)?;

    // dL/dQ = dS R / tau ; dL/dR = dS^T Q / tau
    let mut dq = vec![0.0f64; batch * dim];
    let mut dr = vec![0.0f64; batch * dim];
    for i in 0..batch {
        for j in 0..batch {
            let g = dsim[i * batch + j] / temperature;
            for d in 0..dim {
                dq[i * dim + d] += g * references[j * dim + d];
                dr[j * dim + d] += g * queries[i * dim + d];
            }
        }
    }
    let mut gradients = BTreeMap::new();
    gradients.insert(
        "queries".to_string(),
        GradBlock {
            shape: vec![batch, dim],
            data: dq,
        },
    );
    gradients.insert(
        "references".to_string(),
        GradBlock {
            shape: vec![batch, dim],
            data: dr,
        },
    );
    Ok(LossResult { value, gradients })
}

/// Mean softmax cross-entropy over a batch of logit rows.
/// Gradient per row is `softmax - onehot`, averaged over the batch.
pub fn cross_entropy(logits: &[f64], targets: &[usize], classes: usize) -> Result<LossResult> {
    let batch = targets.len();
    if batch == 0 {
        return Err(Error::Batch("cross_entropy on an empty batch".into()));
    }
    if logits.len() != batch * classes {
        return Err(Error::Shape(format!(
            "expected {batch}x{classes} logits, got {} values",
            logits.len()
        )));
    }
    let mut value = 0.0;
    let mut grad = vec![0.0f64; batch * classes];
    for (b, &t) in targets.iter().enumerate() {
        if t >= classes {
            return Err(Error::Index(format!("target {t} out of range (C={classes})")));
        }
        let row = &logits[b * classes..(b + 1) * classes];
        let log_p = log_softmax(row);
        value += -log_p[t] / batch as f64;
        for c in 0..classes {
            grad[b * classes + c] =
                (log_p[c].exp() - if c == t { 1.0 } else { 0.0 }) / batch as f64;
        }
    }
    let value = check_finite(value)?;
    let mut gradients = BTreeMap::new();
    gradients.insert(
        "logits".to_string(),
        GradBlock {
            shape: vec![batch, classes],
            data: grad,
        },
    );
    Ok(LossResult { value, gradients })
}

/// Mean squared Euclidean row distance between two B x dim matrices.
pub fn mse_align(a: &[f64], b: &[f64], batch: usize, dim: usize) -> Result<LossResult> {
    if a.len() != batch * dim || b.len() != batch * dim {
        return Err(Error::Shape(format!(
            "expected two {batch}x{dim} matrices, got {} and {} values",
            a.len(),
            b.len()
        )));
    }
    if batch == 0 {
        return Err(Error::Batch("mse_align on an empty batch".into()));
    }
    let mut value = 0.0;
    let mut da = vec![0.0f64; batch * dim];
    let mut db = vec![0.0f64; batch * dim];
    for i in 0..a.len() {
        let diff = a[i] - b[i];
        value += diff * diff / batch as f64;
        da[i] = 2.0 * diff / batch as f64;
        db[i] = -da[i];
    }
    let value = check_finite(value)?;
    let mut gradients = BTreeMap::new();
    gradients.insert(
        "a".to_string(),
        GradBlock {
            shape: vec![batch, dim],
            data: da,
        },
    );
    gradients.insert(
        "b".to_string(),
        GradBlock {
            shape: vec![batch, dim],
            data: db,
        },
    );
    Ok(LossResult { value, gradients })
}

/// Central-difference check of an analytic gradient. Returns the maximum
/// component-wise relative error with denominator
/// `max(|analytic|, |numeric|, 1e-8)`.
pub fn finite_diff_check<F>(
    loss: F,
    point: &[f64],
    analytic: &[f64],
    step: f64,
) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<f64>,
{
    if analytic.len() != point.len() {
        return Err(Error::Shape(format!(
            "gradient has {} components for {} parameters",
            analytic.len(),
            point.len()
        )));
    }
    let mut max_err: f64 = 0.0;
    let mut probe = point.to_vec();
    for i in 0..point.len() {
        probe[i] = point[i] + step;
        let plus = loss(&probe)?;
        probe[i] = point[i] - step;
        let minus = loss(&probe)?;
        probe[i] = point[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::Data("non-finite loss at probe point".into()));
        }
        let numeric = (plus - minus) / (2.0 * step);
        let denom = analytic[i].abs().max(numeric.abs()).max(1e-8);
        max_err = max_err.max((analytic[i] - numeric).abs() / denom);
    }
    Ok(max_err)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cluster::{compute_prototypes, PseudoLabels};
    use crate::store::{l2_normalize, EmbeddingSet, ViewTag};
    use rand::Rng;

    fn orthonormal_memory(k: usize, dim: usize) -> MemoryDictionary {
        let mut flat = vec![0.0; k * dim];
        for i in 0..k {
            flat[i * dim + i] = 1.0;
        }
        let ids = (0..k).map(|i| i.to_string()).collect();
        let set = EmbeddingSet::new(dim, flat, ids, ViewTag::Satellite).unwrap();
        let labels = PseudoLabels {
            labels: (0..k as i64).collect(),
        };
        compute_prototypes(&set, &labels).unwrap()
    }

    fn random_unit(dim: usize, rng: &mut impl Rng) -> Vec<f64> {
        let v: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let set = EmbeddingSet::new(dim, v, vec!["q".into()], ViewTag::Drone).unwrap();
        l2_normalize(&set).unwrap().vectors
    }

    #[test]
    fn intra_view_two_orthonormal_prototypes() {
        let mem = orthonormal_memory(2, 2);
        let q = vec![1.0, 0.0];
        let r = intra_view_loss(&q, &mem, 0, 1.0).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((r.value - expected).abs() < 1e-12);
        assert!((r.value - 0.31326).abs() < 1e-5);
    }

    #[test]
    fn intra_view_uniform_similarities_log_k() {
        // Query orthogonal to every prototype: all similarities 0.
        let mem = orthonormal_memory(3, 4);
        let q = vec![0.0, 0.0, 0.0, 1.0];
        let r = intra_view_loss(&q, &mem, 1, 0.2).unwrap();
        assert!((r.value - 3f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn intra_view_gradient_matches_fd() {
        let mut rng = crate::util::seeded_rng(5);
        // Moderate temperature: at very low tau the softmax saturates and the
        // tiny true gradients sink below central-difference rounding noise.
        let mem = orthonormal_memory(5, 5);
        for _ in 0..20 {
            let q = random_unit(5, &mut rng);
            let r = intra_view_loss(&q, &mem, 2, 0.2).unwrap();
            let err = finite_diff_check(
                |p| intra_view_loss(p, &mem, 2, 0.2).map(|l| l.value),
                &q,
                r.grad("query"),
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "rel err {err}");
        }
    }

    #[test]
    fn info_nce_identity_batch() {
        let q = vec![1.0, 0.0, 0.0, 1.0];
        let r = info_nce(&q, &q, 2, 2, 1.0).unwrap();
        let expected = -(1f64.exp() / (1f64.exp() + 1.0)).ln();
        assert!((r.value - expected).abs() < 1e-12);
    }

    #[test]
    fn info_nce_constant_similarity_log_b() {
        // All rows identical => constant similarity matrix.
        let q: Vec<f64> = (0..4).flat_map(|_| vec![1.0, 0.0]).collect();
        let r = info_nce(&q, &q, 4, 2, 0.5).unwrap();
        assert!((r.value - 4f64.ln()).abs() < 1e-9);
    }

    #[test]
    fn info_nce_needs_two_rows() {
        let q = vec![1.0, 0.0];
        assert!(matches!(
            info_nce(&q, &q, 1, 2, 1.0),
            Err(Error::Batch(_))
        ));
    }

    #[test]
    fn info_nce_gradients_match_fd() {
        let mut rng = crate::util::seeded_rng(6);
        let b = 8;
        let dim = 4;
        let q: Vec<f64> = (0..b).flat_map(|_| random_unit(dim, &mut rng)).collect();
        let r: Vec<f64> = (0..b).flat_map(|_| random_unit(dim, &mut rng)).collect();
        let res = info_nce(&q, &r, b, dim, 0.1).unwrap();
        let errq = finite_diff_check(
            |p| info_nce(p, &r, b, dim, 0.1).map(|l| l.value),
            &q,
            res.grad("queries"),
            1e-6,
        )
        .unwrap();
        let errr = finite_diff_check(
            |p| info_nce(&q, p, b, dim, 0.1).map(|l| l.value),
            &r,
            res.grad("references"),
            1e-6,
        )
        .unwrap();
        assert!(errq < 1e-4 && errr < 1e-4, "rel errs {errq} {errr}");
    }

    #[test]
    fn info_nce_row_permutation_invariant() {
        let mut rng = crate::util::seeded_rng(17);
        let b = 5;
        let dim = 3;
        let q: Vec<f64> = (0..b).flat_map(|_| random_unit(dim, &mut rng)).collect();
        let r: Vec<f64> = (0..b).flat_map(|_| random_unit(dim, &mut rng)).collect();
        let base = info_nce(&q, &r, b, dim, 0.2).unwrap().value;
        let perm = [3usize, 0, 4, 1, 2];
        let qp: Vec<f64> = perm.iter().flat_map(|&i| q[i * dim..(i + 1) * dim].to_vec()).collect();
        let rp: Vec<f64> = perm.iter().flat_map(|&i| r[i * dim..(i + 1) * dim].to_vec()).collect();
        let permuted = info_nce(&qp, &rp, b, dim, 0.2).unwrap().value;
        assert!((base - permuted).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let r = cross_entropy(&[0.0, 0.0, 0.0], &[1], 3).unwrap();
        assert!((r.value - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn cross_entropy_saturated_target() {
        let r = cross_entropy(&[0.0, 100.0, 0.0], &[1], 3).unwrap();
        assert!(r.value < 1e-40);
    }

    #[test]
    fn cross_entropy_shift_invariant_and_grad_rows_sum_zero() {
        let mut rng = crate::util::seeded_rng(8);
        let b = 4;
        let c = 6;
        let logits: Vec<f64> = (0..b * c).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let targets: Vec<usize> = (0..b).map(|_| rng.gen_range(0..c)).collect();
        let r = cross_entropy(&logits, &targets, c).unwrap();
        let shifted: Vec<f64> = logits.iter().map(|v| v + 7.5).collect();
        let rs = cross_entropy(&shifted, &targets, c).unwrap();
        assert!((r.value - rs.value).abs() < 1e-12);
        for row in r.grad("logits").chunks(c) {
            assert!(row.iter().sum::<f64>().abs() < 1e-12);
        }
        let err = finite_diff_check(
            |p| cross_entropy(p, &targets, c).map(|l| l.value),
            &logits,
            r.grad("logits"),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn mse_basics_and_grad() {
        let a = vec![1.0, 1.0, 1.0, 1.0];
        let b = vec![0.0, 0.0, 0.0, 0.0];
        let r = mse_align(&a, &b, 1, 4).unwrap();
        assert!((r.value - 4.0).abs() < 1e-12);
        let r0 = mse_align(&a, &a, 1, 4).unwrap();
        assert_eq!(r0.value, 0.0);

        let mut rng = crate::util::seeded_rng(9);
        let bsz = 6;
        let dim = 3;
        let x: Vec<f64> = (0..bsz * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let y: Vec<f64> = (0..bsz * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let res = mse_align(&x, &y, bsz, dim).unwrap();
        let err = finite_diff_check(
            |p| mse_align(p, &y, bsz, dim).map(|l| l.value),
            &x,
            res.grad("a"),
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4);
    }

    #[test]
    fn mse_shape_mismatch() {
        assert!(matches!(
            mse_align(&[1.0, 2.0], &[1.0], 1, 2),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn fd_checker_exact_on_quadratic() {
        let x = vec![0.3, -1.2, 2.5];
        let grad: Vec<f64> = x.iter().map(|v| 2.0 * v).collect();
        let err = finite_diff_check(
            |p| Ok(p.iter().map(|v| v * v).sum()),
            &x,
            &grad,
            1e-4,
        )
        .unwrap();
        assert!(err < 1e-9, "central differences are exact for quadratics, err {err}");
    }

    #[test]
    fn fd_checker_flags_wrong_gradient() {
        let x = vec![0.7, -0.4];
        let wrong: Vec<f64> = x.iter().map(|v| 4.0 * v).collect(); // 2x the truth
        let err = finite_diff_check(
            |p| Ok(p.iter().map(|v| v * v).sum()),
            &x,
            &wrong,
            1e-4,
        )
        .unwrap();
        assert!((err - 0.5).abs() < 1e-6, "scaled-by-2 gradient should read 0.5, got {err}");
    }
}
