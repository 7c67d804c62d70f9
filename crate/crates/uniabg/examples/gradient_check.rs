//! Verifies the analytic gradients of every loss kernel against central
//! finite differences. Run with:
//!
//! ```text
//! cargo run --example gradient_check
//! ```

use rand::Rng;

use uniabg::cluster::{compute_prototypes, PseudoLabels};
use uniabg::loss::{cross_entropy, finite_diff_check, info_nce, intra_view_loss, mse_align};
use uniabg::store::{l2_normalize, EmbeddingSet, ViewTag};
use uniabg::util::seeded_rng;

fn main() -> uniabg::Result<()> {
    let mut rng = seeded_rng(11);
    // Moderate temperature: saturated softmaxes push true gradients below
    // finite-difference rounding noise and the check stops being meaningful.
    let tau = 0.2;
    let step = 1e-5;

    // Cluster-contrast loss against a 4-prototype memory bank.
    let bank_rows: Vec<f64> = (0..4 * 6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let ids = (0..4).map(|i| i.to_string()).collect();
    let bank = l2_normalize(&EmbeddingSet::new(6, bank_rows, ids, ViewTag::Drone)?)?;
    let memory = compute_prototypes(&bank, &PseudoLabels { labels: vec![0, 1, 2, 3] })?;
    let query: Vec<f64> = (0..6).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let res = intra_view_loss(&query, &memory, 2, tau)?;
    let err = finite_diff_check(
        |q| intra_view_loss(q, &memory, 2, tau).map(|l| l.value),
        &query,
        res.grad("query"),
        step,
    )?;
    println!("intra_view_loss  value {:.4}  max rel err {err:.2e}", res.value);

    // Symmetric InfoNCE over a 3x4 batch, both gradient blocks jointly.
    let (b, dim) = (3, 4);
    let point: Vec<f64> = (0..2 * b * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let res = info_nce(&point[..b * dim], &point[b * dim..], b, dim, tau)?;
    let mut grad = res.grad("queries").to_vec();
    grad.extend_from_slice(res.grad("references"));
    let err = finite_diff_check(
        |p| info_nce(&p[..b * dim], &p[b * dim..], b, dim, tau).map(|l| l.value),
        &point,
        &grad,
        step,
    )?;
    println!("info_nce         value {:.4}  max rel err {err:.2e}", res.value);

    // Cross-entropy over 4 rows of 5 classes.
    let logits: Vec<f64> = (0..4 * 5).map(|_| rng.gen_range(-2.0..2.0)).collect();
    let targets = vec![0usize, 3, 1, 4];
    let res = cross_entropy(&logits, &targets, 5)?;
    let err = finite_diff_check(
        |p| cross_entropy(p, &targets, 5).map(|l| l.value),
        &logits,
        res.grad("logits"),
        step,
    )?;
    println!("cross_entropy    value {:.4}  max rel err {err:.2e}", res.value);

    // Mean squared row alignment, both sides jointly.
    let point: Vec<f64> = (0..2 * b * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let res = mse_align(&point[..b * dim], &point[b * dim..], b, dim)?;
    let mut grad = res.grad("a").to_vec();
    grad.extend_from_slice(res.grad("b"));
    let err = finite_diff_check(
        |p| mse_align(&p[..b * dim], &p[b * dim..], b, dim).map(|l| l.value),
        &point,
        &grad,
        step,
    )?;
    println!("mse_align        value {:.4}  max rel err {err:.2e}", res.value);

    Ok(())
}
