//! DBSCAN pseudo-labels over cosine distance, cluster purity, and prototype
//! memory banks. Run with:
//!
//! ```text
//! cargo run --example clustering
//! ```

use uniabg::cluster::{compute_prototypes, dbscan, memory_update};
use uniabg::eval::cluster_purity;
use uniabg::store::ViewTag;
use uniabg::synth::{generate, SynthConfig};

fn main() -> uniabg::Result<()> {
    let data = generate(&SynthConfig {
        num_classes: 10,
        drones_per_class: 8,
        sats_per_class: 1,
        dim: 32,
        gap_strength: 2.0,
        noise_sigma: 0.05,
        seed: 7,
        emit_images: false,
    })?;
    let truth = data.manifest.classes_for_view(ViewTag::Drone)?;

    // eps controls the neighborhood radius in cosine distance. Too large and
    // everything collapses into one cluster; too small and points turn into
    // noise.
    println!("eps    clusters  noise  purity");
    for eps in [0.1, 0.2, 0.25, 0.3, 0.5] {
        let labels = dbscan(&data.drone, eps, 4)?;
        let noise = labels.labels.iter().filter(|&&l| l < 0).count();
        let purity = cluster_purity(&labels, &truth)?;
        println!(
            "{eps:<6} {:<9} {noise:<6} {}",
            labels.num_clusters(),
            purity.map(|p| format!("{p:.3}")).unwrap_or_else(|| "n/a".into())
        );
    }

    // Prototypes: per-cluster mean, re-normalized. The memory bank is what
    // the stage-1 contrastive loss compares queries against.
    let labels = dbscan(&data.drone, 0.25, 4)?;
    let mut memory = compute_prototypes(&data.drone, &labels)?;
    println!(
        "\nmemory bank: {} prototypes of dim {}, member counts {:?}",
        memory.num_clusters(),
        memory.dim,
        &memory.member_counts[..memory.num_clusters().min(8)]
    );

    // Momentum update drifts a prototype toward a new query.
    let before = memory.prototype(0).to_vec();
    let query = data.drone.row(0).to_vec();
    memory_update(&mut memory, &query, 0, 0.2)?;
    let moved: f64 = memory
        .prototype(0)
        .iter()
        .zip(&before)
        .map(|(a, b)| (a - b).abs())
        .sum();
    println!("momentum update moved prototype 0 by L1 {moved:.4}");
    Ok(())
}
