//! Stage-1 training: intra-view cluster contrast plus view-aware adversarial
//! bridging, with the loss trace and the resulting drop in linear view
//! separability. Run with:
//!
//! ```text
//! cargo run --example stage1_training
//! ```

use uniabg::eval::view_probe;
use uniabg::stage1::{run_stage1, Stage1Config};
use uniabg::store::{EmbeddingSet, ViewTag};
use uniabg::synth::{generate, SynthConfig};

fn main() -> uniabg::Result<()> {
    let data = generate(&SynthConfig {
        num_classes: 20,
        drones_per_class: 6,
        sats_per_class: 1,
        dim: 32,
        gap_strength: 2.0,
        noise_sigma: 0.05,
        seed: 3,
        emit_images: false,
    })?;

    let config = Stage1Config {
        epochs: 10,
        encoder_dim: 32, // identity warm start needs the input dimension
        seed: 3,
        ..Default::default()
    };
    let out = run_stage1(&data.drone, &data.satellite, &data.apv, &config)?;

    println!(
        "clusters: {} drone / {} satellite; {} trace entries",
        out.drone_labels.num_clusters(),
        out.sat_labels.num_clusters(),
        out.loss_trace.len()
    );
    // Epoch 1 is a contrastive warm-up; the adversarial terms appear from
    // epoch 2 onward.
    for entry in out.loss_trace.iter().step_by(out.loss_trace.len() / 8) {
        println!(
            "epoch {:>2} iter {:>2}: l_drone {:.3} l_sat {:.3} l_view {} l_adv {}",
            entry.epoch,
            entry.iter,
            entry.losses.l_drone,
            entry.losses.l_sat,
            entry
                .losses
                .l_view
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "  -  ".into()),
            entry
                .losses
                .l_adv
                .map(|v| format!("{v:.3}"))
                .unwrap_or_else(|| "  -  ".into()),
        );
    }

    // The point of the adversarial term: a linear probe should find it harder
    // to tell the views apart after training.
    let mut vectors = data.drone.vectors.clone();
    vectors.extend_from_slice(&data.satellite.vectors);
    vectors.extend_from_slice(&data.apv.vectors);
    let mut ids = data.drone.ids.clone();
    ids.extend(data.satellite.ids.iter().cloned());
    ids.extend(data.apv.ids.iter().cloned());
    let mut views = vec![ViewTag::Drone; data.drone.count()];
    views.extend(vec![ViewTag::Satellite; data.satellite.count()]);
    views.extend(vec![ViewTag::Apv; data.apv.count()]);
    let stacked = EmbeddingSet::new(data.drone.dim, vectors, ids, ViewTag::Drone)?;

    let raw = view_probe(&stacked, &views, 3)?;
    let encoded = out.encoder.encode_set(&stacked)?;
    let trained = view_probe(&encoded, &views, 3)?;
    println!("view probe accuracy: raw {raw:.3} -> trained {trained:.3}");
    Ok(())
}
