//! Generates the synthetic cross-view benchmark and prints its shape.
//!
//! Each location class gets several drone views, one or more satellite views,
//! and an auxiliary pseudo view per drone that sits halfway between the two
//! view-specific distortions. Run with:
//!
//! ```text
//! cargo run --example generate_dataset
//! ```

use uniabg::store::ViewTag;
use uniabg::synth::{gap_metric, generate, SynthConfig};

fn main() -> uniabg::Result<()> {
    let config = SynthConfig {
        num_classes: 12,
        drones_per_class: 6,
        sats_per_class: 1,
        dim: 32,
        gap_strength: 2.0,
        noise_sigma: 0.05,
        seed: 42,
        emit_images: false,
    };
    let data = generate(&config)?;

    println!(
        "drone: {} x {}, satellite: {} x {}, apv: {} x {}",
        data.drone.count(),
        data.drone.dim,
        data.satellite.count(),
        data.satellite.dim,
        data.apv.count(),
        data.apv.dim
    );
    println!("manifest entries: {}", data.manifest.entries.len());
    println!(
        "first ids: {} / {} / {}",
        data.drone.ids[0], data.satellite.ids[0], data.apv.ids[0]
    );

    // The view gap: mean same-class cross-view distance minus mean same-view
    // different-class distance. Positive values reproduce the pathology where
    // the matching satellite is further away than unrelated same-view scenes;
    // the APV sits halfway, so its gap to the satellite view is smaller.
    let drone_classes = data.manifest.classes_for_view(ViewTag::Drone)?;
    let sat_classes = data.manifest.classes_for_view(ViewTag::Satellite)?;
    println!(
        "drone-satellite gap: {:.3}",
        gap_metric(&data.drone, &data.satellite, &drone_classes, &sat_classes)?
    );
    println!(
        "apv-satellite gap:   {:.3}",
        gap_metric(&data.apv, &data.satellite, &drone_classes, &sat_classes)?
    );
    println!("drone class ids (first 8): {:?}", &drone_classes[..8]);
    Ok(())
}
