//! The complete dual-stage pipeline as a three-row ablation: greedy baseline,
//! graph-filtered association, and graph filtering plus adversarial bridging.
//! Writes `report.json` into a temporary directory. Run with:
//!
//! ```text
//! cargo run --example full_pipeline
//! ```

use uniabg::pipeline::{cmd_pipeline, PipelineConfig};

fn main() -> uniabg::Result<()> {
    let mut config = PipelineConfig::default();
    config.seed = 0;

    let out = std::env::temp_dir().join("uniabg_full_pipeline");
    let report = cmd_pipeline(&config, &out, true)?;

    println!(
        "{:<22} {:>8} {:>8} {:>8} {:>8} {:>8}",
        "variant", "assoc", "cover", "R@1", "mAP", "probe"
    );
    for row in &report.rows {
        println!(
            "{:<22} {:>8} {:>8.3} {:>8.3} {:>8.3} {:>8.3}",
            row.label,
            row.association_accuracy
                .map(|a| format!("{a:.3}"))
                .unwrap_or_else(|| "n/a".into()),
            row.association_coverage,
            row.drone_to_satellite.recall_at_1,
            row.drone_to_satellite.map,
            row.probe_trained,
        );
    }
    println!("\nreport written to {}", out.join("report.json").display());
    println!("raw-feature view probe for comparison: {:.3}", report.rows[0].probe_raw);
    Ok(())
}
