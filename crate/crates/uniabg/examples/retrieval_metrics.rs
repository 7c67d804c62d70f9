//! Retrieval metrics on hand-built cases and on a synthetic run: gallery
//! ranking, Recall@K, and hit-rank Average Precision. Run with:
//!
//! ```text
//! cargo run --example retrieval_metrics
//! ```

use uniabg::eval::{average_precision, rank_gallery, recall_at_k, Ranking, RelevanceMap};
use uniabg::store::ViewTag;
use uniabg::synth::{generate, SynthConfig};

fn main() -> uniabg::Result<()> {
    // Hand-checkable cases first.
    let ranking = Ranking {
        order: vec![vec![5, 9, 7, 2]],
    };
    let relevance = RelevanceMap {
        relevant: vec![vec![5, 7]],
    };
    // Relevants at ranks 1 and 3: AP = (1/1 + 2/3) / 2.
    println!(
        "two relevants at ranks 1 and 3: AP = {:.5} (expected {:.5})",
        average_precision(&ranking, &relevance)?,
        (1.0 + 2.0 / 3.0) / 2.0
    );
    println!(
        "R@1 = {}, R@2 = {}, R@3 = {}",
        recall_at_k(&ranking, &relevance, 1)?,
        recall_at_k(&ranking, &relevance, 2)?,
        recall_at_k(&ranking, &relevance, 3)?
    );

    // Drone-to-satellite retrieval on raw synthetic features.
    let data = generate(&SynthConfig::default())?;
    let drone_classes = data.manifest.classes_for_view(ViewTag::Drone)?;
    let sat_classes = data.manifest.classes_for_view(ViewTag::Satellite)?;
    let ranking = rank_gallery(&data.drone, &data.satellite)?;
    let relevance = RelevanceMap::from_classes(&drone_classes, &sat_classes);
    println!("\nraw synthetic drone->satellite ({} queries):", drone_classes.len());
    for k in [1usize, 5, 10] {
        println!("  R@{k:<2} = {:.4}", recall_at_k(&ranking, &relevance, k)?);
    }
    println!("  mAP  = {:.4}", average_precision(&ranking, &relevance)?);
    println!("(the view gap keeps raw R@1 low; the pipeline examples close it)");
    Ok(())
}
