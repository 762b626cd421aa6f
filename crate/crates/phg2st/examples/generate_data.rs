//! Generates a synthetic two-patient cohort, round-trips it through the
//! on-disk bundle format, and renders one expression heatmap.
//!
//! ```text
//! cargo run --release --example generate_data
//! ```

use phg2st::data::formats::{load_cohort, save_slide_bundle};
use phg2st::data::heatmap::write_heatmap;
use phg2st::data::preprocess::normalize_counts;
use phg2st::data::synth::{generate_cohort, SynthConfig};
use phg2st::Result;

fn main() -> Result<()> {
    let cfg = SynthConfig {
        n_rows: 12,
        n_cols: 10,
        d: 16,
        m: 20,
        latent_dim: 6,
        noise_sigma: 0.1,
    };
    let cohort = generate_cohort(&cfg, 2, 2, 7)?;

    let root = std::env::temp_dir().join("phg2st_examples/generate_data");
    for bundle in &cohort {
        save_slide_bundle(bundle, &root.join(&bundle.slide_id))?;
    }
    println!("wrote {} slides under {}", cohort.len(), root.display());

    let reloaded = load_cohort(&root)?;
    for bundle in &reloaded {
        println!(
            "  {} (patient {}): {} spots, {} features, {} genes ({}, ...)",
            bundle.slide_id,
            bundle.patient_id,
            bundle.n,
            bundle.feature_dim(),
            bundle.m_raw,
            bundle.gene_names[..3.min(bundle.gene_names.len())].join(", "),
        );
    }

    // Log-normalize the first slide and render gene 0 on the spot grid.
    let first = &reloaded[0];
    let expr = normalize_counts(first, &[0])?;
    let column: Vec<f64> = (0..first.n).map(|i| expr.values.get(i, 0)).collect();
    let pgm = root.join(format!("{}_{}.pgm", first.slide_id, expr.gene_names[0]));
    write_heatmap(&column, &first.grid, &pgm)?;
    println!("heatmap of {}: {}", expr.gene_names[0], pgm.display());
    Ok(())
}
