//! Simulates several shifted sites, releases synthetic data from each and
//! compares single-site and pooled classifiers across sites.
//!
//! `cargo run --example cross_site_sharing`

use pso_forge::generator::NoiseSchedule;
use pso_forge::pipeline::{cross_site_share, site_specs, CrossSiteConfig, PipelineConfig, Site};
use pso_forge::world::{SplitOptions, WorldSpec};

pub fn run_example() -> pso_forge::Result<()> {
    let base = WorldSpec {
        n_identities: 40,
        ..WorldSpec::reference()
    };
    let sites = site_specs(&base, 3, 0.5)
        .iter()
        .enumerate()
        .map(|(i, s)| Site::simulate(&format!("site{}", i + 1), s, 300, &SplitOptions::default()))
        .collect::<pso_forge::Result<Vec<_>>>()?;
    let cfg = CrossSiteConfig {
        pipeline: PipelineConfig {
            batch: 8,
            schedule: NoiseSchedule {
                n_steps: 16,
                ..NoiseSchedule::default()
            },
            ..PipelineConfig::default()
        },
        ..CrossSiteConfig::default()
    };
    let report = cross_site_share(&sites, &cfg)?;
    print!("{}", report.to_csv());
    let single = report.synthetic_means();
    println!(
        "pooled {:.4} vs single-site average {:.4}",
        report.combined_mean(),
        single.iter().sum::<f64>() / single.len() as f64
    );
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
