//! Calibrates the re-identification threshold on validation pairs and checks
//! it on held-out pairs.
//!
//! `cargo run --example calibrate_filter`

use pso_forge::features::IdentityExtractor;
use pso_forge::privacy::{calibrate_on_datasets, ThresholdObjective};
use pso_forge::world::{build_world, sample_dataset, split_dataset, Split, SplitOptions, WorldSpec};

pub fn run_example() -> pso_forge::Result<()> {
    let spec = WorldSpec {
        n_identities: 80,
        ..WorldSpec::reference()
    };
    let world = build_world(&spec)?;
    let real = split_dataset(&sample_dataset(&world, 500, 4)?, &SplitOptions::default())?;
    let filter = calibrate_on_datasets(
        IdentityExtractor::for_world(&spec)?,
        &real.split(Split::Val),
        &real.split(Split::Test),
        ThresholdObjective::Youden,
        0,
    )?;
    let cal = filter.calibration().expect("calibrated");
    println!("tau {:.4}", filter.tau().unwrap_or(f64::NAN));
    println!("held-out AUROC {:.4}, false-negative rate {:.4}", cal.heldout_auroc, cal.heldout_fnr);

    let a = &real.records[0];
    let same = real.records.iter().skip(1).find(|r| r.identity == a.identity);
    let other = real.records.iter().find(|r| r.identity != a.identity).unwrap();
    if let Some(b) = same {
        println!("same identity: score {:.3}, flagged {}", filter.score(&a.x, &b.x), filter.predict(&a.x, &b.x)?);
    }
    println!("other identity: score {:.3}, flagged {}", filter.score(&a.x, &other.x), filter.predict(&a.x, &other.x)?);
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
