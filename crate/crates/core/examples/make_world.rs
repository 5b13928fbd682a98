//! Builds a small world, samples records and splits them by identity.
//!
//! `cargo run --example make_world`

use pso_forge::io::dataset_to_string;
use pso_forge::world::{build_world, sample_dataset, split_dataset, Split, SplitOptions, WorldSpec};

pub fn run_example() -> pso_forge::Result<()> {
    let spec = WorldSpec {
        n_identities: 40,
        ..WorldSpec::reference()
    };
    let world = build_world(&spec)?;
    println!("{} components in R^{}, {} classes", world.n_components(), world.dim(), world.n_classes());

    let raw = sample_dataset(&world, 300, 1)?;
    let real = split_dataset(&raw, &SplitOptions::default())?;
    for split in [Split::Train, Split::Val, Split::Test] {
        let part = real.split(split);
        println!("{split}: {} records, {} identities", part.len(), part.identities().len());
    }
    // Identities never cross splits by default.
    let train_ids = real.split(Split::Train).identities();
    assert!(real.split(Split::Test).identities().is_disjoint(&train_ids));

    for (labels, count) in real.label_histogram().iter().take(4) {
        println!("labels {labels:?}: {count}");
    }
    let text = dataset_to_string(&real);
    println!("{}", text.lines().next().unwrap_or_default());
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
