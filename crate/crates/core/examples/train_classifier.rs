//! Trains the linear multi-label classifier and scores it by macro AUROC.
//!
//! `cargo run --example train_classifier`

use pso_forge::classifier::{macro_auroc, train_multilabel, TrainHyper, TrainedOn};
use pso_forge::world::{build_world, sample_dataset, split_dataset, Split, SplitOptions, WorldSpec};

pub fn run_example() -> pso_forge::Result<()> {
    let spec = WorldSpec {
        n_identities: 60,
        ..WorldSpec::reference()
    };
    let world = build_world(&spec)?;
    let real = split_dataset(&sample_dataset(&world, 600, 3)?, &SplitOptions::default())?;
    let (train, val, test) = (real.split(Split::Train), real.split(Split::Val), real.split(Split::Test));

    let clf = train_multilabel(&train, &val, &TrainHyper::default(), TrainedOn::Real)?;
    let scores = macro_auroc(&clf, &test)?;
    println!("test macro AUROC {:.4} over {} classes", scores.macro_auroc, spec.n_classes);
    println!("p(labels | first test record) = {:?}", clf.predict_proba(&test.records[0].x));
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
