//! Runs the identity-linkage attack on a release and, for contrast, on the
//! real training data itself.
//!
//! `cargo run --example audit`

use pso_forge::classifier::{train_multilabel, TrainHyper, TrainedOn};
use pso_forge::features::{ConditionSource, IdentityExtractor};
use pso_forge::generator::NoiseSchedule;
use pso_forge::pipeline::{generate_dataset, Pipeline, PipelineConfig};
use pso_forge::privacy::{calibrate_on_datasets, identity_attack, targets_from_real, targets_from_release, ThresholdObjective};
use pso_forge::world::{build_world, sample_dataset, split_dataset, Split, SplitOptions, WorldSpec};

pub fn run_example() -> pso_forge::Result<()> {
    let spec = WorldSpec {
        n_identities: 60,
        ..WorldSpec::reference()
    };
    let world = build_world(&spec)?;
    let real = split_dataset(&sample_dataset(&world, 400, 7)?, &SplitOptions::default())?;
    let (train, val, test) = (real.split(Split::Train), real.split(Split::Val), real.split(Split::Test));
    let clf = train_multilabel(&train, &val, &TrainHyper::default(), TrainedOn::Real)?;
    let ex = IdentityExtractor::for_world(&spec)?;
    let filter = calibrate_on_datasets(ex.clone(), &val, &test, ThresholdObjective::Youden, 0)?;
    let cfg = PipelineConfig {
        batch: 8,
        schedule: NoiseSchedule {
            n_steps: 24,
            ..NoiseSchedule::default()
        },
        ..PipelineConfig::default()
    };
    let pipeline = Pipeline::new(&world, &clf, &filter, cfg, ConditionSource::PseudoCondition)?;
    let generation = generate_dataset(&train, &pipeline)?;
    let rows = generation.audit_rows();

    let n_ids = train.identities().len();
    let release = identity_attack(&targets_from_release(&generation.released, &rows, &train)?, &train, &ex, n_ids, Some(&filter))?;
    let own = identity_attack(&targets_from_real(&train)?, &train, &ex, n_ids, None)?;
    for (name, r) in [("release", &release), ("real", &own)] {
        println!(
            "{name}: linked {}/{} (accuracy {:.3}, chance {:.4}, threshold {:.4}) -> {:?}",
            r.n_linked_correctly, r.n_released, r.accuracy, r.chance, r.threshold, r.verdict
        );
    }
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
