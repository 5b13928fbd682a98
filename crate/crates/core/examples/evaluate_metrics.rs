//! Scores a release and the unconditional baseline with the full report:
//! Fréchet distance, retrieval score, AUROC gap and the linkage audit.
//!
//! `cargo run --example evaluate_metrics`

use pso_forge::classifier::{train_multilabel, TrainHyper, TrainedOn};
use pso_forge::features::{ConditionSource, IdentityExtractor};
use pso_forge::generator::NoiseSchedule;
use pso_forge::metrics::{evaluate, EvalContext, EvalReport, Embedding};
use pso_forge::pipeline::{generate_dataset, unconditional_baseline, Pipeline, PipelineConfig};
use pso_forge::privacy::{calibrate_on_datasets, ThresholdObjective};
use pso_forge::world::{build_world, sample_dataset, split_dataset, Split, SplitOptions, WorldSpec};

pub fn run_example() -> pso_forge::Result<()> {
    let spec = WorldSpec {
        n_identities: 60,
        ..WorldSpec::reference()
    };
    let world = build_world(&spec)?;
    let real = split_dataset(&sample_dataset(&world, 400, 6)?, &SplitOptions::default())?;
    let (train, val, test) = (real.split(Split::Train), real.split(Split::Val), real.split(Split::Test));
    let hyper = TrainHyper::default();
    let clf = train_multilabel(&train, &val, &hyper, TrainedOn::Real)?;
    let filter = calibrate_on_datasets(IdentityExtractor::for_world(&spec)?, &val, &test, ThresholdObjective::Youden, 0)?;
    let schedule = NoiseSchedule {
        n_steps: 24,
        ..NoiseSchedule::default()
    };
    let cfg = PipelineConfig {
        batch: 8,
        schedule,
        ..PipelineConfig::default()
    };
    let pipeline = Pipeline::new(&world, &clf, &filter, cfg, ConditionSource::PseudoCondition)?;
    let generation = generate_dataset(&train, &pipeline)?;
    let rows = generation.audit_rows();
    let baseline = unconditional_baseline(&train, &world, &schedule, 0)?;

    let ctx = |audit| EvalContext {
        world: &spec,
        hyper,
        embedding: Embedding::PseudoCondition,
        clf_real: Some(&clf),
        audit,
        filter: Some(&filter),
    };
    let ours = evaluate(&real, &generation.released, &ctx(Some(&rows)))?;
    let base = evaluate(&real, &baseline, &ctx(None))?;
    println!("{}", EvalReport::CSV_HEADER);
    println!("{}", ours.csv_row("ours"));
    println!("{}", base.csv_row("unconditional"));
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
