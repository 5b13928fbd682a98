//! Draws samples from the analytic mixture denoiser, unconditionally and
//! guided by the pseudo-condition of one real record.
//!
//! `cargo run --example diffusion_sampling`

use pso_forge::features::{ConditionExtractor, PseudoConditionExtractor};
use pso_forge::generator::{Conditioner, Conditioning, NoiseSchedule, Sampler};
use pso_forge::world::{build_world, sample_dataset, WorldSpec};

fn dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(p, q)| (p - q).powi(2)).sum::<f64>().sqrt()
}

pub fn run_example() -> pso_forge::Result<()> {
    let spec = WorldSpec {
        n_identities: 30,
        ..WorldSpec::default()
    };
    let world = build_world(&spec)?;
    let real = sample_dataset(&world, 10, 2)?;
    let extractor = PseudoConditionExtractor::for_world(&spec)?;
    let conditioner = Conditioner::with_mode(&world, &extractor, 0.1, Conditioning::Posterior)?;
    let schedule = NoiseSchedule {
        n_steps: 32,
        ..NoiseSchedule::default()
    };
    let sampler = Sampler::new(&world, &schedule, Some(conditioner))?;

    let source = &real.records[0];
    let c_s = extractor.condition(&source.x);
    let condition = sampler.condition(&c_s)?;
    let seeds: Vec<u64> = (0..8).collect();
    for w in [0.0, 1.0] {
        let xs = sampler.sample_seeds(Some(&condition), w, &seeds)?;
        let mean: f64 = xs.iter().map(|x| dist(&extractor.condition(x), &c_s)).sum::<f64>() / xs.len() as f64;
        println!("w = {w}: mean pseudo-condition distance to the source {mean:.4}");
    }
    // Same seed, same sample.
    assert_eq!(sampler.sample_one(None, 0.0, 7)?, sampler.sample_one(None, 0.0, 7)?);
    Ok(())
}

#[allow(dead_code)]
fn main() {
    run_example().unwrap();
}
