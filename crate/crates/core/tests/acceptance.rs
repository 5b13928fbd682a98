//! End-to-end acceptance checks. Each test prints one `[PASS]`/`[FAIL]` line.
//!
//! Run with `cargo test --test acceptance -- --nocapture` to see the lines.

use std::collections::BTreeMap;
use std::sync::OnceLock;
use std::time::{Duration, Instant};

use pso_forge::classifier::{auroc, mean_bce_grad, mean_bce_loss, train_multilabel, Classifier, TrainHyper, TrainedOn};
use pso_forge::features::{ConditionSource, IdentityExtractor, PseudoConditionExtractor};
use pso_forge::generator::{gmm_denoise, Conditioner, Denoiser, GuidanceConfig, NoiseSchedule, Sampler};
use pso_forge::io::dataset_to_string;
use pso_forge::metrics::{embed, frechet_distance, gap_against, irs, Embedding, Gap, GaussianMoments};
use pso_forge::pipeline::{
    cross_site_share, generate_dataset, site_specs, unconditional_baseline, CrossSiteConfig, Generation, Pipeline, PipelineConfig, Site,
};
use pso_forge::privacy::{
    calibrate_on_datasets, identity_attack, reid_predict, targets_from_real, targets_from_release, ReidFilter, ThresholdObjective, Verdict,
};
use pso_forge::world::{build_world, sample_dataset, split_dataset, Dataset, Split, SplitOptions, World, WorldSpec};
use pso_forge::seed;
use rand::Rng;
use rand_distr::StandardNormal;

fn report(id: u32, name: &str, ok: bool, detail: &str, elapsed: Duration, budget: Duration) -> bool {
    let in_time = elapsed <= budget;
    let pass = ok && in_time;
    println!(
        "[{}] criterion {id:>2} {name}: {detail} ({:.1}s / {:.0}s budget)",
        if pass { "PASS" } else { "FAIL" },
        elapsed.as_secs_f64(),
        budget.as_secs_f64()
    );
    pass
}

struct DefaultRun {
    world: World,
    real: Dataset,
    train: Dataset,
    clf_real: Classifier,
    filter: ReidFilter,
    generation: Generation,
    baseline: Dataset,
    build_time: Duration,
    generate_time: Duration,
    baseline_time: Duration,
}

const TRAIN_RECORDS: usize = 2000;

fn default_run() -> &'static DefaultRun {
    static RUN: OnceLock<DefaultRun> = OnceLock::new();
    RUN.get_or_init(|| {
        let t0 = Instant::now();
        let spec = WorldSpec::default();
        let world = build_world(&spec).unwrap();
        let raw = sample_dataset(&world, 2900, 11).unwrap();
        let mut real = split_dataset(&raw, &SplitOptions::default()).unwrap();
        let mut kept_train = 0;
        real.records.retain(|r| {
            if r.split != Split::Train {
                return true;
            }
            kept_train += 1;
            kept_train <= TRAIN_RECORDS
        });
        let train = real.split(Split::Train);
        assert_eq!(train.len(), TRAIN_RECORDS);
        let val = real.split(Split::Val);
        let test = real.split(Split::Test);
        let clf_real = train_multilabel(&train, &val, &TrainHyper::default(), TrainedOn::Real).unwrap();
        let filter = calibrate_on_datasets(
            IdentityExtractor::for_world(&spec).unwrap(),
            &val,
            &test,
            ThresholdObjective::Youden,
            1,
        )
        .unwrap();
        let build_time = t0.elapsed();

        let t1 = Instant::now();
        let generation = {
            let pipeline = Pipeline::new(&world, &clf_real, &filter, PipelineConfig::default(), ConditionSource::PseudoCondition).unwrap();
            generate_dataset(&train, &pipeline).unwrap()
        };
        let generate_time = t1.elapsed();

        let t2 = Instant::now();
        let baseline = unconditional_baseline(&train, &world, &NoiseSchedule::default(), 5).unwrap();
        let baseline_time = t2.elapsed();
        eprintln!(
            "default run: setup {:.1}s, generation {:.1}s, baseline {:.1}s, drops {}",
            build_time.as_secs_f64(),
            generate_time.as_secs_f64(),
            baseline_time.as_secs_f64(),
            generation.dropped.len()
        );
        DefaultRun {
            world,
            real,
            train,
            clf_real,
            filter,
            generation,
            baseline,
            build_time,
            generate_time,
            baseline_time,
        }
    })
}

fn secs(s: u64) -> Duration {
    Duration::from_secs(s)
}

fn moments_1d(mu: f64, sd: f64) -> GaussianMoments {
    GaussianMoments {
        mu: vec![mu],
        sigma: vec![sd * sd],
        n: 2,
    }
}

#[test]
fn criterion_01_frechet_oracle() {
    let t = Instant::now();
    let mut rng = seed::rng(101);
    let mut worst: f64 = 0.0;
    for _ in 0..50 {
        let (m1, m2): (f64, f64) = (rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0));
        let (s1, s2): (f64, f64) = (rng.gen_range(0.05..3.0), rng.gen_range(0.05..3.0));
        let d = frechet_distance(&moments_1d(m1, s1), &moments_1d(m2, s2)).unwrap();
        worst = worst.max((d - ((m1 - m2).powi(2) + (s1 - s2).powi(2))).abs());
    }
    let cov = vec![1.5, 0.4, 0.1, 0.4, 1.0, -0.2, 0.1, -0.2, 0.7];
    let a = GaussianMoments {
        mu: vec![0.5, -1.0, 2.0],
        sigma: cov.clone(),
        n: 100,
    };
    let same = frechet_distance(&a, &a).unwrap();
    let shift = [1.0, 2.0, -0.5];
    let b = GaussianMoments {
        mu: a.mu.iter().zip(shift).map(|(m, d)| m + d).collect(),
        sigma: cov,
        n: 100,
    };
    let shifted = frechet_distance(&a, &b).unwrap();
    let d2: f64 = shift.iter().map(|d| d * d).sum();
    let ok = worst <= 1e-9 && same <= 1e-9 && (shifted - d2).abs() <= 1e-9;
    let detail = format!("max 1D error {worst:.2e}, self {same:.2e}, mean-shift error {:.2e}", (shifted - d2).abs());
    assert!(report(1, "Frechet oracle", ok, &detail, t.elapsed(), secs(1)));
}

#[test]
fn criterion_02_irs_oracle() {
    let t = Instant::now();
    let real: Vec<Vec<f64>> = (0..1000).map(|i| vec![i as f64, (i % 7) as f64]).collect();
    let mut synth: Vec<Vec<f64>> = real.iter().map(|v| vec![v[0] + 0.1, v[1] - 0.1]).collect();
    synth.reverse();
    let perfect = irs(&real, &synth).unwrap();
    let closed = 1000.0 / (1000.0 * (1.0 - 0.999f64.powi(1000)));
    let err = (perfect - closed).abs();

    let n = 500;
    let mut rng = seed::rng(202);
    let mut total = 0.0;
    for trial in 0..100 {
        let modes: Vec<Vec<f64>> = (0..n).map(|_| (0..4).map(|_| rng.sample::<f64, _>(StandardNormal) * 10.0).collect()).collect();
        let mut trng = seed::stream(202, "uniform_generator", trial);
        let draws: Vec<Vec<f64>> = (0..n)
            .map(|_| {
                let k = trng.gen_range(0..n);
                modes[k].iter().map(|v| v + 1e-3 * trng.sample::<f64, _>(StandardNormal)).collect()
            })
            .collect();
        total += irs(&modes, &draws).unwrap();
    }
    let mean = total / 100.0;
    let ok = err <= 1e-12 && (0.97..=1.03).contains(&mean);
    let detail = format!("perfect retrieval {perfect:.12} (error {err:.1e}), uniform generator mean {mean:.4}");
    assert!(report(2, "IRS oracle", ok, &detail, t.elapsed(), secs(30)));
}

#[test]
fn criterion_03_release_invariant() {
    let run = default_run();
    let t = Instant::now();
    let by_id: BTreeMap<u64, &pso_forge::world::Record> = run.train.records.iter().map(|r| (r.record_id, r)).collect();
    let mut violations = 0;
    for (rec, prov) in run.generation.released.records.iter().zip(&run.generation.provenance) {
        if reid_predict(&by_id[&prov.source_record_id].x, &rec.x, &run.filter).unwrap() != 0 {
            violations += 1;
        }
    }
    let text = dataset_to_string(&run.generation.released);
    let header = text.lines().next().unwrap();
    let width = text.lines().nth(1).map_or(0, |l| l.split(',').count());
    let no_identity = header.contains("origin=synthetic") && width == 3 + run.world.dim();
    let elapsed = run.build_time + run.generate_time + t.elapsed();
    let detail = format!(
        "{} released, {} dropped, {violations} flagged pairs, identity column absent: {no_identity}",
        run.generation.released.len(),
        run.generation.dropped.len()
    );
    assert!(report(3, "release invariant", violations == 0 && no_identity, &detail, elapsed, secs(120)));
}

#[test]
fn criterion_04_diversity_ordering() {
    let run = default_run();
    let t = Instant::now();
    let spec = run.world.spec();
    let real = embed(&run.train, Embedding::PseudoCondition, spec).unwrap();
    let released = &run.generation.released;
    // Same N for both sets.
    let n = released.len();
    let mut base = run.baseline.clone();
    base.records.truncate(n);
    let ours = irs(&real, &embed(released, Embedding::PseudoCondition, spec).unwrap()).unwrap();
    let uncond = irs(&real, &embed(&base, Embedding::PseudoCondition, spec).unwrap()).unwrap();
    let elapsed = run.build_time + run.generate_time + run.baseline_time + t.elapsed();
    let detail = format!("pipeline IRS {ours:.3}, unconditional IRS {uncond:.3}, ratio {:.3}", ours / uncond);
    assert!(report(4, "diversity ordering", ours >= 1.2 * uncond, &detail, elapsed, secs(180)));
}

#[test]
fn criterion_05_downstream_gap() {
    let run = default_run();
    let t = Instant::now();
    let val = run.real.split(Split::Val);
    let test = run.real.split(Split::Test);
    let hyper = TrainHyper::default();
    let (ours, _): (Gap, _) = gap_against(&run.clf_real, &run.generation.released, &val, &test, &hyper).unwrap();
    let (base, _) = gap_against(&run.clf_real, &run.baseline, &val, &test, &hyper).unwrap();
    let elapsed = run.build_time + run.generate_time + run.baseline_time + t.elapsed();
    let ok = ours.gap >= -0.02 && ours.gap > base.gap;
    let detail = format!(
        "real {:.4}, pipeline {:.4} (gap {:+.2} pp), unconditional {:.4} (gap {:+.2} pp)",
        ours.auroc_real,
        ours.auroc_synth,
        100.0 * ours.gap,
        base.auroc_synth,
        100.0 * base.gap
    );
    assert!(report(5, "downstream gap", ok, &detail, elapsed, secs(120)));
}

#[test]
fn criterion_06_reid_calibration() {
    let t = Instant::now();
    let spec = WorldSpec::reference();
    let world = build_world(&spec).unwrap();
    let raw = sample_dataset(&world, 3000, 21).unwrap();
    let real = split_dataset(&raw, &SplitOptions::default()).unwrap();
    let filter = calibrate_on_datasets(
        IdentityExtractor::for_world(&spec).unwrap(),
        &real.split(Split::Val),
        &real.split(Split::Test),
        ThresholdObjective::Youden,
        2,
    )
    .unwrap();
    let a = filter.calibration().unwrap().heldout_auroc;
    let detail = format!("held-out AUROC {a:.4}");
    assert!(report(6, "re-id calibration", (0.93..=0.99).contains(&a), &detail, t.elapsed(), secs(30)));
}

#[test]
fn criterion_07_pso_audit() {
    let run = default_run();
    let t = Instant::now();
    let ex = IdentityExtractor::for_world(run.world.spec()).unwrap();
    let n_ids = run.train.identities().len();
    let audit = run.generation.audit_rows();
    let targets = targets_from_release(&run.generation.released, &audit, &run.train).unwrap();
    let released = identity_attack(&targets, &run.train, &ex, n_ids, Some(&run.filter)).unwrap();
    let own = identity_attack(&targets_from_real(&run.train).unwrap(), &run.train, &ex, n_ids, None).unwrap();
    let ok = released.verdict == Verdict::Pass && own.verdict == Verdict::Fail && own.accuracy == 1.0;
    // The shared release is timed under criterion 3; this counts the audit.
    let elapsed = t.elapsed();
    let detail = format!(
        "release accuracy {:.4} vs threshold {:.4} ({:?}); real-on-real accuracy {:.4} ({:?}); audit only",
        released.accuracy, released.threshold, released.verdict, own.accuracy, own.verdict
    );
    assert!(report(7, "PSO audit", ok, &detail, elapsed, secs(60)));
}

#[test]
fn criterion_08_guidance_fallback() {
    let t = Instant::now();
    let spec = WorldSpec::adversarial();
    let world = build_world(&spec).unwrap();
    let raw = sample_dataset(&world, 600, 31).unwrap();
    let real = split_dataset(&raw, &SplitOptions::default()).unwrap();
    let train = real.split(Split::Train);
    let val = real.split(Split::Val);
    let clf = train_multilabel(&train, &val, &TrainHyper::default(), TrainedOn::Real).unwrap();
    let filter = calibrate_on_datasets(
        IdentityExtractor::for_world(&spec).unwrap(),
        &val,
        &real.split(Split::Test),
        ThresholdObjective::Youden,
        3,
    )
    .unwrap();
    let cfg = PipelineConfig {
        batch: 1,
        guidance: GuidanceConfig {
            strength: 1.2,
            decrement: 0.1,
            floor: 1.0,
        },
        ..PipelineConfig::default()
    };
    let pipeline = Pipeline::new(&world, &clf, &filter, cfg, ConditionSource::PseudoCondition).unwrap();
    let g = generate_dataset(&train, &pipeline).unwrap();

    let fell_back: Vec<_> = g.provenance.iter().filter(|p| p.rounds > 1).collect();
    let at_11 = fell_back.iter().filter(|p| p.rounds == 2 && p.guidance_used == 1.1).count();
    let on_grid = g
        .provenance
        .iter()
        .all(|p| ((p.guidance_used * 10.0).round() / 10.0 - p.guidance_used).abs() < 1e-12 && p.guidance_used == [1.2, 1.1, 1.0][p.rounds - 1]);
    let released_sources: Vec<u64> = g.provenance.iter().map(|p| p.source_record_id).collect();
    let dropped_unreleased = g.dropped.iter().all(|d| !released_sources.contains(&d.source_record_id));
    let counted = g.released.len() + g.dropped.len() == train.len();
    let ok = at_11 >= 1 && on_grid && !g.dropped.is_empty() && dropped_unreleased && counted;
    let detail = format!(
        "{} records, {} needed fallback, {at_11} released at w=1.1, {} dropped at the floor, grid ok: {on_grid}",
        train.len(),
        fell_back.len(),
        g.dropped.len()
    );
    assert!(report(8, "guidance fallback", ok, &detail, t.elapsed(), secs(120)));
}

#[test]
fn criterion_09_sampler_consistency() {
    let t = Instant::now();
    let spec = WorldSpec {
        n_identities: 2,
        dim: 4,
        n_classes: 2,
        identity_radius: Some(1.0),
        identity_separation: 0.0,
        identities_per_pattern: 1,
        condition_dim: 2,
        ..WorldSpec::default()
    };
    let mu0 = [3.0, -4.0, 5.0, 2.5];
    let world = build_world(&spec)
        .unwrap()
        .with_means(vec![3.0, -4.0, 5.0, 2.5, 40.0, 40.0, 40.0, 40.0])
        .unwrap()
        .with_weights(vec![1.0, 0.0])
        .unwrap();
    let sampler = Sampler::new(&world, &NoiseSchedule::default(), None).unwrap();
    let n = 10_000;
    let mut sum = [0.0; 4];
    let mut sq = [0.0; 4];
    for i in 0..n {
        let x = sampler.sample_one(None, 0.0, seed::derive(9, "c9", i)).unwrap();
        for d in 0..4 {
            sum[d] += x[d];
            sq[d] += x[d] * x[d];
        }
    }
    let mut moments_ok = true;
    let mut worst_mean: f64 = 0.0;
    let mut worst_std: f64 = 0.0;
    for d in 0..4 {
        let m = sum[d] / n as f64;
        let s = (sq[d] / n as f64 - m * m).sqrt();
        worst_mean = worst_mean.max(((m - mu0[d]) / mu0[d]).abs());
        worst_std = worst_std.max((s - 1.0).abs());
        moments_ok &= (m - mu0[d]).abs() <= 0.02 * mu0[d].abs() && (s - 1.0).abs() <= 0.02;
    }

    let gspec = WorldSpec {
        n_identities: 50,
        ..WorldSpec::default()
    };
    let gworld = build_world(&gspec).unwrap();
    let ex = PseudoConditionExtractor::for_world(&gspec).unwrap();
    let conditioner = Conditioner::new(&gworld, &ex, 0.3).unwrap();
    let denoiser = Denoiser::new(&gworld);
    let mut rng = seed::rng(909);
    let mut exact = true;
    for _ in 0..1000 {
        let x: Vec<f64> = (0..gworld.dim()).map(|_| 4.0 * rng.sample::<f64, _>(StandardNormal)).collect();
        let sigma = rng.gen_range(0.01..20.0);
        let src: Vec<f64> = (0..gworld.dim()).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let cond = conditioner.condition(&ex.extract(&src).values).unwrap();
        exact &= denoiser.guided(&x, sigma, &cond, 0.0) == gmm_denoise(&x, sigma, &gworld);
        exact &= denoiser.guided(&x, sigma, &cond, 1.0) == denoiser.conditional(&x, sigma, &cond);
    }
    let detail = format!("max relative mean error {worst_mean:.4}, max std error {worst_std:.4}, guidance identities exact: {exact}");
    assert!(report(9, "sampler consistency", moments_ok && exact, &detail, t.elapsed(), secs(60)));
}

#[test]
fn criterion_10_cross_site_sharing() {
    let t = Instant::now();
    let base = WorldSpec {
        n_identities: 300,
        ..WorldSpec::default()
    };
    let names = ["north", "central", "south"];
    let sites: Vec<Site> = site_specs(&base, 3, 0.5)
        .iter()
        .zip(names)
        .map(|(s, name)| Site::simulate(name, s, 900, &SplitOptions::default()).unwrap())
        .collect();
    let r = cross_site_share(&sites, &CrossSiteConfig::default()).unwrap();
    let synth_means = r.synthetic_means();
    let best_single = synth_means.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let avg_single = synth_means.iter().sum::<f64>() / synth_means.len() as f64;
    let combined = r.combined_mean();
    let diag_gaps: Vec<f64> = (0..3).map(|i| r.synthetic[i][i] - r.real[i][i]).collect();
    let ok = combined >= avg_single && diag_gaps.iter().all(|g| g.abs() <= 0.03);
    eprintln!("{}", r.to_csv());
    let detail = format!(
        "combined mean {combined:.4}, per-site synthetic mean {avg_single:.4} (best {best_single:.4}), per-site synthetic-real gaps {:?} pp",
        diag_gaps.iter().map(|g| (g * 1000.0).round() / 10.0).collect::<Vec<_>>()
    );
    assert!(report(10, "cross-site sharing", ok, &detail, t.elapsed(), secs(300)));
}

#[test]
fn criterion_11_classifier_numerics() {
    let t = Instant::now();
    let mut rng = seed::rng(1111);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let (n, dim, k) = (rng.gen_range(2..8), rng.gen_range(1..5), rng.gen_range(1..4));
        let xs: Vec<f64> = (0..n * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let ys: Vec<u8> = (0..n * k).map(|_| rng.gen_range(0..2)).collect();
        let w: Vec<f64> = (0..k * dim).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let b: Vec<f64> = (0..k).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
        let (gw, gb) = mean_bce_grad(&w, &b, &xs, &ys, dim);
        let h = 1e-5;
        let mut check = |analytic: f64, numeric: f64| {
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3);
            worst = worst.max(rel);
        };
        for i in 0..w.len() {
            let (mut wp, mut wm) = (w.clone(), w.clone());
            wp[i] += h;
            wm[i] -= h;
            let num = (mean_bce_loss(&wp, &b, &xs, &ys, dim) - mean_bce_loss(&wm, &b, &xs, &ys, dim)) / (2.0 * h);
            check(gw[i], num);
        }
        for i in 0..b.len() {
            let (mut bp, mut bm) = (b.clone(), b.clone());
            bp[i] += h;
            bm[i] -= h;
            let num = (mean_bce_loss(&w, &bp, &xs, &ys, dim) - mean_bce_loss(&w, &bm, &xs, &ys, dim)) / (2.0 * h);
            check(gb[i], num);
        }
    }
    let a = auroc(&[0.1, 0.4, 0.35, 0.8], &[0, 0, 1, 1]).unwrap();
    let ok = worst <= 1e-5 && a == 0.75;
    let detail = format!("max relative gradient error {worst:.2e}, hand-check AUROC {a}");
    assert!(report(11, "classifier numerics", ok, &detail, t.elapsed(), secs(60)));
}
