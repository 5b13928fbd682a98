//! PSO-secure dataset generation.
//!
//! For every real training record: sample a batch conditioned on its
//! pseudo-condition, drop candidates the re-identification filter flags
//! against any real record of the same identity, keep the survivor whose
//! classifier prediction is closest in BCE to the real one. An empty survivor
//! set lowers the guidance strength one grid step and resamples with fresh
//! noise; a record that never yields a survivor is dropped.
//!
//! The sampling and filtering path only sees feature vectors. Labels are
//! attached to the released record afterwards, for downstream evaluation.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::classifier::{bce, macro_auroc, train_multilabel, Classifier, TrainHyper, TrainedOn};
use crate::features::{ClassifierCondition, ConditionExtractor, ConditionSource, IdentityExtractor, PseudoConditionExtractor};
use crate::generator::{quantize, Conditioner, Conditioning, GuidanceConfig, NoiseSchedule, Sampler};
use crate::io::{AuditRow, KvConfig};
use crate::metrics::{evaluate, EvalContext, EvalReport, Embedding};
use crate::privacy::{calibrate_on_datasets, ReidFilter, ThresholdObjective};
use crate::world::{build_world, sample_dataset, split_dataset, Dataset, Origin, Record, Split, SplitOptions, World, WorldSpec};
use crate::{seed, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub batch: usize,
    pub guidance: GuidanceConfig,
    pub max_rounds: usize,
    /// Width of the compatibility kernel between pseudo-conditions.
    pub kernel_width: f64,
    /// Posterior conditioning carries a record's position within its
    /// component over to the sample; component conditioning only its pattern.
    pub conditioning: Conditioning,
    pub schedule: NoiseSchedule,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            batch: 32,
            guidance: GuidanceConfig::default(),
            max_rounds: 13,
            kernel_width: 0.1,
            conditioning: Conditioning::Posterior,
            schedule: NoiseSchedule::default(),
            seed: 0,
        }
    }
}

impl PipelineConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch == 0 {
            return Err(Error::config("batch must be at least 1"));
        }
        if self.max_rounds == 0 {
            return Err(Error::config("max_rounds must be at least 1"));
        }
        self.guidance.validate()?;
        self.schedule.validate()
    }

    /// Overrides fields from flat config keys: `batch`, `guidance`,
    /// `guidance_decrement`, `guidance_floor`, `max_rounds`, `kernel_width`,
    /// `conditioning`, `steps`, `sigma_min`, `sigma_max`, `rho`, `solver`.
    /// Other keys are left for other consumers; the seed is set by the caller.
    pub fn apply_config(&mut self, kv: &KvConfig) -> Result<()> {
        macro_rules! take {
            ($key:literal => $field:expr) => {
                if let Some(v) = kv.get($key)? {
                    $field = v;
                }
            };
        }
        take!("batch" => self.batch);
        take!("guidance" => self.guidance.strength);
        take!("guidance_decrement" => self.guidance.decrement);
        take!("guidance_floor" => self.guidance.floor);
        take!("max_rounds" => self.max_rounds);
        take!("kernel_width" => self.kernel_width);
        take!("conditioning" => self.conditioning);
        take!("steps" => self.schedule.n_steps);
        take!("sigma_min" => self.schedule.sigma_min);
        take!("sigma_max" => self.schedule.sigma_max);
        take!("rho" => self.schedule.rho);
        take!("solver" => self.schedule.solver);
        self.validate()
    }

    pub fn to_config(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("batch", self.batch);
        kv.set("guidance", self.guidance.strength);
        kv.set("guidance_decrement", self.guidance.decrement);
        kv.set("guidance_floor", self.guidance.floor);
        kv.set("max_rounds", self.max_rounds);
        kv.set("kernel_width", self.kernel_width);
        kv.set("conditioning", self.conditioning);
        kv.set("steps", self.schedule.n_steps);
        kv.set("sigma_min", self.schedule.sigma_min);
        kv.set("sigma_max", self.schedule.sigma_max);
        kv.set("rho", self.schedule.rho);
        kv.set("solver", self.schedule.solver);
        kv
    }
}

/// How one released vector was produced. Audit-only.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProvenanceEntry {
    pub record_id: u64,
    pub source_record_id: u64,
    pub guidance_used: f64,
    pub rounds: usize,
    /// Candidates removed by the filter, summed over rounds.
    pub n_candidates_filtered: usize,
    pub n_survivors: usize,
    pub candidate_index: usize,
    pub init_noise_seed: u64,
    pub final_bce: f64,
    /// Mean BCE over all survivors of the final round.
    pub mean_survivor_bce: f64,
}

impl ProvenanceEntry {
    pub fn audit_row(&self) -> AuditRow {
        AuditRow {
            record_id: self.record_id,
            source_record_id: self.source_record_id,
            guidance_used: self.guidance_used,
            n_candidates_filtered: self.n_candidates_filtered,
            final_bce: self.final_bce,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dropped {
    pub source_record_id: u64,
    pub last_guidance: f64,
    pub n_candidates_filtered: usize,
}

/// A generator bound to one world, classifier and filter.
pub struct Pipeline<'a> {
    cfg: PipelineConfig,
    sampler: Sampler<'a>,
    extractor: Box<dyn ConditionExtractor + 'a>,
    clf_r: &'a Classifier,
    filter: &'a ReidFilter,
}

impl<'a> Pipeline<'a> {
    pub fn new(
        world: &'a World,
        clf_r: &'a Classifier,
        filter: &'a ReidFilter,
        cfg: PipelineConfig,
        source: ConditionSource,
    ) -> Result<Self> {
        cfg.validate()?;
        if filter.tau().is_none() {
            return Err(Error::Uncalibrated);
        }
        if clf_r.dim() != world.dim() || clf_r.n_classes() != world.n_classes() {
            return Err(Error::config("classifier does not match the world"));
        }
        if filter.extractor_spec().in_dim != world.dim() {
            return Err(Error::config("filter does not match the world"));
        }
        let extractor: Box<dyn ConditionExtractor + 'a> = match source {
            ConditionSource::PseudoCondition => Box::new(PseudoConditionExtractor::for_world(world.spec())?),
            ConditionSource::Classifier => Box::new(ClassifierCondition(clf_r)),
        };
        let conditioner = Conditioner::with_mode(world, extractor.as_ref(), cfg.kernel_width, cfg.conditioning)?;
        let sampler = Sampler::new(world, &cfg.schedule, Some(conditioner))?;
        Ok(Pipeline {
            cfg,
            sampler,
            extractor,
            clf_r,
            filter,
        })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.cfg
    }

    fn rounds(&self) -> impl Iterator<Item = (usize, f64)> + '_ {
        let floor = quantize(self.cfg.guidance.floor);
        (0..self.cfg.max_rounds)
            .map(|r| (r, self.cfg.guidance.strength_at(r)))
            .take_while(move |&(_, w)| w >= floor)
    }

    /// Counterpart of one real vector. `protected` holds every real vector
    /// of the same identity; `x` itself is always protected.
    ///
    /// The returned entry has `record_id` 0; the caller assigns it.
    pub fn counterpart(&self, source_record_id: u64, x: &[f64], protected: &[&[f64]]) -> Result<(Vec<f64>, ProvenanceEntry)> {
        let extractor = self.filter.extractor();
        let mut shielded: Vec<Vec<f64>> = vec![extractor.embed(x)];
        shielded.extend(protected.iter().map(|p| extractor.embed(p)));
        let condition = self.sampler.condition(&self.extractor.condition(x))?;
        let target = self.clf_r.predict_proba(x);
        let record_seed = seed::derive(self.cfg.seed, "pipeline", source_record_id);

        let mut filtered = 0;
        let mut last_guidance = self.cfg.guidance.strength;
        for (round, w) in self.rounds() {
            last_guidance = w;
            let batch = self.sampler.sample_batch(
                Some(&condition),
                w,
                self.cfg.batch,
                seed::derive(record_seed, "round", round as u64),
                source_record_id,
            )?;
            let mut best: Option<(f64, usize)> = None;
            let mut survivors = 0;
            let mut bce_sum = 0.0;
            for (i, c) in batch.iter().enumerate() {
                if self.filter.flags_embedded(&shielded, &c.x_prime)? {
                    filtered += 1;
                    continue;
                }
                let loss = bce(&target, &self.clf_r.predict_proba(&c.x_prime));
                survivors += 1;
                bce_sum += loss;
                if best.is_none_or(|(b, _)| loss < b) {
                    best = Some((loss, i));
                }
            }
            if let Some((loss, i)) = best {
                let chosen = &batch[i];
                return Ok((
                    chosen.x_prime.clone(),
                    ProvenanceEntry {
                        record_id: 0,
                        source_record_id,
                        guidance_used: w,
                        rounds: round + 1,
                        n_candidates_filtered: filtered,
                        n_survivors: survivors,
                        candidate_index: chosen.index,
                        init_noise_seed: chosen.init_noise_seed,
                        final_bce: loss,
                        mean_survivor_bce: bce_sum / survivors as f64,
                    },
                ));
            }
        }
        Err(Error::Unsatisfiable {
            record_id: source_record_id,
            last_guidance,
        })
    }
}

/// A release and everything needed to audit it.
#[derive(Debug, Clone)]
pub struct Generation {
    pub released: Dataset,
    pub provenance: Vec<ProvenanceEntry>,
    pub dropped: Vec<Dropped>,
}

impl Generation {
    pub fn audit_rows(&self) -> Vec<AuditRow> {
        self.provenance.iter().map(ProvenanceEntry::audit_row).collect()
    }
}

/// Real vectors grouped by identity.
fn identity_groups(ds: &Dataset) -> BTreeMap<u32, Vec<&[f64]>> {
    let mut groups: BTreeMap<u32, Vec<&[f64]>> = BTreeMap::new();
    for r in &ds.records {
        if let Some(id) = r.identity {
            groups.entry(id).or_default().push(&r.x);
        }
    }
    groups
}

/// One synthetic counterpart per real training record, in input order.
///
/// Unsatisfiable records are dropped and listed; other errors abort.
pub fn generate_dataset(real_train: &Dataset, pipeline: &Pipeline) -> Result<Generation> {
    if real_train.is_empty() {
        return Err(Error::data("nothing to generate from"));
    }
    let groups = identity_groups(real_train);
    let mut records = Vec::with_capacity(real_train.len());
    let mut provenance = Vec::with_capacity(real_train.len());
    let mut dropped = Vec::new();
    for src in &real_train.records {
        let protected: &[&[f64]] = src.identity.and_then(|id| groups.get(&id)).map_or(&[], Vec::as_slice);
        match pipeline.counterpart(src.record_id, &src.x, protected) {
            Ok((x_prime, mut entry)) => {
                let record_id = records.len() as u64;
                entry.record_id = record_id;
                records.push(Record {
                    record_id,
                    identity: None,
                    split: Split::Train,
                    labels: src.labels.clone(),
                    x: x_prime,
                });
                provenance.push(entry);
            }
            Err(Error::Unsatisfiable { record_id, last_guidance }) => dropped.push(Dropped {
                source_record_id: record_id,
                last_guidance,
                n_candidates_filtered: pipeline.rounds().count() * pipeline.cfg.batch,
            }),
            Err(e) => return Err(e),
        }
    }
    Ok(Generation {
        released: Dataset::new(Origin::Synthetic, real_train.dim, real_train.n_classes, records)?,
        provenance,
        dropped,
    })
}

/// Plain unguided sampling, one vector per real record with its labels
/// copied over: the baseline without conditioning or selection.
pub fn unconditional_baseline(real_train: &Dataset, world: &World, schedule: &NoiseSchedule, seed: u64) -> Result<Dataset> {
    let sampler = Sampler::new(world, schedule, None)?;
    let records = real_train
        .records
        .iter()
        .enumerate()
        .map(|(i, src)| {
            Ok(Record {
                record_id: i as u64,
                identity: None,
                split: Split::Train,
                labels: src.labels.clone(),
                x: sampler.sample_one(None, 0.0, seed::derive(seed, "baseline", src.record_id))?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Dataset::new(Origin::Synthetic, real_train.dim, real_train.n_classes, records)
}

/// World specs for `n` sites sharing the predicate geometry of `base` but
/// with their own identities and covariate shift.
pub fn site_specs(base: &WorldSpec, n: usize, covariate_shift: f64) -> Vec<WorldSpec> {
    (0..n)
        .map(|i| WorldSpec {
            seed: seed::derive(base.seed, "site", i as u64),
            covariate_shift,
            ..base.clone()
        })
        .collect()
}

/// One participating institution.
pub struct Site {
    pub name: String,
    pub world: World,
    /// Real records with train/val/test splits.
    pub real: Dataset,
}

impl Site {
    /// Builds the world and samples a split dataset of `n_records`.
    pub fn simulate(name: &str, spec: &WorldSpec, n_records: usize, split: &SplitOptions) -> Result<Site> {
        let world = build_world(spec)?;
        let raw = sample_dataset(&world, n_records, seed::derive(spec.seed, "site_records", 0))?;
        let real = split_dataset(&raw, split)?;
        Ok(Site {
            name: name.to_string(),
            world,
            real,
        })
    }
}

#[derive(Debug, Clone)]
pub struct CrossSiteConfig {
    pub pipeline: PipelineConfig,
    pub hyper: TrainHyper,
    pub objective: ThresholdObjective,
    pub embedding: Embedding,
}

impl Default for CrossSiteConfig {
    fn default() -> Self {
        CrossSiteConfig {
            pipeline: PipelineConfig::default(),
            hyper: TrainHyper::default(),
            objective: ThresholdObjective::Youden,
            embedding: Embedding::PseudoCondition,
        }
    }
}

/// Train-site × test-site macro AUROC.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CrossSiteReport {
    pub sites: Vec<String>,
    /// `real[i][j]`: trained on site i's real data, tested on site j.
    pub real: Vec<Vec<f64>>,
    /// `synthetic[i][j]`: trained on site i's release, tested on site j.
    pub synthetic: Vec<Vec<f64>>,
    /// Trained on the pooled releases, tested on each site.
    pub combined: Vec<f64>,
    pub per_site: Vec<EvalReport>,
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

impl CrossSiteReport {
    /// Mean test AUROC of each single-site synthetic classifier.
    pub fn synthetic_means(&self) -> Vec<f64> {
        self.synthetic.iter().map(|row| mean(row)).collect()
    }

    pub fn combined_mean(&self) -> f64 {
        mean(&self.combined)
    }

    /// Grid as CSV: one row per training source, one column per test site.
    pub fn to_csv(&self) -> String {
        let mut out = format!("train,{},mean\n", self.sites.join(","));
        let mut row = |label: String, vals: &[f64]| {
            let cells: Vec<String> = vals.iter().map(|v| format!("{v:.6}")).collect();
            out.push_str(&format!("{label},{},{:.6}\n", cells.join(","), mean(vals)));
        };
        for (i, name) in self.sites.iter().enumerate() {
            row(format!("{name} real"), &self.real[i]);
        }
        for (i, name) in self.sites.iter().enumerate() {
            row(format!("{name} synthetic"), &self.synthetic[i]);
        }
        row("combined synthetic".to_string(), &self.combined);
        out
    }
}

/// Everything one site produces before pooling.
pub struct SiteRelease {
    pub clf_real: Classifier,
    pub filter: ReidFilter,
    pub generation: Generation,
}

/// Trains, calibrates and generates at one site.
pub fn release_site(site: &Site, cfg: &CrossSiteConfig) -> Result<SiteRelease> {
    let train = site.real.split(Split::Train);
    let val = site.real.split(Split::Val);
    let test = site.real.split(Split::Test);
    let clf_real = train_multilabel(&train, &val, &cfg.hyper, TrainedOn::Real)?;
    let filter = calibrate_on_datasets(
        IdentityExtractor::for_world(site.world.spec())?,
        &val,
        &test,
        cfg.objective,
        seed::derive(cfg.pipeline.seed, "calibration", 0),
    )?;
    let generation = {
        let pipeline = Pipeline::new(&site.world, &clf_real, &filter, cfg.pipeline.clone(), ConditionSource::PseudoCondition)?;
        generate_dataset(&train, &pipeline)?
    };
    Ok(SiteRelease {
        clf_real,
        filter,
        generation,
    })
}

/// Generates at every site, pools the releases and compares single-site
/// against pooled training on every site's real test split.
pub fn cross_site_share(sites: &[Site], cfg: &CrossSiteConfig) -> Result<CrossSiteReport> {
    let first = sites.first().ok_or_else(|| Error::config("need at least one site"))?;
    if sites
        .iter()
        .any(|s| s.real.n_classes != first.real.n_classes || s.real.dim != first.real.dim)
    {
        return Err(Error::config("sites have incompatible class schemas"));
    }
    let releases = sites.iter().map(|s| release_site(s, cfg)).collect::<Result<Vec<_>>>()?;
    let tests: Vec<Dataset> = sites.iter().map(|s| s.real.split(Split::Test)).collect();
    let vals: Vec<Dataset> = sites.iter().map(|s| s.real.split(Split::Val)).collect();

    let mut real = Vec::new();
    let mut synthetic = Vec::new();
    let mut per_site = Vec::new();
    for (site, rel) in sites.iter().zip(&releases) {
        let clf_synth = train_multilabel(&rel.generation.released, &site.real.split(Split::Val), &cfg.hyper, TrainedOn::Synthetic)?;
        real.push(tests.iter().map(|t| Ok(macro_auroc(&rel.clf_real, t)?.macro_auroc)).collect::<Result<Vec<_>>>()?);
        synthetic.push(tests.iter().map(|t| Ok(macro_auroc(&clf_synth, t)?.macro_auroc)).collect::<Result<Vec<_>>>()?);
        let audit = rel.generation.audit_rows();
        per_site.push(evaluate(
            &site.real,
            &rel.generation.released,
            &EvalContext {
                world: site.world.spec(),
                hyper: cfg.hyper,
                embedding: cfg.embedding,
                clf_real: Some(&rel.clf_real),
                audit: Some(&audit),
                filter: Some(&rel.filter),
            },
        )?);
    }

    let pooled = Dataset::concat(&releases.iter().map(|r| &r.generation.released).collect::<Vec<_>>())?;
    let pooled_val = Dataset::concat(&vals.iter().collect::<Vec<_>>())?;
    let clf_pooled = train_multilabel(&pooled, &pooled_val, &cfg.hyper, TrainedOn::Combined)?;
    let combined = tests
        .iter()
        .map(|t| Ok(macro_auroc(&clf_pooled, t)?.macro_auroc))
        .collect::<Result<Vec<_>>>()?;
    Ok(CrossSiteReport {
        sites: sites.iter().map(|s| s.name.clone()).collect(),
        real,
        synthetic,
        combined,
        per_site,
    })
}
