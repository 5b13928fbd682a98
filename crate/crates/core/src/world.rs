//! The toy patient population.
//!
//! A world is a Gaussian mixture with one component per identity. The first
//! `n_classes` coordinates carry predicate geometry (bit `b` set moves
//! coordinate `b` to `+offset`, unset to `-offset`); the remaining
//! coordinates carry identity on a seeded random frame.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal, WeightedIndex};
use serde::{Deserialize, Serialize};

use crate::io::KvConfig;
use crate::seed;
use crate::{Error, Result};

const MAX_PLACEMENT_ATTEMPTS: usize = 5_000;
const MIN_CLASS_PREVALENCE: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WorldSpec {
    pub n_identities: usize,
    pub dim: usize,
    pub n_classes: usize,
    /// Per-component standard deviation.
    pub cluster_std: f64,
    /// Minimum pairwise distance between component means.
    pub identity_separation: f64,
    /// Norm of the identity part of each mean. Defaults to the separation.
    pub identity_radius: Option<f64>,
    /// Magnitude of the per-bit offset on predicate coordinates.
    pub predicate_offset: f64,
    /// Identities sharing one predicate pattern.
    pub identities_per_pattern: usize,
    /// At most one active class per identity.
    pub single_label: bool,
    /// Scale of a seeded site-level shift applied to predicate coordinates.
    pub covariate_shift: f64,
    /// Output dimension of the pseudo-condition extractor.
    pub condition_dim: usize,
    pub seed: u64,
}

impl Default for WorldSpec {
    fn default() -> Self {
        WorldSpec {
            n_identities: 1000,
            dim: 16,
            n_classes: 8,
            cluster_std: 1.0,
            identity_separation: 2.0,
            identity_radius: Some(6.0),
            predicate_offset: 1.0,
            identities_per_pattern: 4,
            single_label: false,
            covariate_shift: 0.0,
            condition_dim: 10,
            seed: 0,
        }
    }
}

impl WorldSpec {
    /// Re-identification operates in the regime of a real, imperfect filter.
    pub fn reference() -> Self {
        WorldSpec {
            identity_radius: Some(3.8),
            identity_separation: 0.5,
            ..WorldSpec::default()
        }
    }

    /// Identities packed so tightly that the filter flags most candidates.
    pub fn adversarial() -> Self {
        WorldSpec {
            n_identities: 200,
            identity_radius: Some(0.6),
            identity_separation: 0.01,
            ..WorldSpec::default()
        }
    }

    pub fn preset(name: &str) -> Result<Self> {
        match name {
            "default" => Ok(WorldSpec::default()),
            "reference" | "paperlike" => Ok(WorldSpec::reference()),
            "adversarial" => Ok(WorldSpec::adversarial()),
            other => Err(Error::config(format!("unknown world preset `{other}`"))),
        }
    }

    pub fn identity_dim(&self) -> usize {
        self.dim.saturating_sub(self.n_classes)
    }

    pub fn predicate_block(&self) -> Range<usize> {
        0..self.n_classes
    }

    pub fn identity_block(&self) -> Range<usize> {
        self.n_classes..self.dim
    }

    pub fn radius(&self) -> f64 {
        self.identity_radius.unwrap_or(self.identity_separation)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_identities < 2 {
            return Err(Error::config("n_identities must be at least 2"));
        }
        if self.n_classes == 0 {
            return Err(Error::config("n_classes must be at least 1"));
        }
        if self.dim <= self.n_classes {
            return Err(Error::config(format!(
                "dim {} leaves no identity subspace beside {} predicate classes",
                self.dim, self.n_classes
            )));
        }
        if !(self.cluster_std >= 0.0 && self.cluster_std.is_finite()) {
            return Err(Error::config("cluster_std must be finite and non-negative"));
        }
        if !(self.identity_separation >= 0.0 && self.identity_separation.is_finite()) {
            return Err(Error::config("identity_separation must be finite and non-negative"));
        }
        if !(self.radius() > 0.0 && self.radius().is_finite()) {
            return Err(Error::config("identity_radius must be positive"));
        }
        if self.identities_per_pattern == 0 {
            return Err(Error::config("identities_per_pattern must be at least 1"));
        }
        if self.condition_dim == 0 || self.condition_dim > self.dim {
            return Err(Error::config("condition_dim must lie in [1, dim]"));
        }
        Ok(())
    }

    pub fn to_config(&self) -> KvConfig {
        let mut kv = KvConfig::default();
        kv.set("n_identities", self.n_identities);
        kv.set("dim", self.dim);
        kv.set("n_classes", self.n_classes);
        kv.set("cluster_std", self.cluster_std);
        kv.set("identity_separation", self.identity_separation);
        kv.set("identity_radius", self.radius());
        kv.set("predicate_offset", self.predicate_offset);
        kv.set("identities_per_pattern", self.identities_per_pattern);
        kv.set("single_label", self.single_label);
        kv.set("covariate_shift", self.covariate_shift);
        kv.set("condition_dim", self.condition_dim);
        kv.set("seed", self.seed);
        kv
    }

    /// Reads a spec from a flat config, starting from `preset` when given.
    pub fn from_config(kv: &KvConfig) -> Result<Self> {
        let mut spec = match kv.get_str("preset") {
            Some(name) => WorldSpec::preset(name)?,
            None => WorldSpec::default(),
        };
        let has_classes = kv.get_str("n_classes").is_some();
        if let Some(v) = kv.get("n_identities")? {
            spec.n_identities = v;
        }
        if let Some(v) = kv.get("dim")? {
            spec.dim = v;
        }
        if let Some(v) = kv.get("n_classes")? {
            spec.n_classes = v;
        }
        if let Some(v) = kv.get("cluster_std")? {
            spec.cluster_std = v;
        }
        if let Some(v) = kv.get("identity_separation")? {
            spec.identity_separation = v;
        }
        if let Some(v) = kv.get("identity_radius")? {
            spec.identity_radius = Some(v);
        }
        if let Some(v) = kv.get("predicate_offset")? {
            spec.predicate_offset = v;
        }
        if let Some(v) = kv.get("identities_per_pattern")? {
            spec.identities_per_pattern = v;
        }
        if let Some(v) = kv.get("single_label")? {
            spec.single_label = v;
        }
        if let Some(v) = kv.get("covariate_shift")? {
            spec.covariate_shift = v;
        }
        match kv.get("condition_dim")? {
            Some(v) => spec.condition_dim = v,
            None if has_classes => spec.condition_dim = (spec.n_classes + 2).min(spec.dim),
            None => {}
        }
        if let Some(v) = kv.get("seed")? {
            spec.seed = v;
        }
        spec.validate()?;
        Ok(spec)
    }
}

/// A built mixture. Immutable after construction.
#[derive(Debug, Clone, PartialEq)]
pub struct World {
    spec: WorldSpec,
    means: Vec<f64>,
    weights: Vec<f64>,
    predicates: Vec<u8>,
}

impl World {
    pub fn spec(&self) -> &WorldSpec {
        &self.spec
    }

    pub fn n_components(&self) -> usize {
        self.weights.len()
    }

    pub fn dim(&self) -> usize {
        self.spec.dim
    }

    pub fn n_classes(&self) -> usize {
        self.spec.n_classes
    }

    pub fn cluster_std(&self) -> f64 {
        self.spec.cluster_std
    }

    pub fn mean(&self, k: usize) -> &[f64] {
        &self.means[k * self.spec.dim..(k + 1) * self.spec.dim]
    }

    /// Row-major `n_components × dim` matrix of means.
    pub fn means(&self) -> &[f64] {
        &self.means
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn predicates(&self, k: usize) -> &[u8] {
        &self.predicates[k * self.spec.n_classes..(k + 1) * self.spec.n_classes]
    }

    /// Replaces the mixture weights. Zero weights disable a component.
    pub fn with_weights(mut self, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != self.n_components() {
            return Err(Error::config("weight vector length differs from n_identities"));
        }
        if weights.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::config("weights must be finite and non-negative"));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return Err(Error::config(format!("weights sum to {total}, not 1")));
        }
        self.weights = weights;
        Ok(self)
    }

    /// Replaces the component standard deviation.
    pub fn with_cluster_std(mut self, std: f64) -> Result<Self> {
        if !(std >= 0.0 && std.is_finite()) {
            return Err(Error::config("cluster_std must be finite and non-negative"));
        }
        self.spec.cluster_std = std;
        Ok(self)
    }

    /// Replaces the means, keeping predicates and weights.
    pub fn with_means(mut self, means: Vec<f64>) -> Result<Self> {
        if means.len() != self.means.len() || means.iter().any(|v| !v.is_finite()) {
            return Err(Error::config("means must be finite with shape n_identities × dim"));
        }
        self.means = means;
        Ok(self)
    }
}

fn gaussian_vec<R: Rng>(rng: &mut R, n: usize) -> Vec<f64> {
    (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}

fn random_frame<R: Rng>(rng: &mut R, n: usize) -> Vec<Vec<f64>> {
    let mut frame: Vec<Vec<f64>> = Vec::with_capacity(n);
    while frame.len() < n {
        let mut v = gaussian_vec(rng, n);
        for u in &frame {
            let proj: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            v.iter_mut().zip(u).for_each(|(a, b)| *a -= proj * b);
        }
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-8 {
            v.iter_mut().for_each(|a| *a /= norm);
            frame.push(v);
        }
    }
    frame
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

fn assign_patterns<R: Rng>(spec: &WorldSpec, rng: &mut R) -> Result<Vec<Vec<u8>>> {
    let n_patterns = spec.n_identities.div_ceil(spec.identities_per_pattern);
    let c = spec.n_classes;
    let mut patterns = vec![vec![0u8; c]; n_patterns];
    if spec.single_label {
        let mut order: Vec<usize> = (0..c).collect();
        order.shuffle(rng);
        for (p, bits) in patterns.iter_mut().enumerate() {
            bits[order[p % c]] = 1;
        }
    } else {
        let prevalence: Vec<f64> = (0..c).map(|_| rng.gen_range(0.15..0.4)).collect();
        for bits in patterns.iter_mut() {
            for (b, q) in bits.iter_mut().zip(&prevalence) {
                *b = u8::from(rng.gen::<f64>() < *q);
            }
        }
    }

    let mut identities: Vec<usize> = (0..spec.n_identities).collect();
    identities.shuffle(rng);
    let mut pattern_of = vec![0usize; spec.n_identities];
    for (slot, &k) in identities.iter().enumerate() {
        pattern_of[k] = slot % n_patterns;
    }
    let mut members = vec![0usize; n_patterns];
    for &p in &pattern_of {
        members[p] += 1;
    }

    let needed = (MIN_CLASS_PREVALENCE * spec.n_identities as f64).ceil() as usize;
    for class in 0..c {
        let mut active: usize = (0..n_patterns)
            .filter(|&p| patterns[p][class] == 1)
            .map(|p| members[p])
            .sum();
        if active >= needed {
            continue;
        }
        if spec.single_label {
            return Err(Error::config(format!(
                "single-label world cannot give class {class} a 10% share with {n_patterns} patterns"
            )));
        }
        let mut inactive: Vec<usize> = (0..n_patterns).filter(|&p| patterns[p][class] == 0).collect();
        inactive.shuffle(rng);
        for p in inactive {
            if active >= needed {
                break;
            }
            patterns[p][class] = 1;
            active += members[p];
        }
    }

    Ok(pattern_of.into_iter().map(|p| patterns[p].clone()).collect())
}

/// Builds the mixture described by `spec`. Deterministic in `spec.seed`.
pub fn build_world(spec: &WorldSpec) -> Result<World> {
    spec.validate()?;
    let mut rng = seed::stream(spec.seed, "world", 0);
    let id_dim = spec.identity_dim();
    let radius = spec.radius();

    let frame = random_frame(&mut rng, id_dim);
    let mut identity_vectors: Vec<Vec<f64>> = Vec::with_capacity(spec.n_identities);
    for k in 0..spec.n_identities {
        let mut placed = false;
        for attempt in 0..MAX_PLACEMENT_ATTEMPTS {
            let dir = if k < id_dim && attempt == 0 {
                frame[k].clone()
            } else {
                let mut v = gaussian_vec(&mut rng, id_dim);
                let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
                v.iter_mut().for_each(|a| *a /= norm);
                v
            };
            let candidate: Vec<f64> = dir.iter().map(|a| a * radius).collect();
            if identity_vectors
                .iter()
                .all(|u| distance(u, &candidate) >= spec.identity_separation)
            {
                identity_vectors.push(candidate);
                placed = true;
                break;
            }
        }
        if !placed {
            return Err(Error::config(format!(
                "dimension {id_dim} with radius {radius} cannot realize separation {} for {} identities",
                spec.identity_separation, spec.n_identities
            )));
        }
    }

    let predicates = assign_patterns(spec, &mut rng)?;

    let mut shift_rng = seed::stream(spec.seed, "covariate_shift", 0);
    let shift: Vec<f64> = (0..spec.n_classes)
        .map(|_| spec.covariate_shift * shift_rng.sample::<f64, _>(StandardNormal))
        .collect();

    let mut means = Vec::with_capacity(spec.n_identities * spec.dim);
    for k in 0..spec.n_identities {
        for b in 0..spec.n_classes {
            let sign = if predicates[k][b] == 1 { 1.0 } else { -1.0 };
            means.push(sign * spec.predicate_offset + shift[b]);
        }
        means.extend_from_slice(&identity_vectors[k]);
    }

    let weights = vec![1.0 / spec.n_identities as f64; spec.n_identities];
    Ok(World {
        spec: spec.clone(),
        means,
        weights,
        predicates: predicates.concat(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}

impl FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::data(format!("unknown split `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Origin {
    Real,
    Synthetic,
}

impl fmt::Display for Origin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Origin::Real => "real",
            Origin::Synthetic => "synthetic",
        })
    }
}

impl FromStr for Origin {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(Origin::Real),
            "synthetic" => Ok(Origin::Synthetic),
            other => Err(Error::data(format!("unknown origin `{other}`"))),
        }
    }
}

/// One sample. Synthetic records carry no identity.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub record_id: u64,
    pub identity: Option<u32>,
    pub split: Split,
    pub labels: Vec<u8>,
    pub x: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub origin: Origin,
    pub dim: usize,
    pub n_classes: usize,
    pub records: Vec<Record>,
}

impl Dataset {
    pub fn new(origin: Origin, dim: usize, n_classes: usize, records: Vec<Record>) -> Result<Self> {
        let ds = Dataset {
            origin,
            dim,
            n_classes,
            records,
        };
        ds.validate()?;
        Ok(ds)
    }

    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.records {
            if !seen.insert(r.record_id) {
                return Err(Error::data(format!("duplicate record_id {}", r.record_id)));
            }
            if r.x.len() != self.dim || r.labels.len() != self.n_classes {
                return Err(Error::data(format!("record {} has the wrong shape", r.record_id)));
            }
            if r.x.iter().any(|v| !v.is_finite()) {
                return Err(Error::data(format!("record {} has a non-finite feature", r.record_id)));
            }
            if self.origin == Origin::Synthetic && r.identity.is_some() {
                return Err(Error::data(format!("synthetic record {} carries an identity", r.record_id)));
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Records of one split, in order.
    pub fn split(&self, split: Split) -> Dataset {
        Dataset {
            origin: self.origin,
            dim: self.dim,
            n_classes: self.n_classes,
            records: self.records.iter().filter(|r| r.split == split).cloned().collect(),
        }
    }

    pub fn identities(&self) -> BTreeSet<u32> {
        self.records.iter().filter_map(|r| r.identity).collect()
    }

    /// Count of each distinct label vector.
    pub fn label_histogram(&self) -> BTreeMap<Vec<u8>, usize> {
        let mut h = BTreeMap::new();
        for r in &self.records {
            *h.entry(r.labels.clone()).or_insert(0) += 1;
        }
        h
    }

    /// Concatenates datasets, renumbering records from zero.
    pub fn concat(parts: &[&Dataset]) -> Result<Dataset> {
        let first = parts.first().ok_or_else(|| Error::data("nothing to concatenate"))?;
        let mut records = Vec::new();
        for part in parts {
            if part.dim != first.dim || part.n_classes != first.n_classes {
                return Err(Error::data("datasets with different shapes cannot be combined"));
            }
            records.extend(part.records.iter().cloned());
        }
        let origin = if parts.iter().all(|p| p.origin == Origin::Real) {
            Origin::Real
        } else {
            Origin::Synthetic
        };
        for (i, r) in records.iter_mut().enumerate() {
            r.record_id = i as u64;
            if origin == Origin::Synthetic {
                r.identity = None;
            }
        }
        Dataset::new(origin, first.dim, first.n_classes, records)
    }

    pub fn features(&self) -> Vec<&[f64]> {
        self.records.iter().map(|r| r.x.as_slice()).collect()
    }
}

/// Draws `n` records: identity from the weights, then `x ~ N(mean, std² I)`.
pub fn sample_dataset(world: &World, n: usize, seed: u64) -> Result<Dataset> {
    if n == 0 {
        return Err(Error::config("cannot sample an empty dataset"));
    }
    let mut rng = seed::stream(seed, "sample_dataset", 0);
    let pick = WeightedIndex::new(world.weights())
        .map_err(|e| Error::config(format!("invalid mixture weights: {e}")))?;
    let std = world.cluster_std();
    let records = (0..n)
        .map(|i| {
            let k = pick.sample(&mut rng);
            let x = world
                .mean(k)
                .iter()
                .map(|m| m + std * rng.sample::<f64, _>(StandardNormal))
                .collect();
            Record {
                record_id: i as u64,
                identity: Some(k as u32),
                split: Split::Train,
                labels: world.predicates(k).to_vec(),
                x,
            }
        })
        .collect();
    Dataset::new(Origin::Real, world.dim(), world.n_classes(), records)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitOptions {
    pub train: f64,
    pub val: f64,
    pub test: f64,
    pub seed: u64,
    /// Split at record level, letting one identity land in several splits.
    pub allow_subject_overlap: bool,
}

impl Default for SplitOptions {
    fn default() -> Self {
        SplitOptions {
            train: 0.7,
            val: 0.1,
            test: 0.2,
            seed: 0,
            allow_subject_overlap: false,
        }
    }
}

fn split_counts(n: usize, opts: &SplitOptions) -> (usize, usize) {
    let n_train = (opts.train * n as f64).round() as usize;
    let n_val = ((opts.val * n as f64).round() as usize).min(n - n_train.min(n));
    (n_train.min(n), n_val)
}

/// Assigns split tags. By default whole identities go to one split.
pub fn split_dataset(ds: &Dataset, opts: &SplitOptions) -> Result<Dataset> {
    let fractions = [opts.train, opts.val, opts.test];
    if fractions.iter().any(|f| !(*f >= 0.0)) || (fractions.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::config("split fractions must be non-negative and sum to 1"));
    }
    let mut rng = seed::stream(opts.seed, "split", 0);
    let mut out = ds.clone();
    if opts.allow_subject_overlap {
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);
        let (n_train, n_val) = split_counts(ds.len(), opts);
        for (slot, &i) in order.iter().enumerate() {
            out.records[i].split = slot_split(slot, n_train, n_val);
        }
        return Ok(out);
    }

    if ds.records.iter().any(|r| r.identity.is_none()) {
        return Err(Error::data("subject-level split requires identities on every record"));
    }
    let mut ids: Vec<u32> = ds.identities().into_iter().collect();
    if ids.len() < 3 {
        return Err(Error::data(format!(
            "cannot stratify {} identities into three splits",
            ids.len()
        )));
    }
    ids.shuffle(&mut rng);
    let (n_train, n_val) = split_counts(ids.len(), opts);
    let assignment: BTreeMap<u32, Split> = ids
        .iter()
        .enumerate()
        .map(|(slot, &id)| (id, slot_split(slot, n_train, n_val)))
        .collect();
    for r in &mut out.records {
        r.split = assignment[&r.identity.expect("checked above")];
    }
    Ok(out)
}

fn slot_split(slot: usize, n_train: usize, n_val: usize) -> Split {
    if slot < n_train {
        Split::Train
    } else if slot < n_train + n_val {
        Split::Val
    } else {
        Split::Test
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> WorldSpec {
        WorldSpec {
            n_identities: 2,
            dim: 2,
            n_classes: 1,
            identity_separation: 10.0,
            identity_radius: None,
            condition_dim: 1,
            seed: 7,
            ..WorldSpec::default()
        }
    }

    #[test]
    fn two_identities_respect_separation() {
        let world = build_world(&small_spec()).unwrap();
        assert!(distance(world.mean(0), world.mean(1)) >= 10.0);
    }

    #[test]
    fn build_is_deterministic() {
        let spec = WorldSpec {
            n_identities: 50,
            ..WorldSpec::default()
        };
        assert_eq!(build_world(&spec).unwrap(), build_world(&spec).unwrap());
    }

    #[test]
    fn too_few_dimensions_is_a_config_error() {
        let spec = WorldSpec {
            n_identities: 4,
            n_classes: 8,
            dim: 4,
            condition_dim: 4,
            ..WorldSpec::default()
        };
        assert!(matches!(build_world(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn unrealizable_separation_is_a_config_error() {
        let spec = WorldSpec {
            n_identities: 50,
            identity_separation: 100.0,
            identity_radius: Some(1.0),
            ..WorldSpec::default()
        };
        assert!(matches!(build_world(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn default_world_invariants() {
        let world = build_world(&WorldSpec::default()).unwrap();
        let total: f64 = world.weights().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
        assert!(world.weights().iter().all(|w| *w > 0.0));
        let n = world.n_components();
        for class in 0..world.n_classes() {
            let active = (0..n).filter(|&k| world.predicates(k)[class] == 1).count();
            assert!(active as f64 >= 0.1 * n as f64, "class {class} active for {active}");
        }
        let sep = world.spec().identity_separation;
        for i in 0..n {
            for j in (i + 1)..n {
                assert!(distance(world.mean(i), world.mean(j)) >= sep);
            }
        }
    }

    #[test]
    fn single_label_world_has_one_bit_per_identity() {
        let spec = WorldSpec {
            n_identities: 80,
            single_label: true,
            ..WorldSpec::default()
        };
        let world = build_world(&spec).unwrap();
        for k in 0..world.n_components() {
            assert_eq!(world.predicates(k).iter().map(|&b| b as usize).sum::<usize>(), 1);
        }
    }

    #[test]
    fn zero_variance_single_weight_returns_mean() {
        let world = build_world(&small_spec())
            .unwrap()
            .with_cluster_std(0.0)
            .unwrap()
            .with_weights(vec![1.0, 0.0])
            .unwrap();
        let ds = sample_dataset(&world, 1, 3).unwrap();
        assert_eq!(ds.records[0].x, world.mean(0));
        assert_eq!(ds.records[0].labels, world.predicates(0));
    }

    #[test]
    fn sample_mean_concentrates() {
        let world = build_world(&small_spec())
            .unwrap()
            .with_weights(vec![1.0, 0.0])
            .unwrap();
        let ds = sample_dataset(&world, 10_000, 11).unwrap();
        for d in 0..world.dim() {
            let mean = ds.records.iter().map(|r| r.x[d]).sum::<f64>() / ds.len() as f64;
            assert!((mean - world.mean(0)[d]).abs() < 0.05);
        }
    }

    #[test]
    fn sampling_is_deterministic_and_label_consistent() {
        let world = build_world(&WorldSpec {
            n_identities: 30,
            ..WorldSpec::default()
        })
        .unwrap();
        let a = sample_dataset(&world, 200, 5).unwrap();
        assert_eq!(a, sample_dataset(&world, 200, 5).unwrap());
        for r in &a.records {
            assert_eq!(r.labels, world.predicates(r.identity.unwrap() as usize));
        }
    }

    fn blocky_dataset(n_ids: u32, per_id: usize) -> Dataset {
        let records = (0..n_ids as usize * per_id)
            .map(|i| Record {
                record_id: i as u64,
                identity: Some((i / per_id) as u32),
                split: Split::Train,
                labels: vec![0],
                x: vec![0.0],
            })
            .collect();
        Dataset::new(Origin::Real, 1, 1, records).unwrap()
    }

    #[test]
    fn subject_split_matches_fractions() {
        let ds = blocky_dataset(100, 10);
        let out = split_dataset(&ds, &SplitOptions::default()).unwrap();
        let ids = |s| out.split(s).identities().len();
        assert_eq!((ids(Split::Train), ids(Split::Val), ids(Split::Test)), (70, 10, 20));
        let train = out.split(Split::Train).identities();
        assert!(out.split(Split::Test).identities().is_disjoint(&train));
        assert!(out.split(Split::Val).identities().is_disjoint(&train));
    }

    #[test]
    fn all_train_split() {
        let ds = blocky_dataset(5, 2);
        let opts = SplitOptions {
            train: 1.0,
            val: 0.0,
            test: 0.0,
            ..SplitOptions::default()
        };
        let out = split_dataset(&ds, &opts).unwrap();
        assert!(out.records.iter().all(|r| r.split == Split::Train));
    }

    #[test]
    fn two_identities_cannot_stratify() {
        let ds = blocky_dataset(2, 5);
        assert!(matches!(split_dataset(&ds, &SplitOptions::default()), Err(Error::Data(_))));
    }

    #[test]
    fn config_round_trip() {
        let spec = WorldSpec::reference();
        let text = spec.to_config().to_string();
        let back = WorldSpec::from_config(&KvConfig::parse(&text).unwrap()).unwrap();
        assert_eq!(back, spec);
    }
}
