//! Re-identification filter and identity-linkage audit.
//!
//! `P(x, x′)` is a cosine threshold on identity embeddings: it reports a
//! violation (1) iff the similarity is strictly above `tau`. The threshold is
//! calibrated on labeled same/different-identity pairs; the recorded AUROC
//! comes from a disjoint held-out pair set.

use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::classifier::auroc;
use crate::features::{ExtractorSpec, IdentityExtractor};
use crate::io::AuditRow;
use crate::world::Dataset;
use crate::{seed, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThresholdObjective {
    /// Maximize TPR − FPR.
    Youden,
    /// Highest threshold whose false-negative rate stays within the budget.
    FalseNegativeBudget(f64),
}

impl fmt::Display for ThresholdObjective {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ThresholdObjective::Youden => f.write_str("youden"),
            ThresholdObjective::FalseNegativeBudget(b) => write!(f, "fnr:{b}"),
        }
    }
}

impl FromStr for ThresholdObjective {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        if s == "youden" {
            return Ok(ThresholdObjective::Youden);
        }
        if let Some(b) = s.strip_prefix("fnr:") {
            let budget: f64 = b
                .parse()
                .map_err(|_| Error::config(format!("bad false-negative budget `{b}`")))?;
            if !(0.0..=1.0).contains(&budget) {
                return Err(Error::config("false-negative budget must lie in [0, 1]"));
            }
            return Ok(ThresholdObjective::FalseNegativeBudget(budget));
        }
        Err(Error::config(format!("unknown threshold objective `{s}`")))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub objective: ThresholdObjective,
    /// AUROC of the similarity on held-out pairs.
    pub heldout_auroc: f64,
    /// Same-identity held-out pairs scored at or below `tau`.
    pub heldout_fnr: f64,
    pub n_fit: usize,
    pub n_heldout: usize,
}

#[derive(Debug, Clone)]
pub struct ReidFilter {
    extractor: IdentityExtractor,
    tau: Option<f64>,
    calibration: Option<Calibration>,
}

/// Two feature vectors and whether they share an identity.
#[derive(Debug, Clone, Copy)]
pub struct LabeledPair<'a> {
    pub a: &'a [f64],
    pub b: &'a [f64],
    pub same_identity: bool,
}

fn cosine(a: &[f64], b: &[f64]) -> (f64, bool) {
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return (0.0, true);
    }
    let c = a.iter().zip(b).map(|(p, q)| p * q).sum::<f64>() / (na * nb);
    (c.clamp(-1.0, 1.0), false)
}

impl ReidFilter {
    pub fn uncalibrated(extractor: IdentityExtractor) -> Self {
        ReidFilter {
            extractor,
            tau: None,
            calibration: None,
        }
    }

    pub fn with_threshold(extractor: IdentityExtractor, tau: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&tau) {
            return Err(Error::config("tau must lie in [-1, 1]"));
        }
        Ok(ReidFilter {
            extractor,
            tau: Some(tau),
            calibration: None,
        })
    }

    pub(crate) fn from_parts(extractor: IdentityExtractor, tau: f64, calibration: Option<Calibration>) -> Result<Self> {
        let mut f = Self::with_threshold(extractor, tau)?;
        f.calibration = calibration;
        Ok(f)
    }

    pub fn extractor(&self) -> &IdentityExtractor {
        &self.extractor
    }

    pub fn extractor_spec(&self) -> &ExtractorSpec {
        self.extractor.spec()
    }

    pub fn tau(&self) -> Option<f64> {
        self.tau
    }

    pub fn calibration(&self) -> Option<&Calibration> {
        self.calibration.as_ref()
    }

    /// Cosine similarity of identity embeddings; 0 when either is zero.
    pub fn score(&self, x: &[f64], x_prime: &[f64]) -> f64 {
        self.score_flagged(x, x_prime).0
    }

    /// Similarity plus a flag for a zero-norm embedding.
    pub fn score_flagged(&self, x: &[f64], x_prime: &[f64]) -> (f64, bool) {
        cosine(&self.extractor.embed(x), &self.extractor.embed(x_prime))
    }

    /// 1 when the pair looks like the same identity.
    pub fn predict(&self, x: &[f64], x_prime: &[f64]) -> Result<u8> {
        let tau = self.tau.ok_or(Error::Uncalibrated)?;
        Ok(u8::from(self.score(x, x_prime) > tau))
    }

    /// Whether `x_prime` is flagged against any of `protected`.
    pub fn flags_any(&self, protected: &[&[f64]], x_prime: &[f64]) -> Result<bool> {
        let embedded: Vec<Vec<f64>> = protected.iter().map(|p| self.extractor.embed(p)).collect();
        self.flags_embedded(&embedded, x_prime)
    }

    /// [`flags_any`](Self::flags_any) with the protected side already embedded.
    pub fn flags_embedded(&self, protected: &[Vec<f64>], x_prime: &[f64]) -> Result<bool> {
        let tau = self.tau.ok_or(Error::Uncalibrated)?;
        let e = self.extractor.embed(x_prime);
        Ok(protected.iter().any(|p| cosine(p, &e).0 > tau))
    }
}

pub fn reid_score(x: &[f64], x_prime: &[f64], filter: &ReidFilter) -> f64 {
    filter.score(x, x_prime)
}

pub fn reid_predict(x: &[f64], x_prime: &[f64], filter: &ReidFilter) -> Result<u8> {
    filter.predict(x, x_prime)
}

fn pair_scores(filter: &ReidFilter, pairs: &[LabeledPair]) -> (Vec<f64>, Vec<u8>) {
    pairs
        .iter()
        .map(|p| (filter.score(p.a, p.b), u8::from(p.same_identity)))
        .unzip()
}

/// Threshold for `scores` (positive iff score > tau) under `objective`.
fn choose_threshold(scores: &[f64], labels: &[u8], objective: ThresholdObjective) -> f64 {
    let n_pos = labels.iter().filter(|&&l| l == 1).count() as f64;
    let n_neg = labels.len() as f64 - n_pos;
    let mut distinct: Vec<f64> = scores.to_vec();
    distinct.sort_by(f64::total_cmp);
    distinct.dedup();
    let mut candidates = Vec::with_capacity(distinct.len() + 1);
    candidates.push(-1.0);
    candidates.extend(distinct.windows(2).map(|w| 0.5 * (w[0] + w[1])));
    candidates.push(1.0);

    let rates = |tau: f64| {
        let mut tp = 0.0;
        let mut fp = 0.0;
        for (s, l) in scores.iter().zip(labels) {
            if *s > tau {
                if *l == 1 {
                    tp += 1.0;
                } else {
                    fp += 1.0;
                }
            }
        }
        (tp / n_pos, fp / n_neg)
    };
    match objective {
        ThresholdObjective::Youden => {
            let mut best = (f64::NEG_INFINITY, candidates[0]);
            for &tau in &candidates {
                let (tpr, fpr) = rates(tau);
                if tpr - fpr > best.0 {
                    best = (tpr - fpr, tau);
                }
            }
            best.1
        }
        ThresholdObjective::FalseNegativeBudget(budget) => candidates
            .iter()
            .copied()
            .filter(|&tau| 1.0 - rates(tau).0 <= budget + 1e-12)
            .fold(-1.0, f64::max),
    }
}

/// Sets `tau` from `fit` pairs and records AUROC on `heldout` pairs.
pub fn calibrate_threshold(
    extractor: IdentityExtractor,
    fit: &[LabeledPair],
    heldout: &[LabeledPair],
    objective: ThresholdObjective,
) -> Result<ReidFilter> {
    let uncal = ReidFilter::uncalibrated(extractor);
    let (fs, fl) = pair_scores(&uncal, fit);
    let (hs, hl) = pair_scores(&uncal, heldout);
    for (name, labels) in [("fit", &fl), ("held-out", &hl)] {
        if !labels.contains(&1) || !labels.contains(&0) {
            return Err(Error::data(format!(
                "{name} pairs need both same- and different-identity examples"
            )));
        }
    }
    let tau = choose_threshold(&fs, &fl, objective);
    let heldout_auroc = auroc(&hs, &hl)?;
    let positives = hl.iter().filter(|&&l| l == 1).count() as f64;
    let misses = hs.iter().zip(&hl).filter(|(s, l)| **l == 1 && **s <= tau).count() as f64;
    ReidFilter::from_parts(
        uncal.extractor,
        tau,
        Some(Calibration {
            objective,
            heldout_auroc,
            heldout_fnr: misses / positives,
            n_fit: fit.len(),
            n_heldout: heldout.len(),
        }),
    )
}

/// Index pairs `(i, j, same_identity)` drawn from one dataset.
///
/// Every identity with at least two records contributes consecutive
/// same-identity pairs; an equal number of different-identity pairs is drawn
/// at random. No unordered pair repeats.
pub fn sample_pairs(ds: &Dataset, seed: u64) -> Result<Vec<(usize, usize, bool)>> {
    let mut by_identity: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in ds.records.iter().enumerate() {
        let id = r
            .identity
            .ok_or_else(|| Error::data("pair sampling needs identities"))?;
        by_identity.entry(id).or_default().push(i);
    }
    let mut pairs = Vec::new();
    let mut seen = HashSet::new();
    for members in by_identity.values() {
        for w in members.windows(2) {
            pairs.push((w[0], w[1], true));
            seen.insert((w[0], w[1]));
        }
    }
    let n_same = pairs.len();
    if n_same == 0 || by_identity.len() < 2 {
        return Err(Error::data("need repeated identities and at least two identities"));
    }
    let mut rng = seed::stream(seed, "reid_pairs", 0);
    let mut attempts = 0;
    let mut n_diff = 0;
    while n_diff < n_same && attempts < 100 * n_same {
        attempts += 1;
        let i = rng.gen_range(0..ds.len());
        let j = rng.gen_range(0..ds.len());
        let (a, b) = (i.min(j), i.max(j));
        if ds.records[a].identity != ds.records[b].identity && seen.insert((a, b)) {
            pairs.push((a, b, false));
            n_diff += 1;
        }
    }
    pairs.shuffle(&mut rng);
    Ok(pairs)
}

pub fn labeled_pairs<'a>(ds: &'a Dataset, idx: &[(usize, usize, bool)]) -> Vec<LabeledPair<'a>> {
    idx.iter()
        .map(|&(i, j, same)| LabeledPair {
            a: &ds.records[i].x,
            b: &ds.records[j].x,
            same_identity: same,
        })
        .collect()
}

/// Calibrates on pairs from `fit_ds` and scores held-out pairs from
/// `heldout_ds`. The two datasets should hold disjoint records.
pub fn calibrate_on_datasets(
    extractor: IdentityExtractor,
    fit_ds: &Dataset,
    heldout_ds: &Dataset,
    objective: ThresholdObjective,
    seed: u64,
) -> Result<ReidFilter> {
    let fit_idx = sample_pairs(fit_ds, seed::derive(seed, "fit", 0))?;
    let held_idx = sample_pairs(heldout_ds, seed::derive(seed, "heldout", 0))?;
    calibrate_threshold(
        extractor,
        &labeled_pairs(fit_ds, &fit_idx),
        &labeled_pairs(heldout_ds, &held_idx),
        objective,
    )
}

/// A released vector and the identity it was derived from.
#[derive(Debug, Clone)]
pub struct AttackTarget<'a> {
    pub x: &'a [f64],
    pub true_identity: u32,
}

/// Targets for auditing a real dataset against itself.
pub fn targets_from_real(real: &Dataset) -> Result<Vec<AttackTarget<'_>>> {
    real.records
        .iter()
        .map(|r| {
            Ok(AttackTarget {
                x: &r.x,
                true_identity: r
                    .identity
                    .ok_or_else(|| Error::data("real record without identity"))?,
            })
        })
        .collect()
}

/// Targets for a released dataset, with source identities recovered from the
/// audit sidecar and the real dataset it was generated from.
pub fn targets_from_release<'a>(
    released: &'a Dataset,
    sidecar: &[AuditRow],
    real: &Dataset,
) -> Result<Vec<AttackTarget<'a>>> {
    let source_identity: BTreeMap<u64, u32> = real
        .records
        .iter()
        .filter_map(|r| r.identity.map(|id| (r.record_id, id)))
        .collect();
    let by_release: BTreeMap<u64, u64> = sidecar
        .iter()
        .map(|row| (row.record_id, row.source_record_id))
        .collect();
    released
        .records
        .iter()
        .map(|r| {
            let src = by_release
                .get(&r.record_id)
                .ok_or_else(|| Error::data(format!("record {} missing from sidecar", r.record_id)))?;
            let id = source_identity
                .get(src)
                .ok_or_else(|| Error::data(format!("source record {src} not in the real dataset")))?;
            Ok(AttackTarget {
                x: &r.x,
                true_identity: *id,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Verdict {
    Pass,
    Fail,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackReport {
    pub n_released: usize,
    pub n_linked_correctly: usize,
    pub accuracy: f64,
    pub chance: f64,
    /// `chance + 3·sqrt(chance·(1 − chance)/n)`.
    pub threshold: f64,
    pub verdict: Verdict,
    /// Held-out false-negative rate of the filter, when one was supplied.
    pub filter_false_negative_rate: Option<f64>,
}

/// Links every target to the identity of its most similar real record.
pub fn identity_attack(
    targets: &[AttackTarget],
    real: &Dataset,
    extractor: &IdentityExtractor,
    n_identities: usize,
    filter: Option<&ReidFilter>,
) -> Result<AttackReport> {
    if targets.is_empty() {
        return Err(Error::data("nothing released to audit"));
    }
    if real.is_empty() || n_identities == 0 {
        return Err(Error::data("audit needs a non-empty real dataset"));
    }
    let reference: Vec<(Vec<f64>, u32)> = real
        .records
        .iter()
        .map(|r| {
            Ok((
                extractor.embed(&r.x),
                r.identity.ok_or_else(|| Error::data("real record without identity"))?,
            ))
        })
        .collect::<Result<_>>()?;
    let mut correct = 0;
    for t in targets {
        let e = extractor.embed(t.x);
        let mut best = (f64::NEG_INFINITY, u32::MAX);
        for (emb, id) in &reference {
            let s = cosine(emb, &e).0;
            if s > best.0 {
                best = (s, *id);
            }
        }
        if best.1 == t.true_identity {
            correct += 1;
        }
    }
    let n = targets.len();
    let chance = 1.0 / n_identities as f64;
    let threshold = chance + 3.0 * (chance * (1.0 - chance) / n as f64).sqrt();
    let accuracy = correct as f64 / n as f64;
    Ok(AttackReport {
        n_released: n,
        n_linked_correctly: correct,
        accuracy,
        chance,
        threshold,
        verdict: if accuracy <= threshold { Verdict::Pass } else { Verdict::Fail },
        filter_false_negative_rate: filter.and_then(|f| f.calibration()).map(|c| c.heldout_fnr),
    })
}
