//! Dataset-level evaluation: Fréchet distance, retrieval score, downstream
//! gap and report assembly.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::classifier::{macro_auroc, train_multilabel, Classifier, TrainHyper, TrainedOn};
use crate::features::{IdentityExtractor, PseudoConditionExtractor};
use crate::io::AuditRow;
use crate::privacy::{identity_attack, targets_from_release, AttackReport, ReidFilter};
use crate::world::{Dataset, Split};
use crate::{Error, Result};

/// Eigenvalues of a covariance below zero but above this are clipped.
const PSD_CLIP: f64 = -1e-8;
/// Eigenvalues below this make a matrix unusable for the square root.
const PSD_FAIL: f64 = -1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaussianMoments {
    pub mu: Vec<f64>,
    /// Row-major `m × m`.
    pub sigma: Vec<f64>,
    pub n: usize,
}

impl GaussianMoments {
    pub fn dim(&self) -> usize {
        self.mu.len()
    }

    fn sigma_matrix(&self) -> DMatrix<f64> {
        let m = self.dim();
        DMatrix::from_row_slice(m, m, &self.sigma)
    }
}

/// Sample mean and unbiased covariance.
pub fn gaussian_moments<V: AsRef<[f64]>>(vectors: &[V]) -> Result<GaussianMoments> {
    let n = vectors.len();
    if n < 2 {
        return Err(Error::Evaluation("moments need at least two vectors".into()));
    }
    let m = vectors[0].as_ref().len();
    if vectors.iter().any(|v| v.as_ref().len() != m) {
        return Err(Error::Evaluation("vectors have different lengths".into()));
    }
    let mut mu = vec![0.0; m];
    for v in vectors {
        for (a, b) in mu.iter_mut().zip(v.as_ref()) {
            *a += b;
        }
    }
    mu.iter_mut().for_each(|a| *a /= n as f64);
    let mut sigma = vec![0.0; m * m];
    let mut d = vec![0.0; m];
    for v in vectors {
        for ((di, vi), mi) in d.iter_mut().zip(v.as_ref()).zip(&mu) {
            *di = vi - mi;
        }
        for i in 0..m {
            for j in i..m {
                sigma[i * m + j] += d[i] * d[j];
            }
        }
    }
    let denom = (n - 1) as f64;
    for i in 0..m {
        for j in i..m {
            let v = sigma[i * m + j] / denom;
            sigma[i * m + j] = v;
            sigma[j * m + i] = v;
        }
    }
    Ok(GaussianMoments { mu, sigma, n })
}

fn psd_eigen(m: DMatrix<f64>, what: &str) -> Result<SymmetricEigen<f64, nalgebra::Dyn>> {
    let mut e = SymmetricEigen::new(m);
    for l in e.eigenvalues.iter_mut() {
        if *l < PSD_FAIL {
            return Err(Error::Evaluation(format!("{what} is not positive semi-definite (eigenvalue {l:e})")));
        }
        if *l < 0.0 {
            *l = 0.0;
        }
    }
    Ok(e)
}

fn sym_sqrt(m: DMatrix<f64>) -> Result<DMatrix<f64>> {
    let e = psd_eigen(m, "covariance")?;
    let d = DMatrix::from_diagonal(&e.eigenvalues.map(f64::sqrt));
    Ok(&e.eigenvectors * d * e.eigenvectors.transpose())
}

/// `‖μ₁ − μ₂‖² + tr(Σ₁ + Σ₂ − 2(Σ₁Σ₂)^½)`.
///
/// The trace of the square root is taken from the eigenvalues of the
/// symmetric matrix `Σ₁^½ Σ₂ Σ₁^½`, which shares them with `Σ₁Σ₂`.
pub fn frechet_distance(a: &GaussianMoments, b: &GaussianMoments) -> Result<f64> {
    if a.dim() != b.dim() || a.sigma.len() != b.sigma.len() {
        return Err(Error::Evaluation("moment shapes differ".into()));
    }
    let mean_term: f64 = a.mu.iter().zip(&b.mu).map(|(x, y)| (x - y) * (x - y)).sum();
    let s1 = a.sigma_matrix();
    let s2 = b.sigma_matrix();
    let root1 = sym_sqrt(s1.clone())?;
    let mut inner = &root1 * &s2 * &root1;
    inner = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = psd_eigen(inner, "covariance product")?
        .eigenvalues
        .iter()
        .map(|l| l.sqrt())
        .sum();
    let d = mean_term + s1.trace() + s2.trace() - 2.0 * tr_sqrt;
    Ok(d.max(0.0))
}

/// Symmetrizes a covariance in place and clips tiny negative eigenvalues.
pub fn clip_covariance(sigma: &mut [f64], m: usize) -> Result<()> {
    let mat = DMatrix::from_row_slice(m, m, sigma);
    let sym = (&mat + mat.transpose()) * 0.5;
    let mut e = SymmetricEigen::new(sym);
    if e.eigenvalues.iter().any(|&l| l < PSD_CLIP) {
        return Err(Error::Evaluation("covariance has a negative eigenvalue".into()));
    }
    e.eigenvalues.iter_mut().for_each(|l| *l = l.max(0.0));
    let fixed = e.recompose();
    for i in 0..m {
        for j in 0..m {
            sigma[i * m + j] = fixed[(i, j)];
        }
    }
    Ok(())
}

/// Expected distinct count when `big_n` draws land uniformly on `n` items.
pub fn irs_normalizer(n: usize, big_n: usize) -> f64 {
    let n = n as f64;
    -n * (big_n as f64 * (-1.0 / n).ln_1p()).exp_m1()
}

fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Index of the nearest row of `pool`, lowest index on ties.
pub fn nearest<V: AsRef<[f64]>>(pool: &[V], q: &[f64]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (i, p) in pool.iter().enumerate() {
        let d = sq_dist(p.as_ref(), q);
        if d < best.0 {
            best = (d, i);
        }
    }
    best.1
}

/// Distinct real records retrieved as a synthetic record's nearest
/// neighbour, divided by [`irs_normalizer`].
pub fn irs<R: AsRef<[f64]>, S: AsRef<[f64]>>(real: &[R], synth: &[S]) -> Result<f64> {
    if real.is_empty() || synth.is_empty() {
        return Err(Error::Evaluation("retrieval needs non-empty sets".into()));
    }
    let m = real[0].as_ref().len();
    if real.iter().any(|r| r.as_ref().len() != m) || synth.iter().any(|s| s.as_ref().len() != m) {
        return Err(Error::Evaluation("embedding dimensions differ".into()));
    }
    let mut hit = vec![false; real.len()];
    for s in synth {
        hit[nearest(real, s.as_ref())] = true;
    }
    let k = hit.iter().filter(|&&h| h).count() as f64;
    Ok(k / irs_normalizer(real.len(), synth.len()))
}

/// Which embedding FID and IRS are computed on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Embedding {
    #[default]
    PseudoCondition,
    Identity,
    Raw,
}

impl std::fmt::Display for Embedding {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Embedding::PseudoCondition => "pseudo_condition",
            Embedding::Identity => "identity",
            Embedding::Raw => "raw",
        })
    }
}

impl std::str::FromStr for Embedding {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "pseudo_condition" | "pseudo-condition" => Ok(Embedding::PseudoCondition),
            "identity" => Ok(Embedding::Identity),
            "raw" => Ok(Embedding::Raw),
            other => Err(Error::config(format!("unknown embedding `{other}`"))),
        }
    }
}

/// Embeds every record of `ds`.
pub fn embed(ds: &Dataset, embedding: Embedding, world: &crate::world::WorldSpec) -> Result<Vec<Vec<f64>>> {
    Ok(match embedding {
        Embedding::PseudoCondition => {
            let ex = PseudoConditionExtractor::for_world(world)?;
            ds.records.iter().map(|r| ex.extract(&r.x).values).collect()
        }
        Embedding::Identity => {
            let ex = IdentityExtractor::for_world(world)?;
            ds.records.iter().map(|r| ex.embed(&r.x)).collect()
        }
        Embedding::Raw => ds.records.iter().map(|r| r.x.clone()).collect(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Gap {
    pub auroc_real: f64,
    pub auroc_synth: f64,
    /// `auroc_synth − auroc_real`.
    pub gap: f64,
}

/// Scores an existing real-trained classifier against one trained on
/// `synth_train`, both on `real_test`.
pub fn gap_against(
    clf_real: &Classifier,
    synth_train: &Dataset,
    real_val: &Dataset,
    real_test: &Dataset,
    hyper: &TrainHyper,
) -> Result<(Gap, Classifier)> {
    let clf_synth = train_multilabel(synth_train, real_val, hyper, TrainedOn::Synthetic)?;
    let auroc_real = macro_auroc(clf_real, real_test)?.macro_auroc;
    let auroc_synth = macro_auroc(&clf_synth, real_test)?.macro_auroc;
    Ok((
        Gap {
            auroc_real,
            auroc_synth,
            gap: auroc_synth - auroc_real,
        },
        clf_synth,
    ))
}

/// Trains on real and on synthetic data with the same hyperparameters and
/// compares macro AUROC on the real test set.
pub fn real_synth_gap(
    real_train: &Dataset,
    synth_train: &Dataset,
    real_val: &Dataset,
    real_test: &Dataset,
    hyper: &TrainHyper,
) -> Result<Gap> {
    let clf_real = train_multilabel(real_train, real_val, hyper, TrainedOn::Real)?;
    Ok(gap_against(&clf_real, synth_train, real_val, real_test, hyper)?.0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub fid: f64,
    pub irs: f64,
    pub auroc_real: f64,
    pub auroc_synth: f64,
    pub gap: f64,
    pub privacy: Option<AttackReport>,
    /// Real training records without a released counterpart.
    pub drops: usize,
    pub n_real: usize,
    pub n_synth: usize,
}

impl EvalReport {
    pub const CSV_HEADER: &'static str =
        "label,fid,irs,auroc_real,auroc_synth,gap,privacy_accuracy,privacy_verdict,drops,n_real,n_synth";

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn csv_row(&self, label: &str) -> String {
        let (acc, verdict) = match &self.privacy {
            Some(p) => (format!("{:.6}", p.accuracy), format!("{:?}", p.verdict).to_uppercase()),
            None => (String::new(), String::new()),
        };
        format!(
            "{label},{:.6},{:.6},{:.6},{:.6},{:.6},{acc},{verdict},{},{},{}",
            self.fid, self.irs, self.auroc_real, self.auroc_synth, self.gap, self.drops, self.n_real, self.n_synth
        )
    }
}

/// Everything [`evaluate`] needs besides the two datasets.
pub struct EvalContext<'a> {
    pub world: &'a crate::world::WorldSpec,
    pub hyper: TrainHyper,
    pub embedding: Embedding,
    /// A real-trained classifier to reuse; trained on the fly when absent.
    pub clf_real: Option<&'a Classifier>,
    /// Sidecar of the release; enables the linkage audit.
    pub audit: Option<&'a [AuditRow]>,
    pub filter: Option<&'a ReidFilter>,
}

/// Full report for a release generated from `real`'s training split.
pub fn evaluate(real: &Dataset, synth: &Dataset, ctx: &EvalContext) -> Result<EvalReport> {
    if real.n_classes != synth.n_classes || real.dim != synth.dim {
        return Err(Error::Evaluation("real and synthetic schemas differ".into()));
    }
    let train = real.split(Split::Train);
    let val = real.split(Split::Val);
    let test = real.split(Split::Test);
    if train.is_empty() || val.is_empty() || test.is_empty() {
        return Err(Error::Evaluation("real dataset needs train, val and test records".into()));
    }
    let er = embed(&train, ctx.embedding, ctx.world)?;
    let es = embed(synth, ctx.embedding, ctx.world)?;
    let fid = frechet_distance(&gaussian_moments(&er)?, &gaussian_moments(&es)?)?;
    let irs = irs(&er, &es)?;
    let trained;
    let clf_real = match ctx.clf_real {
        Some(c) => c,
        None => {
            trained = train_multilabel(&train, &val, &ctx.hyper, TrainedOn::Real)?;
            &trained
        }
    };
    let (gap, _) = gap_against(clf_real, synth, &val, &test, &ctx.hyper)?;
    let privacy = match ctx.audit {
        Some(rows) => {
            let targets = targets_from_release(synth, rows, &train)?;
            let ex = IdentityExtractor::for_world(ctx.world)?;
            Some(identity_attack(&targets, &train, &ex, train.identities().len(), ctx.filter)?)
        }
        None => None,
    };
    Ok(EvalReport {
        fid,
        irs,
        auroc_real: gap.auroc_real,
        auroc_synth: gap.auroc_synth,
        gap: gap.gap,
        privacy,
        drops: train.len().saturating_sub(synth.len()),
        n_real: train.len(),
        n_synth: synth.len(),
    })
}

/// Mean rank of each method over folds; rank 1 is the highest score and
/// ties share their average rank.
pub fn mean_ranks(scores: &[Vec<f64>]) -> Result<Vec<f64>> {
    let n_methods = scores.len();
    let n_folds = scores.first().map_or(0, Vec::len);
    if n_methods == 0 || n_folds == 0 || scores.iter().any(|s| s.len() != n_folds) {
        return Err(Error::Evaluation("rank table needs a full methods × folds grid".into()));
    }
    let mut total = vec![0.0; n_methods];
    for f in 0..n_folds {
        for (i, t) in total.iter_mut().enumerate() {
            let v = scores[i][f];
            let better = scores.iter().filter(|s| s[f] > v).count() as f64;
            let equal = scores.iter().filter(|s| s[f] == v).count() as f64;
            *t += better + (equal + 1.0) / 2.0;
        }
    }
    Ok(total.into_iter().map(|t| t / n_folds as f64).collect())
}

/// `mu + L z`: a draw from N(mu, L Lᵀ) when `z` is standard normal.
pub fn affine(mu: &[f64], l: &DMatrix<f64>, z: &[f64]) -> Vec<f64> {
    (DVector::from_column_slice(mu) + l * DVector::from_column_slice(z))
        .iter()
        .copied()
        .collect()
}
