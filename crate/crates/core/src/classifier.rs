//! Multi-label linear classifier with sigmoid outputs.
//!
//! Training is full-batch gradient descent on mean binary cross-entropy with a
//! cosine-annealed learning rate. Features are standardized internally and
//! the standardization is folded back into the exported weights, so
//! `predict_proba(x) = sigmoid(W x + b)` on raw features.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::world::{Dataset, Origin};
use crate::{seed, Error, Result};

/// Probability clamp used by [`bce`].
pub const PROB_EPS: f64 = 1e-7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainedOn {
    Real,
    Synthetic,
    Combined,
}

impl fmt::Display for TrainedOn {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrainedOn::Real => "real",
            TrainedOn::Synthetic => "synthetic",
            TrainedOn::Combined => "combined",
        })
    }
}

impl FromStr for TrainedOn {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "real" => Ok(TrainedOn::Real),
            "synthetic" => Ok(TrainedOn::Synthetic),
            "combined" => Ok(TrainedOn::Combined),
            other => Err(Error::config(format!("unknown training source `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainMeta {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
    /// Epoch of the returned checkpoint; 0 is the initialization.
    pub best_epoch: usize,
    /// Classes with a single label value in the training set.
    pub degenerate_classes: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Classifier {
    n_classes: usize,
    dim: usize,
    weights: Vec<f64>,
    bias: Vec<f64>,
    pub trained_on: TrainedOn,
    pub meta: TrainMeta,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^z)` without overflow.
fn softplus(z: f64) -> f64 {
    if z > 0.0 {
        z + (-z).exp().ln_1p()
    } else {
        z.exp().ln_1p()
    }
}

impl Classifier {
    /// All-zero parameters: every probability is 0.5.
    pub fn zeros(n_classes: usize, dim: usize) -> Self {
        Classifier {
            n_classes,
            dim,
            weights: vec![0.0; n_classes * dim],
            bias: vec![0.0; n_classes],
            trained_on: TrainedOn::Real,
            meta: TrainMeta {
                epochs: 0,
                learning_rate: 0.0,
                seed: 0,
                best_epoch: 0,
                degenerate_classes: Vec::new(),
            },
        }
    }

    pub fn from_parts(
        n_classes: usize,
        dim: usize,
        weights: Vec<f64>,
        bias: Vec<f64>,
        trained_on: TrainedOn,
        meta: TrainMeta,
    ) -> Result<Self> {
        if weights.len() != n_classes * dim || bias.len() != n_classes {
            return Err(Error::data("classifier parameters have the wrong shape"));
        }
        if weights.iter().chain(&bias).any(|v| !v.is_finite()) {
            return Err(Error::data("classifier parameters must be finite"));
        }
        Ok(Classifier {
            n_classes,
            dim,
            weights,
            bias,
            trained_on,
            meta,
        })
    }

    pub fn n_classes(&self) -> usize {
        self.n_classes
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn weight_row(&self, class: usize) -> &[f64] {
        &self.weights[class * self.dim..(class + 1) * self.dim]
    }

    pub fn bias(&self) -> &[f64] {
        &self.bias
    }

    pub fn logits(&self, x: &[f64]) -> Vec<f64> {
        self.weights
            .chunks_exact(self.dim)
            .zip(&self.bias)
            .map(|(row, b)| b + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>())
            .collect()
    }

    pub fn predict_proba(&self, x: &[f64]) -> Vec<f64> {
        self.logits(x).into_iter().map(sigmoid).collect()
    }
}

pub fn predict_proba(clf: &Classifier, x: &[f64]) -> Vec<f64> {
    clf.predict_proba(x)
}

/// Cross-entropy of predictions `q` against targets `p`, summed over classes.
pub fn bce(p: &[f64], q: &[f64]) -> f64 {
    p.iter()
        .zip(q)
        .map(|(&pj, &qj)| {
            let qj = qj.clamp(PROB_EPS, 1.0 - PROB_EPS);
            -(pj * qj.ln() + (1.0 - pj) * (1.0 - qj).ln())
        })
        .sum()
}

/// Mean over records and classes of the logistic loss, from logits.
///
/// `xs` is row-major `n × dim`, `ys` row-major `n × n_classes`.
pub fn mean_bce_loss(weights: &[f64], bias: &[f64], xs: &[f64], ys: &[u8], dim: usize) -> f64 {
    let c = bias.len();
    let n = xs.len() / dim;
    let mut total = 0.0;
    for (x, y) in xs.chunks_exact(dim).zip(ys.chunks_exact(c)) {
        for j in 0..c {
            let z = bias[j] + weights[j * dim..(j + 1) * dim].iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            // -[y ln σ(z) + (1-y) ln(1-σ(z))] = softplus(z) - y z
            total += softplus(z) - f64::from(y[j]) * z;
        }
    }
    total / (n * c) as f64
}

/// Gradient of [`mean_bce_loss`] with respect to weights and bias.
pub fn mean_bce_grad(weights: &[f64], bias: &[f64], xs: &[f64], ys: &[u8], dim: usize) -> (Vec<f64>, Vec<f64>) {
    let c = bias.len();
    let n = xs.len() / dim;
    let scale = 1.0 / (n * c) as f64;
    let mut gw = vec![0.0; weights.len()];
    let mut gb = vec![0.0; c];
    for (x, y) in xs.chunks_exact(dim).zip(ys.chunks_exact(c)) {
        for j in 0..c {
            let row = &weights[j * dim..(j + 1) * dim];
            let z = bias[j] + row.iter().zip(x).map(|(w, v)| w * v).sum::<f64>();
            let r = (sigmoid(z) - f64::from(y[j])) * scale;
            gb[j] += r;
            for (g, v) in gw[j * dim..(j + 1) * dim].iter_mut().zip(x) {
                *g += r * v;
            }
        }
    }
    (gw, gb)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainHyper {
    pub epochs: usize,
    pub learning_rate: f64,
    pub seed: u64,
}

impl Default for TrainHyper {
    fn default() -> Self {
        TrainHyper {
            epochs: 100,
            learning_rate: 2.0,
            seed: 0,
        }
    }
}

struct Standardizer {
    mean: Vec<f64>,
    scale: Vec<f64>,
}

impl Standardizer {
    fn fit(ds: &Dataset) -> Self {
        let d = ds.dim;
        let n = ds.len() as f64;
        let mut mean = vec![0.0; d];
        for r in &ds.records {
            mean.iter_mut().zip(&r.x).for_each(|(m, v)| *m += v / n);
        }
        let mut var = vec![0.0; d];
        for r in &ds.records {
            var.iter_mut()
                .zip(&r.x)
                .zip(&mean)
                .for_each(|((s, v), m)| *s += (v - m) * (v - m) / n);
        }
        let scale = var
            .into_iter()
            .map(|v| if v > 1e-24 { v.sqrt() } else { 1.0 })
            .collect();
        Standardizer { mean, scale }
    }

    fn transform(&self, ds: &Dataset) -> (Vec<f64>, Vec<u8>) {
        let mut xs = Vec::with_capacity(ds.len() * ds.dim);
        let mut ys = Vec::with_capacity(ds.len() * ds.n_classes);
        for r in &ds.records {
            xs.extend(r.x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s));
            ys.extend_from_slice(&r.labels);
        }
        (xs, ys)
    }

    /// Maps standardized-space parameters back to raw features.
    fn fold(&self, weights: &[f64], bias: &[f64]) -> (Vec<f64>, Vec<f64>) {
        let d = self.mean.len();
        let mut w = weights.to_vec();
        let mut b = bias.to_vec();
        for j in 0..bias.len() {
            for i in 0..d {
                w[j * d + i] = weights[j * d + i] / self.scale[i];
                b[j] -= weights[j * d + i] * self.mean[i] / self.scale[i];
            }
        }
        (w, b)
    }
}

/// Trains on `train`, returning the checkpoint with the lowest loss on `val`.
pub fn train_multilabel(train: &Dataset, val: &Dataset, hyper: &TrainHyper, trained_on: TrainedOn) -> Result<Classifier> {
    fit(train, val, hyper, trained_on).map(|(best, _)| best)
}

/// Selected checkpoint and final-epoch parameters.
fn fit(train: &Dataset, val: &Dataset, hyper: &TrainHyper, trained_on: TrainedOn) -> Result<(Classifier, Classifier)> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::data("training and validation sets must be non-empty"));
    }
    if train.dim != val.dim || train.n_classes != val.n_classes {
        return Err(Error::data("training and validation shapes differ"));
    }
    if !(hyper.learning_rate > 0.0) {
        return Err(Error::config("learning rate must be positive"));
    }
    let (d, c) = (train.dim, train.n_classes);
    let std = Standardizer::fit(train);
    let (xs, ys) = std.transform(train);
    let (vx, vy) = std.transform(val);

    let mut weights = vec![0.0; c * d];
    let mut bias = vec![0.0; c];
    let mut degenerate = Vec::new();
    for j in 0..c {
        let positives = train.records.iter().filter(|r| r.labels[j] == 1).count();
        if positives == 0 || positives == train.len() {
            let prior = (positives as f64 / train.len() as f64).clamp(PROB_EPS, 1.0 - PROB_EPS);
            bias[j] = (prior / (1.0 - prior)).ln();
            degenerate.push(j);
        }
    }

    let mut best = (mean_bce_loss(&weights, &bias, &vx, &vy, d), 0usize, weights.clone(), bias.clone());
    for epoch in 0..hyper.epochs {
        let lr = hyper.learning_rate * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / hyper.epochs as f64).cos());
        let (gw, gb) = mean_bce_grad(&weights, &bias, &xs, &ys, d);
        for j in 0..c {
            if degenerate.contains(&j) {
                continue;
            }
            // The loss averages over classes; rescale so each class sees its own mean gradient.
            let s = lr * c as f64;
            bias[j] -= s * gb[j];
            for i in 0..d {
                weights[j * d + i] -= s * gw[j * d + i];
            }
        }
        let loss = mean_bce_loss(&weights, &bias, &vx, &vy, d);
        if loss < best.0 {
            best = (loss, epoch + 1, weights.clone(), bias.clone());
        }
    }

    let export = |w: &[f64], b: &[f64], epoch: usize| {
        let (w, b) = std.fold(w, b);
        Classifier::from_parts(
            c,
            d,
            w,
            b,
            trained_on,
            TrainMeta {
                epochs: hyper.epochs,
                learning_rate: hyper.learning_rate,
                seed: hyper.seed,
                best_epoch: epoch,
                degenerate_classes: degenerate.clone(),
            },
        )
    };
    Ok((export(&best.2, &best.3, best.1)?, export(&weights, &bias, hyper.epochs)?))
}

/// Mann–Whitney AUROC; ties count one half.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::Evaluation("scores and labels differ in length".into()));
    }
    let n_pos = labels.iter().filter(|&&l| l == 1).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::Evaluation("AUROC needs both positive and negative labels".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Sum of average ranks of the positives.
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + j) as f64 / 2.0 + 1.0;
        let pos_in_group = order[i..=j].iter().filter(|&&k| labels[k] == 1).count();
        rank_sum += avg_rank * pos_in_group as f64;
        i = j + 1;
    }
    let u = rank_sum - (n_pos * (n_pos + 1)) as f64 / 2.0;
    Ok(u / (n_pos as f64 * n_neg as f64))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MacroAuroc {
    pub macro_auroc: f64,
    /// `None` for classes lacking positives or negatives.
    pub per_class: Vec<Option<f64>>,
    pub skipped: Vec<usize>,
}

/// Per-class AUROC of `clf` on `ds`, averaged over classes with both labels.
pub fn macro_auroc(clf: &Classifier, ds: &Dataset) -> Result<MacroAuroc> {
    let probs: Vec<Vec<f64>> = ds.records.iter().map(|r| clf.predict_proba(&r.x)).collect();
    let mut per_class = Vec::with_capacity(ds.n_classes);
    let mut skipped = Vec::new();
    for j in 0..ds.n_classes {
        let scores: Vec<f64> = probs.iter().map(|p| p[j]).collect();
        let labels: Vec<u8> = ds.records.iter().map(|r| r.labels[j]).collect();
        match auroc(&scores, &labels) {
            Ok(a) => per_class.push(Some(a)),
            Err(_) => {
                per_class.push(None);
                skipped.push(j);
            }
        }
    }
    let valid: Vec<f64> = per_class.iter().flatten().copied().collect();
    if valid.is_empty() {
        return Err(Error::Evaluation("no class has both positive and negative labels".into()));
    }
    Ok(MacroAuroc {
        macro_auroc: valid.iter().sum::<f64>() / valid.len() as f64,
        per_class,
        skipped,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrossValOptions {
    pub folds: usize,
    pub seed: u64,
    /// Assign records to folds individually instead of by identity.
    pub allow_subject_overlap: bool,
}

impl Default for CrossValOptions {
    fn default() -> Self {
        CrossValOptions {
            folds: 10,
            seed: 0,
            allow_subject_overlap: false,
        }
    }
}

/// Macro AUROC of each of `k` train/test rotations.
///
/// Checkpoint selection inside each rotation uses the training folds, since
/// cross-validation has no separate validation set.
pub fn crossval_auroc(ds: &Dataset, hyper: &TrainHyper, opts: &CrossValOptions) -> Result<Vec<f64>> {
    let k = opts.folds;
    if k < 2 {
        return Err(Error::config("cross-validation needs at least two folds"));
    }
    let mut rng = seed::stream(opts.seed, "crossval", 0);
    let by_identity = !opts.allow_subject_overlap && ds.origin == Origin::Real;
    let fold_of: Vec<usize> = if by_identity {
        if ds.records.iter().any(|r| r.identity.is_none()) {
            return Err(Error::data("identity-stratified folds need identities"));
        }
        let mut ids: Vec<u32> = ds.identities().into_iter().collect();
        if ids.len() < k {
            return Err(Error::data(format!("{} identities cannot fill {k} folds", ids.len())));
        }
        ids.shuffle(&mut rng);
        let fold: std::collections::BTreeMap<u32, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i % k)).collect();
        ds.records.iter().map(|r| fold[&r.identity.unwrap()]).collect()
    } else {
        if ds.len() < k {
            return Err(Error::data(format!("{} records cannot fill {k} folds", ds.len())));
        }
        let mut order: Vec<usize> = (0..ds.len()).collect();
        order.shuffle(&mut rng);
        let mut fold = vec![0; ds.len()];
        for (slot, &i) in order.iter().enumerate() {
            fold[i] = slot % k;
        }
        fold
    };

    let trained_on = match ds.origin {
        Origin::Real => TrainedOn::Real,
        Origin::Synthetic => TrainedOn::Synthetic,
    };
    (0..k)
        .map(|f| {
            let pick = |test: bool| Dataset {
                origin: ds.origin,
                dim: ds.dim,
                n_classes: ds.n_classes,
                records: ds
                    .records
                    .iter()
                    .zip(&fold_of)
                    .filter(|(_, &g)| (g == f) == test)
                    .map(|(r, _)| r.clone())
                    .collect(),
            };
            let (train, test) = (pick(false), pick(true));
            let clf = train_multilabel(&train, &train, hyper, trained_on)?;
            Ok(macro_auroc(&clf, &test)?.macro_auroc)
        })
        .collect()
}
