//! Analytic diffusion sampler over a world's Gaussian mixture.
//!
//! The denoiser is the exact posterior mean `E[x₀ | x₀ + σε = x]` of the
//! mixture. Pseudo-conditioning reweights component responsibilities by a
//! Gaussian kernel between `c_s` and the extractor applied to each component
//! mean. Guidance combines the two as `D_u + w·(D_c − D_u)`, so `w = 1` is
//! the pure conditional denoiser. Sampling integrates the probability-flow
//! ODE on a Karras-style σ schedule, with Heun's second-order correction by
//! default. Plain Euler steps are available but shrink the sample spread
//! noticeably at 64 steps.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::features::ConditionExtractor;
use crate::world::World;
use crate::{seed, Error, Result};

/// Responsibilities below `exp(-CUTOFF)` of the largest are skipped.
const CUTOFF: f64 = 40.0;
/// `exp(x)` is exactly zero in f64 below this.
const EXP_UNDERFLOW: f64 = -745.2;

/// ODE integrator for the probability-flow trajectory.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Solver {
    Euler,
    /// Euler predictor plus trapezoidal corrector, skipped on the final
    /// step to zero noise.
    #[default]
    Heun,
}

impl std::fmt::Display for Solver {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Solver::Euler => "euler",
            Solver::Heun => "heun",
        })
    }
}

impl std::str::FromStr for Solver {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "euler" => Ok(Solver::Euler),
            "heun" => Ok(Solver::Heun),
            _ => Err(Error::config(format!("unknown solver {s:?}, expected euler or heun"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSchedule {
    pub n_steps: usize,
    pub sigma_min: f64,
    pub sigma_max: f64,
    pub rho: f64,
    pub solver: Solver,
}

impl Default for NoiseSchedule {
    fn default() -> Self {
        NoiseSchedule {
            n_steps: 64,
            sigma_min: 0.002,
            sigma_max: 80.0,
            rho: 7.0,
            solver: Solver::Heun,
        }
    }
}

impl NoiseSchedule {
    pub fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return Err(Error::config("schedule needs at least one step"));
        }
        if !(self.sigma_min > 0.0 && self.sigma_max > self.sigma_min && self.sigma_max.is_finite()) {
            return Err(Error::config("schedule needs sigma_max > sigma_min > 0"));
        }
        if !(self.rho > 0.0 && self.rho.is_finite()) {
            return Err(Error::config("schedule exponent rho must be positive"));
        }
        Ok(())
    }

    /// Noise levels from `sigma_max` down to `sigma_min`, then a terminal 0.
    pub fn sigmas(&self) -> Result<Vec<f64>> {
        self.validate()?;
        if self.n_steps == 1 {
            return Ok(vec![self.sigma_max, 0.0]);
        }
        let inv_rho = 1.0 / self.rho;
        let hi = self.sigma_max.powf(inv_rho);
        let lo = self.sigma_min.powf(inv_rho);
        let last = (self.n_steps - 1) as f64;
        let mut out: Vec<f64> = (0..self.n_steps)
            .map(|i| (hi + i as f64 / last * (lo - hi)).powf(self.rho))
            .collect();
        // Pin the endpoints against powf round-off.
        out[0] = self.sigma_max;
        out[self.n_steps - 1] = self.sigma_min;
        out.push(0.0);
        Ok(out)
    }
}

pub fn sigma_schedule(cfg: &NoiseSchedule) -> Result<Vec<f64>> {
    cfg.sigmas()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GuidanceConfig {
    pub strength: f64,
    pub decrement: f64,
    pub floor: f64,
}

impl Default for GuidanceConfig {
    fn default() -> Self {
        GuidanceConfig {
            strength: 1.2,
            decrement: 0.1,
            floor: 0.0,
        }
    }
}

impl GuidanceConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.floor >= 0.0 && self.decrement > 0.0 && self.strength >= self.floor) {
            return Err(Error::config(
                "guidance needs floor >= 0, decrement > 0 and strength >= floor",
            ));
        }
        Ok(())
    }

    /// Strength used in fallback round `round` (0-based), on the decrement grid.
    pub fn strength_at(&self, round: usize) -> f64 {
        quantize(self.strength - round as f64 * self.decrement)
    }
}

/// Rounds to 12 decimals so grid values like 1.2 − 0.1 print as 1.1.
pub fn quantize(w: f64) -> f64 {
    (w * 1e12).round() / 1e12
}

/// How a pseudo-condition reweights the mixture.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub enum Conditioning {
    /// Responsibilities times a Gaussian kernel between `c_s` and `F(μ_k)`.
    #[default]
    Component,
    /// Exact linear-Gaussian posterior: `s_k·c_s` is read as a noisy
    /// observation of `A·x₀ + b`, where `F(x) = normalize(A·x + b)` and
    /// `s_k = ‖A·μ_k + b‖`. Moves samples within a component, not only
    /// between components.
    Posterior,
}

impl std::fmt::Display for Conditioning {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Conditioning::Component => "component",
            Conditioning::Posterior => "posterior",
        })
    }
}

impl std::str::FromStr for Conditioning {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "component" => Ok(Conditioning::Component),
            "posterior" => Ok(Conditioning::Posterior),
            _ => Err(Error::config(format!("unknown conditioning {s:?}, expected component or posterior"))),
        }
    }
}

/// The affine part of an extractor as seen by the posterior.
#[derive(Debug)]
struct Observation {
    /// `A`, `m × dim`.
    a: DMatrix<f64>,
    b: DVector<f64>,
    /// `s_k` per component.
    scale: Vec<f64>,
    /// Observation noise variance.
    noise: f64,
    /// `AᵀA / noise`.
    ata: DMatrix<f64>,
    /// `(dim + 1) × K`: component means with `s_k` as the last row.
    means_s: DMatrix<f64>,
    /// Noise-level terms, keyed by the bits of `σ`.
    levels: Mutex<HashMap<u64, Arc<Level>>>,
}

/// Terms of the posterior that depend only on the noise level.
#[derive(Debug)]
struct Level {
    lam_inv: DMatrix<f64>,
    /// `log π_k + ½μ_kᵀΛ⁻¹μ_k/v₀² − ½‖μ_k‖²/v₀`.
    base: Vec<f64>,
}

/// Schedules are short; this only guards against unbounded growth when
/// callers probe many noise levels.
const MAX_LEVELS: usize = 4096;

impl Observation {
    fn level(&self, world: &World, sigma: f64) -> Arc<Level> {
        let key = sigma.to_bits();
        if let Some(l) = self.levels.lock().expect("level cache").get(&key) {
            return Arc::clone(l);
        }
        let d = self.ata.nrows();
        let v0 = world.cluster_std().powi(2);
        let v = sigma * sigma;
        let lambda = &self.ata + DMatrix::identity(d, d) * (1.0 / v0 + 1.0 / v);
        // Symmetric positive definite by construction.
        let lam_inv = lambda.cholesky().expect("posterior precision is positive definite").inverse();
        let means = self.means_s.rows(0, d);
        let quad = &lam_inv * means;
        let base = (0..means.ncols())
            .map(|c| {
                let q = quad.column(c).dot(&means.column(c));
                let m = world.mean(c);
                world.weights()[c].ln() + 0.5 * q / (v0 * v0) - 0.5 * m.iter().map(|x| x * x).sum::<f64>() / v0
            })
            .collect();
        let level = Arc::new(Level { lam_inv, base });
        let mut cache = self.levels.lock().expect("level cache");
        if cache.len() >= MAX_LEVELS {
            cache.clear();
        }
        cache.insert(key, Arc::clone(&level));
        level
    }
}

/// Component anchors `F(μ_k)` for the compatibility kernel.
#[derive(Debug, Clone)]
pub struct Conditioner {
    anchors: Vec<f64>,
    dim: usize,
    kernel_width: f64,
    observation: Option<Arc<Observation>>,
}

/// Per-condition terms of the posterior.
#[derive(Debug, Clone)]
struct PosteriorTerms {
    obs: Arc<Observation>,
    /// `Aᵀc / noise`.
    atc: DVector<f64>,
    /// `Aᵀb / noise`.
    atb: DVector<f64>,
    /// `‖c‖² / noise`.
    cc: f64,
    /// `c·b / noise`.
    cb: f64,
}

impl PartialEq for PosteriorTerms {
    fn eq(&self, other: &Self) -> bool {
        self.obs.scale == other.obs.scale
            && self.obs.ata == other.obs.ata
            && self.atc == other.atc
            && self.atb == other.atb
            && self.cc == other.cc
            && self.cb == other.cb
    }
}

/// Log-compatibility of every component with one pseudo-condition.
#[derive(Debug, Clone, PartialEq)]
pub struct Condition {
    log_compat: Vec<f64>,
    max_log_compat: f64,
    /// `exp(log_compat − max_log_compat)`.
    compat: Vec<f64>,
    /// Every compatibility underflowed; the unconditional responsibilities
    /// are used instead.
    pub underflow: bool,
    posterior: Option<PosteriorTerms>,
}

impl Conditioner {
    pub fn new(world: &World, extractor: &dyn ConditionExtractor, kernel_width: f64) -> Result<Self> {
        Self::with_mode(world, extractor, kernel_width, Conditioning::Component)
    }

    pub fn with_mode(
        world: &World,
        extractor: &dyn ConditionExtractor,
        kernel_width: f64,
        mode: Conditioning,
    ) -> Result<Self> {
        if !(kernel_width > 0.0) {
            return Err(Error::config("kernel width must be positive"));
        }
        let mut anchors = Vec::new();
        let mut dim = 0;
        for k in 0..world.n_components() {
            let a = extractor.condition(world.mean(k));
            dim = a.len();
            anchors.extend(a);
        }
        let observation = match mode {
            Conditioning::Component => None,
            Conditioning::Posterior => Some(Arc::new(Self::observation(world, extractor, kernel_width, dim)?)),
        };
        Ok(Conditioner {
            anchors,
            dim,
            kernel_width,
            observation,
        })
    }

    fn observation(world: &World, extractor: &dyn ConditionExtractor, kernel_width: f64, m: usize) -> Result<Observation> {
        let (a, b) = extractor
            .affine()
            .ok_or_else(|| Error::config("posterior conditioning needs an affine extractor"))?;
        let d = world.dim();
        if a.len() != m * d || b.len() != m {
            return Err(Error::config("extractor affine part does not match its output"));
        }
        if !(world.cluster_std() > 0.0) {
            return Err(Error::config("posterior conditioning needs cluster_std > 0"));
        }
        let a = DMatrix::from_row_slice(m, d, &a);
        let b = DVector::from_vec(b);
        let scale: Vec<f64> = (0..world.n_components())
            .map(|k| (&a * DVector::from_column_slice(world.mean(k)) + &b).norm())
            .collect();
        let mean_scale = scale.iter().sum::<f64>() / scale.len() as f64;
        // The kernel width is stated on the unit sphere; scale it to the
        // typical length of A·μ + b.
        let noise = (kernel_width * mean_scale).powi(2);
        if !(noise > 0.0) {
            return Err(Error::config("extractor maps every component mean to zero"));
        }
        let ata = a.tr_mul(&a) / noise;
        let mut means_s = DMatrix::from_fn(d + 1, world.n_components(), |j, c| {
            if j < d {
                world.mean(c)[j]
            } else {
                0.0
            }
        });
        means_s.set_row(d, &nalgebra::RowDVector::from_row_slice(&scale));
        Ok(Observation {
            a,
            b,
            scale,
            noise,
            ata,
            means_s,
            levels: Mutex::new(HashMap::new()),
        })
    }

    pub fn kernel_width(&self) -> f64 {
        self.kernel_width
    }

    pub fn mode(&self) -> Conditioning {
        if self.observation.is_some() {
            Conditioning::Posterior
        } else {
            Conditioning::Component
        }
    }

    pub fn anchor(&self, k: usize) -> &[f64] {
        &self.anchors[k * self.dim..(k + 1) * self.dim]
    }

    pub fn condition(&self, c_s: &[f64]) -> Result<Condition> {
        if c_s.len() != self.dim {
            return Err(Error::config(format!(
                "condition has dimension {}, extractor produces {}",
                c_s.len(),
                self.dim
            )));
        }
        let scale = 1.0 / (2.0 * self.kernel_width * self.kernel_width);
        let log_compat: Vec<f64> = self
            .anchors
            .chunks_exact(self.dim)
            .map(|a| -a.iter().zip(c_s).map(|(p, q)| (p - q) * (p - q)).sum::<f64>() * scale)
            .collect();
        let best = log_compat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let compat = log_compat.iter().map(|c| (c - best).exp()).collect();
        let posterior = self.observation.as_ref().map(|obs| {
            let c = DVector::from_column_slice(c_s);
            PosteriorTerms {
                obs: Arc::clone(obs),
                atc: obs.a.tr_mul(&c) / obs.noise,
                atb: obs.a.tr_mul(&obs.b) / obs.noise,
                cc: c.norm_squared() / obs.noise,
                cb: c.dot(&obs.b) / obs.noise,
            }
        });
        Ok(Condition {
            log_compat,
            max_log_compat: best,
            compat,
            underflow: posterior.is_none() && !(best > EXP_UNDERFLOW),
            posterior,
        })
    }
}

/// `ln 2 / 64` split so `n·LN2_64_HI` is exact.
#[allow(clippy::excessive_precision)]
const LN2_64_HI: f64 = 0.693_147_180_369_123_816_49 / 64.0;
#[allow(clippy::excessive_precision)]
const LN2_64_LO: f64 = 1.908_214_929_270_587_700_02e-10 / 64.0;
/// `1.5·2^52`: adding it rounds to an integer held in the low mantissa bits.
const ROUND_MAGIC: f64 = 6_755_399_441_055_744.0;

/// `2^(j/64)`, correctly rounded.
const EXP2_TABLE: [f64; 64] = [
    f64::from_bits(0x3ff0000000000000), f64::from_bits(0x3ff02c9a3e778061), f64::from_bits(0x3ff059b0d3158574), f64::from_bits(0x3ff0874518759bc8),
    f64::from_bits(0x3ff0b5586cf9890f), f64::from_bits(0x3ff0e3ec32d3d1a2), f64::from_bits(0x3ff11301d0125b51), f64::from_bits(0x3ff1429aaea92de0),
    f64::from_bits(0x3ff172b83c7d517b), f64::from_bits(0x3ff1a35beb6fcb75), f64::from_bits(0x3ff1d4873168b9aa), f64::from_bits(0x3ff2063b88628cd6),
    f64::from_bits(0x3ff2387a6e756238), f64::from_bits(0x3ff26b4565e27cdd), f64::from_bits(0x3ff29e9df51fdee1), f64::from_bits(0x3ff2d285a6e4030b),
    f64::from_bits(0x3ff306fe0a31b715), f64::from_bits(0x3ff33c08b26416ff), f64::from_bits(0x3ff371a7373aa9cb), f64::from_bits(0x3ff3a7db34e59ff7),
    f64::from_bits(0x3ff3dea64c123422), f64::from_bits(0x3ff4160a21f72e2a), f64::from_bits(0x3ff44e086061892d), f64::from_bits(0x3ff486a2b5c13cd0),
    f64::from_bits(0x3ff4bfdad5362a27), f64::from_bits(0x3ff4f9b2769d2ca7), f64::from_bits(0x3ff5342b569d4f82), f64::from_bits(0x3ff56f4736b527da),
    f64::from_bits(0x3ff5ab07dd485429), f64::from_bits(0x3ff5e76f15ad2148), f64::from_bits(0x3ff6247eb03a5585), f64::from_bits(0x3ff6623882552225),
    f64::from_bits(0x3ff6a09e667f3bcd), f64::from_bits(0x3ff6dfb23c651a2f), f64::from_bits(0x3ff71f75e8ec5f74), f64::from_bits(0x3ff75feb564267c9),
    f64::from_bits(0x3ff7a11473eb0187), f64::from_bits(0x3ff7e2f336cf4e62), f64::from_bits(0x3ff82589994cce13), f64::from_bits(0x3ff868d99b4492ed),
    f64::from_bits(0x3ff8ace5422aa0db), f64::from_bits(0x3ff8f1ae99157736), f64::from_bits(0x3ff93737b0cdc5e5), f64::from_bits(0x3ff97d829fde4e50),
    f64::from_bits(0x3ff9c49182a3f090), f64::from_bits(0x3ffa0c667b5de565), f64::from_bits(0x3ffa5503b23e255d), f64::from_bits(0x3ffa9e6b5579fdbf),
    f64::from_bits(0x3ffae89f995ad3ad), f64::from_bits(0x3ffb33a2b84f15fb), f64::from_bits(0x3ffb7f76f2fb5e47), f64::from_bits(0x3ffbcc1e904bc1d2),
    f64::from_bits(0x3ffc199bdd85529c), f64::from_bits(0x3ffc67f12e57d14b), f64::from_bits(0x3ffcb720dcef9069), f64::from_bits(0x3ffd072d4a07897c),
    f64::from_bits(0x3ffd5818dcfba487), f64::from_bits(0x3ffda9e603db3285), f64::from_bits(0x3ffdfc97337b9b5f), f64::from_bits(0x3ffe502ee78b3ff6),
    f64::from_bits(0x3ffea4afa2a490da), f64::from_bits(0x3ffefa1bee615a27), f64::from_bits(0x3fff50765b6e4540), f64::from_bits(0x3fffa7c1819e90d8),
];

/// `e^z` for `z` in `[-CUTOFF, 0]`, 0 below. Branch-free so the component
/// loop vectorizes; within 2 ulp of `f64::exp` on that range.
#[inline(always)]
fn exp_cut(z: f64) -> f64 {
    let zc = if z > -CUTOFF { z } else { -CUTOFF };
    let t = zc * (64.0 * std::f64::consts::LOG2_E) + ROUND_MAGIC;
    let n = t - ROUND_MAGIC;
    let r = (zc - n * LN2_64_HI) - n * LN2_64_LO;
    // |r| ≤ ln2/128, so the degree-5 tail is below 4e-17.
    let mut p = 1.0 / 120.0;
    p = p * r + 1.0 / 24.0;
    p = p * r + 1.0 / 6.0;
    p = p * r + 0.5;
    p = p * r + 1.0;
    let q = p * r;
    let bits = t.to_bits().wrapping_sub(ROUND_MAGIC.to_bits()) as i64;
    let frac = EXP2_TABLE[(bits & 63) as usize];
    let scale = f64::from_bits((((bits >> 6) + 1023) as u64) << 52);
    let e = (frac + frac * q) * scale;
    if z > -CUTOFF {
        e
    } else {
        0.0
    }
}

/// Shifted conditional logits may exceed the unconditional ones by this much
/// before responsibilities are recomputed from scratch rather than rescaled.
const RESCALE_SLACK: f64 = 5.0;

/// Per-call working memory, reused across steps. Matrices hold one
/// column per sample.
#[derive(Debug)]
struct Scratch {
    logits: DMatrix<f64>,
    resp: DMatrix<f64>,
    means: DMatrix<f64>,
    totals: Vec<f64>,
    denoised: DMatrix<f64>,
}

impl Scratch {
    fn new() -> Self {
        Scratch {
            logits: DMatrix::zeros(0, 0),
            resp: DMatrix::zeros(0, 0),
            means: DMatrix::zeros(0, 0),
            totals: Vec::new(),
            denoised: DMatrix::zeros(0, 0),
        }
    }
}

fn reshape(m: &mut DMatrix<f64>, rows: usize, cols: usize) {
    if m.shape() != (rows, cols) {
        *m = DMatrix::zeros(rows, cols);
    }
}

const LANES: usize = 8;

/// Sum with independent lane accumulators so the loop vectorizes.
#[inline(always)]
fn lane_sum(v: &[f64]) -> f64 {
    let mut acc = [0.0; LANES];
    let chunks = v.chunks_exact(LANES);
    let tail: f64 = chunks.remainder().iter().sum();
    for c in chunks {
        for l in 0..LANES {
            acc[l] += c[l];
        }
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + ((acc[4] + acc[5]) + (acc[6] + acc[7])) + tail
}

#[inline(always)]
fn lane_max(v: &[f64]) -> f64 {
    let mut acc = [f64::NEG_INFINITY; LANES];
    let chunks = v.chunks_exact(LANES);
    let tail = chunks.remainder().iter().fold(f64::NEG_INFINITY, |m, &x| if x > m { x } else { m });
    for c in chunks {
        for l in 0..LANES {
            acc[l] = if c[l] > acc[l] { c[l] } else { acc[l] };
        }
    }
    acc.iter().fold(tail, |m, &x| if x > m { x } else { m })
}

/// Writes `e^(l − max)` into `out` and returns the sum. When few terms
/// survive the cutoff only those are evaluated; the values are the same.
#[inline(always)]
fn exponentiate(logits: &[f64], max: f64, out: &mut [f64]) -> f64 {
    let live: usize = logits.iter().map(|l| (l - max > -CUTOFF) as usize).sum();
    if live * 4 < logits.len() {
        sparse_exponentiate(logits, max, out);
    } else {
        for (o, l) in out.iter_mut().zip(logits) {
            *o = exp_cut(l - max);
        }
    }
    lane_sum(out)
}

// Kept out of line so the branch is not turned into a select over every term.
#[inline(never)]
fn sparse_exponentiate(logits: &[f64], max: f64, out: &mut [f64]) {
    for (o, l) in out.iter_mut().zip(logits) {
        let z = l - max;
        *o = if z > -CUTOFF { exp_one(z) } else { 0.0 };
    }
}

#[inline(never)]
fn exp_one(z: f64) -> f64 {
    exp_cut(z)
}

/// Defines `$name` as `$kernel` compiled for the widest vector unit the CPU
/// offers. The code is the same on every path and no FMA contraction
/// happens, so results do not depend on the CPU.
macro_rules! multiversion {
    ($(#[$meta:meta])* fn $name:ident => $kernel:ident($($arg:ident: $ty:ty),* $(,)?)) => {
        $(#[$meta])*
        #[allow(clippy::too_many_arguments)]
        fn $name($($arg: $ty),*) {
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx512f")]
                #[allow(clippy::too_many_arguments)]
                unsafe fn avx512($($arg: $ty),*) {
                    $kernel($($arg),*)
                }
                #[target_feature(enable = "avx2")]
                #[allow(clippy::too_many_arguments)]
                unsafe fn avx2($($arg: $ty),*) {
                    $kernel($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx512f") {
                    // SAFETY: the feature was detected at runtime.
                    return unsafe { avx512($($arg),*) };
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: as above.
                    return unsafe { avx2($($arg),*) };
                }
            }
            $kernel($($arg),*)
        }
    };
}

multiversion! {
    fn component_columns => component_kernel(
        logits: &mut [f64],
        u_part: &mut [f64],
        c_part: &mut [f64],
        totals: &mut [f64],
        log_weights: &[f64],
        half_sq_norms: &[f64],
        inv_s2: f64,
        cond: Option<&Condition>,
    )
}

multiversion! {
    fn posterior_columns => posterior_kernel(
        dots: &mut [f64],
        c_part: &mut [f64],
        totals: &mut [f64],
        base: &[f64],
        scale: &[f64],
        at_c: &[f64],
        at_b: &[f64],
        quad: (f64, f64),
        cross: &[f64],
    )
}

/// Unconditional responsibilities into `u_part`, component-conditioned ones
/// into `c_part` when a condition is given. `logits` holds `x·μ_k` on entry.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn component_kernel(
    logits: &mut [f64],
    u_part: &mut [f64],
    c_part: &mut [f64],
    totals: &mut [f64],
    log_weights: &[f64],
    half_sq_norms: &[f64],
    inv_s2: f64,
    cond: Option<&Condition>,
) {
    let k = log_weights.len();
    let n = logits.len() / k.max(1);
    for b in 0..n {
        let logits = &mut logits[b * k..(b + 1) * k];
        for ((l, lw), h) in logits.iter_mut().zip(log_weights).zip(half_sq_norms) {
            *l = lw + (*l - h) * inv_s2;
        }
        let max_u = lane_max(logits);
        let e_u = &mut u_part[b * k..(b + 1) * k];
        totals[b] = exponentiate(logits, max_u, e_u);
        let Some(cond) = cond else { continue };
        let e_c = &mut c_part[b * k..(b + 1) * k];
        totals[n + b] = if cond.underflow {
            e_c.copy_from_slice(e_u);
            totals[b]
        } else {
            for ((o, l), c) in e_c.iter_mut().zip(logits.iter()).zip(&cond.log_compat) {
                *o = l + c;
            }
            let max_c = lane_max(e_c);
            if max_u + cond.max_log_compat - max_c <= RESCALE_SLACK {
                // Terms cut from e_u lie at least CUTOFF − RESCALE_SLACK
                // below the conditional maximum.
                for ((o, u), c) in e_c.iter_mut().zip(e_u.iter()).zip(&cond.compat) {
                    *o = u * c;
                }
            } else {
                for o in e_c.iter_mut() {
                    *o = exp_cut(*o - max_c);
                }
            }
            lane_sum(e_c)
        };
    }
}

/// Posterior-conditioned responsibilities. Column `b` of `dots` holds
/// `μ_k·x̃_b`; `at_c` and `at_b` hold `μ_k·z_c` and `μ_k·z_b`.
#[allow(clippy::too_many_arguments)]
#[inline(always)]
fn posterior_kernel(
    dots: &mut [f64],
    c_part: &mut [f64],
    totals: &mut [f64],
    base: &[f64],
    scale: &[f64],
    at_c: &[f64],
    at_b: &[f64],
    quad: (f64, f64),
    cross: &[f64],
) {
    let k = base.len();
    for (b, g) in cross.iter().enumerate() {
        let logits = &mut dots[b * k..(b + 1) * k];
        for ((((l, base), s), ac), ab) in logits.iter_mut().zip(base).zip(scale).zip(at_c).zip(at_b) {
            *l += base + s * ac - ab + s * (s * quad.0 + quad.1 + g);
        }
        let max = lane_max(logits);
        totals[b] = exponentiate(logits, max, &mut c_part[b * k..(b + 1) * k]);
    }
}

/// Precomputed per-world quantities for the posterior mean. Samples are
/// processed as columns so the component sums become matrix products.
#[derive(Debug, Clone)]
pub struct Denoiser<'w> {
    world: &'w World,
    /// `K × dim`, row `k` is `μ_k`.
    means: DMatrix<f64>,
    /// `dim × K`.
    means_t: DMatrix<f64>,
    log_weights: Vec<f64>,
    half_sq_norms: Vec<f64>,
}

impl<'w> Denoiser<'w> {
    pub fn new(world: &'w World) -> Self {
        let k = world.n_components();
        let d = world.dim();
        let means = DMatrix::from_fn(k, d, |c, j| world.mean(c)[j]);
        Denoiser {
            world,
            means_t: means.transpose(),
            means,
            log_weights: world.weights().iter().map(|w| w.ln()).collect(),
            half_sq_norms: (0..k)
                .map(|c| 0.5 * world.mean(c).iter().map(|v| v * v).sum::<f64>())
                .collect(),
        }
    }

    /// Posterior means of the batch `xs` (`dim × n`) into `scratch.denoised`.
    fn guided_into(
        &self,
        xs: &DMatrix<f64>,
        sigma: f64,
        condition: Option<&Condition>,
        w: f64,
        scratch: &mut Scratch,
    ) {
        let (d, n) = xs.shape();
        reshape(&mut scratch.denoised, d, n);
        if sigma == 0.0 {
            scratch.denoised.copy_from(xs);
            return;
        }
        let cond = condition.filter(|_| w != 0.0);
        if let Some(post) = cond.and_then(|c| c.posterior.as_ref()) {
            return self.posterior_into(xs, sigma, post, w, scratch);
        }
        let k = self.log_weights.len();
        // Columns 0..n hold unconditional responsibilities, n..2n conditional.
        let width = if cond.is_some() { 2 * n } else { n };
        reshape(&mut scratch.logits, k, n);
        reshape(&mut scratch.resp, k, width);
        reshape(&mut scratch.means, d, width);
        scratch.totals.clear();
        scratch.totals.resize(width, 0.0);

        scratch.logits.gemm(1.0, &self.means, xs, 0.0);
        let inv_s2 = 1.0 / (self.world.cluster_std().powi(2) + sigma * sigma);
        let (u_part, c_part) = scratch.resp.as_mut_slice().split_at_mut(n * k);
        component_columns(
            scratch.logits.as_mut_slice(),
            u_part,
            c_part,
            &mut scratch.totals,
            &self.log_weights,
            &self.half_sq_norms,
            inv_s2,
            cond,
        );
        scratch.means.gemm(1.0, &self.means_t, &scratch.resp, 0.0);
        for (c, t) in scratch.totals.iter().enumerate() {
            scratch.means.column_mut(c).unscale_mut(*t);
        }

        let v0 = self.world.cluster_std().powi(2);
        let v = sigma * sigma;
        let denom = v0 + v;
        let finish = |x: f64, m: f64| (v0 * x + v * m) / denom;
        for b in 0..n {
            for j in 0..d {
                let x = xs[(j, b)];
                let u = finish(x, scratch.means[(j, b)]);
                scratch.denoised[(j, b)] = match cond {
                    None => u,
                    Some(_) => {
                        let c = finish(x, scratch.means[(j, n + b)]);
                        if w == 1.0 {
                            c
                        } else {
                            combine(u, c, w)
                        }
                    }
                };
            }
        }
    }

    /// Guided denoising with the linear-Gaussian posterior as the
    /// conditional branch.
    ///
    /// Given component `k`, `x₀ ~ N(μ_k, v₀I)` is observed as `x = x₀ + σε`
    /// and `y_k = s_k·c − b = A·x₀ + η` with `η ~ N(0, rI)`. With
    /// `Λ = (1/v₀ + 1/v)I + AᵀA/r` the posterior mean is
    /// `Λ⁻¹(μ_k/v₀ + x/v + Aᵀy_k/r)` and the log evidence, up to terms
    /// shared by all components, is
    /// `μ_kᵀΛ⁻¹(x/v + Aᵀy_k/r)/v₀ + ½μ_kᵀΛ⁻¹μ_k/v₀² − ½‖μ_k‖²/v₀
    ///  + xᵀΛ⁻¹Aᵀy_k/(vr) + ½‖Λ^{-½}Aᵀy_k‖²/r² − ½‖y_k‖²/r`.
    fn posterior_into(&self, xs: &DMatrix<f64>, sigma: f64, post: &PosteriorTerms, w: f64, scratch: &mut Scratch) {
        let (d, n) = xs.shape();
        let k = self.log_weights.len();
        let v0 = self.world.cluster_std().powi(2);
        let v = sigma * sigma;
        let level = post.obs.level(self.world, sigma);
        let lam_inv = &level.lam_inv;
        let base = &level.base;
        let lam_atc = lam_inv * &post.atc;
        let z_c = &lam_atc / v0;
        let z_b = lam_inv * &post.atb / v0;

        // Dot products: x (unconditional), Λ⁻¹x/(v₀v), z_c, z_b.
        let mut rhs = DMatrix::zeros(d, 2 * n + 2);
        rhs.columns_mut(0, n).copy_from(xs);
        rhs.columns_mut(n, n).gemm(1.0 / (v0 * v), lam_inv, xs, 0.0);
        rhs.set_column(2 * n, &z_c);
        rhs.set_column(2 * n + 1, &z_b);
        reshape(&mut scratch.logits, k, 2 * n + 2);
        scratch.logits.gemm(1.0, &self.means, &rhs, 0.0);

        let quad_s = (0.5 * post.atc.dot(&lam_atc) - 0.5 * post.cc, post.cb - post.atb.dot(&lam_atc));
        let cross: Vec<f64> = xs.column_iter().map(|x| x.dot(&lam_atc) / v).collect();

        reshape(&mut scratch.resp, k, 2 * n);
        scratch.totals.clear();
        scratch.totals.resize(2 * n, 0.0);
        let inv_s2 = 1.0 / (v0 + v);
        let (logits, extra) = scratch.logits.as_mut_slice().split_at_mut(2 * n * k);
        let (u_logits, c_logits) = logits.split_at_mut(n * k);
        let (at_c, at_b) = extra.split_at(k);
        let (u_part, c_part) = scratch.resp.as_mut_slice().split_at_mut(n * k);
        let (u_tot, c_tot) = scratch.totals.split_at_mut(n);
        component_columns(
            u_logits,
            u_part,
            &mut [],
            u_tot,
            &self.log_weights,
            &self.half_sq_norms,
            inv_s2,
            None,
        );
        posterior_columns(c_logits, c_part, c_tot, base, &post.obs.scale, at_c, at_b, quad_s, &cross);

        // Weighted component means, plus the weighted scale in the last row.
        reshape(&mut scratch.means, d + 1, 2 * n);
        scratch.means.gemm(1.0, &post.obs.means_s, &scratch.resp, 0.0);
        for (c, t) in scratch.totals.iter().enumerate() {
            scratch.means.column_mut(c).unscale_mut(*t);
        }

        let denom = v0 + v;
        for b in 0..n {
            let x = xs.column(b);
            let m_c = scratch.means.column(n + b);
            let s_bar = m_c[d];
            let rhs = m_c.rows(0, d) / v0 + x / v + &post.atc * s_bar - &post.atb;
            let c = lam_inv * rhs;
            for j in 0..d {
                let u = (v0 * x[j] + v * scratch.means[(j, b)]) / denom;
                scratch.denoised[(j, b)] = if w == 1.0 { c[j] } else { combine(u, c[j], w) };
            }
        }
    }

    fn single(&self, x: &[f64], sigma: f64, condition: Option<&Condition>, w: f64) -> Vec<f64> {
        let mut scratch = Scratch::new();
        let xs = DMatrix::from_column_slice(x.len(), 1, x);
        self.guided_into(&xs, sigma, condition, w, &mut scratch);
        scratch.denoised.as_slice().to_vec()
    }

    pub fn denoise(&self, x: &[f64], sigma: f64) -> Vec<f64> {
        self.single(x, sigma, None, 0.0)
    }

    pub fn conditional(&self, x: &[f64], sigma: f64, condition: &Condition) -> Vec<f64> {
        self.single(x, sigma, Some(condition), 1.0)
    }

    pub fn guided(&self, x: &[f64], sigma: f64, condition: &Condition, w: f64) -> Vec<f64> {
        self.single(x, sigma, Some(condition), w)
    }
}

#[inline]
fn combine(u: f64, c: f64, w: f64) -> f64 {
    u + w * (c - u)
}

/// Posterior mean of the clean sample under the unconditional mixture.
pub fn gmm_denoise(x: &[f64], sigma: f64, world: &World) -> Vec<f64> {
    Denoiser::new(world).denoise(x, sigma)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConditionalDenoise {
    pub x0: Vec<f64>,
    /// All compatibilities underflowed and the unconditional
    /// responsibilities were used.
    pub fell_back: bool,
}

pub fn conditional_denoise(
    x: &[f64],
    sigma: f64,
    c_s: &[f64],
    world: &World,
    conditioner: &Conditioner,
) -> Result<ConditionalDenoise> {
    let condition = conditioner.condition(c_s)?;
    Ok(ConditionalDenoise {
        x0: Denoiser::new(world).conditional(x, sigma, &condition),
        fell_back: condition.underflow,
    })
}

/// `D_u + w·(D_c − D_u)`; exactly `D_u` at `w = 0` and `D_c` at `w = 1`.
pub fn guided_denoise(
    x: &[f64],
    sigma: f64,
    c_s: &[f64],
    w: f64,
    world: &World,
    conditioner: &Conditioner,
) -> Result<Vec<f64>> {
    if !(w >= 0.0) {
        return Err(Error::config("guidance strength must be non-negative"));
    }
    let condition = conditioner.condition(c_s)?;
    Ok(Denoiser::new(world).guided(x, sigma, &condition, w))
}

/// One generated vector and how it was produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Candidate {
    pub x_prime: Vec<f64>,
    pub source_record_id: u64,
    pub guidance_used: f64,
    pub init_noise_seed: u64,
    pub index: usize,
}

/// Probability-flow sampler bound to one world and schedule.
#[derive(Debug, Clone)]
pub struct Sampler<'w> {
    denoiser: Denoiser<'w>,
    sigmas: Vec<f64>,
    solver: Solver,
    conditioner: Option<Conditioner>,
}

impl<'w> Sampler<'w> {
    pub fn new(world: &'w World, schedule: &NoiseSchedule, conditioner: Option<Conditioner>) -> Result<Self> {
        Ok(Sampler {
            denoiser: Denoiser::new(world),
            sigmas: schedule.sigmas()?,
            solver: schedule.solver,
            conditioner,
        })
    }

    pub fn world(&self) -> &'w World {
        self.denoiser.world
    }

    pub fn denoiser(&self) -> &Denoiser<'w> {
        &self.denoiser
    }

    pub fn conditioner(&self) -> Option<&Conditioner> {
        self.conditioner.as_ref()
    }

    /// Compatibility table for `c_s`; needs a conditioner.
    pub fn condition(&self, c_s: &[f64]) -> Result<Condition> {
        self.conditioner
            .as_ref()
            .ok_or_else(|| Error::config("sampler has no conditioner"))?
            .condition(c_s)
    }

    /// Integrates from `σ_max·ε` to zero noise. `None` samples unconditionally.
    pub fn sample_one(&self, condition: Option<&Condition>, w: f64, seed: u64) -> Result<Vec<f64>> {
        Ok(self.sample_seeds(condition, w, &[seed])?.pop().expect("one seed"))
    }

    /// One trajectory per seed, integrated together.
    pub fn sample_seeds(&self, condition: Option<&Condition>, w: f64, seeds: &[u64]) -> Result<Vec<Vec<f64>>> {
        if !(w >= 0.0) {
            return Err(Error::config("guidance strength must be non-negative"));
        }
        let d = self.denoiser.world.dim();
        let n = seeds.len();
        let mut x = DMatrix::zeros(d, n);
        for (b, &s) in seeds.iter().enumerate() {
            let mut rng = seed::rng(s);
            for j in 0..d {
                x[(j, b)] = self.sigmas[0] * rng.sample::<f64, _>(StandardNormal);
            }
        }
        let mut scratch = Scratch::new();
        let heun = self.solver == Solver::Heun;
        for (step, pair) in self.sigmas.windows(2).enumerate() {
            let (s_cur, s_next) = (pair[0], pair[1]);
            let h = s_next - s_cur;
            self.denoiser.guided_into(&x, s_cur, condition, w, &mut scratch);
            let slope = (&x - &scratch.denoised) / s_cur;
            if heun && s_next > 0.0 {
                let x_euler = &x + &slope * h;
                self.denoiser.guided_into(&x_euler, s_next, condition, w, &mut scratch);
                let slope_next = (x_euler - &scratch.denoised) / s_next;
                x += (slope + slope_next) * (0.5 * h);
            } else {
                x += slope * h;
            }
            if x.iter().any(|v| !v.is_finite()) {
                return Err(Error::Divergence { step });
            }
        }
        Ok(x.column_iter().map(|c| c.iter().copied().collect()).collect())
    }

    /// `b` candidates from independent noise streams under `seed`.
    pub fn sample_batch(
        &self,
        condition: Option<&Condition>,
        w: f64,
        b: usize,
        seed: u64,
        source_record_id: u64,
    ) -> Result<Vec<Candidate>> {
        if b == 0 {
            return Err(Error::config("batch size must be at least 1"));
        }
        let seeds: Vec<u64> = (0..b).map(|i| seed::derive(seed, "candidate", i as u64)).collect();
        let xs = self.sample_seeds(condition, w, &seeds)?;
        Ok(xs
            .into_iter()
            .zip(seeds)
            .enumerate()
            .map(|(index, (x_prime, init_noise_seed))| Candidate {
                x_prime,
                source_record_id,
                guidance_used: w,
                init_noise_seed,
                index,
            })
            .collect())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::features::PseudoConditionExtractor;
    use crate::world::{build_world, WorldSpec};

    fn one_d_world(mean: f64, std: f64) -> World {
        let spec = WorldSpec {
            n_identities: 2,
            dim: 2,
            n_classes: 1,
            identity_radius: Some(1.0),
            identity_separation: 0.0,
            condition_dim: 1,
            ..WorldSpec::default()
        };
        build_world(&spec)
            .unwrap()
            .with_means(vec![mean, mean, 50.0, 50.0])
            .unwrap()
            .with_weights(vec![1.0, 0.0])
            .unwrap()
            .with_cluster_std(std)
            .unwrap()
    }

    #[test]
    fn schedule_endpoints_and_linear_case() {
        let s = NoiseSchedule {
            n_steps: 2,
            ..NoiseSchedule::default()
        };
        assert_eq!(s.sigmas().unwrap(), vec![80.0, 0.002, 0.0]);
        let lin = NoiseSchedule {
            n_steps: 3,
            sigma_min: 1.0,
            sigma_max: 3.0,
            rho: 1.0,
            solver: Solver::Euler,
        };
        assert_eq!(lin.sigmas().unwrap(), vec![3.0, 2.0, 1.0, 0.0]);
        let single = NoiseSchedule {
            n_steps: 1,
            ..NoiseSchedule::default()
        };
        assert_eq!(single.sigmas().unwrap(), vec![80.0, 0.0]);
    }

    #[test]
    fn schedule_middle_value() {
        // Independent evaluation: ((80^(1/7) + 0.002^(1/7)) / 2)^7.
        let mid = ((80f64.powf(1.0 / 7.0) + 0.002f64.powf(1.0 / 7.0)) / 2.0).powi(7);
        assert!((mid - 2.5155).abs() < 1e-3);
        let s = NoiseSchedule {
            n_steps: 3,
            ..NoiseSchedule::default()
        };
        assert!((s.sigmas().unwrap()[1] - mid).abs() < 1e-12);
    }

    #[test]
    fn schedule_is_strictly_decreasing() {
        let s = NoiseSchedule::default().sigmas().unwrap();
        assert_eq!(s.len(), 65);
        assert!(s.windows(2).all(|p| p[0] > p[1]));
        assert_eq!(*s.last().unwrap(), 0.0);
    }

    #[test]
    fn invalid_schedules_are_rejected() {
        let bad = NoiseSchedule {
            sigma_min: 5.0,
            sigma_max: 1.0,
            ..NoiseSchedule::default()
        };
        assert!(bad.sigmas().is_err());
    }

    struct Affine2;

    impl ConditionExtractor for Affine2 {
        fn condition(&self, x: &[f64]) -> Vec<f64> {
            let y = [x[0] + 0.5 * x[1] + 0.2, -0.3 * x[0] + 0.8 * x[1] - 0.1];
            let n = (y[0] * y[0] + y[1] * y[1]).sqrt();
            vec![y[0] / n, y[1] / n]
        }

        fn affine(&self) -> Option<(Vec<f64>, Vec<f64>)> {
            Some((vec![1.0, 0.5, -0.3, 0.8], vec![0.2, -0.1]))
        }
    }

    fn two_component_world() -> World {
        let spec = WorldSpec {
            n_identities: 2,
            dim: 2,
            n_classes: 1,
            identity_radius: Some(1.0),
            identity_separation: 0.0,
            condition_dim: 1,
            ..WorldSpec::default()
        };
        build_world(&spec)
            .unwrap()
            .with_means(vec![0.5, -1.0, 2.0, 1.5])
            .unwrap()
            .with_weights(vec![0.3, 0.7])
            .unwrap()
            .with_cluster_std(0.8)
            .unwrap()
    }

    /// `E[x₀ | x, y]` from the explicit joint covariance of each component.
    fn brute_force_posterior(world: &World, x: &[f64], sigma: f64, c: &[f64], width: f64) -> Vec<f64> {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, -0.3, 0.8]);
        let b = DVector::from_vec(vec![0.2, -0.1]);
        let (v0, v) = (world.cluster_std().powi(2), sigma * sigma);
        let scales: Vec<f64> = (0..2)
            .map(|k| (&a * DVector::from_column_slice(world.mean(k)) + &b).norm())
            .collect();
        let r = (width * (scales[0] + scales[1]) / 2.0).powi(2);
        let mut cov = DMatrix::zeros(4, 4);
        cov.view_mut((0, 0), (2, 2)).copy_from(&(DMatrix::identity(2, 2) * (v0 + v)));
        cov.view_mut((0, 2), (2, 2)).copy_from(&(a.transpose() * v0));
        cov.view_mut((2, 0), (2, 2)).copy_from(&(&a * v0));
        cov.view_mut((2, 2), (2, 2)).copy_from(&(&a * a.transpose() * v0 + DMatrix::identity(2, 2) * r));
        let cov_inv = cov.clone().try_inverse().unwrap();
        let mut gain = DMatrix::zeros(2, 4);
        gain.view_mut((0, 0), (2, 2)).copy_from(&(DMatrix::identity(2, 2) * v0));
        gain.view_mut((0, 2), (2, 2)).copy_from(&(a.transpose() * v0));
        let mut log_ev = Vec::new();
        let mut cond_means = Vec::new();
        for k in 0..2 {
            let mu = DVector::from_column_slice(world.mean(k));
            let y = DVector::from_column_slice(c) * scales[k] - &b;
            let obs = DVector::from_vec(vec![x[0], x[1], y[0], y[1]]);
            let mean = DVector::from_vec({
                let am = &a * &mu;
                vec![mu[0], mu[1], am[0], am[1]]
            });
            let dev = obs - mean;
            log_ev.push(world.weights()[k].ln() - 0.5 * dev.dot(&(&cov_inv * &dev)));
            cond_means.push(&mu + &gain * &cov_inv * &dev);
        }
        let top = log_ev[0].max(log_ev[1]);
        let e: Vec<f64> = log_ev.iter().map(|l| (l - top).exp()).collect();
        let total = e[0] + e[1];
        (0..2).map(|j| (e[0] * cond_means[0][j] + e[1] * cond_means[1][j]) / total).collect()
    }

    #[test]
    fn posterior_conditioning_matches_explicit_gaussians() {
        let world = two_component_world();
        let cond = Conditioner::with_mode(&world, &Affine2, 0.4, Conditioning::Posterior).unwrap();
        let d = Denoiser::new(&world);
        let c_s = Affine2.condition(&[1.7, 0.2]);
        let condition = cond.condition(&c_s).unwrap();
        for (x, sigma) in [([0.3, 0.9], 0.5), ([-2.0, 1.0], 3.0), ([1.9, 1.4], 0.05)] {
            let got = d.conditional(&x, sigma, &condition);
            let want = brute_force_posterior(&world, &x, sigma, &c_s, 0.4);
            for j in 0..2 {
                assert!((got[j] - want[j]).abs() < 1e-10, "{got:?} vs {want:?}");
            }
            let u = d.denoise(&x, sigma);
            let g = d.guided(&x, sigma, &condition, 1.2);
            for j in 0..2 {
                assert_eq!(g[j], combine(u[j], got[j], 1.2));
            }
        }
    }

    #[test]
    fn posterior_conditioning_needs_an_affine_extractor() {
        struct Opaque;
        impl ConditionExtractor for Opaque {
            fn condition(&self, x: &[f64]) -> Vec<f64> {
                x.to_vec()
            }
        }
        let world = two_component_world();
        assert!(Conditioner::with_mode(&world, &Opaque, 0.4, Conditioning::Posterior).is_err());
        assert!(Conditioner::with_mode(&world, &Opaque, 0.4, Conditioning::Component).is_ok());
        let flat = world.with_cluster_std(0.0).unwrap();
        assert!(Conditioner::with_mode(&flat, &Affine2, 0.4, Conditioning::Posterior).is_err());
    }

    #[test]
    fn fast_exp_matches_std() {
        let mut worst = 0.0f64;
        for i in 0..400_000 {
            let z = -CUTOFF * i as f64 / 400_000.0;
            let (a, b) = (exp_cut(z), z.exp());
            worst = worst.max(((a - b) / b).abs());
        }
        assert!(worst < 4e-16, "relative error {worst}");
        assert_eq!(exp_cut(0.0), 1.0);
        assert_eq!(exp_cut(-CUTOFF - 1e-9), 0.0);
        assert_eq!(exp_cut(f64::NEG_INFINITY), 0.0);
    }

    #[test]
    fn heun_beats_euler_on_a_single_gaussian() {
        let world = one_d_world(0.0, 1.0);
        let spread = |solver| {
            let schedule = NoiseSchedule { solver, ..NoiseSchedule::default() };
            let sampler = Sampler::new(&world, &schedule, None).unwrap();
            let xs: Vec<f64> = (0..400).map(|i| sampler.sample_one(None, 0.0, i).unwrap()[0]).collect();
            (xs.iter().map(|v| v * v).sum::<f64>() / xs.len() as f64).sqrt()
        };
        let (euler, heun) = (spread(Solver::Euler), spread(Solver::Heun));
        assert!(euler < heun);
        assert!((heun - 1.0).abs() < 0.1, "heun spread {heun}");
    }

    #[test]
    fn solver_names_round_trip() {
        for s in [Solver::Euler, Solver::Heun] {
            assert_eq!(s.to_string().parse::<Solver>().unwrap(), s);
        }
        assert!("rk4".parse::<Solver>().is_err());
    }

    #[test]
    fn collapsed_component_denoises_to_its_mean() {
        let world = one_d_world(3.0, 0.0);
        for x in [-10.0, 0.0, 7.5] {
            assert_eq!(gmm_denoise(&[x, 1.0], 0.7, &world), vec![3.0, 3.0]);
        }
    }

    #[test]
    fn equal_precision_average() {
        let world = one_d_world(0.0, 1.0);
        let out = gmm_denoise(&[2.0, 2.0], 1.0, &world);
        assert!((out[0] - 1.0).abs() < 1e-15);
    }

    #[test]
    fn zero_noise_is_identity() {
        let world = build_world(&WorldSpec {
            n_identities: 10,
            ..WorldSpec::default()
        })
        .unwrap();
        let x: Vec<f64> = (0..world.dim()).map(|i| i as f64).collect();
        assert_eq!(gmm_denoise(&x, 0.0, &world), x);
    }

    fn conditioned_world(ipp: usize) -> (World, PseudoConditionExtractor) {
        let spec = WorldSpec {
            n_identities: 24,
            identities_per_pattern: ipp,
            ..WorldSpec::default()
        };
        (build_world(&spec).unwrap(), PseudoConditionExtractor::for_world(&spec).unwrap())
    }

    #[test]
    fn infinite_kernel_matches_unconditional() {
        let (world, ex) = conditioned_world(4);
        let cond = Conditioner::new(&world, &ex, f64::INFINITY).unwrap();
        let x: Vec<f64> = (0..world.dim()).map(|i| (i as f64 * 0.7).sin() * 3.0).collect();
        let c_s = ex.extract(&x).values;
        for sigma in [0.05, 1.0, 10.0] {
            let c = conditional_denoise(&x, sigma, &c_s, &world, &cond).unwrap();
            assert!(!c.fell_back);
            assert_eq!(c.x0, gmm_denoise(&x, sigma, &world));
        }
    }

    #[test]
    fn narrow_kernel_selects_the_matching_component() {
        let (world, ex) = conditioned_world(1);
        let cond = Conditioner::new(&world, &ex, 1e-6).unwrap();
        let n = world.n_components();
        let j = (0..n)
            .find(|&j| (0..n).all(|k| k == j || world.predicates(k) != world.predicates(j)))
            .expect("some identity has a unique pattern");
        let c_s = cond.anchor(j).to_vec();
        let x: Vec<f64> = (0..world.dim()).map(|i| i as f64 * 0.1).collect();
        let out = conditional_denoise(&x, 2.0, &c_s, &world, &cond).unwrap();
        let single = world
            .clone()
            .with_weights((0..world.n_components()).map(|k| if k == j { 1.0 } else { 0.0 }).collect())
            .unwrap();
        let expected = gmm_denoise(&x, 2.0, &single);
        for (a, b) in out.x0.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn symmetric_compatibility_gives_the_average() {
        let spec = WorldSpec {
            n_identities: 2,
            dim: 3,
            n_classes: 1,
            condition_dim: 1,
            identity_radius: Some(2.0),
            ..WorldSpec::default()
        };
        let world = build_world(&spec)
            .unwrap()
            .with_means(vec![1.0, 2.0, 0.0, 1.0, -2.0, 0.0])
            .unwrap();
        let ex = PseudoConditionExtractor::for_world(&spec).unwrap();
        let cond = Conditioner::new(&world, &ex, 0.5).unwrap();
        // x equidistant from both means, both share the same anchor.
        let x = [1.0, 0.0, 0.0];
        let c_s = ex.extract(&x).values;
        let out = conditional_denoise(&x, 1.0, &c_s, &world, &cond).unwrap();
        let v0 = world.cluster_std().powi(2);
        let expected = [1.0, 0.0, 0.0].map(|m: f64| (v0 * m + 1.0 * m) / (v0 + 1.0));
        for (a, b) in out.x0.iter().zip(expected) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn underflowing_compatibility_falls_back() {
        let (world, ex) = conditioned_world(4);
        let cond = Conditioner::new(&world, &ex, 1e-9).unwrap();
        let c_s = vec![10.0; ex.spec().out_dim];
        let x: Vec<f64> = vec![0.3; world.dim()];
        let out = conditional_denoise(&x, 1.5, &c_s, &world, &cond).unwrap();
        assert!(out.fell_back);
        assert_eq!(out.x0, gmm_denoise(&x, 1.5, &world));
    }

    #[test]
    fn guidance_extrapolates_linearly() {
        assert!((combine(0.0, 1.0, 1.2) - 1.2).abs() < 1e-15);
    }

    #[test]
    fn guidance_endpoints_are_exact() {
        let (world, ex) = conditioned_world(4);
        let cond = Conditioner::new(&world, &ex, 0.3).unwrap();
        let x: Vec<f64> = (0..world.dim()).map(|i| (i as f64).cos() * 4.0).collect();
        let c_s = ex.extract(world.mean(3)).values;
        let c = conditional_denoise(&x, 0.8, &c_s, &world, &cond).unwrap().x0;
        let u = gmm_denoise(&x, 0.8, &world);
        assert_eq!(guided_denoise(&x, 0.8, &c_s, 1.0, &world, &cond).unwrap(), c);
        assert_eq!(guided_denoise(&x, 0.8, &c_s, 0.0, &world, &cond).unwrap(), u);
        let g = guided_denoise(&x, 0.8, &c_s, 1.2, &world, &cond).unwrap();
        for i in 0..x.len() {
            assert!((g[i] - (u[i] + 1.2 * (c[i] - u[i]))).abs() < 1e-12);
        }
    }

    #[test]
    fn sampling_is_deterministic() {
        let world = one_d_world(1.0, 0.5);
        let sampler = Sampler::new(&world, &NoiseSchedule::default(), None).unwrap();
        assert_eq!(sampler.sample_one(None, 0.0, 9).unwrap(), sampler.sample_one(None, 0.0, 9).unwrap());
        assert_ne!(sampler.sample_one(None, 0.0, 9).unwrap(), sampler.sample_one(None, 0.0, 10).unwrap());
    }

    #[test]
    fn point_mass_is_reached() {
        let world = one_d_world(-2.5, 0.0);
        let sampler = Sampler::new(&world, &NoiseSchedule::default(), None).unwrap();
        for seed in 0..50 {
            let x = sampler.sample_one(None, 0.0, seed).unwrap();
            assert!(x.iter().all(|v| (v + 2.5).abs() < 1e-3));
        }
    }

    #[test]
    fn batch_of_one_matches_first_stream() {
        let (world, ex) = conditioned_world(4);
        let cond = Conditioner::new(&world, &ex, 0.3).unwrap();
        let sampler = Sampler::new(&world, &NoiseSchedule::default(), Some(cond)).unwrap();
        let condition = sampler.condition(&ex.extract(world.mean(0)).values).unwrap();
        let batch = sampler.sample_batch(Some(&condition), 1.2, 1, 77, 4).unwrap();
        let single = sampler
            .sample_one(Some(&condition), 1.2, seed::derive(77, "candidate", 0))
            .unwrap();
        assert_eq!(batch[0].x_prime, single);
        assert_eq!(batch[0].source_record_id, 4);
        assert_eq!(batch[0].guidance_used, 1.2);
    }

    #[test]
    fn batch_outputs_are_distinct() {
        let (world, ex) = conditioned_world(4);
        let cond = Conditioner::new(&world, &ex, 0.3).unwrap();
        let sampler = Sampler::new(&world, &NoiseSchedule::default(), Some(cond)).unwrap();
        let condition = sampler.condition(&ex.extract(world.mean(0)).values).unwrap();
        let batch = sampler.sample_batch(Some(&condition), 1.2, 32, 3, 0).unwrap();
        for i in 0..batch.len() {
            for j in (i + 1)..batch.len() {
                assert_ne!(batch[i].x_prime, batch[j].x_prime);
            }
        }
    }

    #[test]
    fn guidance_grid_is_quantized() {
        let g = GuidanceConfig::default();
        assert_eq!(g.strength_at(0), 1.2);
        assert_eq!(g.strength_at(1), 1.1);
        assert_eq!(g.strength_at(12), 0.0);
    }
}
