//! Softmax, temperature, entropy and rank primitives.
//!
//! Entropies are in nats. Rankings are 1-indexed with rank 1 the largest
//! logit; ties are broken by ascending token id so every ordering is total.

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum DistributionError {
    #[error("temperature must be positive and finite, got {0}")]
    NonPositiveTemperature(f64),
    #[error("logit vector must be nonempty and finite")]
    InvalidLogits,
    #[error("probability vector must be nonnegative and sum to 1")]
    InvalidProbabilities,
    #[error("logits are constant; entropy is ln V at every temperature")]
    ConstantLogits,
    #[error("target entropy {target} outside (0, {max})")]
    TargetOutOfRange { target: f64, max: f64 },
}

pub type Result<T> = std::result::Result<T, DistributionError>;

/// Unnormalized next-token scores over the vocabulary.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitVector(Vec<f64>);

impl LogitVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() || values.iter().any(|v| !v.is_finite()) {
            return Err(DistributionError::InvalidLogits);
        }
        Ok(LogitVector(values))
    }

    /// Widens a finite `f32` row (as stored in traces).
    pub fn from_f32(values: &[f32]) -> Result<Self> {
        Self::new(values.iter().map(|&x| f64::from(x)).collect())
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    /// `z / temperature`, componentwise.
    pub fn scaled(&self, temperature: f64) -> Result<Self> {
        check_temperature(temperature)?;
        Self::new(self.0.iter().map(|z| z / temperature).collect())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        let sum: f64 = values.iter().sum();
        if values.is_empty()
            || values.iter().any(|p| !(p.is_finite() && *p >= 0.0))
            || (sum - 1.0).abs() > 1e-9
        {
            return Err(DistributionError::InvalidProbabilities);
        }
        Ok(ProbVector(values))
    }

    pub fn values(&self) -> &[f64] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}

/// `ranks[i]` is the rank of token `i` (1 = largest).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankVector(Vec<u32>);

impl RankVector {
    pub fn ranks(&self) -> &[u32] {
        &self.0
    }

    pub fn rank_of(&self, token: u32) -> u32 {
        self.0[token as usize]
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    /// Token ids in rank order (inverse permutation).
    pub fn order(&self) -> Vec<u32> {
        let mut order = vec![0u32; self.0.len()];
        for (tok, &r) in self.0.iter().enumerate() {
            order[r as usize - 1] = tok as u32;
        }
        order
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TemperatureSolveResult {
    pub t_star: f64,
    pub achieved_entropy: f64,
    pub iterations: usize,
    pub clamped: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SolverOptions {
    pub tolerance: f64,
    pub max_iter: usize,
    pub bracket: (f64, f64),
}

impl Default for SolverOptions {
    fn default() -> Self {
        SolverOptions {
            tolerance: 1e-6,
            max_iter: 200,
            bracket: (1e-3, 1e3),
        }
    }
}

// Bracket expansion never goes beyond these bounds.
const T_FLOOR: f64 = 1e-12;
const T_CEIL: f64 = 1e12;

fn check_temperature(t: f64) -> Result<()> {
    if t.is_finite() && t > 0.0 {
        Ok(())
    } else {
        Err(DistributionError::NonPositiveTemperature(t))
    }
}

fn max_of(z: &[f64]) -> f64 {
    z.iter().copied().fold(f64::NEG_INFINITY, f64::max)
}

/// Softmax of `z / temperature`.
pub fn softmax_with_temperature(z: &LogitVector, temperature: f64) -> Result<ProbVector> {
    check_temperature(temperature)?;
    Ok(ProbVector(softmax_raw(z.values(), temperature)))
}

fn softmax_raw(z: &[f64], temperature: f64) -> Vec<f64> {
    let m = max_of(z) / temperature;
    let mut p: Vec<f64> = z.iter().map(|&x| (x / temperature - m).exp()).collect();
    let s: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= s);
    p
}

/// Shannon entropy in nats, with `0 ln 0 = 0`.
pub fn entropy(p: &ProbVector) -> f64 {
    entropy_raw(p.values())
}

fn entropy_raw(p: &[f64]) -> f64 {
    let h: f64 = p.iter().filter(|&&x| x > 0.0).map(|&x| -x * x.ln()).sum();
    h.max(0.0)
}

/// Entropy of `softmax(z / temperature)` computed from the log-partition
/// function, which stays accurate when most probabilities underflow.
pub(crate) fn entropy_at(z: &[f64], temperature: f64) -> f64 {
    let m = max_of(z);
    let mut s = 0.0;
    let mut w = 0.0;
    for &x in z {
        let a = (x - m) / temperature;
        let e = a.exp();
        s += e;
        w += e * a;
    }
    // H = ln S - E[a]
    (s.ln() - w / s).max(0.0)
}

fn is_constant(z: &[f64]) -> bool {
    z.iter().all(|&x| x == z[0])
}

/// Bisection on `ln T` for a temperature whose softmax entropy hits `target`.
pub fn solve_temperature_for_entropy(
    z: &LogitVector,
    target: f64,
    options: SolverOptions,
) -> Result<TemperatureSolveResult> {
    let rows = [z.values()];
    solve_mean_entropy(&rows, target, options)
}

/// Single temperature whose mean entropy over all rows equals `target`.
///
/// Mean entropy is a sum of functions increasing in `T`, so the same bracket
/// logic applies. Constant rows contribute `ln V` at every temperature.
pub fn solve_global_temperature(
    rows: &[&[f64]],
    target: f64,
    options: SolverOptions,
) -> Result<TemperatureSolveResult> {
    solve_mean_entropy(rows, target, options)
}

fn solve_mean_entropy(
    rows: &[&[f64]],
    target: f64,
    options: SolverOptions,
) -> Result<TemperatureSolveResult> {
    if rows.is_empty() || rows.iter().any(|r| r.is_empty()) {
        return Err(DistributionError::InvalidLogits);
    }
    let max_h = rows.iter().map(|r| (r.len() as f64).ln()).sum::<f64>() / rows.len() as f64;
    if !(target.is_finite() && target > 0.0 && target < max_h) {
        return Err(DistributionError::TargetOutOfRange { target, max: max_h });
    }
    if rows.iter().all(|r| is_constant(r)) {
        return Err(DistributionError::ConstantLogits);
    }
    let (mut lo, mut hi) = options.bracket;
    check_temperature(lo)?;
    check_temperature(hi)?;
    let mean_h = |t: f64| rows.iter().map(|r| entropy_at(r, t)).sum::<f64>() / rows.len() as f64;
    let tol = options.tolerance;

    let mut h_lo = mean_h(lo);
    while h_lo > target + tol && lo > T_FLOOR {
        lo = (lo / 10.0).max(T_FLOOR);
        h_lo = mean_h(lo);
    }
    let mut h_hi = mean_h(hi);
    while h_hi < target - tol && hi < T_CEIL {
        hi = (hi * 10.0).min(T_CEIL);
        h_hi = mean_h(hi);
    }
    if h_lo > target + tol {
        return Ok(TemperatureSolveResult {
            t_star: lo,
            achieved_entropy: h_lo,
            iterations: 0,
            clamped: true,
        });
    }
    if h_hi < target - tol {
        return Ok(TemperatureSolveResult {
            t_star: hi,
            achieved_entropy: h_hi,
            iterations: 0,
            clamped: true,
        });
    }
    if (h_lo - target).abs() <= tol {
        return Ok(TemperatureSolveResult {
            t_star: lo,
            achieved_entropy: h_lo,
            iterations: 0,
            clamped: false,
        });
    }
    if (h_hi - target).abs() <= tol {
        return Ok(TemperatureSolveResult {
            t_star: hi,
            achieved_entropy: h_hi,
            iterations: 0,
            clamped: false,
        });
    }

    let (mut llo, mut lhi) = (lo.ln(), hi.ln());
    let mut best = (lo, h_lo);
    for iter in 1..=options.max_iter {
        let mid = 0.5 * (llo + lhi);
        let t = mid.exp();
        let h = mean_h(t);
        if (h - target).abs() < (best.1 - target).abs() {
            best = (t, h);
        }
        if (h - target).abs() <= tol {
            return Ok(TemperatureSolveResult {
                t_star: t,
                achieved_entropy: h,
                iterations: iter,
                clamped: false,
            });
        }
        if h < target {
            llo = mid;
        } else {
            lhi = mid;
        }
    }
    // Out of iterations: report the closest point, flagged.
    Ok(TemperatureSolveResult {
        t_star: best.0,
        achieved_entropy: best.1,
        iterations: options.max_iter,
        clamped: true,
    })
}

/// Token permutation sorted by descending score, ties by ascending id.
pub(crate) fn descending_order<T: PartialOrd + Copy>(values: &[T]) -> Vec<u32> {
    let mut idx: Vec<u32> = (0..values.len() as u32).collect();
    idx.sort_unstable_by(|&a, &b| {
        values[b as usize]
            .partial_cmp(&values[a as usize])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    idx
}

pub(crate) fn ranks_of_slice<T: PartialOrd + Copy>(values: &[T]) -> Vec<u32> {
    let order = descending_order(values);
    let mut ranks = vec![0u32; values.len()];
    for (r, &tok) in order.iter().enumerate() {
        ranks[tok as usize] = r as u32 + 1;
    }
    ranks
}

pub(crate) fn argmax_slice<T: PartialOrd + Copy>(values: &[T]) -> u32 {
    let mut best = 0usize;
    for (i, v) in values.iter().enumerate().skip(1) {
        if *v > values[best] {
            best = i;
        }
    }
    best as u32
}

pub fn ranks_of(z: &LogitVector) -> RankVector {
    RankVector(ranks_of_slice(z.values()))
}

/// Smallest token id among the maxima.
pub fn argmax_token(z: &LogitVector) -> u32 {
    argmax_slice(z.values())
}
