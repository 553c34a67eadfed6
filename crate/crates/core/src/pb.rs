//! Poisson-binomial kernel for the checklist query probability.
//!
//! A checklist over `d'` independent probabilistic concepts fires when at
//! least `T` of them are true. The number of true concepts follows a
//! Poisson-binomial law, so the query probability is an upper tail of that
//! law. The tail is computed by a truncated convolution in `O(d' * T)` and
//! its gradient by a prefix/suffix convolution in the same order, which
//! replaces the `O(d' * 2^d')` sum over worlds. [`pb_tail_enumerate`] keeps
//! the literal sum over worlds as an oracle.

use crate::error::{Error, Result};

/// Probabilities are clamped to `[EPS_PROB, 1 - EPS_PROB]` before use.
pub const EPS_PROB: f64 = 1e-7;

/// Largest vector accepted by [`pb_tail_enumerate`].
pub const ENUMERATION_LIMIT: usize = 24;

/// Clamp a probability into `[EPS_PROB, 1 - EPS_PROB]`.
#[inline]
pub fn clamp_prob(p: f64) -> f64 {
    p.clamp(EPS_PROB, 1.0 - EPS_PROB)
}

/// Concept probabilities of one sample, clamped away from 0 and 1.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbVector(Vec<f64>);

impl ProbVector {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.is_empty() {
            return Err(Error::invalid("probability vector is empty"));
        }
        if let Some((j, p)) = probs
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < 0.0 || **p > 1.0)
        {
            return Err(Error::invalid(format!(
                "probability {j} is {p}, expected a value in [0, 1]"
            )));
        }
        Ok(Self(probs.into_iter().map(clamp_prob).collect()))
    }

    pub fn as_slice(&self) -> &[f64] {
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
}

impl TryFrom<Vec<f64>> for ProbVector {
    type Error = Error;

    fn try_from(value: Vec<f64>) -> Result<Self> {
        Self::new(value)
    }
}

impl TryFrom<&[f64]> for ProbVector {
    type Error = Error;

    fn try_from(value: &[f64]) -> Result<Self> {
        Self::new(value.to_vec())
    }
}

/// Full evaluation of the count law at a threshold.
#[derive(Debug, Clone, PartialEq)]
pub struct PbResult {
    /// `P(#true >= T)`.
    pub tail: f64,
    /// `P(#true = d)` for `d = 0..=d'`.
    pub pmf: Vec<f64>,
    /// `d tail / d p_j`.
    pub grad_tail: Vec<f64>,
}

fn check_threshold(n: usize, threshold: usize) -> Result<()> {
    if threshold > n + 1 {
        return Err(Error::invalid(format!(
            "threshold {threshold} out of range 0..={}",
            n + 1
        )));
    }
    Ok(())
}

/// Probability mass function of the number of true concepts.
pub fn pb_pmf(p: &ProbVector) -> Vec<f64> {
    let n = p.len();
    let mut q = vec![0.0; n + 1];
    q[0] = 1.0;
    for (j, &pj) in p.as_slice().iter().enumerate() {
        let off = 1.0 - pj;
        for d in (1..=j + 1).rev() {
            q[d] = q[d] * off + q[d - 1] * pj;
        }
        q[0] *= off;
    }
    q
}

/// `P(#true >= threshold)`; `threshold = 0` gives 1 and `threshold = d' + 1` gives 0.
pub fn pb_tail(p: &ProbVector, threshold: usize) -> Result<f64> {
    check_threshold(p.len(), threshold)?;
    Ok(tail_unchecked(p.as_slice(), threshold))
}

/// Truncated convolution: counts `0..threshold` are tracked exactly, every
/// count at or above `threshold` is merged into one absorbing bucket.
pub(crate) fn tail_unchecked(p: &[f64], threshold: usize) -> f64 {
    if threshold == 0 {
        return 1.0;
    }
    if threshold > p.len() {
        return 0.0;
    }
    let mut low = vec![0.0; threshold];
    low[0] = 1.0;
    let mut top = 0.0;
    for &pj in p {
        let off = 1.0 - pj;
        top += low[threshold - 1] * pj;
        for d in (1..threshold).rev() {
            low[d] = low[d] * off + low[d - 1] * pj;
        }
        low[0] *= off;
    }
    top
}

/// Gradient of [`pb_tail`]: entry `j` is `P(exactly threshold - 1 true among the others)`.
pub fn pb_tail_grad(p: &ProbVector, threshold: usize) -> Result<Vec<f64>> {
    check_threshold(p.len(), threshold)?;
    Ok(grad_unchecked(p.as_slice(), threshold))
}

pub(crate) fn grad_unchecked(p: &[f64], threshold: usize) -> Vec<f64> {
    let n = p.len();
    if threshold == 0 || threshold > n {
        return vec![0.0; n];
    }
    // Counts above `threshold - 1` never contribute, so both sweeps keep
    // `width = threshold` cells.
    let width = threshold;
    let mut prefix = vec![0.0; n * width];
    let mut run = vec![0.0; width];
    run[0] = 1.0;
    for j in 0..n {
        prefix[j * width..(j + 1) * width].copy_from_slice(&run);
        convolve_truncated(&mut run, p[j]);
    }

    let target = threshold - 1;
    let mut grad = vec![0.0; n];
    let mut suffix = vec![0.0; width];
    suffix[0] = 1.0;
    for j in (0..n).rev() {
        let before = &prefix[j * width..(j + 1) * width];
        grad[j] = (0..=target).map(|a| before[a] * suffix[target - a]).sum();
        convolve_truncated(&mut suffix, p[j]);
    }
    grad
}

#[inline]
fn convolve_truncated(q: &mut [f64], pj: f64) {
    let off = 1.0 - pj;
    for d in (1..q.len()).rev() {
        q[d] = q[d] * off + q[d - 1] * pj;
    }
    q[0] *= off;
}

/// Tail, mass function and gradient in one call.
pub fn pb_evaluate(p: &ProbVector, threshold: usize) -> Result<PbResult> {
    check_threshold(p.len(), threshold)?;
    let pmf = pb_pmf(p);
    Ok(PbResult {
        tail: tail_unchecked(p.as_slice(), threshold),
        pmf,
        grad_tail: grad_unchecked(p.as_slice(), threshold),
    })
}

/// Literal sum over all `2^d'` truth assignments with at least `threshold` true concepts.
pub fn pb_tail_enumerate(p: &ProbVector, threshold: usize) -> Result<f64> {
    let n = p.len();
    if n > ENUMERATION_LIMIT {
        return Err(Error::SizeLimit {
            what: "enumerated vector length",
            actual: n,
            limit: ENUMERATION_LIMIT,
        });
    }
    check_threshold(n, threshold)?;
    let probs = p.as_slice();
    let mut total = 0.0;
    for world in 0u32..(1u32 << n) {
        if (world.count_ones() as usize) < threshold {
            continue;
        }
        let mut w = 1.0;
        for (j, &pj) in probs.iter().enumerate() {
            w *= if world >> j & 1 == 1 { pj } else { 1.0 - pj };
        }
        total += w;
    }
    Ok(total)
}
