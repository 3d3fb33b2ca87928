//! Stable scalar primitives and the [`ProbTable`] carrier.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Logistic function `1 / (1 + e^{-z})`.
///
/// Evaluated on the branch that never exponentiates a positive argument, so
/// large `|z|` saturates to 0 or 1 instead of overflowing. NaN propagates.
pub fn sigmoid<T: Real>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// `ln sigmoid(z) = -softplus(-z)`.
pub fn log_sigmoid<T: Real>(z: T) -> T {
    -softplus(-z)
}

/// `ln Σ e^{x_i}` with a max shift. Returns `-inf` for an empty slice.
pub fn log_sum_exp<T: Real>(xs: &[T]) -> T {
    let m = xs.iter().copied().fold(T::neg_infinity(), T::max);
    if !m.is_finite() {
        return m;
    }
    let s: T = xs.iter().map(|&x| (x - m).exp()).sum();
    m + s.ln()
}

/// Normalizes log-weights into log-probabilities.
pub fn log_softmax<T: Real>(logits: &[T]) -> Vec<T> {
    let lse = log_sum_exp(logits);
    logits.iter().map(|&l| l - lse).collect()
}

pub fn softmax<T: Real>(logits: &[T]) -> Vec<T> {
    log_softmax(logits).into_iter().map(T::exp).collect()
}

/// Slack allowed on `Σ p = 1` for a table of `n` entries.
pub(crate) fn sum_tolerance<T: Real>(n: usize) -> T {
    T::lit(1e-9).max(T::epsilon() * T::lit(16.0) * T::from_usize_lossy(n.max(1)))
}

/// A finite distribution over response indices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ProbTable<T> {
    entries: Vec<T>,
}

impl<T: Real> ProbTable<T> {
    /// Validates non-negativity and unit mass (within `1e-9`).
    pub fn new(entries: Vec<T>) -> Result<Self> {
        if entries.is_empty() {
            return Err(Error::invalid("probability table is empty"));
        }
        if let Some((i, p)) = entries
            .iter()
            .enumerate()
            .find(|(_, p)| !p.is_finite() || **p < T::zero())
        {
            return Err(Error::invalid(format!("entry {i} is {p}, not a probability")));
        }
        let total: T = entries.iter().copied().sum();
        if (total - T::one()).abs() > sum_tolerance(entries.len()) {
            return Err(Error::invalid(format!("entries sum to {total}, not 1")));
        }
        Ok(Self { entries })
    }

    pub fn from_log_probs(log_probs: &[T]) -> Result<Self> {
        Self::new(softmax(log_probs))
    }

    pub fn uniform(n: usize) -> Result<Self> {
        if n == 0 {
            return Err(Error::invalid("probability table is empty"));
        }
        Ok(Self {
            entries: vec![T::one() / T::from_usize_lossy(n); n],
        })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn get(&self, i: usize) -> T {
        self.entries[i]
    }

    pub fn as_slice(&self) -> &[T] {
        &self.entries
    }

    pub fn iter(&self) -> impl Iterator<Item = T> + '_ {
        self.entries.iter().copied()
    }

    pub fn min(&self) -> T {
        self.iter().fold(T::infinity(), T::min)
    }

    pub fn into_vec(self) -> Vec<T> {
        self.entries
    }
}

/// Scales non-negative weights to unit mass.
pub fn normalize<T: Real>(weights: &[T]) -> Result<ProbTable<T>> {
    if weights.is_empty() {
        return Err(Error::invalid("no weights to normalize"));
    }
    for (i, &w) in weights.iter().enumerate() {
        if !w.is_finite() {
            return Err(Error::NonFinite(format!("weight {i} is {w}")));
        }
        if w < T::zero() {
            return Err(Error::invalid(format!("weight {i} is negative ({w})")));
        }
    }
    let total: T = weights.iter().copied().sum();
    if total <= T::zero() {
        return Err(Error::invalid("all weights are zero"));
    }
    ProbTable::new(weights.iter().map(|&w| w / total).collect())
}

/// `½ Σ |p_i - q_i|`.
pub fn total_variation<T: Real>(p: &[T], q: &[T]) -> T {
    debug_assert_eq!(p.len(), q.len());
    T::half()
        * p.iter()
            .zip(q)
            .map(|(&a, &b)| (a - b).abs())
            .sum::<T>()
}
