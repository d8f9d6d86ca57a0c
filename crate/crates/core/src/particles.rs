//! Weighted empirical distributions over scalar returns.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Tolerance on the total mass of a particle set.
pub const MASS_TOLERANCE: f64 = 1e-12;

/// A weighted Dirac mixture `sum_i w_i delta_{v_i}`.
///
/// Values are finite, weights are nonnegative and sum to one. Uniform weights
/// `1/N` are the common case; exact Bellman pushforwards produce non-uniform
/// mixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawParticles", into = "RawParticles")]
pub struct ParticleSet {
    values: Vec<f64>,
    weights: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct RawParticles {
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl TryFrom<RawParticles> for ParticleSet {
    type Error = Error;

    fn try_from(raw: RawParticles) -> Result<Self> {
        ParticleSet::weighted(raw.values, raw.weights)
    }
}

impl From<ParticleSet> for RawParticles {
    fn from(p: ParticleSet) -> Self {
        RawParticles {
            values: p.values,
            weights: p.weights,
        }
    }
}

impl ParticleSet {
    /// Equally weighted particles.
    pub fn uniform(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("particle set must be nonempty".into()));
        }
        let w = 1.0 / values.len() as f64;
        let weights = vec![w; values.len()];
        Self::check_values(&values)?;
        Ok(ParticleSet { values, weights })
    }

    /// Particles with explicit weights; weights must already sum to one.
    pub fn weighted(values: Vec<f64>, weights: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::InvalidInput("particle set must be nonempty".into()));
        }
        if values.len() != weights.len() {
            return Err(Error::InvalidInput(format!(
                "{} values but {} weights",
                values.len(),
                weights.len()
            )));
        }
        Self::check_values(&values)?;
        if let Some((i, w)) = weights
            .iter()
            .enumerate()
            .find(|(_, w)| !w.is_finite() || **w < 0.0)
        {
            return Err(Error::InvalidInput(format!("weight {i} is {w}")));
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidInput(format!(
                "weights sum to {total}, expected 1"
            )));
        }
        Ok(ParticleSet { values, weights })
    }

    /// Particles with nonnegative weights of any positive total, rescaled to mass one.
    pub fn normalized(values: Vec<f64>, mut weights: Vec<f64>) -> Result<Self> {
        let total: f64 = weights.iter().sum();
        if !(total > 0.0 && total.is_finite()) {
            return Err(Error::InvalidInput(format!(
                "weights must have positive finite total, got {total}"
            )));
        }
        weights.iter_mut().for_each(|w| *w /= total);
        let rounded: f64 = weights.iter().sum();
        if (rounded - 1.0).abs() > MASS_TOLERANCE {
            return Err(Error::InvalidInput("weights could not be normalized".into()));
        }
        Self::weighted(values, weights)
    }

    /// A single atom at `value`.
    pub fn dirac(value: f64) -> Result<Self> {
        Self::uniform(vec![value])
    }

    fn check_values(values: &[f64]) -> Result<()> {
        match values.iter().position(|v| !v.is_finite()) {
            Some(i) => Err(Error::InvalidInput(format!(
                "particle {i} is not finite ({})",
                values[i]
            ))),
            None => Ok(()),
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// True when every weight equals `1/N` exactly.
    pub fn is_uniform(&self) -> bool {
        let w = 1.0 / self.len() as f64;
        self.weights.iter().all(|x| *x == w)
    }

    pub fn iter(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.values.iter().copied().zip(self.weights.iter().copied())
    }

    /// Weighted mean of the particle values.
    pub fn mean(&self) -> f64 {
        self.iter().map(|(v, w)| v * w).sum()
    }

    pub fn max_abs(&self) -> f64 {
        self.values.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Applies `v -> shift + scale * v` to every particle, keeping weights.
    pub fn affine(&self, shift: f64, scale: f64) -> Result<Self> {
        let values: Vec<f64> = self.values.iter().map(|v| shift + scale * v).collect();
        Self::check_values(&values)?;
        Ok(ParticleSet {
            values,
            weights: self.weights.clone(),
        })
    }

    /// Replaces the values in place, keeping weights. Lengths must match.
    pub fn set_values(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.len() {
            return Err(Error::InvalidInput("length mismatch in set_values".into()));
        }
        Self::check_values(values)?;
        self.values.copy_from_slice(values);
        Ok(())
    }

    /// Indices sorted by value (stable, so ties keep input order).
    pub(crate) fn sorted_indices(&self) -> Vec<usize> {
        let mut idx: Vec<usize> = (0..self.len()).collect();
        idx.sort_by(|&i, &j| self.values[i].total_cmp(&self.values[j]));
        idx
    }
}
