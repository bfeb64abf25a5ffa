//! Dense data and factor matrices, plus the masked reconstruction loss.
//!
//! Missing entries are carried by a boolean mask. The value stored in a
//! masked-out cell is never read by any computation in this crate.

use ndarray::{Array2, Zip};

use crate::error::{Error, Result};

/// A nonnegative data matrix together with its observation mask.
#[derive(Clone, Debug, PartialEq)]
pub struct ObservedMatrix {
    values: Array2<f64>,
    mask: Array2<bool>,
    observed: usize,
}

impl ObservedMatrix {
    pub fn new(values: Array2<f64>, mask: Array2<bool>) -> Result<Self> {
        if values.dim() != mask.dim() {
            return Err(Error::dims(values.dim(), mask.dim()));
        }
        let mut observed = 0;
        for ((row, col), &seen) in mask.indexed_iter() {
            if !seen {
                continue;
            }
            let v = values[[row, col]];
            if !v.is_finite() || v < 0.0 {
                return Err(Error::Domain { row, col, value: v });
            }
            observed += 1;
        }
        if observed == 0 {
            return Err(Error::EmptyMask);
        }
        Ok(Self {
            values,
            mask,
            observed,
        })
    }

    pub fn fully_observed(values: Array2<f64>) -> Result<Self> {
        let mask = Array2::from_elem(values.dim(), true);
        Self::new(values, mask)
    }

    /// Same values under a different mask.
    pub fn with_mask(&self, mask: Array2<bool>) -> Result<Self> {
        Self::new(self.values.clone(), mask)
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn mask(&self) -> &Array2<bool> {
        &self.mask
    }

    pub fn rows(&self) -> usize {
        self.values.nrows()
    }

    pub fn cols(&self) -> usize {
        self.values.ncols()
    }

    pub fn dim(&self) -> (usize, usize) {
        self.values.dim()
    }

    pub fn observed_count(&self) -> usize {
        self.observed
    }

    #[inline]
    pub fn is_observed(&self, row: usize, col: usize) -> bool {
        self.mask[[row, col]]
    }

    #[inline]
    pub fn value(&self, row: usize, col: usize) -> f64 {
        self.values[[row, col]]
    }

    /// Row-major iterator over `(row, col, value)` for observed cells.
    pub fn observed_entries(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        self.mask
            .indexed_iter()
            .filter(|(_, &seen)| seen)
            .map(|((r, c), _)| (r, c, self.values[[r, c]]))
    }

    pub fn observed_mean(&self) -> f64 {
        self.observed_entries().map(|(_, _, v)| v).sum::<f64>() / self.observed as f64
    }

    /// Population variance of the observed values.
    pub fn observed_variance(&self) -> f64 {
        let mean = self.observed_mean();
        self.observed_entries()
            .map(|(_, _, v)| (v - mean) * (v - mean))
            .sum::<f64>()
            / self.observed as f64
    }

    /// Multiplies every stored value by `factor` (> 0); the mask is unchanged.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        if !(factor.is_finite() && factor > 0.0) {
            return Err(Error::InvalidParameter(format!(
                "scale factor must be positive and finite, got {factor}"
            )));
        }
        Self::new(self.values.mapv(|v| v * factor), self.mask.clone())
    }
}

/// Nonnegative factors `W` (M x K) and `Z` (K x N).
#[derive(Clone, Debug, PartialEq)]
pub struct FactorPair {
    w: Array2<f64>,
    z: Array2<f64>,
}

impl FactorPair {
    pub fn new(w: Array2<f64>, z: Array2<f64>) -> Result<Self> {
        if w.ncols() == 0 {
            return Err(Error::InvalidParameter("latent dimension K must be >= 1".into()));
        }
        if w.ncols() != z.nrows() {
            return Err(Error::Dimension {
                expected: format!("Z with {} rows", w.ncols()),
                found: format!("{} rows", z.nrows()),
            });
        }
        for (name, m) in [("W", &w), ("Z", &z)] {
            if let Some(((r, c), v)) = m.indexed_iter().find(|(_, v)| !(v.is_finite() && **v >= 0.0)) {
                return Err(Error::InvalidParameter(format!(
                    "{name}[{r},{c}] = {v} violates nonnegativity"
                )));
            }
        }
        Ok(Self { w, z })
    }

    pub fn w(&self) -> &Array2<f64> {
        &self.w
    }

    pub fn z(&self) -> &Array2<f64> {
        &self.z
    }

    pub(crate) fn parts_mut(&mut self) -> (&mut Array2<f64>, &mut Array2<f64>) {
        (&mut self.w, &mut self.z)
    }

    pub fn into_parts(self) -> (Array2<f64>, Array2<f64>) {
        (self.w, self.z)
    }

    pub fn rank(&self) -> usize {
        self.w.ncols()
    }

    /// Shape of the reconstruction `WZ`.
    pub fn output_dim(&self) -> (usize, usize) {
        (self.w.nrows(), self.z.ncols())
    }
}

/// The product `WZ`.
pub fn reconstruct(f: &FactorPair) -> Array2<f64> {
    f.w.dot(&f.z)
}

/// Sum of squared residuals over observed cells: `||(WZ - A) ∘ O||²`.
pub fn masked_sse(a: &ObservedMatrix, pred: &Array2<f64>) -> Result<f64> {
    if a.dim() != pred.dim() {
        return Err(Error::dims(a.dim(), pred.dim()));
    }
    let mut sse = 0.0;
    Zip::from(&a.values)
        .and(&a.mask)
        .and(pred)
        .for_each(|&v, &seen, &p| {
            if seen {
                let d = v - p;
                sse += d * d;
            }
        });
    Ok(sse)
}

/// [`masked_sse`] divided by the number of observed cells.
pub fn masked_mse(a: &ObservedMatrix, pred: &Array2<f64>) -> Result<f64> {
    if a.observed_count() == 0 {
        return Err(Error::EmptyMask);
    }
    Ok(masked_sse(a, pred)? / a.observed_count() as f64)
}
