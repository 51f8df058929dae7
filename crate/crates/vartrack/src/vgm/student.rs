//! Multivariate Student-t mixtures with exact marginalization and
//! conditioning.
//!
//! The predictive density of the fitted variational mixture is a mixture of
//! Student-t components. Tracking needs two operations on it over and over:
//! dropping dimensions (marginals are again Student-t with the same dof) and
//! fixing dimensions to observed values (conditionals are Student-t with dof
//! increased by the number of observed dimensions, partitioned-matrix
//! location and scale, and component weights reweighted by each component's
//! marginal density at the observed values). Both follow the standard
//! multivariate-t identities.

use nalgebra::{Cholesky, DMatrix, DVector};

use crate::error::{Error, Result};
use crate::math::{ln_gamma, log_sum_exp};

/// One Student-t component, parameterized by a precision matrix (the inverse
/// of the scale matrix, not the covariance).
#[derive(Debug, Clone, PartialEq)]
pub struct StudentComponent {
    pub weight: f64,
    pub location: DVector<f64>,
    pub precision: DMatrix<f64>,
    pub dof: f64,
}

impl StudentComponent {
    /// Log density at `x`.
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let p = self.location.len() as f64;
        let delta = x - &self.location;
        let maha = (&self.precision * &delta).dot(&delta);
        let half_ln_det = Cholesky::new(self.precision.clone())
            .map(|ch| ch.l().diagonal().iter().map(|d| d.ln()).sum::<f64>())
            .unwrap_or(f64::NEG_INFINITY);
        ln_gamma(0.5 * (self.dof + p)) - ln_gamma(0.5 * self.dof)
            - 0.5 * p * (self.dof * std::f64::consts::PI).ln()
            + half_ln_det
            - 0.5 * (self.dof + p) * (maha / self.dof).ln_1p()
    }
}

/// A normalized mixture of Student-t components.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentMixture {
    components: Vec<StudentComponent>,
}

impl StudentMixture {
    /// Build a mixture, normalizing the weights. All components must share
    /// one dimension, have positive dof, and carry positive-definite
    /// precision matrices.
    pub fn new(mut components: Vec<StudentComponent>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::EmptyInput("mixture components"));
        }
        let dim = components[0].location.len();
        let mut total = 0.0;
        for c in &components {
            if c.location.len() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: c.location.len() });
            }
            if c.precision.nrows() != dim || c.precision.ncols() != dim {
                return Err(Error::DimensionMismatch { expected: dim, got: c.precision.nrows() });
            }
            if c.dof <= 0.0 || !c.dof.is_finite() {
                return Err(Error::InvalidDof(c.dof));
            }
            if Cholesky::new(c.precision.clone()).is_none() {
                return Err(Error::NotPositiveDefinite);
            }
            if c.weight < 0.0 || !c.weight.is_finite() {
                return Err(Error::Format(format!("invalid mixture weight {}", c.weight)));
            }
            total += c.weight;
        }
        if total <= 0.0 {
            return Err(Error::Format("mixture weights sum to zero".into()));
        }
        for c in &mut components {
            c.weight /= total;
        }
        Ok(StudentMixture { components })
    }

    pub fn dim(&self) -> usize {
        self.components[0].location.len()
    }

    pub fn components(&self) -> &[StudentComponent] {
        &self.components
    }

    /// Log density of the mixture at `x`.
    pub fn log_density(&self, x: &DVector<f64>) -> f64 {
        let terms: Vec<f64> = self
            .components
            .iter()
            .map(|c| c.weight.ln() + c.log_density(x))
            .collect();
        log_sum_exp(&terms)
    }

    pub fn density(&self, x: &DVector<f64>) -> f64 {
        self.log_density(x).exp()
    }

    /// Keep only the listed dimensions; weights and dof are unchanged, the
    /// new scale matrix is the corresponding sub-block of the old one.
    pub fn marginalize(&self, keep_dims: &[usize]) -> Result<StudentMixture> {
        let dim = self.dim();
        check_dims(keep_dims, dim)?;
        let comps = self
            .components
            .iter()
            .map(|c| {
                let sigma = invert_spd(&c.precision)?;
                let sub = submatrix(&sigma, keep_dims, keep_dims);
                let precision = invert_spd(&sub)?;
                Ok(StudentComponent {
                    weight: c.weight,
                    location: subvector(&c.location, keep_dims),
                    precision,
                    dof: c.dof,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        StudentMixture::new(comps)
    }

    /// Condition the mixture on `observed_dims` taking `observed_values`.
    /// The free dimensions keep their original relative order. Component
    /// weights are reweighted by each component's marginal density at the
    /// observed values; dof grows by the number of observed dimensions.
    pub fn condition(
        &self,
        observed_dims: &[usize],
        observed_values: &[f64],
    ) -> Result<StudentMixture> {
        let dim = self.dim();
        check_dims(observed_dims, dim)?;
        if observed_dims.len() != observed_values.len() {
            return Err(Error::DimensionMismatch {
                expected: observed_dims.len(),
                got: observed_values.len(),
            });
        }
        if observed_dims.len() == dim {
            return Err(Error::EmptyInput("free dimensions"));
        }
        let free_dims: Vec<usize> =
            (0..dim).filter(|i| !observed_dims.contains(i)).collect();
        let k = observed_dims.len() as f64;
        let values = DVector::from_row_slice(observed_values);

        let mut comps = Vec::with_capacity(self.components.len());
        let mut log_weights = Vec::with_capacity(self.components.len());
        for c in &self.components {
            let sigma = invert_spd(&c.precision)?;
            let sigma_aa = submatrix(&sigma, &free_dims, &free_dims);
            let sigma_ab = submatrix(&sigma, &free_dims, observed_dims);
            let sigma_bb = submatrix(&sigma, observed_dims, observed_dims);
            let chol_bb =
                Cholesky::new(sigma_bb.clone()).ok_or(Error::NotPositiveDefinite)?;
            let delta = &values - subvector(&c.location, observed_dims);
            let solved = chol_bb.solve(&delta);
            let maha_b = solved.dot(&delta);
            let gain = &sigma_ab * chol_bb.inverse();
            let location = subvector(&c.location, &free_dims) + &gain * &delta;
            let schur = &sigma_aa - &gain * sigma_ab.transpose();
            let scale = symmetrize(&schur) * ((c.dof + maha_b) / (c.dof + k));
            let precision = invert_spd(&scale)?;

            // marginal Student-t log density over the observed block
            let pb = observed_dims.len() as f64;
            let half_ln_det_bb =
                chol_bb.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
            let lmarg = ln_gamma(0.5 * (c.dof + pb)) - ln_gamma(0.5 * c.dof)
                - 0.5 * pb * (c.dof * std::f64::consts::PI).ln()
                - half_ln_det_bb
                - 0.5 * (c.dof + pb) * (maha_b / c.dof).ln_1p();

            log_weights.push(c.weight.ln() + lmarg);
            comps.push(StudentComponent {
                weight: 0.0,
                location,
                precision,
                dof: c.dof + k,
            });
        }
        let total = log_sum_exp(&log_weights);
        if total == f64::NEG_INFINITY {
            return Err(Error::ZeroMarginal);
        }
        for (c, lw) in comps.iter_mut().zip(&log_weights) {
            c.weight = (lw - total).exp();
        }
        StudentMixture::new(comps)
    }
}

fn check_dims(dims: &[usize], dim: usize) -> Result<()> {
    if dims.is_empty() {
        return Err(Error::EmptyInput("dimension list"));
    }
    for (i, &d) in dims.iter().enumerate() {
        if d >= dim {
            return Err(Error::DimensionMismatch { expected: dim, got: d });
        }
        if dims[..i].contains(&d) {
            return Err(Error::Format(format!("duplicate dimension index {d}")));
        }
    }
    Ok(())
}

fn subvector(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_fn(idx.len(), |i, _| v[idx[i]])
}

fn submatrix(m: &DMatrix<f64>, rows: &[usize], cols: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(rows.len(), cols.len(), |i, j| m[(rows[i], cols[j])])
}

fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

fn invert_spd(m: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    Cholesky::new(symmetrize(m))
        .map(|ch| ch.inverse())
        .ok_or(Error::NotPositiveDefinite)
}
