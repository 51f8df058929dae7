//! Variational Bayesian Gaussian-mixture learning.
//!
//! A mixture with a Dirichlet prior on the weights and Gaussian-Wishart
//! priors on the component means and precisions is fitted by coordinate
//! ascent on the evidence lower bound: the responsibility update uses the
//! expected log weights and expected log densities under the current
//! parameter posteriors, the parameter update absorbs the responsibility
//! weighted data statistics back into the conjugate posteriors. Surplus
//! components lose their data during the ascent and keep essentially their
//! prior weight, which is how the model selects its effective complexity;
//! [`VgmModel::prune`] then removes them.
//!
//! The exact predictive density of the fitted model is a Student-t mixture
//! ([`VgmModel::predictive`], [`StudentMixture`]).

mod student;

pub use student::{StudentComponent, StudentMixture};

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::prelude::*;
use rand_chacha::ChaCha12Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::math::{digamma, ln_gamma, ln_multigamma, log_sum_exp};

/// One reduced, labeled radar detection in the representation the mixture is
/// learned in: normalized object-frame position, Doppler error, and aspect
/// angle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainingPoint {
    pub zx: f64,
    pub zy: f64,
    pub zd: f64,
    pub aspect: f64,
}

impl TrainingPoint {
    pub fn to_vector(self) -> DVector<f64> {
        DVector::from_vec(vec![self.zx, self.zy, self.zd, self.aspect])
    }
}

/// Prior hyperparameters of the variational mixture.
#[derive(Debug, Clone, PartialEq)]
pub struct Hyperparameters {
    /// Number of mixture components the ascent starts with.
    pub c: usize,
    /// Dirichlet concentration per component.
    pub rho0: f64,
    /// Scale of the Gaussian prior precision on each component mean.
    pub beta0: f64,
    /// Wishart degrees of freedom; must exceed dim − 1.
    pub nu0: f64,
    /// Prior component mean.
    pub gamma0: DVector<f64>,
    /// Wishart scale matrix.
    pub v0: DMatrix<f64>,
}

impl Hyperparameters {
    /// Broad defaults for `dim`-dimensional data: unit concentration and
    /// mean-precision scale, dof dim + 1, zero prior mean, identity scale.
    pub fn new(c: usize, dim: usize) -> Self {
        Hyperparameters {
            c,
            rho0: 1.0,
            beta0: 1.0,
            nu0: dim as f64 + 1.0,
            gamma0: DVector::zeros(dim),
            v0: DMatrix::identity(dim, dim),
        }
    }

    /// Defaults with the prior mean set to the data mean.
    pub fn from_data(c: usize, data: &[DVector<f64>]) -> Result<Self> {
        if data.is_empty() {
            return Err(Error::EmptyInput("training data"));
        }
        let dim = data[0].len();
        let mut hp = Hyperparameters::new(c, dim);
        let mut mean = DVector::zeros(dim);
        for z in data {
            mean += z;
        }
        hp.gamma0 = mean / data.len() as f64;
        Ok(hp)
    }

    pub fn dim(&self) -> usize {
        self.gamma0.len()
    }

    fn validate(&self) -> Result<()> {
        let dim = self.dim();
        if self.c == 0 {
            return Err(Error::EmptyInput("component count"));
        }
        if !(self.rho0 > 0.0) || !(self.beta0 > 0.0) {
            return Err(Error::Format("rho0 and beta0 must be positive".into()));
        }
        if !(self.nu0 > dim as f64 - 1.0) {
            return Err(Error::InvalidDof(self.nu0));
        }
        if self.v0.nrows() != dim || self.v0.ncols() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: self.v0.nrows() });
        }
        if Cholesky::new(self.v0.clone()).is_none() {
            return Err(Error::NotPositiveDefinite);
        }
        Ok(())
    }
}

/// Posterior parameters of one mixture component.
#[derive(Debug, Clone, PartialEq)]
pub struct ComponentPosterior {
    pub rho: f64,
    pub beta: f64,
    pub nu: f64,
    pub gamma: DVector<f64>,
    /// Wishart scale matrix V; the expected precision is nu · V.
    pub v: DMatrix<f64>,
}

/// A fitted variational mixture: the ordered component posteriors.
#[derive(Debug, Clone, PartialEq)]
pub struct VgmModel {
    pub dim: usize,
    pub components: Vec<ComponentPosterior>,
}

/// Posterior assignment probabilities, one row per data point.
#[derive(Debug, Clone)]
pub struct Responsibilities(pub DMatrix<f64>);

/// Knobs of the coordinate ascent.
#[derive(Debug, Clone, Copy)]
pub struct FitOptions {
    pub max_iters: usize,
    /// Relative change of the lower bound below which the fit stops.
    pub elbo_tol: f64,
    /// Seed for the k-means++ responsibility initialization.
    pub seed: u64,
}

impl Default for FitOptions {
    fn default() -> Self {
        FitOptions { max_iters: 500, elbo_tol: 1e-8, seed: 0 }
    }
}

/// Fit the variational mixture. Returns the model, the final
/// responsibilities, and the lower-bound trace, one entry per iteration.
/// The trace is non-decreasing up to round-off; the fit is deterministic
/// given the data order, hyperparameters, and seed.
pub fn fit(
    data: &[DVector<f64>],
    hp: &Hyperparameters,
    opts: &FitOptions,
) -> Result<(VgmModel, Responsibilities, Vec<f64>)> {
    hp.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyInput("training data"));
    }
    let dim = hp.dim();
    for z in data {
        if z.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, got: z.len() });
        }
    }
    let m = data.len();
    let c = hp.c;

    let mut rng = ChaCha12Rng::seed_from_u64(opts.seed);
    let assign = kmeans_pp_assign(data, c, &mut rng);
    let mut resp = DMatrix::zeros(m, c);
    for (i, &j) in assign.iter().enumerate() {
        resp[(i, j)] = 1.0;
    }

    let mut trace: Vec<f64> = Vec::new();
    let mut model = m_step(data, &resp, hp)?;
    loop {
        e_step(data, &model, &mut resp);
        let bound = elbo(&model, &Responsibilities(resp.clone()), data, hp)?;
        let done = match trace.last() {
            Some(&prev) => (bound - prev).abs() <= opts.elbo_tol * bound.abs().max(1.0),
            None => false,
        };
        trace.push(bound);
        if done || trace.len() >= opts.max_iters {
            break;
        }
        model = m_step(data, &resp, hp)?;
    }
    Ok((model, Responsibilities(resp), trace))
}

/// Responsibility-weighted data statistics per component.
struct SuffStats {
    n: Vec<f64>,
    xbar: Vec<DVector<f64>>,
    s: Vec<DMatrix<f64>>,
}

fn collect_stats(data: &[DVector<f64>], resp: &DMatrix<f64>) -> SuffStats {
    let (m, c) = resp.shape();
    let dim = data[0].len();
    let mut n = vec![0.0; c];
    let mut xsum = vec![DVector::zeros(dim); c];
    for i in 0..m {
        for j in 0..c {
            let r = resp[(i, j)];
            if r > 0.0 {
                n[j] += r;
                xsum[j].axpy(r, &data[i], 1.0);
            }
        }
    }
    let xbar: Vec<DVector<f64>> = (0..c)
        .map(|j| if n[j] > 0.0 { &xsum[j] / n[j] } else { DVector::zeros(dim) })
        .collect();
    let mut s = vec![DMatrix::zeros(dim, dim); c];
    let mut delta = DVector::zeros(dim);
    for i in 0..m {
        for j in 0..c {
            let r = resp[(i, j)];
            if r > 0.0 {
                delta.copy_from(&data[i]);
                delta -= &xbar[j];
                s[j].ger(r, &delta, &delta, 1.0);
            }
        }
    }
    for j in 0..c {
        if n[j] > 0.0 {
            s[j] /= n[j];
        }
    }
    SuffStats { n, xbar, s }
}

fn m_step(data: &[DVector<f64>], resp: &DMatrix<f64>, hp: &Hyperparameters) -> Result<VgmModel> {
    let dim = hp.dim();
    let stats = collect_stats(data, resp);
    let v0_inv = Cholesky::new(hp.v0.clone())
        .ok_or(Error::NotPositiveDefinite)?
        .inverse();
    let mut components = Vec::with_capacity(hp.c);
    for j in 0..hp.c {
        let n = stats.n[j];
        let beta = hp.beta0 + n;
        let gamma = (&hp.gamma0 * hp.beta0 + &stats.xbar[j] * n) / beta;
        let mut v_inv = v0_inv.clone();
        if n > 0.0 {
            v_inv += &stats.s[j] * n;
            let d0 = &stats.xbar[j] - &hp.gamma0;
            v_inv.ger(hp.beta0 * n / (hp.beta0 + n), &d0, &d0, 1.0);
        }
        let v_inv = (&v_inv + v_inv.transpose()) * 0.5;
        let chol = match Cholesky::new(v_inv.clone()) {
            Some(ch) => ch,
            None => {
                log::warn!("scale update lost positive definiteness, jittering");
                let jittered = v_inv + DMatrix::identity(dim, dim) * 1e-9;
                Cholesky::new(jittered).ok_or(Error::NotPositiveDefinite)?
            }
        };
        components.push(ComponentPosterior {
            rho: hp.rho0 + n,
            beta,
            nu: hp.nu0 + n,
            gamma,
            v: chol.inverse(),
        });
    }
    Ok(VgmModel { dim, components })
}

/// Per-component quantities the responsibility step and the bound share.
struct ExpectedLogs {
    ln_w: Vec<f64>,
    ln_det_lambda: Vec<f64>,
    ln_det_v: Vec<f64>,
}

fn expected_logs(model: &VgmModel) -> Result<ExpectedLogs> {
    let p = model.dim as f64;
    let rho_sum: f64 = model.components.iter().map(|c| c.rho).sum();
    let psi_sum = digamma(rho_sum);
    let mut ln_w = Vec::with_capacity(model.components.len());
    let mut ln_det_lambda = Vec::with_capacity(model.components.len());
    let mut ln_det_v = Vec::with_capacity(model.components.len());
    for comp in &model.components {
        ln_w.push(digamma(comp.rho) - psi_sum);
        let chol = Cholesky::new(comp.v.clone()).ok_or(Error::NotPositiveDefinite)?;
        let ld: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
        ln_det_v.push(ld);
        let mut acc = ld + p * 2.0f64.ln();
        for i in 1..=model.dim {
            acc += digamma(0.5 * (comp.nu + 1.0 - i as f64));
        }
        ln_det_lambda.push(acc);
    }
    Ok(ExpectedLogs { ln_w, ln_det_lambda, ln_det_v })
}

fn e_step(data: &[DVector<f64>], model: &VgmModel, resp: &mut DMatrix<f64>) {
    let logs = expected_logs(model).expect("posterior scale stays positive definite");
    let p = model.dim as f64;
    let c = model.components.len();
    let consts: Vec<f64> = (0..c)
        .map(|j| {
            let comp = &model.components[j];
            logs.ln_w[j] + 0.5 * logs.ln_det_lambda[j]
                - 0.5 * p * (2.0 * std::f64::consts::PI).ln()
                - 0.5 * p / comp.beta
        })
        .collect();
    let mut row = vec![0.0; c];
    let mut delta = DVector::zeros(model.dim);
    for (i, z) in data.iter().enumerate() {
        for j in 0..c {
            let comp = &model.components[j];
            delta.copy_from(z);
            delta -= &comp.gamma;
            let quad = (&comp.v * &delta).dot(&delta);
            row[j] = consts[j] - 0.5 * comp.nu * quad;
        }
        let norm = log_sum_exp(&row);
        let mut sum = 0.0;
        for j in 0..c {
            let mut r = (row[j] - norm).exp();
            if r < 1e-300 {
                r = 0.0;
            }
            row[j] = r;
            sum += r;
        }
        for j in 0..c {
            resp[(i, j)] = row[j] / sum;
        }
    }
}

/// Evaluate the variational lower bound for a consistent (model,
/// responsibilities) pair.
pub fn elbo(
    model: &VgmModel,
    resp: &Responsibilities,
    data: &[DVector<f64>],
    hp: &Hyperparameters,
) -> Result<f64> {
    let resp = &resp.0;
    let p = model.dim as f64;
    let c = model.components.len();
    let stats = collect_stats(data, resp);
    let logs = expected_logs(model)?;
    let v0_chol = Cholesky::new(hp.v0.clone()).ok_or(Error::NotPositiveDefinite)?;
    let v0_inv = v0_chol.inverse();
    let ln_det_v0: f64 = 2.0 * v0_chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();

    let ln_b = |ln_det_v: f64, nu: f64| {
        -0.5 * nu * ln_det_v - 0.5 * nu * p * 2.0f64.ln() - ln_multigamma(model.dim, 0.5 * nu)
    };

    let mut bound = 0.0;
    // expected complete-data log likelihood and weight-prior cross terms
    for j in 0..c {
        let comp = &model.components[j];
        let n = stats.n[j];
        if n > 0.0 {
            let tr_sv = (&stats.s[j] * &comp.v).trace();
            let dm = &stats.xbar[j] - &comp.gamma;
            let quad = (&comp.v * &dm).dot(&dm);
            bound += 0.5
                * n
                * (logs.ln_det_lambda[j]
                    - p / comp.beta
                    - comp.nu * tr_sv
                    - comp.nu * quad
                    - p * (2.0 * std::f64::consts::PI).ln());
        }
        bound += n * logs.ln_w[j];
    }
    // Dirichlet prior minus its variational posterior
    let rho_sum: f64 = model.components.iter().map(|comp| comp.rho).sum();
    let ln_c_prior = ln_gamma(hp.rho0 * c as f64) - c as f64 * ln_gamma(hp.rho0);
    let ln_c_post =
        ln_gamma(rho_sum) - model.components.iter().map(|comp| ln_gamma(comp.rho)).sum::<f64>();
    bound += ln_c_prior;
    bound -= ln_c_post;
    for j in 0..c {
        bound += (hp.rho0 - model.components[j].rho) * logs.ln_w[j];
    }
    // Gaussian-Wishart prior minus its variational posterior
    for j in 0..c {
        let comp = &model.components[j];
        let dg = &comp.gamma - &hp.gamma0;
        let quad = (&comp.v * &dg).dot(&dg);
        bound += 0.5
            * (p * (hp.beta0 / comp.beta).ln() - p * hp.beta0 / comp.beta + p
                - hp.beta0 * comp.nu * quad);
        bound += ln_b(ln_det_v0, hp.nu0) - ln_b(logs.ln_det_v[j], comp.nu);
        bound += 0.5 * (hp.nu0 - comp.nu) * logs.ln_det_lambda[j];
        bound += 0.5 * comp.nu * (p - (&v0_inv * &comp.v).trace());
    }
    // assignment entropy
    let (m, _) = resp.shape();
    for i in 0..m {
        for j in 0..c {
            let r = resp[(i, j)];
            if r > 0.0 {
                bound -= r * r.ln();
            }
        }
    }
    Ok(bound)
}

impl VgmModel {
    /// Mixture weights normalized over the current components.
    pub fn normalized_weights(&self) -> Vec<f64> {
        let total: f64 = self.components.iter().map(|c| c.rho).sum();
        self.components.iter().map(|c| c.rho / total).collect()
    }

    /// Drop components whose normalized weight falls below `threshold`.
    /// The surviving rho values are kept as they are; normalization happens
    /// wherever weights are consumed.
    pub fn prune(&self, threshold: f64) -> Result<VgmModel> {
        let weights = self.normalized_weights();
        let components: Vec<ComponentPosterior> = self
            .components
            .iter()
            .zip(&weights)
            .filter(|(_, &w)| w >= threshold)
            .map(|(c, _)| c.clone())
            .collect();
        if components.is_empty() {
            return Err(Error::AllComponentsPruned);
        }
        Ok(VgmModel { dim: self.dim, components })
    }

    /// The exact posterior predictive of the fitted model: a Student-t
    /// mixture with per-component dof nu + 1 − dim and precision
    /// (dof · beta) / (1 + beta) · V.
    pub fn predictive(&self) -> Result<StudentMixture> {
        let p = self.dim as f64;
        let comps = self
            .components
            .iter()
            .map(|c| {
                let dof = c.nu + 1.0 - p;
                if dof <= 0.0 {
                    return Err(Error::InvalidDof(dof));
                }
                Ok(StudentComponent {
                    weight: c.rho,
                    location: c.gamma.clone(),
                    precision: &c.v * (dof * c.beta / (1.0 + c.beta)),
                    dof,
                })
            })
            .collect::<Result<Vec<_>>>()?;
        StudentMixture::new(comps)
    }
}

fn kmeans_pp_assign(data: &[DVector<f64>], c: usize, rng: &mut impl Rng) -> Vec<usize> {
    let m = data.len();
    let k = c.min(m);
    let mut centers: Vec<usize> = Vec::with_capacity(k);
    centers.push(rng.gen_range(0..m));
    let mut min_d2: Vec<f64> = data
        .iter()
        .map(|z| (z - &data[centers[0]]).norm_squared())
        .collect();
    while centers.len() < k {
        let total: f64 = min_d2.iter().sum();
        let next = if total > 0.0 {
            let mut u = rng.gen_range(0.0..total);
            let mut pick = m - 1;
            for (i, &d2) in min_d2.iter().enumerate() {
                if u < d2 {
                    pick = i;
                    break;
                }
                u -= d2;
            }
            pick
        } else {
            rng.gen_range(0..m)
        };
        centers.push(next);
        for (i, z) in data.iter().enumerate() {
            let d2 = (z - &data[next]).norm_squared();
            if d2 < min_d2[i] {
                min_d2[i] = d2;
            }
        }
    }
    data.iter()
        .map(|z| {
            let mut best = 0;
            let mut best_d2 = f64::INFINITY;
            for (j, &ci) in centers.iter().enumerate() {
                let d2 = (z - &data[ci]).norm_squared();
                if d2 < best_d2 {
                    best_d2 = d2;
                    best = j;
                }
            }
            best
        })
        .collect()
}

// ---------------------------------------------------------------------------
// model file format

impl VgmModel {
    /// Serialize to the published JSON model format. Numbers carry 17
    /// significant digits so a round trip reproduces every f64 bit-exactly.
    pub fn to_json_string(&self) -> String {
        let mut out = String::new();
        out.push_str("{\n");
        out.push_str(&format!("  \"dim\": {},\n", self.dim));
        out.push_str("  \"components\": [\n");
        for (i, c) in self.components.iter().enumerate() {
            out.push_str("    {");
            out.push_str(&format!("\"rho\": {}, ", fmt_f64(c.rho)));
            out.push_str(&format!("\"beta\": {}, ", fmt_f64(c.beta)));
            out.push_str(&format!("\"nu\": {}, ", fmt_f64(c.nu)));
            let gamma: Vec<String> = c.gamma.iter().map(|&x| fmt_f64(x)).collect();
            out.push_str(&format!("\"gamma\": [{}], ", gamma.join(", ")));
            let rows: Vec<String> = (0..self.dim)
                .map(|r| {
                    let row: Vec<String> =
                        (0..self.dim).map(|cc| fmt_f64(c.v[(r, cc)])).collect();
                    format!("[{}]", row.join(", "))
                })
                .collect();
            out.push_str(&format!("\"V\": [{}]", rows.join(", ")));
            out.push_str(if i + 1 < self.components.len() { "},\n" } else { "}\n" });
        }
        out.push_str("  ]\n}\n");
        out
    }

    pub fn from_json_str(s: &str) -> Result<VgmModel> {
        #[derive(Deserialize)]
        struct CompFile {
            rho: f64,
            beta: f64,
            nu: f64,
            gamma: Vec<f64>,
            #[serde(rename = "V")]
            v: Vec<Vec<f64>>,
        }
        #[derive(Deserialize)]
        struct ModelFile {
            dim: usize,
            components: Vec<CompFile>,
        }
        let file: ModelFile = serde_json::from_str(s)?;
        let mut components = Vec::with_capacity(file.components.len());
        for c in file.components {
            if c.gamma.len() != file.dim || c.v.len() != file.dim {
                return Err(Error::DimensionMismatch { expected: file.dim, got: c.gamma.len() });
            }
            for row in &c.v {
                if row.len() != file.dim {
                    return Err(Error::DimensionMismatch { expected: file.dim, got: row.len() });
                }
            }
            components.push(ComponentPosterior {
                rho: c.rho,
                beta: c.beta,
                nu: c.nu,
                gamma: DVector::from_vec(c.gamma),
                v: DMatrix::from_fn(file.dim, file.dim, |r, cc| c.v[r][cc]),
            });
        }
        if components.is_empty() {
            return Err(Error::EmptyInput("model components"));
        }
        Ok(VgmModel { dim: file.dim, components })
    }
}

fn fmt_f64(x: f64) -> String {
    format!("{:.16e}", x)
}
