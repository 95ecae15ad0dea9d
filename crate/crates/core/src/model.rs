//! Likelihood, priors, conditional posteriors, and closed-form estimators.
//!
//! Everything here is a pure function of a [`RiskSummary`], a [`ModelState`],
//! and prior hyperparameters. Log posteriors targeted by Metropolis steps are
//! computed up to additive constants that do not depend on the sampled block,
//! so acceptance ratios are exact; the convention per function is noted on
//! its doc comment.

use statrs::function::gamma::ln_gamma;
use thiserror::Error;

use crate::riskset::{PartitionGrid, RiskSummary};
use crate::util::dot;

pub use crate::riskset::Block;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("gap correlation is defined only for nu > 2, got {0}")]
    CorrelationUndefined(f64),
    #[error("prior dimension mismatch: {0}")]
    Dimension(String),
    #[error("invalid prior: {0}")]
    InvalidPrior(String),
}

/// Independent-increment gamma prior on a cumulative hazard over a grid:
/// increment `j` has shape `c * ref_inc[j]` and rate `c`.
#[derive(Debug, Clone)]
pub struct GammaProcessPrior {
    pub c: f64,
    pub ref_inc: Vec<f64>,
}

impl GammaProcessPrior {
    /// Evaluates a reference cumulative hazard at the grid cuts and stores
    /// its increments.
    pub fn from_fn(
        c: f64,
        grid: &PartitionGrid,
        reference: impl Fn(f64) -> f64,
    ) -> Result<Self, ModelError> {
        if !(c > 0.0) || !c.is_finite() {
            return Err(ModelError::InvalidPrior(format!(
                "precision c must be positive and finite, got {c}"
            )));
        }
        let cuts = grid.cuts();
        let mut ref_inc = Vec::with_capacity(grid.m());
        for j in 0..grid.m() {
            let inc = reference(cuts[j + 1]) - reference(cuts[j]);
            if !(inc >= 0.0) || !inc.is_finite() {
                return Err(ModelError::InvalidPrior(format!(
                    "reference increment over ({}, {}] is {inc}",
                    cuts[j],
                    cuts[j + 1]
                )));
            }
            ref_inc.push(inc);
        }
        Ok(GammaProcessPrior { c, ref_inc })
    }
}

/// Prior on the frailty parameter.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NuPrior {
    Gamma { shape: f64, rate: f64 },
    LogNormal { mu: f64, sigma2: f64 },
}

impl NuPrior {
    /// Log density at `nu`, including the normalizing constant (constants
    /// cancel in Metropolis ratios either way).
    pub fn log_density(&self, nu: f64) -> f64 {
        match *self {
            NuPrior::Gamma { shape, rate } => {
                shape * rate.ln() - ln_gamma(shape) + (shape - 1.0) * nu.ln() - rate * nu
            }
            NuPrior::LogNormal { mu, sigma2 } => {
                let z = nu.ln() - mu;
                -nu.ln() - 0.5 * (sigma2 * 2.0 * std::f64::consts::PI).ln()
                    - z * z / (2.0 * sigma2)
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            NuPrior::Gamma { shape, rate } => shape / rate,
            NuPrior::LogNormal { mu, sigma2 } => (mu + sigma2 / 2.0).exp(),
        }
    }

    /// Log-normal prior with the same mean and variance as `Gamma(shape, rate)`.
    pub fn lognormal_matched(shape: f64, rate: f64) -> NuPrior {
        let mean = shape / rate;
        let var = shape / (rate * rate);
        let sigma2 = (1.0 + var / (mean * mean)).ln();
        NuPrior::LogNormal {
            mu: mean.ln() - sigma2 / 2.0,
            sigma2,
        }
    }
}

/// Multivariate normal prior for one regression block.
#[derive(Debug, Clone)]
pub struct MvnPrior {
    pub mean: Vec<f64>,
    cov: Vec<f64>,
    precision: Vec<f64>,
}

impl MvnPrior {
    pub fn new(mean: Vec<f64>, cov: Vec<f64>) -> Result<Self, ModelError> {
        let p = mean.len();
        if cov.len() != p * p {
            return Err(ModelError::Dimension(format!(
                "covariance has {} entries for dimension {p}",
                cov.len()
            )));
        }
        for r in 0..p {
            for c in 0..r {
                if (cov[r * p + c] - cov[c * p + r]).abs() > 1e-12 {
                    return Err(ModelError::InvalidPrior("covariance not symmetric".into()));
                }
            }
        }
        let precision = crate::util::invert_dense(&cov, p)
            .ok_or_else(|| ModelError::InvalidPrior("covariance not invertible".into()))?;
        Ok(MvnPrior {
            mean,
            cov,
            precision,
        })
    }

    pub fn diagonal(mean: Vec<f64>, variance: f64) -> Result<Self, ModelError> {
        if !(variance > 0.0) {
            return Err(ModelError::InvalidPrior(format!(
                "variance must be positive, got {variance}"
            )));
        }
        let p = mean.len();
        let mut cov = vec![0.0; p * p];
        for k in 0..p {
            cov[k * p + k] = variance;
        }
        MvnPrior::new(mean, cov)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn covariance(&self) -> &[f64] {
        &self.cov
    }

    /// `-(b - mean)' P (b - mean) / 2`, the log density up to its constant.
    pub fn log_density_unnorm(&self, b: &[f64]) -> f64 {
        let p = self.dim();
        let mut q = 0.0;
        for r in 0..p {
            for c in 0..p {
                q += (b[r] - self.mean[r]) * self.precision[r * p + c] * (b[c] - self.mean[c]);
            }
        }
        -0.5 * q
    }

    /// Gradient of [`Self::log_density_unnorm`].
    pub fn grad_log_density(&self, b: &[f64]) -> Vec<f64> {
        let p = self.dim();
        let mut g = vec![0.0; p];
        for r in 0..p {
            for c in 0..p {
                g[r] -= self.precision[r * p + c] * (b[c] - self.mean[c]);
            }
        }
        g
    }
}

/// Parametric priors: one for the frailty parameter, one MVN block per
/// recurrent type plus one for the terminal event.
#[derive(Debug, Clone)]
pub struct ParamPriors {
    pub nu: NuPrior,
    pub beta: Vec<MvnPrior>,
    pub beta0: MvnPrior,
}

impl ParamPriors {
    pub fn beta_block(&self, block: Block) -> &MvnPrior {
        match block {
            Block::Recurrent(q) => &self.beta[q - 1],
            Block::Terminal => &self.beta0,
        }
    }
}

/// Current values of every sampled quantity.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelState {
    /// Baseline hazard increments per recurrent type (`q_count x m`).
    pub lambda: Vec<Vec<f64>>,
    /// Terminal baseline hazard increments (`m`).
    pub lambda0: Vec<f64>,
    /// Subject frailties (`n`), strictly positive.
    pub w: Vec<f64>,
    /// Frailty parameter, strictly positive.
    pub nu: f64,
    /// Regression vectors per recurrent type (`q_count x p`).
    pub beta: Vec<Vec<f64>>,
    /// Terminal regression vector (`p`).
    pub beta0: Vec<f64>,
}

impl ModelState {
    pub fn lambda_inc(&self, block: Block) -> &[f64] {
        match block {
            Block::Recurrent(q) => &self.lambda[q - 1],
            Block::Terminal => &self.lambda0,
        }
    }

    pub fn lambda_inc_mut(&mut self, block: Block) -> &mut Vec<f64> {
        match block {
            Block::Recurrent(q) => &mut self.lambda[q - 1],
            Block::Terminal => &mut self.lambda0,
        }
    }

    pub fn beta_block(&self, block: Block) -> &[f64] {
        match block {
            Block::Recurrent(q) => &self.beta[q - 1],
            Block::Terminal => &self.beta0,
        }
    }

    pub fn beta_block_mut(&mut self, block: Block) -> &mut Vec<f64> {
        match block {
            Block::Recurrent(q) => &mut self.beta[q - 1],
            Block::Terminal => &mut self.beta0,
        }
    }
}

/// Which frailty values feed the plug-in hazard estimator.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FrailtySource {
    /// Current frailty draws from the state.
    Draws,
    /// Posterior-mean frailties recomputed from the state.
    PosteriorMean,
}

/// Baseline exposure `sum_j Y(t_j) * dLambda_j` for one subject and block,
/// without the covariate factor.
pub fn exposure_base(rs: &RiskSummary, lambda_inc: &[f64], i: usize, block: Block) -> f64 {
    let row = rs.at_risk_row(block, i);
    let mut acc = 0.0;
    for (y, l) in row.iter().zip(lambda_inc) {
        if *y == 0 {
            break; // at-risk is nonincreasing over intervals
        }
        acc += f64::from(*y) * l;
    }
    acc
}

/// Exposure `r = exp(beta' x) * sum_j Y(t_j) * dLambda_j` for one subject.
pub fn exposure_r(rs: &RiskSummary, st: &ModelState, i: usize, block: Block) -> f64 {
    let lp = dot(st.beta_block(block), rs.covariates(i));
    lp.exp() * exposure_base(rs, st.lambda_inc(block), i, block)
}

/// Total exposure over all blocks, `r_{.i} + r_{0i}`.
pub fn exposure_total(rs: &RiskSummary, st: &ModelState, i: usize) -> f64 {
    Block::all(rs.q_count())
        .into_iter()
        .map(|b| exposure_r(rs, st, i, b))
        .sum()
}

/// Log of the complete-data likelihood on the grid: the sum over events of
/// `log(W_i exp(beta'x) Y dLambda)` minus each subject's total frailty-scaled
/// exposure. Returns `-inf` when an event sits in an interval with a zero
/// increment or zero at-risk count.
pub fn log_complete_likelihood(rs: &RiskSummary, st: &ModelState) -> f64 {
    let mut total = 0.0;
    for i in 0..rs.n_subjects() {
        total += subject_log_likelihood(rs, st, i);
    }
    total
}

/// Single-subject contribution; the cohort value is exactly the sum of these.
pub fn subject_log_likelihood(rs: &RiskSummary, st: &ModelState, i: usize) -> f64 {
    let mut acc = 0.0;
    let w = st.w[i];
    for block in Block::all(rs.q_count()) {
        let lp = dot(st.beta_block(block), rs.covariates(i));
        let lambda = st.lambda_inc(block);
        let incs = rs.inc_row(block, i);
        for (j, &d) in incs.iter().enumerate() {
            if d == 0 {
                continue;
            }
            let y = rs.at_risk(block, i, j);
            if y == 0 || !(lambda[j] > 0.0) {
                return f64::NEG_INFINITY;
            }
            acc += f64::from(d) * (w.ln() + lp + f64::from(y).ln() + lambda[j].ln());
        }
        acc -= w * lp.exp() * exposure_base(rs, lambda, i, block);
    }
    acc
}

/// Conditional-posterior Gamma parameters `(shape, rate)` of the hazard
/// increment of `block` over interval `j`: pooled events plus the prior mass
/// against the prior precision plus the frailty-scaled at-risk total.
pub fn lambda_posterior_params(
    rs: &RiskSummary,
    st: &ModelState,
    prior: &GammaProcessPrior,
    block: Block,
    j: usize,
) -> (f64, f64) {
    let shape = f64::from(rs.pooled_inc(block, j)) + prior.c * prior.ref_inc[j];
    let beta = st.beta_block(block);
    let mut rate = prior.c;
    for i in 0..rs.n_subjects() {
        let y = rs.at_risk(block, i, j);
        if y == 0 {
            continue;
        }
        rate += st.w[i] * dot(beta, rs.covariates(i)).exp() * f64::from(y);
    }
    (shape, rate)
}

/// Posterior-mean increments of one block under the integrated-squared-error
/// loss, with frailties taken from the current draws or replaced by their
/// posterior means. Shape-zero intervals yield an increment of exactly 0.
pub fn lambda_bayes_increments(
    rs: &RiskSummary,
    st: &ModelState,
    prior: &GammaProcessPrior,
    block: Block,
    source: FrailtySource,
) -> Vec<f64> {
    let w: Vec<f64> = match source {
        FrailtySource::Draws => st.w.clone(),
        FrailtySource::PosteriorMean => frailty_posterior_means(rs, st),
    };
    let beta = st.beta_block(block);
    let n = rs.n_subjects();
    let ew: Vec<f64> = (0..n)
        .map(|i| w[i] * dot(beta, rs.covariates(i)).exp())
        .collect();
    let mut out = Vec::with_capacity(rs.m());
    for j in 0..rs.m() {
        let shape = f64::from(rs.pooled_inc(block, j)) + prior.c * prior.ref_inc[j];
        if shape == 0.0 {
            out.push(0.0);
            continue;
        }
        let mut rate = prior.c;
        for (i, e) in ew.iter().enumerate() {
            let y = rs.at_risk(block, i, j);
            if y > 0 {
                rate += e * f64::from(y);
            }
        }
        out.push(shape / rate);
    }
    out
}

/// Cumulative Bayes estimate of the baseline hazard of `block` at time `t`:
/// the sum of posterior-mean increments over cuts at or before `t`.
pub fn lambda_bayes_estimate(
    rs: &RiskSummary,
    st: &ModelState,
    prior: &GammaProcessPrior,
    block: Block,
    t: f64,
    source: FrailtySource,
) -> f64 {
    let incs = lambda_bayes_increments(rs, st, prior, block, source);
    cumulative_at(rs.grid(), &incs, t)
}

/// Sum of increments over intervals whose right endpoint is at or before `t`.
pub fn cumulative_at(grid: &PartitionGrid, increments: &[f64], t: f64) -> f64 {
    let mut acc = 0.0;
    for (j, inc) in increments.iter().enumerate() {
        if grid.right(j) > t {
            break;
        }
        acc += inc;
    }
    acc
}

/// Conditional posterior of one frailty: Gamma with shape `N_i + nu` and
/// rate `r_i + nu`.
pub fn frailty_posterior(rs: &RiskSummary, st: &ModelState, i: usize) -> (f64, f64) {
    let shape = f64::from(rs.total_events(i)) + st.nu;
    let rate = exposure_total(rs, st, i) + st.nu;
    (shape, rate)
}

pub fn frailty_posterior_mean(rs: &RiskSummary, st: &ModelState, i: usize) -> f64 {
    let (shape, rate) = frailty_posterior(rs, st, i);
    shape / rate
}

pub fn frailty_posterior_means(rs: &RiskSummary, st: &ModelState) -> Vec<f64> {
    (0..rs.n_subjects())
        .map(|i| frailty_posterior_mean(rs, st, i))
        .collect()
}

/// Log conditional posterior of the frailty parameter at `st.nu` with the
/// frailties integrated out, plus the log prior density. Exact up to terms
/// free of `nu`.
pub fn log_cond_posterior_nu(rs: &RiskSummary, st: &ModelState, priors: &ParamPriors) -> f64 {
    let n = rs.n_subjects();
    let counts: Vec<f64> = (0..n).map(|i| f64::from(rs.total_events(i))).collect();
    let exposures: Vec<f64> = (0..n).map(|i| exposure_total(rs, st, i)).collect();
    nu_log_target(&counts, &exposures, st.nu, &priors.nu)
}

/// Same target as [`log_cond_posterior_nu`] on precomputed per-subject event
/// counts and exposures; the sampler calls this repeatedly per iteration.
pub fn nu_log_target(counts: &[f64], exposures: &[f64], nu: f64, prior: &NuPrior) -> f64 {
    if !(nu > 0.0) || !nu.is_finite() {
        return f64::NEG_INFINITY;
    }
    let ln_nu = nu.ln();
    let ln_gamma_nu = ln_gamma(nu);
    let mut acc = 0.0;
    for (&n_i, &r_i) in counts.iter().zip(exposures) {
        acc += ln_gamma(n_i + nu) - (n_i + nu) * (r_i + nu).ln() + nu * ln_nu - ln_gamma_nu;
    }
    acc + prior.log_density(nu)
}

/// Log conditional posterior of one regression block: the event-weighted
/// linear predictor minus frailty-scaled exposures plus the MVN prior term
/// (up to the MVN normalizing constant).
pub fn log_cond_posterior_beta(
    rs: &RiskSummary,
    st: &ModelState,
    priors: &ParamPriors,
    block: Block,
) -> f64 {
    let beta = st.beta_block(block);
    let mut acc = 0.0;
    for i in 0..rs.n_subjects() {
        let k = f64::from(rs.events(block, i));
        let lp = dot(beta, rs.covariates(i));
        let base = exposure_base(rs, st.lambda_inc(block), i, block);
        acc += k * lp - st.w[i] * lp.exp() * base;
    }
    acc + priors.beta_block(block).log_density_unnorm(beta)
}

/// Analytic gradient of [`log_cond_posterior_beta`] in the block's
/// coefficients.
pub fn beta_score(
    rs: &RiskSummary,
    st: &ModelState,
    priors: &ParamPriors,
    block: Block,
) -> Vec<f64> {
    let beta = st.beta_block(block);
    let p = rs.p();
    let mut g = priors.beta_block(block).grad_log_density(beta);
    for i in 0..rs.n_subjects() {
        let x = rs.covariates(i);
        let k = f64::from(rs.events(block, i));
        let lp = dot(beta, x);
        let base = exposure_base(rs, st.lambda_inc(block), i, block);
        let f = k - st.w[i] * lp.exp() * base;
        for l in 0..p {
            g[l] += f * x[l];
        }
    }
    g
}

/// Marginal gap-time survival under the fitted hazard and frailty parameter:
/// `(nu / (nu + lambda))^nu`, computed via `exp(-nu log1p(lambda/nu))` so the
/// large-`nu` limit `exp(-lambda)` is reached without cancellation.
pub fn survival_estimate(lambda_hat: f64, nu_hat: f64) -> f64 {
    debug_assert!(lambda_hat >= 0.0 && nu_hat > 0.0);
    (-nu_hat * (lambda_hat / nu_hat).ln_1p()).exp()
}

/// Conditional survival given a frailty value and covariates:
/// `exp(-w exp(beta'x) Lambda(t))`.
pub fn conditional_survival(
    t: f64,
    cumulative_hazard: impl Fn(f64) -> f64,
    w: f64,
    beta: &[f64],
    x: &[f64],
) -> f64 {
    debug_assert!(w > 0.0);
    (-w * dot(beta, x).exp() * cumulative_hazard(t)).exp()
}

/// Correlation between two gap times of the same subject under an
/// exponential baseline; defined for `nu > 2` and equal to `1/nu`.
pub fn gap_correlation(nu: f64) -> Result<f64, ModelError> {
    if nu > 2.0 {
        Ok(1.0 / nu)
    } else {
        Err(ModelError::CorrelationUndefined(nu))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::{Cohort, SubjectHistory};
    use crate::riskset::summarize;
    use approx::assert_relative_eq;
    use statrs::function::gamma::digamma;

    fn grid2() -> PartitionGrid {
        PartitionGrid::from_cuts(vec![0.0, 0.5, 1.0]).unwrap()
    }

    fn one_subject_cohort() -> Cohort {
        let s = SubjectHistory::from_gaps("s", vec![0.0], 1.0, None, vec![vec![0.5]]).unwrap();
        Cohort::new(vec![s], 1, 1)
    }

    fn state_for(rs: &RiskSummary, lambda: Vec<Vec<f64>>, lambda0: Vec<f64>) -> ModelState {
        ModelState {
            lambda,
            lambda0,
            w: vec![1.0; rs.n_subjects()],
            nu: 1.0,
            beta: vec![vec![0.0; rs.p()]; rs.q_count()],
            beta0: vec![0.0; rs.p()],
        }
    }

    fn priors_for(rs: &RiskSummary) -> ParamPriors {
        ParamPriors {
            nu: NuPrior::Gamma {
                shape: 2.0,
                rate: 2.0,
            },
            beta: (0..rs.q_count())
                .map(|_| MvnPrior::diagonal(vec![0.0; rs.p()], 1.0).unwrap())
                .collect(),
            beta0: MvnPrior::diagonal(vec![0.0; rs.p()], 1.0).unwrap(),
        }
    }

    #[test]
    fn exposure_direct_case() {
        // beta'x = 0, y = [1, 1], increments [0.1, 0.2] -> 0.3
        let s = SubjectHistory::from_gaps("s", vec![0.0], 1.0, None, vec![vec![]]).unwrap();
        let c = Cohort::new(vec![s], 1, 1);
        let rs = summarize(&c, &grid2()).unwrap();
        // residual = 1.0, so the subject is at risk at both cuts with y = 1
        let st = state_for(&rs, vec![vec![0.1, 0.2]], vec![0.0, 0.0]);
        assert_relative_eq!(exposure_r(&rs, &st, 0, Block::Recurrent(1)), 0.3);
        let zero = state_for(&rs, vec![vec![0.0, 0.0]], vec![0.0, 0.0]);
        assert_relative_eq!(exposure_r(&rs, &zero, 0, Block::Recurrent(1)), 0.0);
    }

    #[test]
    fn exposure_covariate_doubles() {
        let s =
            SubjectHistory::from_gaps("s", vec![1.0], 1.0, None, vec![vec![]]).unwrap();
        let c = Cohort::new(vec![s], 1, 1);
        let rs = summarize(&c, &grid2()).unwrap();
        let mut st = state_for(&rs, vec![vec![0.1, 0.2]], vec![0.0, 0.0]);
        let base = exposure_r(&rs, &st, 0, Block::Recurrent(1));
        st.beta[0][0] = 2.0f64.ln();
        assert_relative_eq!(exposure_r(&rs, &st, 0, Block::Recurrent(1)), 2.0 * base);
    }

    #[test]
    fn log_likelihood_single_event_case() {
        let c = one_subject_cohort();
        let rs = summarize(&c, &grid2()).unwrap();
        // event in interval 1 with y_at = 2 there; W = 1, beta = 0,
        // dLambda_1 = 0.2, exposure r = 2 * 0.2 = 0.4
        let st = state_for(&rs, vec![vec![0.2, 0.0]], vec![0.0, 0.0]);
        let expect = (1.0f64 * 2.0 * 0.2).ln() - 0.4;
        assert_relative_eq!(log_complete_likelihood(&rs, &st), expect, epsilon = 1e-12);
    }

    #[test]
    fn log_likelihood_empty_cohort_is_zero() {
        let c = Cohort::new(vec![], 1, 1);
        let rs = summarize(&c, &grid2()).unwrap();
        let st = state_for(&rs, vec![vec![0.1, 0.1]], vec![0.0, 0.0]);
        assert_eq!(log_complete_likelihood(&rs, &st), 0.0);
    }

    #[test]
    fn log_likelihood_zero_increment_at_event_is_neg_inf() {
        let c = one_subject_cohort();
        let rs = summarize(&c, &grid2()).unwrap();
        let st = state_for(&rs, vec![vec![0.0, 0.1]], vec![0.0, 0.0]);
        assert_eq!(log_complete_likelihood(&rs, &st), f64::NEG_INFINITY);
    }

    #[test]
    fn log_likelihood_frailty_scaling_identity() {
        // Multiplying all W by a factor shifts the log likelihood by
        // (sum N_i) log f - (f - 1) sum_i W_i r_i.
        let s1 = SubjectHistory::from_gaps(
            "a",
            vec![0.5],
            1.0,
            None,
            vec![vec![0.3, 0.4]],
        )
        .unwrap();
        let s2 =
            SubjectHistory::from_gaps("b", vec![-0.2], 0.9, Some(0.7), vec![vec![0.5]]).unwrap();
        let c = Cohort::new(vec![s1, s2], 1, 1);
        let rs = summarize(&c, &PartitionGrid::regular(0.1, 1.0).unwrap()).unwrap();
        let mut st = state_for(&rs, vec![vec![0.05; 10]], vec![0.02; 10]);
        st.beta[0][0] = 0.3;
        st.beta0[0] = -0.1;
        let f = 1.7;
        let base = log_complete_likelihood(&rs, &st);
        let total_events: f64 = (0..rs.n_subjects())
            .map(|i| f64::from(rs.total_events(i)))
            .sum();
        let total_exposure: f64 = (0..rs.n_subjects())
            .map(|i| st.w[i] * exposure_total(&rs, &st, i))
            .sum();
        let mut scaled = st.clone();
        for w in &mut scaled.w {
            *w *= f;
        }
        let got = log_complete_likelihood(&rs, &scaled);
        let expect = base + total_events * f.ln() - (f - 1.0) * total_exposure;
        assert_relative_eq!(got, expect, epsilon = 1e-10);
    }

    #[test]
    fn log_likelihood_decomposes_over_subjects() {
        let s1 = SubjectHistory::from_gaps("a", vec![0.5], 1.0, None, vec![vec![0.3]]).unwrap();
        let s2 = SubjectHistory::from_gaps("b", vec![-1.0], 0.8, Some(0.6), vec![vec![]]).unwrap();
        let grid = PartitionGrid::regular(0.2, 1.0).unwrap();
        let cohort = Cohort::new(vec![s1.clone(), s2.clone()], 1, 1);
        let rs = summarize(&cohort, &grid).unwrap();
        let mut st = state_for(&rs, vec![vec![0.1; 5]], vec![0.05; 5]);
        st.w = vec![0.7, 1.4];
        let whole = log_complete_likelihood(&rs, &st);
        let mut parts = 0.0;
        for (i, s) in [s1, s2].into_iter().enumerate() {
            let c1 = Cohort::new(vec![s], 1, 1);
            let rs1 = summarize(&c1, &grid).unwrap();
            let st1 = ModelState {
                w: vec![st.w[i]],
                ..st.clone()
            };
            parts += log_complete_likelihood(&rs1, &st1);
        }
        assert_eq!(whole, parts);
    }

    #[test]
    fn lambda_posterior_no_data_returns_prior() {
        let c = Cohort::new(vec![], 1, 1);
        let g = grid2();
        let rs = summarize(&c, &g).unwrap();
        let st = state_for(&rs, vec![vec![0.0, 0.0]], vec![0.0, 0.0]);
        let prior = GammaProcessPrior {
            c: 0.1,
            ref_inc: vec![0.05, 0.05],
        };
        let (shape, rate) = lambda_posterior_params(&rs, &st, &prior, Block::Recurrent(1), 0);
        assert_relative_eq!(shape, 0.005);
        assert_relative_eq!(rate, 0.1);
        assert_relative_eq!(shape / rate, 0.05); // posterior mean = prior mean
    }

    #[test]
    fn lambda_posterior_breslow_limit_term() {
        // c -> 0 with 2 pooled events and risk total 10 gives mean 0.2.
        let subjects: Vec<SubjectHistory> = (0..2)
            .map(|k| {
                SubjectHistory::from_gaps(format!("s{k}"), vec![0.0], 5.0, None, vec![vec![0.5]])
                    .unwrap()
            })
            .collect();
        let c = Cohort::new(subjects, 1, 1);
        let g = PartitionGrid::from_cuts(vec![0.0, 0.5]).unwrap();
        let rs = summarize(&c, &g).unwrap();
        // each subject: gap 0.5 >= 0.5 and residual 4.5 >= 0.5 -> y = 2, so
        // scale frailties to make the pooled risk total equal 10
        let mut st = state_for(&rs, vec![vec![0.1]], vec![0.1]);
        st.w = vec![2.5, 2.5];
        let prior = GammaProcessPrior {
            c: 1e-12,
            ref_inc: vec![0.05],
        };
        let (shape, rate) = lambda_posterior_params(&rs, &st, &prior, Block::Recurrent(1), 0);
        assert_relative_eq!(shape / rate, 0.2, epsilon = 1e-9);
    }

    #[test]
    fn lambda_bayes_estimate_monotone_and_zero_at_origin() {
        let c = one_subject_cohort();
        let rs = summarize(&c, &grid2()).unwrap();
        let st = state_for(&rs, vec![vec![0.2, 0.1]], vec![0.1, 0.1]);
        let prior = GammaProcessPrior {
            c: 0.1,
            ref_inc: vec![0.05, 0.05],
        };
        let at = |t: f64| {
            lambda_bayes_estimate(&rs, &st, &prior, Block::Recurrent(1), t, FrailtySource::Draws)
        };
        assert_eq!(at(0.0), 0.0);
        assert!(at(0.5) <= at(1.0));
        assert!(at(0.25) == 0.0); // first cut not yet reached
    }

    #[test]
    fn frailty_posterior_cases() {
        // no events, no exposure: (nu, nu) with mean 1
        let s = SubjectHistory::from_gaps("s", vec![0.0], 1.0, None, vec![vec![]]).unwrap();
        let c = Cohort::new(vec![s], 1, 1);
        let rs = summarize(&c, &grid2()).unwrap();
        let mut st = state_for(&rs, vec![vec![0.0, 0.0]], vec![0.0, 0.0]);
        st.nu = 2.0;
        let (a, b) = frailty_posterior(&rs, &st, 0);
        assert_relative_eq!(a, 2.0);
        assert_relative_eq!(b, 2.0);
        assert_relative_eq!(frailty_posterior_mean(&rs, &st, 0), 1.0);
    }

    #[test]
    fn frailty_posterior_large_nu_shrinks_to_one() {
        let s = SubjectHistory::from_gaps("s", vec![0.0], 1.0, None, vec![vec![0.5]]).unwrap();
        let c = Cohort::new(vec![s], 1, 1);
        let rs = summarize(&c, &grid2()).unwrap();
        let mut st = state_for(&rs, vec![vec![0.3, 0.2]], vec![0.1, 0.1]);
        st.nu = 1e9;
        assert_relative_eq!(frailty_posterior_mean(&rs, &st, 0), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn nu_target_zero_data_reduces_to_prior() {
        // A subject with no events and zero exposure contributes exactly 0.
        let prior = NuPrior::Gamma {
            shape: 2.0,
            rate: 2.0,
        };
        for nu in [0.5, 1.0, 3.0, 17.0] {
            let v = nu_log_target(&[0.0], &[0.0], nu, &prior);
            assert_relative_eq!(v, prior.log_density(nu), epsilon = 1e-12);
        }
    }

    #[test]
    fn gamma_prior_log_density_value() {
        let prior = NuPrior::Gamma {
            shape: 2.0,
            rate: 2.0,
        };
        assert_relative_eq!(prior.log_density(1.0), 4.0f64.ln() - 2.0, epsilon = 1e-12);
    }

    #[test]
    fn nu_target_maximizer_matches_grid_search() {
        let counts = vec![3.0, 1.0, 0.0, 5.0, 2.0];
        let exposures = vec![2.0, 1.3, 0.4, 3.6, 2.2];
        let prior = NuPrior::Gamma {
            shape: 2.0,
            rate: 2.0,
        };
        let f = |nu: f64| nu_log_target(&counts, &exposures, nu, &prior);
        // independent 1-D grid oracle
        let mut best = (f(0.01), 0.01);
        let mut nu = 0.01;
        while nu < 40.0 {
            let v = f(nu);
            if v > best.0 {
                best = (v, nu);
            }
            nu += 0.001;
        }
        // golden-section refinement of the same expression
        let (mut lo, mut hi) = (best.1 - 0.01, best.1 + 0.01);
        for _ in 0..80 {
            let m1 = lo + 0.381_966 * (hi - lo);
            let m2 = hi - 0.381_966 * (hi - lo);
            if f(m1) < f(m2) {
                lo = m1;
            } else {
                hi = m2;
            }
        }
        let refined = 0.5 * (lo + hi);
        assert!((best.1 - refined).abs() < 2e-3, "grid {} vs refined {refined}", best.1);
    }

    #[test]
    fn beta_posterior_flat_cases() {
        let s = SubjectHistory::from_gaps("s", vec![0.0], 1.0, None, vec![vec![]]).unwrap();
        let c = Cohort::new(vec![s], 1, 1);
        let rs = summarize(&c, &grid2()).unwrap();
        let st = state_for(&rs, vec![vec![0.0, 0.0]], vec![0.0, 0.0]);
        let priors = priors_for(&rs);
        // beta = prior mean = 0 and no events, zero increments -> exactly 0
        assert_relative_eq!(
            log_cond_posterior_beta(&rs, &st, &priors, Block::Recurrent(1)),
            0.0
        );
    }

    #[test]
    fn beta_posterior_covariate_free_reduces_to_prior_shape() {
        // all x = 0: data term does not depend on beta
        let subjects: Vec<SubjectHistory> = (0..3)
            .map(|k| {
                SubjectHistory::from_gaps(format!("s{k}"), vec![0.0], 1.0, None, vec![vec![0.5]])
                    .unwrap()
            })
            .collect();
        let c = Cohort::new(subjects, 1, 1);
        let rs = summarize(&c, &grid2()).unwrap();
        let mut st = state_for(&rs, vec![vec![0.2, 0.1]], vec![0.1, 0.1]);
        let priors = priors_for(&rs);
        let at = |b: f64, st: &mut ModelState| {
            st.beta[0][0] = b;
            log_cond_posterior_beta(&rs, st, &priors, Block::Recurrent(1))
        };
        let diff_data = at(1.0, &mut st) - at(0.0, &mut st);
        let prior = &priors.beta[0];
        let diff_prior =
            prior.log_density_unnorm(&[1.0]) - prior.log_density_unnorm(&[0.0]);
        assert_relative_eq!(diff_data, diff_prior, epsilon = 1e-12);
    }

    #[test]
    fn beta_score_matches_central_differences() {
        let subjects: Vec<SubjectHistory> = (0..4)
            .map(|k| {
                let x = vec![f64::from(k % 2), 0.3 * f64::from(k) - 0.5];
                SubjectHistory::from_gaps(
                    format!("s{k}"),
                    x,
                    1.0,
                    if k == 3 { Some(0.9) } else { None },
                    vec![vec![0.4], vec![0.2, 0.3]],
                )
                .unwrap()
            })
            .collect();
        let c = Cohort::new(subjects, 2, 2);
        let rs = summarize(&c, &PartitionGrid::regular(0.1, 1.0).unwrap()).unwrap();
        let mut st = ModelState {
            lambda: vec![vec![0.05; 10], vec![0.04; 10]],
            lambda0: vec![0.02; 10],
            w: vec![0.8, 1.2, 1.0, 0.6],
            nu: 2.0,
            beta: vec![vec![0.2, -0.1], vec![-0.3, 0.4]],
            beta0: vec![0.1, 0.05],
        };
        let priors = ParamPriors {
            nu: NuPrior::Gamma {
                shape: 2.0,
                rate: 2.0,
            },
            beta: vec![
                MvnPrior::diagonal(vec![0.0, 0.0], 1.0).unwrap(),
                MvnPrior::diagonal(vec![0.0, 0.0], 2.0).unwrap(),
            ],
            beta0: MvnPrior::diagonal(vec![0.0, 0.0], 1.0).unwrap(),
        };
        for block in Block::all(2) {
            let analytic = beta_score(&rs, &st, &priors, block);
            let h = 1e-5;
            for l in 0..2 {
                let orig = st.beta_block(block)[l];
                st.beta_block_mut(block)[l] = orig + h;
                let up = log_cond_posterior_beta(&rs, &st, &priors, block);
                st.beta_block_mut(block)[l] = orig - h;
                let dn = log_cond_posterior_beta(&rs, &st, &priors, block);
                st.beta_block_mut(block)[l] = orig;
                let numeric = (up - dn) / (2.0 * h);
                assert_relative_eq!(analytic[l], numeric, max_relative = 1e-6);
            }
        }
    }

    #[test]
    fn survival_estimate_values() {
        assert_relative_eq!(survival_estimate(0.0, 3.0), 1.0);
        assert_relative_eq!(survival_estimate(1.0, 2.0), 4.0 / 9.0, epsilon = 1e-12);
        // no-frailty limit
        let v = survival_estimate(0.5, 1e6);
        assert_relative_eq!(v, (-0.5f64).exp(), epsilon = 1e-4);
    }

    #[test]
    fn conditional_survival_values() {
        let cum = |t: f64| 0.5 * t;
        assert_relative_eq!(conditional_survival(0.0, cum, 1.0, &[0.0], &[1.0]), 1.0);
        assert_relative_eq!(
            conditional_survival(1.0, cum, 1.0, &[0.0], &[1.0]),
            (-0.5f64).exp()
        );
        let s1 = conditional_survival(1.0, cum, 1.0, &[0.2], &[1.0]);
        let s2 = conditional_survival(1.0, cum, 2.0, &[0.2], &[1.0]);
        assert_relative_eq!(s2, s1 * s1, epsilon = 1e-12);
    }

    #[test]
    fn gap_correlation_domain() {
        assert_relative_eq!(gap_correlation(4.0).unwrap(), 0.25);
        assert!(gap_correlation(2.0).is_err());
        assert!((gap_correlation(2.0 + 1e-9).unwrap() - 0.5).abs() < 1e-8);
    }

    #[test]
    fn lognormal_moment_match() {
        // Gamma(2,2): mean 1, variance 0.5
        let ln = NuPrior::lognormal_matched(2.0, 2.0);
        match ln {
            NuPrior::LogNormal { mu, sigma2 } => {
                assert_relative_eq!(sigma2, 1.5f64.ln(), epsilon = 1e-12);
                assert_relative_eq!(mu, -(1.5f64.ln()) / 2.0, epsilon = 1e-12);
            }
            _ => panic!("expected log-normal"),
        }
        assert_relative_eq!(ln.mean(), 1.0, epsilon = 1e-12);
    }

    #[test]
    fn ln_gamma_reference_accuracy() {
        // spot checks against high-precision values
        assert_relative_eq!(ln_gamma(1e-3), 6.907_178_885_383_854, max_relative = 1e-12);
        assert_relative_eq!(ln_gamma(0.5), 0.572_364_942_924_700_1, max_relative = 1e-12);
        assert_relative_eq!(ln_gamma(10.0), 12.801_827_480_081_469, max_relative = 1e-12);
        assert_relative_eq!(
            ln_gamma(1e8),
            1_742_068_066.103_834_7,
            max_relative = 1e-12
        );
        assert_relative_eq!(digamma(1.0), -0.577_215_664_901_532_9, max_relative = 1e-10);
    }
}
