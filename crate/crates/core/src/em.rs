//! Frequentist EM comparator: conditional-expectation frailty weights,
//! Breslow-type baseline updates, profile Newton steps for the regressions,
//! a bounded 1-D maximization for the frailty parameter, and Wald intervals
//! from a numerically differentiated profile marginal log-likelihood.

use statrs::function::gamma::{digamma, ln_gamma};
use thiserror::Error;

use crate::model::Block;
use crate::riskset::RiskSummary;
use crate::sampler::InitState;
use crate::util::{dot, solve_dense};

#[derive(Debug, Error)]
pub enum EmError {
    #[error("event with empty risk set: block {block}, interval {interval}")]
    EmptyRiskSet { block: String, interval: usize },
    #[error("regression update for block {block} did not converge in {steps} Newton steps")]
    NonConvergence { block: String, steps: usize },
    #[error("{0}")]
    Domain(String),
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct EmConfig {
    pub max_iter: usize,
    /// Relative-change convergence tolerance over the scalar parameters.
    pub tol: f64,
    pub init: InitState,
    pub nu_bounds: (f64, f64),
}

impl EmConfig {
    pub fn defaults(init: InitState) -> Self {
        EmConfig {
            max_iter: 500,
            tol: 1e-6,
            init,
            nu_bounds: (0.01, 50.0),
        }
    }
}

/// Fitted comparator state.
#[derive(Debug, Clone)]
pub struct EmFit {
    /// Regression estimates per recurrent type.
    pub beta: Vec<Vec<f64>>,
    pub beta0: Vec<f64>,
    pub nu: f64,
    /// Baseline hazard increments per block (recurrent types, then terminal).
    pub lambda: Vec<Vec<f64>>,
    pub w_hat: Vec<f64>,
    pub elogw: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Wald standard errors in `nu, beta11.., beta0.` order; NaN entries mark
    /// parameters whose curvature could not be inverted.
    pub se: Vec<f64>,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Blocks whose regression update saw a flat (singular) profile.
    pub flat_blocks: Vec<String>,
}

impl EmFit {
    /// Estimates in `nu, beta11.., beta0.` order, matching the sampler's
    /// parameter naming.
    pub fn estimates(&self) -> Vec<f64> {
        let mut v = vec![self.nu];
        for b in &self.beta {
            v.extend_from_slice(b);
        }
        v.extend_from_slice(&self.beta0);
        v
    }

    /// `param,estimate,se,lower,upper` rows.
    pub fn write_csv(&self, names: &[String], mut w: impl std::io::Write) -> std::io::Result<()> {
        writeln!(w, "param,estimate,se,lower,upper")?;
        for (k, est) in self.estimates().iter().enumerate() {
            writeln!(
                w,
                "{},{},{},{},{}",
                names[k], est, self.se[k], self.lower[k], self.upper[k]
            )?;
        }
        Ok(())
    }
}

fn betas_of(init: &InitState) -> Vec<Vec<f64>> {
    let mut betas = init.beta.clone();
    betas.push(init.beta0.clone());
    betas
}

/// Conditional-expectation step: posterior-mean frailty weights and the
/// matching conditional expectation of `log W` under the Gamma law.
pub fn e_step(
    rs: &RiskSummary,
    betas: &[Vec<f64>],
    nu: f64,
    lambda: &[Vec<f64>],
) -> (Vec<f64>, Vec<f64>) {
    let n = rs.n_subjects();
    let blocks = Block::all(rs.q_count());
    let mut w_hat = Vec::with_capacity(n);
    let mut elogw = Vec::with_capacity(n);
    for i in 0..n {
        let mut r = 0.0;
        for (b, &block) in blocks.iter().enumerate() {
            let base = crate::model::exposure_base(rs, &lambda[b], i, block);
            if base > 0.0 {
                r += dot(&betas[b], rs.covariates(i)).exp() * base;
            }
        }
        let shape = f64::from(rs.total_events(i)) + nu;
        let rate = r + nu;
        w_hat.push(shape / rate);
        elogw.push(digamma(shape) - rate.ln());
    }
    (w_hat, elogw)
}

/// Breslow-type baseline update: per interval, pooled events over the
/// weighted at-risk total. Intervals with neither events nor exposure get 0;
/// events with an empty risk set are an estimation error.
pub fn breslow_update(
    rs: &RiskSummary,
    betas: &[Vec<f64>],
    w_hat: &[f64],
) -> Result<Vec<Vec<f64>>, EmError> {
    let blocks = Block::all(rs.q_count());
    let n = rs.n_subjects();
    let m = rs.m();
    let mut out = Vec::with_capacity(blocks.len());
    for (b, &block) in blocks.iter().enumerate() {
        let mut denom = vec![0.0; m];
        for i in 0..n {
            let ew = w_hat[i] * dot(&betas[b], rs.covariates(i)).exp();
            for (j, &y) in rs.at_risk_row(block, i).iter().enumerate() {
                if y == 0 {
                    break;
                }
                denom[j] += ew * f64::from(y);
            }
        }
        let mut inc = vec![0.0; m];
        for (j, d) in denom.iter().enumerate() {
            let events = f64::from(rs.pooled_inc(block, j));
            inc[j] = if events == 0.0 {
                0.0
            } else if *d == 0.0 {
                return Err(EmError::EmptyRiskSet {
                    block: block.label(),
                    interval: j,
                });
            } else {
                events / d
            };
        }
        out.push(inc);
    }
    Ok(out)
}

/// Profile log-likelihood pieces of one regression block at `beta`:
/// `(objective, score, negated Hessian)`; `None` when the objective is not
/// finite at `beta`.
#[allow(clippy::type_complexity)]
fn beta_profile_parts(
    rs: &RiskSummary,
    w_hat: &[f64],
    block: Block,
    beta: &[f64],
    want_derivs: bool,
) -> Option<(f64, Vec<f64>, Vec<f64>)> {
    let n = rs.n_subjects();
    let m = rs.m();
    let p = rs.p();
    let mut s0 = vec![0.0; m];
    let mut s1 = vec![0.0; m * p];
    let mut s2 = vec![0.0; m * p * p];
    for i in 0..n {
        let x = rs.covariates(i);
        let ew = w_hat[i] * dot(beta, x).exp();
        if !ew.is_finite() {
            return None;
        }
        for (j, &y) in rs.at_risk_row(block, i).iter().enumerate() {
            if y == 0 {
                break;
            }
            let v = ew * f64::from(y);
            s0[j] += v;
            for l in 0..p {
                s1[j * p + l] += v * x[l];
                if want_derivs {
                    for k in 0..p {
                        s2[(j * p + l) * p + k] += v * x[l] * x[k];
                    }
                }
            }
        }
    }
    let mut sum_kx = vec![0.0; p];
    let mut objective = 0.0;
    let mut score = vec![0.0; p];
    let mut neg_hessian = vec![0.0; p * p];
    for i in 0..n {
        let k = f64::from(rs.events(block, i));
        if k > 0.0 {
            let x = rs.covariates(i);
            objective += k * dot(beta, x);
            for l in 0..p {
                sum_kx[l] += k * x[l];
            }
        }
    }
    score.copy_from_slice(&sum_kx);
    for j in 0..m {
        let d = f64::from(rs.pooled_inc(block, j));
        if d == 0.0 {
            continue;
        }
        if s0[j] == 0.0 {
            return None; // empty risk set under these weights
        }
        objective -= d * s0[j].ln();
        for l in 0..p {
            let xbar_l = s1[j * p + l] / s0[j];
            score[l] -= d * xbar_l;
            if want_derivs {
                for k in 0..p {
                    let xbar_k = s1[j * p + k] / s0[j];
                    neg_hessian[l * p + k] +=
                        d * (s2[(j * p + l) * p + k] / s0[j] - xbar_l * xbar_k);
                }
            }
        }
    }
    objective.is_finite().then_some((objective, score, neg_hessian))
}

/// Newton maximization of the profile objective of one regression block with
/// the baseline profiled out through the Breslow sums. Returns the estimate
/// and a flag marking a flat (singular-curvature) profile.
pub fn m_step_beta(
    rs: &RiskSummary,
    w_hat: &[f64],
    block: Block,
    init: &[f64],
) -> Result<(Vec<f64>, bool), EmError> {
    let p = rs.p();
    let mut beta = init.to_vec();
    if p == 0 {
        return Ok((beta, false));
    }
    let grad_tol = 1e-8;
    for _step in 0..50 {
        let (obj, score, neg_h) = beta_profile_parts(rs, w_hat, block, &beta, true)
            .ok_or_else(|| EmError::EmptyRiskSet {
                block: block.label(),
                interval: usize::MAX,
            })?;
        let gnorm = score.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        let delta = solve_dense(neg_h.clone(), score.clone());
        if gnorm < grad_tol {
            // at a stationary point; a singular curvature marks a flat profile
            return Ok((beta, delta.is_none()));
        }
        let delta = match delta {
            Some(d) => d,
            None => return Ok((beta, true)), // flat direction, cannot move
        };
        // step halving on the profile objective
        let mut scale = 1.0;
        let mut moved = false;
        for _ in 0..30 {
            let trial: Vec<f64> = beta
                .iter()
                .zip(&delta)
                .map(|(b, d)| b + scale * d)
                .collect();
            if let Some((obj_t, _, _)) = beta_profile_parts(rs, w_hat, block, &trial, false) {
                if obj_t > obj - 1e-12 {
                    beta = trial;
                    moved = true;
                    break;
                }
            }
            scale *= 0.5;
        }
        if !moved {
            // no ascent possible along the Newton direction
            return Ok((beta, true));
        }
    }
    Err(EmError::NonConvergence {
        block: block.label(),
        steps: 50,
    })
}

/// Maximizes the expected complete-data frailty term
/// `sum_i [nu log nu - log Gamma(nu) + (nu-1) elogw_i - nu w_hat_i]`
/// over `[lo, hi]` by a bracketed Newton iteration with bisection safeguard;
/// the objective is strictly concave so the bracketed root of its derivative
/// is unique.
pub fn m_step_nu(w_hat: &[f64], elogw: &[f64], bounds: (f64, f64)) -> Result<f64, EmError> {
    let n = w_hat.len();
    if n == 0 {
        return Err(EmError::Domain("frailty update needs n >= 1".into()));
    }
    let (lo, hi) = bounds;
    if !(lo > 0.0 && hi > lo) {
        return Err(EmError::Domain(format!("bad nu bounds ({lo}, {hi})")));
    }
    let sum_e: f64 = elogw.iter().sum();
    let sum_w: f64 = w_hat.iter().sum();
    let nf = n as f64;
    let dg = |nu: f64| nf * (nu.ln() + 1.0 - digamma(nu)) + sum_e - sum_w;
    let (mut a, mut b) = (lo, hi);
    let (ga, gb) = (dg(a), dg(b));
    if gb >= 0.0 {
        return Ok(hi); // objective still increasing at the upper bound
    }
    if ga <= 0.0 {
        return Ok(lo);
    }
    let mut x = (a * b).sqrt();
    for _ in 0..200 {
        let g = dg(x);
        if g > 0.0 {
            a = x;
        } else {
            b = x;
        }
        // Newton step on the derivative with a numeric second derivative
        let h = 1e-5 * x.max(1e-3);
        let gpp = (dg(x + h) - dg(x - h)) / (2.0 * h);
        let newton = if gpp < 0.0 { x - g / gpp } else { f64::NAN };
        x = if newton.is_finite() && newton > a && newton < b {
            newton
        } else {
            0.5 * (a + b)
        };
        if b - a < 1e-12 * x.max(1.0) {
            break;
        }
    }
    Ok(x)
}

/// Observed-data marginal log-likelihood with the frailties integrated out,
/// at fixed baselines.
pub fn marginal_loglik(
    rs: &RiskSummary,
    betas: &[Vec<f64>],
    nu: f64,
    lambda: &[Vec<f64>],
) -> f64 {
    let blocks = Block::all(rs.q_count());
    let n = rs.n_subjects();
    let ln_nu = nu.ln();
    let lg_nu = ln_gamma(nu);
    let mut acc = 0.0;
    for i in 0..n {
        let mut r = 0.0;
        for (b, &block) in blocks.iter().enumerate() {
            let lp = dot(&betas[b], rs.covariates(i));
            let base = crate::model::exposure_base(rs, &lambda[b], i, block);
            if base > 0.0 {
                r += lp.exp() * base;
            }
            for (j, &d) in rs.inc_row(block, i).iter().enumerate() {
                if d == 0 {
                    continue;
                }
                let y = rs.at_risk(block, i, j);
                if y == 0 || !(lambda[b][j] > 0.0) {
                    return f64::NEG_INFINITY;
                }
                acc += f64::from(d) * (lp + f64::from(y).ln() + lambda[b][j].ln());
            }
        }
        let n_i = f64::from(rs.total_events(i));
        acc += ln_gamma(n_i + nu) - (n_i + nu) * (r + nu).ln() + nu * ln_nu - lg_nu;
    }
    acc
}

/// Iterates the conditional-expectation and Breslow pair to a joint fixed
/// point at fixed `(betas, nu)`; used for profile-likelihood evaluations and
/// the final synchronization of a fit.
fn stabilize(
    rs: &RiskSummary,
    betas: &[Vec<f64>],
    nu: f64,
    lambda: &mut Vec<Vec<f64>>,
    w_hat: &mut Vec<f64>,
    elogw: &mut Vec<f64>,
) -> Result<(), EmError> {
    for _ in 0..1000 {
        let (w_new, e_new) = e_step(rs, betas, nu, lambda);
        let drift = w_new
            .iter()
            .zip(w_hat.iter())
            .fold(0.0f64, |a, (x, y)| a.max((x - y).abs()));
        *w_hat = w_new;
        *elogw = e_new;
        *lambda = breslow_update(rs, betas, w_hat)?;
        if drift < 1e-12 {
            break;
        }
    }
    Ok(())
}

/// Profile marginal log-likelihood at `(betas, nu)`, maximizing over the
/// baselines by the inner fixed point; warm-started from `lambda0`.
fn profile_loglik(
    rs: &RiskSummary,
    betas: &[Vec<f64>],
    nu: f64,
    lambda_warm: &[Vec<f64>],
    w_warm: &[f64],
) -> Result<f64, EmError> {
    let mut lambda = lambda_warm.to_vec();
    let mut w_hat = w_warm.to_vec();
    let mut elogw = vec![0.0; w_hat.len()];
    stabilize(rs, betas, nu, &mut lambda, &mut w_hat, &mut elogw)?;
    Ok(marginal_loglik(rs, betas, nu, &lambda))
}

fn unpack(theta: &[f64], q_count: usize, p: usize) -> (Vec<Vec<f64>>, f64) {
    let nu = theta[0];
    let mut betas = Vec::with_capacity(q_count + 1);
    for b in 0..=q_count {
        betas.push(theta[1 + b * p..1 + (b + 1) * p].to_vec());
    }
    (betas, nu)
}

/// Full EM fit: alternate the conditional-expectation step, the Breslow
/// update, the per-block profile Newton steps, and the bounded frailty
/// maximization until the largest relative parameter change drops below the
/// tolerance. Standard errors come from a central-difference Hessian of the
/// profile marginal log-likelihood at the final iterate.
pub fn fit_em(rs: &RiskSummary, cfg: &EmConfig) -> Result<EmFit, EmError> {
    let n = rs.n_subjects();
    if n == 0 {
        return Err(EmError::Domain("cannot fit an empty cohort".into()));
    }
    let q_count = rs.q_count();
    let p = rs.p();
    if cfg.init.beta.len() != q_count
        || cfg.init.beta.iter().any(|b| b.len() != p)
        || cfg.init.beta0.len() != p
    {
        return Err(EmError::Domain(
            "initial regression vectors do not match the data dimensions".into(),
        ));
    }
    let blocks = Block::all(q_count);
    let mut betas = betas_of(&cfg.init);
    let mut nu = cfg.init.nu;
    // Baselines start at unweighted Breslow sums under the initial betas.
    let ones = vec![1.0; n];
    let mut lambda = breslow_update(rs, &betas, &ones)?;
    let mut w_hat = ones;
    let mut elogw = vec![0.0; n];
    let mut converged = false;
    let mut iterations = 0;
    let mut flat_blocks: Vec<String> = Vec::new();

    for iter in 1..=cfg.max_iter {
        iterations = iter;
        let (w_new, e_new) = e_step(rs, &betas, nu, &lambda);
        w_hat = w_new;
        elogw = e_new;
        lambda = breslow_update(rs, &betas, &w_hat)?;
        let mut max_rel: f64 = 0.0;
        for (b, &block) in blocks.iter().enumerate() {
            let (new_beta, flat) = m_step_beta(rs, &w_hat, block, &betas[b])?;
            if flat {
                let label = format!("beta{}", block.label());
                if !flat_blocks.contains(&label) {
                    flat_blocks.push(label);
                }
            }
            for (old, new) in betas[b].iter().zip(&new_beta) {
                max_rel = max_rel.max((new - old).abs() / old.abs().max(1.0));
            }
            betas[b] = new_beta;
        }
        let nu_new = m_step_nu(&w_hat, &elogw, cfg.nu_bounds)?;
        max_rel = max_rel.max((nu_new - nu).abs() / nu.abs().max(1.0));
        nu = nu_new;
        if max_rel < cfg.tol {
            converged = true;
            break;
        }
    }
    // Synchronize the baselines and weights with the final parameters so the
    // returned quadruple is a joint fixed point.
    stabilize(rs, &betas, nu, &mut lambda, &mut w_hat, &mut elogw)?;

    // Wald standard errors from the profile curvature.
    let d = 1 + (q_count + 1) * p;
    let mut theta = vec![nu];
    for b in &betas {
        theta.extend_from_slice(b);
    }
    let mut se = vec![f64::NAN; d];
    let mut lower = vec![f64::NAN; d];
    let mut upper = vec![f64::NAN; d];
    let eval = |t: &[f64]| -> Result<f64, EmError> {
        if t[0] <= 0.0 {
            return Ok(f64::NEG_INFINITY);
        }
        let (bs, v) = unpack(t, q_count, p);
        profile_loglik(rs, &bs, v, &lambda, &w_hat)
    };
    if let Some(hessian) = profile_hessian(&eval, &theta)? {
        let neg_h: Vec<f64> = hessian.iter().map(|v| -v).collect();
        if let Some(cov) = crate::util::invert_dense(&neg_h, d) {
            for k in 0..d {
                let var = cov[k * d + k];
                if var > 0.0 {
                    se[k] = var.sqrt();
                    let z = 1.959_963_984_540_054;
                    lower[k] = theta[k] - z * se[k];
                    upper[k] = theta[k] + z * se[k];
                }
            }
        }
    }

    let beta0 = betas.pop().expect("terminal block present");
    Ok(EmFit {
        beta: betas,
        beta0,
        nu,
        lambda,
        w_hat,
        elogw,
        iterations,
        converged,
        se,
        lower,
        upper,
        flat_blocks,
    })
}

/// Central-difference Hessian of `f` at `theta`; `None` when any evaluation
/// is non-finite.
fn profile_hessian(
    f: &dyn Fn(&[f64]) -> Result<f64, EmError>,
    theta: &[f64],
) -> Result<Option<Vec<f64>>, EmError> {
    let d = theta.len();
    let h: Vec<f64> = theta.iter().map(|t| 1e-3 * t.abs().max(0.1)).collect();
    let f0 = f(theta)?;
    if !f0.is_finite() {
        return Ok(None);
    }
    let mut hess = vec![0.0; d * d];
    let mut shifted = theta.to_vec();
    for k in 0..d {
        shifted[k] = theta[k] + h[k];
        let up = f(&shifted)?;
        shifted[k] = theta[k] - h[k];
        let dn = f(&shifted)?;
        shifted[k] = theta[k];
        if !up.is_finite() || !dn.is_finite() {
            return Ok(None);
        }
        hess[k * d + k] = (up + dn - 2.0 * f0) / (h[k] * h[k]);
    }
    for k in 0..d {
        for l in 0..k {
            let mut corner = [0.0; 4];
            for (idx, (sk, sl)) in [(1.0, 1.0), (1.0, -1.0), (-1.0, 1.0), (-1.0, -1.0)]
                .iter()
                .enumerate()
            {
                shifted[k] = theta[k] + sk * h[k];
                shifted[l] = theta[l] + sl * h[l];
                let v = f(&shifted)?;
                if !v.is_finite() {
                    return Ok(None);
                }
                corner[idx] = v;
                shifted[k] = theta[k];
                shifted[l] = theta[l];
            }
            let v = (corner[0] - corner[1] - corner[2] + corner[3]) / (4.0 * h[k] * h[l]);
            hess[k * d + l] = v;
            hess[l * d + k] = v;
        }
    }
    Ok(Some(hess))
}
