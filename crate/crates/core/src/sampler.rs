//! Metropolis-within-Gibbs sampler.
//!
//! Per iteration, in this order: (a) draw the hazard increments of every
//! recurrent type from their Gamma conditionals, (b) draw the terminal
//! increments, (c) recompute subject exposures, (d) a Metropolis step for the
//! frailty parameter on the log scale against its collapsed conditional,
//! (e) draw the frailties from their Gamma conditionals, (f) one joint
//! random-walk Metropolis step per recurrent regression block, and (g) the
//! same for the terminal block. Step sizes adapt by Robbins-Monro scaling of
//! the log step during burn-in only.

use std::io::{BufRead, Write};

use rand::Rng;
use rand_distr::{Distribution, Gamma as GammaDist, StandardNormal};
use rayon::prelude::*;
use thiserror::Error;

use crate::model::{
    frailty_posterior_means, lambda_bayes_increments, nu_log_target, Block, FrailtySource,
    GammaProcessPrior, ModelState, ParamPriors,
};
use crate::riskset::RiskSummary;
use crate::util::{dot, mean, quantile_sorted, sample_sd, substream};

#[derive(Debug, Error)]
pub enum SamplerError {
    #[error("non-finite log posterior at initialization in block {0}")]
    NonFiniteInit(String),
    #[error("configuration error: {0}")]
    Config(String),
    #[error("empty draws")]
    EmptyDraws,
    #[error("draws csv: {0}")]
    DrawsCsv(String),
}

/// How the hazard increments are refreshed each sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LambdaUpdate {
    /// Exact Gamma draws from the conditional posterior.
    #[default]
    Draw,
    /// Posterior-mean increments (the closed-form update).
    PosteriorMean,
}

/// How the frailties are refreshed each sweep.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WUpdate {
    #[default]
    Draw,
    PosteriorMean,
}

/// Which blocks move; fixing blocks is used by conjugacy checks.
#[derive(Debug, Clone, Copy, serde::Serialize, serde::Deserialize)]
pub struct UpdateFlags {
    pub lambda: bool,
    pub nu: bool,
    pub w: bool,
    pub beta: bool,
}

impl Default for UpdateFlags {
    fn default() -> Self {
        UpdateFlags {
            lambda: true,
            nu: true,
            w: true,
            beta: true,
        }
    }
}

/// Metropolis tuning: initial step sizes, target acceptance rates, and the
/// batch window of the Robbins-Monro adaptation.
#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct MhSettings {
    pub step_log_nu: f64,
    pub step_beta: f64,
    pub target_accept_scalar: f64,
    pub target_accept_vector: f64,
    pub adapt_window: usize,
}

impl Default for MhSettings {
    fn default() -> Self {
        MhSettings {
            step_log_nu: 0.5,
            step_beta: 0.15,
            target_accept_scalar: 0.44,
            target_accept_vector: 0.234,
            adapt_window: 50,
        }
    }
}

/// Starting values; hazard increments start at their prior means and
/// frailties at 1.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct InitState {
    pub beta: Vec<Vec<f64>>,
    pub beta0: Vec<f64>,
    pub nu: f64,
}

impl InitState {
    pub fn zeros(q_count: usize, p: usize) -> Self {
        InitState {
            beta: vec![vec![0.0; p]; q_count],
            beta0: vec![0.0; p],
            nu: 1.0,
        }
    }
}

#[derive(Debug, Clone, serde::Serialize, serde::Deserialize)]
pub struct ChainConfig {
    pub iterations: usize,
    pub burn_in: usize,
    pub thin: usize,
    pub n_chains: usize,
    pub seed: u64,
    pub init: InitState,
    #[serde(default)]
    pub mh: MhSettings,
    #[serde(default)]
    pub flags: UpdateFlags,
    #[serde(default)]
    pub lambda_update: LambdaUpdate,
    #[serde(default)]
    pub w_update: WUpdate,
    /// Store per-kept-draw hazard curves and frailty posterior means.
    #[serde(default)]
    pub store_snapshots: bool,
}

impl ChainConfig {
    pub fn validate(&self) -> Result<(), SamplerError> {
        if self.burn_in >= self.iterations {
            return Err(SamplerError::Config(format!(
                "burn_in {} must be below iterations {}",
                self.burn_in, self.iterations
            )));
        }
        if self.thin == 0 || self.n_chains == 0 {
            return Err(SamplerError::Config("thin and n_chains must be >= 1".into()));
        }
        Ok(())
    }

    pub fn kept_per_chain(&self) -> usize {
        (self.iterations - self.burn_in) / self.thin
    }
}

/// Scalar parameter names in draw order: `nu`, then `beta{q}{l}` per
/// recurrent type, then `beta0{l}`.
pub fn param_names(q_count: usize, p: usize) -> Vec<String> {
    let mut names = vec!["nu".to_string()];
    for q in 1..=q_count {
        for l in 1..=p {
            names.push(format!("beta{q}{l}"));
        }
    }
    for l in 1..=p {
        names.push(format!("beta0{l}"));
    }
    names
}

/// Draws from one chain: thinned post-burn-in scalar sequences, averaged
/// plug-in hazard increments, and acceptance rates per Metropolis block.
#[derive(Debug, Clone)]
pub struct ChainDraws {
    /// `draws[param][k]` in [`param_names`] order.
    pub draws: Vec<Vec<f64>>,
    /// Iteration numbers of the kept draws.
    pub kept_iters: Vec<usize>,
    /// Mean over kept draws of the plug-in posterior-mean increments,
    /// per block (recurrent types first, terminal last).
    pub lambda_hat_mean: Vec<Vec<f64>>,
    /// Post-burn-in acceptance rate per Metropolis block.
    pub accept_rates: Vec<(String, f64)>,
    /// Per-kept-draw plug-in curves, when snapshots were requested.
    pub lambda_snapshots: Option<Vec<Vec<Vec<f64>>>>,
    /// Per-kept-draw frailty posterior means, when requested.
    pub w_snapshots: Option<Vec<Vec<f64>>>,
}

/// Thinned post-burn-in samples across chains.
#[derive(Debug, Clone)]
pub struct PosteriorDraws {
    pub param_names: Vec<String>,
    pub chains: Vec<ChainDraws>,
}

impl PosteriorDraws {
    /// Per-chain series of one parameter.
    pub fn param_chains(&self, param: usize) -> Vec<&[f64]> {
        self.chains.iter().map(|c| c.draws[param].as_slice()).collect()
    }

    pub fn pooled(&self, param: usize) -> Vec<f64> {
        let mut v = Vec::new();
        for c in &self.chains {
            v.extend_from_slice(&c.draws[param]);
        }
        v
    }

    /// Plug-in hazard increments per block averaged over chains.
    pub fn lambda_hat(&self) -> Vec<Vec<f64>> {
        let blocks = self.chains[0].lambda_hat_mean.len();
        let m = self.chains[0].lambda_hat_mean[0].len();
        let mut out = vec![vec![0.0; m]; blocks];
        for c in &self.chains {
            for (b, row) in c.lambda_hat_mean.iter().enumerate() {
                for (j, v) in row.iter().enumerate() {
                    out[b][j] += v;
                }
            }
        }
        let k = self.chains.len() as f64;
        for row in &mut out {
            for v in row.iter_mut() {
                *v /= k;
            }
        }
        out
    }

    /// Acceptance rates per Metropolis block, averaged across chains.
    pub fn accept_rates(&self) -> Vec<(String, f64)> {
        let mut labels: Vec<String> = Vec::new();
        let mut sums: Vec<f64> = Vec::new();
        for c in &self.chains {
            for (k, (name, rate)) in c.accept_rates.iter().enumerate() {
                if labels.len() <= k {
                    labels.push(name.clone());
                    sums.push(0.0);
                }
                sums[k] += rate;
            }
        }
        let nc = self.chains.len() as f64;
        labels
            .into_iter()
            .zip(sums.into_iter().map(|s| s / nc))
            .collect()
    }
}

/// Random-walk step-size state with batched Robbins-Monro adaptation of the
/// log step size; moves stop adapting once `adapting` is cleared.
#[derive(Debug, Clone)]
pub struct StepState {
    pub log_step: f64,
    pub target: f64,
    pub window: usize,
    pub adapting: bool,
    in_window: usize,
    accepted_in_window: usize,
    batch: usize,
    tracked: usize,
    tracked_accepted: usize,
}

impl StepState {
    pub fn new(step: f64, target: f64, window: usize) -> Self {
        StepState {
            log_step: step.ln(),
            target,
            window: window.max(1),
            adapting: true,
            in_window: 0,
            accepted_in_window: 0,
            batch: 0,
            tracked: 0,
            tracked_accepted: 0,
        }
    }

    pub fn step(&self) -> f64 {
        self.log_step.exp()
    }

    fn record(&mut self, accepted: bool) {
        if self.adapting {
            self.in_window += 1;
            self.accepted_in_window += usize::from(accepted);
            if self.in_window == self.window {
                self.batch += 1;
                let rate = self.accepted_in_window as f64 / self.window as f64;
                let delta = (1.0 / (self.batch as f64).sqrt()).min(0.5);
                self.log_step += 2.0 * delta * (rate - self.target);
                self.log_step = self.log_step.clamp(-20.0, 5.0);
                self.in_window = 0;
                self.accepted_in_window = 0;
            }
        } else {
            self.tracked += 1;
            self.tracked_accepted += usize::from(accepted);
        }
    }

    /// Acceptance rate after adaptation stopped.
    pub fn post_adaptation_rate(&self) -> f64 {
        if self.tracked == 0 {
            f64::NAN
        } else {
            self.tracked_accepted as f64 / self.tracked as f64
        }
    }
}

/// One Gaussian random-walk Metropolis step on a vector parameter.
///
/// `log_target` must already include any Jacobian term when the parameter
/// has been transformed (the frailty parameter is sampled on the log scale).
/// A non-finite proposal target rejects; the current log target is carried
/// in and out to avoid recomputation.
pub fn mh_step(
    current: &mut [f64],
    current_lp: &mut f64,
    log_target: impl Fn(&[f64]) -> f64,
    state: &mut StepState,
    rng: &mut impl Rng,
) -> bool {
    let step = state.step();
    let proposal: Vec<f64> = current
        .iter()
        .map(|&x| x + step * rng.sample::<f64, _>(StandardNormal))
        .collect();
    let lp = log_target(&proposal);
    let accepted = if lp.is_finite() {
        lp - *current_lp >= 0.0 || rng.random::<f64>().ln() < lp - *current_lp
    } else {
        false
    };
    if accepted {
        current.copy_from_slice(&proposal);
        *current_lp = lp;
    }
    state.record(accepted);
    accepted
}

struct BlockWorkspace {
    /// Constant over the chain: pooled events plus prior mass, per interval.
    shape_base: Vec<f64>,
    /// `sum_i K_i x_i`, the event-weighted covariate total.
    sum_kx: Vec<f64>,
}

/// Runs a single chain; deterministic given `(cfg.seed, chain_index)` and the
/// inputs.
pub fn run_chain(
    rs: &RiskSummary,
    priors: &ParamPriors,
    gp: &[GammaProcessPrior],
    cfg: &ChainConfig,
    chain_index: usize,
) -> Result<ChainDraws, SamplerError> {
    cfg.validate()?;
    let n = rs.n_subjects();
    let q_count = rs.q_count();
    let p = rs.p();
    let m = rs.m();
    let blocks = Block::all(q_count);
    if gp.len() != blocks.len() {
        return Err(SamplerError::Config(format!(
            "{} gamma-process priors supplied for {} blocks",
            gp.len(),
            blocks.len()
        )));
    }
    if cfg.init.beta.len() != q_count
        || cfg.init.beta.iter().any(|b| b.len() != p)
        || cfg.init.beta0.len() != p
    {
        return Err(SamplerError::Config(
            "initial regression vectors do not match the data dimensions".into(),
        ));
    }

    let mut rng = substream(cfg.seed, "chain", chain_index as u64);

    // Initial state: hazard increments at prior means, frailties at 1.
    let mut st = ModelState {
        lambda: (0..q_count).map(|qi| gp[qi].ref_inc.clone()).collect(),
        lambda0: gp[q_count].ref_inc.clone(),
        w: vec![1.0; n],
        nu: cfg.init.nu,
        beta: cfg.init.beta.clone(),
        beta0: cfg.init.beta0.clone(),
    };

    // Per-block constants.
    let ws: Vec<BlockWorkspace> = blocks
        .iter()
        .enumerate()
        .map(|(bi, &block)| {
            let shape_base = (0..m)
                .map(|j| f64::from(rs.pooled_inc(block, j)) + gp[bi].c * gp[bi].ref_inc[j])
                .collect();
            let mut sum_kx = vec![0.0; p];
            for i in 0..n {
                let k = f64::from(rs.events(block, i));
                if k > 0.0 {
                    for (l, x) in rs.covariates(i).iter().enumerate() {
                        sum_kx[l] += k * x;
                    }
                }
            }
            BlockWorkspace { shape_base, sum_kx }
        })
        .collect();
    let counts: Vec<f64> = (0..n).map(|i| f64::from(rs.total_events(i))).collect();

    // Exposure bases per block and subject under the current increments.
    let mut base_exp = vec![vec![0.0; n]; blocks.len()];
    let refresh_base = |base_exp: &mut Vec<Vec<f64>>, st: &ModelState| {
        for (bi, &block) in blocks.iter().enumerate() {
            let lambda = st.lambda_inc(block);
            for i in 0..n {
                base_exp[bi][i] = crate::model::exposure_base(rs, lambda, i, block);
            }
        }
    };
    refresh_base(&mut base_exp, &st);

    let beta_target = |bi: usize, beta: &[f64], st: &ModelState, base: &[f64]| -> f64 {
        let block = blocks[bi];
        let mut acc = dot(&ws[bi].sum_kx, beta);
        for i in 0..n {
            if base[i] > 0.0 {
                acc -= st.w[i] * dot(beta, rs.covariates(i)).exp() * base[i];
            }
        }
        acc + priors.beta_block(block).log_density_unnorm(beta)
    };
    let exposures_of = |st: &ModelState, base_exp: &[Vec<f64>]| -> Vec<f64> {
        let mut r = vec![0.0; n];
        for (bi, &block) in blocks.iter().enumerate() {
            let beta = st.beta_block(block);
            for i in 0..n {
                if base_exp[bi][i] > 0.0 {
                    r[i] += dot(beta, rs.covariates(i)).exp() * base_exp[bi][i];
                }
            }
        }
        r
    };

    // Startup check: every Metropolis target must be finite at the start.
    {
        let r = exposures_of(&st, &base_exp);
        let lp_nu = nu_log_target(&counts, &r, st.nu, &priors.nu);
        if !lp_nu.is_finite() {
            return Err(SamplerError::NonFiniteInit("nu".into()));
        }
        for (bi, &block) in blocks.iter().enumerate() {
            let lp = beta_target(bi, st.beta_block(block), &st, &base_exp[bi]);
            if !lp.is_finite() {
                return Err(SamplerError::NonFiniteInit(format!(
                    "beta{}",
                    block.label()
                )));
            }
        }
    }

    let mut nu_state = StepState::new(
        cfg.mh.step_log_nu,
        cfg.mh.target_accept_scalar,
        cfg.mh.adapt_window,
    );
    let mut beta_states: Vec<StepState> = blocks
        .iter()
        .map(|_| {
            StepState::new(
                cfg.mh.step_beta,
                cfg.mh.target_accept_vector,
                cfg.mh.adapt_window,
            )
        })
        .collect();

    let kept = cfg.kept_per_chain();
    let n_params = 1 + (q_count + 1) * p;
    let mut draws = vec![Vec::with_capacity(kept); n_params];
    let mut kept_iters = Vec::with_capacity(kept);
    let mut lambda_hat_sum = vec![vec![0.0; m]; blocks.len()];
    let mut lambda_snapshots = cfg.store_snapshots.then(Vec::new);
    let mut w_snapshots = cfg.store_snapshots.then(Vec::new);

    let mut rate = vec![0.0; m];
    for iter in 1..=cfg.iterations {
        let adapting = iter <= cfg.burn_in;
        nu_state.adapting = adapting;
        for s in &mut beta_states {
            s.adapting = adapting;
        }

        // (a)/(b) hazard increments per block from their Gamma conditionals
        if cfg.flags.lambda {
            for (bi, &block) in blocks.iter().enumerate() {
                let beta = st.beta_block(block).to_vec();
                rate.iter_mut().for_each(|v| *v = gp[bi].c);
                for i in 0..n {
                    let ew = st.w[i] * dot(&beta, rs.covariates(i)).exp();
                    let row = rs.at_risk_row(block, i);
                    for (j, &y) in row.iter().enumerate() {
                        if y == 0 {
                            break;
                        }
                        rate[j] += ew * f64::from(y);
                    }
                }
                let lambda = st.lambda_inc_mut(block);
                for j in 0..m {
                    let shape = ws[bi].shape_base[j];
                    lambda[j] = if shape == 0.0 {
                        0.0
                    } else {
                        match cfg.lambda_update {
                            LambdaUpdate::Draw => GammaDist::new(shape, 1.0 / rate[j])
                                .expect("positive shape and scale")
                                .sample(&mut rng),
                            LambdaUpdate::PosteriorMean => shape / rate[j],
                        }
                    };
                }
            }
            refresh_base(&mut base_exp, &st);
        }

        // (c) exposures under the new increments and previous regressions
        let r_total = exposures_of(&st, &base_exp);

        // (d) Metropolis step for the frailty parameter on the log scale
        if cfg.flags.nu {
            let mut x = [st.nu.ln()];
            let mut lp = nu_log_target(&counts, &r_total, st.nu, &priors.nu) + x[0];
            mh_step(
                &mut x,
                &mut lp,
                |y| {
                    let nu = y[0].exp();
                    nu_log_target(&counts, &r_total, nu, &priors.nu) + y[0]
                },
                &mut nu_state,
                &mut rng,
            );
            st.nu = x[0].exp();
        }

        // (e) frailties from their Gamma conditionals
        if cfg.flags.w {
            for i in 0..n {
                let shape = counts[i] + st.nu;
                let rate_i = r_total[i] + st.nu;
                st.w[i] = match cfg.w_update {
                    WUpdate::Draw => GammaDist::new(shape, 1.0 / rate_i)
                        .expect("positive shape and scale")
                        .sample(&mut rng),
                    WUpdate::PosteriorMean => shape / rate_i,
                };
            }
        }

        // (f)/(g) one joint random-walk step per regression block
        if cfg.flags.beta {
            for (bi, &block) in blocks.iter().enumerate() {
                let mut beta = st.beta_block(block).to_vec();
                let mut lp = beta_target(bi, &beta, &st, &base_exp[bi]);
                if !lp.is_finite() {
                    return Err(SamplerError::NonFiniteInit(format!(
                        "beta{}",
                        block.label()
                    )));
                }
                mh_step(
                    &mut beta,
                    &mut lp,
                    |b| beta_target(bi, b, &st, &base_exp[bi]),
                    &mut beta_states[bi],
                    &mut rng,
                );
                st.beta_block_mut(block).copy_from_slice(&beta);
            }
        }

        if iter > cfg.burn_in && (iter - cfg.burn_in) % cfg.thin == 0 {
            kept_iters.push(iter);
            draws[0].push(st.nu);
            let mut k = 1;
            for block in &blocks {
                for &v in st.beta_block(*block) {
                    draws[k].push(v);
                    k += 1;
                }
            }
            // plug-in curve bookkeeping with posterior-mean frailties
            let w_hat = frailty_posterior_means(rs, &st);
            if let Some(snap) = w_snapshots.as_mut() {
                snap.push(w_hat.clone());
            }
            let st_hat = ModelState {
                w: w_hat,
                ..st.clone()
            };
            let mut curve_snapshot = cfg.store_snapshots.then(Vec::new);
            for (bi, &block) in blocks.iter().enumerate() {
                let incs =
                    lambda_bayes_increments(rs, &st_hat, &gp[bi], block, FrailtySource::Draws);
                for (j, v) in incs.iter().enumerate() {
                    lambda_hat_sum[bi][j] += v;
                }
                if let Some(cs) = curve_snapshot.as_mut() {
                    cs.push(incs);
                }
            }
            if let (Some(all), Some(cs)) = (lambda_snapshots.as_mut(), curve_snapshot) {
                all.push(cs);
            }
        }
    }

    let denom = kept_iters.len().max(1) as f64;
    for row in &mut lambda_hat_sum {
        for v in row.iter_mut() {
            *v /= denom;
        }
    }
    let mut accept_rates = vec![("nu".to_string(), nu_state.post_adaptation_rate())];
    for (bi, block) in blocks.iter().enumerate() {
        accept_rates.push((
            format!("beta{}", block.label()),
            beta_states[bi].post_adaptation_rate(),
        ));
    }

    Ok(ChainDraws {
        draws,
        kept_iters,
        lambda_hat_mean: lambda_hat_sum,
        accept_rates,
        lambda_snapshots,
        w_snapshots,
    })
}

/// Runs `cfg.n_chains` chains (in parallel) and collects the draws.
pub fn run_chains(
    rs: &RiskSummary,
    priors: &ParamPriors,
    gp: &[GammaProcessPrior],
    cfg: &ChainConfig,
) -> Result<PosteriorDraws, SamplerError> {
    cfg.validate()?;
    let chains: Result<Vec<ChainDraws>, SamplerError> = (0..cfg.n_chains)
        .into_par_iter()
        .map(|c| run_chain(rs, priors, gp, cfg, c))
        .collect();
    Ok(PosteriorDraws {
        param_names: param_names(rs.q_count(), rs.p()),
        chains: chains?,
    })
}

/// Posterior summary of one scalar parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSummary {
    pub name: String,
    pub mean: f64,
    pub sd: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Pooled mean, sample SD, and equal-tailed interval (type-7 quantiles) at
/// the given credibility level for every parameter.
pub fn summarize_draws(
    draws: &PosteriorDraws,
    level: f64,
) -> Result<Vec<ParamSummary>, SamplerError> {
    if !(0.0 < level && level < 1.0) {
        return Err(SamplerError::Config(format!(
            "credibility level must be in (0,1), got {level}"
        )));
    }
    let mut out = Vec::with_capacity(draws.param_names.len());
    for (k, name) in draws.param_names.iter().enumerate() {
        let mut pooled = draws.pooled(k);
        if pooled.is_empty() {
            return Err(SamplerError::EmptyDraws);
        }
        let m = mean(&pooled);
        let sd = if pooled.len() > 1 {
            sample_sd(&pooled)
        } else {
            0.0
        };
        pooled.sort_by(|a, b| a.partial_cmp(b).expect("finite draws"));
        let alpha = (1.0 - level) / 2.0;
        out.push(ParamSummary {
            name: name.clone(),
            mean: m,
            sd,
            lower: quantile_sorted(&pooled, alpha),
            upper: quantile_sorted(&pooled, 1.0 - alpha),
        });
    }
    Ok(out)
}

/// Writes draws as `chain,iter,param,value`.
pub fn write_draws_csv(draws: &PosteriorDraws, mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "chain,iter,param,value")?;
    for (ci, chain) in draws.chains.iter().enumerate() {
        for (pi, name) in draws.param_names.iter().enumerate() {
            for (k, &iter) in chain.kept_iters.iter().enumerate() {
                writeln!(w, "{ci},{iter},{name},{}", chain.draws[pi][k])?;
            }
        }
    }
    Ok(())
}

/// Reads a `chain,iter,param,value` file back into per-parameter chains.
/// Returns parameter names and, per parameter, one series per chain.
pub fn read_draws_csv(
    reader: impl BufRead,
) -> Result<(Vec<String>, Vec<Vec<Vec<f64>>>), SamplerError> {
    let mut lines = reader.lines();
    let header = lines
        .next()
        .ok_or_else(|| SamplerError::DrawsCsv("empty file".into()))?
        .map_err(|e| SamplerError::DrawsCsv(e.to_string()))?;
    if header.trim() != "chain,iter,param,value" {
        return Err(SamplerError::DrawsCsv(format!(
            "unexpected header '{header}'"
        )));
    }
    let mut params: Vec<String> = Vec::new();
    let mut rows: std::collections::BTreeMap<(usize, usize), Vec<(usize, f64)>> =
        std::collections::BTreeMap::new();
    let mut max_chain = 0usize;
    for (lineno, line) in lines.enumerate() {
        let line = line.map_err(|e| SamplerError::DrawsCsv(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let mut parts = line.splitn(4, ',');
        let (c, it, name, val) = (
            parts.next().unwrap_or(""),
            parts.next().unwrap_or(""),
            parts.next().unwrap_or(""),
            parts.next().unwrap_or(""),
        );
        let err = |m: String| SamplerError::DrawsCsv(format!("line {}: {m}", lineno + 2));
        let chain: usize = c
            .trim()
            .parse()
            .map_err(|_| err(format!("bad chain '{c}'")))?;
        let iter: usize = it
            .trim()
            .parse()
            .map_err(|_| err(format!("bad iter '{it}'")))?;
        let value: f64 = val
            .trim()
            .parse()
            .map_err(|_| err(format!("bad value '{val}'")))?;
        let pid = match params.iter().position(|p| p == name.trim()) {
            Some(pid) => pid,
            None => {
                params.push(name.trim().to_string());
                params.len() - 1
            }
        };
        max_chain = max_chain.max(chain);
        rows.entry((pid, chain)).or_default().push((iter, value));
    }
    let n_chains = max_chain + 1;
    let mut out = vec![vec![Vec::new(); n_chains]; params.len()];
    for ((pid, chain), mut series) in rows {
        series.sort_by_key(|&(it, _)| it);
        out[pid][chain] = series.into_iter().map(|(_, v)| v).collect();
    }
    Ok((params, out))
}
