//! Convergence diagnostics: split potential scale reduction and
//! rank-normalized bulk/tail effective sample sizes.
//!
//! Conventions, documented because short chains hit them in tests:
//! - chains shorter than 4 are not split;
//! - all-constant identical chains report R-hat exactly 1.0;
//! - constant draws report an ESS equal to the total draw count;
//! - ESS is capped at 1.5 times the total draw count (mild antithetic
//!   superefficiency is kept, runaway estimates are not).

use std::io::Write;

use statrs::distribution::{ContinuousCDF, Normal};
use thiserror::Error;

use crate::util::{mean, quantile_sorted, sample_variance};

#[derive(Debug, Error)]
pub enum DiagnosticsError {
    #[error("need at least two chains of length two after splitting")]
    TooFewChains,
    #[error("need at least {0} total draws")]
    TooFewDraws(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EssMode {
    Bulk,
    Tail,
}

/// Per-parameter convergence report.
#[derive(Debug, Clone)]
pub struct ParamDiagnostics {
    pub name: String,
    pub rhat: f64,
    pub ess: f64,
    pub ess_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct DiagnosticsReport {
    pub params: Vec<ParamDiagnostics>,
    pub total_draws: usize,
}

impl DiagnosticsReport {
    /// `param,rhat,ess,ess_pct` rows.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "param,rhat,ess,ess_pct")?;
        for p in &self.params {
            writeln!(
                w,
                "{},{:.6},{:.1},{:.1}",
                p.name,
                p.rhat,
                p.ess,
                100.0 * p.ess_fraction
            )?;
        }
        Ok(())
    }
}

fn split_in_half(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut out = Vec::with_capacity(chains.len() * 2);
    for c in chains {
        let n = c.len();
        if n < 4 {
            out.push(c.clone());
            continue;
        }
        let half = n / 2;
        // when n is odd the middle draw is dropped
        out.push(c[..half].to_vec());
        out.push(c[n - half..].to_vec());
    }
    out
}

/// Between/within variance pieces shared by R-hat and ESS: `(W, var+)`.
fn variance_components(chains: &[Vec<f64>]) -> (f64, f64) {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let means: Vec<f64> = chains.iter().map(|c| mean(&c[..n])).collect();
    let vars: Vec<f64> = chains.iter().map(|c| sample_variance(&c[..n])).collect();
    let w = mean(&vars);
    let b = if m > 1 {
        n as f64 * sample_variance(&means)
    } else {
        0.0
    };
    let var_plus = (n as f64 - 1.0) / n as f64 * w + b / n as f64;
    (w, var_plus)
}

/// Split potential scale reduction factor over chains of one parameter.
///
/// Chains of length 4 or more are split in half first; chains are trimmed to
/// the shortest length. Identical constant chains return exactly 1.0.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64, DiagnosticsError> {
    let split = split_in_half(chains);
    if split.len() < 2 || split.iter().any(|c| c.len() < 2) {
        return Err(DiagnosticsError::TooFewChains);
    }
    let (w, var_plus) = variance_components(&split);
    if w == 0.0 {
        return Ok(1.0);
    }
    Ok((var_plus / w).sqrt())
}

/// Rank-normalizes draws across chains: average ranks for ties, mapped
/// through the standard normal quantile of `(rank - 3/8) / (total + 1/4)`.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let total: usize = chains.iter().map(Vec::len).sum();
    let mut order: Vec<(f64, usize)> = Vec::with_capacity(total);
    let mut offset = 0;
    for c in chains {
        for (k, &v) in c.iter().enumerate() {
            order.push((v, offset + k));
        }
        offset += c.len();
    }
    order.sort_by(|a, b| a.0.partial_cmp(&b.0).expect("finite draws"));
    let mut ranks = vec![0.0; total];
    let mut pos = 0;
    while pos < total {
        let mut end = pos + 1;
        while end < total && order[end].0 == order[pos].0 {
            end += 1;
        }
        let avg_rank = (pos + 1 + end) as f64 / 2.0; // average of 1-based ranks
        for item in &order[pos..end] {
            ranks[item.1] = avg_rank;
        }
        pos = end;
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let mut out = Vec::with_capacity(chains.len());
    let mut offset = 0;
    for c in chains {
        let z: Vec<f64> = ranks[offset..offset + c.len()]
            .iter()
            .map(|&r| normal.inverse_cdf((r - 0.375) / (total as f64 + 0.25)))
            .collect();
        offset += c.len();
        out.push(z);
    }
    out
}

/// Autocovariance at one lag (normalized by `n`); evaluated lag by lag so the
/// Geyer truncation can stop the scan early.
fn autocovariance(chain: &[f64], lag: usize, chain_mean: f64) -> f64 {
    let n = chain.len();
    if lag >= n {
        return 0.0;
    }
    let mut acc = 0.0;
    for k in 0..n - lag {
        acc += (chain[k] - chain_mean) * (chain[k + lag] - chain_mean);
    }
    acc / n as f64
}

fn ess_from_chains(chains: &[Vec<f64>]) -> f64 {
    let m = chains.len();
    let n = chains.iter().map(Vec::len).min().unwrap_or(0);
    let total = (m * n) as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(&c[..n])).collect();
    let (w, var_plus) = variance_components(chains);
    if w == 0.0 || var_plus == 0.0 {
        return total; // constant draws convention
    }
    // Combined autocorrelation across chains, paired per Geyer with an
    // initial-monotone-positive-sequence truncation.
    let rho_at = |t: usize| -> f64 {
        let mean_acov: f64 = chains
            .iter()
            .zip(&means)
            .map(|(c, &mu)| autocovariance(&c[..n], t, mu))
            .sum::<f64>()
            / m as f64;
        1.0 - (w - mean_acov) / var_plus
    };
    let mut sum_pairs = 0.0;
    let mut prev_pair = f64::INFINITY;
    let mut t = 0;
    while t + 1 < n {
        let pair = rho_at(t) + rho_at(t + 1);
        if pair <= 0.0 {
            break;
        }
        let capped = pair.min(prev_pair);
        sum_pairs += capped;
        prev_pair = capped;
        t += 2;
    }
    let tau = (2.0 * sum_pairs - 1.0).max(1.0 / 1.5);
    (total / tau).min(1.5 * total)
}

/// Effective sample size pooled over chains.
///
/// Bulk: rank-normalized split chains with Geyer-truncated combined
/// autocorrelations. Tail: the same machinery applied to exceedance
/// indicators of the pooled 5% and 95% quantiles, reporting the minimum.
pub fn ess(chains: &[Vec<f64>], mode: EssMode) -> Result<f64, DiagnosticsError> {
    let total: usize = chains.iter().map(Vec::len).sum();
    if total < 8 {
        return Err(DiagnosticsError::TooFewDraws(8));
    }
    let split = split_in_half(chains);
    match mode {
        EssMode::Bulk => Ok(ess_from_chains(&rank_normalize(&split))),
        EssMode::Tail => {
            let mut pooled: Vec<f64> = split.iter().flatten().copied().collect();
            pooled.sort_by(|a, b| a.partial_cmp(b).expect("finite draws"));
            let q05 = quantile_sorted(&pooled, 0.05);
            let q95 = quantile_sorted(&pooled, 0.95);
            let indicator = |cut: f64| -> Vec<Vec<f64>> {
                split
                    .iter()
                    .map(|c| c.iter().map(|&v| f64::from(u8::from(v <= cut))).collect())
                    .collect()
            };
            let lo = ess_from_chains(&rank_normalize(&indicator(q05)));
            let hi = ess_from_chains(&rank_normalize(&indicator(q95)));
            Ok(lo.min(hi))
        }
    }
}

/// Builds the per-parameter report for named chains.
pub fn report(
    names: &[String],
    per_param_chains: &[Vec<Vec<f64>>],
) -> Result<DiagnosticsReport, DiagnosticsError> {
    let mut params = Vec::with_capacity(names.len());
    let mut total = 0;
    for (name, chains) in names.iter().zip(per_param_chains) {
        total = chains.iter().map(Vec::len).sum();
        let rhat = split_rhat(chains)?;
        let e = ess(chains, EssMode::Bulk)?;
        params.push(ParamDiagnostics {
            name: name.clone(),
            rhat,
            ess: e,
            ess_fraction: e / total as f64,
        });
    }
    Ok(DiagnosticsReport {
        params,
        total_draws: total,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::util::substream;
    use approx::assert_relative_eq;
    use rand::Rng;
    use rand_distr::StandardNormal;

    #[test]
    fn rhat_hand_fixture() {
        // two length-2 chains; no splitting below length 4
        let chains = vec![vec![0.0, 2.0], vec![1.0, 1.0]];
        let r = split_rhat(&chains).unwrap();
        assert_relative_eq!(r, 0.5f64.sqrt(), epsilon = 1e-12);
    }

    #[test]
    fn rhat_iid_chains_near_one() {
        let mut rng = substream(11, "rhat", 0);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                (0..10_000)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let r = split_rhat(&chains).unwrap();
        assert!((0.99..=1.01).contains(&r), "rhat {r}");
    }

    #[test]
    fn rhat_detects_stuck_chain() {
        let mut a = vec![0.0; 100];
        let mut b = vec![10.0; 100];
        let mut rng = substream(3, "stuck", 0);
        for v in a.iter_mut().chain(b.iter_mut()) {
            *v += 1e-3 * rng.sample::<f64, _>(StandardNormal);
        }
        let r = split_rhat(&[a, b]).unwrap();
        assert!(r > 1.2, "rhat {r}");
        // exactly constant identical chains: documented convention
        let r0 = split_rhat(&[vec![1.0; 10], vec![1.0; 10]]).unwrap();
        assert_eq!(r0, 1.0);
    }

    #[test]
    fn rhat_invariant_under_affine_and_permutation() {
        let mut rng = substream(5, "affine", 0);
        let chains: Vec<Vec<f64>> = (0..3)
            .map(|c| {
                (0..500)
                    .map(|_| rng.sample::<f64, _>(StandardNormal) + 0.1 * c as f64)
                    .collect()
            })
            .collect();
        let r = split_rhat(&chains).unwrap();
        let transformed: Vec<Vec<f64>> = chains
            .iter()
            .map(|c| c.iter().map(|v| 3.0 * v - 7.0).collect())
            .collect();
        assert_relative_eq!(split_rhat(&transformed).unwrap(), r, epsilon = 1e-10);
        let permuted = vec![chains[2].clone(), chains[0].clone(), chains[1].clone()];
        assert_relative_eq!(split_rhat(&permuted).unwrap(), r, epsilon = 1e-12);
    }

    #[test]
    fn ess_white_noise_fraction_near_one() {
        let mut rng = substream(17, "ess", 0);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                (0..5_000)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let total = 20_000.0;
        let e = ess(&chains, EssMode::Bulk).unwrap();
        assert!(
            (0.8..=1.2).contains(&(e / total)),
            "bulk fraction {}",
            e / total
        );
        let et = ess(&chains, EssMode::Tail).unwrap();
        assert!(
            (0.6..=1.5).contains(&(et / total)),
            "tail fraction {}",
            et / total
        );
    }

    #[test]
    fn ess_lag_one_correlated_sequence_half_fraction() {
        // moving-average construction: lag-1 autocorrelation 0.5, negligible
        // beyond, so the ESS fraction sits near 1/(1 + 2 * 0.5) = 1/2
        let mut rng = substream(23, "ma", 0);
        let chains: Vec<Vec<f64>> = (0..4)
            .map(|_| {
                let eps: Vec<f64> = (0..20_001)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect();
                eps.windows(2)
                    .map(|w| (w[0] + w[1]) / 2f64.sqrt())
                    .collect()
            })
            .collect();
        let total: usize = chains.iter().map(Vec::len).sum();
        let e = ess(&chains, EssMode::Bulk).unwrap();
        let fraction = e / total as f64;
        assert!(
            (fraction - 0.5).abs() < 0.075,
            "fraction {fraction} should be near 0.5"
        );
    }

    #[test]
    fn ess_constant_draws_convention() {
        let chains = vec![vec![3.0; 50], vec![3.0; 50]];
        let e = ess(&chains, EssMode::Bulk).unwrap();
        assert_relative_eq!(e, 100.0);
    }

    #[test]
    fn ess_thinned_iid_stays_near_full() {
        let mut rng = substream(29, "thin", 0);
        let base: Vec<f64> = (0..40_000)
            .map(|_| rng.sample::<f64, _>(StandardNormal))
            .collect();
        let thinned: Vec<f64> = base.iter().step_by(4).copied().collect();
        let chains = vec![thinned[..5_000].to_vec(), thinned[5_000..10_000].to_vec()];
        let e = ess(&chains, EssMode::Bulk).unwrap();
        let fraction = e / 10_000.0;
        assert!((0.8..=1.2).contains(&fraction), "fraction {fraction}");
    }

    #[test]
    fn ess_permutation_invariance() {
        let mut rng = substream(31, "perm", 0);
        let chains: Vec<Vec<f64>> = (0..3)
            .map(|_| {
                (0..1_000)
                    .map(|_| rng.sample::<f64, _>(StandardNormal))
                    .collect()
            })
            .collect();
        let e = ess(&chains, EssMode::Bulk).unwrap();
        let permuted = vec![chains[1].clone(), chains[2].clone(), chains[0].clone()];
        assert_relative_eq!(ess(&permuted, EssMode::Bulk).unwrap(), e, epsilon = 1e-9);
    }

    #[test]
    fn too_few_draws_is_an_error() {
        assert!(matches!(
            ess(&[vec![1.0, 2.0, 3.0]], EssMode::Bulk),
            Err(DiagnosticsError::TooFewDraws(_))
        ));
        assert!(matches!(
            split_rhat(&[vec![1.0, 2.0]]),
            Err(DiagnosticsError::TooFewChains)
        ));
    }

    #[test]
    fn report_csv_layout() {
        let names = vec!["nu".to_string()];
        let mut rng = substream(37, "report", 0);
        let chains = vec![vec![
            (0..100)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect::<Vec<f64>>(),
            (0..100)
                .map(|_| rng.sample::<f64, _>(StandardNormal))
                .collect(),
        ]];
        let rep = report(&names, &chains).unwrap();
        let mut buf = Vec::new();
        rep.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("param,rhat,ess,ess_pct\n"));
        assert!(text.lines().nth(1).unwrap().starts_with("nu,"));
    }
}
