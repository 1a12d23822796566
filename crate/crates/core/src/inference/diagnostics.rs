//! Convergence diagnostics on scalar draws, one slice per chain.

use statrs::distribution::{ContinuousCDF, Normal};

use crate::error::{Error, Result};

fn check_chains(chains: &[Vec<f64>], min_chains: usize, min_draws: usize) -> Result<usize> {
    if chains.len() < min_chains {
        return Err(Error::Argument(format!("need at least {min_chains} chains, got {}", chains.len())));
    }
    let n = chains[0].len();
    if chains.iter().any(|c| c.len() != n) {
        return Err(Error::Argument("chains differ in length".into()));
    }
    if n < min_draws {
        return Err(Error::Argument(format!("need at least {min_draws} draws per chain, got {n}")));
    }
    if chains.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Input("non-finite draw".into()));
    }
    Ok(n)
}

fn is_constant(chains: &[Vec<f64>]) -> bool {
    let first = chains[0][0];
    chains.iter().flatten().all(|&v| v == first)
}

/// Ranks of the pooled draws (ties averaged), mapped to normal scores.
fn rank_normalize(chains: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let mut pooled: Vec<(f64, usize)> = chains.iter().flatten().copied().zip(0..).collect();
    pooled.sort_by(|a, b| a.0.total_cmp(&b.0));
    let s = pooled.len();
    let mut ranks = vec![0.0; s];
    let mut i = 0;
    while i < s {
        let mut j = i;
        while j + 1 < s && pooled[j + 1].0 == pooled[i].0 {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for item in &pooled[i..=j] {
            ranks[item.1] = r;
        }
        i = j + 1;
    }
    let normal = Normal::new(0.0, 1.0).expect("standard normal");
    let scores: Vec<f64> = ranks
        .iter()
        .map(|r| normal.inverse_cdf((r - 0.375) / (s as f64 + 0.25)))
        .collect();
    let n = chains[0].len();
    scores.chunks(n).map(|c| c.to_vec()).collect()
}

fn mean(x: &[f64]) -> f64 {
    x.iter().sum::<f64>() / x.len() as f64
}

fn sample_variance(x: &[f64]) -> f64 {
    let m = mean(x);
    x.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / (x.len() as f64 - 1.0)
}

/// Potential scale reduction of the given chains.
fn rhat(chains: &[Vec<f64>]) -> f64 {
    let n = chains[0].len() as f64;
    let means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let w = chains.iter().map(|c| sample_variance(c)).sum::<f64>() / chains.len() as f64;
    let b = n * sample_variance(&means);
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    let var_plus = (n - 1.0) / n * w + b / n;
    (var_plus / w).sqrt()
}

/// Rank-normalized split-R̂: each chain is halved (dropping the middle draw
/// of odd-length chains), pooled draws are replaced by normal scores of
/// their ranks, and the classic between/within ratio is computed on the
/// scores. Constant input gives exactly 1.
pub fn split_rhat(chains: &[Vec<f64>]) -> Result<f64> {
    check_chains(chains, 1, 4)?;
    if is_constant(chains) {
        return Ok(1.0);
    }
    let half = chains[0].len() / 2;
    let odd = chains[0].len() % 2;
    let split: Vec<Vec<f64>> = chains
        .iter()
        .flat_map(|c| [c[..half].to_vec(), c[half + odd..].to_vec()])
        .collect();
    Ok(rhat(&rank_normalize(&split)))
}

/// Multi-chain effective sample size from within-chain autocovariances and
/// Geyer's initial monotone sequence. Constant input gives 0.
pub fn effective_sample_size(chains: &[Vec<f64>]) -> Result<f64> {
    let n = check_chains(chains, 1, 4)?;
    if is_constant(chains) {
        return Ok(0.0);
    }
    let n_chains = chains.len();
    let centered: Vec<Vec<f64>> = chains
        .iter()
        .map(|c| {
            let m = mean(c);
            c.iter().map(|v| v - m).collect()
        })
        .collect();
    let acov = |lag: usize| -> f64 {
        centered
            .iter()
            .map(|c| c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64)
            .sum::<f64>()
            / n_chains as f64
    };
    let chain_means: Vec<f64> = chains.iter().map(|c| mean(c)).collect();
    let mean_var = acov(0) * n as f64 / (n as f64 - 1.0);
    let mut var_plus = mean_var * (n as f64 - 1.0) / n as f64;
    if n_chains > 1 {
        var_plus += sample_variance(&chain_means);
    }
    let rho_at = |lag: usize| 1.0 - (mean_var - acov(lag)) / var_plus;

    let mut rho = vec![0.0; n + 2];
    let mut rho_even = 1.0;
    rho[0] = rho_even;
    let mut rho_odd = rho_at(1);
    rho[1] = rho_odd;
    let mut s = 1;
    while s < n - 4 && rho_even + rho_odd > 0.0 {
        rho_even = rho_at(s + 1);
        rho_odd = rho_at(s + 2);
        if rho_even + rho_odd >= 0.0 {
            rho[s + 1] = rho_even;
            rho[s + 2] = rho_odd;
        }
        s += 2;
    }
    let max_s = s;
    if rho_even > 0.0 {
        rho[max_s + 1] = rho_even;
    }
    let mut s = 1;
    while s + 3 <= max_s {
        if rho[s + 1] + rho[s + 2] > rho[s - 1] + rho[s] {
            rho[s + 1] = (rho[s - 1] + rho[s]) / 2.0;
            rho[s + 2] = rho[s + 1];
        }
        s += 2;
    }
    let total = (n_chains * n) as f64;
    let tau = (-1.0 + 2.0 * rho[..max_s].iter().sum::<f64>() + rho[max_s + 1]).max(1.0 / total.log10());
    Ok(total / tau)
}

/// [`effective_sample_size`] divided by the total number of draws.
pub fn ess_ratio(chains: &[Vec<f64>]) -> Result<f64> {
    let ess = effective_sample_size(chains)?;
    Ok(ess / (chains.len() * chains[0].len()) as f64)
}
