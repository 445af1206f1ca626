//! Bernoulli KL divergence and the confidence bounds built on it.

use thiserror::Error;

#[derive(Debug, Clone, Copy, PartialEq, Error)]
#[error("kl_bernoulli({p}, {q}) is undefined")]
pub struct KlDomainError {
    pub p: f64,
    pub q: f64,
}

const TOLERANCE: f64 = 1e-6;

fn xlogx_over(x: f64, y: f64) -> f64 {
    if x == 0.0 {
        0.0
    } else {
        x * (x / y).ln()
    }
}

/// `p ln(p/q) + (1-p) ln((1-p)/(1-q))`, with `0 ln 0 = 0`.
pub fn kl_bernoulli(p: f64, q: f64) -> Result<f64, KlDomainError> {
    if !(0.0..=1.0).contains(&p) || !(0.0..=1.0).contains(&q) {
        return Err(KlDomainError { p, q });
    }
    if p == q {
        return Ok(0.0);
    }
    if q == 0.0 || q == 1.0 {
        return Err(KlDomainError { p, q });
    }
    Ok((xlogx_over(p, q) + xlogx_over(1.0 - p, 1.0 - q)).max(0.0))
}

fn kl_or_inf(p: f64, q: f64) -> f64 {
    kl_bernoulli(p, q).unwrap_or(f64::INFINITY)
}

/// Largest `q >= p̂` with `trials * kl(p̂, q) <= level`, to within 1e-6.
pub fn kl_ucb(successes: u64, trials: u64, level: f64) -> f64 {
    assert!(trials >= 1 && successes <= trials);
    let p = successes as f64 / trials as f64;
    let n = trials as f64;
    if n * kl_or_inf(p, 1.0) <= level {
        return 1.0;
    }
    let (mut lo, mut hi) = (p, 1.0);
    while hi - lo > TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if n * kl_or_inf(p, mid) <= level {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    lo
}

/// Smallest `q <= p̂` with `trials * kl(p̂, q) <= level`, to within 1e-6.
pub fn kl_lcb(successes: u64, trials: u64, level: f64) -> f64 {
    assert!(trials >= 1 && successes <= trials);
    let p = successes as f64 / trials as f64;
    let n = trials as f64;
    if n * kl_or_inf(p, 0.0) <= level {
        return 0.0;
    }
    let (mut lo, mut hi) = (0.0, p);
    while hi - lo > TOLERANCE {
        let mid = 0.5 * (lo + hi);
        if n * kl_or_inf(p, mid) <= level {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    hi
}

/// Exploration rate of KL-LUCB after `t` rounds over `arms` arms.
pub fn lucb_beta(arms: usize, t: u64, delta: f64) -> f64 {
    let alpha = 1.1;
    let k = 405.5;
    let temp = (k * arms as f64 * (t as f64).powf(alpha) / delta).ln();
    temp + temp.ln()
}
