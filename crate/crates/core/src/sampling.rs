//! Exact binomial and multinomial samplers.
//!
//! Binomial draws use sequential inversion when `n * min(p, 1-p) < 10` and
//! Hörmann's BTRS transformed-rejection sampler otherwise. Both are exact.
//! Multinomial draws chain conditional binomials over the categories.

use std::sync::OnceLock;

use rand::Rng;

/// Below this mean the inversion sampler is used.
const INVERSION_THRESHOLD: f64 = 10.0;

const LN_FACT_TABLE: usize = 256;

fn ln_factorial_table() -> &'static [f64; LN_FACT_TABLE] {
    static TABLE: OnceLock<[f64; LN_FACT_TABLE]> = OnceLock::new();
    TABLE.get_or_init(|| {
        let mut t = [0.0; LN_FACT_TABLE];
        for k in 1..LN_FACT_TABLE {
            t[k] = t[k - 1] + (k as f64).ln();
        }
        t
    })
}

/// `ln(k!)`: exact table below 256, Stirling series above.
pub fn ln_factorial(k: u64) -> f64 {
    if (k as usize) < LN_FACT_TABLE {
        return ln_factorial_table()[k as usize];
    }
    let x = k as f64;
    let x2 = x * x;
    x * x.ln() - x + 0.5 * (std::f64::consts::TAU * x).ln() + 1.0 / (12.0 * x)
        - 1.0 / (360.0 * x * x2)
        + 1.0 / (1260.0 * x2 * x2 * x)
}

/// One exact draw from Binomial(n, p).
pub fn binomial<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    if n == 0 || p <= 0.0 {
        return 0;
    }
    if p >= 1.0 {
        return n;
    }
    if p > 0.5 {
        return n - binomial(n, 1.0 - p, rng);
    }
    if (n as f64) * p < INVERSION_THRESHOLD {
        binomial_inversion(n, p, rng)
    } else {
        binomial_btrs(n, p, rng)
    }
}

fn binomial_inversion<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    let q = 1.0 - p;
    let ratio = p / q;
    let a = (n as f64 + 1.0) * ratio;
    let mut r = ((n as f64) * (-p).ln_1p()).exp();
    let mut u = rng.random::<f64>();
    let mut x = 0u64;
    while u > r {
        u -= r;
        x += 1;
        if x > n {
            // Rounding left residual mass past the support; start over.
            x = 0;
            r = ((n as f64) * (-p).ln_1p()).exp();
            u = rng.random::<f64>();
            continue;
        }
        r *= a / x as f64 - ratio;
    }
    x
}

/// BTRS for `n * p >= 10`, `p <= 1/2`.
fn binomial_btrs<R: Rng + ?Sized>(n: u64, p: f64, rng: &mut R) -> u64 {
    let nf = n as f64;
    let q = 1.0 - p;
    let spq = (nf * p * q).sqrt();
    let b = 1.15 + 2.53 * spq;
    let a = -0.0873 + 0.0248 * b + 0.01 * p;
    let c = nf * p + 0.5;
    let v_r = 0.92 - 4.2 / b;
    let alpha = (2.83 + 5.1 / b) * spq;
    let lpq = (p / q).ln();
    let mode = ((nf + 1.0) * p).floor();
    let h = ln_factorial(mode as u64) + ln_factorial(n - mode as u64);
    loop {
        let u = rng.random::<f64>() - 0.5;
        let v = rng.random::<f64>();
        let us = 0.5 - u.abs();
        let k = ((2.0 * a / us + b) * u + c).floor();
        if k < 0.0 || k > nf {
            continue;
        }
        if us >= 0.07 && v <= v_r {
            return k as u64;
        }
        let ki = k as u64;
        let lhs = (v * alpha / (a / (us * us) + b)).ln();
        let rhs = h - ln_factorial(ki) - ln_factorial(n - ki) + (k - mode) * lpq;
        if lhs <= rhs {
            return ki;
        }
    }
}

/// Exact multinomial draw of `n` items over `probabilities` into `out`.
///
/// Category `k` receives Binomial(remaining, p_k / p_remaining); the last
/// category takes whatever remains, so the components always sum to `n`.
/// `probabilities` must be nonnegative and sum to one up to rounding.
pub fn multinomial_into<R: Rng + ?Sized>(
    n: u64,
    probabilities: &[f64],
    out: &mut [u64],
    rng: &mut R,
) {
    debug_assert_eq!(probabilities.len(), out.len());
    out.fill(0);
    let last = probabilities.len() - 1;
    let mut remaining = n;
    let mut mass = 1.0;
    for (k, &pk) in probabilities[..last].iter().enumerate() {
        if remaining == 0 {
            return;
        }
        if pk > 0.0 {
            let conditional = if mass > 0.0 { (pk / mass).min(1.0) } else { 1.0 };
            let x = binomial(remaining, conditional, rng);
            out[k] = x;
            remaining -= x;
        }
        mass -= pk;
    }
    out[last] = remaining;
}
