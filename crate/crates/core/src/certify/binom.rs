//! Clopper–Pearson bounds via the regularized incomplete beta function.

use crate::error::{Error, Result};

const BISECTION_TOL: f64 = 1e-10;

/// `ln Γ(x)` for `x > 0` (Lanczos, g = 7).
pub fn ln_gamma(x: f64) -> f64 {
    const G: f64 = 7.0;
    const COEF: [f64; 9] = [
        0.999_999_999_999_809_9,
        676.520_368_121_885_1,
        -1_259.139_216_722_402_8,
        771.323_428_777_653_1,
        -176.615_029_162_140_6,
        12.507_343_278_686_905,
        -0.138_571_095_265_720_12,
        9.984_369_578_019_572e-6,
        1.505_632_735_149_311_6e-7,
    ];
    if x < 0.5 {
        // reflection
        let pi = std::f64::consts::PI;
        return (pi / (pi * x).sin()).ln() - ln_gamma(1.0 - x);
    }
    let x = x - 1.0;
    let mut a = COEF[0];
    let t = x + G + 0.5;
    for (i, c) in COEF.iter().enumerate().skip(1) {
        a += c / (x + i as f64);
    }
    0.5 * (2.0 * std::f64::consts::PI).ln() + (x + 0.5) * t.ln() - t + a.ln()
}

/// Continued fraction for the incomplete beta function (modified Lentz).
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    const FPMIN: f64 = 1e-300;
    const EPS: f64 = 1e-16;
    let qab = a + b;
    let qap = a + 1.0;
    let qam = a - 1.0;
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < FPMIN {
        d = FPMIN;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..20_000 {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < FPMIN {
            d = FPMIN;
        }
        c = 1.0 + aa / c;
        if c.abs() < FPMIN {
            c = FPMIN;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta function `I_x(a, b)`.
pub fn beta_inc(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = ln_gamma(a + b) - ln_gamma(a) - ln_gamma(b) + a * x.ln() + b * (-x).ln_1p();
    let front = ln_front.exp();
    if x < (a + 1.0) / (a + b + 2.0) {
        front * beta_cf(a, b, x) / a
    } else {
        1.0 - front * beta_cf(b, a, 1.0 - x) / b
    }
}

fn check(k: u64, n: u64, alpha: f64) -> Result<()> {
    if n == 0 || k > n {
        return Err(Error::Domain(format!("need 0 <= k <= n, n >= 1; got k={k}, n={n}")));
    }
    if !(alpha > 0.0 && alpha < 1.0) {
        return Err(Error::Domain(format!("alpha must be in (0, 1), got {alpha}")));
    }
    Ok(())
}

/// Smallest `p` in `[0, 1]` (to the bisection tolerance) with `f(p) >= target`
/// for nondecreasing `f`; returns the bracket `(lo, hi)`.
fn bisect(f: impl Fn(f64) -> f64, target: f64) -> (f64, f64) {
    let (mut lo, mut hi) = (0.0, 1.0);
    while hi - lo > BISECTION_TOL {
        let mid = 0.5 * (lo + hi);
        if f(mid) >= target {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    (lo, hi)
}

/// One-sided Clopper–Pearson lower bound at level `alpha`: the `p` solving
/// `P[Binomial(n, p) >= k] = alpha`, i.e. the `alpha` quantile of
/// `Beta(k, n - k + 1)`. The lower end of the bisection bracket is returned.
pub fn binom_lower_bound(k: u64, n: u64, alpha: f64) -> Result<f64> {
    check(k, n, alpha)?;
    if k == 0 {
        return Ok(0.0);
    }
    if k == n {
        return Ok(alpha.powf(1.0 / n as f64));
    }
    let (a, b) = (k as f64, (n - k + 1) as f64);
    Ok(bisect(|p| beta_inc(a, b, p), alpha).0)
}

/// One-sided Clopper–Pearson upper bound: the `p` solving
/// `P[Binomial(n, p) <= k] = alpha`. The upper end of the bracket is returned.
pub fn binom_upper_bound(k: u64, n: u64, alpha: f64) -> Result<f64> {
    check(k, n, alpha)?;
    if k == n {
        return Ok(1.0);
    }
    if k == 0 {
        return Ok(1.0 - alpha.powf(1.0 / n as f64));
    }
    let (a, b) = (k as f64 + 1.0, (n - k) as f64);
    Ok(bisect(|p| beta_inc(a, b, p), 1.0 - alpha).1)
}
