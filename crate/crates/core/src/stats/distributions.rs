//! Distribution functions needed by the comparison tests.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use libm::{erfc, lgamma};

use super::quadrature::{integrate, integrate_pieces};

const CF_EPS: f64 = 1e-16;
const CF_TINY: f64 = 1e-300;
const CF_MAX_ITER: usize = 20_000;

/// Tolerance of the studentized range CDF.
pub const PTUKEY_TOL: f64 = 1e-6;

fn ln_beta(a: f64, b: f64) -> f64 {
    lgamma(a) + lgamma(b) - lgamma(a + b)
}

// Modified Lentz evaluation of the incomplete beta continued fraction.
fn beta_cf(a: f64, b: f64, x: f64) -> f64 {
    let (qab, qap, qam) = (a + b, a + 1.0, a - 1.0);
    let mut c = 1.0;
    let mut d = 1.0 - qab * x / qap;
    if d.abs() < CF_TINY {
        d = CF_TINY;
    }
    d = 1.0 / d;
    let mut h = d;
    for m in 1..=CF_MAX_ITER {
        let m = m as f64;
        let m2 = 2.0 * m;
        let aa = m * (b - m) * x / ((qam + m2) * (a + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        h *= d * c;
        let aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2));
        d = 1.0 + aa * d;
        if d.abs() < CF_TINY {
            d = CF_TINY;
        }
        c = 1.0 + aa / c;
        if c.abs() < CF_TINY {
            c = CF_TINY;
        }
        d = 1.0 / d;
        let del = d * c;
        h *= del;
        if (del - 1.0).abs() < CF_EPS {
            break;
        }
    }
    h
}

/// Regularized incomplete beta I_x(a, b).
pub fn incomplete_beta(a: f64, b: f64, x: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    if x >= 1.0 {
        return 1.0;
    }
    let ln_front = a * x.ln() + b * (1.0 - x).ln() - ln_beta(a, b);
    if x < (a + 1.0) / (a + b + 2.0) {
        ln_front.exp() * beta_cf(a, b, x) / a
    } else {
        1.0 - ln_front.exp() * beta_cf(b, a, 1.0 - x) / b
    }
}

/// P(F > x) for the F(d1, d2) distribution.
pub fn f_sf(x: f64, d1: f64, d2: f64) -> f64 {
    if x.is_nan() {
        return f64::NAN;
    }
    if x <= 0.0 {
        return 1.0;
    }
    if x.is_infinite() {
        return 0.0;
    }
    incomplete_beta(d2 / 2.0, d1 / 2.0, d2 / (d2 + d1 * x)).clamp(0.0, 1.0)
}

pub fn f_cdf(x: f64, d1: f64, d2: f64) -> f64 {
    1.0 - f_sf(x, d1, d2)
}

/// Two-sided P(|T| > |t|) for Student's t with `df` degrees of freedom.
pub fn t_two_sided(t: f64, df: f64) -> f64 {
    if t.is_infinite() {
        return 0.0;
    }
    incomplete_beta(df / 2.0, 0.5, df / (df + t * t)).clamp(0.0, 1.0)
}

pub fn normal_cdf(z: f64) -> f64 {
    0.5 * erfc(-z * FRAC_1_SQRT_2)
}

fn normal_pdf(z: f64) -> f64 {
    (-0.5 * z * z).exp() / (2.0 * PI).sqrt()
}

// Φ(z) − Φ(z − w) for w ≥ 0, computed on the side that avoids cancellation.
fn normal_band(z: f64, w: f64) -> f64 {
    let lo = z - w;
    if lo > 0.0 {
        0.5 * (erfc(lo * FRAC_1_SQRT_2) - erfc(z * FRAC_1_SQRT_2))
    } else if z < 0.0 {
        0.5 * (erfc(-z * FRAC_1_SQRT_2) - erfc(-lo * FRAC_1_SQRT_2))
    } else {
        1.0 - 0.5 * erfc(z * FRAC_1_SQRT_2) - 0.5 * erfc(-lo * FRAC_1_SQRT_2)
    }
}

/// CDF of the range of `k` independent standard normals.
fn range_cdf(w: f64, k: usize) -> f64 {
    if w <= 0.0 {
        return 0.0;
    }
    let km1 = (k - 1) as i32;
    let f = |z: f64| normal_pdf(z) * normal_band(z, w).powi(km1);
    let points = [-8.5, -6.0, -4.0, -2.0, 0.0, 2.0, 4.0, 6.0, 8.5];
    (k as f64 * integrate_pieces(f, &points, 1e-12)).clamp(0.0, 1.0)
}

// Above this the chi scale is so concentrated that the outer integral is
// replaced by its limit.
const DF_LIMIT: f64 = 1e7;

/// CDF of the studentized range for `k` means and `df` degrees of freedom:
/// ∫ f_S(s) · P(range < q·s) ds with S = sqrt(χ²_df / df).
pub fn ptukey(q: f64, k: usize, df: f64) -> f64 {
    if q <= 0.0 || k < 2 {
        return 0.0;
    }
    if q.is_infinite() {
        return 1.0;
    }
    if df >= DF_LIMIT {
        return range_cdf(q, k);
    }
    let half = df / 2.0;
    let ln_c = std::f64::consts::LN_2 + half * half.ln() - lgamma(half);
    let ln_f = |s: f64| ln_c + (df - 1.0) * s.ln() - half * s * s;
    let mode = ((df - 1.0).max(0.0) / df).sqrt();
    let peak = if mode > 0.0 { ln_f(mode) } else { ln_c };
    let step = 0.25 / df.sqrt();
    let mut lo = mode;
    while lo > 0.0 && ln_f(lo) > peak - 45.0 {
        lo -= step;
    }
    let mut hi = mode + step;
    while ln_f(hi) > peak - 45.0 {
        hi += step;
    }
    let lo = lo.max(0.0);
    let pieces = 24;
    let points: Vec<f64> = (0..=pieces).map(|i| lo + (hi - lo) * i as f64 / pieces as f64).collect();
    let f = |s: f64| {
        if s <= 0.0 {
            return 0.0;
        }
        ln_f(s).exp() * range_cdf(q * s, k)
    };
    integrate_pieces(f, &points, PTUKEY_TOL * 1e-2).clamp(0.0, 1.0)
}

/// Upper tail of the studentized range.
pub fn ptukey_sf(q: f64, k: usize, df: f64) -> f64 {
    (1.0 - ptukey(q, k, df)).clamp(0.0, 1.0)
}

/// Integral of the F(d1, d2) density over [0, x], kept as a second route to
/// the CDF for consistency checks.
pub fn f_cdf_by_quadrature(x: f64, d1: f64, d2: f64) -> f64 {
    if x <= 0.0 {
        return 0.0;
    }
    // substitute y = d1 t / (d1 t + d2) so the beta kernel sits on [0, 1],
    // then y = u² to remove the endpoint singularity when d1 < 2
    let (a, b) = (d1 / 2.0, d2 / 2.0);
    let y = d1 * x / (d1 * x + d2);
    let ln_b = ln_beta(a, b);
    if y <= 0.5 {
        let g = |u: f64| {
            if u <= 0.0 {
                return if a == 0.5 { 2.0 * (-ln_b).exp() } else { 0.0 };
            }
            2.0 * ((2.0 * a - 1.0) * u.ln() + (b - 1.0) * (1.0 - u * u).ln() - ln_b).exp()
        };
        integrate(g, 0.0, y.sqrt(), 1e-13)
    } else {
        let g = |u: f64| {
            if u <= 0.0 {
                return if b == 0.5 { 2.0 * (-ln_b).exp() } else { 0.0 };
            }
            2.0 * ((2.0 * b - 1.0) * u.ln() + (a - 1.0) * (1.0 - u * u).ln() - ln_b).exp()
        };
        1.0 - integrate(g, 0.0, (1.0 - y).sqrt(), 1e-13)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn incomplete_beta_closed_forms() {
        // I_x(1, b) = 1 − (1 − x)^b, I_x(a, 1) = x^a
        for &x in &[0.01, 0.3, 0.5, 0.77, 0.999] {
            assert!((incomplete_beta(1.0, 3.5, x) - (1.0 - (1.0 - x).powf(3.5))).abs() < 1e-14);
            assert!((incomplete_beta(2.5, 1.0, x) - x.powf(2.5)).abs() < 1e-14);
        }
        assert_eq!(incomplete_beta(2.0, 3.0, 0.0), 0.0);
        assert_eq!(incomplete_beta(2.0, 3.0, 1.0), 1.0);
    }

    #[test]
    fn t_tails() {
        // df = 1 is Cauchy: P(|T| > 1) = 1/2
        assert!((t_two_sided(1.0, 1.0) - 0.5).abs() < 1e-14);
        assert_eq!(t_two_sided(0.0, 7.0), 1.0);
    }

    #[test]
    fn range_of_two_normals() {
        // range of two standard normals is |N(0, 2)|
        for &w in &[0.1, 1.0, 2.5, 5.0] {
            let exact = 2.0 * normal_cdf(w / 2f64.sqrt()) - 1.0;
            assert!((range_cdf(w, 2) - exact).abs() < 1e-11);
        }
    }
}
