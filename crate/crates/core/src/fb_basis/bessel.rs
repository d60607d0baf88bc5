//! Bessel functions of the first kind, `J_n`, for small integer orders.

use std::f64::consts::PI;

use crate::error::{Error, Result};

/// Largest supported angular order.
pub const MAX_ORDER: u32 = 8;

/// Crossover between the power series and backward recurrence.
const SERIES_LIMIT: f64 = 12.0;

/// Angular order `n` of `J_n`, capped at [`MAX_ORDER`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct BesselOrder(u32);

impl BesselOrder {
    pub fn new(n: u32) -> Result<Self> {
        if n > MAX_ORDER {
            return Err(Error::Domain(format!(
                "Bessel order {n} exceeds supported maximum {MAX_ORDER}"
            )));
        }
        Ok(Self(n))
    }

    pub fn get(self) -> u32 {
        self.0
    }
}

/// `J_n(x)` for `x ≥ 0`.
///
/// Uses the ascending power series up to `x = 12` and Miller's backward
/// recurrence normalised by `J_0 + 2·Σ J_2k = 1` beyond that. Absolute
/// error is below `1e-10` on `[0, 30]`.
pub fn bessel_j(n: BesselOrder, x: f64) -> Result<f64> {
    if !x.is_finite() || x < 0.0 {
        return Err(Error::Domain(format!("bessel_j argument must be finite and >= 0, got {x}")));
    }
    if x <= SERIES_LIMIT {
        Ok(series(n.0, x))
    } else {
        Ok(miller(n.0, x))
    }
}

fn series(n: u32, x: f64) -> f64 {
    let half = 0.5 * x;
    let mut term = 1.0;
    for i in 1..=n {
        term *= half / i as f64;
    }
    let q = -half * half;
    let mut sum = term;
    let mut k = 0u32;
    loop {
        k += 1;
        term *= q / (k as f64 * (k + n) as f64);
        sum += term;
        if term.abs() <= 1e-17 * sum.abs().max(1e-300) && k as f64 > half {
            break sum;
        }
        if k > 500 {
            break sum;
        }
    }
}

fn miller(n: u32, x: f64) -> f64 {
    let mut start = x as usize + n as usize + 40;
    if start % 2 == 1 {
        start += 1;
    }
    let mut next = 0.0; // J_{k+1}
    let mut cur = 1e-300; // J_k
    let mut norm = 0.0;
    let mut wanted = 0.0;
    for k in (1..=start).rev() {
        let prev = 2.0 * k as f64 / x * cur - next; // J_{k-1}
        next = cur;
        cur = prev;
        if (k - 1) == n as usize {
            wanted = cur;
        }
        if (k - 1) % 2 == 0 && k - 1 > 0 {
            norm += 2.0 * cur;
        }
        if cur.abs() > 1e250 {
            cur *= 1e-250;
            next *= 1e-250;
            norm *= 1e-250;
            wanted *= 1e-250;
        }
    }
    norm += cur;
    wanted / norm
}

/// The `k`-th positive zero of `J_n`.
///
/// Brackets sign changes on a grid starting near `n + 1.86·n^(1/3)` and
/// refines with bisection until the bracket collapses at `f64` resolution.
/// Each π-wide scanning interval is split into quarters: consecutive zeros of
/// `J_0` are slightly closer than π apart.
pub fn bessel_zero(n: BesselOrder, k: u32) -> Result<f64> {
    if k == 0 {
        return Err(Error::Domain("zero index k must be >= 1".into()));
    }
    let order = n.0 as f64;
    let estimate = order + 1.86 * order.cbrt();
    // start below the first-zero estimate; J_n has no positive zero before it
    let mut lo = if n.0 == 0 { 0.0 } else { 0.5 * estimate };
    let step = PI / 4.0;
    let limit = estimate + (k as f64 + 2.0) * PI + 4.0 * PI;
    let mut f_lo = bessel_j(n, lo)?;
    let mut found = 0;
    while lo < limit {
        let hi = lo + step;
        let f_hi = bessel_j(n, hi)?;
        if f_hi == 0.0 || f_lo.signum() != f_hi.signum() {
            found += 1;
            if found == k {
                return if f_hi == 0.0 { Ok(hi) } else { bisect(n, lo, hi, f_lo) };
            }
        }
        lo = hi;
        f_lo = f_hi;
    }
    Err(Error::Domain(format!(
        "no sign change for zero {k} of J_{} below {limit:.3}",
        n.0
    )))
}

fn bisect(n: BesselOrder, mut lo: f64, mut hi: f64, mut f_lo: f64) -> Result<f64> {
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mid <= lo || mid >= hi {
            break;
        }
        let f_mid = bessel_j(n, mid)?;
        if f_mid == 0.0 {
            return Ok(mid);
        }
        if f_mid.signum() == f_lo.signum() {
            lo = mid;
            f_lo = f_mid;
        } else {
            hi = mid;
        }
    }
    Ok(0.5 * (lo + hi))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn order(n: u32) -> BesselOrder {
        BesselOrder::new(n).unwrap()
    }

    /// Term-by-term defining series with explicit factorials, Kahan-summed.
    fn oracle(n: u32, x: f64) -> f64 {
        let mut sum = 0.0f64;
        let mut comp = 0.0f64;
        let mut fact_k = 1.0f64;
        for k in 0..120u32 {
            if k > 0 {
                fact_k *= k as f64;
            }
            let fact_kn: f64 = (1..=(k + n)).map(|i| i as f64).product();
            let t = (-1f64).powi(k as i32) * (x / 2.0).powi((2 * k + n) as i32) / (fact_k * fact_kn);
            if !t.is_finite() {
                break;
            }
            let y = t - comp;
            let s = sum + y;
            comp = (s - sum) - y;
            sum = s;
        }
        sum
    }

    fn oracle_zero(n: u32, lo: f64, hi: f64) -> f64 {
        let (mut lo, mut hi) = (lo, hi);
        let f_lo = oracle(n, lo);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if oracle(n, mid).signum() == f_lo.signum() {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        0.5 * (lo + hi)
    }

    #[test]
    fn values_at_origin() {
        assert_eq!(bessel_j(order(0), 0.0).unwrap(), 1.0);
        for n in 1..=MAX_ORDER {
            assert_eq!(bessel_j(order(n), 0.0).unwrap(), 0.0);
        }
    }

    #[test]
    fn agrees_with_series_oracle_on_small_arguments() {
        for n in 0..=MAX_ORDER {
            for i in 0..=60 {
                let x = i as f64 * 0.2;
                let err = (bessel_j(order(n), x).unwrap() - oracle(n, x)).abs();
                assert!(err < 1e-11, "J_{n}({x}) err {err}");
            }
        }
    }

    #[test]
    fn recurrence_branch_is_continuous_and_satisfies_three_term_relation() {
        for n in 0..=MAX_ORDER {
            let below = series(n, 12.0);
            let above = miller(n, 12.0);
            assert!((below - above).abs() < 1e-11, "n={n}: {below} vs {above}");
        }
        // J_{n-1}(x) + J_{n+1}(x) = (2n/x) J_n(x)
        for i in 0..=72 {
            let x = 12.0 + i as f64 * 0.25;
            for n in 1..MAX_ORDER {
                let lhs = bessel_j(order(n - 1), x).unwrap() + bessel_j(order(n + 1), x).unwrap();
                let rhs = 2.0 * n as f64 / x * bessel_j(order(n), x).unwrap();
                assert!((lhs - rhs).abs() < 1e-11, "x={x} n={n}");
            }
        }
    }

    #[test]
    fn large_argument_reference_values() {
        // tabulated: J_0(20) = 0.16702466434058316, J_1(30) = -0.11875106261662294
        assert!((bessel_j(order(0), 20.0).unwrap() - 0.167_024_664_340_583_16).abs() < 1e-12);
        assert!((bessel_j(order(1), 30.0).unwrap() + 0.118_751_062_616_622_94).abs() < 1e-12);
    }

    #[test]
    fn first_zeros_match_bisection_oracle() {
        let cases = [(0, 1, 2.0, 3.0), (1, 1, 3.0, 4.5), (0, 2, 5.0, 6.0)];
        for (n, k, lo, hi) in cases {
            let expected = oracle_zero(n, lo, hi);
            let got = bessel_zero(order(n), k).unwrap();
            assert!((got - expected).abs() < 1e-12, "({n},{k}) {got} vs {expected}");
        }
        assert!((bessel_zero(order(0), 1).unwrap() - 2.404826).abs() < 1e-5);
        assert!((bessel_zero(order(1), 1).unwrap() - 3.831706).abs() < 1e-5);
        assert!((bessel_zero(order(0), 2).unwrap() - 5.520078).abs() < 1e-5);
        assert!(bessel_j(order(0), 2.404826).unwrap().abs() < 1e-6);
    }

    #[test]
    fn zeros_are_roots_and_increasing() {
        for n in 0..=MAX_ORDER {
            let mut prev = 0.0;
            for k in 1..=5 {
                let z = bessel_zero(order(n), k).unwrap();
                assert!(z > prev);
                assert!(bessel_j(order(n), z).unwrap().abs() < 1e-9);
                prev = z;
            }
        }
    }

    #[test]
    fn domain_errors() {
        assert!(BesselOrder::new(9).is_err());
        assert!(bessel_j(order(0), -1.0).is_err());
        assert!(bessel_j(order(0), f64::NAN).is_err());
        assert!(bessel_zero(order(0), 0).is_err());
    }
}
