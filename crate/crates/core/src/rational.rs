//! Small-denominator rational recognition for probabilities.

/// Smallest-denominator fraction `p/q` with `q <= max_den` that lies within
/// `tol` of `x`. Returns `None` if no such fraction exists.
pub fn approximate(x: f64, max_den: u64, tol: f64) -> Option<(i64, u64)> {
    if !x.is_finite() {
        return None;
    }
    (1..=max_den).find_map(|q| {
        let p = (x * q as f64).round();
        ((x - p / q as f64).abs() <= tol).then_some((p as i64, q))
    })
}

pub fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

pub fn lcm(a: u64, b: u64) -> u64 {
    a / gcd(a, b) * b
}

/// `"p/q"` annotation used in reports, or `None` when `x` is not a simple
/// rational with denominator at most 100.
pub fn annotate(x: f64) -> Option<String> {
    approximate(x, 100, 1e-9).map(|(p, q)| {
        if q == 1 {
            format!("{p}")
        } else {
            format!("{p}/{q}")
        }
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recognizes_small_fractions() {
        assert_eq!(approximate(5.0 / 6.0, 100, 1e-9), Some((5, 6)));
        assert_eq!(approximate(0.9, 100, 1e-9), Some((9, 10)));
        assert_eq!(approximate(3.0 / 12.0, 100, 1e-9), Some((1, 4)));
        assert_eq!(approximate(0.0, 100, 1e-9), Some((0, 1)));
        assert_eq!(approximate(1.0 / 9.0, 100, 1e-9), Some((1, 9)));
        assert_eq!(approximate(std::f64::consts::PI - 3.0, 100, 1e-9), None);
        assert_eq!(approximate(f64::NAN, 100, 1e-9), None);
    }

    #[test]
    fn annotations() {
        assert_eq!(annotate(0.75).as_deref(), Some("3/4"));
        assert_eq!(annotate(1.0).as_deref(), Some("1"));
        assert_eq!(annotate(1.0 / 101.0), None);
    }

    #[test]
    fn lcm_gcd() {
        assert_eq!(gcd(12, 18), 6);
        assert_eq!(lcm(6, 10), 30);
        assert_eq!(lcm(1, 7), 7);
    }
}
