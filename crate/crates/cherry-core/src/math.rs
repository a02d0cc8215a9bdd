//! Thin wrappers over `libm` so the crate builds without `std`.

#[inline(always)]
pub fn sin(x: f64) -> f64 {
    libm::sin(x)
}

#[inline(always)]
pub fn cos(x: f64) -> f64 {
    libm::cos(x)
}

#[inline(always)]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline(always)]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline(always)]
pub fn sqrt(x: f64) -> f64 {
    libm::sqrt(x)
}

#[inline(always)]
pub fn floor(x: f64) -> f64 {
    libm::floor(x)
}

#[inline(always)]
pub fn round(x: f64) -> f64 {
    libm::round(x)
}

#[inline(always)]
pub fn hypot(x: f64, y: f64) -> f64 {
    libm::hypot(x, y)
}

#[inline(always)]
pub fn powf(x: f64, y: f64) -> f64 {
    libm::pow(x, y)
}

/// Fractional part mapped into `[0, 1)`.
#[inline(always)]
pub fn wrap_unit(x: f64) -> f64 {
    let w = x - floor(x);
    // floor(x) can round such that w == 1.0 for x just below an integer
    if w >= 1.0 {
        0.0
    } else {
        w
    }
}

/// Distance between two angles on the unit circle, in `[0, 1/2]`.
#[inline(always)]
pub fn circle_dist(a: f64, b: f64) -> f64 {
    let d = wrap_unit(a - b);
    d.min(1.0 - d)
}

pub const TAU: f64 = 6.283185307179586476925286766559;

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn wrap_stays_in_unit_interval() {
        for &x in &[-3.7, -1.0, -1e-17, 0.0, 0.3, 1.0, 2.5, 1e9 + 0.25] {
            let w = wrap_unit(x);
            assert!((0.0..1.0).contains(&w), "wrap({x}) = {w}");
        }
        assert!((wrap_unit(-3.7) - 0.3).abs() < 1e-12);
    }

    #[test]
    fn circle_dist_is_symmetric_and_small() {
        assert!((circle_dist(0.95, 0.05) - 0.1).abs() < 1e-15);
        assert_eq!(circle_dist(0.2, 0.2), 0.0);
        assert!((circle_dist(0.0, 0.5) - 0.5).abs() < 1e-15);
    }
}
