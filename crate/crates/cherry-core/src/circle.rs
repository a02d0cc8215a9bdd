//! Rotation numbers, periodic structure, and the unique invariant measure
//! of the completed return circle map.

use alloc::vec::Vec;
use core::fmt;

use crate::field::{FieldSpec, RejectionReport, ValidatedSpec};
use crate::math;
use crate::section::{build_cherry_map_opts, CherryMap, SectionError};

#[derive(Clone, Debug)]
pub struct RotationNumberEstimate {
    /// Asymptotic displacement of the lift, in `[0, 1)`.
    pub value: f64,
    /// A-posteriori bound: spread across seeds plus `1/n_iter`.
    pub err: f64,
    pub n_iter: usize,
    /// Confirmed rational lock `p/q`, if a genuine period-`q` point exists.
    pub lock: Option<(i64, usize)>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CircleStability {
    Sink,
    Source,
    SemiStable,
}

impl fmt::Display for CircleStability {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Sink => "sink",
            Self::Source => "source",
            Self::SemiStable => "semi_stable",
        })
    }
}

#[derive(Clone, Debug)]
pub struct CirclePeriodicOrbit {
    pub theta_star: f64,
    /// Period.
    pub q: usize,
    /// Winding number of `lift^q` at the orbit.
    pub p: i64,
    /// Derivative of `lift^q` at `theta_star` (one-sided at kinks).
    pub multiplier: f64,
    pub stability: CircleStability,
}

#[derive(Debug)]
pub enum CircleError {
    /// Two orbits with different minimal periods: the map construction is
    /// broken (monotone circle maps have a single period).
    InconsistentPeriods { found: Vec<usize> },
    Section(SectionError),
    Rejected(RejectionReport),
    TuningFailed { scan: Vec<(f64, f64)> },
}

impl fmt::Display for CircleError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::InconsistentPeriods { found } => {
                write!(f, "periodic orbits with different minimal periods: {found:?}")
            }
            Self::Section(e) => write!(f, "{e}"),
            Self::Rejected(r) => write!(f, "spec rejected: {r}"),
            Self::TuningFailed { scan } => {
                write!(f, "no bracket for the rotation target in {} scan points", scan.len())
            }
        }
    }
}

impl From<SectionError> for CircleError {
    fn from(e: SectionError) -> Self {
        Self::Section(e)
    }
}

impl From<RejectionReport> for CircleError {
    fn from(e: RejectionReport) -> Self {
        Self::Rejected(e)
    }
}

const ROTATION_SEEDS: [f64; 3] = [0.1234567, 0.4821734, 0.8562291];

/// Plain lift-iteration estimate of the rotation number (no lock check).
pub fn rotation_value(map: &CherryMap, n_iter: usize) -> (f64, f64) {
    let n_iter = n_iter.max(16);
    let mut displacements = [0.0f64; 3];
    for (k, &seed) in ROTATION_SEEDS.iter().enumerate() {
        let mut x = seed;
        for _ in 0..n_iter {
            x = map.eval_lift(x);
        }
        displacements[k] = (x - seed) / n_iter as f64;
    }
    let mean = (displacements[0] + displacements[1] + displacements[2]) / 3.0;
    let spread = displacements
        .iter()
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), &v| {
            (lo.min(v), hi.max(v))
        });
    let err = (spread.1 - spread.0) + 1.0 / n_iter as f64;
    (math::wrap_unit(mean), err)
}

/// Continued-fraction convergents `p/q` of `x` with `q <= q_max`.
pub(crate) fn convergents(x: f64, q_max: usize) -> Vec<(i64, usize)> {
    let mut out = Vec::new();
    let mut a = math::floor(x);
    let mut frac = x - a;
    let (mut p0, mut q0) = (1i64, 0i64);
    let (mut p1, mut q1) = (a as i64, 1i64);
    if q1 as usize <= q_max {
        out.push((p1, q1 as usize));
    }
    for _ in 0..64 {
        if frac.abs() < 1e-13 {
            break;
        }
        let inv = 1.0 / frac;
        a = math::floor(inv);
        frac = inv - a;
        let p2 = a as i64 * p1 + p0;
        let q2 = a as i64 * q1 + q0;
        if q2 as usize > q_max || q2 <= 0 {
            break;
        }
        out.push((p2, q2 as usize));
        p0 = p1;
        q0 = q1;
        p1 = p2;
        q1 = q2;
    }
    out
}

/// Iterates the lift from 3 seeds and reports the averaged displacement;
/// a rational lock is reported only when a continued-fraction convergent
/// is confirmed by an actual periodic point.
pub fn rotation_number(map: &CherryMap, n_iter: usize, q_max: usize) -> RotationNumberEstimate {
    let (value, err) = rotation_value(map, n_iter);
    let mut lock = None;
    for (p, q) in convergents(value, q_max) {
        let orbits = orbits_at(map, p, q);
        if !orbits.is_empty() {
            lock = Some((p, q));
            break;
        }
    }
    RotationNumberEstimate {
        value,
        err,
        n_iter,
        lock,
    }
}

fn lift_pow(map: &CherryMap, theta: f64, q: usize) -> f64 {
    let mut x = theta;
    for _ in 0..q {
        x = map.eval_lift(x);
    }
    x
}

const ROOT_TOL: f64 = 1e-12;
const DEGENERATE_TOL: f64 = 1e-9;
const ORBIT_DEDUP: f64 = 1e-7;
const MULTIPLIER_STEP: f64 = 1e-5;
const SEMI_STABLE_BAND: f64 = 1e-6;

/// All period-`q` orbits with winding `p`, located by sign-change bisection
/// of `lift^q(theta) - theta - p` over the map grid. Monotonicity of the
/// map makes the grid enumeration complete at grid resolution.
fn orbits_at(map: &CherryMap, p: i64, q: usize) -> Vec<CirclePeriodicOrbit> {
    let grid = map.grid();
    let n = grid.len();
    let g = |theta: f64| lift_pow(map, theta, q) - theta - p as f64;

    // degenerate rigid-rational family: the displacement vanishes
    // identically; report one semi-stable representative
    let mut zeroish = 0usize;
    let probe = 64.min(n);
    for k in 0..probe {
        let theta = grid[(k * n) / probe];
        if g(theta).abs() < DEGENERATE_TOL {
            zeroish += 1;
        }
    }
    if zeroish * 10 >= probe * 9 {
        return alloc::vec![CirclePeriodicOrbit {
            theta_star: grid[0],
            q,
            p,
            multiplier: 1.0,
            stability: CircleStability::SemiStable,
        }];
    }

    let mut roots: Vec<f64> = Vec::new();
    let mut prev_theta = grid[0];
    let mut prev_g = g(prev_theta);
    for k in 1..=n {
        let theta = if k < n { grid[k] } else { grid[0] + 1.0 };
        let val = g(theta);
        if prev_g == 0.0 {
            roots.push(math::wrap_unit(prev_theta));
        } else if prev_g < 0.0 && val >= 0.0 || prev_g > 0.0 && val <= 0.0 {
            // bisect
            let (mut lo, mut hi) = (prev_theta, theta);
            let (mut glo, _ghi) = (prev_g, val);
            for _ in 0..200 {
                if hi - lo <= ROOT_TOL {
                    break;
                }
                let mid = 0.5 * (lo + hi);
                let gm = g(mid);
                if (gm <= 0.0) == (glo <= 0.0) {
                    lo = mid;
                    glo = gm;
                } else {
                    hi = mid;
                }
            }
            roots.push(math::wrap_unit(0.5 * (lo + hi)));
        }
        prev_theta = theta;
        prev_g = val;
    }

    // group roots into orbits
    let mut orbits: Vec<CirclePeriodicOrbit> = Vec::new();
    let mut claimed: Vec<f64> = Vec::new();
    for &root in &roots {
        if claimed.iter().any(|&c| math::circle_dist(c, root) < ORBIT_DEDUP) {
            continue;
        }
        let mut x = root;
        for _ in 0..q {
            claimed.push(math::wrap_unit(x));
            x = map.eval_lift(x);
        }
        let h = MULTIPLIER_STEP;
        let multiplier = (lift_pow(map, root + h, q) - lift_pow(map, root - h, q)) / (2.0 * h);
        let stability = if multiplier < 1.0 - SEMI_STABLE_BAND {
            CircleStability::Sink
        } else if multiplier > 1.0 + SEMI_STABLE_BAND {
            CircleStability::Source
        } else {
            CircleStability::SemiStable
        };
        orbits.push(CirclePeriodicOrbit {
            theta_star: root,
            q,
            p,
            multiplier,
            stability,
        });
    }
    orbits
}

fn minimal_period(map: &CherryMap, theta: f64, q: usize) -> usize {
    for q1 in 1..=q {
        if q % q1 != 0 {
            continue;
        }
        let lifted = lift_pow(map, theta, q1);
        let disp = lifted - theta;
        if (disp - math::round(disp)).abs() < 1e-8 {
            return q1;
        }
    }
    q
}

/// Finds the rational lock (if any) and returns every periodic orbit of the
/// map; asserts that all orbits share one minimal period.
pub fn find_periodic_orbits(
    map: &CherryMap,
    q_max: usize,
) -> Result<Vec<CirclePeriodicOrbit>, CircleError> {
    let (value, _) = rotation_value(map, 20_000);
    for (p, q) in convergents(value, q_max) {
        let orbits = orbits_at(map, p, q);
        if orbits.is_empty() {
            continue;
        }
        let mut periods: Vec<usize> = orbits
            .iter()
            .map(|o| minimal_period(map, o.theta_star, o.q))
            .collect();
        periods.sort_unstable();
        periods.dedup();
        if periods.len() > 1 {
            return Err(CircleError::InconsistentPeriods { found: periods });
        }
        return Ok(orbits);
    }
    Ok(Vec::new())
}

/// Empirical distribution function of a map orbit: the numerical
/// semi-conjugacy candidate. Monotone with `cdf(0) = 0`, `cdf(1) = 1`.
#[derive(Clone, Debug)]
pub struct MeasureCdf {
    /// Values at the `n_bins + 1` uniform bin edges.
    pub values: Vec<f64>,
}

impl MeasureCdf {
    pub fn n_bins(&self) -> usize {
        self.values.len() - 1
    }

    pub fn eval(&self, theta: f64) -> f64 {
        let t = math::wrap_unit(theta);
        let n = self.n_bins() as f64;
        let pos = t * n;
        let k = (pos as usize).min(self.n_bins() - 1);
        let s = pos - k as f64;
        self.values[k] * (1.0 - s) + self.values[k + 1] * s
    }
}

const CDF_SEED: f64 = 0.5436121986;

/// Histogram pass over an orbit of length `n_orbit`.
pub fn invariant_measure_cdf(map: &CherryMap, n_orbit: usize, n_bins: usize) -> MeasureCdf {
    let mut counts = alloc::vec![0usize; n_bins];
    let mut theta = CDF_SEED;
    for _ in 0..n_orbit {
        let k = ((math::wrap_unit(theta) * n_bins as f64) as usize).min(n_bins - 1);
        counts[k] += 1;
        theta = map.eval(theta);
    }
    let mut values = Vec::with_capacity(n_bins + 1);
    values.push(0.0);
    let mut acc = 0usize;
    for &c in &counts {
        acc += c;
        values.push(acc as f64 / n_orbit as f64);
    }
    MeasureCdf { values }
}

/// Max over a check grid of the circle distance between `cdf(map(theta))`
/// and `cdf(theta) + rho`: the semi-conjugacy residual `pi o g = R_rho o pi`.
pub fn semiconjugacy_residual(map: &CherryMap, cdf: &MeasureCdf, rho: f64, n_check: usize) -> f64 {
    let mut worst = 0.0f64;
    for k in 0..n_check {
        let theta = k as f64 / n_check as f64;
        let lhs = cdf.eval(map.eval(theta));
        let rhs = cdf.eval(theta) + rho;
        worst = worst.max(math::circle_dist(lhs, rhs));
    }
    worst
}

#[derive(Clone, Copy, Debug)]
pub struct TunerOptions {
    pub n_grid: usize,
    pub max_time: f64,
    pub n_iter: usize,
    pub q_max: usize,
    pub scan_points: usize,
}

impl Default for TunerOptions {
    fn default() -> Self {
        Self {
            n_grid: 256,
            max_time: 60.0,
            n_iter: 30_000,
            q_max: 200,
            scan_points: 17,
        }
    }
}

/// Rotation estimate for one parameter value; `GapNotFound` maps (rigid
/// rotations and other gapless homeomorphisms) are still usable.
fn objective(
    template: &FieldSpec,
    nu: f64,
    opts: &TunerOptions,
) -> Result<(f64, ValidatedSpec), CircleError> {
    let spec = template.with_nu(nu)?.validate()?;
    let map = match build_cherry_map_opts(&spec, opts.n_grid, opts.max_time, false) {
        Ok(map) => map,
        Err(SectionError::GapNotFound(map)) => *map,
        Err(e) => return Err(e.into()),
    };
    let (value, _) = rotation_value(&map, opts.n_iter);
    Ok((value, spec))
}

fn rational_target(target: f64) -> Option<(i64, usize)> {
    convergents(target, 64)
        .into_iter()
        .find(|&(p, q)| (target - p as f64 / q as f64).abs() < 1e-9)
}

/// Bisection on the base slope `nu`, using the rotation number of the
/// completed map as a monotone objective. For a rational target the
/// midpoint of the locking plateau is returned.
pub fn tune_rotation_number(
    template: &FieldSpec,
    target: f64,
    tol: f64,
    opts: &TunerOptions,
) -> Result<ValidatedSpec, CircleError> {
    let mut scan: Vec<(f64, f64)> = Vec::new();
    let mut bracket: Option<((f64, f64), (f64, f64))> = None;
    for k in 0..opts.scan_points {
        let nu = 0.01 + 0.98 * k as f64 / (opts.scan_points - 1) as f64;
        let (rho, _) = objective(template, nu, opts)?;
        scan.push((nu, rho));
        if let Some(&(nu_prev, rho_prev)) = scan.len().checked_sub(2).map(|i| &scan[i]) {
            if rho_prev <= target && target <= rho {
                bracket = Some(((nu_prev, rho_prev), (nu, rho)));
                break;
            }
        }
    }
    let ((mut nu_lo, _), (mut nu_hi, _)) = match bracket {
        Some(b) => b,
        None => return Err(CircleError::TuningFailed { scan }),
    };

    if let Some((_p, _q)) = rational_target(target) {
        // plateau mode: locate both edges of {nu : rho(nu) = target}
        let inside = |rho: f64| (rho - target).abs() <= 1e-6;
        // walk to some locked nu first
        let mut nu_in = None;
        let (mut lo, mut hi) = (nu_lo, nu_hi);
        for _ in 0..60 {
            let mid = 0.5 * (lo + hi);
            let (rho, _) = objective(template, mid, opts)?;
            if inside(rho) {
                nu_in = Some(mid);
                break;
            } else if rho < target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let nu_in = match nu_in {
            Some(v) => v,
            None => return Err(CircleError::TuningFailed { scan }),
        };
        // left edge
        let (mut a, mut b) = (nu_lo, nu_in);
        for _ in 0..50 {
            if b - a <= 1e-10 {
                break;
            }
            let mid = 0.5 * (a + b);
            let (rho, _) = objective(template, mid, opts)?;
            if inside(rho) {
                b = mid;
            } else {
                a = mid;
            }
        }
        let left = b;
        // right edge
        let (mut a2, mut b2) = (nu_in, nu_hi);
        for _ in 0..50 {
            if b2 - a2 <= 1e-10 {
                break;
            }
            let mid = 0.5 * (a2 + b2);
            let (rho, _) = objective(template, mid, opts)?;
            if inside(rho) {
                a2 = mid;
            } else {
                b2 = mid;
            }
        }
        let right = a2;
        let nu_mid = 0.5 * (left + right);
        let (_, spec) = objective(template, nu_mid, opts)?;
        return Ok(spec);
    }

    // irrational target: plain bisection to tolerance
    for _ in 0..200 {
        let mid = 0.5 * (nu_lo + nu_hi);
        let (rho, spec) = objective(template, mid, opts)?;
        if (rho - target).abs() <= tol {
            return Ok(spec);
        }
        if rho < target {
            nu_lo = mid;
        } else {
            nu_hi = mid;
        }
        if nu_hi - nu_lo <= 1e-14 {
            break;
        }
    }
    Err(CircleError::TuningFailed { scan })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rigid_rotation_estimate_is_exact() {
        let map = CherryMap::rigid_rotation(0.381966, 256);
        let est = rotation_number(&map, 4000, 200);
        assert!((est.value - 0.381966).abs() <= 1e-9, "value = {}", est.value);
        assert!(est.lock.is_none(), "unexpected lock {:?}", est.lock);
    }

    #[test]
    fn half_rotation_locks_with_semi_stable_family() {
        let map = CherryMap::rigid_rotation(0.5, 128);
        let est = rotation_number(&map, 2000, 200);
        assert!((est.value - 0.5).abs() < 1e-12);
        assert_eq!(est.lock, Some((1, 2)));
        let orbits = find_periodic_orbits(&map, 200).unwrap();
        assert_eq!(orbits.len(), 1);
        assert_eq!(orbits[0].stability, CircleStability::SemiStable);
        assert!((orbits[0].multiplier - 1.0).abs() <= 1e-9);
    }

    #[test]
    fn convergents_of_golden_mean() {
        let phi = 0.6180339887498949;
        let cs = convergents(phi, 200);
        // Fibonacci ratios 1/2, 2/3, 3/5, 5/8 ... appear after 0/1 and 1/1
        assert!(cs.contains(&(1, 2)));
        assert!(cs.contains(&(2, 3)));
        assert!(cs.contains(&(55, 89)));
        assert!(cs.iter().all(|&(_, q)| q <= 200));
    }

    #[test]
    fn sink_source_pair_is_classified() {
        // lift x + 0.02 * sin-like wiggle: fixed points where displacement
        // crosses zero
        let map = CherryMap::from_lift_fn(
            |x| x + 0.03 * math::sin(math::TAU * x) + 0.0,
            512,
        );
        let orbits = find_periodic_orbits(&map, 50).unwrap();
        assert_eq!(orbits.len(), 2, "{orbits:?}");
        let sinks = orbits
            .iter()
            .filter(|o| o.stability == CircleStability::Sink)
            .count();
        let sources = orbits
            .iter()
            .filter(|o| o.stability == CircleStability::Source)
            .count();
        assert_eq!((sinks, sources), (1, 1));
        for o in &orbits {
            assert_eq!(o.q, 1);
            let res = lift_pow(&map, o.theta_star, 1) - o.theta_star;
            assert!(res.abs() <= 1e-9, "fixed-point residual {res}");
        }
    }

    #[test]
    fn cdf_of_rigid_rotation_is_identity() {
        let map = CherryMap::rigid_rotation(0.3819660113, 64);
        let n_bins = 50;
        let cdf = invariant_measure_cdf(&map, 20_000, n_bins);
        for k in 0..=n_bins {
            let theta = k as f64 / n_bins as f64;
            assert!(
                (cdf.values[k] - theta).abs() <= 2.0 / n_bins as f64,
                "cdf({theta}) = {}",
                cdf.values[k]
            );
        }
        let res = semiconjugacy_residual(&map, &cdf, 0.3819660113, 400);
        assert!(res <= 0.02, "semiconjugacy residual {res}");
    }

    #[test]
    fn cdf_is_monotone_with_fixed_endpoints() {
        let map = CherryMap::from_lift_fn(|x| x + 0.27 + 0.05 * math::sin(math::TAU * x), 256);
        let cdf = invariant_measure_cdf(&map, 10_000, 40);
        assert_eq!(cdf.values[0], 0.0);
        assert!((cdf.values[40] - 1.0).abs() < 1e-12);
        for w in cdf.values.windows(2) {
            assert!(w[1] >= w[0]);
        }
    }

    #[test]
    fn tuner_on_linear_flow_hits_target_exactly() {
        let template = FieldSpec::linear_flow(0.4, alloc::vec![]).unwrap();
        let opts = TunerOptions {
            n_grid: 64,
            n_iter: 4000,
            ..TunerOptions::default()
        };
        let tuned = tune_rotation_number(&template, 0.25, 1e-4, &opts).unwrap();
        let nu = tuned.nu().unwrap();
        assert!((nu - 0.25).abs() <= 1e-5, "nu = {nu}");
    }
}
