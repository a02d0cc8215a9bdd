//! The transverse circle `S0 = {y = 0}`: first returns, the completed
//! return circle map with its flat interval, return-time statistics, and
//! the scalar linear / scaled linear Poincaré cocycles.
//!
//! The completed map is sampled through the forward flow. Each forward
//! sample `theta -> f(theta)` carries its exact lift displacement (the
//! integrator works on the universal cover), so the lift of the map is
//! exact at the nodes. The plug blocks a band of inverse orbits, which
//! shows up as a gap in the forward image; the completed map is the
//! inverse of the forward map extended constantly across that gap. It is
//! stored with both graph axes negated, which keeps the monotone/flat
//! structure and the multipliers and makes its rotation number equal to
//! the forward-flow rotation number (the raw inverse-time map would carry
//! `1 - rho`).

use alloc::boxed::Box;
use alloc::vec::Vec;
use core::fmt;

use crate::field::ValidatedSpec;
use crate::flow::{locate_y_crossing, FlowError, Mode, StepControl, Stepper};
use crate::math;
use crate::torus::TorusPoint;

#[derive(Clone, Copy, Debug)]
pub struct SectionCrossing {
    /// x-coordinate on the section, in `[0, 1)`.
    pub theta: f64,
    /// Time of flight from the start of the query.
    pub time: f64,
    /// `||Y||` at the crossing.
    pub speed: f64,
}

#[derive(Clone, Debug)]
pub enum ReturnOutcome {
    Crossed(SectionCrossing),
    /// No return within `max_time`; `truncated` marks a step-underflow stall.
    NonReturning { truncated: bool },
}

#[derive(Debug)]
pub enum SectionError {
    Flow(FlowError),
    FixtureHasNoSection,
    SingularStart,
    /// The forward image covers the circle: not in the Cherry-plug regime.
    /// Carries the (gapless) completed map so rigid-rotation-like cases
    /// remain usable.
    GapNotFound(Box<CherryMap>),
    NonMonotoneSamples { at: f64 },
    TooFewSamples,
}

impl fmt::Display for SectionError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::Flow(e) => write!(f, "flow error: {e}"),
            Self::FixtureHasNoSection => write!(f, "planar fixture has no section circle"),
            Self::SingularStart => write!(f, "start point is a singularity"),
            Self::GapNotFound(_) => write!(f, "forward image covers the circle (no gap)"),
            Self::NonMonotoneSamples { at } => {
                write!(f, "forward return samples lost monotonicity near theta = {at:.6}")
            }
            Self::TooFewSamples => write!(f, "too few returning samples to build a map"),
        }
    }
}

impl From<FlowError> for SectionError {
    fn from(e: FlowError) -> Self {
        Self::Flow(e)
    }
}

pub(crate) struct RawReturn {
    pub theta_new: f64,
    /// Exact lift displacement: `lift(f)(theta) = theta + lift_delta`.
    pub lift_delta: f64,
    pub time: f64,
    pub speed: f64,
}

/// Integrates from `(theta, 0)` to the next upward crossing of the section.
pub(crate) fn first_return_raw(
    spec: &ValidatedSpec,
    theta: f64,
    max_time: f64,
) -> Result<Result<RawReturn, bool>, SectionError> {
    if matches!(spec.spec(), crate::field::FieldSpec::PlanarLinearFixture { .. }) {
        return Err(SectionError::FixtureHasNoSection);
    }
    let ctrl = StepControl::default();
    let mut stepper = Stepper::new(spec.spec(), (theta, 0.0), ctrl, Mode::PLAIN, 1.0);
    loop {
        match stepper.step_to(max_time) {
            Ok(Some(rec)) => {
                if rec.to.y >= 1.0 {
                    let (t_c, s) = locate_y_crossing(&stepper, &rec, 1.0);
                    let v = spec.spec().eval_raw(s.x, s.y);
                    return Ok(Ok(RawReturn {
                        theta_new: math::wrap_unit(s.x),
                        lift_delta: s.x - theta,
                        time: t_c,
                        speed: v.norm(),
                    }));
                }
            }
            Ok(None) => return Ok(Err(false)),
            Err(FlowError::StepUnderflow { .. }) => return Ok(Err(true)),
            Err(e) => return Err(e.into()),
        }
    }
}

/// First return of `theta` to the section under the forward flow.
pub fn first_return(
    spec: &ValidatedSpec,
    theta: f64,
    max_time: f64,
) -> Result<ReturnOutcome, SectionError> {
    match first_return_raw(spec, theta, max_time)? {
        Ok(raw) => Ok(ReturnOutcome::Crossed(SectionCrossing {
            theta: raw.theta_new,
            time: raw.time,
            speed: raw.speed,
        })),
        Err(truncated) => Ok(ReturnOutcome::NonReturning { truncated }),
    }
}

/// The arc of the circle on which the completed map is constant.
#[derive(Clone, Copy, Debug)]
pub struct FlatInterval {
    /// Arc from `lo` to `hi` in the positive direction (may wrap through 0).
    pub lo: f64,
    pub hi: f64,
    /// The constant map value on the arc.
    pub value: f64,
}

impl FlatInterval {
    pub fn contains(&self, theta: f64) -> bool {
        let t = math::wrap_unit(theta - self.lo);
        let len = math::wrap_unit(self.hi - self.lo);
        t <= len
    }

    pub fn length(&self) -> f64 {
        math::wrap_unit(self.hi - self.lo)
    }
}

/// Sampled monotone degree-one circle map with an optional flat interval.
#[derive(Clone, Debug)]
pub struct CherryMap {
    grid: Vec<f64>,
    lift: Vec<f64>,
    slope: Vec<f64>,
    flat: Option<FlatInterval>,
    return_times: Option<Vec<Option<f64>>>,
    /// Section coordinate of the stable-branch trace (flow coordinates).
    stable_hit: Option<f64>,
    /// Forward-image gap endpoints (flow coordinates).
    gap: Option<(f64, f64)>,
    n_grid: usize,
    max_time: f64,
}

impl CherryMap {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    pub fn lift_values(&self) -> &[f64] {
        &self.lift
    }

    pub fn flat_interval(&self) -> Option<&FlatInterval> {
        self.flat.as_ref()
    }

    pub fn return_times(&self) -> Option<&[Option<f64>]> {
        self.return_times.as_deref()
    }

    /// First section hit of the saddle's stable branch, in flow coordinates.
    pub fn stable_hit(&self) -> Option<f64> {
        self.stable_hit
    }

    /// Forward-image gap endpoints `(a_left, a_right)`, in flow coordinates.
    pub fn gap_endpoints(&self) -> Option<(f64, f64)> {
        self.gap
    }

    pub fn requested_grid(&self) -> usize {
        self.n_grid
    }

    pub fn build_max_time(&self) -> f64 {
        self.max_time
    }

    /// Map coordinate -> flow section coordinate (and back: the transform
    /// is an involution).
    pub fn to_flow_coord(theta: f64) -> f64 {
        math::wrap_unit(-theta)
    }

    /// Monotone lift; `eval_lift(x + 1) = eval_lift(x) + 1`.
    pub fn eval_lift(&self, x: f64) -> f64 {
        let g0 = self.grid[0];
        let shift = math::floor(x - g0);
        let r = x - shift;
        // r in [g0, g0 + 1)
        let n = self.grid.len();
        let (lo, hi) = (0usize, n); // cells: [i, i+1), last wraps to grid[0]+1
        let mut a = lo;
        let mut b = hi;
        while b - a > 1 {
            let mid = (a + b) / 2;
            let gx = if mid < n { self.grid[mid] } else { g0 + 1.0 };
            if gx <= r {
                a = mid;
            } else {
                b = mid;
            }
        }
        let (x0, y0, m0) = (self.grid[a], self.lift[a], self.slope[a]);
        let (x1, y1, m1) = if a + 1 < n {
            (self.grid[a + 1], self.lift[a + 1], self.slope[a + 1])
        } else {
            (g0 + 1.0, self.lift[0] + 1.0, self.slope[0])
        };
        let h = x1 - x0;
        let value = if h <= 0.0 {
            y0
        } else {
            let s = ((r - x0) / h).clamp(0.0, 1.0);
            let s2 = s * s;
            let s3 = s2 * s;
            let h00 = 2.0 * s3 - 3.0 * s2 + 1.0;
            let h10 = s3 - 2.0 * s2 + s;
            let h01 = -2.0 * s3 + 3.0 * s2;
            let h11 = s3 - s2;
            h00 * y0 + h * (h10 * m0 + h11 * m1) + h01 * y1
        };
        // clamp interpolation wobble so the lift stays monotone
        value.clamp(y0, y1) + shift
    }

    /// The circle map itself.
    pub fn eval(&self, theta: f64) -> f64 {
        math::wrap_unit(self.eval_lift(theta))
    }

    /// Interpolated forward return time at a map coordinate, `None` inside
    /// the non-returning band.
    pub fn eval_return_time(&self, theta: f64) -> Option<f64> {
        let times = self.return_times.as_ref()?;
        let t = math::wrap_unit(theta);
        let n = self.grid.len();
        let g0 = self.grid[0];
        let r = t - math::floor(t - g0);
        let mut a = 0usize;
        let mut b = n;
        while b - a > 1 {
            let mid = (a + b) / 2;
            let gx = if mid < n { self.grid[mid] } else { g0 + 1.0 };
            if gx <= r {
                a = mid;
            } else {
                b = mid;
            }
        }
        let ia = a;
        let ib = (a + 1) % n;
        match (times[ia], times[ib]) {
            (Some(ta), Some(tb)) => {
                let x0 = self.grid[ia];
                let x1 = if a + 1 < n { self.grid[a + 1] } else { g0 + 1.0 };
                let h = x1 - x0;
                if h <= 0.0 {
                    Some(ta)
                } else {
                    let s = ((r - x0) / h).clamp(0.0, 1.0);
                    Some(ta + s * (tb - ta))
                }
            }
            _ => None,
        }
    }

    /// Exact rotation fixture: `theta -> theta + rho`.
    pub fn rigid_rotation(rho: f64, n: usize) -> CherryMap {
        let grid: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let lift: Vec<f64> = grid.iter().map(|&g| g + rho).collect();
        let slope = alloc::vec![1.0; n];
        CherryMap {
            grid,
            lift,
            slope,
            flat: None,
            return_times: Some(alloc::vec![Some(1.0); n]),
            stable_hit: None,
            gap: None,
            n_grid: n,
            max_time: 0.0,
        }
    }

    /// Fixture built from an explicit lift; the lift must be monotone
    /// non-decreasing with `lift(x + 1) = lift(x) + 1`.
    pub fn from_lift_fn(f: impl Fn(f64) -> f64, n: usize) -> CherryMap {
        let grid: Vec<f64> = (0..n).map(|i| i as f64 / n as f64).collect();
        let lift: Vec<f64> = grid.iter().map(|&g| f(g)).collect();
        let slope = fritsch_butland_slopes(&grid, &lift);
        CherryMap {
            grid,
            lift,
            slope,
            flat: None,
            return_times: None,
            stable_hit: None,
            gap: None,
            n_grid: n,
            max_time: 0.0,
        }
    }
}

/// Monotone-preserving node derivatives (Fritsch-Butland), cyclic with
/// period 1 in x and +1 in the values.
fn fritsch_butland_slopes(grid: &[f64], lift: &[f64]) -> Vec<f64> {
    let n = grid.len();
    let h = |i: usize| -> f64 {
        if i + 1 < n {
            grid[i + 1] - grid[i]
        } else {
            grid[0] + 1.0 - grid[n - 1]
        }
    };
    let d = |i: usize| -> f64 {
        let dy = if i + 1 < n {
            lift[i + 1] - lift[i]
        } else {
            lift[0] + 1.0 - lift[n - 1]
        };
        let hh = h(i);
        if hh > 0.0 {
            dy / hh
        } else {
            0.0
        }
    };
    (0..n)
        .map(|i| {
            let prev = if i == 0 { n - 1 } else { i - 1 };
            let d0 = d(prev);
            let d1 = d(i);
            if d0 <= 0.0 || d1 <= 0.0 {
                0.0
            } else {
                let h0 = h(prev);
                let h1 = h(i);
                let w1 = 2.0 * h1 + h0;
                let w2 = h1 + 2.0 * h0;
                (w1 + w2) / (w1 / d0 + w2 / d1)
            }
        })
        .collect()
}

struct ForwardSample {
    theta: f64,
    /// lift of the forward return: `theta + delta`.
    lift: f64,
}

const JUMP_CELL_WIDTH: f64 = 1e-9;
const GAP_MIN_LENGTH: f64 = 0.01;
/// Extra adaptive samples allowed, as a multiple of `n_grid`.
const REFINE_BUDGET: usize = 4;

/// Samples the forward return map on `n_grid` points (plus adaptive
/// refinement where the image spreads), detects the image gap bounded by
/// the saddle's unstable-branch hits, and assembles the completed map.
pub fn build_cherry_map(
    spec: &ValidatedSpec,
    n_grid: usize,
    max_time: f64,
) -> Result<CherryMap, SectionError> {
    build_cherry_map_opts(spec, n_grid, max_time, true)
}

pub fn build_cherry_map_opts(
    spec: &ValidatedSpec,
    n_grid: usize,
    max_time: f64,
    with_return_times: bool,
) -> Result<CherryMap, SectionError> {
    let n_grid = n_grid.max(16);
    let mut samples: Vec<ForwardSample> = Vec::with_capacity(2 * n_grid);
    for i in 0..n_grid {
        let theta = i as f64 / n_grid as f64;
        if let Ok(raw) = first_return_raw(spec, theta, max_time)? {
            samples.push(ForwardSample {
                theta,
                lift: theta + raw.lift_delta,
            });
        }
        // non-returning grid points sit inside the capture hole; the
        // adaptive pass below resolves its boundary from the image side
    }
    if samples.len() < n_grid / 2 {
        return Err(SectionError::TooFewSamples);
    }

    // Refine cells whose image spread is large: this both sharpens the
    // gap cell and densifies the cliff edges of the completed map.
    let target = 4.0 / n_grid as f64;
    let mut budget = REFINE_BUDGET * n_grid;
    let mut i = 0;
    while i + 1 <= samples.len() && budget > 0 {
        let (theta_a, lift_a) = (samples[i].theta, samples[i].lift);
        let (theta_b, lift_b) = if i + 1 < samples.len() {
            (samples[i + 1].theta, samples[i + 1].lift)
        } else {
            (samples[0].theta + 1.0, samples[0].lift + 1.0)
        };
        let spread = lift_b - lift_a;
        let width = theta_b - theta_a;
        if spread < -1e-4 {
            return Err(SectionError::NonMonotoneSamples { at: theta_a });
        }
        if spread > target && width > JUMP_CELL_WIDTH {
            let theta_mid = 0.5 * (theta_a + theta_b);
            match first_return_raw(spec, math::wrap_unit(theta_mid), max_time)? {
                Ok(raw) => {
                    // lift continuity: the displacement is chart-exact
                    let lift_mid = theta_mid + raw.lift_delta;
                    samples.insert(
                        i + 1,
                        ForwardSample {
                            theta: theta_mid,
                            lift: lift_mid,
                        },
                    );
                    budget -= 1;
                    continue; // re-examine the left half
                }
                Err(_) => {
                    // capture hole: treat as a jump cell boundary marker by
                    // narrowing from both sides via bisection on returns
                    let (lo, hi) =
                        shrink_capture_cell(spec, theta_a, theta_b, max_time, &mut budget)?;
                    samples.insert(
                        i + 1,
                        ForwardSample {
                            theta: lo.theta,
                            lift: lo.lift,
                        },
                    );
                    samples.insert(
                        i + 2,
                        ForwardSample {
                            theta: hi.theta,
                            lift: hi.lift,
                        },
                    );
                    i += 2;
                    continue;
                }
            }
        }
        i += 1;
    }

    // sanity: monotone lift along the samples; integration noise near the
    // capture funnel (where the map derivative vanishes) may wobble at the
    // solver tolerance and is clamped, anything larger is structural
    for i in 1..samples.len() {
        if samples[i].lift < samples[i - 1].lift {
            if samples[i - 1].lift - samples[i].lift > 1e-4 {
                return Err(SectionError::NonMonotoneSamples { at: samples[i].theta });
            }
            samples[i].lift = samples[i - 1].lift;
        }
    }

    // Jump cell: the widest image spread between cyclically consecutive
    // samples.
    let m = samples.len();
    let mut jump_idx = 0usize;
    let mut jump_spread = f64::NEG_INFINITY;
    for idx in 0..m {
        let (la, lb) = if idx + 1 < m {
            (samples[idx].lift, samples[idx + 1].lift)
        } else {
            (samples[m - 1].lift, samples[0].lift + 1.0)
        };
        if lb - la > jump_spread {
            jump_spread = lb - la;
            jump_idx = idx;
        }
    }

    let has_gap = jump_spread >= GAP_MIN_LENGTH && {
        let wa = samples[jump_idx].theta;
        let wb = if jump_idx + 1 < m {
            samples[jump_idx + 1].theta
        } else {
            samples[0].theta + 1.0
        };
        wb - wa <= 16.0 * JUMP_CELL_WIDTH
    };

    let (flat_meta, stable_hit, gap) = if has_gap {
        let a = &samples[jump_idx];
        let (b_theta, b_lift) = if jump_idx + 1 < m {
            (samples[jump_idx + 1].theta, samples[jump_idx + 1].lift)
        } else {
            (samples[0].theta + 1.0, samples[0].lift + 1.0)
        };
        let theta_s = math::wrap_unit(0.5 * (a.theta + b_theta));
        let a_left = math::wrap_unit(a.lift);
        let a_right = math::wrap_unit(b_lift);
        (
            Some(FlatInterval {
                lo: math::wrap_unit(-a_right),
                hi: math::wrap_unit(-a_left),
                value: math::wrap_unit(-theta_s),
            }),
            Some(theta_s),
            Some((a_left, a_right)),
        )
    } else {
        (None, None, None)
    };

    // Graph transform: (theta, F) -> (-F, -theta), re-anchored into [0, 1).
    let mut nodes: Vec<(f64, f64)> = samples
        .iter()
        .map(|s| {
            let a = -s.lift;
            let k = math::floor(a);
            (a - k, -s.theta - k)
        })
        .collect();
    nodes.sort_by(|p, q| p.0.partial_cmp(&q.0).unwrap());
    // merge numerically coincident abscissae
    let mut grid: Vec<f64> = Vec::with_capacity(nodes.len());
    let mut lift: Vec<f64> = Vec::with_capacity(nodes.len());
    for (a, v) in nodes {
        if let Some(&last) = grid.last() {
            if a - last < 1e-12 {
                continue;
            }
        }
        grid.push(a);
        lift.push(v);
    }
    if grid.len() < 8 {
        return Err(SectionError::TooFewSamples);
    }
    // clamp residual wobble; anything substantial is a construction bug
    for idx in 1..lift.len() {
        if lift[idx] < lift[idx - 1] {
            if lift[idx - 1] - lift[idx] > 1e-4 {
                return Err(SectionError::NonMonotoneSamples { at: grid[idx] });
            }
            lift[idx] = lift[idx - 1];
        }
    }
    let slope = fritsch_butland_slopes(&grid, &lift);

    let return_times = if with_return_times {
        let mut times: Vec<Option<f64>> = Vec::with_capacity(grid.len());
        for &g in &grid {
            let flow_theta = CherryMap::to_flow_coord(g);
            let t = match first_return_raw(spec, flow_theta, max_time)? {
                Ok(raw) => Some(raw.time),
                Err(_) => None,
            };
            times.push(t);
        }
        Some(times)
    } else {
        None
    };

    let map = CherryMap {
        grid,
        lift,
        slope,
        flat: flat_meta,
        return_times,
        stable_hit,
        gap,
        n_grid,
        max_time,
    };

    if map.flat.is_none() {
        return Err(SectionError::GapNotFound(Box::new(map)));
    }
    // flatness invariant on the detected interval
    let flat = map.flat.as_ref().unwrap();
    debug_assert!(flat.length() >= GAP_MIN_LENGTH);
    Ok(map)
}

struct CaptureEdge {
    theta: f64,
    lift: f64,
}

/// Shrinks a cell whose interior failed to return within `max_time` down to
/// its returning edges by bisection from each side.
fn shrink_capture_cell(
    spec: &ValidatedSpec,
    theta_a: f64,
    theta_b: f64,
    max_time: f64,
    budget: &mut usize,
) -> Result<(CaptureEdge, CaptureEdge), SectionError> {
    let mut probe = |theta: f64| -> Result<Option<RawReturn>, SectionError> {
        if *budget > 0 {
            *budget -= 1;
        }
        Ok(first_return_raw(spec, math::wrap_unit(theta), max_time)?.ok())
    };
    // left edge
    let mut lo = theta_a;
    let mut hi = 0.5 * (theta_a + theta_b);
    let mut best_left: Option<CaptureEdge> = None;
    for _ in 0..40 {
        if hi - lo <= JUMP_CELL_WIDTH {
            break;
        }
        let mid = 0.5 * (lo + hi);
        match probe(mid)? {
            Some(raw) => {
                best_left = Some(CaptureEdge {
                    theta: mid,
                    lift: mid + raw.lift_delta,
                });
                lo = mid;
            }
            None => hi = mid,
        }
    }
    // right edge
    let mut lo2 = 0.5 * (theta_a + theta_b);
    let mut hi2 = theta_b;
    let mut best_right: Option<CaptureEdge> = None;
    for _ in 0..40 {
        if hi2 - lo2 <= JUMP_CELL_WIDTH {
            break;
        }
        let mid = 0.5 * (lo2 + hi2);
        match probe(mid)? {
            Some(raw) => {
                best_right = Some(CaptureEdge {
                    theta: mid,
                    lift: mid + raw.lift_delta,
                });
                hi2 = mid;
            }
            None => lo2 = mid,
        }
    }
    match (best_left, best_right) {
        (Some(l), Some(r)) => Ok((l, r)),
        _ => Err(SectionError::TooFewSamples),
    }
}

/// First section hits of the saddle's two unstable branches, by direct
/// integration from `saddle +- delta * e_u`. Used as the independent check
/// of the gap endpoints.
pub fn unstable_branch_hits(
    spec: &ValidatedSpec,
    max_time: f64,
) -> Result<(f64, f64), SectionError> {
    let saddle = spec.saddle().ok_or(SectionError::SingularStart)?;
    let j = saddle.jacobian;
    // unstable eigenvector: eigenvalue with positive real part
    let lambda = saddle.eigenvalues[0].0;
    let e_u = unit_eigenvector(j.a, j.b, j.c, j.d, lambda);
    let delta = 1e-7;
    let mut hits = [0.0f64; 2];
    for (k, sgn) in [(0usize, 1.0f64), (1usize, -1.0f64)] {
        let x0 = saddle.position.x() + sgn * delta * e_u.0;
        let y0 = saddle.position.y() + sgn * delta * e_u.1;
        let ctrl = StepControl::default();
        let mut stepper = Stepper::new(spec.spec(), (x0, y0), ctrl, Mode::PLAIN, 1.0);
        let next_level = math::floor(y0) + 1.0;
        let mut found = None;
        while found.is_none() {
            match stepper.step_to(max_time) {
                Ok(Some(rec)) => {
                    if rec.to.y >= next_level {
                        let (_, s) = locate_y_crossing(&stepper, &rec, next_level);
                        found = Some(math::wrap_unit(s.x));
                    }
                }
                Ok(None) => return Err(SectionError::TooFewSamples),
                Err(e) => return Err(e.into()),
            }
        }
        hits[k] = found.unwrap();
    }
    Ok((hits[0], hits[1]))
}

fn unit_eigenvector(a: f64, b: f64, c: f64, d: f64, lambda: f64) -> (f64, f64) {
    // (A - lambda I) v = 0; pick the better-conditioned row
    let (vx, vy) = if b.abs() > c.abs() {
        (b, lambda - a)
    } else if c.abs() > 0.0 {
        (lambda - d, c)
    } else if (a - lambda).abs() < (d - lambda).abs() {
        (1.0, 0.0)
    } else {
        (0.0, 1.0)
    };
    let n = math::hypot(vx, vy);
    (vx / n, vy / n)
}

/// Scalar linear and scaled linear Poincaré cocycle values along an orbit
/// segment, in signed log scale (the raw values underflow or overflow on
/// long hyperbolic segments).
#[derive(Clone, Debug)]
pub struct CocycleTrace {
    pub t_grid: Vec<f64>,
    pub sign_psi: Vec<f64>,
    pub log_abs_psi: Vec<f64>,
    pub log_abs_psi_star: Vec<f64>,
    pub speed: Vec<f64>,
    /// `ln det Phi_t`, stable accumulation.
    pub log_det: Vec<f64>,
    pub div_integral: Vec<f64>,
    pub truncated: bool,
}

impl CocycleTrace {
    pub fn len(&self) -> usize {
        self.t_grid.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t_grid.is_empty()
    }

    pub fn end_time(&self) -> f64 {
        *self.t_grid.last().unwrap()
    }

    /// Raw `psi(t_i)`; saturates to 0/inf outside the f64 range.
    pub fn psi(&self, i: usize) -> f64 {
        self.sign_psi[i] * math::exp(self.log_abs_psi[i])
    }

    /// Raw `psi*(t_i)`.
    pub fn psi_star(&self, i: usize) -> f64 {
        self.sign_psi[i] * math::exp(self.log_abs_psi_star[i])
    }
}

/// Pushes a unit normal through the variational flow and projects it back
/// to the normal line at each sample; `psi*` rescales by the speed ratio.
pub fn cocycle_trace(
    spec: &ValidatedSpec,
    x0: TorusPoint,
    t_final: f64,
) -> Result<CocycleTrace, SectionError> {
    let v0 = spec.eval(x0);
    let speed0 = v0.norm();
    if speed0 < 1e-8 {
        return Err(SectionError::SingularStart);
    }
    // tighter than the default: the psi/det identity budget is 1e-6
    // relative along the whole trace
    let ctrl = StepControl {
        rel_tol: 1e-10,
        abs_tol: 1e-13,
        ..StepControl::default()
    };
    let mut stepper = Stepper::new(spec.spec(), (x0.x(), x0.y()), ctrl, Mode::FULL, 1.0);
    let mut trace = CocycleTrace {
        t_grid: alloc::vec![0.0],
        sign_psi: alloc::vec![1.0],
        log_abs_psi: alloc::vec![0.0],
        log_abs_psi_star: alloc::vec![0.0],
        speed: alloc::vec![speed0],
        log_det: alloc::vec![0.0],
        div_integral: alloc::vec![0.0],
        truncated: false,
    };
    loop {
        match stepper.step_to(t_final) {
            Ok(Some(rec)) => {
                let s = &rec.to;
                let v = spec.spec().eval_raw(s.x, s.y);
                let speed = v.norm();
                if speed < 1e-8 {
                    trace.truncated = true;
                    break;
                }
                let p = s.wrapped();
                let near_singularity = spec
                    .singularities()
                    .iter()
                    .any(|sing| p.dist(&sing.position) < 1e-6);
                if near_singularity {
                    trace.truncated = true;
                    break;
                }
                let acc = stepper.tangent.as_ref().unwrap();
                let (sign, log_psi) = acc.psi_log();
                trace.t_grid.push(stepper.t);
                trace.sign_psi.push(sign);
                trace.log_abs_psi.push(log_psi);
                trace
                    .log_abs_psi_star
                    .push(log_psi + math::ln(speed0 / speed));
                trace.speed.push(speed);
                trace.log_det.push(acc.log_det());
                trace.div_integral.push(s.div);
            }
            Ok(None) => break,
            Err(FlowError::StepUnderflow { .. }) => {
                trace.truncated = true;
                break;
            }
            Err(e) => return Err(e.into()),
        }
    }
    Ok(trace)
}

#[derive(Clone, Debug)]
pub struct ReturnTimeStats {
    pub mean_tau: f64,
    pub samples: usize,
    pub skipped: usize,
    /// Dyadic histogram: `(upper_edge, count)` with buckets `[2^k, 2^{k+1})`.
    pub tail: Vec<(f64, usize)>,
}

/// Birkhoff average of the forward return time along an orbit of the
/// completed map. Return times are obtained by direct integration at each
/// visited point, so deep visits near the capture point are not smoothed
/// by grid interpolation. Samples whose forward orbit does not return
/// within the map's build horizon are skipped and counted.
pub fn return_time_statistics(
    map: &CherryMap,
    spec: &ValidatedSpec,
    n_orbit: usize,
) -> Result<ReturnTimeStats, SectionError> {
    let max_time = if map.build_max_time() > 0.0 {
        map.build_max_time()
    } else {
        60.0
    };
    let mut theta = 0.5436121986; // generic seed
    let mut sum = 0.0;
    let mut count = 0usize;
    let mut skipped = 0usize;
    let mut buckets: Vec<usize> = alloc::vec![0; 16];
    for _ in 0..n_orbit {
        let flow_theta = CherryMap::to_flow_coord(theta);
        match first_return_raw(spec, flow_theta, max_time)? {
            Ok(raw) => {
                sum += raw.time;
                count += 1;
                let mut k = 0usize;
                let mut edge = 0.25;
                while raw.time >= edge * 2.0 && k + 1 < buckets.len() {
                    edge *= 2.0;
                    k += 1;
                }
                buckets[k] += 1;
            }
            Err(_) => skipped += 1,
        }
        theta = map.eval(theta);
    }
    let tail: Vec<(f64, usize)> = buckets
        .iter()
        .enumerate()
        .map(|(k, &c)| (0.25 * math::powf(2.0, (k + 1) as f64), c))
        .filter(|&(_, c)| c > 0)
        .collect();
    Ok(ReturnTimeStats {
        mean_tau: if count > 0 { sum / count as f64 } else { f64::NAN },
        samples: count,
        skipped,
        tail,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldSpec, Plug};

    fn linear(nu: f64) -> ValidatedSpec {
        FieldSpec::linear_flow(nu, vec![]).unwrap().validate().unwrap()
    }

    #[test]
    fn linear_flow_first_return_is_rigid_rotation() {
        let spec = linear(0.3);
        match first_return(&spec, 0.2, 10.0).unwrap() {
            ReturnOutcome::Crossed(c) => {
                assert!((c.theta - 0.5).abs() < 1e-9, "theta' = {}", c.theta);
                assert!((c.time - 1.0).abs() < 1e-9, "time = {}", c.time);
                assert!((c.speed - math::hypot(0.3, 1.0)).abs() < 1e-9);
            }
            other => panic!("expected crossing, got {other:?}"),
        }
    }

    #[test]
    fn linear_flow_map_reports_gap_not_found() {
        let spec = linear(0.25);
        match build_cherry_map(&spec, 64, 20.0) {
            Err(SectionError::GapNotFound(map)) => {
                assert!(map.flat_interval().is_none());
                // the completed map is the rigid rotation by nu
                for &theta in &[0.0, 0.31, 0.77] {
                    assert!((map.eval_lift(theta) - (theta + 0.25)).abs() < 1e-8);
                }
                let times = map.return_times().unwrap();
                assert!(times.iter().all(|t| (t.unwrap() - 1.0).abs() < 1e-9));
            }
            other => panic!("expected GapNotFound, got {:?}", other.map(|_| ())),
        }
    }

    #[test]
    fn rigid_rotation_fixture_is_exact() {
        let map = CherryMap::rigid_rotation(0.381966, 128);
        assert!((map.eval_lift(2.4) - 2.781966).abs() < 1e-12);
    }

    #[test]
    fn cherry_map_is_monotone_with_flat_interval() {
        let spec = FieldSpec::cherry(
            0.6,
            Plug {
                cx: 0.5,
                cy: 0.5,
                r: 0.2,
                v0: 0.25,
                kappa: 1.0,
                gamma: 4.0,
            },
            vec![],
        )
        .unwrap()
        .validate()
        .unwrap();
        let map = build_cherry_map(&spec, 256, 60.0).unwrap();
        let lift = map.lift_values();
        for w in lift.windows(2) {
            assert!(w[1] >= w[0]);
        }
        let flat = map.flat_interval().unwrap();
        assert!(flat.length() > GAP_MIN_LENGTH);
        // lift variation across the flat arc
        let a = map.eval_lift(flat.lo);
        let b = map.eval_lift(flat.lo + flat.length());
        assert!((b - a).abs() <= 1e-4, "flatness {}", (b - a).abs());
        // the constant value is the stable-branch trace, reflected
        assert!(
            math::circle_dist(map.eval(flat.lo + 0.5 * flat.length()), flat.value) <= 1e-6
        );
    }

    #[test]
    fn gap_endpoints_match_unstable_branch_hits() {
        let spec = FieldSpec::cherry(
            0.6,
            Plug {
                cx: 0.5,
                cy: 0.5,
                r: 0.2,
                v0: 0.25,
                kappa: 1.0,
                gamma: 4.0,
            },
            vec![],
        )
        .unwrap()
        .validate()
        .unwrap();
        let map = build_cherry_map_opts(&spec, 256, 60.0, false).unwrap();
        let (ga, gb) = map.gap_endpoints().unwrap();
        let (h1, h2) = unstable_branch_hits(&spec, 60.0).unwrap();
        let direct = math::circle_dist(ga, h1).max(math::circle_dist(gb, h2));
        let swapped = math::circle_dist(ga, h2).max(math::circle_dist(gb, h1));
        let err = direct.min(swapped);
        assert!(err <= 1e-4, "gap endpoints off by {err}");
    }

    #[test]
    fn linear_cocycle_is_identically_one() {
        let spec = linear(0.45);
        let trace = cocycle_trace(&spec, TorusPoint::new(0.2, 0.6), 12.0).unwrap();
        assert!(!trace.truncated);
        for i in 0..trace.len() {
            assert!((trace.psi(i) - 1.0).abs() < 1e-9);
            assert!((trace.psi_star(i) - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn fixture_cocycle_matches_closed_form() {
        use crate::torus::Mat2;
        let spec = FieldSpec::planar_linear_fixture(Mat2::diag(2.0, -1.0))
            .unwrap()
            .validate()
            .unwrap();
        // x0 on the unstable axis: speed grows like e^{2t}, det Phi = e^t,
        // so psi = e^{-t}
        let trace = cocycle_trace(&spec, TorusPoint::new(0.01, 0.0), 3.0).unwrap();
        assert!(!trace.truncated);
        let t_end = trace.end_time();
        assert!((t_end - 3.0).abs() < 1e-12);
        let n = trace.len() - 1;
        let psi_end = trace.psi(n);
        let expected = math::exp(-t_end);
        assert!(
            (psi_end - expected).abs() / expected <= 1e-6,
            "psi(3) = {psi_end}, expected {expected}"
        );
    }

    #[test]
    fn psi_identities_hold_along_cherry_trace() {
        let spec = FieldSpec::cherry(
            0.6,
            Plug {
                cx: 0.5,
                cy: 0.5,
                r: 0.2,
                v0: 0.25,
                kappa: 1.0,
                gamma: 4.0,
            },
            vec![],
        )
        .unwrap()
        .validate()
        .unwrap();
        let trace = cocycle_trace(&spec, TorusPoint::new(0.15, 0.0), 40.0).unwrap();
        let speed0 = trace.speed[0];
        for i in 0..trace.len() {
            // psi = det Phi * speed0/speed, compared in log scale; the
            // log-difference is the relative error
            assert!(trace.sign_psi[i] > 0.0, "psi lost positivity at i={i}");
            let det_route = trace.log_det[i] + math::ln(speed0 / trace.speed[i]);
            let rel = (trace.log_abs_psi[i] - det_route).abs();
            assert!(rel <= 1e-6, "psi/det identity off by {rel} at i={i}");
            let scaled = trace.log_abs_psi[i] + math::ln(speed0 / trace.speed[i]);
            assert!((trace.log_abs_psi_star[i] - scaled).abs() <= 1e-12);
        }
    }

    #[test]
    fn rigid_map_return_stats_are_exact() {
        let spec = linear(0.381966);
        let map = match build_cherry_map(&spec, 64, 20.0) {
            Err(SectionError::GapNotFound(map)) => *map,
            other => panic!("unexpected: {:?}", other.map(|_| ())),
        };
        let stats = return_time_statistics(&map, &spec, 500).unwrap();
        assert_eq!(stats.skipped, 0);
        assert!((stats.mean_tau - 1.0).abs() < 1e-9);
    }
}
