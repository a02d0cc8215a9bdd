//! Orbit integration: adaptive embedded Runge-Kutta 5(4) on the universal
//! cover, with the 2x2 variational system and the divergence integral
//! carried in the same stepper so that the Liouville identity
//! `ln det Phi_t = integral of div` measures model error, not quadrature
//! mismatch.
//!
//! The tangent flow is renormalized by a QR fold after every accepted
//! step: the determinant and the carried normal vector are tracked in log
//! scale, so Lyapunov bookkeeping stays finite on horizons where the raw
//! matrix entries would overflow or the determinant would drown in
//! cancellation.

use alloc::vec::Vec;
use core::fmt;

use crate::field::{FieldSpec, ValidatedSpec};
use crate::math;
use crate::torus::{Mat2, PlanarVector, TorusPoint};

#[derive(Clone, Copy, Debug)]
pub struct StepControl {
    pub rel_tol: f64,
    pub abs_tol: f64,
    pub max_step: f64,
    pub max_time: f64,
}

impl StepControl {
    pub fn new(
        rel_tol: f64,
        abs_tol: f64,
        max_step: f64,
        max_time: f64,
    ) -> Result<Self, FlowError> {
        let ctrl = Self {
            rel_tol,
            abs_tol,
            max_step,
            max_time,
        };
        if rel_tol >= 1e-12 && abs_tol > 0.0 && max_step > 0.0 && max_time > 0.0 {
            Ok(ctrl)
        } else {
            Err(FlowError::BadStepControl)
        }
    }
}

impl Default for StepControl {
    fn default() -> Self {
        Self {
            rel_tol: 1e-9,
            abs_tol: 1e-12,
            max_step: 0.1,
            max_time: 1e4,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum FlowError {
    BadStepControl,
    NonPositiveTime,
    /// Required step fell below `1e-13 * max(1, |t|)`.
    StepUnderflow { t: f64 },
    /// `det(tangent) <= 0` along a trajectory; flows preserve orientation.
    NonPositiveDeterminant { t: f64 },
    /// Initial point is (numerically) a singularity.
    SingularInitialPoint,
    /// `||Y||` fell below 1e-8 along a cocycle trace.
    SpeedUnderflow { t: f64 },
}

impl fmt::Display for FlowError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::BadStepControl => write!(f, "step control parameters out of range"),
            Self::NonPositiveTime => write!(f, "integration horizon must be positive"),
            Self::StepUnderflow { t } => write!(f, "step underflow at t = {t:.6}"),
            Self::NonPositiveDeterminant { t } => {
                write!(f, "non-positive tangent determinant at t = {t:.6}")
            }
            Self::SingularInitialPoint => write!(f, "initial point is a singularity"),
            Self::SpeedUnderflow { t } => write!(f, "flow speed underflow at t = {t:.6}"),
        }
    }
}

impl core::error::Error for FlowError {}

/// Integration state on the universal cover. `phi` holds the variational
/// matrix accumulated since the last QR fold (row-major); `div` is the
/// running integral of the divergence.
#[derive(Clone, Copy, Debug)]
pub(crate) struct OdeState {
    pub x: f64,
    pub y: f64,
    pub phi: [f64; 4],
    pub div: f64,
}

impl OdeState {
    pub(crate) fn start(x: f64, y: f64) -> Self {
        Self {
            x,
            y,
            phi: [1.0, 0.0, 0.0, 1.0],
            div: 0.0,
        }
    }

    pub(crate) fn wrapped(&self) -> TorusPoint {
        TorusPoint::new(self.x, self.y)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct Mode {
    pub tangent: bool,
    pub div: bool,
}

impl Mode {
    pub(crate) const PLAIN: Mode = Mode {
        tangent: false,
        div: false,
    };
    pub(crate) const DIV: Mode = Mode {
        tangent: false,
        div: true,
    };
    pub(crate) const FULL: Mode = Mode {
        tangent: true,
        div: true,
    };
}

/// Log-scale accumulation of the tangent flow across QR folds.
///
/// The scalar Poincaré cocycle is accumulated per step: the normal bundle
/// of a surface flow is 1-dimensional and `psi` is an exact multiplicative
/// cocycle, so projecting at every step end equals projecting once at the
/// final time while keeping the roundoff amplification bounded.
#[derive(Clone, Copy, Debug)]
pub(crate) struct TangentAccum {
    /// Orthogonal frame (rotation, det +1).
    q: Mat2,
    /// Raw upper-triangular accumulation `R_k ... R_1`; may saturate to
    /// inf/0 on long strongly hyperbolic runs, the logs below stay exact.
    r: Mat2,
    log_r11: f64,
    log_r22: f64,
    /// Time of the first non-positive step determinant, if any.
    pub flipped_at: Option<f64>,
    /// Unit normal to the flow at the current point.
    normal: PlanarVector,
    sign_psi: f64,
    log_psi: f64,
}

impl TangentAccum {
    fn new(normal0: PlanarVector) -> Self {
        let n = normal0.norm();
        Self {
            q: Mat2::IDENTITY,
            r: Mat2::IDENTITY,
            log_r11: 0.0,
            log_r22: 0.0,
            flipped_at: None,
            normal: if n > 0.0 {
                normal0.scale(1.0 / n)
            } else {
                PlanarVector::new(0.0, 1.0)
            },
            sign_psi: 1.0,
            log_psi: 0.0,
        }
    }

    /// Folds the per-step matrix `m` into the accumulation; `normal_new`
    /// is the unit normal to the flow at the step's end point.
    fn fold(&mut self, m: &Mat2, t: f64, normal_new: PlanarVector) {
        // per-step factor of the scalar linear Poincaré cocycle
        let image = m.apply(self.normal);
        let psi_step = image.dot(&normal_new);
        if psi_step < 0.0 {
            self.sign_psi = -self.sign_psi;
        }
        self.log_psi += math::ln(psi_step.abs().max(1e-300));
        self.normal = normal_new;

        let b = m.mul(&self.q);
        let r11 = math::hypot(b.a, b.c);
        if r11 <= 0.0 {
            self.flipped_at.get_or_insert(t);
            return;
        }
        let q1 = PlanarVector::new(b.a / r11, b.c / r11);
        let q2 = q1.rot90();
        let b2 = PlanarVector::new(b.b, b.d);
        let r12 = q1.dot(&b2);
        let r22 = q2.dot(&b2);
        if r22 <= 0.0 {
            self.flipped_at.get_or_insert(t);
        }
        self.log_r11 += math::ln(r11);
        self.log_r22 += math::ln(r22.abs().max(1e-300));
        let r_step = Mat2::new(r11, r12, 0.0, r22);
        self.r = r_step.mul(&self.r);
        self.q = Mat2::new(q1.dx, q2.dx, q1.dy, q2.dy);
    }

    /// `ln det Phi_t` (stable).
    pub(crate) fn log_det(&self) -> f64 {
        self.log_r11 + self.log_r22
    }

    /// Full matrix `Phi_t = Q * R`; raw entries, may saturate on very long
    /// strongly hyperbolic runs.
    pub(crate) fn full_matrix(&self) -> Mat2 {
        self.q.mul(&self.r)
    }

    /// Signed log of the scalar linear Poincaré cocycle `psi_t`.
    pub(crate) fn psi_log(&self) -> (f64, f64) {
        (self.sign_psi, self.log_psi)
    }
}

#[derive(Clone, Copy, Debug)]
struct Deriv {
    x: f64,
    y: f64,
    phi: [f64; 4],
    div: f64,
}

const ZERO_DERIV: Deriv = Deriv {
    x: 0.0,
    y: 0.0,
    phi: [0.0; 4],
    div: 0.0,
};

// Dormand-Prince 5(4) tableau (the field is autonomous, so the stage
// abscissae never appear).
const A2: [f64; 1] = [0.2];
const A3: [f64; 2] = [3.0 / 40.0, 9.0 / 40.0];
const A4: [f64; 3] = [44.0 / 45.0, -56.0 / 15.0, 32.0 / 9.0];
const A5: [f64; 4] = [
    19372.0 / 6561.0,
    -25360.0 / 2187.0,
    64448.0 / 6561.0,
    -212.0 / 729.0,
];
const A6: [f64; 5] = [
    9017.0 / 3168.0,
    -355.0 / 33.0,
    46732.0 / 5247.0,
    49.0 / 176.0,
    -5103.0 / 18656.0,
];
const B: [f64; 6] = [
    35.0 / 384.0,
    0.0,
    500.0 / 1113.0,
    125.0 / 192.0,
    -2187.0 / 6784.0,
    11.0 / 84.0,
];
// b5 - b4: the embedded error weights (k7 = f at the 5th-order solution).
const E: [f64; 7] = [
    71.0 / 57600.0,
    0.0,
    -71.0 / 16695.0,
    71.0 / 1920.0,
    -17253.0 / 339200.0,
    22.0 / 525.0,
    -1.0 / 40.0,
];

const UNDERFLOW_FACTOR: f64 = 1e-13;
const INITIAL_STEP: f64 = 1e-3;

/// One accepted adaptive step.
#[derive(Clone, Copy, Debug)]
pub(crate) struct StepRec {
    pub t0: f64,
    pub h: f64,
    pub from: OdeState,
    pub to: OdeState,
}

pub(crate) struct Stepper<'a> {
    spec: &'a FieldSpec,
    ctrl: StepControl,
    mode: Mode,
    /// +1 forward, -1 time-reversed (crate-internal use only).
    dir: f64,
    pub t: f64,
    pub state: OdeState,
    pub tangent: Option<TangentAccum>,
    h: f64,
    fsal: Option<Deriv>,
}

impl<'a> Stepper<'a> {
    pub(crate) fn new(
        spec: &'a FieldSpec,
        start: (f64, f64),
        ctrl: StepControl,
        mode: Mode,
        dir: f64,
    ) -> Self {
        let tangent = mode.tangent.then(|| {
            let v = spec.eval_raw(start.0, start.1);
            TangentAccum::new(v.rot90())
        });
        Self {
            spec,
            ctrl,
            mode,
            dir,
            t: 0.0,
            state: OdeState::start(start.0, start.1),
            tangent,
            h: ctrl.max_step.min(INITIAL_STEP),
            fsal: None,
        }
    }

    fn rhs(&self, s: &OdeState) -> Deriv {
        let v = self.spec.eval_raw(s.x, s.y);
        let mut d = Deriv {
            x: self.dir * v.dx,
            y: self.dir * v.dy,
            ..ZERO_DERIV
        };
        if self.mode.tangent || self.mode.div {
            let j = self.spec.jacobian_raw(s.x, s.y);
            if self.mode.tangent {
                // dPhi/dt = J(x(t)) Phi
                d.phi = [
                    j.a * s.phi[0] + j.b * s.phi[2],
                    j.a * s.phi[1] + j.b * s.phi[3],
                    j.c * s.phi[0] + j.d * s.phi[2],
                    j.c * s.phi[1] + j.d * s.phi[3],
                ];
                for p in &mut d.phi {
                    *p *= self.dir;
                }
            }
            if self.mode.div {
                d.div = self.dir * j.trace();
            }
        }
        d
    }

    fn add_scaled(s: &OdeState, h: f64, terms: &[(f64, &Deriv)]) -> OdeState {
        let mut out = *s;
        for &(w, k) in terms {
            let hw = h * w;
            out.x += hw * k.x;
            out.y += hw * k.y;
            out.phi[0] += hw * k.phi[0];
            out.phi[1] += hw * k.phi[1];
            out.phi[2] += hw * k.phi[2];
            out.phi[3] += hw * k.phi[3];
            out.div += hw * k.div;
        }
        out
    }

    /// Stages k2..k6 and the 5th-order solution for a step of size `h`.
    fn stages(&self, from: &OdeState, h: f64, k1: &Deriv) -> ([Deriv; 6], OdeState) {
        let k2 = self.rhs(&Self::add_scaled(from, h, &[(A2[0], k1)]));
        let k3 = self.rhs(&Self::add_scaled(from, h, &[(A3[0], k1), (A3[1], &k2)]));
        let k4 = self.rhs(&Self::add_scaled(
            from,
            h,
            &[(A4[0], k1), (A4[1], &k2), (A4[2], &k3)],
        ));
        let k5 = self.rhs(&Self::add_scaled(
            from,
            h,
            &[(A5[0], k1), (A5[1], &k2), (A5[2], &k3), (A5[3], &k4)],
        ));
        let k6 = self.rhs(&Self::add_scaled(
            from,
            h,
            &[
                (A6[0], k1),
                (A6[1], &k2),
                (A6[2], &k3),
                (A6[3], &k4),
                (A6[4], &k5),
            ],
        ));
        let solution = Self::add_scaled(
            from,
            h,
            &[
                (B[0], k1),
                (B[2], &k3),
                (B[3], &k4),
                (B[4], &k5),
                (B[5], &k6),
            ],
        );
        ([*k1, k2, k3, k4, k5, k6], solution)
    }

    fn error_norm(
        &self,
        from: &OdeState,
        to: &OdeState,
        h: f64,
        ks: &[Deriv; 6],
        k7: &Deriv,
    ) -> f64 {
        let comp = |e_dot: f64, y0: f64, y1: f64| -> f64 {
            let sc = self.ctrl.abs_tol + self.ctrl.rel_tol * y0.abs().max(y1.abs());
            (h * e_dot) / sc
        };
        let edot = |pick: &dyn Fn(&Deriv) -> f64| -> f64 {
            E[0] * pick(&ks[0])
                + E[2] * pick(&ks[2])
                + E[3] * pick(&ks[3])
                + E[4] * pick(&ks[4])
                + E[5] * pick(&ks[5])
                + E[6] * pick(k7)
        };
        let mut sum = 0.0;
        let mut n = 0usize;
        let ex = comp(edot(&|k| k.x), from.x, to.x);
        let ey = comp(edot(&|k| k.y), from.y, to.y);
        sum += ex * ex + ey * ey;
        n += 2;
        if self.mode.tangent {
            for i in 0..4 {
                let e = comp(edot(&|k| k.phi[i]), from.phi[i], to.phi[i]);
                sum += e * e;
                n += 1;
            }
        }
        if self.mode.div {
            let e = comp(edot(&|k| k.div), from.div, to.div);
            sum += e * e;
            n += 1;
        }
        math::sqrt(sum / n as f64)
    }

    /// Take one accepted step, not crossing `t_limit`. Returns `Ok(None)`
    /// once the limit is reached. In tangent mode the per-step matrix is
    /// folded into the QR accumulation and the state matrix reset to the
    /// identity.
    pub(crate) fn step_to(&mut self, t_limit: f64) -> Result<Option<StepRec>, FlowError> {
        let remaining = t_limit - self.t;
        if remaining <= UNDERFLOW_FACTOR * t_limit.abs().max(1.0) {
            return Ok(None);
        }
        let k1 = match self.fsal {
            Some(k) => k,
            None => self.rhs(&self.state),
        };
        let mut h = self.h.min(remaining);
        loop {
            if h < UNDERFLOW_FACTOR * self.t.abs().max(1.0) {
                return Err(FlowError::StepUnderflow { t: self.t });
            }
            let (ks, candidate) = self.stages(&self.state, h, &k1);
            let k7 = self.rhs(&candidate);
            let err = self.error_norm(&self.state, &candidate, h, &ks, &k7);
            if err <= 1.0 || h <= UNDERFLOW_FACTOR * self.t.abs().max(1.0) * 2.0 {
                let rec = StepRec {
                    t0: self.t,
                    h,
                    from: self.state,
                    to: candidate,
                };
                self.t += h;
                self.state = candidate;
                if let Some(acc) = self.tangent.as_mut() {
                    let m = Mat2::new(
                        candidate.phi[0],
                        candidate.phi[1],
                        candidate.phi[2],
                        candidate.phi[3],
                    );
                    // (k7.x, k7.y) = dir * Y at the step end
                    let speed = math::hypot(k7.x, k7.y);
                    let normal_new = if speed > 0.0 {
                        PlanarVector::new(-k7.y / speed, k7.x / speed)
                    } else {
                        acc.normal
                    };
                    acc.fold(&m, self.t, normal_new);
                    self.state.phi = [1.0, 0.0, 0.0, 1.0];
                    // the phi components changed under the fold
                    self.fsal = None;
                } else {
                    self.fsal = Some(k7);
                }
                let fac = if err > 0.0 {
                    (0.9 * math::powf(err, -0.2)).clamp(0.2, 5.0)
                } else {
                    5.0
                };
                self.h = (h * fac).min(self.ctrl.max_step);
                return Ok(Some(rec));
            }
            let fac = (0.9 * math::powf(err, -0.2)).clamp(0.2, 1.0);
            h *= fac;
        }
    }

    /// State at `t0 + dt` inside an accepted step, recomputed by a single
    /// fixed step from the step's start (no error control).
    pub(crate) fn eval_within(&self, rec: &StepRec, dt: f64) -> OdeState {
        if dt <= 0.0 {
            return rec.from;
        }
        if dt >= rec.h {
            return rec.to;
        }
        let k1 = self.rhs(&rec.from);
        let (_, sol) = self.stages(&rec.from, dt, &k1);
        sol
    }
}

/// Locate `dt` in `(0, rec.h]` where the unwrapped `y` reaches `target`,
/// by bisection to an absolute time tolerance of 1e-10. The caller
/// guarantees `y` is monotone across the step (transversality).
pub(crate) fn locate_y_crossing(
    stepper: &Stepper<'_>,
    rec: &StepRec,
    target: f64,
) -> (f64, OdeState) {
    const TOL_T: f64 = 1e-10;
    let mut lo = 0.0;
    let mut hi = rec.h;
    let mut state_hi = rec.to;
    for _ in 0..80 {
        if hi - lo <= TOL_T {
            break;
        }
        let mid = 0.5 * (lo + hi);
        let s = stepper.eval_within(rec, mid);
        if s.y >= target {
            hi = mid;
            state_hi = s;
        } else {
            lo = mid;
        }
    }
    (rec.t0 + hi, state_hi)
}

/// A time-sampled orbit, with optional tangent-matrix samples and the
/// accumulated divergence integral (same quadrature as the orbit itself).
#[derive(Clone, Debug)]
pub struct Trajectory {
    pub spec: FieldSpec,
    pub t_samples: Vec<f64>,
    pub points: Vec<TorusPoint>,
    /// Unwrapped coordinates on the universal cover, one per sample.
    pub cover: Vec<(f64, f64)>,
    /// `Phi_t` per sample (identity at t=0). Raw entries; they can
    /// saturate on very long strongly hyperbolic runs, in which case
    /// `log_det` remains the reliable route.
    pub tangent: Option<Vec<Mat2>>,
    /// `ln det Phi_t` per sample, accumulated in log scale.
    pub log_det: Option<Vec<f64>>,
    pub div_integral: Vec<f64>,
    /// Time of the first orientation flip of the tangent flow, if the
    /// integration ever produced one (it must not).
    pub orientation_flip: Option<f64>,
    /// True when integration stalled (near-singularity step underflow).
    pub truncated: bool,
}

impl Trajectory {
    pub fn end_point(&self) -> TorusPoint {
        *self.points.last().expect("trajectory has samples")
    }

    pub fn end_time(&self) -> f64 {
        *self.t_samples.last().expect("trajectory has samples")
    }
}

/// Integrates the flow for time `t_final`, recording every accepted step.
/// With `with_tangent` the variational system is carried along; the
/// divergence integral is always accumulated.
pub fn integrate(
    spec: &ValidatedSpec,
    x0: TorusPoint,
    t_final: f64,
    ctrl: &StepControl,
    with_tangent: bool,
) -> Result<Trajectory, FlowError> {
    if !(t_final > 0.0) {
        return Err(FlowError::NonPositiveTime);
    }
    StepControl::new(ctrl.rel_tol, ctrl.abs_tol, ctrl.max_step, ctrl.max_time)?;
    let mode = if with_tangent { Mode::FULL } else { Mode::DIV };
    let mut stepper = Stepper::new(spec.spec(), (x0.x(), x0.y()), *ctrl, mode, 1.0);
    let mut traj = Trajectory {
        spec: spec.spec().clone(),
        t_samples: alloc::vec![0.0],
        points: alloc::vec![x0],
        cover: alloc::vec![(x0.x(), x0.y())],
        tangent: with_tangent.then(|| alloc::vec![Mat2::IDENTITY]),
        log_det: with_tangent.then(|| alloc::vec![0.0]),
        div_integral: alloc::vec![0.0],
        orientation_flip: None,
        truncated: false,
    };
    loop {
        match stepper.step_to(t_final) {
            Ok(Some(rec)) => {
                traj.t_samples.push(stepper.t);
                traj.points.push(rec.to.wrapped());
                traj.cover.push((rec.to.x, rec.to.y));
                if let Some(acc) = stepper.tangent.as_ref() {
                    traj.tangent.as_mut().unwrap().push(acc.full_matrix());
                    traj.log_det.as_mut().unwrap().push(acc.log_det());
                    traj.orientation_flip = acc.flipped_at;
                }
                traj.div_integral.push(rec.to.div);
            }
            Ok(None) => break,
            Err(FlowError::StepUnderflow { .. }) => {
                traj.truncated = true;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    Ok(traj)
}

/// Max over samples of `|ln det(tangent) - div_integral|`: the Liouville
/// identity residual.
pub fn liouville_residual(traj: &Trajectory) -> Result<f64, FlowError> {
    let log_det = traj
        .log_det
        .as_ref()
        .expect("liouville_residual needs tangent data");
    if let Some(t) = traj.orientation_flip {
        return Err(FlowError::NonPositiveDeterminant { t });
    }
    let mut worst = 0.0f64;
    for (i, &ld) in log_det.iter().enumerate() {
        worst = worst.max((ld - traj.div_integral[i]).abs());
    }
    Ok(worst)
}

#[derive(Clone, Debug, PartialEq)]
pub enum OmegaVerdict {
    ConvergesToSaddle,
    /// Section returns settle onto a `q`-cycle through `theta`.
    ConvergesToPeriodic { q: usize, theta: f64 },
    Recurrent,
    Undetermined,
}

/// Tolerance for "section returns settled onto a cycle".
const SETTLE_TOL: f64 = 1e-5;
const SETTLE_CYCLES: usize = 4;
const MAX_SETTLE_PERIOD: usize = 24;

/// Classifies where the forward orbit of `x0` accumulates, at horizon `T`.
pub fn omega_limit_probe(
    spec: &ValidatedSpec,
    x0: TorusPoint,
    t_final: f64,
    eps: f64,
) -> Result<OmegaVerdict, FlowError> {
    if !(t_final > 0.0) {
        return Err(FlowError::NonPositiveTime);
    }
    if spec.eval(x0).norm() < 1e-8 {
        return Err(FlowError::SingularInitialPoint);
    }
    let ctrl = StepControl::default();
    let mut stepper = Stepper::new(spec.spec(), (x0.x(), x0.y()), ctrl, Mode::PLAIN, 1.0);
    let sample_dt = (t_final / 8192.0).max(ctrl.max_step);
    let mut samples: Vec<(f64, TorusPoint)> = alloc::vec![(0.0, x0)];
    let mut crossings: Vec<f64> = Vec::new();
    let mut next_sample = sample_dt;
    let mut next_level = math::floor(x0.y()) + 1.0;
    let mut t_end = t_final;
    loop {
        match stepper.step_to(t_final) {
            Ok(Some(rec)) => {
                while rec.to.y >= next_level {
                    let (_, s) = locate_y_crossing(&stepper, &rec, next_level);
                    crossings.push(math::wrap_unit(s.x));
                    next_level += 1.0;
                }
                if stepper.t >= next_sample {
                    samples.push((stepper.t, rec.to.wrapped()));
                    next_sample += sample_dt;
                }
            }
            Ok(None) => break,
            Err(FlowError::StepUnderflow { t }) => {
                t_end = t;
                break;
            }
            Err(e) => return Err(e),
        }
    }

    if let Some(saddle) = spec.saddle() {
        let cutoff = 0.9 * t_end;
        let tail: Vec<_> = samples.iter().filter(|(t, _)| *t >= cutoff).collect();
        if !tail.is_empty() && tail.iter().all(|(_, p)| p.dist(&saddle.position) <= eps) {
            return Ok(OmegaVerdict::ConvergesToSaddle);
        }
    }

    if let Some((q, theta)) = settled_cycle(&crossings) {
        return Ok(OmegaVerdict::ConvergesToPeriodic { q, theta });
    }

    let recurrent = samples
        .iter()
        .any(|(t, p)| *t >= 1.0 && p.dist(&x0) <= eps);
    if recurrent {
        return Ok(OmegaVerdict::Recurrent);
    }
    Ok(OmegaVerdict::Undetermined)
}

/// Smallest period `q` such that the last few cycles of section crossings
/// agree to `SETTLE_TOL`.
pub(crate) fn settled_cycle(crossings: &[f64]) -> Option<(usize, f64)> {
    for q in 1..=MAX_SETTLE_PERIOD {
        let need = (SETTLE_CYCLES + 1) * q;
        if crossings.len() < need {
            return None;
        }
        let tail = &crossings[crossings.len() - need..];
        let ok = (q..need).all(|i| math::circle_dist(tail[i], tail[i - q]) <= SETTLE_TOL);
        if ok {
            return Some((q, *crossings.last().unwrap()));
        }
    }
    None
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldSpec, Plug};
    use crate::torus::Mat2;

    fn linear(nu: f64) -> ValidatedSpec {
        FieldSpec::linear_flow(nu, vec![]).unwrap().validate().unwrap()
    }

    fn cherry_negative(nu: f64) -> ValidatedSpec {
        FieldSpec::cherry(
            nu,
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
        .unwrap()
    }

    #[test]
    fn constant_field_endpoint_wraps_home() {
        let spec = linear(0.5);
        let traj = integrate(
            &spec,
            TorusPoint::new(0.0, 0.0),
            2.0,
            &StepControl::default(),
            true,
        )
        .unwrap();
        assert!(!traj.truncated);
        let end = traj.end_point();
        assert!(end.dist(&TorusPoint::new(0.0, 0.0)) < 1e-9, "end = {end:?}");
        let tangent = traj.tangent.as_ref().unwrap().last().unwrap();
        assert!((tangent.a - 1.0).abs() < 1e-12);
        assert!((tangent.d - 1.0).abs() < 1e-12);
        assert!(tangent.b.abs() < 1e-12 && tangent.c.abs() < 1e-12);
        assert!(liouville_residual(&traj).unwrap() <= 1e-12);
    }

    #[test]
    fn fixture_tangent_is_matrix_exponential() {
        let spec = FieldSpec::planar_linear_fixture(Mat2::diag(2.0, -1.0))
            .unwrap()
            .validate()
            .unwrap();
        let traj = integrate(
            &spec,
            TorusPoint::new(0.01, 0.005),
            1.0,
            &StepControl::default(),
            true,
        )
        .unwrap();
        let tangent = traj.tangent.as_ref().unwrap().last().unwrap();
        let e2 = math::exp(2.0);
        let em1 = math::exp(-1.0);
        assert!((tangent.a - e2).abs() / e2 < 1e-8);
        assert!((tangent.d - em1).abs() / em1 < 1e-8);
        assert!(tangent.b.abs() < 1e-10 && tangent.c.abs() < 1e-10);
        // ln det = (2 - 1) * 1
        let res = liouville_residual(&traj).unwrap();
        assert!(res <= 1e-8, "liouville residual {res}");
    }

    #[test]
    fn fixture_liouville_at_t3() {
        let spec = FieldSpec::planar_linear_fixture(Mat2::diag(2.0, -1.0))
            .unwrap()
            .validate()
            .unwrap();
        let traj = integrate(
            &spec,
            TorusPoint::new(0.001, 0.002),
            3.0,
            &StepControl::default(),
            true,
        )
        .unwrap();
        let log_det = *traj.log_det.as_ref().unwrap().last().unwrap();
        assert!((log_det - 3.0).abs() <= 1e-8);
    }

    #[test]
    fn cherry_endpoint_stable_under_refinement() {
        let spec = cherry_negative(0.6);
        let ctrl = StepControl::default();
        let tight = StepControl {
            rel_tol: ctrl.rel_tol / 10.0,
            ..ctrl
        };
        let x0 = TorusPoint::new(0.1, 0.0);
        let a = integrate(&spec, x0, 50.0, &ctrl, false).unwrap();
        let b = integrate(&spec, x0, 50.0, &tight, false).unwrap();
        assert!(!a.truncated && !b.truncated);
        assert!(a.end_point().dist(&b.end_point()) <= 1e-6);
    }

    #[test]
    fn orientation_is_preserved_along_cherry_orbits() {
        let spec = cherry_negative(0.6);
        let traj = integrate(
            &spec,
            TorusPoint::new(0.23, 0.0),
            30.0,
            &StepControl::default(),
            true,
        )
        .unwrap();
        assert_eq!(traj.orientation_flip, None);
        // the stable log-det route matches the divergence integral even on
        // a horizon where raw determinants would be pure cancellation noise
        assert!(liouville_residual(&traj).unwrap() <= 1e-6);
    }

    #[test]
    fn time_reversal_returns_to_start() {
        // short horizon on an orbit that stays clear of the saddle: the
        // reversal bound degrades exponentially with the hyperbolicity
        // encountered
        let spec = cherry_negative(0.6);
        let ctrl = StepControl::default();
        let x0 = TorusPoint::new(0.85, 0.05);
        let fwd = integrate(&spec, x0, 2.0, &ctrl, false).unwrap();
        let end = fwd.end_point();
        let mut back = Stepper::new(spec.spec(), (end.x(), end.y()), ctrl, Mode::PLAIN, -1.0);
        while let Ok(Some(_)) = back.step_to(2.0) {}
        let final_point = back.state.wrapped();
        assert!(
            final_point.dist(&x0) <= 1e-5,
            "reversal landed at {final_point:?}, expected {x0:?}"
        );
    }

    #[test]
    fn zero_amplitude_bands_keep_unit_determinant() {
        let spec = FieldSpec::linear_flow(
            0.3,
            vec![crate::field::Band {
                amp: 0.0,
                freq: 4,
                y_lo: 0.2,
                y_hi: 0.4,
            }],
        )
        .unwrap()
        .validate()
        .unwrap();
        let traj = integrate(
            &spec,
            TorusPoint::new(0.7, 0.1),
            20.0,
            &StepControl::default(),
            true,
        )
        .unwrap();
        for m in traj.tangent.as_ref().unwrap() {
            assert!((m.det() - 1.0).abs() <= 1e-10);
        }
        for ld in traj.log_det.as_ref().unwrap() {
            assert!(ld.abs() <= 1e-10);
        }
    }

    #[test]
    fn probe_rejects_singular_start() {
        let spec = cherry_negative(0.6);
        let source = spec.source().unwrap().position;
        let err = omega_limit_probe(&spec, source, 100.0, 0.05).unwrap_err();
        assert_eq!(err, FlowError::SingularInitialPoint);
    }

    #[test]
    fn locked_orbit_settles_to_periodic() {
        // nu = 0.6 sits in a locking plateau of this plug family: generic
        // orbits converge to the periodic sink
        let spec = cherry_negative(0.6);
        let verdict = omega_limit_probe(&spec, TorusPoint::new(0.13, 0.02), 600.0, 0.05).unwrap();
        match verdict {
            OmegaVerdict::ConvergesToPeriodic { .. } => {}
            other => panic!("expected periodic convergence, got {other:?}"),
        }
    }
}
