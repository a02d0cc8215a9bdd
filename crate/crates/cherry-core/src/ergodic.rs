//! Birkhoff statistics, empirical measures, Lyapunov exponents, basin
//! surveys, and quasi-contraction certificates.

use alloc::vec::Vec;
use core::fmt;

use crate::field::ValidatedSpec;
use crate::flow::{locate_y_crossing, settled_cycle, FlowError, Mode, StepControl, Stepper};
use crate::math;
use crate::section::{cocycle_trace, SectionError};
use crate::torus::TorusPoint;

pub const OBSERVABLE_NAMES: [&str; 6] = ["div", "dist_saddle", "q00", "q10", "q01", "q11"];
pub const N_OBSERVABLES: usize = 6;

/// Default radius of the saddle neighborhood carrying the atomic weight.
pub const EPS_SADDLE_DEFAULT: f64 = 0.05;

/// Survey thresholds (all declared here, not tuned per instance).
pub const SURVEY_SF_SADDLE: f64 = 0.9;
pub const SURVEY_SF_MU: f64 = 0.5;
pub const SURVEY_DIV_MU: f64 = 0.05;
pub const SURVEY_OBS_AGREE: f64 = 0.05;
pub const SURVEY_QUORUM: f64 = 0.95;
pub const SURVEY_EXCLUDE_RADIUS: f64 = 0.05;

/// Time averages of one orbit: the empirical measure summary.
#[derive(Clone, Debug)]
pub struct EmpiricalMeasure {
    pub x0: TorusPoint,
    /// Requested horizon.
    pub t_final: f64,
    /// Integrated horizon (smaller when the stepper stalled at the saddle;
    /// the remaining time is attributed to the saddle).
    pub t_effective: f64,
    pub truncated: bool,
    /// `(1/T) * integral of div` (stepper-grade quadrature).
    pub avg_div: f64,
    /// Time fraction within `eps_saddle` of the saddle.
    pub saddle_fraction: f64,
    /// Named observable time-averages, order per `OBSERVABLE_NAMES`.
    pub observable_avgs: [f64; N_OBSERVABLES],
    /// Section crossing angles, for settle detection.
    pub crossings: Vec<f64>,
}

fn observables_at(spec: &ValidatedSpec, p: TorusPoint, eps_saddle: f64) -> ([f64; N_OBSERVABLES], f64) {
    let div = crate::field::divergence_at(spec.spec(), p);
    let dist = spec
        .saddle()
        .map(|s| p.dist(&s.position))
        .unwrap_or(f64::INFINITY);
    let q00 = (p.x() < 0.5 && p.y() < 0.5) as u8 as f64;
    let q10 = (p.x() >= 0.5 && p.y() < 0.5) as u8 as f64;
    let q01 = (p.x() < 0.5 && p.y() >= 0.5) as u8 as f64;
    let q11 = (p.x() >= 0.5 && p.y() >= 0.5) as u8 as f64;
    let in_saddle = (dist <= eps_saddle) as u8 as f64;
    let dist_obs = if dist.is_finite() { dist } else { 0.0 };
    ([div, dist_obs, q00, q10, q01, q11], in_saddle)
}

/// One integration pass accumulating the divergence average, the saddle
/// time-fraction, and the default observable averages.
pub fn empirical_measure(
    spec: &ValidatedSpec,
    x0: TorusPoint,
    t_final: f64,
    eps_saddle: f64,
) -> Result<EmpiricalMeasure, FlowError> {
    if !(t_final > 0.0) {
        return Err(FlowError::NonPositiveTime);
    }
    if spec.eval(x0).norm() < 1e-8 {
        return Err(FlowError::SingularInitialPoint);
    }
    let ctrl = StepControl::default();
    let mut stepper = Stepper::new(spec.spec(), (x0.x(), x0.y()), ctrl, Mode::DIV, 1.0);
    let mut obs_acc = [0.0f64; N_OBSERVABLES];
    let mut saddle_time = 0.0f64;
    let (mut prev_obs, mut prev_sad) = observables_at(spec, x0, eps_saddle);
    let mut crossings: Vec<f64> = Vec::new();
    let mut next_level = 1.0;
    let mut truncated = false;
    let mut t_effective = t_final;
    loop {
        match stepper.step_to(t_final) {
            Ok(Some(rec)) => {
                // trapezoid accumulation outside the error control
                let (obs, sad) = observables_at(spec, rec.to.wrapped(), eps_saddle);
                for i in 0..N_OBSERVABLES {
                    obs_acc[i] += 0.5 * (prev_obs[i] + obs[i]) * rec.h;
                }
                saddle_time += 0.5 * (prev_sad + sad) * rec.h;
                prev_obs = obs;
                prev_sad = sad;
                while rec.to.y >= next_level {
                    let (_, s) = locate_y_crossing(&stepper, &rec, next_level);
                    crossings.push(math::wrap_unit(s.x));
                    next_level += 1.0;
                }
            }
            Ok(None) => break,
            Err(FlowError::StepUnderflow { t }) => {
                truncated = true;
                t_effective = t;
                break;
            }
            Err(e) => return Err(e),
        }
    }
    let mut div_integral = stepper.state.div;
    if truncated {
        // remaining time attributed to the saddle
        let rest = t_final - t_effective;
        if let Some(s) = spec.saddle() {
            let (obs_s, _) = observables_at(spec, s.position, eps_saddle);
            for i in 0..N_OBSERVABLES {
                obs_acc[i] += obs_s[i] * rest;
            }
            saddle_time += rest;
            div_integral += s.divergence * rest;
        }
    }
    Ok(EmpiricalMeasure {
        x0,
        t_final,
        t_effective,
        truncated,
        avg_div: div_integral / t_final,
        saddle_fraction: (saddle_time / t_final).clamp(0.0, 1.0),
        observable_avgs: {
            let mut avgs = obs_acc;
            for a in &mut avgs {
                *a /= t_final;
            }
            avgs
        },
        crossings,
    })
}

/// The three growth rates of one orbit segment, from a single cocycle trace.
#[derive(Clone, Debug)]
pub struct ExponentEstimate {
    /// `(1/T) ln |psi(T)|` — normal Lyapunov exponent.
    pub lambda_psi: f64,
    /// `(1/T) ln |psi*(T)|` — scaled-cocycle exponent.
    pub lambda_psi_star: f64,
    /// `(1/T) ln det Phi_T` — the ln-det rate (sum of exponents).
    pub lambda_det: f64,
    /// `(1/T) * integral of div`; equals `lambda_det` up to quadrature.
    pub avg_div: f64,
    pub t_effective: f64,
    pub truncated: bool,
}

pub fn exponent_estimate(
    spec: &ValidatedSpec,
    x0: TorusPoint,
    t_final: f64,
) -> Result<ExponentEstimate, SectionError> {
    let trace = cocycle_trace(spec, x0, t_final)?;
    let t = trace.end_time();
    if !(t > 0.0) {
        return Err(SectionError::Flow(FlowError::NonPositiveTime));
    }
    let n = trace.len() - 1;
    Ok(ExponentEstimate {
        lambda_psi: trace.log_abs_psi[n] / t,
        lambda_psi_star: trace.log_abs_psi_star[n] / t,
        lambda_det: trace.log_det[n] / t,
        avg_div: trace.div_integral[n] / t,
        t_effective: t,
        truncated: trace.truncated,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CellClass {
    Saddle,
    Mu,
    Periodic,
    Other,
}

impl fmt::Display for CellClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Saddle => "saddle",
            Self::Mu => "mu",
            Self::Periodic => "periodic",
            Self::Other => "other",
        })
    }
}

#[derive(Clone, Debug)]
pub struct SurveyCell {
    pub x0: TorusPoint,
    pub avg_div: f64,
    pub saddle_fraction: f64,
    pub observables: [f64; N_OBSERVABLES],
    pub settled_periodic: bool,
    pub class: CellClass,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SurveyVerdict {
    DeltaSigma,
    NontrivialMu,
    PeriodicSink,
    Mixed,
}

impl fmt::Display for SurveyVerdict {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::DeltaSigma => "DELTA_SIGMA",
            Self::NontrivialMu => "NONTRIVIAL_MU",
            Self::PeriodicSink => "PERIODIC_SINK",
            Self::Mixed => "MIXED",
        })
    }
}

#[derive(Clone, Debug)]
pub struct SurveyReport {
    pub cells: Vec<SurveyCell>,
    pub verdict: SurveyVerdict,
    pub fraction_saddle: f64,
    pub fraction_mu: f64,
    pub fraction_periodic: f64,
    /// Worst per-observable spread over mu-qualifying cells.
    pub observable_spread: f64,
}

/// Lattice of survey seeds, excluding small neighborhoods of the source
/// and of the plug core.
pub fn survey_grid(spec: &ValidatedSpec, grid_n: usize) -> Vec<TorusPoint> {
    let mut out = Vec::with_capacity(grid_n * grid_n);
    for i in 0..grid_n {
        for k in 0..grid_n {
            let p = TorusPoint::new(
                (i as f64 + 0.5) / grid_n as f64,
                (k as f64 + 0.5) / grid_n as f64,
            );
            if let Some(src) = spec.source() {
                if p.dist(&src.position) < SURVEY_EXCLUDE_RADIUS {
                    continue;
                }
            }
            if let Some(plug) = spec.plug() {
                let core_r = 0.5 * plug.r + SURVEY_EXCLUDE_RADIUS;
                let du = math::circle_dist(p.x(), plug.cx);
                let dv = math::circle_dist(p.y(), plug.cy);
                if du <= core_r && dv <= core_r {
                    continue;
                }
            }
            out.push(p);
        }
    }
    out
}

/// One survey job: pure, independent per cell.
pub fn survey_cell(
    spec: &ValidatedSpec,
    x0: TorusPoint,
    t_final: f64,
    eps_saddle: f64,
) -> Result<SurveyCell, FlowError> {
    let em = empirical_measure(spec, x0, t_final, eps_saddle)?;
    let settled = settled_cycle(&em.crossings).is_some();
    let class = if em.saddle_fraction >= SURVEY_SF_SADDLE {
        CellClass::Saddle
    } else if settled {
        CellClass::Periodic
    } else if em.saddle_fraction <= SURVEY_SF_MU && em.avg_div.abs() <= SURVEY_DIV_MU {
        CellClass::Mu
    } else {
        CellClass::Other
    };
    Ok(SurveyCell {
        x0,
        avg_div: em.avg_div,
        saddle_fraction: em.saddle_fraction,
        observables: em.observable_avgs,
        settled_periodic: settled,
        class,
    })
}

/// Aggregates cells into the physical-measure verdict.
pub fn reduce_survey(cells: Vec<SurveyCell>) -> SurveyReport {
    let n = cells.len().max(1) as f64;
    let frac = |class: CellClass| cells.iter().filter(|c| c.class == class).count() as f64 / n;
    let fraction_saddle = frac(CellClass::Saddle);
    let fraction_periodic = frac(CellClass::Periodic);
    let fraction_mu = frac(CellClass::Mu);

    let mu_cells: Vec<&SurveyCell> = cells.iter().filter(|c| c.class == CellClass::Mu).collect();
    let mut observable_spread = 0.0f64;
    if mu_cells.len() >= 2 {
        for i in 0..N_OBSERVABLES {
            let (mut lo, mut hi) = (f64::INFINITY, f64::NEG_INFINITY);
            for c in &mu_cells {
                lo = lo.min(c.observables[i]);
                hi = hi.max(c.observables[i]);
            }
            observable_spread = observable_spread.max(hi - lo);
        }
    }

    let verdict = if fraction_saddle >= SURVEY_QUORUM {
        SurveyVerdict::DeltaSigma
    } else if fraction_periodic >= SURVEY_QUORUM {
        SurveyVerdict::PeriodicSink
    } else if fraction_mu >= SURVEY_QUORUM && observable_spread <= SURVEY_OBS_AGREE {
        SurveyVerdict::NontrivialMu
    } else {
        SurveyVerdict::Mixed
    };
    SurveyReport {
        cells,
        verdict,
        fraction_saddle,
        fraction_mu,
        fraction_periodic,
        observable_spread,
    }
}

/// Sequential survey driver. Cell jobs are independent; callers that want
/// parallelism can run `survey_cell` over `survey_grid` themselves and
/// feed `reduce_survey`.
pub fn basin_survey(
    spec: &ValidatedSpec,
    grid_n: usize,
    t_final: f64,
    eps_saddle: f64,
) -> Result<SurveyReport, FlowError> {
    let mut cells = Vec::new();
    for x0 in survey_grid(spec, grid_n) {
        cells.push(survey_cell(spec, x0, t_final, eps_saddle)?);
    }
    Ok(reduce_survey(cells))
}

/// Partition of an orbit segment with per-step scaled-cocycle norms; the
/// certificate holds when the running products decay like `lambda^k`.
#[derive(Clone, Debug)]
pub struct QuasiContractionCertificate {
    pub x0: TorusPoint,
    /// `0 = t_0 < ... < t_l = T`, steps within `[T0, 2 T0]`.
    pub times: Vec<f64>,
    /// `|psi*|` over each step, restarted per step (cocycle-exact).
    pub step_norms: Vec<f64>,
    pub lambda: f64,
    pub holds: bool,
}

pub fn quasi_contraction_certificate(
    spec: &ValidatedSpec,
    x0: TorusPoint,
    t_final: f64,
    t0_window: f64,
    lambda: f64,
) -> Result<QuasiContractionCertificate, SectionError> {
    assert!(t_final >= 2.0 * t0_window, "need T >= 2*T0");
    assert!(lambda > 0.0 && lambda < 1.0);
    let mut times = alloc::vec![0.0];
    let mut step_norms: Vec<f64> = Vec::new();
    let mut point = x0;
    let mut t = 0.0;
    while t < t_final - 1e-12 {
        let remaining = t_final - t;
        let horizon = remaining.min(2.0 * t0_window);
        let trace = cocycle_trace(spec, point, horizon)?;
        if trace.truncated {
            return Err(SectionError::Flow(FlowError::SpeedUnderflow {
                t: t + trace.end_time(),
            }));
        }
        // candidate step ends: trace samples inside [T0, horizon] that
        // leave either nothing or at least T0 behind
        let mut best: Option<(usize, f64)> = None;
        for (i, &ts) in trace.t_grid.iter().enumerate() {
            if ts < t0_window {
                continue;
            }
            let rest = remaining - ts;
            if rest > 1e-12 && rest < t0_window {
                continue;
            }
            let norm = math::exp(trace.log_abs_psi_star[i]);
            if best.map(|(_, b)| norm < b).unwrap_or(true) {
                best = Some((i, norm));
            }
        }
        let (idx, norm) = match best {
            Some(b) => b,
            None => {
                // fall back to the horizon end
                let i = trace.len() - 1;
                (i, math::exp(trace.log_abs_psi_star[i]))
            }
        };
        let dt = trace.t_grid[idx];
        step_norms.push(norm);
        t += dt;
        times.push(t);
        // advance the base point
        let ctrl = StepControl::default();
        let mut stepper = Stepper::new(spec.spec(), (point.x(), point.y()), ctrl, Mode::PLAIN, 1.0);
        while let Some(_rec) = stepper.step_to(dt)? {}
        point = stepper.state.wrapped();
    }
    let holds = {
        let log_lambda = math::ln(lambda);
        let mut log_prod = 0.0;
        let mut ok = true;
        for (k, &norm) in step_norms.iter().enumerate() {
            log_prod += math::ln(norm.max(1e-300));
            if log_prod > (k + 1) as f64 * log_lambda + 1e-12 {
                ok = false;
                break;
            }
        }
        ok
    };
    Ok(QuasiContractionCertificate {
        x0,
        times,
        step_norms,
        lambda,
        holds,
    })
}

/// Times `T` (multiples of section recurrences) at which the orbit of `x0`
/// returns within `eps` of itself, scanned from trajectory samples.
pub fn recurrence_times(
    spec: &ValidatedSpec,
    x0: TorusPoint,
    t_max: f64,
    eps: f64,
    t_min: f64,
) -> Result<Vec<f64>, FlowError> {
    let ctrl = StepControl::default();
    let mut stepper = Stepper::new(spec.spec(), (x0.x(), x0.y()), ctrl, Mode::PLAIN, 1.0);
    let mut out = Vec::new();
    let mut last_hit = f64::NEG_INFINITY;
    loop {
        match stepper.step_to(t_max) {
            Ok(Some(rec)) => {
                let p = rec.to.wrapped();
                if stepper.t >= t_min && p.dist(&x0) <= eps && stepper.t - last_hit > 1.0 {
                    out.push(stepper.t);
                    last_hit = stepper.t;
                }
            }
            Ok(None) => break,
            Err(FlowError::StepUnderflow { .. }) => break,
            Err(e) => return Err(e),
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::field::{FieldSpec, Plug};
    use crate::torus::Mat2;

    fn linear(nu: f64) -> ValidatedSpec {
        FieldSpec::linear_flow(nu, vec![]).unwrap().validate().unwrap()
    }

    #[test]
    fn linear_flow_measure_is_flat() {
        let spec = linear(0.37);
        let em = empirical_measure(&spec, TorusPoint::new(0.11, 0.62), 200.0, 0.05).unwrap();
        assert_eq!(em.avg_div, 0.0);
        assert_eq!(em.saddle_fraction, 0.0);
        assert!(!em.truncated);
        // quadrant occupation of an equidistributed orbit is about 1/4 each
        for i in 2..6 {
            assert!(
                (em.observable_avgs[i] - 0.25).abs() < 0.1,
                "{} = {}",
                OBSERVABLE_NAMES[i],
                em.observable_avgs[i]
            );
        }
    }

    #[test]
    fn linear_flow_exponents_vanish() {
        let spec = linear(0.52);
        let est = exponent_estimate(&spec, TorusPoint::new(0.3, 0.3), 50.0).unwrap();
        assert!(est.lambda_psi.abs() <= 1e-10);
        assert!(est.lambda_psi_star.abs() <= 1e-10);
        assert!(est.lambda_det.abs() <= 1e-10);
    }

    #[test]
    fn fixture_exponents_match_closed_form() {
        let spec = FieldSpec::planar_linear_fixture(Mat2::diag(2.0, -1.0))
            .unwrap()
            .validate()
            .unwrap();
        let est = exponent_estimate(&spec, TorusPoint::new(0.01, 0.0), 3.0).unwrap();
        assert!((est.lambda_det - 1.0).abs() <= 1e-4, "lambda_det = {}", est.lambda_det);
        assert!((est.lambda_psi + 1.0).abs() <= 1e-4, "lambda_psi = {}", est.lambda_psi);
        assert!((est.lambda_det - est.avg_div).abs() <= 1e-8);
    }

    #[test]
    fn quasi_contraction_never_holds_for_isometries() {
        let spec = linear(0.3);
        let cert =
            quasi_contraction_certificate(&spec, TorusPoint::new(0.2, 0.2), 12.0, 1.0, 0.95)
                .unwrap();
        assert!(!cert.holds);
        for n in &cert.step_norms {
            assert!((n - 1.0).abs() < 1e-9);
        }
        // partition respects the window
        for w in cert.times.windows(2) {
            let dt = w[1] - w[0];
            assert!(dt >= 1.0 - 1e-9 && dt <= 2.0 + 1e-9, "step {dt}");
        }
    }

    #[test]
    fn negative_divergence_cell_reaches_the_saddle() {
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
        let cell = survey_cell(&spec, TorusPoint::new(0.1, 0.05), 3000.0, 0.05).unwrap();
        assert!(
            cell.saddle_fraction >= 0.9,
            "saddle fraction {}",
            cell.saddle_fraction
        );
        assert_eq!(cell.class, CellClass::Saddle);
    }
}
