//! Parameterized torus vector-field families.
//!
//! Three families are supported:
//!
//! * `LinearFlow` — the constant field `(nu, 1)`, optionally with horizontal
//!   sine bands; the rigid-rotation baseline.
//! * `CherryFamily` — the constant field blended, through a tensor-product
//!   `C^inf` bump supported on the plug square `Q = [center +- r]^2`, with the
//!   local field `P(u, v) = (kappa u, gamma (v^2 - v0^2))`. `P` has a saddle
//!   at plug-local `(0, -v0)` below a source at `(0, +v0)`, which is what
//!   produces the flat interval of the return circle map. The sign of the
//!   divergence at the saddle is `sign(kappa - 2 gamma v0)`.
//! * `PlanarLinearFixture` — the chart-local field `p -> A p`, used to unit
//!   test the tangent flow and the cocycle identities against closed forms.

use alloc::format;
use alloc::string::String;
use alloc::vec::Vec;
use core::fmt;

use crate::math;
use crate::torus::{Mat2, PlanarVector, TorusPoint};

/// Cherry plug: a saddle/source pair planted on the vertical axis of the
/// square `Q = [cx - r, cx + r] x [cy - r, cy + r]`.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Plug {
    pub cx: f64,
    pub cy: f64,
    pub r: f64,
    pub v0: f64,
    pub kappa: f64,
    pub gamma: f64,
}

/// Horizontal wiggle `amp * sin(2 pi freq x)` applied inside a `y`-band
/// through a smooth bump; the band never overlaps the plug square.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Band {
    pub amp: f64,
    pub freq: u32,
    pub y_lo: f64,
    pub y_hi: f64,
}

#[derive(Clone, Debug, PartialEq)]
pub enum FieldSpec {
    LinearFlow { nu: f64, bands: Vec<Band> },
    CherryFamily { nu: f64, plug: Plug, bands: Vec<Band> },
    PlanarLinearFixture { matrix: Mat2 },
}

/// Why a spec was rejected, either at construction or by `validate`.
#[derive(Clone, Debug, PartialEq)]
pub enum RejectionReport {
    NonFiniteParameter(&'static str),
    PlugParameterOutOfRange(&'static str),
    BandGeometry { band: usize },
    PlugTouchesSection,
    BandOverlapsPlug { band: usize },
    SectionNotTransverse { min_vertical_speed: f64 },
    /// Newton sweep found a zero of the field outside the plug core.
    ZeroOutsidePlugCore { x: f64, y: f64 },
    SingularityCount { found: usize },
    MissingSaddleSource { found: Vec<SingularityClass> },
    DegenerateEigenvalue { at_x: f64, at_y: f64 },
}

impl fmt::Display for RejectionReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::NonFiniteParameter(name) => write!(f, "non-finite parameter `{name}`"),
            Self::PlugParameterOutOfRange(name) => {
                write!(f, "plug parameter `{name}` out of range")
            }
            Self::BandGeometry { band } => write!(f, "band {band} has an invalid y-interval"),
            Self::PlugTouchesSection => {
                write!(f, "plug square is not disjoint from the section circle {{y = 0}}")
            }
            Self::BandOverlapsPlug { band } => {
                write!(f, "band {band} support overlaps the plug square")
            }
            Self::SectionNotTransverse { min_vertical_speed } => write!(
                f,
                "vertical speed drops to {min_vertical_speed:.3e} outside the plug"
            ),
            Self::ZeroOutsidePlugCore { x, y } => {
                write!(f, "field vanishes at ({x:.6}, {y:.6}) outside the plug core")
            }
            Self::SingularityCount { found } => {
                write!(f, "expected exactly two singularities, found {found}")
            }
            Self::MissingSaddleSource { found } => {
                write!(f, "singularities are not one saddle plus one source: {found:?}")
            }
            Self::DegenerateEigenvalue { at_x, at_y } => {
                write!(f, "degenerate eigenvalue at ({at_x:.6}, {at_y:.6})")
            }
        }
    }
}

impl core::error::Error for RejectionReport {}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SingularityClass {
    Saddle,
    Source,
    Sink,
    SpiralSource,
    SpiralSink,
    NonHyperbolic,
}

impl fmt::Display for SingularityClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Self::Saddle => "saddle",
            Self::Source => "source",
            Self::Sink => "sink",
            Self::SpiralSource => "spiral_source",
            Self::SpiralSink => "spiral_sink",
            Self::NonHyperbolic => "non_hyperbolic",
        };
        f.write_str(s)
    }
}

/// An equilibrium of the field together with its local linearization.
#[derive(Clone, Debug)]
pub struct Singularity {
    pub position: TorusPoint,
    pub jacobian: Mat2,
    /// `(re, im)` pairs, by descending real part.
    pub eigenvalues: [(f64, f64); 2],
    pub divergence: f64,
    pub class: SingularityClass,
}

/// Real eigenvalue magnitudes below this are treated as zero when
/// classifying singularities.
const HYPERBOLICITY_EPS: f64 = 1e-9;
const NEWTON_TOL: f64 = 1e-12;
const NEWTON_MAX_ITER: usize = 50;
const NEWTON_GRID: usize = 64;
const DEDUP_RADIUS: f64 = 1e-6;
/// Required vertical speed on the section and outside the plug.
const TRANSVERSALITY_MIN: f64 = 0.1;

fn check_finite(value: f64, name: &'static str) -> Result<(), RejectionReport> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(RejectionReport::NonFiniteParameter(name))
    }
}

fn check_bands(bands: &[Band]) -> Result<(), RejectionReport> {
    for (i, band) in bands.iter().enumerate() {
        check_finite(band.amp, "band.amp")?;
        check_finite(band.y_lo, "band.y_lo")?;
        check_finite(band.y_hi, "band.y_hi")?;
        let ok = band.freq >= 1
            && (0.0..1.0).contains(&band.y_lo)
            && (0.0..=1.0).contains(&band.y_hi)
            && band.y_lo < band.y_hi;
        if !ok {
            return Err(RejectionReport::BandGeometry { band: i });
        }
    }
    Ok(())
}

impl FieldSpec {
    pub fn linear_flow(nu: f64, bands: Vec<Band>) -> Result<Self, RejectionReport> {
        check_finite(nu, "nu")?;
        check_bands(&bands)?;
        Ok(Self::LinearFlow { nu, bands })
    }

    pub fn cherry(nu: f64, plug: Plug, bands: Vec<Band>) -> Result<Self, RejectionReport> {
        check_finite(nu, "nu")?;
        check_finite(plug.cx, "plug.cx")?;
        check_finite(plug.cy, "plug.cy")?;
        check_finite(plug.r, "plug.r")?;
        check_finite(plug.v0, "plug.v0")?;
        check_finite(plug.kappa, "plug.kappa")?;
        check_finite(plug.gamma, "plug.gamma")?;
        check_bands(&bands)?;
        if plug.r <= 0.0 || plug.r >= 0.5 {
            return Err(RejectionReport::PlugParameterOutOfRange("r"));
        }
        if plug.v0 <= 0.0 || plug.v0 >= 0.5 {
            return Err(RejectionReport::PlugParameterOutOfRange("v0"));
        }
        Ok(Self::CherryFamily { nu, plug, bands })
    }

    pub fn planar_linear_fixture(matrix: Mat2) -> Result<Self, RejectionReport> {
        if !matrix.is_finite() {
            return Err(RejectionReport::NonFiniteParameter("matrix"));
        }
        Ok(Self::PlanarLinearFixture { matrix })
    }

    pub fn nu(&self) -> Option<f64> {
        match self {
            Self::LinearFlow { nu, .. } | Self::CherryFamily { nu, .. } => Some(*nu),
            Self::PlanarLinearFixture { .. } => None,
        }
    }

    pub fn plug(&self) -> Option<&Plug> {
        match self {
            Self::CherryFamily { plug, .. } => Some(plug),
            _ => None,
        }
    }

    pub fn bands(&self) -> &[Band] {
        match self {
            Self::LinearFlow { bands, .. } | Self::CherryFamily { bands, .. } => bands,
            Self::PlanarLinearFixture { .. } => &[],
        }
    }

    /// Same family and plug, different base slope.
    pub fn with_nu(&self, nu: f64) -> Result<Self, RejectionReport> {
        match self {
            Self::LinearFlow { bands, .. } => Self::linear_flow(nu, bands.clone()),
            Self::CherryFamily { plug, bands, .. } => Self::cherry(nu, *plug, bands.clone()),
            Self::PlanarLinearFixture { .. } => {
                Err(RejectionReport::NonFiniteParameter("nu on fixture"))
            }
        }
    }

    /// Same family, different band list.
    pub fn with_bands(&self, bands: Vec<Band>) -> Result<Self, RejectionReport> {
        match self {
            Self::LinearFlow { nu, .. } => Self::linear_flow(*nu, bands),
            Self::CherryFamily { nu, plug, .. } => Self::cherry(*nu, *plug, bands),
            Self::PlanarLinearFixture { .. } => {
                Err(RejectionReport::NonFiniteParameter("bands on fixture"))
            }
        }
    }

    pub fn family_name(&self) -> &'static str {
        match self {
            Self::LinearFlow { .. } => "LinearFlow",
            Self::CherryFamily { .. } => "CherryFamily",
            Self::PlanarLinearFixture { .. } => "PlanarLinearFixture",
        }
    }

    /// Field value in chart coordinates. Periodic families wrap the input;
    /// the planar fixture reads it raw.
    pub fn eval_raw(&self, x: f64, y: f64) -> PlanarVector {
        match self {
            Self::LinearFlow { nu, bands } => {
                PlanarVector::new(nu + band_sum(bands, x, y), 1.0)
            }
            Self::CherryFamily { nu, plug, bands } => {
                let mut v = cherry_eval(*nu, plug, x, y);
                v.dx += band_sum(bands, x, y);
                v
            }
            Self::PlanarLinearFixture { matrix } => matrix.apply(PlanarVector::new(x, y)),
        }
    }

    /// Jacobian of the field in chart coordinates (analytic).
    pub fn jacobian_raw(&self, x: f64, y: f64) -> Mat2 {
        match self {
            Self::LinearFlow { bands, .. } => band_jacobian(bands, x, y),
            Self::CherryFamily { nu, plug, bands } => {
                let mut j = cherry_jacobian(*nu, plug, x, y);
                let jb = band_jacobian(bands, x, y);
                j.a += jb.a;
                j.b += jb.b;
                j
            }
            Self::PlanarLinearFixture { matrix } => *matrix,
        }
    }

    pub fn divergence_raw(&self, x: f64, y: f64) -> f64 {
        self.jacobian_raw(x, y).trace()
    }
}

/// `Y(p)`.
pub fn eval_field(spec: &FieldSpec, p: TorusPoint) -> PlanarVector {
    spec.eval_raw(p.x(), p.y())
}

/// Analytic Jacobian of the field at `p`.
pub fn jacobian(spec: &FieldSpec, p: TorusPoint) -> Mat2 {
    spec.jacobian_raw(p.x(), p.y())
}

/// Trace of the Jacobian at `p`.
pub fn divergence_at(spec: &FieldSpec, p: TorusPoint) -> f64 {
    jacobian(spec, p).trace()
}

/// `exp(-1/z)` continued by zero, and its derivative.
fn sigma(z: f64) -> (f64, f64) {
    if z <= 0.0 {
        (0.0, 0.0)
    } else {
        let v = math::exp(-1.0 / z);
        (v, v / (z * z))
    }
}

/// `C^inf` transition: 1 for `w <= 0`, 0 for `w >= 1`, strictly monotone
/// between. Returns `(value, d/dw)`.
fn smooth_step(w: f64) -> (f64, f64) {
    if w <= 0.0 {
        return (1.0, 0.0);
    }
    if w >= 1.0 {
        return (0.0, 0.0);
    }
    let (sa, da) = sigma(1.0 - w);
    let (sb, db) = sigma(w);
    let denom = sa + sb;
    let value = sa / denom;
    // d/dw [sa/(sa+sb)] with sa = sigma(1-w), sb = sigma(w)
    let deriv = (-da * sb - sa * db) / (denom * denom);
    (value, deriv)
}

/// Even `C^inf` bump: 1 on `[-1/2, 1/2]`, 0 outside `[-1, 1]`.
/// Returns `(value, d/dt)`.
fn bump(t: f64) -> (f64, f64) {
    let a = t.abs();
    let (v, dw) = smooth_step(2.0 * a - 1.0);
    let sign = if t < 0.0 { -1.0 } else { 1.0 };
    (v, 2.0 * sign * dw)
}

/// Signed displacement of `x` from `c` on the circle, in `[-1/2, 1/2)`.
#[inline]
fn signed_offset(x: f64, c: f64) -> f64 {
    math::wrap_unit(x - c + 0.5) - 0.5
}

fn cherry_eval(nu: f64, plug: &Plug, x: f64, y: f64) -> PlanarVector {
    let u = signed_offset(x, plug.cx) / plug.r;
    let v = signed_offset(y, plug.cy) / plug.r;
    if u.abs() >= 1.0 || v.abs() >= 1.0 {
        return PlanarVector::new(nu, 1.0);
    }
    let (bu, _) = bump(u);
    let (bv, _) = bump(v);
    let b = bu * bv;
    let p1 = plug.kappa * u;
    let p2 = plug.gamma * (v * v - plug.v0 * plug.v0);
    PlanarVector::new((1.0 - b) * nu + b * p1, (1.0 - b) + b * p2)
}

fn cherry_jacobian(nu: f64, plug: &Plug, x: f64, y: f64) -> Mat2 {
    let u = signed_offset(x, plug.cx) / plug.r;
    let v = signed_offset(y, plug.cy) / plug.r;
    if u.abs() >= 1.0 || v.abs() >= 1.0 {
        return Mat2::ZERO;
    }
    let (bu, dbu) = bump(u);
    let (bv, dbv) = bump(v);
    let b = bu * bv;
    // d/dx = (1/r) d/du, d/dy = (1/r) d/dv
    let bx = dbu * bv / plug.r;
    let by = bu * dbv / plug.r;
    let p1 = plug.kappa * u;
    let p2 = plug.gamma * (v * v - plug.v0 * plug.v0);
    Mat2::new(
        (p1 - nu) * bx + b * plug.kappa / plug.r,
        (p1 - nu) * by,
        (p2 - 1.0) * bx,
        (p2 - 1.0) * by + b * 2.0 * plug.gamma * v / plug.r,
    )
}

fn band_profile(band: &Band, y: f64) -> (f64, f64) {
    let mid = 0.5 * (band.y_lo + band.y_hi);
    let half = 0.5 * (band.y_hi - band.y_lo);
    let t = signed_offset(y, mid) / half;
    let (v, dv) = bump(t);
    (v, dv / half)
}

fn band_sum(bands: &[Band], x: f64, y: f64) -> f64 {
    let mut acc = 0.0;
    for band in bands {
        let (w, _) = band_profile(band, y);
        if w != 0.0 {
            acc += band.amp * math::sin(math::TAU * band.freq as f64 * x) * w;
        }
    }
    acc
}

fn band_jacobian(bands: &[Band], x: f64, y: f64) -> Mat2 {
    let mut a = 0.0;
    let mut b = 0.0;
    for band in bands {
        let (w, dw) = band_profile(band, y);
        if w != 0.0 || dw != 0.0 {
            let phase = math::TAU * band.freq as f64 * x;
            a += band.amp * math::TAU * band.freq as f64 * math::cos(phase) * w;
            b += band.amp * math::sin(phase) * dw;
        }
    }
    Mat2::new(a, b, 0.0, 0.0)
}

fn classify(eigenvalues: [(f64, f64); 2]) -> SingularityClass {
    let (l1, l2) = (eigenvalues[0], eigenvalues[1]);
    if l1.1 != 0.0 {
        // complex conjugate pair
        if l1.0.abs() <= HYPERBOLICITY_EPS {
            SingularityClass::NonHyperbolic
        } else if l1.0 > 0.0 {
            SingularityClass::SpiralSource
        } else {
            SingularityClass::SpiralSink
        }
    } else if l1.0.abs() <= HYPERBOLICITY_EPS || l2.0.abs() <= HYPERBOLICITY_EPS {
        SingularityClass::NonHyperbolic
    } else if l1.0 > 0.0 && l2.0 > 0.0 {
        SingularityClass::Source
    } else if l1.0 < 0.0 && l2.0 < 0.0 {
        SingularityClass::Sink
    } else {
        SingularityClass::Saddle
    }
}

fn newton_zero(spec: &FieldSpec, mut x: f64, mut y: f64) -> Option<(f64, f64)> {
    for _ in 0..NEWTON_MAX_ITER {
        let f = spec.eval_raw(x, y);
        if !f.is_finite() {
            return None;
        }
        if f.norm() <= NEWTON_TOL {
            return Some((x, y));
        }
        let j = spec.jacobian_raw(x, y);
        let inv = j.inverse()?;
        let step = inv.apply(f);
        x -= step.dx;
        y -= step.dy;
        if !x.is_finite() || !y.is_finite() {
            return None;
        }
    }
    None
}

/// Locates and classifies the zeros of the field by a Newton sweep over a
/// 64x64 seed grid. Seeds that fail to converge are discarded; converged
/// zeros are deduplicated at torus distance 1e-6.
pub fn find_singularities(spec: &FieldSpec) -> Result<Vec<Singularity>, RejectionReport> {
    if matches!(spec, FieldSpec::LinearFlow { .. }) {
        // vertical speed is identically 1
        return Ok(Vec::new());
    }
    let mut zeros: Vec<(f64, f64)> = Vec::new();
    let n = NEWTON_GRID;
    for i in 0..n {
        for k in 0..n {
            let sx = (i as f64 + 0.5) / n as f64;
            let sy = (k as f64 + 0.5) / n as f64;
            if let FieldSpec::CherryFamily { plug, .. } = spec {
                // zeros can only occur where the bump is active
                let u = signed_offset(sx, plug.cx).abs() / plug.r;
                let v = signed_offset(sy, plug.cy).abs() / plug.r;
                if u > 1.2 || v > 1.2 {
                    continue;
                }
            }
            if let Some((zx, zy)) = newton_zero(spec, sx, sy) {
                let zp = TorusPoint::new(zx, zy);
                let dup = zeros
                    .iter()
                    .any(|&(ex, ey)| TorusPoint::new(ex, ey).dist(&zp) <= DEDUP_RADIUS);
                if !dup {
                    zeros.push((zp.x(), zp.y()));
                }
            }
        }
    }

    if let FieldSpec::CherryFamily { plug, .. } = spec {
        for &(zx, zy) in &zeros {
            let u = signed_offset(zx, plug.cx).abs() / plug.r;
            let v = signed_offset(zy, plug.cy).abs() / plug.r;
            // the bump is flat to all orders at the plateau edge, so
            // degenerate parameter sets produce numerical zeros slightly
            // past the nominal core; those are caught by the class checks
            if u > 0.55 || v > 0.55 {
                return Err(RejectionReport::ZeroOutsidePlugCore { x: zx, y: zy });
            }
        }
    }

    let mut out: Vec<Singularity> = zeros
        .into_iter()
        .map(|(zx, zy)| {
            let position = TorusPoint::new(zx, zy);
            let jac = spec.jacobian_raw(zx, zy);
            let eigenvalues = jac.eigenvalues();
            Singularity {
                position,
                jacobian: jac,
                eigenvalues,
                divergence: jac.trace(),
                class: classify(eigenvalues),
            }
        })
        .collect();
    out.sort_by(|a, b| {
        (a.position.y(), a.position.x())
            .partial_cmp(&(b.position.y(), b.position.x()))
            .unwrap()
    });
    Ok(out)
}

/// A spec that passed validation. Immutable; all downstream operations are
/// pure functions of `(spec, point)` and safe to call concurrently.
#[derive(Clone, Debug)]
pub struct ValidatedSpec {
    spec: FieldSpec,
    singularities: Vec<Singularity>,
    saddle: Option<usize>,
    source: Option<usize>,
}

impl ValidatedSpec {
    pub fn spec(&self) -> &FieldSpec {
        &self.spec
    }

    pub fn singularities(&self) -> &[Singularity] {
        &self.singularities
    }

    pub fn saddle(&self) -> Option<&Singularity> {
        self.saddle.map(|i| &self.singularities[i])
    }

    pub fn source(&self) -> Option<&Singularity> {
        self.source.map(|i| &self.singularities[i])
    }

    pub fn eval(&self, p: TorusPoint) -> PlanarVector {
        eval_field(&self.spec, p)
    }

    /// Summary line used by reports.
    pub fn describe(&self) -> String {
        match self.saddle() {
            Some(s) => format!(
                "{} (saddle divergence {:.4})",
                self.spec.family_name(),
                s.divergence
            ),
            None => String::from(self.spec.family_name()),
        }
    }
}

impl core::ops::Deref for ValidatedSpec {
    type Target = FieldSpec;

    fn deref(&self) -> &FieldSpec {
        &self.spec
    }
}

impl FieldSpec {
    /// Runs the standing-hypothesis checks and freezes the spec.
    ///
    /// For `CherryFamily` this accepts iff (i) the field has exactly two
    /// zeros, one saddle and one source, (ii) the vertical speed is at
    /// least 0.1 on the section and on the whole complement of the plug
    /// square, and (iii) the saddle eigenvalues are real of opposite sign.
    pub fn validate(self) -> Result<ValidatedSpec, RejectionReport> {
        match &self {
            FieldSpec::LinearFlow { .. } => Ok(ValidatedSpec {
                spec: self,
                singularities: Vec::new(),
                saddle: None,
                source: None,
            }),
            FieldSpec::PlanarLinearFixture { .. } => {
                let singularities = find_singularities(&self)?;
                let saddle = singularities
                    .iter()
                    .position(|s| s.class == SingularityClass::Saddle);
                let source = singularities
                    .iter()
                    .position(|s| s.class == SingularityClass::Source);
                Ok(ValidatedSpec {
                    spec: self,
                    singularities,
                    saddle,
                    source,
                })
            }
            FieldSpec::CherryFamily { plug, bands, .. } => {
                if plug.cy - plug.r <= 0.0 || plug.cy + plug.r >= 1.0 {
                    return Err(RejectionReport::PlugTouchesSection);
                }
                for (i, band) in bands.iter().enumerate() {
                    let disjoint = band.y_hi < plug.cy - plug.r || band.y_lo > plug.cy + plug.r;
                    if !disjoint {
                        return Err(RejectionReport::BandOverlapsPlug { band: i });
                    }
                }

                let singularities = find_singularities(&self)?;
                // degenerate eigenvalues come first: they are the cause
                // when the zero count explodes (e.g. gamma = 0 smears the
                // saddle/source pair into a segment of zeros)
                if let Some(s) = singularities
                    .iter()
                    .find(|s| s.class == SingularityClass::NonHyperbolic)
                {
                    return Err(RejectionReport::DegenerateEigenvalue {
                        at_x: s.position.x(),
                        at_y: s.position.y(),
                    });
                }
                if singularities.len() != 2 {
                    return Err(RejectionReport::SingularityCount {
                        found: singularities.len(),
                    });
                }
                let saddle = singularities
                    .iter()
                    .position(|s| s.class == SingularityClass::Saddle);
                let source = singularities
                    .iter()
                    .position(|s| s.class == SingularityClass::Source);
                if saddle.is_none() || source.is_none() {
                    return Err(RejectionReport::MissingSaddleSource {
                        found: singularities.iter().map(|s| s.class).collect(),
                    });
                }

                let min_speed = min_vertical_speed(&self, plug);
                if min_speed < TRANSVERSALITY_MIN {
                    return Err(RejectionReport::SectionNotTransverse {
                        min_vertical_speed: min_speed,
                    });
                }

                Ok(ValidatedSpec {
                    spec: self,
                    singularities,
                    saddle,
                    source,
                })
            }
        }
    }
}

/// Minimum of the field's y-component over the section and over a grid on
/// the complement of the plug square.
fn min_vertical_speed(spec: &FieldSpec, plug: &Plug) -> f64 {
    let mut min = f64::INFINITY;
    let n = 2048;
    for i in 0..n {
        let x = i as f64 / n as f64;
        min = min.min(spec.eval_raw(x, 0.0).dy);
    }
    let m = 128;
    for i in 0..m {
        for k in 0..m {
            let x = (i as f64 + 0.5) / m as f64;
            let y = (k as f64 + 0.5) / m as f64;
            let inside_q = signed_offset(x, plug.cx).abs() <= plug.r
                && signed_offset(y, plug.cy).abs() <= plug.r;
            if !inside_q {
                min = min.min(spec.eval_raw(x, y).dy);
            }
        }
    }
    min
}

#[cfg(test)]
mod tests {
    use super::*;

    fn reference_plug() -> Plug {
        Plug {
            cx: 0.5,
            cy: 0.5,
            r: 0.2,
            v0: 0.25,
            kappa: 1.0,
            gamma: 4.0,
        }
    }

    #[test]
    fn linear_flow_is_constant() {
        let spec = FieldSpec::linear_flow(0.618, alloc::vec![]).unwrap();
        let v = eval_field(&spec, TorusPoint::new(0.3, 0.7));
        assert_eq!(v, PlanarVector::new(0.618, 1.0));
        assert_eq!(jacobian(&spec, TorusPoint::new(0.9, 0.1)), Mat2::ZERO);
        assert_eq!(divergence_at(&spec, TorusPoint::new(0.2, 0.2)), 0.0);
    }

    #[test]
    fn plug_core_zero_and_jacobian() {
        let plug = reference_plug();
        let spec = FieldSpec::cherry(0.6, plug, alloc::vec![]).unwrap();
        // plug-local (0, -v0): the saddle
        let saddle = TorusPoint::new(plug.cx, plug.cy - plug.v0 * plug.r);
        let v = eval_field(&spec, saddle);
        assert!(v.norm() < 1e-14, "field at saddle = {v:?}");
        let j = jacobian(&spec, saddle);
        assert!((j.a - plug.kappa / plug.r).abs() < 1e-12);
        assert!((j.d - (-2.0 * plug.gamma * plug.v0 / plug.r)).abs() < 1e-12);
        assert!(j.b.abs() < 1e-12 && j.c.abs() < 1e-12);
        // divergence (kappa - 2 gamma v0)/r = (1 - 2)/0.2 = -5
        assert!((divergence_at(&spec, saddle) + 5.0).abs() < 1e-10);
    }

    #[test]
    fn source_divergence_is_positive() {
        let plug = reference_plug();
        let spec = FieldSpec::cherry(0.6, plug, alloc::vec![]).unwrap();
        let source = TorusPoint::new(plug.cx, plug.cy + plug.v0 * plug.r);
        let d = divergence_at(&spec, source);
        let expected = (plug.kappa + 2.0 * plug.gamma * plug.v0) / plug.r;
        assert!((d - expected).abs() < 1e-10);
        assert!(d > 0.0);
    }

    #[test]
    fn field_is_periodic() {
        let plug = reference_plug();
        let spec = FieldSpec::cherry(
            0.37,
            plug,
            alloc::vec![Band {
                amp: 0.05,
                freq: 3,
                y_lo: 0.8,
                y_hi: 0.95,
            }],
        )
        .unwrap();
        // dyadic coordinates so that adding small integers is exact in f64
        for &(x, y) in &[(0.125, 0.875), (0.5, 0.4375), (0.765625, 0.03125)] {
            let base = eval_field(&spec, TorusPoint::new(x, y));
            for &(sx, sy) in &[(1.0, 0.0), (0.0, 1.0), (-2.0, 3.0)] {
                let shifted = eval_field(&spec, TorusPoint::new(x + sx, y + sy));
                assert_eq!(base, shifted);
            }
        }
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let plug = reference_plug();
        let spec = FieldSpec::cherry(
            0.45,
            plug,
            alloc::vec![Band {
                amp: 0.08,
                freq: 2,
                y_lo: 0.78,
                y_hi: 0.97,
            }],
        )
        .unwrap();
        let h = 1e-6;
        // points inside the core, in the blend ring, in a band, and far away
        for &(x, y) in &[
            (0.5, 0.45),
            (0.52, 0.48),
            (0.62, 0.55),
            (0.43, 0.38),
            (0.3, 0.85),
            (0.1, 0.1),
        ] {
            let j = spec.jacobian_raw(x, y);
            let fxp = spec.eval_raw(x + h, y);
            let fxm = spec.eval_raw(x - h, y);
            let fyp = spec.eval_raw(x, y + h);
            let fym = spec.eval_raw(x, y - h);
            let fd = Mat2::new(
                (fxp.dx - fxm.dx) / (2.0 * h),
                (fyp.dx - fym.dx) / (2.0 * h),
                (fxp.dy - fxm.dy) / (2.0 * h),
                (fyp.dy - fym.dy) / (2.0 * h),
            );
            for (a, b) in [(j.a, fd.a), (j.b, fd.b), (j.c, fd.c), (j.d, fd.d)] {
                assert!((a - b).abs() <= 1e-5, "({x},{y}): analytic {a} vs fd {b}");
            }
        }
    }

    #[test]
    fn finds_saddle_and_source_of_reference_plug() {
        let spec = FieldSpec::cherry(0.6, reference_plug(), alloc::vec![]).unwrap();
        let sings = find_singularities(&spec).unwrap();
        assert_eq!(sings.len(), 2);
        let saddle = &sings[0];
        let source = &sings[1];
        assert_eq!(saddle.class, SingularityClass::Saddle);
        assert_eq!(source.class, SingularityClass::Source);
        assert!(saddle.position.dist(&TorusPoint::new(0.5, 0.45)) < 1e-8);
        assert!(source.position.dist(&TorusPoint::new(0.5, 0.55)) < 1e-8);
        for s in &sings {
            assert!(eval_field(&spec, s.position).norm() <= 1e-10);
            let sum_re = s.eigenvalues[0].0 + s.eigenvalues[1].0;
            assert!((s.divergence - sum_re).abs() <= 1e-9);
        }
    }

    #[test]
    fn fixture_has_single_saddle_at_origin() {
        let spec = FieldSpec::planar_linear_fixture(Mat2::diag(2.0, -1.0)).unwrap();
        let sings = find_singularities(&spec).unwrap();
        assert_eq!(sings.len(), 1);
        assert_eq!(sings[0].class, SingularityClass::Saddle);
        assert!(sings[0].position.dist(&TorusPoint::new(0.0, 0.0)) < 1e-9);
        assert!((sings[0].divergence - 1.0).abs() < 1e-12);
    }

    #[test]
    fn validate_accepts_reference_spec() {
        let spec = FieldSpec::cherry(0.6, reference_plug(), alloc::vec![]).unwrap();
        let validated = spec.validate().unwrap();
        assert_eq!(validated.singularities().len(), 2);
        assert!(validated.saddle().unwrap().divergence < 0.0);
        assert!(validated.source().unwrap().divergence > 0.0);
    }

    #[test]
    fn validate_rejects_gamma_zero() {
        let mut plug = reference_plug();
        plug.gamma = 0.0;
        let spec = FieldSpec::cherry(0.6, plug, alloc::vec![]).unwrap();
        match spec.validate() {
            Err(RejectionReport::DegenerateEigenvalue { .. }) => {}
            other => panic!("expected degenerate-eigenvalue rejection, got {other:?}"),
        }
    }

    #[test]
    fn validate_rejects_plug_touching_section() {
        let mut plug = reference_plug();
        plug.cy = 0.15;
        let spec = FieldSpec::cherry(0.6, plug, alloc::vec![]).unwrap();
        assert_eq!(spec.validate().unwrap_err(), RejectionReport::PlugTouchesSection);
    }

    #[test]
    fn validate_rejects_band_overlapping_plug() {
        let band = Band {
            amp: 0.02,
            freq: 2,
            y_lo: 0.45,
            y_hi: 0.6,
        };
        let spec = FieldSpec::cherry(0.6, reference_plug(), alloc::vec![band]).unwrap();
        assert!(matches!(
            spec.validate().unwrap_err(),
            RejectionReport::BandOverlapsPlug { band: 0 }
        ));
    }

    #[test]
    fn construction_rejects_non_finite() {
        assert!(FieldSpec::linear_flow(f64::NAN, alloc::vec![]).is_err());
        let mut plug = reference_plug();
        plug.gamma = f64::INFINITY;
        assert!(FieldSpec::cherry(0.5, plug, alloc::vec![]).is_err());
    }

    #[test]
    fn saddle_divergence_sign_tracks_parameters() {
        // kappa - 2 gamma v0 decides the sign
        for &(kappa, gamma, positive) in &[(1.0, 4.0, false), (1.0, 1.5, true), (2.5, 2.0, true)] {
            let plug = Plug {
                kappa,
                gamma,
                ..reference_plug()
            };
            let spec = FieldSpec::cherry(0.6, plug, alloc::vec![]).unwrap();
            let validated = spec.validate().unwrap();
            let d = validated.saddle().unwrap().divergence;
            assert_eq!(d > 0.0, positive, "kappa={kappa}, gamma={gamma}, d={d}");
            let predicted = (kappa - 2.0 * gamma * plug.v0) / plug.r;
            assert!((d - predicted).abs() < 1e-9);
        }
    }
}
