//! Lorentz-model primitives in plain `f64`.
//!
//! Points live on the upper sheet of the hyperboloid `<u,u>_L = -1/c` in
//! `R^{d+1}`, stored with the spatial part first and the time coordinate
//! last. Everything here is a pure function of its inputs. The trainable
//! pipeline re-expresses the same formulas on the autodiff tape; these
//! versions are the reference used for evaluation, diagnostics and as the
//! oracle the tape versions are tested against.

use crate::error::{Error, Result};

/// Lower clamp for the half-aperture `arcsin` argument.
pub const ASIN_EPS: f64 = 1e-7;
/// Lower clamp for `(c<h_t,h_p>)^2 - 1` in the exterior-angle denominator.
pub const DEN_EPS: f64 = 1e-12;
/// Spatial norms below this are treated as the origin.
pub const ORIGIN_EPS: f64 = 1e-12;
/// Componentwise relative tolerance for point equality.
pub const POINT_TOL: f64 = 1e-9;
/// Default bound on `sqrt(c)*|v|` accepted by the origin lift.
pub const OVERFLOW_GUARD: f64 = 50.0;

/// Curvature magnitude `c`, stored as `log c` so that any finite value is a
/// valid curvature.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Curvature {
    log_c: f64,
}

impl Curvature {
    pub fn from_log(log_c: f64) -> Result<Self> {
        let c = log_c.exp();
        if !log_c.is_finite() || !c.is_finite() || c <= 0.0 {
            return Err(Error::usage(format!(
                "log curvature {log_c} does not give a finite c > 0"
            )));
        }
        Ok(Self { log_c })
    }

    pub fn new(c: f64) -> Result<Self> {
        if !(c.is_finite() && c > 0.0) {
            return Err(Error::usage(format!("curvature must be finite and positive, got {c}")));
        }
        Ok(Self { log_c: c.ln() })
    }

    pub fn log_c(&self) -> f64 {
        self.log_c
    }

    pub fn c(&self) -> f64 {
        self.log_c.exp()
    }

    pub fn sqrt_c(&self) -> f64 {
        (0.5 * self.log_c).exp()
    }
}

impl Default for Curvature {
    fn default() -> Self {
        Self { log_c: 0.0 }
    }
}

/// A point on the curvature `-c` hyperboloid.
#[derive(Debug, Clone, PartialEq)]
pub struct LorentzPoint {
    coords: Vec<f64>,
    curvature: Curvature,
}

impl LorentzPoint {
    /// The hyperboloid origin `(0, ..., 0, 1/sqrt(c))` for spatial width `d`.
    pub fn origin(d: usize, curvature: Curvature) -> Self {
        let mut coords = vec![0.0; d + 1];
        coords[d] = 1.0 / curvature.sqrt_c();
        Self { coords, curvature }
    }

    /// Validates `coords` against the hyperboloid constraint.
    ///
    /// The constraint is checked at `POINT_TOL` relative to `c * t^2`, which
    /// is the scale at which `<u,u>_L` can be resolved in `f64`.
    pub fn from_coords(coords: Vec<f64>, curvature: Curvature) -> Result<Self> {
        if coords.len() < 2 {
            return Err(Error::usage("a Lorentz point needs at least 2 coordinates"));
        }
        if coords.iter().any(|x| !x.is_finite()) {
            return Err(Error::usage("non-finite Lorentz coordinates"));
        }
        let p = Self { coords, curvature };
        if p.time() <= 0.0 {
            return Err(Error::usage("time coordinate must be positive"));
        }
        let residual = p.constraint_residual();
        let scale = 1.0f64.max(curvature.c() * p.time() * p.time());
        if residual.abs() > POINT_TOL * scale {
            return Err(Error::usage(format!(
                "point is off the hyperboloid: c<u,u>_L + 1 = {residual:e}"
            )));
        }
        Ok(p)
    }

    /// Builds a point from its spatial part; the time coordinate follows
    /// from the constraint.
    pub fn from_spatial(spatial: &[f64], curvature: Curvature) -> Result<Self> {
        if spatial.iter().any(|x| !x.is_finite()) {
            return Err(Error::usage("non-finite spatial coordinates"));
        }
        let sq: f64 = spatial.iter().map(|x| x * x).sum();
        let mut coords = Vec::with_capacity(spatial.len() + 1);
        coords.extend_from_slice(spatial);
        coords.push((1.0 / curvature.c() + sq).sqrt());
        if !coords[spatial.len()].is_finite() {
            return Err(Error::Numeric {
                op: "from_spatial",
                detail: "time coordinate overflowed".into(),
            });
        }
        Ok(Self { coords, curvature })
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn curvature(&self) -> Curvature {
        self.curvature
    }

    /// Spatial width `d`.
    pub fn dim(&self) -> usize {
        self.coords.len() - 1
    }

    pub fn spatial(&self) -> &[f64] {
        &self.coords[..self.dim()]
    }

    pub fn time(&self) -> f64 {
        self.coords[self.dim()]
    }

    pub fn spatial_norm(&self) -> f64 {
        euclidean_norm(self.spatial())
    }

    /// `c * <u,u>_L + 1`, zero on the manifold.
    pub fn constraint_residual(&self) -> f64 {
        let c = self.curvature.c();
        c * lorentz_inner_unchecked(&self.coords, &self.coords) + 1.0
    }

    /// Componentwise equality at `POINT_TOL`.
    pub fn approx_eq(&self, other: &Self) -> bool {
        self.coords.len() == other.coords.len()
            && self
                .coords
                .iter()
                .zip(&other.coords)
                .all(|(a, b)| (a - b).abs() <= POINT_TOL * 1.0f64.max(a.abs()).max(b.abs()))
    }

    fn check_compatible(&self, other: &Self) -> Result<()> {
        if self.coords.len() != other.coords.len() {
            return Err(Error::usage(format!(
                "dimension mismatch: {} vs {}",
                self.dim(),
                other.dim()
            )));
        }
        if self.curvature != other.curvature {
            return Err(Error::usage(format!(
                "curvature mismatch: {} vs {}",
                self.curvature.c(),
                other.curvature.c()
            )));
        }
        Ok(())
    }
}

/// A vector in the tangent space at `base`.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    base: LorentzPoint,
    vec: Vec<f64>,
}

impl TangentVector {
    pub fn new(base: LorentzPoint, vec: Vec<f64>) -> Result<Self> {
        if vec.len() != base.coords.len() {
            return Err(Error::usage("tangent vector length does not match its base point"));
        }
        if vec.iter().any(|x| !x.is_finite()) {
            return Err(Error::usage("non-finite tangent vector"));
        }
        let ip = lorentz_inner_unchecked(&vec, &base.coords);
        let scale = 1.0f64.max(euclidean_norm(&vec) * euclidean_norm(&base.coords));
        if ip.abs() > POINT_TOL * scale {
            return Err(Error::usage(format!("vector is not tangent: <v,w>_L = {ip:e}")));
        }
        Ok(Self { base, vec })
    }

    /// Projects an arbitrary ambient vector onto the tangent space at `base`.
    pub fn project(base: LorentzPoint, ambient: &[f64]) -> Result<Self> {
        if ambient.len() != base.coords.len() {
            return Err(Error::usage("ambient vector length does not match its base point"));
        }
        let c = base.curvature.c();
        let ip = lorentz_inner_unchecked(ambient, &base.coords);
        let vec = ambient.iter().zip(&base.coords).map(|(v, w)| v + c * ip * w).collect();
        Ok(Self { base, vec })
    }

    /// Embeds a Euclidean feature as a tangent vector at the origin (zero
    /// time component).
    pub fn at_origin(spatial: &[f64], curvature: Curvature) -> Self {
        let base = LorentzPoint::origin(spatial.len(), curvature);
        let mut vec = spatial.to_vec();
        vec.push(0.0);
        Self { base, vec }
    }

    pub fn base(&self) -> &LorentzPoint {
        &self.base
    }

    pub fn vec(&self) -> &[f64] {
        &self.vec
    }

    /// `sqrt(|<v,v>_L|)`.
    pub fn lorentz_norm(&self) -> f64 {
        lorentz_inner_unchecked(&self.vec, &self.vec).abs().sqrt()
    }
}

pub(crate) fn euclidean_norm(x: &[f64]) -> f64 {
    x.iter().map(|v| v * v).sum::<f64>().sqrt()
}

fn lorentz_inner_unchecked(u: &[f64], v: &[f64]) -> f64 {
    let d = u.len() - 1;
    let spatial: f64 = u[..d].iter().zip(&v[..d]).map(|(a, b)| a * b).sum();
    spatial - u[d] * v[d]
}

/// `sinh(x)/x` with the analytic limit at zero.
pub(crate) fn sinhc(x: f64) -> f64 {
    if x.abs() < 1e-5 {
        1.0 + x * x / 6.0
    } else {
        x.sinh() / x
    }
}

/// Minkowski bilinear form `<u~,v~>_E - u_{d+1} v_{d+1}`.
pub fn lorentz_inner(u: &[f64], v: &[f64]) -> Result<f64> {
    if u.len() != v.len() {
        return Err(Error::usage(format!("length mismatch: {} vs {}", u.len(), v.len())));
    }
    if u.len() < 2 {
        return Err(Error::usage("Lorentz vectors need at least 2 coordinates"));
    }
    Ok(lorentz_inner_unchecked(u, v))
}

/// Geodesic distance `arccosh(-c<u,v>_L)/sqrt(c)`, argument clamped at 1.
///
/// Close points go through `-c<u,v>_L - 1 = c|u-v|_L^2 / 2` and
/// `log1p`, the same quantity without the cancellation in `arccosh` near 1.
pub fn lorentz_distance(u: &LorentzPoint, v: &LorentzPoint) -> Result<f64> {
    u.check_compatible(v)?;
    let c = u.curvature.c();
    let x = -c * lorentz_inner_unchecked(&u.coords, &v.coords);
    let d = if x >= 2.0 {
        x.acosh()
    } else {
        let diff: Vec<f64> = u.coords.iter().zip(&v.coords).map(|(a, b)| a - b).collect();
        let y = (0.5 * c * lorentz_inner_unchecked(&diff, &diff)).max(0.0);
        (y + (y * (2.0 + y)).sqrt()).ln_1p()
    };
    Ok(d / u.curvature.sqrt_c())
}

/// Exponential map at an arbitrary base point.
///
/// The time coordinate of the result is re-derived from its spatial part so
/// the output sits on the hyperboloid to working precision.
pub fn exp_map(base: &LorentzPoint, v: &TangentVector) -> Result<LorentzPoint> {
    if v.base.coords.len() != base.coords.len() || v.base.curvature != base.curvature {
        return Err(Error::usage("tangent vector is attached to a different manifold"));
    }
    if !v.base.approx_eq(base) {
        return Err(Error::usage("tangent vector is attached to a different base point"));
    }
    if base.coords.iter().chain(&v.vec).any(|x| !x.is_finite()) {
        return Err(Error::usage("non-finite input to exp_map"));
    }
    let sqrt_c = base.curvature.sqrt_c();
    let r = sqrt_c * v.lorentz_norm();
    if r == 0.0 {
        return Ok(base.clone());
    }
    let (ch, sc) = (r.cosh(), sinhc(r));
    let d = base.dim();
    let spatial: Vec<f64> = (0..d).map(|i| ch * base.coords[i] + sc * v.vec[i]).collect();
    if spatial.iter().any(|x| !x.is_finite()) {
        return Err(Error::Numeric {
            op: "exp_map",
            detail: format!("overflow at sqrt(c)|v|_L = {r}"),
        });
    }
    LorentzPoint::from_spatial(&spatial, base.curvature)
}

/// Lifts a Euclidean feature onto the hyperboloid through the origin.
pub fn exp_map_origin(v: &[f64], curvature: Curvature) -> Result<LorentzPoint> {
    exp_map_origin_guarded(v, curvature, OVERFLOW_GUARD)
}

/// [`exp_map_origin`] with an explicit bound on `sqrt(c)*|v|`.
pub fn exp_map_origin_guarded(v: &[f64], curvature: Curvature, guard: f64) -> Result<LorentzPoint> {
    if v.is_empty() {
        return Err(Error::usage("cannot lift an empty vector"));
    }
    if v.iter().any(|x| !x.is_finite()) {
        return Err(Error::usage("non-finite feature passed to lift"));
    }
    let r = curvature.sqrt_c() * euclidean_norm(v);
    if r > guard {
        return Err(Error::Saturation { value: r, guard });
    }
    let scale = sinhc(r);
    let spatial: Vec<f64> = v.iter().map(|x| scale * x).collect();
    LorentzPoint::from_spatial(&spatial, curvature)
}

/// Alias for [`exp_map_origin`].
pub fn lift(v: &[f64], curvature: Curvature) -> Result<LorentzPoint> {
    exp_map_origin(v, curvature)
}

/// Half-aperture `arcsin(2K / (sqrt(c)|h~|))` of the entailment cone at
/// `h_t`, with the argument clamped to `[ASIN_EPS, 1]`.
///
/// Points within `2K/sqrt(c)` of the axis origin (including the origin
/// itself) get the widest cone, `pi/2`.
pub fn half_aperture(h_t: &LorentzPoint, k: f64) -> f64 {
    let norm = h_t.spatial_norm();
    let arg = if norm == 0.0 {
        1.0
    } else {
        2.0 * k / (h_t.curvature.sqrt_c() * norm)
    };
    arg.clamp(ASIN_EPS, 1.0).asin()
}

/// Exterior angle between the cone axis at `h_t` and the point `h_p`.
///
/// Returns [`Error::Degenerate`] when `h_t` sits at the origin or coincides
/// with `h_p`; callers treat such pairs as carrying no ordering penalty.
pub fn exterior_angle(h_t: &LorentzPoint, h_p: &LorentzPoint) -> Result<f64> {
    h_t.check_compatible(h_p)?;
    let norm_t = h_t.spatial_norm();
    if norm_t < ORIGIN_EPS {
        return Err(Error::Degenerate("cone apex at the origin"));
    }
    if h_t.approx_eq(h_p) {
        return Err(Error::Degenerate("cone apex coincides with the point"));
    }
    let c = h_t.curvature.c();
    let ip = lorentz_inner_unchecked(&h_t.coords, &h_p.coords);
    let num = h_p.time() + c * h_t.time() * ip;
    let den = norm_t * ((c * ip).powi(2) - 1.0).max(DEN_EPS).sqrt();
    Ok((num / den).clamp(-1.0, 1.0).acos())
}
