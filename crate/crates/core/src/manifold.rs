//! Lorentz-model operations expressed on the autodiff tape.
//!
//! Points are `[.., d+1]` tensors with the time coordinate last, matching
//! [`crate::geometry`]. Curvature enters as a tape variable so gradients
//! reach `log c`.

use crate::autodiff::{Tensor, Var};
use crate::error::{Error, Result};

/// `c` and `sqrt(c)` derived from a `[1]`-shaped `log c` variable.
#[derive(Clone, Copy, Debug)]
pub struct DiffCurvature<'t> {
    pub c: Var<'t>,
    pub sqrt_c: Var<'t>,
}

impl<'t> DiffCurvature<'t> {
    pub fn from_log(log_c: Var<'t>) -> Result<Self> {
        Ok(Self {
            c: log_c.exp()?,
            sqrt_c: log_c.mul_scalar(0.5)?.exp()?,
        })
    }

    pub fn value(&self) -> f64 {
        self.c.item()
    }
}

fn last_axis(v: Var<'_>) -> usize {
    v.shape().len() - 1
}

/// Origin lift of the rows of `v` (`[.., d]` to `[.., d+1]`).
///
/// Fails with [`Error::Saturation`] if any row has `sqrt(c)|v| > guard`.
pub fn lift<'t>(v: Var<'t>, curv: &DiffCurvature<'t>, guard: f64) -> Result<Var<'t>> {
    let axis = last_axis(v);
    let r = v.norm(axis)?.mul(curv.sqrt_c)?;
    let worst = r.value().data().iter().copied().fold(0.0, f64::max);
    if worst > guard {
        return Err(Error::Saturation { value: worst, guard });
    }
    let spatial = v.mul(r.sinhc()?)?;
    let time = r.cosh()?.div(curv.sqrt_c)?;
    v.tape().concat(&[spatial, time], axis)
}

fn minkowski_sign<'t>(like: Var<'t>) -> Var<'t> {
    let width = *like.shape().last().unwrap();
    let mut sign = vec![1.0; width];
    sign[width - 1] = -1.0;
    like.tape().constant(Tensor::from_parts(vec![width], sign))
}

/// Row-wise `<u,v>_L`, shape `[.., 1]`; broadcasts like `mul`.
pub fn inner_rows<'t>(u: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
    let prod = u.mul(v)?.mul(minkowski_sign(u))?;
    let axis = last_axis(prod);
    prod.sum_axis(axis)
}

/// All-pairs `<u_i, v_j>_L` for `u: [n, d+1]`, `v: [m, d+1]`.
pub fn inner_pairwise<'t>(u: Var<'t>, v: Var<'t>) -> Result<Var<'t>> {
    u.matmul(v.mul(minkowski_sign(v))?.transpose()?)
}

/// `arccosh(max(-c<u,v>_L, 1)) / sqrt(c)` from precomputed inner products.
pub fn distance_from_inner<'t>(inner: Var<'t>, curv: &DiffCurvature<'t>) -> Result<Var<'t>> {
    inner.mul(curv.c)?.neg()?.clamp_min(1.0)?.acosh()?.div(curv.sqrt_c)
}

/// Spatial part `[.., d]`.
pub fn spatial(u: Var<'_>) -> Result<Var<'_>> {
    let axis = last_axis(u);
    let w = u.shape()[axis];
    u.slice(axis, 0, w - 1)
}

/// Time coordinate `[.., 1]`.
pub fn time(u: Var<'_>) -> Result<Var<'_>> {
    let axis = last_axis(u);
    let w = u.shape()[axis];
    u.slice(axis, w - 1, w)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::Tape;
    use crate::geometry::{self, Curvature};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn lift_and_distance_match_reference() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &c in &[0.5, 1.0, 2.0] {
            let tape = Tape::new();
            let curv = DiffCurvature::from_log(tape.constant(Tensor::scalar(f64::ln(c)))).unwrap();
            let data: Vec<f64> = (0..12).map(|_| rng.random_range(-1.0..1.0)).collect();
            let v = tape.constant(Tensor::new(vec![4, 3], data.clone()).unwrap());
            let pts = lift(v, &curv, 50.0).unwrap();
            let d = distance_from_inner(inner_pairwise(pts, pts).unwrap(), &curv).unwrap();
            let cv = Curvature::new(c).unwrap();
            let reference: Vec<_> = data.chunks(3).map(|row| geometry::lift(row, cv).unwrap()).collect();
            for i in 0..4 {
                for k in 0..4 {
                    assert!((pts.value().data()[i * 4 + k] - reference[i].coords()[k]).abs() < 1e-12);
                }
                for j in 0..4 {
                    let want = geometry::lorentz_distance(&reference[i], &reference[j]).unwrap();
                    let got = d.value().data()[i * 4 + j];
                    assert!((want - got).abs() < 1e-7, "{want} vs {got}");
                }
            }
        }
    }

    #[test]
    fn lift_reports_saturation() {
        let tape = Tape::new();
        let curv = DiffCurvature::from_log(tape.constant(Tensor::scalar(0.0))).unwrap();
        let v = tape.constant(Tensor::new(vec![1, 2], vec![40.0, 40.0]).unwrap());
        assert!(matches!(lift(v, &curv, 50.0), Err(Error::Saturation { .. })));
    }
}
