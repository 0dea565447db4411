//! Sphere primitives: validated unit and tangent vectors, tangent frames on
//! S², uniform sampling of S^{d-1}, and closed-form parallel transport on S².

use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{HdmError, Result};
use crate::rng::rng_from_seed;

pub type Vec3 = [f64; 3];
pub type Mat3 = [[f64; 3]; 3];

const UNIT_TOL: f64 = 1e-12;
const TANGENT_TOL: f64 = 1e-10;
const ANTIPODAL_TOL: f64 = 1e-8;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

#[inline]
pub fn dist2(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub fn cross(a: &Vec3, b: &Vec3) -> Vec3 {
    [
        a[1] * b[2] - a[2] * b[1],
        a[2] * b[0] - a[0] * b[2],
        a[0] * b[1] - a[1] * b[0],
    ]
}

#[inline]
pub fn mat3_apply(m: &Mat3, v: &Vec3) -> Vec3 {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

pub(crate) fn as_vec3(v: &[f64]) -> Result<Vec3> {
    if v.len() != 3 {
        return Err(HdmError::DimensionMismatch {
            expected: 3,
            got: v.len(),
        });
    }
    Ok([v[0], v[1], v[2]])
}

/// A point on the unit sphere of its ambient space.
#[derive(Debug, Clone, PartialEq)]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// Wraps `coords`, rejecting vectors whose norm differs from 1 by more than 1e-12.
    pub fn new(coords: Vec<f64>) -> Result<Self> {
        let n = norm(&coords);
        if coords.is_empty() || (n - 1.0).abs() > UNIT_TOL {
            return Err(HdmError::NotUnit(n));
        }
        Ok(UnitVector(coords))
    }

    /// Projects a nonzero vector onto the sphere.
    pub fn normalize(mut coords: Vec<f64>) -> Result<Self> {
        let n = norm(&coords);
        if !(n > 0.0) || !n.is_finite() {
            return Err(HdmError::NotUnit(n));
        }
        coords.iter_mut().for_each(|c| *c /= n);
        Ok(UnitVector(coords))
    }

    pub fn coords(&self) -> &[f64] {
        &self.0
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }
}

/// A vector attached to a base point and orthogonal to it.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    base: UnitVector,
    vec: Vec<f64>,
}

impl TangentVector {
    pub fn new(base: UnitVector, vec: Vec<f64>) -> Result<Self> {
        if vec.len() != base.dim() {
            return Err(HdmError::DimensionMismatch {
                expected: base.dim(),
                got: vec.len(),
            });
        }
        let ip = dot(base.coords(), &vec);
        if ip.abs() > TANGENT_TOL {
            return Err(HdmError::NotTangent(ip));
        }
        Ok(TangentVector { base, vec })
    }

    pub fn base(&self) -> &UnitVector {
        &self.base
    }

    pub fn vec(&self) -> &[f64] {
        &self.vec
    }

    pub fn norm(&self) -> f64 {
        norm(&self.vec)
    }
}

/// Rotation about `a × b` taking `a` to `b` (both unit vectors in R³).
///
/// Uses `R = c·I + [w]ₓ + w wᵀ/(1 + c)` with `w = a × b`, `c = ⟨a, b⟩`, which
/// needs no normalization of the axis and reduces to the identity when `a = b`.
pub fn transport_rotation(a: &Vec3, b: &Vec3) -> Result<Mat3> {
    let s = [a[0] + b[0], a[1] + b[1], a[2] + b[2]];
    let sn = norm(&s);
    if sn < ANTIPODAL_TOL {
        return Err(HdmError::AntipodalPoints(sn));
    }
    let w = cross(a, b);
    let c = dot(a, b);
    let f = 1.0 / (1.0 + c);
    Ok([
        [c + w[0] * w[0] * f, -w[2] + w[0] * w[1] * f, w[1] + w[0] * w[2] * f],
        [w[2] + w[1] * w[0] * f, c + w[1] * w[1] * f, -w[0] + w[1] * w[2] * f],
        [-w[1] + w[2] * w[0] * f, w[0] + w[2] * w[1] * f, c + w[2] * w[2] * f],
    ])
}

/// Parallel transport on S² from `xi` to `xj` along the connecting great circle.
pub fn parallel_transport_s2(
    xi: &UnitVector,
    xj: &UnitVector,
    v: &TangentVector,
) -> Result<TangentVector> {
    let a = as_vec3(xi.coords())?;
    let b = as_vec3(xj.coords())?;
    let ip = dot(xi.coords(), v.base().coords());
    if (ip - 1.0).abs() > TANGENT_TOL {
        return Err(HdmError::invalid(
            "v",
            "tangent vector is not attached to the source point",
        ));
    }
    let vv = as_vec3(v.vec())?;
    let r = transport_rotation(&a, &b)?;
    let out = mat3_apply(&r, &vv);
    TangentVector::new(xj.clone(), out.to_vec())
}

/// Deterministic orthonormal frame of the tangent plane at `x ∈ S²`.
///
/// The coordinate axis with the smallest `|x_k|` (lowest index on ties) is
/// projected onto the tangent plane to give `e1`; `e2 = x × e1`.
pub fn frame_s2(x: &Vec3) -> (Vec3, Vec3) {
    let mut k = 0;
    for i in 1..3 {
        if x[i].abs() < x[k].abs() {
            k = i;
        }
    }
    let mut e1 = [0.0; 3];
    e1[k] = 1.0;
    let p = x[k];
    for i in 0..3 {
        e1[i] -= p * x[i];
    }
    let n = norm(&e1);
    e1.iter_mut().for_each(|c| *c /= n);
    // one more pass keeps e1 ⟂ x to rounding even when |x| is slightly off 1
    let p = dot(&e1, x);
    for i in 0..3 {
        e1[i] -= p * x[i];
    }
    let n = norm(&e1);
    e1.iter_mut().for_each(|c| *c /= n);
    let e2 = cross(x, &e1);
    (e1, e2)
}

pub fn tangent_frame_s2(x: &UnitVector) -> Result<(TangentVector, TangentVector)> {
    let v = as_vec3(x.coords())?;
    let (e1, e2) = frame_s2(&v);
    Ok((
        TangentVector::new(x.clone(), e1.to_vec())?,
        TangentVector::new(x.clone(), e2.to_vec())?,
    ))
}

/// Draws one uniform point on S^{d-1} from `rng`.
pub fn sample_sphere_point<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| rng.sample(StandardNormal)).collect();
        let n = norm(&v);
        if n > 1e-300 {
            return v.into_iter().map(|c| c / n).collect();
        }
    }
}

/// `n` i.i.d. uniform points on S^{d-1} ⊂ R^d.
pub fn uniform_sphere_sample(d: usize, n: usize, seed: u64) -> Result<Vec<UnitVector>> {
    if d == 0 {
        return Err(HdmError::invalid("d", "ambient dimension must be at least 1"));
    }
    let mut rng = rng_from_seed(seed);
    Ok((0..n)
        .map(|_| UnitVector(sample_sphere_point(d, &mut rng)))
        .collect())
}
