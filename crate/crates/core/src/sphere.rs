//! Geometry of the unit hypersphere S^{d-1} embedded in R^d.
//!
//! Points are [`UnitVector`]s and velocities are [`TangentVector`]s carrying
//! the base point they are attached to. Motion happens along great circles
//! ([`geodesic_step`]) and tangent vectors move between tangent spaces by
//! parallel transport along the connecting great circle ([`transport`]).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norms at or below this are treated as zero.
pub const EPS_NORM: f64 = 1e-12;

/// Transport is refused when `z_from · z_to < -1 + EPS_ANTIPODAL`.
pub const EPS_ANTIPODAL: f64 = 1e-8;

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    debug_assert_eq!(a.len(), b.len());
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// `y += alpha * x`
#[inline]
pub fn axpy(alpha: f64, x: &[f64], y: &mut [f64]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// A point on S^{d-1}, d >= 2.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<f64>", into = "Vec<f64>")]
pub struct UnitVector(Vec<f64>);

impl UnitVector {
    /// The `i`-th standard basis vector of R^d.
    ///
    /// # Panics
    ///
    /// If `d < 2` or `i >= d`.
    pub fn basis(d: usize, i: usize) -> Self {
        assert!(d >= 2 && i < d, "basis({d}, {i}) is not a point of S^{{d-1}}");
        let mut coords = vec![0.0; d];
        coords[i] = 1.0;
        UnitVector(coords)
    }

    /// Point on S¹ at angle `theta` from the x-axis.
    pub fn from_angle(theta: f64) -> Self {
        UnitVector(vec![theta.cos(), theta.sin()])
    }

    pub fn dim(&self) -> usize {
        self.0.len()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn into_inner(self) -> Vec<f64> {
        self.0
    }

    pub fn dot(&self, other: &UnitVector) -> f64 {
        dot(&self.0, &other.0)
    }

    /// Great-circle distance in radians.
    pub fn angle_to(&self, other: &UnitVector) -> f64 {
        self.dot(other).clamp(-1.0, 1.0).acos()
    }

    /// The antipodal point.
    pub fn neg(&self) -> UnitVector {
        UnitVector(self.0.iter().map(|x| -x).collect())
    }
}

impl AsRef<[f64]> for UnitVector {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for UnitVector {
    type Error = Error;

    /// Coordinates already on the sphere (within 1e-9) are kept verbatim so
    /// that serialized points read back bit-identically; anything else is
    /// normalized.
    fn try_from(coords: Vec<f64>) -> Result<Self> {
        if coords.len() >= 2 && (norm(&coords) - 1.0).abs() <= 1e-9 {
            return Ok(UnitVector(coords));
        }
        normalize(&coords)
    }
}

impl From<UnitVector> for Vec<f64> {
    fn from(u: UnitVector) -> Self {
        u.0
    }
}

/// A vector in the tangent space T_z S^{d-1} of its base point `z`.
#[derive(Clone, Debug, PartialEq)]
pub struct TangentVector {
    coords: Vec<f64>,
    base: UnitVector,
}

impl TangentVector {
    pub fn zero(base: &UnitVector) -> Self {
        TangentVector {
            coords: vec![0.0; base.dim()],
            base: base.clone(),
        }
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn base(&self) -> &UnitVector {
        &self.base
    }

    pub fn norm(&self) -> f64 {
        norm(&self.coords)
    }

    pub fn norm_squared(&self) -> f64 {
        dot(&self.coords, &self.coords)
    }

    pub fn into_coords(self) -> Vec<f64> {
        self.coords
    }

    /// Same base, coordinates multiplied by `s`.
    pub fn scaled(&self, s: f64) -> TangentVector {
        TangentVector {
            coords: self.coords.iter().map(|x| s * x).collect(),
            base: self.base.clone(),
        }
    }

    /// `self * a + other * b`; both must share a base point.
    pub fn combine(&self, a: f64, other: &TangentVector, b: f64) -> TangentVector {
        debug_assert_eq!(self.base, other.base);
        TangentVector {
            coords: self
                .coords
                .iter()
                .zip(&other.coords)
                .map(|(x, y)| a * x + b * y)
                .collect(),
            base: self.base.clone(),
        }
    }
}

/// Scales `x` onto the unit sphere.
pub fn normalize(x: &[f64]) -> Result<UnitVector> {
    if x.len() < 2 {
        return Err(Error::DimensionTooSmall(x.len()));
    }
    let n = norm(x);
    if !(n > EPS_NORM) {
        return Err(Error::DegenerateVector { norm: n });
    }
    Ok(UnitVector(x.iter().map(|v| v / n).collect()))
}

/// Removes the radial component: `v - (v·z) z`.
pub fn project_tangent(v: &[f64], z: &UnitVector) -> TangentVector {
    assert_eq!(v.len(), z.dim(), "project_tangent: dimension mismatch");
    let radial = dot(v, z.as_slice());
    let mut coords = v.to_vec();
    axpy(-radial, z.as_slice(), &mut coords);
    TangentVector {
        coords,
        base: z.clone(),
    }
}

/// Follows the great circle through `z` with initial velocity `v` for time `eps`.
///
/// The arc length travelled is `‖v‖·eps`. The result is renormalized.
pub fn geodesic_step(z: &UnitVector, v: &TangentVector, eps: f64) -> UnitVector {
    let speed = v.norm();
    if speed < EPS_NORM {
        return z.clone();
    }
    let theta = speed * eps;
    let (s, c) = theta.sin_cos();
    let coords: Vec<f64> = z
        .as_slice()
        .iter()
        .zip(v.coords())
        .map(|(zi, vi)| zi * c + vi / speed * s)
        .collect();
    // The arc formula is exact; only rounding pulls the norm away from 1.
    let n = norm(&coords);
    UnitVector(coords.into_iter().map(|x| x / n).collect())
}

/// Parallel transport of `v` from `T_{z_from}` to `T_{z_to}` along the
/// shortest great circle.
///
/// Rotates the component of `v` lying in span{z_from, z_to} by the angle
/// between the endpoints and leaves the orthogonal complement untouched,
/// using the closed form `v - (v·z_to)/(1 + z_from·z_to) (z_from + z_to)`.
pub fn transport(v: &TangentVector, z_from: &UnitVector, z_to: &UnitVector) -> Result<TangentVector> {
    if z_from.dim() != z_to.dim() {
        return Err(Error::DimensionMismatch {
            expected: z_from.dim(),
            got: z_to.dim(),
        });
    }
    let c = z_from.dot(z_to);
    if c < -1.0 + EPS_ANTIPODAL {
        return Err(Error::AntipodalTransport { cosine: c });
    }
    let k = dot(v.coords(), z_to.as_slice()) / (1.0 + c);
    let coords = v
        .coords()
        .iter()
        .zip(z_from.as_slice().iter().zip(z_to.as_slice()))
        .map(|(vi, (a, b))| vi - k * (a + b))
        .collect();
    Ok(TangentVector {
        coords,
        base: z_to.clone(),
    })
}

/// Draws `N(0, I_d)` in the ambient space and projects it onto `T_z`.
pub fn sample_tangent_gaussian<R: Rng + ?Sized>(z: &UnitVector, rng: &mut R) -> TangentVector {
    let raw = sample_ambient_gaussian(z.dim(), rng);
    project_tangent(&raw, z)
}

pub(crate) fn sample_ambient_gaussian<R: Rng + ?Sized>(d: usize, rng: &mut R) -> Vec<f64> {
    (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)).collect()
}
