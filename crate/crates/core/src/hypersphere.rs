//! Rectangular <-> hyperspherical coordinates for d-dimensional vectors.
//!
//! A nonzero vector `g` in `R^d` is written as a magnitude `‖g‖` and `d - 1`
//! angles. The first `d - 2` angles measure the inclination of coordinate `z`
//! against the norm of everything after it and live in `[0, π]`; the last one
//! is an ordinary planar angle of the final two coordinates in `(-π, π]`.
//!
//! ```text
//! g_1     = r cos θ_1
//! g_z     = r sin θ_1 ... sin θ_{z-1} cos θ_z      (2 <= z <= d-1)
//! g_d     = r sin θ_1 ... sin θ_{d-1}
//! ```
//!
//! The inverse map is total, so perturbed angles outside the canonical ranges
//! can be converted back without wrapping.

use std::f64::consts::{FRAC_PI_2, PI};

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CoordError {
    #[error("arctan2 is undefined at the origin")]
    UndefinedAngle,
    #[error("direction of the zero vector is undefined")]
    ZeroVector,
    #[error("need at least 2 dimensions, got {0}")]
    TooFewDimensions(usize),
    #[error("non-finite value at index {0}")]
    NonFinite(usize),
}

/// Dense gradient in rectangular coordinates.
#[derive(Debug, Clone, PartialEq)]
pub struct CartesianGradient(Vec<f64>);

impl CartesianGradient {
    pub fn new(components: Vec<f64>) -> Result<Self, CoordError> {
        if components.len() < 2 {
            return Err(CoordError::TooFewDimensions(components.len()));
        }
        if let Some(i) = components.iter().position(|v| !v.is_finite()) {
            return Err(CoordError::NonFinite(i));
        }
        Ok(Self(components))
    }

    pub fn zeros(dim: usize) -> Result<Self, CoordError> {
        Self::new(vec![0.0; dim])
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

    /// Euclidean norm.
    pub fn norm(&self) -> f64 {
        l2_norm(&self.0)
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self(self.0.iter().map(|v| v * factor).collect())
    }

    pub(crate) fn from_vec_unchecked(components: Vec<f64>) -> Self {
        debug_assert!(components.len() >= 2);
        Self(components)
    }
}

impl AsRef<[f64]> for CartesianGradient {
    fn as_ref(&self) -> &[f64] {
        &self.0
    }
}

impl TryFrom<Vec<f64>> for CartesianGradient {
    type Error = CoordError;

    fn try_from(value: Vec<f64>) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

/// Magnitude plus `d - 1` angles (radians).
///
/// Values produced by [`to_spherical`] are canonical. Values built by hand or
/// by adding noise to the angles need not be; [`to_cartesian`] accepts both.
#[derive(Debug, Clone, PartialEq)]
pub struct SphericalCoords {
    pub magnitude: f64,
    pub angles: Vec<f64>,
}

impl SphericalCoords {
    pub fn new(magnitude: f64, angles: Vec<f64>) -> Result<Self, CoordError> {
        if angles.is_empty() {
            return Err(CoordError::TooFewDimensions(angles.len() + 1));
        }
        if !magnitude.is_finite() {
            return Err(CoordError::NonFinite(0));
        }
        if let Some(i) = angles.iter().position(|v| !v.is_finite()) {
            return Err(CoordError::NonFinite(i + 1));
        }
        Ok(Self { magnitude, angles })
    }

    /// Dimension of the rectangular vector these coordinates describe.
    pub fn dim(&self) -> usize {
        self.angles.len() + 1
    }

    /// True when the magnitude is non-negative and every angle lies in its
    /// canonical range.
    pub fn is_canonical(&self) -> bool {
        let Some((last, interior)) = self.angles.split_last() else {
            return false;
        };
        self.magnitude >= 0.0
            && interior.iter().all(|a| (0.0..=PI).contains(a))
            && *last > -PI
            && *last <= PI
    }
}

pub(crate) fn l2_norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Two-argument arctangent with range `(-π, π]`.
///
/// Agrees with the usual case table: `atan(y/x)` for `x > 0`, shifted by `±π`
/// for `x < 0` depending on the sign of `y`, `±π/2` on the vertical axis.
/// A signed zero `y = -0.0` with `x < 0` maps to `π`, not `-π`.
pub fn arctan2(y: f64, x: f64) -> Result<f64, CoordError> {
    if x == 0.0 && y == 0.0 {
        return Err(CoordError::UndefinedAngle);
    }
    if x == 0.0 {
        return Ok(if y > 0.0 { FRAC_PI_2 } else { -FRAC_PI_2 });
    }
    let angle = y.atan2(x);
    Ok(if angle <= -PI { PI } else { angle })
}

/// Converts a nonzero vector to canonical hyperspherical coordinates.
pub fn to_spherical(g: &CartesianGradient) -> Result<SphericalCoords, CoordError> {
    let v = g.as_slice();
    let d = v.len();
    // tail[z] = sum of squares of v[z..]
    let mut tail = vec![0.0; d + 1];
    for z in (0..d).rev() {
        tail[z] = tail[z + 1] + v[z] * v[z];
    }
    if tail[0] == 0.0 {
        return Err(CoordError::ZeroVector);
    }
    let mut angles = Vec::with_capacity(d - 1);
    for z in 0..d - 2 {
        let rest = tail[z + 1].sqrt();
        // rest >= 0 keeps the result in [0, π]; both zero means the remaining
        // coordinates are all zero and the angle is conventionally 0.
        angles.push(arctan2(rest, v[z]).unwrap_or(0.0));
    }
    angles.push(arctan2(v[d - 1], v[d - 2]).unwrap_or(0.0));
    Ok(SphericalCoords {
        magnitude: tail[0].sqrt(),
        angles,
    })
}

/// Converts (possibly non-canonical) hyperspherical coordinates back to a
/// rectangular vector. Sine products are accumulated left to right.
pub fn to_cartesian(s: &SphericalCoords) -> CartesianGradient {
    let d = s.dim();
    let mut out = Vec::with_capacity(d);
    let mut running = s.magnitude;
    for &theta in &s.angles {
        let (sin, cos) = theta.sin_cos();
        out.push(running * cos);
        running *= sin;
    }
    out.push(running);
    CartesianGradient::from_vec_unchecked(out)
}

/// Canonical coordinates of the same rectangular point.
///
/// A zero magnitude yields zero magnitude with all angles zero.
pub fn canonicalize(s: &SphericalCoords) -> SphericalCoords {
    match to_spherical(&to_cartesian(s)) {
        Ok(c) => c,
        Err(_) => SphericalCoords {
            magnitude: 0.0,
            angles: vec![0.0; s.angles.len()],
        },
    }
}

/// Wraps an angle difference into `(-π, π]`.
pub fn wrap_angle(delta: f64) -> f64 {
    let two_pi = 2.0 * PI;
    let mut w = delta.rem_euclid(two_pi);
    if w > PI {
        w -= two_pi;
    }
    w
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::f64::consts::FRAC_PI_4;

    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;
    use rand_distr::StandardNormal;

    fn grad(v: &[f64]) -> CartesianGradient {
        CartesianGradient::new(v.to_vec()).unwrap()
    }

    fn dist(a: &[f64], b: &[f64]) -> f64 {
        a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt()
    }

    fn random_gradient(rng: &mut ChaCha8Rng, d: usize) -> CartesianGradient {
        grad(&(0..d).map(|_| rng.sample(StandardNormal)).collect::<Vec<f64>>())
    }

    #[test]
    fn arctan2_case_table() {
        let s3 = 3f64.sqrt();
        assert!((arctan2(s3, 1.0).unwrap() - PI / 3.0).abs() < 1e-15);
        assert_eq!(arctan2(1.0, 0.0).unwrap(), FRAC_PI_2);
        assert_eq!(arctan2(-1.0, 0.0).unwrap(), -FRAC_PI_2);
        assert_eq!(arctan2(0.0, -1.0).unwrap(), PI);
        assert_eq!(arctan2(-0.0, -1.0).unwrap(), PI);
        assert_eq!(arctan2(0.0, 0.0), Err(CoordError::UndefinedAngle));
        // x < 0, y < 0: atan(y/x) - π
        let a = arctan2(-1.0, -1.0).unwrap();
        assert!((a - (1f64.atan() - PI)).abs() < 1e-15);
        // x < 0, y > 0: atan(y/x) + π
        let a = arctan2(2.0, -1.0).unwrap();
        assert!((a - ((-2f64).atan() + PI)).abs() < 1e-15);
    }

    #[test]
    fn to_spherical_examples() {
        let s = to_spherical(&grad(&[1.0, 3f64.sqrt()])).unwrap();
        assert!((s.magnitude - 2.0).abs() < 1e-15);
        assert!((s.angles[0] - PI / 3.0).abs() < 1e-15);

        let s = to_spherical(&grad(&[0.0, 1.0, 0.0])).unwrap();
        assert_eq!(s.magnitude, 1.0);
        assert_eq!(s.angles, vec![FRAC_PI_2, 0.0]);
    }

    #[test]
    fn zero_vector_is_rejected() {
        assert_eq!(
            to_spherical(&CartesianGradient::zeros(4).unwrap()),
            Err(CoordError::ZeroVector)
        );
    }

    #[test]
    fn construction_checks() {
        assert_eq!(
            CartesianGradient::new(vec![1.0]),
            Err(CoordError::TooFewDimensions(1))
        );
        assert_eq!(
            CartesianGradient::new(vec![1.0, f64::NAN]),
            Err(CoordError::NonFinite(1))
        );
        assert!(SphericalCoords::new(1.0, vec![]).is_err());
        assert!(SphericalCoords::new(f64::INFINITY, vec![0.0]).is_err());
    }

    #[test]
    fn to_cartesian_examples() {
        let g = to_cartesian(&SphericalCoords::new(2.0, vec![PI / 3.0]).unwrap());
        assert!(dist(g.as_slice(), &[1.0, 3f64.sqrt()]) < 1e-15);

        let g = to_cartesian(&SphericalCoords::new(0.0, vec![0.3, -2.0, 7.0]).unwrap());
        assert_eq!(g.as_slice(), &[0.0; 4]);

        let g = to_cartesian(&SphericalCoords::new(1.0, vec![FRAC_PI_2, 0.0]).unwrap());
        assert!(dist(g.as_slice(), &[0.0, 1.0, 0.0]) < 1e-15);
    }

    #[test]
    fn canonicalize_examples() {
        let c = canonicalize(&SphericalCoords::new(1.0, vec![FRAC_PI_4]).unwrap());
        assert!((c.angles[0] - FRAC_PI_4).abs() < 1e-15);

        let c = canonicalize(&SphericalCoords::new(1.0, vec![9.0 * FRAC_PI_4]).unwrap());
        assert!((c.angles[0] - FRAC_PI_4).abs() < 1e-12);
        assert!((c.magnitude - 1.0).abs() < 1e-15);

        let raw = SphericalCoords::new(1.0, vec![-FRAC_PI_2, 0.3]).unwrap();
        let c = canonicalize(&raw);
        assert!(c.is_canonical());
        assert!(!raw.is_canonical());
        assert!(dist(to_cartesian(&c).as_slice(), to_cartesian(&raw).as_slice()) < 1e-12);

        let c = canonicalize(&SphericalCoords::new(0.0, vec![1.0, 2.0]).unwrap());
        assert_eq!(c.magnitude, 0.0);
        assert_eq!(c.angles, vec![0.0, 0.0]);
    }

    #[test]
    fn round_trip_d50_and_large_d() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for &(d, tol) in &[(50usize, 1e-9), (1000, 1e-9), (100_000, 1e-6)] {
            let g = random_gradient(&mut rng, d);
            let back = to_cartesian(&to_spherical(&g).unwrap());
            assert!(dist(back.as_slice(), g.as_slice()) <= tol * g.norm(), "d={d}");
        }
    }

    #[test]
    fn axis_aligned_inputs_stay_canonical() {
        for d in 2..6 {
            for axis in 0..d {
                for sign in [1.0, -1.0] {
                    let mut v = vec![0.0; d];
                    v[axis] = sign;
                    let s = to_spherical(&grad(&v)).unwrap();
                    assert!(s.is_canonical(), "{v:?} -> {s:?}");
                    assert!(dist(to_cartesian(&s).as_slice(), &v) < 1e-15);
                }
            }
        }
    }

    #[test]
    fn wrap_angle_range() {
        assert!((wrap_angle(2.0 * PI - 0.2) + 0.2).abs() < 1e-12);
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert_eq!(wrap_angle(0.0), 0.0);
    }

    fn gradient_strategy() -> impl Strategy<Value = Vec<f64>> {
        (2usize..40).prop_flat_map(|d| prop::collection::vec(-1e3f64..1e3, d))
    }

    proptest! {
        #[test]
        fn round_trip_and_norm(v in gradient_strategy()) {
            let g = grad(&v);
            prop_assume!(g.norm() > 1e-12);
            let s = to_spherical(&g).unwrap();
            prop_assert!(s.is_canonical());
            prop_assert!((s.magnitude - g.norm()).abs() <= 1e-15 * g.norm());
            let back = to_cartesian(&s);
            prop_assert!(dist(back.as_slice(), &v) <= 1e-9 * g.norm());
            prop_assert!((back.norm() - s.magnitude).abs() <= 1e-12 * s.magnitude);
        }

        #[test]
        fn direction_is_scale_free(v in gradient_strategy(), c in 1e-3f64..1e3, k in -8i32..8) {
            let g = grad(&v);
            prop_assume!(g.norm() > 1e-12);
            let base = to_spherical(&g).unwrap().angles;
            // power-of-two scaling is exact in binary floating point
            let exact = to_spherical(&g.scaled(2f64.powi(k))).unwrap().angles;
            prop_assert_eq!(&exact, &base);
            let scaled = to_spherical(&g.scaled(c)).unwrap().angles;
            for (a, b) in scaled.iter().zip(&base) {
                prop_assert!((a - b).abs() <= 1e-12);
            }
        }

        #[test]
        fn canonicalize_preserves_point(
            r in 0.1f64..10.0,
            angles in prop::collection::vec(-20.0f64..20.0, 1..12),
        ) {
            let s = SphericalCoords::new(r, angles).unwrap();
            let c = canonicalize(&s);
            prop_assert!(c.is_canonical());
            let a = to_cartesian(&s);
            let b = to_cartesian(&c);
            prop_assert!(dist(a.as_slice(), b.as_slice()) <= 1e-9 * r);
        }
    }
}
