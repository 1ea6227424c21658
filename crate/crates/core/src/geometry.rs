//! SE(2) pose algebra, covariance handling and the chi-squared gate.
//!
//! Every [`Pose2`] keeps its heading in the half-open interval (-π, π].
//! Composition follows the usual convention: `a.compose(&b)` expresses `b`
//! after the motion `a`.

use std::f64::consts::{PI, TAU};
use std::fmt;

use nalgebra::{Matrix3, Vector2, Vector3};
use statrs::distribution::{ChiSquared, ContinuousCDF};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GeometryError {
    #[error("covariance is not symmetric positive definite")]
    InvalidCovariance,
    #[error("significance level must lie in (0, 1), got {0}")]
    InvalidSignificance(f64),
    #[error("degrees of freedom must be positive")]
    InvalidDof,
}

/// Wrap an angle to (-π, π].
pub fn wrap_angle(angle: f64) -> f64 {
    if angle > -PI && angle <= PI {
        return angle;
    }
    let mut a = angle.rem_euclid(TAU);
    if a > PI {
        a -= TAU;
    }
    // rem_euclid can land exactly on -π after the shift for inputs like 3π
    if a <= -PI {
        a += TAU;
    }
    a
}

/// A rigid motion in the plane.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Pose2 {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Default for Pose2 {
    fn default() -> Self {
        Self::identity()
    }
}

impl fmt::Display for Pose2 {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "({:.4}, {:.4}, {:.4})", self.x, self.y, self.theta)
    }
}

impl Pose2 {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub const fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    pub fn from_vector(v: &Vector3<f64>) -> Self {
        Self::new(v[0], v[1], v[2])
    }

    pub fn to_vector(&self) -> Vector3<f64> {
        Vector3::new(self.x, self.y, self.theta)
    }

    pub fn translation(&self) -> Vector2<f64> {
        Vector2::new(self.x, self.y)
    }

    /// `self ⊕ other`.
    pub fn compose(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            self.x + c * other.x - s * other.y,
            self.y + s * other.x + c * other.y,
            self.theta + other.theta,
        )
    }

    pub fn inverse(&self) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        Pose2::new(
            -c * self.x - s * self.y,
            s * self.x - c * self.y,
            -self.theta,
        )
    }

    /// Pose of `other` expressed in the frame of `self`, i.e. `self⁻¹ ⊕ other`.
    pub fn between(&self, other: &Pose2) -> Pose2 {
        let (s, c) = self.theta.sin_cos();
        let dx = other.x - self.x;
        let dy = other.y - self.y;
        Pose2::new(c * dx + s * dy, -s * dx + c * dy, other.theta - self.theta)
    }

    /// Apply the motion to a point.
    pub fn transform_point(&self, p: &Vector2<f64>) -> Vector2<f64> {
        let (s, c) = self.theta.sin_cos();
        Vector2::new(self.x + c * p.x - s * p.y, self.y + s * p.x + c * p.y)
    }

    /// Reflection across the x-axis.
    pub fn mirrored(&self) -> Pose2 {
        Pose2::new(self.x, -self.y, -self.theta)
    }

    pub fn translation_distance(&self, other: &Pose2) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn angle_distance(&self, other: &Pose2) -> f64 {
        wrap_angle(self.theta - other.theta).abs()
    }

    /// Interpolate linearly in position and along the shortest arc in heading.
    pub fn interpolate(&self, other: &Pose2, alpha: f64) -> Pose2 {
        let dtheta = wrap_angle(other.theta - self.theta);
        Pose2::new(
            self.x + alpha * (other.x - self.x),
            self.y + alpha * (other.y - self.y),
            self.theta + alpha * dtheta,
        )
    }
}

/// A 3×3 symmetric positive-definite covariance over (x, y, θ).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Covariance3 {
    matrix: Matrix3<f64>,
}

impl Covariance3 {
    pub fn new(matrix: Matrix3<f64>) -> Result<Self, GeometryError> {
        if (matrix - matrix.transpose()).abs().max() > 1e-12 {
            return Err(GeometryError::InvalidCovariance);
        }
        if !matrix.iter().all(|v| v.is_finite()) || matrix.cholesky().is_none() {
            return Err(GeometryError::InvalidCovariance);
        }
        Ok(Self { matrix })
    }

    pub fn diagonal(var_x: f64, var_y: f64, var_theta: f64) -> Result<Self, GeometryError> {
        Self::new(Matrix3::from_diagonal(&Vector3::new(var_x, var_y, var_theta)))
    }

    /// Diagonal covariance from standard deviations.
    pub fn from_sigmas(sigma_xy: f64, sigma_theta: f64) -> Result<Self, GeometryError> {
        Self::diagonal(sigma_xy * sigma_xy, sigma_xy * sigma_xy, sigma_theta * sigma_theta)
    }

    pub fn matrix(&self) -> &Matrix3<f64> {
        &self.matrix
    }

    pub fn scaled(&self, factor: f64) -> Result<Self, GeometryError> {
        Self::new(self.matrix * factor)
    }

    pub fn information(&self) -> Matrix3<f64> {
        // construction guarantees the factorization succeeds
        self.matrix
            .cholesky()
            .map(|c| c.inverse())
            .expect("validated covariance")
    }

    /// Upper-triangle entries in row order: xx, xy, xt, yy, yt, tt.
    pub fn upper_triangle(&self) -> [f64; 6] {
        let m = &self.matrix;
        [m[(0, 0)], m[(0, 1)], m[(0, 2)], m[(1, 1)], m[(1, 2)], m[(2, 2)]]
    }

    pub fn from_upper_triangle(v: [f64; 6]) -> Result<Self, GeometryError> {
        Self::new(Matrix3::new(
            v[0], v[1], v[2], //
            v[1], v[3], v[4], //
            v[2], v[4], v[5],
        ))
    }
}

/// Mahalanobis distance `sqrt(rᵀ Σ⁻¹ r)` with the heading component wrapped.
pub fn mahalanobis(residual: &Vector3<f64>, cov: &Matrix3<f64>) -> Result<f64, GeometryError> {
    let chol = cov.cholesky().ok_or(GeometryError::InvalidCovariance)?;
    let r = Vector3::new(residual[0], residual[1], wrap_angle(residual[2]));
    let l = chol.l();
    let y = l
        .solve_lower_triangular(&r)
        .ok_or(GeometryError::InvalidCovariance)?;
    Ok(y.norm())
}

/// Threshold below which a squared Mahalanobis distance passes a chi-squared
/// test at significance `significance`: the (1 − ε) quantile.
pub fn chi2_quantile(significance: f64, dof: u32) -> Result<f64, GeometryError> {
    if !(significance > 0.0 && significance < 1.0) {
        return Err(GeometryError::InvalidSignificance(significance));
    }
    if dof == 0 {
        return Err(GeometryError::InvalidDof);
    }
    let dist = ChiSquared::new(f64::from(dof)).map_err(|_| GeometryError::InvalidDof)?;
    Ok(dist.inverse_cdf(1.0 - significance))
}

/// Chi-squared CDF, exposed for round-trip checks.
pub fn chi2_cdf(x: f64, dof: u32) -> Result<f64, GeometryError> {
    let dist = ChiSquared::new(f64::from(dof)).map_err(|_| GeometryError::InvalidDof)?;
    Ok(dist.cdf(x))
}
