//! Euclidean projection onto the ball `{x : |x - center|^2 <= radius_sq}`,
//! solved in closed form from its KKT system.
//!
//! Minimizing `0.5 |x - p|^2` subject to the ball constraint gives the
//! stationarity condition `(x - p) + 2 mu (x - center) = 0`, so
//! `x = (p + 2 mu center) / (1 + 2 mu)`. When the constraint is active,
//! substituting into `|x - center|^2 = radius_sq` yields
//! `mu^2 + mu - c / (4 radius_sq) + 1/4 = 0` with `c = |p - center|^2`, whose
//! nonnegative root is `mu = (sqrt(c / radius_sq) - 1) / 2`.

use thiserror::Error;

use crate::nn::ParamVector;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ProjectionError {
    #[error("ball radius must be positive and finite, got {0}")]
    NonPositiveRadius(f64),
    #[error("ball center must be finite")]
    NonFiniteCenter,
    #[error("point has {point} coordinates, ball center has {center}")]
    DimensionMismatch { point: usize, center: usize },
}

/// Points with `c <= radius_sq * (1 + INSIDE_TOL)` count as feasible.
pub const INSIDE_TOL: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq)]
pub struct BallConstraint {
    center: ParamVector,
    radius_sq: f64,
}

impl BallConstraint {
    pub fn new(center: ParamVector, radius_sq: f64) -> Result<Self, ProjectionError> {
        if !(radius_sq > 0.0 && radius_sq.is_finite()) {
            return Err(ProjectionError::NonPositiveRadius(radius_sq));
        }
        if !center.is_finite() {
            return Err(ProjectionError::NonFiniteCenter);
        }
        Ok(Self { center, radius_sq })
    }

    pub fn center(&self) -> &ParamVector {
        &self.center
    }

    pub fn radius_sq(&self) -> f64 {
        self.radius_sq
    }

    pub fn contains(&self, point: &ParamVector) -> bool {
        point.dist_sq(&self.center) <= self.radius_sq * (1.0 + INSIDE_TOL)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProjectionResult {
    pub point: ParamVector,
    /// KKT multiplier of the ball constraint.
    pub multiplier: f64,
    pub active: bool,
}

/// Nonnegative root of `mu^2 + mu - dist_sq / (4 radius_sq) + 1/4 = 0`.
///
/// Returns 0 for points on or inside the sphere.
pub fn solve_mu(dist_sq: f64, radius_sq: f64) -> Result<f64, ProjectionError> {
    if !(radius_sq > 0.0 && radius_sq.is_finite()) {
        return Err(ProjectionError::NonPositiveRadius(radius_sq));
    }
    Ok((((dist_sq / radius_sq).sqrt() - 1.0) / 2.0).max(0.0))
}

pub fn project(point: &ParamVector, ball: &BallConstraint) -> Result<ProjectionResult, ProjectionError> {
    if point.len() != ball.center.len() {
        return Err(ProjectionError::DimensionMismatch {
            point: point.len(),
            center: ball.center.len(),
        });
    }
    let dist_sq = point.dist_sq(&ball.center);
    if dist_sq <= ball.radius_sq * (1.0 + INSIDE_TOL) {
        return Ok(ProjectionResult {
            point: point.clone(),
            multiplier: 0.0,
            active: false,
        });
    }
    let mu = solve_mu(dist_sq, ball.radius_sq)?;
    // (p + 2 mu c) / (1 + 2 mu), written relative to the center so large
    // centers do not cancel.
    let shrink = 1.0 / (1.0 + 2.0 * mu);
    let mut out = ball.center.clone();
    for ((o, &p), &c) in out
        .as_mut_slice()
        .iter_mut()
        .zip(point.as_slice())
        .zip(ball.center.as_slice())
    {
        *o += (p - c) * shrink;
    }
    Ok(ProjectionResult {
        point: out,
        multiplier: mu,
        active: true,
    })
}
