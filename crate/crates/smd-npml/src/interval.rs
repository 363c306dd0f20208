//! Bounded intervals serving as the common domain for all densities.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Errors from interval construction.
#[derive(Debug, Error, PartialEq)]
pub enum IntervalError {
    #[error("interval endpoints must be finite with a < b, got ({0}, {1})")]
    InvalidEndpoints(f64, f64),
}

/// A bounded interval with endpoints `a < b`, both finite.
///
/// Densities live on the open interior; basis functions and quadrature
/// rules use the closed hull `[a, b]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    a: f64,
    b: f64,
}

impl Interval {
    pub fn new(a: f64, b: f64) -> Result<Self, IntervalError> {
        if !a.is_finite() || !b.is_finite() || a >= b {
            return Err(IntervalError::InvalidEndpoints(a, b));
        }
        Ok(Self { a, b })
    }

    /// The unit interval (0, 1).
    pub fn unit() -> Self {
        Self { a: 0.0, b: 1.0 }
    }

    pub fn a(&self) -> f64 {
        self.a
    }

    pub fn b(&self) -> f64 {
        self.b
    }

    /// Lebesgue measure `b - a`.
    pub fn length(&self) -> f64 {
        self.b - self.a
    }

    /// Height of the uniform density, `1 / (b - a)`.
    pub fn uniform_height(&self) -> f64 {
        1.0 / self.length()
    }

    /// Membership in the closed hull `[a, b]`.
    pub fn contains(&self, x: f64) -> bool {
        x >= self.a && x <= self.b
    }

    /// Membership in the open interior `(a, b)`.
    pub fn contains_interior(&self, x: f64) -> bool {
        x > self.a && x < self.b
    }

    /// Clamp a point into the closed hull.
    pub fn clamp(&self, x: f64) -> f64 {
        x.clamp(self.a, self.b)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_endpoints() {
        assert!(Interval::new(1.0, 1.0).is_err());
        assert!(Interval::new(2.0, 1.0).is_err());
        assert!(Interval::new(f64::NAN, 1.0).is_err());
        assert!(Interval::new(0.0, f64::INFINITY).is_err());
    }

    #[test]
    fn basic_geometry() {
        let iv = Interval::new(-1.0, 3.0).unwrap();
        assert_eq!(iv.length(), 4.0);
        assert_eq!(iv.uniform_height(), 0.25);
        assert!(iv.contains(-1.0));
        assert!(!iv.contains_interior(-1.0));
        assert!(iv.contains_interior(0.0));
        assert!(!iv.contains(3.5));
    }

    #[test]
    fn serde_round_trip() {
        let iv = Interval::new(0.5, 2.5).unwrap();
        let s = serde_json::to_string(&iv).unwrap();
        let back: Interval = serde_json::from_str(&s).unwrap();
        assert_eq!(iv, back);
    }
}
