//! Numerical tolerances shared across the crate.

/// Tolerances used by geometric predicates and validity checks.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Allowed deviation of a quaternion's norm from 1 before it is renormalised.
    pub quat_norm: f64,
    /// Projective depths at or below this are treated as behind the camera.
    pub min_depth: f64,
    /// Relative eigenvalue threshold below which a point set counts as collinear.
    pub degenerate: f64,
}

pub const DEFAULT: Tolerances = Tolerances {
    quat_norm: 1e-6,
    min_depth: 1e-9,
    degenerate: 1e-9,
};

impl Default for Tolerances {
    fn default() -> Self {
        DEFAULT
    }
}
