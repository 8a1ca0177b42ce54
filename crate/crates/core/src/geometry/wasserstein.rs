use nalgebra::Vector2;

use super::BoundingBox;

/// Axis-aligned 2D Gaussian embedding of a box: mean at the center,
/// variances equal to the squared half extents.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GaussianBox {
    pub mean: Vector2<f64>,
    /// Diagonal of the covariance (pixels²).
    pub variance: Vector2<f64>,
}

impl GaussianBox {
    pub fn std_dev(&self) -> Vector2<f64> {
        self.variance.map(f64::sqrt)
    }
}

pub fn bbox_to_gaussian(bbox: &BoundingBox) -> GaussianBox {
    let half_w = 0.5 * bbox.width();
    let half_h = 0.5 * bbox.height();
    GaussianBox {
        mean: bbox.center(),
        variance: Vector2::new(half_w * half_w, half_h * half_h),
    }
}

/// Squared 2-Wasserstein distance between Gaussians with diagonal covariances.
pub fn wasserstein2_sq(a: &GaussianBox, b: &GaussianBox) -> f64 {
    (a.mean - b.mean).norm_squared() + (a.std_dev() - b.std_dev()).norm_squared()
}

/// `exp(-sqrt(W2²) / C)`, a similarity in (0, 1].
pub fn normalized_wasserstein(a: &GaussianBox, b: &GaussianBox, scale: f64) -> f64 {
    (-wasserstein2_sq(a, b).sqrt() / scale).exp()
}
