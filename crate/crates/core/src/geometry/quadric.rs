use nalgebra::{Matrix3, Matrix3x4, Matrix4, SymmetricEigen, UnitQuaternion, Vector3};

use super::{BoundingBox, CameraIntrinsics, Pose, QUATERNION_NORM_TOL};
use crate::error::{Error, Result};

const SYMMETRY_TOL: f64 = 1e-12;

/// Dual (envelope) quadric of an ellipsoid, scaled so that `Q[(3, 3)] == -1`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DualQuadric {
    matrix: Matrix4<f64>,
}

impl DualQuadric {
    /// `Q* = Z diag(s1², s2², s3², -1) Zᵀ` with `Z` the rigid transform placing the
    /// ellipsoid at `position` with orientation `rotation`.
    pub fn from_params(
        position: &Vector3<f64>,
        rotation: &UnitQuaternion<f64>,
        scale: &Vector3<f64>,
    ) -> Result<Self> {
        let norm = rotation.quaternion().norm();
        if (norm - 1.0).abs() > QUATERNION_NORM_TOL {
            return Err(Error::NonUnitQuaternion(norm));
        }
        if !scale.iter().all(|s| s.is_finite() && *s > 0.0) {
            return Err(Error::invalid(format!(
                "ellipsoid semi-axes must be positive, got {scale:?}"
            )));
        }
        let mut z = Matrix4::identity();
        z.fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&rotation.to_rotation_matrix().into_inner());
        z.fixed_view_mut::<3, 1>(0, 3).copy_from(position);
        let shape = Matrix4::from_diagonal(&nalgebra::Vector4::new(
            scale.x * scale.x,
            scale.y * scale.y,
            scale.z * scale.z,
            -1.0,
        ));
        let q = z * shape * z.transpose();
        // Exact symmetry regardless of rounding in the products above.
        let matrix = 0.5 * (q + q.transpose());
        Ok(Self { matrix })
    }

    /// Wraps an arbitrary symmetric 4×4 matrix, rescaling it to the canonical sign and scale.
    pub fn from_matrix(q: Matrix4<f64>) -> Result<Self> {
        if (q - q.transpose()).amax() > SYMMETRY_TOL * q.amax().max(1.0) {
            return Err(Error::invalid("dual quadric must be symmetric"));
        }
        if q[(3, 3)] == 0.0 || !q[(3, 3)].is_finite() {
            return Err(Error::invalid("dual quadric with zero Q[3,3] is not an ellipsoid"));
        }
        let matrix = q / -q[(3, 3)];
        let eig = SymmetricEigen::new(matrix);
        let positive = eig.eigenvalues.iter().filter(|&&v| v > 0.0).count();
        let negative = eig.eigenvalues.iter().filter(|&&v| v < 0.0).count();
        if positive != 3 || negative != 1 {
            return Err(Error::invalid("dual quadric signature is not an ellipsoid"));
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &Matrix4<f64> {
        &self.matrix
    }

    pub fn center(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3) / self.matrix[(3, 3)]
    }

    /// Dual conic `C* = P Q* Pᵀ` for `P = K [R | t]`.
    pub fn dual_conic(&self, pose: &Pose, k: &CameraIntrinsics) -> Matrix3<f64> {
        let camera = Matrix3::new(k.fx, 0.0, k.cx, 0.0, k.fy, k.cy, 0.0, 0.0, 1.0);
        let mut extrinsic = Matrix3x4::zeros();
        extrinsic
            .fixed_view_mut::<3, 3>(0, 0)
            .copy_from(&pose.rotation_matrix());
        extrinsic
            .fixed_view_mut::<3, 1>(0, 3)
            .copy_from(&pose.translation);
        let p = camera * extrinsic;
        p * self.matrix * p.transpose()
    }
}

/// Axis-aligned box bounding the image of the ellipsoid, not clamped to the image.
///
/// Returns `None` when the ellipsoid center is not in front of the camera or the
/// outline is not a bounded ellipse (the principal plane cuts the ellipsoid).
pub fn project_quadric_envelope(
    quadric: &DualQuadric,
    pose: &Pose,
    k: &CameraIntrinsics,
) -> Option<BoundingBox> {
    if pose.transform(&quadric.center()).z <= 0.0 {
        return None;
    }
    let c = quadric.dual_conic(pose, k);
    // With Q[3,3] = -1 the image is a bounded ellipse exactly when C*[2,2] < 0.
    let c33 = c[(2, 2)];
    if !(c33 < 0.0) {
        return None;
    }
    let disc_x = c[(0, 2)] * c[(0, 2)] - c[(0, 0)] * c33;
    let disc_y = c[(1, 2)] * c[(1, 2)] - c[(1, 1)] * c33;
    if !(disc_x > 0.0 && disc_y > 0.0) {
        return None;
    }
    let (sx, sy) = (disc_x.sqrt(), disc_y.sqrt());
    // Dividing by the negative c33 swaps the order of the two tangents.
    let x_min = (c[(0, 2)] + sx) / c33;
    let x_max = (c[(0, 2)] - sx) / c33;
    let y_min = (c[(1, 2)] + sy) / c33;
    let y_max = (c[(1, 2)] - sy) / c33;
    BoundingBox::new(x_min, y_min, x_max, y_max).ok()
}

/// Projected box of a dual quadric, optionally clipped to the image bounds.
pub fn project_quadric_to_bbox(
    quadric: &DualQuadric,
    pose: &Pose,
    k: &CameraIntrinsics,
    clamp: bool,
) -> Option<BoundingBox> {
    let bbox = project_quadric_envelope(quadric, pose, k)?;
    if clamp {
        bbox.clamp_to(k)
    } else {
        Some(bbox)
    }
}
