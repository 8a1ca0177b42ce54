//! Three-point perspective resection following Grunert's formulation.
//!
//! With `s1, s2, s3` the unknown distances along the bearings and the ratios
//! `u = s2 / s1`, `v = s3 / s1`, the law of cosines on the three sides of the
//! world triangle reduces to a quartic in `v`. Its real roots are found as
//! eigenvalues of the companion matrix, polished, and each yields a distance
//! triple that is refined with Gauss-Newton before the rigid alignment.

use nalgebra::{DMatrix, Matrix3, Rotation3, UnitQuaternion, Vector3};

use super::Pose;

/// Roots whose imaginary part exceeds this are treated as complex.
const IMAG_TOL: f64 = 1e-9;
/// Every returned pose maps each point onto its bearing within this angle (radians).
const REPROJECTION_TOL: f64 = 1e-6;
const COLLINEAR_TOL: f64 = 1e-9;

/// Angle in radians between the bearing and the direction of `pose * point`.
pub fn reprojection_angle(pose: &Pose, point: &Vector3<f64>, bearing: &Vector3<f64>) -> f64 {
    let p = pose.transform(point);
    p.cross(bearing).norm().atan2(p.dot(bearing))
}

/// All camera poses (at most four) consistent with three world points seen along
/// three unit bearings. Collinear configurations yield no pose; solutions placing
/// a point behind the camera are discarded.
pub fn p3p_solve(world: &[Vector3<f64>; 3], bearings: &[Vector3<f64>; 3]) -> Vec<Pose> {
    let [p1, p2, p3] = world;
    let e12 = p2 - p1;
    let e13 = p3 - p1;
    if e12.cross(&e13).norm() <= COLLINEAR_TOL * e12.norm() * e13.norm() {
        return Vec::new();
    }
    let b: Vec<Vector3<f64>> = bearings.iter().map(|v| v.normalize()).collect();

    let a2 = (p2 - p3).norm_squared();
    let b2 = e13.norm_squared();
    let c2 = e12.norm_squared();
    let cos_a = b[1].dot(&b[2]);
    let cos_b = b[0].dot(&b[2]);
    let cos_g = b[0].dot(&b[1]);
    let sides = Sides {
        a2,
        b2,
        c2,
        cos_a,
        cos_b,
        cos_g,
    };

    let k = (a2 - c2) / b2;
    let r_ac = (a2 + c2) / b2;
    let ca2 = cos_a * cos_a;
    let cg2 = cos_g * cos_g;
    let coeffs = [
        (k - 1.0).powi(2) - 4.0 * c2 / b2 * ca2,
        4.0 * (k * (1.0 - k) * cos_b - (1.0 - r_ac) * cos_a * cos_g
            + 2.0 * c2 / b2 * ca2 * cos_b),
        2.0 * (k * k - 1.0 + 2.0 * k * k * cos_b * cos_b + 2.0 * (b2 - c2) / b2 * ca2
            - 4.0 * r_ac * cos_a * cos_b * cos_g
            + 2.0 * (b2 - a2) / b2 * cg2),
        4.0 * (-k * (1.0 + k) * cos_b + 2.0 * a2 / b2 * cg2 * cos_b
            - (1.0 - r_ac) * cos_a * cos_g),
        (1.0 + k).powi(2) - 4.0 * a2 / b2 * cg2,
    ];

    let mut poses: Vec<Pose> = Vec::with_capacity(4);
    for v in real_roots(&coeffs) {
        if v <= 0.0 {
            continue;
        }
        let denom = 1.0 + v * v - 2.0 * v * cos_b;
        if denom <= 0.0 {
            continue;
        }
        let s1 = (b2 / denom).sqrt();
        let s3 = v * s1;
        let Some(s2) = best_s2(&sides, s1, s3, k, v) else {
            continue;
        };
        let s = sides.refine(Vector3::new(s1, s2, s3));
        if s.iter().any(|&d| !(d > 0.0)) {
            continue;
        }
        let cam = [s[0] * b[0], s[1] * b[1], s[2] * b[2]];
        let Some(pose) = align(world, &cam) else {
            continue;
        };
        let consistent = world.iter().zip(b.iter()).all(|(p, bearing)| {
            pose.transform(p).z > 0.0 && reprojection_angle(&pose, p, bearing) < REPROJECTION_TOL
        });
        if !consistent {
            continue;
        }
        let duplicate = poses.iter().any(|q| {
            q.rotation.angle_to(&pose.rotation) < 1e-9
                && (q.translation - pose.translation).norm() < 1e-9 * (1.0 + pose.translation.norm())
        });
        if !duplicate {
            poses.push(pose);
        }
    }
    poses
}

struct Sides {
    a2: f64,
    b2: f64,
    c2: f64,
    cos_a: f64,
    cos_b: f64,
    cos_g: f64,
}

impl Sides {
    fn residual(&self, s: &Vector3<f64>) -> Vector3<f64> {
        let (s1, s2, s3) = (s.x, s.y, s.z);
        Vector3::new(
            s2 * s2 + s3 * s3 - 2.0 * s2 * s3 * self.cos_a - self.a2,
            s1 * s1 + s3 * s3 - 2.0 * s1 * s3 * self.cos_b - self.b2,
            s1 * s1 + s2 * s2 - 2.0 * s1 * s2 * self.cos_g - self.c2,
        )
    }

    fn refine(&self, mut s: Vector3<f64>) -> Vector3<f64> {
        let mut r = self.residual(&s);
        for _ in 0..8 {
            if r.amax() < 1e-15 * self.b2.max(1.0) {
                break;
            }
            let (s1, s2, s3) = (s.x, s.y, s.z);
            #[rustfmt::skip]
            let jac = Matrix3::new(
                0.0, 2.0 * (s2 - s3 * self.cos_a), 2.0 * (s3 - s2 * self.cos_a),
                2.0 * (s1 - s3 * self.cos_b), 0.0, 2.0 * (s3 - s1 * self.cos_b),
                2.0 * (s1 - s2 * self.cos_g), 2.0 * (s2 - s1 * self.cos_g), 0.0,
            );
            let Some(step) = jac.lu().solve(&(-r)) else {
                break;
            };
            let next = s + step;
            let r_next = self.residual(&next);
            if r_next.norm() >= r.norm() {
                break;
            }
            s = next;
            r = r_next;
        }
        s
    }
}

/// Picks `s2` from the closed-form ratio and from both roots of the `c` side
/// equation, keeping whichever best satisfies the remaining equations.
fn best_s2(sides: &Sides, s1: f64, s3: f64, k: f64, v: f64) -> Option<f64> {
    let mut candidates = Vec::with_capacity(3);
    let denom = 2.0 * (sides.cos_g - v * sides.cos_a);
    if denom.abs() > 1e-12 {
        let u = ((k - 1.0) * v * v - 2.0 * k * sides.cos_b * v + 1.0 + k) / denom;
        candidates.push(u * s1);
    }
    let disc = sides.c2 - s1 * s1 * (1.0 - sides.cos_g * sides.cos_g);
    if disc >= 0.0 {
        let r = disc.sqrt();
        candidates.push(s1 * sides.cos_g + r);
        candidates.push(s1 * sides.cos_g - r);
    }
    candidates
        .into_iter()
        .filter(|s2| *s2 > 0.0)
        .map(|s2| {
            let r = sides.residual(&Vector3::new(s1, s2, s3));
            (s2, r.x.abs() + r.z.abs())
        })
        .min_by(|x, y| x.1.total_cmp(&y.1))
        .map(|(s2, _)| s2)
}

/// Real roots of `c[0] x^n + ... + c[n]`, from the companion matrix then Newton-polished.
fn real_roots(coeffs: &[f64]) -> Vec<f64> {
    let scale = coeffs.iter().fold(0.0f64, |m, c| m.max(c.abs()));
    if scale == 0.0 {
        return Vec::new();
    }
    let lead = coeffs
        .iter()
        .position(|c| c.abs() > 1e-14 * scale)
        .unwrap_or(coeffs.len());
    let poly = &coeffs[lead..];
    let degree = poly.len().saturating_sub(1);
    if degree == 0 {
        return Vec::new();
    }
    let mut companion = DMatrix::<f64>::zeros(degree, degree);
    for j in 0..degree {
        companion[(0, j)] = -poly[j + 1] / poly[0];
    }
    for i in 1..degree {
        companion[(i, i - 1)] = 1.0;
    }
    companion
        .complex_eigenvalues()
        .iter()
        .filter(|z| z.im.abs() < IMAG_TOL)
        .map(|z| polish(poly, z.re))
        .collect()
}

fn polish(poly: &[f64], mut x: f64) -> f64 {
    for _ in 0..4 {
        let (mut p, mut dp) = (0.0, 0.0);
        for &c in poly {
            dp = dp * x + p;
            p = p * x + c;
        }
        if dp == 0.0 {
            break;
        }
        let step = p / dp;
        x -= step;
        if step.abs() <= 1e-16 * x.abs().max(1.0) {
            break;
        }
    }
    x
}

/// Rigid transform taking the world triangle onto the camera-frame triangle.
fn align(world: &[Vector3<f64>; 3], cam: &[Vector3<f64>; 3]) -> Option<Pose> {
    let frame = |p: &[Vector3<f64>; 3]| -> Option<Matrix3<f64>> {
        let e1 = (p[1] - p[0]).try_normalize(1e-15)?;
        let e3 = e1.cross(&(p[2] - p[0])).try_normalize(1e-15)?;
        let e2 = e3.cross(&e1);
        Some(Matrix3::from_columns(&[e1, e2, e3]))
    };
    let rot = frame(cam)? * frame(world)?.transpose();
    let rotation = UnitQuaternion::from_rotation_matrix(&Rotation3::from_matrix_unchecked(rot));
    let world_mean = (world[0] + world[1] + world[2]) / 3.0;
    let cam_mean = (cam[0] + cam[1] + cam[2]) / 3.0;
    Some(Pose::new(rotation, cam_mean - rotation * world_mean))
}
