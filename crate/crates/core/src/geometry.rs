//! Pinhole camera geometry: poses, intrinsics, projection and pose error
//! metrics.
//!
//! Conventions: a world point `x` maps into the camera frame as `R x + t`.
//! The camera looks along its +z axis with +x to the right and +y down in the
//! image. Scene units are centimetres.

use nalgebra::{Matrix3, Matrix3x4, Point2, Point3, Rotation3, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type ScenePoint = Point3<f64>;
pub type ImagePoint = Point2<f64>;

/// Tolerance below which a homogeneous scale is treated as zero.
pub const PROJECTION_EPS: f64 = 1e-12;

const ROTATION_TOL: f64 = 1e-9;

/// Rigid world-to-camera transform `[R | t]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Pose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl Pose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let ortho = (rotation * rotation.transpose() - Matrix3::identity()).amax();
        if ortho > ROTATION_TOL || (rotation.determinant() - 1.0).abs() > ROTATION_TOL {
            return Err(Error::InvalidPose(format!(
                "rotation is not orthonormal (max |RRᵀ - I| = {ortho:e}, det = {})",
                rotation.determinant()
            )));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite translation".into()));
        }
        Ok(Pose {
            rotation,
            translation,
        })
    }

    /// Builds a pose from any near-rotation matrix by projecting it onto
    /// SO(3) first.
    pub fn from_approx(rotation: &Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        Pose::new(nearest_rotation(rotation)?, translation)
    }

    pub fn identity() -> Self {
        Pose {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `center` looking along `forward`, with `up` defining the roll.
    pub fn look_along(center: &ScenePoint, forward: &Vector3<f64>, up: &Vector3<f64>) -> Result<Self> {
        let z = forward.normalize();
        let x = z.cross(up);
        if x.norm() < 1e-12 {
            return Err(Error::InvalidPose("forward is parallel to up".into()));
        }
        let x = x.normalize();
        let y = z.cross(&x);
        let rotation = Matrix3::from_rows(&[x.transpose(), y.transpose(), z.transpose()]);
        let rotation = nearest_rotation(&rotation)?;
        let translation = -(rotation * center.coords);
        Pose::new(rotation, translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera centre in world coordinates, `-Rᵀ t`.
    pub fn center(&self) -> ScenePoint {
        Point3::from(-(self.rotation.transpose() * self.translation))
    }

    pub fn to_camera(&self, x: &ScenePoint) -> Vector3<f64> {
        self.rotation * x.coords + self.translation
    }

    /// Left-multiplies a small rotation `exp(omega)` and adds `delta_t`.
    pub fn perturbed(&self, omega: &Vector3<f64>, delta_t: &Vector3<f64>) -> Result<Pose> {
        let dr = Rotation3::new(*omega).into_inner();
        Pose::from_approx(&(dr * self.rotation), dr * self.translation + delta_t)
    }
}

/// Projects a 3×3 matrix onto the closest rotation (Frobenius norm).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Result<Matrix3<f64>> {
    if !m.iter().all(|v| v.is_finite()) {
        return Err(Error::InvalidPose("non-finite rotation".into()));
    }
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Err(Error::InvalidPose("svd failed".into())),
    };
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u = u;
        u.column_mut(2).neg_mut();
        r = u * v_t;
    }
    Ok(r)
}

/// Pinhole intrinsics in pixels.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl Intrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Intrinsics {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(Error::InvalidIntrinsics("focal lengths must be positive".into()));
        }
        if !(self.cx >= 0.0 && self.cx < self.width as f64) {
            return Err(Error::InvalidIntrinsics("cx outside image".into()));
        }
        if !(self.cy >= 0.0 && self.cy < self.height as f64) {
            return Err(Error::InvalidIntrinsics("cy outside image".into()));
        }
        Ok(())
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn contains(&self, u: &ImagePoint) -> bool {
        u.x >= 0.0 && u.y >= 0.0 && u.x < self.width as f64 && u.y < self.height as f64
    }
}

/// Full projection `P = K [R | t]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProjectionMatrix(Matrix3x4<f64>);

impl ProjectionMatrix {
    pub fn new(p: Matrix3x4<f64>) -> Result<Self> {
        if !p.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidPose("non-finite projection matrix".into()));
        }
        let left = p.fixed_view::<3, 3>(0, 0).into_owned();
        let sv = left.singular_values();
        if sv.min() <= 1e-12 * sv.max().max(1.0) {
            return Err(Error::InvalidPose("projection matrix left block is singular".into()));
        }
        Ok(ProjectionMatrix(p))
    }

    pub fn from_camera(k: &Intrinsics, pose: &Pose) -> Self {
        let mut rt = Matrix3x4::zeros();
        rt.fixed_view_mut::<3, 3>(0, 0).copy_from(pose.rotation());
        rt.set_column(3, pose.translation());
        ProjectionMatrix(k.matrix() * rt)
    }

    /// Row-major list of the twelve entries.
    pub fn from_row_major(values: &[f64]) -> Result<Self> {
        if values.len() != 12 {
            return Err(Error::InvalidPose(format!("expected 12 numbers, got {}", values.len())));
        }
        ProjectionMatrix::new(Matrix3x4::from_row_slice(values))
    }

    pub fn to_row_major(&self) -> [f64; 12] {
        let mut out = [0.0; 12];
        for r in 0..3 {
            for c in 0..4 {
                out[r * 4 + c] = self.0[(r, c)];
            }
        }
        out
    }

    pub fn matrix(&self) -> &Matrix3x4<f64> {
        &self.0
    }

    pub fn homogeneous(&self, x: &ScenePoint) -> Vector3<f64> {
        self.0 * x.to_homogeneous()
    }
}

/// Splits `P` into an upper-triangular calibration (positive diagonal,
/// unit `K[2,2]`) and a pose, so that `P ∝ K [R | t]`.
pub fn decompose_projection(p: &ProjectionMatrix) -> Result<(Matrix3<f64>, Pose)> {
    let mut m = p.matrix().fixed_view::<3, 3>(0, 0).into_owned();
    let mut p4 = p.matrix().column(3).into_owned();
    if m.determinant() < 0.0 {
        m = -m;
        p4 = -p4;
    }
    // RQ through QR of the row-reversed transpose
    let flip = Matrix3::new(0.0, 0.0, 1.0, 0.0, 1.0, 0.0, 1.0, 0.0, 0.0);
    let qr = (flip * m).transpose().qr();
    let mut k = flip * qr.r().transpose() * flip;
    let mut r = flip * qr.q().transpose();
    for i in 0..3 {
        if k[(i, i)] < 0.0 {
            let s = Matrix3::from_diagonal(&Vector3::from_fn(|j, _| if j == i { -1.0 } else { 1.0 }));
            k *= s;
            r = s * r;
        }
    }
    let scale = k[(2, 2)];
    if scale.abs() <= PROJECTION_EPS {
        return Err(Error::DegenerateProjection(scale));
    }
    let k_inv = k.try_inverse().ok_or_else(|| Error::InvalidIntrinsics("singular calibration".into()))?;
    let t = k_inv * p4;
    Ok((k / scale, Pose::from_approx(&r, t)?))
}

/// `[x, y, λ] -> [x/λ, y/λ]`.
pub fn perspective_divide(h: &Vector3<f64>) -> Result<ImagePoint> {
    if h.z.abs() <= PROJECTION_EPS || !h.z.is_finite() {
        return Err(Error::DegenerateProjection(h.z));
    }
    Ok(ImagePoint::new(h.x / h.z, h.y / h.z))
}

pub fn project(p: &ProjectionMatrix, x: &ScenePoint) -> Result<ImagePoint> {
    perspective_divide(&p.homogeneous(x))
}

pub fn reprojection_error(p: &ProjectionMatrix, x: &ScenePoint, u: &ImagePoint) -> Result<f64> {
    Ok((project(p, x)? - u).norm())
}

/// Distance between camera centres, in scene units (cm).
pub fn position_error(est: &Pose, gt: &Pose) -> f64 {
    (est.center() - gt.center()).norm()
}

/// Geodesic angle of `R_est R_gtᵀ`, in degrees.
pub fn orientation_error(est: &Pose, gt: &Pose) -> f64 {
    let rel = est.rotation() * gt.rotation().transpose();
    let cos = ((rel.trace() - 1.0) / 2.0).clamp(-1.0, 1.0);
    // atan2 form of arccos(cos); keeps precision near 0 and 180 degrees
    let skew = Vector3::new(
        rel[(2, 1)] - rel[(1, 2)],
        rel[(0, 2)] - rel[(2, 0)],
        rel[(1, 0)] - rel[(0, 1)],
    );
    let sin = (skew.norm() / 2.0).clamp(0.0, 1.0);
    sin.atan2(cos).to_degrees()
}
