//! Canonical Gaussian representation, pinhole cameras and the projection of
//! 3D Gaussians to screen-space footprints.
//!
//! Raw parameters are unconstrained: scales live in the log domain, opacity
//! and color are logits. The covariance is always derived from the rotation
//! and scale, never stored.

use nalgebra::{Matrix2x3, Matrix3, Vector3};

use crate::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

#[inline]
pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

/// Quaternion `(w, x, y, z)` scaled to unit norm.
pub fn normalize_quat(q: [f64; 4]) -> Result<[f64; 4]> {
    let n = quat_norm(q);
    if !(n > 0.0) || !n.is_finite() {
        return Err(Error::DegenerateRotation);
    }
    Ok([q[0] / n, q[1] / n, q[2] / n, q[3] / n])
}

#[inline]
pub(crate) fn quat_norm(q: [f64; 4]) -> f64 {
    (q[0] * q[0] + q[1] * q[1] + q[2] * q[2] + q[3] * q[3]).sqrt()
}

/// Backpropagates `grad` on a normalized quaternion to the raw quaternion.
pub(crate) fn normalize_quat_vjp(q: [f64; 4], grad: [f64; 4]) -> [f64; 4] {
    let n = quat_norm(q);
    let u = [q[0] / n, q[1] / n, q[2] / n, q[3] / n];
    let dot = u[0] * grad[0] + u[1] * grad[1] + u[2] * grad[2] + u[3] * grad[3];
    [
        (grad[0] - u[0] * dot) / n,
        (grad[1] - u[1] * dot) / n,
        (grad[2] - u[2] * dot) / n,
        (grad[3] - u[3] * dot) / n,
    ]
}

/// Rotation matrix of a unit quaternion `(w, x, y, z)`.
pub fn rotation_from_unit_quat(q: [f64; 4]) -> Mat3 {
    let [w, x, y, z] = q;
    Mat3::new(
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    )
}

/// Gradient of a scalar with respect to the unit quaternion, given its
/// gradient `g` with respect to the rotation matrix entries.
fn rotation_from_unit_quat_vjp(q: [f64; 4], g: &Mat3) -> [f64; 4] {
    let [w, x, y, z] = q;
    let g = |r: usize, c: usize| g[(r, c)];
    [
        2.0 * (-z * g(0, 1) + y * g(0, 2) + z * g(1, 0) - x * g(1, 2) - y * g(2, 0) + x * g(2, 1)),
        2.0 * (y * g(0, 1) + z * g(0, 2) + y * g(1, 0) - 2.0 * x * g(1, 1) - w * g(1, 2)
            + z * g(2, 0)
            + w * g(2, 1)
            - 2.0 * x * g(2, 2)),
        2.0 * (-2.0 * y * g(0, 0) + x * g(0, 1) + w * g(0, 2) + x * g(1, 0) + z * g(1, 2)
            - w * g(2, 0)
            + z * g(2, 1)
            - 2.0 * y * g(2, 2)),
        2.0 * (-2.0 * z * g(0, 0) - w * g(0, 1) + x * g(0, 2) + w * g(1, 0) - 2.0 * z * g(1, 1)
            + y * g(1, 2)
            + x * g(2, 0)
            + y * g(2, 1)),
    ]
}

/// `Sigma = R diag(exp(s))^2 R^T` for rotation `r` (normalized internally)
/// and log-scales `s`.
pub fn covariance_from_params(r: [f64; 4], log_scale: [f64; 3]) -> Result<Mat3> {
    let q = normalize_quat(r)?;
    Ok(covariance_from_unit(q, log_scale))
}

fn covariance_from_unit(q: [f64; 4], log_scale: [f64; 3]) -> Mat3 {
    let rot = rotation_from_unit_quat(q);
    let m = rot * Mat3::from_diagonal(&Vec3::new(log_scale[0].exp(), log_scale[1].exp(), log_scale[2].exp()));
    m * m.transpose()
}

/// A single Gaussian in raw (optimizer) parameterization.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Gaussian {
    pub mean: [f64; 3],
    /// Quaternion `(w, x, y, z)`; normalized on use.
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub color_logit: [f64; 3],
}

impl Gaussian {
    pub fn opacity(&self) -> f64 {
        sigmoid(self.opacity_logit)
    }

    pub fn color(&self) -> [f64; 3] {
        self.color_logit.map(sigmoid)
    }

    pub fn scale(&self) -> [f64; 3] {
        self.log_scale.map(f64::exp)
    }

    pub fn covariance(&self) -> Result<Mat3> {
        covariance_from_params(self.rotation, self.log_scale)
    }
}

/// Structure-of-arrays storage for a set of Gaussians.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct GaussianSet {
    pub means: Vec<[f64; 3]>,
    pub rotations: Vec<[f64; 4]>,
    pub log_scales: Vec<[f64; 3]>,
    pub opacity_logits: Vec<f64>,
    pub color_logits: Vec<[f64; 3]>,
}

impl GaussianSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(n: usize) -> Self {
        Self {
            means: Vec::with_capacity(n),
            rotations: Vec::with_capacity(n),
            log_scales: Vec::with_capacity(n),
            opacity_logits: Vec::with_capacity(n),
            color_logits: Vec::with_capacity(n),
        }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.means.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.means.is_empty()
    }

    pub fn push(&mut self, g: Gaussian) {
        self.means.push(g.mean);
        self.rotations.push(g.rotation);
        self.log_scales.push(g.log_scale);
        self.opacity_logits.push(g.opacity_logit);
        self.color_logits.push(g.color_logit);
    }

    pub fn get(&self, i: usize) -> Gaussian {
        Gaussian {
            mean: self.means[i],
            rotation: self.rotations[i],
            log_scale: self.log_scales[i],
            opacity_logit: self.opacity_logits[i],
            color_logit: self.color_logits[i],
        }
    }

    pub fn set(&mut self, i: usize, g: Gaussian) {
        self.means[i] = g.mean;
        self.rotations[i] = g.rotation;
        self.log_scales[i] = g.log_scale;
        self.opacity_logits[i] = g.opacity_logit;
        self.color_logits[i] = g.color_logit;
    }

    pub fn iter(&self) -> impl Iterator<Item = Gaussian> + '_ {
        (0..self.len()).map(|i| self.get(i))
    }

    /// Keeps the Gaussians listed in `indices`, in that order.
    pub fn select(&self, indices: &[usize]) -> Self {
        let mut out = Self::with_capacity(indices.len());
        for &i in indices {
            out.push(self.get(i));
        }
        out
    }

    /// Fails with the first non-finite parameter or zero-norm rotation.
    pub fn check_finite(&self) -> Result<()> {
        for i in 0..self.len() {
            let g = self.get(i);
            let field = if !g.mean.iter().all(|v| v.is_finite()) {
                Some("mean")
            } else if !g.rotation.iter().all(|v| v.is_finite()) || quat_norm(g.rotation) == 0.0 {
                Some("rotation")
            } else if !g.log_scale.iter().all(|v| v.is_finite()) {
                Some("log_scale")
            } else if !g.opacity_logit.is_finite() {
                Some("opacity")
            } else if !g.color_logit.iter().all(|v| v.is_finite()) {
                Some("color")
            } else {
                None
            };
            if let Some(field) = field {
                return Err(Error::NonFinite { index: i, field });
            }
        }
        Ok(())
    }
}

impl FromIterator<Gaussian> for GaussianSet {
    fn from_iter<I: IntoIterator<Item = Gaussian>>(iter: I) -> Self {
        let mut set = GaussianSet::new();
        for g in iter {
            set.push(g);
        }
        set
    }
}

/// Pinhole camera without distortion. World to camera is `x_c = R x_w + t`,
/// with the camera looking down `+z`, `x` right and `y` down. Pixel centres
/// sit at integer coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub rotation: Mat3,
    pub translation: Vec3,
    pub near: f64,
    pub far: f64,
    pub timestamp: f64,
}

/// Pinhole intrinsics plus clip range shared by all frames of one sensor.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Intrinsics {
    pub width: usize,
    pub height: usize,
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub near: f64,
    pub far: f64,
}

impl Intrinsics {
    pub fn camera(&self, rotation: Mat3, translation: Vec3, timestamp: f64) -> Result<Camera> {
        Camera::new(*self, rotation, translation, timestamp)
    }
}

impl Camera {
    pub fn new(intr: Intrinsics, rotation: Mat3, translation: Vec3, timestamp: f64) -> Result<Self> {
        let cam = Camera {
            fx: intr.fx,
            fy: intr.fy,
            cx: intr.cx,
            cy: intr.cy,
            width: intr.width,
            height: intr.height,
            rotation,
            translation,
            near: intr.near,
            far: intr.far,
            timestamp,
        };
        cam.validate()?;
        Ok(cam)
    }

    /// Camera at `eye` looking at `target`; `up` is the world up direction.
    pub fn look_at(intr: Intrinsics, eye: Vec3, target: Vec3, up: Vec3, timestamp: f64) -> Result<Self> {
        let forward = (target - eye).normalize();
        let right = forward.cross(&up);
        if right.norm() < 1e-12 {
            return Err(Error::Config("look_at: up is parallel to the view direction".into()));
        }
        let right = right.normalize();
        let down = forward.cross(&right);
        let rotation = Mat3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Camera::new(intr, rotation, translation, timestamp)
    }

    pub fn intrinsics(&self) -> Intrinsics {
        Intrinsics {
            width: self.width,
            height: self.height,
            fx: self.fx,
            fy: self.fy,
            cx: self.cx,
            cy: self.cy,
            near: self.near,
            far: self.far,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let orth = self.rotation * self.rotation.transpose() - Mat3::identity();
        if orth.amax() > 1e-6 || (self.rotation.determinant() - 1.0).abs() > 1e-6 {
            return Err(Error::Config("camera rotation is not orthonormal".into()));
        }
        if !(self.near > 0.0 && self.near < self.far) {
            return Err(Error::Config(format!(
                "camera clip range must satisfy 0 < near < far (near={}, far={})",
                self.near, self.far
            )));
        }
        if !(self.fx > 0.0 && self.fy > 0.0) || self.width == 0 || self.height == 0 {
            return Err(Error::Config("camera intrinsics must be positive".into()));
        }
        Ok(())
    }

    #[inline]
    pub fn world_to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    /// Camera centre in world coordinates.
    pub fn center(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    /// Same pose and intrinsics at another timestamp.
    pub fn at_time(&self, timestamp: f64) -> Camera {
        Camera {
            timestamp,
            ..self.clone()
        }
    }
}

/// Unique entries of a symmetric 2x2 matrix `[[xx, xy], [xy, yy]]`. When used
/// as a gradient, each field is the partial derivative with respect to that
/// unique entry (so `xy` accounts for both off-diagonal positions).
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Sym2 {
    pub xx: f64,
    pub xy: f64,
    pub yy: f64,
}

impl Sym2 {
    pub fn det(&self) -> f64 {
        self.xx * self.yy - self.xy * self.xy
    }

    pub fn inverse(&self) -> Option<Sym2> {
        let det = self.det();
        if !(det > 0.0) {
            return None;
        }
        Some(Sym2 {
            xx: self.yy / det,
            xy: -self.xy / det,
            yy: self.xx / det,
        })
    }

    pub fn max_eigenvalue(&self) -> f64 {
        let mid = 0.5 * (self.xx + self.yy);
        let disc = (mid * mid - self.det()).max(0.0).sqrt();
        mid + disc
    }
}

/// Screen-space footprint of one Gaussian.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projected2D {
    /// Pixel coordinates of the projected mean.
    pub mean2: [f64; 2],
    /// Projected covariance in pixels^2, before screen-space regularization.
    pub cov2: Sym2,
    pub z_cam: f64,
    pub valid: bool,
}

/// Upstream gradient on the outputs of [`project_gaussian`].
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct ProjectedGrad {
    pub mean2: [f64; 2],
    pub cov2: Sym2,
    pub z_cam: f64,
}

/// Gradient on the raw parameters of one Gaussian.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct GaussianGrad {
    pub mean: [f64; 3],
    pub rotation: [f64; 4],
    pub log_scale: [f64; 3],
    pub opacity_logit: f64,
    pub color_logit: [f64; 3],
}

impl GaussianGrad {
    pub fn add_assign(&mut self, o: &GaussianGrad) {
        for k in 0..3 {
            self.mean[k] += o.mean[k];
            self.log_scale[k] += o.log_scale[k];
            self.color_logit[k] += o.color_logit[k];
        }
        for k in 0..4 {
            self.rotation[k] += o.rotation[k];
        }
        self.opacity_logit += o.opacity_logit;
    }
}

fn projection_jacobian(cam: &Camera, p: &Vec3) -> Matrix2x3<f64> {
    let inv_z = 1.0 / p.z;
    let inv_z2 = inv_z * inv_z;
    Matrix2x3::new(
        cam.fx * inv_z,
        0.0,
        -cam.fx * p.x * inv_z2,
        0.0,
        cam.fy * inv_z,
        -cam.fy * p.y * inv_z2,
    )
}

/// Projects a Gaussian: the mean through the full pinhole model, the
/// covariance through the local affine approximation `J W Sigma W^T J^T`.
/// Gaussians outside `(near, far)` or with a degenerate rotation are flagged
/// invalid rather than reported as errors.
pub fn project_gaussian(g: &Gaussian, cam: &Camera) -> Projected2D {
    let p = cam.world_to_camera(&Vec3::from(g.mean));
    let invalid = Projected2D {
        mean2: [0.0; 2],
        cov2: Sym2::default(),
        z_cam: p.z,
        valid: false,
    };
    if !(p.z > cam.near && p.z < cam.far) {
        return invalid;
    }
    let Ok(q) = normalize_quat(g.rotation) else {
        return invalid;
    };
    let sigma = covariance_from_unit(q, g.log_scale);
    let j = projection_jacobian(cam, &p);
    let t = j * cam.rotation;
    let cov = t * sigma * t.transpose();
    Projected2D {
        mean2: [cam.fx * p.x / p.z + cam.cx, cam.fy * p.y / p.z + cam.cy],
        cov2: Sym2 {
            xx: cov[(0, 0)],
            xy: 0.5 * (cov[(0, 1)] + cov[(1, 0)]),
            yy: cov[(1, 1)],
        },
        z_cam: p.z,
        valid: true,
    }
}

/// Analytic vector-Jacobian product of [`project_gaussian`]. Only the mean,
/// rotation and log-scale fields of the result are populated.
pub fn project_gaussian_vjp(g: &Gaussian, cam: &Camera, up: &ProjectedGrad) -> GaussianGrad {
    let mut out = GaussianGrad::default();
    let p = cam.world_to_camera(&Vec3::from(g.mean));
    let Ok(q) = normalize_quat(g.rotation) else {
        return out;
    };
    let (fx, fy) = (cam.fx, cam.fy);
    let inv_z = 1.0 / p.z;
    let inv_z2 = inv_z * inv_z;
    let inv_z3 = inv_z2 * inv_z;

    let rot = rotation_from_unit_quat(q);
    let scale = Vec3::new(g.log_scale[0].exp(), g.log_scale[1].exp(), g.log_scale[2].exp());
    let m = rot * Mat3::from_diagonal(&scale);
    let sigma = m * m.transpose();
    let w = cam.rotation;
    let sigma_cam = w * sigma * w.transpose();
    let j = projection_jacobian(cam, &p);

    // dL/dcov2 as a full symmetric matrix
    let g2 = nalgebra::Matrix2::new(up.cov2.xx, 0.5 * up.cov2.xy, 0.5 * up.cov2.xy, up.cov2.yy);
    let d_sigma_cam = j.transpose() * g2 * j;
    let d_j = 2.0 * g2 * j * sigma_cam;

    let mut d_p = Vec3::zeros();
    d_p.x += d_j[(0, 2)] * (-fx * inv_z2);
    d_p.y += d_j[(1, 2)] * (-fy * inv_z2);
    d_p.z += d_j[(0, 0)] * (-fx * inv_z2)
        + d_j[(0, 2)] * (2.0 * fx * p.x * inv_z3)
        + d_j[(1, 1)] * (-fy * inv_z2)
        + d_j[(1, 2)] * (2.0 * fy * p.y * inv_z3);

    let [du, dv] = up.mean2;
    d_p.x += du * fx * inv_z;
    d_p.y += dv * fy * inv_z;
    d_p.z += -du * fx * p.x * inv_z2 - dv * fy * p.y * inv_z2;
    d_p.z += up.z_cam;

    let d_mean = w.transpose() * d_p;
    out.mean = [d_mean.x, d_mean.y, d_mean.z];

    let d_sigma = w.transpose() * d_sigma_cam * w;
    let d_m = (d_sigma + d_sigma.transpose()) * m;
    let mut d_rot = Mat3::zeros();
    for r in 0..3 {
        for c in 0..3 {
            d_rot[(r, c)] = d_m[(r, c)] * scale[c];
        }
    }
    for c in 0..3 {
        let d_sc: f64 = (0..3).map(|r| rot[(r, c)] * d_m[(r, c)]).sum();
        out.log_scale[c] = d_sc * scale[c];
    }
    let d_unit = rotation_from_unit_quat_vjp(q, &d_rot);
    out.rotation = normalize_quat_vjp(g.rotation, d_unit);
    out
}
