use nalgebra::Matrix3;
use serde::{Deserialize, Serialize};

use super::{SceneError, Vec3};

/// Pinhole intrinsics plus clipping range.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Intrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
    pub near: f64,
    pub far: f64,
}

impl Intrinsics {
    /// Square image with the given horizontal field of view in degrees.
    pub fn square(size: usize, fov_deg: f64, near: f64, far: f64) -> Self {
        let f = 0.5 * size as f64 / (0.5 * fov_deg.to_radians()).tan();
        Intrinsics {
            fx: f,
            fy: f,
            cx: 0.5 * size as f64,
            cy: 0.5 * size as f64,
            width: size,
            height: size,
            near,
            far,
        }
    }
}

/// World-to-camera rigid transform and intrinsics. Camera space is
/// right-handed with +x right, +y down and +z forward.
#[derive(Clone, Debug, PartialEq)]
pub struct Camera {
    pub rotation: Matrix3<f64>,
    pub translation: Vec3,
    pub intrinsics: Intrinsics,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    pub x: f64,
    pub y: f64,
    pub depth: f64,
    /// False when the point lies on or behind the camera plane.
    pub in_front: bool,
}

impl Camera {
    pub fn new(rotation: Matrix3<f64>, translation: Vec3, intrinsics: Intrinsics) -> Result<Self, SceneError> {
        let cam = Camera {
            rotation,
            translation,
            intrinsics,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        let r = &self.rotation;
        let off = (r.transpose() * r - Matrix3::identity()).amax();
        if off >= 1e-6 || (r.determinant() - 1.0).abs() > 1e-6 {
            return Err(SceneError::InvalidCamera(format!(
                "rotation is not a proper rotation (orthogonality error {off:e})"
            )));
        }
        let k = &self.intrinsics;
        if !(0.0 < k.near && k.near < k.far) {
            return Err(SceneError::InvalidCamera(format!("near {} / far {}", k.near, k.far)));
        }
        if k.width == 0 || k.height == 0 || !(k.fx > 0.0 && k.fy > 0.0) {
            return Err(SceneError::InvalidCamera("degenerate intrinsics".into()));
        }
        if !self.translation.iter().all(|v| v.is_finite()) {
            return Err(SceneError::InvalidCamera("non-finite translation".into()));
        }
        Ok(())
    }

    /// Camera at `eye` looking at `target`, image "up" as close to world +y as possible.
    pub fn look_at(eye: Vec3, target: Vec3, intrinsics: Intrinsics) -> Result<Self, SceneError> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| SceneError::InvalidCamera("eye coincides with target".into()))?;
        let world_up = if forward.y.abs() > 0.999 {
            Vec3::new(0.0, 0.0, -forward.y.signum())
        } else {
            Vec3::new(0.0, 1.0, 0.0)
        };
        let right = forward.cross(&world_up).normalize();
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Camera::new(rotation, translation, intrinsics)
    }

    /// Camera centre in world space.
    pub fn eye(&self) -> Vec3 {
        -(self.rotation.transpose() * self.translation)
    }

    pub fn to_camera(&self, p: &Vec3) -> Vec3 {
        self.rotation * p + self.translation
    }

    pub fn to_world(&self, p: &Vec3) -> Vec3 {
        self.rotation.transpose() * (p - self.translation)
    }

    pub fn project(&self, p: &Vec3) -> Projection {
        let c = self.to_camera(p);
        let k = &self.intrinsics;
        let in_front = c.z > 0.0;
        let (x, y) = if in_front {
            (k.fx * c.x / c.z + k.cx, k.fy * c.y / c.z + k.cy)
        } else {
            (f64::NAN, f64::NAN)
        };
        Projection {
            x,
            y,
            depth: c.z,
            in_front,
        }
    }

    /// Inverse of [`Camera::project`] for points in front of the camera.
    pub fn unproject(&self, x: f64, y: f64, depth: f64) -> Vec3 {
        let k = &self.intrinsics;
        let c = Vec3::new((x - k.cx) / k.fx * depth, (y - k.cy) / k.fy * depth, depth);
        self.to_world(&c)
    }

    /// Unit world-space direction of the ray through pixel position `(x, y)`.
    pub fn ray_direction(&self, x: f64, y: f64) -> Vec3 {
        let k = &self.intrinsics;
        let c = Vec3::new((x - k.cx) / k.fx, (y - k.cy) / k.fy, 1.0);
        (self.rotation.transpose() * c).normalize()
    }

    /// 4x4 world-to-camera matrix, row-major.
    pub fn world_to_camera(&self) -> [[f64; 4]; 4] {
        let r = &self.rotation;
        let t = &self.translation;
        [
            [r[(0, 0)], r[(0, 1)], r[(0, 2)], t.x],
            [r[(1, 0)], r[(1, 1)], r[(1, 2)], t.y],
            [r[(2, 0)], r[(2, 1)], r[(2, 2)], t.z],
            [0.0, 0.0, 0.0, 1.0],
        ]
    }

    pub fn from_world_to_camera(m: &[[f64; 4]; 4], intrinsics: Intrinsics) -> Result<Self, SceneError> {
        let rotation = Matrix3::from_fn(|i, j| m[i][j]);
        let translation = Vec3::new(m[0][3], m[1][3], m[2][3]);
        Camera::new(rotation, translation, intrinsics)
    }
}

/// The candidate pool the selector chooses from.
#[derive(Clone, Debug)]
pub struct ViewSet {
    cameras: Vec<Camera>,
    labels: Vec<String>,
}

impl ViewSet {
    pub fn new(cameras: Vec<Camera>, labels: Vec<String>) -> Result<Self, SceneError> {
        if cameras.len() < 2 || cameras.len() != labels.len() {
            return Err(SceneError::InvalidViewSet(format!(
                "{} cameras with {} labels",
                cameras.len(),
                labels.len()
            )));
        }
        let mut sorted = labels.clone();
        sorted.sort();
        sorted.dedup();
        if sorted.len() != labels.len() {
            return Err(SceneError::InvalidViewSet("duplicate view labels".into()));
        }
        Ok(ViewSet { cameras, labels })
    }

    pub fn len(&self) -> usize {
        self.cameras.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cameras.is_empty()
    }

    pub fn cameras(&self) -> &[Camera] {
        &self.cameras
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn camera(&self, i: usize) -> &Camera {
        &self.cameras[i]
    }

    pub fn eyes(&self) -> Vec<Vec3> {
        self.cameras.iter().map(Camera::eye).collect()
    }
}

/// `n` azimuths per elevation ring, all looking at `target` from distance `radius`.
pub fn camera_ring(
    n: usize,
    radius: f64,
    elevations_deg: &[f64],
    target: Vec3,
    intrinsics: Intrinsics,
) -> Result<ViewSet, SceneError> {
    if n < 2 || !(radius > 0.0) || elevations_deg.is_empty() {
        return Err(SceneError::InvalidParams(format!(
            "camera_ring needs n >= 2 and radius > 0 (n={n}, radius={radius})"
        )));
    }
    let mut cameras = Vec::with_capacity(n * elevations_deg.len());
    let mut labels = Vec::with_capacity(cameras.capacity());
    for (ring, &el) in elevations_deg.iter().enumerate() {
        let el = el.to_radians();
        for i in 0..n {
            let az = std::f64::consts::TAU * i as f64 / n as f64;
            let dir = Vec3::new(el.cos() * az.sin(), el.sin(), el.cos() * az.cos());
            cameras.push(Camera::look_at(target + dir * radius, target, intrinsics)?);
            labels.push(format!("r{ring}_a{i:03}"));
        }
    }
    ViewSet::new(cameras, labels)
}
