//! Pinhole cameras and fixed rigs.
//!
//! Camera frame follows the OpenCV convention: x right, y down, z forward.
//! The world is Y-up; azimuth 0 places the camera on the +z axis and
//! positive elevation raises it above the XZ plane.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;

pub type Vec3 = [f64; 3];

pub fn dot(a: Vec3, b: Vec3) -> f64 {
    a[0] * b[0] + a[1] * b[1] + a[2] * b[2]
}

pub fn cross(a: Vec3, b: Vec3) -> Vec3 {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

pub fn sub(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn add(a: Vec3, b: Vec3) -> Vec3 {
    [a[0] + b[0], a[1] + b[1], a[2] + b[2]]
}

pub fn scale(a: Vec3, s: f64) -> Vec3 {
    [a[0] * s, a[1] * s, a[2] * s]
}

pub fn norm(a: Vec3) -> f64 {
    dot(a, a).sqrt()
}

pub fn normalize(a: Vec3) -> Vec3 {
    scale(a, 1.0 / norm(a))
}

/// Rotation matrix (row-major) of a unit quaternion `[w, x, y, z]`.
pub fn quat_to_matrix(q: [f64; 4]) -> [f64; 9] {
    let [w, x, y, z] = q;
    [
        1.0 - 2.0 * (y * y + z * z),
        2.0 * (x * y - w * z),
        2.0 * (x * z + w * y),
        2.0 * (x * y + w * z),
        1.0 - 2.0 * (x * x + z * z),
        2.0 * (y * z - w * x),
        2.0 * (x * z - w * y),
        2.0 * (y * z + w * x),
        1.0 - 2.0 * (x * x + y * y),
    ]
}

pub fn mat_vec(m: &[f64; 9], v: Vec3) -> Vec3 {
    [
        m[0] * v[0] + m[1] * v[1] + m[2] * v[2],
        m[3] * v[0] + m[4] * v[1] + m[5] * v[2],
        m[6] * v[0] + m[7] * v[1] + m[8] * v[2],
    ]
}

pub fn mat_t_vec(m: &[f64; 9], v: Vec3) -> Vec3 {
    [
        m[0] * v[0] + m[3] * v[1] + m[6] * v[2],
        m[1] * v[0] + m[4] * v[1] + m[7] * v[2],
        m[2] * v[0] + m[5] * v[1] + m[8] * v[2],
    ]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraPose {
    /// World-to-camera rotation, row-major.
    pub rotation: [f64; 9],
    /// Camera center in world units.
    pub position: Vec3,
    pub fov_y: f64,
    /// `(height, width)` in pixels.
    pub resolution: (usize, usize),
}

impl CameraPose {
    /// Camera at `eye` looking at `target` with world +Y as up.
    pub fn look_at(eye: Vec3, target: Vec3, fov_y: f64, resolution: (usize, usize)) -> Result<Self> {
        if !(fov_y > 0.0 && fov_y < std::f64::consts::PI) {
            return Err(Error::Param(format!("fov_y must lie in (0, pi), got {fov_y}")));
        }
        if resolution.0 == 0 || resolution.1 == 0 {
            return Err(Error::Param("camera resolution must be nonzero".into()));
        }
        let f = normalize(sub(target, eye));
        let mut right = cross(f, [0.0, 1.0, 0.0]);
        if norm(right) < 1e-9 {
            right = [1.0, 0.0, 0.0];
        }
        let right = normalize(right);
        let down = cross(f, right);
        let rotation = [right[0], right[1], right[2], down[0], down[1], down[2], f[0], f[1], f[2]];
        Ok(CameraPose { rotation, position: eye, fov_y, resolution })
    }

    /// Camera on a sphere around the origin. Angles in degrees.
    pub fn orbit(azimuth_deg: f64, elevation_deg: f64, radius: f64, fov_y: f64, resolution: (usize, usize)) -> Result<Self> {
        let (az, el) = (azimuth_deg.to_radians(), elevation_deg.to_radians());
        let eye = [radius * el.cos() * az.sin(), radius * el.sin(), radius * el.cos() * az.cos()];
        Self::look_at(eye, [0.0; 3], fov_y, resolution)
    }

    pub fn height(&self) -> usize {
        self.resolution.0
    }

    pub fn width(&self) -> usize {
        self.resolution.1
    }

    /// Focal length in pixels (square pixels).
    pub fn focal(&self) -> f64 {
        0.5 * self.resolution.0 as f64 / (0.5 * self.fov_y).tan()
    }

    pub fn principal(&self) -> (f64, f64) {
        (0.5 * self.resolution.1 as f64, 0.5 * self.resolution.0 as f64)
    }

    pub fn row(&self, i: usize) -> Vec3 {
        [self.rotation[3 * i], self.rotation[3 * i + 1], self.rotation[3 * i + 2]]
    }

    pub fn forward(&self) -> Vec3 {
        self.row(2)
    }

    pub fn world_to_camera(&self, p: Vec3) -> Vec3 {
        mat_vec(&self.rotation, sub(p, self.position))
    }

    pub fn camera_to_world_dir(&self, d: Vec3) -> Vec3 {
        mat_t_vec(&self.rotation, d)
    }

    /// Pixel coordinates of a world point, or `None` behind the near plane.
    pub fn project(&self, p: Vec3) -> Option<(f64, f64, f64)> {
        let c = self.world_to_camera(p);
        if c[2] <= 0.01 {
            return None;
        }
        let f = self.focal();
        let (cx, cy) = self.principal();
        Some((f * c[0] / c[2] + cx, f * c[1] / c[2] + cy, c[2]))
    }

    /// Unit world-space direction through the center of pixel `(x, y)`.
    pub fn ray_dir(&self, x: usize, y: usize) -> Vec3 {
        let f = self.focal();
        let (cx, cy) = self.principal();
        let d = [(x as f64 + 0.5 - cx) / f, (y as f64 + 0.5 - cy) / f, 1.0];
        normalize(self.camera_to_world_dir(d))
    }

    /// Distance from the camera center to the world origin.
    pub fn distance_to_origin(&self) -> f64 {
        norm(self.position)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraRig {
    pub name: String,
    pub poses: Vec<CameraPose>,
}

impl CameraRig {
    pub fn len(&self) -> usize {
        self.poses.len()
    }

    pub fn is_empty(&self) -> bool {
        self.poses.is_empty()
    }

    pub fn resolution(&self) -> (usize, usize) {
        self.poses[0].resolution
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct RigParams {
    pub radius: f64,
    pub fov_y_deg: f64,
    pub resolution: usize,
}

impl Default for RigParams {
    fn default() -> Self {
        RigParams { radius: 2.5, fov_y_deg: 50.0, resolution: 64 }
    }
}

impl RigParams {
    pub fn pose(&self, azimuth_deg: f64, elevation_deg: f64) -> Result<CameraPose> {
        let r = (self.resolution, self.resolution);
        CameraPose::orbit(azimuth_deg, elevation_deg, self.radius, self.fov_y_deg.to_radians(), r)
    }

    /// Zero-elevation view at azimuth 0, used as the condition image.
    pub fn condition_pose(&self) -> Result<CameraPose> {
        self.pose(0.0, 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RigKind {
    Sixview,
    Ring,
}

pub const SIXVIEW_AZIMUTHS: [f64; 6] = [30.0, 90.0, 150.0, 210.0, 270.0, 330.0];
pub const SIXVIEW_ELEVATIONS: [f64; 2] = [20.0, -10.0];

/// `sixview` ignores `count`; `ring` places `count` views at zero elevation.
pub fn make_rig(kind: RigKind, count: usize, params: &RigParams) -> Result<CameraRig> {
    match kind {
        RigKind::Sixview => {
            let poses = SIXVIEW_AZIMUTHS
                .iter()
                .enumerate()
                .map(|(i, &az)| params.pose(az, SIXVIEW_ELEVATIONS[i % 2]))
                .collect::<Result<_>>()?;
            Ok(CameraRig { name: "sixview".into(), poses })
        }
        RigKind::Ring => {
            if count < 2 {
                return Err(Error::Param(format!("ring rig needs at least 2 views, got {count}")));
            }
            let poses = (0..count)
                .map(|i| params.pose(360.0 * i as f64 / count as f64, 0.0))
                .collect::<Result<_>>()?;
            Ok(CameraRig { name: format!("ring{count}"), poses })
        }
    }
}

/// Orbit pose with uniform azimuth and uniform elevation / radius in the given ranges (degrees).
pub fn sample_random_pose(
    seed: u64,
    radius_range: (f64, f64),
    elevation_range: (f64, f64),
    fov_y: f64,
    resolution: (usize, usize),
) -> Result<CameraPose> {
    if radius_range.0 > radius_range.1 || elevation_range.0 > elevation_range.1 || radius_range.0 <= 0.0 {
        return Err(Error::Param("empty or invalid pose range".into()));
    }
    let mut r = rng::seeded(seed);
    let az = rng::uniform(&mut r, 0.0, 360.0);
    let el = rng::uniform(&mut r, elevation_range.0, elevation_range.1);
    let radius = rng::uniform(&mut r, radius_range.0, radius_range.1);
    CameraPose::orbit(az, el, radius, fov_y, resolution)
}

/// Recovers `(azimuth, elevation)` in degrees of a pose's camera center.
pub fn orbit_angles(pose: &CameraPose) -> (f64, f64) {
    let p = pose.position;
    let az = p[0].atan2(p[2]).to_degrees().rem_euclid(360.0);
    let el = (p[1] / norm(p)).asin().to_degrees();
    (az, el)
}
