//! Coordinate frames and camera geometry.
//!
//! Three frames are involved:
//!
//! * WGS84 geodetic coordinates of the drone, as recorded per video frame.
//! * A local Cartesian frame anchored on the ground below the drone's first
//!   recorded latitude/longitude, with x pointing East, y North and z down.
//!   The axis sentences are followed literally even though the resulting
//!   E-N-D triad is left-handed in physical space; all math in this crate uses
//!   this one convention, so the only consequence is the physical meaning of
//!   the camera's "right" axis.
//! * The camera frame: x along the optical axis, y to the right in the image
//!   and z down in the image.
//!
//! [`Quaternion::rotation_matrix`] maps local-frame vectors into the camera
//! frame, so a ground point `p` is seen along `R_q (p - s)`.

use nalgebra::{Matrix3, Vector2, Vector3};
use serde::{Deserialize, Serialize};

use crate::directional::FovSpec;
use crate::error::{invalid, Error, Result};

/// Maximum tolerated deviation from unit norm when constructing quaternions.
pub const QUATERNION_NORM_TOLERANCE: f64 = 1e-6;

/// Ray directions whose local-frame down component is at most this value are
/// treated as never reaching the ground.
pub const GROUND_RAY_EPS: f64 = 1e-9;

/// WGS84 semi-major axis (m).
pub const WGS84_A: f64 = 6_378_137.0;
/// WGS84 flattening.
pub const WGS84_F: f64 = 1.0 / 298.257_223_563;

/// Unit vector in R³.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnitVector3(Vector3<f64>);

impl UnitVector3 {
    /// Normalizes `v`; fails on zero or non-finite input.
    pub fn new(v: Vector3<f64>) -> Result<Self> {
        let n = v.norm();
        if !n.is_finite() || n == 0.0 {
            return Err(invalid("cannot normalize a zero or non-finite vector"));
        }
        Ok(Self(v / n))
    }

    /// Wraps a vector the caller guarantees is unit norm.
    pub fn new_unchecked(v: Vector3<f64>) -> Self {
        debug_assert!((v.norm() - 1.0).abs() < 1e-9, "not a unit vector: {v:?}");
        Self(v)
    }

    pub fn from_xyz(x: f64, y: f64, z: f64) -> Result<Self> {
        Self::new(Vector3::new(x, y, z))
    }

    pub fn as_vector(&self) -> &Vector3<f64> {
        &self.0
    }

    pub fn into_inner(self) -> Vector3<f64> {
        self.0
    }

    pub fn x(&self) -> f64 {
        self.0.x
    }

    pub fn y(&self) -> f64 {
        self.0.y
    }

    pub fn z(&self) -> f64 {
        self.0.z
    }

    pub fn dot(&self, other: &UnitVector3) -> f64 {
        self.0.dot(&other.0)
    }
}

/// Scalar-first unit quaternion `q1 + q2 i + q3 j + q4 k`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Quaternion {
    pub q1: f64,
    pub q2: f64,
    pub q3: f64,
    pub q4: f64,
}

impl Quaternion {
    pub const IDENTITY: Quaternion = Quaternion {
        q1: 1.0,
        q2: 0.0,
        q3: 0.0,
        q4: 0.0,
    };

    /// Validates the norm (within [`QUATERNION_NORM_TOLERANCE`]) and
    /// renormalizes exactly.
    pub fn new(q1: f64, q2: f64, q3: f64, q4: f64) -> Result<Self> {
        let n = (q1 * q1 + q2 * q2 + q3 * q3 + q4 * q4).sqrt();
        if !n.is_finite() || (n - 1.0).abs() > QUATERNION_NORM_TOLERANCE {
            return Err(invalid(format!("quaternion norm {n} is not 1")));
        }
        Ok(Self {
            q1: q1 / n,
            q2: q2 / n,
            q3: q3 / n,
            q4: q4 / n,
        })
    }

    pub fn as_array(&self) -> [f64; 4] {
        [self.q1, self.q2, self.q3, self.q4]
    }

    /// Rotation matrix taking local-frame vectors to the camera frame.
    pub fn rotation_matrix(&self) -> Matrix3<f64> {
        let Quaternion { q1, q2, q3, q4 } = *self;
        Matrix3::new(
            2.0 * q1 * q1 - 1.0 + 2.0 * q2 * q2,
            2.0 * q2 * q3 + 2.0 * q1 * q4,
            2.0 * q2 * q4 - 2.0 * q1 * q3,
            2.0 * q2 * q3 - 2.0 * q1 * q4,
            2.0 * q1 * q1 - 1.0 + 2.0 * q3 * q3,
            2.0 * q3 * q4 + 2.0 * q1 * q2,
            2.0 * q2 * q4 + 2.0 * q1 * q3,
            2.0 * q3 * q4 - 2.0 * q1 * q2,
            2.0 * q1 * q1 - 1.0 + 2.0 * q4 * q4,
        )
    }

    /// Inverse of [`Quaternion::rotation_matrix`] for a proper rotation.
    pub fn from_rotation_matrix(r: &Matrix3<f64>) -> Result<Self> {
        // `r` is the transpose of the usual vector-rotation matrix of q.
        let m = r.transpose();
        let trace = m[(0, 0)] + m[(1, 1)] + m[(2, 2)];
        let (w, x, y, z);
        if trace > 0.0 {
            let s = 2.0 * (trace + 1.0).sqrt();
            w = 0.25 * s;
            x = (m[(2, 1)] - m[(1, 2)]) / s;
            y = (m[(0, 2)] - m[(2, 0)]) / s;
            z = (m[(1, 0)] - m[(0, 1)]) / s;
        } else if m[(0, 0)] > m[(1, 1)] && m[(0, 0)] > m[(2, 2)] {
            let s = 2.0 * (1.0 + m[(0, 0)] - m[(1, 1)] - m[(2, 2)]).sqrt();
            w = (m[(2, 1)] - m[(1, 2)]) / s;
            x = 0.25 * s;
            y = (m[(0, 1)] + m[(1, 0)]) / s;
            z = (m[(0, 2)] + m[(2, 0)]) / s;
        } else if m[(1, 1)] > m[(2, 2)] {
            let s = 2.0 * (1.0 + m[(1, 1)] - m[(0, 0)] - m[(2, 2)]).sqrt();
            w = (m[(0, 2)] - m[(2, 0)]) / s;
            x = (m[(0, 1)] + m[(1, 0)]) / s;
            y = 0.25 * s;
            z = (m[(1, 2)] + m[(2, 1)]) / s;
        } else {
            let s = 2.0 * (1.0 + m[(2, 2)] - m[(0, 0)] - m[(1, 1)]).sqrt();
            w = (m[(1, 0)] - m[(0, 1)]) / s;
            x = (m[(0, 2)] + m[(2, 0)]) / s;
            y = (m[(1, 2)] + m[(2, 1)]) / s;
            z = 0.25 * s;
        }
        let sign = if w < 0.0 { -1.0 } else { 1.0 };
        Self::new(sign * w, sign * x, sign * y, sign * z)
    }

    /// Camera orientation whose optical axis points from `eye` towards
    /// `target` (both in the local frame), with the image "down" axis as close
    /// as possible to the local down direction.
    pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>) -> Result<Self> {
        let forward = target - eye;
        let fwd_norm = forward.norm();
        if fwd_norm == 0.0 {
            return Err(invalid("look_at target coincides with the eye"));
        }
        let x_axis = forward / fwd_norm;
        let down = Vector3::new(0.0, 0.0, 1.0);
        let mut z_axis = down - x_axis * x_axis.dot(&down);
        if z_axis.norm() < 1e-9 {
            // Looking straight down or up: image down follows local -x.
            let alt = Vector3::new(-1.0, 0.0, 0.0);
            z_axis = alt - x_axis * x_axis.dot(&alt);
        }
        let z_axis = z_axis.normalize();
        let y_axis = z_axis.cross(&x_axis);
        let r = Matrix3::from_rows(&[x_axis.transpose(), y_axis.transpose(), z_axis.transpose()]);
        Self::from_rotation_matrix(&r)
    }
}

/// Free-function form of [`Quaternion::rotation_matrix`].
pub fn rotation_matrix(q: &Quaternion) -> Matrix3<f64> {
    q.rotation_matrix()
}

/// Camera pose for one frame.
#[derive(Debug, Clone, PartialEq)]
pub struct CameraPose {
    /// Drone position in the local frame (m, z down).
    pub position: Vector3<f64>,
    pub quat: Quaternion,
    /// Horizontal and vertical field of view (rad).
    pub fov: (f64, f64),
    /// Image width and height (pixels).
    pub image: (u32, u32),
    rotation: Matrix3<f64>,
}

impl CameraPose {
    pub fn new(position: Vector3<f64>, quat: Quaternion, fov: (f64, f64), image: (u32, u32)) -> Result<Self> {
        let (fx, fy) = fov;
        if !(fx > 0.0 && fx < 2.0 * std::f64::consts::PI) || !(fy > 0.0 && fy < std::f64::consts::PI) {
            return Err(invalid(format!("field of view ({fx}, {fy}) rad out of range")));
        }
        let (w, h) = image;
        if w == 0 || h == 0 || w % 2 != 0 || h % 2 != 0 {
            return Err(invalid(format!("image size {w}x{h} must be positive and even")));
        }
        if !position.iter().all(|v| v.is_finite()) {
            return Err(invalid("non-finite drone position"));
        }
        Ok(Self {
            position,
            quat,
            fov,
            image,
            rotation: quat.rotation_matrix(),
        })
    }

    /// Pose looking from `position` at the ground point `target`.
    pub fn looking_at(
        position: Vector3<f64>,
        target: Vector3<f64>,
        fov: (f64, f64),
        image: (u32, u32),
    ) -> Result<Self> {
        let quat = Quaternion::look_at(&position, &target)?;
        Self::new(position, quat, fov, image)
    }

    /// Cached local→camera rotation.
    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn fov_spec(&self) -> FovSpec {
        FovSpec::new(self.fov.0, self.fov.1).expect("pose FoV validated at construction")
    }

    pub fn image_center(&self) -> (f64, f64) {
        (self.image.0 as f64 / 2.0, self.image.1 as f64 / 2.0)
    }
}

/// WGS84 geodetic coordinate (radians, ellipsoidal altitude in metres).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeoCoordinate {
    pub latitude: f64,
    pub longitude: f64,
    pub altitude: f64,
}

impl GeoCoordinate {
    pub fn new(latitude: f64, longitude: f64, altitude: f64) -> Result<Self> {
        if !(latitude.abs() <= std::f64::consts::FRAC_PI_2) || !longitude.is_finite() || !altitude.is_finite() {
            return Err(invalid(format!(
                "invalid geodetic coordinate ({latitude}, {longitude}, {altitude})"
            )));
        }
        Ok(Self {
            latitude,
            longitude,
            altitude,
        })
    }

    pub fn from_degrees(lat_deg: f64, lon_deg: f64, altitude: f64) -> Result<Self> {
        Self::new(lat_deg.to_radians(), lon_deg.to_radians(), altitude)
    }

    fn to_ecef(self) -> Vector3<f64> {
        let e2 = WGS84_F * (2.0 - WGS84_F);
        let (sl, cl) = self.latitude.sin_cos();
        let (so, co) = self.longitude.sin_cos();
        let n = WGS84_A / (1.0 - e2 * sl * sl).sqrt();
        Vector3::new(
            (n + self.altitude) * cl * co,
            (n + self.altitude) * cl * so,
            (n * (1.0 - e2) + self.altitude) * sl,
        )
    }
}

/// Converts a geodetic coordinate to the local East-North-Down frame whose
/// origin lies on the ellipsoid at `origin`'s latitude/longitude (the origin's
/// altitude is ignored).
pub fn wgs84_to_local(geo: &GeoCoordinate, origin: &GeoCoordinate) -> Vector3<f64> {
    let ground = GeoCoordinate {
        altitude: 0.0,
        ..*origin
    };
    let d = geo.to_ecef() - ground.to_ecef();
    let (sl, cl) = origin.latitude.sin_cos();
    let (so, co) = origin.longitude.sin_cos();
    let east = -so * d.x + co * d.y;
    let north = -sl * co * d.x - sl * so * d.y + cl * d.z;
    let up = cl * co * d.x + cl * so * d.y + sl * d.z;
    Vector3::new(east, north, -up)
}

/// Sub-pixel image coordinate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PixelPoint {
    pub ix: f64,
    pub iy: f64,
}

/// Detector bounding box: upper-left corner plus width and height (pixels).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BoundingBox {
    pub bx: f64,
    pub by: f64,
    pub bw: f64,
    pub bh: f64,
}

impl BoundingBox {
    pub fn new(bx: f64, by: f64, bw: f64, bh: f64) -> Result<Self> {
        if !(bw > 0.0 && bh > 0.0) || !bx.is_finite() || !by.is_finite() {
            return Err(invalid(format!("invalid bounding box [{bx}, {by}, {bw}, {bh}]")));
        }
        Ok(Self { bx, by, bw, bh })
    }

    pub fn center(&self) -> PixelPoint {
        PixelPoint {
            ix: self.bx + self.bw / 2.0,
            iy: self.by + self.bh / 2.0,
        }
    }
}

pub fn bbox_center(b: &BoundingBox) -> PixelPoint {
    b.center()
}

/// Pixel to angle conversion.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PixelMethod {
    /// Angles proportional to the pixel offset from the image centre.
    Linear,
    /// Pinhole model with the averaged focal length.
    #[default]
    Pinhole,
}

/// Average of the horizontal and vertical pinhole focal lengths (pixels).
pub fn focal_length_pixels(fov: (f64, f64), image: (u32, u32)) -> Result<f64> {
    let (fx, fy) = focal_lengths_per_axis(fov, image)?;
    Ok(0.5 * (fx + fy))
}

/// Per-axis focal lengths `w / (2 tan(fx/2))` and `h / (2 tan(fy/2))`.
pub fn focal_lengths_per_axis(fov: (f64, f64), image: (u32, u32)) -> Result<(f64, f64)> {
    let (fx, fy) = fov;
    if !(fx > 0.0 && fx < std::f64::consts::PI) || !(fy > 0.0 && fy < std::f64::consts::PI) {
        return Err(invalid(format!("pinhole model needs 0 < fov < pi, got ({fx}, {fy})")));
    }
    let (w, h) = (image.0 as f64, image.1 as f64);
    Ok((w / (2.0 * (fx / 2.0).tan()), h / (2.0 * (fy / 2.0).tan())))
}

/// Azimuth and elevation (rad) of a pixel in the camera frame.
pub fn pixel_to_angles(p: &PixelPoint, pose: &CameraPose, method: PixelMethod) -> Result<(f64, f64)> {
    let (cx, cy) = pose.image_center();
    let (dx, dy) = (p.ix - cx, p.iy - cy);
    match method {
        PixelMethod::Linear => {
            let (w, h) = (pose.image.0 as f64, pose.image.1 as f64);
            Ok((dx / w * pose.fov.0, dy / h * pose.fov.1))
        }
        PixelMethod::Pinhole => {
            let f = focal_length_pixels(pose.fov, pose.image)?;
            Ok(((dx / f).atan(), (dy / f).atan()))
        }
    }
}

/// Spherical angles to a camera-frame unit vector.
pub fn angles_to_doa(phi: f64, theta: f64) -> UnitVector3 {
    let (sp, cp) = phi.sin_cos();
    let (st, ct) = theta.sin_cos();
    UnitVector3::new_unchecked(Vector3::new(cp * ct, sp * ct, st))
}

/// Azimuth in (-pi, pi] and elevation in [-pi/2, pi/2] of a unit vector.
///
/// The azimuth is undefined at the poles; 0 is returned there.
pub fn doa_to_angles(z: &UnitVector3) -> (f64, f64) {
    let v = z.as_vector();
    let theta = v.z.clamp(-1.0, 1.0).asin();
    let phi = if v.x == 0.0 && v.y == 0.0 { 0.0 } else { v.y.atan2(v.x) };
    (phi, theta)
}

/// Camera-frame DOA of a pixel.
pub fn pixel_to_doa(p: &PixelPoint, pose: &CameraPose, method: PixelMethod) -> Result<UnitVector3> {
    let (phi, theta) = pixel_to_angles(p, pose, method)?;
    Ok(angles_to_doa(phi, theta))
}

/// Intersects the camera-frame ray `nu_camera` from the drone with the ground
/// plane `z = 0` and returns the ground point `(px, py)`.
pub fn project_doa_to_ground(nu_camera: &UnitVector3, pose: &CameraPose) -> Result<Vector2<f64>> {
    let s = pose.position;
    if !(s.z < 0.0) {
        return Err(invalid(format!(
            "drone must be above the ground (z < 0), got z = {}",
            s.z
        )));
    }
    let nu = pose.rotation().transpose() * nu_camera.as_vector();
    if nu.z <= GROUND_RAY_EPS {
        return Err(Error::NoIntersection);
    }
    let t = s.z / nu.z;
    Ok(Vector2::new(s.x - t * nu.x, s.y - t * nu.y))
}

/// Camera-frame direction from the drone to the ground point `(px, py, 0)`.
pub fn ground_to_doa(px: f64, py: f64, pose: &CameraPose) -> Result<UnitVector3> {
    let d = Vector3::new(px, py, 0.0) - pose.position;
    let v = pose.rotation() * d;
    let n = v.norm();
    if n == 0.0 {
        return Err(Error::UndefinedDirection);
    }
    Ok(UnitVector3::new_unchecked(v / n))
}
