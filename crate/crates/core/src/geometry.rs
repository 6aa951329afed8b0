//! Rigid transforms on SE(3), the C-arm cone-beam camera and per-pixel rays.
//!
//! Conventions used throughout the crate:
//!
//! * Lengths are millimetres, angles radians unless a name says `_deg`.
//! * `SE3Pose` maps points `x -> R x + t`; `a.compose(&b)` applies `b` first.
//! * A [`CArmView`] carries a world -> gantry pose. In gantry coordinates the
//!   source sits at `(0, 0, -sad)`, the isocenter at the origin and the
//!   detector plane at `z = sdd - sad`, centred on the principal (+z) axis.
//!   Detector column `u` runs along gantry +x, row `v` along gantry +y.
//! * The gantry rotates about the world +y axis: AP at 0 deg, LA at 90 deg.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec3 = Vector3<f64>;
pub type Mat3 = Matrix3<f64>;

const SMALL_ANGLE: f64 = 1e-8;

/// Rigid transform stored as a unit quaternion and a translation in mm.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SE3Pose {
    rotation: UnitQuaternion<f64>,
    translation: Vec3,
}

impl Default for SE3Pose {
    fn default() -> Self {
        Self::identity()
    }
}

impl SE3Pose {
    pub fn identity() -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: Vec3::zeros(),
        }
    }

    /// Builds a pose from a (not necessarily normalized) `w,x,y,z` quaternion.
    pub fn from_quat_wxyz(q: [f64; 4], translation: Vec3) -> Result<Self> {
        let raw = Quaternion::new(q[0], q[1], q[2], q[3]);
        let n = raw.norm();
        if !n.is_finite() || n < 1e-12 {
            return Err(Error::input("quaternion must be finite and nonzero"));
        }
        if !translation.iter().all(|c| c.is_finite()) {
            return Err(Error::input("translation must be finite"));
        }
        Ok(Self {
            rotation: UnitQuaternion::from_quaternion(raw),
            translation,
        })
    }

    pub fn from_parts(rotation: UnitQuaternion<f64>, translation: Vec3) -> Self {
        Self { rotation, translation }
    }

    pub fn translation_only(t: Vec3) -> Self {
        Self {
            rotation: UnitQuaternion::identity(),
            translation: t,
        }
    }

    pub fn rotation_only(rotation: UnitQuaternion<f64>) -> Self {
        Self {
            rotation,
            translation: Vec3::zeros(),
        }
    }

    /// Rotation about `axis` by `angle` radians, no translation.
    pub fn axis_angle(axis: Vec3, angle: f64) -> Self {
        Self::rotation_only(UnitQuaternion::from_scaled_axis(axis.normalize() * angle))
    }

    /// Extrinsic X-then-Y-then-Z Euler rotation: `R = Rz(c) Ry(b) Rx(a)`.
    pub fn from_euler_xyz(angles: Vec3, translation: Vec3) -> Self {
        let rx = UnitQuaternion::from_axis_angle(&Vector3::x_axis(), angles.x);
        let ry = UnitQuaternion::from_axis_angle(&Vector3::y_axis(), angles.y);
        let rz = UnitQuaternion::from_axis_angle(&Vector3::z_axis(), angles.z);
        Self {
            rotation: rz * ry * rx,
            translation,
        }
    }

    pub fn rotation(&self) -> &UnitQuaternion<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vec3 {
        &self.translation
    }

    pub fn quat_wxyz(&self) -> [f64; 4] {
        let q = self.rotation.quaternion();
        [q.w, q.i, q.j, q.k]
    }

    pub fn rotation_matrix(&self) -> Mat3 {
        self.rotation.to_rotation_matrix().into_inner()
    }

    pub fn apply(&self, x: &Vec3) -> Vec3 {
        self.rotation * x + self.translation
    }

    pub fn apply_vector(&self, v: &Vec3) -> Vec3 {
        self.rotation * v
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &SE3Pose) -> SE3Pose {
        SE3Pose {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> SE3Pose {
        let inv = self.rotation.inverse();
        SE3Pose {
            rotation: inv,
            translation: -(inv * self.translation),
        }
    }

    /// Rotation angle in radians, in `[0, π]`.
    pub fn rotation_angle(&self) -> f64 {
        self.rotation.angle()
    }

    pub fn to_json(&self) -> PoseJson {
        PoseJson {
            quat_wxyz: self.quat_wxyz(),
            trans_mm: [self.translation.x, self.translation.y, self.translation.z],
        }
    }
}

/// Wire form of a pose: `{"quat_wxyz": [..4], "trans_mm": [..3]}`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PoseJson {
    pub quat_wxyz: [f64; 4],
    pub trans_mm: [f64; 3],
}

impl TryFrom<PoseJson> for SE3Pose {
    type Error = Error;

    fn try_from(p: PoseJson) -> Result<Self> {
        SE3Pose::from_quat_wxyz(p.quat_wxyz, Vec3::from(p.trans_mm))
    }
}

/// Tangent vector of SE(3): rotation part `omega` (axis-angle, rad) and
/// translation part `v` (mm).
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct Twist {
    pub omega: Vec3,
    pub v: Vec3,
}

impl Twist {
    pub fn new(omega: Vec3, v: Vec3) -> Self {
        Self { omega, v }
    }

    pub fn zero() -> Self {
        Self::default()
    }

    pub fn to_array(&self) -> [f64; 6] {
        [self.omega.x, self.omega.y, self.omega.z, self.v.x, self.v.y, self.v.z]
    }

    pub fn from_array(a: [f64; 6]) -> Self {
        Self {
            omega: Vec3::new(a[0], a[1], a[2]),
            v: Vec3::new(a[3], a[4], a[5]),
        }
    }
}

pub fn hat(w: &Vec3) -> Mat3 {
    Mat3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Left Jacobian `V(omega)` of SO(3), the matrix mapping the twist's `v` to
/// the pose translation.
fn left_jacobian(omega: &Vec3) -> Mat3 {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(omega);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        Mat3::identity() + k * 0.5 + k2 * (1.0 / 6.0)
    } else {
        let b = (1.0 - theta.cos()) / theta2;
        let c = (theta - theta.sin()) / (theta2 * theta);
        Mat3::identity() + k * b + k2 * c
    }
}

fn left_jacobian_inverse(omega: &Vec3) -> Mat3 {
    let theta2 = omega.norm_squared();
    let theta = theta2.sqrt();
    let k = hat(omega);
    let k2 = k * k;
    if theta < SMALL_ANGLE {
        Mat3::identity() - k * 0.5 + k2 * (1.0 / 12.0)
    } else {
        let half = 0.5 * theta;
        let coef = (1.0 - half * half.cos() / half.sin()) / theta2;
        Mat3::identity() - k * 0.5 + k2 * coef
    }
}

/// SE(3) exponential map.
pub fn se3_exp(t: &Twist) -> SE3Pose {
    let theta = t.omega.norm();
    let q = if theta < SMALL_ANGLE {
        // second-order series of cos(θ/2) and sin(θ/2)/θ
        let s = 0.5 - theta * theta / 48.0;
        Quaternion::new(1.0 - theta * theta / 8.0, s * t.omega.x, s * t.omega.y, s * t.omega.z)
    } else {
        let half = 0.5 * theta;
        let s = half.sin() / theta;
        Quaternion::new(half.cos(), s * t.omega.x, s * t.omega.y, s * t.omega.z)
    };
    SE3Pose {
        rotation: UnitQuaternion::from_quaternion(q),
        translation: left_jacobian(&t.omega) * t.v,
    }
}

/// SE(3) logarithm; inverse of [`se3_exp`] for rotation angles below π.
pub fn se3_log(p: &SE3Pose) -> Twist {
    let q = p.rotation.quaternion();
    let (w, xyz) = if q.w < 0.0 {
        (-q.w, -q.vector().into_owned())
    } else {
        (q.w, q.vector().into_owned())
    };
    let s = xyz.norm();
    let omega = if s < 1e-12 {
        xyz * (2.0 / w)
    } else {
        let theta = 2.0 * s.atan2(w);
        xyz * (theta / s)
    };
    Twist {
        omega,
        v: left_jacobian_inverse(&omega) * p.translation,
    }
}

/// A ray in world coordinates.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Ray {
    pub origin: Vec3,
    pub dir: Vec3,
}

/// Cone-beam acquisition geometry of one C-arm view.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CArmView {
    sdd: f64,
    sad: f64,
    width: usize,
    height: usize,
    pixel_pitch: f64,
    view_pose: SE3Pose,
}

impl Default for CArmView {
    /// 976² detector, 1124 mm source-detector distance, 700 mm
    /// source-isocenter distance, 0.2 mm pixels, AP orientation.
    fn default() -> Self {
        Self {
            sdd: 1124.0,
            sad: 700.0,
            width: 976,
            height: 976,
            pixel_pitch: 0.2,
            view_pose: SE3Pose::identity(),
        }
    }
}

impl CArmView {
    pub fn new(sdd: f64, sad: f64, detector_px: (usize, usize), pixel_pitch: f64, view_pose: SE3Pose) -> Result<Self> {
        if !(sad > 0.0 && sad < sdd && sdd.is_finite()) {
            return Err(Error::input(format!(
                "C-arm requires 0 < sad < sdd (got sad={sad}, sdd={sdd})"
            )));
        }
        if detector_px.0 == 0 || detector_px.1 == 0 {
            return Err(Error::input("detector must have at least one pixel"));
        }
        if !(pixel_pitch > 0.0 && pixel_pitch.is_finite()) {
            return Err(Error::input("pixel pitch must be positive"));
        }
        Ok(Self {
            sdd,
            sad,
            width: detector_px.0,
            height: detector_px.1,
            pixel_pitch,
            view_pose,
        })
    }

    pub fn sdd(&self) -> f64 {
        self.sdd
    }

    pub fn sad(&self) -> f64 {
        self.sad
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn height(&self) -> usize {
        self.height
    }

    pub fn pixel_pitch(&self) -> f64 {
        self.pixel_pitch
    }

    pub fn view_pose(&self) -> &SE3Pose {
        &self.view_pose
    }

    pub fn with_view_pose(&self, view_pose: SE3Pose) -> Self {
        Self { view_pose, ..*self }
    }

    /// Same geometry rotated to gantry angle `angle_deg` about world +y, with
    /// an extra `perturb` applied in gantry space.
    pub fn at_gantry_angle(&self, angle_deg: f64, perturb: &SE3Pose) -> Self {
        let gantry = SE3Pose::axis_angle(Vec3::y(), angle_deg.to_radians());
        self.with_view_pose(perturb.compose(&gantry))
    }

    /// Source position in world coordinates.
    pub fn source_world(&self) -> Vec3 {
        self.view_pose.inverse().apply(&Vec3::new(0.0, 0.0, -self.sad))
    }

    /// Ray from the source through the center of pixel `(u, v)`.
    pub fn pixel_ray(&self, u: usize, v: usize) -> Result<Ray> {
        if u >= self.width || v >= self.height {
            return Err(Error::input(format!(
                "pixel ({u}, {v}) outside {}x{} detector",
                self.width, self.height
            )));
        }
        Ok(self.fan().ray(u as f64, v as f64))
    }

    /// Precomputed world-space ray generator for this view.
    pub fn fan(&self) -> RayFan {
        let inv = self.view_pose.inverse();
        RayFan {
            source: inv.apply(&Vec3::new(0.0, 0.0, -self.sad)),
            gantry_to_world: inv.rotation_matrix(),
            world_to_gantry: self.view_pose,
            sdd: self.sdd,
            sad: self.sad,
            pitch: self.pixel_pitch,
            cu: 0.5 * self.width as f64 - 0.5,
            cv: 0.5 * self.height as f64 - 0.5,
        }
    }

    pub fn to_json(&self) -> CArmViewJson {
        CArmViewJson {
            sdd_mm: self.sdd,
            sad_mm: self.sad,
            detector_px: [self.width, self.height],
            pixel_pitch_mm: self.pixel_pitch,
            view_pose: self.view_pose.to_json(),
        }
    }
}

/// Wire form of a [`CArmView`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CArmViewJson {
    pub sdd_mm: f64,
    pub sad_mm: f64,
    pub detector_px: [usize; 2],
    pub pixel_pitch_mm: f64,
    pub view_pose: PoseJson,
}

impl TryFrom<CArmViewJson> for CArmView {
    type Error = Error;

    fn try_from(j: CArmViewJson) -> Result<Self> {
        CArmView::new(
            j.sdd_mm,
            j.sad_mm,
            (j.detector_px[0], j.detector_px[1]),
            j.pixel_pitch_mm,
            SE3Pose::try_from(j.view_pose)?,
        )
    }
}

impl Serialize for CArmView {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        self.to_json().serialize(s)
    }
}

impl<'de> Deserialize<'de> for CArmView {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let j = CArmViewJson::deserialize(d)?;
        CArmView::try_from(j).map_err(serde::de::Error::custom)
    }
}

/// World-space ray generator and detector projector for one view.
#[derive(Debug, Clone, Copy)]
pub struct RayFan {
    source: Vec3,
    gantry_to_world: Mat3,
    world_to_gantry: SE3Pose,
    sdd: f64,
    sad: f64,
    pitch: f64,
    cu: f64,
    cv: f64,
}

impl RayFan {
    pub fn source(&self) -> Vec3 {
        self.source
    }

    /// Ray through continuous pixel coordinates (pixel centers are integers).
    pub fn ray(&self, u: f64, v: f64) -> Ray {
        let g = Vec3::new((u - self.cu) * self.pitch, (v - self.cv) * self.pitch, self.sdd);
        Ray {
            origin: self.source,
            dir: (self.gantry_to_world * g).normalize(),
        }
    }

    /// Gantry-space coordinates of a world point.
    pub fn to_gantry(&self, x: &Vec3) -> Vec3 {
        self.world_to_gantry.apply(x)
    }

    pub fn gantry_rotation(&self) -> Mat3 {
        self.world_to_gantry.rotation_matrix()
    }

    /// Depth of a gantry point in front of the source along the principal axis.
    pub fn depth(&self, g: &Vec3) -> f64 {
        g.z + self.sad
    }

    /// Continuous pixel coordinates of a gantry-space point, or `None` when
    /// the point is not in front of the source.
    pub fn project_gantry(&self, g: &Vec3) -> Option<(f64, f64)> {
        let depth = self.depth(g);
        if depth <= 1e-9 {
            return None;
        }
        let s = self.sdd / depth;
        Some((g.x * s / self.pitch + self.cu, g.y * s / self.pitch + self.cv))
    }
}

/// Samples a rigid perturbation with independent uniform Euler angles (deg,
/// extrinsic XYZ) and per-axis translations (mm).
pub fn sample_pose<R: Rng + ?Sized>(
    rng: &mut R,
    rot_range_deg: (f64, f64),
    trans_range_mm: (f64, f64),
) -> Result<SE3Pose> {
    for (name, (lo, hi)) in [("rotation", rot_range_deg), ("translation", trans_range_mm)] {
        if !(lo <= hi) || !lo.is_finite() || !hi.is_finite() {
            return Err(Error::input(format!("{name} range [{lo}, {hi}] is empty or inverted")));
        }
    }
    let mut draw = |(lo, hi): (f64, f64)| if lo == hi { lo } else { rng.random_range(lo..hi) };
    let angles = Vec3::new(
        draw(rot_range_deg).to_radians(),
        draw(rot_range_deg).to_radians(),
        draw(rot_range_deg).to_radians(),
    );
    let t = Vec3::new(draw(trans_range_mm), draw(trans_range_mm), draw(trans_range_mm));
    Ok(SE3Pose::from_euler_xyz(angles, t))
}

/// Euler angles (deg) and translation that [`sample_pose`] would have drawn to
/// produce `p`. Only used by statistical tests.
pub fn euler_xyz_deg(p: &SE3Pose) -> Vec3 {
    let (roll, pitch, yaw) = p.rotation().euler_angles();
    Vec3::new(roll.to_degrees(), pitch.to_degrees(), yaw.to_degrees())
}
