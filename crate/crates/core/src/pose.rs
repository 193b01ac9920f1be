//! Camera poses as translation plus unit quaternion in `(w, x, y, z)` order.

use nalgebra::{Matrix3, Quaternion, UnitQuaternion, Vector3};
use serde::{Deserialize, Serialize};

/// Camera-to-world pose: `t` is the camera centre in metres, `q` rotates
/// camera-frame vectors into the world frame.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PoseLabel {
    pub t: [f64; 3],
    pub q: [f64; 4],
}

impl PoseLabel {
    pub fn new(t: [f64; 3], q: [f64; 4]) -> Self {
        Self { t, q }
    }

    pub fn identity() -> Self {
        Self::new([0.0; 3], [1.0, 0.0, 0.0, 0.0])
    }

    /// Flattened `[tx, ty, tz, qw, qx, qy, qz]`.
    pub fn to_array(&self) -> [f64; 7] {
        let [x, y, z] = self.t;
        let [w, a, b, c] = self.q;
        [x, y, z, w, a, b, c]
    }

    pub fn rotation(&self) -> UnitQuaternion<f64> {
        let [w, x, y, z] = self.q;
        UnitQuaternion::from_quaternion(Quaternion::new(w, x, y, z))
    }

    pub fn translation(&self) -> Vector3<f64> {
        Vector3::from(self.t)
    }

    /// World point expressed in the camera frame.
    pub fn world_to_camera(&self, p: &Vector3<f64>) -> Vector3<f64> {
        self.rotation().inverse_transform_vector(&(p - self.translation()))
    }
}

pub fn quat_norm(q: &[f64; 4]) -> f64 {
    q.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// Picks the representative with `w >= 0`. For `w == 0` the first non-zero
/// vector component is made positive so the choice is unique.
pub fn canonicalize(q: [f64; 4]) -> [f64; 4] {
    let flip = if q[0] != 0.0 {
        q[0] < 0.0
    } else {
        q[1..].iter().find(|v| **v != 0.0).is_some_and(|v| *v < 0.0)
    };
    if flip {
        q.map(|v| -v)
    } else {
        q
    }
}

/// Unit-normalises and canonicalises; `None` for a (near) zero quaternion.
pub fn normalize_canonical(q: [f64; 4]) -> Option<[f64; 4]> {
    let n = quat_norm(&q);
    if !(n > 1e-12) {
        return None;
    }
    Some(canonicalize(q.map(|v| v / n)))
}

pub fn from_unit_quaternion(u: &UnitQuaternion<f64>) -> [f64; 4] {
    let q = u.quaternion();
    [q.w, q.i, q.j, q.k]
}

/// Rotation whose camera `+z` axis looks from `eye` at `target`, with camera
/// `+y` pointing as close to world `down` as possible, then rolled by `roll`
/// radians about the viewing axis.
pub fn look_at(eye: &Vector3<f64>, target: &Vector3<f64>, down: &Vector3<f64>, roll: f64) -> UnitQuaternion<f64> {
    let z = (target - eye).normalize();
    let mut x = down.cross(&z);
    if x.norm() < 1e-9 {
        x = z.cross(&Vector3::new(1.0, 0.0, 0.0));
        if x.norm() < 1e-9 {
            x = z.cross(&Vector3::new(0.0, 1.0, 0.0));
        }
    }
    let x = x.normalize();
    let y = z.cross(&x);
    let base = UnitQuaternion::from_matrix(&Matrix3::from_columns(&[x, y, z]));
    base * UnitQuaternion::from_axis_angle(&Vector3::z_axis(), roll)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn canonical_form_has_non_negative_w() {
        assert_eq!(canonicalize([-1.0, 0.0, 0.0, 0.0]), [1.0, 0.0, 0.0, 0.0]);
        assert_eq!(canonicalize([0.0, -1.0, 0.0, 0.0]), [0.0, 1.0, 0.0, 0.0]);
        assert_eq!(canonicalize([0.5, -0.5, 0.5, 0.5]), [0.5, -0.5, 0.5, 0.5]);
    }

    #[test]
    fn look_at_points_optical_axis_at_target() {
        let eye = Vector3::new(3.0, 0.5, -2.0);
        let target = Vector3::new(0.0, 0.0, 0.0);
        let r = look_at(&eye, &target, &Vector3::new(0.0, 1.0, 0.0), 0.1);
        let axis = r.transform_vector(&Vector3::z());
        let expected = (target - eye).normalize();
        assert!((axis - expected).norm() < 1e-12);
    }

    #[test]
    fn world_to_camera_inverts_pose() {
        let eye = Vector3::new(1.0, 2.0, 3.0);
        let r = look_at(&eye, &Vector3::zeros(), &Vector3::new(0.0, 1.0, 0.0), 0.0);
        let pose = PoseLabel::new(eye.into(), from_unit_quaternion(&r));
        let p = pose.world_to_camera(&Vector3::zeros());
        assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12);
        assert!((p.z - eye.norm()).abs() < 1e-12);
    }
}
