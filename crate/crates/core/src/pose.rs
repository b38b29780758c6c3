//! Planar pose algebra and the Ackermann kinematic model.
//!
//! Poses compose like homogeneous 2D rigid transforms. Headings live in
//! the half-open interval (-π, π]; π itself is kept, -π is folded onto π.

use std::f64::consts::{FRAC_PI_2, PI, TAU};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Wraps an angle into (-π, π]. Non-finite input passes through unchanged.
#[inline]
pub fn wrap_angle(a: f64) -> f64 {
    if (-PI < a) && (a <= PI) {
        return a;
    }
    let mut r = a - TAU * ((a - PI) / TAU).ceil();
    if r <= -PI {
        r += TAU;
    } else if r > PI {
        r -= TAU;
    }
    r
}

/// Checked version of [`wrap_angle`].
pub fn normalize_angle(a: f64) -> Result<f64> {
    if !a.is_finite() {
        return Err(Error::NonFinite("angle"));
    }
    Ok(wrap_angle(a))
}

/// Vehicle pose in the plane: position in meters, heading in radians.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct Pose2D {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl Pose2D {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        Self {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    pub const fn identity() -> Self {
        Self {
            x: 0.0,
            y: 0.0,
            theta: 0.0,
        }
    }

    /// `self ⊕ other`: apply `other`, expressed in this pose's frame.
    #[inline]
    pub fn compose(&self, other: &Pose2D) -> Pose2D {
        let (s, c) = self.theta.sin_cos();
        Pose2D {
            x: self.x + c * other.x - s * other.y,
            y: self.y + s * other.x + c * other.y,
            theta: wrap_angle(self.theta + other.theta),
        }
    }

    pub fn inverse(&self) -> Pose2D {
        let (s, c) = self.theta.sin_cos();
        Pose2D {
            x: -(c * self.x + s * self.y),
            y: s * self.x - c * self.y,
            theta: wrap_angle(-self.theta),
        }
    }

    /// `self ⊖ base`: this pose expressed in the frame of `base`, so that
    /// `base.compose(&self.relative_to(base)) == self`.
    #[inline]
    pub fn relative_to(&self, base: &Pose2D) -> Pose2D {
        let (s, c) = base.theta.sin_cos();
        let dx = self.x - base.x;
        let dy = self.y - base.y;
        Pose2D {
            x: c * dx + s * dy,
            y: -s * dx + c * dy,
            theta: wrap_angle(self.theta - base.theta),
        }
    }

    /// Maps a point from this pose's frame into the parent frame.
    #[inline]
    pub fn transform_point(&self, px: f64, py: f64) -> (f64, f64) {
        let (s, c) = self.theta.sin_cos();
        (self.x + c * px - s * py, self.y + s * px + c * py)
    }

    pub fn distance(&self, other: &Pose2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    pub fn to_array(&self) -> [f64; 3] {
        [self.x, self.y, self.theta]
    }
}

/// Free-function form of [`Pose2D::compose`].
pub fn compose_pose(a: &Pose2D, b: &Pose2D) -> Pose2D {
    a.compose(b)
}

/// Free-function form of [`Pose2D::relative_to`]: `a` expressed in `b`'s frame.
pub fn relative_pose(a: &Pose2D, b: &Pose2D) -> Pose2D {
    a.relative_to(b)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleParams {
    /// Distance between front and rear axles (m).
    pub wheelbase: f64,
    /// Largest steering angle the vehicle can command (rad).
    pub max_steering: f64,
}

impl VehicleParams {
    pub fn new(wheelbase: f64, max_steering: f64) -> Result<Self> {
        if !(wheelbase > 0.0 && wheelbase.is_finite()) {
            return Err(Error::InvalidArgument(format!("wheelbase {wheelbase} must be > 0")));
        }
        if !(max_steering > 0.0 && max_steering < FRAC_PI_2) {
            return Err(Error::InvalidArgument(format!(
                "max_steering {max_steering} must be in (0, π/2)"
            )));
        }
        Ok(Self {
            wheelbase,
            max_steering,
        })
    }
}

impl Default for VehicleParams {
    fn default() -> Self {
        Self {
            wheelbase: 2.625,
            max_steering: std::f64::consts::FRAC_PI_6,
        }
    }
}

/// One odometry reading: linear velocity and steering angle.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OdomSample {
    pub t: f64,
    pub v: f64,
    pub phi: f64,
}

/// One Euler step of the Ackermann model. Position uses the heading from
/// before the step.
pub fn ackermann_step(p: &Pose2D, v: f64, phi: f64, dt: f64, params: &VehicleParams) -> Result<Pose2D> {
    if phi.abs() >= FRAC_PI_2 {
        return Err(Error::SteeringSingularity(phi));
    }
    if !(dt >= 0.0) {
        return Err(Error::InvalidArgument(format!("dt {dt} must be >= 0")));
    }
    Ok(step_unchecked(p, v, phi, dt, params.wheelbase))
}

#[inline]
pub(crate) fn step_unchecked(p: &Pose2D, v: f64, phi: f64, dt: f64, wheelbase: f64) -> Pose2D {
    let ds = v * dt;
    let (s, c) = p.theta.sin_cos();
    Pose2D {
        x: p.x + ds * c,
        y: p.y + ds * s,
        theta: wrap_angle(p.theta + ds * phi.tan() / wheelbase),
    }
}

/// Displacement produced by one odometry reading over `dt`, expressed in the
/// frame of the starting pose.
pub fn motion_delta(odom: &OdomSample, dt: f64, params: &VehicleParams) -> Result<Pose2D> {
    ackermann_step(&Pose2D::identity(), odom.v, odom.phi, dt, params)
}

/// Same displacement as [`motion_delta`] integrated with `substeps` Euler steps.
pub fn motion_delta_substepped(odom: &OdomSample, dt: f64, params: &VehicleParams, substeps: usize) -> Result<Pose2D> {
    let n = substeps.max(1);
    let h = dt / n as f64;
    let mut p = Pose2D::identity();
    for _ in 0..n {
        p = ackermann_step(&p, odom.v, odom.phi, h, params)?;
    }
    Ok(p)
}

/// Pose with a timestamp, the row type of every `t,x,y,theta` CSV.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimedPose {
    pub t: f64,
    pub pose: Pose2D,
}

pub fn write_poses_csv(poses: &[TimedPose], path: &Path) -> Result<()> {
    let mut s = String::from("t,x,y,theta\n");
    for p in poses {
        s.push_str(&format!("{},{},{},{}\n", p.t, p.pose.x, p.pose.y, p.pose.theta));
    }
    fs::write(path, s).map_err(|e| Error::io(path, e))
}

pub fn read_poses_csv(path: &Path) -> Result<Vec<TimedPose>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || (n == 0 && line.starts_with('t')) {
            continue;
        }
        let loc = || format!("{}:{}", path.display(), n + 1);
        let v: Vec<f64> = line
            .split(',')
            .map(|f| f.trim().parse::<f64>())
            .collect::<std::result::Result<_, _>>()
            .map_err(|e| Error::parse(loc(), e.to_string()))?;
        if v.len() != 4 {
            return Err(Error::parse(loc(), format!("expected 4 columns, found {}", v.len())));
        }
        out.push(TimedPose {
            t: v[0],
            pose: Pose2D::new(v[1], v[2], v[3]),
        });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &Pose2D, b: &Pose2D, tol: f64) -> bool {
        (a.x - b.x).abs() < tol && (a.y - b.y).abs() < tol && wrap_angle(a.theta - b.theta).abs() < tol
    }

    /// 3x3 homogeneous matrix of a pose; independent route for composition.
    fn mat(p: &Pose2D) -> [[f64; 3]; 3] {
        let (s, c) = p.theta.sin_cos();
        [[c, -s, p.x], [s, c, p.y], [0.0, 0.0, 1.0]]
    }

    fn mul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
        let mut r = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                for k in 0..3 {
                    r[i][j] += a[i][k] * b[k][j];
                }
            }
        }
        r
    }

    fn from_mat(m: [[f64; 3]; 3]) -> Pose2D {
        Pose2D::new(m[0][2], m[1][2], m[1][0].atan2(m[0][0]))
    }

    #[test]
    fn normalize_examples() {
        assert_eq!(normalize_angle(0.0).unwrap(), 0.0);
        assert!((normalize_angle(PI + 0.1).unwrap() - (-PI + 0.1)).abs() < 1e-12);
        assert_eq!(normalize_angle(-3.0 * PI).unwrap(), PI);
        assert_eq!(normalize_angle(PI).unwrap(), PI);
        assert_eq!(normalize_angle(-PI).unwrap(), PI);
        assert!(normalize_angle(f64::NAN).is_err());
        assert!(normalize_angle(f64::INFINITY).is_err());
    }

    #[test]
    fn compose_examples() {
        let p = Pose2D::new(0.3, -1.2, 2.0);
        assert_eq!(Pose2D::identity().compose(&p), p);
        assert_eq!(p.compose(&Pose2D::identity()), p);
        let r = Pose2D::new(1.0, 0.0, FRAC_PI_2).compose(&Pose2D::new(1.0, 0.0, 0.0));
        let oracle = from_mat(mul(
            mat(&Pose2D::new(1.0, 0.0, FRAC_PI_2)),
            mat(&Pose2D::new(1.0, 0.0, 0.0)),
        ));
        assert!(close(&r, &Pose2D::new(1.0, 1.0, FRAC_PI_2), 1e-12));
        assert!(close(&r, &oracle, 1e-12));
    }

    #[test]
    fn relative_examples() {
        let p = Pose2D::new(4.0, -2.0, 0.7);
        assert!(close(&p.relative_to(&p), &Pose2D::identity(), 1e-12));
        let r = relative_pose(&Pose2D::new(1.0, 1.0, FRAC_PI_2), &Pose2D::new(1.0, 0.0, FRAC_PI_2));
        assert!(close(&r, &Pose2D::new(1.0, 0.0, 0.0), 1e-12));
    }

    #[test]
    fn ackermann_examples() {
        let params = VehicleParams::new(2.5, 0.6).unwrap();
        let o = Pose2D::identity();
        assert_eq!(ackermann_step(&o, 0.0, 0.3, 1.0, &params).unwrap(), o);
        assert_eq!(
            ackermann_step(&o, 1.0, 0.0, 2.0, &params).unwrap(),
            Pose2D::new(2.0, 0.0, 0.0)
        );
        let r = ackermann_step(&o, 2.0, 0.25f64.atan(), 0.5, &params).unwrap();
        assert!(close(&r, &Pose2D::new(1.0, 0.0, 0.1), 1e-12));
        assert!(ackermann_step(&o, 1.0, FRAC_PI_2, 1.0, &params).is_err());
        assert!(ackermann_step(&o, 1.0, 0.1, -1.0, &params).is_err());
    }

    #[test]
    fn motion_delta_examples() {
        let params = VehicleParams::new(2.5, 0.6).unwrap();
        let still = OdomSample {
            t: 0.0,
            v: 0.0,
            phi: 0.2,
        };
        assert_eq!(motion_delta(&still, 0.3, &params).unwrap(), Pose2D::identity());
        let straight = OdomSample {
            t: 0.0,
            v: 1.0,
            phi: 0.0,
        };
        assert_eq!(
            motion_delta(&straight, 1.0, &params).unwrap(),
            Pose2D::new(1.0, 0.0, 0.0)
        );
        let turn = OdomSample {
            t: 0.0,
            v: 2.0,
            phi: 0.25f64.atan(),
        };
        assert!(close(
            &motion_delta(&turn, 0.5, &params).unwrap(),
            &Pose2D::new(1.0, 0.0, 0.1),
            1e-12
        ));
    }

    #[test]
    fn vehicle_params_validation() {
        assert!(VehicleParams::new(0.0, 0.5).is_err());
        assert!(VehicleParams::new(2.0, 0.0).is_err());
        assert!(VehicleParams::new(2.0, 2.0).is_err());
    }

    fn pose_strategy() -> impl Strategy<Value = Pose2D> {
        (-100.0..100.0f64, -100.0..100.0f64, -PI..PI).prop_map(|(x, y, t)| Pose2D::new(x, y, t))
    }

    fn unit_pose_strategy() -> impl Strategy<Value = Pose2D> {
        (-1.0..1.0f64, -1.0..1.0f64, -PI..PI).prop_map(|(x, y, t)| Pose2D::new(x, y, t))
    }

    proptest! {
        #[test]
        fn relative_round_trip_unit_scale(a in unit_pose_strategy(), b in unit_pose_strategy()) {
            prop_assert!(close(&b.compose(&a.relative_to(&b)), &a, 1e-12));
        }

        #[test]
        fn normalize_range_and_idempotent(a in -1e4..1e4f64) {
            let n = normalize_angle(a).unwrap();
            prop_assert!(n > -PI && n <= PI);
            prop_assert_eq!(normalize_angle(n).unwrap(), n);
            let k = ((a - n) / TAU).round();
            prop_assert!((a - n - k * TAU).abs() < 1e-9);
        }

        #[test]
        fn compose_associative(a in pose_strategy(), b in pose_strategy(), c in pose_strategy()) {
            let l = a.compose(&b).compose(&c);
            let r = a.compose(&b.compose(&c));
            prop_assert!(close(&l, &r, 1e-9));
        }

        #[test]
        fn compose_matches_matrix_product(a in pose_strategy(), b in pose_strategy()) {
            prop_assert!(close(&a.compose(&b), &from_mat(mul(mat(&a), mat(&b))), 1e-9));
        }

        #[test]
        fn relative_round_trip(a in pose_strategy(), b in pose_strategy()) {
            // absolute rounding grows with the coordinates
            prop_assert!(close(&b.compose(&a.relative_to(&b)), &a, 1e-12 * 100.0));
            prop_assert!(close(&a.relative_to(&b), &b.inverse().compose(&a), 1e-9));
        }
    }

    #[test]
    fn poses_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("poses.csv");
        let poses: Vec<TimedPose> = (0..5)
            .map(|i| TimedPose {
                t: i as f64 * 0.1,
                pose: Pose2D::new(i as f64 / 3.0, -1.0 / (i as f64 + 1.0), 0.3 * i as f64),
            })
            .collect();
        write_poses_csv(&poses, &p).unwrap();
        assert_eq!(read_poses_csv(&p).unwrap(), poses);
        fs::write(&p, "t,x,y,theta\n1,2,3\n").unwrap();
        assert!(matches!(read_poses_csv(&p), Err(Error::Parse { .. })));
    }
}
