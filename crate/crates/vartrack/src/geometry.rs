//! Coordinate frames and measurement transforms.
//!
//! Three planar frames are used throughout. The vehicle frame (VC) is fixed
//! to the ego vehicle's rear-axle center, x forward. Each radar defines a
//! sensor frame (SC) by its mounting pose in VC. Every tracked vehicle
//! defines an object frame (OC) with its origin at the vehicle's rear-axle
//! center and x along the heading.
//!
//! A raw detection is a range/azimuth/Doppler triple. Pairing it with a
//! vehicle state reduces it to an extent-normalized object-frame point plus
//! a Doppler error, which is the representation the measurement model is
//! learned in: the x position is divided by the vehicle length, the y
//! position by the width, and the expected Doppler of a body-fixed point at
//! the detected bearing is subtracted from the measured Doppler.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Normalized object-frame x of the front bumper. The rear axle sits at 77%
/// of the vehicle length measured from the front, so the box spans
/// [`OC_REAR`], [`OC_FRONT`] along x and ±0.5 along y.
pub const OC_FRONT: f64 = 0.77;
/// Normalized object-frame x of the rear bumper.
pub const OC_REAR: f64 = -0.23;

/// Wrap an angle to (−π, π]. Ties at −π map to +π.
pub fn wrap_angle(theta: f64) -> f64 {
    let w = theta.rem_euclid(std::f64::consts::TAU);
    if w > std::f64::consts::PI {
        w - std::f64::consts::TAU
    } else {
        w
    }
}

/// Rear-axle pose and motion of a vehicle: position, heading, speed along
/// the heading, and yaw rate.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KinematicState {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
    pub v: f64,
    pub omega: f64,
}

/// Vehicle footprint: width `a`, length `b`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Extent {
    pub a: f64,
    pub b: f64,
}

/// Kinematic state plus extent.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct VehicleState {
    pub kin: KinematicState,
    pub ext: Extent,
}

/// One radar detection in polar sensor coordinates. Positive Doppler means
/// the scatterer is receding from the sensor.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub d: f64,
    pub alpha: f64,
    pub vd: f64,
}

/// Sensor mounting pose in VC plus field-of-view parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SensorMount {
    pub x: f64,
    pub y: f64,
    pub yaw: f64,
    pub opening_angle: f64,
    pub max_range: f64,
    pub rate: f64,
}

/// Detection mapped into the normalized object frame of a vehicle state:
/// scaled OC position and Doppler error.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedMeasurement {
    pub zx: f64,
    pub zy: f64,
    pub zd: f64,
}

/// Angle under which the sensor sees a vehicle, wrapped to (−π, π].
/// 0 is a dead-astern view, ±π a head-on view, −π/2 shows the right side.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AspectAngle(f64);

impl AspectAngle {
    pub fn new(raw: f64) -> Self {
        AspectAngle(wrap_angle(raw))
    }

    pub fn angle(self) -> f64 {
        self.0
    }
}

/// Ego motion over one update interval: speed and yaw rate, plus the pose
/// delta of the current ego frame expressed in the previous one.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct EgoMotion {
    pub v: f64,
    pub omega: f64,
    pub dx: f64,
    pub dy: f64,
    pub dyaw: f64,
}

impl KinematicState {
    /// Express this state in the frame of the given sensor. Speed and yaw
    /// rate are frame-independent scalars and stay unchanged.
    pub fn in_sensor_frame(&self, mount: &SensorMount) -> KinematicState {
        let (s, c) = mount.yaw.sin_cos();
        let dx = self.x - mount.x;
        let dy = self.y - mount.y;
        KinematicState {
            x: c * dx + s * dy,
            y: -s * dx + c * dy,
            phi: wrap_angle(self.phi - mount.yaw),
            v: self.v,
            omega: self.omega,
        }
    }

    /// Doppler velocity a body-fixed point of this vehicle produces at
    /// bearing `alpha`. The state must be expressed in the sensor frame.
    ///
    /// The full rigid-body radial velocity of a point depends on where on
    /// the body it sits, but along a fixed bearing that dependence drops
    /// out and only the bearing itself remains:
    /// cos(α)·s₁ + sin(α)·s₂ with s₁ = v cos φ + ω y and s₂ = v sin φ − ω x.
    pub fn expected_doppler(&self, alpha: f64) -> f64 {
        let s1 = self.v * self.phi.cos() + self.omega * self.y;
        let s2 = self.v * self.phi.sin() - self.omega * self.x;
        alpha.cos() * s1 + alpha.sin() * s2
    }

    /// Aspect angle of this vehicle as seen from the sensor origin. The
    /// state must be expressed in the sensor frame.
    pub fn aspect_angle(&self) -> Result<AspectAngle> {
        if self.x.hypot(self.y) < 1e-12 {
            return Err(Error::DegeneratePosition);
        }
        Ok(AspectAngle::new(self.phi - self.y.atan2(self.x)))
    }

    /// Move this state from the previous ego frame into the current one.
    pub fn retarget(&self, ego: &EgoMotion) -> KinematicState {
        let (s, c) = ego.dyaw.sin_cos();
        let dx = self.x - ego.dx;
        let dy = self.y - ego.dy;
        KinematicState {
            x: c * dx + s * dy,
            y: -s * dx + c * dy,
            phi: wrap_angle(self.phi - ego.dyaw),
            v: self.v,
            omega: self.omega,
        }
    }
}

impl VehicleState {
    pub fn in_sensor_frame(&self, mount: &SensorMount) -> VehicleState {
        VehicleState {
            kin: self.kin.in_sensor_frame(mount),
            ext: self.ext,
        }
    }

    pub fn retarget(&self, ego: &EgoMotion) -> VehicleState {
        VehicleState {
            kin: self.kin.retarget(ego),
            ext: self.ext,
        }
    }

    /// Map a detection into the normalized object frame of this state.
    /// Both must be expressed in the same sensor frame.
    pub fn reduce_measurement(&self, z: &Detection) -> ReducedMeasurement {
        let px = z.d * z.alpha.cos();
        let py = z.d * z.alpha.sin();
        let (s, c) = self.kin.phi.sin_cos();
        let dx = px - self.kin.x;
        let dy = py - self.kin.y;
        ReducedMeasurement {
            zx: (c * dx + s * dy) / self.ext.b,
            zy: (-s * dx + c * dy) / self.ext.a,
            zd: z.vd - self.kin.expected_doppler(z.alpha),
        }
    }

    /// Invert [`reduce_measurement`](Self::reduce_measurement) for the same
    /// state. Fails when the reconstructed point falls onto the sensor
    /// origin, where bearing and thus Doppler offset are undefined.
    pub fn inverse_reduce(&self, zp: &ReducedMeasurement) -> Result<Detection> {
        let ox = zp.zx * self.ext.b;
        let oy = zp.zy * self.ext.a;
        let (s, c) = self.kin.phi.sin_cos();
        let px = c * ox - s * oy + self.kin.x;
        let py = s * ox + c * oy + self.kin.y;
        let d = px.hypot(py);
        if d < 1e-12 {
            return Err(Error::DegeneratePosition);
        }
        let alpha = py.atan2(px);
        Ok(Detection {
            d,
            alpha,
            vd: zp.zd + self.kin.expected_doppler(alpha),
        })
    }

    /// Aspect angle of this vehicle; see [`KinematicState::aspect_angle`].
    pub fn aspect_angle(&self) -> Result<AspectAngle> {
        self.kin.aspect_angle()
    }
}

impl SensorMount {
    /// Velocity of the sensor origin, expressed in the sensor frame, for an
    /// ego vehicle moving with the given speed and yaw rate.
    pub fn origin_velocity(&self, ego: &EgoMotion) -> (f64, f64) {
        let vx = ego.v - ego.omega * self.y;
        let vy = ego.omega * self.x;
        let (s, c) = self.yaw.sin_cos();
        (c * vx + s * vy, -s * vx + c * vy)
    }

    /// Whether a VC point lies inside the nominal field of view.
    pub fn contains(&self, x: f64, y: f64) -> bool {
        let (sx, sy) = {
            let (s, c) = self.yaw.sin_cos();
            let dx = x - self.x;
            let dy = y - self.y;
            (c * dx + s * dy, -s * dx + c * dy)
        };
        let d = sx.hypot(sy);
        d <= self.max_range && wrap_angle(sy.atan2(sx)).abs() <= 0.5 * self.opening_angle
    }
}

/// Remove the ego vehicle's own contribution from a measured Doppler. The
/// ego motion moves the sensor origin; a stationary scatterer then shows a
/// Doppler of minus the projection of that origin velocity onto the bearing,
/// so adding the projection back recovers the over-ground Doppler.
pub fn compensate_ego_doppler(z: &Detection, mount: &SensorMount, ego: &EgoMotion) -> Detection {
    let (vsx, vsy) = mount.origin_velocity(ego);
    Detection {
        d: z.d,
        alpha: z.alpha,
        vd: z.vd + vsx * z.alpha.cos() + vsy * z.alpha.sin(),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::prelude::*;
    use rand_chacha::ChaCha12Rng;

    const PI: f64 = std::f64::consts::PI;

    fn mount(x: f64, y: f64, yaw: f64) -> SensorMount {
        SensorMount {
            x,
            y,
            yaw,
            opening_angle: 170f64.to_radians(),
            max_range: 43.0,
            rate: 20.0,
        }
    }

    fn state(x: f64, y: f64, phi: f64, v: f64, omega: f64, a: f64, b: f64) -> VehicleState {
        VehicleState {
            kin: KinematicState { x, y, phi, v, omega },
            ext: Extent { a, b },
        }
    }

    #[test]
    fn wrap_angle_range_and_ties() {
        assert_eq!(wrap_angle(PI), PI);
        assert_eq!(wrap_angle(-PI), PI);
        assert!((wrap_angle(3.0 * PI) - PI).abs() < 1e-12);
        assert!((wrap_angle(-0.25) + 0.25).abs() < 1e-15);
        for k in -7..=7 {
            let w = wrap_angle(0.3 + k as f64 * std::f64::consts::TAU);
            assert!((w - 0.3).abs() < 1e-9);
            assert!(w > -PI && w <= PI);
        }
    }

    #[test]
    fn sensor_frame_identity_translation_rotation() {
        let s = state(3.0, 1.0, 0.4, 5.0, 0.1, 1.8, 4.5);
        let id = s.in_sensor_frame(&mount(0.0, 0.0, 0.0));
        assert_eq!(id, s);

        let t = s.in_sensor_frame(&mount(1.0, 0.0, 0.0));
        assert!((t.kin.x - 2.0).abs() < 1e-15);
        assert!((t.kin.y - 1.0).abs() < 1e-15);

        let r = state(0.0, 1.0, 0.0, 0.0, 0.0, 1.8, 4.5).in_sensor_frame(&mount(0.0, 0.0, PI / 2.0));
        assert!((r.kin.x - 1.0).abs() < 1e-12);
        assert!(r.kin.y.abs() < 1e-12);
        assert!((r.kin.phi + PI / 2.0).abs() < 1e-12);
    }

    #[test]
    fn expected_doppler_cases() {
        let k = KinematicState { x: 10.0, y: 0.0, phi: 0.0, v: 0.0, omega: 0.0 };
        assert_eq!(k.expected_doppler(0.7), 0.0);

        let k = KinematicState { x: 10.0, y: 0.0, phi: PI, v: 5.0, omega: 0.0 };
        assert!((k.expected_doppler(0.0) + 5.0).abs() < 1e-12);

        let k = KinematicState { x: 0.0, y: 2.0, phi: 0.0, v: 0.0, omega: 1.0 };
        assert!((k.expected_doppler(0.0) - 2.0).abs() < 1e-12);
    }

    #[test]
    fn expected_doppler_linear_in_rates() {
        let mut rng = ChaCha12Rng::seed_from_u64(7);
        for _ in 0..200 {
            let x = rng.gen_range(-20.0..20.0);
            let y = rng.gen_range(-20.0..20.0);
            let phi = rng.gen_range(-PI..PI);
            let alpha = rng.gen_range(-PI..PI);
            let (v1, w1) = (rng.gen_range(-9.0..9.0), rng.gen_range(-2.0..2.0));
            let (v2, w2) = (rng.gen_range(-9.0..9.0), rng.gen_range(-2.0..2.0));
            let (ca, cb) = (rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0));
            let at = |v: f64, omega: f64| {
                KinematicState { x, y, phi, v, omega }.expected_doppler(alpha)
            };
            let lhs = at(ca * v1 + cb * v2, ca * w1 + cb * w2);
            let rhs = ca * at(v1, w1) + cb * at(v2, w2);
            assert!((lhs - rhs).abs() < 1e-9);
        }
    }

    #[test]
    fn reduce_direct_division() {
        // detection sitting at OC (2, -1): for this pose that is SC (7, -1)
        let s = state(5.0, 0.0, 0.0, 0.0, 0.0, 2.0, 4.0);
        let z = Detection {
            d: 50.0f64.sqrt(),
            alpha: (-1.0f64).atan2(7.0),
            vd: 0.0,
        };
        let zp = s.reduce_measurement(&z);
        assert!((zp.zx - 0.5).abs() < 1e-12);
        assert!((zp.zy + 0.5).abs() < 1e-12);
        assert!((zp.zd - 0.0).abs() < 1e-12);
    }

    #[test]
    fn zero_doppler_error_when_matching_expectation() {
        let s = state(12.0, -3.0, 0.9, 6.0, 0.4, 1.8, 4.6);
        let alpha = 0.2;
        let z = Detection { d: 11.0, alpha, vd: s.kin.expected_doppler(alpha) };
        assert!(s.reduce_measurement(&z).zd.abs() < 1e-12);
    }

    #[test]
    fn aspect_angle_views() {
        let ahead = |phi: f64| {
            state(15.0, 0.0, phi, 0.0, 0.0, 1.8, 4.5).aspect_angle().unwrap().angle()
        };
        assert!(ahead(0.0).abs() < 1e-12);
        assert!((ahead(PI) - PI).abs() < 1e-12);
        let diag = state(3.0, 3.0, PI / 4.0, 0.0, 0.0, 1.8, 4.5);
        assert!(diag.aspect_angle().unwrap().angle().abs() < 1e-12);

        // invariant under uniform scaling of the position
        for scale in [0.5, 2.0, 17.0] {
            let s = state(3.0 * scale, 3.0 * scale, PI / 4.0, 0.0, 0.0, 1.8, 4.5);
            assert!(s.aspect_angle().unwrap().angle().abs() < 1e-12);
        }

        let origin = state(0.0, 0.0, 1.0, 0.0, 0.0, 1.8, 4.5);
        assert!(matches!(origin.aspect_angle(), Err(Error::DegeneratePosition)));
    }

    #[test]
    fn inverse_reduce_simple() {
        let s = state(10.0, 0.0, 0.0, 0.0, 0.0, 1.8, 4.5);
        let z = s
            .inverse_reduce(&ReducedMeasurement { zx: 0.0, zy: 0.0, zd: 0.0 })
            .unwrap();
        assert!((z.d - 10.0).abs() < 1e-12);
        assert!(z.alpha.abs() < 1e-12);
        assert!(z.vd.abs() < 1e-12);

        let at_origin = state(0.0, 0.0, 0.0, 0.0, 0.0, 1.8, 4.5);
        assert!(matches!(
            at_origin.inverse_reduce(&ReducedMeasurement { zx: 0.0, zy: 0.0, zd: 0.0 }),
            Err(Error::DegeneratePosition)
        ));
    }

    #[test]
    fn reduce_inverse_round_trip_fuzz() {
        let mut rng = ChaCha12Rng::seed_from_u64(42);
        let mut checked = 0;
        while checked < 10_000 {
            let s = state(
                rng.gen_range(-30.0..30.0),
                rng.gen_range(-30.0..30.0),
                rng.gen_range(-PI..PI),
                rng.gen_range(-10.0..10.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(0.5..3.0),
                rng.gen_range(1.0..8.0),
            );
            let z = Detection {
                d: rng.gen_range(0.3..45.0),
                alpha: rng.gen_range(-PI..PI),
                vd: rng.gen_range(-20.0..20.0),
            };
            let zp = s.reduce_measurement(&z);
            let back = s.inverse_reduce(&zp).unwrap();
            assert!((back.d - z.d).abs() < 1e-9);
            assert!(wrap_angle(back.alpha - z.alpha).abs() < 1e-9);
            assert!((back.vd - z.vd).abs() < 1e-9);

            // and the other direction, starting from a reduced point
            let zp0 = ReducedMeasurement {
                zx: rng.gen_range(-2.0..2.0),
                zy: rng.gen_range(-2.0..2.0),
                zd: rng.gen_range(-5.0..5.0),
            };
            if let Ok(z0) = s.inverse_reduce(&zp0) {
                let zp1 = s.reduce_measurement(&z0);
                assert!((zp1.zx - zp0.zx).abs() < 1e-9);
                assert!((zp1.zy - zp0.zy).abs() < 1e-9);
                assert!((zp1.zd - zp0.zd).abs() < 1e-9);
            }
            checked += 1;
        }
    }

    // The polar-measurement density factorizations elsewhere in the crate
    // rest on |det ∂z/∂z′| = ab/d for the inverse map; check the analytic
    // value against central differences.
    #[test]
    fn inverse_jacobian_matches_finite_differences() {
        let mut rng = ChaCha12Rng::seed_from_u64(3);
        for _ in 0..50 {
            let s = state(
                rng.gen_range(-20.0..20.0),
                rng.gen_range(2.0..20.0),
                rng.gen_range(-PI..PI),
                rng.gen_range(-8.0..8.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(1.0..2.5),
                rng.gen_range(2.5..7.0),
            );
            let zp = ReducedMeasurement {
                zx: rng.gen_range(-0.5..0.8),
                zy: rng.gen_range(-0.6..0.6),
                zd: rng.gen_range(-3.0..3.0),
            };
            let h = 1e-6;
            let f = |zx: f64, zy: f64, zd: f64| {
                let z = s.inverse_reduce(&ReducedMeasurement { zx, zy, zd }).unwrap();
                [z.d, z.alpha, z.vd]
            };
            let mut jac = [[0.0; 3]; 3];
            for (col, delta) in [(0, [h, 0.0, 0.0]), (1, [0.0, h, 0.0]), (2, [0.0, 0.0, h])] {
                let plus = f(zp.zx + delta[0], zp.zy + delta[1], zp.zd + delta[2]);
                let minus = f(zp.zx - delta[0], zp.zy - delta[1], zp.zd - delta[2]);
                for row in 0..3 {
                    let diff = if row == 1 {
                        wrap_angle(plus[row] - minus[row])
                    } else {
                        plus[row] - minus[row]
                    };
                    jac[row][col] = diff / (2.0 * h);
                }
            }
            let det = jac[0][0] * (jac[1][1] * jac[2][2] - jac[1][2] * jac[2][1])
                - jac[0][1] * (jac[1][0] * jac[2][2] - jac[1][2] * jac[2][0])
                + jac[0][2] * (jac[1][0] * jac[2][1] - jac[1][1] * jac[2][0]);
            let d = f(zp.zx, zp.zy, zp.zd)[0];
            let analytic = s.ext.a * s.ext.b / d;
            assert!(
                (det.abs() - analytic).abs() <= 1e-5 * analytic,
                "det {det} vs {analytic}"
            );
        }
    }

    #[test]
    fn ego_doppler_compensation() {
        let m = mount(0.0, 0.0, 0.0);
        let still = EgoMotion::default();
        let z = Detection { d: 12.0, alpha: 0.3, vd: -4.0 };
        assert_eq!(compensate_ego_doppler(&z, &m, &still), z);

        // ego driving 10 m/s straight at a stationary scatterer dead ahead
        let ego = EgoMotion { v: 10.0, omega: 0.0, dx: 0.0, dy: 0.0, dyaw: 0.0 };
        let raw = Detection { d: 20.0, alpha: 0.0, vd: -10.0 };
        let fixed = compensate_ego_doppler(&raw, &m, &ego);
        assert!(fixed.vd.abs() < 1e-12);
        assert_eq!(fixed.d, raw.d);
        assert_eq!(fixed.alpha, raw.alpha);
    }

    #[test]
    fn retarget_cases() {
        let s = state(8.0, 2.0, 0.5, 4.0, 0.2, 1.8, 4.5);
        assert_eq!(s.retarget(&EgoMotion::default()), s);

        let fwd = EgoMotion { v: 1.0, omega: 0.0, dx: 1.0, dy: 0.0, dyaw: 0.0 };
        assert!((s.retarget(&fwd).kin.x - 7.0).abs() < 1e-12);

        // retargeting by a delta and then by its inverse is the identity
        let ego = EgoMotion { v: 3.0, omega: 0.4, dx: 0.9, dy: 0.2, dyaw: 0.3 };
        let (sn, cn) = ego.dyaw.sin_cos();
        let inv = EgoMotion {
            v: 3.0,
            omega: 0.4,
            dx: -(cn * ego.dx + sn * ego.dy),
            dy: -(-sn * ego.dx + cn * ego.dy),
            dyaw: -ego.dyaw,
        };
        let back = s.retarget(&ego).retarget(&inv);
        assert!((back.kin.x - s.kin.x).abs() < 1e-12);
        assert!((back.kin.y - s.kin.y).abs() < 1e-12);
        assert!((back.kin.phi - s.kin.phi).abs() < 1e-12);
    }

    // two successive retargets equal one retarget by the composed pose delta
    #[test]
    fn retarget_composition() {
        let mut rng = ChaCha12Rng::seed_from_u64(11);
        for _ in 0..200 {
            let s = state(
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-20.0..20.0),
                rng.gen_range(-PI..PI),
                0.0,
                0.0,
                1.8,
                4.5,
            );
            let e1 = EgoMotion {
                v: 0.0,
                omega: 0.0,
                dx: rng.gen_range(-2.0..2.0),
                dy: rng.gen_range(-2.0..2.0),
                dyaw: rng.gen_range(-1.0..1.0),
            };
            let e2 = EgoMotion {
                v: 0.0,
                omega: 0.0,
                dx: rng.gen_range(-2.0..2.0),
                dy: rng.gen_range(-2.0..2.0),
                dyaw: rng.gen_range(-1.0..1.0),
            };
            // compose: pose of frame2 in frame0
            let (s1, c1) = e1.dyaw.sin_cos();
            let comp = EgoMotion {
                v: 0.0,
                omega: 0.0,
                dx: e1.dx + c1 * e2.dx - s1 * e2.dy,
                dy: e1.dy + s1 * e2.dx + c1 * e2.dy,
                dyaw: e1.dyaw + e2.dyaw,
            };
            let two = s.retarget(&e1).retarget(&e2);
            let one = s.retarget(&comp);
            assert!((two.kin.x - one.kin.x).abs() < 1e-10);
            assert!((two.kin.y - one.kin.y).abs() < 1e-10);
            assert!(wrap_angle(two.kin.phi - one.kin.phi).abs() < 1e-10);
        }
    }

    #[test]
    fn fov_membership() {
        let m = mount(0.0, 0.0, 0.0);
        assert!(m.contains(10.0, 0.0));
        assert!(m.contains(5.0, 5.0));
        assert!(!m.contains(44.0, 0.0));
        assert!(!m.contains(-1.0, 0.0)); // behind a 170 degree sensor
    }
}
