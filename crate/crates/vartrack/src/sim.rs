//! Synthetic multi-sensor scenario generator: ground-truth trajectories
//! driven by the same motion model as the filter, a reflection-center
//! template with aspect-dependent visibility and wheel Doppler spread,
//! sector clutter, and a staggered sensor schedule.
//!
//! Doppler values are emitted ego-compensated; the built-in scenarios keep
//! the ego vehicle stationary at the origin, so world and ego frames
//! coincide.

use serde::{Deserialize, Serialize};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal, Poisson};

use crate::error::{Error, Result};
use crate::geometry::{
    wrap_angle, Detection, Extent, KinematicState, SensorMount, VehicleState, OC_FRONT, OC_REAR,
};
use crate::io::{Scan, TruthFrame, TruthTarget};
use crate::particles::ctrv_step;
use crate::radar::DetectionProfile;

/// One reflection center in the normalized object frame.
#[derive(Debug, Clone, Copy)]
pub struct TemplatePoint {
    pub zx: f64,
    pub zy: f64,
    /// outward surface normal, drives aspect visibility
    pub normal: (f64, f64),
    /// standard deviation of the Doppler error this point adds
    pub doppler_sigma: f64,
    pub wheel: bool,
}

/// Reflection-center template for one vehicle class.
#[derive(Debug, Clone)]
pub struct ReflectionTemplate {
    pub points: Vec<TemplatePoint>,
    /// positional scatter around each center, normalized units
    pub position_sigma: f64,
}

const BODY_DOPPLER_SIGMA: f64 = 0.15;
const WHEEL_DOPPLER_SIGMA: f64 = 2.0;
/// Axle positions sit symmetrically around the footprint center.
const AXLE_HALF_SPAN: f64 = 0.27;

impl Default for ReflectionTemplate {
    fn default() -> Self {
        let d = std::f64::consts::FRAC_1_SQRT_2;
        let mut points = vec![
            TemplatePoint {
                zx: OC_FRONT,
                zy: 0.0,
                normal: (1.0, 0.0),
                doppler_sigma: BODY_DOPPLER_SIGMA,
                wheel: false,
            },
            TemplatePoint {
                zx: OC_REAR,
                zy: 0.0,
                normal: (-1.0, 0.0),
                doppler_sigma: BODY_DOPPLER_SIGMA,
                wheel: false,
            },
        ];
        for sy in [-1.0, 1.0] {
            points.push(TemplatePoint {
                zx: OC_FRONT,
                zy: 0.5 * sy,
                normal: (d, d * sy),
                doppler_sigma: BODY_DOPPLER_SIGMA,
                wheel: false,
            });
            points.push(TemplatePoint {
                zx: OC_REAR,
                zy: 0.5 * sy,
                normal: (-d, d * sy),
                doppler_sigma: BODY_DOPPLER_SIGMA,
                wheel: false,
            });
            let center = 0.5 * (OC_FRONT + OC_REAR);
            for sx in [-1.0, 1.0] {
                points.push(TemplatePoint {
                    zx: center + sx * AXLE_HALF_SPAN,
                    zy: 0.5 * sy,
                    normal: (0.0, sy),
                    doppler_sigma: WHEEL_DOPPLER_SIGMA,
                    wheel: true,
                });
            }
        }
        ReflectionTemplate { points, position_sigma: 0.1 }
    }
}

impl ReflectionTemplate {
    /// Same template with the wheel points removed.
    pub fn without_wheels(&self) -> Self {
        ReflectionTemplate {
            points: self.points.iter().copied().filter(|p| !p.wheel).collect(),
            position_sigma: self.position_sigma,
        }
    }

    /// Visibility weight of each point at the given aspect angle: the
    /// cosine between the outward normal and the line of sight toward the
    /// sensor, floored at zero.
    pub fn visibility(&self, aspect: f64) -> Vec<f64> {
        // unit vector from object to sensor in the object frame
        let u = (-aspect.cos(), aspect.sin());
        self.points
            .iter()
            .map(|p| (p.normal.0 * u.0 + p.normal.1 * u.1).max(0.0))
            .collect()
    }
}

/// Per-detection measurement noise of a sensor.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SensorNoise {
    pub sigma_d: f64,
    pub sigma_alpha: f64,
    pub sigma_vd: f64,
}

impl Default for SensorNoise {
    fn default() -> Self {
        SensorNoise { sigma_d: 0.1, sigma_alpha: 0.5f64.to_radians(), sigma_vd: 0.15 }
    }
}

/// A control segment: hold (v, omega) for a duration.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct ControlSegment {
    pub duration: f64,
    pub v: f64,
    pub omega: f64,
}

/// Integrate piecewise-constant controls from a start pose. The returned
/// states sample every `dt`, first state included, and are kinematically
/// consistent with the motion model by construction.
pub fn ctrv_trajectory(start: KinematicState, controls: &[ControlSegment], dt: f64) -> Vec<KinematicState> {
    assert!(dt > 0.0);
    let total: f64 = controls.iter().map(|c| c.duration).sum();
    let steps = (total / dt).round() as usize;
    let mut out = Vec::with_capacity(steps + 1);
    let mut state = start;
    let mut boundary = 0.0;
    let mut seg = 0;
    for k in 0..=steps {
        let t = k as f64 * dt;
        while seg < controls.len() && t >= boundary + controls[seg].duration - 0.5 * dt {
            boundary += controls[seg].duration;
            seg += 1;
        }
        let c = controls[seg.min(controls.len() - 1)];
        state.v = c.v;
        state.omega = c.omega;
        out.push(state);
        state = ctrv_step(&state, dt);
    }
    out
}

/// A complete ground-truth scenario sampled on the integration clock.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub name: String,
    /// per target: extent plus one kinematic state per integration step
    pub targets: Vec<(Extent, Vec<KinematicState>)>,
    /// ego pose and motion per integration step
    pub ego: Vec<KinematicState>,
    pub mounts: Vec<SensorMount>,
    pub duration: f64,
    /// integration step, one slot per sensor within a scan period
    pub dt: f64,
}

impl Scenario {
    fn steps(&self) -> usize {
        (self.duration / self.dt).round() as usize
    }

    fn index_at(&self, t: f64) -> usize {
        ((t / self.dt).round() as usize).min(self.steps())
    }

    pub fn target_at(&self, target: usize, t: f64) -> VehicleState {
        let (ext, traj) = &self.targets[target];
        VehicleState { kin: traj[self.index_at(t)], ext: *ext }
    }

    pub fn ego_at(&self, t: f64) -> KinematicState {
        self.ego[self.index_at(t)]
    }

    /// All scan instants with their sensor, staggered round-robin so each
    /// sensor runs at the common rate.
    pub fn scan_schedule(&self) -> Vec<(f64, usize)> {
        let rate = self.mounts[0].rate;
        let n = self.mounts.len();
        let scans = (self.duration * rate).floor() as usize;
        let mut out = Vec::with_capacity(scans * n);
        for k in 0..scans {
            for s in 0..n {
                out.push((k as f64 / rate + s as f64 / (n as f64 * rate), s));
            }
        }
        out
    }

    /// Largest deviation between each stored transition and the motion
    /// model, for the consistency invariant.
    pub fn max_kinematic_residual(&self) -> f64 {
        let mut worst = 0.0f64;
        for (_, traj) in &self.targets {
            for w in traj.windows(2) {
                let mut pred = ctrv_step(&w[0], self.dt);
                pred.v = w[1].v;
                pred.omega = w[1].omega;
                let r = (pred.x - w[1].x)
                    .abs()
                    .max((pred.y - w[1].y).abs())
                    .max(wrap_angle(pred.phi - w[1].phi).abs());
                worst = worst.max(r);
            }
        }
        worst
    }
}

/// Four radars at the corners of the ego car, each looking outward along
/// its diagonal. The spatial baseline between the corners gives every
/// target a small spread of viewing directions, which keeps tangential
/// motion observable even when the target recedes radially.
fn quad_mounts() -> Vec<SensorMount> {
    [(2.25, 0.9, 45.0), (2.25, -0.9, -45.0), (-2.25, 0.9, 135.0), (-2.25, -0.9, -135.0)]
        .into_iter()
        .map(|(x, y, yaw_deg): (f64, f64, f64)| SensorMount {
            x,
            y,
            yaw: yaw_deg.to_radians(),
            opening_angle: 100f64.to_radians(),
            max_range: 50.0,
            rate: 20.0,
        })
        .collect()
}

fn stationary_ego(steps: usize) -> Vec<KinematicState> {
    vec![KinematicState { x: 0.0, y: 0.0, phi: 0.0, v: 0.0, omega: 0.0 }; steps + 1]
}

const CAR: Extent = Extent { a: 1.8, b: 4.5 };

/// A car looping a figure eight in front of the stationary ego: two
/// overlapping radius-8 lobes with alternating turn direction, speed
/// 8 m/s, range to the ego between roughly 13 and 31 m. The yaw rate
/// ramps between +1 and -1 rad/s over two seconds rather than stepping,
/// so the turn-rate slope stays within what a plausible steering
/// actuator produces. The start pose drives radially away from the
/// forward sensor, which makes the first detections carry a strong
/// Doppler signature.
pub fn figure_eight(duration: f64) -> Scenario {
    // hold length solved numerically so each half cycle rotates the ramp
    // displacement into its own negation; with it the pattern stays put
    // instead of drifting one ramp length per cycle
    const HOLD: f64 = 10.68125;
    const RAMP: f64 = 2.0;
    const RAMP_STEPS: usize = 40;
    let mounts = quad_mounts();
    let dt = 1.0 / (mounts.len() as f64 * mounts[0].rate);
    let start = KinematicState { x: 20.0, y: 0.0, phi: 0.0, v: 8.0, omega: 1.0 };
    let mut controls = Vec::new();
    let mut sign = 1.0;
    // first hold is halved so the start pose sits mid-lobe
    let mut hold = 0.5 * HOLD;
    let mut left = duration;
    'blocks: loop {
        let h = hold.min(left);
        controls.push(ControlSegment { duration: h, v: 8.0, omega: sign });
        left -= h;
        if left <= 0.0 {
            break;
        }
        hold = HOLD;
        let step = RAMP / RAMP_STEPS as f64;
        for k in 0..RAMP_STEPS {
            let frac = (k as f64 + 0.5) / RAMP_STEPS as f64;
            let s = step.min(left);
            controls.push(ControlSegment { duration: s, v: 8.0, omega: sign * (1.0 - 2.0 * frac) });
            left -= s;
            if left <= 0.0 {
                break 'blocks;
            }
        }
        sign = -sign;
    }
    let traj = ctrv_trajectory(start, &controls, dt);
    let steps = traj.len() - 1;
    Scenario {
        name: "figure-eight".into(),
        targets: vec![(CAR, traj)],
        ego: stationary_ego(steps),
        mounts,
        duration,
        dt,
    }
}

/// Two cars approaching the ego head-on in staggered lanes, entering the
/// field of view one after the other and leaving it again.
pub fn oncoming_pair(duration: f64) -> Scenario {
    let mounts = quad_mounts();
    let dt = 1.0 / (mounts.len() as f64 * mounts[0].rate);
    let mk = |x: f64, y: f64| {
        ctrv_trajectory(
            KinematicState { x, y, phi: std::f64::consts::PI, v: 8.0, omega: 0.0 },
            &[ControlSegment { duration, v: 8.0, omega: 0.0 }],
            dt,
        )
    };
    let t1 = mk(55.0, 2.5);
    let t2 = mk(70.0, -2.5);
    let steps = t1.len() - 1;
    Scenario {
        name: "oncoming-pair".into(),
        targets: vec![(CAR, t1), (CAR, t2)],
        ego: stationary_ego(steps),
        mounts,
        duration,
        dt,
    }
}

/// Two cars abreast in adjacent lanes, 2.8 m apart center to center,
/// crossing the field of view together.
pub fn close_parallel(duration: f64) -> Scenario {
    let mounts = quad_mounts();
    let dt = 1.0 / (mounts.len() as f64 * mounts[0].rate);
    let mk = |x: f64, y: f64| {
        ctrv_trajectory(
            KinematicState { x, y, phi: 0.0, v: 8.0, omega: 0.0 },
            &[ControlSegment { duration, v: 8.0, omega: 0.0 }],
            dt,
        )
    };
    let t1 = mk(-40.0, 4.0);
    let t2 = mk(-40.0, 6.8);
    let steps = t1.len() - 1;
    Scenario {
        name: "close-parallel".into(),
        targets: vec![(CAR, t1), (CAR, t2)],
        ego: stationary_ego(steps),
        mounts,
        duration,
        dt,
    }
}

/// Build a named scenario with its default duration.
pub fn builtin_scenario(name: &str) -> Option<Scenario> {
    match name {
        "figure-eight" => Some(figure_eight(60.0)),
        "oncoming-pair" => Some(oncoming_pair(16.0)),
        "close-parallel" => Some(close_parallel(10.0)),
        "empty" => {
            let mounts = quad_mounts();
            let dt = 1.0 / (mounts.len() as f64 * mounts[0].rate);
            let duration = 10.0;
            let steps = (duration / dt).round() as usize;
            Some(Scenario {
                name: "empty".into(),
                targets: Vec::new(),
                ego: stationary_ego(steps),
                mounts,
                duration,
                dt,
            })
        }
        _ => None,
    }
}

/// Declarative scenario description for loading from a file: start poses
/// and piecewise-constant controls per target. Targets whose controls end
/// early hold their last control until the scenario ends.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ScenarioSpec {
    pub name: String,
    pub targets: Vec<TargetSpec>,
    #[serde(default)]
    pub mounts: Vec<SensorMount>,
}

/// One target of a [`ScenarioSpec`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TargetSpec {
    pub extent: Extent,
    pub start: KinematicState,
    pub controls: Vec<ControlSegment>,
}

impl ScenarioSpec {
    /// Sample the spec on the integration clock of its sensor set. The
    /// ego vehicle stays at the origin.
    pub fn build(&self) -> Result<Scenario> {
        let mounts = if self.mounts.is_empty() { quad_mounts() } else { self.mounts.clone() };
        for m in &mounts {
            if !(m.opening_angle > 0.0 && m.max_range > 0.0 && m.rate > 0.0) {
                return Err(Error::Format("sensor mount parameters must be positive".into()));
            }
        }
        let duration = self
            .targets
            .iter()
            .map(|t| t.controls.iter().map(|c| c.duration).sum::<f64>())
            .fold(0.0f64, f64::max);
        if !(duration > 0.0) {
            return Err(Error::Format("scenario needs at least one control segment".into()));
        }
        let dt = 1.0 / (mounts.len() as f64 * mounts[0].rate);
        let steps = (duration / dt).round() as usize;
        let targets = self
            .targets
            .iter()
            .map(|t| {
                let mut controls = t.controls.clone();
                let total: f64 = controls.iter().map(|c| c.duration).sum();
                if let Some(last) = controls.last_mut() {
                    last.duration += duration - total;
                }
                (t.extent, ctrv_trajectory(t.start, &controls, dt))
            })
            .collect();
        Ok(Scenario {
            name: self.name.clone(),
            targets,
            ego: stationary_ego(steps),
            mounts,
            duration,
            dt,
        })
    }
}

/// Everything the per-scan generator needs besides the scenario.
#[derive(Debug, Clone)]
pub struct SimOptions {
    pub template: ReflectionTemplate,
    pub noise: SensorNoise,
    pub profile: DetectionProfile,
    /// expected detections per visible target per scan
    pub lambda_t: f64,
    /// expected clutter points per scan
    pub lambda_c: f64,
}

impl Default for SimOptions {
    fn default() -> Self {
        SimOptions {
            template: ReflectionTemplate::default(),
            noise: SensorNoise::default(),
            profile: DetectionProfile::default(),
            lambda_t: 5.0,
            lambda_c: 5.0,
        }
    }
}

fn poisson<R: Rng + ?Sized>(lambda: f64, rng: &mut R) -> usize {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).unwrap().sample(rng) as usize
}

/// Generate one sensor scan at time t: per target in the field of view a
/// detection-probability coin, then a Poisson number of aspect-weighted
/// template draws denormalized into polar coordinates with sensor noise;
/// clutter appended; order shuffled.
pub fn simulate_scan<R: Rng + ?Sized>(
    scenario: &Scenario,
    t: f64,
    sensor: usize,
    opts: &SimOptions,
    rng: &mut R,
) -> Scan {
    let mount = &scenario.mounts[sensor];
    let ego = scenario.ego_at(t);
    let normal = |sigma: f64, rng: &mut R| -> f64 {
        if sigma > 0.0 {
            Normal::new(0.0, sigma).unwrap().sample(rng)
        } else {
            0.0
        }
    };
    let mut detections = Vec::new();
    let mut labels = Vec::new();
    for target in 0..scenario.targets.len() {
        let truth = scenario.target_at(target, t);
        if !mount.contains(truth.kin.x, truth.kin.y) {
            continue;
        }
        let pd = opts.profile.probability(&truth.kin, mount);
        if rng.gen::<f64>() >= pd {
            continue;
        }
        let sc = truth.in_sensor_frame(mount);
        let Ok(aspect) = sc.aspect_angle() else { continue };
        let weights = opts.template.visibility(aspect.angle());
        let total: f64 = weights.iter().sum();
        if total <= 1e-12 {
            continue;
        }
        for _ in 0..poisson(opts.lambda_t, rng) {
            let mut pick = rng.gen::<f64>() * total;
            let mut idx = 0;
            for (i, w) in weights.iter().enumerate() {
                pick -= w;
                if pick <= 0.0 {
                    idx = i;
                    break;
                }
            }
            let point = &opts.template.points[idx];
            let zx = point.zx + normal(opts.template.position_sigma, rng);
            let zy = point.zy + normal(opts.template.position_sigma, rng);
            // denormalize into the sensor frame
            let (sin, cos) = sc.kin.phi.sin_cos();
            let ox = zx * sc.ext.b;
            let oy = zy * sc.ext.a;
            let px = sc.kin.x + cos * ox - sin * oy;
            let py = sc.kin.y + sin * ox + cos * oy;
            let alpha_true = py.atan2(px);
            let d = px.hypot(py) + normal(opts.noise.sigma_d, rng);
            let alpha = wrap_angle(alpha_true + normal(opts.noise.sigma_alpha, rng));
            let vd = sc.kin.expected_doppler(alpha_true)
                + normal(point.doppler_sigma, rng)
                + normal(opts.noise.sigma_vd, rng);
            if d <= 0.0 {
                continue;
            }
            detections.push(Detection { d, alpha, vd });
            labels.push(Some(target));
        }
    }
    for _ in 0..poisson(opts.lambda_c, rng) {
        // uniform over the sector area, Doppler from the clutter mixture
        let d = mount.max_range * rng.gen::<f64>().sqrt();
        let alpha = rng.gen_range(-0.5..0.5) * mount.opening_angle;
        let vd = if rng.gen::<f64>() < 0.7 {
            normal(0.5, rng)
        } else {
            rng.gen_range(-20.0..20.0)
        };
        detections.push(Detection { d, alpha, vd });
        labels.push(None);
    }
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.shuffle(rng);
    Scan {
        t,
        sensor,
        detections: order.iter().map(|&i| detections[i]).collect(),
        labels: Some(order.iter().map(|&i| labels[i]).collect()),
        ego: Some(ego),
    }
}

/// Run the full schedule of a scenario: the scan stream plus one
/// time-aligned truth frame per scan instant.
pub fn generate_corpus<R: Rng + ?Sized>(
    scenario: &Scenario,
    opts: &SimOptions,
    rng: &mut R,
) -> (Vec<Scan>, Vec<TruthFrame>) {
    let mut scans = Vec::new();
    let mut truths = Vec::new();
    for (t, sensor) in scenario.scan_schedule() {
        scans.push(simulate_scan(scenario, t, sensor, opts, rng));
        truths.push(TruthFrame {
            t,
            targets: (0..scenario.targets.len())
                .map(|i| TruthTarget::from_state(i, &scenario.target_at(i, t)))
                .collect(),
            ego: scenario.ego_at(t),
        });
    }
    (scans, truths)
}
