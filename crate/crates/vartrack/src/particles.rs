//! Single-object state densities. Kinematics are carried by particles and
//! pushed through a constant-turn-rate-and-velocity model with uniform
//! process noise; the extent rides along as a small discrete hypothesis
//! set per particle that is expanded during prediction and collapsed to
//! its likelihood-weighted mean during the update.

use serde::{Deserialize, Serialize};
use rand::Rng;

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Detection, Extent, KinematicState, SensorMount};
use crate::math::log_sum_exp;
use crate::radar::{ClutterModel, DetectionProfile, RadarEvaluator};

/// Conditional mixture components this far below the dominant one are
/// dropped during particle updates. The same truncated conditional feeds
/// both the weight update and the association costs, so the truncation
/// cancels out of posterior comparisons.
pub const COMPONENT_PRUNE_LOG: f64 = -20.72326583694641; // ln 1e-9

/// Discrete extent perturbation applied per prediction step.
pub const EXTENT_STEP: f64 = 0.1;

/// One weighted kinematic sample plus its discrete extent hypotheses.
/// The hypothesis set is a singleton except between prediction and the
/// following update, where it holds up to nine variants with implicit
/// uniform weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Particle {
    pub kin: KinematicState,
    pub weight: f64,
    pub extents: Vec<Extent>,
}

/// Per-second half-widths of the uniform process noise, scaled linearly
/// by the prediction interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseBounds {
    pub position: f64,
    pub angle: f64,
    pub speed: f64,
    pub yaw_rate: f64,
}

impl Default for NoiseBounds {
    fn default() -> Self {
        NoiseBounds { position: 3.0, angle: 0.698, speed: 9.0, yaw_rate: 3.0 }
    }
}

impl NoiseBounds {
    pub const ZERO: NoiseBounds =
        NoiseBounds { position: 0.0, angle: 0.0, speed: 0.0, yaw_rate: 0.0 };
}

/// Feasible vehicle footprints: box bounds on width and length plus a
/// band on the length-to-width ratio.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExtentConstraints {
    pub a_min: f64,
    pub a_max: f64,
    pub b_min: f64,
    pub b_max: f64,
    pub ratio_min: f64,
    pub ratio_max: f64,
}

impl Default for ExtentConstraints {
    fn default() -> Self {
        ExtentConstraints {
            a_min: 1.4,
            a_max: 2.5,
            b_min: 2.5,
            b_max: 7.0,
            ratio_min: 1.7,
            ratio_max: 3.5,
        }
    }
}

impl ExtentConstraints {
    pub fn contains(&self, ext: Extent) -> bool {
        let ratio = ext.b / ext.a;
        ext.a >= self.a_min
            && ext.a <= self.a_max
            && ext.b >= self.b_min
            && ext.b <= self.b_max
            && ratio >= self.ratio_min
            && ratio <= self.ratio_max
    }

    /// Nearest feasible extent. The box part is a clamp; a ratio violation
    /// projects onto the offending ratio boundary line first.
    pub fn project(&self, ext: Extent) -> Extent {
        let mut a = ext.a.clamp(self.a_min, self.a_max);
        let mut b = ext.b.clamp(self.b_min, self.b_max);
        // target ratio is nudged just inside the band so the projected
        // point satisfies contains() despite rounding
        let ratio = b / a;
        let bound = if ratio < self.ratio_min {
            Some(self.ratio_min * (1.0 + 1e-12))
        } else if ratio > self.ratio_max {
            Some(self.ratio_max * (1.0 - 1e-12))
        } else {
            None
        };
        if let Some(r) = bound {
            a = ((a + r * b) / (1.0 + r * r))
                .clamp(self.a_min.max(self.b_min / r), self.a_max.min(self.b_max / r));
            b = r * a;
        }
        Extent { a, b }
    }
}

pub fn constrain_extent(ext: Extent) -> bool {
    ExtentConstraints::default().contains(ext)
}

/// Particle count schedule: a track is born with a large cloud that is
/// stepped down at each resampling until it reaches the steady budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ParticleBudget {
    pub birth: usize,
    pub step: usize,
    pub steady: usize,
}

impl Default for ParticleBudget {
    fn default() -> Self {
        ParticleBudget { birth: 900, step: 100, steady: 300 }
    }
}

impl ParticleBudget {
    pub fn next_target(&self, count: usize) -> usize {
        count.saturating_sub(self.step).max(self.steady)
    }
}

/// Constant-turn-rate-and-velocity step. Near zero yaw rate the exact
/// v/omega form loses precision, so a second-order expansion takes over;
/// the two branches agree to well below 1e-9 at the switch.
pub fn ctrv_step(xi: &KinematicState, dt: f64) -> KinematicState {
    let (x, y) = if xi.omega.abs() >= 1e-6 {
        let r = xi.v / xi.omega;
        (
            xi.x + r * ((xi.phi + xi.omega * dt).sin() - xi.phi.sin()),
            xi.y + r * (xi.phi.cos() - (xi.phi + xi.omega * dt).cos()),
        )
    } else {
        let (sin, cos) = xi.phi.sin_cos();
        let vdt = xi.v * dt;
        let half = 0.5 * xi.v * xi.omega * dt * dt;
        (xi.x + vdt * cos - half * sin, xi.y + vdt * sin + half * cos)
    };
    KinematicState { x, y, phi: wrap_angle(xi.phi + xi.omega * dt), v: xi.v, omega: xi.omega }
}

fn sample_half_width<R: Rng + ?Sized>(rng: &mut R, w: f64) -> f64 {
    if w > 0.0 {
        rng.gen_range(-w..w)
    } else {
        0.0
    }
}

/// Mean of a particle's extent hypotheses, projected back into the
/// feasible set (the mean of box-feasible points can still break the
/// ratio band).
fn mean_extent(extents: &[Extent], constraints: &ExtentConstraints) -> Extent {
    let n = extents.len() as f64;
    let a = extents.iter().map(|e| e.a).sum::<f64>() / n;
    let b = extents.iter().map(|e| e.b).sum::<f64>() / n;
    constraints.project(Extent { a, b })
}

/// Propagate every particle by one interval: CTRV step, additive uniform
/// noise scaled by `dt`, then expansion of the (collapsed) extent into
/// feasible variants on the `extent_step` grid (width and length each
/// stepped by one of -step, 0, +step).
pub fn predict_particles<R: Rng + ?Sized>(
    particles: &[Particle],
    dt: f64,
    noise: &NoiseBounds,
    extent_step: f64,
    constraints: &ExtentConstraints,
    rng: &mut R,
) -> Vec<Particle> {
    let mut out = Vec::with_capacity(particles.len());
    for p in particles {
        let mut kin = ctrv_step(&p.kin, dt);
        kin.x += sample_half_width(rng, noise.position * dt);
        kin.y += sample_half_width(rng, noise.position * dt);
        kin.phi = wrap_angle(kin.phi + sample_half_width(rng, noise.angle * dt));
        // v stays nonnegative: backward motion is the flipped-heading state,
        // keeping it out removes a mirror mode the Doppler cannot kill fast
        kin.v = (kin.v + sample_half_width(rng, noise.speed * dt)).max(0.0);
        kin.omega += sample_half_width(rng, noise.yaw_rate * dt);

        let center = mean_extent(&p.extents, constraints);
        let mut extents = Vec::with_capacity(9);
        if extent_step > 0.0 {
            for da in [-extent_step, 0.0, extent_step] {
                for db in [-extent_step, 0.0, extent_step] {
                    let cand = Extent { a: center.a + da, b: center.b + db };
                    if constraints.contains(cand) {
                        extents.push(cand);
                    }
                }
            }
        }
        if extents.is_empty() {
            extents.push(center);
        }
        out.push(Particle { kin, weight: p.weight, extents });
    }
    out
}

/// Reweight particles by the object-vs-clutter likelihood ratio of a
/// detection cluster, including the state-dependent detection
/// probability. Per particle the ratio is averaged over its extent
/// hypotheses, which are then collapsed to their likelihood-weighted
/// mean. Returns the renormalized particles and the log of the total
/// pre-normalization mass, the particle estimate of the cluster
/// likelihood integral.
pub static UP_STATS: [std::sync::atomic::AtomicU64; 4] = [
    std::sync::atomic::AtomicU64::new(0),
    std::sync::atomic::AtomicU64::new(0),
    std::sync::atomic::AtomicU64::new(0),
    std::sync::atomic::AtomicU64::new(0),
];

pub fn update_particles(
    particles: &[Particle],
    cluster: &[Detection],
    model: &RadarEvaluator,
    clutter: &ClutterModel,
    profile: &DetectionProfile,
    mount: &SensorMount,
) -> Result<(Vec<Particle>, f64)> {
    if particles.is_empty() {
        return Err(Error::EmptyInput("particle set"));
    }
    if cluster.is_empty() {
        return Err(Error::EmptyInput("detection cluster"));
    }
    use std::sync::atomic::Ordering::Relaxed;
    UP_STATS[0].fetch_add(1, Relaxed);
    UP_STATS[1].fetch_add(particles.len() as u64, Relaxed);
    UP_STATS[2].fetch_add((particles.len() * cluster.len()) as u64, Relaxed);
    let constraints = ExtentConstraints::default();
    let n = cluster.len() as f64;
    let ratio_base = -model.lambda_t() + n * (model.ln_lambda_t() - clutter.lambda_c.ln());

    struct Cached {
        px: f64,
        py: f64,
        alpha: f64,
        vd: f64,
        ln_dopp: f64,
    }
    let mut cached = Vec::with_capacity(cluster.len());
    for z in cluster {
        let ln_dopp = clutter.doppler.log_density(z.vd);
        if ln_dopp == f64::NEG_INFINITY {
            return Err(Error::ZeroClutterDensity);
        }
        cached.push(Cached {
            px: z.d * z.alpha.cos(),
            py: z.d * z.alpha.sin(),
            alpha: z.alpha,
            vd: z.vd,
            ln_dopp,
        });
    }

    let mut out = Vec::with_capacity(particles.len());
    let mut contribs = Vec::with_capacity(particles.len());
    let mut oc = Vec::with_capacity(cluster.len());
    let mut ratios = Vec::with_capacity(9);
    for p in particles {
        // a particle that cannot have produced the cluster contributes
        // nothing: outside the field of view, at the sensor origin where
        // the aspect is undefined, or with no mixture support at its aspect
        let drop = |out: &mut Vec<Particle>, contribs: &mut Vec<f64>| {
            contribs.push(f64::NEG_INFINITY);
            out.push(Particle {
                kin: p.kin,
                weight: 0.0,
                extents: vec![mean_extent(&p.extents, &constraints)],
            });
        };
        let p_d = profile.probability(&p.kin, mount);
        let kin = p.kin.in_sensor_frame(mount);
        if p_d == 0.0 || kin.x.hypot(kin.y) < 1e-12 {
            drop(&mut out, &mut contribs);
            continue;
        }
        let Ok(cond) = model.conditional_at(kin.phi - kin.y.atan2(kin.x), COMPONENT_PRUNE_LOG)
        else {
            drop(&mut out, &mut contribs);
            continue;
        };
        UP_STATS[3].fetch_add(cond.len() as u64, Relaxed);
        let (sin, cos) = kin.phi.sin_cos();
        oc.clear();
        for c in &cached {
            let dx = c.px - kin.x;
            let dy = c.py - kin.y;
            oc.push((
                cos * dx + sin * dy,
                -sin * dx + cos * dy,
                c.vd - kin.expected_doppler(c.alpha),
            ));
        }
        ratios.clear();
        for ext in &p.extents {
            let mut ratio = ratio_base - n * (ext.a * ext.b / clutter.area).ln();
            for ((ox, oy, zd), c) in oc.iter().zip(&cached) {
                ratio += cond.log_density(ox / ext.b, oy / ext.a, *zd) - c.ln_dopp;
            }
            ratios.push(ratio);
        }
        let lse = log_sum_exp(&ratios);
        contribs.push(p_d.ln() + lse - (p.extents.len() as f64).ln());

        // collapse the extent hypotheses under their posterior weights
        let ext = if p.extents.len() == 1 {
            p.extents[0]
        } else {
            let mut a = 0.0;
            let mut b = 0.0;
            let mut total = 0.0;
            for (ext, r) in p.extents.iter().zip(&ratios) {
                let w = (r - lse).exp();
                a += w * ext.a;
                b += w * ext.b;
                total += w;
            }
            constraints.project(Extent { a: a / total, b: b / total })
        };
        out.push(Particle { kin: p.kin, weight: p.weight, extents: vec![ext] });
    }

    let log_terms: Vec<f64> = out
        .iter()
        .zip(&contribs)
        .map(|(p, c)| if p.weight > 0.0 { p.weight.ln() + c } else { f64::NEG_INFINITY })
        .collect();
    let log_eta = log_sum_exp(&log_terms);
    if log_eta == f64::NEG_INFINITY || !log_eta.is_finite() {
        return Err(Error::DegenerateWeights);
    }
    for (p, lt) in out.iter_mut().zip(&log_terms) {
        p.weight = (lt - log_eta).exp();
    }
    let total: f64 = out.iter().map(|p| p.weight).sum();
    for p in &mut out {
        p.weight /= total;
    }
    Ok((out, log_eta))
}

/// Systematic resampling to `target_count` equally weighted particles.
pub fn resample<R: Rng + ?Sized>(
    particles: &[Particle],
    target_count: usize,
    rng: &mut R,
) -> Vec<Particle> {
    let total: f64 = particles.iter().map(|p| p.weight).sum();
    let step = total / target_count as f64;
    let mut u = rng.gen_range(0.0..1.0) * step;
    let mut acc = 0.0;
    let mut idx = 0;
    let mut out = Vec::with_capacity(target_count);
    let w = 1.0 / target_count as f64;
    for _ in 0..target_count {
        while acc + particles[idx].weight < u && idx + 1 < particles.len() {
            acc += particles[idx].weight;
            idx += 1;
        }
        let mut p = particles[idx].clone();
        p.weight = w;
        out.push(p);
        u += step;
    }
    out
}

/// Inverse sum of squared normalized weights.
pub fn effective_sample_size(particles: &[Particle]) -> f64 {
    let total: f64 = particles.iter().map(|p| p.weight).sum();
    let sq: f64 = particles.iter().map(|p| (p.weight / total).powi(2)).sum();
    1.0 / sq
}
