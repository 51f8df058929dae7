//! The learned radar measurement likelihood and its surroundings: training
//! corpus construction from labeled scans, the state-conditioned detection
//! density, the clutter model, and the object-vs-clutter likelihood ratio
//! the multi-object update consumes.
//!
//! All likelihood math happens in log space. Densities over detections are
//! evaluated in the reduced measurement representation (normalized object
//! frame plus Doppler error); the likelihood ratio is invariant under that
//! change of variables because object and clutter densities pick up the
//! same Jacobian.

use serde::{Deserialize, Serialize};
use nalgebra::{DVector, Matrix3, Vector3};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

use crate::error::{Error, Result};
use crate::geometry::{
    wrap_angle, Detection, EgoMotion, Extent, KinematicState, SensorMount, VehicleState, OC_FRONT,
    OC_REAR,
};
use crate::io::{truth_at, Scan, TruthFrame};
use crate::math::{ln_gamma, log_add_exp, log_sum_exp};
use crate::vgm::{StudentMixture, TrainingPoint, VgmModel};

/// Index of the aspect angle inside the 4D training representation.
const ASPECT_DIM: usize = 3;

/// The learned measurement model: a 4D Student-t mixture over
/// [z′_x, z′_y, z′_d, x′] and the expected number of detections a visible
/// vehicle produces per scan.
#[derive(Debug, Clone)]
pub struct RadarModel {
    mixture: StudentMixture,
    lambda_t: f64,
}

impl RadarModel {
    pub fn new(mixture: StudentMixture, lambda_t: f64) -> Result<Self> {
        if mixture.dim() != 4 {
            return Err(Error::DimensionMismatch { expected: 4, got: mixture.dim() });
        }
        if !(lambda_t > 0.0) {
            return Err(Error::Format(format!("lambda_t must be positive, got {lambda_t}")));
        }
        Ok(RadarModel { mixture, lambda_t })
    }

    pub fn from_vgm(model: &VgmModel, lambda_t: f64) -> Result<Self> {
        RadarModel::new(model.predictive()?, lambda_t)
    }

    pub fn mixture(&self) -> &StudentMixture {
        &self.mixture
    }

    pub fn lambda_t(&self) -> f64 {
        self.lambda_t
    }

    /// The aspect value the conditional is evaluated at. The mixture lives
    /// on an unwrapped axis, so an angle near the ±π seam may sit far from
    /// the component bulk; of the two equivalent representatives the one
    /// with the larger mixture marginal wins.
    pub fn aspect_representative(&self, aspect: f64) -> Result<f64> {
        let marginal = self.mixture.marginalize(&[ASPECT_DIM])?;
        let a = wrap_angle(aspect);
        let alt = a - std::f64::consts::TAU * a.signum();
        let da = marginal.log_density(&DVector::from_vec(vec![a]));
        let dalt = marginal.log_density(&DVector::from_vec(vec![alt]));
        Ok(if dalt > da { alt } else { a })
    }

    /// The 3D detection density g(z′ | x′) for a vehicle seen under the
    /// given aspect angle.
    pub fn conditional(&self, aspect: f64) -> Result<StudentMixture> {
        let rep = self.aspect_representative(aspect)?;
        self.mixture.condition(&[ASPECT_DIM], &[rep])
    }

    /// Log likelihood of a detection cluster under the Poisson
    /// multi-detection model, with the spatial density taken in the
    /// reduced space: −λ_T + Σ_z (ln λ_T + ln g(z′|x′)).
    pub fn single_object_log_likelihood(
        &self,
        detections: &[Detection],
        state: &VehicleState,
    ) -> Result<f64> {
        let mut ll = -self.lambda_t;
        if detections.is_empty() {
            return Ok(ll);
        }
        let cond = self.conditional(state.aspect_angle()?.angle())?;
        for z in detections {
            let zp = state.reduce_measurement(z);
            ll += self.lambda_t.ln()
                + cond.log_density(&DVector::from_vec(vec![zp.zx, zp.zy, zp.zd]));
        }
        Ok(ll)
    }

    /// Log of the object-vs-clutter likelihood ratio for a cluster:
    /// −λ_T + |Z|·(ln λ_T − ln λ_C) + Σ_z (ln g(z′|x′) − ln p_C(z′)).
    /// The global clutter factor over the whole scan cancels against this
    /// ratio in the multi-object update, which is what makes hypothesis
    /// weights comparable across partitions.
    pub fn log_likelihood_ratio(
        &self,
        clutter: &ClutterModel,
        detections: &[Detection],
        state: &VehicleState,
    ) -> Result<f64> {
        let n = detections.len() as f64;
        let mut ratio = -self.lambda_t + n * (self.lambda_t.ln() - clutter.lambda_c.ln());
        if detections.is_empty() {
            return Ok(ratio);
        }
        let cond = self.conditional(state.aspect_angle()?.angle())?;
        for z in detections {
            let zp = state.reduce_measurement(z);
            let pc = clutter.log_reduced_density(state.ext, z.vd)?;
            ratio += cond.log_density(&DVector::from_vec(vec![zp.zx, zp.zy, zp.zd])) - pc;
        }
        Ok(ratio)
    }
}

/// Clutter Doppler density: most clutter is stationary in the world frame,
/// so after ego compensation it concentrates in a narrow Gaussian around
/// zero, with a uniform floor over the unambiguous span for everything
/// else.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DopplerClutter {
    pub gauss_weight: f64,
    pub sigma: f64,
    pub span: (f64, f64),
}

impl Default for DopplerClutter {
    fn default() -> Self {
        DopplerClutter { gauss_weight: 0.7, sigma: 0.5, span: (-20.0, 20.0) }
    }
}

impl DopplerClutter {
    pub fn log_density(&self, vd: f64) -> f64 {
        let norm =
            1.0 / (self.sigma * (2.0 * std::f64::consts::PI).sqrt());
        let gauss = norm * (-0.5 * (vd / self.sigma).powi(2)).exp();
        let width = self.span.1 - self.span.0;
        let uniform = if vd >= self.span.0 && vd <= self.span.1 { 1.0 / width } else { 0.0 };
        (self.gauss_weight * gauss + (1.0 - self.gauss_weight) * uniform).ln()
    }
}

/// Poisson clutter over one sensor's field of view: uniform in Cartesian
/// sensor coordinates, Doppler per [`DopplerClutter`]. Detections fed to
/// the evaluation methods are assumed ego-compensated.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClutterModel {
    pub area: f64,
    pub lambda_c: f64,
    pub doppler: DopplerClutter,
}

impl ClutterModel {
    pub fn new(area: f64, lambda_c: f64) -> Result<Self> {
        if !(area > 0.0) {
            return Err(Error::Format(format!("clutter area must be positive, got {area}")));
        }
        if !(lambda_c >= 0.0) {
            return Err(Error::Format(format!("lambda_c must be nonnegative, got {lambda_c}")));
        }
        Ok(ClutterModel { area, lambda_c, doppler: DopplerClutter::default() })
    }

    /// Clutter model for a sensor's circular-sector field of view.
    pub fn for_mount(mount: &SensorMount, lambda_c: f64) -> Result<Self> {
        ClutterModel::new(0.5 * mount.opening_angle * mount.max_range * mount.max_range, lambda_c)
    }

    /// Log intensity κ(z) = λ_C · p_C(z) at a polar detection:
    /// λ_C · (d / area) · p_dopp(v_D).
    pub fn log_intensity(&self, z: &Detection, mount: &SensorMount) -> Result<f64> {
        let in_fov =
            z.d <= mount.max_range && wrap_angle(z.alpha).abs() <= 0.5 * mount.opening_angle;
        if !in_fov {
            return Err(Error::OutsideFov);
        }
        let dopp = self.doppler.log_density(z.vd);
        if dopp == f64::NEG_INFINITY {
            return Err(Error::ZeroClutterDensity);
        }
        Ok(self.lambda_c.ln() + z.d.ln() - self.area.ln() + dopp)
    }

    /// Log clutter density expressed in the reduced measurement space of a
    /// vehicle with the given extent: the Cartesian uniform picks up the
    /// normalization factor a·b, the Doppler part is a pure shift.
    pub fn log_reduced_density(&self, ext: Extent, vd: f64) -> Result<f64> {
        let dopp = self.doppler.log_density(vd);
        if dopp == f64::NEG_INFINITY {
            return Err(Error::ZeroClutterDensity);
        }
        Ok((ext.a * ext.b / self.area).ln() + dopp)
    }
}

/// State-dependent detection probability: a constant in the interior of
/// the field of view, linearly tapered to zero over a thin boundary band.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DetectionProfile {
    pub p_max: f64,
    /// Fraction of the maximum range over which the taper acts.
    pub range_taper: f64,
    /// Azimuth band, in radians, over which the taper acts.
    pub azimuth_taper: f64,
}

impl Default for DetectionProfile {
    fn default() -> Self {
        DetectionProfile { p_max: 0.8, range_taper: 0.1, azimuth_taper: 5f64.to_radians() }
    }
}

impl DetectionProfile {
    /// Detection probability of a vehicle at the given state (ego frame)
    /// for one sensor.
    pub fn probability(&self, state: &KinematicState, mount: &SensorMount) -> f64 {
        let sc = state.in_sensor_frame(mount);
        let d = sc.x.hypot(sc.y);
        let alpha = sc.y.atan2(sc.x);
        let half = 0.5 * mount.opening_angle;
        if d > mount.max_range || alpha.abs() > half {
            return 0.0;
        }
        let range_band = self.range_taper * mount.max_range;
        let fr = if range_band > 0.0 { ((mount.max_range - d) / range_band).min(1.0) } else { 1.0 };
        let fa = if self.azimuth_taper > 0.0 {
            ((half - alpha.abs()) / self.azimuth_taper).min(1.0)
        } else {
            1.0
        };
        self.p_max * fr * fa
    }
}

/// One detection paired with the interpolated ground-truth state of the
/// vehicle it gated onto, both in the frame of the observing sensor.
#[derive(Debug, Clone, Copy)]
pub struct LabeledScanPair {
    pub detection: Detection,
    pub state: VehicleState,
    pub t: f64,
    pub sensor: usize,
}

/// Pair every detection lying inside a truth vehicle's inflated oriented
/// bounding box with that vehicle's state. Detections outside every box
/// are dropped; when boxes overlap, the vehicle with the nearest box
/// center wins. Scans outside the truth time span are skipped.
pub fn pair_with_truth(
    scans: &[Scan],
    truths: &[TruthFrame],
    mounts: &[SensorMount],
    gate_margin: f64,
) -> Result<Vec<LabeledScanPair>> {
    let mut pairs = Vec::new();
    for scan in scans {
        let mount = mounts
            .get(scan.sensor)
            .ok_or_else(|| Error::Format(format!("scan references unknown sensor {}", scan.sensor)))?;
        let Some(frame) = truth_at(truths, scan.t) else { continue };
        let to_ego = EgoMotion {
            v: frame.ego.v,
            omega: frame.ego.omega,
            dx: frame.ego.x,
            dy: frame.ego.y,
            dyaw: frame.ego.phi,
        };
        let states_sc: Vec<VehicleState> = frame
            .targets
            .iter()
            .map(|t| t.state().retarget(&to_ego).in_sensor_frame(mount))
            .collect();
        for z in &scan.detections {
            let px = z.d * z.alpha.cos();
            let py = z.d * z.alpha.sin();
            let mut best: Option<(f64, usize)> = None;
            for (i, s) in states_sc.iter().enumerate() {
                let (sin, cos) = s.kin.phi.sin_cos();
                let dx = px - s.kin.x;
                let dy = py - s.kin.y;
                let ox = cos * dx + sin * dy;
                let oy = -sin * dx + cos * dy;
                let inside = ox >= OC_REAR * s.ext.b - gate_margin
                    && ox <= OC_FRONT * s.ext.b + gate_margin
                    && oy.abs() <= 0.5 * s.ext.a + gate_margin;
                if inside {
                    let cx = 0.5 * (OC_FRONT + OC_REAR) * s.ext.b;
                    let dist = (ox - cx).hypot(oy);
                    if best.map_or(true, |(d, _)| dist < d) {
                        best = Some((dist, i));
                    }
                }
            }
            if let Some((_, i)) = best {
                pairs.push(LabeledScanPair {
                    detection: *z,
                    state: states_sc[i],
                    t: scan.t,
                    sensor: scan.sensor,
                });
            }
        }
    }
    Ok(pairs)
}

/// Reduce gated detection/truth pairs into the 4D training representation.
pub fn build_training_set(
    scans: &[Scan],
    truths: &[TruthFrame],
    mounts: &[SensorMount],
    gate_margin: f64,
) -> Result<Vec<TrainingPoint>> {
    let pairs = pair_with_truth(scans, truths, mounts, gate_margin)?;
    let mut points = Vec::with_capacity(pairs.len());
    for pair in &pairs {
        let Ok(aspect) = pair.state.aspect_angle() else { continue };
        let zp = pair.state.reduce_measurement(&pair.detection);
        points.push(TrainingPoint { zx: zp.zx, zy: zp.zy, zd: zp.zd, aspect: aspect.angle() });
    }
    Ok(points)
}

/// Equalize the aspect-angle histogram: every non-empty bin is subsampled
/// (seeded, without replacement) down to the smallest non-empty bin count.
pub fn balance_by_aspect(
    points: &[TrainingPoint],
    bin_width: f64,
    seed: u64,
) -> Vec<TrainingPoint> {
    assert!(bin_width > 0.0, "bin width must be positive");
    let n_bins = (std::f64::consts::TAU / bin_width).ceil() as usize;
    let mut bins: Vec<Vec<usize>> = vec![Vec::new(); n_bins];
    for (i, p) in points.iter().enumerate() {
        let pos = (wrap_angle(p.aspect) + std::f64::consts::PI) / bin_width;
        let idx = (pos as usize).min(n_bins - 1);
        bins[idx].push(i);
    }
    let Some(min_count) = bins.iter().filter(|b| !b.is_empty()).map(|b| b.len()).min() else {
        return Vec::new();
    };
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(min_count * n_bins);
    for bin in &mut bins {
        if bin.len() > min_count {
            bin.shuffle(&mut rng);
            bin.truncate(min_count);
            bin.sort_unstable();
        }
        out.extend(bin.iter().map(|&i| points[i]));
    }
    out
}

// ---------------------------------------------------------------------------
// fast evaluation path

/// Precomputed per-component pieces for conditioning the 4D mixture on the
/// aspect angle. Produces the same numbers as [`RadarModel::conditional`]
/// followed by mixture evaluation, at a fraction of the cost, because the
/// partitioned covariance blocks are factored once and the per-aspect work
/// reduces to rank-one arithmetic on fixed-size matrices.
#[derive(Debug, Clone)]
pub struct RadarEvaluator {
    comps: Vec<EvalComponent>,
    lambda_t: f64,
    ln_lambda_t: f64,
}

#[derive(Debug, Clone)]
struct EvalComponent {
    ln_w: f64,
    nu: f64,
    loc3: Vector3<f64>,
    loc_b: f64,
    /// Σ_AB / σ_bb
    gain: Vector3<f64>,
    /// (Σ_AA − Σ_AB Σ_BA / σ_bb)⁻¹
    schur_inv: Matrix3<f64>,
    inv_sbb: f64,
    /// 1D aspect marginal constant (everything except the maha term)
    marg_const: f64,
    /// 3D conditional constant before the per-aspect scale correction
    cond_const: f64,
}

/// The conditional mixture at one aspect value, flattened for evaluation.
#[derive(Debug, Clone)]
pub struct AspectConditional {
    comps: Vec<CondComponent>,
}

#[derive(Debug, Clone)]
struct CondComponent {
    /// normalized log weight plus all density constants
    ln_coef: f64,
    nu1: f64,
    loc: Vector3<f64>,
    /// conditional precision (scale correction folded in)
    prec: Matrix3<f64>,
}

impl RadarEvaluator {
    pub fn new(model: &RadarModel) -> Result<Self> {
        let mut comps = Vec::with_capacity(model.mixture.components().len());
        for c in model.mixture.components() {
            let sigma = c
                .precision
                .clone()
                .try_inverse()
                .ok_or(Error::NotPositiveDefinite)?;
            let sigma_aa = Matrix3::from_fn(|i, j| sigma[(i, j)]);
            let sigma_ab = Vector3::new(sigma[(0, 3)], sigma[(1, 3)], sigma[(2, 3)]);
            let sbb = sigma[(3, 3)];
            if !(sbb > 0.0) {
                return Err(Error::NotPositiveDefinite);
            }
            let schur = sigma_aa - sigma_ab * sigma_ab.transpose() / sbb;
            let schur_inv = schur.try_inverse().ok_or(Error::NotPositiveDefinite)?;
            let half_ln_det_schur_inv = 0.5 * schur_inv.determinant().ln();
            let nu = c.dof;
            let marg_const = ln_gamma(0.5 * (nu + 1.0))
                - ln_gamma(0.5 * nu)
                - 0.5 * (nu * std::f64::consts::PI * sbb).ln();
            let cond_const = ln_gamma(0.5 * (nu + 4.0))
                - ln_gamma(0.5 * (nu + 1.0))
                - 1.5 * ((nu + 1.0) * std::f64::consts::PI).ln()
                + half_ln_det_schur_inv;
            comps.push(EvalComponent {
                ln_w: c.weight.ln(),
                nu,
                loc3: Vector3::new(c.location[0], c.location[1], c.location[2]),
                loc_b: c.location[3],
                gain: sigma_ab / sbb,
                schur_inv,
                inv_sbb: 1.0 / sbb,
                marg_const,
                cond_const,
            });
        }
        Ok(RadarEvaluator { comps, lambda_t: model.lambda_t, ln_lambda_t: model.lambda_t.ln() })
    }

    pub fn lambda_t(&self) -> f64 {
        self.lambda_t
    }

    pub fn ln_lambda_t(&self) -> f64 {
        self.ln_lambda_t
    }

    /// Log density of the mixture's 1D aspect marginal.
    pub fn marginal_log_density(&self, aspect: f64) -> f64 {
        let mut acc = f64::NEG_INFINITY;
        for c in &self.comps {
            let delta = aspect - c.loc_b;
            let maha = delta * delta * c.inv_sbb;
            let t = c.ln_w + c.marg_const - 0.5 * (c.nu + 1.0) * (maha / c.nu).ln_1p();
            acc = log_add_exp(acc, t);
        }
        acc
    }

    /// Condition on an aspect angle, applying the ±2π wrap rule, dropping
    /// conditional components whose normalized log weight falls below
    /// `prune_log` (pass `f64::NEG_INFINITY` to keep everything).
    pub fn conditional_at(&self, aspect: f64, prune_log: f64) -> Result<AspectConditional> {
        let a = wrap_angle(aspect);
        let alt = a - std::f64::consts::TAU * a.signum();
        let rep = if self.marginal_log_density(alt) > self.marginal_log_density(a) { alt } else { a };

        let mut lws = Vec::with_capacity(self.comps.len());
        for c in &self.comps {
            let delta = rep - c.loc_b;
            let maha = delta * delta * c.inv_sbb;
            lws.push(c.ln_w + c.marg_const - 0.5 * (c.nu + 1.0) * (maha / c.nu).ln_1p());
        }
        let total = log_sum_exp(&lws);
        if total == f64::NEG_INFINITY {
            return Err(Error::ZeroMarginal);
        }
        let mut comps = Vec::with_capacity(self.comps.len());
        for (c, lw) in self.comps.iter().zip(&lws) {
            let ln_weight = lw - total;
            if ln_weight < prune_log {
                continue;
            }
            let delta = rep - c.loc_b;
            let maha_b = delta * delta * c.inv_sbb;
            let scale = (c.nu + maha_b) / (c.nu + 1.0);
            comps.push(CondComponent {
                ln_coef: ln_weight + c.cond_const - 1.5 * scale.ln(),
                nu1: c.nu + 1.0,
                loc: c.loc3 + c.gain * delta,
                prec: c.schur_inv / scale,
            });
        }
        if comps.is_empty() {
            return Err(Error::ZeroMarginal);
        }
        Ok(AspectConditional { comps })
    }
}

impl AspectConditional {
    /// Number of mixture components that survived conditioning.
    pub fn len(&self) -> usize {
        self.comps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.comps.is_empty()
    }

    /// Log conditional density at a reduced measurement. Batched over a
    /// stack buffer in the common case; this sits in the innermost loop
    /// of the particle update.
    pub fn log_density(&self, zx: f64, zy: f64, zd: f64) -> f64 {
        let z = Vector3::new(zx, zy, zd);
        let term = |c: &CondComponent| {
            let d = z - c.loc;
            let maha = (c.prec * d).dot(&d);
            c.ln_coef - 0.5 * (c.nu1 + 3.0) * (maha / c.nu1).ln_1p()
        };
        let mut buf = [0.0f64; 128];
        if self.comps.len() <= buf.len() {
            let mut max = f64::NEG_INFINITY;
            for (c, slot) in self.comps.iter().zip(buf.iter_mut()) {
                *slot = term(c);
                if *slot > max {
                    max = *slot;
                }
            }
            if max == f64::NEG_INFINITY {
                return max;
            }
            let sum: f64 = buf[..self.comps.len()].iter().map(|t| (t - max).exp()).sum();
            max + sum.ln()
        } else {
            self.comps.iter().fold(f64::NEG_INFINITY, |acc, c| log_add_exp(acc, term(c)))
        }
    }
}
