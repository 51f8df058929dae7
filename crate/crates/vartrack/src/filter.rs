//! The labeled multi-Bernoulli recursion for extended objects: survival
//! prediction with appended births, feasibility conditioning of the
//! hypothesis prior, the measurement update over candidate partitions and
//! ranked association maps, collapse back to a labeled multi-Bernoulli
//! density, pruning, and estimate extraction.
//!
//! The update factors the scan-wide clutter term out of every hypothesis,
//! so cluster costs are object-vs-clutter likelihood ratios and weights
//! stay comparable across partitions. Hypotheses that assign the same
//! detection sets to the same labels through different partitions are
//! duplicates of one association family and are kept once.

use serde::{Deserialize, Serialize};
use std::collections::{BinaryHeap, HashMap, HashSet};

use rand::Rng;

use crate::assoc::{murty, AssociationMap, CostMatrix, Partition};
use crate::error::{Error, Result};
use crate::geometry::{
    wrap_angle, Detection, EgoMotion, Extent, KinematicState, SensorMount, VehicleState, OC_FRONT,
    OC_REAR,
};
use crate::math::log_sum_exp;
use crate::particles::{
    effective_sample_size, predict_particles, resample, update_particles, ExtentConstraints,
    NoiseBounds, Particle, ParticleBudget,
};
use crate::radar::{ClutterModel, DetectionProfile, RadarEvaluator};

/// Hypotheses retained after the update before the LMB collapse.
pub const HYPOTHESIS_CAP: usize = 100;

/// Track identity: the scan index it was born at plus its ordinal among
/// that step's births. Never reused within a run.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Label {
    pub step: u64,
    pub ordinal: u64,
}

/// One Bernoulli component: existence probability and a particle density.
#[derive(Debug, Clone)]
pub struct Track {
    pub label: Label,
    pub r: f64,
    pub particles: Vec<Particle>,
}

/// A labeled multi-Bernoulli density.
#[derive(Debug, Clone, Default)]
pub struct LmbDensity {
    pub tracks: Vec<Track>,
}

impl LmbDensity {
    pub fn expected_cardinality(&self) -> f64 {
        self.tracks.iter().map(|t| t.r).sum()
    }
}

/// A label subset of the prior with its hypothesis weight.
#[derive(Debug, Clone)]
pub struct PriorHypothesis {
    pub track_idxs: Vec<usize>,
    pub weight: f64,
}

/// One posterior hypothesis: surviving labels with their posterior
/// densities (indices into the shared arena) and where it came from.
#[derive(Debug, Clone)]
pub struct GlmbHypothesis {
    pub weight: f64,
    /// sorted by label
    pub tracks: Vec<(Label, usize)>,
    /// (partition index, association map over the hypothesis label order)
    pub provenance: (usize, AssociationMap),
}

/// Posterior of one update: hypotheses over a shared density arena.
#[derive(Debug, Clone)]
pub struct GlmbPosterior {
    pub hypotheses: Vec<GlmbHypothesis>,
    pub densities: Vec<Vec<Particle>>,
}

/// Upper speed support of birth particle clouds. Keeps the unobserved
/// tangential velocity family bounded when a one-aspect cluster pins
/// only a small radial component.
pub const MAX_BIRTH_SPEED: f64 = 45.0;

/// Birth construction policy.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct BirthModel {
    pub r_b: f64,
    /// length hypothesis range when the cluster span makes it observable
    pub length_observable: (f64, f64),
    /// fallback length range for compact clusters
    pub length_default: (f64, f64),
    pub budget: usize,
    /// minimum fitted rigid-body speed
    pub doppler_threshold: f64,
    /// a detection is free below this total posterior association mass
    pub usage_threshold: f64,
}

impl Default for BirthModel {
    fn default() -> Self {
        BirthModel {
            r_b: 0.1,
            length_observable: (2.5, 7.0),
            length_default: (4.0, 5.0),
            budget: 900,
            doppler_threshold: 1.0,
            usage_threshold: 0.2,
        }
    }
}

/// Exponential lifetime survival: mean dwell inside the joint field of
/// view versus outside it.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct SurvivalModel {
    pub mean_life_in_fov: f64,
    pub mean_life_outside: f64,
}

impl Default for SurvivalModel {
    fn default() -> Self {
        SurvivalModel { mean_life_in_fov: 10.0, mean_life_outside: 0.1 }
    }
}

impl SurvivalModel {
    pub fn probability(&self, kin: &KinematicState, dt: f64, mounts: &[SensorMount]) -> f64 {
        let inside = mounts.iter().any(|m| m.contains(kin.x, kin.y));
        let mean = if inside { self.mean_life_in_fov } else { self.mean_life_outside };
        (-dt / mean).exp()
    }
}

/// Weighted mean state of a particle set; heading by circular mean,
/// extent averaged over each particle's hypothesis set.
pub fn mean_state(particles: &[Particle]) -> VehicleState {
    let total: f64 = particles.iter().map(|p| p.weight).sum();
    let mut x = 0.0;
    let mut y = 0.0;
    let mut v = 0.0;
    let mut omega = 0.0;
    let mut sin = 0.0;
    let mut cos = 0.0;
    let mut a = 0.0;
    let mut b = 0.0;
    for p in particles {
        let w = p.weight / total;
        x += w * p.kin.x;
        y += w * p.kin.y;
        v += w * p.kin.v;
        omega += w * p.kin.omega;
        sin += w * p.kin.phi.sin();
        cos += w * p.kin.phi.cos();
        let ne = p.extents.len() as f64;
        for e in &p.extents {
            a += w * e.a / ne;
            b += w * e.b / ne;
        }
    }
    VehicleState {
        kin: KinematicState { x, y, phi: sin.atan2(cos), v, omega },
        ext: Extent { a, b },
    }
}

/// Advance the density by one interval: append the birth tracks, then per
/// track re-express particles in the new ego frame, thin existence by the
/// survival probability (which reweights the particles), and propagate
/// through the motion model.
pub fn predict<R: Rng + ?Sized, S: Fn(&KinematicState) -> f64>(
    lmb: LmbDensity,
    dt: f64,
    ego: &EgoMotion,
    births: Vec<Track>,
    p_survive: S,
    noise: &NoiseBounds,
    extent_step: f64,
    constraints: &ExtentConstraints,
    rng: &mut R,
) -> LmbDensity {
    let mut tracks = lmb.tracks;
    tracks.extend(births);
    for t in &mut tracks {
        for p in &mut t.particles {
            p.kin = p.kin.retarget(ego);
        }
        let mut eta = 0.0;
        let mut ps = Vec::with_capacity(t.particles.len());
        for p in &t.particles {
            let s = p_survive(&p.kin);
            ps.push(s);
            eta += p.weight * s;
        }
        if eta > 0.0 {
            for (p, s) in t.particles.iter_mut().zip(&ps) {
                p.weight *= s / eta;
            }
        }
        t.r = (t.r * eta).min(1.0);
        t.particles = predict_particles(&t.particles, dt, noise, extent_step, constraints, rng);
    }
    LmbDensity { tracks }
}

/// Whether the mean footprint rectangles of two states overlap, by the
/// separating-axis test (exact for rectangles). The footprint spans
/// asymmetric fractions of the length around the anchor, so the box
/// center sits ahead of the state position.
pub fn rectangles_overlap(s1: &VehicleState, s2: &VehicleState) -> bool {
    let axes_of = |s: &VehicleState| {
        let (sin, cos) = s.kin.phi.sin_cos();
        [(cos, sin), (-sin, cos)]
    };
    let center_of = |s: &VehicleState| {
        let off = 0.5 * (OC_FRONT + OC_REAR) * s.ext.b;
        let (sin, cos) = s.kin.phi.sin_cos();
        (s.kin.x + off * cos, s.kin.y + off * sin)
    };
    let half_of = |s: &VehicleState| (0.5 * s.ext.b, 0.5 * s.ext.a);

    let c1 = center_of(s1);
    let c2 = center_of(s2);
    let d = (c2.0 - c1.0, c2.1 - c1.1);
    let a1 = axes_of(s1);
    let a2 = axes_of(s2);
    let h1 = half_of(s1);
    let h2 = half_of(s2);
    for axis in a1.iter().chain(a2.iter()) {
        let proj = |v: (f64, f64)| v.0 * axis.0 + v.1 * axis.1;
        let r1 = h1.0 * proj((a1[0].0, a1[0].1)).abs() + h1.1 * proj((a1[1].0, a1[1].1)).abs();
        let r2 = h2.0 * proj((a2[0].0, a2[0].1)).abs() + h2.1 * proj((a2[1].0, a2[1].1)).abs();
        if proj(d).abs() > r1 + r2 {
            return false;
        }
    }
    true
}

/// Enumerate up to `cap` highest-weight label subsets of the prior LMB,
/// weights renormalized over the enumerated set.
pub fn enumerate_prior_hypotheses(lmb: &LmbDensity, cap: usize) -> Vec<PriorHypothesis> {
    assert!(cap >= 1);
    let n = lmb.tracks.len();
    // base subset takes the more likely side per track; flipping track i
    // costs the log odds against that side
    let mut base = vec![false; n];
    let mut penalties: Vec<(f64, usize)> = Vec::new();
    let mut ln_base = 0.0;
    for (i, t) in lmb.tracks.iter().enumerate() {
        let r = t.r.clamp(0.0, 1.0);
        base[i] = r >= 0.5;
        let hi = r.max(1.0 - r);
        let lo = r.min(1.0 - r);
        ln_base += hi.ln();
        let pen = hi.ln() - lo.ln();
        if pen.is_finite() {
            penalties.push((pen, i));
        }
    }
    penalties.sort_by(|a, b| a.0.total_cmp(&b.0));

    // best-first walk over flip sets: extend with the next penalty index
    // or replace the last one, which enumerates subsets without repeats
    struct Node {
        penalty: f64,
        flips: Vec<usize>,
    }
    impl PartialEq for Node {
        fn eq(&self, other: &Self) -> bool {
            self.penalty == other.penalty && self.flips == other.flips
        }
    }
    impl Eq for Node {}
    impl PartialOrd for Node {
        fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
            Some(self.cmp(other))
        }
    }
    impl Ord for Node {
        fn cmp(&self, other: &Self) -> std::cmp::Ordering {
            other.penalty.total_cmp(&self.penalty).then_with(|| other.flips.cmp(&self.flips))
        }
    }

    let mut out = Vec::with_capacity(cap.min(64));
    let mut heap = BinaryHeap::new();
    heap.push(Node { penalty: 0.0, flips: Vec::new() });
    while let Some(node) = heap.pop() {
        let mut subset = base.clone();
        for &f in &node.flips {
            subset[penalties[f].1] = !subset[penalties[f].1];
        }
        let track_idxs: Vec<usize> = (0..n).filter(|&i| subset[i]).collect();
        out.push(PriorHypothesis { track_idxs, weight: ln_base - node.penalty });
        if out.len() == cap {
            break;
        }
        let next = node.flips.last().map_or(0, |&l| l + 1);
        if next < penalties.len() {
            let mut ext = node.flips.clone();
            ext.push(next);
            heap.push(Node { penalty: node.penalty + penalties[next].0, flips: ext });
            if let Some(&last) = node.flips.last() {
                let mut rep = node.flips.clone();
                *rep.last_mut().unwrap() = next;
                heap.push(Node {
                    penalty: node.penalty - penalties[last].0 + penalties[next].0,
                    flips: rep,
                });
            }
        }
    }
    // stored weights are logs so far; normalize
    let logs: Vec<f64> = out.iter().map(|h| h.weight).collect();
    let total = log_sum_exp(&logs);
    for h in &mut out {
        h.weight = (h.weight - total).exp();
    }
    out
}

/// Zero out hypotheses whose label set places overlapping mean
/// rectangles, then renormalize.
pub fn feasibility_condition(
    hypotheses: Vec<PriorHypothesis>,
    lmb: &LmbDensity,
) -> Result<Vec<PriorHypothesis>> {
    let means: Vec<VehicleState> =
        lmb.tracks.iter().map(|t| mean_state(&t.particles)).collect();
    let mut out = hypotheses;
    let mut total = 0.0;
    for h in &mut out {
        let feasible = (0..h.track_idxs.len()).all(|i| {
            (i + 1..h.track_idxs.len())
                .all(|j| !rectangles_overlap(&means[h.track_idxs[i]], &means[h.track_idxs[j]]))
        });
        if !feasible {
            h.weight = 0.0;
        }
        total += h.weight;
    }
    if total <= 0.0 {
        return Err(Error::AllInfeasible);
    }
    out.retain(|h| h.weight > 0.0);
    for h in &mut out {
        h.weight /= total;
    }
    Ok(out)
}

/// Everything the measurement update needs besides the densities.
pub struct UpdateContext<'a> {
    pub eval: &'a RadarEvaluator,
    pub clutter: &'a ClutterModel,
    pub profile: &'a DetectionProfile,
    pub mount: &'a SensorMount,
    pub k_best: usize,
    /// center-distance gate in meters beyond which a track-cluster pair
    /// is forbidden without evaluating it; None evaluates everything
    pub assoc_gate: Option<f64>,
}

/// Measurement update over candidate partitions. For every prior
/// hypothesis and partition, the k best association maps are expanded
/// into posterior hypotheses; association families repeated across
/// partitions are kept once; weights are normalized jointly and the
/// hypothesis list is capped.
pub fn update(
    prior: &[PriorHypothesis],
    lmb: &LmbDensity,
    detections: &[Detection],
    partitions: &[Partition],
    ctx: &UpdateContext,
) -> Result<GlmbPosterior> {
    if prior.is_empty() {
        return Err(Error::EmptyInput("prior hypotheses"));
    }
    let empty = [Partition { clusters: Vec::new() }];
    let partitions: &[Partition] = if partitions.is_empty() {
        if detections.is_empty() {
            &empty
        } else {
            return Err(Error::EmptyPartitions);
        }
    } else {
        partitions
    };

    let mut densities: Vec<Vec<Particle>> = Vec::new();
    // per track: misdetection branch (log eta0, density)
    let mut mis: HashMap<usize, (f64, usize)> = HashMap::new();
    // cluster contents interned once per call so the cache below can key
    // on a small id instead of cloning index vectors on every probe
    let mut cluster_ids: HashMap<Vec<usize>, usize> = HashMap::new();
    // per (track, cluster id): detection branch; None = unexplainable
    let mut det: HashMap<(usize, usize), Option<(f64, usize)>> = HashMap::new();
    let constraints = ExtentConstraints::default();
    let e_lt = (-ctx.eval.lambda_t()).exp();
    // sensor-frame means for association gating, shared by every
    // (partition, hypothesis) pass over the same predicted density
    let gate_means: Vec<VehicleState> = if ctx.assoc_gate.is_some() {
        lmb.tracks
            .iter()
            .map(|t| mean_state(&t.particles).in_sensor_frame(ctx.mount))
            .collect()
    } else {
        Vec::new()
    };

    let mut misdetect = |track: usize,
                         lmb: &LmbDensity,
                         densities: &mut Vec<Vec<Particle>>|
     -> (f64, usize) {
        *mis.entry(track).or_insert_with(|| {
            let particles = &lmb.tracks[track].particles;
            let mut post = Vec::with_capacity(particles.len());
            let mut terms = Vec::with_capacity(particles.len());
            for p in particles {
                let pd = ctx.profile.probability(&p.kin, ctx.mount);
                let psi = 1.0 - pd * (1.0 - e_lt);
                terms.push(if p.weight > 0.0 {
                    p.weight.ln() + psi.ln()
                } else {
                    f64::NEG_INFINITY
                });
                let n = p.extents.len() as f64;
                let a = p.extents.iter().map(|e| e.a).sum::<f64>() / n;
                let b = p.extents.iter().map(|e| e.b).sum::<f64>() / n;
                post.push(Particle {
                    kin: p.kin,
                    weight: p.weight * psi,
                    extents: vec![constraints.project(Extent { a, b })],
                });
            }
            let log_eta = log_sum_exp(&terms);
            let total: f64 = post.iter().map(|p| p.weight).sum();
            for p in &mut post {
                p.weight /= total;
            }
            densities.push(post);
            (log_eta, densities.len() - 1)
        })
    };

    struct Pending {
        log_weight: f64,
        tracks: Vec<(Label, usize)>,
        provenance: (usize, AssociationMap),
    }
    let mut pending: Vec<Pending> = Vec::new();
    let mut families: HashSet<Vec<(Label, Option<Vec<usize>>)>> = HashSet::new();

    for (p_idx, partition) in partitions.iter().enumerate() {
        debug_assert!(partition.is_valid());
        let clusters: Vec<Vec<Detection>> = partition
            .clusters
            .iter()
            .map(|c| c.iter().map(|&i| detections[i]).collect())
            .collect();
        let ids: Vec<usize> = partition
            .clusters
            .iter()
            .map(|c| {
                let next = cluster_ids.len();
                *cluster_ids.entry(c.clone()).or_insert(next)
            })
            .collect();
        let centroids: Vec<(f64, f64)> = clusters
            .iter()
            .map(|c| {
                let n = c.len() as f64;
                let x = c.iter().map(|z| z.d * z.alpha.cos()).sum::<f64>() / n;
                let y = c.iter().map(|z| z.d * z.alpha.sin()).sum::<f64>() / n;
                (x, y)
            })
            .collect();

        for hyp in prior {
            let n = hyp.track_idxs.len();
            let mut rows = Vec::with_capacity(n);
            for &t in &hyp.track_idxs {
                let mut row = Vec::with_capacity(clusters.len() + 1);
                for (ci, cluster) in clusters.iter().enumerate() {
                    if let Some(gate) = ctx.assoc_gate {
                        let m = &gate_means[t];
                        let d = (m.kin.x - centroids[ci].0).hypot(m.kin.y - centroids[ci].1);
                        if d > gate {
                            row.push(f64::INFINITY);
                            continue;
                        }
                    }
                    let entry = det.entry((t, ids[ci])).or_insert_with(|| {
                        match update_particles(
                            &lmb.tracks[t].particles,
                            cluster,
                            ctx.eval,
                            ctx.clutter,
                            ctx.profile,
                            ctx.mount,
                        ) {
                            Ok((post, log_eta)) => {
                                densities.push(post);
                                Some((log_eta, densities.len() - 1))
                            }
                            Err(Error::DegenerateWeights) => None,
                            Err(_) => None,
                        }
                    });
                    row.push(entry.map_or(f64::INFINITY, |(le, _)| -le));
                }
                let (log_eta0, _) = misdetect(t, lmb, &mut densities);
                row.push(-log_eta0);
                rows.push(row);
            }
            let cost = CostMatrix::new(rows, clusters.len())?;
            let ranked = match murty(&cost, ctx.k_best) {
                Ok(r) => r,
                Err(Error::InfeasibleAssignment) => continue,
                Err(e) => return Err(e),
            };
            for (map, total_cost) in ranked {
                let mut tracks: Vec<(Label, usize)> = Vec::with_capacity(n);
                let mut family: Vec<(Label, Option<Vec<usize>>)> = Vec::with_capacity(n);
                for (pos, &t) in hyp.track_idxs.iter().enumerate() {
                    let label = lmb.tracks[t].label;
                    match map.cluster_of(pos) {
                        Some(ci) => {
                            let (_, di) =
                                det[&(t, ids[ci])].expect("finite cost implies cached posterior");
                            tracks.push((label, di));
                            family.push((label, Some(partition.clusters[ci].clone())));
                        }
                        None => {
                            let (_, di) = misdetect(t, lmb, &mut densities);
                            tracks.push((label, di));
                            family.push((label, None));
                        }
                    }
                }
                if !families.insert(family) {
                    continue;
                }
                pending.push(Pending {
                    log_weight: hyp.weight.ln() - total_cost,
                    tracks,
                    provenance: (p_idx, map.clone()),
                });
            }
        }
    }

    if pending.is_empty() {
        return Err(Error::AllInfeasible);
    }
    let logs: Vec<f64> = pending.iter().map(|p| p.log_weight).collect();
    let total = log_sum_exp(&logs);
    if total == f64::NEG_INFINITY {
        return Err(Error::AllInfeasible);
    }
    let mut hypotheses: Vec<GlmbHypothesis> = pending
        .into_iter()
        .map(|p| GlmbHypothesis {
            weight: (p.log_weight - total).exp(),
            tracks: p.tracks,
            provenance: p.provenance,
        })
        .collect();
    hypotheses.sort_by(|a, b| b.weight.total_cmp(&a.weight));
    hypotheses.truncate(HYPOTHESIS_CAP);
    let kept: f64 = hypotheses.iter().map(|h| h.weight).sum();
    for h in &mut hypotheses {
        h.weight /= kept;
    }
    Ok(GlmbPosterior { hypotheses, densities })
}

/// Collapse a GLMB posterior to a labeled multi-Bernoulli density. Each
/// label's existence is its total hypothesis weight; its density is the
/// weight-mixed union of the per-hypothesis posteriors, exact because the
/// arena lets identical mixture components merge by summed weight.
pub fn lmb_approximate(posterior: &GlmbPosterior) -> LmbDensity {
    // label -> density idx -> accumulated weight
    let mut acc: HashMap<Label, HashMap<usize, f64>> = HashMap::new();
    for h in &posterior.hypotheses {
        for &(label, di) in &h.tracks {
            *acc.entry(label).or_default().entry(di).or_insert(0.0) += h.weight;
        }
    }
    let mut labels: Vec<Label> = acc.keys().copied().collect();
    labels.sort();
    let mut tracks = Vec::with_capacity(labels.len());
    for label in labels {
        let parts = &acc[&label];
        let mut idxs: Vec<usize> = parts.keys().copied().collect();
        idxs.sort_unstable();
        // fixed summation order so equal inputs reproduce bitwise
        let r: f64 = idxs.iter().map(|i| parts[i]).sum();
        let mut particles = Vec::new();
        for di in idxs {
            let scale = parts[&di] / r;
            particles.extend(posterior.densities[di].iter().map(|p| Particle {
                kin: p.kin,
                weight: p.weight * scale,
                extents: p.extents.clone(),
            }));
        }
        let total: f64 = particles.iter().map(|p| p.weight).sum();
        for p in &mut particles {
            p.weight /= total;
        }
        tracks.push(Track { label, r: r.min(1.0), particles });
    }
    LmbDensity { tracks }
}

/// Fraction of posterior probability mass under which each detection was
/// assigned to some track.
pub fn detection_usage(
    posterior: &GlmbPosterior,
    partitions: &[Partition],
    n_detections: usize,
) -> Vec<f64> {
    let mut usage = vec![0.0; n_detections];
    for h in &posterior.hypotheses {
        let (p_idx, ref map) = h.provenance;
        let mut covered = HashSet::new();
        for pos in 0..h.tracks.len() {
            if let Some(ci) = map.cluster_of(pos) {
                for &z in &partitions[p_idx].clusters[ci] {
                    covered.insert(z);
                }
            }
        }
        for z in covered {
            usage[z] += h.weight;
        }
    }
    usage
}

/// Spawn birth candidates from clusters of unexplained, moving
/// detections: at least two detections, every one mostly unused by the
/// posterior, and a fitted rigid-body speed above threshold. Each birth
/// carries a broad particle cloud around the cluster in the ego frame.
pub fn birth_proposals<R: Rng + ?Sized>(
    detections: &[Detection],
    partitions: &[Partition],
    posterior: &GlmbPosterior,
    mount: &SensorMount,
    birth: &BirthModel,
    step: u64,
    rng: &mut R,
) -> Vec<Track> {
    let usage = detection_usage(posterior, partitions, detections.len());
    let mut seen: HashSet<Vec<usize>> = HashSet::new();
    let mut chosen: Vec<&Vec<usize>> = Vec::new();
    for p in partitions {
        for c in &p.clusters {
            if c.len() < 2 || !seen.insert(c.clone()) {
                continue;
            }
            if c.iter().any(|&z| usage[z] >= birth.usage_threshold) {
                continue;
            }
            chosen.push(c);
        }
    }
    // birth clusters must not share detections; larger clusters first so a
    // merged view of one vehicle beats its fragments
    chosen.sort_by(|a, b| b.len().cmp(&a.len()).then_with(|| a.cmp(b)));
    let mut taken: HashSet<usize> = HashSet::new();
    let constraints = ExtentConstraints::default();
    let mut tracks = Vec::new();
    for c in chosen {
        if c.iter().any(|z| taken.contains(z)) {
            continue;
        }
        let cluster: Vec<Detection> = c.iter().map(|&i| detections[i]).collect();
        let Some((c1, c2, rank_deficient)) = fit_profile(&cluster) else { continue };
        let speed = c1.hypot(c2);
        if speed < birth.doppler_threshold {
            continue;
        }
        for &z in c {
            taken.insert(z);
        }
        // cluster geometry in the sensor frame, then into the ego frame
        let n = cluster.len() as f64;
        let cx = cluster.iter().map(|z| z.d * z.alpha.cos()).sum::<f64>() / n;
        let cy = cluster.iter().map(|z| z.d * z.alpha.sin()).sum::<f64>() / n;
        let phi_sc = c2.atan2(c1);
        let (sin_m, cos_m) = mount.yaw.sin_cos();
        let ex = mount.x + cos_m * cx - sin_m * cy;
        let ey = mount.y + sin_m * cx + cos_m * cy;
        let phi = wrap_angle(phi_sc + mount.yaw);
        let span = cluster
            .iter()
            .map(|z| {
                let dx = z.d * z.alpha.cos() - cx;
                let dy = z.d * z.alpha.sin() - cy;
                dx.hypot(dy)
            })
            .fold(0.0f64, f64::max)
            * 2.0;
        let lengths =
            if span >= 2.0 { birth.length_observable } else { birth.length_default };
        // a one-aspect cluster pins only the radial velocity; spread the
        // heading over every offset whose implied speed stays plausible,
        // keep each particle's radial projection equal to the fit, and
        // downweight the near-tangential draws whose speeds blow up
        let beta_max = if speed < MAX_BIRTH_SPEED {
            (speed / MAX_BIRTH_SPEED).acos().min(1.55)
        } else {
            0.0
        };
        let mut particles = Vec::with_capacity(birth.budget);
        let mut total_w = 0.0;
        for _ in 0..birth.budget {
            let ext = constraints.project(Extent {
                a: rng.gen_range(1.4..2.5),
                b: rng.gen_range(lengths.0..lengths.1),
            });
            let (dphi, v, w) = if rank_deficient && beta_max > 0.0 {
                let beta: f64 = rng.gen_range(-beta_max..beta_max);
                (beta, speed / beta.cos(), beta.cos())
            } else {
                (rng.gen_range(-0.5..0.5), speed, 1.0)
            };
            total_w += w;
            particles.push(Particle {
                kin: KinematicState {
                    x: ex + rng.gen_range(-1.5..1.5),
                    y: ey + rng.gen_range(-1.5..1.5),
                    phi: wrap_angle(phi + dphi),
                    v: (v + rng.gen_range(-1.0..1.0)).max(0.0),
                    omega: rng.gen_range(-0.6..0.6),
                },
                weight: w,
                extents: vec![ext],
            });
        }
        for p in &mut particles {
            p.weight /= total_w;
        }
        tracks.push(Track {
            label: Label { step, ordinal: tracks.len() as u64 },
            r: birth.r_b,
            particles,
        });
    }
    tracks
}

/// Rigid-body Doppler profile coefficients (c1, c2) of a cluster, with
/// the same coarse rank cutoff as the split test. The flag reports a
/// rank-deficient fit, where (c1, c2) is only the radial component.
fn fit_profile(cluster: &[Detection]) -> Option<(f64, f64, bool)> {
    use nalgebra::{DMatrix, DVector};
    if cluster.is_empty() {
        return None;
    }
    let design = DMatrix::from_fn(cluster.len(), 2, |i, j| {
        if j == 0 {
            cluster[i].alpha.cos()
        } else {
            cluster[i].alpha.sin()
        }
    });
    let rhs = DVector::from_fn(cluster.len(), |i, _| cluster[i].vd);
    let svd = design.svd(true, true);
    let cutoff = 0.1 * svd.singular_values[0];
    let deficient =
        cluster.len() < 2 || svd.singular_values.iter().any(|&s| s <= cutoff);
    let coef = svd.solve(&rhs, cutoff).ok()?;
    Some((coef[0], coef[1], deficient))
}

/// Drop tracks below the existence threshold.
pub fn prune_tracks(lmb: LmbDensity, threshold: f64) -> LmbDensity {
    assert!((0.0..1.0).contains(&threshold));
    let mut lmb = lmb;
    lmb.tracks.retain(|t| t.r >= threshold);
    lmb
}

/// Report the round(sum r) most likely tracks as their mean states.
pub fn extract_estimates(lmb: &LmbDensity) -> Vec<(Label, VehicleState)> {
    let n_hat = lmb.expected_cardinality().round() as usize;
    let mut order: Vec<usize> = (0..lmb.tracks.len()).collect();
    order.sort_by(|&i, &j| {
        lmb.tracks[j]
            .r
            .total_cmp(&lmb.tracks[i].r)
            .then_with(|| lmb.tracks[i].label.cmp(&lmb.tracks[j].label))
    });
    order
        .into_iter()
        .take(n_hat)
        .map(|i| (lmb.tracks[i].label, mean_state(&lmb.tracks[i].particles)))
        .collect()
}

/// Resample any track whose particle count exceeds its budget target or
/// whose effective sample size dropped below half the count.
pub fn resample_tracks<R: Rng + ?Sized>(
    lmb: &mut LmbDensity,
    budget: &ParticleBudget,
    rng: &mut R,
) {
    for t in &mut lmb.tracks {
        let count = t.particles.len();
        let target = budget.next_target(count.min(budget.birth)).min(count.max(budget.steady));
        let ess = effective_sample_size(&t.particles);
        if count > target || ess < 0.5 * count as f64 {
            t.particles = resample(&t.particles, target, rng);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::ReducedMeasurement;
    use crate::vgm::{StudentComponent, StudentMixture};
    use crate::radar::RadarModel;
    use nalgebra::{DMatrix, DVector};
    use rand::SeedableRng;
    use rand_chacha::ChaCha12Rng;

    fn mount() -> SensorMount {
        SensorMount { x: 0.0, y: 0.0, yaw: 0.0, opening_angle: 2.6, max_range: 60.0, rate: 20.0 }
    }

    fn toy_model() -> RadarModel {
        let prec = DMatrix::from_diagonal(&DVector::from_vec(vec![40.0, 30.0, 2.0, 0.4]));
        let mix = StudentMixture::new(vec![StudentComponent {
            weight: 1.0,
            location: DVector::from_vec(vec![0.3, 0.0, 0.0, 0.0]),
            precision: prec,
            dof: 9.0,
        }])
        .unwrap();
        RadarModel::new(mix, 5.0).unwrap()
    }

    fn cloud<R: Rng>(center: &KinematicState, ext: Extent, n: usize, rng: &mut R) -> Vec<Particle> {
        (0..n)
            .map(|_| Particle {
                kin: KinematicState {
                    x: center.x + rng.gen_range(-0.5..0.5),
                    y: center.y + rng.gen_range(-0.5..0.5),
                    phi: center.phi + rng.gen_range(-0.1..0.1),
                    v: center.v + rng.gen_range(-0.5..0.5),
                    omega: center.omega,
                },
                weight: 1.0 / n as f64,
                extents: vec![ext],
            })
            .collect()
    }

    fn track(label: Label, r: f64, particles: Vec<Particle>) -> Track {
        Track { label, r, particles }
    }

    fn lab(step: u64, ordinal: u64) -> Label {
        Label { step, ordinal }
    }

    #[test]
    fn prediction_identity_under_unit_survival() {
        let mut rng = ChaCha12Rng::seed_from_u64(20);
        let k = KinematicState { x: 10.0, y: 2.0, phi: 0.3, v: 6.0, omega: 0.1 };
        let lmb = LmbDensity {
            tracks: vec![track(lab(0, 0), 0.7, cloud(&k, Extent { a: 2.0, b: 4.5 }, 20, &mut rng))],
        };
        let before = lmb.tracks[0].clone();
        let out = predict(
            lmb,
            0.0,
            &EgoMotion::default(),
            Vec::new(),
            |_| 1.0,
            &NoiseBounds::ZERO,
            0.0,
            &ExtentConstraints::default(),
            &mut rng,
        );
        assert!((out.tracks[0].r - before.r).abs() < 1e-12);
        for (a, b) in out.tracks[0].particles.iter().zip(&before.particles) {
            assert_eq!(a.kin, b.kin);
            assert_eq!(a.extents, b.extents);
            assert!((a.weight - b.weight).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_survival_scales_existence() {
        let mut rng = ChaCha12Rng::seed_from_u64(21);
        let k = KinematicState { x: 10.0, y: 2.0, phi: 0.3, v: 6.0, omega: 0.1 };
        let lmb = LmbDensity {
            tracks: vec![track(lab(0, 0), 0.8, cloud(&k, Extent { a: 2.0, b: 4.5 }, 20, &mut rng))],
        };
        let out = predict(
            lmb,
            0.05,
            &EgoMotion::default(),
            Vec::new(),
            |_| 0.5,
            &NoiseBounds::ZERO,
            0.0,
            &ExtentConstraints::default(),
            &mut rng,
        );
        assert!((out.tracks[0].r - 0.4).abs() < 1e-12);
    }

    #[test]
    fn survival_model_follows_the_exponential_law() {
        let m = SurvivalModel::default();
        let mounts = [mount()];
        let inside = KinematicState { x: 20.0, y: 0.0, phi: 0.0, v: 5.0, omega: 0.0 };
        let outside = KinematicState { x: -20.0, y: 0.0, phi: 0.0, v: 5.0, omega: 0.0 };
        assert!((m.probability(&inside, 0.05, &mounts) - (-0.005f64).exp()).abs() < 1e-12);
        assert!((m.probability(&outside, 0.05, &mounts) - (-0.5f64).exp()).abs() < 1e-12);
    }

    #[test]
    fn births_are_appended_with_their_labels() {
        let mut rng = ChaCha12Rng::seed_from_u64(22);
        let k = KinematicState { x: 10.0, y: 2.0, phi: 0.3, v: 6.0, omega: 0.1 };
        let lmb = LmbDensity {
            tracks: vec![track(lab(0, 0), 0.7, cloud(&k, Extent { a: 2.0, b: 4.5 }, 10, &mut rng))],
        };
        let b = track(lab(5, 0), 0.1, cloud(&k, Extent { a: 2.0, b: 4.5 }, 10, &mut rng));
        let out = predict(
            lmb,
            0.05,
            &EgoMotion::default(),
            vec![b],
            |_| 1.0,
            &NoiseBounds::ZERO,
            0.0,
            &ExtentConstraints::default(),
            &mut rng,
        );
        assert_eq!(out.tracks.len(), 2);
        assert_eq!(out.tracks[1].label, lab(5, 0));
        assert!((out.tracks[1].r - 0.1).abs() < 1e-12);
    }

    fn state(x: f64, y: f64, phi: f64, a: f64, b: f64) -> VehicleState {
        VehicleState { kin: KinematicState { x, y, phi, v: 0.0, omega: 0.0 }, ext: Extent { a, b } }
    }

    #[test]
    fn distant_rectangles_do_not_overlap() {
        let s1 = state(0.0, 0.0, 0.3, 2.0, 4.5);
        let s2 = state(100.0, 0.0, -0.8, 2.0, 4.5);
        assert!(!rectangles_overlap(&s1, &s2));
        assert!(rectangles_overlap(&s1, &s1));
    }

    fn rect_corners(s: &VehicleState) -> Vec<(f64, f64)> {
        let (sin, cos) = s.kin.phi.sin_cos();
        let mut out = Vec::new();
        for (ox, oy) in [
            (OC_REAR * s.ext.b, -0.5 * s.ext.a),
            (OC_FRONT * s.ext.b, -0.5 * s.ext.a),
            (OC_FRONT * s.ext.b, 0.5 * s.ext.a),
            (OC_REAR * s.ext.b, 0.5 * s.ext.a),
        ] {
            out.push((s.kin.x + cos * ox - sin * oy, s.kin.y + sin * ox + cos * oy));
        }
        out
    }

    /// Convex polygon intersection area by half-plane clipping.
    fn intersection_area(a: &[(f64, f64)], b: &[(f64, f64)]) -> f64 {
        let mut poly: Vec<(f64, f64)> = a.to_vec();
        for i in 0..b.len() {
            let p1 = b[i];
            let p2 = b[(i + 1) % b.len()];
            let inside = |p: (f64, f64)| {
                (p2.0 - p1.0) * (p.1 - p1.1) - (p2.1 - p1.1) * (p.0 - p1.0) >= 0.0
            };
            let mut next = Vec::new();
            for j in 0..poly.len() {
                let cur = poly[j];
                let prev = poly[(j + poly.len() - 1) % poly.len()];
                let cur_in = inside(cur);
                let prev_in = inside(prev);
                if cur_in != prev_in {
                    let dx = cur.0 - prev.0;
                    let dy = cur.1 - prev.1;
                    let denom = (p2.0 - p1.0) * dy - (p2.1 - p1.1) * dx;
                    let t = ((p2.0 - p1.0) * (p1.1 - prev.1) - (p2.1 - p1.1) * (p1.0 - prev.0))
                        / denom;
                    next.push((prev.0 + t * dx, prev.1 + t * dy));
                }
                if cur_in {
                    next.push(cur);
                }
            }
            poly = next;
            if poly.is_empty() {
                return 0.0;
            }
        }
        let mut area = 0.0;
        for i in 0..poly.len() {
            let (x1, y1) = poly[i];
            let (x2, y2) = poly[(i + 1) % poly.len()];
            area += x1 * y2 - x2 * y1;
        }
        0.5 * area.abs()
    }

    #[test]
    fn separating_axis_matches_polygon_clipping() {
        let mut rng = ChaCha12Rng::seed_from_u64(23);
        let mut overlaps = 0;
        for _ in 0..1000 {
            let s1 = state(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-3.2..3.2),
                rng.gen_range(1.4..2.5),
                rng.gen_range(2.5..7.0),
            );
            let s2 = state(
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-5.0..5.0),
                rng.gen_range(-3.2..3.2),
                rng.gen_range(1.4..2.5),
                rng.gen_range(2.5..7.0),
            );
            let got = rectangles_overlap(&s1, &s2);
            let area = intersection_area(&rect_corners(&s1), &rect_corners(&s2));
            assert_eq!(got, area > 1e-12, "area {area}");
            overlaps += got as usize;
        }
        // geometry must exercise both branches
        assert!(overlaps > 100 && overlaps < 900, "{overlaps}");
    }

    #[test]
    fn hypothesis_enumeration_matches_exhaustive_weights() {
        let mut rng = ChaCha12Rng::seed_from_u64(24);
        let k = KinematicState { x: 10.0, y: 0.0, phi: 0.0, v: 5.0, omega: 0.0 };
        let rs = [0.9, 0.4, 0.7, 0.2];
        let lmb = LmbDensity {
            tracks: rs
                .iter()
                .enumerate()
                .map(|(i, &r)| {
                    track(lab(0, i as u64), r, cloud(&k, Extent { a: 2.0, b: 4.5 }, 5, &mut rng))
                })
                .collect(),
        };
        let hyps = enumerate_prior_hypotheses(&lmb, 100);
        assert_eq!(hyps.len(), 16);
        let total: f64 = hyps.iter().map(|h| h.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);
        // each subset weight is the Bernoulli product
        for h in &hyps {
            let mut want = 1.0;
            for i in 0..rs.len() {
                if h.track_idxs.contains(&i) {
                    want *= rs[i];
                } else {
                    want *= 1.0 - rs[i];
                }
            }
            assert!((h.weight - want).abs() < 1e-12);
        }
        // non-increasing weight order
        for pair in hyps.windows(2) {
            assert!(pair[0].weight >= pair[1].weight - 1e-12);
        }
        // capping keeps the heaviest prefix
        let top = enumerate_prior_hypotheses(&lmb, 5);
        let renorm: f64 = hyps[..5].iter().map(|h| h.weight).sum();
        for (a, b) in top.iter().zip(&hyps[..5]) {
            assert_eq!(a.track_idxs, b.track_idxs);
            assert!((a.weight - b.weight / renorm).abs() < 1e-12);
        }
    }

    #[test]
    fn feasibility_zeroes_overlapping_sets() {
        let mut rng = ChaCha12Rng::seed_from_u64(25);
        let k1 = KinematicState { x: 10.0, y: 0.0, phi: 0.0, v: 5.0, omega: 0.0 };
        let lmb = LmbDensity {
            tracks: vec![
                track(lab(0, 0), 0.9, cloud(&k1, Extent { a: 2.0, b: 4.5 }, 30, &mut rng)),
                track(lab(0, 1), 0.8, cloud(&k1, Extent { a: 2.0, b: 4.5 }, 30, &mut rng)),
            ],
        };
        let hyps = enumerate_prior_hypotheses(&lmb, 100);
        let conditioned = feasibility_condition(hyps, &lmb).unwrap();
        assert!(conditioned.iter().all(|h| h.track_idxs.len() < 2));
        let total: f64 = conditioned.iter().map(|h| h.weight).sum();
        assert!((total - 1.0).abs() < 1e-12);

        // far apart: nothing changes
        let k2 = KinematicState { x: 110.0, y: 0.0, phi: 0.0, v: 5.0, omega: 0.0 };
        let lmb2 = LmbDensity {
            tracks: vec![
                track(lab(0, 0), 0.9, cloud(&k1, Extent { a: 2.0, b: 4.5 }, 30, &mut rng)),
                track(lab(0, 1), 0.8, cloud(&k2, Extent { a: 2.0, b: 4.5 }, 30, &mut rng)),
            ],
        };
        let hyps2 = enumerate_prior_hypotheses(&lmb2, 100);
        let before: Vec<f64> = hyps2.iter().map(|h| h.weight).collect();
        let after = feasibility_condition(hyps2, &lmb2).unwrap();
        for (h, w) in after.iter().zip(&before) {
            assert!((h.weight - w).abs() < 1e-12);
        }
    }

    fn ctx<'a>(
        eval: &'a RadarEvaluator,
        clutter: &'a ClutterModel,
        profile: &'a DetectionProfile,
        m: &'a SensorMount,
    ) -> UpdateContext<'a> {
        UpdateContext { eval, clutter, profile, mount: m, k_best: 100, assoc_gate: None }
    }

    #[test]
    fn empty_prior_passes_through() {
        let model = toy_model();
        let eval = RadarEvaluator::new(&model).unwrap();
        let clutter = ClutterModel::new(2000.0, 25.0).unwrap();
        let profile = DetectionProfile::default();
        let m = mount();
        let lmb = LmbDensity::default();
        let prior = enumerate_prior_hypotheses(&lmb, 100);
        let detections = vec![Detection { d: 20.0, alpha: 0.1, vd: 3.0 }];
        let partitions = vec![Partition { clusters: vec![vec![0]] }];
        let post = update(&prior, &lmb, &detections, &partitions, &ctx(&eval, &clutter, &profile, &m))
            .unwrap();
        assert_eq!(post.hypotheses.len(), 1);
        assert!((post.hypotheses[0].weight - 1.0).abs() < 1e-12);
        assert!(post.hypotheses[0].tracks.is_empty());
    }

    #[test]
    fn misdetection_updates_existence_by_the_closed_form() {
        let model = toy_model();
        let eval = RadarEvaluator::new(&model).unwrap();
        let clutter = ClutterModel::new(2000.0, 25.0).unwrap();
        let profile = DetectionProfile::default();
        let m = mount();
        let mut rng = ChaCha12Rng::seed_from_u64(26);
        let k = KinematicState { x: 20.0, y: 0.0, phi: 0.1, v: 6.0, omega: 0.0 };
        let r = 0.6;
        let lmb = LmbDensity {
            tracks: vec![track(lab(0, 0), r, cloud(&k, Extent { a: 2.0, b: 4.5 }, 40, &mut rng))],
        };
        let prior = enumerate_prior_hypotheses(&lmb, 100);
        let post =
            update(&prior, &lmb, &[], &[], &ctx(&eval, &clutter, &profile, &m)).unwrap();
        let collapsed = lmb_approximate(&post);
        // all particles sit deep inside the field of view: p_D = 0.8
        let psi0 = 1.0 - 0.8 * (1.0 - (-5.0f64).exp());
        let want = r * psi0 / (1.0 - r + r * psi0);
        assert_eq!(collapsed.tracks.len(), 1);
        assert!(
            (collapsed.tracks[0].r - want).abs() < 1e-12,
            "{} vs {want}",
            collapsed.tracks[0].r
        );
        let wsum: f64 = post.hypotheses.iter().map(|h| h.weight).sum();
        assert!((wsum - 1.0).abs() < 1e-12);
    }

    /// Direct Bayes posterior over association families for small cases,
    /// built from the generic likelihood path instead of the filter's
    /// evaluator and enumeration.
    fn oracle_families(
        lmb: &LmbDensity,
        detections: &[Detection],
        model: &RadarModel,
        clutter: &ClutterModel,
        profile: &DetectionProfile,
        m: &SensorMount,
    ) -> HashMap<Vec<(Label, Option<Vec<usize>>)>, f64> {
        let n = lmb.tracks.len();
        let nz = detections.len();
        let e_lt = (-model.lambda_t()).exp();
        let eta_det = |t: &Track, subset: &[usize]| -> f64 {
            let cluster: Vec<Detection> = subset.iter().map(|&i| detections[i]).collect();
            t.particles
                .iter()
                .map(|p| {
                    let pd = profile.probability(&p.kin, m);
                    if pd == 0.0 {
                        return 0.0;
                    }
                    let mut acc = 0.0;
                    for ext in &p.extents {
                        let s = VehicleState { kin: p.kin, ext: *ext }.in_sensor_frame(m);
                        acc += model
                            .log_likelihood_ratio(clutter, &cluster, &s)
                            .map(f64::exp)
                            .unwrap_or(0.0);
                    }
                    p.weight * pd * acc / p.extents.len() as f64
                })
                .sum()
        };
        let eta_mis = |t: &Track| -> f64 {
            t.particles
                .iter()
                .map(|p| {
                    let pd = profile.probability(&p.kin, m);
                    p.weight * (1.0 - pd * (1.0 - e_lt))
                })
                .sum()
        };
        // enumerate per track: absent, misdetected, or any nonempty subset
        // of unclaimed detections
        let mut out: HashMap<Vec<(Label, Option<Vec<usize>>)>, f64> = HashMap::new();
        #[allow(clippy::too_many_arguments)]
        fn rec(
            t: usize,
            n: usize,
            nz: usize,
            claimed: &mut Vec<bool>,
            family: &mut Vec<(Label, Option<Vec<usize>>)>,
            weight: f64,
            lmb: &LmbDensity,
            eta_det: &dyn Fn(&Track, &[usize]) -> f64,
            eta_mis: &dyn Fn(&Track) -> f64,
            out: &mut HashMap<Vec<(Label, Option<Vec<usize>>)>, f64>,
        ) {
            if t == n {
                let mut key = family.clone();
                key.sort_by(|a, b| a.0.cmp(&b.0));
                *out.entry(key).or_insert(0.0) += weight;
                return;
            }
            let tr = &lmb.tracks[t];
            // absent
            rec(t + 1, n, nz, claimed, family, weight * (1.0 - tr.r), lmb, eta_det, eta_mis, out);
            // present, misdetected
            family.push((tr.label, None));
            rec(
                t + 1,
                n,
                nz,
                claimed,
                family,
                weight * tr.r * eta_mis(tr),
                lmb,
                eta_det,
                eta_mis,
                out,
            );
            family.pop();
            // present with each nonempty subset of free detections
            let free: Vec<usize> = (0..nz).filter(|&z| !claimed[z]).collect();
            for mask in 1u32..(1 << free.len()) {
                let subset: Vec<usize> =
                    free.iter().enumerate().filter(|(i, _)| mask >> i & 1 == 1).map(|(_, &z)| z).collect();
                for &z in &subset {
                    claimed[z] = true;
                }
                family.push((tr.label, Some(subset.clone())));
                let w = weight * tr.r * eta_det(tr, &subset);
                rec(t + 1, n, nz, claimed, family, w, lmb, eta_det, eta_mis, out);
                family.pop();
                for &z in &subset {
                    claimed[z] = false;
                }
            }
        }
        let mut claimed = vec![false; nz];
        let mut family = Vec::new();
        rec(0, n, nz, &mut claimed, &mut family, 1.0, lmb, &eta_det, &eta_mis, &mut out);
        let total: f64 = out.values().sum();
        for v in out.values_mut() {
            *v /= total;
        }
        out
    }

    /// All set partitions of 0..n.
    fn all_partitions(n: usize) -> Vec<Partition> {
        let mut out = Vec::new();
        let mut clusters: Vec<Vec<usize>> = Vec::new();
        fn rec(i: usize, n: usize, clusters: &mut Vec<Vec<usize>>, out: &mut Vec<Partition>) {
            if i == n {
                let mut p = Partition { clusters: clusters.clone() };
                p.canonicalize();
                out.push(p);
                return;
            }
            for c in 0..clusters.len() {
                clusters[c].push(i);
                rec(i + 1, n, clusters, out);
                clusters[c].pop();
            }
            clusters.push(vec![i]);
            rec(i + 1, n, clusters, out);
            clusters.pop();
        }
        rec(0, n, &mut clusters, &mut out);
        if out.is_empty() {
            out.push(Partition { clusters: Vec::new() });
        }
        out
    }

    #[test]
    fn update_matches_exhaustive_bayes_on_small_cases() {
        let model = toy_model();
        let eval = RadarEvaluator::new(&model).unwrap();
        let clutter = ClutterModel::new(2000.0, 25.0).unwrap();
        let profile = DetectionProfile::default();
        let m = mount();
        let mut rng = ChaCha12Rng::seed_from_u64(27);
        let k1 = KinematicState { x: 18.0, y: -2.0, phi: 0.2, v: 6.0, omega: 0.0 };
        let k2 = KinematicState { x: 24.0, y: 4.0, phi: -0.4, v: 5.0, omega: 0.0 };
        let lmb = LmbDensity {
            tracks: vec![
                track(lab(0, 0), 0.7, cloud(&k1, Extent { a: 2.0, b: 4.5 }, 8, &mut rng)),
                track(lab(0, 1), 0.5, cloud(&k2, Extent { a: 1.9, b: 4.2 }, 8, &mut rng)),
            ],
        };
        let s1 = VehicleState { kin: k1, ext: Extent { a: 2.0, b: 4.5 } };
        let detections = vec![
            s1.inverse_reduce(&ReducedMeasurement { zx: 0.3, zy: 0.1, zd: 0.2 }).unwrap(),
            s1.inverse_reduce(&ReducedMeasurement { zx: 0.5, zy: -0.2, zd: -0.3 }).unwrap(),
            Detection { d: 25.0, alpha: 0.18, vd: 3.0 },
        ];
        let partitions = all_partitions(detections.len());
        let prior = enumerate_prior_hypotheses(&lmb, 100);
        let post = update(&prior, &lmb, &detections, &partitions, &ctx(&eval, &clutter, &profile, &m))
            .unwrap();

        let want = oracle_families(&lmb, &detections, &model, &clutter, &profile, &m);
        let mut got: HashMap<Vec<(Label, Option<Vec<usize>>)>, f64> = HashMap::new();
        for h in &post.hypotheses {
            let (p_idx, ref map) = h.provenance;
            let mut key: Vec<(Label, Option<Vec<usize>>)> = h
                .tracks
                .iter()
                .enumerate()
                .map(|(pos, &(label, _))| {
                    (label, map.cluster_of(pos).map(|ci| partitions[p_idx].clusters[ci].clone()))
                })
                .collect();
            key.sort_by(|a, b| a.0.cmp(&b.0));
            *got.entry(key).or_insert(0.0) += h.weight;
        }
        assert_eq!(got.len(), want.len(), "family count");
        for (key, w) in &want {
            let g = got.get(key).copied().unwrap_or(0.0);
            assert!(
                (g - w).abs() <= 1e-9 * w.abs().max(1e-12).max(g.abs()) + 1e-13,
                "family {key:?}: got {g}, want {w}"
            );
        }
        let wsum: f64 = post.hypotheses.iter().map(|h| h.weight).sum();
        assert!((wsum - 1.0).abs() < 1e-12);
    }

    #[test]
    fn update_is_exchangeable_in_detection_order() {
        let model = toy_model();
        let eval = RadarEvaluator::new(&model).unwrap();
        let clutter = ClutterModel::new(2000.0, 25.0).unwrap();
        let profile = DetectionProfile::default();
        let m = mount();
        let mut rng = ChaCha12Rng::seed_from_u64(28);
        let k1 = KinematicState { x: 18.0, y: -2.0, phi: 0.2, v: 6.0, omega: 0.0 };
        let lmb = LmbDensity {
            tracks: vec![track(lab(0, 0), 0.7, cloud(&k1, Extent { a: 2.0, b: 4.5 }, 8, &mut rng))],
        };
        let s1 = VehicleState { kin: k1, ext: Extent { a: 2.0, b: 4.5 } };
        let detections = vec![
            s1.inverse_reduce(&ReducedMeasurement { zx: 0.3, zy: 0.1, zd: 0.2 }).unwrap(),
            s1.inverse_reduce(&ReducedMeasurement { zx: 0.5, zy: -0.2, zd: -0.3 }).unwrap(),
            Detection { d: 25.0, alpha: 0.18, vd: 3.0 },
        ];
        let c = ctx(&eval, &clutter, &profile, &m);
        let prior = enumerate_prior_hypotheses(&lmb, 100);
        let post1 =
            update(&prior, &lmb, &detections, &all_partitions(3), &c).unwrap();
        let permuted = vec![detections[2], detections[0], detections[1]];
        let post2 =
            update(&prior, &lmb, &permuted, &all_partitions(3), &c).unwrap();
        let mut w1: Vec<f64> = post1.hypotheses.iter().map(|h| h.weight).collect();
        let mut w2: Vec<f64> = post2.hypotheses.iter().map(|h| h.weight).collect();
        w1.sort_by(f64::total_cmp);
        w2.sort_by(f64::total_cmp);
        assert_eq!(w1.len(), w2.len());
        for (a, b) in w1.iter().zip(&w2) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn lmb_collapse_preserves_marginals() {
        // hand-built two-hypothesis posterior
        let mut rng = ChaCha12Rng::seed_from_u64(29);
        let k = KinematicState { x: 10.0, y: 0.0, phi: 0.0, v: 5.0, omega: 0.0 };
        let d0 = cloud(&k, Extent { a: 2.0, b: 4.5 }, 6, &mut rng);
        let d1 = cloud(&k, Extent { a: 2.0, b: 4.5 }, 6, &mut rng);
        let posterior = GlmbPosterior {
            hypotheses: vec![
                GlmbHypothesis {
                    weight: 0.3,
                    tracks: vec![(lab(0, 0), 0)],
                    provenance: (0, AssociationMap(vec![0])),
                },
                GlmbHypothesis {
                    weight: 0.7,
                    tracks: vec![(lab(0, 0), 0), (lab(0, 1), 1)],
                    provenance: (0, AssociationMap(vec![0, 0])),
                },
            ],
            densities: vec![d0.clone(), d1.clone()],
        };
        let lmb = lmb_approximate(&posterior);
        assert_eq!(lmb.tracks.len(), 2);
        assert!((lmb.tracks[0].r - 1.0).abs() < 1e-12);
        assert!((lmb.tracks[1].r - 0.7).abs() < 1e-12);
        // expected cardinality preserved
        let e_card: f64 = posterior
            .hypotheses
            .iter()
            .map(|h| h.weight * h.tracks.len() as f64)
            .sum();
        assert!((lmb.expected_cardinality() - e_card).abs() < 1e-12);
        // single density per label here, so the particle set is unchanged
        for (a, b) in lmb.tracks[0].particles.iter().zip(&d0) {
            assert_eq!(a.kin, b.kin);
            assert!((a.weight - b.weight).abs() < 1e-15);
        }
        // first moment preserved when densities mix
        let m0 = mean_state(&lmb.tracks[1].particles);
        let m1 = mean_state(&d1);
        assert!((m0.kin.x - m1.kin.x).abs() < 1e-12);
    }

    #[test]
    fn birth_proposals_follow_the_gating_rules() {
        let m = mount();
        let birth = BirthModel { budget: 50, ..BirthModel::default() };
        let mut rng = ChaCha12Rng::seed_from_u64(30);
        // posterior with one hypothesis claiming detections 0 and 1
        let partitions = vec![Partition { clusters: vec![vec![0, 1], vec![2, 3], vec![4]] }];
        let posterior = GlmbPosterior {
            hypotheses: vec![GlmbHypothesis {
                weight: 1.0,
                tracks: vec![(lab(0, 0), 0)],
                provenance: (0, AssociationMap(vec![1])),
            }],
            densities: vec![Vec::new()],
        };
        let detections = vec![
            Detection { d: 10.0, alpha: 0.0, vd: 4.0 },
            Detection { d: 10.3, alpha: 0.02, vd: 4.1 },
            Detection { d: 25.0, alpha: 0.5, vd: 5.0 },
            Detection { d: 25.4, alpha: 0.52, vd: 5.1 },
            Detection { d: 40.0, alpha: -0.5, vd: 6.0 },
        ];
        let births =
            birth_proposals(&detections, &partitions, &posterior, &m, &birth, 7, &mut rng);
        // cluster {0,1} is used, {4} is a singleton: only {2,3} births
        assert_eq!(births.len(), 1);
        assert_eq!(births[0].label, lab(7, 0));
        assert!((births[0].r - 0.1).abs() < 1e-12);
        assert_eq!(births[0].particles.len(), 50);
        let w: f64 = births[0].particles.iter().map(|p| p.weight).sum();
        assert!((w - 1.0).abs() < 1e-12);

        // slow cluster: no birth
        let slow = vec![
            Detection { d: 25.0, alpha: 0.5, vd: 0.2 },
            Detection { d: 25.4, alpha: 0.52, vd: 0.25 },
        ];
        let parts = vec![Partition { clusters: vec![vec![0, 1]] }];
        let empty_post = GlmbPosterior {
            hypotheses: vec![GlmbHypothesis {
                weight: 1.0,
                tracks: Vec::new(),
                provenance: (0, AssociationMap(Vec::new())),
            }],
            densities: Vec::new(),
        };
        let none = birth_proposals(&slow, &parts, &empty_post, &m, &birth, 8, &mut rng);
        assert!(none.is_empty());
    }

    #[test]
    fn prune_drops_weak_tracks() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let k = KinematicState { x: 10.0, y: 0.0, phi: 0.0, v: 5.0, omega: 0.0 };
        let lmb = LmbDensity {
            tracks: vec![
                track(lab(0, 0), 0.009, cloud(&k, Extent { a: 2.0, b: 4.5 }, 3, &mut rng)),
                track(lab(0, 1), 0.011, cloud(&k, Extent { a: 2.0, b: 4.5 }, 3, &mut rng)),
            ],
        };
        let out = prune_tracks(lmb, 0.01);
        assert_eq!(out.tracks.len(), 1);
        assert_eq!(out.tracks[0].label, lab(0, 1));
        assert!(prune_tracks(LmbDensity::default(), 0.01).tracks.is_empty());
    }

    #[test]
    fn extraction_rounds_the_expected_cardinality() {
        let mut rng = ChaCha12Rng::seed_from_u64(32);
        let k = KinematicState { x: 10.0, y: 0.0, phi: 0.0, v: 5.0, omega: 0.0 };
        let mk = |r: f64, o: u64, rng: &mut ChaCha12Rng| {
            track(lab(0, o), r, cloud(&k, Extent { a: 2.0, b: 4.5 }, 3, rng))
        };
        let lmb = LmbDensity { tracks: vec![mk(0.5, 0, &mut rng), mk(0.5, 1, &mut rng)] };
        let est = extract_estimates(&lmb);
        assert_eq!(est.len(), 1);
        assert_eq!(est[0].0, lab(0, 0));
        let lmb2 = LmbDensity { tracks: vec![mk(0.99, 0, &mut rng), mk(0.98, 1, &mut rng)] };
        assert_eq!(extract_estimates(&lmb2).len(), 2);
    }

    #[test]
    fn k_best_mass_is_monotone_in_k() {
        let model = toy_model();
        let eval = RadarEvaluator::new(&model).unwrap();
        let clutter = ClutterModel::new(2000.0, 25.0).unwrap();
        let profile = DetectionProfile::default();
        let m = mount();
        let mut rng = ChaCha12Rng::seed_from_u64(33);
        let k1 = KinematicState { x: 18.0, y: -2.0, phi: 0.2, v: 6.0, omega: 0.0 };
        let k2 = KinematicState { x: 24.0, y: 4.0, phi: -0.4, v: 5.0, omega: 0.0 };
        let lmb = LmbDensity {
            tracks: vec![
                track(lab(0, 0), 0.7, cloud(&k1, Extent { a: 2.0, b: 4.5 }, 6, &mut rng)),
                track(lab(0, 1), 0.5, cloud(&k2, Extent { a: 1.9, b: 4.2 }, 6, &mut rng)),
            ],
        };
        let s1 = VehicleState { kin: k1, ext: Extent { a: 2.0, b: 4.5 } };
        let detections = vec![
            s1.inverse_reduce(&ReducedMeasurement { zx: 0.3, zy: 0.1, zd: 0.2 }).unwrap(),
            Detection { d: 25.0, alpha: 0.18, vd: 3.0 },
        ];
        let partitions = all_partitions(2);
        let prior = enumerate_prior_hypotheses(&lmb, 100);
        // unnormalized captured mass grows with k: compare the total of
        // the k-best run against the full run restricted to k
        let full = update(
            &prior,
            &lmb,
            &detections,
            &partitions,
            &UpdateContext { k_best: 1000, ..ctx(&eval, &clutter, &profile, &m) },
        )
        .unwrap();
        let mut prev = 0.0;
        for k in 1..=4 {
            let part = update(
                &prior,
                &lmb,
                &detections,
                &partitions,
                &UpdateContext { k_best: k, ..ctx(&eval, &clutter, &profile, &m) },
            )
            .unwrap();
            // measure captured families against the full posterior
            let mut captured = 0.0;
            for h in &part.hypotheses {
                let (p_idx, ref map) = h.provenance;
                let key: Vec<(Label, Option<Vec<usize>>)> = h
                    .tracks
                    .iter()
                    .enumerate()
                    .map(|(pos, &(label, _))| {
                        (label, map.cluster_of(pos).map(|ci| partitions[p_idx].clusters[ci].clone()))
                    })
                    .collect();
                for fh in &full.hypotheses {
                    let (fp, ref fm) = fh.provenance;
                    let fkey: Vec<(Label, Option<Vec<usize>>)> = fh
                        .tracks
                        .iter()
                        .enumerate()
                        .map(|(pos, &(label, _))| {
                            (label, fm.cluster_of(pos).map(|ci| partitions[fp].clusters[ci].clone()))
                        })
                        .collect();
                    if key == fkey {
                        captured += fh.weight;
                        break;
                    }
                }
            }
            assert!(captured >= prev - 1e-12, "k {k}: {captured} < {prev}");
            prev = captured;
        }
        assert!(prev > 0.9, "k=4 should capture nearly everything, got {prev}");
    }

    #[test]
    fn resampling_respects_the_budget_schedule() {
        let mut rng = ChaCha12Rng::seed_from_u64(34);
        let k = KinematicState { x: 10.0, y: 0.0, phi: 0.0, v: 5.0, omega: 0.0 };
        let mut lmb = LmbDensity {
            tracks: vec![track(lab(0, 0), 0.5, cloud(&k, Extent { a: 2.0, b: 4.5 }, 900, &mut rng))],
        };
        let budget = ParticleBudget::default();
        for want in [800, 700, 600, 500, 400, 300, 300] {
            resample_tracks(&mut lmb, &budget, &mut rng);
            assert_eq!(lmb.tracks[0].particles.len(), want);
        }
    }
}
