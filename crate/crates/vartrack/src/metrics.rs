//! Evaluation of a track stream against ground truth: per-state RMSE over
//! gated nearest-position matches, a cardinality-error histogram, and the
//! fraction of countable truths that were tracked.
//!
//! A truth target counts toward cardinality when it moves faster than
//! 1 m/s and lies inside at least one sensor's field of view.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, SensorMount, VehicleState};
use crate::io::{truth_at, TrackRecord, TruthFrame};

pub const MATCH_GATE: f64 = 2.5;
pub const COUNT_SPEED: f64 = 1.0;

/// Root-mean-square errors of the matched estimates, one per state
/// component; angles in radians.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct StateRmse {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
    pub v: f64,
    pub omega: f64,
    pub a: f64,
    pub b: f64,
}

/// Shares of update steps by estimated-minus-true cardinality, clamped to
/// the open-ended outer bins. Shares sum to one.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
pub struct CardinalityHistogram {
    pub minus_two: f64,
    pub minus_one: f64,
    pub zero: f64,
    pub plus_one: f64,
    pub plus_two: f64,
}

impl CardinalityHistogram {
    pub fn shares(&self) -> [f64; 5] {
        [self.minus_two, self.minus_one, self.zero, self.plus_one, self.plus_two]
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
pub struct MetricsReport {
    pub rmse: StateRmse,
    pub cardinality: CardinalityHistogram,
    /// fraction of countable truth appearances with a matched estimate
    pub availability: f64,
    pub steps: usize,
    pub matched_pairs: usize,
}

/// Greedy nearest-position matching inside the gate: repeatedly take the
/// globally closest unmatched (estimate, truth) pair.
fn match_pairs(estimates: &[VehicleState], truths: &[VehicleState], gate: f64) -> Vec<(usize, usize)> {
    let mut cands: Vec<(f64, usize, usize)> = Vec::new();
    for (i, e) in estimates.iter().enumerate() {
        for (j, t) in truths.iter().enumerate() {
            let d = (e.kin.x - t.kin.x).hypot(e.kin.y - t.kin.y);
            if d <= gate {
                cands.push((d, i, j));
            }
        }
    }
    cands.sort_by(|a, b| a.0.total_cmp(&b.0));
    let mut used_e = vec![false; estimates.len()];
    let mut used_t = vec![false; truths.len()];
    let mut out = Vec::new();
    for (_, i, j) in cands {
        if !used_e[i] && !used_t[j] {
            used_e[i] = true;
            used_t[j] = true;
            out.push((i, j));
        }
    }
    out
}

/// Compare a track stream against interpolated truth frames.
pub fn evaluate(
    records: &[TrackRecord],
    truths: &[TruthFrame],
    mounts: &[SensorMount],
) -> Result<MetricsReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput("track records"));
    }
    if truths.is_empty() {
        return Err(Error::EmptyInput("truth frames"));
    }
    let mut sq = StateRmse::default();
    let mut matched = 0usize;
    let mut hist = [0usize; 5];
    let mut steps = 0usize;
    let mut countable = 0usize;
    let mut available = 0usize;
    for rec in records {
        let Some(frame) = truth_at(truths, rec.t) else { continue };
        let counted: Vec<VehicleState> = frame
            .targets
            .iter()
            .map(|t| t.state())
            .filter(|s| {
                s.kin.v.abs() > COUNT_SPEED
                    && mounts.iter().any(|m| m.contains(s.kin.x, s.kin.y))
            })
            .collect();
        let estimates: Vec<VehicleState> = rec.tracks.iter().map(|t| t.state.state()).collect();
        steps += 1;
        let err = estimates.len() as i64 - counted.len() as i64;
        hist[(err.clamp(-2, 2) + 2) as usize] += 1;
        countable += counted.len();
        let pairs = match_pairs(&estimates, &counted, MATCH_GATE);
        available += pairs.len();
        for (i, j) in pairs {
            let e = &estimates[i];
            let t = &counted[j];
            sq.x += (e.kin.x - t.kin.x).powi(2);
            sq.y += (e.kin.y - t.kin.y).powi(2);
            sq.phi += wrap_angle(e.kin.phi - t.kin.phi).powi(2);
            sq.v += (e.kin.v - t.kin.v).powi(2);
            sq.omega += (e.kin.omega - t.kin.omega).powi(2);
            sq.a += (e.ext.a - t.ext.a).powi(2);
            sq.b += (e.ext.b - t.ext.b).powi(2);
            matched += 1;
        }
    }
    if steps == 0 {
        return Err(Error::EmptyInput("no record matched a truth time"));
    }
    let rmse = if matched > 0 {
        let n = matched as f64;
        StateRmse {
            x: (sq.x / n).sqrt(),
            y: (sq.y / n).sqrt(),
            phi: (sq.phi / n).sqrt(),
            v: (sq.v / n).sqrt(),
            omega: (sq.omega / n).sqrt(),
            a: (sq.a / n).sqrt(),
            b: (sq.b / n).sqrt(),
        }
    } else {
        StateRmse::default()
    };
    let s = steps as f64;
    Ok(MetricsReport {
        rmse,
        cardinality: CardinalityHistogram {
            minus_two: hist[0] as f64 / s,
            minus_one: hist[1] as f64 / s,
            zero: hist[2] as f64 / s,
            plus_one: hist[3] as f64 / s,
            plus_two: hist[4] as f64 / s,
        },
        availability: if countable > 0 { available as f64 / countable as f64 } else { 1.0 },
        steps,
        matched_pairs: matched,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{Extent, KinematicState};
    use crate::io::{TrackEntry, TrackState, TruthTarget};

    fn mounts() -> Vec<SensorMount> {
        vec![SensorMount {
            x: 0.0,
            y: 0.0,
            yaw: 0.0,
            opening_angle: 2.8,
            max_range: 60.0,
            rate: 20.0,
        }]
    }

    fn truth_frame(t: f64, states: &[VehicleState]) -> TruthFrame {
        TruthFrame {
            t,
            targets: states
                .iter()
                .enumerate()
                .map(|(i, s)| TruthTarget::from_state(i, s))
                .collect(),
            ego: KinematicState { x: 0.0, y: 0.0, phi: 0.0, v: 0.0, omega: 0.0 },
        }
    }

    fn record(t: f64, states: &[VehicleState]) -> TrackRecord {
        TrackRecord {
            t,
            tracks: states
                .iter()
                .enumerate()
                .map(|(i, s)| TrackEntry {
                    label: (0, i as u64),
                    r: 1.0,
                    state: TrackState::from_state(s),
                })
                .collect(),
            expected_cardinality: states.len() as f64,
        }
    }

    fn car(x: f64, y: f64) -> VehicleState {
        VehicleState {
            kin: KinematicState { x, y, phi: 0.4, v: 7.0, omega: 0.1 },
            ext: Extent { a: 1.8, b: 4.5 },
        }
    }

    #[test]
    fn perfect_tracks_score_zero_error() {
        let states = vec![car(20.0, 3.0), car(35.0, -4.0)];
        let truths: Vec<TruthFrame> =
            (0..10).map(|k| truth_frame(k as f64 * 0.1, &states)).collect();
        let records: Vec<TrackRecord> =
            (0..10).map(|k| record(k as f64 * 0.1, &states)).collect();
        let rep = evaluate(&records, &truths, &mounts()).unwrap();
        assert_eq!(rep.rmse.x, 0.0);
        assert_eq!(rep.rmse.phi, 0.0);
        assert_eq!(rep.rmse.b, 0.0);
        assert_eq!(rep.cardinality.zero, 1.0);
        assert_eq!(rep.availability, 1.0);
        assert_eq!(rep.matched_pairs, 20);
    }

    #[test]
    fn uniform_shift_appears_as_position_rmse() {
        let truth_state = vec![car(20.0, 3.0)];
        let shifted = vec![car(21.0, 3.0)];
        let truths: Vec<TruthFrame> =
            (0..5).map(|k| truth_frame(k as f64 * 0.1, &truth_state)).collect();
        let records: Vec<TrackRecord> =
            (0..5).map(|k| record(k as f64 * 0.1, &shifted)).collect();
        let rep = evaluate(&records, &truths, &mounts()).unwrap();
        assert!((rep.rmse.x - 1.0).abs() < 1e-12);
        assert_eq!(rep.rmse.y, 0.0);
        assert_eq!(rep.availability, 1.0);
    }

    #[test]
    fn cardinality_histogram_buckets_the_error() {
        let one = vec![car(20.0, 3.0)];
        let two = vec![car(20.0, 3.0), car(35.0, -4.0)];
        let none: Vec<VehicleState> = Vec::new();
        let truths: Vec<TruthFrame> =
            (0..4).map(|k| truth_frame(k as f64, &two)).collect();
        let records = vec![
            record(0.0, &two),
            record(1.0, &one),
            record(2.0, &none),
            record(3.0, &[two.clone(), one.clone()].concat()),
        ];
        let rep = evaluate(&records, &truths, &mounts()).unwrap();
        assert!((rep.cardinality.zero - 0.25).abs() < 1e-12);
        assert!((rep.cardinality.minus_one - 0.25).abs() < 1e-12);
        assert!((rep.cardinality.minus_two - 0.25).abs() < 1e-12);
        assert!((rep.cardinality.plus_one - 0.25).abs() < 1e-12);
        let total: f64 = rep.cardinality.shares().iter().sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn out_of_gate_estimates_hurt_availability_not_rmse() {
        let truth_state = vec![car(20.0, 3.0)];
        let far = vec![car(20.0, 8.0)];
        let truths: Vec<TruthFrame> = (0..5).map(|k| truth_frame(k as f64, &truth_state)).collect();
        let records: Vec<TrackRecord> = (0..5).map(|k| record(k as f64, &far)).collect();
        let rep = evaluate(&records, &truths, &mounts()).unwrap();
        assert_eq!(rep.matched_pairs, 0);
        assert_eq!(rep.availability, 0.0);
        assert_eq!(rep.rmse.x, 0.0);
        assert_eq!(rep.cardinality.zero, 1.0);
    }

    #[test]
    fn slow_or_unseen_truths_are_not_counted() {
        let mut slow = car(20.0, 3.0);
        slow.kin.v = 0.4;
        let outside = car(-30.0, 0.0);
        let truths: Vec<TruthFrame> =
            (0..3).map(|k| truth_frame(k as f64, &[slow, outside])).collect();
        let records: Vec<TrackRecord> = (0..3).map(|k| record(k as f64, &[])).collect();
        let rep = evaluate(&records, &truths, &mounts()).unwrap();
        // neither truth counts, so empty estimates are exactly right
        assert_eq!(rep.cardinality.zero, 1.0);
        assert_eq!(rep.availability, 1.0);
    }

    #[test]
    fn greedy_matching_resolves_conflicts_by_distance() {
        let truths_states = vec![car(20.0, 0.0), car(22.0, 0.0)];
        // both estimates nearest to the first truth, the greedy pass
        // must still pair each with a distinct truth
        let estimates = vec![car(20.1, 0.0), car(20.5, 0.0)];
        let m = match_pairs(&estimates, &truths_states, MATCH_GATE);
        assert_eq!(m.len(), 2);
        assert!(m.contains(&(0, 0)));
        assert!(m.contains(&(1, 1)));
    }

    #[test]
    fn empty_inputs_are_rejected() {
        let states = vec![car(20.0, 3.0)];
        let truths = vec![truth_frame(0.0, &states)];
        let records = vec![record(0.0, &states)];
        assert!(matches!(evaluate(&[], &truths, &mounts()), Err(Error::EmptyInput(_))));
        assert!(matches!(evaluate(&records, &[], &mounts()), Err(Error::EmptyInput(_))));
    }
}
