//! On-disk record formats.
//!
//! Scans, ground truth, and track output are JSON Lines, one record per
//! line. Timestamps are written with nine decimal places so files compare
//! bytewise across runs; everything else round-trips through serde.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::value::RawValue;

use crate::error::{Error, Result};
use crate::geometry::{wrap_angle, Detection, Extent, KinematicState, VehicleState};
use crate::vgm::{TrainingPoint, VgmModel};

/// One sensor scan: the detections of a single sensor at one timestamp.
/// Doppler values are raw sensor readings. `labels` carries per-detection
/// ground truth (target id, `None` for clutter) and exists only in
/// simulator output; `ego` is the ego pose at scan time in the world frame
/// and is omitted for a stationary ego at the origin.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Scan {
    pub t: f64,
    pub sensor: usize,
    pub detections: Vec<Detection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub labels: Option<Vec<Option<usize>>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ego: Option<KinematicState>,
}

/// Ground-truth state of one target at a truth timestamp, world frame.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TruthTarget {
    pub id: usize,
    pub x: f64,
    pub y: f64,
    pub phi: f64,
    pub v: f64,
    pub omega: f64,
    pub a: f64,
    pub b: f64,
}

impl TruthTarget {
    pub fn state(&self) -> VehicleState {
        VehicleState {
            kin: KinematicState {
                x: self.x,
                y: self.y,
                phi: self.phi,
                v: self.v,
                omega: self.omega,
            },
            ext: Extent { a: self.a, b: self.b },
        }
    }

    pub fn from_state(id: usize, s: &VehicleState) -> TruthTarget {
        TruthTarget {
            id,
            x: s.kin.x,
            y: s.kin.y,
            phi: s.kin.phi,
            v: s.kin.v,
            omega: s.kin.omega,
            a: s.ext.a,
            b: s.ext.b,
        }
    }
}

/// All target truths plus the ego pose at one timestamp.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TruthFrame {
    pub t: f64,
    pub targets: Vec<TruthTarget>,
    pub ego: KinematicState,
}

/// One reported track at one update step.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrackEntry {
    pub label: (u64, u64),
    pub r: f64,
    pub state: TrackState,
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub struct TrackState {
    pub x: f64,
    pub y: f64,
    pub phi: f64,
    pub v: f64,
    pub omega: f64,
    pub a: f64,
    pub b: f64,
}

impl TrackState {
    pub fn from_state(s: &VehicleState) -> TrackState {
        TrackState {
            x: s.kin.x,
            y: s.kin.y,
            phi: s.kin.phi,
            v: s.kin.v,
            omega: s.kin.omega,
            a: s.ext.a,
            b: s.ext.b,
        }
    }

    pub fn state(&self) -> VehicleState {
        VehicleState {
            kin: KinematicState {
                x: self.x,
                y: self.y,
                phi: self.phi,
                v: self.v,
                omega: self.omega,
            },
            ext: Extent { a: self.a, b: self.b },
        }
    }
}

/// Filter output for one update step: every track that survived pruning,
/// whether or not it is part of the cardinality estimate.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrackRecord {
    pub t: f64,
    pub tracks: Vec<TrackEntry>,
    pub expected_cardinality: f64,
}

fn fixed_t(t: f64) -> Result<Box<RawValue>> {
    let s = format!("{:.9}", t);
    if !t.is_finite() {
        return Err(Error::Format(format!("non-finite timestamp {t}")));
    }
    Ok(RawValue::from_string(s)?)
}

fn open_writer(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn read_lines<T: serde::de::DeserializeOwned>(path: &Path) -> Result<Vec<T>> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line)
            .map_err(|e| Error::Format(format!("{}:{}: {}", path.display(), i + 1, e)))?;
        out.push(item);
    }
    Ok(out)
}

pub fn write_scans(path: &Path, scans: &[Scan]) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        t: &'a RawValue,
        sensor: usize,
        detections: &'a [Detection],
        #[serde(skip_serializing_if = "Option::is_none")]
        labels: Option<&'a [Option<usize>]>,
        #[serde(skip_serializing_if = "Option::is_none")]
        ego: Option<&'a KinematicState>,
    }
    let mut w = open_writer(path)?;
    for scan in scans {
        let t = fixed_t(scan.t)?;
        let line = Line {
            t: &t,
            sensor: scan.sensor,
            detections: &scan.detections,
            labels: scan.labels.as_deref(),
            ego: scan.ego.as_ref(),
        };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_scans(path: &Path) -> Result<Vec<Scan>> {
    read_lines(path)
}

pub fn write_truths(path: &Path, frames: &[TruthFrame]) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        t: &'a RawValue,
        targets: &'a [TruthTarget],
        ego: &'a KinematicState,
    }
    let mut w = open_writer(path)?;
    for frame in frames {
        let t = fixed_t(frame.t)?;
        let line = Line { t: &t, targets: &frame.targets, ego: &frame.ego };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_truths(path: &Path) -> Result<Vec<TruthFrame>> {
    read_lines(path)
}

pub fn write_tracks(path: &Path, records: &[TrackRecord]) -> Result<()> {
    #[derive(Serialize)]
    struct Line<'a> {
        t: &'a RawValue,
        tracks: &'a [TrackEntry],
        expected_cardinality: f64,
    }
    let mut w = open_writer(path)?;
    for rec in records {
        let t = fixed_t(rec.t)?;
        let line =
            Line { t: &t, tracks: &rec.tracks, expected_cardinality: rec.expected_cardinality };
        serde_json::to_writer(&mut w, &line)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_tracks(path: &Path) -> Result<Vec<TrackRecord>> {
    read_lines(path)
}

pub fn write_training(path: &Path, points: &[TrainingPoint]) -> Result<()> {
    let mut w = open_writer(path)?;
    for p in points {
        serde_json::to_writer(&mut w, p)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_training(path: &Path) -> Result<Vec<TrainingPoint>> {
    read_lines(path)
}

pub fn write_model(path: &Path, model: &VgmModel) -> Result<()> {
    Ok(std::fs::write(path, model.to_json_string())?)
}

pub fn read_model(path: &Path) -> Result<VgmModel> {
    VgmModel::from_json_str(&std::fs::read_to_string(path)?)
}

/// Stable processing order for a multi-sensor stream: by timestamp, sensor
/// id breaking exact ties.
pub fn sort_scans(scans: &mut [Scan]) {
    scans.sort_by(|a, b| {
        a.t.partial_cmp(&b.t).unwrap_or(std::cmp::Ordering::Equal).then(a.sensor.cmp(&b.sensor))
    });
}

/// Ground truth interpolated to an arbitrary time inside the covered span.
/// Only targets present in both bracketing frames survive; headings take
/// the shortest arc. Frames must be sorted by time.
pub fn truth_at(frames: &[TruthFrame], t: f64) -> Option<TruthFrame> {
    if frames.is_empty() {
        return None;
    }
    let idx = frames.partition_point(|f| f.t < t);
    if idx == 0 {
        return if (frames[0].t - t).abs() <= 1e-9 { Some(frames[0].clone()) } else { None };
    }
    if idx == frames.len() {
        let last = frames.last().unwrap();
        return if (last.t - t).abs() <= 1e-9 { Some(last.clone()) } else { None };
    }
    let (f0, f1) = (&frames[idx - 1], &frames[idx]);
    if (f1.t - t).abs() <= 1e-9 {
        return Some(f1.clone());
    }
    let u = (t - f0.t) / (f1.t - f0.t);
    let lerp = |a: f64, b: f64| a + u * (b - a);
    let lerp_angle = |a: f64, b: f64| wrap_angle(a + u * wrap_angle(b - a));
    let mut targets = Vec::new();
    for t0 in &f0.targets {
        if let Some(t1) = f1.targets.iter().find(|t1| t1.id == t0.id) {
            targets.push(TruthTarget {
                id: t0.id,
                x: lerp(t0.x, t1.x),
                y: lerp(t0.y, t1.y),
                phi: lerp_angle(t0.phi, t1.phi),
                v: lerp(t0.v, t1.v),
                omega: lerp(t0.omega, t1.omega),
                a: t0.a,
                b: t0.b,
            });
        }
    }
    Some(TruthFrame {
        t,
        targets,
        ego: KinematicState {
            x: lerp(f0.ego.x, f1.ego.x),
            y: lerp(f0.ego.y, f1.ego.y),
            phi: lerp_angle(f0.ego.phi, f1.ego.phi),
            v: lerp(f0.ego.v, f1.ego.v),
            omega: lerp(f0.ego.omega, f1.ego.omega),
        },
    })
}
