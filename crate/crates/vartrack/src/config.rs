//! Run configuration: one JSON document covering every tunable of the
//! pipeline, with defaults matching the built-in scenarios. Command-line
//! flags override individual fields after the file is loaded.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::filter::{BirthModel, SurvivalModel};
use crate::geometry::SensorMount;
use crate::particles::{ExtentConstraints, NoiseBounds, ParticleBudget};
use crate::radar::DetectionProfile;
use crate::sim::SensorNoise;

fn quad_mounts() -> Vec<SensorMount> {
    use std::f64::consts::FRAC_PI_2;
    [0.0, FRAC_PI_2, std::f64::consts::PI, -FRAC_PI_2]
        .into_iter()
        .map(|yaw| SensorMount {
            x: 0.0,
            y: 0.0,
            yaw,
            opening_angle: 100f64.to_radians(),
            max_range: 50.0,
            rate: 20.0,
        })
        .collect()
}

/// Training-stage settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    /// initial mixture size before pruning
    pub components: usize,
    /// prior weight concentration
    pub rho0: f64,
    /// posterior-weight floor below which components are dropped
    pub prune_threshold: f64,
    pub max_iters: usize,
    /// relative lower-bound improvement that stops the fit
    pub tol: f64,
    /// aspect-histogram bin width in radians for balancing
    pub balance_bin_width: f64,
    /// extra margin around the footprint when gating detections to truth
    pub gate_margin: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            components: 70,
            rho0: 1e-3,
            prune_threshold: 1e-5,
            max_iters: 2000,
            tol: 1e-8,
            balance_bin_width: std::f64::consts::TAU / 16.0,
            gate_margin: 1.0,
        }
    }
}

/// Filter-stage settings.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    /// expected detections per visible object per scan
    pub lambda_t: f64,
    /// expected clutter points per scan
    pub lambda_c: f64,
    pub k_best: usize,
    /// prior label subsets enumerated per update
    pub hypothesis_cap: usize,
    /// existence below which a track is dropped
    pub prune_existence: f64,
    /// track-to-cluster center distance beyond which pairs are forbidden
    pub assoc_gate: Option<f64>,
    /// DBSCAN radii swept when forming candidate partitions
    pub eps_grid: Vec<f64>,
    /// footprint inflation when gating detections to predicted tracks
    pub gate_margin: f64,
    /// Doppler residual above which a cluster is split
    pub doppler_split: f64,
    pub birth: BirthModel,
    pub survival: SurvivalModel,
    pub noise: NoiseBounds,
    pub constraints: ExtentConstraints,
    pub budget: ParticleBudget,
    pub profile: DetectionProfile,
    /// extent grid half-step during prediction
    pub extent_step: f64,
}

impl Default for FilterConfig {
    fn default() -> Self {
        FilterConfig {
            lambda_t: 5.0,
            lambda_c: 5.0,
            k_best: 10,
            hypothesis_cap: 100,
            prune_existence: 0.01,
            assoc_gate: Some(10.0),
            eps_grid: vec![0.5, 1.0, 2.0, 3.0, 4.0, 5.0],
            gate_margin: 1.0,
            doppler_split: 0.45,
            birth: BirthModel::default(),
            survival: SurvivalModel::default(),
            noise: NoiseBounds::default(),
            constraints: ExtentConstraints::default(),
            budget: ParticleBudget::default(),
            profile: DetectionProfile::default(),
            extent_step: 0.1,
        }
    }
}

/// Simulator settings mirrored into training and evaluation.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub noise: SensorNoise,
    pub lambda_t: f64,
    pub lambda_c: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig { noise: SensorNoise::default(), lambda_t: 5.0, lambda_c: 5.0 }
    }
}

/// The complete run configuration.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub seed: u64,
    pub mounts: Vec<SensorMount>,
    pub train: TrainConfig,
    pub filter: FilterConfig,
    pub sim: SimConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            mounts: quad_mounts(),
            train: TrainConfig::default(),
            filter: FilterConfig::default(),
            sim: SimConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path)?;
        let cfg: RunConfig = serde_json::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.mounts.is_empty() {
            return Err(Error::Format("at least one sensor mount is required".into()));
        }
        for m in &self.mounts {
            if !(m.opening_angle > 0.0 && m.max_range > 0.0 && m.rate > 0.0) {
                return Err(Error::Format("sensor mount parameters must be positive".into()));
            }
        }
        if self.train.components == 0 {
            return Err(Error::Format("components must be at least 1".into()));
        }
        if !(self.train.rho0 > 0.0) {
            return Err(Error::Format("rho0 must be positive".into()));
        }
        if !(self.filter.lambda_t > 0.0 && self.filter.lambda_c > 0.0) {
            return Err(Error::Format("detection and clutter rates must be positive".into()));
        }
        if self.filter.k_best == 0 || self.filter.hypothesis_cap == 0 {
            return Err(Error::Format("k_best and hypothesis_cap must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.filter.prune_existence) {
            return Err(Error::Format("prune_existence must lie in [0, 1)".into()));
        }
        if self.filter.eps_grid.is_empty() || self.filter.eps_grid.iter().any(|&e| e <= 0.0) {
            return Err(Error::Format("eps_grid must hold positive radii".into()));
        }
        if !(self.filter.birth.r_b > 0.0 && self.filter.birth.r_b < 1.0) {
            return Err(Error::Format("birth existence must lie in (0, 1)".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate_and_roundtrip() {
        let cfg = RunConfig::default();
        cfg.validate().unwrap();
        let json = serde_json::to_string_pretty(&cfg).unwrap();
        let back: RunConfig = serde_json::from_str(&json).unwrap();
        back.validate().unwrap();
        assert_eq!(back.mounts.len(), 4);
        assert_eq!(back.train.components, 70);
        assert_eq!(back.filter.k_best, 10);
    }

    #[test]
    fn partial_documents_fill_in_defaults() {
        let cfg: RunConfig =
            serde_json::from_str(r#"{"seed": 7, "filter": {"lambda_c": 2.5}}"#).unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.filter.lambda_c, 2.5);
        assert_eq!(cfg.filter.lambda_t, 5.0);
        assert_eq!(cfg.mounts.len(), 4);
        cfg.validate().unwrap();
    }

    #[test]
    fn invalid_values_are_rejected() {
        let mut cfg = RunConfig::default();
        cfg.train.components = 0;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.filter.eps_grid.clear();
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.filter.birth.r_b = 1.5;
        assert!(cfg.validate().is_err());
        let mut cfg = RunConfig::default();
        cfg.mounts.clear();
        assert!(cfg.validate().is_err());
    }
}
