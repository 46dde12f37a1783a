//! Sectioned plain-text pipeline configuration.
//!
//! One document configures every module; each `[section]` maps onto one
//! module's config struct and every field defaults to the module default,
//! so a file only needs the values it changes. The syntax is the same
//! `key = value` form as the intrinsics file, grouped into sections
//! (parsed as TOML).

use serde::{Deserialize, Serialize};

use crate::backtrack::BacktrackConfig;
use crate::detector::DetectorConfig;
use crate::events::NoiseFilterConfig;
use crate::sim::SimConfig;
use crate::tracker::TrackerConfig;

use super::PipelineError;

/// Noise filter section: the filter parameters plus an enable switch.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FilterSection {
    /// When false, events bypass the noise filter entirely.
    pub enabled: bool,
    /// Support window, microseconds.
    pub time_constant: u64,
    /// Chebyshev neighborhood radius in pixels.
    pub neighborhood_radius: u16,
    /// Whether a previous event at the same pixel counts as support.
    pub include_same_pixel: bool,
}

impl FilterSection {
    pub fn filter_config(&self) -> NoiseFilterConfig {
        NoiseFilterConfig {
            time_constant: self.time_constant,
            neighborhood_radius: self.neighborhood_radius,
            include_same_pixel: self.include_same_pixel,
        }
    }
}

impl Default for FilterSection {
    fn default() -> Self {
        let cfg = NoiseFilterConfig::default();
        Self {
            enabled: true,
            time_constant: cfg.time_constant,
            neighborhood_radius: cfg.neighborhood_radius,
            include_same_pixel: cfg.include_same_pixel,
        }
    }
}

/// Orchestration parameters that belong to no single module.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineSection {
    /// Event-time period between detector passes, microseconds.
    pub detector_period_us: u64,
    /// Bounded queue capacity between stages, in events.
    pub queue_capacity: usize,
    /// Events per channel message; pacing and routing granularity.
    pub batch_size: usize,
    /// Per-tracker queue depth in batches. Kept small on purpose: the
    /// router's only knowledge of a marker's position is the route box
    /// its worker reports, so a deep backlog would let the box go stale
    /// by the whole queue. A shallow queue bounds that staleness.
    pub tracker_queue_batches: usize,
    /// Extra dilation of each tracker's routing box, pixels, on top of
    /// the match threshold. Absorbs the marker motion that can happen
    /// within the (bounded) router-to-worker lag.
    pub route_margin_px: f64,
    /// Run everything on the calling thread in a fixed order: output is
    /// bit-identical across runs on the same input.
    pub deterministic: bool,
    /// Live-source semantics: a full queue drops the oldest entries and
    /// counts them instead of blocking the producer (recorded-replay
    /// semantics block so no event is ever lost).
    pub live: bool,
}

impl Default for PipelineSection {
    fn default() -> Self {
        Self {
            detector_period_us: 50_000,
            queue_capacity: 1 << 20,
            batch_size: 256,
            tracker_queue_batches: 64,
            route_margin_px: 8.0,
            deterministic: false,
            live: false,
        }
    }
}

/// Full pipeline configuration: one section per module.
#[derive(Debug, Clone, Copy, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    pub filter: FilterSection,
    pub detector: DetectorConfig,
    pub tracker: TrackerConfig,
    pub backtrack: BacktrackConfig,
    pub simulator: SimConfig,
    pub pipeline: PipelineSection,
}

impl PipelineConfig {
    /// Parse a sectioned config document. Unknown keys are rejected so
    /// typos fail loudly instead of silently keeping a default.
    pub fn from_str_strict(text: &str) -> Result<Self, PipelineError> {
        let cfg: PipelineConfig =
            toml::from_str(text).map_err(|e| PipelineError::Config(format!("config: {e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_file(path: &std::path::Path) -> Result<Self, PipelineError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| PipelineError::Config(format!("{}: {e}", path.display())))?;
        Self::from_str_strict(&text)
    }

    /// Render the configuration back out as a config document with every
    /// key explicit; `evmark` prints this as a starting template.
    pub fn to_document(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn validate(&self) -> Result<(), PipelineError> {
        self.filter
            .filter_config()
            .validate()
            .map_err(PipelineError::Config)?;
        self.detector.validate().map_err(PipelineError::Config)?;
        self.tracker
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.backtrack
            .validate()
            .map_err(|e| PipelineError::Config(e.to_string()))?;
        self.simulator.validate().map_err(PipelineError::Config)?;
        let p = &self.pipeline;
        if p.detector_period_us == 0 {
            return Err(PipelineError::Config(
                "pipeline.detector_period_us must be >= 1".into(),
            ));
        }
        if p.batch_size == 0 {
            return Err(PipelineError::Config(
                "pipeline.batch_size must be >= 1".into(),
            ));
        }
        if p.queue_capacity < p.batch_size {
            return Err(PipelineError::Config(
                "pipeline.queue_capacity must be >= pipeline.batch_size".into(),
            ));
        }
        if p.tracker_queue_batches < 2 {
            return Err(PipelineError::Config(
                "pipeline.tracker_queue_batches must be >= 2".into(),
            ));
        }
        if !p.route_margin_px.is_finite() || p.route_margin_px < 0.0 {
            return Err(PipelineError::Config(
                "pipeline.route_margin_px must be finite and >= 0".into(),
            ));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::detector::Binarize;
    use crate::tracker::TorqueLever;

    #[test]
    fn empty_document_is_all_defaults() {
        let cfg = PipelineConfig::from_str_strict("").unwrap();
        assert_eq!(cfg.tracker.update_every_n, 100);
        assert_eq!(cfg.pipeline.detector_period_us, 50_000);
        assert_eq!(cfg.pipeline.queue_capacity, 1 << 20);
        assert!(cfg.filter.enabled);
        assert_eq!(cfg.filter.time_constant, 2000);
    }

    #[test]
    fn partial_sections_override_only_named_keys() {
        let text = "\
[tracker]
update_every_n = 10
torque_lever = \"camera_arm\"

[filter]
enabled = false
time_constant = 500

[detector]
binarize = \"any_polarity\"

[pipeline]
deterministic = true
";
        let cfg = PipelineConfig::from_str_strict(text).unwrap();
        assert_eq!(cfg.tracker.update_every_n, 10);
        assert_eq!(cfg.tracker.torque_lever, TorqueLever::CameraArm);
        assert!((cfg.tracker.w0 - 0.1).abs() < 1e-12);
        assert!(!cfg.filter.enabled);
        assert_eq!(cfg.filter.time_constant, 500);
        assert_eq!(cfg.filter.neighborhood_radius, 1);
        assert_eq!(cfg.detector.binarize, Binarize::AnyPolarity);
        assert!(cfg.pipeline.deterministic);
        assert!((cfg.backtrack.eps_t - 5.0).abs() < 1e-12);
    }

    #[test]
    fn unknown_keys_and_bad_values_are_rejected() {
        assert!(PipelineConfig::from_str_strict("[tracker]\nupdate_every = 10").is_err());
        assert!(PipelineConfig::from_str_strict("[tracker]\nw0 = 0.0").is_err());
        assert!(PipelineConfig::from_str_strict("[pipeline]\nbatch_size = 0").is_err());
    }

    #[test]
    fn document_roundtrips() {
        let mut cfg = PipelineConfig::default();
        cfg.tracker.update_every_n = 7;
        cfg.pipeline.live = true;
        let text = cfg.to_document();
        let back = PipelineConfig::from_str_strict(&text).unwrap();
        assert_eq!(back.tracker.update_every_n, 7);
        assert!(back.pipeline.live);
    }
}
