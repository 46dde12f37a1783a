//! Spatiotemporal noise filter: an event passes only when another event
//! fired in its pixel neighborhood within a configurable time window.

use super::{Event, EventStreamError};
use serde::{Deserialize, Serialize};

/// Noise filter parameters.
#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseFilterConfig {
    /// Support window, microseconds.
    pub time_constant: u64,
    /// Chebyshev neighborhood radius in pixels (1 = 8-connected).
    pub neighborhood_radius: u16,
    /// Whether a previous event at the same pixel counts as support.
    pub include_same_pixel: bool,
}

impl Default for NoiseFilterConfig {
    fn default() -> Self {
        Self {
            time_constant: 2000,
            neighborhood_radius: 1,
            include_same_pixel: true,
        }
    }
}

impl NoiseFilterConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.time_constant == 0 {
            return Err("time_constant must be > 0".into());
        }
        if self.neighborhood_radius == 0 {
            return Err("neighborhood_radius must be >= 1".into());
        }
        Ok(())
    }
}

const NEVER: u64 = u64::MAX;

/// Filter memory: per-pixel timestamp of the last event, O(1) per event.
///
/// Causal: the decision for an event depends only on events at earlier or
/// equal timestamps. Memory is updated with every event regardless of the
/// keep/drop decision.
#[derive(Debug, Clone)]
pub struct NoiseFilter {
    width: u32,
    height: u32,
    last_t: Vec<u64>,
    prev_t: u64,
    cfg: NoiseFilterConfig,
}

impl NoiseFilter {
    pub fn new(width: u32, height: u32, cfg: NoiseFilterConfig) -> Self {
        Self {
            width,
            height,
            last_t: vec![NEVER; width as usize * height as usize],
            prev_t: 0,
            cfg,
        }
    }

    pub fn config(&self) -> &NoiseFilterConfig {
        &self.cfg
    }

    /// Decide keep (true) / drop (false) for the next event in stream order.
    pub fn filter_event(&mut self, e: &Event) -> Result<bool, EventStreamError> {
        if e.x as u32 >= self.width || e.y as u32 >= self.height {
            return Err(EventStreamError::OutOfBounds {
                x: e.x,
                y: e.y,
                width: self.width,
                height: self.height,
            });
        }
        if e.t < self.prev_t {
            return Err(EventStreamError::StreamOrder {
                prev: self.prev_t,
                t: e.t,
            });
        }
        self.prev_t = e.t;

        let r = self.cfg.neighborhood_radius as i64;
        let x = e.x as i64;
        let y = e.y as i64;
        let x0 = (x - r).max(0);
        let x1 = (x + r).min(self.width as i64 - 1);
        let y0 = (y - r).max(0);
        let y1 = (y + r).min(self.height as i64 - 1);

        let mut keep = false;
        'scan: for ny in y0..=y1 {
            let row = ny as usize * self.width as usize;
            for nx in x0..=x1 {
                if !self.cfg.include_same_pixel && nx == x && ny == y {
                    continue;
                }
                let t_prev = self.last_t[row + nx as usize];
                if t_prev != NEVER && e.t - t_prev <= self.cfg.time_constant {
                    keep = true;
                    break 'scan;
                }
            }
        }

        self.last_t[e.y as usize * self.width as usize + e.x as usize] = e.t;
        Ok(keep)
    }

    /// Filter a timestamp-ordered batch, returning the kept events.
    pub fn filter_batch(&mut self, events: &[Event]) -> Result<Vec<Event>, EventStreamError> {
        let mut out = Vec::with_capacity(events.len());
        for e in events {
            if self.filter_event(e)? {
                out.push(*e);
            }
        }
        Ok(out)
    }
}
