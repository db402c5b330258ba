//! Latency controller: nudges the cluster count so the smoothed per-line
//! processing time stays inside a configured band.

use std::collections::VecDeque;
use std::io::Write;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ControllerConfig {
    pub t_lo: f64,
    pub t_hi: f64,
    /// Lines slower than this are counted as violations.
    pub hard_limit: f64,
    pub k_min: usize,
    pub k_max: usize,
    /// Clusters added or removed per ms outside the band.
    pub step: f64,
    /// Weight of the newest measurement in the moving average.
    pub ema_beta: f64,
    /// Entries kept in the history ring.
    pub history_len: usize,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            t_lo: 8.0,
            t_hi: 12.0,
            hard_limit: 20.0,
            k_min: 8,
            k_max: 200,
            step: 2.0,
            ema_beta: 0.2,
            history_len: 4096,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::Config(format!("controller: {m}")));
        if !(0.0 < self.t_lo && self.t_lo < self.t_hi && self.t_hi <= self.hard_limit) {
            return bad("need 0 < t_lo < t_hi <= hard_limit");
        }
        if self.k_min < 2 || self.k_min > self.k_max {
            return bad("need 2 <= k_min <= k_max");
        }
        if !(self.step >= 1.0) {
            return bad("step must be >= 1");
        }
        if !(self.ema_beta > 0.0 && self.ema_beta <= 1.0) {
            return bad("ema_beta must lie in (0, 1]");
        }
        if self.history_len == 0 {
            return bad("history_len must be positive");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct HistoryEntry {
    pub line: u64,
    pub ms: f64,
    /// Cluster count in use when the line was processed.
    pub k: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerState {
    pub k_target: usize,
    pub smoothed_time_ms: f64,
    pub violation_count: u64,
    pub lines: u64,
    history: VecDeque<HistoryEntry>,
}

impl ControllerState {
    pub fn history(&self) -> impl Iterator<Item = &HistoryEntry> {
        self.history.iter()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Controller {
    config: ControllerConfig,
    state: ControllerState,
}

impl Controller {
    pub fn new(config: ControllerConfig, k_initial: usize) -> Result<Self> {
        config.validate()?;
        let state = ControllerState {
            k_target: k_initial.clamp(config.k_min, config.k_max),
            smoothed_time_ms: 0.0,
            violation_count: 0,
            lines: 0,
            history: VecDeque::with_capacity(config.history_len),
        };
        Ok(Self { config, state })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.config
    }

    pub fn state(&self) -> &ControllerState {
        &self.state
    }

    pub fn k_target(&self) -> usize {
        self.state.k_target
    }

    /// Feeds one line's processing time (taken with `k_used` clusters) and
    /// returns the cluster target for the next line.
    ///
    /// The first measurement seeds the moving average directly.
    pub fn tick(&mut self, measured_ms: f64, k_used: usize) -> Result<usize> {
        if !(measured_ms >= 0.0) || !measured_ms.is_finite() {
            return Err(Error::InvalidArgument(format!(
                "measured time {measured_ms} ms is not a valid duration"
            )));
        }
        let c = &self.config;
        let s = &mut self.state;
        s.smoothed_time_ms = if s.lines == 0 {
            measured_ms
        } else {
            (1.0 - c.ema_beta) * s.smoothed_time_ms + c.ema_beta * measured_ms
        };
        if measured_ms > c.hard_limit {
            s.violation_count += 1;
        }
        let sm = s.smoothed_time_ms;
        if sm > c.t_hi {
            let cut = (c.step * (sm - c.t_hi)).ceil() as usize;
            s.k_target = s.k_target.saturating_sub(cut).max(c.k_min);
        } else if sm < c.t_lo {
            let add = (c.step * (c.t_lo - sm)).ceil() as usize;
            s.k_target = (s.k_target + add).min(c.k_max);
        }
        s.k_target = s.k_target.clamp(c.k_min, c.k_max);
        if s.history.len() == c.history_len {
            s.history.pop_front();
        }
        s.history.push_back(HistoryEntry {
            line: s.lines,
            ms: measured_ms,
            k: k_used,
        });
        s.lines += 1;
        Ok(s.k_target)
    }

    /// Writes the history ring as `line,ms,k` CSV.
    pub fn write_history_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "line,ms,k")?;
        for h in &self.state.history {
            writeln!(w, "{},{:.4},{}", h.line, h.ms, h.k)?;
        }
        Ok(())
    }
}

/// Runs `block` and returns its result with the elapsed wall time in ms.
pub fn measure<T>(block: impl FnOnce() -> T) -> (T, f64) {
    let start = Instant::now();
    let out = block();
    (out, start.elapsed().as_secs_f64() * 1e3)
}
