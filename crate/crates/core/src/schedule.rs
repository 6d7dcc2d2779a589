//! Denoising-step schedule of (tile granularity, sparsity window).
//!
//! Steps `1..=⌊α1·D⌋` are early (coarse tiles, sparse window), steps up to
//! `⌊α2·D⌋` are mid (fine tiles, dense window) and the rest are late
//! (intermediate tiles, medium window). Granularity and density are compared
//! by tile volume and window volume.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::grid::TileScheme;
use crate::sparsity::WindowSpec;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Regime {
    Early,
    Mid,
    Late,
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Regime::Early => "early",
            Regime::Mid => "mid",
            Regime::Late => "late",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RegimeParams {
    pub tile: TileScheme,
    pub window: WindowSpec,
}

impl RegimeParams {
    pub fn new(tile: [usize; 3], window: [usize; 3]) -> Self {
        Self {
            tile: TileScheme::from(tile),
            window: WindowSpec::from(window),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScheduleConfig {
    pub alpha1: f64,
    pub alpha2: f64,
    pub early: RegimeParams,
    pub mid: RegimeParams,
    pub late: RegimeParams,
    pub total_steps: usize,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        Self {
            alpha1: 0.2,
            alpha2: 0.7,
            early: RegimeParams::new([24, 32, 32], [3, 3, 1]),
            mid: RegimeParams::new([6, 8, 8], [6, 6, 6]),
            late: RegimeParams::new([12, 16, 16], [6, 6, 1]),
            total_steps: 50,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum ScheduleViolation {
    AlphaRange { alpha1: f64, alpha2: f64 },
    AlphaOrdering { alpha1: f64, alpha2: f64 },
    /// Tile volumes must satisfy early > late > mid.
    GranularityOrdering { early: usize, mid: usize, late: usize },
    /// Window volumes must satisfy mid > late > early.
    DensityOrdering { early: usize, mid: usize, late: usize },
    ZeroExtent { regime: Regime },
    NoSteps,
}

impl fmt::Display for ScheduleViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Self::AlphaRange { alpha1, alpha2 } => {
                write!(f, "alpha range: need 0 < alpha1, alpha2 < 1 (got {alpha1}, {alpha2})")
            }
            Self::AlphaOrdering { alpha1, alpha2 } => {
                write!(f, "alpha ordering: need alpha1 < alpha2 (got {alpha1}, {alpha2})")
            }
            Self::GranularityOrdering { early, mid, late } => write!(
                f,
                "granularity ordering: need tile volume early > late > mid (got {early}, {late}, {mid})"
            ),
            Self::DensityOrdering { early, mid, late } => write!(
                f,
                "density ordering: need window volume mid > late > early (got {mid}, {late}, {early})"
            ),
            Self::ZeroExtent { regime } => write!(f, "{regime} regime has a zero tile or window extent"),
            Self::NoSteps => f.write_str("total_steps must be at least 1"),
        }
    }
}

/// `⌊α·D⌋`.
pub fn threshold(alpha: f64, total_steps: usize) -> usize {
    (alpha * total_steps as f64).floor() as usize
}

impl ScheduleConfig {
    pub fn regime_params(&self, regime: Regime) -> RegimeParams {
        match regime {
            Regime::Early => self.early,
            Regime::Mid => self.mid,
            Regime::Late => self.late,
        }
    }

    /// `(⌊α1·D⌋, ⌊α2·D⌋)`.
    pub fn thresholds(&self) -> (usize, usize) {
        (
            threshold(self.alpha1, self.total_steps),
            threshold(self.alpha2, self.total_steps),
        )
    }

    pub fn regime_at(&self, step: usize) -> Result<Regime> {
        if step == 0 || step > self.total_steps {
            return Err(Error::StepOutOfRange {
                step,
                total: self.total_steps,
            });
        }
        let (t1, t2) = self.thresholds();
        Ok(if step <= t1 {
            Regime::Early
        } else if step <= t2 {
            Regime::Mid
        } else {
            Regime::Late
        })
    }

    pub fn params_at(&self, step: usize) -> Result<RegimeParams> {
        Ok(self.regime_params(self.regime_at(step)?))
    }

    /// Every violated constraint, or `Ok` if none.
    pub fn validate(&self) -> Result<(), Vec<ScheduleViolation>> {
        let mut out = Vec::new();
        let (a1, a2) = (self.alpha1, self.alpha2);
        let in_unit = |a: f64| a > 0.0 && a < 1.0;
        if !in_unit(a1) || !in_unit(a2) {
            out.push(ScheduleViolation::AlphaRange { alpha1: a1, alpha2: a2 });
        }
        if !(a1 < a2) {
            out.push(ScheduleViolation::AlphaOrdering { alpha1: a1, alpha2: a2 });
        }
        if self.total_steps == 0 {
            out.push(ScheduleViolation::NoSteps);
        }
        for regime in [Regime::Early, Regime::Mid, Regime::Late] {
            let p = self.regime_params(regime);
            if p.tile.validate().is_err() || p.window.validate().is_err() {
                out.push(ScheduleViolation::ZeroExtent { regime });
            }
        }
        let (te, tm, tl) = (
            self.early.tile.volume(),
            self.mid.tile.volume(),
            self.late.tile.volume(),
        );
        if !(te > tl && tl > tm) {
            out.push(ScheduleViolation::GranularityOrdering {
                early: te,
                mid: tm,
                late: tl,
            });
        }
        let (we, wm, wl) = (
            self.early.window.volume(),
            self.mid.window.volume(),
            self.late.window.volume(),
        );
        if !(wm > wl && wl > we) {
            out.push(ScheduleViolation::DensityOrdering {
                early: we,
                mid: wm,
                late: wl,
            });
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }
}

/// Evaluates the schedule at `step`; see [`ScheduleConfig::params_at`].
pub fn params_at(step: usize, config: &ScheduleConfig) -> Result<RegimeParams> {
    config.params_at(step)
}
