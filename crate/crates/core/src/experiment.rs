//! Synthetic per-step experiments, ablation sweeps and their CSV output.
//!
//! Inputs come from a counter-based generator: ChaCha20 keyed by the seed,
//! with the stream selected by `(step, head, tensor)` and the word position by
//! the element index. Any element can be produced independently, so output
//! does not depend on generation order or thread count. Transcendental
//! functions come from `libm` so the values are identical across platforms.

use std::fmt::Write as _;
use std::io;

use rand_chacha::ChaCha20Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionInputs, FpsConfig};
use crate::error::{Error, Result};
use crate::fp8::Fp8Kind;
use crate::grid::{build_tile_map, GridShape, TileScheme};
use crate::matrix::Matrix;
use crate::metrics;
use crate::quantize::Granularity;
use crate::schedule::{RegimeParams, ScheduleConfig};
use crate::sparsity::{build_block_mask, density, WindowSpec};

pub const CSV_HEADER: &str =
    "step,regime,tile_t,tile_h,tile_w,win_t,win_h,win_w,density,flops_dense,flops_sparse,cosine_sim,mse,snr_db";

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputDistribution {
    Gaussian { sigma: f32 },
    Uniform { lo: f32, hi: f32 },
    /// Gaussian with a per-channel multiplier drawn log-uniformly from
    /// `[0.1, 10]`, mimicking activation outlier channels.
    HeavyTailed { sigma: f32 },
}

impl Default for InputDistribution {
    fn default() -> Self {
        InputDistribution::Gaussian { sigma: 1.0 }
    }
}

impl InputDistribution {
    fn validate(&self) -> Result<()> {
        match *self {
            InputDistribution::Gaussian { sigma } | InputDistribution::HeavyTailed { sigma } => {
                if !(sigma > 0.0 && sigma.is_finite()) {
                    return Err(Error::Config(format!("sigma must be positive, got {sigma}")));
                }
            }
            InputDistribution::Uniform { lo, hi } => {
                if !(lo < hi && lo.is_finite() && hi.is_finite()) {
                    return Err(Error::Config(format!("uniform needs lo < hi, got [{lo}, {hi})")));
                }
            }
        }
        Ok(())
    }
}

/// Missing keys take their [`Default`] values.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub grid: GridShape,
    pub seed: u64,
    pub schedule: ScheduleConfig,
    pub format: Fp8Kind,
    pub heads: usize,
    pub distribution: InputDistribution,
    pub passthrough: bool,
    pub qk_granularity: Granularity,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            grid: GridShape {
                t_frames: 24,
                height: 32,
                width: 32,
                d_model: 64,
            },
            seed: 0,
            schedule: ScheduleConfig::default(),
            format: Fp8Kind::E4M3,
            heads: 1,
            distribution: InputDistribution::default(),
            passthrough: false,
            qk_granularity: Granularity::PerTile3d,
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// All problems with the configuration, one message each.
    pub fn problems(&self) -> Vec<String> {
        let mut out = Vec::new();
        if let Err(e) = self.grid.validate() {
            out.push(e.to_string());
        }
        if self.heads == 0 {
            out.push("heads must be at least 1".into());
        }
        if let Err(e) = self.distribution.validate() {
            out.push(e.to_string());
        }
        if let Err(violations) = self.schedule.validate() {
            out.extend(violations.iter().map(|v| v.to_string()));
        }
        for (name, p) in [
            ("early", self.schedule.early),
            ("mid", self.schedule.mid),
            ("late", self.schedule.late),
        ] {
            if let Err(e) = build_tile_map(self.grid, p.tile) {
                out.push(format!("{name} tile: {e}"));
            }
        }
        out
    }

    pub fn validate(&self) -> Result<()> {
        let problems = self.problems();
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    fn fps_config(&self, window: WindowSpec) -> FpsConfig {
        let mut cfg = FpsConfig::new(self.format.format(), window, self.grid.d_model);
        cfg.passthrough = self.passthrough;
        cfg.qk_granularity = self.qk_granularity;
        cfg
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum TensorTag {
    Q = 0,
    K = 1,
    V = 2,
}

/// Counter-based uniform stream for one `(step, head, tag)` triple.
pub struct CounterRng {
    inner: ChaCha20Rng,
}

impl CounterRng {
    pub fn new(seed: u64, step: u64, head: u64, tag: u8) -> Self {
        let mut inner = ChaCha20Rng::seed_from_u64(seed);
        inner.set_stream((step << 24) ^ (head << 8) ^ tag as u64);
        Self { inner }
    }

    /// Jumps to the pair of 64-bit words owned by `index`.
    pub fn seek(&mut self, index: u64) {
        self.inner.set_word_pos(4 * index as u128);
    }

    /// Uniform in `(0, 1]` with 53 random bits.
    fn unit_open(&mut self) -> f64 {
        ((self.inner.next_u64() >> 11) + 1) as f64 * (1.0 / (1u64 << 53) as f64)
    }

    /// Value for the current index: consumes that index's two words.
    pub fn next_pair(&mut self) -> (f64, f64) {
        (self.unit_open(), self.unit_open())
    }
}

fn standard_normal(u1: f64, u2: f64) -> f64 {
    libm::sqrt(-2.0 * libm::log(u1)) * libm::cos(2.0 * std::f64::consts::PI * u2)
}

/// One tensor of `count` values; element `i` depends only on
/// `(seed, step, head, tag, i)`.
pub fn gen_values(
    seed: u64,
    step: u64,
    head: u64,
    tag: TensorTag,
    count: usize,
    dist: &InputDistribution,
) -> Vec<f32> {
    let mut rng = CounterRng::new(seed, step, head, tag as u8);
    rng.seek(0);
    (0..count)
        .map(|_| {
            let (u1, u2) = rng.next_pair();
            match *dist {
                InputDistribution::Gaussian { sigma } | InputDistribution::HeavyTailed { sigma } => {
                    (standard_normal(u1, u2) * sigma as f64) as f32
                }
                InputDistribution::Uniform { lo, hi } => {
                    // u1 is in (0, 1]; flip to [0, 1).
                    (lo as f64 + (1.0 - u1) * (hi as f64 - lo as f64)) as f32
                }
            }
        })
        .collect()
}

/// Per-channel multipliers of the heavy-tailed mode.
fn channel_multipliers(seed: u64, step: u64, head: u64, tag: TensorTag, d: usize) -> Vec<f32> {
    let mut rng = CounterRng::new(seed, step, head, 0x80 | tag as u8);
    let (lo, hi) = (libm::log(0.1), libm::log(10.0));
    (0..d)
        .map(|_| libm::exp(lo + (1.0 - rng.next_pair().0) * (hi - lo)) as f32)
        .collect()
}

/// Q, K, V for one head in row-major grid order.
#[derive(Debug, Clone, PartialEq)]
pub struct HeadTensors {
    pub q: Matrix,
    pub k: Matrix,
    pub v: Matrix,
}

pub fn gen_head(config: &ExperimentConfig, step: usize, head: usize) -> HeadTensors {
    let (l, d) = (config.grid.tokens(), config.grid.d_model);
    let make = |tag| {
        let mut data = gen_values(config.seed, step as u64, head as u64, tag, l * d, &config.distribution);
        if let InputDistribution::HeavyTailed { .. } = config.distribution {
            let mult = channel_multipliers(config.seed, step as u64, head as u64, tag, d);
            for row in data.chunks_mut(d) {
                for (x, m) in row.iter_mut().zip(&mult) {
                    *x *= m;
                }
            }
        }
        Matrix::from_vec(l, d, data).expect("generated shape")
    };
    HeadTensors {
        q: make(TensorTag::Q),
        k: make(TensorTag::K),
        v: make(TensorTag::V),
    }
}

/// Inputs for every head of one step, arranged for `params`' tile map.
pub fn gen_inputs(
    config: &ExperimentConfig,
    step: usize,
    params: &RegimeParams,
) -> Result<Vec<AttentionInputs>> {
    let map = build_tile_map(config.grid, params.tile)?;
    (0..config.heads)
        .map(|h| {
            let t = gen_head(config, step, h);
            AttentionInputs::from_grid_order(&t.q, &t.k, &t.v, map)
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsRow {
    pub step: usize,
    pub regime: String,
    pub params: RegimeParams,
    pub metrics: metrics::StepMetrics,
}

impl MetricsRow {
    pub fn to_csv_line(&self) -> String {
        let t = self.params.tile;
        let w = self.params.window;
        let m = &self.metrics;
        format!(
            "{},{},{},{},{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.regime,
            t.tile_t,
            t.tile_h,
            t.tile_w,
            w.win_t,
            w.win_h,
            w.win_w,
            m.density,
            m.flops_dense,
            m.flops_sparse,
            m.cosine_sim,
            m.mse,
            m.snr_db,
        )
    }
}

pub fn to_csv(rows: &[MetricsRow]) -> String {
    let mut out = String::from(CSV_HEADER);
    out.push('\n');
    for r in rows {
        let _ = writeln!(out, "{}", r.to_csv_line());
    }
    out
}

pub fn write_csv<W: io::Write>(rows: &[MetricsRow], mut w: W) -> io::Result<()> {
    w.write_all(to_csv(rows).as_bytes())
}

/// Runs the quantized pass and the sparse oracle for every head and averages
/// the metrics across heads.
pub fn measure(
    config: &ExperimentConfig,
    step: usize,
    input_step: usize,
    params: &RegimeParams,
) -> Result<metrics::StepMetrics> {
    params.window.validate()?;
    let inputs = gen_inputs(config, input_step, params)?;
    let map = *inputs[0].map();
    let mask = build_block_mask(params.window, map.tile_grid_dims)?;
    let fps = config.fps_config(params.window);

    let (mut cos, mut mse, mut snr) = (0.0f64, 0.0f64, 0.0f64);
    for head in &inputs {
        let reference = attention::sparse_reference(head, &mask, fps.softmax_scale)?;
        let approx = attention::fps_forward_masked(head, &mask, &fps)?.output;
        cos += metrics::cosine_similarity(reference.as_slice(), approx.as_slice())?;
        mse += metrics::mse(reference.as_slice(), approx.as_slice())?;
        snr += metrics::snr_db(reference.as_slice(), approx.as_slice())?;
    }
    let n = inputs.len() as f64;
    let dens = density(&mask);
    let (l, d) = (config.grid.tokens(), config.grid.d_model);
    Ok(metrics::StepMetrics {
        step,
        cosine_sim: cos / n,
        mse: mse / n,
        snr_db: snr / n,
        density: dens,
        flops_dense: metrics::flops_dense(l, d),
        flops_sparse: metrics::flops_sparse(l, d, dens)?,
    })
}

/// One row per denoising step `1..=D`.
pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<MetricsRow>> {
    config.validate()?;
    (1..=config.schedule.total_steps)
        .map(|step| {
            let regime = config.schedule.regime_at(step)?;
            let params = config.schedule.regime_params(regime);
            Ok(MetricsRow {
                step,
                regime: regime.to_string(),
                params,
                metrics: measure(config, step, step, &params)?,
            })
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Tile,
    Window,
}

impl std::str::FromStr for SweepAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tile" => Ok(SweepAxis::Tile),
            "window" => Ok(SweepAxis::Window),
            other => Err(Error::Config(format!("unknown sweep axis {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepOutcome {
    pub rows: Vec<MetricsRow>,
    /// Values that could not be evaluated, with the reason.
    pub failures: Vec<([usize; 3], Error)>,
}

/// Varies one axis while holding the other at `base`. Inputs are drawn for
/// step 1; the `step` column is the 1-based position in `values`. Failing
/// values are collected and the sweep continues.
pub fn sweep(
    config: &ExperimentConfig,
    axis: SweepAxis,
    values: &[[usize; 3]],
    base: RegimeParams,
) -> Result<SweepOutcome> {
    if config.heads == 0 {
        return Err(Error::Config("heads must be at least 1".into()));
    }
    config.grid.validate()?;
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for (i, &value) in values.iter().enumerate() {
        let params = match axis {
            SweepAxis::Tile => RegimeParams {
                tile: TileScheme::from(value),
                ..base
            },
            SweepAxis::Window => RegimeParams {
                window: WindowSpec::from(value),
                ..base
            },
        };
        let result = params
            .tile
            .validate()
            .and_then(|_| measure(config, i + 1, 1, &params));
        match result {
            Ok(metrics) => rows.push(MetricsRow {
                step: i + 1,
                regime: "sweep".into(),
                params,
                metrics,
            }),
            Err(e) => failures.push((value, e)),
        }
    }
    if axis == SweepAxis::Window {
        check_nested_density(&rows)?;
    }
    Ok(SweepOutcome { rows, failures })
}

/// Nested windows over the same tiles must never lose density.
fn check_nested_density(rows: &[MetricsRow]) -> Result<()> {
    for a in rows {
        for b in rows {
            if a.params.tile == b.params.tile
                && b.params.window.contains(&a.params.window)
                && a.metrics.density > b.metrics.density
            {
                return Err(Error::Invariant(format!(
                    "density fell from {} to {} when widening window {:?} to {:?}",
                    a.metrics.density, b.metrics.density, a.params.window, b.params.window
                )));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> ExperimentConfig {
        ExperimentConfig {
            grid: GridShape::new(4, 4, 4, 8).unwrap(),
            seed: 7,
            schedule: ScheduleConfig {
                alpha1: 0.34,
                alpha2: 0.67,
                early: RegimeParams::new([4, 4, 4], [1, 1, 1]),
                mid: RegimeParams::new([1, 2, 2], [3, 3, 3]),
                late: RegimeParams::new([2, 2, 2], [2, 2, 1]),
                total_steps: 3,
            },
            heads: 2,
            ..Default::default()
        }
    }

    #[test]
    fn generation_is_deterministic_and_seed_sensitive() {
        let c = small();
        assert_eq!(gen_head(&c, 1, 0), gen_head(&c, 1, 0));
        let other = ExperimentConfig { seed: 8, ..c };
        assert_ne!(gen_head(&c, 1, 0).q, gen_head(&other, 1, 0).q);
        assert_ne!(gen_head(&c, 1, 0).q, gen_head(&c, 1, 1).q);
        assert_ne!(gen_head(&c, 1, 0).q, gen_head(&c, 2, 0).q);
        assert_ne!(gen_head(&c, 1, 0).q, gen_head(&c, 1, 0).k);
    }

    #[test]
    fn elements_are_independently_addressable() {
        let dist = InputDistribution::default();
        let all = gen_values(3, 2, 1, TensorTag::V, 100, &dist);
        let mut rng = CounterRng::new(3, 2, 1, TensorTag::V as u8);
        for i in [0usize, 17, 99, 42] {
            rng.seek(i as u64);
            let (u1, u2) = rng.next_pair();
            assert_eq!(all[i], standard_normal(u1, u2) as f32);
        }
    }

    #[test]
    fn gaussian_sample_mean() {
        let v = gen_values(2024, 1, 0, TensorTag::Q, 1_000_000, &InputDistribution::default());
        let mean = v.iter().map(|&x| x as f64).sum::<f64>() / v.len() as f64;
        let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / v.len() as f64;
        assert!(mean.abs() < 0.01, "mean {mean}");
        assert!((var - 1.0).abs() < 0.01, "var {var}");
    }

    #[test]
    fn uniform_stays_in_range() {
        let v = gen_values(1, 1, 0, TensorTag::K, 10_000, &InputDistribution::Uniform { lo: -2.0, hi: 3.0 });
        assert!(v.iter().all(|&x| (-2.0..3.0).contains(&x)));
    }

    #[test]
    fn heavy_tailed_channels_vary() {
        let c = ExperimentConfig {
            distribution: InputDistribution::HeavyTailed { sigma: 1.0 },
            ..small()
        };
        let t = gen_head(&c, 1, 0);
        let col_max = |j| (0..t.q.rows()).map(|r| t.q.get(r, j).abs()).fold(0.0f32, f32::max);
        let maxes: Vec<f32> = (0..8).map(col_max).collect();
        let spread = maxes.iter().cloned().fold(0.0, f32::max) / maxes.iter().cloned().fold(f32::MAX, f32::min);
        assert!(spread > 2.0, "{maxes:?}");
    }

    #[test]
    fn run_emits_one_row_per_step() {
        let rows = run_experiment(&small()).unwrap();
        assert_eq!(rows.len(), 3);
        let regimes: Vec<&str> = rows.iter().map(|r| r.regime.as_str()).collect();
        assert_eq!(regimes, ["early", "mid", "late"]);
        let distinct: std::collections::HashSet<_> = rows.iter().map(|r| r.params).collect();
        assert_eq!(distinct.len(), 3);
        for r in &rows {
            assert!(r.metrics.cosine_sim > 0.9 && r.metrics.cosine_sim <= 1.0);
            assert!(r.metrics.flops_sparse <= r.metrics.flops_dense);
        }
        let csv = to_csv(&rows);
        assert!(csv.starts_with(CSV_HEADER));
        assert_eq!(csv.lines().count(), 4);
    }

    #[test]
    fn passthrough_rows_are_exact() {
        let c = ExperimentConfig {
            passthrough: true,
            ..small()
        };
        for r in run_experiment(&c).unwrap() {
            assert_eq!(r.metrics.mse, 0.0);
            assert_eq!(r.metrics.cosine_sim, 1.0);
            assert_eq!(r.metrics.snr_db, f64::INFINITY);
            assert!(r.to_csv_line().ends_with(",1,0,inf"));
        }
    }

    #[test]
    fn invalid_config_lists_problems() {
        let mut c = small();
        c.heads = 0;
        c.schedule.mid.tile = TileScheme::from([3, 2, 2]);
        let p = c.problems();
        assert!(p.iter().any(|m| m.contains("heads")));
        assert!(p.iter().any(|m| m.contains("mid tile") && m.contains("indivisible grid")));
        assert!(run_experiment(&c).is_err());
    }

    #[test]
    fn sweep_collects_failures_and_continues() {
        let c = small();
        let base = c.schedule.mid;
        let out = sweep(&c, SweepAxis::Tile, &[[1, 2, 2], [3, 3, 3], [2, 2, 2]], base).unwrap();
        assert_eq!(out.rows.len(), 2);
        assert_eq!(out.failures.len(), 1);
        assert_eq!(out.failures[0].0, [3, 3, 3]);

        let out = sweep(&c, SweepAxis::Window, &[], base).unwrap();
        assert!(out.rows.is_empty());
        assert_eq!(to_csv(&out.rows), format!("{CSV_HEADER}\n"));
    }

    #[test]
    fn config_toml_round_trip() {
        let c = small();
        let text = c.to_toml().unwrap();
        assert_eq!(ExperimentConfig::from_toml(&text).unwrap(), c);
        assert!(ExperimentConfig::from_toml("seed = 1\nbogus = 2").is_err());
    }
}
