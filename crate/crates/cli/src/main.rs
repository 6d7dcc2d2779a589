//! `fpsattn` command-line experiment runner.

use std::fs;
use std::io::{self, Write};
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};

use fpsattn::experiment::{self, ExperimentConfig, InputDistribution, SweepAxis};
use fpsattn::fp8::{decode, encode};
use fpsattn::grid::build_tile_map;
use fpsattn::sparsity::build_block_mask;
use fpsattn::{Fp8Code, Fp8Kind, Granularity, RegimeParams, TileScheme, WindowSpec};

#[derive(Parser, Debug)]
#[command(name = "fpsattn", version, about = "FP8 + sliding-tile sparse attention experiments")]
struct Cli {
    /// TOML configuration file; command-line flags override its keys.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Write output here instead of standard output.
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,

    #[command(flatten)]
    overrides: Overrides,

    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run the full denoising schedule and emit one CSV row per step.
    Run,
    /// Vary tile size or window size with everything else fixed.
    Sweep {
        #[arg(long, value_enum)]
        axis: AxisArg,
        /// Triples such as `3,4,4 6,8,8`.
        #[arg(long, num_args = 0.., value_parser = parse_triple)]
        values: Vec<[usize; 3]>,
        /// Tile held fixed during a window sweep (default: mid regime tile).
        #[arg(long, value_parser = parse_triple)]
        base_tile: Option<[usize; 3]>,
        /// Window held fixed during a tile sweep (default: mid regime window).
        #[arg(long, value_parser = parse_triple)]
        base_window: Option<[usize; 3]>,
    },
    /// Print the block mask, one line per query tile.
    MaskDump {
        /// Tile-grid dimensions; if absent they come from the grid and `--tile`.
        #[arg(long, value_parser = parse_triple)]
        dims: Option<[usize; 3]>,
        /// Tile scheme (default: mid regime tile).
        #[arg(long, value_parser = parse_triple)]
        tile: Option<[usize; 3]>,
        /// Window (default: mid regime window).
        #[arg(long, value_parser = parse_triple)]
        window: Option<[usize; 3]>,
    },
    /// Print every FP8 code with its value and check the round trip.
    QuantizeCheck {
        /// Restrict to one format (default: both).
        #[arg(long = "fp8")]
        kind: Option<Fp8Kind>,
    },
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum AxisArg {
    Tile,
    Window,
}

#[derive(ValueEnum, Clone, Copy, Debug)]
enum DistArg {
    Gaussian,
    Uniform,
    HeavyTailed,
}

/// Flags mirroring the config keys.
#[derive(Args, Debug, Default)]
struct Overrides {
    /// Token grid `t,h,w`.
    #[arg(long, global = true, value_parser = parse_triple)]
    grid: Option<[usize; 3]>,
    #[arg(long, global = true)]
    d_model: Option<usize>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Number of denoising steps.
    #[arg(long, global = true)]
    steps: Option<usize>,
    #[arg(long, global = true)]
    format: Option<Fp8Kind>,
    #[arg(long, global = true)]
    heads: Option<usize>,
    #[arg(long, global = true, value_enum)]
    distribution: Option<DistArg>,
    /// Gaussian / heavy-tailed standard deviation.
    #[arg(long, global = true)]
    sigma: Option<f32>,
    /// Uniform lower bound.
    #[arg(long, global = true, allow_negative_numbers = true)]
    lo: Option<f32>,
    /// Uniform upper bound.
    #[arg(long, global = true, allow_negative_numbers = true)]
    hi: Option<f32>,
    /// Skip quantization; the quantized path must then match the oracle exactly.
    #[arg(long, global = true)]
    passthrough: bool,
    /// Q/K scale granularity: per_tile_3d, per_token or per_tensor.
    #[arg(long, global = true)]
    qk_granularity: Option<Granularity>,
    #[arg(long, global = true)]
    alpha1: Option<f64>,
    #[arg(long, global = true)]
    alpha2: Option<f64>,
    #[arg(long, global = true, value_parser = parse_triple)]
    early_tile: Option<[usize; 3]>,
    #[arg(long, global = true, value_parser = parse_triple)]
    early_window: Option<[usize; 3]>,
    #[arg(long, global = true, value_parser = parse_triple)]
    mid_tile: Option<[usize; 3]>,
    #[arg(long, global = true, value_parser = parse_triple)]
    mid_window: Option<[usize; 3]>,
    #[arg(long, global = true, value_parser = parse_triple)]
    late_tile: Option<[usize; 3]>,
    #[arg(long, global = true, value_parser = parse_triple)]
    late_window: Option<[usize; 3]>,
}

fn parse_triple(s: &str) -> Result<[usize; 3], String> {
    let parts: Vec<&str> = s.split(',').map(str::trim).collect();
    let [a, b, c] = parts[..] else {
        return Err(format!("expected three comma-separated integers, got {s:?}"));
    };
    let p = |x: &str| x.parse::<usize>().map_err(|e| format!("{x:?}: {e}"));
    Ok([p(a)?, p(b)?, p(c)?])
}

impl Overrides {
    fn apply(&self, c: &mut ExperimentConfig) {
        if let Some([t, h, w]) = self.grid {
            c.grid.t_frames = t;
            c.grid.height = h;
            c.grid.width = w;
        }
        if let Some(d) = self.d_model {
            c.grid.d_model = d;
        }
        if let Some(s) = self.seed {
            c.seed = s;
        }
        if let Some(d) = self.steps {
            c.schedule.total_steps = d;
        }
        if let Some(f) = self.format {
            c.format = f;
        }
        if let Some(h) = self.heads {
            c.heads = h;
        }
        if let Some(kind) = self.distribution {
            c.distribution = match kind {
                DistArg::Gaussian => InputDistribution::Gaussian { sigma: 1.0 },
                DistArg::HeavyTailed => InputDistribution::HeavyTailed { sigma: 1.0 },
                DistArg::Uniform => InputDistribution::Uniform { lo: -1.0, hi: 1.0 },
            };
        }
        match &mut c.distribution {
            InputDistribution::Gaussian { sigma } | InputDistribution::HeavyTailed { sigma } => {
                if let Some(s) = self.sigma {
                    *sigma = s;
                }
            }
            InputDistribution::Uniform { lo, hi } => {
                if let Some(l) = self.lo {
                    *lo = l;
                }
                if let Some(h) = self.hi {
                    *hi = h;
                }
            }
        }
        if self.passthrough {
            c.passthrough = true;
        }
        if let Some(g) = self.qk_granularity {
            c.qk_granularity = g;
        }
        let s = &mut c.schedule;
        if let Some(a) = self.alpha1 {
            s.alpha1 = a;
        }
        if let Some(a) = self.alpha2 {
            s.alpha2 = a;
        }
        for (params, tile, window) in [
            (&mut s.early, self.early_tile, self.early_window),
            (&mut s.mid, self.mid_tile, self.mid_window),
            (&mut s.late, self.late_tile, self.late_window),
        ] {
            if let Some(t) = tile {
                params.tile = TileScheme::from(t);
            }
            if let Some(w) = window {
                params.window = WindowSpec::from(w);
            }
        }
    }
}

fn load_config(cli: &Cli) -> anyhow::Result<ExperimentConfig> {
    let mut config = match &cli.config {
        Some(path) => {
            let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            ExperimentConfig::from_toml(&text).with_context(|| format!("parsing {}", path.display()))?
        }
        None => ExperimentConfig::default(),
    };
    cli.overrides.apply(&mut config);
    Ok(config)
}

fn emit(out: &Option<PathBuf>, text: &str) -> anyhow::Result<()> {
    match out {
        Some(path) => fs::write(path, text).with_context(|| format!("writing {}", path.display())),
        None => {
            let mut stdout = io::stdout().lock();
            stdout.write_all(text.as_bytes())?;
            stdout.flush()?;
            Ok(())
        }
    }
}

fn run_command(config: &ExperimentConfig) -> anyhow::Result<String> {
    let problems = config.problems();
    if !problems.is_empty() {
        for p in &problems {
            eprintln!("config error: {p}");
        }
        bail!("invalid configuration ({} problem(s))", problems.len());
    }
    Ok(experiment::to_csv(&experiment::run_experiment(config)?))
}

/// Returns the CSV and the number of values that failed.
fn sweep_command(
    config: &ExperimentConfig,
    axis: AxisArg,
    values: &[[usize; 3]],
    base_tile: Option<[usize; 3]>,
    base_window: Option<[usize; 3]>,
) -> anyhow::Result<(String, usize)> {
    let mut base = config.schedule.mid;
    if let Some(t) = base_tile {
        base.tile = TileScheme::from(t);
    }
    if let Some(w) = base_window {
        base.window = WindowSpec::from(w);
    }
    let axis = match axis {
        AxisArg::Tile => SweepAxis::Tile,
        AxisArg::Window => SweepAxis::Window,
    };
    let outcome = experiment::sweep(config, axis, values, base)?;
    for (value, err) in &outcome.failures {
        eprintln!("sweep value {value:?} skipped: {err}");
    }
    Ok((experiment::to_csv(&outcome.rows), outcome.failures.len()))
}

fn mask_dump_command(
    config: &ExperimentConfig,
    dims: Option<[usize; 3]>,
    tile: Option<[usize; 3]>,
    window: Option<[usize; 3]>,
) -> anyhow::Result<String> {
    let RegimeParams { tile: mid_tile, window: mid_window } = config.schedule.mid;
    let window = window.map(WindowSpec::from).unwrap_or(mid_window);
    let dims = match dims {
        Some(d) => d,
        None => {
            let scheme = tile.map(TileScheme::from).unwrap_or(mid_tile);
            build_tile_map(config.grid, scheme)?.tile_grid_dims
        }
    };
    Ok(build_block_mask(window, dims)?.dump())
}

/// Returns the table and the number of codes that failed to round-trip.
fn quantize_check_command(kind: Option<Fp8Kind>) -> (String, usize) {
    let kinds = match kind {
        Some(k) => vec![k],
        None => vec![Fp8Kind::E4M3, Fp8Kind::E5M2],
    };
    let mut out = String::from("format,code,hex,value,roundtrip\n");
    let mut failures = 0;
    for kind in kinds {
        let fmt = kind.format();
        for c in 0..=255u8 {
            let (value, ok) = match decode(Fp8Code(c), &fmt) {
                Ok(v) => (v.to_string(), encode(v, &fmt).map(|e| e.0 == c).unwrap_or(false)),
                Err(_) => ("nan".to_string(), true),
            };
            if !ok {
                failures += 1;
            }
            out.push_str(&format!("{kind},{c},0x{c:02x},{value},{}\n", if ok { "ok" } else { "FAIL" }));
        }
    }
    (out, failures)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match real_main(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(2)
        }
    }
}

fn real_main(cli: &Cli) -> anyhow::Result<ExitCode> {
    if let Some(n) = cli.threads {
        if n == 0 {
            bail!("--threads must be at least 1");
        }
        rayon::ThreadPoolBuilder::new().num_threads(n).build_global()?;
    }
    let config = load_config(cli)?;
    match &cli.command {
        Command::Run => {
            emit(&cli.out, &run_command(&config)?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::Sweep {
            axis,
            values,
            base_tile,
            base_window,
        } => {
            let (csv, failures) = sweep_command(&config, *axis, values, *base_tile, *base_window)?;
            emit(&cli.out, &csv)?;
            Ok(if failures == 0 { ExitCode::SUCCESS } else { ExitCode::from(1) })
        }
        Command::MaskDump { dims, tile, window } => {
            emit(&cli.out, &mask_dump_command(&config, *dims, *tile, *window)?)?;
            Ok(ExitCode::SUCCESS)
        }
        Command::QuantizeCheck { kind } => {
            let (table, failures) = quantize_check_command(*kind);
            emit(&cli.out, &table)?;
            if failures > 0 {
                eprintln!("{failures} code(s) failed to round-trip");
                return Ok(ExitCode::from(1));
            }
            Ok(ExitCode::SUCCESS)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn triples_parse() {
        assert_eq!(parse_triple("6,8,8"), Ok([6, 8, 8]));
        assert_eq!(parse_triple(" 1, 2 ,3"), Ok([1, 2, 3]));
        assert!(parse_triple("1,2").is_err());
        assert!(parse_triple("1,2,x").is_err());
    }

    #[test]
    fn flags_override_config() {
        let cli = Cli::parse_from([
            "fpsattn", "--seed", "9", "--steps", "3", "--mid-window", "5,6,10", "--distribution", "uniform",
            "--lo", "-2", "run",
        ]);
        let mut c = ExperimentConfig::default();
        cli.overrides.apply(&mut c);
        assert_eq!(c.seed, 9);
        assert_eq!(c.schedule.total_steps, 3);
        assert_eq!(c.schedule.mid.window, WindowSpec::from([5, 6, 10]));
        assert_eq!(c.distribution, InputDistribution::Uniform { lo: -2.0, hi: 1.0 });
    }

    #[test]
    fn code_table_has_all_codes() {
        let (table, failures) = quantize_check_command(None);
        assert_eq!(failures, 0);
        assert_eq!(table.lines().count(), 1 + 512);
        assert!(table.contains("e4m3,126,0x7e,448,ok"));
        assert!(table.contains("e5m2,123,0x7b,57344,ok"));
        assert!(table.contains("e5m2,124,0x7c,inf,ok"));
    }
}
