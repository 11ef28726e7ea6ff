//! Experiment front-end: flat `key = value` configuration, the five
//! subcommands, and the CSV files they emit (each with a reader).

use std::collections::BTreeMap;
use std::fmt::{self, Write as _};
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;

use crate::baselines::{learning_config, run_baseline, BaselineKind};
use crate::controller::{control_loop, curve_csv, Controller, ControllerConfig, CriticDesign, EncoderUpdate};
use crate::error::{Error, Result};
use crate::nn::QuantileSet;
use crate::radio::RadioConfig;
use crate::ru::AsmTable;
use crate::sim::{run_episode, run_oracle_episode, step_rows_csv, ConstantPolicy, SchedulePolicy, SimConfig, SliceConfig, StepReport, StepSummary};
use crate::traces::{generate_synthetic, idle_statistics, load_trace, scale_load, IdleStats, SliceProfile, Trace};

/// The system under test or one of its comparison baselines.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    /// Distributional critics with tail-quantile constraints.
    Controller,
    Baseline(BaselineKind),
}

impl Variant {
    pub fn is_learning(self) -> bool {
        matches!(
            self,
            Variant::Controller | Variant::Baseline(BaselineKind::Ncb | BaselineKind::McNcb)
        )
    }

    /// Controller settings for a learning variant.
    pub fn controller_config(self, base: &ControllerConfig) -> Result<ControllerConfig> {
        match self {
            Variant::Controller => Ok(ControllerConfig {
                design: CriticDesign::Distributional,
                ..base.clone()
            }),
            Variant::Baseline(k) => learning_config(k, base),
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Variant::Controller => f.write_str("controller"),
            Variant::Baseline(k) => k.fmt(f),
        }
    }
}

impl FromStr for Variant {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        if s == "controller" {
            return Ok(Variant::Controller);
        }
        s.parse::<BaselineKind>()
            .map(Variant::Baseline)
            .map_err(|_| Error::Config(format!("unknown variant {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TraceSource {
    File(PathBuf),
    /// Synthetic traffic lasting `duration_us` at the configured load.
    Synthetic {
        duration_us: u64,
        profiles: Vec<SliceProfile>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub d_us: Vec<u64>,
    pub load_factors: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub sim: SimConfig,
    pub trace: TraceSource,
    pub load_factor: f64,
    pub controller: ControllerConfig,
    pub variant: Variant,
    pub compare_variants: Vec<Variant>,
    pub seed: u64,
    pub steps: Option<usize>,
    pub sweep: SweepConfig,
    pub analyze_tti_us: u64,
    pub analyze_window_us: u64,
    /// Threshold replayed by the oracle when no learning variant supplies one.
    pub oracle_d_us: u64,
    /// Window for trailing metrics in comparison summaries.
    pub trailing_steps: usize,
    /// Checkpoint stem for `evaluate`; defaults to `<out>/checkpoint`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            sim: SimConfig::default(),
            trace: TraceSource::Synthetic {
                duration_us: 60_000_000,
                profiles: vec![SliceProfile::reference_load(0)],
            },
            load_factor: 1.0,
            controller: ControllerConfig::default(),
            variant: Variant::Controller,
            compare_variants: vec![
                Variant::Controller,
                Variant::Baseline(BaselineKind::Ncb),
                Variant::Baseline(BaselineKind::McNcb),
            ],
            seed: 0,
            steps: None,
            sweep: SweepConfig {
                d_us: vec![0, 250, 1000, 4000, 16_000, 64_000],
                load_factors: vec![1.0, 2.0, 4.0],
            },
            analyze_tti_us: 1000,
            analyze_window_us: 1_000_000,
            oracle_d_us: 16_000,
            trailing_steps: 100,
            checkpoint: None,
        }
    }
}

/// Per-slice settings collected while parsing, applied once all keys are in.
#[derive(Debug, Default)]
struct SliceKeys {
    target_us: Option<f64>,
    active_from: Option<usize>,
    active_until: Option<usize>,
    rate_bps: Option<f64>,
    on_to_off: Option<f64>,
    off_to_on: Option<f64>,
    bursts_per_tti: Option<f64>,
    size_sigma: Option<f64>,
}

fn parse_list<T: FromStr>(v: &str) -> std::result::Result<Vec<T>, T::Err> {
    v.split(',').map(str::trim).filter(|s| !s.is_empty()).map(str::parse).collect()
}

fn ms_to_us(ms: f64) -> std::result::Result<u64, String> {
    if ms.is_finite() && ms >= 0.0 {
        Ok((ms * 1000.0).round() as u64)
    } else {
        Err(format!("expected a non-negative duration, got {ms}"))
    }
}

impl ExperimentConfig {
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    /// Parses `key = value` lines (`#` starts a comment) over the defaults.
    /// Relative trace paths resolve against the config file's directory.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = ExperimentConfig::default();
        let mut radio = RadioConfig::default();
        let mut asm: BTreeMap<usize, (Option<f64>, Option<f64>)> = BTreeMap::new();
        let mut slices: BTreeMap<usize, SliceKeys> = BTreeMap::new();
        let mut trace_file: Option<PathBuf> = None;
        let mut duration_us: Option<u64> = None;
        let mut n_reference: Option<usize> = None;
        let mut step_us = cfg.sim.step_us;
        let mut seen = BTreeMap::new();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let perr = |msg: String| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| perr(format!("expected `key = value`, got {line:?}")))?;
            if seen.insert(key.to_string(), i).is_some() {
                return Err(perr(format!("duplicate key {key:?}")));
            }
            macro_rules! num {
                () => {
                    value.parse().map_err(|e| perr(format!("{key}: {e}")))?
                };
            }
            let parts: Vec<&str> = key.split('.').collect();
            match parts.as_slice() {
                ["seed"] => cfg.seed = num!(),
                ["steps"] => cfg.steps = Some(num!()),
                ["variant"] => cfg.variant = value.parse().map_err(|e: Error| perr(e.to_string()))?,
                ["load_factor"] => cfg.load_factor = num!(),
                ["compare", "variants"] => {
                    cfg.compare_variants = parse_list(value).map_err(|e: Error| perr(e.to_string()))?;
                }
                ["compare", "trailing_steps"] => cfg.trailing_steps = num!(),
                ["trace", "file"] => {
                    let p = PathBuf::from(value);
                    trace_file = Some(match path.parent() {
                        Some(dir) if p.is_relative() => dir.join(p),
                        _ => p,
                    });
                }
                ["trace", "duration_s"] => {
                    let s: f64 = num!();
                    duration_us = Some(ms_to_us(s * 1000.0).map_err(perr)?);
                }
                ["trace", "slices"] => n_reference = Some(num!()),
                ["radio", "mu"] => radio.numerology = num!(),
                ["radio", "bandwidth_mhz"] => radio.bandwidth_mhz = num!(),
                ["radio", "r_max"] => radio.r_max = num!(),
                ["radio", "bits_per_rb_symbol"] => radio.bits_per_rb_symbol = num!(),
                ["power", "kappa_pam"] => cfg.sim.power.kappa_pam = num!(),
                ["power", "r_half"] => cfg.sim.power.r_half = num!(),
                ["asm", lvl, field @ ("power" | "delay_us")] => {
                    let depth: usize = lvl.parse().map_err(|_| perr(format!("bad ASM level {lvl:?}")))?;
                    if !(1..=3).contains(&depth) {
                        return Err(perr(format!("ASM level must be 1..=3, got {depth}")));
                    }
                    let e = asm.entry(depth).or_default();
                    if *field == "power" {
                        e.0 = Some(num!());
                    } else {
                        e.1 = Some(num!());
                    }
                }
                ["sim", "step_ms"] => step_us = ms_to_us(num!()).map_err(perr)?,
                ["sim", "d_max_ms"] => cfg.sim.d_max_us = ms_to_us(num!()).map_err(perr)?,
                ["sim", "ssb_period_ms"] => cfg.sim.ssb_period_us = Some(ms_to_us(num!()).map_err(perr)?),
                ["sim", "ssb_symbols"] => cfg.sim.ssb_symbols = num!(),
                ["slice", id, field] => {
                    let id: usize = id.parse().map_err(|_| perr(format!("bad slice id {id:?}")))?;
                    let s = slices.entry(id).or_default();
                    match *field {
                        "target_ms" => s.target_us = Some({ let ms: f64 = num!(); ms * 1000.0 }),
                        "active_from" => s.active_from = Some(num!()),
                        "active_until" => s.active_until = Some(num!()),
                        "rate_mbps" => s.rate_bps = Some({ let mbps: f64 = num!(); mbps * 1e6 }),
                        "on_to_off" => s.on_to_off = Some(num!()),
                        "off_to_on" => s.off_to_on = Some(num!()),
                        "bursts_per_tti" => s.bursts_per_tti = Some(num!()),
                        "size_sigma" => s.size_sigma = Some(num!()),
                        other => return Err(perr(format!("unknown slice setting {other:?}"))),
                    }
                }
                ["controller", field] => {
                    let c = &mut cfg.controller;
                    match *field {
                        "alpha" => c.alpha = num!(),
                        "lambda" => c.lambda = num!(),
                        "kappa" => c.kappa = num!(),
                        "batch" => c.batch = num!(),
                        "lr_actor" => c.lr_actor = num!(),
                        "lr_critic" => c.lr_critic = num!(),
                        "lr_encoder" => c.lr_encoder = num!(),
                        "l_max" => c.l_max = num!(),
                        "n_ctx" => c.n_ctx = num!(),
                        "d_enc" => c.d_enc = num!(),
                        "hidden" => c.hidden = parse_list(value).map_err(|e| perr(format!("{key}: {e}")))?,
                        "buffer" => c.buffer_capacity = num!(),
                        "noise_theta" => c.noise_theta = num!(),
                        "noise_sigma" => c.noise_sigma = num!(),
                        "updates_per_step" => c.updates_per_step = num!(),
                        "encoder_update" => {
                            c.encoder_update = match value {
                                "shared" => EncoderUpdate::Shared,
                                "critic_only" => EncoderUpdate::CriticOnly,
                                other => return Err(perr(format!("unknown encoder update {other:?}"))),
                            }
                        }
                        "quantiles" => {
                            let taus: Vec<f64> = parse_list(value).map_err(|e| perr(format!("{key}: {e}")))?;
                            c.quantiles = QuantileSet::new(taus).map_err(|e| perr(e.to_string()))?;
                        }
                        other => return Err(perr(format!("unknown controller setting {other:?}"))),
                    }
                }
                ["sweep", "d_ms"] => {
                    let ms: Vec<f64> = parse_list(value).map_err(|e| perr(format!("{key}: {e}")))?;
                    cfg.sweep.d_us = ms.into_iter().map(ms_to_us).collect::<std::result::Result<_, _>>().map_err(perr)?;
                }
                ["sweep", "load_factors"] => {
                    cfg.sweep.load_factors = parse_list(value).map_err(|e| perr(format!("{key}: {e}")))?;
                }
                ["analyze", "tti_us"] => cfg.analyze_tti_us = num!(),
                ["analyze", "window_ms"] => cfg.analyze_window_us = ms_to_us(num!()).map_err(perr)?,
                ["oracle", "d_ms"] => cfg.oracle_d_us = ms_to_us(num!()).map_err(perr)?,
                ["evaluate", "checkpoint"] => cfg.checkpoint = Some(PathBuf::from(value)),
                _ => return Err(perr(format!("unknown key {key:?}"))),
            }
        }

        let clock = radio.clock();
        let mut levels = *AsmTable::reference(clock).levels();
        for (depth, (power, delay)) in asm {
            let l = &mut levels[depth];
            l.norm_power = power.unwrap_or(l.norm_power);
            l.switch_delay_us = delay.unwrap_or(l.switch_delay_us);
        }
        cfg.sim.asm = AsmTable::new(levels, clock)?;
        cfg.sim.power.r_max = radio.r_max;
        cfg.sim.radio = radio;
        cfg.sim.step_us = step_us;
        cfg.sim.slices = slices
            .iter()
            .filter_map(|(id, s)| {
                s.target_us.map(|t| SliceConfig {
                    slice: *id,
                    qos_target_us: t,
                    active_from: s.active_from.unwrap_or(0),
                    active_until: s.active_until,
                })
            })
            .collect();
        if let Some((id, _)) = slices.iter().find(|(_, s)| s.target_us.is_none() && (s.active_from.is_some() || s.active_until.is_some())) {
            return Err(Error::Config(format!("slice {id} has an activity window but no target_ms")));
        }
        cfg.controller.d_max_us = cfg.sim.d_max_us;

        cfg.trace = match trace_file {
            Some(p) => {
                if duration_us.is_some() || n_reference.is_some() {
                    return Err(Error::Config("trace.file excludes synthetic trace settings".into()));
                }
                TraceSource::File(p)
            }
            None => {
                let profiles = if slices.is_empty() {
                    (0..n_reference.unwrap_or(1)).map(SliceProfile::reference_load).collect()
                } else {
                    if n_reference.is_some() {
                        return Err(Error::Config("trace.slices conflicts with per-slice settings".into()));
                    }
                    slices
                        .iter()
                        .map(|(id, s)| {
                            let r = SliceProfile::reference_load(*id);
                            SliceProfile {
                                mean_rate_bps: s.rate_bps.unwrap_or(r.mean_rate_bps),
                                on_to_off: s.on_to_off.unwrap_or(r.on_to_off),
                                off_to_on: s.off_to_on.unwrap_or(r.off_to_on),
                                mean_bursts_per_on_tti: s.bursts_per_tti.unwrap_or(r.mean_bursts_per_on_tti),
                                size_sigma: s.size_sigma.unwrap_or(r.size_sigma),
                                ..r
                            }
                        })
                        .collect()
                };
                let default_duration = match ExperimentConfig::default().trace {
                    TraceSource::Synthetic { duration_us, .. } => duration_us,
                    TraceSource::File(_) => unreachable!("default trace is synthetic"),
                };
                TraceSource::Synthetic {
                    duration_us: duration_us.unwrap_or(default_duration),
                    profiles,
                }
            }
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.sim.validate()?;
        self.controller.validate()?;
        if let Some(s) = self.sim.slices.iter().find(|s| s.slice >= self.controller.l_max) {
            return Err(Error::Config(format!(
                "slice {} exceeds the controller's {} slice ids",
                s.slice, self.controller.l_max
            )));
        }
        let load_ok = |f: f64| f > 0.0 && f.is_finite();
        if !load_ok(self.load_factor) || !self.sweep.load_factors.iter().all(|f| load_ok(*f)) {
            return Err(Error::Config("load factors must be positive and finite".into()));
        }
        if self.sweep.d_us.iter().any(|d| *d > self.sim.d_max_us) {
            return Err(Error::Config("sweep thresholds must not exceed d_max".into()));
        }
        if self.steps == Some(0) || self.trailing_steps == 0 {
            return Err(Error::Config("steps and trailing_steps must be positive".into()));
        }
        if self.oracle_d_us > self.sim.d_max_us {
            return Err(Error::Config("oracle threshold exceeds d_max".into()));
        }
        if self.compare_variants.is_empty() {
            return Err(Error::Config("compare.variants is empty".into()));
        }
        if let TraceSource::Synthetic { duration_us, profiles } = &self.trace {
            if *duration_us == 0 {
                return Err(Error::Config("trace duration must be positive".into()));
            }
            if let Some(p) = profiles.iter().find(|p| p.slice >= self.controller.l_max) {
                return Err(Error::Config(format!(
                    "slice {} exceeds the controller's {} slice ids",
                    p.slice, self.controller.l_max
                )));
            }
        }
        Ok(())
    }

    /// Applies command-line overrides; the seed drives both traffic and
    /// controller initialization.
    pub fn with_overrides(mut self, seed: Option<u64>, steps: Option<usize>) -> Result<Self> {
        if let Some(s) = seed {
            self.seed = s;
        }
        if steps.is_some() {
            self.steps = steps;
        }
        self.controller.seed = self.seed;
        self.validate()?;
        Ok(self)
    }

    /// The traffic at `load_factor` times the calibrated load.
    pub fn trace_at(&self, load_factor: f64) -> Result<Trace> {
        match &self.trace {
            TraceSource::File(p) => scale_load(&load_trace(p)?, load_factor),
            TraceSource::Synthetic { duration_us, profiles } => {
                // Generate proportionally more traffic so the compressed
                // trace still spans the configured duration.
                let raw = (*duration_us as f64 * load_factor).ceil() as u64;
                scale_load(&generate_synthetic(self.seed, raw, profiles)?, load_factor)
            }
        }
    }

    pub fn trace(&self) -> Result<Trace> {
        self.trace_at(self.load_factor)
    }

    fn controller_for(&self, v: Variant) -> Result<ControllerConfig> {
        v.controller_config(&ControllerConfig {
            seed: self.seed,
            ..self.controller.clone()
        })
    }
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn read_file(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::io(path, e))
}

fn parse_err(path: &Path, line: usize, msg: impl Into<String>) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line: line + 1,
        msg: msg.into(),
    }
}

/// Splits a CSV body after checking its header.
fn csv_rows<'a>(text: &'a str, header: &str, path: &Path) -> Result<Vec<(usize, Vec<&'a str>)>> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == header => {}
        Some((_, h)) => return Err(parse_err(path, 0, format!("unexpected header {h:?}"))),
        None => return Err(parse_err(path, 0, "empty file")),
    }
    let n = header.split(',').count();
    lines
        .filter(|(_, l)| !l.is_empty())
        .map(|(i, l)| {
            let f: Vec<&str> = l.split(',').collect();
            if f.len() == n {
                Ok((i, f))
            } else {
                Err(parse_err(path, i, format!("expected {n} fields, got {}", f.len())))
            }
        })
        .collect()
}

fn field<T: FromStr>(path: &Path, line: usize, s: &str, name: &str) -> Result<T>
where
    T::Err: fmt::Display,
{
    s.parse().map_err(|e| parse_err(path, line, format!("{name}: {e}")))
}

// ---- analyze ---------------------------------------------------------------

pub const IDLE_CSV_HEADER: &str = "window_start_us,total_ttis,active_ttis,idle_ratio,idle_runs";

/// Idle runs are `;`-separated TTI counts.
pub fn idle_stats_csv(rows: &[IdleStats]) -> String {
    let mut out = format!("{IDLE_CSV_HEADER}\n");
    for r in rows {
        let runs: Vec<String> = r.idle_runs.iter().map(u32::to_string).collect();
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.window_start_us,
            r.total_ttis,
            r.active_ttis,
            r.idle_ratio,
            runs.join(";")
        );
    }
    out
}

pub fn parse_idle_stats_csv(text: &str, path: &Path) -> Result<Vec<IdleStats>> {
    csv_rows(text, IDLE_CSV_HEADER, path)?
        .into_iter()
        .map(|(i, f)| {
            let idle_runs = if f[4].is_empty() {
                Vec::new()
            } else {
                f[4].split(';').map(|r| field(path, i, r, "idle_runs")).collect::<Result<_>>()?
            };
            Ok(IdleStats {
                window_start_us: field(path, i, f[0], "window_start_us")?,
                total_ttis: field(path, i, f[1], "total_ttis")?,
                active_ttis: field(path, i, f[2], "active_ttis")?,
                idle_ratio: field(path, i, f[3], "idle_ratio")?,
                idle_runs,
            })
        })
        .collect()
}

pub fn read_idle_stats_csv(path: impl AsRef<Path>) -> Result<Vec<IdleStats>> {
    let path = path.as_ref();
    parse_idle_stats_csv(&read_file(path)?, path)
}

/// Idle-period statistics of the configured trace; writes `idle_stats.csv`.
pub fn cmd_analyze(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<IdleStats>> {
    let stats = idle_statistics(&cfg.trace()?, cfg.analyze_tti_us, cfg.analyze_window_us)?;
    write_file(&out.join("idle_stats.csv"), &idle_stats_csv(&stats))?;
    Ok(stats)
}

// ---- sweep -----------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct ParetoPoint {
    pub load_factor: f64,
    pub d_us: u64,
    /// Mean burst delay over the threshold-0 run at the same load.
    pub extra_delay_ms: f64,
    /// `1 - E / E_awake` over the whole episode.
    pub power_saving: f64,
}

pub const PARETO_CSV_HEADER: &str = "load_factor,d_us,extra_delay_ms,power_saving";

pub fn pareto_csv(rows: &[ParetoPoint]) -> String {
    let mut out = format!("{PARETO_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(out, "{},{},{},{}", r.load_factor, r.d_us, r.extra_delay_ms, r.power_saving);
    }
    out
}

pub fn parse_pareto_csv(text: &str, path: &Path) -> Result<Vec<ParetoPoint>> {
    csv_rows(text, PARETO_CSV_HEADER, path)?
        .into_iter()
        .map(|(i, f)| {
            Ok(ParetoPoint {
                load_factor: field(path, i, f[0], "load_factor")?,
                d_us: field(path, i, f[1], "d_us")?,
                extra_delay_ms: field(path, i, f[2], "extra_delay_ms")?,
                power_saving: field(path, i, f[3], "power_saving")?,
            })
        })
        .collect()
}

pub fn read_pareto_csv(path: impl AsRef<Path>) -> Result<Vec<ParetoPoint>> {
    let path = path.as_ref();
    parse_pareto_csv(&read_file(path)?, path)
}

/// Episode-level energy saving and mean burst delay (us).
pub fn episode_saving_and_delay(reports: &[StepReport]) -> (f64, f64) {
    let energy: f64 = reports.iter().map(|r| r.energy).sum();
    let reference: f64 = reports.iter().map(|r| r.reference_energy).sum();
    let saving = if reference > 0.0 { 1.0 - energy / reference } else { 0.0 };
    let (sum, n) = reports
        .iter()
        .flat_map(|r| r.delays.iter())
        .fold((0.0, 0usize), |(s, n), (_, d)| (s + d, n + 1));
    (saving, if n == 0 { 0.0 } else { sum / n as f64 })
}

/// Constant-threshold episodes over the grid of thresholds and loads, run
/// in parallel; writes `pareto.csv` ordered by load, then threshold.
pub fn cmd_sweep(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<ParetoPoint>> {
    let traces: Vec<(f64, Trace)> = cfg
        .sweep
        .load_factors
        .iter()
        .map(|f| cfg.trace_at(*f).map(|t| (*f, t)))
        .collect::<Result<_>>()?;
    let mut jobs = Vec::new();
    for (li, _) in traces.iter().enumerate() {
        jobs.push((li, 0));
        jobs.extend(cfg.sweep.d_us.iter().map(|d| (li, *d)));
    }
    let results: Vec<(usize, u64, (f64, f64))> = jobs
        .par_iter()
        .map(|&(li, d)| {
            let r = run_episode(&traces[li].1, &mut ConstantPolicy(d), &cfg.sim, cfg.steps)?;
            Ok((li, d, episode_saving_and_delay(&r)))
        })
        .collect::<Result<_>>()?;
    let mut base_delay = BTreeMap::new();
    for (li, d, (_, delay)) in &results {
        if *d == 0 {
            base_delay.insert(*li, *delay);
        }
    }
    let points: Vec<ParetoPoint> = traces
        .iter()
        .enumerate()
        .flat_map(|(li, (f, _))| {
            let (results, base_delay) = (&results, &base_delay);
            cfg.sweep.d_us.iter().map(move |d| {
                let (saving, delay) = results
                    .iter()
                    .find(|(l, dd, _)| *l == li && dd == d)
                    .map(|x| x.2)
                    .expect("every grid point was run");
                ParetoPoint {
                    load_factor: *f,
                    d_us: *d,
                    extra_delay_ms: (delay - base_delay[&li]) / 1000.0,
                    power_saving: saving,
                }
            })
        })
        .collect();
    write_file(&out.join("pareto.csv"), &pareto_csv(&points))?;
    Ok(points)
}

// ---- train / evaluate ------------------------------------------------------

fn summaries(reports: &[StepReport]) -> Vec<StepSummary> {
    reports.iter().map(StepReport::summary).collect()
}

fn require_learning(v: Variant) -> Result<()> {
    if v.is_learning() {
        Ok(())
    } else {
        Err(Error::Config(format!("variant {v} does not learn")))
    }
}

/// Trains the configured learning variant online. Writes the checkpoint
/// (`checkpoint.*`), `train_curve.csv` and `train_steps.csv`.
pub fn cmd_train(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<StepReport>> {
    require_learning(cfg.variant)?;
    let trace = cfg.trace()?;
    let mut c = Controller::new(cfg.controller_for(cfg.variant)?)?;
    let reports = control_loop(&trace, &cfg.sim, &mut c, cfg.steps)?;
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    c.save(out.join("checkpoint"))?;
    let name = cfg.variant.to_string();
    write_file(&out.join("train_curve.csv"), &curve_csv(c.curve(), Some(&name)))?;
    write_file(&out.join("train_steps.csv"), &step_rows_csv(&summaries(&reports), Some(&name)))?;
    Ok(reports)
}

/// Runs the configured variant without learning or exploration (learning
/// variants load their checkpoint first). Writes `eval_steps.csv`.
pub fn cmd_evaluate(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<StepReport>> {
    let trace = cfg.trace()?;
    let reports = match cfg.variant {
        v if v.is_learning() => {
            let stem = cfg.checkpoint.clone().unwrap_or_else(|| out.join("checkpoint"));
            let mut c = Controller::load(cfg.controller_for(v)?, &stem)?;
            c.set_training(false);
            c.set_exploration(false);
            control_loop(&trace, &cfg.sim, &mut c, cfg.steps)?
        }
        Variant::Baseline(BaselineKind::OracleAsm) => {
            run_oracle_episode(&trace, &mut ConstantPolicy(cfg.oracle_d_us), &cfg.sim, cfg.steps)?
        }
        Variant::Baseline(k) => run_baseline(k, &trace, &cfg.sim, &cfg.controller, cfg.steps, None)?,
        Variant::Controller => unreachable!("learning variants handled above"),
    };
    let name = cfg.variant.to_string();
    write_file(&out.join("eval_steps.csv"), &step_rows_csv(&summaries(&reports), Some(&name)))?;
    Ok(reports)
}

// ---- compare ---------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct RunSummary {
    pub variant: String,
    pub steps: usize,
    pub mean_energy_norm: f64,
    /// Violated (slice, step) observations over all observations.
    pub violation_rate: f64,
    pub trailing_energy_norm: f64,
    pub trailing_violation_rate: f64,
}

impl RunSummary {
    pub fn from_reports(variant: &str, reports: &[StepReport], trailing: usize) -> Self {
        let rate = |rs: &[StepReport]| {
            let n: usize = rs.iter().map(|r| r.qos.len()).sum();
            let v: usize = rs.iter().map(StepReport::violation_count).sum();
            if n == 0 { 0.0 } else { v as f64 / n as f64 }
        };
        let mean_e = |rs: &[StepReport]| {
            if rs.is_empty() {
                0.0
            } else {
                rs.iter().map(|r| r.energy_norm).sum::<f64>() / rs.len() as f64
            }
        };
        let tail = &reports[reports.len().saturating_sub(trailing)..];
        RunSummary {
            variant: variant.to_string(),
            steps: reports.len(),
            mean_energy_norm: mean_e(reports),
            violation_rate: rate(reports),
            trailing_energy_norm: mean_e(tail),
            trailing_violation_rate: rate(tail),
        }
    }
}

pub const SUMMARY_CSV_HEADER: &str =
    "variant,steps,mean_energy_norm,violation_rate,trailing_energy_norm,trailing_violation_rate";

pub fn summary_csv(rows: &[RunSummary]) -> String {
    let mut out = format!("{SUMMARY_CSV_HEADER}\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.variant, r.steps, r.mean_energy_norm, r.violation_rate, r.trailing_energy_norm, r.trailing_violation_rate
        );
    }
    out
}

pub fn parse_summary_csv(text: &str, path: &Path) -> Result<Vec<RunSummary>> {
    csv_rows(text, SUMMARY_CSV_HEADER, path)?
        .into_iter()
        .map(|(i, f)| {
            Ok(RunSummary {
                variant: f[0].to_string(),
                steps: field(path, i, f[1], "steps")?,
                mean_energy_norm: field(path, i, f[2], "mean_energy_norm")?,
                violation_rate: field(path, i, f[3], "violation_rate")?,
                trailing_energy_norm: field(path, i, f[4], "trailing_energy_norm")?,
                trailing_violation_rate: field(path, i, f[5], "trailing_violation_rate")?,
            })
        })
        .collect()
}

pub fn read_summary_csv(path: impl AsRef<Path>) -> Result<Vec<RunSummary>> {
    let path = path.as_ref();
    parse_summary_csv(&read_file(path)?, path)
}

/// Runs every comparison variant on the same traffic. Learning variants
/// train online in parallel; the oracle replays the thresholds chosen by
/// the first learning variant in the list (or the configured constant).
/// Writes `compare.csv` (one row per step, slice and variant) and
/// `compare_summary.csv`, both in list order.
pub fn cmd_compare(cfg: &ExperimentConfig, out: &Path) -> Result<Vec<(Variant, Vec<StepReport>)>> {
    let trace = cfg.trace()?;
    let first_pass: Vec<Option<Vec<StepReport>>> = cfg
        .compare_variants
        .par_iter()
        .map(|v| match *v {
            Variant::Baseline(BaselineKind::OracleAsm) => Ok(None),
            v if v.is_learning() => {
                let mut c = Controller::new(cfg.controller_for(v)?)?;
                control_loop(&trace, &cfg.sim, &mut c, cfg.steps).map(Some)
            }
            Variant::Baseline(k) => run_baseline(k, &trace, &cfg.sim, &cfg.controller, cfg.steps, None).map(Some),
            Variant::Controller => unreachable!("learning variants handled above"),
        })
        .collect::<Result<_>>()?;
    let thresholds: Vec<u64> = cfg
        .compare_variants
        .iter()
        .zip(&first_pass)
        .find(|(v, _)| v.is_learning())
        .and_then(|(_, r)| r.as_ref())
        .map(|r| r.iter().map(|s| s.d_us).collect())
        .unwrap_or_default();
    let mut runs = Vec::with_capacity(first_pass.len());
    for (v, r) in cfg.compare_variants.iter().zip(first_pass) {
        let reports = match r {
            Some(r) => r,
            None if thresholds.is_empty() => {
                run_oracle_episode(&trace, &mut ConstantPolicy(cfg.oracle_d_us), &cfg.sim, cfg.steps)?
            }
            None => run_oracle_episode(&trace, &mut SchedulePolicy(thresholds.clone()), &cfg.sim, Some(thresholds.len()))?,
        };
        runs.push((*v, reports));
    }
    let mut csv = String::new();
    let mut table = Vec::new();
    for (i, (v, reports)) in runs.iter().enumerate() {
        let name = v.to_string();
        let block = step_rows_csv(&summaries(reports), Some(&name));
        // Keep a single header.
        csv.push_str(if i == 0 { &block } else { block.split_once('\n').map_or("", |b| b.1) });
        table.push(RunSummary::from_reports(&name, reports, cfg.trailing_steps));
    }
    write_file(&out.join("compare.csv"), &csv)?;
    write_file(&out.join("compare_summary.csv"), &summary_csv(&table))?;
    Ok(runs)
}
