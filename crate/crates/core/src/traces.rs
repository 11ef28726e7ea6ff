//! Downlink traffic traces: CSV ingestion, synthetic bursty generation,
//! time compression for load scaling, and TTI idle-activity statistics.

use std::fs;
use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, LogNormal};

use crate::error::{Error, Result};

/// Hard upper bound on slice identifiers accepted anywhere in the crate.
pub const MAX_SLICES: usize = 64;

pub const TRACE_HEADER: &str = "t_ms,size_bytes,slice_id";

/// A single downlink data burst.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct DataBurst {
    /// Microseconds since episode start.
    pub arrival_us: u64,
    pub size_bits: u64,
    pub slice: usize,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Trace {
    /// Sorted by `(arrival_us, slice)`.
    pub bursts: Vec<DataBurst>,
    pub duration_us: u64,
}

impl Trace {
    /// Builds a trace, sorting bursts by arrival (stable, ties by slice id).
    pub fn new(mut bursts: Vec<DataBurst>, duration_us: u64) -> Result<Self> {
        bursts.sort_by_key(|b| (b.arrival_us, b.slice));
        for b in &bursts {
            if b.size_bits == 0 {
                return Err(Error::InvalidArgument("burst of size 0".into()));
            }
            if b.slice >= MAX_SLICES {
                return Err(Error::UnknownSlice(b.slice));
            }
            if b.arrival_us >= duration_us {
                return Err(Error::InvalidArgument(format!(
                    "burst at {} us outside trace duration {} us",
                    b.arrival_us, duration_us
                )));
            }
        }
        Ok(Trace {
            bursts,
            duration_us,
        })
    }

    pub fn total_bits(&self) -> u64 {
        self.bursts.iter().map(|b| b.size_bits).sum()
    }

    /// Mean offered rate in bits per second.
    pub fn mean_rate_bps(&self) -> f64 {
        if self.duration_us == 0 {
            return 0.0;
        }
        self.total_bits() as f64 / (self.duration_us as f64 * 1e-6)
    }

    /// Bursts with `start_us <= arrival < end_us`.
    pub fn window(&self, start_us: u64, end_us: u64) -> &[DataBurst] {
        let lo = self.bursts.partition_point(|b| b.arrival_us < start_us);
        let hi = self.bursts.partition_point(|b| b.arrival_us < end_us);
        &self.bursts[lo..hi]
    }

    /// Merges several traces, keeping the longest duration.
    pub fn merge(traces: impl IntoIterator<Item = Trace>) -> Trace {
        let mut bursts = Vec::new();
        let mut duration_us = 0;
        for t in traces {
            duration_us = duration_us.max(t.duration_us);
            bursts.extend(t.bursts);
        }
        bursts.sort_by_key(|b| (b.arrival_us, b.slice));
        Trace {
            bursts,
            duration_us,
        }
    }
}

fn parse_ms_to_us(field: &str) -> Option<u64> {
    let (int, frac) = match field.split_once('.') {
        Some((i, f)) => (i, f),
        None => (field, ""),
    };
    if int.is_empty() && frac.is_empty() {
        return None;
    }
    if !int.bytes().all(|c| c.is_ascii_digit()) || !frac.bytes().all(|c| c.is_ascii_digit()) {
        return None;
    }
    let ms: u64 = if int.is_empty() { 0 } else { int.parse().ok()? };
    let mut us = 0u64;
    let digits = frac.as_bytes();
    for i in 0..3 {
        us = us * 10 + digits.get(i).map_or(0, |d| u64::from(d - b'0'));
    }
    // Round half up on the sub-microsecond remainder.
    if digits.get(3).is_some_and(|d| *d >= b'5') {
        us += 1;
    }
    ms.checked_mul(1000)?.checked_add(us)
}

/// Reads a `t_ms,size_bytes,slice_id` trace. Rows are sorted by arrival
/// (stable); the duration is one microsecond past the last arrival.
pub fn load_trace(path: impl AsRef<Path>) -> Result<Trace> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_trace(&text, path)
}

pub fn parse_trace(text: &str, path: &Path) -> Result<Trace> {
    let parse_err = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line,
        msg,
    };
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end_matches('\r') == TRACE_HEADER => {}
        Some((_, h)) => {
            return Err(parse_err(
                1,
                format!("expected header `{TRACE_HEADER}`, found `{h}`"),
            ))
        }
        None => return Err(parse_err(1, "missing header".into())),
    }
    let mut bursts = Vec::new();
    for (idx, raw) in lines {
        let line_no = idx + 1;
        let line = raw.trim_end_matches('\r');
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 3 {
            return Err(parse_err(
                line_no,
                format!("expected 3 fields, found {}", fields.len()),
            ));
        }
        let arrival_us = parse_ms_to_us(fields[0])
            .ok_or_else(|| parse_err(line_no, format!("bad t_ms `{}`", fields[0])))?;
        let bytes: u64 = fields[1]
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad size_bytes `{}`", fields[1])))?;
        if bytes == 0 {
            return Err(parse_err(line_no, "size_bytes must be positive".into()));
        }
        let slice: usize = fields[2]
            .parse()
            .map_err(|_| parse_err(line_no, format!("bad slice_id `{}`", fields[2])))?;
        if slice >= MAX_SLICES {
            return Err(parse_err(line_no, format!("slice_id {slice} too large")));
        }
        bursts.push(DataBurst {
            arrival_us,
            size_bits: bytes * 8,
            slice,
        });
    }
    let duration_us = bursts.iter().map(|b| b.arrival_us + 1).max().unwrap_or(0);
    Trace::new(bursts, duration_us)
}

/// Writes a trace in the `t_ms,size_bytes,slice_id` format. Sizes are
/// rounded up to whole bytes.
pub fn write_trace(trace: &Trace, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let mut out = String::with_capacity(trace.bursts.len() * 20 + 32);
    out.push_str(TRACE_HEADER);
    out.push('\n');
    for b in &trace.bursts {
        out.push_str(&format!(
            "{}.{:03},{},{}\n",
            b.arrival_us / 1000,
            b.arrival_us % 1000,
            b.size_bits.div_ceil(8),
            b.slice
        ));
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(out.as_bytes()).map_err(|e| Error::io(path, e))
}

/// Per-slice on/off Markov-modulated traffic source, evaluated once per TTI.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceProfile {
    pub slice: usize,
    /// Long-run offered load in bits per second.
    pub mean_rate_bps: f64,
    /// Probability of switching from "on" to "off" at a TTI boundary.
    pub on_to_off: f64,
    /// Probability of switching from "off" to "on" at a TTI boundary.
    pub off_to_on: f64,
    /// Mean of the geometric burst count in an "on" TTI (>= 1).
    pub mean_bursts_per_on_tti: f64,
    /// Shape of the log-normal burst size distribution.
    pub size_sigma: f64,
    pub tti_us: u64,
}

impl SliceProfile {
    /// Calibrated to present-day cell activity: about 60% idle 1 ms TTIs,
    /// median idle run of 2 TTIs, 99th percentile of 8 TTIs, ~1.5 Mb/s.
    pub fn reference_load(slice: usize) -> Self {
        SliceProfile {
            slice,
            mean_rate_bps: 1.5e6,
            on_to_off: 0.72,
            off_to_on: 0.48,
            mean_bursts_per_on_tti: 1.5,
            size_sigma: 1.0,
            tti_us: 1000,
        }
    }

    /// Stationary probability of the "on" state.
    pub fn on_fraction(&self) -> f64 {
        let denom = self.on_to_off + self.off_to_on;
        if denom <= 0.0 {
            0.0
        } else {
            self.off_to_on / denom
        }
    }

    fn validate(&self) -> Result<()> {
        let prob = |p: f64| (0.0..=1.0).contains(&p);
        if !prob(self.on_to_off) || !prob(self.off_to_on) {
            return Err(Error::InvalidArgument(
                "transition probabilities must lie in [0, 1]".into(),
            ));
        }
        if self.mean_bursts_per_on_tti < 1.0 || self.tti_us == 0 {
            return Err(Error::InvalidArgument(
                "mean_bursts_per_on_tti must be >= 1 and tti_us > 0".into(),
            ));
        }
        if !(self.mean_rate_bps >= 0.0) || !(self.size_sigma >= 0.0) {
            return Err(Error::InvalidArgument(
                "mean rate and size sigma must be non-negative".into(),
            ));
        }
        if self.slice >= MAX_SLICES {
            return Err(Error::UnknownSlice(self.slice));
        }
        Ok(())
    }
}

fn slice_rng(seed: u64, slice: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(slice as u64 + 1);
    rng
}

/// Generates a synthetic multi-slice trace. Deterministic in `seed`.
pub fn generate_synthetic(seed: u64, duration_us: u64, slices: &[SliceProfile]) -> Result<Trace> {
    if duration_us == 0 {
        return Err(Error::InvalidArgument("duration must be positive".into()));
    }
    let mut bursts = Vec::new();
    for profile in slices {
        profile.validate()?;
        let mut rng = slice_rng(seed, profile.slice);
        let pi_on = profile.on_fraction();
        if pi_on <= 0.0 || profile.mean_rate_bps <= 0.0 {
            continue;
        }
        let mean_size =
            profile.mean_rate_bps * profile.tti_us as f64 * 1e-6 / (pi_on * profile.mean_bursts_per_on_tti);
        let sigma = profile.size_sigma;
        let sizes = LogNormal::new(mean_size.ln() - 0.5 * sigma * sigma, sigma)
            .map_err(|e| Error::InvalidArgument(e.to_string()))?;
        let p_stop = 1.0 / profile.mean_bursts_per_on_tti;

        let mut on = rng.random::<f64>() < pi_on;
        let mut tti_start = 0;
        while tti_start < duration_us {
            let tti_len = profile.tti_us.min(duration_us - tti_start);
            if on {
                let mut count = 1;
                while rng.random::<f64>() >= p_stop {
                    count += 1;
                }
                for _ in 0..count {
                    let offset = rng.random_range(0..tti_len);
                    let raw: f64 = sizes.sample(&mut rng);
                    let bytes = (raw / 8.0).round().max(1.0) as u64;
                    bursts.push(DataBurst {
                        arrival_us: tti_start + offset,
                        size_bits: bytes * 8,
                        slice: profile.slice,
                    });
                }
            }
            let u = rng.random::<f64>();
            on = if on { u >= profile.on_to_off } else { u < profile.off_to_on };
            tti_start += profile.tti_us;
        }
    }
    Trace::new(bursts, duration_us)
}

/// Compresses time by `factor`: arrivals and duration are divided by it
/// (arrivals floored, duration ceiled), sizes unchanged.
pub fn scale_load(trace: &Trace, factor: f64) -> Result<Trace> {
    if !(factor > 0.0) || !factor.is_finite() {
        return Err(Error::InvalidArgument(format!(
            "load factor must be positive, got {factor}"
        )));
    }
    if factor == 1.0 {
        return Ok(trace.clone());
    }
    let int_factor = (factor.fract() == 0.0 && factor <= u64::MAX as f64).then_some(factor as u64);
    let scale_floor = |t: u64| match int_factor {
        Some(k) => t / k,
        None => (t as f64 / factor).floor() as u64,
    };
    let scale_ceil = |t: u64| match int_factor {
        Some(k) => t.div_ceil(k),
        None => (t as f64 / factor).ceil() as u64,
    };
    let bursts = trace
        .bursts
        .iter()
        .map(|b| DataBurst {
            arrival_us: scale_floor(b.arrival_us),
            ..*b
        })
        .collect();
    let duration_us = scale_ceil(trace.duration_us);
    Trace::new(bursts, duration_us)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IdleStats {
    pub window_start_us: u64,
    pub total_ttis: u32,
    pub active_ttis: u32,
    /// `(total - active) / total`.
    pub idle_ratio: f64,
    /// Lengths (in TTIs) of maximal idle runs inside the window.
    pub idle_runs: Vec<u32>,
}

/// Classifies every TTI as active (at least one arrival) or idle, and
/// summarizes each window.
pub fn idle_statistics(trace: &Trace, tti_us: u64, window_us: u64) -> Result<Vec<IdleStats>> {
    if tti_us == 0 {
        return Err(Error::InvalidArgument("tti must be positive".into()));
    }
    if window_us < tti_us {
        return Err(Error::InvalidArgument(format!(
            "window {window_us} us shorter than tti {tti_us} us"
        )));
    }
    if window_us % tti_us != 0 {
        return Err(Error::InvalidArgument(format!(
            "window {window_us} us is not a multiple of tti {tti_us} us"
        )));
    }
    let n_ttis = trace.duration_us.div_ceil(tti_us) as usize;
    let mut active = vec![false; n_ttis];
    for b in &trace.bursts {
        active[(b.arrival_us / tti_us) as usize] = true;
    }
    let per_window = (window_us / tti_us) as usize;
    let mut out = Vec::with_capacity(n_ttis.div_ceil(per_window));
    for (w, chunk) in active.chunks(per_window).enumerate() {
        let mut runs = Vec::new();
        let mut run = 0u32;
        let mut n_active = 0u32;
        for &a in chunk {
            if a {
                n_active += 1;
                if run > 0 {
                    runs.push(run);
                    run = 0;
                }
            } else {
                run += 1;
            }
        }
        if run > 0 {
            runs.push(run);
        }
        let total = chunk.len() as u32;
        out.push(IdleStats {
            window_start_us: w as u64 * window_us,
            total_ttis: total,
            active_ttis: n_active,
            idle_ratio: f64::from(total - n_active) / f64::from(total),
            idle_runs: runs,
        });
    }
    Ok(out)
}
