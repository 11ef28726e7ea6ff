//! Air-interface numerology and the exact symbol clock.
//!
//! Time is kept in integer microseconds for traffic and in integer symbol
//! indices for the scheduler. A symbol lasts `1000 / (14 * 2^mu)` us, which
//! is not an integer, so conversions go through an internal tick of
//! `1 / (14 * 2^mu)` us: one symbol is exactly 1000 ticks.

use crate::error::{Error, Result};

const TICKS_PER_SYMBOL: u64 = 1000;

#[derive(Debug, Clone, PartialEq)]
pub struct RadioConfig {
    pub numerology: u8,
    pub bandwidth_mhz: f64,
    /// Resource blocks available per symbol.
    pub r_max: u32,
    /// Fixed link abstraction: payload bits carried by one RB in one symbol.
    pub bits_per_rb_symbol: u32,
}

impl Default for RadioConfig {
    fn default() -> Self {
        RadioConfig {
            numerology: 1,
            bandwidth_mhz: 50.0,
            r_max: 133,
            bits_per_rb_symbol: 66,
        }
    }
}

impl RadioConfig {
    pub fn validate(&self) -> Result<()> {
        if self.numerology > 3 {
            return Err(Error::Config(format!(
                "numerology {} unsupported (0..=3)",
                self.numerology
            )));
        }
        if !(self.bandwidth_mhz > 0.0) || self.r_max == 0 || self.bits_per_rb_symbol == 0 {
            return Err(Error::Config(
                "bandwidth, r_max and bits_per_rb_symbol must be positive".into(),
            ));
        }
        Ok(())
    }

    pub fn clock(&self) -> SymbolClock {
        SymbolClock::new(self.numerology)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SymbolClock {
    ticks_per_us: u64,
}

impl SymbolClock {
    pub fn new(numerology: u8) -> Self {
        SymbolClock {
            ticks_per_us: 14 << numerology,
        }
    }

    pub fn symbol_us(&self) -> f64 {
        TICKS_PER_SYMBOL as f64 / self.ticks_per_us as f64
    }

    pub fn symbols_per_slot(&self) -> u64 {
        14
    }

    /// Start time of symbol `k` in microseconds.
    pub fn symbol_start_us(&self, k: u64) -> f64 {
        (k * TICKS_PER_SYMBOL) as f64 / self.ticks_per_us as f64
    }

    /// Index of the first symbol boundary at or after `us`.
    pub fn symbol_at_or_after(&self, us: u64) -> u64 {
        (us * self.ticks_per_us).div_ceil(TICKS_PER_SYMBOL)
    }

    /// True if an arrival at `us` has happened by the start of symbol `k`.
    pub fn arrived_by(&self, us: u64, k: u64) -> bool {
        us * self.ticks_per_us <= k * TICKS_PER_SYMBOL
    }

    /// First symbol boundary strictly later than `us + d_us`: the boundary
    /// at which a burst that arrived at `us` has an age exceeding `d_us`.
    pub fn deadline_symbol(&self, us: u64, d_us: u64) -> u64 {
        (us + d_us) * self.ticks_per_us / TICKS_PER_SYMBOL + 1
    }

    /// Number of whole symbols covering `us` microseconds (ceiling). Values
    /// within a millionth of a symbol of a boundary snap to it.
    pub fn symbols_ceil(&self, us: f64) -> u64 {
        let sym = us * self.ticks_per_us as f64 / TICKS_PER_SYMBOL as f64;
        let rounded = sym.round();
        if (sym - rounded).abs() < 1e-6 {
            rounded.max(0.0) as u64
        } else {
            sym.ceil().max(0.0) as u64
        }
    }

    /// Exact symbol count of a duration, if it is a whole number of symbols.
    pub fn symbols_exact(&self, us: u64) -> Option<u64> {
        let ticks = us * self.ticks_per_us;
        (ticks % TICKS_PER_SYMBOL == 0).then_some(ticks / TICKS_PER_SYMBOL)
    }
}
