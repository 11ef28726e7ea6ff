//! Radio unit model: advanced sleep mode table, the mode/transition state
//! machine, sleep-level selection and normalized power accounting.
//!
//! Power is normalized so that an awake RU carrying no RBs draws 1.0. The
//! awake draw grows with the fraction of RBs in use through a saturating
//! amplifier curve `s(x) = x (1 + r_half) / (x + r_half)`, which satisfies
//! `s(0) = 0`, `s(1) = 1` and is concave.

use std::fmt;

use crate::error::{Error, Result};
use crate::radio::SymbolClock;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AsmId {
    IdleAwake = 0,
    Asm1 = 1,
    Asm2 = 2,
    Asm3 = 3,
}

impl AsmId {
    pub const ALL: [AsmId; 4] = [AsmId::IdleAwake, AsmId::Asm1, AsmId::Asm2, AsmId::Asm3];

    pub fn depth(self) -> usize {
        self as usize
    }

    pub fn from_depth(depth: usize) -> Option<AsmId> {
        AsmId::ALL.get(depth).copied()
    }
}

impl fmt::Display for AsmId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AsmId::IdleAwake => "idle",
            AsmId::Asm1 => "asm1",
            AsmId::Asm2 => "asm2",
            AsmId::Asm3 => "asm3",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AsmLevel {
    pub id: AsmId,
    pub norm_power: f64,
    pub switch_delay_us: f64,
}

/// The four RU modes with their powers, switching delays, and the delays
/// rounded up to whole symbols.
#[derive(Debug, Clone, PartialEq)]
pub struct AsmTable {
    levels: [AsmLevel; 4],
    delay_symbols: [u64; 4],
}

impl AsmTable {
    /// Reference table. The first sleep level switches in exactly one
    /// symbol period; the nominal 37 us figure is that period at mu = 1.
    pub fn reference(clock: SymbolClock) -> Self {
        let levels = [
            AsmLevel {
                id: AsmId::IdleAwake,
                norm_power: 1.0,
                switch_delay_us: 0.0,
            },
            AsmLevel {
                id: AsmId::Asm1,
                norm_power: 0.675,
                switch_delay_us: clock.symbol_us(),
            },
            AsmLevel {
                id: AsmId::Asm2,
                norm_power: 0.55,
                switch_delay_us: 500.0,
            },
            AsmLevel {
                id: AsmId::Asm3,
                norm_power: 0.23,
                switch_delay_us: 5000.0,
            },
        ];
        AsmTable::new(levels, clock).expect("reference table is valid")
    }

    pub fn new(levels: [AsmLevel; 4], clock: SymbolClock) -> Result<Self> {
        for (i, l) in levels.iter().enumerate() {
            if l.id.depth() != i {
                return Err(Error::Config("ASM levels out of order".into()));
            }
        }
        if levels[0].norm_power != 1.0 || levels[0].switch_delay_us != 0.0 {
            return Err(Error::Config(
                "awake-idle mode must have power 1 and delay 0".into(),
            ));
        }
        for w in levels.windows(2) {
            if !(w[1].norm_power < w[0].norm_power) || !(w[1].norm_power > 0.0) {
                return Err(Error::Config(
                    "ASM power must be positive and strictly decreasing with depth".into(),
                ));
            }
            if !(w[1].switch_delay_us > w[0].switch_delay_us) {
                return Err(Error::Config(
                    "ASM switching delay must strictly increase with depth".into(),
                ));
            }
        }
        let delay_symbols = levels.map(|l| clock.symbols_ceil(l.switch_delay_us));
        Ok(AsmTable {
            levels,
            delay_symbols,
        })
    }

    pub fn level(&self, id: AsmId) -> &AsmLevel {
        &self.levels[id.depth()]
    }

    pub fn levels(&self) -> &[AsmLevel; 4] {
        &self.levels
    }

    pub fn power(&self, id: AsmId) -> f64 {
        self.levels[id.depth()].norm_power
    }

    pub fn delay_symbols(&self, id: AsmId) -> u64 {
        self.delay_symbols[id.depth()]
    }

    /// Deepest level whose switching delay is strictly below `d_us`;
    /// awake-idle when none fits.
    pub fn select(&self, d_us: f64) -> AsmId {
        self.levels
            .iter()
            .rev()
            .find(|l| l.switch_delay_us < d_us)
            .map_or(AsmId::IdleAwake, |l| l.id)
    }
}

/// Free-function form of [`AsmTable::select`] against the reference table.
pub fn asm_select(d_us: f64, clock: SymbolClock) -> AsmId {
    AsmTable::reference(clock).select(d_us)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PowerModelParams {
    /// Extra normalized draw of a fully loaded symbol over an idle one.
    pub kappa_pam: f64,
    /// RB fraction at which the amplifier curve reaches half its gain.
    pub r_half: f64,
    pub r_max: u32,
}

impl Default for PowerModelParams {
    fn default() -> Self {
        PowerModelParams {
            kappa_pam: 1.5,
            r_half: 0.2,
            r_max: 133,
        }
    }
}

impl PowerModelParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.kappa_pam >= 0.0) || !(self.r_half > 0.0 && self.r_half <= 1.0) || self.r_max == 0
        {
            return Err(Error::Config(format!("invalid power model {self:?}")));
        }
        Ok(())
    }

    /// Saturating amplifier load curve on the RB fraction `x` in [0, 1].
    pub fn load_curve(&self, x: f64) -> f64 {
        x * (1.0 + self.r_half) / (x + self.r_half)
    }

    /// Normalized draw of an awake RU carrying `rbs` resource blocks.
    pub fn awake_power(&self, rbs: u32) -> f64 {
        1.0 + self.kappa_pam * self.load_curve(f64::from(rbs) / f64::from(self.r_max))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Transition {
    None,
    /// Leaving a sleep mode; the RU can transmit from symbol `ready_at` on.
    Waking { ready_at: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RuState {
    pub mode: AsmId,
    pub transition: Transition,
    /// Symbol at which `mode` was entered.
    pub entered_at: u64,
}

impl RuState {
    pub fn awake(at: u64) -> Self {
        RuState {
            mode: AsmId::IdleAwake,
            transition: Transition::None,
            entered_at: at,
        }
    }

    /// Awake, not in any transition: transmissions are allowed.
    pub fn is_ready(&self) -> bool {
        self.mode == AsmId::IdleAwake && self.transition == Transition::None
    }

    pub fn is_waking(&self) -> bool {
        matches!(self.transition, Transition::Waking { .. })
    }

    pub fn is_asleep(&self) -> bool {
        self.mode != AsmId::IdleAwake
    }
}

/// Enters `level` from awake-idle. `now` is a symbol boundary; the RU is
/// asleep from symbol `now` on. Entering is free of transition cost.
pub fn begin_sleep(state: RuState, level: AsmId, now: u64) -> Result<RuState> {
    if !state.is_ready() {
        return Err(Error::Invariant(format!(
            "go-to-sleep issued from {:?} at symbol {now}",
            state
        )));
    }
    if level == AsmId::IdleAwake {
        return Ok(state);
    }
    Ok(RuState {
        mode: level,
        transition: Transition::None,
        entered_at: now,
    })
}

/// Starts leaving the current sleep mode at symbol `now`. A no-op when the
/// RU is already awake or already waking.
pub fn begin_wake(state: RuState, now: u64, table: &AsmTable) -> RuState {
    if !state.is_asleep() || state.is_waking() {
        return state;
    }
    RuState {
        transition: Transition::Waking {
            ready_at: now + table.delay_symbols(state.mode),
        },
        ..state
    }
}

/// Completes a pending wake-up once symbol `now` reaches its ready time.
pub fn settle(state: RuState, now: u64) -> RuState {
    match state.transition {
        Transition::Waking { ready_at } if now >= ready_at => RuState::awake(ready_at),
        _ => state,
    }
}

/// Normalized power of one symbol. Waking symbols are billed at the
/// awake-idle level.
pub fn power_draw(
    state: &RuState,
    rbs: u32,
    params: &PowerModelParams,
    table: &AsmTable,
) -> Result<f64> {
    if rbs > params.r_max {
        return Err(Error::Invariant(format!(
            "{rbs} RBs exceed capacity {}",
            params.r_max
        )));
    }
    if !state.is_ready() {
        if rbs > 0 {
            return Err(Error::Invariant(format!(
                "{rbs} RBs scheduled while RU is {:?}",
                state
            )));
        }
        if state.is_waking() {
            return Ok(1.0);
        }
        return Ok(table.power(state.mode));
    }
    Ok(params.awake_power(rbs))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimelineEntry {
    pub symbol: u64,
    pub state: RuState,
    pub rbs: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct EnergyReport {
    /// Sum of normalized power times symbol duration, in normalized-us.
    pub raw: f64,
    /// Same RB timeline with the RU held awake throughout.
    pub baseline: f64,
}

impl EnergyReport {
    pub fn ratio(&self) -> f64 {
        if self.baseline == 0.0 {
            1.0
        } else {
            self.raw / self.baseline
        }
    }
}

/// Integrates power over a contiguous symbol timeline.
pub fn energy_integrate(
    timeline: &[TimelineEntry],
    params: &PowerModelParams,
    table: &AsmTable,
    clock: SymbolClock,
) -> Result<EnergyReport> {
    let t_sym = clock.symbol_us();
    let mut report = EnergyReport::default();
    for (i, e) in timeline.iter().enumerate() {
        if i > 0 && e.symbol != timeline[i - 1].symbol + 1 {
            return Err(Error::TimelineGap {
                prev: timeline[i - 1].symbol,
                next: e.symbol,
            });
        }
        report.raw += power_draw(&e.state, e.rbs, params, table)? * t_sym;
        report.baseline += params.awake_power(e.rbs) * t_sym;
    }
    Ok(report)
}
