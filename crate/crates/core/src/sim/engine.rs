//! Symbol-by-symbol scheduler engine: buffers, Active/Silenced phases,
//! consolidated RB allocation and the online ASM scheduler.

use std::collections::{BTreeMap, VecDeque};

use crate::error::Result;
use crate::radio::SymbolClock;
use crate::ru::{self, AsmId, RuState, TimelineEntry};
use crate::sim::{SilencedSpan, SimConfig, StepReport};
use crate::traces::DataBurst;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Phase {
    Active,
    Silenced,
}

/// How the engine drives the RU during silenced intervals.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AsmMode {
    /// Online scheduler: the deepest level whose delay fits the threshold.
    Policy,
    /// RU held awake; silenced intervals are recorded for offline planning.
    Disabled,
}

#[derive(Debug, Clone)]
pub(crate) struct Pending {
    pub burst: DataBurst,
    pub remaining_bits: u64,
    /// Symbol boundary at which this burst's age exceeds the threshold.
    pub deadline: u64,
    pub d_at_arrival: u64,
    /// Ideal FIFO drain time (symbols) of the backlog ahead plus itself.
    pub drain_symbols: u64,
}

/// Output of the RB allocator for one symbol.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Completion {
    pub burst: DataBurst,
    pub d_at_arrival: u64,
    pub drain_symbols: u64,
    /// Symbol whose end marks the transmission of the last bit.
    pub last_symbol: u64,
}

/// True iff every buffer is empty. Inactive slices never hold traffic:
/// their bursts are dropped at ingestion.
pub fn detect_silencing<T>(buffer: &VecDeque<T>) -> bool {
    buffer.is_empty()
}

/// True iff some buffered burst has waited strictly longer than `d_us`
/// at time `now_us`.
pub fn detect_activating<'a>(
    arrivals_us: impl IntoIterator<Item = &'a u64>,
    d_us: u64,
    now_us: f64,
) -> bool {
    arrivals_us
        .into_iter()
        .any(|&a| now_us - a as f64 > d_us as f64)
}

/// Greedy front-fill of one symbol: up to `r_max` RBs, oldest burst first
/// (ties broken by slice id via queue order). A burst needs
/// `ceil(remaining / bits_per_rb)` RBs. Returns the RBs used.
pub(crate) fn fill_symbol(
    queue: &mut VecDeque<Pending>,
    r_max: u32,
    bits_per_rb: u32,
    symbol: u64,
    done: &mut Vec<Completion>,
) -> (u32, u64) {
    let bpr = u64::from(bits_per_rb);
    let mut cap = u64::from(r_max);
    let mut sent_bits = 0;
    while cap > 0 {
        let Some(front) = queue.front_mut() else { break };
        let need = front.remaining_bits.div_ceil(bpr);
        let take = need.min(cap);
        cap -= take;
        let bits = (take * bpr).min(front.remaining_bits);
        sent_bits += bits;
        front.remaining_bits -= bits;
        if front.remaining_bits == 0 {
            let p = queue.pop_front().expect("front exists");
            done.push(Completion {
                burst: p.burst,
                d_at_arrival: p.d_at_arrival,
                drain_symbols: p.drain_symbols,
                last_symbol: symbol,
            });
        }
    }
    ((u64::from(r_max) - cap) as u32, sent_bits)
}

/// Symbol-level scheduler state carried across steps.
#[derive(Debug, Clone)]
pub struct Engine {
    mode: AsmMode,
    clock: SymbolClock,
    pub(crate) queue: VecDeque<Pending>,
    queued_rbs: u64,
    phase: Phase,
    ru: RuState,
    /// Earliest deadline among buffered bursts while silenced.
    next_activation: Option<u64>,
    /// Symbol of the next unprocessed symbol.
    now: u64,
    d_us: u64,
    silenced_since: Option<u64>,
    silenced_d: u64,
    spans: Vec<SilencedSpan>,
    /// Set when the online scheduler should consider going to sleep.
    sleep_decision_due: bool,
    record_timeline: bool,
    timeline: Vec<TimelineEntry>,
    arrived_bits: u64,
    transmitted_bits: u64,
}

impl Engine {
    pub fn new(mode: AsmMode, cfg: &SimConfig) -> Self {
        Engine {
            mode,
            clock: cfg.clock(),
            queue: VecDeque::new(),
            queued_rbs: 0,
            // Buffers start empty, so the episode opens silenced.
            phase: Phase::Silenced,
            ru: RuState::awake(0),
            next_activation: None,
            now: 0,
            d_us: 0,
            silenced_since: Some(0),
            sleep_decision_due: true,
            silenced_d: 0,
            spans: Vec::new(),
            record_timeline: false,
            timeline: Vec::new(),
            arrived_bits: 0,
            transmitted_bits: 0,
        }
    }

    pub fn set_record_timeline(&mut self, on: bool) {
        self.record_timeline = on;
    }

    /// Per-symbol RU states and RBs of the last simulated step.
    pub fn last_timeline(&self) -> &[TimelineEntry] {
        &self.timeline
    }

    pub fn phase(&self) -> Phase {
        self.phase
    }

    pub fn ru_state(&self) -> RuState {
        self.ru
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn buffered_bits(&self) -> u64 {
        self.queue.iter().map(|p| p.remaining_bits).sum()
    }

    pub fn arrived_bits(&self) -> u64 {
        self.arrived_bits
    }

    pub fn transmitted_bits(&self) -> u64 {
        self.transmitted_bits
    }

    /// Silenced intervals closed so far.
    pub fn take_spans(&mut self) -> Vec<SilencedSpan> {
        std::mem::take(&mut self.spans)
    }

    /// Closes a silenced interval left open at the end of the episode.
    pub fn close_open_span(&mut self) {
        if let Some(start) = self.silenced_since.take() {
            if self.now > start {
                self.spans.push(SilencedSpan {
                    start,
                    end: self.now,
                    d_us: self.silenced_d,
                    open_end: true,
                });
            }
        }
    }

    fn ssb_window(&self, cfg: &SimConfig) -> Option<(u64, u64)> {
        cfg.ssb_period_symbols().map(|p| (p, cfg.ssb_symbols))
    }

    fn in_ssb(&self, cfg: &SimConfig, k: u64) -> bool {
        match self.ssb_window(cfg) {
            Some((p, len)) => k % p < len,
            None => false,
        }
    }

    /// Start of the next SSB occasion strictly after `k`'s current window.
    fn next_ssb_start(&self, cfg: &SimConfig, k: u64) -> Option<u64> {
        self.ssb_window(cfg).map(|(p, _)| (k / p + 1) * p)
    }

    /// Online sleep decision at a silencing event or after an SSB window.
    fn try_sleep(&mut self, cfg: &SimConfig, k: u64) -> Result<()> {
        if self.mode != AsmMode::Policy || !self.ru.is_ready() || self.in_ssb(cfg, k) {
            return Ok(());
        }
        let horizon = [self.next_activation, self.next_ssb_start(cfg, k)]
            .into_iter()
            .flatten()
            .min();
        let level = cfg
            .asm
            .levels()
            .iter()
            .rev()
            .find(|l| {
                l.switch_delay_us < self.d_us as f64
                    && horizon.is_none_or(|h| cfg.asm.delay_symbols(l.id) < h.saturating_sub(k))
            })
            .map_or(AsmId::IdleAwake, |l| l.id);
        if level != AsmId::IdleAwake {
            self.ru = ru::begin_sleep(self.ru, level, k)?;
        }
        Ok(())
    }

    /// Issues the wake-up once the lead time before the next must-be-ready
    /// symbol has been reached.
    fn arm_wake(&mut self, cfg: &SimConfig, k: u64) {
        if !self.ru.is_asleep() || self.ru.is_waking() {
            return;
        }
        let must_ready = [
            if self.queue.is_empty() {
                None
            } else {
                self.next_activation
            },
            self.next_ssb_start(cfg, k.saturating_sub(1))
                .filter(|_| self.ssb_window(cfg).is_some()),
        ]
        .into_iter()
        .flatten()
        .min();
        if let Some(t) = must_ready {
            let lead = cfg.asm.delay_symbols(self.ru.mode);
            if k + lead >= t {
                self.ru = ru::begin_wake(self.ru, k, &cfg.asm);
            }
        }
    }

    /// Applies a new threshold at a step boundary: every buffered burst's
    /// deadline becomes the earlier of its current one and the one implied
    /// by the new threshold.
    fn apply_threshold(&mut self, d_us: u64) {
        self.d_us = d_us;
        for p in self.queue.iter_mut() {
            p.deadline = p.deadline.min(self.clock.deadline_symbol(p.burst.arrival_us, d_us));
        }
        if self.phase == Phase::Silenced {
            self.next_activation = self.queue.iter().map(|p| p.deadline).min();
        }
    }

    /// Runs one decision step of `n_symbols` symbols with threshold `d_us`.
    /// `arrivals` must hold exactly the bursts arriving during the step, in
    /// trace order.
    pub fn simulate_step(
        &mut self,
        cfg: &SimConfig,
        step: usize,
        arrivals: &[DataBurst],
        d_us: u64,
        n_symbols: u64,
    ) -> Result<StepReport> {
        let d_us = d_us.min(cfg.d_max_us);
        self.apply_threshold(d_us);
        if self.now == 0 {
            self.silenced_d = d_us;
        }
        let bpr = cfg.radio.bits_per_rb_symbol;
        let r_max = cfg.radio.r_max;
        let t_sym = self.clock.symbol_us();

        let mut report = StepReport::new(step, d_us);
        let mut completions = Vec::new();
        let mut cursor = 0;
        self.timeline.clear();
        let start = self.now;
        let end = start + n_symbols;
        let step_last_boundary_us = self.clock.symbol_start_us(end);
        let mut energy_timeline = Vec::with_capacity(n_symbols as usize);

        for k in start..end {
            // Ingest everything that has arrived by this boundary.
            while cursor < arrivals.len() && self.clock.arrived_by(arrivals[cursor].arrival_us, k) {
                let b = arrivals[cursor];
                cursor += 1;
                report.bursts_arrived += 1;
                if !cfg.slice_active(b.slice, step) {
                    report.bursts_dropped += 1;
                    continue;
                }
                self.arrived_bits += b.size_bits;
                report.bits_arrived += b.size_bits;
                let own_rbs = b.size_bits.div_ceil(u64::from(bpr));
                self.queued_rbs += own_rbs;
                let deadline = self.clock.deadline_symbol(b.arrival_us, d_us);
                self.queue.push_back(Pending {
                    burst: b,
                    remaining_bits: b.size_bits,
                    deadline,
                    d_at_arrival: d_us,
                    drain_symbols: self.queued_rbs.div_ceil(u64::from(r_max)),
                });
                if self.phase == Phase::Silenced {
                    self.next_activation = Some(self.next_activation.map_or(deadline, |n| n.min(deadline)));
                }
            }

            self.ru = ru::settle(self.ru, k);
            let ssb_ended = self
                .ssb_window(cfg)
                .is_some_and(|(p, len)| k % p == len && k >= p.min(len));

            match self.phase {
                Phase::Silenced => {
                    if let Some(act) = self.next_activation.filter(|_| !self.queue.is_empty()) {
                        if k >= act {
                            if self.ru.is_ready() {
                                self.phase = Phase::Active;
                                report.activations += 1;
                                if k > act {
                                    report.late_activations += 1;
                                }
                                self.next_activation = None;
                                self.sleep_decision_due = false;
                                if let Some(s) = self.silenced_since.take() {
                                    if k > s {
                                        self.spans.push(SilencedSpan {
                                            start: s,
                                            end: k,
                                            d_us: self.silenced_d,
                                            open_end: false,
                                        });
                                    }
                                }
                            } else {
                                self.ru = ru::begin_wake(self.ru, k, &cfg.asm);
                            }
                        }
                    }
                    if self.phase == Phase::Silenced && (ssb_ended || self.sleep_decision_due) {
                        self.sleep_decision_due = false;
                        self.try_sleep(cfg, k)?;
                    }
                }
                Phase::Active => {
                    if detect_silencing(&self.queue) {
                        self.phase = Phase::Silenced;
                        report.silencings += 1;
                        self.next_activation = None;
                        self.silenced_since = Some(k);
                        self.silenced_d = d_us;
                        self.try_sleep(cfg, k)?;
                    }
                }
            }
            if self.phase == Phase::Silenced {
                self.arm_wake(cfg, k);
                self.ru = ru::settle(self.ru, k);
            }

            let mut rbs = 0;
            if self.phase == Phase::Active {
                debug_assert!(self.ru.is_ready(), "transmitting while RU not ready");
                let before = completions.len();
                let (used, bits) = fill_symbol(&mut self.queue, r_max, bpr, k, &mut completions);
                rbs = used;
                self.queued_rbs = self.queue.iter().map(|p| p.remaining_bits.div_ceil(u64::from(bpr))).sum();
                self.transmitted_bits += bits;
                report.bits_transmitted += bits;
                for c in &completions[before..] {
                    report.bits_completed += c.burst.size_bits;
                }
            }
            if self.ru.is_asleep() && !self.ru.is_waking() {
                report.sleep_symbols[self.ru.mode.depth()] += 1;
            }
            let entry = TimelineEntry {
                symbol: k,
                state: self.ru,
                rbs,
            };
            energy_timeline.push(entry);
        }
        self.now = end;

        let energy = ru::energy_integrate(&energy_timeline, &cfg.power, &cfg.asm, self.clock)?;
        report.energy = energy.raw;
        if self.record_timeline {
            self.timeline = energy_timeline;
        }

        let mut qos: BTreeMap<usize, f64> = BTreeMap::new();
        for c in &completions {
            let done_us = self.clock.symbol_start_us(c.last_symbol + 1);
            let delay = done_us - c.burst.arrival_us as f64;
            let bound = c.d_at_arrival as f64 + (c.drain_symbols + 2) as f64 * t_sym;
            if delay > bound + 1e-9 {
                report.bound_violations += 1;
            }
            let e = qos.entry(c.burst.slice).or_insert(f64::MIN);
            *e = e.max(delay);
            report.delays.push((c.burst.slice, delay));
        }
        debug_assert!(step_last_boundary_us.is_finite());
        for (slice, delay) in qos {
            let target = cfg.qos_target_us(slice).unwrap_or(f64::INFINITY);
            report.qos.insert(slice, delay);
            report.violations.insert(slice, delay > target);
        }
        report.buffered_bits = self.buffered_bits();
        Ok(report)
    }
}
