//! Constrained actor-critic controller for the deferral threshold.
//!
//! Each step the per-slice traffic context (quantiles of inter-arrival times
//! and burst sizes) is normalized, tagged with the slice id and pushed
//! through a shared encoder whose outputs are summed over active slices.
//! A deterministic actor maps the encoded context to a threshold. Critics
//! estimate the distribution of the normalized energy and of every slice's
//! delay; the actor descends an aggregate cost that adds a hinge penalty
//! whenever a slice's tail delay estimate exceeds its target.

use std::collections::{BTreeMap, VecDeque};
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::nn::{
    load_checkpoint, quantile_huber_grad, quantile_huber_loss, save_checkpoint, sigmoid, Activation,
    Adam, DenseNet, ForwardCache, QuantileSet,
};
use crate::sim::{run_episode, SimConfig, StepPolicy, StepReport};
use crate::traces::{DataBurst, Trace, MAX_SLICES};

/// Empirical quantiles of a slice's traffic within one decision step.
#[derive(Debug, Clone, PartialEq)]
pub struct SliceContext {
    pub slice: usize,
    /// Inter-arrival time quantiles (us).
    pub iat_quantiles: Vec<f64>,
    /// Burst size quantiles (bits).
    pub size_quantiles: Vec<f64>,
}

/// Evenly spaced levels from 0 to 1 inclusive (the median alone for one).
pub fn context_grid(n_ctx: usize) -> Vec<f64> {
    match n_ctx {
        0 => Vec::new(),
        1 => vec![0.5],
        n => (0..n).map(|k| k as f64 / (n - 1) as f64).collect(),
    }
}

/// Linear-interpolation quantile of sorted data (type 7).
pub fn empirical_quantile(sorted: &[f64], tau: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = (sorted.len() - 1) as f64 * tau;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Per-slice contexts of one step's bursts. A slice with a single burst gets
/// the step duration as every inter-arrival quantile; a slice without
/// bursts is absent.
pub fn compute_context(bursts: &[DataBurst], step_us: u64, n_ctx: usize) -> BTreeMap<usize, SliceContext> {
    let mut by_slice: BTreeMap<usize, Vec<&DataBurst>> = BTreeMap::new();
    for b in bursts {
        by_slice.entry(b.slice).or_default().push(b);
    }
    let grid = context_grid(n_ctx);
    by_slice
        .into_iter()
        .map(|(slice, bs)| {
            let mut sizes: Vec<f64> = bs.iter().map(|b| b.size_bits as f64).collect();
            sizes.sort_by(f64::total_cmp);
            let mut arrivals: Vec<u64> = bs.iter().map(|b| b.arrival_us).collect();
            arrivals.sort_unstable();
            let iat_quantiles = if arrivals.len() < 2 {
                vec![step_us as f64; n_ctx]
            } else {
                let mut iats: Vec<f64> = arrivals.windows(2).map(|w| (w[1] - w[0]) as f64).collect();
                iats.sort_by(f64::total_cmp);
                grid.iter().map(|&t| empirical_quantile(&iats, t)).collect()
            };
            let size_quantiles = grid.iter().map(|&t| empirical_quantile(&sizes, t)).collect();
            (
                slice,
                SliceContext {
                    slice,
                    iat_quantiles,
                    size_quantiles,
                },
            )
        })
        .collect()
}

/// Running per-feature mean and variance (Welford) over log-features.
#[derive(Debug, Clone, PartialEq)]
pub struct Normalizer {
    count: u64,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl Normalizer {
    pub fn new(dim: usize) -> Self {
        Normalizer {
            count: 0,
            mean: vec![0.0; dim],
            m2: vec![0.0; dim],
        }
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// `ln(1 + x)` of the concatenated IAT and size quantiles.
    pub fn features(ctx: &SliceContext) -> Vec<f64> {
        ctx.iat_quantiles
            .iter()
            .chain(&ctx.size_quantiles)
            .map(|v| v.max(0.0).ln_1p())
            .collect()
    }

    pub fn update(&mut self, x: &[f64]) {
        self.count += 1;
        let n = self.count as f64;
        for ((m, s), v) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(x) {
            let delta = v - *m;
            *m += delta / n;
            *s += delta * (v - *m);
        }
    }

    pub fn normalize(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .enumerate()
            .map(|(k, v)| {
                let sd = if self.count > 1 {
                    (self.m2[k] / (self.count - 1) as f64).sqrt().max(1e-3)
                } else {
                    1.0
                };
                (v - self.mean[k]) / sd
            })
            .collect()
    }

    fn to_text(&self) -> String {
        let mut s = format!("{}\n", self.count);
        for (m, v) in self.mean.iter().zip(&self.m2) {
            let _ = writeln!(s, "{m} {v}");
        }
        s
    }

    fn from_text(text: &str, path: &Path) -> Result<Self> {
        let perr = |line: usize, msg: &str| Error::Parse {
            path: path.to_path_buf(),
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines();
        let count = lines
            .next()
            .and_then(|l| l.parse().ok())
            .ok_or_else(|| perr(1, "missing sample count"))?;
        let mut mean = Vec::new();
        let mut m2 = Vec::new();
        for (i, l) in lines.enumerate() {
            let (a, b) = l.split_once(' ').ok_or_else(|| perr(i + 2, "expected two values"))?;
            mean.push(a.parse().map_err(|_| perr(i + 2, "bad mean"))?);
            m2.push(b.parse().map_err(|_| perr(i + 2, "bad variance"))?);
        }
        Ok(Normalizer { count, mean, m2 })
    }
}

/// Normalized features followed by a one-hot slice id.
pub fn encoder_input(normalized: &[f64], slice: usize, l_max: usize) -> Result<Vec<f64>> {
    if slice >= l_max {
        return Err(Error::UnknownSlice(slice));
    }
    let mut v = Vec::with_capacity(normalized.len() + l_max);
    v.extend_from_slice(normalized);
    v.extend((0..l_max).map(|k| if k == slice { 1.0 } else { 0.0 }));
    Ok(v)
}

/// Sum of the encoder over the per-slice inputs (zero for no slices).
pub fn encode(encoder: &DenseNet, inputs: &[(usize, Vec<f64>)]) -> Result<Vec<f64>> {
    let mut out = vec![0.0; encoder.output_dim()];
    for (_, x) in inputs {
        for (o, v) in out.iter_mut().zip(encoder.forward(x)?) {
            *o += v;
        }
    }
    Ok(out)
}

/// Ornstein-Uhlenbeck exploration noise with zero mean.
#[derive(Debug, Clone)]
pub struct OuNoise {
    pub theta: f64,
    pub sigma: f64,
    x: f64,
    rng: ChaCha8Rng,
}

impl OuNoise {
    pub fn new(theta: f64, sigma: f64, seed: u64) -> Self {
        OuNoise {
            theta,
            sigma,
            x: 0.0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    pub fn state(&self) -> f64 {
        self.x
    }

    pub fn set_state(&mut self, x: f64) {
        self.x = x;
    }

    /// One step driven by the given standard-normal draw.
    pub fn step_with(&mut self, draw: f64) -> f64 {
        self.x += -self.theta * self.x + self.sigma * draw;
        self.x
    }

    pub fn sample(&mut self) -> f64 {
        let draw: f64 = StandardNormal.sample(&mut self.rng);
        self.step_with(draw)
    }
}

/// One stored decision and its observed outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// Encoder inputs of the slices active at decision time.
    pub inputs: Vec<(usize, Vec<f64>)>,
    pub d_us: u64,
    pub energy: f64,
    /// Observed per-slice QoS in units of the slice's target; absent when
    /// nothing completed.
    pub delays: BTreeMap<usize, f64>,
    /// Hinge thresholds (same units) of the constrained slices.
    pub targets: BTreeMap<usize, f64>,
}

/// FIFO experience store.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    capacity: usize,
    items: VecDeque<Sample>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer {
            capacity: capacity.max(1),
            items: VecDeque::with_capacity(capacity.min(1 << 16)),
        }
    }

    pub fn push(&mut self, s: Sample) {
        if self.items.len() == self.capacity {
            self.items.pop_front();
        }
        self.items.push_back(s);
    }

    pub fn len(&self) -> usize {
        self.items.len()
    }

    pub fn is_empty(&self) -> bool {
        self.items.is_empty()
    }

    pub fn get(&self, i: usize) -> Option<&Sample> {
        self.items.get(i)
    }

    /// Uniform batch without replacement.
    pub fn sample_indices(&self, batch: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        index::sample(rng, self.items.len(), batch.min(self.items.len())).into_vec()
    }
}

/// The α-quantile head of a critic's output.
pub fn gamma_alpha(heads: &[f64], quantiles: &QuantileSet, alpha: f64) -> Result<f64> {
    let k = quantiles.index_of(alpha)?;
    heads.get(k).copied().ok_or(Error::Shape {
        expected: quantiles.len(),
        got: heads.len(),
    })
}

/// `mean_energy + sum lambda * max(tail_l - target_l, 0)`.
pub fn aggregate_cost(mean_energy: f64, tails_and_targets: &[(f64, f64)], lambda: f64) -> f64 {
    mean_energy
        + tails_and_targets
            .iter()
            .map(|(g, t)| lambda * (g - t).max(0.0))
            .sum::<f64>()
}

/// How the critics model cost and constraints.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CriticDesign {
    /// One quantile critic per constraint, tail-quantile hinge penalties.
    Distributional,
    /// One mean-regression critic per constraint, mean hinge penalties.
    MeanPerConstraint,
    /// A single mean-regression critic of the penalized utility.
    SingleUtility,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EncoderUpdate {
    /// Critic losses and the actor objective both train the encoder.
    Shared,
    CriticOnly,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ControllerConfig {
    pub design: CriticDesign,
    pub alpha: f64,
    pub lambda: f64,
    pub kappa: f64,
    pub batch: usize,
    pub quantiles: QuantileSet,
    pub d_max_us: u64,
    pub lr_actor: f64,
    pub lr_critic: f64,
    pub lr_encoder: f64,
    /// Number of slice ids the encoder and critics are sized for.
    pub l_max: usize,
    pub n_ctx: usize,
    pub d_enc: usize,
    pub hidden: Vec<usize>,
    pub buffer_capacity: usize,
    pub noise_theta: f64,
    pub noise_sigma: f64,
    pub encoder_update: EncoderUpdate,
    /// Gradient updates per decision step once the buffer holds a batch.
    pub updates_per_step: usize,
    pub seed: u64,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        ControllerConfig {
            design: CriticDesign::Distributional,
            alpha: 0.995,
            lambda: 10.0,
            kappa: 1.0,
            batch: 128,
            quantiles: QuantileSet::default_grid(),
            d_max_us: 64_000,
            lr_actor: 1e-4,
            lr_critic: 1e-3,
            lr_encoder: 1e-4,
            l_max: 8,
            n_ctx: 5,
            d_enc: 32,
            hidden: vec![64, 64],
            buffer_capacity: 10_000,
            noise_theta: 0.15,
            noise_sigma: 0.15,
            encoder_update: EncoderUpdate::Shared,
            updates_per_step: 1,
            seed: 0,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        self.quantiles.index_of(self.alpha)?;
        if !(self.kappa > 0.0) || !(self.lambda >= 0.0) {
            return Err(Error::Config("kappa must be > 0 and lambda >= 0".into()));
        }
        if self.batch == 0 || self.d_max_us == 0 || self.n_ctx == 0 || self.d_enc == 0 {
            return Err(Error::Config("batch, d_max, n_ctx and d_enc must be positive".into()));
        }
        if self.l_max == 0 || self.l_max > MAX_SLICES {
            return Err(Error::Config(format!("l_max must lie in 1..={MAX_SLICES}")));
        }
        if [self.lr_actor, self.lr_critic, self.lr_encoder]
            .iter()
            .any(|lr| !(*lr >= 0.0) || !lr.is_finite())
        {
            return Err(Error::Config("learning rates must be finite and >= 0".into()));
        }
        Ok(())
    }

    fn critic_outputs(&self) -> usize {
        match self.design {
            CriticDesign::Distributional => self.quantiles.len(),
            _ => 1,
        }
    }

    fn n_critics(&self) -> usize {
        match self.design {
            CriticDesign::SingleUtility => 1,
            _ => self.l_max + 1,
        }
    }
}

const ACTION_CLAMP: f64 = 10.0;
const ACTION_SCALE: f64 = 1.0;

/// Critic input for a threshold: its logit within `[0, d_max]`, clamped.
/// Resolves sub-millisecond and tens-of-milliseconds thresholds
/// equally well, and is linear in the actor's pre-squash output.
pub fn action_feature(d_us: f64, d_max_us: f64) -> f64 {
    let p = (d_us / d_max_us).clamp(1e-12, 1.0 - 1e-12);
    (p / (1.0 - p)).ln().clamp(-ACTION_CLAMP, ACTION_CLAMP) / ACTION_SCALE
}

/// Feature for an actor logit.
fn action_feature_from_logit(z: f64) -> f64 {
    z.clamp(-ACTION_CLAMP, ACTION_CLAMP) / ACTION_SCALE
}

/// Derivative used to backpropagate a feature gradient into the logit. Past
/// the clamp only gradients that pull the logit back inside pass through,
/// so the actor can neither stall nor run off.
fn logit_grad(z: f64, dcost_da: f64) -> f64 {
    let inward = (z >= ACTION_CLAMP && dcost_da > 0.0) || (z <= -ACTION_CLAMP && dcost_da < 0.0);
    if z.abs() < ACTION_CLAMP || inward {
        dcost_da / ACTION_SCALE
    } else {
        0.0
    }
}

/// One row of the training curve.
#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub step: usize,
    pub d_us: u64,
    pub energy_norm: f64,
    pub violation_count: usize,
    pub cost_agg: f64,
}

pub const CURVE_CSV_HEADER: &str = "step,d_us,energy_norm,violation_count,cost_agg";

pub fn curve_csv(rows: &[CurveRow], variant: Option<&str>) -> String {
    let mut out = String::new();
    if variant.is_some() {
        out.push_str("variant,");
    }
    out.push_str(CURVE_CSV_HEADER);
    out.push('\n');
    for r in rows {
        if let Some(v) = variant {
            out.push_str(v);
            out.push(',');
        }
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            r.step, r.d_us, r.energy_norm, r.violation_count, r.cost_agg
        );
    }
    out
}

pub fn parse_curve_csv(text: &str, path: &Path) -> Result<Vec<(Option<String>, CurveRow)>> {
    let perr = |line: usize, msg: String| Error::Parse {
        path: path.to_path_buf(),
        line: line + 1,
        msg,
    };
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or_else(|| perr(0, "empty file".into()))?;
    let with_variant = match header {
        h if h == CURVE_CSV_HEADER => false,
        h if h.strip_prefix("variant,") == Some(CURVE_CSV_HEADER) => true,
        h => return Err(perr(0, format!("unexpected header {h:?}"))),
    };
    let mut out = Vec::new();
    for (i, line) in lines {
        if line.is_empty() {
            continue;
        }
        let mut f: Vec<&str> = line.split(',').collect();
        let variant = with_variant.then(|| f.remove(0).to_string());
        if f.len() != 5 {
            return Err(perr(i, format!("expected 5 fields, got {}", f.len())));
        }
        let bad = |what: &str| perr(i, format!("bad {what}"));
        out.push((
            variant,
            CurveRow {
                step: f[0].parse().map_err(|_| bad("step"))?,
                d_us: f[1].parse().map_err(|_| bad("d_us"))?,
                energy_norm: f[2].parse().map_err(|_| bad("energy_norm"))?,
                violation_count: f[3].parse().map_err(|_| bad("violation_count"))?,
                cost_agg: f[4].parse().map_err(|_| bad("cost_agg"))?,
            },
        ));
    }
    Ok(out)
}

/// Diagnostics of one gradient update.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct TrainStats {
    pub critic_loss: f64,
    pub actor_cost: f64,
    /// Fraction of evaluated critic outputs whose heads are not sorted.
    pub crossing_rate: f64,
    pub skipped: bool,
}

/// The threshold controller: encoder, actor, critics and their optimizers.
#[derive(Debug, Clone)]
pub struct Controller {
    cfg: ControllerConfig,
    pub encoder: DenseNet,
    pub actor: DenseNet,
    pub critics: Vec<DenseNet>,
    opt_encoder: Adam,
    opt_actor: Adam,
    opt_critics: Vec<Adam>,
    normalizer: Normalizer,
    noise: OuNoise,
    buffer: ReplayBuffer,
    rng: ChaCha8Rng,
    training: bool,
    explore: bool,
    pending: Option<PendingDecision>,
    curve: Vec<CurveRow>,
    last_stats: TrainStats,
}

#[derive(Debug, Clone)]
struct PendingDecision {
    qos_targets_us: BTreeMap<usize, f64>,
    inputs: Vec<(usize, Vec<f64>)>,
    d_us: u64,
    targets: BTreeMap<usize, f64>,
    cost_agg: f64,
}

impl Controller {
    pub fn new(cfg: ControllerConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let enc_in = 2 * cfg.n_ctx + cfg.l_max;
        let sizes = |i: usize, o: usize| -> Vec<usize> {
            std::iter::once(i)
                .chain(cfg.hidden.iter().copied())
                .chain(std::iter::once(o))
                .collect()
        };
        let encoder = DenseNet::new(&sizes(enc_in, cfg.d_enc), Activation::Relu, Activation::Linear, &mut rng)?;
        let mut actor = DenseNet::new(&sizes(cfg.d_enc, 1), Activation::Relu, Activation::Linear, &mut rng)?;
        // Zero output layer: the initial policy is the midpoint d_max / 2.
        let last = actor.sizes().len() - 2;
        let (w, _) = actor.layer_offsets(last);
        for p in &mut actor.params_mut()[w..] {
            *p = 0.0;
        }
        let critics = (0..cfg.n_critics())
            .map(|_| {
                DenseNet::new(
                    &sizes(cfg.d_enc + 1, cfg.critic_outputs()),
                    Activation::Relu,
                    Activation::Linear,
                    &mut rng,
                )
            })
            .collect::<Result<Vec<_>>>()?;
        let opt_critics = critics
            .iter()
            .map(|c| Adam::new(c.params().len(), cfg.lr_critic))
            .collect();
        Ok(Controller {
            opt_encoder: Adam::new(encoder.params().len(), cfg.lr_encoder),
            opt_actor: Adam::new(actor.params().len(), cfg.lr_actor),
            opt_critics,
            normalizer: Normalizer::new(2 * cfg.n_ctx),
            noise: OuNoise::new(cfg.noise_theta, cfg.noise_sigma, cfg.seed ^ 0x9e37_79b9_7f4a_7c15),
            buffer: ReplayBuffer::new(cfg.buffer_capacity),
            rng,
            training: true,
            explore: true,
            pending: None,
            curve: Vec::new(),
            last_stats: TrainStats::default(),
            encoder,
            actor,
            critics,
            cfg,
        })
    }

    pub fn config(&self) -> &ControllerConfig {
        &self.cfg
    }

    /// Enables or disables learning (normalizer statistics, buffer, updates).
    pub fn set_training(&mut self, on: bool) {
        self.training = on;
    }

    pub fn set_exploration(&mut self, on: bool) {
        self.explore = on;
    }

    pub fn buffer(&self) -> &ReplayBuffer {
        &self.buffer
    }

    pub fn curve(&self) -> &[CurveRow] {
        &self.curve
    }

    pub fn last_stats(&self) -> TrainStats {
        self.last_stats
    }

    pub fn normalizer(&self) -> &Normalizer {
        &self.normalizer
    }

    /// Encoder inputs for a context map, optionally folding it into the
    /// running normalization first.
    pub fn context_inputs(
        &mut self,
        contexts: &BTreeMap<usize, SliceContext>,
        update_stats: bool,
    ) -> Result<Vec<(usize, Vec<f64>)>> {
        let mut out = Vec::with_capacity(contexts.len());
        for (slice, ctx) in contexts {
            if *slice >= self.cfg.l_max {
                return Err(Error::UnknownSlice(*slice));
            }
            let f = Normalizer::features(ctx);
            if update_stats {
                self.normalizer.update(&f);
            }
            out.push((*slice, encoder_input(&self.normalizer.normalize(&f), *slice, self.cfg.l_max)?));
        }
        Ok(out)
    }

    /// Actor pre-squash output for an encoded context.
    pub fn actor_logit(&self, enc: &[f64]) -> Result<f64> {
        Ok(self.actor.forward(enc)?[0])
    }

    /// Threshold for an encoded context, with optional additive pre-squash
    /// noise.
    pub fn actor_action(&self, enc: &[f64], noise: f64) -> Result<f64> {
        Ok(self.cfg.d_max_us as f64 * sigmoid(self.actor_logit(enc)? + noise))
    }

    fn critic_input(enc: &[f64], a: f64) -> Vec<f64> {
        let mut v = Vec::with_capacity(enc.len() + 1);
        v.extend_from_slice(enc);
        v.push(a);
        v
    }

    /// Output of critic `index` (0 = energy or utility, `l + 1` = slice `l`).
    pub fn critic_eval(&self, index: usize, enc: &[f64], d_us: f64) -> Result<Vec<f64>> {
        let critic = self
            .critics
            .get(index)
            .ok_or_else(|| Error::InvalidArgument(format!("no critic {index}")))?;
        critic.forward(&Self::critic_input(enc, action_feature(d_us, self.cfg.d_max_us as f64)))
    }

    fn summary(&self, heads: &[f64]) -> Result<f64> {
        match self.cfg.design {
            CriticDesign::Distributional => gamma_alpha(heads, &self.cfg.quantiles, self.cfg.alpha),
            _ => Ok(heads[0]),
        }
    }

    /// Aggregate cost of threshold `d_us` given the encoded context and the
    /// hinge thresholds of the constrained slices.
    pub fn aggregate_cost_at(&self, enc: &[f64], d_us: f64, targets: &BTreeMap<usize, f64>) -> Result<f64> {
        let a = action_feature(d_us, self.cfg.d_max_us as f64);
        self.cost_and_action_grad(enc, a).map(|(c, _)| c).and_then(|c| {
            if self.cfg.design == CriticDesign::SingleUtility {
                return Ok(c);
            }
            let mut tails = Vec::new();
            for (slice, target) in targets {
                let heads = self.critics[slice + 1].forward(&Self::critic_input(enc, a))?;
                tails.push((self.summary(&heads)?, *target));
            }
            Ok(aggregate_cost(c, &tails, self.cfg.lambda))
        })
    }

    /// Energy (or utility) part of the cost and its derivative w.r.t. the
    /// action feature and the encoded context.
    fn cost_and_action_grad(&self, enc: &[f64], a: f64) -> Result<(f64, Vec<f64>)> {
        let critic = &self.critics[0];
        let cache = critic.forward_cached(&Self::critic_input(enc, a))?;
        let n = critic.output_dim() as f64;
        let mean = cache.output().iter().sum::<f64>() / n;
        let g = critic.backward(&cache, &vec![1.0 / n; critic.output_dim()])?;
        Ok((mean, g.input))
    }

    /// Aggregate cost at the actor's own (noise-free) action, and its
    /// gradient w.r.t. the actor parameters and the encoded context.
    pub fn actor_objective(
        &self,
        enc: &[f64],
        targets: &BTreeMap<usize, f64>,
    ) -> Result<(f64, Vec<f64>, Vec<f64>)> {
        let actor_cache = self.actor.forward_cached(enc)?;
        let z = actor_cache.output()[0];
        let a = action_feature_from_logit(z);
        let (mut cost, g0) = self.cost_and_action_grad(enc, a)?;
        let mut dcost_da = g0[enc.len()];
        if self.cfg.design != CriticDesign::SingleUtility {
            for (slice, target) in targets {
                let critic = &self.critics[slice + 1];
                let cache = critic.forward_cached(&Self::critic_input(enc, a))?;
                let (k, tail) = match self.cfg.design {
                    CriticDesign::Distributional => {
                        let k = self.cfg.quantiles.index_of(self.cfg.alpha)?;
                        (k, cache.output()[k])
                    }
                    _ => (0, cache.output()[0]),
                };
                if tail > *target {
                    cost += self.cfg.lambda * (tail - target);
                    let mut up = vec![0.0; critic.output_dim()];
                    up[k] = self.cfg.lambda;
                    dcost_da += critic.backward(&cache, &up)?.input[enc.len()];
                }
            }
        }
        let g = self.actor.backward(&actor_cache, &[logit_grad(z, dcost_da)])?;
        Ok((cost, g.params, g.input))
    }

    fn decide_inner(&mut self, bursts: &[DataBurst], step: usize, sim: &SimConfig) -> Result<PendingDecision> {
        let active: Vec<DataBurst> = bursts
            .iter()
            .filter(|b| sim.slice_active(b.slice, step))
            .copied()
            .collect();
        let contexts = compute_context(&active, sim.step_us, self.cfg.n_ctx);
        let inputs = self.context_inputs(&contexts, self.training)?;
        let enc = encode(&self.encoder, &inputs)?;
        let qos_targets_us: BTreeMap<usize, f64> = contexts
            .keys()
            .filter_map(|s| sim.qos_target_us(*s).map(|t| (*s, t)))
            .collect();
        // Delays are modelled in units of their slice's target.
        let targets = qos_targets_us.keys().map(|s| (*s, 1.0)).collect();
        let noise = if self.explore { self.noise.sample() } else { 0.0 };
        let d = self.actor_action(&enc, noise)?.round();
        let d_us = (d as u64).min(self.cfg.d_max_us.min(sim.d_max_us));
        let cost_agg = self.aggregate_cost_at(&enc, d_us as f64, &targets)?;
        Ok(PendingDecision {
            qos_targets_us,
            inputs,
            d_us,
            targets,
            cost_agg,
        })
    }

    /// Adds an observed step to the replay buffer.
    pub fn record(&mut self, sample: Sample) {
        self.buffer.push(sample);
    }

    /// One gradient update of critics, actor and encoder from a random
    /// batch. Does nothing until the buffer holds a full batch.
    pub fn train_step(&mut self) -> Result<TrainStats> {
        if self.buffer.len() < self.cfg.batch {
            return Ok(TrainStats {
                skipped: true,
                ..TrainStats::default()
            });
        }
        let idx = self.buffer.sample_indices(self.cfg.batch, &mut self.rng);
        let batch: Vec<&Sample> = idx.iter().map(|&i| self.buffer.get(i).expect("in range")).collect();
        let d_enc = self.cfg.d_enc;
        let d_max = self.cfg.d_max_us as f64;

        let mut critic_grads: Vec<Vec<f64>> = self.critics.iter().map(|c| vec![0.0; c.params().len()]).collect();
        let mut critic_counts = vec![0usize; self.critics.len()];
        let mut actor_grad = vec![0.0; self.actor.params().len()];
        let mut encoder_grad = vec![0.0; self.encoder.params().len()];
        let mut critic_loss = 0.0;
        let mut actor_cost = 0.0;
        let mut crossings = 0usize;
        let mut evaluated = 0usize;

        // Per-sample encoder passes, reused by every gradient path.
        let mut enc_caches: Vec<Vec<ForwardCache>> = Vec::with_capacity(batch.len());
        let mut encs: Vec<Vec<f64>> = Vec::with_capacity(batch.len());
        for s in &batch {
            let mut sum = vec![0.0; d_enc];
            let mut caches = Vec::with_capacity(s.inputs.len());
            for (_, x) in &s.inputs {
                let c = self.encoder.forward_cached(x)?;
                for (o, v) in sum.iter_mut().zip(c.output()) {
                    *o += v;
                }
                caches.push(c);
            }
            enc_caches.push(caches);
            encs.push(sum);
        }
        let mut enc_upstream: Vec<Vec<f64>> = vec![vec![0.0; d_enc]; batch.len()];

        // Critic regression targets: (critic index, target) per sample.
        for (i, s) in batch.iter().enumerate() {
            let a = action_feature(s.d_us as f64, d_max);
            let input = Self::critic_input(&encs[i], a);
            let mut targets: Vec<(usize, f64)> = Vec::new();
            match self.cfg.design {
                CriticDesign::SingleUtility => {
                    let deltas: Vec<(f64, f64)> = s
                        .targets
                        .iter()
                        .filter_map(|(sl, t)| s.delays.get(sl).map(|d| (*d, *t)))
                        .collect();
                    targets.push((0, aggregate_cost(s.energy, &deltas, self.cfg.lambda)));
                }
                _ => {
                    targets.push((0, s.energy));
                    for (sl, d) in &s.delays {
                        if sl + 1 < self.critics.len() {
                            targets.push((sl + 1, *d));
                        }
                    }
                }
            }
            for (ci, y) in targets {
                let critic = &self.critics[ci];
                let cache = critic.forward_cached(&input)?;
                let out = cache.output();
                let upstream: Vec<f64> = match self.cfg.design {
                    CriticDesign::Distributional => {
                        evaluated += 1;
                        if out.windows(2).any(|w| w[0] > w[1]) {
                            crossings += 1;
                        }
                        let n = out.len() as f64;
                        self.cfg
                            .quantiles
                            .taus()
                            .iter()
                            .zip(out)
                            .map(|(tau, q)| {
                                critic_loss += quantile_huber_loss(*tau, y - q, self.cfg.kappa) / n;
                                -quantile_huber_grad(*tau, y - q, self.cfg.kappa) / n
                            })
                            .collect()
                    }
                    _ => {
                        critic_loss += 0.5 * (out[0] - y).powi(2);
                        vec![out[0] - y]
                    }
                };
                let g = critic.backward(&cache, &upstream)?;
                for (acc, v) in critic_grads[ci].iter_mut().zip(&g.params) {
                    *acc += v;
                }
                critic_counts[ci] += 1;
                if self.cfg.lr_encoder > 0.0 {
                    // Critic losses reach the encoder as a batch mean.
                    for (u, v) in enc_upstream[i].iter_mut().zip(&g.input[..d_enc]) {
                        *u += v / batch.len() as f64;
                    }
                }
            }
        }
        for (g, n) in critic_grads.iter_mut().zip(&critic_counts) {
            if *n > 0 {
                for v in g.iter_mut() {
                    *v /= *n as f64;
                }
            }
        }

        // Actor: minimize the aggregate cost through the current critics.
        let b = batch.len() as f64;
        for (i, s) in batch.iter().enumerate() {
            let (cost, g_params, g_input) = self.actor_objective(&encs[i], &s.targets)?;
            actor_cost += cost / b;
            for (acc, v) in actor_grad.iter_mut().zip(&g_params) {
                *acc += v / b;
            }
            if self.cfg.encoder_update == EncoderUpdate::Shared {
                for (u, v) in enc_upstream[i].iter_mut().zip(&g_input) {
                    *u += v / b;
                }
            }
        }

        if self.cfg.lr_encoder > 0.0 {
            for (i, s) in batch.iter().enumerate() {
                if enc_upstream[i].iter().all(|v| *v == 0.0) {
                    continue;
                }
                for (k, _) in s.inputs.iter().enumerate() {
                    let g = self.encoder.backward(&enc_caches[i][k], &enc_upstream[i])?;
                    for (acc, v) in encoder_grad.iter_mut().zip(&g.params) {
                        *acc += v;
                    }
                }
            }
        }

        let finite = |v: &[f64]| v.iter().all(|x| x.is_finite());
        if !critic_loss.is_finite()
            || !actor_cost.is_finite()
            || !critic_grads.iter().all(|g| finite(g))
            || !finite(&actor_grad)
            || !finite(&encoder_grad)
        {
            log::warn!("non-finite loss or gradient; update skipped");
            self.last_stats = TrainStats {
                skipped: true,
                ..TrainStats::default()
            };
            return Ok(self.last_stats);
        }

        for ((critic, opt), (g, n)) in self
            .critics
            .iter_mut()
            .zip(self.opt_critics.iter_mut())
            .zip(critic_grads.iter().zip(&critic_counts))
        {
            if *n > 0 {
                opt.update(critic.params_mut(), g)?;
            }
        }
        self.opt_actor.update(self.actor.params_mut(), &actor_grad)?;
        if self.cfg.lr_encoder > 0.0 {
            self.opt_encoder.update(self.encoder.params_mut(), &encoder_grad)?;
        }
        self.last_stats = TrainStats {
            critic_loss: critic_loss / b,
            actor_cost,
            crossing_rate: if evaluated == 0 {
                0.0
            } else {
                crossings as f64 / evaluated as f64
            },
            skipped: false,
        };
        Ok(self.last_stats)
    }

    /// Writes `<stem>.bin`, `<stem>.manifest` and `<stem>.norm`.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let names: Vec<String> = (0..self.critics.len()).map(|i| format!("critic{i}")).collect();
        let mut nets: Vec<(&str, &DenseNet)> = vec![("encoder", &self.encoder), ("actor", &self.actor)];
        nets.extend(names.iter().map(|n| n.as_str()).zip(self.critics.iter()));
        save_checkpoint(stem, &nets)?;
        let norm = stem.with_extension("norm");
        fs::write(&norm, self.normalizer.to_text()).map_err(|e| Error::io(&norm, e))
    }

    /// Restores networks and normalization saved by [`Controller::save`].
    pub fn load(cfg: ControllerConfig, stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let mut c = Controller::new(cfg)?;
        let nets = load_checkpoint(stem)?;
        if nets.len() != 2 + c.critics.len() {
            return Err(Error::Config(format!(
                "checkpoint holds {} networks, controller needs {}",
                nets.len(),
                2 + c.critics.len()
            )));
        }
        for (i, (name, net)) in nets.into_iter().enumerate() {
            let slot = match i {
                0 => &mut c.encoder,
                1 => &mut c.actor,
                k => &mut c.critics[k - 2],
            };
            if slot.sizes() != net.sizes() || slot.activations() != net.activations() {
                return Err(Error::Config(format!("network {name} does not match the configured shape")));
            }
            *slot = net;
        }
        let norm = stem.with_extension("norm");
        let text = fs::read_to_string(&norm).map_err(|e| Error::io(&norm, e))?;
        c.normalizer = Normalizer::from_text(&text, &norm)?;
        Ok(c)
    }
}

impl StepPolicy for Controller {
    fn decide(&mut self, step: usize, bursts: &[DataBurst], cfg: &SimConfig) -> Result<u64> {
        let d = self.decide_inner(bursts, step, cfg)?;
        let d_us = d.d_us;
        self.pending = Some(d);
        Ok(d_us)
    }

    fn observe(&mut self, report: &StepReport) -> Result<()> {
        let Some(p) = self.pending.take() else {
            return Err(Error::Invariant("outcome observed without a decision".into()));
        };
        self.curve.push(CurveRow {
            step: report.step,
            d_us: p.d_us,
            energy_norm: report.energy_norm,
            violation_count: report.violation_count(),
            cost_agg: p.cost_agg,
        });
        if !self.training {
            return Ok(());
        }
        let delays = p
            .qos_targets_us
            .iter()
            .filter_map(|(s, t)| report.qos.get(s).map(|d| (*s, d / t)))
            .collect();
        self.record(Sample {
            inputs: p.inputs,
            d_us: p.d_us,
            energy: report.energy_norm,
            delays,
            targets: p.targets,
        });
        for _ in 0..self.cfg.updates_per_step {
            self.train_step()?;
        }
        Ok(())
    }
}

/// Plays the controller through an episode: context, action, simulation,
/// storage and (when training) an update every step.
pub fn control_loop(
    trace: &Trace,
    sim: &SimConfig,
    controller: &mut Controller,
    steps: Option<usize>,
) -> Result<Vec<StepReport>> {
    run_episode(trace, controller, sim, steps)
}
