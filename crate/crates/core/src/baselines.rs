//! Comparison systems: an always-awake RU, clairvoyant sleep scheduling, and
//! two non-distributional learning controllers that share every component
//! of the main controller except the critics.

use std::fmt;
use std::str::FromStr;

use crate::controller::{aggregate_cost, control_loop, Controller, ControllerConfig, CriticDesign, TrainStats};
use crate::error::{Error, Result};
use crate::sim::{run_episode_with, run_oracle_episode, AsmMode, ConstantPolicy, SchedulePolicy, SimConfig, StepReport};
use crate::traces::Trace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum BaselineKind {
    /// Threshold 0 and the RU never sleeps.
    AsmUnaware,
    /// A given threshold sequence with clairvoyant sleep-level choices.
    OracleAsm,
    /// Single critic of a penalized scalar utility.
    Ncb,
    /// One mean critic per constraint.
    McNcb,
}

impl BaselineKind {
    pub const ALL: [BaselineKind; 4] = [
        BaselineKind::AsmUnaware,
        BaselineKind::OracleAsm,
        BaselineKind::Ncb,
        BaselineKind::McNcb,
    ];
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            BaselineKind::AsmUnaware => "unaware",
            BaselineKind::OracleAsm => "oracle",
            BaselineKind::Ncb => "ncb",
            BaselineKind::McNcb => "mcncb",
        })
    }
}

impl FromStr for BaselineKind {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        BaselineKind::ALL
            .into_iter()
            .find(|k| k.to_string() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown baseline {s:?}")))
    }
}

/// `E + lambda * sum max(delta_l - target_l, 0)` over observed slices.
pub fn ncb_utility(energy: f64, delays_and_targets: &[(f64, f64)], lambda: f64) -> f64 {
    aggregate_cost(energy, delays_and_targets, lambda)
}

/// The shared controller settings with the critic design swapped out.
pub fn learning_config(kind: BaselineKind, base: &ControllerConfig) -> Result<ControllerConfig> {
    let design = match kind {
        BaselineKind::Ncb => CriticDesign::SingleUtility,
        BaselineKind::McNcb => CriticDesign::MeanPerConstraint,
        other => {
            return Err(Error::InvalidArgument(format!("{other} is not a learning baseline")));
        }
    };
    Ok(ControllerConfig {
        design,
        ..base.clone()
    })
}

/// One update of a per-constraint mean-critic controller.
pub fn mcncb_train_step(controller: &mut Controller) -> Result<TrainStats> {
    if controller.config().design != CriticDesign::MeanPerConstraint {
        return Err(Error::InvalidArgument("controller does not use per-constraint mean critics".into()));
    }
    controller.train_step()
}

/// Runs a baseline over `trace`. `thresholds` supplies the per-step
/// threshold for [`BaselineKind::OracleAsm`]; learning baselines train
/// online from the controller settings.
pub fn run_baseline(
    kind: BaselineKind,
    trace: &Trace,
    sim: &SimConfig,
    ctrl: &ControllerConfig,
    steps: Option<usize>,
    thresholds: Option<&[u64]>,
) -> Result<Vec<StepReport>> {
    match kind {
        BaselineKind::AsmUnaware => run_episode_with(trace, &mut ConstantPolicy(0), sim, steps, AsmMode::Disabled),
        BaselineKind::OracleAsm => {
            let t = thresholds
                .filter(|t| !t.is_empty())
                .ok_or_else(|| Error::InvalidArgument("oracle baseline needs a threshold sequence".into()))?;
            run_oracle_episode(trace, &mut SchedulePolicy(t.to_vec()), sim, steps)
        }
        BaselineKind::Ncb | BaselineKind::McNcb => {
            let mut c = Controller::new(learning_config(kind, ctrl)?)?;
            control_loop(trace, sim, &mut c, steps)
        }
    }
}
