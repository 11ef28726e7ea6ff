//! Trains the controller online on two slices with 8 ms and 16 ms delay
//! targets, then replays the frozen policy.

use sleepctl::controller::{control_loop, Controller, ControllerConfig};
use sleepctl::experiment::RunSummary;
use sleepctl::sim::{SimConfig, SliceConfig};
use sleepctl::traces::{generate_synthetic, SliceProfile};

fn main() -> sleepctl::Result<()> {
    let steps: usize = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(750);
    let sim = SimConfig::default().with_slices(vec![SliceConfig::new(0, 8000.0), SliceConfig::new(1, 16_000.0)]);
    let profiles: Vec<_> = (0..2).map(SliceProfile::reference_load).collect();
    let trace = generate_synthetic(1, (steps as u64 + 100) * sim.step_us, &profiles)?;
    let mut c = Controller::new(ControllerConfig {
        seed: 1,
        ..ControllerConfig::default()
    })?;
    let train = control_loop(&trace, &sim, &mut c, Some(steps))?;
    for w in train.chunks(steps.div_ceil(10)) {
        let s = RunSummary::from_reports("", w, w.len());
        println!(
            "steps {:>4}..{:<4} mean d {:>6.0} us  energy {:.3}  violations {:.3}",
            w[0].step,
            w[w.len() - 1].step,
            w.iter().map(|r| r.d_us as f64).sum::<f64>() / w.len() as f64,
            s.mean_energy_norm,
            s.violation_rate
        );
    }
    let stem = std::env::temp_dir().join("sleepctl_controller");
    c.save(&stem)?;
    let mut frozen = Controller::load(c.config().clone(), &stem)?;
    frozen.set_training(false);
    frozen.set_exploration(false);
    let eval = control_loop(&trace, &sim, &mut frozen, Some(steps + 100))?;
    let s = RunSummary::from_reports("frozen", &eval, 100);
    println!(
        "frozen policy, last 100 steps: energy {:.3}, violations {:.4}",
        s.trailing_energy_norm, s.trailing_violation_rate
    );
    Ok(())
}
