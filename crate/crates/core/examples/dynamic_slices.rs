//! Five slices with 16/8/4/2/1 ms targets joining every 30 s, served by the
//! distributional controller and the two mean-critic baselines.

use sleepctl::experiment::{cmd_compare, ExperimentConfig, RunSummary};

const CONFIG: &str = "\
seed = 1
slice.0.target_ms = 16
slice.1.target_ms = 8
slice.1.active_from = 150
slice.2.target_ms = 4
slice.2.active_from = 300
slice.3.target_ms = 2
slice.3.active_from = 450
slice.4.target_ms = 1
slice.4.active_from = 600
trace.duration_s = 180
controller.updates_per_step = 4
controller.lr_actor = 0.001
compare.variants = controller, ncb, mcncb, unaware
";

fn main() -> sleepctl::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok());
    let cfg = ExperimentConfig::parse(CONFIG, std::path::Path::new("dynamic.conf"))?.with_overrides(None, steps)?;
    let out = std::env::temp_dir().join("sleepctl_dynamic");
    for (v, reports) in cmd_compare(&cfg, &out)? {
        let s = RunSummary::from_reports(&v.to_string(), &reports, cfg.trailing_steps);
        println!(
            "{:>10}: energy {:.3}  violations {:.4}  trailing violations {:.4}",
            s.variant, s.mean_energy_norm, s.violation_rate, s.trailing_violation_rate
        );
    }
    println!("wrote {}", out.join("compare.csv").display());
    Ok(())
}
