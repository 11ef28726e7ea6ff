//! Power saving against extra delay for constant thresholds at 1x, 2x and
//! 4x the calibrated load.

use sleepctl::experiment::{cmd_sweep, ExperimentConfig};

fn main() -> sleepctl::Result<()> {
    let cfg = ExperimentConfig {
        steps: Some(150),
        ..ExperimentConfig::default()
    };
    let out = std::env::temp_dir().join("sleepctl_sweep");
    for p in cmd_sweep(&cfg, &out)? {
        println!(
            "load {}x  d {:>6} us  saving {:>5.1}%  extra delay {:>6.2} ms",
            p.load_factor,
            p.d_us,
            100.0 * p.power_saving,
            p.extra_delay_ms
        );
    }
    println!("wrote {}", out.join("pareto.csv").display());
    Ok(())
}
