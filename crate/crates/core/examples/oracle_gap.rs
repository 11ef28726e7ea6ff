//! Online sleep-level selection against a clairvoyant scheduler that knows
//! when every silenced period ends, under the same thresholds.

use sleepctl::sim::{run_episode, run_oracle_episode, SchedulePolicy, SimConfig};
use sleepctl::traces::{generate_synthetic, scale_load, SliceProfile};

fn main() -> sleepctl::Result<()> {
    let sim = SimConfig::default();
    let load = 4.0;
    let raw = generate_synthetic(3, (30_000_000.0 * load) as u64, &[SliceProfile::reference_load(0)])?;
    let trace = scale_load(&raw, load)?;
    // Thresholds cycling through tight and relaxed settings.
    let d: Vec<u64> = (0..150).map(|k| [250, 1000, 4000, 16_000, 64_000][k % 5]).collect();
    let online = run_episode(&trace, &mut SchedulePolicy(d.clone()), &sim, Some(d.len()))?;
    let oracle = run_oracle_episode(&trace, &mut SchedulePolicy(d.clone()), &sim, Some(d.len()))?;
    let sum = |r: &[sleepctl::sim::StepReport]| r.iter().map(|s| s.energy).sum::<f64>();
    let (e_on, e_or) = (sum(&online), sum(&oracle));
    let below = online.iter().zip(&oracle).filter(|(a, b)| a.energy < b.energy * (1.0 - 1e-9)).count();
    println!("online energy {:.4e}, oracle {:.4e}, gap {:.2}%", e_on, e_or, 100.0 * (e_on / e_or - 1.0));
    println!("steps where online beat the oracle: {below}");
    Ok(())
}
