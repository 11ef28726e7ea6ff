//! Generates a calibrated synthetic trace, writes it to disk, and reports
//! how much of the time the cell is idle and how long idle runs last.

use sleepctl::traces::{generate_synthetic, idle_statistics, load_trace, write_trace, SliceProfile};

fn main() -> sleepctl::Result<()> {
    let trace = generate_synthetic(7, 60_000_000, &[SliceProfile::reference_load(0)])?;
    let path = std::env::temp_dir().join("sleepctl_trace.csv");
    write_trace(&trace, &path)?;
    let trace = load_trace(&path)?;

    let stats = idle_statistics(&trace, 1000, 1_000_000)?;
    let mut ratios: Vec<f64> = stats.iter().map(|s| s.idle_ratio).collect();
    ratios.sort_by(f64::total_cmp);
    let mut runs: Vec<u32> = stats.iter().flat_map(|s| s.idle_runs.iter().copied()).collect();
    runs.sort_unstable();
    let pct = |p: f64| runs[((runs.len() - 1) as f64 * p).round() as usize];
    println!("{} bursts, {:.2} Mb/s", trace.bursts.len(), trace.mean_rate_bps() / 1e6);
    println!("median idle ratio per second: {:.3}", ratios[ratios.len() / 2]);
    println!("idle run length (TTIs): median {}, p99 {}", pct(0.5), pct(0.99));
    Ok(())
}
