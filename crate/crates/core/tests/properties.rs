//! Invariants of the trace tools, the simulator and the oracle on random
//! inputs.

use proptest::prelude::*;
use sleepctl::sim::{run_episode, run_oracle_episode, AsmMode, ConstantPolicy, Episode, SchedulePolicy, SimConfig};
use sleepctl::traces::{generate_synthetic, idle_statistics, scale_load, DataBurst, SliceProfile, Trace};

fn arb_trace(max_bursts: usize, duration_us: u64) -> impl Strategy<Value = Trace> {
    proptest::collection::vec((0..duration_us, 1u64..200_000, 0usize..3), 0..max_bursts).prop_map(move |raw| {
        let bursts = raw
            .into_iter()
            .map(|(arrival_us, size_bits, slice)| DataBurst {
                arrival_us,
                size_bits,
                slice,
            })
            .collect();
        Trace::new(bursts, duration_us).unwrap()
    })
}

const THRESHOLDS: [u64; 7] = [0, 20, 250, 1000, 4000, 16_000, 64_000];

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn scale_load_composes(trace in arb_trace(60, 2_000_000), a in 1u64..6, b in 1u64..6) {
        let once = scale_load(&trace, (a * b) as f64).unwrap();
        let twice = scale_load(&scale_load(&trace, a as f64).unwrap(), b as f64).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn compression_never_adds_idleness(seed in 0u64..1000, k in prop::sample::select(vec![2u64, 4, 5, 8])) {
        let t = generate_synthetic(seed, 2_000_000, &[SliceProfile::reference_load(0)]).unwrap();
        prop_assume!(!t.bursts.is_empty());
        let ratio = |t: &Trace| {
            let w = idle_statistics(t, 1000, t.duration_us).unwrap();
            w[0].idle_ratio
        };
        prop_assert!(ratio(&scale_load(&t, k as f64).unwrap()) <= ratio(&t));
    }

    #[test]
    fn idle_runs_partition_window(trace in arb_trace(80, 3_000_000), window_ms in 1u64..1500) {
        for w in idle_statistics(&trace, 1000, window_ms * 1000).unwrap() {
            let idle: u32 = w.idle_runs.iter().sum();
            prop_assert_eq!(idle + w.active_ttis, w.total_ttis);
        }
    }

    #[test]
    fn deferral_bound_and_conservation(trace in arb_trace(120, 600_000), di in 0usize..THRESHOLDS.len()) {
        let cfg = SimConfig::default();
        let r = run_episode(&trace, &mut ConstantPolicy(THRESHOLDS[di]), &cfg, None).unwrap();
        let (mut arrived, mut sent) = (0u64, 0u64);
        for s in &r {
            prop_assert_eq!(s.bound_violations, 0);
            prop_assert_eq!(s.late_activations, 0);
            arrived += s.bits_arrived;
            sent += s.bits_transmitted;
            prop_assert_eq!(sent + s.buffered_bits, arrived);
            prop_assert!(s.energy_norm > 0.0);
        }
    }

    #[test]
    fn transmissions_only_when_ready(trace in arb_trace(60, 400_000), schedule in proptest::collection::vec(0usize..THRESHOLDS.len(), 2)) {
        let cfg = SimConfig::default();
        let mut ep = Episode::new(&trace, &cfg, AsmMode::Policy).unwrap();
        ep.engine_mut().set_record_timeline(true);
        for i in schedule {
            ep.simulate_step(THRESHOLDS[i]).unwrap();
            for e in ep.engine().last_timeline() {
                prop_assert!(e.rbs == 0 || e.state.is_ready());
            }
        }
    }

    #[test]
    fn oracle_never_worse_per_step(trace in arb_trace(150, 1_000_000), schedule in proptest::collection::vec(1usize..THRESHOLDS.len(), 5)) {
        let cfg = SimConfig::default();
        let d: Vec<u64> = schedule.iter().map(|i| THRESHOLDS[*i]).collect();
        let online = run_episode(&trace, &mut SchedulePolicy(d.clone()), &cfg, None).unwrap();
        let oracle = run_oracle_episode(&trace, &mut SchedulePolicy(d), &cfg, None).unwrap();
        for (a, b) in online.iter().zip(&oracle) {
            prop_assert!(b.energy <= a.energy * (1.0 + 1e-9));
            prop_assert_eq!(&a.qos, &b.qos);
        }
    }
}

#[test]
fn silent_deep_sleep_settles_at_floor() {
    let cfg = SimConfig::default();
    let trace = Trace::new(Vec::new(), 1_000_000).unwrap();
    for r in run_episode(&trace, &mut ConstantPolicy(64_000), &cfg, None).unwrap() {
        assert!((r.energy_norm - cfg.asm.power(sleepctl::ru::AsmId::Asm3)).abs() < 1e-12);
    }
}
