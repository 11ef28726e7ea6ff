//! Acceptance suite: one PASS/FAIL line per criterion. Runs as a plain
//! binary (no libtest harness) so the report is always printed; exits
//! non-zero if any criterion fails.

use std::collections::BTreeMap;
use std::path::Path;
use std::process::{Command, ExitCode};
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use sleepctl::controller::{control_loop, encode, encoder_input, Controller, ControllerConfig};
use sleepctl::experiment::{cmd_compare, cmd_sweep, ExperimentConfig, RunSummary, Variant};
use sleepctl::nn::{
    quantile_huber_grad, quantile_huber_loss, quantile_loss, Activation, Adam, DenseNet, QuantileSet,
};
use sleepctl::radio::SymbolClock;
use sleepctl::ru::{asm_select, AsmId};
use sleepctl::sim::{run_episode, run_oracle_episode, ConstantPolicy, SchedulePolicy, SimConfig, SliceConfig, StepReport};
use sleepctl::traces::{generate_synthetic, scale_load, DataBurst, SliceProfile, Trace};
use statrs::distribution::{ContinuousCDF, Normal};

type Outcome = Result<String, String>;

fn check(ok: bool, detail: String) -> Outcome {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-8)
}

fn reference_trace(seed: u64, slices: usize, duration_us: u64, load: f64) -> Trace {
    let profiles: Vec<_> = (0..slices).map(SliceProfile::reference_load).collect();
    let raw = generate_synthetic(seed, (duration_us as f64 * load).ceil() as u64, &profiles).unwrap();
    scale_load(&raw, load).unwrap()
}

fn trailing(reports: &[StepReport], n: usize) -> (f64, f64) {
    let tail = &reports[reports.len().saturating_sub(n)..];
    let samples: usize = tail.iter().map(|s| s.qos.len()).sum();
    let violated: usize = tail.iter().map(StepReport::violation_count).sum();
    let energy = tail.iter().map(|s| s.energy_norm).sum::<f64>() / tail.len() as f64;
    (violated as f64 / samples.max(1) as f64, energy)
}

// 1 -------------------------------------------------------------------------

fn asm_table() -> Outcome {
    let clock = SymbolClock::new(1);
    let cases = [
        (20.0, AsmId::IdleAwake),
        (100.0, AsmId::Asm1),
        (1000.0, AsmId::Asm2),
        (3000.0, AsmId::Asm2),
        (6000.0, AsmId::Asm3),
        (64_000.0, AsmId::Asm3),
    ];
    let got: Vec<AsmId> = cases.iter().map(|(d, _)| asm_select(*d, clock)).collect();
    let want: Vec<AsmId> = cases.iter().map(|c| c.1).collect();
    check(got == want, format!("{got:?}"))
}

// 2 -------------------------------------------------------------------------

fn deferral_bound() -> Outcome {
    let sim = SimConfig::default();
    let mut bursts = 0usize;
    let mut violations = 0u64;
    for load in [1.0, 2.0, 4.0] {
        let trace = reference_trace(11, 1, 20_000_000, load);
        for d in [250, 1000, 4000, 16_000, 64_000] {
            for r in run_episode(&trace, &mut ConstantPolicy(d), &sim, None).unwrap() {
                bursts += r.delays.len();
                violations += r.bound_violations;
            }
        }
    }
    // Single small bursts arriving into an idle cell at scattered offsets.
    let slot = sim.clock().symbol_us() * sim.clock().symbols_per_slot() as f64;
    let mut worst: f64 = 0.0;
    for d in [250u64, 1000, 4000, 16_000, 64_000] {
        for offset in [0u64, 137, 5_000, 33_333, 71_234] {
            let trace = Trace::new(
                vec![DataBurst {
                    arrival_us: offset,
                    size_bits: 200,
                    slice: 0,
                }],
                200_000,
            )
            .unwrap();
            let r = run_episode(&trace, &mut ConstantPolicy(d), &sim, Some(1)).unwrap();
            worst = worst.max((r[0].qos[&0] - d as f64).abs());
        }
    }
    check(
        bursts >= 100_000 && violations == 0 && worst <= slot,
        format!("{bursts} bursts, {violations} bound violations, single-burst |deferral - d| <= {worst:.1} us (slot {slot} us)"),
    )
}

// 3 -------------------------------------------------------------------------

fn pareto_trend() -> Outcome {
    let cfg = ExperimentConfig::default();
    let dir = tempfile::tempdir().unwrap();
    let points = cmd_sweep(&cfg, dir.path()).unwrap();
    let at = |f: f64, d: u64| {
        points
            .iter()
            .find(|p| p.load_factor == f && p.d_us == d)
            .map(|p| p.power_saving)
            .unwrap()
    };
    let grid = &cfg.sweep.d_us;
    let loads = &cfg.sweep.load_factors;
    let mono_d = loads
        .iter()
        .all(|f| grid.windows(2).all(|w| at(*f, w[1]) >= at(*f, w[0]) - 1e-12));
    let mono_load = grid
        .iter()
        .all(|d| loads.windows(2).all(|w| at(w[1], *d) <= at(w[0], *d) + 1e-12));
    let relaxed = at(1.0, 64_000);
    let tight: Vec<f64> = grid.iter().filter(|d| **d > 0 && **d <= 1000).map(|d| at(1.0, *d)).collect();
    let bands = (0.5..=0.8).contains(&relaxed) && tight.iter().all(|s| (0.15..=0.45).contains(s));
    check(
        mono_d && mono_load && bands,
        format!(
            "monotone in d: {mono_d}, in load: {mono_load}; 1x savings d=64ms {relaxed:.3}, d<=1ms {:?}",
            tight.iter().map(|s| format!("{s:.3}")).collect::<Vec<_>>()
        ),
    )
}

// 4 -------------------------------------------------------------------------

fn oracle_comparability() -> Outcome {
    let sim = SimConfig::default();
    let trace = reference_trace(5, 1, 60_000_000, 4.0);
    let mut c = Controller::new(ControllerConfig {
        seed: 5,
        ..ControllerConfig::default()
    })
    .unwrap();
    let learned: Vec<u64> = control_loop(&trace, &sim, &mut c, None).unwrap().iter().map(|s| s.d_us).collect();
    let cycling: Vec<u64> = (0..300).map(|k| [250, 1000, 4000, 16_000, 64_000][k % 5]).collect();
    let mut worst_gap: f64 = 0.0;
    let mut below = 0;
    for schedule in [learned, cycling] {
        let n = Some(schedule.len());
        let online = run_episode(&trace, &mut SchedulePolicy(schedule.clone()), &sim, n).unwrap();
        let oracle = run_oracle_episode(&trace, &mut SchedulePolicy(schedule), &sim, n).unwrap();
        let e_on: f64 = online.iter().map(|s| s.energy).sum();
        let e_or: f64 = oracle.iter().map(|s| s.energy).sum();
        worst_gap = worst_gap.max(e_on / e_or - 1.0);
        below += online
            .iter()
            .zip(&oracle)
            .filter(|(a, b)| a.energy < b.energy * (1.0 - 1e-9))
            .count();
    }
    check(
        worst_gap <= 0.10 && below == 0,
        format!("online/oracle energy gap {:.2}%, steps below oracle {below}", 100.0 * worst_gap),
    )
}

// 5 -------------------------------------------------------------------------

fn convergence() -> Outcome {
    let sim = SimConfig::default().with_slices(vec![SliceConfig::new(0, 8000.0), SliceConfig::new(1, 16_000.0)]);
    let trace = reference_trace(1, 2, 750 * 200_000, 1.0);
    let mut c = Controller::new(ControllerConfig {
        seed: 1,
        ..ControllerConfig::default()
    })
    .unwrap();
    let r = control_loop(&trace, &sim, &mut c, Some(750)).unwrap();
    let (viol, energy) = trailing(&r, 100);
    check(
        viol <= 0.01 && energy <= 0.85,
        format!("trailing-100 violation rate {viol:.4}, energy {energy:.3} of the always-awake baseline"),
    )
}

// 6 -------------------------------------------------------------------------

const DYNAMIC: &str = "\
slice.0.target_ms = 16
slice.1.target_ms = 8
slice.1.active_from = 150
slice.2.target_ms = 4
slice.2.active_from = 300
slice.3.target_ms = 2
slice.3.active_from = 450
slice.4.target_ms = 1
slice.4.active_from = 600
trace.duration_s = 300
controller.updates_per_step = 4
controller.lr_actor = 0.001
compare.variants = controller, ncb, mcncb
compare.trailing_steps = 100
";

fn benchmark_ordering() -> Outcome {
    let seeds = [1u64, 2, 3];
    let mut pooled: BTreeMap<String, (usize, usize, f64)> = BTreeMap::new();
    let mut lines = Vec::new();
    for seed in seeds {
        let cfg = ExperimentConfig::parse(&format!("seed = {seed}\n{DYNAMIC}"), Path::new("dynamic.conf")).unwrap();
        let dir = tempfile::tempdir().unwrap();
        for (v, r) in cmd_compare(&cfg, dir.path()).unwrap() {
            let tail = &r[r.len() - cfg.trailing_steps..];
            let e = pooled.entry(v.to_string()).or_default();
            e.0 += tail.iter().map(StepReport::violation_count).sum::<usize>();
            e.1 += tail.iter().map(|s| s.qos.len()).sum::<usize>();
            e.2 += tail.iter().map(|s| s.energy_norm).sum::<f64>() / tail.len() as f64 / seeds.len() as f64;
            let s = RunSummary::from_reports(&v.to_string(), &r, cfg.trailing_steps);
            lines.push(format!(
                "seed {seed} {}: trailing violations {:.4}, energy {:.3}",
                s.variant, s.trailing_violation_rate, s.trailing_energy_norm
            ));
        }
    }
    for l in &lines {
        println!("      {l}");
    }
    let rate = |v: &str| pooled[v].0 as f64 / pooled[v].1.max(1) as f64;
    let energy = |v: &str| pooled[v].2;
    let ours = Variant::Controller.to_string();
    let ordered = rate(&ours) < rate("ncb") && rate(&ours) < rate("mcncb");
    let es = [energy(&ours), energy("ncb"), energy("mcncb")];
    let spread = es.iter().cloned().fold(f64::MIN, f64::max) / es.iter().cloned().fold(f64::MAX, f64::min) - 1.0;
    check(
        ordered && spread <= 0.10,
        format!(
            "pooled trailing violations controller {:.4} / ncb {:.4} / mcncb {:.4}; energies {:.3} / {:.3} / {:.3} (spread {:.1}%)",
            rate(&ours),
            rate("ncb"),
            rate("mcncb"),
            es[0],
            es[1],
            es[2],
            100.0 * spread
        ),
    )
}

// 7 -------------------------------------------------------------------------

fn quantile_machinery() -> Outcome {
    let taus = [0.1, 0.5, 0.9];
    let normal = Normal::new(0.0, 1.0).unwrap();
    let kappa = 0.01;
    let batch = 128;
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut net = DenseNet::new(&[1, 16, taus.len()], Activation::Relu, Activation::Linear, &mut rng).unwrap();
    for (lr, iters) in [(1e-2, 2000), (1e-3, 2000), (1e-4, 1000)] {
        let mut opt = Adam::new(net.params().len(), lr);
        for _ in 0..iters {
            let mut grads = vec![0.0; net.params().len()];
            let cache = net.forward_cached(&[1.0]).unwrap();
            for _ in 0..batch {
                let y: f64 = StandardNormal.sample(&mut rng);
                let up: Vec<f64> = taus
                    .iter()
                    .zip(cache.output())
                    .map(|(t, q)| -quantile_huber_grad(*t, y - q, kappa) / batch as f64)
                    .collect();
                for (g, d) in grads.iter_mut().zip(net.backward(&cache, &up).unwrap().params) {
                    *g += d;
                }
            }
            opt.update(net.params_mut(), &grads).unwrap();
        }
    }
    let learned = net.forward(&[1.0]).unwrap();
    let recover = taus
        .iter()
        .zip(&learned)
        .map(|(t, q)| (q - normal.inverse_cdf(*t)).abs())
        .fold(0.0, f64::max);

    let mut limit: f64 = 0.0;
    for t in [0.005, 0.1, 0.25, 0.5, 0.75, 0.9, 0.995] {
        for k in -40..=40 {
            let u = k as f64 * 0.1;
            limit = limit.max((quantile_huber_loss(t, u, 1e-3) - quantile_loss(t, u)).abs());
        }
    }

    // The sample tau-quantile minimizes the summed pinball loss.
    let xs: Vec<f64> = (0..101).map(|_| StandardNormal.sample(&mut rng)).collect();
    let mut sorted = xs.clone();
    sorted.sort_by(f64::total_cmp);
    let risk = |q: f64, t: f64| xs.iter().map(|x| quantile_loss(t, x - q)).sum::<f64>();
    let minimizer_ok = taus.iter().all(|t| {
        let q = sorted[((sorted.len() as f64 * t).ceil() as usize).saturating_sub(1)];
        (-200..=200).all(|k| risk(q, *t) <= risk(q + k as f64 * 0.01, *t) + 1e-12)
            && sorted.iter().all(|c| risk(q, *t) <= risk(*c, *t) + 1e-12)
    });
    check(
        recover <= 0.05 && limit <= 1e-3 && minimizer_ok,
        format!("max quantile error {recover:.4}, kappa->0 gap {limit:.1e}, pinball minimizer {minimizer_ok}"),
    )
}

// 8 -------------------------------------------------------------------------

fn gradient_integrity() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    let mut note = |a: f64, b: f64| {
        if (a - b).abs() > 1e-9 {
            worst = worst.max(rel_err(a, b));
        }
    };

    // Networks: parameter and input gradients of a weighted output sum.
    for (sizes, out) in [(vec![5, 9, 7, 3], Activation::Linear), (vec![4, 6, 1], Activation::Sigmoid)] {
        let net = DenseNet::new(&sizes, Activation::Relu, out, &mut rng).unwrap();
        let x: Vec<f64> = (0..sizes[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
        let w: Vec<f64> = (0..*sizes.last().unwrap()).map(|_| rng.random_range(-1.0..1.0)).collect();
        let f = |n: &DenseNet, x: &[f64]| -> f64 { n.forward(x).unwrap().iter().zip(&w).map(|(a, b)| a * b).sum() };
        let g = net.backward(&net.forward_cached(&x).unwrap(), &w).unwrap();
        for k in 0..net.params().len() {
            let mut p = net.clone();
            p.params_mut()[k] += h;
            let up = f(&p, &x);
            p.params_mut()[k] -= 2.0 * h;
            note(g.params[k], (up - f(&p, &x)) / (2.0 * h));
        }
        for k in 0..x.len() {
            let (mut up, mut dn) = (x.clone(), x.clone());
            up[k] += h;
            dn[k] -= h;
            note(g.input[k], (f(&net, &up) - f(&net, &dn)) / (2.0 * h));
        }
    }

    // Loss: quantile Huber derivative away from its kinks.
    for t in [0.1, 0.5, 0.995] {
        for u in [-3.0, -0.4, -0.05, 0.03, 0.7, 2.5] {
            let kappa = 0.1;
            let fd = (quantile_huber_loss(t, u + h, kappa) - quantile_huber_loss(t, u - h, kappa)) / (2.0 * h);
            note(quantile_huber_grad(t, u, kappa), fd);
        }
    }

    // Aggregate cost through critics and actor, with hinges both active
    // and inactive, for every critic design.
    for design_seed in 0..3u64 {
        let mut cfg = ControllerConfig {
            hidden: vec![12, 12],
            d_enc: 6,
            l_max: 3,
            seed: design_seed,
            quantiles: QuantileSet::with_alpha(vec![0.1, 0.5, 0.9, 0.995], 0.995).unwrap(),
            ..ControllerConfig::default()
        };
        cfg.design = [
            sleepctl::controller::CriticDesign::Distributional,
            sleepctl::controller::CriticDesign::MeanPerConstraint,
            sleepctl::controller::CriticDesign::SingleUtility,
        ][design_seed as usize];
        let c = Controller::new(cfg).unwrap();
        let enc: Vec<f64> = (0..6).map(|_| rng.random_range(-1.0..1.0)).collect();
        let targets: BTreeMap<usize, f64> = [(0, -5.0), (2, -5.0), (1, 50.0)].into_iter().collect();
        let (_, g_params, _) = c.actor_objective(&enc, &targets).unwrap();
        for k in 0..c.actor.params().len() {
            let mut p = c.clone();
            p.actor.params_mut()[k] += h;
            let up = p.actor_objective(&enc, &targets).unwrap().0;
            p.actor.params_mut()[k] -= 2.0 * h;
            let dn = p.actor_objective(&enc, &targets).unwrap().0;
            note(g_params[k], (up - dn) / (2.0 * h));
        }
    }
    check(worst <= 1e-3, format!("worst relative error {worst:.2e}"))
}

// 9 -------------------------------------------------------------------------

fn encoder_invariance() -> Outcome {
    let cfg = ControllerConfig::default();
    let c = Controller::new(cfg.clone()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let feats = 2 * cfg.n_ctx;
    let input = |slice: usize, rng: &mut ChaCha8Rng| {
        let f: Vec<f64> = (0..feats).map(|_| rng.random_range(-2.0..2.0)).collect();
        (slice, encoder_input(&f, slice, cfg.l_max).unwrap())
    };
    let all: Vec<(usize, Vec<f64>)> = (0..8).map(|s| input(s, &mut rng)).collect();
    let dims_ok = (0..=8).all(|n| encode(&c.encoder, &all[..n]).unwrap().len() == cfg.d_enc);
    let (a, b) = all.split_at(3);
    let whole = encode(&c.encoder, &all).unwrap();
    let parts: Vec<f64> = encode(&c.encoder, a)
        .unwrap()
        .iter()
        .zip(encode(&c.encoder, b).unwrap())
        .map(|(x, y)| x + y)
        .collect();
    let additive = whole.iter().zip(&parts).all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(1.0));
    let mut reversed = all.clone();
    reversed.reverse();
    let permuted = encode(&c.encoder, &reversed)
        .unwrap()
        .iter()
        .zip(&whole)
        .all(|(x, y)| (x - y).abs() <= 1e-12 * x.abs().max(1.0));
    let f: Vec<f64> = (0..feats).map(|_| rng.random_range(-2.0..2.0)).collect();
    let e0 = encode(&c.encoder, &[(0, encoder_input(&f, 0, cfg.l_max).unwrap())]).unwrap();
    let e1 = encode(&c.encoder, &[(1, encoder_input(&f, 1, cfg.l_max).unwrap())]).unwrap();
    let id_gap = e0.iter().zip(&e1).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
    check(
        dims_ok && additive && permuted && id_gap > 1e-6,
        format!("dim constant {dims_ok}, additive {additive}, order-free {permuted}, slice-id effect {id_gap:.3e}"),
    )
}

// 10 ------------------------------------------------------------------------

const TINY: &str = "\
seed = 4
steps = 12
trace.duration_s = 3
slice.0.target_ms = 8
slice.1.target_ms = 16
controller.batch = 4
controller.hidden = 8
controller.d_enc = 4
compare.variants = controller, ncb, mcncb, unaware, oracle
compare.trailing_steps = 5
sweep.d_ms = 0.25, 4, 64
sweep.load_factors = 1, 2
";

fn determinism() -> Outcome {
    let root = tempfile::tempdir().unwrap();
    let conf = root.path().join("tiny.conf");
    std::fs::write(&conf, TINY).unwrap();
    let run = |out: &Path| -> Result<(), String> {
        for cmd in ["analyze", "sweep", "train", "evaluate", "compare"] {
            let status = Command::new(env!("CARGO_BIN_EXE_sleepctl"))
                .arg(cmd)
                .arg("--config")
                .arg(&conf)
                .arg("--out")
                .arg(out)
                .output()
                .map_err(|e| e.to_string())?;
            if !status.status.success() {
                return Err(format!("{cmd} failed: {}", String::from_utf8_lossy(&status.stderr)));
            }
        }
        Ok(())
    };
    let (a, b) = (root.path().join("a"), root.path().join("b"));
    if let Err(e) = run(&a).and_then(|_| run(&b)) {
        return Err(e);
    }
    let mut names: Vec<String> = std::fs::read_dir(&a)
        .unwrap()
        .filter_map(|e| e.ok()?.file_name().into_string().ok())
        .filter(|n| n.ends_with(".csv"))
        .collect();
    names.sort();
    let differing: Vec<&String> = names
        .iter()
        .filter(|n| std::fs::read(a.join(n)).ok() != std::fs::read(b.join(n)).ok())
        .collect();
    check(
        names.len() >= 7 && differing.is_empty(),
        format!("{} CSVs compared, differing: {differing:?}", names.len()),
    )
}

fn main() -> ExitCode {
    // `cargo test -- <filter>` passes filters; run only matching criteria.
    let filters: Vec<String> = std::env::args().skip(1).filter(|a| !a.starts_with('-')).collect();
    let criteria: [(&str, fn() -> Outcome); 10] = [
        ("asm_selection_table", asm_table),
        ("hard_deferral_bound", deferral_bound),
        ("pareto_sweep_trend", pareto_trend),
        ("oracle_comparability", oracle_comparability),
        ("controller_convergence", convergence),
        ("benchmark_ordering", benchmark_ordering),
        ("quantile_machinery", quantile_machinery),
        ("gradient_integrity", gradient_integrity),
        ("encoder_invariance", encoder_invariance),
        ("determinism", determinism),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !filters.is_empty() && !filters.iter().any(|x| name.contains(x.as_str())) {
            continue;
        }
        let start = Instant::now();
        let (tag, detail) = match f() {
            Ok(d) => ("PASS", d),
            Err(d) => {
                failed += 1;
                ("FAIL", d)
            }
        };
        println!("{tag} {:>2} {name}: {detail} [{:.1}s]", i + 1, start.elapsed().as_secs_f64());
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
