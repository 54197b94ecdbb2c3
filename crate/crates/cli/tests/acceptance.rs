//! Acceptance suite: one PASS/FAIL line per criterion, nonzero exit on any failure.

use std::fs;
use std::path::Path;
use std::process::Command;
use std::sync::OnceLock;
use std::time::Instant;

use nubflow::bspline::{KnotVector, SplineParams};
use nubflow::flow::{FlowModel, FlowSpec};
use nubflow::params::{check_sufficient_condition, generate_circle, generate_interval, Domain, ParamGenConfig, RawLogits};
use nubflow::targets::{mh_generate, MhConfig, ToyTarget};
use nubflow::trainer::{self, fm_loss, nll_loss, Metrics, TrainConfig, TrainState};
use nubflow::Error;
use nubflow_cli::{evaluate_grid, force_summary, mean_2se, time_passes, GridWhat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

type Outcome = Result<String, String>;

fn check(pass: bool, detail: String) -> Outcome {
    if pass {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn normal_logits(rng: &mut ChaCha8Rng, cfg: &ParamGenConfig, scale: f64) -> RawLogits {
    let flat: Vec<f64> = (0..cfg.n_logits())
        .map(|_| scale * rng.sample::<f64, _>(StandardNormal))
        .collect();
    RawLogits::from_flat(&flat, cfg).unwrap()
}

fn inversion() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let cfg = ParamGenConfig::new(4, 32, 1e-4, Domain::Interval);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let p = generate_interval(&normal_logits(&mut rng, &cfg, 2.0), &cfg).unwrap();
        let (lo, hi) = (p.t(p.r()), p.t(p.s()));
        for _ in 0..100 {
            let x = rng.random_range(lo..=hi);
            let back = p.invert(p.eval(x).unwrap()).map_err(|e| format!("invert failed at x = {x}: {e}"))?;
            worst = worst.max((back - x).abs());
        }
    }
    check(worst <= 1e-8, format!("1e5 pairs, max |f^-1(f(x)) - x| = {worst:.3e} (tol 1e-8)"))
}

/// Coefficients whose scaled slopes are drawn strictly inside `(l, u) / (k-1)`.
fn constrained_params(rng: &mut ChaCha8Rng, l: f64, u: f64) -> SplineParams<f64> {
    let k = rng.random_range(3..=5usize);
    let bins = rng.random_range(8..=32usize);
    let cfg = ParamGenConfig::new(k, bins, 1e-4, Domain::Interval);
    let base = generate_interval(&normal_logits(rng, &cfg, 1.5), &cfg).unwrap();
    let (r, s) = (base.r(), base.s());
    let knots: KnotVector<f64> = base.knots().clone();
    let km1 = (k - 1) as f64;
    let mut alpha = vec![rng.random_range(-1.0..1.0)];
    for j in r - k as i64 + 2..s {
        let q = loop {
            let q = rng.random_range(l / km1..u / km1);
            if q > l / km1 {
                break q;
            }
        };
        let prev = *alpha.last().unwrap();
        alpha.push(prev + q * (knots.at(j + k as i64 - 1) - knots.at(j)));
    }
    SplineParams::new(knots, alpha).unwrap()
}

fn sufficient_condition() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let trials = 10_000;
    let mut held = 0;
    let mut tightest = f64::INFINITY;
    for _ in 0..trials {
        let l = rng.random_range(0.05..0.95);
        let u = rng.random_range(1.05..4.0);
        let p = constrained_params(&mut rng, l, u);
        if !check_sufficient_condition(&p, l, u).pass {
            return Err("constructed parameters fail the coefficient condition".into());
        }
        let (lo, hi) = (p.t(p.r()), p.t(p.s()));
        let (mut min, mut max) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..=1000 {
            let d = p.eval_derivative(lo + (hi - lo) * i as f64 / 1000.0, 1).unwrap();
            min = min.min(d);
            max = max.max(d);
        }
        if min > l && max < u {
            held += 1;
        }
        tightest = tightest.min((min - l).min(u - max));
    }
    check(
        held == trials,
        format!("{held}/{trials} sets keep l < f' < u on a 1001-point grid (smallest margin {tightest:.3e})"),
    )
}

fn smoothness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut lines = Vec::new();
    let mut ok = true;
    for k in 3..=5usize {
        let cfg = ParamGenConfig::new(k, 16, 1e-4, Domain::Interval);
        let mut below = 0.0f64;
        let mut top = f64::INFINITY;
        for _ in 0..100 {
            let p = generate_interval(&normal_logits(&mut rng, &cfg, 1.0), &cfg).unwrap();
            for j in p.r() + 1..p.s() {
                let t = p.t(j);
                for m in 0..k {
                    let gap = (p.derivative_in_bin(j, t, m) - p.derivative_in_bin(j - 1, t, m)).abs();
                    if m + 1 < k {
                        below = below.max(gap);
                    } else {
                        top = top.min(gap);
                    }
                }
            }
        }
        ok &= below <= 1e-8 && top >= 1e-6;
        lines.push(format!("k={k}: max jump orders 0..{} = {below:.2e}, min jump order {} = {top:.2e}", k - 2, k - 1));
    }
    check(ok, lines.join("; "))
}

fn circle_ends() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    let cfg = ParamGenConfig::new(4, 32, 1e-4, Domain::Circle);
    let (mut d1, mut d2) = (0.0f64, 0.0f64);
    for _ in 0..1000 {
        let p = generate_circle(&normal_logits(&mut rng, &cfg, 1.0), &cfg).unwrap();
        let (a, b) = (p.t(p.r()), p.t(p.s()));
        let at = |x: f64, m: usize| p.eval_derivative(x, m).unwrap();
        d1 = d1.max((at(a, 1) - at(b, 1)).abs());
        d2 = d2.max((at(a, 2) - at(b, 2)).abs());
    }
    check(
        d1 <= 1e-10 && d2 <= 1e-8,
        format!("1e3 circle sets, max |f'(0)-f'(1)| = {d1:.2e} (tol 1e-10), max |f''(0)-f''(1)| = {d2:.2e} (tol 1e-8)"),
    )
}

/// Worst per-coordinate relative error of `grad` against a five-point stencil
/// of `value`; the denominator is floored at `floor`.
fn fd_worst(p0: &[f64], grad: &[f64], h: f64, floor: f64, value: impl Fn(&[f64]) -> f64) -> f64 {
    let mut worst = 0.0f64;
    for i in 0..p0.len() {
        let at = |d: f64| {
            let mut p = p0.to_vec();
            p[i] += d;
            value(&p)
        };
        let fd = (at(-2.0 * h) - 8.0 * at(-h) + 8.0 * at(h) - at(2.0 * h)) / (12.0 * h);
        worst = worst.max((grad[i] - fd).abs() / fd.abs().max(floor));
    }
    worst
}

fn gradients() -> Outcome {
    let target = ToyTarget::rings();
    let data = mh_generate(&target, &MhConfig { chains: 40, burn_in: 200, ..MhConfig::default() }, 15)
        .map_err(|e| e.to_string())?;
    let spec = FlowSpec {
        layers: 2,
        bins: 8,
        hidden: vec![16, 16],
        ..FlowSpec::toy(target.domains())
    };
    let mut model = FlowModel::new(spec, data.bbox.clone(), 15).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    let p0: Vec<f64> = model
        .params_flat()
        .iter()
        .map(|v| v + 0.3 * rng.sample::<f64, _>(StandardNormal))
        .collect();
    model.set_params_flat(&p0).unwrap();
    let batch = &data.points[..2 * 16];
    let with = |p: &[f64]| {
        let mut m = model.clone();
        m.set_params_flat(p).unwrap();
        m
    };
    const FLOOR: f64 = 1e-6;
    let g = nll_loss(&model, batch).map_err(|e| e.to_string())?.grad_flat();
    let nll = fd_worst(&p0, &g, 1e-4, FLOOR, |p| nll_loss(&with(p), batch).unwrap().value());
    let g = fm_loss(&model, batch, &target).map_err(|e| e.to_string())?.grad_flat();
    let fm = fd_worst(&p0, &g, 1e-4, FLOOR, |p| fm_loss(&with(p), batch, &target).unwrap().value());
    check(
        nll <= 1e-4 && fm <= 1e-3,
        format!(
            "{} params, worst relative error NLL {nll:.2e} (tol 1e-4), FM {fm:.2e} (tol 1e-3), floor {FLOOR:e}",
            p0.len()
        ),
    )
}

struct Desk {
    model: FlowModel,
    metrics: Metrics,
    seconds: f64,
}

fn desk_config() -> TrainConfig {
    TrainConfig {
        checkpoint_every: 10,
        seed: 1,
        lambda_fm: 0.0,
        ..TrainConfig::desk()
    }
}

fn desk() -> &'static Result<Desk, String> {
    static RUN: OnceLock<Result<Desk, String>> = OnceLock::new();
    RUN.get_or_init(|| {
        let start = Instant::now();
        let target = ToyTarget::rings();
        let data = mh_generate(&target, &MhConfig::default(), 1).map_err(|e| e.to_string())?;
        let cfg = desk_config();
        let mut model = FlowModel::new(FlowSpec::toy(target.domains()), data.bbox.clone(), cfg.seed).unwrap();
        let mut state = TrainState::new(&model);
        let metrics = trainer::train(&mut model, &data, &target, &cfg, &mut state, |_, _, _| Ok(()))
            .map_err(|e| format!("desk training failed: {e}"))?;
        Ok(Desk {
            model,
            metrics,
            seconds: start.elapsed().as_secs_f64(),
        })
    })
}

/// Radii of local maxima of the ring-averaged density above a fifth of its peak.
fn radial_ridges(model: &FlowModel) -> Result<Vec<f64>, String> {
    let g = evaluate_grid(model, GridWhat::Density, 200).map_err(|e| e.to_string())?;
    let (nb, rmax) = (65, 1.3);
    let mut sum = vec![0.0; nb];
    let mut count = vec![0usize; nb];
    for (i, v) in g.values.iter().enumerate() {
        let r = g.xs[i % g.res].hypot(g.ys[i / g.res]);
        let b = (r / rmax * nb as f64) as usize;
        if b < nb {
            sum[b] += v[0];
            count[b] += 1;
        }
    }
    let prof: Vec<f64> = sum.iter().zip(&count).map(|(s, &c)| if c > 0 { s / c as f64 } else { 0.0 }).collect();
    let top = prof.iter().copied().fold(0.0, f64::max);
    Ok((1..nb - 1)
        .filter(|&i| prof[i] > prof[i - 1] && prof[i] >= prof[i + 1] && prof[i] > 0.2 * top)
        .map(|i| (i as f64 + 0.5) * rmax / nb as f64)
        .collect())
}

fn force_grid() -> Outcome {
    let d = desk().as_ref()?;
    let ridges = radial_ridges(&d.model)?;
    let g = evaluate_grid(&d.model, GridWhat::Force, 100).map_err(|e| e.to_string())?;
    let (max, singular) = force_summary(&g);
    let nonfinite = g.values.iter().filter(|v| v.iter().any(|f| !f.is_finite())).count();
    let grid_ok = singular == 0 && nonfinite == 0 && max.is_finite();

    let target = ToyTarget::rings();
    let data = mh_generate(&target, &MhConfig { chains: 50, burn_in: 10, ..MhConfig::default() }, 2)
        .map_err(|e| e.to_string())?;
    let spec = FlowSpec {
        k: 3,
        ..FlowSpec::toy(target.domains())
    };
    let mut k3 = FlowModel::new(spec, data.bbox.clone(), 1).unwrap();
    let cfg = TrainConfig {
        epochs: 1,
        lambda_fm: 1e-3,
        ..desk_config()
    };
    let mut state = TrainState::new(&k3);
    let refused = match trainer::train(&mut k3, &data, &target, &cfg, &mut state, |_, _, _| Ok(())) {
        Err(e) => matches!(e.root(), Error::Smoothness { .. }),
        Ok(_) => false,
    };
    check(
        grid_ok && refused,
        format!(
            "100x100 force grid: {nonfinite} non-finite, {singular} singular cells, max norm {max:.3e}; k=3 FM training refused with smoothness error: {refused}; density ridges at r = {:.2?}",
            ridges
        ),
    )
}

fn training_progress() -> Outcome {
    let d = desk().as_ref()?;
    let nll = d.metrics.test_nll().ok_or("no evaluation recorded")?;
    let rkld: Vec<f64> = d.metrics.trace.iter().filter_map(|r| r.rkld).collect();
    if rkld.len() != 20 {
        return Err(format!("expected 20 rKLD checkpoints, got {}", rkld.len()));
    }
    let blocks: Vec<f64> = rkld.chunks(4).map(|c| c.iter().sum::<f64>() / 4.0).collect();
    let decreasing = blocks.windows(2).all(|w| w[1] < w[0]);
    let shown: Vec<String> = blocks.iter().map(|b| format!("{b:.4}")).collect();
    check(
        nll <= -0.5 && decreasing,
        format!(
            "test NLL {nll:.4} (need <= -0.5 vs identity 0.0); rKLD block means [{}] strictly decreasing: {decreasing}; desk run {:.0} s",
            shown.join(", "),
            d.seconds
        ),
    )
}

fn runtime() -> Outcome {
    let d = desk().as_ref()?;
    let t = time_passes(&d.model, 10_000, 5, 7).map_err(|e| e.to_string())?;
    let (f, fe) = mean_2se(&t.forward);
    let (r, re) = mean_2se(&t.reverse);
    let ratio = r / f;
    check(
        ratio <= 4.0,
        format!("batch 10000: forward {f:.5} +- {fe:.5} ms, reverse {r:.5} +- {re:.5} ms per sample, ratio {ratio:.2} (tol 4)"),
    )
}

fn run_cli(dir: &Path, args: &[&str]) -> Result<(), String> {
    let out = Command::new(env!("CARGO_BIN_EXE_nubflow"))
        .current_dir(dir)
        .args(args)
        .output()
        .map_err(|e| e.to_string())?;
    if out.status.success() {
        Ok(())
    } else {
        Err(format!("{args:?}: {}", String::from_utf8_lossy(&out.stderr).trim()))
    }
}

fn determinism() -> Outcome {
    let dir = tempfile::tempdir().map_err(|e| e.to_string())?;
    let d = dir.path();
    fs::write(d.join("c.cfg"), "profile = desk\nepochs = 3\nbatch_size = 200\ncheckpoint_every = 1\nrkld_samples = 200\nseed = 4\n")
        .map_err(|e| e.to_string())?;
    for run in ["a", "b"] {
        let data = format!("{run}.ds");
        run_cli(d, &["gen-data", "--target", "periodic", "--out", &data, "--seed", "9", "--chains", "200", "--burn-in", "100"])?;
        run_cli(
            d,
            &["train", "--data", &data, "--config", "c.cfg", "--out", run, "--fm", "--layers", "2", "--bins", "8", "--hidden", "16"],
        )?;
    }
    let same = |a: &str, b: &str| fs::read(d.join(a)).ok().is_some_and(|x| Some(x) == fs::read(d.join(b)).ok());
    let data_same = same("a.ds", "b.ds");
    let ckpt_same = same("a/final.ckpt", "b/final.ckpt");
    check(
        data_same && ckpt_same,
        format!("byte-identical dataset: {data_same}, final checkpoint: {ckpt_same}"),
    )
}

fn main() {
    let criteria: [(&str, fn() -> Outcome); 9] = [
        ("inversion exactness", inversion),
        ("derivative bounds from coefficient slopes", sufficient_condition),
        ("smoothness class C^(k-2)", smoothness),
        ("periodic end derivatives", circle_ends),
        ("NLL and FM gradients", gradients),
        ("force grid validity", force_grid),
        ("training progress", training_progress),
        ("reverse/forward runtime", runtime),
        ("determinism", determinism),
    ];
    // optional criterion numbers select a subset
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let mut failed = 0;
    let mut ran = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        if !only.is_empty() && !only.contains(&(i + 1)) {
            continue;
        }
        ran += 1;
        let start = Instant::now();
        let result = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = start.elapsed().as_secs_f64();
        match result {
            Ok(detail) => println!("PASS {} {name}: {detail} [{secs:.1} s]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {} {name}: {detail} [{secs:.1} s]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", ran - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
