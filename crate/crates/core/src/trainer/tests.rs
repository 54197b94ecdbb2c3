use super::*;
use crate::autodiff::Activation;
use crate::flow::FlowSpec;
use crate::params::Domain;
use crate::targets::{mh_generate, MhConfig, TargetKind};
use rand::Rng;

fn small_spec(k: usize) -> FlowSpec {
    FlowSpec {
        domains: vec![Domain::Interval; 2],
        layers: 2,
        k,
        bins: 8,
        eps: 1e-4,
        hidden: vec![8],
        activation: Activation::Sin,
    }
}

fn perturbed(mut m: FlowModel, seed: u64, scale: f64) -> FlowModel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let p: Vec<f64> = m.params_flat().iter().map(|v| v + rng.random_range(-scale..scale)).collect();
    m.set_params_flat(&p).unwrap();
    m
}

fn small_data(kind: TargetKind, chains: usize) -> Dataset {
    let cfg = MhConfig {
        chains,
        burn_in: 100,
        ..MhConfig::default()
    };
    mh_generate(&ToyTarget::by_kind(kind), &cfg, 7).unwrap()
}

fn model_for(data: &Dataset, spec: FlowSpec) -> FlowModel {
    FlowModel::new(spec, data.bbox.clone(), 3).unwrap()
}

fn rows(data: &Dataset, n: usize) -> Vec<f64> {
    data.points[..n * data.dim].to_vec()
}

#[test]
fn zero_gradient_leaves_parameters_unchanged() {
    let mut p = vec![1.0, -2.0, 0.5];
    let mut s = AdamState::new(3);
    for _ in 0..10 {
        adam_step(&mut p, &[0.0; 3], &mut s, 0.1).unwrap();
    }
    assert_eq!(p, vec![1.0, -2.0, 0.5]);
    assert_eq!(s.t, 10);
    assert!(adam_step(&mut p, &[0.0; 2], &mut s, 0.1).is_err());
}

#[test]
fn adam_on_a_quadratic() {
    // independent scalar recurrence
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 0.1);
    let (mut w, mut m, mut v) = (1.0f64, 0.0, 0.0);
    let mut p = vec![1.0];
    let mut s = AdamState::new(1);
    let mut path = vec![1.0f64];
    for t in 1..=50 {
        let g = 2.0 * w;
        m = b1 * m + (1.0 - b1) * g;
        v = b2 * v + (1.0 - b2) * g * g;
        w -= lr * (m / (1.0 - b1.powi(t))) / ((v / (1.0 - b2.powi(t))).sqrt() + eps);
        let g = [2.0 * p[0]];
        adam_step(&mut p, &g, &mut s, lr).unwrap();
        assert!((p[0] - w).abs() < 1e-15);
        path.push(p[0]);
    }
    // |w| falls monotonically until momentum carries it across zero at
    // step 12; afterwards it oscillates with a shrinking envelope
    let cross = path.iter().position(|w| *w < 0.0).unwrap();
    assert_eq!(cross, 12);
    for i in 1..cross {
        assert!(path[i].abs() < path[i - 1].abs());
    }
    let envelope = |r: std::ops::Range<usize>| path[r].iter().fold(0.0f64, |a, w| a.max(w.abs()));
    assert!(envelope(41..51) < envelope(11..41));
    assert!(path[50].abs() < 0.01);
}

#[test]
fn identity_model_has_zero_nll() {
    let data = small_data(TargetKind::Rings, 20);
    let m = model_for(&data, small_spec(4));
    // the identity spline reproduces f' = 1 up to roundoff
    let l = nll_loss(&m, &rows(&data, 50)).unwrap();
    assert!(l.value().abs() < 1e-14, "{}", l.value());
    assert!(test_nll(&m, &data.points).unwrap().abs() < 1e-14);
}

#[test]
fn duplicated_batch_gives_same_loss() {
    let data = small_data(TargetKind::Rings, 20);
    let m = perturbed(model_for(&data, small_spec(4)), 1, 0.3);
    let b = rows(&data, 30);
    let twice: Vec<f64> = b.iter().chain(&b).copied().collect();
    let (a, c) = (nll_loss(&m, &b).unwrap(), nll_loss(&m, &twice).unwrap());
    assert!((a.value() - c.value()).abs() <= 1e-15 * a.value().abs().max(1.0));
    for (x, y) in a.grad_flat().iter().zip(c.grad_flat()) {
        assert!((x - y).abs() <= 1e-13 * x.abs().max(1.0));
    }
}

#[test]
fn identity_fm_loss_is_mean_squared_target_force() {
    let data = small_data(TargetKind::Rings, 20);
    let m = model_for(&data, small_spec(4));
    let b = rows(&data, 40);
    let t = ToyTarget::rings();
    let expected: f64 = b
        .chunks_exact(2)
        .map(|x| {
            let f = t.target_force(x).unwrap();
            f[0] * f[0] + f[1] * f[1]
        })
        .sum::<f64>()
        / 40.0;
    let l = fm_loss(&m, &b, &t).unwrap();
    assert!((l.value() - expected).abs() <= 1e-12 * expected);
    let fme = force_matching_error(&m, &b, &t).unwrap();
    assert!((fme - expected).abs() <= 1e-12 * expected);
}

#[test]
fn fm_loss_vanishes_when_forces_agree() {
    // a uniform target has zero force everywhere
    let t = ToyTarget::new(TargetKind::Rings, [1.0; 4], [0.0; 4], 1e6).unwrap();
    let data = small_data(TargetKind::Rings, 20);
    let m = model_for(&data, small_spec(4));
    let l = fm_loss(&m, &rows(&data, 20), &t).unwrap();
    assert!(l.value() < 1e-20, "{}", l.value());
    assert!(l.grad_flat().iter().all(|g| g.abs() < 1e-9));
}

#[test]
fn combined_loss_limits() {
    let data = small_data(TargetKind::Rings, 20);
    let m = perturbed(model_for(&data, small_spec(4)), 2, 0.3);
    let t = ToyTarget::rings();
    let b = rows(&data, 25);
    let nll = nll_loss(&m, &b).unwrap();
    let fm = fm_loss(&m, &b, &t).unwrap();
    assert_eq!(combined_loss(&m, &b, &t, 0.0).unwrap(), nll);
    let one = combined_loss(&m, &b, &t, 1.0).unwrap();
    assert_eq!(one.value(), fm.value());
    let lam = 0.001;
    let mix = combined_loss(&m, &b, &t, lam).unwrap();
    let (n, f) = (mix.terms.nll, mix.terms.fm.unwrap());
    assert_eq!(n, nll.value());
    assert!((f - fm.value()).abs() <= 1e-13 * f);
    let expected = (1.0 - lam) * n + lam * f;
    assert!((mix.value() - expected).abs() <= f64::EPSILON * expected.abs());
    assert!(combined_loss(&m, &b, &t, 1.5).is_err());
}

#[test]
fn fm_on_quadratic_splines_is_a_smoothness_error() {
    let data = small_data(TargetKind::Rings, 20);
    let m = model_for(&data, small_spec(3));
    assert_eq!(
        fm_loss(&m, &rows(&data, 10), &ToyTarget::rings()).unwrap_err(),
        Error::Smoothness {
            requested: 2,
            available: 1
        }
    );
    let mut cfg = TrainConfig::desk();
    cfg.epochs = 1;
    let mut m = m;
    let mut st = TrainState::new(&m);
    let err = train(&mut m, &data, &ToyTarget::rings(), &cfg, &mut st, |_, _, _| Ok(())).unwrap_err();
    assert!(matches!(err, Error::Smoothness { .. }));
    // NLL-only training is fine
    cfg.lambda_fm = 0.0;
    train(&mut m, &data, &ToyTarget::rings(), &cfg, &mut st, |_, _, _| Ok(())).unwrap();
}

#[test]
fn fm_gradient_matches_finite_differences_of_the_loss() {
    let data = small_data(TargetKind::Rings, 20);
    let m = perturbed(model_for(&data, small_spec(4)), 4, 0.4);
    let t = ToyTarget::rings();
    let b = rows(&data, 6);
    let g = fm_loss(&m, &b, &t).unwrap().grad_flat();
    let p0 = m.params_flat();
    let value = |p: &[f64]| {
        let mut mm = m.clone();
        mm.set_params_flat(p).unwrap();
        fm_loss(&mm, &b, &t).unwrap().value()
    };
    let mut worst = 0.0f64;
    for i in 0..p0.len() {
        let h = 1e-6;
        let mut a = p0.clone();
        let mut c = p0.clone();
        a[i] += h;
        c[i] -= h;
        let fd = (value(&a) - value(&c)) / (2.0 * h);
        let err = (g[i] - fd).abs() / fd.abs().max(1e-2);
        worst = worst.max(err);
    }
    assert!(worst <= 1e-3, "{worst}");
}

#[test]
fn zero_epochs_leave_the_model_unchanged() {
    let data = small_data(TargetKind::Rings, 50);
    let mut m = model_for(&data, small_spec(4));
    let before = m.clone();
    let mut cfg = TrainConfig::desk();
    cfg.epochs = 0;
    let mut st = TrainState::new(&m);
    let metrics = train(&mut m, &data, &ToyTarget::rings(), &cfg, &mut st, |_, _, _| Ok(())).unwrap();
    assert_eq!(m, before);
    assert!(metrics.trace.is_empty());
}

fn quick_config() -> TrainConfig {
    TrainConfig {
        epochs: 4,
        batch_size: 100,
        learning_rate: 5e-3,
        checkpoint_every: 2,
        rkld_samples: 200,
        seed: 11,
        ..TrainConfig::desk()
    }
}

#[test]
fn training_is_reproducible_and_resumable() {
    let data = small_data(TargetKind::Rings, 100);
    let t = ToyTarget::rings();
    let cfg = quick_config();
    let run = || {
        let mut m = model_for(&data, small_spec(4));
        let mut st = TrainState::new(&m);
        let mut checkpoints = Vec::new();
        let metrics = train(&mut m, &data, &t, &cfg, &mut st, |m, st, r| {
            checkpoints.push((m.clone(), st.clone(), r.epoch));
            Ok(())
        })
        .unwrap();
        (m, metrics, checkpoints)
    };
    let (m1, t1, c1) = run();
    let (m2, t2, _) = run();
    assert_eq!(m1.params_flat(), m2.params_flat());
    assert_eq!(t1, t2);
    assert_eq!(c1.iter().map(|c| c.2).collect::<Vec<_>>(), vec![2, 4]);
    assert_ne!(m1.params_flat(), model_for(&data, small_spec(4)).params_flat());

    // resume from the epoch-2 checkpoint
    let (mut m3, mut st3, _) = c1[0].clone();
    let t3 = train(&mut m3, &data, &t, &cfg, &mut st3, |_, _, _| Ok(())).unwrap();
    assert_eq!(m3.params_flat(), m1.params_flat());
    assert_eq!(t3.trace[..], t1.trace[2..]);
}

#[test]
fn fm_training_runs_on_periodic_data() {
    let data = small_data(TargetKind::PeriodicRings, 100);
    let spec = FlowSpec {
        domains: vec![Domain::Circle; 2],
        ..small_spec(4)
    };
    let mut m = model_for(&data, spec);
    let cfg = TrainConfig {
        lambda_fm: 0.5,
        epochs: 2,
        ..quick_config()
    };
    let mut st = TrainState::new(&m);
    let metrics = train(&mut m, &data, &ToyTarget::periodic(), &cfg, &mut st, |_, _, _| Ok(())).unwrap();
    let last = metrics.last.unwrap();
    assert!(last.fme.unwrap() >= 0.0 && last.nll.is_finite() && last.rkld.is_finite());
}

#[test]
fn diverging_run_reports_epoch_and_batch() {
    let data = small_data(TargetKind::Rings, 100);
    let mut m = model_for(&data, small_spec(4));
    let cfg = TrainConfig {
        learning_rate: f64::MAX,
        ..quick_config()
    };
    let mut st = TrainState::new(&m);
    match train(&mut m, &data, &ToyTarget::rings(), &cfg, &mut st, |_, _, _| Ok(())) {
        Err(Error::NonFiniteLoss { epoch, batch, param_norm }) => {
            assert_eq!((epoch, batch), (0, 1));
            assert!(param_norm > 1e299);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn identity_evaluation() {
    let data = small_data(TargetKind::Rings, 50);
    let m = model_for(&data, small_spec(4));
    let t = ToyTarget::rings();
    let test = rows(&data, 100);
    let ev = evaluate(&m, &test, &t, 500, 1).unwrap();
    assert!(ev.nll.abs() < 1e-14);
    let mean_sq = test
        .chunks_exact(2)
        .map(|x| t.target_force(x).unwrap().iter().map(|f| f * f).sum::<f64>())
        .sum::<f64>()
        / 100.0;
    assert!((ev.fme.unwrap() - mean_sq).abs() <= 1e-12 * mean_sq);

    // uniform target with zero force: NLL 0 and FME 0
    let flat = ToyTarget::new(TargetKind::Rings, [1.0; 4], [0.0; 4], 1e6).unwrap();
    let ev = evaluate(&m, &test, &flat, 500, 1).unwrap();
    assert!(ev.nll.abs() < 1e-14);
    assert!(ev.fme.unwrap() < 1e-20);
    // the identity model is uniform on the box, so rkld = -log(box area) - log p* ~ const
    assert!(ev.rkld.is_finite());
}

#[test]
fn split_is_deterministic_and_sized() {
    let data = small_data(TargetKind::Rings, 100);
    let cfg = TrainConfig {
        max_samples: 500,
        ..quick_config()
    };
    let s = split(&data, &cfg);
    assert_eq!((s.train.len() / 2, s.test.len() / 2), (450, 50));
    assert_eq!(s, split(&data, &cfg));
    let mut all: Vec<[u64; 2]> = s
        .train
        .chunks(2)
        .chain(s.test.chunks(2))
        .map(|r| [r[0].to_bits(), r[1].to_bits()])
        .collect();
    all.sort();
    let mut orig: Vec<[u64; 2]> = data.points[..1000].chunks(2).map(|r| [r[0].to_bits(), r[1].to_bits()]).collect();
    orig.sort();
    assert_eq!(all, orig);
}

#[test]
fn config_validation() {
    assert!(TrainConfig::full().validate().is_ok());
    assert_eq!(TrainConfig::by_profile("desk").unwrap().epochs, 200);
    assert!(TrainConfig::by_profile("huge").is_err());
    for bad in [
        TrainConfig {
            lambda_fm: 1.5,
            ..TrainConfig::full()
        },
        TrainConfig {
            train_fraction: 1.0,
            ..TrainConfig::full()
        },
        TrainConfig {
            batch_size: 0,
            ..TrainConfig::full()
        },
    ] {
        assert!(bad.validate().is_err());
    }
    let c = TrainConfig {
        lr_decay: 0.7,
        ..TrainConfig::full()
    };
    assert!((c.lr_at(2) - 5e-4 * 0.49).abs() < 1e-18);
}
