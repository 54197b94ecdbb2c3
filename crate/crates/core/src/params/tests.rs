use super::*;
use crate::autodiff::{Tape, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

fn normal_logits(rng: &mut ChaCha8Rng, cfg: &ParamGenConfig) -> RawLogits<f64> {
    RawLogits {
        dt: (0..cfg.n_dt()).map(|_| rng.sample(StandardNormal)).collect(),
        da: (0..cfg.n_da()).map(|_| rng.sample(StandardNormal)).collect(),
    }
}

fn random_logits(rng: &mut ChaCha8Rng, cfg: &ParamGenConfig, scale: f64) -> RawLogits<f64> {
    RawLogits {
        dt: (0..cfg.n_dt()).map(|_| rng.random_range(-scale..scale)).collect(),
        da: (0..cfg.n_da()).map(|_| rng.random_range(-scale..scale)).collect(),
    }
}

#[test]
fn zero_logits_give_uniform_knots() {
    let cfg = ParamGenConfig::new(4, 8, 1e-4, Domain::Interval);
    let p = generate_interval(&RawLogits::<f64>::zeros(&cfg), &cfg).unwrap();
    let t = p.knots().values();
    for w in t.windows(2) {
        assert!((w[1] - w[0] - 1.0 / 8.0).abs() < 1e-14);
    }
    assert_eq!(p.t(0), 0.0);
    assert_eq!(p.t(8), 1.0);
    // interior coefficient spacings are equal
    let a = p.alpha();
    let gaps: Vec<f64> = a.windows(2).map(|w| w[1] - w[0]).collect();
    for g in &gaps {
        assert!((g - gaps[0]).abs() < 1e-12);
    }
}

#[test]
fn interval_params_are_valid_and_surjective() {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    for trial in 0..500 {
        let k = 3 + trial % 4;
        let bins = rng.random_range(k..40);
        let cfg = ParamGenConfig::new(k, bins, 1e-4, Domain::Interval);
        let raw = random_logits(&mut rng, &cfg, 6.0);
        let p = generate_interval(&raw, &cfg).unwrap();
        let t = p.knots().values();
        let min_gap = t.windows(2).map(|w| w[1] - w[0]).fold(f64::INFINITY, f64::min);
        assert!(min_gap >= cfg.eps_t * (1.0 - 1e-12), "trial {trial}: {min_gap}");
        assert!(p.is_monotone());
        assert_eq!(p.t(0), 0.0);
        assert_eq!(p.t(bins as i64), 1.0);
        assert!(p.eval(0.0).unwrap().abs() < 1e-12);
        assert!((p.eval(1.0).unwrap() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn generated_params_have_positive_derivative() {
    let mut rng = ChaCha8Rng::seed_from_u64(32);
    for domain in [Domain::Interval, Domain::Circle] {
        for _ in 0..20 {
            let cfg = ParamGenConfig::new(4, 32, 1e-4, domain);
            let p = generate(&random_logits(&mut rng, &cfg, 5.0), &cfg).unwrap();
            let (l, _) = implied_bounds(&p);
            assert!(l > 0.0);
            for i in 0..10_000 {
                let x = i as f64 / 9_999.0;
                assert!(p.eval_derivative(x, 1).unwrap() > 0.0);
            }
        }
    }
}

#[test]
fn config_violations_are_argument_errors() {
    let mut cfg = ParamGenConfig::new(4, 8, 1e-4, Domain::Interval);
    cfg.eps_t = 0.2;
    assert!(matches!(
        generate_interval(&RawLogits::<f64>::zeros(&cfg), &cfg),
        Err(Error::Argument(_))
    ));
    let cfg = ParamGenConfig::new(4, 3, 1e-4, Domain::Interval);
    assert!(cfg.validate().is_err());
    let cfg = ParamGenConfig::new(2, 8, 1e-4, Domain::Interval);
    assert_eq!(cfg.validate(), Err(Error::UnsupportedOrder(2)));
    let cfg = ParamGenConfig::new(4, 8, 1e-4, Domain::Interval);
    let mut raw = RawLogits::<f64>::zeros(&cfg);
    raw.da.pop();
    assert!(generate_interval(&raw, &cfg).is_err());
    let mut raw = RawLogits::<f64>::zeros(&cfg);
    raw.dt[0] = f64::NAN;
    assert!(generate_interval(&raw, &cfg).is_err());
}

#[test]
fn generation_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(33);
    let cfg = ParamGenConfig::new(4, 16, 1e-4, Domain::Circle);
    let raw = random_logits(&mut rng, &cfg, 3.0);
    let a = generate(&raw, &cfg).unwrap();
    let b = generate(&raw, &cfg).unwrap();
    assert_eq!(a, b);
}

#[test]
fn circle_zero_logits_are_identity_like() {
    let cfg = ParamGenConfig::new(4, 8, 1e-4, Domain::Circle);
    let p = generate_circle(&RawLogits::<f64>::zeros(&cfg), &cfg).unwrap();
    for w in p.knots().values().windows(2) {
        assert!((w[1] - w[0] - 0.125).abs() < 1e-14);
    }
    assert!((p.eval_derivative(0.0, 1).unwrap() - 1.0).abs() < 1e-12);
    assert!((p.eval_derivative(1.0, 1).unwrap() - 1.0).abs() < 1e-12);
}

#[test]
fn circle_tying_is_exact() {
    let mut rng = ChaCha8Rng::seed_from_u64(34);
    for k in 3..=6 {
        for _ in 0..50 {
            let bins = rng.random_range(k..20);
            let cfg = ParamGenConfig::new(k, bins, 1e-4, Domain::Circle);
            let p = generate_circle(&random_logits(&mut rng, &cfg, 4.0), &cfg).unwrap();
            let (r, s) = (p.r(), p.s());
            let k = k as i64;
            for i in 1..k {
                assert_eq!(p.a(s - i), 1.0 + p.a(r - i));
            }
            for j in -k + 2..=k - 2 {
                assert_eq!(p.t(s + j), 1.0 + p.t(r + j));
            }
        }
    }
}

#[test]
fn circle_end_derivatives_match() {
    let mut rng = ChaCha8Rng::seed_from_u64(35);
    for _ in 0..1000 {
        let cfg = ParamGenConfig::new(4, 32, 1e-4, Domain::Circle);
        let p = generate_circle(&normal_logits(&mut rng, &cfg), &cfg).unwrap();
        let d1 = (p.eval_derivative(0.0, 1).unwrap() - p.eval_derivative(1.0, 1).unwrap()).abs();
        let d2 = (p.eval_derivative(0.0, 2).unwrap() - p.eval_derivative(1.0, 2).unwrap()).abs();
        assert!(d1 <= 1e-10, "{d1}");
        assert!(d2 <= 1e-8, "{d2}");
    }
}

/// `floor(x) + f(x - floor(x))`
fn periodic_extension(p: &SplineParams<f64>, x: f64) -> f64 {
    let w = x.floor();
    w + p.eval(x - w).unwrap()
}

#[test]
fn circle_periodic_extension_is_continuous() {
    let mut rng = ChaCha8Rng::seed_from_u64(36);
    for _ in 0..100 {
        let cfg = ParamGenConfig::new(4, 16, 1e-4, Domain::Circle);
        let p = generate_circle(&random_logits(&mut rng, &cfg, 4.0), &cfg).unwrap();
        let eps = 1e-7;
        let wrap = periodic_extension(&p, 1.0 + eps) - periodic_extension(&p, eps);
        assert!((wrap - 1.0).abs() < 1e-10);
        let slope = p.eval_derivative(1.0, 1).unwrap();
        let jump = periodic_extension(&p, 1.0 + eps) - periodic_extension(&p, 1.0 - eps);
        assert!((jump - 2.0 * eps * slope).abs() < 1e-10);
    }
}

#[test]
fn sufficient_condition_examples() {
    let cfg = ParamGenConfig::new(4, 8, 1e-4, Domain::Interval);
    let id = generate_interval(&RawLogits::<f64>::zeros(&cfg), &cfg).unwrap();
    let (l, u) = implied_bounds(&id);
    assert!((l - 1.0).abs() < 1e-12 && (u - 1.0).abs() < 1e-12);
    assert!(check_sufficient_condition(&id, 0.5, 2.0).pass);

    let mut rng = ChaCha8Rng::seed_from_u64(37);
    for _ in 0..100 {
        let p = generate_interval(&random_logits(&mut rng, &cfg, 5.0), &cfg).unwrap();
        let (l, u) = implied_bounds(&p);
        assert!(l > 0.0);
        assert!(check_sufficient_condition(&p, l * 0.99, u * 1.01).pass);
        for i in 0..10_000 {
            let d = p.eval_derivative(i as f64 / 9_999.0, 1).unwrap();
            assert!(d >= l * (1.0 - 1e-12) && d <= u * (1.0 + 1e-12));
        }
    }

    let mut alpha = id.alpha().to_vec();
    alpha[5] = alpha[4];
    let flat = SplineParams::new(id.knots().clone(), alpha).unwrap();
    let report = check_sufficient_condition(&flat, 1e-9, 2.0);
    assert!(!report.pass);
    // α at position 5 is index r-k+1+5 = 2
    assert_eq!(report.violations, vec![2]);
}

#[test]
fn implied_bounds_hand_example() {
    // k = 3, r = 0, s = 3: knots t_{-2..4}, coefficients α_{-2..2}
    let t = KnotVector::new(3, 0, 3, vec![-0.5, -0.2, 0.0, 0.4, 0.5, 1.0, 1.3, 1.6]).unwrap();
    let p = SplineParams::new(t, vec![-0.3, -0.1, 0.2, 0.6, 1.1]).unwrap();
    // j = -1: (−0.1 + 0.3)/(t_1 − t_{−1}) = 0.2/0.6
    // j =  0: (0.2 + 0.1)/(t_2 − t_0)    = 0.3/0.5
    // j =  1: (0.6 − 0.2)/(t_3 − t_1)    = 0.4/0.6
    // j =  2: (1.1 − 0.6)/(t_4 − t_2)    = 0.5/0.8
    let slopes = [0.2 / 0.6, 0.3 / 0.5, 0.4 / 0.6, 0.5 / 0.8];
    let (l, u) = implied_bounds(&p);
    assert!((l - 2.0 * slopes[0]).abs() < 1e-14);
    assert!((u - 2.0 * slopes[2]).abs() < 1e-14);
}

#[test]
fn generation_gradients_match_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(38);
    for domain in [Domain::Interval, Domain::Circle] {
        let cfg = ParamGenConfig::new(4, 6, 1e-4, domain);
        let raw = random_logits(&mut rng, &cfg, 2.0);
        let flat: Vec<f64> = raw.dt.iter().chain(&raw.da).copied().collect();
        let outputs = |v: &[f64]| -> Vec<f64> {
            let p = generate(&RawLogits::from_flat(v, &cfg).unwrap(), &cfg).unwrap();
            p.knots().values().iter().chain(p.alpha()).copied().collect()
        };
        let tape = Tape::new();
        let vars: Vec<Var> = tape.vars(&flat);
        let p = generate(&RawLogits::from_flat(&vars, &cfg).unwrap(), &cfg).unwrap();
        let outs: Vec<Var> = p.knots().values().iter().chain(p.alpha()).copied().collect();
        let base = outputs(&flat);
        for (o, out) in outs.iter().enumerate() {
            assert_eq!(out.value(), base[o]);
            let g = tape.gradient(*out, &vars).unwrap();
            for i in 0..flat.len() {
                let h = 1e-6;
                let mut plus = flat.clone();
                let mut minus = flat.clone();
                plus[i] += h;
                minus[i] -= h;
                let fd = (outputs(&plus)[o] - outputs(&minus)[o]) / (2.0 * h);
                assert!(
                    (g[i] - fd).abs() <= 1e-5 * fd.abs().max(1e-4),
                    "{domain:?} output {o} logit {i}: {} vs {fd}",
                    g[i]
                );
            }
        }
    }
}
