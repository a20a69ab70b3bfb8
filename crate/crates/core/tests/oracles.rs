mod common;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tvcsl::basis::BasisSpec;
use tvcsl::coxtv::{gradient, hessian, log_partial_likelihood};
use tvcsl::estimators::{
    second_stage_fit, second_stage_problem, tvcsl_fit, CrossFitPlan, EstimatorConfig, PropensityCurve,
    SecondStageSubject,
};
use tvcsl::heart::{ingest_heart, HEART_SHA256};
use tvcsl::simulate::{
    generate, generate_from_covariates, sample_event_time, AdoptionLaw, CensorLaw, HazardSpec, LogHazard, SimConfig,
};
use tvcsl::{newton_fit, Dataset, NewtonConfig, PartialLikelihoodProblem, SubjectRecord};

use common::{brute_force_log_pl, central_difference, episodes_with_treatment, naive_cox_fit, random_subjects};

fn heart_path() -> std::path::PathBuf {
    std::path::Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/stanford_heart.csv")
}

#[test]
fn likelihood_matches_term_by_term_sum() {
    for seed in 0..200u64 {
        let n = 2 + (seed as usize % 9);
        let subjects = random_subjects(seed, n, 2, seed % 2 == 0);
        let rows = episodes_with_treatment(&subjects, seed);
        let prob = PartialLikelihoodProblem::from_episodes(&rows).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let beta: Vec<f64> = (0..3).map(|_| rng.random_range(-2.0..2.0)).collect();
        let got = log_partial_likelihood(&prob, &beta).unwrap();
        let want = brute_force_log_pl(&rows, &beta, n);
        assert!((got - want).abs() < 1e-10, "seed {seed}: {got} vs {want}");
    }
}

#[test]
fn derivatives_match_finite_differences() {
    for seed in 0..50u64 {
        let n = 3 + (seed as usize % 8);
        let subjects = random_subjects(seed, n, 2, seed % 3 == 0);
        let rows = episodes_with_treatment(&subjects, seed);
        let prob = PartialLikelihoodProblem::from_episodes(&rows).unwrap();
        let beta = vec![0.3, -0.4, 0.2];
        let g = gradient(&prob, &beta).unwrap();
        let fd = central_difference(|b| log_partial_likelihood(&prob, b).unwrap(), &beta, 1e-5);
        for (a, b) in g.iter().zip(&fd) {
            assert!((a - b).abs() <= 1e-6 * a.abs().max(1e-3), "seed {seed}: {a} vs {b}");
        }
        let h = hessian(&prob, &beta).unwrap();
        for j in 0..3 {
            let col = central_difference(|b| gradient(&prob, b).unwrap()[j], &beta, 1e-5);
            for k in 0..3 {
                assert!((h[(j, k)] - col[k]).abs() <= 1e-6 * h[(j, k)].abs().max(1e-3));
            }
        }
        let eig = h.symmetric_eigen().eigenvalues;
        assert!(eig.iter().all(|&l| l <= 1e-10), "seed {seed}: {eig:?}");
    }
}

#[test]
fn fixed_adoption_reduces_to_ordinary_cox() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let subjects: Vec<SubjectRecord> = (0..120)
        .map(|i| SubjectRecord {
            id: i + 1,
            x: vec![rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0)],
            adoption_time: if rng.random_bool(0.5) { 0.0 } else { f64::INFINITY },
            observed_time: rng.random_range(0.1..5.0),
            event: rng.random_bool(0.8),
        })
        .collect();
    let rows = episodes_with_treatment(&subjects, 0)
        .into_iter()
        .map(|mut r| {
            r.offset = 0.0;
            r
        })
        .collect::<Vec<_>>();
    assert_eq!(rows.len(), subjects.len());
    let fit = newton_fit(&PartialLikelihoodProblem::from_episodes(&rows).unwrap(), &[0.0; 3], &NewtonConfig::default())
        .unwrap();
    let time: Vec<f64> = subjects.iter().map(|s| s.observed_time).collect();
    let event: Vec<bool> = subjects.iter().map(|s| s.event).collect();
    let x: Vec<Vec<f64>> = subjects
        .iter()
        .map(|s| vec![s.x[0], s.x[1], if s.adoption_time == 0.0 { 1.0 } else { 0.0 }])
        .collect();
    let oracle = naive_cox_fit(&time, &event, &x);
    for (a, b) in fit.beta.iter().zip(&oracle) {
        assert!((a - b).abs() < 1e-8, "{a} vs {b}");
    }
}

fn ordinary_cox_spec(coef: Vec<f64>) -> HazardSpec {
    HazardSpec {
        eta0: LogHazard::Linear { intercept: 0.0, coef },
        tau: LogHazard::Zero,
        adoption: AdoptionLaw::Never,
        ..HazardSpec::default()
    }
}

#[test]
fn recovers_hazard_ratio_two() {
    let spec = ordinary_cox_spec(vec![2f64.ln(), -0.5, 0.0]);
    let sim = generate(&SimConfig { spec, ..SimConfig::new(5000, 21) }).unwrap();
    let prob = PartialLikelihoodProblem::from_episodes(&sim.dataset.episodes()).unwrap();
    let cfg = NewtonConfig {
        standard_errors: true,
        ..NewtonConfig::default()
    };
    let a = newton_fit(&prob, &[0.0; 3], &cfg).unwrap();
    let b = newton_fit(&prob, &[1.0, 1.0, -1.0], &cfg).unwrap();
    assert!(a.converged && b.converged);
    for (x, y) in a.beta.iter().zip(&b.beta) {
        assert!((x - y).abs() < 1e-8);
    }
    let truth = [2f64.ln(), -0.5, 0.0];
    let se = a.standard_errors.as_ref().unwrap();
    for j in 0..3 {
        assert!((a.beta[j] - truth[j]).abs() < 0.1, "{:?}", a.beta);
        assert!(se[j] > 0.005 && se[j] < 0.05);
    }
}

#[test]
fn subject_order_does_not_matter() {
    let sim = generate(&SimConfig::new(300, 5)).unwrap();
    let mut shuffled = sim.dataset.subjects.clone();
    shuffled.shuffle(&mut ChaCha8Rng::seed_from_u64(1));
    let other = Dataset::new(shuffled, sim.dataset.column_names.clone()).unwrap();
    let a = PartialLikelihoodProblem::from_episodes(&sim.dataset.episodes()).unwrap();
    let b = PartialLikelihoodProblem::from_episodes(&other.episodes()).unwrap();
    let beta = [0.2, -0.1, 0.4];
    let (la, lb) = (log_partial_likelihood(&a, &beta).unwrap(), log_partial_likelihood(&b, &beta).unwrap());
    assert!((la - lb).abs() < 1e-12);
    let cfg = NewtonConfig::default();
    let (fa, fb) = (newton_fit(&a, &[0.0; 3], &cfg).unwrap(), newton_fit(&b, &[0.0; 3], &cfg).unwrap());
    for (x, y) in fa.beta.iter().zip(&fb.beta) {
        assert!((x - y).abs() < 1e-10);
    }
}

#[test]
fn zero_propensity_second_stage_is_an_offset_cox_fit() {
    let sim = generate(&SimConfig::new(400, 13)).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let eta: Vec<f64> = sim.dataset.subjects.iter().map(|_| rng.random_range(-0.5..0.5)).collect();
    let subjects: Vec<SecondStageSubject> = sim
        .dataset
        .subjects
        .iter()
        .zip(&eta)
        .map(|(s, &e)| SecondStageSubject {
            observed_time: s.observed_time,
            event: s.event,
            adoption_time: s.adoption_time,
            phi: s.x.clone(),
            eta0: e,
            tau: 3.0,
            propensity: PropensityCurve::Zero,
        })
        .collect();
    let rows: Vec<_> = sim
        .dataset
        .subjects
        .iter()
        .zip(&eta)
        .flat_map(|(s, &e)| {
            tvcsl::expand_to_episodes(s).into_iter().map(move |mut r| {
                if !r.treated {
                    r.z.iter_mut().for_each(|v| *v = 0.0);
                }
                r.offset = e;
                r
            })
        })
        .collect();
    let offset_cox = PartialLikelihoodProblem::from_episodes(&rows).unwrap();
    let second = second_stage_problem(vec![subjects.clone()]).unwrap();
    for beta in [[0.0, 0.0, 0.0], [0.5, -0.3, 0.8]] {
        let a = log_partial_likelihood(&offset_cox, &beta).unwrap();
        let b = log_partial_likelihood(&second, &beta).unwrap();
        assert!((a - b).abs() < 1e-12, "{a} vs {b}");
    }
    let cfg = NewtonConfig::default();
    let fa = newton_fit(&offset_cox, &[0.0; 3], &cfg).unwrap();
    let fb = second_stage_fit(vec![subjects], &cfg).unwrap();
    for (x, y) in fa.beta.iter().zip(&fb.beta) {
        assert!((x - y).abs() < 1e-8);
    }
}

#[test]
fn symmetric_cross_fit_is_invariant_to_fold_labels() {
    let sim = generate(&SimConfig::new(600, 31)).unwrap();
    let plan = CrossFitPlan::new(&sim.dataset, 31).unwrap();
    let config = EstimatorConfig::with_seed(31);
    let fit = |plan: &CrossFitPlan| {
        tvcsl_fit(&sim.dataset, BasisSpec::linear(), BasisSpec::linear(), &[0, 1, 2], plan, &config).unwrap()
    };
    let a = fit(&plan);
    let b = fit(&plan.swapped());
    for (x, y) in a.hte.beta.iter().zip(&b.hte.beta) {
        assert!((x - y).abs() < 1e-10, "{x} vs {y}");
    }
}

/// Nelson–Aalen cumulative hazard at each time in `at`.
fn nelson_aalen(subjects: &[SubjectRecord], at: &[f64]) -> Vec<f64> {
    let mut times: Vec<(f64, bool)> = subjects.iter().map(|s| (s.observed_time, s.event)).collect();
    times.sort_by(|a, b| a.0.total_cmp(&b.0));
    let n = times.len();
    let mut out = Vec::with_capacity(at.len());
    let (mut cum, mut i) = (0.0, 0);
    for &t in at {
        while i < n && times[i].0 <= t {
            let u = times[i].0;
            let at_risk = n - i;
            let mut d = 0;
            while i < n && times[i].0 == u {
                d += usize::from(times[i].1);
                i += 1;
            }
            cum += d as f64 / at_risk as f64;
        }
        out.push(cum);
    }
    out
}

#[test]
fn nelson_aalen_ratio_matches_effect_difference() {
    // Both profiles adopt almost immediately, so post-adoption hazards differ
    // by exp((η₀ + τ)(x₁) − (η₀ + τ)(x₂)).
    let spec = HazardSpec {
        adoption: AdoptionLaw::Exponential {
            intercept: 1e6,
            coef: vec![],
            rate_floor: 0.05,
        },
        ..HazardSpec::default()
    };
    let (p1, p2) = (vec![0.8, 0.2, 0.5], vec![-0.3, 0.1, -0.4]);
    let lp = |x: &[f64]| spec.eta0.eval(x) + spec.tau.eval(x);
    let expected = (lp(&p1) - lp(&p2)).exp();
    let n = 50_000;
    let a = generate_from_covariates(&spec, &vec![p1; n], vec!["x1".into(), "x2".into(), "x3".into()], 1).unwrap();
    let b = generate_from_covariates(&spec, &vec![p2; n], vec!["x1".into(), "x2".into(), "x3".into()], 2).unwrap();
    let grid = [0.5, 1.0, 1.5];
    let (ha, hb) = (nelson_aalen(&a.dataset.subjects, &grid), nelson_aalen(&b.dataset.subjects, &grid));
    for k in 0..grid.len() {
        let ratio = ha[k] / hb[k];
        assert!((ratio / expected - 1.0).abs() < 0.05, "t={}: {ratio} vs {expected}", grid[k]);
    }
}

#[test]
fn post_adoption_hazard_uses_calendar_time() {
    let spec = HazardSpec::default();
    let x = [0.4, -0.2, 0.3];
    let a = 0.6;
    let (e0, e1) = (spec.eta0.eval(&x).exp(), (spec.eta0.eval(&x) + spec.tau.eval(&x)).exp());
    let lam = |t: f64| 0.5 * t * t;
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let draws: Vec<f64> = (0..100_000)
        .map(|_| sample_event_time(&x, a, &spec, rng.random_range(f64::MIN_POSITIVE..1.0)))
        .collect();
    let beyond_a = draws.iter().filter(|&&t| t > a).count() as f64;
    assert!((beyond_a / 1e5 / (-e0 * lam(a)).exp() - 1.0).abs() < 0.02);
    for t in [0.8, 1.0, 1.2, 1.5] {
        let empirical = draws.iter().filter(|&&s| s > t).count() as f64 / beyond_a;
        let calendar = (-(lam(t) - lam(a)) * e1).exp();
        assert!((empirical / calendar - 1.0).abs() < 0.05, "t={t}: {empirical} vs {calendar}");
    }
}

#[test]
fn censoring_only_caps_at_admin() {
    let spec = HazardSpec {
        censor: CensorLaw { rate: 0.0, admin: 3.0 },
        ..HazardSpec::default()
    };
    let sim = generate(&SimConfig { spec, ..SimConfig::new(2000, 9) }).unwrap();
    assert!(sim.dataset.subjects.iter().all(|s| s.observed_time <= 3.0));
    assert!(sim.dataset.subjects.iter().filter(|s| !s.event).all(|s| s.observed_time == 3.0));
}

#[test]
fn heart_data_round_trips_and_expands() {
    let path = heart_path();
    assert_eq!(tvcsl::heart::sha256_hex(&std::fs::read(&path).unwrap()), HEART_SHA256);
    let data = ingest_heart(&path).unwrap();
    assert_eq!(data.len(), 103);
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("heart.csv");
    data.write_csv(&out).unwrap();
    assert_eq!(Dataset::read_csv(&out).unwrap(), data);
    let transplanted_in_followup = data.subjects.iter().filter(|s| s.adoption_time < s.observed_time).count();
    assert_eq!(data.episodes().len(), 103 + transplanted_in_followup);
}
