//! Simulation checks of estimator behaviour beyond the acceptance suite.

use healthshock::estimator::{estimate_dd, estimate_ddd, EstimatorSpec, ResultLine};
use healthshock::heterogeneity::{subsample_estimates, Subsample};
use healthshock::innovation::Measure;
use healthshock::matching::{fit_propensity, match_registry, N_COVARIATES};
use healthshock::registry::Outcome;
use healthshock::robustness::{estimate_with_icd_eventyear_fe, run_battery, BatteryInput, Variant};
use healthshock::simulator::panel::{confounded_candidates, simulate_panel, PanelDgp};
use healthshock::simulator::{oracle_compare, simulate, DgpConfig, Tolerances, Truth, TruthEntry};
use healthshock::stacking::Panel;
use healthshock::stats::{standardized_difference, t_quantile};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

const FAMILY: Outcome = Outcome::FamilyIncome;

fn shift_treated(panel: &mut Panel, f: impl Fn(&healthshock::stacking::PairInfo, i32) -> f64) {
    let i = FAMILY.index();
    for r in 0..panel.rows.len() {
        let row = &panel.rows[r];
        if !row.treated {
            continue;
        }
        let d = f(panel.pair_of(row), row.event_year);
        if let Some(y) = panel.rows[r].outcomes[i].as_mut() {
            *y += d;
        }
    }
}

// Plain Newton–Raphson on centred covariates, 4×4 solve by elimination.
fn newton_logit(treated: &[[f64; 3]], pool: &[[f64; 3]]) -> [f64; 4] {
    let all: Vec<([f64; 3], f64)> = treated
        .iter()
        .map(|x| (*x, 1.0))
        .chain(pool.iter().map(|x| (*x, 0.0)))
        .collect();
    let n = all.len() as f64;
    let mut centre = [0.0; 3];
    for (x, _) in &all {
        for j in 0..3 {
            centre[j] += x[j] / n;
        }
    }
    let mut b = [0.0f64; 4];
    for _ in 0..50 {
        let mut g = [0.0; 4];
        let mut h = [[0.0; 4]; 4];
        for (x, y) in &all {
            let z = [1.0, x[0] - centre[0], x[1] - centre[1], x[2] - centre[2]];
            let eta: f64 = (0..4).map(|j| b[j] * z[j]).sum();
            let p = 1.0 / (1.0 + (-eta).exp());
            for j in 0..4 {
                g[j] += (y - p) * z[j];
                for k in 0..4 {
                    h[j][k] += p * (1.0 - p) * z[j] * z[k];
                }
            }
        }
        // solve h·step = g
        let mut a: Vec<Vec<f64>> = (0..4).map(|j| h[j].iter().copied().chain([g[j]]).collect()).collect();
        for c in 0..4 {
            let piv = (c..4).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
            a.swap(c, piv);
            for r in 0..4 {
                if r != c {
                    let f = a[r][c] / a[c][c];
                    for k in c..5 {
                        a[r][k] -= f * a[c][k];
                    }
                }
            }
        }
        let mut step = 0.0f64;
        for j in 0..4 {
            let s = a[j][4] / a[j][j];
            b[j] += s;
            step = step.max(s.abs());
        }
        if step < 1e-13 {
            break;
        }
    }
    let intercept = b[0] - (0..3).map(|j| b[j + 1] * centre[j]).sum::<f64>();
    [intercept, b[1], b[2], b[3]]
}

fn covariate_draws(seed: u64, n: usize, shift: [f64; 3]) -> Vec<[f64; 3]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = Normal::new(0.0, 1.0).unwrap();
    let sd = [8.0, 2.0, 0.6];
    let mean = [1955.0, 12.0, 12.3];
    (0..n)
        .map(|_| std::array::from_fn(|j| mean[j] + sd[j] * (shift[j] + z.sample(&mut rng))))
        .collect()
}

#[test]
fn propensity_agrees_with_newton_and_is_flat_without_selection() {
    assert_eq!(N_COVARIATES, 3);
    let t = covariate_draws(1, 10_000, [0.0; 3]);
    let p = covariate_draws(2, 10_000, [0.0; 3]);
    let m = fit_propensity(&t, &p).unwrap();
    let oracle = newton_logit(&t, &p);
    for j in 0..4 {
        let (a, b) = (m.coefficients[j], oracle[j]);
        assert!((a - b).abs() <= 1e-6 * (1.0 + b.abs()), "coefficient {j}: {a} vs {b}");
    }
    for j in 1..4 {
        assert!(m.coefficients[j].abs() < 0.05, "slope {j} = {}", m.coefficients[j]);
    }
}

#[test]
fn shifted_covariate_gets_a_positive_slope() {
    for j in 0..3 {
        let mut shift = [0.0; 3];
        shift[j] = 1.0;
        let t = covariate_draws(10 + j as u64, 5_000, shift);
        let p = covariate_draws(20 + j as u64, 5_000, [0.0; 3]);
        let m = fit_propensity(&t, &p).unwrap();
        assert!(m.coefficients[j + 1] > 0.0, "covariate {j}: {:?}", m.coefficients);
        let oracle = newton_logit(&t, &p);
        assert!((m.coefficients[j + 1] - oracle[j + 1]).abs() < 1e-6 * oracle[j + 1].abs().max(1.0));
    }
}

#[test]
fn unit_mean_shift_has_unit_standardized_difference() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let z = Normal::new(0.0, 1.0).unwrap();
    let t: Vec<f64> = (0..100_000).map(|_| 1.0 + z.sample(&mut rng)).collect();
    let c: Vec<f64> = (0..100_000).map(|_| z.sample(&mut rng)).collect();
    let d = standardized_difference(&t, &c).unwrap();
    assert!((d - 1.0).abs() < 0.02, "d = {d}");
}

#[test]
fn confounded_fixture_is_unbalanced_before_matching() {
    let (treated, pool) = confounded_candidates(4, 2000, 3, 0.5);
    for j in 0..3 {
        let t: Vec<f64> = treated.iter().map(|c| c.covariates[j]).collect();
        let p: Vec<f64> = pool.iter().map(|c| c.covariates[j]).collect();
        let d = standardized_difference(&t, &p).unwrap();
        assert!(d > 0.3, "covariate {j}: d = {d}");
    }
}

#[test]
fn null_effect_intervals_cover_zero() {
    const REPS: u64 = 200;
    let covered = (0..REPS)
        .into_par_iter()
        .filter(|&r| {
            let p = simulate_panel(&PanelDgp {
                seed: 500 + r,
                n_pairs: 2000,
                delta: 0.0,
                ..PanelDgp::default()
            })
            .unwrap();
            let fit = estimate_dd(&p, FAMILY, false).unwrap();
            let t = fit.term("dd").unwrap();
            t.estimate.abs() <= t_quantile(0.975, fit.df) * t.se
        })
        .count();
    let rate = covered as f64 / REPS as f64;
    assert!((0.90..=0.99).contains(&rate), "coverage {rate}");
}

#[test]
fn event_year_effects_are_recovered_separately() {
    let mut p = simulate_panel(&PanelDgp {
        seed: 8,
        n_pairs: 50_000,
        delta: -0.3,
        ..PanelDgp::default()
    })
    .unwrap();
    shift_treated(&mut p, |_, t| if t == 1 { -0.2 } else { 0.0 });
    let fit = estimate_dd(&p, FAMILY, true).unwrap();
    let (t0, t1) = (fit.estimate("dd_t0").unwrap(), fit.estimate("dd_t1").unwrap());
    assert!((t0 + 0.3).abs() < 0.02, "t0 {t0}");
    assert!((t1 + 0.5).abs() < 0.02, "t1 {t1}");
}

#[test]
fn zero_mitigation_gives_a_zero_percent_effect() {
    const REPS: u64 = 100;
    let pct: Vec<f64> = (0..REPS)
        .into_par_iter()
        .map(|r| {
            let p = simulate_panel(&PanelDgp {
                seed: 9_000 + r,
                n_pairs: 20_000,
                gamma: 0.0,
                ..PanelDgp::default()
            })
            .unwrap();
            estimate_ddd(&p, FAMILY, Measure::Nme).unwrap().effect_percent().unwrap()
        })
        .collect();
    let mean = pct.iter().sum::<f64>() / REPS as f64;
    assert!(mean.abs() < 0.5, "mean effect {mean} pp");
}

#[test]
fn cancer_and_other_groups_separate() {
    let mut p = simulate_panel(&PanelDgp {
        seed: 12,
        n_pairs: 50_000,
        delta: 0.0,
        ..PanelDgp::default()
    })
    .unwrap();
    shift_treated(&mut p, |info, t| match (t >= 0, info.disease_group.is_cancer()) {
        (false, _) => 0.0,
        (true, true) => -0.9,
        (true, false) => -0.2,
    });
    let res = subsample_estimates(&p, &[Subsample::Cancer, Subsample::NonCancer], FAMILY, &EstimatorSpec::dd());
    let dd = |i: usize| res[i].result.as_ref().unwrap().estimate("dd").unwrap();
    let (cancer, other) = (dd(0), dd(1));
    assert!(other - cancer >= 0.5, "cancer {cancer}, other {other}");
    assert!((cancer + 0.9).abs() < 0.05 && (other + 0.2).abs() < 0.05);
}

// Matched arms share chapter and calendar years, so chapter-by-time shocks
// hit both members of a pair; both specifications difference them out and
// agree exactly on balanced panels.
#[test]
fn icd_fe_spec_matches_base_and_ignores_chapter_shocks() {
    let dgp = PanelDgp {
        seed: 14,
        n_pairs: 20_000,
        ..PanelDgp::default()
    }
    .with_effect_percent(12.0)
    .unwrap();
    let mut p = simulate_panel(&dgp).unwrap();
    let clean_base = estimate_ddd(&p, FAMILY, Measure::Nme).unwrap();
    let clean_fe = estimate_with_icd_eventyear_fe(&p, FAMILY, Measure::Nme).unwrap();
    let (b, s) = (clean_base.estimate("dd_m").unwrap(), clean_base.se("dd_m").unwrap());
    let f = clean_fe.estimate("dd_m").unwrap();
    assert!((b - f).abs() < 2.0 * s);
    assert!((b - f).abs() < 1e-8 * b.abs(), "{b} vs {f}");

    // chapter-specific calendar trends on both arms, steeper where m is high
    let i = FAMILY.index();
    for r in 0..p.rows.len() {
        let info = p.pair_of(&p.rows[r]);
        let ch = info.disease_group.chapter().index() as f64;
        let year = (info.shock_year + p.rows[r].event_year - 2000) as f64;
        let bump = 0.05 * (ch / 12.0 - 0.5) * year + 0.5 * info.m_nme * year / 10.0;
        *p.rows[r].outcomes[i].as_mut().unwrap() += bump;
    }
    let base = estimate_ddd(&p, FAMILY, Measure::Nme).unwrap();
    let fe = estimate_with_icd_eventyear_fe(&p, FAMILY, Measure::Nme).unwrap();
    for r in [&base, &fe] {
        let (e, s) = (r.estimate("dd_m").unwrap(), r.se("dd_m").unwrap());
        assert!((e - dgp.gamma).abs() < 3.0 * s, "{}: {e} vs {}", r.spec, dgp.gamma);
    }
    assert!((base.estimate("dd_m").unwrap() - fe.estimate("dd_m").unwrap()).abs() < 1e-8);
}

#[test]
fn ddd_oracle_intervals_reach_nominal_coverage() {
    const REPS: u64 = 200;
    let (covered, compared) = (0..REPS)
        .into_par_iter()
        .map(|r| {
            let dgp = PanelDgp {
                seed: 30_000 + r,
                n_pairs: 3000,
                ..PanelDgp::default()
            }
            .with_effect_percent(12.0)
            .unwrap();
            let p = simulate_panel(&dgp).unwrap();
            let fit = estimate_ddd(&p, FAMILY, Measure::Nme).unwrap();
            let lines: Vec<ResultLine> = fit
                .terms
                .iter()
                .map(|t| ResultLine {
                    spec: fit.spec.clone(),
                    outcome: fit.outcome.clone(),
                    term: t.name.clone(),
                    estimate: t.estimate,
                    se: t.se,
                    p: t.p,
                    n: fit.n_rows,
                    clusters: fit.n_clusters,
                })
                .collect();
            let entry = |term: &str, value| TruthEntry {
                spec: fit.spec.clone(),
                outcome: fit.outcome.clone(),
                term: term.into(),
                value,
            };
            let truth = Truth {
                version: String::new(),
                config_hash: String::new(),
                seed: dgp.seed,
                lag: 1,
                break_year: None,
                parameters: vec![entry("dd", dgp.delta), entry("dd_m", dgp.gamma)],
            };
            let rep = oracle_compare(&truth, &lines, Tolerances::default(), &[]);
            let n = rep.lines.iter().filter(|l| l.estimate.is_some()).count();
            ((rep.coverage() * n as f64).round() as usize, n)
        })
        .reduce(|| (0, 0), |a, b| (a.0 + b.0, a.1 + b.1));
    assert_eq!(compared, 2 * REPS as usize);
    let rate = covered as f64 / compared as f64;
    assert!((0.90..=0.99).contains(&rate), "coverage {rate}");
}

#[test]
fn battery_is_stable_on_a_clean_dgp() {
    let data = simulate(&DgpConfig {
        seed: 17,
        n_persons: 50_000,
        ..DgpConfig::default()
    })
    .unwrap();
    let registry = &data.registry;
    let matched = match_registry(registry, false, 0.2).unwrap();
    let (lo, hi) = registry.outcome_years().unwrap();
    let input = BatteryInput {
        registry,
        events: &data.events,
        deflator: &data.deflator,
        pairs: &matched.outcome.pairs,
        series_years: (lo - 10, hi),
        base_lag: 1,
        outcome: FAMILY,
        measure: Measure::Nme,
        caliper: 0.2,
    };
    let rows = run_battery(&input, &Variant::ALL).unwrap();
    let pct = |v: Variant| {
        let row = rows.iter().find(|r| r.variant == v).unwrap();
        row.result.as_ref().unwrap().effect_percent().unwrap()
    };
    let base = pct(Variant::Base);
    assert!(base > 5.0, "base effect {base}");
    for v in Variant::ALL {
        let e = pct(v);
        if v == Variant::Detrended {
            // the planted effect rides on the raw stock; detrending keeps only
            // its within-group wiggle, so only the sign carries over
            assert!(e > 0.0, "detrended {e}");
        } else {
            assert!((e / base - 1.0).abs() <= 0.3, "{}: {e} vs base {base}", v.as_str());
        }
    }
}
