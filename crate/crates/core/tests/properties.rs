//! Cross-module invariants on simulated data.

use std::collections::{BTreeMap, HashSet};
use std::sync::OnceLock;

use healthshock::estimator::{estimate, estimate_dd, estimate_ddd, fit_fe_ols, EstimatorSpec, FeDesign};
use healthshock::heterogeneity::{mob_partition, subsample_estimates, MobData, MobOptions, PartitionNode, Subsample};
use healthshock::innovation::{build_series, lag, Measure};
use healthshock::linalg::symmetric_eigenvalues;
use healthshock::matching::{match_pairs, match_registry, propensity::fit_propensity, verify_pairs, RegistryMatch};
use healthshock::registry::Outcome;
use healthshock::robustness::{cohort_aggregated_att, run_battery, BatteryInput, Variant};
use healthshock::simulator::panel::{confounded_candidates, simulate_panel, PanelDgp};
use healthshock::simulator::{simulate, DgpConfig, SimulatedData};
use healthshock::stacking::{build_panel, Panel};
use proptest::prelude::*;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const FAMILY: Outcome = Outcome::FamilyIncome;

struct World {
    data: SimulatedData,
    matched: RegistryMatch,
    series_years: (i32, i32),
    panel: Panel,
}

fn world() -> &'static World {
    static W: OnceLock<World> = OnceLock::new();
    W.get_or_init(|| {
        let data = simulate(&DgpConfig {
            seed: 11,
            n_persons: 6000,
            ..DgpConfig::default()
        })
        .unwrap();
        let matched = match_registry(&data.registry, false, 0.2).unwrap();
        let (lo, hi) = data.registry.outcome_years().unwrap();
        let series_years = (lo - 10, hi);
        let (raw, _) = build_series(&data.events, series_years.0, series_years.1).unwrap();
        let (panel, _) = build_panel(&matched.outcome.pairs, &data.registry, &lag(&raw, 1).unwrap(), &data.deflator).unwrap();
        World {
            data,
            matched,
            series_years,
            panel,
        }
    })
}

fn small_panel(seed: u64, n_pairs: usize) -> Panel {
    simulate_panel(&PanelDgp {
        seed,
        n_pairs,
        n_groups: 5,
        ..PanelDgp::default()
    })
    .unwrap()
}

fn relabeled(panel: &Panel, seed: u64) -> Panel {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = panel.clone();
    out.rows.shuffle(&mut rng);
    // an injective relabeling of experimental ids
    let mut ids: Vec<u64> = (1..=2 * panel.pairs.len() as u64).collect();
    ids.shuffle(&mut rng);
    for r in &mut out.rows {
        r.experimental_id = 1_000_000 + ids[(r.experimental_id - 1) as usize];
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn estimates_ignore_row_order_and_id_labels(seed in 0u64..1000) {
        let p = small_panel(seed, 300);
        let q = relabeled(&p, seed + 1);
        for spec in [EstimatorSpec::dd(), EstimatorSpec::ddd(Measure::Nme)] {
            let a = estimate(&p, FAMILY, &spec).unwrap();
            let b = estimate(&q, FAMILY, &spec).unwrap();
            for (x, y) in a.terms.iter().zip(&b.terms) {
                prop_assert_eq!(&x.name, &y.name);
                prop_assert!((x.estimate - y.estimate).abs() < 1e-10);
                prop_assert!((x.se - y.se).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn clustered_covariance_is_psd(seed in 0u64..1000) {
        let p = small_panel(seed, 60);
        let r = estimate(&p, FAMILY, &EstimatorSpec::ddd(Measure::Nme).by_event_year()).unwrap();
        let eig = symmetric_eigenvalues(&r.covariance_matrix());
        prop_assert!(eig.iter().all(|&e| e >= -1e-10), "eigenvalues {:?}", eig);
    }

    #[test]
    fn matching_invariants(seed in 0u64..1000, shift in 0.0f64..0.8) {
        let (treated, pool) = confounded_candidates(seed, 400, 2, shift);
        let tc: Vec<[f64; 3]> = treated.iter().map(|c| c.covariates).collect();
        let pc: Vec<[f64; 3]> = pool.iter().map(|c| c.covariates).collect();
        let model = fit_propensity(&tc, &pc).unwrap();
        let a = match_pairs(&treated, &pool, &model, 0.2).unwrap();
        verify_pairs(&a.pairs, a.caliper).unwrap();
        let controls: HashSet<u64> = a.pairs.iter().map(|p| p.control_person_id).collect();
        prop_assert_eq!(controls.len(), a.pairs.len());
        let by_id: BTreeMap<u64, _> = treated.iter().chain(&pool).map(|c| (c.person_id, c)).collect();
        for p in &a.pairs {
            let (t, c) = (by_id[&p.treated_person_id], by_id[&p.control_person_id]);
            prop_assert_eq!((t.disease_group, t.gender), (c.disease_group, c.gender));
            prop_assert_eq!(c.shock_year, t.shock_year + 2);
            let d = (model.linear_predictor(&t.covariates) - model.linear_predictor(&c.covariates)).abs();
            prop_assert!(d <= a.caliper + 1e-12);
        }
        // reruns on a reversed input give the same pairs
        let mut rt = treated.clone();
        rt.reverse();
        let mut rp = pool.clone();
        rp.reverse();
        let b = match_pairs(&rt, &rp, &model, 0.2).unwrap();
        prop_assert_eq!(a.pairs, b.pairs);
    }

    #[test]
    fn cohort_variance_is_nonnegative(seed in 0u64..1000) {
        let agg = cohort_aggregated_att(&small_panel(seed, 80), FAMILY, None).unwrap();
        prop_assert!(agg.result.se("att").unwrap() >= 0.0);
        prop_assert!(agg.cohorts.iter().all(|c| c.variance.is_none_or(|v| v >= 0.0)));
    }
}

#[test]
fn generated_registry_passes_validation_on_reload() {
    let w = world();
    let dir = tempfile::tempdir().unwrap();
    let header = healthshock::io::FileHeader::new(11, "test");
    w.data.write(dir.path(), &header).unwrap();
    let loaded = healthshock::registry::load_registry(
        &dir.path().join("persons.csv"),
        &dir.path().join("outcomes.csv"),
        &dir.path().join("shocks.csv"),
        &Default::default(),
    )
    .unwrap();
    assert_eq!(loaded.shocks().len(), w.data.registry.shocks().len());
    assert_eq!(loaded.n_persons(), w.data.registry.n_persons());
    // a second write of the reloaded register is byte-identical
    let again = tempfile::tempdir().unwrap();
    loaded.write_csv(again.path(), Some(&header)).unwrap();
    for f in ["persons.csv", "outcomes.csv", "shocks.csv"] {
        assert_eq!(
            std::fs::read(dir.path().join(f)).unwrap(),
            std::fs::read(again.path().join(f)).unwrap(),
            "{f}"
        );
    }
}

#[test]
fn panel_clock_and_arm_support() {
    let p = &world().panel;
    assert!(!p.pairs.is_empty());
    let mut support: BTreeMap<(u32, bool), Vec<i32>> = BTreeMap::new();
    for r in &p.rows {
        let info = p.pair_of(r);
        assert_eq!(p.calendar_year(r) - info.shock_year, r.event_year);
        support.entry((r.pair, r.treated)).or_default().push(r.event_year);
    }
    let ids: HashSet<u64> = p.rows.iter().map(|r| r.experimental_id).collect();
    assert_eq!(ids.len(), 2 * p.pairs.len());
    // without deaths inside the window both arms cover the full window
    let full = support.values().filter(|v| v.len() == 5).count();
    assert!(full as f64 >= 0.95 * support.len() as f64);
}

#[test]
fn panel_build_is_pure() {
    let w = world();
    let (raw, _) = build_series(&w.data.events, w.series_years.0, w.series_years.1).unwrap();
    let (again, _) = build_panel(&w.matched.outcome.pairs, &w.data.registry, &lag(&raw, 1).unwrap(), &w.data.deflator).unwrap();
    assert_eq!(again, w.panel);
}

#[test]
fn innovation_level_is_the_raw_stock_lagged() {
    let w = world();
    let (raw, _) = build_series(&w.data.events, w.series_years.0, w.series_years.1).unwrap();
    for l in [1u32, 5, 10] {
        let p = w.panel.with_series(&lag(&raw, l).unwrap()).unwrap();
        for info in p.pairs.iter().take(200) {
            let expect = raw.value(info.disease_group, info.shock_year - l as i32, Measure::Nme).unwrap();
            assert_eq!(info.m_nme, expect);
        }
    }
}

#[test]
fn battery_ignores_variant_order() {
    let w = world();
    let input = BatteryInput {
        registry: &w.data.registry,
        events: &w.data.events,
        deflator: &w.data.deflator,
        pairs: &w.matched.outcome.pairs,
        series_years: w.series_years,
        base_lag: 1,
        outcome: FAMILY,
        measure: Measure::Nme,
        caliper: 0.2,
    };
    let order = [Variant::Base, Variant::Lag5, Variant::Detrended, Variant::CohortAggregated];
    let mut rev = order;
    rev.reverse();
    let a = run_battery(&input, &order).unwrap();
    let b = run_battery(&input, &rev).unwrap();
    for row in &a {
        let other = b.iter().find(|r| r.variant == row.variant).unwrap();
        assert_eq!(row.beta3(), other.beta3());
        assert_eq!(
            row.result.as_ref().map(|r| r.terms.clone()).ok(),
            other.result.as_ref().map(|r| r.terms.clone()).ok()
        );
    }
}

#[test]
fn zero_mitigation_centres_beta3_on_zero() {
    const REPS: u64 = 60;
    let draws: Vec<f64> = (0..REPS)
        .map(|r| {
            let p = simulate_panel(&PanelDgp {
                seed: 70_000 + r,
                n_pairs: 5000,
                gamma: 0.0,
                ..PanelDgp::default()
            })
            .unwrap();
            estimate_ddd(&p, FAMILY, Measure::Nme).unwrap().estimate("dd_m").unwrap()
        })
        .collect();
    let n = REPS as f64;
    let mean = draws.iter().sum::<f64>() / n;
    let sd = (draws.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0)).sqrt();
    assert!(mean.abs() < 3.5 * sd / n.sqrt(), "mean {mean}, sd {sd}");
}

#[test]
fn subsample_estimates_average_to_the_pooled_one() {
    let p = simulate_panel(&PanelDgp {
        seed: 5,
        n_pairs: 20_000,
        ..PanelDgp::default()
    })
    .unwrap();
    let pooled = estimate_dd(&p, FAMILY, false).unwrap();
    let subs = subsample_estimates(&p, &[Subsample::Men, Subsample::Women], FAMILY, &EstimatorSpec::dd());
    let (mut num, mut den) = (0.0, 0.0);
    for s in &subs {
        let r = s.result.as_ref().unwrap();
        num += r.estimate("dd").unwrap() * r.n_rows as f64;
        den += r.n_rows as f64;
    }
    assert_eq!(den as usize, pooled.n_rows);
    assert!((num / den - pooled.estimate("dd").unwrap()).abs() < 2.0 * pooled.se("dd").unwrap());
}

fn leaves_cover(node: &PartitionNode) -> bool {
    if node.is_leaf() {
        return true;
    }
    let (l, r) = (&node.children[0], &node.children[1]);
    l.years.0 == node.years.0
        && r.years.1 == node.years.1
        && l.years.1 < r.years.0
        && leaves_cover(l)
        && leaves_cover(r)
}

#[test]
fn mob_is_deterministic_and_partitions_years() {
    let p = simulate_panel(&PanelDgp {
        seed: 3,
        n_pairs: 3000,
        n_groups: 1,
        first_shock_year: 1995,
        last_shock_year: 2014,
        gamma: 1.6,
        m_growth: 0.3,
        break_year: Some(2003),
        ..PanelDgp::default()
    })
    .unwrap();
    let data = MobData::from_panel(&p, FAMILY, Measure::Nme).unwrap();
    let a = mob_partition(&data, MobOptions::default()).unwrap();
    let b = mob_partition(&data, MobOptions::default()).unwrap();
    assert_eq!(format!("{a:?}"), format!("{b:?}"));
    assert_eq!(a.split_year, Some(2003));
    assert!(leaves_cover(&a));
}

#[test]
fn fe_fit_runs_in_f32() {
    let p = small_panel(1, 200);
    let d64 = healthshock::estimator::build_design(&p, FAMILY, &EstimatorSpec::dd()).unwrap();
    let mut d32: FeDesign<f32> = FeDesign::new(
        d64.y.iter().map(|&v| v as f32).collect(),
        d64.groups.clone(),
        d64.clusters.clone(),
    );
    for (n, c) in d64.names.iter().zip(&d64.columns) {
        d32.push(n.clone(), c.iter().map(|&v| v as f32).collect());
    }
    let a = fit_fe_ols(&d64).unwrap();
    let b = fit_fe_ols(&d32).unwrap();
    for (x, y) in a.coefficients.iter().zip(&b.coefficients) {
        assert!((x - *y as f64).abs() < 1e-3);
    }
}
