//! Robustness battery for the DDD estimate: alternative fixed effects, a
//! cohort-aggregation estimator, and alternative innovation measures.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimator::{
    build_design, estimate_ddd, outcome_rows, sd_m, EstimationResult, EstimatorSpec, Term,
};
use crate::estimator::fe::fit_fe_ols;
use crate::innovation::{
    build_series, detrend, effect_percent, filter_international, lag, InnovationEvent, Measure,
};
use crate::io::{CsvOut, FileHeader};
use crate::linalg::{cholesky, DenseMatrix};
use crate::matching::{match_registry, MatchedPair};
use crate::registry::{Deflator, DiseaseGroup, IcdChapter, Outcome, Registry};
use crate::stacking::{build_panel, Panel};
use crate::stats::{sample_variance, t_two_sided_p};

/// DDD with event-year × ICD-chapter fixed effects.
///
/// The interacted dummies (one per chapter present and event year other
/// than −3) span the plain event-year effects, so `post` is absorbed and
/// left out; `dd`, `dd×m` and `post×m` remain.
pub fn estimate_with_icd_eventyear_fe(
    panel: &Panel,
    outcome: Outcome,
    measure: Measure,
) -> Result<EstimationResult> {
    let base = build_design(panel, outcome, &EstimatorSpec::ddd(measure))?;
    let (rows, _) = outcome_rows(panel, outcome);
    let mut design = crate::estimator::FeDesign::new(base.y.clone(), base.groups.clone(), base.clusters.clone());
    for (n, c) in base.names.iter().zip(&base.columns) {
        if n != "post" {
            design.push(n.clone(), c.clone());
        }
    }
    let chapters: std::collections::BTreeSet<IcdChapter> = rows
        .iter()
        .map(|r| panel.pair_of(r).disease_group.chapter())
        .collect();
    for ch in &chapters {
        for t in [-2, -1, 0, 1] {
            let col = rows
                .iter()
                .map(|r| f64::from(u8::from(r.event_year == t && panel.pair_of(r).disease_group.chapter() == *ch)))
                .collect();
            design.push(format!("ev{t}_x_ch{}", ch.index() + 1), col);
        }
    }
    let fit = fit_fe_ols(&design)?;
    let mut res = EstimationResult::from_fit(
        &fit,
        &format!("ddd:{}:eventyear_icd_fe", measure.as_str()),
        outcome.column(),
        Some(sd_m(panel, outcome, measure)?),
    );
    // the retained terms are the leading design columns
    res.terms.retain(|t| !t.name.starts_with("ev"));
    let keep: Vec<usize> = (0..res.terms.len()).collect();
    res.covariance = fit.covariance.submatrix(&keep).as_slice().to_vec();
    Ok(res)
}

#[derive(Debug, Clone, PartialEq)]
pub struct CohortEffect {
    pub disease_group: DiseaseGroup,
    pub shock_year: i32,
    pub effect: f64,
    pub m: f64,
    /// Rows of the cohort observing the outcome (the aggregation weight).
    pub rows: usize,
    pub n_treated: usize,
    pub n_control: usize,
    /// Within-cohort sampling variance of `effect`; `None` when an arm has a
    /// single unit.
    pub variance: Option<f64>,
}

#[derive(Debug, Clone)]
pub struct CohortAggregate {
    pub result: EstimationResult,
    pub cohorts: Vec<CohortEffect>,
    pub dropped_cohorts: usize,
    pub dropped_units: usize,
}

/// Cohort-by-cohort DD with base period −1, aggregated by row-count weights.
///
/// A unit's change is its mean post-period outcome minus its outcome at
/// t = −1; units without the base year or any post year are dropped, as are
/// cohorts left without one of the arms. With two or more cohorts the
/// variance clusters on cohorts; a single cohort falls back to its
/// within-cohort two-sample variance. With `measure` set, the cohort effects
/// are also regressed on the cohort innovation level by weighted least
/// squares (terms `intercept` and `dd_m`).
pub fn cohort_aggregated_att(panel: &Panel, outcome: Outcome, measure: Option<Measure>) -> Result<CohortAggregate> {
    type Key = (DiseaseGroup, i32);
    struct Unit {
        base: Option<f64>,
        post: Vec<f64>,
        treated: bool,
    }
    let mut units: BTreeMap<Key, BTreeMap<u64, Unit>> = BTreeMap::new();
    let mut rows_per: BTreeMap<Key, usize> = BTreeMap::new();
    let mut m_of: BTreeMap<Key, f64> = BTreeMap::new();
    for r in &panel.rows {
        let Some(y) = r.outcome(outcome) else { continue };
        let p = panel.pair_of(r);
        let key = (p.disease_group, p.shock_year);
        *rows_per.entry(key).or_default() += 1;
        if let Some(ms) = measure {
            m_of.insert(key, p.m(ms));
        }
        let u = units.entry(key).or_default().entry(r.experimental_id).or_insert(Unit {
            base: None,
            post: Vec::new(),
            treated: r.treated,
        });
        if r.event_year == -1 {
            u.base = Some(y);
        } else if r.event_year >= 0 {
            u.post.push(y);
        }
    }

    let mut cohorts = Vec::new();
    let mut dropped_cohorts = 0;
    let mut dropped_units = 0;
    for (key, us) in &units {
        let mut dt = Vec::new();
        let mut dc = Vec::new();
        for u in us.values() {
            match u.base {
                Some(b) if !u.post.is_empty() => {
                    let d = u.post.iter().sum::<f64>() / u.post.len() as f64 - b;
                    if u.treated { dt.push(d) } else { dc.push(d) }
                }
                _ => dropped_units += 1,
            }
        }
        if dt.is_empty() || dc.is_empty() {
            dropped_cohorts += 1;
            continue;
        }
        let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
        let var = |v: &[f64]| sample_variance(v).map(|s| s / v.len() as f64);
        cohorts.push(CohortEffect {
            disease_group: key.0,
            shock_year: key.1,
            effect: mean(&dt) - mean(&dc),
            m: m_of.get(key).copied().unwrap_or(0.0),
            rows: rows_per[key],
            n_treated: dt.len(),
            n_control: dc.len(),
            variance: var(&dt).zip(var(&dc)).map(|(a, b)| a + b),
        });
    }
    if dropped_cohorts > 0 || dropped_units > 0 {
        log::warn!("cohort aggregation dropped {dropped_cohorts} cohorts and {dropped_units} units without base or post period");
    }
    if cohorts.is_empty() {
        return Err(Error::Validation("no cohort has both arms with base and post periods".into()));
    }

    let c = cohorts.len();
    let total: f64 = cohorts.iter().map(|e| e.rows as f64).sum();
    let omega: Vec<f64> = cohorts.iter().map(|e| e.rows as f64 / total).collect();
    let att: f64 = cohorts.iter().zip(&omega).map(|(e, w)| w * e.effect).sum();
    let var_att = if c >= 2 {
        let cf = c as f64;
        cf / (cf - 1.0)
            * cohorts
                .iter()
                .zip(&omega)
                .map(|(e, w)| (w * (e.effect - att)).powi(2))
                .sum::<f64>()
    } else {
        cohorts[0].variance.ok_or_else(|| {
            Error::Numerical("single cohort with a one-unit arm: ATT variance undefined".into())
        })?
    };
    let df = if c >= 2 { c as f64 - 1.0 } else { (cohorts[0].n_treated + cohorts[0].n_control) as f64 - 2.0 };
    let n_rows: usize = cohorts.iter().map(|e| e.rows).sum();

    let mut terms = vec![term("att", att, var_att, df)];
    let mut covariance = vec![var_att];
    let mut spec = "cohort_att".to_string();
    let mut sd = None;
    if let Some(ms) = measure {
        spec = format!("cohort_att:{}", ms.as_str());
        let (beta, cov) = cohort_wls(&cohorts)?;
        let df2 = (c as f64 - 2.0).max(1.0);
        terms.push(term("intercept", beta[0], cov[(0, 0)], df2));
        terms.push(term("dd_m", beta[1], cov[(1, 1)], df2));
        covariance = vec![var_att, 0.0, 0.0, 0.0, cov[(0, 0)], cov[(0, 1)], 0.0, cov[(1, 0)], cov[(1, 1)]];
        let ms_vals: Vec<f64> = cohorts.iter().map(|e| e.m).collect();
        let ws: Vec<f64> = cohorts.iter().map(|e| e.rows as f64).collect();
        sd = Some(crate::innovation::series_sd(&ms_vals, &ws)?);
    }
    Ok(CohortAggregate {
        result: EstimationResult {
            spec,
            outcome: outcome.column().to_string(),
            terms,
            covariance,
            n_rows,
            n_clusters: c,
            singletons_dropped: 0,
            r_squared_within: f64::NAN,
            df,
            sd_m: sd,
        },
        cohorts,
        dropped_cohorts,
        dropped_units,
    })
}

fn term(name: &str, estimate: f64, var: f64, df: f64) -> Term {
    let se = var.max(0.0).sqrt();
    Term {
        name: name.to_string(),
        estimate,
        se,
        p: if se > 0.0 { t_two_sided_p(estimate / se, df) } else { f64::NAN },
    }
}

/// Weighted regression of cohort effects on `[1, m]` with a cohort-level
/// heteroskedasticity-robust (HC1) covariance.
fn cohort_wls(cohorts: &[CohortEffect]) -> Result<([f64; 2], DenseMatrix<f64>)> {
    let mut xtwx = DenseMatrix::<f64>::zeros(2, 2);
    let mut xtwy = [0.0; 2];
    for e in cohorts {
        let x = [1.0, e.m];
        let w = e.rows as f64;
        xtwx.add_outer(&x, w);
        xtwy[0] += w * e.effect;
        xtwy[1] += w * e.m * e.effect;
    }
    let chol = cholesky(&xtwx).map_err(|_| Error::RankDeficient {
        columns: vec!["dd_m".to_string()],
    })?;
    let b = chol.solve(&xtwy);
    let bread = chol.inverse();
    let mut meat = DenseMatrix::<f64>::zeros(2, 2);
    for e in cohorts {
        let x = [1.0, e.m];
        let w = e.rows as f64;
        let r = e.effect - b[0] - b[1] * e.m;
        meat.add_outer(&x, (w * r).powi(2));
    }
    let c = cohorts.len() as f64;
    let mut cov = bread.matmul(&meat).matmul(&bread);
    if c > 2.0 {
        cov.scale(c / (c - 2.0));
    }
    Ok(([b[0], b[1]], cov))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Variant {
    Base,
    EventYearIcdFe,
    CohortAggregated,
    Detrended,
    International,
    Lag5,
    Lag10,
    WithEmergency,
}

impl Variant {
    pub const ALL: [Variant; 8] = [
        Variant::Base,
        Variant::EventYearIcdFe,
        Variant::CohortAggregated,
        Variant::Detrended,
        Variant::International,
        Variant::Lag5,
        Variant::Lag10,
        Variant::WithEmergency,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::EventYearIcdFe => "eventyear_icd_fe",
            Variant::CohortAggregated => "cohort_aggregated",
            Variant::Detrended => "detrended",
            Variant::International => "international",
            Variant::Lag5 => "lag5",
            Variant::Lag10 => "lag10",
            Variant::WithEmergency => "with_emergency",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        Self::ALL
            .iter()
            .copied()
            .find(|v| v.as_str() == s)
            .ok_or_else(|| Error::Validation(format!("unknown robustness variant '{s}'")))
    }

    /// `all` or a comma-separated list.
    pub fn parse_list(s: &str) -> Result<Vec<Self>> {
        if s.trim() == "all" {
            return Ok(Self::ALL.to_vec());
        }
        s.split(',').map(|p| Self::parse(p.trim())).collect()
    }
}

/// Everything the battery re-derives variants from.
pub struct BatteryInput<'a> {
    pub registry: &'a Registry,
    pub events: &'a [InnovationEvent],
    pub deflator: &'a Deflator,
    pub pairs: &'a [MatchedPair],
    /// Year range over which raw innovation stocks are built.
    pub series_years: (i32, i32),
    pub base_lag: u32,
    pub outcome: Outcome,
    pub measure: Measure,
    pub caliper: f64,
}

#[derive(Debug, Clone)]
pub struct BatteryRow {
    pub variant: Variant,
    pub result: std::result::Result<EstimationResult, String>,
}

impl BatteryRow {
    pub fn beta3(&self) -> Option<f64> {
        self.result.as_ref().ok()?.estimate("dd_m")
    }
}

/// Runs the requested variants in parallel; a failing variant is recorded
/// and does not stop the others.
pub fn run_battery(input: &BatteryInput<'_>, variants: &[Variant]) -> Result<Vec<BatteryRow>> {
    let (first, last) = input.series_years;
    let (raw, _) = build_series(input.events, first, last)?;
    let base_series = lag(&raw, input.base_lag)?;
    let (base_panel, _) = build_panel(input.pairs, input.registry, &base_series, input.deflator)?;
    let (o, m) = (input.outcome, input.measure);

    let run = |v: Variant| -> Result<EstimationResult> {
        let relabel = |mut r: EstimationResult| {
            r.spec = format!("ddd:{}:{}", m.as_str(), v.as_str());
            r
        };
        match v {
            Variant::Base => estimate_ddd(&base_panel, o, m).map(relabel),
            Variant::EventYearIcdFe => estimate_with_icd_eventyear_fe(&base_panel, o, m),
            Variant::CohortAggregated => cohort_aggregated_att(&base_panel, o, Some(m)).map(|a| a.result),
            Variant::Detrended => {
                let s = lag(&detrend(&raw)?, input.base_lag)?;
                estimate_ddd(&base_panel.with_series(&s)?, o, m).map(relabel)
            }
            Variant::International => {
                let (intl, _) = build_series(&filter_international(input.events), first, last)?;
                let s = lag(&intl, input.base_lag)?;
                estimate_ddd(&base_panel.with_series(&s)?, o, m).map(relabel)
            }
            Variant::Lag5 | Variant::Lag10 => {
                let l = if v == Variant::Lag5 { 5 } else { 10 };
                estimate_ddd(&base_panel.with_series(&lag(&raw, l)?)?, o, m).map(relabel)
            }
            Variant::WithEmergency => {
                let matched = match_registry(input.registry, true, input.caliper)?;
                let (panel, _) =
                    build_panel(&matched.outcome.pairs, input.registry, &base_series, input.deflator)?;
                estimate_ddd(&panel, o, m).map(relabel)
            }
        }
    };
    Ok(variants
        .par_iter()
        .map(|&v| BatteryRow {
            variant: v,
            result: run(v).map_err(|e| e.to_string()),
        })
        .collect())
}

pub fn write_battery(path: &Path, rows: &[BatteryRow], header: Option<&FileHeader>) -> Result<()> {
    let mut out = CsvOut::create(
        path,
        header,
        &["variant", "beta3", "se", "p", "sd_m", "effect_percent", "n", "clusters", "note"],
    )?;
    for r in rows {
        match &r.result {
            Ok(res) => {
                let t = res.term("dd_m");
                let sd = res.sd_m;
                out.row([
                    r.variant.as_str().to_string(),
                    t.map(|t| t.estimate.to_string()).unwrap_or_default(),
                    t.map(|t| t.se.to_string()).unwrap_or_default(),
                    t.map(|t| t.p.to_string()).unwrap_or_default(),
                    sd.map(|v| v.to_string()).unwrap_or_default(),
                    t.zip(sd).map(|(t, s)| effect_percent(t.estimate, s).to_string()).unwrap_or_default(),
                    res.n_rows.to_string(),
                    res.n_clusters.to_string(),
                    String::new(),
                ])?;
            }
            Err(e) => out.row([
                r.variant.as_str().to_string(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                String::new(),
                e.replace(',', ";"),
            ])?,
        }
    }
    out.finish()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::N_OUTCOMES;
    use crate::stacking::{PairInfo, StackedRow};

    fn info(g: u8, s: i32, m: f64) -> PairInfo {
        PairInfo {
            treated_person_id: 0,
            control_person_id: 0,
            disease_group: DiseaseGroup::new(g).unwrap(),
            shock_year: s,
            m_nme: m,
            m_patent: 0.0,
            gender: 0,
            married: false,
            age_at_shock: 55,
            schooling_years: 12,
            liquidity: false,
            stay_days: None,
        }
    }

    /// Adds `n` pairs to a cohort; the treated arm gains `effect` after the shock.
    fn add_cohort(p: &mut Panel, g: u8, s: i32, m: f64, n: usize, effect: f64) {
        for i in 0..n {
            let idx = p.pairs.len() as u32;
            p.pairs.push(info(g, s, m));
            for (arm, treated) in [(1u64, true), (2, false)] {
                let eid = 2 * idx as u64 + arm;
                for t in -3..=1 {
                    let level = (i as f64 * 0.37).sin() + if treated { 0.2 } else { 0.0 };
                    let mut y = level + 0.1 * t as f64 + 0.01 * ((i * 3 + arm as usize + (t + 3) as usize) % 7) as f64;
                    if treated && t >= 0 {
                        y += effect;
                    }
                    let mut outcomes = [None; N_OUTCOMES];
                    outcomes[Outcome::FamilyIncome.index()] = Some(y);
                    p.rows.push(StackedRow {
                        experimental_id: eid,
                        person_id: eid,
                        pair: idx,
                        event_year: t,
                        treated,
                        outcomes,
                    });
                }
            }
        }
    }

    #[test]
    fn single_cohort_equals_its_dd() {
        let mut p = Panel::default();
        add_cohort(&mut p, 2, 2003, 0.1, 10, -0.25);
        let agg = cohort_aggregated_att(&p, Outcome::FamilyIncome, None).unwrap();
        assert_eq!(agg.cohorts.len(), 1);
        assert_eq!(agg.result.estimate("att").unwrap(), agg.cohorts[0].effect);
        assert!(agg.result.se("att").unwrap() >= 0.0);
    }

    #[test]
    fn equal_cohorts_average() {
        let mut p = Panel::default();
        add_cohort(&mut p, 2, 2003, 0.1, 10, -0.2);
        add_cohort(&mut p, 2, 2004, 0.3, 10, -0.4);
        let agg = cohort_aggregated_att(&p, Outcome::FamilyIncome, Some(Measure::Nme)).unwrap();
        let e: Vec<f64> = agg.cohorts.iter().map(|c| c.effect).collect();
        assert!((agg.result.estimate("att").unwrap() - (e[0] + e[1]) / 2.0).abs() < 1e-12);
        assert!((agg.result.estimate("att").unwrap() + 0.3).abs() < 0.05);
        // two cohorts: the WLS line passes through both effects
        let slope = agg.result.estimate("dd_m").unwrap();
        assert!((slope - (e[1] - e[0]) / 0.2).abs() < 1e-9);
    }

    #[test]
    fn missing_base_period_drops_units() {
        let mut p = Panel::default();
        add_cohort(&mut p, 2, 2003, 0.1, 5, -0.2);
        add_cohort(&mut p, 2, 2005, 0.1, 5, -0.2);
        p.rows.retain(|r| !(p.pairs[r.pair as usize].shock_year == 2005 && r.event_year == -1));
        let agg = cohort_aggregated_att(&p, Outcome::FamilyIncome, None).unwrap();
        assert_eq!(agg.cohorts.len(), 1);
        assert_eq!(agg.dropped_cohorts, 1);
        assert_eq!(agg.dropped_units, 10);
    }

    #[test]
    fn icd_fe_spec_reports_ddd_terms() {
        let mut p = Panel::default();
        for (k, s) in (2001..=2006).enumerate() {
            add_cohort(&mut p, 2, s, 0.05 * k as f64, 8, -0.3 + 0.5 * 0.05 * k as f64);
            add_cohort(&mut p, 40, s, 0.07 * k as f64, 8, -0.3 + 0.5 * 0.07 * k as f64);
        }
        let r = estimate_with_icd_eventyear_fe(&p, Outcome::FamilyIncome, Measure::Nme).unwrap();
        let names: Vec<&str> = r.terms.iter().map(|t| t.name.as_str()).collect();
        assert_eq!(names, vec!["dd", "dd_m", "post_m"]);
        assert_eq!(r.covariance.len(), 9);
        assert!((r.estimate("dd_m").unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn variant_lists() {
        assert_eq!(Variant::parse_list("all").unwrap().len(), 8);
        assert_eq!(
            Variant::parse_list("lag5, detrended").unwrap(),
            vec![Variant::Lag5, Variant::Detrended]
        );
        assert!(Variant::parse_list("lag7").is_err());
    }
}
