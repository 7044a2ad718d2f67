//! Not-yet-treated counterfactuals: a person shocked in year `s` is paired
//! with a person from the same disease group and gender who is shocked in
//! `s + 2`, by greedy nearest-neighbour matching on the logit propensity
//! score within a caliper, without replacement.

pub mod propensity;

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{CsvOut, CsvTable, FileHeader};
use crate::registry::{DiseaseGroup, IcdChapter, Registry};
use crate::stats::{sample_variance, standardized_difference};

pub use propensity::{fit_propensity, LogitModel, COVARIATE_NAMES, N_COVARIATES};

/// Years between the treated shock and the control's own shock.
pub const CONTROL_OFFSET: i32 = 2;
/// Event window relative to the treated shock, inclusive.
pub const WINDOW_START: i32 = -3;
pub const WINDOW_END: i32 = 1;
pub const DEFAULT_CALIPER: f64 = 0.2;
/// Absolute standardized difference below which a covariate is balanced.
pub const BALANCE_THRESHOLD: f64 = 0.1;

/// A shock that may enter matching as treated unit or as control.
#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    pub person_id: u64,
    pub disease_group: DiseaseGroup,
    pub gender: u8,
    pub shock_year: i32,
    pub covariates: [f64; N_COVARIATES],
    /// Every admission year of the person.
    pub admissions: Vec<i32>,
    /// Last calendar year with outcome data (death/emigration proxy).
    pub last_observed_year: Option<i32>,
}

impl Candidate {
    /// Admissible as control for a treated unit shocked in `s`.
    fn eligible_control_for(&self, s: i32) -> bool {
        let clean = !self
            .admissions
            .iter()
            .any(|&a| (s + WINDOW_START..=s + WINDOW_END).contains(&a));
        let survives = self.last_observed_year.is_none_or(|y| y >= s + WINDOW_END);
        clean && survives
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MatchedPair {
    pub treated_person_id: u64,
    pub control_person_id: u64,
    pub disease_group: DiseaseGroup,
    pub gender: u8,
    /// Treated shock year; the control's shock is `shock_year + 2`.
    pub shock_year: i32,
    pub propensity_distance: f64,
}

impl MatchedPair {
    pub fn control_shock_year(&self) -> i32 {
        self.shock_year + CONTROL_OFFSET
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Unmatched {
    pub person_id: u64,
    pub disease_group: DiseaseGroup,
    pub shock_year: i32,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatchOutcome {
    pub pairs: Vec<MatchedPair>,
    pub unmatched: Vec<Unmatched>,
    pub n_treated: usize,
    /// Absolute caliper on the logit scale.
    pub caliper: f64,
    pub sd_logit: f64,
}

impl MatchOutcome {
    pub fn match_rate(&self) -> f64 {
        if self.n_treated == 0 {
            0.0
        } else {
            self.pairs.len() as f64 / self.n_treated as f64
        }
    }
}

/// Splits the registry's shocks into potential treated units and the
/// control pool.
///
/// Treated units need a full pre-window of register years and a cohort two
/// years later in the data; every shock is a potential control.
/// Emergency-unit shocks are included only on request.
pub fn candidates_from_registry(registry: &Registry, include_emergency: bool) -> (Vec<Candidate>, Vec<Candidate>) {
    let Some((first_obs, _)) = registry.outcome_years() else {
        return (Vec::new(), Vec::new());
    };
    let last_shock = registry.shocks().iter().map(|s| s.shock_year).max().unwrap_or(i32::MIN);
    let mut treated = Vec::new();
    let mut pool = Vec::new();
    for s in registry.shocks() {
        if s.emergency && !include_emergency {
            continue;
        }
        let Some(p) = registry.person(s.person_id) else { continue };
        let c = Candidate {
            person_id: s.person_id,
            disease_group: s.disease_group,
            gender: p.gender,
            shock_year: s.shock_year,
            covariates: [
                p.birth_year as f64,
                p.schooling_years as f64,
                p.earnings_38_39,
            ],
            admissions: registry.admissions_of(s.person_id),
            last_observed_year: registry.outcomes(s.person_id).and_then(|o| o.last_year()),
        };
        if s.shock_year + WINDOW_START >= first_obs && s.shock_year + CONTROL_OFFSET <= last_shock {
            treated.push(c.clone());
        }
        pool.push(c);
    }
    (treated, pool)
}

type StratumKey = (DiseaseGroup, u8, i32);

/// Greedy caliper matching without replacement.
///
/// Strata are exact on (disease group, gender, treated shock year) with
/// controls shocked two years later. Within a stratum treated units are
/// processed by descending propensity score (ties by person id) and take
/// the nearest still-available control on the logit scale (ties by control
/// id). Pairs farther apart than `caliper_mult × SD(logit scores)` are
/// discarded and the treated unit is reported as unmatched.
pub fn match_pairs(
    treated: &[Candidate],
    pool: &[Candidate],
    model: &LogitModel<f64>,
    caliper_mult: f64,
) -> Result<MatchOutcome> {
    if !(caliper_mult >= 0.0 && caliper_mult.is_finite()) {
        return Err(Error::Validation(format!(
            "caliper multiplier must be finite and non-negative, got {caliper_mult}"
        )));
    }
    let scores: Vec<f64> = treated
        .iter()
        .chain(pool)
        .map(|c| model.linear_predictor(&c.covariates))
        .collect();
    let sd_logit = sample_variance(&scores).unwrap_or(0.0).sqrt();
    let caliper = caliper_mult * sd_logit;

    let mut strata: BTreeMap<StratumKey, (Vec<(f64, &Candidate)>, Vec<(f64, &Candidate)>)> =
        BTreeMap::new();
    for (c, &sc) in treated.iter().zip(&scores) {
        strata
            .entry((c.disease_group, c.gender, c.shock_year))
            .or_default()
            .0
            .push((sc, c));
    }
    for (c, &sc) in pool.iter().zip(&scores[treated.len()..]) {
        let key = (c.disease_group, c.gender, c.shock_year - CONTROL_OFFSET);
        if let Some(entry) = strata.get_mut(&key) {
            entry.1.push((sc, c));
        }
    }

    let results: Vec<(Vec<MatchedPair>, Vec<Unmatched>)> = strata
        .into_par_iter()
        .map(|((group, gender, s), (t, p))| match_stratum(group, gender, s, t, p, caliper))
        .collect();

    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for (p, u) in results {
        pairs.extend(p);
        unmatched.extend(u);
    }
    Ok(MatchOutcome {
        pairs,
        unmatched,
        n_treated: treated.len(),
        caliper,
        sd_logit,
    })
}

fn match_stratum(
    group: DiseaseGroup,
    gender: u8,
    s: i32,
    mut treated: Vec<(f64, &Candidate)>,
    pool: Vec<(f64, &Candidate)>,
    caliper: f64,
) -> (Vec<MatchedPair>, Vec<Unmatched>) {
    let mut controls: Vec<(f64, &Candidate)> = pool
        .into_iter()
        .filter(|(_, c)| c.eligible_control_for(s))
        .collect();
    controls.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.person_id.cmp(&b.1.person_id)));
    treated.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.person_id.cmp(&b.1.person_id)));

    let mut used = vec![false; controls.len()];
    let mut pairs = Vec::new();
    let mut unmatched = Vec::new();
    for (score, t) in treated {
        let reason = if controls.is_empty() {
            Some("empty control pool")
        } else {
            match nearest_available(&controls, &used, score, t.person_id) {
                None => Some("control pool exhausted"),
                Some((j, dist)) if dist <= caliper => {
                    used[j] = true;
                    pairs.push(MatchedPair {
                        treated_person_id: t.person_id,
                        control_person_id: controls[j].1.person_id,
                        disease_group: group,
                        gender,
                        shock_year: s,
                        propensity_distance: dist,
                    });
                    None
                }
                Some(_) => Some("no control within caliper"),
            }
        };
        if let Some(r) = reason {
            unmatched.push(Unmatched {
                person_id: t.person_id,
                disease_group: group,
                shock_year: s,
                reason: r.to_string(),
            });
        }
    }
    (pairs, unmatched)
}

fn nearest_available(
    controls: &[(f64, &Candidate)],
    used: &[bool],
    score: f64,
    treated_id: u64,
) -> Option<(usize, f64)> {
    let pos = controls.partition_point(|(s, _)| *s < score);
    let mut best: Option<(usize, f64)> = None;
    let mut consider = |j: usize| {
        if used[j] || controls[j].1.person_id == treated_id {
            return;
        }
        let d = (controls[j].0 - score).abs();
        let better = match best {
            None => true,
            Some((bj, bd)) => {
                d < bd || (d == bd && controls[j].1.person_id < controls[bj].1.person_id)
            }
        };
        if better {
            best = Some((j, d));
        }
    };
    // walk outwards until the first available control on each side
    let mut left_done = false;
    let mut j = pos;
    while j > 0 && !left_done {
        j -= 1;
        if !used[j] {
            consider(j);
            // equal-score neighbours may tie, keep scanning while the distance is unchanged
            let d = (controls[j].0 - score).abs();
            left_done = j == 0 || (controls[j - 1].0 - score).abs() > d;
        }
    }
    let mut j = pos;
    while j < controls.len() {
        if !used[j] {
            consider(j);
            let d = (controls[j].0 - score).abs();
            if j + 1 >= controls.len() || (controls[j + 1].0 - score).abs() > d {
                break;
            }
        }
        j += 1;
    }
    best
}

/// Result of matching a whole registry.
#[derive(Debug, Clone)]
pub struct RegistryMatch {
    pub outcome: MatchOutcome,
    pub model: LogitModel<f64>,
    /// Standardized differences before matching (treated vs eligible pool).
    pub prematch: [f64; N_COVARIATES],
    pub balance: BalanceReport,
}

/// Candidate extraction, propensity fit and caliper matching in one step.
///
/// The propensity model contrasts treated candidates with the pool members
/// that could serve as a control for at least one of them; a person may
/// enter both samples under different shock years.
pub fn match_registry(registry: &Registry, include_emergency: bool, caliper_mult: f64) -> Result<RegistryMatch> {
    let (treated, pool) = candidates_from_registry(registry, include_emergency);
    let keys: HashSet<StratumKey> = treated
        .iter()
        .map(|c| (c.disease_group, c.gender, c.shock_year))
        .collect();
    let pool: Vec<Candidate> = pool
        .into_iter()
        .filter(|c| keys.contains(&(c.disease_group, c.gender, c.shock_year - CONTROL_OFFSET)))
        .collect();
    let pool_keys: HashSet<StratumKey> = pool
        .iter()
        .map(|c| (c.disease_group, c.gender, c.shock_year - CONTROL_OFFSET))
        .collect();
    let treated: Vec<Candidate> = treated
        .into_iter()
        .filter(|c| pool_keys.contains(&(c.disease_group, c.gender, c.shock_year)))
        .collect();
    let tc: Vec<[f64; N_COVARIATES]> = treated.iter().map(|c| c.covariates).collect();
    let pc: Vec<[f64; N_COVARIATES]> = pool.iter().map(|c| c.covariates).collect();
    let model = fit_propensity(&tc, &pc)?;
    let prematch = covariate_differences(&tc, &pc)?;
    let outcome = match_pairs(&treated, &pool, &model, caliper_mult)?;
    let balance = balance_report(&outcome.pairs, |id| {
        registry
            .person(id)
            .map(|p| [p.birth_year as f64, p.schooling_years as f64, p.earnings_38_39])
    })?;
    Ok(RegistryMatch {
        outcome,
        model,
        prematch,
        balance,
    })
}

/// Standardized difference per covariate between two covariate samples.
pub fn covariate_differences(
    treated: &[[f64; N_COVARIATES]],
    control: &[[f64; N_COVARIATES]],
) -> Result<[f64; N_COVARIATES]> {
    let mut out = [0.0; N_COVARIATES];
    for (j, slot) in out.iter_mut().enumerate() {
        let a: Vec<f64> = treated.iter().map(|x| x[j]).collect();
        let b: Vec<f64> = control.iter().map(|x| x[j]).collect();
        *slot = standardized_difference(&a, &b)?;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceRow {
    /// `overall` or an ICD-chapter name.
    pub scope: String,
    pub covariate: String,
    pub std_diff: f64,
    pub n_pairs: usize,
    pub pass: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BalanceReport {
    pub rows: Vec<BalanceRow>,
    pub pass: bool,
}

/// Standardized differences of the matching covariates between matched
/// treated and control units, overall and per ICD chapter (chapters with
/// fewer than two pairs are skipped).
pub fn balance_report<F>(pairs: &[MatchedPair], covariates: F) -> Result<BalanceReport>
where
    F: Fn(u64) -> Option<[f64; N_COVARIATES]>,
{
    if pairs.is_empty() {
        return Err(Error::Validation("balance report needs at least one pair".into()));
    }
    let lookup = |id: u64| {
        covariates(id).ok_or_else(|| Error::Validation(format!("no covariates for person {id}")))
    };
    let mut scopes: BTreeMap<Option<IcdChapter>, (Vec<[f64; 3]>, Vec<[f64; 3]>)> = BTreeMap::new();
    for p in pairs {
        let t = lookup(p.treated_person_id)?;
        let c = lookup(p.control_person_id)?;
        for key in [None, Some(p.disease_group.chapter())] {
            let e = scopes.entry(key).or_default();
            e.0.push(t);
            e.1.push(c);
        }
    }
    let mut rows = Vec::new();
    for (scope, (t, c)) in &scopes {
        if scope.is_some() && t.len() < 2 {
            continue;
        }
        let d = covariate_differences(t, c)?;
        for (j, name) in COVARIATE_NAMES.iter().enumerate() {
            rows.push(BalanceRow {
                scope: scope.map(|s| s.name()).unwrap_or("overall").to_string(),
                covariate: name.to_string(),
                std_diff: d[j],
                n_pairs: t.len(),
                pass: d[j].abs() < BALANCE_THRESHOLD,
            });
        }
    }
    let pass = rows.iter().all(|r| r.pass);
    Ok(BalanceReport { rows, pass })
}

/// Checks the structural guarantees of a matching run.
pub fn verify_pairs(pairs: &[MatchedPair], caliper: f64) -> Result<()> {
    let mut seen = HashSet::new();
    for p in pairs {
        if !seen.insert((p.control_person_id, p.control_shock_year())) {
            return Err(Error::Validation(format!(
                "control {} used twice",
                p.control_person_id
            )));
        }
        if p.propensity_distance > caliper {
            return Err(Error::Validation(format!(
                "pair ({}, {}) exceeds caliper",
                p.treated_person_id, p.control_person_id
            )));
        }
    }
    Ok(())
}

pub fn write_pairs(path: &Path, pairs: &[MatchedPair], header: Option<&FileHeader>) -> Result<()> {
    let mut out = CsvOut::create(
        path,
        header,
        &["treated_id", "control_id", "group", "s", "gender", "distance"],
    )?;
    for p in pairs {
        out.row([
            p.treated_person_id.to_string(),
            p.control_person_id.to_string(),
            p.disease_group.to_string(),
            p.shock_year.to_string(),
            p.gender.to_string(),
            p.propensity_distance.to_string(),
        ])?;
    }
    out.finish()
}

pub fn read_pairs(path: &Path) -> Result<Vec<MatchedPair>> {
    let table = CsvTable::read(path, &["treated_id", "control_id", "group", "s", "distance"])?;
    let mut pairs = Vec::with_capacity(table.len());
    for row in table.rows() {
        let g: u8 = row.parse("group")?;
        pairs.push(MatchedPair {
            treated_person_id: row.parse("treated_id")?,
            control_person_id: row.parse("control_id")?,
            disease_group: DiseaseGroup::new(g).map_err(|e| row.error(e.to_string()))?,
            gender: row.parse_opt("gender")?.unwrap_or(0),
            shock_year: row.parse("s")?,
            propensity_distance: row.finite("distance")?,
        });
    }
    Ok(pairs)
}

/// Writes post-matching balance rows, preceded by `prematch` rows when given.
pub fn write_balance(
    path: &Path,
    report: &BalanceReport,
    prematch: Option<&[f64; N_COVARIATES]>,
    header: Option<&FileHeader>,
) -> Result<()> {
    let mut out = CsvOut::create(
        path,
        header,
        &["scope", "covariate", "std_diff", "n_pairs", "pass"],
    )?;
    if let Some(d) = prematch {
        for (name, v) in COVARIATE_NAMES.iter().zip(d) {
            out.row([
                "prematch".to_string(),
                name.to_string(),
                v.to_string(),
                String::new(),
                u8::from(v.abs() < BALANCE_THRESHOLD).to_string(),
            ])?;
        }
    }
    for r in &report.rows {
        out.row([
            r.scope.clone(),
            r.covariate.clone(),
            r.std_diff.to_string(),
            r.n_pairs.to_string(),
            u8::from(r.pass).to_string(),
        ])?;
    }
    out.finish()
}
