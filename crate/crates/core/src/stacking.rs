//! Expansion of matched pairs into the stacked event-time panel.
//!
//! Each pair contributes two fresh experimental ids — one for the treated
//! person, one for the control — so a person that appears in several pairs
//! enters the panel as several independent units. Both arms run on the
//! treated person's clock: calendar years `s−3 ..= s+1`.

use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::innovation::{InnovationSeries, Measure};
use crate::io::{fmt_opt, CsvOut, FileHeader};
use crate::matching::{MatchedPair, CONTROL_OFFSET, WINDOW_END, WINDOW_START};
use crate::registry::{ihs, Deflator, DiseaseGroup, Outcome, Registry, N_OUTCOMES};

/// Event years with their own dummies; −3 and −1 are the references.
pub const EVENT_DUMMY_YEARS: [i32; 3] = [-2, 0, 1];

/// Pair-level attributes; subsamples are keyed on the treated member.
#[derive(Debug, Clone, PartialEq)]
pub struct PairInfo {
    pub treated_person_id: u64,
    pub control_person_id: u64,
    pub disease_group: DiseaseGroup,
    pub shock_year: i32,
    pub m_nme: f64,
    pub m_patent: f64,
    pub gender: u8,
    pub married: bool,
    pub age_at_shock: i32,
    pub schooling_years: u32,
    pub liquidity: bool,
    pub stay_days: Option<u32>,
}

impl PairInfo {
    pub fn m(&self, measure: Measure) -> f64 {
        match measure {
            Measure::Nme => self.m_nme,
            Measure::Patent => self.m_patent,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StackedRow {
    pub experimental_id: u64,
    pub person_id: u64,
    /// Index into [`Panel::pairs`].
    pub pair: u32,
    pub event_year: i32,
    pub treated: bool,
    /// Deflated, IHS-transformed outcomes; `None` where absent.
    pub outcomes: [Option<f64>; N_OUTCOMES],
}

impl StackedRow {
    pub fn post(&self) -> bool {
        self.event_year >= 0
    }

    pub fn dd(&self) -> bool {
        self.treated && self.post()
    }

    pub fn outcome(&self, o: Outcome) -> Option<f64> {
        self.outcomes[o.index()]
    }
}

/// Stacked panel in canonical `(experimental_id, event_year)` order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Panel {
    pub pairs: Vec<PairInfo>,
    pub rows: Vec<StackedRow>,
}

impl Panel {
    pub fn pair_of(&self, row: &StackedRow) -> &PairInfo {
        &self.pairs[row.pair as usize]
    }

    pub fn calendar_year(&self, row: &StackedRow) -> i32 {
        self.pair_of(row).shock_year + row.event_year
    }

    pub fn m(&self, row: &StackedRow, measure: Measure) -> f64 {
        self.pair_of(row).m(measure)
    }

    /// Sub-panel of the pairs satisfying `keep`; pair indices are remapped.
    pub fn filter_pairs<F: Fn(&PairInfo) -> bool>(&self, keep: F) -> Panel {
        let mut remap = vec![u32::MAX; self.pairs.len()];
        let mut pairs = Vec::new();
        for (i, p) in self.pairs.iter().enumerate() {
            if keep(p) {
                remap[i] = pairs.len() as u32;
                pairs.push(p.clone());
            }
        }
        let rows = self
            .rows
            .iter()
            .filter(|r| remap[r.pair as usize] != u32::MAX)
            .map(|r| StackedRow {
                pair: remap[r.pair as usize],
                ..r.clone()
            })
            .collect();
        Panel { pairs, rows }
    }

    /// Replaces each pair's innovation levels from another (e.g. detrended
    /// or differently lagged) series.
    pub fn with_series(&self, series: &InnovationSeries) -> Result<Panel> {
        let mut out = self.clone();
        for p in &mut out.pairs {
            let (nme, pat) = levels(series, p.disease_group, p.shock_year)?;
            p.m_nme = nme;
            p.m_patent = pat;
        }
        Ok(out)
    }

    pub fn write_csv(&self, path: &Path, header: Option<&FileHeader>) -> Result<()> {
        let mut cols = vec![
            "experimental_id", "person_id", "group", "s", "t", "treated", "post", "dd", "m_nme",
            "m_patent",
        ];
        cols.extend(Outcome::ALL.iter().map(|o| o.column()));
        let mut out = CsvOut::create(path, header, &cols)?;
        for r in &self.rows {
            let p = self.pair_of(r);
            let mut fields = vec![
                r.experimental_id.to_string(),
                r.person_id.to_string(),
                p.disease_group.to_string(),
                p.shock_year.to_string(),
                r.event_year.to_string(),
                u8::from(r.treated).to_string(),
                u8::from(r.post()).to_string(),
                u8::from(r.dd()).to_string(),
                p.m_nme.to_string(),
                p.m_patent.to_string(),
            ];
            fields.extend(r.outcomes.iter().map(|v| fmt_opt(*v)));
            out.row(fields)?;
        }
        out.finish()
    }
}

/// Non-fatal stacking events.
#[derive(Debug, Clone, PartialEq)]
pub struct StackWarning {
    pub treated_person_id: u64,
    pub control_person_id: u64,
    pub message: String,
}

fn levels(series: &InnovationSeries, g: DiseaseGroup, s: i32) -> Result<(f64, f64)> {
    let get = |m| {
        series.value(g, s, m).ok_or_else(|| {
            Error::Validation(format!(
                "innovation series {:?} does not cover shock year {s}",
                series.year_range()
            ))
        })
    };
    Ok((get(Measure::Nme)?, get(Measure::Patent)?))
}

/// Stacks `pairs` into the event-time panel.
///
/// `series` must already be lagged: the level attached to a pair is the
/// series value at the treated shock year. Monetary outcomes are deflated
/// to base-year prices and then IHS-transformed. Person-years without any
/// outcome record are omitted; a pair whose treated member has no
/// observable window year is dropped with a warning.
pub fn build_panel(
    pairs: &[MatchedPair],
    registry: &Registry,
    series: &InnovationSeries,
    deflator: &Deflator,
) -> Result<(Panel, Vec<StackWarning>)> {
    let expanded: Vec<Result<Option<(PairInfo, [Vec<StackedRow>; 2])>>> = pairs
        .par_iter()
        .map(|pair| expand_pair(pair, registry, series, deflator))
        .collect();

    let mut panel = Panel::default();
    let mut warnings = Vec::new();
    for (pair, res) in pairs.iter().zip(expanded) {
        match res? {
            Some((info, arms)) => {
                let idx = panel.pairs.len() as u32;
                for (arm, rows) in arms.into_iter().enumerate() {
                    let eid = 2 * idx as u64 + arm as u64 + 1;
                    panel.rows.extend(rows.into_iter().map(|r| StackedRow {
                        experimental_id: eid,
                        pair: idx,
                        ..r
                    }));
                }
                panel.pairs.push(info);
            }
            None => {
                log::warn!(
                    "pair ({}, {}) dropped: treated unit has no observable outcome years",
                    pair.treated_person_id,
                    pair.control_person_id
                );
                warnings.push(StackWarning {
                    treated_person_id: pair.treated_person_id,
                    control_person_id: pair.control_person_id,
                    message: "treated unit has no observable outcome years".into(),
                });
            }
        }
    }
    Ok((panel, warnings))
}

fn expand_pair(
    pair: &MatchedPair,
    registry: &Registry,
    series: &InnovationSeries,
    deflator: &Deflator,
) -> Result<Option<(PairInfo, [Vec<StackedRow>; 2])>> {
    let s = pair.shock_year;
    // the control's own shock at s+2 must fall outside the window
    debug_assert!(s + CONTROL_OFFSET > s + WINDOW_END);
    let treated = registry.person(pair.treated_person_id).ok_or_else(|| {
        Error::Validation(format!("pair references unknown person {}", pair.treated_person_id))
    })?;
    if registry.person(pair.control_person_id).is_none() {
        return Err(Error::Validation(format!(
            "pair references unknown person {}",
            pair.control_person_id
        )));
    }
    let arm = |pid: u64, is_treated: bool| -> Result<Vec<StackedRow>> {
        let mut rows = Vec::with_capacity(5);
        let Some(series) = registry.outcomes(pid) else {
            return Ok(rows);
        };
        for t in WINDOW_START..=WINDOW_END {
            let year = s + t;
            let Some(rec) = series.years.get(&year) else { continue };
            let mut outcomes = [None; N_OUTCOMES];
            for (slot, v) in outcomes.iter_mut().zip(rec.0.iter()) {
                if let Some(v) = v {
                    *slot = Some(ihs(deflator.deflate(*v, year)?)?);
                }
            }
            rows.push(StackedRow {
                experimental_id: 0,
                person_id: pid,
                pair: 0,
                event_year: t,
                treated: is_treated,
                outcomes,
            });
        }
        Ok(rows)
    };
    let t_rows = arm(pair.treated_person_id, true)?;
    if t_rows.is_empty() {
        return Ok(None);
    }
    let c_rows = arm(pair.control_person_id, false)?;
    let (m_nme, m_patent) = levels(series, pair.disease_group, s)?;
    let stay_days = registry
        .shocks()
        .iter()
        .find(|h| h.person_id == pair.treated_person_id && h.shock_year == s)
        .and_then(|h| h.stay_days);
    let info = PairInfo {
        treated_person_id: pair.treated_person_id,
        control_person_id: pair.control_person_id,
        disease_group: pair.disease_group,
        shock_year: s,
        m_nme,
        m_patent,
        gender: treated.gender,
        married: treated.marital_flag,
        age_at_shock: treated.age_in(s),
        schooling_years: treated.schooling_years,
        liquidity: treated.liquidity_flag,
        stay_days,
    };
    Ok(Some((info, [t_rows, c_rows])))
}

/// Event-study indicator columns: `ev{t}` and `treated×ev{t}` for the
/// non-reference event years.
#[derive(Debug, Clone, PartialEq)]
pub struct EventDummies {
    pub names: Vec<String>,
    pub columns: Vec<Vec<f64>>,
}

pub fn event_dummy_name(t: i32, treated: bool) -> String {
    let base = if t < 0 {
        format!("ev_m{}", -t)
    } else {
        format!("ev_{t}")
    };
    if treated {
        format!("treated_{base}")
    } else {
        base
    }
}

/// Indicator columns over `rows` for event years −2, 0 and +1 and their
/// interactions with treatment.
pub fn attach_event_dummies(rows: &[&StackedRow]) -> Result<EventDummies> {
    if rows.is_empty() {
        return Err(Error::Validation("event dummies need a non-empty panel".into()));
    }
    let mut names = Vec::new();
    let mut columns = Vec::new();
    for &t in &EVENT_DUMMY_YEARS {
        names.push(event_dummy_name(t, false));
        columns.push(rows.iter().map(|r| f64::from(u8::from(r.event_year == t))).collect());
    }
    for &t in &EVENT_DUMMY_YEARS {
        names.push(event_dummy_name(t, true));
        columns.push(
            rows.iter()
                .map(|r| f64::from(u8::from(r.treated && r.event_year == t)))
                .collect(),
        );
    }
    Ok(EventDummies { names, columns })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::{
        HealthShock, OutcomeRecord, OutcomeSeries, PersonRecord, RegistryConfig, Role,
    };
    use std::collections::BTreeMap;

    fn person(id: u64) -> PersonRecord {
        PersonRecord {
            person_id: id,
            birth_year: 1950,
            gender: 1,
            schooling_years: 12,
            earnings_38_39_sek: 1e5,
            earnings_38_39: ihs(1e5).unwrap(),
            family_id: id,
            role: Role::Index,
            liquidity_flag: false,
            marital_flag: true,
        }
    }

    fn series(id: u64, years: impl Iterator<Item = i32>) -> OutcomeSeries {
        let mut map = BTreeMap::new();
        for y in years {
            let mut rec = OutcomeRecord([None; N_OUTCOMES]);
            rec.set(Outcome::FamilyIncome, Some(1000.0 * y as f64));
            map.insert(y, rec);
        }
        OutcomeSeries {
            person_id: id,
            years: map,
        }
    }

    fn fixture(control_years: Vec<i32>) -> (Registry, Vec<MatchedPair>, InnovationSeries) {
        let g = DiseaseGroup::new(5).unwrap();
        let shock = |id, s| HealthShock {
            person_id: id,
            disease_group: g,
            shock_year: s,
            emergency: false,
            stay_days: Some(4),
        };
        let reg = Registry::from_parts(
            vec![person(1), person(2), person(3)],
            vec![
                series(1, 2000..=2012),
                series(2, control_years.into_iter()),
                series(3, 2000..=2012),
            ],
            vec![shock(1, 2005), shock(2, 2007), shock(3, 2009)],
            &RegistryConfig::default(),
        )
        .unwrap();
        let pairs = vec![
            MatchedPair {
                treated_person_id: 1,
                control_person_id: 2,
                disease_group: g,
                gender: 1,
                shock_year: 2005,
                propensity_distance: 0.0,
            },
            MatchedPair {
                treated_person_id: 2,
                control_person_id: 3,
                disease_group: g,
                gender: 1,
                shock_year: 2007,
                propensity_distance: 0.0,
            },
        ];
        let mut cells = BTreeMap::new();
        cells.insert(
            g,
            (2000..=2012)
                .map(|y| crate::innovation::StockCell {
                    nme_stock: (y - 2000) as f64 / 100.0,
                    patent_stock: 0.5,
                })
                .collect(),
        );
        (reg, pairs, InnovationSeries::from_cells(2000, 2012, cells).unwrap())
    }

    #[test]
    fn full_pair_gives_ten_rows() {
        let (reg, pairs, s) = fixture((2000..=2012).collect());
        let defl = Deflator::identity(2000..=2021, 2021);
        let (panel, warn) = build_panel(&pairs[..1], &reg, &s, &defl).unwrap();
        assert!(warn.is_empty());
        assert_eq!(panel.rows.len(), 10);
        for treated in [true, false] {
            let arm: Vec<_> = panel.rows.iter().filter(|r| r.treated == treated).collect();
            assert_eq!(arm.iter().filter(|r| r.post()).count(), 2);
        }
        assert_eq!(panel.rows.iter().filter(|r| r.dd()).count(), 2);
        assert_eq!(panel.pairs[0].m_nme, 0.05);
        for r in &panel.rows {
            assert_eq!(panel.calendar_year(r) - 2005, r.event_year);
            let want = ihs(1000.0 * panel.calendar_year(r) as f64).unwrap();
            assert!((r.outcome(Outcome::FamilyIncome).unwrap() - want).abs() < 1e-12);
        }
    }

    #[test]
    fn missing_control_year_and_dual_roles() {
        let (reg, pairs, s) = fixture((2000..=2005).collect());
        let defl = Deflator::identity(2000..=2021, 2021);
        let (panel, _) = build_panel(&pairs[..1], &reg, &s, &defl).unwrap();
        assert_eq!(panel.rows.len(), 9);

        let (reg, pairs, s) = fixture((2000..=2012).collect());
        let (panel, _) = build_panel(&pairs, &reg, &s, &defl).unwrap();
        let ids: std::collections::BTreeSet<u64> = panel
            .rows
            .iter()
            .filter(|r| r.person_id == 2)
            .map(|r| r.experimental_id)
            .collect();
        assert_eq!(ids.len(), 2);
        assert_eq!(panel.rows.len(), 20);
    }

    #[test]
    fn treated_without_data_is_dropped() {
        let (reg, pairs, s) = fixture((2000..=2012).collect());
        let defl = Deflator::identity(2000..=2021, 2021);
        let mut p = pairs[0].clone();
        p.shock_year = 1990;
        // the innovation series does not cover 1990 either, but dropped pairs never read it
        let (panel, warn) = build_panel(&[p], &reg, &s, &defl).unwrap();
        assert!(panel.rows.is_empty());
        assert_eq!(warn.len(), 1);
    }

    #[test]
    fn event_dummies() {
        let (reg, pairs, s) = fixture((2000..=2012).collect());
        let defl = Deflator::identity(2000..=2021, 2021);
        let (panel, _) = build_panel(&pairs[..1], &reg, &s, &defl).unwrap();
        let rows: Vec<&StackedRow> = panel.rows.iter().collect();
        let d = attach_event_dummies(&rows).unwrap();
        assert_eq!(d.names.len(), 6);
        for (i, r) in rows.iter().enumerate() {
            if r.event_year == -3 {
                assert!(d.columns.iter().all(|c| c[i] == 0.0));
            }
            if r.treated && r.event_year == 0 {
                let j = d.names.iter().position(|n| n == "treated_ev_0").unwrap();
                assert_eq!(d.columns[j][i], 1.0);
            }
        }
        let sums: Vec<f64> = d.columns.iter().map(|c| c.iter().sum()).collect();
        assert_eq!(sums, vec![2.0, 2.0, 2.0, 1.0, 1.0, 1.0]);
        assert!(attach_event_dummies(&[]).is_err());
    }
}
