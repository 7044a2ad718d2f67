//! Register-style data model: persons, yearly outcomes, health shocks and
//! the price deflator, with CSV ingestion that validates rather than repairs.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{fmt_opt, CsvOut, CsvTable, FileHeader};
use crate::scalar::Scalar;

pub const N_DISEASE_GROUPS: u8 = 91;

/// Inverse hyperbolic sine, `ln(x + sqrt(x² + 1))`.
///
/// Evaluated in the odd-symmetric form so that `ihs(-x) == -ihs(x)` holds
/// bit-for-bit and large negative inputs do not cancel catastrophically.
pub fn ihs<T: Scalar>(x: T) -> Result<T> {
    if !x.is_finite() {
        return Err(Error::Domain(format!("ihs of non-finite value {x}")));
    }
    Ok(x.asinh())
}

/// Opaque disease-group identifier in `1..=91`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct DiseaseGroup(u8);

impl DiseaseGroup {
    pub fn new(id: u8) -> Result<Self> {
        if (1..=N_DISEASE_GROUPS).contains(&id) {
            Ok(Self(id))
        } else {
            Err(Error::Validation(format!(
                "disease_group {id} outside 1..{N_DISEASE_GROUPS}"
            )))
        }
    }

    pub fn id(self) -> u8 {
        self.0
    }

    pub fn all() -> impl Iterator<Item = DiseaseGroup> {
        (1..=N_DISEASE_GROUPS).map(DiseaseGroup)
    }

    /// Malignant and in-situ neoplasms.
    pub fn is_cancer(self) -> bool {
        self.0 <= 24
    }

    pub fn chapter(self) -> IcdChapter {
        IcdChapter::of_group(self.0)
    }
}

impl fmt::Display for DiseaseGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// The thirteen ICD-chapter groupings of the 91 disease groups.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum IcdChapter {
    Neoplasms,
    Circulatory,
    Mental,
    Nervous,
    Digestive,
    Musculoskeletal,
    Urinary,
    Respiratory,
    Metabolic,
    BloodForming,
    SenseOrgans,
    Skin,
    Infectious,
}

impl IcdChapter {
    pub const ALL: [IcdChapter; 13] = [
        IcdChapter::Neoplasms,
        IcdChapter::Circulatory,
        IcdChapter::Mental,
        IcdChapter::Nervous,
        IcdChapter::Digestive,
        IcdChapter::Musculoskeletal,
        IcdChapter::Urinary,
        IcdChapter::Respiratory,
        IcdChapter::Metabolic,
        IcdChapter::BloodForming,
        IcdChapter::SenseOrgans,
        IcdChapter::Skin,
        IcdChapter::Infectious,
    ];

    fn of_group(g: u8) -> Self {
        match g {
            1..=25 => IcdChapter::Neoplasms,
            26..=35 => IcdChapter::Circulatory,
            36..=42 => IcdChapter::Mental,
            43..=48 => IcdChapter::Nervous,
            49..=55 => IcdChapter::Digestive,
            56..=59 => IcdChapter::Musculoskeletal,
            60..=64 => IcdChapter::Urinary,
            65..=68 => IcdChapter::Respiratory,
            69..=72 => IcdChapter::Metabolic,
            73..=75 => IcdChapter::BloodForming,
            76..=81 => IcdChapter::SenseOrgans,
            82..=83 => IcdChapter::Skin,
            _ => IcdChapter::Infectious,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            IcdChapter::Neoplasms => "neoplasms",
            IcdChapter::Circulatory => "circulatory",
            IcdChapter::Mental => "mental",
            IcdChapter::Nervous => "nervous",
            IcdChapter::Digestive => "digestive",
            IcdChapter::Musculoskeletal => "musculoskeletal",
            IcdChapter::Urinary => "urinary",
            IcdChapter::Respiratory => "respiratory",
            IcdChapter::Metabolic => "metabolic",
            IcdChapter::BloodForming => "blood_forming",
            IcdChapter::SenseOrgans => "sense_organs",
            IcdChapter::Skin => "skin",
            IcdChapter::Infectious => "infectious",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Role {
    Index,
    Partner,
    AdultChild,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Index => "index",
            Role::Partner => "partner",
            Role::AdultChild => "adult_child",
        }
    }

    fn parse(s: &str) -> Option<Self> {
        match s {
            "index" => Some(Role::Index),
            "partner" => Some(Role::Partner),
            "adult_child" => Some(Role::AdultChild),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PersonRecord {
    pub person_id: u64,
    pub birth_year: i32,
    /// Binary code as supplied (0/1).
    pub gender: u8,
    pub schooling_years: u32,
    /// Pre-period mean earnings at ages 38–39 in SEK, as read.
    pub earnings_38_39_sek: f64,
    /// IHS of `earnings_38_39_sek`, the matching covariate.
    pub earnings_38_39: f64,
    pub family_id: u64,
    pub role: Role,
    pub liquidity_flag: bool,
    pub marital_flag: bool,
}

impl PersonRecord {
    pub fn age_in(&self, year: i32) -> i32 {
        year - self.birth_year
    }
}

/// Outcome columns carried per person-year.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Outcome {
    FamilyIncome,
    OwnIncome,
    PartnerIncome,
    Wages,
    Unemployment,
    Capital,
    Sickness,
    Disability,
    ChildIncome,
    ChildWages,
    ChildWelfare,
}

pub const N_OUTCOMES: usize = 11;

impl Outcome {
    pub const ALL: [Outcome; N_OUTCOMES] = [
        Outcome::FamilyIncome,
        Outcome::OwnIncome,
        Outcome::PartnerIncome,
        Outcome::Wages,
        Outcome::Unemployment,
        Outcome::Capital,
        Outcome::Sickness,
        Outcome::Disability,
        Outcome::ChildIncome,
        Outcome::ChildWages,
        Outcome::ChildWelfare,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Column name in `outcomes.csv`.
    pub fn column(self) -> &'static str {
        match self {
            Outcome::FamilyIncome => "family_income",
            Outcome::OwnIncome => "own_income",
            Outcome::PartnerIncome => "partner_income",
            Outcome::Wages => "wages",
            Outcome::Unemployment => "unemployment",
            Outcome::Capital => "capital",
            Outcome::Sickness => "sickness",
            Outcome::Disability => "disability",
            Outcome::ChildIncome => "child_income",
            Outcome::ChildWages => "child_wages",
            Outcome::ChildWelfare => "child_welfare",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Outcome::ALL
            .into_iter()
            .find(|o| o.column() == name)
            .ok_or_else(|| Error::Validation(format!("unknown outcome '{name}'")))
    }
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.column())
    }
}

/// One calendar year of outcomes; `None` marks an absent value.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OutcomeRecord(pub [Option<f64>; N_OUTCOMES]);

impl OutcomeRecord {
    pub fn get(&self, o: Outcome) -> Option<f64> {
        self.0[o.index()]
    }

    pub fn set(&mut self, o: Outcome, v: Option<f64>) {
        self.0[o.index()] = v;
    }
}

/// Per-person map from calendar year to outcomes. Years the person was not
/// alive for in full are simply absent.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct OutcomeSeries {
    pub person_id: u64,
    pub years: BTreeMap<i32, OutcomeRecord>,
}

impl OutcomeSeries {
    pub fn last_year(&self) -> Option<i32> {
        self.years.keys().next_back().copied()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HealthShock {
    pub person_id: u64,
    pub disease_group: DiseaseGroup,
    pub shock_year: i32,
    /// Admission through an emergency unit (robustness sample only).
    pub emergency: bool,
    pub stay_days: Option<u32>,
}

/// Price index by calendar year; the base year carries index 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Deflator {
    base_year: i32,
    index: BTreeMap<i32, f64>,
}

pub const DEFAULT_BASE_YEAR: i32 = 2021;

impl Deflator {
    pub fn new(index: BTreeMap<i32, f64>, base_year: i32) -> Result<Self> {
        for (&y, &v) in &index {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Validation(format!(
                    "deflator index for {y} must be strictly positive, got {v}"
                )));
            }
        }
        match index.get(&base_year) {
            None => Err(Error::Validation(format!(
                "deflator lacks base year {base_year}"
            ))),
            Some(&b) if (b - 1.0).abs() > 1e-12 => Err(Error::Validation(format!(
                "deflator base year {base_year} must have index 1, got {b}"
            ))),
            Some(_) => Ok(Self { base_year, index }),
        }
    }

    /// Identity deflator covering `years`.
    pub fn identity(years: std::ops::RangeInclusive<i32>, base_year: i32) -> Self {
        let mut index: BTreeMap<i32, f64> = years.map(|y| (y, 1.0)).collect();
        index.insert(base_year, 1.0);
        Self { base_year, index }
    }

    pub fn base_year(&self) -> i32 {
        self.base_year
    }

    pub fn index(&self, year: i32) -> Result<f64> {
        self.index
            .get(&year)
            .copied()
            .ok_or_else(|| Error::Validation(format!("deflator has no index for year {year}")))
    }

    /// Converts a nominal amount of `year` into base-year money.
    pub fn deflate(&self, x: f64, year: i32) -> Result<f64> {
        Ok(x / self.index(year)?)
    }

    /// Inverse of [`Deflator::deflate`].
    pub fn inflate(&self, x: f64, year: i32) -> Result<f64> {
        Ok(x * self.index(year)?)
    }

    pub fn load(path: &Path, base_year: i32) -> Result<Self> {
        let table = CsvTable::read(path, &["year", "index"])?;
        let mut index = BTreeMap::new();
        for row in table.rows() {
            let year: i32 = row.parse("year")?;
            let v = row.finite("index")?;
            if index.insert(year, v).is_some() {
                return Err(row.error(format!("duplicate deflator year {year}")));
            }
        }
        Self::new(index, base_year)
    }
}

/// Validation bounds applied at load.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegistryConfig {
    pub birth_year_min: i32,
    pub birth_year_max: i32,
    pub index_age_min: i32,
    pub index_age_max: i32,
}

impl Default for RegistryConfig {
    fn default() -> Self {
        Self {
            birth_year_min: 1900,
            birth_year_max: 2030,
            index_age_min: 40,
            index_age_max: 70,
        }
    }
}

/// Immutable in-memory register.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Registry {
    persons: BTreeMap<u64, PersonRecord>,
    outcomes: BTreeMap<u64, OutcomeSeries>,
    /// Sorted by (person_id, shock_year).
    shocks: Vec<HealthShock>,
}

pub const PERSON_COLUMNS: [&str; 9] = [
    "person_id",
    "birth_year",
    "gender",
    "schooling_years",
    "earnings_38_39",
    "family_id",
    "role",
    "liquidity_flag",
    "marital_flag",
];

const SHOCK_REQUIRED: [&str; 3] = ["person_id", "shock_year", "disease_group"];

impl Registry {
    /// Builds and validates a registry from in-memory parts.
    pub fn from_parts(
        persons: Vec<PersonRecord>,
        outcomes: Vec<OutcomeSeries>,
        mut shocks: Vec<HealthShock>,
        config: &RegistryConfig,
    ) -> Result<Self> {
        let mut pmap = BTreeMap::new();
        for p in persons {
            if !(config.birth_year_min..=config.birth_year_max).contains(&p.birth_year) {
                return Err(Error::Validation(format!(
                    "person {} birth_year {} outside {}..={}",
                    p.person_id, p.birth_year, config.birth_year_min, config.birth_year_max
                )));
            }
            let id = p.person_id;
            if pmap.insert(id, p).is_some() {
                return Err(Error::Validation(format!("duplicate person_id {id}")));
            }
        }
        let mut omap = BTreeMap::new();
        for s in outcomes {
            if !pmap.contains_key(&s.person_id) {
                return Err(Error::Validation(format!(
                    "outcomes for unknown person_id {}",
                    s.person_id
                )));
            }
            for rec in s.years.values() {
                if rec.0.iter().flatten().any(|v| !v.is_finite()) {
                    return Err(Error::Validation(format!(
                        "non-finite outcome for person {}",
                        s.person_id
                    )));
                }
            }
            omap.insert(s.person_id, s);
        }
        shocks.sort_by_key(|s| (s.person_id, s.shock_year, s.disease_group));
        for s in &shocks {
            let p = pmap.get(&s.person_id).ok_or_else(|| {
                Error::Validation(format!("shock for unknown person_id {}", s.person_id))
            })?;
            if p.role != Role::Index {
                return Err(Error::Validation(format!(
                    "shock for person {} whose role is {}",
                    s.person_id,
                    p.role.as_str()
                )));
            }
            let age = p.age_in(s.shock_year);
            if !(config.index_age_min..=config.index_age_max).contains(&age) {
                return Err(Error::Validation(format!(
                    "person {} shocked at age {age}, outside {}..={}",
                    s.person_id, config.index_age_min, config.index_age_max
                )));
            }
        }
        check_clean_windows(&shocks)?;
        Ok(Self {
            persons: pmap,
            outcomes: omap,
            shocks,
        })
    }

    pub fn persons(&self) -> impl Iterator<Item = &PersonRecord> {
        self.persons.values()
    }

    pub fn person(&self, id: u64) -> Option<&PersonRecord> {
        self.persons.get(&id)
    }

    pub fn n_persons(&self) -> usize {
        self.persons.len()
    }

    pub fn outcomes(&self, id: u64) -> Option<&OutcomeSeries> {
        self.outcomes.get(&id)
    }

    pub fn shocks(&self) -> &[HealthShock] {
        &self.shocks
    }

    /// All admission years recorded for a person, ascending.
    pub fn admissions_of(&self, id: u64) -> Vec<i32> {
        let start = self.shocks.partition_point(|s| s.person_id < id);
        self.shocks[start..]
            .iter()
            .take_while(|s| s.person_id == id)
            .map(|s| s.shock_year)
            .collect()
    }

    pub fn outcome_years(&self) -> Option<(i32, i32)> {
        let mut lo = i32::MAX;
        let mut hi = i32::MIN;
        for s in self.outcomes.values() {
            if let (Some(a), Some(b)) = (s.years.keys().next(), s.years.keys().next_back()) {
                lo = lo.min(*a);
                hi = hi.max(*b);
            }
        }
        (lo <= hi).then_some((lo, hi))
    }

    /// Writes the three register files in canonical order.
    pub fn write_csv(&self, dir: &Path, header: Option<&FileHeader>) -> Result<()> {
        let mut out = CsvOut::create(&dir.join("persons.csv"), header, &PERSON_COLUMNS)?;
        for p in self.persons.values() {
            out.row([
                p.person_id.to_string(),
                p.birth_year.to_string(),
                p.gender.to_string(),
                p.schooling_years.to_string(),
                p.earnings_38_39_sek.to_string(),
                p.family_id.to_string(),
                p.role.as_str().to_string(),
                u8::from(p.liquidity_flag).to_string(),
                u8::from(p.marital_flag).to_string(),
            ])?;
        }
        out.finish()?;

        let mut cols = vec!["person_id", "year"];
        cols.extend(Outcome::ALL.iter().map(|o| o.column()));
        let mut out = CsvOut::create(&dir.join("outcomes.csv"), header, &cols)?;
        for s in self.outcomes.values() {
            for (year, rec) in &s.years {
                let mut fields = vec![s.person_id.to_string(), year.to_string()];
                fields.extend(rec.0.iter().map(|v| fmt_opt(*v)));
                out.row(fields)?;
            }
        }
        out.finish()?;

        let mut out = CsvOut::create(
            &dir.join("shocks.csv"),
            header,
            &[
                "person_id",
                "shock_year",
                "disease_group",
                "emergency",
                "stay_days",
            ],
        )?;
        for s in &self.shocks {
            out.row([
                s.person_id.to_string(),
                s.shock_year.to_string(),
                s.disease_group.to_string(),
                u8::from(s.emergency).to_string(),
                s.stay_days.map(|d| d.to_string()).unwrap_or_default(),
            ])?;
        }
        out.finish()
    }
}

fn check_clean_windows(sorted: &[HealthShock]) -> Result<()> {
    for (i, s) in sorted.iter().enumerate() {
        let prior = sorted[..i]
            .iter()
            .rev()
            .take_while(|p| p.person_id == s.person_id)
            .find(|p| p.shock_year < s.shock_year && p.shock_year >= s.shock_year - 3);
        if let Some(p) = prior {
            return Err(Error::Validation(format!(
                "clean-window violation: person {} shocked in {} after an admission in {}",
                s.person_id, s.shock_year, p.shock_year
            )));
        }
        if i > 0 && sorted[i - 1].person_id == s.person_id && sorted[i - 1].shock_year == s.shock_year
        {
            return Err(Error::Validation(format!(
                "clean-window violation: person {} has two admissions in {}",
                s.person_id, s.shock_year
            )));
        }
    }
    Ok(())
}

/// Loads and validates `persons.csv`, `outcomes.csv` and `shocks.csv`.
pub fn load_registry(
    persons_file: &Path,
    outcomes_file: &Path,
    shocks_file: &Path,
    config: &RegistryConfig,
) -> Result<Registry> {
    let table = CsvTable::read(persons_file, &PERSON_COLUMNS)?;
    let mut persons = Vec::with_capacity(table.len());
    let mut seen = BTreeSet::new();
    for row in table.rows() {
        let person_id: u64 = row.parse("person_id")?;
        if !seen.insert(person_id) {
            return Err(row.error(format!("duplicate person_id {person_id}")));
        }
        let gender: u8 = row.parse("gender")?;
        if gender > 1 {
            return Err(row.error(format!("gender must be 0 or 1, got {gender}")));
        }
        let earnings = row.finite("earnings_38_39")?;
        let role_s = row.str("role")?;
        let role = Role::parse(role_s).ok_or_else(|| row.error(format!("unknown role '{role_s}'")))?;
        persons.push(PersonRecord {
            person_id,
            birth_year: row.parse("birth_year")?,
            gender,
            schooling_years: row.parse("schooling_years")?,
            earnings_38_39_sek: earnings,
            earnings_38_39: ihs(earnings)?,
            family_id: row.parse("family_id")?,
            role,
            liquidity_flag: row.flag("liquidity_flag")?,
            marital_flag: row.flag("marital_flag")?,
        });
    }

    let mut cols = vec!["person_id", "year"];
    cols.extend(Outcome::ALL.iter().map(|o| o.column()));
    let table = CsvTable::read(outcomes_file, &cols)?;
    let mut series: BTreeMap<u64, OutcomeSeries> = BTreeMap::new();
    for row in table.rows() {
        let pid: u64 = row.parse("person_id")?;
        let year: i32 = row.parse("year")?;
        let mut rec = OutcomeRecord::default();
        for o in Outcome::ALL {
            let v: Option<f64> = row.parse_opt(o.column())?;
            if let Some(x) = v {
                if !x.is_finite() {
                    return Err(row.error(format!("non-finite {}", o.column())));
                }
            }
            rec.set(o, v);
        }
        let entry = series.entry(pid).or_insert_with(|| OutcomeSeries {
            person_id: pid,
            years: BTreeMap::new(),
        });
        if entry.years.insert(year, rec).is_some() {
            return Err(row.error(format!("duplicate outcome year {year} for person {pid}")));
        }
    }

    let table = CsvTable::read(shocks_file, &SHOCK_REQUIRED)?;
    let mut shocks = Vec::with_capacity(table.len());
    for row in table.rows() {
        let g: u8 = row.parse("disease_group")?;
        let disease_group = DiseaseGroup::new(g).map_err(|e| row.error(e.to_string()))?;
        let emergency = if table.has_column("emergency") {
            row.flag("emergency")?
        } else {
            false
        };
        shocks.push(HealthShock {
            person_id: row.parse("person_id")?,
            disease_group,
            shock_year: row.parse("shock_year")?,
            emergency,
            stay_days: row.parse_opt("stay_days")?,
        });
    }

    Registry::from_parts(persons, series.into_values().collect(), shocks, config)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn ihs_reference_values() {
        assert_eq!(ihs(0.0).unwrap(), 0.0);
        let expected = (1.0f64 + 2.0f64.sqrt()).ln();
        assert!((ihs(1.0).unwrap() - expected).abs() < 1e-12);
        assert!(ihs(f64::NAN).is_err());
        assert!(ihs(f64::INFINITY).is_err());
    }

    #[test]
    fn ihs_works_in_f32() {
        let v: f32 = ihs(1.0f32).unwrap();
        assert!((v - 0.881_373_6).abs() < 1e-6);
    }

    proptest! {
        #[test]
        fn ihs_is_odd(x in -1e12f64..1e12) {
            prop_assert_eq!(ihs(-x).unwrap(), -ihs(x).unwrap());
        }

        #[test]
        fn ihs_is_increasing(a in -1e6f64..1e6, b in -1e6f64..1e6) {
            prop_assume!(a < b);
            prop_assert!(ihs(a).unwrap() < ihs(b).unwrap());
        }

        #[test]
        fn deflate_round_trips(x in -1e9f64..1e9, idx in 0.1f64..10.0) {
            let d = Deflator::new(BTreeMap::from([(2000, idx), (2021, 1.0)]), 2021).unwrap();
            let back = d.deflate(d.inflate(x, 2000).unwrap(), 2000).unwrap();
            prop_assert!((back - x).abs() <= 1e-9 * x.abs().max(1.0));
        }
    }

    #[test]
    fn deflate_examples() {
        let d = Deflator::new(BTreeMap::from([(1990, 2.0), (2021, 1.0)]), 2021).unwrap();
        assert_eq!(d.deflate(100.0, 2021).unwrap(), 100.0);
        assert_eq!(d.deflate(100.0, 1990).unwrap(), 50.0);
        let err = d.deflate(1.0, 1985).unwrap_err().to_string();
        assert!(err.contains("1985"), "{err}");
    }

    #[test]
    fn deflator_rejects_bad_index() {
        assert!(Deflator::new(BTreeMap::from([(2021, 1.0), (2000, 0.0)]), 2021).is_err());
        assert!(Deflator::new(BTreeMap::from([(2000, 1.0)]), 2021).is_err());
    }

    #[test]
    fn chapters_follow_group_table() {
        assert_eq!(DiseaseGroup::new(25).unwrap().chapter(), IcdChapter::Neoplasms);
        assert!(!DiseaseGroup::new(25).unwrap().is_cancer());
        assert_eq!(DiseaseGroup::new(28).unwrap().chapter(), IcdChapter::Circulatory);
        assert_eq!(DiseaseGroup::new(91).unwrap().chapter(), IcdChapter::Infectious);
        let distinct: BTreeSet<_> = DiseaseGroup::all().map(|g| g.chapter()).collect();
        assert_eq!(distinct.len(), 13);
        assert!(DiseaseGroup::new(0).is_err());
        assert!(DiseaseGroup::new(92).is_err());
    }
}
