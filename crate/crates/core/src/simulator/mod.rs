//! Seeded synthetic register with planted effects.
//!
//! Families of an index person (plus optional partner and adult child) are
//! generated with matching covariates, at most one hospitalization shock
//! per index person, per-group innovation event streams, and eleven outcome
//! series. Outcomes follow an additive model on the IHS scale — individual
//! level, calendar trend, AR(1) noise and, from the shock year onwards, a
//! level shift `δ + γ·M` where `M` is the lagged innovation stock of the
//! shock cohort — and are written in nominal SEK (`sinh`, then inflated).
//!
//! Every person draws from its own ChaCha stream of the master seed, so the
//! output does not depend on the thread count.

pub mod panel;

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Poisson};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::estimator::ResultLine;
use crate::innovation::{build_series, lag, write_events, EventKind, InnovationEvent, Measure, Origin};
use crate::io::{config_hash, CsvOut, FileHeader, VERSION};
use crate::registry::{
    ihs, Deflator, DiseaseGroup, HealthShock, Outcome, OutcomeRecord, OutcomeSeries, PersonRecord,
    Registry, RegistryConfig, Role, DEFAULT_BASE_YEAR, N_DISEASE_GROUPS, N_OUTCOMES,
};

/// Years of innovation history generated before the first register year.
pub const INNOVATION_HISTORY: i32 = 20;

#[derive(Debug, Clone, PartialEq)]
pub struct DgpConfig {
    pub seed: u64,
    pub n_persons: usize,
    pub first_year: i32,
    pub last_year: i32,
    /// Probability that an index person has a shock in the period, per group.
    pub hazards: Vec<f64>,
    pub emergency_share: f64,
    pub partner_share: f64,
    pub child_share: f64,
    /// SD of the individual level on the IHS scale.
    pub fe_sd: f64,
    pub ar_rho: f64,
    pub noise_sd: f64,
    pub calendar_trend: f64,
    /// Post-shock level shift per outcome.
    pub delta: [f64; N_OUTCOMES],
    /// Mitigation slope per outcome on the lagged NME level.
    pub gamma_nme: [f64; N_OUTCOMES],
    pub gamma_patent: [f64; N_OUTCOMES],
    /// Deviation of shocked persons' outcomes two years before the shock.
    pub pre_trend: f64,
    /// Slope of chapter-specific calendar trends (0 disables).
    pub chapter_confound: f64,
    /// Shock years from which the mitigation slopes are multiplied by `break_factor`.
    pub break_year: Option<i32>,
    pub break_factor: f64,
    pub lag: u32,
    pub nme_rate: f64,
    pub nme_withdraw_rate: f64,
    pub patent_rate: f64,
    pub patent_lapse_rate: f64,
    /// Dispersion (log-SD) of innovation rates across groups.
    pub rate_dispersion: f64,
    pub international_share: f64,
    pub inflation: f64,
    pub missing_rate: f64,
    pub death_rate: f64,
}

impl Default for DgpConfig {
    fn default() -> Self {
        let mut delta = [0.0; N_OUTCOMES];
        let mut gamma = [0.0; N_OUTCOMES];
        for (o, d, g) in [
            (Outcome::FamilyIncome, -0.315, 1.574),
            (Outcome::OwnIncome, -0.45, 1.2),
            (Outcome::PartnerIncome, -0.05, 0.3),
            (Outcome::Wages, -0.5, 1.0),
            (Outcome::Unemployment, 0.25, -0.5),
            (Outcome::Capital, -0.02, 0.0),
            (Outcome::Sickness, 0.9, -1.0),
            (Outcome::Disability, 0.6, -0.8),
            (Outcome::ChildIncome, -0.01, 0.0),
            (Outcome::ChildWages, -0.01, 0.0),
            (Outcome::ChildWelfare, 0.02, 0.0),
        ] {
            delta[o.index()] = d;
            gamma[o.index()] = g;
        }
        Self {
            seed: 0,
            n_persons: 50_000,
            first_year: 1990,
            last_year: 2019,
            hazards: vec![0.9 / N_DISEASE_GROUPS as f64; N_DISEASE_GROUPS as usize],
            emergency_share: 0.05,
            partner_share: 0.7,
            child_share: 0.5,
            fe_sd: 0.6,
            ar_rho: 0.5,
            noise_sd: 0.25,
            calendar_trend: 0.01,
            delta,
            gamma_nme: gamma,
            gamma_patent: [0.0; N_OUTCOMES],
            pre_trend: 0.0,
            chapter_confound: 0.0,
            break_year: None,
            break_factor: 2.0,
            lag: 1,
            nme_rate: 0.35,
            nme_withdraw_rate: 0.1,
            patent_rate: 8.0,
            patent_lapse_rate: 2.0,
            rate_dispersion: 0.6,
            international_share: 0.7,
            inflation: 0.02,
            missing_rate: 0.02,
            death_rate: 0.002,
        }
    }
}

const OUTCOME_LEVEL: [f64; N_OUTCOMES] = [13.0, 12.5, 12.3, 12.2, 8.0, 9.0, 8.0, 7.0, 12.0, 11.8, 7.0];

impl DgpConfig {
    /// Reads overrides from `key = value` pairs; unknown keys are errors.
    ///
    /// Per-group hazards are `hazard.<group>`; `hazard` sets all groups.
    /// Outcome parameters are `delta.<outcome>`, `gamma_nme.<outcome>`,
    /// `gamma_patent.<outcome>`.
    pub fn from_kv(kv: &KeyValues) -> Result<Self> {
        kv.reject_unknown(&[
            "seed", "n_persons", "first_year", "last_year", "hazard", "hazard.*", "emergency_share",
            "partner_share", "child_share", "fe_sd", "ar_rho", "noise_sd", "calendar_trend", "delta.*",
            "gamma_nme.*", "gamma_patent.*", "pre_trend", "chapter_confound", "break_year", "break_factor",
            "lag", "nme_rate", "nme_withdraw_rate", "patent_rate", "patent_lapse_rate", "rate_dispersion",
            "international_share", "inflation", "missing_rate", "death_rate",
        ])?;
        let mut c = DgpConfig::default();
        macro_rules! take {
            ($($f:ident),*) => { $( if let Some(v) = kv.get(stringify!($f))? { c.$f = v; } )* };
        }
        take!(
            seed, n_persons, first_year, last_year, emergency_share, partner_share, child_share, fe_sd,
            ar_rho, noise_sd, calendar_trend, pre_trend, chapter_confound, break_factor, lag, nme_rate,
            nme_withdraw_rate, patent_rate, patent_lapse_rate, rate_dispersion, international_share,
            inflation, missing_rate, death_rate
        );
        c.break_year = kv.get("break_year")?;
        if let Some(h) = kv.get::<f64>("hazard")? {
            c.hazards = vec![h; N_DISEASE_GROUPS as usize];
        }
        for key in kv.keys() {
            let Some((family, suffix)) = key.split_once('.') else { continue };
            let value: f64 = kv.get(key)?.expect("key present");
            match family {
                "hazard" => {
                    let g: u8 = suffix
                        .parse()
                        .map_err(|_| Error::Validation(format!("bad disease group in '{key}'")))?;
                    let g = DiseaseGroup::new(g)?;
                    c.hazards[g.id() as usize - 1] = value;
                }
                "delta" | "gamma_nme" | "gamma_patent" => {
                    let o = Outcome::parse(suffix)?.index();
                    match family {
                        "delta" => c.delta[o] = value,
                        "gamma_nme" => c.gamma_nme[o] = value,
                        _ => c.gamma_patent[o] = value,
                    }
                }
                _ => {}
            }
        }
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Validation(m));
        if self.last_year - self.first_year < 6 {
            return bad(format!("year range {}..={} is shorter than 7 years", self.first_year, self.last_year));
        }
        if self.hazards.len() != N_DISEASE_GROUPS as usize {
            return bad(format!("expected {N_DISEASE_GROUPS} hazards"));
        }
        if self.hazards.iter().any(|h| !(0.0..=1.0).contains(h)) {
            return bad("hazards must lie in [0, 1]".into());
        }
        let total: f64 = self.hazards.iter().sum();
        if total > 1.0 + 1e-12 {
            return bad(format!(
                "infeasible hazards: total shock probability {total} exceeds 1, no clean windows remain"
            ));
        }
        if !(0.0..1.0).contains(&self.ar_rho) {
            return bad(format!("ar_rho must lie in [0, 1), got {}", self.ar_rho));
        }
        for (name, v) in [
            ("emergency_share", self.emergency_share),
            ("partner_share", self.partner_share),
            ("child_share", self.child_share),
            ("international_share", self.international_share),
            ("missing_rate", self.missing_rate),
            ("death_rate", self.death_rate),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1], got {v}"));
            }
        }
        if self.lag == 0 {
            return bad("lag must be at least 1".into());
        }
        if self.fe_sd < 0.0 || self.noise_sd < 0.0 {
            return bad("standard deviations must be non-negative".into());
        }
        Ok(())
    }

    /// Canonical rendering of every parameter, for hashing into headers.
    pub fn render(&self) -> String {
        format!("{self:?}")
    }

    fn gamma(&self, o: Outcome, m: Measure, shock_year: i32) -> f64 {
        let g = match m {
            Measure::Nme => self.gamma_nme[o.index()],
            Measure::Patent => self.gamma_patent[o.index()],
        };
        match self.break_year {
            Some(y) if shock_year >= y => g * self.break_factor,
            _ => g,
        }
    }
}

/// A planted parameter keyed like a results.csv line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TruthEntry {
    pub spec: String,
    pub outcome: String,
    pub term: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    #[serde(default)]
    pub version: String,
    #[serde(default)]
    pub config_hash: String,
    pub seed: u64,
    pub lag: u32,
    pub break_year: Option<i32>,
    pub parameters: Vec<TruthEntry>,
}

impl Truth {
    pub fn from_config(c: &DgpConfig) -> Self {
        let mut parameters = Vec::new();
        for o in Outcome::ALL {
            let i = o.index();
            let gn = c.gamma_nme[i];
            let gp = c.gamma_patent[i];
            if c.break_year.is_none() && c.pre_trend == 0.0 {
                for (m, g, other) in [(Measure::Nme, gn, gp), (Measure::Patent, gp, gn)] {
                    // a single-measure DDD is only correctly specified when the other slope is zero
                    if other == 0.0 {
                        let spec = format!("ddd:{}", m.as_str());
                        parameters.push(TruthEntry {
                            spec: spec.clone(),
                            outcome: o.column().into(),
                            term: "dd".into(),
                            value: c.delta[i],
                        });
                        parameters.push(TruthEntry {
                            spec,
                            outcome: o.column().into(),
                            term: "dd_m".into(),
                            value: g,
                        });
                    }
                }
                if gn == 0.0 && gp == 0.0 {
                    parameters.push(TruthEntry {
                        spec: "dd".into(),
                        outcome: o.column().into(),
                        term: "dd".into(),
                        value: c.delta[i],
                    });
                }
            }
        }
        Self {
            version: VERSION.to_string(),
            config_hash: config_hash(&c.render()),
            seed: c.seed,
            lag: c.lag,
            break_year: c.break_year,
            parameters,
        }
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut text = serde_json::to_string_pretty(self)?;
        text.push('\n');
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| match e.kind() {
            std::io::ErrorKind::NotFound => Error::MissingInput(path.display().to_string()),
            _ => Error::io(path, e),
        })?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Everything a simulation produces.
#[derive(Debug, Clone)]
pub struct SimulatedData {
    pub registry: Registry,
    pub events: Vec<InnovationEvent>,
    pub deflator: Deflator,
    pub truth: Truth,
}

impl SimulatedData {
    /// Writes persons, outcomes, shocks, innovations, deflator and truth files.
    pub fn write(&self, dir: &Path, header: &FileHeader) -> Result<()> {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        self.registry.write_csv(dir, Some(header))?;
        write_events(&dir.join("innovations.csv"), &self.events, Some(header))?;
        let mut out = CsvOut::create(&dir.join("deflator.csv"), Some(header), &["year", "index"])?;
        let (lo, hi) = self.deflator_years();
        for y in lo..=hi {
            out.row([y.to_string(), self.deflator.index(y)?.to_string()])?;
        }
        out.finish()?;
        self.truth.write(&dir.join("truth.json"))
    }

    fn deflator_years(&self) -> (i32, i32) {
        let (lo, hi) = self.registry.outcome_years().unwrap_or((DEFAULT_BASE_YEAR, DEFAULT_BASE_YEAR));
        (lo.min(DEFAULT_BASE_YEAR), hi.max(DEFAULT_BASE_YEAR))
    }
}

fn stream(seed: u64, id: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(id);
    rng
}

fn poisson(rng: &mut ChaCha8Rng, lambda: f64) -> u64 {
    if lambda <= 0.0 {
        return 0;
    }
    Poisson::new(lambda).map(|p| p.sample(rng) as u64).unwrap_or(0)
}

/// Innovation events per group from `first_year − 20` to `last_year`.
/// Each withdrawal or lapse removes a random existing product, so stocks
/// stay non-negative overall and within each origin.
pub fn simulate_events(c: &DgpConfig) -> Vec<InnovationEvent> {
    let mut rng = stream(c.seed, 0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let mut events = Vec::new();
    let kinds = [
        (EventKind::NmeApproved, EventKind::NmeWithdrawn, c.nme_rate, c.nme_withdraw_rate),
        (EventKind::PatentGranted, EventKind::PatentLapsed, c.patent_rate, c.patent_lapse_rate),
    ];
    let origins = [Origin::Domestic, Origin::International];
    for g in DiseaseGroup::all() {
        let scale = (c.rate_dispersion * normal.sample(&mut rng)).exp();
        // stock[measure][origin]
        let mut stock = [[0u64; 2]; 2];
        for year in (c.first_year - INNOVATION_HISTORY)..=c.last_year {
            for (k, &(add, remove, add_rate, remove_rate)) in kinds.iter().enumerate() {
                for _ in 0..poisson(&mut rng, add_rate * scale) {
                    let o = usize::from(rng.random::<f64>() < c.international_share);
                    stock[k][o] += 1;
                    events.push(InnovationEvent { disease_group: g, year, kind: add, origin: origins[o] });
                }
                let removals = poisson(&mut rng, remove_rate * scale).min(stock[k][0] + stock[k][1]);
                for _ in 0..removals {
                    let total = stock[k][0] + stock[k][1];
                    let o = usize::from(rng.random_range(0..total) >= stock[k][0]);
                    stock[k][o] -= 1;
                    events.push(InnovationEvent { disease_group: g, year, kind: remove, origin: origins[o] });
                }
            }
        }
    }
    events
}

struct Family {
    persons: Vec<PersonRecord>,
    outcomes: OutcomeSeries,
    shock: Option<HealthShock>,
}

/// Runs the data-generating process.
pub fn simulate(c: &DgpConfig) -> Result<SimulatedData> {
    c.validate()?;
    let events = simulate_events(c);
    let (raw, warnings) = build_series(&events, c.first_year - INNOVATION_HISTORY, c.last_year)?;
    debug_assert!(warnings.is_empty());
    let lagged = lag(&raw, c.lag)?;
    let deflator = Deflator::new(
        (c.first_year.min(DEFAULT_BASE_YEAR)..=c.last_year.max(DEFAULT_BASE_YEAR))
            .map(|y| (y, (1.0 + c.inflation).powi(y - DEFAULT_BASE_YEAR)))
            .collect(),
        DEFAULT_BASE_YEAR,
    )?;
    let n = c.n_persons as u64;
    let calendar_shock: BTreeMap<(usize, i32), f64> = if c.chapter_confound != 0.0 {
        DiseaseGroup::all()
            .map(|g| g.chapter().index())
            .collect::<std::collections::BTreeSet<_>>()
            .into_iter()
            .flat_map(|ch| {
                (c.first_year..=c.last_year).map(move |y| {
                    let slope = c.chapter_confound * (ch as f64 / 12.0 - 0.5);
                    ((ch, y), slope * (y - c.first_year) as f64)
                })
            })
            .collect()
    } else {
        BTreeMap::new()
    };

    let families: Vec<Family> = (1..=n)
        .into_par_iter()
        .map(|id| family(c, id, n, &lagged, &deflator, &calendar_shock))
        .collect::<Result<_>>()?;

    let mut persons = Vec::new();
    let mut outcomes = Vec::new();
    let mut shocks = Vec::new();
    for f in families {
        persons.extend(f.persons);
        outcomes.push(f.outcomes);
        shocks.extend(f.shock);
    }
    let registry = Registry::from_parts(persons, outcomes, shocks, &RegistryConfig::default())?;
    Ok(SimulatedData {
        registry,
        events,
        deflator,
        truth: Truth::from_config(c),
    })
}

fn family(
    c: &DgpConfig,
    id: u64,
    n: u64,
    lagged: &crate::innovation::InnovationSeries,
    deflator: &Deflator,
    calendar_shock: &BTreeMap<(usize, i32), f64>,
) -> Result<Family> {
    let mut rng = stream(c.seed, id);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");

    // age 40..=70 must be reachable inside the admissible shock years
    let (s_lo, s_hi) = (c.first_year + 3, c.last_year);
    let birth_year = rng.random_range((s_lo - 70)..=(s_hi - 40));
    let gender = u8::from(rng.random::<f64>() < 0.5);
    let schooling_years = 9 + rng.random_range(0..8u32);
    let earn_z = normal.sample(&mut rng);
    let earnings = (12.3 + 0.06 * (schooling_years as f64 - 12.0) + 0.5 * earn_z).exp();
    let married = rng.random::<f64>() < c.partner_share;
    let has_child = rng.random::<f64>() < c.child_share;
    let liquidity = rng.random::<f64>() < 0.2;

    let mut persons = vec![PersonRecord {
        person_id: id,
        birth_year,
        gender,
        schooling_years,
        earnings_38_39_sek: earnings.round(),
        earnings_38_39: ihs(earnings.round())?,
        family_id: id,
        role: Role::Index,
        liquidity_flag: liquidity,
        marital_flag: married,
    }];
    if married {
        let b = birth_year + rng.random_range(-4..=4);
        let e = (12.2 + 0.5 * normal.sample(&mut rng)).exp().round();
        persons.push(PersonRecord {
            person_id: n + id,
            birth_year: b,
            gender: 1 - gender,
            schooling_years: 9 + rng.random_range(0..8u32),
            earnings_38_39_sek: e,
            earnings_38_39: ihs(e)?,
            family_id: id,
            role: Role::Partner,
            liquidity_flag: liquidity,
            marital_flag: true,
        });
    }
    if has_child {
        let e = (12.0 + 0.5 * normal.sample(&mut rng)).exp().round();
        persons.push(PersonRecord {
            person_id: 2 * n + id,
            birth_year: birth_year + rng.random_range(24..=34),
            gender: u8::from(rng.random::<f64>() < 0.5),
            schooling_years: 9 + rng.random_range(0..8u32),
            earnings_38_39_sek: e,
            earnings_38_39: ihs(e)?,
            family_id: id,
            role: Role::AdultChild,
            liquidity_flag: false,
            marital_flag: false,
        });
    }

    // one draw picks both whether and in which group the shock happens
    let u: f64 = rng.random();
    let mut acc = 0.0;
    let mut shock = None;
    for (gi, h) in c.hazards.iter().enumerate() {
        acc += h;
        if u < acc {
            let lo = s_lo.max(birth_year + 40);
            let hi = s_hi.min(birth_year + 70);
            if lo <= hi {
                let s = rng.random_range(lo..=hi);
                let stay = 1 + (-(rng.random::<f64>().max(1e-12)).ln() * 6.0) as u32;
                shock = Some(HealthShock {
                    person_id: id,
                    disease_group: DiseaseGroup::new(gi as u8 + 1)?,
                    shock_year: s,
                    emergency: rng.random::<f64>() < c.emergency_share,
                    stay_days: Some(stay),
                });
            }
            break;
        }
    }

    let last_observed = match &shock {
        Some(s) if c.death_rate > 0.0 => {
            let mut y = s.shock_year;
            while y < c.last_year && rng.random::<f64>() >= c.death_rate {
                y += 1;
            }
            y
        }
        _ => c.last_year,
    };

    let alpha = c.fe_sd * normal.sample(&mut rng)
        + 0.05 * (schooling_years as f64 - 12.0)
        + 0.3 * earn_z;
    let effects: Option<[f64; N_OUTCOMES]> = match &shock {
        Some(s) => {
            let mn = lagged.value(s.disease_group, s.shock_year, Measure::Nme).unwrap_or(0.0);
            let mp = lagged.value(s.disease_group, s.shock_year, Measure::Patent).unwrap_or(0.0);
            let mut e = [0.0; N_OUTCOMES];
            for o in Outcome::ALL {
                e[o.index()] = c.delta[o.index()]
                    + c.gamma(o, Measure::Nme, s.shock_year) * mn
                    + c.gamma(o, Measure::Patent, s.shock_year) * mp;
            }
            Some(e)
        }
        None => None,
    };
    let chapter = shock.as_ref().map(|s| s.disease_group.chapter().index());

    let stationary_sd = c.noise_sd / (1.0 - c.ar_rho * c.ar_rho).sqrt();
    let mut ar = [0.0; N_OUTCOMES];
    for a in ar.iter_mut() {
        *a = stationary_sd * normal.sample(&mut rng);
    }
    let mut years = BTreeMap::new();
    for y in c.first_year..=last_observed {
        let mut rec = OutcomeRecord([None; N_OUTCOMES]);
        for o in Outcome::ALL {
            let i = o.index();
            ar[i] = c.ar_rho * ar[i] + c.noise_sd * normal.sample(&mut rng);
            let present = match o {
                Outcome::FamilyIncome => true,
                Outcome::PartnerIncome => married,
                Outcome::ChildIncome | Outcome::ChildWages | Outcome::ChildWelfare => has_child,
                _ => true,
            } && (o == Outcome::FamilyIncome || rng.random::<f64>() >= c.missing_rate);
            if !present {
                continue;
            }
            let mut v = OUTCOME_LEVEL[i] + alpha + c.calendar_trend * (y - c.first_year) as f64 + ar[i];
            if let (Some(s), Some(e)) = (&shock, &effects) {
                if y >= s.shock_year {
                    v += e[i];
                }
                if y == s.shock_year - 2 {
                    v += c.pre_trend;
                }
            }
            if let Some(ch) = chapter {
                v += calendar_shock.get(&(ch, y)).copied().unwrap_or(0.0);
            }
            // whole kronor, as registers report them
            rec.0[i] = Some(deflator.inflate(v.sinh(), y)?.round());
        }
        years.insert(y, rec);
    }
    Ok(Family {
        persons,
        outcomes: OutcomeSeries {
            person_id: id,
            years,
        },
        shock,
    })
}

// ---------------------------------------------------------------------------
// Oracle comparison

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Tolerances {
    /// Allowed deviation in standard errors.
    pub max_se: f64,
    /// Allowed absolute deviation regardless of the SE.
    pub abs: f64,
}

impl Default for Tolerances {
    fn default() -> Self {
        Self { max_se: 3.0, abs: 0.0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleLine {
    pub spec: String,
    pub outcome: String,
    pub term: String,
    pub truth: f64,
    pub estimate: Option<f64>,
    pub se: Option<f64>,
    /// Nominal 95% interval (normal critical value) covers the truth.
    pub covered: bool,
    pub pass: bool,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleReport {
    pub lines: Vec<OracleLine>,
}

impl OracleReport {
    pub fn pass(&self) -> bool {
        self.lines.iter().all(|l| l.pass)
    }

    pub fn coverage(&self) -> f64 {
        let compared: Vec<&OracleLine> = self.lines.iter().filter(|l| l.estimate.is_some()).collect();
        if compared.is_empty() {
            return f64::NAN;
        }
        compared.iter().filter(|l| l.covered).count() as f64 / compared.len() as f64
    }

    pub fn failures(&self) -> Vec<String> {
        self.lines
            .iter()
            .filter(|l| !l.pass)
            .map(|l| format!("{}/{}/{}: {}", l.spec, l.outcome, l.term, l.reason))
            .collect()
    }

    pub fn write_csv(&self, path: &Path, header: Option<&FileHeader>) -> Result<()> {
        let mut out = CsvOut::create(
            path,
            header,
            &["spec", "outcome", "term", "truth", "estimate", "se", "covered", "pass", "reason"],
        )?;
        for l in &self.lines {
            out.row([
                l.spec.clone(),
                l.outcome.clone(),
                l.term.clone(),
                l.truth.to_string(),
                l.estimate.map(|v| v.to_string()).unwrap_or_default(),
                l.se.map(|v| v.to_string()).unwrap_or_default(),
                u8::from(l.covered).to_string(),
                u8::from(l.pass).to_string(),
                l.reason.clone(),
            ])?;
        }
        out.finish()
    }
}

/// Compares every planted parameter that has a matching result line;
/// `required` parameters without an estimate fail by name.
pub fn oracle_compare(truth: &Truth, results: &[ResultLine], tol: Tolerances, required: &[(&str, &str, &str)]) -> OracleReport {
    let idx = crate::estimator::index_results(results);
    let mut lines = Vec::new();
    for t in &truth.parameters {
        let key = (t.spec.clone(), t.outcome.clone(), t.term.clone());
        let must = required
            .iter()
            .any(|(s, o, term)| *s == t.spec && *o == t.outcome && *term == t.term);
        match idx.get(&key) {
            Some(r) => {
                let dev = (r.estimate - t.value).abs();
                let allowed = (tol.max_se * r.se).max(tol.abs);
                let pass = dev <= allowed;
                lines.push(OracleLine {
                    spec: t.spec.clone(),
                    outcome: t.outcome.clone(),
                    term: t.term.clone(),
                    truth: t.value,
                    estimate: Some(r.estimate),
                    se: Some(r.se),
                    covered: dev <= 1.959_963_984_540_054 * r.se,
                    pass,
                    reason: if pass {
                        String::new()
                    } else {
                        format!("deviation {dev:.4} exceeds {allowed:.4}")
                    },
                });
            }
            None if must => lines.push(OracleLine {
                spec: t.spec.clone(),
                outcome: t.outcome.clone(),
                term: t.term.clone(),
                truth: t.value,
                estimate: None,
                se: None,
                covered: false,
                pass: false,
                reason: format!("missing parameter {}", t.term),
            }),
            None => {}
        }
    }
    for (s, o, term) in required {
        let planted = truth
            .parameters
            .iter()
            .any(|t| t.spec == *s && t.outcome == *o && t.term == *term);
        if !planted {
            lines.push(OracleLine {
                spec: s.to_string(),
                outcome: o.to_string(),
                term: term.to_string(),
                truth: f64::NAN,
                estimate: None,
                se: None,
                covered: false,
                pass: false,
                reason: format!("missing parameter {term} in truth"),
            });
        }
    }
    OracleReport { lines }
}
