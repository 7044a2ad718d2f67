//! Per-disease medical-innovation stocks: cumulative net counts of new
//! molecular entities and medical-procedure patents, plus the lagged,
//! detrended and international-only variants used in estimation.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{CsvOut, CsvTable, FileHeader};
use crate::registry::DiseaseGroup;
use crate::stats::weighted_population_sd;

/// NME stocks are expressed in hundreds.
pub const NME_SCALE: f64 = 100.0;
/// Patent stocks are expressed in thousands.
pub const PATENT_SCALE: f64 = 1000.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum EventKind {
    NmeApproved,
    NmeWithdrawn,
    PatentGranted,
    PatentLapsed,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::NmeApproved => "nme_approved",
            EventKind::NmeWithdrawn => "nme_withdrawn",
            EventKind::PatentGranted => "patent_granted",
            EventKind::PatentLapsed => "patent_lapsed",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "nme_approved" => Some(EventKind::NmeApproved),
            "nme_withdrawn" => Some(EventKind::NmeWithdrawn),
            "patent_granted" => Some(EventKind::PatentGranted),
            "patent_lapsed" => Some(EventKind::PatentLapsed),
            _ => None,
        }
    }

    pub fn measure(self) -> Measure {
        match self {
            EventKind::NmeApproved | EventKind::NmeWithdrawn => Measure::Nme,
            EventKind::PatentGranted | EventKind::PatentLapsed => Measure::Patent,
        }
    }

    /// +1 for additions to the stock, −1 for removals.
    pub fn sign(self) -> i64 {
        match self {
            EventKind::NmeApproved | EventKind::PatentGranted => 1,
            EventKind::NmeWithdrawn | EventKind::PatentLapsed => -1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Origin {
    Domestic,
    International,
}

impl Origin {
    pub fn as_str(self) -> &'static str {
        match self {
            Origin::Domestic => "domestic",
            Origin::International => "international",
        }
    }
}

/// Innovation measure entering the triple-difference interaction.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Measure {
    Nme,
    Patent,
}

impl Measure {
    pub fn as_str(self) -> &'static str {
        match self {
            Measure::Nme => "nme",
            Measure::Patent => "patent",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "nme" => Ok(Measure::Nme),
            "patent" => Ok(Measure::Patent),
            other => Err(Error::Validation(format!(
                "unknown measure '{other}' (expected nme|patent)"
            ))),
        }
    }

    fn scale(self) -> f64 {
        match self {
            Measure::Nme => NME_SCALE,
            Measure::Patent => PATENT_SCALE,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InnovationEvent {
    pub disease_group: DiseaseGroup,
    pub year: i32,
    pub kind: EventKind,
    pub origin: Origin,
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct StockCell {
    pub nme_stock: f64,
    pub patent_stock: f64,
}

impl StockCell {
    pub fn get(&self, m: Measure) -> f64 {
        match m {
            Measure::Nme => self.nme_stock,
            Measure::Patent => self.patent_stock,
        }
    }
}

/// Scaled stocks per (disease group, year) over a contiguous year range.
#[derive(Debug, Clone, PartialEq)]
pub struct InnovationSeries {
    first_year: i32,
    last_year: i32,
    groups: BTreeMap<DiseaseGroup, Vec<StockCell>>,
}

/// Non-fatal conditions met while building a series.
#[derive(Debug, Clone, PartialEq)]
pub struct SeriesWarning {
    pub disease_group: DiseaseGroup,
    pub year: i32,
    pub measure: Measure,
    pub message: String,
}

impl InnovationSeries {
    pub fn year_range(&self) -> (i32, i32) {
        (self.first_year, self.last_year)
    }

    pub fn years(&self) -> std::ops::RangeInclusive<i32> {
        self.first_year..=self.last_year
    }

    pub fn groups(&self) -> impl Iterator<Item = DiseaseGroup> + '_ {
        self.groups.keys().copied()
    }

    /// Stock at (group, year); groups without events hold zero stock and
    /// years outside the range are `None`.
    pub fn value(&self, group: DiseaseGroup, year: i32, measure: Measure) -> Option<f64> {
        if year < self.first_year || year > self.last_year {
            return None;
        }
        let idx = (year - self.first_year) as usize;
        Some(
            self.groups
                .get(&group)
                .map(|cells| cells[idx].get(measure))
                .unwrap_or(0.0),
        )
    }

    pub fn cells(&self, group: DiseaseGroup) -> Option<&[StockCell]> {
        self.groups.get(&group).map(Vec::as_slice)
    }

    /// Series made from explicit cells; every vector must span the range.
    pub fn from_cells(
        first_year: i32,
        last_year: i32,
        groups: BTreeMap<DiseaseGroup, Vec<StockCell>>,
    ) -> Result<Self> {
        if last_year < first_year {
            return Err(Error::Validation(format!(
                "empty year range {first_year}..={last_year}"
            )));
        }
        let len = (last_year - first_year + 1) as usize;
        if let Some((g, _)) = groups.iter().find(|(_, v)| v.len() != len) {
            return Err(Error::Validation(format!(
                "group {g} does not span {first_year}..={last_year}"
            )));
        }
        Ok(Self {
            first_year,
            last_year,
            groups,
        })
    }

    fn map_groups<F>(&self, f: F) -> Result<Self>
    where
        F: Fn(DiseaseGroup, &[StockCell]) -> Result<Vec<StockCell>> + Sync,
    {
        let mapped: Result<Vec<(DiseaseGroup, Vec<StockCell>)>> = self
            .groups
            .par_iter()
            .map(|(g, cells)| f(*g, cells).map(|c| (*g, c)))
            .collect();
        Ok(Self {
            first_year: self.first_year,
            last_year: self.last_year,
            groups: mapped?.into_iter().collect(),
        })
    }

    pub fn write_csv(&self, path: &Path, header: Option<&FileHeader>) -> Result<()> {
        let mut out = CsvOut::create(path, header, &["disease_group", "year", "nme", "patent"])?;
        for (g, cells) in &self.groups {
            for (i, c) in cells.iter().enumerate() {
                out.row([
                    g.to_string(),
                    (self.first_year + i as i32).to_string(),
                    c.nme_stock.to_string(),
                    c.patent_stock.to_string(),
                ])?;
            }
        }
        out.finish()
    }
}

/// Cumulative net stocks per group over `first_year..=last_year`.
///
/// Events dated before the range accumulate into the opening stock; events
/// after it are ignored. A running stock that would turn negative is
/// clamped at zero and reported as a warning.
pub fn build_series(
    events: &[InnovationEvent],
    first_year: i32,
    last_year: i32,
) -> Result<(InnovationSeries, Vec<SeriesWarning>)> {
    if last_year < first_year {
        return Err(Error::Validation(format!(
            "empty year range {first_year}..={last_year}"
        )));
    }
    // net raw changes per group, measure and year
    let mut net: BTreeMap<(DiseaseGroup, Measure), BTreeMap<i32, i64>> = BTreeMap::new();
    for e in events {
        if e.year > last_year {
            continue;
        }
        *net.entry((e.disease_group, e.kind.measure()))
            .or_default()
            .entry(e.year)
            .or_insert(0) += e.kind.sign();
    }
    let len = (last_year - first_year + 1) as usize;
    let mut groups: BTreeMap<DiseaseGroup, Vec<StockCell>> = BTreeMap::new();
    let mut warnings = Vec::new();
    for ((g, m), deltas) in &net {
        let cells = groups
            .entry(*g)
            .or_insert_with(|| vec![StockCell::default(); len]);
        let mut stock: i64 = 0;
        let mut iter = deltas.iter().peekable();
        let start = deltas.keys().next().copied().unwrap_or(first_year).min(first_year);
        for year in start..=last_year {
            while let Some((&y, &d)) = iter.peek() {
                if y != year {
                    break;
                }
                stock += d;
                iter.next();
            }
            if stock < 0 {
                log::warn!("group {g} {}: negative stock {stock} in {year}, clamped", m.as_str());
                warnings.push(SeriesWarning {
                    disease_group: *g,
                    year,
                    measure: *m,
                    message: format!("removal without prior stock (raw {stock}); clamped to 0"),
                });
                stock = 0;
            }
            if year >= first_year {
                let v = stock as f64 / m.scale();
                let cell = &mut cells[(year - first_year) as usize];
                match m {
                    Measure::Nme => cell.nme_stock = v,
                    Measure::Patent => cell.patent_stock = v,
                }
            }
        }
    }
    Ok((
        InnovationSeries {
            first_year,
            last_year,
            groups,
        },
        warnings,
    ))
}

/// Shifts every group's series forward by `lag` years; years whose source
/// falls before the range start read zero.
pub fn lag(series: &InnovationSeries, lag: u32) -> Result<InnovationSeries> {
    if lag == 0 {
        return Err(Error::Validation("lag must be at least 1".into()));
    }
    let lag = lag as usize;
    series.map_groups(|_, cells| {
        let mut out = vec![StockCell::default(); cells.len()];
        for (i, slot) in out.iter_mut().enumerate().skip(lag) {
            *slot = cells[i - lag];
        }
        Ok(out)
    })
}

/// Residuals of a per-group least-squares fit of each stock on an intercept
/// and a linear year term.
pub fn detrend(series: &InnovationSeries) -> Result<InnovationSeries> {
    let n = (series.last_year - series.first_year + 1) as usize;
    if n < 3 {
        return Err(Error::Validation(format!(
            "detrending needs at least 3 years per group, series spans {n}"
        )));
    }
    // centred time index makes the two normal equations decouple
    let tbar = (n as f64 - 1.0) / 2.0;
    let times: Vec<f64> = (0..n).map(|i| i as f64 - tbar).collect();
    let stt: f64 = times.iter().map(|t| t * t).sum();
    let fit = |ys: Vec<f64>| -> Vec<f64> {
        let ybar = ys.iter().sum::<f64>() / n as f64;
        let slope = ys.iter().zip(&times).map(|(y, t)| (y - ybar) * t).sum::<f64>() / stt;
        ys.iter()
            .zip(&times)
            .map(|(y, t)| y - ybar - slope * t)
            .collect()
    };
    series.map_groups(|_, cells| {
        let nme = fit(cells.iter().map(|c| c.nme_stock).collect());
        let pat = fit(cells.iter().map(|c| c.patent_stock).collect());
        Ok(nme
            .into_iter()
            .zip(pat)
            .map(|(nme_stock, patent_stock)| StockCell {
                nme_stock,
                patent_stock,
            })
            .collect())
    })
}

/// Population SD of `values` weighted by estimation-row counts.
pub fn series_sd(values: &[f64], row_weights: &[f64]) -> Result<f64> {
    weighted_population_sd(values, row_weights)
}

/// Effect of a one-SD change in innovation, in percent: `beta × sd × 100`.
pub fn effect_percent(beta: f64, sd: f64) -> f64 {
    beta * sd * 100.0
}

pub fn filter_international(events: &[InnovationEvent]) -> Vec<InnovationEvent> {
    events
        .iter()
        .filter(|e| e.origin == Origin::International)
        .copied()
        .collect()
}

pub fn load_events(path: &Path) -> Result<Vec<InnovationEvent>> {
    let table = CsvTable::read(path, &["disease_group", "year", "kind", "origin"])?;
    let mut events = Vec::with_capacity(table.len());
    for row in table.rows() {
        let g: u8 = row.parse("disease_group")?;
        let disease_group = DiseaseGroup::new(g).map_err(|e| row.error(e.to_string()))?;
        let kind_s = row.str("kind")?;
        let kind =
            EventKind::parse(kind_s).ok_or_else(|| row.error(format!("unknown kind '{kind_s}'")))?;
        let origin = match row.str("origin")? {
            "domestic" => Origin::Domestic,
            "international" => Origin::International,
            other => return Err(row.error(format!("unknown origin '{other}'"))),
        };
        events.push(InnovationEvent {
            disease_group,
            year: row.parse("year")?,
            kind,
            origin,
        });
    }
    Ok(events)
}

pub fn write_events(
    path: &Path,
    events: &[InnovationEvent],
    header: Option<&FileHeader>,
) -> Result<()> {
    let mut out = CsvOut::create(path, header, &["disease_group", "year", "kind", "origin"])?;
    for e in events {
        out.row([
            e.disease_group.to_string(),
            e.year.to_string(),
            e.kind.as_str().to_string(),
            e.origin.as_str().to_string(),
        ])?;
    }
    out.finish()
}
