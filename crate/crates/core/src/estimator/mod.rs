//! DD and DDD specifications on the stacked panel, event-study pre-trend
//! tests, and result serialisation.

pub mod fe;

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::innovation::{effect_percent, series_sd, Measure};
use crate::io::{CsvOut, CsvTable, FileHeader};
use crate::linalg::DenseMatrix;
use crate::registry::{DiseaseGroup, Outcome};
use crate::stacking::{attach_event_dummies, event_dummy_name, Panel, StackedRow};
use crate::stats::{standardized_difference, t_two_sided_p};

pub use fe::{cluster_scores, fit_fe_ols, within_transform, FeDesign, FeFit, WithinTransform};

pub const PRETREND_ALPHA: f64 = 0.05;
pub const PRETREND_MAX_STD_DIFF: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpecKind {
    /// Regressors `post, dd`.
    Dd,
    /// Regressors `post, dd, dd×m, post×m`.
    Ddd,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct EstimatorSpec {
    pub kind: SpecKind,
    pub measure: Measure,
    /// Replace `dd` (and `dd×m`) by separate terms for event years 0 and 1.
    pub by_event_year: bool,
}

impl EstimatorSpec {
    pub fn dd() -> Self {
        Self {
            kind: SpecKind::Dd,
            measure: Measure::Nme,
            by_event_year: false,
        }
    }

    pub fn ddd(measure: Measure) -> Self {
        Self {
            kind: SpecKind::Ddd,
            measure,
            by_event_year: false,
        }
    }

    pub fn by_event_year(mut self) -> Self {
        self.by_event_year = true;
        self
    }

    /// Short descriptor, e.g. `dd`, `ddd:nme`, `ddd:patent:event_year`.
    pub fn descriptor(&self) -> String {
        let mut s = match self.kind {
            SpecKind::Dd => "dd".to_string(),
            SpecKind::Ddd => format!("ddd:{}", self.measure.as_str()),
        };
        if self.by_event_year {
            s.push_str(":event_year");
        }
        s
    }
}

impl fmt::Display for EstimatorSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.descriptor())
    }
}

/// One reported coefficient.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Term {
    pub name: String,
    pub estimate: f64,
    pub se: f64,
    pub p: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimationResult {
    pub spec: String,
    pub outcome: String,
    pub terms: Vec<Term>,
    /// Row-major cluster-robust covariance in `terms` order.
    pub covariance: Vec<f64>,
    pub n_rows: usize,
    pub n_clusters: usize,
    pub singletons_dropped: usize,
    pub r_squared_within: f64,
    /// Degrees of freedom of the reference t distribution (clusters − 1).
    pub df: f64,
    /// Population SD of the innovation level over estimation rows (DDD only).
    pub sd_m: Option<f64>,
}

impl EstimationResult {
    pub fn term(&self, name: &str) -> Option<&Term> {
        self.terms.iter().find(|t| t.name == name)
    }

    pub fn estimate(&self, name: &str) -> Option<f64> {
        self.term(name).map(|t| t.estimate)
    }

    pub fn se(&self, name: &str) -> Option<f64> {
        self.term(name).map(|t| t.se)
    }

    /// `β(dd×m) × SD(m) × 100`.
    pub fn effect_percent(&self) -> Option<f64> {
        Some(effect_percent(self.estimate("dd_m")?, self.sd_m?))
    }

    pub fn covariance_matrix(&self) -> DenseMatrix<f64> {
        let k = self.terms.len();
        DenseMatrix::from_row_major(k, k, self.covariance.clone())
    }

    /// Wraps a raw fit; p-values use a t reference with `clusters − 1` df.
    pub fn from_fit(fit: &FeFit<f64>, spec: &str, outcome: &str, sd_m: Option<f64>) -> Self {
        let df = (fit.n_clusters as f64 - 1.0).max(1.0);
        let terms = fit
            .names
            .iter()
            .enumerate()
            .map(|(i, name)| {
                let est = fit.coefficients[i];
                let se = fit.covariance[(i, i)].max(0.0).sqrt();
                Term {
                    name: name.clone(),
                    estimate: est,
                    se,
                    p: if se > 0.0 { t_two_sided_p(est / se, df) } else { f64::NAN },
                }
            })
            .collect();
        Self {
            spec: spec.to_string(),
            outcome: outcome.to_string(),
            terms,
            covariance: fit.covariance.as_slice().to_vec(),
            n_rows: fit.n_rows,
            n_clusters: fit.n_clusters,
            singletons_dropped: fit.singletons_dropped,
            r_squared_within: fit.r_squared_within,
            df,
            sd_m,
        }
    }
}

/// Panel rows carrying a value for `outcome`, with that value.
pub fn outcome_rows(panel: &Panel, outcome: Outcome) -> (Vec<&StackedRow>, Vec<f64>) {
    panel
        .rows
        .iter()
        .filter_map(|r| r.outcome(outcome).map(|y| (r, y)))
        .unzip()
}

fn indicator(b: bool) -> f64 {
    f64::from(u8::from(b))
}

/// Builds the regression design for `spec` over the rows observed for
/// `outcome`. Groups and clusters are the experimental ids.
pub fn build_design(panel: &Panel, outcome: Outcome, spec: &EstimatorSpec) -> Result<FeDesign<f64>> {
    let (rows, y) = outcome_rows(panel, outcome);
    if rows.is_empty() {
        return Err(Error::Validation(format!("no panel rows observe outcome {outcome}")));
    }
    let ids: Vec<u64> = rows.iter().map(|r| r.experimental_id).collect();
    let mut d = FeDesign::new(y, ids.clone(), ids);
    let m: Vec<f64> = rows.iter().map(|r| panel.m(r, spec.measure)).collect();
    let col = |f: &dyn Fn(usize, &StackedRow) -> f64| -> Vec<f64> {
        rows.iter().enumerate().map(|(i, r)| f(i, r)).collect()
    };
    d.push("post", col(&|_, r| indicator(r.post())));
    if spec.by_event_year {
        d.push("dd_t0", col(&|_, r| indicator(r.treated && r.event_year == 0)));
        d.push("dd_t1", col(&|_, r| indicator(r.treated && r.event_year == 1)));
    } else {
        d.push("dd", col(&|_, r| indicator(r.dd())));
    }
    if spec.kind == SpecKind::Ddd {
        if spec.by_event_year {
            d.push("dd_m_t0", col(&|i, r| indicator(r.treated && r.event_year == 0) * m[i]));
            d.push("dd_m_t1", col(&|i, r| indicator(r.treated && r.event_year == 1) * m[i]));
        } else {
            d.push("dd_m", col(&|i, r| indicator(r.dd()) * m[i]));
        }
        d.push("post_m", col(&|i, r| indicator(r.post()) * m[i]));
    }
    Ok(d)
}

/// Population SD of the innovation level over the rows observing `outcome`.
pub fn sd_m(panel: &Panel, outcome: Outcome, measure: Measure) -> Result<f64> {
    let (rows, _) = outcome_rows(panel, outcome);
    let m: Vec<f64> = rows.iter().map(|r| panel.m(r, measure)).collect();
    series_sd(&m, &vec![1.0; m.len()])
}

pub fn estimate(panel: &Panel, outcome: Outcome, spec: &EstimatorSpec) -> Result<EstimationResult> {
    let design = build_design(panel, outcome, spec)?;
    let fit = fit_fe_ols(&design)?;
    let sd = match spec.kind {
        SpecKind::Dd => None,
        SpecKind::Ddd => Some(sd_m(panel, outcome, spec.measure)?),
    };
    Ok(EstimationResult::from_fit(&fit, &spec.descriptor(), outcome.column(), sd))
}

/// DD: `y = α_i + β1·post + β2·dd (+ event-year split)`.
pub fn estimate_dd(panel: &Panel, outcome: Outcome, by_event_year: bool) -> Result<EstimationResult> {
    let mut spec = EstimatorSpec::dd();
    spec.by_event_year = by_event_year;
    estimate(panel, outcome, &spec)
}

/// DDD: adds `β3·dd×m + β4·post×m`; the main effect of `m` is absorbed by
/// the fixed effects because `m` is constant within an experimental id.
pub fn estimate_ddd(panel: &Panel, outcome: Outcome, measure: Measure) -> Result<EstimationResult> {
    estimate(panel, outcome, &EstimatorSpec::ddd(measure))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PreTrendTest {
    pub disease_group: Option<u8>,
    pub coefficient: f64,
    pub se: f64,
    /// Wald statistic (F with 1 and clusters−1 df).
    pub statistic: f64,
    pub p_value: f64,
    /// Standardized difference of pre-period outcomes, treated vs control.
    pub std_diff: f64,
    pub n_rows: usize,
    pub n_clusters: usize,
    pub pass_p: bool,
    pub pass_d: bool,
    /// Full event-study fit, reference years −3 and −1.
    pub event_study: EstimationResult,
}

impl PreTrendTest {
    pub fn pass(&self) -> bool {
        self.pass_p && self.pass_d
    }
}

/// Event-study regression with reference years −3 and −1 and a Wald test
/// of `treated × (t = −2) = 0`.
pub fn pretrend_test(panel: &Panel, outcome: Outcome) -> Result<PreTrendTest> {
    let (rows, y) = outcome_rows(panel, outcome);
    let has = |treated: bool| rows.iter().any(|r| r.event_year == -2 && r.treated == treated);
    if !has(true) || !has(false) {
        return Err(Error::Validation(
            "pre-trend test needs rows at event year -2 in both arms".into(),
        ));
    }
    let ids: Vec<u64> = rows.iter().map(|r| r.experimental_id).collect();
    let dummies = attach_event_dummies(&rows)?;
    let mut design = FeDesign::new(y.clone(), ids.clone(), ids);
    for (name, col) in dummies.names.into_iter().zip(dummies.columns) {
        design.push(name, col);
    }
    let fit = fit_fe_ols(&design)?;
    let es = EstimationResult::from_fit(&fit, "event_study", outcome.column(), None);
    let key = event_dummy_name(-2, true);
    let term = es.term(&key).expect("event-study design includes the t=-2 interaction");
    let (coefficient, se) = (term.estimate, term.se);
    let statistic = if se > 0.0 {
        (coefficient / se).powi(2)
    } else if coefficient == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    let p_value = if se > 0.0 { term.p } else if coefficient == 0.0 { 1.0 } else { 0.0 };

    let pre = |treated: bool| -> Vec<f64> {
        rows.iter()
            .zip(&y)
            .filter(|(r, _)| r.event_year < 0 && r.treated == treated)
            .map(|(_, v)| *v)
            .collect()
    };
    let std_diff = standardized_difference(&pre(true), &pre(false))?;
    Ok(PreTrendTest {
        disease_group: None,
        coefficient,
        se,
        statistic,
        p_value,
        std_diff,
        n_rows: fit.n_rows,
        n_clusters: fit.n_clusters,
        pass_p: p_value >= PRETREND_ALPHA,
        pass_d: std_diff.abs() < PRETREND_MAX_STD_DIFF,
        event_study: es,
    })
}

/// Pre-trend test per disease group; groups whose test cannot be run are
/// returned with the error message.
pub fn pretrend_by_group(
    panel: &Panel,
    outcome: Outcome,
) -> Vec<(DiseaseGroup, std::result::Result<PreTrendTest, String>)> {
    use rayon::prelude::*;
    let groups: Vec<DiseaseGroup> = panel
        .pairs
        .iter()
        .map(|p| p.disease_group)
        .collect::<std::collections::BTreeSet<_>>()
        .into_iter()
        .collect();
    groups
        .into_par_iter()
        .map(|g| {
            let sub = panel.filter_pairs(|p| p.disease_group == g);
            let res = pretrend_test(&sub, outcome)
                .map(|mut t| {
                    t.disease_group = Some(g.id());
                    t
                })
                .map_err(|e| e.to_string());
            (g, res)
        })
        .collect()
}

pub const RESULT_COLUMNS: [&str; 8] = ["spec", "outcome", "term", "estimate", "se", "p", "n", "clusters"];

/// Writes results in long form: one line per (result, term).
pub fn write_results(path: &Path, results: &[EstimationResult], header: Option<&FileHeader>) -> Result<()> {
    let mut out = CsvOut::create(path, header, &RESULT_COLUMNS)?;
    for r in results {
        for t in &r.terms {
            out.row([
                r.spec.clone(),
                r.outcome.clone(),
                t.name.clone(),
                t.estimate.to_string(),
                t.se.to_string(),
                t.p.to_string(),
                r.n_rows.to_string(),
                r.n_clusters.to_string(),
            ])?;
        }
    }
    out.finish()
}

/// A results.csv line read back.
#[derive(Debug, Clone, PartialEq)]
pub struct ResultLine {
    pub spec: String,
    pub outcome: String,
    pub term: String,
    pub estimate: f64,
    pub se: f64,
    pub p: f64,
    pub n: usize,
    pub clusters: usize,
}

pub fn read_results(path: &Path) -> Result<Vec<ResultLine>> {
    let table = CsvTable::read(path, &RESULT_COLUMNS)?;
    table
        .rows()
        .map(|row| {
            Ok(ResultLine {
                spec: row.str("spec")?.to_string(),
                outcome: row.str("outcome")?.to_string(),
                term: row.str("term")?.to_string(),
                estimate: row.parse("estimate")?,
                se: row.parse("se")?,
                p: row.parse("p")?,
                n: row.parse("n")?,
                clusters: row.parse("clusters")?,
            })
        })
        .collect()
}

/// Machine-readable companion to results.csv.
pub fn write_results_json(path: &Path, results: &[EstimationResult], header: &FileHeader) -> Result<()> {
    #[derive(Serialize)]
    struct Doc<'a> {
        version: &'a str,
        seed: u64,
        config: &'a str,
        results: Vec<Entry<'a>>,
    }
    #[derive(Serialize)]
    struct Entry<'a> {
        #[serde(flatten)]
        result: &'a EstimationResult,
        effect_percent: Option<f64>,
    }
    let doc = Doc {
        version: crate::io::VERSION,
        seed: header.seed,
        config: &header.config_hash,
        results: results
            .iter()
            .map(|r| Entry {
                result: r,
                effect_percent: r.effect_percent(),
            })
            .collect(),
    };
    let mut text = serde_json::to_string_pretty(&doc)?;
    text.push('\n');
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub fn write_pretrend(
    path: &Path,
    tests: &[(DiseaseGroup, std::result::Result<PreTrendTest, String>)],
    header: Option<&FileHeader>,
) -> Result<()> {
    let mut out = CsvOut::create(
        path,
        header,
        &["group", "coef_t_m2", "se", "f_stat", "p", "std_diff", "n", "clusters", "pass", "note"],
    )?;
    for (g, t) in tests {
        match t {
            Ok(t) => out.row([
                g.to_string(),
                t.coefficient.to_string(),
                t.se.to_string(),
                t.statistic.to_string(),
                t.p_value.to_string(),
                t.std_diff.to_string(),
                t.n_rows.to_string(),
                t.n_clusters.to_string(),
                u8::from(t.pass()).to_string(),
                String::new(),
            ])?,
            Err(e) => out.row([
                g.to_string(),
                String::new(),
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

/// Result lines keyed by `(spec, outcome, term)`.
pub fn index_results(lines: &[ResultLine]) -> BTreeMap<(String, String, String), &ResultLine> {
    lines
        .iter()
        .map(|l| ((l.spec.clone(), l.outcome.clone(), l.term.clone()), l))
        .collect()
}
