//! Stage functions behind the command-line tool.
//!
//! Stages hand off through files: every stage reads its inputs from the
//! input directory and writes into the output directory, so each one can
//! be re-run on its own. Nothing here mutates an input file.

use std::path::PathBuf;

use log::{info, warn};

use crate::config::KeyValues;
use crate::error::{Error, Result};
use crate::estimator::{
    estimate, pretrend_by_group, pretrend_test, read_results, write_pretrend, write_results, write_results_json,
    EstimationResult, EstimatorSpec,
};
use crate::heterogeneity::{
    mob_by_group, report_partition, subsample_estimates, write_partition, write_subsamples, write_trees, MobOptions,
    Subsample, NO_INSTABILITY,
};
use crate::innovation::{build_series, detrend, filter_international, lag, load_events, InnovationEvent, InnovationSeries, Measure};
use crate::io::FileHeader;
use crate::matching::{match_registry, read_pairs, write_balance, write_pairs, MatchedPair, DEFAULT_CALIPER};
use crate::registry::{load_registry, Deflator, Outcome, Registry, RegistryConfig, DEFAULT_BASE_YEAR};
use crate::robustness::{run_battery, write_battery, BatteryInput, Variant};
use crate::simulator::{oracle_compare, simulate as run_dgp, DgpConfig, Tolerances, Truth};
use crate::stacking::{build_panel, Panel};

/// Years of innovation history kept before the first outcome year; enough
/// for the longest lag variant.
pub const SERIES_LEAD: i32 = 10;

#[derive(Debug, Clone, PartialEq)]
pub struct RunOptions {
    pub seed: u64,
    /// Directory the stage reads from.
    pub input: PathBuf,
    /// Directory the stage writes to.
    pub out: PathBuf,
    /// Simulation parameters (`simulate` and `pipeline`).
    pub config: KeyValues,
    /// `None` takes the simulation config's `lag`, else 1.
    pub lag: Option<u32>,
    pub detrend: bool,
    pub international: bool,
    pub caliper: f64,
    pub include_emergency: bool,
    /// Empty means the default set.
    pub specs: Vec<EstimatorSpec>,
    /// `None` means every outcome.
    pub outcomes: Option<Vec<Outcome>>,
    pub measure: Measure,
    pub mob: MobOptions,
    pub variants: Vec<Variant>,
}

impl RunOptions {
    pub fn new(seed: u64, input: impl Into<PathBuf>, out: impl Into<PathBuf>) -> Self {
        Self {
            seed,
            input: input.into(),
            out: out.into(),
            config: KeyValues::default(),
            lag: None,
            detrend: false,
            international: false,
            caliper: DEFAULT_CALIPER,
            include_emergency: false,
            specs: Vec::new(),
            outcomes: None,
            measure: Measure::Nme,
            mob: MobOptions::default(),
            variants: Variant::ALL.to_vec(),
        }
    }

    pub fn effective_lag(&self) -> Result<u32> {
        match self.lag {
            Some(l) => Ok(l),
            None => self.config.get_or("lag", 1),
        }
    }

    fn effective_specs(&self) -> Vec<EstimatorSpec> {
        if !self.specs.is_empty() {
            return self.specs.clone();
        }
        vec![
            EstimatorSpec::dd(),
            EstimatorSpec::dd().by_event_year(),
            EstimatorSpec::ddd(Measure::Nme),
            EstimatorSpec::ddd(Measure::Patent),
            EstimatorSpec::ddd(Measure::Nme).by_event_year(),
        ]
    }

    /// Canonical text hashed into every output header. Paths are left out
    /// so that reruns into different directories stay comparable.
    pub fn render(&self) -> String {
        let specs: Vec<String> = self.effective_specs().iter().map(|s| s.descriptor()).collect();
        let outcomes = match &self.outcomes {
            Some(os) => os.iter().map(|o| o.column()).collect::<Vec<_>>().join(","),
            None => "all".into(),
        };
        let variants: Vec<&str> = self.variants.iter().map(|v| v.as_str()).collect();
        format!(
            "{}lag={:?}\ndetrend={}\ninternational={}\ncaliper={}\nemergency={}\nspecs={}\noutcomes={}\nmeasure={}\nalpha={}\nmin_node={}\nmax_depth={}\nvariants={}\n",
            self.config.render(),
            self.lag,
            self.detrend,
            self.international,
            self.caliper,
            self.include_emergency,
            specs.join(","),
            outcomes,
            self.measure.as_str(),
            self.mob.alpha,
            self.mob.min_node,
            self.mob.max_depth,
            variants.join(","),
        )
    }

    fn header(&self, stage: &str) -> FileHeader {
        FileHeader::new(self.seed, &self.render()).with("stage", stage)
    }

    fn out_file(&self, name: &str) -> PathBuf {
        self.out.join(name)
    }

    fn in_file(&self, name: &str) -> PathBuf {
        self.input.join(name)
    }

    fn primary_outcome(&self) -> Outcome {
        self.outcomes
            .as_ref()
            .and_then(|os| os.first().copied())
            .unwrap_or(Outcome::FamilyIncome)
    }
}

/// One line per stage for the console.
pub type Summary = String;

fn ensure_out(opts: &RunOptions) -> Result<()> {
    std::fs::create_dir_all(&opts.out).map_err(|e| Error::io(&opts.out, e))
}

fn require(path: PathBuf) -> Result<PathBuf> {
    if path.is_file() {
        Ok(path)
    } else {
        Err(Error::MissingInput(path.display().to_string()))
    }
}

/// Register, innovation events and deflator of the input directory.
pub struct Inputs {
    pub registry: Registry,
    pub events: Vec<InnovationEvent>,
    pub deflator: Deflator,
}

impl Inputs {
    pub fn load(opts: &RunOptions) -> Result<Self> {
        let registry = load_registry(
            &require(opts.in_file("persons.csv"))?,
            &require(opts.in_file("outcomes.csv"))?,
            &require(opts.in_file("shocks.csv"))?,
            &RegistryConfig::default(),
        )?;
        let events = load_events(&require(opts.in_file("innovations.csv"))?)?;
        let deflator_path = opts.in_file("deflator.csv");
        let deflator = if deflator_path.is_file() {
            Deflator::load(&deflator_path, DEFAULT_BASE_YEAR)?
        } else {
            let (lo, hi) = registry.outcome_years().unwrap_or((DEFAULT_BASE_YEAR, DEFAULT_BASE_YEAR));
            warn!("no deflator.csv in {}; outcomes are taken as real", opts.input.display());
            Deflator::identity(lo.min(DEFAULT_BASE_YEAR)..=hi.max(DEFAULT_BASE_YEAR), DEFAULT_BASE_YEAR)
        };
        Ok(Self {
            registry,
            events,
            deflator,
        })
    }

    pub fn series_years(&self) -> Result<(i32, i32)> {
        let (lo, hi) = self
            .registry
            .outcome_years()
            .ok_or_else(|| Error::Validation("register has no outcome years".into()))?;
        Ok((lo - SERIES_LEAD, hi))
    }

    /// Raw stocks with the optional international filter applied.
    pub fn raw_series(&self, opts: &RunOptions) -> Result<InnovationSeries> {
        let (first, last) = self.series_years()?;
        let (series, warnings) = if opts.international {
            build_series(&filter_international(&self.events), first, last)?
        } else {
            build_series(&self.events, first, last)?
        };
        if !warnings.is_empty() {
            warn!("{} negative stock(s) clamped to zero", warnings.len());
        }
        Ok(series)
    }

    /// The series estimation uses: raw, optionally detrended, then lagged.
    pub fn series(&self, opts: &RunOptions) -> Result<InnovationSeries> {
        let raw = self.raw_series(opts)?;
        let base = if opts.detrend { detrend(&raw)? } else { raw };
        lag(&base, opts.effective_lag()?)
    }

    pub fn panel(&self, opts: &RunOptions, pairs: &[MatchedPair]) -> Result<Panel> {
        let (panel, warnings) = build_panel(pairs, &self.registry, &self.series(opts)?, &self.deflator)?;
        for w in &warnings {
            warn!("{w:?}");
        }
        Ok(panel)
    }
}

fn load_pairs(opts: &RunOptions) -> Result<Vec<MatchedPair>> {
    read_pairs(&require(opts.in_file("pairs.csv"))?)
}

pub fn simulate(opts: &RunOptions) -> Result<Summary> {
    let mut kv = opts.config.clone();
    kv.set("seed", opts.seed);
    let dgp = DgpConfig::from_kv(&kv)?;
    ensure_out(opts)?;
    let data = run_dgp(&dgp)?;
    data.write(&opts.out, &opts.header("simulate"))?;
    Ok(format!(
        "simulate: {} persons, {} shocks, {} innovation events -> {}",
        data.registry.n_persons(),
        data.registry.shocks().len(),
        data.events.len(),
        opts.out.display()
    ))
}

pub fn ingest(opts: &RunOptions) -> Result<Summary> {
    let inputs = Inputs::load(opts)?;
    ensure_out(opts)?;
    let series = inputs.series(opts)?;
    series.write_csv(&opts.out_file("innovation_series.csv"), Some(&opts.header("ingest")))?;
    let (lo, hi) = series.year_range();
    Ok(format!(
        "ingest: {} persons, {} shocks, {} groups with innovation data over {lo}..={hi}",
        inputs.registry.n_persons(),
        inputs.registry.shocks().len(),
        series.groups().count()
    ))
}

pub fn match_stage(opts: &RunOptions) -> Result<Summary> {
    let inputs = Inputs::load(opts)?;
    ensure_out(opts)?;
    let m = match_registry(&inputs.registry, opts.include_emergency, opts.caliper)?;
    for u in m.outcome.unmatched.iter().take(5) {
        info!("unmatched treated {} (group {}, {}): {}", u.person_id, u.disease_group, u.shock_year, u.reason);
    }
    let header = opts.header("match");
    write_pairs(&opts.out_file("pairs.csv"), &m.outcome.pairs, Some(&header))?;
    write_balance(&opts.out_file("balance.csv"), &m.balance, Some(&m.prematch), Some(&header))?;
    let worst = m
        .balance
        .rows
        .iter()
        .filter(|r| r.scope == "overall")
        .map(|r| r.std_diff.abs())
        .fold(0.0, f64::max);
    Ok(format!(
        "match: {} of {} treated matched ({:.1}%), max overall |d| = {worst:.3}, balance {}",
        m.outcome.pairs.len(),
        m.outcome.n_treated,
        100.0 * m.outcome.match_rate(),
        if m.balance.pass { "ok" } else { "FAILED" }
    ))
}

pub fn stack(opts: &RunOptions) -> Result<Summary> {
    let pairs = load_pairs(opts)?;
    let inputs = Inputs::load(opts)?;
    ensure_out(opts)?;
    let panel = inputs.panel(opts, &pairs)?;
    panel.write_csv(&opts.out_file("panel.csv"), Some(&opts.header("stack")))?;
    Ok(format!("stack: {} pairs, {} rows", panel.pairs.len(), panel.rows.len()))
}

pub fn estimate_stage(opts: &RunOptions) -> Result<Summary> {
    let pairs = load_pairs(opts)?;
    let inputs = Inputs::load(opts)?;
    ensure_out(opts)?;
    let panel = inputs.panel(opts, &pairs)?;
    let explicit = opts.outcomes.is_some();
    let outcomes = opts.outcomes.clone().unwrap_or_else(|| Outcome::ALL.to_vec());
    let mut results: Vec<EstimationResult> = Vec::new();
    for o in outcomes {
        for spec in opts.effective_specs() {
            match estimate(&panel, o, &spec) {
                Ok(r) => results.push(r),
                Err(e) if explicit => return Err(e),
                Err(e) => warn!("{} on {o} skipped: {e}", spec.descriptor()),
            }
        }
    }
    let header = opts.header("estimate");
    write_results(&opts.out_file("results.csv"), &results, Some(&header))?;
    write_results_json(&opts.out_file("results.json"), &results, &header)?;

    let mut summary = format!("estimate: {} fits on {} pairs", results.len(), panel.pairs.len());
    if let Some(r) = results.iter().find(|r| r.spec == "dd" && r.outcome == opts.primary_outcome().column()) {
        if let (Some(b), Some(se)) = (r.estimate("dd"), r.se("dd")) {
            summary.push_str(&format!(", dd = {b:.4} ({se:.4})"));
        }
    }
    let truth_path = opts.in_file("truth.json");
    if truth_path.is_file() {
        let truth = Truth::load(&truth_path)?;
        let lines = read_results(&opts.out_file("results.csv"))?;
        let report = oracle_compare(&truth, &lines, Tolerances::default(), &[]);
        report.write_csv(&opts.out_file("oracle.csv"), Some(&header))?;
        summary.push_str(&format!(
            ", oracle {}/{} within tolerance, coverage {:.0}%",
            report.lines.iter().filter(|l| l.pass).count(),
            report.lines.len(),
            100.0 * report.coverage()
        ));
    }
    Ok(summary)
}

pub fn diagnose(opts: &RunOptions) -> Result<Summary> {
    let pairs = load_pairs(opts)?;
    let inputs = Inputs::load(opts)?;
    ensure_out(opts)?;
    let panel = inputs.panel(opts, &pairs)?;
    let o = opts.primary_outcome();
    let header = opts.header("diagnose");
    let pooled = pretrend_test(&panel, o)?;
    write_results(&opts.out_file("eventstudy.csv"), std::slice::from_ref(&pooled.event_study), Some(&header))?;
    let groups = pretrend_by_group(&panel, o);
    write_pretrend(&opts.out_file("pretrend.csv"), &groups, Some(&header))?;
    let tested = groups.iter().filter(|(_, r)| r.is_ok()).count();
    let passed = groups.iter().filter(|(_, r)| r.as_ref().is_ok_and(|t| t.pass())).count();
    Ok(format!(
        "diagnose: pooled pre-trend p = {:.3}, d = {:.3}; {passed} of {tested} groups pass",
        pooled.p_value, pooled.std_diff
    ))
}

pub fn partition(opts: &RunOptions) -> Result<Summary> {
    let pairs = load_pairs(opts)?;
    let inputs = Inputs::load(opts)?;
    ensure_out(opts)?;
    let panel = inputs.panel(opts, &pairs)?;
    let o = opts.primary_outcome();
    let header = opts.header("partition");
    let trees = mob_by_group(&panel, o, opts.measure, opts.mob);
    let summary = report_partition(&trees);
    write_partition(&opts.out_file("partition.csv"), &summary, Some(&header))?;
    write_trees(&opts.out_file("trees.txt"), &trees, Some(&header))?;
    let subs = subsample_estimates(&panel, &Subsample::standard_set(), o, &EstimatorSpec::ddd(opts.measure));
    write_subsamples(&opts.out_file("subsamples.csv"), &subs, Some(&header))?;
    let split = summary.iter().filter(|s| s.root != NO_INSTABILITY && !s.root.is_empty()).count();
    Ok(format!(
        "partition: {} groups, {split} with instability; {} subsamples",
        summary.len(),
        subs.len()
    ))
}

pub fn robust(opts: &RunOptions) -> Result<Summary> {
    let pairs = load_pairs(opts)?;
    let inputs = Inputs::load(opts)?;
    ensure_out(opts)?;
    let input = BatteryInput {
        registry: &inputs.registry,
        events: &inputs.events,
        deflator: &inputs.deflator,
        pairs: &pairs,
        series_years: inputs.series_years()?,
        base_lag: opts.effective_lag()?,
        outcome: opts.primary_outcome(),
        measure: opts.measure,
        caliper: opts.caliper,
    };
    let rows = run_battery(&input, &opts.variants)?;
    write_battery(&opts.out_file("robust.csv"), &rows, Some(&opts.header("robust")))?;
    let failed = rows.iter().filter(|r| r.result.is_err()).count();
    Ok(format!("robust: {} variants, {failed} failed", rows.len()))
}

/// simulate → match → stack → estimate → diagnose → partition → robust,
/// all inside `opts.out`.
pub fn pipeline(opts: &RunOptions) -> Result<Vec<Summary>> {
    let mut o = opts.clone();
    o.input = o.out.clone();
    let stages: [fn(&RunOptions) -> Result<Summary>; 7] =
        [simulate, match_stage, stack, estimate_stage, diagnose, partition, robust];
    let mut out = Vec::new();
    for stage in stages {
        let s = stage(&o)?;
        info!("{s}");
        out.push(s);
    }
    Ok(out)
}

