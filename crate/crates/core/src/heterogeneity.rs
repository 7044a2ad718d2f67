//! Effect heterogeneity: estimates on subsamples of pairs and model-based
//! recursive partitioning of the DDD model over the shock year.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::estimator::{build_design, estimate, EstimationResult, EstimatorSpec, FeDesign, FeFit};
use crate::estimator::fe::fit_fe_ols;
use crate::innovation::Measure;
use crate::io::{CsvOut, FileHeader};
use crate::linalg::{symmetric_eigen, DenseMatrix};
use crate::registry::{DiseaseGroup, IcdChapter, Outcome};
use crate::stacking::{PairInfo, Panel};
use crate::stats::chi_squared_sf;

/// Gender code of men; `1` codes women.
pub const MALE: u8 = 0;
/// Schooling years up to which education counts as compulsory only.
pub const COMPULSORY_SCHOOLING_YEARS: u32 = 9;
pub const OLDER_AGE: i32 = 60;
/// Hospital stays longer than this many days are "long".
pub const LONG_STAY_DAYS: u32 = 7;

/// Subsamples keyed on the treated member of each pair; the control arm
/// follows its pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Subsample {
    Men,
    Women,
    Single,
    Married,
    BelowAge60,
    Age60Plus,
    Compulsory,
    Higher,
    LiquidityConstrained,
    Unconstrained,
    Cancer,
    NonCancer,
    Chapter(IcdChapter),
    ShortStay,
    LongStay,
}

impl Subsample {
    pub fn name(&self) -> String {
        match self {
            Subsample::Men => "men".into(),
            Subsample::Women => "women".into(),
            Subsample::Single => "single".into(),
            Subsample::Married => "married".into(),
            Subsample::BelowAge60 => "age_below_60".into(),
            Subsample::Age60Plus => "age_60_plus".into(),
            Subsample::Compulsory => "compulsory_schooling".into(),
            Subsample::Higher => "higher_schooling".into(),
            Subsample::LiquidityConstrained => "liquidity_constrained".into(),
            Subsample::Unconstrained => "unconstrained".into(),
            Subsample::Cancer => "cancer".into(),
            Subsample::NonCancer => "non_cancer".into(),
            Subsample::Chapter(c) => format!("chapter:{}", c.name()),
            Subsample::ShortStay => "short_stay".into(),
            Subsample::LongStay => "long_stay".into(),
        }
    }

    pub fn matches(&self, p: &PairInfo) -> bool {
        match self {
            Subsample::Men => p.gender == MALE,
            Subsample::Women => p.gender != MALE,
            Subsample::Single => !p.married,
            Subsample::Married => p.married,
            Subsample::BelowAge60 => p.age_at_shock < OLDER_AGE,
            Subsample::Age60Plus => p.age_at_shock >= OLDER_AGE,
            Subsample::Compulsory => p.schooling_years <= COMPULSORY_SCHOOLING_YEARS,
            Subsample::Higher => p.schooling_years > COMPULSORY_SCHOOLING_YEARS,
            Subsample::LiquidityConstrained => p.liquidity,
            Subsample::Unconstrained => !p.liquidity,
            Subsample::Cancer => p.disease_group.is_cancer(),
            Subsample::NonCancer => !p.disease_group.is_cancer(),
            Subsample::Chapter(c) => p.disease_group.chapter() == *c,
            Subsample::ShortStay => p.stay_days.is_some_and(|d| d <= LONG_STAY_DAYS),
            Subsample::LongStay => p.stay_days.is_some_and(|d| d > LONG_STAY_DAYS),
        }
    }

    /// The demographic splits plus one entry per ICD chapter.
    pub fn standard_set() -> Vec<Subsample> {
        let mut v = vec![
            Subsample::Men,
            Subsample::Women,
            Subsample::Single,
            Subsample::Married,
            Subsample::BelowAge60,
            Subsample::Age60Plus,
            Subsample::Compulsory,
            Subsample::Higher,
            Subsample::LiquidityConstrained,
            Subsample::Unconstrained,
            Subsample::Cancer,
            Subsample::NonCancer,
            Subsample::ShortStay,
            Subsample::LongStay,
        ];
        v.extend(IcdChapter::ALL.iter().map(|&c| Subsample::Chapter(c)));
        v
    }
}

#[derive(Debug, Clone)]
pub struct SubsampleResult {
    pub name: String,
    pub n_pairs: usize,
    /// Unidentified subsamples carry the reason instead of a fit.
    pub result: std::result::Result<EstimationResult, String>,
}

/// One estimate per subsample; failures are recorded, not propagated.
pub fn subsample_estimates(
    panel: &Panel,
    specs: &[Subsample],
    outcome: Outcome,
    spec: &EstimatorSpec,
) -> Vec<SubsampleResult> {
    specs
        .par_iter()
        .map(|s| {
            let sub = panel.filter_pairs(|p| s.matches(p));
            let result = if sub.pairs.is_empty() {
                Err("no pairs match".to_string())
            } else {
                estimate(&sub, outcome, spec).map_err(|e| e.to_string())
            };
            SubsampleResult {
                name: s.name(),
                n_pairs: sub.pairs.len(),
                result,
            }
        })
        .collect()
}

pub fn write_subsamples(path: &Path, results: &[SubsampleResult], header: Option<&FileHeader>) -> Result<()> {
    let mut out = CsvOut::create(
        path,
        header,
        &["subsample", "n_pairs", "term", "estimate", "se", "p", "n", "clusters", "effect_percent", "note"],
    )?;
    for r in results {
        match &r.result {
            Ok(res) => {
                for t in &res.terms {
                    let eff = if t.name == "dd_m" {
                        res.effect_percent().map(|v| v.to_string()).unwrap_or_default()
                    } else {
                        String::new()
                    };
                    out.row([
                        r.name.clone(),
                        r.n_pairs.to_string(),
                        t.name.clone(),
                        t.estimate.to_string(),
                        t.se.to_string(),
                        t.p.to_string(),
                        res.n_rows.to_string(),
                        res.n_clusters.to_string(),
                        eff,
                        String::new(),
                    ])?;
                }
            }
            Err(e) => out.row([
                r.name.clone(),
                r.n_pairs.to_string(),
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

// ---------------------------------------------------------------------------
// Model-based recursive partitioning

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MobOptions {
    /// Significance level of the instability test.
    pub alpha: f64,
    /// Minimum number of pairs in each child of a split.
    pub min_node: usize,
    pub max_depth: usize,
}

impl Default for MobOptions {
    fn default() -> Self {
        Self {
            alpha: 0.001,
            min_node: 30,
            max_depth: 6,
        }
    }
}

/// Parameter-instability test of a node model across shock years.
#[derive(Debug, Clone, PartialEq)]
pub struct InstabilityTest {
    pub statistic: f64,
    pub df: usize,
    pub p_value: f64,
    pub categories: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionNode {
    pub id: usize,
    /// Inclusive shock-year range covered by the node.
    pub years: (i32, i32),
    pub n_rows: usize,
    pub n_pairs: usize,
    pub names: Vec<String>,
    pub coefficients: Vec<f64>,
    /// Regressors dropped as collinear inside this node.
    pub dropped: Vec<String>,
    pub rss: f64,
    pub test: Option<InstabilityTest>,
    /// First shock year of the right child.
    pub split_year: Option<i32>,
    pub children: Vec<PartitionNode>,
    pub note: Option<String>,
}

impl PartitionNode {
    pub fn is_leaf(&self) -> bool {
        self.children.is_empty()
    }

    pub fn depth(&self) -> usize {
        self.children.iter().map(|c| 1 + c.depth()).max().unwrap_or(0)
    }

    pub fn leaves(&self) -> Vec<&PartitionNode> {
        if self.is_leaf() {
            vec![self]
        } else {
            self.children.iter().flat_map(|c| c.leaves()).collect()
        }
    }

    fn params(&self) -> usize {
        self.coefficients.len()
    }

    /// `n·ln(RSS/n) + params·ln(n)` of the segmented model this subtree
    /// represents; fixed effects are common to every segmentation and left out.
    pub fn bic(&self) -> f64 {
        let leaves = self.leaves();
        let rss: f64 = leaves.iter().map(|l| l.rss).sum();
        let params: usize = leaves.iter().map(|l| l.params()).sum();
        bic(self.n_rows, rss, params)
    }

    fn bic_as_leaf(&self) -> f64 {
        bic(self.n_rows, self.rss, self.params())
    }
}

fn bic(n: usize, rss: f64, params: usize) -> f64 {
    let nf = n as f64;
    nf * (rss / nf).ln() + params as f64 * nf.ln()
}

/// Regression data for partitioning: the DDD design plus the shock year
/// and pair of every row.
#[derive(Debug, Clone)]
pub struct MobData {
    pub design: FeDesign<f64>,
    pub years: Vec<i32>,
    pub pairs: Vec<u32>,
}

impl MobData {
    pub fn from_panel(panel: &Panel, outcome: Outcome, measure: Measure) -> Result<Self> {
        let design = build_design(panel, outcome, &EstimatorSpec::ddd(measure))?;
        let (rows, _) = crate::estimator::outcome_rows(panel, outcome);
        Ok(Self {
            design,
            years: rows.iter().map(|r| panel.pair_of(r).shock_year).collect(),
            pairs: rows.iter().map(|r| r.pair).collect(),
        })
    }

    fn subset(&self, idx: &[usize]) -> FeDesign<f64> {
        let d = &self.design;
        let pick = |v: &[f64]| idx.iter().map(|&i| v[i]).collect::<Vec<_>>();
        let mut out = FeDesign::new(
            pick(&d.y),
            idx.iter().map(|&i| d.groups[i]).collect(),
            idx.iter().map(|&i| d.clusters[i]).collect(),
        );
        for (n, c) in d.names.iter().zip(&d.columns) {
            out.push(n.clone(), pick(c));
        }
        out
    }

    fn n_pairs(&self, idx: &[usize]) -> usize {
        idx.iter().map(|&i| self.pairs[i]).collect::<BTreeSet<_>>().len()
    }
}

/// Fits the design, dropping columns reported collinear until it is
/// identified.
fn fit_reduced(mut design: FeDesign<f64>) -> Result<(FeFit<f64>, Vec<String>)> {
    let mut dropped = Vec::new();
    loop {
        match fit_fe_ols(&design) {
            Ok(fit) => return Ok((fit, dropped)),
            Err(Error::RankDeficient { columns }) if columns.len() < design.names.len() => {
                for c in columns {
                    let j = design.names.iter().position(|n| *n == c).expect("reported column exists");
                    design.names.remove(j);
                    design.columns.remove(j);
                    dropped.push(c);
                }
            }
            Err(e) => return Err(e),
        }
    }
}

/// Score test of the null that the node coefficients are equal across
/// shock years.
///
/// With `A_c` the per-year sums of cluster scores `x̃ᵢûᵢ`, `H_c` the per-year
/// cross-products and `H = Σ H_c`, the sums satisfy `A = (I − P)U` where
/// block `(c, d)` of `P` is `H_c H⁻¹` and `U` stacks the error scores. The
/// covariance `(I − P) diag(V_c) (I − P)ᵀ`, with `V_c` the outer products of
/// cluster scores, is inverted on its range; the statistic is χ² with df
/// equal to that rank — `(C−1)k` unless regressors are proportional within
/// a year, as `dd` and `dd×m` are when `m` only varies across years.
pub fn instability_test(fit: &FeFit<f64>, row_years: &[i32]) -> Result<InstabilityTest> {
    let k = fit.k();
    let w = &fit.within;
    let cats: Vec<i32> = w
        .rows
        .iter()
        .map(|&i| row_years[i])
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let c = cats.len();
    if c < 2 {
        return Err(Error::Validation("instability test needs at least two shock years".into()));
    }
    let cat_of: HashMap<i32, usize> = cats.iter().enumerate().map(|(i, &y)| (y, i)).collect();

    let mut h = vec![DenseMatrix::<f64>::zeros(k, k); c];
    let mut clusters: BTreeMap<u64, (usize, Vec<f64>)> = BTreeMap::new();
    let mut x = vec![0.0; k];
    for (pos, &orig) in w.rows.iter().enumerate() {
        let ci = cat_of[&row_years[orig]];
        for (j, col) in w.columns.iter().enumerate() {
            x[j] = col[pos];
        }
        h[ci].add_outer(&x, 1.0);
        let e = clusters.entry(fit.clusters[pos]).or_insert_with(|| (ci, vec![0.0; k]));
        if e.0 != ci {
            return Err(Error::Validation("a cluster spans several shock years".into()));
        }
        for j in 0..k {
            e.1[j] += x[j] * fit.residuals[pos];
        }
    }
    let mut a = vec![0.0; c * k];
    let mut v = vec![DenseMatrix::<f64>::zeros(k, k); c];
    for (ci, s) in clusters.values() {
        for j in 0..k {
            a[ci * k + j] += s[j];
        }
        v[*ci].add_outer(s, 1.0);
    }

    let dim = c * k;
    let mut m = DenseMatrix::<f64>::identity(dim);
    for (ci, hc) in h.iter().enumerate() {
        let q = hc.matmul(&fit.bread);
        for d in 0..c {
            for r in 0..k {
                for s in 0..k {
                    m[(ci * k + r, d * k + s)] -= q[(r, s)];
                }
            }
        }
    }
    let mut dmat = DenseMatrix::<f64>::zeros(dim, dim);
    for (ci, vc) in v.iter().enumerate() {
        for r in 0..k {
            for s in 0..k {
                dmat[(ci * k + r, ci * k + s)] = vc[(r, s)];
            }
        }
    }
    let cov = m.matmul(&dmat).matmul(&m.transpose());

    // correlation scale so the rank cut-off is unit-free
    let keep: Vec<usize> = (0..dim).filter(|&i| cov[(i, i)] > 0.0).collect();
    let sd: Vec<f64> = keep.iter().map(|&i| cov[(i, i)].sqrt()).collect();
    let n = keep.len();
    let mut corr = DenseMatrix::<f64>::zeros(n, n);
    for (p, &i) in keep.iter().enumerate() {
        for (q, &j) in keep.iter().enumerate() {
            corr[(p, q)] = cov[(i, j)] / (sd[p] * sd[q]);
        }
    }
    let z: Vec<f64> = keep.iter().zip(&sd).map(|(&i, s)| a[i] / s).collect();
    let (vals, vecs) = symmetric_eigen(&corr);
    let top = vals.last().copied().unwrap_or(0.0);
    let mut stat = 0.0;
    let mut df = 0;
    for (col, &l) in vals.iter().enumerate() {
        if l > 1e-8 * top {
            let proj: f64 = (0..n).map(|r| vecs[(r, col)] * z[r]).sum();
            stat += proj * proj / l;
            df += 1;
        }
    }
    if df == 0 {
        return Err(Error::Numerical("degenerate score covariance".into()));
    }
    Ok(InstabilityTest {
        statistic: stat,
        df,
        p_value: chi_squared_sf(stat, df as f64),
        categories: c,
    })
}

struct Grower<'a> {
    data: &'a MobData,
    opts: MobOptions,
    next_id: usize,
}

impl Grower<'_> {
    fn leaf(&mut self, idx: &[usize], note: impl Into<String>) -> PartitionNode {
        let years = year_span(self.data, idx);
        let id = self.next_id;
        self.next_id += 1;
        PartitionNode {
            id,
            years,
            n_rows: idx.len(),
            n_pairs: self.data.n_pairs(idx),
            names: Vec::new(),
            coefficients: Vec::new(),
            dropped: Vec::new(),
            rss: f64::NAN,
            test: None,
            split_year: None,
            children: Vec::new(),
            note: Some(note.into()),
        }
    }

    fn grow(&mut self, idx: Vec<usize>, depth: usize) -> PartitionNode {
        let (fit, dropped) = match fit_reduced(self.data.subset(&idx)) {
            Ok(f) => f,
            Err(e) => return self.leaf(&idx, format!("unfitted: {e}")),
        };
        let id = self.next_id;
        self.next_id += 1;
        let mut node = PartitionNode {
            id,
            years: year_span(self.data, &idx),
            n_rows: fit.n_rows,
            n_pairs: self.data.n_pairs(&idx),
            names: fit.names.clone(),
            coefficients: fit.coefficients.clone(),
            dropped,
            rss: fit.rss,
            test: None,
            split_year: None,
            children: Vec::new(),
            note: None,
        };
        let local_years: Vec<i32> = idx.iter().map(|&i| self.data.years[i]).collect();
        match instability_test(&fit, &local_years) {
            Ok(t) => node.test = Some(t),
            Err(e) => {
                node.note = Some(e.to_string());
                return node;
            }
        }
        let p = node.test.as_ref().map(|t| t.p_value).unwrap_or(1.0);
        if p >= self.opts.alpha {
            return node;
        }
        if depth >= self.opts.max_depth {
            node.note = Some("maximum depth reached".into());
            return node;
        }
        let Some((cut, left, right)) = self.best_cut(&idx) else {
            node.note = Some("no admissible cutpoint".into());
            return node;
        };
        node.split_year = Some(cut);
        let l = self.grow(left, depth + 1);
        let r = self.grow(right, depth + 1);
        node.children = vec![l, r];
        node
    }

    /// Binary cutpoint over ordered years minimising the children's total RSS.
    fn best_cut(&self, idx: &[usize]) -> Option<(i32, Vec<usize>, Vec<usize>)> {
        let years: Vec<i32> = idx
            .iter()
            .map(|&i| self.data.years[i])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let candidates: Vec<(i32, f64)> = years[1..]
            .par_iter()
            .filter_map(|&cut| {
                let (l, r): (Vec<usize>, Vec<usize>) =
                    idx.iter().partition(|&&i| self.data.years[i] < cut);
                if self.data.n_pairs(&l) < self.opts.min_node || self.data.n_pairs(&r) < self.opts.min_node {
                    return None;
                }
                let rl = fit_reduced(self.data.subset(&l)).ok()?.0.rss;
                let rr = fit_reduced(self.data.subset(&r)).ok()?.0.rss;
                Some((cut, rl + rr))
            })
            .collect();
        let (cut, _) = candidates
            .into_iter()
            .min_by(|a, b| a.1.total_cmp(&b.1).then(a.0.cmp(&b.0)))?;
        let (l, r) = idx.iter().partition(|&&i| self.data.years[i] < cut);
        Some((cut, l, r))
    }
}

fn year_span(data: &MobData, idx: &[usize]) -> (i32, i32) {
    idx.iter().fold((i32::MAX, i32::MIN), |(lo, hi), &i| {
        (lo.min(data.years[i]), hi.max(data.years[i]))
    })
}

/// Collapses, bottom-up, every split whose segmented model does not lower
/// the BIC.
pub fn prune(node: &mut PartitionNode) {
    if node.is_leaf() {
        return;
    }
    for c in &mut node.children {
        prune(c);
    }
    if node.bic() >= node.bic_as_leaf() {
        node.children.clear();
        node.split_year = None;
        node.note = Some("split removed by BIC pruning".into());
    }
}

/// Recursive partitioning of the DDD model over shock years.
pub fn mob_partition(data: &MobData, opts: MobOptions) -> Result<PartitionNode> {
    if !(opts.alpha > 0.0 && opts.alpha < 1.0) {
        return Err(Error::Validation(format!("alpha must be in (0, 1), got {}", opts.alpha)));
    }
    let distinct: BTreeSet<i32> = data.years.iter().copied().collect();
    if distinct.len() < 2 {
        return Err(Error::Validation("partitioning needs at least two distinct shock years".into()));
    }
    let mut g = Grower {
        data,
        opts,
        next_id: 0,
    };
    let mut root = g.grow((0..data.years.len()).collect(), 0);
    prune(&mut root);
    Ok(root)
}

/// Partition per disease group, run in parallel.
pub fn mob_by_group(
    panel: &Panel,
    outcome: Outcome,
    measure: Measure,
    opts: MobOptions,
) -> Vec<(DiseaseGroup, std::result::Result<PartitionNode, String>)> {
    let groups: BTreeSet<DiseaseGroup> = panel.pairs.iter().map(|p| p.disease_group).collect();
    groups
        .into_iter()
        .collect::<Vec<_>>()
        .into_par_iter()
        .map(|g| {
            let sub = panel.filter_pairs(|p| p.disease_group == g);
            let tree = MobData::from_panel(&sub, outcome, measure)
                .and_then(|d| mob_partition(&d, opts))
                .map_err(|e| e.to_string());
            (g, tree)
        })
        .collect()
}

pub const NO_INSTABILITY: &str = "No instability";

#[derive(Debug, Clone, PartialEq)]
pub struct PartitionSummary {
    pub disease_group: DiseaseGroup,
    pub root: String,
    pub depth: usize,
    pub n_leaves: usize,
}

/// One line per group: the root split year, or "No instability".
pub fn report_partition(
    trees: &[(DiseaseGroup, std::result::Result<PartitionNode, String>)],
) -> Vec<PartitionSummary> {
    trees
        .iter()
        .map(|(g, t)| match t {
            Ok(t) => PartitionSummary {
                disease_group: *g,
                root: t
                    .split_year
                    .map(|y| y.to_string())
                    .unwrap_or_else(|| NO_INSTABILITY.to_string()),
                depth: t.depth(),
                n_leaves: t.leaves().len(),
            },
            Err(_) => PartitionSummary {
                disease_group: *g,
                root: NO_INSTABILITY.to_string(),
                depth: 0,
                n_leaves: 1,
            },
        })
        .collect()
}

pub fn write_partition(path: &Path, summary: &[PartitionSummary], header: Option<&FileHeader>) -> Result<()> {
    let mut out = CsvOut::create(path, header, &["group", "root_year_or_none", "depth", "n_leaves"])?;
    for s in summary {
        out.row([
            s.disease_group.to_string(),
            s.root.clone(),
            s.depth.to_string(),
            s.n_leaves.to_string(),
        ])?;
    }
    out.finish()
}

/// Indented text rendering of a tree.
pub fn render_tree(node: &PartitionNode) -> String {
    let mut s = String::new();
    render_into(node, 0, &mut s);
    s
}

fn render_into(node: &PartitionNode, indent: usize, out: &mut String) {
    let pad = "  ".repeat(indent);
    let _ = write!(
        out,
        "{pad}[{}] years {}-{} n={} pairs={}",
        node.id, node.years.0, node.years.1, node.n_rows, node.n_pairs
    );
    if let Some(t) = &node.test {
        let _ = write!(out, " stat={:.3} df={} p={:.4e}", t.statistic, t.df, t.p_value);
    }
    if let Some(y) = node.split_year {
        let _ = write!(out, " split<{y}");
    }
    for (n, c) in node.names.iter().zip(&node.coefficients) {
        let _ = write!(out, " {n}={c:.4}");
    }
    if let Some(note) = &node.note {
        let _ = write!(out, " ({note})");
    }
    out.push('\n');
    for c in &node.children {
        render_into(c, indent + 1, out);
    }
}

pub fn write_trees(
    path: &Path,
    trees: &[(DiseaseGroup, std::result::Result<PartitionNode, String>)],
    header: Option<&FileHeader>,
) -> Result<()> {
    let mut text = header.map(|h| h.render()).unwrap_or_default();
    for (g, t) in trees {
        let _ = writeln!(text, "group {g}");
        match t {
            Ok(t) => text.push_str(&render_tree(t)),
            Err(e) => {
                let _ = writeln!(text, "  (not partitioned: {e})");
            }
        }
    }
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::registry::N_OUTCOMES;
    use crate::stacking::StackedRow;

    fn info(g: u8, s: i32, gender: u8) -> PairInfo {
        PairInfo {
            treated_person_id: 0,
            control_person_id: 0,
            disease_group: DiseaseGroup::new(g).unwrap(),
            shock_year: s,
            m_nme: 0.1 * (s - 2000) as f64,
            m_patent: 0.0,
            gender,
            married: false,
            age_at_shock: 55,
            schooling_years: 12,
            liquidity: false,
            stay_days: Some(3),
        }
    }

    /// Deterministic pseudo-noise panel; `beta3(year)` sets the DDD slope.
    fn panel(years: &[i32], per_year: usize, beta3: impl Fn(i32) -> f64) -> Panel {
        let mut p = Panel::default();
        let mut state = 12345u64;
        let mut noise = || {
            state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            ((state >> 11) as f64 / (1u64 << 53) as f64 - 0.5) * 0.4
        };
        for &s in years {
            for i in 0..per_year {
                let idx = p.pairs.len() as u32;
                let pi = info(3, s, (i % 2) as u8);
                let m = pi.m_nme;
                p.pairs.push(pi);
                for (arm, treated) in [(1u64, true), (2, false)] {
                    let eid = 2 * idx as u64 + arm;
                    let a = noise() * 5.0;
                    for t in -3..=1 {
                        let mut y = a + 0.05 * t as f64 + noise();
                        if treated && t >= 0 {
                            y += -0.3 + beta3(s) * m;
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
        p
    }

    #[test]
    fn subsamples_partition_rows() {
        let p = panel(&[2001, 2002, 2003], 40, |_| 1.0);
        let spec = EstimatorSpec::dd();
        let res = subsample_estimates(&p, &[Subsample::Men, Subsample::Women, Subsample::NonCancer], Outcome::FamilyIncome, &spec);
        let n: usize = res[..2].iter().map(|r| r.result.as_ref().unwrap().n_rows).sum();
        assert_eq!(n, p.rows.len());
        assert_eq!(res[2].n_pairs, 0);
        assert!(res[2].result.is_err());
    }

    #[test]
    fn two_identical_years_do_not_split() {
        let p = panel(&[2001, 2002], 60, |_| 1.0);
        let data = MobData::from_panel(&p, Outcome::FamilyIncome, Measure::Nme).unwrap();
        let tree = mob_partition(&data, MobOptions::default()).unwrap();
        assert!(tree.is_leaf());
        let rep = report_partition(&[(DiseaseGroup::new(3).unwrap(), Ok(tree))]);
        assert_eq!(rep[0].root, NO_INSTABILITY);
    }

    #[test]
    fn planted_break_is_found_and_ranges_partition() {
        let years: Vec<i32> = (2001..=2008).collect();
        let p = panel(&years, 80, |s| if s >= 2005 { 4.0 } else { 1.0 });
        let data = MobData::from_panel(&p, Outcome::FamilyIncome, Measure::Nme).unwrap();
        let tree = mob_partition(&data, MobOptions::default()).unwrap();
        assert_eq!(tree.split_year, Some(2005));
        let t = tree.test.as_ref().unwrap();
        // m is constant within a year, so each year adds two free score directions
        assert_eq!(t.df, 2 * (years.len() - 2));
        let mut covered: Vec<(i32, i32)> = tree.leaves().iter().map(|l| l.years).collect();
        covered.sort();
        assert_eq!(covered.first().unwrap().0, 2001);
        assert_eq!(covered.last().unwrap().1, 2008);
        for w in covered.windows(2) {
            assert_eq!(w[0].1 + 1, w[1].0);
        }
        let text = render_tree(&tree);
        assert!(text.contains("split<2005"));
    }

    #[test]
    fn pruning_never_raises_bic() {
        let years: Vec<i32> = (2001..=2006).collect();
        let p = panel(&years, 50, |s| if s >= 2004 { 3.0 } else { 1.0 });
        let data = MobData::from_panel(&p, Outcome::FamilyIncome, Measure::Nme).unwrap();
        let mut g = Grower {
            data: &data,
            opts: MobOptions::default(),
            next_id: 0,
        };
        let unpruned = g.grow((0..data.years.len()).collect(), 0);
        let mut pruned = unpruned.clone();
        prune(&mut pruned);
        assert!(pruned.bic() <= unpruned.bic() + 1e-9);
    }
}
