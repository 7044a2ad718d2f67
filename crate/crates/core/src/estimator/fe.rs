//! Within-transformed OLS with a CR1 cluster-robust sandwich.
//!
//! Individual fixed effects are absorbed by demeaning every variable
//! inside its group. Groups with a single row carry no within variation and
//! are dropped before fitting. Cross-products are accumulated over fixed
//! row blocks and reduced in block order, so results do not depend on the
//! number of worker threads.

use std::collections::HashMap;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{cholesky, DenseMatrix};
use crate::scalar::Scalar;

const BLOCK: usize = 16_384;

/// Regression inputs: outcome, named regressor columns, the fixed-effect
/// group of each row and its cluster.
#[derive(Debug, Clone)]
pub struct FeDesign<T> {
    pub y: Vec<T>,
    pub names: Vec<String>,
    /// Column-major regressors, each of length `y.len()`.
    pub columns: Vec<Vec<T>>,
    pub groups: Vec<u64>,
    pub clusters: Vec<u64>,
}

impl<T: Scalar> FeDesign<T> {
    pub fn new(y: Vec<T>, groups: Vec<u64>, clusters: Vec<u64>) -> Self {
        Self {
            y,
            names: Vec::new(),
            columns: Vec::new(),
            groups,
            clusters,
        }
    }

    pub fn push(&mut self, name: impl Into<String>, column: Vec<T>) {
        self.names.push(name.into());
        self.columns.push(column);
    }

    pub fn n_rows(&self) -> usize {
        self.y.len()
    }

    fn check(&self) -> Result<()> {
        let n = self.y.len();
        if self.groups.len() != n || self.clusters.len() != n {
            return Err(Error::Validation(format!(
                "group/cluster keys ({}, {}) do not match {n} rows",
                self.groups.len(),
                self.clusters.len()
            )));
        }
        if let Some((name, c)) = self
            .names
            .iter()
            .zip(&self.columns)
            .find(|(_, c)| c.len() != n)
        {
            return Err(Error::Validation(format!(
                "column '{name}' has {} rows, expected {n}",
                c.len()
            )));
        }
        if self.columns.is_empty() {
            return Err(Error::Validation("design has no regressors".into()));
        }
        if self.y.iter().chain(self.columns.iter().flatten()).any(|v| !v.is_finite()) {
            return Err(Error::Validation("design contains non-finite values".into()));
        }
        Ok(())
    }
}

/// Variables demeaned within group, restricted to non-singleton groups.
#[derive(Debug, Clone)]
pub struct WithinTransform<T> {
    /// Original row index of every retained row.
    pub rows: Vec<usize>,
    pub y: Vec<T>,
    pub columns: Vec<Vec<T>>,
    /// Group means `(mean y, mean of each column)` keyed by group id.
    pub group_means: HashMap<u64, (T, Vec<T>)>,
    pub n_groups: usize,
    pub singletons_dropped: usize,
}

/// Demeans `y` and every column within `groups`; singleton groups are
/// dropped and counted.
pub fn within_transform<T: Scalar>(groups: &[u64], y: &[T], columns: &[Vec<T>]) -> WithinTransform<T> {
    let n = y.len();
    let k = columns.len();
    let mut index: HashMap<u64, usize> = HashMap::new();
    let mut dense = Vec::with_capacity(n);
    for &g in groups {
        let next = index.len();
        dense.push(*index.entry(g).or_insert(next));
    }
    let n_all = index.len();
    let mut counts = vec![0usize; n_all];
    let mut sums_y = vec![T::zero(); n_all];
    let mut sums_x = vec![T::zero(); n_all * k];
    for i in 0..n {
        let d = dense[i];
        counts[d] += 1;
        sums_y[d] += y[i];
        for (j, col) in columns.iter().enumerate() {
            sums_x[d * k + j] += col[i];
        }
    }
    let rows: Vec<usize> = (0..n).filter(|&i| counts[dense[i]] > 1).collect();
    let mut out_y = Vec::with_capacity(rows.len());
    let mut out_cols: Vec<Vec<T>> = (0..k).map(|_| Vec::with_capacity(rows.len())).collect();
    for &i in &rows {
        let d = dense[i];
        let c = T::of_usize(counts[d]);
        out_y.push(y[i] - sums_y[d] / c);
        for (j, col) in columns.iter().enumerate() {
            out_cols[j].push(col[i] - sums_x[d * k + j] / c);
        }
    }
    let mut group_means = HashMap::with_capacity(n_all);
    let mut singletons = 0;
    for (&g, &d) in &index {
        if counts[d] < 2 {
            singletons += 1;
            continue;
        }
        let c = T::of_usize(counts[d]);
        let mx = (0..k).map(|j| sums_x[d * k + j] / c).collect();
        group_means.insert(g, (sums_y[d] / c, mx));
    }
    WithinTransform {
        rows,
        y: out_y,
        columns: out_cols,
        n_groups: n_all - singletons,
        group_means,
        singletons_dropped: singletons,
    }
}

/// Fixed-effects OLS fit.
#[derive(Debug, Clone)]
pub struct FeFit<T> {
    pub names: Vec<String>,
    pub coefficients: Vec<T>,
    /// CR1 cluster-robust covariance.
    pub covariance: DenseMatrix<T>,
    /// Inverse of the demeaned cross-product matrix (the sandwich bread).
    pub bread: DenseMatrix<T>,
    pub n_rows: usize,
    pub n_groups: usize,
    pub n_clusters: usize,
    pub singletons_dropped: usize,
    pub rss: T,
    pub r_squared_within: T,
    /// Demeaned regressors and residuals over retained rows.
    pub within: WithinTransform<T>,
    pub residuals: Vec<T>,
    /// Cluster id per retained row.
    pub clusters: Vec<u64>,
}

impl<T: Scalar> FeFit<T> {
    pub fn coefficient(&self, name: &str) -> Option<T> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.coefficients[i])
    }

    pub fn se(&self, name: &str) -> Option<T> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| self.covariance[(i, i)].max(T::zero()).sqrt())
    }

    pub fn k(&self) -> usize {
        self.coefficients.len()
    }
}

fn cross_products<T: Scalar>(columns: &[Vec<T>], y: &[T]) -> (DenseMatrix<T>, Vec<T>, T) {
    let n = y.len();
    let k = columns.len();
    let starts: Vec<usize> = (0..n).step_by(BLOCK).collect();
    let partials: Vec<(Vec<T>, Vec<T>, T)> = starts
        .par_iter()
        .map(|&s| {
            let e = (s + BLOCK).min(n);
            let mut xtx = vec![T::zero(); k * k];
            let mut xty = vec![T::zero(); k];
            let mut yty = T::zero();
            let mut row = vec![T::zero(); k];
            for i in s..e {
                for (j, col) in columns.iter().enumerate() {
                    row[j] = col[i];
                }
                let yi = y[i];
                yty += yi * yi;
                for a in 0..k {
                    let xa = row[a];
                    xty[a] += xa * yi;
                    for b in a..k {
                        xtx[a * k + b] += xa * row[b];
                    }
                }
            }
            (xtx, xty, yty)
        })
        .collect();
    let mut xtx = DenseMatrix::zeros(k, k);
    let mut xty = vec![T::zero(); k];
    let mut yty = T::zero();
    for (p, q, r) in partials {
        for a in 0..k {
            xty[a] += q[a];
            for b in a..k {
                xtx[(a, b)] += p[a * k + b];
            }
        }
        yty += r;
    }
    for a in 0..k {
        for b in 0..a {
            xtx[(a, b)] = xtx[(b, a)];
        }
    }
    (xtx, xty, yty)
}

/// Fits OLS on within-demeaned data with CR1 clustered covariance
/// `G/(G−1) · (N−1)/(N−k) · B⁻¹ (Σ_g X_gᵀ û_g û_gᵀ X_g) B⁻¹`.
pub fn fit_fe_ols<T: Scalar>(design: &FeDesign<T>) -> Result<FeFit<T>> {
    design.check()?;
    let within = within_transform(&design.groups, &design.y, &design.columns);
    let n = within.y.len();
    let k = within.columns.len();
    if n <= k {
        return Err(Error::Numerical(format!(
            "{n} usable rows for {k} regressors after dropping singleton groups"
        )));
    }
    let (xtx, xty, _) = cross_products(&within.columns, &within.y);
    let chol = cholesky(&xtx).map_err(|idx| Error::RankDeficient {
        columns: idx.into_iter().map(|i| design.names[i].clone()).collect(),
    })?;
    let beta = chol.solve(&xty);
    let bread = chol.inverse();

    let residuals: Vec<T> = (0..n)
        .map(|i| {
            let mut fit = T::zero();
            for (j, col) in within.columns.iter().enumerate() {
                fit += col[i] * beta[j];
            }
            within.y[i] - fit
        })
        .collect();
    let rss: T = residuals.iter().map(|&u| u * u).sum();
    let tss: T = within.y.iter().map(|&v| v * v).sum();
    let r2 = if tss > T::zero() {
        T::one() - rss / tss
    } else {
        T::zero()
    };

    let clusters: Vec<u64> = within.rows.iter().map(|&i| design.clusters[i]).collect();
    let scores = cluster_scores(&clusters, &within.columns, &residuals);
    let g = scores.len();
    if g < 2 {
        return Err(Error::Numerical(format!(
            "clustered covariance needs at least 2 clusters, found {g}"
        )));
    }
    let mut meat = DenseMatrix::zeros(k, k);
    for s in &scores {
        meat.add_outer(s, T::one());
    }
    let mut cov = bread.matmul(&meat).matmul(&bread);
    let gf = T::of_usize(g);
    let nf = T::of_usize(n);
    let kf = T::of_usize(k);
    cov.scale(gf / (gf - T::one()) * (nf - T::one()) / (nf - kf));
    symmetrize(&mut cov);

    Ok(FeFit {
        names: design.names.clone(),
        coefficients: beta,
        covariance: cov,
        bread,
        n_rows: n,
        n_groups: within.n_groups,
        n_clusters: g,
        singletons_dropped: within.singletons_dropped,
        rss,
        r_squared_within: r2,
        within,
        residuals,
        clusters,
    })
}

/// Per-cluster score sums `Σ_{i∈g} x̃_i û_i`, in first-appearance order.
pub fn cluster_scores<T: Scalar>(clusters: &[u64], columns: &[Vec<T>], residuals: &[T]) -> Vec<Vec<T>> {
    let k = columns.len();
    let mut index: HashMap<u64, usize> = HashMap::new();
    let mut scores: Vec<Vec<T>> = Vec::new();
    for (i, &c) in clusters.iter().enumerate() {
        let next = scores.len();
        let slot = *index.entry(c).or_insert(next);
        if slot == next {
            scores.push(vec![T::zero(); k]);
        }
        let u = residuals[i];
        for j in 0..k {
            scores[slot][j] += columns[j][i] * u;
        }
    }
    scores
}

fn symmetrize<T: Scalar>(m: &mut DenseMatrix<T>) {
    let k = m.rows();
    for a in 0..k {
        for b in (a + 1)..k {
            let v = (m[(a, b)] + m[(b, a)]) / T::of(2.0);
            m[(a, b)] = v;
            m[(b, a)] = v;
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_column_demeans_to_zero() {
        let w = within_transform(&[1, 1, 2, 2, 2], &[1.0, 3.0, 5.0, 6.0, 7.0], &[vec![4.0; 5]]);
        assert!(w.columns[0].iter().all(|&v| v == 0.0));
        assert_eq!(w.y[..2], [-1.0, 1.0]);
    }

    #[test]
    fn singleton_groups_are_dropped() {
        let w = within_transform(&[1, 2, 2, 3], &[1.0, 2.0, 4.0, 9.0], &[vec![0.0, 1.0, 2.0, 3.0]]);
        assert_eq!(w.singletons_dropped, 2);
        assert_eq!(w.rows, vec![1, 2]);
        assert_eq!(w.n_groups, 1);
        assert_eq!(w.group_means[&2].0, 3.0);
    }

    #[test]
    fn demeaned_sums_vanish_per_group() {
        let groups: Vec<u64> = (0..60).map(|i| (i * 7 % 11) as u64).collect();
        let y: Vec<f64> = (0..60).map(|i| ((i * i) % 13) as f64 * 0.37).collect();
        let x: Vec<f64> = (0..60).map(|i| (i as f64).sin()).collect();
        let w = within_transform(&groups, &y, &[x]);
        let mut sums: HashMap<u64, (f64, f64)> = HashMap::new();
        for (pos, &i) in w.rows.iter().enumerate() {
            let e = sums.entry(groups[i]).or_default();
            e.0 += w.y[pos];
            e.1 += w.columns[0][pos];
        }
        for (a, b) in sums.values() {
            assert!(a.abs() < 1e-9 && b.abs() < 1e-9);
        }
    }

    #[test]
    fn rank_error_names_column() {
        let mut d = FeDesign::new(vec![1.0, 2.0, 3.0, 5.0], vec![1, 1, 2, 2], vec![1, 1, 2, 2]);
        d.push("post", vec![0.0, 1.0, 0.0, 1.0]);
        d.push("dd", vec![0.0; 4]);
        match fit_fe_ols(&d).unwrap_err() {
            Error::RankDeficient { columns } => assert_eq!(columns, vec!["dd".to_string()]),
            e => panic!("unexpected {e}"),
        }
    }

    #[test]
    fn single_cluster_is_an_error() {
        let mut d = FeDesign::new(vec![1.0, 2.0, 3.0, 5.0], vec![1, 1, 2, 2], vec![9; 4]);
        d.push("post", vec![0.0, 1.0, 0.0, 1.0]);
        assert!(fit_fe_ols(&d).is_err());
    }
}
