//! Direct generators for stacked panels and matching candidates.
//!
//! These skip the register entirely and are what the Monte Carlo checks use:
//! a replication of 50 000 pairs costs milliseconds instead of seconds.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::matching::{Candidate, CONTROL_OFFSET, WINDOW_END, WINDOW_START};
use crate::registry::{DiseaseGroup, Outcome, N_DISEASE_GROUPS, N_OUTCOMES};
use crate::stacking::{Panel, PairInfo, StackedRow};

/// Pair-level DGP on the IHS scale:
///
/// `y = a_pair + u_unit + trend·year + β1·post
///      + treated·post·(δ + γ(s)·m) + treated·[t = −2]·pre_trend + ε`
///
/// with `m` a per-(group, shock year) innovation level and `γ(s)` scaled by
/// `break_factor` from `break_year` on.
#[derive(Debug, Clone, PartialEq)]
pub struct PanelDgp {
    pub seed: u64,
    pub n_pairs: usize,
    /// Groups are drawn uniformly from `1..=n_groups`.
    pub n_groups: u8,
    pub first_shock_year: i32,
    pub last_shock_year: i32,
    pub outcome: Outcome,
    pub post_effect: f64,
    pub delta: f64,
    pub gamma: f64,
    pub m_mean: f64,
    pub m_sd: f64,
    /// Common growth of `m` from the first to the last shock year.
    pub m_growth: f64,
    pub pre_trend: f64,
    pub break_year: Option<i32>,
    pub break_factor: f64,
    /// SD of the component shared by the two members of a pair.
    pub pair_sd: f64,
    pub unit_sd: f64,
    pub noise_sd: f64,
    pub trend: f64,
}

impl Default for PanelDgp {
    fn default() -> Self {
        Self {
            seed: 0,
            n_pairs: 10_000,
            n_groups: N_DISEASE_GROUPS,
            first_shock_year: 1995,
            last_shock_year: 2015,
            outcome: Outcome::FamilyIncome,
            post_effect: 0.02,
            delta: -0.315,
            gamma: 0.0,
            m_mean: 0.3,
            m_sd: 0.075,
            m_growth: 0.0,
            pre_trend: 0.0,
            break_year: None,
            break_factor: 2.0,
            pair_sd: 0.5,
            unit_sd: 0.25,
            noise_sd: 0.3,
            trend: 0.01,
        }
    }
}

impl PanelDgp {
    /// Innovation level of cohort `(g, s)`: a group level plus a group
    /// trend over shock years, scaled to `m_sd` in expectation.
    pub fn m_of(&self, g: DiseaseGroup, s: i32) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ 0x6d5f_6c65_7665_6c00);
        rng.set_stream(g.id() as u64);
        let n = Normal::new(0.0, 1.0).expect("unit normal");
        let (a, b): (f64, f64) = (n.sample(&mut rng), n.sample(&mut rng));
        let span = (self.last_shock_year - self.first_shock_year).max(1) as f64;
        let tau = 2.0 * (s - self.first_shock_year) as f64 / span - 1.0;
        // Var(a + b·τ) = 1 + 1/3 for τ uniform on [−1, 1]
        self.m_mean + self.m_growth * (tau + 1.0) / 2.0 + self.m_sd * (a + b * tau) / (4.0f64 / 3.0).sqrt()
    }

    fn pair_stream(&self, i: usize) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(i as u64 + 1);
        rng
    }

    fn draw_cohort(&self, rng: &mut ChaCha8Rng) -> Result<(DiseaseGroup, i32)> {
        let g = DiseaseGroup::new(rng.random_range(1..=self.n_groups))?;
        let s = rng.random_range(self.first_shock_year..=self.last_shock_year);
        Ok((g, s))
    }

    /// Disease group and shock year of pair `i`, without drawing outcomes.
    pub fn cohort_of(&self, i: usize) -> Result<(DiseaseGroup, i32)> {
        self.draw_cohort(&mut self.pair_stream(i))
    }

    /// Population SD of `m` over the pairs this configuration will draw
    /// (equal to the SD over panel rows, every pair having ten rows).
    pub fn realized_m_sd(&self) -> Result<f64> {
        let m: Vec<f64> = (0..self.n_pairs)
            .into_par_iter()
            .map(|i| self.cohort_of(i).map(|(g, s)| self.m_of(g, s)))
            .collect::<Result<_>>()?;
        let n = m.len() as f64;
        let mean = m.iter().sum::<f64>() / n;
        Ok((m.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n).sqrt())
    }

    /// Sets `gamma` so that `gamma × SD(m) × 100` equals `percent` on the
    /// realized sample.
    pub fn with_effect_percent(mut self, percent: f64) -> Result<Self> {
        let sd = self.realized_m_sd()?;
        if sd <= 0.0 {
            return Err(Error::Validation("innovation level does not vary across pairs".into()));
        }
        self.gamma = percent / (100.0 * sd);
        Ok(self)
    }

    pub fn gamma_at(&self, s: i32) -> f64 {
        match self.break_year {
            Some(y) if s >= y => self.gamma * self.break_factor,
            _ => self.gamma,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_groups == 0 || self.n_groups > N_DISEASE_GROUPS {
            return Err(Error::Validation(format!("n_groups must lie in 1..={N_DISEASE_GROUPS}")));
        }
        if self.last_shock_year < self.first_shock_year {
            return Err(Error::Validation("empty shock-year range".into()));
        }
        if self.n_pairs == 0 {
            return Err(Error::Validation("n_pairs must be positive".into()));
        }
        Ok(())
    }
}

/// Draws a stacked panel; pair `i` gets experimental ids `2i+1` (treated)
/// and `2i+2` (control).
pub fn simulate_panel(dgp: &PanelDgp) -> Result<Panel> {
    dgp.validate()?;
    let per_pair: Vec<(PairInfo, Vec<StackedRow>)> = (0..dgp.n_pairs)
        .into_par_iter()
        .map(|i| pair(dgp, i))
        .collect::<Result<_>>()?;
    let mut panel = Panel {
        pairs: Vec::with_capacity(dgp.n_pairs),
        rows: Vec::with_capacity(dgp.n_pairs * 10),
    };
    for (info, rows) in per_pair {
        panel.pairs.push(info);
        panel.rows.extend(rows);
    }
    Ok(panel)
}

fn pair(dgp: &PanelDgp, i: usize) -> Result<(PairInfo, Vec<StackedRow>)> {
    let mut rng = dgp.pair_stream(i);
    let n = Normal::new(0.0, 1.0).expect("unit normal");
    let (g, s) = dgp.draw_cohort(&mut rng)?;
    let m = dgp.m_of(g, s);
    let info = PairInfo {
        treated_person_id: 2 * i as u64 + 1,
        control_person_id: 2 * i as u64 + 2,
        disease_group: g,
        shock_year: s,
        m_nme: m,
        m_patent: m,
        gender: rng.random_range(0..=1),
        married: rng.random::<f64>() < 0.6,
        age_at_shock: rng.random_range(40..=70),
        schooling_years: rng.random_range(9..=16),
        liquidity: rng.random::<f64>() < 0.2,
        stay_days: Some(rng.random_range(1..=20)),
    };
    let shared = dgp.pair_sd * n.sample(&mut rng);
    let effect = dgp.delta + dgp.gamma_at(s) * m;
    let mut rows = Vec::with_capacity(10);
    for treated in [true, false] {
        let unit = shared + dgp.unit_sd * n.sample(&mut rng);
        let eid = 2 * i as u64 + if treated { 1 } else { 2 };
        for t in WINDOW_START..=WINDOW_END {
            let mut y = 12.0 + unit + dgp.trend * (s + t - 2000) as f64 + dgp.noise_sd * n.sample(&mut rng);
            if t >= 0 {
                y += dgp.post_effect;
                if treated {
                    y += effect;
                }
            }
            if treated && t == -2 {
                y += dgp.pre_trend;
            }
            let mut outcomes = [None; N_OUTCOMES];
            outcomes[dgp.outcome.index()] = Some(y);
            rows.push(StackedRow {
                experimental_id: eid,
                person_id: if treated { info.treated_person_id } else { info.control_person_id },
                pair: i as u32,
                event_year: t,
                treated,
                outcomes,
            });
        }
    }
    Ok((info, rows))
}

/// Treated candidates and a control pool where treated units are shifted
/// by `shift` SDs on every matching covariate. Strata are exact on group,
/// gender and shock year; each stratum's pool holds `pool_ratio` times as
/// many controls, shocked two years later.
pub fn confounded_candidates(
    seed: u64,
    n_treated: usize,
    pool_ratio: usize,
    shift: f64,
) -> (Vec<Candidate>, Vec<Candidate>) {
    const STRATUM: usize = 50;
    let n_strata = n_treated.div_ceil(STRATUM);
    let (treated, pool): (Vec<Vec<Candidate>>, Vec<Vec<Candidate>>) = (0..n_strata)
        .into_par_iter()
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(k as u64 + 1);
            let n = Normal::new(0.0, 1.0).expect("unit normal");
            let g = DiseaseGroup::new((k % N_DISEASE_GROUPS as usize) as u8 + 1).expect("valid group");
            let gender = (k / N_DISEASE_GROUPS as usize % 2) as u8;
            let s = 2000 + (k / (2 * N_DISEASE_GROUPS as usize)) as i32 % 10;
            let size = STRATUM.min(n_treated - k * STRATUM);
            let draw = |id: u64, s: i32, mu: f64, rng: &mut ChaCha8Rng| Candidate {
                person_id: id,
                disease_group: g,
                gender,
                shock_year: s,
                covariates: [
                    1955.0 + 8.0 * (mu + n.sample(rng)),
                    12.0 + 2.0 * (mu + n.sample(rng)),
                    12.3 + 0.6 * (mu + n.sample(rng)),
                ],
                admissions: vec![s],
                last_observed_year: Some(s + WINDOW_END + CONTROL_OFFSET),
            };
            let base = (k * STRATUM * (1 + pool_ratio)) as u64;
            let t: Vec<Candidate> = (0..size).map(|j| draw(base + j as u64 + 1, s, shift, &mut rng)).collect();
            let p: Vec<Candidate> = (0..size * pool_ratio)
                .map(|j| draw(base + (size + j) as u64 + 1, s + CONTROL_OFFSET, 0.0, &mut rng))
                .collect();
            (t, p)
        })
        .unzip();
    (
        treated.into_iter().flatten().collect(),
        pool.into_iter().flatten().collect(),
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimator::estimate_dd;

    #[test]
    fn panel_shape_and_ids() {
        let p = simulate_panel(&PanelDgp { n_pairs: 100, ..PanelDgp::default() }).unwrap();
        assert_eq!(p.pairs.len(), 100);
        assert_eq!(p.rows.len(), 1000);
        assert_eq!(p.rows[0].experimental_id, 1);
        assert!(p.rows[0].treated);
        assert_eq!(p.rows[5].experimental_id, 2);
        assert!(!p.rows[5].treated);
    }

    #[test]
    fn noiseless_panel_recovers_delta_exactly() {
        let dgp = PanelDgp {
            n_pairs: 200,
            pair_sd: 0.0,
            unit_sd: 0.0,
            noise_sd: 0.0,
            trend: 0.0,
            ..PanelDgp::default()
        };
        let r = estimate_dd(&simulate_panel(&dgp).unwrap(), Outcome::FamilyIncome, false).unwrap();
        assert!((r.estimate("dd").unwrap() + 0.315).abs() < 1e-10);
    }

    #[test]
    fn cohort_level_is_constant_within_cohort() {
        let dgp = PanelDgp::default();
        let g = DiseaseGroup::new(4).unwrap();
        assert_eq!(dgp.m_of(g, 2001), dgp.m_of(g, 2001));
        assert_ne!(dgp.m_of(g, 2001), dgp.m_of(g, 2002));
    }

    #[test]
    fn calibration_hits_the_target_percent() {
        let dgp = PanelDgp { n_pairs: 2000, ..PanelDgp::default() }.with_effect_percent(12.0).unwrap();
        let p = simulate_panel(&dgp).unwrap();
        let sd = crate::estimator::sd_m(&p, Outcome::FamilyIncome, crate::innovation::Measure::Nme).unwrap();
        assert!((dgp.gamma * sd * 100.0 - 12.0).abs() < 1e-9);
    }

    #[test]
    fn confounded_fixture_sizes() {
        let (t, p) = confounded_candidates(1, 120, 3, 0.5);
        assert_eq!(t.len(), 120);
        assert_eq!(p.len(), 360);
        let mut ids: Vec<u64> = t.iter().chain(&p).map(|c| c.person_id).collect();
        ids.sort_unstable();
        ids.dedup();
        assert_eq!(ids.len(), 480);
    }
}
