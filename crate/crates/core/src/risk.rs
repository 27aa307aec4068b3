//! Disclosure-risk metrics.
//!
//! * absolute risk: the posterior probability at the true race, `Pr(Y_J | D*, A)`;
//! * relative risk: posterior over name-only prior at the true race, or its
//!   inverse, whichever is ≥ 1;
//! * per-race geometric means of relative risk;
//! * the `exp(ε)` factor by which a differentially private release can move
//!   a prior under Bayesian updating.
//!
//! The `exp(ε)` factor constrains only a posterior that accounts for the
//! noise mechanism. BISG treats the release as exact, so its relative risk
//! carries no such bound. [`mechanism_aware_posterior`] computes the
//! mechanism-aware posterior by brute force on tiny instances so the two can
//! be compared.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::bisg::{error_rate, NameParts, PosteriorRecord};
use crate::dp_das::{GeometricNoise, PrivacyBudget};
use crate::error::{Error, Result};
use crate::par::Execution;
use crate::race::Race;
use crate::rng;

pub fn absolute_risk(rec: &PosteriorRecord) -> Result<f64> {
    let truth = rec
        .true_race
        .ok_or_else(|| Error::Contract(format!("record {} has no true race", rec.person_id)))?;
    Ok(rec.posterior[truth.index()])
}

/// Individual relative risk. `Infinite` when the prior or posterior at the
/// true race is zero.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RelativeRisk {
    Finite(f64),
    Infinite,
}

impl RelativeRisk {
    pub fn finite(self) -> Option<f64> {
        match self {
            RelativeRisk::Finite(x) => Some(x),
            RelativeRisk::Infinite => None,
        }
    }
}

pub fn relative_risk(rec: &PosteriorRecord) -> Result<RelativeRisk> {
    let truth = rec
        .true_race
        .ok_or_else(|| Error::Contract(format!("record {} has no true race", rec.person_id)))?;
    let prior = rec.prior[truth.index()];
    let post = rec.posterior[truth.index()];
    if prior <= 0.0 || post <= 0.0 {
        return Ok(RelativeRisk::Infinite);
    }
    Ok(RelativeRisk::Finite((post / prior).max(prior / post)))
}

/// `exp(ε)`. Accepts `ε = 0` as a boundary case.
pub fn dp_bound(epsilon: f64) -> f64 {
    epsilon.exp()
}

pub fn geometric_mean(xs: &[f64]) -> Option<f64> {
    if xs.is_empty() {
        return None;
    }
    Some((xs.iter().map(|x| x.ln()).sum::<f64>() / xs.len() as f64).exp())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GroupRisk {
    pub n: usize,
    pub n_infinite: usize,
    /// Geometric mean over the finite members.
    pub geometric_mean: Option<f64>,
    /// Some members carried the infinite-risk sentinel.
    pub flagged: bool,
}

/// Geometric mean of relative risk per true race. Races with no records are
/// absent from the map.
pub fn mean_relative_risk_by_race(recs: &[PosteriorRecord]) -> Result<BTreeMap<Race, GroupRisk>> {
    let mut groups: BTreeMap<Race, (Vec<f64>, usize)> = BTreeMap::new();
    for rec in recs {
        let truth = rec
            .true_race
            .ok_or_else(|| Error::Contract(format!("record {} has no true race", rec.person_id)))?;
        let g = groups.entry(truth).or_default();
        match relative_risk(rec)? {
            RelativeRisk::Finite(x) => g.0.push(x),
            RelativeRisk::Infinite => g.1 += 1,
        }
    }
    Ok(groups
        .into_iter()
        .map(|(race, (finite, n_infinite))| {
            (
                race,
                GroupRisk {
                    n: finite.len() + n_infinite,
                    n_infinite,
                    geometric_mean: geometric_mean(&finite),
                    flagged: n_infinite > 0,
                },
            )
        })
        .collect())
}

// ---------------------------------------------------------------------------
// Report

/// Posteriors for one name-part method under the two data conditions.
#[derive(Debug, Clone, Default)]
pub struct MethodPosteriors {
    pub method: Option<NameParts>,
    pub without_data: Option<Vec<PosteriorRecord>>,
    pub with_data: Option<Vec<PosteriorRecord>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskRow {
    pub method: NameParts,
    pub label: String,
    pub error_rate_without_data: f64,
    pub error_rate_with_data: f64,
    /// Maximum over individuals of the finite relative risks.
    pub max_individual_relative_risk: f64,
    pub n_records: usize,
    pub n_infinite_risk: usize,
    pub n_flagged_names: usize,
    pub mean_absolute_risk_without_data: f64,
    pub mean_absolute_risk_with_data: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BoundCheck {
    pub epsilon_total: f64,
    pub released: ReleasedTables,
    pub max_ratio: f64,
    pub bound: f64,
    pub holds: bool,
    pub instances: usize,
    pub outputs_evaluated: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RiskReport {
    pub data_condition: String,
    pub epsilon: f64,
    pub dp_bound: f64,
    pub rows: Vec<RiskRow>,
    /// Per-race geometric-mean relative risk for `per_race_method`.
    pub per_race_method: NameParts,
    pub per_race_relative_risk: BTreeMap<Race, GroupRisk>,
    /// Whether some as-is BISG relative risk exceeds `dp_bound`. Not a DP
    /// violation: BISG ignores the noise mechanism.
    pub as_is_exceeds_dp_bound: bool,
    pub mechanism_bound_check: Option<BoundCheck>,
}

pub fn build_risk_report(
    inputs: &[MethodPosteriors],
    epsilon: f64,
    data_condition: &str,
    mechanism_bound_check: Option<BoundCheck>,
) -> Result<RiskReport> {
    if inputs.is_empty() {
        return Err(Error::MissingCondition("no name-part methods given".into()));
    }
    let mut rows = Vec::new();
    let mut richest: Option<(NameParts, &[PosteriorRecord])> = None;
    for m in inputs {
        let method = m
            .method
            .ok_or_else(|| Error::MissingCondition("a method entry has no name parts".into()))?;
        let without = m.without_data.as_deref().ok_or_else(|| {
            Error::MissingCondition(format!("without census data for method `{method}`"))
        })?;
        let with = m.with_data.as_deref().ok_or_else(|| {
            Error::MissingCondition(format!("with {data_condition} data for method `{method}`"))
        })?;
        let mut max_rr: f64 = 1.0;
        let mut n_infinite = 0;
        for rec in with {
            match relative_risk(rec)? {
                RelativeRisk::Finite(x) => max_rr = max_rr.max(x),
                RelativeRisk::Infinite => n_infinite += 1,
            }
        }
        rows.push(RiskRow {
            method,
            label: method.label().into(),
            error_rate_without_data: error_rate(without)?,
            error_rate_with_data: error_rate(with)?,
            max_individual_relative_risk: max_rr,
            n_records: with.len(),
            n_infinite_risk: n_infinite,
            n_flagged_names: with.iter().filter(|r| r.flagged).count(),
            mean_absolute_risk_without_data: mean_absolute(without)?,
            mean_absolute_risk_with_data: mean_absolute(with)?,
        });
        if richest.is_none_or(|(m, _)| method > m) {
            richest = Some((method, with));
        }
    }
    rows.sort_by_key(|r| r.method);
    let (per_race_method, recs) = richest.expect("inputs non-empty");
    let bound = dp_bound(epsilon);
    Ok(RiskReport {
        data_condition: data_condition.into(),
        epsilon,
        dp_bound: bound,
        as_is_exceeds_dp_bound: rows.iter().any(|r| r.max_individual_relative_risk > bound),
        per_race_method,
        per_race_relative_risk: mean_relative_risk_by_race(recs)?,
        rows,
        mechanism_bound_check,
    })
}

fn mean_absolute(recs: &[PosteriorRecord]) -> Result<f64> {
    let mut s = 0.0;
    for r in recs {
        s += absolute_risk(r)?;
    }
    Ok(s / recs.len().max(1) as f64)
}

impl RiskReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Four-column text table: method, error without data, error with data,
    /// maximum individual relative risk.
    pub fn render_table(&self) -> String {
        let headers = [
            "BISG method".to_string(),
            "Error rate without census data".to_string(),
            format!("Error rate with {} data", self.data_condition),
            "Maximum individual relative disclosure risk".to_string(),
        ];
        let body: Vec<[String; 4]> = self
            .rows
            .iter()
            .map(|r| {
                [
                    r.label.clone(),
                    format!("{:.1}%", 100.0 * r.error_rate_without_data),
                    format!("{:.1}%", 100.0 * r.error_rate_with_data),
                    format!("{:.1}", r.max_individual_relative_risk),
                ]
            })
            .collect();
        let mut widths = headers.clone().map(|h| h.len());
        for row in &body {
            for (w, c) in widths.iter_mut().zip(row) {
                *w = (*w).max(c.len());
            }
        }
        let mut out = String::new();
        let line = |out: &mut String, cells: &[String; 4]| {
            let _ = writeln!(
                out,
                "{:<w0$} | {:>w1$} | {:>w2$} | {:>w3$}",
                cells[0],
                cells[1],
                cells[2],
                cells[3],
                w0 = widths[0],
                w1 = widths[1],
                w2 = widths[2],
                w3 = widths[3]
            );
        };
        line(&mut out, &headers);
        let _ = writeln!(
            out,
            "{}",
            widths.iter().map(|w| "-".repeat(*w)).collect::<Vec<_>>().join("-+-")
        );
        for row in &body {
            line(&mut out, row);
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "epsilon = {}; exp(epsilon) = {:.6e}",
            self.epsilon, self.dp_bound
        );
        let _ = write!(out, "Geometric-mean relative risk by race ({}):", self.per_race_method.label());
        for (race, g) in &self.per_race_relative_risk {
            match g.geometric_mean {
                Some(m) => {
                    let _ = write!(out, " {race} {m:.2}");
                }
                None => {
                    let _ = write!(out, " {race} n/a");
                }
            }
            if g.flagged {
                let _ = write!(out, " ({} infinite)", g.n_infinite);
            }
        }
        let _ = writeln!(out);
        let _ = writeln!(
            out,
            "BISG posteriors treat the release as exact; the exp(epsilon) factor does not bound them."
        );
        if let Some(c) = &self.mechanism_bound_check {
            let _ = writeln!(
                out,
                "Mechanism-aware posterior ({:?} table(s), {} tiny instances): max ratio {:.6} vs bound {:.6} -> {}",
                c.released,
                c.instances,
                c.max_ratio,
                c.bound,
                if c.holds { "holds" } else { "VIOLATED" }
            );
        }
        out
    }
}

/// Risk summary of a single posterior file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PosteriorSummary {
    pub n_records: usize,
    pub error_rate: f64,
    pub mean_absolute_risk: f64,
    pub max_individual_relative_risk: Option<f64>,
    pub n_infinite_risk: usize,
    pub per_race_relative_risk: BTreeMap<Race, GroupRisk>,
}

pub fn summarize_posteriors(recs: &[PosteriorRecord]) -> Result<PosteriorSummary> {
    let error_rate = error_rate(recs)?;
    let mut max_rr: Option<f64> = None;
    let mut n_infinite = 0;
    for r in recs {
        match relative_risk(r)? {
            RelativeRisk::Finite(x) => max_rr = Some(max_rr.map_or(x, |m| m.max(x))),
            RelativeRisk::Infinite => n_infinite += 1,
        }
    }
    Ok(PosteriorSummary {
        n_records: recs.len(),
        error_rate,
        mean_absolute_risk: mean_absolute(recs)?,
        max_individual_relative_risk: max_rr,
        n_infinite_risk: n_infinite,
        per_race_relative_risk: mean_relative_risk_by_race(recs)?,
    })
}

// ---------------------------------------------------------------------------
// Mechanism-aware posterior on tiny instances

/// Which noised tables the attacker conditions on.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ReleasedTables {
    Race,
    Vap,
    Both,
}

/// A tiny world: `n_blocks × n_races` cells, each holding `(race count, vap
/// count)` for everyone except the target, with `vap ≤ race ≤ max_count`.
/// The target is an adult in `target_block` whose race is unknown.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TinyInstance {
    pub n_blocks: usize,
    pub n_races: usize,
    pub max_count: u64,
    pub target_block: usize,
}

pub const MAX_TINY_TABLES: usize = 250_000;

impl TinyInstance {
    pub fn validate(&self) -> Result<()> {
        if !(1..=3).contains(&self.n_blocks) || !(1..=3).contains(&self.n_races) {
            return Err(Error::Resource(
                "tiny instances allow at most 3 blocks and 3 races".into(),
            ));
        }
        if self.max_count > 5 {
            return Err(Error::Resource("tiny instances allow counts up to 5".into()));
        }
        if self.target_block >= self.n_blocks {
            return Err(Error::Contract("target block outside the instance".into()));
        }
        if self.n_tables() > MAX_TINY_TABLES {
            return Err(Error::Resource(format!(
                "{} confidential tables exceed the enumeration limit",
                self.n_tables()
            )));
        }
        Ok(())
    }

    fn n_cells(&self) -> usize {
        self.n_blocks * self.n_races
    }

    fn cell_states(&self) -> Vec<(i64, i64)> {
        let m = self.max_count as i64;
        (0..=m)
            .flat_map(|n| (0..=n).map(move |v| (n, v)))
            .collect()
    }

    fn n_tables(&self) -> usize {
        let s = self.cell_states().len();
        s.checked_pow(self.n_cells() as u32).unwrap_or(usize::MAX)
    }

    fn cell(&self, block: usize, race: usize) -> usize {
        block * self.n_races + race
    }
}

/// Noisy outputs for every cell, `[block * n_races + race]`. Tables not in
/// the conditioning set are ignored.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TinyOutputs {
    pub race: Vec<i64>,
    pub vap: Vec<i64>,
}

/// Exact posterior of the target's race given the noisy outputs, with a
/// uniform prior over the target's race and over the confidential tables of
/// everyone else. Every confidential table is enumerated.
pub fn mechanism_aware_posterior(
    inst: &TinyInstance,
    budget: &PrivacyBudget,
    released: ReleasedTables,
    outputs: &TinyOutputs,
) -> Result<Vec<f64>> {
    inst.validate()?;
    budget.validate()?;
    let race_noise = GeometricNoise::new(budget.race_epsilon())?;
    let vap_noise = GeometricNoise::new(budget.vap_epsilon())?;
    let use_race = released != ReleasedTables::Vap;
    let use_vap = released != ReleasedTables::Race;
    let states = inst.cell_states();
    let n_cells = inst.n_cells();
    if outputs.race.len() != n_cells || outputs.vap.len() != n_cells {
        return Err(Error::Contract("outputs must cover every cell".into()));
    }

    // Per-cell log-likelihood of each cell state, without and with the
    // target added; a table's likelihood is a sum of these.
    let cell_ll = |c: usize, extra: i64| -> Vec<f64> {
        states
            .iter()
            .map(|&(n, v)| {
                let mut ll = 0.0;
                if use_race {
                    ll += race_noise.log_pmf(outputs.race[c] - n - extra);
                }
                if use_vap {
                    ll += vap_noise.log_pmf(outputs.vap[c] - v - extra);
                }
                ll
            })
            .collect()
    };
    let without: Vec<Vec<f64>> = (0..n_cells).map(|c| cell_ll(c, 0)).collect();
    let with: Vec<Vec<f64>> = (0..n_cells).map(|c| cell_ll(c, 1)).collect();
    let targets: Vec<usize> = (0..inst.n_races).map(|y| inst.cell(inst.target_block, y)).collect();

    let mut log_lik: Vec<Vec<f64>> = vec![Vec::with_capacity(inst.n_tables()); inst.n_races];
    let mut digits = vec![0usize; n_cells];
    loop {
        let base: f64 = digits.iter().enumerate().map(|(c, &d)| without[c][d]).sum();
        for (acc, &t) in log_lik.iter_mut().zip(&targets) {
            acc.push(base - without[t][digits[t]] + with[t][digits[t]]);
        }
        // odometer
        let mut i = 0;
        while i < n_cells {
            digits[i] += 1;
            if digits[i] < states.len() {
                break;
            }
            digits[i] = 0;
            i += 1;
        }
        if i == n_cells {
            break;
        }
    }
    let per_race: Vec<f64> = log_lik.iter().map(|v| log_sum_exp(v)).collect();
    let total = log_sum_exp(&per_race);
    Ok(per_race.iter().map(|l| (l - total).exp()).collect())
}

fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Largest `max(post/prior, prior/post)` of the mechanism-aware posterior over
/// every race and every output on a grid. The target block's released cells
/// range over `-1..=max_count + 2`, which reaches the region where every
/// likelihood ratio has saturated; other blocks' outputs are fixed to one
/// seeded draw of the mechanism.
pub fn mechanism_bound_check(
    instances: &[TinyInstance],
    budget: &PrivacyBudget,
    released: ReleasedTables,
    seed: u64,
    exec: Execution,
) -> Result<BoundCheck> {
    budget.validate()?;
    let mut max_ratio: f64 = 1.0;
    let mut outputs_evaluated = 0;
    for (k, inst) in instances.iter().enumerate() {
        inst.validate()?;
        let base = seeded_outputs(inst, budget, seed, k as u64)?;
        let grid = target_grid(inst, released, &base);
        outputs_evaluated += grid.len();
        let prior = 1.0 / inst.n_races as f64;
        let ratios = exec.map(&grid, |out| -> Result<f64> {
            let post = mechanism_aware_posterior(inst, budget, released, out)?;
            Ok(post
                .iter()
                .map(|p| (p / prior).max(prior / p))
                .fold(1.0, f64::max))
        });
        for r in ratios {
            max_ratio = max_ratio.max(r?);
        }
    }
    let bound = dp_bound(budget.epsilon_total);
    Ok(BoundCheck {
        epsilon_total: budget.epsilon_total,
        released,
        max_ratio,
        bound,
        holds: max_ratio <= bound * (1.0 + 1e-6),
        instances: instances.len(),
        outputs_evaluated,
    })
}

fn seeded_outputs(inst: &TinyInstance, budget: &PrivacyBudget, seed: u64, index: u64) -> Result<TinyOutputs> {
    use rand::Rng;
    let mut rng = rng::stream(seed, "risk/tiny", index);
    let race_noise = GeometricNoise::new(budget.race_epsilon())?;
    let vap_noise = GeometricNoise::new(budget.vap_epsilon())?;
    let mut out = TinyOutputs {
        race: Vec::new(),
        vap: Vec::new(),
    };
    for _ in 0..inst.n_cells() {
        let n = rng.random_range(0..=inst.max_count) as i64;
        let v = rng.random_range(0..=n as u64) as i64;
        out.race.push(n + race_noise.sample(&mut rng));
        out.vap.push(v + vap_noise.sample(&mut rng));
    }
    Ok(out)
}

fn target_grid(inst: &TinyInstance, released: ReleasedTables, base: &TinyOutputs) -> Vec<TinyOutputs> {
    let lo = -1i64;
    let hi = inst.max_count as i64 + 2;
    let mut slots: Vec<(bool, usize)> = Vec::new();
    for r in 0..inst.n_races {
        let c = inst.cell(inst.target_block, r);
        if released != ReleasedTables::Vap {
            slots.push((true, c));
        }
        if released != ReleasedTables::Race {
            slots.push((false, c));
        }
    }
    let width = (hi - lo + 1) as usize;
    let total = width.pow(slots.len() as u32);
    (0..total)
        .map(|mut code| {
            let mut out = base.clone();
            for &(is_race, c) in &slots {
                let value = lo + (code % width) as i64;
                code /= width;
                if is_race {
                    out.race[c] = value;
                } else {
                    out.vap[c] = value;
                }
            }
            out
        })
        .collect()
}

/// The tiny-instance family used by reports and acceptance checks.
pub fn standard_tiny_instances() -> Vec<TinyInstance> {
    [(1, 2, 5), (1, 3, 5), (2, 2, 3), (2, 3, 2), (3, 2, 2), (3, 3, 1)]
        .into_iter()
        .map(|(n_blocks, n_races, max_count)| TinyInstance {
            n_blocks,
            n_races,
            max_count,
            target_block: n_blocks - 1,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(prior: [f64; 5], posterior: [f64; 5], truth: Race) -> PosteriorRecord {
        PosteriorRecord {
            person_id: 1,
            block_id: 0,
            prior,
            posterior,
            map_race: crate::bisg::classify_map(&posterior),
            true_race: Some(truth),
            flagged: false,
        }
    }

    #[test]
    fn absolute_risk_examples() {
        let point = [1.0, 0.0, 0.0, 0.0, 0.0];
        assert_eq!(absolute_risk(&rec([0.2; 5], point, Race::White)).unwrap(), 1.0);
        assert_eq!(absolute_risk(&rec([0.2; 5], [0.2; 5], Race::Asian)).unwrap(), 0.2);
        let post = crate::bisg::geography_update(&[0.5, 0.5], &[90.0, 10.0], &[100.0, 100.0], 2.0, 0.0)
            .unwrap();
        let p = [post[0], post[1], 0.0, 0.0, 0.0];
        assert!((absolute_risk(&rec([0.5, 0.5, 0.0, 0.0, 0.0], p, Race::White)).unwrap() - 0.9).abs() < 1e-15);
        let mut r = rec([0.2; 5], [0.2; 5], Race::White);
        r.true_race = None;
        assert!(matches!(absolute_risk(&r), Err(Error::Contract(_))));
    }

    #[test]
    fn relative_risk_examples() {
        let r = rec([0.1, 0.9, 0.0, 0.0, 0.0], [0.9, 0.1, 0.0, 0.0, 0.0], Race::White);
        assert!((relative_risk(&r).unwrap().finite().unwrap() - 9.0).abs() < 1e-12);
        let r = rec([0.1, 0.9, 0.0, 0.0, 0.0], [0.9, 0.1, 0.0, 0.0, 0.0], Race::Black);
        assert!((relative_risk(&r).unwrap().finite().unwrap() - 9.0).abs() < 1e-12);
        assert_eq!(
            relative_risk(&rec([0.2; 5], [0.2; 5], Race::Other)).unwrap(),
            RelativeRisk::Finite(1.0)
        );
        let r = rec([0.0, 1.0, 0.0, 0.0, 0.0], [0.5, 0.5, 0.0, 0.0, 0.0], Race::White);
        assert_eq!(relative_risk(&r).unwrap(), RelativeRisk::Infinite);
    }

    #[test]
    fn geometric_means() {
        assert!((geometric_mean(&[2.0, 8.0]).unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(geometric_mean(&[1.0, 1.0, 1.0]), Some(1.0));
        assert_eq!(geometric_mean(&[]), None);

        let recs = vec![
            rec([0.5, 0.5, 0.0, 0.0, 0.0], [1.0, 0.0, 0.0, 0.0, 0.0], Race::White),
            rec([0.1, 0.9, 0.0, 0.0, 0.0], [0.8, 0.2, 0.0, 0.0, 0.0], Race::White),
            rec([0.0, 1.0, 0.0, 0.0, 0.0], [0.5, 0.5, 0.0, 0.0, 0.0], Race::Black),
            rec([0.5, 0.0, 0.5, 0.0, 0.0], [0.0, 0.0, 1.0, 0.0, 0.0], Race::White),
        ];
        let g = mean_relative_risk_by_race(&recs).unwrap();
        assert!(!g.contains_key(&Race::Asian));
        let w = g[&Race::White];
        assert_eq!((w.n, w.n_infinite, w.flagged), (3, 1, true));
        assert!((w.geometric_mean.unwrap() - 4.0).abs() < 1e-12);
        assert_eq!(g[&Race::Black].n, 1);
    }

    #[test]
    fn dp_bound_values() {
        assert_eq!(dp_bound(0.0), 1.0);
        assert!((dp_bound(1.0) - std::f64::consts::E).abs() < 1e-12);
        assert!(dp_bound(19.61) > 3.28e8);
    }

    #[test]
    fn degenerate_report() {
        let recs = vec![rec([0.2, 0.2, 0.2, 0.2, 0.2], [0.2; 5], Race::White); 4];
        let inputs: Vec<MethodPosteriors> = NameParts::ALL
            .into_iter()
            .map(|m| MethodPosteriors {
                method: Some(m),
                without_data: Some(recs.clone()),
                with_data: Some(recs.clone()),
            })
            .collect();
        let report = build_risk_report(&inputs, 1.0, "test", None).unwrap();
        for row in &report.rows {
            assert_eq!(row.error_rate_without_data, 0.0);
            assert_eq!(row.error_rate_with_data, 0.0);
            assert_eq!(row.max_individual_relative_risk, 1.0);
        }
        assert_eq!(report.per_race_method, NameParts::FirstMiddleLast);
        let text = report.render_table();
        assert!(text.starts_with("BISG method"));
        assert!(text.contains("Only last names"));

        let mut missing = inputs.clone();
        missing[1].with_data = None;
        let e = build_risk_report(&missing, 1.0, "test", None).unwrap_err();
        assert!(e.to_string().contains("first_last"), "{e}");
    }

    #[test]
    fn uninformative_release_leaves_prior() {
        // huge outputs in every cell make every race equally likely
        let inst = TinyInstance {
            n_blocks: 1,
            n_races: 2,
            max_count: 2,
            target_block: 0,
        };
        let budget = PrivacyBudget::new(1.0).unwrap();
        let out = TinyOutputs {
            race: vec![50, 50],
            vap: vec![50, 50],
        };
        let post = mechanism_aware_posterior(&inst, &budget, ReleasedTables::Both, &out).unwrap();
        assert!((post[0] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn brute_force_matches_factorized_likelihood() {
        // one block, two races, release the race table only: each race's
        // likelihood factorizes over cells, so compute it by hand
        let inst = TinyInstance {
            n_blocks: 1,
            n_races: 2,
            max_count: 2,
            target_block: 0,
        };
        let budget = PrivacyBudget::new(1.0).unwrap();
        let out = TinyOutputs {
            race: vec![3, 0],
            vap: vec![0, 0],
        };
        let post = mechanism_aware_posterior(&inst, &budget, ReleasedTables::Race, &out).unwrap();
        let g = GeometricNoise::new(0.5).unwrap();
        // cell states (n, v): n in 0..=2, v in 0..=n; race outputs only depend on n
        let weights = [1.0, 2.0, 3.0]; // number of v values for n = 0, 1, 2
        let h = |d: i64, plus: i64| -> f64 { (0..3).map(|n| weights[n as usize] * g.pmf(d - n - plus)).sum() };
        let l0 = h(3, 1) * h(0, 0);
        let l1 = h(3, 0) * h(0, 1);
        assert!((post[0] - l0 / (l0 + l1)).abs() < 1e-12);
    }

    #[test]
    fn both_tables_can_exceed_exp_epsilon() {
        // Changing an adult's race moves two cells in each table, so a
        // posterior conditioned on both tables is only bounded by exp(2ε).
        let inst = TinyInstance {
            n_blocks: 1,
            n_races: 3,
            max_count: 1,
            target_block: 0,
        };
        let budget = PrivacyBudget::new(0.5).unwrap();
        let hi = inst.max_count as i64 + 2;
        let out = TinyOutputs {
            race: vec![hi, -1, -1],
            vap: vec![hi, -1, -1],
        };
        let post = mechanism_aware_posterior(&inst, &budget, ReleasedTables::Both, &out).unwrap();
        let ratio = post[0] * 3.0;
        assert!(ratio > dp_bound(0.5));
        assert!(ratio <= dp_bound(1.0) * (1.0 + 1e-9));
    }

    #[test]
    fn tiny_instance_limits() {
        let too_big = TinyInstance {
            n_blocks: 4,
            n_races: 2,
            max_count: 1,
            target_block: 0,
        };
        assert!(matches!(too_big.validate(), Err(Error::Resource(_))));
        for inst in standard_tiny_instances() {
            inst.validate().unwrap();
        }
    }
}
