//! Redistricting utility: district population deviations under confidential,
//! swapped and noised tables, One-Person-One-Vote compliance flips, and the
//! correlation between block-count errors and racial diversity.

use std::collections::{BTreeMap, HashMap, VecDeque};
use std::path::Path;

use rand::seq::IndexedRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Execution;
use crate::rng;
use crate::synth_pop::{csv_writer, flush, read_rows, write_row, BlockId, Geography};
use crate::tabulate::{table_distance, TabulationSet};

/// Greedy growth + improvement rounds per plan before giving up.
pub const MAX_ATTEMPTS: usize = 60;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Plan {
    pub plan_id: usize,
    pub n_districts: u32,
    pub assignment: BTreeMap<BlockId, u32>,
}

impl Plan {
    pub fn validate(&self) -> Result<()> {
        let mut used = vec![false; self.n_districts as usize];
        for &d in self.assignment.values() {
            let slot = used.get_mut(d as usize).ok_or_else(|| {
                Error::Integrity(format!(
                    "plan {} assigns district {d} but has {} districts",
                    self.plan_id, self.n_districts
                ))
            })?;
            *slot = true;
        }
        if let Some(d) = used.iter().position(|u| !u) {
            return Err(Error::Integrity(format!(
                "plan {} leaves district {d} empty",
                self.plan_id
            )));
        }
        Ok(())
    }

    pub fn district_populations(&self, tab: &TabulationSet) -> Result<Vec<u64>> {
        let mut pops = vec![0u64; self.n_districts as usize];
        for b in tab.blocks() {
            let d = self.assignment.get(&b.block_id).ok_or_else(|| {
                Error::Comparability(format!(
                    "plan {} does not assign block {}",
                    self.plan_id, b.block_id
                ))
            })?;
            pops[*d as usize] += b.total_population();
        }
        Ok(pops)
    }
}

/// `(max − min) / (total / n)` over district populations.
pub fn deviation_of(pops: &[u64]) -> Result<f64> {
    let total: u64 = pops.iter().sum();
    if total == 0 || pops.is_empty() {
        return Err(Error::UndefinedStatistic(
            "population deviation with zero total population".into(),
        ));
    }
    let max = *pops.iter().max().expect("non-empty");
    let min = *pops.iter().min().expect("non-empty");
    Ok((max - min) as f64 / (total as f64 / pops.len() as f64))
}

pub fn max_deviation(plan: &Plan, tab: &TabulationSet) -> Result<f64> {
    deviation_of(&plan.district_populations(tab)?)
}

/// Rook adjacency of blocks laid out row-major, in id order, on a grid of
/// width `ceil(sqrt(n_blocks))`.
pub fn grid_adjacency(geo: &Geography) -> Vec<Vec<usize>> {
    let n = geo.n_blocks();
    let width = (n as f64).sqrt().ceil().max(1.0) as usize;
    (0..n)
        .map(|i| {
            let (row, col) = (i / width, i % width);
            let mut nb = Vec::with_capacity(4);
            if col > 0 {
                nb.push(i - 1);
            }
            if col + 1 < width && i + 1 < n {
                nb.push(i + 1);
            }
            if row > 0 {
                nb.push(i - width);
            }
            if i + width < n {
                nb.push(i + width);
            }
            nb
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlanSettings {
    pub n_plans: usize,
    pub n_districts: u32,
    pub balance_tolerance: f64,
}

impl PlanSettings {
    pub fn validate(&self, n_blocks: usize) -> Result<()> {
        if self.n_districts == 0 || self.n_districts as usize > n_blocks {
            return Err(Error::config(
                "policy.n_districts",
                format!("{} is not in 1..={n_blocks}", self.n_districts),
            ));
        }
        if self.balance_tolerance.is_nan() || self.balance_tolerance < 0.0 {
            return Err(Error::config("policy.balance_tolerance", "must be non-negative"));
        }
        Ok(())
    }
}

/// Seeded region-growing plans whose deviation under `tab` is within the
/// tolerance. Plan `i` depends only on `(seed, i)`.
pub fn generate_plans(
    geo: &Geography,
    tab: &TabulationSet,
    settings: &PlanSettings,
    seed: u64,
) -> Result<Vec<Plan>> {
    generate_plans_with(Execution::default(), geo, tab, settings, seed)
}

pub fn generate_plans_with(
    exec: Execution,
    geo: &Geography,
    tab: &TabulationSet,
    settings: &PlanSettings,
    seed: u64,
) -> Result<Vec<Plan>> {
    settings.validate(geo.n_blocks())?;
    let adjacency = grid_adjacency(geo);
    let pops: Vec<u64> = geo
        .block_ids()
        .map(|id| {
            tab.block(id).map(|b| b.total_population()).ok_or_else(|| {
                Error::Comparability(format!("tabulation has no block {id}"))
            })
        })
        .collect::<Result<_>>()?;
    if pops.iter().sum::<u64>() == 0 {
        return Err(Error::UndefinedStatistic(
            "cannot balance districts with zero total population".into(),
        ));
    }
    let ids: Vec<BlockId> = geo.block_ids().collect();
    exec.map_range(settings.n_plans, |plan_id| {
        let mut rng = rng::stream(seed, "policy/plan", plan_id as u64);
        let mut best = f64::INFINITY;
        for _ in 0..MAX_ATTEMPTS {
            let mut districts = grow(&adjacency, &pops, settings.n_districts as usize, &mut rng);
            let dev = improve(
                &adjacency,
                &pops,
                &mut districts,
                settings.n_districts as usize,
                settings.balance_tolerance,
            );
            if dev <= settings.balance_tolerance {
                return Ok(Plan {
                    plan_id,
                    n_districts: settings.n_districts,
                    assignment: ids.iter().copied().zip(districts.iter().map(|&d| d as u32)).collect(),
                });
            }
            best = best.min(dev);
        }
        Err(Error::PlanGeneration {
            attempts: MAX_ATTEMPTS,
            best_deviation: best,
        })
    })
    .into_iter()
    .collect()
}

fn grow<R: Rng>(adjacency: &[Vec<usize>], pops: &[u64], k: usize, rng: &mut R) -> Vec<usize> {
    let n = pops.len();
    let mut district = vec![usize::MAX; n];
    let mut district_pop = vec![0u64; k];
    let seeds = rand::seq::index::sample(rng, n, k).into_vec();
    for (d, &b) in seeds.iter().enumerate() {
        district[b] = d;
        district_pop[d] += pops[b];
    }
    let mut remaining = n - k;
    let mut order: Vec<usize> = (0..k).collect();
    let mut frontier = Vec::new();
    while remaining > 0 {
        order.sort_by_key(|&d| (district_pop[d], d));
        let mut grew = false;
        for &d in &order {
            frontier.clear();
            frontier.extend((0..n).filter(|&b| {
                district[b] == usize::MAX && adjacency[b].iter().any(|&nb| district[nb] == d)
            }));
            if let Some(&b) = frontier.choose(rng) {
                district[b] = d;
                district_pop[d] += pops[b];
                remaining -= 1;
                grew = true;
                break;
            }
        }
        if !grew {
            // disconnected remainder: attach to the smallest district
            let b = district.iter().position(|&d| d == usize::MAX).expect("remaining > 0");
            district[b] = order[0];
            district_pop[order[0]] += pops[b];
            remaining -= 1;
        }
    }
    district
}

/// Steepest-descent single-block moves on Σ (pop − ideal)², keeping every
/// district non-empty and connected. Returns the final deviation.
fn improve(adjacency: &[Vec<usize>], pops: &[u64], district: &mut [usize], k: usize, tolerance: f64) -> f64 {
    let total: u64 = pops.iter().sum();
    let ideal = total as f64 / k as f64;
    let mut dpop = vec![0i64; k];
    let mut size = vec![0usize; k];
    for (b, &d) in district.iter().enumerate() {
        dpop[d] += pops[b] as i64;
        size[d] += 1;
    }
    let dev = |dpop: &[i64]| -> f64 {
        let max = *dpop.iter().max().unwrap();
        let min = *dpop.iter().min().unwrap();
        (max - min) as f64 / ideal
    };
    let max_steps = 20 * pops.len();
    for _ in 0..max_steps {
        if dev(&dpop) <= tolerance {
            break;
        }
        let mut moves: Vec<(f64, usize, usize)> = Vec::new();
        for b in 0..pops.len() {
            let from = district[b];
            if size[from] <= 1 || pops[b] == 0 {
                continue;
            }
            let p = pops[b] as f64;
            let mut seen = [usize::MAX; 4];
            for (slot, &nb) in adjacency[b].iter().enumerate() {
                let to = district[nb];
                if to == from || seen.contains(&to) {
                    continue;
                }
                seen[slot] = to;
                let (f, t) = (dpop[from] as f64 - ideal, dpop[to] as f64 - ideal);
                let gain = f * f + t * t - (f - p).powi(2) - (t + p).powi(2);
                if gain > 1e-9 {
                    moves.push((gain, b, to));
                }
            }
        }
        if moves.is_empty() {
            break;
        }
        moves.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)).then(a.2.cmp(&b.2)));
        let Some(&(_, b, to)) = moves
            .iter()
            .find(|&&(_, b, _)| stays_connected(adjacency, district, b))
        else {
            break;
        };
        let from = district[b];
        district[b] = to;
        dpop[from] -= pops[b] as i64;
        dpop[to] += pops[b] as i64;
        size[from] -= 1;
        size[to] += 1;
    }
    dev(&dpop)
}

/// Whether removing `b` from its district leaves the district connected.
fn stays_connected(adjacency: &[Vec<usize>], district: &[usize], b: usize) -> bool {
    let d = district[b];
    let members: Vec<usize> = (0..district.len()).filter(|&x| x != b && district[x] == d).collect();
    let Some(&start) = members.first() else {
        return false;
    };
    let mut seen = HashMap::new();
    seen.insert(start, ());
    let mut queue = VecDeque::from([start]);
    while let Some(x) = queue.pop_front() {
        for &nb in &adjacency[x] {
            if nb != b && district[nb] == d && seen.insert(nb, ()).is_none() {
                queue.push_back(nb);
            }
        }
    }
    seen.len() == members.len()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FlipSummary {
    pub threshold: f64,
    pub compliant_confidential: usize,
    pub compliant_noised: usize,
    /// Compliant under confidential tables, not under noised ones.
    pub lost: usize,
    /// Non-compliant under confidential tables, compliant under noised ones.
    pub gained: usize,
}

impl FlipSummary {
    pub fn total(&self) -> usize {
        self.lost + self.gained
    }
}

/// A plan is compliant when its deviation is at most `threshold`.
pub fn compliance_flips(
    plans: &[Plan],
    tab_conf: &TabulationSet,
    tab_noised: &TabulationSet,
    threshold: f64,
) -> Result<FlipSummary> {
    table_distance(tab_conf, tab_noised)?;
    let mut s = FlipSummary {
        threshold,
        compliant_confidential: 0,
        compliant_noised: 0,
        lost: 0,
        gained: 0,
    };
    for p in plans {
        let a = max_deviation(p, tab_conf)? <= threshold;
        let b = max_deviation(p, tab_noised)? <= threshold;
        s.compliant_confidential += usize::from(a);
        s.compliant_noised += usize::from(b);
        s.lost += usize::from(a && !b);
        s.gained += usize::from(!a && b);
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Correlation {
    Defined(f64),
    /// One of the series has zero variance.
    Undefined,
}

pub fn pearson(xs: &[f64], ys: &[f64]) -> Correlation {
    let n = xs.len().min(ys.len()) as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx).powi(2);
        syy += (y - my).powi(2);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return Correlation::Undefined;
    }
    Correlation::Defined(sxy / (sxx * syy).sqrt())
}

/// Pearson correlation between |block total error| and the confidential
/// block's diversity index `1 − Σ share²`.
pub fn error_diversity_correlation(tab_conf: &TabulationSet, tab_noised: &TabulationSet) -> Result<Correlation> {
    let d = table_distance(tab_conf, tab_noised)?;
    if tab_conf.n_blocks() < 3 {
        return Err(Error::UndefinedStatistic(
            "correlation needs at least 3 blocks".into(),
        ));
    }
    let errors: Vec<f64> = d.per_block.iter().map(|b| b.total_population_abs as f64).collect();
    let diversity: Vec<f64> = tab_conf.blocks().map(|b| b.diversity_index()).collect();
    Ok(pearson(&errors, &diversity))
}

// ---------------------------------------------------------------------------
// Report

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionDeviation {
    pub condition: String,
    pub epsilon: Option<f64>,
    pub deviations: Vec<f64>,
    pub mean_deviation: f64,
    pub max_deviation: f64,
    pub flips: Vec<FlipSummary>,
    pub mean_block_total_l1: f64,
    pub error_diversity_correlation: Correlation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    pub n_plans: usize,
    pub n_districts: u32,
    pub balance_tolerance: f64,
    pub thresholds: Vec<f64>,
    pub conditions: Vec<ConditionDeviation>,
    /// Every swapped-table deviation equals the confidential one exactly.
    pub swapped_equals_confidential: Option<bool>,
    /// Mean deviation of each noised condition over the swapped condition's.
    pub inflation_ratio: BTreeMap<String, Option<f64>>,
}

/// A named table to evaluate plans against.
pub struct Condition<'a> {
    pub name: String,
    pub epsilon: Option<f64>,
    pub table: &'a TabulationSet,
}

pub fn evaluate_plans(
    plans: &[Plan],
    confidential: &TabulationSet,
    conditions: &[Condition<'_>],
    settings: &PlanSettings,
    thresholds: &[f64],
) -> Result<DeviationReport> {
    let mut out = Vec::new();
    for c in conditions {
        let deviations = plans
            .iter()
            .map(|p| max_deviation(p, c.table))
            .collect::<Result<Vec<_>>>()?;
        let flips = thresholds
            .iter()
            .map(|&t| compliance_flips(plans, confidential, c.table, t))
            .collect::<Result<Vec<_>>>()?;
        let dist = table_distance(confidential, c.table)?;
        out.push(ConditionDeviation {
            condition: c.name.clone(),
            epsilon: c.epsilon,
            mean_deviation: deviations.iter().sum::<f64>() / deviations.len().max(1) as f64,
            max_deviation: deviations.iter().copied().fold(0.0, f64::max),
            deviations,
            flips,
            mean_block_total_l1: dist.mean_total_population_l1,
            error_diversity_correlation: if confidential.n_blocks() >= 3 {
                error_diversity_correlation(confidential, c.table)?
            } else {
                Correlation::Undefined
            },
        });
    }
    let conf = out.iter().find(|c| c.condition == "confidential");
    let swapped = out.iter().find(|c| c.condition == "swapped");
    let swapped_equals_confidential = match (conf, swapped) {
        (Some(a), Some(b)) => Some(a.deviations == b.deviations),
        _ => None,
    };
    let inflation_ratio = match swapped {
        Some(s) => out
            .iter()
            .filter(|c| c.epsilon.is_some())
            .map(|c| {
                let r = (s.mean_deviation > 0.0).then(|| c.mean_deviation / s.mean_deviation);
                (c.condition.clone(), r)
            })
            .collect(),
        None => BTreeMap::new(),
    };
    Ok(DeviationReport {
        n_plans: plans.len(),
        n_districts: settings.n_districts,
        balance_tolerance: settings.balance_tolerance,
        thresholds: thresholds.to_vec(),
        conditions: out,
        swapped_equals_confidential,
        inflation_ratio,
    })
}

impl DeviationReport {
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Long-format summary: one row per condition and plan.
    pub fn save_summary_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        write_row(path, &mut w, ["condition", "epsilon", "plan_id", "max_deviation"])?;
        for c in &self.conditions {
            for (i, d) in c.deviations.iter().enumerate() {
                write_row(
                    path,
                    &mut w,
                    &[
                        c.condition.clone(),
                        c.epsilon.map(|e| e.to_string()).unwrap_or_default(),
                        i.to_string(),
                        d.to_string(),
                    ],
                )?;
            }
        }
        flush(path, w)
    }
}

pub fn save_plans(plans: &[Plan], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    write_row(path, &mut w, ["plan_id", "block_id", "district_id"])?;
    for p in plans {
        for (b, d) in &p.assignment {
            write_row(path, &mut w, &[p.plan_id.to_string(), b.to_string(), d.to_string()])?;
        }
    }
    flush(path, w)
}

pub fn load_plans(path: &Path) -> Result<Vec<Plan>> {
    let rows: Vec<(usize, BlockId, u32)> =
        read_rows(path, 3, |row| Ok((row.int(0)?, row.int(1)?, row.int(2)?)))?;
    let mut by_plan: BTreeMap<usize, BTreeMap<BlockId, u32>> = BTreeMap::new();
    for (p, b, d) in rows {
        by_plan.entry(p).or_default().insert(b, d);
    }
    by_plan
        .into_iter()
        .map(|(plan_id, assignment)| {
            let n_districts = assignment.values().max().map_or(0, |m| m + 1);
            let plan = Plan {
                plan_id,
                n_districts,
                assignment,
            };
            plan.validate()?;
            Ok(plan)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_pop::GeographyConfig;
    use crate::tabulate::BlockTable;

    fn flat_table(pops: &[u64]) -> TabulationSet {
        let geo = Geography::from_config(&GeographyConfig {
            counties: 1,
            tracts_per_county: 1,
            blocks_per_tract: pops.len() as u32,
        })
        .unwrap();
        let blocks = pops
            .iter()
            .enumerate()
            .map(|(i, &p)| BlockTable {
                block_id: i as u32,
                race_counts: [p, 0, 0, 0, 0],
                vap_race_counts: [p, 0, 0, 0, 0],
                n_households: 1,
            })
            .collect();
        TabulationSet::from_blocks(geo, blocks).unwrap()
    }

    #[test]
    fn deviation_arithmetic() {
        assert_eq!(deviation_of(&[100, 100]).unwrap(), 0.0);
        assert!((deviation_of(&[95, 105]).unwrap() - 0.10).abs() < 1e-15);
        assert!(matches!(deviation_of(&[0, 0]), Err(Error::UndefinedStatistic(_))));
        // scale invariance
        assert_eq!(deviation_of(&[95, 105]).unwrap(), deviation_of(&[190, 210]).unwrap());
    }

    #[test]
    fn equal_blocks_split_exactly() {
        let t = flat_table(&[50, 50, 50, 50]);
        let s = PlanSettings {
            n_plans: 5,
            n_districts: 2,
            balance_tolerance: 0.0,
        };
        let plans = generate_plans(t.geography(), &t, &s, 1).unwrap();
        assert_eq!(plans.len(), 5);
        for p in &plans {
            assert_eq!(max_deviation(p, &t).unwrap(), 0.0);
            p.validate().unwrap();
        }
    }

    #[test]
    fn one_district_per_block() {
        let t = flat_table(&[10, 20, 30, 40]);
        let s = PlanSettings {
            n_plans: 1,
            n_districts: 4,
            balance_tolerance: f64::INFINITY,
        };
        let p = &generate_plans(t.geography(), &t, &s, 1).unwrap()[0];
        let mut districts: Vec<u32> = p.assignment.values().copied().collect();
        districts.sort();
        assert_eq!(districts, vec![0, 1, 2, 3]);
        assert!((max_deviation(p, &t).unwrap() - 30.0 / 25.0).abs() < 1e-12);
    }

    #[test]
    fn unachievable_tolerance_reports_best() {
        let t = flat_table(&[1, 1, 100]);
        let s = PlanSettings {
            n_plans: 1,
            n_districts: 2,
            balance_tolerance: 0.01,
        };
        match generate_plans(t.geography(), &t, &s, 1) {
            Err(Error::PlanGeneration { best_deviation, .. }) => assert!(best_deviation > 1.0),
            other => panic!("{other:?}"),
        }
        let s = PlanSettings {
            n_districts: 4,
            ..s
        };
        assert!(generate_plans(t.geography(), &t, &s, 1).unwrap_err().is_config());
    }

    #[test]
    fn flips_identity_and_strict_threshold() {
        let t = flat_table(&[50, 50, 50, 50]);
        let s = PlanSettings {
            n_plans: 3,
            n_districts: 2,
            balance_tolerance: 0.0,
        };
        let plans = generate_plans(t.geography(), &t, &s, 4).unwrap();
        let f = compliance_flips(&plans, &t, &t, 0.1).unwrap();
        assert_eq!(f.total(), 0);
        let noisy = flat_table(&[51, 50, 50, 50]);
        let f = compliance_flips(&plans, &t, &noisy, 0.0).unwrap();
        assert_eq!(f.lost, 3);
        assert_eq!(f.gained, 0);
    }

    #[test]
    fn correlation_cases() {
        match pearson(&[0.0, 1.0, 2.0, 3.0], &[0.0, 0.2, 0.4, 0.6]) {
            Correlation::Defined(r) => assert!((r - 1.0).abs() < 1e-12),
            Correlation::Undefined => panic!(),
        }
        let t = flat_table(&[5, 6, 7, 8]);
        assert_eq!(error_diversity_correlation(&t, &t).unwrap(), Correlation::Undefined);
        let small = flat_table(&[5, 6]);
        assert!(error_diversity_correlation(&small, &small).is_err());
    }

    #[test]
    fn plans_round_trip() {
        let t = flat_table(&[5, 6, 7, 8, 9, 10, 11, 12, 13]);
        let s = PlanSettings {
            n_plans: 3,
            n_districts: 3,
            balance_tolerance: 0.5,
        };
        let plans = generate_plans(t.geography(), &t, &s, 2).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("plans.csv");
        save_plans(&plans, &path).unwrap();
        assert_eq!(load_plans(&path).unwrap(), plans);
    }

    #[test]
    fn grid_is_symmetric() {
        let t = flat_table(&[1; 10]);
        let adj = grid_adjacency(t.geography());
        for (i, nb) in adj.iter().enumerate() {
            for &j in nb {
                assert!(adj[j].contains(&i));
            }
        }
    }
}
