//! A block-level differentially private release ("TopDown-lite").
//!
//! Each block's race and voting-age race counts receive independent
//! two-sided geometric noise. Negative counts are clamped to zero, race counts
//! are apportioned by largest remainder so each state's total population
//! equals the confidential total, and voting-age counts are clamped to the
//! race counts of the same cell. Household counts pass through unchanged.
//!
//! Neighboring datasets differ by one person's presence, which moves one cell
//! of each table by 1. A table noised with parameter `ε_table` is therefore
//! `ε_table`-DP before post-processing, and the release as a whole is
//! `epsilon_total`-DP.

use std::ops::RangeInclusive;
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Execution;
use crate::race::N_RACES;
use crate::rng::{self, RNG_VERSION};
use crate::synth_pop::{read_json, write_json};
use crate::tabulate::{BlockTable, TabulationSet};

pub const MECHANISM_VERSION: &str = "topdown-lite/1 (two-sided geometric, clamp, largest-remainder)";

/// Headline budget of the 2020 redistricting release.
pub const DEFAULT_EPSILON: f64 = 19.61;

/// Largest outcome domain [`verify_dp_ratio`] will enumerate.
pub const MAX_ENUMERATION: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Allocation {
    pub race_table: f64,
    pub vap_table: f64,
}

impl Default for Allocation {
    fn default() -> Self {
        Allocation {
            race_table: 0.5,
            vap_table: 0.5,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PrivacyBudget {
    pub epsilon_total: f64,
    #[serde(default)]
    pub allocation: Allocation,
}

impl PrivacyBudget {
    pub fn new(epsilon_total: f64) -> Result<Self> {
        let b = PrivacyBudget {
            epsilon_total,
            allocation: Allocation::default(),
        };
        b.validate()?;
        Ok(b)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon_total.is_finite() && self.epsilon_total > 0.0) {
            return Err(Error::config(
                "epsilon_total",
                format!("{} is not a positive finite number", self.epsilon_total),
            ));
        }
        let a = self.allocation;
        if !(a.race_table > 0.0 && a.vap_table > 0.0) {
            return Err(Error::config("allocation", "every share must be positive"));
        }
        if (a.race_table + a.vap_table - 1.0).abs() > 1e-12 {
            return Err(Error::config(
                "allocation",
                format!("shares sum to {}, not 1", a.race_table + a.vap_table),
            ));
        }
        Ok(())
    }

    pub fn race_epsilon(&self) -> f64 {
        self.epsilon_total * self.allocation.race_table
    }

    pub fn vap_epsilon(&self) -> f64 {
        self.epsilon_total * self.allocation.vap_table
    }
}

/// Two-sided geometric distribution: `P(k) = (1-α)/(1+α) · α^|k|`, `α = e^-ε`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeometricNoise {
    epsilon: f64,
}

impl GeometricNoise {
    pub fn new(epsilon: f64) -> Result<Self> {
        if epsilon.is_nan() || epsilon <= 0.0 {
            return Err(Error::config(
                "epsilon",
                format!("{epsilon} is not positive"),
            ));
        }
        Ok(GeometricNoise { epsilon })
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon
    }

    pub fn alpha(&self) -> f64 {
        (-self.epsilon).exp()
    }

    pub fn pmf(&self, k: i64) -> f64 {
        let a = self.alpha();
        (1.0 - a) / (1.0 + a) * a.powf(k.unsigned_abs() as f64)
    }

    pub fn log_pmf(&self, k: i64) -> f64 {
        // ln((1-α)/(1+α)) computed without cancellation for small ε
        let a = self.alpha();
        (-(-self.epsilon).exp_m1()).ln() - (1.0 + a).ln() - self.epsilon * k.unsigned_abs() as f64
    }

    pub fn variance(&self) -> f64 {
        let a = self.alpha();
        2.0 * a / (1.0 - a).powi(2)
    }

    /// Difference of two i.i.d. geometric failure counts, each drawn by inversion.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> i64 {
        let draw = |rng: &mut R| -> i64 {
            let g = (-rng::open_unit(rng).ln() / self.epsilon).floor();
            if g >= i64::MAX as f64 {
                i64::MAX / 2
            } else {
                g as i64
            }
        };
        draw(rng) - draw(rng)
    }
}

pub fn geometric_noise<R: Rng + ?Sized>(epsilon: f64, rng: &mut R) -> Result<i64> {
    Ok(GeometricNoise::new(epsilon)?.sample(rng))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub epsilon_total: f64,
    pub allocation: Allocation,
    pub seed: u64,
    pub mechanism_version: String,
    pub rng_version: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct NoisedTabulation {
    pub tabulation: TabulationSet,
    pub provenance: Provenance,
}

pub fn apply_dp_das(t: &TabulationSet, budget: &PrivacyBudget, seed: u64) -> Result<NoisedTabulation> {
    apply_dp_das_with(Execution::default(), t, budget, seed)
}

pub fn apply_dp_das_with(
    exec: Execution,
    t: &TabulationSet,
    budget: &PrivacyBudget,
    seed: u64,
) -> Result<NoisedTabulation> {
    budget.validate()?;
    let race_noise = GeometricNoise::new(budget.race_epsilon())?;
    let vap_noise = GeometricNoise::new(budget.vap_epsilon())?;

    let confidential: Vec<&BlockTable> = t.blocks().collect();
    let mut noised: Vec<BlockTable> = exec.map(&confidential, |b| {
        let mut rng = rng::stream(seed, "dp_das/block", u64::from(b.block_id));
        let mut out = **b;
        for r in 0..N_RACES {
            out.race_counts[r] = clamp_add(b.race_counts[r], race_noise.sample(&mut rng));
            out.vap_race_counts[r] = clamp_add(b.vap_race_counts[r], vap_noise.sample(&mut rng));
        }
        out
    });

    for (&state_id, totals) in &t.aggregates().states {
        let members: Vec<usize> = noised
            .iter()
            .enumerate()
            .filter(|(_, b)| t.geography().get(b.block_id).map(|g| g.state_id) == Some(state_id))
            .map(|(i, _)| i)
            .collect();
        let cells: Vec<u64> = members
            .iter()
            .flat_map(|&i| noised[i].race_counts)
            .collect();
        let adjusted = largest_remainder(&cells, totals.total_population);
        for (k, &i) in members.iter().enumerate() {
            noised[i]
                .race_counts
                .copy_from_slice(&adjusted[k * N_RACES..(k + 1) * N_RACES]);
        }
    }
    for b in &mut noised {
        for r in 0..N_RACES {
            b.vap_race_counts[r] = b.vap_race_counts[r].min(b.race_counts[r]);
        }
    }

    let tabulation = TabulationSet::from_blocks(t.geography().clone(), noised)?;
    Ok(NoisedTabulation {
        tabulation,
        provenance: Provenance {
            epsilon_total: budget.epsilon_total,
            allocation: budget.allocation,
            seed,
            mechanism_version: MECHANISM_VERSION.into(),
            rng_version: RNG_VERSION.into(),
        },
    })
}

fn clamp_add(count: u64, noise: i64) -> u64 {
    (count as i128 + noise as i128).clamp(0, u64::MAX as i128) as u64
}

/// Rescales non-negative integer cells to sum exactly to `target`: each cell
/// gets the floor of its proportional share, and leftover units go to the
/// largest fractional remainders (lowest index first on ties). An all-zero
/// input is spread evenly. The identity when the cells already sum to `target`.
pub fn largest_remainder(cells: &[u64], target: u64) -> Vec<u64> {
    if cells.is_empty() {
        return Vec::new();
    }
    let sum: u128 = cells.iter().map(|&c| c as u128).sum();
    let (mut out, remainders): (Vec<u64>, Vec<u128>) = if sum == 0 {
        let n = cells.len() as u128;
        cells
            .iter()
            .map(|_| ((target as u128 / n) as u64, 0))
            .unzip()
    } else {
        cells
            .iter()
            .map(|&c| {
                let scaled = c as u128 * target as u128;
                ((scaled / sum) as u64, scaled % sum)
            })
            .unzip()
    };
    let assigned: u64 = out.iter().sum();
    let mut order: Vec<usize> = (0..cells.len()).collect();
    order.sort_by(|&a, &b| remainders[b].cmp(&remainders[a]).then(a.cmp(&b)));
    for &i in order.iter().take((target - assigned) as usize) {
        out[i] += 1;
    }
    out
}

/// Exhaustively computes `max P(o | c) / P(o | c')` over neighboring counts
/// `c' = c + 1` (both in `counts`), every outcome `o` in `outcomes`, and both
/// directions, for the unclamped mechanism `o = c + noise`.
pub fn verify_dp_ratio(
    epsilon: f64,
    counts: RangeInclusive<i64>,
    outcomes: RangeInclusive<i64>,
) -> Result<f64> {
    let noise = GeometricNoise::new(epsilon)?;
    let n_outcomes = range_len(&outcomes);
    let n_counts = range_len(&counts);
    if n_outcomes > MAX_ENUMERATION || n_counts > MAX_ENUMERATION {
        return Err(Error::Resource(format!(
            "{n_counts} counts × {n_outcomes} outcomes exceeds the {MAX_ENUMERATION}-outcome enumeration limit"
        )));
    }
    let mut max_ratio: f64 = 1.0;
    for c in counts.clone() {
        let c2 = c + 1;
        if !counts.contains(&c2) {
            continue;
        }
        for o in outcomes.clone() {
            // log space: far-tail pmf values are subnormal at large ε
            let ratio = (noise.log_pmf(o - c) - noise.log_pmf(o - c2)).abs().exp();
            max_ratio = max_ratio.max(ratio);
        }
    }
    Ok(max_ratio)
}

fn range_len(r: &RangeInclusive<i64>) -> usize {
    if r.is_empty() {
        0
    } else {
        (r.end() - r.start()) as usize + 1
    }
}

impl NoisedTabulation {
    pub fn save(&self, csv_path: &Path) -> Result<()> {
        self.tabulation.save(csv_path)?;
        write_json(&provenance_path(csv_path), &self.provenance)
    }

    pub fn load(csv_path: &Path) -> Result<Self> {
        Ok(NoisedTabulation {
            tabulation: TabulationSet::load(csv_path)?,
            provenance: read_json(&provenance_path(csv_path))?,
        })
    }
}

pub fn provenance_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("provenance.json")
}
