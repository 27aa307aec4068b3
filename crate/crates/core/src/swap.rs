//! Household swapping: the legacy disclosure-avoidance mechanism.
//!
//! Selected households exchange block assignments with a partner that has the
//! same number of adults and children, lives in a different block, and shares
//! the pairing scope unit. Members move with their household, so every
//! block's total and voting-age population is unchanged.

use std::collections::HashMap;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng;
use crate::synth_pop::{
    csv_writer, flush, read_json, read_rows, write_json, write_row, BlockId, HouseholdId,
    Microdata,
};
use crate::tabulate::{tabulate, TabulationSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scope {
    Tract,
    #[default]
    County,
    State,
}

impl std::str::FromStr for Scope {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "tract" => Ok(Scope::Tract),
            "county" => Ok(Scope::County),
            "state" => Ok(Scope::State),
            other => Err(Error::config(
                "pairing_scope",
                format!("`{other}` is not one of tract, county, state"),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwapConfig {
    pub swap_rate: f64,
    #[serde(default)]
    pub pairing_scope: Scope,
    #[serde(default)]
    pub seed: u64,
}

impl SwapConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.swap_rate) {
            return Err(Error::config(
                "swap.swap_rate",
                format!("{} is outside [0, 1]", self.swap_rate),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapPair {
    pub household_id_a: HouseholdId,
    pub household_id_b: HouseholdId,
    pub block_a: BlockId,
    pub block_b: BlockId,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SwapLog {
    pub pairs: Vec<SwapPair>,
    /// Households drawn for swapping.
    pub selected: usize,
    /// Selected households for which no eligible partner remained.
    pub unmatched: usize,
}

/// Swaps block assignments of matched household pairs.
///
/// `round(swap_rate * n_households)` households are drawn uniformly without
/// replacement and visited in random order. A visited household that has
/// already been used as a partner is skipped; otherwise its partner is drawn
/// uniformly from the unswapped households with the same `(n_adults,
/// n_children)` in the same scope unit but a different block.
pub fn apply_swapping(md: &Microdata, cfg: &SwapConfig) -> Result<(Microdata, SwapLog)> {
    cfg.validate()?;
    let mut out = md.clone();
    let n = out.households.len();
    let k = ((cfg.swap_rate * n as f64).round() as usize).min(n);
    if k == 0 {
        return Ok((out, SwapLog::default()));
    }
    let mut rng = rng::stream(cfg.seed, "swap", 0);

    let scope_unit = |block: BlockId| -> u32 {
        let geo = md.geography.get(block).expect("validated microdata");
        match cfg.pairing_scope {
            Scope::Tract => geo.tract_id,
            Scope::County => geo.county_id,
            Scope::State => geo.state_id,
        }
    };
    let mut buckets: HashMap<(u32, u32, u32), Vec<usize>> = HashMap::new();
    for (i, h) in out.households.iter().enumerate() {
        buckets
            .entry((scope_unit(h.block_id), h.n_adults, h.n_children))
            .or_default()
            .push(i);
    }

    let mut selected = rand::seq::index::sample(&mut rng, n, k).into_vec();
    selected.shuffle(&mut rng);

    let mut swapped = vec![false; n];
    let mut log = SwapLog {
        selected: k,
        ..SwapLog::default()
    };
    let mut candidates = Vec::new();
    for i in selected {
        if swapped[i] {
            continue;
        }
        let h = out.households[i];
        candidates.clear();
        candidates.extend(
            buckets[&(scope_unit(h.block_id), h.n_adults, h.n_children)]
                .iter()
                .copied()
                .filter(|&j| !swapped[j] && out.households[j].block_id != h.block_id),
        );
        if candidates.is_empty() {
            log.unmatched += 1;
            continue;
        }
        let j = candidates[rng.random_range(0..candidates.len())];
        let partner = out.households[j];
        out.households[i].block_id = partner.block_id;
        out.households[j].block_id = h.block_id;
        swapped[i] = true;
        swapped[j] = true;
        log.pairs.push(SwapPair {
            household_id_a: h.household_id,
            household_id_b: partner.household_id,
            block_a: h.block_id,
            block_b: partner.block_id,
        });
    }
    Ok((out, log))
}

pub fn swap_then_tabulate(md: &Microdata, cfg: &SwapConfig) -> Result<TabulationSet> {
    let (swapped, _) = apply_swapping(md, cfg)?;
    Ok(tabulate(&swapped))
}

impl SwapLog {
    /// Puts every logged pair back in its original block.
    pub fn revert(&self, md: &Microdata) -> Result<Microdata> {
        let mut out = md.clone();
        let index: HashMap<HouseholdId, usize> = out
            .households
            .iter()
            .enumerate()
            .map(|(i, h)| (h.household_id, i))
            .collect();
        for p in &self.pairs {
            for (id, block) in [(p.household_id_a, p.block_a), (p.household_id_b, p.block_b)] {
                let i = *index.get(&id).ok_or_else(|| {
                    Error::Integrity(format!("swap log references missing household {id}"))
                })?;
                out.households[i].block_id = block;
            }
        }
        out.validate()?;
        Ok(out)
    }

    pub fn save(&self, csv_path: &Path) -> Result<()> {
        let mut w = csv_writer(csv_path)?;
        write_row(
            csv_path,
            &mut w,
            ["household_id_a", "household_id_b", "block_a", "block_b"],
        )?;
        for p in &self.pairs {
            write_row(
                csv_path,
                &mut w,
                &[
                    p.household_id_a.to_string(),
                    p.household_id_b.to_string(),
                    p.block_a.to_string(),
                    p.block_b.to_string(),
                ],
            )?;
        }
        flush(csv_path, w)?;
        write_json(
            &summary_path(csv_path),
            &SwapSummary {
                selected: self.selected,
                unmatched: self.unmatched,
                pairs: self.pairs.len(),
            },
        )
    }

    pub fn load(csv_path: &Path) -> Result<SwapLog> {
        let pairs = read_rows(csv_path, 4, |row| {
            Ok(SwapPair {
                household_id_a: row.int(0)?,
                household_id_b: row.int(1)?,
                block_a: row.int(2)?,
                block_b: row.int(3)?,
            })
        })?;
        let summary: SwapSummary = read_json(&summary_path(csv_path))?;
        if summary.pairs != pairs.len() {
            return Err(Error::Integrity(format!(
                "swap summary lists {} pairs, log has {}",
                summary.pairs,
                pairs.len()
            )));
        }
        Ok(SwapLog {
            pairs,
            selected: summary.selected,
            unmatched: summary.unmatched,
        })
    }
}

#[derive(Serialize, Deserialize)]
struct SwapSummary {
    selected: usize,
    unmatched: usize,
    pairs: usize,
}

pub fn summary_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("summary.json")
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_pop::{generate_population, GenerationConfig, GeographyConfig};
    use crate::tabulate::table_distance;

    fn cfg(rate: f64, seed: u64) -> SwapConfig {
        SwapConfig {
            swap_rate: rate,
            pairing_scope: Scope::County,
            seed,
        }
    }

    #[test]
    fn zero_rate_is_identity() {
        let md = generate_population(&GenerationConfig::default(), 1).unwrap();
        let (out, log) = apply_swapping(&md, &cfg(0.0, 3)).unwrap();
        assert_eq!(out, md);
        assert_eq!(log, SwapLog::default());
        assert_eq!(swap_then_tabulate(&md, &cfg(0.0, 3)).unwrap(), tabulate(&md));
    }

    #[test]
    fn single_block_has_no_partners() {
        let gen = GenerationConfig {
            geography: GeographyConfig {
                counties: 1,
                tracts_per_county: 1,
                blocks_per_tract: 1,
            },
            ..GenerationConfig::default()
        };
        let md = generate_population(&gen, 1).unwrap();
        let (out, log) = apply_swapping(&md, &cfg(1.0, 3)).unwrap();
        assert_eq!(out, md);
        assert!(log.pairs.is_empty());
        assert_eq!(log.selected, md.households.len());
        assert_eq!(log.unmatched, log.selected);
    }

    #[test]
    fn pairs_match_on_household_composition() {
        let md = generate_population(&GenerationConfig::default(), 5).unwrap();
        let (out, log) = apply_swapping(&md, &cfg(0.3, 9)).unwrap();
        assert!(!log.pairs.is_empty());
        let by_id: HashMap<_, _> = md.households.iter().map(|h| (h.household_id, *h)).collect();
        for p in &log.pairs {
            let (a, b) = (by_id[&p.household_id_a], by_id[&p.household_id_b]);
            assert_eq!((a.n_adults, a.n_children), (b.n_adults, b.n_children));
            assert_ne!(p.block_a, p.block_b);
            assert_eq!(
                md.geography.get(p.block_a).unwrap().county_id,
                md.geography.get(p.block_b).unwrap().county_id
            );
        }
        assert_eq!(out.persons, md.persons);
        assert!(table_distance(&tabulate(&md), &tabulate(&out))
            .unwrap()
            .total_population_l1
            == 0);
    }

    #[test]
    fn log_reverts_and_round_trips() {
        let md = generate_population(&GenerationConfig::default(), 6).unwrap();
        let (out, log) = apply_swapping(&md, &cfg(0.5, 2)).unwrap();
        assert_eq!(log.revert(&out).unwrap(), md);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("swaps.csv");
        log.save(&path).unwrap();
        assert_eq!(SwapLog::load(&path).unwrap(), log);
    }

    #[test]
    fn invalid_rate_is_rejected() {
        let md = generate_population(&GenerationConfig::default(), 1).unwrap();
        assert!(apply_swapping(&md, &cfg(1.2, 1)).unwrap_err().is_config());
        assert!("parish".parse::<Scope>().is_err());
    }
}
