//! Block-level release tables: race counts, voting-age race counts and
//! household counts, with tract/county/state aggregates.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::race::{Race, RaceVec, N_RACES};
use crate::synth_pop::{
    csv_writer, flush, read_json, read_rows, write_json, write_row, BlockId, Geography, Microdata,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockTable {
    pub block_id: BlockId,
    pub race_counts: RaceVec<u64>,
    pub vap_race_counts: RaceVec<u64>,
    pub n_households: u64,
}

impl BlockTable {
    pub fn empty(block_id: BlockId) -> Self {
        BlockTable {
            block_id,
            race_counts: [0; N_RACES],
            vap_race_counts: [0; N_RACES],
            n_households: 0,
        }
    }

    pub fn total_population(&self) -> u64 {
        self.race_counts.iter().sum()
    }

    pub fn voting_age_population(&self) -> u64 {
        self.vap_race_counts.iter().sum()
    }

    /// `1 - Σ share²` over race shares; 0 for an empty block.
    pub fn diversity_index(&self) -> f64 {
        let total = self.total_population();
        if total == 0 {
            return 0.0;
        }
        1.0 - self
            .race_counts
            .iter()
            .map(|&c| (c as f64 / total as f64).powi(2))
            .sum::<f64>()
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Totals {
    pub total_population: u64,
    pub voting_age_population: u64,
    pub households: u64,
    pub race_counts: RaceVec<u64>,
    pub vap_race_counts: RaceVec<u64>,
    pub n_blocks: u64,
}

impl Totals {
    fn add(&mut self, b: &BlockTable) {
        self.total_population += b.total_population();
        self.voting_age_population += b.voting_age_population();
        self.households += b.n_households;
        for r in 0..N_RACES {
            self.race_counts[r] += b.race_counts[r];
            self.vap_race_counts[r] += b.vap_race_counts[r];
        }
        self.n_blocks += 1;
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Aggregates {
    pub tracts: BTreeMap<u32, Totals>,
    pub counties: BTreeMap<u32, Totals>,
    pub states: BTreeMap<u32, Totals>,
}

/// Which population a table lookup refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Population {
    Total,
    #[default]
    Vap,
}

/// Per-block tables for every block of a geography, plus aggregates that
/// always equal the sum of their blocks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TabulationSet {
    geography: Geography,
    blocks: BTreeMap<BlockId, BlockTable>,
    aggregates: Aggregates,
}

impl TabulationSet {
    /// Builds a tabulation; `blocks` must cover the geography exactly.
    pub fn from_blocks(geography: Geography, blocks: Vec<BlockTable>) -> Result<Self> {
        let mut map = BTreeMap::new();
        for b in blocks {
            if !geography.contains(b.block_id) {
                return Err(Error::Integrity(format!(
                    "table row for block {} which is not in the geography",
                    b.block_id
                )));
            }
            if map.insert(b.block_id, b).is_some() {
                return Err(Error::Integrity(format!(
                    "duplicate table row for block {}",
                    b.block_id
                )));
            }
        }
        if let Some(missing) = geography.block_ids().find(|id| !map.contains_key(id)) {
            return Err(Error::Integrity(format!(
                "no table row for block {missing}"
            )));
        }
        let mut aggregates = Aggregates::default();
        for geo in &geography.blocks {
            let b = &map[&geo.block_id];
            aggregates.tracts.entry(geo.tract_id).or_default().add(b);
            aggregates.counties.entry(geo.county_id).or_default().add(b);
            aggregates.states.entry(geo.state_id).or_default().add(b);
        }
        Ok(TabulationSet {
            geography,
            blocks: map,
            aggregates,
        })
    }

    pub fn geography(&self) -> &Geography {
        &self.geography
    }

    pub fn aggregates(&self) -> &Aggregates {
        &self.aggregates
    }

    pub fn block(&self, id: BlockId) -> Option<&BlockTable> {
        self.blocks.get(&id)
    }

    pub fn blocks(&self) -> impl ExactSizeIterator<Item = &BlockTable> + '_ {
        self.blocks.values()
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    /// Totals of the state containing `block_id`.
    pub fn state_of(&self, block_id: BlockId) -> Option<&Totals> {
        let geo = self.geography.get(block_id)?;
        self.aggregates.states.get(&geo.state_id)
    }

    /// Sum over all states.
    pub fn grand_total(&self) -> Totals {
        let mut t = Totals::default();
        for b in self.blocks.values() {
            t.add(b);
        }
        t
    }

    /// Per-race counts for `block_id` in the requested population.
    pub fn counts(&self, block_id: BlockId, population: Population) -> Option<RaceVec<u64>> {
        self.block(block_id).map(|b| match population {
            Population::Total => b.race_counts,
            Population::Vap => b.vap_race_counts,
        })
    }

    pub fn into_blocks(self) -> (Geography, Vec<BlockTable>) {
        (self.geography, self.blocks.into_values().collect())
    }

    pub fn save(&self, csv_path: &Path) -> Result<()> {
        let mut w = csv_writer(csv_path)?;
        let mut header = vec!["block_id".to_string()];
        header.extend(Race::ALL.iter().map(|r| format!("race_{r}")));
        header.extend(Race::ALL.iter().map(|r| format!("vap_{r}")));
        header.push("n_households".into());
        write_row(csv_path, &mut w, &header)?;
        for b in self.blocks.values() {
            let mut row = vec![b.block_id.to_string()];
            row.extend(b.race_counts.iter().map(u64::to_string));
            row.extend(b.vap_race_counts.iter().map(u64::to_string));
            row.push(b.n_households.to_string());
            write_row(csv_path, &mut w, &row)?;
        }
        flush(csv_path, w)?;
        write_json(
            &aggregates_path(csv_path),
            &Sidecar {
                geography: self.geography.clone(),
                aggregates: self.aggregates.clone(),
            },
        )
    }

    /// Loads a table CSV and its aggregates sidecar, rejecting a sidecar whose
    /// aggregates disagree with the block rows.
    pub fn load(csv_path: &Path) -> Result<Self> {
        let sidecar: Sidecar = read_json(&aggregates_path(csv_path))?;
        let mut geography = sidecar.geography;
        geography.validate()?;
        let rows = read_rows(csv_path, 2 + 2 * N_RACES, |row| {
            let mut b = BlockTable::empty(row.int(0)?);
            for r in 0..N_RACES {
                b.race_counts[r] = row.int(1 + r)?;
                b.vap_race_counts[r] = row.int(1 + N_RACES + r)?;
            }
            b.n_households = row.int(1 + 2 * N_RACES)?;
            Ok(b)
        })?;
        let tab = TabulationSet::from_blocks(geography, rows)?;
        if tab.aggregates != sidecar.aggregates {
            return Err(Error::Integrity(format!(
                "aggregates in {} do not match the block rows",
                aggregates_path(csv_path).display()
            )));
        }
        Ok(tab)
    }
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    geography: Geography,
    aggregates: Aggregates,
}

/// `tables.csv` → `tables.aggregates.json`.
pub fn aggregates_path(csv_path: &Path) -> PathBuf {
    csv_path.with_extension("aggregates.json")
}

/// Counts persons by block, race and adult status. Total on valid microdata.
pub fn tabulate(md: &Microdata) -> TabulationSet {
    let mut blocks: BTreeMap<BlockId, BlockTable> = md
        .geography
        .block_ids()
        .map(|id| (id, BlockTable::empty(id)))
        .collect();
    let household_block = md.household_blocks();
    for h in &md.households {
        blocks.get_mut(&h.block_id).expect("validated").n_households += 1;
    }
    for p in &md.persons {
        let b = blocks
            .get_mut(&household_block[&p.household_id])
            .expect("validated");
        b.race_counts[p.race.index()] += 1;
        if p.is_adult {
            b.vap_race_counts[p.race.index()] += 1;
        }
    }
    TabulationSet::from_blocks(md.geography.clone(), blocks.into_values().collect())
        .expect("microdata blocks match its geography")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDistance {
    pub block_id: BlockId,
    pub total_population_abs: u64,
    pub vap_abs: u64,
    pub race_l1: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DistanceReport {
    pub per_block: Vec<BlockDistance>,
    /// Σ_blocks |Δ total population|.
    pub total_population_l1: u64,
    pub vap_l1: u64,
    /// Σ_blocks Σ_races |Δ race count|.
    pub race_l1: u64,
    /// max_blocks |Δ total population|.
    pub max_abs_deviation: u64,
    pub mean_total_population_l1: f64,
}

impl DistanceReport {
    pub fn is_zero(&self) -> bool {
        self.total_population_l1 == 0 && self.vap_l1 == 0 && self.race_l1 == 0
    }
}

pub fn table_distance(a: &TabulationSet, b: &TabulationSet) -> Result<DistanceReport> {
    if !a.blocks.keys().eq(b.blocks.keys()) {
        return Err(Error::Comparability(format!(
            "tables cover different block sets ({} vs {} blocks)",
            a.n_blocks(),
            b.n_blocks()
        )));
    }
    let per_block: Vec<BlockDistance> = a
        .blocks
        .values()
        .zip(b.blocks.values())
        .map(|(x, y)| BlockDistance {
            block_id: x.block_id,
            total_population_abs: x.total_population().abs_diff(y.total_population()),
            vap_abs: x.voting_age_population().abs_diff(y.voting_age_population()),
            race_l1: (0..N_RACES)
                .map(|r| x.race_counts[r].abs_diff(y.race_counts[r]))
                .sum(),
        })
        .collect();
    let total_population_l1: u64 = per_block.iter().map(|d| d.total_population_abs).sum();
    Ok(DistanceReport {
        total_population_l1,
        vap_l1: per_block.iter().map(|d| d.vap_abs).sum(),
        race_l1: per_block.iter().map(|d| d.race_l1).sum(),
        max_abs_deviation: per_block
            .iter()
            .map(|d| d.total_population_abs)
            .max()
            .unwrap_or(0),
        mean_total_population_l1: total_population_l1 as f64 / per_block.len().max(1) as f64,
        per_block,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_pop::{
        generate_population, GenerationConfig, GeographyConfig, HouseholdsPerBlock,
    };

    fn two_white_adults() -> Microdata {
        let cfg = GenerationConfig {
            geography: GeographyConfig {
                counties: 1,
                tracts_per_county: 1,
                blocks_per_tract: 2,
            },
            households_per_block: HouseholdsPerBlock { min: 1, max: 1 },
            adults_weights: vec![0.0, 0.0, 1.0],
            children_weights: vec![1.0],
            race_mixture: crate::synth_pop::RaceMixture::Explicit {
                mixtures: vec![vec![1.0, 0.0, 0.0, 0.0, 0.0]],
            },
            ..GenerationConfig::default()
        };
        let mut md = generate_population(&cfg, 1).unwrap();
        // keep only block 0's household so block 1 is empty
        md.households.retain(|h| h.block_id == 0);
        let keep: Vec<_> = md.households.iter().map(|h| h.household_id).collect();
        md.persons.retain(|p| keep.contains(&p.household_id));
        md.validate().unwrap();
        md
    }

    #[test]
    fn forced_counts_and_empty_block() {
        let md = two_white_adults();
        let t = tabulate(&md);
        let b0 = t.block(0).unwrap();
        assert_eq!(b0.race_counts, [2, 0, 0, 0, 0]);
        assert_eq!(b0.vap_race_counts, [2, 0, 0, 0, 0]);
        assert_eq!(b0.n_households, 1);
        assert_eq!(*t.block(1).unwrap(), BlockTable::empty(1));
    }

    #[test]
    fn distance_identity_and_forced_increment() {
        let md = generate_population(&GenerationConfig::default(), 2).unwrap();
        let t = tabulate(&md);
        let d = table_distance(&t, &t).unwrap();
        assert!(d.is_zero());
        assert_eq!(d.max_abs_deviation, 0);

        let (geo, mut blocks) = t.clone().into_blocks();
        blocks[4].race_counts[2] += 3;
        let u = TabulationSet::from_blocks(geo, blocks).unwrap();
        let d = table_distance(&t, &u).unwrap();
        assert_eq!(d.total_population_l1, 3);
        assert_eq!(d.max_abs_deviation, 3);
        assert_eq!(d.race_l1, 3);
        assert_eq!(table_distance(&u, &t).unwrap(), d);
    }

    #[test]
    fn mismatched_blocks_are_not_comparable() {
        let t = tabulate(&generate_population(&GenerationConfig::default(), 2).unwrap());
        let mut cfg = GenerationConfig::default();
        cfg.geography.blocks_per_tract = 3;
        let u = tabulate(&generate_population(&cfg, 2).unwrap());
        assert!(matches!(
            table_distance(&t, &u),
            Err(Error::Comparability(_))
        ));
    }

    #[test]
    fn tabulation_ignores_row_order() {
        let md = generate_population(&GenerationConfig::default(), 8).unwrap();
        let mut shuffled = md.clone();
        shuffled.persons.reverse();
        shuffled.households.reverse();
        assert_eq!(tabulate(&md), tabulate(&shuffled));
    }

    #[test]
    fn save_load_and_tampered_sidecar() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("t.csv");
        let t = tabulate(&generate_population(&GenerationConfig::default(), 4).unwrap());
        t.save(&path).unwrap();
        assert_eq!(TabulationSet::load(&path).unwrap(), t);

        let text = std::fs::read_to_string(&path).unwrap();
        let mut lines: Vec<String> = text.lines().map(String::from).collect();
        let mut cells: Vec<String> = lines[1].split(',').map(String::from).collect();
        cells[1] = (cells[1].parse::<u64>().unwrap() + 1).to_string();
        lines[1] = cells.join(",");
        std::fs::write(&path, lines.join("\n")).unwrap();
        assert!(matches!(TabulationSet::load(&path), Err(Error::Integrity(_))));
    }
}
