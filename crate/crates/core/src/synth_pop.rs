//! Synthetic confidential microdata and the public voter file derived from it.
//!
//! A [`Microdata`] bundles the geography, the name model used to draw names,
//! households and persons. It stands in for the confidential edited file:
//! every downstream stage treats it as ground truth.

use std::collections::{BTreeMap, HashMap};
use std::fs::{self, File};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::Rng;
use rand_distr::Gamma;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::race::{Race, RaceVec, N_RACES};
use crate::rng;

pub type BlockId = u32;
pub type HouseholdId = u32;
pub type PersonId = u32;

const NORMALIZATION_TOL: f64 = 1e-12;

// ---------------------------------------------------------------------------
// Geography

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGeo {
    pub block_id: BlockId,
    pub tract_id: u32,
    pub county_id: u32,
    pub state_id: u32,
}

/// Block → tract → county → state containment. Blocks are kept sorted by id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Geography {
    pub blocks: Vec<BlockGeo>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GeographyConfig {
    pub counties: u32,
    pub tracts_per_county: u32,
    pub blocks_per_tract: u32,
}

impl Default for GeographyConfig {
    fn default() -> Self {
        GeographyConfig {
            counties: 2,
            tracts_per_county: 10,
            blocks_per_tract: 20,
        }
    }
}

impl Geography {
    /// Builds a single-state geography with globally unique tract and county ids.
    pub fn from_config(cfg: &GeographyConfig) -> Result<Geography> {
        for (field, v) in [
            ("geography.counties", cfg.counties),
            ("geography.tracts_per_county", cfg.tracts_per_county),
            ("geography.blocks_per_tract", cfg.blocks_per_tract),
        ] {
            if v == 0 {
                return Err(Error::config(field, "must be at least 1 (empty geography)"));
            }
        }
        let mut blocks = Vec::new();
        let mut tract_id = 0;
        for county_id in 0..cfg.counties {
            for _ in 0..cfg.tracts_per_county {
                for _ in 0..cfg.blocks_per_tract {
                    blocks.push(BlockGeo {
                        block_id: blocks.len() as BlockId,
                        tract_id,
                        county_id,
                        state_id: 0,
                    });
                }
                tract_id += 1;
            }
        }
        Ok(Geography { blocks })
    }

    pub fn n_blocks(&self) -> usize {
        self.blocks.len()
    }

    pub fn block_ids(&self) -> impl Iterator<Item = BlockId> + '_ {
        self.blocks.iter().map(|b| b.block_id)
    }

    pub fn get(&self, block_id: BlockId) -> Option<&BlockGeo> {
        self.blocks
            .binary_search_by_key(&block_id, |b| b.block_id)
            .ok()
            .map(|i| &self.blocks[i])
    }

    pub fn contains(&self, block_id: BlockId) -> bool {
        self.get(block_id).is_some()
    }

    /// Checks id uniqueness and strict containment (each tract in one county,
    /// each county in one state). Sorts blocks by id.
    pub fn validate(&mut self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Integrity("geography has no blocks".into()));
        }
        self.blocks.sort_by_key(|b| b.block_id);
        for w in self.blocks.windows(2) {
            if w[0].block_id == w[1].block_id {
                return Err(Error::Integrity(format!(
                    "duplicate block id {}",
                    w[0].block_id
                )));
            }
        }
        let mut tract_county = HashMap::new();
        let mut county_state = HashMap::new();
        for b in &self.blocks {
            if *tract_county.entry(b.tract_id).or_insert(b.county_id) != b.county_id {
                return Err(Error::Integrity(format!(
                    "tract {} spans more than one county",
                    b.tract_id
                )));
            }
            if *county_state.entry(b.county_id).or_insert(b.state_id) != b.state_id {
                return Err(Error::Integrity(format!(
                    "county {} spans more than one state",
                    b.county_id
                )));
            }
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Name model

/// Race-conditional name frequencies plus the national race prior: the
/// attacker's auxiliary data. Tables are race-major: `surname_given_race[r][id]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NameModel {
    pub surname_given_race: Vec<Vec<f64>>,
    pub first_given_race: Vec<Vec<f64>>,
    pub middle_given_race: Vec<Vec<f64>>,
    pub national_race_prior: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub surname_labels: Option<Vec<String>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NamePart {
    Surname,
    First,
    Middle,
}

impl NamePart {
    fn field(self) -> &'static str {
        match self {
            NamePart::Surname => "surname_given_race",
            NamePart::First => "first_given_race",
            NamePart::Middle => "middle_given_race",
        }
    }
}

impl NameModel {
    pub fn table(&self, part: NamePart) -> &[Vec<f64>] {
        match part {
            NamePart::Surname => &self.surname_given_race,
            NamePart::First => &self.first_given_race,
            NamePart::Middle => &self.middle_given_race,
        }
    }

    pub fn vocabulary_size(&self, part: NamePart) -> usize {
        self.table(part).first().map_or(0, Vec::len)
    }

    /// `Pr(name | race)`, or `None` for an id outside the vocabulary.
    pub fn likelihood(&self, part: NamePart, id: u32, race: Race) -> Option<f64> {
        self.table(part)[race.index()].get(id as usize).copied()
    }

    pub fn prior(&self) -> RaceVec<f64> {
        let mut p = [0.0; N_RACES];
        p.copy_from_slice(&self.national_race_prior);
        p
    }

    pub fn validate(&self) -> Result<()> {
        check_distribution("names.national_race_prior", &self.national_race_prior, N_RACES)?;
        for part in [NamePart::Surname, NamePart::First, NamePart::Middle] {
            let table = self.table(part);
            let field = format!("names.{}", part.field());
            if table.len() != N_RACES {
                return Err(Error::config(
                    field,
                    format!("expected {N_RACES} race columns, found {}", table.len()),
                ));
            }
            let size = table[0].len();
            if size == 0 {
                return Err(Error::config(field, "empty name vocabulary"));
            }
            for (r, col) in table.iter().enumerate() {
                check_distribution(&format!("{field}[{r}]"), col, size)?;
            }
        }
        if let Some(labels) = &self.surname_labels {
            if labels.len() != self.vocabulary_size(NamePart::Surname) {
                return Err(Error::config(
                    "names.surname_labels",
                    "label count differs from surname vocabulary",
                ));
            }
        }
        Ok(())
    }

    /// Small hand-written table for documentation and brute-force checks:
    /// five surnames, four first names, three middle names.
    pub fn demo() -> NameModel {
        NameModel {
            // columns: GARCIA, SMITH, WASHINGTON, NGUYEN, BEGAY
            surname_given_race: vec![
                vec![0.05, 0.60, 0.10, 0.05, 0.20],
                vec![0.05, 0.30, 0.55, 0.05, 0.05],
                vec![0.80, 0.10, 0.02, 0.03, 0.05],
                vec![0.04, 0.06, 0.01, 0.85, 0.04],
                vec![0.10, 0.20, 0.05, 0.05, 0.60],
            ],
            first_given_race: vec![
                vec![0.40, 0.30, 0.20, 0.10],
                vec![0.20, 0.50, 0.20, 0.10],
                vec![0.10, 0.20, 0.60, 0.10],
                vec![0.15, 0.15, 0.10, 0.60],
                vec![0.25, 0.25, 0.25, 0.25],
            ],
            middle_given_race: vec![
                vec![0.50, 0.30, 0.20],
                vec![0.30, 0.50, 0.20],
                vec![0.20, 0.20, 0.60],
                vec![0.60, 0.20, 0.20],
                vec![0.34, 0.33, 0.33],
            ],
            national_race_prior: vec![0.60, 0.13, 0.18, 0.06, 0.03],
            surname_labels: Some(
                ["GARCIA", "SMITH", "WASHINGTON", "NGUYEN", "BEGAY"]
                    .into_iter()
                    .map(String::from)
                    .collect(),
            ),
        }
    }

    /// Draws race-conditional name frequencies from a symmetric Dirichlet.
    /// Smaller `concentration` makes names more race-specific.
    pub fn synthetic(cfg: &SyntheticNames, national_race_prior: RaceVec<f64>, seed: u64) -> Result<NameModel> {
        cfg.validate()?;
        let mut rng = rng::stream(seed, "synth_pop/names", 0);
        let mut draw_table = |size: usize| -> Vec<Vec<f64>> {
            (0..N_RACES)
                .map(|_| dirichlet(&mut rng, &vec![cfg.concentration; size]))
                .collect()
        };
        let model = NameModel {
            surname_given_race: draw_table(cfg.n_surnames),
            first_given_race: draw_table(cfg.n_first),
            middle_given_race: draw_table(cfg.n_middle),
            national_race_prior: national_race_prior.to_vec(),
            surname_labels: None,
        };
        model.validate()?;
        Ok(model)
    }

    pub fn save_json(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load_json(path: &Path) -> Result<NameModel> {
        let nm: NameModel = read_json(path)?;
        nm.validate()?;
        Ok(nm)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticNames {
    pub n_surnames: usize,
    pub n_first: usize,
    pub n_middle: usize,
    /// Symmetric Dirichlet concentration for each race column.
    pub concentration: f64,
}

impl Default for SyntheticNames {
    fn default() -> Self {
        SyntheticNames {
            n_surnames: 200,
            n_first: 100,
            n_middle: 50,
            concentration: 0.3,
        }
    }
}

impl SyntheticNames {
    fn validate(&self) -> Result<()> {
        for (field, v) in [
            ("names.n_surnames", self.n_surnames),
            ("names.n_first", self.n_first),
            ("names.n_middle", self.n_middle),
        ] {
            if v == 0 {
                return Err(Error::config(field, "vocabulary must be non-empty"));
            }
        }
        if !(self.concentration.is_finite() && self.concentration > 0.0) {
            return Err(Error::config("names.concentration", "must be positive and finite"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NameSource {
    Synthetic(SyntheticNames),
    Demo,
    Table(NameModel),
}

impl Default for NameSource {
    fn default() -> Self {
        NameSource::Synthetic(SyntheticNames::default())
    }
}

// ---------------------------------------------------------------------------
// Generation config

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HouseholdsPerBlock {
    pub min: u32,
    pub max: u32,
}

/// Per-block race mixtures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum RaceMixture {
    /// Each block draws its mixture from `Dirichlet(concentration * mean)`.
    /// Low concentration produces segregated blocks.
    Dirichlet { mean: Vec<f64>, concentration: f64 },
    /// Block `i` (in id order) uses `mixtures[i % mixtures.len()]`.
    Explicit { mixtures: Vec<Vec<f64>> },
}

impl Default for RaceMixture {
    fn default() -> Self {
        RaceMixture::Dirichlet {
            mean: vec![0.60, 0.20, 0.10, 0.05, 0.05],
            concentration: 1.5,
        }
    }
}

impl RaceMixture {
    fn validate(&self) -> Result<()> {
        match self {
            RaceMixture::Dirichlet {
                mean,
                concentration,
            } => {
                check_distribution("race_mixture.mean", mean, N_RACES)?;
                if mean.iter().any(|&m| m <= 0.0) {
                    return Err(Error::config(
                        "race_mixture.mean",
                        "Dirichlet mean entries must be positive",
                    ));
                }
                if !(concentration.is_finite() && *concentration > 0.0) {
                    return Err(Error::config(
                        "race_mixture.concentration",
                        "must be positive and finite",
                    ));
                }
            }
            RaceMixture::Explicit { mixtures } => {
                if mixtures.is_empty() {
                    return Err(Error::config("race_mixture.mixtures", "no mixtures given"));
                }
                for (i, m) in mixtures.iter().enumerate() {
                    check_distribution(&format!("race_mixture.mixtures[{i}]"), m, N_RACES)?;
                }
            }
        }
        Ok(())
    }

    /// Population-average race share implied by the mixture over `n_blocks` blocks.
    pub fn expected_share(&self, n_blocks: usize) -> RaceVec<f64> {
        let mut share = [0.0; N_RACES];
        match self {
            RaceMixture::Dirichlet { mean, .. } => share.copy_from_slice(mean),
            RaceMixture::Explicit { mixtures } => {
                let n = n_blocks.max(1);
                for i in 0..n {
                    for (s, p) in share.iter_mut().zip(&mixtures[i % mixtures.len()]) {
                        *s += p / n as f64;
                    }
                }
            }
        }
        share
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerationConfig {
    pub geography: GeographyConfig,
    pub households_per_block: HouseholdsPerBlock,
    /// Weights over the number of adults, indexed from 0.
    pub adults_weights: Vec<f64>,
    /// Weights over the number of children, indexed from 0.
    pub children_weights: Vec<f64>,
    pub race_mixture: RaceMixture,
    pub names: NameSource,
    /// Probability that a person carries a middle name.
    pub middle_name_rate: f64,
}

impl Default for GenerationConfig {
    fn default() -> Self {
        GenerationConfig {
            geography: GeographyConfig::default(),
            households_per_block: HouseholdsPerBlock { min: 5, max: 35 },
            adults_weights: vec![0.0, 0.30, 0.55, 0.10, 0.05],
            children_weights: vec![0.55, 0.20, 0.15, 0.10],
            race_mixture: RaceMixture::default(),
            names: NameSource::default(),
            middle_name_rate: 0.85,
        }
    }
}

impl GenerationConfig {
    pub fn validate(&self) -> Result<()> {
        Geography::from_config(&self.geography)?;
        let hpb = &self.households_per_block;
        if hpb.min > hpb.max {
            return Err(Error::config(
                "households_per_block",
                format!("min {} exceeds max {}", hpb.min, hpb.max),
            ));
        }
        check_weights("adults_weights", &self.adults_weights)?;
        check_weights("children_weights", &self.children_weights)?;
        if self.adults_weights.len() == 1 && self.children_weights.len() == 1 {
            return Err(Error::config(
                "adults_weights",
                "every household would be empty (only size 0 has weight)",
            ));
        }
        let a0 = self.adults_weights[0] / self.adults_weights.iter().sum::<f64>();
        let c0 = self.children_weights[0] / self.children_weights.iter().sum::<f64>();
        if a0 * c0 >= 1.0 {
            return Err(Error::config(
                "adults_weights",
                "every household would be empty (only size 0 has weight)",
            ));
        }
        self.race_mixture.validate()?;
        if let NameSource::Table(nm) = &self.names {
            nm.validate()?;
        }
        if !(0.0..=1.0).contains(&self.middle_name_rate) {
            return Err(Error::config("middle_name_rate", "must lie in [0, 1]"));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Microdata

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Household {
    pub household_id: HouseholdId,
    pub block_id: BlockId,
    pub n_adults: u32,
    pub n_children: u32,
}

impl Household {
    pub fn size(&self) -> u32 {
        self.n_adults + self.n_children
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Person {
    pub person_id: PersonId,
    pub household_id: HouseholdId,
    pub race: Race,
    pub is_adult: bool,
    pub surname_id: u32,
    pub first_name_id: u32,
    pub middle_name_id: Option<u32>,
}

/// Confidential microdata. Immutable after construction; households and
/// persons are sorted by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Microdata {
    pub geography: Geography,
    pub names: NameModel,
    pub households: Vec<Household>,
    pub persons: Vec<Person>,
}

impl Microdata {
    /// Builds and validates microdata from parts.
    pub fn new(
        mut geography: Geography,
        names: NameModel,
        mut households: Vec<Household>,
        mut persons: Vec<Person>,
    ) -> Result<Microdata> {
        geography.validate()?;
        names.validate().map_err(|e| Error::Integrity(e.to_string()))?;
        households.sort_by_key(|h| h.household_id);
        persons.sort_by_key(|p| p.person_id);
        let md = Microdata {
            geography,
            names,
            households,
            persons,
        };
        md.validate()?;
        Ok(md)
    }

    pub fn validate(&self) -> Result<()> {
        let mut members: HashMap<HouseholdId, (u32, u32)> = HashMap::new();
        for w in self.households.windows(2) {
            if w[0].household_id == w[1].household_id {
                return Err(Error::Integrity(format!(
                    "duplicate household id {}",
                    w[0].household_id
                )));
            }
        }
        for h in &self.households {
            if !self.geography.contains(h.block_id) {
                return Err(Error::Integrity(format!(
                    "household {} references missing block {}",
                    h.household_id, h.block_id
                )));
            }
            if h.size() == 0 {
                return Err(Error::Integrity(format!(
                    "household {} has no members",
                    h.household_id
                )));
            }
            members.insert(h.household_id, (0, 0));
        }
        let sizes = [
            self.names.vocabulary_size(NamePart::Surname),
            self.names.vocabulary_size(NamePart::First),
            self.names.vocabulary_size(NamePart::Middle),
        ];
        for w in self.persons.windows(2) {
            if w[0].person_id == w[1].person_id {
                return Err(Error::Integrity(format!(
                    "duplicate person id {}",
                    w[0].person_id
                )));
            }
        }
        for p in &self.persons {
            let Some(count) = members.get_mut(&p.household_id) else {
                return Err(Error::Integrity(format!(
                    "person {} references missing household {}",
                    p.person_id, p.household_id
                )));
            };
            if p.is_adult {
                count.0 += 1;
            } else {
                count.1 += 1;
            }
            let bad_name = p.surname_id as usize >= sizes[0]
                || p.first_name_id as usize >= sizes[1]
                || p.middle_name_id.is_some_and(|m| m as usize >= sizes[2]);
            if bad_name {
                return Err(Error::Integrity(format!(
                    "person {} has a name id outside the name model",
                    p.person_id
                )));
            }
        }
        for h in &self.households {
            let (a, c) = members[&h.household_id];
            if a != h.n_adults || c != h.n_children {
                return Err(Error::Integrity(format!(
                    "household {} declares {}+{} members but has {a}+{c}",
                    h.household_id, h.n_adults, h.n_children
                )));
            }
        }
        Ok(())
    }

    pub fn household_blocks(&self) -> HashMap<HouseholdId, BlockId> {
        self.households
            .iter()
            .map(|h| (h.household_id, h.block_id))
            .collect()
    }

    pub fn n_adults(&self) -> usize {
        self.persons.iter().filter(|p| p.is_adult).count()
    }
}

/// Generates confidential microdata. Output is a pure function of `(config, seed)`.
pub fn generate_population(config: &GenerationConfig, seed: u64) -> Result<Microdata> {
    config.validate()?;
    let geography = Geography::from_config(&config.geography)?;
    let n_blocks = geography.n_blocks();
    let names = match &config.names {
        NameSource::Synthetic(s) => {
            NameModel::synthetic(s, config.race_mixture.expected_share(n_blocks), seed)?
        }
        NameSource::Demo => NameModel::demo(),
        NameSource::Table(nm) => nm.clone(),
    };

    let mut mix_rng = rng::stream(seed, "synth_pop/mixture", 0);
    let mixtures: Vec<Vec<f64>> = (0..n_blocks)
        .map(|i| match &config.race_mixture {
            RaceMixture::Dirichlet {
                mean,
                concentration,
            } => {
                let alpha: Vec<f64> = mean.iter().map(|m| m * concentration).collect();
                dirichlet(&mut mix_rng, &alpha)
            }
            RaceMixture::Explicit { mixtures } => mixtures[i % mixtures.len()].clone(),
        })
        .collect();

    let adults_dist = WeightedIndex::new(&config.adults_weights).expect("validated weights");
    let children_dist = WeightedIndex::new(&config.children_weights).expect("validated weights");
    let name_dists = |table: &[Vec<f64>]| -> Vec<WeightedIndex<f64>> {
        table
            .iter()
            .map(|col| WeightedIndex::new(col).expect("validated name table"))
            .collect()
    };
    let surname_dist = name_dists(&names.surname_given_race);
    let first_dist = name_dists(&names.first_given_race);
    let middle_dist = name_dists(&names.middle_given_race);

    let mut rng = rng::stream(seed, "synth_pop/households", 0);
    let mut households = Vec::new();
    let mut persons = Vec::new();
    let hpb = &config.households_per_block;
    for (geo, mixture) in geography.blocks.iter().zip(&mixtures) {
        let race_dist = WeightedIndex::new(mixture).map_err(|e| {
            Error::config("race_mixture", format!("block {}: {e}", geo.block_id))
        })?;
        let n_households = rng.random_range(hpb.min..=hpb.max);
        for _ in 0..n_households {
            let (n_adults, n_children) = loop {
                let a = adults_dist.sample(&mut rng) as u32;
                let c = children_dist.sample(&mut rng) as u32;
                if a + c > 0 {
                    break (a, c);
                }
            };
            let household_id = households.len() as HouseholdId;
            households.push(Household {
                household_id,
                block_id: geo.block_id,
                n_adults,
                n_children,
            });
            for k in 0..n_adults + n_children {
                let race = Race::from_index(race_dist.sample(&mut rng)).expect("5 weights");
                let r = race.index();
                let surname_id = surname_dist[r].sample(&mut rng) as u32;
                let first_name_id = first_dist[r].sample(&mut rng) as u32;
                let middle_name_id = rng
                    .random_bool(config.middle_name_rate)
                    .then(|| middle_dist[r].sample(&mut rng) as u32);
                persons.push(Person {
                    person_id: persons.len() as PersonId,
                    household_id,
                    race,
                    is_adult: k < n_adults,
                    surname_id,
                    first_name_id,
                    middle_name_id,
                });
            }
        }
    }
    Microdata::new(geography, names, households, persons)
}

fn dirichlet<R: Rng + ?Sized>(rng: &mut R, alpha: &[f64]) -> Vec<f64> {
    loop {
        let draws: Vec<f64> = alpha
            .iter()
            .map(|&a| Gamma::new(a, 1.0).expect("positive shape").sample(rng))
            .collect();
        let total: f64 = draws.iter().sum();
        if total > 0.0 && total.is_finite() {
            let mut p: Vec<f64> = draws.iter().map(|d| d / total).collect();
            // renormalize once more so the column sums to 1 within float rounding
            let s: f64 = p.iter().sum();
            p.iter_mut().for_each(|x| *x /= s);
            return p;
        }
    }
}

fn check_distribution(field: &str, p: &[f64], len: usize) -> Result<()> {
    if p.len() != len {
        return Err(Error::config(
            field,
            format!("expected {len} entries, found {}", p.len()),
        ));
    }
    if p.iter().any(|x| !x.is_finite() || *x < 0.0) {
        return Err(Error::config(field, "entries must be finite and non-negative"));
    }
    let s: f64 = p.iter().sum();
    if (s - 1.0).abs() > NORMALIZATION_TOL {
        return Err(Error::config(field, format!("sums to {s}, not 1")));
    }
    Ok(())
}

fn check_weights(field: &str, w: &[f64]) -> Result<()> {
    if w.is_empty() || w.iter().any(|x| !x.is_finite() || *x < 0.0) || w.iter().sum::<f64>() <= 0.0 {
        return Err(Error::config(
            field,
            "weights must be non-empty, non-negative and not all zero",
        ));
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Voter file

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct VoterRecord {
    pub person_id: PersonId,
    pub block_id: BlockId,
    pub surname_id: u32,
    pub first_name_id: u32,
    pub middle_name_id: Option<u32>,
    pub true_race: Race,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct VoterFile {
    pub records: Vec<VoterRecord>,
}

/// Registers each adult independently with probability `registration_rate`.
pub fn extract_voter_file(md: &Microdata, registration_rate: f64, seed: u64) -> Result<VoterFile> {
    if !(0.0..=1.0).contains(&registration_rate) {
        return Err(Error::config(
            "registration_rate",
            format!("{registration_rate} is outside [0, 1]"),
        ));
    }
    let blocks = md.household_blocks();
    let mut rng = rng::stream(seed, "synth_pop/voters", 0);
    let records = md
        .persons
        .iter()
        .filter(|p| p.is_adult)
        .filter(|_| rng.random_bool(registration_rate))
        .map(|p| VoterRecord {
            person_id: p.person_id,
            block_id: blocks[&p.household_id],
            surname_id: p.surname_id,
            first_name_id: p.first_name_id,
            middle_name_id: p.middle_name_id,
            true_race: p.race,
        })
        .collect();
    Ok(VoterFile { records })
}

// ---------------------------------------------------------------------------
// Persistence

pub const HOUSEHOLDS_FILE: &str = "households.csv";
pub const PERSONS_FILE: &str = "persons.csv";
pub const GEOGRAPHY_FILE: &str = "geography.json";
pub const NAMES_FILE: &str = "names.json";

pub fn save_microdata(md: &Microdata, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    write_json(&dir.join(GEOGRAPHY_FILE), &md.geography)?;
    md.names.save_json(&dir.join(NAMES_FILE))?;

    let path = dir.join(HOUSEHOLDS_FILE);
    let mut w = csv_writer(&path)?;
    write_row(&path, &mut w, ["household_id", "block_id", "n_adults", "n_children"])?;
    for h in &md.households {
        write_row(
            &path,
            &mut w,
            &[
                h.household_id.to_string(),
                h.block_id.to_string(),
                h.n_adults.to_string(),
                h.n_children.to_string(),
            ],
        )?;
    }
    flush(&path, w)?;

    let path = dir.join(PERSONS_FILE);
    let mut w = csv_writer(&path)?;
    write_row(
        &path,
        &mut w,
        [
            "person_id",
            "household_id",
            "race",
            "is_adult",
            "surname_id",
            "first_name_id",
            "middle_name_id",
        ],
    )?;
    for p in &md.persons {
        write_row(
            &path,
            &mut w,
            &[
                p.person_id.to_string(),
                p.household_id.to_string(),
                p.race.index().to_string(),
                u8::from(p.is_adult).to_string(),
                p.surname_id.to_string(),
                p.first_name_id.to_string(),
                p.middle_name_id.map(|m| m.to_string()).unwrap_or_default(),
            ],
        )?;
    }
    flush(&path, w)
}

pub fn load_microdata(dir: &Path) -> Result<Microdata> {
    let geography: Geography = read_json(&dir.join(GEOGRAPHY_FILE))?;
    let names = NameModel::load_json(&dir.join(NAMES_FILE))?;

    let path = dir.join(HOUSEHOLDS_FILE);
    let households = read_rows(&path, 4, |row| {
        Ok(Household {
            household_id: row.int(0)?,
            block_id: row.int(1)?,
            n_adults: row.int(2)?,
            n_children: row.int(3)?,
        })
    })?;
    let path = dir.join(PERSONS_FILE);
    let persons = read_rows(&path, 7, |row| {
        Ok(Person {
            person_id: row.int(0)?,
            household_id: row.int(1)?,
            race: row.race(2)?,
            is_adult: row.flag(3)?,
            surname_id: row.int(4)?,
            first_name_id: row.int(5)?,
            middle_name_id: row.opt_int(6)?,
        })
    })?;
    Microdata::new(geography, names, households, persons)
}

impl VoterFile {
    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let mut w = csv_writer(path)?;
        write_row(
            path,
            &mut w,
            [
                "person_id",
                "block_id",
                "surname_id",
                "first_name_id",
                "middle_name_id",
                "true_race",
            ],
        )?;
        for v in &self.records {
            write_row(
                path,
                &mut w,
                &[
                    v.person_id.to_string(),
                    v.block_id.to_string(),
                    v.surname_id.to_string(),
                    v.first_name_id.to_string(),
                    v.middle_name_id.map(|m| m.to_string()).unwrap_or_default(),
                    v.true_race.index().to_string(),
                ],
            )?;
        }
        flush(path, w)
    }

    pub fn load_csv(path: &Path) -> Result<VoterFile> {
        let records = read_rows(path, 6, |row| {
            Ok(VoterRecord {
                person_id: row.int(0)?,
                block_id: row.int(1)?,
                surname_id: row.int(2)?,
                first_name_id: row.int(3)?,
                middle_name_id: row.opt_int(4)?,
                true_race: row.race(5)?,
            })
        })?;
        Ok(VoterFile { records })
    }
}

// ---------------------------------------------------------------------------
// CSV / JSON helpers shared by the other modules.

pub(crate) fn csv_writer(path: &Path) -> Result<csv::Writer<File>> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(file))
}

pub(crate) fn write_row<I, S>(path: &Path, w: &mut csv::Writer<File>, row: I) -> Result<()>
where
    I: IntoIterator<Item = S>,
    S: AsRef<[u8]>,
{
    w.write_record(row).map_err(|e| csv_io(path, e))
}

pub(crate) fn flush(path: &Path, mut w: csv::Writer<File>) -> Result<()> {
    w.flush().map_err(|e| Error::io(path, e))
}

fn csv_io(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::parse(path, 0, format!("{other:?}")),
    }
}

/// One data row with its 1-based file line, for error reporting.
pub(crate) struct Row<'a> {
    path: &'a Path,
    line: u64,
    record: &'a csv::StringRecord,
}

impl Row<'_> {
    pub fn field(&self, i: usize) -> &str {
        self.record.get(i).unwrap_or("").trim()
    }

    pub fn err(&self, i: usize, msg: impl std::fmt::Display) -> Error {
        Error::parse(self.path, self.line, format!("column {}: {msg}", i + 1))
    }

    pub fn int<T: std::str::FromStr>(&self, i: usize) -> Result<T>
    where
        T::Err: std::fmt::Display,
    {
        self.field(i)
            .parse()
            .map_err(|e| self.err(i, format!("`{}`: {e}", self.field(i))))
    }

    pub fn opt_int<T: std::str::FromStr>(&self, i: usize) -> Result<Option<T>>
    where
        T::Err: std::fmt::Display,
    {
        if self.field(i).is_empty() {
            Ok(None)
        } else {
            self.int(i).map(Some)
        }
    }

    pub fn real(&self, i: usize) -> Result<f64> {
        self.int::<f64>(i)
    }

    pub fn flag(&self, i: usize) -> Result<bool> {
        match self.field(i) {
            "1" | "true" => Ok(true),
            "0" | "false" => Ok(false),
            other => Err(self.err(i, format!("`{other}` is not a boolean"))),
        }
    }

    pub fn race(&self, i: usize) -> Result<Race> {
        self.field(i)
            .parse()
            .map_err(|_| self.err(i, format!("`{}` is not a race code", self.field(i))))
    }
}

/// Reads a headered CSV with exactly `width` columns per row.
pub(crate) fn read_rows<T>(
    path: &Path,
    width: usize,
    mut parse: impl FnMut(&Row<'_>) -> Result<T>,
) -> Result<Vec<T>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(file);
    let header = reader
        .headers()
        .map_err(|e| Error::parse(path, 1, e.to_string()))?
        .clone();
    if header.len() != width {
        return Err(Error::parse(
            path,
            1,
            format!("expected {width} header columns, found {}", header.len()),
        ));
    }
    let mut out = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let fallback_line = i as u64 + 2;
        let record = record.map_err(|e| {
            let line = e.position().map_or(fallback_line, |p| p.line());
            Error::parse(path, line, e.to_string())
        })?;
        let line = record.position().map_or(fallback_line, |p| p.line());
        if record.len() != width {
            return Err(Error::parse(
                path,
                line,
                format!("expected {width} columns, found {}", record.len()),
            ));
        }
        out.push(parse(&Row {
            path,
            line,
            record: &record,
        })?);
    }
    Ok(out)
}

pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).map_err(|e| Error::io(parent, e))?;
    }
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Json {
        path: path.into(),
        source: e,
    })?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

pub(crate) fn read_json<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    serde_json::from_str(&text).map_err(|e| Error::parse(path, e.line() as u64, e.to_string()))
}

/// Per-block population summary, handy for tests and reports.
pub fn block_population(md: &Microdata) -> BTreeMap<BlockId, (u64, u64)> {
    let mut out: BTreeMap<BlockId, (u64, u64)> =
        md.geography.block_ids().map(|b| (b, (0, 0))).collect();
    for h in &md.households {
        let e = out.entry(h.block_id).or_default();
        e.0 += u64::from(h.size());
        e.1 += u64::from(h.n_adults);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_household_config() -> GenerationConfig {
        GenerationConfig {
            geography: GeographyConfig {
                counties: 1,
                tracts_per_county: 1,
                blocks_per_tract: 1,
            },
            households_per_block: HouseholdsPerBlock { min: 1, max: 1 },
            adults_weights: vec![0.0, 0.0, 1.0],
            children_weights: vec![1.0],
            ..GenerationConfig::default()
        }
    }

    #[test]
    fn forced_single_household() {
        let md = generate_population(&one_household_config(), 7).unwrap();
        assert_eq!(md.persons.len(), 2);
        assert_eq!(md.households.len(), 1);
        assert_eq!(md.households[0].block_id, 0);
        assert!(md.persons.iter().all(|p| p.is_adult && p.household_id == 0));
    }

    #[test]
    fn generation_is_deterministic() {
        let cfg = GenerationConfig::default();
        let a = generate_population(&cfg, 11).unwrap();
        let b = generate_population(&cfg, 11).unwrap();
        assert_eq!(a, b);
        let c = generate_population(&cfg, 12).unwrap();
        assert_ne!(a.persons, c.persons);
    }

    #[test]
    fn household_counts_add_up() {
        let md = generate_population(&GenerationConfig::default(), 3).unwrap();
        let total: u32 = md.households.iter().map(Household::size).sum();
        assert_eq!(total as usize, md.persons.len());
    }

    #[test]
    fn config_errors_name_the_field() {
        let mut cfg = GenerationConfig::default();
        cfg.geography.blocks_per_tract = 0;
        let e = generate_population(&cfg, 1).unwrap_err();
        assert!(e.to_string().contains("geography.blocks_per_tract"), "{e}");

        let mut cfg = GenerationConfig::default();
        cfg.race_mixture = RaceMixture::Explicit {
            mixtures: vec![vec![0.5, 0.5, 0.5, 0.0, 0.0]],
        };
        let e = generate_population(&cfg, 1).unwrap_err();
        assert!(e.to_string().contains("race_mixture.mixtures[0]"), "{e}");

        let mut cfg = GenerationConfig::default();
        cfg.adults_weights = vec![1.0];
        cfg.children_weights = vec![1.0, 0.0];
        assert!(generate_population(&cfg, 1).unwrap_err().is_config());
    }

    #[test]
    fn demo_and_synthetic_name_models_are_normalized() {
        NameModel::demo().validate().unwrap();
        let nm = NameModel::synthetic(&SyntheticNames::default(), [0.2; 5], 5).unwrap();
        assert_eq!(nm.vocabulary_size(NamePart::Surname), 200);
        assert_eq!(nm.vocabulary_size(NamePart::First), 100);
        assert_eq!(nm.vocabulary_size(NamePart::Middle), 50);
    }

    #[test]
    fn voter_file_boundaries() {
        let md = generate_population(&GenerationConfig::default(), 5).unwrap();
        let all = extract_voter_file(&md, 1.0, 1).unwrap();
        assert_eq!(all.records.len(), md.n_adults());
        let blocks = md.household_blocks();
        for v in &all.records {
            let p = &md.persons[v.person_id as usize];
            assert!(p.is_adult);
            assert_eq!(v.true_race, p.race);
            assert_eq!(v.block_id, blocks[&p.household_id]);
        }
        assert!(extract_voter_file(&md, 0.0, 1).unwrap().records.is_empty());
        assert!(extract_voter_file(&md, 1.5, 1).unwrap_err().is_config());
        assert!(extract_voter_file(&md, -0.1, 1).unwrap_err().is_config());
        assert_eq!(
            extract_voter_file(&md, 0.5, 9).unwrap(),
            extract_voter_file(&md, 0.5, 9).unwrap()
        );
    }
}
