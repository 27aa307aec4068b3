//! Bayesian Improved Surname Geocoding.
//!
//! A name-only prior `Pr(race | names)` is formed from the national race prior
//! and race-conditional name frequencies (names independent given race), then
//! updated with the released block tables through the geography likelihood
//!
//! ```text
//! g(block | r) = (count(r, block) + λ) / (count(r, state) + λ · blocks_in_state)
//! ```
//!
//! The denominator is the sum of the smoothed block counts over the state, so
//! `g(· | r)` is a distribution over blocks for every race.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::par::Execution;
use crate::race::{Race, RaceVec, N_RACES};
use crate::synth_pop::{
    csv_writer, flush, read_rows, write_row, BlockId, NameModel, NamePart, PersonId, VoterRecord,
};
use crate::tabulate::{Population, TabulationSet};

/// Which name parts enter the prior.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum NameParts {
    Last,
    FirstLast,
    FirstMiddleLast,
}

impl NameParts {
    pub const ALL: [NameParts; 3] = [
        NameParts::Last,
        NameParts::FirstLast,
        NameParts::FirstMiddleLast,
    ];

    pub fn label(self) -> &'static str {
        match self {
            NameParts::Last => "Only last names",
            NameParts::FirstLast => "First and last names",
            NameParts::FirstMiddleLast => "First, middle, and last names",
        }
    }

    pub fn key(self) -> &'static str {
        match self {
            NameParts::Last => "last",
            NameParts::FirstLast => "first_last",
            NameParts::FirstMiddleLast => "first_middle_last",
        }
    }

    pub fn uses_first(self) -> bool {
        self != NameParts::Last
    }

    pub fn uses_middle(self) -> bool {
        self == NameParts::FirstMiddleLast
    }
}

impl fmt::Display for NameParts {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.key())
    }
}

impl FromStr for NameParts {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        NameParts::ALL
            .into_iter()
            .find(|p| p.key() == s)
            .ok_or_else(|| {
                Error::config(
                    "name_parts",
                    format!("`{s}` is not one of last, first_last, first_middle_last"),
                )
            })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BisgSettings {
    /// Additive smoothing per block cell.
    pub lambda: f64,
    pub population: Population,
}

impl Default for BisgSettings {
    fn default() -> Self {
        BisgSettings {
            lambda: 0.5,
            population: Population::Vap,
        }
    }
}

impl BisgSettings {
    pub fn validate(&self) -> Result<()> {
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            return Err(Error::config("bisg.lambda", "must be finite and non-negative"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NamePrior {
    pub probs: RaceVec<f64>,
    /// Some factor was skipped (unknown name id), or every likelihood vanished
    /// and the national prior was returned instead.
    pub flagged: bool,
}

pub fn name_prior(record: &VoterRecord, nm: &NameModel, parts: NameParts) -> NamePrior {
    let mut probs = nm.prior();
    let mut flagged = false;
    let mut factors = vec![(NamePart::Surname, Some(record.surname_id))];
    if parts.uses_first() {
        factors.push((NamePart::First, Some(record.first_name_id)));
    }
    if parts.uses_middle() {
        factors.push((NamePart::Middle, record.middle_name_id));
    }
    for (part, id) in factors {
        let Some(id) = id else { continue };
        if (id as usize) >= nm.vocabulary_size(part) {
            flagged = true;
            continue;
        }
        for r in Race::ALL {
            probs[r.index()] *= nm.likelihood(part, id, r).expect("id checked");
        }
    }
    match normalized(&probs) {
        Some(p) => NamePrior {
            probs: p.try_into().expect("5 entries"),
            flagged,
        },
        None => NamePrior {
            probs: nm.prior(),
            flagged: true,
        },
    }
}

/// Bayes update of `prior` with the smoothed geography likelihood, for any
/// number of races. `None` when no race keeps positive mass. A race with no
/// smoothed state mass gets likelihood 0.
pub fn geography_update(
    prior: &[f64],
    block_counts: &[f64],
    state_counts: &[f64],
    blocks_in_state: f64,
    lambda: f64,
) -> Option<Vec<f64>> {
    let weights: Vec<f64> = prior
        .iter()
        .zip(block_counts.iter().zip(state_counts))
        .map(|(&p, (&b, &s))| {
            let denom = s + lambda * blocks_in_state;
            if denom > 0.0 {
                p * (b + lambda) / denom
            } else {
                0.0
            }
        })
        .collect();
    normalized(&weights)
}

pub fn bisg_posterior(
    prior: &RaceVec<f64>,
    tab: &TabulationSet,
    block_id: BlockId,
    population: Population,
    lambda: f64,
) -> Result<RaceVec<f64>> {
    let block = tab
        .counts(block_id, population)
        .ok_or_else(|| Error::Contract(format!("block {block_id} is not in the tabulation")))?;
    let state = tab.state_of(block_id).expect("block has a state");
    let state_counts = match population {
        Population::Total => state.race_counts,
        Population::Vap => state.vap_race_counts,
    };
    let post = geography_update(
        prior,
        &block.map(|c| c as f64),
        &state_counts.map(|c| c as f64),
        state.n_blocks as f64,
        lambda,
    )
    .ok_or(Error::DegenerateGeography(block_id))?;
    let mut out = [0.0; N_RACES];
    out.copy_from_slice(&post);
    Ok(out)
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(p: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in p.iter().enumerate().skip(1) {
        if x > p[best] {
            best = i;
        }
    }
    best
}

pub fn classify_map(posterior: &RaceVec<f64>) -> Race {
    Race::from_index(argmax(posterior)).expect("5 entries")
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorRecord {
    pub person_id: PersonId,
    pub block_id: BlockId,
    /// Name-only prior, `Pr(Y_J)`.
    pub prior: RaceVec<f64>,
    /// `Pr(Y_J | D*, A)`; equals `prior` when no tables were used.
    pub posterior: RaceVec<f64>,
    pub map_race: Race,
    pub true_race: Option<Race>,
    pub flagged: bool,
}

/// Runs BISG for every voter. With `tab = None` the posterior is the
/// name-only prior (the "without census data" condition).
pub fn infer(
    voters: &[VoterRecord],
    nm: &NameModel,
    parts: NameParts,
    tab: Option<&TabulationSet>,
    settings: &BisgSettings,
) -> Result<Vec<PosteriorRecord>> {
    infer_with(Execution::default(), voters, nm, parts, tab, settings)
}

pub fn infer_with(
    exec: Execution,
    voters: &[VoterRecord],
    nm: &NameModel,
    parts: NameParts,
    tab: Option<&TabulationSet>,
    settings: &BisgSettings,
) -> Result<Vec<PosteriorRecord>> {
    settings.validate()?;
    exec.map(voters, |v| {
        let prior = name_prior(v, nm, parts);
        let posterior = match tab {
            Some(t) => bisg_posterior(&prior.probs, t, v.block_id, settings.population, settings.lambda)?,
            None => prior.probs,
        };
        Ok(PosteriorRecord {
            person_id: v.person_id,
            block_id: v.block_id,
            prior: prior.probs,
            posterior,
            map_race: classify_map(&posterior),
            true_race: Some(v.true_race),
            flagged: prior.flagged,
        })
    })
    .into_iter()
    .collect()
}

/// Share of records whose MAP race differs from the true race.
pub fn error_rate(records: &[PosteriorRecord]) -> Result<f64> {
    if records.is_empty() {
        return Err(Error::UndefinedStatistic(
            "error rate of an empty record set".into(),
        ));
    }
    let mut wrong = 0usize;
    for r in records {
        let truth = r.true_race.ok_or_else(|| {
            Error::Contract(format!("record {} has no true race", r.person_id))
        })?;
        if truth != r.map_race {
            wrong += 1;
        }
    }
    Ok(wrong as f64 / records.len() as f64)
}

pub fn save_posteriors(records: &[PosteriorRecord], path: &Path) -> Result<()> {
    let mut w = csv_writer(path)?;
    let mut header = vec!["person_id".to_string(), "block_id".to_string()];
    header.extend(Race::ALL.iter().map(|r| format!("prior_{r}")));
    header.extend(Race::ALL.iter().map(|r| format!("posterior_{r}")));
    header.extend(["map_race", "true_race", "flagged"].map(String::from));
    write_row(path, &mut w, &header)?;
    for rec in records {
        let mut row = vec![rec.person_id.to_string(), rec.block_id.to_string()];
        row.extend(rec.prior.iter().map(f64::to_string));
        row.extend(rec.posterior.iter().map(f64::to_string));
        row.push(rec.map_race.index().to_string());
        row.push(rec.true_race.map(|r| r.index().to_string()).unwrap_or_default());
        row.push(u8::from(rec.flagged).to_string());
        write_row(path, &mut w, &row)?;
    }
    flush(path, w)
}

pub fn load_posteriors(path: &Path) -> Result<Vec<PosteriorRecord>> {
    read_rows(path, 5 + 2 * N_RACES, |row| {
        let mut prior = [0.0; N_RACES];
        let mut posterior = [0.0; N_RACES];
        for r in 0..N_RACES {
            prior[r] = row.real(2 + r)?;
            posterior[r] = row.real(2 + N_RACES + r)?;
        }
        let base = 2 + 2 * N_RACES;
        Ok(PosteriorRecord {
            person_id: row.int(0)?,
            block_id: row.int(1)?,
            prior,
            posterior,
            map_race: row.race(base)?,
            true_race: if row.field(base + 1).is_empty() {
                None
            } else {
                Some(row.race(base + 1)?)
            },
            flagged: row.flag(base + 2)?,
        })
    })
}

fn normalized(w: &[f64]) -> Option<Vec<f64>> {
    let s: f64 = w.iter().sum();
    (s > 0.0 && s.is_finite()).then(|| w.iter().map(|x| x / s).collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_pop::{Geography, GeographyConfig};
    use crate::tabulate::BlockTable;

    fn voter(surname: u32, first: u32, middle: Option<u32>) -> VoterRecord {
        VoterRecord {
            person_id: 0,
            block_id: 0,
            surname_id: surname,
            first_name_id: first,
            middle_name_id: middle,
            true_race: Race::White,
        }
    }

    #[test]
    fn surname_exclusive_to_one_race() {
        let mut nm = NameModel::demo();
        for r in 0..N_RACES {
            nm.surname_given_race[r] = if r == 1 {
                vec![0.5, 0.5, 0.0, 0.0, 0.0]
            } else {
                vec![0.0, 0.0, 0.4, 0.3, 0.3]
            };
        }
        let p = name_prior(&voter(0, 0, None), &nm, NameParts::Last);
        assert_eq!(p.probs, [0.0, 1.0, 0.0, 0.0, 0.0]);
        assert!(!p.flagged);
    }

    #[test]
    fn uniform_everything_gives_uniform_prior() {
        let mut nm = NameModel::demo();
        nm.national_race_prior = vec![0.2; 5];
        for r in 0..N_RACES {
            nm.surname_given_race[r] = vec![0.2; 5];
        }
        let p = name_prior(&voter(3, 0, None), &nm, NameParts::Last);
        for x in p.probs {
            assert!((x - 0.2).abs() < 1e-15);
        }
    }

    #[test]
    fn demo_table_matches_hand_bayes() {
        // GARCIA (surname 0) with first name 2
        let nm = NameModel::demo();
        let p = name_prior(&voter(0, 2, Some(1)), &nm, NameParts::FirstLast);
        let prior = [0.60, 0.13, 0.18, 0.06, 0.03];
        let sur = [0.05, 0.05, 0.80, 0.04, 0.10];
        let first = [0.20, 0.20, 0.60, 0.10, 0.25];
        let w: Vec<f64> = (0..5).map(|r| prior[r] * sur[r] * first[r]).collect();
        let s: f64 = w.iter().sum();
        for r in 0..5 {
            assert!((p.probs[r] - w[r] / s).abs() < 1e-12);
        }
    }

    #[test]
    fn unknown_name_is_skipped_and_flagged() {
        let nm = NameModel::demo();
        let p = name_prior(&voter(0, 99, None), &nm, NameParts::FirstLast);
        let q = name_prior(&voter(0, 99, None), &nm, NameParts::Last);
        assert!(p.flagged);
        assert!(!q.flagged);
        assert_eq!(p.probs, q.probs);
        // a missing middle name is not an unknown name
        assert!(!name_prior(&voter(0, 1, None), &nm, NameParts::FirstMiddleLast).flagged);
    }

    #[test]
    fn two_race_hand_example() {
        let post = geography_update(&[0.5, 0.5], &[90.0, 10.0], &[100.0, 100.0], 2.0, 0.0).unwrap();
        assert!((post[0] - 0.9).abs() < 1e-15 && (post[1] - 0.1).abs() < 1e-15);
        assert_eq!(argmax(&post), 0);
    }

    fn table(counts: &[[u64; 5]]) -> TabulationSet {
        let geo = Geography::from_config(&GeographyConfig {
            counties: 1,
            tracts_per_county: 1,
            blocks_per_tract: counts.len() as u32,
        })
        .unwrap();
        let blocks = counts
            .iter()
            .enumerate()
            .map(|(i, c)| BlockTable {
                block_id: i as u32,
                race_counts: *c,
                vap_race_counts: *c,
                n_households: 1,
            })
            .collect();
        TabulationSet::from_blocks(geo, blocks).unwrap()
    }

    #[test]
    fn proportional_block_leaves_prior_unchanged() {
        let t = table(&[[10, 20, 30, 5, 5], [20, 40, 60, 10, 10]]);
        let prior = [0.1, 0.2, 0.3, 0.25, 0.15];
        let post = bisg_posterior(&prior, &t, 1, Population::Vap, 0.0).unwrap();
        for r in 0..5 {
            assert!((post[r] - prior[r]).abs() < 1e-12);
        }
        let point = [0.0, 0.0, 1.0, 0.0, 0.0];
        assert_eq!(
            bisg_posterior(&point, &t, 0, Population::Total, 0.5).unwrap(),
            point
        );
    }

    #[test]
    fn degenerate_and_missing_blocks() {
        let t = table(&[[0, 5, 0, 0, 0], [0, 5, 0, 0, 0]]);
        let prior = [1.0, 0.0, 0.0, 0.0, 0.0];
        assert!(matches!(
            bisg_posterior(&prior, &t, 0, Population::Vap, 0.0),
            Err(Error::DegenerateGeography(0))
        ));
        assert!(bisg_posterior(&prior, &t, 0, Population::Vap, 0.5).is_ok());
        assert!(matches!(
            bisg_posterior(&prior, &t, 7, Population::Vap, 0.5),
            Err(Error::Contract(_))
        ));
    }

    #[test]
    fn map_classification() {
        assert_eq!(classify_map(&[0.1, 0.7, 0.1, 0.05, 0.05]), Race::Black);
        assert_eq!(classify_map(&[0.5, 0.5, 0.0, 0.0, 0.0]), Race::White);
        let p = [0.1, 0.3, 0.3, 0.2, 0.1];
        assert_eq!(classify_map(&p), classify_map(&p.map(|x| x * 17.5)));
    }

    #[test]
    fn error_rate_bounds() {
        let rec = |map: Race, truth: Race| PosteriorRecord {
            person_id: 0,
            block_id: 0,
            prior: [0.2; 5],
            posterior: [0.2; 5],
            map_race: map,
            true_race: Some(truth),
            flagged: false,
        };
        assert_eq!(error_rate(&[rec(Race::White, Race::White); 3]).unwrap(), 0.0);
        assert_eq!(error_rate(&[rec(Race::Black, Race::White); 3]).unwrap(), 1.0);
        assert!(matches!(error_rate(&[]), Err(Error::UndefinedStatistic(_))));
        let mut r = rec(Race::White, Race::White);
        r.true_race = None;
        assert!(matches!(error_rate(&[r]), Err(Error::Contract(_))));
    }
}
