//! End-to-end driver: generate → tabulate → {swap | dp} → bisg → risk → policy.
//!
//! One TOML document configures every stage. The master seed is handed to
//! each stage unchanged; stages draw from their own named RNG domains, so a
//! run equals the composition of the stages invoked one by one with that
//! seed. Noise draws for different epsilons share their uniforms, which
//! keeps comparisons across the sweep low-variance.

use std::path::{Path, PathBuf};
use std::time::{Instant, SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::bisg::{infer, save_posteriors, BisgSettings, NameParts, PosteriorRecord};
use crate::dp_das::{apply_dp_das, Allocation, PrivacyBudget, DEFAULT_EPSILON, MECHANISM_VERSION};
use crate::error::{Error, Result};
use crate::par::{self, Execution};
use crate::policy_eval::{evaluate_plans, generate_plans, save_plans, Condition, PlanSettings};
use crate::risk::{build_risk_report, mechanism_bound_check, standard_tiny_instances, MethodPosteriors, ReleasedTables};
use crate::rng::RNG_VERSION;
use crate::swap::{apply_swapping, Scope, SwapConfig};
use crate::synth_pop::{extract_voter_file, generate_population, save_microdata, GenerationConfig, VoterFile};
use crate::tabulate::{tabulate, Population, TabulationSet};

pub const ENV_OUT: &str = "DASEVAL_OUT";
pub const ENV_THREADS: &str = "DASEVAL_THREADS";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SwapSettings {
    pub swap_rate: f64,
    #[serde(default)]
    pub pairing_scope: Scope,
}

impl Default for SwapSettings {
    fn default() -> Self {
        SwapSettings {
            swap_rate: 0.05,
            pairing_scope: Scope::County,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DpSettings {
    /// One dp data condition per value.
    pub epsilons: Vec<f64>,
    pub allocation: Allocation,
    /// Budget whose `exp` bound is quoted next to the swapped and confidential
    /// risk reports.
    pub report_epsilon: f64,
}

impl Default for DpSettings {
    fn default() -> Self {
        DpSettings {
            epsilons: vec![0.25, 1.0, 4.0, DEFAULT_EPSILON],
            allocation: Allocation::default(),
            report_epsilon: DEFAULT_EPSILON,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BisgRunSettings {
    pub name_parts: Vec<NameParts>,
    pub lambda: f64,
    pub population: Population,
}

impl Default for BisgRunSettings {
    fn default() -> Self {
        let s = BisgSettings::default();
        BisgRunSettings {
            name_parts: NameParts::ALL.to_vec(),
            lambda: s.lambda,
            population: s.population,
        }
    }
}

impl BisgRunSettings {
    pub fn settings(&self) -> BisgSettings {
        BisgSettings {
            lambda: self.lambda,
            population: self.population,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RiskSettings {
    /// Attach the brute-force mechanism-aware bound check to dp reports.
    pub mechanism_check: bool,
}

impl Default for RiskSettings {
    fn default() -> Self {
        RiskSettings { mechanism_check: true }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PolicySettings {
    pub n_plans: usize,
    pub n_districts: u32,
    /// Plans are drawn until their deviation under the confidential table is
    /// at most this.
    pub balance_tolerance: f64,
    pub thresholds: Vec<f64>,
}

impl Default for PolicySettings {
    fn default() -> Self {
        PolicySettings {
            n_plans: 100,
            n_districts: 5,
            balance_tolerance: 0.05,
            thresholds: vec![0.0, 0.10],
        }
    }
}

impl PolicySettings {
    pub fn plans(&self) -> PlanSettings {
        PlanSettings {
            n_plans: self.n_plans,
            n_districts: self.n_districts,
            balance_tolerance: self.balance_tolerance,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Worker threads; 0 lets rayon decide. Does not affect results.
    pub threads: usize,
    pub registration_rate: f64,
    pub generation: GenerationConfig,
    pub swap: SwapSettings,
    pub dp: DpSettings,
    pub bisg: BisgRunSettings,
    pub risk: RiskSettings,
    pub policy: PolicySettings,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 2020,
            output_dir: PathBuf::from("out"),
            threads: 0,
            registration_rate: 0.7,
            generation: GenerationConfig::default(),
            swap: SwapSettings::default(),
            dp: DpSettings::default(),
            bisg: BisgRunSettings::default(),
            risk: RiskSettings::default(),
            policy: PolicySettings::default(),
        }
    }
}

/// Command-line overrides, applied after the environment.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub output_dir: Option<PathBuf>,
    pub threads: Option<usize>,
    pub epsilons: Vec<f64>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<RunConfig> {
        toml::from_str(text).map_err(|e| Error::config("config", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<RunConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config {
            field: path.display().to_string(),
            message: e.to_string(),
        })
    }

    /// `DASEVAL_OUT` and `DASEVAL_THREADS`; nothing science-bearing.
    pub fn apply_env(&mut self) -> Result<()> {
        if let Ok(out) = std::env::var(ENV_OUT) {
            self.output_dir = PathBuf::from(out);
        }
        if let Ok(t) = std::env::var(ENV_THREADS) {
            self.threads = t
                .parse()
                .map_err(|_| Error::config(ENV_THREADS, format!("`{t}` is not a thread count")))?;
        }
        Ok(())
    }

    pub fn apply(&mut self, o: &Overrides) {
        if let Some(s) = o.seed {
            self.seed = s;
        }
        if let Some(d) = &o.output_dir {
            self.output_dir = d.clone();
        }
        if let Some(t) = o.threads {
            self.threads = t;
        }
        if !o.epsilons.is_empty() {
            self.dp.epsilons = o.epsilons.clone();
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.generation.validate()?;
        if !(0.0..=1.0).contains(&self.registration_rate) {
            return Err(Error::config("registration_rate", "must lie in [0, 1]"));
        }
        self.swap_config().validate()?;
        if self.dp.epsilons.is_empty() {
            return Err(Error::config("dp.epsilons", "at least one epsilon is required"));
        }
        for &e in &self.dp.epsilons {
            self.budget(e).map_err(|_| {
                Error::config("dp.epsilons", format!("{e} is not a positive finite epsilon"))
            })?;
        }
        self.budget(self.dp.report_epsilon)
            .map_err(|_| Error::config("dp.report_epsilon", "must be positive and finite"))?;
        if self.bisg.name_parts.is_empty() {
            return Err(Error::config("bisg.name_parts", "at least one method is required"));
        }
        self.bisg.settings().validate()?;
        let n_blocks = crate::synth_pop::Geography::from_config(&self.generation.geography)?.n_blocks();
        self.policy.plans().validate(n_blocks)?;
        if self.policy.n_plans == 0 {
            return Err(Error::config("policy.n_plans", "must be positive"));
        }
        if self.policy.thresholds.iter().any(|t| t.is_nan() || *t < 0.0) {
            return Err(Error::config("policy.thresholds", "must be non-negative"));
        }
        Ok(())
    }

    pub fn swap_config(&self) -> SwapConfig {
        SwapConfig {
            swap_rate: self.swap.swap_rate,
            pairing_scope: self.swap.pairing_scope,
            seed: self.seed,
        }
    }

    pub fn budget(&self, epsilon: f64) -> Result<PrivacyBudget> {
        let b = PrivacyBudget {
            epsilon_total: epsilon,
            allocation: self.dp.allocation,
        };
        b.validate()?;
        Ok(b)
    }

    /// sha256 of the canonical JSON of every output-determining field.
    /// `output_dir` and `threads` are excluded: they never change results.
    pub fn config_hash(&self) -> String {
        let mut c = self.clone();
        c.output_dir = PathBuf::new();
        c.threads = 0;
        let json = serde_json::to_string(&c).expect("config serializes");
        format!("{:x}", Sha256::digest(json.as_bytes()))
    }
}

/// `dp_eps_<ε>` using the shortest round-trip form of ε.
pub fn dp_condition_name(epsilon: f64) -> String {
    format!("dp_eps_{epsilon}")
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Artifact {
    pub kind: String,
    /// Relative to the output directory.
    pub path: PathBuf,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageFailure {
    pub stage: String,
    pub cause: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineManifest {
    pub crate_version: String,
    pub config_hash: String,
    pub seed: u64,
    pub mechanism_version: String,
    pub rng_version: String,
    pub started_unix: f64,
    pub finished_unix: f64,
    pub complete: bool,
    pub failure: Option<StageFailure>,
    pub stages: Vec<StageRecord>,
    pub artifacts: Vec<Artifact>,
}

impl PipelineManifest {
    pub fn load(dir: &Path) -> Result<PipelineManifest> {
        crate::synth_pop::read_json(&dir.join(MANIFEST_FILE))
    }

    pub fn artifact(&self, kind: &str) -> Option<&Artifact> {
        self.artifacts.iter().find(|a| a.kind == kind)
    }
}

fn unix_now() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs_f64())
        .unwrap_or(0.0)
}

struct Run<'a> {
    cfg: &'a RunConfig,
    out: PathBuf,
    manifest: PipelineManifest,
}

impl Run<'_> {
    fn stage<T>(&mut self, name: &str, f: impl FnOnce(&mut Self) -> Result<T>) -> Result<T> {
        let t = Instant::now();
        let r = f(self);
        self.manifest.stages.push(StageRecord {
            stage: name.into(),
            seconds: t.elapsed().as_secs_f64(),
        });
        r.map_err(|e| Error::stage(name, e))
    }

    fn record(&mut self, kind: impl Into<String>, rel: impl Into<PathBuf>) -> Result<()> {
        let rel = rel.into();
        let path = self.out.join(&rel);
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        self.manifest.artifacts.push(Artifact {
            kind: kind.into(),
            path: rel,
            sha256: format!("{:x}", Sha256::digest(&bytes)),
        });
        Ok(())
    }

    fn write_text(&mut self, kind: &str, rel: &str, text: &str) -> Result<()> {
        let path = self.out.join(rel);
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))?;
        self.record(kind, rel)
    }

    fn save_manifest(&self) -> Result<()> {
        crate::synth_pop::write_json(&self.out.join(MANIFEST_FILE), &self.manifest)
    }
}

/// Loads, overrides, validates and runs. Config errors surface before any
/// stage runs and before anything is written.
pub fn run_pipeline_from_path(config_path: &Path, overrides: &Overrides) -> Result<PipelineManifest> {
    let mut cfg = RunConfig::load(config_path)?;
    cfg.apply_env()?;
    cfg.apply(overrides);
    run_pipeline(&cfg)
}

/// Runs every stage for every data condition and writes the manifest. On a
/// stage failure the partial artifacts stay on disk, the manifest records
/// the failing stage with `complete = false`, and the error names the stage.
pub fn run_pipeline(cfg: &RunConfig) -> Result<PipelineManifest> {
    cfg.validate()?;
    let out = cfg.output_dir.clone();
    for sub in ["", "microdata", "tables", "posteriors", "reports"] {
        let d = out.join(sub);
        std::fs::create_dir_all(&d).map_err(|e| Error::io(&d, e))?;
    }
    let mut run = Run {
        cfg,
        out,
        manifest: PipelineManifest {
            crate_version: env!("CARGO_PKG_VERSION").into(),
            config_hash: cfg.config_hash(),
            seed: cfg.seed,
            mechanism_version: MECHANISM_VERSION.into(),
            rng_version: RNG_VERSION.into(),
            started_unix: unix_now(),
            finished_unix: 0.0,
            complete: false,
            failure: None,
            stages: Vec::new(),
            artifacts: Vec::new(),
        },
    };
    let threads = (cfg.threads > 0).then_some(cfg.threads);
    let result = par::with_threads(threads, || stages(&mut run)).and_then(|r| r);
    run.manifest.finished_unix = unix_now();
    match result {
        Ok(()) => {
            run.manifest.complete = true;
            run.save_manifest()?;
            Ok(run.manifest)
        }
        Err(e) => {
            let stage = match &e {
                Error::Stage { stage, .. } => stage.clone(),
                _ => "pipeline".into(),
            };
            run.manifest.failure = Some(StageFailure {
                stage,
                cause: e.to_string(),
            });
            run.save_manifest()?;
            Err(e)
        }
    }
}

fn stages(run: &mut Run<'_>) -> Result<()> {
    let cfg = run.cfg;
    let seed = cfg.seed;

    let (md, voters) = run.stage("generate", |r| {
        let md = generate_population(&cfg.generation, seed)?;
        save_microdata(&md, &r.out.join("microdata"))?;
        for f in [
            crate::synth_pop::HOUSEHOLDS_FILE,
            crate::synth_pop::PERSONS_FILE,
            crate::synth_pop::GEOGRAPHY_FILE,
            crate::synth_pop::NAMES_FILE,
        ] {
            r.record("microdata", Path::new("microdata").join(f))?;
        }
        let voters = extract_voter_file(&md, cfg.registration_rate, seed)?;
        voters.save_csv(&r.out.join("voters.csv"))?;
        r.record("voter_file", "voters.csv")?;
        Ok((md, voters))
    })?;

    let confidential = run.stage("tabulate", |r| {
        let t = tabulate(&md);
        save_table(r, "confidential", &t)?;
        Ok(t)
    })?;

    let swapped = run.stage("swap", |r| {
        let (swapped_md, log) = apply_swapping(&md, &cfg.swap_config())?;
        log.save(&r.out.join("tables/swap_log.csv"))?;
        r.record("swap_log", "tables/swap_log.csv")?;
        let t = tabulate(&swapped_md);
        save_table(r, "swapped", &t)?;
        Ok(t)
    })?;

    let mut noised: Vec<(f64, TabulationSet)> = Vec::new();
    for &eps in &cfg.dp.epsilons {
        let t = run.stage(&format!("dpnoise[{eps}]"), |r| {
            let n = apply_dp_das(&confidential, &cfg.budget(eps)?, seed)?;
            let name = dp_condition_name(eps);
            n.save(&r.out.join(format!("tables/{name}.csv")))?;
            r.record(format!("table:{name}"), format!("tables/{name}.csv"))?;
            r.record(
                format!("provenance:{name}"),
                format!("tables/{name}.provenance.json"),
            )?;
            Ok(n.tabulation)
        })?;
        noised.push((eps, t));
    }

    let mut conditions: Vec<(String, Option<f64>, &TabulationSet)> = vec![
        ("confidential".into(), None, &confidential),
        ("swapped".into(), None, &swapped),
    ];
    conditions.extend(noised.iter().map(|(e, t)| (dp_condition_name(*e), Some(*e), t)));

    run.stage("bisg+risk", |r| {
        let without: Vec<(NameParts, Vec<PosteriorRecord>)> = cfg
            .bisg
            .name_parts
            .iter()
            .map(|&m| {
                let recs = posteriors(r, &voters, &md, m, None, "none")?;
                Ok((m, recs))
            })
            .collect::<Result<_>>()?;
        for (name, eps, table) in &conditions {
            let mut inputs = Vec::new();
            for (m, base) in &without {
                inputs.push(MethodPosteriors {
                    method: Some(*m),
                    without_data: Some(base.clone()),
                    with_data: Some(posteriors(r, &voters, &md, *m, Some(table), name)?),
                });
            }
            let check = match eps {
                Some(e) if cfg.risk.mechanism_check => Some(mechanism_bound_check(
                    &standard_tiny_instances(),
                    &cfg.budget(*e)?,
                    ReleasedTables::Vap,
                    seed,
                    Execution::default(),
                )?),
                _ => None,
            };
            let report = build_risk_report(&inputs, eps.unwrap_or(cfg.dp.report_epsilon), name, check)?;
            r.write_text(&format!("risk_report:{name}"), &format!("reports/risk_{name}.json"), &report.to_json())?;
            r.write_text(&format!("risk_table:{name}"), &format!("reports/risk_{name}.txt"), &report.render_table())?;
        }
        Ok(())
    })?;

    run.stage("policy", |r| {
        let plans = generate_plans(confidential.geography(), &confidential, &cfg.policy.plans(), seed)?;
        save_plans(&plans, &r.out.join("reports/plans.csv"))?;
        r.record("plans", "reports/plans.csv")?;
        let conds: Vec<Condition<'_>> = conditions
            .iter()
            .map(|(name, eps, t)| Condition {
                name: name.clone(),
                epsilon: *eps,
                table: t,
            })
            .collect();
        let report = evaluate_plans(&plans, &confidential, &conds, &cfg.policy.plans(), &cfg.policy.thresholds)?;
        r.write_text("deviation_report", "reports/deviation.json", &report.to_json())?;
        report.save_summary_csv(&r.out.join("reports/deviation_summary.csv"))?;
        r.record("deviation_summary", "reports/deviation_summary.csv")
    })
}

fn save_table(r: &mut Run<'_>, name: &str, t: &TabulationSet) -> Result<()> {
    let rel = format!("tables/{name}.csv");
    t.save(&r.out.join(&rel))?;
    r.record(format!("table:{name}"), &rel)?;
    r.record(format!("aggregates:{name}"), format!("tables/{name}.aggregates.json"))
}

fn posteriors(
    r: &mut Run<'_>,
    voters: &VoterFile,
    md: &crate::synth_pop::Microdata,
    method: NameParts,
    table: Option<&TabulationSet>,
    condition: &str,
) -> Result<Vec<PosteriorRecord>> {
    let recs = infer(&voters.records, &md.names, method, table, &r.cfg.bisg.settings())?;
    let rel = format!("posteriors/{condition}_{}.csv", method.key());
    save_posteriors(&recs, &r.out.join(&rel))?;
    r.record(format!("posteriors:{condition}:{}", method.key()), rel)?;
    Ok(recs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth_pop::GeographyConfig;

    fn small(dir: &Path) -> RunConfig {
        let mut c = RunConfig {
            output_dir: dir.to_path_buf(),
            ..RunConfig::default()
        };
        c.generation.geography = GeographyConfig {
            counties: 2,
            tracts_per_county: 2,
            blocks_per_tract: 5,
        };
        c.dp.epsilons = vec![1.0, 19.61];
        c.policy.n_plans = 4;
        c.policy.n_districts = 2;
        c.policy.balance_tolerance = 0.2;
        c.risk.mechanism_check = false;
        c
    }

    #[test]
    fn zero_epsilon_fails_before_any_stage() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("run");
        let mut c = small(&out);
        c.dp.epsilons = vec![1.0, 0.0];
        let e = run_pipeline(&c).unwrap_err();
        assert!(e.is_config(), "{e}");
        assert!(!out.exists());
    }

    #[test]
    fn toml_round_trip_and_unknown_keys() {
        let c = RunConfig::default();
        let text = toml::to_string(&c).unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
        assert!(RunConfig::from_toml("sede = 3").unwrap_err().is_config());
        let partial = RunConfig::from_toml("seed = 7\n[dp]\nepsilons = [2.0]\n").unwrap();
        assert_eq!(partial.seed, 7);
        assert_eq!(partial.dp.epsilons, vec![2.0]);
        assert_eq!(partial.policy, PolicySettings::default());
    }

    #[test]
    fn hash_ignores_output_dir_and_threads() {
        let a = RunConfig::default();
        let mut b = a.clone();
        b.output_dir = "elsewhere".into();
        b.threads = 3;
        assert_eq!(a.config_hash(), b.config_hash());
        b.seed += 1;
        assert_ne!(a.config_hash(), b.config_hash());
    }

    #[test]
    fn small_run_lists_existing_artifacts() {
        let dir = tempfile::tempdir().unwrap();
        let c = small(dir.path());
        let m = run_pipeline(&c).unwrap();
        assert!(m.complete);
        for a in &m.artifacts {
            assert!(dir.path().join(&a.path).exists(), "{}", a.path.display());
        }
        for kind in ["risk_report:swapped", "risk_report:dp_eps_1", "deviation_report"] {
            assert!(m.artifact(kind).is_some(), "{kind}");
        }
        assert_eq!(PipelineManifest::load(dir.path()).unwrap(), m);
    }

    #[test]
    fn failing_stage_marks_manifest_incomplete() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = small(dir.path());
        // unreachable balance: the policy stage fails after everything else ran
        c.policy.balance_tolerance = 0.0;
        c.policy.n_districts = 3;
        match run_pipeline(&c) {
            Err(Error::Stage { stage, .. }) => assert_eq!(stage, "policy"),
            other => panic!("{other:?}"),
        }
        let m = PipelineManifest::load(dir.path()).unwrap();
        assert!(!m.complete);
        assert_eq!(m.failure.as_ref().unwrap().stage, "policy");
        assert!(m.artifact("risk_report:confidential").is_some());
    }
}
