//! `daseval`: batch driver for the disclosure-avoidance evaluation pipeline.
//!
//! Exit codes: 0 success, 2 configuration error, 3 stage failure.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use das_eval::bisg::{infer, load_posteriors, save_posteriors, NameParts};
use das_eval::dp_das::{apply_dp_das, provenance_path, NoisedTabulation};
use das_eval::pipeline::{run_pipeline, Overrides, RunConfig};
use das_eval::policy_eval::{evaluate_plans, generate_plans, load_plans, save_plans, Condition};
use das_eval::risk::{build_risk_report, summarize_posteriors, MethodPosteriors};
use das_eval::swap::{apply_swapping, Scope};
use das_eval::synth_pop::{
    extract_voter_file, generate_population, load_microdata, save_microdata, NameModel, VoterFile,
};
use das_eval::tabulate::{table_distance, tabulate, TabulationSet};
use das_eval::{par, Error, Result};

#[derive(Parser, Debug)]
#[command(name = "daseval", version, about = "Evaluate census disclosure-avoidance mechanisms on synthetic data")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Debug)]
struct Global {
    /// Run configuration (TOML). Defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Override the master seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory (or file, for single-table stages).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Worker threads. Results do not depend on it.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Epsilon sweep override; repeat for several values.
    #[arg(long = "epsilon", global = true)]
    epsilons: Vec<f64>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run every stage for every data condition.
    Run,
    /// Generate microdata and the voter file into `--out`.
    Generate,
    /// Tabulate microdata into a block table at `--out`.
    Tabulate {
        #[arg(long)]
        microdata: PathBuf,
    },
    /// Swap households; writes swapped microdata and `swap_log.csv` into `--out`.
    Swap {
        #[arg(long)]
        microdata: PathBuf,
        #[arg(long)]
        swap_rate: Option<f64>,
        #[arg(long)]
        scope: Option<Scope>,
    },
    /// Add geometric noise to a block table (one `--epsilon`).
    Dpnoise {
        #[arg(long)]
        table: PathBuf,
    },
    /// Run BISG over a voter file.
    Bisg {
        #[arg(long)]
        voters: PathBuf,
        /// Name model JSON (`names.json` in a microdata directory).
        #[arg(long)]
        names: PathBuf,
        /// Block table; omit for name-only posteriors.
        #[arg(long)]
        table: Option<PathBuf>,
        #[arg(long, default_value = "first_middle_last")]
        method: NameParts,
    },
    /// Build a risk report from `<dir>/none_<method>.csv` and `<dir>/<condition>_<method>.csv`.
    Risk {
        #[arg(long)]
        posteriors: PathBuf,
        #[arg(long)]
        condition: String,
    },
    /// Generate plans on the confidential table and evaluate them under each condition.
    Policy {
        #[arg(long)]
        confidential: PathBuf,
        /// `name=path`; repeatable.
        #[arg(long = "condition", value_parser = parse_condition)]
        conditions: Vec<(String, PathBuf)>,
        /// Reuse saved plans instead of generating.
        #[arg(long)]
        plans: Option<PathBuf>,
    },
    /// Summarize posterior CSV files as JSON.
    Report {
        #[arg(required = true)]
        posteriors: Vec<PathBuf>,
    },
    /// Distance between two block tables, as JSON.
    Diff { a: PathBuf, b: PathBuf },
}

fn parse_condition(s: &str) -> std::result::Result<(String, PathBuf), String> {
    let (name, path) = s.split_once('=').ok_or("expected name=path")?;
    Ok((name.to_string(), PathBuf::from(path)))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match execute(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                eprintln!("  caused by: {s}");
                source = s.source();
            }
            ExitCode::from(if e.is_config() { 2 } else { 3 })
        }
    }
}

fn execute(cli: Cli) -> Result<()> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    cfg.apply(&Overrides {
        seed: g.seed,
        output_dir: g.out.clone(),
        threads: g.threads,
        epsilons: g.epsilons.clone(),
    });
    if let Command::Run = cli.command {
        let m = run_pipeline(&cfg)?;
        println!(
            "{} artifacts written to {} (config {})",
            m.artifacts.len(),
            cfg.output_dir.display(),
            &m.config_hash[..12]
        );
        return Ok(());
    }
    let threads = (cfg.threads > 0).then_some(cfg.threads);
    par::with_threads(threads, || stage(cli.command, g, &cfg))?
}

fn require_out(g: &Global) -> Result<&Path> {
    g.out.as_deref().ok_or_else(|| Error::Config {
        field: "--out".into(),
        message: "this subcommand needs an output path".into(),
    })
}

fn create_dir(dir: &Path) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::Io {
        path: dir.to_path_buf(),
        source: e,
    })
}

fn stage(command: Command, g: &Global, cfg: &RunConfig) -> Result<()> {
    match command {
        Command::Run => unreachable!("handled by execute"),
        Command::Generate => {
            cfg.generation.validate()?;
            let out = require_out(g)?;
            let md = generate_population(&cfg.generation, cfg.seed)?;
            save_microdata(&md, &out.join("microdata"))?;
            let voters = extract_voter_file(&md, cfg.registration_rate, cfg.seed)?;
            voters.save_csv(&out.join("voters.csv"))?;
            println!(
                "{} households, {} persons, {} voters",
                md.households.len(),
                md.persons.len(),
                voters.records.len()
            );
        }
        Command::Tabulate { microdata } => {
            let t = tabulate(&load_microdata(&microdata)?);
            t.save(require_out(g)?)?;
        }
        Command::Swap {
            microdata,
            swap_rate,
            scope,
        } => {
            let out = require_out(g)?;
            let mut sc = cfg.swap_config();
            if let Some(r) = swap_rate {
                sc.swap_rate = r;
            }
            if let Some(s) = scope {
                sc.pairing_scope = s;
            }
            sc.validate()?;
            let (swapped, log) = apply_swapping(&load_microdata(&microdata)?, &sc)?;
            create_dir(out)?;
            save_microdata(&swapped, out)?;
            log.save(&out.join("swap_log.csv"))?;
            println!(
                "{} pairs swapped, {} of {} selected unmatched",
                log.pairs.len(),
                log.unmatched,
                log.selected
            );
        }
        Command::Dpnoise { table } => {
            let eps = match g.epsilons.as_slice() {
                [] => cfg.dp.report_epsilon,
                [e] => *e,
                _ => {
                    return Err(Error::Config {
                        field: "--epsilon".into(),
                        message: "dpnoise takes a single epsilon".into(),
                    })
                }
            };
            let budget = cfg.budget(eps).map_err(|_| Error::Config {
                field: "--epsilon".into(),
                message: format!("{eps} is not a positive finite epsilon"),
            })?;
            let noised = apply_dp_das(&TabulationSet::load(&table)?, &budget, cfg.seed)?;
            noised.save(require_out(g)?)?;
        }
        Command::Bisg {
            voters,
            names,
            table,
            method,
        } => {
            let voters = VoterFile::load_csv(&voters)?;
            let nm = NameModel::load_json(&names)?;
            let tab = table.as_deref().map(TabulationSet::load).transpose()?;
            let recs = infer(&voters.records, &nm, method, tab.as_ref(), &cfg.bisg.settings())?;
            save_posteriors(&recs, require_out(g)?)?;
        }
        Command::Risk {
            posteriors,
            condition,
        } => {
            let eps = g.epsilons.first().copied().unwrap_or(cfg.dp.report_epsilon);
            let inputs = cfg
                .bisg
                .name_parts
                .iter()
                .map(|&m| {
                    let file = |c: &str| posteriors.join(format!("{c}_{}.csv", m.key()));
                    Ok(MethodPosteriors {
                        method: Some(m),
                        without_data: Some(load_posteriors(&file("none"))?),
                        with_data: Some(load_posteriors(&file(&condition))?),
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let report = build_risk_report(&inputs, eps, &condition, None)?;
            print!("{}", report.render_table());
            if let Some(out) = &g.out {
                create_dir(out)?;
                write(&out.join(format!("risk_{condition}.json")), &report.to_json())?;
                write(&out.join(format!("risk_{condition}.txt")), &report.render_table())?;
            }
        }
        Command::Policy {
            confidential,
            conditions,
            plans,
        } => {
            let out = require_out(g)?;
            let conf = TabulationSet::load(&confidential)?;
            let settings = cfg.policy.plans();
            let plans = match plans {
                Some(p) => load_plans(&p)?,
                None => generate_plans(conf.geography(), &conf, &settings, cfg.seed)?,
            };
            let mut tables = vec![("confidential".to_string(), None, conf.clone())];
            for (name, path) in conditions {
                if provenance_path(&path).exists() {
                    let n = NoisedTabulation::load(&path)?;
                    tables.push((name, Some(n.provenance.epsilon_total), n.tabulation));
                } else {
                    tables.push((name, None, TabulationSet::load(&path)?));
                }
            }
            let conds: Vec<Condition<'_>> = tables
                .iter()
                .map(|(name, epsilon, table)| Condition {
                    name: name.clone(),
                    epsilon: *epsilon,
                    table,
                })
                .collect();
            let report = evaluate_plans(&plans, &conf, &conds, &settings, &cfg.policy.thresholds)?;
            create_dir(out)?;
            save_plans(&plans, &out.join("plans.csv"))?;
            write(&out.join("deviation.json"), &report.to_json())?;
            report.save_summary_csv(&out.join("deviation_summary.csv"))?;
        }
        Command::Report { posteriors } => {
            let mut all = serde_json::Map::new();
            for p in posteriors {
                let summary = summarize_posteriors(&load_posteriors(&p)?)
                    .map_err(|e| Error::stage(p.display().to_string(), e))?;
                all.insert(
                    p.display().to_string(),
                    serde_json::to_value(summary).expect("summary serializes"),
                );
            }
            println!("{}", serde_json::to_string_pretty(&all).expect("json"));
        }
        Command::Diff { a, b } => {
            let d = table_distance(&TabulationSet::load(&a)?, &TabulationSet::load(&b)?)?;
            println!(
                "{}",
                serde_json::json!({
                    "total_population_l1": d.total_population_l1,
                    "vap_l1": d.vap_l1,
                    "race_l1": d.race_l1,
                    "max_abs_deviation": d.max_abs_deviation,
                    "mean_total_population_l1": d.mean_total_population_l1,
                    "identical": d.is_zero(),
                })
            );
        }
    }
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}
