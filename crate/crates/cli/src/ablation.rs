//! Predefined ablation suites. Every variant runs once per seed in its own
//! subdirectory; the suite directory collects results, a Markdown table and
//! an SVG chart.

use std::fs;
use std::path::Path;

use clap::ValueEnum;
use fisa_core::data::Dataset;
use fisa_core::generator::ProposalProvider;
use fisa_core::metrics::{evaluate, write_results_csv, write_results_json, EvalReport, OracleMode, RunResult};
use fisa_core::model::MiniVlm;
use fisa_core::training::PartitionMode;
use serde::Serialize;

use crate::report::{markdown_table, summarize, svg_bar_chart};
use crate::{create_dir, load_input_dataset, require, train_run, AblateArgs, CliError, RunConfig};

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum Suite {
    /// Frozen baseline, +SEVE, +SEVE with the full visual encoder, +SEVE+SIMO.
    SeveSimo,
    /// One weakly trained classifier scored with and without oracle substitution.
    Oracle,
    /// SIMO on 1%, 10% and 100% of the training data.
    DataFraction,
    /// SIMO at several iteration counts.
    Iterations,
}

impl Suite {
    pub fn title(self) -> &'static str {
        match self {
            Self::SeveSimo => "Semantic-guided encoding and selective optimization",
            Self::Oracle => "Oracle substitution",
            Self::DataFraction => "Training data size",
            Self::Iterations => "Training length",
        }
    }
}

#[derive(Serialize)]
struct SuiteManifest<'a> {
    suite: Suite,
    seeds: Vec<u64>,
    sweep: &'a [usize],
    variants: Vec<String>,
}

/// A training configuration plus the oracle modes it is scored under.
struct Variant {
    name: String,
    cfg: RunConfig,
    /// `(row name, mode)` pairs evaluated on the same trained model.
    evals: Vec<(String, OracleMode)>,
}

fn variants(suite: Suite, base: &RunConfig, sweep: &[usize]) -> Vec<Variant> {
    let with = |name: &str, f: &dyn Fn(&mut RunConfig)| {
        let mut cfg = base.clone();
        f(&mut cfg);
        Variant { name: name.to_string(), cfg, evals: vec![(name.to_string(), OracleMode::None)] }
    };
    let partition = |p: PartitionMode| move |c: &mut RunConfig| c.train.partition = p;
    match suite {
        Suite::SeveSimo => vec![
            with("baseline", &|c: &mut RunConfig| {
                c.model = c.model.clone().without_seve();
                c.train.partition = PartitionMode::Frozen;
                // nothing is trainable, so iterations would only burn time
                c.train.iterations = 0;
            }),
            with("+SEVE", &partition(PartitionMode::SeveOnly)),
            with("+SEVE+full", &partition(PartitionMode::Full)),
            with("+SEVE+SIMO", &partition(PartitionMode::Simo)),
        ],
        Suite::Oracle => {
            let mut v = with("classifier", &partition(PartitionMode::Simo));
            v.evals = vec![
                ("none".into(), OracleMode::None),
                ("oracle-classifier".into(), OracleMode::Classifier),
                ("oracle-generator".into(), OracleMode::Generator),
            ];
            vec![v]
        }
        Suite::DataFraction => [("1%", 0.01), ("10%", 0.1), ("100%", 1.0)]
            .into_iter()
            .map(|(name, f)| {
                with(name, &|c: &mut RunConfig| {
                    c.train.partition = PartitionMode::Simo;
                    c.data_fraction = f;
                })
            })
            .collect(),
        Suite::Iterations => sweep
            .iter()
            .map(|&n| {
                with(&format!("iters={n}"), &|c: &mut RunConfig| {
                    c.train.partition = PartitionMode::Simo;
                    c.train.iterations = n;
                })
            })
            .collect(),
    }
}

fn dir_name(name: &str) -> String {
    let spelled = name.to_lowercase().replace('%', "pct");
    spelled
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|part| !part.is_empty())
        .collect::<Vec<_>>()
        .join("-")
}

/// Runs `suite` over `seeds` and returns one result per (evaluation row, seed).
pub fn run_suite(
    suite: Suite,
    base: &RunConfig,
    seeds: &[u64],
    sweep: &[usize],
    train_set: &Dataset,
    eval_set: &Dataset,
    out: &Path,
) -> Result<Vec<RunResult>, CliError> {
    let mut results = Vec::new();
    for variant in variants(suite, base, sweep) {
        for &seed in seeds {
            let mut cfg = variant.cfg.clone();
            cfg.set_seed(seed);
            let dir = out.join(dir_name(&variant.name)).join(format!("seed{seed}"));
            cfg.out_dir = Some(dir.clone());
            let reports = run_variant(&cfg, &variant.evals, train_set, eval_set, &dir)
                .map_err(|e| annotate(e, &variant.name, seed))?;
            for ((row, _), report) in variant.evals.iter().zip(reports) {
                log::info!("{row} seed {seed}: PQ {:.4} mIoU {:.4}", report.pq, report.miou);
                results.push(RunResult { run: format!("{row}/seed{seed}"), report });
            }
        }
    }
    Ok(results)
}

fn annotate(e: CliError, variant: &str, seed: u64) -> CliError {
    match e {
        CliError::Usage(m) => CliError::Usage(format!("variant `{variant}` (seed {seed}): {m}")),
        CliError::Runtime(err) => CliError::Runtime(err.context(format!("variant `{variant}` (seed {seed}) failed"))),
    }
}

fn run_variant(
    cfg: &RunConfig,
    evals: &[(String, OracleMode)],
    train_set: &Dataset,
    eval_set: &Dataset,
    dir: &Path,
) -> Result<Vec<EvalReport>, CliError> {
    let outcome = train_run(cfg, train_set, dir)?;
    let provider = ProposalProvider::generated(cfg.generator.clone())?;
    let model: &MiniVlm = &outcome.model;
    let mut reports = Vec::with_capacity(evals.len());
    for (_, mode) in evals {
        reports.push(evaluate(model, eval_set, &provider, *mode)?);
    }
    Ok(reports)
}

pub fn cmd_ablate(a: &AblateArgs) -> Result<(), CliError> {
    let cfg = a.run.resolve()?;
    if cfg.proposals.is_some() {
        return Err(CliError::usage("ablation suites use the synthetic generator; --proposals is not supported"));
    }
    if a.seeds == 0 {
        return Err(CliError::usage("--seeds must be at least 1"));
    }
    if a.suite == Suite::Iterations && a.sweep.is_empty() {
        return Err(CliError::usage("--sweep needs at least one iteration count"));
    }
    let train_path = require(&cfg.data, "--data")?;
    let eval_path = require(&cfg.eval_data, "--eval-data")?;
    let out = require(&cfg.out_dir, "--out")?.to_path_buf();
    let train_set = load_input_dataset(train_path)?;
    let eval_set = load_input_dataset(eval_path)?;
    create_dir(&out)?;
    cfg.save(&out)?;

    let seeds: Vec<u64> = (0..a.seeds).map(|i| cfg.seed + i).collect();
    let results = run_suite(a.suite, &cfg, &seeds, &a.sweep, &train_set, &eval_set, &out)?;

    let rows = summarize(&results);
    let manifest = SuiteManifest {
        suite: a.suite,
        seeds: seeds.clone(),
        sweep: &a.sweep,
        variants: rows.iter().map(|r| r.variant.clone()).collect(),
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(CliError::runtime)?;
    text.push('\n');
    write(&out.join("suite.json"), &text)?;
    write_results_json(&out.join("results.json"), &results)?;
    write_results_csv(&out.join("results.csv"), &results)?;
    let table = markdown_table(a.suite.title(), &rows);
    write(&out.join("table.md"), &table)?;
    write(&out.join("chart.svg"), &svg_bar_chart(a.suite.title(), &rows, "pq")?)?;
    print!("{table}");
    Ok(())
}

fn write(path: &Path, text: &str) -> Result<(), CliError> {
    fs::write(path, text).map_err(|e| CliError::runtime(anyhow::anyhow!("writing {}: {e}", path.display())))
}
