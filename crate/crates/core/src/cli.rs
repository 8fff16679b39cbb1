//! The `retrologic` command-line surface.
//!
//! Subcommands: `extract` (reactions -> rule file), `cache` (build and
//! persist supports), `train`, `predict`, `eval`, `inspect` (per-atom
//! center attribution), `stats`. Exit codes: 0 success, 1 usage error,
//! 2 data error, 3 numeric abort.

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};

use crate::data::{self, CacheStore, Dataset, Split};
use crate::embed::{Activation, InitMode, Pooling};
use crate::gln::{Compat, GlnModel, ModelConfig};
use crate::infer::{self, BeamOptions, SupportProvider};
use crate::template::{self, TemplateTable};
use crate::train::{self, Estimator, Optimizer, TrainConfig, TrainItem};

pub const EXIT_OK: u8 = 0;
pub const EXIT_USAGE: u8 = 1;
pub const EXIT_DATA: u8 = 2;
pub const EXIT_NUMERIC: u8 = 3;

#[derive(Parser, Debug)]
#[command(
    name = "retrologic",
    about = "Template-based single-step retrosynthesis with an energy-based ranking model",
    disable_help_subcommand = true
)]
struct Cli {
    /// Flat key=value config file (model and training hyperparameters).
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Seed override for parameter init, shuffling and sampling.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Worker threads for cache building (0 = all cores).
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Beam width override.
    #[arg(long, global = true, value_parser = clap::value_parser!(u64).range(1..))]
    beam: Option<u64>,
    /// Condition rule selection on each record's reaction class.
    #[arg(long, global = true)]
    class_conditional: bool,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand, Debug)]
enum Cmd {
    /// Extract rewrite rules from an atom-mapped reaction file.
    Extract {
        #[command(flatten)]
        data: DataArg,
        /// Output rule file.
        #[arg(long)]
        out: PathBuf,
        /// Bond hops around the reaction center (default from config).
        #[arg(long)]
        radius: Option<usize>,
    },
    /// Build per-product supports and persist them.
    Cache {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Replay both predicates over the built caches.
        #[arg(long)]
        verify: bool,
    },
    /// Train the ranking model.
    Train {
        /// Training reactions (TSV).
        #[arg(long)]
        data: PathBuf,
        /// Validation reactions (TSV).
        #[arg(long)]
        val: Option<PathBuf>,
        #[arg(long)]
        templates: PathBuf,
        /// Prebuilt cache file for the training split.
        #[arg(long)]
        caches: Option<PathBuf>,
        /// Output directory for model checkpoints.
        #[arg(long)]
        out: PathBuf,
        /// Metrics log (JSON lines); stderr summary otherwise.
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Rank reactant sets for each product in a file.
    Predict {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        caches: Option<PathBuf>,
        #[command(flatten)]
        data: DataArg,
        /// Output file (stdout otherwise).
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Top-k exact-match evaluation.
    Eval {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        caches: Option<PathBuf>,
        #[command(flatten)]
        data: DataArg,
        /// Comma-separated k values.
        #[arg(long, default_value = "1,3,5,10,20,50")]
        ks: String,
        /// Also write the report as JSON.
        #[arg(long)]
        json: Option<PathBuf>,
    },
    /// Per-atom reaction-center attribution for top-1 predictions.
    Inspect {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        caches: Option<PathBuf>,
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Corpus statistics (coverage, centers, rules per molecule).
    Stats {
        #[command(flatten)]
        data: DataArg,
        #[arg(long)]
        templates: PathBuf,
        #[arg(long)]
        caches: Option<PathBuf>,
    },
}

#[derive(Args, Debug)]
struct DataArg {
    /// Reaction file (TSV: record_id, reactants>>product, optional class).
    #[arg(long)]
    data: PathBuf,
}

/// Full application configuration: model and training hyperparameters plus
/// the pipeline knobs, parsed from a flat key=value file.
#[derive(Debug, Clone)]
pub struct AppConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub radius: usize,
    pub beam: usize,
}

impl Default for AppConfig {
    fn default() -> Self {
        AppConfig {
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            radius: 1,
            beam: 50,
        }
    }
}

pub fn parse_config(text: &str) -> Result<AppConfig, String> {
    let mut cfg = AppConfig::default();
    for (lineno, raw) in text.lines().enumerate() {
        let line = raw.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| format!("line {}: expected key=value", lineno + 1))?;
        let (key, value) = (key.trim(), value.trim());
        let bad = |what: &str| format!("line {}: bad {what} '{value}'", lineno + 1);
        match key {
            "embed_dim" => cfg.model.embed.dim = value.parse().map_err(|_| bad("embed_dim"))?,
            "layers" => cfg.model.embed.layers = value.parse().map_err(|_| bad("layers"))?,
            "activation" => {
                cfg.model.embed.activation = match value {
                    "relu" => Activation::Relu,
                    "tanh" => Activation::Tanh,
                    _ => return Err(bad("activation")),
                }
            }
            "pooling" => {
                cfg.model.embed.pooling = match value {
                    "mean" => Pooling::Mean,
                    "sum" => Pooling::Sum,
                    "max" => Pooling::Max,
                    _ => return Err(bad("pooling")),
                }
            }
            "init_h0" => {
                cfg.model.embed.init = match value {
                    "projected" => InitMode::Projected,
                    "raw" => InitMode::RawPadded,
                    _ => return Err(bad("init_h0")),
                }
            }
            "compatibility" => {
                cfg.model.compat = match value {
                    "inner_product" => Compat::InnerProduct,
                    "bilinear" => Compat::Bilinear,
                    _ => return Err(bad("compatibility")),
                }
            }
            "batch_size" => cfg.train.batch_size = value.parse().map_err(|_| bad("batch_size"))?,
            "max_updates" => cfg.train.max_updates = value.parse().map_err(|_| bad("max_updates"))?,
            "max_epochs" => cfg.train.max_epochs = value.parse().map_err(|_| bad("max_epochs"))?,
            "learning_rate" => {
                cfg.train.learning_rate = value.parse().map_err(|_| bad("learning_rate"))?
            }
            "grad_clip" => cfg.train.grad_clip = value.parse().map_err(|_| bad("grad_clip"))?,
            "optimizer" => {
                cfg.train.optimizer = match value {
                    "adam" => Optimizer::Adam,
                    "sgd" => Optimizer::Sgd,
                    _ => return Err(bad("optimizer")),
                }
            }
            "estimator" => {
                cfg.train.estimator = match value {
                    "exact" => Estimator::Exact,
                    "sampled_model" => Estimator::SampledModel,
                    "sampled_uniform" => Estimator::SampledUniform,
                    _ => return Err(bad("estimator")),
                }
            }
            "seed" => cfg.train.seed = value.parse().map_err(|_| bad("seed"))?,
            "class_conditional" => {
                let v: bool = value.parse().map_err(|_| bad("class_conditional"))?;
                cfg.train.class_conditional = v;
                cfg.model.class_conditional = v;
            }
            "eval_interval" => {
                cfg.train.eval_interval = value.parse().map_err(|_| bad("eval_interval"))?
            }
            "radius" => cfg.radius = value.parse().map_err(|_| bad("radius"))?,
            "beam" => cfg.beam = value.parse().map_err(|_| bad("beam"))?,
            other => return Err(format!("line {}: unknown key '{other}'", lineno + 1)),
        }
    }
    Ok(cfg)
}

/// Dispatch with the spec'd exit codes. Usage problems print to stderr and
/// return 1; data problems 2; numeric aborts 3.
pub fn cli_main(args: &[String]) -> u8 {
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            // Let clap render --help/--version to stdout with success.
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => EXIT_OK,
                _ => EXIT_USAGE,
            };
            let _ = e.print();
            return code;
        }
    };
    match run(cli) {
        Ok(()) => EXIT_OK,
        Err(e) => {
            eprintln!("retrologic: {}", e.message);
            e.exit_code
        }
    }
}

struct CliError {
    message: String,
    exit_code: u8,
}

impl CliError {
    fn usage(message: impl Into<String>) -> CliError {
        CliError {
            message: message.into(),
            exit_code: EXIT_USAGE,
        }
    }

    fn data(message: impl std::fmt::Display) -> CliError {
        CliError {
            message: message.to_string(),
            exit_code: EXIT_DATA,
        }
    }
}

impl From<data::DataError> for CliError {
    fn from(e: data::DataError) -> CliError {
        CliError::data(e)
    }
}

impl From<crate::gln::ScoreError> for CliError {
    fn from(e: crate::gln::ScoreError) -> CliError {
        CliError::data(e)
    }
}

impl From<crate::gln::ModelIoError> for CliError {
    fn from(e: crate::gln::ModelIoError) -> CliError {
        CliError::data(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> CliError {
        CliError::data(e)
    }
}

impl From<train::TrainError> for CliError {
    fn from(e: train::TrainError) -> CliError {
        let exit_code = match e {
            train::TrainError::NonFinite { .. } => EXIT_NUMERIC,
            train::TrainError::BadConfig(_) => EXIT_USAGE,
            _ => EXIT_DATA,
        };
        CliError {
            message: e.to_string(),
            exit_code,
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    let mut cfg = match &cli.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .map_err(|e| CliError::usage(format!("cannot read config {}: {e}", path.display())))?;
            parse_config(&text).map_err(CliError::usage)?
        }
        None => AppConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.train.seed = seed;
    }
    if let Some(beam) = cli.beam {
        cfg.beam = beam as usize;
    }
    if cli.class_conditional {
        cfg.train.class_conditional = true;
        cfg.model.class_conditional = true;
    }
    let threads = cli.threads.unwrap_or(0);

    match cli.cmd {
        Cmd::Extract { data, out, radius } => {
            let radius = radius.unwrap_or(cfg.radius);
            let dataset = load_split(&data.data, Split::Train)?;
            let (table, failures) = data::extract_corpus_templates(&dataset, radius);
            let mut text = String::new();
            for t in table.templates() {
                text.push_str(&template::format_template_line(t));
                text.push('\n');
            }
            std::fs::write(&out, text)?;
            eprintln!(
                "extracted {} unique rules from {} records ({} failures) at radius {radius}",
                table.len(),
                dataset.records.len(),
                failures.len()
            );
            for (id, reason) in failures.iter().take(10) {
                eprintln!("  {id}: {reason}");
            }
            Ok(())
        }
        Cmd::Cache {
            data,
            templates,
            out,
            verify,
        } => {
            let dataset = load_split(&data.data, Split::Train)?;
            let table = load_table(&templates)?;
            let (store, report) = data::build_caches(&dataset, &table, cfg.radius, threads)?;
            if verify {
                store.verify(&dataset)?;
                eprintln!("verify: all cached pairs satisfy both predicates");
            }
            store.save(&out)?;
            eprintln!(
                "cached {} products ({} excluded, {} with ground truth missing)",
                report.products, report.excluded, report.truth_missing
            );
            Ok(())
        }
        Cmd::Train {
            data,
            val,
            templates,
            caches,
            out,
            metrics,
        } => {
            let dataset = load_split(&data, Split::Train)?;
            let table = load_table(&templates)?;
            let store = match &caches {
                Some(path) => CacheStore::load(path, &table)?,
                None => data::build_caches(&dataset, &table, cfg.radius, threads)?.0,
            };
            let model = GlnModel::init(&cfg.model, cfg.train.seed);
            let (items, skipped) = build_items(&model, &table, &store, &dataset, &cfg.train)?;
            if items.is_empty() {
                return Err(CliError::data("no trainable records (all ground truths missing)"));
            }
            eprintln!(
                "training on {} records ({} skipped: truth missing from caches)",
                items.len(),
                skipped
            );
            let val_dataset = val.map(|p| load_split(&p, Split::Val)).transpose()?;
            let val_setup = match &val_dataset {
                Some(ds) => {
                    let (vstore, _) = data::build_caches(ds, &table, cfg.radius, threads)?;
                    let (vitems, _) = build_items(&model, &table, &vstore, ds, &cfg.train)?;
                    Some((vstore, vitems))
                }
                None => None,
            };
            let beam = cfg.beam;
            let class_conditional = cfg.train.class_conditional;
            let eval_top1 = |m: &GlnModel| -> (f64, Option<f64>) {
                let train_acc = top1_accuracy(m, &table, &store, &dataset, beam, class_conditional);
                let val_acc = val_setup.as_ref().and_then(|(vstore, _)| {
                    val_dataset.as_ref().map(|ds| {
                        top1_accuracy(m, &table, vstore, ds, beam, class_conditional)
                    })
                });
                (train_acc, val_acc)
            };
            let outcome = train::train_with_val(
                model,
                &items,
                val_setup.as_ref().map(|(_, vi)| vi.as_slice()),
                &cfg.train,
                eval_top1,
            )?;
            outcome.model.save_dir(&out)?;
            let log: Vec<String> = outcome
                .metrics
                .iter()
                .map(train::format_metrics_line)
                .collect();
            match metrics {
                Some(path) => std::fs::write(path, log.join("\n") + "\n")?,
                None => {
                    for line in &log {
                        eprintln!("{line}");
                    }
                }
            }
            let last = outcome.metrics.last().expect("at least the initial eval");
            eprintln!(
                "done: {} updates, train loss {:.4}, train top-1 {:.3}, checkpoint from update {}",
                last.update, last.train_loss, last.train_top1, outcome.best_update
            );
            Ok(())
        }
        Cmd::Predict {
            model,
            templates,
            caches,
            data,
            out,
        } => {
            let model = GlnModel::load_dir(&model)?;
            let table = load_table(&templates)?;
            let dataset = load_split(&data.data, Split::Test)?;
            let provider = provider_from(caches.as_deref(), &table)?;
            let mut lines = Vec::new();
            for rec in &dataset.records {
                let opts = BeamOptions {
                    beam: cfg.beam,
                    class: if cfg.train.class_conditional {
                        rec.reaction_class
                    } else {
                        None
                    },
                    dedup_across_templates: true,
                };
                let preds = infer::beam_search(
                    &model,
                    &table,
                    provider.as_ref(),
                    &rec.record_id,
                    &rec.product,
                    &opts,
                )?;
                for p in &preds {
                    lines.push(infer::format_prediction_line(&rec.record_id, p));
                }
            }
            write_lines(out.as_deref(), &lines)?;
            Ok(())
        }
        Cmd::Eval {
            model,
            templates,
            caches,
            data,
            ks,
            json,
        } => {
            let model = GlnModel::load_dir(&model)?;
            let table = load_table(&templates)?;
            let dataset = load_split(&data.data, Split::Test)?;
            let provider = provider_from(caches.as_deref(), &table)?;
            let ks: Vec<usize> = ks
                .split(',')
                .map(|s| s.trim().parse::<usize>())
                .collect::<Result<_, _>>()
                .map_err(|_| CliError::usage(format!("bad --ks list '{ks}'")))?;
            if ks.is_empty() || ks.contains(&0) {
                return Err(CliError::usage("--ks must be positive integers"));
            }
            let report = infer::evaluate(
                &model,
                &table,
                provider.as_ref(),
                &dataset.records,
                &ks,
                cfg.beam,
                cfg.train.class_conditional,
            )?;
            print!("{report}");
            if let Some(path) = json {
                std::fs::write(path, serde_json::to_string_pretty(&report).expect("serializable"))?;
            }
            Ok(())
        }
        Cmd::Inspect {
            model,
            templates,
            caches,
            data,
            out,
        } => {
            let model = GlnModel::load_dir(&model)?;
            let table = load_table(&templates)?;
            let dataset = load_split(&data.data, Split::Test)?;
            let provider = provider_from(caches.as_deref(), &table)?;
            let mut lines = Vec::new();
            for rec in &dataset.records {
                let preds = infer::beam_search(
                    &model,
                    &table,
                    provider.as_ref(),
                    &rec.record_id,
                    &rec.product,
                    &BeamOptions::with_beam(1),
                )?;
                let Some(top) = preds.first() else { continue };
                let idx = table
                    .index_of(&top.template_key)
                    .expect("prediction from table");
                let center = table.get(idx).product_pattern();
                let scores = infer::atom_scores(&model, &rec.product, center)?;
                for (i, s) in scores.iter().enumerate() {
                    lines.push(infer::format_atom_score_line(
                        &rec.record_id,
                        i,
                        rec.product.atom(i).element.symbol(),
                        *s,
                    ));
                }
            }
            write_lines(out.as_deref(), &lines)?;
            Ok(())
        }
        Cmd::Stats {
            data,
            templates,
            caches,
        } => {
            let dataset = load_split(&data.data, Split::Train)?;
            let table = load_table(&templates)?;
            let store = match &caches {
                Some(path) => CacheStore::load(path, &table)?,
                None => data::build_caches(&dataset, &table, cfg.radius, threads)?.0,
            };
            let stats = data::corpus_stats(&dataset, &store);
            print!("{stats}");
            Ok(())
        }
    }
}

fn load_split(path: &Path, split: Split) -> Result<Dataset, CliError> {
    let (dataset, report) = data::load_reactions(path, split)?;
    eprintln!("{split}: {}", report.summary());
    for (line, why) in report.malformed.iter().take(10) {
        eprintln!("  line {line}: {why}");
    }
    Ok(dataset)
}

fn load_table(path: &Path) -> Result<TemplateTable, CliError> {
    let text = std::fs::read_to_string(path)?;
    let (table, report) = template::load_templates_str(&text);
    eprintln!(
        "templates: {} parsed, {} duplicate, {} rejected",
        report.parsed,
        report.duplicates,
        report.rejected.len()
    );
    for (line, why) in report.rejected.iter().take(10) {
        eprintln!("  line {line}: {why}");
    }
    Ok(table)
}

fn provider_from(
    caches: Option<&Path>,
    table: &TemplateTable,
) -> Result<Box<dyn SupportProvider>, CliError> {
    Ok(match caches {
        Some(path) => Box::new(CacheStore::load(path, table)?),
        None => Box::new(infer::OnTheFly),
    })
}

fn write_lines(path: Option<&Path>, lines: &[String]) -> Result<(), CliError> {
    match path {
        Some(path) => std::fs::write(path, lines.join("\n") + "\n")?,
        None => {
            for line in lines {
                println!("{line}");
            }
        }
    }
    Ok(())
}

/// Build train items from cached supports; records whose ground truth is
/// absent are skipped and counted (kept for evaluation elsewhere).
fn build_items(
    model: &GlnModel,
    table: &TemplateTable,
    store: &CacheStore,
    dataset: &Dataset,
    tc: &TrainConfig,
) -> Result<(Vec<TrainItem>, usize), CliError> {
    let mut items = Vec::new();
    let mut skipped = 0usize;
    for rec in &dataset.records {
        let Some(ps) = store.products.get(&rec.record_id) else {
            skipped += 1;
            continue;
        };
        let (Some(ti), true, None) = (ps.truth_template, ps.truth_found, ps.excluded.as_ref()) else {
            skipped += 1;
            continue;
        };
        let support_t = match store.support_t(&rec.record_id, &rec.product, table) {
            Ok(s) => s,
            Err(_) => {
                skipped += 1;
                continue;
            }
        };
        let support_t = if tc.class_conditional {
            match rec.reaction_class.map(|c| support_t.restrict_by_class(c, table)) {
                Some(Ok(s)) => s,
                _ => {
                    skipped += 1;
                    continue;
                }
            }
        } else {
            support_t
        };
        let t = table.get(ti);
        let support_r = store.support_r(&rec.record_id, &rec.product, t)?;
        match train::build_item(
            model,
            table,
            &rec.record_id,
            &rec.product,
            &support_t,
            &support_r,
            t.template_key(),
            &rec.truth_keys(),
        ) {
            Ok(item) => items.push(item),
            Err(train::TrainError::SupportMiss { .. }) => skipped += 1,
            Err(e) => return Err(e.into()),
        }
    }
    Ok((items, skipped))
}

fn top1_accuracy(
    model: &GlnModel,
    table: &TemplateTable,
    provider: &dyn SupportProvider,
    dataset: &Dataset,
    beam: usize,
    class_conditional: bool,
) -> f64 {
    match infer::evaluate(
        model,
        table,
        provider,
        &dataset.records,
        &[1],
        beam,
        class_conditional,
    ) {
        Ok(report) => report.accuracy.first().map(|&(_, a)| a).unwrap_or(0.0),
        Err(_) => 0.0,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn config_parses_and_rejects_unknown_keys() {
        let cfg = parse_config(
            "# comment\nembed_dim=32\nlayers=2\nactivation=tanh\npooling=mean\n\
             batch_size=8\nlearning_rate=0.001\nseed=7\nradius=0\nbeam=10\n\
             estimator=sampled_model\noptimizer=sgd\nclass_conditional=true\n",
        )
        .unwrap();
        assert_eq!(cfg.model.embed.dim, 32);
        assert_eq!(cfg.model.embed.layers, 2);
        assert_eq!(cfg.train.batch_size, 8);
        assert_eq!(cfg.train.seed, 7);
        assert_eq!(cfg.radius, 0);
        assert_eq!(cfg.beam, 10);
        assert_eq!(cfg.train.estimator, Estimator::SampledModel);
        assert_eq!(cfg.train.optimizer, Optimizer::Sgd);
        assert!(cfg.model.class_conditional);

        assert!(parse_config("nope=1\n").is_err());
        assert!(parse_config("embed_dim=abc\n").is_err());
        assert!(parse_config("embed_dim\n").is_err());
    }

    fn argv(parts: &[&str]) -> Vec<String> {
        parts.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn usage_errors_exit_one() {
        assert_eq!(cli_main(&argv(&["retrologic", "no-such-command"])), EXIT_USAGE);
        assert_eq!(
            cli_main(&argv(&[
                "retrologic", "predict", "--beam", "0", "--model", "x", "--templates", "y",
                "--data", "z",
            ])),
            EXIT_USAGE
        );
        assert_eq!(cli_main(&argv(&["retrologic", "--help"])), EXIT_OK);
    }

    #[test]
    fn missing_files_exit_two() {
        assert_eq!(
            cli_main(&argv(&[
                "retrologic",
                "stats",
                "--data",
                "/nonexistent/toy.tsv",
                "--templates",
                "/nonexistent/toy.templates",
            ])),
            EXIT_DATA
        );
    }
}
