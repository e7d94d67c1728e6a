//! Command-line driver wiring the library end to end: dataset
//! synthesis, knowledge-bank construction, training, evaluation, and
//! single-axis ablation sweeps.
//!
//! Exit codes: 0 success, 2 configuration or usage error, 3 data
//! error, 4 numerical failure. Every failure prints one final
//! `error[category]: detail` line on stderr.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Parser, Subcommand};

use ancora::checkpoint::load_checkpoint;
use ancora::config::Config;
use ancora::data::{make_synthetic, Dataset, Split};
use ancora::error::{Error, ErrorCategory, Result};
use ancora::eval::{bank_fingerprint, evaluate, EvalReport};
use ancora::features::ProjectionSet;
use ancora::knowledge::{Corpus, CorpusId, KnowledgeBank};
use ancora::model::{build_reference_model, Backbone, TinyDecoder};
use ancora::train::{fit, load_train_state, TrainReport, TrainState};

mod plot;

#[derive(Parser)]
#[command(name = "ancora", version, about = "Special-token alignment training and zero-shot evaluation")]
struct Cli {
    /// Key-value config file; every key has a default, so this is optional.
    #[arg(long, global = true, value_name = "FILE")]
    config: Option<PathBuf>,

    /// Override one config key, e.g. --set train.lr=0.01. Repeatable;
    /// wins over the file and over shorthand flags.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    set: Vec<String>,

    /// Shorthand for --set train.seed=N --set data.seed=N.
    #[arg(long, global = true, value_name = "N")]
    seed: Option<u64>,

    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Generate a planted-class image-report dataset.
    Synth {
        /// Directory the dataset is written to; must be new or empty.
        #[arg(long)]
        out: PathBuf,
        /// Shorthand for --set data.classes=N.
        #[arg(long, value_name = "N")]
        classes: Option<usize>,
        /// Shorthand for --set data.per_class=N.
        #[arg(long = "per-class", value_name = "N")]
        per_class: Option<usize>,
    },
    /// Encode a category corpus into a knowledge bank.
    Bank {
        /// Directory the bank is written to; must be new or empty.
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory supplying corpus.tsv when bank.corpus=dataset.
        #[arg(long)]
        data: Option<PathBuf>,
        /// Encode with a saved backbone instead of a freshly seeded one.
        #[arg(long, value_name = "DIR")]
        checkpoint: Option<PathBuf>,
    },
    /// Train special tokens and projection heads on a dataset.
    Train {
        /// Run directory for checkpoints, logs, and plots; must be new
        /// or empty unless --resume.
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory from `synth` (or the same layout).
        #[arg(long)]
        data: PathBuf,
        /// Continue the run already in --out from its saved state.
        #[arg(long)]
        resume: bool,
        /// Pause after this step; the schedule still spans
        /// train.max_steps, so a later --resume continues seamlessly.
        #[arg(long, value_name = "N")]
        stop_at_step: Option<usize>,
    },
    /// Score one split with a trained checkpoint and write reports.
    Eval {
        /// Directory the reports are written to; must be new or empty.
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory from `synth` (or the same layout).
        #[arg(long)]
        data: PathBuf,
        /// Checkpoint directory, e.g. a train run's `last` or `best`.
        #[arg(long, value_name = "DIR")]
        checkpoint: PathBuf,
        /// Knowledge-bank directory, e.g. a train run's `bank`.
        #[arg(long, value_name = "DIR")]
        bank: PathBuf,
    },
    /// Train once per grid point along one axis and tabulate metrics.
    Ablate {
        /// Directory the grid tables are written to; must be new or empty.
        #[arg(long)]
        out: PathBuf,
        /// Dataset directory from `synth` (or the same layout).
        #[arg(long)]
        data: PathBuf,
        /// One of: token_counts, layer_depth, feature_combo,
        /// corpus_choice, lambda.
        #[arg(long)]
        axis: String,
    },
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let shown = e.render().to_string();
            if e.use_stderr() {
                eprint!("{shown}");
                eprintln!("error[config]: invalid command line");
                return ExitCode::from(2);
            }
            print!("{shown}"); // --help / --version
            return ExitCode::SUCCESS;
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            let category = e.category();
            // Display already names the category for library callers;
            // the tag carries it here, so drop the doubled prefix
            let shown = e.to_string();
            let shown = shown
                .strip_prefix(&format!("{} error: ", category.as_str()))
                .unwrap_or(&shown);
            eprintln!("error[{}]: {shown}", category.as_str());
            ExitCode::from(match category {
                ErrorCategory::Config => 2,
                ErrorCategory::Data => 3,
                ErrorCategory::Numeric => 4,
            })
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = match &cli.config {
        Some(path) => Config::from_file(path)?,
        None => Config::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.set("train.seed", &seed.to_string())?;
        cfg.set("data.seed", &seed.to_string())?;
    }
    if let Cmd::Synth { classes, per_class, .. } = &cli.cmd {
        if let Some(c) = classes {
            cfg.set("data.classes", &c.to_string())?;
        }
        if let Some(p) = per_class {
            cfg.set("data.per_class", &p.to_string())?;
        }
    }
    for spec in &cli.set {
        cfg.apply_override(spec)?;
    }

    match &cli.cmd {
        Cmd::Synth { out, .. } => cmd_synth(&cfg, out),
        Cmd::Bank { out, data, checkpoint } => {
            cmd_bank(&cfg, out, data.as_deref(), checkpoint.as_deref())
        }
        Cmd::Train { out, data, resume, stop_at_step } => {
            cmd_train(&cfg, out, data, *resume, *stop_at_step)
        }
        Cmd::Eval { out, data, checkpoint, bank } => cmd_eval(&cfg, out, data, checkpoint, bank),
        Cmd::Ablate { out, data, axis } => cmd_ablate(&cfg, out, data, axis),
    }
}

/// Create the output directory; unless `allow_existing`, refuse one
/// that already has contents so runs never overwrite each other.
fn prepare_out(dir: &Path, allow_existing: bool) -> Result<()> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    if !allow_existing {
        let mut entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
        if entries.next().is_some() {
            return Err(Error::config(format!(
                "output dir '{}' is not empty; pick a fresh directory",
                dir.display()
            )));
        }
    }
    Ok(())
}

fn write_snapshot(out: &Path, cfg: &Config) -> Result<()> {
    let argv: Vec<String> = std::env::args().collect();
    let text = format!("# {}\n{}", argv.join(" "), cfg.render_resolved());
    let path = out.join("config.resolved.txt");
    std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

fn write_file(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Fresh backbone and projection heads from the config. The heads get
/// their own seed stream so model and head inits stay independent.
fn build_from_config(cfg: &Config) -> Result<(TinyDecoder, ProjectionSet, usize)> {
    let bspec = cfg.backbone_spec()?;
    let layer = cfg.layer_index()?;
    let seed = cfg.get_u64("train.seed");
    let model = build_reference_model(
        &bspec,
        cfg.get_usize("model.image_tokens"),
        cfg.get_usize("model.text_tokens"),
        seed,
    )?;
    let projections = ProjectionSet::new(
        bspec.hidden_dim,
        cfg.get_usize("proj.feature_dim"),
        cfg.get_usize("proj.depth"),
        cfg.get_bool("proj.normalize"),
        cfg.get_bool("proj.separate_local_heads"),
        seed.wrapping_add(1),
    )?;
    Ok((model, projections, layer))
}

fn load_corpus(cfg: &Config, data: Option<&Path>) -> Result<Corpus> {
    let mut corpus = match cfg.get("bank.corpus") {
        "dataset" => {
            let dir = data.ok_or_else(|| {
                Error::config("bank.corpus=dataset needs --data to locate corpus.tsv")
            })?;
            Corpus::load(CorpusId::Custom, &dir.join("corpus.tsv"))?
        }
        "diseases_14" => Corpus::builtin(CorpusId::Diseases14)?,
        "entities_75" => Corpus::builtin(CorpusId::Entities75)?,
        other => unreachable!("schema admits corpus '{other}'"),
    };
    if cfg.get("bank.corpus_text") == "name_only" {
        for entry in &mut corpus.entries {
            entry.description = entry.name.clone();
        }
    }
    Ok(corpus)
}

fn build_bank(
    cfg: &Config,
    model: &TinyDecoder,
    projections: &ProjectionSet,
    corpus: Corpus,
    layer: usize,
) -> Result<KnowledgeBank> {
    KnowledgeBank::build(
        model,
        projections,
        corpus,
        cfg.get("prompts.text"),
        cfg.get("prompts.knowledge"),
        layer,
    )
}

fn cmd_synth(cfg: &Config, out: &Path) -> Result<()> {
    prepare_out(out, false)?;
    write_snapshot(out, cfg)?;
    let spec = cfg.synthetic_spec()?;
    let dataset = make_synthetic(&spec, out)?;
    let m = &dataset.manifest;
    println!(
        "dataset '{}': {} samples over {} categories ({} train / {} val / {} test) at {}",
        m.name,
        dataset.samples.len(),
        m.category_names.len(),
        m.counts.get(&Split::Train).copied().unwrap_or(0),
        m.counts.get(&Split::Val).copied().unwrap_or(0),
        m.counts.get(&Split::Test).copied().unwrap_or(0),
        out.display()
    );
    Ok(())
}

fn cmd_bank(
    cfg: &Config,
    out: &Path,
    data: Option<&Path>,
    checkpoint: Option<&Path>,
) -> Result<()> {
    prepare_out(out, false)?;
    write_snapshot(out, cfg)?;
    let corpus = load_corpus(cfg, data)?;
    let bank = match checkpoint {
        Some(dir) => {
            let ck = load_checkpoint(dir)?;
            let layer = cfg.layer_index_for(ck.model.spec().num_layers)?;
            build_bank(cfg, &ck.model, &ck.projections, corpus, layer)?
        }
        None => {
            let (model, projections, layer) = build_from_config(cfg)?;
            build_bank(cfg, &model, &projections, corpus, layer)?
        }
    };
    bank.save_dir(out)?;
    println!(
        "bank: {} categories at layer {}, fingerprint {}, saved to {}",
        bank.num_categories(),
        bank.layer_index,
        bank_fingerprint(&bank),
        out.display()
    );
    Ok(())
}

fn cmd_train(
    cfg: &Config,
    out: &Path,
    data: &Path,
    resume: bool,
    stop_at_step: Option<usize>,
) -> Result<()> {
    prepare_out(out, resume)?;
    write_snapshot(out, cfg)?;
    let dataset = Dataset::load(data)?;
    let train_cfg = cfg.train_config()?;

    let (mut model, mut projections, mut bank, state) = if resume {
        let ck = load_checkpoint(&out.join("last"))?;
        let bank = KnowledgeBank::load_dir(&out.join("bank"))?;
        let state: TrainState = load_train_state(&out.join("state"))?;
        (ck.model, ck.projections, bank, Some(state))
    } else {
        let (model, projections, layer) = build_from_config(cfg)?;
        let corpus = load_corpus(cfg, Some(data))?;
        let bank = build_bank(cfg, &model, &projections, corpus, layer)?;
        (model, projections, bank, None)
    };

    let started = Instant::now();
    let (report, _) = fit(
        &mut model,
        &mut projections,
        &mut bank,
        &dataset,
        &train_cfg,
        Some(out),
        state,
        stop_at_step,
    )?;
    let curve = plot::loss_curve_from_log(&out.join("train_log.jsonl"))?;
    write_file(&out.join("loss_curve.svg"), &curve)?;

    print_train_summary(&report, started, out);
    Ok(())
}

fn print_train_summary(report: &TrainReport, started: Instant, out: &Path) {
    let tail = report.log.last().map_or_else(
        || "no steps run".to_string(),
        |l| format!("final L_total {:.4} (ca {:.4} / cg {:.4})", l.l_total, l.l_ca, l.l_cg),
    );
    let best = match (report.best_val_metric, report.best_step) {
        (Some(m), Some(s)) => format!(", best val metric {m:.4} at step {s}"),
        _ => String::new(),
    };
    println!(
        "trained {} steps in {:.1?}: {tail}{best}; artifacts in {}",
        report.log.len(),
        started.elapsed(),
        out.display()
    );
}

fn cmd_eval(cfg: &Config, out: &Path, data: &Path, checkpoint: &Path, bank: &Path) -> Result<()> {
    prepare_out(out, false)?;
    write_snapshot(out, cfg)?;
    let dataset = Dataset::load(data)?;
    let ck = load_checkpoint(checkpoint)?;
    let bank = KnowledgeBank::load_dir(bank)?;
    let report = evaluate(
        &ck.model,
        &ck.projections,
        &bank,
        &dataset,
        Split::parse(cfg.get("eval.split"))?,
        cfg.threshold_policy(),
        &cfg.score_options()?,
    )?;
    write_file(&out.join("report.json"), &report.to_json())?;
    write_file(&out.join("report.txt"), &report.to_text_table())?;
    println!(
        "split {} under mode {} ({} samples):",
        cfg.get("eval.split"),
        report.mode,
        report.samples
    );
    print!("{}", report.to_text_table());
    Ok(())
}

struct AblationRow {
    label: String,
    outcome: std::result::Result<(EvalReport, Option<f64>), Error>,
}

fn axis_cells(cfg: &Config, axis: &str) -> Result<Vec<(String, Vec<(String, String)>)>> {
    let kv = |k: &str, v: &str| (k.to_string(), v.to_string());
    let cells = match axis {
        "token_counts" => [(1usize, 1usize), (4, 8), (16, 32)]
            .iter()
            .map(|&(i, t)| {
                (
                    format!("{i}img/{t}txt"),
                    vec![
                        kv("model.image_tokens", &i.to_string()),
                        kv("model.text_tokens", &t.to_string()),
                    ],
                )
            })
            .collect(),
        "layer_depth" => (0..=cfg.get_usize("model.num_layers"))
            .map(|l| (format!("layer {l}"), vec![kv("model.layer_index", &l.to_string())]))
            .collect(),
        "feature_combo" => ["local_only", "global_only", "both"]
            .iter()
            .map(|&m| (m.to_string(), vec![kv("train.feature_mode", m)]))
            .collect(),
        "corpus_choice" => ["description", "name_only"]
            .iter()
            .map(|&c| (c.to_string(), vec![kv("bank.corpus_text", c)]))
            .collect(),
        "lambda" => ["0", "0.5", "1"]
            .iter()
            .map(|&l| (format!("lambda {l}"), vec![kv("train.lambda", l)]))
            .collect(),
        other => {
            return Err(Error::config(format!(
                "unknown ablation axis '{other}'; expected token_counts, layer_depth, \
                 feature_combo, corpus_choice, or lambda"
            )))
        }
    };
    Ok(cells)
}

/// One grid point: fresh model, bank, full training schedule, then an
/// evaluation under the cell's own config.
fn run_cell(cfg: &Config, dataset: &Dataset, data: &Path) -> Result<(EvalReport, Option<f64>)> {
    let (mut model, mut projections, layer) = build_from_config(cfg)?;
    let corpus = load_corpus(cfg, Some(data))?;
    let mut bank = build_bank(cfg, &model, &projections, corpus, layer)?;
    let train_cfg = cfg.train_config()?;
    let (report, _) = fit(
        &mut model,
        &mut projections,
        &mut bank,
        dataset,
        &train_cfg,
        None,
        None,
        None,
    )?;
    let eval = evaluate(
        &model,
        &projections,
        &bank,
        dataset,
        Split::parse(cfg.get("eval.split"))?,
        cfg.threshold_policy(),
        &cfg.score_options()?,
    )?;
    Ok((eval, report.best_val_metric))
}

fn cmd_ablate(cfg: &Config, out: &Path, data: &Path, axis: &str) -> Result<()> {
    let cells = axis_cells(cfg, axis)?;
    prepare_out(out, false)?;
    write_snapshot(out, cfg)?;
    let dataset = Dataset::load(data)?;

    let mut rows = Vec::new();
    for (label, overrides) in cells {
        let started = Instant::now();
        let outcome = (|| {
            let mut cell_cfg = cfg.clone();
            for (key, value) in &overrides {
                cell_cfg.set(key, value)?;
            }
            run_cell(&cell_cfg, &dataset, data)
        })();
        match &outcome {
            Ok((eval, _)) => println!(
                "{label}: macro AUC {} in {:.1?}",
                eval.macro_auc.map_or_else(|| "n/a".to_string(), |a| format!("{a:.4}")),
                started.elapsed()
            ),
            Err(e) => println!("{label}: failed[{}] {e}", e.category().as_str()),
        }
        rows.push(AblationRow { label, outcome });
    }

    let json = ablation_json(axis, &rows);
    write_file(&out.join("ablation.json"), &json)?;
    let table = ablation_table(axis, &rows);
    write_file(&out.join("ablation.txt"), &table)?;
    let bars: Vec<(String, Option<f64>)> = rows
        .iter()
        .map(|r| {
            (
                r.label.clone(),
                r.outcome.as_ref().ok().and_then(|(e, _)| e.macro_auc),
            )
        })
        .collect();
    let chart = plot::metric_bars(&format!("macro AUC by {axis}"), &bars);
    write_file(&out.join("ablation.svg"), &chart)?;
    print!("{table}");
    Ok(())
}

fn ablation_json(axis: &str, rows: &[AblationRow]) -> String {
    let rows: Vec<serde_json::Value> = rows
        .iter()
        .map(|r| match &r.outcome {
            Ok((eval, best_val)) => serde_json::json!({
                "label": r.label,
                "macro_auc": eval.macro_auc,
                "macro_f1": eval.macro_f1,
                "macro_acc": eval.macro_acc,
                "argmax_accuracy": eval.argmax_accuracy,
                "best_val_metric": best_val,
                "error": serde_json::Value::Null,
            }),
            Err(e) => serde_json::json!({
                "label": r.label,
                "error": format!("[{}] {e}", e.category().as_str()),
            }),
        })
        .collect();
    serde_json::to_string_pretty(&serde_json::json!({ "axis": axis, "rows": rows }))
        .expect("ablation rows serialize")
}

fn ablation_table(axis: &str, rows: &[AblationRow]) -> String {
    let label_w = rows
        .iter()
        .map(|r| r.label.len())
        .chain([axis.len()])
        .max()
        .unwrap_or(8);
    let fmt_opt = |v: Option<f64>| v.map_or_else(|| "     -".to_string(), |x| format!("{x:.4}"));
    let mut out = format!(
        "{:label_w$}  {:>9}  {:>9}  {:>9}  {:>9}\n",
        axis, "macro_auc", "macro_f1", "macro_acc", "argmax"
    );
    for r in rows {
        match &r.outcome {
            Ok((e, _)) => out.push_str(&format!(
                "{:label_w$}  {:>9}  {:>9.4}  {:>9.4}  {:>9}\n",
                r.label,
                fmt_opt(e.macro_auc),
                e.macro_f1,
                e.macro_acc,
                fmt_opt(e.argmax_accuracy),
            )),
            Err(e) => out.push_str(&format!(
                "{:label_w$}  failed[{}]: {e}\n",
                r.label,
                e.category().as_str()
            )),
        }
    }
    out
}
