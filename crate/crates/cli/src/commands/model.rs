use super::dataset::{LoadedDataset, SplitArgs, SplitCounts};
use crate::config::{parse_choice, parse_kebab, pick};
use crate::{CliError, Context};
use chrono::NaiveDate;
use clap::{Args, ValueEnum};
use movepred_core::backtest::{write_scores, ScorePoint};
use movepred_core::dataset::{split, SplitDates, Splits};
use movepred_core::model::{checkpoint, AttentionMode, BlstmReadout, Head, Model, ModelConfig, ModelKind};
use movepred_core::text::{load_embeddings, EmbeddingTable, PriceNorm};
use movepred_core::train::{self as training, write_curves, write_predictions, Confusion, EvalReport, TrainConfig};
use movepred_core::DayRecord;
use serde::Serialize;
use std::path::PathBuf;

pub const CHECKPOINT: &str = "model.ckpt";
pub const DEFAULT_EMBED_DIM: usize = 50;

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Directory written by `build-dataset`.
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    /// Word vectors; defaults to the file the dataset was built with.
    #[arg(long, value_name = "FILE")]
    pub embeddings: Option<PathBuf>,
    /// hybrid, cnn-lg or cnn-blstm.
    #[arg(long)]
    pub model: Option<String>,
    /// sigmoid or relu.
    #[arg(long)]
    pub head: Option<String>,
    /// Embedding width when no word vectors are given.
    #[arg(long)]
    pub embed_dim: Option<usize>,
    #[arg(long)]
    pub max_len: Option<usize>,
    /// Use the reduced layer sizes (for smoke tests).
    #[arg(long)]
    pub tiny: bool,
    /// Second attention of the CNN-BLSTM path: reweight or weighted-mean.
    #[arg(long, value_parser = parse_kebab::<AttentionMode>)]
    pub second_attention: Option<AttentionMode>,
    /// BLSTM features: last-row or final-states.
    #[arg(long, value_parser = parse_kebab::<BlstmReadout>)]
    pub readout: Option<BlstmReadout>,
    /// Also update pre-trained embedding rows.
    #[arg(long)]
    pub fine_tune: bool,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Keep the training order fixed.
    #[arg(long)]
    pub no_shuffle: bool,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum SplitName {
    Train,
    Val,
    Test,
    All,
}

#[derive(Debug, Args)]
pub struct EvaluateArgs {
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    #[arg(long, value_enum, default_value_t = SplitName::Test)]
    pub split: SplitName,
    #[command(flatten)]
    pub dates: SplitArgs,
}

#[derive(Debug, Args)]
pub struct PredictArgs {
    #[arg(long, value_name = "DIR")]
    pub dataset: PathBuf,
    #[arg(long, value_name = "FILE")]
    pub checkpoint: PathBuf,
    /// Days to score; `all` includes the unlabeled tail.
    #[arg(long, value_enum, default_value_t = SplitName::All)]
    pub split: SplitName,
    #[arg(long, value_name = "DATE")]
    pub start: Option<NaiveDate>,
    #[arg(long, value_name = "DATE")]
    pub end: Option<NaiveDate>,
    #[command(flatten)]
    pub dates: SplitArgs,
}

#[derive(Debug, Serialize)]
struct SplitMetrics {
    days: usize,
    confusion: Confusion,
    accuracy: Option<f64>,
    sensitivity: Option<f64>,
    specificity: Option<f64>,
}

impl From<&EvalReport> for SplitMetrics {
    fn from(r: &EvalReport) -> Self {
        Self {
            days: r.predictions.len(),
            confusion: r.confusion,
            accuracy: r.accuracy,
            sensitivity: r.sensitivity,
            specificity: r.specificity,
        }
    }
}

fn fmt_metric(m: Option<f64>) -> String {
    m.map(|v| format!("{:.4}", v)).unwrap_or_else(|| "n/a".into())
}

fn report_line(name: &str, r: &EvalReport) -> String {
    format!(
        "{name}: {} days, accuracy {}, sensitivity {}, specificity {}",
        r.predictions.len(),
        fmt_metric(r.accuracy),
        fmt_metric(r.sensitivity),
        fmt_metric(r.specificity)
    )
}

fn split_days(splits: &Splits, name: SplitName, ds: &LoadedDataset) -> Vec<DayRecord> {
    match name {
        SplitName::Train => splits.train.clone(),
        SplitName::Val => splits.val.clone(),
        SplitName::Test => splits.test.clone(),
        SplitName::All => ds.labeled.records.clone(),
    }
}

#[derive(Debug, Serialize)]
struct TrainSettings {
    dataset: PathBuf,
    embeddings: Option<PathBuf>,
    fine_tune: bool,
    split: SplitDates,
    model: ModelConfig,
    train: TrainConfig,
}

#[derive(Debug, Serialize)]
struct TrainMetrics {
    epochs_run: usize,
    aborted: Option<String>,
    splits: SplitCounts,
    train: Option<SplitMetrics>,
    val: Option<SplitMetrics>,
    test: Option<SplitMetrics>,
}

pub fn train(ctx: &Context, a: TrainArgs) -> anyhow::Result<()> {
    let ds = LoadedDataset::load(&a.dataset)?;
    let m = &ctx.file.model;
    let t = &ctx.file.train;
    let kind: ModelKind = parse_choice(&pick(a.model, m.kind.clone(), "hybrid".into()))?;
    let head: Head = parse_choice(&pick(a.head, m.head.clone(), "sigmoid".into()))?;
    let tiny = a.tiny || m.tiny.unwrap_or(false);
    let fine_tune = a.fine_tune || m.fine_tune.unwrap_or(false);
    let embeddings = a.embeddings.or(ds.meta.embeddings.clone());
    let table = match &embeddings {
        Some(p) => load_embeddings(p, &ds.vocab, ctx.seed)?,
        None => EmbeddingTable::random(
            ds.vocab.table_rows(),
            pick(a.embed_dim, m.embed_dim, DEFAULT_EMBED_DIM),
            ctx.seed,
        ),
    };
    let mut cfg = if tiny {
        ModelConfig::tiny(kind, table.rows(), table.width())
    } else {
        ModelConfig::for_kind(kind, table.rows(), table.width())
    };
    cfg.head = head;
    if let Some(l) = a.max_len.or(m.max_len) {
        cfg.max_len = l;
    }
    if let Some(mode) = a.second_attention.or(m.second_attention) {
        cfg.cnn_blstm.second_attention = mode;
    }
    if let Some(r) = a.readout.or(m.readout) {
        cfg.cnn_blstm.readout = r;
    }
    let def = TrainConfig::default();
    let tc = TrainConfig {
        lr: pick(a.lr, t.lr, def.lr),
        batch_size: pick(a.batch_size, t.batch_size, def.batch_size),
        epochs: pick(a.epochs, t.epochs, def.epochs),
        seed: ctx.seed,
        shuffle: !a.no_shuffle && t.shuffle.unwrap_or(def.shuffle),
    };
    let dates = a.split.resolve_or(ctx, ds.meta.split);
    let splits = split(&ds.labeled, &dates)?;
    if splits.train.is_empty() {
        return Err(CliError::Data("training split is empty; check --train-end".into()).into());
    }

    let settings = TrainSettings {
        dataset: a.dataset.clone(),
        embeddings,
        fine_tune,
        split: dates,
        model: cfg.clone(),
        train: tc.clone(),
    };
    crate::output::write_run(&ctx.out, "train", ctx.seed, &settings)?;

    let model = Model::new(cfg, &table, PriceNorm::fit(&splits.train), ctx.seed, fine_tune)?;
    let outcome = training::train(&model, &splits.train, &splits.val, &tc)?;
    let out = &ctx.out;
    checkpoint::save(&outcome.model, &out.path(CHECKPOINT))?;
    out.write_with("curves.csv", |w| Ok(write_curves(&outcome.curves, w)?))?;

    let eval = |days: &[DayRecord]| -> anyhow::Result<Option<EvalReport>> {
        if days.is_empty() {
            Ok(None)
        } else {
            Ok(Some(training::evaluate(&outcome.model, days)?))
        }
    };
    let reports = [
        ("train", eval(&splits.train)?),
        ("val", eval(&splits.val)?),
        ("test", eval(&splits.test)?),
    ];
    let metrics = TrainMetrics {
        epochs_run: outcome.curves.len(),
        aborted: outcome.aborted.clone(),
        splits: SplitCounts::from(&splits),
        train: reports[0].1.as_ref().map(SplitMetrics::from),
        val: reports[1].1.as_ref().map(SplitMetrics::from),
        test: reports[2].1.as_ref().map(SplitMetrics::from),
    };
    out.write_json("metrics.json", &metrics)?;

    for c in &outcome.curves {
        println!(
            "epoch {:>3}: loss {:.4} train acc {:.4}{}",
            c.epoch,
            c.train_loss,
            c.train_acc,
            c.val_acc.map(|v| format!(" val acc {v:.4}")).unwrap_or_default()
        );
    }
    for (name, r) in &reports {
        if let Some(r) = r {
            println!("{}", report_line(name, r));
        }
    }
    println!("checkpoint written to {}", out.path(CHECKPOINT).display());
    if let Some(msg) = outcome.aborted {
        return Err(CliError::Numerical(format!("{msg}; last finite model saved")).into());
    }
    Ok(())
}

fn load_model(path: &std::path::Path) -> anyhow::Result<Model> {
    Ok(checkpoint::load(path)?)
}

pub fn evaluate(ctx: &Context, a: EvaluateArgs) -> anyhow::Result<()> {
    let ds = LoadedDataset::load(&a.dataset)?;
    let model = load_model(&a.checkpoint)?;
    let dates = a.dates.resolve_or(ctx, ds.meta.split);
    let splits = split(&ds.labeled, &dates)?;
    let days: Vec<DayRecord> = match a.split {
        SplitName::All => ds.labeled.labeled().cloned().collect(),
        s => split_days(&splits, s, &ds),
    };
    let report = training::evaluate(&model, &days)?;
    let out = &ctx.out;
    out.write_with("predictions.csv", |w| Ok(write_predictions(&report.predictions, w)?))?;
    out.write_json("metrics.json", &SplitMetrics::from(&report))?;
    crate::output::write_run(
        out,
        "evaluate",
        ctx.seed,
        &serde_json::json!({
            "dataset": a.dataset,
            "checkpoint": a.checkpoint,
            "split": a.split,
            "dates": dates,
        }),
    )?;
    let c = report.confusion;
    println!("{}", report_line(&format!("{:?}", a.split).to_lowercase(), &report));
    println!("confusion: tp {} fp {} tn {} fn {}", c.tp, c.fp, c.tn, c.fn_);
    Ok(())
}

pub fn predict(ctx: &Context, a: PredictArgs) -> anyhow::Result<()> {
    let ds = LoadedDataset::load(&a.dataset)?;
    let model = load_model(&a.checkpoint)?;
    let dates = a.dates.resolve_or(ctx, ds.meta.split);
    let splits = split(&ds.labeled, &dates)?;
    let days: Vec<DayRecord> = split_days(&splits, a.split, &ds)
        .into_iter()
        .filter(|d| a.start.is_none_or(|s| d.date >= s))
        .filter(|d| a.end.is_none_or(|e| d.date <= e))
        .collect();
    if days.is_empty() {
        return Err(CliError::Data("no days to score in the selected range".into()).into());
    }
    let scores = model.predict(&days)?;
    let points: Vec<ScorePoint> = days
        .iter()
        .zip(&scores)
        .map(|(d, &score)| ScorePoint { date: d.date, score })
        .collect();
    let out = &ctx.out;
    let path = out.write_with("scores.csv", |w| Ok(write_scores(&points, w)?))?;
    crate::output::write_run(
        out,
        "predict",
        ctx.seed,
        &serde_json::json!({
            "dataset": a.dataset,
            "checkpoint": a.checkpoint,
            "split": a.split,
            "start": a.start,
            "end": a.end,
        }),
    )?;
    println!(
        "{} scores ({} to {}) written to {}",
        points.len(),
        points[0].date,
        points[points.len() - 1].date,
        path.display()
    );
    Ok(())
}
