use crate::config::{pick, require};
use crate::{CliError, Context};
use anyhow::Context as _;
use chrono::NaiveDate;
use clap::Args;
use movepred_core::dataset::{
    align, correlation_matrix, label, load_archive, load_price_dir, load_prices, split, summarize,
    write_archive, write_labeled_csv, DatasetSummary, Field, LabeledDataset, SplitDates, Splits,
    DEFAULT_HORIZON, DEFAULT_THRESHOLD,
};
use movepred_core::text::{load_embeddings, load_tweets, tokenize, Vocabulary, DEFAULT_MIN_COUNT, DEFAULT_MIN_RETWEETS};
use movepred_core::{DayRecord, PriceBar};
use serde::{Deserialize, Serialize};
use std::path::{Path, PathBuf};

pub const ARCHIVE: &str = "dataset.jsonl";
pub const VOCAB: &str = "vocab.txt";
pub const META: &str = "meta.json";

#[derive(Debug, Args)]
pub struct BuildDatasetArgs {
    /// Price CSV, or a directory of `<TICKER>.csv` files.
    #[arg(long, value_name = "PATH")]
    pub prices: Option<PathBuf>,
    /// JSON-lines tweet corpus.
    #[arg(long, value_name = "FILE")]
    pub tweets: Option<PathBuf>,
    /// Pre-trained word vectors (`token v1 v2 ...` per line).
    #[arg(long, value_name = "FILE")]
    pub embeddings: Option<PathBuf>,
    /// Ticker to label when `--prices` holds several files.
    #[arg(long)]
    pub ticker: Option<String>,
    /// Drop tokens seen fewer times (default 5).
    #[arg(long)]
    pub min_count: Option<usize>,
    /// Drop tweets with fewer retweets (default 1).
    #[arg(long)]
    pub min_retweets: Option<u64>,
    #[arg(long)]
    pub horizon: Option<usize>,
    #[arg(long)]
    pub threshold: Option<usize>,
    #[command(flatten)]
    pub split: SplitArgs,
}

#[derive(Debug, Clone, Args)]
pub struct SplitArgs {
    /// Last day of the training split.
    #[arg(long, value_name = "DATE")]
    pub train_end: Option<NaiveDate>,
    /// Last day of the validation split.
    #[arg(long, value_name = "DATE")]
    pub val_end: Option<NaiveDate>,
    /// Last day of the test split.
    #[arg(long, value_name = "DATE")]
    pub test_end: Option<NaiveDate>,
}

impl SplitArgs {
    pub fn resolve(&self, ctx: &Context) -> SplitDates {
        self.resolve_or(ctx, SplitDates::default())
    }

    /// Flag, then config, then `def`.
    pub fn resolve_or(&self, ctx: &Context, def: SplitDates) -> SplitDates {
        let d = &ctx.file.dataset;
        SplitDates {
            train_end: pick(self.train_end, d.train_end, def.train_end),
            val_end: pick(self.val_end, d.val_end, def.val_end),
            test_end: pick(self.test_end, d.test_end, def.test_end),
        }
    }
}

/// Settings a dataset was built with; stored as `meta.json` next to it.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetMeta {
    pub ticker: String,
    pub prices: PathBuf,
    pub tweets: PathBuf,
    pub embeddings: Option<PathBuf>,
    pub min_count: usize,
    pub min_retweets: u64,
    pub horizon: usize,
    pub threshold: usize,
    pub split: SplitDates,
}

#[derive(Debug, Serialize)]
struct BuildSummary {
    ticker: String,
    vocabulary: usize,
    tweets: usize,
    tweets_dropped: usize,
    pretrained_rows: Option<usize>,
    splits: SplitCounts,
    #[serde(flatten)]
    counts: DatasetSummary,
}

#[derive(Debug, Serialize)]
pub struct SplitCounts {
    pub train: usize,
    pub val: usize,
    pub test: usize,
}

impl From<&Splits> for SplitCounts {
    fn from(s: &Splits) -> Self {
        Self {
            train: s.train.len(),
            val: s.val.len(),
            test: s.test.len(),
        }
    }
}

fn select_ticker(path: &Path, ticker: Option<String>) -> anyhow::Result<(String, Vec<PriceBar>)> {
    if path.is_file() {
        let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("prices").to_string();
        return Ok((ticker.unwrap_or(stem), load_prices(path)?));
    }
    let mut all = load_price_dir(path)?;
    match ticker {
        Some(t) => {
            let bars = all.remove(&t).ok_or_else(|| {
                let known: Vec<&String> = all.keys().collect();
                CliError::Data(format!("no price file for `{t}` in {} (have {known:?})", path.display()))
            })?;
            Ok((t, bars))
        }
        None if all.len() == 1 => Ok(all.pop_first().expect("one entry")),
        None => Err(CliError::Usage(format!(
            "{} holds {} tickers; choose one with --ticker",
            path.display(),
            all.len()
        ))
        .into()),
    }
}

pub fn build_dataset(ctx: &Context, a: BuildDatasetArgs) -> anyhow::Result<()> {
    let d = &ctx.file.dataset;
    let prices = require(a.prices, d.prices.clone(), "prices")?;
    let tweets_path = require(a.tweets, d.tweets.clone(), "tweets")?;
    let embeddings = a.embeddings.or(d.embeddings.clone());
    let min_count = pick(a.min_count, d.min_count, DEFAULT_MIN_COUNT);
    let min_retweets = pick(a.min_retweets, d.min_retweets, DEFAULT_MIN_RETWEETS);
    let horizon = pick(a.horizon, d.horizon, DEFAULT_HORIZON);
    let threshold = pick(a.threshold, d.threshold, DEFAULT_THRESHOLD);
    let dates = a.split.resolve(ctx);

    let (ticker, bars) = select_ticker(&prices, a.ticker.or(d.ticker.clone()))?;
    let tweets = load_tweets(&tweets_path, min_retweets)?;
    let vocab = Vocabulary::build(tweets.iter().map(|t| tokenize(&t.text)), min_count)?;
    let pretrained_rows = match &embeddings {
        Some(p) => Some(load_embeddings(p, &vocab, ctx.seed)?.pretrained().iter().filter(|&&b| b).count()),
        None => None,
    };
    let aligned = align(&bars, &tweets, &vocab)?;
    let dropped = aligned.assignment.iter().filter(|a| a.is_none()).count();
    let ds = label(&aligned.records, horizon, threshold)?;
    let splits = split(&ds, &dates)?;

    let meta = DatasetMeta {
        ticker: ticker.clone(),
        prices,
        tweets: tweets_path,
        embeddings,
        min_count,
        min_retweets,
        horizon,
        threshold,
        split: dates,
    };
    let out = &ctx.out;
    out.write_with(ARCHIVE, |w| Ok(write_archive(&ds.records, w)?))?;
    out.write_with("labeled.csv", |w| Ok(write_labeled_csv(&ds.records, w)?))?;
    vocab.save(&out.path(VOCAB))?;
    let labeled: Vec<DayRecord> = ds.labeled().cloned().collect();
    if labeled.len() >= 2 {
        let corr = correlation_matrix(&labeled, &Field::ALL)?;
        out.write_with("correlation.csv", |w| Ok(corr.write_csv(w)?))?;
    } else {
        log::warn!("fewer than 2 labeled days; correlation matrix skipped");
    }
    let summary = BuildSummary {
        ticker,
        vocabulary: vocab.len(),
        tweets: tweets.len(),
        tweets_dropped: dropped,
        pretrained_rows,
        splits: SplitCounts::from(&splits),
        counts: summarize(&ds, vocab.unknown_index()),
    };
    out.write_json("summary.json", &summary)?;
    out.write_json(META, &meta)?;
    crate::output::write_run(out, "build-dataset", ctx.seed, &meta)?;

    println!(
        "{}: {} trading days, {} labeled ({} up / {} down), vocabulary {}",
        summary.ticker,
        summary.counts.trading_days,
        summary.counts.labeled_days,
        summary.counts.up_days,
        summary.counts.down_days,
        summary.vocabulary
    );
    println!(
        "splits: train {} / val {} / test {}; written to {}",
        summary.splits.train,
        summary.splits.val,
        summary.splits.test,
        out.root().display()
    );
    Ok(())
}

/// A dataset directory written by `build-dataset`.
pub struct LoadedDataset {
    pub meta: DatasetMeta,
    pub vocab: Vocabulary,
    pub labeled: LabeledDataset,
}

impl LoadedDataset {
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let meta_path = dir.join(META);
        let text = std::fs::read_to_string(&meta_path)
            .with_context(|| format!("reading {}", meta_path.display()))
            .map_err(|e| CliError::Data(format!("{e:#}")))?;
        let meta: DatasetMeta = serde_json::from_str(&text)
            .map_err(|e| CliError::Data(format!("{}: {e}", meta_path.display())))?;
        let vocab = Vocabulary::load(&dir.join(VOCAB))?;
        let records = load_archive(&dir.join(ARCHIVE))?;
        let labeled = LabeledDataset {
            records,
            horizon: meta.horizon,
            threshold: meta.threshold,
        };
        Ok(Self { meta, vocab, labeled })
    }
}
