use crate::config::{parse_choice, pick};
use crate::{CliError, Context};
use anyhow::Context as _;
use chrono::NaiveDate;
use clap::{Args, ValueEnum};
use movepred_core::backtest::{
    load_scores, mean, monte_carlo, percent, sample_std, simulate, t_critical, t_test, write_mc_csv,
    write_scores, LedgerSummary, ScorePoint, StrategyConfig, StrategyKind, TradeLedger, DEFAULT_COST_RATE,
    DEFAULT_SHARES,
};
use movepred_core::dataset::{load_price_dir, load_prices};
use movepred_core::indicators::{
    actions_to_scores, macd, sma_signal, write_macd_csv, write_sma_csv, MACD_FAST, MACD_SIGNAL, MACD_SLOW,
    SMA_WINDOW,
};
use movepred_core::PriceBar;
use serde::Serialize;
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

pub const DEFAULT_RUNS: usize = 100;
pub const DEFAULT_PICK: usize = 6;
pub const DEFAULT_ALPHA: f64 = 0.05;

#[derive(Debug, Clone, Args)]
pub struct StrategyArgs {
    /// 5050, 6040, hold1 or hold2.
    #[arg(long)]
    pub strategy: Option<String>,
    /// Transaction cost as a fraction of notional.
    #[arg(long)]
    pub cost_rate: Option<f64>,
    /// Shares per trade.
    #[arg(long)]
    pub shares: Option<f64>,
    /// First day of the backtest period.
    #[arg(long, value_name = "DATE")]
    pub start: Option<NaiveDate>,
    /// Last day of the backtest period.
    #[arg(long, value_name = "DATE")]
    pub end: Option<NaiveDate>,
}

impl StrategyArgs {
    fn resolve(&self, ctx: &Context, default_kind: &str) -> anyhow::Result<StrategyConfig> {
        let s = &ctx.file.strategy;
        let kind: StrategyKind = parse_choice(&pick(self.strategy.clone(), s.kind.clone(), default_kind.into()))?;
        let mut cfg = StrategyConfig::new(kind);
        cfg.cost_rate = pick(self.cost_rate, s.cost_rate, DEFAULT_COST_RATE);
        cfg.shares = pick(self.shares, s.shares, DEFAULT_SHARES);
        cfg.start_date = self.start.or(s.start);
        cfg.end_date = self.end.or(s.end);
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct BacktestArgs {
    /// Price CSV of one ticker.
    #[arg(long, value_name = "FILE")]
    pub prices: PathBuf,
    /// `Date,Score` CSV, as written by `predict`.
    #[arg(long, value_name = "FILE")]
    pub scores: PathBuf,
    #[command(flatten)]
    pub strategy: StrategyArgs,
}

#[derive(Debug, Args)]
pub struct McArgs {
    /// Directory of `<TICKER>.csv` price files.
    #[arg(long, value_name = "DIR")]
    pub prices: PathBuf,
    /// Directory of `<TICKER>.csv` score files.
    #[arg(long, value_name = "DIR")]
    pub scores: PathBuf,
    /// Number of portfolios to draw.
    #[arg(long)]
    pub runs: Option<usize>,
    /// Tickers per portfolio.
    #[arg(long)]
    pub pick: Option<usize>,
    #[command(flatten)]
    pub strategy: StrategyArgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Indicator {
    Macd,
    Sma,
}

#[derive(Debug, Args)]
pub struct BaselineArgs {
    /// Price CSV of one ticker.
    #[arg(long, value_name = "FILE")]
    pub prices: PathBuf,
    #[arg(long, value_enum)]
    pub indicator: Option<Indicator>,
    /// SMA window.
    #[arg(long)]
    pub window: Option<usize>,
    /// MACD fast EMA period.
    #[arg(long)]
    pub fast: Option<usize>,
    /// MACD slow EMA period.
    #[arg(long)]
    pub slow: Option<usize>,
    /// MACD signal EMA period.
    #[arg(long)]
    pub signal: Option<usize>,
    #[arg(long, value_name = "DATE")]
    pub start: Option<NaiveDate>,
    #[arg(long, value_name = "DATE")]
    pub end: Option<NaiveDate>,
    #[arg(long)]
    pub cost_rate: Option<f64>,
    #[arg(long)]
    pub shares: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum ReturnKind {
    /// Net return of each round trip (`trades.csv`, column `Return`).
    Trade,
    /// Weighted daily returns (`returns.csv`, column `R`).
    Daily,
}

impl ReturnKind {
    fn file(self) -> &'static str {
        match self {
            ReturnKind::Trade => "trades.csv",
            ReturnKind::Daily => "returns.csv",
        }
    }

    fn column(self) -> &'static str {
        match self {
            ReturnKind::Trade => "Return",
            ReturnKind::Daily => "R",
        }
    }
}

#[derive(Debug, Args)]
pub struct TtestArgs {
    /// First sample: a backtest output directory or a CSV file.
    #[arg(long, value_name = "PATH")]
    pub a: PathBuf,
    /// Second sample.
    #[arg(long, value_name = "PATH")]
    pub b: PathBuf,
    /// Which returns to compare when given directories.
    #[arg(long, value_enum, default_value_t = ReturnKind::Trade)]
    pub returns: ReturnKind,
    /// Column to read; defaults to the one matching `--returns`.
    #[arg(long)]
    pub column: Option<String>,
    /// Significance level of the reported critical value.
    #[arg(long, default_value_t = DEFAULT_ALPHA)]
    pub alpha: f64,
}

fn print_summary(label: &str, s: &LedgerSummary) {
    let opt = |v: Option<f64>| v.map(percent).unwrap_or_else(|| "n/a".into());
    println!(
        "{label}: profit {:.2}, return {}, E(R) {}, Std(R) {}, trades {}{}",
        s.profit,
        opt(s.return_on_capital),
        opt(s.expected_return),
        opt(s.std_return),
        s.n_trades,
        if s.forced_close { " (closed on last day)" } else { "" }
    );
}

fn write_ledger(ctx: &Context, ledger: &TradeLedger) -> anyhow::Result<LedgerSummary> {
    let out = &ctx.out;
    out.write_with("ledger.csv", |w| Ok(ledger.write_csv(w)?))?;
    out.write_with("returns.csv", |w| Ok(ledger.write_returns_csv(w)?))?;
    out.write_with("trades.csv", |w| Ok(ledger.write_trades_csv(w)?))?;
    let summary = ledger.summary();
    out.write_json("summary.json", &summary)?;
    Ok(summary)
}

pub fn backtest(ctx: &Context, a: BacktestArgs) -> anyhow::Result<()> {
    let cfg = a.strategy.resolve(ctx, "6040")?;
    let prices = load_prices(&a.prices)?;
    let scores = load_scores(&a.scores)?;
    crate::output::write_run(
        &ctx.out,
        "backtest",
        ctx.seed,
        &serde_json::json!({ "prices": a.prices, "scores": a.scores, "strategy": cfg }),
    )?;
    let ledger = simulate(&prices, &scores, &cfg)?;
    let summary = write_ledger(ctx, &ledger)?;
    print_summary("backtest", &summary);
    Ok(())
}

fn csv_stems(dir: &Path) -> anyhow::Result<BTreeMap<String, PathBuf>> {
    let entries = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))
        .map_err(|e| CliError::Data(format!("{e:#}")))?;
    let mut out = BTreeMap::new();
    for entry in entries {
        let path = entry?.path();
        if path.extension().and_then(|e| e.to_str()) == Some("csv") {
            if let Some(stem) = path.file_stem().and_then(|s| s.to_str()) {
                out.insert(stem.to_string(), path);
            }
        }
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct McSummary {
    runs: usize,
    pick: usize,
    tickers: usize,
    mean_profit: Option<f64>,
    std_profit: Option<f64>,
    #[serde(rename = "mean_E(R)")]
    mean_expected_return: Option<f64>,
    #[serde(rename = "mean_Std(R)")]
    mean_std_return: Option<f64>,
}

pub fn mc(ctx: &Context, a: McArgs) -> anyhow::Result<()> {
    let cfg = a.strategy.resolve(ctx, "6040")?;
    let runs = pick(a.runs, ctx.file.mc.runs, DEFAULT_RUNS);
    let n_pick = pick(a.pick, ctx.file.mc.pick, DEFAULT_PICK);
    let prices = load_price_dir(&a.prices)?;
    let score_files = csv_stems(&a.scores)?;
    let mut ledgers = BTreeMap::new();
    for (ticker, bars) in &prices {
        let Some(path) = score_files.get(ticker) else {
            log::warn!("{ticker}: no score file in {}; skipped", a.scores.display());
            continue;
        };
        let scores = load_scores(path)?;
        let ledger = simulate(bars, &scores, &cfg).with_context(|| format!("backtesting {ticker}"))?;
        ledgers.insert(ticker.clone(), ledger);
    }
    if ledgers.len() < n_pick {
        return Err(CliError::Data(format!(
            "{} tickers have both prices and scores; --pick {n_pick} needs at least that many",
            ledgers.len()
        ))
        .into());
    }
    crate::output::write_run(
        &ctx.out,
        "mc",
        ctx.seed,
        &serde_json::json!({
            "prices": a.prices,
            "scores": a.scores,
            "runs": runs,
            "pick": n_pick,
            "strategy": cfg,
        }),
    )?;
    let results = monte_carlo(&ledgers, runs, n_pick, ctx.seed)?;
    let out = &ctx.out;
    out.write_with("mc.csv", |w| Ok(write_mc_csv(&results, w)?))?;
    let per_ticker: BTreeMap<&String, LedgerSummary> = ledgers.iter().map(|(t, l)| (t, l.summary())).collect();
    out.write_json("tickers.json", &per_ticker)?;
    let profits: Vec<f64> = results.iter().map(|r| r.profit).collect();
    let ers: Vec<f64> = results.iter().map(|r| r.expected_return).collect();
    let stds: Vec<f64> = results.iter().filter_map(|r| r.std_return).collect();
    let summary = McSummary {
        runs,
        pick: n_pick,
        tickers: ledgers.len(),
        mean_profit: mean(&profits),
        std_profit: sample_std(&profits),
        mean_expected_return: mean(&ers),
        mean_std_return: mean(&stds),
    };
    out.write_json("mc_summary.json", &summary)?;
    let opt = |v: Option<f64>, f: fn(f64) -> String| v.map(f).unwrap_or_else(|| "n/a".into());
    println!(
        "{runs} portfolios of {n_pick} from {} tickers: mean profit {}, mean E(R) {}, mean Std(R) {}",
        ledgers.len(),
        opt(summary.mean_profit, |v| format!("{v:.2}")),
        opt(summary.mean_expected_return, percent),
        opt(summary.mean_std_return, percent)
    );
    Ok(())
}

fn period(bars: &[PriceBar], start: Option<NaiveDate>, end: Option<NaiveDate>) -> Vec<PriceBar> {
    bars.iter()
        .filter(|b| start.is_none_or(|s| b.date >= s))
        .filter(|b| end.is_none_or(|e| b.date <= e))
        .copied()
        .collect()
}

/// Indicators are computed over the requested period only and replayed
/// through the backtest with 60-40 thresholds.
pub fn baseline(ctx: &Context, a: BaselineArgs) -> anyhow::Result<()> {
    let b = &ctx.file.baseline;
    let s = &ctx.file.strategy;
    let indicator = match (a.indicator, b.indicator.as_deref()) {
        (Some(i), _) => i,
        (None, Some(name)) => Indicator::from_str(name, true).map_err(CliError::Usage)?,
        (None, None) => Indicator::Macd,
    };
    let bars = period(&load_prices(&a.prices)?, a.start.or(s.start), a.end.or(s.end));
    if bars.is_empty() {
        return Err(CliError::Data("no trading days in the selected period".into()).into());
    }
    let dates: Vec<NaiveDate> = bars.iter().map(|b| b.date).collect();
    let closes: Vec<f64> = bars.iter().map(|b| b.adj_close).collect();
    let out = &ctx.out;
    let (actions, params) = match indicator {
        Indicator::Macd => {
            let fast = pick(a.fast, b.fast, MACD_FAST);
            let slow = pick(a.slow, b.slow, MACD_SLOW);
            let signal = pick(a.signal, b.signal, MACD_SIGNAL);
            let m = macd(&closes, fast, slow, signal)?;
            out.write_with("macd.csv", |w| Ok(write_macd_csv(&dates, &m, w)?))?;
            (m.actions, serde_json::json!({ "fast": fast, "slow": slow, "signal": signal }))
        }
        Indicator::Sma => {
            let window = pick(a.window, b.window, SMA_WINDOW);
            let sm = sma_signal(&closes, window)?;
            out.write_with("sma.csv", |w| Ok(write_sma_csv(&dates, &sm, w)?))?;
            (sm.actions, serde_json::json!({ "window": window }))
        }
    };
    let scores: Vec<ScorePoint> = dates
        .iter()
        .zip(actions_to_scores(&actions))
        .map(|(&date, score)| ScorePoint { date, score })
        .collect();
    out.write_with("scores.csv", |w| Ok(write_scores(&scores, w)?))?;
    let mut cfg = StrategyConfig::new(StrategyKind::SixtyForty);
    cfg.cost_rate = pick(a.cost_rate, s.cost_rate, DEFAULT_COST_RATE);
    cfg.shares = pick(a.shares, s.shares, DEFAULT_SHARES);
    crate::output::write_run(
        out,
        "baseline",
        ctx.seed,
        &serde_json::json!({
            "prices": a.prices,
            "indicator": indicator,
            "parameters": params,
            "strategy": cfg,
            "start": dates[0],
            "end": dates[dates.len() - 1],
        }),
    )?;
    let ledger = simulate(&bars, &scores, &cfg)?;
    let summary = write_ledger(ctx, &ledger)?;
    print_summary(&format!("{indicator:?}").to_lowercase(), &summary);
    Ok(())
}

fn read_column(path: &Path, column: &str) -> anyhow::Result<Vec<f64>> {
    let name = path.display().to_string();
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(path)
        .map_err(|e| CliError::Data(format!("{name}: {e}")))?;
    let headers = rdr.headers().map_err(|e| CliError::Data(format!("{name}: {e}")))?;
    let idx = headers
        .iter()
        .position(|h| h == column)
        .ok_or_else(|| CliError::Data(format!("{name}: no column `{column}` (have {:?})", headers)))?;
    let mut out = Vec::new();
    for (i, rec) in rdr.records().enumerate() {
        let rec = rec.map_err(|e| CliError::Data(format!("{name}: {e}")))?;
        let cell = rec.get(idx).unwrap_or("");
        let v: f64 = cell
            .parse()
            .map_err(|_| CliError::Data(format!("{name}:{}: `{cell}` is not a number", i + 2)))?;
        if !v.is_finite() {
            return Err(CliError::Data(format!("{name}:{}: non-finite value", i + 2)).into());
        }
        out.push(v);
    }
    Ok(out)
}

#[derive(Debug, Serialize)]
struct TtestOutput {
    returns: ReturnKind,
    column: String,
    n_a: usize,
    n_b: usize,
    mean_a: Option<f64>,
    mean_b: Option<f64>,
    /// `false` when both samples have zero variance.
    defined: bool,
    t: Option<f64>,
    df: Option<f64>,
    alpha: f64,
    critical_value: Option<f64>,
    p_two_sided: Option<f64>,
    p_upper: Option<f64>,
    significant: Option<bool>,
}

pub fn ttest(ctx: &Context, a: TtestArgs) -> anyhow::Result<()> {
    if !(a.alpha > 0.0 && a.alpha < 1.0) {
        return Err(CliError::Usage(format!("--alpha must be in (0, 1), got {}", a.alpha)).into());
    }
    let column = a.column.clone().unwrap_or_else(|| a.returns.column().to_string());
    let source = |p: &Path| if p.is_dir() { p.join(a.returns.file()) } else { p.to_path_buf() };
    let (pa, pb) = (source(&a.a), source(&a.b));
    let xa = read_column(&pa, &column)?;
    let xb = read_column(&pb, &column)?;
    for (p, x) in [(&pa, &xa), (&pb, &xb)] {
        if x.len() < 2 {
            return Err(CliError::Data(format!(
                "{}: {} value(s) in `{column}`; the t-test needs at least 2 per sample",
                p.display(),
                x.len()
            ))
            .into());
        }
    }
    let res = t_test(&xa, &xb)?;
    let critical_value = res.as_ref().map(|r| t_critical(r.df, a.alpha)).transpose()?;
    let output = TtestOutput {
        returns: a.returns,
        column: column.clone(),
        n_a: xa.len(),
        n_b: xb.len(),
        mean_a: mean(&xa),
        mean_b: mean(&xb),
        defined: res.is_some(),
        t: res.as_ref().map(|r| r.t),
        df: res.as_ref().map(|r| r.df),
        alpha: a.alpha,
        critical_value,
        p_two_sided: res.as_ref().map(|r| r.p_two_sided),
        p_upper: res.as_ref().map(|r| r.p_upper),
        significant: res.as_ref().map(|r| r.p_two_sided < a.alpha),
    };
    ctx.out.write_json("ttest.json", &output)?;
    crate::output::write_run(
        &ctx.out,
        "ttest",
        ctx.seed,
        &serde_json::json!({ "a": pa, "b": pb, "returns": a.returns, "column": column, "alpha": a.alpha }),
    )?;
    match &res {
        Some(r) => println!(
            "t = {:.4}, df = {:.2}, critical {:.4}, p two-sided {:.4}, p upper {:.4}",
            r.t,
            r.df,
            critical_value.unwrap_or(f64::NAN),
            r.p_two_sided,
            r.p_upper
        ),
        None => println!("t-test undefined: both samples have zero variance"),
    }
    Ok(())
}

