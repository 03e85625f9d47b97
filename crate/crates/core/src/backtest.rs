//! Score-driven trading simulation, portfolio statistics, Monte Carlo
//! ticker sampling and Welch's t-test.

use crate::error::{Error, Result};
use crate::record::PriceBar;
use crate::rng::{self, streams};
use chrono::NaiveDate;
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, StudentsT};
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{Read, Write};
use std::path::Path;

pub const DEFAULT_COST_RATE: f64 = 0.003;
pub const DEFAULT_SHARES: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StrategyKind {
    FiftyFifty,
    SixtyForty,
    /// Enter on the first BUY signal, exit on the last SELL signal after it.
    HoldSignal,
    /// Enter on the first day, exit on the last.
    HoldPeriod,
}

impl std::str::FromStr for StrategyKind {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "5050" | "fifty_fifty" | "50-50" => Ok(Self::FiftyFifty),
            "6040" | "sixty_forty" | "60-40" => Ok(Self::SixtyForty),
            "hold1" | "hold_signal" => Ok(Self::HoldSignal),
            "hold2" | "hold_period" => Ok(Self::HoldPeriod),
            other => Err(format!("unknown strategy `{other}` (5050, 6040, hold1, hold2)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrategyConfig {
    pub kind: StrategyKind,
    pub buy_threshold: f64,
    pub sell_threshold: f64,
    pub cost_rate: f64,
    pub shares: f64,
    pub start_date: Option<NaiveDate>,
    pub end_date: Option<NaiveDate>,
}

impl StrategyConfig {
    pub fn new(kind: StrategyKind) -> Self {
        let (buy, sell) = match kind {
            StrategyKind::SixtyForty => (0.6, 0.4),
            _ => (0.5, 0.5),
        };
        Self {
            kind,
            buy_threshold: buy,
            sell_threshold: sell,
            cost_rate: DEFAULT_COST_RATE,
            shares: DEFAULT_SHARES,
            start_date: None,
            end_date: None,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0 <= self.sell_threshold
            && self.sell_threshold <= self.buy_threshold
            && self.buy_threshold <= 1.0)
        {
            return Err(Error::Contract(format!(
                "thresholds must satisfy 0 <= sell ({}) <= buy ({}) <= 1",
                self.sell_threshold, self.buy_threshold
            )));
        }
        if !(self.cost_rate >= 0.0) {
            return Err(Error::Contract("cost rate must be >= 0".into()));
        }
        if !(self.shares > 0.0) {
            return Err(Error::Contract("share count must be positive".into()));
        }
        if let (Some(s), Some(e)) = (self.start_date, self.end_date) {
            if s > e {
                return Err(Error::Contract(format!("start {s} is after end {e}")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum Action {
    Buy,
    Sell,
    Hold,
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Action::Buy => "BUY",
            Action::Sell => "SELL",
            Action::Hold => "HOLD",
        })
    }
}

/// `score >= buy` is BUY, `score < sell` is SELL, anything between is HOLD.
pub fn signal(score: f64, cfg: &StrategyConfig) -> Action {
    if score >= cfg.buy_threshold {
        Action::Buy
    } else if score < cfg.sell_threshold {
        Action::Sell
    } else {
        Action::Hold
    }
}

pub fn daily_return(p: f64, p_prev: f64) -> Result<f64> {
    if !(p > 0.0 && p_prev > 0.0) {
        return Err(Error::Data(format!("non-positive price ({p_prev} -> {p})")));
    }
    Ok(p / p_prev - 1.0)
}

pub fn weighted_return(w_prev: f64, r: f64) -> f64 {
    w_prev * r
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerEvent {
    pub date: NaiveDate,
    /// Executed action; signals that could not execute are recorded as HOLD.
    pub action: Action,
    pub price: f64,
    pub cost: f64,
    /// Shares held after the action.
    pub position: f64,
    pub cash_delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeLedger {
    pub events: Vec<LedgerEvent>,
    /// Sum of cash deltas.
    pub profit: f64,
    pub forced_close: bool,
    /// Fills (buys plus sells).
    pub n_trades: usize,
    /// `r_t` for days `1..n`.
    pub daily_returns: Vec<f64>,
    /// `R_t = w_{t-1} r_t` for days `1..n`, with `w = 1` while long.
    pub weighted_returns: Vec<f64>,
    /// Net profit of each round trip over its buy notional.
    pub trade_returns: Vec<f64>,
    /// `profit / (shares · first buy price)`, `None` without trades.
    pub return_on_capital: Option<f64>,
    /// `Π(1 + R_t) − 1` (costs excluded).
    pub cumulative_return: f64,
}

impl TradeLedger {
    pub fn dates(&self) -> impl Iterator<Item = NaiveDate> + '_ {
        self.events.iter().map(|e| e.date)
    }

    /// `Date,Action,Price,Cost,Position,CashDelta`.
    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["Date", "Action", "Price", "Cost", "Position", "CashDelta"])?;
        for e in &self.events {
            wtr.write_record([
                e.date.to_string(),
                e.action.to_string(),
                e.price.to_string(),
                e.cost.to_string(),
                e.position.to_string(),
                e.cash_delta.to_string(),
            ])?;
        }
        wtr.flush().map_err(|e| Error::io("ledger csv", e))
    }

    /// `Date,r,R` for every day after the first.
    pub fn write_returns_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["Date", "r", "R"])?;
        for ((e, r), wr) in self.events.iter().skip(1).zip(&self.daily_returns).zip(&self.weighted_returns) {
            wtr.write_record([e.date.to_string(), r.to_string(), wr.to_string()])?;
        }
        wtr.flush().map_err(|e| Error::io("returns csv", e))
    }

    /// `Entry,Exit,Return`, one row per round trip.
    pub fn write_trades_csv<W: Write>(&self, w: W) -> Result<()> {
        let buys = self.events.iter().filter(|e| e.action == Action::Buy);
        let sells = self.events.iter().filter(|e| e.action == Action::Sell);
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["Entry", "Exit", "Return"])?;
        for ((b, s), r) in buys.zip(sells).zip(&self.trade_returns) {
            wtr.write_record([b.date.to_string(), s.date.to_string(), r.to_string()])?;
        }
        wtr.flush().map_err(|e| Error::io("trades csv", e))
    }

    pub fn summary(&self) -> LedgerSummary {
        LedgerSummary {
            profit: self.profit,
            return_on_capital: self.return_on_capital,
            cumulative_return: self.cumulative_return,
            mean_trade_return: mean(&self.trade_returns),
            expected_return: mean(&self.weighted_returns),
            std_return: sample_std(&self.weighted_returns),
            sharpe: sharpe(&self.weighted_returns, 0.0),
            n_trades: self.n_trades,
            forced_close: self.forced_close,
        }
    }
}

/// JSON summary of one ledger. Ratios are raw (not percentages).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LedgerSummary {
    pub profit: f64,
    #[serde(rename = "return")]
    pub return_on_capital: Option<f64>,
    pub cumulative_return: f64,
    pub mean_trade_return: Option<f64>,
    #[serde(rename = "E(R)")]
    pub expected_return: Option<f64>,
    #[serde(rename = "Std(R)")]
    pub std_return: Option<f64>,
    pub sharpe: Option<f64>,
    pub n_trades: usize,
    pub forced_close: bool,
}

/// Renders a ratio as a percentage string, e.g. `0.0107 -> "1.07%"`.
pub fn percent(x: f64) -> String {
    format!("{:.2}%", 100.0 * x)
}

fn in_period<'a>(prices: &'a [PriceBar], cfg: &StrategyConfig) -> Vec<&'a PriceBar> {
    prices
        .iter()
        .filter(|b| cfg.start_date.is_none_or(|s| b.date >= s))
        .filter(|b| cfg.end_date.is_none_or(|e| b.date <= e))
        .collect()
}

/// Runs explicit per-day actions: BUY fills when flat, SELL when long, at
/// that day's adjusted close, each fill charged `cost_rate × notional`. An
/// open position on the last day is closed there and flagged; a BUY on the
/// last day is not executed.
pub fn simulate_actions(
    prices: &[PriceBar],
    actions: &[Action],
    cfg: &StrategyConfig,
) -> Result<TradeLedger> {
    cfg.validate()?;
    if prices.len() != actions.len() {
        return Err(Error::Alignment(format!(
            "{} actions for {} trading days",
            actions.len(),
            prices.len()
        )));
    }
    if prices.windows(2).any(|w| w[0].date >= w[1].date) {
        return Err(Error::Data("price days must be strictly increasing".into()));
    }
    if let Some(b) = prices.iter().find(|b| !(b.adj_close > 0.0)) {
        return Err(Error::Data(format!("{}: non-positive adjusted close", b.date)));
    }
    let n = prices.len();
    let mut events = Vec::with_capacity(n);
    let mut position = 0.0;
    let mut profit = 0.0;
    let mut n_trades = 0;
    let mut weights = Vec::with_capacity(n);
    let mut trade_returns = Vec::new();
    let mut entry: Option<f64> = None;
    let mut first_buy: Option<f64> = None;
    let mut forced_close = false;
    for (i, (bar, &wanted)) in prices.iter().zip(actions).enumerate() {
        let p = bar.adj_close;
        let last = i == n - 1;
        let mut action = match wanted {
            // a position opened on the last day could only be force-closed at once
            Action::Buy if position == 0.0 && !last => Action::Buy,
            Action::Sell if position > 0.0 => Action::Sell,
            _ => Action::Hold,
        };
        if last && position > 0.0 && action != Action::Sell {
            action = Action::Sell;
            forced_close = true;
        }
        let notional = cfg.shares * p;
        let (cost, cash_delta) = match action {
            Action::Buy => {
                let cost = cfg.cost_rate * notional;
                position = cfg.shares;
                entry = Some(p);
                first_buy.get_or_insert(p);
                (cost, -notional - cost)
            }
            Action::Sell => {
                let cost = cfg.cost_rate * notional;
                position = 0.0;
                if let Some(b) = entry.take() {
                    let outlay = cfg.shares * b;
                    trade_returns
                        .push((notional - outlay - cost - cfg.cost_rate * outlay) / outlay);
                }
                (cost, notional - cost)
            }
            Action::Hold => (0.0, 0.0),
        };
        if action != Action::Hold {
            n_trades += 1;
        }
        profit += cash_delta;
        weights.push(if position > 0.0 { 1.0 } else { 0.0 });
        events.push(LedgerEvent {
            date: bar.date,
            action,
            price: p,
            cost,
            position,
            cash_delta,
        });
    }
    let mut daily_returns = Vec::with_capacity(n.saturating_sub(1));
    let mut weighted_returns = Vec::with_capacity(n.saturating_sub(1));
    for t in 1..n {
        let r = daily_return(prices[t].adj_close, prices[t - 1].adj_close)?;
        daily_returns.push(r);
        weighted_returns.push(weighted_return(weights[t - 1], r));
    }
    let cumulative_return = weighted_returns.iter().fold(1.0, |acc, r| acc * (1.0 + r)) - 1.0;
    Ok(TradeLedger {
        events,
        profit,
        forced_close,
        n_trades,
        daily_returns,
        weighted_returns,
        trade_returns,
        return_on_capital: first_buy.map(|b| profit / (cfg.shares * b)),
        cumulative_return,
    })
}

/// Dated movement score.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScorePoint {
    pub date: NaiveDate,
    pub score: f64,
}

/// Per-day actions for `kind` from raw signals.
pub fn strategy_actions(signals: &[Action], kind: StrategyKind) -> Vec<Action> {
    let n = signals.len();
    let mut out = vec![Action::Hold; n];
    match kind {
        StrategyKind::FiftyFifty | StrategyKind::SixtyForty => out.copy_from_slice(signals),
        StrategyKind::HoldSignal => {
            if let Some(i) = signals.iter().position(|&a| a == Action::Buy) {
                out[i] = Action::Buy;
                if let Some(j) = signals.iter().rposition(|&a| a == Action::Sell).filter(|&j| j > i) {
                    out[j] = Action::Sell;
                }
            }
        }
        StrategyKind::HoldPeriod => {
            if n > 0 {
                out[0] = Action::Buy;
            }
            if n > 1 {
                out[n - 1] = Action::Sell;
            }
        }
    }
    out
}

/// Simulates the configured strategy over the trading days in
/// `[start_date, end_date]`. Every such day needs a score.
pub fn simulate(prices: &[PriceBar], scores: &[ScorePoint], cfg: &StrategyConfig) -> Result<TradeLedger> {
    cfg.validate()?;
    let days = in_period(prices, cfg);
    if days.is_empty() {
        return Err(Error::Data("no trading days in the backtest period".into()));
    }
    let by_date: HashMap<NaiveDate, f64> = scores.iter().map(|s| (s.date, s.score)).collect();
    let mut signals = Vec::with_capacity(days.len());
    for b in &days {
        let s = by_date
            .get(&b.date)
            .ok_or_else(|| Error::Alignment(format!("no score for trading day {}", b.date)))?;
        if !s.is_finite() {
            return Err(Error::Data(format!("{}: non-finite score", b.date)));
        }
        signals.push(signal(*s, cfg));
    }
    let actions = strategy_actions(&signals, cfg.kind);
    let bars: Vec<PriceBar> = days.into_iter().copied().collect();
    simulate_actions(&bars, &actions, cfg)
}

pub fn read_scores<R: Read>(reader: R, source_name: &str) -> Result<Vec<ScorePoint>> {
    #[derive(Deserialize)]
    struct Row {
        #[serde(rename = "Date")]
        date: String,
        #[serde(rename = "Score")]
        score: f64,
    }
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut out = Vec::new();
    for (i, row) in rdr.deserialize::<Row>().enumerate() {
        let line = i + 2;
        let row = row.map_err(|e| Error::parse(source_name, line, e.to_string()))?;
        let date = NaiveDate::parse_from_str(&row.date, "%Y-%m-%d")
            .map_err(|e| Error::parse(source_name, line, format!("date `{}`: {e}", row.date)))?;
        if !(0.0..=1.0).contains(&row.score) {
            return Err(Error::parse(source_name, line, format!("score {} outside [0, 1]", row.score)));
        }
        out.push(ScorePoint {
            date,
            score: row.score,
        });
    }
    Ok(out)
}

pub fn load_scores(path: &Path) -> Result<Vec<ScorePoint>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_scores(f, &path.display().to_string())
}

pub fn write_scores<W: Write>(scores: &[ScorePoint], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["Date", "Score"])?;
    for s in scores {
        wtr.write_record([s.date.to_string(), s.score.to_string()])?;
    }
    wtr.flush().map_err(|e| Error::io("scores csv", e))
}

pub fn mean(xs: &[f64]) -> Option<f64> {
    (!xs.is_empty()).then(|| xs.iter().sum::<f64>() / xs.len() as f64)
}

/// Sample (n − 1) standard deviation; `None` below two values.
pub fn sample_std(xs: &[f64]) -> Option<f64> {
    if xs.len() < 2 {
        return None;
    }
    let m = mean(xs)?;
    let ss: f64 = xs.iter().map(|x| (x - m) * (x - m)).sum();
    Some((ss / (xs.len() - 1) as f64).sqrt())
}

/// `mean(r − rf) / sample_std(r)`; `None` with fewer than two returns or
/// zero spread.
pub fn sharpe(returns: &[f64], risk_free: f64) -> Option<f64> {
    let sd = sample_std(returns)?;
    if sd == 0.0 {
        return None;
    }
    let excess: Vec<f64> = returns.iter().map(|r| r - risk_free).collect();
    Some(mean(&excess)? / sd)
}

/// `w_i = p_i / Σp`.
pub fn market_weights(prices: &[f64]) -> Result<Vec<f64>> {
    if prices.is_empty() {
        return Err(Error::Contract("no prices to weight".into()));
    }
    if let Some(p) = prices.iter().find(|p| !(**p > 0.0)) {
        return Err(Error::Data(format!("non-positive price {p}")));
    }
    let total: f64 = prices.iter().sum();
    Ok(prices.iter().map(|p| p / total).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PortfolioStats {
    #[serde(rename = "E(R)")]
    pub expected_return: f64,
    #[serde(rename = "Std(R)")]
    pub std_return: Option<f64>,
    pub sharpe: Option<f64>,
    pub total_profit: f64,
}

/// `E(R) = Σ w_i mean(R_i)`; `Std(R)` is the sample std of the combined
/// daily series `Σ w_i R_{i,t}`.
pub fn portfolio_stats(ledgers: &[&TradeLedger], weights: &[f64]) -> Result<PortfolioStats> {
    if ledgers.is_empty() || ledgers.len() != weights.len() {
        return Err(Error::Contract(format!(
            "{} ledgers for {} weights",
            ledgers.len(),
            weights.len()
        )));
    }
    if weights.iter().any(|w| !(*w >= 0.0)) || (weights.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
        return Err(Error::Contract("weights must be non-negative and sum to 1".into()));
    }
    let first: Vec<NaiveDate> = ledgers[0].dates().collect();
    for l in &ledgers[1..] {
        if !l.dates().eq(first.iter().copied()) {
            return Err(Error::Alignment("ledgers cover different trading days".into()));
        }
    }
    let n = ledgers[0].weighted_returns.len();
    let mut combined = vec![0.0; n];
    let mut expected = 0.0;
    for (l, &w) in ledgers.iter().zip(weights) {
        expected += w * mean(&l.weighted_returns).unwrap_or(0.0);
        for (c, r) in combined.iter_mut().zip(&l.weighted_returns) {
            *c += w * r;
        }
    }
    Ok(PortfolioStats {
        expected_return: expected,
        std_return: sample_std(&combined),
        sharpe: sharpe(&combined, 0.0),
        total_profit: ledgers.iter().map(|l| l.profit).sum(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct McRun {
    pub run: usize,
    pub tickers: Vec<String>,
    pub profit: f64,
    pub expected_return: f64,
    pub std_return: Option<f64>,
}

/// `pick` distinct indices from `0..n` by a partial Fisher–Yates shuffle.
pub fn sample_indices<R: Rng>(n: usize, pick: usize, rng: &mut R) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..n).collect();
    for i in 0..pick.min(n) {
        // u64 ranges keep the draw identical on 32- and 64-bit targets
        let j = rng.gen_range(i as u64..n as u64) as usize;
        idx.swap(i, j);
    }
    idx.truncate(pick);
    idx
}

/// Each run draws `pick` tickers without replacement from its own stream and
/// records the portfolio profit and market-weighted return statistics.
pub fn monte_carlo(
    ledgers: &BTreeMap<String, TradeLedger>,
    runs: usize,
    pick: usize,
    seed: u64,
) -> Result<Vec<McRun>> {
    if pick == 0 || ledgers.len() < pick {
        return Err(Error::Contract(format!(
            "cannot pick {pick} of {} tickers",
            ledgers.len()
        )));
    }
    let names: Vec<&String> = ledgers.keys().collect();
    (0..runs)
        .into_par_iter()
        .map(|run| {
            let mut rng = rng::indexed_stream(seed, streams::MONTE_CARLO, run as u64);
            let mut chosen = sample_indices(names.len(), pick, &mut rng);
            chosen.sort_unstable();
            let picked: Vec<&TradeLedger> = chosen.iter().map(|&i| &ledgers[names[i]]).collect();
            let start_prices: Vec<f64> = picked.iter().map(|l| l.events[0].price).collect();
            let weights = market_weights(&start_prices)?;
            let stats = portfolio_stats(&picked, &weights)?;
            Ok(McRun {
                run,
                tickers: chosen.iter().map(|&i| names[i].clone()).collect(),
                profit: stats.total_profit,
                expected_return: stats.expected_return,
                std_return: stats.std_return,
            })
        })
        .collect()
}

/// `run,tickers,profit,expected_return,std_return`.
pub fn write_mc_csv<W: Write>(runs: &[McRun], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["run", "tickers", "profit", "expected_return", "std_return"])?;
    for r in runs {
        wtr.write_record([
            r.run.to_string(),
            r.tickers.join(";"),
            r.profit.to_string(),
            r.expected_return.to_string(),
            r.std_return.map(|s| s.to_string()).unwrap_or_default(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("monte carlo csv", e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TTest {
    pub t: f64,
    /// Welch–Satterthwaite degrees of freedom.
    pub df: f64,
    pub p_two_sided: f64,
    /// `P(T > t)`.
    pub p_upper: f64,
    /// Two-sided `p < 0.05`.
    pub reject_at_95: bool,
}

pub fn student_t(df: f64) -> Result<StudentsT> {
    StudentsT::new(0.0, 1.0, df).map_err(|e| Error::Numerical(format!("t distribution (df {df}): {e}")))
}

/// Two-sided critical value `t_{1−α/2, df}`.
pub fn t_critical(df: f64, alpha: f64) -> Result<f64> {
    Ok(student_t(df)?.inverse_cdf(1.0 - alpha / 2.0))
}

/// Two-sided and upper-tail p-values of `t` at `df`.
pub fn t_p_values(t: f64, df: f64) -> Result<(f64, f64)> {
    let dist = student_t(df)?;
    Ok(((2.0 * dist.sf(t.abs())).min(1.0), dist.sf(t)))
}

/// Welch's unequal-variance t-test of `mean(a) − mean(b)`. `Ok(None)` when
/// both samples have zero variance (the statistic is undefined).
pub fn t_test(a: &[f64], b: &[f64]) -> Result<Option<TTest>> {
    if a.len() < 2 || b.len() < 2 {
        return Err(Error::Contract("each sample needs at least 2 values".into()));
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (ma, mb) = (mean(a).unwrap_or(0.0), mean(b).unwrap_or(0.0));
    let va = sample_std(a).unwrap_or(0.0).powi(2) / na;
    let vb = sample_std(b).unwrap_or(0.0).powi(2) / nb;
    let se2 = va + vb;
    if se2 == 0.0 {
        log::warn!("t-test undefined: both samples have zero variance");
        return Ok(None);
    }
    let t = (ma - mb) / se2.sqrt();
    let df = se2 * se2 / (va * va / (na - 1.0) + vb * vb / (nb - 1.0));
    let (p_two_sided, p_upper) = t_p_values(t, df)?;
    Ok(Some(TTest {
        t,
        df,
        p_two_sided,
        p_upper,
        reject_at_95: p_two_sided < 0.05,
    }))
}
