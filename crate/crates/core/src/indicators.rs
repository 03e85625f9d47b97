//! SMA / EMA / MACD baselines and their crossover signals.

use crate::backtest::Action;
use crate::error::{Error, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};
use std::io::Write;

pub const SMA_WINDOW: usize = 5;
pub const MACD_FAST: usize = 12;
pub const MACD_SLOW: usize = 26;
pub const MACD_SIGNAL: usize = 9;

/// Trailing mean over `window` prices; the first `window − 1` entries are
/// `None`. Empty when the series is shorter than the window.
pub fn sma(prices: &[f64], window: usize) -> Result<Vec<Option<f64>>> {
    if window == 0 {
        return Err(Error::Contract("SMA window must be at least 1".into()));
    }
    if window > prices.len() {
        log::warn!("SMA window {window} exceeds series length {}", prices.len());
        return Ok(Vec::new());
    }
    Ok((0..prices.len())
        .map(|t| {
            (t + 1 >= window).then(|| prices[t + 1 - window..=t].iter().sum::<f64>() / window as f64)
        })
        .collect())
}

/// `e_0 = p_0`, `e_t = e_{t−1} + α (p_t − e_{t−1})` with `α = 2 / (period + 1)`.
pub fn ema(prices: &[f64], period: usize) -> Result<Vec<f64>> {
    if period == 0 {
        return Err(Error::Contract("EMA period must be at least 1".into()));
    }
    let alpha = 2.0 / (period as f64 + 1.0);
    let mut out = Vec::with_capacity(prices.len());
    let mut prev: Option<f64> = None;
    for &p in prices {
        let e = match prev {
            None => p,
            Some(e) => e + alpha * (p - e),
        };
        out.push(e);
        prev = Some(e);
    }
    Ok(out)
}

/// Sign of `x` with values within `tol` of zero treated as zero.
fn sign(x: f64, tol: f64) -> i8 {
    if x > tol {
        1
    } else if x < -tol {
        -1
    } else {
        0
    }
}

/// BUY when `series` turns positive, SELL when it turns negative. The state
/// is the last nonzero sign, so touching zero is not a crossing and signals
/// strictly alternate. The first defined value only sets the state.
fn crossings(series: &[Option<f64>], tol: f64) -> Vec<Action> {
    let mut out = vec![Action::Hold; series.len()];
    let mut state: Option<i8> = None;
    for (t, v) in series.iter().enumerate() {
        let Some(v) = v else { continue };
        let s = sign(*v, tol);
        match state {
            None => state = Some(s),
            Some(prev) => {
                if s == 1 && prev <= 0 {
                    out[t] = Action::Buy;
                } else if s == -1 && prev >= 0 {
                    out[t] = Action::Sell;
                }
                if s != 0 {
                    state = Some(s);
                }
            }
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Macd {
    pub fast: usize,
    pub slow: usize,
    pub signal_period: usize,
    /// `EMA_fast − EMA_slow`
    pub value: Vec<f64>,
    /// `EMA_signal(value)`
    pub signal: Vec<f64>,
    /// `value − signal`
    pub divergence: Vec<f64>,
    pub actions: Vec<Action>,
}

pub fn macd(prices: &[f64], fast: usize, slow: usize, signal_period: usize) -> Result<Macd> {
    if fast == 0 || signal_period == 0 || fast >= slow {
        return Err(Error::Contract(format!(
            "MACD periods need 1 <= fast < slow and signal >= 1, got ({fast}, {slow}, {signal_period})"
        )));
    }
    if prices.len() <= slow {
        return Err(Error::Contract(format!(
            "MACD needs more than {slow} prices, got {}",
            prices.len()
        )));
    }
    let ef = ema(prices, fast)?;
    let es = ema(prices, slow)?;
    let value: Vec<f64> = ef.iter().zip(&es).map(|(a, b)| a - b).collect();
    let signal = ema(&value, signal_period)?;
    let divergence: Vec<f64> = value.iter().zip(&signal).map(|(v, s)| v - s).collect();
    let actions = crossings(&divergence.iter().map(|&d| Some(d)).collect::<Vec<_>>(), 0.0);
    Ok(Macd {
        fast,
        slow,
        signal_period,
        value,
        signal,
        divergence,
        actions,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SmaSignals {
    pub window: usize,
    pub sma: Vec<Option<f64>>,
    pub actions: Vec<Action>,
}

/// Price/SMA crossover: BUY when the price moves above its SMA, SELL when
/// it moves below it. Differences within 1e-12 of the largest price
/// count as zero so that a flat series never signals.
pub fn sma_signal(prices: &[f64], window: usize) -> Result<SmaSignals> {
    let s = sma(prices, window)?;
    if s.is_empty() {
        return Ok(SmaSignals {
            window,
            sma: s,
            actions: vec![Action::Hold; prices.len()],
        });
    }
    let scale = prices.iter().fold(0.0f64, |m, p| m.max(p.abs()));
    let diff: Vec<Option<f64>> = prices.iter().zip(&s).map(|(p, m)| m.map(|m| p - m)).collect();
    Ok(SmaSignals {
        window,
        actions: crossings(&diff, 1e-12 * scale),
        sma: s,
    })
}

/// Maps indicator actions onto scores so they can be replayed through the
/// score-driven backtest with 60-40 thresholds: BUY → 1, SELL → 0, HOLD → 0.5.
pub fn actions_to_scores(actions: &[Action]) -> Vec<f64> {
    actions
        .iter()
        .map(|a| match a {
            Action::Buy => 1.0,
            Action::Sell => 0.0,
            Action::Hold => 0.5,
        })
        .collect()
}

/// `Date,Value,Signal,Divergence,Action`.
pub fn write_macd_csv<W: Write>(dates: &[NaiveDate], m: &Macd, w: W) -> Result<()> {
    if dates.len() != m.value.len() {
        return Err(Error::Alignment("dates and MACD series differ in length".into()));
    }
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["Date", "Value", "Signal", "Divergence", "Action"])?;
    for (i, d) in dates.iter().enumerate() {
        wtr.write_record([
            d.to_string(),
            m.value[i].to_string(),
            m.signal[i].to_string(),
            m.divergence[i].to_string(),
            m.actions[i].to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("macd csv", e))
}

/// `Date,SMA,Action`; undefined SMA values are empty.
pub fn write_sma_csv<W: Write>(dates: &[NaiveDate], s: &SmaSignals, w: W) -> Result<()> {
    if dates.len() != s.actions.len() {
        return Err(Error::Alignment("dates and SMA series differ in length".into()));
    }
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["Date", "SMA", "Action"])?;
    for (i, d) in dates.iter().enumerate() {
        let v = s.sma.get(i).copied().flatten().map(|v| v.to_string()).unwrap_or_default();
        wtr.write_record([d.to_string(), v, s.actions[i].to_string()])?;
    }
    wtr.flush().map_err(|e| Error::io("sma csv", e))
}
