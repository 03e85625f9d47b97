use crate::error::{Error, Result};
use chrono::NaiveDate;
use serde::{Deserialize, Serialize};

/// One daily price bar as read from a price file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriceBar {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub adj_close: f64,
    pub volume: f64,
}

impl PriceBar {
    pub fn validate(&self) -> Result<()> {
        let prices = [self.open, self.high, self.low, self.close, self.adj_close];
        if prices.iter().any(|p| !p.is_finite() || *p <= 0.0) {
            return Err(Error::Data(format!("{}: prices must be positive", self.date)));
        }
        if self.high < self.open.max(self.close) || self.low > self.open.min(self.close) {
            return Err(Error::Data(format!(
                "{}: high/low do not bracket open/close",
                self.date
            )));
        }
        if !(self.volume >= 0.0) {
            return Err(Error::Data(format!("{}: negative volume", self.date)));
        }
        Ok(())
    }
}

/// One trading day: prices, the day's tweet tokens (vocabulary indices) and
/// the movement label once assigned.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DayRecord {
    pub date: NaiveDate,
    pub open: f64,
    pub high: f64,
    pub low: f64,
    pub close: f64,
    pub adj_close: f64,
    pub volume: f64,
    pub tokens: Vec<usize>,
    pub covid_flag: bool,
    pub label: Option<u8>,
}

impl DayRecord {
    pub fn from_bar(bar: &PriceBar) -> Self {
        Self {
            date: bar.date,
            open: bar.open,
            high: bar.high,
            low: bar.low,
            close: bar.close,
            adj_close: bar.adj_close,
            volume: bar.volume,
            tokens: Vec::new(),
            covid_flag: false,
            label: None,
        }
    }

    pub fn bar(&self) -> PriceBar {
        PriceBar {
            date: self.date,
            open: self.open,
            high: self.high,
            low: self.low,
            close: self.close,
            adj_close: self.adj_close,
            volume: self.volume,
        }
    }

    /// Price features fed to the model, in order `[open, high, low, adj_close]`.
    pub fn price_features(&self) -> [f64; 4] {
        [self.open, self.high, self.low, self.adj_close]
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bar(o: f64, h: f64, l: f64, c: f64) -> PriceBar {
        PriceBar {
            date: NaiveDate::from_ymd_opt(2020, 3, 2).unwrap(),
            open: o,
            high: h,
            low: l,
            close: c,
            adj_close: c,
            volume: 10.0,
        }
    }

    #[test]
    fn bar_invariants() {
        assert!(bar(10.0, 12.0, 9.0, 11.0).validate().is_ok());
        assert!(bar(10.0, 10.5, 9.0, 11.0).validate().is_err());
        assert!(bar(10.0, 12.0, 10.5, 11.0).validate().is_err());
        assert!(bar(-1.0, 12.0, 9.0, 11.0).validate().is_err());
    }
}
