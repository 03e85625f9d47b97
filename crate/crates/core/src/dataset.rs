//! Price ingestion, tweet/price alignment, horizon labeling, date splits and
//! summary statistics.

use crate::error::{Error, Result};
use crate::record::{DayRecord, PriceBar};
use crate::text::{is_covid_token, tokenize, Tweet, Vocabulary};
use chrono::{Datelike, NaiveDate, Weekday};
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::io::{BufRead, BufReader, Read, Write};
use std::path::Path;

pub const DEFAULT_HORIZON: usize = 5;
pub const DEFAULT_THRESHOLD: usize = 3;

#[derive(Debug, Deserialize)]
struct PriceRow {
    #[serde(rename = "Date")]
    date: String,
    #[serde(rename = "Open")]
    open: f64,
    #[serde(rename = "High")]
    high: f64,
    #[serde(rename = "Low")]
    low: f64,
    #[serde(rename = "Close")]
    close: f64,
    #[serde(rename = "AdjClose")]
    adj_close: f64,
    #[serde(rename = "Volume")]
    volume: f64,
}

/// Reads `Date,Open,High,Low,Close,AdjClose,Volume` rows, sorted by date.
pub fn read_prices<R: Read>(reader: R, source_name: &str) -> Result<Vec<PriceBar>> {
    let mut rdr = csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(reader);
    let mut bars = Vec::new();
    for (i, row) in rdr.deserialize::<PriceRow>().enumerate() {
        // header is line 1
        let line = i + 2;
        let row = row.map_err(|e| Error::parse(source_name, line, e.to_string()))?;
        let date = NaiveDate::parse_from_str(&row.date, "%Y-%m-%d")
            .map_err(|e| Error::parse(source_name, line, format!("date `{}`: {e}", row.date)))?;
        let bar = PriceBar {
            date,
            open: row.open,
            high: row.high,
            low: row.low,
            close: row.close,
            adj_close: row.adj_close,
            volume: row.volume,
        };
        bar.validate()
            .map_err(|e| Error::parse(source_name, line, e.to_string()))?;
        bars.push(bar);
    }
    bars.sort_by_key(|b| b.date);
    let dups: Vec<String> = bars
        .windows(2)
        .filter(|w| w[0].date == w[1].date)
        .map(|w| w[0].date.to_string())
        .collect();
    if !dups.is_empty() {
        return Err(Error::Data(format!(
            "{source_name}: duplicate price dates {}",
            dups.join(", ")
        )));
    }
    Ok(bars)
}

pub fn load_prices(path: &Path) -> Result<Vec<PriceBar>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_prices(f, &path.display().to_string())
}

/// Every `*.csv` in `dir`, keyed by file stem (the ticker).
pub fn load_price_dir(dir: &Path) -> Result<BTreeMap<String, Vec<PriceBar>>> {
    let mut out = BTreeMap::new();
    let entries = std::fs::read_dir(dir).map_err(|e| Error::io(dir, e))?;
    for entry in entries {
        let path = entry.map_err(|e| Error::io(dir, e))?.path();
        if path.extension().and_then(|e| e.to_str()) != Some("csv") {
            continue;
        }
        let ticker = path
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| Error::Data(format!("{}: bad file name", path.display())))?
            .to_string();
        out.insert(ticker, load_prices(&path)?);
    }
    if out.is_empty() {
        return Err(Error::Data(format!("{}: no price files (*.csv)", dir.display())));
    }
    Ok(out)
}

/// Ordered trading dates taken from a price file.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TradingCalendar {
    dates: Vec<NaiveDate>,
}

impl TradingCalendar {
    pub fn new(dates: Vec<NaiveDate>) -> Result<Self> {
        if let Some(w) = dates.windows(2).find(|w| w[0] >= w[1]) {
            return Err(Error::Data(format!(
                "trading dates not strictly increasing at {} -> {}",
                w[0], w[1]
            )));
        }
        if let Some(d) = dates
            .iter()
            .find(|d| matches!(d.weekday(), Weekday::Sat | Weekday::Sun))
        {
            return Err(Error::Data(format!("{d} is a weekend date")));
        }
        Ok(Self { dates })
    }

    pub fn dates(&self) -> &[NaiveDate] {
        &self.dates
    }

    pub fn len(&self) -> usize {
        self.dates.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dates.is_empty()
    }

    /// Index of the first trading day on or after `date`.
    pub fn on_or_after(&self, date: NaiveDate) -> Option<usize> {
        let i = self.dates.partition_point(|d| *d < date);
        (i < self.dates.len()).then_some(i)
    }
}

/// Records plus, for every input tweet, the record it was attached to.
#[derive(Debug, Clone, PartialEq)]
pub struct Alignment {
    pub records: Vec<DayRecord>,
    pub assignment: Vec<Option<usize>>,
}

/// One record per trading day; each tweet's tokens go to the trading day on
/// or after its date. Tweets after the last trading day are dropped.
pub fn align(bars: &[PriceBar], tweets: &[Tweet], vocab: &Vocabulary) -> Result<Alignment> {
    let mut sorted = bars.to_vec();
    sorted.sort_by_key(|b| b.date);
    let dups: Vec<String> = sorted
        .windows(2)
        .filter(|w| w[0].date == w[1].date)
        .map(|w| w[0].date.to_string())
        .collect();
    if !dups.is_empty() {
        return Err(Error::Data(format!("duplicate price dates {}", dups.join(", "))));
    }
    let calendar = TradingCalendar::new(sorted.iter().map(|b| b.date).collect())?;
    let mut records: Vec<DayRecord> = sorted.iter().map(DayRecord::from_bar).collect();
    let mut order: Vec<usize> = (0..tweets.len()).collect();
    order.sort_by_key(|&i| tweets[i].date);
    let mut assignment = vec![None; tweets.len()];
    let mut dropped = 0;
    for i in order {
        let tweet = &tweets[i];
        let Some(day) = calendar.on_or_after(tweet.date) else {
            dropped += 1;
            continue;
        };
        let toks = tokenize(&tweet.text);
        let rec = &mut records[day];
        rec.covid_flag |= toks.iter().any(|t| is_covid_token(t));
        rec.tokens.extend(vocab.encode(&toks));
        assignment[i] = Some(day);
    }
    if dropped > 0 {
        log::warn!("{dropped} tweet(s) dated after the last trading day were dropped");
    }
    Ok(Alignment {
        records,
        assignment,
    })
}

/// `u_k = 1` iff `closes[d + k] > closes[d + k - 1]`, for `k = 1..=horizon`.
pub fn up_pattern(closes: &[f64], day: usize, horizon: usize) -> Option<Vec<u8>> {
    if day + horizon >= closes.len() {
        return None;
    }
    Some(
        (1..=horizon)
            .map(|k| u8::from(closes[day + k] > closes[day + k - 1]))
            .collect(),
    )
}

pub fn label_from_pattern(pattern: &[u8], threshold: usize) -> u8 {
    u8::from(pattern.iter().map(|&u| usize::from(u)).sum::<usize>() >= threshold)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    /// All records in date order; the last `horizon` carry no label.
    pub records: Vec<DayRecord>,
    pub horizon: usize,
    pub threshold: usize,
}

impl LabeledDataset {
    pub fn labeled(&self) -> impl Iterator<Item = &DayRecord> {
        self.records.iter().filter(|r| r.label.is_some())
    }

    pub fn labeled_count(&self) -> usize {
        self.labeled().count()
    }
}

/// Day `d` is labeled 1 iff at least `threshold` of the next `horizon`
/// adjusted-close moves are strictly up.
pub fn label(records: &[DayRecord], horizon: usize, threshold: usize) -> Result<LabeledDataset> {
    if horizon == 0 {
        return Err(Error::Contract("horizon must be at least 1".into()));
    }
    if records.windows(2).any(|w| w[0].date >= w[1].date) {
        return Err(Error::Contract("records must be sorted by strictly increasing date".into()));
    }
    let mut out = records.to_vec();
    if records.len() < horizon + 1 {
        log::warn!(
            "{} record(s) is fewer than horizon + 1 = {}; no day can be labeled",
            records.len(),
            horizon + 1
        );
    }
    let closes: Vec<f64> = records.iter().map(|r| r.adj_close).collect();
    for (d, rec) in out.iter_mut().enumerate() {
        rec.label = up_pattern(&closes, d, horizon).map(|p| label_from_pattern(&p, threshold));
    }
    Ok(LabeledDataset {
        records: out,
        horizon,
        threshold,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitDates {
    pub train_end: NaiveDate,
    pub val_end: NaiveDate,
    pub test_end: NaiveDate,
}

impl Default for SplitDates {
    fn default() -> Self {
        let d = |y, m, day| NaiveDate::from_ymd_opt(y, m, day).expect("valid date");
        Self {
            train_end: d(2020, 1, 31),
            val_end: d(2020, 2, 29),
            test_end: d(2020, 7, 30),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct Splits {
    pub train: Vec<DayRecord>,
    pub val: Vec<DayRecord>,
    pub test: Vec<DayRecord>,
}

/// Labeled days partitioned as `train ≤ train_end < val ≤ val_end < test ≤ test_end`.
pub fn split(dataset: &LabeledDataset, dates: &SplitDates) -> Result<Splits> {
    if !(dates.train_end < dates.val_end && dates.val_end < dates.test_end) {
        return Err(Error::Contract(format!(
            "split dates must satisfy train_end < val_end < test_end, got {} / {} / {}",
            dates.train_end, dates.val_end, dates.test_end
        )));
    }
    let mut s = Splits::default();
    for r in dataset.labeled() {
        if r.date <= dates.train_end {
            s.train.push(r.clone());
        } else if r.date <= dates.val_end {
            s.val.push(r.clone());
        } else if r.date <= dates.test_end {
            s.test.push(r.clone());
        }
    }
    for (name, part) in [("train", &s.train), ("validation", &s.val), ("test", &s.test)] {
        if part.is_empty() {
            log::warn!("{name} split is empty");
        }
    }
    Ok(s)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Field {
    Open,
    High,
    Low,
    Close,
    AdjClose,
    Volume,
    CovidFlag,
    Label,
    TokenCount,
}

impl Field {
    pub const ALL: [Field; 9] = [
        Field::Open,
        Field::High,
        Field::Low,
        Field::Close,
        Field::AdjClose,
        Field::Volume,
        Field::CovidFlag,
        Field::Label,
        Field::TokenCount,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Field::Open => "open",
            Field::High => "high",
            Field::Low => "low",
            Field::Close => "close",
            Field::AdjClose => "adj_close",
            Field::Volume => "volume",
            Field::CovidFlag => "covid_flag",
            Field::Label => "label",
            Field::TokenCount => "token_count",
        }
    }

    fn value(self, r: &DayRecord) -> Option<f64> {
        Some(match self {
            Field::Open => r.open,
            Field::High => r.high,
            Field::Low => r.low,
            Field::Close => r.close,
            Field::AdjClose => r.adj_close,
            Field::Volume => r.volume,
            Field::CovidFlag => f64::from(u8::from(r.covid_flag)),
            Field::Label => f64::from(r.label?),
            Field::TokenCount => r.tokens.len() as f64,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CorrelationMatrix {
    pub fields: Vec<Field>,
    /// Row-major, `NaN` where a field has zero variance.
    pub values: Vec<Vec<f64>>,
}

impl CorrelationMatrix {
    pub fn get(&self, a: Field, b: Field) -> Option<f64> {
        let i = self.fields.iter().position(|f| *f == a)?;
        let j = self.fields.iter().position(|f| *f == b)?;
        Some(self.values[i][j])
    }

    pub fn write_csv<W: Write>(&self, w: W) -> Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header = vec!["field".to_string()];
        header.extend(self.fields.iter().map(|f| f.name().to_string()));
        wtr.write_record(&header)?;
        for (f, row) in self.fields.iter().zip(&self.values) {
            let mut rec = vec![f.name().to_string()];
            rec.extend(row.iter().map(|v| v.to_string()));
            wtr.write_record(&rec)?;
        }
        wtr.flush().map_err(|e| Error::io("correlation csv", e))
    }
}

/// Pearson correlations between `fields` over `records`. A zero-variance
/// field gets a `NaN` row and column (diagonal included).
pub fn correlation_matrix(records: &[DayRecord], fields: &[Field]) -> Result<CorrelationMatrix> {
    if records.len() < 2 {
        return Err(Error::Contract("correlation needs at least 2 records".into()));
    }
    let mut columns = Vec::with_capacity(fields.len());
    for &f in fields {
        let col = records
            .iter()
            .map(|r| f.value(r))
            .collect::<Option<Vec<f64>>>()
            .ok_or_else(|| Error::Contract(format!("field {} missing on some record", f.name())))?;
        columns.push(col);
    }
    let n = records.len() as f64;
    let centred: Vec<(Vec<f64>, f64)> = columns
        .iter()
        .map(|c| {
            let mean = c.iter().sum::<f64>() / n;
            let d: Vec<f64> = c.iter().map(|v| v - mean).collect();
            let ss = d.iter().map(|v| v * v).sum::<f64>();
            (d, ss)
        })
        .collect();
    let k = fields.len();
    let mut values = vec![vec![f64::NAN; k]; k];
    for i in 0..k {
        if centred[i].1 == 0.0 {
            log::warn!("field {} has zero variance", fields[i].name());
            continue;
        }
        values[i][i] = 1.0;
        for j in 0..i {
            if centred[j].1 == 0.0 {
                continue;
            }
            let dot: f64 = centred[i].0.iter().zip(&centred[j].0).map(|(a, b)| a * b).sum();
            let r = (dot / (centred[i].1.sqrt() * centred[j].1.sqrt())).clamp(-1.0, 1.0);
            values[i][j] = r;
            values[j][i] = r;
        }
    }
    Ok(CorrelationMatrix {
        fields: fields.to_vec(),
        values,
    })
}

/// Plot-ready `Date,AdjClose,CovidFlag,Label,TokenCount` rows.
pub fn write_labeled_csv<W: Write>(records: &[DayRecord], w: W) -> Result<()> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["Date", "AdjClose", "CovidFlag", "Label", "TokenCount"])?;
    for r in records {
        wtr.write_record([
            r.date.to_string(),
            r.adj_close.to_string(),
            u8::from(r.covid_flag).to_string(),
            r.label.map(|l| l.to_string()).unwrap_or_default(),
            r.tokens.len().to_string(),
        ])?;
    }
    wtr.flush().map_err(|e| Error::io("labeled csv", e))
}

/// One JSON object per record.
pub fn write_archive<W: Write>(records: &[DayRecord], mut w: W) -> Result<()> {
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n").map_err(|e| Error::io("archive", e))?;
    }
    Ok(())
}

pub fn read_archive<R: Read>(reader: R, source_name: &str) -> Result<Vec<DayRecord>> {
    let mut out = Vec::new();
    for (i, line) in BufReader::new(reader).lines().enumerate() {
        let line = line.map_err(|e| Error::parse(source_name, i + 1, e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DayRecord = serde_json::from_str(&line)
            .map_err(|e| Error::parse(source_name, i + 1, e.to_string()))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn load_archive(path: &Path) -> Result<Vec<DayRecord>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_archive(f, &path.display().to_string())
}

/// Counts for the dataset summary.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetSummary {
    pub trading_days: usize,
    pub labeled_days: usize,
    pub up_days: usize,
    pub down_days: usize,
    pub covid_days: usize,
    pub empty_text_days: usize,
    pub tokens: usize,
    pub unknown_tokens: usize,
}

pub fn summarize(dataset: &LabeledDataset, unknown_index: usize) -> DatasetSummary {
    let mut s = DatasetSummary {
        trading_days: dataset.records.len(),
        ..Default::default()
    };
    for r in &dataset.records {
        match r.label {
            Some(1) => s.up_days += 1,
            Some(_) => s.down_days += 1,
            None => {}
        }
        s.covid_days += usize::from(r.covid_flag);
        s.empty_text_days += usize::from(r.tokens.is_empty());
        s.tokens += r.tokens.len();
        s.unknown_tokens += r.tokens.iter().filter(|&&t| t == unknown_index).count();
    }
    s.labeled_days = s.up_days + s.down_days;
    s
}
